use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

pub const EPSILON: f64 = 1e-6;

/// Sample mean and unbiased covariance of row vectors.
pub fn moments(rows: &[Vec<f64>]) -> Result<(DVector<f64>, DMatrix<f64>)> {
    if rows.len() < 2 {
        return Err(Error::Argument(format!("need at least two feature vectors, got {}", rows.len())));
    }
    let d = rows[0].len();
    if d == 0 || rows.iter().any(|r| r.len() != d) {
        return Err(Error::Argument("feature vectors must share a positive dimension".into()));
    }
    let n = rows.len() as f64;
    let mut mean = DVector::zeros(d);
    for r in rows {
        mean += DVector::from_column_slice(r);
    }
    mean /= n;
    let mut cov = DMatrix::zeros(d, d);
    for r in rows {
        let c = DVector::from_column_slice(r) - &mean;
        cov += &c * c.transpose();
    }
    cov /= n - 1.0;
    Ok((mean, cov))
}

fn sym_sqrt(m: &DMatrix<f64>) -> DMatrix<f64> {
    let sym = (m + m.transpose()) * 0.5;
    let e = SymmetricEigen::new(sym);
    let vals = e.eigenvalues.map(|v| v.max(0.0).sqrt());
    &e.eigenvectors * DMatrix::from_diagonal(&vals) * e.eigenvectors.transpose()
}

/// Fréchet distance between two Gaussians.
pub fn frechet_distance(mu_a: &DVector<f64>, cov_a: &DMatrix<f64>, mu_b: &DVector<f64>, cov_b: &DMatrix<f64>) -> f64 {
    let diff = mu_a - mu_b;
    // tr sqrt(Σa Σb) = tr sqrt(Σa^½ Σb Σa^½), the latter symmetric
    let ra = sym_sqrt(cov_a);
    let inner = &ra * cov_b * &ra;
    let sym = (&inner + inner.transpose()) * 0.5;
    let tr_sqrt: f64 = SymmetricEigen::new(sym).eigenvalues.iter().map(|v| v.max(0.0).sqrt()).sum();
    (diff.dot(&diff) + cov_a.trace() + cov_b.trace() - 2.0 * tr_sqrt).max(0.0)
}

/// Fréchet distance between the Gaussians fitted to two feature sets, with
/// `EPSILON·I` added to both covariances.
pub fn frechet_proxy(a: &[Vec<f64>], b: &[Vec<f64>]) -> Result<f64> {
    let (ma, ca) = moments(a)?;
    let (mb, cb) = moments(b)?;
    if ma.len() != mb.len() {
        return Err(Error::Argument(format!("feature dimensions {} and {} differ", ma.len(), mb.len())));
    }
    let eye = DMatrix::identity(ma.len(), ma.len()) * EPSILON;
    Ok(frechet_distance(&ma, &(ca + &eye), &mb, &(cb + &eye)))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_distr::{Distribution, StandardNormal};

    fn draw(n: usize, mu: &[f64], chol: &DMatrix<f64>, seed: u64) -> Vec<Vec<f64>> {
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let d = mu.len();
        (0..n)
            .map(|_| {
                let z = DVector::from_iterator(d, (0..d).map(|_| StandardNormal.sample(&mut rng)));
                let x = chol * z;
                (0..d).map(|i| x[i] + mu[i]).collect()
            })
            .collect()
    }

    #[test]
    fn identical_sets_give_zero() {
        let a = draw(200, &[0.0, 1.0, 2.0], &DMatrix::identity(3, 3), 1);
        assert!(frechet_proxy(&a, &a).unwrap() <= 1e-6);
    }

    #[test]
    fn one_dimensional_shift() {
        let a = draw(20000, &[0.0], &DMatrix::identity(1, 1), 2);
        let b = draw(20000, &[1.5], &DMatrix::identity(1, 1), 3);
        assert!((frechet_proxy(&a, &b).unwrap() - 2.25).abs() < 0.1);
    }

    #[test]
    fn known_moments_closed_form() {
        // population Fréchet distance for two 3-D Gaussians, evaluated with
        // diagonalisable covariances where the trace term is explicit
        let la = DMatrix::from_row_slice(3, 3, &[1.0, 0.0, 0.0, 0.5, 0.8, 0.0, -0.3, 0.2, 0.6]);
        let lb = DMatrix::from_row_slice(3, 3, &[1.2, 0.0, 0.0, -0.2, 0.7, 0.0, 0.1, 0.4, 0.9]);
        let (mua, mub) = ([0.0, 0.5, -1.0], [1.0, -0.5, 0.5]);
        let ca = &la * la.transpose();
        let cb = &lb * lb.transpose();
        let exact = frechet_distance(
            &DVector::from_column_slice(&mua),
            &ca,
            &DVector::from_column_slice(&mub),
            &cb,
        );
        // independent evaluation of tr sqrt(Σa Σb) from the eigenvalues of the
        // (non-symmetric) product, which are real and non-negative
        let prod = &ca * &cb;
        let ev = prod.complex_eigenvalues();
        let tr: f64 = ev.iter().map(|z| z.re.max(0.0).sqrt()).sum();
        let diff = DVector::from_column_slice(&mua) - DVector::from_column_slice(&mub);
        let direct = diff.dot(&diff) + ca.trace() + cb.trace() - 2.0 * tr;
        assert!((exact - direct).abs() < 1e-9);

        let a = draw(40000, &mua, &la, 4);
        let b = draw(40000, &mub, &lb, 5);
        let est = frechet_proxy(&a, &b).unwrap();
        assert!((est - direct).abs() / direct < 0.02, "{est} vs {direct}");
    }

    #[test]
    fn degenerate_sets_rejected() {
        assert!(frechet_proxy(&[vec![1.0]], &[vec![1.0], vec![2.0]]).is_err());
        assert!(frechet_proxy(&[vec![1.0], vec![2.0]], &[vec![1.0, 0.0], vec![2.0, 0.0]]).is_err());
    }

    proptest::proptest! {
        #[test]
        fn non_negative(seed in 0u64..200) {
            let a = draw(30, &[0.0, 0.0], &DMatrix::identity(2, 2), seed);
            let b = draw(30, &[0.3, -0.1], &DMatrix::identity(2, 2), seed + 1000);
            proptest::prop_assert!(frechet_proxy(&a, &b).unwrap() >= 0.0);
        }
    }
}

use super::person::PersonContext;
use super::truth::TruthWarp;
use super::AGNOSTIC_FILL;
use crate::error::{Error, Result};
use crate::flowwarp::field::{apply_flow, FlowField};
use crate::image::{Mask, Raster};

/// One synthetic training record.
#[derive(Debug, Clone, PartialEq)]
pub struct SamplePair {
    pub sample_id: String,
    /// Flat garment on a zero background.
    pub c: Raster,
    /// Flat-clothes position mask.
    pub m_cp: Mask,
    /// Bare person.
    pub p: Raster,
    /// Person with the try-on region replaced by the fill value.
    pub p_a: Raster,
    /// Try-on region.
    pub m: Mask,
    /// Garment pixels visible on the try-on image.
    pub m_c: Mask,
    /// Ground-truth try-on image.
    pub t: Raster,
    pub c_w_gt: Raster,
    pub f_gt: FlowField,
    pub f_gt_inv: FlowField,
    pub pose_map: Raster,
}

/// Dresses the person in the garment warped by the ground-truth flow.
pub fn compose_sample(
    garment: &Raster,
    m_cp: &Mask,
    person: &PersonContext,
    warp: &TruthWarp,
    sample_id: &str,
) -> Result<SamplePair> {
    garment.ensure_same_grid(&person.image, "garment vs person canvas")?;
    m_cp.ensure_same_grid(&person.image, "garment mask vs person canvas")?;
    let c_w_gt = apply_flow(garment, &warp.forward)?;
    let warped_mask = apply_flow(m_cp, &warp.forward)?.threshold(0.5);
    let m_c = warped_mask.and(&person.body_mask)?.and(&person.tryon_mask)?;
    if m_c.mask_area() == 0 {
        return Err(Error::DegenerateSample(format!(
            "{sample_id}: warped garment does not overlap the body"
        )));
    }
    let t = Raster::select(&m_c, &c_w_gt, &person.image)?;
    let fill = Raster::filled(person.image.height, person.image.width, 3, AGNOSTIC_FILL);
    let p_a = Raster::select(&person.tryon_mask, &fill, &person.image)?;
    Ok(SamplePair {
        sample_id: sample_id.to_string(),
        c: garment.clone(),
        m_cp: m_cp.clone(),
        p: person.image.clone(),
        p_a,
        m: person.tryon_mask.clone(),
        m_c,
        t,
        c_w_gt,
        f_gt: warp.forward.clone(),
        f_gt_inv: warp.inverse.clone(),
        pose_map: person.pose_map.clone(),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::synthgen::garment::{gen_garment, GarmentSpec, PatternKind};
    use crate::synthgen::person::{person_context, PersonSpec};
    use crate::synthgen::truth::{gen_truth_warp, TruthWarp};
    use crate::synthgen::Canvas;

    fn canvas() -> Canvas {
        Canvas::new(64, 48)
    }

    #[test]
    fn zero_warp_on_the_canonical_body_copies_the_garment() {
        let person = person_context(&PersonSpec::canonical(canvas())).unwrap();
        let spec = GarmentSpec::solid([0.3, 0.6, 0.2], canvas()).with_param(PatternKind::Checker, "cell", 4.0);
        let (c, m_cp) = gen_garment(&spec, 2).unwrap();
        let zero = TruthWarp {
            forward: FlowField::zeros(64, 48),
            inverse: FlowField::zeros(64, 48),
            src: vec![],
            dst: vec![],
        };
        let s = compose_sample(&c, &m_cp, &person, &zero, "z").unwrap();
        for y in 0..64 {
            for x in 0..48 {
                if s.m_c.get(y, x, 0) == 1.0 {
                    assert_eq!(s.t.pixel(y, x), c.pixel(y, x));
                }
            }
        }
        // the visible garment covers most of its template
        assert!(s.m_c.mask_area() as f64 > 0.8 * m_cp.mask_area() as f64);
    }

    #[test]
    fn seeded_sample_invariants() {
        let person = person_context(&PersonSpec {
            lean_deg: -3.0,
            ..PersonSpec::canonical(canvas())
        })
        .unwrap();
        let spec = GarmentSpec::solid([0.7, 0.2, 0.2], canvas()).with_param(PatternKind::Stripes, "width", 3.0);
        let (c, m_cp) = gen_garment(&spec, 3).unwrap();
        let warp = gen_truth_warp(&person, 3).unwrap();
        let s = compose_sample(&c, &m_cp, &person, &warp, "s3").unwrap();
        for i in 0..64 * 48 {
            // m_C ⊆ m
            assert!(s.m_c.data[i] <= s.m.data[i]);
            if s.m.data[i] == 1.0 {
                assert_eq!(&s.p_a.data[3 * i..3 * i + 3], &[AGNOSTIC_FILL; 3]);
            } else {
                assert_eq!(&s.p_a.data[3 * i..3 * i + 3], &s.p.data[3 * i..3 * i + 3]);
            }
        }
        let tol = 2.0 / 255.0;
        let (tq, cq) = (s.t.quantized(), s.c_w_gt.quantized());
        for y in 0..64 {
            for x in 0..48 {
                if s.m_c.get(y, x, 0) == 1.0 {
                    for ch in 0..3 {
                        assert!((tq.get(y, x, ch) - cq.get(y, x, ch)).abs() < tol);
                    }
                }
            }
        }
        for r in [&s.c, &s.p, &s.p_a, &s.t, &s.c_w_gt] {
            assert!(r.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
        for m in [&s.m, &s.m_c, &s.m_cp] {
            assert!(m.is_binary());
        }
    }

    #[test]
    fn garment_moved_off_the_body_is_degenerate() {
        let person = person_context(&PersonSpec::canonical(canvas())).unwrap();
        let (c, m_cp) = gen_garment(&GarmentSpec::solid([0.5, 0.5, 0.5], canvas()), 0).unwrap();
        let away = TruthWarp {
            forward: FlowField::constant(64, 48, 0.0, 60.0),
            inverse: FlowField::constant(64, 48, 0.0, -60.0),
            src: vec![],
            dst: vec![],
        };
        assert!(matches!(
            compose_sample(&c, &m_cp, &person, &away, "x"),
            Err(Error::DegenerateSample(_))
        ));
    }
}

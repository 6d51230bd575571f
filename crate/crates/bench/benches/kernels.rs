use candle_core::{DType, Var};
use criterion::{criterion_group, criterion_main, Criterion};
use tryon_bench::{noise_raster, noise_tensor};
use tryon_core::evalmetrics::ssim;
use tryon_core::nn::{warp, Builder, Conv2d, ParamStore};
use tryon_core::synthgen::{generate_sample, DatasetConfig};
use tryon_core::tryondiffusion::{DiffusionArch, DiffusionModel};

fn conv(c: &mut Criterion) {
    let mut store = ParamStore::new(0, DType::F32);
    let conv = Conv2d::new(&mut Builder::new(&mut store, false), "c", 32, 32, 3, 1).unwrap();
    let x = Var::from_tensor(&noise_tensor((8, 32, 24, 32), -1.0, 1.0, 1)).unwrap();
    c.bench_function("conv3x3 32x24x32 b8 fwd+bwd", |b| {
        b.iter(|| conv.forward(x.as_tensor()).unwrap().sum_all().unwrap().backward().unwrap())
    });
}

fn bilinear_warp(c: &mut Criterion) {
    let img = noise_tensor((8, 64, 48, 3), 0.0, 1.0, 2);
    let flow = noise_tensor((8, 64, 48, 2), -3.0, 3.0, 3);
    c.bench_function("warp 64x48 b8", |b| b.iter(|| warp(&img, &flow).unwrap()));
}

fn ssim_metric(c: &mut Criterion) {
    let x = noise_raster(64, 48, 3, 4);
    let y = noise_raster(64, 48, 3, 5);
    c.bench_function("ssim 64x48", |b| b.iter(|| ssim(&x, &y).unwrap()));
}

fn unet_forward(c: &mut Criterion) {
    let model = DiffusionModel::new(DiffusionArch::default(), 0, DType::F32).unwrap();
    let arch = &model.arch;
    let x = noise_tensor((8, 16, 12, arch.unet.in_channels()), -1.0, 1.0, 6);
    let tokens = noise_tensor((1, 8, arch.token_length, arch.tokens.token_dim), -1.0, 1.0, 7)
        .squeeze(0)
        .unwrap();
    let t = vec![100; 8];
    c.bench_function("unet forward b8", |b| {
        b.iter(|| model.modules().unet.forward(&x, &t, &tokens, None).unwrap())
    });
}

fn synth_sample(c: &mut Criterion) {
    let config = DatasetConfig::default();
    c.bench_function("generate_sample", |b| b.iter(|| generate_sample(&config, 7).unwrap()));
}

criterion_group!(benches, conv, bilinear_warp, ssim_metric, unet_forward, synth_sample);
criterion_main!(benches);

use criterion::{criterion_group, criterion_main, Criterion};
use std::hint::black_box;
use utg_bench::random_tensor;
use utg_core::kernel::{causal_mask, conv2d_forward, ConvGeometry, MaskKind};
use utg_core::vqvae::{quantize_nearest, Codebook, LatentMap};
use utg_core::{PriorConfig, PriorModel, ThresholdParam};

fn convolutions(c: &mut Criterion) {
    let x = random_tensor(&[32, 1, 28, 28], 1);
    let k = random_tensor(&[16, 1, 4, 4], 2);
    let strided = ConvGeometry { stride: 2, padding: 1 };
    c.bench_function("conv2d_stride2_28x28", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &k, None, strided, None).unwrap())
    });

    let x = random_tensor(&[32, 64, 7, 7], 3);
    let k = random_tensor(&[64, 64, 3, 3], 4);
    let mask = causal_mask::<f32>(64, 64, 3, MaskKind::B);
    c.bench_function("masked_conv2d_3x3_64ch", |b| {
        b.iter(|| conv2d_forward(black_box(&x), &k, None, ConvGeometry::same(3), Some(&mask)).unwrap())
    });
}

fn quantizer(c: &mut Criterion) {
    let cb = Codebook::new(16, random_tensor(&[32, 16], 5).into_data()).unwrap();
    let z = LatentMap::new(7, 7, 16, random_tensor(&[49, 16], 6).into_data()).unwrap();
    c.bench_function("quantize_7x7_v32_k16", |b| b.iter(|| quantize_nearest(black_box(&z), &cb).unwrap()));
}

fn prior_generation(c: &mut Criterion) {
    let cfg = PriorConfig {
        channels: 32,
        ..PriorConfig::default()
    };
    let prior = PriorModel::init(&cfg).unwrap();
    let t = ThresholdParam::new(0.6).unwrap();
    let seeds: Vec<u64> = (0..16).collect();
    let mut g = c.benchmark_group("prior_generation");
    g.sample_size(10);
    g.bench_function("16_maps_7x7", |b| b.iter(|| prior.generate_maps(black_box(&seeds), Some(t)).unwrap()));
    g.finish();
}

criterion_group!(benches, convolutions, quantizer, prior_generation);
criterion_main!(benches);

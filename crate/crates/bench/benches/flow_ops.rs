//! Benchmarks for the flow kernels on latent-scale and pixel-scale grids:
//! warping, composition, completion, and first-frame propagation.

use criterion::{criterion_group, criterion_main, BatchSize, Criterion};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

use firstfill_core::flowlab::{compose_flows, complete_flow, warp, FlowField};
use firstfill_core::fff::latent_propagate;
use firstfill_core::nn::init_rng;
use firstfill_core::types::LatentClip;

fn random_flow(rng: &mut ChaCha8Rng, h: usize, w: usize, span: f64) -> FlowField {
    FlowField {
        data: Array3::from_shape_fn((h, w, 2), |_| rng.gen_range(-span..span)),
    }
}

fn bench_warp(c: &mut Criterion) {
    let mut rng = init_rng(7);
    let field = Array3::from_shape_fn((3, 64, 64), |_| rng.gen_range(-1.0..1.0));
    let flow = random_flow(&mut rng, 64, 64, 4.0);
    let valid = Array2::from_shape_fn((64, 64), |_| f64::from(rng.gen_bool(0.8)));
    c.bench_function("warp 3x64x64 with validity", |b| {
        b.iter(|| warp(&field, &flow, Some(&valid)).unwrap())
    });
}

fn bench_compose(c: &mut Criterion) {
    let mut rng = init_rng(8);
    let chain: Vec<FlowField> = (0..7).map(|_| random_flow(&mut rng, 64, 64, 2.0)).collect();
    c.bench_function("compose 7 flows 64x64", |b| {
        b.iter(|| compose_flows(&chain).unwrap())
    });
}

fn bench_complete(c: &mut Criterion) {
    let mut rng = init_rng(9);
    let flow = random_flow(&mut rng, 64, 64, 2.0);
    let mut mask = Array2::<u8>::zeros((64, 64));
    for y in 20..44 {
        for x in 16..48 {
            mask[[y, x]] = 1;
        }
    }
    c.bench_function("complete_flow 64x64, 24x32 hole", |b| {
        b.iter_batched(
            || (flow.clone(), mask.clone()),
            |(f, m)| complete_flow(&f, &m).unwrap(),
            BatchSize::SmallInput,
        )
    });
}

fn bench_propagate(c: &mut Criterion) {
    let mut rng = init_rng(10);
    let (s, ch, h, w) = (8usize, 4usize, 16usize, 16usize);
    let zm = LatentClip {
        data: Array4::from_shape_fn((s, ch, h, w), |_| rng.gen_range(-1.0..1.0)),
    };
    let mut m_lat = Array3::zeros((s, h, w));
    for y in 4..12 {
        for x in 4..12 {
            m_lat[[0, y, x]] = 1.0;
        }
    }
    let flows: Vec<FlowField> = (0..s - 1).map(|_| random_flow(&mut rng, h, w, 1.5)).collect();
    c.bench_function("latent_propagate 8x4x16x16", |b| {
        b.iter(|| latent_propagate(&zm, &m_lat, &flows, 0.5).unwrap())
    });
}

criterion_group!(benches, bench_warp, bench_compose, bench_complete, bench_propagate);
criterion_main!(benches);

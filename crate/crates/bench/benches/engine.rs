use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fprnet_core::graph::{backward_seeded, forward, ComputeGraph, GraphBuilder, ParamStore, Sig};
use fprnet_core::networks::{build_gsm, NetConfig, GSM_IN_CHANNELS};
use fprnet_core::tensor::Tensor;
use fprnet_core::trainer::init_params;

fn conv_graph(c: usize, h: usize, w: usize) -> ComputeGraph {
    let mut b = GraphBuilder::new();
    let x = b.input("x", Sig::Map { c, h, w }).unwrap();
    let y = b.conv2d(x, "conv", c, 3, 1, 1).unwrap();
    let y = b.relu(y);
    b.build(y).unwrap()
}

fn random_tensor(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor {
    let len = shape.iter().product();
    let data = (0..len).map(|_| rng.random_range(-1.0..1.0)).collect();
    Tensor::new(shape, data).unwrap()
}

fn bench_engine(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(7);

    let (ch, h, w) = (8, 32, 32);
    let g = conv_graph(ch, h, w);
    let mut params = init_params(&g, &mut rng);
    let x = random_tensor(vec![4, ch, h, w], &mut rng);

    c.bench_function("conv2d_relu_forward_4x8x32x32", |b| {
        b.iter(|| forward(&g, &params, &[("x", black_box(&x))]).unwrap())
    });

    let seed = Tensor::new(vec![4, ch, h, w], vec![1.0; 4 * ch * h * w]).unwrap();
    c.bench_function("conv2d_relu_train_step_4x8x32x32", |b| {
        b.iter(|| {
            let fwd = forward(&g, &params, &[("x", black_box(&x))]).unwrap();
            backward_seeded(&g, &mut params, &fwd, &seed).unwrap()
        })
    });

    let patch = 32;
    let net = build_gsm(&NetConfig::default(), patch).unwrap();
    let net_params: ParamStore = init_params(&net, &mut rng);
    let slice = random_tensor(vec![1, GSM_IN_CHANNELS, patch, patch], &mut rng);
    c.bench_function("gsm_forward_one_slice_32x32", |b| {
        b.iter(|| forward(&net, &net_params, &[("image", black_box(&slice))]).unwrap())
    });
}

criterion_group!(benches, bench_engine);
criterion_main!(benches);

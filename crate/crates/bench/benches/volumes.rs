use std::hint::black_box;

use criterion::{criterion_group, criterion_main, Criterion};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use fprnet_core::cascade::ensemble_fuse;
use fprnet_core::metrics::{connected_components, Connectivity};
use fprnet_core::nifti::{decode_volume, encode_volume, DataType, Endianness};
use fprnet_core::volume::{Modality, Volume3D};

const EXTENTS: (usize, usize, usize) = (32, 32, 24);
const SPACING: (f64, f64, f64) = (4.0, 4.0, 4.0);

fn random_volume(modality: Modality, density: Option<f64>, rng: &mut ChaCha8Rng) -> Volume3D {
    let n = EXTENTS.0 * EXTENTS.1 * EXTENTS.2;
    let data: Vec<f64> = (0..n)
        .map(|_| match density {
            Some(d) => f64::from(rng.random::<f64>() < d),
            None => rng.random(),
        })
        .collect();
    Volume3D::new(EXTENTS, SPACING, modality, data).unwrap()
}

fn bench_volumes(c: &mut Criterion) {
    let mut rng = ChaCha8Rng::seed_from_u64(11);

    let mask = random_volume(Modality::Mask, Some(0.2), &mut rng);
    c.bench_function("connected_components_26_32x32x24", |b| {
        b.iter(|| connected_components(black_box(&mask), Connectivity::TwentySix).unwrap())
    });

    let pet = random_volume(Modality::PetSuv, None, &mut rng);
    c.bench_function("nifti_encode_decode_f32_32x32x24", |b| {
        b.iter(|| {
            let bytes = encode_volume(black_box(&pet), DataType::F32, Endianness::Little).unwrap();
            decode_volume(&bytes, Modality::PetSuv).unwrap()
        })
    });

    let cv: Vec<Volume3D> = (0..4)
        .map(|_| random_volume(Modality::Prob, None, &mut rng))
        .collect();
    let external = random_volume(Modality::Prob, None, &mut rng);
    c.bench_function("ensemble_fuse_4cv_ext_32x32x24", |b| {
        b.iter(|| ensemble_fuse(black_box(&cv), Some(&external), 0.35).unwrap())
    });
}

criterion_group!(benches, bench_volumes);
criterion_main!(benches);

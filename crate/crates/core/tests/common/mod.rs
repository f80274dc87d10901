#![allow(dead_code)]

use far_core::data::{BatchBlock, BenchmarkConfig, MultiDomainBatch};
use far_core::network::{FarModel, GateKind, NetConfig};
use far_core::Tensor;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// 3×8×8 inputs, two conv blocks ending in 8 channels.
pub fn micro_config() -> NetConfig {
    NetConfig {
        in_channels: 3,
        height: 8,
        width: 8,
        widths: vec![4, 8],
        n_classes: 4,
        n_experts: 2,
        reduction: 4,
        attention: true,
        restoration: true,
        gate_kind: GateKind::Parallel,
    }
}

pub fn micro_model(seed: u64) -> FarModel {
    FarModel::new(micro_config(), seed).unwrap()
}

pub fn uniform(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor<f32> {
    Tensor::from_fn(shape, |_| rng.random_range(-1.0f32..1.0))
}

/// Two labelled source blocks and one unlabelled target block of `m` images.
pub fn micro_batch(m: usize, seed: u64) -> MultiDomainBatch {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let images = uniform(&[3 * m, 3, 8, 8], &mut rng);
    let block = |d: usize, labels: Option<Vec<usize>>| BatchBlock {
        domain_id: d,
        start: d * m,
        indices: (0..m).collect(),
        labels,
    };
    let labels = |rng: &mut ChaCha8Rng| Some((0..m).map(|_| rng.random_range(0..4)).collect());
    let blocks = vec![block(0, labels(&mut rng)), block(1, labels(&mut rng)), block(2, None)];
    MultiDomainBatch {
        images,
        blocks,
        per_domain: m,
    }
}

/// Default benchmark geometry with fewer samples per domain.
pub fn small_benchmark(train: usize, test: usize) -> BenchmarkConfig {
    BenchmarkConfig {
        train_per_domain: train,
        test_per_domain: test,
        ..BenchmarkConfig::default()
    }
}

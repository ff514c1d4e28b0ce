//! Benchmark fixtures.

use mantis_core::geometry::PointCloud;
use mantis_core::model::{Model, ModelConfig, SaaSettings, Tuning};
use mantis_core::serialization::CurveKind;
use mantis_core::ssm::DiscreteOps;
use mantis_core::{Mat, ParamStore};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub fn rng(seed: u64) -> ChaCha8Rng {
    ChaCha8Rng::seed_from_u64(seed)
}

pub fn random_mat(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Mat {
    Mat::from_vec(rows, cols, (0..rows * cols).map(|_| rng.random_range(-1.0..1.0)).collect())
}

/// `n` steps of stable diagonal operators.
pub fn random_ops(rng: &mut ChaCha8Rng, n: usize, channels: usize, state: usize) -> Vec<DiscreteOps> {
    (0..n)
        .map(|_| DiscreteOps {
            channels,
            state,
            a_hat: (0..channels * state).map(|_| rng.random_range(0.1..0.99)).collect(),
            b_hat: (0..channels * state).map(|_| rng.random_range(-1.0..1.0)).collect(),
            c: (0..channels * state).map(|_| rng.random_range(-1.0..1.0)).collect(),
        })
        .collect()
}

pub fn random_cloud(rng: &mut ChaCha8Rng, points: usize) -> PointCloud {
    PointCloud::new((0..points).map(|_| [0, 1, 2].map(|_| rng.random_range(-1.0..1.0))).collect())
        .expect("finite points")
}

/// Desk-default model with nonzero `U`, so the adapter path does real work.
pub fn desk_model(adapters: bool) -> (Model, ParamStore) {
    let cfg = ModelConfig {
        d: 32,
        expand: 2,
        state: 8,
        conv_width: 4,
        blocks: 4,
        patches: 16,
        k: 16,
        d_o: 16,
        d_proj: 32,
        classes: 8,
        curves: [CurveKind::Hilbert, CurveKind::TransHilbert],
        bits: 10,
    };
    let saa = adapters.then(SaaSettings::default);
    let (model, mut store) = Model::new(cfg, saa, Tuning::Mantis, 0).expect("valid desk config");
    let mut r = rng(1);
    for a in &model.adapters {
        store.value_mut(a.u).iter_mut().for_each(|v| *v = r.random_range(-0.1..0.1));
    }
    (model, store)
}

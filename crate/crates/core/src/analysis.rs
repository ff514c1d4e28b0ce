//! Checks of the scan's closed-form structure: explicit transfer matrix,
//! low-rank kernel perturbation, hidden-state deviation bound, and measured
//! linear-time scaling.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::model::{Model, SaaSettings};
use crate::params::ParamStore;
use crate::saa::perturbation_matrix;
use crate::ssm::{self, AdapterInput, DiscreteOps};
use crate::tensor::{norm2, Mat};

/// Block-lower-triangular map from stacked inputs to stacked outputs:
/// `W_{t,i} = C_t (∏_{j=i+1}^{t} Â_j) B̂_i` for `i ≤ t`. Each block is a
/// `channels × channels` matrix (diagonal for per-channel scans).
#[derive(Clone, Debug, PartialEq)]
pub struct TransferMatrix {
    pub n: usize,
    pub channels: usize,
    blocks: Vec<Vec<f64>>,
}

impl TransferMatrix {
    fn slot(t: usize, i: usize) -> usize {
        t * (t + 1) / 2 + i
    }

    /// `W_{t,i}`, or `None` above the diagonal.
    pub fn block(&self, t: usize, i: usize) -> Option<&[f64]> {
        (i <= t && t < self.n).then(|| self.blocks[Self::slot(t, i)].as_slice())
    }

    /// `y_t = Σ_{i ≤ t} W_{t,i} x_i` for `x` of shape `n × channels`.
    pub fn apply(&self, x: &Mat) -> Result<Mat> {
        if x.rows != self.n || x.cols != self.channels {
            return Err(MantisError::Argument("input shape does not match transfer matrix".into()));
        }
        let c = self.channels;
        let mut y = Mat::zeros(self.n, c);
        for t in 0..self.n {
            for i in 0..=t {
                let w = &self.blocks[Self::slot(t, i)];
                let xi = x.row(i);
                for (r, out) in y.row_mut(t).iter_mut().enumerate() {
                    *out += crate::tensor::dot(&w[r * c..(r + 1) * c], xi);
                }
            }
        }
        Ok(y)
    }

    pub fn max_abs(&self) -> f64 {
        self.blocks.iter().flatten().fold(0.0f64, |m, v| m.max(v.abs()))
    }
}

pub fn build_transfer_matrix(ops: &[DiscreteOps]) -> Result<TransferMatrix> {
    let n = ops.len();
    let (c, ns) = ops.first().map_or((0, 0), |o| (o.channels, o.state));
    if ops.iter().any(|o| o.channels != c || o.state != ns) {
        return Err(MantisError::Argument("operator shapes differ across steps".into()));
    }
    let mut blocks = vec![Vec::new(); n * (n + 1) / 2];
    for i in 0..n {
        let mut prod = vec![1.0; c * ns];
        for t in i..n {
            if t > i {
                prod.iter_mut().zip(&ops[t].a_hat).for_each(|(p, a)| *p *= a);
            }
            let mut w = vec![0.0; c * c];
            for ch in 0..c {
                let k = ch * ns..(ch + 1) * ns;
                w[ch * c + ch] = ops[t].c[k.clone()]
                    .iter()
                    .zip(&prod[k.clone()])
                    .zip(&ops[i].b_hat[k])
                    .map(|((cc, p), b)| cc * p * b)
                    .sum();
            }
            blocks[TransferMatrix::slot(t, i)] = w;
        }
    }
    Ok(TransferMatrix { n, channels: c, blocks })
}

/// Singular values below `rel_tol · σ_max` count as zero.
pub fn numerical_rank(m: &[f64], rows: usize, cols: usize, rel_tol: f64) -> usize {
    let a = DMatrix::from_row_slice(rows, cols, m);
    let sv = a.singular_values();
    let smax = sv.iter().cloned().fold(0.0, f64::max);
    if smax == 0.0 {
        return 0;
    }
    sv.iter().filter(|&&s| s > rel_tol * smax).count()
}

pub const RANK_TOL: f64 = 1e-10;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelPerturbation {
    /// Largest entry of `W − W⁰` over all blocks.
    pub max_abs_delta: f64,
    /// Per-step `‖u_t‖₀`.
    pub support: Vec<usize>,
    /// Per-step numerical rank of `δ_t = U diag(u_t) V`.
    pub rank: Vec<usize>,
    pub r: usize,
    #[serde(skip)]
    pub delta: Vec<Vec<f64>>,
}

impl KernelPerturbation {
    pub fn rank_bound_holds(&self) -> bool {
        self.rank.iter().zip(&self.support).all(|(&rk, &s)| rk <= s && s <= self.r)
    }
}

/// `ΔW_{t,i} = W_{t,i} − W⁰_{t,i}` plus the rank of every step's operator
/// perturbation.
pub fn kernel_perturbation(
    frozen: &TransferMatrix,
    controlled: &TransferMatrix,
    controls: &[Vec<f64>],
    u_mat: &[f64],
    v_mat: &[f64],
    m: usize,
) -> Result<KernelPerturbation> {
    if frozen.n != controlled.n || frozen.channels != controlled.channels {
        return Err(MantisError::Argument("transfer matrices differ in shape".into()));
    }
    let delta: Vec<Vec<f64>> = frozen
        .blocks
        .iter()
        .zip(&controlled.blocks)
        .map(|(a, b)| b.iter().zip(a).map(|(x, y)| x - y).collect())
        .collect();
    let max_abs_delta = delta.iter().flatten().fold(0.0f64, |acc, v| acc.max(v.abs()));
    let r = controls.first().map_or(0, |u| u.len());
    let mut support = Vec::with_capacity(controls.len());
    let mut rank = Vec::with_capacity(controls.len());
    for u in controls {
        support.push(u.iter().filter(|v| **v != 0.0).count());
        rank.push(numerical_rank(&perturbation_matrix(u, u_mat, v_mat, m), m, m, RANK_TOL));
    }
    Ok(KernelPerturbation { max_abs_delta, support, rank, r, delta })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DeviationReport {
    /// `‖h_t − h⁰_t‖₂` for `t = 1..n`.
    pub deviation: Vec<f64>,
    pub bound: Vec<f64>,
    pub rho: f64,
    pub eps_a: f64,
    pub eps_b: f64,
    pub h_max: f64,
    pub x_max: f64,
    pub precondition_met: bool,
    pub violations: usize,
    pub pass: bool,
}

/// Relative slack for floating-point rounding in the bound comparison.
pub const BOUND_SLACK: f64 = 1e-12;

/// `‖δh_t‖₂ ≤ (1 − ρᵗ)/(1 − ρ) · (ε_A H + ε_B X)` with `δh_0 = 0`, every
/// constant measured from the two runs. `h` trajectories are `n × C·N` (states
/// after each step), `x` is `n × C`. `ε_B` is the operator norm of the input
/// perturbation, `max_t max_c ‖ΔB̂_{t,c}‖₂`, since channel `c` scales its own
/// `B̂` row by `x_{t,c}`.
pub fn deviation_bound_check(
    frozen_h: &Mat,
    adapted_h: &Mat,
    frozen_ops: &[DiscreteOps],
    adapted_ops: &[DiscreteOps],
    x: &Mat,
) -> Result<DeviationReport> {
    let n = x.rows;
    if frozen_h.rows != n || adapted_h.rows != n || frozen_ops.len() != n || adapted_ops.len() != n {
        return Err(MantisError::Argument("trajectory lengths differ".into()));
    }
    let max_abs = |v: &[f64]| v.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let rho = frozen_ops.iter().map(|o| max_abs(&o.a_hat)).fold(0.0, f64::max);
    let mut eps_a = 0.0f64;
    let mut eps_b = 0.0f64;
    for (f, a) in frozen_ops.iter().zip(adapted_ops) {
        let da: Vec<f64> = a.a_hat.iter().zip(&f.a_hat).map(|(x, y)| x - y).collect();
        eps_a = eps_a.max(max_abs(&da));
        for ch in 0..f.channels {
            let k = ch * f.state..(ch + 1) * f.state;
            let db: Vec<f64> = a.b_hat[k.clone()].iter().zip(&f.b_hat[k]).map(|(x, y)| x - y).collect();
            eps_b = eps_b.max(norm2(&db));
        }
    }
    let h_max = (0..n).map(|t| norm2(adapted_h.row(t))).fold(0.0, f64::max);
    let x_max = (0..n).map(|t| norm2(x.row(t))).fold(0.0, f64::max);
    let deviation: Vec<f64> = (0..n)
        .map(|t| {
            let d: Vec<f64> = adapted_h.row(t).iter().zip(frozen_h.row(t)).map(|(a, b)| a - b).collect();
            norm2(&d)
        })
        .collect();
    let precondition_met = rho < 1.0;
    let drive = eps_a * h_max + eps_b * x_max;
    let bound: Vec<f64> = (1..=n)
        .map(|t| {
            if precondition_met {
                (1.0 - rho.powi(t as i32)) / (1.0 - rho) * drive
            } else {
                f64::INFINITY
            }
        })
        .collect();
    let violations = deviation
        .iter()
        .zip(&bound)
        .filter(|(d, b)| **d > **b * (1.0 + BOUND_SLACK) + f64::MIN_POSITIVE)
        .count();
    Ok(DeviationReport {
        deviation,
        bound,
        rho,
        eps_a,
        eps_b,
        h_max,
        x_max,
        precondition_met,
        violations,
        pass: precondition_met && violations == 0,
    })
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LinearFit {
    pub slope: f64,
    pub intercept: f64,
    pub r2: f64,
}

pub fn linear_fit(x: &[f64], y: &[f64]) -> LinearFit {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let sxy: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = x.iter().map(|a| (a - mx) * (a - mx)).sum();
    let slope = if sxx > 0.0 { sxy / sxx } else { 0.0 };
    let intercept = my - slope * mx;
    let ss_res: f64 = x.iter().zip(y).map(|(a, b)| (b - intercept - slope * a).powi(2)).sum();
    let ss_tot: f64 = y.iter().map(|b| (b - my).powi(2)).sum();
    let r2 = if ss_tot > 0.0 { 1.0 - ss_res / ss_tot } else { 1.0 };
    LinearFit { slope, intercept, r2 }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityRow {
    pub n: usize,
    pub seconds_frozen: f64,
    pub seconds_adapted: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ComplexityReport {
    pub rows: Vec<ComplexityRow>,
    pub fit_frozen: LinearFit,
    pub fit_adapted: LinearFit,
    pub slope_ratio: f64,
}

fn fastest(v: &[f64]) -> f64 {
    v.iter().copied().fold(f64::INFINITY, f64::min)
}

/// Wall time of a forward pass through the block stack on random token
/// sequences, with and without adapters (fastest of `repeats`; timer noise only ever adds).
pub fn complexity_probe(
    model: &Model,
    store: &ParamStore,
    lengths: &[usize],
    repeats: usize,
    seed: u64,
) -> Result<ComplexityReport> {
    use rand::{Rng, SeedableRng};
    if lengths.windows(2).any(|w| w[0] >= w[1]) || lengths.len() < 2 {
        return Err(MantisError::Argument("lengths must be strictly increasing (at least two)".into()));
    }
    if model.adapters.is_empty() {
        return Err(MantisError::Config("complexity probe needs a model with adapters".into()));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let e: Vec<f64> = (0..model.cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect();
    let run = |z: &Mat, adapted: bool| -> Result<f64> {
        let start = Instant::now();
        let mut z = z.clone();
        for (l, bp) in model.blocks.iter().enumerate() {
            let ad = adapted.then(|| AdapterInput { params: &model.adapters[l], e: &e, force_zero: false });
            z = ssm::block_forward(&z, store, bp, ad, "probe")?.0;
        }
        std::hint::black_box(&z);
        Ok(start.elapsed().as_secs_f64())
    };
    let inputs: Vec<Mat> = lengths
        .iter()
        .map(|&n| Mat::from_vec(n, model.cfg.d, (0..n * model.cfg.d).map(|_| rng.random_range(-1.0..1.0)).collect()))
        .collect();
    for z in &inputs {
        run(z, true)?;
    }
    // rounds sweep every length, so a slow spell on the host hits all of them
    let mut off = vec![Vec::with_capacity(repeats); lengths.len()];
    let mut on = vec![Vec::with_capacity(repeats); lengths.len()];
    for _ in 0..repeats.max(1) {
        for (i, z) in inputs.iter().enumerate() {
            off[i].push(run(z, false)?);
            on[i].push(run(z, true)?);
        }
    }
    let rows: Vec<ComplexityRow> = lengths
        .iter()
        .enumerate()
        .map(|(i, &n)| ComplexityRow { n, seconds_frozen: fastest(&off[i]), seconds_adapted: fastest(&on[i]) })
        .collect();
    let xs: Vec<f64> = rows.iter().map(|r| r.n as f64).collect();
    let fit_frozen = linear_fit(&xs, &rows.iter().map(|r| r.seconds_frozen).collect::<Vec<_>>());
    let fit_adapted = linear_fit(&xs, &rows.iter().map(|r| r.seconds_adapted).collect::<Vec<_>>());
    Ok(ComplexityReport { slope_ratio: fit_adapted.slope / fit_frozen.slope, rows, fit_frozen, fit_adapted })
}

/// Adapter parameter counts of a configuration, as allocated and by formula.
pub fn parameter_report(d: usize, state: usize, s: &SaaSettings) -> (usize, usize) {
    let cfg = s.config(d, state);
    (crate::saa::count_parameters(&cfg), crate::saa::closed_form_count(cfg.d, cfg.d_h, cfg.d_phi, cfg.r, cfg.m))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn diagonal_blocks_and_memoryless_case() {
        let op = |a: f64| DiscreteOps { channels: 1, state: 1, a_hat: vec![a], b_hat: vec![2.0], c: vec![3.0] };
        let tm = build_transfer_matrix(&[op(0.0), op(0.0), op(0.0)]).unwrap();
        assert_eq!(tm.block(1, 1), Some(&[6.0][..]));
        assert_eq!(tm.block(2, 0), Some(&[0.0][..]));
        assert!(tm.block(0, 1).is_none());
        let tm = build_transfer_matrix(&[op(0.5), op(0.5), op(0.5)]).unwrap();
        assert_eq!(tm.block(2, 0), Some(&[6.0 * 0.25][..]));
    }

    #[test]
    fn scalar_bound_limit() {
        // ρ = 0.5, ε_A = 0.1, ε_B = 0, H = X = 1: bound → 0.2
        let rho: f64 = 0.5;
        let b = (1.0 - rho.powi(200)) / (1.0 - rho) * (0.1 * 1.0);
        assert!((b - 0.2).abs() < 1e-15);
    }

    #[test]
    fn rank_of_sparse_controls() {
        let m = 7;
        let r = 4;
        let u_mat: Vec<f64> = (0..m * r).map(|i| ((i * 13 % 11) as f64 - 5.0) / 3.0).collect();
        let v_mat: Vec<f64> = (0..r * m).map(|i| ((i * 7 % 9) as f64 - 4.0) / 2.0).collect();
        let p = perturbation_matrix(&[0.0, 1.5, 0.0, 0.0], &u_mat, &v_mat, m);
        assert_eq!(numerical_rank(&p, m, m, RANK_TOL), 1);
        assert_eq!(numerical_rank(&vec![0.0; m * m], m, m, RANK_TOL), 0);
    }

    #[test]
    fn perfect_line_fit() {
        let f = linear_fit(&[1.0, 2.0, 3.0], &[3.0, 5.0, 7.0]);
        assert!((f.slope - 2.0).abs() < 1e-12 && (f.intercept - 1.0).abs() < 1e-12);
        assert!((f.r2 - 1.0).abs() < 1e-12);
    }
}

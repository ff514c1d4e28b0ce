//! Dual-serialization consistency: normalized feature alignment, symmetric KL
//! between softened predictions, and the combined objective.

use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::{dot, matvec, norm2, Mat};

/// Projected feature norms below this make the feature term zero.
pub const DEGENERATE_NORM: f64 = 1e-12;
/// Floor applied inside logarithms of the prediction term.
pub const LOG_FLOOR: f64 = 1e-12;

/// Branch-shared linear projection `g: d → d_proj`.
#[derive(Clone, Copy, Debug)]
pub struct ProjectionHead {
    pub w: ParamId,
    pub d: usize,
    pub d_proj: usize,
}

impl ProjectionHead {
    pub fn project(&self, store: &ParamStore, f: &[f64]) -> Vec<f64> {
        let mut z = vec![0.0; self.d_proj];
        matvec(store.value(self.w), self.d_proj, self.d, f, &mut z);
        z
    }
}

pub fn avg_pool(z: &Mat) -> Vec<f64> {
    let mut out = vec![0.0; z.cols];
    for t in 0..z.rows {
        crate::tensor::axpy(1.0 / z.rows as f64, z.row(t), &mut out);
    }
    out
}

/// `‖z1/‖z1‖ − z2/‖z2‖‖²`; `None` when either norm is degenerate.
pub fn normalized_sq_distance(z1: &[f64], z2: &[f64]) -> Option<f64> {
    let (n1, n2) = (norm2(z1), norm2(z2));
    if n1 < DEGENERATE_NORM || n2 < DEGENERATE_NORM {
        return None;
    }
    Some(
        z1.iter()
            .zip(z2)
            .map(|(a, b)| {
                let diff = a / n1 - b / n2;
                diff * diff
            })
            .sum(),
    )
}

/// Gradients of [`normalized_sq_distance`] w.r.t. both inputs (zero when
/// degenerate).
pub fn normalized_sq_distance_grad(z1: &[f64], z2: &[f64]) -> (Vec<f64>, Vec<f64>) {
    let (n1, n2) = (norm2(z1), norm2(z2));
    if n1 < DEGENERATE_NORM || n2 < DEGENERATE_NORM {
        return (vec![0.0; z1.len()], vec![0.0; z2.len()]);
    }
    let a: Vec<f64> = z1.iter().map(|v| v / n1).collect();
    let b: Vec<f64> = z2.iter().map(|v| v / n2).collect();
    let ab = dot(&a, &b);
    let g1 = a.iter().zip(&b).map(|(ai, bi)| -2.0 / n1 * (bi - ai * ab)).collect();
    let g2 = a.iter().zip(&b).map(|(ai, bi)| -2.0 / n2 * (ai - bi * ab)).collect();
    (g1, g2)
}

/// Feature term on two final-layer sequences: pool, project, compare.
/// Returns the loss and whether the input was degenerate.
pub fn feature_loss(z_l1: &Mat, z_l2: &Mat, store: &ParamStore, head: &ProjectionHead) -> (f64, bool) {
    let z1 = head.project(store, &avg_pool(z_l1));
    let z2 = head.project(store, &avg_pool(z_l2));
    match normalized_sq_distance(&z1, &z2) {
        Some(v) => (v, false),
        None => (0.0, true),
    }
}

fn log_softmax_scaled(logits: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let p = crate::tensor::softmax_scaled(logits, tau);
    let lp = p.iter().map(|v| v.max(LOG_FLOOR).ln()).collect();
    (p, lp)
}

/// `½ KL(π1‖π2) + ½ KL(π2‖π1)` with `π = softmax(ℓ/τ)`.
pub fn prediction_loss(l1: &[f64], l2: &[f64], tau: f64) -> Result<f64> {
    if !(tau > 0.0) {
        return Err(MantisError::Argument(format!("temperature must be positive, got {tau}")));
    }
    if l1.len() != l2.len() {
        return Err(MantisError::Argument("logit length mismatch".into()));
    }
    let (p1, lp1) = log_softmax_scaled(l1, tau);
    let (p2, lp2) = log_softmax_scaled(l2, tau);
    Ok(0.5 * (0..p1.len()).map(|j| (p1[j] - p2[j]) * (lp1[j] - lp2[j])).sum::<f64>())
}

/// Gradients of [`prediction_loss`] w.r.t. both logit vectors.
pub fn prediction_loss_grad(l1: &[f64], l2: &[f64], tau: f64) -> (Vec<f64>, Vec<f64>) {
    let (p1, lp1) = log_softmax_scaled(l1, tau);
    let (p2, lp2) = log_softmax_scaled(l2, tau);
    let dd: Vec<f64> = lp1.iter().zip(&lp2).map(|(a, b)| a - b).collect();
    let e1 = dot(&p1, &dd);
    let e2 = dot(&p2, &dd);
    let g1 = (0..p1.len())
        .map(|i| 0.5 * (p1[i] * (dd[i] - e1) + p1[i] - p2[i]) / tau)
        .collect();
    let g2 = (0..p1.len())
        .map(|i| 0.5 * (p2[i] * (e2 - dd[i]) + p2[i] - p1[i]) / tau)
        .collect();
    (g1, g2)
}

/// Cross-entropy of `logits` against `label`, with its gradient.
pub fn cross_entropy(logits: &[f64], label: usize) -> (f64, Vec<f64>) {
    let p = crate::tensor::softmax_scaled(logits, 1.0);
    let loss = -p[label].max(LOG_FLOOR).ln();
    let mut g = p;
    g[label] -= 1.0;
    (loss, g)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub task: f64,
    pub feat: f64,
    pub pred: f64,
    pub total: f64,
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

pub fn total_loss(task: f64, feat: f64, pred: f64, alpha: f64, beta: f64, tau: f64) -> LossReport {
    LossReport { task, feat, pred, total: task + alpha * feat + beta * pred, alpha, beta, tau }
}

/// Per-sample outputs of both branches.
#[derive(Clone, Debug)]
pub struct BranchViews {
    pub projected: [Vec<f64>; 2],
    pub logits: [Vec<f64>; 2],
}

/// Mean feature and prediction discrepancy between the two views.
pub fn discrepancy(views: &[BranchViews], tau: f64) -> Result<(f64, f64)> {
    if views.is_empty() {
        return Err(MantisError::Argument("empty evaluation set".into()));
    }
    let mut feat = 0.0;
    let mut pred = 0.0;
    for v in views {
        feat += normalized_sq_distance(&v.projected[0], &v.projected[1]).unwrap_or(0.0);
        pred += prediction_loss(&v.logits[0], &v.logits[1], tau)?;
    }
    let n = views.len() as f64;
    Ok((feat / n, pred / n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn feature_distance_cases() {
        let z = [0.3, -1.0, 2.0];
        assert_eq!(normalized_sq_distance(&z, &z), Some(0.0));
        let neg: Vec<f64> = z.iter().map(|v| -v).collect();
        assert!((normalized_sq_distance(&z, &neg).unwrap() - 4.0).abs() < 1e-12);
        let scaled: Vec<f64> = z.iter().map(|v| 7.5 * v).collect();
        assert!(normalized_sq_distance(&z, &scaled).unwrap() < 1e-15);
        assert_eq!(normalized_sq_distance(&z, &[0.0; 3]), None);
    }

    #[test]
    fn symmetric_kl_hand_value() {
        // logits whose softmax is (0.9, 0.1) and (0.1, 0.9)
        let l1 = [9f64.ln(), 0.0];
        let l2 = [0.0, 9f64.ln()];
        let v = prediction_loss(&l1, &l2, 1.0).unwrap();
        assert!((v - 0.8 * 9f64.ln()).abs() < 1e-12);
        assert!((v - 1.7578).abs() < 1e-4);
    }

    #[test]
    fn shift_invariance_and_tau_validation() {
        let l = [0.2, -1.0, 3.0];
        let s: Vec<f64> = l.iter().map(|v| v + 5.0).collect();
        assert!(prediction_loss(&l, &s, 1.0).unwrap().abs() < 1e-12);
        assert!(prediction_loss(&l, &s, 0.0).is_err());
    }

    #[test]
    fn total_loss_arithmetic() {
        let r = total_loss(1.0, 0.01, 0.2, 100.0, 0.05, 1.0);
        assert!((r.total - 2.01).abs() < 1e-12);
        assert_eq!(total_loss(0.7, 0.3, 0.4, 0.0, 0.0, 1.0).total, 0.7);
    }

    #[test]
    fn prediction_grad_matches_finite_difference() {
        let l1 = [0.5, -0.2, 1.3, 0.0];
        let l2 = [-0.4, 0.9, 0.1, 0.3];
        let tau = 1.7;
        let (g1, g2) = prediction_loss_grad(&l1, &l2, tau);
        for i in 0..4 {
            let h = 1e-6;
            let mut a = l1;
            a[i] += h;
            let mut b = l1;
            b[i] -= h;
            let fd = (prediction_loss(&a, &l2, tau).unwrap() - prediction_loss(&b, &l2, tau).unwrap()) / (2.0 * h);
            assert!((fd - g1[i]).abs() < 1e-8);
            let mut a = l2;
            a[i] += h;
            let mut b = l2;
            b[i] -= h;
            let fd = (prediction_loss(&l1, &a, tau).unwrap() - prediction_loss(&l1, &b, tau).unwrap()) / (2.0 * h);
            assert!((fd - g2[i]).abs() < 1e-8);
        }
    }

    #[test]
    fn feature_grad_matches_finite_difference() {
        let z1 = [0.5, -0.2, 1.3];
        let z2 = [-0.4, 0.9, 0.1];
        let (g1, g2) = normalized_sq_distance_grad(&z1, &z2);
        for i in 0..3 {
            let h = 1e-6;
            let (mut a, mut b) = (z1, z1);
            a[i] += h;
            b[i] -= h;
            let fd = (normalized_sq_distance(&a, &z2).unwrap() - normalized_sq_distance(&b, &z2).unwrap()) / (2.0 * h);
            assert!((fd - g1[i]).abs() < 1e-8);
            let (mut a, mut b) = (z2, z2);
            a[i] += h;
            b[i] -= h;
            let fd = (normalized_sq_distance(&z1, &a).unwrap() - normalized_sq_distance(&z1, &b).unwrap()) / (2.0 * h);
            assert!((fd - g2[i]).abs() < 1e-8);
        }
    }
}

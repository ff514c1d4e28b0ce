//! AdamW with warmup + cosine schedule, the batched training loop and a
//! finite-difference gradient checker.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::data::{augment, Augment};
use crate::dscd::{self, LossReport};
use crate::error::{MantisError, Result};
use crate::geometry::PointCloud;
use crate::model::{ForwardOptions, LossWeights, Model, Prepared};
use crate::params::{Grads, ParamStore};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimConfig {
    pub lr: f64,
    pub weight_decay: f64,
    pub epochs: usize,
    pub warmup: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for OptimConfig {
    fn default() -> Self {
        OptimConfig { lr: 5e-4, weight_decay: 5e-2, epochs: 200, warmup: 10, beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// Learning rate for a zero-based epoch: linear warmup to `lr`, then cosine
/// decay towards zero over the remaining epochs.
pub fn lr_at(cfg: &OptimConfig, epoch: usize) -> f64 {
    if epoch < cfg.warmup {
        return cfg.lr * (epoch + 1) as f64 / cfg.warmup as f64;
    }
    let span = cfg.epochs.saturating_sub(cfg.warmup).max(1) as f64;
    let progress = ((epoch - cfg.warmup) as f64 / span).min(1.0);
    0.5 * cfg.lr * (1.0 + (std::f64::consts::PI * progress).cos())
}

/// Moments per trainable tensor (empty for frozen ones).
#[derive(Clone, Debug, PartialEq)]
pub struct OptimState {
    pub cfg: OptimConfig,
    pub step: u64,
    pub m: Vec<Vec<f64>>,
    pub v: Vec<Vec<f64>>,
}

impl OptimState {
    pub fn new(store: &ParamStore, cfg: OptimConfig) -> Self {
        let zeros = || {
            store
                .iter()
                .map(|(_, p)| if p.trainable { vec![0.0; p.value.len()] } else { Vec::new() })
                .collect::<Vec<_>>()
        };
        OptimState { cfg, step: 0, m: zeros(), v: zeros() }
    }

    /// One decoupled-weight-decay Adam update at learning rate `lr`.
    pub fn apply(&mut self, store: &mut ParamStore, grads: &Grads, lr: f64) {
        self.step += 1;
        let c = self.cfg;
        let bc1 = 1.0 - c.beta1.powi(self.step as i32);
        let bc2 = 1.0 - c.beta2.powi(self.step as i32);
        for id in store.trainable_ids() {
            let Some(g) = grads.get(id) else { continue };
            let (m, v) = (&mut self.m[id.0], &mut self.v[id.0]);
            let w = store.value_mut(id);
            for i in 0..w.len() {
                m[i] = c.beta1 * m[i] + (1.0 - c.beta1) * g[i];
                v[i] = c.beta2 * v[i] + (1.0 - c.beta2) * g[i] * g[i];
                w[i] *= 1.0 - lr * c.weight_decay;
                w[i] -= lr * (m[i] / bc1) / ((v[i] / bc2).sqrt() + c.eps);
            }
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub optim: OptimConfig,
    pub batch: usize,
    pub seed: u64,
    pub loss: LossWeights,
    pub augment: Option<Augment>,
}

/// Mean losses and accuracy over one epoch.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    pub epoch: usize,
    pub lr: f64,
    pub loss: LossReport,
    pub accuracy: f64,
    /// Fraction of applied control coordinates that are exactly zero.
    pub control_sparsity: f64,
    pub degenerate_features: usize,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub accuracy: f64,
    pub loss: LossReport,
    pub feat_disc: f64,
    pub pred_disc: f64,
}

fn mean_reports(reports: &[LossReport]) -> LossReport {
    let n = reports.len().max(1) as f64;
    let mut out = reports.first().copied().unwrap_or_default();
    out.task = reports.iter().map(|r| r.task).sum::<f64>() / n;
    out.feat = reports.iter().map(|r| r.feat).sum::<f64>() / n;
    out.pred = reports.iter().map(|r| r.pred).sum::<f64>() / n;
    out.total = reports.iter().map(|r| r.total).sum::<f64>() / n;
    out
}

pub fn prepare_all(model: &Model, store: &ParamStore, clouds: &[PointCloud]) -> Result<Vec<Prepared>> {
    clouds.par_iter().map(|c| model.prepare(store, c)).collect()
}

/// Deterministic forward evaluation with discrepancy metrics.
pub fn evaluate(model: &Model, store: &ParamStore, set: &[Prepared], w: &LossWeights) -> Result<EvalReport> {
    if set.is_empty() {
        return Err(MantisError::Argument("empty evaluation set".into()));
    }
    let outs: Vec<(LossReport, bool, dscd::BranchViews)> = set
        .par_iter()
        .map(|s| {
            let fwd = model.forward(store, s, ForwardOptions::default())?;
            let label = s.label.ok_or_else(|| MantisError::Argument("evaluation sample without label".into()))?;
            Ok((model.loss(&fwd, label, w)?, fwd.prediction() == label, fwd.views()))
        })
        .collect::<Result<_>>()?;
    let reports: Vec<LossReport> = outs.iter().map(|o| o.0).collect();
    let views: Vec<dscd::BranchViews> = outs.iter().map(|o| o.2.clone()).collect();
    let (feat_disc, pred_disc) = dscd::discrepancy(&views, w.tau)?;
    Ok(EvalReport {
        accuracy: outs.iter().filter(|o| o.1).count() as f64 / set.len() as f64,
        loss: mean_reports(&reports),
        feat_disc,
        pred_disc,
    })
}

/// Model, parameters and optimizer state of one training run.
#[derive(Clone, Debug)]
pub struct Trainer {
    pub model: Model,
    pub store: ParamStore,
    pub opt: OptimState,
    pub cfg: TrainConfig,
    /// Number of completed epochs.
    pub epoch: usize,
}

impl Trainer {
    pub fn new(model: Model, store: ParamStore, cfg: TrainConfig) -> Self {
        let opt = OptimState::new(&store, cfg.optim);
        Trainer { model, store, opt, cfg, epoch: 0 }
    }

    /// One pass over `train`. Augmentation and shuffling depend only on the
    /// seed and epoch index, so a resumed run replays the same batches.
    pub fn run_epoch(&mut self, train: &[PointCloud], cached: Option<&[Prepared]>) -> Result<EpochStats> {
        if train.is_empty() && cached.is_none_or(|c| c.is_empty()) {
            return Err(MantisError::Argument("empty training set".into()));
        }
        let epoch = self.epoch;
        let lr = lr_at(&self.cfg.optim, epoch);
        let prepared: Vec<Prepared> = match (self.cfg.augment, cached) {
            (None, Some(c)) => c.to_vec(),
            (aug, _) => {
                let clouds: Vec<PointCloud> = match aug {
                    Some(a) => train
                        .iter()
                        .enumerate()
                        .map(|(i, c)| augment(c, &a, self.cfg.seed, epoch as u64, i as u64))
                        .collect::<Result<_>>()?,
                    None => train.to_vec(),
                };
                prepare_all(&self.model, &self.store, &clouds)?
            }
        };
        let order = crate::data::epoch_permutation(prepared.len(), self.cfg.seed, epoch as u64);
        let w = self.cfg.loss;
        let mut reports = Vec::with_capacity(prepared.len());
        let mut correct = 0usize;
        let mut zeros = 0usize;
        let mut coords = 0usize;
        let mut degenerate = 0usize;
        for chunk in order.chunks(self.cfg.batch.max(1)) {
            let model = &self.model;
            let store = &self.store;
            let results: Vec<(Grads, LossReport, bool, usize, usize, bool)> = chunk
                .par_iter()
                .map(|&i| {
                    let s = &prepared[i];
                    let mut g = Grads::new(store);
                    let (rep, fwd) = model.loss_and_grad(store, s, &w, &mut g)?;
                    let u = fwd.control_signals();
                    let z = u.iter().map(|v| v.iter().filter(|x| **x == 0.0).count()).sum();
                    let c = u.iter().map(|v| v.len()).sum();
                    let deg = dscd::normalized_sq_distance(&fwd.projected[0], &fwd.projected[1]).is_none();
                    Ok((g, rep, Some(fwd.prediction()) == s.label, z, c, deg))
                })
                .collect::<Result<_>>()?;
            let mut total = Grads::new(&self.store);
            for (g, rep, ok, z, c, deg) in &results {
                total.add_assign(g);
                reports.push(*rep);
                correct += *ok as usize;
                zeros += z;
                coords += c;
                degenerate += *deg as usize;
            }
            total.scale(1.0 / chunk.len() as f64);
            total.check_finite(&self.store)?;
            self.opt.apply(&mut self.store, &total, lr);
        }
        self.epoch += 1;
        Ok(EpochStats {
            epoch,
            lr,
            loss: mean_reports(&reports),
            accuracy: correct as f64 / prepared.len() as f64,
            control_sparsity: if coords == 0 { 0.0 } else { zeros as f64 / coords as f64 },
            degenerate_features: degenerate,
        })
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct GradCheckReport {
    pub checked: usize,
    /// Coordinates whose perturbation crosses a non-smooth point.
    pub excluded: usize,
    pub max_rel_err: f64,
    pub worst: String,
    pub failures: Vec<String>,
    pub tolerance: f64,
    pub floor: f64,
    pub step: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.failures.is_empty() && self.checked > 0
    }
}

/// Central-difference check of every trainable coordinate of the mean loss
/// over `samples`. Relative error is `|a − n| / max(|a|, |n|, floor)`.
pub fn grad_check(
    model: &Model,
    store: &ParamStore,
    samples: &[Prepared],
    w: &LossWeights,
    step: f64,
    tolerance: f64,
    floor: f64,
) -> Result<GradCheckReport> {
    let controller = model.saa.map(|s| s.controller);
    let eval = |st: &ParamStore| -> Result<(f64, Vec<Vec<usize>>)> {
        let mut total = 0.0;
        let mut patterns = Vec::with_capacity(samples.len());
        for s in samples {
            let fwd = model.forward(st, s, ForwardOptions::default())?;
            let label = s.label.ok_or_else(|| MantisError::Argument("unlabelled sample".into()))?;
            total += model.loss(&fwd, label, w)?.total;
            patterns.push(fwd.pattern(controller));
        }
        Ok((total / samples.len() as f64, patterns))
    };
    let mut analytic = Grads::new(store);
    for s in samples {
        model.loss_and_grad(store, s, w, &mut analytic)?;
    }
    analytic.scale(1.0 / samples.len() as f64);
    let (_, base_pattern) = eval(store)?;
    let mut report = GradCheckReport { tolerance, floor, step, ..Default::default() };
    let ids = store.trainable_ids();
    let coords: Vec<(crate::params::ParamId, usize)> =
        ids.iter().flat_map(|&id| (0..store.value(id).len()).map(move |i| (id, i))).collect();
    let results: Vec<Option<(f64, f64)>> = coords
        .par_iter()
        .map(|&(id, i)| {
            let mut st = store.clone();
            let x0 = st.value(id)[i];
            st.value_mut(id)[i] = x0 + step;
            let (fp, pp) = eval(&st)?;
            st.value_mut(id)[i] = x0 - step;
            let (fm, pm) = eval(&st)?;
            if pp != base_pattern || pm != base_pattern {
                return Ok(None);
            }
            let a = analytic.get(id).map_or(0.0, |g| g[i]);
            Ok(Some((a, (fp - fm) / (2.0 * step))))
        })
        .collect::<Result<_>>()?;
    for (&(id, i), r) in coords.iter().zip(results) {
        let Some((a, n)) = r else {
            report.excluded += 1;
            continue;
        };
        report.checked += 1;
        let rel = (a - n).abs() / a.abs().max(n.abs()).max(floor);
        let name = format!("{}[{i}]", store.param(id).name);
        if rel > report.max_rel_err {
            report.max_rel_err = rel;
            report.worst = name.clone();
        }
        if rel > tolerance {
            report.failures.push(format!("{name}: analytic {a:.6e} numeric {n:.6e} rel {rel:.2e}"));
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::params::ParamStore;

    #[test]
    fn schedule_warmup_and_cosine() {
        let cfg = OptimConfig::default();
        assert!((lr_at(&cfg, 0) - 5e-5).abs() < 1e-18);
        assert!((lr_at(&cfg, 9) - 5e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 10) - 5e-4).abs() < 1e-18);
        assert!((lr_at(&cfg, 105) - 2.5e-4).abs() < 1e-12);
        assert!(lr_at(&cfg, 199) < 1e-7);
    }

    #[test]
    fn zero_gradient_without_decay_is_a_no_op() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[2], vec![0.3, -1.0], true);
        let mut opt = OptimState::new(&store, OptimConfig { weight_decay: 0.0, ..Default::default() });
        let g = Grads::new(&store);
        opt.apply(&mut store, &g, 1e-3);
        assert_eq!(store.value(id), &[0.3, -1.0]);
    }

    #[test]
    fn single_step_matches_hand_arithmetic() {
        let mut store = ParamStore::new();
        let id = store.add("w", &[1], vec![2.0], true);
        let cfg = OptimConfig { weight_decay: 0.1, ..Default::default() };
        let mut opt = OptimState::new(&store, cfg);
        let mut g = Grads::new(&store);
        g.get_mut(id).unwrap()[0] = 0.5;
        opt.apply(&mut store, &g, 0.01);
        // m̂ = 0.5, v̂ = 0.25, decay 2·(1 − 0.001) = 1.998, step 0.01·0.5/(0.5 + 1e-8)
        let expected = 1.998 - 0.01 * 0.5 / (0.5 + 1e-8);
        assert!((store.value(id)[0] - expected).abs() < 1e-15);
        assert_eq!(opt.step, 1);
    }
}

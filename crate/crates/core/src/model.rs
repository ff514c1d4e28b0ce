//! End-to-end classifier: preprocessing, dual-branch tokens, adapted blocks,
//! heads, the combined objective and its gradient.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::dscd::{self, BranchViews, LossReport, ProjectionHead};
use crate::error::{MantisError, Result};
use crate::geometry::{farthest_point_sample, knn_patches, normalize, PatchSet, PointCloud, SeedRule};
use crate::params::{Grads, ParamId, ParamStore};
use crate::saa::{AdapterParams, ControllerKind, FusionKind, OperatorMask, SaaConfig};
use crate::serialization::{serialize_keypoints, CurveKind};
use crate::ssm::{self, AdapterInput, BackboneParams, BlockCache, BlockDims, LnCache};
use crate::tensor::{matvec, matvec_t_acc, outer_acc, Mat};
use crate::tokenizer::{self, Branch, OrderAwareCache, TokenizerParams};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub d: usize,
    pub expand: usize,
    pub state: usize,
    pub conv_width: usize,
    pub blocks: usize,
    pub patches: usize,
    pub k: usize,
    pub d_o: usize,
    pub d_proj: usize,
    pub classes: usize,
    pub curves: [CurveKind; 2],
    pub bits: u32,
}

impl ModelConfig {
    pub fn block_dims(&self) -> BlockDims {
        BlockDims::new(self.d, self.expand, self.state, self.conv_width)
    }

    pub fn validate(&self) -> Result<()> {
        let checks = [
            (self.d >= 1, "model.d must be ≥ 1"),
            (self.expand >= 1, "model.expand must be ≥ 1"),
            (self.state >= 1, "model.state must be ≥ 1"),
            (self.conv_width >= 1, "model.conv_width must be ≥ 1"),
            (self.patches >= 1, "model.patches must be ≥ 1"),
            (self.k >= 1, "model.k must be ≥ 1"),
            (self.d_o >= 1, "model.d_o must be ≥ 1"),
            (self.d_proj >= 1, "model.d_proj must be ≥ 1"),
            (self.classes >= 2, "model.classes must be ≥ 2"),
            (
                (1..=crate::serialization::MAX_BITS).contains(&self.bits),
                "model.bits out of range",
            ),
        ];
        match checks.iter().find(|(ok, _)| !ok) {
            Some((_, msg)) => Err(MantisError::Config(msg.to_string())),
            None => Ok(()),
        }
    }
}

/// Adapter settings shared by every block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaaSettings {
    pub d_phi: usize,
    pub r: usize,
    pub controller: ControllerKind,
    pub fusion: FusionKind,
    pub modulate: OperatorMask,
}

impl Default for SaaSettings {
    fn default() -> Self {
        SaaSettings {
            d_phi: 64,
            r: 8,
            controller: ControllerKind::Soft,
            fusion: FusionKind::ConcatMlp,
            modulate: OperatorMask::default(),
        }
    }
}

impl SaaSettings {
    pub fn config(&self, d: usize, state: usize) -> SaaConfig {
        SaaConfig {
            controller: self.controller,
            fusion: self.fusion,
            modulate: self.modulate,
            ..SaaConfig::for_backbone(d, state, self.d_phi, self.r)
        }
    }
}

/// Which parameters are trained.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Tuning {
    /// Nothing is trained.
    Frozen,
    /// Classification head only.
    LinearProbe,
    /// Head, cross-branch gate, projection, and (with adapters) the order
    /// conditioning weights and adapters.
    Mantis,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub tau: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        LossWeights { alpha: 100.0, beta: 0.05, tau: 1.0 }
    }
}

#[derive(Clone, Debug)]
pub struct Model {
    pub cfg: ModelConfig,
    pub saa: Option<SaaSettings>,
    pub tuning: Tuning,
    pub tok: TokenizerParams,
    pub gamma: ParamId,
    pub blocks: Vec<BackboneParams>,
    pub adapters: Vec<AdapterParams>,
    pub proj: ProjectionHead,
    pub head_w: ParamId,
    pub head_b: ParamId,
}

/// A cloud after parameter-free preprocessing and frozen patch encoding.
#[derive(Clone, Debug)]
pub struct Prepared {
    pub patches: PatchSet,
    /// Visiting order of each branch.
    pub orders: [Vec<usize>; 2],
    /// Frozen patch tokens in key-point order.
    pub tokens: Mat,
    pub label: Option<usize>,
}

impl Prepared {
    pub fn branch_tokens(&self, b: Branch) -> Mat {
        let order = &self.orders[b.index()];
        let mut out = Mat::zeros(order.len(), self.tokens.cols);
        for (t, &p) in order.iter().enumerate() {
            out.row_mut(t).copy_from_slice(self.tokens.row(p));
        }
        out
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub struct ForwardOptions {
    /// Replace every control signal by zero (the adapted operators collapse to
    /// the frozen ones).
    pub force_zero_control: bool,
    /// Skip adapters entirely.
    pub bypass_adapters: bool,
}

/// Everything one forward pass produces, per branch.
#[derive(Clone, Debug)]
pub struct SampleForward {
    pub branch_tokens: [Mat; 2],
    pub order_aware: [OrderAwareCache; 2],
    pub aligned: [Mat; 2],
    pub blocks: [Vec<BlockCache>; 2],
    pub final_ln: [LnCache; 2],
    pub features: [Vec<f64>; 2],
    pub logits: [Vec<f64>; 2],
    pub projected: [Vec<f64>; 2],
    pub used_adapters: bool,
    pub force_zero: bool,
}

impl SampleForward {
    pub fn mean_logits(&self) -> Vec<f64> {
        self.logits[0].iter().zip(&self.logits[1]).map(|(a, b)| 0.5 * (a + b)).collect()
    }

    pub fn prediction(&self) -> usize {
        argmax(&self.mean_logits())
    }

    pub fn views(&self) -> BranchViews {
        BranchViews { projected: self.projected.clone(), logits: self.logits.clone() }
    }

    /// Applied control signals of every block step, both branches.
    pub fn control_signals(&self) -> Vec<&[f64]> {
        self.blocks.iter().flatten().flat_map(|b| b.steps.iter().map(|s| s.u.as_slice())).collect()
    }

    /// Discrete pattern that the loss is smooth within: sparse-controller
    /// active sets and order-aware pooling winners.
    pub fn pattern(&self, controller: Option<ControllerKind>) -> Vec<usize> {
        let mut out = Vec::new();
        for oa in &self.order_aware {
            out.extend_from_slice(&oa.argmax);
        }
        if matches!(controller, Some(ControllerKind::Soft | ControllerKind::Hard)) {
            for b in self.blocks.iter().flatten() {
                for s in &b.steps {
                    if let Some(c) = &s.ctrl {
                        out.extend(c.u.iter().map(|&v| (v != 0.0) as usize));
                    }
                }
            }
        }
        out
    }

    /// Smallest distance of any controller coordinate to its threshold.
    pub fn kink_margin(&self) -> f64 {
        self.blocks
            .iter()
            .flatten()
            .flat_map(|b| b.steps.iter())
            .filter_map(|s| s.ctrl.as_ref())
            .map(|c| c.kink_margin())
            .fold(f64::INFINITY, f64::min)
    }
}

fn two<T>(v: Vec<T>) -> [T; 2] {
    match v.try_into() {
        Ok(a) => a,
        Err(_) => unreachable!("exactly two branches"),
    }
}

pub fn argmax(v: &[f64]) -> usize {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if *x > v[best] {
            best = i;
        }
    }
    best
}

impl Model {
    /// Build a model with a seeded random frozen backbone. Everything except
    /// the adapters is drawn from streams that do not depend on whether
    /// adapters exist, so tuning modes share the same backbone for a seed.
    pub fn new(cfg: ModelConfig, saa: Option<SaaSettings>, tuning: Tuning, seed: u64) -> Result<(Self, ParamStore)> {
        cfg.validate()?;
        if let Some(s) = &saa {
            if s.d_phi == 0 {
                return Err(MantisError::Config("saa.d_phi must be ≥ 1".into()));
            }
        }
        let stream = |k: u64| {
            let mut r = ChaCha8Rng::seed_from_u64(seed);
            r.set_stream(k);
            r
        };
        let mut store = ParamStore::new();
        let mut rng = stream(0);
        let tok = TokenizerParams::init(&mut store, cfg.d, cfg.d_o, &mut rng);
        let dims = cfg.block_dims();
        let blocks: Vec<BackboneParams> = (0..cfg.blocks)
            .map(|l| BackboneParams::init(&mut store, &format!("block{l}"), dims, &mut rng))
            .collect();
        let mut rng = stream(1);
        let gamma = store.zeros("fuse.gamma", &[cfg.d], true);
        let proj_w = store.linear("proj.w", cfg.d_proj, cfg.d, true, &mut rng);
        let head_w = store.linear("head.w", cfg.classes, cfg.d, true, &mut rng);
        let head_b = store.zeros("head.b", &[cfg.classes], true);
        let adapters = match &saa {
            Some(s) => (0..cfg.blocks)
                .map(|l| {
                    let mut r = stream(2 + l as u64);
                    AdapterParams::init(&mut store, &format!("block{l}.saa"), s.config(cfg.d, cfg.state), &mut r)
                })
                .collect(),
            None => Vec::new(),
        };
        let model = Model {
            proj: ProjectionHead { w: proj_w, d: cfg.d, d_proj: cfg.d_proj },
            cfg,
            saa,
            tuning,
            tok,
            gamma,
            blocks,
            adapters,
            head_w,
            head_b,
        };
        model.apply_tuning(&mut store);
        Ok((model, store))
    }

    fn apply_tuning(&self, store: &mut ParamStore) {
        let ids: Vec<ParamId> = store.iter().map(|(id, _)| id).collect();
        for id in ids {
            store.set_trainable(id, false);
        }
        let mut on = Vec::new();
        match self.tuning {
            Tuning::Frozen => {}
            Tuning::LinearProbe => on.extend([self.head_w, self.head_b]),
            Tuning::Mantis => {
                on.extend([self.head_w, self.head_b, self.gamma, self.proj.w]);
                if !self.adapters.is_empty() {
                    on.extend([self.tok.g_w, self.tok.phi_w, self.tok.phi_b]);
                    on.extend(self.tok.order_emb);
                    for a in &self.adapters {
                        on.extend(a.ids());
                    }
                }
            }
        }
        for id in on {
            store.set_trainable(id, true);
        }
    }

    /// Trainable parameters of one adapter module as allocated (0 without
    /// adapters).
    pub fn adapter_params_per_block(&self, store: &ParamStore) -> usize {
        self.adapters.first().map_or(0, |a| a.allocated(store))
    }

    /// Parameter-free preprocessing plus frozen patch encoding.
    pub fn prepare(&self, store: &ParamStore, cloud: &PointCloud) -> Result<Prepared> {
        let cloud = normalize(cloud)?;
        let centers = farthest_point_sample(&cloud, self.cfg.patches, SeedRule::default())?;
        let patches = knn_patches(&cloud, &centers, self.cfg.k)?;
        let orders = [
            serialize_keypoints(&patches.centers, self.cfg.curves[0], self.cfg.bits)?.order,
            serialize_keypoints(&patches.centers, self.cfg.curves[1], self.cfg.bits)?.order,
        ];
        let tokens = tokenizer::encode_patches(&patches, store, &self.tok)?;
        Ok(Prepared { patches, orders, tokens, label: cloud.label })
    }

    fn needs_deep_grad(&self, store: &ParamStore) -> bool {
        store.param(self.gamma).trainable
            || self.adapters.iter().any(|a| store.param(a.u).trainable)
    }

    pub fn forward(&self, store: &ParamStore, s: &Prepared, opts: ForwardOptions) -> Result<SampleForward> {
        let branch_tokens = [s.branch_tokens(Branch::First), s.branch_tokens(Branch::Second)];
        let order_aware = [Branch::First, Branch::Second].map(|b| {
            let emb = store.value(self.tok.order_emb[b.index()]);
            tokenizer::order_aware_global(&branch_tokens[b.index()], emb, store, &self.tok)
        });
        let (z0, aligned) = tokenizer::fuse_branches(
            &branch_tokens[0],
            &branch_tokens[1],
            &s.orders[0],
            &s.orders[1],
            store.value(self.gamma),
        )?;
        let use_adapters = !self.adapters.is_empty() && !opts.bypass_adapters;
        let mut blocks: [Vec<BlockCache>; 2] = Default::default();
        let mut finals = Vec::with_capacity(2);
        for (k, z) in z0.into_iter().enumerate() {
            let mut z = z;
            for (l, bp) in self.blocks.iter().enumerate() {
                let ad = use_adapters.then(|| AdapterInput {
                    params: &self.adapters[l],
                    e: &order_aware[k].e,
                    force_zero: opts.force_zero_control,
                });
                let (out, cache) = ssm::block_forward(&z, store, bp, ad, &format!("branch {} block {l}", k + 1))?;
                blocks[k].push(cache);
                z = out;
            }
            finals.push(z);
        }
        let mut final_ln = Vec::with_capacity(2);
        let mut features = Vec::with_capacity(2);
        let mut logits = Vec::with_capacity(2);
        let mut projected = Vec::with_capacity(2);
        let (hw, hb) = (store.value(self.head_w), store.value(self.head_b));
        for z in &finals {
            let (zf, ln) = ssm::layer_norm(z, None);
            let f = dscd::avg_pool(&zf);
            let mut l = hb.to_vec();
            let mut tmp = vec![0.0; self.cfg.classes];
            matvec(hw, self.cfg.classes, self.cfg.d, &f, &mut tmp);
            l.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            projected.push(self.proj.project(store, &f));
            final_ln.push(ln);
            features.push(f);
            logits.push(l);
        }
        Ok(SampleForward {
            branch_tokens,
            order_aware,
            aligned,
            blocks,
            final_ln: two(final_ln),
            features: two(features),
            logits: two(logits),
            projected: two(projected),
            used_adapters: use_adapters,
            force_zero: opts.force_zero_control,
        })
    }

    pub fn loss(&self, fwd: &SampleForward, label: usize, w: &LossWeights) -> Result<LossReport> {
        let (task, _) = dscd::cross_entropy(&fwd.mean_logits(), label);
        let feat = dscd::normalized_sq_distance(&fwd.projected[0], &fwd.projected[1]).unwrap_or(0.0);
        let pred = dscd::prediction_loss(&fwd.logits[0], &fwd.logits[1], w.tau)?;
        Ok(dscd::total_loss(task, feat, pred, w.alpha, w.beta, w.tau))
    }

    /// Accumulates the gradient of the total loss into `grads`.
    pub fn backward(
        &self,
        store: &ParamStore,
        fwd: &SampleForward,
        label: usize,
        w: &LossWeights,
        grads: &mut Grads,
    ) {
        let (c, d) = (self.cfg.classes, self.cfg.d);
        let (_, dmean) = dscd::cross_entropy(&fwd.mean_logits(), label);
        let (dp1, dp2) = if w.beta != 0.0 {
            dscd::prediction_loss_grad(&fwd.logits[0], &fwd.logits[1], w.tau)
        } else {
            (vec![0.0; c], vec![0.0; c])
        };
        let (dz1, dz2) = if w.alpha != 0.0 {
            dscd::normalized_sq_distance_grad(&fwd.projected[0], &fwd.projected[1])
        } else {
            (vec![0.0; self.cfg.d_proj], vec![0.0; self.cfg.d_proj])
        };
        let dlogits = [(0, dp1), (1, dp2)].map(|(_, dp)| {
            dmean.iter().zip(&dp).map(|(m, p)| 0.5 * m + w.beta * p).collect::<Vec<f64>>()
        });
        let dproj = [dz1, dz2].map(|v| v.iter().map(|g| w.alpha * g).collect::<Vec<f64>>());
        let deep = self.needs_deep_grad(store);
        for k in 0..2 {
            let f = &fwd.features[k];
            if let Some(g) = grads.get_mut(self.head_w) {
                outer_acc(g, &dlogits[k], f);
            }
            if let Some(g) = grads.get_mut(self.head_b) {
                g.iter_mut().zip(&dlogits[k]).for_each(|(a, b)| *a += b);
            }
            if let Some(g) = grads.get_mut(self.proj.w) {
                outer_acc(g, &dproj[k], f);
            }
            if !deep {
                continue;
            }
            let mut df = vec![0.0; d];
            matvec_t_acc(store.value(self.head_w), c, d, &dlogits[k], &mut df);
            matvec_t_acc(store.value(self.proj.w), self.cfg.d_proj, d, &dproj[k], &mut df);
            let n = fwd.branch_tokens[k].rows;
            let mut dzf = Mat::zeros(n, d);
            for t in 0..n {
                dzf.row_mut(t).iter_mut().zip(&df).for_each(|(a, b)| *a = b / n as f64);
            }
            let mut dz = ssm::layer_norm_backward(&dzf, &fwd.final_ln[k], None);
            let mut de = vec![0.0; d];
            for (l, bp) in self.blocks.iter().enumerate().rev() {
                let ad = fwd.used_adapters.then(|| &self.adapters[l]);
                let (dzin, de_l) = ssm::block_backward(
                    &dz,
                    &fwd.blocks[k][l],
                    store,
                    bp,
                    ad,
                    Some(&fwd.order_aware[k].e),
                    grads,
                );
                if let Some(de_l) = de_l {
                    de.iter_mut().zip(&de_l).for_each(|(a, b)| *a += b);
                }
                dz = dzin;
            }
            if let Some(g) = grads.get_mut(self.gamma) {
                for t in 0..n {
                    for (j, gj) in g.iter_mut().enumerate() {
                        *gj += dz.get(t, j) * fwd.aligned[k].get(t, j);
                    }
                }
            }
            if fwd.used_adapters && !fwd.force_zero {
                let b = Branch::BOTH[k];
                tokenizer::order_aware_backward(
                    &de,
                    &fwd.branch_tokens[k],
                    store.value(self.tok.order_emb[k]),
                    b,
                    &fwd.order_aware[k],
                    store,
                    &self.tok,
                    grads,
                );
            }
        }
    }

    /// Loss and gradient of one labelled sample.
    pub fn loss_and_grad(
        &self,
        store: &ParamStore,
        s: &Prepared,
        w: &LossWeights,
        grads: &mut Grads,
    ) -> Result<(LossReport, SampleForward)> {
        let label = s.label.ok_or_else(|| MantisError::Argument("training sample without label".into()))?;
        let fwd = self.forward(store, s, ForwardOptions::default())?;
        let report = self.loss(&fwd, label, w)?;
        self.backward(store, &fwd, label, w, grads);
        Ok((report, fwd))
    }
}

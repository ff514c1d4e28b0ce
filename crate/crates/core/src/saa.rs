//! State-Aware Adapter: control features, sparse proximal control signals and
//! low-rank modulation of the per-step state-space operators.
//!
//! Per step the stacked operator vector of one channel is
//! `θ = (log|a| ‖ B ‖ C ‖ Δ-preactivation) ∈ R^{3N+1}` and the adapter applies
//! `θ̃ = θ + mask ⊙ (U diag(u) V θ)`. Modulating `log|a|` and the Δ
//! preactivation keeps `A < 0` and `Δ > 0` for any control signal.

use std::fmt;
use std::str::FromStr;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::ssm::{discretize, ContinuousOps, OperatorBundle};
use crate::tensor::{axpy, matvec, matvec_t_acc, outer_acc, sigmoid, silu, silu_grad, softplus};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ControllerKind {
    #[default]
    Soft,
    /// Hard threshold; trained with the soft-threshold derivative as a
    /// straight-through surrogate.
    Hard,
    Sigmoid,
    Tanh,
    Dense,
}

impl ControllerKind {
    pub const ALL: [ControllerKind; 5] = [
        ControllerKind::Dense,
        ControllerKind::Sigmoid,
        ControllerKind::Tanh,
        ControllerKind::Hard,
        ControllerKind::Soft,
    ];

    /// Whether exact zeros of `u` carry no gradient.
    fn sparse(self) -> bool {
        matches!(self, ControllerKind::Soft | ControllerKind::Hard)
    }

    pub fn label(self) -> &'static str {
        match self {
            ControllerKind::Soft => "soft",
            ControllerKind::Hard => "hard",
            ControllerKind::Sigmoid => "sigmoid",
            ControllerKind::Tanh => "tanh",
            ControllerKind::Dense => "dense",
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FusionKind {
    Add,
    Concat,
    Gated,
    Xattn,
    #[default]
    ConcatMlp,
}

impl FusionKind {
    pub const ALL: [FusionKind; 5] =
        [FusionKind::Add, FusionKind::Concat, FusionKind::Gated, FusionKind::Xattn, FusionKind::ConcatMlp];

    pub fn label(self) -> &'static str {
        match self {
            FusionKind::Add => "add",
            FusionKind::Concat => "concat",
            FusionKind::Gated => "gated",
            FusionKind::Xattn => "xattn",
            FusionKind::ConcatMlp => "concat_mlp",
        }
    }
}

/// Which operator groups receive the low-rank perturbation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<String>", into = "Vec<String>")]
pub struct OperatorMask {
    pub a: bool,
    pub b: bool,
    pub c: bool,
    pub delta: bool,
}

impl Default for OperatorMask {
    fn default() -> Self {
        OperatorMask { a: true, b: true, c: true, delta: true }
    }
}

impl OperatorMask {
    pub const NONE: OperatorMask = OperatorMask { a: false, b: false, c: false, delta: false };

    /// Mask rows of the stacked `3N+1` operator vector.
    pub fn entries(&self, n_state: usize) -> Vec<bool> {
        let mut v = Vec::with_capacity(3 * n_state + 1);
        v.extend(std::iter::repeat_n(self.a, n_state));
        v.extend(std::iter::repeat_n(self.b, n_state));
        v.extend(std::iter::repeat_n(self.c, n_state));
        v.push(self.delta);
        v
    }

    pub fn names(&self) -> Vec<String> {
        let mut v = Vec::new();
        for (on, name) in [(self.a, "A"), (self.b, "B"), (self.c, "C"), (self.delta, "Delta")] {
            if on {
                v.push(name.to_string());
            }
        }
        v
    }
}

impl TryFrom<Vec<String>> for OperatorMask {
    type Error = MantisError;
    fn try_from(v: Vec<String>) -> Result<Self> {
        let mut m = OperatorMask::NONE;
        for s in v {
            match s.as_str() {
                "A" => m.a = true,
                "B" => m.b = true,
                "C" => m.c = true,
                "Delta" => m.delta = true,
                other => return Err(MantisError::Config(format!("unknown operator `{other}`"))),
            }
        }
        Ok(m)
    }
}

impl From<OperatorMask> for Vec<String> {
    fn from(m: OperatorMask) -> Self {
        m.names()
    }
}

impl FromStr for OperatorMask {
    type Err = MantisError;
    fn from_str(s: &str) -> Result<Self> {
        s.split([',', '+', ' '])
            .filter(|t| !t.is_empty())
            .map(str::to_string)
            .collect::<Vec<_>>()
            .try_into()
    }
}

impl fmt::Display for OperatorMask {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.names().join(","))
    }
}

/// Sizes of one adapter module.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SaaConfig {
    /// Width of the token fed to the controller and of the order-aware vector.
    pub d: usize,
    /// Width of the pooled hidden state.
    pub d_h: usize,
    pub d_phi: usize,
    pub r: usize,
    /// Length of the stacked operator vector.
    pub m: usize,
    pub controller: ControllerKind,
    pub fusion: FusionKind,
    pub modulate: OperatorMask,
}

impl SaaConfig {
    /// Adapter for a backbone with `n_state` state dimensions per channel.
    pub fn for_backbone(d: usize, n_state: usize, d_phi: usize, r: usize) -> Self {
        SaaConfig {
            d,
            d_h: n_state,
            d_phi,
            r,
            m: 3 * n_state + 1,
            controller: ControllerKind::Soft,
            fusion: FusionKind::ConcatMlp,
            modulate: OperatorMask::default(),
        }
    }

    pub fn n_state(&self) -> usize {
        (self.m - 1) / 3
    }
}

/// Closed-form trainable-parameter count of one adapter module.
pub fn closed_form_count(d: usize, d_h: usize, d_phi: usize, r: usize, m: usize) -> usize {
    2 * d_phi * d + d_phi * d_h + 3 * d_phi * d_phi + d_phi + 2 * r * d_phi + 2 * m * r
}

/// Every tensor an adapter allocates, by role.
pub fn param_shapes(cfg: &SaaConfig) -> Vec<(&'static str, Vec<usize>)> {
    let (d, dp, r, m) = (cfg.d, cfg.d_phi, cfg.r, cfg.m);
    let mut v = vec![("w_x", vec![dp, d]), ("w_h", vec![dp, cfg.d_h]), ("w_e", vec![dp, d])];
    match cfg.fusion {
        FusionKind::Add => v.push(("fuse.b", vec![dp])),
        FusionKind::Concat | FusionKind::ConcatMlp => {
            v.push(("fuse.w", vec![dp, 3 * dp]));
            v.push(("fuse.b", vec![dp]));
        }
        FusionKind::Gated => {
            v.push(("fuse.gate_w", vec![dp, 3 * dp]));
            v.push(("fuse.gate_b", vec![dp]));
        }
        FusionKind::Xattn => {
            for name in ["fuse.wq", "fuse.wk", "fuse.wv", "fuse.wo"] {
                v.push((name, vec![dp, dp]));
            }
            v.push(("fuse.bo", vec![dp]));
        }
    }
    match cfg.controller {
        ControllerKind::Dense => {
            v.push(("ctrl.hidden_w", vec![dp, dp]));
            v.push(("ctrl.hidden_b", vec![dp]));
            v.push(("w_drv", vec![r, dp]));
        }
        _ => {
            v.push(("w_drv", vec![r, dp]));
            v.push(("w_gt", vec![r, dp]));
        }
    }
    v.push(("mod.u", vec![m, r]));
    v.push(("mod.v", vec![r, m]));
    v
}

/// Trainable parameters of one adapter module as actually allocated.
pub fn count_parameters(cfg: &SaaConfig) -> usize {
    param_shapes(cfg).iter().map(|(_, s)| s.iter().product::<usize>()).sum()
}

/// Extra init gain of the drive projection. With a plain fan-in scale almost
/// every coordinate starts inside the dead zone of the threshold, and since
/// `U` starts at zero only active coordinates feed the adapter any gradient.
pub const DRIVE_INIT_GAIN: f64 = 2.0;

/// Parameter handles of one adapter module.
#[derive(Clone, Debug)]
pub struct AdapterParams {
    pub cfg: SaaConfig,
    pub w_x: ParamId,
    pub w_h: ParamId,
    pub w_e: ParamId,
    pub fusion: Vec<ParamId>,
    pub w_drv: ParamId,
    pub w_gt: Option<ParamId>,
    pub hidden_w: Option<ParamId>,
    pub hidden_b: Option<ParamId>,
    pub u: ParamId,
    pub v: ParamId,
}

impl AdapterParams {
    /// Allocate with `U = 0`, so the adapted model starts at the frozen one.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, cfg: SaaConfig, rng: &mut R) -> Self {
        let mut ids = std::collections::HashMap::new();
        for (name, shape) in param_shapes(&cfg) {
            let full = format!("{prefix}.{name}");
            let fan_in = *shape.last().unwrap_or(&1) as f64;
            let id = match name {
                "mod.u" => store.zeros(full, &shape, true),
                n if n.ends_with(".b") || n.ends_with("_b") || n.ends_with(".bo") => {
                    store.zeros(full, &shape, true)
                }
                "w_drv" => store.uniform(full, &shape, DRIVE_INIT_GAIN * (3.0 / fan_in).sqrt(), true, rng),
                // thresholds start near ln 2
                "w_gt" => store.uniform(full, &shape, 1.0 / fan_in.sqrt(), true, rng),
                // variance preserving
                _ => store.uniform(full, &shape, (3.0 / fan_in).sqrt(), true, rng),
            };
            ids.insert(name, id);
        }
        let fusion = param_shapes(&cfg)
            .iter()
            .filter(|(n, _)| n.starts_with("fuse."))
            .map(|(n, _)| ids[n])
            .collect();
        AdapterParams {
            cfg,
            w_x: ids["w_x"],
            w_h: ids["w_h"],
            w_e: ids["w_e"],
            fusion,
            w_drv: ids["w_drv"],
            w_gt: ids.get("w_gt").copied(),
            hidden_w: ids.get("ctrl.hidden_w").copied(),
            hidden_b: ids.get("ctrl.hidden_b").copied(),
            u: ids["mod.u"],
            v: ids["mod.v"],
        }
    }

    pub fn ids(&self) -> Vec<ParamId> {
        let mut v = vec![self.w_x, self.w_h, self.w_e];
        v.extend(&self.fusion);
        v.push(self.w_drv);
        v.extend(self.w_gt);
        v.extend(self.hidden_w);
        v.extend(self.hidden_b);
        v.push(self.u);
        v.push(self.v);
        v
    }

    pub fn allocated(&self, store: &ParamStore) -> usize {
        self.ids().iter().map(|&id| store.value(id).len()).sum()
    }
}

/// `argmin_v ½(q − v)² + λ|v|`, i.e. `sign(q) · max(|q| − λ, 0)`.
#[inline]
pub fn soft_threshold_scalar(q: f64, lambda: f64) -> f64 {
    if q > lambda {
        q - lambda
    } else if q < -lambda {
        q + lambda
    } else {
        0.0
    }
}

pub fn soft_threshold(q: &[f64], lambda: &[f64]) -> Result<Vec<f64>> {
    if q.len() != lambda.len() {
        return Err(MantisError::Internal("soft-threshold length mismatch".into()));
    }
    if let Some(l) = lambda.iter().find(|&&l| !(l > 0.0)) {
        return Err(MantisError::Internal(format!("threshold must be positive, got {l}")));
    }
    Ok(q.iter().zip(lambda).map(|(&q, &l)| soft_threshold_scalar(q, l)).collect())
}

/// `δ = U diag(u) V`, an `m × m` matrix.
pub fn perturbation_matrix(u: &[f64], u_mat: &[f64], v_mat: &[f64], m: usize) -> Vec<f64> {
    let r = u.len();
    let mut out = vec![0.0; m * m];
    for i in 0..m {
        for k in 0..r {
            let s = u_mat[i * r + k] * u[k];
            if s != 0.0 {
                axpy(s, &v_mat[k * m..(k + 1) * m], &mut out[i * m..(i + 1) * m]);
            }
        }
    }
    out
}

/// `θ̃ = θ + mask ⊙ (U diag(u) V θ)` for one stacked operator vector.
pub fn modulate_operators(
    theta: &[f64],
    u: &[f64],
    u_mat: &[f64],
    v_mat: &[f64],
    mask: &OperatorMask,
) -> Vec<f64> {
    let (m, r) = (theta.len(), u.len());
    let mut s = vec![0.0; r];
    matvec(v_mat, r, m, theta, &mut s);
    s.iter_mut().zip(u).for_each(|(a, b)| *a *= b);
    let mut delta = vec![0.0; m];
    matvec(u_mat, m, r, &s, &mut delta);
    let keep = mask.entries((m - 1) / 3);
    theta
        .iter()
        .zip(delta)
        .zip(keep)
        .map(|((t, d), k)| if k { t + d } else { *t })
        .collect()
}

#[derive(Clone, Debug)]
pub enum FusionCache {
    Add { pre: Vec<f64> },
    Concat,
    ConcatMlp { pre: Vec<f64> },
    Gated { gate: Vec<f64>, pre: Vec<f64> },
    Xattn { q: Vec<f64>, k: [Vec<f64>; 2], v: [Vec<f64>; 2], attn: [f64; 2], ctx: Vec<f64>, pre: Vec<f64> },
}

/// Per-step controller state: control feature, drive, threshold, signal.
#[derive(Clone, Debug)]
pub struct ControlState {
    pub hp: Vec<f64>,
    pub px: Vec<f64>,
    pub ph: Vec<f64>,
    pub fusion: FusionCache,
    pub phi: Vec<f64>,
    pub q: Vec<f64>,
    /// Gate preactivation (`W_gt φ`), or the dense hidden preactivation.
    pub g: Vec<f64>,
    /// Threshold for soft/hard controllers, empty otherwise.
    pub lambda: Vec<f64>,
    pub u: Vec<f64>,
}

impl ControlState {
    /// Coordinates whose value or gradient can be nonzero.
    pub fn live(&self, kind: ControllerKind) -> Vec<usize> {
        if kind.sparse() {
            (0..self.u.len()).filter(|&i| self.u[i] != 0.0).collect()
        } else {
            (0..self.u.len()).collect()
        }
    }

    /// Smallest `||q| − λ|` over coordinates (distance to a threshold kink).
    pub fn kink_margin(&self) -> f64 {
        self.q
            .iter()
            .zip(&self.lambda)
            .map(|(q, l)| (q.abs() - l).abs())
            .fold(f64::INFINITY, f64::min)
    }
}

fn fusion_forward(
    px: &[f64],
    ph: &[f64],
    pe: &[f64],
    store: &ParamStore,
    ap: &AdapterParams,
) -> (Vec<f64>, FusionCache) {
    let dp = ap.cfg.d_phi;
    let f = &ap.fusion;
    let cat = || [px, ph, pe].concat();
    match ap.cfg.fusion {
        FusionKind::Add => {
            let b = store.value(f[0]);
            let pre: Vec<f64> = (0..dp).map(|i| px[i] + ph[i] + pe[i] + b[i]).collect();
            (pre.iter().map(|&v| silu(v)).collect(), FusionCache::Add { pre })
        }
        FusionKind::Concat | FusionKind::ConcatMlp => {
            let mut pre = store.value(f[1]).to_vec();
            let mut tmp = vec![0.0; dp];
            matvec(store.value(f[0]), dp, 3 * dp, &cat(), &mut tmp);
            pre.iter_mut().zip(&tmp).for_each(|(a, b)| *a += b);
            if ap.cfg.fusion == FusionKind::Concat {
                (pre, FusionCache::Concat)
            } else {
                (pre.iter().map(|&v| silu(v)).collect(), FusionCache::ConcatMlp { pre })
            }
        }
        FusionKind::Gated => {
            let mut z = vec![0.0; dp];
            matvec(store.value(f[0]), dp, 3 * dp, &cat(), &mut z);
            let gate: Vec<f64> =
                z.iter().zip(store.value(f[1])).map(|(z, b)| sigmoid(z + b)).collect();
            let pre: Vec<f64> =
                (0..dp).map(|i| gate[i] * px[i] + (1.0 - gate[i]) * (ph[i] + pe[i])).collect();
            (pre.iter().map(|&v| silu(v)).collect(), FusionCache::Gated { gate, pre })
        }
        FusionKind::Xattn => {
            let (wq, wk, wv, wo, bo) = (
                store.value(f[0]),
                store.value(f[1]),
                store.value(f[2]),
                store.value(f[3]),
                store.value(f[4]),
            );
            let proj = |w: &[f64], x: &[f64]| {
                let mut o = vec![0.0; dp];
                matvec(w, dp, dp, x, &mut o);
                o
            };
            let q = proj(wq, px);
            let k = [proj(wk, ph), proj(wk, pe)];
            let v = [proj(wv, ph), proj(wv, pe)];
            let scale = 1.0 / (dp as f64).sqrt();
            let s = [crate::tensor::dot(&q, &k[0]) * scale, crate::tensor::dot(&q, &k[1]) * scale];
            let mx = s[0].max(s[1]);
            let ex = [(s[0] - mx).exp(), (s[1] - mx).exp()];
            let attn = [ex[0] / (ex[0] + ex[1]), ex[1] / (ex[0] + ex[1])];
            let ctx: Vec<f64> = (0..dp).map(|i| attn[0] * v[0][i] + attn[1] * v[1][i]).collect();
            let mut pre = px.to_vec();
            let o = proj(wo, &ctx);
            for i in 0..dp {
                pre[i] += o[i] + bo[i];
            }
            let phi = pre.iter().map(|&v| silu(v)).collect();
            (phi, FusionCache::Xattn { q, k, v, attn, ctx, pre })
        }
    }
}

/// Returns `(dpx, dph, dpe)`.
#[allow(clippy::too_many_arguments)]
fn fusion_backward(
    dphi: &[f64],
    st: &ControlState,
    pe: &[f64],
    store: &ParamStore,
    ap: &AdapterParams,
    grads: &mut Grads,
) -> [Vec<f64>; 3] {
    let dp = ap.cfg.d_phi;
    let f = &ap.fusion;
    let (px, ph) = (&st.px, &st.ph);
    let mut dpx = vec![0.0; dp];
    let mut dph = vec![0.0; dp];
    let mut dpe = vec![0.0; dp];
    let split_cat = |dcat: &[f64], dpx: &mut [f64], dph: &mut [f64], dpe: &mut [f64]| {
        axpy(1.0, &dcat[..dp], dpx);
        axpy(1.0, &dcat[dp..2 * dp], dph);
        axpy(1.0, &dcat[2 * dp..], dpe);
    };
    match &st.fusion {
        FusionCache::Add { pre } => {
            let dpre: Vec<f64> = (0..dp).map(|i| dphi[i] * silu_grad(pre[i])).collect();
            if let Some(g) = grads.get_mut(f[0]) {
                axpy(1.0, &dpre, g);
            }
            return [dpre.clone(), dpre.clone(), dpre];
        }
        FusionCache::Concat | FusionCache::ConcatMlp { .. } => {
            let dpre: Vec<f64> = match &st.fusion {
                FusionCache::ConcatMlp { pre } => {
                    (0..dp).map(|i| dphi[i] * silu_grad(pre[i])).collect()
                }
                _ => dphi.to_vec(),
            };
            let cat = [px.as_slice(), ph, pe].concat();
            if let Some(g) = grads.get_mut(f[0]) {
                outer_acc(g, &dpre, &cat);
            }
            if let Some(g) = grads.get_mut(f[1]) {
                axpy(1.0, &dpre, g);
            }
            let mut dcat = vec![0.0; 3 * dp];
            matvec_t_acc(store.value(f[0]), dp, 3 * dp, &dpre, &mut dcat);
            split_cat(&dcat, &mut dpx, &mut dph, &mut dpe);
        }
        FusionCache::Gated { gate, pre } => {
            let mut dz = vec![0.0; dp];
            for i in 0..dp {
                let dpre = dphi[i] * silu_grad(pre[i]);
                dpx[i] += dpre * gate[i];
                dph[i] += dpre * (1.0 - gate[i]);
                dpe[i] += dpre * (1.0 - gate[i]);
                let dg = dpre * (px[i] - ph[i] - pe[i]);
                dz[i] = dg * gate[i] * (1.0 - gate[i]);
            }
            let cat = [px.as_slice(), ph, pe].concat();
            if let Some(g) = grads.get_mut(f[0]) {
                outer_acc(g, &dz, &cat);
            }
            if let Some(g) = grads.get_mut(f[1]) {
                axpy(1.0, &dz, g);
            }
            let mut dcat = vec![0.0; 3 * dp];
            matvec_t_acc(store.value(f[0]), dp, 3 * dp, &dz, &mut dcat);
            split_cat(&dcat, &mut dpx, &mut dph, &mut dpe);
        }
        FusionCache::Xattn { q, k, v, attn, ctx, pre } => {
            let (wq, wk, wv, wo) =
                (store.value(f[0]), store.value(f[1]), store.value(f[2]), store.value(f[3]));
            let dpre: Vec<f64> = (0..dp).map(|i| dphi[i] * silu_grad(pre[i])).collect();
            axpy(1.0, &dpre, &mut dpx);
            if let Some(g) = grads.get_mut(f[3]) {
                outer_acc(g, &dpre, ctx);
            }
            if let Some(g) = grads.get_mut(f[4]) {
                axpy(1.0, &dpre, g);
            }
            let mut dctx = vec![0.0; dp];
            matvec_t_acc(wo, dp, dp, &dpre, &mut dctx);
            let da = [crate::tensor::dot(&dctx, &v[0]), crate::tensor::dot(&dctx, &v[1])];
            let mean = attn[0] * da[0] + attn[1] * da[1];
            let scale = 1.0 / (dp as f64).sqrt();
            let ds = [attn[0] * (da[0] - mean) * scale, attn[1] * (da[1] - mean) * scale];
            let srcs = [ph.as_slice(), pe];
            let mut dq = vec![0.0; dp];
            for j in 0..2 {
                axpy(ds[j], &k[j], &mut dq);
                let dk: Vec<f64> = q.iter().map(|qi| ds[j] * qi).collect();
                let dv: Vec<f64> = dctx.iter().map(|c| attn[j] * c).collect();
                if let Some(g) = grads.get_mut(f[1]) {
                    outer_acc(g, &dk, srcs[j]);
                }
                if let Some(g) = grads.get_mut(f[2]) {
                    outer_acc(g, &dv, srcs[j]);
                }
                let dsrc = if j == 0 { &mut dph } else { &mut dpe };
                matvec_t_acc(wk, dp, dp, &dk, dsrc);
                matvec_t_acc(wv, dp, dp, &dv, dsrc);
            }
            if let Some(g) = grads.get_mut(f[0]) {
                outer_acc(g, &dq, px);
            }
            matvec_t_acc(wq, dp, dp, &dq, &mut dpx);
        }
    }
    [dpx, dph, dpe]
}

/// `W_e e`, constant along a sequence.
pub fn project_order(e: &[f64], store: &ParamStore, ap: &AdapterParams) -> Vec<f64> {
    let mut pe = vec![0.0; ap.cfg.d_phi];
    matvec(store.value(ap.w_e), ap.cfg.d_phi, ap.cfg.d, e, &mut pe);
    pe
}

/// Control feature `φ = Φ(W_x x ‖ W_h h ‖ W_e e)` followed by the controller.
/// `pe` is the precomputed `W_e e`.
pub fn control_forward(
    x: &[f64],
    hp: &[f64],
    pe: &[f64],
    store: &ParamStore,
    ap: &AdapterParams,
) -> ControlState {
    let cfg = &ap.cfg;
    let (dp, r) = (cfg.d_phi, cfg.r);
    let mut px = vec![0.0; dp];
    matvec(store.value(ap.w_x), dp, cfg.d, x, &mut px);
    let mut ph = vec![0.0; dp];
    matvec(store.value(ap.w_h), dp, cfg.d_h, hp, &mut ph);
    let (phi, fusion) = fusion_forward(&px, &ph, pe, store, ap);
    let mut q = vec![0.0; r];
    let mut g: Vec<f64>;
    let mut lambda = Vec::new();
    let u: Vec<f64>;
    match cfg.controller {
        ControllerKind::Dense => {
            let (hw, hb) = (ap.hidden_w.unwrap(), ap.hidden_b.unwrap());
            g = vec![0.0; dp];
            matvec(store.value(hw), dp, dp, &phi, &mut g);
            g.iter_mut().zip(store.value(hb)).for_each(|(a, b)| *a += b);
            let hidden: Vec<f64> = g.iter().map(|&v| silu(v)).collect();
            matvec(store.value(ap.w_drv), r, dp, &hidden, &mut q);
            u = q.clone();
        }
        kind => {
            matvec(store.value(ap.w_drv), r, dp, &phi, &mut q);
            g = vec![0.0; r];
            matvec(store.value(ap.w_gt.unwrap()), r, dp, &phi, &mut g);
            u = match kind {
                ControllerKind::Soft | ControllerKind::Hard => {
                    // λ = −log σ(g) = softplus(−g) > 0
                    lambda = g.iter().map(|&v| softplus(-v)).collect();
                    q.iter()
                        .zip(&lambda)
                        .map(|(&q, &l)| match kind {
                            ControllerKind::Soft => soft_threshold_scalar(q, l),
                            _ => {
                                if q.abs() > l {
                                    q
                                } else {
                                    0.0
                                }
                            }
                        })
                        .collect()
                }
                ControllerKind::Sigmoid => q.iter().zip(&g).map(|(q, g)| q * sigmoid(*g)).collect(),
                _ => q.iter().zip(&g).map(|(q, g)| q * g.tanh()).collect(),
            };
        }
    }
    ControlState { hp: hp.to_vec(), px, ph, fusion, phi, q, g, lambda, u }
}

/// Gradients of the controller given `du`. Returns `(dx, dhp, dpe)`.
pub fn control_backward(
    du: &[f64],
    st: &ControlState,
    x: &[f64],
    pe: &[f64],
    store: &ParamStore,
    ap: &AdapterParams,
    grads: &mut Grads,
) -> (Vec<f64>, Vec<f64>, Vec<f64>) {
    let cfg = &ap.cfg;
    let (dp, r) = (cfg.d_phi, cfg.r);
    let mut dphi = vec![0.0; dp];
    match cfg.controller {
        ControllerKind::Dense => {
            let (hw, hb) = (ap.hidden_w.unwrap(), ap.hidden_b.unwrap());
            let hidden: Vec<f64> = st.g.iter().map(|&v| silu(v)).collect();
            if let Some(gr) = grads.get_mut(ap.w_drv) {
                outer_acc(gr, du, &hidden);
            }
            let mut dh = vec![0.0; dp];
            matvec_t_acc(store.value(ap.w_drv), r, dp, du, &mut dh);
            let da: Vec<f64> = dh.iter().zip(&st.g).map(|(d, a)| d * silu_grad(*a)).collect();
            if let Some(gr) = grads.get_mut(hw) {
                outer_acc(gr, &da, &st.phi);
            }
            if let Some(gr) = grads.get_mut(hb) {
                axpy(1.0, &da, gr);
            }
            matvec_t_acc(store.value(hw), dp, dp, &da, &mut dphi);
        }
        kind => {
            let mut dq = vec![0.0; r];
            let mut dg = vec![0.0; r];
            for i in 0..r {
                let (q, g) = (st.q[i], st.g[i]);
                match kind {
                    ControllerKind::Soft | ControllerKind::Hard => {
                        // ∂u/∂q = 1 and ∂u/∂λ = −sign(q) outside the dead zone; 0 on it.
                        if q.abs() > st.lambda[i] {
                            dq[i] = du[i];
                            let dl = -q.signum() * du[i];
                            dg[i] = -dl * sigmoid(-g);
                        }
                    }
                    ControllerKind::Sigmoid => {
                        let s = sigmoid(g);
                        dq[i] = du[i] * s;
                        dg[i] = du[i] * q * s * (1.0 - s);
                    }
                    _ => {
                        let t = g.tanh();
                        dq[i] = du[i] * t;
                        dg[i] = du[i] * q * (1.0 - t * t);
                    }
                }
            }
            let gt = ap.w_gt.unwrap();
            if let Some(gr) = grads.get_mut(ap.w_drv) {
                outer_acc(gr, &dq, &st.phi);
            }
            if let Some(gr) = grads.get_mut(gt) {
                outer_acc(gr, &dg, &st.phi);
            }
            matvec_t_acc(store.value(ap.w_drv), r, dp, &dq, &mut dphi);
            matvec_t_acc(store.value(gt), r, dp, &dg, &mut dphi);
        }
    }
    let [dpx, dph, dpe] = fusion_backward(&dphi, st, pe, store, ap, grads);
    if let Some(gr) = grads.get_mut(ap.w_x) {
        outer_acc(gr, &dpx, x);
    }
    if let Some(gr) = grads.get_mut(ap.w_h) {
        outer_acc(gr, &dph, &st.hp);
    }
    let mut dx = vec![0.0; cfg.d];
    matvec_t_acc(store.value(ap.w_x), dp, cfg.d, &dpx, &mut dx);
    let mut dhp = vec![0.0; cfg.d_h];
    matvec_t_acc(store.value(ap.w_h), dp, cfg.d_h, &dph, &mut dhp);
    (dx, dhp, dpe)
}

/// Stacked operator vector of channel `c` of a continuous operator set.
pub fn stack_channel(ops: &ContinuousOps, c: usize) -> Vec<f64> {
    let n = ops.state;
    let mut v = Vec::with_capacity(3 * n + 1);
    v.extend_from_slice(&ops.log_a[c * n..(c + 1) * n]);
    v.extend_from_slice(&ops.b[c * n..(c + 1) * n]);
    v.extend_from_slice(&ops.c[c * n..(c + 1) * n]);
    v.push(ops.delta_pre[c]);
    v
}

/// Reference composition of one controlled step: control feature, control
/// signal, modulation of every channel, and ZOH discretization. The block
/// forward pass computes the same thing with precomputed partial products.
pub fn saa_step(
    x: &[f64],
    h_prev: &[f64],
    e: &[f64],
    frozen: &ContinuousOps,
    store: &ParamStore,
    ap: &AdapterParams,
) -> (ControlState, OperatorBundle) {
    let n = frozen.state;
    let mut hp = vec![0.0; n];
    for c in 0..frozen.channels {
        axpy(1.0 / frozen.channels as f64, &h_prev[c * n..(c + 1) * n], &mut hp);
    }
    let pe = project_order(e, store, ap);
    let st = control_forward(x, &hp, &pe, store, ap);
    let mut controlled = frozen.clone();
    let (u_mat, v_mat) = (store.value(ap.u), store.value(ap.v));
    for c in 0..frozen.channels {
        let t = modulate_operators(&stack_channel(frozen, c), &st.u, u_mat, v_mat, &ap.cfg.modulate);
        controlled.log_a[c * n..(c + 1) * n].copy_from_slice(&t[..n]);
        controlled.b[c * n..(c + 1) * n].copy_from_slice(&t[n..2 * n]);
        controlled.c[c * n..(c + 1) * n].copy_from_slice(&t[2 * n..3 * n]);
        controlled.delta_pre[c] = t[3 * n];
    }
    let bundle = OperatorBundle {
        frozen_discrete: discretize(frozen),
        discrete: discretize(&controlled),
        frozen: frozen.clone(),
        controlled,
        control: st.u.clone(),
    };
    (st, bundle)
}

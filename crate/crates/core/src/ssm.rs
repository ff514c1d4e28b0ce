//! Frozen selective state-space backbone: operator generation, zero-order-hold
//! discretization, the sequential scan, and the adapted block with its exact
//! backward pass (backpropagation through the recurrence).

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::params::{Grads, ParamId, ParamStore};
use crate::saa::{self, AdapterParams, ControlState};
use crate::tensor::{axpy, dot, matvec, matvec_t_acc, outer_acc, sigmoid, silu, silu_grad, softplus, softplus_inv, Mat};

pub const LN_EPS: f64 = 1e-5;

/// Below this `|aΔ|` the ZOH input factor uses its series about `aΔ = 0`.
pub const ZOH_LIMIT: f64 = 1e-8;

/// Continuous-time operators of one step, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct ContinuousOps {
    pub channels: usize,
    pub state: usize,
    /// `log|a|`, so `a = −exp(log_a)`; `channels × state`.
    pub log_a: Vec<f64>,
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    /// Δ preactivation; `Δ = softplus(delta_pre)`.
    pub delta_pre: Vec<f64>,
}

impl ContinuousOps {
    /// Frozen operators: per-channel `log|a|` and Δ, input-dependent `B`, `C`
    /// broadcast to every channel.
    pub fn broadcast(log_a: &[f64], b: &[f64], c: &[f64], delta_pre: &[f64]) -> Self {
        let (channels, state) = (delta_pre.len(), b.len());
        ContinuousOps {
            channels,
            state,
            log_a: log_a.to_vec(),
            b: b.repeat(channels),
            c: c.repeat(channels),
            delta_pre: delta_pre.to_vec(),
        }
    }

    pub fn a(&self, ch: usize) -> Vec<f64> {
        self.log_a[ch * self.state..(ch + 1) * self.state].iter().map(|l| -l.exp()).collect()
    }

    pub fn delta(&self, ch: usize) -> f64 {
        softplus(self.delta_pre[ch])
    }
}

/// Discretized operators of one step, per channel.
#[derive(Clone, Debug, PartialEq)]
pub struct DiscreteOps {
    pub channels: usize,
    pub state: usize,
    pub a_hat: Vec<f64>,
    pub b_hat: Vec<f64>,
    pub c: Vec<f64>,
}

/// Per-step operators: frozen and controlled, continuous and discretized,
/// plus the control signal that produced them.
#[derive(Clone, Debug, PartialEq)]
pub struct OperatorBundle {
    pub frozen: ContinuousOps,
    pub controlled: ContinuousOps,
    pub frozen_discrete: DiscreteOps,
    pub discrete: DiscreteOps,
    pub control: Vec<f64>,
}

/// `(exp(aΔ) − 1) / a`, the ZOH input factor. Near `aΔ = 0` it switches to
/// the series `Δ(1 + aΔ/2)`; the bare limit `Δ` would be off by `|aΔ|/2`
/// relative just below the switch.
#[inline]
pub fn zoh_factor(a: f64, delta: f64) -> f64 {
    let x = a * delta;
    if x.abs() < ZOH_LIMIT {
        delta * (1.0 + 0.5 * x)
    } else {
        x.exp_m1() / a
    }
}

/// `g(x) = (x eˣ − (eˣ − 1)) / x²`, so that `∂f/∂a = Δ² g(aΔ)`; takes `eˣ`
/// and `eˣ − 1` precomputed.
#[inline]
fn zoh_slope_from(x: f64, ex: f64, em1: f64) -> f64 {
    if x.abs() < 1e-3 {
        0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x / 30.0))
    } else {
        (x * ex - em1) / (x * x)
    }
}

pub fn zoh_discretize(a: &[f64], b: &[f64], delta: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if !(delta > 0.0) {
        return Err(MantisError::Argument(format!("step size must be positive, got {delta}")));
    }
    if a.len() != b.len() {
        return Err(MantisError::Argument("operator length mismatch".into()));
    }
    let a_hat = a.iter().map(|&ai| (ai * delta).exp()).collect();
    let b_hat = a.iter().zip(b).map(|(&ai, &bi)| zoh_factor(ai, delta) * bi).collect();
    Ok((a_hat, b_hat))
}

pub fn discretize(ops: &ContinuousOps) -> DiscreteOps {
    let n = ops.state;
    let mut a_hat = vec![0.0; ops.channels * n];
    let mut b_hat = vec![0.0; ops.channels * n];
    for ch in 0..ops.channels {
        let delta = ops.delta(ch);
        for i in 0..n {
            let a = -ops.log_a[ch * n + i].exp();
            a_hat[ch * n + i] = (a * delta).exp();
            b_hat[ch * n + i] = zoh_factor(a, delta) * ops.b[ch * n + i];
        }
    }
    DiscreteOps { channels: ops.channels, state: n, a_hat, b_hat, c: ops.c.clone() }
}

/// `h_t = Â_t ⊙ h_{t−1} + B̂_t x_t`, `y_t = C_t · h_t` per channel, `h_0 = 0`.
/// `x` is `n × channels`; returns `y` (`n × channels`) and the states
/// `h_1..h_n` (`n × channels·state`).
pub fn selective_scan(x: &Mat, ops: &[DiscreteOps]) -> Result<(Mat, Mat)> {
    if ops.len() != x.rows {
        return Err(MantisError::Argument(format!(
            "{} operator steps for {} inputs",
            ops.len(),
            x.rows
        )));
    }
    let ch = x.cols;
    let n_state = ops.first().map_or(0, |o| o.state);
    let mut y = Mat::zeros(x.rows, ch);
    let mut hs = Mat::zeros(x.rows, ch * n_state);
    let mut h = vec![0.0; ch * n_state];
    for (t, op) in ops.iter().enumerate() {
        if op.channels != ch || op.state != n_state {
            return Err(MantisError::Argument(format!("operator shape mismatch at step {t}")));
        }
        for c in 0..ch {
            let xc = x.get(t, c);
            let mut acc = 0.0;
            for i in c * n_state..(c + 1) * n_state {
                h[i] = op.a_hat[i] * h[i] + op.b_hat[i] * xc;
                acc += op.c[i] * h[i];
            }
            y.set(t, c, acc);
        }
        hs.row_mut(t).copy_from_slice(&h);
    }
    Ok((y, hs))
}

/// Layer-normalized rows plus what the backward pass needs.
#[derive(Clone, Debug)]
pub struct LnCache {
    pub xhat: Mat,
    pub rstd: Vec<f64>,
}

/// Row-wise layer normalization; `affine = None` is the parameterless form.
pub fn layer_norm(z: &Mat, affine: Option<(&[f64], &[f64])>) -> (Mat, LnCache) {
    let d = z.cols as f64;
    let mut xhat = Mat::zeros(z.rows, z.cols);
    let mut rstd = Vec::with_capacity(z.rows);
    for t in 0..z.rows {
        let row = z.row(t);
        let mean = row.iter().sum::<f64>() / d;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d;
        let r = 1.0 / (var + LN_EPS).sqrt();
        for (o, v) in xhat.row_mut(t).iter_mut().zip(row) {
            *o = (v - mean) * r;
        }
        rstd.push(r);
    }
    let mut out = xhat.clone();
    if let Some((scale, shift)) = affine {
        for t in 0..out.rows {
            for (j, o) in out.row_mut(t).iter_mut().enumerate() {
                *o = *o * scale[j] + shift[j];
            }
        }
    }
    (out, LnCache { xhat, rstd })
}

pub fn layer_norm_backward(dout: &Mat, cache: &LnCache, scale: Option<&[f64]>) -> Mat {
    let d = dout.cols as f64;
    let mut dz = Mat::zeros(dout.rows, dout.cols);
    for t in 0..dout.rows {
        let xh = cache.xhat.row(t);
        let dxh: Vec<f64> = match scale {
            Some(s) => dout.row(t).iter().zip(s).map(|(g, s)| g * s).collect(),
            None => dout.row(t).to_vec(),
        };
        let m1 = dxh.iter().sum::<f64>() / d;
        let m2 = dot(&dxh, xh) / d;
        let r = cache.rstd[t];
        for (j, o) in dz.row_mut(t).iter_mut().enumerate() {
            *o = r * (dxh[j] - m1 - xh[j] * m2);
        }
    }
    dz
}

/// Sizes of one backbone block.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockDims {
    pub d: usize,
    pub d_e: usize,
    pub n_state: usize,
    pub conv_width: usize,
    pub dt_rank: usize,
}

impl BlockDims {
    pub fn new(d: usize, expand: usize, n_state: usize, conv_width: usize) -> Self {
        BlockDims { d, d_e: expand * d, n_state, conv_width, dt_rank: d.div_ceil(16).max(1) }
    }
}

/// Frozen weights of one block.
#[derive(Clone, Debug)]
pub struct BackboneParams {
    pub dims: BlockDims,
    pub ln_scale: ParamId,
    pub ln_shift: ParamId,
    pub w_in: ParamId,
    pub conv_w: ParamId,
    pub conv_b: ParamId,
    pub w_gate: ParamId,
    pub b_gate: ParamId,
    pub w_out: ParamId,
    pub w_b: ParamId,
    pub w_c: ParamId,
    pub w_dt_down: ParamId,
    pub w_dt_up: ParamId,
    pub b_dt: ParamId,
    pub a_log: ParamId,
}

impl BackboneParams {
    /// Random frozen block: selective-SSM conventions for `Δ` and `A`.
    pub fn init<R: Rng>(store: &mut ParamStore, prefix: &str, dims: BlockDims, rng: &mut R) -> Self {
        let BlockDims { d, d_e, n_state, conv_width, dt_rank } = dims;
        let name = |s: &str| format!("{prefix}.{s}");
        let ln_scale = store.add(name("ln.scale"), &[d], vec![1.0; d], false);
        let ln_shift = store.zeros(name("ln.shift"), &[d], false);
        // variance-preserving bounds on the residual-path maps; the 1/sqrt(fan_in)
        // default shrinks sample-to-sample variation ~10x per block
        let lin = |store: &mut ParamStore, n: String, r: usize, c: usize, rng: &mut R| {
            store.uniform(n, &[r, c], (3.0 / c as f64).sqrt(), false, rng)
        };
        let w_in = lin(store, name("in_proj.w"), d_e, d, rng);
        let cb = 1.0 / (conv_width as f64).sqrt();
        let conv_w = store.uniform(name("conv.w"), &[d_e, conv_width], cb, false, rng);
        let conv_b = store.uniform(name("conv.b"), &[d_e], cb, false, rng);
        let w_gate = lin(store, name("gate.w"), d, d, rng);
        let b_gate = store.uniform(name("gate.b"), &[d], 1.0 / (d as f64).sqrt(), false, rng);
        let w_out = lin(store, name("out_proj.w"), d, d_e, rng);
        let w_b = store.linear(name("x_proj.b"), n_state, d_e, false, rng);
        let w_c = store.linear(name("x_proj.c"), n_state, d_e, false, rng);
        let w_dt_down = store.linear(name("x_proj.dt"), dt_rank, d_e, false, rng);
        let w_dt_up = store.linear(name("dt_proj.w"), d_e, dt_rank, false, rng);
        let (lo, hi) = (1e-3f64.ln(), 1e-1f64.ln());
        let b_dt_vals = (0..d_e).map(|_| softplus_inv(rng.random_range(lo..hi).exp())).collect();
        let b_dt = store.add(name("dt_proj.b"), &[d_e], b_dt_vals, false);
        let a_vals = (0..d_e).flat_map(|_| (1..=n_state).map(|i| (i as f64).ln())).collect();
        let a_log = store.add(name("a_log"), &[d_e, n_state], a_vals, false);
        BackboneParams {
            dims,
            ln_scale,
            ln_shift,
            w_in,
            conv_w,
            conv_b,
            w_gate,
            b_gate,
            w_out,
            w_b,
            w_c,
            w_dt_down,
            w_dt_up,
            b_dt,
            a_log,
        }
    }

    pub fn ids(&self) -> [ParamId; 14] {
        [
            self.ln_scale,
            self.ln_shift,
            self.w_in,
            self.conv_w,
            self.conv_b,
            self.w_gate,
            self.b_gate,
            self.w_out,
            self.w_b,
            self.w_c,
            self.w_dt_down,
            self.w_dt_up,
            self.b_dt,
            self.a_log,
        ]
    }
}

/// Adapter attachment for one block forward pass.
#[derive(Clone, Copy, Debug)]
pub struct AdapterInput<'a> {
    pub params: &'a AdapterParams,
    /// Order-aware global vector of the branch.
    pub e: &'a [f64],
    /// Evaluate the controller but replace every control signal by zero.
    pub force_zero: bool,
}

#[derive(Clone, Debug)]
pub struct StepCache {
    pub b: Vec<f64>,
    pub c: Vec<f64>,
    pub dt_low: Vec<f64>,
    pub delta_pre: Vec<f64>,
    pub ctrl: Option<ControlState>,
    /// Control signal actually applied.
    pub u: Vec<f64>,
    /// `V θ_c` per channel (`d_e × r`), adapter only.
    pub v_theta: Vec<f64>,
    pub la: Vec<f64>,
    /// `−exp(la)`.
    pub av: Vec<f64>,
    pub bt: Vec<f64>,
    pub ct: Vec<f64>,
    pub pt: Vec<f64>,
    pub a_hat: Vec<f64>,
    pub f: Vec<f64>,
}

#[derive(Clone, Debug)]
pub struct BlockCache {
    pub zin: Mat,
    pub ln: LnCache,
    pub zn: Mat,
    pub pre_conv: Mat,
    pub conv: Mat,
    /// Scan input `X` (`n × d_e`).
    pub x: Mat,
    pub steps: Vec<StepCache>,
    /// `h_0..h_n`, `(n+1) × d_e·N`.
    pub h: Mat,
    pub y: Mat,
    pub gate_pre: Mat,
    pub pe: Vec<f64>,
    pub force_zero: bool,
}

fn numeric(block: &str, t: usize, what: &str) -> MantisError {
    MantisError::Numeric { location: format!("{block} step {t}"), detail: format!("non-finite {what}") }
}

/// `Z_out = F(X) + silu(Z_in W_gateᵀ + b)` with
/// `X = silu(conv(LN(Z_in) W_inᵀ))` and `F` the (optionally adapted) scan.
pub fn block_forward(
    zin: &Mat,
    store: &ParamStore,
    bp: &BackboneParams,
    adapter: Option<AdapterInput<'_>>,
    label: &str,
) -> Result<(Mat, BlockCache)> {
    let BlockDims { d, d_e, n_state: ns, conv_width: w, dt_rank } = bp.dims;
    if zin.cols != d {
        return Err(MantisError::Config(format!("block input width {} != {d}", zin.cols)));
    }
    let n = zin.rows;
    let (zn, ln) = layer_norm(zin, Some((store.value(bp.ln_scale), store.value(bp.ln_shift))));
    let pre_conv = zn.matmul_t(store.value(bp.w_in), d_e);
    let (cw, cb) = (store.value(bp.conv_w), store.value(bp.conv_b));
    let mut conv = Mat::zeros(n, d_e);
    for t in 0..n {
        for c in 0..d_e {
            let mut acc = cb[c];
            for k in 0..w {
                if let Some(src) = (t + k + 1).checked_sub(w) {
                    acc += cw[c * w + k] * pre_conv.get(src, c);
                }
            }
            conv.set(t, c, acc);
        }
    }
    let mut x = conv.clone();
    x.data.iter_mut().for_each(|v| *v = silu(*v));

    let a_log = store.value(bp.a_log);
    let (w_b, w_c) = (store.value(bp.w_b), store.value(bp.w_c));
    let (w_dd, w_du, b_dt) =
        (store.value(bp.w_dt_down), store.value(bp.w_dt_up), store.value(bp.b_dt));

    let ad = adapter.map(|a| {
        let cfg = &a.params.cfg;
        let v = store.value(a.params.v);
        let r = cfg.r;
        // V_A log|a_c| per channel, fixed for the sequence.
        let mut va = vec![0.0; d_e * r];
        for c in 0..d_e {
            for k in 0..r {
                va[c * r + k] = dot(&v[k * cfg.m..k * cfg.m + ns], &a_log[c * ns..(c + 1) * ns]);
            }
        }
        let mut u_masked = store.value(a.params.u).to_vec();
        for (j, keep) in cfg.modulate.entries(ns).into_iter().enumerate() {
            if !keep {
                u_masked[j * r..(j + 1) * r].iter_mut().for_each(|x| *x = 0.0);
            }
        }
        (a, va, u_masked, saa::project_order(a.e, store, a.params))
    });

    let a_base: Vec<f64> = a_log.iter().map(|l| -l.exp()).collect();
    let mut delta = ad.as_ref().map_or(Vec::new(), |(a, ..)| vec![0.0; a.params.cfg.m]);
    let mut steps = Vec::with_capacity(n);
    let mut h = Mat::zeros(n + 1, d_e * ns);
    let mut y = Mat::zeros(n, d_e);
    let mut hp = vec![0.0; ns];
    for t in 0..n {
        let xt = x.row(t);
        let mut b = vec![0.0; ns];
        let mut c = vec![0.0; ns];
        let mut dt_low = vec![0.0; dt_rank];
        matvec(w_b, ns, d_e, xt, &mut b);
        matvec(w_c, ns, d_e, xt, &mut c);
        matvec(w_dd, dt_rank, d_e, xt, &mut dt_low);
        let mut delta_pre = b_dt.to_vec();
        for (ch, dp) in delta_pre.iter_mut().enumerate() {
            *dp += dot(&w_du[ch * dt_rank..(ch + 1) * dt_rank], &dt_low);
        }
        let mut la = a_log.to_vec();
        let mut av = a_base.clone();
        let mut bt = b.repeat(d_e);
        let mut ct = c.repeat(d_e);
        let mut pt = delta_pre.clone();
        let mut ctrl = None;
        let mut u = Vec::new();
        let mut v_theta = Vec::new();
        if let Some((a, va, u_masked, pe)) = &ad {
            let cfg = &a.params.cfg;
            let (r, m) = (cfg.r, cfg.m);
            hp.iter_mut().for_each(|v| *v = 0.0);
            let hprev = h.row(t);
            for ch in 0..d_e {
                axpy(1.0, &hprev[ch * ns..(ch + 1) * ns], &mut hp);
            }
            hp.iter_mut().for_each(|v| *v /= d_e as f64);
            let st = saa::control_forward(zn.row(t), &hp, pe, store, a.params);
            u = if a.force_zero { vec![0.0; r] } else { st.u.clone() };
            ctrl = Some(st);
            let v = store.value(a.params.v);
            let mut vbc = vec![0.0; r];
            for k in 0..r {
                let vk = &v[k * m..(k + 1) * m];
                vbc[k] = dot(&vk[ns..2 * ns], &b) + dot(&vk[2 * ns..3 * ns], &c);
            }
            v_theta = vec![0.0; d_e * r];
            let live: Vec<usize> = (0..r).filter(|&k| u[k] != 0.0).collect();
            let nl = live.len();
            let mut uu = vec![0.0; m * nl];
            for j in 0..m {
                for (li, &k) in live.iter().enumerate() {
                    uu[j * nl + li] = u_masked[j * r + k] * u[k];
                }
            }
            let mut vl = vec![0.0; nl];
            for ch in 0..d_e {
                let vt = &mut v_theta[ch * r..(ch + 1) * r];
                for k in 0..r {
                    vt[k] = va[ch * r + k] + vbc[k] + v[k * m + 3 * ns] * delta_pre[ch];
                }
                if live.is_empty() {
                    continue;
                }
                for (li, &k) in live.iter().enumerate() {
                    vl[li] = vt[k];
                }
                for j in 0..m {
                    delta[j] = uu[j * nl..(j + 1) * nl].iter().zip(&vl).map(|(a, b)| a * b).sum();
                }
                if delta[..ns].iter().any(|v| *v != 0.0) {
                    axpy(1.0, &delta[..ns], &mut la[ch * ns..(ch + 1) * ns]);
                    for i in ch * ns..(ch + 1) * ns {
                        av[i] = -la[i].exp();
                    }
                }
                axpy(1.0, &delta[ns..2 * ns], &mut bt[ch * ns..(ch + 1) * ns]);
                axpy(1.0, &delta[2 * ns..3 * ns], &mut ct[ch * ns..(ch + 1) * ns]);
                pt[ch] += delta[3 * ns];
            }
        }
        let mut a_hat = vec![0.0; d_e * ns];
        let mut f = vec![0.0; d_e * ns];
        let (prev, cur) = h.data.split_at_mut((t + 1) * d_e * ns);
        let prev = &prev[t * d_e * ns..];
        let cur = &mut cur[..d_e * ns];
        for ch in 0..d_e {
            let dl = softplus(pt[ch]);
            let xc = xt[ch];
            let mut acc = 0.0;
            for i in ch * ns..(ch + 1) * ns {
                // Â = 1 + expm1(aΔ) shares the transcendental with f
                let xz = av[i] * dl;
                let em1 = xz.exp_m1();
                a_hat[i] = 1.0 + em1;
                f[i] = if xz.abs() < ZOH_LIMIT { dl * (1.0 + 0.5 * xz) } else { em1 / av[i] };
                cur[i] = a_hat[i] * prev[i] + f[i] * bt[i] * xc;
                acc += ct[i] * cur[i];
            }
            if !acc.is_finite() {
                return Err(numeric(label, t, "scan output"));
            }
            y.set(t, ch, acc);
        }
        steps.push(StepCache { b, c, dt_low, delta_pre, ctrl, u, v_theta, la, av, bt, ct, pt, a_hat, f });
    }
    let mut out = y.matmul_t(store.value(bp.w_out), d);
    let mut gate_pre = zin.matmul_t(store.value(bp.w_gate), d);
    let bg = store.value(bp.b_gate);
    for t in 0..n {
        for j in 0..d {
            let g = gate_pre.get(t, j) + bg[j];
            gate_pre.set(t, j, g);
            let o = out.get(t, j) + silu(g);
            out.set(t, j, o);
        }
    }
    if let Some(t) = (0..n).find(|&t| out.row(t).iter().any(|v| !v.is_finite())) {
        return Err(numeric(label, t, "block output"));
    }
    let (pe, force_zero) = match ad {
        Some((a, _, _, pe)) => (pe, a.force_zero),
        None => (Vec::new(), false),
    };
    let cache = BlockCache {
        zin: zin.clone(),
        ln,
        zn,
        pre_conv,
        conv,
        x,
        steps,
        h,
        y,
        gate_pre,
        pe,
        force_zero,
    };
    Ok((out, cache))
}

/// Backward pass of [`block_forward`]. Backbone weights are frozen and get no
/// gradient; adapter gradients are accumulated into `grads`. Returns
/// `dZ_in` and, with an adapter, the gradient w.r.t. the order-aware vector.
pub fn block_backward(
    dout: &Mat,
    cache: &BlockCache,
    store: &ParamStore,
    bp: &BackboneParams,
    adapter: Option<&AdapterParams>,
    e: Option<&[f64]>,
    grads: &mut Grads,
) -> (Mat, Option<Vec<f64>>) {
    let BlockDims { d, d_e, n_state: ns, conv_width: w, dt_rank } = bp.dims;
    let n = dout.rows;
    let mut dzin = Mat::zeros(n, d);
    let mut dgate = Mat::zeros(n, d);
    for t in 0..n {
        for j in 0..d {
            dgate.set(t, j, dout.get(t, j) * silu_grad(cache.gate_pre.get(t, j)));
        }
    }
    let w_gate = store.value(bp.w_gate);
    for t in 0..n {
        matvec_t_acc(w_gate, d, d, dgate.row(t), dzin.row_mut(t));
    }
    let dy = dout.matmul(store.value(bp.w_out), d_e);

    let (w_b, w_c) = (store.value(bp.w_b), store.value(bp.w_c));
    let (w_dd, w_du) = (store.value(bp.w_dt_down), store.value(bp.w_dt_up));
    let a_log = store.value(bp.a_log);
    let mut dx = Mat::zeros(n, d_e);
    let mut dzn = Mat::zeros(n, d);
    let mut carry = vec![0.0; d_e * ns];
    let mut next = vec![0.0; d_e * ns];
    let m = adapter.map_or(0, |a| a.cfg.m);
    let r = adapter.map_or(0, |a| a.cfg.r);
    let (mut md, mut theta, mut dth) = (vec![0.0; m], vec![0.0; m], vec![0.0; m]);
    let (mut wv, mut sv, mut gk) = (vec![0.0; r], vec![0.0; r], vec![0.0; r]);
    let mut dpe = adapter.map(|a| vec![0.0; a.cfg.d_phi]);
    let mut mask = Vec::new();
    let mut u_masked = Vec::new();
    if let Some(a) = adapter {
        mask = a.cfg.modulate.entries(ns);
        u_masked = store.value(a.u).to_vec();
        for (j, keep) in mask.iter().enumerate() {
            if !keep {
                u_masked[j * a.cfg.r..(j + 1) * a.cfg.r].iter_mut().for_each(|x| *x = 0.0);
            }
        }
    }
    for t in (0..n).rev() {
        let st = &cache.steps[t];
        let hprev = cache.h.row(t);
        let hcur = cache.h.row(t + 1);
        let xt = cache.x.row(t);
        let mut db = vec![0.0; ns];
        let mut dc = vec![0.0; ns];
        let mut dp = vec![0.0; d_e];
        let mut du = adapter.map(|a| vec![0.0; a.cfg.r]);
        let mut dtheta = vec![0.0; 3 * ns + 1];
        for ch in 0..d_e {
            let dyc = dy.get(t, ch);
            let dl = softplus(st.pt[ch]);
            let mut dxc = 0.0;
            let mut ddelta = 0.0;
            for i in 0..ns {
                let k = ch * ns + i;
                let dh = carry[k] + st.ct[k] * dyc;
                dtheta[2 * ns + i] = dyc * hcur[k];
                let b_hat = st.f[k] * st.bt[k];
                dxc += dh * b_hat;
                let da_hat = dh * hprev[k];
                let db_hat = dh * xt[ch];
                next[k] = st.a_hat[k] * dh;
                dtheta[ns + i] = db_hat * st.f[k];
                let df = db_hat * st.bt[k];
                let av = st.av[k];
                let xz = av * dl;
                let (dfa, dfd) = if xz.abs() < ZOH_LIMIT {
                    (0.5 * dl * dl, 1.0 + xz)
                } else {
                    (dl * dl * zoh_slope_from(xz, st.a_hat[k], st.f[k] * av), st.a_hat[k])
                };
                let da = da_hat * st.a_hat[k] * dl + df * dfa;
                ddelta += da_hat * st.a_hat[k] * av + df * dfd;
                dtheta[i] = da * av;
            }
            dtheta[3 * ns] = ddelta * sigmoid(st.pt[ch]);
            dx.data[t * d_e + ch] += dxc;
            if let (Some(a), Some(du)) = (adapter, du.as_mut()) {
                let vt = &st.v_theta[ch * r..(ch + 1) * r];
                for ((o, g), &k) in md.iter_mut().zip(&dtheta).zip(&mask) {
                    *o = if k { *g } else { 0.0 };
                }
                wv.fill(0.0);
                matvec_t_acc(&u_masked, m, r, &md, &mut wv);
                let live = st.u.iter().any(|&v| v != 0.0);
                for k in 0..r {
                    du[k] += wv[k] * vt[k];
                }
                if live {
                    for k in 0..r {
                        sv[k] = st.u[k] * vt[k];
                        gk[k] = st.u[k] * wv[k];
                    }
                    if let Some(g) = grads.get_mut(a.u) {
                        outer_acc(g, &md, &sv);
                    }
                    theta[..ns].copy_from_slice(&a_log[ch * ns..(ch + 1) * ns]);
                    theta[ns..2 * ns].copy_from_slice(&st.b);
                    theta[2 * ns..3 * ns].copy_from_slice(&st.c);
                    theta[3 * ns] = st.delta_pre[ch];
                    if let Some(g) = grads.get_mut(a.v) {
                        outer_acc(g, &gk, &theta);
                    }
                    dth.fill(0.0);
                    matvec_t_acc(store.value(a.v), r, m, &gk, &mut dth);
                    for i in 0..ns {
                        dtheta[ns + i] += dth[ns + i];
                        dtheta[2 * ns + i] += dth[2 * ns + i];
                    }
                    dtheta[3 * ns] += dth[3 * ns];
                }
            }
            axpy(1.0, &dtheta[ns..2 * ns], &mut db);
            axpy(1.0, &dtheta[2 * ns..3 * ns], &mut dc);
            dp[ch] = dtheta[3 * ns];
        }
        std::mem::swap(&mut carry, &mut next);
        if let (Some(a), Some(du), Some(ctrl)) = (adapter, du, st.ctrl.as_ref()) {
            if !cache.force_zero {
                let (dzn_t, dhp, dpe_t) =
                    saa::control_backward(&du, ctrl, cache.zn.row(t), &cache.pe, store, a, grads);
                axpy(1.0, &dzn_t, dzn.row_mut(t));
                if let Some(acc) = dpe.as_mut() {
                    axpy(1.0, &dpe_t, acc);
                }
                let s = 1.0 / d_e as f64;
                for ch in 0..d_e {
                    axpy(s, &dhp, &mut carry[ch * ns..(ch + 1) * ns]);
                }
            }
        }
        let dxt = dx.row_mut(t);
        matvec_t_acc(w_b, ns, d_e, &db, dxt);
        matvec_t_acc(w_c, ns, d_e, &dc, dxt);
        let mut dlow = vec![0.0; dt_rank];
        matvec_t_acc(w_du, d_e, dt_rank, &dp, &mut dlow);
        matvec_t_acc(w_dd, dt_rank, d_e, &dlow, dxt);
    }
    let cw = store.value(bp.conv_w);
    let mut dpre = Mat::zeros(n, d_e);
    for t in 0..n {
        for c in 0..d_e {
            let g = dx.get(t, c) * silu_grad(cache.conv.get(t, c));
            for k in 0..w {
                if let Some(src) = (t + k + 1).checked_sub(w) {
                    dpre.data[src * d_e + c] += g * cw[c * w + k];
                }
            }
        }
    }
    let w_in = store.value(bp.w_in);
    for t in 0..n {
        matvec_t_acc(w_in, d_e, d, dpre.row(t), dzn.row_mut(t));
    }
    let dln = layer_norm_backward(&dzn, &cache.ln, Some(store.value(bp.ln_scale)));
    axpy(1.0, &dln.data, &mut dzin.data);

    let de = match (adapter, dpe, e) {
        (Some(a), Some(dpe), Some(e)) => {
            if let Some(g) = grads.get_mut(a.w_e) {
                outer_acc(g, &dpe, e);
            }
            let mut de = vec![0.0; a.cfg.d];
            matvec_t_acc(store.value(a.w_e), a.cfg.d_phi, a.cfg.d, &dpe, &mut de);
            Some(de)
        }
        _ => None,
    };
    (dzin, de)
}

impl BlockCache {
    /// Frozen and controlled operators of every step, as seen by the scan.
    pub fn bundles(&self, store: &ParamStore, bp: &BackboneParams) -> Vec<OperatorBundle> {
        let d_e = bp.dims.d_e;
        let a_log = store.value(bp.a_log);
        self.steps
            .iter()
            .map(|st| {
                let frozen = ContinuousOps::broadcast(a_log, &st.b, &st.c, &st.delta_pre);
                let controlled = ContinuousOps {
                    channels: d_e,
                    state: bp.dims.n_state,
                    log_a: st.la.clone(),
                    b: st.bt.clone(),
                    c: st.ct.clone(),
                    delta_pre: st.pt.clone(),
                };
                OperatorBundle {
                    frozen_discrete: discretize(&frozen),
                    discrete: discretize(&controlled),
                    frozen,
                    controlled,
                    control: st.u.clone(),
                }
            })
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn zoh_closed_form() {
        let (a, b) = zoh_discretize(&[-1.0], &[1.0], 2f64.ln()).unwrap();
        assert!((a[0] - 0.5).abs() < 1e-12);
        assert!((b[0] - 0.5).abs() < 1e-12);
        let (_, b) = zoh_discretize(&[1e-12], &[2.0], 0.3).unwrap();
        assert!((b[0] - 0.6).abs() < 1e-9);
        assert!(zoh_discretize(&[-1.0], &[1.0], 0.0).is_err());
    }

    #[test]
    fn zoh_slope_series_matches_closed_form_at_switch() {
        let x: f64 = 1e-3;
        let series = 0.5 + x * (1.0 / 3.0 + x * (1.0 / 8.0 + x / 30.0));
        let exact = (x * x.exp() - x.exp_m1()) / (x * x);
        assert!((series - exact).abs() < 1e-11);
    }

    #[test]
    fn single_step_scan() {
        let x = Mat::from_vec(1, 1, vec![3.0]);
        let op = DiscreteOps { channels: 1, state: 2, a_hat: vec![0.5, 0.2], b_hat: vec![1.0, -2.0], c: vec![0.5, 1.0] };
        let (y, _) = selective_scan(&x, &[op]).unwrap();
        assert!((y.get(0, 0) - (0.5 * 3.0 + 1.0 * -6.0)).abs() < 1e-15);
    }

    #[test]
    fn zero_input_zero_bias_gives_zero_output() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut store = ParamStore::new();
        let bp = BackboneParams::init(&mut store, "b0", BlockDims::new(8, 2, 4, 4), &mut rng);
        store.value_mut(bp.conv_b).iter_mut().for_each(|v| *v = 0.0);
        store.value_mut(bp.b_gate).iter_mut().for_each(|v| *v = 0.0);
        let (out, _) = block_forward(&Mat::zeros(5, 8), &store, &bp, None, "b0").unwrap();
        assert!(out.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn layer_norm_backward_matches_finite_difference() {
        let z = Mat::from_vec(1, 4, vec![0.3, -1.0, 2.0, 0.5]);
        let scale = [1.5, 0.5, -1.0, 2.0];
        let shift = [0.0; 4];
        let gout = Mat::from_vec(1, 4, vec![1.0, -2.0, 0.5, 3.0]);
        let (_, cache) = layer_norm(&z, Some((&scale, &shift)));
        let dz = layer_norm_backward(&gout, &cache, Some(&scale));
        for j in 0..4 {
            let f = |s: f64| {
                let mut zz = z.clone();
                zz.data[j] += s;
                let (o, _) = layer_norm(&zz, Some((&scale, &shift)));
                dot(&o.data, &gout.data)
            };
            let fd = (f(1e-6) - f(-1e-6)) / 2e-6;
            assert!((fd - dz.data[j]).abs() < 1e-7, "{j}: {fd} vs {}", dz.data[j]);
        }
    }
}

//! Patch encoder, order-aware global descriptor and cross-branch fusion.

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::geometry::PatchSet;
use crate::params::{Grads, ParamId, ParamStore};
use crate::tensor::{matvec, outer_acc, Mat};

/// Serialization branch.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Branch {
    First,
    Second,
}

impl Branch {
    pub const BOTH: [Branch; 2] = [Branch::First, Branch::Second];

    pub fn index(self) -> usize {
        match self {
            Branch::First => 0,
            Branch::Second => 1,
        }
    }

    pub fn other(self) -> Branch {
        match self {
            Branch::First => Branch::Second,
            Branch::Second => Branch::First,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `n × d`, one row per serialized step.
    pub tokens: Mat,
    pub branch: Branch,
}

impl TokenSequence {
    pub fn len(&self) -> usize {
        self.tokens.rows
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.rows == 0
    }

    pub fn dim(&self) -> usize {
        self.tokens.cols
    }
}

/// Frozen point encoder plus the trainable order-conditioning weights.
#[derive(Clone, Debug)]
pub struct TokenizerParams {
    pub d: usize,
    pub d_mid: usize,
    pub d_o: usize,
    pub enc_w1: ParamId,
    pub enc_b1: ParamId,
    pub enc_w2: ParamId,
    pub enc_b2: ParamId,
    /// Bias-free `d × d` map applied to tokens before modulation.
    pub g_w: ParamId,
    pub phi_w: ParamId,
    pub phi_b: ParamId,
    pub order_emb: [ParamId; 2],
}

impl TokenizerParams {
    pub fn init<R: Rng>(store: &mut ParamStore, d: usize, d_o: usize, rng: &mut R) -> Self {
        let d_mid = (d / 2).max(1);
        TokenizerParams {
            d,
            d_mid,
            d_o,
            enc_w1: store.uniform("tok.enc.w1", &[d_mid, 3], 1.0, false, rng),
            enc_b1: store.uniform("tok.enc.b1", &[d_mid], 0.5, false, rng),
            enc_w2: store.linear("tok.enc.w2", d, d_mid, false, rng),
            enc_b2: store.zeros("tok.enc.b2", &[d], false),
            g_w: store.linear("tok.g.w", d, d, true, rng),
            phi_w: store.linear("tok.phi.w", d, d_o, true, rng),
            phi_b: store.zeros("tok.phi.b", &[d], true),
            order_emb: [
                store.uniform("tok.order.1", &[d_o], 0.1, true, rng),
                store.uniform("tok.order.2", &[d_o], 0.1, true, rng),
            ],
        }
    }
}

/// Two pointwise layers with a ReLU in between, max-pooled over each patch.
/// Rows follow `patches` order.
pub fn encode_patches(patches: &PatchSet, store: &ParamStore, p: &TokenizerParams) -> Result<Mat> {
    let (w1, b1, w2, b2) =
        (store.value(p.enc_w1), store.value(p.enc_b1), store.value(p.enc_w2), store.value(p.enc_b2));
    if w1.len() != p.d_mid * 3 || w2.len() != p.d * p.d_mid || b2.len() != p.d {
        return Err(MantisError::Config("point encoder weights do not match d / d_mid".into()));
    }
    let mut out = Mat::zeros(patches.len(), p.d);
    let mut hidden = vec![0.0; p.d_mid];
    let mut feat = vec![0.0; p.d];
    for (i, patch) in patches.neighborhoods.iter().enumerate() {
        let row = out.row_mut(i);
        row.fill(f64::NEG_INFINITY);
        for pt in patch {
            matvec(w1, p.d_mid, 3, pt, &mut hidden);
            for (h, b) in hidden.iter_mut().zip(b1) {
                *h = (*h + b).max(0.0);
            }
            matvec(w2, p.d, p.d_mid, &hidden, &mut feat);
            for ((r, f), b) in row.iter_mut().zip(&feat).zip(b2) {
                *r = r.max(f + b);
            }
        }
    }
    Ok(out)
}

/// Intermediate values of the order-aware pooling, kept for backprop.
#[derive(Clone, Debug)]
pub struct OrderAwareCache {
    pub e: Vec<f64>,
    /// Winning token per channel.
    pub argmax: Vec<usize>,
    pub ge: Mat,
    pub phi: Vec<f64>,
}

/// `e = MaxPool_n(E + G(E) ⊙ φ(o))`, pooled over the token axis.
pub fn order_aware_global(
    tokens: &Mat,
    order: &[f64],
    store: &ParamStore,
    p: &TokenizerParams,
) -> OrderAwareCache {
    let d = p.d;
    let mut phi = vec![0.0; d];
    matvec(store.value(p.phi_w), d, p.d_o, order, &mut phi);
    for (v, b) in phi.iter_mut().zip(store.value(p.phi_b)) {
        *v += b;
    }
    let ge = tokens.matmul_t(store.value(p.g_w), d);
    let mut e = vec![f64::NEG_INFINITY; d];
    let mut argmax = vec![0; d];
    for t in 0..tokens.rows {
        let (row, grow) = (tokens.row(t), ge.row(t));
        for j in 0..d {
            let v = row[j] + grow[j] * phi[j];
            if v > e[j] {
                e[j] = v;
                argmax[j] = t;
            }
        }
    }
    OrderAwareCache { e, argmax, ge, phi }
}

/// Accumulates gradients of the order-aware pooling given `de`.
pub fn order_aware_backward(
    de: &[f64],
    tokens: &Mat,
    order: &[f64],
    branch: Branch,
    cache: &OrderAwareCache,
    store: &ParamStore,
    p: &TokenizerParams,
    grads: &mut Grads,
) {
    let d = p.d;
    let mut dphi = vec![0.0; d];
    if let Some(gw) = grads.get_mut(p.g_w) {
        for j in 0..d {
            let t = cache.argmax[j];
            let g = de[j] * cache.phi[j];
            if g != 0.0 {
                crate::tensor::axpy(g, tokens.row(t), &mut gw[j * d..(j + 1) * d]);
            }
        }
    }
    for j in 0..d {
        dphi[j] = de[j] * cache.ge.get(cache.argmax[j], j);
    }
    if let Some(g) = grads.get_mut(p.phi_w) {
        outer_acc(g, &dphi, order);
    }
    if let Some(g) = grads.get_mut(p.phi_b) {
        g.iter_mut().zip(&dphi).for_each(|(a, b)| *a += b);
    }
    let emb = p.order_emb[branch.index()];
    if grads.wants(emb) {
        let mut demb = vec![0.0; p.d_o];
        crate::tensor::matvec_t_acc(store.value(p.phi_w), d, p.d_o, &dphi, &mut demb);
        if let Some(g) = grads.get_mut(emb) {
            g.iter_mut().zip(&demb).for_each(|(a, b)| *a += b);
        }
    }
}

/// Rows of `tokens` (in `from` order) re-permuted into `to` order through the
/// shared patch indices.
pub fn align(tokens: &Mat, from_order: &[usize], to_order: &[usize]) -> Result<Mat> {
    let n = tokens.rows;
    if from_order.len() != n || to_order.len() != n {
        return Err(MantisError::Internal("alignment length mismatch".into()));
    }
    let mut pos = vec![usize::MAX; n];
    for (t, &p) in from_order.iter().enumerate() {
        if p >= n || pos[p] != usize::MAX {
            return Err(MantisError::Internal("serialization is not a permutation".into()));
        }
        pos[p] = t;
    }
    let mut out = Mat::zeros(n, tokens.cols);
    for (t, &p) in to_order.iter().enumerate() {
        if p >= n || pos[p] == usize::MAX {
            return Err(MantisError::Internal("branches cover different patch sets".into()));
        }
        out.row_mut(t).copy_from_slice(tokens.row(pos[p]));
    }
    Ok(out)
}

/// `Z0⁽ᵏ⁾ = E⁽ᵏ⁾ + γ ⊙ align(E⁽ᵒᵗʰᵉʳ⁾)`. Returns the two fused sequences and the
/// aligned partner tokens needed for the gate gradient.
pub fn fuse_branches(
    e1: &Mat,
    e2: &Mat,
    order1: &[usize],
    order2: &[usize],
    gamma: &[f64],
) -> Result<([Mat; 2], [Mat; 2])> {
    if e1.rows != e2.rows || e1.cols != e2.cols || gamma.len() != e1.cols {
        return Err(MantisError::Internal("fusion shape mismatch".into()));
    }
    let a1 = align(e2, order2, order1)?;
    let a2 = align(e1, order1, order2)?;
    let mix = |base: &Mat, partner: &Mat| {
        let mut z = base.clone();
        for t in 0..z.rows {
            for ((v, g), o) in z.row_mut(t).iter_mut().zip(gamma).zip(partner.row(t)) {
                *v += g * o;
            }
        }
        z
    };
    Ok(([mix(e1, &a1), mix(e2, &a2)], [a1, a2]))
}

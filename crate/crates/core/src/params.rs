//! Named parameter tensors with trainable flags, and per-step gradient buffers.

use std::collections::HashMap;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};

/// Handle into a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub shape: Vec<usize>,
    pub value: Vec<f64>,
    pub trainable: bool,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        value: Vec<f64>,
        trainable: bool,
    ) -> ParamId {
        let name = name.into();
        let numel: usize = shape.iter().product();
        assert_eq!(numel, value.len(), "parameter `{name}` has wrong length");
        assert!(!self.by_name.contains_key(&name), "duplicate parameter `{name}`");
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, shape: shape.to_vec(), value, trainable });
        ParamId(id)
    }

    pub fn zeros(&mut self, name: impl Into<String>, shape: &[usize], trainable: bool) -> ParamId {
        let numel = shape.iter().product();
        self.add(name, shape, vec![0.0; numel], trainable)
    }

    /// Uniform in `[-bound, bound]`.
    pub fn uniform<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: &[usize],
        bound: f64,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let numel: usize = shape.iter().product();
        let value = (0..numel).map(|_| rng.random_range(-bound..=bound)).collect();
        self.add(name, shape, value, trainable)
    }

    /// Fan-in scaled uniform init for a `rows × cols` matrix.
    pub fn linear<R: Rng>(
        &mut self,
        name: impl Into<String>,
        rows: usize,
        cols: usize,
        trainable: bool,
        rng: &mut R,
    ) -> ParamId {
        let bound = (1.0 / cols.max(1) as f64).sqrt();
        self.uniform(name, &[rows, cols], bound, trainable, rng)
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &[f64] {
        &self.params[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied().map(ParamId)
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn trainable_ids(&self) -> Vec<ParamId> {
        self.iter().filter(|(_, p)| p.trainable).map(|(id, _)| id).collect()
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| p.trainable).map(|p| p.value.len()).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Replace every value from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<()> {
        if other.params.len() != self.params.len() {
            return Err(MantisError::Format(format!(
                "parameter count mismatch: {} vs {}",
                other.params.len(),
                self.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.shape != src.shape {
                return Err(MantisError::Format(format!(
                    "layout mismatch at `{}` ({:?}) vs `{}` ({:?})",
                    dst.name, dst.shape, src.name, src.shape
                )));
            }
            dst.value.clone_from(&src.value);
            dst.trainable = src.trainable;
        }
        Ok(())
    }
}

/// Gradient accumulators, allocated only for trainable tensors.
#[derive(Clone, Debug, PartialEq)]
pub struct Grads {
    bufs: Vec<Option<Vec<f64>>>,
}

impl Grads {
    pub fn new(store: &ParamStore) -> Self {
        let bufs = store
            .params
            .iter()
            .map(|p| p.trainable.then(|| vec![0.0; p.value.len()]))
            .collect();
        Grads { bufs }
    }

    /// Mutable accumulator, or `None` for frozen tensors.
    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> Option<&mut [f64]> {
        self.bufs[id.0].as_deref_mut()
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.bufs[id.0].as_deref()
    }

    #[inline]
    pub fn wants(&self, id: ParamId) -> bool {
        self.bufs[id.0].is_some()
    }

    pub fn add_assign(&mut self, other: &Grads) {
        for (a, b) in self.bufs.iter_mut().zip(&other.bufs) {
            if let (Some(a), Some(b)) = (a, b) {
                a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
            }
        }
    }

    pub fn scale(&mut self, s: f64) {
        for b in self.bufs.iter_mut().flatten() {
            b.iter_mut().for_each(|v| *v *= s);
        }
    }

    /// First non-finite entry, reported by parameter name.
    pub fn check_finite(&self, store: &ParamStore) -> Result<()> {
        for (i, b) in self.bufs.iter().enumerate() {
            if let Some(b) = b {
                if let Some(pos) = b.iter().position(|v| !v.is_finite()) {
                    return Err(MantisError::Numeric {
                        location: format!("gradient of `{}`", store.params[i].name),
                        detail: format!("entry {pos} is {}", b[pos]),
                    });
                }
            }
        }
        Ok(())
    }
}

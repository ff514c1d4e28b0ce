//! Binary checkpoints: magic, version, JSON header, then raw little-endian
//! `f64` payload (tensor values, then Adam moments of trainable tensors).

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::params::ParamStore;
use crate::train::{OptimConfig, OptimState, Trainer};

pub const MAGIC: &[u8; 8] = b"MANTISCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TensorHeader {
    pub name: String,
    pub shape: Vec<usize>,
    pub frozen: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OptimHeader {
    pub cfg: OptimConfig,
    pub step: u64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Header {
    pub tensors: Vec<TensorHeader>,
    pub optim: Option<OptimHeader>,
    /// Completed epochs.
    pub epoch: usize,
    #[serde(default)]
    pub meta: serde_json::Value,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub store: ParamStore,
    pub optim: Option<OptimState>,
    pub epoch: usize,
    pub meta: serde_json::Value,
}

pub fn encode(store: &ParamStore, optim: Option<&OptimState>, epoch: usize, meta: serde_json::Value) -> Result<Vec<u8>> {
    let header = Header {
        tensors: store
            .iter()
            .map(|(_, p)| TensorHeader { name: p.name.clone(), shape: p.shape.clone(), frozen: !p.trainable })
            .collect(),
        optim: optim.map(|o| OptimHeader { cfg: o.cfg, step: o.step }),
        epoch,
        meta,
    };
    let json = serde_json::to_vec(&header).map_err(|e| MantisError::Format(e.to_string()))?;
    let mut out = Vec::with_capacity(20 + json.len() + 8 * store.total_count());
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(json.len() as u64).to_le_bytes());
    out.extend_from_slice(&json);
    let mut put = |v: &[f64]| v.iter().for_each(|x| out.extend_from_slice(&x.to_le_bytes()));
    for (_, p) in store.iter() {
        put(&p.value);
    }
    if let Some(o) = optim {
        for (id, p) in store.iter() {
            if p.trainable {
                if o.m[id.0].len() != p.value.len() || o.v[id.0].len() != p.value.len() {
                    return Err(MantisError::Internal(format!("optimizer moments for `{}` have the wrong size", p.name)));
                }
                put(&o.m[id.0]);
                put(&o.v[id.0]);
            }
        }
    }
    Ok(out)
}

pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
    let fmt = |m: &str| MantisError::Format(m.to_string());
    if bytes.len() < 20 || &bytes[..8] != MAGIC {
        return Err(fmt("not a checkpoint (bad magic)"));
    }
    let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    if version != VERSION {
        return Err(MantisError::Format(format!("unsupported checkpoint version {version}")));
    }
    let hlen = u64::from_le_bytes(bytes[12..20].try_into().unwrap()) as usize;
    let body = bytes.get(20..).ok_or_else(|| fmt("truncated header"))?;
    let json = body.get(..hlen).ok_or_else(|| fmt("truncated header"))?;
    let header: Header = serde_json::from_slice(json).map_err(|e| MantisError::Format(e.to_string()))?;
    let mut payload = body[hlen..].chunks_exact(8);
    if !payload.remainder().is_empty() {
        return Err(fmt("payload is not a whole number of f64 values"));
    }
    let mut take = |n: usize| -> Result<Vec<f64>> {
        (0..n)
            .map(|_| payload.next().map(|b| f64::from_le_bytes(b.try_into().unwrap())))
            .collect::<Option<Vec<_>>>()
            .ok_or_else(|| fmt("truncated payload"))
    };
    let mut store = ParamStore::new();
    for t in &header.tensors {
        let v = take(t.shape.iter().product())?;
        store.add(t.name.clone(), &t.shape, v, !t.frozen);
    }
    let optim = match &header.optim {
        Some(h) => {
            let mut o = OptimState::new(&store, h.cfg);
            o.step = h.step;
            for (id, p) in store.iter() {
                if p.trainable {
                    o.m[id.0] = take(p.value.len())?;
                    o.v[id.0] = take(p.value.len())?;
                }
            }
            Some(o)
        }
        None => None,
    };
    if take(1).is_ok() {
        return Err(fmt("trailing bytes after payload"));
    }
    Ok(Checkpoint { store, optim, epoch: header.epoch, meta: header.meta })
}

pub fn save(path: &Path, store: &ParamStore, optim: Option<&OptimState>, epoch: usize, meta: serde_json::Value) -> Result<()> {
    let bytes = encode(store, optim, epoch, meta)?;
    let mut f = fs::File::create(path)?;
    f.write_all(&bytes)?;
    f.sync_all()?;
    Ok(())
}

pub fn load(path: &Path) -> Result<Checkpoint> {
    decode(&fs::read(path)?)
}

pub fn save_trainer(path: &Path, t: &Trainer, meta: serde_json::Value) -> Result<()> {
    save(path, &t.store, Some(&t.opt), t.epoch, meta)
}

/// Restore parameters, optimizer moments and epoch counter. The trainer's
/// model must have been built with the same layout.
pub fn restore_trainer(t: &mut Trainer, ck: &Checkpoint) -> Result<()> {
    t.store.load_values(&ck.store)?;
    match &ck.optim {
        Some(o) => t.opt = o.clone(),
        None => return Err(MantisError::Format("checkpoint has no optimizer state".into())),
    }
    t.epoch = ck.epoch;
    Ok(())
}

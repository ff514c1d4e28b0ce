//! Space-filling-curve codes for quantized 3D points and the curve orderings
//! used to turn an unordered key-point set into a sequence.

use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::geometry::{KeyPoints, PatchSet, Point3};

pub const DEFAULT_BITS: u32 = 10;
pub const MAX_BITS: u32 = 21;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum CurveKind {
    Hilbert,
    /// Hilbert on axis-permuted coordinates `(x, y, z) -> (z, x, y)`.
    TransHilbert,
    ZOrder,
    TransZOrder,
    Random(u64),
}

impl CurveKind {
    /// The permuted point fed to the base curve.
    #[inline]
    fn arrange(self, p: [u32; 3]) -> [u32; 3] {
        match self {
            CurveKind::TransHilbert | CurveKind::TransZOrder => [p[2], p[0], p[1]],
            _ => p,
        }
    }

    pub fn code(self, p: [u32; 3], bits: u32) -> Result<u64> {
        check_cell(p, bits)?;
        let q = self.arrange(p);
        Ok(match self {
            CurveKind::Hilbert | CurveKind::TransHilbert => hilbert_encode_unchecked(q, bits),
            CurveKind::ZOrder | CurveKind::TransZOrder => morton_encode_unchecked(q),
            CurveKind::Random(_) => 0,
        })
    }
}

impl fmt::Display for CurveKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CurveKind::Hilbert => f.write_str("hilbert"),
            CurveKind::TransHilbert => f.write_str("trans-hilbert"),
            CurveKind::ZOrder => f.write_str("z"),
            CurveKind::TransZOrder => f.write_str("trans-z"),
            CurveKind::Random(s) => write!(f, "random:{s}"),
        }
    }
}

impl FromStr for CurveKind {
    type Err = MantisError;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "hilbert" => Ok(CurveKind::Hilbert),
            "trans-hilbert" => Ok(CurveKind::TransHilbert),
            "z" => Ok(CurveKind::ZOrder),
            "trans-z" => Ok(CurveKind::TransZOrder),
            other => match other.strip_prefix("random:") {
                Some(seed) => seed
                    .parse()
                    .map(CurveKind::Random)
                    .map_err(|_| MantisError::Config(format!("bad random seed in `{other}`"))),
                None => Err(MantisError::Config(format!("unknown curve `{other}`"))),
            },
        }
    }
}

impl TryFrom<String> for CurveKind {
    type Error = MantisError;
    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<CurveKind> for String {
    fn from(c: CurveKind) -> String {
        c.to_string()
    }
}

fn check_bits(bits: u32) -> Result<()> {
    if bits == 0 || bits > MAX_BITS {
        return Err(MantisError::Argument(format!("bits must be in 1..={MAX_BITS}, got {bits}")));
    }
    Ok(())
}

fn check_cell(p: [u32; 3], bits: u32) -> Result<()> {
    check_bits(bits)?;
    let side = 1u64 << bits;
    if p.iter().any(|&c| c as u64 >= side) {
        return Err(MantisError::Argument(format!("cell {p:?} outside the {bits}-bit grid")));
    }
    Ok(())
}

/// Hilbert index of a cell on the `2^bits` grid. `(0,0,0)` maps to 0 and the
/// first axis is the most significant in each 3-bit digit.
pub fn hilbert_code_3d(p: [u32; 3], bits: u32) -> Result<u64> {
    check_cell(p, bits)?;
    Ok(hilbert_encode_unchecked(p, bits))
}

pub fn hilbert_decode_3d(code: u64, bits: u32) -> Result<[u32; 3]> {
    check_bits(bits)?;
    if code >> (3 * bits) != 0 {
        return Err(MantisError::Argument(format!("code {code} outside the {bits}-bit curve")));
    }
    // De-interleave into the transposed form, then undo the Gray/rotation steps.
    let mut x = [0u32; 3];
    for level in (0..bits).rev() {
        for (i, xi) in x.iter_mut().enumerate() {
            let bit = (code >> (3 * level + (2 - i as u32))) & 1;
            *xi |= (bit as u32) << level;
        }
    }
    let side = 2u32 << (bits - 1);
    let t = x[2] >> 1;
    for i in (1..3).rev() {
        x[i] ^= x[i - 1];
    }
    x[0] ^= t;
    let mut q = 2u32;
    while q != side {
        let p = q - 1;
        for i in (0..3).rev() {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q <<= 1;
    }
    Ok(x)
}

fn hilbert_encode_unchecked(p: [u32; 3], bits: u32) -> u64 {
    let mut x = p;
    let m = 1u32 << (bits - 1);
    let mut q = m;
    while q > 1 {
        let p = q - 1;
        for i in 0..3 {
            if x[i] & q != 0 {
                x[0] ^= p;
            } else {
                let t = (x[0] ^ x[i]) & p;
                x[0] ^= t;
                x[i] ^= t;
            }
        }
        q >>= 1;
    }
    for i in 1..3 {
        x[i] ^= x[i - 1];
    }
    let mut t = 0u32;
    q = m;
    while q > 1 {
        if x[2] & q != 0 {
            t ^= q - 1;
        }
        q >>= 1;
    }
    for xi in &mut x {
        *xi ^= t;
    }
    let mut code = 0u64;
    for level in (0..bits).rev() {
        for xi in &x {
            code = (code << 1) | ((xi >> level) & 1) as u64;
        }
    }
    code
}

#[inline]
fn spread3(v: u32) -> u64 {
    let mut x = v as u64 & 0x1f_ffff;
    x = (x | (x << 32)) & 0x001f_0000_0000_ffff;
    x = (x | (x << 16)) & 0x001f_0000_ff00_00ff;
    x = (x | (x << 8)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x << 4)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x << 2)) & 0x1249_2492_4924_9249;
    x
}

#[inline]
fn compact3(v: u64) -> u32 {
    let mut x = v & 0x1249_2492_4924_9249;
    x = (x | (x >> 2)) & 0x10c3_0c30_c30c_30c3;
    x = (x | (x >> 4)) & 0x100f_00f0_0f00_f00f;
    x = (x | (x >> 8)) & 0x001f_0000_ff00_00ff;
    x = (x | (x >> 16)) & 0x001f_0000_0000_ffff;
    x = (x | (x >> 32)) & 0x1f_ffff;
    x as u32
}

fn morton_encode_unchecked(p: [u32; 3]) -> u64 {
    (spread3(p[0]) << 2) | (spread3(p[1]) << 1) | spread3(p[2])
}

/// Z-order (Morton) index; same digit convention as [`hilbert_code_3d`].
pub fn morton_code_3d(p: [u32; 3], bits: u32) -> Result<u64> {
    check_cell(p, bits)?;
    Ok(morton_encode_unchecked(p))
}

pub fn morton_decode_3d(code: u64, bits: u32) -> Result<[u32; 3]> {
    check_bits(bits)?;
    if code >> (3 * bits) != 0 {
        return Err(MantisError::Argument(format!("code {code} outside the {bits}-bit curve")));
    }
    Ok([compact3(code >> 2), compact3(code >> 1), compact3(code)])
}

/// Map a coordinate in `[-1, 1]` to its grid cell.
pub fn quantize(p: &Point3, bits: u32) -> Result<[u32; 3]> {
    check_bits(bits)?;
    let top = ((1u64 << bits) - 1) as f64;
    let mut cell = [0u32; 3];
    for k in 0..3 {
        let c = p[k];
        if !(-1.0 - 1e-9..=1.0 + 1e-9).contains(&c) {
            return Err(MantisError::Validation(format!(
                "coordinate {c} outside [-1, 1]; normalize the cloud first"
            )));
        }
        let q = ((c + 1.0) / 2.0 * top + 0.5).floor();
        cell[k] = q.clamp(0.0, top) as u32;
    }
    Ok(cell)
}

/// A curve ordering of key points: `order[t]` is the patch index visited at
/// step `t`, `codes[t]` its curve code.
#[derive(Clone, Debug, PartialEq)]
pub struct Serialization {
    pub curve: CurveKind,
    pub order: Vec<usize>,
    pub codes: Vec<u64>,
}

impl Serialization {
    /// `position[p]` is the step at which patch `p` is visited.
    pub fn positions(&self) -> Vec<usize> {
        let mut pos = vec![0; self.order.len()];
        for (t, &p) in self.order.iter().enumerate() {
            pos[p] = t;
        }
        pos
    }
}

pub fn serialize_keypoints(centers: &KeyPoints, curve: CurveKind, bits: u32) -> Result<Serialization> {
    let n = centers.len();
    if let CurveKind::Random(seed) = curve {
        check_bits(bits)?;
        let mut order: Vec<usize> = (0..n).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
        return Ok(Serialization { curve, order, codes: (0..n as u64).collect() });
    }
    let mut keyed = Vec::with_capacity(n);
    for (i, c) in centers.coords.iter().enumerate() {
        keyed.push((curve.code(quantize(c, bits)?, bits)?, i));
    }
    keyed.sort_unstable();
    Ok(Serialization {
        curve,
        order: keyed.iter().map(|&(_, i)| i).collect(),
        codes: keyed.iter().map(|&(c, _)| c).collect(),
    })
}

/// Patches reordered along one curve.
#[derive(Clone, Debug, PartialEq)]
pub struct SerializedPatchSet {
    pub serialization: Serialization,
    pub patches: PatchSet,
}

pub fn serialize_patches(patches: &PatchSet, curve: CurveKind, bits: u32) -> Result<SerializedPatchSet> {
    let serialization = serialize_keypoints(&patches.centers, curve, bits)?;
    let o = &serialization.order;
    let reordered = PatchSet {
        centers: KeyPoints {
            indices: o.iter().map(|&i| patches.centers.indices[i]).collect(),
            coords: o.iter().map(|&i| patches.centers.coords[i]).collect(),
        },
        neighbor_indices: o.iter().map(|&i| patches.neighbor_indices[i].clone()).collect(),
        neighborhoods: o.iter().map(|&i| patches.neighborhoods[i].clone()).collect(),
    };
    Ok(SerializedPatchSet { serialization, patches: reordered })
}

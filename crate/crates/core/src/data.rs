//! Synthetic parametric shape dataset and training-time augmentation.

use std::f64::consts::TAU;
use std::fmt;
use std::str::FromStr;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::error::{MantisError, Result};
use crate::geometry::{normalize, Point3, PointCloud};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShapeKind {
    Sphere,
    Cube,
    Cylinder,
    Torus,
    Cone,
    Pyramid,
    Ellipsoid,
    Helix,
}

impl ShapeKind {
    pub const ALL: [ShapeKind; 8] = [
        ShapeKind::Sphere,
        ShapeKind::Cube,
        ShapeKind::Cylinder,
        ShapeKind::Torus,
        ShapeKind::Cone,
        ShapeKind::Pyramid,
        ShapeKind::Ellipsoid,
        ShapeKind::Helix,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ShapeKind::Sphere => "sphere",
            ShapeKind::Cube => "cube",
            ShapeKind::Cylinder => "cylinder",
            ShapeKind::Torus => "torus",
            ShapeKind::Cone => "cone",
            ShapeKind::Pyramid => "pyramid",
            ShapeKind::Ellipsoid => "ellipsoid",
            ShapeKind::Helix => "helix",
        }
    }
}

impl fmt::Display for ShapeKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ShapeKind {
    type Err = MantisError;
    fn from_str(s: &str) -> Result<Self> {
        ShapeKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| MantisError::Config(format!("unknown shape `{s}`")))
    }
}

/// One point on the surface of `kind`, with shape parameters `p` drawn per
/// sample by [`shape_params`].
fn surface_point<R: Rng>(kind: ShapeKind, p: &[f64; 3], rng: &mut R) -> Point3 {
    match kind {
        ShapeKind::Sphere => UnitSphere.sample(rng),
        ShapeKind::Ellipsoid => {
            let [x, y, z]: [f64; 3] = UnitSphere.sample(rng);
            [x, y * p[0], z * p[1]]
        }
        ShapeKind::Cube => {
            let face = rng.random_range(0..6);
            let (a, b) = (rng.random_range(-1.0..1.0), rng.random_range(-1.0..1.0));
            let s = if face % 2 == 0 { 1.0 } else { -1.0 };
            let v = match face / 2 {
                0 => [s, a, b],
                1 => [a, s, b],
                _ => [a, b, s],
            };
            [v[0], v[1] * p[0], v[2] * p[1]]
        }
        ShapeKind::Cylinder => {
            let (r, h) = (p[0], p[1]);
            let th = rng.random_range(0.0..TAU);
            let lateral = 2.0 * r * h;
            let cap = r * r;
            if rng.random_range(0.0..lateral + cap) < lateral {
                [r * th.cos(), r * th.sin(), rng.random_range(-h..h)]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                let z = if rng.random::<bool>() { h } else { -h };
                [rr * th.cos(), rr * th.sin(), z]
            }
        }
        ShapeKind::Torus => {
            let (big, small) = (1.0, p[0]);
            let (u, v) = (rng.random_range(0.0..TAU), rng.random_range(0.0..TAU));
            [(big + small * v.cos()) * u.cos(), (big + small * v.cos()) * u.sin(), small * v.sin()]
        }
        ShapeKind::Cone => {
            let (r, h) = (p[0], p[1]);
            let th = rng.random_range(0.0..TAU);
            let slant = (r * r + h * h).sqrt();
            if rng.random_range(0.0..slant + r) < slant {
                let s = rng.random::<f64>().sqrt();
                [r * s * th.cos(), r * s * th.sin(), h * (1.0 - s) - h / 2.0]
            } else {
                let rr = r * rng.random::<f64>().sqrt();
                [rr * th.cos(), rr * th.sin(), -h / 2.0]
            }
        }
        ShapeKind::Pyramid => {
            let (b, h) = (p[0], p[1]);
            let face = rng.random_range(0..5);
            if face == 4 {
                [rng.random_range(-b..b), rng.random_range(-b..b), -h / 2.0]
            } else {
                // triangle with apex (0,0,h/2) over one base edge
                let (mut s, mut t) = (rng.random::<f64>(), rng.random::<f64>());
                if s + t > 1.0 {
                    s = 1.0 - s;
                    t = 1.0 - t;
                }
                let corners = [[b, b], [-b, b], [-b, -b], [b, -b]];
                let (c0, c1) = (corners[face], corners[(face + 1) % 4]);
                let w = 1.0 - s - t;
                [w * c0[0] + s * c1[0], w * c0[1] + s * c1[1], (w + s) * (-h / 2.0) + t * (h / 2.0)]
            }
        }
        ShapeKind::Helix => {
            let (turns, tube) = (p[0], p[1]);
            let s = rng.random_range(0.0..1.0);
            let th = TAU * turns * s;
            let jitter: [f64; 3] = UnitSphere.sample(rng);
            [
                th.cos() + tube * jitter[0],
                th.sin() + tube * jitter[1],
                2.0 * s - 1.0 + tube * jitter[2],
            ]
        }
    }
}

/// Per-sample shape parameters (the sphere has none).
fn shape_params<R: Rng>(kind: ShapeKind, rng: &mut R) -> [f64; 3] {
    match kind {
        ShapeKind::Sphere => [0.0; 3],
        ShapeKind::Ellipsoid => [rng.random_range(0.45..0.7), rng.random_range(0.45..0.7), 0.0],
        ShapeKind::Cube => [rng.random_range(0.8..1.2), rng.random_range(0.8..1.2), 0.0],
        ShapeKind::Cylinder => [rng.random_range(0.4..0.7), rng.random_range(0.7..1.1), 0.0],
        ShapeKind::Torus => [rng.random_range(0.2..0.4), 0.0, 0.0],
        ShapeKind::Cone => [rng.random_range(0.6..1.0), rng.random_range(1.2..1.8), 0.0],
        ShapeKind::Pyramid => [rng.random_range(0.6..1.0), rng.random_range(1.2..1.8), 0.0],
        ShapeKind::Helix => [rng.random_range(2.0..3.5), rng.random_range(0.03..0.08), 0.0],
    }
}

fn rotate(p: Point3, m: &[[f64; 3]; 3]) -> Point3 {
    [
        m[0][0] * p[0] + m[0][1] * p[1] + m[0][2] * p[2],
        m[1][0] * p[0] + m[1][1] * p[1] + m[1][2] * p[2],
        m[2][0] * p[0] + m[2][1] * p[1] + m[2][2] * p[2],
    ]
}

/// Uniformly random rotation (unit quaternion).
fn random_rotation<R: Rng>(rng: &mut R) -> [[f64; 3]; 3] {
    let (u1, u2, u3): (f64, f64, f64) = (rng.random(), rng.random(), rng.random());
    let (a, b) = ((1.0 - u1).sqrt(), u1.sqrt());
    let (w, x, y, z) = (a * (TAU * u2).sin(), a * (TAU * u2).cos(), b * (TAU * u3).sin(), b * (TAU * u3).cos());
    [
        [1.0 - 2.0 * (y * y + z * z), 2.0 * (x * y - w * z), 2.0 * (x * z + w * y)],
        [2.0 * (x * y + w * z), 1.0 - 2.0 * (x * x + z * z), 2.0 * (y * z - w * x)],
        [2.0 * (x * z - w * y), 2.0 * (y * z + w * x), 1.0 - 2.0 * (x * x + y * y)],
    ]
}

/// Raw (unnormalized) cloud of one shape. `rotate` applies a random rotation.
pub fn sample_shape<R: Rng>(kind: ShapeKind, points: usize, noise: f64, rotate_shape: bool, rng: &mut R) -> Result<Vec<Point3>> {
    let normal = Normal::new(0.0, noise.max(0.0))
        .map_err(|e| MantisError::Config(format!("noise: {e}")))?;
    let p = shape_params(kind, rng);
    let rot = rotate_shape.then(|| random_rotation(rng));
    Ok((0..points)
        .map(|_| {
            let mut v = surface_point(kind, &p, rng);
            if let Some(m) = &rot {
                v = rotate(v, m);
            }
            if noise > 0.0 {
                for c in &mut v {
                    *c += normal.sample(rng);
                }
            }
            v
        })
        .collect())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub classes: Vec<ShapeKind>,
    pub points: usize,
    pub noise: f64,
    pub samples_per_class: usize,
    pub rotate: bool,
    pub seed: u64,
}

impl DataSpec {
    pub fn validate(&self) -> Result<()> {
        if self.classes.len() < 2 {
            return Err(MantisError::Config("need at least 2 classes".into()));
        }
        let mut seen = self.classes.clone();
        seen.sort_by_key(|k| *k as u8);
        seen.dedup();
        if seen.len() != self.classes.len() {
            return Err(MantisError::Config("duplicate class in data.classes".into()));
        }
        if self.samples_per_class < 8 {
            return Err(MantisError::Config("need at least 8 samples per class".into()));
        }
        if self.points == 0 {
            return Err(MantisError::Config("data.points must be ≥ 1".into()));
        }
        if !(self.noise >= 0.0 && self.noise.is_finite()) {
            return Err(MantisError::Config("data.noise must be finite and ≥ 0".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticDataset {
    pub classes: Vec<ShapeKind>,
    pub train: Vec<PointCloud>,
    pub test: Vec<PointCloud>,
}

/// Deterministic per seed; clouds are normalized; 80/20 split after a seeded
/// shuffle.
pub fn generate_dataset(spec: &DataSpec) -> Result<SyntheticDataset> {
    spec.validate()?;
    let mut all = Vec::with_capacity(spec.classes.len() * spec.samples_per_class);
    for (label, &kind) in spec.classes.iter().enumerate() {
        for i in 0..spec.samples_per_class {
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(((label as u64) << 32) | i as u64);
            let pts = sample_shape(kind, spec.points, spec.noise, spec.rotate, &mut rng)?;
            all.push(normalize(&PointCloud::new(pts)?)?.with_label(label));
        }
    }
    let mut idx: Vec<usize> = (0..all.len()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(spec.seed ^ 0x5EED_5A17));
    let n_train = (0.8 * all.len() as f64).round() as usize;
    let mut slots: Vec<Option<PointCloud>> = all.into_iter().map(Some).collect();
    let mut take = |i: &usize| slots[*i].take().expect("index used once");
    let train = idx[..n_train].iter().map(&mut take).collect();
    let test = idx[n_train..].iter().map(&mut take).collect();
    Ok(SyntheticDataset { classes: spec.classes.clone(), train, test })
}

/// Random per-axis scaling and translation.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Augment {
    pub scale: (f64, f64),
    pub translate: f64,
}

impl Default for Augment {
    fn default() -> Self {
        Augment { scale: (0.8, 1.25), translate: 0.1 }
    }
}

/// Augmented copy of `cloud`, determined by `(seed, epoch, index)`. The
/// pipeline re-normalizes, so the translation only matters for callers that
/// consume raw coordinates.
pub fn augment(cloud: &PointCloud, a: &Augment, seed: u64, epoch: u64, index: u64) -> Result<PointCloud> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0xA06_3E17);
    rng.set_stream((epoch << 32) | index);
    let s: [f64; 3] = std::array::from_fn(|_| rng.random_range(a.scale.0..=a.scale.1));
    let t: [f64; 3] = std::array::from_fn(|_| rng.random_range(-a.translate..=a.translate));
    let pts = cloud.points.iter().map(|p| std::array::from_fn(|j| p[j] * s[j] + t[j])).collect();
    let mut out = PointCloud::new(pts)?;
    out.label = cloud.label;
    Ok(out)
}

/// Visiting order of the training set in one epoch.
pub fn epoch_permutation(n: usize, seed: u64, epoch: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x000B_DE12);
    rng.set_stream(epoch);
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng);
    idx
}

pub fn class_list(count: usize) -> Result<Vec<ShapeKind>> {
    if !(2..=ShapeKind::ALL.len()).contains(&count) {
        return Err(MantisError::Config(format!("class count must be in 2..=8, got {count}")));
    }
    Ok(ShapeKind::ALL[..count].to_vec())
}

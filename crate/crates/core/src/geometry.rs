//! Point-cloud ingestion, normalization, farthest point sampling and
//! k-nearest-neighbor patch construction. All searches are brute force.

use std::fmt::Write as _;
use std::path::Path;

use crate::error::{MantisError, Result};

pub type Point3 = [f64; 3];

#[inline]
pub fn dist2(a: &Point3, b: &Point3) -> f64 {
    let dx = a[0] - b[0];
    let dy = a[1] - b[1];
    let dz = a[2] - b[2];
    dx * dx + dy * dy + dz * dz
}

#[inline]
pub fn norm(p: &Point3) -> f64 {
    (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()
}

#[derive(Clone, Debug, PartialEq)]
pub struct PointCloud {
    pub points: Vec<Point3>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        let cloud = PointCloud { points, label: None };
        cloud.validate()?;
        Ok(cloud)
    }

    pub fn with_label(mut self, label: usize) -> Self {
        self.label = Some(label);
        self
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn validate(&self) -> Result<()> {
        if self.points.is_empty() {
            return Err(MantisError::Validation("point cloud is empty".into()));
        }
        if let Some(i) = self.points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(MantisError::Validation(format!(
                "point {i} has non-finite coordinates {:?}",
                self.points[i]
            )));
        }
        Ok(())
    }

    pub fn centroid(&self) -> Point3 {
        let mut c = [0.0; 3];
        for p in &self.points {
            for k in 0..3 {
                c[k] += p[k];
            }
        }
        let m = self.points.len() as f64;
        c.map(|v| v / m)
    }

    pub fn max_norm(&self) -> f64 {
        self.points.iter().map(norm).fold(0.0, f64::max)
    }

    /// Parse the plain-text format: one `x y z` per line. Lines starting with
    /// `#` are comments; a `# label <k>` header sets the class label.
    pub fn parse_text(text: &str) -> Result<Self> {
        let mut points = Vec::new();
        let mut label = None;
        for (lineno, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() {
                continue;
            }
            if let Some(rest) = line.strip_prefix('#') {
                let toks: Vec<&str> = rest.split_whitespace().collect();
                if toks.first() == Some(&"label") {
                    let v = toks.last().and_then(|t| t.parse::<usize>().ok()).ok_or_else(|| {
                        MantisError::Validation(format!("line {}: bad label header", lineno + 1))
                    })?;
                    label = Some(v);
                }
                continue;
            }
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(|t| t.parse::<f64>())
                .collect::<std::result::Result<_, _>>()
                .map_err(|e| MantisError::Validation(format!("line {}: {e}", lineno + 1)))?;
            if vals.len() != 3 {
                return Err(MantisError::Validation(format!(
                    "line {}: expected 3 coordinates, found {}",
                    lineno + 1,
                    vals.len()
                )));
            }
            points.push([vals[0], vals[1], vals[2]]);
        }
        let mut cloud = PointCloud::new(points)?;
        cloud.label = label;
        Ok(cloud)
    }

    pub fn to_text(&self) -> String {
        let mut out = String::new();
        if let Some(l) = self.label {
            let _ = writeln!(out, "# label {l}");
        }
        for p in &self.points {
            // `{:?}` on f64 is shortest-roundtrip.
            let _ = writeln!(out, "{:?} {:?} {:?}", p[0], p[1], p[2]);
        }
        out
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse_text(&std::fs::read_to_string(path)?)
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_text())?;
        Ok(())
    }
}

/// Center on the centroid and scale to unit max norm. A cloud with all points
/// coincident maps to the origin.
pub fn normalize(cloud: &PointCloud) -> Result<PointCloud> {
    cloud.validate()?;
    let c = cloud.centroid();
    let centered: Vec<Point3> =
        cloud.points.iter().map(|p| [p[0] - c[0], p[1] - c[1], p[2] - c[2]]).collect();
    let scale = centered.iter().map(norm).fold(0.0, f64::max);
    let points = if scale < 1e-12 {
        vec![[0.0; 3]; centered.len()]
    } else {
        centered.into_iter().map(|p| p.map(|v| v / scale)).collect()
    };
    Ok(PointCloud { points, label: cloud.label })
}

/// How the first FPS point is chosen.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SeedRule {
    /// Farthest from the centroid, lowest index on ties.
    #[default]
    FarthestFromCentroid,
    Index(usize),
}

#[derive(Clone, Debug, PartialEq)]
pub struct KeyPoints {
    pub indices: Vec<usize>,
    pub coords: Vec<Point3>,
}

impl KeyPoints {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }
}

pub fn farthest_point_sample(cloud: &PointCloud, n: usize, seed: SeedRule) -> Result<KeyPoints> {
    let m = cloud.len();
    if n == 0 || n > m {
        return Err(MantisError::Argument(format!("cannot sample {n} key points from {m} points")));
    }
    let first = match seed {
        SeedRule::Index(i) if i < m => i,
        SeedRule::Index(i) => {
            return Err(MantisError::Argument(format!("seed index {i} out of range for {m} points")))
        }
        SeedRule::FarthestFromCentroid => {
            let c = cloud.centroid();
            argmax_first(cloud.points.iter().map(|p| dist2(p, &c)))
        }
    };
    let mut selected = vec![false; m];
    let mut min_d2 = vec![f64::INFINITY; m];
    let mut indices = Vec::with_capacity(n);
    let mut cur = first;
    loop {
        selected[cur] = true;
        indices.push(cur);
        if indices.len() == n {
            break;
        }
        let anchor = cloud.points[cur];
        for (j, p) in cloud.points.iter().enumerate() {
            let d = dist2(p, &anchor);
            if d < min_d2[j] {
                min_d2[j] = d;
            }
        }
        cur = argmax_first(
            min_d2.iter().zip(&selected).map(|(&d, &s)| if s { f64::NEG_INFINITY } else { d }),
        );
    }
    let coords = indices.iter().map(|&i| cloud.points[i]).collect();
    Ok(KeyPoints { indices, coords })
}

fn argmax_first(values: impl Iterator<Item = f64>) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, v) in values.enumerate() {
        if v > best_v {
            best = i;
            best_v = v;
        }
    }
    best
}

/// Key points with their K nearest neighbors, re-centered on each key point.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centers: KeyPoints,
    pub neighbor_indices: Vec<Vec<usize>>,
    pub neighborhoods: Vec<Vec<Point3>>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.centers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.centers.is_empty()
    }

    pub fn patch_size(&self) -> usize {
        self.neighborhoods.first().map_or(0, Vec::len)
    }
}

pub fn knn_patches(cloud: &PointCloud, centers: &KeyPoints, k: usize) -> Result<PatchSet> {
    let m = cloud.len();
    if k == 0 || k > m {
        return Err(MantisError::Argument(format!("cannot take {k} neighbors from {m} points")));
    }
    let mut neighbor_indices = Vec::with_capacity(centers.len());
    let mut neighborhoods = Vec::with_capacity(centers.len());
    let mut keyed: Vec<(f64, usize)> = Vec::with_capacity(m);
    for c in &centers.coords {
        keyed.clear();
        keyed.extend(cloud.points.iter().enumerate().map(|(j, p)| (dist2(p, c), j)));
        let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
        if k < m {
            keyed.select_nth_unstable_by(k - 1, cmp);
        }
        let nearest = &mut keyed[..k];
        nearest.sort_unstable_by(cmp);
        let idx: Vec<usize> = nearest.iter().map(|&(_, j)| j).collect();
        let patch = idx
            .iter()
            .map(|&j| {
                let p = cloud.points[j];
                [p[0] - c[0], p[1] - c[1], p[2] - c[2]]
            })
            .collect();
        neighbor_indices.push(idx);
        neighborhoods.push(patch);
    }
    Ok(PatchSet { centers: centers.clone(), neighbor_indices, neighborhoods })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn cloud(points: &[Point3]) -> PointCloud {
        PointCloud::new(points.to_vec()).unwrap()
    }

    #[test]
    fn normalize_two_points_is_symmetric() {
        let out = normalize(&cloud(&[[2.0, 0.0, 0.0], [0.0, 0.0, 0.0]])).unwrap();
        assert_eq!(out.points, vec![[1.0, 0.0, 0.0], [-1.0, 0.0, 0.0]]);
    }

    #[test]
    fn normalize_single_point_goes_to_origin() {
        let out = normalize(&cloud(&[[5.0, 5.0, 5.0]])).unwrap();
        assert_eq!(out.points, vec![[0.0; 3]]);
    }

    #[test]
    fn non_finite_input_is_rejected() {
        let bad = PointCloud { points: vec![[0.0, f64::NAN, 1.0]], label: None };
        assert!(matches!(normalize(&bad), Err(MantisError::Validation(_))));
        assert!(PointCloud::new(vec![]).is_err());
    }

    #[test]
    fn fps_cube_diagonal() {
        let mut pts = Vec::new();
        for x in 0..2 {
            for y in 0..2 {
                for z in 0..2 {
                    pts.push([x as f64, y as f64, z as f64]);
                }
            }
        }
        let c = cloud(&pts);
        let kp = farthest_point_sample(&c, 2, SeedRule::Index(0)).unwrap();
        assert_eq!(kp.indices, vec![0, 7]);
        assert_eq!(kp.coords[1], [1.0, 1.0, 1.0]);
    }

    #[test]
    fn fps_exhausts_all_points() {
        let c = cloud(&[[0.0, 0.0, 0.0], [3.0, 0.0, 0.0], [1.0, 0.0, 0.0], [0.0, 2.0, 0.0]]);
        let kp = farthest_point_sample(&c, 4, SeedRule::default()).unwrap();
        let mut sorted = kp.indices.clone();
        sorted.sort();
        assert_eq!(sorted, vec![0, 1, 2, 3]);
        // centroid (1, 0.5, 0): point 1 is farthest, then 3, then 0, then 2.
        assert_eq!(kp.indices, vec![1, 3, 0, 2]);
        assert!(matches!(
            farthest_point_sample(&c, 5, SeedRule::default()),
            Err(MantisError::Argument(_))
        ));
    }

    #[test]
    fn knn_k1_is_the_center() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 2.0, 3.0], [-1.0, 0.5, 0.0]]);
        let kp = farthest_point_sample(&c, 3, SeedRule::default()).unwrap();
        let ps = knn_patches(&c, &kp, 1).unwrap();
        for (idx, patch) in ps.neighbor_indices.iter().zip(&ps.neighborhoods) {
            assert_eq!(patch, &vec![[0.0; 3]]);
            assert_eq!(idx.len(), 1);
        }
    }

    #[test]
    fn knn_ties_prefer_lower_index() {
        let c = cloud(&[[0.0, 0.0, 0.0], [1.0, 0.0, 0.0], [2.0, 0.0, 0.0], [3.0, 0.0, 0.0]]);
        let kp = KeyPoints { indices: vec![1], coords: vec![[1.0, 0.0, 0.0]] };
        let ps = knn_patches(&c, &kp, 2).unwrap();
        assert_eq!(ps.neighbor_indices[0], vec![1, 0]);
        assert!(matches!(knn_patches(&c, &kp, 5), Err(MantisError::Argument(_))));
    }

    #[test]
    fn text_format_roundtrip() {
        let c = cloud(&[[0.1, -2.5, 3.0], [1e-17, 4.0, -0.333]]).with_label(3);
        let back = PointCloud::parse_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        assert!(PointCloud::parse_text("1 2\n").is_err());
    }
}

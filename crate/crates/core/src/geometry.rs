//! Point-cloud preprocessing: farthest point sampling, KNN patch grouping,
//! unit-sphere normalization, resampling, and domain-shift augmentations.
//!
//! Every function here is a pure function of its inputs and seed.

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{invalid, Error, Result};
use crate::rng;

pub type Point = [f64; 3];

/// Smallest cloud `drop_holes` is allowed to leave behind.
pub const MIN_POINTS_AFTER_DROP: usize = 32;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PointCloud {
    pub id: String,
    pub points: Vec<Point>,
    pub label: Option<usize>,
}

impl PointCloud {
    pub fn new(id: impl Into<String>, points: Vec<Point>, label: Option<usize>) -> Self {
        Self {
            id: id.into(),
            points,
            label,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn with_points(&self, points: Vec<Point>) -> Self {
        Self {
            id: self.id.clone(),
            points,
            label: self.label,
        }
    }
}

/// FPS + KNN decomposition of a cloud into local patches.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub centroids: Vec<Point>,
    /// `n_patches` rows of `k + 1` points; row `i` starts with `centroids[i]`.
    pub neighborhoods: Vec<Vec<Point>>,
    pub centroid_indices: Vec<usize>,
    /// Indices (into the source cloud) of each patch's `k` neighbors.
    pub neighbor_indices: Vec<Vec<usize>>,
}

impl PatchSet {
    pub fn n_patches(&self) -> usize {
        self.centroids.len()
    }

    /// Neighbors per patch, excluding the prepended centroid.
    pub fn k(&self) -> usize {
        self.neighborhoods.first().map_or(0, |n| n.len() - 1)
    }

    /// The `k` neighbors of patch `i` relative to its centroid.
    pub fn local_neighbors(&self, i: usize) -> Vec<Point> {
        let c = self.centroids[i];
        self.neighborhoods[i][1..].iter().map(|p| sub(*p, c)).collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AugmentMode {
    Rotate,
    Jitter,
    DropHoles,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentSpec {
    pub modes: Vec<AugmentMode>,
    pub jitter_sigma: f64,
    pub drop_fraction: f64,
    pub seed: u64,
}

impl AugmentSpec {
    pub fn none() -> Self {
        Self {
            modes: Vec::new(),
            jitter_sigma: 0.0,
            drop_fraction: 0.0,
            seed: 0,
        }
    }

    /// Parses the letter code used by the per-setting configs (`"R, J, D"`).
    pub fn from_letters(code: &str, jitter_sigma: f64, drop_fraction: f64) -> Result<Self> {
        let mut modes = Vec::new();
        for tok in code.split([',', ' ']).filter(|t| !t.is_empty()) {
            let mode = match tok {
                "R" => AugmentMode::Rotate,
                "J" => AugmentMode::Jitter,
                "D" => AugmentMode::DropHoles,
                other => return Err(invalid(format!("unknown augmentation letter {other:?}"))),
            };
            if !modes.contains(&mode) {
                modes.push(mode);
            }
        }
        Ok(Self {
            modes,
            jitter_sigma,
            drop_fraction,
            seed: 0,
        })
    }

    pub fn validate(&self) -> Result<()> {
        if !(0.0..1.0).contains(&self.drop_fraction) {
            return Err(invalid(format!("drop_fraction {} not in [0, 1)", self.drop_fraction)));
        }
        if !(self.jitter_sigma >= 0.0) {
            return Err(invalid(format!("jitter_sigma {} < 0", self.jitter_sigma)));
        }
        Ok(())
    }
}

pub fn sub(a: Point, b: Point) -> Point {
    [a[0] - b[0], a[1] - b[1], a[2] - b[2]]
}

pub fn dist2(a: Point, b: Point) -> f64 {
    let d = sub(a, b);
    d[0] * d[0] + d[1] * d[1] + d[2] * d[2]
}

pub fn norm(a: Point) -> f64 {
    (a[0] * a[0] + a[1] * a[1] + a[2] * a[2]).sqrt()
}

/// Farthest point sampling from a fixed start index.
///
/// Ties on the max-min distance go to the lowest index.
pub fn fps_from(points: &[Point], m: usize, start: usize) -> Result<Vec<usize>> {
    let n = points.len();
    if m < 1 || m > n {
        return Err(invalid(format!("fps: m = {m} outside [1, {n}]")));
    }
    if start >= n {
        return Err(invalid(format!("fps: start {start} >= {n}")));
    }
    let mut chosen = Vec::with_capacity(m);
    let mut min_d = vec![f64::INFINITY; n];
    let mut taken = vec![false; n];
    let mut cur = start;
    for _ in 0..m {
        chosen.push(cur);
        taken[cur] = true;
        let mut best = None::<(f64, usize)>;
        for (i, p) in points.iter().enumerate() {
            let d = dist2(*p, points[cur]);
            if d < min_d[i] {
                min_d[i] = d;
            }
            if !taken[i] && best.is_none_or(|(bd, _)| min_d[i] > bd) {
                best = Some((min_d[i], i));
            }
        }
        match best {
            Some((_, i)) => cur = i,
            None => break,
        }
    }
    Ok(chosen)
}

/// Farthest point sampling with a seeded uniform start point.
pub fn fps(cloud: &PointCloud, m: usize, seed: u64) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(invalid("fps on empty cloud"));
    }
    let start = rng::stream(seed, &[rng::tag("fps")]).random_range(0..cloud.len());
    fps_from(&cloud.points, m, start)
}

/// The `k` nearest points to `points[center]`, excluding the center itself.
/// Sorted by distance, ties by lowest index.
pub fn knn(points: &[Point], center: usize, k: usize) -> Vec<usize> {
    let c = points[center];
    let mut cand: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .filter(|(i, _)| *i != center)
        .map(|(i, p)| (dist2(*p, c), i))
        .collect();
    let by_dist = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < cand.len() {
        cand.select_nth_unstable_by(k, by_dist);
        cand.truncate(k);
    }
    cand.sort_by(by_dist);
    cand.into_iter().map(|(_, i)| i).collect()
}

/// FPS centroids plus the `k` nearest neighbors of each, centroid first.
pub fn patchify(cloud: &PointCloud, n_patches: usize, k: usize, seed: u64) -> Result<PatchSet> {
    let n = cloud.len();
    if n_patches > n || n_patches == 0 {
        return Err(invalid(format!("patchify: n_patches = {n_patches} outside [1, {n}]")));
    }
    if k >= n {
        return Err(invalid(format!(
            "patchify: k = {k} needs at least {} points, cloud has {n}",
            k + 1
        )));
    }
    let centroid_indices = fps(cloud, n_patches, seed)?;
    Ok(patches_at(&cloud.points, centroid_indices, k))
}

/// Builds patches around already chosen centroid indices.
pub fn patches_at(points: &[Point], centroid_indices: Vec<usize>, k: usize) -> PatchSet {
    let mut centroids = Vec::with_capacity(centroid_indices.len());
    let mut neighborhoods = Vec::with_capacity(centroid_indices.len());
    let mut neighbor_indices = Vec::with_capacity(centroid_indices.len());
    for &c in &centroid_indices {
        let nn = knn(points, c, k);
        let mut hood = Vec::with_capacity(k + 1);
        hood.push(points[c]);
        hood.extend(nn.iter().map(|&i| points[i]));
        centroids.push(points[c]);
        neighborhoods.push(hood);
        neighbor_indices.push(nn);
    }
    PatchSet {
        centroids,
        neighborhoods,
        centroid_indices,
        neighbor_indices,
    }
}

/// Centers the cloud on its centroid and scales the farthest point to norm 1.
pub fn normalize_unit_sphere(cloud: &PointCloud) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::DegenerateInput("cannot normalize empty cloud".into()));
    }
    if cloud.points.iter().flatten().any(|v| !v.is_finite()) {
        return Err(invalid(format!("cloud {} has non-finite coordinates", cloud.id)));
    }
    let n = cloud.len() as f64;
    let mut c = [0.0; 3];
    for p in &cloud.points {
        for a in 0..3 {
            c[a] += p[a];
        }
    }
    for v in c.iter_mut() {
        *v /= n;
    }
    let centered: Vec<Point> = cloud.points.iter().map(|p| sub(*p, c)).collect();
    let scale = centered.iter().map(|p| norm(*p)).fold(0.0, f64::max);
    if scale < 1e-12 {
        return Err(Error::DegenerateInput(format!(
            "cloud {} has all points identical",
            cloud.id
        )));
    }
    Ok(cloud.with_points(
        centered
            .into_iter()
            .map(|p| [p[0] / scale, p[1] / scale, p[2] / scale])
            .collect(),
    ))
}

/// Seeded uniform resampling to exactly `n` points: a random subset when
/// the cloud is larger, all points plus random duplicates when smaller.
pub fn resample(cloud: &PointCloud, n: usize, seed: u64) -> Result<PointCloud> {
    if cloud.is_empty() {
        return Err(Error::DegenerateInput(format!("cloud {} is empty", cloud.id)));
    }
    let mut r = rng::stream(seed, &[rng::tag("resample")]);
    let mut idx: Vec<usize> = (0..cloud.len()).collect();
    idx.shuffle(&mut r);
    if idx.len() >= n {
        idx.truncate(n);
    } else {
        let extra: Vec<usize> = (idx.len()..n).map(|_| r.random_range(0..cloud.len())).collect();
        idx.extend(extra);
    }
    Ok(cloud.with_points(idx.into_iter().map(|i| cloud.points[i]).collect()))
}

/// Rotation by `angle` about the gravity (`z`) axis.
pub fn rotate_z(p: Point, angle: f64) -> Point {
    let (s, c) = angle.sin_cos();
    [c * p[0] - s * p[1], s * p[0] + c * p[1], p[2]]
}

/// Applies the enabled augmentations in the order rotate, jitter, drop holes.
pub fn augment(cloud: &PointCloud, spec: &AugmentSpec) -> Result<PointCloud> {
    spec.validate()?;
    let mut points = cloud.points.clone();
    if spec.modes.contains(&AugmentMode::Rotate) {
        let angle = rng::stream(spec.seed, &[rng::tag("rotate")]).random_range(0.0..std::f64::consts::TAU);
        for p in points.iter_mut() {
            *p = rotate_z(*p, angle);
        }
    }
    if spec.modes.contains(&AugmentMode::Jitter) && spec.jitter_sigma > 0.0 {
        let mut r = rng::stream(spec.seed, &[rng::tag("jitter")]);
        let normal = Normal::new(0.0, spec.jitter_sigma).expect("sigma validated");
        for p in points.iter_mut() {
            for v in p.iter_mut() {
                *v += normal.sample(&mut r);
            }
        }
    }
    if spec.modes.contains(&AugmentMode::DropHoles) && !points.is_empty() {
        points = drop_hole(&points, spec.drop_fraction, spec.seed);
    }
    Ok(cloud.with_points(points))
}

/// Removes the ball of nearest points around a random surface point, at
/// most `fraction` of the cloud and never below [`MIN_POINTS_AFTER_DROP`].
fn drop_hole(points: &[Point], fraction: f64, seed: u64) -> Vec<Point> {
    let n = points.len();
    let budget = ((fraction * n as f64).floor() as usize).min(n.saturating_sub(MIN_POINTS_AFTER_DROP));
    if budget == 0 {
        return points.to_vec();
    }
    let center = points[rng::stream(seed, &[rng::tag("hole")]).random_range(0..n)];
    let mut order: Vec<(f64, usize)> = points.iter().enumerate().map(|(i, p)| (dist2(*p, center), i)).collect();
    order.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
    let mut removed = vec![false; n];
    for &(_, i) in &order[..budget] {
        removed[i] = true;
    }
    points
        .iter()
        .zip(&removed)
        .filter(|(_, r)| !**r)
        .map(|(p, _)| *p)
        .collect()
}

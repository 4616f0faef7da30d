//! Point-cloud files, dataset manifests and the synthetic two-domain toy set.
//!
//! Point file: magic `RPDPTS01`, a little-endian `u64` count, then
//! `count × 3` little-endian `f32` coordinates.
//!
//! Manifest (plain text, `#` comments):
//!
//! ```text
//! domain source
//! classes sphere box cylinder cone torus
//! clouds/s_000.rpdp 0
//! clouds/s_001.rpdp -
//! ```
//!
//! Paths are relative to the manifest's directory; `-` marks an unlabeled sample.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::{Path, PathBuf};

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::distill::Domain;
use crate::error::{Error, Result};
use crate::geometry::{augment, normalize_unit_sphere, resample, rotate_z, AugmentMode, AugmentSpec, Point, PointCloud};
use crate::rng;

pub const POINT_MAGIC: &[u8; 8] = b"RPDPTS01";
pub const SHAPES: [&str; 8] = ["sphere", "box", "cylinder", "cone", "torus", "pyramid", "capsule", "disk"];
/// Raw points sampled per generated shape, before resampling to `N`.
pub const TOY_RAW_POINTS: usize = 1024;
pub const TOY_JITTER_SIGMA: f64 = 0.1;
pub const TOY_DROP_FRACTION: f64 = 0.1;

fn ingest(path: &Path, reason: impl Into<String>) -> Error {
    Error::Ingestion {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_points(points: &[Point]) -> Vec<u8> {
    let mut out = Vec::with_capacity(16 + points.len() * 12);
    out.extend_from_slice(POINT_MAGIC);
    out.extend_from_slice(&(points.len() as u64).to_le_bytes());
    for p in points {
        for v in p {
            out.extend_from_slice(&(*v as f32).to_le_bytes());
        }
    }
    out
}

pub fn decode_points(bytes: &[u8], path: &Path) -> Result<Vec<Point>> {
    if bytes.len() < 16 || &bytes[..8] != POINT_MAGIC {
        return Err(ingest(path, "missing RPDPTS01 header"));
    }
    let n = u64::from_le_bytes(bytes[8..16].try_into().unwrap()) as usize;
    let body = &bytes[16..];
    if n.checked_mul(12) != Some(body.len()) {
        return Err(ingest(path, format!("header says {n} points, payload has {} bytes", body.len())));
    }
    let vals: Vec<f64> = body
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
        .collect();
    let pts: Vec<Point> = vals.chunks_exact(3).map(|c| [c[0], c[1], c[2]]).collect();
    if pts.iter().flatten().any(|v| !v.is_finite()) {
        return Err(ingest(path, "non-finite coordinate"));
    }
    Ok(pts)
}

pub fn write_points(points: &[Point], path: &Path) -> Result<()> {
    fs::write(path, encode_points(points))?;
    Ok(())
}

pub fn read_points(path: &Path) -> Result<Vec<Point>> {
    let bytes = fs::read(path).map_err(|e| ingest(path, e.to_string()))?;
    decode_points(&bytes, path)
}

/// Whitespace-separated `x y z` rows; blank lines and `#` comments ignored.
pub fn parse_xyz(text: &str, path: &Path) -> Result<Vec<Point>> {
    let mut pts = Vec::new();
    for (n, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let cols: Vec<&str> = line.split_whitespace().collect();
        if cols.len() != 3 {
            return Err(ingest(path, format!("line {}: expected 3 columns, found {}", n + 1, cols.len())));
        }
        let mut p = [0.0; 3];
        for (v, c) in p.iter_mut().zip(&cols) {
            *v = c
                .parse::<f64>()
                .ok()
                .filter(|v| v.is_finite())
                .ok_or_else(|| ingest(path, format!("line {}: bad number {c:?}", n + 1)))?;
        }
        pts.push(p);
    }
    if pts.is_empty() {
        return Err(ingest(path, "no points"));
    }
    Ok(pts)
}

pub fn read_xyz(path: &Path) -> Result<Vec<Point>> {
    let text = fs::read_to_string(path).map_err(|e| ingest(path, e.to_string()))?;
    parse_xyz(&text, path)
}

/// Reads either format, chosen by extension (`.xyz`/`.txt` are text).
pub fn read_cloud_file(path: &Path) -> Result<Vec<Point>> {
    match path.extension().and_then(|e| e.to_str()) {
        Some("xyz") | Some("txt") => read_xyz(path),
        _ => read_points(path),
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ManifestEntry {
    pub path: PathBuf,
    pub label: Option<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DatasetManifest {
    /// Directory that entry paths are relative to.
    pub root: PathBuf,
    pub domain: Domain,
    pub classes: Vec<String>,
    pub entries: Vec<ManifestEntry>,
}

impl DatasetManifest {
    pub fn parse(text: &str, root: &Path, source: &Path) -> Result<Self> {
        let mut domain = None;
        let mut classes = None;
        let mut entries = Vec::new();
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let bad = |msg: String| ingest(source, format!("line {}: {msg}", n + 1));
            match cols[0] {
                "domain" => {
                    domain = Some(match cols.get(1).copied() {
                        Some("source") => Domain::Source,
                        Some("target") => Domain::Target,
                        other => return Err(bad(format!("unknown domain {other:?}"))),
                    })
                }
                "classes" => classes = Some(cols[1..].iter().map(|s| s.to_string()).collect::<Vec<_>>()),
                _ => {
                    if cols.len() != 2 {
                        return Err(bad(format!("expected `path label`, found {} columns", cols.len())));
                    }
                    let label = match cols[1] {
                        "-" => None,
                        l => Some(l.parse::<usize>().map_err(|_| bad(format!("bad label {l:?}")))?),
                    };
                    entries.push(ManifestEntry {
                        path: PathBuf::from(cols[0]),
                        label,
                    });
                }
            }
        }
        let domain = domain.ok_or_else(|| ingest(source, "missing `domain` line"))?;
        let classes = classes.ok_or_else(|| ingest(source, "missing `classes` line"))?;
        if classes.len() < 2 {
            return Err(ingest(source, "need at least two classes"));
        }
        for e in &entries {
            if let Some(l) = e.label {
                if l >= classes.len() {
                    return Err(ingest(source, format!("{}: label {l} outside [0, {})", e.path.display(), classes.len())));
                }
            }
        }
        Ok(Self {
            root: root.to_path_buf(),
            domain,
            classes,
            entries,
        })
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| ingest(path, e.to_string()))?;
        let root = path.parent().unwrap_or(Path::new("."));
        Self::parse(&text, root, path)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        s.push_str(match self.domain {
            Domain::Source => "domain source\n",
            Domain::Target => "domain target\n",
        });
        s.push_str(&format!("classes {}\n", self.classes.join(" ")));
        for e in &self.entries {
            let label = e.label.map_or("-".to_string(), |l| l.to_string());
            s.push_str(&format!("{} {}\n", e.path.display(), label));
        }
        s
    }

    pub fn is_labeled(&self) -> bool {
        !self.entries.is_empty() && self.entries.iter().all(|e| e.label.is_some())
    }
}

/// Loads every cloud of a manifest in listed order, resampled to `n_points`
/// and normalized. Sample ids are the entry paths.
pub fn load_dataset(manifest: &DatasetManifest, n_points: usize, seed: u64) -> Result<Vec<PointCloud>> {
    manifest
        .entries
        .iter()
        .map(|e| {
            let full = manifest.root.join(&e.path);
            let pts = read_cloud_file(&full)?;
            let id = e.path.display().to_string();
            let raw = PointCloud::new(id.clone(), pts, e.label);
            let sampled = resample(&raw, n_points, rng::derive_seed(seed, &[rng::tag("load"), rng::tag(&id)]))?;
            normalize_unit_sphere(&sampled).map_err(|err| ingest(&full, err.to_string()))
        })
        .collect()
}

/// Seeded permutation of `0..n` for training order.
pub fn shuffled_order(n: usize, seed: u64, tags: &[u64]) -> Vec<usize> {
    use rand::seq::SliceRandom;
    let mut idx: Vec<usize> = (0..n).collect();
    idx.shuffle(&mut rng::stream(seed, tags));
    idx
}

fn gauss(r: &mut ChaCha8Rng) -> f64 {
    StandardNormal.sample(r)
}

/// Disk of radius `rad` at height `z`, area-uniform.
fn disk_point(r: &mut ChaCha8Rng, rad: f64, z: f64) -> Point {
    let rho = rad * r.random::<f64>().sqrt();
    let t = r.random_range(0.0..TAU);
    [rho * t.cos(), rho * t.sin(), z]
}

fn sample_shape(shape: usize, r: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    let mut pts = Vec::with_capacity(n);
    let u = |r: &mut ChaCha8Rng, lo: f64, hi: f64| r.random_range(lo..hi);
    match SHAPES[shape] {
        "sphere" => {
            let ax = [u(r, 0.85, 1.15), u(r, 0.85, 1.15), u(r, 0.85, 1.15)];
            for _ in 0..n {
                let v = [gauss(r), gauss(r), gauss(r)];
                let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                pts.push([ax[0] * v[0] / l, ax[1] * v[1] / l, ax[2] * v[2] / l]);
            }
        }
        "box" => {
            let s = [u(r, 0.5, 1.0), u(r, 0.5, 1.0), u(r, 0.5, 1.0)];
            let areas = [s[1] * s[2], s[0] * s[2], s[0] * s[1]];
            let total: f64 = areas.iter().sum();
            for _ in 0..n {
                let pick = r.random::<f64>() * total;
                let axis = if pick < areas[0] {
                    0
                } else if pick < areas[0] + areas[1] {
                    1
                } else {
                    2
                };
                let mut p = [u(r, -1.0, 1.0) * s[0], u(r, -1.0, 1.0) * s[1], u(r, -1.0, 1.0) * s[2]];
                p[axis] = if r.random::<bool>() { s[axis] } else { -s[axis] };
                pts.push(p);
            }
        }
        "cylinder" => {
            let (rad, h) = (u(r, 0.3, 0.6), u(r, 0.6, 1.0));
            let side = TAU * rad * 2.0 * h;
            let cap = PI * rad * rad;
            for _ in 0..n {
                let pick = r.random::<f64>() * (side + 2.0 * cap);
                if pick < side {
                    let t = u(r, 0.0, TAU);
                    pts.push([rad * t.cos(), rad * t.sin(), u(r, -h, h)]);
                } else {
                    let z = if pick < side + cap { h } else { -h };
                    pts.push(disk_point(r, rad, z));
                }
            }
        }
        "cone" => {
            let (rad, h) = (u(r, 0.5, 0.8), u(r, 1.2, 1.8));
            let slant = (rad * rad + h * h).sqrt();
            let lateral = PI * rad * slant;
            let base = PI * rad * rad;
            for _ in 0..n {
                if r.random::<f64>() * (lateral + base) < lateral {
                    // Area density on the lateral surface grows linearly with distance from the apex.
                    let f = r.random::<f64>().sqrt();
                    let t = u(r, 0.0, TAU);
                    pts.push([f * rad * t.cos(), f * rad * t.sin(), h / 2.0 - f * h]);
                } else {
                    pts.push(disk_point(r, rad, -h / 2.0));
                }
            }
        }
        "torus" => {
            let (big, small) = (u(r, 0.65, 0.85), u(r, 0.18, 0.32));
            while pts.len() < n {
                let (t, p) = (u(r, 0.0, TAU), u(r, 0.0, TAU));
                // Rejection keeps the sampling area-uniform.
                if r.random::<f64>() * (big + small) <= big + small * p.cos() {
                    let ring = big + small * p.cos();
                    pts.push([ring * t.cos(), ring * t.sin(), small * p.sin()]);
                }
            }
        }
        "pyramid" => {
            let (a, h) = (u(r, 0.6, 0.9), u(r, 1.0, 1.6));
            for _ in 0..n {
                if r.random::<f64>() < 0.2 {
                    pts.push([u(r, -a, a), u(r, -a, a), -h / 2.0]);
                } else {
                    let f = r.random::<f64>().sqrt();
                    let side = r.random_range(0..4);
                    let s = u(r, -1.0, 1.0) * f * a;
                    let e = f * a;
                    let (x, y) = match side {
                        0 => (e, s),
                        1 => (-e, s),
                        2 => (s, e),
                        _ => (s, -e),
                    };
                    pts.push([x, y, h / 2.0 - f * h]);
                }
            }
        }
        "capsule" => {
            let (rad, h) = (u(r, 0.3, 0.45), u(r, 0.4, 0.7));
            let side = TAU * rad * 2.0 * h;
            let caps = 4.0 * PI * rad * rad;
            for _ in 0..n {
                if r.random::<f64>() * (side + caps) < side {
                    let t = u(r, 0.0, TAU);
                    pts.push([rad * t.cos(), rad * t.sin(), u(r, -h, h)]);
                } else {
                    let v = [gauss(r), gauss(r), gauss(r)];
                    let l = (v[0] * v[0] + v[1] * v[1] + v[2] * v[2]).sqrt().max(1e-12);
                    let z = rad * v[2] / l;
                    pts.push([rad * v[0] / l, rad * v[1] / l, z + if z >= 0.0 { h } else { -h }]);
                }
            }
        }
        _ => {
            let (rad, h) = (u(r, 0.8, 1.0), u(r, 0.05, 0.12));
            for _ in 0..n {
                let z = h * u(r, -1.0, 1.0);
                pts.push(disk_point(r, rad, z));
            }
        }
    }
    let angle = u(r, 0.0, TAU);
    pts.into_iter().map(|p| rotate_z(p, angle)).collect()
}

/// Synthetic labeled clouds, `n_per_class` of each of the first `classes`
/// shapes. Target-domain clouds get jitter and a dropped hole; both
/// domains are normalized to the unit sphere.
pub fn generate_toy_dataset(n_per_class: usize, classes: usize, domain: Domain, seed: u64) -> Result<Vec<PointCloud>> {
    if !(2..=SHAPES.len()).contains(&classes) {
        return Err(Error::InvalidArgument(format!("toy classes must lie in [2, {}]", SHAPES.len())));
    }
    let mut out = Vec::with_capacity(n_per_class * classes);
    for c in 0..classes {
        for i in 0..n_per_class {
            out.push(toy_cloud(c, i, domain, seed)?);
        }
    }
    Ok(out)
}

/// Sample `index` of toy class `shape`, exactly as [`generate_toy_dataset`]
/// produces it.
pub fn toy_cloud(shape: usize, index: usize, domain: Domain, seed: u64) -> Result<PointCloud> {
    if shape >= SHAPES.len() {
        return Err(Error::InvalidArgument(format!("toy shape {shape} outside [0, {})", SHAPES.len())));
    }
    let dtag = match domain {
        Domain::Source => "source",
        Domain::Target => "target",
    };
    let s = rng::derive_seed(seed, &[rng::tag(dtag), shape as u64, index as u64]);
    let mut r = rng::stream(s, &[rng::tag("shape")]);
    let pts = sample_shape(shape, &mut r, TOY_RAW_POINTS);
    let id = format!("{dtag}_{}_{index:04}", SHAPES[shape]);
    let cloud = normalize_unit_sphere(&PointCloud::new(id, pts, Some(shape)))?;
    if domain == Domain::Source {
        return Ok(cloud);
    }
    let spec = AugmentSpec {
        modes: vec![AugmentMode::Jitter, AugmentMode::DropHoles],
        jitter_sigma: TOY_JITTER_SIGMA,
        drop_fraction: TOY_DROP_FRACTION,
        seed: s,
    };
    normalize_unit_sphere(&augment(&cloud, &spec)?)
}

/// Writes clouds as point files under `dir/clouds/` plus a manifest at
/// `dir/<name>.txt`; labels are written only when `labeled`.
pub fn write_dataset(
    clouds: &[PointCloud],
    dir: &Path,
    name: &str,
    domain: Domain,
    classes: &[String],
    labeled: bool,
) -> Result<PathBuf> {
    let cloud_dir = dir.join("clouds");
    fs::create_dir_all(&cloud_dir)?;
    let mut entries = Vec::with_capacity(clouds.len());
    for c in clouds {
        let rel = PathBuf::from("clouds").join(format!("{}.rpdp", c.id));
        write_points(&c.points, &dir.join(&rel))?;
        entries.push(ManifestEntry {
            path: rel,
            label: if labeled { c.label } else { None },
        });
    }
    let manifest = DatasetManifest {
        root: dir.to_path_buf(),
        domain,
        classes: classes.to_vec(),
        entries,
    };
    let path = dir.join(format!("{name}.txt"));
    fs::write(&path, manifest.to_text())?;
    Ok(path)
}

/// Paths written by [`write_toy_splits`].
#[derive(Clone, Debug)]
pub struct ToySplits {
    pub source_train: PathBuf,
    pub source_test: PathBuf,
    pub target_train: PathBuf,
    pub target_test: PathBuf,
}

/// Generates and writes the four toy splits. The target training split is
/// written unlabeled.
pub fn write_toy_splits(dir: &Path, n_train: usize, n_test: usize, classes: usize, seed: u64) -> Result<ToySplits> {
    let names: Vec<String> = SHAPES[..classes].iter().map(|s| s.to_string()).collect();
    let split = |domain, n, tag: &str| -> Result<Vec<PointCloud>> {
        let mut clouds = generate_toy_dataset(n, classes, domain, rng::derive_seed(seed, &[rng::tag(tag)]))?;
        for c in clouds.iter_mut() {
            c.id = format!("{tag}_{}", c.id);
        }
        Ok(clouds)
    };
    let w = |clouds: Vec<PointCloud>, name: &str, domain, labeled| write_dataset(&clouds, dir, name, domain, &names, labeled);
    Ok(ToySplits {
        source_train: w(split(Domain::Source, n_train, "train")?, "source_train", Domain::Source, true)?,
        source_test: w(split(Domain::Source, n_test, "test")?, "source_test", Domain::Source, true)?,
        target_train: w(split(Domain::Target, n_train, "train")?, "target_train", Domain::Target, false)?,
        target_test: w(split(Domain::Target, n_test, "test")?, "target_test", Domain::Target, true)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn toy_counts_and_determinism() {
        let a = generate_toy_dataset(40, 5, Domain::Source, 1).unwrap();
        assert_eq!(a.len(), 200);
        assert!(a.iter().all(|c| c.len() == TOY_RAW_POINTS));
        let b = generate_toy_dataset(40, 5, Domain::Source, 1).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn target_clouds_lose_points() {
        let t = generate_toy_dataset(4, 5, Domain::Target, 2).unwrap();
        let mean = t.iter().map(|c| c.len()).sum::<usize>() as f64 / t.len() as f64;
        assert!(mean < TOY_RAW_POINTS as f64);
        assert!(t.iter().all(|c| c.len() == TOY_RAW_POINTS - (TOY_RAW_POINTS as f64 * TOY_DROP_FRACTION) as usize));
    }

    #[test]
    fn shapes_are_normalized() {
        for c in generate_toy_dataset(2, 8, Domain::Source, 3).unwrap() {
            let m = c.points.iter().map(|p| (p[0] * p[0] + p[1] * p[1] + p[2] * p[2]).sqrt()).fold(0.0, f64::max);
            assert!((m - 1.0).abs() < 1e-9, "{}", c.id);
        }
    }

    #[test]
    fn xyz_parsing() {
        let p = Path::new("x.xyz");
        assert_eq!(parse_xyz("0 1 2\n# c\n\n3 4 5\n", p).unwrap().len(), 2);
        assert!(matches!(parse_xyz("0 1\n", p), Err(Error::Ingestion { .. })));
        assert!(matches!(parse_xyz("0 1 nan\n", p), Err(Error::Ingestion { .. })));
    }

    #[test]
    fn point_bytes_round_trip_and_truncation() {
        let pts = vec![[0.5, -0.25, 1.0], [0.1, 0.2, 0.3]];
        let b = encode_points(&pts);
        let back = decode_points(&b, Path::new("p")).unwrap();
        for (a, b) in pts.iter().zip(&back) {
            for k in 0..3 {
                assert!((a[k] - b[k]).abs() < 1e-7);
            }
        }
        assert!(decode_points(&b[..b.len() - 2], Path::new("p")).is_err());
    }

    #[test]
    fn manifest_rejects_out_of_range_label() {
        let text = "domain source\nclasses a b\nx.rpdp 2\n";
        assert!(DatasetManifest::parse(text, Path::new("."), Path::new("m.txt")).is_err());
        let text = "domain target\nclasses a b\nx.rpdp -\ny.rpdp 1\n";
        let m = DatasetManifest::parse(text, Path::new("."), Path::new("m.txt")).unwrap();
        assert_eq!(m.entries[0].label, None);
        assert!(!m.is_labeled());
        assert_eq!(DatasetManifest::parse(&m.to_text(), Path::new("."), Path::new("m.txt")).unwrap(), m);
    }
}

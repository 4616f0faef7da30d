//! Multi-view depth rendering and image patch extraction.
//!
//! The renderer is an orthographic z-buffer splatter followed by an
//! optional Gaussian blur. Each view rotates the cloud into camera
//! coordinates (`p_cam = R p`), looks down the camera's `-z` axis, and
//! maps `x_cam, y_cam ∈ [-1, 1]` onto the pixel grid. Pixel values encode
//! `1 - (d - d_min) / (d_max - d_min)` with `d = -z_cam`, so the nearest
//! point in a view is 1 and empty pixels are 0.

use std::io::Write;
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::geometry::{Point, PointCloud};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq)]
pub struct ViewPose {
    /// Rows are the camera `x`, `y`, `z` axes in world coordinates.
    pub rotation: [[f64; 3]; 3],
    pub name: String,
}

impl ViewPose {
    pub fn identity() -> Self {
        Self {
            rotation: [[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]],
            name: "identity".into(),
        }
    }

    /// Camera placed along `dir` (object-to-camera), world `+z` up where possible.
    pub fn looking_from(name: &str, dir: Point) -> Self {
        let d = normalize(dir);
        let up = if d[2].abs() > 0.999 { [0.0, 1.0, 0.0] } else { [0.0, 0.0, 1.0] };
        let x = normalize(cross(up, d));
        let y = cross(d, x);
        Self {
            rotation: [x, y, d],
            name: name.into(),
        }
    }

    pub fn apply(&self, p: Point) -> Point {
        let r = &self.rotation;
        [
            r[0][0] * p[0] + r[0][1] * p[1] + r[0][2] * p[2],
            r[1][0] * p[0] + r[1][1] * p[1] + r[1][2] * p[2],
            r[2][0] * p[0] + r[2][1] * p[1] + r[2][2] * p[2],
        ]
    }

    pub fn determinant(&self) -> f64 {
        let r = &self.rotation;
        r[0][0] * (r[1][1] * r[2][2] - r[1][2] * r[2][1]) - r[0][1] * (r[1][0] * r[2][2] - r[1][2] * r[2][0])
            + r[0][2] * (r[1][0] * r[2][1] - r[1][1] * r[2][0])
    }

    pub fn is_orthonormal(&self, tol: f64) -> bool {
        let r = &self.rotation;
        for i in 0..3 {
            for j in 0..3 {
                let dot: f64 = (0..3).map(|k| r[i][k] * r[j][k]).sum();
                let want = if i == j { 1.0 } else { 0.0 };
                if (dot - want).abs() > tol {
                    return false;
                }
            }
        }
        (self.determinant() - 1.0).abs() <= tol
    }
}

fn cross(a: Point, b: Point) -> Point {
    [a[1] * b[2] - a[2] * b[1], a[2] * b[0] - a[0] * b[2], a[0] * b[1] - a[1] * b[0]]
}

fn normalize(a: Point) -> Point {
    let n = crate::geometry::norm(a);
    [a[0] / n, a[1] / n, a[2] / n]
}

/// The ten default poses: six axis-aligned views, then four upper-corner
/// views at 45° elevation.
pub fn default_poses() -> Vec<ViewPose> {
    let e = std::f64::consts::FRAC_1_SQRT_2;
    vec![
        ViewPose::looking_from("front", [0.0, -1.0, 0.0]),
        ViewPose::looking_from("right", [1.0, 0.0, 0.0]),
        ViewPose::looking_from("back", [0.0, 1.0, 0.0]),
        ViewPose::looking_from("left", [-1.0, 0.0, 0.0]),
        ViewPose::looking_from("top", [0.0, 0.0, 1.0]),
        ViewPose::looking_from("bottom", [0.0, 0.0, -1.0]),
        ViewPose::looking_from("upper_front_right", [0.5, -0.5, e]),
        ViewPose::looking_from("upper_back_right", [0.5, 0.5, e]),
        ViewPose::looking_from("upper_back_left", [-0.5, 0.5, e]),
        ViewPose::looking_from("upper_front_left", [-0.5, -0.5, e]),
    ]
}

pub fn pose_by_name(name: &str) -> Result<ViewPose> {
    if name == "identity" {
        return Ok(ViewPose::identity());
    }
    default_poses()
        .into_iter()
        .find(|p| p.name == name)
        .ok_or_else(|| invalid(format!("unknown view pose {name:?}")))
}

#[derive(Clone, Debug, PartialEq)]
pub struct MultiViewSet {
    /// One `[H, W]` image per pose.
    pub images: Vec<Tensor>,
    pub poses: Vec<ViewPose>,
}

impl MultiViewSet {
    pub fn n_views(&self) -> usize {
        self.images.len()
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RenderSettings {
    pub height: usize,
    pub width: usize,
    pub splat_radius: usize,
    pub smooth_sigma: f64,
}

pub fn render_depth_views(cloud: &PointCloud, poses: &[ViewPose], settings: RenderSettings) -> Result<MultiViewSet> {
    if cloud.is_empty() {
        return Err(Error::DegenerateInput("cannot render an empty cloud".into()));
    }
    if settings.height < 16 || settings.width < 16 {
        return Err(invalid(format!(
            "render size {}x{} below 16x16",
            settings.height, settings.width
        )));
    }
    let images = poses
        .iter()
        .map(|pose| render_view(&cloud.points, pose, settings))
        .collect();
    Ok(MultiViewSet {
        images,
        poses: poses.to_vec(),
    })
}

fn render_view(points: &[Point], pose: &ViewPose, s: RenderSettings) -> Tensor {
    let (h, w) = (s.height, s.width);
    let cam: Vec<Point> = points.iter().map(|p| pose.apply(*p)).collect();
    let (dmin, dmax) = cam
        .iter()
        .map(|p| -p[2])
        .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), d| (lo.min(d), hi.max(d)));
    let span = dmax - dmin;
    let encode = |d: f64| if span > 1e-12 { 1.0 - (d - dmin) / span } else { 1.0 };

    let mut depth = vec![f64::INFINITY; h * w];
    let r = s.splat_radius as isize;
    for p in &cam {
        let col = pixel_coord((p[0] + 1.0) * 0.5 * w as f64, w);
        let row = pixel_coord((1.0 - p[1]) * 0.5 * h as f64, h);
        let d = -p[2];
        for dy in -r..=r {
            for dx in -r..=r {
                let (yy, xx) = (row as isize + dy, col as isize + dx);
                if yy < 0 || xx < 0 || yy >= h as isize || xx >= w as isize {
                    continue;
                }
                let cell = &mut depth[yy as usize * w + xx as usize];
                if d < *cell {
                    *cell = d;
                }
            }
        }
    }
    let img: Vec<f64> = depth
        .iter()
        .map(|&d| if d.is_finite() { encode(d) } else { 0.0 })
        .collect();
    let img = if s.smooth_sigma > 0.0 {
        gaussian_blur(&img, h, w, s.smooth_sigma)
    } else {
        img
    };
    Tensor::new(vec![h, w], img)
}

fn pixel_coord(v: f64, size: usize) -> usize {
    (v.floor().max(0.0) as usize).min(size - 1)
}

/// Separable Gaussian blur with zero padding; kernel normalized over its
/// full support so outputs stay within the input range.
fn gaussian_blur(img: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let z: f64 = kernel.iter().sum();
    let kernel: Vec<f64> = kernel.into_iter().map(|k| k / z).collect();
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let xx = x as isize + ki as isize - radius;
                if xx >= 0 && xx < w as isize {
                    acc += k * img[y * w + xx as usize];
                }
            }
            tmp[y * w + x] = acc;
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            let mut acc = 0.0;
            for (ki, k) in kernel.iter().enumerate() {
                let yy = y as isize + ki as isize - radius;
                if yy >= 0 && yy < h as isize {
                    acc += k * tmp[yy as usize * w + x];
                }
            }
            out[y * w + x] = acc.clamp(0.0, 1.0);
        }
    }
    out
}

#[derive(Clone, Debug, PartialEq)]
pub struct ImagePatchGrid {
    /// `[N_I, P²]`, tiles in row-major order.
    pub patches: Tensor,
    pub patch_size: usize,
}

/// Cuts an `[H, W]` image into non-overlapping `P×P` tiles.
pub fn image_patchify(view: &Tensor, p: usize) -> Result<ImagePatchGrid> {
    let (h, w) = (view.rows(), view.cols());
    if p == 0 || h % p != 0 || w % p != 0 {
        return Err(invalid(format!("patch size {p} does not divide {h}x{w}")));
    }
    let (gh, gw) = (h / p, w / p);
    let mut data = Vec::with_capacity(h * w);
    for ty in 0..gh {
        for tx in 0..gw {
            for y in 0..p {
                let row = ty * p + y;
                data.extend_from_slice(&view.data[row * w + tx * p..row * w + tx * p + p]);
            }
        }
    }
    Ok(ImagePatchGrid {
        patches: Tensor::new(vec![gh * gw, p * p], data),
        patch_size: p,
    })
}

/// Inverse of [`image_patchify`].
pub fn image_unpatchify(grid: &ImagePatchGrid, h: usize, w: usize) -> Tensor {
    let p = grid.patch_size;
    let gw = w / p;
    let mut out = vec![0.0; h * w];
    for (t, tile) in grid.patches.data.chunks(p * p).enumerate() {
        let (ty, tx) = (t / gw, t % gw);
        for y in 0..p {
            let row = ty * p + y;
            out[row * w + tx * p..row * w + tx * p + p].copy_from_slice(&tile[y * p..(y + 1) * p]);
        }
    }
    Tensor::new(vec![h, w], out)
}

/// Binary PGM (`P5`, maxval 255).
pub fn encode_pgm(view: &Tensor) -> Vec<u8> {
    let (h, w) = (view.rows(), view.cols());
    let mut out = format!("P5\n{w} {h}\n255\n").into_bytes();
    out.extend(view.data.iter().map(|v| (v.clamp(0.0, 1.0) * 255.0).round() as u8));
    out
}

pub fn write_pgm(view: &Tensor, path: &Path) -> Result<()> {
    let mut f = std::fs::File::create(path)?;
    f.write_all(&encode_pgm(view))?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::geometry::{normalize_unit_sphere, PointCloud};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn settings(h: usize, r: usize, sigma: f64) -> RenderSettings {
        RenderSettings {
            height: h,
            width: h,
            splat_radius: r,
            smooth_sigma: sigma,
        }
    }

    fn random_cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [r.random_range(-1.0..1.0), r.random_range(-1.0..1.0), r.random_range(-1.0..1.0)])
            .collect();
        normalize_unit_sphere(&PointCloud::new("r", pts, None)).unwrap()
    }

    #[test]
    fn default_poses_are_rotations() {
        let poses = default_poses();
        assert_eq!(poses.len(), 10);
        for p in &poses {
            assert!(p.is_orthonormal(1e-6), "{}", p.name);
        }
    }

    #[test]
    fn default_views_shape() {
        let cloud = random_cloud(500, 1);
        let mv = render_depth_views(&cloud, &default_poses(), settings(224, 1, 1.0)).unwrap();
        assert_eq!(mv.n_views(), 10);
        for img in &mv.images {
            assert_eq!(img.shape, vec![224, 224]);
            assert!(img.data.iter().all(|v| (0.0..=1.0).contains(v)));
        }
    }

    #[test]
    fn single_point_lights_center_pixel() {
        let cloud = PointCloud::new("o", vec![[0.0, 0.0, 0.0]], None);
        let mv = render_depth_views(&cloud, &[ViewPose::identity()], settings(32, 0, 0.0)).unwrap();
        let img = &mv.images[0];
        let lit: Vec<(usize, f64)> = img.data.iter().copied().enumerate().filter(|(_, v)| *v != 0.0).collect();
        assert_eq!(lit, vec![(16 * 32 + 16, 1.0)]);
    }

    #[test]
    fn z_buffer_keeps_nearer_point() {
        // Camera looks down -z, so z = +1 is nearer. Add a third point to
        // give the depth range an interior value.
        let cloud = PointCloud::new(
            "z",
            vec![[0.0, 0.0, -1.0], [0.0, 0.0, 1.0], [0.9, 0.9, 0.0]],
            None,
        );
        let mv = render_depth_views(&cloud, &[ViewPose::identity()], settings(32, 0, 0.0)).unwrap();
        let center = mv.images[0].at(16, 16);
        // Candidates: d = 1 (z = -1) -> 0.0, d = -1 (z = +1) -> 1.0.
        let candidates = [0.0, 1.0];
        assert_eq!(center, candidates[1]);
        assert_eq!(mv.images[0].at(1, 30), 0.5);
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let cloud = PointCloud::new("e", vec![], None);
        assert!(matches!(
            render_depth_views(&cloud, &[ViewPose::identity()], settings(32, 0, 0.0)),
            Err(Error::DegenerateInput(_))
        ));
    }

    #[test]
    fn render_is_order_invariant() {
        let cloud = random_cloud(300, 2);
        let mut rev = cloud.clone();
        rev.points.reverse();
        let poses = default_poses();
        let a = render_depth_views(&cloud, &poses, settings(32, 1, 0.8)).unwrap();
        let b = render_depth_views(&rev, &poses, settings(32, 1, 0.8)).unwrap();
        assert_eq!(a.images, b.images);
    }

    #[test]
    fn pose_equals_prerotated_identity_render() {
        let cloud = random_cloud(300, 3);
        for pose in default_poses() {
            let rotated = cloud.with_points(cloud.points.iter().map(|p| pose.apply(*p)).collect());
            let a = render_depth_views(&cloud, std::slice::from_ref(&pose), settings(32, 1, 0.8)).unwrap();
            let b = render_depth_views(&rotated, &[ViewPose::identity()], settings(32, 1, 0.8)).unwrap();
            assert_eq!(a.images, b.images, "{}", pose.name);
        }
    }

    #[test]
    fn patch_counts() {
        let img = Tensor::zeros(&[224, 224]);
        assert_eq!(image_patchify(&img, 16).unwrap().patches.shape, vec![196, 256]);
        let img = Tensor::zeros(&[32, 32]);
        assert_eq!(image_patchify(&img, 8).unwrap().patches.shape, vec![16, 64]);
        assert!(matches!(image_patchify(&img, 5), Err(Error::InvalidArgument(_))));
    }

    #[test]
    fn constant_image_patches_are_constant() {
        let img = Tensor::full(&[32, 32], 0.25);
        let grid = image_patchify(&img, 8).unwrap();
        assert!(grid.patches.data.iter().all(|&v| v == 0.25));
    }

    #[test]
    fn patchify_round_trip_is_exact() {
        let mut r = ChaCha8Rng::seed_from_u64(4);
        let img = Tensor::new(vec![32, 48], (0..32 * 48).map(|_| r.random::<f64>()).collect());
        let grid = image_patchify(&img, 16).unwrap();
        assert_eq!(image_unpatchify(&grid, 32, 48), img);
        // First tile, second row starts at image row 1.
        assert_eq!(grid.patches.at(0, 16), img.at(1, 0));
    }

    #[test]
    fn pgm_header() {
        let img = Tensor::full(&[16, 20], 1.0);
        let bytes = encode_pgm(&img);
        let header = b"P5\n20 16\n255\n";
        assert_eq!(&bytes[..header.len()], header);
        assert_eq!(bytes.len(), header.len() + 320);
        assert!(bytes[header.len()..].iter().all(|&b| b == 255));
    }
}

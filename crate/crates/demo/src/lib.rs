//! Browser bindings: toy shapes, depth-view rendering, FPS patching and
//! exact EMD. Flat `f32` buffers hold `[n, 3]` point arrays.

use rpd_core::config::ModelConfig;
use rpd_core::distill::Domain;
use rpd_core::geometry::{self, Point, PointCloud};
use rpd_core::pipeline::data::{toy_cloud, SHAPES};
use rpd_core::projection::render_depth_views;
use rpd_core::reconstruct::emd;
use wasm_bindgen::prelude::*;

type Out<T> = Result<T, String>;

fn points(flat: &[f32]) -> Out<Vec<Point>> {
    if flat.len() % 3 != 0 {
        return Err(format!("point buffer length {} is not a multiple of 3", flat.len()));
    }
    Ok(flat.chunks(3).map(|c| [c[0] as f64, c[1] as f64, c[2] as f64]).collect())
}

fn flatten(pts: &[Point]) -> Vec<f32> {
    pts.iter().flat_map(|p| p.iter().map(|&v| v as f32)).collect()
}

fn err(e: rpd_core::Error) -> String {
    e.to_string()
}

/// Comma-separated toy class names, in label order.
#[wasm_bindgen]
pub fn shape_names() -> String {
    SHAPES.join(",")
}

/// Comma-separated view names used by [`render_views`].
#[wasm_bindgen]
pub fn view_names() -> String {
    ModelConfig::toy().image.views.join(",")
}

/// A toy cloud resampled to `n` points; `target` adds jitter and a hole.
#[wasm_bindgen]
pub fn toy_points(shape: usize, index: usize, target: bool, seed: u64, n: usize) -> Out<Vec<f32>> {
    let domain = if target { Domain::Target } else { Domain::Source };
    let c = toy_cloud(shape, index, domain, seed).map_err(err)?;
    let c = geometry::resample(&c, n, seed).map_err(err)?;
    Ok(flatten(&c.points))
}

/// Depth views of a cloud at `size × size`, concatenated view-major.
#[wasm_bindgen]
pub fn render_views(flat: &[f32], size: usize) -> Out<Vec<f32>> {
    let cfg = ModelConfig::toy().image;
    let mut settings = cfg.render_settings();
    settings.height = size;
    settings.width = size;
    let cloud = geometry::normalize_unit_sphere(&PointCloud::new("demo", points(flat)?, None)).map_err(err)?;
    let views = render_depth_views(&cloud, &cfg.poses().map_err(err)?, settings).map_err(err)?;
    Ok(views.images.iter().flat_map(|v| v.data.iter().map(|&x| x as f32)).collect())
}

/// Patch id per point (`-1` when unassigned; a point in several patches
/// keeps the first), followed by the `n_patches` centroid indices.
#[wasm_bindgen]
pub fn patch_labels(flat: &[f32], n_patches: usize, k: usize, seed: u64) -> Out<Vec<i32>> {
    let cloud = PointCloud::new("demo", points(flat)?, None);
    let ps = geometry::patchify(&cloud, n_patches, k, seed).map_err(err)?;
    let mut labels = vec![-1i32; cloud.len()];
    for (p, (c, nn)) in ps.centroid_indices.iter().zip(&ps.neighbor_indices).enumerate() {
        for &i in std::iter::once(c).chain(nn) {
            if labels[i] < 0 {
                labels[i] = p as i32;
            }
        }
    }
    labels.extend(ps.centroid_indices.iter().map(|&c| c as i32));
    Ok(labels)
}

/// Mean matched Euclidean distance under the optimal one-to-one matching.
#[wasm_bindgen]
pub fn emd_distance(a: &[f32], b: &[f32]) -> Out<f64> {
    emd::emd(&points(a)?, &points(b)?).map_err(err)
}

/// For each point of `a`, the index of its partner in `b`.
#[wasm_bindgen]
pub fn emd_pairs(a: &[f32], b: &[f32]) -> Out<Vec<u32>> {
    let m = emd::emd_matching(&points(a)?, &points(b)?).map_err(err)?;
    Ok(m.into_iter().map(|j| j as u32).collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn bindings_round_trip() {
        let a = toy_points(0, 0, false, 1, 64).unwrap();
        assert_eq!(a.len(), 64 * 3);
        let views = render_views(&a, 32).unwrap();
        assert_eq!(views.len(), view_names().split(',').count() * 32 * 32);
        let labels = patch_labels(&a, 4, 8, 0).unwrap();
        assert_eq!(labels.len(), 64 + 4);
        assert_eq!(labels.iter().take(64).filter(|&&l| l >= 0).count() >= 4 * 9 / 2, true);
        assert_eq!(emd_distance(&a, &a).unwrap(), 0.0);
        let b = toy_points(1, 0, true, 1, 64).unwrap();
        let d = emd_distance(&a, &b).unwrap();
        assert!(d > 0.0);
        let pairs = emd_pairs(&a, &b).unwrap();
        let mut seen = pairs.clone();
        seen.sort_unstable();
        assert_eq!(seen, (0..64).collect::<Vec<u32>>());
        assert!(points(&[1.0, 2.0]).is_err());
    }
}

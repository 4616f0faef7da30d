//! File exports for inspection: rendered views and reconstruction triples.

use std::fs;
use std::path::{Path, PathBuf};

use crate::distill::{prepare_sample, Domain};
use crate::encoder::ModelState;
use crate::error::Result;
use crate::geometry::{Point, PointCloud};
use crate::params::Session;
use crate::projection::{render_depth_views, write_pgm};
use crate::reconstruct::{local_target, write_xyz};

/// Writes one PGM per view as `<stem>_<pose>.pgm`.
pub fn export_views(state: &ModelState, cloud: &PointCloud, dir: &Path, stem: &str) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let cfg = &state.config.image;
    let views = render_depth_views(cloud, &cfg.poses()?, cfg.render_settings())?;
    let mut out = Vec::new();
    for (img, pose) in views.images.iter().zip(&views.poses) {
        let path = dir.join(format!("{stem}_{}.pgm", pose.name));
        write_pgm(img, &path)?;
        out.push(path);
    }
    Ok(out)
}

/// Paths written by [`export_reconstruction`].
#[derive(Clone, Debug)]
pub struct ReconstructionFiles {
    /// Visible patches only.
    pub input: PathBuf,
    /// Visible patches plus predicted masked patches.
    pub reconstruction: PathBuf,
    /// Every patch from the ground truth.
    pub ground_truth: PathBuf,
}

/// Masks a cloud, reconstructs the masked patches and dumps the three
/// point sets as xyz text in world coordinates.
pub fn export_reconstruction(
    state: &ModelState,
    cloud: &PointCloud,
    seed: u64,
    dir: &Path,
    stem: &str,
) -> Result<ReconstructionFiles> {
    fs::create_dir_all(dir)?;
    let sample = prepare_sample(state, cloud, Domain::Target, None, seed)?;
    let mut s = Session::inference(&state.store);
    let point = state.point_pass(&mut s, &sample.patches)?;
    let image = state.image_pass(&mut s, &sample.grids)?;
    let n_i = state.config.image.tokens_per_view();
    let n_p = sample.patches.n_patches();
    let rows: Vec<usize> = (1..=n_p).collect();
    let pt = s.g.gather_rows(point.tokens[0], &rows);
    let all = s.g.concat_rows(&image.tokens);
    let kept: Vec<usize> = sample
        .mask
        .kept_image_indices
        .iter()
        .map(|&i| (i / n_i) * (n_i + 1) + 1 + i % n_i)
        .collect();
    let it = s.g.gather_rows(all, &kept);
    let pred = state
        .layout
        .decoder
        .forward(&mut s, &sample.mask, pt, it, &sample.patches.centroids)?;
    let pred = s.g.value(pred).clone();

    let patch = |j: usize| -> Vec<Point> { sample.patches.neighborhoods[j][1..].to_vec() };
    let visible: Vec<Point> = sample.mask.kept_indices.iter().flat_map(|&j| patch(j)).collect();
    let mut recon = visible.clone();
    for (row, &j) in sample.mask.masked_indices.iter().enumerate() {
        let c = sample.patches.centroids[j];
        let r = pred.row(row);
        recon.extend(r.chunks(3).map(|q| [q[0] + c[0], q[1] + c[1], q[2] + c[2]]));
    }
    let truth: Vec<Point> = (0..n_p)
        .flat_map(|j| {
            let c = sample.patches.centroids[j];
            local_target(&sample.patches.neighborhoods[j], c)
                .into_iter()
                .map(move |q| [q[0] + c[0], q[1] + c[1], q[2] + c[2]])
        })
        .collect();
    let files = ReconstructionFiles {
        input: dir.join(format!("{stem}_input.xyz")),
        reconstruction: dir.join(format!("{stem}_reconstruction.xyz")),
        ground_truth: dir.join(format!("{stem}_ground_truth.xyz")),
    };
    write_xyz(&visible, &files.input)?;
    write_xyz(&recon, &files.reconstruction)?;
    write_xyz(&truth, &files.ground_truth)?;
    Ok(files)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;
    use crate::pipeline::data::{generate_toy_dataset, read_xyz};

    #[test]
    fn writes_views_and_triples() {
        let cfg = ModelConfig::tiny();
        let state = ModelState::new(cfg.clone(), 2).unwrap();
        let cloud = generate_toy_dataset(1, 2, Domain::Source, 0).unwrap().remove(0);
        let cloud = crate::geometry::resample(&cloud, cfg.point.n_points, 0).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let views = export_views(&state, &cloud, dir.path(), "s").unwrap();
        assert_eq!(views.len(), cfg.image.views.len());
        let f = export_reconstruction(&state, &cloud, 5, dir.path(), "s").unwrap();
        let k = cfg.point.k;
        let truth = read_xyz(&f.ground_truth).unwrap();
        assert_eq!(truth.len(), cfg.point.n_patches * k);
        assert_eq!(read_xyz(&f.reconstruction).unwrap().len(), truth.len());
        assert!(read_xyz(&f.input).unwrap().len() < truth.len());
    }
}

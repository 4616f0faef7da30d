//! Masked point-patch reconstruction from kept image tokens.

pub mod emd;

use std::path::Path;

use rand::seq::SliceRandom;
use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::geometry::{sub, Point};
use crate::layers::{CrossAttention, Init, LayerNorm, Linear, SelfAttention, INIT_STD};
use crate::params::{trunc_normal, Group, ParamId, ParamStore, Session};
use crate::rng;
use crate::tensor::Tensor;

pub use emd::{emd, emd_matching};

/// `⌊ratio · n⌋`, robust to the representation error of decimal ratios.
pub fn floor_count(ratio: f64, n: usize) -> usize {
    (ratio * n as f64 + 1e-9).floor() as usize
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct MaskPlan {
    /// Sorted point-token indices replaced by mask embeddings.
    pub masked_indices: Vec<usize>,
    pub kept_indices: Vec<usize>,
    /// Image token indices over all views, `view · N_I + i`, class tokens excluded.
    pub dropped_image_indices: Vec<usize>,
    pub kept_image_indices: Vec<usize>,
    pub seed: u64,
}

/// Uniform seeded masking of point tokens and dropping of image tokens.
/// `n_image_tokens` counts every view (`N_I · V`).
pub fn make_mask_plan(
    n_point_tokens: usize,
    n_image_tokens: usize,
    mask_ratio: f64,
    drop_ratio: f64,
    seed: u64,
) -> Result<MaskPlan> {
    if !(0.0..1.0).contains(&mask_ratio) || !(0.0..1.0).contains(&drop_ratio) {
        return Err(invalid(format!("mask/drop ratios {mask_ratio}, {drop_ratio} outside [0, 1)")));
    }
    let m_p = floor_count(mask_ratio, n_point_tokens);
    let r_i = floor_count(1.0 - drop_ratio, n_image_tokens);
    let mut r = rng::stream(seed, &[rng::tag("mask_plan")]);
    let split = |n: usize, take: usize, r: &mut ChaCha8Rng| {
        let mut idx: Vec<usize> = (0..n).collect();
        idx.shuffle(r);
        let mut first = idx[..take].to_vec();
        let mut rest = idx[take..].to_vec();
        first.sort_unstable();
        rest.sort_unstable();
        (first, rest)
    };
    let (masked, kept) = split(n_point_tokens, m_p, &mut r);
    let (kept_img, dropped_img) = split(n_image_tokens, r_i, &mut r);
    Ok(MaskPlan {
        masked_indices: masked,
        kept_indices: kept,
        dropped_image_indices: dropped_img,
        kept_image_indices: kept_img,
        seed,
    })
}

#[derive(Clone, Debug)]
pub struct DecoderLayer {
    pub norm_q: LayerNorm,
    pub norm_kv: LayerNorm,
    pub cross: CrossAttention,
    pub norm_self: LayerNorm,
    pub self_attn: SelfAttention,
}

#[derive(Clone, Debug)]
pub struct DecoderParams {
    pub layers: Vec<DecoderLayer>,
    pub pos1: Linear,
    pub pos2: Linear,
    pub norm: LayerNorm,
    pub head: Linear,
    /// `[M_P, D2]`, one embedding per masked slot.
    pub mask_embeddings: ParamId,
    pub k: usize,
}

impl DecoderParams {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let d2 = cfg.encoder.token_out_width;
        let heads = cfg.decoder.heads;
        let g = Group::Decoder;
        let layers = (0..cfg.decoder.depth)
            .map(|i| {
                let n = format!("decoder.layers.{i}");
                DecoderLayer {
                    norm_q: LayerNorm::new(store, &format!("{n}.norm_q"), g, d2),
                    norm_kv: LayerNorm::new(store, &format!("{n}.norm_kv"), g, d2),
                    cross: CrossAttention::new(store, rng, &format!("{n}.cross_attn"), g, d2, heads),
                    norm_self: LayerNorm::new(store, &format!("{n}.norm_self"), g, d2),
                    self_attn: SelfAttention::new(store, rng, &format!("{n}.self_attn"), g, d2, heads),
                }
            })
            .collect();
        let hidden = cfg.point.pos_hidden;
        Self {
            layers,
            pos1: Linear::with_init(store, rng, "decoder.pos.fc1", g, 3, hidden, Init::FanIn),
            pos2: Linear::with_init(store, rng, "decoder.pos.fc2", g, hidden, d2, Init::FanIn),
            norm: LayerNorm::new(store, "decoder.norm", g, d2),
            head: Linear::with_init(store, rng, "decoder.head", g, d2, 3 * cfg.point.k, Init::FanIn),
            mask_embeddings: store.add(
                "mask_embeddings",
                Group::MaskEmbeddings,
                trunc_normal(rng, &[cfg.masked_patches(), d2], INIT_STD),
            ),
            k: cfg.point.k,
        }
    }

    /// Predicts centroid-relative coordinates of every masked patch,
    /// `[M_P, 3k]` with row `j` belonging to `plan.masked_indices[j]`.
    ///
    /// `point_tokens: [N_P, D2]` (class token excluded), `image_tokens:
    /// [R_I, D2]` (already restricted to the kept set).
    pub fn forward(
        &self,
        s: &mut Session,
        plan: &MaskPlan,
        point_tokens: Var,
        image_tokens: Var,
        centroids: &[Point],
    ) -> Result<Var> {
        let n_p = plan.masked_indices.len() + plan.kept_indices.len();
        let d2 = s.store().get(self.norm.gamma).len();
        let pt = s.g.value(point_tokens);
        if pt.rows() != n_p || pt.cols() != d2 || centroids.len() != n_p {
            return Err(invalid(format!(
                "decoder expects {n_p} point tokens of width {d2} and {n_p} centroids, got {:?} and {}",
                pt.shape,
                centroids.len()
            )));
        }
        let it = s.g.value(image_tokens);
        if it.cols() != d2 || it.rows() == 0 {
            return Err(invalid(format!("decoder image tokens have shape {:?}", it.shape)));
        }
        let m_p = plan.masked_indices.len();
        if s.store().get(self.mask_embeddings).rows() != m_p {
            return Err(invalid(format!(
                "{} mask embeddings for {m_p} masked slots",
                s.store().get(self.mask_embeddings).rows()
            )));
        }

        let order: Vec<usize> = plan.masked_indices.iter().chain(&plan.kept_indices).copied().collect();
        let cent = Tensor::new(
            vec![n_p, 3],
            order.iter().flat_map(|&i| centroids[i]).collect(),
        );
        let cent = s.g.constant(cent);
        let pos = self.pos1.forward(s, cent);
        let pos = s.g.gelu(pos);
        let pos = self.pos2.forward(s, pos);

        let mask = s.p(self.mask_embeddings);
        let mut f = if plan.kept_indices.is_empty() {
            mask
        } else {
            let kept = s.g.gather_rows(point_tokens, &plan.kept_indices);
            s.g.concat_rows(&[mask, kept])
        };
        f = s.g.add(f, pos);
        for layer in &self.layers {
            let q = layer.norm_q.forward(s, f);
            let kv = layer.norm_kv.forward(s, image_tokens);
            let h = layer.cross.forward(s, q, kv);
            f = s.g.add(f, h);
            let h = layer.norm_self.forward(s, f);
            let h = layer.self_attn.forward(s, h);
            f = s.g.add(f, h);
        }
        let masked: Vec<usize> = (0..m_p).collect();
        let out = s.g.gather_rows(f, &masked);
        let out = self.norm.forward(s, out);
        Ok(self.head.forward(s, out))
    }
}

/// Centroid-relative target of one patch: its `k` neighbors minus the centroid.
pub fn local_target(neighborhood: &[Point], centroid: Point) -> Vec<Point> {
    neighborhood[1..].iter().map(|p| sub(*p, centroid)).collect()
}

fn rows_to_points(row: &[f64]) -> Vec<Point> {
    row.chunks(3).map(|c| [c[0], c[1], c[2]]).collect()
}

/// Graph-level reconstruction loss: mean over masked patches of the EMD
/// between predicted and true local coordinates. The optimal matching is
/// found on current values and held fixed for differentiation.
pub fn recon_loss_var(s: &mut Session, predicted: Var, targets: &[Vec<Point>]) -> Result<(Var, f64)> {
    let pv = s.g.value(predicted);
    if pv.rows() != targets.len() || targets.iter().any(|t| t.len() * 3 != pv.cols()) {
        return Err(invalid(format!(
            "prediction {:?} does not match {} targets",
            pv.shape,
            targets.len()
        )));
    }
    let mut matched = Vec::with_capacity(pv.len());
    let mut value = 0.0;
    for (j, target) in targets.iter().enumerate() {
        let pred = rows_to_points(pv.row(j));
        let m = emd_matching(&pred, target)?;
        for (i, &t) in m.iter().enumerate() {
            matched.extend_from_slice(&target[t]);
            value += crate::geometry::dist2(pred[i], target[t]).sqrt();
        }
    }
    let n_rows = matched.len() / 3;
    value /= n_rows as f64;
    let flat = s.g.reshape(predicted, vec![n_rows, 3]);
    let tgt = s.g.constant(Tensor::new(vec![n_rows, 3], matched));
    let diff = s.g.sub(flat, tgt);
    let dist = s.g.row_norm(diff);
    Ok((s.g.mean(dist), value))
}

/// Value-level reconstruction loss. `predicted: [M_P, 3k]` in
/// centroid-relative coordinates, `ground_truth[j]` the absolute `k`
/// neighbor points of masked patch `j`, `centroids[j]` its centroid.
pub fn recon_loss(predicted: &Tensor, ground_truth: &[Vec<Point>], centroids: &[Point]) -> Result<f64> {
    if ground_truth.len() != centroids.len() || predicted.rows() != centroids.len() {
        return Err(invalid("recon_loss: patch counts disagree"));
    }
    let mut total = 0.0;
    for (j, (gt, c)) in ground_truth.iter().zip(centroids).enumerate() {
        let pred: Vec<Point> = rows_to_points(predicted.row(j))
            .into_iter()
            .map(|p| [p[0] + c[0], p[1] + c[1], p[2] + c[2]])
            .collect();
        total += emd(&pred, gt)?;
    }
    Ok(total / centroids.len() as f64)
}

/// Writes points as whitespace-separated `x y z` lines.
pub fn write_xyz(points: &[Point], path: &Path) -> Result<()> {
    use std::fmt::Write as _;
    let mut out = String::with_capacity(points.len() * 32);
    for p in points {
        let _ = writeln!(out, "{} {} {}", p[0], p[1], p[2]);
    }
    std::fs::write(path, out)?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    #[test]
    fn full_size_counts() {
        let plan = make_mask_plan(27, 196 * 10, 0.85, 0.85, 0).unwrap();
        assert_eq!(plan.masked_indices.len(), 22);
        assert_eq!(plan.kept_indices.len(), 5);
        assert_eq!(plan.kept_image_indices.len(), 294);
        assert_eq!(plan.dropped_image_indices.len(), 1960 - 294);
    }

    #[test]
    fn zero_ratio_keeps_everything() {
        let plan = make_mask_plan(8, 16, 0.0, 0.0, 3).unwrap();
        assert!(plan.masked_indices.is_empty());
        assert_eq!(plan.kept_indices, (0..8).collect::<Vec<_>>());
        assert_eq!(plan.kept_image_indices.len(), 16);
    }

    #[test]
    fn plan_partitions_and_is_seeded() {
        let a = make_mask_plan(27, 100, 0.85, 0.85, 11).unwrap();
        let b = make_mask_plan(27, 100, 0.85, 0.85, 11).unwrap();
        assert_eq!(a, b);
        let mut all: Vec<usize> = a.masked_indices.iter().chain(&a.kept_indices).copied().collect();
        all.sort_unstable();
        assert_eq!(all, (0..27).collect::<Vec<_>>());
        assert!(make_mask_plan(4, 4, 1.0, 0.5, 0).is_err());
    }

    #[test]
    fn recon_loss_examples() {
        let centroids = vec![[0.0, 0.0, 0.0], [1.0, 1.0, 1.0]];
        let gt = vec![
            vec![[0.1, 0.0, 0.0], [0.0, 0.2, 0.0]],
            vec![[1.0, 1.0, 1.3], [1.2, 1.0, 1.0]],
        ];
        let mut pred = Tensor::zeros(&[2, 6]);
        for (j, (g, c)) in gt.iter().zip(&centroids).enumerate() {
            for (i, p) in g.iter().enumerate() {
                for d in 0..3 {
                    pred.data[j * 6 + i * 3 + d] = p[d] - c[d];
                }
            }
        }
        assert!(recon_loss(&pred, &gt, &centroids).unwrap() < 1e-15);
        let delta = 0.01;
        for i in 0..2 {
            pred.data[i * 3] += delta;
        }
        let l = recon_loss(&pred, &gt, &centroids).unwrap();
        assert!((l - delta / 2.0).abs() < 1e-12, "{l}");
    }

    #[test]
    fn graph_loss_matches_value_loss() {
        let cfg = ModelConfig::tiny();
        let store = ParamStore::new();
        let mut s = Session::inference(&store);
        let mut r = ChaCha8Rng::seed_from_u64(2);
        let pred = trunc_normal(&mut r, &[2, 3 * cfg.point.k], 0.3);
        let targets: Vec<Vec<Point>> = (0..2)
            .map(|_| {
                let t = trunc_normal(&mut r, &[cfg.point.k, 3], 0.3);
                rows_to_points(&t.data)
            })
            .collect();
        let zero = vec![[0.0; 3]; 2];
        let expect = recon_loss(&pred, &targets, &zero).unwrap();
        let v = s.g.constant(pred);
        let (var, value) = recon_loss_var(&mut s, v, &targets).unwrap();
        assert!((s.g.value(var).item() - expect).abs() < 1e-12);
        assert!((value - expect).abs() < 1e-12);
    }
}

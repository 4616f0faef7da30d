//! Image and point tokenizers.
//!
//! Both produce a `[(T + 1), D1]` sequence: a learnable class token at
//! row 0 followed by one token per patch, with positional encodings added.
//!
//! The point tokenizer is a two-layer edge-convolution network run inside
//! each patch. An edge feature `W·[x_i ; x_j - x_i] + b` splits into
//! `A·x_i + B·x_j + b`. Since LeakyReLU is monotone, the max over edges is
//! `lrelu(A·x_i + b + max_j B·x_j)`, so no per-edge tensor is ever built.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::error::{invalid, Result};
use crate::geometry::{dist2, PatchSet};
use crate::layers::{Init, LayerNorm, Linear, INIT_STD};
use crate::params::{trunc_normal, Group, ParamId, ParamStore, Session};
use crate::projection::ImagePatchGrid;
use crate::tensor::Tensor;

pub const EDGE_SLOPE: f64 = 0.2;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Modality {
    Image,
    Point,
}

#[derive(Clone, Debug, PartialEq)]
pub struct TokenSequence {
    /// `[(T + 1), D1]`, class token first.
    pub tokens: Tensor,
    pub modality: Modality,
    pub view_index: Option<usize>,
}

/// Fixed 2-D sine/cosine table for a `grid_h × grid_w` patch grid, with an
/// all-zero row for the class token. Half the width encodes the column,
/// half the row.
pub fn sincos_table(width: usize, grid_h: usize, grid_w: usize) -> Tensor {
    let half = width / 2;
    let quarter = half / 2;
    let mut data = vec![0.0; width];
    let enc = |pos: f64, out: &mut Vec<f64>| {
        let freqs: Vec<f64> = (0..quarter)
            .map(|i| 1.0 / 10000f64.powf(i as f64 / quarter as f64))
            .collect();
        out.extend(freqs.iter().map(|w| (pos * w).sin()));
        out.extend(freqs.iter().map(|w| (pos * w).cos()));
    };
    for r in 0..grid_h {
        for c in 0..grid_w {
            enc(c as f64, &mut data);
            enc(r as f64, &mut data);
        }
    }
    Tensor::new(vec![grid_h * grid_w + 1, width], data)
}

#[derive(Clone, Debug)]
pub struct ImageTokenizer {
    pub proj: Linear,
    pub cls: ParamId,
    pub pos: ParamId,
    pub channels: usize,
}

impl ImageTokenizer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let im = &cfg.image;
        let d1 = cfg.encoder.width;
        let p2 = im.patch_size * im.patch_size;
        let g = Group::ImageTokenizer;
        let proj = Linear::with_init(store, rng, "image_tokenizer.patch_embed", g, im.channels * p2, d1, Init::Xavier);
        let cls = store.add("image_tokenizer.cls_token", g, trunc_normal(rng, &[d1], INIT_STD));
        let pos = store.add(
            "image_tokenizer.pos_embed",
            g,
            sincos_table(d1, im.height / im.patch_size, im.width / im.patch_size),
        );
        Self {
            proj,
            cls,
            pos,
            channels: im.channels,
        }
    }

    /// Patch vectors with the single depth channel replicated, laid out
    /// channel-major to match a `Conv2d` weight flattened as `[C, P, P]`.
    pub fn replicate_channels(&self, grid: &ImagePatchGrid) -> Tensor {
        let (n, p2) = (grid.patches.rows(), grid.patches.cols());
        let mut data = Vec::with_capacity(n * p2 * self.channels);
        for r in 0..n {
            for _ in 0..self.channels {
                data.extend_from_slice(grid.patches.row(r));
            }
        }
        Tensor::new(vec![n, p2 * self.channels], data)
    }

    /// Returns `(patch tokens before positions, full sequence)`.
    pub fn forward(&self, s: &mut Session, grid: &ImagePatchGrid) -> Result<(Var, Var)> {
        let expect = s.store().get(self.proj.w).rows();
        let x = self.replicate_channels(grid);
        if x.cols() != expect {
            return Err(invalid(format!(
                "image patch length {} does not match projection input {}",
                x.cols(),
                expect
            )));
        }
        let pos_rows = s.store().get(self.pos).rows();
        if pos_rows != x.rows() + 1 {
            return Err(invalid(format!(
                "positional table has {pos_rows} rows for {} tokens",
                x.rows() + 1
            )));
        }
        let x = s.g.constant(x);
        let tokens = self.proj.forward(s, x);
        let cls = s.p(self.cls);
        let seq = s.g.concat_rows(&[cls, tokens]);
        let pos = s.p(self.pos);
        Ok((tokens, s.g.add(seq, pos)))
    }
}

/// One edge-convolution layer over a fixed neighbor graph.
#[derive(Clone, Debug)]
pub struct EdgeConv {
    pub center: ParamId,
    pub neighbor: ParamId,
    pub bias: ParamId,
}

impl EdgeConv {
    fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, c_in: usize, c_out: usize) -> Self {
        let g = Group::PointTokenizer;
        Self {
            center: store.add(format!("{name}.center"), g, trunc_normal(rng, &[c_in, c_out], edge_std(c_in))),
            neighbor: store.add(format!("{name}.neighbor"), g, trunc_normal(rng, &[c_in, c_out], edge_std(c_in))),
            bias: store.add(format!("{name}.bias"), g, Tensor::zeros(&[c_out])),
        }
    }

    /// `x: [R, c_in]` → `[R, c_out]`, max over each point's `edge_k` neighbors.
    fn forward(&self, s: &mut Session, x: Var, graph: &EdgeGraph) -> Var {
        let (wc, wn, b) = (s.p(self.center), s.p(self.neighbor), s.p(self.bias));
        let a = s.g.linear(x, wc, b);
        let n = s.g.matmul(x, wn);
        let m = s.g.gather_max(n, &graph.neighbors, graph.per_point);
        let e = s.g.add(a, m);
        s.g.leaky_relu(e, EDGE_SLOPE)
    }
}

/// Fan-in scaled init for the edge convolutions.
fn edge_std(c_in: usize) -> f64 {
    (2.0 / c_in as f64).sqrt()
}

/// Flattened neighbor lists for all points of all patches; row `i` owns
/// `neighbors[i * per_point .. (i + 1) * per_point]`.
#[derive(Clone, Debug)]
pub struct EdgeGraph {
    pub neighbors: Vec<usize>,
    pub per_point: usize,
}

impl EdgeGraph {
    /// `features: [patches · group, c]`; neighbors are searched within each
    /// group of `group` consecutive rows, nearest first (self included),
    /// ties by lowest row.
    pub fn build(features: &Tensor, group: usize, edge_k: usize) -> Self {
        let per_point = edge_k.min(group);
        let c = features.cols();
        let rows = features.rows();
        let mut neighbors = Vec::with_capacity(rows * per_point);
        let mut cand: Vec<(f64, usize)> = Vec::with_capacity(group);
        for base in (0..rows).step_by(group) {
            for i in base..base + group {
                let fi = features.row(i);
                cand.clear();
                for j in base..base + group {
                    let fj = features.row(j);
                    let d: f64 = if c == 3 {
                        dist2([fi[0], fi[1], fi[2]], [fj[0], fj[1], fj[2]])
                    } else {
                        fi.iter().zip(fj).map(|(a, b)| (a - b) * (a - b)).sum()
                    };
                    cand.push((d, j));
                }
                cand.sort_by(|a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
                neighbors.extend(cand[..per_point].iter().map(|&(_, j)| j));
            }
        }
        Self {
            neighbors,
            per_point,
        }
    }
}

#[derive(Clone, Debug)]
pub struct PointTokenizer {
    pub conv1: EdgeConv,
    pub conv2: EdgeConv,
    /// Per-point normalization after each convolution stage; local
    /// coordinates are small, so raw edge features would be dwarfed by the
    /// positional term.
    pub norm1: LayerNorm,
    pub norm2: LayerNorm,
    pub cls: ParamId,
    pub cls_pos: ParamId,
    pub pos1: Linear,
    pub pos2: Linear,
    pub edge_k: usize,
}

impl PointTokenizer {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, cfg: &ModelConfig) -> Self {
        let p = &cfg.point;
        let d1 = cfg.encoder.width;
        let g = Group::PointTokenizer;
        Self {
            conv1: EdgeConv::new(store, rng, "point_tokenizer.conv1", 3, p.edge_hidden),
            conv2: EdgeConv::new(store, rng, "point_tokenizer.conv2", p.edge_hidden, d1),
            norm1: LayerNorm::new(store, "point_tokenizer.norm1", g, p.edge_hidden),
            norm2: LayerNorm::new(store, "point_tokenizer.norm2", g, d1),
            cls: store.add("point_tokenizer.cls_token", g, trunc_normal(rng, &[d1], INIT_STD)),
            cls_pos: store.add("point_tokenizer.cls_pos", g, trunc_normal(rng, &[d1], INIT_STD)),
            pos1: Linear::with_init(store, rng, "point_tokenizer.pos.fc1", g, 3, p.pos_hidden, Init::FanIn),
            pos2: Linear::with_init(store, rng, "point_tokenizer.pos.fc2", g, p.pos_hidden, d1, Init::FanIn),
            edge_k: p.edge_k,
        }
    }

    /// Centroid-relative patch coordinates, `[N_P · (k + 1), 3]`.
    pub fn local_coordinates(patches: &PatchSet) -> Tensor {
        let mut data = Vec::new();
        for (hood, c) in patches.neighborhoods.iter().zip(&patches.centroids) {
            for p in hood {
                data.extend_from_slice(&[p[0] - c[0], p[1] - c[1], p[2] - c[2]]);
            }
        }
        Tensor::new(vec![data.len() / 3, 3], data)
    }

    /// Returns `(patch tokens before positions, full sequence)`.
    pub fn forward(&self, s: &mut Session, patches: &PatchSet) -> Result<(Var, Var)> {
        let d1 = s.store().get(self.cls).len();
        let group = patches.k() + 1;
        if patches.n_patches() == 0 || patches.neighborhoods.iter().any(|h| h.len() != group) {
            return Err(invalid("patch set has ragged or empty neighborhoods"));
        }
        let x0 = Self::local_coordinates(patches);
        let graph1 = EdgeGraph::build(&x0, group, self.edge_k);
        let x0 = s.g.constant(x0);
        let h1 = self.conv1.forward(s, x0, &graph1);
        let h1 = self.norm1.forward(s, h1);
        let graph2 = EdgeGraph::build(s.g.value(h1), group, self.edge_k);
        let h2 = self.conv2.forward(s, h1, &graph2);
        let tokens = s.g.segment_max(h2, group);
        let tokens = self.norm2.forward(s, tokens);
        debug_assert_eq!(s.g.value(tokens).cols(), d1);

        let cent = Tensor::new(
            vec![patches.n_patches(), 3],
            patches.centroids.iter().flatten().copied().collect(),
        );
        let cent = s.g.constant(cent);
        let pos = self.pos1.forward(s, cent);
        let pos = s.g.gelu(pos);
        let pos = self.pos2.forward(s, pos);
        let cls = s.p(self.cls);
        let cls_pos = s.p(self.cls_pos);
        let seq = s.g.concat_rows(&[cls, tokens]);
        let pos = s.g.concat_rows(&[cls_pos, pos]);
        Ok((tokens, s.g.add(seq, pos)))
    }
}

/// Both tokenizers.
#[derive(Clone, Debug)]
pub struct TokenizerParams {
    pub image: ImageTokenizer,
    pub point: PointTokenizer,
}

/// Value-level image tokenization, one sequence per view.
pub fn tokenize_images(grids: &[ImagePatchGrid], store: &ParamStore, params: &TokenizerParams) -> Result<Vec<TokenSequence>> {
    grids
        .iter()
        .enumerate()
        .map(|(v, grid)| {
            let mut s = Session::inference(store);
            let (_, seq) = params.image.forward(&mut s, grid)?;
            Ok(TokenSequence {
                tokens: s.g.value(seq).clone(),
                modality: Modality::Image,
                view_index: Some(v),
            })
        })
        .collect()
}

/// Value-level point tokenization.
pub fn tokenize_points(patches: &PatchSet, store: &ParamStore, params: &TokenizerParams) -> Result<TokenSequence> {
    let mut s = Session::inference(store);
    let (_, seq) = params.point.forward(&mut s, patches)?;
    Ok(TokenSequence {
        tokens: s.g.value(seq).clone(),
        modality: Modality::Point,
        view_index: None,
    })
}

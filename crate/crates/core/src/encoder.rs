//! Shared transformer trunk, heads, the full model state and weight import.

use std::collections::BTreeSet;

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::config::ModelConfig;
use crate::container::{Container, NameMap, Transform};
use crate::error::{invalid, Error, Result};
use crate::geometry::{patchify, PatchSet, PointCloud};
use crate::layers::{Init, Block, LayerNorm, Linear, Mlp3};
use crate::params::{Group, ParamStore, Session};
use crate::projection::{image_patchify, ImagePatchGrid, MultiViewSet};
use crate::reconstruct::DecoderParams;
use crate::rng;
use crate::tensor::Tensor;
use crate::tokenizer::{ImageTokenizer, PointTokenizer, TokenSequence, TokenizerParams};

/// Parameter handles for every module of the model.
#[derive(Clone, Debug)]
pub struct Layout {
    pub tokenizers: TokenizerParams,
    pub blocks: Vec<Block>,
    pub token_norm: LayerNorm,
    pub token_proj: Linear,
    pub proj_image: Mlp3,
    pub proj_point: Mlp3,
    pub classifier_image: Mlp3,
    pub classifier_point: Mlp3,
    pub decoder: DecoderParams,
}

/// All learnable parameters plus the freeze policy.
#[derive(Clone, Debug)]
pub struct ModelState {
    pub config: ModelConfig,
    pub store: ParamStore,
    pub layout: Layout,
    pub frozen: BTreeSet<Group>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct FeatureBundle {
    /// One `[(T + 1), D2]` matrix per sequence (one for points, `V` for images).
    pub token_features: Vec<Tensor>,
    /// Class-token feature; the `V` view features concatenated for images.
    pub class_feature: Vec<f64>,
    pub fused_feature: Vec<f64>,
    pub logits: Vec<f64>,
}

/// Graph handles of one branch's forward pass.
#[derive(Clone, Debug)]
pub struct BranchPass {
    /// Encoder outputs `[(T + 1), D2]`, one per sequence.
    pub tokens: Vec<Var>,
    pub fused: Var,
    pub logits: Var,
}

impl ModelState {
    /// Fresh initialization from `seed`, with the freeze policy applied.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut store = ParamStore::new();
        let mut r: ChaCha8Rng = rng::stream(seed, &[rng::tag("init")]);
        let cfg = &config;
        let e = &cfg.encoder;
        let image = ImageTokenizer::new(&mut store, &mut r, cfg);
        let point = PointTokenizer::new(&mut store, &mut r, cfg);
        let blocks = (0..e.depth)
            .map(|i| {
                Block::new(
                    &mut store,
                    &mut r,
                    &format!("encoder.blocks.{i}"),
                    Group::EncoderBlock(i),
                    e.width,
                    e.heads,
                    e.mlp_ratio,
                )
            })
            .collect();
        let tp = Group::TokenProjection;
        let token_norm = LayerNorm::new(&mut store, "token_projection.norm", tp, e.width);
        let token_proj = Linear::with_init(&mut store, &mut r, "token_projection.linear", tp, e.width, e.token_out_width, Init::FanIn);
        let (d2, d, c) = (e.token_out_width, e.feature_dim, cfg.classes);
        let v = cfg.image.views.len();
        let proj_image = Mlp3::new(&mut store, &mut r, "proj_head_image", Group::ProjHeadImage, [v * d2, d, d / 2, d]);
        let proj_point = Mlp3::new(&mut store, &mut r, "proj_head_point", Group::ProjHeadPoint, [d2, d, d / 2, d]);
        let classifier_image = Mlp3::new(&mut store, &mut r, "classifier_image", Group::ClassifierImage, [d, d, d / 2, c]);
        let classifier_point = Mlp3::new(&mut store, &mut r, "classifier_point", Group::ClassifierPoint, [d, d, d / 2, c]);
        let decoder = DecoderParams::new(&mut store, &mut r, cfg);
        let mut state = Self {
            config,
            store,
            layout: Layout {
                tokenizers: TokenizerParams { image, point },
                blocks,
                token_norm,
                token_proj,
                proj_image,
                proj_point,
                classifier_image,
                classifier_point,
                decoder,
            },
            frozen: BTreeSet::new(),
        };
        state.apply_freeze_policy();
        Ok(state)
    }

    /// Freezes the image tokenizer and all but the last `trainable_tail`
    /// encoder blocks.
    pub fn apply_freeze_policy(&mut self) {
        let e = &self.config.encoder;
        self.frozen.clear();
        self.frozen.insert(Group::ImageTokenizer);
        for i in 0..e.depth - e.trainable_tail {
            self.frozen.insert(Group::EncoderBlock(i));
        }
    }

    pub fn is_frozen(&self, g: Group) -> bool {
        self.frozen.contains(&g)
    }

    /// Trunk plus shared token projection: `[(T + 1), D1] -> [(T + 1), D2]`.
    pub fn encode(&self, s: &mut Session, seq: Var) -> Result<Var> {
        let w = s.g.value(seq).cols();
        if w != self.config.encoder.width {
            return Err(invalid(format!(
                "sequence width {w} does not match encoder width {}",
                self.config.encoder.width
            )));
        }
        let mut x = seq;
        for b in &self.layout.blocks {
            x = b.forward(s, x);
        }
        let x = self.layout.token_norm.forward(s, x);
        Ok(self.layout.token_proj.forward(s, x))
    }

    fn heads(&self, s: &mut Session, class: Var, proj: &Mlp3, cls: &Mlp3) -> (Var, Var) {
        let rate = self.config.dropout;
        let fused = proj.forward(s, class, rate);
        let logits = cls.forward(s, fused, rate);
        (fused, logits)
    }

    pub fn point_pass(&self, s: &mut Session, patches: &PatchSet) -> Result<BranchPass> {
        let (_, seq) = self.layout.tokenizers.point.forward(s, patches)?;
        let z = self.encode(s, seq)?;
        let class = s.g.gather_rows(z, &[0]);
        let (fused, logits) = self.heads(s, class, &self.layout.proj_point, &self.layout.classifier_point);
        Ok(BranchPass {
            tokens: vec![z],
            fused,
            logits,
        })
    }

    pub fn image_pass(&self, s: &mut Session, grids: &[ImagePatchGrid]) -> Result<BranchPass> {
        if grids.len() != self.config.image.views.len() {
            return Err(invalid(format!(
                "{} views given, model expects {}",
                grids.len(),
                self.config.image.views.len()
            )));
        }
        let mut tokens = Vec::with_capacity(grids.len());
        let mut classes = Vec::with_capacity(grids.len());
        for grid in grids {
            let (_, seq) = self.layout.tokenizers.image.forward(s, grid)?;
            let z = self.encode(s, seq)?;
            classes.push(s.g.gather_rows(z, &[0]));
            tokens.push(z);
        }
        let stacked = s.g.concat_rows(&classes);
        let width = s.g.value(stacked).len();
        let class = s.g.reshape(stacked, vec![1, width]);
        let (fused, logits) = self.heads(s, class, &self.layout.proj_image, &self.layout.classifier_image);
        Ok(BranchPass { tokens, fused, logits })
    }

    /// Patches a (normalized, fixed-size) cloud with the configured sizes.
    pub fn patchify(&self, cloud: &PointCloud, seed: u64) -> Result<PatchSet> {
        let p = &self.config.point;
        patchify(cloud, p.n_patches, p.k, seed)
    }

    pub fn image_grids(&self, views: &MultiViewSet) -> Result<Vec<ImagePatchGrid>> {
        views
            .images
            .iter()
            .map(|v| image_patchify(v, self.config.image.patch_size))
            .collect()
    }

    /// Overwrites mapped parameters from a pretrained container. All
    /// problems are collected before anything is written.
    pub fn load_pretrained(&mut self, weights: &Container, name_map: &NameMap) -> Result<()> {
        let mut problems = Vec::new();
        let mut updates = Vec::new();
        for entry in &name_map.entries {
            let Some(id) = self.store.id(&entry.internal) else {
                problems.push(format!("{}: no model parameter named {}", entry.canonical, entry.internal));
                continue;
            };
            let Some(src) = weights.get(&entry.canonical) else {
                problems.push(format!("{}: missing from container", entry.canonical));
                continue;
            };
            let target = &self.store.get(id).shape;
            match apply_transform(src, entry.transform, target) {
                Ok(t) => updates.push((id, t)),
                Err(msg) => problems.push(format!("{}: {msg}", entry.canonical)),
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems));
        }
        for (id, t) in updates {
            *self.store.get_mut(id) = t;
        }
        Ok(())
    }
}

fn apply_transform(src: &Tensor, transform: Transform, target: &[usize]) -> std::result::Result<Tensor, String> {
    let n: usize = target.iter().product();
    if src.len() != n {
        return Err(format!("shape mismatch: container {:?}, model {:?}", src.shape, target));
    }
    match transform {
        Transform::Copy => Ok(src.clone().reshaped(target.to_vec())),
        Transform::Transpose => {
            if target.len() != 2 || src.shape.first() != Some(&target[1]) {
                return Err(format!(
                    "shape mismatch for transpose: container {:?}, model {:?}",
                    src.shape, target
                ));
            }
            let flat = src.clone().reshaped(vec![target[1], target[0]]);
            Ok(flat.transpose())
        }
    }
}

/// Value-level trunk application.
pub fn encode_sequence(seq: &TokenSequence, state: &ModelState) -> Result<Tensor> {
    let mut s = Session::inference(&state.store);
    let x = s.g.constant(seq.tokens.clone());
    let z = state.encode(&mut s, x)?;
    Ok(s.g.value(z).clone())
}

fn bundle(s: &Session, pass: &BranchPass) -> FeatureBundle {
    let token_features: Vec<Tensor> = pass.tokens.iter().map(|&t| s.g.value(t).clone()).collect();
    let class_feature = token_features.iter().flat_map(|t| t.row(0).to_vec()).collect();
    FeatureBundle {
        token_features,
        class_feature,
        fused_feature: s.g.value(pass.fused).data.clone(),
        logits: s.g.value(pass.logits).data.clone(),
    }
}

/// Point branch at inference. `seed` fixes the FPS start.
pub fn extract_point_feature(cloud: &PointCloud, state: &ModelState, seed: u64) -> Result<FeatureBundle> {
    let patches = state.patchify(cloud, seed)?;
    extract_point_feature_from_patches(&patches, state)
}

pub fn extract_point_feature_from_patches(patches: &PatchSet, state: &ModelState) -> Result<FeatureBundle> {
    let mut s = Session::inference(&state.store);
    let pass = state.point_pass(&mut s, patches)?;
    Ok(bundle(&s, &pass))
}

/// Image branch at inference.
pub fn extract_image_feature(views: &MultiViewSet, state: &ModelState) -> Result<FeatureBundle> {
    let grids = state.image_grids(views)?;
    let mut s = Session::inference(&state.store);
    let pass = state.image_pass(&mut s, &grids)?;
    Ok(bundle(&s, &pass))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::container::vit_name_map;
    use crate::projection::render_depth_views;
    use crate::tokenizer::tokenize_points;
    use rand::{Rng, SeedableRng};

    fn cloud(n: usize, seed: u64) -> PointCloud {
        let mut r = ChaCha8Rng::seed_from_u64(seed);
        let pts = (0..n)
            .map(|_| [r.random_range(-0.6..0.6), r.random_range(-0.6..0.6), r.random_range(-0.6..0.6)])
            .collect();
        PointCloud::new("c", pts, None)
    }

    #[test]
    fn toy_shapes() {
        let cfg = ModelConfig::toy();
        let state = ModelState::new(cfg.clone(), 1).unwrap();
        let c = cloud(256, 2);
        let f = extract_point_feature(&c, &state, 0).unwrap();
        assert_eq!(f.token_features[0].shape, vec![9, 32]);
        assert_eq!(f.fused_feature.len(), 32);
        assert_eq!(f.logits.len(), 5);
        let views = render_depth_views(&c, &cfg.image.poses().unwrap(), cfg.image.render_settings()).unwrap();
        let f = extract_image_feature(&views, &state).unwrap();
        assert_eq!(f.token_features.len(), 4);
        assert_eq!(f.class_feature.len(), 128);
        assert_eq!(f.logits.len(), 5);
        assert!(f.logits.iter().all(|v| v.is_finite()));
    }

    #[test]
    fn point_feature_is_deterministic() {
        let state = ModelState::new(ModelConfig::toy(), 3).unwrap();
        let c = cloud(256, 4);
        let a = extract_point_feature(&c, &state, 9).unwrap();
        let b = extract_point_feature(&c.clone(), &state, 9).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn freeze_policy_examples() {
        let mut cfg = ModelConfig::toy();
        let state = ModelState::new(cfg.clone(), 0).unwrap();
        assert!(state.is_frozen(Group::ImageTokenizer));
        assert!(state.is_frozen(Group::EncoderBlock(0)));
        assert!(!state.is_frozen(Group::EncoderBlock(1)));
        assert_eq!(state.frozen.len(), 2);
        cfg.encoder.trainable_tail = cfg.encoder.depth;
        let state = ModelState::new(cfg, 0).unwrap();
        assert_eq!(state.frozen.iter().copied().collect::<Vec<_>>(), vec![Group::ImageTokenizer]);
    }

    #[test]
    fn attention_equivariance_over_tokens() {
        let state = ModelState::new(ModelConfig::toy(), 5).unwrap();
        let patches = state.patchify(&cloud(256, 6), 1).unwrap();
        let seq = tokenize_points(&patches, &state.store, &state.layout.tokenizers).unwrap();
        let mut perm: Vec<usize> = (0..seq.tokens.rows()).collect();
        perm[1..].reverse();
        let mut permuted = seq.clone();
        for (dst, &src) in perm.iter().enumerate() {
            permuted.tokens.row_mut(dst).copy_from_slice(seq.tokens.row(src));
        }
        let out = encode_sequence(&seq, &state).unwrap();
        let out_p = encode_sequence(&permuted, &state).unwrap();
        for (dst, &src) in perm.iter().enumerate() {
            for (a, b) in out_p.row(dst).iter().zip(out.row(src)) {
                assert!((a - b).abs() < 1e-10);
            }
        }
    }

    #[test]
    fn width_mismatch_is_rejected() {
        let state = ModelState::new(ModelConfig::toy(), 0).unwrap();
        let seq = TokenSequence {
            tokens: Tensor::zeros(&[3, 10]),
            modality: crate::tokenizer::Modality::Point,
            view_index: None,
        };
        assert!(encode_sequence(&seq, &state).is_err());
    }

    #[test]
    fn pretrained_load_reports_every_problem() {
        let cfg = ModelConfig::tiny();
        let mut state = ModelState::new(cfg.clone(), 0).unwrap();
        let map = vit_name_map(cfg.encoder.depth);
        let mut container = Container::export_pretrained(&state, &map).unwrap();
        container.remove("blocks.1.attn.qkv.weight");
        container.insert("blocks.0.attn.proj.bias", Tensor::zeros(&[3]));
        let err = state.load_pretrained(&container, &map).unwrap_err().to_string();
        assert!(err.contains("blocks.1.attn.qkv.weight"), "{err}");
        assert!(err.contains("blocks.0.attn.proj.bias"), "{err}");
    }
}

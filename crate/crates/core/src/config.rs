//! Model dimensions and the three scale presets.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::projection::{pose_by_name, RenderSettings, ViewPose};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EncoderConfig {
    pub depth: usize,
    pub heads: usize,
    /// Token width of the transformer trunk.
    pub width: usize,
    /// Width after the shared token projection.
    pub token_out_width: usize,
    /// Width of the fused features produced by the projection heads.
    pub feature_dim: usize,
    /// Number of final blocks left trainable.
    pub trainable_tail: usize,
    pub mlp_ratio: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ImageConfig {
    pub views: Vec<String>,
    pub height: usize,
    pub width: usize,
    pub patch_size: usize,
    /// Channel count expected by the patch projection; depth is replicated.
    pub channels: usize,
    pub splat_radius: usize,
    pub smooth_sigma: f64,
}

impl ImageConfig {
    pub fn tokens_per_view(&self) -> usize {
        (self.height / self.patch_size) * (self.width / self.patch_size)
    }

    pub fn poses(&self) -> Result<Vec<ViewPose>> {
        self.views.iter().map(|n| pose_by_name(n)).collect()
    }

    pub fn render_settings(&self) -> RenderSettings {
        RenderSettings {
            height: self.height,
            width: self.width,
            splat_radius: self.splat_radius,
            smooth_sigma: self.smooth_sigma,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointConfig {
    /// Fixed cloud size after resampling.
    pub n_points: usize,
    pub n_patches: usize,
    /// Neighbors per patch.
    pub k: usize,
    /// Neighbors per point in the intra-patch edge graph (self included).
    pub edge_k: usize,
    pub edge_hidden: usize,
    pub pos_hidden: usize,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DecoderConfig {
    pub depth: usize,
    pub heads: usize,
    pub mask_ratio: f64,
    pub drop_ratio: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder: EncoderConfig,
    pub image: ImageConfig,
    pub point: PointConfig,
    pub decoder: DecoderConfig,
    pub classes: usize,
    pub dropout: f64,
}

fn names(v: &[&str]) -> Vec<String> {
    v.iter().map(|s| s.to_string()).collect()
}

impl ModelConfig {
    /// ViT-B/16 dimensions with ten 224² views.
    pub fn paper() -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 12,
                heads: 12,
                width: 768,
                token_out_width: 512,
                feature_dim: 512,
                trainable_tail: 3,
                mlp_ratio: 4,
            },
            image: ImageConfig {
                views: crate::projection::default_poses().into_iter().map(|p| p.name).collect(),
                height: 224,
                width: 224,
                patch_size: 16,
                channels: 3,
                splat_radius: 1,
                smooth_sigma: 1.0,
            },
            point: PointConfig {
                n_points: 1024,
                n_patches: 27,
                k: 128,
                edge_k: 16,
                edge_hidden: 64,
                pos_hidden: 128,
            },
            decoder: DecoderConfig {
                depth: 2,
                heads: 16,
                mask_ratio: 0.85,
                drop_ratio: 0.85,
            },
            classes: 10,
            dropout: 0.5,
        }
    }

    /// Desk-scale preset used by the toy experiment.
    pub fn toy() -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 4,
                heads: 4,
                width: 64,
                token_out_width: 32,
                feature_dim: 32,
                trainable_tail: 3,
                mlp_ratio: 4,
            },
            image: ImageConfig {
                views: names(&["front", "right", "top", "upper_front_right"]),
                height: 32,
                width: 32,
                patch_size: 8,
                channels: 3,
                splat_radius: 2,
                smooth_sigma: 0.5,
            },
            point: PointConfig {
                n_points: 256,
                n_patches: 8,
                k: 16,
                edge_k: 8,
                edge_hidden: 32,
                pos_hidden: 64,
            },
            decoder: DecoderConfig {
                depth: 2,
                heads: 4,
                mask_ratio: 0.85,
                drop_ratio: 0.85,
            },
            classes: 5,
            dropout: 0.1,
        }
    }

    /// Smallest configuration, sized for finite-difference gradient checks.
    pub fn tiny() -> Self {
        Self {
            encoder: EncoderConfig {
                depth: 2,
                heads: 2,
                width: 8,
                token_out_width: 8,
                feature_dim: 8,
                trainable_tail: 1,
                mlp_ratio: 2,
            },
            image: ImageConfig {
                views: names(&["front", "top"]),
                height: 16,
                width: 16,
                patch_size: 8,
                channels: 3,
                splat_radius: 1,
                smooth_sigma: 0.5,
            },
            point: PointConfig {
                n_points: 32,
                n_patches: 4,
                k: 4,
                edge_k: 5,
                edge_hidden: 6,
                pos_hidden: 6,
            },
            decoder: DecoderConfig {
                depth: 1,
                heads: 2,
                mask_ratio: 0.85,
                drop_ratio: 0.85,
            },
            classes: 3,
            dropout: 0.0,
        }
    }

    pub fn masked_patches(&self) -> usize {
        (self.decoder.mask_ratio * self.point.n_patches as f64).floor() as usize
    }

    pub fn validate(&self) -> Result<()> {
        let e = &self.encoder;
        let mut problems = Vec::new();
        if e.depth == 0 || e.heads == 0 || e.width == 0 {
            problems.push("encoder depth, heads and width must be positive".to_string());
        } else if e.width % e.heads != 0 {
            problems.push(format!("encoder width {} not divisible by {} heads", e.width, e.heads));
        }
        if e.trainable_tail > e.depth {
            problems.push(format!("trainable_tail {} > depth {}", e.trainable_tail, e.depth));
        }
        if e.width % 4 != 0 {
            problems.push(format!("encoder width {} must be a multiple of 4", e.width));
        }
        if e.feature_dim < 2 {
            problems.push("feature_dim must be at least 2".into());
        }
        let d = &self.decoder;
        if d.heads == 0 || e.token_out_width % d.heads != 0 {
            problems.push(format!(
                "decoder width {} not divisible by {} heads",
                e.token_out_width, d.heads
            ));
        }
        if !(0.0..1.0).contains(&d.mask_ratio) || !(0.0..1.0).contains(&d.drop_ratio) {
            problems.push("mask and drop ratios must lie in [0, 1)".into());
        }
        let im = &self.image;
        if im.views.is_empty() {
            problems.push("at least one view is required".into());
        }
        if let Err(err) = im.poses() {
            problems.push(err.to_string());
        }
        if im.height < 16 || im.width < 16 {
            problems.push("rendered views must be at least 16x16".into());
        }
        if im.patch_size == 0 || im.height % im.patch_size != 0 || im.width % im.patch_size != 0 {
            problems.push(format!(
                "patch size {} does not divide {}x{}",
                im.patch_size, im.height, im.width
            ));
        }
        let p = &self.point;
        if p.n_patches == 0 || p.n_patches > p.n_points {
            problems.push(format!("n_patches {} outside [1, {}]", p.n_patches, p.n_points));
        }
        if p.k == 0 || p.k >= p.n_points {
            problems.push(format!("k {} outside [1, {})", p.k, p.n_points));
        }
        if p.edge_k == 0 {
            problems.push("edge_k must be positive".into());
        }
        if self.masked_patches() == 0 {
            problems.push("mask ratio masks no patches".into());
        }
        if self.classes < 2 {
            problems.push("at least two classes are required".into());
        }
        if !(0.0..1.0).contains(&self.dropout) {
            problems.push("dropout must lie in [0, 1)".into());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn presets_validate() {
        for cfg in [ModelConfig::paper(), ModelConfig::toy(), ModelConfig::tiny()] {
            cfg.validate().unwrap();
        }
    }

    #[test]
    fn paper_preset_counts() {
        let cfg = ModelConfig::paper();
        assert_eq!(cfg.image.tokens_per_view(), 196);
        assert_eq!(cfg.image.views.len(), 10);
        assert_eq!(cfg.masked_patches(), 22);
    }

    #[test]
    fn inconsistent_dims_are_rejected() {
        let mut cfg = ModelConfig::toy();
        cfg.encoder.heads = 5;
        cfg.encoder.trainable_tail = 9;
        let err = cfg.validate().unwrap_err().to_string();
        assert!(err.contains("divisible"), "{err}");
        assert!(err.contains("trainable_tail"), "{err}");
    }
}

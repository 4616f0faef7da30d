//! Cross-modal ensembling, confidence-thresholded pseudo-labels and the
//! self-paced threshold schedule.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::autograd::softmax;
use crate::distill::{supervised_cls_loss, PhasePlan};
use crate::encoder::ModelState;
use crate::error::{invalid, Result};
use crate::geometry::PointCloud;
use crate::params::Session;
use crate::projection::render_depth_views;
use crate::rng;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SPSTConfig {
    pub theta_init: f64,
    pub epsilon: f64,
    pub rounds: usize,
    pub epochs_per_round: usize,
    pub theta_cap: f64,
    /// Keep the KD and reconstruction terms active during self-training.
    pub keep_auxiliary_losses: bool,
}

impl Default for SPSTConfig {
    fn default() -> Self {
        Self {
            theta_init: 0.8,
            epsilon: 0.05,
            rounds: 10,
            epochs_per_round: 5,
            theta_cap: 0.95,
            keep_auxiliary_losses: true,
        }
    }
}

impl SPSTConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.theta_init > 0.0 && self.theta_init <= self.theta_cap && self.theta_cap < 1.0) {
            return Err(invalid(format!(
                "need 0 < theta_init ({}) <= theta_cap ({}) < 1",
                self.theta_init, self.theta_cap
            )));
        }
        if !(self.epsilon >= 0.0) {
            return Err(invalid("epsilon must be non-negative"));
        }
        Ok(())
    }
}

/// Element-wise mean of the two branches' logits.
pub fn ensemble_logits(point_logits: &[f64], image_logits: &[f64]) -> Result<Vec<f64>> {
    if point_logits.len() != image_logits.len() {
        return Err(invalid(format!(
            "logit widths differ: {} vs {}",
            point_logits.len(),
            image_logits.len()
        )));
    }
    Ok(point_logits.iter().zip(image_logits).map(|(a, b)| 0.5 * (a + b)).collect())
}

pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, v) in xs.iter().enumerate() {
        if *v > xs[best] {
            best = i;
        }
    }
    best
}

/// `min(theta_init + round · epsilon, theta_cap)`.
pub fn threshold_for_round(round: usize, config: &SPSTConfig) -> Result<f64> {
    if round >= config.rounds {
        return Err(invalid(format!("round {round} outside [0, {})", config.rounds)));
    }
    Ok((config.theta_init + round as f64 * config.epsilon).min(config.theta_cap))
}

/// Pseudo-label from one sample's logits: the argmax class of the
/// ensemble softmax if its probability exceeds `theta`.
pub fn pseudo_label(point_logits: &[f64], image_logits: &[f64], theta: f64) -> Result<Option<(usize, f64)>> {
    let p = softmax(&ensemble_logits(point_logits, image_logits)?);
    let c = argmax(&p);
    Ok((p[c] > theta).then_some((c, p[c])))
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PseudoLabelTable {
    /// sample id → (class, confidence)
    pub entries: BTreeMap<String, (usize, f64)>,
    pub round: usize,
    pub theta: f64,
}

impl PseudoLabelTable {
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn label(&self, id: &str) -> Option<usize> {
        self.entries.get(id).map(|e| e.0)
    }

    /// One JSON record per labeled sample.
    pub fn write_jsonl(&self, path: &Path) -> Result<()> {
        let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
        for (id, (class, conf)) in &self.entries {
            let rec = serde_json::json!({
                "sample": id,
                "class": class,
                "confidence": conf,
                "round": self.round,
                "theta": self.theta,
            });
            writeln!(f, "{rec}")?;
        }
        f.flush()?;
        Ok(())
    }
}

/// Both branches' logits for a clean cloud at inference.
pub fn predict_logits(state: &ModelState, cloud: &PointCloud, seed: u64) -> Result<(Vec<f64>, Vec<f64>)> {
    let cfg = &state.config;
    let patches = state.patchify(cloud, seed)?;
    let views = render_depth_views(cloud, &cfg.image.poses()?, cfg.image.render_settings())?;
    let grids = state.image_grids(&views)?;
    let mut s = Session::inference(&state.store);
    let p = state.point_pass(&mut s, &patches)?;
    let i = state.image_pass(&mut s, &grids)?;
    Ok((s.g.value(p.logits).data.clone(), s.g.value(i.logits).data.clone()))
}

/// Seed used for the FPS start when scoring a sample at inference.
pub fn inference_seed(master: u64, id: &str) -> u64 {
    rng::derive_seed(master, &[rng::tag("inference"), rng::tag(id)])
}

/// Labels every target cloud whose ensemble confidence exceeds `theta`.
pub fn generate_pseudo_labels(
    target: &[PointCloud],
    state: &ModelState,
    theta: f64,
    round: usize,
    seed: u64,
) -> Result<PseudoLabelTable> {
    if !(theta > 0.0 && theta < 1.0) {
        return Err(invalid(format!("theta {theta} outside (0, 1)")));
    }
    let mut table = PseudoLabelTable {
        entries: BTreeMap::new(),
        round,
        theta,
    };
    for cloud in target {
        let (p, i) = predict_logits(state, cloud, inference_seed(seed, &cloud.id))?;
        if let Some(e) = pseudo_label(&p, &i, theta)? {
            table.entries.insert(cloud.id.clone(), e);
        }
    }
    Ok(table)
}

/// Self-training objective for one pseudo-labeled sample.
pub fn spst_loss(point_logits: &[f64], image_logits: &[f64], pseudo_label: usize) -> Result<f64> {
    supervised_cls_loss(point_logits, image_logits, pseudo_label, 0.0)
}

/// Stage-2 plan: every unfrozen group trains.
pub fn spst_plan(epoch: usize) -> PhasePlan {
    PhasePlan::joint(epoch)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ensemble_examples() {
        assert_eq!(ensemble_logits(&[1.0, 2.0], &[1.0, 2.0]).unwrap(), vec![1.0, 2.0]);
        assert_eq!(ensemble_logits(&[2.0, 0.0], &[0.0, 2.0]).unwrap(), vec![1.0, 1.0]);
        let e = ensemble_logits(&[3.0, 0.0, 0.0], &[0.0, 1.0, 0.0]).unwrap();
        assert_eq!(argmax(&e), 0);
        assert!(ensemble_logits(&[1.0], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn threshold_schedule() {
        let c = SPSTConfig::default();
        let got: Vec<f64> = (0..10).map(|r| threshold_for_round(r, &c).unwrap()).collect();
        for (g, e) in got.iter().zip([0.80, 0.85, 0.90, 0.95, 0.95, 0.95]) {
            assert!((g - e).abs() < 1e-12);
        }
        assert_eq!(got[9], 0.95);
        assert!(threshold_for_round(10, &c).is_err());
    }

    #[test]
    fn pseudo_label_examples() {
        // softmax max 0.9 over two classes: logit gap ln 9.
        let l = [9f64.ln(), 0.0];
        assert_eq!(pseudo_label(&l, &l, 0.8).unwrap().unwrap().0, 0);
        let l = [(0.7f64 / 0.3).ln(), 0.0];
        assert!(pseudo_label(&l, &l, 0.8).unwrap().is_none());
        let l = [0.0, 0.0, 500.0];
        assert_eq!(pseudo_label(&l, &l, 0.999).unwrap().unwrap().0, 2);
    }

    #[test]
    fn spst_loss_equals_supervised() {
        let (p, i) = ([0.2, 1.5, -0.3], [1.0, 0.0, 2.0]);
        assert_eq!(spst_loss(&p, &i, 1).unwrap(), supervised_cls_loss(&p, &i, 1, 0.0).unwrap());
        assert!((spst_loss(&[0.0, 0.0], &[0.0, 0.0], 0).unwrap() - 4f64.ln()).abs() < 1e-12);
    }
}

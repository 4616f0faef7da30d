//! Classification metrics on a labeled evaluation split.

use serde::Serialize;

use crate::encoder::ModelState;
use crate::error::{invalid, Result};
use crate::geometry::PointCloud;
use crate::selftrain::{argmax, ensemble_logits, inference_seed, predict_logits};

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalReport {
    pub samples: usize,
    /// Accuracy of the averaged point and image logits.
    pub ensemble_accuracy: f64,
    pub point_accuracy: f64,
    pub image_accuracy: f64,
    /// Ensemble accuracy per class; `None` for classes absent from the split.
    pub per_class: Vec<Option<f64>>,
    /// `confusion[truth][prediction]`, ensemble predictions.
    pub confusion: Vec<Vec<usize>>,
}

/// Scores every cloud with both branches and their ensemble.
pub fn evaluate(state: &ModelState, clouds: &[PointCloud], seed: u64) -> Result<EvalReport> {
    let c = state.config.classes;
    if clouds.is_empty() {
        return Err(invalid("evaluation split is empty"));
    }
    let mut confusion = vec![vec![0usize; c]; c];
    let (mut ok_p, mut ok_i, mut ok_e) = (0usize, 0usize, 0usize);
    for cloud in clouds {
        let y = cloud
            .label
            .ok_or_else(|| invalid(format!("sample {} has no label", cloud.id)))?;
        if y >= c {
            return Err(invalid(format!("sample {}: label {y} outside {c} classes", cloud.id)));
        }
        let (p, i) = predict_logits(state, cloud, inference_seed(seed, &cloud.id))?;
        let e = argmax(&ensemble_logits(&p, &i)?);
        ok_p += usize::from(argmax(&p) == y);
        ok_i += usize::from(argmax(&i) == y);
        ok_e += usize::from(e == y);
        confusion[y][e] += 1;
    }
    let n = clouds.len() as f64;
    let per_class = confusion
        .iter()
        .enumerate()
        .map(|(k, row)| {
            let total: usize = row.iter().sum();
            (total > 0).then(|| row[k] as f64 / total as f64)
        })
        .collect();
    Ok(EvalReport {
        samples: clouds.len(),
        ensemble_accuracy: ok_e as f64 / n,
        point_accuracy: ok_p as f64 / n,
        image_accuracy: ok_i as f64 / n,
        per_class,
        confusion,
    })
}

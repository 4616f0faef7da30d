//! Cross-modal distillation losses, the teacher/student phase schedule and
//! the joint training step.

use serde::{Deserialize, Serialize};

use crate::autograd::{log_softmax_rows, Var};
use crate::encoder::ModelState;
use crate::error::{invalid, Error, Result};
use crate::geometry::{PatchSet, PointCloud};
use crate::optim::Adam;
use crate::params::{Group, Session};
use crate::projection::{render_depth_views, ImagePatchGrid};
use crate::reconstruct::{local_target, make_mask_plan, recon_loss_var, MaskPlan};
use crate::rng;

fn check_finite(xs: &[f64], what: &str) -> Result<()> {
    if xs.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("non-finite {what}")))
    }
}

/// `KL(softmax(student) ‖ softmax(teacher))`.
pub fn kd_loss(student_logits: &[f64], teacher_logits: &[f64]) -> Result<f64> {
    if student_logits.len() != teacher_logits.len() || student_logits.is_empty() {
        return Err(invalid("kd_loss: logit widths differ"));
    }
    check_finite(student_logits, "student logits")?;
    check_finite(teacher_logits, "teacher logits")?;
    let c = student_logits.len();
    let ls = log_softmax_rows(student_logits, c);
    let lt = log_softmax_rows(teacher_logits, c);
    Ok(ls.iter().zip(&lt).map(|(s, t)| s.exp() * (s - t)).sum::<f64>().max(0.0))
}

/// Mean of [`kd_loss`] over a batch of logit pairs.
pub fn kd_loss_batch(student: &[Vec<f64>], teacher: &[Vec<f64>]) -> Result<f64> {
    if student.len() != teacher.len() || student.is_empty() {
        return Err(invalid("kd_loss_batch: batch sizes differ or are zero"));
    }
    let mut total = 0.0;
    for (s, t) in student.iter().zip(teacher) {
        total += kd_loss(s, t)?;
    }
    Ok(total / student.len() as f64)
}

/// Cross-entropy against a (optionally smoothed) one-hot target.
pub fn cross_entropy(logits: &[f64], label: usize, smoothing: f64) -> Result<f64> {
    let c = logits.len();
    if label >= c {
        return Err(invalid(format!("label {label} outside [0, {c})")));
    }
    check_finite(logits, "logits")?;
    let lp = log_softmax_rows(logits, c);
    Ok(lp
        .iter()
        .enumerate()
        .map(|(j, l)| -smoothed_target(j, label, c, smoothing) * l)
        .sum())
}

fn smoothed_target(j: usize, label: usize, c: usize, smoothing: f64) -> f64 {
    let base = smoothing / c as f64;
    if j == label {
        1.0 - smoothing + base
    } else {
        base
    }
}

/// `−log(p^P_y · p^I_y)`; the two branch cross-entropies summed.
pub fn supervised_cls_loss(point_logits: &[f64], image_logits: &[f64], label: usize, smoothing: f64) -> Result<f64> {
    if point_logits.len() != image_logits.len() {
        return Err(invalid("supervised_cls_loss: logit widths differ"));
    }
    Ok(cross_entropy(point_logits, label, smoothing)? + cross_entropy(image_logits, label, smoothing)?)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct PhasePlan {
    pub epoch: usize,
    pub teacher_trainable: bool,
    pub student_trainable: bool,
    pub decoder_trainable: bool,
}

impl PhasePlan {
    /// Whether `group` may change this step under `state`'s freeze policy.
    pub fn allows(&self, state: &ModelState, group: Group) -> bool {
        !state.is_frozen(group) && (self.teacher_trainable || !group.is_teacher())
    }

    /// Plan with everything unfrozen trainable.
    pub fn joint(epoch: usize) -> Self {
        Self {
            epoch,
            teacher_trainable: true,
            student_trainable: true,
            decoder_trainable: true,
        }
    }
}

/// Teacher and student update together when `epoch % 10 < 5`, otherwise
/// only the student side moves.
pub fn schedule_phase(epoch: usize) -> PhasePlan {
    PhasePlan {
        teacher_trainable: epoch % 10 < 5,
        ..PhasePlan::joint(epoch)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LossWeights {
    pub alpha: f64,
    pub beta: f64,
    pub eta: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            beta: 1.0,
            eta: 1.0,
        }
    }
}

/// Which loss terms a step uses. Turning off `kd` and `recon` and
/// skipping the target batch gives the source-only baseline.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StepOptions {
    pub kd: bool,
    pub recon: bool,
    pub label_smoothing: f64,
}

impl Default for StepOptions {
    fn default() -> Self {
        Self {
            kd: true,
            recon: true,
            label_smoothing: 0.0,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossReport {
    pub kd: f64,
    pub emd: f64,
    pub cls_source: f64,
    pub cls_target: f64,
    pub total: f64,
}

impl LossReport {
    pub fn combine(kd: f64, emd: f64, cls_source: f64, cls_target: f64, w: &LossWeights) -> Self {
        Self {
            kd,
            emd,
            cls_source,
            cls_target,
            total: kd + w.alpha * emd + w.beta * cls_source + w.eta * cls_target,
        }
    }

    pub fn is_finite(&self) -> bool {
        [self.kd, self.emd, self.cls_source, self.cls_target, self.total]
            .iter()
            .all(|v| v.is_finite())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Domain {
    Source,
    Target,
}

/// Everything one sample contributes to a step, computed up front.
#[derive(Clone, Debug)]
pub struct PreparedSample {
    pub id: String,
    pub domain: Domain,
    /// Ground-truth label for source samples, pseudo-label for target samples.
    pub label: Option<usize>,
    pub patches: PatchSet,
    pub grids: Vec<ImagePatchGrid>,
    pub mask: MaskPlan,
}

/// Patchifies, renders and draws a mask plan for an already normalized,
/// fixed-size cloud.
pub fn prepare_sample(state: &ModelState, cloud: &PointCloud, domain: Domain, label: Option<usize>, seed: u64) -> Result<PreparedSample> {
    let cfg = &state.config;
    let patches = state.patchify(cloud, rng::derive_seed(seed, &[rng::tag("patchify")]))?;
    let views = render_depth_views(cloud, &cfg.image.poses()?, cfg.image.render_settings())?;
    let grids = state.image_grids(&views)?;
    let mask = make_mask_plan(
        cfg.point.n_patches,
        cfg.image.tokens_per_view() * cfg.image.views.len(),
        cfg.decoder.mask_ratio,
        cfg.decoder.drop_ratio,
        rng::derive_seed(seed, &[rng::tag("mask")]),
    )?;
    Ok(PreparedSample {
        id: cloud.id.clone(),
        domain,
        label,
        patches,
        grids,
        mask,
    })
}

/// Graph handles of each loss term for one sample. Terms that do not
/// apply (no label, reconstruction off) are `None`.
pub struct SampleTerms {
    pub kd: Option<Var>,
    pub emd: Option<Var>,
    pub cls_point: Option<Var>,
    pub cls_image: Option<Var>,
    pub point_logits: Var,
    pub image_logits: Var,
}

fn kd_var(s: &mut Session, student: Var, teacher: Var) -> Var {
    let ls = s.g.log_softmax(student);
    let lt = s.g.log_softmax(teacher);
    let p = s.g.exp(ls);
    let d = s.g.sub(ls, lt);
    let m = s.g.mul(p, d);
    s.g.sum(m)
}

fn ce_var(s: &mut Session, logits: Var, label: usize, smoothing: f64) -> Result<Var> {
    let c = s.g.value(logits).len();
    if label >= c {
        return Err(invalid(format!("label {label} outside [0, {c})")));
    }
    let lp = s.g.log_softmax(logits);
    let w = (0..c).map(|j| -smoothed_target(j, label, c, smoothing)).collect();
    let m = s.g.mul_const(lp, w);
    Ok(s.g.sum(m))
}

/// Builds every loss term for one sample. When `teacher_trainable` is
/// false the image logits enter the KD and image cross-entropy terms as
/// constants, so the teacher side receives no gradient from them.
pub fn sample_terms(
    s: &mut Session,
    state: &ModelState,
    sample: &PreparedSample,
    teacher_trainable: bool,
    opts: &StepOptions,
) -> Result<SampleTerms> {
    let point = state.point_pass(s, &sample.patches)?;
    let image = state.image_pass(s, &sample.grids)?;
    let teacher = if teacher_trainable {
        image.logits
    } else {
        s.g.detach(image.logits)
    };
    let kd = opts.kd.then(|| kd_var(s, point.logits, teacher));
    let (cls_point, cls_image) = match sample.label {
        Some(y) => (
            Some(ce_var(s, point.logits, y, opts.label_smoothing)?),
            Some(ce_var(s, teacher, y, opts.label_smoothing)?),
        ),
        None => (None, None),
    };
    let emd = if opts.recon {
        Some(emd_term(s, state, sample, &point.tokens[0], &image.tokens)?)
    } else {
        None
    };
    Ok(SampleTerms {
        kd,
        emd,
        cls_point,
        cls_image,
        point_logits: point.logits,
        image_logits: image.logits,
    })
}

fn emd_term(s: &mut Session, state: &ModelState, sample: &PreparedSample, point_z: &Var, view_z: &[Var]) -> Result<Var> {
    let n_i = state.config.image.tokens_per_view();
    let n_p = sample.patches.n_patches();
    let rows: Vec<usize> = (1..=n_p).collect();
    let point_tokens = s.g.gather_rows(*point_z, &rows);
    let all = s.g.concat_rows(view_z);
    let kept: Vec<usize> = sample
        .mask
        .kept_image_indices
        .iter()
        .map(|&i| (i / n_i) * (n_i + 1) + 1 + i % n_i)
        .collect();
    let image_tokens = s.g.gather_rows(all, &kept);
    let pred = state
        .layout
        .decoder
        .forward(s, &sample.mask, point_tokens, image_tokens, &sample.patches.centroids)?;
    let targets: Vec<_> = sample
        .mask
        .masked_indices
        .iter()
        .map(|&j| local_target(&sample.patches.neighborhoods[j], sample.patches.centroids[j]))
        .collect();
    Ok(recon_loss_var(s, pred, &targets)?.0)
}

/// Summed per-parameter gradients.
pub type GradBuffer = Vec<Option<Vec<f64>>>;

fn accumulate(into: &mut GradBuffer, from: GradBuffer) {
    for (a, b) in into.iter_mut().zip(from) {
        match (a.as_mut(), b) {
            (Some(a), Some(b)) => a.iter_mut().zip(&b).for_each(|(x, y)| *x += y),
            (None, Some(b)) => *a = Some(b),
            _ => {}
        }
    }
}

/// Losses and gradients for a batch without touching parameters.
///
/// Per-sample terms are normalized so that the total is
/// `mean(kd) + α·mean(emd) + β·mean_src(cls) + η·mean_pseudo(cls)`, where
/// KD and EMD average over every sample, source cross-entropy over the
/// labeled source samples and target cross-entropy over the pseudo-labeled
/// target samples (zero when there are none).
pub fn batch_gradients(
    state: &ModelState,
    batch: &[PreparedSample],
    plan: &PhasePlan,
    weights: &LossWeights,
    opts: &StepOptions,
    dropout_seed: u64,
) -> Result<(LossReport, GradBuffer)> {
    if batch.is_empty() {
        return Err(invalid("empty batch"));
    }
    let n_all = batch.len() as f64;
    let count = |d: Domain| batch.iter().filter(|b| b.domain == d && b.label.is_some()).count();
    let (n_src, n_pl) = (count(Domain::Source), count(Domain::Target));
    let mut grads: GradBuffer = vec![None; state.store.len()];
    let (mut kd, mut emd, mut cls_s, mut cls_t) = (0.0, 0.0, 0.0, 0.0);
    for (i, sample) in batch.iter().enumerate() {
        let drop_rng = rng::stream(dropout_seed, &[rng::tag("dropout"), i as u64]);
        let mut s = Session::new(&state.store, |g| plan.allows(state, g)).with_dropout(drop_rng);
        let t = sample_terms(&mut s, state, sample, plan.teacher_trainable, opts)?;
        let mut parts: Vec<Var> = Vec::new();
        if let Some(v) = t.kd {
            kd += s.g.value(v).item() / n_all;
            parts.push(s.g.scale(v, 1.0 / n_all));
        }
        if let Some(v) = t.emd {
            emd += s.g.value(v).item() / n_all;
            parts.push(s.g.scale(v, weights.alpha / n_all));
        }
        if let (Some(p), Some(q)) = (t.cls_point, t.cls_image) {
            let c = s.g.add(p, q);
            let (n, w) = match sample.domain {
                Domain::Source => (n_src as f64, weights.beta),
                Domain::Target => (n_pl as f64, weights.eta),
            };
            let v = s.g.value(c).item() / n;
            match sample.domain {
                Domain::Source => cls_s += v,
                Domain::Target => cls_t += v,
            }
            parts.push(s.g.scale(c, w / n));
        }
        if parts.is_empty() {
            continue;
        }
        let loss = parts[1..].iter().fold(parts[0], |acc, &p| s.g.add(acc, p));
        if !s.g.value(loss).item().is_finite() {
            return Err(Error::Numeric(format!("non-finite loss on sample {}", sample.id)));
        }
        let g = s.g.backward(loss);
        accumulate(&mut grads, s.param_grads(&g));
    }
    let report = LossReport::combine(kd, emd, cls_s, cls_t, weights);
    if !report.is_finite() {
        return Err(Error::Numeric(format!("non-finite loss report {report:?}")));
    }
    for g in grads.iter().flatten() {
        check_finite(g, "gradient")?;
    }
    Ok((report, grads))
}

/// One optimizer step on a combined batch.
#[allow(clippy::too_many_arguments)]
pub fn train_step(
    state: &mut ModelState,
    adam: &mut Adam,
    batch: &[PreparedSample],
    plan: &PhasePlan,
    weights: &LossWeights,
    opts: &StepOptions,
    lr: f64,
    dropout_seed: u64,
) -> Result<LossReport> {
    let (report, grads) = batch_gradients(state, batch, plan, weights, opts, dropout_seed)?;
    let allowed: Vec<(Group, bool)> = state.store.groups().into_iter().map(|g| (g, plan.allows(state, g))).collect();
    adam.step(&mut state.store, &grads, lr, |g| {
        allowed.iter().any(|&(h, ok)| h == g && ok)
    });
    Ok(report)
}

/// Stage-1 step: labeled source samples plus unlabeled target samples.
#[allow(clippy::too_many_arguments)]
pub fn train_step_stage1(
    state: &mut ModelState,
    adam: &mut Adam,
    source: &[PreparedSample],
    target: &[PreparedSample],
    plan: &PhasePlan,
    weights: &LossWeights,
    opts: &StepOptions,
    lr: f64,
    dropout_seed: u64,
) -> Result<LossReport> {
    if source.iter().any(|s| s.label.is_none() || s.domain != Domain::Source) {
        return Err(invalid("stage-1 source batch must be labeled source samples"));
    }
    let mut batch: Vec<PreparedSample> = source.to_vec();
    batch.extend(target.iter().cloned().map(|mut t| {
        t.label = None;
        t.domain = Domain::Target;
        t
    }));
    train_step(state, adam, &batch, plan, weights, opts, lr, dropout_seed)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn kd_examples() {
        assert_eq!(kd_loss(&[0.3, -1.0, 2.0], &[0.3, -1.0, 2.0]).unwrap(), 0.0);
        let v = kd_loss(&[0.0, 0.0], &[3f64.ln(), 0.0]).unwrap();
        let expect = 0.5 * (2.0f64 / 3.0).ln() + 0.5 * 2f64.ln();
        assert!((v - expect).abs() < 1e-12);
        assert!((v - 0.14384).abs() < 1e-5);
        assert!(kd_loss(&[f64::NAN, 0.0], &[0.0, 0.0]).is_err());
    }

    #[test]
    fn supervised_examples() {
        let v = supervised_cls_loss(&[0.0, 0.0], &[0.0, 0.0], 1, 0.0).unwrap();
        assert!((v - 4f64.ln()).abs() < 1e-12);
        assert!(supervised_cls_loss(&[800.0, 0.0], &[900.0, 0.0], 0, 0.0).unwrap() < 1e-300);
        let a = supervised_cls_loss(&[1.0, 2.0, 0.5], &[0.0, -1.0, 3.0], 2, 0.3).unwrap();
        let b = supervised_cls_loss(&[0.0, -1.0, 3.0], &[1.0, 2.0, 0.5], 2, 0.3).unwrap();
        assert_eq!(a, b);
        assert!(supervised_cls_loss(&[0.0, 0.0], &[0.0, 0.0], 2, 0.0).is_err());
    }

    #[test]
    fn schedule_examples() {
        assert!(schedule_phase(3).teacher_trainable);
        assert!(!schedule_phase(7).teacher_trainable);
        assert!(schedule_phase(12).teacher_trainable);
        for e in 0..40 {
            let p = schedule_phase(e);
            assert!(p.student_trainable && p.decoder_trainable);
        }
    }

    #[test]
    fn report_total_uses_weights() {
        let w = LossWeights {
            alpha: 2.0,
            beta: 0.5,
            eta: 3.0,
        };
        let r = LossReport::combine(1.0, 1.0, 2.0, 0.25, &w);
        assert_eq!(r.total, 1.0 + 2.0 + 1.0 + 0.75);
    }
}

//! Two-stage training driver: the alternating distillation stage followed
//! by self-paced self-training, with per-epoch checkpoints and a JSONL log.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::distill::{prepare_sample, schedule_phase, train_step, Domain, LossReport, PhasePlan, PreparedSample, StepOptions};
use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::geometry::{augment, resample, PointCloud};
use crate::optim::{warmup_cosine_lr, Adam};
use crate::pipeline::checkpoint::{Checkpoint, Progress};
use crate::pipeline::config::RunConfig;
use crate::pipeline::data::{load_dataset, shuffled_order, DatasetManifest};
use crate::rng::{derive_seed, tag};
use crate::selftrain::{generate_pseudo_labels, spst_plan, threshold_for_round, PseudoLabelTable};

/// One line of the training log.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRecord {
    pub kind: &'static str,
    pub stage: u8,
    pub epoch: usize,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub step: Option<usize>,
    pub phase: &'static str,
    pub kd: f64,
    pub emd: f64,
    pub cls_s: f64,
    pub cls_t: f64,
    pub total: f64,
    pub lr: f64,
    pub theta: Option<f64>,
    pub pseudo_count: usize,
    pub round: Option<usize>,
}

/// Clouds used by a run, already resampled and normalized.
#[derive(Clone, Debug)]
pub struct TrainData {
    pub source: Vec<PointCloud>,
    /// Unlabeled target training clouds (labels, if any, are ignored).
    pub target: Vec<PointCloud>,
}

impl TrainData {
    pub fn load(run: &RunConfig, source: &DatasetManifest, target: &DatasetManifest) -> Result<Self> {
        if !source.is_labeled() {
            return Err(Error::InvalidArgument("source manifest must be fully labeled".into()));
        }
        if source.classes.len() != run.model.classes {
            return Err(Error::Config(format!(
                "source manifest has {} classes, model expects {}",
                source.classes.len(),
                run.model.classes
            )));
        }
        let n = run.model.point.n_points;
        let source = load_dataset(source, n, run.seed)?;
        let mut target = load_dataset(target, n, run.seed)?;
        for t in target.iter_mut() {
            t.label = None;
        }
        Ok(Self { source, target })
    }
}

/// Output locations of a run directory.
#[derive(Clone, Debug)]
pub struct RunPaths {
    pub dir: PathBuf,
}

impl RunPaths {
    pub fn new(dir: &Path) -> Self {
        Self { dir: dir.to_path_buf() }
    }
    pub fn log(&self) -> PathBuf {
        self.dir.join("log.jsonl")
    }
    pub fn last(&self) -> PathBuf {
        self.dir.join("last.ckpt")
    }
    pub fn stage1(&self) -> PathBuf {
        self.dir.join("stage1.ckpt")
    }
    pub fn round(&self, r: usize) -> PathBuf {
        self.dir.join(format!("spst_round_{r}.ckpt"))
    }
    pub fn pseudo_labels(&self, r: usize) -> PathBuf {
        self.dir.join(format!("pseudo_labels_round_{r}.jsonl"))
    }
    pub fn final_ckpt(&self) -> PathBuf {
        self.dir.join("final.ckpt")
    }
}

struct Logger {
    out: BufWriter<File>,
}

impl Logger {
    fn open(path: &Path, append: bool) -> Result<Self> {
        let f = OpenOptions::new()
            .create(true)
            .write(true)
            .append(append)
            .truncate(!append)
            .open(path)?;
        Ok(Self { out: BufWriter::new(f) })
    }
    fn write(&mut self, rec: &LogRecord) -> Result<()> {
        let line = serde_json::to_string(rec).map_err(|e| Error::Format(e.to_string()))?;
        writeln!(self.out, "{line}")?;
        self.out.flush()?;
        Ok(())
    }
}

/// Mutable state of a run in progress.
pub struct Trainer {
    pub run: RunConfig,
    pub state: ModelState,
    pub adam: Adam,
    pub progress: Progress,
    paths: RunPaths,
    logger: Logger,
}

#[derive(Default)]
struct EpochMeans {
    sum: LossReport,
    steps: usize,
}

impl EpochMeans {
    fn add(&mut self, r: &LossReport) {
        self.sum.kd += r.kd;
        self.sum.emd += r.emd;
        self.sum.cls_source += r.cls_source;
        self.sum.cls_target += r.cls_target;
        self.sum.total += r.total;
        self.steps += 1;
    }
    fn mean(&self) -> LossReport {
        let n = self.steps.max(1) as f64;
        LossReport {
            kd: self.sum.kd / n,
            emd: self.sum.emd / n,
            cls_source: self.sum.cls_source / n,
            cls_target: self.sum.cls_target / n,
            total: self.sum.total / n,
        }
    }
}

impl Trainer {
    /// Starts a fresh run writing into `dir`.
    pub fn new(run: RunConfig, dir: &Path) -> Result<Self> {
        run.validate()?;
        fs::create_dir_all(dir)?;
        let state = ModelState::new(run.model.clone(), run.seed)?;
        let adam = Adam::new(run.train.optimizer.clone(), &state.store);
        let paths = RunPaths::new(dir);
        let logger = Logger::open(&paths.log(), false)?;
        Ok(Self {
            run,
            state,
            adam,
            progress: Progress::start(),
            paths,
            logger,
        })
    }

    /// Continues a run from a checkpoint, appending to the log in `dir`.
    pub fn resume(ckpt: Checkpoint, dir: &Path) -> Result<Self> {
        fs::create_dir_all(dir)?;
        let paths = RunPaths::new(dir);
        let logger = Logger::open(&paths.log(), true)?;
        Ok(Self {
            run: ckpt.run,
            state: ckpt.state,
            adam: ckpt.adam,
            progress: ckpt.progress,
            paths,
            logger,
        })
    }

    pub fn paths(&self) -> &RunPaths {
        &self.paths
    }

    fn checkpoint(&self) -> Checkpoint {
        Checkpoint {
            run: self.run.clone(),
            state: self.state.clone(),
            adam: self.adam.clone(),
            progress: self.progress.clone(),
        }
    }

    fn save(&self, path: &Path) -> Result<()> {
        self.checkpoint().save(path)
    }

    /// Augments, resamples and prepares one training sample.
    fn prepare(&self, cloud: &PointCloud, domain: Domain, label: Option<usize>, seed: u64) -> Result<PreparedSample> {
        let spec = self.run.train.augment_spec(derive_seed(seed, &[tag("augment")]))?;
        let mut c = augment(cloud, &spec)?;
        let n = self.run.model.point.n_points;
        if c.len() != n {
            c = resample(&c, n, derive_seed(seed, &[tag("refill")]))?;
        }
        prepare_sample(&self.state, &c, domain, label, seed)
    }

    #[allow(clippy::too_many_arguments)]
    fn run_epoch(
        &mut self,
        data: &TrainData,
        stage: u8,
        epoch: usize,
        plan: &PhasePlan,
        opts: &StepOptions,
        lr: f64,
        pseudo: Option<&PseudoLabelTable>,
        use_target: bool,
    ) -> Result<LossReport> {
        let seed = self.run.seed;
        let b = self.run.train.batch_size;
        let stage_tag = stage as u64;
        let src_order = shuffled_order(data.source.len(), seed, &[tag("order"), stage_tag, epoch as u64, tag("source")]);
        let tgt_order = shuffled_order(data.target.len(), seed, &[tag("order"), stage_tag, epoch as u64, tag("target")]);
        let steps = data.source.len().div_ceil(b);
        let mut means = EpochMeans::default();
        for step in 0..steps {
            let step_seed = derive_seed(seed, &[tag("step"), stage_tag, epoch as u64, step as u64]);
            let mut batch = Vec::with_capacity(2 * b);
            for (j, &i) in src_order[step * b..((step + 1) * b).min(src_order.len())].iter().enumerate() {
                let c = &data.source[i];
                let s = derive_seed(step_seed, &[tag("source"), j as u64]);
                batch.push(self.prepare(c, Domain::Source, c.label, s)?);
            }
            if use_target && !data.target.is_empty() {
                for j in 0..b {
                    let c = &data.target[tgt_order[(step * b + j) % tgt_order.len()]];
                    let label = pseudo.and_then(|t| t.label(&c.id));
                    let s = derive_seed(step_seed, &[tag("target"), j as u64]);
                    batch.push(self.prepare(c, Domain::Target, label, s)?);
                }
            }
            let report = train_step(
                &mut self.state,
                &mut self.adam,
                &batch,
                plan,
                &self.run.weights,
                opts,
                lr,
                derive_seed(step_seed, &[tag("dropout")]),
            )?;
            means.add(&report);
            if self.run.train.log_steps {
                let rec = self.record("step", stage, epoch, Some(step), plan, &report, lr, pseudo);
                self.logger.write(&rec)?;
            }
        }
        Ok(means.mean())
    }

    #[allow(clippy::too_many_arguments)]
    fn record(
        &self,
        kind: &'static str,
        stage: u8,
        epoch: usize,
        step: Option<usize>,
        plan: &PhasePlan,
        r: &LossReport,
        lr: f64,
        pseudo: Option<&PseudoLabelTable>,
    ) -> LogRecord {
        let phase = match (stage, plan.teacher_trainable) {
            (2, _) => "spst",
            (_, true) => "joint",
            (_, false) => "student",
        };
        LogRecord {
            kind,
            stage,
            epoch,
            step,
            phase,
            kd: r.kd,
            emd: r.emd,
            cls_s: r.cls_source,
            cls_t: r.cls_target,
            total: r.total,
            lr,
            theta: pseudo.map(|t| t.theta),
            pseudo_count: pseudo.map_or(0, |t| t.len()),
            round: pseudo.map(|t| t.round),
        }
    }

    /// Runs the next stage-1 epoch; returns its mean losses, or `None`
    /// once stage 1 is complete (finalizing it on the first such call).
    pub fn stage1_epoch(&mut self, data: &TrainData) -> Result<Option<LossReport>> {
        if self.progress.stage != 1 {
            return Ok(None);
        }
        let total = self.run.train.epochs;
        if self.progress.epoch >= total {
            self.progress = Progress {
                stage: 2,
                epoch: 0,
                round: None,
                pseudo_labels: None,
            };
            self.save(&self.paths.stage1())?;
            self.save(&self.paths.last())?;
            return Ok(None);
        }
        let opts = self.run.train.step_options();
        let epoch = self.progress.epoch + 1;
        let plan = schedule_phase(epoch);
        let t = &self.run.train;
        let lr = warmup_cosine_lr(t.optimizer.lr, t.min_lr, epoch, total, t.warmup_epochs.min(total.saturating_sub(1)));
        let report = self.run_epoch(data, 1, epoch, &plan, &opts, lr, None, self.run.train.use_target)?;
        let rec = self.record("epoch", 1, epoch, None, &plan, &report, lr, None);
        self.logger.write(&rec)?;
        log::info!(
            "stage 1 epoch {epoch}/{total}: total {:.4} kd {:.4} emd {:.4} cls {:.4}",
            report.total,
            report.kd,
            report.emd,
            report.cls_source
        );
        self.progress.epoch = epoch;
        self.save(&self.paths.last())?;
        Ok(Some(report))
    }

    /// Runs the remaining stage-1 epochs.
    pub fn stage1(&mut self, data: &TrainData) -> Result<()> {
        while self.stage1_epoch(data)?.is_some() {}
        Ok(())
    }

    /// Runs the remaining self-training rounds.
    pub fn stage2(&mut self, data: &TrainData) -> Result<()> {
        let spst = self.run.spst.clone();
        let per = spst.epochs_per_round;
        let total = spst.rounds * per;
        let mut opts = self.run.train.step_options();
        if !spst.keep_auxiliary_losses {
            opts.kd = false;
            opts.recon = false;
        }
        while self.progress.stage == 2 && self.progress.epoch < total {
            let epoch = self.progress.epoch + 1;
            let round = (epoch - 1) / per;
            if self.progress.round != Some(round) || self.progress.pseudo_labels.is_none() {
                let theta = threshold_for_round(round, &spst)?;
                let table = generate_pseudo_labels(&data.target, &self.state, theta, round, self.run.seed)?;
                if table.is_empty() {
                    log::warn!("round {round}: no target sample exceeds theta {theta}; training on source terms only");
                }
                table.write_jsonl(&self.paths.pseudo_labels(round))?;
                self.progress.round = Some(round);
                self.progress.pseudo_labels = Some(table);
            }
            let table = self.progress.pseudo_labels.clone();
            let plan = spst_plan(epoch);
            let t = &self.run.train;
            let lr = warmup_cosine_lr(t.optimizer.lr, t.min_lr, epoch, total, t.warmup_epochs.min(total.saturating_sub(1)));
            let report = self.run_epoch(data, 2, epoch, &plan, &opts, lr, table.as_ref(), true)?;
            let rec = self.record("epoch", 2, epoch, None, &plan, &report, lr, table.as_ref());
            self.logger.write(&rec)?;
            log::info!(
                "stage 2 epoch {epoch}/{total} (round {round}, {} pseudo-labels): total {:.4}",
                table.as_ref().map_or(0, |t| t.len()),
                report.total
            );
            self.progress.epoch = epoch;
            self.save(&self.paths.last())?;
            if epoch % per == 0 {
                self.save(&self.paths.round(round))?;
            }
        }
        self.progress.stage = 3;
        self.save(&self.paths.final_ckpt())?;
        self.save(&self.paths.last())?;
        Ok(())
    }

    /// Runs whatever remains of both stages; returns the final checkpoint path.
    pub fn run(&mut self, data: &TrainData) -> Result<PathBuf> {
        self.stage1(data)?;
        self.stage2(data)?;
        Ok(self.paths.final_ckpt())
    }
}

/// Full two-stage training from manifests.
pub fn run_training(run: &RunConfig, source: &DatasetManifest, target: &DatasetManifest, dir: &Path) -> Result<PathBuf> {
    let data = TrainData::load(run, source, target)?;
    Trainer::new(run.clone(), dir)?.run(&data)
}

/// Self-training alone, from a finished stage-1 checkpoint.
pub fn run_spst(stage1: Checkpoint, data: &TrainData, dir: &Path) -> Result<ModelState> {
    let mut ck = stage1;
    if ck.progress.stage == 1 {
        ck.progress = Progress {
            stage: 2,
            epoch: 0,
            round: None,
            pseudo_labels: None,
        };
    }
    let mut t = Trainer::resume(ck, dir)?;
    t.stage2(data)?;
    Ok(t.state)
}

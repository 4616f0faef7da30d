use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use rpd_core::container::{vit_name_map, Container};
use rpd_core::pipeline::checkpoint::describe;
use rpd_core::pipeline::data::read_cloud_file;
use rpd_core::pipeline::export::{export_reconstruction, export_views};
use rpd_core::pipeline::{
    evaluate, load_dataset, run_spst, write_toy_splits, Checkpoint, DatasetManifest, RunConfig, TrainData, Trainer,
};
use rpd_core::{Error, ModelState, PointCloud};

#[derive(Parser)]
#[command(name = "rpd", version, about = "Cross-modal point-cloud domain adaptation")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Write the four toy splits (clean source, jittered and holed target).
    GenToy(GenToyArgs),
    /// Run both training stages.
    Train(TrainArgs),
    /// Run self-training from a stage-1 checkpoint.
    Spst(SpstArgs),
    /// Score a checkpoint on a labeled manifest.
    Eval(EvalArgs),
    /// Render depth views (and optionally reconstructions) for inspection.
    ExportViews(ExportArgs),
    /// Summarize a checkpoint; optionally export its trunk as named tensors.
    InspectCheckpoint(InspectArgs),
}

#[derive(Args)]
struct GenToyArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: u64,
    #[arg(long, default_value_t = 40)]
    n_train: usize,
    #[arg(long, default_value_t = 20)]
    n_test: usize,
    #[arg(long, default_value_t = 5)]
    classes: usize,
}

/// Flags that map onto run configuration keys.
#[derive(Args, Default)]
struct ConfigFlags {
    /// TOML file layered over the preset defaults.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    preset: Option<String>,
    #[arg(long)]
    setting: Option<String>,
    #[arg(long)]
    epochs: Option<usize>,
    #[arg(long)]
    batch_size: Option<usize>,
    #[arg(long)]
    lr: Option<f64>,
    #[arg(long)]
    weight_decay: Option<f64>,
    #[arg(long)]
    label_smoothing: Option<f64>,
    #[arg(long)]
    augment: Option<String>,
    #[arg(long)]
    rounds: Option<usize>,
    #[arg(long)]
    epochs_per_round: Option<usize>,
    /// Any other key, e.g. `--set weights.alpha=0.5`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    set: Vec<String>,
}

impl ConfigFlags {
    fn overrides(&self, seed: Option<u64>) -> Result<Vec<(String, String)>, Error> {
        let mut o = Vec::new();
        let mut put = |k: &str, v: Option<String>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let quoted = |s: &Option<String>| s.as_ref().map(|s| format!("{s:?}"));
        put("preset", quoted(&self.preset));
        put("setting", quoted(&self.setting));
        put("seed", seed.map(|s| s.to_string()));
        put("train.epochs", self.epochs.map(|v| v.to_string()));
        put("train.batch_size", self.batch_size.map(|v| v.to_string()));
        put("train.optimizer.lr", self.lr.map(float));
        put("train.optimizer.weight_decay", self.weight_decay.map(float));
        put("train.label_smoothing", self.label_smoothing.map(float));
        put("train.augment", quoted(&self.augment));
        put("spst.rounds", self.rounds.map(|v| v.to_string()));
        put("spst.epochs_per_round", self.epochs_per_round.map(|v| v.to_string()));
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("--set expects KEY=VALUE, got {kv:?}")))?;
            o.push((k.trim().to_string(), v.trim().to_string()));
        }
        Ok(o)
    }

    fn load(&self, seed: Option<u64>) -> Result<RunConfig, Error> {
        let text = match &self.config {
            Some(p) => std::fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        RunConfig::from_toml_with(&text, &self.overrides(seed)?)
    }
}

fn float(v: f64) -> String {
    format!("{v:?}")
}

#[derive(Args)]
struct TrainArgs {
    #[arg(long)]
    seed: u64,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
    /// Continue from a checkpoint written by an earlier run.
    #[arg(long)]
    resume: Option<PathBuf>,
    #[command(flatten)]
    flags: ConfigFlags,
}

#[derive(Args)]
struct SpstArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    source: PathBuf,
    #[arg(long)]
    target: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    checkpoint: PathBuf,
    #[arg(long)]
    manifest: PathBuf,
    /// Write the full report as JSON here as well.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Args)]
struct ExportArgs {
    #[arg(long)]
    out: PathBuf,
    /// A single cloud file (binary point file or xyz text).
    #[arg(long, conflicts_with = "manifest")]
    cloud: Option<PathBuf>,
    /// Export the first `--limit` samples of a manifest.
    #[arg(long)]
    manifest: Option<PathBuf>,
    #[arg(long, default_value_t = 4)]
    limit: usize,
    /// Model whose view settings and decoder are used; the toy preset otherwise.
    #[arg(long)]
    checkpoint: Option<PathBuf>,
    /// Also write input / reconstruction / ground-truth xyz triples.
    #[arg(long, requires = "checkpoint")]
    reconstruct: bool,
    #[arg(long, default_value_t = 0)]
    seed: u64,
}

#[derive(Args)]
struct InspectArgs {
    checkpoint: PathBuf,
    /// Export the encoder under ViT-B/16-style names to this container.
    #[arg(long)]
    export_pretrained: Option<PathBuf>,
    /// Write the name map used by `--export-pretrained` here.
    #[arg(long)]
    name_map: Option<PathBuf>,
}

fn exit_code(e: &Error) -> u8 {
    match e {
        Error::Config(_) | Error::InvalidArgument(_) => 2,
        Error::Ingestion { .. } | Error::Load(_) | Error::Format(_) | Error::Io(_) => 3,
        Error::Numeric(_) | Error::DegenerateInput(_) => 4,
    }
}

fn print_json(v: &serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(v).expect("json value serializes"));
}

fn gen_toy(a: GenToyArgs) -> Result<(), Error> {
    let s = write_toy_splits(&a.out, a.n_train, a.n_test, a.classes, a.seed)?;
    print_json(&serde_json::json!({
        "source_train": s.source_train,
        "source_test": s.source_test,
        "target_train": s.target_train,
        "target_test": s.target_test,
    }));
    Ok(())
}

fn train(a: TrainArgs) -> Result<(), Error> {
    let source = DatasetManifest::read(&a.source)?;
    let target = DatasetManifest::read(&a.target)?;
    let mut trainer = match &a.resume {
        Some(path) => {
            let ck = Checkpoint::load(path)?;
            if ck.run.seed != a.seed {
                return Err(Error::Config(format!(
                    "--seed {} differs from the checkpoint seed {}",
                    a.seed, ck.run.seed
                )));
            }
            Trainer::resume(ck, &a.out)?
        }
        None => Trainer::new(a.flags.load(Some(a.seed))?, &a.out)?,
    };
    let data = TrainData::load(&trainer.run, &source, &target)?;
    let out = trainer.run(&data)?;
    println!("{}", out.display());
    Ok(())
}

fn spst(a: SpstArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let data = TrainData::load(&ck.run, &DatasetManifest::read(&a.source)?, &DatasetManifest::read(&a.target)?)?;
    run_spst(ck, &data, &a.out)?;
    println!("{}", a.out.join("final.ckpt").display());
    Ok(())
}

fn eval(a: EvalArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    let manifest = DatasetManifest::read(&a.manifest)?;
    if !manifest.is_labeled() {
        return Err(Error::InvalidArgument(format!("{} is not fully labeled", a.manifest.display())));
    }
    let clouds = load_dataset(&manifest, ck.run.model.point.n_points, ck.run.seed)?;
    let report = evaluate(&ck.state, &clouds, ck.run.seed)?;
    let v = serde_json::to_value(&report).expect("report serializes");
    if let Some(p) = &a.json {
        std::fs::write(p, serde_json::to_string_pretty(&v).expect("json value serializes"))?;
    }
    print_json(&v);
    Ok(())
}

fn export(a: ExportArgs) -> Result<(), Error> {
    let (state, n) = match &a.checkpoint {
        Some(p) => {
            let ck = Checkpoint::load(p)?;
            let n = ck.run.model.point.n_points;
            (ck.state, n)
        }
        None => {
            let run = RunConfig::from_toml("")?;
            (ModelState::new(run.model.clone(), a.seed)?, run.model.point.n_points)
        }
    };
    let clouds: Vec<PointCloud> = match (&a.cloud, &a.manifest) {
        (Some(path), _) => {
            let c = PointCloud::new(stem(path), read_cloud_file(path)?, None);
            let c = rpd_core::geometry::resample(&c, n, a.seed)?;
            vec![rpd_core::geometry::normalize_unit_sphere(&c)?]
        }
        (None, Some(m)) => {
            let mut all = load_dataset(&DatasetManifest::read(m)?, n, a.seed)?;
            all.truncate(a.limit);
            all
        }
        (None, None) => return Err(Error::Config("give --cloud or --manifest".into())),
    };
    for c in &clouds {
        let id = c.id.replace(['/', '\\'], "_");
        for p in export_views(&state, c, &a.out, &id)? {
            println!("{}", p.display());
        }
        if a.reconstruct {
            let f = export_reconstruction(&state, c, a.seed, &a.out, &id)?;
            for p in [f.input, f.reconstruction, f.ground_truth] {
                println!("{}", p.display());
            }
        }
    }
    Ok(())
}

fn stem(p: &Path) -> String {
    p.file_stem().map_or_else(|| "cloud".into(), |s| s.to_string_lossy().into_owned())
}

fn inspect(a: InspectArgs) -> Result<(), Error> {
    let ck = Checkpoint::load(&a.checkpoint)?;
    print_json(&describe(&ck));
    let map = vit_name_map(ck.run.model.encoder.depth);
    if let Some(p) = &a.name_map {
        std::fs::write(p, map.to_text())?;
    }
    if let Some(p) = &a.export_pretrained {
        Container::export_pretrained(&ck.state, &map)?.write(p)?;
    }
    Ok(())
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let cli = Cli::parse();
    let result = match cli.command {
        Command::GenToy(a) => gen_toy(a),
        Command::Train(a) => train(a),
        Command::Spst(a) => spst(a),
        Command::Eval(a) => eval(a),
        Command::ExportViews(a) => export(a),
        Command::InspectCheckpoint(a) => inspect(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            log::error!("{e}");
            ExitCode::from(exit_code(&e))
        }
    }
}

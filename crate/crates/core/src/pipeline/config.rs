//! Run configuration: model dimensions, loss weights, optimizer and
//! schedule settings. Loaded from TOML, where every key overrides the
//! defaults of the chosen preset.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::config::ModelConfig;
use crate::distill::{LossWeights, StepOptions};
use crate::error::{Error, Result};
use crate::geometry::AugmentSpec;
use crate::optim::AdamConfig;
use crate::selftrain::SPSTConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Preset {
    Paper,
    Toy,
    Tiny,
}

impl Preset {
    pub fn model(self) -> ModelConfig {
        match self {
            Preset::Paper => ModelConfig::paper(),
            Preset::Toy => ModelConfig::toy(),
            Preset::Tiny => ModelConfig::tiny(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainConfig {
    /// Stage-1 epochs.
    pub epochs: usize,
    /// Samples drawn from each domain per step.
    pub batch_size: usize,
    pub optimizer: AdamConfig,
    pub min_lr: f64,
    /// Epochs of linear learning-rate ramp before each stage's cosine,
    /// capped at one less than the stage length.
    #[serde(default)]
    pub warmup_epochs: usize,
    pub label_smoothing: f64,
    /// Augmentation letters (`R`, `J`, `D`) applied to training clouds of both domains.
    pub augment: String,
    pub jitter_sigma: f64,
    pub drop_fraction: f64,
    pub kd: bool,
    pub recon: bool,
    /// When false, stage 1 sees source data only.
    pub use_target: bool,
    /// Also log one record per optimizer step.
    pub log_steps: bool,
}

impl TrainConfig {
    pub fn step_options(&self) -> StepOptions {
        StepOptions {
            kd: self.kd,
            recon: self.recon,
            label_smoothing: self.label_smoothing,
        }
    }

    pub fn augment_spec(&self, seed: u64) -> Result<AugmentSpec> {
        let mut spec = AugmentSpec::from_letters(&self.augment, self.jitter_sigma, self.drop_fraction)?;
        spec.seed = seed;
        Ok(spec)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub preset: Preset,
    /// Adaptation setting label, e.g. `M->S`.
    pub setting: String,
    pub seed: u64,
    pub model: ModelConfig,
    pub weights: LossWeights,
    pub train: TrainConfig,
    pub spst: SPSTConfig,
}

impl RunConfig {
    pub fn preset(preset: Preset) -> Self {
        let model = preset.model();
        let (epochs, batch, lr, wd) = match preset {
            Preset::Paper => (200, 32, 1e-4, 5e-5),
            Preset::Toy => (30, 8, 1e-3, 5e-5),
            Preset::Tiny => (2, 2, 1e-3, 0.0),
        };
        let spst = match preset {
            Preset::Paper => SPSTConfig::default(),
            Preset::Toy => SPSTConfig {
                rounds: 2,
                epochs_per_round: 5,
                ..SPSTConfig::default()
            },
            Preset::Tiny => SPSTConfig {
                rounds: 2,
                epochs_per_round: 1,
                ..SPSTConfig::default()
            },
        };
        Self {
            preset,
            setting: "toy".into(),
            seed: 0,
            model,
            weights: LossWeights::default(),
            train: TrainConfig {
                epochs,
                batch_size: batch,
                optimizer: AdamConfig {
                    lr,
                    weight_decay: wd,
                    ..AdamConfig::default()
                },
                min_lr: 0.0,
                warmup_epochs: if preset == Preset::Toy { 3 } else { 0 },
                label_smoothing: 0.0,
                augment: "R".into(),
                jitter_sigma: 0.01,
                drop_fraction: 0.2,
                kd: true,
                recon: true,
                use_target: true,
                log_steps: false,
            },
            spst,
        }
    }

    /// Parses TOML, layering it over the defaults of its `preset` key
    /// (`toy` when absent).
    pub fn from_toml(text: &str) -> Result<Self> {
        Self::from_toml_with(text, &[])
    }

    /// Like [`from_toml`](Self::from_toml), then applies dotted-key
    /// overrides such as `("train.epochs", "5")`. Values are parsed as TOML
    /// and fall back to a plain string.
    pub fn from_toml_with(text: &str, overrides: &[(String, String)]) -> Result<Self> {
        let mut user: toml::Table = text.parse().map_err(|e| Error::Config(format!("{e}")))?;
        for (k, v) in overrides {
            set_dotted(&mut user, k, v)?;
        }
        let preset = match user.get("preset") {
            None => Preset::Toy,
            Some(v) => v
                .clone()
                .try_into()
                .map_err(|e| Error::Config(format!("preset: {e}")))?,
        };
        let base = toml::Table::try_from(Self::preset(preset)).map_err(|e| Error::Config(e.to_string()))?;
        let merged = merge(base, user);
        let cfg: Self = merged.try_into().map_err(|e| Error::Config(format!("{e}")))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("run config serializes")
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let mut problems = Vec::new();
        let w = &self.weights;
        if !(w.alpha >= 0.0 && w.beta >= 0.0 && w.eta >= 0.0) {
            problems.push("loss weights must be non-negative".to_string());
        }
        let t = &self.train;
        if t.batch_size == 0 {
            problems.push("batch_size must be positive".into());
        }
        if !(t.optimizer.lr > 0.0) || t.min_lr < 0.0 || t.min_lr > t.optimizer.lr {
            problems.push("need 0 <= min_lr <= lr and lr > 0".into());
        }
        if !(0.0..1.0).contains(&t.label_smoothing) {
            problems.push("label_smoothing must lie in [0, 1)".into());
        }
        if let Err(e) = t.augment_spec(0).and_then(|s| s.validate()) {
            problems.push(e.to_string());
        }
        if let Err(e) = self.spst.validate() {
            problems.push(e.to_string());
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }
}

fn set_dotted(table: &mut toml::Table, key: &str, raw: &str) -> Result<()> {
    let value = format!("v = {raw}")
        .parse::<toml::Table>()
        .ok()
        .and_then(|mut t| t.remove("v"))
        .unwrap_or_else(|| toml::Value::String(raw.to_string()));
    let parts: Vec<&str> = key.split('.').collect();
    if parts.iter().any(|p| p.is_empty()) {
        return Err(Error::Config(format!("malformed override key {key:?}")));
    }
    let mut t = table;
    for p in &parts[..parts.len() - 1] {
        let entry = t
            .entry(p.to_string())
            .or_insert_with(|| toml::Value::Table(toml::Table::new()));
        t = match entry {
            toml::Value::Table(inner) => inner,
            _ => return Err(Error::Config(format!("override {key:?}: {p} is not a table"))),
        };
    }
    t.insert(parts[parts.len() - 1].to_string(), value);
    Ok(())
}

fn merge(mut base: toml::Table, over: toml::Table) -> toml::Table {
    for (k, v) in over {
        match (base.get_mut(&k), v) {
            (Some(toml::Value::Table(b)), toml::Value::Table(o)) => {
                let merged = merge(std::mem::take(b), o);
                *b = merged;
            }
            (_, v) => {
                base.insert(k, v);
            }
        }
    }
    base
}

//! Checkpoints: parameters, optimizer moments and run progress in one
//! tensor container.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::container::{Container, DType};
use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::optim::Adam;
use crate::pipeline::config::RunConfig;
use crate::selftrain::PseudoLabelTable;
use crate::tensor::Tensor;

pub const FORMAT: &str = "rpd-checkpoint-1";

/// Where a run stands. `epoch` counts completed epochs within `stage`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Progress {
    pub stage: u8,
    pub epoch: usize,
    /// Current self-training round and its pseudo-label table.
    pub round: Option<usize>,
    pub pseudo_labels: Option<PseudoLabelTable>,
}

impl Progress {
    pub fn start() -> Self {
        Self {
            stage: 1,
            epoch: 0,
            round: None,
            pseudo_labels: None,
        }
    }
}

#[derive(Clone, Debug)]
pub struct Checkpoint {
    pub run: RunConfig,
    pub state: ModelState,
    pub adam: Adam,
    pub progress: Progress,
}

#[derive(Serialize, Deserialize)]
struct Meta {
    format: String,
    run: RunConfig,
    progress: Progress,
    adam_steps: Vec<u64>,
    param_checksum: String,
}

impl Checkpoint {
    pub fn to_container(&self) -> Container {
        let mut c = Container::default();
        let meta = Meta {
            format: FORMAT.into(),
            run: self.run.clone(),
            progress: self.progress.clone(),
            adam_steps: self.adam.steps.clone(),
            param_checksum: self.state.store.checksum(),
        };
        c.metadata = serde_json::to_value(meta).expect("metadata serializes");
        for (id, p) in self.state.store.iter() {
            let i = id.index();
            c.insert_typed(&p.name, p.value.clone(), DType::F64);
            let shape = p.value.shape.clone();
            c.insert_typed(&format!("adam.m/{}", p.name), Tensor::new(shape.clone(), self.adam.m[i].clone()), DType::F64);
            c.insert_typed(&format!("adam.v/{}", p.name), Tensor::new(shape, self.adam.v[i].clone()), DType::F64);
        }
        c
    }

    pub fn from_container(c: &Container) -> Result<Self> {
        let meta: Meta = serde_json::from_value(c.metadata.clone())
            .map_err(|e| Error::Format(format!("checkpoint metadata: {e}")))?;
        if meta.format != FORMAT {
            return Err(Error::Format(format!("unsupported checkpoint format {}", meta.format)));
        }
        let mut state = ModelState::new(meta.run.model.clone(), meta.run.seed)?;
        let mut adam = Adam::new(meta.run.train.optimizer.clone(), &state.store);
        if meta.adam_steps.len() != state.store.len() {
            return Err(Error::Format("optimizer step table does not match parameter count".into()));
        }
        adam.steps = meta.adam_steps.clone();
        let mut problems = Vec::new();
        let ids: Vec<_> = state.store.ids().collect();
        for id in ids {
            let name = state.store.param(id).name.clone();
            let shape = state.store.get(id).shape.clone();
            let fetch = |key: &str, problems: &mut Vec<String>| match c.get(key) {
                Some(t) if t.shape == shape => Some(t.clone()),
                Some(t) => {
                    problems.push(format!("{key}: shape {:?}, expected {:?}", t.shape, shape));
                    None
                }
                None => {
                    problems.push(format!("{key}: missing"));
                    None
                }
            };
            if let Some(t) = fetch(&name, &mut problems) {
                *state.store.get_mut(id) = t;
            }
            if let Some(t) = fetch(&format!("adam.m/{name}"), &mut problems) {
                adam.m[id.index()] = t.data;
            }
            if let Some(t) = fetch(&format!("adam.v/{name}"), &mut problems) {
                adam.v[id.index()] = t.data;
            }
        }
        if !problems.is_empty() {
            return Err(Error::Load(problems));
        }
        if state.store.checksum() != meta.param_checksum {
            return Err(Error::Format("parameter checksum mismatch".into()));
        }
        Ok(Self {
            run: meta.run,
            state,
            adam,
            progress: meta.progress,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        self.to_container().write(path)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_container(&Container::read(path)?)
    }
}

/// Human-readable summary used by `inspect-checkpoint`.
pub fn describe(ckpt: &Checkpoint) -> serde_json::Value {
    let store = &ckpt.state.store;
    let groups: Vec<serde_json::Value> = store
        .groups()
        .into_iter()
        .map(|g| {
            let scalars: usize = store.iter().filter(|(_, p)| p.group == g).map(|(_, p)| p.value.len()).sum();
            serde_json::json!({
                "group": g.to_string(),
                "frozen": ckpt.state.is_frozen(g),
                "scalars": scalars,
                "checksum": store.group_checksum(g),
            })
        })
        .collect();
    serde_json::json!({
        "format": FORMAT,
        "preset": ckpt.run.preset,
        "setting": ckpt.run.setting,
        "seed": ckpt.run.seed,
        "progress": {
            "stage": ckpt.progress.stage,
            "epoch": ckpt.progress.epoch,
            "round": ckpt.progress.round,
            "pseudo_labels": ckpt.progress.pseudo_labels.as_ref().map(|t| t.len()),
        },
        "parameters": store.len(),
        "scalars": store.scalar_count(),
        "checksum": store.checksum(),
        "groups": groups,
    })
}

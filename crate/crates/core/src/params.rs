//! Named parameter storage, parameter groups, and graph binding.

use std::collections::HashMap;
use std::fmt;

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::autograd::{Gradients, Graph, Var};
use crate::tensor::Tensor;

/// Unit of freezing, scheduling and checksumming.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub enum Group {
    ImageTokenizer,
    PointTokenizer,
    EncoderBlock(usize),
    TokenProjection,
    ProjHeadImage,
    ProjHeadPoint,
    ClassifierImage,
    ClassifierPoint,
    Decoder,
    MaskEmbeddings,
}

impl Group {
    /// Groups owned by the image (teacher) branch for phase scheduling.
    pub fn is_teacher(self) -> bool {
        matches!(self, Group::ProjHeadImage | Group::ClassifierImage)
    }
}

impl fmt::Display for Group {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Group::ImageTokenizer => write!(f, "image_tokenizer"),
            Group::PointTokenizer => write!(f, "point_tokenizer"),
            Group::EncoderBlock(i) => write!(f, "encoder_block_{i}"),
            Group::TokenProjection => write!(f, "token_projection"),
            Group::ProjHeadImage => write!(f, "proj_head_image"),
            Group::ProjHeadPoint => write!(f, "proj_head_point"),
            Group::ClassifierImage => write!(f, "classifier_image"),
            Group::ClassifierPoint => write!(f, "classifier_point"),
            Group::Decoder => write!(f, "decoder"),
            Group::MaskEmbeddings => write!(f, "mask_embeddings"),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: Group,
    pub value: Tensor,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, group: Group, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.index.contains_key(&name), "duplicate parameter {name}");
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Param { name, group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.index.get(name).copied().map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Distinct groups in first-appearance order.
    pub fn groups(&self) -> Vec<Group> {
        let mut out: Vec<Group> = Vec::new();
        for p in &self.params {
            if !out.contains(&p.group) {
                out.push(p.group);
            }
        }
        out
    }

    pub fn scalar_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over names, shapes and exact bit patterns of a group.
    pub fn group_checksum(&self, group: Group) -> String {
        let mut h = Sha256::new();
        for p in self.params.iter().filter(|p| p.group == group) {
            hash_param(&mut h, p);
        }
        hex::encode(h.finalize())
    }

    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            hash_param(&mut h, p);
        }
        hex::encode(h.finalize())
    }
}

fn hash_param(h: &mut Sha256, p: &Param) {
    h.update(p.name.as_bytes());
    for d in &p.value.shape {
        h.update((*d as u64).to_le_bytes());
    }
    for v in &p.value.data {
        h.update(v.to_bits().to_le_bytes());
    }
}

/// Truncated normal (re-drawn outside two standard deviations).
pub fn trunc_normal(rng: &mut ChaCha8Rng, shape: &[usize], std: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = StandardNormal.sample(rng);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data)
}

/// Uniform on `[-bound, bound]`.
pub fn uniform(rng: &mut ChaCha8Rng, shape: &[usize], bound: f64) -> Tensor {
    let n = shape.iter().product();
    let data = (0..n).map(|_| rng.random_range(-bound..=bound)).collect();
    Tensor::new(shape.to_vec(), data)
}

/// A forward/backward session: a fresh graph plus lazily bound parameters.
///
/// Parameters whose group is trainable in this session become gradient
/// leaves; all others enter the graph as constants.
pub struct Session<'a> {
    pub g: Graph,
    store: &'a ParamStore,
    trainable: Vec<bool>,
    bound: Vec<Option<Var>>,
    dropout: Option<ChaCha8Rng>,
}

impl<'a> Session<'a> {
    pub fn new(store: &'a ParamStore, trainable: impl Fn(Group) -> bool) -> Self {
        let trainable = store.params.iter().map(|p| trainable(p.group)).collect();
        Self {
            g: Graph::new(),
            store,
            trainable,
            bound: vec![None; store.len()],
            dropout: None,
        }
    }

    /// Inference session: nothing trainable, dropout off.
    pub fn inference(store: &'a ParamStore) -> Self {
        Self::new(store, |_| false)
    }

    /// Enables dropout driven by the given stream.
    pub fn with_dropout(mut self, rng: ChaCha8Rng) -> Self {
        self.dropout = Some(rng);
        self
    }

    pub fn store(&self) -> &ParamStore {
        self.store
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.0] {
            return v;
        }
        let v = self
            .g
            .leaf(self.store.get(id).clone(), self.trainable[id.0]);
        self.bound[id.0] = Some(v);
        v
    }

    /// Inverted dropout; identity when dropout is disabled or `rate == 0`.
    pub fn dropout(&mut self, x: Var, rate: f64) -> Var {
        let Some(rng) = self.dropout.as_mut() else {
            return x;
        };
        if rate <= 0.0 {
            return x;
        }
        let keep = 1.0 / (1.0 - rate);
        let n = self.g.value(x).len();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < rate { 0.0 } else { keep })
            .collect();
        self.g.mul_const(x, mask)
    }

    /// Per-parameter gradients of the bound trainable leaves.
    pub fn param_grads(&self, grads: &Gradients) -> Vec<Option<Vec<f64>>> {
        self.bound
            .iter()
            .map(|b| b.and_then(|v| grads.get(v)).map(<[f64]>::to_vec))
            .collect()
    }
}

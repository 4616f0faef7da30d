//! Parameterized building blocks shared by the tokenizers, trunk, heads
//! and decoder.

use rand_chacha::ChaCha8Rng;

use crate::autograd::Var;
use crate::params::{uniform, Group, ParamId, ParamStore, Session};
use crate::tensor::Tensor;

pub const INIT_STD: f64 = 0.02;
pub const LN_EPS: f64 = 1e-6;

#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

/// Weight initialization schemes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Init {
    /// Glorot uniform, as in masked-autoencoder ViTs.
    Xavier,
    /// He uniform (bound `sqrt(6 / fan_in)`), for freshly attached heads.
    FanIn,
}

impl Linear {
    /// Weight `[fan_in, fan_out]`, Glorot init; zero bias.
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, fan_in: usize, fan_out: usize) -> Self {
        Self::with_init(store, rng, name, group, fan_in, fan_out, Init::Xavier)
    }

    pub fn with_init(
        store: &mut ParamStore,
        rng: &mut ChaCha8Rng,
        name: &str,
        group: Group,
        fan_in: usize,
        fan_out: usize,
        init: Init,
    ) -> Self {
        let shape = [fan_in, fan_out];
        let w = match init {
            Init::FanIn => uniform(rng, &shape, (6.0 / fan_in as f64).sqrt()),
            Init::Xavier => uniform(rng, &shape, (6.0 / (fan_in + fan_out) as f64).sqrt()),
        };
        Self {
            w: store.add(format!("{name}.weight"), group, w),
            b: store.add(format!("{name}.bias"), group, Tensor::zeros(&[fan_out])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let (w, b) = (s.p(self.w), s.p(self.b));
        s.g.linear(x, w, b)
    }
}

#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gamma: ParamId,
    pub beta: ParamId,
}

impl LayerNorm {
    pub fn new(store: &mut ParamStore, name: &str, group: Group, width: usize) -> Self {
        Self {
            gamma: store.add(format!("{name}.weight"), group, Tensor::full(&[width], 1.0)),
            beta: store.add(format!("{name}.bias"), group, Tensor::zeros(&[width])),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let (g, b) = (s.p(self.gamma), s.p(self.beta));
        s.g.layer_norm(x, g, b, LN_EPS)
    }
}

/// Three fully connected layers, GELU and dropout after both hidden layers.
#[derive(Clone, Debug)]
pub struct Mlp3 {
    pub layers: [Linear; 3],
}

impl Mlp3 {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, dims: [usize; 4]) -> Self {
        Self {
            layers: [
                Linear::with_init(store, rng, &format!("{name}.fc1"), group, dims[0], dims[1], Init::FanIn),
                Linear::with_init(store, rng, &format!("{name}.fc2"), group, dims[1], dims[2], Init::FanIn),
                Linear::with_init(store, rng, &format!("{name}.fc3"), group, dims[2], dims[3], Init::FanIn),
            ],
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, dropout: f64) -> Var {
        let mut h = x;
        for (i, layer) in self.layers.iter().enumerate() {
            h = layer.forward(s, h);
            if i < 2 {
                h = s.g.gelu(h);
                h = s.dropout(h, dropout);
            }
        }
        h
    }
}

/// Self-attention with fused `qkv` projection and an output projection.
#[derive(Clone, Debug)]
pub struct SelfAttention {
    pub qkv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl SelfAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, width: usize, heads: usize) -> Self {
        Self {
            qkv: Linear::new(store, rng, &format!("{name}.qkv"), group, width, 3 * width),
            proj: Linear::new(store, rng, &format!("{name}.proj"), group, width, width),
            heads,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let width = s.g.value(x).cols();
        let qkv = self.qkv.forward(s, x);
        let q = s.g.slice_cols(qkv, 0, width);
        let k = s.g.slice_cols(qkv, width, width);
        let v = s.g.slice_cols(qkv, 2 * width, width);
        let a = s.g.attention(q, k, v, self.heads);
        self.proj.forward(s, a)
    }
}

/// Queries from one sequence attending to keys/values of another.
#[derive(Clone, Debug)]
pub struct CrossAttention {
    pub q: Linear,
    pub kv: Linear,
    pub proj: Linear,
    pub heads: usize,
}

impl CrossAttention {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, width: usize, heads: usize) -> Self {
        Self {
            q: Linear::new(store, rng, &format!("{name}.q"), group, width, width),
            kv: Linear::new(store, rng, &format!("{name}.kv"), group, width, 2 * width),
            proj: Linear::new(store, rng, &format!("{name}.proj"), group, width, width),
            heads,
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var, context: Var) -> Var {
        let width = s.g.value(x).cols();
        let q = self.q.forward(s, x);
        let kv = self.kv.forward(s, context);
        let k = s.g.slice_cols(kv, 0, width);
        let v = s.g.slice_cols(kv, width, width);
        let a = s.g.attention(q, k, v, self.heads);
        self.proj.forward(s, a)
    }
}

/// Pre-norm transformer block: `x += MSA(LN(x)); x += MLP(LN(x))`.
#[derive(Clone, Debug)]
pub struct Block {
    pub norm1: LayerNorm,
    pub attn: SelfAttention,
    pub norm2: LayerNorm,
    pub fc1: Linear,
    pub fc2: Linear,
}

impl Block {
    pub fn new(store: &mut ParamStore, rng: &mut ChaCha8Rng, name: &str, group: Group, width: usize, heads: usize, mlp_ratio: usize) -> Self {
        Self {
            norm1: LayerNorm::new(store, &format!("{name}.norm1"), group, width),
            attn: SelfAttention::new(store, rng, &format!("{name}.attn"), group, width, heads),
            norm2: LayerNorm::new(store, &format!("{name}.norm2"), group, width),
            fc1: Linear::new(store, rng, &format!("{name}.mlp.fc1"), group, width, mlp_ratio * width),
            fc2: Linear::new(store, rng, &format!("{name}.mlp.fc2"), group, mlp_ratio * width, width),
        }
    }

    pub fn forward(&self, s: &mut Session, x: Var) -> Var {
        let h = self.norm1.forward(s, x);
        let h = self.attn.forward(s, h);
        let x = s.g.add(x, h);
        let h = self.norm2.forward(s, x);
        let h = self.fc1.forward(s, h);
        let h = s.g.gelu(h);
        let h = self.fc2.forward(s, h);
        s.g.add(x, h)
    }
}

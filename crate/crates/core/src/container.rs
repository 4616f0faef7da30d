//! Named-tensor container and name-mapping tables.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! magic  "RPDTNSR1"
//! u64    metadata length, then that many bytes of UTF-8 JSON
//! u64    entry count
//! entry: u32 name length, name bytes, u32 ndim, ndim × u64 dims,
//!        u8 dtype (0 = f32, 1 = f64), payload
//! ```
//!
//! Pretrained weights use f32. Checkpoints use f64 so that a save/load
//! round trip is bit-exact.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use crate::encoder::ModelState;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"RPDTNSR1";

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum DType {
    F32,
    F64,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Entry {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Container {
    pub metadata: serde_json::Value,
    pub entries: Vec<Entry>,
}

impl Default for Container {
    fn default() -> Self {
        Self {
            metadata: serde_json::Value::Object(Default::default()),
            entries: Vec::new(),
        }
    }
}

fn fmt_err(msg: impl Into<String>) -> Error {
    Error::Format(msg.into())
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(fmt_err(format!("truncated container at byte {}", self.pos)));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }
    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| fmt_err("length overflow"))
    }
}

impl Container {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.iter().find(|e| e.name == name).map(|e| &e.tensor)
    }

    /// Inserts or replaces an f32 entry.
    pub fn insert(&mut self, name: &str, tensor: Tensor) {
        self.insert_typed(name, tensor, DType::F32);
    }

    pub fn insert_typed(&mut self, name: &str, tensor: Tensor, dtype: DType) {
        let entry = Entry {
            name: name.to_string(),
            dtype,
            tensor,
        };
        match self.entries.iter_mut().find(|e| e.name == name) {
            Some(e) => *e = entry,
            None => self.entries.push(entry),
        }
    }

    pub fn remove(&mut self, name: &str) -> Option<Tensor> {
        let i = self.entries.iter().position(|e| e.name == name)?;
        Some(self.entries.remove(i).tensor)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        let meta = serde_json::to_vec(&self.metadata).expect("metadata serializes");
        out.extend_from_slice(&(meta.len() as u64).to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&(self.entries.len() as u64).to_le_bytes());
        for e in &self.entries {
            out.extend_from_slice(&(e.name.len() as u32).to_le_bytes());
            out.extend_from_slice(e.name.as_bytes());
            out.extend_from_slice(&(e.tensor.shape.len() as u32).to_le_bytes());
            for d in &e.tensor.shape {
                out.extend_from_slice(&(*d as u64).to_le_bytes());
            }
            match e.dtype {
                DType::F32 => {
                    out.push(0);
                    for v in &e.tensor.data {
                        out.extend_from_slice(&(*v as f32).to_le_bytes());
                    }
                }
                DType::F64 => {
                    out.push(1);
                    for v in &e.tensor.data {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
            }
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if r.take(8)? != MAGIC {
            return Err(fmt_err("not a tensor container (bad magic)"));
        }
        let meta_len = r.len()?;
        let metadata = serde_json::from_slice(r.take(meta_len)?)
            .map_err(|e| fmt_err(format!("container metadata: {e}")))?;
        let count = r.len()?;
        let mut entries = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let n = r.u32()? as usize;
            let name = String::from_utf8(r.take(n)?.to_vec()).map_err(|_| fmt_err("entry name is not UTF-8"))?;
            let ndim = r.u32()? as usize;
            let shape = (0..ndim).map(|_| r.len()).collect::<Result<Vec<_>>>()?;
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &d| a.checked_mul(d))
                .ok_or_else(|| fmt_err(format!("{name}: shape overflow")))?;
            let dtype = match r.take(1)?[0] {
                0 => DType::F32,
                1 => DType::F64,
                other => return Err(fmt_err(format!("{name}: unknown dtype {other}"))),
            };
            let width = if dtype == DType::F32 { 4 } else { 8 };
            let bytes = r.take(numel.checked_mul(width).ok_or_else(|| fmt_err("payload overflow"))?)?;
            let data = match dtype {
                DType::F32 => bytes
                    .chunks_exact(4)
                    .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64)
                    .collect(),
                DType::F64 => bytes
                    .chunks_exact(8)
                    .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                    .collect(),
            };
            entries.push(Entry {
                name,
                dtype,
                tensor: Tensor::new(shape, data),
            });
        }
        if r.pos != buf.len() {
            return Err(fmt_err("trailing bytes after last entry"));
        }
        Ok(Self { metadata, entries })
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let tmp = path.with_extension("partial");
        let mut f = fs::File::create(&tmp)?;
        f.write_all(&self.to_bytes())?;
        f.sync_all()?;
        fs::rename(&tmp, path)?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let mut buf = Vec::new();
        fs::File::open(path)?.read_to_end(&mut buf)?;
        Self::from_bytes(&buf)
    }

    /// Writes the mapped parameters of `state` under their canonical names
    /// and shapes, as f32.
    pub fn export_pretrained(state: &ModelState, map: &NameMap) -> Result<Self> {
        let mut c = Container::default();
        let e = &state.config.encoder;
        let im = &state.config.image;
        for entry in &map.entries {
            let id = state
                .store
                .id(&entry.internal)
                .ok_or_else(|| Error::Load(vec![format!("no model parameter named {}", entry.internal)]))?;
            let t = state.store.get(id);
            let t = match entry.transform {
                Transform::Copy => t.clone(),
                Transform::Transpose => t.transpose(),
            };
            let shape = match entry.canonical.as_str() {
                "cls_token" => vec![1, 1, e.width],
                "pos_embed" => vec![1, im.tokens_per_view() + 1, e.width],
                "patch_embed.proj.weight" => vec![e.width, im.channels, im.patch_size, im.patch_size],
                _ => t.shape.clone(),
            };
            c.insert(&entry.canonical, t.reshaped(shape));
        }
        Ok(c)
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Transform {
    /// Same element order; reshaped to the model's shape.
    Copy,
    /// Source is `[out, in...]` (flattened to 2-D); model stores `[in, out]`.
    Transpose,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct NameMapEntry {
    pub canonical: String,
    pub internal: String,
    pub transform: Transform,
}

/// Plain-text table: one `canonical internal transform` triple per line,
/// `#` starts a comment.
#[derive(Clone, Debug, Default, PartialEq, Eq)]
pub struct NameMap {
    pub entries: Vec<NameMapEntry>,
}

impl NameMap {
    pub fn parse(text: &str) -> Result<Self> {
        let mut entries = Vec::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split_whitespace().collect();
            let [canonical, internal, transform] = cols[..] else {
                return Err(fmt_err(format!("name map line {}: expected 3 columns, got {}", n + 1, cols.len())));
            };
            let transform = match transform {
                "copy" => Transform::Copy,
                "transpose" => Transform::Transpose,
                other => return Err(fmt_err(format!("name map line {}: unknown transform {other}", n + 1))),
            };
            entries.push(NameMapEntry {
                canonical: canonical.into(),
                internal: internal.into(),
                transform,
            });
        }
        Ok(Self { entries })
    }

    pub fn read(path: &Path) -> Result<Self> {
        Self::parse(&fs::read_to_string(path)?)
    }

    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for e in &self.entries {
            let t = match e.transform {
                Transform::Copy => "copy",
                Transform::Transpose => "transpose",
            };
            s.push_str(&format!("{} {} {}\n", e.canonical, e.internal, t));
        }
        s
    }
}

/// Name map for a timm-style ViT with `depth` blocks.
pub fn vit_name_map(depth: usize) -> NameMap {
    let mut entries = Vec::new();
    let mut push = |c: String, i: String, t: Transform| {
        entries.push(NameMapEntry {
            canonical: c,
            internal: i,
            transform: t,
        })
    };
    use Transform::{Copy, Transpose};
    push("cls_token".into(), "image_tokenizer.cls_token".into(), Copy);
    push("pos_embed".into(), "image_tokenizer.pos_embed".into(), Copy);
    push("patch_embed.proj.weight".into(), "image_tokenizer.patch_embed.weight".into(), Transpose);
    push("patch_embed.proj.bias".into(), "image_tokenizer.patch_embed.bias".into(), Copy);
    for b in 0..depth {
        let (c, i) = (format!("blocks.{b}"), format!("encoder.blocks.{b}"));
        for ln in ["norm1", "norm2"] {
            push(format!("{c}.{ln}.weight"), format!("{i}.{ln}.weight"), Copy);
            push(format!("{c}.{ln}.bias"), format!("{i}.{ln}.bias"), Copy);
        }
        for lin in ["attn.qkv", "attn.proj", "mlp.fc1", "mlp.fc2"] {
            push(format!("{c}.{lin}.weight"), format!("{i}.{lin}.weight"), Transpose);
            push(format!("{c}.{lin}.bias"), format!("{i}.{lin}.bias"), Copy);
        }
    }
    push("norm.weight".into(), "token_projection.norm.weight".into(), Copy);
    push("norm.bias".into(), "token_projection.norm.bias".into(), Copy);
    NameMap { entries }
}

/// The shipped ViT-B/16 table.
pub const VIT_B16_NAME_MAP: &str = include_str!("../assets/vit_b16_name_map.txt");

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::ModelConfig;

    #[test]
    fn shipped_map_matches_generator() {
        assert_eq!(NameMap::parse(VIT_B16_NAME_MAP).unwrap(), vit_name_map(12));
        assert_eq!(vit_name_map(12).entries.len(), 4 + 12 * 12 + 2);
    }

    #[test]
    fn bytes_round_trip() {
        let mut c = Container::default();
        c.metadata = serde_json::json!({"epoch": 3});
        c.insert_typed("a", Tensor::new(vec![2, 2], vec![0.1, -2.0, 3.5, 1e-300]), DType::F64);
        c.insert("b", Tensor::new(vec![3], vec![0.5, 0.25, -1.0]));
        let back = Container::from_bytes(&c.to_bytes()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn truncated_or_bad_magic_rejected() {
        let mut c = Container::default();
        c.insert("x", Tensor::zeros(&[4]));
        let bytes = c.to_bytes();
        assert!(Container::from_bytes(&bytes[..bytes.len() - 1]).is_err());
        let mut bad = bytes.clone();
        bad[0] = b'X';
        assert!(Container::from_bytes(&bad).is_err());
    }

    #[test]
    fn pretrained_export_then_load_is_identity() {
        let cfg = ModelConfig::tiny();
        let mut state = ModelState::new(cfg.clone(), 0).unwrap();
        // Parameters exactly representable in f32, so the f32 round trip is exact.
        for id in state.store.ids().collect::<Vec<_>>() {
            for v in state.store.get_mut(id).data.iter_mut() {
                *v = *v as f32 as f64;
            }
        }
        let before = state.store.checksum();
        let map = vit_name_map(cfg.encoder.depth);
        let c = Container::export_pretrained(&state, &map).unwrap();
        assert_eq!(c.get("patch_embed.proj.weight").unwrap().shape, vec![8, 3, 8, 8]);
        let c = Container::from_bytes(&c.to_bytes()).unwrap();
        state.load_pretrained(&c, &map).unwrap();
        assert_eq!(state.store.checksum(), before);
    }

    #[test]
    fn load_changes_only_mapped_parameters() {
        let cfg = ModelConfig::tiny();
        let mut a = ModelState::new(cfg.clone(), 0).unwrap();
        let b = ModelState::new(cfg.clone(), 1).unwrap();
        let map = vit_name_map(cfg.encoder.depth);
        let c = Container::export_pretrained(&b, &map).unwrap();
        let point_before = a.store.group_checksum(crate::params::Group::PointTokenizer);
        a.load_pretrained(&c, &map).unwrap();
        let id = a.store.id("encoder.blocks.1.attn.qkv.weight").unwrap();
        let idb = b.store.id("encoder.blocks.1.attn.qkv.weight").unwrap();
        assert!(a.store.get(id).max_abs_diff(b.store.get(idb)) < 1e-6);
        assert_eq!(a.store.group_checksum(crate::params::Group::PointTokenizer), point_before);
    }

    #[test]
    fn width_disagreement_is_shape_error() {
        let small = ModelState::new(ModelConfig::tiny(), 0).unwrap();
        let map = vit_name_map(2);
        let c = Container::export_pretrained(&small, &map).unwrap();
        let mut cfg = ModelConfig::tiny();
        cfg.encoder.width = 12;
        let mut other = ModelState::new(cfg, 0).unwrap();
        let err = other.load_pretrained(&c, &map).unwrap_err().to_string();
        assert!(err.contains("shape mismatch"), "{err}");
    }
}

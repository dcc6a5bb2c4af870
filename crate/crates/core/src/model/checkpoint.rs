//! Binary checkpoint files.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic        8 bytes  "NDXCKPT\0"
//! version      u32
//! meta_len     u64
//! meta         meta_len bytes of UTF-8 "key=value\n" lines, sorted by key
//! tensor_count u32
//! tensor_count records:
//!   name_len   u32
//!   name       name_len bytes UTF-8
//!   rank       u32
//!   dims       rank x u64
//!   data       product(dims) x f32
//! ```
//!
//! Records hold the model parameters in [`ModelGraph::parameters`] order,
//! followed by the Adam first moments (`adam.m.<name>`) and second moments
//! (`adam.v.<name>`).

use std::collections::BTreeMap;
use std::path::Path;

use super::{ModelConfig, ModelGraph, SequenceMode};
use crate::error::{Error, Result};
use crate::optim::AdamState;
use crate::tensor::{Element, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 8] = *b"NDXCKPT\0";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Run bookkeeping stored alongside the tensors.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CheckpointMeta {
    pub epoch: usize,
    pub seed: u64,
    pub class_names: Vec<String>,
    /// Free-form entries such as training hyperparameters. Keys must not
    /// collide with the reserved `model.`, `adam.`, `class.` prefixes.
    pub extra: BTreeMap<String, String>,
}

fn join(values: &[usize]) -> String {
    values.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(",")
}

fn encode_meta<F: Element>(
    model: &ModelGraph<F>,
    adam: &AdamState<F>,
    meta: &CheckpointMeta,
) -> Result<String> {
    let cfg = model.config();
    let mut kv = BTreeMap::new();
    for (k, v) in &meta.extra {
        if ["model.", "adam.", "class."].iter().any(|p| k.starts_with(p))
            || matches!(k.as_str(), "epoch" | "seed")
        {
            return Err(Error::arg(format!("metadata key {k:?} is reserved")));
        }
        kv.insert(k.clone(), v.clone());
    }
    kv.insert("epoch".into(), meta.epoch.to_string());
    kv.insert("seed".into(), meta.seed.to_string());
    kv.insert("adam.t".into(), adam.t.to_string());
    for (i, name) in meta.class_names.iter().enumerate() {
        kv.insert(format!("class.{i:03}"), name.clone());
    }
    kv.insert("model.input_shape".into(), join(&cfg.input_shape));
    kv.insert("model.num_classes".into(), cfg.num_classes.to_string());
    kv.insert("model.block_convs".into(), join(&cfg.block_convs));
    kv.insert("model.block_channels".into(), join(&cfg.block_channels));
    kv.insert("model.kernel_size".into(), cfg.kernel_size.to_string());
    kv.insert("model.lstm_hidden".into(), cfg.lstm_hidden.to_string());
    kv.insert("model.head_hidden".into(), cfg.head_hidden.to_string());
    kv.insert("model.sequence_mode".into(), cfg.sequence_mode.to_string());

    let mut text = String::new();
    for (k, v) in kv {
        if k.contains(['=', '\n']) || v.contains('\n') || k.is_empty() {
            return Err(Error::arg(format!("metadata entry {k:?} cannot be encoded")));
        }
        text.push_str(&k);
        text.push('=');
        text.push_str(&v);
        text.push('\n');
    }
    Ok(text)
}

fn push_tensor<F: Element>(out: &mut Vec<u8>, name: &str, t: &Tensor<F>) {
    out.extend_from_slice(&(name.len() as u32).to_le_bytes());
    out.extend_from_slice(name.as_bytes());
    out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
    for &d in t.shape() {
        out.extend_from_slice(&(d as u64).to_le_bytes());
    }
    for &v in t.data() {
        out.extend_from_slice(&v.as_f32().to_le_bytes());
    }
}

/// Serializes parameters, optimizer state, and metadata. Values are stored as
/// `f32`; an `f64` model is rounded on the way out.
pub fn encode_checkpoint<F: Element>(
    model: &ModelGraph<F>,
    adam: &AdamState<F>,
    meta: &CheckpointMeta,
) -> Result<Vec<u8>> {
    let params = model.parameters();
    if adam.m.len() != params.len() || adam.v.len() != params.len() {
        return Err(Error::arg("optimizer state does not match model parameters"));
    }
    let text = encode_meta(model, adam, meta)?;
    let mut out = Vec::new();
    out.extend_from_slice(&CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    out.extend_from_slice(&(text.len() as u64).to_le_bytes());
    out.extend_from_slice(text.as_bytes());
    out.extend_from_slice(&((params.len() * 3) as u32).to_le_bytes());
    for (name, t) in &params {
        push_tensor(&mut out, name, t);
    }
    for (prefix, moments) in [("adam.m.", &adam.m), ("adam.v.", &adam.v)] {
        for ((name, p), t) in params.iter().zip(moments) {
            if p.shape() != t.shape() {
                return Err(Error::dim("checkpoint moments", t.shape(), p.shape()));
            }
            push_tensor(&mut out, &format!("{prefix}{name}"), t);
        }
    }
    Ok(out)
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| Error::Format(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }

    fn len(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| Error::Format("length overflows usize".into()))
    }
}

fn parse_list(s: &str) -> Result<Vec<usize>> {
    s.split(',')
        .map(|v| {
            v.trim()
                .parse()
                .map_err(|_| Error::Format(format!("bad integer list {s:?}")))
        })
        .collect()
}

fn config_from_meta(kv: &BTreeMap<String, String>) -> Result<ModelConfig> {
    let get = |k: &str| {
        kv.get(k)
            .map(String::as_str)
            .ok_or_else(|| Error::Format(format!("metadata is missing {k}")))
    };
    let num = |k: &str| -> Result<usize> {
        get(k)?
            .parse()
            .map_err(|_| Error::Format(format!("metadata {k} is not an integer")))
    };
    let shape = parse_list(get("model.input_shape")?)?;
    let input_shape: [usize; 3] = shape
        .try_into()
        .map_err(|_| Error::Format("model.input_shape must have three entries".into()))?;
    let cfg = ModelConfig {
        input_shape,
        num_classes: num("model.num_classes")?,
        block_convs: parse_list(get("model.block_convs")?)?,
        block_channels: parse_list(get("model.block_channels")?)?,
        kernel_size: num("model.kernel_size")?,
        lstm_hidden: num("model.lstm_hidden")?,
        head_hidden: num("model.head_hidden")?,
        sequence_mode: get("model.sequence_mode")?
            .parse::<SequenceMode>()
            .map_err(|e| Error::Format(e.to_string()))?,
    };
    cfg.validate().map_err(|e| Error::Format(e.to_string()))?;
    Ok(cfg)
}

pub fn decode_checkpoint<F: Element>(
    bytes: &[u8],
) -> Result<(ModelGraph<F>, AdamState<F>, CheckpointMeta)> {
    let mut r = Reader { bytes, pos: 0 };
    if bytes.len() < CHECKPOINT_MAGIC.len() || r.take(8)? != CHECKPOINT_MAGIC {
        return Err(Error::Format("bad magic bytes".into()));
    }
    let version = r.u32()?;
    if version != CHECKPOINT_VERSION {
        return Err(Error::Version {
            found: version,
            expected: CHECKPOINT_VERSION,
        });
    }
    let meta_len = r.len()?;
    let text = std::str::from_utf8(r.take(meta_len)?)
        .map_err(|_| Error::Format("metadata is not UTF-8".into()))?;
    let mut kv = BTreeMap::new();
    for line in text.lines() {
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| Error::Format(format!("metadata line {line:?} has no '='")))?;
        kv.insert(k.to_string(), v.to_string());
    }

    let config = config_from_meta(&kv)?;
    let mut model = ModelGraph::<F>::zeros(&config)?;
    let names: Vec<String> = model.parameters().into_iter().map(|(n, _)| n).collect();
    let mut adam = AdamState::for_model(&model);

    let count = r.u32()? as usize;
    if count != names.len() * 3 {
        return Err(Error::Format(format!(
            "expected {} tensors, header says {count}",
            names.len() * 3
        )));
    }
    let mut records = BTreeMap::new();
    for _ in 0..count {
        let name_len = r.u32()? as usize;
        let name = std::str::from_utf8(r.take(name_len)?)
            .map_err(|_| Error::Format("tensor name is not UTF-8".into()))?
            .to_string();
        let rank = r.u32()? as usize;
        let mut dims = Vec::with_capacity(rank.min(8));
        for _ in 0..rank {
            dims.push(r.len()?);
        }
        let n = dims
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .and_then(|n| n.checked_mul(4).map(|_| n))
            .ok_or_else(|| Error::Format(format!("tensor {name} is too large")))?;
        let raw = r.take(n * 4)?;
        let data: Vec<F> = raw
            .chunks_exact(4)
            .map(|c| F::of_f32(f32::from_le_bytes(c.try_into().unwrap())))
            .collect();
        let t = Tensor::new(dims, data).map_err(|e| Error::Format(format!("{name}: {e}")))?;
        if records.insert(name.clone(), t).is_some() {
            return Err(Error::Format(format!("duplicate tensor {name}")));
        }
    }
    if r.pos != bytes.len() {
        return Err(Error::Format(format!(
            "{} trailing bytes after last tensor",
            bytes.len() - r.pos
        )));
    }

    let mut take = |name: &str, shape: &[usize]| -> Result<Tensor<F>> {
        let t = records
            .remove(name)
            .ok_or_else(|| Error::Format(format!("missing tensor {name}")))?;
        if t.shape() != shape {
            return Err(Error::Format(format!(
                "tensor {name} has shape {:?}, model expects {shape:?}",
                t.shape()
            )));
        }
        Ok(t)
    };
    for (slot, name) in model.parameters_mut().into_iter().zip(&names) {
        let shape = slot.shape().to_vec();
        *slot = take(name, &shape)?;
    }
    for (i, name) in names.iter().enumerate() {
        let shape = adam.m[i].shape().to_vec();
        adam.m[i] = take(&format!("adam.m.{name}"), &shape)?;
        adam.v[i] = take(&format!("adam.v.{name}"), &shape)?;
    }

    let parse_u = |k: &str| -> Result<u64> {
        kv.get(k)
            .ok_or_else(|| Error::Format(format!("metadata is missing {k}")))?
            .parse()
            .map_err(|_| Error::Format(format!("metadata {k} is not an integer")))
    };
    adam.t = parse_u("adam.t")?;
    let meta = CheckpointMeta {
        epoch: parse_u("epoch")? as usize,
        seed: parse_u("seed")?,
        class_names: kv
            .iter()
            .filter(|(k, _)| k.starts_with("class."))
            .map(|(_, v)| v.clone())
            .collect(),
        extra: kv
            .iter()
            .filter(|(k, _)| {
                !["model.", "adam.", "class."].iter().any(|p| k.starts_with(p))
                    && !matches!(k.as_str(), "epoch" | "seed")
            })
            .map(|(k, v)| (k.clone(), v.clone()))
            .collect(),
    };
    Ok((model, adam, meta))
}

pub fn save_checkpoint<F: Element>(
    path: impl AsRef<Path>,
    model: &ModelGraph<F>,
    adam: &AdamState<F>,
    meta: &CheckpointMeta,
) -> Result<()> {
    let bytes = encode_checkpoint(model, adam, meta)?;
    std::fs::write(path, bytes)?;
    Ok(())
}

pub fn load_checkpoint<F: Element>(
    path: impl AsRef<Path>,
) -> Result<(ModelGraph<F>, AdamState<F>, CheckpointMeta)> {
    decode_checkpoint(&std::fs::read(path)?)
}

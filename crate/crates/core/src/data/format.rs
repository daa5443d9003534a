//! Binary tensor container shared by checkpoints, activation dumps,
//! prototype sets and dataset exports.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic     8 bytes  "SHIPTENS"
//! version   u32      1
//! count     u32      number of tensors
//! meta_len  u32      length of the JSON metadata
//! meta      meta_len bytes of UTF-8 JSON
//! count × { rank u32, rank × dim u64, numel × f64 }
//! ```

use std::fs;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use serde_json::Value;

use crate::attributes::{PrototypeSet, PrototypeSource};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::vit::{Head, ViT, ViTConfig};

pub const MAGIC: &[u8; 8] = b"SHIPTENS";
pub const VERSION: u32 = 1;

pub fn encode(meta: &Value, tensors: &[&Tensor]) -> Result<Vec<u8>> {
    let meta = serde_json::to_vec(meta)?;
    let payload: usize = tensors.iter().map(|t| 4 + 8 * t.rank() + 8 * t.numel()).sum();
    let mut out = Vec::with_capacity(20 + meta.len() + payload);
    out.extend_from_slice(MAGIC);
    out.extend_from_slice(&VERSION.to_le_bytes());
    out.extend_from_slice(&(tensors.len() as u32).to_le_bytes());
    out.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    out.extend_from_slice(&meta);
    for t in tensors {
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    Ok(out)
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn fail(&self, detail: impl Into<String>) -> Error {
        Error::Format {
            offset: self.pos,
            detail: detail.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.fail(format!(
                "truncated {}: need {} bytes, {} left",
                what,
                n,
                self.buf.len() - self.pos
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }
}

pub fn decode(buf: &[u8]) -> Result<(Value, Vec<Tensor>)> {
    let mut r = Reader { buf, pos: 0 };
    if r.take(8, "magic")? != MAGIC {
        r.pos = 0;
        return Err(r.fail("bad magic"));
    }
    let version = r.u32("version")?;
    if version != VERSION {
        r.pos -= 4;
        return Err(r.fail(format!("unsupported version {}", version)));
    }
    let count = r.u32("tensor count")? as usize;
    let meta_len = r.u32("metadata length")? as usize;
    let meta_start = r.pos;
    let meta_bytes = r.take(meta_len, "metadata")?;
    let meta: Value = serde_json::from_slice(meta_bytes).map_err(|e| Error::Format {
        offset: meta_start,
        detail: format!("metadata is not valid JSON: {}", e),
    })?;
    let mut tensors = Vec::with_capacity(count.min(1024));
    for i in 0..count {
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            r.pos -= 4;
            return Err(r.fail(format!("tensor {} has implausible rank {}", i, rank)));
        }
        let mut shape = Vec::with_capacity(rank);
        let mut numel: usize = 1;
        for _ in 0..rank {
            let d = r.u64("dimension")?;
            let d = usize::try_from(d).map_err(|_| r.fail("dimension overflows usize"))?;
            numel = numel
                .checked_mul(d)
                .ok_or_else(|| r.fail(format!("tensor {} element count overflows", i)))?;
            shape.push(d);
        }
        let bytes = numel
            .checked_mul(8)
            .ok_or_else(|| r.fail(format!("tensor {} byte size overflows", i)))?;
        let raw = r.take(bytes, "tensor data")?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
            .collect();
        tensors.push(Tensor::new(shape, data)?);
    }
    if r.pos != buf.len() {
        return Err(r.fail(format!("{} trailing bytes", buf.len() - r.pos)));
    }
    Ok((meta, tensors))
}

pub fn write_tensors(path: &Path, meta: &Value, tensors: &[&Tensor]) -> Result<()> {
    let bytes = encode(meta, tensors)?;
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_tensors(path: &Path) -> Result<(Value, Vec<Tensor>)> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode(&bytes)
}

/// Per-layer activations of some model for a batch of samples.
#[derive(Clone, Debug, PartialEq)]
pub struct ActivationDump {
    pub model_id: String,
    /// One `[samples, tokens, d]` tensor per layer.
    pub layers: Vec<Tensor>,
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct DumpMeta {
    kind: String,
    model_id: String,
    layer_count: usize,
    d: usize,
}

impl ActivationDump {
    pub fn new(model_id: impl Into<String>, layers: Vec<Tensor>) -> Result<Self> {
        let dump = ActivationDump {
            model_id: model_id.into(),
            layers,
        };
        dump.validate()?;
        Ok(dump)
    }

    pub fn dim(&self) -> usize {
        self.layers.first().map(|t| t.shape()[2]).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let Some(first) = self.layers.first() else {
            return Err(Error::Validation("activation dump has no layers".into()));
        };
        if first.rank() != 3 {
            return Err(Error::Validation(format!(
                "layer tensors must be [samples, tokens, d], got {:?}",
                first.shape()
            )));
        }
        for (i, t) in self.layers.iter().enumerate() {
            if t.shape() != first.shape() {
                return Err(Error::Validation(format!(
                    "layer {} has shape {:?}, layer 0 has {:?}",
                    i,
                    t.shape(),
                    first.shape()
                )));
            }
        }
        Ok(())
    }
}

pub fn encode_dump(dump: &ActivationDump) -> Result<Vec<u8>> {
    dump.validate()?;
    let meta = serde_json::to_value(DumpMeta {
        kind: "activations".into(),
        model_id: dump.model_id.clone(),
        layer_count: dump.layers.len(),
        d: dump.dim(),
    })?;
    encode(&meta, &dump.layers.iter().collect::<Vec<_>>())
}

pub fn decode_dump(buf: &[u8]) -> Result<ActivationDump> {
    let (meta, layers) = decode(buf)?;
    let meta: DumpMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Validation(format!("activation dump metadata: {}", e)))?;
    if meta.kind != "activations" {
        return Err(Error::Validation(format!("expected an activation dump, found {}", meta.kind)));
    }
    if meta.layer_count != layers.len() {
        return Err(Error::Validation(format!(
            "header declares {} layers, file holds {}",
            meta.layer_count,
            layers.len()
        )));
    }
    let dump = ActivationDump::new(meta.model_id, layers)?;
    if dump.dim() != meta.d {
        return Err(Error::Validation(format!(
            "header declares d = {}, tensors have d = {}",
            meta.d,
            dump.dim()
        )));
    }
    Ok(dump)
}

pub fn write_dump(path: &Path, dump: &ActivationDump) -> Result<()> {
    let bytes = encode_dump(dump)?;
    fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_dump(path: &Path) -> Result<ActivationDump> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_dump(&bytes)
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct CheckpointMeta {
    kind: String,
    config: ViTConfig,
    names: Vec<String>,
    head_classes: Option<usize>,
}

/// Saves backbone parameters, optionally followed by a head.
pub fn write_checkpoint(path: &Path, vit: &ViT, head: Option<&Head>) -> Result<()> {
    let named = vit.named_params();
    let mut names: Vec<String> = named.iter().map(|(n, _)| n.clone()).collect();
    let mut tensors: Vec<&Tensor> = named.iter().map(|(_, t)| t.as_ref()).collect();
    if let Some(h) = head {
        names.push("head.w".into());
        names.push("head.b".into());
        tensors.push(&h.w);
        tensors.push(&h.b);
    }
    let meta = serde_json::to_value(CheckpointMeta {
        kind: "checkpoint".into(),
        config: vit.config.clone(),
        names,
        head_classes: head.map(Head::num_classes),
    })?;
    write_tensors(path, &meta, &tensors)
}

pub fn read_checkpoint(path: &Path) -> Result<(ViT, Option<Head>)> {
    let (meta, mut tensors) = read_tensors(path)?;
    let meta: CheckpointMeta = serde_json::from_value(meta)
        .map_err(|e| Error::Validation(format!("checkpoint metadata: {}", e)))?;
    if meta.kind != "checkpoint" || meta.names.len() != tensors.len() {
        return Err(Error::Validation(format!(
            "{} is not a checkpoint with {} named tensors",
            path.display(),
            meta.names.len()
        )));
    }
    let head = match meta.head_classes {
        Some(_) => {
            let b = tensors.pop().expect("length checked");
            let w = tensors.pop().expect("length checked");
            Some(Head {
                w: Arc::new(w),
                b: Arc::new(b),
            })
        }
        None => None,
    };
    let named = meta.names.into_iter().zip(tensors).collect();
    let vit = ViT::from_named(meta.config, named)?;
    Ok((vit, head))
}

#[derive(Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct PrototypeSidecar {
    k: usize,
    d: usize,
    source: PrototypeSource,
}

/// Writes `path` and a JSON sidecar next to it (`path` with `.json`).
pub fn write_prototypes(path: &Path, set: &PrototypeSet) -> Result<()> {
    let sidecar = PrototypeSidecar {
        k: set.k(),
        d: set.dim(),
        source: set.source.clone(),
    };
    let meta = serde_json::json!({ "kind": "prototypes", "k": set.k(), "d": set.dim() });
    write_tensors(path, &meta, &[&set.prototypes])?;
    let side = path.with_extension("json");
    let text = serde_json::to_string_pretty(&sidecar)?;
    fs::write(&side, text + "\n").map_err(|e| Error::io(&side, e))
}

pub fn read_prototypes(path: &Path) -> Result<PrototypeSet> {
    let (_, mut tensors) = read_tensors(path)?;
    let side = path.with_extension("json");
    let text = fs::read_to_string(&side).map_err(|e| Error::io(&side, e))?;
    let sidecar: PrototypeSidecar = serde_json::from_str(&text)?;
    if tensors.len() != 1 || tensors[0].shape() != [sidecar.k, sidecar.d] {
        return Err(Error::Validation(format!(
            "prototype file does not hold a [{}, {}] matrix",
            sidecar.k, sidecar.d
        )));
    }
    PrototypeSet::new(tensors.pop().unwrap(), sidecar.source)
}

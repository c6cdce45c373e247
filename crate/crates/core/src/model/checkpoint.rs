//! Versioned checkpoint: a text header followed by little-endian f64 payloads.
//!
//! ```text
//! SIMIC-CHECKPOINT 1
//! config.backbone=residual
//! ...
//! norm.mean=<w>,<h>,<r>
//! norm.std=<w>,<h>,<r>
//! tensor <name> <d0>x<d1>... <byte offset> <trainable 0|1>
//! ...
//! end
//! <payload>
//! ```

use std::fs;
use std::path::Path;

use super::{ModelConfig, Normalization, SimicModel};
use crate::error::{Result, SimicError};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &str = "SIMIC-CHECKPOINT 1";

fn bad(msg: impl Into<String>) -> SimicError {
    SimicError::Checkpoint(msg.into())
}

fn join(v: &[f64]) -> String {
    v.iter().map(|x| format!("{x:?}")).collect::<Vec<_>>().join(",")
}

fn triple(key: &str, s: &str) -> Result<[f64; 3]> {
    let v: Vec<f64> = s
        .split(',')
        .map(str::parse)
        .collect::<std::result::Result<_, _>>()
        .map_err(|_| bad(format!("bad {key} value {s:?}")))?;
    v.try_into().map_err(|_| bad(format!("{key} needs three values")))
}

pub(crate) fn encode(model: &SimicModel) -> Vec<u8> {
    let mut header = format!("{CHECKPOINT_MAGIC}\n");
    for (k, v) in model.config().to_pairs() {
        header.push_str(&format!("config.{k}={v}\n"));
    }
    header.push_str(&format!("norm.mean={}\n", join(&model.normalization.mean)));
    header.push_str(&format!("norm.std={}\n", join(&model.normalization.std)));
    let mut offset = 0usize;
    for (_, p) in model.params().iter() {
        let dims = p.value.shape().iter().map(usize::to_string).collect::<Vec<_>>().join("x");
        header.push_str(&format!("tensor {} {} {} {}\n", p.name, dims, offset, u8::from(p.trainable)));
        offset += p.value.len() * 8;
    }
    header.push_str("end\n");
    let mut out = header.into_bytes();
    out.reserve(offset);
    for (_, p) in model.params().iter() {
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Entry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
    trainable: bool,
}

/// Parses a checkpoint; with `expected`, the echoed config must match it.
pub(crate) fn decode(bytes: &[u8], expected: Option<&ModelConfig>) -> Result<SimicModel> {
    let end = bytes
        .windows(5)
        .position(|w| w == b"\nend\n")
        .ok_or_else(|| bad("missing end of header"))?;
    let header = std::str::from_utf8(&bytes[..end]).map_err(|_| bad("header is not UTF-8"))?;
    let payload = &bytes[end + 5..];
    let mut lines = header.lines();
    if lines.next() != Some(CHECKPOINT_MAGIC) {
        return Err(bad(format!("not a checkpoint (expected magic {CHECKPOINT_MAGIC:?})")));
    }
    let mut pairs = Vec::new();
    let mut mean = None;
    let mut std = None;
    let mut entries = Vec::new();
    for line in lines {
        if let Some(kv) = line.strip_prefix("config.") {
            let (k, v) = kv.split_once('=').ok_or_else(|| bad(format!("bad config line {line:?}")))?;
            pairs.push((k, v));
        } else if let Some(v) = line.strip_prefix("norm.mean=") {
            mean = Some(triple("norm.mean", v)?);
        } else if let Some(v) = line.strip_prefix("norm.std=") {
            std = Some(triple("norm.std", v)?);
        } else if let Some(rest) = line.strip_prefix("tensor ") {
            let f: Vec<&str> = rest.split(' ').collect();
            let parsed = (|| {
                let [name, dims, offset, trainable] = f.as_slice() else {
                    return None;
                };
                let shape = if dims.is_empty() {
                    Vec::new()
                } else {
                    dims.split('x').map(|d| d.parse().ok()).collect::<Option<Vec<usize>>>()?
                };
                Some(Entry {
                    name: name.to_string(),
                    shape,
                    offset: offset.parse().ok()?,
                    trainable: match *trainable {
                        "1" => true,
                        "0" => false,
                        _ => return None,
                    },
                })
            })();
            entries.push(parsed.ok_or_else(|| bad(format!("bad tensor line {line:?}")))?);
        } else {
            return Err(bad(format!("unexpected header line {line:?}")));
        }
    }
    let config = ModelConfig::from_pairs(pairs)?;
    if let Some(exp) = expected {
        if let Some(field) = config.first_difference(exp) {
            let get = |c: &ModelConfig| c.to_pairs().into_iter().find(|(k, _)| *k == field).map(|(_, v)| v);
            return Err(SimicError::config(
                field,
                format!(
                    "checkpoint has {} but {} was requested",
                    get(&config).unwrap_or_default(),
                    get(exp).unwrap_or_default()
                ),
            ));
        }
    }
    let mut model = SimicModel::build(&config)?;
    model.normalization = Normalization {
        mean: mean.ok_or_else(|| bad("missing norm.mean"))?,
        std: std.ok_or_else(|| bad("missing norm.std"))?,
    };
    if entries.len() != model.params().len() {
        return Err(bad(format!(
            "checkpoint holds {} tensors, model expects {}",
            entries.len(),
            model.params().len()
        )));
    }
    for e in entries {
        let id = model
            .params()
            .find(&e.name)
            .ok_or_else(|| bad(format!("unknown tensor {:?}", e.name)))?;
        let p = model.params_mut().get_mut(id);
        if p.value.shape() != e.shape.as_slice() || p.trainable != e.trainable {
            return Err(bad(format!(
                "tensor {:?}: stored {:?} does not match model {:?}",
                e.name,
                e.shape,
                p.value.shape()
            )));
        }
        let len = p.value.len() * 8;
        let raw = payload
            .get(e.offset..e.offset + len)
            .ok_or_else(|| bad(format!("tensor {:?} payload truncated", e.name)))?;
        let data = raw
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")))
            .collect();
        p.value = Tensor::new(&e.shape, data)?;
    }
    Ok(model)
}

pub fn save_checkpoint(model: &SimicModel, path: &Path) -> Result<()> {
    fs::write(path, encode(model)).map_err(|e| SimicError::io(path, e))
}

pub fn load_checkpoint(path: &Path, expected: Option<&ModelConfig>) -> Result<SimicModel> {
    let bytes = fs::read(path).map_err(|e| SimicError::io(path, e))?;
    decode(&bytes, expected)
}

//! TMAW weight files and their JSON sidecar.
//!
//! Layout, all little-endian: magic `TMAW`, version `u16`, entry count
//! `u32`, then per entry in name order: name length `u16`, UTF-8 name, rank
//! `u8`, `rank` dims as `u32`, and the `f64` payload.

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Model, ModelConfig};
use crate::data::Vocabulary;
use crate::error::{Error, Result};
use crate::numerics::{ParamStore, Tensor};

pub const WEIGHTS_MAGIC: &[u8; 4] = b"TMAW";
pub const WEIGHTS_VERSION: u16 = 1;

fn format_err(path: &Path, reason: impl Into<String>) -> Error {
    Error::Format {
        path: path.to_path_buf(),
        reason: reason.into(),
    }
}

pub fn encode_weights(store: &ParamStore) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(WEIGHTS_MAGIC);
    out.extend_from_slice(&WEIGHTS_VERSION.to_le_bytes());
    out.extend_from_slice(&(store.len() as u32).to_le_bytes());
    for (name, p) in store.iter() {
        out.extend_from_slice(&(name.len() as u16).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        let shape = p.value.shape();
        out.push(shape.len() as u8);
        for &d in shape {
            out.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for v in p.value.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

pub fn write_weights(path: &Path, store: &ParamStore) -> Result<()> {
    fs::write(path, encode_weights(store))?;
    Ok(())
}

struct Reader<'a> {
    path: &'a Path,
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(format_err(
                self.path,
                format!("truncated at byte {}", self.pos),
            ));
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }
}

/// Entries in file order.
pub fn decode_weights(path: &Path, bytes: &[u8]) -> Result<Vec<(String, Tensor)>> {
    let mut r = Reader {
        path,
        bytes,
        pos: 0,
    };
    if r.take(4)? != WEIGHTS_MAGIC {
        return Err(format_err(path, "bad magic, expected TMAW"));
    }
    let version = r.u16()?;
    if version != WEIGHTS_VERSION {
        return Err(format_err(path, format!("unsupported version {version}")));
    }
    let count = r.u32()? as usize;
    let mut out: Vec<(String, Tensor)> = Vec::with_capacity(count.min(1 << 16));
    for _ in 0..count {
        let len = r.u16()? as usize;
        let name = std::str::from_utf8(r.take(len)?)
            .map_err(|_| format_err(path, "parameter name is not UTF-8"))?
            .to_string();
        if let Some((prev, _)) = out.last() {
            if *prev >= name {
                return Err(format_err(path, format!("entries not sorted at `{name}`")));
            }
        }
        let rank = r.u8()? as usize;
        let shape = (0..rank)
            .map(|_| r.u32().map(|d| d as usize))
            .collect::<Result<Vec<_>>>()?;
        let n: usize = shape.iter().product();
        let payload = r.take(
            n.checked_mul(8)
                .ok_or_else(|| format_err(path, "payload too large"))?,
        )?;
        let data: Vec<f64> = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        if data.iter().any(|v| !v.is_finite()) {
            return Err(format_err(path, format!("non-finite value in `{name}`")));
        }
        out.push((name, Tensor::new(shape, data)?));
    }
    if r.pos != bytes.len() {
        return Err(format_err(path, "trailing bytes after last entry"));
    }
    Ok(out)
}

pub fn read_weights(path: &Path) -> Result<Vec<(String, Tensor)>> {
    let bytes = fs::read(path)?;
    decode_weights(path, &bytes)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSidecar {
    pub model: ModelConfig,
    pub vocabulary: Vocabulary,
}

/// `<weights>.json` next to the weight file.
pub fn sidecar_path(weights: &Path) -> PathBuf {
    let mut s = weights.as_os_str().to_owned();
    s.push(".json");
    PathBuf::from(s)
}

pub fn write_sidecar(path: &Path, sidecar: &ModelSidecar) -> Result<()> {
    let mut text = serde_json::to_string_pretty(sidecar)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn read_sidecar(path: &Path) -> Result<ModelSidecar> {
    let text = fs::read_to_string(path)?;
    serde_json::from_str(&text).map_err(|e| format_err(path, e.to_string()))
}

/// Overwrite every parameter of `model` from `entries`; the name sets and
/// shapes must agree exactly.
pub fn assign_weights(
    model: &mut Model,
    path: &Path,
    entries: Vec<(String, Tensor)>,
) -> Result<()> {
    let expected: BTreeSet<String> = model.params.names().map(str::to_string).collect();
    let found: BTreeSet<String> = entries.iter().map(|(n, _)| n.clone()).collect();
    if expected != found {
        let missing: Vec<_> = expected.difference(&found).cloned().collect();
        let extra: Vec<_> = found.difference(&expected).cloned().collect();
        return Err(format_err(
            path,
            format!("parameter set mismatch; missing {missing:?}, unexpected {extra:?}"),
        ));
    }
    for (name, t) in entries {
        let slot = model.params.tensor_mut(&name)?;
        if slot.shape() != t.shape() {
            return Err(format_err(
                path,
                format!(
                    "`{name}` has shape {:?}, expected {:?}",
                    t.shape(),
                    slot.shape()
                ),
            ));
        }
        *slot = t;
    }
    Ok(())
}

pub fn save_model(path: &Path, model: &Model, vocabulary: &Vocabulary) -> Result<()> {
    write_weights(path, &model.params)?;
    write_sidecar(
        &sidecar_path(path),
        &ModelSidecar {
            model: model.config.clone(),
            vocabulary: vocabulary.clone(),
        },
    )
}

pub fn load_model(path: &Path) -> Result<(Model, Vocabulary)> {
    let sidecar = read_sidecar(&sidecar_path(path))?;
    if sidecar.vocabulary.len() != sidecar.model.vocab_size {
        return Err(format_err(
            path,
            format!(
                "sidecar vocabulary has {} tokens, model expects {}",
                sidecar.vocabulary.len(),
                sidecar.model.vocab_size
            ),
        ));
    }
    let mut model = Model::new(sidecar.model, 0)?;
    assign_weights(&mut model, path, read_weights(path)?)?;
    Ok((model, sidecar.vocabulary))
}

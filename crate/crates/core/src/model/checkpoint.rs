//! Checkpoint files.
//!
//! ```text
//! ADAPTNET-CHECKPOINT\n
//! version 1\n
//! spec <n>\n        followed by n bytes of canonical spec text
//! meta <n>\n        followed by n bytes of `key=value\n` lines, sorted by key
//! params <count>\n  followed by count little-endian f64 values
//! ```
//!
//! Parameter values are written in address order (layer id, weight before
//! bias), each tensor row-major; shapes are implied by the spec.

use std::collections::BTreeMap;
use std::fs;
use std::path::Path;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

use super::params::ParamSet;
use super::spec::NetworkSpec;

pub const MAGIC: &str = "ADAPTNET-CHECKPOINT";
pub const FORMAT_VERSION: u32 = 1;

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub spec: NetworkSpec,
    pub params: ParamSet,
    pub metadata: BTreeMap<String, String>,
}

impl Checkpoint {
    pub fn new(
        spec: NetworkSpec,
        params: ParamSet,
        metadata: BTreeMap<String, String>,
    ) -> Result<Self> {
        params.check_layout(&spec)?;
        for (k, v) in &metadata {
            if k.is_empty() || k.contains(['=', '\n']) || v.contains('\n') {
                return Err(Error::Usage(format!(
                    "metadata entry `{k}` cannot be stored"
                )));
            }
        }
        Ok(Checkpoint {
            spec,
            params,
            metadata,
        })
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let spec = self.spec.to_string();
        let meta: String = self
            .metadata
            .iter()
            .map(|(k, v)| format!("{k}={v}\n"))
            .collect();
        let count = self.params.scalar_count();
        let mut out = Vec::with_capacity(spec.len() + meta.len() + 8 * count + 96);
        out.extend_from_slice(format!("{MAGIC}\nversion {FORMAT_VERSION}\n").as_bytes());
        out.extend_from_slice(format!("spec {}\n", spec.len()).as_bytes());
        out.extend_from_slice(spec.as_bytes());
        out.extend_from_slice(format!("meta {}\n", meta.len()).as_bytes());
        out.extend_from_slice(meta.as_bytes());
        out.extend_from_slice(format!("params {count}\n").as_bytes());
        for (_, t) in self.params.iter() {
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut cursor = Cursor { bytes, pos: 0 };
        if cursor.line()? != MAGIC {
            return Err(Error::CorruptHeader("missing magic string".into()));
        }
        let version: u32 = cursor.keyed("version")?;
        if version != FORMAT_VERSION {
            return Err(Error::VersionMismatch {
                expected: FORMAT_VERSION,
                found: version,
            });
        }
        let spec_len: usize = cursor.keyed("spec")?;
        let spec_text = cursor.text(spec_len)?;
        let spec: NetworkSpec = spec_text
            .parse()
            .map_err(|e| Error::CorruptHeader(format!("embedded spec: {e}")))?;
        let meta_len: usize = cursor.keyed("meta")?;
        let mut metadata = BTreeMap::new();
        for line in cursor.text(meta_len)?.lines() {
            let (k, v) = line
                .split_once('=')
                .ok_or_else(|| Error::CorruptHeader(format!("metadata line `{line}`")))?;
            metadata.insert(k.to_string(), v.to_string());
        }
        let count: usize = cursor.keyed("params")?;
        let layout = spec
            .param_layout()
            .map_err(|e| Error::CorruptHeader(format!("embedded spec: {e}")))?;
        let expected: usize = layout
            .iter()
            .map(|(_, s)| s.iter().product::<usize>())
            .sum();
        if count != expected {
            return Err(Error::CorruptHeader(format!(
                "header declares {count} values, spec lays out {expected}"
            )));
        }
        let payload = &bytes[cursor.pos..];
        if payload.len() < 8 * count {
            return Err(Error::Truncated {
                expected: 8 * count,
                found: payload.len(),
            });
        }
        if payload.len() > 8 * count {
            return Err(Error::CorruptHeader(format!(
                "{} trailing bytes after the parameters",
                payload.len() - 8 * count
            )));
        }
        let mut values = payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8-byte chunk")));
        let mut params = ParamSet::new();
        for (addr, shape) in layout {
            let n = shape.iter().product();
            let data: Vec<f64> = values.by_ref().take(n).collect();
            params.insert(addr, Tensor::new(shape, data)?);
        }
        Ok(Checkpoint {
            spec,
            params,
            metadata,
        })
    }

    /// Refuses a checkpoint whose parameter layout differs from `expected`'s.
    pub fn ensure_compatible(&self, expected: &NetworkSpec) -> Result<()> {
        let mine = self.spec.param_layout()?;
        let theirs = expected.param_layout()?;
        if mine != theirs {
            let first = mine
                .iter()
                .zip(&theirs)
                .find(|(a, b)| a != b)
                .map(|((a, s), (_, t))| format!("{a}: checkpoint {s:?}, expected {t:?}"))
                .unwrap_or_else(|| format!("{} vs {} parameter tensors", mine.len(), theirs.len()));
            return Err(Error::Incompatible(first));
        }
        Ok(())
    }
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Cursor<'_> {
    fn line(&mut self) -> Result<&str> {
        let rest = &self.bytes[self.pos..];
        let end = rest
            .iter()
            .take(256)
            .position(|&b| b == b'\n')
            .ok_or_else(|| Error::CorruptHeader("unterminated header line".into()))?;
        self.pos += end + 1;
        std::str::from_utf8(&rest[..end])
            .map_err(|_| Error::CorruptHeader("header is not UTF-8".into()))
    }

    fn keyed<T: std::str::FromStr>(&mut self, key: &str) -> Result<T> {
        let line = self.line()?;
        line.strip_prefix(key)
            .and_then(|r| r.strip_prefix(' '))
            .and_then(|v| v.parse().ok())
            .ok_or_else(|| Error::CorruptHeader(format!("expected `{key} <value>`, got `{line}`")))
    }

    fn text(&mut self, len: usize) -> Result<&str> {
        let end = self
            .pos
            .checked_add(len)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| {
                Error::CorruptHeader("header section runs past the end of the file".into())
            })?;
        let text = std::str::from_utf8(&self.bytes[self.pos..end])
            .map_err(|_| Error::CorruptHeader("header section is not UTF-8".into()))?;
        self.pos = end;
        Ok(text)
    }
}

pub fn save_checkpoint(
    path: &Path,
    spec: &NetworkSpec,
    params: &ParamSet,
    metadata: &BTreeMap<String, String>,
) -> Result<()> {
    let ckpt = Checkpoint::new(spec.clone(), params.clone(), metadata.clone())?;
    write_atomic(path, &ckpt.to_bytes())
}

pub fn load_checkpoint(path: &Path) -> Result<Checkpoint> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Checkpoint::from_bytes(&bytes)
}

/// Writes through a sibling temporary file so readers never see a partial file.
pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".partial");
    fs::write(&tmp, bytes).map_err(|e| Error::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

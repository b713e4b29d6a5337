//! Binary parameter files and the JSON model sidecar.
//!
//! Layout, all little-endian: magic `MDNC`, `u32` version, then per
//! parameter in sorted-name order `u32` name length, UTF-8 name, `u32`
//! rank, `u64` extents, `f64` payload. Records run to end of file.

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DepthNetConfig, ParamSet, PoseNetConfig};
use crate::error::{Error, Result};
use crate::tape::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"MDNC";
pub const CHECKPOINT_VERSION: u32 = 1;

/// Everything besides the weights needed to rebuild a model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelMeta {
    pub depth: DepthNetConfig,
    pub pose: PoseNetConfig,
    pub d0: f64,
    pub epsilon: f64,
    #[serde(default)]
    pub iteration: usize,
}

impl ModelMeta {
    pub fn write(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self).map_err(|e| Error::json(path, e))?;
        fs::write(path, text).map_err(|e| Error::io(path, e))
    }

    pub fn read(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::json(path, e))
    }
}

pub fn encode_params(params: &ParamSet) -> Vec<u8> {
    let mut out = Vec::new();
    out.extend_from_slice(CHECKPOINT_MAGIC);
    out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
    // BTreeMap iteration is already in sorted-name order
    for (name, t) in params {
        out.extend_from_slice(&(name.len() as u32).to_le_bytes());
        out.extend_from_slice(name.as_bytes());
        out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
        for &d in t.shape() {
            out.extend_from_slice(&(d as u64).to_le_bytes());
        }
        for &v in t.data() {
            out.extend_from_slice(&v.to_le_bytes());
        }
    }
    out
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
    path: &'a Path,
}

impl<'a> Reader<'a> {
    fn err(&self, msg: impl Into<String>) -> Error {
        Error::Parse {
            path: self.path.to_path_buf(),
            offset: self.pos,
            msg: msg.into(),
        }
    }

    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.buf.len() - self.pos < n {
            return Err(self.err(format!("truncated {what}")));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().expect("8 bytes")))
    }
}

pub fn decode_params(buf: &[u8], path: &Path) -> Result<ParamSet> {
    let mut r = Reader { buf, pos: 0, path };
    if r.take(4, "magic")? != CHECKPOINT_MAGIC {
        r.pos = 0;
        return Err(r.err("bad magic, expected MDNC"));
    }
    let version = r.u32("version")?;
    if version != CHECKPOINT_VERSION {
        return Err(r.err(format!("unsupported version {version}")));
    }
    let mut params = ParamSet::new();
    let mut last: Option<String> = None;
    while r.pos < buf.len() {
        let len = r.u32("name length")? as usize;
        let name = std::str::from_utf8(r.take(len, "name")?)
            .map_err(|_| r.err("parameter name is not UTF-8"))?
            .to_string();
        if last.as_ref().is_some_and(|l| *l >= name) {
            return Err(r.err(format!("parameter {name} out of sorted order")));
        }
        let rank = r.u32("rank")? as usize;
        if rank > 8 {
            return Err(r.err(format!("implausible rank {rank}")));
        }
        let mut shape = Vec::with_capacity(rank);
        for _ in 0..rank {
            shape.push(r.u64("extent")? as usize);
        }
        let n = shape.iter().try_fold(1usize, |a, &d| a.checked_mul(d));
        let n = match n {
            Some(n) if n.checked_mul(8).is_some_and(|b| b <= buf.len() - r.pos) => n,
            _ => return Err(r.err(format!("payload of {name} with shape {shape:?} exceeds file"))),
        };
        let data = r
            .take(8 * n, "payload")?
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect();
        params.insert(name.clone(), Tensor::new(shape, data)?);
        last = Some(name);
    }
    Ok(params)
}

pub fn write_params(path: &Path, params: &ParamSet) -> Result<()> {
    fs::write(path, encode_params(params)).map_err(|e| Error::io(path, e))
}

pub fn read_params(path: &Path) -> Result<ParamSet> {
    let buf = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_params(&buf, path)
}

//! Checkpoint archives.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic    8 bytes  b"FUNDUSCK"
//! version  u32      1
//! hlen     u64      byte length of the JSON header
//! header   hlen bytes of UTF-8 JSON
//! payload  f32 values, concatenated in header tensor order
//! ```
//!
//! The header is `{"meta": <any JSON>, "tensors": [{"name", "shape",
//! "offset"}]}` with `offset` counted in f32 elements. Tensor names are
//! `{group}/{parameter}`. Values are stored as `f32`; since parameters and
//! optimizer moments are kept at `f32` precision, a save/load round trip is
//! bit-exact.

use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::params::NetParams;
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 8] = b"FUNDUSCK";
pub const VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
struct TensorEntry {
    name: String,
    shape: Vec<usize>,
    offset: usize,
}

#[derive(Serialize, Deserialize)]
struct Header {
    meta: serde_json::Value,
    tensors: Vec<TensorEntry>,
}

/// Named parameter groups plus free-form metadata.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct Checkpoint {
    pub meta: serde_json::Value,
    pub groups: Vec<(String, NetParams)>,
}

impl Checkpoint {
    pub fn new(meta: serde_json::Value) -> Self {
        Checkpoint {
            meta,
            groups: Vec::new(),
        }
    }

    pub fn push(&mut self, group: impl Into<String>, params: NetParams) {
        self.groups.push((group.into(), params));
    }

    pub fn group(&self, name: &str) -> Result<&NetParams> {
        self.groups
            .iter()
            .find(|(g, _)| g == name)
            .map(|(_, p)| p)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no group {name}")))
    }

    pub fn take_group(&mut self, name: &str) -> Result<NetParams> {
        let i = self
            .groups
            .iter()
            .position(|(g, _)| g == name)
            .ok_or_else(|| Error::Checkpoint(format!("checkpoint has no group {name}")))?;
        Ok(self.groups.remove(i).1)
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let mut tensors = Vec::new();
        let mut payload = Vec::new();
        let mut offset = 0;
        for (group, params) in &self.groups {
            if group.contains('/') {
                return Err(Error::Checkpoint(format!("group name {group} contains '/'")));
            }
            for (name, t) in params.iter() {
                tensors.push(TensorEntry {
                    name: format!("{group}/{name}"),
                    shape: t.shape().to_vec(),
                    offset,
                });
                offset += t.len();
                for &v in t.data() {
                    payload.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        let header = serde_json::to_vec(&Header {
            meta: self.meta.clone(),
            tensors,
        })?;
        let mut out = Vec::with_capacity(20 + header.len() + payload.len());
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(header.len() as u64).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&payload);
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |m: &str| Error::Checkpoint(m.to_string());
        if bytes.len() < 20 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().expect("4 bytes"));
        if version != VERSION {
            return Err(Error::Checkpoint(format!(
                "unsupported checkpoint version {version}"
            )));
        }
        let hlen = u64::from_le_bytes(bytes[12..20].try_into().expect("8 bytes")) as usize;
        let header_end = 20usize
            .checked_add(hlen)
            .filter(|&e| e <= bytes.len())
            .ok_or_else(|| bad("truncated header"))?;
        let header: Header = serde_json::from_slice(&bytes[20..header_end])
            .map_err(|e| Error::Checkpoint(format!("bad header: {e}")))?;
        let payload = &bytes[header_end..];
        let mut ck = Checkpoint::new(header.meta);
        let mut expected = 0;
        for entry in header.tensors {
            let n: usize = entry.shape.iter().product();
            if entry.offset != expected {
                return Err(bad("tensor offsets are not contiguous"));
            }
            expected += n;
            let raw = payload
                .get(entry.offset * 4..(entry.offset + n) * 4)
                .ok_or_else(|| bad("truncated payload"))?;
            let data = raw
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
                .collect();
            let (group, name) = entry
                .name
                .split_once('/')
                .ok_or_else(|| Error::Checkpoint(format!("tensor name {} has no group", entry.name)))?;
            let t = Tensor::new(&entry.shape, data)?;
            match ck.groups.iter_mut().find(|(g, _)| g == group) {
                Some((_, p)) => p.insert(name, t)?,
                None => {
                    let mut p = NetParams::new();
                    p.insert(name, t)?;
                    ck.groups.push((group.to_string(), p));
                }
            }
        }
        if payload.len() != expected * 4 {
            return Err(bad("payload length does not match the tensor table"));
        }
        Ok(ck)
    }

    /// Write via a temporary file and rename, so a failed write never leaves
    /// a truncated checkpoint under `path`.
    pub fn save(&self, path: &Path) -> Result<()> {
        let bytes = self.to_bytes()?;
        let tmp = path.with_extension("tmp");
        let write = || -> std::io::Result<()> {
            let mut f = std::fs::File::create(&tmp)?;
            f.write_all(&bytes)?;
            f.sync_all()
        };
        if let Err(e) = write() {
            let _ = std::fs::remove_file(&tmp);
            return Err(Error::io(path, e));
        }
        std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

//! Versioned binary checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic "JDIFFCKP" | version u32 | sha256(header json) [32] | header len u32 | header json
//! array count u32 | { name len u32 | name | dtype u8 | ndim u8 | dims u64* | payload }*
//! sha256 of every preceding byte [32]
//! ```
//!
//! Learnable arrays are float32. Counters and RNG words use the `u64`
//! dtype and loss histories `f64`, so resuming a run is exact.

use std::fs;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::diffusion::PredictionTarget;
use crate::error::{Error, Result};
use crate::nn::Params;
use crate::unet::UNetConfig;

pub const MAGIC: &[u8; 8] = b"JDIFFCKP";
pub const FORMAT_VERSION: u32 = 1;

/// Everything needed to rebuild and interpret the network.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelHeader {
    pub unet: UNetConfig,
    pub timesteps: usize,
    pub schedule_offset: f64,
    pub target: PredictionTarget,
    pub loss_p: f64,
}

impl ModelHeader {
    fn to_json(&self) -> Vec<u8> {
        serde_json::to_vec(self).expect("header serializes")
    }

    /// Hex SHA-256 of the canonical header encoding.
    pub fn config_hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_json()))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum Array {
    F32 { shape: Vec<usize>, data: Vec<f32> },
    U64(Vec<u64>),
    F64(Vec<f64>),
}

impl Array {
    fn dtype(&self) -> u8 {
        match self {
            Array::F32 { .. } => 0,
            Array::U64(_) => 1,
            Array::F64(_) => 2,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub header: ModelHeader,
    arrays: Vec<(String, Array)>,
}

impl Checkpoint {
    pub fn new(header: ModelHeader) -> Self {
        Self {
            header,
            arrays: Vec::new(),
        }
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.arrays.iter().map(|(n, _)| n.as_str())
    }

    pub fn insert(&mut self, name: impl Into<String>, array: Array) {
        let name = name.into();
        match self.arrays.iter_mut().find(|(n, _)| *n == name) {
            Some(slot) => slot.1 = array,
            None => self.arrays.push((name, array)),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Array> {
        self.arrays.iter().find(|(n, _)| n == name).map(|(_, a)| a)
    }

    fn missing(name: &str) -> Error {
        Error::Integrity {
            record: "checkpoint".into(),
            msg: format!("missing array {name}"),
        }
    }

    /// Stores every array of `p` under `prefix/<name>`.
    pub fn put_params(&mut self, prefix: &str, p: &Params<f32>) {
        for (name, shape, values) in p.iter() {
            self.insert(
                format!("{prefix}/{name}"),
                Array::F32 {
                    shape: shape.to_vec(),
                    data: values.to_vec(),
                },
            );
        }
    }

    /// Reads the arrays stored by [`put_params`](Self::put_params), in the
    /// layout of `like`.
    pub fn params(&self, prefix: &str, like: &Params<f32>) -> Result<Params<f32>> {
        let mut entries = Vec::with_capacity(like.len());
        for (name, shape, _) in like.iter() {
            let key = format!("{prefix}/{name}");
            match self.get(&key) {
                Some(Array::F32 { shape: s, data }) if s.as_slice() == shape => {
                    entries.push((name.to_string(), s.clone(), data.clone()))
                }
                Some(_) => {
                    return Err(Error::Shape(format!("checkpoint array {key} does not match the model layout")));
                }
                None => return Err(Self::missing(&key)),
            }
        }
        Params::from_parts(entries)
    }

    pub fn has_params(&self, prefix: &str) -> bool {
        let p = format!("{prefix}/");
        self.arrays.iter().any(|(n, _)| n.starts_with(&p))
    }

    pub fn u64s(&self, name: &str) -> Result<&[u64]> {
        match self.get(name) {
            Some(Array::U64(v)) => Ok(v),
            Some(_) => Err(Error::Shape(format!("checkpoint array {name} is not u64"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn f64s(&self, name: &str) -> Result<&[f64]> {
        match self.get(name) {
            Some(Array::F64(v)) => Ok(v),
            Some(_) => Err(Error::Shape(format!("checkpoint array {name} is not f64"))),
            None => Err(Self::missing(name)),
        }
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let header = self.header.to_json();
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&FORMAT_VERSION.to_le_bytes());
        out.extend_from_slice(&Sha256::digest(&header));
        out.extend_from_slice(&(header.len() as u32).to_le_bytes());
        out.extend_from_slice(&header);
        out.extend_from_slice(&(self.arrays.len() as u32).to_le_bytes());
        for (name, array) in &self.arrays {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.push(array.dtype());
            match array {
                Array::F32 { shape, data } => {
                    out.push(shape.len() as u8);
                    for &d in shape {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Array::U64(data) => {
                    out.push(1);
                    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
                Array::F64(data) => {
                    out.push(1);
                    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
                    data.iter().for_each(|v| out.extend_from_slice(&v.to_le_bytes()));
                }
            }
        }
        let digest = Sha256::digest(&out);
        out.extend_from_slice(&digest);
        out
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let bad = |msg: &str| Error::Integrity {
            record: "checkpoint".into(),
            msg: msg.into(),
        };
        if bytes.len() < MAGIC.len() + 4 + 32 || &bytes[..8] != MAGIC {
            return Err(bad("not a checkpoint file (bad magic)"));
        }
        let version = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
        if version != FORMAT_VERSION {
            return Err(Error::Version {
                found: version,
                expected: FORMAT_VERSION,
            });
        }
        let (body, digest) = bytes.split_at(bytes.len() - 32);
        if Sha256::digest(body).as_slice() != digest {
            return Err(bad("checksum mismatch (truncated or corrupted)"));
        }
        let mut r = Reader { buf: body, pos: 12 };
        let header_hash = r.take(32)?.to_vec();
        let hlen = r.u32()? as usize;
        let header_json = r.take(hlen)?;
        if Sha256::digest(header_json).as_slice() != header_hash {
            return Err(bad("config hash does not match header"));
        }
        let header: ModelHeader =
            serde_json::from_slice(header_json).map_err(|e| bad(&format!("header: {e}")))?;
        let count = r.u32()? as usize;
        let mut ck = Checkpoint::new(header);
        for _ in 0..count {
            let nlen = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(nlen)?)
                .map_err(|_| bad("array name is not utf-8"))?
                .to_string();
            let dtype = r.u8()?;
            let ndim = r.u8()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u64()? as usize);
            }
            let n: usize = shape.iter().product();
            let array = match dtype {
                0 => Array::F32 {
                    data: r.take(n.checked_mul(4).ok_or_else(|| bad("array too large"))?)?
                        .chunks_exact(4)
                        .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                    shape,
                },
                1 => Array::U64(
                    r.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?
                        .chunks_exact(8)
                        .map(|c| u64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                2 => Array::F64(
                    r.take(n.checked_mul(8).ok_or_else(|| bad("array too large"))?)?
                        .chunks_exact(8)
                        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                        .collect(),
                ),
                other => return Err(bad(&format!("unknown dtype tag {other} for {name}"))),
            };
            if ck.get(&name).is_some() {
                return Err(bad(&format!("duplicate array {name}")));
            }
            ck.arrays.push((name, array));
        }
        if r.pos != body.len() {
            return Err(bad("trailing bytes after last array"));
        }
        Ok(ck)
    }

    /// Writes to a sibling temp file and renames it into place.
    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
        Self::from_bytes(&bytes)
    }
}

/// Hex SHA-256 of a file's bytes, used to tag sample provenance.
pub fn file_digest(path: &Path) -> Result<String> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(hex::encode(Sha256::digest(bytes)))
}

pub(crate) fn write_atomic(path: &Path, bytes: &[u8]) -> Result<()> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = std::path::PathBuf::from(tmp);
    let mut f = fs::File::create(&tmp).map_err(|e| Error::io(&tmp, e))?;
    f.write_all(bytes).map_err(|e| Error::io(&tmp, e))?;
    f.sync_all().map_err(|e| Error::io(&tmp, e))?;
    drop(f);
    fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.buf.len()).ok_or_else(|| Error::Integrity {
            record: "checkpoint".into(),
            msg: "unexpected end of data".into(),
        })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().unwrap()))
    }
}

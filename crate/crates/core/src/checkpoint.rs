//! Parameter checkpoints.
//!
//! Layout (all integers u32 little-endian):
//!
//! ```text
//! "EMOP" | version | metadata length | metadata (UTF-8 JSON object)
//! | tensor count | { name length | name | rank | dims[rank] | f64 LE payload }*
//! ```

use std::collections::BTreeMap;
use std::path::Path;

use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::fsutil::{read_bytes, write_atomic};
use crate::nn::Parameters;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"EMOP";
pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct Checkpoint {
    pub metadata: BTreeMap<String, Value>,
    pub tensors: Vec<Tensor>,
}

impl Checkpoint {
    pub fn from_params<P: Parameters + ?Sized>(params: &P, metadata: BTreeMap<String, Value>) -> Self {
        let mut tensors = Vec::new();
        params.visit("", &mut |name, shape, data| {
            tensors.push(Tensor {
                name: name.to_string(),
                shape: shape.to_vec(),
                data: data.to_vec(),
            })
        });
        Self { metadata, tensors }
    }

    /// Copies tensors into `params`, matching by name and shape. Every
    /// parameter must be present; extra tensors are an error too.
    pub fn load_into<P: Parameters + ?Sized>(&self, params: &mut P) -> Result<()> {
        let mut expected = Vec::new();
        params.visit("", &mut |name, shape, _| expected.push((name.to_string(), shape.to_vec())));
        if expected.len() != self.tensors.len() {
            return Err(Error::Checkpoint(format!(
                "expected {} tensors, found {}",
                expected.len(),
                self.tensors.len()
            )));
        }
        let by_name: BTreeMap<&str, &Tensor> =
            self.tensors.iter().map(|t| (t.name.as_str(), t)).collect();
        for (name, shape) in &expected {
            match by_name.get(name.as_str()) {
                None => return Err(Error::Checkpoint(format!("missing tensor {name}"))),
                Some(t) if &t.shape != shape => {
                    return Err(Error::Checkpoint(format!(
                        "tensor {name}: shape {:?} != expected {:?}",
                        t.shape, shape
                    )))
                }
                Some(_) => {}
            }
        }
        params.visit_mut("", &mut |name, data| {
            data.copy_from_slice(&by_name[name].data);
        });
        Ok(())
    }

    pub fn meta_str(&self, key: &str) -> Result<&str> {
        self.metadata
            .get(key)
            .and_then(Value::as_str)
            .ok_or_else(|| Error::Checkpoint(format!("missing metadata key {key}")))
    }

    /// SHA-256 over tensor names, shapes and payloads (metadata excluded).
    pub fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for t in &self.tensors {
            h.update((t.name.len() as u32).to_le_bytes());
            h.update(t.name.as_bytes());
            for d in &t.shape {
                h.update((*d as u32).to_le_bytes());
            }
            for x in &t.data {
                h.update(x.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    pub fn to_bytes(&self) -> Result<Vec<u8>> {
        let meta = serde_json::to_vec(&self.metadata)?;
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.extend_from_slice(&CHECKPOINT_VERSION.to_le_bytes());
        out.extend_from_slice(&u32_len(meta.len())?.to_le_bytes());
        out.extend_from_slice(&meta);
        out.extend_from_slice(&u32_len(self.tensors.len())?.to_le_bytes());
        for t in &self.tensors {
            let expected: usize = t.shape.iter().product();
            if expected != t.data.len() {
                return Err(Error::Shape(format!("tensor {} shape/data mismatch", t.name)));
            }
            out.extend_from_slice(&u32_len(t.name.len())?.to_le_bytes());
            out.extend_from_slice(t.name.as_bytes());
            out.extend_from_slice(&u32_len(t.shape.len())?.to_le_bytes());
            for d in &t.shape {
                out.extend_from_slice(&u32_len(*d)?.to_le_bytes());
            }
            for x in &t.data {
                out.extend_from_slice(&x.to_le_bytes());
            }
        }
        Ok(out)
    }

    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != CHECKPOINT_MAGIC {
            return Err(Error::BadMagic {
                expected: "EMOP",
            });
        }
        let version = r.u32()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::VersionMismatch {
                expected: CHECKPOINT_VERSION,
                found: version,
            });
        }
        let meta_len = r.u32()? as usize;
        let metadata = serde_json::from_slice(r.take(meta_len)?)?;
        let count = r.u32()? as usize;
        let mut tensors = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.take(name_len)?.to_vec())
                .map_err(|_| Error::Checkpoint("tensor name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(8));
            for _ in 0..rank {
                shape.push(r.u32()? as usize);
            }
            let n: usize = shape.iter().product();
            let payload = r.take(n.checked_mul(8).ok_or_else(|| r.truncated())?)?;
            let data: Vec<f64> = payload
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                .collect();
            if let Some(i) = data.iter().position(|v| !v.is_finite()) {
                return Err(Error::non_finite(&format!("tensor {name}"), i));
            }
            tensors.push(Tensor { name, shape, data });
        }
        if r.pos != bytes.len() {
            return Err(Error::SizeMismatch {
                expected: r.pos as u64,
                found: bytes.len() as u64,
            });
        }
        Ok(Self { metadata, tensors })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        write_atomic(path, &self.to_bytes()?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        if !path.is_file() {
            return Err(Error::Config(format!(
                "checkpoint not found: {}",
                path.display()
            )));
        }
        Self::from_bytes(&read_bytes(path)?)
    }
}

fn u32_len(n: usize) -> Result<u32> {
    u32::try_from(n).map_err(|_| Error::Checkpoint(format!("length {n} exceeds u32")))
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn truncated(&self) -> Error {
        Error::SizeMismatch {
            expected: self.pos as u64 + 1,
            found: self.bytes.len() as u64,
        }
    }

    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or_else(|| self.truncated())?;
        if end > self.bytes.len() {
            return Err(Error::SizeMismatch {
                expected: end as u64,
                found: self.bytes.len() as u64,
            });
        }
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

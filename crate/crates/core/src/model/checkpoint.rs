//! Binary checkpoint: `"WGLN"`, version byte, named tensor records, CRC32.
//!
//! Each record is `name_len: u32`, UTF-8 name, `rank: u32`, `rank × u32`
//! dims, then row-major `f64` values. Integers and floats are little-endian.
//! The trailing `u32` is the CRC32 of every preceding byte.

use std::fs;
use std::path::Path;

use super::{Adam, ModelError, Result, Wglin};
use crate::tensor::Tensor;

pub const CHECKPOINT_MAGIC: &[u8; 4] = b"WGLN";
pub const CHECKPOINT_VERSION: u8 = 1;

const STEP_RECORD: &str = "adam.step";

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<(String, Tensor)>,
}

impl Checkpoint {
    /// Parameters in registration order, then Adam first moments, second
    /// moments and the step count.
    pub fn capture(model: &Wglin, adam: Option<&Adam>) -> Self {
        let p = &model.params;
        let mut records: Vec<(String, Tensor)> =
            p.ids().map(|id| (p.name(id).to_string(), p.value(id).clone())).collect();
        if let Some(adam) = adam {
            for (prefix, moments) in [("adam.m", &adam.m), ("adam.v", &adam.v)] {
                for (id, t) in p.ids().zip(moments) {
                    records.push((format!("{prefix}.{}", p.name(id)), t.clone()));
                }
            }
            records.push((STEP_RECORD.to_string(), Tensor::scalar(adam.steps() as f64)));
        }
        Self { records }
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.records.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        for (name, t) in &self.records {
            out.extend_from_slice(&(name.len() as u32).to_le_bytes());
            out.extend_from_slice(name.as_bytes());
            out.extend_from_slice(&(t.rank() as u32).to_le_bytes());
            for &d in t.shape() {
                out.extend_from_slice(&(d as u32).to_le_bytes());
            }
            for v in t.data() {
                out.extend_from_slice(&v.to_le_bytes());
            }
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        out
    }

    /// Verifies the checksum before anything else, so truncation and
    /// corruption both surface as [`ModelError::ChecksumMismatch`].
    pub fn from_bytes(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < CHECKPOINT_MAGIC.len() + 1 + 4 {
            return Err(ModelError::ChecksumMismatch { stored: 0, computed: crc32fast::hash(bytes) });
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(ModelError::ChecksumMismatch { stored, computed });
        }
        if &body[..4] != CHECKPOINT_MAGIC {
            return Err(ModelError::MalformedCheckpoint("bad magic".into()));
        }
        if body[4] != CHECKPOINT_VERSION {
            return Err(ModelError::MalformedCheckpoint(format!("unsupported version {}", body[4])));
        }
        let mut r = Reader { bytes: body, pos: 5 };
        let mut records = Vec::new();
        while r.pos < body.len() {
            let len = r.u32()? as usize;
            let name = String::from_utf8(r.take(len)?.to_vec())
                .map_err(|_| ModelError::MalformedCheckpoint("record name is not UTF-8".into()))?;
            let rank = r.u32()? as usize;
            let shape = (0..rank).map(|_| r.u32().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let raw = r.take(numel * 8)?;
            let data = raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes"))).collect();
            let t = Tensor::new(shape, data).map_err(|e| ModelError::MalformedCheckpoint(format!("{name}: {e}")))?;
            records.push((name, t));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        Ok(fs::write(path, self.to_bytes())?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&fs::read(path)?)
    }

    /// Copies parameter values (and optimizer state when `adam` is given)
    /// into a freshly built model. Every model parameter must be present
    /// with the same shape.
    pub fn restore(&self, model: &mut Wglin, adam: Option<&mut Adam>) -> Result<()> {
        let ids: Vec<_> = model.params.ids().collect();
        let lookup = |name: &str, want: &[usize]| -> Result<Tensor> {
            let t =
                self.get(name).ok_or_else(|| ModelError::ConfigMismatch(format!("checkpoint has no record {name}")))?;
            if t.shape() != want {
                return Err(ModelError::ConfigMismatch(format!(
                    "{name}: checkpoint shape {:?}, model expects {want:?}",
                    t.shape()
                )));
            }
            Ok(t.clone())
        };
        for &id in &ids {
            let name = model.params.name(id).to_string();
            let t = lookup(&name, model.params.value(id).shape())?;
            model.params.set_value(id, t)?;
        }
        if let Some(adam) = adam {
            for (k, &id) in ids.iter().enumerate() {
                let name = model.params.name(id);
                let shape = model.params.value(id).shape();
                adam.m[k] = lookup(&format!("adam.m.{name}"), shape)?;
                adam.v[k] = lookup(&format!("adam.v.{name}"), shape)?;
            }
            adam.set_steps(lookup(STEP_RECORD, &[])?.item() as u64);
        }
        Ok(())
    }
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl Reader<'_> {
    fn take(&mut self, n: usize) -> Result<&[u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len());
        let end =
            end.ok_or_else(|| ModelError::MalformedCheckpoint(format!("record truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }
}

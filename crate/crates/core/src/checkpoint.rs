//! Binary checkpoints.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! magic      8 bytes  "MCTNETCK"
//! version    u32      1
//! kind       u8       0 = network weights, 1 = ground-truth oracle
//! digest     32 bytes SHA-256 of the resolved network config
//! count      u64      number of records
//! record     name_len u32, name (UTF-8), tag u8 (0 learnable, 1 buffer),
//!            ndim u32, dims u64 x ndim, values f64 x numel
//! ```
//!
//! Values are stored bit-for-bit, so save/load is an exact round trip.

use std::fs;
use std::path::Path;

use crate::tensor::{ParamKind, ParamStore, Tensor};
use crate::{io_error, Error, Result};

pub const MAGIC: &[u8; 8] = b"MCTNETCK";
pub const VERSION: u32 = 1;

#[derive(Copy, Clone, Debug, PartialEq, Eq)]
pub enum CheckpointKind {
    Weights,
    /// Predicts the ground-truth mask; used to test the evaluation plumbing.
    Oracle,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub kind: CheckpointKind,
    pub digest: [u8; 32],
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_store(store: &ParamStore, digest: [u8; 32]) -> Self {
        Self {
            kind: CheckpointKind::Weights,
            digest,
            records: store
                .iter()
                .map(|(_, p)| Record {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.clone(),
                })
                .collect(),
        }
    }

    pub fn oracle(digest: [u8; 32]) -> Self {
        Self {
            kind: CheckpointKind::Oracle,
            digest,
            records: Vec::new(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.push(match self.kind {
            CheckpointKind::Weights => 0,
            CheckpointKind::Oracle => 1,
        });
        out.extend_from_slice(&self.digest);
        out.extend_from_slice(&(self.records.len() as u64).to_le_bytes());
        for r in &self.records {
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            out.push(match r.kind {
                ParamKind::Learnable => 0,
                ParamKind::Buffer => 1,
            });
            out.extend_from_slice(&(r.value.ndim() as u32).to_le_bytes());
            for &d in r.value.shape() {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.value.to_le_bytes());
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        let mut rd = Reader { bytes, pos: 0 };
        if rd.take(8)? != MAGIC {
            return Err(Error::Checkpoint("not a checkpoint (bad magic)".into()));
        }
        let version = rd.u32()?;
        if version != VERSION {
            return Err(Error::Checkpoint(format!("unsupported version {version}")));
        }
        let kind = match rd.u8()? {
            0 => CheckpointKind::Weights,
            1 => CheckpointKind::Oracle,
            k => return Err(Error::Checkpoint(format!("unknown checkpoint kind {k}"))),
        };
        let digest: [u8; 32] = rd.take(32)?.try_into().unwrap();
        let count = rd.u64()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for _ in 0..count {
            let len = rd.u32()? as usize;
            let name = String::from_utf8(rd.take(len)?.to_vec())
                .map_err(|_| Error::Checkpoint(format!("record name at byte {} is not UTF-8", rd.pos)))?;
            let kind = match rd.u8()? {
                0 => ParamKind::Learnable,
                1 => ParamKind::Buffer,
                t => return Err(Error::Checkpoint(format!("{name}: unknown record tag {t}"))),
            };
            let ndim = rd.u32()? as usize;
            let shape = (0..ndim).map(|_| rd.u64().map(|d| d as usize)).collect::<Result<Vec<_>>>()?;
            let numel: usize = shape.iter().product();
            let data = rd
                .take(numel.checked_mul(8).ok_or_else(|| Error::Checkpoint(format!("{name}: oversized record")))?)?
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect();
            let value = Tensor::new(shape, data)?;
            records.push(Record { name, kind, value });
        }
        if rd.pos != bytes.len() {
            return Err(Error::Checkpoint(format!("{} trailing bytes", bytes.len() - rd.pos)));
        }
        Ok(Self { kind, digest, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()).map_err(io_error(path))
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::decode(&fs::read(path).map_err(io_error(path))?)
    }

    /// Refuses checkpoints written for a different network configuration.
    pub fn check_digest(&self, expected: &[u8; 32]) -> Result<()> {
        if &self.digest != expected {
            return Err(Error::Checkpoint(format!(
                "config digest mismatch: checkpoint has {}, config resolves to {}; \
                 the [network] section differs from the one used for training",
                hex(&self.digest),
                hex(expected)
            )));
        }
        Ok(())
    }

    /// Copies every record into the store; names, kinds and shapes must
    /// match one to one.
    pub fn restore(&self, store: &mut ParamStore) -> Result<()> {
        if self.kind != CheckpointKind::Weights {
            return Err(Error::Checkpoint("oracle checkpoints carry no weights".into()));
        }
        if self.records.len() != store.len() {
            return Err(Error::Checkpoint(format!(
                "checkpoint has {} records, network has {} parameters",
                self.records.len(),
                store.len()
            )));
        }
        for r in &self.records {
            let id = store
                .id(&r.name)
                .ok_or_else(|| Error::Checkpoint(format!("unknown parameter {}", r.name)))?;
            let p = store.get_mut(id);
            if p.kind != r.kind || p.value.shape() != r.value.shape() {
                return Err(Error::Checkpoint(format!(
                    "{}: expected {:?} {:?}, found {:?} {:?}",
                    r.name,
                    p.kind,
                    p.value.shape(),
                    r.kind,
                    r.value.shape()
                )));
            }
            p.value = r.value.clone();
        }
        Ok(())
    }
}

pub fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).filter(|&e| e <= self.bytes.len()).ok_or_else(|| {
            Error::Checkpoint(format!("truncated at byte {} (wanted {n} more)", self.pos))
        })?;
        let s = &self.bytes[self.pos..end];
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

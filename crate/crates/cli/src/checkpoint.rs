//! Checkpoint container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "BDC1"  u16 version  u32 record_count
//! per record:
//!   u32 name_len  name (UTF-8)
//!   u8 dtype (0 = f32, 1 = f64, 2 = i32, 3 = packed bits)
//!   u8 rank  rank x u64 dims
//!   u64 payload_len  payload
//! u32 CRC32 of every preceding byte
//! ```
//!
//! Bit payloads hold the u64 words of a packed ±1 tensor, rows padded to
//! whole words.

use std::path::Path;

use bdc_core::params::ParamStore;
use bdc_core::tensor::{BitTensor, Tensor};
use thiserror::Error;

pub const MAGIC: &[u8; 4] = b"BDC1";
pub const VERSION: u16 = 1;

#[derive(Debug, Error, PartialEq, Eq)]
pub enum CheckpointError {
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("unsupported checkpoint version {0}")]
    UnsupportedVersion(u16),
    #[error("checkpoint truncated")]
    Truncated,
    #[error("checkpoint CRC mismatch (stored {stored:08x}, computed {computed:08x})")]
    CrcMismatch { stored: u32, computed: u32 },
    #[error("unknown dtype code {0}")]
    BadDtype(u8),
    #[error("malformed record: {0}")]
    BadRecord(String),
    #[error("checkpoint does not match the model: {0}")]
    ModelMismatch(String),
    #[error("cannot access checkpoint file: {0}")]
    Io(String),
}

type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Debug, Clone, PartialEq)]
pub enum RecordData {
    F32(Vec<f32>),
    F64(Vec<f64>),
    I32(Vec<i32>),
    /// Packed words of a ±1 tensor.
    Bits(Vec<u64>),
}

impl RecordData {
    fn code(&self) -> u8 {
        match self {
            RecordData::F32(_) => 0,
            RecordData::F64(_) => 1,
            RecordData::I32(_) => 2,
            RecordData::Bits(_) => 3,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dims: Vec<usize>,
    pub data: RecordData,
}

impl Record {
    pub fn f64(name: &str, t: &Tensor) -> Self {
        Self {
            name: name.into(),
            dims: t.dims().to_vec(),
            data: RecordData::F64(t.data().to_vec()),
        }
    }

    pub fn bits(name: &str, b: &BitTensor) -> Self {
        Self {
            name: name.into(),
            dims: b.dims().to_vec(),
            data: RecordData::Bits(b.words().to_vec()),
        }
    }

    /// Checks that the payload length agrees with the dims.
    fn validate(&self) -> Result<()> {
        let n: usize = self.dims.iter().product();
        let ok = match &self.data {
            RecordData::F32(v) => v.len() == n,
            RecordData::F64(v) => v.len() == n,
            RecordData::I32(v) => v.len() == n,
            RecordData::Bits(w) => BitTensor::from_words(&self.dims, w.clone()).is_ok(),
        };
        if ok {
            Ok(())
        } else {
            Err(CheckpointError::BadRecord(format!("{}: payload does not match dims {:?}", self.name, self.dims)))
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self.pos.checked_add(n).ok_or(CheckpointError::Truncated)?;
        let s = self.buf.get(self.pos..end).ok_or(CheckpointError::Truncated)?;
        self.pos = end;
        Ok(s)
    }

    fn array<const N: usize>(&mut self) -> Result<[u8; N]> {
        Ok(self.take(N)?.try_into().expect("slice of length N"))
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.array::<1>()?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.array()?))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.array()?))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(self.array()?))
    }

    fn usize(&mut self) -> Result<usize> {
        usize::try_from(self.u64()?).map_err(|_| CheckpointError::BadRecord("size overflows usize".into()))
    }
}

fn decode_payload(code: u8, bytes: &[u8]) -> Result<RecordData> {
    let bad = |w: usize| {
        if bytes.len().is_multiple_of(w) {
            Ok(())
        } else {
            Err(CheckpointError::BadRecord(format!("payload of {} bytes is not a multiple of {w}", bytes.len())))
        }
    };
    Ok(match code {
        0 => {
            bad(4)?;
            RecordData::F32(bytes.chunks_exact(4).map(|c| f32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        1 => {
            bad(8)?;
            RecordData::F64(bytes.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        2 => {
            bad(4)?;
            RecordData::I32(bytes.chunks_exact(4).map(|c| i32::from_le_bytes(c.try_into().unwrap())).collect())
        }
        3 => {
            bad(8)?;
            RecordData::Bits(bytes.chunks_exact(8).map(|c| u64::from_le_bytes(c.try_into().unwrap())).collect())
        }
        other => return Err(CheckpointError::BadDtype(other)),
    })
}

impl Checkpoint {
    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        let count = u32::try_from(self.records.len()).map_err(|_| CheckpointError::BadRecord("too many records".into()))?;
        out.extend_from_slice(&count.to_le_bytes());
        for r in &self.records {
            r.validate()?;
            let name = r.name.as_bytes();
            let name_len = u32::try_from(name.len()).map_err(|_| CheckpointError::BadRecord("name too long".into()))?;
            let rank = u8::try_from(r.dims.len()).map_err(|_| CheckpointError::BadRecord("rank above 255".into()))?;
            out.extend_from_slice(&name_len.to_le_bytes());
            out.extend_from_slice(name);
            out.push(r.data.code());
            out.push(rank);
            for &d in &r.dims {
                out.extend_from_slice(&(d as u64).to_le_bytes());
            }
            let payload: Vec<u8> = match &r.data {
                RecordData::F32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                RecordData::F64(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                RecordData::I32(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
                RecordData::Bits(v) => v.iter().flat_map(|x| x.to_le_bytes()).collect(),
            };
            out.extend_from_slice(&(payload.len() as u64).to_le_bytes());
            out.extend_from_slice(&payload);
        }
        let crc = crc32fast::hash(&out);
        out.extend_from_slice(&crc.to_le_bytes());
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Self> {
        if bytes.len() < MAGIC.len() || &bytes[..4] != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        if bytes.len() < 4 + 2 + 4 + 4 {
            return Err(CheckpointError::Truncated);
        }
        let (body, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        let computed = crc32fast::hash(body);
        if stored != computed {
            return Err(CheckpointError::CrcMismatch { stored, computed });
        }
        let mut r = Reader { buf: body, pos: 4 };
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::UnsupportedVersion(version));
        }
        let count = r.u32()?;
        let mut records = Vec::new();
        for _ in 0..count {
            let name_len = r.u32()? as usize;
            let name = std::str::from_utf8(r.take(name_len)?)
                .map_err(|_| CheckpointError::BadRecord("name is not UTF-8".into()))?
                .to_string();
            let code = r.u8()?;
            let rank = r.u8()? as usize;
            let dims = (0..rank).map(|_| r.usize()).collect::<Result<Vec<_>>>()?;
            let len = r.usize()?;
            let data = decode_payload(code, r.take(len)?)?;
            let rec = Record { name, dims, data };
            rec.validate()?;
            records.push(rec);
        }
        if r.pos != body.len() {
            return Err(CheckpointError::BadRecord("trailing bytes after the last record".into()));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.encode()?).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let bytes = std::fs::read(path).map_err(|e| CheckpointError::Io(format!("{}: {e}", path.display())))?;
        Self::decode(&bytes)
    }

    /// Every parameter and buffer, as f64 records in registration order.
    /// Binarized weights are stored as their latent values.
    pub fn from_store(store: &ParamStore) -> Self {
        Self {
            records: store.entries().map(|(_, e)| Record::f64(&e.name, e.tensor())).collect(),
        }
    }

    /// Overwrites every entry of `store`. The record set must match the
    /// store's names and shapes exactly.
    pub fn apply_to(&self, store: &mut ParamStore) -> Result<()> {
        if self.records.len() != store.len() {
            return Err(CheckpointError::ModelMismatch(format!(
                "{} records for {} parameters",
                self.records.len(),
                store.len()
            )));
        }
        let mut seen = std::collections::HashSet::new();
        for r in &self.records {
            if !seen.insert(r.name.as_str()) {
                return Err(CheckpointError::ModelMismatch(format!("{} appears twice", r.name)));
            }
            let RecordData::F64(v) = &r.data else {
                return Err(CheckpointError::ModelMismatch(format!("{} is not f64", r.name)));
            };
            let t = Tensor::new(&r.dims, v.clone()).map_err(|e| CheckpointError::BadRecord(e.to_string()))?;
            store
                .set(&r.name, t)
                .map_err(|e| CheckpointError::ModelMismatch(format!("{}: {e}", r.name)))?;
        }
        Ok(())
    }
}

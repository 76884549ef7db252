//! Tensor records and the checkpoint container.
//!
//! A tensor record is
//!
//! ```text
//! u16 name_len | name (UTF-8) | u8 dtype | u8 ndim | u32 dims[ndim] | payload
//! ```
//!
//! with all integers little-endian and the payload row-major little-endian
//! `f64` (dtype 1) or `f32` (dtype 2). A checkpoint file is
//!
//! ```text
//! b"RFCK" | u8 version | u32 round | u32 record_count | records...
//! ```

use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::{ParamSet, Part, Tensor};

pub const CHECKPOINT_MAGIC: [u8; 4] = *b"RFCK";
pub const CHECKPOINT_VERSION: u8 = 1;

/// On-the-wire scalar encoding.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DType {
    #[default]
    F64,
    F32,
}

impl DType {
    pub fn tag(self) -> u8 {
        match self {
            DType::F64 => 1,
            DType::F32 => 2,
        }
    }

    pub fn from_tag(tag: u8) -> Option<DType> {
        match tag {
            1 => Some(DType::F64),
            2 => Some(DType::F32),
            _ => None,
        }
    }

    pub fn size(self) -> usize {
        match self {
            DType::F64 => 8,
            DType::F32 => 4,
        }
    }

    /// Value after a round trip through this encoding.
    pub fn quantize(self, v: f64) -> f64 {
        match self {
            DType::F64 => v,
            DType::F32 => v as f32 as f64,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct TensorRecord {
    pub name: String,
    pub dtype: DType,
    pub tensor: Tensor,
}

impl TensorRecord {
    pub fn new(name: impl Into<String>, dtype: DType, tensor: Tensor) -> Self {
        TensorRecord { name: name.into(), dtype, tensor }
    }

    pub fn encoded_len(&self) -> usize {
        2 + self.name.len() + 2 + 4 * self.tensor.shape().len() + self.tensor.len() * self.dtype.size()
    }

    pub fn encode_into(&self, out: &mut Vec<u8>) -> Result<()> {
        let name_len = u16::try_from(self.name.len())
            .map_err(|_| Error::config(format!("record name too long: {} bytes", self.name.len())))?;
        let ndim = u8::try_from(self.tensor.shape().len())
            .map_err(|_| Error::config("tensor rank exceeds 255"))?;
        out.extend_from_slice(&name_len.to_le_bytes());
        out.extend_from_slice(self.name.as_bytes());
        out.push(self.dtype.tag());
        out.push(ndim);
        for &d in self.tensor.shape() {
            let d = u32::try_from(d).map_err(|_| Error::config("tensor extent exceeds u32"))?;
            out.extend_from_slice(&d.to_le_bytes());
        }
        match self.dtype {
            DType::F64 => {
                for v in self.tensor.data() {
                    out.extend_from_slice(&v.to_le_bytes());
                }
            }
            DType::F32 => {
                for &v in self.tensor.data() {
                    out.extend_from_slice(&(v as f32).to_le_bytes());
                }
            }
        }
        Ok(())
    }

    /// Decodes one record from the front of `reader`.
    pub fn decode_from(reader: &mut Reader<'_>) -> Result<TensorRecord> {
        let name_len = usize::from(reader.u16()?);
        let name = std::str::from_utf8(reader.take(name_len)?)
            .map_err(|_| Error::Corruption("record name is not UTF-8".into()))?
            .to_string();
        let tag = reader.u8()?;
        let dtype = DType::from_tag(tag).ok_or_else(|| Error::Corruption(format!("unknown dtype tag {tag}")))?;
        let ndim = usize::from(reader.u8()?);
        let mut shape = Vec::with_capacity(ndim);
        for _ in 0..ndim {
            shape.push(reader.u32()? as usize);
        }
        let numel = shape
            .iter()
            .try_fold(1usize, |acc, &d| acc.checked_mul(d))
            .ok_or_else(|| Error::Corruption(format!("record {name}: shape {shape:?} overflows")))?;
        let bytes = numel
            .checked_mul(dtype.size())
            .filter(|&b| b <= reader.remaining())
            .ok_or_else(|| {
                Error::Corruption(format!(
                    "record {name}: shape {shape:?} needs more payload than the {} bytes left",
                    reader.remaining()
                ))
            })?;
        let raw = reader.take(bytes)?;
        let data: Vec<f64> = match dtype {
            DType::F64 => raw.chunks_exact(8).map(|c| f64::from_le_bytes(c.try_into().unwrap())).collect(),
            DType::F32 => raw
                .chunks_exact(4)
                .map(|c| f64::from(f32::from_le_bytes(c.try_into().unwrap())))
                .collect(),
        };
        Ok(TensorRecord { name, dtype, tensor: Tensor::new(shape, data)? })
    }
}

/// Bounds-checked little-endian cursor. Running past the end is a
/// corruption error.
pub struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Reader { buf, pos: 0 }
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        if n > self.remaining() {
            return Err(Error::Corruption(format!(
                "need {n} bytes at offset {}, only {} left",
                self.pos,
                self.remaining()
            )));
        }
        let s = &self.buf[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    pub fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    pub fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(self.take(2)?.try_into().unwrap()))
    }

    pub fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().unwrap()))
    }
}

/// Parameter sets of one or more parts, stored under `part/` prefixes.
#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub round: u32,
    pub records: Vec<TensorRecord>,
}

impl Checkpoint {
    pub fn from_parts(round: u32, parts: &[&ParamSet], dtype: DType) -> Checkpoint {
        let records = parts
            .iter()
            .flat_map(|p| {
                p.iter()
                    .map(move |(name, t)| TensorRecord::new(format!("{}/{name}", p.part.prefix()), dtype, t.clone()))
            })
            .collect();
        Checkpoint { round, records }
    }

    /// Extracts one part, stripping its prefix.
    pub fn part(&self, part: Part) -> ParamSet {
        let prefix = format!("{}/", part.prefix());
        let mut set = ParamSet::new(part).with_round(self.round);
        for r in &self.records {
            if let Some(name) = r.name.strip_prefix(&prefix) {
                set.insert(name, r.tensor.clone());
            }
        }
        set
    }

    pub fn encode(&self) -> Result<Vec<u8>> {
        let mut out = Vec::with_capacity(13 + self.records.iter().map(TensorRecord::encoded_len).sum::<usize>());
        out.extend_from_slice(&CHECKPOINT_MAGIC);
        out.push(CHECKPOINT_VERSION);
        out.extend_from_slice(&self.round.to_le_bytes());
        let n = u32::try_from(self.records.len()).map_err(|_| Error::config("too many records"))?;
        out.extend_from_slice(&n.to_le_bytes());
        for r in &self.records {
            r.encode_into(&mut out)?;
        }
        Ok(out)
    }

    pub fn decode(bytes: &[u8]) -> Result<Checkpoint> {
        let mut rd = Reader::new(bytes);
        let magic = rd.take(4).map_err(|_| Error::Framing("checkpoint shorter than its header".into()))?;
        if magic != CHECKPOINT_MAGIC {
            return Err(Error::protocol(format!("bad checkpoint magic {magic:02x?}")));
        }
        let version = rd.u8()?;
        if version != CHECKPOINT_VERSION {
            return Err(Error::protocol(format!("unsupported checkpoint version {version}")));
        }
        let round = rd.u32()?;
        let n = rd.u32()?;
        let mut records = Vec::new();
        for _ in 0..n {
            records.push(TensorRecord::decode_from(&mut rd)?);
        }
        if rd.remaining() != 0 {
            return Err(Error::Corruption(format!("{} trailing bytes after checkpoint", rd.remaining())));
        }
        Ok(Checkpoint { round, records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        fs::write(path, self.encode()?)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Checkpoint> {
        Checkpoint::decode(&fs::read(path)?)
    }
}

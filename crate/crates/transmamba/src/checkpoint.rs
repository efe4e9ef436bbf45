//! Binary checkpoint format.
//!
//! ```text
//! "TMAM"  u32 version
//! u32 len, UTF-8 config text
//! u32 tensor count
//! per tensor: u32 len, UTF-8 name, u8 dtype tag, u32 rank, u64 extents…, raw little-endian data
//! ```
//!
//! All integers are little-endian.

use std::path::Path;

use transmamba_core::model::{Model, ParamStore};
use transmamba_core::{DType, Scalar, Tensor};

use crate::config::RunConfig;
use crate::error::CliError;

pub const MAGIC: &[u8; 4] = b"TMAM";
pub const VERSION: u32 = 1;

/// A tensor as stored, before any element-type conversion.
#[derive(Debug, Clone, PartialEq)]
pub struct Record {
    pub name: String,
    pub dtype: DType,
    pub shape: Vec<usize>,
    /// Little-endian element bytes.
    pub bytes: Vec<u8>,
}

impl Record {
    pub fn from_tensor<S: Scalar>(name: &str, t: &Tensor<S>) -> Self {
        let mut bytes = Vec::with_capacity(t.numel() * S::DTYPE.size_of());
        for &v in t.data() {
            match S::DTYPE {
                DType::F32 => bytes.extend_from_slice(&(v.as_f64() as f32).to_le_bytes()),
                DType::F64 => bytes.extend_from_slice(&v.as_f64().to_le_bytes()),
            }
        }
        Record {
            name: name.to_string(),
            dtype: S::DTYPE,
            shape: t.shape().to_vec(),
            bytes,
        }
    }

    /// Decodes into `S`; exact when `S` is the stored type.
    pub fn to_tensor<S: Scalar>(&self) -> Result<Tensor<S>, CliError> {
        let data: Vec<S> = match self.dtype {
            DType::F32 => self
                .bytes
                .chunks_exact(4)
                .map(|c| S::lit(f32::from_le_bytes(c.try_into().expect("chunk of 4")) as f64))
                .collect(),
            DType::F64 => self
                .bytes
                .chunks_exact(8)
                .map(|c| S::lit(f64::from_le_bytes(c.try_into().expect("chunk of 8"))))
                .collect(),
        };
        Tensor::new(self.shape.clone(), data).map_err(|e| CliError::Checkpoint(format!("{}: {e}", self.name)))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config_text: String,
    pub records: Vec<Record>,
}

impl Checkpoint {
    pub fn from_model<S: Scalar>(config: &RunConfig, params: &ParamStore<S>) -> Self {
        Checkpoint {
            config_text: config.to_text(),
            records: params.iter().map(|p| Record::from_tensor(&p.name, &p.value)).collect(),
        }
    }

    pub fn encode(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        put_str(&mut out, &self.config_text);
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            put_str(&mut out, &r.name);
            out.push(r.dtype.tag());
            out.extend_from_slice(&(r.shape.len() as u32).to_le_bytes());
            for &e in &r.shape {
                out.extend_from_slice(&(e as u64).to_le_bytes());
            }
            out.extend_from_slice(&r.bytes);
        }
        out
    }

    pub fn decode(bytes: &[u8]) -> Result<Self, CliError> {
        let mut r = Reader { bytes, pos: 0 };
        if r.take(4)? != MAGIC {
            return Err(CliError::Checkpoint("missing TMAM magic".into()));
        }
        let version = r.u32()?;
        if version != VERSION {
            return Err(CliError::Checkpoint(format!("unsupported version {version}")));
        }
        let config_text = r.string()?;
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(4096));
        for _ in 0..count {
            let name = r.string()?;
            let tag = r.take(1)?[0];
            let dtype = DType::from_tag(tag).ok_or_else(|| CliError::Checkpoint(format!("{name}: unknown dtype tag {tag}")))?;
            let rank = r.u32()? as usize;
            let mut shape = Vec::with_capacity(rank.min(16));
            for _ in 0..rank {
                shape.push(usize::try_from(r.u64()?).map_err(|_| CliError::Checkpoint(format!("{name}: extent overflow")))?);
            }
            let numel = shape
                .iter()
                .try_fold(1usize, |a, &e| a.checked_mul(e))
                .and_then(|n| n.checked_mul(dtype.size_of()))
                .ok_or_else(|| CliError::Checkpoint(format!("{name}: size overflow")))?;
            let bytes = r.take(numel)?.to_vec();
            records.push(Record { name, dtype, shape, bytes });
        }
        if r.pos != bytes.len() {
            return Err(CliError::Checkpoint(format!("{} trailing bytes", bytes.len() - r.pos)));
        }
        Ok(Checkpoint { config_text, records })
    }

    pub fn save(&self, path: &Path) -> Result<(), CliError> {
        std::fs::write(path, self.encode()).map_err(|e| CliError::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self, CliError> {
        let bytes = std::fs::read(path).map_err(|e| CliError::io(path, e))?;
        Self::decode(&bytes)
    }

    pub fn config(&self) -> Result<RunConfig, CliError> {
        RunConfig::parse(&self.config_text)
    }

    /// Rebuilds the model the checkpoint was written from.
    pub fn model<S: Scalar>(&self) -> Result<(RunConfig, Model<S>), CliError> {
        let cfg = self.config()?;
        let mut model = Model::<S>::new(cfg.model.clone(), cfg.train.seed)?;
        let named = self
            .records
            .iter()
            .map(|r| Ok((r.name.clone(), r.to_tensor::<S>()?)))
            .collect::<Result<Vec<_>, CliError>>()?;
        model.params.load(named)?;
        Ok((cfg, model))
    }
}

fn put_str(out: &mut Vec<u8>, s: &str) {
    out.extend_from_slice(&(s.len() as u32).to_le_bytes());
    out.extend_from_slice(s.as_bytes());
}

struct Reader<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8], CliError> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.bytes.len())
            .ok_or_else(|| CliError::Checkpoint(format!("truncated at byte {}", self.pos)))?;
        let s = &self.bytes[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u32(&mut self) -> Result<u32, CliError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    fn u64(&mut self) -> Result<u64, CliError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    fn string(&mut self) -> Result<String, CliError> {
        let n = self.u32()? as usize;
        String::from_utf8(self.take(n)?.to_vec()).map_err(|_| CliError::Checkpoint("invalid UTF-8".into()))
    }
}

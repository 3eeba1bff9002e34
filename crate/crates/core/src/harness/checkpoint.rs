//! Binary tensor container.
//!
//! Layout, all integers little-endian:
//!
//! ```text
//! "M3FS"  u16 version  u32 record_count
//! record: u32 name_len, name (UTF-8), u8 dtype, u8 rank, rank × u64 dims,
//!         payload, u32 CRC32 of every preceding byte of the record
//! ```
//!
//! dtype 0 is row-major `f64`, dtype 1 is raw bytes (rank 1).

use std::path::Path;

use m3fas_numerics::{RunningStats, Tensor};
use thiserror::Error;

use super::config::RunConfig;
use crate::model::{Model, ModelConfig};

pub const MAGIC: &[u8; 4] = b"M3FS";
pub const VERSION: u16 = 1;

const DTYPE_F64: u8 = 0;
const DTYPE_BYTES: u8 = 1;

pub const CONFIG_RECORD: &str = "meta.config";
pub const EPOCH_RECORD: &str = "meta.best_epoch";
pub const HTER_RECORD: &str = "meta.best_val_hter";

#[derive(Debug, Error)]
pub enum CheckpointError {
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("not a checkpoint (bad magic bytes)")]
    BadMagic,
    #[error("checkpoint version {found} is not supported (expected {expected})")]
    VersionMismatch { found: u16, expected: u16 },
    #[error("record {index} (`{name}`) is corrupt: checksum mismatch")]
    CorruptRecord { index: usize, name: String },
    #[error("checkpoint is truncated or malformed: {0}")]
    Malformed(String),
    #[error("record `{record}` has shape {found:?}, the model expects {expected:?}")]
    ShapeMismatch {
        record: String,
        expected: Vec<usize>,
        found: Vec<usize>,
    },
    #[error("record `{0}` is missing")]
    MissingRecord(String),
    #[error("record `{0}` is not used by the model")]
    UnexpectedRecord(String),
    #[error("embedded configuration is invalid: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, CheckpointError>;

#[derive(Clone, Debug, PartialEq)]
pub enum RecordData {
    F64 { dims: Vec<usize>, values: Vec<f64> },
    Bytes(Vec<u8>),
}

#[derive(Clone, Debug, PartialEq)]
pub struct Record {
    pub name: String,
    pub data: RecordData,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Checkpoint {
    pub records: Vec<Record>,
}

fn running_names(bn: &str) -> (String, String) {
    (format!("{bn}.running_mean"), format!("{bn}.running_var"))
}

struct Reader<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Reader<'a> {
    fn take(&mut self, n: usize) -> Result<&'a [u8]> {
        let end = self
            .pos
            .checked_add(n)
            .filter(|&e| e <= self.buf.len())
            .ok_or_else(|| {
                CheckpointError::Malformed(format!("need {n} bytes at offset {}", self.pos))
            })?;
        let s = &self.buf[self.pos..end];
        self.pos = end;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.take(1)?[0])
    }

    fn u16(&mut self) -> Result<u16> {
        Ok(u16::from_le_bytes(
            self.take(2)?.try_into().expect("2 bytes"),
        ))
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(
            self.take(4)?.try_into().expect("4 bytes"),
        ))
    }

    fn u64(&mut self) -> Result<u64> {
        Ok(u64::from_le_bytes(
            self.take(8)?.try_into().expect("8 bytes"),
        ))
    }
}

impl Checkpoint {
    pub fn get(&self, name: &str) -> Option<&Record> {
        self.records.iter().find(|r| r.name == name)
    }

    /// Snapshot of a model's parameters and running statistics plus run metadata.
    pub fn from_model(
        model: &Model,
        config: &RunConfig,
        best_epoch: usize,
        best_val_hter: f64,
    ) -> Self {
        let mut records = vec![
            Record {
                name: CONFIG_RECORD.into(),
                data: RecordData::Bytes(config.to_text().into_bytes()),
            },
            Record {
                name: EPOCH_RECORD.into(),
                data: RecordData::F64 {
                    dims: vec![],
                    values: vec![best_epoch as f64],
                },
            },
            Record {
                name: HTER_RECORD.into(),
                data: RecordData::F64 {
                    dims: vec![],
                    values: vec![best_val_hter],
                },
            },
        ];
        for (_, p) in model.params.iter() {
            records.push(Record {
                name: p.name.clone(),
                data: RecordData::F64 {
                    dims: p.value.shape().to_vec(),
                    values: p.value.data().to_vec(),
                },
            });
        }
        for (name, stats) in model.bn_names().iter().zip(&model.running) {
            let (m, v) = running_names(name);
            for (n, vals) in [(m, &stats.mean), (v, &stats.var)] {
                records.push(Record {
                    name: n,
                    data: RecordData::F64 {
                        dims: vec![vals.len()],
                        values: vals.clone(),
                    },
                });
            }
        }
        Self { records }
    }

    pub fn config(&self) -> Result<RunConfig> {
        match self.get(CONFIG_RECORD).map(|r| &r.data) {
            Some(RecordData::Bytes(b)) => {
                let text =
                    std::str::from_utf8(b).map_err(|e| CheckpointError::Config(e.to_string()))?;
                RunConfig::parse(text).map_err(|e| CheckpointError::Config(e.to_string()))
            }
            Some(_) => Err(CheckpointError::Config(
                "configuration record is not text".into(),
            )),
            None => Err(CheckpointError::MissingRecord(CONFIG_RECORD.into())),
        }
    }

    fn scalar(&self, name: &str) -> Result<f64> {
        match self.get(name).map(|r| &r.data) {
            Some(RecordData::F64 { values, .. }) if values.len() == 1 => Ok(values[0]),
            Some(_) => Err(CheckpointError::Malformed(format!(
                "`{name}` is not a scalar"
            ))),
            None => Err(CheckpointError::MissingRecord(name.into())),
        }
    }

    pub fn best_epoch(&self) -> Result<usize> {
        Ok(self.scalar(EPOCH_RECORD)? as usize)
    }

    pub fn best_val_hter(&self) -> Result<f64> {
        self.scalar(HTER_RECORD)
    }

    /// Build a model for `config` and fill it from the records.
    pub fn restore(&self, config: &ModelConfig) -> Result<Model> {
        let mut model =
            Model::new(config.clone()).map_err(|e| CheckpointError::Config(e.to_string()))?;
        let f64_record = |name: &str| -> Result<(&Vec<usize>, &Vec<f64>)> {
            match self.get(name).map(|r| &r.data) {
                Some(RecordData::F64 { dims, values }) => Ok((dims, values)),
                Some(RecordData::Bytes(_)) => Err(CheckpointError::Malformed(format!(
                    "`{name}` is not numeric"
                ))),
                None => Err(CheckpointError::MissingRecord(name.into())),
            }
        };
        let ids: Vec<_> = model.params.ids().collect();
        let mut used = std::collections::HashSet::new();
        for id in ids {
            let p = model.params.get(id);
            let name = p.name.clone();
            let (dims, values) = f64_record(&name)?;
            if dims[..] != *p.value.shape() {
                return Err(CheckpointError::ShapeMismatch {
                    record: name,
                    expected: p.value.shape().to_vec(),
                    found: dims.clone(),
                });
            }
            let t = Tensor::new(dims.clone(), values.clone())
                .map_err(|e| CheckpointError::Malformed(e.to_string()))?;
            model.params.set_value(id, t).expect("shape checked");
            used.insert(name);
        }
        let bn_names = model.bn_names().to_vec();
        for (i, bn) in bn_names.iter().enumerate() {
            let (mn, vn) = running_names(bn);
            let c = model.running[i].mean.len();
            let mut stats = RunningStats::new(c);
            for (n, slot) in [(mn, &mut stats.mean), (vn, &mut stats.var)] {
                let (dims, values) = f64_record(&n)?;
                if dims[..] != [c] {
                    return Err(CheckpointError::ShapeMismatch {
                        record: n,
                        expected: vec![c],
                        found: dims.clone(),
                    });
                }
                *slot = values.clone();
                used.insert(n);
            }
            model.running[i] = stats;
        }
        for r in &self.records {
            if !r.name.starts_with("meta.") && !used.contains(&r.name) {
                return Err(CheckpointError::UnexpectedRecord(r.name.clone()));
            }
        }
        Ok(model)
    }

    pub fn to_bytes(&self) -> Vec<u8> {
        let mut out = Vec::new();
        out.extend_from_slice(MAGIC);
        out.extend_from_slice(&VERSION.to_le_bytes());
        out.extend_from_slice(&(self.records.len() as u32).to_le_bytes());
        for r in &self.records {
            let start = out.len();
            out.extend_from_slice(&(r.name.len() as u32).to_le_bytes());
            out.extend_from_slice(r.name.as_bytes());
            match &r.data {
                RecordData::F64 { dims, values } => {
                    out.push(DTYPE_F64);
                    out.push(dims.len() as u8);
                    for &d in dims {
                        out.extend_from_slice(&(d as u64).to_le_bytes());
                    }
                    for v in values {
                        out.extend_from_slice(&v.to_le_bytes());
                    }
                }
                RecordData::Bytes(b) => {
                    out.push(DTYPE_BYTES);
                    out.push(1);
                    out.extend_from_slice(&(b.len() as u64).to_le_bytes());
                    out.extend_from_slice(b);
                }
            }
            let crc = crc32fast::hash(&out[start..]);
            out.extend_from_slice(&crc.to_le_bytes());
        }
        out
    }

    pub fn from_bytes(buf: &[u8]) -> Result<Self> {
        let mut r = Reader { buf, pos: 0 };
        if buf.len() < 4 || r.take(4)? != MAGIC {
            return Err(CheckpointError::BadMagic);
        }
        let version = r.u16()?;
        if version != VERSION {
            return Err(CheckpointError::VersionMismatch {
                found: version,
                expected: VERSION,
            });
        }
        let count = r.u32()? as usize;
        let mut records = Vec::with_capacity(count.min(1 << 16));
        for index in 0..count {
            let start = r.pos;
            // Structural fields are read before the checksum can be verified, so a
            // corrupted length is reported as corruption of this record.
            let parsed = (|| -> Result<Record> {
                let name_len = r.u32()? as usize;
                let name = String::from_utf8_lossy(r.take(name_len)?).into_owned();
                let dtype = r.u8()?;
                let rank = r.u8()? as usize;
                let mut dims = Vec::with_capacity(rank);
                for _ in 0..rank {
                    dims.push(
                        usize::try_from(r.u64()?)
                            .map_err(|_| CheckpointError::Malformed("dimension overflow".into()))?,
                    );
                }
                let data = match dtype {
                    DTYPE_F64 => {
                        let n = dims
                            .iter()
                            .try_fold(1usize, |a, &d| a.checked_mul(d))
                            .and_then(|n| n.checked_mul(8))
                            .ok_or_else(|| {
                                CheckpointError::Malformed("payload size overflow".into())
                            })?;
                        let bytes = r.take(n)?;
                        let values = bytes
                            .chunks_exact(8)
                            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
                            .collect();
                        RecordData::F64 { dims, values }
                    }
                    DTYPE_BYTES if rank == 1 => RecordData::Bytes(r.take(dims[0])?.to_vec()),
                    other => {
                        return Err(CheckpointError::Malformed(format!(
                            "dtype {other} with rank {rank}"
                        )))
                    }
                };
                Ok(Record { name, data })
            })();
            let name_hint = || {
                buf.get(start + 4..)
                    .and_then(|rest| {
                        let n = u32::from_le_bytes(buf.get(start..start + 4)?.try_into().ok()?)
                            as usize;
                        rest.get(..n.min(rest.len()).min(256))
                    })
                    .map(|b| String::from_utf8_lossy(b).into_owned())
                    .unwrap_or_default()
            };
            let record = match parsed {
                Ok(rec) => rec,
                Err(_) => {
                    return Err(CheckpointError::CorruptRecord {
                        index,
                        name: name_hint(),
                    })
                }
            };
            let body_end = r.pos;
            let stored = r.u32().map_err(|_| CheckpointError::CorruptRecord {
                index,
                name: record.name.clone(),
            })?;
            if crc32fast::hash(&buf[start..body_end]) != stored {
                return Err(CheckpointError::CorruptRecord {
                    index,
                    name: record.name,
                });
            }
            records.push(record);
        }
        if r.pos != buf.len() {
            return Err(CheckpointError::Malformed(format!(
                "{} trailing bytes",
                buf.len() - r.pos
            )));
        }
        Ok(Self { records })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_bytes())?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        Self::from_bytes(&std::fs::read(path)?)
    }
}

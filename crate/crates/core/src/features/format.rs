//! `FCIL` feature files.
//!
//! Little-endian layout:
//!
//! | field | type |
//! |---|---|
//! | magic `FCIL` | 4 bytes |
//! | version (= 1) | u32 |
//! | dim | u32 |
//! | rows | u64 |
//! | classes | u32 |
//! | tasks | u32 |
//! | class table | (class u32, task u32) × classes, ascending class id |
//! | rows | (feature f32 × dim, label u32, task u32) × rows |

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;

use super::FeatureDataset;
use crate::error::{Error, Result};

pub const FCIL_MAGIC: [u8; 4] = *b"FCIL";
pub const FCIL_VERSION: u32 = 1;
const HEADER_LEN: usize = 4 + 4 + 4 + 8 + 4 + 4;

pub fn encode_features(data: &FeatureDataset) -> Result<Vec<u8>> {
    data.validate()?;
    let dim = data.dim();
    let mut out =
        Vec::with_capacity(HEADER_LEN + data.class_count() * 8 + data.len() * (dim * 4 + 8));
    out.extend_from_slice(&FCIL_MAGIC);
    out.extend_from_slice(&FCIL_VERSION.to_le_bytes());
    out.extend_from_slice(&(dim as u32).to_le_bytes());
    out.extend_from_slice(&(data.len() as u64).to_le_bytes());
    out.extend_from_slice(&(data.class_count() as u32).to_le_bytes());
    out.extend_from_slice(&(data.task_count() as u32).to_le_bytes());
    for (&c, &t) in &data.class_to_task {
        out.extend_from_slice(&c.to_le_bytes());
        out.extend_from_slice(&t.to_le_bytes());
    }
    for ((row, &label), &task) in data
        .features
        .rows()
        .into_iter()
        .zip(&data.labels)
        .zip(&data.task_ids)
    {
        for &v in row {
            out.extend_from_slice(&(v as f32).to_le_bytes());
        }
        out.extend_from_slice(&label.to_le_bytes());
        out.extend_from_slice(&task.to_le_bytes());
    }
    Ok(out)
}

struct Cursor<'a> {
    bytes: &'a [u8],
    pos: usize,
}

impl<'a> Cursor<'a> {
    fn take(&mut self, n: usize, what: &str) -> Result<&'a [u8]> {
        if self.bytes.len() - self.pos < n {
            return Err(Error::Format {
                offset: self.pos as u64,
                message: format!(
                    "truncated file: need {n} bytes for {what}, {} left",
                    self.bytes.len() - self.pos
                ),
            });
        }
        let s = &self.bytes[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u32(&mut self, what: &str) -> Result<u32> {
        Ok(u32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }

    fn u64(&mut self, what: &str) -> Result<u64> {
        Ok(u64::from_le_bytes(self.take(8, what)?.try_into().unwrap()))
    }

    fn f32(&mut self, what: &str) -> Result<f32> {
        Ok(f32::from_le_bytes(self.take(4, what)?.try_into().unwrap()))
    }
}

pub fn decode_features(bytes: &[u8]) -> Result<FeatureDataset> {
    let mut cur = Cursor { bytes, pos: 0 };
    let magic = cur.take(4, "magic")?;
    if magic != FCIL_MAGIC {
        return Err(Error::Format {
            offset: 0,
            message: format!("bad magic {magic:?}, expected \"FCIL\""),
        });
    }
    let version = cur.u32("version")?;
    if version != FCIL_VERSION {
        return Err(Error::Format {
            offset: 4,
            message: format!("unsupported version {version}"),
        });
    }
    let dim = cur.u32("dim")? as usize;
    let rows = cur.u64("row count")?;
    let classes = cur.u32("class count")? as usize;
    let tasks = cur.u32("task count")? as usize;
    if dim == 0 {
        return Err(Error::Format {
            offset: 8,
            message: "dim must be positive".into(),
        });
    }
    let table_start = cur.pos;
    let row_bytes = dim as u64 * 4 + 8;
    let needed = (classes as u64) * 8 + rows.saturating_mul(row_bytes);
    if (bytes.len() - table_start) as u64 != needed {
        let message = if ((bytes.len() - table_start) as u64) < needed {
            format!(
                "truncated file: header promises {needed} payload bytes, found {}",
                bytes.len() - table_start
            )
        } else {
            format!(
                "{} trailing bytes after the last row",
                (bytes.len() - table_start) as u64 - needed
            )
        };
        return Err(Error::Format {
            offset: bytes.len().min(table_start + needed as usize) as u64,
            message,
        });
    }
    let mut table = BTreeMap::new();
    for _ in 0..classes {
        let at = cur.pos as u64;
        let c = cur.u32("class id")?;
        let t = cur.u32("class task")?;
        if table.insert(c, t).is_some() {
            return Err(Error::Validation(format!(
                "class {c} listed twice in the class table (byte {at})"
            )));
        }
    }
    let n = rows as usize;
    let mut features = Array2::<f64>::zeros((n, dim));
    let mut labels = Vec::with_capacity(n);
    let mut task_ids = Vec::with_capacity(n);
    for i in 0..n {
        for j in 0..dim {
            let v = cur.f32("feature")?;
            if !v.is_finite() {
                return Err(Error::Validation(format!(
                    "row {i} has a non-finite feature"
                )));
            }
            features[[i, j]] = v as f64;
        }
        labels.push(cur.u32("label")?);
        task_ids.push(cur.u32("task")?);
    }
    let data = FeatureDataset::with_class_table(features, labels, task_ids, table)?;
    if data.task_count() != tasks {
        return Err(Error::Format {
            offset: 20,
            message: format!(
                "header declares {tasks} tasks, class table has {}",
                data.task_count()
            ),
        });
    }
    Ok(data)
}

pub fn write_features(path: impl AsRef<Path>, data: &FeatureDataset) -> Result<()> {
    let path = path.as_ref();
    let bytes = encode_features(data)?;
    std::fs::write(path, bytes).map_err(|e| Error::io(path, e))
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureDataset> {
    let path = path.as_ref();
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_features(&bytes)
}

//! The TDEB binary container: embedding tables and checkpoints.
//!
//! Layout (all integers little-endian):
//!
//! ```text
//! offset 0   magic  54 44 45 42 ("TDEB")
//!        4   version byte (01)
//!        5   dtype byte: 01 = f32, 02 = f64
//!        6   2 reserved bytes (00 00)
//!        8   rows: u32
//!        12  dim:  u32
//!        16  payload: rows * dim little-endian floats
//!        ..  metadata: u32 byte length, then UTF-8 JSON
//! ```
//!
//! Embedding tables use dtype 01 and round-trip their f32 payload bitwise.
//! Checkpoints reuse the container with dtype 02 so parameters survive
//! exactly.

use crate::error::{Error, Result};
use serde::{Deserialize, Serialize};
use std::fs;
use std::path::Path;

pub const MAGIC: [u8; 4] = *b"TDEB";
pub const VERSION: u8 = 1;
pub const DTYPE_F32: u8 = 1;
pub const DTYPE_F64: u8 = 2;

const HEADER_LEN: u64 = 16;

// ---------------------------------------------------------------------------
// Raw container
// ---------------------------------------------------------------------------

/// Payload of one TDEB file, before interpretation.
#[derive(Debug, Clone)]
pub enum Payload {
    F32(Vec<f32>),
    F64(Vec<f64>),
}

impl Payload {
    pub fn len(&self) -> usize {
        match self {
            Payload::F32(v) => v.len(),
            Payload::F64(v) => v.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone)]
pub struct Container {
    pub rows: u32,
    pub dim: u32,
    pub payload: Payload,
    pub metadata: String,
}

pub fn write_container(path: &Path, container: &Container) -> Result<()> {
    let expected = container.rows as usize * container.dim as usize;
    if container.payload.len() != expected {
        return Err(Error::Dimension(format!(
            "payload holds {} values, header says {}",
            container.payload.len(),
            expected
        )));
    }
    let mut bytes = Vec::with_capacity(16 + container.payload.len() * 8);
    bytes.extend_from_slice(&MAGIC);
    bytes.push(VERSION);
    bytes.push(match container.payload {
        Payload::F32(_) => DTYPE_F32,
        Payload::F64(_) => DTYPE_F64,
    });
    bytes.extend_from_slice(&[0, 0]);
    bytes.extend_from_slice(&container.rows.to_le_bytes());
    bytes.extend_from_slice(&container.dim.to_le_bytes());
    match &container.payload {
        Payload::F32(values) => {
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
        Payload::F64(values) => {
            for v in values {
                bytes.extend_from_slice(&v.to_le_bytes());
            }
        }
    }
    let meta = container.metadata.as_bytes();
    bytes.extend_from_slice(&(meta.len() as u32).to_le_bytes());
    bytes.extend_from_slice(meta);
    fs::write(path, bytes)?;
    Ok(())
}

pub fn read_container(path: &Path) -> Result<Container> {
    let bytes = fs::read(path)?;
    parse_container(&bytes)
}

fn parse_container(bytes: &[u8]) -> Result<Container> {
    let fail = |offset: u64, msg: &str| Error::Format {
        offset,
        msg: msg.to_string(),
    };
    if bytes.len() < HEADER_LEN as usize {
        return Err(fail(bytes.len() as u64, "truncated header"));
    }
    if bytes[..4] != MAGIC {
        return Err(fail(0, "bad magic"));
    }
    if bytes[4] != VERSION {
        return Err(fail(4, "unsupported version"));
    }
    let dtype = bytes[5];
    let value_size = match dtype {
        DTYPE_F32 => 4usize,
        DTYPE_F64 => 8usize,
        _ => return Err(fail(5, "unknown dtype")),
    };
    let rows = u32::from_le_bytes(bytes[8..12].try_into().unwrap());
    let dim = u32::from_le_bytes(bytes[12..16].try_into().unwrap());
    let count = rows as usize * dim as usize;
    let payload_end = HEADER_LEN as usize + count * value_size;
    if bytes.len() < payload_end {
        return Err(fail(bytes.len() as u64, "truncated payload"));
    }
    let payload_bytes = &bytes[HEADER_LEN as usize..payload_end];
    let payload = match dtype {
        DTYPE_F32 => Payload::F32(
            payload_bytes
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
        _ => Payload::F64(
            payload_bytes
                .chunks_exact(8)
                .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
                .collect(),
        ),
    };
    if bytes.len() < payload_end + 4 {
        return Err(fail(bytes.len() as u64, "truncated metadata length"));
    }
    let meta_len =
        u32::from_le_bytes(bytes[payload_end..payload_end + 4].try_into().unwrap()) as usize;
    let meta_start = payload_end + 4;
    if bytes.len() < meta_start + meta_len {
        return Err(fail(bytes.len() as u64, "truncated metadata"));
    }
    let metadata = std::str::from_utf8(&bytes[meta_start..meta_start + meta_len])
        .map_err(|_| fail(meta_start as u64, "metadata is not valid UTF-8"))?
        .to_string();
    Ok(Container {
        rows,
        dim,
        payload,
        metadata,
    })
}

// ---------------------------------------------------------------------------
// Embedding tables
// ---------------------------------------------------------------------------

/// One unit-length embedding tagged with its class and style/domain.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub vector: Vec<f32>,
    pub class_id: u32,
    pub style_or_domain_id: u32,
}

/// A list of embedding records of a common dimension, plus the label
/// dictionaries their ids reference.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingTable {
    dim: usize,
    records: Vec<EmbeddingRecord>,
    pub class_labels: Vec<String>,
    pub domain_labels: Vec<String>,
}

#[derive(Debug, Serialize, Deserialize)]
struct TableMeta {
    kind: String,
    class_labels: Vec<String>,
    domain_labels: Vec<String>,
    rows: Vec<RowMeta>,
}

#[derive(Debug, Serialize, Deserialize)]
struct RowMeta {
    class_id: u32,
    style_or_domain_id: u32,
}

impl EmbeddingTable {
    pub fn new(dim: usize, class_labels: Vec<String>, domain_labels: Vec<String>) -> Self {
        Self {
            dim,
            records: Vec::new(),
            class_labels,
            domain_labels,
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn push(&mut self, record: EmbeddingRecord) -> Result<()> {
        if record.vector.len() != self.dim {
            return Err(Error::Dimension(format!(
                "record dim {} != table dim {}",
                record.vector.len(),
                self.dim
            )));
        }
        self.records.push(record);
        Ok(())
    }

    pub fn write(&self, path: &Path) -> Result<()> {
        let mut payload = Vec::with_capacity(self.records.len() * self.dim);
        let mut rows = Vec::with_capacity(self.records.len());
        for rec in &self.records {
            payload.extend_from_slice(&rec.vector);
            rows.push(RowMeta {
                class_id: rec.class_id,
                style_or_domain_id: rec.style_or_domain_id,
            });
        }
        let meta = TableMeta {
            kind: "embedding_table".into(),
            class_labels: self.class_labels.clone(),
            domain_labels: self.domain_labels.clone(),
            rows,
        };
        write_container(
            path,
            &Container {
                rows: self.records.len() as u32,
                dim: self.dim as u32,
                payload: Payload::F32(payload),
                metadata: serde_json::to_string(&meta)
                    .map_err(|e| Error::Config(format!("metadata serialization: {e}")))?,
            },
        )
    }

    pub fn read(path: &Path) -> Result<Self> {
        let container = read_container(path)?;
        let values = match container.payload {
            Payload::F32(v) => v,
            Payload::F64(_) => {
                return Err(Error::Format {
                    offset: 5,
                    msg: "embedding tables must be dtype f32".into(),
                })
            }
        };
        let meta: TableMeta = serde_json::from_str(&container.metadata).map_err(|e| Error::Format {
            offset: HEADER_LEN + values.len() as u64 * 4 + 4,
            msg: format!("metadata: {e}"),
        })?;
        if meta.kind != "embedding_table" {
            return Err(Error::Format {
                offset: HEADER_LEN + values.len() as u64 * 4 + 4,
                msg: format!("expected embedding_table metadata, found {:?}", meta.kind),
            });
        }
        if meta.rows.len() != container.rows as usize {
            return Err(Error::Format {
                offset: HEADER_LEN + values.len() as u64 * 4 + 4,
                msg: format!(
                    "metadata describes {} rows, header says {}",
                    meta.rows.len(),
                    container.rows
                ),
            });
        }
        let dim = container.dim as usize;
        let mut table = Self::new(dim, meta.class_labels, meta.domain_labels);
        for (i, row) in meta.rows.into_iter().enumerate() {
            table.push(EmbeddingRecord {
                vector: values[i * dim..(i + 1) * dim].to_vec(),
                class_id: row.class_id,
                style_or_domain_id: row.style_or_domain_id,
            })?;
        }
        Ok(table)
    }
}

//! Line-delimited JSON files for datasets and exported branch logits.
//!
//! Logits files:
//!
//! ```text
//! {"vocab":3,"qtypes":["type0","type1"]}
//! {"id":0,"qtype":1,"label":2,"zq":[...],"zv":[...],"zk":[...]}
//! ```
//!
//! Dataset files use the same framing with `"q"`/`"v"` feature arrays and
//! add `"q_dim"`/`"v_dim"` to the header.

use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{DatasetSplit, SyntheticSample};
use crate::error::{Error, Result};
use crate::jsonl;
use crate::logits::{BranchLogits, Logits};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogitsHeader {
    pub vocab: usize,
    pub qtypes: Vec<String>,
}

/// One exported sample: the three branch logits with its label and type.
#[derive(Debug, Clone, PartialEq)]
pub struct LogitRecord {
    pub id: u64,
    pub qtype: usize,
    pub label: usize,
    pub branch: BranchLogits,
}

#[derive(Serialize, Deserialize)]
struct RawLogitRecord {
    id: u64,
    qtype: usize,
    label: usize,
    zq: Vec<f64>,
    zv: Vec<f64>,
    zk: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LogitsFile {
    pub header: LogitsHeader,
    pub records: Vec<LogitRecord>,
}

pub fn export_logits(path: &Path, header: &LogitsHeader, records: &[LogitRecord]) -> Result<()> {
    let raw = records
        .iter()
        .map(|r| -> Result<RawLogitRecord> {
            let (zq, zv, zk) = r.branch.require_factual()?;
            Error::check_len(header.vocab, zq.len())?;
            Ok(RawLogitRecord {
                id: r.id,
                qtype: r.qtype,
                label: r.label,
                zq: zq.to_vec(),
                zv: zv.to_vec(),
                zk: zk.to_vec(),
            })
        })
        .collect::<Result<Vec<_>>>()?;
    jsonl::write_file(path, header, raw)
}

pub fn import_logits(path: &Path) -> Result<LogitsFile> {
    let (header, raw): (LogitsHeader, Vec<(usize, RawLogitRecord)>) = jsonl::read_file(path)?;
    let format_err = |line: usize, message: String| Error::Format {
        path: path.to_path_buf(),
        line,
        message,
    };
    let mut records = Vec::with_capacity(raw.len());
    for (line, r) in raw {
        for (name, z) in [("zq", &r.zq), ("zv", &r.zv), ("zk", &r.zk)] {
            if z.len() != header.vocab {
                return Err(format_err(
                    line,
                    format!("{name} has length {}, header vocab is {}", z.len(), header.vocab),
                ));
            }
        }
        if r.label >= header.vocab {
            return Err(format_err(line, format!("label {} >= vocab {}", r.label, header.vocab)));
        }
        if r.qtype >= header.qtypes.len() {
            return Err(format_err(line, format!("qtype {} has no name in the header", r.qtype)));
        }
        let to_logits = |z: Vec<f64>| Logits::new(z).map_err(|e| format_err(line, e.to_string()));
        let branch = BranchLogits::factual(to_logits(r.zq)?, to_logits(r.zv)?, to_logits(r.zk)?)?;
        records.push(LogitRecord {
            id: r.id,
            qtype: r.qtype,
            label: r.label,
            branch,
        });
    }
    Ok(LogitsFile { header, records })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetHeader {
    pub vocab: usize,
    pub qtypes: Vec<String>,
    pub q_dim: usize,
    pub v_dim: usize,
}

pub fn write_split(path: &Path, split: &DatasetSplit) -> Result<()> {
    let header = DatasetHeader {
        vocab: split.vocab_size,
        qtypes: split.qtype_names.clone(),
        q_dim: split.q_dim,
        v_dim: split.v_dim,
    };
    jsonl::write_file(path, &header, &split.samples)
}

pub fn read_split(path: &Path) -> Result<DatasetSplit> {
    let (header, raw): (DatasetHeader, Vec<(usize, SyntheticSample)>) = jsonl::read_file(path)?;
    for (line, s) in &raw {
        if s.q_features.len() != header.q_dim || s.v_features.len() != header.v_dim {
            return Err(Error::Format {
                path: path.to_path_buf(),
                line: *line,
                message: format!(
                    "feature lengths ({}, {}) do not match header ({}, {})",
                    s.q_features.len(),
                    s.v_features.len(),
                    header.q_dim,
                    header.v_dim
                ),
            });
        }
    }
    DatasetSplit::new(
        header.vocab,
        header.qtypes,
        header.q_dim,
        header.v_dim,
        raw.into_iter().map(|(_, s)| s).collect(),
    )
}

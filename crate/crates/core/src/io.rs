//! File formats.
//!
//! `EMB1` embedding matrices are laid out as
//!
//! | offset | size | field                                         |
//! |--------|------|-----------------------------------------------|
//! | 0      | 4    | magic `b"EMB1"`                               |
//! | 4      | 2    | version, u16 LE (currently 1)                 |
//! | 6      | 1    | dtype: 0 = binary32, 1 = binary64             |
//! | 7      | 8    | rows, u64 LE                                  |
//! | 15     | 8    | cols, u64 LE                                  |
//! | 23     | …    | payload, row-major, little-endian floats      |
//! | end-4  | 4    | CRC-32 (IEEE) of the payload bytes, u32 LE    |
//!
//! Knowledge bases, marginals and reports are JSON; labels are plain text.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Matrix;
use crate::ot::ClassMarginal;
use crate::retrieval::{ClassRecord, KnowledgeBase};

pub const EMB_MAGIC: [u8; 4] = *b"EMB1";
pub const EMB_VERSION: u16 = 1;
pub const EMB_HEADER_LEN: usize = 23;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Dtype {
    F32,
    F64,
}

impl Dtype {
    pub fn code(self) -> u8 {
        match self {
            Dtype::F32 => 0,
            Dtype::F64 => 1,
        }
    }

    pub fn size(self) -> usize {
        match self {
            Dtype::F32 => 4,
            Dtype::F64 => 8,
        }
    }

    fn from_code(code: u8) -> Option<Self> {
        match code {
            0 => Some(Dtype::F32),
            1 => Some(Dtype::F64),
            _ => None,
        }
    }
}

pub fn encode_embeddings(m: &Matrix, dtype: Dtype) -> Vec<u8> {
    let mut out = Vec::with_capacity(EMB_HEADER_LEN + m.data().len() * dtype.size() + 4);
    out.extend_from_slice(&EMB_MAGIC);
    out.extend_from_slice(&EMB_VERSION.to_le_bytes());
    out.push(dtype.code());
    out.extend_from_slice(&(m.rows() as u64).to_le_bytes());
    out.extend_from_slice(&(m.cols() as u64).to_le_bytes());
    for &x in m.data() {
        match dtype {
            Dtype::F32 => out.extend_from_slice(&(x as f32).to_le_bytes()),
            Dtype::F64 => out.extend_from_slice(&x.to_le_bytes()),
        }
    }
    let crc = crc32fast::hash(&out[EMB_HEADER_LEN..]);
    out.extend_from_slice(&crc.to_le_bytes());
    out
}

/// Parses an `EMB1` buffer; `path` is only used in error messages.
pub fn decode_embeddings(bytes: &[u8], path: &Path) -> Result<Matrix> {
    let fail = |msg: String| Err(Error::format(path, msg));
    if bytes.len() < EMB_HEADER_LEN {
        return fail(format!(
            "truncated header at byte offset {}: need {EMB_HEADER_LEN} bytes",
            bytes.len()
        ));
    }
    if bytes[0..4] != EMB_MAGIC {
        return fail(format!("bad magic at byte offset 0: expected \"EMB1\", found {:?}", &bytes[0..4]));
    }
    let version = u16::from_le_bytes([bytes[4], bytes[5]]);
    if version != EMB_VERSION {
        return fail(format!("unsupported version {version} at byte offset 4"));
    }
    let Some(dtype) = Dtype::from_code(bytes[6]) else {
        return fail(format!("unknown dtype code {} at byte offset 6", bytes[6]));
    };
    let rows = u64::from_le_bytes(bytes[7..15].try_into().expect("8 bytes"));
    let cols = u64::from_le_bytes(bytes[15..23].try_into().expect("8 bytes"));
    let payload_len = rows
        .checked_mul(cols)
        .and_then(|n| n.checked_mul(dtype.size() as u64))
        .and_then(|n| usize::try_from(n).ok());
    let Some(payload_len) = payload_len else {
        return fail(format!("shape {rows}x{cols} at byte offset 7 is too large"));
    };
    let expected = EMB_HEADER_LEN + payload_len + 4;
    if bytes.len() < expected {
        return fail(format!(
            "truncated at byte offset {}: {rows}x{cols} needs {expected} bytes",
            bytes.len()
        ));
    }
    if bytes.len() > expected {
        return fail(format!("{} unexpected trailing bytes at byte offset {expected}", bytes.len() - expected));
    }
    let payload = &bytes[EMB_HEADER_LEN..EMB_HEADER_LEN + payload_len];
    let stored = u32::from_le_bytes(bytes[expected - 4..].try_into().expect("4 bytes"));
    let computed = crc32fast::hash(payload);
    if stored != computed {
        return fail(format!(
            "CRC mismatch at byte offset {}: stored {stored:#010x}, computed {computed:#010x}",
            expected - 4
        ));
    }
    let data = match dtype {
        Dtype::F32 => payload
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().expect("4 bytes")) as f64)
            .collect(),
        Dtype::F64 => payload
            .chunks_exact(8)
            .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
            .collect(),
    };
    Matrix::new(rows as usize, cols as usize, data)
}

pub fn read_embeddings(path: impl AsRef<Path>) -> Result<Matrix> {
    let path = path.as_ref();
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    decode_embeddings(&bytes, path)
}

pub fn write_embeddings(path: impl AsRef<Path>, m: &Matrix, dtype: Dtype) -> Result<()> {
    let path = path.as_ref();
    fs::write(path, encode_embeddings(m, dtype)).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbFile {
    dim: usize,
    classes: Vec<KbClassFile>,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct KbClassFile {
    name: String,
    descriptions: Vec<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings: Option<Vec<Vec<f64>>>,
    /// EMB1 file relative to the knowledge-base file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    embeddings_file: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    name_embedding: Option<Vec<f64>>,
}

/// Reads a knowledge base. A class without inline `embeddings` takes them from
/// `sidecars[name]`, or failing that from its `embeddings_file` entry.
pub fn read_knowledge_base(path: impl AsRef<Path>, sidecars: &BTreeMap<String, PathBuf>) -> Result<KnowledgeBase> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let file: KbFile = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("knowledge base schema: {e}")))?;
    let base_dir = path.parent().unwrap_or(Path::new("."));

    let mut classes = Vec::with_capacity(file.classes.len());
    for class in file.classes {
        let embeddings = if let Some(rows) = class.embeddings {
            if let Some((l, r)) = rows.iter().enumerate().find(|(_, r)| r.len() != file.dim) {
                return Err(Error::format(
                    path,
                    format!(
                        "class '{}' embedding row {l} has dimension {}, expected {}",
                        class.name,
                        r.len(),
                        file.dim
                    ),
                ));
            }
            if rows.is_empty() {
                Matrix::zeros(0, file.dim)
            } else {
                Matrix::from_rows(&rows)?
            }
        } else {
            let sidecar = sidecars
                .get(&class.name)
                .cloned()
                .or_else(|| class.embeddings_file.as_ref().map(|f| base_dir.join(f)))
                .ok_or_else(|| {
                    Error::format(
                        path,
                        format!("class '{}' has no inline embeddings and no sidecar file", class.name),
                    )
                })?;
            read_embeddings(&sidecar)?
        };
        if embeddings.rows() != class.descriptions.len() {
            return Err(Error::format(
                path,
                format!(
                    "class '{}' has {} descriptions but {} embedding rows",
                    class.name,
                    class.descriptions.len(),
                    embeddings.rows()
                ),
            ));
        }
        classes.push(ClassRecord {
            name: class.name,
            descriptions: class.descriptions,
            embeddings,
            name_embedding: class.name_embedding,
        });
    }
    KnowledgeBase::new(file.dim, classes).map_err(|e| Error::format(path, e.to_string()))
}

/// Writes a knowledge base with inline embeddings.
pub fn write_knowledge_base(path: impl AsRef<Path>, kb: &KnowledgeBase) -> Result<()> {
    let file = KbFile {
        dim: kb.dim(),
        classes: kb
            .classes()
            .iter()
            .map(|c| KbClassFile {
                name: c.name.clone(),
                descriptions: c.descriptions.clone(),
                embeddings: Some(c.embeddings.row_iter().map(<[f64]>::to_vec).collect()),
                embeddings_file: None,
                name_embedding: c.name_embedding.clone(),
            })
            .collect(),
    };
    write_json(path, &file)
}

/// One label per line, either a class index or a class name. Blank lines are skipped.
pub fn read_labels(path: impl AsRef<Path>, class_names: &[&str]) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_labels(&text, class_names).map_err(|msg| Error::format(path, msg))
}

fn parse_labels(text: &str, class_names: &[&str]) -> std::result::Result<Vec<usize>, String> {
    let k = class_names.len();
    let mut out = Vec::new();
    for (lineno, line) in text.lines().enumerate() {
        let label = line.trim();
        if label.is_empty() {
            continue;
        }
        let index = match class_names.iter().position(|n| *n == label) {
            Some(j) => j,
            None => match label.parse::<usize>() {
                Ok(j) if j < k => j,
                Ok(j) => return Err(format!("line {}: class index {j} out of range [0, {k})", lineno + 1)),
                Err(_) => return Err(format!("line {}: unknown class '{label}'", lineno + 1)),
            },
        };
        out.push(index);
    }
    Ok(out)
}

pub fn write_labels(path: impl AsRef<Path>, labels: &[usize], class_names: &[&str]) -> Result<()> {
    let path = path.as_ref();
    let mut text = String::new();
    for &l in labels {
        text.push_str(class_names[l]);
        text.push('\n');
    }
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Reads a JSON array of nonnegative weights and rescales it to sum to one.
pub fn read_marginal(path: impl AsRef<Path>) -> Result<ClassMarginal> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let raw: Vec<f64> = serde_json::from_str(&text)
        .map_err(|e| Error::format(path, format!("marginal must be a JSON array of numbers: {e}")))?;
    normalize_marginal(raw).map_err(|e| Error::format(path, e.to_string()))
}

pub fn normalize_marginal(raw: Vec<f64>) -> Result<ClassMarginal> {
    if let Some((j, v)) = raw.iter().enumerate().find(|(_, v)| !(**v >= 0.0) || !v.is_finite()) {
        return Err(Error::data(format!("marginal entry {j} is {v}; entries must be finite and >= 0")));
    }
    let sum: f64 = raw.iter().sum();
    if !(sum > 0.0) {
        return Err(Error::data("marginal sums to zero"));
    }
    ClassMarginal::new(raw.into_iter().map(|v| v / sum).collect())
}

/// Pretty JSON with a trailing newline; field order follows the type's declaration.
pub fn write_json<T: Serialize + ?Sized>(path: impl AsRef<Path>, value: &T) -> Result<()> {
    let path = path.as_ref();
    let mut text = serde_json::to_string_pretty(value)
        .map_err(|e| Error::Internal(format!("serializing {}: {e}", path.display())))?;
    text.push('\n');
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Two-column CSV: `index,predicted_class_name`.
pub fn write_predictions(path: impl AsRef<Path>, predictions: &[usize], class_names: &[&str]) -> Result<()> {
    let path = path.as_ref();
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, e))?;
    w.write_record(["index", "predicted_class_name"])
        .map_err(|e| csv_error(path, e))?;
    for (i, &p) in predictions.iter().enumerate() {
        w.write_record([i.to_string().as_str(), class_names[p]])
            .map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Reads a predictions CSV back into class indices.
pub fn read_predictions(path: impl AsRef<Path>, class_names: &[&str]) -> Result<Vec<usize>> {
    let path = path.as_ref();
    let mut r = csv::Reader::from_path(path).map_err(|e| csv_error(path, e))?;
    let mut out = Vec::new();
    for (row, record) in r.records().enumerate() {
        let record = record.map_err(|e| csv_error(path, e))?;
        let name = record
            .get(1)
            .ok_or_else(|| Error::format(path, format!("row {}: missing class column", row + 1)))?;
        let j = class_names
            .iter()
            .position(|n| *n == name)
            .ok_or_else(|| Error::format(path, format!("row {}: unknown class '{name}'", row + 1)))?;
        out.push(j);
    }
    Ok(out)
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    Error::format(path, format!("csv: {e}"))
}

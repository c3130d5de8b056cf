//! Embedding records and their on-disk formats.
//!
//! Two interchangeable formats are supported:
//!
//! - binary: magic `OGEM`, `u32` version (1), `u32` dimension, `u64` record
//!   count, then per record a u16-length-prefixed `identity_id`, `image_id` and
//!   `group`, a `u32` `capture_index` and `dimension` little-endian `f32`s;
//! - CSV: header `identity_id,image_id,group,capture_index,v0,...,v{d-1}`.
//!
//! Vectors are L2-normalized once, at ingest, so downstream cosine similarity
//! is a plain dot product.

use std::collections::{BTreeSet, HashSet};
use std::fmt;
use std::fs::File;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::path::Path;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing::*;
use crate::scalar;

pub const STORE_MAGIC: &[u8; 4] = b"OGEM";
pub const STORE_VERSION: u32 = 1;

const CSV_FIXED_COLUMNS: [&str; 4] = ["identity_id", "image_id", "group", "capture_index"];

/// Already-unit vectors (squared norm this close to 1) are kept bit-for-bit.
const UNIT_SQ_TOLERANCE: f64 = 4.0 * f32::EPSILON as f64;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("not an embedding file (bad magic)")]
    BadMagic,
    #[error("unsupported embedding file version {0}")]
    UnsupportedVersion(u32),
    #[error("dimension must be positive")]
    ZeroDimension,
    #[error("record {row}: expected dimension {expected}, found {found}")]
    DimensionMismatch {
        row: usize,
        expected: usize,
        found: usize,
    },
    #[error("duplicate record ({identity_id}, {image_id})")]
    Duplicate {
        identity_id: String,
        image_id: String,
    },
    #[error("record ({identity_id}, {image_id}): non-finite component at index {index}")]
    NonFinite {
        identity_id: String,
        image_id: String,
        index: usize,
    },
    #[error("record ({identity_id}, {image_id}): zero-norm vector cannot be normalized")]
    ZeroNorm {
        identity_id: String,
        image_id: String,
    },
    #[error("unknown group label {0:?}")]
    UnknownGroup(String),
    #[error("malformed input: {0}")]
    Malformed(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum StoreFormat {
    #[default]
    Binary,
    Csv,
}

impl StoreFormat {
    /// `.csv` files are CSV, everything else binary.
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => StoreFormat::Csv,
            _ => StoreFormat::Binary,
        }
    }
}

impl FromStr for StoreFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "binary" | "bin" => Ok(StoreFormat::Binary),
            "csv" => Ok(StoreFormat::Csv),
            other => Err(format!("unknown store format {other:?} (expected binary or csv)")),
        }
    }
}

impl fmt::Display for StoreFormat {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            StoreFormat::Binary => "binary",
            StoreFormat::Csv => "csv",
        })
    }
}

/// One image's embedding with identity and demographic metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingRecord {
    pub identity_id: String,
    pub image_id: String,
    pub group: String,
    /// Larger is more recent.
    pub capture_index: u32,
    pub vector: Vec<f32>,
}

impl EmbeddingRecord {
    pub fn key(&self) -> (&str, &str) {
        (&self.identity_id, &self.image_id)
    }
}

/// Returns `v / ‖v‖` with the norm accumulated in `f64`.
///
/// Fails on the zero vector.
pub fn l2_normalize(v: &[f32]) -> Option<Vec<f32>> {
    scalar::l2_normalize(v)
}

/// Normalization used at ingest: vectors that are already unit to `f32`
/// precision pass through untouched, so re-ingesting a written store is
/// bit-exact.
fn normalize_for_store(v: &[f32]) -> Option<Vec<f32>> {
    let sq: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
    if sq > 0.0 && (sq - 1.0).abs() <= UNIT_SQ_TOLERANCE {
        return Some(v.to_vec());
    }
    l2_normalize(v)
}

/// An immutable, validated set of unit-norm embeddings.
///
/// Records are kept sorted by `(identity_id, image_id)`.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingStore {
    dimension: usize,
    records: Vec<EmbeddingRecord>,
    groups: BTreeSet<String>,
}

impl EmbeddingStore {
    /// Validates, normalizes and sorts `records`.
    pub fn new(dimension: usize, records: Vec<EmbeddingRecord>) -> Result<Self, StoreError> {
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let mut seen = HashSet::with_capacity(records.len());
        let mut out = Vec::with_capacity(records.len());
        for (row, mut rec) in records.into_iter().enumerate() {
            if rec.vector.len() != dimension {
                return Err(StoreError::DimensionMismatch {
                    row,
                    expected: dimension,
                    found: rec.vector.len(),
                });
            }
            if let Some(index) = rec.vector.iter().position(|x| !x.is_finite()) {
                return Err(StoreError::NonFinite {
                    identity_id: rec.identity_id,
                    image_id: rec.image_id,
                    index,
                });
            }
            if !seen.insert((rec.identity_id.clone(), rec.image_id.clone())) {
                return Err(StoreError::Duplicate {
                    identity_id: rec.identity_id,
                    image_id: rec.image_id,
                });
            }
            match normalize_for_store(&rec.vector) {
                Some(v) => rec.vector = v,
                None => {
                    return Err(StoreError::ZeroNorm {
                        identity_id: rec.identity_id,
                        image_id: rec.image_id,
                    })
                }
            }
            out.push(rec);
        }
        out.sort_by(|a, b| a.key().cmp(&b.key()));
        let groups = out.iter().map(|r| r.group.clone()).collect();
        Ok(Self {
            dimension,
            records: out,
            groups,
        })
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn groups(&self) -> &BTreeSet<String> {
        &self.groups
    }

    /// Records of each identity, in identity order.
    pub fn identities(&self) -> Vec<(&str, &[EmbeddingRecord])> {
        let mut out = Vec::new();
        let mut start = 0;
        for i in 1..=self.records.len() {
            if i == self.records.len() || self.records[i].identity_id != self.records[start].identity_id {
                out.push((self.records[start].identity_id.as_str(), &self.records[start..i]));
                start = i;
            }
        }
        out
    }

    /// The sub-store of records labelled `group`, order preserved.
    pub fn filter_by_group(&self, group: &str) -> Result<EmbeddingStore, StoreError> {
        if !self.groups.contains(group) {
            return Err(StoreError::UnknownGroup(group.to_string()));
        }
        let records: Vec<_> = self.records.iter().filter(|r| r.group == group).cloned().collect();
        Ok(Self {
            dimension: self.dimension,
            records,
            groups: std::iter::once(group.to_string()).collect(),
        })
    }

    pub fn ingest(path: impl AsRef<Path>, format: StoreFormat) -> Result<Self, StoreError> {
        let reader = BufReader::new(File::open(path)?);
        match format {
            StoreFormat::Binary => Self::read_binary(reader),
            StoreFormat::Csv => Self::read_csv(reader),
        }
    }

    pub fn write(&self, path: impl AsRef<Path>, format: StoreFormat) -> Result<(), StoreError> {
        let mut w = BufWriter::new(File::create(path)?);
        match format {
            StoreFormat::Binary => self.write_binary(&mut w)?,
            StoreFormat::Csv => self.write_csv(&mut w)?,
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<Self, StoreError> {
        let magic: [u8; 4] = read_magic(&mut r)?;
        if &magic != STORE_MAGIC {
            return Err(StoreError::BadMagic);
        }
        let version = read_u32(&mut r)?;
        if version != STORE_VERSION {
            return Err(StoreError::UnsupportedVersion(version));
        }
        let dimension = read_u32(&mut r)? as usize;
        if dimension == 0 {
            return Err(StoreError::ZeroDimension);
        }
        let count = read_u64(&mut r)?;
        let mut records = Vec::new();
        for _ in 0..count {
            let identity_id = read_str(&mut r)?;
            let image_id = read_str(&mut r)?;
            let group = read_str(&mut r)?;
            let capture_index = read_u32(&mut r)?;
            let vector = (0..dimension).map(|_| read_f32(&mut r)).collect::<io::Result<_>>()?;
            records.push(EmbeddingRecord {
                identity_id,
                image_id,
                group,
                capture_index,
                vector,
            });
        }
        Self::new(dimension, records)
    }

    pub fn write_binary<W: Write>(&self, w: &mut W) -> Result<(), StoreError> {
        w.write_all(STORE_MAGIC)?;
        write_u32(w, STORE_VERSION)?;
        write_u32(w, self.dimension as u32)?;
        write_u64(w, self.records.len() as u64)?;
        for rec in &self.records {
            write_str(w, &rec.identity_id)?;
            write_str(w, &rec.image_id)?;
            write_str(w, &rec.group)?;
            write_u32(w, rec.capture_index)?;
            for &x in &rec.vector {
                write_f32(w, x)?;
            }
        }
        Ok(())
    }

    pub fn read_csv<R: Read>(r: R) -> Result<Self, StoreError> {
        let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
        let header = rdr.headers()?.clone();
        if header.len() <= CSV_FIXED_COLUMNS.len() {
            return Err(StoreError::Malformed(format!(
                "header has {} columns, need the 4 metadata columns plus at least one component",
                header.len()
            )));
        }
        for (i, name) in CSV_FIXED_COLUMNS.iter().enumerate() {
            if &header[i] != *name {
                return Err(StoreError::Malformed(format!(
                    "header column {i} is {:?}, expected {name:?}",
                    &header[i]
                )));
            }
        }
        let dimension = header.len() - CSV_FIXED_COLUMNS.len();
        for (k, name) in header.iter().skip(CSV_FIXED_COLUMNS.len()).enumerate() {
            if name != format!("v{k}") {
                return Err(StoreError::Malformed(format!("component column {k} is named {name:?}")));
            }
        }
        let mut records = Vec::new();
        for (row, result) in rdr.records().enumerate() {
            let rec = result?;
            if rec.len() != header.len() {
                return Err(StoreError::DimensionMismatch {
                    row,
                    expected: dimension,
                    found: rec.len().saturating_sub(CSV_FIXED_COLUMNS.len()),
                });
            }
            let capture_index = rec[3].trim().parse::<u32>().map_err(|e| {
                StoreError::Malformed(format!("row {row}: capture_index {:?}: {e}", &rec[3]))
            })?;
            let vector = rec
                .iter()
                .skip(CSV_FIXED_COLUMNS.len())
                .map(|s| {
                    s.trim()
                        .parse::<f32>()
                        .map_err(|e| StoreError::Malformed(format!("row {row}: component {s:?}: {e}")))
                })
                .collect::<Result<Vec<_>, _>>()?;
            records.push(EmbeddingRecord {
                identity_id: rec[0].to_string(),
                image_id: rec[1].to_string(),
                group: rec[2].to_string(),
                capture_index,
                vector,
            });
        }
        Self::new(dimension, records)
    }

    pub fn write_csv<W: Write>(&self, w: &mut W) -> Result<(), StoreError> {
        let mut wtr = csv::Writer::from_writer(w);
        let mut header: Vec<String> = CSV_FIXED_COLUMNS.iter().map(|s| s.to_string()).collect();
        header.extend((0..self.dimension).map(|k| format!("v{k}")));
        wtr.write_record(&header)?;
        for rec in &self.records {
            let mut row = vec![
                rec.identity_id.clone(),
                rec.image_id.clone(),
                rec.group.clone(),
                rec.capture_index.to_string(),
            ];
            // `Display` for f32 is shortest round-trip.
            row.extend(rec.vector.iter().map(|x| x.to_string()));
            wtr.write_record(&row)?;
        }
        wtr.flush()?;
        Ok(())
    }
}

//! Exact 1-to-many cosine search.
//!
//! Every search ranks the full gallery: similarities are dot products of unit
//! vectors accumulated in `f64`, sorted descending, with exact ties broken by
//! ascending `(identity_id, image_id)`. The gallery keeps its records in that
//! key order, so a stable sort on similarity alone yields the tie-break and the
//! ranking does not depend on the order records were supplied in.

use std::collections::BTreeMap;
use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use thiserror::Error;

use crate::scalar::dot_f32_wide;
use crate::store::EmbeddingRecord;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SearchError {
    #[error("gallery is empty")]
    EmptyGallery,
    #[error("dimension mismatch: gallery has {expected}, got {found}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("duplicate gallery record ({identity_id}, {image_id})")]
    DuplicateRecord { identity_id: String, image_id: String },
    #[error("probe has a non-finite component")]
    NonFiniteProbe,
    #[error("rank-one identity {identity_id} has {available} additional images, need {needed}")]
    InsufficientImages {
        identity_id: String,
        available: usize,
        needed: usize,
    },
    #[error("rank vector length must be positive")]
    ZeroLength,
}

/// Immutable searchable gallery.
#[derive(Debug, Clone)]
pub struct GalleryIndex {
    records: Vec<EmbeddingRecord>,
    keys: Vec<(Arc<str>, Arc<str>)>,
    identity_map: BTreeMap<Arc<str>, Vec<usize>>,
    dimension: usize,
}

impl GalleryIndex {
    pub fn build(mut records: Vec<EmbeddingRecord>) -> Result<Self, SearchError> {
        let first = records.first().ok_or(SearchError::EmptyGallery)?;
        let dimension = first.vector.len();
        if let Some(bad) = records.iter().find(|r| r.vector.len() != dimension) {
            return Err(SearchError::DimensionMismatch {
                expected: dimension,
                found: bad.vector.len(),
            });
        }
        records.sort_by(|a, b| a.key().cmp(&b.key()));
        if let Some(w) = records.windows(2).find(|w| w[0].key() == w[1].key()) {
            return Err(SearchError::DuplicateRecord {
                identity_id: w[1].identity_id.clone(),
                image_id: w[1].image_id.clone(),
            });
        }
        let mut keys: Vec<(Arc<str>, Arc<str>)> = Vec::with_capacity(records.len());
        let mut identity_map: BTreeMap<Arc<str>, Vec<usize>> = BTreeMap::new();
        for (pos, r) in records.iter().enumerate() {
            let id: Arc<str> = match keys.last() {
                Some((prev, _)) if **prev == *r.identity_id => Arc::clone(prev),
                _ => Arc::from(r.identity_id.as_str()),
            };
            identity_map.entry(Arc::clone(&id)).or_default().push(pos);
            keys.push((id, Arc::from(r.image_id.as_str())));
        }
        Ok(Self {
            records,
            keys,
            identity_map,
            dimension,
        })
    }

    pub fn from_records<'a>(records: impl IntoIterator<Item = &'a EmbeddingRecord>) -> Result<Self, SearchError> {
        Self::build(records.into_iter().cloned().collect())
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    pub fn dimension(&self) -> usize {
        self.dimension
    }

    /// Records in internal (key) order; positions index into this slice.
    pub fn records(&self) -> &[EmbeddingRecord] {
        &self.records
    }

    pub fn identity_map(&self) -> &BTreeMap<Arc<str>, Vec<usize>> {
        &self.identity_map
    }

    pub fn identity_positions(&self, identity_id: &str) -> &[usize] {
        self.identity_map.get(identity_id).map(Vec::as_slice).unwrap_or(&[])
    }

    /// Ranks every gallery image against `probe`.
    pub fn search(&self, probe: &[f32]) -> Result<SearchResult, SearchError> {
        self.search_filtered(probe, None)
    }

    /// Ranks the gallery as if every image of `excluded_identity` had not been
    /// enrolled. Equivalent to searching a gallery built without them.
    pub fn search_excluding(&self, probe: &[f32], excluded_identity: &str) -> Result<SearchResult, SearchError> {
        self.search_filtered(probe, Some(excluded_identity))
    }

    /// Searches many probes in parallel; results come back in probe order.
    pub fn search_batch(&self, probes: &[Vec<f32>]) -> Vec<Result<SearchResult, SearchError>> {
        probes.par_iter().map(|p| self.search(p)).collect()
    }

    fn search_filtered(&self, probe: &[f32], excluded: Option<&str>) -> Result<SearchResult, SearchError> {
        if probe.len() != self.dimension {
            return Err(SearchError::DimensionMismatch {
                expected: self.dimension,
                found: probe.len(),
            });
        }
        if probe.iter().any(|x| !x.is_finite()) {
            return Err(SearchError::NonFiniteProbe);
        }
        let mut scored: Vec<(f64, usize)> = self
            .records
            .iter()
            .enumerate()
            .filter(|(pos, _)| excluded.is_none_or(|ex| *self.keys[*pos].0 != *ex))
            .map(|(pos, r)| (dot_f32_wide(probe, &r.vector), pos))
            .collect();
        if scored.is_empty() {
            return Err(SearchError::EmptyGallery);
        }
        // Stable: equal similarities keep key order.
        scored.sort_by(|a, b| b.0.partial_cmp(&a.0).expect("finite similarities"));
        let matches = scored
            .into_iter()
            .map(|(similarity, position)| Match {
                position,
                identity_id: Arc::clone(&self.keys[position].0),
                image_id: Arc::clone(&self.keys[position].1),
                similarity,
            })
            .collect();
        Ok(SearchResult { matches })
    }
}

/// One ranked gallery image. Its rank is its index in [`SearchResult::matches`] plus one.
#[derive(Debug, Clone, PartialEq)]
pub struct Match {
    pub position: usize,
    pub identity_id: Arc<str>,
    pub image_id: Arc<str>,
    pub similarity: f64,
}

/// Full ranking of a gallery against one probe.
#[derive(Debug, Clone, PartialEq)]
pub struct SearchResult {
    pub matches: Vec<Match>,
}

impl SearchResult {
    pub fn len(&self) -> usize {
        self.matches.len()
    }

    pub fn is_empty(&self) -> bool {
        self.matches.is_empty()
    }

    pub fn rank_one(&self) -> &Match {
        &self.matches[0]
    }

    pub fn max_similarity(&self) -> f64 {
        self.matches[0].similarity
    }

    /// 1-based ranks of the rank-one identity's other images, ascending.
    pub fn additional_ranks(&self) -> Vec<u32> {
        let top = &self.matches[0].identity_id;
        self.matches
            .iter()
            .enumerate()
            .skip(1)
            .filter(|(_, m)| m.identity_id == *top)
            .map(|(i, _)| (i + 1) as u32)
            .collect()
    }

    /// The `d_in` best (smallest) ranks among the rank-one identity's other images.
    pub fn rank_vector(&self, d_in: usize) -> Result<RankVector, SearchError> {
        if d_in == 0 {
            return Err(SearchError::ZeroLength);
        }
        let top = &self.matches[0].identity_id;
        let mut ranks = Vec::with_capacity(d_in);
        for (i, m) in self.matches.iter().enumerate().skip(1) {
            if m.identity_id == *top {
                ranks.push((i + 1) as u32);
                if ranks.len() == d_in {
                    break;
                }
            }
        }
        if ranks.len() < d_in {
            return Err(SearchError::InsufficientImages {
                identity_id: top.to_string(),
                available: ranks.len(),
                needed: d_in,
            });
        }
        Ok(RankVector {
            ranks,
            rank_one_identity: top.to_string(),
            gallery_size: self.matches.len() as u32,
        })
    }

    /// Diagnostic dump: `rank,identity_id,image_id,similarity`.
    pub fn write_csv<W: Write>(&self, w: W) -> csv::Result<()> {
        let mut wtr = csv::Writer::from_writer(w);
        wtr.write_record(["rank", "identity_id", "image_id", "similarity"])?;
        for (i, m) in self.matches.iter().enumerate() {
            wtr.write_record([
                (i + 1).to_string(),
                m.identity_id.to_string(),
                m.image_id.to_string(),
                format!("{:?}", m.similarity),
            ])?;
        }
        wtr.flush()?;
        Ok(())
    }
}

/// Ranks of the rank-one identity's additional images: the classifier input.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankVector {
    /// Strictly increasing, each in `2..=gallery_size`.
    pub ranks: Vec<u32>,
    pub rank_one_identity: String,
    pub gallery_size: u32,
}

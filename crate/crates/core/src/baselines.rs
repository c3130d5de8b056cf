//! Comparison methods: max-score thresholding, mean/median centroid
//! classifiers and naive gallery-image fusion.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::{Label, RankSample};
use crate::scalar::{dot_f32_wide, l2_normalize};
use crate::search::{GalleryIndex, SearchResult};

#[derive(Debug, Error, PartialEq)]
pub enum BaselineError {
    #[error("no calibration scores")]
    EmptyScores,
    #[error("target FPIR {0} not in (0, 1]")]
    BadTarget(f64),
    #[error("non-finite calibration score")]
    NonFiniteScore,
    #[error("no training samples for class {0}")]
    MissingClass(Label),
    #[error("rank vector has length {found}, model expects {expected}")]
    RankLength { expected: usize, found: usize },
    #[error("probe dimension {found} does not match gallery dimension {expected}")]
    DimensionMismatch { expected: usize, found: usize },
    #[error("malformed model: {0}")]
    Malformed(String),
}

/// Score threshold `alpha` meeting a target false-positive identification rate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ThresholdModel {
    pub alpha: f64,
    pub target_fpir: f64,
    pub n_nonmated: usize,
}

/// Smallest `alpha` such that the fraction of `nonmated_scores` at or above it
/// is at most `target_fpir`.
///
/// With the scores sorted descending and `k = floor(n * target_fpir)`, the
/// score at index `k` is the first that must be rejected, so `alpha` is the
/// next representable value above it. `k >= n` accepts everything (`-inf`).
pub fn calibrate_threshold(nonmated_scores: &[f64], target_fpir: f64) -> Result<ThresholdModel, BaselineError> {
    if nonmated_scores.is_empty() {
        return Err(BaselineError::EmptyScores);
    }
    if !(target_fpir > 0.0 && target_fpir <= 1.0) {
        return Err(BaselineError::BadTarget(target_fpir));
    }
    if nonmated_scores.iter().any(|s| !s.is_finite()) {
        return Err(BaselineError::NonFiniteScore);
    }
    let n = nonmated_scores.len();
    let mut sorted = nonmated_scores.to_vec();
    sorted.sort_by(|a, b| b.partial_cmp(a).expect("finite"));
    // Largest k with k / n <= target, robust to rounding in n * target.
    let mut k = (n as f64 * target_fpir).floor() as usize;
    while k < n && (k + 1) as f64 / n as f64 <= target_fpir {
        k += 1;
    }
    while k > 0 && k as f64 / n as f64 > target_fpir {
        k -= 1;
    }
    let alpha = if k >= n { f64::NEG_INFINITY } else { sorted[k].next_up() };
    Ok(ThresholdModel {
        alpha,
        target_fpir,
        n_nonmated: n,
    })
}

impl ThresholdModel {
    /// In-gallery iff `score >= alpha`.
    pub fn classify_score(&self, score: f64) -> Label {
        if score >= self.alpha {
            Label::InGallery
        } else {
            Label::OutOfGallery
        }
    }

    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "kind": "threshold",
            "alpha": format!("{:?}", self.alpha),
            "alpha_bits": format!("{:016x}", self.alpha.to_bits()),
            "target_fpir": self.target_fpir,
            "n_nonmated": self.n_nonmated,
        })
    }

    /// Reads the model back; `alpha` comes from its raw bit pattern.
    pub fn from_json(v: &serde_json::Value) -> Result<Self, BaselineError> {
        let field = |k: &str| v.get(k).ok_or_else(|| BaselineError::Malformed(format!("missing {k}")));
        let bits = field("alpha_bits")?
            .as_str()
            .and_then(|s| u64::from_str_radix(s, 16).ok())
            .ok_or_else(|| BaselineError::Malformed("alpha_bits".into()))?;
        Ok(Self {
            alpha: f64::from_bits(bits),
            target_fpir: field("target_fpir")?
                .as_f64()
                .ok_or_else(|| BaselineError::Malformed("target_fpir".into()))?,
            n_nonmated: field("n_nonmated")?
                .as_u64()
                .ok_or_else(|| BaselineError::Malformed("n_nonmated".into()))? as usize,
        })
    }
}

/// Labels a search by its maximum (rank-one) similarity.
pub fn threshold_classify(model: &ThresholdModel, result: &SearchResult) -> Label {
    model.classify_score(result.max_similarity())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CentroidStatistic {
    Mean,
    Median,
}

impl FromStr for CentroidStatistic {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "mean" => Ok(CentroidStatistic::Mean),
            "median" => Ok(CentroidStatistic::Median),
            other => Err(format!("unknown centroid statistic {other:?}")),
        }
    }
}

impl fmt::Display for CentroidStatistic {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            CentroidStatistic::Mean => "mean",
            CentroidStatistic::Median => "median",
        })
    }
}

/// Nearest-center classifier over raw rank vectors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CentroidModel {
    pub statistic: CentroidStatistic,
    /// Out-of-gallery center.
    pub center_0: Vec<f64>,
    /// In-gallery center.
    pub center_1: Vec<f64>,
}

fn coordinate_median(mut column: Vec<f64>) -> f64 {
    column.sort_by(|a, b| a.partial_cmp(b).expect("finite ranks"));
    let n = column.len();
    if n % 2 == 1 {
        column[n / 2]
    } else {
        (column[n / 2 - 1] + column[n / 2]) / 2.0
    }
}

/// Per-class coordinatewise mean or median of the rank vectors.
pub fn fit_centroid(samples: &[RankSample], statistic: CentroidStatistic) -> Result<CentroidModel, BaselineError> {
    let d_in = samples.first().map_or(0, |s| s.ranks.len());
    let center = |label: Label| -> Result<Vec<f64>, BaselineError> {
        let members: Vec<&RankSample> = samples.iter().filter(|s| s.label == label).collect();
        if members.is_empty() {
            return Err(BaselineError::MissingClass(label));
        }
        if let Some(bad) = members.iter().find(|s| s.ranks.len() != d_in) {
            return Err(BaselineError::RankLength {
                expected: d_in,
                found: bad.ranks.len(),
            });
        }
        Ok((0..d_in)
            .map(|k| {
                let column: Vec<f64> = members.iter().map(|s| f64::from(s.ranks[k])).collect();
                match statistic {
                    CentroidStatistic::Mean => column.iter().sum::<f64>() / column.len() as f64,
                    CentroidStatistic::Median => coordinate_median(column),
                }
            })
            .collect())
    };
    Ok(CentroidModel {
        statistic,
        center_0: center(Label::OutOfGallery)?,
        center_1: center(Label::InGallery)?,
    })
}

impl CentroidModel {
    /// Label of the nearer center (Euclidean); exact ties go to Out-of-gallery.
    pub fn classify(&self, ranks: &[f64]) -> Result<Label, BaselineError> {
        if ranks.len() != self.center_0.len() {
            return Err(BaselineError::RankLength {
                expected: self.center_0.len(),
                found: ranks.len(),
            });
        }
        let d2 = |c: &[f64]| c.iter().zip(ranks).map(|(a, b)| (a - b) * (a - b)).sum::<f64>();
        Ok(if d2(&self.center_1) < d2(&self.center_0) {
            Label::InGallery
        } else {
            Label::OutOfGallery
        })
    }
}

pub fn centroid_classify(model: &CentroidModel, ranks: &[u32]) -> Result<Label, BaselineError> {
    let x: Vec<f64> = ranks.iter().map(|&r| f64::from(r)).collect();
    model.classify(&x)
}

/// One fused template per gallery identity: the mean of its enrolled
/// embeddings, re-normalized.
#[derive(Debug, Clone, PartialEq)]
pub struct FusedGallery {
    pub identities: Vec<String>,
    pub templates: Vec<Vec<f32>>,
    /// Identities whose mean embedding had zero norm.
    pub excluded: Vec<String>,
}

impl FusedGallery {
    pub fn build(gallery: &GalleryIndex) -> Self {
        let mut identities = Vec::new();
        let mut templates = Vec::new();
        let mut excluded = Vec::new();
        for (id, positions) in gallery.identity_map() {
            let mut sum = vec![0.0f64; gallery.dimension()];
            for &p in positions {
                for (s, &x) in sum.iter_mut().zip(&gallery.records()[p].vector) {
                    *s += f64::from(x);
                }
            }
            let mean: Vec<f64> = sum.iter().map(|s| s / positions.len() as f64).collect();
            match l2_normalize(&mean) {
                Some(t) if t.iter().all(|x| x.is_finite()) && crate::scalar::norm(&mean) > 1e-9 => {
                    identities.push(id.to_string());
                    templates.push(t.iter().map(|&x| x as f32).collect());
                }
                _ => {
                    log::warn!("identity {id}: fused embedding has zero norm, excluded from fusion");
                    excluded.push(id.to_string());
                }
            }
        }
        Self {
            identities,
            templates,
            excluded,
        }
    }

    pub fn dimension(&self) -> Option<usize> {
        self.templates.first().map(Vec::len)
    }

    /// `(identity, fused score)` for every template.
    pub fn scores(&self, probe: &[f32]) -> Result<Vec<(&str, f64)>, BaselineError> {
        if let Some(d) = self.dimension() {
            if d != probe.len() {
                return Err(BaselineError::DimensionMismatch {
                    expected: d,
                    found: probe.len(),
                });
            }
        }
        Ok(self
            .identities
            .iter()
            .zip(&self.templates)
            .map(|(id, t)| (id.as_str(), dot_f32_wide(probe, t)))
            .collect())
    }

    /// Best fused score, ignoring `excluded_identity`; `None` if nothing is left.
    pub fn max_score(&self, probe: &[f32], excluded_identity: Option<&str>) -> Result<Option<f64>, BaselineError> {
        Ok(self
            .scores(probe)?
            .into_iter()
            .filter(|(id, _)| Some(*id) != excluded_identity)
            .map(|(_, s)| s)
            .max_by(|a, b| a.partial_cmp(b).expect("finite")))
    }
}

/// Fuses each identity's images and thresholds the best fused score.
/// A gallery with no usable template yields Out-of-gallery.
pub fn naive_fusion_classify(
    gallery: &FusedGallery,
    probe: &[f32],
    threshold: &ThresholdModel,
) -> Result<Label, BaselineError> {
    Ok(match gallery.max_score(probe, None)? {
        Some(s) => threshold.classify_score(s),
        None => Label::OutOfGallery,
    })
}

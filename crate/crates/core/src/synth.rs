//! Synthetic embedding stores: identity clusters on the unit sphere with
//! Gaussian within-identity spread, plus probe-side noise as a stand-in for
//! image degradation.
//!
//! Sampling is Gaussian-then-renormalize rather than an exact von Mises–Fisher
//! draw; concentration still decreases monotonically in sigma.

use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::protocol::ProbeDegradation;
use crate::rng::SeededRng;
use crate::scalar::l2_normalize;
use crate::store::{EmbeddingRecord, EmbeddingStore, StoreError};

/// Redraws allowed when noise lands on the zero vector.
pub const MAX_REDRAWS: usize = 16;

#[derive(Debug, Error)]
pub enum SynthError {
    #[error("invalid synthetic config: {0}")]
    Config(String),
    #[error("noise produced a zero vector {0} times in a row")]
    Degenerate(usize),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("cannot read {path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("cannot parse {path}: {message}")]
    Parse { path: String, message: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct GroupSpec {
    pub label: String,
    pub identities: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DegradationLevel {
    pub condition: String,
    pub probe_noise_sigma: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthConfig {
    pub n_identities: usize,
    pub images_per_identity: usize,
    pub dimension: usize,
    pub within_noise_sigma: f64,
    pub groups: Vec<GroupSpec>,
    pub degradation_levels: Vec<DegradationLevel>,
    pub rng_seed: u64,
}

impl Default for SynthConfig {
    fn default() -> Self {
        Self {
            n_identities: 500,
            images_per_identity: 5,
            dimension: 64,
            within_noise_sigma: 0.05,
            groups: vec![GroupSpec {
                label: "G0".into(),
                identities: 500,
            }],
            degradation_levels: vec![DegradationLevel {
                condition: "original".into(),
                probe_noise_sigma: 0.0,
            }],
            rng_seed: 0,
        }
    }
}

impl SynthConfig {
    /// A single-group config.
    pub fn single_group(n_identities: usize, images_per_identity: usize, within_noise_sigma: f64, rng_seed: u64) -> Self {
        Self {
            n_identities,
            images_per_identity,
            within_noise_sigma,
            groups: vec![GroupSpec {
                label: "G0".into(),
                identities: n_identities,
            }],
            rng_seed,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<(), SynthError> {
        let bad = |m: String| Err(SynthError::Config(m));
        if self.n_identities == 0 || self.images_per_identity == 0 {
            return bad("n_identities and images_per_identity must be positive".into());
        }
        if self.dimension < 2 {
            return bad(format!("dimension {} < 2", self.dimension));
        }
        if !(self.within_noise_sigma >= 0.0 && self.within_noise_sigma.is_finite()) {
            return bad(format!("within_noise_sigma {} must be finite and non-negative", self.within_noise_sigma));
        }
        if self.groups.is_empty() {
            return bad("at least one group is required".into());
        }
        let total: usize = self.groups.iter().map(|g| g.identities).sum();
        if total != self.n_identities {
            return bad(format!("group identity counts sum to {total}, expected {}", self.n_identities));
        }
        let mut labels: Vec<&str> = self.groups.iter().map(|g| g.label.as_str()).collect();
        labels.sort_unstable();
        if labels.windows(2).any(|w| w[0] == w[1]) {
            return bad("duplicate group label".into());
        }
        for l in &self.degradation_levels {
            if !(l.probe_noise_sigma >= 0.0 && l.probe_noise_sigma.is_finite()) {
                return bad(format!("condition {}: sigma must be finite and non-negative", l.condition));
            }
        }
        if self
            .degradation_levels
            .windows(2)
            .any(|w| w[1].probe_noise_sigma <= w[0].probe_noise_sigma)
        {
            return bad("degradation sigmas must be strictly increasing".into());
        }
        Ok(())
    }

    /// Sigma of the named condition.
    pub fn condition_sigma(&self, condition: &str) -> Option<f64> {
        self.degradation_levels
            .iter()
            .find(|l| l.condition == condition)
            .map(|l| l.probe_noise_sigma)
    }

    /// Reads a config from `.toml`, otherwise JSON.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, SynthError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| SynthError::Io {
            path: shown.clone(),
            source,
        })?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        let config = parsed.map_err(|message| SynthError::Parse { path: shown, message })?;
        config.validate()?;
        Ok(config)
    }
}

fn gaussian(dimension: usize, rng: &mut SeededRng) -> Vec<f64> {
    (0..dimension).map(|_| rng.normal()).collect()
}

fn noisy_unit(center: &[f64], sigma: f64, rng: &mut SeededRng) -> Result<Vec<f64>, SynthError> {
    for _ in 0..MAX_REDRAWS {
        let v: Vec<f64> = center.iter().map(|&c| c + sigma * rng.normal()).collect();
        if let Some(u) = l2_normalize(&v) {
            return Ok(u);
        }
    }
    Err(SynthError::Degenerate(MAX_REDRAWS))
}

/// Identity ids are `<group>-<global index, 5 digits>`, image ids
/// `img<index, 3 digits>`.
///
/// One [`SeededRng`] (`rng_seed`, stream 0) is consumed in order: for each
/// identity, `dimension` normals for the mean direction, then per image
/// `dimension` normals of noise. Vectors are built in `f64` and rounded to
/// `f32` after normalization.
pub fn generate(config: &SynthConfig) -> Result<EmbeddingStore, SynthError> {
    config.validate()?;
    let mut rng = SeededRng::new(config.rng_seed);
    let mut records = Vec::with_capacity(config.n_identities * config.images_per_identity);
    let mut next_identity = 0usize;
    for group in &config.groups {
        for _ in 0..group.identities {
            let identity_id = format!("{}-{:05}", group.label, next_identity);
            next_identity += 1;
            let center = loop {
                if let Some(c) = l2_normalize(&gaussian(config.dimension, &mut rng)) {
                    break c;
                }
            };
            for image in 0..config.images_per_identity {
                let v = if config.within_noise_sigma == 0.0 {
                    center.clone()
                } else {
                    noisy_unit(&center, config.within_noise_sigma, &mut rng)?
                };
                records.push(EmbeddingRecord {
                    identity_id: identity_id.clone(),
                    image_id: format!("img{image:03}"),
                    group: group.label.clone(),
                    capture_index: image as u32 + 1,
                    vector: v.iter().map(|&x| x as f32).collect(),
                });
            }
        }
    }
    Ok(EmbeddingStore::new(config.dimension, records)?)
}

/// Adds isotropic Gaussian noise to a unit vector and re-normalizes.
/// Sigma zero returns the input unchanged.
pub fn degrade_probe(vector: &[f32], probe_noise_sigma: f64, rng: &mut SeededRng) -> Result<Vec<f32>, SynthError> {
    if probe_noise_sigma == 0.0 {
        return Ok(vector.to_vec());
    }
    let center: Vec<f64> = vector.iter().map(|&x| f64::from(x)).collect();
    Ok(noisy_unit(&center, probe_noise_sigma, rng)?
        .iter()
        .map(|&x| x as f32)
        .collect())
}

/// [`degrade_probe`] at a fixed sigma, usable as a curation hook.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseDegradation {
    pub sigma: f64,
}

impl ProbeDegradation for NoiseDegradation {
    fn degrade(&self, probe: &[f32], rng: &mut SeededRng) -> Vec<f32> {
        // Exhausting the redraws is vanishingly unlikely; hand back the
        // original and let curation proceed.
        degrade_probe(probe, self.sigma, rng).unwrap_or_else(|_| probe.to_vec())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scalar::dot_f32_wide;

    #[test]
    fn zero_noise_gives_identical_images() {
        let store = generate(&SynthConfig::single_group(3, 4, 0.0, 1)).unwrap();
        for (_, imgs) in store.identities() {
            assert!(imgs.iter().all(|r| r.vector == imgs[0].vector));
            assert!((dot_f32_wide(&imgs[0].vector, &imgs[0].vector) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn generation_is_deterministic_and_labelled() {
        let mut c = SynthConfig::single_group(6, 3, 0.1, 9);
        c.groups = vec![
            GroupSpec {
                label: "A".into(),
                identities: 2,
            },
            GroupSpec {
                label: "B".into(),
                identities: 4,
            },
        ];
        let a = generate(&c).unwrap();
        assert_eq!(a, generate(&c).unwrap());
        assert_eq!(a.len(), 18);
        assert_eq!(a.groups().iter().cloned().collect::<Vec<_>>(), vec!["A", "B"]);
        assert_eq!(a.filter_by_group("B").unwrap().len(), 12);
        let caps: Vec<u32> = a.identities()[0].1.iter().map(|r| r.capture_index).collect();
        assert_eq!(caps, vec![1, 2, 3]);
    }

    #[test]
    fn config_validation() {
        let mut c = SynthConfig::single_group(4, 5, 0.1, 0);
        c.groups[0].identities = 3;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::single_group(4, 5, 0.1, 0);
        c.dimension = 1;
        assert!(c.validate().is_err());
        let mut c = SynthConfig::single_group(4, 5, 0.1, 0);
        c.degradation_levels = vec![
            DegradationLevel {
                condition: "a".into(),
                probe_noise_sigma: 0.1,
            },
            DegradationLevel {
                condition: "b".into(),
                probe_noise_sigma: 0.1,
            },
        ];
        assert!(c.validate().is_err());
    }

    #[test]
    fn degrade_contract() {
        let mut rng = SeededRng::new(3);
        let v = l2_normalize(&[0.3f32, -0.2, 0.9, 0.1]).unwrap();
        assert_eq!(degrade_probe(&v, 0.0, &mut rng).unwrap(), v);
        for _ in 0..100 {
            let out = degrade_probe(&v, 0.5, &mut rng).unwrap();
            assert!((crate::scalar::norm(&out) - 1.0).abs() < 1e-6);
        }
    }

    #[test]
    fn config_files_parse() {
        let dir = tempfile::tempdir().unwrap();
        let c = SynthConfig::single_group(10, 5, 0.07, 4);
        let json = dir.path().join("s.json");
        std::fs::write(&json, serde_json::to_string(&c).unwrap()).unwrap();
        assert_eq!(SynthConfig::load(&json).unwrap(), c);
        let tml = dir.path().join("s.toml");
        std::fs::write(&tml, toml::to_string(&c).unwrap()).unwrap();
        assert_eq!(SynthConfig::load(&tml).unwrap(), c);
    }
}

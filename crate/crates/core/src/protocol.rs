//! Dual-search curation of labelled rank samples.
//!
//! For each eligible identity the most recent image becomes the probe and a
//! random subset of the rest is enrolled. Every probe is searched twice against
//! the group's shared gallery: once with its own identity enrolled (label 1,
//! In-gallery) and once with that identity removed (label 0, Out-of-gallery).
//! Each search contributes the ranks of the rank-one identity's additional
//! images as one [`RankSample`].

use std::fmt;
use std::io::{self, Read, Write};
use std::path::Path;
use std::str::FromStr;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::framing::*;
use crate::rng::{derive_seed, SeededRng};
use crate::search::{GalleryIndex, SearchError, SearchResult};
use crate::store::{l2_normalize, EmbeddingRecord, EmbeddingStore, StoreError};

pub const SAMPLES_MAGIC: &[u8; 4] = b"OGRS";
pub const SAMPLES_VERSION: u32 = 1;

const DEGRADE_TAG: u64 = 0xD1;
const SUBSET_TAG: u64 = 0x5B;

#[derive(Debug, Error)]
pub enum CurationError {
    #[error("invalid curation config: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Search(#[from] SearchError),
    #[error("need at least 2 eligible identities for an out-of-gallery search, found {0}")]
    TooFewIdentities(usize),
    #[error("class {label} has {count} samples, need at least {needed}")]
    InsufficientClass { label: Label, count: usize, needed: usize },
    #[error("no samples")]
    Empty,
    #[error("degraded probe for {0} has zero norm")]
    DegenerateProbe(String),
    #[error("i/o error: {0}")]
    Io(#[from] io::Error),
    #[error("csv error: {0}")]
    Csv(#[from] csv::Error),
    #[error("malformed sample file: {0}")]
    Malformed(String),
}

/// In-gallery (1) or Out-of-gallery (0).
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Label {
    OutOfGallery = 0,
    InGallery = 1,
}

impl Label {
    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<Self> {
        match i {
            0 => Some(Label::OutOfGallery),
            1 => Some(Label::InGallery),
            _ => None,
        }
    }
}

impl fmt::Display for Label {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}", self.index())
    }
}

/// A labelled rank vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RankSample {
    pub ranks: Vec<u32>,
    pub label: Label,
    pub probe_identity: String,
    pub group: String,
    pub condition: String,
    pub gallery_size: u32,
}

impl RankSample {
    /// Identifies the search a sample came from; permuted copies share it.
    pub fn fingerprint(&self) -> (String, String, String, Label) {
        (
            self.group.clone(),
            self.condition.clone(),
            self.probe_identity.clone(),
            self.label,
        )
    }
}

/// How the `d_in` ranks are chosen when the rank-one identity has more
/// additional images than needed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RankSelection {
    /// The `d_in` smallest ranks.
    #[default]
    Best,
    /// A seeded uniform subset of `d_in` ranks, sorted.
    RandomSubset,
}

impl FromStr for RankSelection {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "best" => Ok(RankSelection::Best),
            "random_subset" | "random" => Ok(RankSelection::RandomSubset),
            other => Err(format!("unknown rank selection {other:?} (expected best or random_subset)")),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CurationConfig {
    pub d_in: usize,
    pub min_images_per_identity: usize,
    pub enrolled_per_identity: usize,
    pub rng_seed: u64,
    pub group: String,
    pub condition: String,
    pub rank_selection: RankSelection,
}

impl Default for CurationConfig {
    fn default() -> Self {
        Self::for_d_in(3)
    }
}

impl CurationConfig {
    /// `d_in + 1` enrolled images and one probe per identity.
    pub fn for_d_in(d_in: usize) -> Self {
        Self {
            d_in,
            min_images_per_identity: d_in + 2,
            enrolled_per_identity: d_in + 1,
            rng_seed: 0,
            group: String::new(),
            condition: "original".into(),
            rank_selection: RankSelection::Best,
        }
    }

    pub fn validate(&self) -> Result<(), CurationError> {
        if self.d_in == 0 {
            return Err(CurationError::Config("d_in must be positive".into()));
        }
        if self.enrolled_per_identity < self.d_in + 1 {
            return Err(CurationError::Config(format!(
                "enrolled_per_identity {} < d_in + 1 = {}",
                self.enrolled_per_identity,
                self.d_in + 1
            )));
        }
        if self.min_images_per_identity < self.enrolled_per_identity + 1 {
            return Err(CurationError::Config(format!(
                "min_images_per_identity {} < enrolled_per_identity + 1 = {}",
                self.min_images_per_identity,
                self.enrolled_per_identity + 1
            )));
        }
        Ok(())
    }
}

/// Perturbs a probe embedding before it is searched.
pub trait ProbeDegradation: Sync {
    fn degrade(&self, probe: &[f32], rng: &mut SeededRng) -> Vec<f32>;
}

impl<F> ProbeDegradation for F
where
    F: Fn(&[f32], &mut SeededRng) -> Vec<f32> + Sync,
{
    fn degrade(&self, probe: &[f32], rng: &mut SeededRng) -> Vec<f32> {
        self(probe, rng)
    }
}

/// One identity's probe and the images enrolled for it.
#[derive(Debug, Clone, PartialEq)]
pub struct ProbeSelection {
    pub probe: EmbeddingRecord,
    /// In key order.
    pub enrollment_pool: Vec<EmbeddingRecord>,
}

/// Picks the most recent image of every identity with enough images as its
/// probe and enrolls a seeded random subset of the remainder.
///
/// Recency ties go to the largest `image_id`. The pool draw uses one
/// [`SeededRng`] stream (`rng_seed`, stream 0) consumed identity by identity,
/// in identity order, by [`SeededRng::sample_indices`] over the remaining
/// images in `image_id` order.
pub fn select_probes(store: &EmbeddingStore, config: &CurationConfig) -> Vec<ProbeSelection> {
    let mut rng = SeededRng::with_stream(config.rng_seed, 0);
    let mut out = Vec::new();
    for (_, images) in store.identities() {
        if images.len() < config.min_images_per_identity {
            continue;
        }
        let probe_at = images
            .iter()
            .enumerate()
            .max_by(|(_, a), (_, b)| (a.capture_index, &a.image_id).cmp(&(b.capture_index, &b.image_id)))
            .map(|(i, _)| i)
            .expect("non-empty identity");
        let rest: Vec<&EmbeddingRecord> = images
            .iter()
            .enumerate()
            .filter(|&(i, _)| i != probe_at)
            .map(|(_, r)| r)
            .collect();
        let mut picked = rng.sample_indices(rest.len(), config.enrolled_per_identity);
        picked.sort_unstable();
        out.push(ProbeSelection {
            probe: images[probe_at].clone(),
            enrollment_pool: picked.into_iter().map(|i| rest[i].clone()).collect(),
        });
    }
    out
}

/// Search-side context of a curated sample, aligned with [`Curation::samples`].
#[derive(Debug, Clone, PartialEq)]
pub struct SampleTrace {
    pub rank_one_identity: String,
    /// Rank-one similarity.
    pub max_similarity: f64,
    /// The (possibly degraded) probe vector that was searched.
    pub probe: Arc<Vec<f32>>,
    /// Identity removed from the gallery for the Out-of-gallery search.
    pub excluded_identity: Option<String>,
}

#[derive(Debug, Clone)]
pub struct Curation {
    /// Ordered by probe identity; each probe's In-gallery sample precedes its
    /// Out-of-gallery sample.
    pub samples: Vec<RankSample>,
    pub traces: Vec<SampleTrace>,
    /// The shared In-gallery gallery.
    pub gallery: GalleryIndex,
    pub skipped_out_of_gallery: usize,
}

/// Runs the In-gallery and Out-of-gallery searches for every probe.
///
/// An empty `config.group` curates the whole store as one gallery.
pub fn curate(
    store: &EmbeddingStore,
    config: &CurationConfig,
    degrade: Option<&dyn ProbeDegradation>,
) -> Result<Curation, CurationError> {
    config.validate()?;
    let filtered;
    let store = if config.group.is_empty() {
        store
    } else {
        filtered = store.filter_by_group(&config.group)?;
        &filtered
    };
    let selections = select_probes(store, config);
    if selections.len() < 2 {
        return Err(CurationError::TooFewIdentities(selections.len()));
    }
    let gallery = GalleryIndex::from_records(selections.iter().flat_map(|s| s.enrollment_pool.iter()))?;
    let degrade_seed = derive_seed(config.rng_seed, DEGRADE_TAG);
    let subset_seed = derive_seed(config.rng_seed, SUBSET_TAG);

    let per_probe: Vec<Result<Vec<(RankSample, SampleTrace)>, CurationError>> = selections
        .par_iter()
        .enumerate()
        .map(|(i, sel)| {
            let identity = &sel.probe.identity_id;
            let probe = match degrade {
                Some(d) => {
                    let mut rng = SeededRng::with_stream(degrade_seed, i as u64);
                    let moved = d.degrade(&sel.probe.vector, &mut rng);
                    l2_normalize(&moved).ok_or_else(|| CurationError::DegenerateProbe(identity.clone()))?
                }
                None => sel.probe.vector.clone(),
            };
            let probe = Arc::new(probe);
            let mut out = Vec::with_capacity(2);

            let inside = gallery.search(&probe)?;
            let mut rng = SeededRng::with_stream(subset_seed, 2 * i as u64);
            let ranks = select_ranks(&inside, config, &mut rng)?;
            out.push(make_sample(config, sel, &inside, ranks, Label::InGallery, None, &probe));

            let outside = gallery.search_excluding(&probe, identity)?;
            let mut rng = SeededRng::with_stream(subset_seed, 2 * i as u64 + 1);
            match select_ranks(&outside, config, &mut rng) {
                Ok(ranks) => out.push(make_sample(
                    config,
                    sel,
                    &outside,
                    ranks,
                    Label::OutOfGallery,
                    Some(identity.clone()),
                    &probe,
                )),
                Err(CurationError::Search(SearchError::InsufficientImages { .. })) => {}
                Err(e) => return Err(e),
            }
            Ok(out)
        })
        .collect();

    let mut samples = Vec::with_capacity(2 * selections.len());
    let mut traces = Vec::with_capacity(2 * selections.len());
    let mut skipped = 0;
    for pairs in per_probe {
        let pairs = pairs?;
        if pairs.len() < 2 {
            skipped += 1;
        }
        for (s, t) in pairs {
            samples.push(s);
            traces.push(t);
        }
    }
    if skipped > 0 {
        log::info!("{skipped} out-of-gallery samples skipped: rank-one identity had fewer than {} additional images", config.d_in);
    }
    Ok(Curation {
        samples,
        traces,
        gallery,
        skipped_out_of_gallery: skipped,
    })
}

fn select_ranks(result: &SearchResult, config: &CurationConfig, rng: &mut SeededRng) -> Result<Vec<u32>, CurationError> {
    match config.rank_selection {
        RankSelection::Best => Ok(result.rank_vector(config.d_in)?.ranks),
        RankSelection::RandomSubset => {
            let all = result.additional_ranks();
            if all.len() < config.d_in {
                return Err(SearchError::InsufficientImages {
                    identity_id: result.rank_one().identity_id.to_string(),
                    available: all.len(),
                    needed: config.d_in,
                }
                .into());
            }
            let mut ranks: Vec<u32> = rng.sample_indices(all.len(), config.d_in).into_iter().map(|i| all[i]).collect();
            ranks.sort_unstable();
            Ok(ranks)
        }
    }
}

fn make_sample(
    config: &CurationConfig,
    sel: &ProbeSelection,
    result: &SearchResult,
    ranks: Vec<u32>,
    label: Label,
    excluded_identity: Option<String>,
    probe: &Arc<Vec<f32>>,
) -> (RankSample, SampleTrace) {
    (
        RankSample {
            ranks,
            label,
            probe_identity: sel.probe.identity_id.clone(),
            group: sel.probe.group.clone(),
            condition: config.condition.clone(),
            gallery_size: result.len() as u32,
        },
        SampleTrace {
            rank_one_identity: result.rank_one().identity_id.to_string(),
            max_similarity: result.max_similarity(),
            probe: Arc::clone(probe),
            excluded_identity,
        },
    )
}

#[derive(Debug, Clone, PartialEq)]
pub struct SplitDataset {
    pub train: Vec<RankSample>,
    pub test: Vec<RankSample>,
    /// Positions in the input, ascending.
    pub train_indices: Vec<usize>,
    pub test_indices: Vec<usize>,
}

/// Per-class shuffled split; each class contributes `round(n_c * test_fraction)`
/// samples (at least one, at most `n_c - 1`) to the test side.
pub fn stratified_split(samples: &[RankSample], test_fraction: f64, rng_seed: u64) -> Result<SplitDataset, CurationError> {
    if !(test_fraction > 0.0 && test_fraction < 1.0) {
        return Err(CurationError::Config(format!("test_fraction {test_fraction} not in (0, 1)")));
    }
    let mut rng = SeededRng::new(rng_seed);
    let mut test_indices = Vec::new();
    let mut train_indices = Vec::new();
    for label in [Label::OutOfGallery, Label::InGallery] {
        let mut idx: Vec<usize> = (0..samples.len()).filter(|&i| samples[i].label == label).collect();
        if idx.len() < 2 {
            return Err(CurationError::InsufficientClass {
                label,
                count: idx.len(),
                needed: 2,
            });
        }
        rng.shuffle(&mut idx);
        let n_test = ((idx.len() as f64 * test_fraction).round() as usize).clamp(1, idx.len() - 1);
        test_indices.extend_from_slice(&idx[..n_test]);
        train_indices.extend_from_slice(&idx[n_test..]);
    }
    train_indices.sort_unstable();
    test_indices.sort_unstable();
    Ok(SplitDataset {
        train: train_indices.iter().map(|&i| samples[i].clone()).collect(),
        test: test_indices.iter().map(|&i| samples[i].clone()).collect(),
        train_indices,
        test_indices,
    })
}

/// Returns the originals followed by `copies_per_sample` coordinate-permuted
/// variants of each, in sample order.
///
/// Variants are drawn uniformly from the non-identity permutations of the
/// sample's ranks. Samples with fewer than two distinct ranks have none, and
/// contribute no variants.
pub fn permute_augment(samples: &[RankSample], copies_per_sample: usize, rng_seed: u64) -> Vec<RankSample> {
    let mut rng = SeededRng::new(rng_seed);
    let mut out = samples.to_vec();
    for s in samples {
        let distinct = s.ranks.windows(2).any(|w| w[0] != w[1]);
        if !distinct {
            continue;
        }
        for _ in 0..copies_per_sample {
            let mut v = s.clone();
            loop {
                rng.shuffle(&mut v.ranks);
                if v.ranks != s.ranks {
                    break;
                }
            }
            out.push(v);
        }
    }
    out
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RankDistributionRow {
    pub rank: u32,
    pub count_in: u64,
    pub count_out: u64,
    /// `P(in_gallery | rank <= r)`; `None` when no entries are at or below `r`.
    pub p_in_cumulative: Option<f64>,
}

/// Counts rank entries at each `r` in `2..=max_rank` per label.
pub fn rank_distribution_report(samples: &[RankSample], max_rank: u32) -> Result<Vec<RankDistributionRow>, CurationError> {
    if samples.is_empty() {
        return Err(CurationError::Empty);
    }
    let mut counts = vec![[0u64; 2]; max_rank as usize + 1];
    for s in samples {
        for &r in &s.ranks {
            if r <= max_rank {
                counts[r as usize][s.label.index()] += 1;
            }
        }
    }
    let mut cum = [0u64; 2];
    let mut rows = Vec::new();
    for r in 2..=max_rank {
        let c = counts[r as usize];
        cum[0] += c[0];
        cum[1] += c[1];
        let total = cum[0] + cum[1];
        rows.push(RankDistributionRow {
            rank: r,
            count_in: c[1],
            count_out: c[0],
            p_in_cumulative: (total > 0).then(|| cum[1] as f64 / total as f64),
        });
    }
    Ok(rows)
}

pub fn write_rank_distribution_csv<W: Write>(rows: &[RankDistributionRow], w: W) -> Result<(), CurationError> {
    let mut wtr = csv::Writer::from_writer(w);
    wtr.write_record(["rank", "count_in", "count_out", "p_in_cumulative"])?;
    for row in rows {
        wtr.write_record([
            row.rank.to_string(),
            row.count_in.to_string(),
            row.count_out.to_string(),
            row.p_in_cumulative.map(|p| format!("{p:.6}")).unwrap_or_default(),
        ])?;
    }
    wtr.flush()?;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SampleFormat {
    #[default]
    Csv,
    Binary,
}

impl SampleFormat {
    pub fn from_path(path: &Path) -> Self {
        match path.extension().and_then(|e| e.to_str()) {
            Some(ext) if ext.eq_ignore_ascii_case("csv") => SampleFormat::Csv,
            _ => SampleFormat::Binary,
        }
    }
}

impl FromStr for SampleFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "csv" => Ok(SampleFormat::Csv),
            "binary" | "bin" => Ok(SampleFormat::Binary),
            other => Err(format!("unknown sample format {other:?} (expected csv or binary)")),
        }
    }
}

fn common_d_in(samples: &[RankSample]) -> Result<usize, CurationError> {
    let d_in = samples.first().map_or(0, |s| s.ranks.len());
    if samples.iter().any(|s| s.ranks.len() != d_in) {
        return Err(CurationError::Malformed("samples have differing rank lengths".into()));
    }
    Ok(d_in)
}

/// CSV header: `probe_identity,group,condition,label,gallery_size,r1,...,r{d_in}`.
pub fn write_samples_csv<W: Write>(samples: &[RankSample], w: W) -> Result<(), CurationError> {
    let d_in = common_d_in(samples)?;
    let mut wtr = csv::Writer::from_writer(w);
    let mut header: Vec<String> = ["probe_identity", "group", "condition", "label", "gallery_size"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    header.extend((1..=d_in).map(|k| format!("r{k}")));
    wtr.write_record(&header)?;
    for s in samples {
        let mut row = vec![
            s.probe_identity.clone(),
            s.group.clone(),
            s.condition.clone(),
            s.label.to_string(),
            s.gallery_size.to_string(),
        ];
        row.extend(s.ranks.iter().map(u32::to_string));
        wtr.write_record(&row)?;
    }
    wtr.flush()?;
    Ok(())
}

pub fn read_samples_csv<R: Read>(r: R) -> Result<Vec<RankSample>, CurationError> {
    let mut rdr = csv::ReaderBuilder::new().flexible(true).from_reader(r);
    let header = rdr.headers()?.clone();
    const FIXED: [&str; 5] = ["probe_identity", "group", "condition", "label", "gallery_size"];
    if header.len() < FIXED.len() || header.iter().take(FIXED.len()).ne(FIXED.iter().copied()) {
        return Err(CurationError::Malformed(format!("unexpected header {header:?}")));
    }
    let d_in = header.len() - FIXED.len();
    let parse = |row: usize, s: &str| {
        s.trim()
            .parse::<u32>()
            .map_err(|e| CurationError::Malformed(format!("row {row}: {s:?}: {e}")))
    };
    let mut out = Vec::new();
    for (row, rec) in rdr.records().enumerate() {
        let rec = rec?;
        if rec.len() != header.len() {
            return Err(CurationError::Malformed(format!(
                "row {row}: {} fields, expected {}",
                rec.len(),
                header.len()
            )));
        }
        let label = Label::from_index(parse(row, &rec[3])? as usize)
            .ok_or_else(|| CurationError::Malformed(format!("row {row}: label {:?}", &rec[3])))?;
        out.push(RankSample {
            probe_identity: rec[0].to_string(),
            group: rec[1].to_string(),
            condition: rec[2].to_string(),
            label,
            gallery_size: parse(row, &rec[4])?,
            ranks: (0..d_in).map(|k| parse(row, &rec[FIXED.len() + k])).collect::<Result<_, _>>()?,
        });
    }
    Ok(out)
}

/// Binary framing mirroring the store: magic `OGRS`, `u32` version, `u32`
/// d_in, `u64` count; per sample three u16-prefixed strings (probe identity,
/// group, condition), `u8` label, `u32` gallery size and `d_in` `u32` ranks.
pub fn write_samples_binary<W: Write>(samples: &[RankSample], w: &mut W) -> Result<(), CurationError> {
    let d_in = common_d_in(samples)?;
    w.write_all(SAMPLES_MAGIC)?;
    write_u32(w, SAMPLES_VERSION)?;
    write_u32(w, d_in as u32)?;
    write_u64(w, samples.len() as u64)?;
    for s in samples {
        write_str(w, &s.probe_identity)?;
        write_str(w, &s.group)?;
        write_str(w, &s.condition)?;
        write_u8(w, s.label.index() as u8)?;
        write_u32(w, s.gallery_size)?;
        for &r in &s.ranks {
            write_u32(w, r)?;
        }
    }
    Ok(())
}

pub fn read_samples_binary<R: Read>(mut r: R) -> Result<Vec<RankSample>, CurationError> {
    let magic: [u8; 4] = read_magic(&mut r)?;
    if &magic != SAMPLES_MAGIC {
        return Err(CurationError::Malformed("bad magic".into()));
    }
    let version = read_u32(&mut r)?;
    if version != SAMPLES_VERSION {
        return Err(CurationError::Malformed(format!("unsupported version {version}")));
    }
    let d_in = read_u32(&mut r)? as usize;
    let count = read_u64(&mut r)?;
    let mut out = Vec::new();
    for _ in 0..count {
        let probe_identity = read_str(&mut r)?;
        let group = read_str(&mut r)?;
        let condition = read_str(&mut r)?;
        let raw = read_u8(&mut r)?;
        let label = Label::from_index(raw as usize).ok_or_else(|| CurationError::Malformed(format!("label {raw}")))?;
        let gallery_size = read_u32(&mut r)?;
        let ranks = (0..d_in).map(|_| read_u32(&mut r)).collect::<io::Result<_>>()?;
        out.push(RankSample {
            ranks,
            label,
            probe_identity,
            group,
            condition,
            gallery_size,
        });
    }
    Ok(out)
}

pub fn write_samples(samples: &[RankSample], path: impl AsRef<Path>, format: SampleFormat) -> Result<(), CurationError> {
    let mut w = io::BufWriter::new(std::fs::File::create(path)?);
    match format {
        SampleFormat::Csv => write_samples_csv(samples, &mut w)?,
        SampleFormat::Binary => write_samples_binary(samples, &mut w)?,
    }
    w.flush()?;
    Ok(())
}

pub fn read_samples(path: impl AsRef<Path>, format: SampleFormat) -> Result<Vec<RankSample>, CurationError> {
    let r = io::BufReader::new(std::fs::File::open(path)?);
    match format {
        SampleFormat::Csv => read_samples_csv(r),
        SampleFormat::Binary => read_samples_binary(r),
    }
}

//! End-to-end experiments: one cell per (group, condition, d_in, seed),
//! every method fitted on the same curation and split, and reports rendered
//! as CSV, JSON or markdown tables.
//!
//! Inside a cell the seed is expanded into independent sub-seeds:
//! curation uses `seed` directly, and the split, augmentation and MLP use
//! [`derive_seed`] with fixed tags. Cells therefore reproduce exactly when
//! re-run in isolation.

use std::collections::BTreeSet;
use std::fmt;
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::baselines::{
    calibrate_threshold, centroid_classify, fit_centroid, BaselineError, CentroidStatistic, FusedGallery,
    ThresholdModel,
};
use crate::mlp::{InputScaling, MlpConfig};
use crate::protocol::{
    curate, permute_augment, stratified_split, Curation, CurationConfig, CurationError, Label, RankSample,
    RankSelection,
};
use crate::rng::derive_seed;
use crate::store::{EmbeddingStore, StoreError, StoreFormat};
use crate::synth::{generate, NoiseDegradation, SynthConfig, SynthError};
use crate::train::{evaluate, train, Confusion, TrainError};

const SPLIT_TAG: u64 = 0x5017;
const AUGMENT_TAG: u64 = 0xA116;
const MLP_TAG: u64 = 0x3170;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Method {
    Mlp,
    Threshold,
    Mean,
    Median,
    Fusion,
}

impl Method {
    pub const ALL: [Method; 5] = [Method::Mlp, Method::Threshold, Method::Mean, Method::Median, Method::Fusion];

    pub fn as_str(self) -> &'static str {
        match self {
            Method::Mlp => "mlp",
            Method::Threshold => "threshold",
            Method::Mean => "mean",
            Method::Median => "median",
            Method::Fusion => "fusion",
        }
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for Method {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Method::ALL
            .into_iter()
            .find(|m| m.as_str() == s)
            .ok_or_else(|| format!("unknown method {s:?} (expected mlp, threshold, mean, median or fusion)"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum StoreSource {
    /// An embedding file; the format follows the extension.
    File { path: PathBuf },
    Synthetic { config: SynthConfig },
}

impl StoreSource {
    pub fn load(&self) -> Result<EmbeddingStore, ExperimentError> {
        match self {
            StoreSource::File { path } => Ok(EmbeddingStore::ingest(path, StoreFormat::from_path(path))?),
            StoreSource::Synthetic { config } => Ok(generate(config)?),
        }
    }
}

/// A probe condition: a tag and the embedding-space noise applied to probes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConditionSpec {
    pub tag: String,
    #[serde(default)]
    pub probe_noise_sigma: f64,
}

fn default_d_in() -> Vec<usize> {
    vec![3]
}

fn default_test_fraction() -> f64 {
    0.2
}

fn default_target_fpir() -> f64 {
    1e-4
}

fn default_copies() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentPlan {
    pub source: StoreSource,
    pub groups: Vec<String>,
    pub conditions: Vec<ConditionSpec>,
    #[serde(default = "default_d_in")]
    pub d_in_values: Vec<usize>,
    pub methods: Vec<Method>,
    pub seeds: Vec<u64>,
    /// Enrolled images per identity; `None` means `d_in + 1` for each cell.
    #[serde(default)]
    pub enrolled_per_identity: Option<usize>,
    #[serde(default)]
    pub rank_selection: RankSelection,
    #[serde(default = "default_test_fraction")]
    pub test_fraction: f64,
    /// Permuted copies added per training sample (MLP only).
    #[serde(default = "default_copies")]
    pub augment_copies: usize,
    #[serde(default = "default_target_fpir")]
    pub target_fpir: f64,
    /// Calibrate thresholds once on the first condition and reuse them for
    /// the others, instead of recalibrating per condition.
    #[serde(default)]
    pub reuse_threshold: bool,
    /// `d_in` and `rng_seed` are overridden per cell.
    #[serde(default)]
    pub mlp: MlpConfig,
    #[serde(default)]
    pub output_dir: Option<PathBuf>,
}

impl ExperimentPlan {
    /// One group per synthetic group and one condition per degradation level.
    pub fn for_synthetic(config: SynthConfig, methods: Vec<Method>, seeds: Vec<u64>) -> Self {
        Self {
            groups: config.groups.iter().map(|g| g.label.clone()).collect(),
            conditions: config
                .degradation_levels
                .iter()
                .map(|l| ConditionSpec {
                    tag: l.condition.clone(),
                    probe_noise_sigma: l.probe_noise_sigma,
                })
                .collect(),
            source: StoreSource::Synthetic { config },
            d_in_values: default_d_in(),
            methods,
            seeds,
            enrolled_per_identity: None,
            rank_selection: RankSelection::Best,
            test_fraction: default_test_fraction(),
            augment_copies: default_copies(),
            target_fpir: default_target_fpir(),
            reuse_threshold: false,
            mlp: MlpConfig::default(),
            output_dir: None,
        }
    }

    pub fn validate(&self) -> Result<(), ExperimentError> {
        let bad = |m: &str| Err(ExperimentError::Plan(m.to_string()));
        if self.groups.is_empty() {
            return bad("no groups");
        }
        if self.conditions.is_empty() {
            return bad("no conditions");
        }
        if self.methods.is_empty() {
            return bad("no methods");
        }
        if self.seeds.is_empty() {
            return bad("no seeds");
        }
        if self.d_in_values.is_empty() || self.d_in_values.contains(&0) {
            return bad("d_in values must be non-empty and positive");
        }
        if self
            .conditions
            .iter()
            .any(|c| !(c.probe_noise_sigma >= 0.0 && c.probe_noise_sigma.is_finite()))
        {
            return bad("condition sigmas must be finite and non-negative");
        }
        if !(self.test_fraction > 0.0 && self.test_fraction < 1.0) {
            return bad("test_fraction must lie in (0, 1)");
        }
        if !(self.target_fpir > 0.0 && self.target_fpir <= 1.0) {
            return bad("target_fpir must lie in (0, 1]");
        }
        for d in &self.d_in_values {
            if let Some(e) = self.enrolled_per_identity {
                if e < d + 1 {
                    return Err(ExperimentError::Plan(format!(
                        "enrolled_per_identity {e} cannot support d_in {d}"
                    )));
                }
            }
            MlpConfig {
                d_in: *d,
                ..self.mlp.clone()
            }
            .validate()
            .map_err(|e| ExperimentError::Plan(e.to_string()))?;
        }
        Ok(())
    }

    /// Every cell, in plan order: group, condition, d_in, seed.
    pub fn cells(&self) -> Vec<CellKey> {
        let mut out = Vec::new();
        for group in &self.groups {
            for condition in &self.conditions {
                for &d_in in &self.d_in_values {
                    for &seed in &self.seeds {
                        out.push(CellKey {
                            group: group.clone(),
                            condition: condition.tag.clone(),
                            d_in,
                            seed,
                        });
                    }
                }
            }
        }
        out
    }

    /// SHA-256 of the plan's JSON form, ignoring the output directory.
    pub fn config_hash(&self) -> String {
        let mut canonical = self.clone();
        canonical.output_dir = None;
        let bytes = serde_json::to_vec(&canonical).expect("plan serializes");
        Sha256::digest(&bytes).iter().fold(String::new(), |mut s, b| {
            let _ = write!(s, "{b:02x}");
            s
        })
    }

    /// Reads a plan from `.toml`, otherwise JSON, and validates it.
    pub fn load(path: impl AsRef<Path>) -> Result<Self, ExperimentError> {
        let path = path.as_ref();
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path).map_err(|source| ExperimentError::Io {
            path: shown.clone(),
            source,
        })?;
        let parsed: Result<Self, String> = if path.extension().is_some_and(|e| e.eq_ignore_ascii_case("toml")) {
            toml::from_str(&text).map_err(|e| e.to_string())
        } else {
            serde_json::from_str(&text).map_err(|e| e.to_string())
        };
        let plan = parsed.map_err(|message| ExperimentError::Parse { path: shown, message })?;
        plan.validate()?;
        Ok(plan)
    }

    fn condition(&self, tag: &str) -> Option<&ConditionSpec> {
        self.conditions.iter().find(|c| c.tag == tag)
    }

    fn curation_config(&self, cell: &CellKey, condition: &str) -> CurationConfig {
        let enrolled = self.enrolled_per_identity.unwrap_or(cell.d_in + 1);
        CurationConfig {
            d_in: cell.d_in,
            min_images_per_identity: enrolled + 1,
            enrolled_per_identity: enrolled,
            rng_seed: cell.seed,
            group: cell.group.clone(),
            condition: condition.to_string(),
            rank_selection: self.rank_selection,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct CellKey {
    pub group: String,
    pub condition: String,
    pub d_in: usize,
    pub seed: u64,
}

impl fmt::Display for CellKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "group={} condition={} d_in={} seed={}",
            self.group, self.condition, self.d_in, self.seed
        )
    }
}

#[derive(Debug, Error)]
pub enum CellError {
    #[error("unknown condition {0:?}")]
    UnknownCondition(String),
    #[error("curation: {0}")]
    Curation(#[from] CurationError),
    #[error("training: {0}")]
    Train(#[from] TrainError),
    #[error("baseline: {0}")]
    Baseline(#[from] BaselineError),
    #[error("train/test overlap: {0} fingerprints shared")]
    Leak(usize),
}

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("invalid plan: {0}")]
    Plan(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Synth(#[from] SynthError),
    #[error("[{cell}] {source}")]
    Cell { cell: CellKey, source: CellError },
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("empty report")]
    EmptyReport,
}

/// One method's result in one cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub group: String,
    pub condition: String,
    pub method: Method,
    pub d_in: usize,
    pub seed: u64,
    pub train_samples: usize,
    pub test_samples: usize,
    pub confusion: Confusion,
}

impl ReportRow {
    pub fn accuracy(&self) -> f64 {
        self.confusion.accuracy()
    }
}

/// What a cell fitted on and evaluated on, by sample fingerprint.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct CellHygiene {
    pub fit: BTreeSet<(String, String, String, Label)>,
    pub eval: BTreeSet<(String, String, String, Label)>,
}

#[derive(Debug, Clone)]
pub struct CellResult {
    pub key: CellKey,
    pub rows: Vec<ReportRow>,
    pub skipped_out_of_gallery: usize,
    pub hygiene: CellHygiene,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellFailure {
    pub cell: CellKey,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub config_hash: String,
    pub input_scaling: InputScaling,
    /// Display order of groups and conditions.
    pub groups: Vec<String>,
    pub conditions: Vec<String>,
    pub rows: Vec<ReportRow>,
    pub failures: Vec<CellFailure>,
}

/// Confusion counts of `decide` over the test positions.
fn score_test<F>(test: &[usize], samples: &[RankSample], mut decide: F) -> Result<Confusion, CellError>
where
    F: FnMut(usize) -> Result<Label, CellError>,
{
    let mut c = Confusion::default();
    for &i in test {
        c.record(samples[i].label, decide(i)?);
    }
    Ok(c)
}

/// Max-score and fused-score thresholds from the training Out-of-gallery
/// searches of `curation`.
fn calibrate(
    curation: &Curation,
    train_indices: &[usize],
    target_fpir: f64,
    fused: Option<&FusedGallery>,
) -> Result<(ThresholdModel, Option<ThresholdModel>), CellError> {
    let nonmated: Vec<usize> = train_indices
        .iter()
        .copied()
        .filter(|&i| curation.samples[i].label == Label::OutOfGallery)
        .collect();
    let scores: Vec<f64> = nonmated.iter().map(|&i| curation.traces[i].max_similarity).collect();
    let threshold = calibrate_threshold(&scores, target_fpir)?;
    let fused_threshold = match fused {
        Some(f) => {
            let mut fs = Vec::with_capacity(nonmated.len());
            for &i in &nonmated {
                let t = &curation.traces[i];
                if let Some(s) = f.max_score(&t.probe, t.excluded_identity.as_deref())? {
                    fs.push(s);
                }
            }
            Some(calibrate_threshold(&fs, target_fpir)?)
        }
        None => None,
    };
    Ok((threshold, fused_threshold))
}

fn curate_cell(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    cell: &CellKey,
    condition: &str,
) -> Result<Curation, CellError> {
    let spec = plan
        .condition(condition)
        .ok_or_else(|| CellError::UnknownCondition(condition.to_string()))?;
    let config = plan.curation_config(cell, condition);
    let noise = NoiseDegradation {
        sigma: spec.probe_noise_sigma,
    };
    let degrade: Option<&dyn crate::protocol::ProbeDegradation> = if spec.probe_noise_sigma > 0.0 { Some(&noise) } else { None };
    Ok(curate(store, &config, degrade)?)
}

/// Runs one cell: curate, split, fit every requested method on the training
/// side and score it on the shared test side.
pub fn run_cell(plan: &ExperimentPlan, store: &EmbeddingStore, cell: &CellKey) -> Result<CellResult, CellError> {
    let curation = curate_cell(plan, store, cell, &cell.condition)?;
    let split = stratified_split(&curation.samples, plan.test_fraction, derive_seed(cell.seed, SPLIT_TAG))?;
    let samples = &curation.samples;
    let mut hygiene = CellHygiene {
        fit: split.train.iter().map(RankSample::fingerprint).collect(),
        eval: split.test.iter().map(RankSample::fingerprint).collect(),
    };

    let wants = |m: Method| plan.methods.contains(&m);
    let needs_threshold = wants(Method::Threshold) || wants(Method::Fusion);
    let fused = wants(Method::Fusion).then(|| FusedGallery::build(&curation.gallery));

    // Thresholds come from this cell's training split, or from the first
    // condition's when reuse is requested.
    let thresholds = if !needs_threshold {
        None
    } else if plan.reuse_threshold && plan.conditions[0].tag != cell.condition {
        let reference = curate_cell(plan, store, cell, &plan.conditions[0].tag)?;
        let ref_split = stratified_split(&reference.samples, plan.test_fraction, derive_seed(cell.seed, SPLIT_TAG))?;
        hygiene.fit.extend(ref_split.train.iter().map(RankSample::fingerprint));
        let ref_fused = wants(Method::Fusion).then(|| FusedGallery::build(&reference.gallery));
        Some(calibrate(&reference, &ref_split.train_indices, plan.target_fpir, ref_fused.as_ref())?)
    } else {
        Some(calibrate(&curation, &split.train_indices, plan.target_fpir, fused.as_ref())?)
    };

    let mut rows = Vec::with_capacity(plan.methods.len());
    for &method in &plan.methods {
        let (train_samples, confusion) = match method {
            Method::Mlp => {
                let augmented = permute_augment(&split.train, plan.augment_copies, derive_seed(cell.seed, AUGMENT_TAG));
                let config = MlpConfig {
                    d_in: cell.d_in,
                    rng_seed: derive_seed(cell.seed, MLP_TAG),
                    ..plan.mlp.clone()
                };
                let (model, _) = train::<f64>(&augmented, &config)?;
                hygiene.fit.extend(augmented.iter().map(RankSample::fingerprint));
                (augmented.len(), evaluate(&model, &split.test)?)
            }
            Method::Threshold => {
                let (t, _) = thresholds.as_ref().expect("calibrated");
                let c = score_test(&split.test_indices, samples, |i| {
                    Ok(t.classify_score(curation.traces[i].max_similarity))
                })?;
                (split.train.len(), c)
            }
            Method::Mean | Method::Median => {
                let statistic = if method == Method::Mean {
                    CentroidStatistic::Mean
                } else {
                    CentroidStatistic::Median
                };
                let model = fit_centroid(&split.train, statistic)?;
                let c = score_test(&split.test_indices, samples, |i| {
                    Ok(centroid_classify(&model, &samples[i].ranks)?)
                })?;
                (split.train.len(), c)
            }
            Method::Fusion => {
                let f = fused.as_ref().expect("built");
                let t = thresholds.as_ref().and_then(|(_, f)| f.as_ref()).expect("calibrated");
                let c = score_test(&split.test_indices, samples, |i| {
                    let tr = &curation.traces[i];
                    Ok(match f.max_score(&tr.probe, tr.excluded_identity.as_deref())? {
                        Some(s) => t.classify_score(s),
                        None => Label::OutOfGallery,
                    })
                })?;
                (split.train.len(), c)
            }
        };
        rows.push(ReportRow {
            group: cell.group.clone(),
            condition: cell.condition.clone(),
            method,
            d_in: cell.d_in,
            seed: cell.seed,
            train_samples,
            test_samples: split.test.len(),
            confusion,
        });
    }

    let shared = hygiene.fit.intersection(&hygiene.eval).count();
    if shared > 0 {
        return Err(CellError::Leak(shared));
    }
    Ok(CellResult {
        key: cell.clone(),
        rows,
        skipped_out_of_gallery: curation.skipped_out_of_gallery,
        hygiene,
    })
}

/// Runs every cell of the plan (in parallel). Failed cells are logged and
/// listed in the report; they do not stop the others.
pub fn run_experiment(plan: &ExperimentPlan) -> Result<EvalReport, ExperimentError> {
    plan.validate()?;
    let store = plan.source.load()?;
    run_experiment_on(plan, &store)
}

/// [`run_experiment`] on an already loaded store.
pub fn run_experiment_on(plan: &ExperimentPlan, store: &EmbeddingStore) -> Result<EvalReport, ExperimentError> {
    plan.validate()?;
    let cells = plan.cells();
    let results: Vec<Result<CellResult, ExperimentError>> = cells
        .par_iter()
        .map(|cell| {
            run_cell(plan, store, cell).map_err(|source| ExperimentError::Cell {
                cell: cell.clone(),
                source,
            })
        })
        .collect();
    let mut rows = Vec::new();
    let mut failures = Vec::new();
    for r in results {
        match r {
            Ok(c) => rows.extend(c.rows),
            Err(ExperimentError::Cell { cell, source }) => {
                log::error!("[{cell}] {source}");
                failures.push(CellFailure {
                    message: source.to_string(),
                    cell,
                });
            }
            Err(e) => return Err(e),
        }
    }
    Ok(EvalReport {
        config_hash: plan.config_hash(),
        input_scaling: plan.mlp.input_scaling,
        groups: plan.groups.clone(),
        conditions: plan.conditions.iter().map(|c| c.tag.clone()).collect(),
        rows,
        failures,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub d_in: usize,
    /// Mean over every (group, condition, seed) cell.
    pub accuracy: f64,
    pub cell_accuracies: Vec<f64>,
}

/// MLP accuracy per `d_in`, sorted by `d_in`.
///
/// All `d_in` values share one curation layout: each identity enrolls
/// `max(d_in) + 1` images, so only the length of the rank vector changes.
pub fn cardinality_sweep(
    plan: &ExperimentPlan,
    store: &EmbeddingStore,
    d_in_values: &[usize],
) -> Result<Vec<SweepRow>, ExperimentError> {
    let mut values: Vec<usize> = d_in_values.to_vec();
    values.sort_unstable();
    let before = values.len();
    values.dedup();
    if values.len() != before {
        log::warn!("duplicate d_in values removed; sweeping {values:?}");
    }
    let max = *values.last().ok_or_else(|| ExperimentError::Plan("no d_in values".into()))?;
    let needed = max + 2;
    let eligible = store.identities().iter().filter(|(_, imgs)| imgs.len() >= needed).count();
    if eligible < 2 {
        return Err(ExperimentError::Plan(format!(
            "d_in {max} needs identities with at least {needed} images; {eligible} available"
        )));
    }
    let mut sweep = plan.clone();
    sweep.d_in_values = values.clone();
    sweep.methods = vec![Method::Mlp];
    sweep.enrolled_per_identity = Some(max + 1);
    let report = run_experiment_on(&sweep, store)?;
    if let Some(f) = report.failures.first() {
        return Err(ExperimentError::Plan(format!("[{}] {}", f.cell, f.message)));
    }
    Ok(values
        .into_iter()
        .map(|d| {
            let cell_accuracies: Vec<f64> = report.rows.iter().filter(|r| r.d_in == d).map(ReportRow::accuracy).collect();
            SweepRow {
                d_in: d,
                accuracy: cell_accuracies.iter().sum::<f64>() / cell_accuracies.len() as f64,
                cell_accuracies,
            }
        })
        .collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ReportFormat {
    Csv,
    Json,
    Markdown,
}

impl ReportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ReportFormat::Csv => "csv",
            ReportFormat::Json => "json",
            ReportFormat::Markdown => "md",
        }
    }
}

impl FromStr for ReportFormat {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "csv" => Ok(ReportFormat::Csv),
            "json" => Ok(ReportFormat::Json),
            "markdown" | "md" => Ok(ReportFormat::Markdown),
            other => Err(format!("unknown report format {other:?}")),
        }
    }
}

/// Accuracy as a percentage with two decimals.
pub fn percent(accuracy: f64) -> String {
    format!("{:.2}", accuracy * 100.0)
}

fn add(a: Confusion, b: Confusion) -> Confusion {
    Confusion {
        tp: a.tp + b.tp,
        tn: a.tn + b.tn,
        fp: a.fp + b.fp,
        fn_: a.fn_ + b.fn_,
    }
}

/// Seed statistics of one (group, condition, method, d_in) cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub group: String,
    pub condition: String,
    pub method: Method,
    pub d_in: usize,
    pub seeds: usize,
    pub mean_accuracy: f64,
    /// Sample standard deviation over seeds (0 for one seed).
    pub spread: f64,
    pub mean_pct: String,
    pub spread_pct: String,
}

/// Pooled confusion counts over a table's row, column or whole.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Total {
    pub label: String,
    pub confusion: Confusion,
    pub accuracy_pct: String,
}

/// One (method, d_in) table: groups by conditions.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MethodTable {
    pub method: Method,
    pub d_in: usize,
    pub cells: Vec<CellSummary>,
    pub group_totals: Vec<Total>,
    pub condition_totals: Vec<Total>,
    pub grand_total: Total,
}

impl EvalReport {
    fn methods_and_d_in(&self) -> Vec<(Method, usize)> {
        let set: BTreeSet<(Method, usize)> = self.rows.iter().map(|r| (r.method, r.d_in)).collect();
        set.into_iter().collect()
    }

    fn pooled<'a>(&self, rows: impl Iterator<Item = &'a ReportRow>, label: String) -> Total {
        let confusion = rows.fold(Confusion::default(), |acc, r| add(acc, r.confusion));
        Total {
            label,
            accuracy_pct: percent(confusion.accuracy()),
            confusion,
        }
    }

    /// Per-method tables with seed statistics and pooled totals.
    pub fn tables(&self) -> Vec<MethodTable> {
        self.methods_and_d_in()
            .into_iter()
            .map(|(method, d_in)| {
                let rows: Vec<&ReportRow> = self.rows.iter().filter(|r| r.method == method && r.d_in == d_in).collect();
                let mut cells = Vec::new();
                for g in &self.groups {
                    for c in &self.conditions {
                        let acc: Vec<f64> = rows
                            .iter()
                            .filter(|r| &r.group == g && &r.condition == c)
                            .map(|r| r.accuracy())
                            .collect();
                        if acc.is_empty() {
                            continue;
                        }
                        let n = acc.len() as f64;
                        let mean = acc.iter().sum::<f64>() / n;
                        let spread = if acc.len() > 1 {
                            (acc.iter().map(|a| (a - mean) * (a - mean)).sum::<f64>() / (n - 1.0)).sqrt()
                        } else {
                            0.0
                        };
                        cells.push(CellSummary {
                            group: g.clone(),
                            condition: c.clone(),
                            method,
                            d_in,
                            seeds: acc.len(),
                            mean_accuracy: mean,
                            spread,
                            mean_pct: percent(mean),
                            spread_pct: percent(spread),
                        });
                    }
                }
                MethodTable {
                    method,
                    d_in,
                    cells,
                    group_totals: self
                        .groups
                        .iter()
                        .map(|g| self.pooled(rows.iter().copied().filter(|r| &r.group == g), g.clone()))
                        .collect(),
                    condition_totals: self
                        .conditions
                        .iter()
                        .map(|c| self.pooled(rows.iter().copied().filter(|r| &r.condition == c), c.clone()))
                        .collect(),
                    grand_total: self.pooled(rows.iter().copied(), "all".into()),
                }
            })
            .collect()
    }

    /// Mean accuracy over seeds for one cell and method.
    pub fn mean_accuracy(&self, group: &str, condition: &str, method: Method, d_in: usize) -> Option<f64> {
        let acc: Vec<f64> = self
            .rows
            .iter()
            .filter(|r| r.group == group && r.condition == condition && r.method == method && r.d_in == d_in)
            .map(ReportRow::accuracy)
            .collect();
        (!acc.is_empty()).then(|| acc.iter().sum::<f64>() / acc.len() as f64)
    }

    /// Parses the JSON rendering back into a report. Derived fields (tables,
    /// percentages) are recomputed, not read.
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    /// Renders the report; the same report always yields the same bytes.
    pub fn render(&self, format: ReportFormat) -> Result<String, ExperimentError> {
        if self.rows.is_empty() && self.failures.is_empty() {
            return Err(ExperimentError::EmptyReport);
        }
        Ok(match format {
            ReportFormat::Csv => self.render_csv(),
            ReportFormat::Json => self.render_json(),
            ReportFormat::Markdown => self.render_markdown(),
        })
    }

    fn render_csv(&self) -> String {
        let mut s = String::from("group,condition,method,d_in,seed,train_samples,test_samples,tp,tn,fp,fn,accuracy_pct\n");
        for r in &self.rows {
            let c = r.confusion;
            let _ = writeln!(
                s,
                "{},{},{},{},{},{},{},{},{},{},{},{}",
                r.group,
                r.condition,
                r.method,
                r.d_in,
                r.seed,
                r.train_samples,
                r.test_samples,
                c.tp,
                c.tn,
                c.fp,
                c.fn_,
                percent(r.accuracy())
            );
        }
        s
    }

    fn render_json(&self) -> String {
        let rows: Vec<serde_json::Value> = self
            .rows
            .iter()
            .map(|r| {
                serde_json::json!({
                    "group": r.group,
                    "condition": r.condition,
                    "method": r.method,
                    "d_in": r.d_in,
                    "seed": r.seed,
                    "train_samples": r.train_samples,
                    "test_samples": r.test_samples,
                    "confusion": r.confusion,
                    "accuracy_pct": percent(r.accuracy()),
                })
            })
            .collect();
        let doc = serde_json::json!({
            "config_hash": self.config_hash,
            "input_scaling": self.input_scaling,
            "groups": self.groups,
            "conditions": self.conditions,
            "rows": rows,
            "tables": self.tables(),
            "failures": self.failures,
        });
        let mut s = serde_json::to_string_pretty(&doc).expect("report serializes");
        s.push('\n');
        s
    }

    fn render_markdown(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "# In-gallery vs out-of-gallery accuracy (%)\n");
        let _ = writeln!(s, "config `{}`, input scaling `{}`\n", self.config_hash, self.input_scaling);
        for t in self.tables() {
            let _ = writeln!(s, "## {} (d_in = {})\n", t.method, t.d_in);
            let _ = write!(s, "| group |");
            for c in &self.conditions {
                let _ = write!(s, " {c} |");
            }
            let _ = writeln!(s, " all |");
            let _ = writeln!(s, "|---|{}---|", "---|".repeat(self.conditions.len()));
            for (g, total) in self.groups.iter().zip(&t.group_totals) {
                let _ = write!(s, "| {g} |");
                for c in &self.conditions {
                    match t.cells.iter().find(|x| &x.group == g && &x.condition == c) {
                        Some(x) if x.seeds > 1 => {
                            let _ = write!(s, " {} ± {} |", x.mean_pct, x.spread_pct);
                        }
                        Some(x) => {
                            let _ = write!(s, " {} |", x.mean_pct);
                        }
                        None => {
                            let _ = write!(s, " - |");
                        }
                    }
                }
                let _ = writeln!(s, " {} |", total.accuracy_pct);
            }
            let _ = write!(s, "| all |");
            for total in &t.condition_totals {
                let _ = write!(s, " {} |", total.accuracy_pct);
            }
            let _ = writeln!(s, " {} |\n", t.grand_total.accuracy_pct);
        }
        if !self.failures.is_empty() {
            let _ = writeln!(s, "## Failed cells\n");
            for f in &self.failures {
                let _ = writeln!(s, "- {}: {}", f.cell, f.message);
            }
        }
        s
    }
}

/// Writes the rendered report to `path`.
pub fn emit_report(report: &EvalReport, format: ReportFormat, path: impl AsRef<Path>) -> Result<(), ExperimentError> {
    let text = report.render(format)?;
    let path = path.as_ref();
    std::fs::write(path, text).map_err(|source| ExperimentError::Io {
        path: path.display().to_string(),
        source,
    })
}

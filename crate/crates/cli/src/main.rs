use std::fs;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use galleryrank::baselines::{calibrate_threshold, fit_centroid, CentroidStatistic, FusedGallery};
use galleryrank::experiment::{
    cardinality_sweep, emit_report, run_experiment_on, EvalReport, ExperimentPlan, Method, ReportFormat,
};
use galleryrank::mlp::{InputScaling, MlpConfig};
use galleryrank::protocol::{
    curate, permute_augment, rank_distribution_report, read_samples, stratified_split, write_rank_distribution_csv,
    write_samples, Curation, CurationConfig, Label, RankSelection, SampleFormat,
};
use galleryrank::rng::derive_seed;
use galleryrank::store::{EmbeddingStore, StoreFormat};
use galleryrank::synth::{generate, NoiseDegradation, SynthConfig};
use galleryrank::train::{evaluate, train, Confusion};

// Same sub-seed tags as the experiment runner, so a single-command run
// reproduces the matching experiment cell.
const SPLIT_TAG: u64 = 0x5017;
const AUGMENT_TAG: u64 = 0xA116;
const MLP_TAG: u64 = 0x3170;

/// In-gallery / out-of-gallery decisions from rank features.
#[derive(Parser, Debug)]
#[command(name = "galleryrank", version, about)]
struct Cli {
    /// Directory for outputs whose path is not given explicitly.
    #[arg(long, global = true, env = "GALLERYRANK_OUT", default_value = "galleryrank-out")]
    out_dir: PathBuf,
    /// More log output (-v info, -vv debug).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Generate a synthetic embedding store.
    Synth(SynthArgs),
    /// Validate, normalize and convert an embedding file.
    Ingest(IngestArgs),
    /// Curate In-gallery / Out-of-gallery rank samples from a store.
    Curate(CurateArgs),
    /// Train the MLP on curated samples and score a held-out split.
    Train(TrainArgs),
    /// Fit and score one baseline (threshold, mean, median, fusion).
    Baseline(BaselineArgs),
    /// Run an experiment plan and write accuracy tables.
    Eval(EvalArgs),
    /// MLP accuracy as a function of d_in.
    Sweep(SweepArgs),
    /// Re-render a JSON report as CSV, JSON or markdown.
    Report(ReportArgs),
    /// Rank distribution of In-gallery vs Out-of-gallery entries.
    Rankdist(RankdistArgs),
}

#[derive(Args, Debug, Serialize)]
struct SynthArgs {
    /// TOML or JSON generator config; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    identities: Option<usize>,
    #[arg(long)]
    images: Option<usize>,
    #[arg(long)]
    dimension: Option<usize>,
    #[arg(long)]
    within_sigma: Option<f64>,
    #[arg(long)]
    seed: Option<u64>,
    /// Store file; `.csv` writes CSV, anything else binary.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct IngestArgs {
    #[arg(long)]
    input: PathBuf,
    /// Input format; inferred from the extension when omitted.
    #[arg(long)]
    format: Option<StoreFormat>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct CurationArgs {
    /// Embedding store (binary or `.csv`).
    #[arg(long)]
    store: PathBuf,
    /// Demographic group; empty uses the whole store.
    #[arg(long, default_value = "")]
    group: String,
    #[arg(long, default_value = "original")]
    condition: String,
    /// Gaussian noise added to probes before searching.
    #[arg(long, default_value_t = 0.0)]
    probe_sigma: f64,
    #[arg(long, default_value_t = 3)]
    d_in: usize,
    /// Enrolled images per identity (default d_in + 1).
    #[arg(long)]
    enrolled: Option<usize>,
    /// Minimum images per identity (default enrolled + 1).
    #[arg(long)]
    min_images: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "best")]
    rank_selection: RankSelection,
}

impl CurationArgs {
    fn config(&self) -> CurationConfig {
        let enrolled = self.enrolled.unwrap_or(self.d_in + 1);
        CurationConfig {
            d_in: self.d_in,
            enrolled_per_identity: enrolled,
            min_images_per_identity: self.min_images.unwrap_or(enrolled + 1),
            rng_seed: self.seed,
            group: self.group.clone(),
            condition: self.condition.clone(),
            rank_selection: self.rank_selection,
        }
    }

    fn run(&self) -> Result<Curation> {
        let store = load_store(&self.store)?;
        let config = self.config();
        let noise = NoiseDegradation { sigma: self.probe_sigma };
        let degrade = (self.probe_sigma > 0.0).then_some(&noise as &dyn galleryrank::protocol::ProbeDegradation);
        let curation = curate(&store, &config, degrade).context("curation failed")?;
        if curation.skipped_out_of_gallery > 0 {
            log::info!("{} probes had no Out-of-gallery sample", curation.skipped_out_of_gallery);
        }
        Ok(curation)
    }
}

#[derive(Args, Debug, Serialize)]
struct CurateArgs {
    #[command(flatten)]
    curation: CurationArgs,
    /// Sample file; `.csv` writes CSV, anything else binary.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct MlpArgs {
    /// Hidden layer widths.
    #[arg(long, value_delimiter = ',', default_value = "16,16")]
    hidden: Vec<usize>,
    #[arg(long, default_value_t = 0.1)]
    dropout: f64,
    #[arg(long, default_value_t = 1e-3)]
    learning_rate: f64,
    #[arg(long, default_value_t = 32)]
    batch_size: usize,
    #[arg(long, default_value_t = 20)]
    epochs: usize,
    #[arg(long, default_value_t = 10)]
    folds: usize,
    /// Feed raw ranks instead of rank / gallery size.
    #[arg(long)]
    raw_ranks: bool,
}

impl MlpArgs {
    fn config(&self, d_in: usize, rng_seed: u64) -> MlpConfig {
        MlpConfig {
            d_in,
            hidden_sizes: self.hidden.clone(),
            dropout_p: self.dropout,
            learning_rate: self.learning_rate,
            batch_size: self.batch_size,
            epochs: self.epochs,
            folds: self.folds,
            rng_seed,
            input_scaling: if self.raw_ranks { InputScaling::Raw } else { InputScaling::DivideByGallerySize },
        }
    }
}

#[derive(Args, Debug, Serialize)]
struct TrainArgs {
    /// Curated samples (`.csv` or binary).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    #[arg(long, default_value_t = 1)]
    augment_copies: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Parameter precision: f32 or f64.
    #[arg(long, default_value = "f64")]
    precision: String,
    #[command(flatten)]
    mlp: MlpArgs,
    #[arg(long)]
    model: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct BaselineArgs {
    #[arg(long)]
    method: Method,
    #[command(flatten)]
    curation: CurationArgs,
    #[arg(long, default_value_t = 0.2)]
    test_fraction: f64,
    /// Target false-positive identification rate for threshold methods.
    #[arg(long, default_value_t = 1e-4)]
    target_fpir: f64,
    /// Split seed (default: the curation seed).
    #[arg(long)]
    split_seed: Option<u64>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct PlanArgs {
    /// Experiment plan (TOML or JSON).
    #[arg(long, conflicts_with = "synth_config")]
    plan: Option<PathBuf>,
    /// Build a plan from a synthetic generator config instead.
    #[arg(long)]
    synth_config: Option<PathBuf>,
    /// Methods for a plan built from `--synth-config`.
    #[arg(long, value_delimiter = ',', default_value = "mlp,threshold,mean,median,fusion")]
    methods: Vec<Method>,
    /// Seeds for a plan built from `--synth-config`.
    #[arg(long, value_delimiter = ',', default_value = "1")]
    seeds: Vec<u64>,
}

impl PlanArgs {
    fn plan(&self) -> Result<ExperimentPlan> {
        let plan = match (&self.plan, &self.synth_config) {
            (Some(p), _) => ExperimentPlan::load(p)?,
            (None, synth) => {
                let config = match synth {
                    Some(p) => SynthConfig::load(p)?,
                    None => SynthConfig::default(),
                };
                ExperimentPlan::for_synthetic(config, self.methods.clone(), self.seeds.clone())
            }
        };
        plan.validate()?;
        Ok(plan)
    }
}

#[derive(Args, Debug, Serialize)]
struct EvalArgs {
    #[command(flatten)]
    plan: PlanArgs,
    /// Report formats to write.
    #[arg(long, value_delimiter = ',', default_value = "csv,json,markdown")]
    formats: Vec<ReportFormat>,
}

#[derive(Args, Debug, Serialize)]
struct SweepArgs {
    #[command(flatten)]
    plan: PlanArgs,
    #[arg(long, value_delimiter = ',', default_value = "1,2,3,4")]
    d_in: Vec<usize>,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct ReportArgs {
    /// A JSON report written by `eval`.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "markdown")]
    format: ReportFormat,
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Args, Debug, Serialize)]
struct RankdistArgs {
    /// Curated samples (`.csv` or binary).
    #[arg(long)]
    samples: PathBuf,
    #[arg(long, default_value_t = 50)]
    max_rank: u32,
    #[arg(long)]
    output: Option<PathBuf>,
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(cli) {
        Ok(code) => code,
        Err(e) => {
            eprintln!("error: {}", error_chain(&e));
            ExitCode::FAILURE
        }
    }
}

/// Joins the error chain, dropping causes already spelled out by the layer above.
fn error_chain(e: &anyhow::Error) -> String {
    let mut out = e.to_string();
    let mut last = out.clone();
    for cause in e.chain().skip(1) {
        let text = cause.to_string();
        if !last.contains(&text) {
            out.push_str(": ");
            out.push_str(&text);
        }
        last = text;
    }
    out
}

fn run(cli: Cli) -> Result<ExitCode> {
    let out = cli.out_dir;
    fs::create_dir_all(&out).with_context(|| format!("cannot create {}", out.display()))?;
    match cli.command {
        Command::Synth(a) => synth(&out, a),
        Command::Ingest(a) => ingest(&out, a),
        Command::Curate(a) => curate_cmd(&out, a),
        Command::Train(a) => train_cmd(&out, a),
        Command::Baseline(a) => baseline(&out, a),
        Command::Eval(a) => eval(&out, a),
        Command::Sweep(a) => sweep(&out, a),
        Command::Report(a) => report(&out, a),
        Command::Rankdist(a) => rankdist(&out, a),
    }
}

fn or_default(path: Option<PathBuf>, out: &Path, name: &str) -> PathBuf {
    path.unwrap_or_else(|| out.join(name))
}

/// Records the fully resolved inputs of a run next to its outputs.
fn write_resolved(out: &Path, command: &str, resolved: &impl Serialize) -> Result<()> {
    let path = out.join(format!("{command}.resolved.json"));
    let mut text = serde_json::to_string_pretty(resolved)?;
    text.push('\n');
    fs::write(&path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn write_json(path: &Path, value: &impl Serialize) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text).with_context(|| format!("cannot write {}", path.display()))
}

fn load_store(path: &Path) -> Result<EmbeddingStore> {
    EmbeddingStore::ingest(path, StoreFormat::from_path(path)).with_context(|| format!("cannot load store {}", path.display()))
}

fn load_samples(path: &Path) -> Result<Vec<galleryrank::protocol::RankSample>> {
    let samples = read_samples(path, SampleFormat::from_path(path))
        .with_context(|| format!("cannot read samples {}", path.display()))?;
    if samples.is_empty() {
        bail!("{} holds no samples", path.display());
    }
    Ok(samples)
}

fn synth(out: &Path, a: SynthArgs) -> Result<ExitCode> {
    let mut config = match &a.config {
        Some(p) => SynthConfig::load(p)?,
        None => SynthConfig::default(),
    };
    if let Some(n) = a.identities {
        config = SynthConfig {
            groups: vec![galleryrank::synth::GroupSpec {
                label: config.groups.first().map_or("G0".into(), |g| g.label.clone()),
                identities: n,
            }],
            n_identities: n,
            ..config
        };
    }
    config.images_per_identity = a.images.unwrap_or(config.images_per_identity);
    config.dimension = a.dimension.unwrap_or(config.dimension);
    config.within_noise_sigma = a.within_sigma.unwrap_or(config.within_noise_sigma);
    config.rng_seed = a.seed.unwrap_or(config.rng_seed);
    config.validate()?;
    let store = generate(&config)?;
    let output = or_default(a.output, out, "store.bin");
    store.write(&output, StoreFormat::from_path(&output))?;
    write_resolved(out, "synth", &config)?;
    println!("wrote {} records ({} identities, dim {}) to {}", store.len(), config.n_identities, config.dimension, output.display());
    Ok(ExitCode::SUCCESS)
}

fn ingest(out: &Path, a: IngestArgs) -> Result<ExitCode> {
    let format = a.format.unwrap_or_else(|| StoreFormat::from_path(&a.input));
    let store = EmbeddingStore::ingest(&a.input, format).with_context(|| format!("cannot ingest {}", a.input.display()))?;
    let output = or_default(a.output.clone(), out, "store.bin");
    store.write(&output, StoreFormat::from_path(&output))?;
    write_resolved(out, "ingest", &a)?;
    println!(
        "{} records, {} identities, groups {:?}, dim {} -> {}",
        store.len(),
        store.identities().len(),
        store.groups(),
        store.dimension(),
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn curate_cmd(out: &Path, a: CurateArgs) -> Result<ExitCode> {
    let curation = a.curation.run()?;
    let output = or_default(a.output.clone(), out, "samples.csv");
    write_samples(&curation.samples, &output, SampleFormat::from_path(&output))?;
    write_resolved(out, "curate", &serde_json::json!({ "args": a, "curation": a.curation.config() }))?;
    let n_in = curation.samples.iter().filter(|s| s.label == Label::InGallery).count();
    println!(
        "{} samples ({} In-gallery, {} Out-of-gallery) -> {}",
        curation.samples.len(),
        n_in,
        curation.samples.len() - n_in,
        output.display()
    );
    Ok(ExitCode::SUCCESS)
}

#[derive(Serialize)]
struct TrainSummary {
    train: galleryrank::train::TrainReport,
    test_samples: usize,
    test_confusion: Confusion,
    test_accuracy: f64,
}

fn train_cmd(out: &Path, a: TrainArgs) -> Result<ExitCode> {
    let samples = load_samples(&a.samples)?;
    let d_in = samples[0].ranks.len();
    let split = stratified_split(&samples, a.test_fraction, derive_seed(a.seed, SPLIT_TAG))?;
    let augmented = permute_augment(&split.train, a.augment_copies, derive_seed(a.seed, AUGMENT_TAG));
    let config = a.mlp.config(d_in, derive_seed(a.seed, MLP_TAG));
    let model_path = or_default(a.model.clone(), out, "model.bin");
    let (report, confusion) = match a.precision.as_str() {
        "f64" => {
            let (model, report) = train::<f64>(&augmented, &config)?;
            model.save(&model_path)?;
            (report, evaluate(&model, &split.test)?)
        }
        "f32" => {
            let (model, report) = train::<f32>(&augmented, &config)?;
            model.save(&model_path)?;
            (report, evaluate(&model, &split.test)?)
        }
        other => bail!("unknown precision {other:?} (expected f32 or f64)"),
    };
    let summary = TrainSummary {
        train: report,
        test_samples: split.test.len(),
        test_confusion: confusion,
        test_accuracy: confusion.accuracy(),
    };
    write_json(&out.join("train_report.json"), &summary)?;
    write_resolved(out, "train", &serde_json::json!({ "args": a, "mlp": config }))?;
    println!(
        "best fold {} ({:.2}%), held-out accuracy {:.2}% on {} samples -> {}",
        summary.train.selected_fold,
        100.0 * summary.train.fold_accuracies[summary.train.selected_fold],
        100.0 * summary.test_accuracy,
        summary.test_samples,
        model_path.display()
    );
    Ok(ExitCode::SUCCESS)
}

fn baseline(out: &Path, a: BaselineArgs) -> Result<ExitCode> {
    let curation = a.curation.run()?;
    let split_seed = derive_seed(a.split_seed.unwrap_or(a.curation.seed), SPLIT_TAG);
    let split = stratified_split(&curation.samples, a.test_fraction, split_seed)?;
    let mut confusion = Confusion::default();
    let model = match a.method {
        Method::Mean | Method::Median => {
            let statistic = if a.method == Method::Mean { CentroidStatistic::Mean } else { CentroidStatistic::Median };
            let model = fit_centroid(&split.train, statistic)?;
            for s in &split.test {
                confusion.record(s.label, galleryrank::baselines::centroid_classify(&model, &s.ranks)?);
            }
            serde_json::to_value(&model)?
        }
        Method::Threshold | Method::Fusion => {
            let fused = (a.method == Method::Fusion).then(|| FusedGallery::build(&curation.gallery));
            let score = |i: usize| -> Result<f64> {
                let t = &curation.traces[i];
                Ok(match &fused {
                    Some(f) => f.max_score(&t.probe, t.excluded_identity.as_deref())?.unwrap_or(f64::NEG_INFINITY),
                    None => t.max_similarity,
                })
            };
            let nonmated: Vec<f64> = split
                .train_indices
                .iter()
                .filter(|&&i| curation.samples[i].label == Label::OutOfGallery)
                .map(|&i| score(i))
                .collect::<Result<_>>()?;
            let model = calibrate_threshold(&nonmated, a.target_fpir)?;
            for &i in &split.test_indices {
                confusion.record(curation.samples[i].label, model.classify_score(score(i)?));
            }
            model.to_json()
        }
        Method::Mlp => bail!("use `train` for the MLP"),
    };
    let output = or_default(a.output.clone(), out, &format!("baseline_{}.json", a.method));
    write_json(
        &output,
        &serde_json::json!({
            "method": a.method,
            "model": model,
            "test_samples": split.test.len(),
            "test_confusion": confusion,
            "test_accuracy": confusion.accuracy(),
        }),
    )?;
    write_resolved(out, "baseline", &serde_json::json!({ "args": a, "curation": a.curation.config() }))?;
    println!("{} held-out accuracy {:.2}% on {} samples -> {}", a.method, 100.0 * confusion.accuracy(), split.test.len(), output.display());
    Ok(ExitCode::SUCCESS)
}

/// Prints cell-tagged diagnostics; failed cells make the exit code nonzero.
fn report_failures(report: &EvalReport) -> ExitCode {
    for f in &report.failures {
        eprintln!("cell [{}] failed: {}", f.cell, f.message);
    }
    if report.failures.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::from(2)
    }
}

fn eval(out: &Path, a: EvalArgs) -> Result<ExitCode> {
    let mut plan = a.plan.plan()?;
    let dir = plan.output_dir.clone().unwrap_or_else(|| out.to_path_buf());
    fs::create_dir_all(&dir).with_context(|| format!("cannot create {}", dir.display()))?;
    plan.output_dir = Some(dir.clone());
    write_resolved(&dir, "eval", &plan)?;
    let store = plan.source.load()?;
    let report = run_experiment_on(&plan, &store)?;
    if report.rows.is_empty() {
        report_failures(&report);
        bail!("every cell failed");
    }
    for &format in &a.formats {
        let path = dir.join(format!("report.{}", format.extension()));
        emit_report(&report, format, &path)?;
        println!("wrote {}", path.display());
    }
    Ok(report_failures(&report))
}

fn sweep(out: &Path, a: SweepArgs) -> Result<ExitCode> {
    let plan = a.plan.plan()?;
    write_resolved(out, "sweep", &serde_json::json!({ "plan": plan, "d_in": a.d_in }))?;
    let store = plan.source.load()?;
    let rows = cardinality_sweep(&plan, &store, &a.d_in)?;
    let output = or_default(a.output.clone(), out, "sweep.csv");
    let mut text = String::from("d_in,accuracy_pct,cells\n");
    for r in &rows {
        text.push_str(&format!("{},{},{}\n", r.d_in, galleryrank::experiment::percent(r.accuracy), r.cell_accuracies.len()));
        println!("d_in {}: {}%", r.d_in, galleryrank::experiment::percent(r.accuracy));
    }
    fs::write(&output, text).with_context(|| format!("cannot write {}", output.display()))?;
    Ok(ExitCode::SUCCESS)
}

fn report(out: &Path, a: ReportArgs) -> Result<ExitCode> {
    let text = fs::read_to_string(&a.input).with_context(|| format!("cannot read {}", a.input.display()))?;
    let report = EvalReport::from_json(&text).with_context(|| format!("{} is not a JSON report", a.input.display()))?;
    let output = or_default(a.output.clone(), out, &format!("report.{}", a.format.extension()));
    emit_report(&report, a.format, &output)?;
    write_resolved(out, "report", &a)?;
    println!("wrote {}", output.display());
    Ok(report_failures(&report))
}

fn rankdist(out: &Path, a: RankdistArgs) -> Result<ExitCode> {
    let samples = load_samples(&a.samples)?;
    let rows = rank_distribution_report(&samples, a.max_rank)?;
    let output = or_default(a.output.clone(), out, "rankdist.csv");
    let file = fs::File::create(&output).with_context(|| format!("cannot write {}", output.display()))?;
    write_rank_distribution_csv(&rows, file)?;
    write_resolved(out, "rankdist", &a)?;
    for r in rows.iter().filter(|r| [2, 3, 5, 10, 20, 50].contains(&r.rank)) {
        if let Some(p) = r.p_in_cumulative {
            println!("P(in | rank <= {}) = {p:.4}", r.rank);
        }
    }
    println!("wrote {}", output.display());
    Ok(ExitCode::SUCCESS)
}

//! Command-line front door: configuration, persistence, and the complexity
//! sweep orchestrator.
//!
//! Every command takes a JSON config (CLI flags override individual fields),
//! writes deterministic artifacts under an output directory, and maps errors
//! to exit codes: 0 success, 1 input/configuration error, 2 numerical
//! failure. Set `TWOHOP_LOG` to `error`, `info`, or `debug` to control
//! stderr chatter.

use crate::analysis::{
    margins_from_w, template_pattern_check, write_logits_csv, write_margins_csv,
    write_patterns_json, AnalysisError,
};
use crate::embmlp::{self, EmbMlpError, InitPolicy, TraceRecord, TrainConfig};
use crate::nanoformer::{self, NanoError, TfTrainConfig, TransformerConfig};
use crate::taskgen::{generate, Dataset, DatasetSpec, TaskGenError};
use crate::theory::{self, Program, SolveReport, SolverConfig, TheoryError};
use serde::{Deserialize, Serialize};
use std::collections::VecDeque;
use std::io::Write as _;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("malformed JSON: {0}")]
    Json(#[from] serde_json::Error),
    #[error(transparent)]
    Task(#[from] TaskGenError),
    #[error(transparent)]
    Emb(#[from] EmbMlpError),
    #[error(transparent)]
    Nano(#[from] NanoError),
    #[error(transparent)]
    Theory(#[from] TheoryError),
    #[error(transparent)]
    Analysis(#[from] AnalysisError),
}

impl HarnessError {
    /// 1 for input/configuration problems, 2 for numerical failures.
    pub fn exit_code(&self) -> i32 {
        match self {
            HarnessError::Emb(EmbMlpError::Diverged { .. })
            | HarnessError::Nano(NanoError::Diverged { .. })
            | HarnessError::Nano(NanoError::NumericalOverflow)
            | HarnessError::Theory(TheoryError::DidNotConverge { .. })
            | HarnessError::Theory(TheoryError::NegativeRadicand(_)) => 2,
            _ => 1,
        }
    }
}

// ---------------------------------------------------------------------------
// Logging
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, PartialOrd)]
pub enum LogLevel {
    Error = 0,
    Info = 1,
    Debug = 2,
}

fn log_threshold() -> LogLevel {
    match std::env::var("TWOHOP_LOG").as_deref() {
        Ok("debug") => LogLevel::Debug,
        Ok("info") => LogLevel::Info,
        _ => LogLevel::Error,
    }
}

pub fn log(level: LogLevel, msg: &str) {
    if (level as u8) <= (log_threshold() as u8) {
        eprintln!("[twohop] {msg}");
    }
}

// ---------------------------------------------------------------------------
// Configuration types
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ModelConfig {
    EmbMlp {
        #[serde(default)]
        train: TrainConfig,
        /// Embedding width; defaults to min(|V_in|, |V_out|).
        #[serde(default)]
        d_m: Option<usize>,
    },
    Nanoformer {
        /// `d_vocab = 0` means "infer from the dataset layout".
        #[serde(default)]
        arch: TransformerConfig,
        #[serde(default)]
        train: TfTrainConfig,
    },
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig::EmbMlp {
            train: TrainConfig::default(),
            d_m: None,
        }
    }
}

fn default_outputs() -> PathBuf {
    PathBuf::from("out")
}

fn default_checkpoints_every() -> usize {
    1000
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct RunConfig {
    pub dataset: DatasetSpec,
    #[serde(default)]
    pub model: ModelConfig,
    #[serde(default = "default_outputs")]
    pub outputs: PathBuf,
    #[serde(default = "default_checkpoints_every")]
    pub checkpoints_every: usize,
}

impl RunConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.checkpoints_every == 0 {
            return Err(HarnessError::Config(
                "checkpoints_every must be positive".into(),
            ));
        }
        self.dataset.validate()?;
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Variant {
    EmbMlpId,
    EmbMlpNoId,
    TfStandard,
    TfSmallInit,
    TfWeightDecay,
}

impl Variant {
    pub fn label(&self) -> &'static str {
        match self {
            Variant::EmbMlpId => "embmlp_id",
            Variant::EmbMlpNoId => "embmlp_noid",
            Variant::TfStandard => "tf_standard",
            Variant::TfSmallInit => "tf_small_init",
            Variant::TfWeightDecay => "tf_weight_decay",
        }
    }

    fn with_identity(&self) -> bool {
        !matches!(self, Variant::EmbMlpNoId)
    }
}

fn default_n_entities() -> usize {
    20
}

fn default_workers() -> usize {
    1
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepConfig {
    #[serde(default = "default_n_entities")]
    pub n_entities: usize,
    pub complexities: Vec<usize>,
    pub seeds: Vec<u64>,
    pub variants: Vec<Variant>,
    #[serde(default = "default_workers")]
    pub workers: usize,
    /// Optional override of the Emb-MLP trainer settings (seed replaced per
    /// trial).
    #[serde(default)]
    pub emb_train: Option<TrainConfig>,
    /// Optional override of the transformer trainer settings.
    #[serde(default)]
    pub tf_train: Option<TfTrainConfig>,
}

impl SweepConfig {
    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.complexities.is_empty() || self.seeds.is_empty() || self.variants.is_empty() {
            return Err(HarnessError::Config(
                "complexities, seeds, and variants must be non-empty".into(),
            ));
        }
        if self.workers == 0 {
            return Err(HarnessError::Config("workers must be positive".into()));
        }
        Ok(())
    }
}

// ---------------------------------------------------------------------------
// gen
// ---------------------------------------------------------------------------

/// Generate the dataset and write it as `dataset.json`. Identical specs
/// produce byte-identical files.
pub fn cmd_gen(spec: &DatasetSpec, out_dir: &Path) -> Result<PathBuf, HarnessError> {
    let dataset = generate(spec)?;
    std::fs::create_dir_all(out_dir)?;
    let path = out_dir.join("dataset.json");
    let bytes = serde_json::to_vec_pretty(&dataset)?;
    std::fs::write(&path, bytes)?;
    log(
        LogLevel::Info,
        &format!(
            "gen: wrote {} ({} train, {} ood)",
            path.display(),
            dataset.train.len(),
            dataset.test_ood.len()
        ),
    );
    Ok(path)
}

pub fn load_dataset(path: &Path) -> Result<Dataset, HarnessError> {
    let text = std::fs::read_to_string(path)?;
    Ok(serde_json::from_str(&text)?)
}

// ---------------------------------------------------------------------------
// train
// ---------------------------------------------------------------------------

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub checkpoint: PathBuf,
    pub trace_path: PathBuf,
    pub final_record: TraceRecord,
}

pub fn write_trace_csv(trace: &[TraceRecord], path: &Path) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "step,loss,train_acc,ood_acc,min_ood_margin")?;
    for r in trace {
        writeln!(
            out,
            "{},{:.12e},{},{},{:.12e}",
            r.step, r.loss, r.train_acc, r.ood_acc, r.min_ood_margin
        )?;
    }
    Ok(())
}

/// Train the configured model. The dataset is loaded from `dataset_path`
/// when given, otherwise generated from the config's spec. Artifacts:
/// `model.bin`, `trace.csv`, and a `meta.json` sidecar holding the wall
/// clock (the only non-deterministic output).
pub fn cmd_train(
    config: &RunConfig,
    out_dir: &Path,
    dataset_path: Option<&Path>,
) -> Result<TrainOutcome, HarnessError> {
    config.validate()?;
    let dataset = match dataset_path {
        Some(p) => load_dataset(p)?,
        None => generate(&config.dataset)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let started = Instant::now();
    let (checkpoint, trace) = match &config.model {
        ModelConfig::EmbMlp { train, d_m } => {
            let width = d_m.unwrap_or_else(|| embmlp::default_width(&dataset.layout));
            let (params, trace) = embmlp::train(&dataset, width, train)?;
            let path = out_dir.join("model.bin");
            let file = std::fs::File::create(&path)?;
            embmlp::save_checkpoint(&params, std::io::BufWriter::new(file))?;
            (path, trace)
        }
        ModelConfig::Nanoformer { arch, train } => {
            let mut arch = arch.clone();
            if arch.d_vocab == 0 {
                arch.d_vocab = dataset.layout.full_vocab_size();
            }
            let (params, trace) = nanoformer::tf_train(&dataset, &arch, train)?;
            let path = out_dir.join("model.bin");
            nanoformer::save_tf_checkpoint(&params, &path)?;
            (path, trace)
        }
    };
    let trace_path = out_dir.join("trace.csv");
    write_trace_csv(&trace, &trace_path)?;
    let meta = serde_json::json!({
        "wall_ms": started.elapsed().as_millis() as u64,
        "steps": trace.last().map(|r| r.step).unwrap_or(0),
    });
    std::fs::write(out_dir.join("meta.json"), serde_json::to_vec_pretty(&meta)?)?;
    let final_record = *trace.last().expect("trace always has a final record");
    log(
        LogLevel::Info,
        &format!(
            "train: step {} loss {:.3e} train_acc {:.3} ood_acc {:.3}",
            final_record.step, final_record.loss, final_record.train_acc, final_record.ood_acc
        ),
    );
    Ok(TrainOutcome {
        checkpoint,
        trace_path,
        final_record,
    })
}

// ---------------------------------------------------------------------------
// theory
// ---------------------------------------------------------------------------

/// Solve a reduced program and write the report as
/// `solve_{id|noid}_n{n}.json`.
pub fn cmd_theory(
    n: usize,
    program: Program,
    out_dir: &Path,
    seed: u64,
) -> Result<SolveReport, HarnessError> {
    let config = SolverConfig {
        seed,
        ..SolverConfig::default()
    };
    let report = match program {
        Program::Id => theory::solve_id(n, &config)?,
        Program::NoId => theory::solve_noid(n, &config)?,
    };
    std::fs::create_dir_all(out_dir)?;
    let name = match program {
        Program::Id => format!("solve_id_n{n}.json"),
        Program::NoId => format!("solve_noid_n{n}.json"),
    };
    std::fs::write(out_dir.join(&name), serde_json::to_vec_pretty(&report)?)?;
    log(
        LogLevel::Info,
        &format!(
            "theory: {name} objective {:.6} feasibility {:.2e} kkt {:.2e}",
            report.objective, report.feasibility_residual, report.kkt_residual
        ),
    );
    Ok(report)
}

// ---------------------------------------------------------------------------
// sweep
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrialRow {
    pub variant: String,
    pub c: usize,
    pub seed: String,
    pub ood_acc: f64,
    pub train_acc: f64,
    pub steps: usize,
    pub wall_ms: u64,
    pub failed: bool,
}

#[derive(Debug)]
pub struct SweepOutcome {
    pub results_path: PathBuf,
    pub rows: Vec<TrialRow>,
    pub succeeded: usize,
}

/// Run one trial of a sweep variant. Failures are reported in the row, not
/// raised, so a sweep survives individual divergences.
pub fn run_trial(
    variant: Variant,
    n_entities: usize,
    c: usize,
    seed: u64,
    emb_train: Option<&TrainConfig>,
    tf_train: Option<&TfTrainConfig>,
) -> TrialRow {
    let started = Instant::now();
    let spec = DatasetSpec::new(n_entities, c, variant.with_identity(), seed);
    let result: Result<(f64, f64, usize), HarnessError> = (|| {
        let dataset = generate(&spec)?;
        match variant {
            Variant::EmbMlpId | Variant::EmbMlpNoId => {
                let mut tc = emb_train.cloned().unwrap_or_default();
                tc.seed = seed;
                let width = embmlp::default_width(&dataset.layout);
                let (_, trace) = embmlp::train(&dataset, width, &tc)?;
                let last = trace.last().expect("non-empty trace");
                Ok((last.ood_acc, last.train_acc, last.step))
            }
            Variant::TfStandard | Variant::TfSmallInit | Variant::TfWeightDecay => {
                let mut arch = TransformerConfig::toy(dataset.layout.full_vocab_size());
                if variant == Variant::TfSmallInit {
                    // gamma chosen by calibration: large enough to force the
                    // compositional solution, small enough to still train.
                    arch.init = InitPolicy::Small { gamma: 1.4 };
                }
                let mut tc = tf_train.copied().unwrap_or_default();
                tc.seed = seed;
                if variant == Variant::TfWeightDecay && tc.weight_decay == 0.0 {
                    tc.weight_decay = 1e-2;
                }
                let (_, trace) = nanoformer::tf_train(&dataset, &arch, &tc)?;
                let last = trace.last().expect("non-empty trace");
                Ok((last.ood_acc, last.train_acc, last.step))
            }
        }
    })();
    let wall_ms = started.elapsed().as_millis() as u64;
    match result {
        Ok((ood_acc, train_acc, steps)) => TrialRow {
            variant: variant.label().to_string(),
            c,
            seed: seed.to_string(),
            ood_acc,
            train_acc,
            steps,
            wall_ms,
            failed: false,
        },
        Err(e) => {
            log(
                LogLevel::Error,
                &format!("trial {} C={c} seed={seed} failed: {e}", variant.label()),
            );
            TrialRow {
                variant: variant.label().to_string(),
                c,
                seed: seed.to_string(),
                ood_acc: 0.0,
                train_acc: 0.0,
                steps: 0,
                wall_ms,
                failed: true,
            }
        }
    }
}

fn aggregate_rows(rows: &[TrialRow]) -> Vec<TrialRow> {
    let mut groups: Vec<(String, usize)> = Vec::new();
    for r in rows {
        let key = (r.variant.clone(), r.c);
        if !groups.contains(&key) {
            groups.push(key);
        }
    }
    let mut aggregates = Vec::new();
    for (variant, c) in groups {
        let members: Vec<&TrialRow> = rows
            .iter()
            .filter(|r| r.variant == variant && r.c == c && !r.failed)
            .collect();
        if members.is_empty() {
            continue;
        }
        let k = members.len() as f64;
        let mean_ood = members.iter().map(|r| r.ood_acc).sum::<f64>() / k;
        let mean_train = members.iter().map(|r| r.train_acc).sum::<f64>() / k;
        let sd_ood = (members
            .iter()
            .map(|r| (r.ood_acc - mean_ood).powi(2))
            .sum::<f64>()
            / k)
            .sqrt();
        let sd_train = (members
            .iter()
            .map(|r| (r.train_acc - mean_train).powi(2))
            .sum::<f64>()
            / k)
            .sqrt();
        let mean_steps =
            (members.iter().map(|r| r.steps).sum::<usize>() as f64 / k).round() as usize;
        let total_ms = members.iter().map(|r| r.wall_ms).sum::<u64>();
        aggregates.push(TrialRow {
            variant: variant.clone(),
            c,
            seed: "mean".into(),
            ood_acc: mean_ood,
            train_acc: mean_train,
            steps: mean_steps,
            wall_ms: total_ms,
            failed: false,
        });
        aggregates.push(TrialRow {
            variant,
            c,
            seed: "sd".into(),
            ood_acc: sd_ood,
            train_acc: sd_train,
            steps: 0,
            wall_ms: 0,
            failed: false,
        });
    }
    aggregates
}

pub fn write_results_csv(rows: &[TrialRow], path: &Path) -> Result<(), HarnessError> {
    let mut out = std::io::BufWriter::new(std::fs::File::create(path)?);
    writeln!(out, "variant,C,seed,ood_acc,train_acc,steps,wall_ms,failed")?;
    for r in rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{},{}",
            r.variant, r.c, r.seed, r.ood_acc, r.train_acc, r.steps, r.wall_ms, r.failed
        )?;
    }
    Ok(())
}

/// Run the full sweep, up to `workers` trials concurrently, and write
/// `results.csv`: one row per (variant, C, seed), then `mean`/`sd` aggregate
/// rows per (variant, C).
pub fn cmd_sweep(config: &SweepConfig, out_dir: &Path) -> Result<SweepOutcome, HarnessError> {
    config.validate()?;
    let mut jobs: VecDeque<(Variant, usize, u64)> = VecDeque::new();
    for &variant in &config.variants {
        for &c in &config.complexities {
            for &seed in &config.seeds {
                jobs.push_back((variant, c, seed));
            }
        }
    }
    let total = jobs.len();
    let queue = Mutex::new(jobs);
    let results: Mutex<Vec<TrialRow>> = Mutex::new(Vec::with_capacity(total));
    let workers = config.workers.min(total.max(1));
    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let job = queue.lock().expect("queue lock").pop_front();
                let Some((variant, c, seed)) = job else { break };
                log(
                    LogLevel::Debug,
                    &format!("sweep: start {} C={c} seed={seed}", variant.label()),
                );
                let row = run_trial(
                    variant,
                    config.n_entities,
                    c,
                    seed,
                    config.emb_train.as_ref(),
                    config.tf_train.as_ref(),
                );
                results.lock().expect("results lock").push(row);
            });
        }
    });
    let mut rows = results.into_inner().expect("results lock");
    rows.sort_by(|a, b| {
        (&a.variant, a.c, &a.seed)
            .partial_cmp(&(&b.variant, b.c, &b.seed))
            .expect("total order")
    });
    let aggregates = aggregate_rows(&rows);
    rows.extend(aggregates);
    std::fs::create_dir_all(out_dir)?;
    let results_path = out_dir.join("results.csv");
    write_results_csv(&rows, &results_path)?;
    let succeeded = rows
        .iter()
        .filter(|r| !r.failed && r.seed.parse::<u64>().is_ok())
        .count();
    if succeeded == 0 {
        return Err(HarnessError::Config("every sweep trial failed".into()));
    }
    Ok(SweepOutcome {
        results_path,
        rows,
        succeeded,
    })
}

// ---------------------------------------------------------------------------
// analyze
// ---------------------------------------------------------------------------

#[derive(Debug)]
pub struct AnalyzeOutcome {
    pub logits_path: PathBuf,
    pub margins_path: PathBuf,
    pub patterns_path: PathBuf,
    pub flags: crate::analysis::PatternFlags,
}

/// Extract the logit-template matrix from an Emb-MLP checkpoint and emit
/// `logits.csv`, `margins.csv`, and `patterns.json` against the dataset.
pub fn cmd_analyze(
    checkpoint: &Path,
    dataset_path: &Path,
    out_dir: &Path,
) -> Result<AnalyzeOutcome, HarnessError> {
    let dataset = load_dataset(dataset_path)?;
    let layout = &dataset.layout;
    let file = std::fs::File::open(checkpoint)?;
    let params = embmlp::load_checkpoint(std::io::BufReader::new(file))?;
    let w = embmlp::logit_matrix(&params);
    if w.nrows() != layout.in_vocab.len() || w.ncols() != layout.out_vocab.len() {
        return Err(HarnessError::Analysis(AnalysisError::ShapeMismatch {
            rows: w.nrows(),
            cols: w.ncols(),
            expected_rows: layout.in_vocab.len(),
            expected_cols: layout.out_vocab.len(),
        }));
    }
    std::fs::create_dir_all(out_dir)?;
    let logits_path = out_dir.join("logits.csv");
    write_logits_csv(&w, layout, &logits_path)?;
    let reports = margins_from_w(&w, layout, &dataset.test_ood);
    let margins_path = out_dir.join("margins.csv");
    write_margins_csv(&reports, layout, &margins_path)?;
    let flags = template_pattern_check(&w, layout)?;
    let patterns_path = out_dir.join("patterns.json");
    write_patterns_json(&flags, &patterns_path)?;
    log(
        LogLevel::Info,
        &format!(
            "analyze: self_peak {}/{} object_align {}/{}",
            flags.self_peak_count,
            layout.bridges.len(),
            flags.object_align_count,
            layout.bridges.len()
        ),
    );
    Ok(AnalyzeOutcome {
        logits_path,
        margins_path,
        patterns_path,
        flags,
    })
}

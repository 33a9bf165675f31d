//! Command implementations behind the `trac` binary.
//!
//! Failures carry their process exit code (see [`CliError::exit_code`]) so the
//! binary stays a thin argument parser.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use log::{error, info, warn};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::bench::{self, BenchError, CurveFormat, SyntheticSpec};
use crate::solver::{solve, SolverConfig, SolverError, SparseProblem, TemporalTarget};
use crate::tracker::{TrackerConfig, TrackerError};

pub const EXIT_OK: i32 = 0;
/// Objective trace increased during `solve-demo`.
pub const EXIT_VIOLATION: i32 = 1;
pub const EXIT_CONFIG: i32 = 2;
pub const EXIT_DATA: i32 = 3;
pub const EXIT_TRACKING: i32 = 4;

/// Demo problem shipped with the binary.
pub const DEMO_PROBLEM: &str = include_str!("../data/demo_problem.json");

#[derive(Debug, Error)]
pub enum CliError {
    #[error("config error: {0}")]
    Config(String),
    #[error("data error: {0}")]
    Data(String),
    #[error("tracking failed: {0}")]
    Tracking(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Config(_) => EXIT_CONFIG,
            CliError::Data(_) => EXIT_DATA,
            CliError::Tracking(_) => EXIT_TRACKING,
        }
    }
}

impl From<BenchError> for CliError {
    fn from(e: BenchError) -> Self {
        match e {
            BenchError::Spec(_) | BenchError::OutOfBounds { .. } => CliError::Config(e.to_string()),
            BenchError::Tracker(TrackerError::Config(_)) => CliError::Config(e.to_string()),
            BenchError::Tracker(_) => CliError::Tracking(e.to_string()),
            _ => CliError::Data(e.to_string()),
        }
    }
}

fn io_err(path: &Path) -> impl FnOnce(std::io::Error) -> CliError + '_ {
    move |e| CliError::Data(format!("{}: {e}", path.display()))
}

/// Everything a run depends on. Unknown keys are rejected.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub tracker: TrackerConfig,
    /// Sequence directories for `track` when none are given on the command line.
    pub sequences: Vec<PathBuf>,
    pub out_dir: Option<PathBuf>,
}

impl RunConfig {
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        let cfg: RunConfig =
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", path.display())))?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.tracker.validate().map_err(|e| CliError::Config(e.to_string()))
    }

    /// SHA-256 of the canonical JSON form.
    pub fn hash(&self) -> String {
        let text = serde_json::to_string(self).expect("config serializes");
        Sha256::digest(text.as_bytes()).iter().map(|b| format!("{b:02x}")).collect()
    }
}

/// Flags shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct CommonArgs {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub jobs: Option<usize>,
}

impl CommonArgs {
    /// Config file (or defaults) with command-line overrides applied.
    pub fn run_config(&self) -> Result<RunConfig, CliError> {
        let mut cfg = match &self.config {
            Some(p) => RunConfig::load(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = self.seed {
            cfg.tracker.seed = seed;
        }
        if let Some(out) = &self.out {
            cfg.out_dir = Some(out.clone());
        }
        cfg.validate()?;
        Ok(cfg)
    }

    fn out_dir(&self, cfg: &RunConfig) -> PathBuf {
        cfg.out_dir.clone().unwrap_or_else(|| PathBuf::from("out"))
    }
}

fn write_file(path: &Path, bytes: impl AsRef<[u8]>) -> Result<(), CliError> {
    std::fs::write(path, bytes).map_err(io_err(path))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let text = serde_json::to_string_pretty(value).expect("serializable") + "\n";
    write_file(path, text)
}

#[derive(Serialize)]
struct FrameDiagnostics {
    frame: usize,
    residual: f64,
    solver_iterations: usize,
    templates_replaced: usize,
}

#[derive(Serialize)]
struct Manifest<'a> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    config_sha256: String,
    seed: u64,
    config: &'a RunConfig,
    inputs: BTreeMap<&'static str, String>,
    frames: usize,
    /// Evaluations pool frames across sequences.
    aggregation: &'static str,
    failure: Option<String>,
}

impl<'a> Manifest<'a> {
    fn new(command: &'static str, cfg: &'a RunConfig) -> Self {
        Self {
            tool: "trac",
            version: env!("CARGO_PKG_VERSION"),
            command,
            config_sha256: cfg.hash(),
            seed: cfg.tracker.seed,
            config: cfg,
            inputs: BTreeMap::new(),
            frames: 0,
            aggregation: "pooled frames",
            failure: None,
        }
    }
}

fn track_one(seq_dir: &Path, cfg: &RunConfig, out_root: &Path) -> Result<(), CliError> {
    let seq = bench::load_sequence(seq_dir)?;
    for w in &seq.warnings {
        warn!("{w}");
    }
    let out = out_root.join(&seq.name);
    std::fs::create_dir_all(&out).map_err(io_err(&out))?;
    info!("tracking {} ({} frames)", seq.name, seq.len());
    let run = bench::track_sequence(&seq, cfg.tracker.clone())?;

    write_file(&out.join("results.csv"), bench::results_to_csv(&run.boxes))?;
    let diagnostics: Vec<FrameDiagnostics> = run
        .steps
        .iter()
        .map(|s| FrameDiagnostics {
            frame: s.frame + 1,
            residual: s.residual,
            solver_iterations: s.solver_iterations,
            templates_replaced: s.templates_replaced,
        })
        .collect();
    write_json(&out.join("diagnostics.json"), &diagnostics)?;

    let mut manifest = Manifest::new("track", cfg);
    manifest.inputs.insert("sequence", seq_dir.display().to_string());
    manifest.frames = run.boxes.len();
    manifest.failure = run.error.as_ref().map(|e| e.to_string());
    write_json(&out.join("manifest.json"), &manifest)?;

    match run.error {
        Some(e) => Err(CliError::from(e)),
        None => Ok(()),
    }
}

/// Tracks each sequence and writes `results.csv`, `diagnostics.json` and
/// `manifest.json` under `<out>/<sequence name>/`.
pub fn cmd_track(args: &CommonArgs, sequences: &[PathBuf]) -> Result<(), CliError> {
    let cfg = args.run_config()?;
    let sequences: Vec<PathBuf> = if sequences.is_empty() {
        cfg.sequences.clone()
    } else {
        sequences.to_vec()
    };
    if sequences.is_empty() {
        return Err(CliError::Config("no sequence given".into()));
    }
    let out = args.out_dir(&cfg);
    let jobs = args.jobs.unwrap_or(1).max(1);
    let pool = rayon::ThreadPoolBuilder::new()
        .num_threads(jobs)
        .build()
        .map_err(|e| CliError::Config(e.to_string()))?;
    let results: Vec<Result<(), CliError>> = pool.install(|| {
        use rayon::prelude::*;
        sequences.par_iter().map(|s| track_one(s, &cfg, &out)).collect()
    });
    // the most severe failure decides the exit code
    let mut worst: Option<CliError> = None;
    for r in results {
        if let Err(e) = r {
            error!("{e}");
            if worst.as_ref().map_or(true, |w| e.exit_code() > w.exit_code()) {
                worst = Some(e);
            }
        }
    }
    worst.map_or(Ok(()), Err)
}

/// Scores a results CSV against a sequence's ground truth and writes the
/// curves plus `summary.json`.
pub fn cmd_eval(args: &CommonArgs, results: &Path, sequence: &Path) -> Result<bench::Summary, CliError> {
    let cfg = args.run_config()?;
    let seq = bench::load_sequence(sequence)?;
    let text = std::fs::read_to_string(results).map_err(io_err(results))?;
    let boxes = bench::results_from_csv(&text, results)?;
    let curves = bench::evaluate(&boxes, &seq.ground_truth)?;
    let out = args.out_dir(&cfg);
    bench::emit_curves(&curves, CurveFormat::Both, &out)?;
    let summary = curves.summary();
    write_json(&out.join("summary.json"), &summary)?;
    let mut manifest = Manifest::new("eval", &cfg);
    manifest.inputs.insert("results", results.display().to_string());
    manifest.inputs.insert("sequence", sequence.display().to_string());
    manifest.frames = curves.frames;
    write_json(&out.join("manifest.json"), &manifest)?;
    Ok(summary)
}

/// Renders a synthetic sequence (default spec when none is given) into `<out>`.
pub fn cmd_synth(args: &CommonArgs, spec_path: Option<&Path>) -> Result<bench::SequenceSpec, CliError> {
    let cfg = args.run_config()?;
    let spec: SyntheticSpec = match spec_path {
        Some(p) => {
            let text = std::fs::read_to_string(p).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?;
            serde_json::from_str(&text).map_err(|e| CliError::Config(format!("{}: {e}", p.display())))?
        }
        None => SyntheticSpec::default(),
    };
    let out = args.out_dir(&cfg);
    let seq = bench::gen_synthetic(&spec, cfg.tracker.seed, &out)?;
    info!("wrote {} frames to {}", seq.len(), out.display());
    Ok(seq)
}

/// Row-major nested arrays for every matrix.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProblemDocument {
    /// One `d_k × m` matrix per modality.
    pub templates: Vec<Vec<Vec<f64>>>,
    /// One `d_k × n` matrix per modality.
    pub observations: Vec<Vec<Vec<f64>>>,
    #[serde(default = "yes")]
    pub trivial: bool,
    #[serde(default = "default_lambda1")]
    pub lambda1: f64,
    #[serde(default)]
    pub lambda2: f64,
    #[serde(default = "default_alpha")]
    pub alpha: f64,
    /// Each target holds one length-`m` vector per modality.
    #[serde(default)]
    pub temporal: Vec<Vec<Vec<f64>>>,
    #[serde(default)]
    pub solver: SolverConfig,
}

fn yes() -> bool {
    true
}

fn default_lambda1() -> f64 {
    0.5
}

fn default_alpha() -> f64 {
    0.1
}

fn matrix(rows: &[Vec<f64>], what: &str) -> Result<DMatrix<f64>, CliError> {
    let ncols = rows.first().map_or(0, Vec::len);
    if rows.is_empty() || ncols == 0 || rows.iter().any(|r| r.len() != ncols) {
        return Err(CliError::Config(format!("{what} must be a non-empty rectangular matrix")));
    }
    Ok(DMatrix::from_fn(rows.len(), ncols, |i, j| rows[i][j]))
}

impl ProblemDocument {
    pub fn to_problem(&self) -> Result<SparseProblem, CliError> {
        let templates = self
            .templates
            .iter()
            .enumerate()
            .map(|(k, t)| matrix(t, &format!("templates[{k}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let observations = self
            .observations
            .iter()
            .enumerate()
            .map(|(k, x)| matrix(x, &format!("observations[{k}]")))
            .collect::<Result<Vec<_>, _>>()?;
        let temporal = self
            .temporal
            .iter()
            .map(|t| TemporalTarget::new(t.iter().map(|v| DVector::from_column_slice(v)).collect()))
            .collect();
        SparseProblem::builder(templates, observations)
            .trivial(self.trivial)
            .lambda1(self.lambda1)
            .lambda2(self.lambda2)
            .alpha(self.alpha)
            .temporal(temporal)
            .build()
            .map_err(|e: SolverError| CliError::Config(e.to_string()))
    }
}

/// Outcome of `solve-demo`.
#[derive(Debug, Clone, PartialEq)]
pub struct DemoReport {
    pub initial_objective: f64,
    pub trace: Vec<f64>,
    /// Index of the first update that increased the objective by more than
    /// the slack.
    pub violation: Option<usize>,
}

/// Absolute slack allowed between consecutive objective values.
pub const MONOTONE_SLACK: f64 = 1e-10;

/// Solves the problem, prints its objective trace to `out`, and flags any
/// increase beyond [`MONOTONE_SLACK`].
pub fn cmd_solve_demo(problem_json: &str, out: &mut impl std::io::Write) -> Result<DemoReport, CliError> {
    let doc: ProblemDocument =
        serde_json::from_str(problem_json).map_err(|e| CliError::Config(format!("malformed problem: {e}")))?;
    let problem = doc.to_problem()?;
    let sol = solve(&problem, &doc.solver).map_err(|e| CliError::Config(e.to_string()))?;
    let mut prev = sol.initial_objective;
    let mut violation = None;
    let io = |e: std::io::Error| CliError::Data(e.to_string());
    writeln!(out, "iter objective").map_err(io)?;
    writeln!(out, "0 {prev:.17e}").map_err(io)?;
    for (i, &v) in sol.objective_trace.iter().enumerate() {
        writeln!(out, "{} {v:.17e}", i + 1).map_err(io)?;
        if v > prev + MONOTONE_SLACK && violation.is_none() {
            violation = Some(i + 1);
        }
        prev = v;
    }
    writeln!(out, "final {:.17e}", sol.final_objective()).map_err(io)?;
    match violation {
        Some(i) => writeln!(out, "objective increased at iteration {i}").map_err(io)?,
        None => writeln!(out, "monotone over {} iterations", sol.iterations).map_err(io)?,
    }
    Ok(DemoReport {
        initial_objective: sol.initial_objective,
        trace: sol.objective_trace,
        violation,
    })
}

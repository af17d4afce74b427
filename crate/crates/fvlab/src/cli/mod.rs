//! Experiment commands. Each writes its artifacts under the configured output
//! directory and returns what it wrote, so the thin binary and the examples
//! share one code path.

mod analyze;
mod config;
mod gradcheck;

pub use analyze::{analyze, Analysis, AnalyticsRow, CrossTaskRow, R2Row, METRIC_KINDS};
pub use config::{ExperimentConfig, OUT_ENV, SCHEMA_VERSION};
pub use gradcheck::{check_model_loss, full_suite, loss_suite, toy_model, GradCheckLine, GradCheckSettings};

use crate::cltrain::{pretrain, run_sequence, CompetenceReport, Method, RunDir, SequenceResult, SequenceSetup};
use crate::error::{Error, Result};
use crate::fv::{
    get_function_vector_head_set, layer_sweep, read_function_vector, read_head_set, write_ce_grid_csv,
    write_head_set, CausalEffectGrid, FunctionVectorHeadSet, InterventionMode, SweepResult,
};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::tasks::Suite;
use serde::Serialize;
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

pub const RUN_CONFIG: &str = "run.toml";

fn create(path: &Path) -> Result<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn require(path: &Path, what: &str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::Data(format!("{what} not found at {}", path.display())))
    }
}

pub fn load_base(cfg: &ExperimentConfig) -> Result<Model> {
    let p = cfg.base_checkpoint();
    require(&p, "base checkpoint (run pretrain first)")?;
    load_checkpoint(&p)
}

pub fn load_head_set(cfg: &ExperimentConfig) -> Result<FunctionVectorHeadSet> {
    let p = cfg.head_set_path();
    require(&p, "head set (run find-heads first)")?;
    read_head_set(BufReader::new(File::open(p)?))
}

/// Loads `M0` from the output directory, pretraining it first if absent.
pub fn ensure_base(cfg: &ExperimentConfig, progress: impl FnMut(usize, f64)) -> Result<Model> {
    if !cfg.base_checkpoint().exists() {
        cmd_pretrain(cfg, progress)?;
    }
    load_base(cfg)
}

/// Loads the head set from the output directory, discovering it first if absent.
pub fn ensure_head_set(cfg: &ExperimentConfig) -> Result<FunctionVectorHeadSet> {
    if !cfg.head_set_path().exists() {
        cmd_find_heads(cfg, None)?;
    }
    load_head_set(cfg)
}

/// Pretrains `M0`, writing the checkpoint, the competence report and the
/// config. Fails with an invariant error (after writing) when the base model
/// is not competent.
pub fn cmd_pretrain(cfg: &ExperimentConfig, progress: impl FnMut(usize, f64)) -> Result<CompetenceReport> {
    cfg.validate()?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let (m, report) = pretrain(&cfg.model_config(), &suite, &cfg.pretrain, cfg.seed, progress)?;
    save_checkpoint(&m, &cfg.base_checkpoint())?;
    serde_json::to_writer_pretty(create(&cfg.out_dir.join("competence.json"))?, &report)?;
    std::fs::write(cfg.out_dir.join("experiment.toml"), cfg.to_toml()?)?;
    if !report.competent {
        let weak: Vec<String> = report
            .tasks
            .iter()
            .filter(|t| t.n_shot < report.threshold)
            .map(|t| format!("{} {:.1}", t.task, t.n_shot))
            .collect();
        return Err(Error::Invariant(format!(
            "base model not competent after {} steps: {}",
            report.steps,
            weak.join(", ")
        )));
    }
    Ok(report)
}

/// Discovers the causal head set on `checkpoint` (the base model by default)
/// and writes it with its CE grid.
pub fn cmd_find_heads(cfg: &ExperimentConfig, checkpoint: Option<&Path>) -> Result<(FunctionVectorHeadSet, CausalEffectGrid)> {
    cfg.validate()?;
    let m = match checkpoint {
        Some(p) => {
            require(p, "checkpoint")?;
            load_checkpoint(p)?
        }
        None => load_base(cfg)?,
    };
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let probe = suite.select(&cfg.suite.probe)?;
    let (s, grid) = get_function_vector_head_set(&m, "M0", &suite.vocab, &probe, &cfg.fv)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    write_head_set(&s, create(&cfg.head_set_path())?)?;
    write_ce_grid_csv(&grid, create(&cfg.ce_grid_path())?)?;
    Ok((s, grid))
}

pub fn run_dir(cfg: &ExperimentConfig, method: Method) -> PathBuf {
    cfg.out_dir.join(format!("seq_{method}"))
}

/// Runs the continual sequence with `method` in `out_dir/seq_<method>`,
/// resuming after the last completed stage if the directory has one.
pub fn cmd_run_sequence(cfg: &ExperimentConfig, method: Method) -> Result<(PathBuf, SequenceResult)> {
    let mut cfg = cfg.clone();
    cfg.training.method = method;
    cfg.validate()?;
    let base = load_base(&cfg)?;
    let heads = load_head_set(&cfg)?;
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let dir = run_dir(&cfg, method);
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join(RUN_CONFIG), cfg.to_toml()?)?;
    let setup = SequenceSetup {
        suite: &suite,
        base: &base,
        head_set: &heads,
        train: &cfg.training,
        fv: &cfg.fv,
        eval: &cfg.eval,
    };
    let r = run_sequence(&setup, Some(&dir))?;
    Ok((dir, r))
}

#[derive(Serialize)]
struct SweepRow {
    layer: String,
    selection: f64,
    val: f64,
    best: bool,
}

/// Per-layer score table: a `plain` row, then one row per swept layer.
pub fn write_sweep_csv(s: &SweepResult, w: impl Write) -> Result<()> {
    let mut c = csv::Writer::from_writer(w);
    c.serialize(SweepRow { layer: "plain".into(), selection: s.plain_selection, val: s.plain_val, best: false })?;
    for l in &s.layers {
        c.serialize(SweepRow { layer: l.layer.to_string(), selection: l.selection, val: l.val, best: l.layer == s.best_layer })?;
    }
    c.flush()?;
    Ok(())
}

/// What to intervene on and where.
#[derive(Clone, Debug)]
pub struct InterveneArgs {
    pub checkpoint: PathBuf,
    pub fv_file: PathBuf,
    pub mode: InterventionMode,
    /// Defaults to the configured sweep clipped to the model depth.
    pub layers: Option<Vec<usize>>,
    /// Task scored under the intervention; defaults to the FV's own task.
    pub task: Option<String>,
    pub shots: usize,
}

/// Zero-shot (or `shots`-shot) scores of `task` under `±θ` at every layer,
/// written to `out_dir/intervene_<task>_<mode>.csv`.
pub fn cmd_intervene(cfg: &ExperimentConfig, args: &InterveneArgs) -> Result<(PathBuf, SweepResult)> {
    cfg.validate()?;
    require(&args.checkpoint, "checkpoint")?;
    require(&args.fv_file, "function vector file")?;
    let m = load_checkpoint(&args.checkpoint)?;
    let fv = read_function_vector(BufReader::new(File::open(&args.fv_file)?))?;
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let task = suite.get(args.task.as_deref().unwrap_or(&fv.task_id))?;
    let layers = args.layers.clone().unwrap_or_else(|| cfg.eval.sweep(m.config.n_layers));
    let s = layer_sweep(&m, task, &suite.vocab, &fv.theta, args.mode, &layers, args.shots, &cfg.eval)?;
    std::fs::create_dir_all(&cfg.out_dir)?;
    let mode = match args.mode {
        InterventionMode::Add => "add",
        InterventionMode::Subtract => "subtract",
    };
    let path = cfg.out_dir.join(format!("intervene_{}_{mode}.csv", task.id));
    write_sweep_csv(&s, create(&path)?)?;
    Ok((path, s))
}

/// Analytics of a finished run directory, written next to its other artifacts.
pub fn cmd_analyze(run: &Path) -> Result<Analysis> {
    let rc = run.join(RUN_CONFIG);
    require(&rc, "run config")?;
    let cfg = ExperimentConfig::load(&rc)?;
    let base = load_base(&cfg)?;
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let (checkpoints, snapshots, scores) = RunDir(run.to_path_buf()).load(&base, cfg.suite.sequence.n())?;
    let a = analyze(&suite, &checkpoints, &snapshots, &scores)?;
    a.write_long_csv(create(&run.join("analytics_long.csv"))?)?;
    a.write_cross_csv(create(&run.join("cross_task_similarity.csv"))?)?;
    a.write_r2_csv(create(&run.join("r2.csv"))?)?;
    Ok(a)
}

/// Runs the full gradient suite; any failing case is a numeric error.
pub fn cmd_grad_check(s: &GradCheckSettings) -> Result<Vec<GradCheckLine>> {
    let lines = full_suite(s)?;
    let bad: Vec<&str> = lines.iter().filter(|l| !l.passed).map(|l| l.name.as_str()).collect();
    if !bad.is_empty() {
        return Err(Error::Numeric(format!("gradient check failed for {}", bad.join(", "))));
    }
    Ok(lines)
}

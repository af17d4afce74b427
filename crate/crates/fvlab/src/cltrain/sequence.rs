use super::baselines::{estimate_fisher, model_average, EwcState, ReplayBuffer};
use super::losses::FrozenReference;
use super::trainer::{train_task, Method, TaskContext, ThetaSource, TrainRecord, TrainingConfig};
use crate::error::{Error, Result};
use crate::eval::{compute_metrics, evaluate_task, EvalConfig, MetricsReport, ScoreMatrix};
use crate::fv::{extract_fv, get_function_vector_head_set, FunctionVector, FunctionVectorHeadSet, FvConfig};
use crate::model::{load_checkpoint, save_checkpoint, Model};
use crate::rng::substream;
use crate::tasks::Suite;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

/// Everything a sequence run reads but never mutates.
pub struct SequenceSetup<'a> {
    pub suite: &'a Suite,
    pub base: &'a Model,
    pub head_set: &'a FunctionVectorHeadSet,
    pub train: &'a TrainingConfig,
    pub fv: &'a FvConfig,
    pub eval: &'a EvalConfig,
}

/// Function vectors of every scored task read from one checkpoint.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageSnapshot {
    pub stage: usize,
    pub head_set: FunctionVectorHeadSet,
    pub fvs: Vec<FunctionVector>,
}

impl StageSnapshot {
    pub fn get(&self, task: &str) -> Result<&FunctionVector> {
        self.fvs
            .iter()
            .find(|f| f.task_id == task)
            .ok_or_else(|| Error::Contract(format!("no FV for {task} at stage {}", self.stage)))
    }
}

pub struct SequenceResult {
    /// `M_0..M_N`.
    pub checkpoints: Vec<Model>,
    pub scores: ScoreMatrix,
    pub metrics: MetricsReport,
    pub snapshots: Vec<StageSnapshot>,
    pub log: Vec<TrainRecord>,
}

#[derive(Serialize, Deserialize)]
struct Progress {
    completed: usize,
    scores: ScoreMatrix,
}

pub fn model_id(stage: usize) -> String {
    format!("M{stage}")
}

/// Paths inside a sequence run directory.
pub struct RunDir(pub PathBuf);

impl RunDir {
    pub fn checkpoint(&self, j: usize) -> PathBuf {
        self.0.join(format!("checkpoint_m{j}.fvl"))
    }
    pub fn snapshot(&self, j: usize) -> PathBuf {
        self.0.join(format!("fv_m{j}.json"))
    }
    pub fn stage_log(&self, j: usize) -> PathBuf {
        self.0.join(format!("train_log_m{j}.jsonl"))
    }
    pub fn progress(&self) -> PathBuf {
        self.0.join("progress.json")
    }
    pub fn scores_csv(&self) -> PathBuf {
        self.0.join("scores.csv")
    }
    pub fn scores_long_csv(&self) -> PathBuf {
        self.0.join("scores_long.csv")
    }
    pub fn metrics_json(&self) -> PathBuf {
        self.0.join("metrics.json")
    }
    pub fn metrics_csv(&self) -> PathBuf {
        self.0.join("metrics.csv")
    }
    pub fn train_log(&self) -> PathBuf {
        self.0.join("train_log.jsonl")
    }

    /// Stage artifacts of a finished `n`-task run that are absent on disk.
    pub fn missing(&self, n: usize) -> Vec<PathBuf> {
        let mut want = vec![self.progress(), self.snapshot(0)];
        for j in 1..=n {
            want.push(self.checkpoint(j));
            want.push(self.snapshot(j));
        }
        want.into_iter().filter(|p| !p.exists()).collect()
    }

    /// Loads `M_1..M_N` (prefixed with `base`), every FV snapshot and the score matrix.
    pub fn load(&self, base: &Model, n: usize) -> Result<(Vec<Model>, Vec<StageSnapshot>, ScoreMatrix)> {
        let missing = self.missing(n);
        if !missing.is_empty() {
            let list: Vec<String> = missing.iter().map(|p| p.display().to_string()).collect();
            return Err(Error::Data(format!("incomplete run directory, missing: {}", list.join(", "))));
        }
        let p: Progress = serde_json::from_reader(BufReader::new(File::open(self.progress())?))?;
        if p.completed < n {
            return Err(Error::Data(format!("run stopped after stage {} of {n}", p.completed)));
        }
        let mut checkpoints = vec![base.clone()];
        let mut snapshots = Vec::with_capacity(n + 1);
        for j in 0..=n {
            if j > 0 {
                checkpoints.push(load_checkpoint(&self.checkpoint(j))?);
            }
            snapshots.push(serde_json::from_reader(BufReader::new(File::open(self.snapshot(j))?))?);
        }
        Ok((checkpoints, snapshots, p.scores))
    }
}

fn write_atomic(path: &Path, f: impl FnOnce(&mut BufWriter<File>) -> Result<()>) -> Result<()> {
    let tmp = path.with_extension("tmp");
    {
        let mut w = BufWriter::new(File::create(&tmp)?);
        f(&mut w)?;
        w.flush()?;
    }
    std::fs::rename(tmp, path)?;
    Ok(())
}

fn score_stage(m: &Model, j: usize, setup: &SequenceSetup<'_>, scores: &mut ScoreMatrix) -> Result<()> {
    let vocab = &setup.suite.vocab;
    for id in scores.tasks.clone() {
        let t = setup.suite.get(&id)?;
        let zs = evaluate_task(m, t, vocab, 0, &[], setup.eval)?;
        let ns = evaluate_task(m, t, vocab, setup.eval.n_shots, &[], setup.eval)?;
        scores.set(&id, j, zs, ns)?;
    }
    Ok(())
}

fn snapshot_stage(m: &Model, j: usize, tasks: &[String], setup: &SequenceSetup<'_>) -> Result<StageSnapshot> {
    let id = model_id(j);
    let s = if setup.fv.recompute_heads && j > 0 {
        let probe = setup.suite.select(&setup.suite.config.probe)?;
        get_function_vector_head_set(m, &id, &setup.suite.vocab, &probe, setup.fv)?.0
    } else {
        setup.head_set.clone()
    };
    let mut fvs = Vec::with_capacity(tasks.len());
    for t in tasks {
        fvs.push(extract_fv(m, &id, setup.suite.get(t)?, &setup.suite.vocab, &s, setup.fv)?.0);
    }
    Ok(StageSnapshot { stage: j, head_set: s, fvs })
}

/// Trains the sequence's tasks in order with the configured method, scoring
/// every task and snapshotting FVs after each stage.
///
/// With `out`, each completed stage is flushed (checkpoint, FV snapshot, step
/// log, score progress) and a later call with the same directory resumes
/// after the last completed stage.
pub fn run_sequence(setup: &SequenceSetup<'_>, out: Option<&Path>) -> Result<SequenceResult> {
    let cfg = setup.train;
    let base = setup.base;
    cfg.validate(&base.config)?;
    let suite = setup.suite;
    let seq = &suite.config.sequence;
    seq.validate()?;
    let vocab = &suite.vocab;
    let n = seq.n();
    let tasks: Vec<String> = seq.eval.iter().chain(&seq.train).cloned().collect();
    let kl_layer = cfg.kl_layer(base.config.n_layers);
    let dir = out.map(|p| RunDir(p.to_path_buf()));
    if let Some(d) = &dir {
        std::fs::create_dir_all(&d.0)?;
    }

    let mut scores = ScoreMatrix::new(tasks.clone(), n + 1, setup.eval.n_shots);
    let mut completed = 0;
    if let Some(d) = &dir {
        if d.progress().exists() {
            let p: Progress = serde_json::from_reader(BufReader::new(File::open(d.progress())?))?;
            if p.scores.tasks != tasks || p.scores.n_stages() != n + 1 {
                return Err(Error::Config(format!("run directory {} belongs to a different sequence", d.0.display())));
            }
            completed = p.completed.min(n);
            scores = p.scores;
        }
    }

    let mut checkpoints = vec![base.clone()];
    let mut snapshots = Vec::new();
    let mut log = Vec::new();
    for j in 1..=completed {
        let d = dir.as_ref().expect("resume implies a run directory");
        checkpoints.push(load_checkpoint(&d.checkpoint(j))?);
        snapshots.push(serde_json::from_reader(BufReader::new(File::open(d.snapshot(j))?))?);
        let f = std::fs::read_to_string(d.stage_log(j))?;
        for line in f.lines().filter(|l| !l.trim().is_empty()) {
            log.push(serde_json::from_str(line)?);
        }
    }
    let s0 = snapshot_stage(base, 0, &tasks, setup)?;
    if completed == 0 {
        score_stage(base, 0, setup, &mut scores)?;
        if let Some(d) = &dir {
            write_atomic(&d.snapshot(0), |w| Ok(serde_json::to_writer(w, &s0)?))?;
        }
    }
    snapshots.insert(0, s0);

    // Replay and EWC state are functions of completed checkpoints, so a
    // resumed run rebuilds them exactly.
    let mut buffer = ReplayBuffer::new(cfg.replay_capacity);
    for id in &seq.train[..completed] {
        buffer.add_task(suite.get(id)?, &mut substream(cfg.seed, &format!("replay-fill/{id}")));
    }
    let mut ewc: Option<EwcState> = None;
    if cfg.method == Method::Ewc && completed > 0 {
        let prev = suite.get(&seq.train[completed - 1])?;
        let m = &checkpoints[completed];
        let f = estimate_fisher(m, prev, vocab, cfg.batch, cfg.fisher_batches)?;
        ewc = Some(EwcState::new(m, f, cfg.ewc_lambda)?);
    }

    let mut model = checkpoints[completed].clone();
    for j in completed + 1..=n {
        let task = suite.get(&seq.train[j - 1])?;
        let prev = model.clone();
        let frozen = if cfg.method == Method::Fvg {
            let src = match cfg.theta_source {
                ThetaSource::Base => base,
                ThetaSource::Previous => &prev,
            };
            let src_id = match cfg.theta_source {
                ThetaSource::Base => model_id(0),
                ThetaSource::Previous => model_id(j - 1),
            };
            let theta = extract_fv(src, &src_id, task, vocab, setup.head_set, setup.fv)?.0.theta;
            Some(FrozenReference::new(prev.clone(), theta, setup.head_set.heads.clone(), kl_layer)?)
        } else {
            None
        };
        if let Some(r) = cfg.adapter_rank {
            model.apply_low_rank_adapters(r, &mut substream(cfg.seed, &format!("adapter/{}", task.id)))?;
        }
        let ctx = TaskContext {
            frozen: frozen.as_ref(),
            ewc: ewc.as_ref().filter(|_| cfg.method == Method::Ewc),
            replay: Some(&buffer).filter(|_| cfg.method == Method::Replay),
            alphas: (cfg.alpha1, cfg.alpha2),
        };
        let stage_log = train_task(&mut model, task, vocab, cfg, &ctx)?;
        if let Some(fr) = &frozen {
            if !fr.is_pristine()? {
                return Err(Error::Invariant(format!("frozen reference changed while training {}", task.id)));
            }
        }
        if cfg.method == Method::ModelAvg {
            let mut merged = model.clone();
            merged.merge_adapters()?;
            model = model_average(base, &merged, cfg.avg_rho)?;
        }
        if cfg.method == Method::Ewc {
            let f = estimate_fisher(&model, task, vocab, cfg.batch, cfg.fisher_batches)?;
            ewc = Some(EwcState::new(&model, f, cfg.ewc_lambda)?);
        }
        buffer.add_task(task, &mut substream(cfg.seed, &format!("replay-fill/{}", task.id)));

        score_stage(&model, j, setup, &mut scores)?;
        let snap = snapshot_stage(&model, j, &tasks, setup)?;
        if let Some(d) = &dir {
            save_checkpoint(&model, &d.checkpoint(j))?;
            write_atomic(&d.snapshot(j), |w| Ok(serde_json::to_writer(w, &snap)?))?;
            write_atomic(&d.stage_log(j), |w| TrainRecord::write_jsonl(&stage_log, w))?;
            write_atomic(&d.progress(), |w| Ok(serde_json::to_writer(w, &Progress { completed: j, scores: scores.clone() })?))?;
        }
        log.extend(stage_log);
        snapshots.push(snap);
        checkpoints.push(model.clone());
    }

    let metrics = compute_metrics(&scores, seq)?;
    if let Some(d) = &dir {
        write_atomic(&d.scores_csv(), |w| scores.write_csv(w))?;
        write_atomic(&d.scores_long_csv(), |w| scores.write_long_csv(w))?;
        write_atomic(&d.metrics_json(), |w| metrics.write_json(w))?;
        write_atomic(&d.metrics_csv(), |w| metrics.write_csv(w))?;
        write_atomic(&d.train_log(), |w| TrainRecord::write_jsonl(&log, w))?;
    }
    Ok(SequenceResult { checkpoints, scores, metrics, snapshots, log })
}

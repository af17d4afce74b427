use crate::diffcore::{Adam, Tape};
use crate::error::{Error, Result};
use crate::eval::{evaluate_queries, EvalConfig};
use crate::model::{LogitRows, Model, ModelConfig, Trainable};
use crate::tasks::{Curriculum, Suite, TaskSpec};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    /// Competence is not checked before this many steps.
    pub min_steps: usize,
    pub max_steps: usize,
    pub check_every: usize,
    pub batch: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub max_shots: usize,
    /// Required n-shot score on every pretraining task.
    pub threshold: f64,
    pub competence_shots: usize,
    /// Val queries per task in competence checks.
    pub check_queries: usize,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        PretrainConfig {
            min_steps: 3000,
            max_steps: 6000,
            check_every: 250,
            batch: 16,
            lr: 1e-3,
            weight_decay: 1e-4,
            max_shots: 10,
            threshold: 90.0,
            competence_shots: 10,
            check_queries: 100,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskCompetence {
    pub task: String,
    pub zero_shot: f64,
    pub n_shot: f64,
}

/// Per-task scores of the base model on the full val split.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CompetenceReport {
    pub steps: usize,
    pub shots: usize,
    pub threshold: f64,
    pub tasks: Vec<TaskCompetence>,
    pub competent: bool,
    /// Mean LM loss over the last `check_every` steps.
    pub final_loss: f64,
}

fn scores(model: &Model, suite: &Suite, tasks: &[TaskSpec], shots: usize, queries: usize, eval: &EvalConfig) -> Result<Vec<TaskCompetence>> {
    tasks
        .iter()
        .map(|t| {
            let q = &t.val[..queries.min(t.val.len())];
            Ok(TaskCompetence {
                task: t.id.clone(),
                zero_shot: evaluate_queries(model, t, &suite.vocab, q, 0, &[], eval)?,
                n_shot: evaluate_queries(model, t, &suite.vocab, q, shots, &[], eval)?,
            })
        })
        .collect()
}

/// Trains a fresh model on the uniform pretraining mixture until every
/// pretraining task reaches the n-shot threshold (after `min_steps`) or
/// `max_steps` is hit. The report is computed on the full val split.
pub fn pretrain(
    model_cfg: &ModelConfig,
    suite: &Suite,
    cfg: &PretrainConfig,
    seed: u64,
    mut progress: impl FnMut(usize, f64),
) -> Result<(Model, CompetenceReport)> {
    if cfg.batch == 0 || cfg.max_steps == 0 || cfg.check_every == 0 {
        return Err(Error::Config("pretraining needs positive batch, max_steps and check_every".into()));
    }
    let mut model = Model::new(model_cfg.clone())?;
    let tasks = suite.select(&suite.config.pretrain)?;
    let mut cur = Curriculum::uniform(&tasks, cfg.max_shots, seed)?;
    let mut adam = Adam::new(cfg.lr, 0.9, 0.999, 1e-8, cfg.weight_decay);
    let eval = EvalConfig { seed, ..EvalConfig::default() };
    let mut recent = Vec::new();
    let mut step = 0;
    while step < cfg.max_steps {
        let mut seqs = Vec::with_capacity(cfg.batch);
        let mut rows = Vec::new();
        let mut ce = Vec::new();
        let mut off = 0;
        for _ in 0..cfg.batch {
            let item = cur.next().ok_or_else(|| Error::Data("pretraining stream ended".into()))?;
            let (toks, tg) = item.lm_sequence(&suite.vocab, &tasks[item.task]);
            for (p, t) in tg {
                ce.push((rows.len(), t));
                rows.push(off + p);
            }
            off += toks.len();
            seqs.push(toks);
        }
        let mut tape = Tape::new();
        let out = model.forward(&mut tape, &seqs, &[], Trainable::Full, LogitRows::Rows(rows))?;
        let loss = tape.cross_entropy(out.logits, &ce)?;
        let lv = tape.value(loss).item();
        if !lv.is_finite() {
            return Err(Error::Divergence { step, detail: format!("pretraining loss {lv}") });
        }
        let g = tape.backward(loss)?;
        let grads: Vec<Vec<f64>> = out
            .param_vars
            .iter()
            .zip(&model.params.tensors)
            .map(|(&v, t)| g.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
            .collect();
        let mut params: Vec<&mut [f64]> = model.params.tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect();
        let grefs: Vec<&[f64]> = grads.iter().map(|x| x.as_slice()).collect();
        adam.step(&mut params, &grefs);
        step += 1;
        recent.push(lv);
        if recent.len() > cfg.check_every {
            recent.remove(0);
        }
        if step % cfg.check_every == 0 {
            progress(step, recent.iter().sum::<f64>() / recent.len() as f64);
            if step >= cfg.min_steps {
                let s = scores(&model, suite, &tasks, cfg.competence_shots, cfg.check_queries, &eval)?;
                if s.iter().all(|c| c.n_shot >= cfg.threshold) {
                    break;
                }
            }
        }
    }
    let report = competence_report(&model, suite, cfg, step, recent.iter().sum::<f64>() / recent.len().max(1) as f64, seed)?;
    Ok((model, report))
}

/// n-shot and zero-shot scores of every pretraining task on its val split.
pub fn competence_report(
    model: &Model,
    suite: &Suite,
    cfg: &PretrainConfig,
    steps: usize,
    final_loss: f64,
    seed: u64,
) -> Result<CompetenceReport> {
    let tasks = suite.select(&suite.config.pretrain)?;
    let eval = EvalConfig { seed, ..EvalConfig::default() };
    let s = scores(model, suite, &tasks, cfg.competence_shots, usize::MAX, &eval)?;
    let competent = s.iter().all(|c| c.n_shot >= cfg.threshold);
    Ok(CompetenceReport { steps, shots: cfg.competence_shots, threshold: cfg.threshold, tasks: s, competent, final_loss })
}

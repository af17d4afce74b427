use super::rouge::{classification_score, rouge_l};
use crate::error::{Error, Result};
use crate::model::{HookSpec, Model};
use crate::rng::substream;
use crate::tasks::{Example, PromptBundle, TaskKind, TaskSpec, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct EvalConfig {
    /// Shots for the in-context (IP) column.
    pub n_shots: usize,
    /// Val examples scored per task (all of them when larger than the split).
    pub max_queries: usize,
    /// Fixed demonstration seed, shared by every checkpoint.
    pub seed: u64,
    /// Sequences per forward pass.
    pub batch: usize,
    /// Candidate intervention layers; entries `>= n_layers` are dropped.
    pub layer_sweep: Vec<usize>,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { n_shots: 5, max_queries: 200, seed: 7, batch: 48, layer_sweep: vec![3, 6, 9, 12, 15] }
    }
}

impl EvalConfig {
    pub fn sweep(&self, n_layers: usize) -> Vec<usize> {
        self.layer_sweep.iter().cloned().filter(|&l| l < n_layers).collect()
    }
}

/// Score of one generated continuation, in `[0, 1]`.
pub fn score_answer(task: &TaskSpec, candidate: &[usize], reference: &[usize]) -> f64 {
    match task.kind {
        TaskKind::Generation => rouge_l(candidate, reference),
        TaskKind::Classification => classification_score(candidate, reference[0], &task.label_set),
    }
}

/// Prompts for `queries` with `n` heldout demonstrations each, drawn from the eval stream.
pub fn eval_prompts(task: &TaskSpec, vocab: &Vocab, queries: &[Example], n: usize, seed: u64) -> Result<Vec<Vec<usize>>> {
    let mut rng = substream(seed, &format!("eval/{}/{n}", task.id));
    queries.iter().map(|q| Ok(PromptBundle::new(task, n, q.clone(), &mut rng)?.tokens(vocab))).collect()
}

/// Mean score (x100) of greedy answers to `queries`.
pub fn evaluate_queries(
    model: &Model,
    task: &TaskSpec,
    vocab: &Vocab,
    queries: &[Example],
    n_shots: usize,
    hooks: &[HookSpec],
    cfg: &EvalConfig,
) -> Result<f64> {
    if queries.is_empty() {
        return Err(Error::Data(format!("task {}: nothing to evaluate", task.id)));
    }
    let prompts = eval_prompts(task, vocab, queries, n_shots, cfg.seed)?;
    let max_new = queries.iter().map(|q| q.y.len()).max().unwrap_or(1) + 1;
    let mut total = 0.0;
    for (ps, qs) in prompts.chunks(cfg.batch.max(1)).zip(queries.chunks(cfg.batch.max(1))) {
        let outs = model.greedy_generate_batch(ps, max_new, hooks)?;
        for (o, q) in outs.iter().zip(qs) {
            total += score_answer(task, o, &q.y);
        }
    }
    Ok(100.0 * total / queries.len() as f64)
}

/// Mean score (x100) over the task's val split under optional hooks.
pub fn evaluate_task(
    model: &Model,
    task: &TaskSpec,
    vocab: &Vocab,
    n_shots: usize,
    hooks: &[HookSpec],
    cfg: &EvalConfig,
) -> Result<f64> {
    let k = cfg.max_queries.min(task.val.len());
    evaluate_queries(model, task, vocab, &task.val[..k], n_shots, hooks, cfg)
}

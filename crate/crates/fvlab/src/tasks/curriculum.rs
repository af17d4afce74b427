use super::prompt::render;
use super::spec::{Example, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use rand::seq::index::sample;
use rand::Rng as _;

/// One pretraining sequence: demonstrations and a query from the same task.
#[derive(Clone, Debug, PartialEq)]
pub struct StreamItem {
    pub task: usize,
    pub demos: Vec<Example>,
    pub query: Example,
}

/// Token sequence plus `(row, token)` next-token targets on every output token.
pub type LmSequence = (Vec<usize>, Vec<(usize, usize)>);

/// Renders `instruction (x -> y EOS)*` with targets on each `y` token and its `EOS`.
pub fn lm_sequence(vocab: &Vocab, instruction: &[usize], pairs: &[&Example]) -> LmSequence {
    let mut toks = instruction.to_vec();
    let mut tg = Vec::new();
    for e in pairs {
        toks.extend_from_slice(&e.x);
        toks.push(vocab.arrow);
        for &t in e.y.iter().chain(std::iter::once(&vocab.eos)) {
            tg.push((toks.len() - 1, t));
            toks.push(t);
        }
    }
    (toks, tg)
}

impl StreamItem {
    pub fn lm_sequence(&self, vocab: &Vocab, task: &TaskSpec) -> LmSequence {
        let mut pairs: Vec<&Example> = self.demos.iter().collect();
        pairs.push(&self.query);
        lm_sequence(vocab, &task.instruction, &pairs)
    }

    /// The prompt up to the query's arrow.
    pub fn prompt(&self, vocab: &Vocab, task: &TaskSpec) -> Vec<usize> {
        let d: Vec<(&[usize], &[usize])> = self.demos.iter().map(|e| (e.x.as_slice(), e.y.as_slice())).collect();
        render(vocab, &task.instruction, &d, &self.query.x)
    }
}

/// Deterministic interleaving of task train splits by smooth weighted round-robin.
///
/// Each task's train split is cycled in order; the number of demonstrations
/// per item is uniform in `0..=max_shots`, drawn from the same split.
pub struct Curriculum<'a> {
    tasks: &'a [TaskSpec],
    weights: Vec<f64>,
    current: Vec<f64>,
    cursors: Vec<usize>,
    max_shots: usize,
    rng: Rng,
}

impl<'a> Curriculum<'a> {
    pub fn new(tasks: &'a [TaskSpec], weights: &[f64], max_shots: usize, seed: u64) -> Result<Self> {
        if tasks.is_empty() {
            return Err(Error::Config("pretraining curriculum needs at least one task".into()));
        }
        if weights.len() != tasks.len() {
            return Err(Error::Config(format!("{} weights for {} tasks", weights.len(), tasks.len())));
        }
        let s: f64 = weights.iter().sum();
        if (s - 1.0).abs() > 1e-9 || weights.iter().any(|w| *w < 0.0) {
            return Err(Error::Config(format!("mixture weights must be nonnegative and sum to 1, got {s}")));
        }
        for t in tasks {
            if t.train.len() <= max_shots {
                return Err(Error::Data(format!("task {}: train split too small for {max_shots} shots", t.id)));
            }
        }
        Ok(Curriculum {
            tasks,
            weights: weights.to_vec(),
            current: vec![0.0; tasks.len()],
            cursors: vec![0; tasks.len()],
            max_shots,
            rng: substream(seed, "pretrain-stream"),
        })
    }

    /// Uniform weights over `tasks`.
    pub fn uniform(tasks: &'a [TaskSpec], max_shots: usize, seed: u64) -> Result<Self> {
        let w = vec![1.0 / tasks.len() as f64; tasks.len()];
        Curriculum::new(tasks, &w, max_shots, seed)
    }

    fn pick(&mut self) -> usize {
        let mut best = 0;
        for i in 0..self.current.len() {
            self.current[i] += self.weights[i];
            if self.current[i] > self.current[best] {
                best = i;
            }
        }
        self.current[best] -= 1.0;
        best
    }
}

impl Iterator for Curriculum<'_> {
    type Item = StreamItem;

    fn next(&mut self) -> Option<StreamItem> {
        let ti = self.pick();
        let task = &self.tasks[ti];
        let qi = self.cursors[ti] % task.train.len();
        self.cursors[ti] += 1;
        let n = self.rng.gen_range(0..=self.max_shots);
        let picks = sample(&mut self.rng, task.train.len() - 1, n);
        let demos = picks.iter().map(|j| task.train[if j >= qi { j + 1 } else { j }].clone()).collect();
        Some(StreamItem { task: ti, demos, query: task.train[qi].clone() })
    }
}

use super::spec::{Example, TaskSpec, Vocab};
use crate::error::{Error, Result};
use crate::rng::{substream, Rng};
use rand::seq::SliceRandom;
use rand::Rng as _;

/// An n-shot prompt, its label-shuffled counterfactual, and the query.
#[derive(Clone, Debug, PartialEq)]
pub struct PromptBundle {
    pub instruction: Vec<usize>,
    pub demos: Vec<Example>,
    /// Demo labels after shuffling; `shuffled_y[i]` is paired with `demos[i].x`.
    pub shuffled_y: Vec<Vec<usize>>,
    pub query: Example,
    pub n: usize,
}

/// Uniform permutation of `0..n` with no fixed point when `n >= 2`.
pub fn derangement(n: usize, rng: &mut Rng) -> Vec<usize> {
    let mut p: Vec<usize> = (0..n).collect();
    if n < 2 {
        return p;
    }
    loop {
        p.shuffle(rng);
        if p.iter().enumerate().all(|(i, &j)| i != j) {
            return p;
        }
    }
}

/// `instruction (x -> y EOS)* x ->` as token ids.
pub fn render(vocab: &Vocab, instruction: &[usize], demos: &[(&[usize], &[usize])], x: &[usize]) -> Vec<usize> {
    let mut t = instruction.to_vec();
    for (dx, dy) in demos {
        t.extend_from_slice(dx);
        t.push(vocab.arrow);
        t.extend_from_slice(dy);
        t.push(vocab.eos);
    }
    t.extend_from_slice(x);
    t.push(vocab.arrow);
    t
}

impl PromptBundle {
    /// Demos drawn without replacement from the heldout split.
    pub fn new(task: &TaskSpec, n: usize, query: Example, rng: &mut Rng) -> Result<Self> {
        if task.heldout.len() < n + 1 {
            return Err(Error::Data(format!(
                "task {}: heldout pool of {} cannot supply {n} demonstrations",
                task.id,
                task.heldout.len()
            )));
        }
        let demos: Vec<Example> = task.heldout.choose_multiple(rng, n).cloned().collect();
        let perm = derangement(n, rng);
        let shuffled_y = perm.iter().map(|&j| demos[j].y.clone()).collect();
        Ok(PromptBundle { instruction: task.instruction.clone(), demos, shuffled_y, query, n })
    }

    pub fn tokens(&self, vocab: &Vocab) -> Vec<usize> {
        let d: Vec<(&[usize], &[usize])> = self.demos.iter().map(|e| (e.x.as_slice(), e.y.as_slice())).collect();
        render(vocab, &self.instruction, &d, &self.query.x)
    }

    pub fn shuffled_tokens(&self, vocab: &Vocab) -> Vec<usize> {
        let d: Vec<(&[usize], &[usize])> =
            self.demos.iter().zip(&self.shuffled_y).map(|(e, y)| (e.x.as_slice(), y.as_slice())).collect();
        render(vocab, &self.instruction, &d, &self.query.x)
    }

    pub fn target(&self) -> &[usize] {
        &self.query.y
    }
}

/// Bundle with a query drawn from the val split by `seed`.
pub fn build_icl_prompt(task: &TaskSpec, n: usize, seed: u64) -> Result<PromptBundle> {
    if task.val.is_empty() {
        return Err(Error::Data(format!("task {}: empty val split", task.id)));
    }
    let mut rng = substream(seed, &format!("prompt/{}", task.id));
    let q = task.val[rng.gen_range(0..task.val.len())].clone();
    PromptBundle::new(task, n, q, &mut rng)
}

/// One bundle per query, all drawn from a single stream.
pub fn bundles_for(task: &TaskSpec, n: usize, queries: &[Example], rng: &mut Rng) -> Result<Vec<PromptBundle>> {
    queries.iter().map(|q| PromptBundle::new(task, n, q.clone(), rng)).collect()
}

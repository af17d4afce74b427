use super::losses::{lm_loss, TrainBatch};
use crate::diffcore::Tape;
use crate::error::{Error, Result};
use crate::model::{Model, Trainable};
use crate::rng::Rng;
use crate::tasks::{Example, TaskSpec, Vocab};
use rand::seq::SliceRandom;
use rand::Rng as _;

/// Diagonal Fisher and anchor weights for elastic weight consolidation.
#[derive(Clone, Debug, PartialEq)]
pub struct EwcState {
    /// Per base-parameter tensor, same layout as the model's store.
    pub fisher: Vec<Vec<f64>>,
    pub anchor: Vec<Vec<f64>>,
    pub lambda: f64,
}

/// Gradients of `l_LM` with respect to every base parameter.
pub fn lm_gradients(model: &Model, batch: &TrainBatch) -> Result<Vec<Vec<f64>>> {
    let mut tape = Tape::new();
    let f = lm_loss(&mut tape, model, batch, Trainable::Full)?;
    let g = tape.backward(f.lm)?;
    Ok(f.out
        .param_vars
        .iter()
        .zip(&model.params.tensors)
        .map(|(&v, t)| g.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect())
}

/// Empirical diagonal Fisher: mean squared batch gradient of `l_LM` over
/// `n_batches` consecutive batches of `task.train`, wrapping around.
pub fn estimate_fisher(model: &Model, task: &TaskSpec, vocab: &Vocab, batch: usize, n_batches: usize) -> Result<Vec<Vec<f64>>> {
    if task.train.is_empty() || batch == 0 || n_batches == 0 {
        return Err(Error::Config("Fisher estimate needs data, a batch size and a batch count".into()));
    }
    let mut fisher: Vec<Vec<f64>> = model.params.tensors.iter().map(|t| vec![0.0; t.numel()]).collect();
    let n = task.train.len();
    for b in 0..n_batches {
        let items: Vec<(&[usize], &Example)> =
            (0..batch).map(|i| (task.instruction.as_slice(), &task.train[(b * batch + i) % n])).collect();
        let g = lm_gradients(model, &TrainBatch::zero_shot(vocab, &items)?)?;
        for (f, gt) in fisher.iter_mut().zip(&g) {
            for (a, x) in f.iter_mut().zip(gt) {
                *a += x * x;
            }
        }
    }
    for f in fisher.iter_mut() {
        for a in f.iter_mut() {
            *a /= n_batches as f64;
        }
    }
    Ok(fisher)
}

impl EwcState {
    pub fn new(model: &Model, fisher: Vec<Vec<f64>>, lambda: f64) -> Result<Self> {
        if lambda < 0.0 {
            return Err(Error::Config("EWC lambda must be nonnegative".into()));
        }
        if fisher.len() != model.params.len() {
            return Err(Error::Dimension("Fisher does not match the parameter store".into()));
        }
        let anchor = model.params.tensors.iter().map(|t| t.data.clone()).collect();
        Ok(EwcState { fisher, anchor, lambda })
    }

    /// `(λ/2) Σ F_i (w_i - w*_i)²`.
    pub fn penalty(&self, model: &Model) -> f64 {
        let mut s = 0.0;
        for ((f, a), t) in self.fisher.iter().zip(&self.anchor).zip(&model.params.tensors) {
            for ((fi, ai), wi) in f.iter().zip(a).zip(&t.data) {
                s += fi * (wi - ai) * (wi - ai);
            }
        }
        0.5 * self.lambda * s
    }

    /// Adds the penalty gradient `λ F (w - w*)` to base-parameter gradients.
    pub fn add_gradient(&self, model: &Model, grads: &mut [Vec<f64>]) {
        for (((g, f), a), t) in grads.iter_mut().zip(&self.fisher).zip(&self.anchor).zip(&model.params.tensors) {
            for (((gi, fi), ai), wi) in g.iter_mut().zip(f).zip(a).zip(&t.data) {
                *gi += self.lambda * fi * (wi - ai);
            }
        }
    }
}

/// Examples kept from completed tasks, with the instruction they were trained under.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReplayBuffer {
    pub capacity: usize,
    pub tasks: Vec<(String, Vec<usize>, Vec<Example>)>,
}

impl ReplayBuffer {
    pub fn new(capacity: usize) -> Self {
        ReplayBuffer { capacity, tasks: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.tasks.iter().map(|t| t.2.len()).sum()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn contains_task(&self, id: &str) -> bool {
        self.tasks.iter().any(|t| t.0 == id)
    }

    /// Stores up to `capacity` uniformly chosen training examples of a finished task.
    pub fn add_task(&mut self, task: &TaskSpec, rng: &mut Rng) {
        let mut ex = task.train.clone();
        ex.shuffle(rng);
        ex.truncate(self.capacity);
        self.tasks.push((task.id.clone(), task.instruction.clone(), ex));
    }

    /// `k` examples drawn uniformly with replacement over everything stored.
    pub fn sample(&self, k: usize, rng: &mut Rng) -> Vec<(&[usize], &Example)> {
        let n = self.len();
        if n == 0 {
            return Vec::new();
        }
        (0..k)
            .map(|_| {
                let mut i = rng.gen_range(0..n);
                for (_, instr, ex) in &self.tasks {
                    if i < ex.len() {
                        return (instr.as_slice(), &ex[i]);
                    }
                    i -= ex.len();
                }
                unreachable!("index within buffer")
            })
            .collect()
    }
}

/// `W = ρ W_pretrained + (1 - ρ) W_final`, adapters included.
pub fn model_average(pretrained: &Model, fin: &Model, rho: f64) -> Result<Model> {
    if !(0.0..=1.0).contains(&rho) {
        return Err(Error::Config(format!("averaging ratio {rho} outside [0, 1]")));
    }
    if !pretrained.config.same_shape(&fin.config)
        || pretrained.params.names != fin.params.names
        || pretrained.adapters.len() != fin.adapters.len()
    {
        return Err(Error::Contract("model_average on checkpoints of different structure".into()));
    }
    let mut out = fin.clone();
    let mix = |a: &[f64], b: &mut [f64]| {
        for (x, y) in a.iter().zip(b.iter_mut()) {
            *y = rho * x + (1.0 - rho) * *y;
        }
    };
    for (p, q) in pretrained.params.tensors.iter().zip(out.params.tensors.iter_mut()) {
        if p.shape != q.shape {
            return Err(Error::Contract("model_average on tensors of different shape".into()));
        }
        mix(&p.data, &mut q.data);
    }
    for (pa, qa) in pretrained.adapters.iter().zip(out.adapters.iter_mut()) {
        for (p, q) in pa.tensors().into_iter().zip(qa.tensors_mut()) {
            if p.shape != q.shape {
                return Err(Error::Contract("model_average on adapters of different shape".into()));
            }
            mix(&p.data, &mut q.data);
        }
    }
    Ok(out)
}

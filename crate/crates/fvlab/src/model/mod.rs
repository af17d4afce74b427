//! Pre-LN decoder-only micro-transformer with last-token instrumentation.
//!
//! The output projection is stored as one block per head, so a head's
//! residual-space contribution `h_lk = head_lk · W^O_lk` is an explicit tape
//! node and the attention output is exactly the sum of its heads.

mod checkpoint;
mod config;
mod forward;
mod hooks;
mod lora;
mod params;

pub use checkpoint::{checkpoint_hash, load_checkpoint, read_checkpoint, save_checkpoint, write_checkpoint, MAGIC};
pub use config::{HeadIndex, ModelConfig};
pub use forward::{ForwardOutput, LogitRows, Trainable};
pub use hooks::HookSpec;
pub use lora::{LowRankAdapter, LowRankPair};
pub use params::{init_params, layout, param_specs, Layout, ParamStore};

use crate::diffcore::{Tape, Tensor};
use crate::error::{Error, Result};
use crate::rng::Rng;
use std::collections::BTreeMap;

/// End-of-sequence token.
pub const EOS: usize = 0;

#[derive(Clone, Debug, PartialEq)]
pub struct Model {
    pub config: ModelConfig,
    pub params: ParamStore,
    /// Stacked low-rank adapters, oldest first. Only the newest one is ever trained.
    pub adapters: Vec<LowRankAdapter>,
    layout: Layout,
}

/// Index of the largest entry; ties go to the lowest index.
pub fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    for (i, &x) in xs.iter().enumerate() {
        if x > xs[best] {
            best = i;
        }
    }
    best
}

pub fn softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let e: Vec<f64> = xs.iter().map(|x| (x - mx).exp()).collect();
    let s: f64 = e.iter().sum();
    e.into_iter().map(|x| x / s).collect()
}

pub fn log_softmax(xs: &[f64]) -> Vec<f64> {
    let mx = xs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let lse = mx + xs.iter().map(|x| (x - mx).exp()).sum::<f64>().ln();
    xs.iter().map(|x| x - lse).collect()
}

impl Model {
    pub fn new(config: ModelConfig) -> Result<Self> {
        config.validate()?;
        let params = init_params(&config);
        let layout = layout(&config);
        Ok(Model { config, params, adapters: Vec::new(), layout })
    }

    pub fn from_parts(config: ModelConfig, params: ParamStore, adapters: Vec<LowRankAdapter>) -> Result<Self> {
        config.validate()?;
        let specs = param_specs(&config);
        if specs.len() != params.len() {
            return Err(Error::Format(format!("expected {} parameter tensors, got {}", specs.len(), params.len())));
        }
        for ((name, shape), (n2, t)) in specs.iter().zip(params.names.iter().zip(&params.tensors)) {
            if name != n2 || shape != &t.shape {
                return Err(Error::Format(format!("parameter {n2} {:?} does not match {name} {shape:?}", t.shape)));
            }
        }
        let layout = layout(&config);
        Ok(Model { config, params, adapters, layout })
    }

    pub fn layout(&self) -> &Layout {
        &self.layout
    }

    /// Logits at the last position of every sequence.
    pub fn last_logits(&self, seqs: &[Vec<usize>], hooks: &[HookSpec]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seqs, hooks, Trainable::None, LogitRows::Last)?;
        let v = self.config.vocab;
        Ok(tape.data(out.logits).chunks(v).map(|r| r.to_vec()).collect())
    }

    /// Last-position logits plus every head's contribution there, per sequence in
    /// layer-major head order.
    pub fn last_logits_and_heads(
        &self,
        seqs: &[Vec<usize>],
        hooks: &[HookSpec],
    ) -> Result<(Vec<Vec<f64>>, Vec<Vec<Vec<f64>>>)> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seqs, hooks, Trainable::None, LogitRows::Last)?;
        let (v, d) = (self.config.vocab, self.config.d_model);
        let logits = tape.data(out.logits).chunks(v).map(|r| r.to_vec()).collect();
        let mut per_seq = vec![Vec::with_capacity(self.config.n_heads_total()); seqs.len()];
        for layer in &out.heads {
            for &c in layer {
                let data = tape.data(c);
                for (b, &r) in out.last_rows.iter().enumerate() {
                    per_seq[b].push(data[r * d..(r + 1) * d].to_vec());
                }
            }
        }
        Ok((logits, per_seq))
    }

    /// Every head's residual-space contribution at the final token.
    pub fn record_last_token_heads(&self, tokens: &[usize]) -> Result<BTreeMap<HeadIndex, Vec<f64>>> {
        if tokens.is_empty() {
            return Err(Error::Contract("record on an empty sequence".into()));
        }
        let (_, heads) = self.last_logits_and_heads(&[tokens.to_vec()], &[])?;
        let idx = HeadIndex::all(&self.config);
        Ok(idx.into_iter().zip(heads.into_iter().next().unwrap_or_default()).collect())
    }

    /// Final residual vector at the last token (before the output norm).
    pub fn last_hidden_state(&self, tokens: &[usize]) -> Result<Vec<f64>> {
        Ok(self.last_hidden_states(&[tokens.to_vec()])?.remove(0))
    }

    pub fn last_hidden_states(&self, seqs: &[Vec<usize>]) -> Result<Vec<Vec<f64>>> {
        let mut tape = Tape::new();
        let out = self.forward(&mut tape, seqs, &[], Trainable::None, LogitRows::Last)?;
        let d = self.config.d_model;
        let data = tape.data(out.resid_final);
        Ok(out.last_rows.iter().map(|&r| data[r * d..(r + 1) * d].to_vec()).collect())
    }

    /// Argmax decoding (lowest id on ties) until `EOS` or `max_new` tokens.
    ///
    /// Hooks act at the last position of every decoding step. The returned
    /// continuation excludes the terminating `EOS`.
    pub fn greedy_generate(&self, prompt: &[usize], max_new: usize, hooks: &[HookSpec]) -> Result<Vec<usize>> {
        Ok(self.greedy_generate_batch(&[prompt.to_vec()], max_new, hooks)?.remove(0))
    }

    pub fn greedy_generate_batch(
        &self,
        prompts: &[Vec<usize>],
        max_new: usize,
        hooks: &[HookSpec],
    ) -> Result<Vec<Vec<usize>>> {
        if prompts.iter().any(|p| p.is_empty()) {
            return Err(Error::Contract("empty prompt".into()));
        }
        let mut outs = vec![Vec::new(); prompts.len()];
        let mut seqs: Vec<Vec<usize>> = prompts.to_vec();
        let mut active: Vec<usize> = (0..prompts.len()).collect();
        for _ in 0..max_new {
            active.retain(|&i| seqs[i].len() < self.config.max_seq);
            if active.is_empty() {
                break;
            }
            let batch: Vec<Vec<usize>> = active.iter().map(|&i| seqs[i].clone()).collect();
            let logits = self.last_logits(&batch, hooks)?;
            let mut still = Vec::with_capacity(active.len());
            for (&i, lg) in active.iter().zip(&logits) {
                let t = argmax(lg);
                if t == EOS {
                    continue;
                }
                outs[i].push(t);
                seqs[i].push(t);
                still.push(i);
            }
            active = still;
        }
        Ok(outs)
    }

    /// Pushes a fresh adapter on the query and value projections of every layer.
    pub fn apply_low_rank_adapters(&mut self, rank: usize, rng: &mut Rng) -> Result<usize> {
        let a = LowRankAdapter::fresh(self.config.n_layers, self.config.d_model, rank, rng)?;
        self.adapters.push(a);
        Ok(self.adapters.len() - 1)
    }

    /// Folds every adapter into the base weights and drops them.
    pub fn merge_adapters(&mut self) -> Result<()> {
        let d = self.config.d_model;
        for a in std::mem::take(&mut self.adapters) {
            for l in 0..self.config.n_layers {
                let li = &self.layout.layers[l];
                for (pair, wi) in [(&a.q[l], li.wq), (&a.v[l], li.wv)] {
                    let mut tape = Tape::new();
                    let av = tape.constant(pair.a.clone());
                    let bv = tape.constant(pair.b.clone());
                    let ab = tape.matmul(av, bv)?;
                    let w = &mut self.params.tensors[wi].data;
                    for (x, y) in w.iter_mut().zip(tape.data(ab)) {
                        *x += y;
                    }
                    debug_assert_eq!(w.len(), d * d);
                }
            }
        }
        Ok(())
    }

    /// All scalars in store order followed by adapters.
    pub fn flat_params(&self) -> Vec<f64> {
        let mut out: Vec<f64> = self.params.tensors.iter().flat_map(|t| t.data.iter().cloned()).collect();
        for a in &self.adapters {
            for t in a.tensors() {
                out.extend_from_slice(&t.data);
            }
        }
        out
    }

    /// Parameter tensors that `trainable` makes differentiable, aligned with the
    /// leaves [`ForwardOutput`] reports for the same mode.
    pub fn trainable_tensors_mut(&mut self, trainable: Trainable) -> Vec<&mut Tensor> {
        match trainable {
            Trainable::None => Vec::new(),
            Trainable::Full => self.params.tensors.iter_mut().collect(),
            Trainable::LastAdapter => match self.adapters.last_mut() {
                Some(a) => a.tensors_mut(),
                None => Vec::new(),
            },
        }
    }
}

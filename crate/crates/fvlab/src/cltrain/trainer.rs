use super::baselines::{EwcState, ReplayBuffer};
use super::losses::{fv_consistency_loss, fv_guided_kl_loss, fvg_total_loss, lm_loss, FrozenReference, TrainBatch};
use crate::diffcore::{Adam, Tape};
use crate::error::{Error, Result};
use crate::model::{Model, ModelConfig, Trainable};
use crate::rng::substream;
use crate::tasks::{Example, TaskSpec, Vocab};
use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};
use std::io::Write;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Fvg,
    Ewc,
    Replay,
    ModelAvg,
}

impl std::str::FromStr for Method {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "naive" => Ok(Method::Naive),
            "fvg" => Ok(Method::Fvg),
            "ewc" => Ok(Method::Ewc),
            "replay" => Ok(Method::Replay),
            "model_avg" | "model-avg" => Ok(Method::ModelAvg),
            _ => Err(Error::Config(format!("unknown method {s}"))),
        }
    }
}

impl std::fmt::Display for Method {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        let s = match self {
            Method::Naive => "naive",
            Method::Fvg => "fvg",
            Method::Ewc => "ewc",
            Method::Replay => "replay",
            Method::ModelAvg => "model_avg",
        };
        f.write_str(s)
    }
}

/// Which checkpoint the KL teacher's `θ` is read from.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ThetaSource {
    /// The base model `M0`.
    Base,
    /// The model before the current task, `M_{j-1}`.
    Previous,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainingConfig {
    pub method: Method,
    pub alpha1: f64,
    pub alpha2: f64,
    /// Intervention layer of the KL teacher; `None` picks `ceil(9 L / 32)`.
    pub kl_layer: Option<usize>,
    pub theta_source: ThetaSource,
    pub lr: f64,
    pub batch: usize,
    pub epochs: usize,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub weight_decay: f64,
    pub seed: u64,
    pub ewc_lambda: f64,
    pub fisher_batches: usize,
    /// Fraction of each batch drawn from the replay buffer, on top of the current-task items.
    pub replay_ratio: f64,
    pub replay_capacity: usize,
    pub avg_rho: f64,
    /// Train a fresh low-rank adapter per task instead of all weights.
    pub adapter_rank: Option<usize>,
}

impl Default for TrainingConfig {
    fn default() -> Self {
        TrainingConfig {
            method: Method::Naive,
            alpha1: 1.0,
            alpha2: 0.08,
            kl_layer: None,
            theta_source: ThetaSource::Base,
            lr: 1e-3,
            batch: 16,
            epochs: 2,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            weight_decay: 1e-4,
            seed: 5,
            ewc_lambda: 10.0,
            fisher_batches: 64,
            replay_ratio: 0.25,
            replay_capacity: 30,
            avg_rho: 0.2,
            adapter_rank: None,
        }
    }
}

impl TrainingConfig {
    pub fn kl_layer(&self, n_layers: usize) -> usize {
        self.kl_layer.unwrap_or((9 * n_layers).div_ceil(32))
    }

    pub fn trainable(&self) -> Trainable {
        if self.adapter_rank.is_some() {
            Trainable::LastAdapter
        } else {
            Trainable::Full
        }
    }

    pub fn validate(&self, model: &ModelConfig) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if !(self.alpha1 >= 0.0 && self.alpha2 >= 0.0) {
            return bad("alpha1 and alpha2 must be nonnegative".into());
        }
        if self.kl_layer(model.n_layers) >= model.n_layers {
            return bad(format!("kl_layer {} outside {} layers", self.kl_layer(model.n_layers), model.n_layers));
        }
        if !(self.lr > 0.0) || self.batch == 0 || self.epochs == 0 {
            return bad("lr, batch and epochs must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.replay_ratio) || !(0.0..=1.0).contains(&self.avg_rho) {
            return bad("replay_ratio and avg_rho must lie in [0, 1]".into());
        }
        if self.ewc_lambda < 0.0 || self.fisher_batches == 0 {
            return bad("ewc_lambda must be nonnegative and fisher_batches positive".into());
        }
        if self.method == Method::Ewc && self.adapter_rank.is_some() {
            return bad("EWC regularizes base weights and cannot be combined with adapters".into());
        }
        Ok(())
    }

    pub fn adam(&self) -> Adam {
        Adam::new(self.lr, self.beta1, self.beta2, self.eps, self.weight_decay)
    }
}

/// One optimizer step's loss components.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainRecord {
    pub task: String,
    pub step: usize,
    pub lm: f64,
    pub fv: Option<f64>,
    pub kl: Option<f64>,
    pub ewc: Option<f64>,
    pub total: f64,
}

impl TrainRecord {
    pub fn write_jsonl(records: &[TrainRecord], mut w: impl Write) -> Result<()> {
        for r in records {
            serde_json::to_writer(&mut w, r)?;
            w.write_all(b"\n")?;
        }
        Ok(())
    }
}

/// Optional per-task state for the regularized methods.
#[derive(Default)]
pub struct TaskContext<'a> {
    /// FV-guided terms are added when present.
    pub frozen: Option<&'a FrozenReference>,
    pub ewc: Option<&'a EwcState>,
    pub replay: Option<&'a ReplayBuffer>,
    /// Weights of the FV-guided terms, `(α1, α2)`.
    pub alphas: (f64, f64),
}

/// Fine-tunes `model` on the zero-shot train split of `task`.
///
/// Batches follow a per-epoch shuffle of the split; replayed items are drawn
/// from a separate stream, so an empty buffer or ratio 0 leaves the
/// trajectory untouched.
pub fn train_task(
    model: &mut Model,
    task: &TaskSpec,
    vocab: &Vocab,
    cfg: &TrainingConfig,
    ctx: &TaskContext<'_>,
) -> Result<Vec<TrainRecord>> {
    cfg.validate(&model.config)?;
    if task.train.is_empty() {
        return Err(Error::Data(format!("task {} has no training examples", task.id)));
    }
    let mode = cfg.trainable();
    if mode == Trainable::LastAdapter && model.adapters.is_empty() {
        return Err(Error::Contract("adapter training without an adapter".into()));
    }
    let mut adam = cfg.adam();
    let mut order_rng = substream(cfg.seed, &format!("train/{}", task.id));
    let mut replay_rng = substream(cfg.seed, &format!("replay/{}", task.id));
    let n_replay = (cfg.replay_ratio * cfg.batch as f64).round() as usize;
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut log = Vec::new();
    let mut step = 0;
    for _ in 0..cfg.epochs {
        order.shuffle(&mut order_rng);
        for chunk in order.chunks(cfg.batch) {
            let mut items: Vec<(&[usize], &Example)> =
                chunk.iter().map(|&i| (task.instruction.as_slice(), &task.train[i])).collect();
            if let Some(buf) = ctx.replay {
                if n_replay > 0 && !buf.is_empty() {
                    items.extend(buf.sample(n_replay, &mut replay_rng));
                }
            }
            let batch = TrainBatch::zero_shot(vocab, &items)?;
            let mut tape = Tape::new();
            let fwd = lm_loss(&mut tape, model, &batch, mode)?;
            let lm = tape.value(fwd.lm).item();
            let (mut fv, mut kl) = (None, None);
            let total = match ctx.frozen {
                Some(fr) => {
                    let tg = fr.targets(&batch)?;
                    let f = fv_consistency_loss(&mut tape, &fwd, &fr.heads, &tg)?;
                    let k = fv_guided_kl_loss(&mut tape, &fwd, &tg)?;
                    fv = Some(tape.value(f).item());
                    kl = Some(tape.value(k).item());
                    fvg_total_loss(&mut tape, fwd.lm, f, k, ctx.alphas.0, ctx.alphas.1)?
                }
                None => fwd.lm,
            };
            let mut total_v = tape.value(total).item();
            let g = tape.backward(total)?;
            let vars = if mode == Trainable::Full { &fwd.out.param_vars } else { &fwd.out.adapter_vars };
            let mut grads: Vec<Vec<f64>> = vars.iter().map(|&v| g.get(v).map(|x| x.to_vec()).unwrap_or_default()).collect();
            let mut ewc = None;
            if let Some(e) = ctx.ewc {
                let p = e.penalty(model);
                total_v += p;
                ewc = Some(p);
                e.add_gradient(model, &mut grads);
            }
            if !total_v.is_finite() || grads.iter().any(|gv| gv.iter().any(|x| !x.is_finite())) {
                return Err(Error::Divergence { step, detail: format!("task {}: loss {total_v}", task.id) });
            }
            let mut tensors = model.trainable_tensors_mut(mode);
            for (t, gv) in tensors.iter().zip(grads.iter_mut()) {
                if gv.is_empty() {
                    *gv = vec![0.0; t.numel()];
                }
            }
            let mut params: Vec<&mut [f64]> = tensors.iter_mut().map(|t| t.data.as_mut_slice()).collect();
            let grefs: Vec<&[f64]> = grads.iter().map(|x| x.as_slice()).collect();
            adam.step(&mut params, &grefs);
            log.push(TrainRecord { task: task.id.clone(), step, lm, fv, kl, ewc, total: total_v });
            step += 1;
        }
    }
    Ok(log)
}

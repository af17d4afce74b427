//! Function vectors: task-conditioned head means, causal-effect patching,
//! head-set discovery, FV assembly and residual-stream interventions.

mod io;

pub use io::{read_ce_grid_csv, read_function_vector, read_head_set, write_ce_grid_csv, write_function_vector, write_head_set};

use crate::error::{Error, Result};
use crate::eval::{cosine, evaluate_queries, EvalConfig};
use crate::model::{argmax, softmax, HeadIndex, HookSpec, Model, ModelConfig};
use crate::rng::substream;
use crate::tasks::{Example, PromptBundle, TaskSpec, Vocab};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FvConfig {
    pub n_shots: usize,
    pub max_samples: usize,
    pub filter_correct: bool,
    /// Below this surviving fraction the filter is dropped; 0 disables the fallback.
    pub min_keep_fraction: f64,
    pub top_k: usize,
    pub probes_per_task: usize,
    /// First val index used for counterfactual probes.
    pub probe_offset: usize,
    pub batch: usize,
    pub seed: u64,
    /// Rediscover the head set on every checkpoint instead of reusing the base model's.
    pub recompute_heads: bool,
}

impl Default for FvConfig {
    fn default() -> Self {
        FvConfig {
            n_shots: 10,
            max_samples: 200,
            filter_correct: true,
            min_keep_fraction: 0.25,
            top_k: 10,
            probes_per_task: 20,
            probe_offset: 100,
            batch: 40,
            seed: 11,
            recompute_heads: false,
        }
    }
}

/// Mean last-token contribution of every head over n-shot prompts of one task.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TaskActivationMap {
    pub task_id: String,
    pub model_id: String,
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major, one `d`-vector per head.
    pub means: Vec<Vec<f64>>,
    pub sample_count: usize,
    pub filtered: bool,
}

impl TaskActivationMap {
    pub fn get(&self, h: HeadIndex) -> Result<&[f64]> {
        if h.layer >= self.n_layers || h.head >= self.n_heads {
            return Err(Error::Contract(format!("head {h} missing from activation map")));
        }
        Ok(&self.means[h.layer * self.n_heads + h.head])
    }

    /// Mean of per-sample recordings (each layer-major over heads).
    pub fn from_samples(
        task_id: &str,
        model_id: &str,
        cfg: &ModelConfig,
        samples: &[&Vec<Vec<f64>>],
        filtered: bool,
    ) -> Result<Self> {
        if samples.is_empty() {
            return Err(Error::Extraction(format!("task {task_id}: no samples to average")));
        }
        let mut means = vec![vec![0.0; cfg.d_model]; cfg.n_heads_total()];
        for s in samples {
            for (m, v) in means.iter_mut().zip(s.iter()) {
                for (a, b) in m.iter_mut().zip(v) {
                    *a += b;
                }
            }
        }
        let c = samples.len() as f64;
        for m in means.iter_mut() {
            for a in m.iter_mut() {
                *a /= c;
            }
        }
        Ok(TaskActivationMap {
            task_id: task_id.into(),
            model_id: model_id.into(),
            n_layers: cfg.n_layers,
            n_heads: cfg.n_heads,
            means,
            sample_count: samples.len(),
            filtered,
        })
    }
}

/// Averages head recordings over n-shot prompts of `task`.
///
/// With `filter_correct`, only prompts whose first answer token is right are
/// kept; when fewer than `min_keep_fraction` survive, all prompts are used.
pub fn task_conditioned_activations(
    model: &Model,
    model_id: &str,
    task: &TaskSpec,
    vocab: &Vocab,
    cfg: &FvConfig,
) -> Result<TaskActivationMap> {
    let k = cfg.max_samples.min(task.val.len());
    if k == 0 {
        return Err(Error::Extraction(format!("task {}: no val queries", task.id)));
    }
    let mut rng = substream(cfg.seed, &format!("fv-acts/{}", task.id));
    let mut prompts = Vec::with_capacity(k);
    for q in &task.val[..k] {
        prompts.push(PromptBundle::new(task, cfg.n_shots, q.clone(), &mut rng)?.tokens(vocab));
    }
    let mut recs = Vec::with_capacity(k);
    let mut ok = Vec::with_capacity(k);
    for (chunk, qs) in prompts.chunks(cfg.batch.max(1)).zip(task.val[..k].chunks(cfg.batch.max(1))) {
        let (logits, heads) = model.last_logits_and_heads(chunk, &[])?;
        for ((lg, h), q) in logits.iter().zip(heads).zip(qs) {
            ok.push(argmax(lg) == q.y[0]);
            recs.push(h);
        }
    }
    let kept: Vec<&Vec<Vec<f64>>> = recs.iter().zip(&ok).filter(|(_, &c)| c).map(|(r, _)| r).collect();
    let all: Vec<&Vec<Vec<f64>>> = recs.iter().collect();
    let (samples, filtered) = if !cfg.filter_correct {
        (all, false)
    } else if cfg.min_keep_fraction > 0.0 && (kept.len() as f64) < cfg.min_keep_fraction * k as f64 {
        (all, false)
    } else {
        (kept, true)
    };
    if samples.is_empty() {
        return Err(Error::Extraction(format!("task {}: no sample survived the correctness filter", task.id)));
    }
    TaskActivationMap::from_samples(&task.id, model_id, &model.config, &samples, filtered)
}

/// Per-head causal effect, averaged over probes and possibly tasks.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CausalEffectGrid {
    pub n_layers: usize,
    pub n_heads: usize,
    /// Layer-major.
    pub values: Vec<f64>,
    pub probe_count: usize,
    pub tasks: Vec<String>,
}

impl CausalEffectGrid {
    pub fn get(&self, h: HeadIndex) -> f64 {
        self.values[h.layer * self.n_heads + h.head]
    }

    /// Element-wise mean of grids, summed in the given order.
    pub fn average(grids: &[CausalEffectGrid]) -> Result<Self> {
        let first = grids.first().ok_or_else(|| Error::Contract("no grids to average".into()))?;
        let mut values = vec![0.0; first.values.len()];
        let mut tasks = Vec::new();
        let mut probes = 0;
        for g in grids {
            if g.values.len() != values.len() {
                return Err(Error::Dimension("grids of different shape".into()));
            }
            for (a, b) in values.iter_mut().zip(&g.values) {
                *a += b;
            }
            tasks.extend(g.tasks.iter().cloned());
            probes += g.probe_count;
        }
        for a in values.iter_mut() {
            *a /= grids.len() as f64;
        }
        Ok(CausalEffectGrid { n_layers: first.n_layers, n_heads: first.n_heads, values, probe_count: probes, tasks })
    }

    /// Indices of the `k` largest effects; ties broken by `(layer, head)` ascending.
    pub fn top_k(&self, k: usize) -> Result<Vec<HeadIndex>> {
        let total = self.n_layers * self.n_heads;
        if k > total {
            return Err(Error::Config(format!("top_k {k} exceeds {total} heads")));
        }
        let mut idx: Vec<HeadIndex> =
            (0..self.n_layers).flat_map(|l| (0..self.n_heads).map(move |h| HeadIndex::new(l, h))).collect();
        idx.sort_by(|a, b| self.get(*b).total_cmp(&self.get(*a)).then(a.cmp(b)));
        idx.truncate(k);
        Ok(idx)
    }
}

fn target_prob(logits: &[f64], target: usize) -> f64 {
    softmax(logits)[target]
}

/// `P(y | [p̂, x])` with head `head` replaced by `hbar`, minus the unpatched probability.
pub fn causal_effect(model: &Model, vocab: &Vocab, head: HeadIndex, bundle: &PromptBundle, hbar: &[f64]) -> Result<f64> {
    let toks = bundle.shuffled_tokens(vocab);
    let y = bundle.target()[0];
    let base = model.last_logits(&[toks.clone()], &[])?;
    let hook = HookSpec::ReplaceHead { head, payload: hbar.to_vec() };
    let patched = model.last_logits(&[toks], &[hook])?;
    Ok(target_prob(&patched[0], y) - target_prob(&base[0], y))
}

/// Exhaustive grid of causal effects over every head, averaged over `probes`.
pub fn causal_effect_grid(
    model: &Model,
    vocab: &Vocab,
    task: &TaskSpec,
    means: &TaskActivationMap,
    probes: &[PromptBundle],
) -> Result<CausalEffectGrid> {
    if probes.is_empty() {
        return Err(Error::Data(format!("task {}: no probes", task.id)));
    }
    let toks: Vec<Vec<usize>> = probes.iter().map(|b| b.shuffled_tokens(vocab)).collect();
    let ys: Vec<usize> = probes.iter().map(|b| b.target()[0]).collect();
    let base = model.last_logits(&toks, &[])?;
    let pb: Vec<f64> = base.iter().zip(&ys).map(|(l, &y)| target_prob(l, y)).collect();
    let cfg = &model.config;
    let mut values = Vec::with_capacity(cfg.n_heads_total());
    for h in HeadIndex::all(cfg) {
        let hook = HookSpec::ReplaceHead { head: h, payload: means.get(h)?.to_vec() };
        let lg = model.last_logits(&toks, &[hook])?;
        let mut s = 0.0;
        for ((l, &y), p0) in lg.iter().zip(&ys).zip(&pb) {
            s += target_prob(l, y) - p0;
        }
        values.push(s / probes.len() as f64);
    }
    Ok(CausalEffectGrid {
        n_layers: cfg.n_layers,
        n_heads: cfg.n_heads,
        values,
        probe_count: probes.len(),
        tasks: vec![task.id.clone()],
    })
}

/// Counterfactual probes: val queries from `probe_offset`, heldout demonstrations.
pub fn probe_bundles(task: &TaskSpec, cfg: &FvConfig) -> Result<Vec<PromptBundle>> {
    let end = (cfg.probe_offset + cfg.probes_per_task).min(task.val.len());
    if cfg.probe_offset >= end {
        return Err(Error::Data(format!("task {}: val split too small for probes", task.id)));
    }
    let mut rng = substream(cfg.seed, &format!("probes/{}", task.id));
    task.val[cfg.probe_offset..end].iter().map(|q| PromptBundle::new(task, cfg.n_shots, q.clone(), &mut rng)).collect()
}

/// The causal head set `S` and where it came from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionVectorHeadSet {
    pub heads: Vec<HeadIndex>,
    pub tasks: Vec<String>,
    pub model_id: String,
}

/// Averages per-task causal-effect grids over `tasks` and keeps the `top_k` heads.
pub fn get_function_vector_head_set(
    model: &Model,
    model_id: &str,
    vocab: &Vocab,
    tasks: &[TaskSpec],
    cfg: &FvConfig,
) -> Result<(FunctionVectorHeadSet, CausalEffectGrid)> {
    if tasks.is_empty() {
        return Err(Error::Config("head discovery needs at least one held-out task".into()));
    }
    if cfg.top_k > model.config.n_heads_total() {
        return Err(Error::Config(format!("top_k {} exceeds {} heads", cfg.top_k, model.config.n_heads_total())));
    }
    let mut grids = Vec::with_capacity(tasks.len());
    for t in tasks {
        let means = task_conditioned_activations(model, model_id, t, vocab, cfg)?;
        let probes = probe_bundles(t, cfg)?;
        grids.push(causal_effect_grid(model, vocab, t, &means, &probes)?);
    }
    let grid = CausalEffectGrid::average(&grids)?;
    let heads = grid.top_k(cfg.top_k)?;
    Ok((FunctionVectorHeadSet { heads, tasks: tasks.iter().map(|t| t.id.clone()).collect(), model_id: model_id.into() }, grid))
}

/// `θ = Σ_{(l,k)∈S} h̄_lk`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FunctionVector {
    pub theta: Vec<f64>,
    pub head_set: FunctionVectorHeadSet,
    pub task_id: String,
    pub model_id: String,
}

pub fn assemble_fv(map: &TaskActivationMap, s: &FunctionVectorHeadSet) -> Result<FunctionVector> {
    let d = map.means.first().map(|m| m.len()).unwrap_or(0);
    let mut theta = vec![0.0; d];
    for &h in &s.heads {
        for (a, b) in theta.iter_mut().zip(map.get(h)?) {
            *a += b;
        }
    }
    Ok(FunctionVector { theta, head_set: s.clone(), task_id: map.task_id.clone(), model_id: map.model_id.clone() })
}

/// Extracts the FV of `task` from `model` using head set `s`.
pub fn extract_fv(
    model: &Model,
    model_id: &str,
    task: &TaskSpec,
    vocab: &Vocab,
    s: &FunctionVectorHeadSet,
    cfg: &FvConfig,
) -> Result<(FunctionVector, TaskActivationMap)> {
    let map = task_conditioned_activations(model, model_id, task, vocab, cfg)?;
    Ok((assemble_fv(&map, s)?, map))
}

/// Cosine similarity of two function vectors.
pub fn fv_similarity(a: &FunctionVector, b: &FunctionVector) -> Result<f64> {
    cosine(&a.theta, &b.theta)
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum InterventionMode {
    Add,
    Subtract,
}

/// Hook that applies `h_l <- h_l ± θ` at the final position of every forward.
pub fn intervention_hook(theta: &[f64], layer: usize, mode: InterventionMode) -> HookSpec {
    match mode {
        InterventionMode::Add => HookSpec::AddAtLayer { layer, payload: theta.to_vec() },
        InterventionMode::Subtract => HookSpec::SubtractAtLayer { layer, payload: theta.to_vec() },
    }
}

pub fn intervene_add(model: &Model, theta: &[f64], layer: usize) -> Result<Vec<HookSpec>> {
    let h = intervention_hook(theta, layer, InterventionMode::Add);
    h.validate(&model.config)?;
    Ok(vec![h])
}

pub fn intervene_subtract(model: &Model, theta: &[f64], layer: usize) -> Result<Vec<HookSpec>> {
    let h = intervention_hook(theta, layer, InterventionMode::Subtract);
    h.validate(&model.config)?;
    Ok(vec![h])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LayerScore {
    pub layer: usize,
    /// Score on the selection queries, used to pick the best layer.
    pub selection: f64,
    /// Score on the val split.
    pub val: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    pub task_id: String,
    pub mode: InterventionMode,
    pub plain_selection: f64,
    pub plain_val: f64,
    pub layers: Vec<LayerScore>,
    pub best_layer: usize,
    pub best_val: f64,
}

/// Zero-shot scores under `θ` at each layer. The best layer is picked on
/// heldout queries (ties to the lowest layer) and reported on val.
pub fn layer_sweep(
    model: &Model,
    task: &TaskSpec,
    vocab: &Vocab,
    theta: &[f64],
    mode: InterventionMode,
    layers: &[usize],
    n_shots: usize,
    eval: &EvalConfig,
) -> Result<SweepResult> {
    if layers.is_empty() {
        return Err(Error::Config("empty layer sweep".into()));
    }
    let k = eval.max_queries.min(task.val.len());
    let sel: &[Example] = &task.heldout[..eval.max_queries.min(task.heldout.len())];
    let val = &task.val[..k];
    let plain_selection = evaluate_queries(model, task, vocab, sel, n_shots, &[], eval)?;
    let plain_val = evaluate_queries(model, task, vocab, val, n_shots, &[], eval)?;
    let mut out = Vec::with_capacity(layers.len());
    for &l in layers {
        let hooks = vec![intervention_hook(theta, l, mode)];
        hooks[0].validate(&model.config)?;
        out.push(LayerScore {
            layer: l,
            selection: evaluate_queries(model, task, vocab, sel, n_shots, &hooks, eval)?,
            val: evaluate_queries(model, task, vocab, val, n_shots, &hooks, eval)?,
        });
    }
    let best = out.iter().fold(&out[0], |b, s| if s.selection > b.selection { s } else { b }).clone();
    Ok(SweepResult {
        task_id: task.id.clone(),
        mode,
        plain_selection,
        plain_val,
        layers: out,
        best_layer: best.layer,
        best_val: best.val,
    })
}

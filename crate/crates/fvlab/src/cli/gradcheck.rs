//! Gradient verification of the tape primitives and the full training losses.

use crate::cltrain::{
    fv_consistency_loss, fv_guided_kl_loss, fvg_total_loss, lm_loss, FrozenReference, FrozenTargets, TrainBatch,
};
use crate::diffcore::{grad_check_with, op_suite, GradCheckReport, Tape, Var};
use crate::error::{Error, Result};
use crate::model::{HeadIndex, Model, ModelConfig, Trainable};
use crate::rng::substream;
use crate::tasks::{Example, Vocab};
use rand::seq::index::sample;
use rand::Rng;
use serde::Serialize;

#[derive(Clone, Copy, Debug, PartialEq, Serialize)]
pub struct GradCheckSettings {
    pub eps: f64,
    pub tol: f64,
    pub coords: usize,
    pub seed: u64,
}

impl Default for GradCheckSettings {
    fn default() -> Self {
        GradCheckSettings { eps: 1e-5, tol: 1e-4, coords: 64, seed: 7 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct GradCheckLine {
    pub name: String,
    pub checked: usize,
    pub max_rel_err: f64,
    pub passed: bool,
}

impl GradCheckLine {
    fn new(name: String, r: &GradCheckReport) -> Self {
        GradCheckLine { name, checked: r.checked, max_rel_err: r.max_rel_err, passed: r.passed }
    }
}

/// A two-layer model with its weights pushed away from the initialization,
/// so no gradient is trivially zero.
pub fn toy_model(seed: u64) -> Result<Model> {
    let cfg = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_head: 4, d_mlp: 16, vocab: 128, max_seq: 16, seed };
    let mut m = Model::new(cfg)?;
    let mut r = substream(seed, "grad-check/perturb");
    for t in m.params.tensors.iter_mut() {
        for x in t.data.iter_mut() {
            *x += r.gen_range(-0.3..0.3);
        }
    }
    Ok(m)
}

fn toy_batch(vocab: &Vocab) -> Result<TrainBatch> {
    let ex = [
        Example { x: vec![20, 21], y: vec![30] },
        Example { x: vec![25, 22], y: vec![40, 41] },
        Example { x: vec![31, 44], y: vec![17] },
    ];
    let items: Vec<(&[usize], &Example)> = ex.iter().map(|e| (&[2usize][..], e)).collect();
    TrainBatch::zero_shot(vocab, &items)
}

fn with_params(m: &Model, x: &[f64]) -> Model {
    let mut mm = m.clone();
    let mut o = 0;
    for t in mm.params.tensors.iter_mut() {
        let n = t.numel();
        t.data.copy_from_slice(&x[o..o + n]);
        o += n;
    }
    mm
}

/// Checks the gradient of a scalar loss w.r.t. every base parameter of `model`.
///
/// `loss` builds the loss on the tape and returns it with the parameter vars.
pub fn check_model_loss(
    model: &Model,
    loss: impl Fn(&mut Tape, &Model, Trainable) -> Result<(Var, Vec<Var>)>,
    s: &GradCheckSettings,
) -> Result<GradCheckReport> {
    let mut tape = Tape::new();
    let (l, vars) = loss(&mut tape, model, Trainable::Full)?;
    let g = tape.backward(l)?;
    let grad: Vec<f64> = vars
        .iter()
        .zip(&model.params.tensors)
        .flat_map(|(&v, t)| g.get(v).map(|x| x.to_vec()).unwrap_or_else(|| vec![0.0; t.numel()]))
        .collect();
    let x0 = model.flat_params();
    if grad.len() != x0.len() {
        return Err(Error::Contract("loss did not expose every base parameter".into()));
    }
    let value = |x: &[f64]| -> Result<f64> {
        let mm = with_params(model, x);
        let mut t = Tape::new();
        let (l, _) = loss(&mut t, &mm, Trainable::None)?;
        Ok(t.value(l).item())
    };
    let mut rng = substream(s.seed, "grad-check/coords");
    let coords = sample(&mut rng, x0.len(), s.coords.min(x0.len())).into_vec();
    grad_check_with(value, &grad, &x0, &coords, s.eps, s.tol)
}

/// LM loss and composite FVG loss gradient checks on the toy model.
pub fn loss_suite(s: &GradCheckSettings) -> Result<Vec<GradCheckLine>> {
    let vocab = Vocab::default();
    let model = toy_model(s.seed)?;
    let batch = toy_batch(&vocab)?;
    let lm = check_model_loss(
        &model,
        |t, m, tr| {
            let f = lm_loss(t, m, &batch, tr)?;
            Ok((f.lm, f.out.param_vars))
        },
        s,
    )?;

    // The frozen side is a different model so the consistency term is nonzero.
    let frozen_model = toy_model(s.seed + 1)?;
    let mut r = substream(s.seed, "grad-check/theta");
    let theta: Vec<f64> = (0..frozen_model.config.d_model).map(|_| r.gen_range(-1.0..1.0)).collect();
    let heads = vec![HeadIndex::new(0, 1), HeadIndex::new(1, 0)];
    let frozen = FrozenReference::new(frozen_model, theta, heads.clone(), 1)?;
    let targets: FrozenTargets = frozen.targets(&batch)?;
    let fvg = check_model_loss(
        &model,
        |t, m, tr| {
            let f = lm_loss(t, m, &batch, tr)?;
            let fv = fv_consistency_loss(t, &f, &heads, &targets)?;
            let kl = fv_guided_kl_loss(t, &f, &targets)?;
            let total = fvg_total_loss(t, f.lm, fv, kl, 1.0, 0.08)?;
            Ok((total, f.out.param_vars))
        },
        s,
    )?;
    Ok(vec![GradCheckLine::new("loss/lm".into(), &lm), GradCheckLine::new("loss/fvg_total".into(), &fvg)])
}

/// Every primitive plus the training losses.
pub fn full_suite(s: &GradCheckSettings) -> Result<Vec<GradCheckLine>> {
    let mut rng = substream(s.seed, "grad-check/ops");
    let mut out: Vec<GradCheckLine> = op_suite(s.eps, s.tol, s.coords, &mut rng)?
        .into_iter()
        .map(|(n, r)| GradCheckLine::new(format!("op/{n}"), &r))
        .collect();
    out.extend(loss_suite(s)?);
    Ok(out)
}

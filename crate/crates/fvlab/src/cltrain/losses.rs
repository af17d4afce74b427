use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};
use crate::model::{checkpoint_hash, log_softmax, ForwardOutput, HeadIndex, HookSpec, LogitRows, Model, Trainable};
use crate::tasks::{lm_sequence, Example, Vocab};

/// Zero-shot training items `instruction x -> y EOS`, packed for one forward.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainBatch {
    pub seqs: Vec<Vec<usize>>,
    /// Per sequence `(position, token)` targets; position is the predicting row.
    pub targets: Vec<Vec<(usize, usize)>>,
    /// Position of each sequence's last input token (the arrow).
    pub query_pos: Vec<usize>,
}

impl TrainBatch {
    pub fn zero_shot(vocab: &Vocab, items: &[(&[usize], &Example)]) -> Result<Self> {
        if items.is_empty() {
            return Err(Error::Contract("empty training batch".into()));
        }
        let mut b = TrainBatch { seqs: Vec::new(), targets: Vec::new(), query_pos: Vec::new() };
        for (instr, ex) in items {
            let (toks, tg) = lm_sequence(vocab, instr, &[ex]);
            b.query_pos.push(tg[0].0);
            b.seqs.push(toks);
            b.targets.push(tg);
        }
        Ok(b)
    }

    pub fn len(&self) -> usize {
        self.seqs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.seqs.is_empty()
    }

    /// Tokens up to and including the arrow of every sequence.
    pub fn prompts(&self) -> Vec<Vec<usize>> {
        self.seqs.iter().zip(&self.query_pos).map(|(s, &q)| s[..=q].to_vec()).collect()
    }
}

/// A training forward with handles for every loss term.
pub struct BatchForward {
    pub out: ForwardOutput,
    /// Mean cross-entropy over output tokens.
    pub lm: Var,
    /// Packed rows of each arrow position.
    pub query_rows: Vec<usize>,
    /// Logits at each arrow position, `[B, V]`.
    pub first_logits: Var,
}

/// `l_LM`: mean next-token cross-entropy on output tokens only.
pub fn lm_loss(tape: &mut Tape, model: &Model, batch: &TrainBatch, trainable: Trainable) -> Result<BatchForward> {
    if batch.is_empty() {
        return Err(Error::Contract("lm_loss on an empty batch".into()));
    }
    let mut rows = Vec::new();
    let mut ce = Vec::new();
    let mut first = Vec::with_capacity(batch.len());
    let mut off = 0;
    for (s, tg) in batch.seqs.iter().zip(&batch.targets) {
        if tg.is_empty() {
            return Err(Error::Contract("training sequence without output tokens".into()));
        }
        first.push(rows.len());
        for &(p, t) in tg {
            ce.push((rows.len(), t));
            rows.push(off + p);
        }
        off += s.len();
    }
    let out = model.forward(tape, &batch.seqs, &[], trainable, LogitRows::Rows(rows))?;
    let lm = tape.cross_entropy(out.logits, &ce)?;
    let first_logits = tape.rows(out.logits, &first)?;
    let query_rows = out.offsets.iter().zip(&batch.query_pos).map(|(o, q)| o + q).collect();
    Ok(BatchForward { out, lm, query_rows, first_logits })
}

/// `M_{j-1}` and what FV-guided training needs from it.
#[derive(Clone, Debug)]
pub struct FrozenReference {
    pub model: Model,
    /// `θ` injected into the teacher for the KL term.
    pub theta: Vec<f64>,
    pub heads: Vec<HeadIndex>,
    pub kl_layer: usize,
    /// Checkpoint hash taken at construction.
    pub checksum: String,
}

/// Gradient-free readouts of the frozen model on one batch.
#[derive(Clone, Debug)]
pub struct FrozenTargets {
    /// `[s][b]` contribution of head `s` of `S` at the arrow of sequence `b`.
    pub heads: Vec<Vec<Vec<f64>>>,
    /// Teacher log-probabilities at the arrow, `[B, V]`.
    pub logq: Tensor,
}

impl FrozenReference {
    pub fn new(model: Model, theta: Vec<f64>, heads: Vec<HeadIndex>, kl_layer: usize) -> Result<Self> {
        for h in &heads {
            h.check(&model.config)?;
        }
        HookSpec::AddAtLayer { layer: kl_layer, payload: theta.clone() }.validate(&model.config)?;
        let checksum = checkpoint_hash(&model)?;
        Ok(FrozenReference { model, theta, heads, kl_layer, checksum })
    }

    /// Whether the snapshot still hashes to its construction-time checksum.
    pub fn is_pristine(&self) -> Result<bool> {
        Ok(checkpoint_hash(&self.model)? == self.checksum)
    }

    pub fn targets(&self, batch: &TrainBatch) -> Result<FrozenTargets> {
        let prompts = batch.prompts();
        let h = self.model.config.n_heads;
        let (_, rec) = self.model.last_logits_and_heads(&prompts, &[])?;
        let heads = self
            .heads
            .iter()
            .map(|hi| rec.iter().map(|r| r[hi.layer * h + hi.head].clone()).collect())
            .collect();
        let hook = HookSpec::AddAtLayer { layer: self.kl_layer, payload: self.theta.clone() };
        let lg = self.model.last_logits(&prompts, &[hook])?;
        let v = self.model.config.vocab;
        let data: Vec<f64> = lg.iter().flat_map(|r| log_softmax(r)).collect();
        Ok(FrozenTargets { heads, logq: Tensor::new(vec![prompts.len(), v], data)? })
    }
}

/// `l_FV`: summed over `S`, squared L2 between current and frozen head
/// contributions at the last input token, averaged over the batch.
pub fn fv_consistency_loss(
    tape: &mut Tape,
    fwd: &BatchForward,
    heads: &[HeadIndex],
    frozen: &FrozenTargets,
) -> Result<Var> {
    if heads.is_empty() {
        return Err(Error::Contract("empty head set".into()));
    }
    if frozen.heads.len() != heads.len() {
        return Err(Error::Dimension("frozen readouts do not match the head set".into()));
    }
    let b = fwd.query_rows.len();
    let mut total: Option<Var> = None;
    for (hi, target) in heads.iter().zip(&frozen.heads) {
        let cur = tape.rows(fwd.out.heads[hi.layer][hi.head], &fwd.query_rows)?;
        let d = tape.shape(cur)[1];
        let t = tape.constant(Tensor::new(vec![b, d], target.concat())?);
        let diff = tape.sub(cur, t)?;
        let ss = tape.sum_squares(diff);
        total = Some(match total {
            Some(acc) => tape.add(acc, ss)?,
            None => ss,
        });
    }
    let total = total.expect("nonempty head set");
    Ok(tape.scale(total, 1.0 / b as f64))
}

/// `l_KL = KL(P_M || P_teacher)` at the answer's first position, batch-averaged.
pub fn fv_guided_kl_loss(tape: &mut Tape, fwd: &BatchForward, frozen: &FrozenTargets) -> Result<Var> {
    tape.kl_div(fwd.first_logits, &frozen.logq)
}

/// `l = l_LM + α1 l_FV + α2 l_KL`.
pub fn fvg_total_loss(tape: &mut Tape, lm: Var, fv: Var, kl: Var, alpha1: f64, alpha2: f64) -> Result<Var> {
    let a = tape.scale(fv, alpha1);
    let b = tape.scale(kl, alpha2);
    let t = tape.add(lm, a)?;
    tape.add(t, b)
}

use super::config::HeadIndex;
use super::hooks::HookSpec;
use super::Model;
use crate::diffcore::{Tape, Tensor, Var};
use crate::error::{Error, Result};

/// Which parameters become differentiable leaves.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Trainable {
    None,
    Full,
    /// Only the newest adapter; base weights and older adapters are constants.
    LastAdapter,
}

/// Rows of the packed batch at which logits are produced.
#[derive(Clone, Debug, PartialEq, Eq)]
pub enum LogitRows {
    Last,
    All,
    Rows(Vec<usize>),
}

/// Handles and readouts of one packed forward pass.
pub struct ForwardOutput {
    /// `[rows, V]` logits for the requested rows.
    pub logits: Var,
    /// Packed row of each sequence's first token.
    pub offsets: Vec<usize>,
    /// Packed row of each sequence's final token.
    pub last_rows: Vec<usize>,
    /// `[layer][head]` residual-space head contributions over all packed rows.
    pub heads: Vec<Vec<Var>>,
    /// `[layer]` summed attention output over all packed rows.
    pub attn_out: Vec<Var>,
    /// Residual stream after the last block, before the final norm.
    pub resid_final: Var,
    /// Values of `Record` hooks: one vector per sequence.
    pub recorded: Vec<(HeadIndex, Vec<Vec<f64>>)>,
    /// Base parameter leaves in store order.
    pub param_vars: Vec<Var>,
    /// Leaves of the newest adapter, in [`super::LowRankAdapter::tensors`] order.
    pub adapter_vars: Vec<Var>,
}

fn row_payload(n: usize, d: usize, rows: &[usize], payload: &[f64], sign: f64) -> Tensor {
    let mut t = Tensor::zeros(&[n, d]);
    for &r in rows {
        for j in 0..d {
            t.data[r * d + j] = sign * payload[j];
        }
    }
    t
}

impl Model {
    /// Causal forward over a batch of token sequences packed row-wise.
    pub fn forward(
        &self,
        tape: &mut Tape,
        seqs: &[Vec<usize>],
        hooks: &[HookSpec],
        trainable: Trainable,
        logit_rows: LogitRows,
    ) -> Result<ForwardOutput> {
        let cfg = &self.config;
        if seqs.is_empty() {
            return Err(Error::Contract("forward on an empty batch".into()));
        }
        for h in hooks {
            h.validate(cfg)?;
        }
        let (d, dh) = (cfg.d_model, cfg.d_head);
        let mut ids = Vec::new();
        let mut pos = Vec::new();
        let mut offsets = Vec::with_capacity(seqs.len());
        let mut last_rows = Vec::with_capacity(seqs.len());
        for s in seqs {
            if s.is_empty() {
                return Err(Error::Contract("empty token sequence".into()));
            }
            if s.len() > cfg.max_seq {
                return Err(Error::Contract(format!("sequence length {} exceeds max_seq {}", s.len(), cfg.max_seq)));
            }
            offsets.push(ids.len());
            ids.extend_from_slice(s);
            pos.extend(0..s.len());
            last_rows.push(ids.len() - 1);
        }
        let n = ids.len();

        let base_grad = trainable == Trainable::Full;
        let param_vars: Vec<Var> = self
            .params
            .tensors
            .iter()
            .map(|t| if base_grad { tape.param(t.clone()) } else { tape.constant(t.clone()) })
            .collect();
        let n_ad = self.adapters.len();
        let mut adapter_leaves: Vec<Vec<Var>> = Vec::with_capacity(n_ad);
        for (i, a) in self.adapters.iter().enumerate() {
            let grad = trainable == Trainable::LastAdapter && i + 1 == n_ad;
            adapter_leaves.push(
                a.tensors().into_iter().map(|t| if grad { tape.param(t.clone()) } else { tape.constant(t.clone()) }).collect(),
            );
        }
        let lay = &self.layout;
        let pv = |i: usize| param_vars[i];

        let te = tape.embedding(pv(lay.tok), &ids)?;
        let pe = tape.embedding(pv(lay.pos), &pos)?;
        let mut x = tape.add(te, pe)?;

        let scale = 1.0 / (dh as f64).sqrt();
        let mut heads_all = Vec::with_capacity(cfg.n_layers);
        let mut attn_all = Vec::with_capacity(cfg.n_layers);
        let mut recorded = Vec::new();
        for (l, li) in lay.layers.iter().enumerate() {
            let h = tape.layer_norm(x, pv(li.ln1_g), pv(li.ln1_b))?;
            let mut q = tape.matmul(h, pv(li.wq))?;
            let k = tape.matmul(h, pv(li.wk))?;
            let mut v = tape.matmul(h, pv(li.wv))?;
            for leaves in &adapter_leaves {
                let (qa, qb, va, vb) = (leaves[4 * l], leaves[4 * l + 1], leaves[4 * l + 2], leaves[4 * l + 3]);
                let t = tape.matmul(h, qa)?;
                let t = tape.matmul(t, qb)?;
                q = tape.add(q, t)?;
                let t = tape.matmul(h, va)?;
                let t = tape.matmul(t, vb)?;
                v = tape.add(v, t)?;
            }
            let mut contribs = Vec::with_capacity(cfg.n_heads);
            for hk in 0..cfg.n_heads {
                let cols = hk * dh..(hk + 1) * dh;
                let mut parts = Vec::with_capacity(seqs.len());
                for (b, s) in seqs.iter().enumerate() {
                    let rows = offsets[b]..offsets[b] + s.len();
                    let qs = tape.slice(q, rows.clone(), cols.clone())?;
                    let ks = tape.slice(k, rows.clone(), cols.clone())?;
                    let vs = tape.slice(v, rows, cols.clone())?;
                    let kt = tape.transpose(ks)?;
                    let sc = tape.matmul(qs, kt)?;
                    let sc = tape.scale(sc, scale);
                    let p = tape.causal_softmax(sc)?;
                    parts.push(tape.matmul(p, vs)?);
                }
                let o = if parts.len() == 1 { parts[0] } else { tape.concat(&parts)? };
                contribs.push(tape.matmul(o, pv(li.wo[hk]))?);
            }
            for hook in hooks {
                if let HookSpec::Record(hi) = hook {
                    if hi.layer == l {
                        let data = tape.data(contribs[hi.head]);
                        let vals = last_rows.iter().map(|&r| data[r * d..(r + 1) * d].to_vec()).collect();
                        recorded.push((*hi, vals));
                    }
                }
            }
            let mut attn = contribs[0];
            for &c in &contribs[1..] {
                attn = tape.add(attn, c)?;
            }
            for hook in hooks {
                if let HookSpec::ReplaceHead { head, payload } = hook {
                    if head.layer == l {
                        let mask = tape.constant(row_payload(n, d, &last_rows, &vec![1.0; d], 1.0));
                        let own = tape.mul(contribs[head.head], mask)?;
                        attn = tape.sub(attn, own)?;
                        let p = tape.constant(row_payload(n, d, &last_rows, payload, 1.0));
                        attn = tape.add(attn, p)?;
                    }
                }
            }
            x = tape.add(x, attn)?;
            let h2 = tape.layer_norm(x, pv(li.ln2_g), pv(li.ln2_b))?;
            let m = tape.matmul(h2, pv(li.w1))?;
            let m = tape.add(m, pv(li.b1))?;
            let m = tape.gelu(m);
            let m = tape.matmul(m, pv(li.w2))?;
            let m = tape.add(m, pv(li.b2))?;
            x = tape.add(x, m)?;
            for hook in hooks {
                let (layer, payload, sign) = match hook {
                    HookSpec::AddAtLayer { layer, payload } => (*layer, payload, 1.0),
                    HookSpec::SubtractAtLayer { layer, payload } => (*layer, payload, -1.0),
                    _ => continue,
                };
                if layer == l {
                    let p = tape.constant(row_payload(n, d, &last_rows, payload, sign));
                    x = tape.add(x, p)?;
                }
            }
            heads_all.push(contribs);
            attn_all.push(attn);
        }
        let sel = match logit_rows {
            LogitRows::All => x,
            LogitRows::Last => tape.rows(x, &last_rows)?,
            LogitRows::Rows(r) => tape.rows(x, &r)?,
        };
        let hf = tape.layer_norm(sel, pv(lay.lnf_g), pv(lay.lnf_b))?;
        let logits = tape.matmul(hf, pv(lay.unembed))?;
        let adapter_vars = if trainable == Trainable::LastAdapter {
            adapter_leaves.pop().ok_or_else(|| Error::Contract("no adapter to train".into()))?
        } else {
            Vec::new()
        };
        Ok(ForwardOutput {
            logits,
            offsets,
            last_rows,
            heads: heads_all,
            attn_out: attn_all,
            resid_final: x,
            recorded,
            param_vars,
            adapter_vars,
        })
    }
}

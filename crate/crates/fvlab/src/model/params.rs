use super::config::ModelConfig;
use crate::diffcore::Tensor;
use crate::rng::substream;
use rand_distr::{Distribution, Normal};

pub const INIT_STD: f64 = 0.02;

/// Indices of one block's parameters inside a [`ParamStore`].
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct LayerIdx {
    pub ln1_g: usize,
    pub ln1_b: usize,
    pub wq: usize,
    pub wk: usize,
    pub wv: usize,
    /// One `d_head x d_model` block of the output projection per head.
    pub wo: Vec<usize>,
    pub ln2_g: usize,
    pub ln2_b: usize,
    pub w1: usize,
    pub b1: usize,
    pub w2: usize,
    pub b2: usize,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Layout {
    pub tok: usize,
    pub pos: usize,
    pub layers: Vec<LayerIdx>,
    pub lnf_g: usize,
    pub lnf_b: usize,
    pub unembed: usize,
}

/// Named parameter tensors in a fixed order.
#[derive(Clone, Debug, PartialEq)]
pub struct ParamStore {
    pub names: Vec<String>,
    pub tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.tensors.iter().map(|t| t.numel()).sum()
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.names.iter().position(|n| n == name)
    }
}

/// Parameter names and shapes for `cfg`, in storage order.
pub fn param_specs(cfg: &ModelConfig) -> Vec<(String, Vec<usize>)> {
    let (d, v, dm, dh) = (cfg.d_model, cfg.vocab, cfg.d_mlp, cfg.d_head);
    let mut s = vec![("tok_emb".to_string(), vec![v, d]), ("pos_emb".to_string(), vec![cfg.max_seq, d])];
    for l in 0..cfg.n_layers {
        let p = format!("layers.{l}");
        s.push((format!("{p}.ln1.gamma"), vec![d]));
        s.push((format!("{p}.ln1.beta"), vec![d]));
        s.push((format!("{p}.attn.wq"), vec![d, d]));
        s.push((format!("{p}.attn.wk"), vec![d, d]));
        s.push((format!("{p}.attn.wv"), vec![d, d]));
        for k in 0..cfg.n_heads {
            s.push((format!("{p}.attn.wo.{k}"), vec![dh, d]));
        }
        s.push((format!("{p}.ln2.gamma"), vec![d]));
        s.push((format!("{p}.ln2.beta"), vec![d]));
        s.push((format!("{p}.mlp.w1"), vec![d, dm]));
        s.push((format!("{p}.mlp.b1"), vec![dm]));
        s.push((format!("{p}.mlp.w2"), vec![dm, d]));
        s.push((format!("{p}.mlp.b2"), vec![d]));
    }
    s.push(("lnf.gamma".to_string(), vec![d]));
    s.push(("lnf.beta".to_string(), vec![d]));
    s.push(("unembed".to_string(), vec![d, v]));
    s
}

pub fn layout(cfg: &ModelConfig) -> Layout {
    let mut i = 2;
    let mut layers = Vec::with_capacity(cfg.n_layers);
    for _ in 0..cfg.n_layers {
        let wo: Vec<usize> = (0..cfg.n_heads).map(|k| i + 5 + k).collect();
        let b = i + 5 + cfg.n_heads;
        layers.push(LayerIdx {
            ln1_g: i,
            ln1_b: i + 1,
            wq: i + 2,
            wk: i + 3,
            wv: i + 4,
            wo,
            ln2_g: b,
            ln2_b: b + 1,
            w1: b + 2,
            b1: b + 3,
            w2: b + 4,
            b2: b + 5,
        });
        i = b + 6;
    }
    Layout { tok: 0, pos: 1, layers, lnf_g: i, lnf_b: i + 1, unembed: i + 2 }
}

/// Gaussian init for matrices, unit gains, zero biases.
pub fn init_params(cfg: &ModelConfig) -> ParamStore {
    let mut rng = substream(cfg.seed, "init");
    let normal = Normal::new(0.0, INIT_STD).expect("valid std");
    let mut names = Vec::new();
    let mut tensors = Vec::new();
    for (name, shape) in param_specs(cfg) {
        let n: usize = shape.iter().product();
        let data = if name.ends_with("gamma") {
            vec![1.0; n]
        } else if shape.len() == 1 {
            vec![0.0; n]
        } else {
            (0..n).map(|_| normal.sample(&mut rng)).collect()
        };
        names.push(name);
        tensors.push(Tensor { shape, data, requires_grad: false });
    }
    ParamStore { names, tensors }
}

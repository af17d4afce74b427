use crate::diffcore::Tensor;
use crate::error::{Error, Result};
use rand::Rng;
use rand_distr::{Distribution, Normal};

/// Low-rank update pair for one projection: effective weight `W + A·B`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankPair {
    pub a: Tensor,
    pub b: Tensor,
}

/// Query and value adapters for every layer of one task.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRankAdapter {
    pub rank: usize,
    pub q: Vec<LowRankPair>,
    pub v: Vec<LowRankPair>,
}

impl LowRankAdapter {
    /// `A` Gaussian with std `1/sqrt(d)`, `B` zero, so a fresh adapter is the identity edit.
    pub fn fresh<R: Rng>(n_layers: usize, d: usize, rank: usize, rng: &mut R) -> Result<Self> {
        if rank == 0 || rank > d {
            return Err(Error::Config(format!("adapter rank {rank} must be in 1..={d}")));
        }
        let normal = Normal::new(0.0, 1.0 / (d as f64).sqrt()).expect("valid std");
        let pair = |rng: &mut R| LowRankPair {
            a: Tensor { shape: vec![d, rank], data: (0..d * rank).map(|_| normal.sample(rng)).collect(), requires_grad: false },
            b: Tensor::zeros(&[rank, d]),
        };
        let q = (0..n_layers).map(|_| pair(rng)).collect();
        let v = (0..n_layers).map(|_| pair(rng)).collect();
        Ok(LowRankAdapter { rank, q, v })
    }

    /// Tensors in a fixed order: per layer `q.a, q.b, v.a, v.b`.
    pub fn tensors(&self) -> Vec<&Tensor> {
        let mut out = Vec::new();
        for (q, v) in self.q.iter().zip(&self.v) {
            out.extend([&q.a, &q.b, &v.a, &v.b]);
        }
        out
    }

    pub fn tensors_mut(&mut self) -> Vec<&mut Tensor> {
        let mut out = Vec::new();
        for (q, v) in self.q.iter_mut().zip(self.v.iter_mut()) {
            out.push(&mut q.a);
            out.push(&mut q.b);
            out.push(&mut v.a);
            out.push(&mut v.b);
        }
        out
    }

    pub fn names(&self, index: usize) -> Vec<String> {
        let mut out = Vec::new();
        for l in 0..self.q.len() {
            for s in ["q.a", "q.b", "v.a", "v.b"] {
                out.push(format!("adapter.{index}.layers.{l}.{s}"));
            }
        }
        out
    }
}

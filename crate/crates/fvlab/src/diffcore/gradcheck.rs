//! Central-difference verification of analytic gradients.

use super::tape::{Tape, Var};
use super::tensor::Tensor;
use crate::error::{Error, Result};
use rand::seq::index::sample;
use rand::Rng;

/// Outcome of a coordinate-wise gradient comparison.
#[derive(Clone, Debug)]
pub struct GradCheckReport {
    pub checked: usize,
    pub max_rel_err: f64,
    pub worst_index: usize,
    pub tol: f64,
    pub passed: bool,
}

/// Denominator floor for the relative error, so vanishing gradients compare absolutely.
pub const REL_FLOOR: f64 = 1e-8;

pub fn rel_err(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_FLOOR)
}

/// Compares `grad` against central differences of `value` at `coords` of `x`.
pub fn grad_check_with(
    value: impl Fn(&[f64]) -> Result<f64>,
    grad: &[f64],
    x: &[f64],
    coords: &[usize],
    eps: f64,
    tol: f64,
) -> Result<GradCheckReport> {
    let mut xp = x.to_vec();
    let mut worst = 0.0;
    let mut worst_index = 0;
    for &i in coords {
        let orig = xp[i];
        xp[i] = orig + eps;
        let fp = value(&xp)?;
        xp[i] = orig - eps;
        let fm = value(&xp)?;
        xp[i] = orig;
        let num = (fp - fm) / (2.0 * eps);
        let ana = grad[i];
        if !num.is_finite() || !ana.is_finite() {
            return Err(Error::Numeric(format!("non-finite gradient at coordinate {i}")));
        }
        let e = rel_err(ana, num);
        if e > worst {
            worst = e;
            worst_index = i;
        }
    }
    Ok(GradCheckReport { checked: coords.len(), max_rel_err: worst, worst_index, tol, passed: worst < tol })
}

/// Checks the tape gradient of a scalar function `f` at `x`.
///
/// `max_coords` coordinates are sampled without replacement (all of them when `x` is smaller).
pub fn grad_check<F, R>(f: F, x: &Tensor, eps: f64, tol: f64, max_coords: usize, rng: &mut R) -> Result<GradCheckReport>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
    R: Rng,
{
    let mut tape = Tape::new();
    let xv = tape.param(x.clone());
    let y = f(&mut tape, xv)?;
    if tape.value(y).numel() != 1 {
        return Err(Error::Contract("grad_check needs a scalar-valued function".into()));
    }
    let grads = tape.backward(y)?;
    let grad = grads.get(xv).map(|g| g.to_vec()).unwrap_or_else(|| vec![0.0; x.numel()]);
    let n = x.numel();
    let coords: Vec<usize> = if n <= max_coords { (0..n).collect() } else { sample(rng, n, max_coords).into_vec() };
    let value = |d: &[f64]| -> Result<f64> {
        let mut t = Tape::new();
        let v = t.constant(Tensor::new(x.shape.clone(), d.to_vec())?);
        let y = f(&mut t, v)?;
        let out = t.value(y).item();
        if out.is_nan() {
            return Err(Error::Numeric("function value is NaN".into()));
        }
        Ok(out)
    };
    grad_check_with(value, &grad, &x.data, &coords, eps, tol)
}

/// Deterministic projection weights so a tensor-valued op can be checked as a scalar.
fn probe_weights(n: usize) -> Vec<f64> {
    (0..n).map(|i| (1.3 * i as f64 + 0.7).sin()).collect()
}

/// `sum(y * w)` with fixed weights `w`.
fn project(t: &mut Tape, y: Var) -> Result<Var> {
    let shape = t.shape(y).to_vec();
    let n = t.value(y).numel();
    let w = t.constant(Tensor::new(shape, probe_weights(n))?);
    let p = t.mul(y, w)?;
    Ok(t.sum(p))
}

fn random(shape: &[usize], rng: &mut impl Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect()).expect("shape matches data")
}

type OpCase = (String, Tensor, Box<dyn Fn(&mut Tape, Var) -> Result<Var>>);

fn cases(rng: &mut impl Rng) -> Vec<OpCase> {
    let mut v: Vec<OpCase> = Vec::new();
    let mut push = |name: &str, x: Tensor, f: Box<dyn Fn(&mut Tape, Var) -> Result<Var>>| v.push((name.to_string(), x, f));
    let (r, c) = (8, 9);
    let b = random(&[c, 7], rng);
    push("matmul/lhs", random(&[r, c], rng), Box::new(move |t, x| {
        let b = t.constant(b.clone());
        let y = t.matmul(x, b)?;
        project(t, y)
    }));
    let a = random(&[r, c], rng);
    push("matmul/rhs", random(&[c, 8], rng), Box::new(move |t, x| {
        let a = t.constant(a.clone());
        let y = t.matmul(a, x)?;
        project(t, y)
    }));
    let o = random(&[r, c], rng);
    push("add", random(&[r, c], rng), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.add(x, o)?;
        project(t, y)
    }));
    let o = random(&[r, c], rng);
    push("add/row-broadcast", random(&[c], rng), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.add(o, x)?;
        project(t, y)
    }));
    let o = random(&[r, c], rng);
    push("sub", random(&[r, c], rng), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.sub(o, x)?;
        project(t, y)
    }));
    let o = random(&[r, c], rng);
    push("mul", random(&[r, c], rng), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.mul(x, o)?;
        project(t, y)
    }));
    push("scale", random(&[r, c], rng), Box::new(|t, x| {
        let y = t.scale(x, -2.5);
        project(t, y)
    }));
    push("transpose", random(&[r, c], rng), Box::new(|t, x| {
        let y = t.transpose(x)?;
        project(t, y)
    }));
    push("reshape", random(&[r, c], rng), Box::new(move |t, x| {
        let y = t.reshape(x, &[c, r])?;
        project(t, y)
    }));
    push("softmax", random(&[r, c], rng), Box::new(|t, x| {
        let y = t.softmax(x)?;
        project(t, y)
    }));
    push("causal_softmax", random(&[9, 9], rng), Box::new(|t, x| {
        let y = t.causal_softmax(x)?;
        project(t, y)
    }));
    let (g, be) = (random(&[c], rng), random(&[c], rng));
    push("layer_norm/x", random(&[r, c], rng), Box::new(move |t, x| {
        let g = t.constant(g.clone());
        let be = t.constant(be.clone());
        let y = t.layer_norm(x, g, be)?;
        project(t, y)
    }));
    let (xx, be) = (random(&[r, c], rng), random(&[c], rng));
    push("layer_norm/gamma", random(&[c], rng), Box::new(move |t, g| {
        let x = t.constant(xx.clone());
        let be = t.constant(be.clone());
        let y = t.layer_norm(x, g, be)?;
        project(t, y)
    }));
    let (xx, g) = (random(&[r, c], rng), random(&[c], rng));
    push("layer_norm/beta", random(&[c], rng), Box::new(move |t, be| {
        let x = t.constant(xx.clone());
        let g = t.constant(g.clone());
        let y = t.layer_norm(x, g, be)?;
        project(t, y)
    }));
    push("gelu", random(&[r, c], rng), Box::new(|t, x| {
        let y = t.gelu(x);
        project(t, y)
    }));
    push("embedding", random(&[12, 6], rng), Box::new(|t, x| {
        let y = t.embedding(x, &[0, 3, 3, 11, 7, 0, 5])?;
        project(t, y)
    }));
    let o = random(&[3, c], rng);
    push("concat", random(&[r, c], rng), Box::new(move |t, x| {
        let o = t.constant(o.clone());
        let y = t.concat(&[o, x, o])?;
        project(t, y)
    }));
    push("slice", random(&[r, c], rng), Box::new(|t, x| {
        let y = t.slice(x, 1..6, 2..8)?;
        project(t, y)
    }));
    push("rows", random(&[r, c], rng), Box::new(|t, x| {
        let y = t.rows(x, &[7, 1, 1, 4, 0])?;
        project(t, y)
    }));
    push("sum", random(&[r, c], rng), Box::new(|t, x| {
        let s = t.sum(x);
        Ok(t.scale(s, 0.3))
    }));
    push("sum_squares", random(&[r, c], rng), Box::new(|t, x| Ok(t.sum_squares(x))));
    push("cross_entropy", random(&[r, c], rng), Box::new(|t, x| {
        t.cross_entropy(x, &[(0, 3), (2, 8), (2, 0), (5, 4), (7, 7)])
    }));
    let q = random(&[r, c], rng);
    let logq: Vec<f64> = q
        .data
        .chunks(c)
        .flat_map(|row| {
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            row.iter().map(move |v| v - lse).collect::<Vec<_>>()
        })
        .collect();
    let logq = Tensor::new(vec![r, c], logq).expect("shape matches data");
    push("kl_div", random(&[r, c], rng), Box::new(move |t, x| t.kl_div(x, &logq)));
    v
}

/// Central-difference checks of every differentiable tape operation (each
/// argument that carries gradient is checked as its own case).
pub fn op_suite<R: Rng>(eps: f64, tol: f64, max_coords: usize, rng: &mut R) -> Result<Vec<(String, GradCheckReport)>> {
    let cs = cases(rng);
    let mut out = Vec::with_capacity(cs.len());
    for (name, x, f) in cs {
        let rep = grad_check(&f, &x, eps, tol, max_coords, rng)?;
        out.push((name, rep));
    }
    Ok(out)
}

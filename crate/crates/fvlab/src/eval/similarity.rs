use crate::error::{Error, Result};
use crate::model::Model;

pub fn cosine(a: &[f64], b: &[f64]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Dimension(format!("cosine of {} and {} entries", a.len(), b.len())));
    }
    let na = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return Err(Error::Numeric("cosine with a zero vector".into()));
    }
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x * y).sum();
    Ok((dot / (na * nb)).clamp(-1.0, 1.0))
}

fn summed_states(m: &Model, probes: &[Vec<usize>]) -> Result<Vec<f64>> {
    let mut s = vec![0.0; m.config.d_model];
    for chunk in probes.chunks(64) {
        for h in m.last_hidden_states(chunk)? {
            for (a, b) in s.iter_mut().zip(h) {
                *a += b;
            }
        }
    }
    Ok(s)
}

/// Cosine between the summed final-token hidden states of two models over shared probes.
pub fn hidden_state_similarity(a: &Model, b: &Model, probes: &[Vec<usize>]) -> Result<f64> {
    if probes.is_empty() {
        return Err(Error::Contract("empty probe set".into()));
    }
    cosine(&summed_states(a, probes)?, &summed_states(b, probes)?)
}

fn merged(m: &Model) -> Result<Model> {
    let mut c = m.clone();
    c.merge_adapters()?;
    Ok(c)
}

/// Sum of squared differences over all effective weights (adapters folded in).
pub fn param_l2_distance(a: &Model, b: &Model) -> Result<f64> {
    if !a.config.same_shape(&b.config) {
        return Err(Error::Contract("models have different shapes".into()));
    }
    let (a, b) = (merged(a)?, merged(b)?);
    Ok(a.flat_params().iter().zip(b.flat_params()).map(|(x, y)| (x - y) * (x - y)).sum())
}

/// Squared Pearson correlation.
pub fn pearson_r2(xs: &[f64], ys: &[f64]) -> Result<f64> {
    if xs.len() != ys.len() {
        return Err(Error::Dimension("pearson inputs differ in length".into()));
    }
    if xs.len() < 3 {
        return Err(Error::Contract("pearson needs at least 3 points".into()));
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    let syy: f64 = ys.iter().map(|y| (y - my) * (y - my)).sum();
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    if sxx <= 0.0 || syy <= 0.0 {
        return Err(Error::Numeric("zero variance".into()));
    }
    Ok((sxy * sxy / (sxx * syy)).clamp(0.0, 1.0))
}

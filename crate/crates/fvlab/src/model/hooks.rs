use super::config::{HeadIndex, ModelConfig};
use crate::error::{Error, Result};

/// Instrumentation applied at the final token of every sequence in a forward pass.
#[derive(Clone, Debug, PartialEq)]
pub enum HookSpec {
    /// Report the head's residual-space contribution.
    Record(HeadIndex),
    /// Swap the head's contribution for `payload`.
    ReplaceHead { head: HeadIndex, payload: Vec<f64> },
    /// `h_l <- h_l + payload` on the residual stream after block `layer`.
    AddAtLayer { layer: usize, payload: Vec<f64> },
    /// `h_l <- h_l - payload` on the residual stream after block `layer`.
    SubtractAtLayer { layer: usize, payload: Vec<f64> },
}

impl HookSpec {
    pub fn validate(&self, cfg: &ModelConfig) -> Result<()> {
        let (layer, payload) = match self {
            HookSpec::Record(h) => return h.check(cfg),
            HookSpec::ReplaceHead { head, payload } => {
                head.check(cfg)?;
                (head.layer, payload)
            }
            HookSpec::AddAtLayer { layer, payload } | HookSpec::SubtractAtLayer { layer, payload } => (*layer, payload),
        };
        if layer >= cfg.n_layers {
            return Err(Error::Config(format!("hook layer {layer} >= {}", cfg.n_layers)));
        }
        if payload.len() != cfg.d_model {
            return Err(Error::Dimension(format!("hook payload has {} entries, d = {}", payload.len(), cfg.d_model)));
        }
        Ok(())
    }
}

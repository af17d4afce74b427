//! Dense fp64 tensors with a deterministic reverse-mode tape.

mod gemm;
pub mod gradcheck;
pub mod optim;
pub mod tape;
pub mod tensor;

pub use gradcheck::{grad_check, grad_check_with, op_suite, rel_err, GradCheckReport};
pub use optim::Adam;
pub use tape::{Grads, Tape, Var};
pub use tensor::Tensor;


/// `-log softmax(logits)[target]` for a single logit vector.
pub fn softmax_ce_loss(tape: &mut Tape, logits: Var, target: usize) -> crate::Result<Var> {
    tape.cross_entropy(logits, &[(0, target)])
}

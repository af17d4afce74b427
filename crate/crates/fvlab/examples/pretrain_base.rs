//! Pretrains the base model on the uniform task mixture until it is
//! competent in context, then writes `m0.fvl` and `competence.json`.
//!
//! Output goes to `$FVLAB_OUT` (default `runs/`). Takes a few minutes on one core.

use fvlab::cli::{cmd_pretrain, ExperimentConfig};
use std::time::Instant;

fn main() -> fvlab::Result<()> {
    let cfg = ExperimentConfig::default();
    let t0 = Instant::now();
    let report = cmd_pretrain(&cfg, |step, loss| {
        println!("step {step:>5}  loss {loss:.4}  {:.0}s", t0.elapsed().as_secs_f64())
    })?;
    println!("stopped after {} steps", report.steps);
    for t in &report.tasks {
        println!("{:<3} zero-shot {:>5.1}  {}-shot {:>5.1}", t.task, t.zero_shot, report.shots, t.n_shot);
    }
    println!("wrote {}", cfg.base_checkpoint().display());
    Ok(())
}

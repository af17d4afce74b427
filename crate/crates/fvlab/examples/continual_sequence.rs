//! Fine-tunes the base model on a short task sequence with one or more
//! methods and compares the summary metrics.
//!
//! `cargo run --release --example continual_sequence -- naive fvg ewc replay model_avg`

use fvlab::cli::{cmd_run_sequence, ensure_base, ensure_head_set, ExperimentConfig};
use fvlab::cltrain::Method;

fn main() -> fvlab::Result<()> {
    let mut methods: Vec<Method> = std::env::args().skip(1).map(|a| a.parse()).collect::<fvlab::Result<_>>()?;
    if methods.is_empty() {
        methods = vec![Method::Naive, Method::Fvg];
    }
    let cfg = ExperimentConfig::short_sequence();
    ensure_base(&cfg, |s, l| eprintln!("pretraining: step {s} loss {l:.4}"))?;
    ensure_head_set(&cfg)?;
    println!("train {:?}, general eval {:?}", cfg.suite.sequence.train, cfg.suite.sequence.eval);

    println!("{:<10} {:>6} {:>6} {:>6} {:>6} {:>7}", "method", "GP", "IP", "FP", "AP", "Forget");
    for m in methods {
        let (dir, r) = cmd_run_sequence(&cfg, m)?;
        let x = &r.metrics;
        println!("{:<10} {:>6.1} {:>6.1} {:>6.1} {:>6.1} {:>7.1}   {}", m.to_string(), x.gp, x.ip, x.fp, x.ap, x.forget, dir.display());
        for t in x.per_task.iter().filter(|t| t.role == "eval") {
            let s: Vec<String> = t.zero_shot.iter().map(|v| format!("{v:.0}")).collect();
            println!("    {} zero-shot by stage: {}", t.task, s.join(" -> "));
        }
    }
    Ok(())
}

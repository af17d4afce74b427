//! Tracks how each general task's function vector, hidden state and the
//! parameters drift across a finished run, and which of them best explains
//! the zero-shot score.
//!
//! `cargo run --release --example analyze_run -- [method]` (after `continual_sequence`)

use fvlab::cli::{cmd_analyze, run_dir, ExperimentConfig};
use fvlab::cltrain::Method;

fn main() -> fvlab::Result<()> {
    let method: Method = std::env::args().nth(1).unwrap_or_else(|| "naive".into()).parse()?;
    let dir = run_dir(&ExperimentConfig::short_sequence(), method);
    let a = cmd_analyze(&dir)?;

    let tasks: Vec<String> = a.r2.iter().map(|r| r.task.clone()).collect();
    for t in &tasks {
        println!("{t}");
        for k in ["score_zero_shot", "fv_self_sim", "hidden_sim", "param_l2"] {
            let s: Vec<String> = a.series(t, k).iter().map(|v| format!("{v:>8.3}")).collect();
            println!("  {k:<16}{}", s.join(""));
        }
    }
    println!("cross-task FV similarity before each stage:");
    for c in &a.cross {
        println!("  stage {} cos({}, {}) = {:.3}", c.stage, c.eval_task, c.train_task, c.similarity);
    }
    let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
    println!("R² of zero-shot score against:");
    for r in &a.r2 {
        println!("  {} fv_self_sim {}  hidden_sim {}  param_l2 {}", r.task, f(r.fv_self_sim), f(r.hidden_sim), f(r.param_l2));
    }
    println!("wrote analytics_long.csv, cross_task_similarity.csv and r2.csv under {}", dir.display());
    Ok(())
}

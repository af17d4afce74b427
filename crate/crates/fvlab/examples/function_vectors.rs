//! Extracts function vectors from the base model and adds them to the
//! residual stream of zero-shot prompts, one layer at a time.
//!
//! The held-out tasks share a single instruction, so without demonstrations the
//! model cannot tell them apart; the FV supplies the missing task identity.

use fvlab::cli::{ensure_base, ensure_head_set, write_sweep_csv, ExperimentConfig};
use fvlab::fv::{extract_fv, fv_similarity, layer_sweep, write_function_vector, InterventionMode};
use fvlab::tasks::Suite;
use std::fs::File;

fn main() -> fvlab::Result<()> {
    let cfg = ExperimentConfig::short_sequence();
    let m0 = ensure_base(&cfg, |s, l| eprintln!("pretraining: step {s} loss {l:.4}"))?;
    let heads = ensure_head_set(&cfg)?;
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let layers = cfg.eval.sweep(m0.config.n_layers);

    let mut fvs = Vec::new();
    for id in &cfg.suite.probe {
        let task = suite.get(id)?;
        let (fv, map) = extract_fv(&m0, "M0", task, &suite.vocab, &heads, &cfg.fv)?;
        let s = layer_sweep(&m0, task, &suite.vocab, &fv.theta, InterventionMode::Add, &layers, 0, &cfg.eval)?;
        let per: Vec<String> = s.layers.iter().map(|l| format!("L{} {:.1}", l.layer, l.val)).collect();
        println!(
            "{id}: {} activations{}, zero-shot {:.1} -> {:.1} with FV at layer {}  [{}]",
            map.sample_count,
            if map.filtered { " (correct only)" } else { "" },
            s.plain_val,
            s.best_val,
            s.best_layer,
            per.join(", ")
        );
        let path = cfg.out_dir.join(format!("fv_{id}.json"));
        write_function_vector(&fv, File::create(&path)?)?;
        write_sweep_csv(&s, File::create(cfg.out_dir.join(format!("sweep_{id}.csv")))?)?;
        fvs.push(fv);
    }
    for a in &fvs {
        let row: Vec<String> = fvs.iter().map(|b| format!("{:.3}", fv_similarity(a, b).unwrap_or(f64::NAN))).collect();
        println!("cos({}, .) = {}", a.task_id, row.join(" "));
    }
    Ok(())
}

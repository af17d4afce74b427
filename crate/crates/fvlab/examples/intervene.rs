//! Recovers a forgotten task by editing the residual stream of a fine-tuned
//! checkpoint: add the task's FV read from the base model, or subtract the
//! FV of the last training task read from the checkpoint itself.
//!
//! `cargo run --release --example intervene -- [method] [eval-task]` (after `continual_sequence`)

use fvlab::cli::{cmd_intervene, run_dir, ExperimentConfig, InterveneArgs};
use fvlab::cltrain::{Method, RunDir, StageSnapshot};
use fvlab::fv::{write_function_vector, InterventionMode};
use std::fs::File;
use std::io::BufReader;

fn main() -> fvlab::Result<()> {
    let method: Method = std::env::args().nth(1).unwrap_or_else(|| "naive".into()).parse()?;
    let cfg = ExperimentConfig::short_sequence();
    let task = std::env::args().nth(2).unwrap_or_else(|| cfg.suite.sequence.eval[0].clone());
    let run = RunDir(run_dir(&cfg, method));
    let n = cfg.suite.sequence.n();
    let last = cfg.suite.sequence.train.last().cloned().unwrap_or_default();

    let snap = |j: usize| -> fvlab::Result<StageSnapshot> { Ok(serde_json::from_reader(BufReader::new(File::open(run.snapshot(j))?))?) };
    let (s0, sn) = (snap(0)?, snap(n)?);
    let source = cfg.out_dir.join(format!("fv_{task}_m0.json"));
    let target = cfg.out_dir.join(format!("fv_{last}_m{n}.json"));
    write_function_vector(s0.get(&task)?, File::create(&source)?)?;
    write_function_vector(sn.get(&last)?, File::create(&target)?)?;

    for (mode, fv, label) in [(InterventionMode::Add, &source, "add source FV"), (InterventionMode::Subtract, &target, "subtract target FV")] {
        let args = InterveneArgs {
            checkpoint: run.checkpoint(n),
            fv_file: fv.clone(),
            mode,
            layers: None,
            task: Some(task.clone()),
            shots: 0,
        };
        let (path, s) = cmd_intervene(&cfg, &args)?;
        let per: Vec<String> = s.layers.iter().map(|l| format!("L{} {:.1}", l.layer, l.val)).collect();
        println!("{task} on M{n}, {label}: plain {:.1}, best {:.1} at layer {}  [{}]  {}", s.plain_val, s.best_val, s.best_layer, per.join(", "), path.display());
    }
    Ok(())
}

//! Builds the synthetic task suite, prints a few prompts per task and dumps
//! one task's train split as a JSONL corpus.
//!
//! `cargo run --example tasks_corpus -- [task-id]`

use fvlab::cli::ExperimentConfig;
use fvlab::tasks::{build_icl_prompt, write_corpus, Suite, TaskKind};
use std::io::BufWriter;

fn main() -> fvlab::Result<()> {
    let cfg = ExperimentConfig::default();
    let suite = Suite::build(&cfg.suite, cfg.seed)?;
    let pick = std::env::args().nth(1).unwrap_or_else(|| "E1".into());

    println!("vocab size {}, {} tasks", suite.vocab.size, suite.tasks.len());
    for t in &suite.tasks {
        let kind = match t.kind {
            TaskKind::Generation => "gen",
            TaskKind::Classification => "cls",
        };
        let b = build_icl_prompt(t, 3, 1)?;
        println!(
            "{:<3} {kind} instr {:?} splits {}/{}/{}  3-shot prompt {:?} -> {:?}",
            t.id,
            t.instruction,
            t.train.len(),
            t.val.len(),
            t.heldout.len(),
            b.tokens(&suite.vocab),
            b.target()
        );
    }
    let roles = &suite.config;
    println!("pretraining mixture {:?}", roles.pretrain);
    println!("head-discovery tasks {:?}", roles.probe);
    println!("sequence train {:?} eval {:?}", roles.sequence.train, roles.sequence.eval);

    std::fs::create_dir_all(&cfg.out_dir)?;
    let path = cfg.out_dir.join(format!("corpus_{pick}.jsonl"));
    let mut w = BufWriter::new(std::fs::File::create(&path)?);
    write_corpus(suite.get(&pick)?, &mut w)?;
    println!("wrote {}", path.display());
    Ok(())
}

use clap::{Parser, Subcommand};
use fvlab::cli::{
    cmd_analyze, cmd_find_heads, cmd_grad_check, cmd_intervene, cmd_pretrain, cmd_run_sequence, ExperimentConfig,
    GradCheckSettings, InterveneArgs, OUT_ENV,
};
use fvlab::cltrain::Method;
use fvlab::fv::InterventionMode;
use fvlab::Result;
use std::path::PathBuf;

#[derive(Parser)]
#[command(name = "fvlab", version, about = "Function-vector experiments on a micro-transformer")]
struct Cli {
    /// Experiment config (TOML); defaults apply when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    #[arg(long, global = true, env = OUT_ENV)]
    out: Option<PathBuf>,
    /// Config override `section.key=value`, repeatable.
    #[arg(long = "set", global = true)]
    sets: Vec<String>,
    #[command(subcommand)]
    cmd: Cmd,
}

#[derive(Subcommand)]
enum Cmd {
    /// Train the base model until it is competent in context.
    Pretrain,
    /// Rank heads by causal effect and write the head set.
    FindHeads {
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
    /// Fine-tune on the task sequence with one method.
    RunSequence {
        #[arg(long, default_value = "naive")]
        method: Method,
    },
    /// Score a checkpoint under an FV intervention at each layer.
    Intervene {
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long)]
        fv: PathBuf,
        #[arg(long, value_parser = parse_mode, default_value = "add")]
        mode: InterventionMode,
        #[arg(long, value_delimiter = ',')]
        layers: Option<Vec<usize>>,
        #[arg(long)]
        task: Option<String>,
        #[arg(long, default_value_t = 0)]
        shots: usize,
    },
    /// Similarity, distance and R² tables for a finished run directory.
    Analyze { run: PathBuf },
    /// Central-difference checks of every primitive and the training losses.
    GradCheck {
        #[arg(long, default_value_t = 64)]
        coords: usize,
    },
}

fn parse_mode(s: &str) -> std::result::Result<InterventionMode, String> {
    match s {
        "add" => Ok(InterventionMode::Add),
        "subtract" => Ok(InterventionMode::Subtract),
        _ => Err(format!("mode must be add or subtract, got {s}")),
    }
}

fn config(cli: &Cli) -> Result<ExperimentConfig> {
    let mut c = match &cli.config {
        Some(p) => ExperimentConfig::load(p)?,
        None => ExperimentConfig::default(),
    };
    if let Some(s) = cli.seed {
        c.seed = s;
    }
    if let Some(o) = &cli.out {
        c.out_dir = o.clone();
    }
    c.with_overrides(&cli.sets)
}

fn run(cli: Cli) -> Result<()> {
    match &cli.cmd {
        Cmd::Pretrain => {
            let c = config(&cli)?;
            let r = cmd_pretrain(&c, |s, l| eprintln!("step {s} loss {l:.4}"))?;
            for t in &r.tasks {
                println!("{} zero-shot {:.1} {}-shot {:.1}", t.task, t.zero_shot, r.shots, t.n_shot);
            }
            println!("wrote {}", c.base_checkpoint().display());
        }
        Cmd::FindHeads { checkpoint } => {
            let c = config(&cli)?;
            let (s, _) = cmd_find_heads(&c, checkpoint.as_deref())?;
            let hs: Vec<String> = s.heads.iter().map(|h| h.to_string()).collect();
            println!("heads {}", hs.join(" "));
            println!("wrote {} and {}", c.head_set_path().display(), c.ce_grid_path().display());
        }
        Cmd::RunSequence { method } => {
            let c = config(&cli)?;
            let (dir, r) = cmd_run_sequence(&c, *method)?;
            let m = &r.metrics;
            println!("{method} GP {:.2} IP {:.2} FP {:.2} AP {:.2} Forget {:.2}", m.gp, m.ip, m.fp, m.ap, m.forget);
            println!("wrote {}", dir.display());
        }
        Cmd::Intervene { checkpoint, fv, mode, layers, task, shots } => {
            let c = config(&cli)?;
            let args = InterveneArgs {
                checkpoint: checkpoint.clone(),
                fv_file: fv.clone(),
                mode: *mode,
                layers: layers.clone(),
                task: task.clone(),
                shots: *shots,
            };
            let (path, s) = cmd_intervene(&c, &args)?;
            println!("{} plain {:.1}", s.task_id, s.plain_val);
            for l in &s.layers {
                println!("layer {} selection {:.1} val {:.1}", l.layer, l.selection, l.val);
            }
            println!("best layer {} val {:.1}", s.best_layer, s.best_val);
            println!("wrote {}", path.display());
        }
        Cmd::Analyze { run } => {
            let a = cmd_analyze(run)?;
            for r in &a.r2 {
                let f = |v: Option<f64>| v.map(|x| format!("{x:.3}")).unwrap_or_else(|| "n/a".into());
                println!("{} R2 fv_sim {} hidden_sim {} param_l2 {}", r.task, f(r.fv_self_sim), f(r.hidden_sim), f(r.param_l2));
            }
        }
        Cmd::GradCheck { coords } => {
            let s = GradCheckSettings { coords: *coords, ..GradCheckSettings::default() };
            for l in cmd_grad_check(&s)? {
                println!("{:<24} {:>3} coords  max rel err {:.2e}", l.name, l.checked, l.max_rel_err);
            }
        }
    }
    Ok(())
}

fn main() {
    if let Err(e) = run(Cli::parse()) {
        eprintln!("error: {e}");
        std::process::exit(e.exit_code());
    }
}

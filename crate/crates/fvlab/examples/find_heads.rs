//! Ranks every attention head of the base model by its average causal effect
//! on the held-out tasks and keeps the top-k as the FV head set.

use fvlab::cli::{cmd_find_heads, ensure_base, ExperimentConfig};

fn main() -> fvlab::Result<()> {
    let cfg = ExperimentConfig::default();
    ensure_base(&cfg, |s, l| eprintln!("pretraining: step {s} loss {l:.4}"))?;
    let (s, grid) = cmd_find_heads(&cfg, None)?;

    println!("causal effect, averaged over {:?} ({} probes)", grid.tasks, grid.probe_count);
    for l in 0..grid.n_layers {
        let row: Vec<String> = (0..grid.n_heads).map(|h| format!("{:>8.4}", grid.values[l * grid.n_heads + h])).collect();
        println!("layer {l}: {}", row.join(" "));
    }
    let hs: Vec<String> = s.heads.iter().map(|h| h.to_string()).collect();
    println!("head set (layer.head): {}", hs.join(" "));
    println!("wrote {} and {}", cfg.head_set_path().display(), cfg.ce_grid_path().display());
    Ok(())
}

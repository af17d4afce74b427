use fvlab::cli::ExperimentConfig;
use fvlab::model::{save_checkpoint, Model, ModelConfig};
use std::path::Path;

/// A two-stage sequence on a two-layer model, small enough to run in seconds.
pub fn tiny(out: &Path) -> ExperimentConfig {
    let mut c = ExperimentConfig::default();
    c.out_dir = out.to_path_buf();
    c.model = ModelConfig { n_layers: 2, n_heads: 2, d_model: 8, d_head: 4, d_mlp: 16, vocab: 128, max_seq: 64, seed: 0 };
    c.suite.sequence.train.truncate(2);
    c.training.epochs = 1;
    c.training.batch = 32;
    c.eval.max_queries = 16;
    c.eval.layer_sweep = vec![0, 1];
    c.fv.max_samples = 16;
    c.fv.probes_per_task = 4;
    c.fv.top_k = 3;
    c.fv.n_shots = 4;
    c
}

/// Writes an untrained base model where the commands expect `M0`.
pub fn write_base(c: &ExperimentConfig) {
    std::fs::create_dir_all(&c.out_dir).unwrap();
    save_checkpoint(&Model::new(c.model_config()).unwrap(), &c.base_checkpoint()).unwrap();
}

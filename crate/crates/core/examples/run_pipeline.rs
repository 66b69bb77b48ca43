//! Run every pipeline stage on a shrunken copy of the desk config and print the report.
//!
//! The full desk run is `cargo run --release -- all` from the crate directory.

use tsmi::pipeline::{ExperimentConfig, Pipeline};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let root = std::path::Path::new(env!("CARGO_MANIFEST_DIR"));
    let mut cfg = ExperimentConfig::load(&root.join("configs/desk.json"))?;
    cfg.data.train_suite_per_family = 2;
    cfg.data.taxonomy_suite_per_family = 2;
    cfg.data.suite_length = 128;
    cfg.windows.train_per_series = 3;
    cfg.windows.csv_train_windows = 24;
    cfg.model.n_encoder_blocks = 2;
    cfg.model.n_decoder_blocks = 2;
    cfg.model.d_model = 16;
    cfg.model.d_ff = 32;
    cfg.model.n_heads = 2;
    cfg.train.steps = 30;
    cfg.sae.d_sae = 64;
    cfg.sae.k = 4;
    cfg.sae.steps = 100;
    cfg.sae.batch = 64;
    cfg.sites = vec!["enc.0".parse()?, "enc.1".parse()?, "dec.1".parse()?];
    cfg.ablation.sites = vec!["enc.1".parse()?];
    cfg.ablation.n_windows = 8;
    cfg.ablation.n_samples = 4;
    cfg.ablation.n_features = 4;
    cfg.ablation.checkpoints = vec![1, 2, 4, 8];

    let dir = tempfile::tempdir()?;
    let p = Pipeline::new(cfg, Some(dir.path().to_path_buf()), None)?;
    p.run_all()?;
    let (text, paths) = p.report()?;
    print!("{text}");
    for path in paths {
        println!("wrote {}", path.strip_prefix(dir.path()).unwrap_or(&path).display());
    }
    Ok(())
}

//! Remove SAE features from a forecaster's residual stream and measure the CRPS change.

use tsmi::actstore::{extract, Shard};
use tsmi::causal::{crps_empirical, rank_features, summarize, Ablation, AblationConfig};
use tsmi::forecaster::{HookSite, Model, ModelConfig, TrainConfig};
use tsmi::sae::{train_sae, SaeConfig};
use tsmi::series::{gen_diagnostic_suite, make_windows};
use tsmi::tokenizer::{prepare_windows, TokenizedWindow, TokenizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    println!("CRPS of samples {{0, 2}} at y = 1: {}", crps_empirical(&[0.0, 2.0], 1.0));

    let tok = TokenizerConfig::default();
    let mut windows = Vec::new();
    for d in gen_diagnostic_suite(11, 2, 160) {
        windows.extend(make_windows(&d.series, 32, 8, 6, 8, 1)?);
    }
    let prepared = prepare_windows(windows, &tok, 0);
    let tokens: Vec<TokenizedWindow> = prepared.iter().map(|w| w.tokens.clone()).collect();
    let mut model = Model::new(ModelConfig {
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab: tok.vocab_size(),
        max_context: 32,
        seed: 2,
    })?;
    model.train(
        &tokens,
        &TrainConfig {
            steps: 100,
            batch: 16,
            base_lr: 3e-3,
            warmup_steps: 10,
            seed: 3,
        },
    )?;

    let site = HookSite::encoder(0);
    let dir = tempfile::tempdir()?;
    let path = extract(&model, &prepared, &[site], dir.path(), "train")?.remove(0);
    let rows = Shard::open(&path)?.read_all()?;
    let sae_cfg = SaeConfig {
        d_sae: 64,
        k: 8,
        steps: 400,
        batch: 128,
        base_lr: 2e-3,
        warmup_steps: 20,
        dead_scan_every: 100,
        dead_threshold_steps: 20,
        seed: 4,
    };
    let (sae, _) = train_sae(&rows, site, &sae_cfg)?;

    let cfg = AblationConfig {
        sites: vec![site],
        n_windows: 24,
        pred_len: 8,
        n_samples: 8,
        n_features: 8,
        checkpoints: vec![1, 2, 4, 8, 16],
        temperature: 1.0,
        seed: 5,
    };
    let ranking: Vec<usize> = rank_features(&sae, &rows)?.into_iter().map(|r| r.0).collect();
    let ab = Ablation::new(&model, &tok, &sae, &prepared, &cfg)?;
    let baseline = ab.baseline_crps()?;
    println!("clean CRPS {:.4}, reconstruction-patched {baseline:.4}", ab.clean_crps()?);
    let deltas: Vec<f64> = ranking[..cfg.n_features]
        .iter()
        .map(|&j| ab.ablate_single(j, baseline).map(|r| r.delta))
        .collect::<tsmi::Result<_>>()?;
    let s = summarize(&deltas)?;
    println!("top-{} single ablations: mean dCRPS {:.5}, +frac {:.2}", s.n, s.mean, s.positive_fraction);
    for (c, crps) in ab.ablate_progressive(&ranking, baseline)? {
        println!("  {c:3} features removed: CRPS {crps:.4}");
    }
    Ok(())
}

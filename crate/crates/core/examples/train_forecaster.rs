//! Train a small encoder-decoder forecaster on synthetic windows and sample forecasts.

use tsmi::causal::window_crps;
use tsmi::forecaster::{Model, ModelConfig, TrainConfig};
use tsmi::series::{gen_diagnostic_suite, make_windows};
use tsmi::tokenizer::{prepare_windows, TokenizedWindow, TokenizerConfig};

fn main() -> tsmi::Result<()> {
    let tok = TokenizerConfig::default();
    let mut windows = Vec::new();
    for d in gen_diagnostic_suite(1, 4, 160) {
        windows.extend(make_windows(&d.series, 32, 8, 6, 8, 2)?);
    }
    let prepared = prepare_windows(windows, &tok, 0);
    let (train, test): (Vec<_>, Vec<_>) = prepared.into_iter().partition(|w| w.id % 5 != 0);
    let tokens: Vec<TokenizedWindow> = train.iter().map(|w| w.tokens.clone()).collect();
    let held: Vec<TokenizedWindow> = test.iter().map(|w| w.tokens.clone()).collect();

    let mut model = Model::new(ModelConfig {
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        d_model: 32,
        n_heads: 2,
        d_ff: 64,
        vocab: tok.vocab_size(),
        max_context: 32,
        seed: 3,
    })?;
    println!("{} parameters, {} training windows", model.n_parameters(), tokens.len());
    let before = model.cross_entropy(&held, 16)?;
    let log = model.train(
        &tokens,
        &TrainConfig {
            steps: 150,
            batch: 16,
            base_lr: 3e-3,
            warmup_steps: 15,
            seed: 4,
        },
    )?;
    let after = model.cross_entropy(&held, 16)?;
    println!("train loss {:.3} -> {:.3}", log.losses[0], log.losses.last().unwrap());
    println!("held-out cross-entropy {before:.3} -> {after:.3}");

    let w = &test[0];
    let f = model.forecast(&w.tokens, &tok, 16, 1.0, 9)?;
    println!("{} x {} samples, CRPS {:.4}", f.n_samples(), f.horizon(), window_crps(&f.samples, &w.window.target)?);
    println!("target   {:?}", w.window.target.iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    println!("sample 0 {:?}", f.samples.row(0).iter().map(|v| format!("{v:.2}")).collect::<Vec<_>>());
    Ok(())
}

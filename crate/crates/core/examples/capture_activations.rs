//! Record residual-stream activations into a shard file and stream them back.

use tsmi::actstore::{extract, Shard};
use tsmi::forecaster::{HookSite, Model, ModelConfig};
use tsmi::series::{gen_diagnostic_suite, make_windows};
use tsmi::tokenizer::{prepare_windows, TokenizerConfig};

fn main() -> Result<(), Box<dyn std::error::Error>> {
    let tok = TokenizerConfig::default();
    let model = Model::new(ModelConfig {
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        d_model: 16,
        n_heads: 2,
        d_ff: 32,
        vocab: tok.vocab_size(),
        max_context: 32,
        seed: 1,
    })?;
    let mut windows = Vec::new();
    for d in gen_diagnostic_suite(2, 1, 128) {
        windows.extend(make_windows(&d.series, 32, 8, 2, 16, 0)?);
    }
    let prepared = prepare_windows(windows, &tok, 0);

    let dir = tempfile::tempdir()?;
    let sites = [HookSite::encoder(1), HookSite::decoder(1), HookSite::cross_attention(0)];
    for path in extract(&model, &prepared, &sites, dir.path(), "demo")? {
        let shard = Shard::open(&path)?;
        println!(
            "{}: {} rows x {}, {} windows, mean row norm {:.3}",
            shard.site,
            shard.n_rows,
            shard.d_model,
            shard.entries.len(),
            shard.stats.mean_row_norm
        );
        let first = &shard.entries[0];
        println!("  first window {} from {}@{}", first.window_id, first.series, first.series_start);
        let batches: Vec<_> = shard.stream_batches(64, Some(7))?.collect::<tsmi::Result<_>>()?;
        println!("  {} shuffled batches of up to 64 rows", batches.len());
    }
    Ok(())
}

//! Mean-scale a context, quantize it into bins and map the tokens back.

use tsmi::numerics::Float;
use tsmi::tokenizer::{dequantize, fit_scale, quantize, TokenizerConfig};

fn main() -> tsmi::Result<()> {
    let cfg = TokenizerConfig::default();
    let context: Vec<Float> = (0..24).map(|t| 20.0 + 3.0 * (t as Float * 0.26).sin()).collect();
    let scale = fit_scale(&context);
    let tokens = quantize(&context, scale, &cfg);
    let back = dequantize(&tokens, scale, &cfg)?;
    println!("scale {scale:.3}, bin width {:.4} (scaled units)", cfg.bin_width());
    println!("pad {} eos {} vocab {}", cfg.pad_id(), cfg.eos_id(), cfg.vocab_size());
    for ((v, t), b) in context.iter().zip(&tokens).zip(&back).take(8) {
        println!("{v:8.3} -> bin {t:3} -> {b:8.3}");
    }
    let worst = context.iter().zip(&back).map(|(a, b)| (a - b).abs()).fold(0.0, Float::max);
    println!("max round-trip error {worst:.4} (half a bin is {:.4})", 0.5 * cfg.bin_width() as Float * scale);
    Ok(())
}

//! Mean-scaled uniform quantization of real values into a token vocabulary.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Float;
use crate::series::Window;

pub type TokenId = u32;

/// Smallest scale returned by [`fit_scale`].
pub const SCALE_FLOOR: Float = 1e-6;

/// Bin layout. Special tokens follow the bins: `pad = n_bins`, `eos = n_bins + 1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TokenizerConfig {
    pub n_bins: u32,
    pub clip_lo: Float,
    pub clip_hi: Float,
}

impl Default for TokenizerConfig {
    fn default() -> Self {
        Self {
            n_bins: 256,
            clip_lo: -15.0,
            clip_hi: 15.0,
        }
    }
}

impl TokenizerConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_bins < 8 {
            errs.push(format!("tokenizer.n_bins must be >= 8 (got {})", self.n_bins));
        }
        if !(self.clip_lo < self.clip_hi) || !self.clip_lo.is_finite() || !self.clip_hi.is_finite() {
            errs.push(format!(
                "tokenizer.clip_lo must be < clip_hi (got {} / {})",
                self.clip_lo, self.clip_hi
            ));
        }
        errs
    }

    pub fn pad_id(&self) -> TokenId {
        self.n_bins
    }

    pub fn eos_id(&self) -> TokenId {
        self.n_bins + 1
    }

    /// Bins plus specials.
    pub fn vocab_size(&self) -> usize {
        self.n_bins as usize + 2
    }

    pub fn is_bin(&self, id: TokenId) -> bool {
        id < self.n_bins
    }

    /// Width of one bin in scaled units.
    pub fn bin_width(&self) -> f64 {
        (self.clip_hi as f64 - self.clip_lo as f64) / self.n_bins as f64
    }

    /// Center of bin `id` in scaled units.
    pub fn bin_center(&self, id: TokenId) -> f64 {
        self.clip_lo as f64 + (id as f64 + 0.5) * self.bin_width()
    }
}

/// Mean absolute value of the context, floored at [`SCALE_FLOOR`].
pub fn fit_scale(context: &[Float]) -> Float {
    if context.is_empty() {
        return SCALE_FLOOR;
    }
    let mean = context.iter().map(|&v| (v as f64).abs()).sum::<f64>() / context.len() as f64;
    (mean as Float).max(SCALE_FLOOR)
}

/// Maps each value to the half-open bin `[edge_i, edge_{i+1})` containing
/// `v / scale` after clipping; the last bin is closed.
pub fn quantize(values: &[Float], scale: Float, cfg: &TokenizerConfig) -> Vec<TokenId> {
    let lo = cfg.clip_lo as f64;
    let hi = cfg.clip_hi as f64;
    let w = cfg.bin_width();
    let last = cfg.n_bins - 1;
    values
        .iter()
        .map(|&v| {
            let u = (v as f64 / scale as f64).clamp(lo, hi);
            let idx = ((u - lo) / w).floor();
            (idx as TokenId).min(last)
        })
        .collect()
}

/// Maps bin ids back to `center * scale`. Special tokens are rejected.
pub fn dequantize(tokens: &[TokenId], scale: Float, cfg: &TokenizerConfig) -> Result<Vec<Float>> {
    tokens
        .iter()
        .map(|&id| {
            if !cfg.is_bin(id) {
                return Err(Error::Decode(id));
            }
            Ok((cfg.bin_center(id) * scale as f64) as Float)
        })
        .collect()
}

/// Context and target tokens sharing one scale fitted on the context.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenizedWindow {
    pub context_tokens: Vec<TokenId>,
    pub target_tokens: Vec<TokenId>,
    pub scale: Float,
}

pub fn tokenize_window(w: &Window, cfg: &TokenizerConfig) -> TokenizedWindow {
    let scale = fit_scale(&w.context);
    TokenizedWindow {
        context_tokens: quantize(&w.context, scale, cfg),
        target_tokens: quantize(&w.target, scale, cfg),
        scale,
    }
}

/// A window with a stable id and its tokenization, ready for the model.
#[derive(Debug, Clone, PartialEq)]
pub struct PreparedWindow {
    pub id: u64,
    pub window: Window,
    pub tokens: TokenizedWindow,
}

/// Tokenizes windows and numbers them from `first_id`.
pub fn prepare_windows(windows: Vec<Window>, cfg: &TokenizerConfig, first_id: u64) -> Vec<PreparedWindow> {
    windows
        .into_iter()
        .enumerate()
        .map(|(i, window)| PreparedWindow {
            id: first_id + i as u64,
            tokens: tokenize_window(&window, cfg),
            window,
        })
        .collect()
}

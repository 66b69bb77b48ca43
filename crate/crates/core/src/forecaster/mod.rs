//! A small encoder-decoder transformer over quantized series tokens:
//! teacher-forced training, autoregressive sampling, and activation
//! capture/patching at named hook sites.

pub(crate) mod checkpoint;
mod hooks;
mod layers;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::{log_softmax_row, AdamConfig, Float, LrSchedule, Matrix, Parameter};
use crate::tokenizer::{dequantize, TokenId, TokenizedWindow, TokenizerConfig};

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use hooks::{ActivationHook, CaptureHook, HookSite, NoHook, PatchHook, SiteKind};
use layers::{AttnCache, Attention, FeedForward, FfnCache, RmsNorm};

/// Geometry of the forecaster.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelConfig {
    pub n_encoder_blocks: usize,
    pub n_decoder_blocks: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub d_ff: usize,
    /// Vocabulary size including the two special tokens.
    pub vocab: usize,
    /// Longest context and longest prediction horizon.
    pub max_context: usize,
    pub seed: u64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            n_encoder_blocks: 4,
            n_decoder_blocks: 4,
            d_model: 64,
            n_heads: 4,
            d_ff: 256,
            vocab: 258,
            max_context: 128,
            seed: 0,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        for (k, v) in [
            ("model.n_encoder_blocks", self.n_encoder_blocks),
            ("model.n_decoder_blocks", self.n_decoder_blocks),
            ("model.d_model", self.d_model),
            ("model.n_heads", self.n_heads),
            ("model.d_ff", self.d_ff),
            ("model.max_context", self.max_context),
        ] {
            if v == 0 {
                errs.push(format!("{k} must be >= 1"));
            }
        }
        if self.vocab < 3 {
            errs.push(format!("model.vocab must be >= 3 (got {})", self.vocab));
        }
        if self.n_heads > 0 && self.d_model % self.n_heads != 0 {
            errs.push(format!(
                "model.d_model ({}) must be divisible by model.n_heads ({})",
                self.d_model, self.n_heads
            ));
        }
        errs
    }

    /// Number of bin tokens; the last two ids are `pad` and `eos`.
    pub fn n_bins(&self) -> usize {
        self.vocab - 2
    }

    pub fn validate_site(&self, site: HookSite) -> Result<()> {
        let limit = match site.kind {
            SiteKind::EncoderBlockOut => self.n_encoder_blocks,
            SiteKind::DecoderBlockOut | SiteKind::CrossAttentionOut => self.n_decoder_blocks,
        };
        if site.block_index >= limit {
            return Err(Error::InvalidSite(format!(
                "{site} (model has {limit} blocks of that kind)"
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub(crate) struct EncoderBlock {
    norm1: RmsNorm,
    attn: Attention,
    norm2: RmsNorm,
    ffn: FeedForward,
}

#[derive(Debug, Clone)]
pub(crate) struct DecoderBlock {
    norm1: RmsNorm,
    self_attn: Attention,
    norm2: RmsNorm,
    cross_attn: Attention,
    norm3: RmsNorm,
    ffn: FeedForward,
}

/// The forecaster. Weights live in [`Parameter`]s owned by the model.
#[derive(Debug, Clone)]
pub struct Model {
    pub config: ModelConfig,
    tok_emb: Parameter,
    enc_pos: Parameter,
    dec_pos: Parameter,
    enc_blocks: Vec<EncoderBlock>,
    enc_norm: RmsNorm,
    dec_blocks: Vec<DecoderBlock>,
    dec_norm: RmsNorm,
    lm_head: Parameter,
}

struct EncBlockCache {
    x_in: Matrix,
    attn: AttnCache,
    x_mid: Matrix,
    ffn: FfnCache,
}

struct DecBlockCache {
    x_in: Matrix,
    self_attn: AttnCache,
    x1: Matrix,
    cross: AttnCache,
    x2: Matrix,
    ffn: FfnCache,
}

struct Trace {
    enc_tokens: Vec<TokenId>,
    dec_tokens: Vec<TokenId>,
    targets: Vec<TokenId>,
    n_seq: usize,
    enc_blocks: Vec<EncBlockCache>,
    enc_pre_norm: Matrix,
    enc_out: Matrix,
    dec_blocks: Vec<DecBlockCache>,
    dec_pre_norm: Matrix,
    dec_normed: Matrix,
    probs: Matrix,
}

/// Per-step record of a training run.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct TrainLog {
    pub losses: Vec<f64>,
    pub learning_rates: Vec<f64>,
}

/// Optimizer settings for [`Model::train`].
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub base_lr: Float,
    pub warmup_steps: usize,
    pub seed: u64,
}

/// Sampled forecasts in original units, one row per sample.
#[derive(Debug, Clone, PartialEq)]
pub struct ForecastSampleSet {
    pub samples: Matrix,
}

impl ForecastSampleSet {
    pub fn n_samples(&self) -> usize {
        self.samples.rows()
    }

    pub fn horizon(&self) -> usize {
        self.samples.cols()
    }
}

/// Per-block self-attention key/value caches for incremental decoding.
struct DecodeState {
    /// [block][sample] -> (t x d_model)
    self_k: Vec<Vec<Matrix>>,
    self_v: Vec<Vec<Matrix>>,
    cross_k: Vec<Matrix>,
    cross_v: Vec<Matrix>,
}

fn add_rows(dst: &mut Matrix, src: &Matrix) {
    for (d, s) in dst.as_mut_slice().iter_mut().zip(src.as_slice()) {
        *d += *s;
    }
}

impl Model {
    /// Randomly initialized model; deterministic in `config.seed`.
    pub fn new(config: ModelConfig) -> Result<Self> {
        let errs = config.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let d = config.d_model;
        let depth = (config.n_encoder_blocks + config.n_decoder_blocks) as Float;
        let out_std = 1.0 / (d as Float).sqrt() / (2.0 * depth).sqrt();
        let ff_out_std = 1.0 / (config.d_ff as Float).sqrt() / (2.0 * depth).sqrt();
        let tok_emb = Parameter::new("tok_emb", Matrix::randn(config.vocab, d, 1.0, &mut rng));
        let enc_pos = Parameter::new("enc_pos", Matrix::randn(config.max_context, d, 0.1, &mut rng));
        let dec_pos = Parameter::new("dec_pos", Matrix::randn(config.max_context, d, 0.1, &mut rng));
        let enc_blocks = (0..config.n_encoder_blocks)
            .map(|i| EncoderBlock {
                norm1: RmsNorm::new(&format!("enc.{i}.norm1"), d),
                attn: Attention::new(&format!("enc.{i}.attn"), d, config.n_heads, out_std, &mut rng),
                norm2: RmsNorm::new(&format!("enc.{i}.norm2"), d),
                ffn: FeedForward::new(&format!("enc.{i}.ffn"), d, config.d_ff, ff_out_std, &mut rng),
            })
            .collect();
        let dec_blocks = (0..config.n_decoder_blocks)
            .map(|i| DecoderBlock {
                norm1: RmsNorm::new(&format!("dec.{i}.norm1"), d),
                self_attn: Attention::new(&format!("dec.{i}.attn"), d, config.n_heads, out_std, &mut rng),
                norm2: RmsNorm::new(&format!("dec.{i}.norm2"), d),
                cross_attn: Attention::new(&format!("dec.{i}.xattn"), d, config.n_heads, out_std, &mut rng),
                norm3: RmsNorm::new(&format!("dec.{i}.norm3"), d),
                ffn: FeedForward::new(&format!("dec.{i}.ffn"), d, config.d_ff, ff_out_std, &mut rng),
            })
            .collect();
        let lm_head = Parameter::new(
            "lm_head",
            Matrix::randn(d, config.vocab, 1.0 / (d as Float).sqrt(), &mut rng),
        );
        Ok(Self {
            config,
            tok_emb,
            enc_pos,
            dec_pos,
            enc_blocks,
            enc_norm: RmsNorm::new("enc.final_norm", d),
            dec_blocks,
            dec_norm: RmsNorm::new("dec.final_norm", d),
            lm_head,
        })
    }

    /// All parameters in a fixed order.
    pub fn params(&self) -> Vec<&Parameter> {
        let mut v = vec![&self.tok_emb, &self.enc_pos, &self.dec_pos];
        for b in &self.enc_blocks {
            v.push(&b.norm1.gain);
            v.extend(b.attn.params());
            v.push(&b.norm2.gain);
            v.extend(b.ffn.params());
        }
        v.push(&self.enc_norm.gain);
        for b in &self.dec_blocks {
            v.push(&b.norm1.gain);
            v.extend(b.self_attn.params());
            v.push(&b.norm2.gain);
            v.extend(b.cross_attn.params());
            v.push(&b.norm3.gain);
            v.extend(b.ffn.params());
        }
        v.push(&self.dec_norm.gain);
        v.push(&self.lm_head);
        v
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![&mut self.tok_emb, &mut self.enc_pos, &mut self.dec_pos];
        for b in &mut self.enc_blocks {
            v.push(&mut b.norm1.gain);
            v.extend(b.attn.params_mut());
            v.push(&mut b.norm2.gain);
            v.extend(b.ffn.params_mut());
        }
        v.push(&mut self.enc_norm.gain);
        for b in &mut self.dec_blocks {
            v.push(&mut b.norm1.gain);
            v.extend(b.self_attn.params_mut());
            v.push(&mut b.norm2.gain);
            v.extend(b.cross_attn.params_mut());
            v.push(&mut b.norm3.gain);
            v.extend(b.ffn.params_mut());
        }
        v.push(&mut self.dec_norm.gain);
        v.push(&mut self.lm_head);
        v
    }

    pub fn n_parameters(&self) -> usize {
        self.params().iter().map(|p| p.len()).sum()
    }

    fn check_window(&self, w: &TokenizedWindow) -> Result<()> {
        let max = self.config.max_context;
        for (what, len) in [("context", w.context_tokens.len()), ("target", w.target_tokens.len())] {
            if len == 0 || len > max {
                return Err(Error::OutOfRange {
                    what,
                    index: len,
                    limit: max,
                });
            }
        }
        if let Some(&bad) = w
            .context_tokens
            .iter()
            .chain(&w.target_tokens)
            .find(|&&t| t as usize >= self.config.vocab)
        {
            return Err(Error::OutOfRange {
                what: "token id",
                index: bad as usize,
                limit: self.config.vocab,
            });
        }
        Ok(())
    }

    fn embed(&self, tokens: &[TokenId], seq_len: usize, pos: &Parameter) -> Matrix {
        let d = self.config.d_model;
        let mut x = Matrix::zeros(tokens.len(), d);
        for (i, &t) in tokens.iter().enumerate() {
            let row = x.row_mut(i);
            let e = self.tok_emb.value.row(t as usize);
            let p = pos.value.row(i % seq_len);
            for ((o, a), b) in row.iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        x
    }

    /// Encoder stack over `n_seq` contexts of equal length. Returns the
    /// final-normed output and, when `record`, the per-block caches.
    fn run_encoder(
        &self,
        tokens: &[TokenId],
        n_seq: usize,
        hook: &mut dyn ActivationHook,
        record: bool,
    ) -> Result<(Matrix, Matrix, Vec<EncBlockCache>)> {
        let seq_len = tokens.len() / n_seq;
        let mut x = self.embed(tokens, seq_len, &self.enc_pos);
        let mut caches = Vec::new();
        for (i, b) in self.enc_blocks.iter().enumerate() {
            let n1 = b.norm1.forward(&x);
            let (a, attn) = b.attn.forward(&n1, &n1, n_seq, false)?;
            let mut x_mid = x.clone();
            add_rows(&mut x_mid, &a);
            let n2 = b.norm2.forward(&x_mid);
            let (f, ffn) = b.ffn.forward(&n2)?;
            let mut x_out = x_mid.clone();
            add_rows(&mut x_out, &f);
            let site = HookSite::encoder(i);
            if hook.wants(site) {
                hook.visit(site, &mut x_out)?;
            }
            if record {
                caches.push(EncBlockCache {
                    x_in: x,
                    attn,
                    x_mid,
                    ffn,
                });
            }
            x = x_out;
        }
        let out = self.enc_norm.forward(&x);
        Ok((out, x, caches))
    }

    /// Teacher-forced decoder over `n_seq` equal-length sequences.
    fn run_decoder(
        &self,
        tokens: &[TokenId],
        enc_out: &Matrix,
        n_seq: usize,
        hook: &mut dyn ActivationHook,
        record: bool,
    ) -> Result<(Matrix, Matrix, Vec<DecBlockCache>)> {
        let seq_len = tokens.len() / n_seq;
        let mut x = self.embed(tokens, seq_len, &self.dec_pos);
        let mut caches = Vec::new();
        for (i, b) in self.dec_blocks.iter().enumerate() {
            let n1 = b.norm1.forward(&x);
            let (a, self_attn) = b.self_attn.forward(&n1, &n1, n_seq, true)?;
            let mut x1 = x.clone();
            add_rows(&mut x1, &a);
            let n2 = b.norm2.forward(&x1);
            let (mut c, cross) = b.cross_attn.forward(&n2, enc_out, n_seq, false)?;
            let site = HookSite::cross_attention(i);
            if hook.wants(site) {
                hook.visit(site, &mut c)?;
            }
            let mut x2 = x1.clone();
            add_rows(&mut x2, &c);
            let n3 = b.norm3.forward(&x2);
            let (f, ffn) = b.ffn.forward(&n3)?;
            let mut x_out = x2.clone();
            add_rows(&mut x_out, &f);
            let site = HookSite::decoder(i);
            if hook.wants(site) {
                hook.visit(site, &mut x_out)?;
            }
            if record {
                caches.push(DecBlockCache {
                    x_in: x,
                    self_attn,
                    x1,
                    cross,
                    x2,
                    ffn,
                });
            }
            x = x_out;
        }
        let normed = self.dec_norm.forward(&x);
        Ok((normed, x, caches))
    }

    /// Decoder inputs: the pad token followed by the target shifted right.
    fn decoder_inputs(&self, w: &TokenizedWindow) -> Vec<TokenId> {
        let pad = self.config.n_bins() as TokenId;
        std::iter::once(pad)
            .chain(w.target_tokens[..w.target_tokens.len() - 1].iter().copied())
            .collect()
    }

    fn forward_batch(
        &self,
        windows: &[&TokenizedWindow],
        hook: &mut dyn ActivationHook,
        record: bool,
    ) -> Result<(f64, Trace)> {
        let n_seq = windows.len();
        if n_seq == 0 {
            return Err(Error::Empty("training batch"));
        }
        let (c_len, h_len) = (windows[0].context_tokens.len(), windows[0].target_tokens.len());
        let mut enc_tokens = Vec::with_capacity(n_seq * c_len);
        let mut dec_tokens = Vec::with_capacity(n_seq * h_len);
        let mut targets = Vec::with_capacity(n_seq * h_len);
        for w in windows {
            self.check_window(w)?;
            if w.context_tokens.len() != c_len || w.target_tokens.len() != h_len {
                return Err(Error::Length {
                    what: "window lengths within a batch",
                    left: w.context_tokens.len() + w.target_tokens.len(),
                    right: c_len + h_len,
                });
            }
            enc_tokens.extend_from_slice(&w.context_tokens);
            dec_tokens.extend(self.decoder_inputs(w));
            targets.extend_from_slice(&w.target_tokens);
        }
        let (enc_out, enc_pre_norm, enc_blocks) = self.run_encoder(&enc_tokens, n_seq, hook, record)?;
        let (dec_normed, dec_pre_norm, dec_blocks) =
            self.run_decoder(&dec_tokens, &enc_out, n_seq, hook, record)?;
        let logits = dec_normed.matmul(&self.lm_head.value)?;
        let mut probs = Matrix::zeros(logits.rows(), logits.cols());
        let mut loss = 0.0f64;
        for (r, &t) in targets.iter().enumerate() {
            let ls = log_softmax_row(logits.row(r));
            loss -= ls[t as usize];
            if record {
                for (p, l) in probs.row_mut(r).iter_mut().zip(&ls) {
                    *p = l.exp() as Float;
                }
            }
        }
        loss /= targets.len() as f64;
        Ok((
            loss,
            Trace {
                enc_tokens,
                dec_tokens,
                targets,
                n_seq,
                enc_blocks,
                enc_pre_norm,
                enc_out,
                dec_blocks,
                dec_pre_norm,
                dec_normed,
                probs,
            },
        ))
    }

    /// Mean per-token cross-entropy (nats) of target tokens under teacher forcing.
    pub fn batch_loss(&self, windows: &[&TokenizedWindow]) -> Result<f64> {
        Ok(self.forward_batch(windows, &mut NoHook, false)?.0)
    }

    /// Mean cross-entropy over many windows, evaluated in chunks.
    pub fn cross_entropy(&self, windows: &[TokenizedWindow], chunk: usize) -> Result<f64> {
        let mut total = 0.0;
        let mut count = 0usize;
        for c in windows.chunks(chunk.max(1)) {
            let refs: Vec<&TokenizedWindow> = c.iter().collect();
            let tokens: usize = c.iter().map(|w| w.target_tokens.len()).sum();
            total += self.batch_loss(&refs)? * tokens as f64;
            count += tokens;
        }
        if count == 0 {
            return Err(Error::Empty("cross-entropy windows"));
        }
        Ok(total / count as f64)
    }

    /// Forward + backward; adds gradients of the mean batch loss into every
    /// parameter's `grad` and returns the loss.
    pub fn accumulate_gradients(&mut self, windows: &[&TokenizedWindow]) -> Result<f64> {
        let (loss, trace) = self.forward_batch(windows, &mut NoHook, true)?;
        self.backward(trace)?;
        Ok(loss)
    }

    fn backward(&mut self, t: Trace) -> Result<()> {
        let n_tok = t.targets.len() as Float;
        let mut dlogits = t.probs;
        for (r, &tg) in t.targets.iter().enumerate() {
            let row = dlogits.row_mut(r);
            row[tg as usize] -= 1.0;
            row.iter_mut().for_each(|v| *v /= n_tok);
        }
        self.lm_head.grad.add_matmul_tn(&t.dec_normed, &dlogits)?;
        let dnormed = dlogits.matmul_nt(&self.lm_head.value)?;
        let mut dx = self.dec_norm.backward(&t.dec_pre_norm, &dnormed);
        let mut denc_out = Matrix::zeros(t.enc_out.rows(), t.enc_out.cols());

        for (b, c) in self.dec_blocks.iter_mut().zip(&t.dec_blocks).rev() {
            let dn3 = b.ffn.backward(&c.ffn, &dx)?;
            let mut dx2 = dx;
            add_rows(&mut dx2, &b.norm3.backward(&c.x2, &dn3));
            let (dn2, dkv) = b.cross_attn.backward(&c.cross, &dx2)?;
            add_rows(&mut denc_out, &dkv);
            let mut dx1 = dx2;
            add_rows(&mut dx1, &b.norm2.backward(&c.x1, &dn2));
            let (dq, dk) = b.self_attn.backward(&c.self_attn, &dx1)?;
            let mut dn1 = dq;
            add_rows(&mut dn1, &dk);
            let mut dxin = dx1;
            add_rows(&mut dxin, &b.norm1.backward(&c.x_in, &dn1));
            dx = dxin;
        }
        let dec_len = t.dec_tokens.len() / t.n_seq;
        for (i, &tok) in t.dec_tokens.iter().enumerate() {
            accumulate_row(&mut self.tok_emb.grad, tok as usize, dx.row(i));
            accumulate_row(&mut self.dec_pos.grad, i % dec_len, dx.row(i));
        }

        let mut dx = self.enc_norm.backward(&t.enc_pre_norm, &denc_out);
        for (b, c) in self.enc_blocks.iter_mut().zip(&t.enc_blocks).rev() {
            let dn2 = b.ffn.backward(&c.ffn, &dx)?;
            let mut dmid = dx;
            add_rows(&mut dmid, &b.norm2.backward(&c.x_mid, &dn2));
            let (dq, dk) = b.attn.backward(&c.attn, &dmid)?;
            let mut dn1 = dq;
            add_rows(&mut dn1, &dk);
            let mut dxin = dmid;
            add_rows(&mut dxin, &b.norm1.backward(&c.x_in, &dn1));
            dx = dxin;
        }
        let enc_len = t.enc_tokens.len() / t.n_seq;
        for (i, &tok) in t.enc_tokens.iter().enumerate() {
            accumulate_row(&mut self.tok_emb.grad, tok as usize, dx.row(i));
            accumulate_row(&mut self.enc_pos.grad, i % enc_len, dx.row(i));
        }
        Ok(())
    }

    /// Teacher-forced cross-entropy training with Adam and a warmup + cosine
    /// schedule. Deterministic in `cfg.seed`.
    pub fn train(&mut self, windows: &[TokenizedWindow], cfg: &TrainConfig) -> Result<TrainLog> {
        let mut log = TrainLog::default();
        if cfg.steps == 0 {
            return Ok(log);
        }
        if windows.is_empty() {
            return Err(Error::Empty("training windows"));
        }
        let schedule = LrSchedule::new(cfg.base_lr, cfg.steps, cfg.warmup_steps);
        let adam = AdamConfig::default();
        let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
        let mut order: Vec<usize> = Vec::new();
        let batch = cfg.batch.max(1).min(windows.len());
        for step in 0..cfg.steps {
            if order.len() < batch {
                let mut epoch: Vec<usize> = (0..windows.len()).collect();
                epoch.shuffle(&mut rng);
                order.extend(epoch);
            }
            let idx: Vec<usize> = order.drain(..batch).collect();
            let refs: Vec<&TokenizedWindow> = idx.iter().map(|&i| &windows[i]).collect();
            let loss = self.accumulate_gradients(&refs)?;
            if !loss.is_finite() {
                return Err(Error::Divergence {
                    step,
                    what: format!("non-finite loss {loss}"),
                });
            }
            let lr = schedule.lr(step);
            for p in self.params_mut() {
                p.adam_step(lr, adam).map_err(|e| Error::Divergence {
                    step,
                    what: e.to_string(),
                })?;
            }
            log.losses.push(loss);
            log.learning_rates.push(lr as f64);
        }
        Ok(log)
    }

    /// Final-normed encoder output for one context.
    fn encode_context(&self, w: &TokenizedWindow, hook: &mut dyn ActivationHook) -> Result<Matrix> {
        Ok(self.run_encoder(&w.context_tokens, 1, hook, false)?.0)
    }

    fn start_decoding(&self, enc_out: &Matrix, n_samples: usize) -> Result<DecodeState> {
        let mut st = DecodeState {
            self_k: Vec::new(),
            self_v: Vec::new(),
            cross_k: Vec::new(),
            cross_v: Vec::new(),
        };
        let d = self.config.d_model;
        for b in &self.dec_blocks {
            st.cross_k.push(enc_out.matmul(&b.cross_attn.wk.value)?);
            st.cross_v.push(enc_out.matmul(&b.cross_attn.wv.value)?);
            st.self_k.push((0..n_samples).map(|_| Matrix::zeros(0, d)).collect());
            st.self_v.push((0..n_samples).map(|_| Matrix::zeros(0, d)).collect());
        }
        Ok(st)
    }

    /// One decoding position for every sample; returns (n_samples x vocab) logits.
    fn decode_step(
        &self,
        st: &mut DecodeState,
        tokens: &[TokenId],
        pos: usize,
        hook: &mut dyn ActivationHook,
    ) -> Result<Matrix> {
        let n = tokens.len();
        let d = self.config.d_model;
        let mut x = Matrix::zeros(n, d);
        for (s, &t) in tokens.iter().enumerate() {
            let e = self.tok_emb.value.row(t as usize);
            let p = self.dec_pos.value.row(pos);
            for ((o, a), b) in x.row_mut(s).iter_mut().zip(e).zip(p) {
                *o = a + b;
            }
        }
        for (i, b) in self.dec_blocks.iter().enumerate() {
            let n1 = b.norm1.forward(&x);
            let q = n1.matmul(&b.self_attn.wq.value)?;
            let k = n1.matmul(&b.self_attn.wk.value)?;
            let v = n1.matmul(&b.self_attn.wv.value)?;
            let mut concat = Matrix::zeros(n, d);
            for s in 0..n {
                st.self_k[i][s].push_rows(&k.slice_rows(s, 1))?;
                st.self_v[i][s].push_rows(&v.slice_rows(s, 1))?;
                b.self_attn
                    .attend_cached(q.row(s), &st.self_k[i][s], &st.self_v[i][s], concat.row_mut(s));
            }
            add_rows(&mut x, &concat.matmul(&b.self_attn.wo.value)?);

            let n2 = b.norm2.forward(&x);
            let q = n2.matmul(&b.cross_attn.wq.value)?;
            let mut concat = Matrix::zeros(n, d);
            for s in 0..n {
                b.cross_attn
                    .attend_cached(q.row(s), &st.cross_k[i], &st.cross_v[i], concat.row_mut(s));
            }
            let mut c = concat.matmul(&b.cross_attn.wo.value)?;
            let site = HookSite::cross_attention(i);
            if hook.wants(site) {
                hook.visit(site, &mut c)?;
            }
            add_rows(&mut x, &c);

            let n3 = b.norm3.forward(&x);
            let (f, _) = b.ffn.forward(&n3)?;
            add_rows(&mut x, &f);
            let site = HookSite::decoder(i);
            if hook.wants(site) {
                hook.visit(site, &mut x)?;
            }
        }
        self.dec_norm.forward(&x).matmul(&self.lm_head.value)
    }

    /// Autoregressive sampling of `n_samples` trajectories of the window's
    /// horizon, with special tokens masked. `temperature <= 1e-6` is greedy.
    pub fn forecast(
        &self,
        w: &TokenizedWindow,
        tok: &TokenizerConfig,
        n_samples: usize,
        temperature: Float,
        seed: u64,
    ) -> Result<ForecastSampleSet> {
        self.forecast_with_hook(w, tok, n_samples, temperature, seed, &mut NoHook)
    }

    /// [`Model::forecast`] with a hook observing or editing activations.
    pub fn forecast_with_hook(
        &self,
        w: &TokenizedWindow,
        tok: &TokenizerConfig,
        n_samples: usize,
        temperature: Float,
        seed: u64,
        hook: &mut dyn ActivationHook,
    ) -> Result<ForecastSampleSet> {
        if n_samples == 0 {
            return Err(Error::Empty("forecast samples"));
        }
        self.check_window(w)?;
        let n_bins = self.config.n_bins();
        if tok.n_bins as usize != n_bins {
            return Err(Error::Length {
                what: "tokenizer bins vs model vocabulary",
                left: tok.n_bins as usize,
                right: n_bins,
            });
        }
        let horizon = w.target_tokens.len();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let enc_out = self.encode_context(w, hook)?;
        let mut st = self.start_decoding(&enc_out, n_samples)?;
        let mut current = vec![n_bins as TokenId; n_samples];
        let mut drawn: Vec<Vec<TokenId>> = vec![Vec::with_capacity(horizon); n_samples];
        for pos in 0..horizon {
            let logits = self.decode_step(&mut st, &current, pos, hook)?;
            for s in 0..n_samples {
                let t = sample_bin(&logits.row(s)[..n_bins], temperature, &mut rng);
                drawn[s].push(t);
                current[s] = t;
            }
        }
        let mut samples = Matrix::zeros(n_samples, horizon);
        for (s, toks) in drawn.iter().enumerate() {
            let vals = dequantize(toks, w.scale, tok)?;
            samples.row_mut(s).copy_from_slice(&vals);
        }
        Ok(ForecastSampleSet { samples })
    }

    /// Teacher-forced pass recording activations at `sites`. Encoder sites
    /// yield one row per context position, decoder-side sites one row per
    /// target position.
    pub fn forward_capture(
        &self,
        w: &TokenizedWindow,
        sites: &[HookSite],
    ) -> Result<std::collections::BTreeMap<HookSite, Matrix>> {
        for &s in sites {
            self.config.validate_site(s)?;
        }
        let mut hook = CaptureHook::new(sites);
        if sites.is_empty() {
            return Ok(hook.captured);
        }
        if sites.iter().all(|s| s.kind.is_encoder()) {
            self.check_window(w)?;
            self.run_encoder(&w.context_tokens, 1, &mut hook, false)?;
        } else {
            self.forward_batch(&[w], &mut hook, false)?;
        }
        Ok(hook.captured)
    }

    /// Forecast with activations at `site` replaced by `edit(activations)`.
    pub fn forward_patch<F: FnMut(&Matrix) -> Matrix>(
        &self,
        w: &TokenizedWindow,
        tok: &TokenizerConfig,
        site: HookSite,
        edit: F,
        n_samples: usize,
        temperature: Float,
        seed: u64,
    ) -> Result<ForecastSampleSet> {
        self.config.validate_site(site)?;
        let mut hook = PatchHook::new(site, edit);
        self.forecast_with_hook(w, tok, n_samples, temperature, seed, &mut hook)
    }

    /// Logits of a teacher-forced pass for one window (H x vocab).
    pub fn teacher_forced_logits(&self, w: &TokenizedWindow) -> Result<Matrix> {
        self.check_window(w)?;
        let enc = self.encode_context(w, &mut NoHook)?;
        let (normed, _, _) = self.run_decoder(&self.decoder_inputs(w), &enc, 1, &mut NoHook, false)?;
        normed.matmul(&self.lm_head.value)
    }

    /// Logits produced by incremental decoding on the given decoder inputs.
    pub fn incremental_logits(&self, w: &TokenizedWindow) -> Result<Matrix> {
        let enc = self.encode_context(w, &mut NoHook)?;
        let mut st = self.start_decoding(&enc, 1)?;
        let mut out = Matrix::zeros(0, self.config.vocab);
        for (pos, &t) in self.decoder_inputs(w).iter().enumerate() {
            out.push_rows(&self.decode_step(&mut st, &[t], pos, &mut NoHook)?)?;
        }
        Ok(out)
    }
}

fn accumulate_row(m: &mut Matrix, r: usize, src: &[Float]) {
    for (d, s) in m.row_mut(r).iter_mut().zip(src) {
        *d += *s;
    }
}

/// Draws a bin from temperature-scaled logits; greedy (lowest index on ties)
/// when the temperature is ~0.
fn sample_bin<R: Rng + ?Sized>(logits: &[Float], temperature: Float, rng: &mut R) -> TokenId {
    if temperature <= 1e-6 {
        let mut best = 0;
        for (i, &v) in logits.iter().enumerate() {
            if v > logits[best] {
                best = i;
            }
        }
        return best as TokenId;
    }
    let t = temperature as f64;
    let max = logits.iter().copied().fold(Float::NEG_INFINITY, Float::max) as f64;
    let weights: Vec<f64> = logits.iter().map(|&v| ((v as f64 - max) / t).exp()).collect();
    let total: f64 = weights.iter().sum();
    let mut u = rng.gen::<f64>() * total;
    for (i, w) in weights.iter().enumerate() {
        if u < *w {
            return i as TokenId;
        }
        u -= w;
    }
    (weights.len() - 1) as TokenId
}

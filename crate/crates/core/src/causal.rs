//! Causal validation: empirical CRPS, single-feature and progressive
//! ablation through SAE-reconstruction patches, and summary statistics.

use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::forecaster::{ActivationHook, HookSite, Model};
use crate::numerics::{derive_seed, Float, Matrix};
use crate::sae::Sae;
use crate::taxonomy::csv_err;
use crate::tokenizer::{PreparedWindow, TokenizerConfig};

/// CRPS of the empirical distribution of `samples` against `y`:
/// `mean|x_i - y| - (1 / 2m²) Σ_ij |x_i - x_j|`.
pub fn crps_empirical(samples: &[f64], y: f64) -> f64 {
    let m = samples.len();
    if m == 0 {
        return f64::NAN;
    }
    let m = m as f64;
    let abs_err: f64 = samples.iter().map(|x| (x - y).abs()).sum::<f64>() / m;
    let mut spread = 0.0;
    for a in samples {
        for b in samples {
            spread += (a - b).abs();
        }
    }
    (abs_err - spread / (2.0 * m * m)).max(0.0)
}

/// Mean CRPS over the horizon; `samples` is n_samples x H.
pub fn window_crps(samples: &Matrix, target: &[Float]) -> Result<f64> {
    if samples.cols() != target.len() {
        return Err(Error::Length {
            what: "forecast horizon vs target",
            left: samples.cols(),
            right: target.len(),
        });
    }
    let h = target.len();
    let mut total = 0.0;
    for (t, &y) in target.iter().enumerate() {
        let col: Vec<f64> = (0..samples.rows()).map(|s| samples.get(s, t) as f64).collect();
        total += crps_empirical(&col, y as f64);
    }
    Ok(total / h.max(1) as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AblationConfig {
    /// Sites a pipeline run ablates. [`Ablation`] itself uses the SAE's site.
    #[serde(default)]
    pub sites: Vec<HookSite>,
    pub n_windows: usize,
    pub pred_len: usize,
    pub n_samples: usize,
    /// Number of top-ranked features ablated one at a time.
    pub n_features: usize,
    pub checkpoints: Vec<usize>,
    pub temperature: Float,
    pub seed: u64,
}

impl AblationConfig {
    /// Small preset: 256 windows, top 64 features, checkpoints up to 64.
    pub fn ultra_fast() -> Self {
        Self {
            sites: Vec::new(),
            n_windows: 256,
            pred_len: 64,
            n_samples: 4,
            n_features: 64,
            checkpoints: vec![1, 2, 4, 8, 16, 32, 64],
            temperature: 1.0,
            seed: 0,
        }
    }

    /// Large preset: 1024 windows, every checkpoint up to 200.
    pub fn extended() -> Self {
        Self {
            sites: Vec::new(),
            n_windows: 1024,
            pred_len: 64,
            n_samples: 8,
            n_features: 200,
            checkpoints: (1..=200).collect(),
            temperature: 1.0,
            seed: 0,
        }
    }

    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.n_windows == 0 {
            errs.push("ablation.n_windows must be >= 1".to_string());
        }
        if self.n_samples == 0 {
            errs.push("ablation.n_samples must be >= 1".to_string());
        }
        if self.pred_len == 0 {
            errs.push("ablation.pred_len must be >= 1".to_string());
        }
        if self.checkpoints.windows(2).any(|w| w[0] >= w[1]) {
            errs.push("ablation.checkpoints must be strictly ascending".to_string());
        }
        if self.checkpoints.first() == Some(&0) {
            errs.push("ablation.checkpoints must be >= 1 (0 is the implicit baseline)".to_string());
        }
        errs
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRecord {
    pub site: HookSite,
    pub feature: usize,
    pub crps_original: f64,
    pub crps_ablated: f64,
    pub delta: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationSummary {
    pub n: usize,
    pub mean: f64,
    /// Lower-middle element for even n.
    pub median: f64,
    pub max: f64,
    /// Population standard deviation.
    pub std: f64,
    pub positive_fraction: f64,
    /// `None` when the median is not positive.
    pub max_over_median: Option<f64>,
}

pub fn summarize(deltas: &[f64]) -> Result<AblationSummary> {
    if deltas.is_empty() {
        return Err(Error::Empty("ablation records"));
    }
    let n = deltas.len();
    let mean = deltas.iter().sum::<f64>() / n as f64;
    let mut sorted = deltas.to_vec();
    sorted.sort_by(f64::total_cmp);
    let median = sorted[(n - 1) / 2];
    let max = sorted[n - 1];
    let std = (deltas.iter().map(|d| (d - mean).powi(2)).sum::<f64>() / n as f64).sqrt();
    let positive_fraction = deltas.iter().filter(|&&d| d > 0.0).count() as f64 / n as f64;
    Ok(AblationSummary {
        n,
        mean,
        median,
        max,
        std,
        positive_fraction,
        max_over_median: (median > 0.0).then(|| max / median),
    })
}

/// Decoder-norm contribution: `mean |z_j| · ||col_j||` over `rows`.
/// Returns (feature, score) in descending score order, ties by index.
pub fn rank_features(sae: &Sae, rows: &Matrix) -> Result<Vec<(usize, f64)>> {
    let mut mass = vec![0.0f64; sae.d_sae()];
    for z in sae.encode_batch(rows)? {
        for (&j, &v) in z.indices.iter().zip(&z.values) {
            mass[j] += (v as f64).abs();
        }
    }
    let n = rows.rows().max(1) as f64;
    let mut scores: Vec<(usize, f64)> = mass
        .iter()
        .enumerate()
        .map(|(j, m)| (j, m / n * sae.decoder_column_norm(j)))
        .collect();
    scores.sort_by(|a, b| b.1.total_cmp(&a.1).then(a.0.cmp(&b.0)));
    Ok(scores)
}

/// Replaces activations at the SAE's site with the SAE reconstruction,
/// minus the contributions of `removed` features.
pub struct SaePatch<'a> {
    pub sae: &'a Sae,
    pub removed: &'a [usize],
}

impl ActivationHook for SaePatch<'_> {
    fn wants(&self, site: HookSite) -> bool {
        site == self.sae.site
    }

    fn visit(&mut self, _: HookSite, acts: &mut Matrix) -> Result<()> {
        let codes = self.sae.encode_batch(acts)?;
        for (r, z) in codes.iter().enumerate() {
            let kept = if self.removed.is_empty() {
                self.sae.decode(z)?
            } else {
                self.sae.decode(&z.without(self.removed))?
            };
            acts.row_mut(r).copy_from_slice(&kept);
        }
        Ok(())
    }
}

/// Shared state for ablation runs over a fixed window set.
pub struct Ablation<'a> {
    pub model: &'a Model,
    pub tok: &'a TokenizerConfig,
    pub sae: &'a Sae,
    pub windows: &'a [PreparedWindow],
    pub cfg: &'a AblationConfig,
}

impl<'a> Ablation<'a> {
    pub fn new(
        model: &'a Model,
        tok: &'a TokenizerConfig,
        sae: &'a Sae,
        windows: &'a [PreparedWindow],
        cfg: &'a AblationConfig,
    ) -> Result<Self> {
        let errs = cfg.validate();
        if !errs.is_empty() {
            return Err(Error::Config(errs));
        }
        model.config.validate_site(sae.site)?;
        if sae.d_model() != model.config.d_model {
            return Err(Error::Dimension {
                op: "SAE vs model width",
                left: (0, sae.d_model()),
                right: (0, model.config.d_model),
            });
        }
        let windows = &windows[..windows.len().min(cfg.n_windows)];
        if windows.is_empty() {
            return Err(Error::Empty("ablation windows"));
        }
        for w in windows {
            if w.window.target.len() != cfg.pred_len {
                return Err(Error::Length {
                    what: "window horizon vs ablation.pred_len",
                    left: w.window.target.len(),
                    right: cfg.pred_len,
                });
            }
        }
        Ok(Self {
            model,
            tok,
            sae,
            windows,
            cfg,
        })
    }

    fn run(&self, hook: &mut dyn FnMut() -> Option<SaePatch<'a>>) -> Result<f64> {
        let mut total = 0.0;
        for w in self.windows {
            let seed = derive_seed(self.cfg.seed, w.id);
            let f = match hook() {
                Some(mut patch) => self.model.forecast_with_hook(
                    &w.tokens,
                    self.tok,
                    self.cfg.n_samples,
                    self.cfg.temperature,
                    seed,
                    &mut patch,
                )?,
                None => self
                    .model
                    .forecast(&w.tokens, self.tok, self.cfg.n_samples, self.cfg.temperature, seed)?,
            };
            total += window_crps(&f.samples, &w.window.target)?;
        }
        Ok(total / self.windows.len() as f64)
    }

    /// Run CRPS with the reconstruction patch and `removed` features dropped.
    pub fn crps_without(&self, removed: &'a [usize]) -> Result<f64> {
        let sae = self.sae;
        self.run(&mut || Some(SaePatch { sae, removed }))
    }

    /// Run CRPS of the unpatched model.
    pub fn clean_crps(&self) -> Result<f64> {
        self.run(&mut || None)
    }

    /// Run CRPS with the full reconstruction patch.
    pub fn baseline_crps(&self) -> Result<f64> {
        self.crps_without(&[])
    }

    pub fn ablate_single(&self, feature: usize, baseline: f64) -> Result<AblationRecord> {
        if feature >= self.sae.d_sae() {
            return Err(Error::OutOfRange {
                what: "SAE feature",
                index: feature,
                limit: self.sae.d_sae(),
            });
        }
        let removed = [feature];
        let sae = self.sae;
        let ablated = self.run(&mut || {
            Some(SaePatch {
                sae,
                removed: &removed,
            })
        })?;
        Ok(AblationRecord {
            site: self.sae.site,
            feature,
            crps_original: baseline,
            crps_ablated: ablated,
            delta: ablated - baseline,
        })
    }

    /// (checkpoint, run CRPS) for checkpoint 0 (baseline) and each
    /// configured checkpoint not exceeding the ranking length.
    pub fn ablate_progressive(&self, ranking: &[usize], baseline: f64) -> Result<Vec<(usize, f64)>> {
        let mut out = vec![(0, baseline)];
        for &c in self.cfg.checkpoints.iter().filter(|&&c| c <= ranking.len()) {
            let removed = &ranking[..c];
            let sae = self.sae;
            out.push((c, self.run(&mut || Some(SaePatch { sae, removed }))?));
        }
        Ok(out)
    }
}

fn writer(path: &Path) -> Result<csv::Writer<std::fs::File>> {
    csv::Writer::from_path(path).map_err(|e| csv_err(path, e))
}

pub fn write_records_csv(path: &Path, records: &[AblationRecord]) -> Result<()> {
    let mut w = writer(path)?;
    let e = |e| csv_err(path, e);
    w.write_record(["site", "feature", "crps_orig", "crps_ablated", "delta"]).map_err(e)?;
    for r in records {
        w.write_record([
            r.site.to_string(),
            r.feature.to_string(),
            format!("{:.9}", r.crps_original),
            format!("{:.9}", r.crps_ablated),
            format!("{:.9}", r.delta),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

pub fn write_progressive_csv(path: &Path, curves: &[(HookSite, Vec<(usize, f64)>)]) -> Result<()> {
    let mut w = writer(path)?;
    let e = |e| csv_err(path, e);
    w.write_record(["site", "checkpoint", "crps"]).map_err(e)?;
    for (site, curve) in curves {
        for (c, v) in curve {
            w.write_record([site.to_string(), c.to_string(), format!("{v:.9}")]).map_err(e)?;
        }
    }
    w.flush().map_err(|err| Error::io(path, err))
}

/// One Table-1-shaped row per site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteSummary {
    pub site: HookSite,
    pub crps_clean: f64,
    pub crps_baseline: f64,
    pub summary: AblationSummary,
}

pub fn write_summary_csv(path: &Path, rows: &[SiteSummary]) -> Result<()> {
    let mut w = writer(path)?;
    let e = |e| csv_err(path, e);
    w.write_record([
        "site",
        "n",
        "mean",
        "median",
        "max",
        "std",
        "pos_frac",
        "max_over_median",
        "crps_clean",
        "crps_baseline",
    ])
    .map_err(e)?;
    for r in rows {
        let s = &r.summary;
        w.write_record([
            r.site.to_string(),
            s.n.to_string(),
            format!("{:.6}", s.mean),
            format!("{:.6}", s.median),
            format!("{:.6}", s.max),
            format!("{:.6}", s.std),
            format!("{:.4}", s.positive_fraction),
            s.max_over_median.map(|v| format!("{v:.4}")).unwrap_or_else(|| "undefined".into()),
            format!("{:.6}", r.crps_clean),
            format!("{:.6}", r.crps_baseline),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forecaster::ModelConfig;
    use crate::series::{gen_diagnostic_suite, make_windows};
    use crate::tokenizer::prepare_windows;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn crps_examples() {
        assert_eq!(crps_empirical(&[3.0], 3.0), 0.0);
        assert_eq!(crps_empirical(&[0.0, 2.0], 1.0), 0.5);
        // Integral: 0.25 on [0, 2) plus 1 on [2, 10).
        assert_eq!(crps_empirical(&[0.0, 2.0], 10.0), 8.5);
        assert!(crps_empirical(&[1.0, 1.0, 1.5], 1.0) > 0.0);
    }

    #[test]
    fn summary_examples() {
        let s = summarize(&[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((s.mean, s.median, s.max, s.positive_fraction), (2.0, 2.0, 3.0, 1.0));
        assert_eq!(s.max_over_median, Some(1.5));
        let s = summarize(&[5.0]).unwrap();
        assert_eq!((s.mean, s.median, s.max, s.std), (5.0, 5.0, 5.0, 0.0));
        assert_eq!(s.max_over_median, Some(1.0));
        assert_eq!(summarize(&[-1.0, 1.0]).unwrap().positive_fraction, 0.5);
        assert_eq!(summarize(&[-1.0, 1.0]).unwrap().median, -1.0);
        assert_eq!(summarize(&[-1.0, 1.0]).unwrap().max_over_median, None);
        assert!(matches!(summarize(&[]), Err(Error::Empty(_))));
    }

    #[test]
    fn ranking_is_linear_in_column_norm() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut sae = Sae::new(HookSite::encoder(0), 6, 12, 3, 4).unwrap();
        let x = Matrix::randn(100, 6, 1.0, &mut rng);
        let base = rank_features(&sae, &x).unwrap();
        let codes = sae.encode_batch(&x).unwrap();
        let j = base[3].0;
        for i in 0..6 {
            let v = sae.w_dec.value.get(i, j);
            sae.w_dec.value.set(i, j, 2.0 * v);
        }
        // Codes depend on W_enc only, so they are unchanged.
        assert_eq!(sae.encode_batch(&x).unwrap(), codes);
        let doubled = rank_features(&sae, &x).unwrap();
        let s0 = base.iter().find(|p| p.0 == j).unwrap().1;
        let s1 = doubled.iter().find(|p| p.0 == j).unwrap().1;
        assert!((s1 / s0 - 2.0).abs() < 1e-6);
    }

    fn tiny() -> (Model, TokenizerConfig, Vec<PreparedWindow>) {
        let model = Model::new(ModelConfig {
            n_encoder_blocks: 2,
            n_decoder_blocks: 2,
            d_model: 8,
            n_heads: 2,
            d_ff: 16,
            vocab: 18,
            max_context: 16,
            seed: 1,
        })
        .unwrap();
        let tok = TokenizerConfig {
            n_bins: 16,
            clip_lo: -3.0,
            clip_hi: 3.0,
        };
        let suite = gen_diagnostic_suite(3, 1, 128);
        let ws = make_windows(&suite[1].series, 12, 4, 6, 8, 0).unwrap();
        (model, tok, prepare_windows(ws, &tok, 100))
    }

    fn cfg() -> AblationConfig {
        AblationConfig {
            sites: Vec::new(),
            n_windows: 6,
            pred_len: 4,
            n_samples: 3,
            n_features: 4,
            checkpoints: vec![1, 2, 4],
            temperature: 1.0,
            seed: 9,
        }
    }

    #[test]
    fn null_ablation_is_exactly_zero() {
        let (model, tok, windows) = tiny();
        let mut sae = Sae::new(HookSite::encoder(1), 8, 16, 3, 5).unwrap();
        sae.w_enc.value.row_mut(7).fill(0.0);
        sae.b_enc.value.as_mut_slice()[7] = -1e9;
        let cfg = cfg();
        let ab = Ablation::new(&model, &tok, &sae, &windows, &cfg).unwrap();
        let base = ab.baseline_crps().unwrap();
        let rec = ab.ablate_single(7, base).unwrap();
        assert_eq!(rec.delta.to_bits(), 0.0f64.to_bits());
        assert_eq!(rec.crps_ablated, rec.crps_original);
    }

    #[test]
    fn progressive_starts_at_baseline_and_ignores_order() {
        let (model, tok, windows) = tiny();
        let sae = Sae::new(HookSite::decoder(1), 8, 16, 4, 5).unwrap();
        let cfg = cfg();
        let ab = Ablation::new(&model, &tok, &sae, &windows, &cfg).unwrap();
        let base = ab.baseline_crps().unwrap();
        let curve = ab.ablate_progressive(&[3, 1, 4, 9], base).unwrap();
        assert_eq!(curve[0], (0, base));
        assert_eq!(curve.iter().map(|c| c.0).collect::<Vec<_>>(), vec![0, 1, 2, 4]);
        let swapped = ab.ablate_progressive(&[9, 4, 1, 3], base).unwrap();
        assert_eq!(curve[3].1, swapped[3].1);
    }

    #[test]
    fn removing_every_feature_patches_b_dec() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let sae = Sae::new(HookSite::encoder(0), 6, 12, 3, 4).unwrap();
        let mut acts = Matrix::randn(5, 6, 1.0, &mut rng);
        let all: Vec<usize> = (0..12).collect();
        let mut p = SaePatch {
            sae: &sae,
            removed: &all,
        };
        p.visit(HookSite::encoder(0), &mut acts).unwrap();
        for r in 0..5 {
            for (a, b) in acts.row(r).iter().zip(sae.b_dec.value.as_slice()) {
                assert!((a - b).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn out_of_range_feature_is_rejected() {
        let (model, tok, windows) = tiny();
        let sae = Sae::new(HookSite::encoder(1), 8, 16, 3, 5).unwrap();
        let cfg = cfg();
        let ab = Ablation::new(&model, &tok, &sae, &windows, &cfg).unwrap();
        assert!(matches!(ab.ablate_single(16, 0.0), Err(Error::OutOfRange { .. })));
    }
}

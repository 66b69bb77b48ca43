use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::causal::AblationConfig;
use crate::error::{Error, Result};
use crate::forecaster::{HookSite, ModelConfig};
use crate::numerics::Float;
use crate::sae::SaeConfig;
use crate::tokenizer::TokenizerConfig;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct DataConfig {
    /// CSV with a header row; resolved against the config file's directory.
    pub csv_path: Option<PathBuf>,
    pub value_column: String,
    /// Fraction of the CSV series (from the start) used for training
    /// windows; ablation windows come from the remainder.
    pub csv_train_fraction: f64,
    pub train_suite_per_family: usize,
    pub taxonomy_suite_per_family: usize,
    pub suite_length: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WindowConfig {
    pub context_len: usize,
    pub pred_len: usize,
    /// Cap on training windows cut from each series.
    pub train_per_series: usize,
    /// Cap on training windows cut from the CSV series.
    pub csv_train_windows: usize,
    pub train_stride: usize,
    /// Every n-th training window is held out for cross-entropy.
    pub holdout_every: usize,
    pub taxonomy_per_series: usize,
    pub eval_stride: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ForecasterTrainConfig {
    pub steps: usize,
    pub batch: usize,
    pub base_lr: Float,
    pub warmup_steps: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TaxonomyConfig {
    pub r_threshold: f64,
    /// Counts below this are hidden in printed tables (CSV stays complete).
    pub display_floor: usize,
}

/// Full experiment description. Each section's own `seed` is combined with
/// the global `seed`, so overriding the global seed reseeds every stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub workdir: PathBuf,
    pub data: DataConfig,
    pub tokenizer: TokenizerConfig,
    pub windows: WindowConfig,
    pub model: ModelConfig,
    pub train: ForecasterTrainConfig,
    pub sae: SaeConfig,
    /// Hook sites with SAEs.
    pub sites: Vec<HookSite>,
    pub taxonomy: TaxonomyConfig,
    pub ablation: AblationConfig,
}

impl ExperimentConfig {
    /// Reads a config; a relative `data.csv_path` is resolved against the
    /// config file's directory.
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg: ExperimentConfig =
            serde_json::from_str(&text).map_err(|e| Error::Config(vec![format!("{}: {e}", path.display())]))?;
        if let Some(csv) = &cfg.data.csv_path {
            if csv.is_relative() {
                let base = path.parent().unwrap_or(Path::new("."));
                cfg.data.csv_path = Some(base.join(csv));
            }
        }
        Ok(cfg)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    /// SHA-256 of the canonical JSON form, excluding `workdir`.
    pub fn hash(&self) -> Result<String> {
        let mut c = self.clone();
        c.workdir = PathBuf::new();
        let digest = Sha256::digest(serde_json::to_vec(&c)?);
        Ok(digest.iter().map(|b| format!("{b:02x}")).collect())
    }

    /// Sets the seed everywhere it is used.
    pub fn with_seed(mut self, seed: u64) -> Self {
        self.seed = seed;
        self
    }

    /// Every violated constraint, as `key: message`.
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        errs.extend(self.tokenizer.validate());
        errs.extend(self.model.validate());
        errs.extend(self.sae.validate());
        errs.extend(self.ablation.validate());
        if self.model.vocab != self.tokenizer.vocab_size() {
            errs.push(format!(
                "model.vocab ({}) must equal tokenizer.n_bins + 2 ({})",
                self.model.vocab,
                self.tokenizer.vocab_size()
            ));
        }
        let w = &self.windows;
        if w.context_len == 0 || w.pred_len == 0 {
            errs.push("windows.context_len and windows.pred_len must be >= 1".into());
        }
        if w.context_len > self.model.max_context || w.pred_len > self.model.max_context {
            errs.push(format!(
                "windows.context_len/pred_len must not exceed model.max_context ({})",
                self.model.max_context
            ));
        }
        if w.holdout_every < 2 {
            errs.push("windows.holdout_every must be >= 2".into());
        }
        if w.train_stride == 0 || w.eval_stride == 0 {
            errs.push("windows.train_stride and windows.eval_stride must be >= 1".into());
        }
        if self.data.suite_length < w.context_len + w.pred_len {
            errs.push(format!(
                "data.suite_length ({}) must be >= windows.context_len + windows.pred_len",
                self.data.suite_length
            ));
        }
        if self.data.suite_length < 128 {
            errs.push("data.suite_length must be >= 128".into());
        }
        if self.data.taxonomy_suite_per_family == 0 {
            errs.push("data.taxonomy_suite_per_family must be >= 1".into());
        }
        if !(0.0..1.0).contains(&self.data.csv_train_fraction) || self.data.csv_train_fraction == 0.0 {
            errs.push("data.csv_train_fraction must be in (0, 1)".into());
        }
        if self.data.csv_path.is_none() {
            errs.push("data.csv_path is required (ablation windows come from it)".into());
        }
        if self.ablation.pred_len != w.pred_len {
            errs.push(format!(
                "ablation.pred_len ({}) must equal windows.pred_len ({})",
                self.ablation.pred_len, w.pred_len
            ));
        }
        if let Some(&last) = self.ablation.checkpoints.last() {
            if last > self.sae.d_sae {
                errs.push(format!("ablation.checkpoints exceed sae.d_sae ({})", self.sae.d_sae));
            }
        }
        if self.ablation.n_features > self.sae.d_sae {
            errs.push("ablation.n_features must not exceed sae.d_sae".into());
        }
        if self.train.batch == 0 {
            errs.push("train.batch must be >= 1".into());
        }
        if !(self.train.base_lr > 0.0) {
            errs.push("train.base_lr must be positive".into());
        }
        if !(0.0..=1.0).contains(&self.taxonomy.r_threshold) {
            errs.push("taxonomy.r_threshold must be in [0, 1]".into());
        }
        if self.sites.is_empty() {
            errs.push("sites must list at least one hook site".into());
        }
        for s in &self.sites {
            if let Err(e) = self.model.validate_site(*s) {
                errs.push(format!("sites: {e}"));
            }
        }
        for s in &self.ablation.sites {
            if !self.sites.contains(s) {
                errs.push(format!("ablation.sites: {s} is not listed in sites"));
            }
        }
        errs
    }

    pub fn validated(self) -> Result<Self> {
        let errs = self.validate();
        if errs.is_empty() {
            Ok(self)
        } else {
            Err(Error::Config(errs))
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn bundled() -> ExperimentConfig {
        let p = Path::new(env!("CARGO_MANIFEST_DIR")).join("configs/desk.json");
        ExperimentConfig::load(&p).unwrap()
    }

    #[test]
    fn bundled_config_is_valid_and_round_trips() {
        let cfg = bundled();
        assert_eq!(cfg.validate(), Vec::<String>::new());
        let back: ExperimentConfig = serde_json::from_str(&cfg.to_json().unwrap()).unwrap();
        assert_eq!(back, cfg);
        assert_eq!(back.hash().unwrap(), cfg.hash().unwrap());
    }

    #[test]
    fn every_violation_is_reported() {
        let mut cfg = bundled();
        cfg.model.vocab = 7;
        cfg.sae.k = cfg.sae.d_sae + 1;
        cfg.ablation.checkpoints = vec![4, 2];
        cfg.sites.push("enc.9".parse().unwrap());
        let errs = cfg.validate();
        assert!(errs.iter().any(|e| e.contains("model.vocab")));
        assert!(errs.iter().any(|e| e.contains("sae.k")));
        assert!(errs.iter().any(|e| e.contains("checkpoints")));
        assert!(errs.iter().any(|e| e.contains("enc.9")));
    }

    #[test]
    fn unknown_keys_are_config_errors() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("c.json");
        let mut v: serde_json::Value = serde_json::from_str(&bundled().to_json().unwrap()).unwrap();
        v["sae"]["bogus"] = 1.into();
        v["surprise"] = 1.into();
        fs::write(&p, v.to_string()).unwrap();
        assert!(matches!(ExperimentConfig::load(&p), Err(Error::Config(_))));
    }

    #[test]
    fn hash_ignores_workdir_but_not_seed() {
        let a = bundled();
        let mut b = a.clone();
        b.workdir = "elsewhere".into();
        assert_eq!(a.hash().unwrap(), b.hash().unwrap());
        assert_ne!(a.hash().unwrap(), a.clone().with_seed(a.seed + 1).hash().unwrap());
    }
}

//! Staged experiment driver. Every stage reads its inputs from, and writes
//! its artifacts into, one work directory; `manifest.json` records what ran.

pub mod config;
pub mod report;

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use serde::{Deserialize, Serialize};

use crate::actstore::{extract, shard_file_name, Shard};
use crate::causal::{
    rank_features, summarize, write_progressive_csv, write_records_csv, write_summary_csv, Ablation,
    AblationRecord, SiteSummary,
};
use crate::error::{Error, Result};
use crate::forecaster::{load_checkpoint, save_checkpoint, HookSite, Model, ModelConfig, TrainConfig};
use crate::numerics::derive_seed;
use crate::sae::{load_sae, sample_rows, save_sae, train_sae, SaeConfig};
use crate::series::{export_suite, gen_diagnostic_suite, import_suite, load_csv, make_windows, Series};
use crate::taxonomy::{
    channel_matrix, classify_all, feature_trace, taxonomy_report, write_counts_csv, write_profiles_csv, TaxonomyReport,
};
use crate::tokenizer::{prepare_windows, PreparedWindow};

pub use config::ExperimentConfig;

pub const STAGES: [&str; 7] = [
    "gen-data",
    "train-model",
    "extract",
    "train-sae",
    "taxonomy",
    "ablate",
    "report",
];

// Sub-streams of the global seed.
const SEED_TRAIN_SUITE: u64 = 1;
const SEED_TAXONOMY_SUITE: u64 = 2;
const SEED_WINDOWS: u64 = 3;
const SEED_TRAIN_ORDER: u64 = 4;
const SEED_SCAN: u64 = 5;

const TAXONOMY_ID_BASE: u64 = 1_000_000;
const EVAL_ID_BASE: u64 = 2_000_000;
const REAL_SERIES: &str = "real";
const REAL_EVAL_SERIES: &str = "real_eval";
/// Rows sampled for the utilization scan.
const SCAN_ROWS: usize = 8192;

/// Artifact locations inside a work directory.
#[derive(Debug, Clone)]
pub struct Workdir {
    pub root: PathBuf,
}

impl Workdir {
    pub fn new(root: impl Into<PathBuf>) -> Self {
        Self { root: root.into() }
    }

    fn p(&self, rel: &str) -> PathBuf {
        self.root.join(rel)
    }

    pub fn train_suite(&self) -> PathBuf {
        self.p("data/train_suite")
    }
    pub fn taxonomy_suite(&self) -> PathBuf {
        self.p("data/taxonomy_suite")
    }
    pub fn real_series(&self) -> PathBuf {
        self.p("data/real_series.csv")
    }
    pub fn model(&self) -> PathBuf {
        self.p("model/forecaster.tslm")
    }
    pub fn train_log(&self) -> PathBuf {
        self.p("model/train_log.csv")
    }
    pub fn model_metrics(&self) -> PathBuf {
        self.p("model/metrics.json")
    }
    pub fn shard(&self, site: HookSite, set: &str) -> PathBuf {
        self.p("activations").join(shard_file_name(site, set))
    }
    pub fn sae(&self, site: HookSite) -> PathBuf {
        self.p(&format!("sae/{site}.tsae"))
    }
    pub fn sae_log(&self, site: HookSite) -> PathBuf {
        self.p(&format!("sae/{site}.log.json"))
    }
    pub fn utilization(&self) -> PathBuf {
        self.p("sae/utilization.csv")
    }
    pub fn taxonomy_features(&self, site: HookSite) -> PathBuf {
        self.p(&format!("taxonomy/{site}.features.csv"))
    }
    pub fn taxonomy_summary(&self, site: HookSite) -> PathBuf {
        self.p(&format!("taxonomy/{site}.summary.json"))
    }
    pub fn taxonomy_counts(&self) -> PathBuf {
        self.p("taxonomy/counts.csv")
    }
    pub fn ablation_site(&self, site: HookSite) -> PathBuf {
        self.p(&format!("ablation/{site}.json"))
    }
    pub fn ablation_records(&self) -> PathBuf {
        self.p("ablation/records.csv")
    }
    pub fn ablation_progressive(&self) -> PathBuf {
        self.p("ablation/progressive.csv")
    }
    pub fn ablation_summary(&self) -> PathBuf {
        self.p("ablation/summary.csv")
    }
    pub fn table1(&self) -> PathBuf {
        self.p("report/table1.txt")
    }
    pub fn table2(&self) -> PathBuf {
        self.p("report/table2.txt")
    }
    pub fn figure(&self) -> PathBuf {
        self.p("report/progressive.svg")
    }
    pub fn manifest(&self) -> PathBuf {
        self.p("manifest.json")
    }

    fn rel(&self, p: &Path) -> String {
        p.strip_prefix(&self.root).unwrap_or(p).display().to_string()
    }
}

fn require(path: &Path, stage: &'static str) -> Result<()> {
    if path.exists() {
        Ok(())
    } else {
        Err(Error::MissingUpstream {
            stage,
            path: path.to_path_buf(),
        })
    }
}

fn ensure_parent(path: &Path) -> Result<()> {
    if let Some(d) = path.parent() {
        fs::create_dir_all(d).map_err(|e| Error::io(d, e))?;
    }
    Ok(())
}

fn write_json<T: Serialize>(path: &Path, v: &T) -> Result<()> {
    ensure_parent(path)?;
    fs::write(path, serde_json::to_vec_pretty(v)?).map_err(|e| Error::io(path, e))
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T> {
    let bytes = fs::read(path).map_err(|e| Error::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

fn unix_now() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map(|d| d.as_secs()).unwrap_or(0)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub stage: String,
    pub started_unix: u64,
    pub finished_unix: u64,
    pub artifacts: Vec<String>,
}

/// Provenance of a work directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config_hash: String,
    pub crate_version: String,
    pub stages: Vec<StageRecord>,
}

/// Held-out cross-entropy before and after forecaster training.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelMetrics {
    pub n_parameters: usize,
    pub n_train_windows: usize,
    pub n_heldout_windows: usize,
    pub init_heldout_ce: f64,
    pub final_heldout_ce: f64,
    pub relative_drop: f64,
}

/// Per-site SAE statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SaeStats {
    pub site: HookSite,
    pub d_sae: usize,
    pub k: usize,
    pub n_rows: usize,
    pub final_fvu: f64,
    pub active_fraction: f64,
    pub resample_events: usize,
}

/// Everything the ablation stage computed for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SiteAblation {
    pub ranking: Vec<(usize, f64)>,
    pub records: Vec<AblationRecord>,
    pub curve: Vec<(usize, f64)>,
    pub summary: SiteSummary,
}

/// The windows every stage agrees on.
pub struct WindowSets {
    pub train: Vec<PreparedWindow>,
    pub heldout: Vec<PreparedWindow>,
    pub taxonomy: Vec<PreparedWindow>,
    pub eval: Vec<PreparedWindow>,
}

pub struct Pipeline {
    pub cfg: ExperimentConfig,
    pub work: Workdir,
    /// Restricts per-site stages to these sites.
    pub site_filter: Option<Vec<HookSite>>,
}

impl Pipeline {
    /// Validates the config (after applying overrides) and opens the work
    /// directory.
    pub fn new(mut cfg: ExperimentConfig, workdir: Option<PathBuf>, seed: Option<u64>) -> Result<Self> {
        if let Some(w) = workdir {
            cfg.workdir = w;
        }
        if let Some(s) = seed {
            cfg = cfg.with_seed(s);
        }
        let cfg = cfg.validated()?;
        Ok(Self {
            work: Workdir::new(cfg.workdir.clone()),
            cfg,
            site_filter: None,
        })
    }

    /// Limits per-site stages to `sites`, which must be configured.
    pub fn with_sites(mut self, sites: Vec<HookSite>) -> Result<Self> {
        let bad: Vec<String> = sites
            .iter()
            .filter(|s| !self.cfg.sites.contains(s))
            .map(|s| format!("--site {s} is not listed in the config's sites"))
            .collect();
        if !bad.is_empty() {
            return Err(Error::Config(bad));
        }
        self.site_filter = Some(sites);
        Ok(self)
    }

    fn seed(&self, stream: u64) -> u64 {
        derive_seed(self.cfg.seed, stream)
    }

    fn sites(&self) -> Vec<HookSite> {
        self.filtered(&self.cfg.sites)
    }

    fn ablation_sites(&self) -> Vec<HookSite> {
        self.filtered(&self.cfg.ablation.sites)
    }

    fn filtered(&self, sites: &[HookSite]) -> Vec<HookSite> {
        sites
            .iter()
            .copied()
            .filter(|s| self.site_filter.as_ref().is_none_or(|f| f.contains(s)))
            .collect()
    }

    /// Model geometry with the effective (globally derived) seed.
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            seed: derive_seed(self.cfg.seed, self.cfg.model.seed),
            ..self.cfg.model
        }
    }

    fn sae_config(&self, site: HookSite) -> SaeConfig {
        let idx = self.cfg.sites.iter().position(|&s| s == site).unwrap_or(0) as u64;
        SaeConfig {
            seed: derive_seed(derive_seed(self.cfg.seed, self.cfg.sae.seed), idx),
            ..self.cfg.sae
        }
    }

    fn record(&self, stage: &str, started: u64, artifacts: &[PathBuf]) -> Result<()> {
        let hash = self.cfg.hash()?;
        let path = self.work.manifest();
        let mut m: RunManifest = match read_json::<RunManifest>(&path) {
            Ok(m) if m.config_hash == hash => m,
            _ => RunManifest {
                config_hash: hash,
                crate_version: env!("CARGO_PKG_VERSION").to_string(),
                stages: Vec::new(),
            },
        };
        m.stages.push(StageRecord {
            stage: stage.to_string(),
            started_unix: started,
            finished_unix: unix_now(),
            artifacts: artifacts.iter().map(|p| self.work.rel(p)).collect(),
        });
        write_json(&path, &m)
    }

    pub fn run_stage(&self, stage: &str) -> Result<()> {
        let started = unix_now();
        info!("stage {stage}");
        let artifacts = match stage {
            "gen-data" => self.gen_data()?,
            "train-model" => self.train_model()?,
            "extract" => self.extract()?,
            "train-sae" => self.train_sae()?,
            "taxonomy" => self.taxonomy()?,
            "ablate" => self.ablate()?,
            "report" => self.report()?.1,
            other => return Err(Error::Config(vec![format!("unknown stage `{other}`")])),
        };
        self.record(stage, started, &artifacts)
    }

    pub fn run_all(&self) -> Result<()> {
        for s in STAGES {
            self.run_stage(s)?;
        }
        Ok(())
    }

    /// Writes the training suite, the taxonomy suite and the CSV column.
    pub fn gen_data(&self) -> Result<Vec<PathBuf>> {
        let d = &self.cfg.data;
        let train = gen_diagnostic_suite(self.seed(SEED_TRAIN_SUITE), d.train_suite_per_family, d.suite_length);
        export_suite(&train, &self.work.train_suite())?;
        let tax = gen_diagnostic_suite(self.seed(SEED_TAXONOMY_SUITE), d.taxonomy_suite_per_family, d.suite_length);
        export_suite(&tax, &self.work.taxonomy_suite())?;
        let csv = d.csv_path.as_ref().expect("validated");
        let real = load_csv(csv, &d.value_column)?;
        let out = self.work.real_series();
        ensure_parent(&out)?;
        let mut w = csv::Writer::from_path(&out).map_err(|e| crate::taxonomy::csv_err(&out, e))?;
        w.write_record(["t", "value"]).map_err(|e| crate::taxonomy::csv_err(&out, e))?;
        for (t, v) in real.values.iter().enumerate() {
            w.write_record([t.to_string(), v.to_string()])
                .map_err(|e| crate::taxonomy::csv_err(&out, e))?;
        }
        w.flush().map_err(|e| Error::io(&out, e))?;
        Ok(vec![self.work.train_suite(), self.work.taxonomy_suite(), out])
    }

    /// Rebuilds the deterministic window sets from the generated data.
    pub fn windows(&self) -> Result<WindowSets> {
        require(&self.work.train_suite().join("index.json"), "gen-data")?;
        require(&self.work.real_series(), "gen-data")?;
        let w = &self.cfg.windows;
        let tok = &self.cfg.tokenizer;
        let mut real = load_csv(&self.work.real_series(), "value")?;
        real.name = REAL_SERIES.into();
        let split = ((real.len() as f64) * self.cfg.data.csv_train_fraction) as usize;
        let real_train = Series::new(REAL_SERIES, real.values[..split].to_vec());
        let eval_start = split.saturating_sub(w.context_len);
        let real_eval = Series::new(REAL_EVAL_SERIES, real.values[eval_start..].to_vec());

        let mut series: Vec<(Series, usize)> = import_suite(&self.work.train_suite())?
            .into_iter()
            .map(|d| (d.series, w.train_per_series))
            .collect();
        series.push((real_train, w.csv_train_windows));
        let mut all = Vec::new();
        for (i, (s, cap)) in series.iter().enumerate() {
            let seed = derive_seed(self.seed(SEED_WINDOWS), i as u64);
            all.extend(make_windows(s, w.context_len, w.pred_len, *cap, w.train_stride, seed)?);
        }
        let prepared = prepare_windows(all, tok, 0);
        let (heldout, train): (Vec<_>, Vec<_>) = prepared
            .into_iter()
            .partition(|p| p.id % w.holdout_every as u64 == w.holdout_every as u64 - 1);

        let mut tax = Vec::new();
        let tax_stride = (w.context_len / 2).max(1);
        for (i, d) in import_suite(&self.work.taxonomy_suite())?.iter().enumerate() {
            let seed = derive_seed(self.seed(SEED_WINDOWS), 10_000 + i as u64);
            tax.extend(make_windows(&d.series, w.context_len, w.pred_len, w.taxonomy_per_series, tax_stride, seed)?);
        }
        let eval_seed = self.seed(SEED_WINDOWS) ^ 0x5eed;
        let eval = make_windows(
            &real_eval,
            w.context_len,
            w.pred_len,
            self.cfg.ablation.n_windows,
            w.eval_stride,
            eval_seed,
        )?;
        Ok(WindowSets {
            train,
            heldout,
            taxonomy: prepare_windows(tax, tok, TAXONOMY_ID_BASE),
            eval: prepare_windows(eval, tok, EVAL_ID_BASE),
        })
    }

    pub fn train_model(&self) -> Result<Vec<PathBuf>> {
        let sets = self.windows()?;
        let mut model = Model::new(self.model_config())?;
        let train: Vec<_> = sets.train.iter().map(|p| p.tokens.clone()).collect();
        let held: Vec<_> = sets.heldout.iter().map(|p| p.tokens.clone()).collect();
        let init_ce = model.cross_entropy(&held, 32)?;
        let t = &self.cfg.train;
        info!(
            "training forecaster: {} params, {} windows, {} steps",
            model.n_parameters(),
            train.len(),
            t.steps
        );
        let log = model.train(
            &train,
            &TrainConfig {
                steps: t.steps,
                batch: t.batch,
                base_lr: t.base_lr,
                warmup_steps: t.warmup_steps,
                seed: self.seed(SEED_TRAIN_ORDER),
            },
        )?;
        let final_ce = model.cross_entropy(&held, 32)?;
        info!("held-out cross-entropy {init_ce:.4} -> {final_ce:.4}");
        let path = self.work.model();
        ensure_parent(&path)?;
        save_checkpoint(&model, &path)?;
        let log_path = self.work.train_log();
        let mut w = csv::Writer::from_path(&log_path).map_err(|e| crate::taxonomy::csv_err(&log_path, e))?;
        w.write_record(["step", "loss", "lr"]).map_err(|e| crate::taxonomy::csv_err(&log_path, e))?;
        for (i, (l, lr)) in log.losses.iter().zip(&log.learning_rates).enumerate() {
            w.write_record([i.to_string(), format!("{l:.6}"), format!("{lr:.6e}")])
                .map_err(|e| crate::taxonomy::csv_err(&log_path, e))?;
        }
        w.flush().map_err(|e| Error::io(&log_path, e))?;
        let metrics = ModelMetrics {
            n_parameters: model.n_parameters(),
            n_train_windows: train.len(),
            n_heldout_windows: held.len(),
            init_heldout_ce: init_ce,
            final_heldout_ce: final_ce,
            relative_drop: 1.0 - final_ce / init_ce,
        };
        write_json(&self.work.model_metrics(), &metrics)?;
        Ok(vec![path, log_path, self.work.model_metrics()])
    }

    fn load_model(&self) -> Result<Model> {
        require(&self.work.model(), "train-model")?;
        load_checkpoint(&self.work.model())
    }

    pub fn extract(&self) -> Result<Vec<PathBuf>> {
        let sets = self.windows()?;
        let model = self.load_model()?;
        let sites = self.sites();
        let dir = self.work.root.join("activations");
        let mut out = Vec::new();
        for (set, windows) in [("train", &sets.train), ("suite", &sets.taxonomy), ("eval", &sets.eval)] {
            info!("extracting {} {set} windows at {} sites", windows.len(), sites.len());
            out.extend(extract(&model, windows, &sites, &dir, set)?);
        }
        Ok(out)
    }

    fn open_shard(&self, site: HookSite, set: &str) -> Result<Shard> {
        let p = self.work.shard(site, set);
        require(&p, "extract")?;
        Shard::open(&p)
    }

    pub fn train_sae(&self) -> Result<Vec<PathBuf>> {
        let mut out = Vec::new();
        for site in self.sites() {
            let shard = self.open_shard(site, "train")?;
            let rows = shard.read_all()?;
            let cfg = self.sae_config(site);
            info!("training SAE at {site} on {} rows", rows.rows());
            let (sae, log) = train_sae(&rows, site, &cfg)?;
            for w in &log.warnings {
                log::warn!("{site}: {w}");
            }
            let scan = sae.dead_feature_scan(&sample_rows(&rows, SCAN_ROWS, self.seed(SEED_SCAN)))?;
            let stats = SaeStats {
                site,
                d_sae: cfg.d_sae,
                k: cfg.k,
                n_rows: rows.rows(),
                final_fvu: log.final_fvu.unwrap_or(f64::NAN),
                active_fraction: scan.active_fraction,
                resample_events: log.resamples.len(),
            };
            info!("{site}: FVU {:.4}, active {:.3}", stats.final_fvu, stats.active_fraction);
            let p = self.work.sae(site);
            ensure_parent(&p)?;
            save_sae(&sae, &cfg, &p)?;
            #[derive(Serialize)]
            struct LogFile<'a> {
                stats: &'a SaeStats,
                log: &'a crate::sae::SaeTrainLog,
            }
            write_json(&self.work.sae_log(site), &LogFile { stats: &stats, log: &log })?;
            out.push(p);
            out.push(self.work.sae_log(site));
        }
        let util = self.work.utilization();
        write_utilization(&util, &self.collect_sae_stats()?)?;
        out.push(util);
        Ok(out)
    }

    /// SAE statistics of every configured site that has been trained.
    pub fn collect_sae_stats(&self) -> Result<Vec<SaeStats>> {
        #[derive(Deserialize)]
        struct LogFile {
            stats: SaeStats,
        }
        let mut v = Vec::new();
        for &site in &self.cfg.sites {
            let p = self.work.sae_log(site);
            if p.exists() {
                v.push(read_json::<LogFile>(&p)?.stats);
            }
        }
        Ok(v)
    }

    pub fn taxonomy(&self) -> Result<Vec<PathBuf>> {
        require(&self.work.taxonomy_suite().join("index.json"), "gen-data")?;
        let channels: BTreeMap<_, _> = import_suite(&self.work.taxonomy_suite())?
            .into_iter()
            .map(|d| {
                let name = d.series.name.clone();
                d.series.channels.ok_or(Error::MissingChannels(name.clone())).map(|c| (name, c))
            })
            .collect::<Result<_>>()?;
        let mut out = Vec::new();
        for site in self.sites() {
            require(&self.work.sae(site), "train-sae")?;
            let (sae, _) = load_sae(&self.work.sae(site))?;
            let shard = self.open_shard(site, "suite")?;
            let trace = feature_trace(&sae, &shard)?;
            let ch = channel_matrix(&channels, &shard.entries, site.kind, self.cfg.windows.context_len)?;
            let profiles = classify_all(&trace, &ch, self.cfg.taxonomy.r_threshold)?;
            let rep = taxonomy_report(site, &profiles);
            info!("{site}: {} of {} features labeled", rep.labeled, rep.n_features);
            let f = self.work.taxonomy_features(site);
            ensure_parent(&f)?;
            write_profiles_csv(&f, site, &profiles)?;
            write_json(&self.work.taxonomy_summary(site), &rep)?;
            out.push(f);
            out.push(self.work.taxonomy_summary(site));
        }
        let counts = self.work.taxonomy_counts();
        write_counts_csv(&counts, &self.collect_taxonomy()?)?;
        out.push(counts);
        Ok(out)
    }

    /// Taxonomy summaries of every configured site that has one.
    pub fn collect_taxonomy(&self) -> Result<Vec<TaxonomyReport>> {
        self.cfg
            .sites
            .iter()
            .map(|&s| self.work.taxonomy_summary(s))
            .filter(|p| p.exists())
            .map(|p| read_json(&p))
            .collect()
    }

    pub fn ablate(&self) -> Result<Vec<PathBuf>> {
        let sets = self.windows()?;
        let model = self.load_model()?;
        let a = &self.cfg.ablation;
        let cfg = crate::causal::AblationConfig {
            seed: derive_seed(self.cfg.seed, a.seed),
            ..a.clone()
        };
        let mut out = Vec::new();
        for site in self.ablation_sites() {
            require(&self.work.sae(site), "train-sae")?;
            let (sae, _) = load_sae(&self.work.sae(site))?;
            let eval_rows = self.open_shard(site, "eval")?.read_all()?;
            let ranking = rank_features(&sae, &eval_rows)?;
            let order: Vec<usize> = ranking.iter().map(|r| r.0).collect();
            let ab = Ablation::new(&model, &self.cfg.tokenizer, &sae, &sets.eval, &cfg)?;
            let clean = ab.clean_crps()?;
            let baseline = ab.baseline_crps()?;
            info!("{site}: clean CRPS {clean:.4}, reconstruction-patched {baseline:.4}");
            let records = order[..cfg.n_features]
                .iter()
                .map(|&j| ab.ablate_single(j, baseline))
                .collect::<Result<Vec<_>>>()?;
            let curve = ab.ablate_progressive(&order, baseline)?;
            let deltas: Vec<f64> = records.iter().map(|r| r.delta).collect();
            let summary = SiteSummary {
                site,
                crps_clean: clean,
                crps_baseline: baseline,
                summary: summarize(&deltas)?,
            };
            info!(
                "{site}: mean dCRPS {:.4}, +frac {:.2}",
                summary.summary.mean, summary.summary.positive_fraction
            );
            let p = self.work.ablation_site(site);
            write_json(
                &p,
                &SiteAblation {
                    ranking,
                    records,
                    curve,
                    summary,
                },
            )?;
            out.push(p);
        }
        let all = self.collect_ablations()?;
        let records: Vec<AblationRecord> = all.iter().flat_map(|a| a.records.clone()).collect();
        write_records_csv(&self.work.ablation_records(), &records)?;
        let curves: Vec<_> = all.iter().map(|a| (a.summary.site, a.curve.clone())).collect();
        write_progressive_csv(&self.work.ablation_progressive(), &curves)?;
        let summaries: Vec<_> = all.iter().map(|a| a.summary.clone()).collect();
        write_summary_csv(&self.work.ablation_summary(), &summaries)?;
        out.extend([
            self.work.ablation_records(),
            self.work.ablation_progressive(),
            self.work.ablation_summary(),
        ]);
        Ok(out)
    }

    /// Ablation results of every configured ablation site that has them.
    pub fn collect_ablations(&self) -> Result<Vec<SiteAblation>> {
        self.cfg
            .ablation
            .sites
            .iter()
            .map(|&s| self.work.ablation_site(s))
            .filter(|p| p.exists())
            .map(|p| read_json(&p))
            .collect()
    }

    /// Renders Table 1, Table 2 and the progressive-ablation figure.
    /// Returns the printed text and the written paths.
    pub fn report(&self) -> Result<(String, Vec<PathBuf>)> {
        require(&self.work.ablation_summary(), "ablate")?;
        require(&self.work.taxonomy_counts(), "taxonomy")?;
        let ablations = self.collect_ablations()?;
        let taxonomy = self.collect_taxonomy()?;
        let summaries: Vec<SiteSummary> = ablations.iter().map(|a| a.summary.clone()).collect();
        let t1 = report::table1(&summaries);
        let t2 = report::table2(&taxonomy, self.cfg.taxonomy.display_floor);
        let curves: Vec<_> = ablations.iter().map(|a| (a.summary.site, a.curve.clone())).collect();
        let svg = report::progressive_svg(&curves);
        let paths = [self.work.table1(), self.work.table2(), self.work.figure()];
        ensure_parent(&paths[0])?;
        for (p, body) in paths.iter().zip([&t1, &t2, &svg]) {
            fs::write(p, body).map_err(|e| Error::io(p, e))?;
        }
        Ok((format!("{t1}\n{t2}"), paths.to_vec()))
    }
}

fn write_utilization(path: &Path, stats: &[SaeStats]) -> Result<()> {
    let e = |e| crate::taxonomy::csv_err(path, e);
    let mut w = csv::Writer::from_path(path).map_err(e)?;
    w.write_record(["site", "d_sae", "k", "n_rows", "final_fvu", "active_fraction", "resample_events"])
        .map_err(e)?;
    for s in stats {
        w.write_record([
            s.site.to_string(),
            s.d_sae.to_string(),
            s.k.to_string(),
            s.n_rows.to_string(),
            format!("{:.6}", s.final_fvu),
            format!("{:.6}", s.active_fraction),
            s.resample_events.to_string(),
        ])
        .map_err(e)?;
    }
    w.flush().map_err(|err| Error::io(path, err))
}

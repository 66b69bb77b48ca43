//! Concept labels for SAE features, by Pearson correlation of each feature's
//! activation trace against ground-truth property channels of the
//! diagnostic suite.

use std::collections::BTreeMap;
use std::fmt;
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::actstore::{ManifestEntry, Shard};
use crate::error::{Error, Result};
use crate::forecaster::{HookSite, SiteKind};
use crate::numerics::{Float, Matrix};
use crate::sae::Sae;
use crate::series::PropertyChannels;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ConceptLabel {
    TrendUp,
    TrendDown,
    Seasonality,
    LevelShiftUp,
    LevelShiftDown,
    FrequencyHigh,
    FrequencyLow,
    HighVolatility,
    LowVolatility,
    Noise,
    Unknown,
}

impl ConceptLabel {
    /// The ten concepts, in report order. `Unknown` is not included.
    pub const CONCEPTS: [ConceptLabel; 10] = [
        ConceptLabel::TrendUp,
        ConceptLabel::TrendDown,
        ConceptLabel::Seasonality,
        ConceptLabel::LevelShiftUp,
        ConceptLabel::LevelShiftDown,
        ConceptLabel::FrequencyHigh,
        ConceptLabel::FrequencyLow,
        ConceptLabel::HighVolatility,
        ConceptLabel::LowVolatility,
        ConceptLabel::Noise,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ConceptLabel::TrendUp => "trend_up",
            ConceptLabel::TrendDown => "trend_down",
            ConceptLabel::Seasonality => "seasonality",
            ConceptLabel::LevelShiftUp => "level_shift_up",
            ConceptLabel::LevelShiftDown => "level_shift_down",
            ConceptLabel::FrequencyHigh => "frequency_high",
            ConceptLabel::FrequencyLow => "frequency_low",
            ConceptLabel::HighVolatility => "high_volatility",
            ConceptLabel::LowVolatility => "low_volatility",
            ConceptLabel::Noise => "noise",
            ConceptLabel::Unknown => "unknown",
        }
    }

    /// Channel this concept is read from and the sign that selects it.
    pub fn channel(self) -> Option<(Channel, f64)> {
        Some(match self {
            ConceptLabel::TrendUp => (Channel::Trend, 1.0),
            ConceptLabel::TrendDown => (Channel::Trend, -1.0),
            ConceptLabel::Seasonality => (Channel::Seasonal, 1.0),
            ConceptLabel::LevelShiftUp => (Channel::LevelShift, 1.0),
            ConceptLabel::LevelShiftDown => (Channel::LevelShift, -1.0),
            ConceptLabel::FrequencyHigh => (Channel::Frequency, 1.0),
            ConceptLabel::FrequencyLow => (Channel::Frequency, -1.0),
            ConceptLabel::HighVolatility => (Channel::Volatility, 1.0),
            ConceptLabel::LowVolatility => (Channel::Volatility, -1.0),
            ConceptLabel::Noise => (Channel::Noise, 1.0),
            ConceptLabel::Unknown => return None,
        })
    }
}

impl fmt::Display for ConceptLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// The six signed ground-truth channels. Directional concept pairs share one.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum Channel {
    Trend,
    Seasonal,
    LevelShift,
    Frequency,
    Volatility,
    Noise,
}

impl Channel {
    pub const ALL: [Channel; 6] = [
        Channel::Trend,
        Channel::Seasonal,
        Channel::LevelShift,
        Channel::Frequency,
        Channel::Volatility,
        Channel::Noise,
    ];

    pub fn index(self) -> usize {
        self as usize
    }

    /// Label for a winning correlation `r` on this channel.
    pub fn label(self, r: f64) -> ConceptLabel {
        let up = r >= 0.0;
        match self {
            Channel::Trend if up => ConceptLabel::TrendUp,
            Channel::Trend => ConceptLabel::TrendDown,
            Channel::Seasonal => ConceptLabel::Seasonality,
            Channel::LevelShift if up => ConceptLabel::LevelShiftUp,
            Channel::LevelShift => ConceptLabel::LevelShiftDown,
            Channel::Frequency if up => ConceptLabel::FrequencyHigh,
            Channel::Frequency => ConceptLabel::FrequencyLow,
            Channel::Volatility if up => ConceptLabel::HighVolatility,
            Channel::Volatility => ConceptLabel::LowVolatility,
            Channel::Noise => ConceptLabel::Noise,
        }
    }

    fn z_scored(self) -> bool {
        matches!(self, Channel::Frequency | Channel::Volatility | Channel::Noise)
    }

    fn read(self, ch: &PropertyChannels, t: usize) -> Float {
        match self {
            Channel::Trend => ch.trend_slope[t],
            Channel::Seasonal => ch.seasonal_phase_indicator[t],
            Channel::LevelShift => ch.level_shift_indicator[t],
            Channel::Frequency => ch.instantaneous_frequency[t],
            Channel::Volatility => ch.rolling_volatility[t],
            Channel::Noise => ch.noise_amplitude[t],
        }
    }
}

/// Classification of one feature.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FeatureProfile {
    pub feature: usize,
    /// Signed r per concept, in [`ConceptLabel::CONCEPTS`] order; the
    /// second member of a directional pair carries the negated r.
    pub r: [f64; 10],
    pub label: ConceptLabel,
    /// Signed r of the winning channel (0 when the trace is constant).
    pub best_score: f64,
}

/// Activation traces: entry (j, t) is feature j's code value at shard row t.
pub fn feature_trace(sae: &Sae, shard: &Shard) -> Result<Matrix> {
    if sae.site != shard.site {
        return Err(Error::SiteMismatch {
            expected: sae.site.to_string(),
            found: shard.site.to_string(),
        });
    }
    let rows = shard.read_all()?;
    trace_rows(sae, &rows)
}

/// [`feature_trace`] over in-memory rows.
pub fn trace_rows(sae: &Sae, rows: &Matrix) -> Result<Matrix> {
    let mut trace = Matrix::zeros(sae.d_sae(), rows.rows());
    for (t, z) in sae.encode_batch(rows)?.into_iter().enumerate() {
        for (&j, &v) in z.indices.iter().zip(&z.values) {
            trace.set(j, t, v);
        }
    }
    Ok(trace)
}

/// Ground-truth channels aligned to the rows of a shard (6 x rows).
///
/// Encoder rows map to context timesteps, decoder-side rows to target
/// timesteps (which start `context_len` after the window start).
/// Frequency, volatility and noise are z-scored over the aligned positions.
pub fn channel_matrix(
    channels: &BTreeMap<String, PropertyChannels>,
    entries: &[ManifestEntry],
    kind: SiteKind,
    context_len: usize,
) -> Result<Matrix> {
    let n: u64 = entries.iter().map(|e| e.count).sum();
    let mut out = Matrix::zeros(Channel::ALL.len(), n as usize);
    let shift = if kind.is_encoder() { 0 } else { context_len };
    for e in entries {
        let ch = channels
            .get(&e.series)
            .ok_or_else(|| Error::MissingChannels(e.series.clone()))?;
        for i in 0..e.count as usize {
            let t = e.series_start + shift + i;
            if t >= ch.len() {
                return Err(Error::OutOfRange {
                    what: "channel timestep",
                    index: t,
                    limit: ch.len(),
                });
            }
            let col = e.row_offset as usize + i;
            for c in Channel::ALL {
                out.set(c.index(), col, c.read(ch, t));
            }
        }
    }
    for c in Channel::ALL.into_iter().filter(|c| c.z_scored()) {
        z_score(out.row_mut(c.index()));
    }
    Ok(out)
}

fn z_score(v: &mut [Float]) {
    let n = v.len().max(1) as f64;
    let mean = v.iter().map(|&x| x as f64).sum::<f64>() / n;
    let var = v.iter().map(|&x| (x as f64 - mean).powi(2)).sum::<f64>() / n;
    let sd = var.sqrt();
    for x in v.iter_mut() {
        *x = if sd > 0.0 { ((*x as f64 - mean) / sd) as Float } else { 0.0 };
    }
}

/// Pearson correlation in f64; 0 when either side has no variance.
pub fn pearson(a: &[Float], b: &[Float]) -> Result<f64> {
    if a.len() != b.len() {
        return Err(Error::Length {
            what: "trace vs channel",
            left: a.len(),
            right: b.len(),
        });
    }
    let n = a.len() as f64;
    if a.is_empty() {
        return Ok(0.0);
    }
    let ma = a.iter().map(|&x| x as f64).sum::<f64>() / n;
    let mb = b.iter().map(|&x| x as f64).sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (&x, &y) in a.iter().zip(b) {
        let (dx, dy) = (x as f64 - ma, y as f64 - mb);
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        return Ok(0.0);
    }
    Ok((sab / (saa * sbb).sqrt()).clamp(-1.0, 1.0))
}

/// Labels one trace against the 6-row channel matrix.
pub fn classify(feature: usize, trace: &[Float], channels: &Matrix, r_threshold: f64) -> Result<FeatureProfile> {
    if trace.len() != channels.cols() {
        return Err(Error::Length {
            what: "trace vs channel",
            left: trace.len(),
            right: channels.cols(),
        });
    }
    let unknown = FeatureProfile {
        feature,
        r: [0.0; 10],
        label: ConceptLabel::Unknown,
        best_score: 0.0,
    };
    let first = trace.first().copied().unwrap_or(0.0);
    if trace.iter().all(|&v| v == first) {
        return Ok(unknown);
    }
    let mut per_channel = [0.0f64; 6];
    for c in Channel::ALL {
        per_channel[c.index()] = pearson(trace, channels.row(c.index()))?;
    }
    let mut r = [0.0; 10];
    for (slot, concept) in r.iter_mut().zip(ConceptLabel::CONCEPTS) {
        let (c, sign) = concept.channel().expect("concept has a channel");
        *slot = sign * per_channel[c.index()];
    }
    let mut best = Channel::Trend;
    for c in Channel::ALL {
        if per_channel[c.index()].abs() > per_channel[best.index()].abs() {
            best = c;
        }
    }
    let best_score = per_channel[best.index()];
    let label = if best_score.abs() < r_threshold {
        ConceptLabel::Unknown
    } else {
        best.label(best_score)
    };
    Ok(FeatureProfile {
        feature,
        r,
        label,
        best_score,
    })
}

/// Classifies every row of a trace matrix.
pub fn classify_all(trace: &Matrix, channels: &Matrix, r_threshold: f64) -> Result<Vec<FeatureProfile>> {
    (0..trace.rows())
        .map(|j| classify(j, trace.row(j), channels, r_threshold))
        .collect()
}

/// Per-concept counts for one site.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TaxonomyReport {
    pub site: HookSite,
    pub n_features: usize,
    /// Every concept plus `unknown`, zero counts included.
    pub counts: BTreeMap<ConceptLabel, usize>,
    pub labeled: usize,
    pub labeled_fraction: f64,
}

pub fn taxonomy_report(site: HookSite, profiles: &[FeatureProfile]) -> TaxonomyReport {
    let mut counts: BTreeMap<ConceptLabel, usize> = ConceptLabel::CONCEPTS
        .iter()
        .chain([ConceptLabel::Unknown].iter())
        .map(|&c| (c, 0))
        .collect();
    for p in profiles {
        *counts.entry(p.label).or_default() += 1;
    }
    let labeled = profiles.len() - counts[&ConceptLabel::Unknown];
    TaxonomyReport {
        site,
        n_features: profiles.len(),
        counts,
        labeled,
        labeled_fraction: if profiles.is_empty() {
            0.0
        } else {
            labeled as f64 / profiles.len() as f64
        },
    }
}

/// Per-feature CSV: feature_id, site, label, best_score, then one r column
/// per concept.
pub fn write_profiles_csv(path: &Path, site: HookSite, profiles: &[FeatureProfile]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["feature_id".to_string(), "site".into(), "label".into(), "best_score".into()];
    header.extend(ConceptLabel::CONCEPTS.iter().map(|c| format!("r_{c}")));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for p in profiles {
        let mut rec = vec![
            p.feature.to_string(),
            site.to_string(),
            p.label.to_string(),
            format!("{:.6}", p.best_score),
        ];
        rec.extend(p.r.iter().map(|r| format!("{r:.6}")));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Table-2-shaped CSV: one row per concept plus `unknown` and a labeled
/// percentage row, one count column per site. Always complete (no floor).
pub fn write_counts_csv(path: &Path, reports: &[TaxonomyReport]) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_err(path, e))?;
    let mut header = vec!["concept".to_string()];
    header.extend(reports.iter().map(|r| r.site.to_string()));
    w.write_record(&header).map_err(|e| csv_err(path, e))?;
    for c in ConceptLabel::CONCEPTS.iter().chain([ConceptLabel::Unknown].iter()) {
        let mut rec = vec![c.to_string()];
        rec.extend(reports.iter().map(|r| r.counts[c].to_string()));
        w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    }
    let mut rec = vec!["labeled_pct".to_string()];
    rec.extend(reports.iter().map(|r| format!("{:.2}", 100.0 * r.labeled_fraction)));
    w.write_record(&rec).map_err(|e| csv_err(path, e))?;
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_report_json(path: &Path, report: &TaxonomyReport) -> Result<()> {
    fs::write(path, serde_json::to_vec_pretty(report)?).map_err(|e| Error::io(path, e))
}

pub(crate) fn csv_err(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            row: 0,
            msg: format!("{other:?}"),
        },
    }
}

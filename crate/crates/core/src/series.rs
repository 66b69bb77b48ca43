//! Synthetic diagnostic series with ground-truth property channels, CSV
//! ingestion, and context/target windowing.

use std::f64::consts::PI;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::numerics::Float;

/// Half-width of the signed pulse marking a level shift in its indicator channel.
pub const LEVEL_SHIFT_HALF_WIDTH: usize = 8;

/// Trailing window used for the `rolling_volatility` channel.
pub const VOLATILITY_WINDOW: usize = 16;

/// Per-timestep ground truth for each temporal concept.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PropertyChannels {
    pub trend_slope: Vec<Float>,
    pub seasonal_phase_indicator: Vec<Float>,
    /// Signed pulse in {-1, 0, +1} around each level shift.
    pub level_shift_indicator: Vec<Float>,
    /// Cycles per step of the dominant oscillation (0 when none).
    pub instantaneous_frequency: Vec<Float>,
    /// Trailing-window population standard deviation of the values.
    pub rolling_volatility: Vec<Float>,
    /// Standard deviation of the additive noise term at each step.
    pub noise_amplitude: Vec<Float>,
}

impl PropertyChannels {
    fn zeros(len: usize) -> Self {
        Self {
            trend_slope: vec![0.0; len],
            seasonal_phase_indicator: vec![0.0; len],
            level_shift_indicator: vec![0.0; len],
            instantaneous_frequency: vec![0.0; len],
            rolling_volatility: vec![0.0; len],
            noise_amplitude: vec![0.0; len],
        }
    }

    pub fn len(&self) -> usize {
        self.trend_slope.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A univariate series, optionally annotated with ground truth.
#[derive(Debug, Clone, PartialEq)]
pub struct Series {
    pub name: String,
    pub values: Vec<Float>,
    pub channels: Option<PropertyChannels>,
}

impl Series {
    pub fn new(name: impl Into<String>, values: Vec<Float>) -> Self {
        Self {
            name: name.into(),
            values,
            channels: None,
        }
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

/// The five generator families of the diagnostic suite.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Family {
    Trend,
    Seasonality,
    LevelShift,
    FrequencySweep,
    Heteroscedastic,
}

impl Family {
    pub const ALL: [Family; 5] = [
        Family::Trend,
        Family::Seasonality,
        Family::LevelShift,
        Family::FrequencySweep,
        Family::Heteroscedastic,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Family::Trend => "trend",
            Family::Seasonality => "seasonality",
            Family::LevelShift => "level_shift",
            Family::FrequencySweep => "frequency_sweep",
            Family::Heteroscedastic => "heteroscedastic",
        }
    }
}

/// Fully specified generator for one diagnostic series.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "family", rename_all = "snake_case")]
pub enum Generator {
    Trend {
        slope: f64,
        intercept: f64,
        noise: f64,
    },
    Seasonality {
        period: f64,
        amplitude: f64,
        phase: f64,
        level: f64,
        noise: f64,
    },
    LevelShift {
        level: f64,
        at: usize,
        magnitude: f64,
        noise: f64,
    },
    /// Linear chirp from `f_start` to `f_end` cycles per step.
    FrequencySweep {
        f_start: f64,
        f_end: f64,
        amplitude: f64,
        level: f64,
        noise: f64,
    },
    /// Gaussian noise whose standard deviation interpolates linearly between
    /// equally spaced knots.
    Heteroscedastic { level: f64, sigma_knots: Vec<f64> },
}

impl Generator {
    pub fn family(&self) -> Family {
        match self {
            Generator::Trend { .. } => Family::Trend,
            Generator::Seasonality { .. } => Family::Seasonality,
            Generator::LevelShift { .. } => Family::LevelShift,
            Generator::FrequencySweep { .. } => Family::FrequencySweep,
            Generator::Heteroscedastic { .. } => Family::Heteroscedastic,
        }
    }

    /// Draws randomized parameters for `family`.
    pub fn sample<R: Rng + ?Sized>(family: Family, length: usize, rng: &mut R) -> Self {
        let sign = |rng: &mut R| if rng.gen_bool(0.5) { 1.0 } else { -1.0 };
        match family {
            Family::Trend => Generator::Trend {
                slope: sign(rng) * rng.gen_range(0.004..0.02),
                intercept: rng.gen_range(-2.0..2.0),
                noise: rng.gen_range(0.02..0.15),
            },
            Family::Seasonality => Generator::Seasonality {
                period: rng.gen_range(8.0..48.0),
                amplitude: rng.gen_range(0.5..2.0),
                phase: rng.gen_range(0.0..2.0 * PI),
                level: rng.gen_range(-1.0..1.0),
                noise: rng.gen_range(0.02..0.15),
            },
            Family::LevelShift => Generator::LevelShift {
                level: rng.gen_range(-1.0..1.0),
                at: rng.gen_range(length / 4..3 * length / 4),
                magnitude: sign(rng) * rng.gen_range(1.0..3.0),
                noise: rng.gen_range(0.05..0.2),
            },
            Family::FrequencySweep => Generator::FrequencySweep {
                f_start: rng.gen_range(0.01..0.04),
                f_end: rng.gen_range(0.1..0.25),
                amplitude: rng.gen_range(0.5..2.0),
                level: rng.gen_range(-1.0..1.0),
                noise: rng.gen_range(0.02..0.15),
            },
            Family::Heteroscedastic => Generator::Heteroscedastic {
                level: rng.gen_range(-1.0..1.0),
                sigma_knots: (0..4).map(|_| rng.gen_range(0.05..1.0)).collect(),
            },
        }
    }

    /// Generates the series and its channels; noise draws come from `rng`.
    pub fn generate<R: Rng + ?Sized>(&self, name: &str, length: usize, rng: &mut R) -> Series {
        let mut ch = PropertyChannels::zeros(length);
        let n = length.max(2) as f64 - 1.0;
        let mut signal = vec![0.0f64; length];
        let mut sigma = vec![0.0f64; length];
        match self {
            Generator::Trend {
                slope,
                intercept,
                noise,
            } => {
                for t in 0..length {
                    signal[t] = intercept + slope * t as f64;
                    sigma[t] = *noise;
                    ch.trend_slope[t] = *slope as Float;
                }
            }
            Generator::Seasonality {
                period,
                amplitude,
                phase,
                level,
                noise,
            } => {
                for t in 0..length {
                    let s = (2.0 * PI * t as f64 / period + phase).sin();
                    signal[t] = level + amplitude * s;
                    sigma[t] = *noise;
                    ch.seasonal_phase_indicator[t] = s as Float;
                    ch.instantaneous_frequency[t] = (1.0 / period) as Float;
                }
            }
            Generator::LevelShift {
                level,
                at,
                magnitude,
                noise,
            } => {
                let lo = at.saturating_sub(LEVEL_SHIFT_HALF_WIDTH);
                let hi = (at + LEVEL_SHIFT_HALF_WIDTH).min(length);
                for t in 0..length {
                    signal[t] = if t >= *at { level + magnitude } else { *level };
                    sigma[t] = *noise;
                    if (lo..hi).contains(&t) {
                        ch.level_shift_indicator[t] = magnitude.signum() as Float;
                    }
                }
            }
            Generator::FrequencySweep {
                f_start,
                f_end,
                amplitude,
                level,
                noise,
            } => {
                for t in 0..length {
                    let tf = t as f64;
                    let cycles = f_start * tf + (f_end - f_start) * tf * tf / (2.0 * n);
                    signal[t] = level + amplitude * (2.0 * PI * cycles).sin();
                    sigma[t] = *noise;
                    ch.instantaneous_frequency[t] = (f_start + (f_end - f_start) * tf / n) as Float;
                }
            }
            Generator::Heteroscedastic { level, sigma_knots } => {
                let segments = sigma_knots.len().saturating_sub(1).max(1) as f64;
                for t in 0..length {
                    signal[t] = *level;
                    let pos = t as f64 / n * segments;
                    let i = (pos.floor() as usize).min(sigma_knots.len().saturating_sub(2));
                    let frac = pos - i as f64;
                    let a = sigma_knots[i];
                    let b = sigma_knots.get(i + 1).copied().unwrap_or(a);
                    sigma[t] = a + (b - a) * frac;
                }
            }
        }
        let mut values = Vec::with_capacity(length);
        for t in 0..length {
            let eps = if sigma[t] > 0.0 {
                Normal::new(0.0, sigma[t]).expect("positive sigma").sample(rng)
            } else {
                0.0
            };
            values.push((signal[t] + eps) as Float);
            ch.noise_amplitude[t] = sigma[t] as Float;
        }
        ch.rolling_volatility = rolling_std(&values, VOLATILITY_WINDOW);
        Series {
            name: name.to_string(),
            values,
            channels: Some(ch),
        }
    }
}

/// Trailing-window population standard deviation (shorter windows at the start).
pub fn rolling_std(values: &[Float], window: usize) -> Vec<Float> {
    (0..values.len())
        .map(|t| {
            let lo = (t + 1).saturating_sub(window);
            let w = &values[lo..=t];
            let n = w.len() as f64;
            let mean = w.iter().map(|&v| v as f64).sum::<f64>() / n;
            let var = w.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n;
            var.sqrt() as Float
        })
        .collect()
}

/// One generated diagnostic series with the generator that produced it.
#[derive(Debug, Clone, PartialEq)]
pub struct DiagnosticSeries {
    pub generator: Generator,
    pub series: Series,
}

/// Generates `count_per_family` series of each family; a pure function of its arguments.
pub fn gen_diagnostic_suite(seed: u64, count_per_family: usize, length: usize) -> Vec<DiagnosticSeries> {
    assert!(length >= 128, "diagnostic series need at least 128 points");
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut out = Vec::with_capacity(count_per_family * Family::ALL.len());
    for family in Family::ALL {
        for i in 0..count_per_family {
            let generator = Generator::sample(family, length, &mut rng);
            let name = format!("{}_{i:03}", family.as_str());
            let series = generator.generate(&name, length, &mut rng);
            out.push(DiagnosticSeries { generator, series });
        }
    }
    out
}

#[derive(Serialize, Deserialize)]
struct Sidecar {
    name: String,
    generator: Generator,
    channels: PropertyChannels,
}

/// Writes one `<name>.csv` (t,value) plus `<name>.channels.json` per series,
/// and an `index.json` listing names in suite order.
pub fn export_suite(suite: &[DiagnosticSeries], dir: &Path) -> Result<()> {
    fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut names = Vec::with_capacity(suite.len());
    for d in suite {
        let s = &d.series;
        let mut csv = String::from("t,value\n");
        for (t, v) in s.values.iter().enumerate() {
            csv.push_str(&format!("{t},{v}\n"));
        }
        let p = dir.join(format!("{}.csv", s.name));
        fs::write(&p, csv).map_err(|e| Error::io(&p, e))?;
        let sidecar = Sidecar {
            name: s.name.clone(),
            generator: d.generator.clone(),
            channels: s
                .channels
                .clone()
                .ok_or_else(|| Error::MissingChannels(s.name.clone()))?,
        };
        let p = dir.join(format!("{}.channels.json", s.name));
        fs::write(&p, serde_json::to_vec(&sidecar)?).map_err(|e| Error::io(&p, e))?;
        names.push(s.name.clone());
    }
    let p = dir.join("index.json");
    fs::write(&p, serde_json::to_vec_pretty(&names)?).map_err(|e| Error::io(&p, e))?;
    Ok(())
}

/// Reads back a suite written by [`export_suite`].
pub fn import_suite(dir: &Path) -> Result<Vec<DiagnosticSeries>> {
    let p = dir.join("index.json");
    let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
    let names: Vec<String> = serde_json::from_slice(&bytes)?;
    names
        .iter()
        .map(|name| {
            let mut series = load_csv(&dir.join(format!("{name}.csv")), "value")?;
            let p = dir.join(format!("{name}.channels.json"));
            let bytes = fs::read(&p).map_err(|e| Error::io(&p, e))?;
            let sidecar: Sidecar = serde_json::from_slice(&bytes)?;
            series.name = sidecar.name;
            series.channels = Some(sidecar.channels);
            Ok(DiagnosticSeries {
                generator: sidecar.generator,
                series,
            })
        })
        .collect()
}

/// Loads one numeric column from a headed CSV file. Other columns are ignored.
pub fn load_csv(path: &Path, value_column: &str) -> Result<Series> {
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    let headers = reader.headers().map_err(|e| csv_error(path, e))?.clone();
    let col = headers
        .iter()
        .position(|h| h.trim() == value_column)
        .ok_or_else(|| Error::Parse {
            path: path.into(),
            row: 1,
            msg: format!("column `{value_column}` not found in header"),
        })?;
    let mut values = Vec::new();
    for (i, record) in reader.records().enumerate() {
        // line 1 is the header
        let line = i + 2;
        let record = record.map_err(|e| Error::Parse {
            path: path.into(),
            row: line,
            msg: e.to_string(),
        })?;
        let cell = record.get(col).unwrap_or("").trim();
        let v: f64 = cell.parse().map_err(|_| Error::Parse {
            path: path.into(),
            row: line,
            msg: format!("`{cell}` is not a number"),
        })?;
        if !v.is_finite() {
            return Err(Error::Parse {
                path: path.into(),
                row: line,
                msg: format!("non-finite value `{cell}`"),
            });
        }
        values.push(v as Float);
    }
    let name = path
        .file_stem()
        .map(|s| s.to_string_lossy().into_owned())
        .unwrap_or_default();
    Ok(Series::new(name, values))
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::io(path, io),
        other => Error::Parse {
            path: path.into(),
            row: 1,
            msg: format!("{other:?}"),
        },
    }
}

/// Where a window came from.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WindowSource {
    pub series: String,
    pub offset: usize,
}

/// A context segment and the prediction target that follows it.
#[derive(Debug, Clone, PartialEq)]
pub struct Window {
    pub context: Vec<Float>,
    pub target: Vec<Float>,
    pub source: WindowSource,
}

/// Cuts windows at `stride` offsets. When more than `max_windows` fit, a
/// seeded subset is kept, returned in ascending offset order.
pub fn make_windows(
    s: &Series,
    context_len: usize,
    pred_len: usize,
    max_windows: usize,
    stride: usize,
    seed: u64,
) -> Result<Vec<Window>> {
    let needed = context_len + pred_len;
    if s.len() < needed || context_len == 0 || pred_len == 0 {
        return Err(Error::SeriesTooShort {
            name: s.name.clone(),
            len: s.len(),
            needed,
        });
    }
    let mut offsets: Vec<usize> = (0..=s.len() - needed).step_by(stride.max(1)).collect();
    if offsets.len() > max_windows {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        offsets.shuffle(&mut rng);
        offsets.truncate(max_windows);
        offsets.sort_unstable();
    }
    Ok(offsets
        .into_iter()
        .map(|o| Window {
            context: s.values[o..o + context_len].to_vec(),
            target: s.values[o + context_len..o + needed].to_vec(),
            source: WindowSource {
                series: s.name.clone(),
                offset: o,
            },
        })
        .collect())
}

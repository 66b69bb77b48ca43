//! TopK sparse autoencoder:
//!
//! ```text
//! z  = TopK(W_enc (x - b_dec) + b_enc, k)
//! x̂ = W_dec z + b_dec
//! ```
//!
//! Selection is by value (no rectifier), ties to the lowest feature index.
//! Decoder columns are kept at unit norm during training.

use std::cmp::Ordering;
use std::fs;
use std::path::Path;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::actstore::{epoch_permutation, Shard};
use crate::error::{Error, Result};
use crate::forecaster::checkpoint::{put_matrix, Reader};
use crate::forecaster::{HookSite, SiteKind};
use crate::numerics::{derive_seed, AdamConfig, Float, LrSchedule, Matrix, Parameter};

pub const SAE_MAGIC: &[u8; 4] = b"TSAE";
pub const SAE_VERSION: u32 = 1;

/// Rows used to estimate the initial `b_dec`.
const WARMUP_ROWS: usize = 4096;
/// Scale of a resampled encoder row relative to the mean live row norm.
const RESAMPLE_ENC_SCALE: Float = 0.2;

/// Training settings.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SaeConfig {
    pub d_sae: usize,
    pub k: usize,
    pub steps: usize,
    pub batch: usize,
    pub base_lr: Float,
    pub warmup_steps: usize,
    /// Steps between dead-feature scans (0 disables resampling).
    pub dead_scan_every: usize,
    /// A feature is dead at a scan if it fired in none of the trailing
    /// `dead_threshold_steps` training batches.
    pub dead_threshold_steps: usize,
    pub seed: u64,
}

impl Default for SaeConfig {
    fn default() -> Self {
        Self {
            d_sae: 512,
            k: 16,
            steps: 5000,
            batch: 256,
            base_lr: 3e-4,
            warmup_steps: 100,
            dead_scan_every: 500,
            dead_threshold_steps: 50,
            seed: 0,
        }
    }
}

impl SaeConfig {
    pub fn validate(&self) -> Vec<String> {
        let mut errs = Vec::new();
        if self.d_sae == 0 {
            errs.push("sae.d_sae must be >= 1".to_string());
        }
        if self.k > self.d_sae {
            errs.push(format!("sae.k ({}) must not exceed sae.d_sae ({})", self.k, self.d_sae));
        }
        if self.batch == 0 {
            errs.push("sae.batch must be >= 1".to_string());
        }
        if !(self.base_lr > 0.0) {
            errs.push(format!("sae.base_lr must be positive (got {})", self.base_lr));
        }
        if self.dead_scan_every > 0 && self.dead_threshold_steps == 0 {
            errs.push("sae.dead_threshold_steps must be >= 1 when resampling is enabled".to_string());
        }
        errs
    }
}

/// Sparse code: feature ids in ascending order with their activations.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct SparseCode {
    pub indices: Vec<usize>,
    pub values: Vec<Float>,
}

impl SparseCode {
    pub fn len(&self) -> usize {
        self.indices.len()
    }

    pub fn is_empty(&self) -> bool {
        self.indices.is_empty()
    }

    /// Value of feature `j`, zero if not retained.
    pub fn get(&self, j: usize) -> Float {
        match self.indices.binary_search(&j) {
            Ok(p) => self.values[p],
            Err(_) => 0.0,
        }
    }

    /// The code with the listed features dropped.
    pub fn without(&self, removed: &[usize]) -> SparseCode {
        let mut out = SparseCode::default();
        for (&i, &v) in self.indices.iter().zip(&self.values) {
            if !removed.contains(&i) {
                out.indices.push(i);
                out.values.push(v);
            }
        }
        out
    }
}

/// Parameters of one SAE.
#[derive(Debug, Clone, PartialEq)]
pub struct Sae {
    pub site: HookSite,
    pub k: usize,
    /// d_sae x d_model
    pub w_enc: Parameter,
    /// 1 x d_sae
    pub b_enc: Parameter,
    /// d_model x d_sae
    pub w_dec: Parameter,
    /// 1 x d_model
    pub b_dec: Parameter,
}

/// One dead-feature resampling event.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ResampleEvent {
    pub step: usize,
    pub dead_before: usize,
    pub resampled: usize,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct SaeTrainLog {
    /// Per-step batch MSE (per element).
    pub losses: Vec<f64>,
    /// (step, dead count) at each scan.
    pub dead_counts: Vec<(usize, usize)>,
    pub resamples: Vec<ResampleEvent>,
    pub warnings: Vec<String>,
    /// Fraction of variance unexplained over the full training set.
    pub final_fvu: Option<f64>,
}

/// Result of [`Sae::dead_feature_scan`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DeadScan {
    pub dead: Vec<usize>,
    pub active_fraction: f64,
}

/// Indices of the `k` largest entries of `a`, ascending.
fn top_k(a: &[Float], k: usize) -> Vec<usize> {
    let k = k.min(a.len());
    if k == 0 {
        return Vec::new();
    }
    let mut idx: Vec<usize> = (0..a.len()).collect();
    let cmp = |&i: &usize, &j: &usize| {
        a[j].partial_cmp(&a[i])
            .unwrap_or(Ordering::Equal)
            .then(i.cmp(&j))
    };
    if k < a.len() {
        idx.select_nth_unstable_by(k - 1, cmp);
        idx.truncate(k);
    }
    idx.sort_unstable();
    idx
}

fn dot(a: &[Float], b: &[Float]) -> Float {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

impl Sae {
    /// Random unit decoder columns, `W_enc = W_decᵀ`, zero biases.
    pub fn new(site: HookSite, d_model: usize, d_sae: usize, k: usize, seed: u64) -> Result<Self> {
        if k > d_sae || d_model == 0 || d_sae == 0 {
            return Err(Error::Config(vec![format!(
                "invalid SAE geometry: d_model {d_model}, d_sae {d_sae}, k {k}"
            )]));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut w_dec = Matrix::randn(d_model, d_sae, 1.0, &mut rng);
        normalize_columns(&mut w_dec);
        Ok(Self {
            site,
            k,
            w_enc: Parameter::new("w_enc", w_dec.transpose()),
            b_enc: Parameter::new("b_enc", Matrix::zeros(1, d_sae)),
            w_dec: Parameter::new("w_dec", w_dec),
            b_dec: Parameter::new("b_dec", Matrix::zeros(1, d_model)),
        })
    }

    pub fn d_model(&self) -> usize {
        self.w_dec.value.rows()
    }

    pub fn d_sae(&self) -> usize {
        self.w_dec.value.cols()
    }

    /// Encoder pre-activations for each row of `x` (B x d_sae).
    pub fn pre_activations(&self, x: &Matrix) -> Result<Matrix> {
        let mut centered = x.clone();
        let b = self.b_dec.value.as_slice();
        if centered.cols() != b.len() {
            return Err(Error::Dimension {
                op: "sae encode",
                left: x.shape(),
                right: (1, b.len()),
            });
        }
        for r in 0..centered.rows() {
            for (v, bd) in centered.row_mut(r).iter_mut().zip(b) {
                *v -= bd;
            }
        }
        let mut a = centered.matmul_nt(&self.w_enc.value)?;
        let be = self.b_enc.value.as_slice();
        for r in 0..a.rows() {
            for (v, b) in a.row_mut(r).iter_mut().zip(be) {
                *v += b;
            }
        }
        Ok(a)
    }

    pub fn encode(&self, x: &[Float]) -> Result<SparseCode> {
        let m = Matrix::from_vec(1, x.len(), x.to_vec())?;
        Ok(self.encode_batch(&m)?.pop().expect("one row"))
    }

    pub fn encode_batch(&self, x: &Matrix) -> Result<Vec<SparseCode>> {
        let a = self.pre_activations(x)?;
        Ok((0..a.rows())
            .map(|r| {
                let row = a.row(r);
                let indices = top_k(row, self.k);
                let values = indices.iter().map(|&j| row[j]).collect();
                SparseCode { indices, values }
            })
            .collect())
    }

    /// `b_dec + Σ value_j · col_j`, summed in index order.
    pub fn decode(&self, z: &SparseCode) -> Result<Vec<Float>> {
        let d_sae = self.d_sae();
        let w = &self.w_dec.value;
        let mut out = self.b_dec.value.as_slice().to_vec();
        for (&j, &v) in z.indices.iter().zip(&z.values) {
            if j >= d_sae {
                return Err(Error::OutOfRange {
                    what: "SAE feature",
                    index: j,
                    limit: d_sae,
                });
            }
            for (i, o) in out.iter_mut().enumerate() {
                *o += v * w.get(i, j);
            }
        }
        Ok(out)
    }

    pub fn decode_batch(&self, codes: &[SparseCode]) -> Result<Matrix> {
        let mut out = Matrix::zeros(codes.len(), self.d_model());
        for (r, z) in codes.iter().enumerate() {
            out.row_mut(r).copy_from_slice(&self.decode(z)?);
        }
        Ok(out)
    }

    pub fn reconstruct(&self, x: &Matrix) -> Result<Matrix> {
        self.decode_batch(&self.encode_batch(x)?)
    }

    /// Mean over rows of `||x - x̂||² / d_model`, accumulated in f64.
    pub fn mse(&self, x: &Matrix) -> Result<f64> {
        let xh = self.reconstruct(x)?;
        Ok(squared_error(x, &xh) / (x.rows().max(1) * x.cols()) as f64)
    }

    /// Features that never enter a TopK set on `sample`.
    pub fn dead_feature_scan(&self, sample: &Matrix) -> Result<DeadScan> {
        let mut fired = vec![false; self.d_sae()];
        for z in self.encode_batch(sample)? {
            for j in z.indices {
                fired[j] = true;
            }
        }
        let dead: Vec<usize> = (0..fired.len()).filter(|&j| !fired[j]).collect();
        Ok(DeadScan {
            active_fraction: 1.0 - dead.len() as f64 / self.d_sae() as f64,
            dead,
        })
    }

    /// Mean squared error gradient for one batch, accumulated into the
    /// parameter gradients. Returns the per-element MSE and the codes.
    pub fn accumulate_gradients(&mut self, x: &Matrix) -> Result<(f64, Vec<SparseCode>)> {
        let (b, d) = x.shape();
        let codes = self.encode_batch(x)?;
        let xh = self.decode_batch(&codes)?;
        let loss = squared_error(x, &xh) / (b * d) as f64;
        let scale = 2.0 / (b * d) as Float;
        let b_dec = self.b_dec.value.as_slice().to_vec();
        let mut db_dec = vec![0.0 as Float; d];
        let mut e = vec![0.0 as Float; d];
        let mut centered = vec![0.0 as Float; d];
        let mut col = vec![0.0 as Float; d];
        for (r, z) in codes.iter().enumerate() {
            for i in 0..d {
                e[i] = scale * (xh.get(r, i) - x.get(r, i));
                centered[i] = x.get(r, i) - b_dec[i];
                db_dec[i] += e[i];
            }
            for (&j, &zj) in z.indices.iter().zip(&z.values) {
                for (i, c) in col.iter_mut().enumerate() {
                    *c = self.w_dec.value.get(i, j);
                }
                let dz = dot(&col, &e);
                for i in 0..d {
                    let g = self.w_dec.grad.get(i, j) + zj * e[i];
                    self.w_dec.grad.set(i, j, g);
                }
                for (g, c) in self.w_enc.grad.row_mut(j).iter_mut().zip(&centered) {
                    *g += dz * c;
                }
                self.b_enc.grad.as_mut_slice()[j] += dz;
                for (g, w) in db_dec.iter_mut().zip(self.w_enc.value.row(j)) {
                    *g -= dz * w;
                }
            }
        }
        for (g, v) in self.b_dec.grad.as_mut_slice().iter_mut().zip(&db_dec) {
            *g += v;
        }
        Ok((loss, codes))
    }

    fn zero_grads(&mut self) {
        for p in self.params_mut() {
            p.zero_grad();
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.w_enc, &mut self.b_enc, &mut self.w_dec, &mut self.b_dec]
    }

    /// Removes from each decoder-column gradient its component along the column.
    fn project_decoder_gradient(&mut self) {
        let (d, n) = self.w_dec.value.shape();
        for j in 0..n {
            let mut along = 0.0;
            for i in 0..d {
                along += self.w_dec.grad.get(i, j) * self.w_dec.value.get(i, j);
            }
            for i in 0..d {
                let g = self.w_dec.grad.get(i, j) - along * self.w_dec.value.get(i, j);
                self.w_dec.grad.set(i, j, g);
            }
        }
    }

    /// Reinitializes `dead` features from the inputs the current model
    /// reconstructs worst. Returns how many were resampled.
    pub fn resample_dead(&mut self, dead: &[usize], inputs: &Matrix) -> Result<usize> {
        if dead.is_empty() {
            return Ok(0);
        }
        let xh = self.reconstruct(inputs)?;
        let mut residuals: Vec<(f64, usize)> = (0..inputs.rows())
            .map(|r| {
                let s: f64 = inputs
                    .row(r)
                    .iter()
                    .zip(xh.row(r))
                    .map(|(a, b)| ((a - b) as f64).powi(2))
                    .sum();
                (s, r)
            })
            .filter(|(s, _)| *s > 1e-12)
            .collect();
        if residuals.is_empty() {
            return Ok(0);
        }
        residuals.sort_by(|a, b| b.0.partial_cmp(&a.0).unwrap_or(Ordering::Equal).then(a.1.cmp(&b.1)));
        let dead_set: Vec<bool> = (0..self.d_sae()).map(|j| dead.contains(&j)).collect();
        let live_norms: Vec<f64> = (0..self.d_sae())
            .filter(|&j| !dead_set[j])
            .map(|j| dot(self.w_enc.value.row(j), self.w_enc.value.row(j)).sqrt() as f64)
            .collect();
        let live_norm = if live_norms.is_empty() {
            1.0
        } else {
            live_norms.iter().sum::<f64>() / live_norms.len() as f64
        } as Float;
        let d = self.d_model();
        for (n, &j) in dead.iter().enumerate() {
            let r = residuals[n % residuals.len()].1;
            let mut dir: Vec<Float> = inputs.row(r).iter().zip(xh.row(r)).map(|(a, b)| a - b).collect();
            let norm = dot(&dir, &dir).sqrt();
            dir.iter_mut().for_each(|v| *v /= norm);
            for i in 0..d {
                self.w_dec.value.set(i, j, dir[i]);
                self.w_dec.adam_m.set(i, j, 0.0);
                self.w_dec.adam_v.set(i, j, 0.0);
            }
            for (w, v) in self.w_enc.value.row_mut(j).iter_mut().zip(&dir) {
                *w = v * RESAMPLE_ENC_SCALE * live_norm;
            }
            self.w_enc.adam_m.row_mut(j).fill(0.0);
            self.w_enc.adam_v.row_mut(j).fill(0.0);
            self.b_enc.value.as_mut_slice()[j] = 0.0;
            self.b_enc.adam_m.as_mut_slice()[j] = 0.0;
            self.b_enc.adam_v.as_mut_slice()[j] = 0.0;
        }
        Ok(dead.len())
    }

    /// Largest deviation of a decoder column norm from 1.
    pub fn max_column_norm_error(&self) -> f64 {
        column_norms(&self.w_dec.value)
            .iter()
            .map(|n| (n - 1.0).abs())
            .fold(0.0, f64::max)
    }

    pub fn decoder_column_norm(&self, j: usize) -> f64 {
        let w = &self.w_dec.value;
        (0..w.rows()).map(|i| (w.get(i, j) as f64).powi(2)).sum::<f64>().sqrt()
    }
}

fn squared_error(a: &Matrix, b: &Matrix) -> f64 {
    a.as_slice()
        .iter()
        .zip(b.as_slice())
        .map(|(x, y)| ((x - y) as f64).powi(2))
        .sum()
}

fn column_norms(w: &Matrix) -> Vec<f64> {
    (0..w.cols())
        .map(|j| (0..w.rows()).map(|i| (w.get(i, j) as f64).powi(2)).sum::<f64>().sqrt())
        .collect()
}

fn normalize_columns(w: &mut Matrix) {
    for (j, n) in column_norms(w).into_iter().enumerate() {
        if n > 0.0 {
            for i in 0..w.rows() {
                let v = (w.get(i, j) as f64 / n) as Float;
                w.set(i, j, v);
            }
        }
    }
}

fn gather(rows: &Matrix, idx: &[usize]) -> Matrix {
    let mut out = Matrix::zeros(idx.len(), rows.cols());
    for (o, &i) in idx.iter().enumerate() {
        out.row_mut(o).copy_from_slice(rows.row(i));
    }
    out
}

/// Fraction of variance unexplained: total squared error over total
/// squared deviation from the per-dimension mean.
pub fn fvu(sae: &Sae, x: &Matrix) -> Result<f64> {
    let xh = sae.reconstruct(x)?;
    let (n, d) = x.shape();
    let mut mean = vec![0.0f64; d];
    for r in 0..n {
        for (m, &v) in mean.iter_mut().zip(x.row(r)) {
            *m += v as f64;
        }
    }
    mean.iter_mut().for_each(|m| *m /= n.max(1) as f64);
    let mut var = 0.0;
    for r in 0..n {
        for (m, &v) in mean.iter().zip(x.row(r)) {
            var += (v as f64 - m).powi(2);
        }
    }
    let err = squared_error(x, &xh);
    Ok(if var > 0.0 { err / var } else if err == 0.0 { 0.0 } else { f64::INFINITY })
}

/// Trains an SAE on `rows` (one activation per row).
pub fn train_sae(rows: &Matrix, site: HookSite, cfg: &SaeConfig) -> Result<(Sae, SaeTrainLog)> {
    let errs = cfg.validate();
    if !errs.is_empty() {
        return Err(Error::Config(errs));
    }
    let n = rows.rows();
    let mut sae = Sae::new(site, rows.cols(), cfg.d_sae, cfg.k, cfg.seed)?;
    let mut log = SaeTrainLog::default();
    if cfg.steps == 0 {
        return Ok((sae, log));
    }
    if n < cfg.batch {
        return Err(Error::Length {
            what: "activation rows vs SAE batch",
            left: n,
            right: cfg.batch,
        });
    }
    let data_seed = derive_seed(cfg.seed, 1);
    let mut epoch = 0u64;
    let mut order = epoch_permutation(n, data_seed, epoch);

    let warm = gather(rows, &order[..n.min(WARMUP_ROWS)]);
    let mut mean = vec![0.0f64; warm.cols()];
    for r in 0..warm.rows() {
        for (m, &v) in mean.iter_mut().zip(warm.row(r)) {
            *m += v as f64;
        }
    }
    for (b, m) in sae.b_dec.value.as_mut_slice().iter_mut().zip(&mean) {
        *b = (m / warm.rows() as f64) as Float;
    }

    let sched = LrSchedule::new(cfg.base_lr, cfg.steps, cfg.warmup_steps);
    let adam = AdamConfig::default();
    let mut cursor = 0usize;
    let mut last_fired = vec![0usize; cfg.d_sae];
    for step in 0..cfg.steps {
        let mut idx = Vec::with_capacity(cfg.batch);
        while idx.len() < cfg.batch {
            if cursor == n {
                epoch += 1;
                order = epoch_permutation(n, data_seed, epoch);
                cursor = 0;
            }
            let take = (cfg.batch - idx.len()).min(n - cursor);
            idx.extend_from_slice(&order[cursor..cursor + take]);
            cursor += take;
        }
        let batch = gather(rows, &idx);

        if cfg.dead_scan_every > 0 && step > 0 && step % cfg.dead_scan_every == 0 {
            // last_fired[j] is one past the last step in which j fired.
            let dead: Vec<usize> = (0..cfg.d_sae)
                .filter(|&j| step >= cfg.dead_threshold_steps && step - last_fired[j] >= cfg.dead_threshold_steps)
                .collect();
            log.dead_counts.push((step, dead.len()));
            if !dead.is_empty() {
                let resampled = sae.resample_dead(&dead, &batch)?;
                if resampled == 0 {
                    log.warnings.push(format!(
                        "step {step}: {} dead features but no residual to resample from",
                        dead.len()
                    ));
                }
                for &j in &dead {
                    last_fired[j] = step;
                }
                log.resamples.push(ResampleEvent {
                    step,
                    dead_before: dead.len(),
                    resampled,
                });
            }
        }

        sae.zero_grads();
        let (loss, codes) = sae.accumulate_gradients(&batch)?;
        if !loss.is_finite() {
            return Err(Error::Divergence {
                step,
                what: format!("SAE loss is {loss}"),
            });
        }
        for z in &codes {
            for &j in &z.indices {
                last_fired[j] = step + 1;
            }
        }
        log.losses.push(loss);
        sae.project_decoder_gradient();
        let lr = sched.lr(step);
        for p in sae.params_mut() {
            p.adam_step(lr, adam).map_err(|e| match e {
                Error::NonFiniteGradient(name) => Error::Divergence {
                    step,
                    what: format!("non-finite gradient in {name}"),
                },
                other => other,
            })?;
        }
        normalize_columns(&mut sae.w_dec.value);
    }
    log.final_fvu = Some(fvu(&sae, rows)?);
    Ok((sae, log))
}

/// Convenience wrapper reading every row of a shard.
pub fn train_sae_on_shard(shard: &Shard, cfg: &SaeConfig) -> Result<(Sae, SaeTrainLog)> {
    train_sae(&shard.read_all()?, shard.site, cfg)
}

/// Random sample of up to `n` rows, for scans.
pub fn sample_rows(rows: &Matrix, n: usize, seed: u64) -> Matrix {
    let mut idx: Vec<usize> = (0..rows.rows()).collect();
    idx.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    idx.truncate(n);
    idx.sort_unstable();
    gather(rows, &idx)
}

/// Writes an SAE checkpoint: `TSAE`, version, site, d_model, d_sae, k,
/// the four parameter blobs, then a JSON footer echoing `cfg`, followed by
/// the footer's byte offset.
pub fn save_sae(sae: &Sae, cfg: &SaeConfig, path: &Path) -> Result<()> {
    let mut buf = Vec::new();
    buf.extend_from_slice(SAE_MAGIC);
    buf.extend_from_slice(&SAE_VERSION.to_le_bytes());
    buf.push(sae.site.kind.code());
    for v in [sae.site.block_index, sae.d_model(), sae.d_sae(), sae.k] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for p in [&sae.w_enc, &sae.b_enc, &sae.w_dec, &sae.b_dec] {
        put_matrix(&mut buf, &p.value);
    }
    let footer = buf.len() as u64;
    buf.extend_from_slice(&serde_json::to_vec(cfg)?);
    buf.extend_from_slice(&footer.to_le_bytes());
    fs::write(path, buf).map_err(|e| Error::io(path, e))
}

pub fn load_sae(path: &Path) -> Result<(Sae, SaeConfig)> {
    let data = fs::read(path).map_err(|e| Error::io(path, e))?;
    let mut r = Reader::new(&data, path);
    if r.bytes(4)? != SAE_MAGIC {
        return Err(Error::Format {
            path: path.into(),
            offset: 0,
            msg: "bad magic, expected TSAE".into(),
        });
    }
    let version = r.u32()?;
    if version != SAE_VERSION {
        return Err(r.fail(format!("unsupported version {version}")));
    }
    let code = r.bytes(1)?[0];
    let kind = SiteKind::from_code(code).ok_or_else(|| r.fail(format!("unknown site kind {code}")))?;
    let block = r.u32()? as usize;
    let (d_model, d_sae, k) = (r.u32()? as usize, r.u32()? as usize, r.u32()? as usize);
    let site = HookSite { kind, block_index: block };
    let mut sae = Sae::new(site, d_model, d_sae, k, 0).map_err(|e| r.fail(e.to_string()))?;
    sae.w_enc.value = r.matrix(d_sae, d_model)?;
    sae.b_enc.value = r.matrix(1, d_sae)?;
    sae.w_dec.value = r.matrix(d_model, d_sae)?;
    sae.b_dec.value = r.matrix(1, d_model)?;
    let footer_at = r.position();
    if r.remaining() < 8 {
        return Err(r.fail("missing footer".into()));
    }
    let json = r.bytes(r.remaining() - 8)?;
    let stored = r.u64()?;
    if stored != footer_at {
        return Err(Error::Format {
            path: path.into(),
            offset: data.len() as u64 - 8,
            msg: format!("trailer points to {stored}, footer starts at {footer_at}"),
        });
    }
    let cfg: SaeConfig = serde_json::from_slice(&json).map_err(|e| Error::Format {
        path: path.into(),
        offset: footer_at,
        msg: format!("config footer: {e}"),
    })?;
    Ok((sae, cfg))
}

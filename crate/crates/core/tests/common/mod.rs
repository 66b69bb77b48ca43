//! Independent oracles shared by the integration tests. The reference
//! forward passes are written out in plain f64 from the architecture
//! description and never call the crate's layers.

#![allow(dead_code)]

use std::path::{Path, PathBuf};

use tsmi::forecaster::{Model, ModelConfig};
use tsmi::pipeline::ExperimentConfig;
use tsmi::sae::Sae;
use tsmi::tokenizer::TokenizedWindow;

/// Row-major f64 matrix.
#[derive(Clone, Debug)]
pub struct M {
    pub r: usize,
    pub c: usize,
    pub v: Vec<f64>,
}

impl M {
    pub fn zeros(r: usize, c: usize) -> Self {
        Self { r, c, v: vec![0.0; r * c] }
    }
    pub fn at(&self, i: usize, j: usize) -> f64 {
        self.v[i * self.c + j]
    }
    pub fn set(&mut self, i: usize, j: usize, x: f64) {
        self.v[i * self.c + j] = x;
    }
    pub fn mm(&self, b: &M) -> M {
        assert_eq!(self.c, b.r);
        let mut o = M::zeros(self.r, b.c);
        for i in 0..self.r {
            for k in 0..self.c {
                let a = self.at(i, k);
                for j in 0..b.c {
                    o.v[i * b.c + j] += a * b.at(k, j);
                }
            }
        }
        o
    }
    pub fn add(&self, b: &M) -> M {
        M {
            r: self.r,
            c: self.c,
            v: self.v.iter().zip(&b.v).map(|(x, y)| x + y).collect(),
        }
    }
    fn rows(&self, r0: usize, n: usize) -> M {
        M {
            r: n,
            c: self.c,
            v: self.v[r0 * self.c..(r0 + n) * self.c].to_vec(),
        }
    }
}

/// Model parameters as f64 matrices, in `Model::params()` order.
pub fn model_params(model: &Model) -> Vec<M> {
    model
        .params()
        .iter()
        .map(|p| {
            let (r, c) = p.value.shape();
            M {
                r,
                c,
                v: p.value.as_slice().iter().map(|&x| x as f64).collect(),
            }
        })
        .collect()
}

fn rmsnorm(x: &M, g: &M) -> M {
    let mut o = x.clone();
    for i in 0..x.r {
        let ms: f64 = (0..x.c).map(|j| x.at(i, j).powi(2)).sum::<f64>() / x.c as f64;
        let inv = 1.0 / (ms + 1e-6).sqrt();
        for j in 0..x.c {
            o.set(i, j, x.at(i, j) * inv * g.v[j]);
        }
    }
    o
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn attention(xq: &M, xkv: &M, w: &[M], heads: usize, causal: bool) -> M {
    let (q, k, v) = (xq.mm(&w[0]), xkv.mm(&w[1]), xkv.mm(&w[2]));
    let d = q.c;
    let dh = d / heads;
    let mut concat = M::zeros(xq.r, d);
    for h in 0..heads {
        for i in 0..xq.r {
            let mut s: Vec<f64> = (0..xkv.r)
                .map(|j| (0..dh).map(|t| q.at(i, h * dh + t) * k.at(j, h * dh + t)).sum::<f64>() / (dh as f64).sqrt())
                .collect();
            if causal {
                s.truncate(i + 1);
            }
            let m = s.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let e: Vec<f64> = s.iter().map(|x| (x - m).exp()).collect();
            let z: f64 = e.iter().sum();
            for t in 0..dh {
                let o: f64 = e.iter().enumerate().map(|(j, p)| p / z * v.at(j, h * dh + t)).sum();
                concat.set(i, h * dh + t, o);
            }
        }
    }
    concat.mm(&w[3])
}

fn ffn(x: &M, w1: &M, w2: &M) -> M {
    let mut h = x.mm(w1);
    h.v.iter_mut().for_each(|v| *v = gelu(*v));
    h.mm(w2)
}

fn embed(tokens: &[u32], emb: &M, pos: &M) -> M {
    let mut x = M::zeros(tokens.len(), emb.c);
    for (i, &t) in tokens.iter().enumerate() {
        for j in 0..emb.c {
            x.set(i, j, emb.at(t as usize, j) + pos.at(i, j));
        }
    }
    x
}

/// Mean teacher-forced cross-entropy of the target tokens, computed one
/// window at a time in f64. Decoder input is the pad token (`vocab - 2`)
/// followed by the target shifted right.
pub fn reference_loss(cfg: &ModelConfig, p: &[M], windows: &[TokenizedWindow]) -> f64 {
    let (ne, nd, heads) = (cfg.n_encoder_blocks, cfg.n_decoder_blocks, cfg.n_heads);
    let pad = (cfg.vocab - 2) as u32;
    let mut total = 0.0;
    let mut count = 0usize;
    for w in windows {
        let mut i = 3;
        let mut x = embed(&w.context_tokens, &p[0], &p[1]);
        for _ in 0..ne {
            let a = attention(&rmsnorm(&x, &p[i]), &rmsnorm(&x, &p[i]), &p[i + 1..i + 5], heads, false);
            x = x.add(&a);
            let f = ffn(&rmsnorm(&x, &p[i + 5]), &p[i + 6], &p[i + 7]);
            x = x.add(&f);
            i += 8;
        }
        let enc = rmsnorm(&x, &p[i]);
        i += 1;
        let mut dec_in = vec![pad];
        dec_in.extend_from_slice(&w.target_tokens[..w.target_tokens.len() - 1]);
        let mut y = embed(&dec_in, &p[0], &p[2]);
        for _ in 0..nd {
            let n1 = rmsnorm(&y, &p[i]);
            y = y.add(&attention(&n1, &n1, &p[i + 1..i + 5], heads, true));
            let n2 = rmsnorm(&y, &p[i + 5]);
            y = y.add(&attention(&n2, &enc, &p[i + 6..i + 10], heads, false));
            let f = ffn(&rmsnorm(&y, &p[i + 10]), &p[i + 11], &p[i + 12]);
            y = y.add(&f);
            i += 13;
        }
        let logits = rmsnorm(&y, &p[i]).mm(&p[i + 1]);
        for (r, &t) in w.target_tokens.iter().enumerate() {
            let row = logits.rows(r, 1).v;
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = m + row.iter().map(|v| (v - m).exp()).sum::<f64>().ln();
            total += lse - row[t as usize];
            count += 1;
        }
    }
    total / count as f64
}

/// Layer family of each entry of `Model::params()` (by name).
pub fn layer_group(name: &str) -> &'static str {
    if name == "tok_emb" || name.ends_with("_pos") {
        "embeddings"
    } else if name.contains("norm") {
        "norms"
    } else if name.contains(".xattn.") {
        "cross-attention"
    } else if name.contains(".attn.") {
        "attention"
    } else if name.contains(".ffn.") {
        "feed-forward"
    } else {
        "output head"
    }
}

/// SAE per-element MSE in f64 with the TopK support held fixed.
pub fn reference_sae_loss(sae: &Sae, blobs: &[Vec<f64>; 4], x: &[Vec<f64>], support: &[Vec<usize>]) -> f64 {
    let (d, n) = (sae.d_model(), sae.d_sae());
    let [w_enc, b_enc, w_dec, b_dec] = blobs;
    let mut total = 0.0;
    for (row, s) in x.iter().zip(support) {
        let mut xh = b_dec.clone();
        for &j in s {
            let z: f64 = (0..d).map(|i| w_enc[j * d + i] * (row[i] - b_dec[i])).sum::<f64>() + b_enc[j];
            for i in 0..d {
                xh[i] += z * w_dec[i * n + j];
            }
        }
        total += row.iter().zip(&xh).map(|(a, b)| (a - b).powi(2)).sum::<f64>();
    }
    total / (x.len() * d) as f64
}

/// CRPS by numerically integrating (F_emp(t) - 1{t >= y})² on a fine grid.
/// Both factors are piecewise constant, so a midpoint rule over the merged
/// breakpoints is exact up to summation error.
pub fn crps_by_integration(samples: &[f64], y: f64) -> f64 {
    let m = samples.len() as f64;
    let mut pts: Vec<f64> = samples.to_vec();
    pts.push(y);
    pts.sort_by(f64::total_cmp);
    let mut total = 0.0;
    for w in pts.windows(2) {
        let (a, b) = (w[0], w[1]);
        if b <= a {
            continue;
        }
        // Sub-steps keep this a genuine grid integration rather than a
        // closed form.
        let steps = 64;
        let h = (b - a) / steps as f64;
        for s in 0..steps {
            let t = a + (s as f64 + 0.5) * h;
            let f = samples.iter().filter(|&&x| x <= t).count() as f64 / m;
            let ind = if t >= y { 1.0 } else { 0.0 };
            total += (f - ind).powi(2) * h;
        }
    }
    total
}

pub fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

pub fn desk_config() -> ExperimentConfig {
    ExperimentConfig::load(&crate_dir().join("configs/desk.json")).expect("bundled config")
}

/// The desk config shrunk so every stage runs in seconds.
pub fn smoke_config(workdir: &Path) -> ExperimentConfig {
    let mut c = desk_config();
    c.workdir = workdir.to_path_buf();
    c.data.train_suite_per_family = 2;
    c.data.taxonomy_suite_per_family = 2;
    c.data.suite_length = 128;
    c.windows.train_per_series = 3;
    c.windows.csv_train_windows = 12;
    c.windows.taxonomy_per_series = 2;
    c.model.n_encoder_blocks = 2;
    c.model.n_decoder_blocks = 2;
    c.model.d_model = 16;
    c.model.d_ff = 32;
    c.model.n_heads = 2;
    c.train.steps = 4;
    c.train.batch = 4;
    c.train.warmup_steps = 1;
    c.sae.d_sae = 64;
    c.sae.k = 4;
    c.sae.steps = 20;
    c.sae.batch = 32;
    c.sae.dead_scan_every = 10;
    c.sae.dead_threshold_steps = 5;
    c.sites = vec!["enc.1".parse().unwrap(), "dec.1".parse().unwrap()];
    c.ablation.sites = vec!["enc.1".parse().unwrap()];
    c.ablation.n_windows = 3;
    c.ablation.n_samples = 2;
    c.ablation.n_features = 4;
    c.ablation.checkpoints = vec![1, 2, 4];
    c
}

pub fn tiny_model_config() -> ModelConfig {
    ModelConfig {
        n_encoder_blocks: 2,
        n_decoder_blocks: 2,
        d_model: 8,
        n_heads: 2,
        d_ff: 16,
        vocab: 10,
        max_context: 8,
        seed: 42,
    }
}

/// A tiny model moved to a generic point (at initialization attention is
/// nearly uniform and query/key gradients are vanishingly small), plus a
/// two-window batch.
pub fn generic_model() -> (Model, Vec<TokenizedWindow>) {
    use rand::{Rng, SeedableRng};
    let mut model = Model::new(tiny_model_config()).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(7);
    for p in model.params_mut() {
        let (r, c) = p.shape();
        p.value = tsmi::numerics::Matrix::randn(r, c, 0.7, &mut rng);
    }
    let windows = (0..2)
        .map(|_| TokenizedWindow {
            context_tokens: (0..5).map(|_| rng.gen_range(0..8)).collect(),
            target_tokens: (0..3).map(|_| rng.gen_range(0..8)).collect(),
            scale: 1.0,
        })
        .collect();
    (model, windows)
}

fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

/// (layer family, entries checked, worst relative error) comparing the
/// model's 32-bit analytic gradients with central differences of the f64
/// reference loss.
pub fn model_gradient_report(per_group: usize) -> Vec<(String, usize, f64)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let (mut model, windows) = generic_model();
    let refs: Vec<&TokenizedWindow> = windows.iter().collect();
    model.accumulate_gradients(&refs).unwrap();
    let cfg = model.config;
    let base = model_params(&model);
    let mut groups: std::collections::BTreeMap<&str, Vec<(usize, usize)>> = Default::default();
    for (pi, p) in model.params().iter().enumerate() {
        let g = groups.entry(layer_group(&p.name)).or_default();
        g.extend((0..p.len()).map(|e| (pi, e)));
    }
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(11);
    let h = 1e-5;
    let mut out = Vec::new();
    for (name, mut entries) in groups {
        entries.shuffle(&mut rng);
        entries.truncate(per_group);
        let mut worst = 0.0f64;
        for &(pi, e) in &entries {
            let mut p = base.clone();
            p[pi].v[e] += h;
            let plus = reference_loss(&cfg, &p, &windows);
            p[pi].v[e] -= 2.0 * h;
            let minus = reference_loss(&cfg, &p, &windows);
            let numeric = (plus - minus) / (2.0 * h);
            let analytic = model.params()[pi].grad.as_slice()[e] as f64;
            worst = worst.max(rel_err(analytic, numeric));
        }
        out.push((name.to_string(), entries.len(), worst));
    }
    out
}

/// Same comparison for the SAE reconstruction loss, per parameter.
pub fn sae_gradient_report(per_param: usize) -> Vec<(String, usize, f64)> {
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    let site = "enc.0".parse().unwrap();
    let mut sae = Sae::new(site, 24, 48, 6, 3).unwrap();
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(5);
    for p in sae.params_mut() {
        let (r, c) = p.shape();
        let jitter = tsmi::numerics::Matrix::randn(r, c, 0.2, &mut rng);
        for (v, j) in p.value.as_mut_slice().iter_mut().zip(jitter.as_slice()) {
            *v += j;
        }
    }
    let x = tsmi::numerics::Matrix::randn(16, 24, 1.0, &mut rng);
    let (_, codes) = sae.accumulate_gradients(&x).unwrap();
    let support: Vec<Vec<usize>> = codes.iter().map(|z| z.indices.clone()).collect();
    let rows: Vec<Vec<f64>> = (0..x.rows()).map(|r| x.row(r).iter().map(|&v| v as f64).collect()).collect();
    let names = ["w_enc", "b_enc", "w_dec", "b_dec"];
    let blob = |p: &tsmi::numerics::Parameter| p.value.as_slice().iter().map(|&v| v as f64).collect::<Vec<f64>>();
    let base = [blob(&sae.w_enc), blob(&sae.b_enc), blob(&sae.w_dec), blob(&sae.b_dec)];
    let grads = [&sae.w_enc.grad, &sae.b_enc.grad, &sae.w_dec.grad, &sae.b_dec.grad];
    let h = 1e-6;
    let mut out = Vec::new();
    for (pi, name) in names.iter().enumerate() {
        // Only entries that touch the active support have nonzero gradient;
        // sample from those plus a few inactive ones.
        let mut entries: Vec<usize> = (0..base[pi].len()).collect();
        entries.shuffle(&mut rng);
        entries.sort_by_key(|&e| grads[pi].as_slice()[e] == 0.0);
        entries.truncate(per_param);
        let mut worst = 0.0f64;
        for &e in &entries {
            let mut b = base.clone();
            b[pi][e] += h;
            let plus = reference_sae_loss(&sae, &b, &rows, &support);
            b[pi][e] -= 2.0 * h;
            let minus = reference_sae_loss(&sae, &b, &rows, &support);
            let numeric = (plus - minus) / (2.0 * h);
            worst = worst.max(rel_err(grads[pi].as_slice()[e] as f64, numeric));
        }
        out.push((format!("sae.{name}"), entries.len(), worst));
    }
    out
}

/// Outcome of training on data drawn from a known dictionary.
#[derive(Debug, Clone)]
pub struct PlantedRun {
    pub d_sae: usize,
    pub fvu: f64,
    pub active_fraction: f64,
    pub expected_active: f64,
    pub dead_counts: Vec<(usize, usize)>,
    pub resamples: usize,
}

/// Rows `x = D z` from a random unit dictionary `D` (d_model x atoms) and
/// k-sparse non-negative codes; no noise.
pub fn planted_rows(d_model: usize, atoms: usize, k: usize, n: usize, seed: u64) -> tsmi::numerics::Matrix {
    use rand::seq::SliceRandom;
    use rand::{Rng, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut dict = tsmi::numerics::Matrix::randn(atoms, d_model, 1.0, &mut rng);
    for a in 0..atoms {
        let row = dict.row_mut(a);
        let norm = row.iter().map(|v| v * v).sum::<tsmi::numerics::Float>().sqrt();
        row.iter_mut().for_each(|v| *v /= norm);
    }
    let mut x = tsmi::numerics::Matrix::zeros(n, d_model);
    let mut ids: Vec<usize> = (0..atoms).collect();
    for r in 0..n {
        ids.shuffle(&mut rng);
        for &a in &ids[..k] {
            let c: tsmi::numerics::Float = rng.gen_range(0.5..2.0);
            for (o, &v) in x.row_mut(r).iter_mut().zip(dict.row(a)) {
                *o += c * v;
            }
        }
    }
    x
}

/// Trains on 256 atoms in 128 dimensions. The dictionary must be only
/// mildly overcomplete: with many more atoms than dimensions no linear
/// encoder can cancel crosstalk between co-active atoms, and FVU plateaus
/// (about 0.09 for 64 atoms in 32 dimensions).
pub const PLANTED_ATOMS: usize = 256;

pub fn planted_recovery(d_sae: usize) -> PlantedRun {
    let (d_model, atoms, k) = (128, PLANTED_ATOMS, 4);
    let x = planted_rows(d_model, atoms, k, 8192, 17);
    let cfg = tsmi::sae::SaeConfig {
        d_sae,
        k,
        steps: 3000,
        batch: 256,
        base_lr: 3e-3,
        warmup_steps: 100,
        dead_scan_every: 500,
        dead_threshold_steps: 50,
        seed: 3,
    };
    let (sae, log) = tsmi::sae::train_sae(&x, "enc.0".parse().unwrap(), &cfg).unwrap();
    let scan = sae.dead_feature_scan(&x).unwrap();
    PlantedRun {
        d_sae,
        fvu: tsmi::sae::fvu(&sae, &x).unwrap(),
        active_fraction: scan.active_fraction,
        expected_active: (atoms as f64 / d_sae as f64).min(1.0),
        dead_counts: log.dead_counts,
        resamples: log.resamples.len(),
    }
}

/// Channels of a small diagnostic suite aligned as an encoder site would
/// see them (6 x positions).
pub fn suite_channel_matrix() -> tsmi::numerics::Matrix {
    use tsmi::actstore::ManifestEntry;
    let suite = tsmi::series::gen_diagnostic_suite(5, 3, 160);
    let mut entries = Vec::new();
    let mut map = std::collections::BTreeMap::new();
    let mut off = 0;
    for d in &suite {
        for start in [0usize, 48] {
            entries.push(ManifestEntry {
                window_id: entries.len() as u64,
                series: d.series.name.clone(),
                series_start: start,
                row_offset: off,
                count: 64,
            });
            off += 64;
        }
        map.insert(d.series.name.clone(), d.series.channels.clone().unwrap());
    }
    tsmi::taxonomy::channel_matrix(&map, &entries, tsmi::forecaster::SiteKind::EncoderBlockOut, 64).unwrap()
}

/// Worst |r| shortfall from 1 and the number of mislabels when each
/// concept's (signed) channel is fed back as a trace.
pub fn self_recovery(m: &tsmi::numerics::Matrix) -> (f64, usize) {
    use tsmi::taxonomy::{classify, ConceptLabel};
    let mut worst = 0.0f64;
    let mut wrong = 0;
    for concept in ConceptLabel::CONCEPTS {
        let (c, sign) = concept.channel().unwrap();
        let trace: Vec<tsmi::numerics::Float> = m.row(c.index()).iter().map(|&v| sign as tsmi::numerics::Float * v).collect();
        let p = classify(0, &trace, m, 0.5).unwrap();
        worst = worst.max((p.best_score.abs() - 1.0).abs());
        wrong += usize::from(p.label != concept);
    }
    (worst, wrong)
}

/// Fraction of trials where `channel + noise` at the given power SNR is
/// labeled with the channel's concept.
pub fn noisy_recovery_rate(m: &tsmi::numerics::Matrix, snr: f64, trials: usize, seed: u64) -> f64 {
    use rand::{Rng, SeedableRng};
    use rand_distr::{Distribution, Normal};
    use tsmi::taxonomy::{classify, ConceptLabel};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
    let mut hits = 0;
    for _ in 0..trials {
        let concept = ConceptLabel::CONCEPTS[rng.gen_range(0..ConceptLabel::CONCEPTS.len())];
        let (c, sign) = concept.channel().unwrap();
        let row = m.row(c.index());
        let mean = row.iter().map(|&v| v as f64).sum::<f64>() / row.len() as f64;
        let var = row.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / row.len() as f64;
        let noise = Normal::new(0.0, (var / snr).sqrt()).unwrap();
        let trace: Vec<tsmi::numerics::Float> = row
            .iter()
            .map(|&v| (sign * v as f64 + noise.sample(&mut rng)) as tsmi::numerics::Float)
            .collect();
        hits += usize::from(classify(0, &trace, m, 0.5).unwrap().label == concept);
    }
    hits as f64 / trials as f64
}

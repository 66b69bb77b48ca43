//! Transformer sublayers over batches of equal-length segments, with
//! hand-derived backward passes.

use rand::Rng;

use crate::error::Result;
use crate::numerics::{
    gelu, gelu_backward, rmsnorm, rmsnorm_backward, softmax_backward_rows, Float, Matrix,
    Parameter,
};

pub(crate) const NORM_EPS: Float = 1e-6;

#[derive(Debug, Clone)]
pub(crate) struct RmsNorm {
    pub gain: Parameter,
}

impl RmsNorm {
    pub fn new(name: &str, d: usize) -> Self {
        Self {
            gain: Parameter::new(name, Matrix::filled(1, d, 1.0)),
        }
    }

    pub fn forward(&self, x: &Matrix) -> Matrix {
        rmsnorm(x, &self.gain, NORM_EPS)
    }

    pub fn backward(&mut self, x: &Matrix, dy: &Matrix) -> Matrix {
        rmsnorm_backward(x, &mut self.gain, NORM_EPS, dy)
    }
}

/// Multi-head scaled dot-product attention without biases.
#[derive(Debug, Clone)]
pub(crate) struct Attention {
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub n_heads: usize,
}

pub(crate) struct AttnCache {
    xq: Matrix,
    xkv: Matrix,
    q: Matrix,
    k: Matrix,
    v: Matrix,
    /// One (Lq x Lk) probability matrix per (segment, head), segment-major.
    probs: Vec<Matrix>,
    concat: Matrix,
    n_seq: usize,
}

fn init<R: Rng + ?Sized>(name: &str, rows: usize, cols: usize, std: Float, rng: &mut R) -> Parameter {
    Parameter::new(name, Matrix::randn(rows, cols, std, rng))
}

/// Copies a (rows x width) block starting at (r0, c0).
fn block(m: &Matrix, r0: usize, rows: usize, c0: usize, width: usize) -> Matrix {
    let mut out = Matrix::zeros(rows, width);
    for r in 0..rows {
        out.row_mut(r)
            .copy_from_slice(&m.row(r0 + r)[c0..c0 + width]);
    }
    out
}

fn add_block(m: &mut Matrix, r0: usize, c0: usize, src: &Matrix) {
    for r in 0..src.rows() {
        let dst = &mut m.row_mut(r0 + r)[c0..c0 + src.cols()];
        for (d, s) in dst.iter_mut().zip(src.row(r)) {
            *d += *s;
        }
    }
}

impl Attention {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d: usize, n_heads: usize, out_std: Float, rng: &mut R) -> Self {
        let std = 1.0 / (d as Float).sqrt();
        Self {
            wq: init(&format!("{prefix}.wq"), d, d, std, rng),
            wk: init(&format!("{prefix}.wk"), d, d, std, rng),
            wv: init(&format!("{prefix}.wv"), d, d, std, rng),
            wo: init(&format!("{prefix}.wo"), d, d, out_std, rng),
            n_heads,
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 4] {
        [&mut self.wq, &mut self.wk, &mut self.wv, &mut self.wo]
    }

    pub fn params(&self) -> [&Parameter; 4] {
        [&self.wq, &self.wk, &self.wv, &self.wo]
    }

    fn head_dim(&self) -> usize {
        self.wq.value.cols() / self.n_heads
    }

    /// Attends `xq` (n_seq segments of equal length) over `xkv` (n_seq
    /// segments). With `causal`, query i sees keys 0..=i of its segment.
    pub fn forward(&self, xq: &Matrix, xkv: &Matrix, n_seq: usize, causal: bool) -> Result<(Matrix, AttnCache)> {
        let q = xq.matmul(&self.wq.value)?;
        let k = xkv.matmul(&self.wk.value)?;
        let v = xkv.matmul(&self.wv.value)?;
        let (lq, lk) = (xq.rows() / n_seq, xkv.rows() / n_seq);
        let dh = self.head_dim();
        let inv = 1.0 / (dh as Float).sqrt();
        let mut concat = Matrix::zeros(xq.rows(), q.cols());
        let mut probs = Vec::with_capacity(n_seq * self.n_heads);
        for s in 0..n_seq {
            for h in 0..self.n_heads {
                let qh = block(&q, s * lq, lq, h * dh, dh);
                let kh = block(&k, s * lk, lk, h * dh, dh);
                let vh = block(&v, s * lk, lk, h * dh, dh);
                let mut scores = qh.matmul_nt(&kh)?;
                scores.scale(inv);
                if causal {
                    for i in 0..lq {
                        for j in (i + 1)..lk {
                            scores.set(i, j, Float::NEG_INFINITY);
                        }
                    }
                }
                crate::numerics::softmax_rows_in_place(&mut scores);
                let oh = scores.matmul(&vh)?;
                add_block(&mut concat, s * lq, h * dh, &oh);
                probs.push(scores);
            }
        }
        let out = concat.matmul(&self.wo.value)?;
        Ok((
            out,
            AttnCache {
                xq: xq.clone(),
                xkv: xkv.clone(),
                q,
                k,
                v,
                probs,
                concat,
                n_seq,
            },
        ))
    }

    /// Returns (dL/dxq, dL/dxkv) and accumulates weight gradients.
    pub fn backward(&mut self, c: &AttnCache, dout: &Matrix) -> Result<(Matrix, Matrix)> {
        self.wo.grad.add_matmul_tn(&c.concat, dout)?;
        let dconcat = dout.matmul_nt(&self.wo.value)?;
        let n_seq = c.n_seq;
        let (lq, lk) = (c.q.rows() / n_seq, c.k.rows() / n_seq);
        let dh = self.head_dim();
        let inv = 1.0 / (dh as Float).sqrt();
        let mut dq = Matrix::zeros(c.q.rows(), c.q.cols());
        let mut dk = Matrix::zeros(c.k.rows(), c.k.cols());
        let mut dv = Matrix::zeros(c.v.rows(), c.v.cols());
        for s in 0..n_seq {
            for h in 0..self.n_heads {
                let p = &c.probs[s * self.n_heads + h];
                let doh = block(&dconcat, s * lq, lq, h * dh, dh);
                let qh = block(&c.q, s * lq, lq, h * dh, dh);
                let kh = block(&c.k, s * lk, lk, h * dh, dh);
                let vh = block(&c.v, s * lk, lk, h * dh, dh);
                let dvh = p.matmul_tn(&doh)?;
                let dp = doh.matmul_nt(&vh)?;
                let mut ds = softmax_backward_rows(p, &dp);
                ds.scale(inv);
                let dqh = ds.matmul(&kh)?;
                let dkh = ds.matmul_tn(&qh)?;
                add_block(&mut dq, s * lq, h * dh, &dqh);
                add_block(&mut dk, s * lk, h * dh, &dkh);
                add_block(&mut dv, s * lk, h * dh, &dvh);
            }
        }
        self.wq.grad.add_matmul_tn(&c.xq, &dq)?;
        self.wk.grad.add_matmul_tn(&c.xkv, &dk)?;
        self.wv.grad.add_matmul_tn(&c.xkv, &dv)?;
        let dxq = dq.matmul_nt(&self.wq.value)?;
        let mut dxkv = dk.matmul_nt(&self.wk.value)?;
        dxkv.add_assign(&dv.matmul_nt(&self.wv.value)?)?;
        Ok((dxq, dxkv))
    }

    /// Single-position attention for incremental decoding: one query row
    /// against cached keys/values (already projected).
    pub fn attend_cached(&self, q_row: &[Float], k: &Matrix, v: &Matrix, out: &mut [Float]) {
        let dh = self.head_dim();
        let inv = 1.0 / (dh as Float).sqrt();
        let n = k.rows();
        let mut scores = vec![0.0 as Float; n];
        out.iter_mut().for_each(|o| *o = 0.0);
        for h in 0..self.n_heads {
            let qh = &q_row[h * dh..(h + 1) * dh];
            for (j, s) in scores.iter_mut().enumerate() {
                let kh = &k.row(j)[h * dh..(h + 1) * dh];
                *s = qh.iter().zip(kh).map(|(a, b)| a * b).sum::<Float>() * inv;
            }
            let max = scores.iter().copied().fold(Float::NEG_INFINITY, Float::max);
            let mut sum = 0.0f64;
            for s in scores.iter_mut() {
                *s = (*s - max).exp();
                sum += *s as f64;
            }
            let norm = (1.0 / sum) as Float;
            scores.iter_mut().for_each(|s| *s *= norm);
            let oh = &mut out[h * dh..(h + 1) * dh];
            for (j, &p) in scores.iter().enumerate() {
                let vh = &v.row(j)[h * dh..(h + 1) * dh];
                for (o, &vv) in oh.iter_mut().zip(vh) {
                    *o += p * vv;
                }
            }
        }
    }
}

/// Position-wise GELU feed-forward network without biases.
#[derive(Debug, Clone)]
pub(crate) struct FeedForward {
    pub w1: Parameter,
    pub w2: Parameter,
}

pub(crate) struct FfnCache {
    x: Matrix,
    pre: Matrix,
    act: Matrix,
}

impl FeedForward {
    pub fn new<R: Rng + ?Sized>(prefix: &str, d: usize, d_ff: usize, out_std: Float, rng: &mut R) -> Self {
        Self {
            w1: init(&format!("{prefix}.w1"), d, d_ff, 1.0 / (d as Float).sqrt(), rng),
            w2: init(&format!("{prefix}.w2"), d_ff, d, out_std, rng),
        }
    }

    pub fn params_mut(&mut self) -> [&mut Parameter; 2] {
        [&mut self.w1, &mut self.w2]
    }

    pub fn params(&self) -> [&Parameter; 2] {
        [&self.w1, &self.w2]
    }

    pub fn forward(&self, x: &Matrix) -> Result<(Matrix, FfnCache)> {
        let pre = x.matmul(&self.w1.value)?;
        let act = gelu(&pre);
        let out = act.matmul(&self.w2.value)?;
        Ok((
            out,
            FfnCache {
                x: x.clone(),
                pre,
                act,
            },
        ))
    }

    pub fn backward(&mut self, c: &FfnCache, dout: &Matrix) -> Result<Matrix> {
        self.w2.grad.add_matmul_tn(&c.act, dout)?;
        let dact = dout.matmul_nt(&self.w2.value)?;
        let dpre = gelu_backward(&c.pre, &dact);
        self.w1.grad.add_matmul_tn(&c.x, &dpre)?;
        dpre.matmul_nt(&self.w1.value)
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::max_relative_error;
    use rand::seq::SliceRandom;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn projected(y: &Matrix, w: &Matrix) -> f64 {
        y.as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    fn sample(n: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<usize> {
        let mut v: Vec<usize> = (0..n).collect();
        v.shuffle(rng);
        v.truncate(k);
        v
    }

    fn check_attention(causal: bool, lq: usize, lk: usize) {
        let mut rng = ChaCha8Rng::seed_from_u64(if causal { 1 } else { 2 });
        let (d, n_seq) = (8, 2);
        let mut attn = Attention::new("a", d, 2, 0.5, &mut rng);
        let xq = Matrix::randn(n_seq * lq, d, 1.0, &mut rng);
        let xkv = if causal {
            xq.clone()
        } else {
            Matrix::randn(n_seq * lk, d, 1.0, &mut rng)
        };
        let proj = Matrix::randn(n_seq * lq, d, 1.0, &mut rng);
        let (_, cache) = attn.forward(&xq, &xkv, n_seq, causal).unwrap();
        let (dxq, dxkv) = attn.backward(&cache, &proj).unwrap();
        let eval = |a: &Attention, q: &Matrix, kv: &Matrix| {
            let kv = if causal { q } else { kv };
            projected(&a.forward(q, kv, n_seq, causal).unwrap().0, &proj)
        };
        for pi in 0..4 {
            let grad = attn.params()[pi].grad.as_slice().to_vec();
            let base = attn.params()[pi].value.as_slice().to_vec();
            let entries = sample(grad.len(), 20, &mut rng);
            let mut probe = attn.clone();
            let err = max_relative_error(
                &grad,
                &base,
                |i, delta| {
                    probe.params_mut()[pi].value.as_mut_slice()[i] = base[i] + delta;
                    let v = eval(&probe, &xq, &xkv);
                    probe.params_mut()[pi].value.as_mut_slice()[i] = base[i];
                    v
                },
                &entries,
                1e-2,
            );
            assert!(err < 1e-2, "causal={causal} param {pi}: {err}");
        }
        let dx_total = if causal {
            let mut t = dxq.clone();
            t.add_assign(&dxkv).unwrap();
            t
        } else {
            dxq.clone()
        };
        let entries = sample(xq.as_slice().len(), 20, &mut rng);
        let err = max_relative_error(
            dx_total.as_slice(),
            xq.as_slice(),
            |i, delta| {
                let mut q = xq.clone();
                q.as_mut_slice()[i] += delta;
                eval(&attn, &q, &xkv)
            },
            &entries,
            1e-2,
        );
        assert!(err < 1e-2, "causal={causal} dxq: {err}");
        if !causal {
            let entries = sample(xkv.as_slice().len(), 20, &mut rng);
            let err = max_relative_error(
                dxkv.as_slice(),
                xkv.as_slice(),
                |i, delta| {
                    let mut kv = xkv.clone();
                    kv.as_mut_slice()[i] += delta;
                    eval(&attn, &xq, &kv)
                },
                &entries,
                1e-2,
            );
            assert!(err < 1e-2, "dxkv: {err}");
        }
    }

    #[test]
    fn causal_self_attention_gradients() {
        check_attention(true, 5, 5);
    }

    #[test]
    fn cross_attention_gradients() {
        check_attention(false, 4, 6);
    }

    #[test]
    fn feed_forward_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut ffn = FeedForward::new("f", 6, 12, 0.3, &mut rng);
        let x = Matrix::randn(5, 6, 1.0, &mut rng);
        let proj = Matrix::randn(5, 6, 1.0, &mut rng);
        let (_, cache) = ffn.forward(&x).unwrap();
        let dx = ffn.backward(&cache, &proj).unwrap();
        for pi in 0..2 {
            let grad = ffn.params()[pi].grad.as_slice().to_vec();
            let base = ffn.params()[pi].value.as_slice().to_vec();
            let entries = sample(grad.len(), 20, &mut rng);
            let mut probe = ffn.clone();
            let err = max_relative_error(
                &grad,
                &base,
                |i, delta| {
                    probe.params_mut()[pi].value.as_mut_slice()[i] = base[i] + delta;
                    let v = projected(&probe.forward(&x).unwrap().0, &proj);
                    probe.params_mut()[pi].value.as_mut_slice()[i] = base[i];
                    v
                },
                &entries,
                1e-2,
            );
            assert!(err < 1e-2, "param {pi}: {err}");
        }
        let entries = sample(30, 20, &mut rng);
        let err = max_relative_error(
            dx.as_slice(),
            x.as_slice(),
            |i, delta| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += delta;
                projected(&ffn.forward(&xp).unwrap().0, &proj)
            },
            &entries,
            1e-2,
        );
        assert!(err < 1e-2, "dx: {err}");
    }
}

use super::{Float, Matrix, Parameter};

/// Row-wise softmax with max subtraction.
pub fn softmax_rows(m: &Matrix) -> Matrix {
    let mut out = m.clone();
    softmax_rows_in_place(&mut out);
    out
}

pub fn softmax_rows_in_place(m: &mut Matrix) {
    for r in 0..m.rows() {
        softmax_slice(m.row_mut(r));
    }
}

fn softmax_slice(row: &mut [Float]) {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max);
    if max == Float::NEG_INFINITY {
        // fully masked row
        row.iter_mut().for_each(|v| *v = 0.0);
        return;
    }
    let mut sum = 0.0f64;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v as f64;
    }
    let inv = (1.0 / sum) as Float;
    row.iter_mut().for_each(|v| *v *= inv);
}

/// Log-softmax of one row, in 64-bit.
pub fn log_softmax_row(row: &[Float]) -> Vec<f64> {
    let max = row.iter().copied().fold(Float::NEG_INFINITY, Float::max) as f64;
    let lse = row
        .iter()
        .map(|&v| (v as f64 - max).exp())
        .sum::<f64>()
        .ln()
        + max;
    row.iter().map(|&v| v as f64 - lse).collect()
}

/// Backward of softmax given its output `probs` and upstream gradient `dprobs`.
pub fn softmax_backward_rows(probs: &Matrix, dprobs: &Matrix) -> Matrix {
    let mut out = Matrix::zeros(probs.rows(), probs.cols());
    for r in 0..probs.rows() {
        let p = probs.row(r);
        let dp = dprobs.row(r);
        let dot: Float = p.iter().zip(dp).map(|(a, b)| a * b).sum();
        for ((o, &pv), &dv) in out.row_mut(r).iter_mut().zip(p).zip(dp) {
            *o = pv * (dv - dot);
        }
    }
    out
}

fn inv_rms(row: &[Float], eps: Float) -> Float {
    let ms = row.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / row.len() as f64;
    let denom = ms + eps as f64;
    if denom <= 0.0 {
        0.0
    } else {
        (1.0 / denom.sqrt()) as Float
    }
}

/// RMS normalization without mean-centering, scaled by a learned gain.
pub fn rmsnorm(x: &Matrix, gain: &Parameter, eps: Float) -> Matrix {
    let g = gain.value.as_slice();
    debug_assert_eq!(g.len(), x.cols());
    let mut out = x.clone();
    for r in 0..x.rows() {
        let inv = inv_rms(x.row(r), eps);
        for (o, &gv) in out.row_mut(r).iter_mut().zip(g) {
            *o *= inv * gv;
        }
    }
    out
}

/// Returns dL/dx and accumulates dL/dgain into `gain.grad`.
pub fn rmsnorm_backward(x: &Matrix, gain: &mut Parameter, eps: Float, dy: &Matrix) -> Matrix {
    let n = x.cols();
    let mut dx = Matrix::zeros(x.rows(), n);
    let mut dxhat = vec![0.0 as Float; n];
    for r in 0..x.rows() {
        let xr = x.row(r);
        let dyr = dy.row(r);
        let inv = inv_rms(xr, eps);
        let g = gain.value.as_slice();
        let mut dot = 0.0 as Float;
        for i in 0..n {
            dxhat[i] = dyr[i] * g[i];
            dot += dxhat[i] * xr[i] * inv;
        }
        let mean_dot = dot / n as Float;
        let gg = gain.grad.as_mut_slice();
        for i in 0..n {
            gg[i] += dyr[i] * xr[i] * inv;
        }
        let dxr = dx.row_mut(r);
        for i in 0..n {
            dxr[i] = inv * (dxhat[i] - xr[i] * inv * mean_dot);
        }
    }
    dx
}

const GELU_C: Float = 0.797_884_6; // sqrt(2/pi)

/// Tanh-approximated GELU.
pub fn gelu(x: &Matrix) -> Matrix {
    let mut out = x.clone();
    for v in out.as_mut_slice() {
        let u = *v;
        *v = 0.5 * u * (1.0 + (GELU_C * (u + 0.044715 * u * u * u)).tanh());
    }
    out
}

pub fn gelu_backward(x: &Matrix, dy: &Matrix) -> Matrix {
    let mut out = dy.clone();
    for (o, &u) in out.as_mut_slice().iter_mut().zip(x.as_slice()) {
        let inner = GELU_C * (u + 0.044715 * u * u * u);
        let t = inner.tanh();
        let dinner = GELU_C * (1.0 + 3.0 * 0.044715 * u * u);
        let d = 0.5 * (1.0 + t) + 0.5 * u * (1.0 - t * t) * dinner;
        *o *= d;
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::{finite_diff_check, max_relative_error};
    use proptest::prelude::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn softmax_uniform_row() {
        let p = softmax_rows(&Matrix::zeros(1, 4));
        for &v in p.as_slice() {
            assert!((v - 0.25).abs() < 1e-7);
        }
    }

    #[test]
    fn softmax_large_logits_do_not_overflow() {
        let p = softmax_rows(&Matrix::row_vector(&[1000.0, 0.0]));
        assert!(p.is_finite());
        assert!((p.get(0, 0) - 1.0).abs() < 1e-7);
        assert!(p.get(0, 1) < 1e-30);
    }

    #[test]
    fn softmax_of_log_weights() {
        let row = [1.0f64.ln(), 2.0f64.ln(), 3.0f64.ln()].map(|v| v as Float);
        let p = softmax_rows(&Matrix::row_vector(&row));
        for (v, want) in p.as_slice().iter().zip([1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0]) {
            assert!((*v as f64 - want).abs() < 1e-6);
        }
    }

    proptest! {
        #[test]
        fn softmax_rows_sum_to_one_and_shift_invariant(
            row in proptest::collection::vec(-20.0f32..20.0, 1..12),
            shift in -50.0f32..50.0,
        ) {
            let row: Vec<Float> = row.into_iter().map(|v| v as Float).collect();
            let p = softmax_rows(&Matrix::row_vector(&row));
            let s: f64 = p.as_slice().iter().map(|&v| v as f64).sum();
            prop_assert!((s - 1.0).abs() < 1e-6);
            let shifted: Vec<Float> = row.iter().map(|v| v + shift as Float).collect();
            let q = softmax_rows(&Matrix::row_vector(&shifted));
            // Shifting rounds each logit by up to half an ulp of the shifted value.
            let big = shifted.iter().fold(0.0 as Float, |m, v| m.max(v.abs()));
            let tol = 1e-6 + 4.0 * Float::EPSILON * big;
            for (a, b) in p.as_slice().iter().zip(q.as_slice()) {
                prop_assert!((a - b).abs() < tol);
            }
        }
    }

    #[test]
    fn rmsnorm_unit_rows() {
        let gain = Parameter::new("g", Matrix::filled(1, 5, 1.0));
        let y = rmsnorm(&Matrix::filled(2, 5, 1.0), &gain, 0.0);
        assert!(y.as_slice().iter().all(|&v| (v - 1.0).abs() < 1e-6));
    }

    #[test]
    fn rmsnorm_three_four() {
        let gain = Parameter::new("g", Matrix::filled(1, 2, 1.0));
        let y = rmsnorm(&Matrix::row_vector(&[3.0, 4.0]), &gain, 0.0);
        let d = (12.5f64).sqrt();
        assert!((y.get(0, 0) as f64 - 3.0 / d).abs() < 1e-6);
        assert!((y.get(0, 1) as f64 - 4.0 / d).abs() < 1e-6);
    }

    #[test]
    fn rmsnorm_zero_row_stays_zero() {
        let gain = Parameter::new("g", Matrix::filled(1, 3, 1.0));
        let y = rmsnorm(&Matrix::zeros(1, 3), &gain, 1e-6);
        assert!(y.as_slice().iter().all(|&v| v == 0.0));
    }

    /// Random projection makes every op's output a well-scaled scalar.
    fn projected(y: &Matrix, w: &Matrix) -> f64 {
        y.as_slice()
            .iter()
            .zip(w.as_slice())
            .map(|(&a, &b)| a as f64 * b as f64)
            .sum()
    }

    #[test]
    fn rmsnorm_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let x = Matrix::randn(4, 6, 1.0, &mut rng);
        let proj = Matrix::randn(4, 6, 1.0, &mut rng);
        let mut gain = Parameter::new("g", Matrix::randn(1, 6, 1.0, &mut rng));
        let dx = rmsnorm_backward(&x, &mut gain, 1e-6, &proj);
        let err = finite_diff_check(|g| projected(&rmsnorm(&x, g, 1e-6), &proj), &gain, 1e-2);
        assert!(err < 1e-2, "gain rel err {err}");

        let err_x = max_relative_error(
            dx.as_slice(),
            x.as_slice(),
            |i, d| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += d;
                projected(&rmsnorm(&xp, &gain, 1e-6), &proj)
            },
            &(0..x.as_slice().len()).collect::<Vec<_>>(),
            1e-2,
        );
        assert!(err_x < 1e-2, "x rel err {err_x}");
    }

    #[test]
    fn gelu_and_softmax_backward_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let x = Matrix::randn(3, 5, 1.0, &mut rng);
        let proj = Matrix::randn(3, 5, 1.0, &mut rng);
        let all: Vec<usize> = (0..15).collect();

        let dg = gelu_backward(&x, &proj);
        let err = max_relative_error(
            dg.as_slice(),
            x.as_slice(),
            |i, d| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += d;
                projected(&gelu(&xp), &proj)
            },
            &all,
            1e-2,
        );
        assert!(err < 1e-2, "gelu rel err {err}");

        let p = softmax_rows(&x);
        let ds = softmax_backward_rows(&p, &proj);
        let err = max_relative_error(
            ds.as_slice(),
            x.as_slice(),
            |i, d| {
                let mut xp = x.clone();
                xp.as_mut_slice()[i] += d;
                projected(&softmax_rows(&xp), &proj)
            },
            &all,
            1e-2,
        );
        assert!(err < 1e-2, "softmax rel err {err}");
    }

    #[test]
    fn constant_softmax_sum_has_zero_gradient() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Matrix::randn(2, 4, 1.0, &mut rng);
        let ones = Matrix::filled(2, 4, 1.0);
        let p = softmax_rows(&x);
        let g = softmax_backward_rows(&p, &ones);
        assert!(g.as_slice().iter().all(|v| v.abs() < 1e-6));
    }
}

use super::{Float, Parameter};

/// Largest relative error between `analytic[i]` and a central difference of
/// `loss_at(i, ±h)` over the listed entries. `loss_at` must evaluate the
/// scalar objective with entry `i` shifted by the given offset; `base` holds
/// the unshifted entries so the step actually representable in [`Float`] is
/// used as the divisor.
pub fn max_relative_error<F>(
    analytic: &[Float],
    base: &[Float],
    mut loss_at: F,
    entries: &[usize],
    h: Float,
) -> f64
where
    F: FnMut(usize, Float) -> f64,
{
    let mut worst = 0.0f64;
    for &i in entries {
        let plus = loss_at(i, h);
        let minus = loss_at(i, -h);
        let step = ((base[i] + h) - (base[i] - h)) as f64;
        let numeric = (plus - minus) / step;
        let a = analytic[i] as f64;
        let denom = a.abs().max(numeric.abs()).max(1e-6);
        worst = worst.max((a - numeric).abs() / denom);
    }
    worst
}

/// Compares `p.grad` against central differences of `f` for every entry of `p`.
pub fn finite_diff_check<F>(mut f: F, p: &Parameter, h: Float) -> f64
where
    F: FnMut(&Parameter) -> f64,
{
    let mut probe = p.clone();
    let entries: Vec<usize> = (0..p.len()).collect();
    let base = p.value.as_slice().to_vec();
    max_relative_error(
        p.grad.as_slice(),
        &base,
        |i, d| {
            let orig = probe.value.as_slice()[i];
            probe.value.as_mut_slice()[i] = orig + d;
            let v = f(&probe);
            probe.value.as_mut_slice()[i] = orig;
            v
        },
        &entries,
        h,
    )
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::numerics::Matrix;

    #[test]
    fn quadratic_is_exact() {
        let mut p = Parameter::new("x", Matrix::row_vector(&[3.0]));
        p.grad.set(0, 0, 6.0);
        let err = finite_diff_check(
            |q| {
                let x = q.value.get(0, 0) as f64;
                x * x
            },
            &p,
            1e-3,
        );
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn wrong_gradient_is_flagged() {
        let mut p = Parameter::new("x", Matrix::row_vector(&[3.0]));
        p.grad.set(0, 0, 5.0);
        let err = finite_diff_check(|q| (q.value.get(0, 0) as f64).powi(2), &p, 1e-3);
        assert!(err > 0.1);
    }
}

//! Compare analytic gradients of an RMSNorm + GELU stack with central differences.

use rand::SeedableRng;
use tsmi::numerics::{finite_diff_check, gelu, gelu_backward, rmsnorm, rmsnorm_backward, Matrix, Parameter};

fn loss(x: &Matrix, g: &Parameter) -> f64 {
    gelu(&rmsnorm(x, g, 1e-6)).as_slice().iter().map(|&v| (v as f64).powi(2)).sum::<f64>() / 2.0
}

fn main() {
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
    let x = Matrix::randn(4, 6, 1.0, &mut rng);
    let mut gain = Parameter::new("gain", Matrix::randn(1, 6, 0.5, &mut rng));

    let h = rmsnorm(&x, &gain, 1e-6);
    let y = gelu(&h);
    let dh = gelu_backward(&h, &y);
    let dx = rmsnorm_backward(&x, &mut gain, 1e-6, &dh);
    println!("dx row 0: {:?}", &dx.row(0)[..3]);

    let err = finite_diff_check(|g| loss(&x, g), &gain, 1e-2);
    println!("gain: max relative error {err:.2e}");
}

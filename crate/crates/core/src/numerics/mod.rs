//! Dense matrices, hand-derived layer gradients, and the Adam optimizer.

mod gradcheck;
mod matrix;
mod ops;
mod param;
mod schedule;

pub use gradcheck::{finite_diff_check, max_relative_error};
pub use matrix::Matrix;
pub use ops::{
    gelu, gelu_backward, log_softmax_row, rmsnorm, rmsnorm_backward, softmax_backward_rows,
    softmax_rows, softmax_rows_in_place,
};
pub use param::{AdamConfig, Parameter};
pub use schedule::LrSchedule;

/// Working precision. 32-bit unless the `f64` feature is enabled.
#[cfg(not(feature = "f64"))]
pub type Float = f32;
/// Working precision. 32-bit unless the `f64` feature is enabled.
#[cfg(feature = "f64")]
pub type Float = f64;

/// Seed for work item `id` of a run, independent of evaluation order.
pub fn derive_seed(run_seed: u64, id: u64) -> u64 {
    use rand::{RngCore, SeedableRng};
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(run_seed);
    rng.set_stream(id);
    rng.next_u64()
}

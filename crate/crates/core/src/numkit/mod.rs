//! Dense tensors, reverse-mode autodiff, Adam, and the seeded RNG.

mod adam;
mod kernels;
mod params;
mod rng;
mod tape;
mod tensor;

pub use adam::{adam_step, AdamState, BETA1, BETA2, EPSILON};
pub use params::ParamSet;
pub use rng::{hash_tokens, splitmix64, Rng};
pub use tape::{Gradients, Tape, Var};
pub use tensor::Tensor;

/// Numerically stable log-softmax of one row, in f64.
pub fn log_softmax(row: &[f32]) -> Vec<f64> {
    let mx = row.iter().copied().fold(f32::NEG_INFINITY, f32::max);
    let z: f64 = row.iter().map(|&v| f64::from(v - mx).exp()).sum();
    let lse = f64::from(mx) + z.ln();
    row.iter().map(|&v| f64::from(v) - lse).collect()
}

/// Index of the largest value; ties go to the lowest index.
pub fn argmax(row: &[f32]) -> usize {
    let mut best = 0;
    for (i, &v) in row.iter().enumerate() {
        if v > row[best] {
            best = i;
        }
    }
    best
}

//! Weight initialization: truncated normal (±2σ rejection), He-style
//! scaling for conv/dense layers, fixed small std for the routing tensor.

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use sarcaps_tensor::{Scalar, Tensor};

/// One standard-normal draw (Box–Muller, two uniforms per call so the
/// stream layout is fixed and deterministic).
pub(crate) fn standard_normal(rng: &mut ChaCha8Rng) -> f64 {
    let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
    let u2: f64 = rng.gen_range(0.0..1.0);
    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
}

fn truncated_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let z = standard_normal(rng);
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

pub fn init_tensor<T: Scalar>(shape: Vec<usize>, std: f64, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let n: usize = shape.iter().product();
    let data: Vec<T> = (0..n).map(|_| T::from_f64x(truncated_normal(rng, std))).collect();
    Tensor::new(shape, data).expect("shape/data agree by construction")
}

/// He initialization for a conv kernel `[k,k,cin,cout]` (fan-in k·k·cin).
pub fn init_conv<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = (shape[0] * shape[1] * shape[2]) as f64;
    init_tensor(shape, (2.0 / fan_in).sqrt(), rng)
}

/// He initialization for a dense weight `[in,out]`.
pub fn init_dense<T: Scalar>(shape: Vec<usize>, rng: &mut ChaCha8Rng) -> Tensor<T> {
    let fan_in = shape[0] as f64;
    init_tensor(shape, (2.0 / fan_in).sqrt(), rng)
}

// With N primary capsules coupled at 1/C each, the class pre-squash norm
// scales like √N·std; 0.01 keeps it in the responsive part of the squash
// for the configured capsule counts, where 0.05 starts saturated.
pub const ROUTING_STD: f64 = 0.01;

pub fn zeros<T: Scalar>(shape: Vec<usize>) -> Tensor<T> {
    Tensor::zeros(shape)
}

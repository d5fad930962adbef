//! Minimal tensor toolkit: the layers the network needs with exact
//! backward passes, SGD with momentum, the learning-rate schedule and the
//! checkpoint container.

pub mod checkpoint;
pub mod layers;
pub mod optim;
mod tensor;

pub use layers::{
    adaptive_avg_pool, conv2d_backward, conv2d_forward, fully_connected, maxpool2, relu, sigmoid, softmax,
    upsample2, upsample_nearest, Conv2d,
};
pub use optim::{Adam, LrSchedule, Optimizer, OptimizerKind, Sgd};
pub use tensor::{Parameter, Tensor};

/// Central finite-difference gradient of `f` at `x`.
pub fn numerical_gradient(x: &[f64], eps: f64, mut f: impl FnMut(&[f64]) -> f64) -> Vec<f64> {
    let mut probe = x.to_vec();
    (0..x.len())
        .map(|i| {
            let orig = probe[i];
            probe[i] = orig + eps;
            let plus = f(&probe);
            probe[i] = orig - eps;
            let minus = f(&probe);
            probe[i] = orig;
            (plus - minus) / (2.0 * eps)
        })
        .collect()
}

/// `|a - b| / max(|a|, |b|)` over whole vectors (0 when both vanish).
pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    let scale = na.max(nb);
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

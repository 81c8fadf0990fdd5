//! Central finite-difference checks of analytical gradients.
//!
//! Stochastic layers are frozen by replaying the same seeded rng for every
//! evaluation, so dropout masks and noise draws are identical across the
//! perturbed copies.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::data::AugmentationSpec;
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, softmax_backward, LayerSpec, Mode, Network};
use crate::ssl::{ssl_objective, ConsistencyTarget};
use crate::tensor::Tensor;

pub const STEP: f64 = 1e-3;
pub const TOLERANCE: f64 = 1e-4;

/// Scalar functions of a network's output that can be checked.
#[derive(Debug, Clone)]
pub enum Objective {
    /// `Σ w ⊙ output` for a fixed weight tensor; exercises bare layers.
    Linear(Tensor),
    CrossEntropy(Vec<usize>),
    /// Twin-pass consistency term alone.
    Consistency,
    /// Cross-entropy on the first `labels.len()` rows plus `alpha` times consistency.
    Combined { labels: Vec<usize>, alpha: f64 },
}

#[derive(Debug, Clone)]
pub struct GradCheck {
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
    /// `‖a − n‖ / (‖a‖ + ‖n‖)`, zero when both vanish.
    pub relative_error: f64,
}

impl GradCheck {
    pub fn passes(&self, tolerance: f64) -> bool {
        self.relative_error <= tolerance
    }
}

pub fn relative_error(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &mut dyn Iterator<Item = f64>| v.map(|x| x * x).sum::<f64>().sqrt();
    let diff = norm(&mut a.iter().zip(b).map(|(x, y)| x - y));
    let scale = norm(&mut a.iter().copied()) + norm(&mut b.iter().copied());
    if scale == 0.0 {
        0.0
    } else {
        diff / scale
    }
}

/// Central differences `(f(θ + h) − f(θ − h)) / 2h` for every coordinate.
pub fn central_difference<F>(params: &[f64], step: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut(&[f64]) -> Result<f64>,
{
    let mut p = params.to_vec();
    let mut grad = Vec::with_capacity(p.len());
    for i in 0..p.len() {
        let orig = p[i];
        p[i] = orig + step;
        let up = f(&p)?;
        p[i] = orig - step;
        let down = f(&p)?;
        p[i] = orig;
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Loss value, leaving its gradient in `network`.
fn evaluate(network: &mut Network, inputs: &Tensor, objective: &Objective, seed: u64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let no_augment = AugmentationSpec::default();
    match objective {
        Objective::Linear(w) => {
            let trace = network.forward(inputs, Mode::Train, &mut rng)?;
            let out = trace.output();
            out.same_shape(w, "linear objective")?;
            let loss = out.data().iter().zip(w.data()).map(|(o, w)| o * w).sum();
            let ends_in_softmax = network.layers().last().is_some_and(|l| l.name() == "softmax");
            let grad = if ends_in_softmax {
                softmax_backward(out, w)?
            } else {
                w.clone()
            };
            network.zero_grad();
            network.backward(&trace, &grad)?;
            Ok(loss)
        }
        Objective::CrossEntropy(labels) => {
            let trace = network.forward(inputs, Mode::Train, &mut rng)?;
            let (loss, grad) = cross_entropy(trace.output(), labels)?;
            network.zero_grad();
            network.backward(&trace, &grad)?;
            Ok(loss)
        }
        Objective::Consistency => {
            let b = ssl_objective(network, inputs, &[], 1.0, &no_augment, ConsistencyTarget::TwinPass, &mut rng)?;
            Ok(b.unsupervised)
        }
        Objective::Combined { labels, alpha } => {
            let b = ssl_objective(network, inputs, labels, *alpha, &no_augment, ConsistencyTarget::TwinPass, &mut rng)?;
            Ok(b.total)
        }
    }
}

/// Distance of the nearest ReLU input from its kink, in units of the largest
/// change a `step` perturbation of the feeding dense layer can cause. Values
/// above 1 mean central differences at `step` never straddle a kink. Both
/// passes of a twin-pass objective are covered.
pub fn kink_clearance(network: &Network, inputs: &Tensor, seed: u64, step: f64) -> Result<f64> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let layers = network.layers();
    let mut clearance = f64::INFINITY;
    for _ in 0..2 {
        let trace = network.forward(inputs, Mode::Train, &mut rng)?;
        for (i, layer) in layers.iter().enumerate() {
            if !matches!(layer, LayerSpec::Relu) {
                continue;
            }
            let Some(dense) = layers[..i].iter().rposition(|l| matches!(l, LayerSpec::Dense { .. })) else {
                continue;
            };
            let feed = trace.layer_input(dense).expect("trace covers every layer");
            let reach = step * (1.0 + feed.data().iter().fold(0.0f64, |m, v| m.max(v.abs())));
            let nearest = trace
                .layer_input(i)
                .expect("trace covers every layer")
                .data()
                .iter()
                .fold(f64::INFINITY, |m, v| m.min(v.abs()));
            clearance = clearance.min(nearest / reach);
        }
    }
    Ok(clearance)
}

/// Compares backpropagated gradients with central differences at `step`.
pub fn check(network: &Network, inputs: &Tensor, objective: &Objective, seed: u64, step: f64) -> Result<GradCheck> {
    if !(step > 0.0) {
        return Err(Error::Argument(format!("step {step} must be positive")));
    }
    let mut net = network.clone();
    evaluate(&mut net, inputs, objective, seed)?;
    let analytic = net.grads_flat();
    let mut probe = network.clone();
    let numeric = central_difference(&network.params_flat(), step, |p| {
        probe.set_params_flat(p)?;
        evaluate(&mut probe, inputs, objective, seed)
    })?;
    Ok(GradCheck {
        relative_error: relative_error(&analytic, &numeric),
        analytic,
        numeric,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_has_exact_central_differences() {
        let g = central_difference(&[1.0, -2.0], 1e-3, |p| Ok(p[0] * p[0] + 3.0 * p[1])).unwrap();
        assert!((g[0] - 2.0).abs() < 1e-10);
        assert!((g[1] - 3.0).abs() < 1e-10);
    }

    #[test]
    fn relative_error_edge_cases() {
        assert_eq!(relative_error(&[0.0], &[0.0]), 0.0);
        assert_eq!(relative_error(&[1.0], &[-1.0]), 1.0);
    }
}

use rand::{Rng, RngCore};
use rand_distr::{Distribution, Normal};

use super::layer::{validate_layers, LayerSpec};
use crate::error::{Error, Result};
use crate::tensor::{gemm, gemm_nt, gemm_tn, Tensor};

/// Rows evaluated at once by [`Network::predict`].
const PREDICT_CHUNK: usize = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Dropout masks and Gaussian perturbations are drawn.
    Train,
    /// Stochastic layers are the identity.
    Eval,
}

/// Weights of one dense layer, stored (inputs × outputs), with gradients.
#[derive(Debug, Clone, PartialEq)]
pub struct DenseParams {
    pub inputs: usize,
    pub outputs: usize,
    pub weight: Vec<f64>,
    pub bias: Vec<f64>,
    pub grad_weight: Vec<f64>,
    pub grad_bias: Vec<f64>,
}

impl DenseParams {
    fn zeros(inputs: usize, outputs: usize) -> Self {
        DenseParams {
            inputs,
            outputs,
            weight: vec![0.0; inputs * outputs],
            bias: vec![0.0; outputs],
            grad_weight: vec![0.0; inputs * outputs],
            grad_bias: vec![0.0; outputs],
        }
    }
}

/// Everything a forward pass leaves behind for backpropagation.
#[derive(Debug, Clone)]
pub struct Trace {
    mode: Mode,
    version: u64,
    /// `activations[i]` is the input of layer `i`; the last entry is the output.
    activations: Vec<Tensor>,
    /// Scaled dropout masks, one slot per layer.
    masks: Vec<Option<Vec<f64>>>,
    ends_in_softmax: bool,
}

impl Trace {
    pub fn mode(&self) -> Mode {
        self.mode
    }

    pub fn output(&self) -> &Tensor {
        self.activations.last().expect("trace always holds the input")
    }

    /// Pre-softmax scores (equal to the output when there is no softmax).
    pub fn logits(&self) -> &Tensor {
        let n = self.activations.len();
        if self.ends_in_softmax {
            &self.activations[n - 2]
        } else {
            &self.activations[n - 1]
        }
    }

    /// Input of layer `i`; `layer_input(layers.len())` is the output.
    pub fn layer_input(&self, i: usize) -> Option<&Tensor> {
        self.activations.get(i)
    }

    pub fn into_output(mut self) -> Tensor {
        self.activations.pop().expect("trace always holds the input")
    }
}

/// A feed-forward classifier.
#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    layers: Vec<LayerSpec>,
    dense: Vec<DenseParams>,
    inputs: usize,
    outputs: usize,
    /// Bumped by every parameter update; traces from older versions are stale.
    version: u64,
}

impl Network {
    /// All-zero parameters.
    pub fn zeros(layers: Vec<LayerSpec>) -> Result<Self> {
        let (inputs, outputs) = validate_layers(&layers)?;
        let dense = layers
            .iter()
            .filter_map(|l| match *l {
                LayerSpec::Dense { inputs, outputs } => Some(DenseParams::zeros(inputs, outputs)),
                _ => None,
            })
            .collect();
        Ok(Network {
            layers,
            dense,
            inputs,
            outputs,
            version: 0,
        })
    }

    /// Fan-in scaled uniform initialization: `U(-sqrt(6/fan_in), sqrt(6/fan_in))`
    /// for dense layers feeding a ReLU, `sqrt(3/fan_in)` otherwise. Biases start at 0.
    pub fn init<R: Rng + ?Sized>(layers: Vec<LayerSpec>, rng: &mut R) -> Result<Self> {
        let mut net = Network::zeros(layers)?;
        let mut d = 0;
        for (i, layer) in net.layers.iter().enumerate() {
            if let LayerSpec::Dense { inputs, .. } = *layer {
                let feeds_relu = net.layers[i + 1..]
                    .iter()
                    .find(|l| !matches!(l, LayerSpec::Dropout { .. } | LayerSpec::GaussianNoise { .. }))
                    .is_some_and(|l| matches!(l, LayerSpec::Relu));
                let gain = if feeds_relu { 6.0 } else { 3.0 };
                let limit = (gain / inputs as f64).sqrt();
                for w in &mut net.dense[d].weight {
                    *w = rng.gen_range(-limit..limit);
                }
                d += 1;
            }
        }
        Ok(net)
    }

    pub fn layers(&self) -> &[LayerSpec] {
        &self.layers
    }

    pub fn input_dim(&self) -> usize {
        self.inputs
    }

    pub fn output_dim(&self) -> usize {
        self.outputs
    }

    pub fn dense(&self) -> &[DenseParams] {
        &self.dense
    }

    pub fn dense_mut(&mut self) -> &mut [DenseParams] {
        self.version += 1;
        &mut self.dense
    }

    pub fn version(&self) -> u64 {
        self.version
    }

    pub fn num_params(&self) -> usize {
        self.dense.iter().map(|d| d.weight.len() + d.bias.len()).sum()
    }

    /// Sets the stddev of every Gaussian noise layer.
    pub fn set_input_noise(&mut self, stddev: f64) -> Result<()> {
        if !(stddev >= 0.0 && stddev.is_finite()) {
            return Err(Error::Argument(format!("gaussian stddev {stddev} must be >= 0")));
        }
        for layer in &mut self.layers {
            if let LayerSpec::GaussianNoise { stddev: s } = layer {
                *s = stddev;
            }
        }
        Ok(())
    }

    /// Sets the keep-probability of every dropout layer.
    pub fn set_dropout_keep(&mut self, keep: f64) -> Result<()> {
        if !(keep > 0.0 && keep <= 1.0) {
            return Err(Error::Argument(format!("keep-probability {keep} outside (0, 1]")));
        }
        for layer in &mut self.layers {
            if let LayerSpec::Dropout { keep: k } = layer {
                *k = keep;
            }
        }
        Ok(())
    }

    /// All parameters, layer by layer, weights before biases.
    pub fn params_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for d in &self.dense {
            out.extend_from_slice(&d.weight);
            out.extend_from_slice(&d.bias);
        }
        out
    }

    pub fn grads_flat(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_params());
        for d in &self.dense {
            out.extend_from_slice(&d.grad_weight);
            out.extend_from_slice(&d.grad_bias);
        }
        out
    }

    pub fn set_params_flat(&mut self, values: &[f64]) -> Result<()> {
        if values.len() != self.num_params() {
            return Err(Error::Dimension(format!(
                "expected {} parameters, got {}",
                self.num_params(),
                values.len()
            )));
        }
        let mut offset = 0;
        for d in self.dense_mut() {
            let w = d.weight.len();
            d.weight.copy_from_slice(&values[offset..offset + w]);
            offset += w;
            let b = d.bias.len();
            d.bias.copy_from_slice(&values[offset..offset + b]);
            offset += b;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for d in &mut self.dense {
            d.grad_weight.iter_mut().for_each(|g| *g = 0.0);
            d.grad_bias.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    /// (parameter, gradient) slices in [`Network::params_flat`] order.
    pub fn param_groups_mut(&mut self) -> impl Iterator<Item = (&mut [f64], &[f64])> {
        self.version += 1;
        self.dense.iter_mut().flat_map(|d| {
            [
                (d.weight.as_mut_slice(), d.grad_weight.as_slice()),
                (d.bias.as_mut_slice(), d.grad_bias.as_slice()),
            ]
        })
    }

    fn check_params_finite(&self) -> Result<()> {
        for (i, d) in self.dense.iter().enumerate() {
            if !d.weight.iter().chain(&d.bias).all(|v| v.is_finite()) {
                return Err(Error::Numeric(format!("dense layer {i} has a non-finite parameter")));
            }
        }
        Ok(())
    }

    fn check_input(&self, batch: &Tensor) -> Result<()> {
        if batch.shape().len() != 2 || batch.cols() != self.inputs {
            return Err(Error::Dimension(format!(
                "network expects (n, {}) input, got {:?}",
                self.inputs,
                batch.shape()
            )));
        }
        Ok(())
    }

    /// Forward pass keeping the intermediates needed by [`Network::backward`].
    /// In eval mode the rng is never touched.
    pub fn forward<R: Rng + ?Sized>(&self, batch: &Tensor, mode: Mode, rng: &mut R) -> Result<Trace> {
        self.check_input(batch)?;
        self.check_params_finite()?;
        let mut activations = Vec::with_capacity(self.layers.len() + 1);
        let mut masks = Vec::with_capacity(self.layers.len());
        activations.push(batch.clone());
        let mut d = 0;
        for layer in &self.layers {
            let input = activations.last().expect("non-empty");
            let (out, mask) = self.apply_layer(layer, &mut d, input, mode, rng)?;
            activations.push(out);
            masks.push(mask);
        }
        Ok(Trace {
            mode,
            version: self.version,
            activations,
            masks,
            ends_in_softmax: matches!(self.layers.last(), Some(LayerSpec::Softmax)),
        })
    }

    /// Eval-mode class probabilities, computed in chunks without keeping a trace.
    pub fn predict(&self, batch: &Tensor) -> Result<Tensor> {
        self.check_input(batch)?;
        self.check_params_finite()?;
        let mut no_rng = rand::rngs::mock::StepRng::new(0, 0);
        let n = batch.rows();
        let mut out = Vec::with_capacity(n * self.outputs);
        let mut start = 0;
        while start < n {
            let end = (start + PREDICT_CHUNK).min(n);
            let rows: Vec<usize> = (start..end).collect();
            let mut x = batch.select_rows(&rows);
            let mut d = 0;
            for layer in &self.layers {
                x = self.apply_layer(layer, &mut d, &x, Mode::Eval, &mut no_rng)?.0;
            }
            out.extend_from_slice(x.data());
            start = end;
        }
        Tensor::matrix(n, self.outputs, out)
    }

    fn apply_layer<R: RngCore + ?Sized>(
        &self,
        layer: &LayerSpec,
        dense_idx: &mut usize,
        input: &Tensor,
        mode: Mode,
        rng: &mut R,
    ) -> Result<(Tensor, Option<Vec<f64>>)> {
        let n = input.rows();
        let train = mode == Mode::Train;
        Ok(match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                let p = &self.dense[*dense_idx];
                *dense_idx += 1;
                let mut out = Vec::with_capacity(n * outputs);
                for _ in 0..n {
                    out.extend_from_slice(&p.bias);
                }
                gemm(n, inputs, outputs, input.data(), &p.weight, 1.0, &mut out);
                (Tensor::matrix(n, outputs, out)?, None)
            }
            LayerSpec::Relu => {
                let mut out = input.clone();
                out.data_mut().iter_mut().for_each(|v| *v = v.max(0.0));
                (out, None)
            }
            LayerSpec::Dropout { keep } if train && keep < 1.0 => {
                let scale = 1.0 / keep;
                let mask: Vec<f64> = (0..input.len())
                    .map(|_| if rng.gen::<f64>() < keep { scale } else { 0.0 })
                    .collect();
                let mut out = input.clone();
                out.data_mut().iter_mut().zip(&mask).for_each(|(v, m)| *v *= m);
                (out, Some(mask))
            }
            LayerSpec::GaussianNoise { stddev } if train && stddev > 0.0 => {
                let normal = Normal::new(0.0, stddev)
                    .map_err(|e| Error::Argument(format!("gaussian noise: {e}")))?;
                let mut out = input.clone();
                out.data_mut().iter_mut().for_each(|v| *v += normal.sample(rng));
                (out, None)
            }
            LayerSpec::Dropout { .. } | LayerSpec::GaussianNoise { .. } => (input.clone(), None),
            LayerSpec::Softmax => (softmax_rows(input), None),
        })
    }

    /// Accumulates parameter gradients given the loss gradient with respect to
    /// the pre-softmax logits (or the raw output when there is no softmax).
    ///
    /// Gradients are added to whatever is already stored, so the two passes
    /// of a consistency step can share one [`Network::zero_grad`].
    pub fn backward(&mut self, trace: &Trace, grad_logits: &Tensor) -> Result<()> {
        if trace.version != self.version || trace.activations.len() != self.layers.len() + 1 {
            return Err(Error::State(
                "backward needs a trace from a forward pass with the current parameters".into(),
            ));
        }
        trace.logits().same_shape(grad_logits, "backward")?;
        if !grad_logits.is_finite() {
            return Err(Error::Numeric("loss gradient is not finite".into()));
        }
        let mut last = self.layers.len();
        if matches!(self.layers.last(), Some(LayerSpec::Softmax)) {
            last -= 1;
        }
        let mut delta = grad_logits.clone();
        let mut d = self.dense.len();
        for i in (0..last).rev() {
            let input = &trace.activations[i];
            let n = input.rows();
            match self.layers[i] {
                LayerSpec::Dense { inputs, outputs } => {
                    d -= 1;
                    let p = &mut self.dense[d];
                    gemm_tn(inputs, n, outputs, input.data(), delta.data(), &mut p.grad_weight);
                    for row in delta.row_iter() {
                        p.grad_bias.iter_mut().zip(row).for_each(|(g, r)| *g += r);
                    }
                    if d == 0 {
                        break;
                    }
                    let mut next = vec![0.0; n * inputs];
                    gemm_nt(n, outputs, inputs, delta.data(), &p.weight, &mut next);
                    delta = Tensor::matrix(n, inputs, next)?;
                }
                LayerSpec::Relu => {
                    delta
                        .data_mut()
                        .iter_mut()
                        .zip(input.data())
                        .for_each(|(g, x)| {
                            if *x <= 0.0 {
                                *g = 0.0
                            }
                        });
                }
                LayerSpec::Dropout { .. } => {
                    if let Some(mask) = &trace.masks[i] {
                        delta.data_mut().iter_mut().zip(mask).for_each(|(g, m)| *g *= m);
                    }
                }
                LayerSpec::GaussianNoise { .. } => {}
                LayerSpec::Softmax => {
                    return Err(Error::State("softmax found before the final layer".into()));
                }
            }
        }
        Ok(())
    }
}

/// Numerically stable row-wise softmax.
pub fn softmax_rows(logits: &Tensor) -> Tensor {
    let mut out = logits.clone();
    let cols = out.cols();
    if cols == 0 {
        return out;
    }
    for row in out.data_mut().chunks_exact_mut(cols) {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let mut sum = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            sum += *v;
        }
        row.iter_mut().for_each(|v| *v /= sum);
    }
    out
}

/// Maps a gradient with respect to softmax outputs to one with respect to
/// the logits: `g_logit = p ⊙ (g − Σ g⊙p)` row by row.
pub fn softmax_backward(probs: &Tensor, grad_probs: &Tensor) -> Result<Tensor> {
    probs.same_shape(grad_probs, "softmax_backward")?;
    let mut out = grad_probs.clone();
    let cols = probs.cols().max(1);
    for (g, p) in out.data_mut().chunks_exact_mut(cols).zip(probs.data().chunks_exact(cols)) {
        let dot: f64 = g.iter().zip(p).map(|(a, b)| a * b).sum();
        g.iter_mut().zip(p).for_each(|(gi, pi)| *gi = pi * (*gi - dot));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::nn::layer::MlpSpec;

    fn small_spec() -> MlpSpec {
        MlpSpec {
            inputs: 5,
            hidden: vec![8, 6],
            classes: 3,
            dropout_keep: 0.5,
            input_noise: 0.2,
        }
    }

    #[test]
    fn zero_weights_give_uniform_probabilities() {
        let net = Network::zeros(vec![
            LayerSpec::Dense { inputs: 3, outputs: 4 },
            LayerSpec::Softmax,
        ])
        .unwrap();
        let x = Tensor::from_rows(&[vec![1.0, -2.0, 3.5], vec![100.0, 0.0, -7.0]]).unwrap();
        let p = net.predict(&x).unwrap();
        assert!(p.data().iter().all(|&v| v == 0.25));
    }

    #[test]
    fn eval_is_deterministic_and_train_is_not() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let net = Network::init(small_spec().layers(), &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.1, 0.8, 0.0, 1.0]]).unwrap();
        let a = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_eq!(a.output(), b.output());
        assert_eq!(a.output(), &net.predict(&x).unwrap());

        let a = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(5)).unwrap();
        let b = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(6)).unwrap();
        assert_ne!(a.output(), b.output());
    }

    #[test]
    fn disabled_stochastic_layers_are_bit_identical_in_train_mode() {
        let mut spec = small_spec();
        spec.dropout_keep = 1.0;
        spec.input_noise = 0.0;
        let net = Network::init(spec.layers(), &mut ChaCha8Rng::seed_from_u64(3)).unwrap();
        let x = Tensor::from_rows(&[vec![0.3, -0.1, 0.8, 0.0, 1.0]]).unwrap();
        let a = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(1)).unwrap();
        let b = net.forward(&x, Mode::Train, &mut ChaCha8Rng::seed_from_u64(2)).unwrap();
        assert_eq!(a.output(), b.output());
    }

    #[test]
    fn input_shape_is_checked() {
        let net = Network::zeros(small_spec().layers()).unwrap();
        let x = Tensor::zeros(2, 4);
        assert!(matches!(net.predict(&x), Err(Error::Dimension(_))));
    }

    #[test]
    fn non_finite_parameters_are_reported() {
        let mut net = Network::zeros(small_spec().layers()).unwrap();
        net.dense_mut()[1].bias[0] = f64::NAN;
        assert!(matches!(net.predict(&Tensor::zeros(1, 5)), Err(Error::Numeric(_))));
    }

    #[test]
    fn stale_trace_is_rejected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut net = Network::init(small_spec().layers(), &mut rng).unwrap();
        let x = Tensor::zeros(2, 5);
        let trace = net.forward(&x, Mode::Train, &mut rng).unwrap();
        let grad = Tensor::zeros(2, 3);
        net.backward(&trace, &grad).unwrap();
        for (p, _) in net.param_groups_mut() {
            p[0] += 0.0;
        }
        assert!(matches!(net.backward(&trace, &grad), Err(Error::State(_))));
    }

    #[test]
    fn zero_loss_gradient_gives_zero_parameter_gradients() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mut net = Network::init(small_spec().layers(), &mut rng).unwrap();
        let x = Tensor::from_rows(&[vec![0.1, 0.2, 0.3, 0.4, 0.5]]).unwrap();
        let trace = net.forward(&x, Mode::Train, &mut rng).unwrap();
        net.backward(&trace, &Tensor::zeros(1, 3)).unwrap();
        assert!(net.grads_flat().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn single_dense_gradient_is_input_outer_output_gradient() {
        // y = x·W + b, dL/dW = xᵀ·g, dL/db = g
        let mut net = Network::zeros(vec![LayerSpec::Dense { inputs: 2, outputs: 3 }]).unwrap();
        let x = Tensor::from_rows(&[vec![2.0, -1.0]]).unwrap();
        let g = Tensor::from_rows(&[vec![0.5, 1.0, -3.0]]).unwrap();
        let trace = net.forward(&x, Mode::Eval, &mut ChaCha8Rng::seed_from_u64(0)).unwrap();
        net.backward(&trace, &g).unwrap();
        let d = &net.dense()[0];
        assert_eq!(d.grad_weight, vec![1.0, 2.0, -6.0, -0.5, -1.0, 3.0]);
        assert_eq!(d.grad_bias, vec![0.5, 1.0, -3.0]);
    }

    #[test]
    fn softmax_backward_matches_jacobian() {
        let p = softmax_rows(&Tensor::from_rows(&[vec![0.2, -1.0, 0.7]]).unwrap());
        let g = Tensor::from_rows(&[vec![1.0, 0.0, -2.0]]).unwrap();
        let got = softmax_backward(&p, &g).unwrap();
        let pr = p.row(0);
        for j in 0..3 {
            let want: f64 = (0..3)
                .map(|i| {
                    let jac = if i == j { pr[i] * (1.0 - pr[i]) } else { -pr[i] * pr[j] };
                    g.row(0)[i] * jac
                })
                .sum();
            assert!((got.row(0)[j] - want).abs() < 1e-15);
        }
    }
}

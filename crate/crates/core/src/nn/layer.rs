use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// One stage of a feed-forward network.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum LayerSpec {
    Dense { inputs: usize, outputs: usize },
    Relu,
    /// Inverted dropout: surviving units are scaled by `1 / keep`.
    Dropout { keep: f64 },
    /// Additive zero-mean Gaussian noise, active in train mode only.
    GaussianNoise { stddev: f64 },
    Softmax,
}

impl LayerSpec {
    pub fn name(&self) -> &'static str {
        match self {
            LayerSpec::Dense { .. } => "dense",
            LayerSpec::Relu => "relu",
            LayerSpec::Dropout { .. } => "dropout",
            LayerSpec::GaussianNoise { .. } => "gaussian-noise",
            LayerSpec::Softmax => "softmax",
        }
    }
}

/// Checks that a layer stack composes and returns (input width, output width).
pub fn validate_layers(layers: &[LayerSpec]) -> Result<(usize, usize)> {
    let mut input = None;
    let mut width: Option<usize> = None;
    for (i, layer) in layers.iter().enumerate() {
        match *layer {
            LayerSpec::Dense { inputs, outputs } => {
                if inputs == 0 || outputs == 0 {
                    return Err(Error::Dimension(format!("layer {i}: dense with a zero dimension")));
                }
                if let Some(w) = width {
                    if w != inputs {
                        return Err(Error::Dimension(format!(
                            "layer {i}: dense expects {inputs} inputs but receives {w}"
                        )));
                    }
                }
                input.get_or_insert(inputs);
                width = Some(outputs);
            }
            LayerSpec::Dropout { keep } => {
                if !(keep > 0.0 && keep <= 1.0) {
                    return Err(Error::Argument(format!(
                        "layer {i}: dropout keep-probability {keep} outside (0, 1]"
                    )));
                }
            }
            LayerSpec::GaussianNoise { stddev } => {
                if !(stddev >= 0.0 && stddev.is_finite()) {
                    return Err(Error::Argument(format!(
                        "layer {i}: gaussian-noise stddev {stddev} must be finite and >= 0"
                    )));
                }
            }
            LayerSpec::Softmax => {
                if i + 1 != layers.len() {
                    return Err(Error::Argument(format!(
                        "layer {i}: softmax may only be the final layer"
                    )));
                }
            }
            LayerSpec::Relu => {}
        }
    }
    match (input, width) {
        (Some(i), Some(w)) => Ok((i, w)),
        _ => Err(Error::Argument("network needs at least one dense layer".into())),
    }
}

/// Architecture description for the multilayer perceptrons used throughout.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MlpSpec {
    pub inputs: usize,
    pub hidden: Vec<usize>,
    pub classes: usize,
    /// Dropout keep-probability after every hidden activation.
    pub dropout_keep: f64,
    /// Stddev of the Gaussian noise layer placed at the input.
    pub input_noise: f64,
}

impl MlpSpec {
    /// Two hidden layers of 128 units with dropout, as used for MNIST.
    pub fn mnist() -> Self {
        MlpSpec {
            inputs: 784,
            hidden: vec![128, 128],
            classes: 10,
            dropout_keep: 0.5,
            input_noise: 0.15,
        }
    }

    pub fn layers(&self) -> Vec<LayerSpec> {
        let mut layers = vec![LayerSpec::GaussianNoise {
            stddev: self.input_noise,
        }];
        let mut width = self.inputs;
        for &h in &self.hidden {
            layers.push(LayerSpec::Dense {
                inputs: width,
                outputs: h,
            });
            layers.push(LayerSpec::Relu);
            layers.push(LayerSpec::Dropout {
                keep: self.dropout_keep,
            });
            width = h;
        }
        layers.push(LayerSpec::Dense {
            inputs: width,
            outputs: self.classes,
        });
        layers.push(LayerSpec::Softmax);
        layers
    }
}

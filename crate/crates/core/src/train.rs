//! Plain cross-entropy training with plateau scheduling, and evaluation.

use log::debug;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, AugmentationSpec, Dataset};
use crate::error::{Error, Result};
use crate::nn::{cross_entropy, Mode, Network, OptimizerConfig, OptimizerState};
use crate::ssl::balance_classes;
use crate::tensor::Tensor;

/// Independent random stream `stream` derived from a run seed.
pub fn rng_stream(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub optimizer: OptimizerConfig,
    /// Oversample minority labels so every epoch sees each class equally often.
    pub balance_classes: bool,
    pub augmentation: AugmentationSpec,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 40,
            batch_size: 100,
            optimizer: OptimizerConfig::default(),
            balance_classes: false,
            augmentation: AugmentationSpec::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub loss: f64,
    pub learning_rate: f64,
    pub val_accuracy: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    /// Parameters with the best validation accuracy (the last ones without validation).
    pub network: Network,
    pub history: Vec<EpochRecord>,
    pub best_val_accuracy: Option<f64>,
}

/// Percentage of rows whose argmax matches `labels`.
pub fn accuracy(network: &Network, features: &Tensor, labels: &[usize]) -> Result<f64> {
    if labels.is_empty() {
        return Ok(0.0);
    }
    let probs = network.predict(features)?;
    let hits = probs
        .argmax_rows()
        .iter()
        .zip(labels)
        .filter(|(p, y)| p == y)
        .count();
    Ok(100.0 * hits as f64 / labels.len() as f64)
}

/// Validation accuracy with mean cross-entropy as a tie-breaker.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ValidationScore {
    pub accuracy: f64,
    pub loss: f64,
    /// `accuracy` plus a bonus in (0, half an accuracy step] that shrinks with
    /// the loss, so it orders first by accuracy and then by loss.
    pub key: f64,
}

pub fn validation_score(network: &Network, val: &Dataset) -> Result<ValidationScore> {
    if val.is_empty() {
        return Err(Error::Argument("validation set is empty".into()));
    }
    let probs = network.predict(val.features())?;
    let hits = probs.argmax_rows().iter().zip(val.labels()).filter(|(p, y)| p == y).count();
    let (loss, _) = cross_entropy(&probs, val.labels())?;
    let step = 100.0 / val.len() as f64;
    let accuracy = step * hits as f64;
    Ok(ValidationScore {
        accuracy,
        loss,
        key: accuracy + 0.5 * step / (1.0 + loss),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evaluation {
    pub accuracy: f64,
    /// `confusion[true][predicted]`.
    pub confusion: Vec<Vec<usize>>,
}

/// Eval-mode accuracy (percent) and confusion matrix against the dataset's labels.
pub fn evaluate(network: &Network, test: &Dataset) -> Result<Evaluation> {
    if network.input_dim() != test.dim() {
        return Err(Error::Dimension(format!(
            "network takes {} features, dataset has {}",
            network.input_dim(),
            test.dim()
        )));
    }
    let classes = test.classes().max(network.output_dim());
    let mut confusion = vec![vec![0; classes]; classes];
    let preds = network.predict(test.features())?.argmax_rows();
    for (&p, &y) in preds.iter().zip(test.labels()) {
        confusion[y][p] += 1;
    }
    let hits: usize = (0..classes).map(|c| confusion[c][c]).sum();
    let accuracy = if test.is_empty() {
        0.0
    } else {
        100.0 * hits as f64 / test.len() as f64
    };
    Ok(Evaluation { accuracy, confusion })
}

/// One cross-entropy update on a batch. Returns the batch loss.
pub fn supervised_step(
    network: &mut Network,
    optimizer: &mut OptimizerState,
    batch: &Tensor,
    labels: &[usize],
    rng: &mut ChaCha8Rng,
) -> Result<f64> {
    let trace = network.forward(batch, Mode::Train, rng)?;
    let (loss, grad) = cross_entropy(trace.output(), labels)?;
    network.zero_grad();
    network.backward(&trace, &grad)?;
    optimizer.step(network)?;
    Ok(loss)
}

/// Mini-batch cross-entropy training of `network` on `train`.
///
/// After every epoch the validation accuracy (when a validation set is
/// given) feeds the plateau schedule; the best-scoring parameters are
/// returned and training stops early when the schedule says so.
pub fn train_supervised(
    mut network: Network,
    train: &Dataset,
    val: Option<&Dataset>,
    config: &TrainConfig,
) -> Result<TrainOutcome> {
    if config.batch_size == 0 {
        return Err(Error::Config("batch size must be positive".into()));
    }
    if train.is_empty() && config.epochs > 0 {
        return Err(Error::Argument("empty training set".into()));
    }
    config.augmentation.validate(train.dim())?;
    let mut optimizer = OptimizerState::new(config.optimizer.clone(), &network)?;
    let mut order_rng = rng_stream(config.seed, 1);
    let mut step_rng = rng_stream(config.seed, 2);
    let mut best: Option<(f64, Network)> = None;
    let mut history = Vec::with_capacity(config.epochs);
    let pairs: Vec<(usize, usize)> = train.labels().iter().copied().enumerate().collect();

    for epoch in 0..config.epochs {
        let order: Vec<usize> = if config.balance_classes {
            balance_classes(&pairs, train.classes(), &mut order_rng)?.indices
        } else {
            let mut o: Vec<usize> = (0..train.len()).collect();
            o.shuffle(&mut order_rng);
            o
        };
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for chunk in order.chunks(config.batch_size) {
            let x = train.features().select_rows(chunk);
            let x = augment_batch(&x, &config.augmentation, &mut step_rng)?;
            let y: Vec<usize> = chunk.iter().map(|&i| train.labels()[i]).collect();
            let loss = supervised_step(&mut network, &mut optimizer, &x, &y, &mut step_rng).map_err(
                |e| match e {
                    Error::Numeric(msg) => Error::Training { epoch, msg },
                    other => other,
                },
            )?;
            if !loss.is_finite() {
                return Err(Error::Training {
                    epoch,
                    msg: format!("cross-entropy became {loss}"),
                });
            }
            loss_sum += loss;
            batches += 1;
        }
        let loss = loss_sum / batches.max(1) as f64;
        let lr = optimizer.learning_rate;
        let score = val.map(|v| validation_score(&network, v)).transpose()?;
        let val_accuracy = score.map_or(f64::NAN, |s| s.accuracy);
        history.push(EpochRecord {
            epoch,
            loss,
            learning_rate: lr,
            val_accuracy,
        });
        debug!("epoch {epoch}: loss {loss:.4} lr {lr:.2e} val {val_accuracy:.2}");
        if let Some(score) = score {
            let outcome = optimizer.observe(score.key);
            if outcome.improved {
                best = Some((val_accuracy, network.clone()));
            }
            if outcome.stop {
                break;
            }
        }
    }
    let (best_val_accuracy, network) = match best {
        Some((acc, net)) => (Some(acc), net),
        None => (None, network),
    };
    Ok(TrainOutcome {
        network,
        history,
        best_val_accuracy,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data::make_synthetic;
    use crate::nn::{Algorithm, MlpSpec};

    fn linear_net(dim: usize, classes: usize, seed: u64) -> Network {
        let spec = MlpSpec {
            inputs: dim,
            hidden: vec![],
            classes,
            dropout_keep: 1.0,
            input_noise: 0.0,
        };
        Network::init(spec.layers(), &mut ChaCha8Rng::seed_from_u64(seed)).unwrap()
    }

    #[test]
    fn separable_blobs_are_learned() {
        let data = make_synthetic(2, 100, 5, 100.0, 3).unwrap();
        let config = TrainConfig {
            epochs: 5,
            batch_size: 20,
            ..Default::default()
        };
        let out = train_supervised(linear_net(5, 2, 1), &data, Some(&data), &config).unwrap();
        assert_eq!(accuracy(&out.network, data.features(), data.labels()).unwrap(), 100.0);
    }

    #[test]
    fn zero_epochs_return_the_initial_network() {
        let data = make_synthetic(3, 10, 4, 2.0, 0).unwrap();
        let net = linear_net(4, 3, 9);
        let config = TrainConfig {
            epochs: 0,
            ..Default::default()
        };
        let out = train_supervised(net.clone(), &data, Some(&data), &config).unwrap();
        assert_eq!(out.network, net);
        assert!(out.history.is_empty());
    }

    #[test]
    fn divergence_reports_the_epoch() {
        let data = make_synthetic(2, 50, 3, 1e150, 0).unwrap();
        let config = TrainConfig {
            epochs: 3,
            optimizer: OptimizerConfig {
                algorithm: Algorithm::SgdMomentum,
                learning_rate: 1e200,
                ..Default::default()
            },
            ..Default::default()
        };
        let err = train_supervised(linear_net(3, 2, 0), &data, None, &config).unwrap_err();
        assert!(matches!(err, Error::Training { epoch: 0, .. }), "{err:?}");
    }

    #[test]
    fn evaluation_counts() {
        // constant predictor on a balanced 10-class set scores 10%
        let net = Network::zeros(MlpSpec { hidden: vec![], ..MlpSpec::mnist() }.layers()).unwrap();
        let mut net = net;
        net.dense_mut()[0].bias[3] = 1.0;
        let labels: Vec<usize> = (0..50).map(|i| i % 10).collect();
        let test = Dataset::new("t", Tensor::zeros(50, 784), labels, 10).unwrap();
        let e = evaluate(&net, &test).unwrap();
        assert_eq!(e.accuracy, 10.0);
        for (c, row) in e.confusion.iter().enumerate() {
            assert_eq!(row.iter().sum::<usize>(), 5, "class {c}");
            assert_eq!(row[3], 5);
        }
    }

    #[test]
    fn five_examples_three_right() {
        // identity-like net on one-hot inputs
        let mut net = Network::zeros(MlpSpec {
            inputs: 3,
            hidden: vec![],
            classes: 3,
            dropout_keep: 1.0,
            input_noise: 0.0,
        }
        .layers())
        .unwrap();
        let d = &mut net.dense_mut()[0];
        for c in 0..3 {
            d.weight[c * 3 + c] = 1.0;
        }
        let x = Tensor::from_rows(&[
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
            vec![0.0, 0.0, 1.0],
            vec![1.0, 0.0, 0.0],
            vec![0.0, 1.0, 0.0],
        ])
        .unwrap();
        let test = Dataset::new("t", x, vec![0, 1, 2, 2, 0], 3).unwrap();
        let e = evaluate(&net, &test).unwrap();
        assert_eq!(e.accuracy, 60.0);
        assert_eq!(e.confusion[2][0], 1);
        let wide = Dataset::new("w", Tensor::zeros(1, 4), vec![0], 3).unwrap();
        assert!(evaluate(&net, &wide).is_err());
    }
}

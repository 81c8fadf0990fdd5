//! Stage 2: semi-supervised training on the mined split.
//!
//! Every batch holds N/2 labeled and N/2 unlabeled examples. The loss is
//! cross-entropy on the labeled half plus `alpha` times the mean squared
//! distance between two stochastic predictions of every example in the batch
//! (the Π-model). With temporal ensembling the second prediction is replaced
//! by a bias-corrected moving average of past predictions.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};

use log::{debug, warn};
use rand::seq::SliceRandom;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::{augment_batch, AugmentationSpec, Dataset};
use crate::error::{Error, Result};
use crate::mining::MinedSplit;
use crate::nn::{
    consistency_loss, cross_entropy, softmax_backward, LossBreakdown, Mode, Network, OptimizerConfig,
    OptimizerState,
};
use crate::tensor::Tensor;
use crate::train::{accuracy, rng_stream, validation_score};

/// Class-balanced ordering of a labeled pool.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BalancedPool {
    /// Dataset indices, shuffled; every non-empty class appears as often as the largest.
    pub indices: Vec<usize>,
    /// Classes with no labeled example at all.
    pub empty_classes: Vec<usize>,
}

/// Oversamples every class up to the size of the largest one. Each member
/// appears at least once; the shortfall is drawn with replacement from the
/// class's own members.
pub fn balance_classes<R: Rng + ?Sized>(
    labeled: &[(usize, usize)],
    classes: usize,
    rng: &mut R,
) -> Result<BalancedPool> {
    if labeled.is_empty() {
        return Err(Error::Argument("cannot balance an empty labeled set".into()));
    }
    let mut members = vec![Vec::new(); classes];
    for &(i, y) in labeled {
        if y >= classes {
            return Err(Error::Argument(format!("label {y} outside [0, {classes})")));
        }
        members[y].push(i);
    }
    let target = members.iter().map(Vec::len).max().unwrap_or(0);
    let mut indices = Vec::with_capacity(target * classes);
    let mut empty_classes = Vec::new();
    for (c, m) in members.iter().enumerate() {
        if m.is_empty() {
            empty_classes.push(c);
            continue;
        }
        indices.extend_from_slice(m);
        for _ in m.len()..target {
            indices.push(m[rng.gen_range(0..m.len())]);
        }
    }
    if !empty_classes.is_empty() {
        warn!("no labeled examples for classes {empty_classes:?}");
    }
    indices.shuffle(rng);
    Ok(BalancedPool { indices, empty_classes })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum AlphaSchedule {
    Fixed,
    /// Gaussian ramp-up over the first `ramp_up` sub-epochs, and the mirrored
    /// ramp-down over the sub-epochs after `ramp_down_start`.
    Ramp {
        ramp_up: usize,
        ramp_down_start: Option<usize>,
    },
}

/// Unsupervised weight at `sub_epoch` of `total`.
pub fn ramp_alpha(alpha: f64, schedule: &AlphaSchedule, sub_epoch: usize, total: usize) -> f64 {
    match *schedule {
        AlphaSchedule::Fixed => alpha,
        AlphaSchedule::Ramp { ramp_up, ramp_down_start } => {
            let gauss = |t: f64| (-5.0 * (1.0 - t.clamp(0.0, 1.0)).powi(2)).exp();
            let mut w = if ramp_up == 0 || sub_epoch >= ramp_up {
                1.0
            } else {
                gauss(sub_epoch as f64 / ramp_up as f64)
            };
            if let Some(start) = ramp_down_start {
                if sub_epoch >= start && total > start {
                    let left = (total - sub_epoch) as f64 / (total - start) as f64;
                    w *= gauss(left);
                }
            }
            alpha * w
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslConfig {
    /// Examples per batch; must be even.
    pub batch_size: usize,
    pub alpha: f64,
    pub schedule: AlphaSchedule,
    /// One sub-epoch covers the balanced labeled pool once.
    pub sub_epochs: usize,
    pub temporal_ensembling: bool,
    /// Moving-average decay for temporal ensembling.
    pub ema_decay: f64,
    pub augmentation: AugmentationSpec,
    /// Stddev of the network's input noise layer during this stage.
    pub input_noise: f64,
    /// Overrides the dropout keep probability when set.
    pub dropout_keep: Option<f64>,
    pub optimizer: OptimizerConfig,
    pub seed: u64,
    /// Where to write the offending batch when the loss stops being finite.
    pub dump_dir: Option<PathBuf>,
}

impl Default for SslConfig {
    fn default() -> Self {
        SslConfig {
            batch_size: 100,
            alpha: 1.0,
            schedule: AlphaSchedule::Fixed,
            sub_epochs: 100,
            temporal_ensembling: false,
            ema_decay: 0.6,
            augmentation: AugmentationSpec::default(),
            input_noise: 0.15,
            dropout_keep: None,
            optimizer: OptimizerConfig::default(),
            seed: 0,
            dump_dir: None,
        }
    }
}

impl SslConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_size == 0 || self.batch_size % 2 != 0 {
            return Err(Error::Config(format!(
                "batch size must be positive and even, got {}",
                self.batch_size
            )));
        }
        if !(self.alpha >= 0.0 && self.alpha.is_finite()) {
            return Err(Error::Config(format!("alpha {} must be finite and >= 0", self.alpha)));
        }
        if !(0.0..1.0).contains(&self.ema_decay) {
            return Err(Error::Config(format!("ema decay {} outside [0, 1)", self.ema_decay)));
        }
        if let AlphaSchedule::Ramp { ramp_up, ramp_down_start } = self.schedule {
            if ramp_up > self.sub_epochs || ramp_down_start.is_some_and(|s| s > self.sub_epochs) {
                return Err(Error::Config("ramp points beyond the last sub-epoch".into()));
            }
        }
        if !(self.input_noise >= 0.0 && self.input_noise.is_finite()) {
            return Err(Error::Config(format!("input noise {} must be >= 0", self.input_noise)));
        }
        self.optimizer.validate()
    }
}

/// Indices making up one batch. Labeled entries carry their label.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchComposition {
    pub labeled: Vec<(usize, usize)>,
    pub unlabeled: Vec<usize>,
}

impl BatchComposition {
    pub fn len(&self) -> usize {
        self.labeled.len() + self.unlabeled.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Row order of the batch: labeled first.
    pub fn indices(&self) -> Vec<usize> {
        self.labeled
            .iter()
            .map(|&(i, _)| i)
            .chain(self.unlabeled.iter().copied())
            .collect()
    }

    pub fn labels(&self) -> Vec<usize> {
        self.labeled.iter().map(|&(_, y)| y).collect()
    }
}

/// Batches of one sub-epoch. The balanced pool is walked once in order, N/2
/// labeled per batch; a short last chunk is topped up with random pool
/// entries. Unlabeled slots are drawn uniformly with replacement. With no
/// unlabeled data every batch is all labeled.
pub fn compose_batches<R: Rng + ?Sized>(
    pool: &[usize],
    labels: &[usize],
    unlabeled: &[usize],
    batch_size: usize,
    rng: &mut R,
) -> Result<Vec<BatchComposition>> {
    if batch_size == 0 || batch_size % 2 != 0 {
        return Err(Error::Argument(format!("batch size {batch_size} must be positive and even")));
    }
    if pool.is_empty() {
        return Err(Error::Argument("empty labeled pool".into()));
    }
    let per_batch = if unlabeled.is_empty() { batch_size } else { batch_size / 2 };
    let mut batches = Vec::with_capacity(pool.len().div_ceil(per_batch));
    for chunk in pool.chunks(per_batch) {
        let mut take = chunk.to_vec();
        while take.len() < per_batch {
            take.push(pool[rng.gen_range(0..pool.len())]);
        }
        let unl = if unlabeled.is_empty() {
            Vec::new()
        } else {
            (0..batch_size / 2)
                .map(|_| unlabeled[rng.gen_range(0..unlabeled.len())])
                .collect()
        };
        batches.push(BatchComposition {
            labeled: take.into_iter().map(|i| (i, labels[i])).collect(),
            unlabeled: unl,
        });
    }
    Ok(batches)
}

/// What the first prediction of each example is pulled towards.
#[derive(Debug, Clone, Copy)]
pub enum ConsistencyTarget<'a> {
    /// A second stochastic pass of the same batch; gradients flow through both.
    TwinPass,
    /// Fixed targets, one row per batch row.
    Fixed(&'a Tensor),
    /// No unsupervised term.
    Off,
}

/// Computes the combined objective on `inputs` (labeled rows first, one
/// label per labeled row) and leaves its gradient in the network.
pub fn ssl_objective(
    network: &mut Network,
    inputs: &Tensor,
    labels: &[usize],
    alpha: f64,
    augmentation: &AugmentationSpec,
    target: ConsistencyTarget<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let n = inputs.rows();
    let m = labels.len();
    if m > n {
        return Err(Error::Dimension(format!("{m} labels for a batch of {n}")));
    }
    let x1 = augment_batch(inputs, augmentation, rng)?;
    let t1 = network.forward(&x1, Mode::Train, rng)?;
    let z1 = t1.output();
    let classes = z1.cols();

    let labeled_rows: Vec<usize> = (0..m).collect();
    let (supervised, g_sup) = cross_entropy(&z1.select_rows(&labeled_rows), labels)?;
    let mut g1 = Tensor::zeros(n, classes);
    g1.data_mut()[..m * classes].copy_from_slice(g_sup.data());

    network.zero_grad();
    let unsupervised = match target {
        ConsistencyTarget::Off => {
            network.backward(&t1, &g1)?;
            0.0
        }
        ConsistencyTarget::Fixed(z) => {
            let (loss, gz1, _) = consistency_loss(z1, z)?;
            add_scaled(&mut g1, &softmax_backward(z1, &gz1)?, alpha);
            network.backward(&t1, &g1)?;
            loss
        }
        ConsistencyTarget::TwinPass => {
            let x2 = augment_batch(inputs, augmentation, rng)?;
            let t2 = network.forward(&x2, Mode::Train, rng)?;
            let z2 = t2.output();
            let (loss, gz1, gz2) = consistency_loss(z1, z2)?;
            add_scaled(&mut g1, &softmax_backward(z1, &gz1)?, alpha);
            let mut g2 = softmax_backward(z2, &gz2)?;
            g2.data_mut().iter_mut().for_each(|g| *g *= alpha);
            network.backward(&t1, &g1)?;
            network.backward(&t2, &g2)?;
            loss
        }
    };
    Ok(LossBreakdown::new(supervised, unsupervised, alpha, m, n))
}

fn add_scaled(acc: &mut Tensor, g: &Tensor, scale: f64) {
    acc.data_mut()
        .iter_mut()
        .zip(g.data())
        .for_each(|(a, b)| *a += scale * b);
}

/// [`ssl_objective`] followed by one optimizer step. A non-finite loss
/// leaves the parameters untouched and is reported as a numeric error.
#[allow(clippy::too_many_arguments)]
pub fn ssl_step(
    network: &mut Network,
    optimizer: &mut OptimizerState,
    inputs: &Tensor,
    labels: &[usize],
    alpha: f64,
    augmentation: &AugmentationSpec,
    target: ConsistencyTarget<'_>,
    rng: &mut ChaCha8Rng,
) -> Result<LossBreakdown> {
    let loss = ssl_objective(network, inputs, labels, alpha, augmentation, target, rng)?;
    if !loss.is_finite() {
        return Err(Error::Numeric(format!(
            "loss became non-finite (supervised {}, unsupervised {})",
            loss.supervised, loss.unsupervised
        )));
    }
    optimizer.step(network)?;
    Ok(loss)
}

/// Per-example moving average of predictions.
#[derive(Debug, Clone, PartialEq)]
pub struct EmaState {
    accumulated: Tensor,
    decay: f64,
    updates: u32,
}

impl EmaState {
    pub fn new(examples: usize, classes: usize, decay: f64) -> Self {
        EmaState {
            accumulated: Tensor::zeros(examples, classes),
            decay,
            updates: 0,
        }
    }

    pub fn updates(&self) -> u32 {
        self.updates
    }

    pub fn accumulated(&self) -> &Tensor {
        &self.accumulated
    }

    /// Bias-corrected targets `Z / (1 − decayᵗ)`; `None` before the first update.
    pub fn targets(&self) -> Option<Tensor> {
        if self.updates == 0 {
            return None;
        }
        let scale = 1.0 / (1.0 - self.decay.powi(self.updates as i32));
        let data = self.accumulated.data().iter().map(|z| z * scale).collect();
        Tensor::new(self.accumulated.shape().to_vec(), data).ok()
    }
}

/// `Z ← decay·Z + (1 − decay)·z` over all examples.
pub fn temporal_ensemble_update(state: &mut EmaState, predictions: &Tensor) -> Result<()> {
    state.accumulated.same_shape(predictions, "temporal_ensemble_update")?;
    let d = state.decay;
    state
        .accumulated
        .data_mut()
        .iter_mut()
        .zip(predictions.data())
        .for_each(|(z, p)| *z = d * *z + (1.0 - d) * p);
    state.updates += 1;
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SslRecord {
    pub sub_epoch: usize,
    pub supervised: f64,
    pub unsupervised: f64,
    pub alpha: f64,
    pub lr: f64,
    pub val_acc: f64,
}

pub const METRICS_HEADER: &str = "sub_epoch,supervised,unsupervised,alpha,lr,val_acc";

pub fn write_metrics_csv(records: &[SslRecord], path: impl AsRef<Path>) -> Result<()> {
    let mut f = fs::File::create(path)?;
    writeln!(f, "{METRICS_HEADER}")?;
    for r in records {
        writeln!(
            f,
            "{},{},{},{},{},{}",
            r.sub_epoch, r.supervised, r.unsupervised, r.alpha, r.lr, r.val_acc
        )?;
    }
    Ok(())
}

#[derive(Debug, Clone)]
pub struct SslOutcome {
    /// Parameters with the best validation accuracy among those trained here
    /// (the initial network when the budget is zero).
    pub network: Network,
    pub records: Vec<SslRecord>,
    pub best_val_accuracy: f64,
    pub warnings: Vec<String>,
}

/// Trains `network` on the mined split of `train`, selecting the best
/// parameters on `val`.
pub fn train_ssl(
    mut network: Network,
    train: &Dataset,
    split: &MinedSplit,
    val: &Dataset,
    config: &SslConfig,
) -> Result<SslOutcome> {
    config.validate()?;
    config.augmentation.validate(train.dim())?;
    split.validate_against(train)?;
    if val.is_empty() {
        return Err(Error::Config("validation set is empty".into()));
    }
    network.set_input_noise(config.input_noise)?;
    if let Some(keep) = config.dropout_keep {
        network.set_dropout_keep(keep)?;
    }
    let mut warnings = Vec::new();
    if split.unlabeled.is_empty() {
        let msg = "no unlabeled examples; batches are fully labeled".to_string();
        warn!("{msg}");
        warnings.push(msg);
    }

    let mut optimizer = OptimizerState::new(config.optimizer.clone(), &network)?;
    let mut order_rng = rng_stream(config.seed, 11);
    let mut step_rng = rng_stream(config.seed, 12);
    let mut ema = config
        .temporal_ensembling
        .then(|| EmaState::new(train.len(), network.output_dim(), config.ema_decay));

    // The initial network is not a candidate: a validation set refined by
    // that same network scores it at 100% by construction.
    let mut best: Option<(f64, Network)> = None;
    let mut records = Vec::with_capacity(config.sub_epochs);

    for sub_epoch in 0..config.sub_epochs {
        let pool = balance_classes(&split.labeled, train.classes(), &mut order_rng)?;
        if sub_epoch == 0 && !pool.empty_classes.is_empty() {
            warnings.push(format!("classes without labeled examples: {:?}", pool.empty_classes));
        }
        let batches = compose_batches(&pool.indices, train.labels(), &split.unlabeled, config.batch_size, &mut order_rng)?;
        let alpha = ramp_alpha(config.alpha, &config.schedule, sub_epoch, config.sub_epochs);
        let targets = ema.as_ref().and_then(EmaState::targets);
        let (mut sup, mut unsup) = (0.0, 0.0);
        for batch in &batches {
            let rows = batch.indices();
            let x = train.features().select_rows(&rows);
            let fixed;
            let target = match (&ema, &targets) {
                (None, _) => ConsistencyTarget::TwinPass,
                (Some(_), None) => ConsistencyTarget::Off,
                (Some(_), Some(t)) => {
                    fixed = t.select_rows(&rows);
                    ConsistencyTarget::Fixed(&fixed)
                }
            };
            let loss = ssl_step(
                &mut network,
                &mut optimizer,
                &x,
                &batch.labels(),
                alpha,
                &config.augmentation,
                target,
                &mut step_rng,
            )
            .map_err(|e| match e {
                Error::Numeric(msg) => Error::Training {
                    epoch: sub_epoch,
                    msg: dump_batch(config.dump_dir.as_deref(), sub_epoch, &rows, msg),
                },
                other => other,
            })?;
            sup += loss.supervised;
            unsup += loss.unsupervised;
        }
        if let Some(state) = ema.as_mut() {
            let x = augment_batch(train.features(), &config.augmentation, &mut step_rng)?;
            let z = network.forward(&x, Mode::Train, &mut step_rng)?.into_output();
            temporal_ensemble_update(state, &z)?;
        }
        let count = batches.len().max(1) as f64;
        let score = validation_score(&network, val)?;
        let val_acc = score.accuracy;
        let record = SslRecord {
            sub_epoch,
            supervised: sup / count,
            unsupervised: unsup / count,
            alpha,
            lr: optimizer.learning_rate,
            val_acc,
        };
        debug!("{record:?}");
        records.push(record);
        let outcome = optimizer.observe(score.key);
        if outcome.improved {
            best = Some((val_acc, network.clone()));
        }
        if outcome.stop {
            break;
        }
    }
    let (best_val_accuracy, network) = match best {
        Some(b) => b,
        None => (accuracy(&network, val.features(), val.labels())?, network),
    };
    Ok(SslOutcome {
        network,
        records,
        best_val_accuracy,
        warnings,
    })
}

fn dump_batch(dir: Option<&Path>, sub_epoch: usize, rows: &[usize], msg: String) -> String {
    let Some(dir) = dir else {
        return msg;
    };
    let path = dir.join(format!("bad_batch_{sub_epoch}.json"));
    match serde_json::to_string(rows).map_err(Error::from).and_then(|s| Ok(fs::write(&path, s)?)) {
        Ok(()) => format!("{msg}; batch written to {}", path.display()),
        Err(e) => format!("{msg}; could not write batch dump: {e}"),
    }
}

//! Stage 1: mining a small, high-purity labeled subset out of a noisy training set.
//!
//! A network pre-trained on the noisy labels screens the data class by
//! class. An example survives the consistency filter when the network's
//! argmax agrees with its noisy label. Survivors of each class are ranked by
//! `P(label | x)`; everything at or above the confidence threshold is kept,
//! and if that is less than `floor_fraction` of the class the ranking is
//! followed further down until the floor is met. Labels of everything else
//! are dropped (never changed).
//!
//! With a trusted clean subset available, per-class binary filters can be
//! used instead of the pre-trained network.

use std::fs;
use std::path::Path;

use log::warn;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};
use crate::nn::{MlpSpec, Network};
use crate::noise::{audit, NoiseAudit};
use crate::tensor::Tensor;
use crate::train::{train_supervised, TrainConfig};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MiningConfig {
    /// Survivors with `P(label | x)` at or above this are kept outright.
    pub confidence_threshold: f64,
    /// Minimum share of each class (by noisy-label count) to keep when enough survivors exist.
    pub floor_fraction: f64,
}

impl Default for MiningConfig {
    fn default() -> Self {
        MiningConfig {
            confidence_threshold: 0.9,
            floor_fraction: 0.10,
        }
    }
}

impl MiningConfig {
    pub fn validate(&self) -> Result<()> {
        // a threshold of exactly 1 is allowed: it leaves the floor as the only rule
        if !(self.confidence_threshold > 0.0 && self.confidence_threshold <= 1.0) {
            return Err(Error::Config(format!(
                "confidence threshold {} outside (0, 1]",
                self.confidence_threshold
            )));
        }
        if !(self.floor_fraction > 0.0 && self.floor_fraction < 1.0) {
            return Err(Error::Config(format!(
                "floor fraction {} outside (0, 1)",
                self.floor_fraction
            )));
        }
        Ok(())
    }
}

/// Partition of a training set into labeled seeds and an unlabeled pool.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MinedSplit {
    /// (index, noisy label) pairs, sorted by index.
    pub labeled: Vec<(usize, usize)>,
    /// Sorted indices whose labels were dropped.
    pub unlabeled: Vec<usize>,
    pub source_size: usize,
}

impl MinedSplit {
    /// Builds a split from the kept indices, taking labels from `labels`.
    pub fn from_kept(mut kept: Vec<usize>, labels: &[usize]) -> Self {
        kept.sort_unstable();
        kept.dedup();
        let mut mask = vec![false; labels.len()];
        kept.iter().for_each(|&i| mask[i] = true);
        MinedSplit {
            labeled: kept.iter().map(|&i| (i, labels[i])).collect(),
            unlabeled: (0..labels.len()).filter(|&i| !mask[i]).collect(),
            source_size: labels.len(),
        }
    }

    pub fn labeled_mask(&self) -> Vec<bool> {
        let mut mask = vec![false; self.source_size];
        self.labeled.iter().for_each(|&(i, _)| mask[i] = true);
        mask
    }

    pub fn labeled_fraction(&self) -> f64 {
        if self.source_size == 0 {
            0.0
        } else {
            self.labeled.len() as f64 / self.source_size as f64
        }
    }

    /// Checks the partition invariants and that labels match `dataset`.
    pub fn validate_against(&self, dataset: &Dataset) -> Result<()> {
        if self.source_size != dataset.len() {
            return Err(Error::Consistency(format!(
                "split covers {} examples, dataset has {}",
                self.source_size,
                dataset.len()
            )));
        }
        let mut seen = vec![false; self.source_size];
        let indices = self.labeled.iter().map(|&(i, _)| i).chain(self.unlabeled.iter().copied());
        for i in indices {
            if i >= self.source_size || std::mem::replace(&mut seen[i], true) {
                return Err(Error::Consistency(format!("index {i} is out of range or repeated")));
            }
        }
        if !seen.iter().all(|&s| s) {
            return Err(Error::Consistency("split does not cover every example".into()));
        }
        if let Some(&(i, y)) = self.labeled.iter().find(|&&(i, y)| dataset.labels()[i] != y) {
            return Err(Error::Consistency(format!(
                "example {i} carries label {y} but the dataset says {}",
                dataset.labels()[i]
            )));
        }
        Ok(())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        fs::write(path, serde_json::to_string(self)?)?;
        Ok(())
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&fs::read_to_string(path)?)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MiningReport {
    /// Kept examples per noisy label.
    pub retained_per_class: Vec<usize>,
    pub retained: usize,
    pub source_size: usize,
    /// Present when the dataset carries ground truth.
    pub audit: Option<NoiseAudit>,
    pub warnings: Vec<String>,
}

impl MiningReport {
    fn build(split: &MinedSplit, dataset: &Dataset, warnings: Vec<String>) -> Result<Self> {
        let mut retained_per_class = vec![0; dataset.classes()];
        for &(_, y) in &split.labeled {
            retained_per_class[y] += 1;
        }
        let audit = match dataset.audit_true_labels() {
            Some(truth) => Some(audit(
                dataset.labels(),
                truth,
                Some(&split.labeled_mask()),
                dataset.classes(),
            )?),
            None => None,
        };
        Ok(MiningReport {
            retained_per_class,
            retained: split.labeled.len(),
            source_size: split.source_size,
            audit,
            warnings,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Survivor {
    pub index: usize,
    /// Probability the network assigns to the example's noisy label.
    pub confidence: f64,
}

/// Result of the prediction-consistency filter.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterOutcome {
    /// Survivors grouped by noisy label.
    pub survivors: Vec<Vec<Survivor>>,
    /// Examples whose argmax disagrees with their label.
    pub rejected: Vec<usize>,
    /// Number of examples carrying each noisy label.
    pub class_sizes: Vec<usize>,
}

/// Keeps exactly the examples whose eval-mode argmax equals their noisy label.
pub fn consistency_filter(network: &Network, train: &Dataset) -> Result<FilterOutcome> {
    let probs = network.predict(train.features())?;
    consistency_filter_probs(&probs, train.labels(), train.classes())
}

/// [`consistency_filter`] on precomputed class probabilities.
pub fn consistency_filter_probs(probs: &Tensor, labels: &[usize], classes: usize) -> Result<FilterOutcome> {
    if probs.rows() != labels.len() || probs.cols() < classes {
        return Err(Error::Dimension(format!(
            "{:?} probabilities for {} labels over {classes} classes",
            probs.shape(),
            labels.len()
        )));
    }
    let mut survivors = vec![Vec::new(); classes];
    let mut rejected = Vec::new();
    let mut class_sizes = vec![0; classes];
    for (index, (row, &y)) in probs.row_iter().zip(labels).enumerate() {
        class_sizes[y] += 1;
        if crate::tensor::argmax(row) == y {
            survivors[y].push(Survivor {
                index,
                confidence: row[y],
            });
        } else {
            rejected.push(index);
        }
    }
    Ok(FilterOutcome {
        survivors,
        rejected,
        class_sizes,
    })
}

/// Number of examples the floor asks for in a class of `class_size`.
pub fn floor_count(class_size: usize, floor_fraction: f64) -> usize {
    // guard against 0.1 * 100 landing a hair above 10
    let raw = floor_fraction * class_size as f64;
    let rounded = raw.round();
    if (raw - rounded).abs() < 1e-9 {
        rounded as usize
    } else {
        raw.ceil() as usize
    }
}

/// Picks the survivors of one class to keep: all at or above the threshold,
/// extended down the confidence ranking to `ceil(floor · class_size)` when
/// possible. Ties rank by original index. Returns indices in rank order.
pub fn rank_and_select(survivors: &[Survivor], class_size: usize, config: &MiningConfig) -> Vec<usize> {
    let mut ranked = survivors.to_vec();
    ranked.sort_by(|a, b| {
        b.confidence
            .total_cmp(&a.confidence)
            .then(a.index.cmp(&b.index))
    });
    let confident = ranked
        .iter()
        .take_while(|s| s.confidence >= config.confidence_threshold)
        .count();
    let floor = floor_count(class_size, config.floor_fraction);
    let keep = confident.max(floor.min(ranked.len()));
    ranked[..keep].iter().map(|s| s.index).collect()
}

/// Consistency filter followed by per-class ranking and selection.
pub fn mine(train: &Dataset, network: &Network, config: &MiningConfig) -> Result<(MinedSplit, MiningReport)> {
    config.validate()?;
    let filtered = consistency_filter(network, train)?;
    mine_filtered(train, &filtered, config)
}

/// [`mine`] on an existing filter outcome, so several configurations can
/// share one pass of the network.
pub fn mine_filtered(
    train: &Dataset,
    filtered: &FilterOutcome,
    config: &MiningConfig,
) -> Result<(MinedSplit, MiningReport)> {
    config.validate()?;
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    for (class, survivors) in filtered.survivors.iter().enumerate() {
        let size = filtered.class_sizes[class];
        let selected = rank_and_select(survivors, size, config);
        if size > 0 && selected.len() < floor_count(size, config.floor_fraction) {
            warnings.push(format!(
                "class {class}: only {} of {size} examples survived the consistency filter",
                selected.len()
            ));
        }
        kept.extend(selected);
    }
    let split = MinedSplit::from_kept(kept, train.labels());
    let report = MiningReport::build(&split, train, warnings)?;
    Ok((split, report))
}

/// Baseline classifier trained with plain cross-entropy on noisy labels,
/// returned at its best validation accuracy.
pub fn train_baseline(train: &Dataset, val: &Dataset, spec: &MlpSpec, config: &TrainConfig) -> Result<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let network = Network::init(spec.layers(), &mut rng)?;
    Ok(train_supervised(network, train, Some(val), config)?.network)
}

/// Mines the validation set and keeps only its labeled part.
pub fn refine_validation(val: &Dataset, network: &Network, config: &MiningConfig) -> Result<Dataset> {
    let (split, _) = mine(val, network, config)?;
    if split.labeled.is_empty() {
        return Err(Error::Config(format!(
            "refined validation set is empty; lower the confidence threshold (now {})",
            config.confidence_threshold
        )));
    }
    let kept: Vec<usize> = split.labeled.iter().map(|&(i, _)| i).collect();
    let mut refined = val.subset(&kept);
    refined.name = format!("{}-refined", val.name);
    Ok(refined)
}

/// Mining with a trusted clean set: one binary classifier per class,
/// positives being clean examples of that class and negatives the clean
/// examples of every other class. Noisy examples labeled `c` keep their label
/// only if classifier `c` calls them positive.
///
/// A class missing from the clean set loses all its noisy labels, with a
/// warning in the report.
pub fn train_binary_filters(
    clean: &Dataset,
    noisy: &Dataset,
    spec: &MlpSpec,
    config: &TrainConfig,
) -> Result<(MinedSplit, MiningReport)> {
    if clean.dim() != noisy.dim() {
        return Err(Error::Dimension(format!(
            "clean set has {} features, noisy set {}",
            clean.dim(),
            noisy.dim()
        )));
    }
    let classes = noisy.classes();
    let binary_spec = MlpSpec {
        inputs: noisy.dim(),
        classes: 2,
        ..spec.clone()
    };
    let mut kept = Vec::new();
    let mut warnings = Vec::new();
    let clean_counts = clean.class_counts();
    for class in 0..classes {
        let members: Vec<usize> = (0..noisy.len()).filter(|&i| noisy.labels()[i] == class).collect();
        if members.is_empty() {
            continue;
        }
        if clean_counts.get(class).copied().unwrap_or(0) == 0 {
            let msg = format!("class {class} is absent from the clean set; its noisy labels were removed");
            warn!("{msg}");
            warnings.push(msg);
            continue;
        }
        let binary_labels: Vec<usize> = clean.labels().iter().map(|&y| usize::from(y == class)).collect();
        let binary = Dataset::new(
            format!("{}-binary-{class}", clean.name),
            clean.features().clone(),
            binary_labels,
            2,
        )?;
        let class_config = TrainConfig {
            balance_classes: true,
            seed: config.seed.wrapping_add(class as u64),
            ..config.clone()
        };
        let init = Network::init(binary_spec.layers(), &mut ChaCha8Rng::seed_from_u64(class_config.seed))?;
        let filter = train_supervised(init, &binary, None, &class_config)?.network;
        let probs = filter.predict(&noisy.features().select_rows(&members))?;
        kept.extend(
            members
                .iter()
                .zip(probs.argmax_rows())
                .filter(|(_, p)| *p == 1)
                .map(|(&i, _)| i),
        );
    }
    let split = MinedSplit::from_kept(kept, noisy.labels());
    let report = MiningReport::build(&split, noisy, warnings)?;
    Ok((split, report))
}

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::dataset::Dataset;
use crate::error::{Error, Result};

/// A random train/validation partition of one dataset.
#[derive(Debug, Clone)]
pub struct SplitPair {
    pub train: Dataset,
    pub validation: Dataset,
    pub seed: u64,
    /// Source rows of `train`, in order.
    pub train_indices: Vec<usize>,
    /// Source rows of `validation`, in order.
    pub validation_indices: Vec<usize>,
}

/// Uniformly random disjoint split; `round(fraction · n)` rows go to validation.
pub fn split_train_val(dataset: &Dataset, fraction: f64, seed: u64) -> Result<SplitPair> {
    if !(fraction > 0.0 && fraction < 1.0) {
        return Err(Error::Argument(format!("validation fraction {fraction} outside (0, 1)")));
    }
    let n = dataset.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    let n_val = (fraction * n as f64).round() as usize;
    let mut validation_indices = order[..n_val].to_vec();
    let mut train_indices = order[n_val..].to_vec();
    validation_indices.sort_unstable();
    train_indices.sort_unstable();
    Ok(SplitPair {
        train: dataset.subset(&train_indices),
        validation: dataset.subset(&validation_indices),
        seed,
        train_indices,
        validation_indices,
    })
}

/// Per-feature mean of `train`.
pub fn feature_mean(train: &Dataset) -> Result<Vec<f64>> {
    if train.is_empty() {
        return Err(Error::Argument("cannot compute a mean over an empty training set".into()));
    }
    let mut mean = vec![0.0; train.dim()];
    for row in train.features().row_iter() {
        mean.iter_mut().zip(row).for_each(|(m, x)| *m += x);
    }
    let n = train.len() as f64;
    mean.iter_mut().for_each(|m| *m /= n);
    Ok(mean)
}

pub fn subtract_mean(dataset: &mut Dataset, mean: &[f64]) -> Result<()> {
    if dataset.dim() != mean.len() {
        return Err(Error::Dimension(format!(
            "mean has {} entries, dataset {} features",
            mean.len(),
            dataset.dim()
        )));
    }
    let cols = mean.len().max(1);
    for row in dataset.features_mut().data_mut().chunks_exact_mut(cols) {
        row.iter_mut().zip(mean).for_each(|(x, m)| *x -= m);
    }
    Ok(())
}

/// Subtracts the training set's per-feature mean from `train` and from every
/// dataset in `others`. Returns the mean.
pub fn normalize<'a>(
    train: &mut Dataset,
    others: impl IntoIterator<Item = &'a mut Dataset>,
) -> Result<Vec<f64>> {
    let mean = feature_mean(train)?;
    let others: Vec<&mut Dataset> = others.into_iter().collect();
    if let Some(bad) = others.iter().find(|d| d.dim() != train.dim()) {
        return Err(Error::Dimension(format!(
            "dataset '{}' has {} features, training set {}",
            bad.name,
            bad.dim(),
            train.dim()
        )));
    }
    subtract_mean(train, &mean)?;
    for d in others {
        subtract_mean(d, &mean)?;
    }
    Ok(mean)
}

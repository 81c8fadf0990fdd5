use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Height, width, channels of image-shaped feature rows (HWC, row-major).
pub type ImageShape = (usize, usize, usize);

/// Feature matrix with (possibly noisy) labels.
///
/// The clean labels a noise process started from can be attached for
/// auditing. They are deliberately only reachable through
/// [`Dataset::audit_true_labels`]: training code works with [`Dataset::labels`].
#[derive(Debug, Clone, PartialEq)]
pub struct Dataset {
    pub name: String,
    features: Tensor,
    labels: Vec<usize>,
    true_labels: Option<Vec<usize>>,
    classes: usize,
    image_shape: Option<ImageShape>,
}

impl Dataset {
    pub fn new(name: impl Into<String>, features: Tensor, labels: Vec<usize>, classes: usize) -> Result<Self> {
        if features.shape().len() != 2 {
            return Err(Error::Dimension(format!(
                "features must be a matrix, got shape {:?}",
                features.shape()
            )));
        }
        if features.rows() != labels.len() {
            return Err(Error::Consistency(format!(
                "{} feature rows but {} labels",
                features.rows(),
                labels.len()
            )));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= classes) {
            return Err(Error::Argument(format!("label {bad} outside [0, {classes})")));
        }
        Ok(Dataset {
            name: name.into(),
            features,
            labels,
            true_labels: None,
            classes,
            image_shape: None,
        })
    }

    pub fn with_true_labels(mut self, true_labels: Vec<usize>) -> Result<Self> {
        self.set_true_labels(Some(true_labels))?;
        Ok(self)
    }

    pub fn with_image_shape(mut self, shape: ImageShape) -> Result<Self> {
        if shape.0 * shape.1 * shape.2 != self.dim() {
            return Err(Error::Dimension(format!(
                "image shape {shape:?} does not cover {} features",
                self.dim()
            )));
        }
        self.image_shape = Some(shape);
        Ok(self)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.features.cols()
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn features(&self) -> &Tensor {
        &self.features
    }

    pub fn features_mut(&mut self) -> &mut Tensor {
        &mut self.features
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    pub fn image_shape(&self) -> Option<ImageShape> {
        self.image_shape
    }

    /// Ground-truth labels, for audit and evaluation code only.
    pub fn audit_true_labels(&self) -> Option<&[usize]> {
        self.true_labels.as_deref()
    }

    pub(crate) fn set_true_labels(&mut self, true_labels: Option<Vec<usize>>) -> Result<()> {
        if let Some(t) = &true_labels {
            if t.len() != self.len() {
                return Err(Error::Consistency(format!(
                    "{} true labels for {} examples",
                    t.len(),
                    self.len()
                )));
            }
            if let Some(&bad) = t.iter().find(|&&y| y >= self.classes) {
                return Err(Error::Argument(format!("true label {bad} outside [0, {})", self.classes)));
            }
        }
        self.true_labels = true_labels;
        Ok(())
    }

    /// Replaces the labels, keeping the old ones as ground truth if none were stored yet.
    pub(crate) fn relabel(&mut self, labels: Vec<usize>) -> Result<()> {
        if labels.len() != self.len() {
            return Err(Error::Consistency("relabel changes the example count".into()));
        }
        if self.true_labels.is_none() {
            self.true_labels = Some(std::mem::take(&mut self.labels));
        }
        self.labels = labels;
        Ok(())
    }

    /// New dataset holding the given rows (repeats allowed), in order.
    pub fn subset(&self, indices: &[usize]) -> Dataset {
        Dataset {
            name: self.name.clone(),
            features: self.features.select_rows(indices),
            labels: indices.iter().map(|&i| self.labels[i]).collect(),
            true_labels: self
                .true_labels
                .as_ref()
                .map(|t| indices.iter().map(|&i| t[i]).collect()),
            classes: self.classes,
            image_shape: self.image_shape,
        }
    }

    /// Number of examples carrying each label.
    pub fn class_counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.classes];
        for &y in &self.labels {
            counts[y] += 1;
        }
        counts
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn construction_checks_lengths_and_ranges() {
        let x = Tensor::zeros(3, 2);
        assert!(Dataset::new("d", x.clone(), vec![0, 1], 2).is_err());
        assert!(Dataset::new("d", x.clone(), vec![0, 1, 2], 2).is_err());
        let d = Dataset::new("d", x, vec![0, 1, 1], 2).unwrap();
        assert_eq!(d.class_counts(), vec![1, 2]);
        assert!(d.clone().with_true_labels(vec![0, 1]).is_err());
        assert!(d.with_image_shape((1, 3, 1)).is_err());
    }

    #[test]
    fn subset_carries_true_labels() {
        let x = Tensor::from_rows(&[vec![0.0], vec![1.0], vec![2.0]]).unwrap();
        let d = Dataset::new("d", x, vec![0, 1, 1], 2)
            .unwrap()
            .with_true_labels(vec![0, 0, 1])
            .unwrap();
        let s = d.subset(&[2, 0, 2]);
        assert_eq!(s.labels(), &[1, 0, 1]);
        assert_eq!(s.audit_true_labels().unwrap(), &[1, 0, 1]);
        assert_eq!(s.features().data(), &[2.0, 0.0, 2.0]);
    }
}

//! Datasets: IDX and CIFAR-10 loading, synthetic blobs, splitting, normalization and augmentation.

mod augment;
mod cifar;
mod dataset;
mod idx;
mod split;
mod synthetic;

pub use augment::{augment, augment_batch, flip_horizontal, shift, AugmentationSpec};
pub use cifar::load_cifar10;
pub use dataset::{Dataset, ImageShape};
pub use idx::{load_idx, read_idx_images, read_idx_labels, write_idx, IMAGE_MAGIC, LABEL_MAGIC};
pub use split::{feature_mean, normalize, split_train_val, subtract_mean, SplitPair};
pub use synthetic::{make_synthetic, read_csv, write_csv};

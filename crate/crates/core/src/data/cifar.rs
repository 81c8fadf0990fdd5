use std::fs;
use std::path::Path;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

const SIDE: usize = 32;
const PLANE: usize = SIDE * SIDE;
const RECORD: usize = 1 + 3 * PLANE;

/// Reads CIFAR-10 binary batches (`data_batch_*.bin`, `test_batch.bin`):
/// records of one label byte followed by 3072 channel-major pixel bytes.
/// Pixels are returned height-width-channel and scaled to [0, 1].
pub fn load_cifar10<P: AsRef<Path>>(batches: &[P]) -> Result<Dataset> {
    let mut data = Vec::new();
    let mut labels = Vec::new();
    for path in batches {
        let path = path.as_ref();
        let bytes = fs::read(path)?;
        if bytes.is_empty() || bytes.len() % RECORD != 0 {
            return Err(Error::format(path, format!("size {} is not a multiple of {RECORD}", bytes.len())));
        }
        for record in bytes.chunks_exact(RECORD) {
            let label = record[0] as usize;
            if label >= 10 {
                return Err(Error::format(path, format!("label byte {label}")));
            }
            labels.push(label);
            let pixels = &record[1..];
            for p in 0..PLANE {
                for c in 0..3 {
                    data.push(f64::from(pixels[c * PLANE + p]) / 255.0);
                }
            }
        }
    }
    let features = Tensor::matrix(labels.len(), 3 * PLANE, data)?;
    Dataset::new("cifar10", features, labels, 10)?.with_image_shape((SIDE, SIDE, 3))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn channel_major_becomes_interleaved() {
        let mut record = vec![0u8; RECORD];
        record[0] = 3;
        record[1] = 255; // red, pixel 0
        record[1 + PLANE] = 51; // green, pixel 0
        record[1 + 2 * PLANE + 1] = 255; // blue, pixel 1
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("b.bin");
        fs::write(&path, &record).unwrap();
        let d = load_cifar10(&[&path]).unwrap();
        assert_eq!(d.labels(), &[3]);
        assert_eq!(&d.features().row(0)[..6], &[1.0, 0.2, 0.0, 0.0, 0.0, 1.0]);
        assert_eq!(d.image_shape(), Some((32, 32, 3)));
        fs::write(&path, &record[..100]).unwrap();
        assert!(load_cifar10(&[&path]).is_err());
    }
}

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use super::dataset::Dataset;
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Isotropic unit-variance Gaussian blobs, one per class.
///
/// Class centers are random unit directions scaled by `separation`, so pairs
/// of centers sit roughly `separation · √2` apart. Labels and true labels
/// coincide. Rows are grouped by class.
pub fn make_synthetic(classes: usize, per_class: usize, dim: usize, separation: f64, seed: u64) -> Result<Dataset> {
    if !(separation > 0.0) {
        return Err(Error::Argument(format!("separation {separation} must be positive")));
    }
    if classes == 0 || dim == 0 {
        return Err(Error::Argument("need at least one class and one dimension".into()));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers: Vec<Vec<f64>> = (0..classes)
        .map(|_| {
            let v: Vec<f64> = (0..dim).map(|_| rng.sample(StandardNormal)).collect();
            let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt().max(f64::MIN_POSITIVE);
            v.into_iter().map(|x| x / norm * separation).collect()
        })
        .collect();
    let mut data = Vec::with_capacity(classes * per_class * dim);
    let mut labels = Vec::with_capacity(classes * per_class);
    for (c, center) in centers.iter().enumerate() {
        for _ in 0..per_class {
            data.extend(center.iter().map(|m| m + rng.sample::<f64, _>(StandardNormal)));
            labels.push(c);
        }
    }
    let features = Tensor::matrix(labels.len(), dim, data)?;
    Dataset::new(format!("synthetic-{classes}x{per_class}"), features, labels.clone(), classes)?
        .with_true_labels(labels)
}

/// Writes `label,true_label,f0..f{d-1}`. Without stored true labels the
/// observed label is written in both columns.
pub fn write_csv(dataset: &Dataset, path: impl AsRef<Path>) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    let header: Vec<String> = ["label".to_string(), "true_label".to_string()]
        .into_iter()
        .chain((0..dataset.dim()).map(|i| format!("f{i}")))
        .collect();
    writeln!(w, "{}", header.join(","))?;
    let truth = dataset.audit_true_labels().unwrap_or(dataset.labels());
    for (i, row) in dataset.features().row_iter().enumerate().take(dataset.len()) {
        write!(w, "{},{}", dataset.labels()[i], truth[i])?;
        for v in row {
            // `{:?}` prints the shortest representation that round-trips
            write!(w, ",{v:?}")?;
        }
        writeln!(w)?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_csv(path: impl AsRef<Path>, classes: usize) -> Result<Dataset> {
    let path = path.as_ref();
    let reader = BufReader::new(File::open(path)?);
    let mut lines = reader.lines();
    let header = lines.next().ok_or_else(|| Error::format(path, "empty file"))??;
    let cols: Vec<&str> = header.split(',').collect();
    if cols.len() < 2 || cols[0] != "label" || cols[1] != "true_label" {
        return Err(Error::format(path, "header must start with label,true_label"));
    }
    let dim = cols.len() - 2;
    let (mut labels, mut truth, mut data) = (Vec::new(), Vec::new(), Vec::new());
    for (lineno, line) in lines.enumerate() {
        let line = line?;
        if line.is_empty() {
            continue;
        }
        let fields: Vec<&str> = line.split(',').collect();
        if fields.len() != dim + 2 {
            return Err(Error::format(path, format!("line {}: expected {} fields", lineno + 2, dim + 2)));
        }
        let parse_label = |s: &str| {
            s.parse::<usize>()
                .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 2)))
        };
        labels.push(parse_label(fields[0])?);
        truth.push(parse_label(fields[1])?);
        for f in &fields[2..] {
            data.push(
                f.parse::<f64>()
                    .map_err(|e| Error::format(path, format!("line {}: {e}", lineno + 2)))?,
            );
        }
    }
    let name = path.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_default();
    Dataset::new(name, Tensor::matrix(labels.len(), dim, data)?, labels, classes)?.with_true_labels(truth)
}

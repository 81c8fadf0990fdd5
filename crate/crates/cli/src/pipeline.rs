//! The experiment pipeline and its individually runnable stages.
//!
//! Every stage reads the configuration, rebuilds the (deterministic) noisy
//! data, picks up earlier artifacts from the output directory and writes
//! its own:
//!
//! | file                     | written by       |
//! |--------------------------|------------------|
//! | `noise_audit.json`       | inject-noise     |
//! | `split.json`             | inject-noise     |
//! | `baseline.ckpt`          | train-baseline   |
//! | `baseline_metrics.csv`   | train-baseline   |
//! | `improved.ckpt`          | train-baseline --improved |
//! | `improved_metrics.csv`   | train-baseline --improved |
//! | `stage1.ckpt`            | mine             |
//! | `mined_split.json`       | mine             |
//! | `mining_report.json`     | mine             |
//! | `refined_val.json`       | mine             |
//! | `ssl.ckpt`               | train-ssl        |
//! | `ssl_metrics.csv`        | train-ssl        |
//! | `summary.json`           | run              |
//! | `timings.json`           | run              |

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use twostage::checkpoint;
use twostage::data::{load_cifar10, load_idx, make_synthetic, normalize, read_csv, split_train_val, subtract_mean, Dataset};
use twostage::mining::{mine, refine_validation, train_binary_filters, MinedSplit, MiningReport};
use twostage::nn::{MlpSpec, Network};
use twostage::noise::{apply_noise, build_transition, NoiseAudit, NoiseSpec};
use twostage::ssl::{train_ssl, write_metrics_csv};
use twostage::train::{evaluate, train_supervised, EpochRecord, Evaluation, TrainConfig};

use crate::config::{DatasetSpec, ExperimentConfig};
use crate::error::{CliError, CliResult, StageExt};

/// Noisy train/validation sets and the clean test set, normalized.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub train: Dataset,
    pub val: Dataset,
    pub test: Dataset,
    pub mean: Vec<f64>,
    pub noise_audit: NoiseAudit,
    pub train_indices: Vec<usize>,
    pub val_indices: Vec<usize>,
    /// Network spec with input and class counts filled in.
    pub spec: MlpSpec,
    /// Configuration with data-dependent fields (image shapes) filled in.
    pub config: ExperimentConfig,
}

fn find_file(dir: &Path, stem: &str) -> CliResult<PathBuf> {
    [dir.join(stem), dir.join(format!("{stem}.gz"))]
        .into_iter()
        .find(|p| p.is_file())
        .ok_or_else(|| CliError::Config(format!("{stem}[.gz] not found in {}", dir.display())))
}

fn load_source(spec: &DatasetSpec, seed: u64) -> CliResult<(Dataset, Dataset)> {
    match spec {
        DatasetSpec::Mnist { dir } => {
            let train = load_idx(
                find_file(dir, "train-images-idx3-ubyte")?,
                find_file(dir, "train-labels-idx1-ubyte")?,
            )
            .stage("load")?;
            let test = load_idx(
                find_file(dir, "t10k-images-idx3-ubyte")?,
                find_file(dir, "t10k-labels-idx1-ubyte")?,
            )
            .stage("load")?;
            Ok((train, test))
        }
        DatasetSpec::Cifar10 { dir } => {
            let dir = if dir.join("cifar-10-batches-bin").is_dir() {
                dir.join("cifar-10-batches-bin")
            } else {
                dir.clone()
            };
            let batches = (1..=5)
                .map(|i| find_file(&dir, &format!("data_batch_{i}.bin")))
                .collect::<CliResult<Vec<_>>>()?;
            let train = load_cifar10(&batches).stage("load")?;
            let test = load_cifar10(&[find_file(&dir, "test_batch.bin")?]).stage("load")?;
            Ok((train, test))
        }
        &DatasetSpec::Synthetic {
            classes,
            per_class,
            test_per_class,
            dim,
            separation,
        } => {
            let all = make_synthetic(classes, per_class + test_per_class, dim, separation, seed).stage("load")?;
            let block = per_class + test_per_class;
            let (mut tr, mut te) = (Vec::new(), Vec::new());
            for c in 0..classes {
                tr.extend(c * block..c * block + per_class);
                te.extend(c * block + per_class..(c + 1) * block);
            }
            Ok((all.subset(&tr), all.subset(&te)))
        }
    }
}

/// Load, normalize with the training mean, inject noise, split off validation.
pub fn prepare(config: &ExperimentConfig) -> CliResult<Prepared> {
    let (mut train, mut test) = load_source(&config.dataset, config.seed)?;
    if let Some(limit) = config.train_limit {
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed));
        order.truncate(limit.min(train.len()));
        order.sort_unstable();
        train = train.subset(&order);
    }
    let mean = normalize(&mut train, [&mut test]).stage("normalize")?;
    let transition = build_transition(&config.noise, train.classes()).stage("inject-noise")?;
    let (noisy, noise_audit) = apply_noise(&train, &transition, config.seed).stage("inject-noise")?;
    let split = split_train_val(&noisy, config.val_fraction, config.seed.wrapping_add(1)).stage("split")?;

    let mut config = config.clone();
    for aug in [&mut config.baseline.augmentation, &mut config.ssl.augmentation] {
        if aug.horizontal_flip || aug.shift_pixels > 0 {
            aug.image_shape = train.image_shape();
        }
    }
    let spec = MlpSpec {
        inputs: train.dim(),
        classes: train.classes(),
        ..config.net.clone()
    };
    Ok(Prepared {
        train: split.train,
        val: split.validation,
        test,
        mean,
        noise_audit,
        train_indices: split.train_indices,
        val_indices: split.validation_indices,
        spec,
        config,
    })
}

/// Exclusive claim on an output directory, released on drop.
#[derive(Debug)]
pub struct OutputLock {
    path: PathBuf,
}

impl OutputLock {
    pub fn acquire(dir: &Path) -> CliResult<Self> {
        fs::create_dir_all(dir)?;
        let path = dir.join(".lock");
        match OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(mut f) => {
                writeln!(f, "{}", std::process::id())?;
                Ok(OutputLock { path })
            }
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(CliError::Config(format!(
                "{} is in use by another run (remove {} if that run is gone)",
                dir.display(),
                path.display()
            ))),
            Err(e) => Err(e.into()),
        }
    }
}

impl Drop for OutputLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> CliResult<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> CliResult<T> {
    let text = fs::read_to_string(path)
        .map_err(|e| CliError::Config(format!("{}: {e} (run the earlier stage first)", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

fn load_checkpoint(path: &Path) -> CliResult<Network> {
    if !path.is_file() {
        return Err(CliError::Config(format!(
            "{} is missing (run the earlier stage first)",
            path.display()
        )));
    }
    checkpoint::load(path).stage("load-checkpoint")
}

pub fn write_epoch_csv(records: &[EpochRecord], path: &Path) -> CliResult<()> {
    let mut f = File::create(path)?;
    writeln!(f, "epoch,loss,lr,val_acc")?;
    for r in records {
        writeln!(f, "{},{},{},{}", r.epoch, r.loss, r.learning_rate, r.val_accuracy)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SplitRecord {
    pub train_indices: Vec<usize>,
    pub validation_indices: Vec<usize>,
}

/// Writes the noise audit and the train/validation partition.
pub fn inject_noise(prep: &Prepared, out: &Path) -> CliResult<()> {
    write_json(&out.join("noise_audit.json"), &prep.noise_audit)?;
    write_json(
        &out.join("split.json"),
        &SplitRecord {
            train_indices: prep.train_indices.clone(),
            validation_indices: prep.val_indices.clone(),
        },
    )
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BaselineMetrics {
    pub improved: bool,
    pub test_accuracy: f64,
    pub best_val_accuracy: Option<f64>,
    pub epochs_run: usize,
    pub val_size: usize,
}

fn init_network(prep: &Prepared) -> CliResult<Network> {
    let mut rng = ChaCha8Rng::seed_from_u64(prep.config.seed);
    Network::init(prep.spec.layers(), &mut rng).stage("init")
}

fn fit(prep: &Prepared, val: &Dataset, balanced: bool, stage: &'static str) -> CliResult<(Network, Vec<EpochRecord>, Option<f64>)> {
    let config = TrainConfig {
        balance_classes: balanced,
        ..prep.config.baseline.clone()
    };
    let outcome = train_supervised(init_network(prep)?, &prep.train, Some(val), &config).stage(stage)?;
    Ok((outcome.network, outcome.history, outcome.best_val_accuracy))
}

/// Plain cross-entropy on the noisy labels, or (improved) the same with
/// class balancing and a validation set refined by the plain baseline.
pub fn run_baseline(prep: &Prepared, improved: bool, out: &Path) -> CliResult<(Network, BaselineMetrics)> {
    let (network, history, best, val_size) = if improved {
        let plain = match load_checkpoint(&out.join("baseline.ckpt")) {
            Ok(net) => net,
            Err(_) => run_baseline(prep, false, out)?.0,
        };
        let refined = refine_validation(&prep.val, &plain, &prep.config.mining).stage("refine-validation")?;
        info!("improved baseline: validation refined to {} of {}", refined.len(), prep.val.len());
        let (net, hist, best) = fit(prep, &refined, true, "train-improved-baseline")?;
        (net, hist, best, refined.len())
    } else {
        let (net, hist, best) = fit(prep, &prep.val, false, "train-baseline")?;
        (net, hist, best, prep.val.len())
    };
    let name = if improved { "improved" } else { "baseline" };
    checkpoint::save(&network, out.join(format!("{name}.ckpt"))).stage("save")?;
    write_epoch_csv(&history, &out.join(format!("{name}_metrics.csv")))?;
    let test_accuracy = evaluate(&network, &prep.test).stage("evaluate")?.accuracy;
    info!("{name}: test accuracy {test_accuracy:.2}%");
    let metrics = BaselineMetrics {
        improved,
        test_accuracy,
        best_val_accuracy: best,
        epochs_run: history.len(),
        val_size,
    };
    Ok((network, metrics))
}

#[derive(Debug, Clone)]
pub struct MiningOutcome {
    pub split: MinedSplit,
    pub report: MiningReport,
    pub refined_val: Dataset,
    pub network: Network,
}

/// Stage 1. Self-refining mining uses the improved baseline when present
/// (else the plain one); with a clean set, per-class binary filters.
pub fn run_mining(prep: &Prepared, out: &Path, clean_set: Option<&Path>) -> CliResult<MiningOutcome> {
    let network = match load_checkpoint(&out.join("improved.ckpt")) {
        Ok(net) => net,
        Err(_) => load_checkpoint(&out.join("baseline.ckpt"))?,
    };
    let cfg = &prep.config.mining;
    let (split, report) = match clean_set.or(prep.config.clean_set.as_deref()) {
        Some(path) => {
            let mut clean = read_csv(path, prep.train.classes()).stage("load-clean-set")?;
            subtract_mean(&mut clean, &prep.mean).stage("load-clean-set")?;
            let config = TrainConfig {
                balance_classes: true,
                ..prep.config.baseline.clone()
            };
            train_binary_filters(&clean, &prep.train, &prep.spec, &config).stage("mine")?
        }
        None => mine(&prep.train, &network, cfg).stage("mine")?,
    };
    let val_split = mine(&prep.val, &network, cfg).stage("refine-validation")?.0;
    let kept: Vec<usize> = val_split.labeled.iter().map(|&(i, _)| i).collect();
    if kept.is_empty() {
        return Err(CliError::Config(format!(
            "refined validation set is empty; lower mining.threshold (now {})",
            cfg.confidence_threshold
        )));
    }
    let refined_val = prep.val.subset(&kept);
    checkpoint::save(&network, out.join("stage1.ckpt")).stage("save")?;
    split.save(out.join("mined_split.json")).stage("save")?;
    write_json(&out.join("mining_report.json"), &report)?;
    write_json(&out.join("refined_val.json"), &kept)?;
    if let Some(a) = &report.audit {
        info!(
            "mined {} of {} labels: correct {:.2}% incorrect {:.2}% unlabeled {:.2}%",
            split.labeled.len(),
            split.source_size,
            a.correct_pct,
            a.incorrect_pct,
            a.unlabeled_pct
        );
    }
    Ok(MiningOutcome {
        split,
        report,
        refined_val,
        network,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SslMetrics {
    pub test_accuracy: f64,
    pub best_val_accuracy: f64,
    pub sub_epochs_run: usize,
    pub warnings: Vec<String>,
}

/// Stage 2, continuing from the Stage 1 network on the persisted split.
pub fn run_ssl(prep: &Prepared, out: &Path) -> CliResult<(Network, SslMetrics)> {
    let init = load_checkpoint(&out.join("stage1.ckpt"))?;
    let split = MinedSplit::load(out.join("mined_split.json"))
        .map_err(|e| CliError::Config(format!("mined_split.json: {e} (run mine first)")))?;
    let kept: Vec<usize> = read_json(&out.join("refined_val.json"))?;
    if kept.iter().any(|&i| i >= prep.val.len()) {
        return Err(CliError::Config("refined_val.json does not match this configuration".into()));
    }
    let val = prep.val.subset(&kept);
    let mut config = prep.config.ssl.clone();
    config.dump_dir = Some(out.to_path_buf());
    let outcome = train_ssl(init, &prep.train, &split, &val, &config).stage("train-ssl")?;
    checkpoint::save(&outcome.network, out.join("ssl.ckpt")).stage("save")?;
    write_metrics_csv(&outcome.records, out.join("ssl_metrics.csv")).stage("save")?;
    let test_accuracy = evaluate(&outcome.network, &prep.test).stage("evaluate")?.accuracy;
    info!("two-stage: test accuracy {test_accuracy:.2}%");
    Ok((
        outcome.network,
        SslMetrics {
            test_accuracy,
            best_val_accuracy: outcome.best_val_accuracy,
            sub_epochs_run: outcome.records.len(),
            warnings: outcome.warnings,
        },
    ))
}

/// Evaluates a checkpoint on the prepared test set.
pub fn evaluate_checkpoint(prep: &Prepared, path: &Path) -> CliResult<Evaluation> {
    let network = load_checkpoint(path)?;
    if network.input_dim() != prep.test.dim() {
        return Err(CliError::Stage {
            stage: "evaluate",
            source: twostage::Error::format(
                path,
                format!(
                    "checkpoint takes {} features, test set has {}",
                    network.input_dim(),
                    prep.test.dim()
                ),
            ),
        });
    }
    evaluate(&network, &prep.test).stage("evaluate")
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub preset: String,
    pub dataset: String,
    /// Noise setting, e.g. `asy.p = 0.6`.
    pub column: String,
    pub seed: u64,
    pub noise: NoiseSpec,
    pub baseline: BaselineMetrics,
    pub improved: BaselineMetrics,
    pub two_stage: SslMetrics,
    pub noise_audit: NoiseAudit,
    pub mining: MiningReport,
    pub labeled_fraction: f64,
    pub refined_val_size: usize,
}

impl Summary {
    pub fn save(&self, path: &Path) -> CliResult<()> {
        write_json(path, self)
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        read_json(path)
    }
}

#[derive(Debug, Clone, Default, Serialize)]
struct Timings {
    stages: Vec<(String, f64)>,
}

/// Every stage in order, persisting each artifact; returns the summary.
pub fn run_pipeline(config: &ExperimentConfig) -> CliResult<Summary> {
    let out = config.output_dir.clone();
    let _lock = OutputLock::acquire(&out)?;
    let mut timings = Timings::default();
    let mut clock = Instant::now();
    let mut tick = |name: &str, timings: &mut Timings| {
        timings.stages.push((name.to_string(), clock.elapsed().as_secs_f64()));
        clock = Instant::now();
    };

    let prep = prepare(config)?;
    inject_noise(&prep, &out)?;
    tick("prepare", &mut timings);
    let (_, baseline) = run_baseline(&prep, false, &out)?;
    tick("baseline", &mut timings);
    let (_, improved) = run_baseline(&prep, true, &out)?;
    tick("improved-baseline", &mut timings);
    let mined = run_mining(&prep, &out, None)?;
    tick("mine", &mut timings);
    let (_, two_stage) = run_ssl(&prep, &out)?;
    tick("ssl", &mut timings);

    let summary = Summary {
        preset: config.name.clone(),
        dataset: config.dataset.family().to_string(),
        column: config.noise_column(),
        seed: config.seed,
        noise: config.noise.clone(),
        baseline,
        improved,
        two_stage,
        noise_audit: prep.noise_audit.clone(),
        labeled_fraction: mined.split.labeled_fraction(),
        mining: mined.report,
        refined_val_size: mined.refined_val.len(),
    };
    summary.save(&out.join("summary.json"))?;
    write_json(&out.join("timings.json"), &timings)?;
    Ok(summary)
}

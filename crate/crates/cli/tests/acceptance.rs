//! Acceptance criteria, one PASS/FAIL line each on stderr.
//!
//! Criteria 6-8 run with the normal test suite. Criteria 1-5 train on the
//! full MNIST set (about an hour on one core) and are ignored by default:
//!
//!     cargo test --release -p twostage-cli --test acceptance -- --ignored

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use proptest::prelude::*;
use proptest::test_runner::{Config as RunnerConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use statrs::distribution::{ContinuousCDF, Normal};
use twostage::data::{AugmentationSpec, Dataset};
use twostage::gradcheck::{check, kink_clearance, Objective, STEP, TOLERANCE};
use twostage::mining::{consistency_filter_probs, rank_and_select, MinedSplit, MiningConfig};
use twostage::nn::{softmax_rows, LayerSpec, MlpSpec, Network};
use twostage::noise::{apply_noise, build_transition, empirical_transition, NoiseKind, NoiseSpec, TransitionMatrix};
use twostage::ssl::{balance_classes, compose_batches, ssl_objective, ConsistencyTarget};
use twostage::Tensor;
use twostage_cli::pipeline::{run_mining, run_ssl};
use twostage_cli::{prepare, resolve_config, run_pipeline, Summary};

// criterion 1
const CLEAN_CE_MIN: f64 = 97.3;
const CLEAN_TWO_STAGE_MIN: f64 = 97.5;
const CLEAN_MAX_DROP: f64 = 0.5;
const CLEAN_MINUTES: f64 = 20.0;
// criterion 2
const ASYM_SEEDS: [u64; 3] = [1, 2, 3];
const ASYM_CE_BAND: (f64, f64) = (45.0, 62.0);
const ASYM_IMPROVED_GAIN: f64 = 15.0;
const ASYM_TWO_STAGE_MIN: f64 = 78.0;
const ASYM_TWO_STAGE_GAIN: f64 = 4.0;
const ASYM_MINUTES: f64 = 90.0;
// criterion 3
const LOW_NOISE_MIN: f64 = 97.0;
const LOW_NOISE_MINUTES: f64 = 40.0;
// criterion 4
const RETAINED_INCORRECT_MAX_PCT: f64 = 2.0;
// criterion 5
const FLOORS: [f64; 3] = [0.05, 0.10, 0.20];
const FRACTION_SPREAD_MAX: f64 = 3.0;
// criterion 6
const GRAD_TRIALS: u64 = 100;
const GRAD_SECONDS: f64 = 120.0;
// criterion 7
const NOISE_PAIRS: usize = 20;
const NOISE_LABELS: usize = 10_000;
const NOISE_SIGMAS: f64 = 3.0;

/// Writes straight to stderr so the line shows even when output is captured.
fn verdict(criterion: u32, title: &str, checks: &[(String, bool)]) -> bool {
    let pass = checks.iter().all(|(_, ok)| *ok);
    let mut err = std::io::stderr().lock();
    let _ = writeln!(err, "criterion {criterion} {}: {title}", if pass { "PASS" } else { "FAIL" });
    for (what, ok) in checks {
        let _ = writeln!(err, "    [{}] {what}", if *ok { "ok" } else { "fail" });
    }
    pass
}

fn data_dir() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../data/mnist")
}

fn run_dir(key: &str) -> PathBuf {
    Path::new(env!("CARGO_TARGET_TMPDIR")).join("acceptance").join(key)
}

fn overrides(dir: &Path, extra: &[String]) -> Vec<String> {
    let mut o = vec![
        format!("dataset.dir={}", data_dir().display()),
        format!("output_path={}", dir.display()),
    ];
    o.extend_from_slice(extra);
    o
}

/// Full pipeline runs shared between criteria: (summary, output dir, minutes).
static RUNS: Mutex<BTreeMap<String, (Summary, PathBuf, f64)>> = Mutex::new(BTreeMap::new());

fn pipeline(preset: &str, seed: u64) -> (Summary, PathBuf, f64) {
    let key = format!("{preset}-seed{seed}");
    let mut runs = RUNS.lock().unwrap_or_else(|e| e.into_inner());
    if let Some(hit) = runs.get(&key) {
        return hit.clone();
    }
    let dir = run_dir(&key);
    let _ = std::fs::remove_dir_all(&dir);
    let config = resolve_config(Some(preset), None, &overrides(&dir, &[format!("seed={seed}")])).unwrap();
    let start = Instant::now();
    let summary = run_pipeline(&config).unwrap();
    let minutes = start.elapsed().as_secs_f64() / 60.0;
    let entry = (summary, dir, minutes);
    runs.insert(key, entry.clone());
    entry
}

fn median(v: &mut [f64]) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

#[test]
#[ignore = "trains on full MNIST"]
fn criterion_1_clean_mnist() {
    let (s, _, minutes) = pipeline("mnist-clean", 1);
    let (ce, two) = (s.baseline.test_accuracy, s.two_stage.test_accuracy);
    let ok = verdict(
        1,
        "clean MNIST",
        &[
            (format!("plain CE {ce:.2} >= {CLEAN_CE_MIN}"), ce >= CLEAN_CE_MIN),
            (format!("two-stage {two:.2} >= {CLEAN_TWO_STAGE_MIN}"), two >= CLEAN_TWO_STAGE_MIN),
            (format!("two-stage {two:.2} >= plain - {CLEAN_MAX_DROP}"), two >= ce - CLEAN_MAX_DROP),
            (format!("runtime {minutes:.1} min <= {CLEAN_MINUTES}"), minutes <= CLEAN_MINUTES),
        ],
    );
    assert!(ok);
}

#[test]
#[ignore = "trains on full MNIST, three seeds"]
fn criterion_2_asymmetric_sixty_percent() {
    let runs: Vec<_> = ASYM_SEEDS.iter().map(|&seed| pipeline("mnist-asym-0.6", seed)).collect();
    let pick = |f: fn(&Summary) -> f64| median(&mut runs.iter().map(|(s, _, _)| f(s)).collect::<Vec<_>>());
    let ce = pick(|s| s.baseline.test_accuracy);
    let improved = pick(|s| s.improved.test_accuracy);
    let two = pick(|s| s.two_stage.test_accuracy);
    let slowest = runs.iter().map(|r| r.2).fold(0.0, f64::max);
    let seeds: Vec<String> = runs
        .iter()
        .map(|(s, _, _)| format!("{:.2}/{:.2}/{:.2}", s.baseline.test_accuracy, s.improved.test_accuracy, s.two_stage.test_accuracy))
        .collect();
    let ok = verdict(
        2,
        "MNIST asymmetric p = 0.6, median of 3 seeds",
        &[
            (format!("per seed CE/improved/two-stage: {}", seeds.join(", ")), true),
            (format!("plain CE {ce:.2} in [{}, {}]", ASYM_CE_BAND.0, ASYM_CE_BAND.1), (ASYM_CE_BAND.0..=ASYM_CE_BAND.1).contains(&ce)),
            (format!("improved {improved:.2} >= plain + {ASYM_IMPROVED_GAIN}"), improved >= ce + ASYM_IMPROVED_GAIN),
            (format!("two-stage {two:.2} >= {ASYM_TWO_STAGE_MIN}"), two >= ASYM_TWO_STAGE_MIN),
            (format!("two-stage {two:.2} >= improved + {ASYM_TWO_STAGE_GAIN}"), two >= improved + ASYM_TWO_STAGE_GAIN),
            (format!("slowest seed {slowest:.1} min <= {ASYM_MINUTES}"), slowest <= ASYM_MINUTES),
        ],
    );
    assert!(ok);
}

#[test]
#[ignore = "trains on full MNIST"]
fn criterion_3_twenty_percent_noise() {
    let mut checks = Vec::new();
    for preset in ["mnist-sym-0.2", "mnist-asym-0.2"] {
        let (s, _, minutes) = pipeline(preset, 1);
        let two = s.two_stage.test_accuracy;
        checks.push((format!("{preset}: two-stage {two:.2} >= {LOW_NOISE_MIN}"), two >= LOW_NOISE_MIN));
        checks.push((format!("{preset}: runtime {minutes:.1} min <= {LOW_NOISE_MINUTES}"), minutes <= LOW_NOISE_MINUTES));
    }
    assert!(verdict(3, "MNIST symmetric and asymmetric p = 0.2", &checks));
}

#[test]
#[ignore = "trains on full MNIST"]
fn criterion_4_stage_one_purity() {
    let (s, _, _) = pipeline("mnist-asym-0.6", ASYM_SEEDS[0]);
    let audit = s.mining.audit.expect("synthetic noise keeps true labels");
    let wrong = audit.counts.incorrect_among_labeled_pct();
    let sum = audit.correct_pct + audit.incorrect_pct + audit.unlabeled_pct;
    let ok = verdict(
        4,
        "stage-1 purity on MNIST asymmetric p = 0.6",
        &[
            (
                format!(
                    "audit correct/incorrect/unlabeled {:.2}/{:.2}/{:.2}",
                    audit.correct_pct, audit.incorrect_pct, audit.unlabeled_pct
                ),
                true,
            ),
            (format!("incorrect among retained {wrong:.3}% <= {RETAINED_INCORRECT_MAX_PCT}%"), wrong <= RETAINED_INCORRECT_MAX_PCT),
            (format!("triple sums to {sum:.6}"), (sum - 100.0).abs() < 1e-6),
        ],
    );
    assert!(ok);
}

#[test]
#[ignore = "trains on full MNIST"]
fn criterion_5_labeled_fraction_robustness() {
    let (_, source, _) = pipeline("mnist-asym-0.6", ASYM_SEEDS[0]);
    let mut results = Vec::new();
    for floor in FLOORS {
        let dir = run_dir(&format!("floor-{floor}"));
        let _ = std::fs::remove_dir_all(&dir);
        std::fs::create_dir_all(&dir).unwrap();
        for ckpt in ["baseline.ckpt", "improved.ckpt"] {
            std::fs::copy(source.join(ckpt), dir.join(ckpt)).unwrap();
        }
        let extra = [
            format!("seed={}", ASYM_SEEDS[0]),
            "mining.threshold=1.0".to_string(),
            format!("mining.floor={floor}"),
        ];
        let config = resolve_config(Some("mnist-asym-0.6"), None, &overrides(&dir, &extra)).unwrap();
        let prep = prepare(&config).unwrap();
        let mined = run_mining(&prep, &dir, None).unwrap();
        let (_, ssl) = run_ssl(&prep, &dir).unwrap();
        results.push((100.0 * mined.split.labeled_fraction(), ssl.test_accuracy));
    }
    let accs: Vec<f64> = results.iter().map(|r| r.1).collect();
    let spread = accs.iter().copied().fold(f64::MIN, f64::max) - accs.iter().copied().fold(f64::MAX, f64::min);
    let mut checks: Vec<(String, bool)> = results
        .iter()
        .map(|(frac, acc)| (format!("labeled {frac:.2}% -> two-stage {acc:.2}"), true))
        .collect();
    checks.push((format!("spread {spread:.2} < {FRACTION_SPREAD_MAX}"), spread < FRACTION_SPREAD_MAX));
    assert!(verdict(5, "labeled-fraction robustness", &checks));
}

fn normal_tensor(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor {
    Tensor::matrix(rows, cols, (0..rows * cols).map(|_| rng.sample(StandardNormal)).collect()).unwrap()
}

fn gradient_trial(t: u64, attempt: u64) -> (Network, Tensor, Objective) {
    let mut rng = ChaCha8Rng::seed_from_u64(5000 + t + 1_000_000 * attempt);
    let (d, h, c, n) = (5, 7, 3, 4);
    let x = normal_tensor(n, d, &mut rng);
    let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..c)).collect();
    let mlp = |keep, stddev| {
        vec![
            LayerSpec::GaussianNoise { stddev },
            LayerSpec::Dense { inputs: d, outputs: h },
            LayerSpec::Relu,
            LayerSpec::Dropout { keep },
            LayerSpec::Dense { inputs: h, outputs: c },
            LayerSpec::Softmax,
        ]
    };
    let (layers, objective) = match t % 5 {
        0 => (
            vec![LayerSpec::Dense { inputs: d, outputs: h }, LayerSpec::Relu, LayerSpec::Dense { inputs: h, outputs: c }],
            Objective::Linear(normal_tensor(n, c, &mut rng)),
        ),
        1 => (mlp(0.7, 0.2), Objective::Linear(normal_tensor(n, c, &mut rng))),
        2 => (mlp(0.8, 0.1), Objective::CrossEntropy(labels)),
        3 => (mlp(0.6, 0.3), Objective::Consistency),
        _ => (mlp(0.5, 0.15), Objective::Combined { labels: labels[..n / 2].to_vec(), alpha: 3.0 }),
    };
    (Network::init(layers, &mut rng).unwrap(), x, objective)
}

#[test]
fn criterion_6_gradient_checks() {
    let start = Instant::now();
    let names = ["layers", "softmax head", "cross-entropy", "consistency", "combined objective"];
    let mut worst = [0.0f64; 5];
    let mut redrawn = 0;
    for t in 0..GRAD_TRIALS {
        // Central differences are undefined across a ReLU kink; redraw such points.
        let (net, x, objective) = (0..)
            .map(|attempt| gradient_trial(t, attempt))
            .find(|(net, x, _)| kink_clearance(net, x, t, STEP).unwrap() > 1.0 || { redrawn += 1; false })
            .unwrap();
        let r = check(&net, &x, &objective, t, STEP).unwrap();
        let k = (t % 5) as usize;
        worst[k] = worst[k].max(r.relative_error);
    }
    let seconds = start.elapsed().as_secs_f64();
    let mut checks: Vec<(String, bool)> = names
        .iter()
        .zip(worst)
        .map(|(name, w)| (format!("{name}: worst relative error {w:.2e} <= {TOLERANCE:e}"), w <= TOLERANCE))
        .collect();
    checks.push((format!("{GRAD_TRIALS} trials ({redrawn} redrawn near a ReLU kink) in {seconds:.1} s <= {GRAD_SECONDS}"), seconds <= GRAD_SECONDS));
    assert!(verdict(6, "finite-difference gradient checks", &checks));
}

fn random_noise_spec(rng: &mut ChaCha8Rng) -> (NoiseSpec, usize) {
    let classes = rng.gen_range(2..=10);
    let p = rng.gen_range(0.0..=1.0);
    if rng.gen_bool(0.5) {
        return (NoiseSpec::symmetric(p), classes);
    }
    let mut pairs = Vec::new();
    for src in 0..classes {
        if rng.gen_bool(0.5) {
            pairs.push((src, rng.gen_range(0..classes)));
        }
    }
    (NoiseSpec { kind: NoiseKind::Asymmetric, p, pairs }, classes)
}

fn balanced(classes: usize) -> Dataset {
    let labels = (0..NOISE_LABELS).map(|i| i % classes).collect();
    Dataset::new("balanced", Tensor::zeros(NOISE_LABELS, 1), labels, classes).unwrap()
}

/// z-scores of cells with nonzero variance, and the number of
/// zero-probability cells that nevertheless received labels.
fn flip_z_scores(t: &TransitionMatrix, seed: u64) -> (Vec<f64>, usize) {
    let ds = balanced(t.classes());
    let (noisy, _) = apply_noise(&ds, t, seed).unwrap();
    let (counts, totals) = empirical_transition(noisy.labels(), ds.labels(), t.classes()).unwrap();
    let (mut z, mut impossible) = (Vec::new(), 0);
    for a in 0..t.classes() {
        let n = totals[a] as f64;
        for b in 0..t.classes() {
            let p = t.get(a, b);
            let sigma = (n * p * (1.0 - p)).sqrt();
            let dev = (counts[a][b] as f64 - n * p).abs();
            if sigma > 0.0 {
                z.push(dev / sigma);
            } else if dev > 0.5 {
                impossible += 1;
            }
        }
    }
    (z, impossible)
}

#[test]
fn criterion_7_noise_statistics() {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let (mut z, mut impossible) = (Vec::new(), 0);
    for _ in 0..NOISE_PAIRS {
        let (spec, classes) = random_noise_spec(&mut rng);
        let seed: u64 = rng.gen();
        let (cells, bad) = flip_z_scores(&build_transition(&spec, classes).unwrap(), seed);
        z.extend(cells);
        impossible += bad;
    }
    // Sidak: per-cell level giving the whole family a two-sided 3 sigma false-alarm rate.
    let unit = Normal::new(0.0, 1.0).unwrap();
    let family_alpha = 2.0 * (1.0 - unit.cdf(NOISE_SIGMAS));
    let limit = unit.inverse_cdf(1.0 - (1.0 - (1.0 - family_alpha).powf(1.0 / z.len() as f64)) / 2.0);
    let worst = z.iter().copied().fold(0.0, f64::max);
    let beyond = z.iter().filter(|&&v| v > NOISE_SIGMAS).count();
    let identity_flips: usize = (0..5)
        .map(|seed| apply_noise(&balanced(10), &TransitionMatrix::identity(10), seed).unwrap().1.counts.incorrect)
        .sum();
    let ok = verdict(
        7,
        "noise-model statistics",
        &[
            (
                format!(
                    "{NOISE_PAIRS} pairs, {} cells: worst {worst:.2} sigma <= family-wise limit {limit:.2} ({beyond} single cells beyond {NOISE_SIGMAS})",
                    z.len()
                ),
                worst <= limit,
            ),
            (format!("{impossible} labels in zero-probability cells"), impossible == 0),
            (format!("identity matrix flips {identity_flips}"), identity_flips == 0),
        ],
    );
    assert!(ok);
}

fn property<S: Strategy>(name: &str, strategy: S, test: impl Fn(S::Value) -> Result<(), TestCaseError>) -> (String, bool) {
    let mut runner = TestRunner::new(RunnerConfig { cases: 128, ..RunnerConfig::default() });
    match runner.run(&strategy, test) {
        Ok(()) => (format!("{name} (128 cases)"), true),
        Err(e) => (format!("{name}: {e}"), false),
    }
}

fn mine_probs(probs: &Tensor, labels: &[usize], classes: usize, cfg: &MiningConfig) -> MinedSplit {
    let f = consistency_filter_probs(probs, labels, classes).unwrap();
    let kept = f.survivors.iter().zip(&f.class_sizes).flat_map(|(s, &n)| rank_and_select(s, n, cfg)).collect();
    MinedSplit::from_kept(kept, labels)
}

#[test]
fn criterion_8_invariants() {
    let mut checks = Vec::new();

    checks.push(property(
        "batches carry exactly N/2 labeled rows",
        (prop::collection::vec(0usize..50, 1..80), prop::collection::vec(50usize..90, 1..30), 1usize..16, any::<u64>()),
        |(pool, unlabeled, half, seed)| {
            let labels: Vec<usize> = (0..90).map(|i| i % 4).collect();
            let batches = compose_batches(&pool, &labels, &unlabeled, 2 * half, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            for b in &batches {
                prop_assert_eq!(b.labeled.len(), half);
                prop_assert_eq!(b.len(), 2 * half);
            }
            Ok(())
        },
    ));

    let mining_case = (2usize..5, 4usize..40).prop_flat_map(|(c, n)| {
        (
            prop::collection::vec(-4.0f64..4.0, n * c).prop_map(move |d| softmax_rows(&Tensor::matrix(n, c, d).unwrap())),
            prop::collection::vec(0..c, n),
            Just(c),
            0.01f64..=1.0,
            0.01f64..0.99,
        )
    });
    checks.push(property(
        "mining partitions the indices and never changes a retained label",
        mining_case,
        |(probs, labels, classes, threshold, floor)| {
            let split = mine_probs(&probs, &labels, classes, &MiningConfig { confidence_threshold: threshold, floor_fraction: floor });
            let mut all: Vec<usize> = split.labeled.iter().map(|l| l.0).chain(split.unlabeled.iter().copied()).collect();
            all.sort_unstable();
            prop_assert_eq!(all, (0..labels.len()).collect::<Vec<_>>());
            prop_assert!(split.labeled.iter().all(|&(i, y)| y == labels[i]));
            Ok(())
        },
    ));

    checks.push(property(
        "class balancing gives every present class the same multiplicity",
        (prop::collection::vec(0usize..5, 1..60), any::<u64>()),
        |(labels, seed)| {
            let labeled: Vec<(usize, usize)> = labels.iter().copied().enumerate().collect();
            let pool = balance_classes(&labeled, 5, &mut ChaCha8Rng::seed_from_u64(seed)).unwrap();
            let mut per = [0usize; 5];
            pool.indices.iter().for_each(|&i| per[labels[i]] += 1);
            let top = *per.iter().max().unwrap();
            prop_assert!(per.iter().all(|&k| k == 0 || k == top));
            Ok(())
        },
    ));

    checks.push(property(
        "unsupervised loss is zero with noise, dropout and augmentation off",
        (prop::collection::vec(-3.0f64..3.0, 24), any::<u64>()),
        |(data, seed)| {
            let spec = MlpSpec { inputs: 6, hidden: vec![8], classes: 3, dropout_keep: 1.0, input_noise: 0.0 };
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut net = Network::init(spec.layers(), &mut rng).unwrap();
            let x = Tensor::matrix(4, 6, data).unwrap();
            let b = ssl_objective(&mut net, &x, &[0, 1], 2.0, &AugmentationSpec::default(), ConsistencyTarget::TwinPass, &mut rng).unwrap();
            prop_assert_eq!(b.unsupervised, 0.0);
            Ok(())
        },
    ));

    let tmp = tempfile::tempdir().unwrap();
    let mut runner = TestRunner::new(RunnerConfig { cases: 4, ..RunnerConfig::default() });
    let rerun = runner.run(&(1u64..1000), |seed| {
        let mut bytes = Vec::new();
        for copy in ["a", "b"] {
            let dir = tmp.path().join(format!("{seed}-{copy}"));
            let o = [format!("seed={seed}"), format!("output_path={}", dir.display())];
            run_pipeline(&resolve_config(Some("synthetic-smoke"), None, &o).unwrap()).unwrap();
            let files: Vec<Vec<u8>> = ["summary.json", "ssl_metrics.csv", "mined_split.json", "ssl.ckpt"]
                .iter()
                .map(|f| std::fs::read(dir.join(f)).unwrap())
                .collect();
            bytes.push(files);
        }
        prop_assert!(bytes[0] == bytes[1]);
        Ok(())
    });
    checks.push(match rerun {
        Ok(()) => ("reruns with one seed are byte-identical (4 seeds)".into(), true),
        Err(e) => (format!("reruns differ: {e}"), false),
    });

    assert!(verdict(8, "invariants", &checks));
}


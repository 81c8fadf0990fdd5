//! Label-corruption processes and audit statistics.
//!
//! `A →p B` means an example of true class A receives label B with
//! probability p. Symmetric noise spreads p uniformly over the other C−1
//! classes. Both are expressed as a row-stochastic [`TransitionMatrix`].

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::data::Dataset;
use crate::error::{Error, Result};

/// Row sums must match 1 within this tolerance.
pub const ROW_SUM_TOLERANCE: f64 = 1e-12;

/// MNIST flip paths: 2→7, 3→8, 5→6, 7→1.
pub const MNIST_PAIRS: [(usize, usize); 4] = [(2, 7), (3, 8), (5, 6), (7, 1)];

/// CIFAR-10 flip paths: truck→automobile, bird→airplane, deer→horse, cat↔dog.
pub const CIFAR10_PAIRS: [(usize, usize); 5] = [(9, 1), (2, 0), (4, 7), (3, 5), (5, 3)];

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    Symmetric,
    Asymmetric,
}

impl std::str::FromStr for NoiseKind {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "symmetric" | "sym" => Ok(NoiseKind::Symmetric),
            "asymmetric" | "asym" => Ok(NoiseKind::Asymmetric),
            other => Err(Error::Config(format!("unknown noise kind '{other}'"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub p: f64,
    /// (source, target) flips; only used by asymmetric noise.
    #[serde(default)]
    pub pairs: Vec<(usize, usize)>,
}

impl NoiseSpec {
    pub fn clean() -> Self {
        NoiseSpec {
            kind: NoiseKind::Asymmetric,
            p: 0.0,
            pairs: Vec::new(),
        }
    }

    pub fn symmetric(p: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Symmetric,
            p,
            pairs: Vec::new(),
        }
    }

    pub fn mnist_asymmetric(p: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Asymmetric,
            p,
            pairs: MNIST_PAIRS.to_vec(),
        }
    }

    pub fn cifar10_asymmetric(p: f64) -> Self {
        NoiseSpec {
            kind: NoiseKind::Asymmetric,
            p,
            pairs: CIFAR10_PAIRS.to_vec(),
        }
    }
}

/// `entries[a][b]` is the probability that true class `a` is labeled `b`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionMatrix {
    classes: usize,
    entries: Vec<f64>,
}

impl TransitionMatrix {
    pub fn identity(classes: usize) -> Self {
        let mut entries = vec![0.0; classes * classes];
        for c in 0..classes {
            entries[c * classes + c] = 1.0;
        }
        TransitionMatrix { classes, entries }
    }

    /// Validates entries in [0, 1] and unit row sums.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let classes = rows.len();
        let mut entries = Vec::with_capacity(classes * classes);
        for (a, row) in rows.iter().enumerate() {
            if row.len() != classes {
                return Err(Error::Dimension(format!("row {a} has {} entries, expected {classes}", row.len())));
            }
            if row.iter().any(|v| !(0.0..=1.0).contains(v)) {
                return Err(Error::Argument(format!("row {a} has an entry outside [0, 1]")));
            }
            let sum: f64 = row.iter().sum();
            if (sum - 1.0).abs() > ROW_SUM_TOLERANCE {
                return Err(Error::Argument(format!("row {a} sums to {sum}")));
            }
            entries.extend_from_slice(row);
        }
        Ok(TransitionMatrix { classes, entries })
    }

    pub fn classes(&self) -> usize {
        self.classes
    }

    pub fn get(&self, from: usize, to: usize) -> f64 {
        self.entries[from * self.classes + to]
    }

    pub fn row(&self, from: usize) -> &[f64] {
        &self.entries[from * self.classes..(from + 1) * self.classes]
    }

    pub fn rows(&self) -> Vec<Vec<f64>> {
        (0..self.classes).map(|a| self.row(a).to_vec()).collect()
    }

    pub fn is_identity(&self) -> bool {
        (0..self.classes).all(|a| self.get(a, a) == 1.0)
    }

    /// Draws a noisy label for true class `from` with one uniform variate.
    fn sample<R: Rng + ?Sized>(&self, from: usize, rng: &mut R) -> usize {
        let u: f64 = rng.gen();
        let mut acc = 0.0;
        let row = self.row(from);
        for (to, &p) in row.iter().enumerate() {
            acc += p;
            if u < acc {
                return to;
            }
        }
        // u landed in the rounding gap above the last partial sum
        row.iter().rposition(|&p| p > 0.0).unwrap_or(from)
    }
}

/// Builds the transition matrix of a noise process over `classes` classes.
pub fn build_transition(spec: &NoiseSpec, classes: usize) -> Result<TransitionMatrix> {
    if !(0.0..=1.0).contains(&spec.p) {
        return Err(Error::Argument(format!("noise rate {} outside [0, 1]", spec.p)));
    }
    if classes == 0 {
        return Err(Error::Argument("need at least one class".into()));
    }
    let mut t = TransitionMatrix::identity(classes);
    let n = classes;
    match spec.kind {
        NoiseKind::Symmetric => {
            if n == 1 {
                return Ok(t);
            }
            let off = spec.p / (n - 1) as f64;
            for a in 0..n {
                for b in 0..n {
                    t.entries[a * n + b] = if a == b { 1.0 - spec.p } else { off };
                }
            }
        }
        NoiseKind::Asymmetric => {
            let mut seen = vec![false; n];
            for &(src, dst) in &spec.pairs {
                if src >= n || dst >= n {
                    return Err(Error::Argument(format!("pair {src}->{dst} outside {n} classes")));
                }
                if std::mem::replace(&mut seen[src], true) {
                    return Err(Error::Argument(format!("class {src} appears twice as a source")));
                }
                if src == dst {
                    continue;
                }
                t.entries[src * n + src] = 1.0 - spec.p;
                t.entries[src * n + dst] = spec.p;
            }
        }
    }
    Ok(t)
}

/// Correct / incorrect / unlabeled counts over a whole set.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct AuditCounts {
    pub correct: usize,
    pub incorrect: usize,
    pub unlabeled: usize,
}

impl AuditCounts {
    pub fn total(&self) -> usize {
        self.correct + self.incorrect + self.unlabeled
    }

    fn pct(&self, part: usize) -> f64 {
        match self.total() {
            0 => 0.0,
            t => 100.0 * part as f64 / t as f64,
        }
    }

    pub fn correct_pct(&self) -> f64 {
        self.pct(self.correct)
    }

    pub fn incorrect_pct(&self) -> f64 {
        self.pct(self.incorrect)
    }

    pub fn unlabeled_pct(&self) -> f64 {
        self.pct(self.unlabeled)
    }

    /// Share of wrong labels among the labeled examples, in percent.
    pub fn incorrect_among_labeled_pct(&self) -> f64 {
        match self.correct + self.incorrect {
            0 => 0.0,
            l => 100.0 * self.incorrect as f64 / l as f64,
        }
    }
}

/// Label statistics for one true class.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ClassAudit {
    pub class: usize,
    pub kept: usize,
    pub flipped: usize,
    pub unlabeled: usize,
}

/// Audit of a label vector against ground truth; serializes as
/// `{correct_pct, incorrect_pct, unlabeled_pct, per_class: [...]}` plus raw counts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseAudit {
    pub correct_pct: f64,
    pub incorrect_pct: f64,
    pub unlabeled_pct: f64,
    pub counts: AuditCounts,
    pub per_class: Vec<ClassAudit>,
}

impl NoiseAudit {
    /// Fraction (not percent) of correct labels among labeled examples.
    pub fn correct_fraction(&self) -> f64 {
        1.0 - self.incorrect_fraction()
    }

    pub fn incorrect_fraction(&self) -> f64 {
        self.counts.incorrect_among_labeled_pct() / 100.0
    }
}

/// Tallies labeled-and-matching, labeled-and-mismatching, and unlabeled
/// examples. `labeled` of `None` means everything is labeled.
pub fn audit_stats(noisy: &[usize], truth: &[usize], labeled: Option<&[bool]>) -> Result<AuditCounts> {
    if noisy.len() != truth.len() || labeled.is_some_and(|m| m.len() != noisy.len()) {
        return Err(Error::Dimension("audit vectors differ in length".into()));
    }
    let mut counts = AuditCounts::default();
    for (i, (&y, &t)) in noisy.iter().zip(truth).enumerate() {
        if labeled.is_some_and(|m| !m[i]) {
            counts.unlabeled += 1;
        } else if y == t {
            counts.correct += 1;
        } else {
            counts.incorrect += 1;
        }
    }
    Ok(counts)
}

/// Full audit with a per-true-class breakdown.
pub fn audit(noisy: &[usize], truth: &[usize], labeled: Option<&[bool]>, classes: usize) -> Result<NoiseAudit> {
    let counts = audit_stats(noisy, truth, labeled)?;
    let mut per_class: Vec<ClassAudit> = (0..classes)
        .map(|class| ClassAudit {
            class,
            kept: 0,
            flipped: 0,
            unlabeled: 0,
        })
        .collect();
    for (i, (&y, &t)) in noisy.iter().zip(truth).enumerate() {
        let entry = per_class
            .get_mut(t)
            .ok_or_else(|| Error::Argument(format!("true label {t} outside [0, {classes})")))?;
        if labeled.is_some_and(|m| !m[i]) {
            entry.unlabeled += 1;
        } else if y == t {
            entry.kept += 1;
        } else {
            entry.flipped += 1;
        }
    }
    Ok(NoiseAudit {
        correct_pct: counts.correct_pct(),
        incorrect_pct: counts.incorrect_pct(),
        unlabeled_pct: counts.unlabeled_pct(),
        counts,
        per_class,
    })
}

/// Observed label frequencies per true class: `(counts[a][b], n_a)` with
/// `counts[a][b]` the number of class-`a` examples labeled `b`.
pub fn empirical_transition(noisy: &[usize], truth: &[usize], classes: usize) -> Result<(Vec<Vec<usize>>, Vec<usize>)> {
    if noisy.len() != truth.len() {
        return Err(Error::Dimension("label vectors differ in length".into()));
    }
    let mut counts = vec![vec![0usize; classes]; classes];
    let mut totals = vec![0usize; classes];
    for (&y, &t) in noisy.iter().zip(truth) {
        if y >= classes || t >= classes {
            return Err(Error::Argument(format!("label outside [0, {classes})")));
        }
        counts[t][y] += 1;
        totals[t] += 1;
    }
    Ok((counts, totals))
}

/// Resamples every label from its row of `t`. The labels going in are kept
/// as the dataset's ground truth (unless it already carries one).
pub fn apply_noise(dataset: &Dataset, t: &TransitionMatrix, seed: u64) -> Result<(Dataset, NoiseAudit)> {
    if t.classes() != dataset.classes() {
        return Err(Error::Dimension(format!(
            "transition matrix over {} classes, dataset has {}",
            t.classes(),
            dataset.classes()
        )));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let noisy: Vec<usize> = dataset.labels().iter().map(|&y| t.sample(y, &mut rng)).collect();
    let mut out = dataset.clone();
    out.relabel(noisy)?;
    let truth = out.audit_true_labels().expect("relabel stores ground truth");
    let report = audit(out.labels(), truth, None, out.classes())?;
    Ok((out, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::Tensor;

    fn balanced(classes: usize, per_class: usize) -> Dataset {
        let n = classes * per_class;
        let labels = (0..n).map(|i| i % classes).collect();
        Dataset::new("b", Tensor::zeros(n, 1), labels, classes).unwrap()
    }

    fn rows_are_stochastic(t: &TransitionMatrix) -> bool {
        (0..t.classes()).all(|a| (t.row(a).iter().sum::<f64>() - 1.0).abs() <= ROW_SUM_TOLERANCE)
    }

    #[test]
    fn mnist_asymmetric_rows() {
        let t = build_transition(&NoiseSpec::mnist_asymmetric(0.6), 10).unwrap();
        assert_eq!(t.get(2, 7), 0.6);
        assert_eq!(t.get(2, 2), 0.4);
        assert_eq!(t.get(7, 1), 0.6);
        assert_eq!(t.row(0), TransitionMatrix::identity(10).row(0));
        assert!(rows_are_stochastic(&t));
    }

    #[test]
    fn zero_rate_is_identity() {
        for spec in [NoiseSpec::mnist_asymmetric(0.0), NoiseSpec::symmetric(0.0)] {
            assert_eq!(build_transition(&spec, 10).unwrap(), TransitionMatrix::identity(10));
        }
    }

    #[test]
    fn cifar_asymmetric_has_five_noisy_rows() {
        let t = build_transition(&NoiseSpec::cifar10_asymmetric(0.6), 10).unwrap();
        let noisy_rows = (0..10).filter(|&a| t.get(a, a) < 1.0).count();
        assert_eq!(noisy_rows, 5);
        assert_eq!(t.get(3, 5), 0.6);
        assert_eq!(t.get(5, 3), 0.6);
        assert_eq!(t.get(9, 1), 0.6);
    }

    #[test]
    fn symmetric_spreads_mass() {
        let t = build_transition(&NoiseSpec::symmetric(0.2), 5).unwrap();
        assert!((t.get(0, 0) - 0.8).abs() < 1e-15);
        assert!((t.get(0, 3) - 0.05).abs() < 1e-15);
        assert!(rows_are_stochastic(&t));
    }

    #[test]
    fn duplicate_sources_are_rejected() {
        let spec = NoiseSpec {
            kind: NoiseKind::Asymmetric,
            p: 0.3,
            pairs: vec![(1, 2), (1, 3)],
        };
        assert!(matches!(build_transition(&spec, 4), Err(Error::Argument(_))));
    }

    #[test]
    fn identity_noise_flips_nothing() {
        let d = balanced(10, 30);
        let (noisy, audit) = apply_noise(&d, &TransitionMatrix::identity(10), 4).unwrap();
        assert_eq!(noisy.labels(), d.labels());
        assert_eq!(audit.correct_fraction(), 1.0);
        assert_eq!(audit.counts.incorrect, 0);
    }

    #[test]
    fn same_seed_same_labels() {
        let d = balanced(10, 100);
        let t = build_transition(&NoiseSpec::symmetric(0.4), 10).unwrap();
        let (a, _) = apply_noise(&d, &t, 8).unwrap();
        let (b, _) = apply_noise(&d, &t, 8).unwrap();
        assert_eq!(a.labels(), b.labels());
        assert_eq!(a.audit_true_labels().unwrap(), d.labels());
    }

    #[test]
    fn cifar_sixty_percent_flips_thirty_percent_overall() {
        // 0.6 × 5/10 = 30% expected; 3σ of Binomial(n, 0.3)
        let d = balanced(10, 2000);
        let t = build_transition(&NoiseSpec::cifar10_asymmetric(0.6), 10).unwrap();
        let (_, audit) = apply_noise(&d, &t, 21).unwrap();
        let n = d.len() as f64;
        let sigma = (0.3 * 0.7 / n).sqrt();
        assert!((audit.incorrect_fraction() - 0.3).abs() < 3.0 * sigma, "{}", audit.incorrect_fraction());
    }

    #[test]
    fn audit_counts_by_hand() {
        // 10 examples, 3 labeled of which 1 is wrong
        let truth = [0, 1, 2, 3, 4, 5, 6, 7, 8, 9];
        let noisy = [0, 1, 0, 3, 4, 5, 6, 7, 8, 9];
        let mask = [true, true, true, false, false, false, false, false, false, false];
        let c = audit_stats(&noisy, &truth, Some(&mask)).unwrap();
        assert_eq!((c.correct_pct(), c.incorrect_pct(), c.unlabeled_pct()), (20.0, 10.0, 70.0));
        let all = audit_stats(&truth, &truth, None).unwrap();
        assert_eq!((all.correct_pct(), all.incorrect_pct(), all.unlabeled_pct()), (100.0, 0.0, 0.0));
    }

    #[test]
    fn audit_json_shape() {
        let a = audit(&[0, 1], &[0, 0], None, 2).unwrap();
        let v = serde_json::to_value(&a).unwrap();
        for key in ["correct_pct", "incorrect_pct", "unlabeled_pct", "per_class"] {
            assert!(v.get(key).is_some(), "missing {key}");
        }
        assert_eq!(a.per_class[0].flipped, 1);
    }
}

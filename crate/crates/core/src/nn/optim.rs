use serde::{Deserialize, Serialize};

use super::network::Network;
use crate::error::{Error, Result};

pub const ADAGRAD_EPS: f64 = 1e-8;
pub const ADAM_EPS: f64 = 1e-8;
pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Algorithm {
    SgdMomentum,
    Adagrad,
    Adam,
}

impl std::str::FromStr for Algorithm {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sgd-momentum" | "sgd" => Ok(Algorithm::SgdMomentum),
            "adagrad" => Ok(Algorithm::Adagrad),
            "adam" => Ok(Algorithm::Adam),
            other => Err(Error::Config(format!("unknown optimizer '{other}'"))),
        }
    }
}

/// Optimizer hyperparameters plus the plateau schedule that drives them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct OptimizerConfig {
    pub algorithm: Algorithm,
    pub learning_rate: f64,
    pub momentum: f64,
    pub min_learning_rate: f64,
    /// Entries without improvement before the rate is multiplied by `decay`.
    pub patience: usize,
    /// Entries without improvement before training stops.
    pub stop_patience: usize,
    pub decay: f64,
}

impl Default for OptimizerConfig {
    /// AdaGrad at 0.1, halving after 10 flat epochs, floor 1e-7.
    fn default() -> Self {
        OptimizerConfig {
            algorithm: Algorithm::Adagrad,
            learning_rate: 0.1,
            momentum: 0.9,
            min_learning_rate: 1e-7,
            patience: 10,
            stop_patience: 20,
            decay: 0.5,
        }
    }
}

impl OptimizerConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.min_learning_rate >= 0.0 && self.learning_rate >= self.min_learning_rate) {
            return Err(Error::Config(format!(
                "learning rate {} must be >= min learning rate {} >= 0",
                self.learning_rate, self.min_learning_rate
            )));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!("momentum {} outside [0, 1)", self.momentum)));
        }
        if !(self.decay > 0.0 && self.decay <= 1.0) {
            return Err(Error::Config(format!("decay {} outside (0, 1]", self.decay)));
        }
        if self.patience == 0 || self.stop_patience == 0 {
            return Err(Error::Config("patience values must be positive".into()));
        }
        Ok(())
    }
}

/// What the schedule did with the newest validation entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ScheduleOutcome {
    /// The newest entry set a new best.
    pub improved: bool,
    pub decayed: bool,
    pub stop: bool,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OptimizerState {
    pub config: OptimizerConfig,
    pub learning_rate: f64,
    /// Momentum buffer, AdaGrad square sum, or Adam first moment.
    first: Vec<Vec<f64>>,
    /// Adam second moment; empty otherwise.
    second: Vec<Vec<f64>>,
    steps: u64,
    best: Option<f64>,
    since_best: usize,
    plateau: usize,
    seen: usize,
}

impl OptimizerState {
    pub fn new(config: OptimizerConfig, network: &Network) -> Result<Self> {
        config.validate()?;
        let shapes: Vec<usize> = network
            .dense()
            .iter()
            .flat_map(|d| [d.weight.len(), d.bias.len()])
            .collect();
        let zeros = || shapes.iter().map(|&n| vec![0.0; n]).collect::<Vec<_>>();
        let second = if config.algorithm == Algorithm::Adam {
            zeros()
        } else {
            Vec::new()
        };
        Ok(OptimizerState {
            learning_rate: config.learning_rate,
            config,
            first: zeros(),
            second,
            steps: 0,
            best: None,
            since_best: 0,
            plateau: 0,
            seen: 0,
        })
    }

    pub fn steps(&self) -> u64 {
        self.steps
    }

    pub fn best(&self) -> Option<f64> {
        self.best
    }

    /// Applies one update from the gradients currently stored in `network`.
    pub fn step(&mut self, network: &mut Network) -> Result<()> {
        self.steps += 1;
        let lr = self.learning_rate;
        let mu = self.config.momentum;
        let t = self.steps as i32;
        let bias1 = 1.0 - ADAM_BETA1.powi(t);
        let bias2 = 1.0 - ADAM_BETA2.powi(t);
        let algorithm = self.config.algorithm;
        for (k, (params, grads)) in network.param_groups_mut().enumerate() {
            let first = &mut self.first[k];
            match algorithm {
                Algorithm::SgdMomentum => {
                    for ((p, &g), v) in params.iter_mut().zip(grads).zip(first.iter_mut()) {
                        *v = mu * *v + g;
                        if lr != 0.0 {
                            *p -= lr * *v;
                        }
                    }
                }
                Algorithm::Adagrad => {
                    for ((p, &g), a) in params.iter_mut().zip(grads).zip(first.iter_mut()) {
                        *a += g * g;
                        if lr != 0.0 {
                            *p -= lr * g / (a.sqrt() + ADAGRAD_EPS);
                        }
                    }
                }
                Algorithm::Adam => {
                    let second = &mut self.second[k];
                    for (((p, &g), m), v) in params
                        .iter_mut()
                        .zip(grads)
                        .zip(first.iter_mut())
                        .zip(second.iter_mut())
                    {
                        *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
                        *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
                        if lr != 0.0 {
                            *p -= lr * (*m / bias1) / ((*v / bias2).sqrt() + ADAM_EPS);
                        }
                    }
                }
            }
            if !params.iter().all(|p| p.is_finite()) {
                return Err(Error::Numeric(format!(
                    "parameter group {k} overflowed at step {}",
                    self.steps
                )));
            }
        }
        Ok(())
    }

    /// Feeds one validation accuracy to the plateau schedule.
    pub fn observe(&mut self, accuracy: f64) -> ScheduleOutcome {
        self.seen += 1;
        let mut outcome = ScheduleOutcome::default();
        if self.best.map_or(true, |b| accuracy > b) {
            self.best = Some(accuracy);
            self.since_best = 0;
            self.plateau = 0;
            outcome.improved = true;
            return outcome;
        }
        self.since_best += 1;
        self.plateau += 1;
        if self.plateau >= self.config.patience {
            self.learning_rate =
                (self.learning_rate * self.config.decay).max(self.config.min_learning_rate);
            self.plateau = 0;
            outcome.decayed = true;
        }
        outcome.stop = self.since_best >= self.config.stop_patience;
        outcome
    }
}

/// Brings the plateau schedule up to date with a chronological accuracy
/// history, consuming only entries it has not seen yet. Returns the stop flag.
pub fn lr_schedule_update(state: &mut OptimizerState, history: &[f64]) -> bool {
    let mut stop = false;
    let start = state.seen.min(history.len());
    for &acc in &history[start..] {
        stop = state.observe(acc).stop;
    }
    stop
}

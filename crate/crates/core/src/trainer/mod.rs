//! Two-stage optimization: source-only pre-training, then joint
//! adversarial adaptation on mixed source/target batches.

mod batches;
mod checkpoint;
mod train;

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::autodiff::Tensor;
use crate::error::{Error, Result};

pub use batches::{make_batches, BatchSpec, EpochStream, MixedBatch, MixedBatches};
pub use checkpoint::{AdaptationState, Checkpoint, Phase, CHECKPOINT_MAGIC};
pub use train::{
    joint_adapt, joint_adapt_with, loss_curve_csv, pretrain, AdaptOptions, AdaptResult, LossRecord,
    PretrainResult, DIVERGENCE_LIMIT,
};

/// Learning rate, decay points and decay factor of one training phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PhaseSchedule {
    pub iterations: usize,
    pub lr: f64,
    /// Iterations from which the rate is multiplied by `decay_factor` once more.
    pub decay_at: Vec<usize>,
    pub decay_factor: f64,
}

impl PhaseSchedule {
    /// Rate used for the step at (0-based) `iteration`. Decays are applied
    /// by repeated multiplication, so after one decay the rate is exactly
    /// `lr * decay_factor`.
    pub fn lr_at(&self, iteration: usize) -> f64 {
        let mut lr = self.lr;
        for &d in &self.decay_at {
            if iteration >= d {
                lr *= self.decay_factor;
            }
        }
        lr
    }

    fn validate(&self, phase: &str, problems: &mut Vec<String>) {
        if !(self.lr.is_finite() && self.lr > 0.0) {
            problems.push(format!("{phase}.lr must be positive"));
        }
        if !(self.decay_factor.is_finite() && self.decay_factor > 0.0) {
            problems.push(format!("{phase}.decay_factor must be positive"));
        }
        if self.iterations > 0 {
            if let Some(d) = self.decay_at.iter().find(|&&d| d >= self.iterations) {
                problems.push(format!(
                    "{phase}.decay_at point {d} is not below {phase}.iterations {}",
                    self.iterations
                ));
            }
        }
    }
}

/// Plateau stopping for the adaptation phase.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PlateauConfig {
    pub window: usize,
    pub rel_tol: f64,
    /// No early stop is considered before this many iterations.
    pub min_iteration: usize,
}

impl Default for PlateauConfig {
    fn default() -> Self {
        Self {
            window: 50,
            rel_tol: 0.01,
            min_iteration: 400,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSchedule {
    pub pretrain: PhaseSchedule,
    pub pretrain_batch: usize,
    pub adapt: PhaseSchedule,
    pub source_batch: usize,
    pub target_batch: usize,
    /// Gradient reversal coefficient.
    pub lambda: f64,
    /// Domain classifiers learn at this multiple of the adaptation rate.
    pub domain_lr_mult: f64,
    /// Momentum during pre-training.
    pub momentum: f64,
    /// Momentum for both players of the adversarial phase.
    pub adapt_momentum: f64,
    pub weight_decay: f64,
    pub plateau: PlateauConfig,
}

impl Default for TrainSchedule {
    fn default() -> Self {
        Self {
            pretrain: PhaseSchedule {
                iterations: 3000,
                lr: 0.01,
                decay_at: vec![2000, 2500],
                decay_factor: 0.1,
            },
            pretrain_batch: 32,
            adapt: PhaseSchedule {
                iterations: 600,
                lr: 0.001,
                decay_at: vec![300],
                decay_factor: 0.1,
            },
            source_batch: 16,
            target_batch: 16,
            lambda: 1.0,
            domain_lr_mult: 100.0,
            momentum: 0.9,
            adapt_momentum: 0.0,
            weight_decay: 0.0005,
            plateau: PlateauConfig::default(),
        }
    }
}

impl TrainSchedule {
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        self.collect_problems(&mut problems);
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    pub(crate) fn collect_problems(&self, problems: &mut Vec<String>) {
        self.pretrain.validate("schedule.pretrain", problems);
        self.adapt.validate("schedule.adapt", problems);
        for (name, v) in [
            ("schedule.pretrain_batch", self.pretrain_batch),
            ("schedule.source_batch", self.source_batch),
            ("schedule.target_batch", self.target_batch),
            ("schedule.plateau.window", self.plateau.window),
        ] {
            if v == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if !(self.lambda.is_finite() && self.lambda >= 0.0) {
            problems.push("schedule.lambda must be nonnegative".into());
        }
        if !(self.domain_lr_mult.is_finite() && self.domain_lr_mult > 0.0) {
            problems.push("schedule.domain_lr_mult must be positive".into());
        }
        if !(0.0..1.0).contains(&self.momentum) {
            problems.push("schedule.momentum must lie in [0, 1)".into());
        }
        if !(0.0..1.0).contains(&self.adapt_momentum) {
            problems.push("schedule.adapt_momentum must lie in [0, 1)".into());
        }
        if !(self.weight_decay.is_finite() && self.weight_decay >= 0.0) {
            problems.push("schedule.weight_decay must be nonnegative".into());
        }
        if !(self.plateau.rel_tol.is_finite() && self.plateau.rel_tol >= 0.0) {
            problems.push("schedule.plateau.rel_tol must be nonnegative".into());
        }
    }
}

/// Momentum SGD state.
#[derive(Clone, Debug, PartialEq)]
pub struct OptState {
    /// Momentum buffer per parameter name, shaped like the parameter.
    pub velocity: BTreeMap<String, Tensor>,
    pub lr: f64,
    pub momentum: f64,
    pub weight_decay: f64,
    /// Steps taken so far.
    pub iteration: usize,
}

impl OptState {
    pub fn new(lr: f64, momentum: f64, weight_decay: f64) -> Self {
        Self {
            velocity: BTreeMap::new(),
            lr,
            momentum,
            weight_decay,
            iteration: 0,
        }
    }

    pub fn for_phase(phase: &PhaseSchedule, schedule: &TrainSchedule) -> Self {
        Self::new(phase.lr_at(0), schedule.momentum, schedule.weight_decay)
    }
}

/// One momentum step: `v ← μ·v + (g + wd·w)`, `w ← w − lr·v`.
///
/// A parameter without a gradient entry is stepped with a zero gradient.
/// All gradients are checked before any parameter moves. Afterwards the
/// iteration counter advances and, when a schedule is given, the rate is
/// set for the next step.
pub fn sgd_step(
    params: Vec<(String, &mut Tensor)>,
    grads: &BTreeMap<String, Tensor>,
    opt: &mut OptState,
    schedule: Option<&PhaseSchedule>,
) -> Result<()> {
    for (name, w) in &params {
        if let Some(g) = grads.get(name) {
            if g.shape() != w.shape() {
                return Err(Error::Shape {
                    node: 0,
                    op: "sgd_step",
                    reason: format!(
                        "gradient of `{name}` has shape {:?}, parameter {:?}",
                        g.shape(),
                        w.shape()
                    ),
                });
            }
            if !g.is_finite() {
                return Err(Error::NonFiniteGradient(name.clone()));
            }
        }
    }
    let (lr, mu, wd) = (opt.lr, opt.momentum, opt.weight_decay);
    for (name, w) in params {
        let v = opt
            .velocity
            .entry(name.clone())
            .or_insert_with(|| Tensor::zeros(w.shape()));
        let g = grads.get(&name);
        for (i, (w, v)) in w.data_mut().iter_mut().zip(v.data_mut()).enumerate() {
            let gi = g.map_or(0.0, |g| g.data()[i]);
            *v = mu * *v + (gi + wd * *w);
            *w -= lr * *v;
        }
    }
    opt.iteration += 1;
    if let Some(s) = schedule {
        opt.lr = s.lr_at(opt.iteration);
    }
    Ok(())
}

/// True once the mean of the last `window` losses is within `rel_tol`
/// (relative) of the mean of the `window` before it.
pub fn plateau_stop(history: &[f64], window: usize, rel_tol: f64) -> bool {
    if window == 0 || history.len() < 2 * window {
        return false;
    }
    let n = history.len();
    let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
    let last = mean(&history[n - window..]);
    let prev = mean(&history[n - 2 * window..n - window]);
    (last - prev).abs() / prev.abs().max(1e-8) < rel_tol
}

/// How the conditional term is weighted.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ConditionalMode {
    Off,
    /// `s_k ≡ 1`.
    Uniform,
    /// Transferability weights.
    Weighted,
}

/// Adaptation variants: marginal (M), conditional (C), weighted
/// conditional (WC) and their combinations.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub enum Variant {
    M,
    C,
    WC,
    MC,
    MWC,
}

impl Variant {
    pub const ALL: [Variant; 5] = [
        Variant::M,
        Variant::C,
        Variant::WC,
        Variant::MC,
        Variant::MWC,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Variant::M => "M",
            Variant::C => "C",
            Variant::WC => "WC",
            Variant::MC => "M+C",
            Variant::MWC => "M+WC",
        }
    }

    pub fn uses_marginal(self) -> bool {
        matches!(self, Variant::M | Variant::MC | Variant::MWC)
    }

    pub fn conditional(self) -> ConditionalMode {
        match self {
            Variant::M => ConditionalMode::Off,
            Variant::C | Variant::MC => ConditionalMode::Uniform,
            Variant::WC | Variant::MWC => ConditionalMode::Weighted,
        }
    }
}

impl fmt::Display for Variant {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Variant {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let key = s.trim().to_ascii_uppercase();
        Variant::ALL
            .into_iter()
            .find(|v| v.name() == key)
            .ok_or_else(|| Error::UnknownVariant(s.to_owned()))
    }
}

impl TryFrom<String> for Variant {
    type Error = Error;

    fn try_from(s: String) -> Result<Self> {
        s.parse()
    }
}

impl From<Variant> for String {
    fn from(v: Variant) -> String {
        v.name().to_owned()
    }
}

#[cfg(test)]
mod tests;

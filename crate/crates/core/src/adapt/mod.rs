//! Adversarial alignment: the marginal domain classifier over every feature
//! cell, per-class conditional classifiers fed with prediction-scaled
//! features, transferability weights, and a probe-based H-divergence
//! estimate.

mod hdiv;

use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::detector::{FeatureMap, Predictions, FEATURE_DIM};
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear, NamedParams};

pub use hdiv::{
    divergence_from_errors, estimate_h_divergence, HDivergenceEstimate, ProbeConfig, Scope,
};

pub const DOMAIN_HIDDEN: usize = 64;
/// Input width of each conditional classifier: features plus box offsets.
pub const CONDITIONAL_DIM: usize = FEATURE_DIM + 4;
/// A cell takes part in class `k`'s conditional loss only above this probability.
pub const PARTICIPATION_FLOOR: f64 = 0.05;
pub const EMA_DECAY: f64 = 0.99;
pub const WARMUP_ITERATIONS: usize = 50;
pub const WEIGHT_CLIP: (f64, f64) = (0.1, 3.0);

/// `in → 64 → 64 → 1` MLP with relu, relu, sigmoid.
#[derive(Clone, Debug, PartialEq)]
pub struct DomainClassifierParams {
    pub layers: [Linear; 3],
}

impl DomainClassifierParams {
    pub fn init(rng: &mut ChaCha8Rng, in_dim: usize) -> Self {
        Self {
            layers: [
                Linear::init(rng, in_dim, DOMAIN_HIDDEN),
                Linear::init(rng, DOMAIN_HIDDEN, DOMAIN_HIDDEN),
                Linear::init(rng, DOMAIN_HIDDEN, 1),
            ],
        }
    }

    pub fn zeros(in_dim: usize) -> Self {
        Self {
            layers: [
                Linear::zeros(in_dim, DOMAIN_HIDDEN),
                Linear::zeros(DOMAIN_HIDDEN, DOMAIN_HIDDEN),
                Linear::zeros(DOMAIN_HIDDEN, 1),
            ],
        }
    }

    pub fn in_dim(&self) -> usize {
        self.layers[0].fan_in()
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> Result<BoundDomainClassifier> {
        Ok(BoundDomainClassifier {
            layers: [
                self.layers[0].bind(g, &format!("{prefix}.l1"))?,
                self.layers[1].bind(g, &format!("{prefix}.l2"))?,
                self.layers[2].bind(g, &format!("{prefix}.l3"))?,
            ],
        })
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundDomainClassifier {
        BoundDomainClassifier {
            layers: [
                self.layers[0].bind_frozen(g),
                self.layers[1].bind_frozen(g),
                self.layers[2].bind_frozen(g),
            ],
        }
    }

    /// Source probability for each row of `x`.
    pub fn predict(&self, x: &Tensor) -> Result<Vec<f64>> {
        let mut g = Graph::new();
        let bound = self.bind_frozen(&mut g);
        let input = g.constant(x.clone());
        let out = bound.forward(&mut g, input)?;
        Ok(g.val(out).data().to_vec())
    }
}

impl NamedParams for DomainClassifierParams {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        for (i, l) in self.layers.iter().enumerate() {
            l.collect(&format!("{prefix}.l{}", i + 1), out);
        }
    }

    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        for (i, l) in self.layers.iter_mut().enumerate() {
            l.collect_mut(&format!("{prefix}.l{}", i + 1), out);
        }
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDomainClassifier {
    pub layers: [BoundLinear; 3],
}

impl BoundDomainClassifier {
    /// Maps `[n, in]` to source probabilities `[n, 1]`.
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let h = self.layers[0].forward(g, x)?;
        let h = g.relu(h)?;
        let h = self.layers[1].forward(g, h)?;
        let h = g.relu(h)?;
        let z = self.layers[2].forward(g, h)?;
        g.sigmoid(z)
    }
}

/// The marginal classifier plus one conditional classifier per foreground class.
#[derive(Clone, Debug, PartialEq)]
pub struct AdaptationParams {
    pub marginal: DomainClassifierParams,
    /// Index `k − 1` holds the classifier for class `k`.
    pub conditional: Vec<DomainClassifierParams>,
}

impl AdaptationParams {
    pub fn init(rng: &mut ChaCha8Rng, num_classes: usize) -> Self {
        Self {
            marginal: DomainClassifierParams::init(rng, FEATURE_DIM),
            conditional: (0..num_classes)
                .map(|_| DomainClassifierParams::init(rng, CONDITIONAL_DIM))
                .collect(),
        }
    }

    pub fn zeros(num_classes: usize) -> Self {
        Self {
            marginal: DomainClassifierParams::zeros(FEATURE_DIM),
            conditional: (0..num_classes)
                .map(|_| DomainClassifierParams::zeros(CONDITIONAL_DIM))
                .collect(),
        }
    }

    pub fn num_classes(&self) -> usize {
        self.conditional.len()
    }

    pub fn marginal_prefix() -> &'static str {
        "adapt.dm"
    }

    pub fn conditional_prefix(class: usize) -> String {
        format!("adapt.d{class}")
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundAdaptation> {
        let marginal = self.marginal.bind(g, Self::marginal_prefix())?;
        let conditional = self
            .conditional
            .iter()
            .enumerate()
            .map(|(i, d)| d.bind(g, &Self::conditional_prefix(i + 1)))
            .collect::<Result<_>>()?;
        Ok(BoundAdaptation {
            marginal,
            conditional,
        })
    }
}

impl NamedParams for AdaptationParams {
    fn named<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.marginal.named(Self::marginal_prefix(), out);
        for (i, d) in self.conditional.iter().enumerate() {
            d.named(&Self::conditional_prefix(i + 1), out);
        }
    }

    fn named_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.marginal.named_mut(Self::marginal_prefix(), out);
        for (i, d) in self.conditional.iter_mut().enumerate() {
            d.named_mut(&Self::conditional_prefix(i + 1), out);
        }
    }
}

#[derive(Clone, Debug)]
pub struct BoundAdaptation {
    pub marginal: BoundDomainClassifier,
    pub conditional: Vec<BoundDomainClassifier>,
}

/// `−mean(log p_s) − mean(log(1 − p_t))` for source probabilities of each side.
pub fn domain_bce_node(g: &mut Graph, p_source: NodeId, p_target: NodeId) -> Result<NodeId> {
    let log_s = g.log(p_source)?;
    let mean_s = g.reduce_mean(log_s)?;
    let neg_t = g.scale(p_target, -1.0)?;
    let one = g.constant(Tensor::scalar(1.0));
    let q_t = g.add(neg_t, one)?;
    let log_t = g.log(q_t)?;
    let mean_t = g.reduce_mean(log_t)?;
    let sum = g.add(mean_s, mean_t)?;
    g.scale(sum, -1.0)
}

/// BCE of already computed source probabilities.
pub fn domain_bce(p_source: &[f64], p_target: &[f64]) -> Result<f64> {
    if p_source.is_empty() {
        return Err(Error::EmptyDataset("source domain batch"));
    }
    if p_target.is_empty() {
        return Err(Error::EmptyDataset("target domain batch"));
    }
    let floor = crate::autodiff::LOG_FLOOR;
    let s = p_source.iter().map(|p| p.max(floor).ln()).sum::<f64>() / p_source.len() as f64;
    let t = p_target
        .iter()
        .map(|p| (1.0 - p).max(floor).ln())
        .sum::<f64>()
        / p_target.len() as f64;
    Ok(-(s + t))
}

/// Marginal loss `L_m` over every cell of every source and target map.
pub fn marginal_domain_loss(
    source: &[FeatureMap],
    target: &[FeatureMap],
    dm: &DomainClassifierParams,
) -> Result<f64> {
    let stack = |maps: &[FeatureMap], what: &'static str| -> Result<Tensor> {
        if maps.is_empty() {
            return Err(Error::EmptyDataset(what));
        }
        let data: Vec<f64> = maps
            .iter()
            .flat_map(|m| m.features.data().iter().copied())
            .collect();
        Ok(Tensor::matrix(data.len() / FEATURE_DIM, FEATURE_DIM, data))
    };
    let p_s = dm.predict(&stack(source, "source domain batch")?)?;
    let p_t = dm.predict(&stack(target, "target domain batch")?)?;
    domain_bce(&p_s, &p_t)
}

/// Marginal loss node over feature rows. Callers route the features
/// through a gradient reversal first when training adversarially.
pub fn marginal_loss_node(
    g: &mut Graph,
    dm: &BoundDomainClassifier,
    source_features: NodeId,
    target_features: NodeId,
) -> Result<NodeId> {
    let ps = dm.forward(g, source_features)?;
    let pt = dm.forward(g, target_features)?;
    domain_bce_node(g, ps, pt)
}

/// `ŷ_k · (f ∘ b̂)` at one cell of one image.
pub fn conditional_input(
    feature: &FeatureMap,
    preds: &Predictions,
    class: usize,
    cell: usize,
) -> Vec<f64> {
    assert!(
        class >= 1 && class <= preds.num_classes(),
        "class {class} out of range"
    );
    let y = preds.class_probs.row(cell)[class];
    feature
        .features
        .row(cell)
        .iter()
        .chain(preds.box_offsets.row(cell))
        .map(|v| y * v)
        .collect()
}

/// Rows of a `[n, K+1]` probability matrix where class `k` clears the
/// participation floor, with their probabilities.
pub fn participating_rows(class_probs: &Tensor, class: usize) -> (Vec<usize>, Vec<f64>) {
    (0..class_probs.rows())
        .filter_map(|r| {
            let y = class_probs.row(r)[class];
            (y > PARTICIPATION_FLOOR).then_some((r, y))
        })
        .unzip()
}

/// Conditional inputs of one domain for class `k`.
pub fn conditional_inputs(maps: &[(FeatureMap, Predictions)], class: usize) -> Vec<Vec<f64>> {
    let mut out = Vec::new();
    for (f, p) in maps {
        for cell in 0..p.class_probs.rows() {
            if p.class_probs.row(cell)[class] > PARTICIPATION_FLOOR {
                out.push(conditional_input(f, p, class, cell));
            }
        }
    }
    out
}

/// `L_k` on precomputed conditional inputs; `None` when either side has
/// no participating cell (the class is skipped and contributes zero).
pub fn conditional_domain_loss_k(
    inputs_source: &[Vec<f64>],
    inputs_target: &[Vec<f64>],
    dk: &DomainClassifierParams,
) -> Result<Option<f64>> {
    if inputs_source.is_empty() || inputs_target.is_empty() {
        return Ok(None);
    }
    let stack = |rows: &[Vec<f64>]| Tensor::matrix(rows.len(), CONDITIONAL_DIM, rows.concat());
    let p_s = dk.predict(&stack(inputs_source))?;
    let p_t = dk.predict(&stack(inputs_target))?;
    domain_bce(&p_s, &p_t).map(Some)
}

/// One domain's side of a conditional loss in the training graph.
#[derive(Clone, Copy, Debug)]
pub struct ConditionalSide<'a> {
    /// Feature rows, usually already passed through the gradient reversal.
    pub features: NodeId,
    /// Predicted class probabilities (treated as constants).
    pub class_probs: &'a Tensor,
    /// Predicted box offsets (treated as constants).
    pub box_offsets: &'a Tensor,
}

fn conditional_branch(
    g: &mut Graph,
    side: &ConditionalSide,
    class: usize,
) -> Result<Option<NodeId>> {
    let (rows, weights) = participating_rows(side.class_probs, class);
    if rows.is_empty() {
        return Ok(None);
    }
    let offsets = g.constant(side.box_offsets.clone());
    let joined = g.concat(&[side.features, offsets])?;
    let picked = g.select_rows(joined, &rows)?;
    let scale = g.constant(Tensor::matrix(rows.len(), 1, weights));
    g.mul(picked, scale).map(Some)
}

/// `L_k` node for class `k`, or `None` when the class is skipped.
pub fn conditional_loss_node(
    g: &mut Graph,
    dk: &BoundDomainClassifier,
    source: &ConditionalSide,
    target: &ConditionalSide,
    class: usize,
) -> Result<Option<NodeId>> {
    let (Some(xs), Some(xt)) = (
        conditional_branch(g, source, class)?,
        conditional_branch(g, target, class)?,
    ) else {
        return Ok(None);
    };
    let ps = dk.forward(g, xs)?;
    let pt = dk.forward(g, xt)?;
    domain_bce_node(g, ps, pt).map(Some)
}

/// EMA of each conditional classifier's BCE and the derived class weights.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TransferabilityState {
    pub ema: Vec<f64>,
    pub weights: Vec<f64>,
    pub warmup_remaining: usize,
}

impl TransferabilityState {
    pub fn new(num_classes: usize) -> Self {
        Self::with_warmup(num_classes, WARMUP_ITERATIONS)
    }

    pub fn with_warmup(num_classes: usize, warmup: usize) -> Self {
        Self {
            ema: vec![0.0; num_classes],
            weights: vec![1.0; num_classes],
            warmup_remaining: warmup,
        }
    }

    /// Folds in one iteration's per-class BCE; skipped classes (`None`)
    /// keep their previous EMA.
    pub fn update(&mut self, batch_bce: &[Option<f64>]) {
        assert_eq!(batch_bce.len(), self.ema.len(), "one BCE slot per class");
        for (e, b) in self.ema.iter_mut().zip(batch_bce) {
            if let Some(b) = b {
                *e = EMA_DECAY * *e + (1.0 - EMA_DECAY) * b;
            }
        }
        if self.warmup_remaining > 0 {
            self.warmup_remaining -= 1;
            self.weights.fill(1.0);
        } else {
            self.weights = weights_from_ema(&self.ema);
        }
    }
}

/// `K · ema_k / Σ ema`, clipped to [0.1, 3.0]; all-zero EMAs give ones.
pub fn weights_from_ema(ema: &[f64]) -> Vec<f64> {
    let total: f64 = ema.iter().sum();
    if total <= 0.0 {
        return vec![1.0; ema.len()];
    }
    let k = ema.len() as f64;
    ema.iter()
        .map(|e| (k * e / total).clamp(WEIGHT_CLIP.0, WEIGHT_CLIP.1))
        .collect()
}

pub fn update_transferability(
    state: &TransferabilityState,
    batch_bce: &[Option<f64>],
) -> TransferabilityState {
    let mut next = state.clone();
    next.update(batch_bce);
    next
}

/// `C = Σ s_k · L_k`.
pub fn weighted_conditional_loss(losses: &[f64], weights: &[f64]) -> Result<f64> {
    check_lengths(losses.len(), weights.len())?;
    Ok(losses.iter().zip(weights).map(|(l, s)| s * l).sum())
}

/// Graph form of [`weighted_conditional_loss`]; skipped classes are `None`.
/// The weights enter as plain scalars, so no gradient reaches them.
pub fn weighted_conditional_node(
    g: &mut Graph,
    losses: &[Option<NodeId>],
    weights: &[f64],
) -> Result<Option<NodeId>> {
    check_lengths(losses.len(), weights.len())?;
    let mut total: Option<NodeId> = None;
    for (l, &s) in losses.iter().zip(weights) {
        let Some(l) = l else { continue };
        let term = g.scale(*l, s)?;
        total = Some(match total {
            Some(t) => g.add(t, term)?,
            None => term,
        });
    }
    Ok(total)
}

fn check_lengths(losses: usize, weights: usize) -> Result<()> {
    if losses != weights {
        return Err(Error::Config(format!(
            "{losses} conditional losses but {weights} weights"
        )));
    }
    Ok(())
}

/// Summary of a weight trajectory for reporting.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct WeightSummary {
    pub initial: Vec<f64>,
    pub final_weights: Vec<f64>,
    pub mean: Vec<f64>,
    pub min: Vec<f64>,
    pub max: Vec<f64>,
}

impl WeightSummary {
    pub fn from_trajectory(trajectory: &[Vec<f64>]) -> Self {
        let Some(first) = trajectory.first() else {
            return Self::default();
        };
        let k = first.len();
        let n = trajectory.len() as f64;
        let column = |i: usize| trajectory.iter().map(move |s| s[i]);
        Self {
            initial: first.clone(),
            final_weights: trajectory.last().cloned().unwrap_or_default(),
            mean: (0..k).map(|i| column(i).sum::<f64>() / n).collect(),
            min: (0..k)
                .map(|i| column(i).fold(f64::INFINITY, f64::min))
                .collect(),
            max: (0..k)
                .map(|i| column(i).fold(f64::NEG_INFINITY, f64::max))
                .collect(),
        }
    }
}

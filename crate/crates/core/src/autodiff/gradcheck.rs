use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::graph::{Graph, NodeId};
use super::tensor::Tensor;
use crate::error::Result;

#[derive(Clone, Debug)]
pub struct GradCheckOptions {
    /// Central-difference step.
    pub step: f64,
    /// Denominator floor for the relative error.
    pub floor: f64,
    /// Check at most this many randomly chosen entries per tensor.
    pub max_entries: Option<usize>,
    pub seed: u64,
    /// Skip entries whose central differences at `step` and `step / 2`
    /// disagree by more than this relative amount, which happens when a
    /// step straddles a kink (relu, smooth-L1).
    pub kink_tol: Option<f64>,
}

impl Default for GradCheckOptions {
    fn default() -> Self {
        Self {
            step: 1e-5,
            floor: 1e-8,
            max_entries: None,
            seed: 0,
            kink_tol: None,
        }
    }
}

impl GradCheckOptions {
    /// Settings for composite losses over many relu rows, where kinks sit
    /// roughly 1e-5 apart along a parameter: a small step, a floor that
    /// keeps cancellation error out of the relative error, and skipping of
    /// steps that still straddle a kink.
    pub fn composite() -> Self {
        Self {
            step: 1e-6,
            floor: 1e-5,
            kink_tol: Some(1e-5),
            ..Self::default()
        }
    }
}

#[derive(Clone, Debug)]
pub struct GradCheckReport {
    /// Max relative error per checked tensor.
    pub max_rel_error: BTreeMap<String, f64>,
    /// Entries compared per tensor.
    pub checked: BTreeMap<String, usize>,
    /// Entries skipped as kinks per tensor.
    pub skipped: BTreeMap<String, usize>,
    pub tol: f64,
}

impl GradCheckReport {
    pub fn passed(&self) -> bool {
        self.max_rel_error.values().all(|&e| e < self.tol)
    }

    pub fn worst(&self) -> f64 {
        self.max_rel_error.values().copied().fold(0.0, f64::max)
    }

    pub fn total_skipped(&self) -> usize {
        self.skipped.values().sum()
    }

    pub fn total_checked(&self) -> usize {
        self.checked.values().sum()
    }
}

pub fn relative_error(analytic: f64, numeric: f64, floor: f64) -> f64 {
    (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(floor)
}

/// Compares reverse-mode gradients of the scalar `out` against central
/// finite differences for each named leaf in `names`.
pub fn grad_check(
    graph: &mut Graph,
    out: NodeId,
    names: &[&str],
    tol: f64,
    opts: &GradCheckOptions,
) -> Result<GradCheckReport> {
    let no_feeds = BTreeMap::new();
    let center = graph.evaluate_node(out, &no_feeds)?.item();
    // cancellation error of one central difference
    let noise = 8.0 * f64::EPSILON * center.abs().max(1.0) / opts.step;
    let grads = graph.backward(out, &Tensor::scalar(1.0))?;
    let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
    let mut max_rel_error = BTreeMap::new();
    let mut checked = BTreeMap::new();
    let mut skipped = BTreeMap::new();

    for &name in names {
        let node = graph
            .node_by_name(name)
            .ok_or_else(|| crate::error::Error::Unbound(name.to_owned()))?;
        let base = graph.val(node).clone();
        let analytic = grads
            .get(name)
            .cloned()
            .unwrap_or_else(|| Tensor::zeros(base.shape()));
        let indices: Vec<usize> = match opts.max_entries {
            Some(m) if m < base.len() => {
                let mut v = sample(&mut rng, base.len(), m).into_vec();
                v.sort_unstable();
                v
            }
            _ => (0..base.len()).collect(),
        };

        let mut worst: f64 = 0.0;
        let (mut n_checked, mut n_skipped) = (0usize, 0usize);
        for i in indices {
            let mut probe = |delta: f64| -> Result<f64> {
                let mut t = base.clone();
                t.data_mut()[i] += delta;
                let feeds =
                    BTreeMap::from([(name.to_owned(), t.with_requires_grad(base.requires_grad()))]);
                Ok(graph.evaluate_node(out, &feeds)?.item())
            };
            let h = opts.step;
            let (plus, minus) = (probe(h)?, probe(-h)?);
            let numeric = (plus - minus) / (2.0 * h);
            if let Some(kt) = opts.kink_tol {
                let (up, down) = (probe(h / 2.0)?, probe(-h / 2.0)?);
                let half = (up - down) / h;
                // second differences shrink linearly with the step on smooth
                // stretches but stay constant across a kink at the base point,
                // where the two central differences agree
                let curve = (plus + minus - 2.0 * center) / h;
                let curve_half = 2.0 * (up + down - 2.0 * center) / h;
                let excess = ((numeric - half).abs() - 2.0 * noise).max(0.0);
                let bend = ((curve - 2.0 * curve_half).abs() - 8.0 * noise).max(0.0);
                if excess.max(bend) > kt * numeric.abs().max(half.abs()).max(opts.floor) {
                    n_skipped += 1;
                    continue;
                }
            }
            n_checked += 1;
            // the numeric reference is only known to within its rounding noise
            let gap = ((analytic.data()[i] - numeric).abs() - noise).max(0.0);
            worst = worst.max(gap / analytic.data()[i].abs().max(numeric.abs()).max(opts.floor));
        }
        let restore = BTreeMap::from([(name.to_owned(), base)]);
        graph.evaluate_node(out, &restore)?;
        max_rel_error.insert(name.to_owned(), worst);
        checked.insert(name.to_owned(), n_checked);
        skipped.insert(name.to_owned(), n_skipped);
    }
    Ok(GradCheckReport {
        max_rel_error,
        checked,
        skipped,
        tol,
    })
}

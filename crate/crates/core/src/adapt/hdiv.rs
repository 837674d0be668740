use std::fmt;

use rand::seq::{index::sample, SliceRandom};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{domain_bce_node, DomainClassifierParams};
use crate::autodiff::{Graph, Tensor};
use crate::error::{Error, Result};
use crate::nn::NamedParams;

/// Settings for the probe classifier behind the divergence estimate.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    /// Full-batch gradient steps.
    pub steps: usize,
    pub lr: f64,
    pub momentum: f64,
    pub train_fraction: f64,
    /// Vectors per domain below which no estimate is made.
    pub min_vectors: usize,
    /// Random subsample per domain when more vectors are supplied.
    pub max_vectors: usize,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            lr: 0.01,
            momentum: 0.9,
            train_fraction: 0.8,
            min_vectors: 40,
            max_vectors: 400,
        }
    }
}

/// What a divergence estimate was computed over.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(into = "ScopeRepr", try_from = "ScopeRepr")]
pub enum Scope {
    Marginal,
    Class(usize),
}

#[derive(Serialize, Deserialize)]
#[serde(untagged)]
enum ScopeRepr {
    Name(String),
    Class(usize),
}

impl From<Scope> for ScopeRepr {
    fn from(s: Scope) -> Self {
        match s {
            Scope::Marginal => ScopeRepr::Name("marginal".into()),
            Scope::Class(k) => ScopeRepr::Class(k),
        }
    }
}

impl TryFrom<ScopeRepr> for Scope {
    type Error = String;

    fn try_from(r: ScopeRepr) -> std::result::Result<Self, String> {
        match r {
            ScopeRepr::Name(n) if n == "marginal" => Ok(Scope::Marginal),
            ScopeRepr::Name(n) => Err(format!("unknown scope `{n}`")),
            ScopeRepr::Class(k) => Ok(Scope::Class(k)),
        }
    }
}

impl fmt::Display for Scope {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Scope::Marginal => f.write_str("marginal"),
            Scope::Class(k) => write!(f, "class {k}"),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HDivergenceEstimate {
    pub d: f64,
    pub eps_source: f64,
    pub eps_target: f64,
    pub scope: Scope,
    pub seed: u64,
    pub train_source: usize,
    pub train_target: usize,
    pub test_source: usize,
    pub test_target: usize,
}

/// `2 · (1 − (ε_s + ε_t))` clamped to [0, 2].
pub fn divergence_from_errors(eps_source: f64, eps_target: f64) -> f64 {
    (2.0 * (1.0 - (eps_source + eps_target))).clamp(0.0, 2.0)
}

fn subsample<'a>(rows: &[&'a [f64]], cap: usize, rng: &mut ChaCha8Rng) -> Vec<&'a [f64]> {
    if rows.len() <= cap {
        return rows.to_vec();
    }
    let mut idx = sample(rng, rows.len(), cap).into_vec();
    idx.sort_unstable();
    idx.into_iter().map(|i| rows[i]).collect()
}

type Split<'a> = (Vec<&'a [f64]>, Vec<&'a [f64]>);

fn split<'a>(rows: &[&'a [f64]], perm: &[usize], train_fraction: f64) -> Split<'a> {
    let order: Vec<usize> = perm.iter().copied().filter(|&i| i < rows.len()).collect();
    let n_train = ((rows.len() as f64) * train_fraction).round() as usize;
    let n_train = n_train.clamp(1, rows.len() - 1);
    let pick = |ix: &[usize]| ix.iter().map(|&i| rows[i]).collect::<Vec<_>>();
    (pick(&order[..n_train]), pick(&order[n_train..]))
}

fn to_tensor(rows: &[&[f64]], mean: &[f64], std: &[f64]) -> Tensor {
    let dim = mean.len();
    let data = rows
        .iter()
        .flat_map(|r| r.iter().enumerate().map(|(j, v)| (v - mean[j]) / std[j]))
        .collect();
    Tensor::matrix(rows.len(), dim, data)
}

/// Trains a fresh domain probe on an 80/20 split of each side and turns
/// its held-out errors into a divergence. Features are standardized with
/// the pooled training statistics. A sample row is predicted as source
/// when the probe output exceeds 0.5.
pub fn estimate_h_divergence(
    source: &[&[f64]],
    target: &[&[f64]],
    probe: &ProbeConfig,
    seed: u64,
    scope: Scope,
) -> Result<HDivergenceEstimate> {
    if source.len() < probe.min_vectors || target.len() < probe.min_vectors {
        return Err(Error::TooFewVectors {
            source_count: source.len(),
            target_count: target.len(),
            required: probe.min_vectors,
        });
    }
    let dim = source[0].len();
    if source.iter().chain(target).any(|r| r.len() != dim) {
        return Err(Error::Config(
            "feature vectors have differing lengths".into(),
        ));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let source = subsample(source, probe.max_vectors, &mut rng);
    let target = subsample(target, probe.max_vectors, &mut rng);

    // one permutation for both sides so identical inputs split identically
    let mut perm: Vec<usize> = (0..source.len().max(target.len())).collect();
    perm.shuffle(&mut rng);
    let (train_s, test_s) = split(&source, &perm, probe.train_fraction);
    let (train_t, test_t) = split(&target, &perm, probe.train_fraction);

    let pooled = train_s.iter().chain(&train_t);
    let n = (train_s.len() + train_t.len()) as f64;
    let mut mean = vec![0.0; dim];
    for r in pooled.clone() {
        mean.iter_mut().zip(r.iter()).for_each(|(m, v)| *m += v / n);
    }
    let mut std = vec![0.0; dim];
    for r in pooled {
        std.iter_mut()
            .zip(r.iter().zip(&mean))
            .for_each(|(s, (v, m))| *s += (v - m).powi(2) / n);
    }
    std.iter_mut().for_each(|s| *s = s.sqrt().max(1e-8));

    let xs = to_tensor(&train_s, &mean, &std);
    let xt = to_tensor(&train_t, &mean, &std);
    let mut params = DomainClassifierParams::init(&mut rng, dim);
    train_probe(&mut params, &xs, &xt, probe)?;

    let ps = params.predict(&to_tensor(&test_s, &mean, &std))?;
    let pt = params.predict(&to_tensor(&test_t, &mean, &std))?;
    let eps_source = ps.iter().filter(|&&p| p <= 0.5).count() as f64 / ps.len() as f64;
    let eps_target = pt.iter().filter(|&&p| p > 0.5).count() as f64 / pt.len() as f64;
    Ok(HDivergenceEstimate {
        d: divergence_from_errors(eps_source, eps_target),
        eps_source,
        eps_target,
        scope,
        seed,
        train_source: train_s.len(),
        train_target: train_t.len(),
        test_source: test_s.len(),
        test_target: test_t.len(),
    })
}

fn train_probe(
    params: &mut DomainClassifierParams,
    xs: &Tensor,
    xt: &Tensor,
    probe: &ProbeConfig,
) -> Result<()> {
    let mut velocity: Vec<Tensor> = params
        .named_tensors("probe")
        .into_iter()
        .map(|(_, t)| Tensor::zeros(t.shape()))
        .collect();
    for _ in 0..probe.steps {
        let mut g = Graph::new();
        let bound = params.bind(&mut g, "probe")?;
        let s = g.constant(xs.clone());
        let t = g.constant(xt.clone());
        let ps = bound.forward(&mut g, s)?;
        let pt = bound.forward(&mut g, t)?;
        let loss = domain_bce_node(&mut g, ps, pt)?;
        let grads = g.backward(loss, &Tensor::scalar(1.0))?;
        for ((name, w), v) in params
            .named_tensors_mut("probe")
            .into_iter()
            .zip(&mut velocity)
        {
            let grad = grads
                .get(&name)
                .ok_or_else(|| Error::Unbound(name.clone()))?;
            for ((w, v), g) in w.data_mut().iter_mut().zip(v.data_mut()).zip(grad.data()) {
                *v = probe.momentum * *v + g;
                *w -= probe.lr * *v;
            }
        }
    }
    Ok(())
}

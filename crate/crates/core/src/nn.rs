//! Small layer helpers shared by the detector and the domain classifiers.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;

/// Fully connected layer `x·W + b` with `W: [in, out]`, `b: [1, out]`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Linear {
    /// Uniform weights in `±1/√fan_in`, zero bias.
    pub fn init(rng: &mut ChaCha8Rng, fan_in: usize, fan_out: usize) -> Self {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let weight = (0..fan_in * fan_out)
            .map(|_| rng.gen_range(-bound..bound))
            .collect();
        Self {
            weight: Tensor::matrix(fan_in, fan_out, weight),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn zeros(fan_in: usize, fan_out: usize) -> Self {
        Self {
            weight: Tensor::zeros(&[fan_in, fan_out]),
            bias: Tensor::zeros(&[1, fan_out]),
        }
    }

    pub fn fan_in(&self) -> usize {
        self.weight.shape()[0]
    }

    pub fn fan_out(&self) -> usize {
        self.weight.shape()[1]
    }

    pub fn bind(&self, g: &mut Graph, prefix: &str) -> Result<BoundLinear> {
        Ok(BoundLinear {
            weight: g.param(&format!("{prefix}.w"), self.weight.clone())?,
            bias: g.param(&format!("{prefix}.b"), self.bias.clone())?,
        })
    }

    pub fn bind_frozen(&self, g: &mut Graph) -> BoundLinear {
        BoundLinear {
            weight: g.constant(self.weight.clone()),
            bias: g.constant(self.bias.clone()),
        }
    }

    pub fn collect<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        out.push((format!("{prefix}.w"), &self.weight));
        out.push((format!("{prefix}.b"), &self.bias));
    }

    pub fn collect_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        out.push((format!("{prefix}.w"), &mut self.weight));
        out.push((format!("{prefix}.b"), &mut self.bias));
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundLinear {
    pub weight: NodeId,
    pub bias: NodeId,
}

impl BoundLinear {
    pub fn forward(&self, g: &mut Graph, x: NodeId) -> Result<NodeId> {
        let y = g.matmul(x, self.weight)?;
        g.add(y, self.bias)
    }
}

/// Anything exposing its tensors under stable names.
pub trait NamedParams {
    fn named<'a>(&'a self, prefix: &str, out: &mut Vec<(String, &'a Tensor)>);
    fn named_mut<'a>(&'a mut self, prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>);

    fn named_tensors(&self, prefix: &str) -> Vec<(String, &Tensor)> {
        let mut out = Vec::new();
        self.named(prefix, &mut out);
        out
    }

    fn named_tensors_mut(&mut self, prefix: &str) -> Vec<(String, &mut Tensor)> {
        let mut out = Vec::new();
        self.named_mut(prefix, &mut out);
        out
    }
}

use rand_chacha::ChaCha8Rng;

use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::{Error, Result};
use crate::nn::{BoundLinear, Linear, NamedParams};
use crate::synthgen::Sample;

/// Width of the per-cell feature map (the alignment layer).
pub const FEATURE_DIM: usize = 32;

#[derive(Clone, Debug, PartialEq)]
pub struct BackboneParams {
    pub input: Linear,
    pub hidden: Linear,
    /// Applied to the mean over the 4-neighborhood plus the cell itself;
    /// its output is added to the cell's own hidden features.
    pub mix: Linear,
    pub output: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct HeadParams {
    /// `32 → K+1` logits; index 0 is background.
    pub cls: Linear,
    /// `32 → 4` box offsets.
    pub boxes: Linear,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectorParams {
    pub backbone: BackboneParams,
    pub heads: HeadParams,
}

impl DetectorParams {
    pub fn init(rng: &mut ChaCha8Rng, obs_dim: usize, num_classes: usize) -> Self {
        Self {
            backbone: BackboneParams {
                input: Linear::init(rng, obs_dim, FEATURE_DIM),
                hidden: Linear::init(rng, FEATURE_DIM, FEATURE_DIM),
                mix: Linear::init(rng, FEATURE_DIM, FEATURE_DIM),
                output: Linear::init(rng, FEATURE_DIM, FEATURE_DIM),
            },
            heads: HeadParams {
                cls: Linear::init(rng, FEATURE_DIM, num_classes + 1),
                boxes: Linear::init(rng, FEATURE_DIM, 4),
            },
        }
    }

    pub fn zeros(obs_dim: usize, num_classes: usize) -> Self {
        Self {
            backbone: BackboneParams {
                input: Linear::zeros(obs_dim, FEATURE_DIM),
                hidden: Linear::zeros(FEATURE_DIM, FEATURE_DIM),
                mix: Linear::zeros(FEATURE_DIM, FEATURE_DIM),
                output: Linear::zeros(FEATURE_DIM, FEATURE_DIM),
            },
            heads: HeadParams {
                cls: Linear::zeros(FEATURE_DIM, num_classes + 1),
                boxes: Linear::zeros(FEATURE_DIM, 4),
            },
        }
    }

    pub fn obs_dim(&self) -> usize {
        self.backbone.input.fan_in()
    }

    pub fn num_classes(&self) -> usize {
        self.heads.cls.fan_out() - 1
    }

    pub fn bind(&self, g: &mut Graph) -> Result<BoundDetector> {
        Ok(BoundDetector {
            backbone: BoundBackbone {
                input: self.backbone.input.bind(g, "backbone.input")?,
                hidden: self.backbone.hidden.bind(g, "backbone.hidden")?,
                mix: self.backbone.mix.bind(g, "backbone.mix")?,
                output: self.backbone.output.bind(g, "backbone.output")?,
            },
            heads: BoundHeads {
                cls: self.heads.cls.bind(g, "head.cls")?,
                boxes: self.heads.boxes.bind(g, "head.box")?,
            },
        })
    }

    /// Binds every tensor as a constant (inference only).
    pub fn bind_frozen(&self, g: &mut Graph) -> BoundDetector {
        BoundDetector {
            backbone: BoundBackbone {
                input: self.backbone.input.bind_frozen(g),
                hidden: self.backbone.hidden.bind_frozen(g),
                mix: self.backbone.mix.bind_frozen(g),
                output: self.backbone.output.bind_frozen(g),
            },
            heads: BoundHeads {
                cls: self.heads.cls.bind_frozen(g),
                boxes: self.heads.boxes.bind_frozen(g),
            },
        }
    }
}

impl NamedParams for DetectorParams {
    fn named<'a>(&'a self, _prefix: &str, out: &mut Vec<(String, &'a Tensor)>) {
        self.backbone.input.collect("backbone.input", out);
        self.backbone.hidden.collect("backbone.hidden", out);
        self.backbone.mix.collect("backbone.mix", out);
        self.backbone.output.collect("backbone.output", out);
        self.heads.cls.collect("head.cls", out);
        self.heads.boxes.collect("head.box", out);
    }

    fn named_mut<'a>(&'a mut self, _prefix: &str, out: &mut Vec<(String, &'a mut Tensor)>) {
        self.backbone.input.collect_mut("backbone.input", out);
        self.backbone.hidden.collect_mut("backbone.hidden", out);
        self.backbone.mix.collect_mut("backbone.mix", out);
        self.backbone.output.collect_mut("backbone.output", out);
        self.heads.cls.collect_mut("head.cls", out);
        self.heads.boxes.collect_mut("head.box", out);
    }
}

#[derive(Clone, Copy, Debug)]
pub struct BoundBackbone {
    pub input: BoundLinear,
    pub hidden: BoundLinear,
    pub mix: BoundLinear,
    pub output: BoundLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundHeads {
    pub cls: BoundLinear,
    pub boxes: BoundLinear,
}

#[derive(Clone, Copy, Debug)]
pub struct BoundDetector {
    pub backbone: BoundBackbone,
    pub heads: BoundHeads,
}

/// Observations of a batch stacked cell-major: row `cell · B + b`.
///
/// With this order the `[G·G·B, 32]` hidden map is also a `[G·G, B·32]`
/// matrix, so neighborhood mixing is a single product with the
/// `[G·G, G·G]` averaging matrix.
#[derive(Clone, Debug)]
pub struct CellBatch {
    pub grid: usize,
    pub batch: usize,
    pub obs: Tensor,
}

impl CellBatch {
    pub fn from_samples(samples: &[&Sample]) -> Result<Self> {
        let first = samples.first().ok_or(Error::EmptyDataset("batch"))?;
        let shape = first.cells.shape().to_vec();
        let (grid, obs_dim) = (shape[0], shape[2]);
        let cells = grid * grid;
        let b = samples.len();
        let mut data = vec![0.0; cells * b * obs_dim];
        for (bi, s) in samples.iter().enumerate() {
            if s.cells.shape() != shape.as_slice() {
                return Err(Error::Shape {
                    node: 0,
                    op: "batch",
                    reason: format!(
                        "sample shape {:?} differs from {:?}",
                        s.cells.shape(),
                        shape
                    ),
                });
            }
            for c in 0..cells {
                let row = c * b + bi;
                data[row * obs_dim..(row + 1) * obs_dim].copy_from_slice(s.observation(c));
            }
        }
        Ok(Self {
            grid,
            batch: b,
            obs: Tensor::matrix(cells * b, obs_dim, data),
        })
    }

    pub fn rows(&self) -> usize {
        self.grid * self.grid * self.batch
    }

    pub fn row(&self, sample: usize, cell: usize) -> usize {
        cell * self.batch + sample
    }
}

/// Row-normalized `[G·G, G·G]` matrix averaging each cell with its
/// 4-neighborhood (fewer neighbors on the border).
pub fn neighborhood_matrix(grid: usize) -> Tensor {
    let n = grid * grid;
    let mut data = vec![0.0; n * n];
    for v in 0..grid {
        for u in 0..grid {
            let c = v * grid + u;
            let mut members = vec![c];
            if u > 0 {
                members.push(c - 1);
            }
            if u + 1 < grid {
                members.push(c + 1);
            }
            if v > 0 {
                members.push(c - grid);
            }
            if v + 1 < grid {
                members.push(c + grid);
            }
            let w = 1.0 / members.len() as f64;
            for m in members {
                data[c * n + m] = w;
            }
        }
    }
    Tensor::matrix(n, n, data)
}

/// Node handles for one forward pass.
#[derive(Clone, Copy, Debug)]
pub struct ForwardNodes {
    pub features: NodeId,
    pub class_probs: NodeId,
    pub box_offsets: NodeId,
}

impl BoundBackbone {
    /// `obs` is a cell-major `[G·G·B, obs_dim]` node; returns `[G·G·B, 32]`.
    pub fn forward(&self, g: &mut Graph, obs: NodeId, grid: usize, batch: usize) -> Result<NodeId> {
        let cells = grid * grid;
        let h = self.input.forward(g, obs)?;
        let h = g.relu(h)?;
        let h = self.hidden.forward(g, h)?;
        let h = g.relu(h)?;
        let wide = g.reshape(h, &[cells, batch * FEATURE_DIM])?;
        let avg = g.constant(neighborhood_matrix(grid));
        let mixed = g.matmul(avg, wide)?;
        let mixed = g.reshape(mixed, &[cells * batch, FEATURE_DIM])?;
        let m = self.mix.forward(g, mixed)?;
        let m = g.add(h, m)?;
        let f = self.output.forward(g, m)?;
        g.relu(f)
    }
}

impl BoundHeads {
    pub fn forward(&self, g: &mut Graph, features: NodeId) -> Result<(NodeId, NodeId)> {
        let logits = self.cls.forward(g, features)?;
        let probs = g.softmax(logits)?;
        let offsets = self.boxes.forward(g, features)?;
        Ok((probs, offsets))
    }
}

impl BoundDetector {
    pub fn forward(&self, g: &mut Graph, batch: &CellBatch) -> Result<ForwardNodes> {
        let obs = g.constant(batch.obs.clone());
        self.forward_node(g, obs, batch.grid, batch.batch)
    }

    pub fn forward_node(
        &self,
        g: &mut Graph,
        obs: NodeId,
        grid: usize,
        batch: usize,
    ) -> Result<ForwardNodes> {
        let features = self.backbone.forward(g, obs, grid, batch)?;
        let (class_probs, box_offsets) = self.heads.forward(g, features)?;
        Ok(ForwardNodes {
            features,
            class_probs,
            box_offsets,
        })
    }
}

/// Per-cell features of one image, rows indexed `v · G + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct FeatureMap {
    pub grid: usize,
    pub features: Tensor,
}

impl FeatureMap {
    pub fn at(&self, u: usize, v: usize) -> &[f64] {
        self.features.row(v * self.grid + u)
    }
}

/// Per-cell predictions of one image, rows indexed `v · G + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct Predictions {
    pub grid: usize,
    /// `[G·G, K+1]`, softmax over the last axis.
    pub class_probs: Tensor,
    /// `[G·G, 4]` encoded `(Δcx, Δcy, log w, log h)`.
    pub box_offsets: Tensor,
}

impl Predictions {
    pub fn num_classes(&self) -> usize {
        self.class_probs.cols() - 1
    }
}

fn unstack(t: &Tensor, batch: usize, sample: usize) -> Tensor {
    let cols = t.cols();
    let cells = t.rows() / batch;
    let mut data = Vec::with_capacity(cells * cols);
    for c in 0..cells {
        data.extend_from_slice(t.row(c * batch + sample));
    }
    Tensor::matrix(cells, cols, data)
}

/// Feature maps and predictions for a batch of samples (inference only).
pub fn infer(
    params: &DetectorParams,
    samples: &[&Sample],
) -> Result<Vec<(FeatureMap, Predictions)>> {
    let batch = CellBatch::from_samples(samples)?;
    if batch.obs.cols() != params.obs_dim() {
        return Err(Error::Shape {
            node: 0,
            op: "backbone",
            reason: format!(
                "observation width {} does not match backbone input {}",
                batch.obs.cols(),
                params.obs_dim()
            ),
        });
    }
    let mut g = Graph::new();
    let bound = params.bind_frozen(&mut g);
    let nodes = bound.forward(&mut g, &batch)?;
    let (f, p, o) = (
        g.val(nodes.features),
        g.val(nodes.class_probs),
        g.val(nodes.box_offsets),
    );
    Ok((0..batch.batch)
        .map(|i| {
            (
                FeatureMap {
                    grid: batch.grid,
                    features: unstack(f, batch.batch, i),
                },
                Predictions {
                    grid: batch.grid,
                    class_probs: unstack(p, batch.batch, i),
                    box_offsets: unstack(o, batch.batch, i),
                },
            )
        })
        .collect())
}

pub fn backbone_forward(sample: &Sample, params: &DetectorParams) -> Result<FeatureMap> {
    Ok(infer(params, &[sample])?.remove(0).0)
}

pub fn heads_forward(featmap: &FeatureMap, heads: &HeadParams) -> Result<Predictions> {
    let mut g = Graph::new();
    let cls = heads.cls.bind_frozen(&mut g);
    let boxes = heads.boxes.bind_frozen(&mut g);
    let bound = BoundHeads { cls, boxes };
    let f = g.constant(featmap.features.clone());
    let (p, o) = bound.forward(&mut g, f)?;
    Ok(Predictions {
        grid: featmap.grid,
        class_probs: g.val(p).clone(),
        box_offsets: g.val(o).clone(),
    })
}

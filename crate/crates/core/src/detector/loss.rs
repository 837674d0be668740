use crate::autodiff::{Graph, NodeId, Tensor};
use crate::error::Result;
use crate::synthgen::{encode_box, Annotation};

use super::model::Predictions;

/// Weight of background cells in the classification term.
pub const BACKGROUND_WEIGHT: f64 = 0.25;

/// Per-cell training targets for one image; cells indexed `v · G + u`.
#[derive(Clone, Debug, PartialEq)]
pub struct CellTargets {
    pub grid: usize,
    /// Class label per cell, 0 = background.
    pub labels: Vec<usize>,
    /// Encoded box for positive cells.
    pub offsets: Vec<Option<[f64; 4]>>,
    /// Annotations dropped because another box claimed the same cell.
    pub collisions: usize,
}

impl CellTargets {
    pub fn positives(&self) -> impl Iterator<Item = (usize, [f64; 4])> + '_ {
        self.offsets
            .iter()
            .enumerate()
            .filter_map(|(c, o)| o.map(|o| (c, o)))
    }

    pub fn num_positives(&self) -> usize {
        self.offsets.iter().filter(|o| o.is_some()).count()
    }
}

/// Assigns each annotation to the cell containing its center. When two
/// boxes share a cell the larger one wins.
pub fn match_targets(annotations: &[Annotation], grid: usize) -> CellTargets {
    let cells = grid * grid;
    let mut labels = vec![0; cells];
    let mut offsets = vec![None; cells];
    let mut areas = vec![0.0f64; cells];
    let mut collisions = 0;
    for a in annotations {
        let (u, v) = a.bbox.center_cell(grid);
        let c = v * grid + u;
        if labels[c] != 0 {
            collisions += 1;
            log::warn!("two annotations map to cell ({u}, {v}); keeping the larger box");
            if a.bbox.area() <= areas[c] {
                continue;
            }
        }
        labels[c] = a.class;
        offsets[c] = Some(encode_box(&a.bbox, (u, v), grid));
        areas[c] = a.bbox.area();
    }
    CellTargets {
        grid,
        labels,
        offsets,
        collisions,
    }
}

/// Builds the detection loss for a cell-major batch (row `cell · B + b`):
/// mean over cells of background-weighted cross-entropy plus mean over
/// positive cells of smooth-L1 summed over the four offsets.
pub fn detection_loss_node(
    g: &mut Graph,
    class_probs: NodeId,
    box_offsets: NodeId,
    targets: &[CellTargets],
    bg_weight: f64,
) -> Result<NodeId> {
    let batch = targets.len();
    let cells = targets[0].labels.len();
    let width = g.val(class_probs).cols();
    let mut weights = vec![0.0; cells * batch * width];
    let mut pos_rows = Vec::new();
    let mut pos_targets = Vec::new();
    for (b, t) in targets.iter().enumerate() {
        for c in 0..cells {
            let row = c * batch + b;
            let label = t.labels[c];
            weights[row * width + label] = if label == 0 { bg_weight } else { 1.0 };
            if let Some(o) = t.offsets[c] {
                pos_rows.push(row);
                pos_targets.push(o);
            }
        }
    }
    let log_p = g.log(class_probs)?;
    let w = g.constant(Tensor::matrix(cells * batch, width, weights));
    let weighted = g.mul(log_p, w)?;
    let ce = g.reduce_mean(weighted)?;
    let ce = g.scale(ce, -(width as f64))?;
    if pos_rows.is_empty() {
        return Ok(ce);
    }
    let picked = g.select_rows(box_offsets, &pos_rows)?;
    let negated: Vec<f64> = pos_targets
        .iter()
        .flat_map(|o| o.iter().map(|v| -v))
        .collect();
    let neg_t = g.constant(Tensor::matrix(pos_rows.len(), 4, negated));
    let diff = g.add(picked, neg_t)?;
    let sl1 = g.smooth_l1(diff)?;
    let loc = g.reduce_mean(sl1)?;
    let loc = g.scale(loc, 4.0)?;
    g.add(ce, loc)
}

/// Detection loss of a single image's predictions.
pub fn detection_loss(preds: &Predictions, targets: &CellTargets, bg_weight: f64) -> Result<f64> {
    let mut g = Graph::new();
    let p = g.constant(preds.class_probs.clone());
    let o = g.constant(preds.box_offsets.clone());
    let loss = detection_loss_node(&mut g, p, o, std::slice::from_ref(targets), bg_weight)?;
    Ok(g.val(loss).item())
}

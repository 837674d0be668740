use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::par::{self, Exec};
use crate::synthgen::{decode_box, Annotation, BBox, Dataset, Sample};

use super::model::{infer, DetectorParams, Predictions};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    pub class: usize,
    pub score: f64,
    pub bbox: BBox,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalOptions {
    pub conf_thresh: f64,
    /// NMS suppression threshold.
    pub iou_thresh: f64,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            conf_thresh: 0.3,
            iou_thresh: 0.5,
        }
    }
}

/// IoU threshold for a detection to count as a true positive.
pub const MATCH_IOU: f64 = 0.5;

/// Emits one detection per (cell, foreground class) whose probability
/// exceeds `conf_thresh`.
pub fn decode_predictions(preds: &Predictions, conf_thresh: f64) -> Vec<Detection> {
    let g = preds.grid;
    let k = preds.num_classes();
    let mut out = Vec::new();
    for v in 0..g {
        for u in 0..g {
            let c = v * g + u;
            let probs = preds.class_probs.row(c);
            for (class, &score) in probs.iter().enumerate().take(k + 1).skip(1) {
                if score > conf_thresh {
                    out.push(Detection {
                        class,
                        score,
                        bbox: decode_box(preds.box_offsets.row(c), (u, v), g),
                    });
                }
            }
        }
    }
    out
}

fn corners(b: &BBox) -> [f64; 4] {
    [
        b.cx - b.w / 2.0,
        b.cy - b.h / 2.0,
        b.cx + b.w / 2.0,
        b.cy + b.h / 2.0,
    ]
}

pub fn iou(a: &BBox, b: &BBox) -> f64 {
    let (a, b) = (corners(a), corners(b));
    let ix = (a[2].min(b[2]) - a[0].max(b[0])).max(0.0);
    let iy = (a[3].min(b[3]) - a[1].max(b[1])).max(0.0);
    let inter = ix * iy;
    let area = |c: [f64; 4]| (c[2] - c[0]) * (c[3] - c[1]);
    let union = area(a) + area(b) - inter;
    if union <= 0.0 {
        0.0
    } else {
        inter / union
    }
}

fn by_score_desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

/// Greedy per-class suppression. Output is ordered by descending score;
/// equal scores keep their input order.
pub fn nms(detections: &[Detection], iou_thresh: f64) -> Vec<Detection> {
    let mut order: Vec<usize> = (0..detections.len()).collect();
    order.sort_by(|&i, &j| by_score_desc(detections[i].score, detections[j].score));
    let mut kept: Vec<Detection> = Vec::new();
    for i in order {
        let d = &detections[i];
        if kept
            .iter()
            .all(|k| k.class != d.class || iou(&k.bbox, &d.bbox) <= iou_thresh)
        {
            kept.push(*d);
        }
    }
    kept
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MapReport {
    /// AP per foreground class `1..=K`; `None` when the class has no ground truth.
    pub per_class_ap: Vec<Option<f64>>,
    pub map: f64,
    pub num_ground_truth: Vec<usize>,
}

/// AP of one class by all-points interpolation; detections are
/// `(image, score, box)` in any order.
pub fn average_precision(dets: &[(usize, f64, BBox)], gts: &[Vec<BBox>]) -> Option<f64> {
    let n_gt: usize = gts.iter().map(Vec::len).sum();
    if n_gt == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..dets.len()).collect();
    order.sort_by(|&i, &j| by_score_desc(dets[i].1, dets[j].1));
    let mut matched: Vec<Vec<bool>> = gts.iter().map(|g| vec![false; g.len()]).collect();
    let mut tp_flags = Vec::with_capacity(dets.len());
    for &i in &order {
        let (img, _, bbox) = &dets[i];
        let mut best: Option<(usize, f64)> = None;
        for (j, gt) in gts[*img].iter().enumerate() {
            if matched[*img][j] {
                continue;
            }
            let o = iou(bbox, gt);
            if best.is_none_or(|(_, b)| o > b) {
                best = Some((j, o));
            }
        }
        match best {
            Some((j, o)) if o >= MATCH_IOU => {
                matched[*img][j] = true;
                tp_flags.push(true);
            }
            _ => tp_flags.push(false),
        }
    }
    let mut precisions = Vec::with_capacity(tp_flags.len());
    let mut tp = 0usize;
    for (rank, &is_tp) in tp_flags.iter().enumerate() {
        tp += is_tp as usize;
        precisions.push(tp as f64 / (rank + 1) as f64);
    }
    // precision envelope from the right
    for i in (0..precisions.len().saturating_sub(1)).rev() {
        precisions[i] = precisions[i].max(precisions[i + 1]);
    }
    let sum: f64 = tp_flags
        .iter()
        .zip(&precisions)
        .filter(|(t, _)| **t)
        .map(|(_, p)| p)
        .fold(0.0, |a, p| a + p);
    Some(sum / n_gt as f64)
}

pub fn evaluate_map(
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
) -> MapReport {
    evaluate_map_with(Exec::default(), detections, ground_truth, num_classes)
}

pub fn evaluate_map_with(
    exec: Exec,
    detections: &[Vec<Detection>],
    ground_truth: &[Vec<Annotation>],
    num_classes: usize,
) -> MapReport {
    assert_eq!(
        detections.len(),
        ground_truth.len(),
        "one detection list per image"
    );
    let per_class: Vec<(Option<f64>, usize)> = par::map_range(exec, num_classes, |k| {
        let class = k + 1;
        let gts: Vec<Vec<BBox>> = ground_truth
            .iter()
            .map(|anns| {
                anns.iter()
                    .filter(|a| a.class == class)
                    .map(|a| a.bbox)
                    .collect()
            })
            .collect();
        let dets: Vec<(usize, f64, BBox)> = detections
            .iter()
            .enumerate()
            .flat_map(|(img, ds)| {
                ds.iter()
                    .filter(|d| d.class == class)
                    .map(move |d| (img, d.score, d.bbox))
            })
            .collect();
        let n: usize = gts.iter().map(Vec::len).sum();
        (average_precision(&dets, &gts), n)
    });
    let aps: Vec<f64> = per_class.iter().filter_map(|(ap, _)| *ap).collect();
    let map = if aps.is_empty() {
        0.0
    } else {
        aps.iter().sum::<f64>() / aps.len() as f64
    };
    MapReport {
        per_class_ap: per_class.iter().map(|(ap, _)| *ap).collect(),
        map,
        num_ground_truth: per_class.iter().map(|(_, n)| *n).collect(),
    }
}

#[derive(Clone, Debug)]
pub struct Evaluation {
    pub report: MapReport,
    /// Post-NMS detections per image, in dataset order.
    pub detections: Vec<Vec<Detection>>,
}

const INFER_CHUNK: usize = 64;

/// Runs the detector over `samples` and returns post-NMS detections per image.
pub fn detect(
    exec: Exec,
    params: &DetectorParams,
    samples: &[Sample],
    opts: &EvalOptions,
) -> Result<Vec<Vec<Detection>>> {
    let chunks: Vec<&[Sample]> = samples.chunks(INFER_CHUNK).collect();
    let per_chunk = par::map_slice(exec, &chunks, |chunk| -> Result<Vec<Vec<Detection>>> {
        let refs: Vec<&Sample> = chunk.iter().collect();
        Ok(infer(params, &refs)?
            .into_iter()
            .map(|(_, p)| nms(&decode_predictions(&p, opts.conf_thresh), opts.iou_thresh))
            .collect())
    });
    let mut out = Vec::with_capacity(samples.len());
    for chunk in per_chunk {
        out.extend(chunk?);
    }
    Ok(out)
}

/// Evaluates detection only; nothing outside `params` is consulted.
pub fn evaluate_detector(
    exec: Exec,
    params: &DetectorParams,
    dataset: &Dataset,
    opts: &EvalOptions,
) -> Result<Evaluation> {
    let detections = detect(exec, params, &dataset.samples, opts)?;
    let gts: Vec<Vec<Annotation>> = dataset
        .samples
        .iter()
        .map(|s| s.annotations().to_vec())
        .collect();
    let report = evaluate_map_with(exec, &detections, &gts, params.num_classes());
    Ok(Evaluation { report, detections })
}

/// CSV rows `image_id, class, score, cx, cy, w, h`.
pub fn detections_csv(dataset: &Dataset, detections: &[Vec<Detection>]) -> Result<Vec<u8>> {
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(["image_id", "class", "score", "cx", "cy", "w", "h"])?;
    for (sample, dets) in dataset.samples.iter().zip(detections) {
        for d in dets {
            w.write_record([
                sample.id.to_string(),
                d.class.to_string(),
                d.score.to_string(),
                d.bbox.cx.to_string(),
                d.bbox.cy.to_string(),
                d.bbox.w.to_string(),
                d.bbox.h.to_string(),
            ])?;
        }
    }
    w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
}

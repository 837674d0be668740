use serde::{Deserialize, Serialize};

use super::config::HdistConfig;
use crate::adapt::{estimate_h_divergence, HDivergenceEstimate, Scope};
use crate::detector::{infer, match_targets, DetectorParams, FeatureMap, Predictions};
use crate::error::{Error, Result};
use crate::par::{self, Exec};
use crate::synthgen::{Dataset, Sample};

const CHUNK: usize = 64;

/// Runs the detector over every sample, in order.
pub fn infer_all(
    exec: Exec,
    params: &DetectorParams,
    samples: &[Sample],
) -> Result<Vec<(FeatureMap, Predictions)>> {
    let chunks: Vec<&[Sample]> = samples.chunks(CHUNK).collect();
    let parts = par::map_slice(exec, &chunks, |chunk| {
        let refs: Vec<&Sample> = chunk.iter().collect();
        infer(params, &refs)
    });
    let mut out = Vec::with_capacity(samples.len());
    for part in parts {
        out.extend(part?);
    }
    Ok(out)
}

/// Most probable class of a cell, 0 for background.
pub fn predicted_class(preds: &Predictions, cell: usize) -> usize {
    let row = preds.class_probs.row(cell);
    let mut best = 0;
    for (k, &p) in row.iter().enumerate() {
        if p > row[best] {
            best = k;
        }
    }
    best
}

/// Cell features of a domain with the class each cell is attributed to:
/// ground truth on the source side, the detector's prediction on the
/// target side.
struct CellFeatures {
    rows: Vec<Vec<f64>>,
    classes: Vec<usize>,
}

fn source_cells(
    exec: Exec,
    params: &DetectorParams,
    ds: &Dataset,
    images: usize,
) -> Result<CellFeatures> {
    let samples = &ds.samples[..images.min(ds.len())];
    let maps = infer_all(exec, params, samples)?;
    let grid = ds.config.grid_size;
    let mut out = CellFeatures {
        rows: Vec::new(),
        classes: Vec::new(),
    };
    for (sample, (fm, _)) in samples.iter().zip(maps) {
        let targets = match_targets(sample.annotations(), grid);
        for cell in 0..grid * grid {
            out.rows.push(fm.features.row(cell).to_vec());
            out.classes.push(targets.labels[cell]);
        }
    }
    Ok(out)
}

fn target_cells(
    exec: Exec,
    params: &DetectorParams,
    ds: &Dataset,
    images: usize,
) -> Result<CellFeatures> {
    let samples = &ds.samples[..images.min(ds.len())];
    let maps = infer_all(exec, params, samples)?;
    let mut out = CellFeatures {
        rows: Vec::new(),
        classes: Vec::new(),
    };
    for (fm, preds) in maps {
        for cell in 0..fm.features.rows() {
            out.rows.push(fm.features.row(cell).to_vec());
            out.classes.push(predicted_class(&preds, cell));
        }
    }
    Ok(out)
}

/// One divergence entry; `d` is null with a reason when it could not be
/// estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdistEntry {
    pub scope: Scope,
    pub d: Option<f64>,
    pub estimate: Option<HDivergenceEstimate>,
    pub reason: Option<String>,
}

impl HdistEntry {
    fn from_result(scope: Scope, r: Result<HDivergenceEstimate>) -> Result<Self> {
        match r {
            Ok(e) => Ok(Self {
                scope,
                d: Some(e.d),
                estimate: Some(e),
                reason: None,
            }),
            Err(e @ Error::TooFewVectors { .. }) => Ok(Self {
                scope,
                d: None,
                estimate: None,
                reason: Some(e.to_string()),
            }),
            Err(e) => Err(e),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct HdistReport {
    pub seed: u64,
    pub images_per_domain: usize,
    pub marginal: HdistEntry,
    /// One entry per class `1..=K`; empty when conditional estimates are off.
    pub conditional: Vec<HdistEntry>,
}

impl HdistReport {
    pub fn conditional_d(&self) -> Vec<Option<f64>> {
        self.conditional.iter().map(|e| e.d).collect()
    }
}

/// Marginal and per-class divergences between the alignment-layer
/// features of two datasets. Conditional estimates pair source cells of
/// ground-truth class `k` with target cells predicted as `k`.
pub fn measure_hdist(
    exec: Exec,
    params: &DetectorParams,
    source: &Dataset,
    target: &Dataset,
    config: &HdistConfig,
    seed: u64,
) -> Result<HdistReport> {
    if source.is_empty() || target.is_empty() {
        return Err(Error::EmptyDataset(
            "divergence measurement needs both domains",
        ));
    }
    let s = source_cells(exec, params, source, config.images)?;
    let t = target_cells(exec, params, target, config.images)?;
    let view = |rows: &[Vec<f64>], keep: &dyn Fn(usize) -> bool| -> Vec<Vec<f64>> {
        rows.iter()
            .enumerate()
            .filter(|(i, _)| keep(*i))
            .map(|(_, r)| r.clone())
            .collect()
    };
    let estimate = |a: &[Vec<f64>], b: &[Vec<f64>], scope: Scope| {
        let ar: Vec<&[f64]> = a.iter().map(Vec::as_slice).collect();
        let br: Vec<&[f64]> = b.iter().map(Vec::as_slice).collect();
        HdistEntry::from_result(
            scope,
            estimate_h_divergence(&ar, &br, &config.probe, seed, scope),
        )
    };
    let marginal = estimate(&s.rows, &t.rows, Scope::Marginal)?;
    let mut conditional = Vec::new();
    if config.conditional {
        for k in 1..=params.num_classes() {
            let a = view(&s.rows, &|i| s.classes[i] == k);
            let b = view(&t.rows, &|i| t.classes[i] == k);
            conditional.push(estimate(&a, &b, Scope::Class(k))?);
        }
    }
    Ok(HdistReport {
        seed,
        images_per_domain: config.images,
        marginal,
        conditional,
    })
}

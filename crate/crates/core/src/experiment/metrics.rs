use std::collections::BTreeMap;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::adapt::WeightSummary;
use crate::error::{Error, Result};
use crate::trainer::Variant;

pub const BASELINE: &str = "baseline";

/// Outcome of one (variant, setting, repeat) run.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricsRecord {
    /// `baseline` or a variant name such as `M+WC`.
    pub variant: String,
    pub setting: String,
    pub shots: Option<usize>,
    pub repeat: usize,
    pub seed: u64,
    pub adapt_seed: Option<u64>,
    pub config_digest: String,
    pub pretrain_digest: String,
    pub map_target: f64,
    pub ap_target: Vec<Option<f64>>,
    pub map_source: f64,
    pub ap_source: Vec<Option<f64>>,
    pub d_marginal_before: Option<f64>,
    pub d_marginal_after: Option<f64>,
    pub d_conditional_before: Vec<Option<f64>>,
    pub d_conditional_after: Vec<Option<f64>>,
    pub transferability: Option<WeightSummary>,
    pub iterations_run: usize,
    pub stopped_early: bool,
    pub target_label_reads: usize,
    pub target_train_images: usize,
    pub wall_time_s: f64,
}

impl MetricsRecord {
    /// File stem under `runs/`, unique within one experiment.
    pub fn file_stem(&self) -> String {
        let variant = self.variant.replace('+', "_");
        format!("{variant}__{}__r{:02}", self.setting, self.repeat)
    }

    pub fn final_weights(&self) -> Option<&[f64]> {
        self.transferability
            .as_ref()
            .map(|t| t.final_weights.as_slice())
    }
}

fn mean_std(xs: &[f64]) -> (f64, f64) {
    if xs.is_empty() {
        return (f64::NAN, f64::NAN);
    }
    let n = xs.len() as f64;
    let mean = xs.iter().fold(0.0, |a, x| a + x) / n;
    if xs.len() < 2 {
        return (mean, 0.0);
    }
    let var = xs.iter().fold(0.0, |a, x| a + (x - mean).powi(2)) / (n - 1.0);
    (mean, var.sqrt())
}

fn fmt(x: f64) -> String {
    if x.is_nan() {
        String::new()
    } else {
        format!("{x:.6}")
    }
}

/// Mean and sample standard deviation of selected metrics over the runs
/// of one (variant, setting) group.
#[derive(Clone, Debug, PartialEq)]
pub struct AggregateRow {
    pub variant: String,
    pub setting: String,
    pub runs: usize,
    pub map_target: (f64, f64),
    pub map_source: (f64, f64),
    pub ap_target: Vec<(f64, f64)>,
    pub d_marginal_before: (f64, f64),
    pub d_marginal_after: (f64, f64),
    pub final_weights: Vec<(f64, f64)>,
    pub config_digest: String,
}

fn variant_rank(name: &str) -> usize {
    if name == BASELINE {
        return 0;
    }
    Variant::ALL
        .iter()
        .position(|v| v.name() == name)
        .map_or(Variant::ALL.len() + 1, |i| i + 1)
}

/// Groups records by (variant, setting). Groups are ordered baseline
/// first and then by variant and setting, and runs within a group by
/// repeat, so the result does not depend on the input order.
pub fn aggregate(records: &[MetricsRecord]) -> Vec<AggregateRow> {
    let mut groups: BTreeMap<(usize, String, String), Vec<&MetricsRecord>> = BTreeMap::new();
    for r in records {
        let key = (
            variant_rank(&r.variant),
            r.variant.clone(),
            r.setting.clone(),
        );
        groups.entry(key).or_default().push(r);
    }
    groups
        .into_iter()
        .map(|(key, mut rs)| {
            rs.sort_by_key(|r| r.repeat);
            let key = (key.1, key.2);
            let col = |f: &dyn Fn(&MetricsRecord) -> Option<f64>| {
                mean_std(&rs.iter().filter_map(|r| f(r)).collect::<Vec<_>>())
            };
            let k = rs.iter().map(|r| r.ap_target.len()).max().unwrap_or(0);
            let kw = rs
                .iter()
                .filter_map(|r| r.final_weights().map(<[f64]>::len))
                .max()
                .unwrap_or(0);
            AggregateRow {
                variant: key.0.clone(),
                setting: key.1.clone(),
                runs: rs.len(),
                map_target: col(&|r| Some(r.map_target)),
                map_source: col(&|r| Some(r.map_source)),
                ap_target: (0..k)
                    .map(|i| col(&|r| r.ap_target.get(i).copied().flatten()))
                    .collect(),
                d_marginal_before: col(&|r| r.d_marginal_before),
                d_marginal_after: col(&|r| r.d_marginal_after),
                final_weights: (0..kw)
                    .map(|i| col(&|r| r.final_weights().and_then(|w| w.get(i).copied())))
                    .collect(),
                config_digest: rs[0].config_digest.clone(),
            }
        })
        .collect()
}

/// Aggregate table as CSV. Wall times are left out so identical
/// experiments give identical bytes.
pub fn aggregate_csv(records: &[MetricsRecord]) -> Result<Vec<u8>> {
    let rows = aggregate(records);
    let k = rows
        .iter()
        .map(|r| r.ap_target.len().max(r.final_weights.len()))
        .max()
        .unwrap_or(0);
    let mut header: Vec<String> = [
        "variant",
        "setting",
        "runs",
        "map_target_mean",
        "map_target_std",
        "map_source_mean",
        "map_source_std",
    ]
    .map(String::from)
    .to_vec();
    for i in 1..=k {
        header.push(format!("ap_target_{i}_mean"));
        header.push(format!("ap_target_{i}_std"));
    }
    header.extend(
        [
            "d_marginal_before_mean",
            "d_marginal_before_std",
            "d_marginal_after_mean",
            "d_marginal_after_std",
        ]
        .map(String::from),
    );
    for i in 1..=k {
        header.push(format!("s_{i}_final_mean"));
        header.push(format!("s_{i}_final_std"));
    }
    header.push("config_digest".into());
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(&header)?;
    let pair = |p: (f64, f64)| [fmt(p.0), fmt(p.1)];
    let nan = (f64::NAN, f64::NAN);
    for r in rows {
        let mut rec = vec![r.variant.clone(), r.setting.clone(), r.runs.to_string()];
        rec.extend(pair(r.map_target));
        rec.extend(pair(r.map_source));
        for i in 0..k {
            rec.extend(pair(r.ap_target.get(i).copied().unwrap_or(nan)));
        }
        rec.extend(pair(r.d_marginal_before));
        rec.extend(pair(r.d_marginal_after));
        for i in 0..k {
            rec.extend(pair(r.final_weights.get(i).copied().unwrap_or(nan)));
        }
        rec.push(r.config_digest.clone());
        w.write_record(&rec)?;
    }
    w.into_inner().map_err(|e| Error::Io(e.into_error()))
}

/// Reads every `*.json` record in `dir`, sorted by file name.
pub fn read_records(dir: &Path) -> Result<Vec<MetricsRecord>> {
    let mut paths: Vec<_> = std::fs::read_dir(dir)?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|x| x == "json"))
        .collect();
    paths.sort();
    paths
        .iter()
        .map(|p| {
            let bytes = std::fs::read(p)?;
            serde_json::from_slice(&bytes)
                .map_err(|e| Error::Format(format!("{}: {e}", p.display())))
        })
        .collect()
}

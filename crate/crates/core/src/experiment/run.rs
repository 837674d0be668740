use std::time::Instant;

use log::{info, warn};
use serde::Serialize;

use super::config::{ExperimentConfig, Mode, SettingConfig};
use super::data::{prepare_datasets, Datasets};
use super::hdist::{measure_hdist, HdistReport};
use super::metrics::{aggregate_csv, MetricsRecord, BASELINE};
use crate::adapt::WeightSummary;
use crate::detector::{evaluate_detector, DetectorParams, MapReport};
use crate::error::Result;
use crate::fsio::OutputDir;
use crate::par::Exec;
use crate::synthgen::{sample_ufda_subset, Dataset};
use crate::trainer::{
    joint_adapt, loss_curve_csv, pretrain, AdaptResult, Checkpoint, ConditionalMode,
    PretrainResult, Variant,
};

pub const PRETRAINED_CHECKPOINT: &str = "checkpoints/pretrained.ckpt";

/// Detection quality of one parameter set on both test sets.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct EvalSummary {
    pub target: MapReport,
    pub source: MapReport,
}

pub fn evaluate_both(
    config: &ExperimentConfig,
    params: &DetectorParams,
    data: &Datasets,
) -> Result<EvalSummary> {
    let exec = Exec::default();
    Ok(EvalSummary {
        target: evaluate_detector(exec, params, &data.target_test, &config.eval)?.report,
        source: evaluate_detector(exec, params, &data.source_test, &config.eval)?.report,
    })
}

/// Divergences on the test sets, or `None` when measurement is disabled.
pub fn hdist_on_tests(
    config: &ExperimentConfig,
    params: &DetectorParams,
    data: &Datasets,
) -> Result<Option<HdistReport>> {
    if !config.hdist.enabled {
        return Ok(None);
    }
    let seed = config.seed("hdist", 0);
    measure_hdist(
        Exec::default(),
        params,
        &data.source_test,
        &data.target_test,
        &config.hdist,
        seed,
    )
    .map(Some)
}

pub fn run_pretrain(config: &ExperimentConfig, data: &Datasets) -> Result<PretrainResult> {
    info!("pre-training on {} source images", data.source_train.len());
    pretrain(
        &config.schedule,
        &data.source_train,
        config.seed("pretrain", 0),
        &config.digest(),
    )
}

/// Target training set of one run: everything under UDA, a fresh
/// per-class subset under UFDA.
pub fn target_for_run(
    config: &ExperimentConfig,
    setting: &SettingConfig,
    data: &Datasets,
    repeat: usize,
) -> Result<Dataset> {
    match setting.mode {
        Mode::Uda => Ok(data.target_train.clone()),
        Mode::Ufda => sample_ufda_subset(
            &data.target_train,
            setting.shots,
            config.seed("ufda", repeat as u64),
        ),
    }
}

/// A pretrained model and its baseline measurements, shared by every
/// adaptation run of an experiment.
pub struct Session {
    pub config: ExperimentConfig,
    pub digest: String,
    pub data: Datasets,
    pub pretrained: Checkpoint,
    pub pretrain_digest: String,
    pub baseline: EvalSummary,
    pub hdist_before: Option<HdistReport>,
}

/// One finished adaptation run.
pub struct RunOutput {
    pub record: MetricsRecord,
    pub result: AdaptResult,
}

impl Session {
    pub fn new(config: ExperimentConfig, data: Datasets, pretrained: Checkpoint) -> Result<Self> {
        let baseline = evaluate_both(&config, &pretrained.detector, &data)?;
        let hdist_before = hdist_on_tests(&config, &pretrained.detector, &data)?;
        Ok(Self {
            digest: config.digest(),
            pretrain_digest: pretrained.digest(),
            config,
            data,
            pretrained,
            baseline,
            hdist_before,
        })
    }

    fn d_before(&self) -> (Option<f64>, Vec<Option<f64>>) {
        match &self.hdist_before {
            Some(h) => (h.marginal.d, h.conditional_d()),
            None => (None, Vec::new()),
        }
    }

    pub fn baseline_record(&self) -> MetricsRecord {
        let (marginal, conditional) = self.d_before();
        MetricsRecord {
            variant: BASELINE.into(),
            setting: self.config.setting.label(),
            shots: (self.config.setting.mode == Mode::Ufda).then_some(self.config.setting.shots),
            repeat: 0,
            seed: self.config.master_seed,
            adapt_seed: None,
            config_digest: self.digest.clone(),
            pretrain_digest: self.pretrain_digest.clone(),
            map_target: self.baseline.target.map,
            ap_target: self.baseline.target.per_class_ap.clone(),
            map_source: self.baseline.source.map,
            ap_source: self.baseline.source.per_class_ap.clone(),
            d_marginal_before: marginal,
            d_marginal_after: marginal,
            d_conditional_before: conditional.clone(),
            d_conditional_after: conditional,
            transferability: None,
            iterations_run: 0,
            stopped_early: false,
            target_label_reads: 0,
            target_train_images: 0,
            wall_time_s: 0.0,
        }
    }

    pub fn run(
        &self,
        variant: Variant,
        setting: &SettingConfig,
        repeat: usize,
    ) -> Result<RunOutput> {
        let start = Instant::now();
        let target = target_for_run(&self.config, setting, &self.data, repeat)?;
        let adapt_seed = self.config.seed("adapt", repeat as u64);
        info!(
            "adapting {variant} ({setting}, repeat {repeat}) on {} target images",
            target.len()
        );
        let result = joint_adapt(
            &self.pretrained,
            &self.data.source_train,
            &target,
            variant,
            &self.config.schedule,
            adapt_seed,
        )?;
        let params = &result.checkpoint.detector;
        let eval = evaluate_both(&self.config, params, &self.data)?;
        let after = hdist_on_tests(&self.config, params, &self.data)?;
        let (marginal, conditional) = self.d_before();
        let record = MetricsRecord {
            variant: variant.name().into(),
            setting: setting.label(),
            shots: (setting.mode == Mode::Ufda).then_some(setting.shots),
            repeat,
            seed: self.config.master_seed,
            adapt_seed: Some(adapt_seed),
            config_digest: self.digest.clone(),
            pretrain_digest: self.pretrain_digest.clone(),
            map_target: eval.target.map,
            ap_target: eval.target.per_class_ap,
            map_source: eval.source.map,
            ap_source: eval.source.per_class_ap,
            d_marginal_before: marginal,
            d_marginal_after: after.as_ref().and_then(|h| h.marginal.d),
            d_conditional_before: conditional,
            d_conditional_after: after.map(|h| h.conditional_d()).unwrap_or_default(),
            transferability: variant
                .conditional()
                .ne(&ConditionalMode::Off)
                .then(|| WeightSummary::from_trajectory(&result.weight_trajectory)),
            iterations_run: result.iterations_run,
            stopped_early: result.stopped_early,
            target_label_reads: result.label_reads,
            target_train_images: target.len(),
            wall_time_s: start.elapsed().as_secs_f64(),
        };
        Ok(RunOutput { record, result })
    }
}

/// Pre-trains (writing the checkpoint and loss curve) and builds a session.
pub fn start_session(config: &ExperimentConfig, out: &OutputDir) -> Result<Session> {
    config.validate()?;
    let data = prepare_datasets(config, out)?;
    let pre = run_pretrain(config, &data)?;
    out.write(PRETRAINED_CHECKPOINT, &pre.checkpoint.encode())?;
    out.write(
        "curves/pretrain.csv",
        &loss_curve_csv(&pre.log, config.gen.num_classes)?,
    )?;
    Session::new(config.clone(), data, pre.checkpoint)
}

#[derive(Clone, Debug)]
pub struct ExperimentOutcome {
    pub records: Vec<MetricsRecord>,
    pub aggregate_csv: Vec<u8>,
}

/// Reparses a record from its JSON form, so in-memory aggregates use
/// exactly the values on disk.
fn via_json(record: &MetricsRecord) -> Result<(Vec<u8>, MetricsRecord)> {
    let bytes = serde_json::to_vec_pretty(record)?;
    let parsed = serde_json::from_slice(&bytes)?;
    Ok((bytes, parsed))
}

/// Datasets → pre-training → adaptation per variant and repeat →
/// evaluation and divergences. Writes one JSON record per run under
/// `runs/`, adapted checkpoints and loss curves, and `aggregate.csv`.
pub fn run_experiment(config: &ExperimentConfig, out: &OutputDir) -> Result<ExperimentOutcome> {
    let session = start_session(config, out)?;
    out.write("config.toml", config.to_toml()?.as_bytes())?;
    let mut records = Vec::new();
    let mut emit = |record: MetricsRecord| -> Result<()> {
        let (bytes, parsed) = via_json(&record)?;
        out.write(format!("runs/{}.json", record.file_stem()), &bytes)?;
        records.push(parsed);
        Ok(())
    };
    emit(session.baseline_record())?;
    let setting = &config.setting;
    for repeat in 0..setting.runs() {
        for &variant in &config.variants {
            let run = session.run(variant, setting, repeat)?;
            if run.record.target_label_reads != 0 {
                warn!(
                    "{} read target labels {} times",
                    variant, run.record.target_label_reads
                );
            }
            let stem = run.record.file_stem();
            out.write(
                format!("checkpoints/{stem}.ckpt"),
                &run.result.checkpoint.encode(),
            )?;
            out.write(
                format!("curves/{stem}.csv"),
                &loss_curve_csv(&run.result.log, config.gen.num_classes)?,
            )?;
            emit(run.record)?;
        }
    }
    let csv = aggregate_csv(&records)?;
    out.write("aggregate.csv", &csv)?;
    Ok(ExperimentOutcome {
        records,
        aggregate_csv: csv,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationRow {
    pub variant: String,
    pub map_target: f64,
    pub map_source: f64,
    pub ap_target: Vec<Option<f64>>,
    pub pretrain_digest: String,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct AblationTable {
    pub config_digest: String,
    pub setting: String,
    pub rows: Vec<AblationRow>,
}

fn ap_cell(ap: Option<f64>) -> String {
    ap.map_or_else(|| "-".to_owned(), |a| format!("{a:.4}"))
}

impl AblationTable {
    pub fn to_csv(&self) -> Result<Vec<u8>> {
        let k = self
            .rows
            .iter()
            .map(|r| r.ap_target.len())
            .max()
            .unwrap_or(0);
        let mut header: Vec<String> = ["variant", "map_target", "map_source"]
            .map(String::from)
            .to_vec();
        header.extend((1..=k).map(|i| format!("ap_target_{i}")));
        header.extend(["pretrain_digest", "config_digest"].map(String::from));
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(&header)?;
        for r in &self.rows {
            let mut rec = vec![
                r.variant.clone(),
                format!("{:.6}", r.map_target),
                format!("{:.6}", r.map_source),
            ];
            rec.extend((0..k).map(|i| {
                r.ap_target
                    .get(i)
                    .copied()
                    .flatten()
                    .map_or(String::new(), |a| format!("{a:.6}"))
            }));
            rec.push(r.pretrain_digest.clone());
            rec.push(self.config_digest.clone());
            w.write_record(&rec)?;
        }
        w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
    }

    /// Fixed-width text rendering of the table.
    pub fn to_text(&self) -> String {
        let k = self
            .rows
            .iter()
            .map(|r| r.ap_target.len())
            .max()
            .unwrap_or(0);
        let mut header = vec![
            "variant".to_owned(),
            "mAP target".into(),
            "mAP source".into(),
        ];
        header.extend((1..=k).map(|i| format!("AP {i}")));
        let body: Vec<Vec<String>> = self
            .rows
            .iter()
            .map(|r| {
                let mut row = vec![
                    r.variant.clone(),
                    format!("{:.4}", r.map_target),
                    format!("{:.4}", r.map_source),
                ];
                row.extend((0..k).map(|i| ap_cell(r.ap_target.get(i).copied().flatten())));
                row
            })
            .collect();
        let widths: Vec<usize> = (0..header.len())
            .map(|c| {
                body.iter()
                    .map(|r| r[c].len())
                    .chain([header[c].len()])
                    .max()
                    .unwrap_or(0)
            })
            .collect();
        let line = |cells: &[String]| {
            cells
                .iter()
                .zip(&widths)
                .enumerate()
                .map(|(i, (c, w))| {
                    if i == 0 {
                        format!("{c:<w$}")
                    } else {
                        format!("{c:>w$}")
                    }
                })
                .collect::<Vec<_>>()
                .join("  ")
        };
        let mut text = format!(
            "setting {}  config {}\n",
            self.setting,
            &self.config_digest[..12.min(self.config_digest.len())]
        );
        text.push_str(&line(&header));
        text.push('\n');
        text.push_str(
            &"-".repeat(widths.iter().sum::<usize>() + 2 * widths.len().saturating_sub(1)),
        );
        text.push('\n');
        for row in &body {
            text.push_str(&line(row));
            text.push('\n');
        }
        text
    }
}

/// Baseline plus every configured variant from one shared pretrained
/// checkpoint, on the first run of the configured setting.
pub fn run_ablation(config: &ExperimentConfig, out: &OutputDir) -> Result<AblationTable> {
    let session = start_session(config, out)?;
    let mut rows = vec![AblationRow {
        variant: BASELINE.into(),
        map_target: session.baseline.target.map,
        map_source: session.baseline.source.map,
        ap_target: session.baseline.target.per_class_ap.clone(),
        pretrain_digest: session.pretrain_digest.clone(),
    }];
    for &variant in &config.variants {
        let run = session.run(variant, &config.setting, 0)?;
        rows.push(AblationRow {
            variant: variant.name().into(),
            map_target: run.record.map_target,
            map_source: run.record.map_source,
            ap_target: run.record.ap_target,
            pretrain_digest: run.record.pretrain_digest,
        });
    }
    let table = AblationTable {
        config_digest: session.digest.clone(),
        setting: config.setting.label(),
        rows,
    };
    out.write("ablation.csv", &table.to_csv()?)?;
    out.write("ablation.txt", table.to_text().as_bytes())?;
    Ok(table)
}

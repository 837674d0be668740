use super::hdist::{infer_all, predicted_class};
use crate::detector::{match_targets, DetectorParams, FEATURE_DIM};
use crate::error::Result;
use crate::par::Exec;
use crate::synthgen::Dataset;

pub fn feature_header() -> Vec<String> {
    let mut header: Vec<String> = ["image_id", "u", "v", "domain", "gt", "pred"]
        .map(String::from)
        .to_vec();
    header.extend((0..FEATURE_DIM).map(|j| format!("f{j:02}")));
    header
}

/// One CSV row per cell with its alignment-layer features. The
/// ground-truth column is −1 when the dataset withholds its labels.
pub fn export_features(exec: Exec, params: &DetectorParams, dataset: &Dataset) -> Result<Vec<u8>> {
    let grid = dataset.config.grid_size;
    let maps = infer_all(exec, params, &dataset.samples)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    w.write_record(feature_header())?;
    let mut record = Vec::with_capacity(6 + FEATURE_DIM);
    for (sample, (fm, preds)) in dataset.samples.iter().zip(&maps) {
        let gt =
            (!dataset.labels_withheld).then(|| match_targets(sample.annotations(), grid).labels);
        for v in 0..grid {
            for u in 0..grid {
                let cell = v * grid + u;
                record.clear();
                record.push(sample.id.to_string());
                record.push(u.to_string());
                record.push(v.to_string());
                record.push(sample.domain.tag().to_owned());
                record.push(
                    gt.as_ref()
                        .map_or("-1".to_owned(), |labels| labels[cell].to_string()),
                );
                record.push(predicted_class(preds, cell).to_string());
                record.extend(fm.at(u, v).iter().map(|x| x.to_string()));
                w.write_record(&record)?;
            }
        }
    }
    w.into_inner().map_err(|e| crate::Error::Io(e.into_error()))
}

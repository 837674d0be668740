//! Toy single-shot grid detector: per-cell backbone with one neighborhood
//! mixing step, classification and box heads, target matching, detection
//! loss, decoding, NMS and VOC-style mAP@0.5.

mod eval;
mod loss;
mod model;

pub use eval::{
    average_precision, decode_predictions, detect, detections_csv, evaluate_detector, evaluate_map,
    evaluate_map_with, iou, nms, Detection, EvalOptions, Evaluation, MapReport, MATCH_IOU,
};
pub use loss::{
    detection_loss, detection_loss_node, match_targets, CellTargets, BACKGROUND_WEIGHT,
};
pub use model::{
    backbone_forward, heads_forward, infer, neighborhood_matrix, BackboneParams, BoundBackbone,
    BoundDetector, BoundHeads, CellBatch, DetectorParams, FeatureMap, ForwardNodes, HeadParams,
    Predictions, FEATURE_DIM,
};

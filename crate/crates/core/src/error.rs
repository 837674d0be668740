use std::path::PathBuf;

use thiserror::Error;

pub type Result<T, E = Error> = std::result::Result<T, E>;

#[derive(Debug, Error)]
pub enum Error {
    #[error("tensor data length {len} does not match shape {shape:?}")]
    ShapeData { shape: Vec<usize>, len: usize },

    #[error("node {node} ({op}): {reason}")]
    Shape {
        node: usize,
        op: &'static str,
        reason: String,
    },

    #[error("node {node} ({op}) produced a non-finite value")]
    NonFinite { node: usize, op: &'static str },

    #[error("placeholder `{0}` is not bound")]
    Unbound(String),

    #[error("duplicate leaf name `{0}` in graph")]
    DuplicateName(String),

    #[error("backward called before forward evaluation (node {0} has no value)")]
    BackwardBeforeForward(usize),

    #[error("seed gradient shape {seed:?} does not match output shape {output:?}")]
    SeedShape {
        seed: Vec<usize>,
        output: Vec<usize>,
    },

    #[error("invalid configuration: {0}")]
    Config(String),

    #[error("class {class} appears in only {available} images, {requested} requested")]
    InsufficientClass {
        class: usize,
        available: usize,
        requested: usize,
    },

    #[error("too few feature vectors for divergence estimate: source {source_count}, target {target_count}, need {required}")]
    TooFewVectors {
        source_count: usize,
        target_count: usize,
        required: usize,
    },

    #[error("non-finite gradient for parameter `{0}`")]
    NonFiniteGradient(String),

    #[error("training diverged at iteration {iteration}: loss {loss}")]
    Diverged { iteration: usize, loss: f64 },

    #[error("unknown variant `{0}` (expected one of M, C, WC, M+C, M+WC)")]
    UnknownVariant(String),

    #[error("checkpoint phase is {found}, expected {expected}")]
    Phase {
        expected: &'static str,
        found: &'static str,
    },

    #[error("empty dataset: {0}")]
    EmptyDataset(&'static str),

    #[error("malformed file: {0}")]
    Format(String),

    #[error("refusing to overwrite {0} (pass --force)")]
    Clobber(PathBuf),

    #[error("path {0} escapes the output directory")]
    OutsideOutput(PathBuf),

    #[error(transparent)]
    Io(#[from] std::io::Error),

    #[error(transparent)]
    Json(#[from] serde_json::Error),

    #[error(transparent)]
    Csv(#[from] csv::Error),
}

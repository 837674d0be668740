use std::fmt;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::adapt::ProbeConfig;
use crate::detector::EvalOptions;
use crate::error::{Error, Result};
use crate::seed::{derive_seed, sha256_hex};
use crate::synthgen::GenConfig;
use crate::trainer::{TrainSchedule, Variant};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Uda,
    Ufda,
}

impl FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "uda" => Ok(Mode::Uda),
            "ufda" => Ok(Mode::Ufda),
            _ => Err(Error::Config(format!(
                "unknown setting `{s}` (expected uda or ufda)"
            ))),
        }
    }
}

/// Target-data protocol: the full unlabeled target set, or `shots` images
/// per class drawn afresh for each of `repeats` runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SettingConfig {
    pub mode: Mode,
    pub shots: usize,
    pub repeats: usize,
}

impl Default for SettingConfig {
    fn default() -> Self {
        Self {
            mode: Mode::Uda,
            shots: 3,
            repeats: 10,
        }
    }
}

impl SettingConfig {
    pub fn uda() -> Self {
        Self::default()
    }

    pub fn ufda(shots: usize) -> Self {
        Self {
            mode: Mode::Ufda,
            shots,
            ..Self::default()
        }
    }

    /// Runs per variant: one under UDA, `repeats` under UFDA.
    pub fn runs(&self) -> usize {
        match self.mode {
            Mode::Uda => 1,
            Mode::Ufda => self.repeats,
        }
    }

    /// Short label such as `uda` or `ufda-2`.
    pub fn label(&self) -> String {
        match self.mode {
            Mode::Uda => "uda".into(),
            Mode::Ufda => format!("ufda-{}", self.shots),
        }
    }
}

impl fmt::Display for SettingConfig {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.label())
    }
}

/// Image counts of the four generated splits.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataSizes {
    pub source_train: usize,
    pub target_train: usize,
    pub source_test: usize,
    pub target_test: usize,
}

impl Default for DataSizes {
    fn default() -> Self {
        Self {
            source_train: 2000,
            target_train: 1000,
            source_test: 500,
            target_test: 500,
        }
    }
}

/// Divergence measurement on test-set features.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct HdistConfig {
    pub enabled: bool,
    /// Also estimate the per-class divergences.
    pub conditional: bool,
    /// Test images per domain whose cells feed the probe.
    pub images: usize,
    pub probe: ProbeConfig,
}

impl Default for HdistConfig {
    fn default() -> Self {
        Self {
            enabled: true,
            conditional: true,
            images: 200,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Drives every random stream, including the benchmark world.
    pub master_seed: u64,
    pub out_dir: PathBuf,
    /// `gen.seed` is replaced by the master seed.
    pub gen: GenConfig,
    pub data: DataSizes,
    pub schedule: TrainSchedule,
    pub variants: Vec<Variant>,
    pub setting: SettingConfig,
    pub eval: EvalOptions,
    pub hdist: HdistConfig,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        Self {
            master_seed: 0,
            out_dir: PathBuf::from("out"),
            gen: GenConfig::default(),
            data: DataSizes::default(),
            schedule: TrainSchedule::default(),
            variants: Variant::ALL.to_vec(),
            setting: SettingConfig::default(),
            eval: EvalOptions::default(),
            hdist: HdistConfig::default(),
        }
    }
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        let config: Self =
            toml::from_str(text).map_err(|e| Error::Config(e.message().trim().to_owned()))?;
        Ok(config)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| Error::Config(format!("cannot read {}: {e}", path.display())))?;
        Self::from_toml(&text).map_err(|e| match e {
            Error::Config(msg) => Error::Config(format!("{}: {msg}", path.display())),
            other => other,
        })
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks every field and reports all offending ones at once.
    pub fn validate(&self) -> Result<()> {
        let mut problems = Vec::new();
        if let Err(Error::Config(msg)) = self.world().validate() {
            problems.extend(msg.split("; ").map(|m| format!("gen.{m}")));
        }
        self.schedule.collect_problems(&mut problems);
        for (name, n) in [
            ("data.source_train", self.data.source_train),
            ("data.target_train", self.data.target_train),
            ("data.source_test", self.data.source_test),
            ("data.target_test", self.data.target_test),
        ] {
            if n == 0 {
                problems.push(format!("{name} must be positive"));
            }
        }
        if self.setting.mode == Mode::Ufda {
            if !(1..=3).contains(&self.setting.shots) {
                problems.push(format!(
                    "setting.shots must be 1, 2 or 3 (got {})",
                    self.setting.shots
                ));
            }
            if self.setting.repeats == 0 {
                problems.push("setting.repeats must be positive".into());
            }
        }
        let mut seen = Vec::new();
        for v in &self.variants {
            if seen.contains(v) {
                problems.push(format!("variants lists {v} twice"));
            }
            seen.push(*v);
        }
        if !(0.0..=1.0).contains(&self.eval.conf_thresh) {
            problems.push("eval.conf_thresh must lie in [0, 1]".into());
        }
        if !(0.0..=1.0).contains(&self.eval.iou_thresh) {
            problems.push("eval.iou_thresh must lie in [0, 1]".into());
        }
        let probe = &self.hdist.probe;
        if self.hdist.enabled {
            if self.hdist.images == 0 {
                problems.push("hdist.images must be positive".into());
            }
            if !(probe.lr.is_finite() && probe.lr > 0.0) {
                problems.push("hdist.probe.lr must be positive".into());
            }
            if !(0.0..1.0).contains(&probe.momentum) {
                problems.push("hdist.probe.momentum must lie in [0, 1)".into());
            }
            if !(probe.train_fraction > 0.0 && probe.train_fraction < 1.0) {
                problems.push("hdist.probe.train_fraction must lie in (0, 1)".into());
            }
            if probe.min_vectors < 2 {
                problems.push("hdist.probe.min_vectors must be at least 2".into());
            }
            if probe.max_vectors < probe.min_vectors {
                problems.push("hdist.probe.max_vectors must not be below min_vectors".into());
            }
        }
        if problems.is_empty() {
            Ok(())
        } else {
            Err(Error::Config(problems.join("; ")))
        }
    }

    /// Generator configuration actually used, seeded by the master seed.
    pub fn world(&self) -> GenConfig {
        GenConfig {
            seed: self.master_seed,
            ..self.gen.clone()
        }
    }

    /// Canonical serialization: compact JSON of the whole configuration
    /// with `out_dir` blanked, so the same experiment written to different
    /// directories shares a digest.
    pub fn canonical_json(&self) -> String {
        let mut c = self.clone();
        c.out_dir = PathBuf::new();
        c.gen.seed = self.master_seed;
        serde_json::to_string(&c).expect("config serializes")
    }

    pub fn digest(&self) -> String {
        sha256_hex(self.canonical_json().as_bytes())
    }

    pub fn seed(&self, tag: &str, index: u64) -> u64 {
        derive_seed(self.master_seed, tag, index)
    }
}

/// Command-line overrides applied on top of a loaded configuration.
#[derive(Clone, Debug, Default)]
pub struct Overrides {
    pub out_dir: Option<PathBuf>,
    pub seed: Option<u64>,
    pub variants: Vec<Variant>,
    pub mode: Option<Mode>,
    pub shots: Option<usize>,
}

impl Overrides {
    pub fn apply(&self, config: &mut ExperimentConfig) {
        if let Some(dir) = &self.out_dir {
            config.out_dir = dir.clone();
        }
        if let Some(seed) = self.seed {
            config.master_seed = seed;
        }
        if !self.variants.is_empty() {
            config.variants = self.variants.clone();
        }
        if let Some(mode) = self.mode {
            config.setting.mode = mode;
        }
        if let Some(shots) = self.shots {
            config.setting.shots = shots;
            if self.mode.is_none() {
                config.setting.mode = Mode::Ufda;
            }
        }
    }
}

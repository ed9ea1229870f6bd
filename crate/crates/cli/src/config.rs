use std::path::{Path, PathBuf};

use her2_core::calibrate::CalibrationOptions;
use her2_core::evaluation::Bandwidth;
use her2_core::io::SCHEMA_VERSION;
use her2_core::synth::CohortSpec;
use her2_core::trainer::{Stage, TrainConfig};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Printed under `--help`. Keep in sync with the structs below; a test
/// checks that every key appears here.
pub const CONFIG_HELP: &str = "\
CONFIG FILE (TOML, unknown keys are errors; relative paths resolve against the config file's directory)

  schema_version = 1                  config schema version
  seed = <u64>                        master seed for generation, splitting, initialization and shuffling;
                                      required by generate, pretrain and train-weak (or pass --seed)
  workers = <n>                       worker threads (default: all cores; --workers overrides)

  [paths]
  cohort = \"cohort.jsonl\"             slide JSONL written by generate, read by every later stage
  checkpoints = \"checkpoints\"         checkpoints, logits dump, calibration and training logs
  reports = \"reports\"                 verdicts, metrics, confusion CSVs, KDE tables, agreement
  raters = \"raters\"                   per-rater label files (rater0.jsonl, rater1.jsonl, ...)
  evaluation_cohort = <path>          optional separate cohort for score/report instead of the test split

  [cohort]                            synthetic cohort (generate)
  slides_per_class = [50, 50, 50, 50]
  patches_per_slide = [30, 60]        inclusive range
  feature_dim = 8
  class_means = []                    4 vectors of length feature_dim; empty = axis-aligned defaults
  mean_separation = 4.0               distance of each default mean from the origin, in feature_sigma units
  feature_sigma = 1.0
  mean_shift = []                     optional offset added to every feature vector
  composition_profiles = [[...], ...] Dirichlet parameters over patch classes, one row per slide label
  tumor_fraction_range = [0.15, 1.0]
  heterogeneous_rate = 0.0            share of slides drawn with a sub-10% class two or more levels up

  [cohort.rater_noise]                optional; enables rater label files
  matrix = [[...], ...]               row = declared class, column = reported class probability
  raters = 2                          raters including the reference rater (rater0 reports the declared class)
  corrupt_labels = false              train on rater1's labels instead of the declared ones

  [split]
  ratios = [0.8, 0.1, 0.1]            train / validation / test, stratified by slide label

  [pretrain] and [weak]               training stages
  stage = \"pretrain\" | \"weak\"         optional guard against using a section for the wrong stage
  epochs = 100
  patience = 20                       pretrain: epochs without improvement; weak: consecutive clean epochs
  learning_rate = 0.001
  momentum = 0.9                      Nesterov momentum
  min_tumor_fraction = 0.1            patches at or below this tumor fraction are dropped
  batch_size = <n>                    minibatch size; omitted = one update per epoch
  passes = 1                          optimizer passes over each weak-stage selection
  reduction = \"mean\" | \"sum\"          loss reduction within a batch

  [calibration]
  mode = \"simplex\" | \"smoothed\"       Nelder-Mead on the hard objective, or gradient descent on a softmax relaxation
  positive = false                    optimize log(alpha) so every scale stays positive
  initial_step = 0.25
  restarts = true                     extra searches from 1 +/- restart_offset along each axis
  restart_offset = 0.5
  max_evaluations = 500
  diameter_tolerance = 0.0001
  temperature = 1.0                   smoothed mode only
  smoothed_iterations = 200
  smoothed_step = 1.0

  [report]
  bandwidth = \"silverman\" | { fixed = <h> }   KDE bandwidth
";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Paths {
    pub cohort: PathBuf,
    pub checkpoints: PathBuf,
    pub reports: PathBuf,
    pub raters: PathBuf,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub evaluation_cohort: Option<PathBuf>,
}

impl Default for Paths {
    fn default() -> Self {
        Paths {
            cohort: "cohort.jsonl".into(),
            checkpoints: "checkpoints".into(),
            reports: "reports".into(),
            raters: "raters".into(),
            evaluation_cohort: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SplitConfig {
    pub ratios: [f64; 3],
}

impl Default for SplitConfig {
    fn default() -> Self {
        SplitConfig { ratios: [0.8, 0.1, 0.1] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ReportConfig {
    pub bandwidth: Bandwidth,
}

impl Default for ReportConfig {
    fn default() -> Self {
        ReportConfig {
            bandwidth: Bandwidth::Silverman,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    pub schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub workers: Option<usize>,
    pub paths: Paths,
    pub cohort: CohortSpec,
    pub split: SplitConfig,
    pub pretrain: TrainConfig,
    pub weak: TrainConfig,
    pub calibration: CalibrationOptions,
    pub report: ReportConfig,
    /// Directory that relative `paths` resolve against.
    #[serde(skip)]
    pub base: PathBuf,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            schema_version: SCHEMA_VERSION,
            seed: None,
            workers: None,
            paths: Paths::default(),
            cohort: CohortSpec::default(),
            split: SplitConfig::default(),
            pretrain: TrainConfig {
                stage: Some(Stage::Pretrain),
                ..TrainConfig::default()
            },
            weak: TrainConfig {
                stage: Some(Stage::Weak),
                ..TrainConfig::default()
            },
            calibration: CalibrationOptions::default(),
            report: ReportConfig::default(),
            base: PathBuf::new(),
        }
    }
}

/// Seeds live at the top level only.
const NESTED_SEEDS: [&str; 3] = ["cohort", "pretrain", "weak"];

impl PipelineConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        let table: toml::Table = text.parse().map_err(|e| CliError::validation("config", e))?;
        for section in NESTED_SEEDS {
            if table.get(section).and_then(|s| s.get("seed")).is_some() {
                return Err(CliError::validation(
                    "config",
                    format!("{section}.seed is not allowed; set the top-level seed"),
                ));
            }
        }
        let cfg: PipelineConfig = table.try_into().map_err(|e| CliError::validation("config", e))?;
        if cfg.schema_version != SCHEMA_VERSION {
            return Err(CliError::validation(
                "config",
                format!("unsupported schema_version {}", cfg.schema_version),
            ));
        }
        Ok(cfg)
    }

    /// Reads `path`; relative `paths` entries resolve against its directory.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io("config", path, e))?;
        let mut cfg = Self::parse(&text)?;
        cfg.base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok(cfg)
    }

    pub fn resolve(&self, p: &Path) -> PathBuf {
        if p.is_relative() {
            self.base.join(p)
        } else {
            p.to_path_buf()
        }
    }

    /// Copies the master seed into every seeded section.
    pub fn apply_seed(&mut self) {
        if let Some(seed) = self.seed {
            self.cohort.seed = seed;
            self.pretrain.seed = seed;
            self.weak.seed = seed;
        }
    }

    pub fn require_seed(&self, stage: &str) -> Result<u64, CliError> {
        self.seed
            .ok_or_else(|| CliError::validation(stage, "a seed is required (config `seed` or --seed)"))
    }

    /// TOML echo of the effective configuration, with paths as written.
    pub fn to_toml(&self) -> String {
        toml::to_string(&EffectiveConfig::from(self)).expect("config serializes")
    }
}

/// Effective-config view: nested seeds are omitted so the file can be fed
/// back in as a config.
#[derive(Serialize)]
struct EffectiveConfig<'a> {
    schema_version: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    seed: Option<u64>,
    #[serde(skip_serializing_if = "Option::is_none")]
    workers: Option<usize>,
    paths: &'a Paths,
    cohort: toml::Value,
    split: &'a SplitConfig,
    pretrain: toml::Value,
    weak: toml::Value,
    calibration: &'a CalibrationOptions,
    report: &'a ReportConfig,
}

fn without_seed<T: Serialize>(value: &T) -> toml::Value {
    let mut v = toml::Value::try_from(value).expect("section serializes");
    if let Some(t) = v.as_table_mut() {
        t.remove("seed");
    }
    v
}

impl<'a> From<&'a PipelineConfig> for EffectiveConfig<'a> {
    fn from(c: &'a PipelineConfig) -> Self {
        EffectiveConfig {
            schema_version: c.schema_version,
            seed: c.seed,
            workers: c.workers,
            paths: &c.paths,
            cohort: without_seed(&c.cohort),
            split: &c.split,
            pretrain: without_seed(&c.pretrain),
            weak: without_seed(&c.weak),
            calibration: &c.calibration,
            report: &c.report,
        }
    }
}

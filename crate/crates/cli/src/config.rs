//! Run configuration: one JSON document with a section per subcommand.

use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use harmonize::classify::{Method, Pipeline, DEFAULT_FOLDS};
use harmonize::cyclegan::{Direction, ModelConfig, StoppingRule};
use harmonize::data::{SiteEffectSpec, DEFAULT_NOISE_SIGMA};
use harmonize::rng::derive_seed;
use serde::{Deserialize, Serialize};

pub const SCHEMA_VERSION: u32 = 1;
pub const RESOLVED_CONFIG_FILE: &str = "resolved_config.json";

fn schema_version() -> u32 {
    SCHEMA_VERSION
}

fn one() -> usize {
    1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default = "schema_version")]
    pub schema_version: u32,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "one")]
    pub threads: usize,
    /// Left out of the snapshot so outputs do not depend on where they land.
    #[serde(default, skip_serializing)]
    pub out: Option<PathBuf>,
    #[serde(default)]
    pub simulate: SimulateConfig,
    #[serde(default)]
    pub train: TrainConfig,
    #[serde(default)]
    pub transform: TransformConfig,
    #[serde(default)]
    pub correct: CorrectConfig,
    #[serde(default)]
    pub evaluate: EvaluateConfig,
    #[serde(default)]
    pub reconstruct: ReconstructConfig,
    #[serde(default)]
    pub report: ReportConfig,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            schema_version: SCHEMA_VERSION,
            seed: 0,
            threads: 1,
            out: None,
            simulate: SimulateConfig::default(),
            train: TrainConfig::default(),
            transform: TransformConfig::default(),
            correct: CorrectConfig::default(),
            evaluate: EvaluateConfig::default(),
            reconstruct: ReconstructConfig::default(),
            report: ReportConfig::default(),
        }
    }
}

impl RunConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: RunConfig = serde_json::from_str(text).context("invalid run configuration")?;
        if cfg.schema_version != SCHEMA_VERSION {
            bail!(
                "unsupported config schema_version {}; this build reads version {SCHEMA_VERSION}",
                cfg.schema_version
            );
        }
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)
            .with_context(|| format!("reading config {}", path.display()))?;
        Self::from_json(&text).with_context(|| format!("in {}", path.display()))
    }

    /// Output directory, required by every subcommand.
    pub fn out_dir(&self) -> Result<&Path> {
        self.out
            .as_deref()
            .context("no output directory: pass --out DIR or set \"out\" in the config")
    }

    /// Fill in seed-dependent defaults so the snapshot records what ran.
    pub fn resolve(&mut self) {
        if self.simulate.phantom.site_b.is_none() {
            self.simulate.phantom.site_b =
                Some(SiteEffectSpec::scanner_b(derive_seed(self.seed, "site-b")));
        }
        if self.simulate.phantom.site_a.is_none() {
            self.simulate.phantom.site_a = Some(SiteEffectSpec::identity());
        }
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<PathBuf> {
        std::fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
        let path = dir.join(RESOLVED_CONFIG_FILE);
        let mut json = serde_json::to_string_pretty(self)?;
        json.push('\n');
        std::fs::write(&path, json).with_context(|| format!("writing {}", path.display()))?;
        Ok(path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SimulateMode {
    #[default]
    Phantom,
    Box1,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimulateConfig {
    pub mode: SimulateMode,
    pub phantom: PhantomConfig,
    pub box1: Box1Config,
    /// PGM previews written per set.
    pub previews: usize,
}

/// Disjoint subject cohorts. Each site gets its own `train` and `test`
/// subjects; every remaining subject is imaged at both sites.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Cohorts {
    pub train: usize,
    pub test: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PhantomConfig {
    pub subjects: usize,
    pub size: usize,
    pub site_a: Option<SiteEffectSpec>,
    pub site_b: Option<SiteEffectSpec>,
    pub cohorts: Option<Cohorts>,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            subjects: 64,
            size: 32,
            site_a: None,
            site_b: None,
            cohorts: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DigitSource {
    /// IDX files under `mnist_dir`.
    #[default]
    Mnist,
    /// Procedurally rendered digits.
    Synthetic,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Box1Config {
    pub source: DigitSource,
    pub mnist_dir: Option<PathBuf>,
    /// Number of training and test digits used (all available if `None`).
    pub train_images: Option<usize>,
    pub test_images: Option<usize>,
    pub noise_sigma: f64,
}

impl Default for Box1Config {
    fn default() -> Self {
        Self {
            source: DigitSource::Mnist,
            mnist_dir: None,
            train_images: None,
            test_images: None,
            noise_sigma: DEFAULT_NOISE_SIGMA,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub data: Option<PathBuf>,
    /// Set translated by G (the source domain).
    pub x: String,
    /// Set G translates into (the reference domain).
    pub y: String,
    pub model: ModelConfig,
    pub batch_size: usize,
    pub stopping: StoppingRule,
    /// Checkpoint directory to continue from.
    pub resume: Option<PathBuf>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            data: None,
            x: "train_b".into(),
            y: "train_a".into(),
            model: ModelConfig::default(),
            batch_size: 8,
            stopping: StoppingRule::default(),
            resume: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TransformConfig {
    pub checkpoint: Option<PathBuf>,
    pub data: Option<PathBuf>,
    pub sets: Vec<String>,
    pub direction: Direction,
}

impl Default for TransformConfig {
    fn default() -> Self {
        Self {
            checkpoint: None,
            data: None,
            sets: Vec::new(),
            direction: Direction::XToY,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CorrectionMethod {
    Linear,
    Gp,
    Gan,
}

impl CorrectionMethod {
    pub fn method(self) -> Method {
        match self {
            Self::Linear => Method::Linear,
            Self::Gp => Method::Gp,
            Self::Gan => Method::Gan,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorrectConfig {
    pub method: CorrectionMethod,
    pub data: Option<PathBuf>,
    /// Sets to correct; each keeps its name in the output dataset.
    pub sets: Vec<String>,
    /// Regression methods: control sets of the reference site (coded 0)
    /// and of the site being corrected (coded 1).
    pub reference_controls: String,
    pub site_controls: String,
    /// Content label marking controls inside the control sets.
    pub control_label: u32,
    pub gp: GpConfig,
    /// GAN: checkpoint and translation direction.
    pub checkpoint: Option<PathBuf>,
    pub direction: Direction,
    /// GAN: translate only sets with this domain tag and copy the rest, as
    /// regression correction leaves reference-site images alone.
    pub translate_domain: Option<String>,
}

impl Default for CorrectConfig {
    fn default() -> Self {
        Self {
            method: CorrectionMethod::Linear,
            data: None,
            sets: Vec::new(),
            reference_controls: "train_a".into(),
            site_controls: "train_b".into(),
            control_label: 0,
            gp: GpConfig::default(),
            checkpoint: None,
            direction: Direction::XToY,
            translate_domain: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GpConfig {
    pub restarts: usize,
    pub max_iter: usize,
    pub grad_tol: f64,
}

impl Default for GpConfig {
    fn default() -> Self {
        Self {
            restarts: 8,
            max_iter: 500,
            grad_tol: 1e-6,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LabelTarget {
    /// Which set (site) an image came from.
    #[default]
    Domain,
    /// The content label carried by every image.
    Content,
}

/// The images one method contributes to an evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MethodInput {
    pub method: Method,
    pub data: PathBuf,
    pub sets: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvaluateConfig {
    pub target: LabelTarget,
    pub inputs: Vec<MethodInput>,
    pub pipeline: Pipeline,
    pub folds: usize,
    /// Permutation control: shuffle the labels before evaluating.
    pub shuffle_labels: bool,
    /// Also write a two-component PCA scatter per method.
    pub scatter: bool,
}

impl Default for EvaluateConfig {
    fn default() -> Self {
        Self {
            target: LabelTarget::Domain,
            inputs: Vec::new(),
            pipeline: Pipeline::default(),
            folds: DEFAULT_FOLDS,
            shuffle_labels: false,
            scatter: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SetRef {
    pub data: PathBuf,
    pub set: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CorrectedRef {
    pub method: Method,
    pub data: PathBuf,
    pub set: String,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReconstructConfig {
    /// Ground-truth images at the reference site.
    pub reference: Option<SetRef>,
    /// The same subjects as imaged at the other site, uncorrected.
    pub baseline: Option<SetRef>,
    pub corrected: Vec<CorrectedRef>,
}

#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ReportConfig {
    /// Output directories of earlier runs to summarise.
    pub runs: Vec<PathBuf>,
}

pub fn required<'a, T>(value: &'a Option<T>, what: &str) -> Result<&'a T> {
    value
        .as_ref()
        .with_context(|| format!("config is missing {what}"))
}

//! Experiment configuration: a TOML file plus dotted-key command-line
//! overrides, resolved into one canonical form that is embedded in every
//! report together with its content hash.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

#[derive(Debug)]
pub enum ConfigError {
    Io(std::io::Error),
    Parse(String),
    Invalid(String),
}

impl fmt::Display for ConfigError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ConfigError::Io(e) => write!(f, "config io error: {e}"),
            ConfigError::Parse(m) => write!(f, "config parse error: {m}"),
            ConfigError::Invalid(m) => write!(f, "invalid config: {m}"),
        }
    }
}

impl std::error::Error for ConfigError {}

impl From<std::io::Error> for ConfigError {
    fn from(e: std::io::Error) -> Self {
        ConfigError::Io(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Naive,
    Eib,
    Ips,
    Snips,
    Dr,
    DrJointOff,
    Mr,
}

impl Method {
    pub fn name(&self) -> &'static str {
        match self {
            Method::Naive => "naive",
            Method::Eib => "eib",
            Method::Ips => "ips",
            Method::Snips => "snips",
            Method::Dr => "dr",
            Method::DrJointOff => "dr_joint_off",
            Method::Mr => "mr",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", tag = "kind")]
pub enum DatasetSpec {
    /// Ratings files on disk.
    File {
        train_path: PathBuf,
        test_path: PathBuf,
        /// "coat_ascii" or "triplet_tsv".
        format: String,
        #[serde(default = "default_scale_min")]
        rating_min: f64,
        #[serde(default = "default_scale_max")]
        rating_max: f64,
    },
    /// Semi-synthetic data generated on the fly with ground truth.
    Synthetic {
        num_users: usize,
        num_items: usize,
        /// Density of the base MNAR sample the completion is fitted on.
        base_density: f64,
        bias_level: u8,
        exposure_rate: f64,
        base_seed: u64,
        /// Uniform exposure rate of the generated MAR test sample.
        #[serde(default = "default_mar_rate")]
        mar_rate: f64,
    },
    /// A previously synthesized directory (see the `synthesize` verb).
    SyntheticDir { path: PathBuf },
}

fn default_scale_min() -> f64 {
    1.0
}
fn default_scale_max() -> f64 {
    5.0
}
fn default_mar_rate() -> f64 {
    0.1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    /// Propensity estimators by name: "naive_bayes_uniform",
    /// "user_frequency", "constant:<p>", "oracle".
    pub propensities: Vec<String>,
    /// One imputation model per listed dimension.
    pub imputation_dims: Vec<usize>,
    #[serde(default = "default_clip_floor")]
    pub clip_floor: f64,
}

fn default_clip_floor() -> f64 {
    mrrec_core::propensity::DEFAULT_CLIP_FLOOR
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BackboneSpec {
    /// "mf" or "neural".
    pub kind: String,
    pub dim: usize,
    #[serde(default)]
    pub hidden: usize,
}

/// Training knobs shared by all methods; MR-specific fields are ignored by
/// the weighted baselines.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    #[serde(default = "default_lambda")]
    pub lambda: f64,
    #[serde(default = "default_lr")]
    pub learning_rate: f64,
    #[serde(default = "default_epochs")]
    pub epochs: usize,
    #[serde(default = "default_batch_eta")]
    pub batch_size_eta: usize,
    #[serde(default = "default_batch_pred")]
    pub batch_size_pred: usize,
    #[serde(default = "default_batch_imp")]
    pub batch_size_imputation: usize,
    #[serde(default = "default_max_rounds")]
    pub max_rounds: usize,
    #[serde(default = "default_patience")]
    pub early_stop_patience: usize,
    #[serde(default = "default_positive_threshold")]
    pub positive_threshold: f64,
    /// Share of the test file held out for validation-driven early
    /// stopping; the rest is the evaluation set.
    #[serde(default = "default_val_fraction")]
    pub validation_fraction: f64,
}

fn default_lambda() -> f64 {
    1.0
}
fn default_lr() -> f64 {
    0.02
}
fn default_epochs() -> usize {
    20
}
fn default_batch_eta() -> usize {
    4096
}
fn default_batch_pred() -> usize {
    4096
}
fn default_batch_imp() -> usize {
    256
}
fn default_max_rounds() -> usize {
    30
}
fn default_patience() -> usize {
    6
}
fn default_positive_threshold() -> f64 {
    4.0
}
fn default_val_fraction() -> f64 {
    0.3
}

impl Default for TrainSpec {
    fn default() -> Self {
        toml::from_str("").expect("all TrainSpec fields have defaults")
    }
}

/// Optional grid axes expanded by the `sweep` verb.
#[derive(Debug, Clone, PartialEq, Default, Serialize, Deserialize)]
pub struct SweepSpec {
    #[serde(default)]
    pub methods: Vec<Method>,
    #[serde(default)]
    pub bias_levels: Vec<u8>,
    #[serde(default)]
    pub lambdas: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub dataset: DatasetSpec,
    pub method: Method,
    pub ensemble: EnsembleSpec,
    pub backbone: BackboneSpec,
    #[serde(default)]
    pub train: TrainSpec,
    #[serde(default = "default_metrics")]
    pub metrics: Vec<String>,
    pub seeds: Vec<u64>,
    #[serde(default)]
    pub out_dir: Option<PathBuf>,
    /// Monte-Carlo trials for bias oracles on synthetic ground truth.
    #[serde(default = "default_trials")]
    pub bias_trials: usize,
    #[serde(default)]
    pub sweep: Option<SweepSpec>,
}

fn default_metrics() -> Vec<String> {
    vec!["mse".into(), "auc".into(), "ndcg@5".into(), "ndcg@10".into()]
}
fn default_trials() -> usize {
    200
}

impl ExperimentConfig {
    /// Read a TOML config file, apply `--set key=value` dotted overrides
    /// (later entries win), then validate.
    pub fn load(path: &std::path::Path, overrides: &[String]) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path)?;
        Self::from_toml(&text, overrides)
    }

    pub fn from_toml(text: &str, overrides: &[String]) -> Result<Self, ConfigError> {
        let mut value: toml::Value =
            toml::from_str(text).map_err(|e| ConfigError::Parse(e.to_string()))?;
        for ov in overrides {
            apply_override(&mut value, ov)?;
        }
        let config: ExperimentConfig =
            value.try_into().map_err(|e| ConfigError::Parse(e.to_string()))?;
        config.validate()?;
        Ok(config)
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        if self.seeds.is_empty() {
            return Err(ConfigError::Invalid("seeds must be nonempty".into()));
        }
        if self.method == Method::Mr
            && (self.ensemble.propensities.is_empty() || self.ensemble.imputation_dims.is_empty())
        {
            return Err(ConfigError::Invalid(
                "method mr requires at least one propensity and one imputation model".into(),
            ));
        }
        if !(self.ensemble.clip_floor > 0.0 && self.ensemble.clip_floor < 1.0) {
            return Err(ConfigError::Invalid(format!(
                "clip_floor must be in (0,1), got {}",
                self.ensemble.clip_floor
            )));
        }
        match self.backbone.kind.as_str() {
            "mf" => {}
            "neural" => {
                if self.backbone.hidden == 0 {
                    return Err(ConfigError::Invalid(
                        "neural backbone needs hidden > 0".into(),
                    ));
                }
            }
            k => return Err(ConfigError::Invalid(format!("unknown backbone kind {k:?}"))),
        }
        for p in &self.ensemble.propensities {
            parse_propensity_name(p)?;
        }
        for m in &self.metrics {
            parse_metric_name(m)?;
        }
        if let DatasetSpec::Synthetic { bias_level, .. } = self.dataset {
            if !(1..=3).contains(&bias_level) {
                return Err(ConfigError::Invalid(format!(
                    "bias_level must be 1..=3, got {bias_level}"
                )));
            }
        }
        if let DatasetSpec::File { format, .. } = &self.dataset {
            dataset_format(format)?;
        }
        Ok(())
    }

    /// Canonical resolved TOML; the report embeds this plus its hash.
    pub fn canonical_toml(&self) -> String {
        toml::to_string_pretty(self).expect("config serializes")
    }

    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        h.update(self.canonical_toml().as_bytes());
        let out = h.finalize();
        out.iter().map(|b| format!("{b:02x}")).collect()
    }
}

pub fn dataset_format(name: &str) -> Result<mrrec_core::RatingFormat, ConfigError> {
    match name {
        "coat_ascii" => Ok(mrrec_core::RatingFormat::CoatAscii),
        "triplet_tsv" => Ok(mrrec_core::RatingFormat::TripletTsv),
        other => Err(ConfigError::Invalid(format!("unknown dataset format {other:?}"))),
    }
}

/// Known metric names: "mse", "auc", "ndcg@K".
pub fn parse_metric_name(name: &str) -> Result<Option<usize>, ConfigError> {
    match name {
        "mse" | "auc" => Ok(None),
        _ => {
            if let Some(k) = name.strip_prefix("ndcg@") {
                let k: usize = k
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("bad metric {name:?}")))?;
                if k == 0 {
                    return Err(ConfigError::Invalid("ndcg@0 is undefined".into()));
                }
                Ok(Some(k))
            } else {
                Err(ConfigError::Invalid(format!("unknown metric {name:?}")))
            }
        }
    }
}

/// Validate a propensity estimator name, returning the constant when the
/// "constant:<p>" form is used.
pub fn parse_propensity_name(name: &str) -> Result<Option<f64>, ConfigError> {
    match name {
        "naive_bayes_uniform" | "user_frequency" | "oracle" => Ok(None),
        _ => {
            if let Some(v) = name.strip_prefix("constant:") {
                let p: f64 = v
                    .parse()
                    .map_err(|_| ConfigError::Invalid(format!("bad propensity {name:?}")))?;
                if !(p > 0.0 && p <= 1.0) {
                    return Err(ConfigError::Invalid(format!(
                        "constant propensity must be in (0,1], got {p}"
                    )));
                }
                Ok(Some(p))
            } else {
                Err(ConfigError::Invalid(format!("unknown propensity estimator {name:?}")))
            }
        }
    }
}

/// Apply one `key.path=value` override onto the raw TOML document. The
/// value text is parsed as TOML if possible, else taken as a string.
fn apply_override(root: &mut toml::Value, entry: &str) -> Result<(), ConfigError> {
    let (path, raw) = entry
        .split_once('=')
        .ok_or_else(|| ConfigError::Parse(format!("override {entry:?} is not key=value")))?;
    let parsed: toml::Value = match toml::from_str::<toml::Value>(&format!("v = {raw}")) {
        Ok(toml::Value::Table(t)) => t["v"].clone(),
        _ => toml::Value::String(raw.to_string()),
    };
    let mut node = root;
    let parts: Vec<&str> = path.split('.').collect();
    for (depth, part) in parts.iter().enumerate() {
        let table = node.as_table_mut().ok_or_else(|| {
            ConfigError::Parse(format!("override path {path:?} crosses a non-table value"))
        })?;
        if depth == parts.len() - 1 {
            table.insert(part.to_string(), parsed);
            return Ok(());
        }
        node = table
            .entry(part.to_string())
            .or_insert_with(|| toml::Value::Table(toml::map::Map::new()));
    }
    unreachable!("loop returns on the last path segment")
}

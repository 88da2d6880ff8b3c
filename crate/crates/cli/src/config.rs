//! Declarative run description: defaults, JSON file, `--set` overrides.

use std::path::{Path, PathBuf};

use hvrnn::data::{SmmnistConfig, TEST_SET_SIZE};
use hvrnn::eval::EvalConfig;
use hvrnn::hvrnn::{preset, Level, ModelConfig};
use hvrnn::train::TrainSchedule;
use serde::{Deserialize, Serialize};
use serde_json::{Map, Value};

use crate::CliError;

/// Environment variable naming the default digit directory.
pub const DATA_DIR_ENV: &str = "HVRNN_DATA_DIR";

pub const MNIST_IMAGES: &str = "train-images-idx3-ubyte";
pub const MNIST_LABELS: &str = "train-labels-idx1-ubyte";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelSection {
    /// Named level layout; when set it determines `levels`.
    pub preset: Option<String>,
    pub frame_size: usize,
    pub image_channels: usize,
    pub width: f64,
    pub levels: Vec<Level>,
    pub decoder_recurrent_stages: usize,
    pub dense: bool,
}

impl Default for ModelSection {
    fn default() -> Self {
        let d = ModelConfig::desk();
        Self {
            preset: Some("1-8".into()),
            frame_size: d.frame_size,
            image_channels: d.image_channels,
            width: d.width,
            levels: d.levels,
            decoder_recurrent_stages: d.decoder_recurrent_stages,
            dense: d.dense,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DigitSource {
    /// MNIST IDX files if `digits_dir` holds them, else synthetic.
    Auto,
    Mnist,
    Synthetic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataSection {
    pub smmnist: SmmnistConfig,
    pub train_sequences: usize,
    pub test_sequences: usize,
    pub digit_source: DigitSource,
    /// Directory with the MNIST training IDX files.
    pub digits_dir: Option<PathBuf>,
    /// Glyph count when digits are synthetic.
    pub synthetic_count: usize,
}

impl Default for DataSection {
    fn default() -> Self {
        Self {
            smmnist: SmmnistConfig { canvas: 32, num_digits: 1, digit_size: 16, ..Default::default() },
            train_sequences: 2000,
            test_sequences: TEST_SET_SIZE,
            digit_source: DigitSource::Auto,
            digits_dir: None,
            synthetic_count: 1000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GenerateSection {
    pub n_samples: usize,
    /// Predicted frames; 0 uses `data.smmnist.horizon`.
    pub horizon: usize,
    /// Test sequence whose context frames seed the rollout.
    pub sequence: usize,
}

impl Default for GenerateSection {
    fn default() -> Self {
        Self { n_samples: 2, horizon: 0, sequence: 0 }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AblateSection {
    pub presets: Vec<String>,
    pub warmup: Vec<bool>,
    pub dense: Vec<bool>,
    /// Decoder ConvLSTM counts; empty keeps the base model's.
    pub decoder_recurrent_stages: Vec<usize>,
}

impl Default for AblateSection {
    fn default() -> Self {
        Self { presets: vec!["1".into(), "1-8".into()], warmup: vec![true, false], dense: vec![true], decoder_recurrent_stages: Vec::new() }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RunConfig {
    pub model: ModelSection,
    pub data: DataSection,
    pub train: TrainSchedule,
    pub eval: EvalConfig,
    pub generate: GenerateSection,
    pub ablate: AblateSection,
    pub out: PathBuf,
    /// Master seed; copied into `train.seed` and `eval.seed`.
    pub seed: u64,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            model: ModelSection::default(),
            data: DataSection::default(),
            train: TrainSchedule::default(),
            eval: EvalConfig::default(),
            generate: GenerateSection::default(),
            ablate: AblateSection::default(),
            out: PathBuf::from("runs/default"),
            seed: 0,
        }
    }
}

fn config_err(field: impl Into<String>, detail: impl Into<String>) -> CliError {
    CliError::Core(hvrnn::Error::Config { field: field.into(), detail: detail.into() })
}

/// Parse `key=value`; the value is JSON when it parses as JSON, else a string.
pub fn parse_override(s: &str) -> Result<(String, Value), CliError> {
    let (k, v) = s.split_once('=').ok_or_else(|| config_err("--set", format!("`{s}` is not key=value")))?;
    if k.is_empty() || k.split('.').any(str::is_empty) {
        return Err(config_err("--set", format!("`{k}` is not a dotted key")));
    }
    let value = serde_json::from_str(v).unwrap_or_else(|_| Value::String(v.to_string()));
    Ok((k.to_string(), value))
}

fn set_path(root: &mut Value, key: &str, value: Value) -> Result<(), CliError> {
    let mut node = root;
    let parts: Vec<&str> = key.split('.').collect();
    for (i, part) in parts.iter().enumerate() {
        let last = i + 1 == parts.len();
        node = match node {
            Value::Array(items) => {
                let idx: usize = part.parse().map_err(|_| config_err(key, format!("`{part}` is not an array index")))?;
                let len = items.len();
                items.get_mut(idx).ok_or_else(|| config_err(key, format!("index {idx} out of range ({len} items)")))?
            }
            Value::Object(map) => map.entry(part.to_string()).or_insert(if last { Value::Null } else { Value::Object(Map::new()) }),
            _ => return Err(config_err(key, format!("`{}` is not an object", parts[..i].join(".")))),
        };
    }
    *node = value;
    Ok(())
}

fn merge(base: &mut Value, top: Value) {
    match (base, top) {
        (Value::Object(b), Value::Object(t)) => {
            for (k, v) in t {
                match b.get_mut(&k) {
                    Some(slot) => merge(slot, v),
                    None => {
                        b.insert(k, v);
                    }
                }
            }
        }
        (slot, v) => *slot = v,
    }
}

fn has_path(v: &Value, key: &str) -> bool {
    key.split('.').try_fold(v, |n, p| n.get(p)).is_some()
}

/// Everything that feeds a resolved config.
#[derive(Clone, Debug, Default)]
pub struct ConfigSources {
    pub file: Option<PathBuf>,
    pub overrides: Vec<(String, Value)>,
}

/// Defaults, then the file, then the overrides in order, then derived fields.
pub fn resolve(src: &ConfigSources) -> Result<RunConfig, CliError> {
    let mut user = Value::Object(Map::new());
    if let Some(path) = &src.file {
        let text = std::fs::read_to_string(path).map_err(|e| config_err("--config", format!("cannot read {}: {e}", path.display())))?;
        let v: Value = serde_json::from_str(&text).map_err(|e| config_err("--config", format!("{}: {e}", path.display())))?;
        if !v.is_object() {
            return Err(config_err("--config", "the config file must hold a JSON object"));
        }
        user = v;
    }
    for (k, v) in &src.overrides {
        set_path(&mut user, k, v.clone())?;
    }
    let mut root = serde_json::to_value(RunConfig::default()).expect("defaults serialize");
    // Explicit levels without a preset mean a custom layout.
    let custom_levels = has_path(&user, "model.levels") && !has_path(&user, "model.preset");
    merge(&mut root, user);
    if custom_levels {
        root["model"]["preset"] = Value::Null;
    }
    let mut cfg: RunConfig = serde_path_to_error::deserialize(root).map_err(|e| config_err(e.path().to_string(), e.inner().to_string()))?;
    if let Some(name) = &cfg.model.preset {
        cfg.model.levels = preset(name)?;
    }
    cfg.train.seed = cfg.seed;
    cfg.eval.seed = cfg.seed;
    if cfg.data.digits_dir.is_none() {
        cfg.data.digits_dir = std::env::var_os(DATA_DIR_ENV).map(PathBuf::from);
    }
    if cfg.data.digit_source == DigitSource::Auto {
        let found = cfg.data.digits_dir.as_deref().is_some_and(|d| d.join(MNIST_IMAGES).is_file() && d.join(MNIST_LABELS).is_file());
        cfg.data.digit_source = if found { DigitSource::Mnist } else { DigitSource::Synthetic };
    }
    cfg.validate()?;
    Ok(cfg)
}

impl RunConfig {
    pub fn model_config(&self) -> ModelConfig {
        ModelConfig {
            frame_size: self.model.frame_size,
            image_channels: self.model.image_channels,
            width: self.model.width,
            levels: self.model.levels.clone(),
            context_len: self.data.smmnist.context_len,
            horizon: self.data.smmnist.horizon,
            decoder_recurrent_stages: self.model.decoder_recurrent_stages,
            dense: self.model.dense,
        }
    }

    pub fn validate(&self) -> Result<(), CliError> {
        self.data.smmnist.validate()?;
        if self.model.frame_size != self.data.smmnist.canvas {
            return Err(config_err("model.frame_size", format!("{} must equal data.smmnist.canvas ({})", self.model.frame_size, self.data.smmnist.canvas)));
        }
        if self.model.image_channels != 1 {
            return Err(config_err("model.image_channels", "moving digits are single-channel"));
        }
        self.model_config().validate()?;
        self.train.validate()?;
        self.eval.validate()?;
        if self.data.test_sequences == 0 {
            return Err(config_err("data.test_sequences", "must be at least 1"));
        }
        if self.data.test_sequences > TEST_SET_SIZE {
            return Err(config_err("data.test_sequences", format!("the fixed test set has {TEST_SET_SIZE} sequences")));
        }
        if self.data.digit_source == DigitSource::Mnist && self.data.digits_dir.is_none() {
            return Err(config_err("data.digits_dir", format!("MNIST digits need a directory (or {DATA_DIR_ENV})")));
        }
        if self.data.digit_source == DigitSource::Synthetic && self.data.synthetic_count == 0 {
            return Err(config_err("data.synthetic_count", "must be at least 1"));
        }
        if self.generate.n_samples == 0 {
            return Err(config_err("generate.n_samples", "must be at least 1"));
        }
        if self.generate.sequence >= self.data.test_sequences {
            return Err(config_err("generate.sequence", format!("only {} test sequences", self.data.test_sequences)));
        }
        for p in &self.ablate.presets {
            preset(p)?;
        }
        Ok(())
    }

    /// Pretty JSON of the resolved config.
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("config serializes") + "\n"
    }

    pub fn write_snapshot(&self, dir: &Path) -> Result<(), CliError> {
        std::fs::create_dir_all(dir).map_err(|e| io(dir, e))?;
        let path = dir.join("config.json");
        std::fs::write(&path, self.to_json()).map_err(|e| io(&path, e))
    }
}

pub(crate) fn io(path: &Path, e: std::io::Error) -> CliError {
    CliError::Io { path: path.to_path_buf(), source: e }
}

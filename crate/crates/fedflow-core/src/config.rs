//! Experiment configuration: a flat `key = value` text format with dotted
//! section keys. Every key has a default; unknown keys are errors.

use crate::models::ModelDims;
use crate::sampling::{EncodingParams, SamplingMethod, SamplingParams};
use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error(transparent)]
    Io(#[from] std::io::Error),
    #[error("config line {line}: {message}")]
    Parse { line: usize, message: String },
    #[error("invalid config: {0}")]
    Invalid(String),
}

/// Pipeline mode: federated pretraining or centralized pretraining on the
/// pooled unlabeled data.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Mode {
    Fssl,
    Centralized,
}

impl Mode {
    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Fssl => "fssl",
            Mode::Centralized => "centralized",
        }
    }
}

impl FromStr for Mode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "fssl" => Ok(Mode::Fssl),
            "centralized" => Ok(Mode::Centralized),
            other => Err(format!("unknown mode {other:?}")),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DatasetSource {
    Synthetic,
    Files,
}

/// Where flows come from and, for synthetic data, how much to generate.
#[derive(Debug, Clone, PartialEq)]
pub struct DatasetConfig {
    pub source: DatasetSource,
    pub classes: usize,
    pub labeled_flows_per_class: usize,
    pub unlabeled_flows_per_class: usize,
    pub packets_min: usize,
    pub packets_max: usize,
    pub labeled_path: Option<PathBuf>,
    pub unlabeled_path: Option<PathBuf>,
}

impl Default for DatasetConfig {
    fn default() -> Self {
        DatasetConfig {
            source: DatasetSource::Synthetic,
            classes: 5,
            labeled_flows_per_class: 30,
            unlabeled_flows_per_class: 400,
            packets_min: 1_100,
            packets_max: 1_600,
            labeled_path: None,
            unlabeled_path: None,
        }
    }
}

/// Federation knobs as written in config files; the RNG seed is derived
/// from the experiment seed at run time.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct FederationSettings {
    pub clients: usize,
    pub participation: f64,
    pub rounds: usize,
    pub local_epochs: usize,
    pub batch_size: usize,
    pub lr: f64,
    pub early_stop: bool,
}

impl Default for FederationSettings {
    fn default() -> Self {
        FederationSettings {
            clients: 10,
            participation: 0.8,
            rounds: 20,
            local_epochs: 1,
            batch_size: 64,
            lr: 0.001,
            early_stop: false,
        }
    }
}

/// Server-side supervised retraining knobs.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RetrainSettings {
    pub epochs: usize,
    pub batch_size: usize,
    /// Fraction of labeled source flows whose subflows go to the training
    /// split; the rest are held out for testing.
    pub train_fraction: f64,
    pub lr: f64,
}

impl Default for RetrainSettings {
    fn default() -> Self {
        RetrainSettings {
            epochs: 30,
            batch_size: 64,
            train_fraction: 2.0 / 3.0,
            lr: 0.001,
        }
    }
}

/// Layer widths as written in config files.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelWidths {
    pub conv1_channels: usize,
    pub conv1_kernel: usize,
    pub conv2_channels: usize,
    pub conv2_kernel: usize,
    pub hidden: usize,
    pub retrain_hidden: usize,
}

impl Default for ModelWidths {
    fn default() -> Self {
        let d = ModelDims::default();
        ModelWidths {
            conv1_channels: d.conv1_channels,
            conv1_kernel: d.conv1_kernel,
            conv2_channels: d.conv2_channels,
            conv2_kernel: d.conv2_kernel,
            hidden: d.hidden,
            retrain_hidden: d.retrain_hidden,
        }
    }
}

/// The full experiment configuration. Defaults describe the desk-scale
/// synthetic experiment; every field maps to one config key.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub mode: Mode,
    pub out_dir: PathBuf,
    pub sampling: SamplingParams,
    pub encoding: EncodingParams,
    pub federation: FederationSettings,
    pub retrain: RetrainSettings,
    pub model: ModelWidths,
    pub dataset: DatasetConfig,
    /// Sampling methods the `compare` command sweeps over.
    pub compare_methods: Vec<SamplingMethod>,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            seed: 42,
            mode: Mode::Fssl,
            out_dir: PathBuf::from("out"),
            sampling: SamplingParams {
                method: SamplingMethod::Incremental,
                // Desk-scale pass budget; the full-scale value is 100.
                passes: 10,
                ..SamplingParams::default()
            },
            encoding: EncodingParams::default(),
            federation: FederationSettings::default(),
            retrain: RetrainSettings::default(),
            model: ModelWidths::default(),
            dataset: DatasetConfig::default(),
            compare_methods: vec![SamplingMethod::Simple, SamplingMethod::Incremental],
        }
    }
}

impl ExperimentConfig {
    /// Model dimensions for the configured subflow length.
    pub fn dims(&self) -> ModelDims {
        ModelDims {
            input_len: self.sampling.subflow_len,
            conv1_channels: self.model.conv1_channels,
            conv1_kernel: self.model.conv1_kernel,
            conv2_channels: self.model.conv2_channels,
            conv2_kernel: self.model.conv2_kernel,
            hidden: self.model.hidden,
            retrain_hidden: self.model.retrain_hidden,
        }
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        Self::from_text(&std::fs::read_to_string(path)?)
    }

    /// Parses `key = value` lines over the defaults. Blank lines and lines
    /// starting with `#` are ignored.
    pub fn from_text(text: &str) -> Result<Self, ConfigError> {
        let mut config = ExperimentConfig::default();
        for (idx, raw) in text.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| ConfigError::Parse {
                line: idx + 1,
                message: format!("expected key=value, got {line:?}"),
            })?;
            config
                .apply(key.trim(), value.trim())
                .map_err(|message| ConfigError::Parse {
                    line: idx + 1,
                    message,
                })?;
        }
        config.validate()?;
        Ok(config)
    }

    /// Applies one key/value pair; used by both the file parser and CLI
    /// flag overrides.
    pub fn apply(&mut self, key: &str, value: &str) -> Result<(), String> {
        fn num<T: FromStr>(key: &str, value: &str) -> Result<T, String>
        where
            T::Err: std::fmt::Display,
        {
            value
                .parse::<T>()
                .map_err(|e| format!("{key}: cannot parse {value:?}: {e}"))
        }
        match key {
            "seed" => self.seed = num(key, value)?,
            "mode" => self.mode = value.parse()?,
            "out_dir" => self.out_dir = PathBuf::from(value),
            "sampling.method" => self.sampling.method = value.parse()?,
            "sampling.passes" => self.sampling.passes = num(key, value)?,
            "sampling.start_step" => self.sampling.start_step = num(key, value)?,
            "sampling.subflow_len" => self.sampling.subflow_len = num(key, value)?,
            "sampling.d" => self.sampling.d = num(key, value)?,
            "sampling.l0" => self.sampling.l0 = num(key, value)?,
            "sampling.alpha" => self.sampling.alpha = num(key, value)?,
            "sampling.beta" => self.sampling.beta = num(key, value)?,
            "sampling.min_flow_packets" => self.sampling.min_flow_packets = num(key, value)?,
            "encoding.len_scale" => self.encoding.len_scale = num(key, value)?,
            "encoding.time_scale" => self.encoding.time_scale = num(key, value)?,
            "federation.clients" => self.federation.clients = num(key, value)?,
            "federation.participation" => self.federation.participation = num(key, value)?,
            "federation.rounds" => self.federation.rounds = num(key, value)?,
            "federation.local_epochs" => self.federation.local_epochs = num(key, value)?,
            "federation.batch_size" => self.federation.batch_size = num(key, value)?,
            "federation.lr" => self.federation.lr = num(key, value)?,
            "federation.early_stop" => self.federation.early_stop = num(key, value)?,
            "retrain.epochs" => self.retrain.epochs = num(key, value)?,
            "retrain.batch_size" => self.retrain.batch_size = num(key, value)?,
            "retrain.train_fraction" => self.retrain.train_fraction = num(key, value)?,
            "retrain.lr" => self.retrain.lr = num(key, value)?,
            "model.conv1_channels" => self.model.conv1_channels = num(key, value)?,
            "model.conv1_kernel" => self.model.conv1_kernel = num(key, value)?,
            "model.conv2_channels" => self.model.conv2_channels = num(key, value)?,
            "model.conv2_kernel" => self.model.conv2_kernel = num(key, value)?,
            "model.hidden" => self.model.hidden = num(key, value)?,
            "model.retrain_hidden" => self.model.retrain_hidden = num(key, value)?,
            "dataset.source" => {
                self.dataset.source = match value {
                    "synthetic" => DatasetSource::Synthetic,
                    "files" => DatasetSource::Files,
                    other => return Err(format!("unknown dataset source {other:?}")),
                }
            }
            "dataset.classes" => self.dataset.classes = num(key, value)?,
            "dataset.labeled_flows_per_class" => {
                self.dataset.labeled_flows_per_class = num(key, value)?
            }
            "dataset.unlabeled_flows_per_class" => {
                self.dataset.unlabeled_flows_per_class = num(key, value)?
            }
            "dataset.packets_min" => self.dataset.packets_min = num(key, value)?,
            "dataset.packets_max" => self.dataset.packets_max = num(key, value)?,
            "dataset.labeled_path" => {
                self.dataset.labeled_path =
                    (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "dataset.unlabeled_path" => {
                self.dataset.unlabeled_path =
                    (!value.is_empty()).then(|| PathBuf::from(value))
            }
            "compare.methods" => {
                let mut methods = Vec::new();
                for part in value.split(',') {
                    methods.push(part.trim().parse::<SamplingMethod>()?);
                }
                self.compare_methods = methods;
            }
            other => return Err(format!("unknown config key {other:?}")),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |msg: String| Err(ConfigError::Invalid(msg));
        self.sampling.validate().map_err(ConfigError::Invalid)?;
        if !(self.encoding.len_scale > 0.0 && self.encoding.len_scale.is_finite())
            || !(self.encoding.time_scale > 0.0 && self.encoding.time_scale.is_finite())
        {
            return bad("encoding scales must be finite and positive".into());
        }
        if !(self.federation.lr >= 0.0 && self.federation.lr.is_finite())
            || !(self.retrain.lr >= 0.0 && self.retrain.lr.is_finite())
        {
            return bad("learning rates must be finite and >= 0".into());
        }
        if self.federation.clients < 1 {
            return bad("federation.clients must be >= 1".into());
        }
        if !(0.0..=1.0).contains(&self.federation.participation) {
            return bad("federation.participation must lie in [0, 1]".into());
        }
        if self.federation.rounds < 1 || self.federation.local_epochs < 1 {
            return bad("federation.rounds and federation.local_epochs must be >= 1".into());
        }
        if self.federation.batch_size < 1 || self.retrain.batch_size < 1 {
            return bad("batch sizes must be >= 1".into());
        }
        if !(self.retrain.train_fraction > 0.0 && self.retrain.train_fraction < 1.0) {
            return bad("retrain.train_fraction must lie strictly between 0 and 1".into());
        }
        if self.dataset.classes < 2 {
            return bad("dataset.classes must be >= 2".into());
        }
        match self.dataset.source {
            DatasetSource::Synthetic => {
                let available = crate::ingest::default_profiles().len();
                if self.dataset.classes > available {
                    return bad(format!(
                        "synthetic data supports at most {available} classes"
                    ));
                }
                if self.dataset.packets_min < self.sampling.min_flow_packets {
                    return bad(format!(
                        "dataset.packets_min {} would be dropped by the short-flow filter ({})",
                        self.dataset.packets_min, self.sampling.min_flow_packets
                    ));
                }
                if self.dataset.packets_min > self.dataset.packets_max {
                    return bad("dataset packets range is inverted".into());
                }
                if self.dataset.labeled_flows_per_class < 2 {
                    return bad("dataset.labeled_flows_per_class must be >= 2".into());
                }
            }
            DatasetSource::Files => {
                if self.dataset.labeled_path.is_none() || self.dataset.unlabeled_path.is_none() {
                    return bad(
                        "dataset.labeled_path and dataset.unlabeled_path are required for file input"
                            .into(),
                    );
                }
            }
        }
        if self.model.conv1_channels < 1
            || self.model.conv2_channels < 1
            || self.model.conv1_kernel < 1
            || self.model.conv2_kernel < 1
            || self.model.hidden < 1
            || self.model.retrain_hidden < 1
        {
            return bad("model widths and kernels must be >= 1".into());
        }
        if self.dims().try_flat_width().is_none() {
            return bad(format!(
                "subflow_len {} is too short for the conv/pool stack",
                self.sampling.subflow_len
            ));
        }
        if self.compare_methods.is_empty() {
            return bad("compare.methods must list at least one method".into());
        }
        Ok(())
    }

    /// Renders every key in a fixed order; parsing the result reproduces the
    /// config (used for the report echo and resolved-config artifacts).
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        let path = |p: &Option<PathBuf>| {
            p.as_ref().map(|p| p.display().to_string()).unwrap_or_default()
        };
        writeln!(s, "seed = {}", self.seed).unwrap();
        writeln!(s, "mode = {}", self.mode.as_str()).unwrap();
        writeln!(s, "out_dir = {}", self.out_dir.display()).unwrap();
        writeln!(s, "sampling.method = {}", self.sampling.method.as_str()).unwrap();
        writeln!(s, "sampling.passes = {}", self.sampling.passes).unwrap();
        writeln!(s, "sampling.start_step = {}", self.sampling.start_step).unwrap();
        writeln!(s, "sampling.subflow_len = {}", self.sampling.subflow_len).unwrap();
        writeln!(s, "sampling.d = {}", self.sampling.d).unwrap();
        writeln!(s, "sampling.l0 = {}", self.sampling.l0).unwrap();
        writeln!(s, "sampling.alpha = {}", self.sampling.alpha).unwrap();
        writeln!(s, "sampling.beta = {}", self.sampling.beta).unwrap();
        writeln!(s, "sampling.min_flow_packets = {}", self.sampling.min_flow_packets).unwrap();
        writeln!(s, "encoding.len_scale = {}", self.encoding.len_scale).unwrap();
        writeln!(s, "encoding.time_scale = {}", self.encoding.time_scale).unwrap();
        writeln!(s, "federation.clients = {}", self.federation.clients).unwrap();
        writeln!(s, "federation.participation = {}", self.federation.participation).unwrap();
        writeln!(s, "federation.rounds = {}", self.federation.rounds).unwrap();
        writeln!(s, "federation.local_epochs = {}", self.federation.local_epochs).unwrap();
        writeln!(s, "federation.batch_size = {}", self.federation.batch_size).unwrap();
        writeln!(s, "federation.lr = {}", self.federation.lr).unwrap();
        writeln!(s, "federation.early_stop = {}", self.federation.early_stop).unwrap();
        writeln!(s, "retrain.epochs = {}", self.retrain.epochs).unwrap();
        writeln!(s, "retrain.batch_size = {}", self.retrain.batch_size).unwrap();
        writeln!(s, "retrain.train_fraction = {}", self.retrain.train_fraction).unwrap();
        writeln!(s, "retrain.lr = {}", self.retrain.lr).unwrap();
        writeln!(s, "model.conv1_channels = {}", self.model.conv1_channels).unwrap();
        writeln!(s, "model.conv1_kernel = {}", self.model.conv1_kernel).unwrap();
        writeln!(s, "model.conv2_channels = {}", self.model.conv2_channels).unwrap();
        writeln!(s, "model.conv2_kernel = {}", self.model.conv2_kernel).unwrap();
        writeln!(s, "model.hidden = {}", self.model.hidden).unwrap();
        writeln!(s, "model.retrain_hidden = {}", self.model.retrain_hidden).unwrap();
        let source = match self.dataset.source {
            DatasetSource::Synthetic => "synthetic",
            DatasetSource::Files => "files",
        };
        writeln!(s, "dataset.source = {source}").unwrap();
        writeln!(s, "dataset.classes = {}", self.dataset.classes).unwrap();
        writeln!(
            s,
            "dataset.labeled_flows_per_class = {}",
            self.dataset.labeled_flows_per_class
        )
        .unwrap();
        writeln!(
            s,
            "dataset.unlabeled_flows_per_class = {}",
            self.dataset.unlabeled_flows_per_class
        )
        .unwrap();
        writeln!(s, "dataset.packets_min = {}", self.dataset.packets_min).unwrap();
        writeln!(s, "dataset.packets_max = {}", self.dataset.packets_max).unwrap();
        writeln!(s, "dataset.labeled_path = {}", path(&self.dataset.labeled_path)).unwrap();
        writeln!(s, "dataset.unlabeled_path = {}", path(&self.dataset.unlabeled_path)).unwrap();
        let methods: Vec<&str> = self.compare_methods.iter().map(|m| m.as_str()).collect();
        writeln!(s, "compare.methods = {}", methods.join(",")).unwrap();
        s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_are_valid() {
        ExperimentConfig::default().validate().unwrap();
    }

    #[test]
    fn parses_overrides_and_comments() {
        let text = "# desk experiment\n\
                    seed = 7\n\
                    \n\
                    mode = centralized\n\
                    sampling.method = simple\n\
                    federation.clients = 3\n\
                    compare.methods = incremental\n";
        let config = ExperimentConfig::from_text(text).unwrap();
        assert_eq!(config.seed, 7);
        assert_eq!(config.mode, Mode::Centralized);
        assert_eq!(config.sampling.method, SamplingMethod::Simple);
        assert_eq!(config.federation.clients, 3);
        assert_eq!(config.compare_methods, vec![SamplingMethod::Incremental]);
        // Untouched keys keep their defaults.
        assert_eq!(config.retrain.epochs, 30);
    }

    #[test]
    fn unknown_key_is_rejected_with_line_number() {
        let err = ExperimentConfig::from_text("seed = 1\nbogus.key = 2\n").unwrap_err();
        match err {
            ConfigError::Parse { line, message } => {
                assert_eq!(line, 2);
                assert!(message.contains("bogus.key"), "{message}");
            }
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn bad_value_is_rejected() {
        assert!(ExperimentConfig::from_text("seed = banana\n").is_err());
        assert!(ExperimentConfig::from_text("federation.participation = 1.5\n").is_err());
        assert!(ExperimentConfig::from_text("retrain.train_fraction = 1.0\n").is_err());
        assert!(ExperimentConfig::from_text("dataset.classes = 9\n").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut config = ExperimentConfig {
            seed: 1234,
            ..ExperimentConfig::default()
        };
        config.sampling.method = SamplingMethod::Simple;
        config.federation.rounds = 5;
        config.dataset.labeled_path = Some(PathBuf::from("/tmp/labeled.jsonl"));
        let text = config.to_text();
        let back = ExperimentConfig::from_text(&text).unwrap();
        assert_eq!(config, back);
    }

    #[test]
    fn file_source_requires_paths() {
        assert!(ExperimentConfig::from_text("dataset.source = files\n").is_err());
        let ok = "dataset.source = files\n\
                  dataset.labeled_path = a.jsonl\n\
                  dataset.unlabeled_path = b.jsonl\n";
        ExperimentConfig::from_text(ok).unwrap();
    }
}

//! Flat `key = value` experiment configuration. Lines starting with `#` are
//! comments. Unknown and repeated keys are errors.

use std::fmt;
use std::path::PathBuf;
use std::str::FromStr;

use thiserror::Error;

use crate::autoencoder::{Architecture, LifConfig, ReconstructionSchedule};
use crate::codec::RateCodingParams;
use crate::cpc::TrainSchedule;
use crate::data::SequenceGeometry;
use crate::stdp::{default_stdp_coding, StdpParams};

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: unknown key {key:?}")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: key {key:?} given more than once")]
    Duplicate { line: usize, key: String },
    #[error("line {line}: {key} = {value:?} is not {expected}")]
    Value { line: usize, key: String, value: String, expected: &'static str },
    #[error("line {line}: expected `key = value`, found {text:?}")]
    Syntax { line: usize, text: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Dataset {
    Mnist2500,
    Mnist5000,
}

impl Dataset {
    pub fn per_class(self) -> usize {
        match self {
            Dataset::Mnist2500 => 250,
            Dataset::Mnist5000 => 500,
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            Dataset::Mnist2500 => "MNIST-2500",
            Dataset::Mnist5000 => "MNIST-5000",
        }
    }

    pub fn tag(self) -> &'static str {
        match self {
            Dataset::Mnist2500 => "2500",
            Dataset::Mnist5000 => "5000",
        }
    }
}

impl FromStr for Dataset {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "2500" | "MNIST-2500" | "mnist-2500" => Ok(Dataset::Mnist2500),
            "5000" | "MNIST-5000" | "mnist-5000" => Ok(Dataset::Mnist5000),
            _ => Err(()),
        }
    }
}

impl fmt::Display for Dataset {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum EncodingKind {
    Autoencoder,
    Classifier,
    Random,
}

impl EncodingKind {
    pub const ALL: [EncodingKind; 3] = [EncodingKind::Autoencoder, EncodingKind::Classifier, EncodingKind::Random];

    pub fn tag(self) -> &'static str {
        match self {
            EncodingKind::Autoencoder => "autoencoder",
            EncodingKind::Classifier => "classifier",
            EncodingKind::Random => "random",
        }
    }

    pub fn label(self) -> &'static str {
        match self {
            EncodingKind::Autoencoder => "SNN-Autoencoder",
            EncodingKind::Classifier => "SNN-Classifier",
            EncodingKind::Random => "Random",
        }
    }
}

impl FromStr for EncodingKind {
    type Err = ();
    fn from_str(s: &str) -> Result<Self, ()> {
        match s {
            "autoencoder" | "snn_autoencoder" => Ok(EncodingKind::Autoencoder),
            "classifier" | "snn_classifier" => Ok(EncodingKind::Classifier),
            "random" => Ok(EncodingKind::Random),
            _ => Err(()),
        }
    }
}

impl fmt::Display for EncodingKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.tag())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ExperimentConfig {
    pub dataset: Dataset,
    pub encoding: EncodingKind,
    pub seeds: Vec<u64>,
    pub images_path: PathBuf,
    pub labels_path: PathBuf,
    /// Fraction of every class held out for validation pairs.
    pub validation_fraction: f64,
    pub random_dim: usize,
    pub standardize: bool,
    pub dump_encodings: bool,
    pub geometry: SequenceGeometry,
    pub cpc_hidden: usize,
    pub cpc_gain_init: f64,
    pub cpc_bias_init: f64,
    pub schedule: TrainSchedule,
    pub stdp_epochs: usize,
    pub stdp: StdpParams,
    pub coding: RateCodingParams,
    pub lif: LifConfig,
    pub ae_arch: Architecture,
    pub ae_schedule: ReconstructionSchedule,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        ExperimentConfig {
            dataset: Dataset::Mnist2500,
            encoding: EncodingKind::Autoencoder,
            seeds: vec![1, 2, 3],
            images_path: PathBuf::from("data/mnist5k-images-idx3-ubyte"),
            labels_path: PathBuf::from("data/mnist5k-labels-idx1-ubyte"),
            validation_fraction: 0.1,
            random_dim: 400,
            standardize: true,
            dump_encodings: false,
            geometry: SequenceGeometry::default(),
            cpc_hidden: 256,
            cpc_gain_init: 5.0,
            cpc_bias_init: 0.0,
            schedule: TrainSchedule::default(),
            stdp_epochs: 1,
            stdp: StdpParams::default(),
            coding: default_stdp_coding(),
            lif: LifConfig::default(),
            ae_arch: Architecture::mnist(),
            ae_schedule: ReconstructionSchedule::default(),
        }
    }
}

fn parse<T: FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<T, ConfigError> {
    value.parse().map_err(|_| ConfigError::Value { line, key: key.into(), value: value.into(), expected })
}

fn parse_list<T: FromStr>(line: usize, key: &str, value: &str, expected: &'static str) -> Result<Vec<T>, ConfigError> {
    value.split(',').map(|v| parse(line, key, v.trim(), expected)).collect()
}

fn join<T: ToString>(v: &[T]) -> String {
    v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
}

impl ExperimentConfig {
    /// Defaults overridden by the entries of `text`.
    pub fn parse(text: &str) -> Result<Self, ConfigError> {
        let mut cfg = ExperimentConfig::default();
        let mut seen = std::collections::HashSet::new();
        for (n, raw) in text.lines().enumerate() {
            let line = n + 1;
            let body = raw.split('#').next().unwrap_or("").trim();
            if body.is_empty() {
                continue;
            }
            let (key, value) = body.split_once('=').ok_or_else(|| ConfigError::Syntax { line, text: raw.to_string() })?;
            let (key, value) = (key.trim(), value.trim());
            if !seen.insert(key.to_string()) {
                return Err(ConfigError::Duplicate { line, key: key.into() });
            }
            cfg.set(line, key, value)?;
        }
        cfg.validate()?;
        Ok(cfg)
    }

    /// Applies one entry. `line` only labels errors.
    pub fn set(&mut self, line: usize, key: &str, value: &str) -> Result<(), ConfigError> {
        const F: &str = "a number";
        const U: &str = "a non-negative integer";
        const B: &str = "true or false";
        let s = &mut self.schedule;
        match key {
            "dataset" => self.dataset = parse(line, key, value, "2500 or 5000")?,
            "encoding" => self.encoding = parse(line, key, value, "autoencoder, classifier or random")?,
            "seeds" => self.seeds = parse_list(line, key, value, "a comma-separated list of integers")?,
            "images_path" => self.images_path = PathBuf::from(value),
            "labels_path" => self.labels_path = PathBuf::from(value),
            "validation_fraction" => self.validation_fraction = parse(line, key, value, F)?,
            "random_dim" => self.random_dim = parse(line, key, value, U)?,
            "standardize" => self.standardize = parse(line, key, value, B)?,
            "dump_encodings" => self.dump_encodings = parse(line, key, value, B)?,
            "context_len" => self.geometry.context_len = parse(line, key, value, U)?,
            "prediction_len" => self.geometry.prediction_len = parse(line, key, value, U)?,
            "wrap" => self.geometry.wrap = parse(line, key, value, B)?,
            "cpc.hidden" => self.cpc_hidden = parse(line, key, value, U)?,
            "cpc.gain_init" => self.cpc_gain_init = parse(line, key, value, F)?,
            "cpc.bias_init" => self.cpc_bias_init = parse(line, key, value, F)?,
            "cpc.learning_rate" => s.learning_rate = parse(line, key, value, F)?,
            "cpc.train_positives" => s.train_positives = parse(line, key, value, U)?,
            "cpc.train_negatives" => s.train_negatives = parse(line, key, value, U)?,
            "cpc.batches_per_epoch" => s.batches_per_epoch = parse(line, key, value, U)?,
            "cpc.val_positives" => s.val_positives = parse(line, key, value, U)?,
            "cpc.val_negatives" => s.val_negatives = parse(line, key, value, U)?,
            "cpc.val_batches" => s.val_batches = parse(line, key, value, U)?,
            "cpc.max_epochs" => s.max_epochs = parse(line, key, value, U)?,
            "cpc.early_stop_patience" => s.early_stop_patience = parse(line, key, value, U)?,
            "cpc.lr_patience" => s.lr_patience = parse(line, key, value, U)?,
            "cpc.lr_factor" => s.lr_factor = parse(line, key, value, F)?,
            "stdp.epochs" => self.stdp_epochs = parse(line, key, value, U)?,
            "coding.k" => self.coding.k = parse(line, key, value, F)?,
            "coding.delta_k" => self.coding.delta_k = parse(line, key, value, F)?,
            "coding.s_min" => self.coding.s_min = parse(line, key, value, U)?,
            "coding.delta_t" => self.coding.delta_t = parse(line, key, value, F)?,
            "coding.dt" => self.coding.dt = parse(line, key, value, F)?,
            "coding.retry_cap" => self.coding.retry_cap = parse(line, key, value, U)?,
            "ae.epochs" => self.ae_schedule.epochs = parse(line, key, value, U)?,
            "ae.batch_size" => self.ae_schedule.batch_size = parse(line, key, value, U)?,
            "ae.learning_rate" => self.ae_schedule.learning_rate = parse(line, key, value, F)?,
            "ae.channels" => self.ae_arch.channels = parse_list(line, key, value, "a comma-separated list of channel counts")?,
            "ae.kernel" => self.ae_arch.kernel = parse(line, key, value, U)?,
            "lif.beta" => self.lif.beta = parse(line, key, value, F)?,
            "lif.v_thresh" => self.lif.v_thresh = parse(line, key, value, F)?,
            "lif.t_steps" => self.lif.t_steps = parse(line, key, value, U)?,
            "lif.surrogate_alpha" => self.lif.surrogate_alpha = parse(line, key, value, F)?,
            other => {
                let name = other.strip_prefix("stdp.").ok_or_else(|| ConfigError::UnknownKey { line, key: other.into() })?;
                let v: f64 = parse(line, key, value, F)?;
                if !self.stdp.set_constant(name, v) {
                    return Err(ConfigError::UnknownKey { line, key: other.into() });
                }
            }
        }
        Ok(())
    }

    /// Every key with its current value, in a stable order. Parsing the
    /// rendered entries reproduces the configuration.
    pub fn entries(&self) -> Vec<(String, String)> {
        let s = &self.schedule;
        let mut e: Vec<(String, String)> = vec![
            ("dataset".into(), self.dataset.to_string()),
            ("encoding".into(), self.encoding.to_string()),
            ("seeds".into(), join(&self.seeds)),
            ("images_path".into(), self.images_path.display().to_string()),
            ("labels_path".into(), self.labels_path.display().to_string()),
            ("validation_fraction".into(), self.validation_fraction.to_string()),
            ("random_dim".into(), self.random_dim.to_string()),
            ("standardize".into(), self.standardize.to_string()),
            ("dump_encodings".into(), self.dump_encodings.to_string()),
            ("context_len".into(), self.geometry.context_len.to_string()),
            ("prediction_len".into(), self.geometry.prediction_len.to_string()),
            ("wrap".into(), self.geometry.wrap.to_string()),
            ("cpc.hidden".into(), self.cpc_hidden.to_string()),
            ("cpc.gain_init".into(), self.cpc_gain_init.to_string()),
            ("cpc.bias_init".into(), self.cpc_bias_init.to_string()),
            ("cpc.learning_rate".into(), s.learning_rate.to_string()),
            ("cpc.train_positives".into(), s.train_positives.to_string()),
            ("cpc.train_negatives".into(), s.train_negatives.to_string()),
            ("cpc.batches_per_epoch".into(), s.batches_per_epoch.to_string()),
            ("cpc.val_positives".into(), s.val_positives.to_string()),
            ("cpc.val_negatives".into(), s.val_negatives.to_string()),
            ("cpc.val_batches".into(), s.val_batches.to_string()),
            ("cpc.max_epochs".into(), s.max_epochs.to_string()),
            ("cpc.early_stop_patience".into(), s.early_stop_patience.to_string()),
            ("cpc.lr_patience".into(), s.lr_patience.to_string()),
            ("cpc.lr_factor".into(), s.lr_factor.to_string()),
            ("stdp.epochs".into(), self.stdp_epochs.to_string()),
            ("coding.k".into(), self.coding.k.to_string()),
            ("coding.delta_k".into(), self.coding.delta_k.to_string()),
            ("coding.s_min".into(), self.coding.s_min.to_string()),
            ("coding.delta_t".into(), self.coding.delta_t.to_string()),
            ("coding.dt".into(), self.coding.dt.to_string()),
            ("coding.retry_cap".into(), self.coding.retry_cap.to_string()),
            ("ae.epochs".into(), self.ae_schedule.epochs.to_string()),
            ("ae.batch_size".into(), self.ae_schedule.batch_size.to_string()),
            ("ae.learning_rate".into(), self.ae_schedule.learning_rate.to_string()),
            ("ae.channels".into(), join(&self.ae_arch.channels)),
            ("ae.kernel".into(), self.ae_arch.kernel.to_string()),
            ("lif.beta".into(), self.lif.beta.to_string()),
            ("lif.v_thresh".into(), self.lif.v_thresh.to_string()),
            ("lif.t_steps".into(), self.lif.t_steps.to_string()),
            ("lif.surrogate_alpha".into(), self.lif.surrogate_alpha.to_string()),
        ];
        e.extend(self.stdp.constants().iter().map(|(k, v)| (format!("stdp.{k}"), v.to_string())));
        e
    }

    pub fn render(&self) -> String {
        self.entries().into_iter().map(|(k, v)| format!("{k} = {v}\n")).collect()
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let bad = |m: String| Err(ConfigError::Invalid(m));
        if self.seeds.is_empty() {
            return bad("at least one seed is required".into());
        }
        if !(self.validation_fraction > 0.0 && self.validation_fraction < 1.0) {
            return bad(format!("validation_fraction {} must lie in (0, 1)", self.validation_fraction));
        }
        if self.random_dim == 0 || self.cpc_hidden == 0 {
            return bad("random_dim and cpc.hidden must be positive".into());
        }
        self.geometry.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.schedule.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.stdp.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.coding.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.lif.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        self.ae_arch.validate().map_err(|e| ConfigError::Invalid(e.to_string()))?;
        if self.ae_arch.input_side != crate::data::SIDE || self.ae_arch.channels.first() != Some(&1) {
            return bad("the autoencoder must take single-channel 28×28 input".into());
        }
        if self.ae_schedule.batch_size == 0 {
            return bad("ae.batch_size must be positive".into());
        }
        Ok(())
    }

    /// Directory name of a run, e.g. `2500-autoencoder`.
    pub fn run_name(&self) -> String {
        format!("{}-{}", self.dataset, self.encoding)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_round_trip_through_render() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::parse(&cfg.render()).unwrap(), cfg);
    }

    #[test]
    fn overrides_and_comments() {
        let cfg = ExperimentConfig::parse(
            "# comment\n dataset = 5000\nencoding=random  # trailing\nseeds = 4, 5\ncpc.max_epochs = 7\nstdp.inh_to_exc = 3.5\n",
        )
        .unwrap();
        assert_eq!(cfg.dataset, Dataset::Mnist5000);
        assert_eq!(cfg.encoding, EncodingKind::Random);
        assert_eq!(cfg.seeds, vec![4, 5]);
        assert_eq!(cfg.schedule.max_epochs, 7);
        assert_eq!(cfg.stdp.inh_to_exc, 3.5);
        assert_eq!(cfg.run_name(), "5000-random");
    }

    #[test]
    fn unknown_keys_are_fatal() {
        assert_eq!(
            ExperimentConfig::parse("seeds = 1\ncpc.learnig_rate = 0.1\n"),
            Err(ConfigError::UnknownKey { line: 2, key: "cpc.learnig_rate".into() })
        );
        assert!(matches!(ExperimentConfig::parse("stdp.bogus = 1\n"), Err(ConfigError::UnknownKey { .. })));
    }

    #[test]
    fn bad_values_duplicates_and_syntax_are_fatal() {
        assert!(matches!(ExperimentConfig::parse("dataset = 3000\n"), Err(ConfigError::Value { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("wrap = yes\n"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("seeds = 1\nseeds = 2\n"), Err(ConfigError::Duplicate { line: 2, .. })));
        assert!(matches!(ExperimentConfig::parse("just words\n"), Err(ConfigError::Syntax { line: 1, .. })));
        assert!(matches!(ExperimentConfig::parse("seeds = \n"), Err(ConfigError::Value { .. })));
        assert!(matches!(ExperimentConfig::parse("cpc.lr_patience = 0\n"), Err(ConfigError::Invalid(_))));
    }
}

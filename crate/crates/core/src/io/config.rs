//! Run configuration: a TOML file whose every field is optional, merged
//! with command-line overrides and resolved against documented defaults.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::train::{Protocol, TrainConfig};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelOverrides {
    pub d_depth: Option<usize>,
    pub k0: Option<usize>,
    pub mste_kernels: Option<Vec<usize>>,
    pub dilation: Option<usize>,
    pub groups: Option<usize>,
    pub use_mste: Option<bool>,
    pub use_cna: Option<bool>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TrainOverrides {
    pub mode: Option<Protocol>,
    pub learning_rate: Option<f64>,
    pub weight_decay: Option<f64>,
    pub batch_size: Option<usize>,
    pub max_epochs: Option<usize>,
    pub patience: Option<usize>,
    pub val_fraction_loso: Option<f64>,
}

/// The on-disk (and command-line) form of a run configuration.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfigFile {
    pub seed: Option<u64>,
    pub window_seconds: Option<f64>,
    pub stride_seconds: Option<f64>,
    pub align: Option<bool>,
    pub output_dir: Option<PathBuf>,
    #[serde(default)]
    pub model: ModelOverrides,
    #[serde(default)]
    pub train: TrainOverrides,
}

macro_rules! prefer {
    ($over:expr, $base:expr, $($field:ident),+) => {
        $( if $over.$field.is_some() { $base.$field = $over.$field; } )+
    };
}

impl RunConfigFile {
    pub fn load(path: &Path) -> Result<Self> {
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::config(format!("{}: {e}", path.display())))
    }

    /// Fields set in `over` replace those in `self`.
    pub fn merge(mut self, over: RunConfigFile) -> Self {
        prefer!(over, self, seed, window_seconds, stride_seconds, align, output_dir);
        prefer!(over.model, self.model, d_depth, k0, mste_kernels, dilation, groups, use_mste, use_cna);
        prefer!(
            over.train,
            self.train,
            mode,
            learning_rate,
            weight_decay,
            batch_size,
            max_epochs,
            patience,
            val_fraction_loso
        );
        self
    }
}

/// A fully resolved run configuration. Channel count and window length in
/// samples come from the dataset, see [`RunConfig::model_config`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub seed: u64,
    pub window_seconds: f64,
    pub stride_seconds: f64,
    pub align: bool,
    pub output_dir: PathBuf,
    pub model: ModelOverrides,
    pub train: TrainConfig,
}

impl RunConfig {
    pub fn resolve(file: RunConfigFile) -> Result<Self> {
        let mode = file.train.mode.unwrap_or(Protocol::SubjectDependent);
        let seed = file.seed.unwrap_or(0);
        let mut train = TrainConfig::for_mode(mode);
        train.seed = seed;
        let t = file.train;
        train.learning_rate = t.learning_rate.unwrap_or(train.learning_rate);
        train.weight_decay = t.weight_decay.unwrap_or(train.weight_decay);
        train.batch_size = t.batch_size.unwrap_or(train.batch_size);
        train.max_epochs = t.max_epochs.unwrap_or(train.max_epochs);
        train.patience = t.patience.unwrap_or(train.patience.min(train.max_epochs));
        train.val_fraction_loso = t.val_fraction_loso.unwrap_or(train.val_fraction_loso);
        train.validate()?;

        let window_seconds = file.window_seconds.unwrap_or(1.0);
        let stride_seconds = file.stride_seconds.unwrap_or(window_seconds);
        if !(window_seconds > 0.0) || !(stride_seconds > 0.0) {
            return Err(Error::config("window_seconds and stride_seconds must be positive"));
        }
        Ok(Self {
            seed,
            window_seconds,
            stride_seconds,
            align: file.align.unwrap_or(true),
            output_dir: file.output_dir.unwrap_or_else(|| PathBuf::from("runs")),
            model: file.model,
            train,
        })
    }

    /// `seconds * fs` as a whole number of samples.
    pub fn samples(seconds: f64, fs: f32) -> Result<usize> {
        let exact = seconds * fs as f64;
        let n = exact.round();
        if (exact - n).abs() > 1e-6 || n < 1.0 {
            return Err(Error::config(format!(
                "{seconds} s at {fs} Hz is not a whole number of samples"
            )));
        }
        Ok(n as usize)
    }

    pub fn window_samples(&self, fs: f32) -> Result<usize> {
        Self::samples(self.window_seconds, fs)
    }

    pub fn stride_samples(&self, fs: f32) -> Result<usize> {
        Self::samples(self.stride_seconds, fs)
    }

    pub fn model_config(&self, channels: usize, fs: f32) -> Result<ModelConfig> {
        let m = &self.model;
        let mut cfg = ModelConfig::with_input(channels, self.window_samples(fs)?);
        if let Some(d) = m.d_depth {
            cfg = cfg.with_depth(d);
        }
        cfg.k0 = m.k0.unwrap_or(cfg.k0);
        cfg.mste_kernels = m.mste_kernels.clone().unwrap_or(cfg.mste_kernels);
        cfg.dilation = m.dilation.unwrap_or(cfg.dilation);
        cfg.groups = m.groups.unwrap_or(cfg.groups);
        cfg.use_mste = m.use_mste.unwrap_or(cfg.use_mste);
        cfg.use_cna = m.use_cna.unwrap_or(cfg.use_cna);
        cfg.validate()?;
        Ok(cfg)
    }
}

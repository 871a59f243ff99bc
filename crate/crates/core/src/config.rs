//! Run configuration: one TOML file with `[data]`, `[model]`, `[train]`,
//! `[loss]`, `[eval]` and `[output]` sections.

use std::path::{Path, PathBuf};
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::data::{
    detect_layout, group_by_scan, load_dataset, make_split, preprocess, synth_blobs, DatasetSplit, Layout, LoadOptions,
    Preprocess, SamplePair, DEFAULT_HU_WINDOW,
};
use crate::error::{Error, Result};
use crate::losses::LossConfig;
use crate::model::ModelConfig;
use crate::train::TrainConfig;

/// Validation share carved from synthetic training data when none is configured.
pub const SYNTH_VAL_FRACTION: f64 = 0.1;

/// Where samples come from: a dataset directory or `synth://NxS`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum DataSource {
    Path(PathBuf),
    Synth { count: usize, size: usize },
}

impl FromStr for DataSource {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let Some(spec) = s.strip_prefix("synth://") else {
            return Ok(Self::Path(PathBuf::from(s)));
        };
        let bad = || Error::Config(format!("expected synth://<count>x<size>, got `{s}`"));
        let (count, size) = spec.split_once('x').ok_or_else(bad)?;
        Ok(Self::Synth {
            count: count.parse().map_err(|_| bad())?,
            size: size.parse().map_err(|_| bad())?,
        })
    }
}

impl std::fmt::Display for DataSource {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            Self::Path(p) => write!(f, "{}", p.display()),
            Self::Synth { count, size } => write!(f, "synth://{count}x{size}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub source: String,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub layout: Option<Layout>,
    pub test_fraction: f64,
    pub hu_window: [f64; 2],
    /// Square side length after resizing; unset keeps synthetic data at its
    /// native size and resizes file datasets to 256.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub size: Option<usize>,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub label: Option<u32>,
}

impl Default for DataConfig {
    fn default() -> Self {
        Self {
            source: "synth://200x64".into(),
            layout: None,
            test_fraction: 0.2,
            hu_window: [DEFAULT_HU_WINDOW.0, DEFAULT_HU_WINDOW.1],
            size: None,
            label: None,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub threshold: f64,
    pub batch_size: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            threshold: 0.5,
            batch_size: 8,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self {
            dir: PathBuf::from("runs/latest"),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataConfig,
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub loss: LossConfig,
    pub eval: EvalConfig,
    pub output: OutputConfig,
}

impl RunConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_toml(&text)
    }

    pub fn to_toml(&self) -> Result<String> {
        Ok(toml::to_string_pretty(self)?)
    }

    pub fn source(&self) -> Result<DataSource> {
        self.data.source.parse()
    }

    /// Fills every setting whose default depends on the data source, so the
    /// written snapshot alone reproduces the run.
    pub fn resolve(&mut self) -> Result<()> {
        let source = self.source()?;
        match source {
            DataSource::Synth { size, .. } => {
                self.data.size.get_or_insert(size);
                self.train.val_fraction.get_or_insert(SYNTH_VAL_FRACTION);
            }
            DataSource::Path(ref root) => {
                self.data.size.get_or_insert(256);
                self.train.val_fraction.get_or_insert(0.0);
                if self.data.layout.is_none() {
                    self.data.layout = Some(detect_layout(root)?);
                }
            }
        }
        self.validate()
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.loss.validate()?;
        self.train_config().validate()?;
        let [lo, hi] = self.data.hu_window;
        if !(lo < hi) {
            return Err(Error::Config(format!("hu_window must be increasing, got [{lo}, {hi}]")));
        }
        if !(self.data.test_fraction > 0.0 && self.data.test_fraction < 1.0) {
            return Err(Error::Config(format!(
                "test_fraction must lie in (0, 1), got {}",
                self.data.test_fraction
            )));
        }
        if let Some(size) = self.data.size {
            if size == 0 || size % self.model.size_multiple() != 0 {
                return Err(Error::Config(format!(
                    "data size {size} must be a positive multiple of {}",
                    self.model.size_multiple()
                )));
            }
        }
        if !(self.eval.threshold > 0.0 && self.eval.threshold < 1.0) {
            return Err(Error::Config(format!("threshold must lie in (0, 1), got {}", self.eval.threshold)));
        }
        if self.eval.batch_size == 0 {
            return Err(Error::Config("eval batch_size must be at least 1".into()));
        }
        Ok(())
    }

    /// The training settings with the `[loss]` section folded in.
    pub fn train_config(&self) -> TrainConfig {
        TrainConfig {
            loss: self.loss,
            ..self.train.clone()
        }
    }

    pub fn preprocess(&self) -> Preprocess {
        Preprocess {
            hu_window: (self.data.hu_window[0], self.data.hu_window[1]),
            size: self.data.size,
        }
    }

    /// Loads and preprocesses every sample of the configured source.
    pub fn load_samples(&self) -> Result<Vec<SamplePair>> {
        let raw = match self.source()? {
            DataSource::Synth { count, size } => synth_blobs(count, size, self.train.seed)?,
            DataSource::Path(root) => {
                let layout = match self.data.layout {
                    Some(l) => l,
                    None => detect_layout(&root)?,
                };
                load_dataset(&root, layout, LoadOptions { label: self.data.label })?
            }
        };
        let opts = self.preprocess();
        raw.iter().map(|s| preprocess(s, &opts)).collect()
    }

    /// Loads the data and partitions it by scan.
    pub fn load_split(&self) -> Result<DatasetSplit> {
        make_split(group_by_scan(self.load_samples()?), self.data.test_fraction, self.train.seed)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synth_uri_parses() {
        assert_eq!(
            "synth://200x64".parse::<DataSource>().unwrap(),
            DataSource::Synth { count: 200, size: 64 }
        );
        assert!("synth://200".parse::<DataSource>().is_err());
        assert_eq!("data/x".parse::<DataSource>().unwrap(), DataSource::Path("data/x".into()));
    }

    #[test]
    fn defaults_follow_the_protocol() {
        let c = RunConfig::default();
        assert_eq!(c.train.epochs, 100);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.loss.alpha, 0.5);
    }

    #[test]
    fn resolved_config_round_trips_through_toml() {
        let mut c = RunConfig::default();
        c.train.epochs = 3;
        c.resolve().unwrap();
        assert_eq!(c.data.size, Some(64));
        assert_eq!(c.train.val_fraction, Some(SYNTH_VAL_FRACTION));
        let text = c.to_toml().unwrap();
        assert_eq!(RunConfig::from_toml(&text).unwrap(), c);
    }

    #[test]
    fn partial_file_keeps_other_defaults() {
        let c = RunConfig::from_toml("[train]\nepochs = 7\n[loss]\nalpha = 0.25\nbeta = 0.75\n").unwrap();
        assert_eq!(c.train.epochs, 7);
        assert_eq!(c.train.batch_size, 32);
        assert_eq!(c.train_config().loss.alpha, 0.25);
        assert!(RunConfig::from_toml("[train]\nepoch = 7\n").is_err());
    }

    #[test]
    fn rejects_unbalanced_loss_weights() {
        let mut c = RunConfig::default();
        c.loss.alpha = 0.7;
        c.loss.beta = 0.4;
        let msg = c.resolve().unwrap_err().to_string();
        assert!(msg.contains("alpha + beta must equal 1"), "{msg}");
    }
}

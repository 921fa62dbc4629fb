//! Experiment configuration: one TOML file describes the model, the
//! data source, the training loop, and the sweep axes. Unknown keys are
//! hard errors.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::{CsvSpec, Dataset, SyntheticSpec};
use crate::error::{Error, Result};
use crate::model::GrecConfig;
use crate::moe::Granularity;
use crate::trainer::TrainConfig;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DataSource {
    Synthetic,
    Csv,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DataConfig {
    pub source: DataSource,
    pub synthetic: SyntheticSpec,
    pub csv: CsvSpec,
    /// Fraction of examples (most recent by time index) held out.
    pub test_fraction: f64,
}

impl Default for DataConfig {
    fn default() -> DataConfig {
        DataConfig {
            source: DataSource::Synthetic,
            synthetic: SyntheticSpec::default(),
            csv: CsvSpec::default(),
            test_fraction: crate::data::TEST_FRACTION,
        }
    }
}

impl DataConfig {
    pub fn load(&self) -> Result<Dataset> {
        match self.source {
            DataSource::Synthetic => crate::data::generate_synthetic(&self.synthetic),
            DataSource::Csv => Ok(crate::data::load_csv(&self.csv)?.0),
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SweepConfig {
    pub experts: Vec<usize>,
    pub k: Vec<usize>,
    pub granularities: Vec<Granularity>,
    pub seeds: Vec<u64>,
}

impl Default for SweepConfig {
    fn default() -> SweepConfig {
        SweepConfig {
            experts: vec![2, 8],
            k: vec![1, 2, 4],
            granularities: vec![Granularity::TaskSentence],
            seeds: vec![0, 1, 2],
        }
    }
}

#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ExperimentConfig {
    pub seed: u64,
    pub out_dir: PathBuf,
    pub model: GrecConfig,
    pub train: TrainConfig,
    pub data: DataConfig,
    pub sweep: SweepConfig,
}

impl ExperimentConfig {
    pub fn from_path(path: &Path) -> Result<ExperimentConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| {
            Error::Config(format!("cannot read config file {}: {}", path.display(), e))
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)
            .map_err(|e| Error::Config(format!("{}: {}", path.display(), e)))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.model.d == 0 {
            return Err(Error::Config("model.d must be positive".into()));
        }
        if self.model.moe.experts == 0 {
            return Err(Error::Config("model.moe.experts must be positive".into()));
        }
        if self.model.moe.k == 0 || self.model.moe.k > self.model.moe.experts {
            return Err(Error::Config(format!(
                "model.moe.k must lie in 1..={}",
                self.model.moe.experts
            )));
        }
        if self.model.moe.capacity == Some(0) {
            return Err(Error::Config("model.moe.capacity must be positive when set".into()));
        }
        self.train.validate()?;
        if !(0.0..1.0).contains(&self.data.test_fraction) {
            return Err(Error::Config("data.test_fraction must lie in [0, 1)".into()));
        }
        if self.sweep.experts.is_empty()
            || self.sweep.k.is_empty()
            || self.sweep.granularities.is_empty()
            || self.sweep.seeds.is_empty()
        {
            return Err(Error::Config("sweep axes must be non-empty".into()));
        }
        if self.sweep.experts.contains(&0) || self.sweep.k.contains(&0) {
            return Err(Error::Config("sweep.experts and sweep.k entries must be positive".into()));
        }
        Ok(())
    }
}

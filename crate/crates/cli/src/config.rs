//! Run configuration files.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use lemof::data::{generate_synthetic, load_split_dataset, SplitDataset, SplitSpec, SynthConfig};
use lemof::pipeline::TrainConfig;
use lemof::{LemofError, Result};

/// Where a run's samples come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum DataSource {
    /// Generated in memory.
    Synth(SynthConfig),
    /// A dataset written by `lemof synth` or prepared by hand.
    Manifest(PathBuf),
}

/// Everything `train` and `ablate` need. Relative paths resolve against the
/// directory holding the config file.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub data: DataSource,
    /// Split of synthetic data. Manifests carry their own split.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub split: Option<SplitSpec>,
    #[serde(default)]
    pub training: TrainConfig,
    pub out_dir: PathBuf,
}

pub fn read_json<T: serde::de::DeserializeOwned>(path: &Path, what: &str) -> Result<T> {
    let text = std::fs::read_to_string(path)
        .map_err(|e| LemofError::Config(format!("cannot read {what} {}: {e}", path.display())))?;
    serde_json::from_str(&text)
        .map_err(|e| LemofError::Config(format!("{what} {}: {e}", path.display())))
}

fn absolute(path: &Path) -> Result<PathBuf> {
    std::path::absolute(path).map_err(LemofError::from)
}

impl RunConfig {
    /// Parses, resolves paths and validates.
    pub fn load(path: &Path) -> Result<Self> {
        let mut cfg: RunConfig = read_json(path, "config")?;
        let base = path.parent().unwrap_or(Path::new("."));
        if let DataSource::Manifest(m) = &mut cfg.data {
            *m = absolute(&base.join(&*m))?;
            if !m.is_file() {
                return Err(LemofError::Config(format!(
                    "manifest {} does not exist",
                    m.display()
                )));
            }
        }
        cfg.out_dir = absolute(&base.join(&cfg.out_dir))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.training.validate()?;
        match &self.data {
            DataSource::Synth(s) => s.validate(),
            DataSource::Manifest(_) if self.split.is_some() => Err(LemofError::Config(
                "split applies to synthetic data only; a manifest carries its own".into(),
            )),
            DataSource::Manifest(_) => Ok(()),
        }
    }

    /// Synthetic data without an explicit split uses the default ratios and
    /// the generator seed.
    pub fn split_spec(&self) -> Option<SplitSpec> {
        match &self.data {
            DataSource::Synth(s) => Some(self.split.clone().unwrap_or(SplitSpec {
                seed: s.seed,
                ..SplitSpec::default()
            })),
            DataSource::Manifest(_) => None,
        }
    }

    pub fn load_data(&self) -> Result<SplitDataset> {
        match &self.data {
            DataSource::Synth(s) => {
                let spec = self.split_spec().expect("synthetic source");
                SplitDataset::new(&generate_synthetic(s)?, spec.ratios, spec.seed)
            }
            DataSource::Manifest(m) => Ok(load_split_dataset(m)?.1),
        }
    }
}

//! TOML experiment configuration shared by every command.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::aligner::AlignerConfig;
use crate::datagen::{Family, PdeSpec};
use crate::error::{Error, Result};
use crate::model::ModelConfig;
use crate::trainer::TrainConfig;

/// Dataset generation recipe: `count` trajectories per family with seeds
/// `seed, seed+1, …` offset by 1_000_000 per family index.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DataConfig {
    pub families: Vec<Family>,
    pub count: usize,
    /// Points per axis.
    pub grid: usize,
    pub steps: usize,
    pub dt: f64,
    pub seed: u64,
    /// Coefficient ranges overriding the family defaults.
    pub ranges: BTreeMap<String, [f64; 2]>,
}

impl Default for DataConfig {
    fn default() -> Self {
        DataConfig {
            families: vec![Family::Advection1d],
            count: 16,
            grid: 64,
            steps: 20,
            dt: 0.005,
            seed: 0,
            ranges: BTreeMap::new(),
        }
    }
}

impl DataConfig {
    /// Trajectory specs in generation order.
    pub fn specs(&self) -> Vec<PdeSpec> {
        let ranges: BTreeMap<String, (f64, f64)> = self.ranges.iter().map(|(k, v)| (k.clone(), (v[0], v[1]))).collect();
        self.families
            .iter()
            .enumerate()
            .flat_map(|(fi, &fam)| {
                let ranges = ranges.clone();
                (0..self.count).map(move |i| {
                    PdeSpec::sampled_in(
                        fam,
                        &ranges,
                        &vec![self.grid; fam.dims()],
                        self.steps,
                        self.dt,
                        self.seed + 1_000_000 * fi as u64 + i as u64,
                    )
                })
            })
            .collect()
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub manifest: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
    pub aligner_checkpoint: Option<PathBuf>,
    pub context: usize,
    pub horizon: usize,
    pub grid_sizes: Vec<usize>,
    pub context_lengths: Vec<usize>,
    /// Family for sweeps and probes.
    pub family: Option<Family>,
    /// Coefficient recovered by the inverse probe.
    pub coefficient: String,
    /// Trajectories generated per sweep setting or probe.
    pub count: usize,
    /// Trajectory used by `rollout` (index into the manifest).
    pub index: usize,
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig {
            manifest: None,
            checkpoint: None,
            aligner_checkpoint: None,
            context: 10,
            horizon: 5,
            grid_sizes: vec![32, 64, 128],
            context_lengths: vec![2, 5, 10],
            family: None,
            coefficient: "beta".into(),
            count: 16,
            index: 0,
        }
    }
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub model: ModelConfig,
    pub train: TrainConfig,
    pub aligner: AlignerConfig,
    pub data: DataConfig,
    pub eval: EvalConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Config(e.to_string()))
    }

    /// Parses `path`; relative paths inside are resolved against its
    /// directory.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut cfg = Self::from_toml(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new(""));
        for p in [
            &mut cfg.eval.manifest,
            &mut cfg.eval.checkpoint,
            &mut cfg.eval.aligner_checkpoint,
        ]
        .into_iter()
        .flatten()
        {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        }
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.train.validate()?;
        self.aligner.validate()
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn partial_file_fills_defaults() {
        let cfg = ExperimentConfig::from_toml(
            "[model]\nhidden = 32\nheads = 2\n[data]\nfamilies = [\"diffusion1d\"]\ncount = 3\n[data.ranges]\nnu = [0.002, 0.004]\n",
        )
        .unwrap();
        assert_eq!(cfg.model.hidden, 32);
        assert_eq!(cfg.model.layers, ModelConfig::default().layers);
        let specs = cfg.data.specs();
        assert_eq!(specs.len(), 3);
        let nu = specs[0].coefficient("nu").unwrap();
        assert!((0.002..0.004).contains(&nu));
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(ExperimentConfig::from_toml("[model]\nhiden = 3\n").is_err());
    }

    #[test]
    fn round_trips_through_toml() {
        let cfg = ExperimentConfig::default();
        assert_eq!(ExperimentConfig::from_toml(&cfg.to_toml().unwrap()).unwrap(), cfg);
    }
}

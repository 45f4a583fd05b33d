//! TOML run configuration. Every section and key is optional; defaults reproduce the
//! reference experiments.

use std::path::{Path, PathBuf};

use anyhow::Context;
use serde::{Deserialize, Serialize};

use flowlab::dynamics::{GridKind, Method};
use flowlab::trainer::OptimizerKind;

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Config {
    pub run: RunSection,
    pub gen_paths: GenPathsSection,
    pub bound_check: BoundCheckSection,
    pub emb_approx: EmbApproxSection,
    pub train: TrainSection,
    pub verify: VerifySection,
}

impl Config {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        Self::parse(&text).with_context(|| format!("parsing {}", path.display()))
    }

    pub fn parse(text: &str) -> anyhow::Result<Self> {
        Ok(toml::from_str(text)?)
    }

    pub fn to_toml(&self) -> anyhow::Result<String> {
        Ok(toml::to_string(self)?)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunSection {
    pub seed: u64,
    pub threads: usize,
}

impl Default for RunSection {
    fn default() -> Self {
        Self { seed: 0, threads: 1 }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DatasetMode {
    Sparse,
    Hierarchical,
    File,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct DatasetSection {
    pub mode: DatasetMode,
    pub path: Option<PathBuf>,
    pub points: usize,
    pub dim: usize,
    pub half_width: f64,
    pub min_separation: f64,
    pub per_cluster: usize,
    pub cluster_std: f64,
}

impl Default for DatasetSection {
    fn default() -> Self {
        Self {
            mode: DatasetMode::Sparse,
            path: None,
            points: 6,
            dim: 2,
            half_width: 10.0,
            min_separation: 5.0,
            per_cluster: 30,
            cluster_std: 0.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GenPathsSection {
    pub steps: usize,
    pub grid: GridKind,
    pub epsilon: f64,
    /// Defaults to rk4, or euler for a single step.
    pub method: Option<Method>,
    pub trajectories: usize,
    pub snap_tol: f64,
    pub snapshot_times: Vec<f64>,
    /// Starts pushed through the flow for the hierarchical snapshots.
    pub snapshot_samples: usize,
    pub dataset: DatasetSection,
}

impl Default for GenPathsSection {
    fn default() -> Self {
        Self {
            steps: 100,
            grid: GridKind::Uniform,
            epsilon: 1e-4,
            method: None,
            trajectories: 20,
            snap_tol: flowlab::dynamics::DEFAULT_SNAP_TOL,
            snapshot_times: vec![0.0, 0.25, 0.5, 0.75],
            snapshot_samples: 500,
            dataset: DatasetSection::default(),
        }
    }
}

impl GenPathsSection {
    pub fn method(&self) -> Method {
        self.method
            .unwrap_or(if self.steps == 1 { Method::Euler } else { Method::Rk4 })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BoundCheckSection {
    pub t: Vec<f64>,
    pub tau: Vec<f64>,
    pub samples: usize,
    pub dataset: DatasetSection,
}

impl Default for BoundCheckSection {
    fn default() -> Self {
        Self {
            t: vec![0.5, 0.7, 0.9, 0.99],
            tau: vec![0.9, 0.99],
            samples: 100_000,
            dataset: DatasetSection::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EmbApproxSection {
    pub scales: Vec<f64>,
    pub dims: Vec<usize>,
    pub wavelength: f64,
    pub points: usize,
    pub t_max: f64,
    pub zoom: f64,
    pub fit_t_max: f64,
    pub panels: usize,
}

impl Default for EmbApproxSection {
    fn default() -> Self {
        Self {
            scales: vec![1.0, 1000.0],
            dims: vec![32, 64, 128, 256],
            wavelength: 10000.0,
            points: 1000,
            t_max: 0.999,
            zoom: 0.1,
            fit_t_max: 0.9,
            panels: flowlab::osdnet::DEFAULT_PANELS,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrainMode {
    #[default]
    Offsubspace,
    Subspace,
}

/// Unset keys take the mode's defaults.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub mode: TrainMode,
    pub ambient_dim: Option<usize>,
    pub sub_dim: Option<usize>,
    pub points: Option<usize>,
    pub data: Option<PathBuf>,
    pub optimizer: Option<OptimizerKind>,
    pub learning_rate: Option<f64>,
    pub epochs: Option<usize>,
    pub batch: Option<usize>,
    pub checkpoint_every: Option<usize>,
    pub eval_samples: Option<usize>,
    pub clip_norm: Option<f64>,
    pub emb_scale: Option<f64>,
    pub emb_dim: Option<usize>,
    pub hidden: Option<usize>,
    pub blocks: Option<usize>,
    pub resume: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SuiteScale {
    #[default]
    Quick,
    Full,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct VerifySection {
    pub scale: SuiteScale,
    /// Check ids to run; empty runs all.
    pub checks: Vec<u32>,
    pub perturb_optimal: f64,
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_config_is_default() {
        assert_eq!(Config::parse("").unwrap(), Config::default());
    }

    #[test]
    fn round_trip() {
        let mut c = Config::default();
        c.train.epochs = Some(5);
        c.gen_paths.method = Some(Method::Euler);
        c.gen_paths.dataset.path = Some("a.csv".into());
        let back = Config::parse(&c.to_toml().unwrap()).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn unknown_keys_rejected() {
        assert!(Config::parse("[train]\nepoch = 3\n").is_err());
        assert!(Config::parse("[gen_paths.dataset]\nmode = \"ring\"\n").is_err());
    }

    #[test]
    fn single_step_defaults_to_euler() {
        let mut g = GenPathsSection::default();
        assert_eq!(g.method(), Method::Rk4);
        g.steps = 1;
        assert_eq!(g.method(), Method::Euler);
    }
}

//! Experiment configuration: a single TOML file, fully explicit, with the
//! master seed required (reproducibility forbids wall-clock defaults).

use std::path::{Path, PathBuf};

use knudsen_core::microgeometry::CellFamily;
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config invalid: {0}")]
    Invalid(String),
    #[error("cannot read config {path}: {source}")]
    Io {
        path: PathBuf,
        source: std::io::Error,
    },
    #[error("cannot parse config: {0}")]
    Parse(#[from] toml::de::Error),
    #[error("unknown preset {0:?} (available: argon)")]
    UnknownPreset(String),
}

/// Channel geometry: radius, ascending list of half-lengths, molecule speed.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ChannelConfig {
    pub r: f64,
    pub l: Vec<f64>,
    pub rho: f64,
}

/// Which of the three η pipelines to run in `compare`.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineSelection {
    pub mc: bool,
    pub matrix: bool,
    pub analytic: bool,
}

impl Default for PipelineSelection {
    fn default() -> Self {
        PipelineSelection {
            mc: true,
            matrix: true,
            analytic: true,
        }
    }
}

/// Series truncation and quadrature resolution for the spectral pipeline.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Truncation {
    pub k_max: usize,
    pub l_max: usize,
    pub radial_nodes: usize,
    pub angular_nodes: usize,
}

impl Default for Truncation {
    fn default() -> Self {
        Truncation {
            k_max: 35,
            l_max: 35,
            radial_nodes: 200,
            angular_nodes: 512,
        }
    }
}

/// Equal-area disc partition resolution for the matrix pipeline.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct Binning {
    pub n_r: usize,
    pub n_theta: usize,
}

impl Default for Binning {
    fn default() -> Self {
        Binning { n_r: 24, n_theta: 24 }
    }
}

/// Monte Carlo workloads: trajectories, per-bin scatter samples, micro grids.
#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct MonteCarlo {
    pub n_traj: u64,
    pub samples_per_bin: u64,
    pub micro_grid_n: usize,
}

impl Default for MonteCarlo {
    fn default() -> Self {
        MonteCarlo {
            n_traj: 100_000,
            samples_per_bin: 20_000,
            micro_grid_n: 128,
        }
    }
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    /// Master seed; every random stream is derived from it. Required.
    pub seed: u64,
    #[serde(default = "default_output_dir")]
    pub output_dir: PathBuf,
    pub cell: CellFamily,
    pub channel: ChannelConfig,
    #[serde(default)]
    pub pipelines: PipelineSelection,
    #[serde(default)]
    pub truncation: Truncation,
    #[serde(default)]
    pub binning: Binning,
    #[serde(default)]
    pub monte_carlo: MonteCarlo,
}

fn default_output_dir() -> PathBuf {
    PathBuf::from(".")
}

impl ExperimentConfig {
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let cfg: ExperimentConfig = toml::from_str(&text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Built-in presets. `argon`: argon molecule (radius 0.18 nm) over a
    /// square packing of spheres of radius 0.1 nm, circular channel; only the
    /// analytic pipeline is selected because η is far outside the range the
    /// Monte Carlo sources can resolve at practical channel lengths.
    pub fn preset(name: &str) -> Result<Self, ConfigError> {
        match name {
            "argon" => {
                let cfg = ExperimentConfig {
                    seed: 1729,
                    output_dir: default_output_dir(),
                    cell: CellFamily::SpherePacking { r_s: 0.1, r_m: 0.18 },
                    channel: ChannelConfig {
                        r: 1.0,
                        l: vec![50.0],
                        rho: 1.0,
                    },
                    pipelines: PipelineSelection {
                        mc: false,
                        matrix: false,
                        analytic: true,
                    },
                    truncation: Truncation::default(),
                    binning: Binning::default(),
                    monte_carlo: MonteCarlo::default(),
                };
                cfg.validate()?;
                Ok(cfg)
            }
            other => Err(ConfigError::UnknownPreset(other.to_string())),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let fail = |msg: String| Err(ConfigError::Invalid(msg));
        if !(self.channel.r > 0.0) || !(self.channel.rho > 0.0) {
            return fail(format!(
                "channel.r and channel.rho must be positive (r = {}, rho = {})",
                self.channel.r, self.channel.rho
            ));
        }
        if self.channel.l.is_empty() {
            return fail("channel.l must list at least one half-length".into());
        }
        if self.channel.l.iter().any(|&l| !(l > 0.0)) {
            return fail(format!("channel.l must be positive: {:?}", self.channel.l));
        }
        if self.channel.l.windows(2).any(|w| w[0] >= w[1]) {
            return fail(format!(
                "channel.l must be strictly ascending: {:?}",
                self.channel.l
            ));
        }
        if self.monte_carlo.n_traj == 0 {
            return fail("monte_carlo.n_traj must be positive".into());
        }
        if self.monte_carlo.samples_per_bin < 10_000 {
            return fail(format!(
                "monte_carlo.samples_per_bin must be >= 10000 (got {})",
                self.monte_carlo.samples_per_bin
            ));
        }
        if self.monte_carlo.micro_grid_n < 16 {
            return fail("monte_carlo.micro_grid_n must be >= 16".into());
        }
        if self.binning.n_r == 0 || self.binning.n_theta == 0 {
            return fail("binning.n_r and binning.n_theta must be positive".into());
        }
        if self.truncation.k_max == 0 || self.truncation.l_max == 0 {
            return fail("truncation.k_max and truncation.l_max must be positive".into());
        }
        if self.truncation.radial_nodes < 64 || self.truncation.angular_nodes < 64 {
            return fail("truncation nodes must be >= 64".into());
        }
        if !self.pipelines.mc && !self.pipelines.matrix && !self.pipelines.analytic {
            return fail("at least one pipeline must be selected".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MINIMAL: &str = r#"
        seed = 7
        [cell]
        family = "flat"
        c1 = 1.0
        c2 = 1.0
        [channel]
        r = 1.0
        l = [25.0, 50.0]
        rho = 1.0
    "#;

    #[test]
    fn minimal_config_parses_with_defaults() {
        let cfg: ExperimentConfig = toml::from_str(MINIMAL).unwrap();
        cfg.validate().unwrap();
        assert_eq!(cfg.seed, 7);
        assert_eq!(cfg.truncation.k_max, 35);
        assert_eq!(cfg.binning.n_r, 24);
        assert!(cfg.pipelines.mc && cfg.pipelines.matrix && cfg.pipelines.analytic);
    }

    #[test]
    fn seed_is_required() {
        let without_seed = MINIMAL.replace("seed = 7", "");
        assert!(toml::from_str::<ExperimentConfig>(&without_seed).is_err());
    }

    #[test]
    fn zero_trajectories_rejected() {
        let cfg_text = format!("{MINIMAL}\n[monte_carlo]\nn_traj = 0\n");
        let cfg: ExperimentConfig = toml::from_str(&cfg_text).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn descending_l_list_rejected() {
        let cfg_text = MINIMAL.replace("[25.0, 50.0]", "[50.0, 25.0]");
        let cfg: ExperimentConfig = toml::from_str(&cfg_text).unwrap();
        assert!(matches!(cfg.validate(), Err(ConfigError::Invalid(_))));
    }

    #[test]
    fn argon_preset_is_valid() {
        let cfg = ExperimentConfig::preset("argon").unwrap();
        assert!(matches!(cfg.cell, CellFamily::SpherePacking { .. }));
        assert!(ExperimentConfig::preset("xenon").is_err());
    }
}

//! Experiment configuration, read from TOML.

use std::path::{Path, PathBuf};

use mbnla::gaussian::{self, GaussianState, Mode};
use mbnla::nla::DEFAULT_CUTOFF_SD;
use mbnla::qkd::{SweepMode, DEFAULT_BETA};
use nalgebra::Matrix4;
use serde::{Deserialize, Serialize};

use crate::error::{CliError, CliResult};

pub const DEFAULT_SHOTS: usize = 10_000_000;
pub const DEFAULT_N_BOOT: usize = 500;
pub const DEFAULT_CONFIDENCE: f64 = 0.95;

/// Source state. Variances are in shot-noise units.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case")]
pub enum StateSpec {
    Tmsv { r: f64 },
    /// TMSV with the given single-mode quadrature variance.
    TmsvVariance { variance: f64 },
    Squeezers { v_sq: f64, v_anti: f64 },
    Cm { cm: [[f64; 4]; 4] },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModeName {
    A,
    B,
}

impl From<ModeName> for Mode {
    fn from(m: ModeName) -> Self {
        match m {
            ModeName::A => Mode::A,
            ModeName::B => Mode::B,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChannelSpec {
    pub mode: ModeName,
    pub transmissivity: f64,
    #[serde(default)]
    pub thermal_photons: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct FilterConfig {
    pub gains: Vec<f64>,
    pub cutoff_sd: f64,
    /// Seed of the acceptance draws; the sampling seed when absent.
    pub seed: Option<u64>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        Self {
            gains: vec![1.0],
            cutoff_sd: DEFAULT_CUTOFF_SD,
            seed: None,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Analysis {
    Criteria,
    Keyrate,
    Normality,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepConfig {
    /// Extra Bob-side loss values for the loss table.
    pub transmissivities: Vec<f64>,
    pub mode: SweepMode,
}

impl Default for SweepConfig {
    fn default() -> Self {
        Self {
            transmissivities: vec![1.0, 0.5, 0.1, 0.01],
            mode: SweepMode::Analytic,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OutputConfig {
    pub dir: PathBuf,
}

impl Default for OutputConfig {
    fn default() -> Self {
        Self { dir: PathBuf::from("out") }
    }
}

fn default_shots() -> usize {
    DEFAULT_SHOTS
}
fn default_analyses() -> Vec<Analysis> {
    vec![Analysis::Criteria, Analysis::Keyrate, Analysis::Normality]
}
fn default_beta() -> f64 {
    DEFAULT_BETA
}
fn default_n_boot() -> usize {
    DEFAULT_N_BOOT
}
fn default_confidence() -> f64 {
    DEFAULT_CONFIDENCE
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ExperimentConfig {
    pub state: StateSpec,
    #[serde(default)]
    pub channels: Vec<ChannelSpec>,
    #[serde(default = "default_shots")]
    pub shots: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub filter: FilterConfig,
    #[serde(default = "default_analyses")]
    pub analyses: Vec<Analysis>,
    #[serde(default = "default_beta")]
    pub beta_rec: f64,
    #[serde(default = "default_n_boot")]
    pub n_boot: usize,
    #[serde(default = "default_confidence")]
    pub confidence: f64,
    #[serde(default)]
    pub sweep: SweepConfig,
    #[serde(default)]
    pub output: OutputConfig,
}

impl ExperimentConfig {
    pub fn from_toml(text: &str) -> CliResult<Self> {
        toml::from_str(text).map_err(|e| CliError::Parameter(format!("config: {e}")))
    }

    pub fn load(path: &Path) -> CliResult<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
        toml::from_str(&text).map_err(|e| CliError::Parameter(format!("{}: {e}", path.display())))
    }

    pub fn filter_seed(&self) -> u64 {
        self.filter.seed.unwrap_or(self.seed)
    }

    pub fn has(&self, a: Analysis) -> bool {
        self.analyses.contains(&a)
    }

    pub fn validate(&self) -> CliResult<()> {
        let bad = |m: String| Err(CliError::Parameter(m));
        if self.shots < 1 {
            return bad("shots must be at least 1".into());
        }
        if let Some(g) = self.filter.gains.iter().find(|g| !(**g >= 1.0) || !g.is_finite()) {
            return bad(format!("gain {g} must be finite and >= 1"));
        }
        if !(0.0..=1.0).contains(&self.beta_rec) {
            return bad(format!("beta_rec {} outside [0, 1]", self.beta_rec));
        }
        if !(self.confidence > 0.0 && self.confidence < 1.0) {
            return bad(format!("confidence {} outside (0, 1)", self.confidence));
        }
        if let Some(t) = self.sweep.transmissivities.iter().find(|t| !(**t > 0.0 && **t <= 1.0)) {
            return bad(format!("sweep transmissivity {t} outside (0, 1]"));
        }
        for c in &self.channels {
            if !(0.0..=1.0).contains(&c.transmissivity) || !(c.thermal_photons >= 0.0) {
                return bad(format!(
                    "channel T = {}, n_th = {} out of range",
                    c.transmissivity, c.thermal_photons
                ));
            }
        }
        self.build_state().map(|_| ())
    }

    /// Source state with every channel applied in order.
    pub fn build_state(&self) -> CliResult<GaussianState> {
        let mut state = match &self.state {
            StateSpec::Tmsv { r } => gaussian::make_tmsv(*r)?,
            StateSpec::TmsvVariance { variance } => {
                gaussian::make_tmsv(gaussian::tmsv_squeezing_for_variance(*variance)?)?
            }
            StateSpec::Squeezers { v_sq, v_anti } => gaussian::make_epr_from_squeezers(*v_sq, *v_anti)?,
            StateSpec::Cm { cm } => {
                let m = Matrix4::from_fn(|i, j| cm[i][j]);
                GaussianState::from_cm_snu(m, "explicit cm")?
            }
        };
        for c in &self.channels {
            state = state.apply_loss(c.mode.into(), c.transmissivity, c.thermal_photons)?;
        }
        Ok(state)
    }
}

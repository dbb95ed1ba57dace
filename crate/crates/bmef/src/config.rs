//! Fit configuration: model specification, priors, and sampler settings.

use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Which effects the model includes.
///
/// `Abc` has condition-level fixed effects plus subject-level and
/// subject-by-condition random effects; `Ab` drops the subject-by-condition
/// level; `A` keeps only the fixed effects.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ModelSpec {
    #[serde(rename = "ABC")]
    Abc,
    #[serde(rename = "AB")]
    Ab,
    #[serde(rename = "A")]
    A,
}

impl ModelSpec {
    pub fn has_subject_effects(self) -> bool {
        !matches!(self, ModelSpec::A)
    }

    pub fn has_condition_effects(self) -> bool {
        matches!(self, ModelSpec::Abc)
    }
}

/// Whether subject-by-condition variances are per-subject or pooled.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VarianceMode {
    Heterogeneous,
    Homogeneous,
}

/// Prior on the factor matrices.
///
/// The matrix von Mises-Fisher option supplies preferred directions (one
/// orthonormal column per potential rank) and a concentration `nu`; ranks
/// beyond the supplied columns are rejected at validation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum FactorPrior {
    Uniform,
    MatrixVonMisesFisher {
        nu: f64,
        /// Row-major `K_T x R_max` preferred directions for the time factors.
        directions_time: Vec<Vec<f64>>,
        /// Row-major `K_F x R_max` preferred directions for the frequency factors.
        directions_freq: Vec<Vec<f64>>,
    },
}

fn default_k() -> usize {
    6
}
fn default_a_var() -> f64 {
    3.0
}
fn default_b_var() -> f64 {
    0.5
}
fn default_sigma_delta_scale() -> f64 {
    5.0
}
fn default_ab_delta() -> f64 {
    1.0
}
fn default_h0() -> f64 {
    0.01
}
fn default_h1() -> f64 {
    1.0
}
fn default_rank_threshold() -> f64 {
    0.05
}
fn default_warm_start_interval() -> usize {
    100
}
fn default_burn_in() -> usize {
    800
}
fn default_n_draws() -> usize {
    400
}
fn default_model_spec() -> ModelSpec {
    ModelSpec::Abc
}
fn default_variance_mode() -> VarianceMode {
    VarianceMode::Heterogeneous
}
fn default_factor_prior() -> FactorPrior {
    FactorPrior::Uniform
}

/// Everything the sampler needs besides the data.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FitConfig {
    #[serde(default = "default_k")]
    pub k_time: usize,
    #[serde(default = "default_k")]
    pub k_freq: usize,
    #[serde(default = "default_variance_mode")]
    pub variance_mode: VarianceMode,
    #[serde(default = "default_model_spec")]
    pub model_spec: ModelSpec,
    #[serde(default = "default_a_var")]
    pub a_gamma: f64,
    #[serde(default = "default_b_var")]
    pub b_gamma: f64,
    #[serde(default = "default_a_var")]
    pub a_omega: f64,
    #[serde(default = "default_b_var")]
    pub b_omega: f64,
    /// Coefficient prior covariance is `sigma_delta_scale * I_p` unless a full
    /// matrix is supplied in `sigma_delta`.
    #[serde(default = "default_sigma_delta_scale")]
    pub sigma_delta_scale: f64,
    #[serde(default)]
    pub sigma_delta: Option<Vec<Vec<f64>>>,
    #[serde(default = "default_ab_delta")]
    pub a_delta: f64,
    #[serde(default = "default_ab_delta")]
    pub b_delta: f64,
    #[serde(default = "default_h0")]
    pub h0: f64,
    #[serde(default = "default_h1")]
    pub h1: f64,
    /// Rank-selection threshold on the per-rank shrinkage scales.
    #[serde(default = "default_rank_threshold")]
    pub rank_threshold: f64,
    #[serde(default = "default_warm_start_interval")]
    pub warm_start_interval: usize,
    #[serde(default = "default_burn_in")]
    pub burn_in: usize,
    #[serde(default = "default_n_draws")]
    pub n_draws: usize,
    #[serde(default)]
    pub seed: u64,
    #[serde(default = "default_factor_prior")]
    pub factor_prior: FactorPrior,
    /// Worker threads for the per-basis-index updates; 0 picks the rayon
    /// default, 1 disables parallelism.
    #[serde(default)]
    pub threads: usize,
    /// Checkpoint the partial chain every this many recorded draws.
    #[serde(default)]
    pub checkpoint_interval: Option<usize>,
}

impl Default for FitConfig {
    fn default() -> Self {
        serde_json::from_str("{}").expect("defaults deserialize")
    }
}

impl FitConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let parse_err = |message: String| Error::Parse {
            path: path.display().to_string(),
            message,
        };
        let cfg: FitConfig = match path.extension().and_then(|e| e.to_str()) {
            Some("toml") => toml::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
            _ => serde_json::from_str(&text).map_err(|e| parse_err(e.to_string()))?,
        };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        let positives = [
            ("a_gamma", self.a_gamma),
            ("b_gamma", self.b_gamma),
            ("a_omega", self.a_omega),
            ("b_omega", self.b_omega),
            ("sigma_delta_scale", self.sigma_delta_scale),
            ("a_delta", self.a_delta),
            ("b_delta", self.b_delta),
            ("h0", self.h0),
            ("h1", self.h1),
            ("rank_threshold", self.rank_threshold),
        ];
        for (name, v) in positives {
            if !(v > 0.0) || !v.is_finite() {
                return Err(Error::Config(format!("{name} must be positive, got {v}")));
            }
        }
        if self.h0 >= self.h1 {
            return Err(Error::Config(format!(
                "h0 must be smaller than h1, got h0 = {}, h1 = {}",
                self.h0, self.h1
            )));
        }
        if self.k_time < 4 || self.k_freq < 4 {
            return Err(Error::Config(format!(
                "basis dimensions must be at least 4, got k_time = {}, k_freq = {}",
                self.k_time, self.k_freq
            )));
        }
        if self.burn_in < 1 || self.n_draws < 1 {
            return Err(Error::Config(
                "burn_in and n_draws must be at least 1".into(),
            ));
        }
        if self.warm_start_interval < 1 {
            return Err(Error::Config("warm_start_interval must be at least 1".into()));
        }
        if let Some(c) = self.checkpoint_interval {
            if c == 0 {
                return Err(Error::Config("checkpoint_interval must be positive".into()));
            }
        }
        if let FactorPrior::MatrixVonMisesFisher { nu, .. } = &self.factor_prior {
            if !(*nu > 0.0) {
                return Err(Error::Config(format!(
                    "von Mises-Fisher concentration must be positive, got {nu}"
                )));
            }
        }
        Ok(())
    }

    /// The coefficient prior covariance for `p` covariates.
    pub fn sigma_delta_matrix(&self, p: usize) -> Result<DMatrix<f64>> {
        match &self.sigma_delta {
            None => Ok(DMatrix::identity(p, p) * self.sigma_delta_scale),
            Some(rows) => {
                if rows.len() != p || rows.iter().any(|r| r.len() != p) {
                    return Err(Error::Config(format!(
                        "sigma_delta must be {p}x{p} to match the covariates"
                    )));
                }
                let m = DMatrix::from_fn(p, p, |i, j| rows[i][j]);
                if (&m - m.transpose()).amax() > 1e-10 * m.amax().max(1.0) {
                    return Err(Error::Config("sigma_delta must be symmetric".into()));
                }
                if m.clone().cholesky().is_none() {
                    return Err(Error::Config("sigma_delta must be positive definite".into()));
                }
                Ok(m)
            }
        }
    }

    pub fn max_rank(&self) -> usize {
        self.k_time.min(self.k_freq)
    }
}

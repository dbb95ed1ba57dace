//! Parameter state carried through the Gibbs sweep.

use nalgebra::{DMatrix, DVector};

use crate::config::{FitConfig, VarianceMode};
use crate::error::{Error, Result};

/// Covariate-dependent low-rank fixed effect.
///
/// `u` and `v` are the factor matrices with orthonormal columns; column `r`
/// of `delta[j]` holds the covariate coefficients of rank `r` under condition
/// `j` (1-based conditions map to `delta[j - 1]`). `tau`, `membership`, and
/// `slab_weight` are the spike-and-slab shrinkage state.
#[derive(Debug, Clone)]
pub struct CpFixedEffect {
    pub u: DMatrix<f64>,
    pub v: DMatrix<f64>,
    pub delta: Vec<DMatrix<f64>>,
    pub tau: Vec<f64>,
    pub membership: Vec<bool>,
    pub slab_weight: f64,
}

impl CpFixedEffect {
    pub fn rank(&self) -> usize {
        self.u.ncols()
    }

    pub fn k_time(&self) -> usize {
        self.u.nrows()
    }

    pub fn k_freq(&self) -> usize {
        self.v.nrows()
    }

    pub fn n_conditions(&self) -> usize {
        self.delta.len()
    }

    pub fn n_covariates(&self) -> usize {
        self.delta.first().map_or(0, |d| d.nrows())
    }

    /// Weight of rank `r` under condition `j` (1-based) for covariates `x`.
    pub fn weight(&self, j: usize, r: usize, x: &DVector<f64>) -> f64 {
        self.delta[j - 1].column(r).dot(x)
    }

    /// `v_r (x) u_r`: the vectorized rank-one basis-coefficient pattern.
    pub fn cp_column(&self, r: usize) -> DVector<f64> {
        let (kt, kf) = (self.k_time(), self.k_freq());
        let mut w = DVector::zeros(kt * kf);
        for kfi in 0..kf {
            let vf = self.v[(kfi, r)];
            for kti in 0..kt {
                w[kfi * kt + kti] = vf * self.u[(kti, r)];
            }
        }
        w
    }

    /// Basis coefficients of the fixed effect for condition `j` (1-based).
    pub fn coefficients(&self, j: usize, x: &DVector<f64>) -> DVector<f64> {
        let mut out = DVector::zeros(self.k_time() * self.k_freq());
        for r in 0..self.rank() {
            out.axpy(self.weight(j, r, x), &self.cp_column(r), 1.0);
        }
        out
    }

    /// Largest deviation of `U'U` and `V'V` from the identity.
    pub fn orthonormality_drift(&self) -> f64 {
        let r = self.rank();
        let du = (self.u.transpose() * &self.u - DMatrix::identity(r, r)).amax();
        let dv = (self.v.transpose() * &self.v - DMatrix::identity(r, r)).amax();
        du.max(dv)
    }

    /// Re-orthonormalize the factor columns in place when drift exceeds the
    /// tolerance. Columns keep their order and direction.
    pub fn reorthonormalize_if_needed(&mut self) {
        if self.orthonormality_drift() <= 1e-10 {
            return;
        }
        for m in [&mut self.u, &mut self.v] {
            for j in 0..m.ncols() {
                for prev in 0..j {
                    let proj = m.column(prev).dot(&m.column(j));
                    let p = m.column(prev).clone_owned();
                    m.column_mut(j).axpy(-proj, &p, 1.0);
                }
                let norm = m.column(j).norm();
                m.column_mut(j).scale_mut(1.0 / norm);
            }
        }
    }

    pub fn validate(&self, max_rank: usize) -> Result<()> {
        if self.rank() == 0 || self.rank() > max_rank {
            return Err(Error::Spec(format!(
                "rank {} outside 1..={max_rank}",
                self.rank()
            )));
        }
        if self.orthonormality_drift() > 1e-8 {
            return Err(Error::Spec("factor matrices lost orthonormality".into()));
        }
        if self.tau.iter().any(|&t| !(t > 0.0)) {
            return Err(Error::Spec("shrinkage scales must be positive".into()));
        }
        Ok(())
    }
}

/// Per-subject or pooled subject-by-condition variance.
#[derive(Debug, Clone)]
pub enum SigmaOmega {
    PerSubject(Vec<f64>),
    Pooled(f64),
    Absent,
}

/// Random-effect coefficients and variance components.
///
/// `gamma` is `n x K` (empty under model `A`); `omega` is `J' x K` with one
/// row per observed pair in dataset stacking order (empty under `A` and `AB`).
#[derive(Debug, Clone)]
pub struct RandomEffectState {
    pub gamma: DMatrix<f64>,
    pub omega: DMatrix<f64>,
    pub sigma_gamma2: f64,
    pub sigma_omega2: SigmaOmega,
    pub sigma_eps2: f64,
}

impl RandomEffectState {
    pub fn initial(cfg: &FitConfig, n_subjects: usize, j_total: usize, k: usize) -> Self {
        let prior_mean = |a: f64, b: f64| if a > 1.0 { b / (a - 1.0) } else { 1.0 };
        let has_gamma = cfg.model_spec.has_subject_effects();
        let has_omega = cfg.model_spec.has_condition_effects();
        let sigma_omega2 = if !has_omega {
            SigmaOmega::Absent
        } else {
            match cfg.variance_mode {
                VarianceMode::Heterogeneous => {
                    SigmaOmega::PerSubject(vec![
                        prior_mean(cfg.a_omega, cfg.b_omega);
                        n_subjects
                    ])
                }
                VarianceMode::Homogeneous => {
                    SigmaOmega::Pooled(prior_mean(cfg.a_omega, cfg.b_omega))
                }
            }
        };
        RandomEffectState {
            gamma: if has_gamma {
                DMatrix::zeros(n_subjects, k)
            } else {
                DMatrix::zeros(0, 0)
            },
            omega: if has_omega {
                DMatrix::zeros(j_total, k)
            } else {
                DMatrix::zeros(0, 0)
            },
            sigma_gamma2: prior_mean(cfg.a_gamma, cfg.b_gamma),
            sigma_omega2,
            sigma_eps2: 1.0,
        }
    }

    pub fn has_gamma(&self) -> bool {
        self.gamma.nrows() > 0
    }

    pub fn has_omega(&self) -> bool {
        self.omega.nrows() > 0
    }

    /// Subject-by-condition variance entering subject `i`'s covariance; zero
    /// when that level is absent from the model.
    pub fn sigma_omega2_for(&self, i: usize) -> f64 {
        match &self.sigma_omega2 {
            SigmaOmega::PerSubject(v) => v[i],
            SigmaOmega::Pooled(s) => *s,
            SigmaOmega::Absent => 0.0,
        }
    }

    /// Subject-level variance entering the covariance; zero under model `A`.
    pub fn sigma_gamma2_effective(&self) -> f64 {
        if self.has_gamma() {
            self.sigma_gamma2
        } else {
            0.0
        }
    }

    pub fn validate(&self) -> Result<()> {
        let mut vars = vec![self.sigma_gamma2, self.sigma_eps2];
        match &self.sigma_omega2 {
            SigmaOmega::PerSubject(v) => vars.extend_from_slice(v),
            SigmaOmega::Pooled(s) => vars.push(*s),
            SigmaOmega::Absent => {}
        }
        if vars.iter().any(|v| !(*v > 0.0) || !v.is_finite()) {
            return Err(Error::Spec("variance components must be positive".into()));
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn cp_column_matches_kronecker_order() {
        // time index runs fastest inside the vectorized coefficients
        let u = DMatrix::from_column_slice(2, 1, &[1.0, 2.0]);
        let v = DMatrix::from_column_slice(3, 1, &[10.0, 20.0, 30.0]);
        let fx = CpFixedEffect {
            u,
            v,
            delta: vec![DMatrix::zeros(1, 1)],
            tau: vec![1.0],
            membership: vec![true],
            slab_weight: 0.5,
        };
        let w = fx.cp_column(0);
        assert_eq!(
            w.as_slice(),
            &[10.0, 20.0, 20.0, 40.0, 30.0, 60.0]
        );
    }

    #[test]
    fn reorthonormalization_restores_columns() {
        let mut fx = CpFixedEffect {
            u: DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 1e-6, 1.0, 0.0]),
            v: DMatrix::from_column_slice(3, 2, &[1.0, 0.0, 0.0, 0.0, 1.0, 0.0]),
            delta: vec![DMatrix::zeros(1, 2)],
            tau: vec![1.0, 1.0],
            membership: vec![true, true],
            slab_weight: 0.5,
        };
        assert!(fx.orthonormality_drift() > 1e-10);
        fx.reorthonormalize_if_needed();
        assert!(fx.orthonormality_drift() < 1e-12);
    }
}

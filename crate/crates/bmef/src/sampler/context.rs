//! Precomputed quantities shared by every Gibbs iteration.

use nalgebra::{DMatrix, DVector};

use crate::basis::TensorBasis;
use crate::config::{FactorPrior, FitConfig};
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};

use super::precision::SubjectPrecision;
use super::state::{CpFixedEffect, RandomEffectState};
use super::updates::FactorAxis;

/// Immutable per-fit context: projected data, residual constants, covariates.
pub struct FitContext<'a> {
    pub ds: &'a FunctionalDataset,
    pub basis: &'a TensorBasis,
    pub cfg: &'a FitConfig,
    /// Projected coefficients, one row per observed pair in stacking order.
    pub ytilde: DMatrix<f64>,
    /// Squared distance from each response to its basis projection; constant
    /// through the fit and added back in the noise-variance update.
    pub ssr_perp: Vec<f64>,
    /// Covariate vector per subject.
    pub x: Vec<DVector<f64>>,
    /// Inverse of the coefficient prior covariance.
    pub sigma_delta_inv: DMatrix<f64>,
    /// First pair row of each subject (length n + 1).
    pub subject_offsets: Vec<usize>,
    /// Parsed von Mises-Fisher prior directions, when configured.
    mvmf: Option<MvmfDirections>,
}

struct MvmfDirections {
    time: DMatrix<f64>,
    freq: DMatrix<f64>,
}

impl<'a> FitContext<'a> {
    pub fn new(
        ds: &'a FunctionalDataset,
        basis: &'a TensorBasis,
        cfg: &'a FitConfig,
    ) -> Result<Self> {
        if basis.t_len() != ds.t_len() || basis.f_len() != ds.f_len() {
            return Err(Error::Shape(
                "basis grid does not match the dataset grid".into(),
            ));
        }
        let k = basis.k();
        let jt = ds.j_total();
        let mut ytilde = DMatrix::zeros(jt, k);
        let mut ssr_perp = Vec::with_capacity(jt);
        for (row, &(i, j)) in ds.pairs().iter().enumerate() {
            let y = ds.response(i, j).expect("pair is observed");
            let coef = basis.project(y)?;
            let fitted = basis.reconstruct(&coef);
            ssr_perp.push((y - fitted).norm_squared());
            ytilde.row_mut(row).copy_from(&coef.transpose());
        }
        let x: Vec<DVector<f64>> = (0..ds.n_subjects()).map(|i| ds.covariate_row(i)).collect();
        let sigma_delta = cfg.sigma_delta_matrix(ds.n_covariates())?;
        let sigma_delta_inv = sigma_delta
            .clone()
            .try_inverse()
            .ok_or_else(|| Error::Config("sigma_delta is not invertible".into()))?;

        let mut subject_offsets = Vec::with_capacity(ds.n_subjects() + 1);
        subject_offsets.push(0);
        for i in 0..ds.n_subjects() {
            subject_offsets.push(subject_offsets[i] + ds.j_count(i));
        }
        debug_assert_eq!(subject_offsets[ds.n_subjects()], jt);

        let mvmf = match &cfg.factor_prior {
            FactorPrior::Uniform => None,
            FactorPrior::MatrixVonMisesFisher {
                directions_time,
                directions_freq,
                ..
            } => Some(MvmfDirections {
                time: direction_matrix(directions_time, basis.k_time(), cfg.max_rank(), "time")?,
                freq: direction_matrix(directions_freq, basis.k_freq(), cfg.max_rank(), "freq")?,
            }),
        };

        Ok(FitContext {
            ds,
            basis,
            cfg,
            ytilde,
            ssr_perp,
            x,
            sigma_delta_inv,
            subject_offsets,
            mvmf,
        })
    }

    /// Preferred prior direction for one factor column, when configured.
    pub fn mvmf_direction(&self, axis: FactorAxis, r: usize) -> Option<DVector<f64>> {
        let m = self.mvmf.as_ref()?;
        let mat = match axis {
            FactorAxis::Time => &m.time,
            FactorAxis::Freq => &m.freq,
        };
        (r < mat.ncols()).then(|| mat.column(r).clone_owned())
    }

    pub fn k(&self) -> usize {
        self.basis.k()
    }

    pub fn n_subjects(&self) -> usize {
        self.ds.n_subjects()
    }

    pub fn j_total(&self) -> usize {
        self.ds.j_total()
    }

    pub fn gram_diag(&self) -> &DVector<f64> {
        self.basis.gram_diag()
    }

    /// Pair rows belonging to subject `i`.
    pub fn subject_rows(&self, i: usize) -> std::ops::Range<usize> {
        self.subject_offsets[i]..self.subject_offsets[i + 1]
    }

    /// Fixed-effect coefficients for every observed pair (`J' x K`).
    pub fn fixed_effect_coefs(&self, fixed: &CpFixedEffect) -> DMatrix<f64> {
        let mut alpha = DMatrix::zeros(self.j_total(), self.k());
        for r in 0..fixed.rank() {
            let w = fixed.cp_column(r);
            for (row, &(i, j)) in self.ds.pairs().iter().enumerate() {
                let lam = fixed.weight(j, r, &self.x[i]);
                if lam != 0.0 {
                    for l in 0..self.k() {
                        alpha[(row, l)] += lam * w[l];
                    }
                }
            }
        }
        alpha
    }

    /// One structured precision per subject at the current variances.
    pub fn subject_precisions(&self, state: &RandomEffectState) -> Vec<SubjectPrecision> {
        (0..self.n_subjects())
            .map(|i| {
                SubjectPrecision::new(
                    state.sigma_gamma2_effective(),
                    state.sigma_omega2_for(i),
                    state.sigma_eps2,
                    self.gram_diag(),
                    self.ds.j_count(i),
                )
            })
            .collect()
    }

    /// Stacked partial residual for subject `i` excluding rank `r`:
    /// the subject's projected data minus every other rank's contribution.
    pub fn partial_residual(&self, fixed: &CpFixedEffect, r: usize, i: usize) -> DVector<f64> {
        let k = self.k();
        let rows = self.subject_rows(i);
        let mut q = DVector::zeros(rows.len() * k);
        for (b, row) in rows.clone().enumerate() {
            for l in 0..k {
                q[b * k + l] = self.ytilde[(row, l)];
            }
        }
        for rp in 0..fixed.rank() {
            if rp == r {
                continue;
            }
            let w = fixed.cp_column(rp);
            for (b, row) in rows.clone().enumerate() {
                let (_, j) = self.ds.pairs()[row];
                let lam = fixed.weight(j, rp, &self.x[i]);
                if lam != 0.0 {
                    for l in 0..k {
                        q[b * k + l] -= lam * w[l];
                    }
                }
            }
        }
        q
    }
}

fn direction_matrix(
    rows: &[Vec<f64>],
    expected_rows: usize,
    min_cols: usize,
    which: &str,
) -> Result<DMatrix<f64>> {
    if rows.len() != expected_rows {
        return Err(Error::Config(format!(
            "prior directions for the {which} factors need {expected_rows} rows, got {}",
            rows.len()
        )));
    }
    let cols = rows.first().map_or(0, |r| r.len());
    if cols < min_cols || rows.iter().any(|r| r.len() != cols) {
        return Err(Error::Config(format!(
            "prior directions for the {which} factors need at least {min_cols} equal-length columns"
        )));
    }
    let m = DMatrix::from_fn(expected_rows, cols, |i, j| rows[i][j]);
    for c in 0..cols {
        let norm = m.column(c).norm();
        if (norm - 1.0).abs() > 1e-6 {
            return Err(Error::Config(format!(
                "prior direction column {c} for the {which} factors has norm {norm}, expected 1"
            )));
        }
    }
    Ok(m)
}

//! Conditional posterior parameters and draws for every Gibbs block.
//!
//! Each update is split into a parameter computation and a drawing step so
//! tests can verify the parameters against dense-matrix oracles and replay
//! draws with fixed random streams.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Beta, Distribution, StandardNormal};

use crate::config::FactorPrior;
use crate::distributions::{
    gig_mode, sample_fisher_bingham_stats, sample_inverse_gamma, FisherBinghamParams,
};
use crate::error::{Error, Result};
use crate::linalg::orthonormal_complement;

use super::context::FitContext;
use super::precision::SubjectPrecision;
use super::state::{CpFixedEffect, RandomEffectState, SigmaOmega};

/// Sampled variances never drop below this floor.
pub const VARIANCE_FLOOR: f64 = 1e-12;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct InverseGammaParams {
    pub shape: f64,
    pub scale: f64,
}

#[derive(Debug, Clone)]
pub enum OmegaVariancePosterior {
    PerSubject(Vec<InverseGammaParams>),
    Pooled(InverseGammaParams),
}

#[derive(Debug, Clone)]
pub struct VariancePosteriors {
    pub gamma: Option<InverseGammaParams>,
    pub omega: Option<OmegaVariancePosterior>,
    pub eps: InverseGammaParams,
}

/// Conjugate inverse-gamma parameters for all variance components.
pub fn variance_posterior_params(
    state: &RandomEffectState,
    ctx: &FitContext,
    alpha: &DMatrix<f64>,
) -> Result<VariancePosteriors> {
    let k = ctx.k() as f64;
    let cfg = ctx.cfg;

    let gamma = state.has_gamma().then(|| InverseGammaParams {
        shape: cfg.a_gamma + 0.5 * ctx.n_subjects() as f64 * k,
        scale: cfg.b_gamma + 0.5 * state.gamma.iter().map(|g| g * g).sum::<f64>(),
    });

    let omega = if state.has_omega() {
        Some(match &state.sigma_omega2 {
            SigmaOmega::PerSubject(_) => {
                let mut per = Vec::with_capacity(ctx.n_subjects());
                for i in 0..ctx.n_subjects() {
                    let ss: f64 = ctx
                        .subject_rows(i)
                        .map(|row| state.omega.row(row).iter().map(|o| o * o).sum::<f64>())
                        .sum();
                    per.push(InverseGammaParams {
                        shape: cfg.a_omega + 0.5 * ctx.ds.j_count(i) as f64 * k,
                        scale: cfg.b_omega + 0.5 * ss,
                    });
                }
                OmegaVariancePosterior::PerSubject(per)
            }
            SigmaOmega::Pooled(_) => OmegaVariancePosterior::Pooled(InverseGammaParams {
                shape: cfg.a_omega + 0.5 * ctx.j_total() as f64 * k,
                scale: cfg.b_omega + 0.5 * state.omega.iter().map(|o| o * o).sum::<f64>(),
            }),
            SigmaOmega::Absent => unreachable!("has_omega checked"),
        })
    } else {
        None
    };

    // || y - O beta ||^2 accumulated through the projection identity:
    // the off-span part is constant and the rest is a weighted coefficient gap.
    let gram = ctx.gram_diag();
    let mut rss = 0.0;
    for (row, _) in ctx.ds.pairs().iter().enumerate() {
        rss += ctx.ssr_perp[row];
        for l in 0..ctx.k() {
            let mut beta = alpha[(row, l)];
            if state.has_gamma() {
                beta += state.gamma[(ctx.ds.pairs()[row].0, l)];
            }
            if state.has_omega() {
                beta += state.omega[(row, l)];
            }
            let gap = ctx.ytilde[(row, l)] - beta;
            rss += gram[l] * gap * gap;
        }
    }
    if !rss.is_finite() {
        return Err(Error::NumericalDivergence {
            iteration: 0,
            context: "residual sum of squares is not finite".into(),
        });
    }
    let eps = InverseGammaParams {
        shape: 0.5 * ctx.ds.grid_len() as f64 * ctx.j_total() as f64,
        scale: 0.5 * rss,
    };

    Ok(VariancePosteriors { gamma, omega, eps })
}

/// Draw all variance components from their conjugate posteriors.
pub fn update_variances<R: Rng>(
    state: &mut RandomEffectState,
    ctx: &FitContext,
    alpha: &DMatrix<f64>,
    rng: &mut R,
) -> Result<()> {
    let post = variance_posterior_params(state, ctx, alpha)?;
    if let Some(g) = post.gamma {
        state.sigma_gamma2 = sample_inverse_gamma(g.shape, g.scale, rng)?.max(VARIANCE_FLOOR);
    }
    match post.omega {
        Some(OmegaVariancePosterior::PerSubject(per)) => {
            let mut values = Vec::with_capacity(per.len());
            for p in per {
                values.push(sample_inverse_gamma(p.shape, p.scale, rng)?.max(VARIANCE_FLOOR));
            }
            state.sigma_omega2 = SigmaOmega::PerSubject(values);
        }
        Some(OmegaVariancePosterior::Pooled(p)) => {
            state.sigma_omega2 =
                SigmaOmega::Pooled(sample_inverse_gamma(p.shape, p.scale, rng)?.max(VARIANCE_FLOOR));
        }
        None => {}
    }
    state.sigma_eps2 =
        sample_inverse_gamma(post.eps.shape, post.eps.scale, rng)?.max(VARIANCE_FLOOR);
    Ok(())
}

/// Per-subject `(variance, precision-weighted mean)` sites for one column of
/// the subject-level effects.
///
/// The subject-by-condition level is marginalized out, so the effective noise
/// on each projected observation is `sigma_omega_i^2 + sigma_eps^2 / d_l`.
pub fn gamma_column_params(
    l: usize,
    ctx: &FitContext,
    sigma_gamma2: f64,
    sigma_omega2: &[f64],
    sigma_eps2: f64,
    alpha: &DMatrix<f64>,
) -> Vec<(f64, f64)> {
    let d_l = ctx.gram_diag()[l];
    (0..ctx.n_subjects())
        .map(|i| {
            let noise = sigma_omega2[i] + sigma_eps2 / d_l;
            let c = 1.0 / (1.0 / sigma_gamma2 + ctx.ds.j_count(i) as f64 / noise);
            let g = ctx
                .subject_rows(i)
                .map(|row| (ctx.ytilde[(row, l)] - alpha[(row, l)]) / noise)
                .sum::<f64>();
            (c, g)
        })
        .collect()
}

/// Per-pair sites for one column of the subject-by-condition effects.
pub fn omega_column_params(
    l: usize,
    ctx: &FitContext,
    sigma_omega2: &[f64],
    sigma_eps2: f64,
    alpha: &DMatrix<f64>,
    gamma_col: &[f64],
) -> Vec<(f64, f64)> {
    let d_l = ctx.gram_diag()[l];
    let data_precision = d_l / sigma_eps2;
    ctx.ds
        .pairs()
        .iter()
        .enumerate()
        .map(|(row, &(i, _))| {
            let c = 1.0 / (1.0 / sigma_omega2[i] + data_precision);
            let g =
                data_precision * (ctx.ytilde[(row, l)] - alpha[(row, l)] - gamma_col[i]);
            (c, g)
        })
        .collect()
}

/// Draw independent Gaussians `N(c * g, c)` into `out`.
pub fn draw_gaussian_sites<R: Rng>(params: &[(f64, f64)], out: &mut [f64], rng: &mut R) {
    debug_assert_eq!(params.len(), out.len());
    for (slot, &(c, g)) in out.iter_mut().zip(params) {
        let z: f64 = StandardNormal.sample(rng);
        *slot = c * g + c.sqrt() * z;
    }
}

/// Update one column of the subject-level effects (test-friendly wrapper).
pub fn update_gamma<R: Rng>(
    l: usize,
    state: &mut RandomEffectState,
    ctx: &FitContext,
    alpha: &DMatrix<f64>,
    rng: &mut R,
) {
    let sigma_omega2: Vec<f64> = (0..ctx.n_subjects())
        .map(|i| state.sigma_omega2_for(i))
        .collect();
    let params = gamma_column_params(
        l,
        ctx,
        state.sigma_gamma2,
        &sigma_omega2,
        state.sigma_eps2,
        alpha,
    );
    let n = ctx.n_subjects();
    draw_gaussian_sites(&params, &mut state.gamma.as_mut_slice()[l * n..(l + 1) * n], rng);
}

/// Update one column of the subject-by-condition effects.
pub fn update_omega<R: Rng>(
    l: usize,
    state: &mut RandomEffectState,
    ctx: &FitContext,
    alpha: &DMatrix<f64>,
    rng: &mut R,
) {
    let sigma_omega2: Vec<f64> = (0..ctx.n_subjects())
        .map(|i| state.sigma_omega2_for(i))
        .collect();
    let n = ctx.n_subjects();
    let gamma_col: Vec<f64> = if state.has_gamma() {
        state.gamma.as_slice()[l * n..(l + 1) * n].to_vec()
    } else {
        vec![0.0; n]
    };
    let params = omega_column_params(
        l,
        ctx,
        &sigma_omega2,
        state.sigma_eps2,
        alpha,
        &gamma_col,
    );
    let jt = ctx.j_total();
    draw_gaussian_sites(
        &params,
        &mut state.omega.as_mut_slice()[l * jt..(l + 1) * jt],
        rng,
    );
}

/// Which factor matrix a column update targets.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FactorAxis {
    Time,
    Freq,
}

/// Posterior pieces of one factor-column update: the Fisher-Bingham
/// parameters expressed in the orthogonal-complement coordinates, plus the
/// complement basis itself.
#[derive(Debug, Clone)]
pub struct FactorColumnPosterior {
    pub linear: DVector<f64>,
    pub quadratic: DMatrix<f64>,
    pub complement: DMatrix<f64>,
}

/// Assemble the factor-column posterior for `axis` and rank `r`.
///
/// The column's conditional, with random effects and noise marginalized into
/// the structured subject covariances, is Fisher-Bingham on the unit sphere of
/// the orthogonal complement of the remaining columns.
pub fn factor_column_posterior(
    axis: FactorAxis,
    r: usize,
    fixed: &CpFixedEffect,
    precisions: &[SubjectPrecision],
    ctx: &FitContext,
) -> Result<FactorColumnPosterior> {
    let kt = fixed.k_time();
    let kf = fixed.k_freq();
    let dim = match axis {
        FactorAxis::Time => kt,
        FactorAxis::Freq => kf,
    };
    let rank = fixed.rank();

    // accumulate G = sum_i w_{r,i} (+ prior direction) and H = sum_i H_{r,i}
    let mut g_total = DVector::zeros(dim);
    let mut h_total = DMatrix::zeros(dim, dim);

    for i in 0..ctx.n_subjects() {
        let prec = &precisions[i];
        let a = prec.a();
        let shrink = prec.shrink();
        let rows = ctx.subject_rows(i);
        let lam: Vec<f64> = rows
            .clone()
            .map(|row| {
                let (_, j) = ctx.ds.pairs()[row];
                fixed.weight(j, r, &ctx.x[i])
            })
            .collect();
        let lam_sum: f64 = lam.iter().sum();
        let lam_sq: f64 = lam.iter().map(|l| l * l).sum();

        let q = ctx.partial_residual(fixed, r, i);
        let s = prec.apply(&q);

        match axis {
            FactorAxis::Time => {
                // w[kt] = sum_{b, kf} lam_b v[kf] s[b K + kf K_T + kt]
                for (b, &lam_b) in lam.iter().enumerate() {
                    if lam_b == 0.0 {
                        continue;
                    }
                    for kfi in 0..kf {
                        let vf = lam_b * fixed.v[(kfi, r)];
                        if vf == 0.0 {
                            continue;
                        }
                        let base = b * (kt * kf) + kfi * kt;
                        for kti in 0..kt {
                            g_total[kti] += vf * s[base + kti];
                        }
                    }
                }
                // H = lam_sq diag(p) - shrink lam_sum^2 q q'
                let mut p_vec: DVector<f64> = DVector::zeros(kt);
                let mut q_vec: DVector<f64> = DVector::zeros(kt);
                for kfi in 0..kf {
                    let vf = fixed.v[(kfi, r)];
                    for kti in 0..kt {
                        let al = a[kfi * kt + kti];
                        p_vec[kti] += vf * vf * al;
                        q_vec[kti] += vf * al;
                    }
                }
                for kti in 0..kt {
                    h_total[(kti, kti)] += lam_sq * p_vec[kti];
                }
                let w = shrink * lam_sum * lam_sum;
                if w != 0.0 {
                    for r1 in 0..kt {
                        for r2 in 0..kt {
                            h_total[(r1, r2)] -= w * q_vec[r1] * q_vec[r2];
                        }
                    }
                }
            }
            FactorAxis::Freq => {
                for (b, &lam_b) in lam.iter().enumerate() {
                    if lam_b == 0.0 {
                        continue;
                    }
                    for kfi in 0..kf {
                        let base = b * (kt * kf) + kfi * kt;
                        let mut acc = 0.0;
                        for kti in 0..kt {
                            acc += fixed.u[(kti, r)] * s[base + kti];
                        }
                        g_total[kfi] += lam_b * acc;
                    }
                }
                let mut p_vec: DVector<f64> = DVector::zeros(kf);
                let mut q_vec: DVector<f64> = DVector::zeros(kf);
                for kfi in 0..kf {
                    for kti in 0..kt {
                        let ut = fixed.u[(kti, r)];
                        let al = a[kfi * kt + kti];
                        p_vec[kfi] += ut * ut * al;
                        q_vec[kfi] += ut * al;
                    }
                }
                for kfi in 0..kf {
                    h_total[(kfi, kfi)] += lam_sq * p_vec[kfi];
                }
                let w = shrink * lam_sum * lam_sum;
                if w != 0.0 {
                    for r1 in 0..kf {
                        for r2 in 0..kf {
                            h_total[(r1, r2)] -= w * q_vec[r1] * q_vec[r2];
                        }
                    }
                }
            }
        }
    }

    if let FactorPrior::MatrixVonMisesFisher { nu, .. } = &ctx.cfg.factor_prior {
        let f_r = ctx
            .mvmf_direction(axis, r)
            .ok_or_else(|| Error::Config("prior directions missing for current rank".into()))?;
        g_total.axpy(*nu, &f_r, 1.0);
    }

    // restrict to the orthogonal complement of the other columns
    let others = match axis {
        FactorAxis::Time => drop_column(&fixed.u, r),
        FactorAxis::Freq => drop_column(&fixed.v, r),
    };
    let complement = orthonormal_complement(&others, dim);
    debug_assert_eq!(complement.ncols(), dim - rank + 1);
    let linear = complement.transpose() * &g_total;
    let quadratic = complement.transpose() * &h_total * &complement;

    Ok(FactorColumnPosterior {
        linear,
        quadratic,
        complement,
    })
}

fn drop_column(m: &DMatrix<f64>, r: usize) -> DMatrix<f64> {
    m.clone().remove_column(r)
}

/// Draw one factor column from its conditional and write it back.
///
/// Returns the number of rejection attempts used by the sphere sampler.
pub fn update_factor_column<R: Rng>(
    axis: FactorAxis,
    r: usize,
    fixed: &mut CpFixedEffect,
    precisions: &[SubjectPrecision],
    ctx: &FitContext,
    rng: &mut R,
) -> Result<u64> {
    let post = factor_column_posterior(axis, r, fixed, precisions, ctx)?;
    let free_dim = post.complement.ncols();
    let (theta, attempts) = if free_dim == 1 {
        // the sphere degenerates to two points; exp(g theta) picks the sign
        let g = post.linear[0];
        let p_plus = 1.0 / (1.0 + (-2.0 * g).exp());
        let sign = if rng.random::<f64>() < p_plus { 1.0 } else { -1.0 };
        (DVector::from_element(1, sign), 1)
    } else {
        let params = FisherBinghamParams::new(post.linear, post.quadratic).map_err(|e| {
            Error::NumericalDivergence {
                iteration: 0,
                context: format!("factor column ({axis:?}, rank {r}): {e}"),
            }
        })?;
        sample_fisher_bingham_stats(&params, rng).map_err(|e| match e {
            Error::SamplerDegenerate { .. } => Error::NumericalDivergence {
                iteration: 0,
                context: format!("factor column ({axis:?}, rank {r}): {e}"),
            },
            other => other,
        })?
    };
    let column = &post.complement * theta;
    match axis {
        FactorAxis::Time => fixed.u.set_column(r, &column),
        FactorAxis::Freq => fixed.v.set_column(r, &column),
    }
    fixed.reorthonormalize_if_needed();
    Ok(attempts)
}

/// Posterior precision and linear term of one covariate-coefficient block.
#[derive(Debug, Clone)]
pub struct DeltaPosterior {
    pub precision: DMatrix<f64>,
    pub linear: DVector<f64>,
}

/// Assemble the Gaussian conditional for the coefficients of condition `j`
/// (1-based) and rank `r`.
pub fn delta_posterior_params(
    j: usize,
    r: usize,
    fixed: &CpFixedEffect,
    precisions: &[SubjectPrecision],
    ctx: &FitContext,
) -> Result<DeltaPosterior> {
    let p = ctx.ds.n_covariates();
    let k = ctx.k();
    let w = fixed.cp_column(r);

    let mut precision = &ctx.sigma_delta_inv / fixed.tau[r];
    let mut linear = DVector::zeros(p);

    for i in 0..ctx.n_subjects() {
        let Some(pos) = ctx.ds.observed(i).iter().position(|&jj| jj == j) else {
            continue;
        };
        let prec = &precisions[i];
        let a = prec.a();
        let shrink = prec.shrink();
        let q = ctx.partial_residual(fixed, r, i);

        // chi = w' [ diag(a) q_j - shrink a (sum_{j'} a'(q_{j'} - corr_{j'})) ]
        // where corr subtracts the current rank-r contribution of the other
        // conditions (they condition on their own delta values).
        let mut cross = 0.0;
        for (b, row) in ctx.subject_rows(i).enumerate() {
            let (_, jp) = ctx.ds.pairs()[row];
            let lam = if jp == j {
                0.0
            } else {
                fixed.weight(jp, r, &ctx.x[i])
            };
            for l in 0..k {
                cross += a[l] * (q[b * k + l] - lam * w[l]);
            }
        }
        let mut chi = 0.0;
        let mut weighted_w = 0.0;
        for l in 0..k {
            chi += w[l] * a[l] * q[pos * k + l];
            weighted_w += w[l] * a[l];
        }
        chi -= shrink * cross * weighted_w;

        let kappa = prec.block_quad_form(&w);
        let x = &ctx.x[i];
        for r1 in 0..p {
            linear[r1] += chi * x[r1];
            for r2 in 0..p {
                precision[(r1, r2)] += kappa * x[r1] * x[r2];
            }
        }
    }
    Ok(DeltaPosterior { precision, linear })
}

/// Draw the coefficients of condition `j` (1-based), rank `r`, in place.
pub fn update_delta<R: Rng>(
    j: usize,
    r: usize,
    fixed: &mut CpFixedEffect,
    precisions: &[SubjectPrecision],
    ctx: &FitContext,
    rng: &mut R,
) -> Result<()> {
    let post = delta_posterior_params(j, r, fixed, precisions, ctx)?;
    let chol = post
        .precision
        .clone()
        .cholesky()
        .ok_or_else(|| Error::NumericalDivergence {
            iteration: 0,
            context: format!("singular coefficient precision (condition {j}, rank {r})"),
        })?;
    let mean = chol.solve(&post.linear);
    let p = mean.len();
    let z: DVector<f64> = DVector::from_fn(p, |_, _| StandardNormal.sample(rng));
    let noise = chol
        .l()
        .transpose()
        .solve_upper_triangular(&z)
        .ok_or_else(|| Error::NumericalDivergence {
            iteration: 0,
            context: "triangular solve failed in coefficient draw".into(),
        })?;
    fixed.delta[j - 1].set_column(r, &(mean + noise));
    Ok(())
}

/// Probability that a rank with shrinkage scale `tau` belongs to the slab.
///
/// Computed in log space so extreme scales cannot produce 0/0.
pub fn spike_slab_membership_prob(tau: f64, pi: f64, h0: f64, h1: f64) -> f64 {
    let log_odds_against =
        ((1.0 - pi) / pi).ln() + (h1 / h0).ln() - tau * (1.0 / h0 - 1.0 / h1);
    1.0 / (1.0 + log_odds_against.exp())
}

/// Update the spike-and-slab state: shrinkage scales (set to the mode of
/// their generalized-inverse-Gaussian conditionals), slab memberships, and
/// the slab weight.
pub fn update_ssl_state<R: Rng>(
    fixed: &mut CpFixedEffect,
    ctx: &FitContext,
    rng: &mut R,
) -> Result<()> {
    let cfg = ctx.cfg;
    let p = ctx.ds.n_covariates() as f64;
    let n_cond = ctx.ds.n_conditions() as f64;
    let rank = fixed.rank();

    for r in 0..rank {
        let mut quad = 0.0;
        for d in &fixed.delta {
            let col = d.column(r);
            quad += (ctx.sigma_delta_inv.clone() * col).dot(&col.clone_owned());
        }
        let h = if fixed.membership[r] { cfg.h1 } else { cfg.h0 };
        fixed.tau[r] = gig_mode(2.0 / h, quad, -p * n_cond / 2.0 + 1.0)?;
    }
    for r in 0..rank {
        let pt = spike_slab_membership_prob(fixed.tau[r], fixed.slab_weight, cfg.h0, cfg.h1);
        fixed.membership[r] = rng.random::<f64>() < pt;
    }
    let in_slab = fixed.membership.iter().filter(|&&m| m).count() as f64;
    let beta = Beta::new(cfg.a_delta + in_slab, cfg.b_delta + rank as f64 - in_slab)
        .map_err(|e| Error::Domain(format!("slab weight draw: {e}")))?;
    fixed.slab_weight = beta.sample(rng);
    Ok(())
}

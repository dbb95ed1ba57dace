//! Two-block Gibbs sampler with warm-start rank adaptation.
//!
//! Each iteration samples, in order: the factor columns (interleaving the two
//! axes, rank by rank), the covariate coefficients, the spike-and-slab state,
//! the subject-level effects for every basis index, the subject-by-condition
//! effects for every basis index, and finally the variance components. During
//! burn-in the CP rank grows from one and prunes ranks whose shrinkage scale
//! falls under the configured threshold; the rank is frozen once burn-in ends.

pub mod context;
pub mod precision;
pub mod state;
pub mod updates;

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};

use crate::basis::{build_natural_cubic_basis, build_tensor_basis, TensorBasis};
use crate::config::FitConfig;
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::linalg::orthonormal_complement;
use crate::posterior::{ChainMeta, Draw, PosteriorChain};
use crate::rng::{master_rng, stream_rng, StreamTag};

pub use context::FitContext;
pub use precision::SubjectPrecision;
pub use state::{CpFixedEffect, RandomEffectState, SigmaOmega};
pub use updates::FactorAxis;

/// Receives progress callbacks from [`fit_observed`].
pub trait FitObserver {
    fn iteration(&mut self, _iter: usize, _total: usize, _rank: usize) {}
    /// Called with the partial chain every `checkpoint_interval` draws.
    fn checkpoint(&mut self, _chain: &PosteriorChain) {}
}

pub struct NoopObserver;
impl FitObserver for NoopObserver {}

/// A failed fit, carrying whatever draws were recorded before the failure so
/// callers can flush them.
#[derive(Debug)]
pub struct FitFailure {
    pub error: Error,
    pub partial: PosteriorChain,
}

/// Fit the model. See [`fit_observed`] for progress callbacks and partial
/// results on failure.
pub fn fit(ds: &FunctionalDataset, cfg: &FitConfig) -> Result<PosteriorChain> {
    fit_observed(ds, cfg, &mut NoopObserver).map_err(|f| f.error)
}

pub fn fit_observed(
    ds: &FunctionalDataset,
    cfg: &FitConfig,
    observer: &mut dyn FitObserver,
) -> std::result::Result<PosteriorChain, Box<FitFailure>> {
    let started = Instant::now();
    let mut draws: Vec<Draw> = Vec::with_capacity(cfg.n_draws);
    let mut telemetry = FbTelemetry::default();

    let fail = |error: Error,
                draws: Vec<Draw>,
                telemetry: &FbTelemetry,
                rank: usize,
                elapsed: f64| {
        let meta = chain_meta(ds, cfg, rank, elapsed, telemetry);
        let partial = PosteriorChain {
            draws,
            meta,
            alignment: None,
        };
        Box::new(FitFailure { error, partial })
    };

    match run_fit(ds, cfg, observer, &mut draws, &mut telemetry) {
        Ok(final_rank) => {
            let meta = chain_meta(
                ds,
                cfg,
                final_rank,
                started.elapsed().as_secs_f64(),
                &telemetry,
            );
            Ok(PosteriorChain {
                draws,
                meta,
                alignment: None,
            })
        }
        Err(error) => {
            let rank = draws.last().map_or(0, |d| d.fixed.rank());
            let elapsed = started.elapsed().as_secs_f64();
            Err(fail(error, draws, &telemetry, rank, elapsed))
        }
    }
}

#[derive(Default)]
struct FbTelemetry {
    attempts: u64,
    draws: u64,
}

fn chain_meta(
    ds: &FunctionalDataset,
    cfg: &FitConfig,
    final_rank: usize,
    elapsed_secs: f64,
    telemetry: &FbTelemetry,
) -> ChainMeta {
    ChainMeta {
        config: cfg.clone(),
        subject_ids: ds.subject_ids().to_vec(),
        observed: (0..ds.n_subjects())
            .map(|i| ds.observed(i).to_vec())
            .collect(),
        time_grid: ds.time_grid().to_vec(),
        freq_grid: ds.freq_grid().to_vec(),
        n_conditions: ds.n_conditions(),
        n_covariates: ds.n_covariates(),
        final_rank,
        elapsed_secs,
        fb_attempts: telemetry.attempts,
        fb_draws: telemetry.draws,
    }
}

/// Build the tensor-product basis a fit configuration implies for a dataset.
pub fn basis_for(ds: &FunctionalDataset, cfg: &FitConfig) -> Result<TensorBasis> {
    let time = build_natural_cubic_basis(ds.time_grid(), cfg.k_time)?;
    let freq = build_natural_cubic_basis(ds.freq_grid(), cfg.k_freq)?;
    build_tensor_basis(time, freq)
}

/// Initial sampler state: rank one, factors uniform on the Stiefel manifold,
/// zero coefficients and effects, variances at their prior means.
pub fn initial_fixed_effect<R: Rng>(
    cfg: &FitConfig,
    n_covariates: usize,
    n_conditions: usize,
    rng: &mut R,
) -> Result<CpFixedEffect> {
    let u = crate::distributions::sample_uniform_stiefel(cfg.k_time, 1, rng)?;
    let v = crate::distributions::sample_uniform_stiefel(cfg.k_freq, 1, rng)?;
    Ok(CpFixedEffect {
        u,
        v,
        delta: vec![DMatrix::zeros(n_covariates, 1); n_conditions],
        tau: vec![cfg.h1],
        membership: vec![true],
        slab_weight: 0.5,
    })
}

fn run_fit(
    ds: &FunctionalDataset,
    cfg: &FitConfig,
    observer: &mut dyn FitObserver,
    draws: &mut Vec<Draw>,
    telemetry: &mut FbTelemetry,
) -> Result<usize> {
    cfg.validate()?;
    let basis = basis_for(ds, cfg)?;
    let ctx = FitContext::new(ds, &basis, cfg)?;
    let mut rng = master_rng(cfg.seed);
    let mut fixed = initial_fixed_effect(cfg, ds.n_covariates(), ds.n_conditions(), &mut rng)?;
    let mut state = RandomEffectState::initial(cfg, ds.n_subjects(), ds.j_total(), ctx.k());
    let mut warm = WarmStart::default();

    let pool = if cfg.threads == 1 {
        None
    } else {
        Some(
            rayon::ThreadPoolBuilder::new()
                .num_threads(cfg.threads)
                .build()
                .map_err(|e| Error::Config(format!("thread pool: {e}")))?,
        )
    };

    let total = cfg.burn_in + cfg.n_draws;
    for t in 1..=total {
        let iteration = |e: Error| match e {
            Error::NumericalDivergence { context, .. } => {
                Error::NumericalDivergence { iteration: t, context }
            }
            other => other,
        };

        // Block 1: fixed effects, then random effects given them.
        let precisions = ctx.subject_precisions(&state);
        for r in 0..fixed.rank() {
            telemetry.attempts +=
                updates::update_factor_column(FactorAxis::Time, r, &mut fixed, &precisions, &ctx, &mut rng)
                    .map_err(iteration)?;
            telemetry.attempts +=
                updates::update_factor_column(FactorAxis::Freq, r, &mut fixed, &precisions, &ctx, &mut rng)
                    .map_err(iteration)?;
            telemetry.draws += 2;
        }
        for j in 1..=ds.n_conditions() {
            for r in 0..fixed.rank() {
                updates::update_delta(j, r, &mut fixed, &precisions, &ctx, &mut rng)
                    .map_err(iteration)?;
            }
        }
        updates::update_ssl_state(&mut fixed, &ctx, &mut rng).map_err(iteration)?;

        let alpha = ctx.fixed_effect_coefs(&fixed);
        sample_random_effects(&ctx, &mut state, &alpha, cfg.seed, t as u64, pool.as_ref());

        // Block 2: variance components.
        updates::update_variances(&mut state, &ctx, &alpha, &mut rng).map_err(iteration)?;

        // Rank adaptation during burn-in only; the rank entering the recorded
        // draws is final.
        if t < cfg.burn_in && t % cfg.warm_start_interval == 0 {
            warm_start_rank_step(&mut fixed, &mut warm, cfg, &mut rng)?;
        }

        if t > cfg.burn_in {
            draws.push(Draw {
                fixed: fixed.clone(),
                random: state.clone(),
            });
            if let Some(every) = cfg.checkpoint_interval {
                if draws.len() % every == 0 && draws.len() < cfg.n_draws {
                    let partial = PosteriorChain {
                        draws: draws.clone(),
                        meta: chain_meta(ds, cfg, fixed.rank(), 0.0, telemetry),
                        alignment: None,
                    };
                    observer.checkpoint(&partial);
                }
            }
        }

        observer.iteration(t, total, fixed.rank());
        if t % 100 == 0 || t == total {
            log::info!(
                "iteration {t}/{total}: rank {}, sphere-sampler acceptance {:.3}",
                fixed.rank(),
                telemetry.draws as f64 / telemetry.attempts.max(1) as f64
            );
        }
    }
    Ok(fixed.rank())
}

/// Sample every per-basis-index column of the random effects.
///
/// Columns are independent given the fixed effects and variances; each gets
/// its own derived random stream, so the result is identical whether columns
/// run sequentially or on a thread pool.
fn sample_random_effects(
    ctx: &FitContext,
    state: &mut RandomEffectState,
    alpha: &DMatrix<f64>,
    seed: u64,
    iteration: u64,
    pool: Option<&rayon::ThreadPool>,
) {
    if !state.has_gamma() {
        // model A: no random-effect levels to sample
        return;
    }
    let n = ctx.n_subjects();
    let jt = ctx.j_total();
    let sigma_gamma2 = state.sigma_gamma2;
    let sigma_eps2 = state.sigma_eps2;
    let sigma_omega2: Vec<f64> = (0..n).map(|i| state.sigma_omega2_for(i)).collect();
    let has_omega = state.has_omega();

    let run = |gamma_col: &mut [f64], omega_col: Option<&mut [f64]>, l: usize| {
        let params =
            updates::gamma_column_params(l, ctx, sigma_gamma2, &sigma_omega2, sigma_eps2, alpha);
        let mut rng = stream_rng(seed, StreamTag::Gamma, iteration, l as u64);
        updates::draw_gaussian_sites(&params, gamma_col, &mut rng);
        if let Some(omega_col) = omega_col {
            let params = updates::omega_column_params(
                l,
                ctx,
                &sigma_omega2,
                sigma_eps2,
                alpha,
                gamma_col,
            );
            let mut rng = stream_rng(seed, StreamTag::Omega, iteration, l as u64);
            updates::draw_gaussian_sites(&params, omega_col, &mut rng);
        }
    };

    // split the matrices into per-column slices so columns can run in parallel
    let gamma_slice: &mut [f64] = state.gamma.as_mut_slice();
    if has_omega {
        let omega_slice = state.omega.as_mut_slice();
        let work = |(l, (gcol, ocol)): (usize, (&mut [f64], &mut [f64]))| {
            run(gcol, Some(ocol), l);
        };
        match pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                gamma_slice
                    .par_chunks_mut(n)
                    .zip(omega_slice.par_chunks_mut(jt))
                    .enumerate()
                    .for_each(work);
            }),
            None => gamma_slice
                .chunks_mut(n)
                .zip(omega_slice.chunks_mut(jt))
                .enumerate()
                .for_each(work),
        }
    } else {
        let work = |(l, gcol): (usize, &mut [f64])| run(gcol, None, l);
        match pool {
            Some(pool) => pool.install(|| {
                use rayon::prelude::*;
                gamma_slice.par_chunks_mut(n).enumerate().for_each(work);
            }),
            None => gamma_slice.chunks_mut(n).enumerate().for_each(work),
        }
    }
}

/// Rank-adaptation bookkeeping: once any rank has been removed, growth stops
/// for the rest of the run.
#[derive(Debug, Default, Clone)]
pub struct WarmStart {
    pub removal_occurred: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RankAction {
    None,
    Added,
    Removed { index: usize },
}

/// One warm-start evaluation: prune the weakest rank if its shrinkage scale
/// sits at or below the threshold (disabling future growth), otherwise grow
/// by one rank while growth is still allowed and the rank cap permits.
pub fn warm_start_rank_step<R: Rng>(
    fixed: &mut CpFixedEffect,
    warm: &mut WarmStart,
    cfg: &FitConfig,
    rng: &mut R,
) -> Result<RankAction> {
    let rank = fixed.rank();
    let (weakest, &tau_min) = fixed
        .tau
        .iter()
        .enumerate()
        .min_by(|a, b| a.1.total_cmp(b.1))
        .expect("rank is at least one");

    if tau_min <= cfg.rank_threshold {
        warm.removal_occurred = true;
        if rank == 1 {
            // a removal would leave no fixed effect to sample; keep the last
            // rank but stop growing
            return Ok(RankAction::None);
        }
        fixed.u = fixed.u.clone().remove_column(weakest);
        fixed.v = fixed.v.clone().remove_column(weakest);
        for d in &mut fixed.delta {
            *d = d.clone().remove_column(weakest);
        }
        fixed.tau.remove(weakest);
        fixed.membership.remove(weakest);
        return Ok(RankAction::Removed { index: weakest });
    }

    if !warm.removal_occurred && rank < cfg.max_rank() {
        let u_new = uniform_unit_in_complement(&fixed.u, rng)?;
        let v_new = uniform_unit_in_complement(&fixed.v, rng)?;
        let kt = fixed.k_time();
        let kf = fixed.k_freq();
        let mut u = DMatrix::zeros(kt, rank + 1);
        u.view_mut((0, 0), (kt, rank)).copy_from(&fixed.u);
        u.set_column(rank, &u_new);
        let mut v = DMatrix::zeros(kf, rank + 1);
        v.view_mut((0, 0), (kf, rank)).copy_from(&fixed.v);
        v.set_column(rank, &v_new);
        fixed.u = u;
        fixed.v = v;
        for d in &mut fixed.delta {
            let p = d.nrows();
            let mut grown = DMatrix::zeros(p, rank + 1);
            grown.view_mut((0, 0), (p, rank)).copy_from(d);
            *d = grown;
        }
        fixed.tau.push(cfg.h1);
        fixed.membership.push(true);
        return Ok(RankAction::Added);
    }
    Ok(RankAction::None)
}

/// Uniform unit vector in the orthogonal complement of the given columns.
fn uniform_unit_in_complement<R: Rng>(cols: &DMatrix<f64>, rng: &mut R) -> Result<DVector<f64>> {
    let b = orthonormal_complement(cols, cols.nrows());
    let free = b.ncols();
    if free == 0 {
        return Err(Error::Spec("no orthogonal directions left".into()));
    }
    let mut z = DVector::zeros(free);
    loop {
        for i in 0..free {
            z[i] = StandardNormal.sample(rng);
        }
        let norm = z.norm();
        if norm > 1e-300 {
            z /= norm;
            break;
        }
    }
    Ok(&b * z)
}

//! Posterior chains: component alignment, reconstruction on the grid,
//! credible summaries, covariate contrasts, and WAIC.

use nalgebra::{DMatrix, DVector};

use crate::basis::{build_natural_cubic_basis, build_tensor_basis, TensorBasis};
use crate::config::FitConfig;
use crate::dataset::FunctionalDataset;
use crate::error::{Error, Result};
use crate::sampler::state::{CpFixedEffect, RandomEffectState};

/// One recorded Gibbs draw.
#[derive(Debug, Clone)]
pub struct Draw {
    pub fixed: CpFixedEffect,
    pub random: RandomEffectState,
}

/// Everything needed to interpret a chain without the original dataset object.
#[derive(Debug, Clone)]
pub struct ChainMeta {
    pub config: FitConfig,
    pub subject_ids: Vec<String>,
    /// Sorted observed conditions per subject, defining pair stacking order.
    pub observed: Vec<Vec<usize>>,
    pub time_grid: Vec<f64>,
    pub freq_grid: Vec<f64>,
    pub n_conditions: usize,
    pub n_covariates: usize,
    pub final_rank: usize,
    pub elapsed_secs: f64,
    /// Rejection-sampler telemetry accumulated over the whole run.
    pub fb_attempts: u64,
    pub fb_draws: u64,
}

/// Rank permutation and sign flips applied to one draw during alignment.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Alignment {
    pub perm: Vec<usize>,
    pub flip_time: Vec<bool>,
    pub flip_freq: Vec<bool>,
}

impl Alignment {
    fn identity(rank: usize) -> Self {
        Alignment {
            perm: (0..rank).collect(),
            flip_time: vec![false; rank],
            flip_freq: vec![false; rank],
        }
    }
}

/// Ordered post-burn-in draws with alignment metadata.
#[derive(Debug, Clone)]
pub struct PosteriorChain {
    pub draws: Vec<Draw>,
    pub meta: ChainMeta,
    /// `Some` once [`align_components`] has run; one record per draw.
    pub alignment: Option<Vec<Alignment>>,
}

impl PosteriorChain {
    pub fn new(draws: Vec<Draw>, meta: ChainMeta) -> Result<Self> {
        if let Some(first) = draws.first() {
            if draws.iter().any(|d| d.fixed.rank() != first.fixed.rank()) {
                return Err(Error::Spec(
                    "all recorded draws must share one rank".into(),
                ));
            }
        }
        Ok(PosteriorChain {
            draws,
            meta,
            alignment: None,
        })
    }

    pub fn len(&self) -> usize {
        self.draws.len()
    }

    pub fn is_empty(&self) -> bool {
        self.draws.is_empty()
    }

    pub fn rank(&self) -> usize {
        self.meta.final_rank
    }

    pub fn is_aligned(&self) -> bool {
        self.alignment.is_some()
    }

    /// Rebuild the tensor-product basis this chain was fitted with.
    pub fn basis(&self) -> Result<TensorBasis> {
        let time = build_natural_cubic_basis(&self.meta.time_grid, self.meta.config.k_time)?;
        let freq = build_natural_cubic_basis(&self.meta.freq_grid, self.meta.config.k_freq)?;
        build_tensor_basis(time, freq)
    }

    /// Pair list in stacking order, reconstructed from the observed sets.
    pub fn pairs(&self) -> Vec<(usize, usize)> {
        self.meta
            .observed
            .iter()
            .enumerate()
            .flat_map(|(i, set)| set.iter().map(move |&j| (i, j)))
            .collect()
    }
}

/// Align ranks and signs across draws against a running mean.
///
/// Components are matched greedily by the overlap of their rank-one patterns
/// `|<u_r (x) v_r, mean>|`; after permutation, time and frequency columns are
/// sign-flipped toward the running mean with the covariate coefficients
/// flipped alongside, which leaves every reconstruction unchanged.
pub fn align_components(mut chain: PosteriorChain) -> PosteriorChain {
    let rank = chain.rank();
    if chain.draws.is_empty() || rank == 0 {
        chain.alignment = Some(vec![]);
        return chain;
    }
    let mut records = Vec::with_capacity(chain.len());
    let kt = chain.draws[0].fixed.k_time();
    let kf = chain.draws[0].fixed.k_freq();
    let mut sum_u = DMatrix::<f64>::zeros(kt, rank);
    let mut sum_v = DMatrix::<f64>::zeros(kf, rank);

    for (s, draw) in chain.draws.iter_mut().enumerate() {
        let fixed = &mut draw.fixed;
        let record = if s == 0 {
            Alignment::identity(rank)
        } else {
            // overlap of rank-one patterns factorizes over the two axes
            let mut scores = DMatrix::zeros(rank, rank);
            for r in 0..rank {
                for m in 0..rank {
                    let du = fixed.u.column(r).dot(&sum_u.column(m));
                    let dv = fixed.v.column(r).dot(&sum_v.column(m));
                    scores[(r, m)] = (du * dv).abs();
                }
            }
            let mut perm = vec![usize::MAX; rank];
            let mut used_r = vec![false; rank];
            let mut used_m = vec![false; rank];
            for _ in 0..rank {
                let mut best = (0, 0, f64::NEG_INFINITY);
                for r in 0..rank {
                    if used_r[r] {
                        continue;
                    }
                    for m in 0..rank {
                        if used_m[m] {
                            continue;
                        }
                        if scores[(r, m)] > best.2 {
                            best = (r, m, scores[(r, m)]);
                        }
                    }
                }
                perm[best.1] = best.0;
                used_r[best.0] = true;
                used_m[best.1] = true;
            }
            apply_permutation(fixed, &perm);
            let mut flip_time = vec![false; rank];
            let mut flip_freq = vec![false; rank];
            for r in 0..rank {
                if fixed.u.column(r).dot(&sum_u.column(r)) < 0.0 {
                    flip_time[r] = true;
                    flip_column_with_delta(fixed, r, true);
                }
                if fixed.v.column(r).dot(&sum_v.column(r)) < 0.0 {
                    flip_freq[r] = true;
                    flip_column_with_delta(fixed, r, false);
                }
            }
            Alignment {
                perm,
                flip_time,
                flip_freq,
            }
        };
        sum_u += &fixed.u;
        sum_v += &fixed.v;
        records.push(record);
    }
    chain.alignment = Some(records);
    chain
}

fn apply_permutation(fixed: &mut CpFixedEffect, perm: &[usize]) {
    let rank = perm.len();
    let select = |m: &DMatrix<f64>| {
        DMatrix::from_fn(m.nrows(), rank, |i, new_r| m[(i, perm[new_r])])
    };
    fixed.u = select(&fixed.u);
    fixed.v = select(&fixed.v);
    for d in &mut fixed.delta {
        *d = select(d);
    }
    fixed.tau = perm.iter().map(|&r| fixed.tau[r]).collect();
    fixed.membership = perm.iter().map(|&r| fixed.membership[r]).collect();
}

fn flip_column_with_delta(fixed: &mut CpFixedEffect, r: usize, time_axis: bool) {
    let m = if time_axis { &mut fixed.u } else { &mut fixed.v };
    for i in 0..m.nrows() {
        m[(i, r)] = -m[(i, r)];
    }
    for d in &mut fixed.delta {
        for i in 0..d.nrows() {
            d[(i, r)] = -d[(i, r)];
        }
    }
}

/// Fixed-effect surface for condition `j` (1-based) at covariates `x`,
/// evaluated on the grid as a `T x F` matrix.
pub fn reconstruct_fixed_effect(
    draw: &Draw,
    basis: &TensorBasis,
    x: &DVector<f64>,
    j: usize,
) -> Result<DMatrix<f64>> {
    if x.len() != draw.fixed.n_covariates() {
        return Err(Error::Shape(format!(
            "covariate vector has length {}, expected {}",
            x.len(),
            draw.fixed.n_covariates()
        )));
    }
    let fixed = &draw.fixed;
    let mut coef = DMatrix::zeros(fixed.k_time(), fixed.k_freq());
    for r in 0..fixed.rank() {
        let lam = fixed.weight(j, r, x);
        if lam != 0.0 {
            coef += lam * fixed.u.column(r) * fixed.v.column(r).transpose();
        }
    }
    Ok(surface_from_coef_matrix(basis, &coef))
}

/// Evaluate a `K_T x K_F` coefficient matrix on the grid.
pub fn surface_from_coef_matrix(basis: &TensorBasis, coef: &DMatrix<f64>) -> DMatrix<f64> {
    basis.rotated_time_eval() * coef * basis.rotated_freq_eval().transpose()
}

/// Reshape a stacked coefficient vector (time index fastest) to `K_T x K_F`.
pub fn coef_to_matrix(coef: &DVector<f64>, k_time: usize, k_freq: usize) -> DMatrix<f64> {
    DMatrix::from_fn(k_time, k_freq, |kt, kf| coef[kf * k_time + kt])
}

/// Marginal principal functions of one draw: rows are ranks, evaluated on the
/// construction grids (`R x T` and `R x F`).
pub fn principal_functions(draw: &Draw, basis: &TensorBasis) -> (DMatrix<f64>, DMatrix<f64>) {
    let time = basis.rotated_time_eval() * &draw.fixed.u;
    let freq = basis.rotated_freq_eval() * &draw.fixed.v;
    (time.transpose(), freq.transpose())
}

/// Per-draw contrast surfaces for flipping covariate `k` (1-based) from 0 to 1
/// under condition `j`.
///
/// The weights are linear in the covariates, so the conditioning values of the
/// remaining coordinates cancel; this is verified at two conditioning points.
pub fn contrast(
    chain: &PosteriorChain,
    basis: &TensorBasis,
    j: usize,
    k: usize,
) -> Result<Vec<DMatrix<f64>>> {
    let p = chain.meta.n_covariates;
    if k == 0 || k > p {
        return Err(Error::Index(format!("covariate index {k} outside 1..={p}")));
    }
    let mut out = Vec::with_capacity(chain.len());
    for draw in &chain.draws {
        let at = |base: f64, xk: f64| {
            let mut x = DVector::from_element(p, base);
            x[k - 1] = xk;
            x
        };
        let diff = reconstruct_fixed_effect(draw, basis, &at(0.0, 1.0), j)?
            - reconstruct_fixed_effect(draw, basis, &at(0.0, 0.0), j)?;
        let check = reconstruct_fixed_effect(draw, basis, &at(1.0, 1.0), j)?
            - reconstruct_fixed_effect(draw, basis, &at(1.0, 0.0), j)?;
        if (&diff - &check).amax() > 1e-10 * diff.amax().max(1.0) {
            return Err(Error::Spec(
                "contrast depends on conditioning covariates".into(),
            ));
        }
        out.push(diff);
    }
    Ok(out)
}

/// Pointwise mean and equal-tailed credible band over a set of surfaces.
pub struct Bands {
    pub mean: DMatrix<f64>,
    pub lower: DMatrix<f64>,
    pub upper: DMatrix<f64>,
}

pub fn pointwise_bands(mats: &[DMatrix<f64>], lower_p: f64, upper_p: f64) -> Result<Bands> {
    let first = mats
        .first()
        .ok_or_else(|| Error::InsufficientDraws(0))?;
    let (nr, nc) = (first.nrows(), first.ncols());
    let mut mean = DMatrix::zeros(nr, nc);
    let mut lower = DMatrix::zeros(nr, nc);
    let mut upper = DMatrix::zeros(nr, nc);
    let mut buf = vec![0.0; mats.len()];
    for r in 0..nr {
        for c in 0..nc {
            for (s, m) in mats.iter().enumerate() {
                buf[s] = m[(r, c)];
            }
            mean[(r, c)] = buf.iter().sum::<f64>() / buf.len() as f64;
            buf.sort_by(|a, b| a.total_cmp(b));
            lower[(r, c)] = quantile_sorted(&buf, lower_p);
            upper[(r, c)] = quantile_sorted(&buf, upper_p);
        }
    }
    Ok(Bands { mean, lower, upper })
}

/// Linear-interpolation quantile of an already sorted slice.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let n = sorted.len();
    if n == 1 {
        return sorted[0];
    }
    let pos = p.clamp(0.0, 1.0) * (n - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] * (1.0 - frac) + sorted[hi] * frac
}

/// Watanabe-Akaike information criterion of the fitted model on its data.
///
/// The per-subject likelihood conditions on the sampled effects and noise
/// variance of each draw; the mean term uses log-sum-exp and the penalty is
/// the sample variance of the per-subject log likelihoods.
pub fn waic(
    chain: &PosteriorChain,
    ds: &FunctionalDataset,
    basis: &TensorBasis,
) -> Result<f64> {
    let s = chain.len();
    if s < 2 {
        return Err(Error::InsufficientDraws(s));
    }
    let gram = basis.gram_diag();
    let k = basis.k();
    let grid_len = ds.grid_len() as f64;

    // projection constants per pair
    let mut ytilde = Vec::with_capacity(ds.j_total());
    let mut ssr_perp = Vec::with_capacity(ds.j_total());
    for &(i, j) in ds.pairs() {
        let y = ds.response(i, j).expect("observed pair");
        let coef = basis.project(y)?;
        ssr_perp.push((y - basis.reconstruct(&coef)).norm_squared());
        ytilde.push(coef);
    }

    let ln_2pi = (2.0 * std::f64::consts::PI).ln();
    let mut total = 0.0;
    let mut logp = vec![0.0f64; s];
    for i in 0..ds.n_subjects() {
        let x = ds.covariate_row(i);
        for (si, draw) in chain.draws.iter().enumerate() {
            let sigma2 = draw.random.sigma_eps2;
            let mut lp = 0.0;
            for &j in ds.observed(i) {
                let row = ds.pair_index(i, j).expect("observed pair");
                let mut beta = draw.fixed.coefficients(j, &x);
                if draw.random.has_gamma() {
                    for l in 0..k {
                        beta[l] += draw.random.gamma[(i, l)];
                    }
                }
                if draw.random.has_omega() {
                    for l in 0..k {
                        beta[l] += draw.random.omega[(row, l)];
                    }
                }
                let mut rss = ssr_perp[row];
                for l in 0..k {
                    let gap = ytilde[row][l] - beta[l];
                    rss += gram[l] * gap * gap;
                }
                lp += -0.5 * grid_len * (ln_2pi + sigma2.ln()) - 0.5 * rss / sigma2;
            }
            logp[si] = lp;
        }
        let max = logp.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + logp.iter().map(|l| (l - max).exp()).sum::<f64>().ln();
        let mean_term = lse - (s as f64).ln();
        let mean_lp = logp.iter().sum::<f64>() / s as f64;
        let var = logp.iter().map(|l| (l - mean_lp).powi(2)).sum::<f64>() / (s as f64 - 1.0);
        total += mean_term - var;
    }
    Ok(-2.0 * total)
}

/// Posterior-mean fixed-effect surfaces for every `(subject, condition)` pair
/// (all conditions, observed or not), indexed `[i][j - 1]`.
pub fn posterior_mean_fixed_surfaces(
    chain: &PosteriorChain,
    basis: &TensorBasis,
    covariates: &DMatrix<f64>,
) -> Result<Vec<Vec<DMatrix<f64>>>> {
    if chain.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    let n = covariates.nrows();
    let n_cond = chain.meta.n_conditions;
    let s = chain.len() as f64;
    let (kt, kf) = (
        chain.meta.config.k_time,
        chain.meta.config.k_freq,
    );
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let x = covariates.row(i).transpose();
        let mut per_condition = Vec::with_capacity(n_cond);
        for j in 1..=n_cond {
            let mut coef = DMatrix::zeros(kt, kf);
            for draw in &chain.draws {
                for r in 0..draw.fixed.rank() {
                    let lam = draw.fixed.weight(j, r, &x);
                    if lam != 0.0 {
                        coef += lam * draw.fixed.u.column(r) * draw.fixed.v.column(r).transpose();
                    }
                }
            }
            coef /= s;
            per_condition.push(surface_from_coef_matrix(basis, &coef));
        }
        out.push(per_condition);
    }
    Ok(out)
}

/// Posterior-mean subject-level surfaces, one `T x F` matrix per subject.
pub fn posterior_mean_subject_surfaces(
    chain: &PosteriorChain,
    basis: &TensorBasis,
) -> Result<Vec<DMatrix<f64>>> {
    if chain.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    if !chain.draws[0].random.has_gamma() {
        return Err(Error::Spec(
            "the fitted model has no subject-level effects".into(),
        ));
    }
    let n = chain.meta.subject_ids.len();
    let k = basis.k();
    let s = chain.len() as f64;
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let mut coef = DVector::zeros(k);
        for draw in &chain.draws {
            for l in 0..k {
                coef[l] += draw.random.gamma[(i, l)];
            }
        }
        coef /= s;
        let m = coef_to_matrix(&coef, basis.k_time(), basis.k_freq());
        out.push(surface_from_coef_matrix(basis, &m));
    }
    Ok(out)
}

/// Posterior-mean subject-by-condition surfaces, one per observed pair in
/// stacking order.
pub fn posterior_mean_pair_surfaces(
    chain: &PosteriorChain,
    basis: &TensorBasis,
) -> Result<Vec<DMatrix<f64>>> {
    if chain.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    if !chain.draws[0].random.has_omega() {
        return Err(Error::Spec(
            "the fitted model has no subject-by-condition effects".into(),
        ));
    }
    let jt = chain.draws[0].random.omega.nrows();
    let k = basis.k();
    let s = chain.len() as f64;
    let mut out = Vec::with_capacity(jt);
    for row in 0..jt {
        let mut coef = DVector::zeros(k);
        for draw in &chain.draws {
            for l in 0..k {
                coef[l] += draw.random.omega[(row, l)];
            }
        }
        coef /= s;
        let m = coef_to_matrix(&coef, basis.k_time(), basis.k_freq());
        out.push(surface_from_coef_matrix(basis, &m));
    }
    Ok(out)
}

/// One row of the weight-interval table.
#[derive(Debug, Clone)]
pub struct WeightRow {
    pub condition: usize,
    pub profile: String,
    pub rank: usize,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Equal-tailed 95% intervals of the component weights for each condition and
/// covariate profile. Requires an aligned chain.
pub fn weight_summary(
    chain: &PosteriorChain,
    profiles: &[(String, DVector<f64>)],
) -> Result<Vec<WeightRow>> {
    if !chain.is_aligned() {
        return Err(Error::Spec("align the chain before summarizing weights".into()));
    }
    if chain.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    let rank = chain.rank();
    let mut rows = Vec::new();
    let mut buf = vec![0.0; chain.len()];
    for j in 1..=chain.meta.n_conditions {
        for (label, x) in profiles {
            for r in 0..rank {
                for (s, draw) in chain.draws.iter().enumerate() {
                    buf[s] = draw.fixed.weight(j, r, x);
                }
                let mean = buf.iter().sum::<f64>() / buf.len() as f64;
                buf.sort_by(|a, b| a.total_cmp(b));
                rows.push(WeightRow {
                    condition: j,
                    profile: label.clone(),
                    rank: r + 1,
                    mean,
                    lower: quantile_sorted(&buf, 0.025),
                    upper: quantile_sorted(&buf, 0.975),
                });
            }
        }
    }
    Ok(rows)
}

/// Summary row of a marginal principal function at one grid point.
#[derive(Debug, Clone)]
pub struct PrincipalRow {
    pub rank: usize,
    pub coord: f64,
    pub mean: f64,
    pub lower: f64,
    pub upper: f64,
}

/// Pointwise posterior summaries of the marginal principal functions.
/// Requires an aligned chain. Returns (time table, frequency table).
pub fn principal_function_summary(
    chain: &PosteriorChain,
    basis: &TensorBasis,
) -> Result<(Vec<PrincipalRow>, Vec<PrincipalRow>)> {
    if !chain.is_aligned() {
        return Err(Error::Spec(
            "align the chain before summarizing principal functions".into(),
        ));
    }
    if chain.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    let evaluated: Vec<(DMatrix<f64>, DMatrix<f64>)> = chain
        .draws
        .iter()
        .map(|d| principal_functions(d, basis))
        .collect();
    let summarize = |axis_time: bool, grid: &[f64]| -> Vec<PrincipalRow> {
        let rank = chain.rank();
        let mut rows = Vec::with_capacity(rank * grid.len());
        let mut buf = vec![0.0; evaluated.len()];
        for r in 0..rank {
            for (gi, &coord) in grid.iter().enumerate() {
                for (s, (t, f)) in evaluated.iter().enumerate() {
                    buf[s] = if axis_time { t[(r, gi)] } else { f[(r, gi)] };
                }
                let mean = buf.iter().sum::<f64>() / buf.len() as f64;
                buf.sort_by(|a, b| a.total_cmp(b));
                rows.push(PrincipalRow {
                    rank: r + 1,
                    coord,
                    mean,
                    lower: quantile_sorted(&buf, 0.025),
                    upper: quantile_sorted(&buf, 0.975),
                });
            }
        }
        rows
    };
    Ok((
        summarize(true, basis.time().grid()),
        summarize(false, basis.freq().grid()),
    ))
}

/// Posterior-mean rank-one base patterns on the grid. Requires alignment.
pub fn base_pattern_means(
    chain: &PosteriorChain,
    basis: &TensorBasis,
) -> Result<Vec<DMatrix<f64>>> {
    if !chain.is_aligned() {
        return Err(Error::Spec(
            "align the chain before summarizing base patterns".into(),
        ));
    }
    if chain.is_empty() {
        return Err(Error::InsufficientDraws(0));
    }
    let rank = chain.rank();
    let s = chain.len() as f64;
    let mut out = Vec::with_capacity(rank);
    for r in 0..rank {
        let mut acc = DMatrix::zeros(basis.t_len(), basis.f_len());
        for draw in &chain.draws {
            let coef = draw.fixed.u.column(r) * draw.fixed.v.column(r).transpose();
            acc += surface_from_coef_matrix(basis, &coef);
        }
        out.push(acc / s);
    }
    Ok(out)
}

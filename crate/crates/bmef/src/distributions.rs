//! Specialized samplers and density utilities used by the Gibbs sampler.
//!
//! The Fisher-Bingham sampler draws from densities proportional to
//! `exp(mu0' theta - theta' S0 theta / 2)` on the unit sphere by rejection
//! from an angular-central-Gaussian envelope. The linear term is folded into
//! the quadratic through `c x <= c/2 + c x^2 / 2`, the quadratic is shifted so
//! its smallest eigenvalue is zero (the density on the sphere is invariant to
//! that shift), and the envelope concentration solves
//! `sum_i 1 / (b + 2 lambda_i) = 1`.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};

use crate::error::{Error, Result};

/// Hard cap on rejection attempts per draw; hitting it means the acceptance
/// rate fell below 1e-6 and the parameters are reported in the error.
pub const FISHER_BINGHAM_ATTEMPT_BUDGET: u64 = 1_000_000;

/// Parameters of a Fisher-Bingham distribution on the unit sphere.
#[derive(Debug, Clone)]
pub struct FisherBinghamParams {
    linear: DVector<f64>,
    quadratic: DMatrix<f64>,
}

impl FisherBinghamParams {
    /// `linear` is the direction term, `quadratic` the symmetric matrix of the
    /// quadratic penalty (larger eigenvalues concentrate mass away from the
    /// corresponding eigenvectors).
    pub fn new(linear: DVector<f64>, quadratic: DMatrix<f64>) -> Result<Self> {
        let d = linear.len();
        if d < 2 {
            return Err(Error::Domain(format!(
                "Fisher-Bingham needs dimension >= 2, got {d}"
            )));
        }
        if quadratic.nrows() != d || quadratic.ncols() != d {
            return Err(Error::Shape(format!(
                "quadratic is {}x{}, expected {d}x{d}",
                quadratic.nrows(),
                quadratic.ncols()
            )));
        }
        let scale = quadratic.amax().max(1.0);
        let asym = (&quadratic - quadratic.transpose()).amax();
        if asym > 1e-10 * scale {
            return Err(Error::Domain(format!(
                "quadratic matrix is asymmetric (max |S - S'| = {asym:.3e})"
            )));
        }
        Ok(Self { linear, quadratic })
    }

    pub fn dim(&self) -> usize {
        self.linear.len()
    }

    pub fn linear(&self) -> &DVector<f64> {
        &self.linear
    }

    pub fn quadratic(&self) -> &DMatrix<f64> {
        &self.quadratic
    }
}

/// Draw a unit vector from the Fisher-Bingham distribution.
pub fn sample_fisher_bingham<R: Rng>(
    params: &FisherBinghamParams,
    rng: &mut R,
) -> Result<DVector<f64>> {
    sample_fisher_bingham_stats(params, rng).map(|(theta, _)| theta)
}

/// As [`sample_fisher_bingham`], also returning the number of rejection
/// attempts (acceptance-rate telemetry for the sampler loop).
pub fn sample_fisher_bingham_stats<R: Rng>(
    params: &FisherBinghamParams,
    rng: &mut R,
) -> Result<(DVector<f64>, u64)> {
    let d = params.dim();
    let df = d as f64;
    let kappa = params.linear.norm();
    let mu = if kappa > 0.0 {
        &params.linear / kappa
    } else {
        DVector::zeros(d)
    };

    // A = (S0 - kappa mu mu')/2, shifted to be positive semidefinite.
    let mut a = params.quadratic.clone() * 0.5;
    if kappa > 0.0 {
        for r in 0..d {
            for c in 0..d {
                a[(r, c)] -= 0.5 * kappa * mu[r] * mu[c];
            }
        }
    }
    let eig = nalgebra::SymmetricEigen::new(a);
    let lam_min = eig.eigenvalues.min();
    let lam_hat: DVector<f64> = eig.eigenvalues.map(|l| l - lam_min);
    let vectors = eig.eigenvectors;

    let b = solve_envelope_concentration(&lam_hat, df);
    let t_star = (df - b) / 2.0;
    let sigma: Vec<f64> = lam_hat
        .iter()
        .map(|&l| 1.0 / (1.0 + 2.0 * l / b).sqrt())
        .collect();

    let mut z = DVector::zeros(d);
    for attempt in 1..=FISHER_BINGHAM_ATTEMPT_BUDGET {
        for i in 0..d {
            let g: f64 = StandardNormal.sample(rng);
            z[i] = sigma[i] * g;
        }
        let norm = z.norm();
        if norm < 1e-300 {
            continue;
        }
        let w = &z / norm; // coordinates of theta in the eigenbasis
        let t: f64 = (0..d).map(|i| lam_hat[i] * w[i] * w[i]).sum();
        let theta = &vectors * &w;
        let zeta = if kappa > 0.0 {
            let c = mu.dot(&theta);
            -0.5 * kappa * (1.0 - c) * (1.0 - c)
        } else {
            0.0
        };
        let log_acc = zeta - t + t_star + 0.5 * df * ((1.0 + 2.0 * t / b) * b / df).ln();
        let u: f64 = rng.random();
        if u.ln() < log_acc {
            return Ok((theta, attempt));
        }
    }
    Err(Error::SamplerDegenerate {
        attempts: FISHER_BINGHAM_ATTEMPT_BUDGET,
        dim: d,
        linear_norm: kappa,
        quad_spread: lam_hat.max(),
    })
}

/// Solve `sum_i 1/(b + 2 lambda_i) = 1` for `b` in `(0, d]`.
///
/// The left side is strictly decreasing in `b` and at least one `lambda_i` is
/// zero, so a root exists; `b = d` when all eigenvalues vanish.
fn solve_envelope_concentration(lam_hat: &DVector<f64>, df: f64) -> f64 {
    let f = |b: f64| -> f64 { lam_hat.iter().map(|&l| 1.0 / (b + 2.0 * l)).sum() };
    if f(df) >= 1.0 - 1e-12 {
        return df;
    }
    let mut lo = 1e-12;
    let mut hi = df;
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if f(mid) > 1.0 {
            lo = mid;
        } else {
            hi = mid;
        }
        if (hi - lo) < 1e-14 * df {
            break;
        }
    }
    0.5 * (lo + hi)
}

/// Mode of the generalized-inverse-Gaussian density
/// `x^(c-1) exp(-(a x + b / x)/2)`, floored at `1e-12`.
///
/// The Gibbs sampler uses the mode as a point approximation of the GIG draw;
/// no exact GIG sampler is provided.
pub fn gig_mode(a: f64, b: f64, c: f64) -> Result<f64> {
    if a <= 0.0 {
        return Err(Error::Domain(format!("gig_mode needs a > 0, got {a}")));
    }
    if b < 0.0 {
        return Err(Error::Domain(format!("gig_mode needs b >= 0, got {b}")));
    }
    let cm = c - 1.0;
    Ok(((cm + (cm * cm + a * b).sqrt()) / a).max(1e-12))
}

/// Draw from an inverse gamma with the given shape and scale
/// (density proportional to `x^(-shape-1) exp(-scale/x)`).
pub fn sample_inverse_gamma<R: Rng>(shape: f64, scale: f64, rng: &mut R) -> Result<f64> {
    if shape <= 0.0 || scale <= 0.0 {
        return Err(Error::Domain(format!(
            "inverse gamma needs positive parameters, got shape {shape}, scale {scale}"
        )));
    }
    let gamma = Gamma::new(shape, 1.0 / scale)
        .map_err(|e| Error::Domain(format!("gamma sampler: {e}")))?;
    for _ in 0..64 {
        let g = gamma.sample(rng);
        if g > 0.0 && g.is_finite() {
            return Ok(1.0 / g);
        }
    }
    Err(Error::Domain(
        "gamma sampler kept returning non-positive values".into(),
    ))
}

/// Draw a matrix with orthonormal columns, uniform over the Stiefel manifold.
pub fn sample_uniform_stiefel<R: Rng>(
    rows: usize,
    cols: usize,
    rng: &mut R,
) -> Result<DMatrix<f64>> {
    if cols > rows {
        return Err(Error::Shape(format!(
            "Stiefel manifold needs cols <= rows, got {rows}x{cols}"
        )));
    }
    let gauss: DMatrix<f64> = DMatrix::from_fn(rows, cols, |_, _| StandardNormal.sample(rng));
    let qr = gauss.qr();
    let mut q = qr.q();
    let r = qr.r();
    // sign-correct with R's diagonal so the distribution is exactly Haar
    for j in 0..cols {
        if r[(j, j)] < 0.0 {
            for i in 0..rows {
                q[(i, j)] = -q[(i, j)];
            }
        }
    }
    Ok(q)
}

/// Density of the half-Laplace distribution with scale `h` on `[0, inf)`.
pub fn half_laplace_pdf(tau: f64, h: f64) -> f64 {
    if tau < 0.0 {
        0.0
    } else {
        (-tau / h).exp() / h
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::{stream_rng, StreamTag};
    use approx::assert_abs_diff_eq;

    fn rng(seed: u64) -> rand_chacha::ChaCha8Rng {
        stream_rng(seed, StreamTag::Main, 0, 0)
    }

    #[test]
    fn fb_zero_parameters_is_uniform() {
        let p = FisherBinghamParams::new(DVector::zeros(3), DMatrix::zeros(3, 3)).unwrap();
        let mut r = rng(10);
        let n = 10_000;
        let mut mean = DVector::zeros(3);
        for _ in 0..n {
            let (theta, attempts) = sample_fisher_bingham_stats(&p, &mut r).unwrap();
            assert_eq!(attempts, 1); // envelope is exact for the uniform case
            assert_abs_diff_eq!(theta.norm(), 1.0, epsilon = 1e-12);
            mean += theta;
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.05, "mean norm {}", mean.norm());
    }

    #[test]
    fn fb_strong_linear_term_concentrates() {
        let mut linear = DVector::zeros(3);
        linear[0] = 100.0;
        let p = FisherBinghamParams::new(linear, DMatrix::zeros(3, 3)).unwrap();
        let mut r = rng(11);
        let mut mean = DVector::zeros(3);
        for _ in 0..2000 {
            mean += sample_fisher_bingham(&p, &mut r).unwrap();
        }
        mean /= 2000.0;
        let angle = (mean[0] / mean.norm()).acos();
        assert!(angle < 0.1, "angle {angle}");
    }

    #[test]
    fn fb_first_moment_matches_spherical_quadrature() {
        let linear = DVector::from_column_slice(&[1.0, 0.0, 0.0]);
        let quadratic = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 2.0, 4.0]));
        let p = FisherBinghamParams::new(linear.clone(), quadratic.clone()).unwrap();

        // quadrature oracle on the sphere: theta(alpha, beta), dOmega = sin(alpha)
        let na = 400;
        let nb = 400;
        let mut mass = 0.0;
        let mut moment = [0.0f64; 3];
        for ia in 0..na {
            let alpha = (ia as f64 + 0.5) * std::f64::consts::PI / na as f64;
            for ib in 0..nb {
                let beta = (ib as f64 + 0.5) * 2.0 * std::f64::consts::PI / nb as f64;
                let th = [
                    alpha.sin() * beta.cos(),
                    alpha.sin() * beta.sin(),
                    alpha.cos(),
                ];
                let quad = 2.0 * th[1] * th[1] + 4.0 * th[2] * th[2];
                let w = (th[0] - 0.5 * quad).exp() * alpha.sin();
                mass += w;
                for k in 0..3 {
                    moment[k] += w * th[k];
                }
            }
        }
        for m in &mut moment {
            *m /= mass;
        }

        let n = 20_000;
        let mut r = rng(12);
        let mut sum = [0.0f64; 3];
        let mut sum_sq = [0.0f64; 3];
        for _ in 0..n {
            let theta = sample_fisher_bingham(&p, &mut r).unwrap();
            for k in 0..3 {
                sum[k] += theta[k];
                sum_sq[k] += theta[k] * theta[k];
            }
        }
        for k in 0..3 {
            let mean = sum[k] / n as f64;
            let var = sum_sq[k] / n as f64 - mean * mean;
            let se = (var / n as f64).sqrt();
            assert!(
                (mean - moment[k]).abs() < 3.0 * se,
                "coord {k}: empirical {mean} vs quadrature {} (se {se})",
                moment[k]
            );
        }
    }

    #[test]
    fn fb_tilt_identity_leaves_distribution_unchanged() {
        // adding a multiple of I to the quadratic is a constant on the sphere
        let linear = DVector::from_column_slice(&[0.5, -0.3, 0.8]);
        let quad = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.5, 1.0, 3.0]));
        let tilted = &quad + DMatrix::identity(3, 3) * 5.0;
        let pa = FisherBinghamParams::new(linear.clone(), quad).unwrap();
        let pb = FisherBinghamParams::new(linear, tilted).unwrap();
        let n = 10_000;
        let mut ra = rng(13);
        let mut rb = rng(14);
        let mut xs: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 3];
        let mut ys: Vec<Vec<f64>> = vec![Vec::with_capacity(n); 3];
        for _ in 0..n {
            let a = sample_fisher_bingham(&pa, &mut ra).unwrap();
            let b = sample_fisher_bingham(&pb, &mut rb).unwrap();
            for k in 0..3 {
                xs[k].push(a[k]);
                ys[k].push(b[k]);
            }
        }
        for k in 0..3 {
            let d = ks_distance(&mut xs[k], &mut ys[k]);
            assert!(d < 0.03, "coordinate {k} KS distance {d}");
        }
    }

    fn ks_distance(a: &mut [f64], b: &mut [f64]) -> f64 {
        a.sort_by(|x, y| x.total_cmp(y));
        b.sort_by(|x, y| x.total_cmp(y));
        let (mut ia, mut ib, mut d) = (0usize, 0usize, 0.0f64);
        while ia < a.len() && ib < b.len() {
            if a[ia] <= b[ib] {
                ia += 1;
            } else {
                ib += 1;
            }
            let gap = (ia as f64 / a.len() as f64 - ib as f64 / b.len() as f64).abs();
            d = d.max(gap);
        }
        d
    }

    #[test]
    fn fb_same_seed_reproduces() {
        let linear = DVector::from_column_slice(&[1.0, 2.0]);
        let quad = DMatrix::from_diagonal(&DVector::from_column_slice(&[0.0, 3.0]));
        let p = FisherBinghamParams::new(linear, quad).unwrap();
        let a = sample_fisher_bingham(&p, &mut rng(42)).unwrap();
        let b = sample_fisher_bingham(&p, &mut rng(42)).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn fb_rejects_bad_parameters() {
        assert!(FisherBinghamParams::new(DVector::zeros(1), DMatrix::zeros(1, 1)).is_err());
        let mut asym = DMatrix::zeros(2, 2);
        asym[(0, 1)] = 1.0;
        assert!(FisherBinghamParams::new(DVector::zeros(2), asym).is_err());
    }

    #[test]
    fn gig_mode_formula_values() {
        assert_abs_diff_eq!(gig_mode(2.0, 0.0, 2.0).unwrap(), 1.0, epsilon = 1e-15);
        assert_abs_diff_eq!(
            gig_mode(2.0, 4.0, 1.0).unwrap(),
            std::f64::consts::SQRT_2,
            epsilon = 1e-12
        );
        assert!(gig_mode(-1.0, 0.0, 0.0).is_err());
        assert!(gig_mode(1.0, -0.1, 0.0).is_err());
    }

    #[test]
    fn gig_mode_maximizes_density() {
        // density-evaluation oracle
        let (a, b, c) = (1.0, 3.0, -0.5);
        let log_density = |x: f64| (c - 1.0) * x.ln() - 0.5 * (a * x + b / x);
        let m = gig_mode(a, b, c).unwrap();
        assert!(log_density(m) >= log_density(m * (1.0 + 1e-3)));
        assert!(log_density(m) >= log_density(m * (1.0 - 1e-3)));
    }

    #[test]
    fn inverse_gamma_mean_and_variance() {
        let mut r = rng(20);
        let n = 100_000;
        let draws: Vec<f64> = (0..n)
            .map(|_| sample_inverse_gamma(3.0, 0.5, &mut r).unwrap())
            .collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let var: f64 = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let se = (var / n as f64).sqrt();
        assert!((mean - 0.25).abs() < 3.0 * se, "mean {mean} se {se}");

        let draws: Vec<f64> = (0..n)
            .map(|_| sample_inverse_gamma(7.0, 2.0, &mut r).unwrap())
            .collect();
        let mean: f64 = draws.iter().sum::<f64>() / n as f64;
        let emp_var: f64 = draws.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / n as f64;
        let target = 4.0 / 180.0;
        // standard error of the sample variance from the fourth central moment
        let m4: f64 = draws.iter().map(|x| (x - mean).powi(4)).sum::<f64>() / n as f64;
        let se_var = ((m4 - emp_var * emp_var) / n as f64).sqrt();
        assert!(
            (emp_var - target).abs() < 3.0 * se_var,
            "variance {emp_var} vs {target} (se {se_var})"
        );
    }

    #[test]
    fn inverse_gamma_quantiles_match_numeric_cdf_inversion() {
        use statrs::distribution::{ContinuousCDF, InverseGamma};
        let (shape, scale) = (4.0, 1.5);
        let reference = InverseGamma::new(shape, scale).unwrap();
        let mut r = rng(21);
        let n = 100_000;
        let mut draws: Vec<f64> = (0..n)
            .map(|_| sample_inverse_gamma(shape, scale, &mut r).unwrap())
            .collect();
        draws.sort_by(|a, b| a.total_cmp(b));
        for p in [0.1, 0.5, 0.9] {
            let empirical = draws[(p * n as f64) as usize];
            let exact = reference.inverse_cdf(p);
            assert!(
                (empirical - exact).abs() < 0.01 * exact,
                "p {p}: {empirical} vs {exact}"
            );
        }
    }

    #[test]
    fn inverse_gamma_rejects_bad_parameters() {
        let mut r = rng(22);
        assert!(sample_inverse_gamma(0.0, 1.0, &mut r).is_err());
        assert!(sample_inverse_gamma(1.0, -2.0, &mut r).is_err());
    }

    #[test]
    fn stiefel_columns_are_orthonormal() {
        let mut r = rng(30);
        let m = sample_uniform_stiefel(6, 2, &mut r).unwrap();
        assert_eq!((m.nrows(), m.ncols()), (6, 2));
        let g = m.transpose() * &m;
        assert!((g - DMatrix::identity(2, 2)).amax() < 1e-10);
    }

    #[test]
    fn square_stiefel_is_orthogonal() {
        let mut r = rng(31);
        let m = sample_uniform_stiefel(5, 5, &mut r).unwrap();
        assert_abs_diff_eq!(m.determinant().abs(), 1.0, epsilon = 1e-8);
    }

    #[test]
    fn stiefel_first_column_is_uniform_on_sphere() {
        let mut r = rng(32);
        let n = 4000;
        let mut mean = DVector::zeros(7);
        for _ in 0..n {
            let m = sample_uniform_stiefel(7, 3, &mut r).unwrap();
            let col = m.column(0).clone_owned();
            assert_abs_diff_eq!(col.norm(), 1.0, epsilon = 1e-10);
            mean += col;
        }
        mean /= n as f64;
        assert!(mean.norm() < 0.05, "mean norm {}", mean.norm());
    }

    #[test]
    fn stiefel_rejects_wide_matrices() {
        let mut r = rng(33);
        assert!(sample_uniform_stiefel(2, 3, &mut r).is_err());
    }

    #[test]
    fn half_laplace_integrates_to_one() {
        for h in [0.01, 1.0, 2.5] {
            // Simpson's rule out to 50 scales; the tail beyond is ~ 2e-22
            let upper = 50.0 * h;
            let n = 20_000;
            let step = upper / n as f64;
            let mut acc = half_laplace_pdf(0.0, h) + half_laplace_pdf(upper, h);
            for k in 1..n {
                let w = if k % 2 == 1 { 4.0 } else { 2.0 };
                acc += w * half_laplace_pdf(k as f64 * step, h);
            }
            let integral = acc * step / 3.0;
            assert_abs_diff_eq!(integral, 1.0, epsilon = 1e-8);
        }
        assert_eq!(half_laplace_pdf(-1.0, 1.0), 0.0);
    }
}

//! Synthetic-data generation and evaluation metrics for simulation studies.

use std::collections::BTreeMap;
use std::path::Path;

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::basis::{build_natural_cubic_basis, build_tensor_basis, TensorBasis};
use crate::dataset::FunctionalDataset;
use crate::distributions::sample_uniform_stiefel;
use crate::error::{Error, Result};
use crate::posterior::{self, PosteriorChain};
use crate::rng::{stream_rng, StreamTag};
use crate::sampler::state::CpFixedEffect;

/// Covariate scenario: an intercept, optionally a continuous feature on
/// `(-3, 3)`, optionally a binary feature.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Scenario {
    S1,
    S2,
    S3,
}

impl Scenario {
    pub fn n_covariates(self) -> usize {
        match self {
            Scenario::S1 => 1,
            Scenario::S2 => 2,
            Scenario::S3 => 3,
        }
    }
}

/// Subject-by-condition variance setting: shared `0.4^2` or per-subject
/// uniform on `(0.2^2, 1)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum VarianceSetting {
    H1,
    H2,
}

fn default_n_subjects() -> usize {
    50
}
fn default_n_conditions() -> usize {
    3
}
fn default_grid() -> usize {
    50
}
fn default_k() -> usize {
    6
}
fn default_sigma_gamma2() -> f64 {
    0.16
}
fn default_sigma_eps2() -> f64 {
    0.01
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SimulationConfig {
    pub scenario: Scenario,
    pub rank: usize,
    pub variance_setting: VarianceSetting,
    #[serde(default = "default_n_subjects")]
    pub n_subjects: usize,
    #[serde(default = "default_n_conditions")]
    pub n_conditions: usize,
    #[serde(default = "default_grid")]
    pub t_len: usize,
    #[serde(default = "default_grid")]
    pub f_len: usize,
    #[serde(default = "default_k")]
    pub k_time: usize,
    #[serde(default = "default_k")]
    pub k_freq: usize,
    #[serde(default = "default_sigma_gamma2")]
    pub sigma_gamma2: f64,
    #[serde(default = "default_sigma_eps2")]
    pub sigma_eps2: f64,
    /// Independent probability of dropping each (subject, condition) pair,
    /// re-drawn until every subject and every condition stays observed.
    #[serde(default)]
    pub missingness: Option<f64>,
    #[serde(default)]
    pub seed: u64,
}

impl SimulationConfig {
    pub fn from_path(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let cfg: SimulationConfig =
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: path.display().to_string(),
                message: e.to_string(),
            })?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if self.rank == 0 || self.rank > self.k_time.min(self.k_freq) {
            return Err(Error::Config(format!(
                "rank {} outside 1..={}",
                self.rank,
                self.k_time.min(self.k_freq)
            )));
        }
        if self.n_subjects == 0 || self.n_conditions == 0 {
            return Err(Error::Config("need subjects and conditions".into()));
        }
        if self.t_len < self.k_time || self.f_len < self.k_freq {
            return Err(Error::Config("grid smaller than basis dimension".into()));
        }
        if !(self.sigma_gamma2 > 0.0) || !(self.sigma_eps2 > 0.0) {
            return Err(Error::Config("variances must be positive".into()));
        }
        if let Some(m) = self.missingness {
            if !(0.0..1.0).contains(&m) {
                return Err(Error::Config(format!(
                    "missingness must be in [0, 1), got {m}"
                )));
            }
        }
        Ok(())
    }
}

/// Everything the generator drew, kept for metric computation.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    pub fixed: CpFixedEffect,
    /// Subject-level coefficients, `n x K`.
    pub gamma: DMatrix<f64>,
    /// Subject-by-condition coefficients, one row per observed pair.
    pub omega: DMatrix<f64>,
    pub sigma_gamma2: f64,
    pub sigma_omega2: Vec<f64>,
    pub sigma_eps2: f64,
    /// Noiseless fixed-effect surfaces indexed `[subject][condition - 1]`.
    pub fixed_surfaces: Vec<Vec<DMatrix<f64>>>,
    /// Realized noise per observed pair (stacking order).
    pub epsilon: Vec<DVector<f64>>,
    pub covariates: DMatrix<f64>,
    pub observed: Vec<Vec<usize>>,
    pub time_grid: Vec<f64>,
    pub freq_grid: Vec<f64>,
}

fn even_grid(len: usize) -> Vec<f64> {
    (0..len).map(|i| i as f64 / (len - 1) as f64).collect()
}

fn std_normal<R: Rng>(rng: &mut R) -> f64 {
    StandardNormal.sample(rng)
}

/// Draw one synthetic dataset and its generating parameters.
pub fn generate(cfg: &SimulationConfig) -> Result<(FunctionalDataset, GroundTruth)> {
    cfg.validate()?;
    let mut rng = stream_rng(cfg.seed, StreamTag::SimulationRun, 0, 0);
    let n = cfg.n_subjects;
    let n_cond = cfg.n_conditions;
    let p = cfg.scenario.n_covariates();

    let covariates = DMatrix::from_fn(n, p, |_, c| match c {
        0 => 1.0,
        1 => rng.random_range(-3.0..3.0),
        _ => {
            if rng.random::<f64>() < 0.5 {
                1.0
            } else {
                0.0
            }
        }
    });

    let time_grid = even_grid(cfg.t_len);
    let freq_grid = even_grid(cfg.f_len);
    let basis = build_tensor_basis(
        build_natural_cubic_basis(&time_grid, cfg.k_time)?,
        build_natural_cubic_basis(&freq_grid, cfg.k_freq)?,
    )?;

    let u = sample_uniform_stiefel(cfg.k_time, cfg.rank, &mut rng)?;
    let v = sample_uniform_stiefel(cfg.k_freq, cfg.rank, &mut rng)?;
    let delta: Vec<DMatrix<f64>> = (0..n_cond)
        .map(|_| {
            DMatrix::from_fn(p, cfg.rank, |_, _| {
                let mag = rng.random_range(0.5..1.0);
                if rng.random::<f64>() < 0.5 {
                    -mag
                } else {
                    mag
                }
            })
        })
        .collect();
    let fixed = CpFixedEffect {
        u,
        v,
        delta,
        tau: vec![1.0; cfg.rank],
        membership: vec![true; cfg.rank],
        slab_weight: 0.5,
    };

    // observed sets, re-drawn until every subject and condition is covered
    let observed: Vec<Vec<usize>> = match cfg.missingness {
        None => vec![(1..=n_cond).collect(); n],
        Some(prob) => loop {
            let candidate: Vec<Vec<usize>> = (0..n)
                .map(|_| {
                    (1..=n_cond)
                        .filter(|_| rng.random::<f64>() >= prob)
                        .collect()
                })
                .collect();
            let all_nonempty = candidate.iter().all(|s: &Vec<usize>| !s.is_empty());
            let all_covered = (1..=n_cond)
                .all(|j| candidate.iter().any(|s| s.contains(&j)));
            if all_nonempty && all_covered {
                break candidate;
            }
        },
    };
    let j_total: usize = observed.iter().map(|s| s.len()).sum();

    let k = cfg.k_time * cfg.k_freq;
    let gamma = DMatrix::from_fn(n, k, |_, _| {
        cfg.sigma_gamma2.sqrt() * std_normal(&mut rng)
    });
    let sigma_omega2: Vec<f64> = match cfg.variance_setting {
        VarianceSetting::H1 => vec![0.16; n],
        VarianceSetting::H2 => (0..n).map(|_| rng.random_range(0.04..1.0)).collect(),
    };
    let mut omega = DMatrix::zeros(j_total, k);
    {
        let mut row = 0;
        for (i, set) in observed.iter().enumerate() {
            let sd = sigma_omega2[i].sqrt();
            for _ in set {
                for l in 0..k {
                    omega[(row, l)] = sd * std_normal(&mut rng);
                }
                row += 1;
            }
        }
    }

    let mut responses = BTreeMap::new();
    let mut epsilon = Vec::with_capacity(j_total);
    let eps_sd = cfg.sigma_eps2.sqrt();
    let mut row = 0;
    for (i, set) in observed.iter().enumerate() {
        let x = covariates.row(i).transpose();
        for &j in set {
            let mut coef = fixed.coefficients(j, &x);
            for l in 0..k {
                coef[l] += gamma[(i, l)] + omega[(row, l)];
            }
            let fitted = basis.reconstruct(&coef);
            let noise = DVector::from_fn(fitted.len(), |_, _| {
                eps_sd * std_normal(&mut rng)
            });
            let y = &fitted + &noise;
            // store the noise as realized in the response so the
            // decomposition identity holds bit for bit
            epsilon.push(&y - &fitted);
            responses.insert((i, j), y);
            row += 1;
        }
    }

    let subject_ids = (1..=n).map(|i| format!("subj{i:04}")).collect();
    let ds = FunctionalDataset::new(
        subject_ids,
        time_grid.clone(),
        freq_grid.clone(),
        covariates.clone(),
        responses,
    )?;

    let fixed_surfaces = (0..n)
        .map(|i| {
            let x = covariates.row(i).transpose();
            (1..=n_cond)
                .map(|j| {
                    let mut coef = DMatrix::zeros(cfg.k_time, cfg.k_freq);
                    for r in 0..cfg.rank {
                        let lam = fixed.weight(j, r, &x);
                        coef += lam * fixed.u.column(r) * fixed.v.column(r).transpose();
                    }
                    posterior::surface_from_coef_matrix(&basis, &coef)
                })
                .collect()
        })
        .collect();

    let truth = GroundTruth {
        fixed,
        gamma,
        omega,
        sigma_gamma2: cfg.sigma_gamma2,
        sigma_omega2,
        sigma_eps2: cfg.sigma_eps2,
        fixed_surfaces,
        epsilon,
        covariates,
        observed,
        time_grid,
        freq_grid,
    };
    Ok((ds, truth))
}

impl GroundTruth {
    pub fn n_subjects(&self) -> usize {
        self.covariates.nrows()
    }

    pub fn n_conditions(&self) -> usize {
        self.fixed.n_conditions()
    }

    pub fn j_total(&self) -> usize {
        self.observed.iter().map(|s| s.len()).sum()
    }

    /// Rebuild the generating basis (deterministic from the stored grids).
    pub fn basis(&self) -> Result<TensorBasis> {
        build_tensor_basis(
            build_natural_cubic_basis(&self.time_grid, self.fixed.k_time())?,
            build_natural_cubic_basis(&self.freq_grid, self.fixed.k_freq())?,
        )
    }

    /// True subject-level surface for subject `i`.
    pub fn subject_surface(&self, basis: &TensorBasis, i: usize) -> DMatrix<f64> {
        let coef = self.gamma.row(i).transpose();
        let m = posterior::coef_to_matrix(&coef, self.fixed.k_time(), self.fixed.k_freq());
        posterior::surface_from_coef_matrix(basis, &m)
    }

    /// True subject-by-condition surface for stacked pair `row`.
    pub fn pair_surface(&self, basis: &TensorBasis, row: usize) -> DMatrix<f64> {
        let coef = self.omega.row(row).transpose();
        let m = posterior::coef_to_matrix(&coef, self.fixed.k_time(), self.fixed.k_freq());
        posterior::surface_from_coef_matrix(basis, &m)
    }

    /// True contrast surface for covariate `k` (1-based) under condition `j`.
    pub fn contrast_surface(&self, basis: &TensorBasis, j: usize, k: usize) -> DMatrix<f64> {
        let mut coef = DMatrix::zeros(self.fixed.k_time(), self.fixed.k_freq());
        for r in 0..self.fixed.rank() {
            let slope = self.fixed.delta[j - 1][(k - 1, r)];
            coef += slope * self.fixed.u.column(r) * self.fixed.v.column(r).transpose();
        }
        posterior::surface_from_coef_matrix(basis, &coef)
    }
}

/// Mean squared Frobenius error of fixed-effect surfaces over all
/// `(subject, condition)` pairs, divided by `n * J`.
pub fn mse_fixed(truth: &GroundTruth, estimates: &[Vec<DMatrix<f64>>]) -> Result<f64> {
    let n = truth.n_subjects();
    let n_cond = truth.n_conditions();
    if estimates.len() != n || estimates.iter().any(|e| e.len() != n_cond) {
        return Err(Error::Shape("estimate layout must be n x J".into()));
    }
    let mut total = 0.0;
    for i in 0..n {
        for j in 0..n_cond {
            let t = &truth.fixed_surfaces[i][j];
            let e = &estimates[i][j];
            if t.shape() != e.shape() {
                return Err(Error::Shape(format!(
                    "surface {i},{j} is {:?}, truth is {:?}",
                    e.shape(),
                    t.shape()
                )));
            }
            total += (t - e).norm_squared();
        }
    }
    Ok(total / (n * n_cond) as f64)
}

/// Contrast mean squared error for covariate `k` (1-based, `k >= 2`).
pub fn cmse(
    truth: &GroundTruth,
    chain: &PosteriorChain,
    basis: &TensorBasis,
    k: usize,
) -> Result<f64> {
    let p = truth.covariates.ncols();
    if k < 2 || k > p {
        return Err(Error::Scenario(format!(
            "contrast covariate {k} undefined for a scenario with {p} covariates"
        )));
    }
    let n = truth.n_subjects();
    let n_cond = truth.n_conditions();
    let mut total = 0.0;
    for j in 1..=n_cond {
        let per_draw = posterior::contrast(chain, basis, j, k)?;
        let mut mean = DMatrix::zeros(basis.t_len(), basis.f_len());
        for d in &per_draw {
            mean += d;
        }
        mean /= per_draw.len() as f64;
        let true_diff = truth.contrast_surface(basis, j, k);
        // the summand does not depend on the subject, so the subject sum is a
        // factor of n that cancels against the n in the denominator
        total += n as f64 * (mean - true_diff).norm_squared();
    }
    Ok(total / (n * n_cond) as f64)
}

/// Which random-effect level a metric refers to.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RandomLevel {
    Subject,
    SubjectByCondition,
}

/// Mean squared Frobenius error of random-effect surfaces.
///
/// The subject level divides by `n`; the subject-by-condition level divides
/// by `n * J'` with one term per observed pair.
pub fn mse_random(
    truth: &GroundTruth,
    estimates: &[DMatrix<f64>],
    level: RandomLevel,
    basis: &TensorBasis,
) -> Result<f64> {
    match level {
        RandomLevel::Subject => {
            let n = truth.n_subjects();
            if estimates.len() != n {
                return Err(Error::Spec(format!(
                    "expected {n} subject surfaces, got {}",
                    estimates.len()
                )));
            }
            let mut total = 0.0;
            for (i, e) in estimates.iter().enumerate() {
                total += (truth.subject_surface(basis, i) - e).norm_squared();
            }
            Ok(total / n as f64)
        }
        RandomLevel::SubjectByCondition => {
            let jt = truth.j_total();
            if estimates.len() != jt {
                return Err(Error::Spec(format!(
                    "expected {jt} pair surfaces, got {}",
                    estimates.len()
                )));
            }
            let mut total = 0.0;
            for (row, e) in estimates.iter().enumerate() {
                total += (truth.pair_surface(basis, row) - e).norm_squared();
            }
            Ok(total / (truth.n_subjects() * jt) as f64)
        }
    }
}

/// Fraction of fitted chains whose selected rank matches the truth.
pub fn rank_accuracy(chains: &[&PosteriorChain], true_rank: usize) -> f64 {
    if chains.is_empty() {
        return 0.0;
    }
    let hits = chains.iter().filter(|c| c.rank() == true_rank).count();
    hits as f64 / chains.len() as f64
}

// --- ground-truth file format -------------------------------------------

#[derive(Serialize, Deserialize)]
struct MatrixData {
    rows: usize,
    cols: usize,
    /// column-major
    data: Vec<f64>,
}

impl MatrixData {
    fn from(m: &DMatrix<f64>) -> Self {
        MatrixData {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn to_matrix(&self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Shape("matrix data length mismatch".into()));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
struct GroundTruthFile {
    u: MatrixData,
    v: MatrixData,
    delta: Vec<MatrixData>,
    gamma: MatrixData,
    omega: MatrixData,
    sigma_gamma2: f64,
    sigma_omega2: Vec<f64>,
    sigma_eps2: f64,
    epsilon: Vec<Vec<f64>>,
    covariates: MatrixData,
    observed: Vec<Vec<usize>>,
    time_grid: Vec<f64>,
    freq_grid: Vec<f64>,
}

impl GroundTruth {
    pub fn save(&self, path: &Path) -> Result<()> {
        let file = GroundTruthFile {
            u: MatrixData::from(&self.fixed.u),
            v: MatrixData::from(&self.fixed.v),
            delta: self.fixed.delta.iter().map(MatrixData::from).collect(),
            gamma: MatrixData::from(&self.gamma),
            omega: MatrixData::from(&self.omega),
            sigma_gamma2: self.sigma_gamma2,
            sigma_omega2: self.sigma_omega2.clone(),
            sigma_eps2: self.sigma_eps2,
            epsilon: self.epsilon.iter().map(|e| e.as_slice().to_vec()).collect(),
            covariates: MatrixData::from(&self.covariates),
            observed: self.observed.clone(),
            time_grid: self.time_grid.clone(),
            freq_grid: self.freq_grid.clone(),
        };
        let text = serde_json::to_string(&file).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: GroundTruthFile = serde_json::from_str(&text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            message: e.to_string(),
        })?;
        let rank = file.u.cols;
        let fixed = CpFixedEffect {
            u: file.u.to_matrix()?,
            v: file.v.to_matrix()?,
            delta: file
                .delta
                .iter()
                .map(|m| m.to_matrix())
                .collect::<Result<_>>()?,
            tau: vec![1.0; rank],
            membership: vec![true; rank],
            slab_weight: 0.5,
        };
        let covariates = file.covariates.to_matrix()?;
        let time_grid = file.time_grid;
        let freq_grid = file.freq_grid;
        let n = covariates.nrows();
        let n_cond = fixed.n_conditions();

        // surfaces are cheap to recompute and deterministic
        let basis = build_tensor_basis(
            build_natural_cubic_basis(&time_grid, fixed.k_time())?,
            build_natural_cubic_basis(&freq_grid, fixed.k_freq())?,
        )?;
        let fixed_surfaces = (0..n)
            .map(|i| {
                let x = covariates.row(i).transpose();
                (1..=n_cond)
                    .map(|j| {
                        let mut coef = DMatrix::zeros(fixed.k_time(), fixed.k_freq());
                        for r in 0..fixed.rank() {
                            let lam = fixed.weight(j, r, &x);
                            coef += lam * fixed.u.column(r) * fixed.v.column(r).transpose();
                        }
                        posterior::surface_from_coef_matrix(&basis, &coef)
                    })
                    .collect()
            })
            .collect();

        Ok(GroundTruth {
            fixed,
            gamma: file.gamma.to_matrix()?,
            omega: file.omega.to_matrix()?,
            sigma_gamma2: file.sigma_gamma2,
            sigma_omega2: file.sigma_omega2,
            sigma_eps2: file.sigma_eps2,
            fixed_surfaces,
            epsilon: file.epsilon.into_iter().map(DVector::from_vec).collect(),
            covariates,
            observed: file.observed,
            time_grid,
            freq_grid,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn small_cfg() -> SimulationConfig {
        SimulationConfig {
            scenario: Scenario::S2,
            rank: 2,
            variance_setting: VarianceSetting::H1,
            n_subjects: 4,
            n_conditions: 3,
            t_len: 12,
            f_len: 10,
            k_time: 4,
            k_freq: 4,
            sigma_gamma2: 0.16,
            sigma_eps2: 0.01,
            missingness: None,
            seed: 7,
        }
    }

    #[test]
    fn defaults_match_reference_design() {
        let cfg: SimulationConfig = serde_json::from_str(
            r#"{"scenario": "S1", "rank": 2, "variance_setting": "H1"}"#,
        )
        .unwrap();
        assert_eq!(cfg.n_subjects, 50);
        assert_eq!(cfg.n_conditions, 3);
        assert_eq!(cfg.t_len, 50);
        assert_eq!(cfg.f_len, 50);
        assert_eq!(cfg.k_time, 6);
        assert_eq!(cfg.k_freq, 6);
        assert_eq!(cfg.sigma_gamma2, 0.16);
        assert_eq!(cfg.sigma_eps2, 0.01);
    }

    #[test]
    fn variance_settings() {
        let (_, truth) = generate(&small_cfg()).unwrap();
        assert!(truth.sigma_omega2.iter().all(|&s| s == 0.16));

        let mut cfg = small_cfg();
        cfg.variance_setting = VarianceSetting::H2;
        let (_, truth) = generate(&cfg).unwrap();
        assert!(truth
            .sigma_omega2
            .iter()
            .all(|&s| (0.04..=1.0).contains(&s)));
        assert!(truth.sigma_omega2.windows(2).any(|w| w[0] != w[1]));
    }

    #[test]
    fn seed_determinism() {
        let (ds1, t1) = generate(&small_cfg()).unwrap();
        let (ds2, t2) = generate(&small_cfg()).unwrap();
        assert_eq!(ds1, ds2);
        assert_eq!(t1.fixed.u, t2.fixed.u);
        assert_eq!(t1.gamma, t2.gamma);
        let mut cfg = small_cfg();
        cfg.seed = 8;
        let (ds3, _) = generate(&cfg).unwrap();
        assert_ne!(ds1, ds3);
    }

    #[test]
    fn responses_decompose_exactly() {
        let (ds, truth) = generate(&small_cfg()).unwrap();
        let basis = truth.basis().unwrap();
        let mut row = 0;
        for (i, set) in truth.observed.iter().enumerate() {
            let x = truth.covariates.row(i).transpose();
            for &j in set {
                let mut coef = truth.fixed.coefficients(j, &x);
                for l in 0..coef.len() {
                    coef[l] += truth.gamma[(i, l)] + truth.omega[(row, l)];
                }
                let fitted = basis.reconstruct(&coef);
                let resid = ds.response(i, j).unwrap() - fitted;
                assert_eq!(resid, truth.epsilon[row], "pair ({i},{j})");
                row += 1;
            }
        }
    }

    #[test]
    fn noise_variance_calibrated_on_large_grids() {
        let mut cfg = small_cfg();
        cfg.t_len = 50;
        cfg.f_len = 50;
        cfg.k_time = 6;
        cfg.k_freq = 6;
        cfg.n_subjects = 3;
        let (_, truth) = generate(&cfg).unwrap();
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        for e in &truth.epsilon {
            for v in e.iter() {
                sum += v;
                sum_sq += v * v;
                count += 1;
            }
        }
        let mean = sum / count as f64;
        let var = sum_sq / count as f64 - mean * mean;
        assert!(
            (var - cfg.sigma_eps2).abs() < 0.05 * cfg.sigma_eps2,
            "empirical {var} vs {}",
            cfg.sigma_eps2
        );
    }

    #[test]
    fn missingness_guard_keeps_design_connected() {
        let mut cfg = small_cfg();
        cfg.missingness = Some(0.4);
        let (ds, truth) = generate(&cfg).unwrap();
        assert!(truth.observed.iter().all(|s| !s.is_empty()));
        for j in 1..=cfg.n_conditions {
            assert!(truth.observed.iter().any(|s| s.contains(&j)));
        }
        assert_eq!(ds.j_total(), truth.j_total());
    }

    #[test]
    fn mse_fixed_zero_offset_and_loop_oracle() {
        let (_, truth) = generate(&small_cfg()).unwrap();
        let exact: Vec<Vec<DMatrix<f64>>> = truth.fixed_surfaces.clone();
        assert_eq!(mse_fixed(&truth, &exact).unwrap(), 0.0);

        let c = 0.7;
        let offset: Vec<Vec<DMatrix<f64>>> = truth
            .fixed_surfaces
            .iter()
            .map(|row| row.iter().map(|m| m.add_scalar(c)).collect())
            .collect();
        let got = mse_fixed(&truth, &offset).unwrap();
        let expected = c * c * (truth.time_grid.len() * truth.freq_grid.len()) as f64;
        assert!((got - expected).abs() < 1e-9 * expected);

        // naive elementwise double loop
        let mut naive = 0.0;
        for i in 0..truth.n_subjects() {
            for j in 0..truth.n_conditions() {
                let t = &truth.fixed_surfaces[i][j];
                let e = &offset[i][j];
                for r in 0..t.nrows() {
                    for cix in 0..t.ncols() {
                        let d = t[(r, cix)] - e[(r, cix)];
                        naive += d * d;
                    }
                }
            }
        }
        naive /= (truth.n_subjects() * truth.n_conditions()) as f64;
        assert!((got - naive).abs() < 1e-12 * naive.max(1.0));
    }

    #[test]
    fn mse_random_offsets() {
        let (_, truth) = generate(&small_cfg()).unwrap();
        let basis = truth.basis().unwrap();
        let tf = (truth.time_grid.len() * truth.freq_grid.len()) as f64;
        let c = 0.3;

        let exact: Vec<DMatrix<f64>> = (0..truth.n_subjects())
            .map(|i| truth.subject_surface(&basis, i))
            .collect();
        assert_eq!(
            mse_random(&truth, &exact, RandomLevel::Subject, &basis).unwrap(),
            0.0
        );
        let offset: Vec<DMatrix<f64>> = exact.iter().map(|m| m.add_scalar(c)).collect();
        let got = mse_random(&truth, &offset, RandomLevel::Subject, &basis).unwrap();
        assert!((got - c * c * tf).abs() < 1e-9 * got);

        let exact: Vec<DMatrix<f64>> = (0..truth.j_total())
            .map(|row| truth.pair_surface(&basis, row))
            .collect();
        let offset: Vec<DMatrix<f64>> = exact.iter().map(|m| m.add_scalar(c)).collect();
        let got = mse_random(&truth, &offset, RandomLevel::SubjectByCondition, &basis).unwrap();
        let expected = truth.j_total() as f64 * c * c * tf
            / (truth.n_subjects() * truth.j_total()) as f64;
        assert!((got - expected).abs() < 1e-9 * expected);
    }

    #[test]
    fn ground_truth_round_trips_through_json() {
        let (_, truth) = generate(&small_cfg()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("truth.json");
        truth.save(&path).unwrap();
        let loaded = GroundTruth::load(&path).unwrap();
        assert_eq!(truth.fixed.u, loaded.fixed.u);
        assert_eq!(truth.gamma, loaded.gamma);
        assert_eq!(truth.omega, loaded.omega);
        assert_eq!(truth.epsilon, loaded.epsilon);
        assert_eq!(truth.fixed_surfaces[0][0], loaded.fixed_surfaces[0][0]);
    }
}

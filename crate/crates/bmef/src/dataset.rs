//! Observed-data container for multilevel two-way functional responses.
//!
//! Responses live on a fixed time x frequency grid and are stored vectorized
//! in column-major order (time index varying fastest). Subjects may miss
//! conditions; the per-subject observed sets are kept sorted and every
//! condition must be observed by at least one subject.
//!
//! File formats:
//! - `responses.csv`: `subject_id, condition, v1..v{T*F}` with conditions in
//!   `1..=J` and values in column-major order,
//! - `covariates.csv`: `subject_id, x1..xp`,
//! - `grid.json`: `{"time": [...], "freq": [...]}`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::basis::TensorBasis;
use crate::error::{Error, Result};

/// Projected responses keyed by `(subject index, condition)`.
pub type ProjectedMap = BTreeMap<(usize, usize), DVector<f64>>;

/// Grid specification, either inline or loaded from a JSON file.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GridSpec {
    pub time: Vec<f64>,
    pub freq: Vec<f64>,
}

#[derive(Debug, Clone)]
pub enum GridSource {
    Inline(GridSpec),
    File(PathBuf),
}

/// A validated multilevel two-way functional dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct FunctionalDataset {
    subject_ids: Vec<String>,
    n_conditions: usize,
    time_grid: Vec<f64>,
    freq_grid: Vec<f64>,
    covariates: DMatrix<f64>,
    observed: Vec<Vec<usize>>,
    responses: BTreeMap<(usize, usize), DVector<f64>>,
    pairs: Vec<(usize, usize)>,
}

impl FunctionalDataset {
    /// Assemble and validate a dataset from in-memory parts.
    ///
    /// `responses` is keyed by `(subject index, condition)` with subject
    /// indices matching rows of `covariates` and conditions in `1..=J` where
    /// `J` is the largest condition present.
    pub fn new(
        subject_ids: Vec<String>,
        time_grid: Vec<f64>,
        freq_grid: Vec<f64>,
        covariates: DMatrix<f64>,
        responses: BTreeMap<(usize, usize), DVector<f64>>,
    ) -> Result<Self> {
        let n = subject_ids.len();
        if covariates.nrows() != n {
            return Err(Error::Integrity(format!(
                "covariate rows ({}) do not match number of subjects ({})",
                covariates.nrows(),
                n
            )));
        }
        if covariates.ncols() == 0 {
            return Err(Error::Integrity("no covariate columns".into()));
        }
        if responses.is_empty() {
            return Err(Error::Integrity("no responses".into()));
        }
        let grid_len = time_grid.len() * freq_grid.len();
        let n_conditions = responses.keys().map(|&(_, j)| j).max().unwrap_or(0);

        let mut observed: Vec<Vec<usize>> = vec![Vec::new(); n];
        for (&(i, j), y) in &responses {
            if i >= n {
                return Err(Error::Index(format!(
                    "response references subject index {i} but only {n} covariate rows exist"
                )));
            }
            if j == 0 || j > n_conditions {
                return Err(Error::Index(format!(
                    "condition {j} outside 1..={n_conditions}"
                )));
            }
            if y.len() != grid_len {
                return Err(Error::Shape(format!(
                    "response for subject {i} condition {j} has length {} but grid size is {}",
                    y.len(),
                    grid_len
                )));
            }
            if y.iter().any(|v| !v.is_finite()) {
                return Err(Error::Integrity(format!(
                    "response for subject {i} condition {j} has non-finite entries"
                )));
            }
            observed[i].push(j);
        }
        let mut seen = vec![false; n_conditions + 1];
        for (i, set) in observed.iter().enumerate() {
            if set.is_empty() {
                return Err(Error::Integrity(format!(
                    "subject {} ({}) has no observed conditions",
                    i, subject_ids[i]
                )));
            }
            for &j in set {
                seen[j] = true;
            }
        }
        if let Some(missing) = (1..=n_conditions).find(|&j| !seen[j]) {
            return Err(Error::Integrity(format!(
                "condition {missing} is observed by no subject"
            )));
        }

        let pairs = observed
            .iter()
            .enumerate()
            .flat_map(|(i, set)| set.iter().map(move |&j| (i, j)))
            .collect();
        Ok(Self {
            subject_ids,
            n_conditions,
            time_grid,
            freq_grid,
            covariates,
            observed,
            responses,
            pairs,
        })
    }

    pub fn n_subjects(&self) -> usize {
        self.subject_ids.len()
    }

    pub fn n_conditions(&self) -> usize {
        self.n_conditions
    }

    pub fn n_covariates(&self) -> usize {
        self.covariates.ncols()
    }

    pub fn subject_ids(&self) -> &[String] {
        &self.subject_ids
    }

    pub fn time_grid(&self) -> &[f64] {
        &self.time_grid
    }

    pub fn freq_grid(&self) -> &[f64] {
        &self.freq_grid
    }

    pub fn t_len(&self) -> usize {
        self.time_grid.len()
    }

    pub fn f_len(&self) -> usize {
        self.freq_grid.len()
    }

    pub fn grid_len(&self) -> usize {
        self.t_len() * self.f_len()
    }

    pub fn covariates(&self) -> &DMatrix<f64> {
        &self.covariates
    }

    pub fn covariate_row(&self, i: usize) -> DVector<f64> {
        self.covariates.row(i).transpose()
    }

    /// Sorted conditions observed for subject `i`.
    pub fn observed(&self, i: usize) -> &[usize] {
        &self.observed[i]
    }

    pub fn j_count(&self, i: usize) -> usize {
        self.observed[i].len()
    }

    /// Total number of observed (subject, condition) pairs.
    pub fn j_total(&self) -> usize {
        self.pairs.len()
    }

    /// Observed pairs in stacking order: subject-major, condition ascending.
    pub fn pairs(&self) -> &[(usize, usize)] {
        &self.pairs
    }

    pub fn pair_index(&self, i: usize, j: usize) -> Option<usize> {
        self.pairs.binary_search(&(i, j)).ok()
    }

    pub fn response(&self, i: usize, j: usize) -> Option<&DVector<f64>> {
        self.responses.get(&(i, j))
    }

    pub fn responses(&self) -> &BTreeMap<(usize, usize), DVector<f64>> {
        &self.responses
    }

    /// Write `responses.csv`, `covariates.csv` and `grid.json` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        let grid = GridSpec {
            time: self.time_grid.clone(),
            freq: self.freq_grid.clone(),
        };
        let mut f = std::fs::File::create(dir.join("grid.json"))?;
        serde_json::to_writer_pretty(&mut f, &grid).map_err(|e| Error::Parse {
            path: dir.join("grid.json").display().to_string(),
            message: e.to_string(),
        })?;
        f.write_all(b"\n")?;

        let mut w = csv::Writer::from_path(dir.join("covariates.csv"))?;
        let mut header = vec!["subject_id".to_string()];
        header.extend((1..=self.n_covariates()).map(|k| format!("x{k}")));
        w.write_record(&header)?;
        for (i, id) in self.subject_ids.iter().enumerate() {
            let mut rec = vec![id.clone()];
            rec.extend((0..self.n_covariates()).map(|k| format!("{}", self.covariates[(i, k)])));
            w.write_record(&rec)?;
        }
        w.flush()?;

        let mut w = csv::Writer::from_path(dir.join("responses.csv"))?;
        let mut header = vec!["subject_id".to_string(), "condition".to_string()];
        header.extend((1..=self.grid_len()).map(|k| format!("v{k}")));
        w.write_record(&header)?;
        for &(i, j) in &self.pairs {
            let y = &self.responses[&(i, j)];
            let mut rec = vec![self.subject_ids[i].clone(), j.to_string()];
            rec.extend(y.iter().map(|v| format!("{v}")));
            w.write_record(&rec)?;
        }
        w.flush()?;
        Ok(())
    }
}

/// Load a dataset from the CSV/JSON formats written by [`FunctionalDataset::save`].
pub fn load_dataset(
    responses_path: &Path,
    covariates_path: &Path,
    grid: GridSource,
) -> Result<FunctionalDataset> {
    let grid = match grid {
        GridSource::Inline(g) => g,
        GridSource::File(p) => {
            let text = std::fs::read_to_string(&p)?;
            serde_json::from_str(&text).map_err(|e| Error::Parse {
                path: p.display().to_string(),
                message: e.to_string(),
            })?
        }
    };
    let grid_len = grid.time.len() * grid.freq.len();

    let mut rdr = csv::Reader::from_path(covariates_path)?;
    let n_cov = rdr.headers()?.len().saturating_sub(1);
    if n_cov == 0 {
        return Err(Error::Integrity(format!(
            "{} has no covariate columns",
            covariates_path.display()
        )));
    }
    let mut subject_ids = Vec::new();
    let mut cov_rows: Vec<f64> = Vec::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(covariates_path, &e))?;
        if rec.len() != n_cov + 1 {
            return Err(Error::Integrity(format!(
                "covariate row for {} has {} fields, expected {}",
                rec.get(0).unwrap_or("?"),
                rec.len(),
                n_cov + 1
            )));
        }
        subject_ids.push(rec[0].to_string());
        for k in 1..=n_cov {
            cov_rows.push(parse_f64(&rec[k], covariates_path)?);
        }
    }
    if subject_ids.is_empty() {
        return Err(Error::Integrity("no subjects in covariates file".into()));
    }
    let index_of: BTreeMap<&str, usize> = subject_ids
        .iter()
        .enumerate()
        .map(|(i, s)| (s.as_str(), i))
        .collect();
    if index_of.len() != subject_ids.len() {
        return Err(Error::Integrity("duplicate subject ids".into()));
    }
    let covariates = DMatrix::from_row_slice(subject_ids.len(), n_cov, &cov_rows);

    let mut rdr = csv::Reader::from_path(responses_path)?;
    let width = rdr.headers()?.len();
    if width != grid_len + 2 {
        return Err(Error::Shape(format!(
            "{} has {} value columns but the grid has {} points",
            responses_path.display(),
            width.saturating_sub(2),
            grid_len
        )));
    }
    let mut responses: BTreeMap<(usize, usize), DVector<f64>> = BTreeMap::new();
    for rec in rdr.records() {
        let rec = rec.map_err(|e| parse_err(responses_path, &e))?;
        let id = &rec[0];
        let &i = index_of.get(id).ok_or_else(|| {
            Error::Integrity(format!("subject {id} in responses has no covariate row"))
        })?;
        let j: usize = rec[1].parse().map_err(|_| Error::Parse {
            path: responses_path.display().to_string(),
            message: format!("bad condition {:?}", &rec[1]),
        })?;
        let mut y = DVector::zeros(grid_len);
        for k in 0..grid_len {
            y[k] = parse_f64(&rec[k + 2], responses_path)?;
        }
        if responses.insert((i, j), y).is_some() {
            return Err(Error::Integrity(format!(
                "duplicate response row for subject {id}, condition {j}"
            )));
        }
    }

    FunctionalDataset::new(subject_ids, grid.time, grid.freq, covariates, responses)
}

fn parse_f64(s: &str, path: &Path) -> Result<f64> {
    s.trim().parse().map_err(|_| Error::Parse {
        path: path.display().to_string(),
        message: format!("bad number {s:?}"),
    })
}

fn parse_err(path: &Path, e: &csv::Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

/// Project every observed response onto the orthogonalized basis.
pub fn project_responses(ds: &FunctionalDataset, basis: &TensorBasis) -> Result<ProjectedMap> {
    if basis.t_len() != ds.t_len() || basis.f_len() != ds.f_len() {
        return Err(Error::Shape(format!(
            "basis grid {}x{} does not match data grid {}x{}",
            basis.t_len(),
            basis.f_len(),
            ds.t_len(),
            ds.f_len()
        )));
    }
    let mut out = ProjectedMap::new();
    for (&(i, j), y) in ds.responses() {
        out.insert((i, j), basis.project(y)?);
    }
    Ok(out)
}

/// Stack the `l`-th projected coefficient across all observed pairs
/// (subject-major, condition ascending), with the subject incidence matrix.
///
/// `l` is a zero-based basis index. The returned `Z` is `J' x n` with
/// `Z[row, i] = 1` when the row's pair belongs to subject `i`.
pub fn stack_by_basis_index(
    ds: &FunctionalDataset,
    projected: &ProjectedMap,
    l: usize,
) -> Result<(DVector<f64>, DMatrix<f64>)> {
    let jt = ds.j_total();
    let mut y = DVector::zeros(jt);
    let mut z = DMatrix::zeros(jt, ds.n_subjects());
    for (row, &(i, j)) in ds.pairs().iter().enumerate() {
        let coef = projected
            .get(&(i, j))
            .ok_or_else(|| Error::Integrity(format!("projected map is missing pair ({i}, {j})")))?;
        if l >= coef.len() {
            return Err(Error::Index(format!(
                "basis index {l} out of range for K = {}",
                coef.len()
            )));
        }
        y[row] = coef[l];
        z[(row, i)] = 1.0;
    }
    Ok((y, z))
}

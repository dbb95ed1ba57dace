//! Chain persistence in two interchangeable formats.
//!
//! JSON-lines (`.jsonl`): the first line is a header object
//! `{"format": "bmef-chain", "version": 1, "meta": ..., "alignment": ...}`,
//! followed by one JSON object per draw. Matrices are stored as
//! `{rows, cols, data}` with column-major data.
//!
//! Binary: the ASCII magic `BMEFCHN1`, a little-endian `u64` header length,
//! the same header as JSON, then for each draw a flat little-endian `f64`
//! stream in this order: `u` (`K_T x R`, column-major), `v` (`K_F x R`),
//! `delta` (per condition, `p x R` column-major), `tau` (`R`), membership
//! flags (`R` values, 0 or 1), the slab weight, `gamma` (`n x K`,
//! column-major; empty under model `A`), `omega` (`J' x K`; empty unless the
//! model has subject-by-condition effects), `sigma_gamma2`, the
//! subject-by-condition variances (`n`, `1`, or `0` values depending on the
//! variance mode), and `sigma_eps2`.

use std::io::{BufRead, BufReader, BufWriter, Read, Write};
use std::path::Path;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::posterior::{Alignment, ChainMeta, Draw, PosteriorChain};
use crate::sampler::state::{CpFixedEffect, RandomEffectState, SigmaOmega};

const MAGIC: &[u8; 8] = b"BMEFCHN1";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ChainFormat {
    Jsonl,
    Binary,
}

impl ChainFormat {
    pub fn from_name(name: &str) -> Result<Self> {
        match name {
            "jsonl" => Ok(ChainFormat::Jsonl),
            "binary" => Ok(ChainFormat::Binary),
            other => Err(Error::Config(format!(
                "unknown chain format {other:?} (expected jsonl or binary)"
            ))),
        }
    }
}

#[derive(Serialize, Deserialize)]
struct MetaFile {
    config: crate::config::FitConfig,
    subject_ids: Vec<String>,
    observed: Vec<Vec<usize>>,
    time_grid: Vec<f64>,
    freq_grid: Vec<f64>,
    n_conditions: usize,
    n_covariates: usize,
    final_rank: usize,
    elapsed_secs: f64,
    fb_attempts: u64,
    fb_draws: u64,
}

impl MetaFile {
    fn from(meta: &ChainMeta) -> Self {
        MetaFile {
            config: meta.config.clone(),
            subject_ids: meta.subject_ids.clone(),
            observed: meta.observed.clone(),
            time_grid: meta.time_grid.clone(),
            freq_grid: meta.freq_grid.clone(),
            n_conditions: meta.n_conditions,
            n_covariates: meta.n_covariates,
            final_rank: meta.final_rank,
            elapsed_secs: meta.elapsed_secs,
            fb_attempts: meta.fb_attempts,
            fb_draws: meta.fb_draws,
        }
    }

    fn into_meta(self) -> ChainMeta {
        ChainMeta {
            config: self.config,
            subject_ids: self.subject_ids,
            observed: self.observed,
            time_grid: self.time_grid,
            freq_grid: self.freq_grid,
            n_conditions: self.n_conditions,
            n_covariates: self.n_covariates,
            final_rank: self.final_rank,
            elapsed_secs: self.elapsed_secs,
            fb_attempts: self.fb_attempts,
            fb_draws: self.fb_draws,
        }
    }
}

#[derive(Serialize, Deserialize)]
struct AlignmentFile {
    perm: Vec<usize>,
    flip_time: Vec<bool>,
    flip_freq: Vec<bool>,
}

#[derive(Serialize, Deserialize)]
struct Header {
    format: String,
    version: u32,
    meta: MetaFile,
    alignment: Option<Vec<AlignmentFile>>,
    n_draws: usize,
}

#[derive(Serialize, Deserialize)]
struct Mat {
    rows: usize,
    cols: usize,
    data: Vec<f64>,
}

impl Mat {
    fn from(m: &DMatrix<f64>) -> Self {
        Mat {
            rows: m.nrows(),
            cols: m.ncols(),
            data: m.as_slice().to_vec(),
        }
    }

    fn into_matrix(self) -> Result<DMatrix<f64>> {
        if self.data.len() != self.rows * self.cols {
            return Err(Error::Shape("matrix payload length mismatch".into()));
        }
        Ok(DMatrix::from_column_slice(self.rows, self.cols, &self.data))
    }
}

#[derive(Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
enum SigmaOmegaFile {
    PerSubject { values: Vec<f64> },
    Pooled { value: f64 },
    Absent,
}

#[derive(Serialize, Deserialize)]
struct DrawRecord {
    u: Mat,
    v: Mat,
    delta: Vec<Mat>,
    tau: Vec<f64>,
    membership: Vec<bool>,
    slab_weight: f64,
    gamma: Mat,
    omega: Mat,
    sigma_gamma2: f64,
    sigma_omega2: SigmaOmegaFile,
    sigma_eps2: f64,
}

impl DrawRecord {
    fn from(d: &Draw) -> Self {
        DrawRecord {
            u: Mat::from(&d.fixed.u),
            v: Mat::from(&d.fixed.v),
            delta: d.fixed.delta.iter().map(Mat::from).collect(),
            tau: d.fixed.tau.clone(),
            membership: d.fixed.membership.clone(),
            slab_weight: d.fixed.slab_weight,
            gamma: Mat::from(&d.random.gamma),
            omega: Mat::from(&d.random.omega),
            sigma_gamma2: d.random.sigma_gamma2,
            sigma_omega2: match &d.random.sigma_omega2 {
                SigmaOmega::PerSubject(v) => SigmaOmegaFile::PerSubject { values: v.clone() },
                SigmaOmega::Pooled(v) => SigmaOmegaFile::Pooled { value: *v },
                SigmaOmega::Absent => SigmaOmegaFile::Absent,
            },
            sigma_eps2: d.random.sigma_eps2,
        }
    }

    fn into_draw(self) -> Result<Draw> {
        Ok(Draw {
            fixed: CpFixedEffect {
                u: self.u.into_matrix()?,
                v: self.v.into_matrix()?,
                delta: self
                    .delta
                    .into_iter()
                    .map(Mat::into_matrix)
                    .collect::<Result<_>>()?,
                tau: self.tau,
                membership: self.membership,
                slab_weight: self.slab_weight,
            },
            random: RandomEffectState {
                gamma: self.gamma.into_matrix()?,
                omega: self.omega.into_matrix()?,
                sigma_gamma2: self.sigma_gamma2,
                sigma_omega2: match self.sigma_omega2 {
                    SigmaOmegaFile::PerSubject { values } => SigmaOmega::PerSubject(values),
                    SigmaOmegaFile::Pooled { value } => SigmaOmega::Pooled(value),
                    SigmaOmegaFile::Absent => SigmaOmega::Absent,
                },
                sigma_eps2: self.sigma_eps2,
            },
        })
    }
}

fn header_of(chain: &PosteriorChain) -> Header {
    Header {
        format: "bmef-chain".into(),
        version: 1,
        meta: MetaFile::from(&chain.meta),
        alignment: chain.alignment.as_ref().map(|a| {
            a.iter()
                .map(|x| AlignmentFile {
                    perm: x.perm.clone(),
                    flip_time: x.flip_time.clone(),
                    flip_freq: x.flip_freq.clone(),
                })
                .collect()
        }),
        n_draws: chain.draws.len(),
    }
}

fn chain_from(header: Header, draws: Vec<Draw>) -> Result<PosteriorChain> {
    if header.format != "bmef-chain" || header.version != 1 {
        return Err(Error::Parse {
            path: "<chain>".into(),
            message: "unsupported chain header".into(),
        });
    }
    if draws.len() != header.n_draws {
        return Err(Error::Parse {
            path: "<chain>".into(),
            message: format!(
                "header promises {} draws but {} were read",
                header.n_draws,
                draws.len()
            ),
        });
    }
    let alignment = header.alignment.map(|a| {
        a.into_iter()
            .map(|x| Alignment {
                perm: x.perm,
                flip_time: x.flip_time,
                flip_freq: x.flip_freq,
            })
            .collect()
    });
    let mut chain = PosteriorChain::new(draws, header.meta.into_meta())?;
    chain.alignment = alignment;
    Ok(chain)
}

/// Persist a chain in the requested format.
pub fn save_chain(chain: &PosteriorChain, path: &Path, format: ChainFormat) -> Result<()> {
    if let Some(parent) = path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)?;
        }
    }
    match format {
        ChainFormat::Jsonl => save_jsonl(chain, path),
        ChainFormat::Binary => save_binary(chain, path),
    }
}

fn json_err(path: &Path, e: impl std::fmt::Display) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    }
}

fn save_jsonl(chain: &PosteriorChain, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    let header = serde_json::to_string(&header_of(chain)).map_err(|e| json_err(path, e))?;
    writeln!(w, "{header}")?;
    for d in &chain.draws {
        let line =
            serde_json::to_string(&DrawRecord::from(d)).map_err(|e| json_err(path, e))?;
        writeln!(w, "{line}")?;
    }
    w.flush()?;
    Ok(())
}

fn write_f64<W: Write>(w: &mut W, v: f64) -> std::io::Result<()> {
    w.write_all(&v.to_le_bytes())
}

fn read_f64<R: Read>(r: &mut R) -> Result<f64> {
    let mut buf = [0u8; 8];
    r.read_exact(&mut buf)?;
    Ok(f64::from_le_bytes(buf))
}

fn read_mat<R: Read>(r: &mut R, rows: usize, cols: usize) -> Result<DMatrix<f64>> {
    let mut m = DMatrix::zeros(rows, cols);
    for idx in 0..rows * cols {
        m.as_mut_slice()[idx] = read_f64(r)?;
    }
    Ok(m)
}

fn save_binary(chain: &PosteriorChain, path: &Path) -> Result<()> {
    let mut w = BufWriter::new(std::fs::File::create(path)?);
    w.write_all(MAGIC)?;
    let header = serde_json::to_vec(&header_of(chain)).map_err(|e| json_err(path, e))?;
    w.write_all(&(header.len() as u64).to_le_bytes())?;
    w.write_all(&header)?;
    let mut put = |v: f64| write_f64(&mut w, v);
    for d in &chain.draws {
        for v in d.fixed.u.as_slice() {
            put(*v)?;
        }
        for v in d.fixed.v.as_slice() {
            put(*v)?;
        }
        for dm in &d.fixed.delta {
            for v in dm.as_slice() {
                put(*v)?;
            }
        }
        for v in &d.fixed.tau {
            put(*v)?;
        }
        for m in &d.fixed.membership {
            put(if *m { 1.0 } else { 0.0 })?;
        }
        put(d.fixed.slab_weight)?;
        for v in d.random.gamma.as_slice() {
            put(*v)?;
        }
        for v in d.random.omega.as_slice() {
            put(*v)?;
        }
        put(d.random.sigma_gamma2)?;
        match &d.random.sigma_omega2 {
            SigmaOmega::PerSubject(vs) => {
                for v in vs {
                    put(*v)?;
                }
            }
            SigmaOmega::Pooled(v) => put(*v)?,
            SigmaOmega::Absent => {}
        }
        put(d.random.sigma_eps2)?;
    }
    w.flush()?;
    Ok(())
}

/// Load a chain, detecting the format from the file contents.
pub fn load_chain(path: &Path) -> Result<PosteriorChain> {
    let mut f = std::fs::File::open(path)?;
    let mut magic = [0u8; 8];
    let n = f.read(&mut magic)?;
    drop(f);
    if n == 8 && &magic == MAGIC {
        load_binary(path)
    } else {
        load_jsonl(path)
    }
}

fn load_jsonl(path: &Path) -> Result<PosteriorChain> {
    let r = BufReader::new(std::fs::File::open(path)?);
    let mut lines = r.lines();
    let header_line = lines
        .next()
        .ok_or_else(|| json_err(path, "empty chain file"))??;
    let header: Header =
        serde_json::from_str(&header_line).map_err(|e| json_err(path, e))?;
    let mut draws = Vec::with_capacity(header.n_draws);
    for line in lines {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: DrawRecord = serde_json::from_str(&line).map_err(|e| json_err(path, e))?;
        draws.push(rec.into_draw()?);
    }
    chain_from(header, draws)
}

fn load_binary(path: &Path) -> Result<PosteriorChain> {
    let mut r = BufReader::new(std::fs::File::open(path)?);
    let mut magic = [0u8; 8];
    r.read_exact(&mut magic)?;
    if &magic != MAGIC {
        return Err(json_err(path, "bad magic"));
    }
    let mut len = [0u8; 8];
    r.read_exact(&mut len)?;
    let mut header_bytes = vec![0u8; u64::from_le_bytes(len) as usize];
    r.read_exact(&mut header_bytes)?;
    let header: Header =
        serde_json::from_slice(&header_bytes).map_err(|e| json_err(path, e))?;

    let meta = &header.meta;
    let rank = meta.final_rank;
    let kt = meta.config.k_time;
    let kf = meta.config.k_freq;
    let k = kt * kf;
    let p = meta.n_covariates;
    let n = meta.subject_ids.len();
    let j_total: usize = meta.observed.iter().map(|s| s.len()).sum();
    let has_gamma = meta.config.model_spec.has_subject_effects();
    let has_omega = meta.config.model_spec.has_condition_effects();

    let mut draws = Vec::with_capacity(header.n_draws);
    for _ in 0..header.n_draws {
        let u = read_mat(&mut r, kt, rank)?;
        let v = read_mat(&mut r, kf, rank)?;
        let mut delta = Vec::with_capacity(meta.n_conditions);
        for _ in 0..meta.n_conditions {
            delta.push(read_mat(&mut r, p, rank)?);
        }
        let mut tau = Vec::with_capacity(rank);
        for _ in 0..rank {
            tau.push(read_f64(&mut r)?);
        }
        let mut membership = Vec::with_capacity(rank);
        for _ in 0..rank {
            membership.push(read_f64(&mut r)? != 0.0);
        }
        let slab_weight = read_f64(&mut r)?;
        let gamma = if has_gamma {
            read_mat(&mut r, n, k)?
        } else {
            DMatrix::zeros(0, 0)
        };
        let omega = if has_omega {
            read_mat(&mut r, j_total, k)?
        } else {
            DMatrix::zeros(0, 0)
        };
        let sigma_gamma2 = read_f64(&mut r)?;
        let sigma_omega2 = if !has_omega {
            SigmaOmega::Absent
        } else {
            match meta.config.variance_mode {
                crate::config::VarianceMode::Heterogeneous => {
                    let mut vs = Vec::with_capacity(n);
                    for _ in 0..n {
                        vs.push(read_f64(&mut r)?);
                    }
                    SigmaOmega::PerSubject(vs)
                }
                crate::config::VarianceMode::Homogeneous => {
                    SigmaOmega::Pooled(read_f64(&mut r)?)
                }
            }
        };
        let sigma_eps2 = read_f64(&mut r)?;
        draws.push(Draw {
            fixed: CpFixedEffect {
                u,
                v,
                delta,
                tau,
                membership,
                slab_weight,
            },
            random: RandomEffectState {
                gamma,
                omega,
                sigma_gamma2,
                sigma_omega2,
                sigma_eps2,
            },
        });
    }
    chain_from(header, draws)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::config::FitConfig;

    fn tiny_chain() -> PosteriorChain {
        let mut cfg = FitConfig::default();
        cfg.k_time = 4;
        cfg.k_freq = 4;
        let k = 16;
        let draw = |s: f64| Draw {
            fixed: CpFixedEffect {
                u: DMatrix::from_fn(4, 2, |i, j| s + (i * 2 + j) as f64 * 0.01),
                v: DMatrix::from_fn(4, 2, |i, j| s - (i * 2 + j) as f64 * 0.01),
                delta: vec![DMatrix::from_element(1, 2, s * 0.5); 2],
                tau: vec![0.9, 0.2],
                membership: vec![true, false],
                slab_weight: 0.4,
            },
            random: RandomEffectState {
                gamma: DMatrix::from_fn(3, k, |i, l| s * 1e-3 + (i + l) as f64),
                omega: DMatrix::from_fn(5, k, |i, l| s * 1e-3 - (i + l) as f64),
                sigma_gamma2: 0.3,
                sigma_omega2: SigmaOmega::PerSubject(vec![0.1, 0.2, 0.3]),
                sigma_eps2: 0.01 * s,
            },
        };
        let meta = ChainMeta {
            config: cfg,
            subject_ids: vec!["a".into(), "b".into(), "c".into()],
            observed: vec![vec![1, 2], vec![1, 2], vec![1]],
            time_grid: (0..8).map(|i| i as f64 / 7.0).collect(),
            freq_grid: (0..8).map(|i| i as f64 / 7.0).collect(),
            n_conditions: 2,
            n_covariates: 1,
            final_rank: 2,
            elapsed_secs: 1.25,
            fb_attempts: 100,
            fb_draws: 60,
        };
        PosteriorChain::new(vec![draw(1.0), draw(std::f64::consts::E)], meta).unwrap()
    }

    #[test]
    fn jsonl_round_trip_is_exact() {
        let chain = tiny_chain();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.jsonl");
        save_chain(&chain, &path, ChainFormat::Jsonl).unwrap();
        let loaded = load_chain(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.draws[1].fixed.u, chain.draws[1].fixed.u);
        assert_eq!(loaded.draws[1].random.omega, chain.draws[1].random.omega);
        assert_eq!(loaded.draws[1].random.sigma_eps2, chain.draws[1].random.sigma_eps2);
        assert_eq!(loaded.meta.subject_ids, chain.meta.subject_ids);
    }

    #[test]
    fn binary_round_trip_is_exact() {
        let chain = tiny_chain();
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("chain.bin");
        save_chain(&chain, &path, ChainFormat::Binary).unwrap();
        let loaded = load_chain(&path).unwrap();
        assert_eq!(loaded.len(), 2);
        assert_eq!(loaded.draws[0].fixed.v, chain.draws[0].fixed.v);
        assert_eq!(loaded.draws[1].fixed.tau, chain.draws[1].fixed.tau);
        assert_eq!(loaded.draws[1].random.gamma, chain.draws[1].random.gamma);
        match &loaded.draws[0].random.sigma_omega2 {
            SigmaOmega::PerSubject(v) => assert_eq!(v, &vec![0.1, 0.2, 0.3]),
            _ => panic!("wrong variance kind"),
        }
    }

    #[test]
    fn malformed_file_is_a_parse_error() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("junk.jsonl");
        std::fs::write(&path, "this is not a chain\n").unwrap();
        assert!(matches!(load_chain(&path), Err(Error::Parse { .. })));
    }
}

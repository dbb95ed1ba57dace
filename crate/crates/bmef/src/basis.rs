//! Marginal spline bases, their tensor product, and the orthogonalized
//! reparametrization used by the sampler.
//!
//! The marginal bases are natural cubic B-splines with evenly spaced interior
//! knots. The tensor-product evaluation matrix is rotated through the SVDs of
//! the marginal evaluations so that its Gram matrix is diagonal, which is what
//! makes the per-basis-index random-effect updates independent.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::linalg::{fix_column_signs, orthonormal_complement};

const RANK_TOL: f64 = 1e-10;

/// Basis family for a marginal dimension.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum BasisKind {
    NaturalCubicBspline,
}

/// A spline basis over one marginal grid.
///
/// Evaluation happens on the grid rescaled to `[0, 1]`; the affine map back to
/// original units is retained so downstream summaries report original
/// coordinates.
#[derive(Debug, Clone)]
pub struct MarginalBasis {
    grid: Vec<f64>,
    eval: DMatrix<f64>,
    k_dim: usize,
    kind: BasisKind,
    offset: f64,
    scale: f64,
    knots: Vec<f64>,
    constraint: DMatrix<f64>,
}

impl MarginalBasis {
    pub fn grid(&self) -> &[f64] {
        &self.grid
    }

    /// Basis evaluations on the construction grid, `n_points x k_dim`.
    pub fn eval_matrix(&self) -> &DMatrix<f64> {
        &self.eval
    }

    pub fn k_dim(&self) -> usize {
        self.k_dim
    }

    pub fn kind(&self) -> BasisKind {
        self.kind
    }

    /// Evaluate all basis functions at arbitrary points in original units.
    pub fn evaluate(&self, points: &[f64]) -> DMatrix<f64> {
        self.evaluate_deriv(points, 0)
    }

    /// Evaluate the `deriv`-th derivative (with respect to the unit-interval
    /// coordinate) of all basis functions.
    pub fn evaluate_deriv(&self, points: &[f64], deriv: usize) -> DMatrix<f64> {
        let raw_dim = self.constraint.nrows();
        let mut raw = DMatrix::zeros(points.len(), raw_dim);
        for (row, &x) in points.iter().enumerate() {
            let u = ((x - self.offset) / self.scale).clamp(0.0, 1.0);
            let vals = bspline_all(&self.knots, 4, u, deriv);
            for (col, v) in vals.iter().enumerate() {
                raw[(row, col)] = *v;
            }
        }
        raw * &self.constraint
    }
}

/// Build a natural cubic B-spline basis of dimension `k_dim` on `grid`.
///
/// Interior knots are evenly spaced strictly inside the grid range; the two
/// natural constraints (zero second derivative at both ends) are imposed by a
/// deterministic null-space transform of a raw basis of dimension `k_dim + 2`.
pub fn build_natural_cubic_basis(grid: &[f64], k_dim: usize) -> Result<MarginalBasis> {
    if k_dim < 4 {
        return Err(Error::InvalidDegree(k_dim));
    }
    if grid.len() < k_dim {
        return Err(Error::InvalidGrid(format!(
            "need at least k_dim = {} grid points, got {}",
            k_dim,
            grid.len()
        )));
    }
    if grid.windows(2).any(|w| w[1] <= w[0]) {
        return Err(Error::InvalidGrid(
            "grid points must be strictly increasing".into(),
        ));
    }
    if grid.iter().any(|x| !x.is_finite()) {
        return Err(Error::InvalidGrid("grid points must be finite".into()));
    }

    let offset = grid[0];
    let scale = grid[grid.len() - 1] - grid[0];

    let raw_dim = k_dim + 2;
    let n_interior = raw_dim - 4;
    let mut knots = vec![0.0; 4];
    for i in 1..=n_interior {
        knots.push(i as f64 / (n_interior + 1) as f64);
    }
    knots.extend_from_slice(&[1.0; 4]);

    // Natural constraints: second derivative vanishes at both boundaries.
    let d2_lo = bspline_all(&knots, 4, 0.0, 2);
    let d2_hi = bspline_all(&knots, 4, 1.0, 2);
    let mut c = DMatrix::zeros(raw_dim, 2);
    for i in 0..raw_dim {
        c[(i, 0)] = d2_lo[i];
        c[(i, 1)] = d2_hi[i];
    }
    orthonormalize_columns(&mut c);
    let constraint = orthonormal_complement(&c, raw_dim);

    let mut basis = MarginalBasis {
        grid: grid.to_vec(),
        eval: DMatrix::zeros(0, 0),
        k_dim,
        kind: BasisKind::NaturalCubicBspline,
        offset,
        scale,
        knots,
        constraint,
    };
    basis.eval = basis.evaluate(grid);

    let sv = basis.eval.clone().singular_values();
    let (s_max, s_min) = (sv.max(), sv.min());
    if s_min <= RANK_TOL * s_max {
        return Err(Error::RankDeficient("marginal"));
    }
    Ok(basis)
}

fn orthonormalize_columns(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        for prev in 0..j {
            let proj = m.column(prev).dot(&m.column(j));
            let p = m.column(prev).clone_owned();
            let mut col = m.column_mut(j);
            col.axpy(-proj, &p, 1.0);
        }
        let norm = m.column(j).norm();
        assert!(norm > 1e-12, "degenerate constraint directions");
        m.column_mut(j).scale_mut(1.0 / norm);
    }
}

/// Values (or a derivative) of all B-spline basis functions at one point.
///
/// Cox-de Boor recursion over the full knot vector; derivatives are obtained
/// by evaluating at a lower order and applying the derivative lift `deriv`
/// times. Terms with zero-width knot spans are dropped.
fn bspline_all(knots: &[f64], order: usize, x: f64, deriv: usize) -> Vec<f64> {
    assert!(deriv < order);
    let len = knots.len();
    let n_base = len - 1;

    // Indicator functions of order 1; the last nonempty span is closed on the
    // right so the endpoint evaluates correctly.
    let last_span = (0..n_base)
        .rev()
        .find(|&i| knots[i] < knots[i + 1])
        .expect("knot vector has no nonempty span");
    let mut vals: Vec<f64> = (0..n_base)
        .map(|i| {
            let inside = x >= knots[i] && x < knots[i + 1];
            let at_end = i == last_span && (x - knots[i + 1]).abs() < 1e-14;
            if inside || at_end {
                1.0
            } else {
                0.0
            }
        })
        .collect();

    let value_order = order - deriv;
    for q in 2..=value_order {
        let n_q = len - q;
        for i in 0..n_q {
            let d1 = knots[i + q - 1] - knots[i];
            let d2 = knots[i + q] - knots[i + 1];
            let a = if d1 > 0.0 {
                (x - knots[i]) / d1 * vals[i]
            } else {
                0.0
            };
            let b = if d2 > 0.0 {
                (knots[i + q] - x) / d2 * vals[i + 1]
            } else {
                0.0
            };
            vals[i] = a + b;
        }
        vals.truncate(n_q);
    }
    for q in value_order..order {
        let n_next = len - q - 1;
        for i in 0..n_next {
            let d1 = knots[i + q] - knots[i];
            let d2 = knots[i + q + 1] - knots[i + 1];
            let a = if d1 > 0.0 { vals[i] / d1 } else { 0.0 };
            let b = if d2 > 0.0 { vals[i + 1] / d2 } else { 0.0 };
            vals[i] = q as f64 * (a - b);
        }
        vals.truncate(n_next);
    }
    vals
}

/// The orthogonalized tensor-product basis.
///
/// `ortho_eval` is the Kronecker product of the SVD-rotated marginal
/// evaluations; its Gram matrix is exactly diagonal with entries `gram_diag`.
#[derive(Debug, Clone)]
pub struct TensorBasis {
    time: MarginalBasis,
    freq: MarginalBasis,
    rot_time: DMatrix<f64>,
    rot_freq: DMatrix<f64>,
    sv_time: DVector<f64>,
    sv_freq: DVector<f64>,
    ortho_eval: DMatrix<f64>,
    gram_diag: DVector<f64>,
}

impl TensorBasis {
    pub fn time(&self) -> &MarginalBasis {
        &self.time
    }

    pub fn freq(&self) -> &MarginalBasis {
        &self.freq
    }

    /// Rotation applied to the time-dimension basis (`V_phi` of its SVD).
    pub fn rot_time(&self) -> &DMatrix<f64> {
        &self.rot_time
    }

    pub fn rot_freq(&self) -> &DMatrix<f64> {
        &self.rot_freq
    }

    /// Singular values of the time-marginal evaluation matrix.
    pub fn sv_time(&self) -> &DVector<f64> {
        &self.sv_time
    }

    pub fn sv_freq(&self) -> &DVector<f64> {
        &self.sv_freq
    }

    /// `(T*F) x K` evaluation matrix of the orthogonalized basis.
    pub fn ortho_eval(&self) -> &DMatrix<f64> {
        &self.ortho_eval
    }

    /// Diagonal of the Gram matrix, all entries positive.
    pub fn gram_diag(&self) -> &DVector<f64> {
        &self.gram_diag
    }

    pub fn k_time(&self) -> usize {
        self.time.k_dim()
    }

    pub fn k_freq(&self) -> usize {
        self.freq.k_dim()
    }

    pub fn k(&self) -> usize {
        self.k_time() * self.k_freq()
    }

    pub fn t_len(&self) -> usize {
        self.time.grid().len()
    }

    pub fn f_len(&self) -> usize {
        self.freq.grid().len()
    }

    /// Rotated time-marginal evaluations, `T x K_T`.
    pub fn rotated_time_eval(&self) -> DMatrix<f64> {
        self.time.eval_matrix() * &self.rot_time
    }

    /// Rotated frequency-marginal evaluations, `F x K_F`.
    pub fn rotated_freq_eval(&self) -> DMatrix<f64> {
        self.freq.eval_matrix() * &self.rot_freq
    }

    /// Coefficients of the least-squares projection of `y` onto the basis.
    ///
    /// Because the Gram matrix is diagonal this is one matrix-vector product
    /// and an elementwise division.
    pub fn project(&self, y: &DVector<f64>) -> Result<DVector<f64>> {
        if y.len() != self.ortho_eval.nrows() {
            return Err(Error::Shape(format!(
                "response length {} does not match grid size {}",
                y.len(),
                self.ortho_eval.nrows()
            )));
        }
        let mut out = self.ortho_eval.transpose() * y;
        for k in 0..out.len() {
            out[k] /= self.gram_diag[k];
        }
        Ok(out)
    }

    /// Evaluate basis coefficients on the grid: `ortho_eval * coef`.
    pub fn reconstruct(&self, coef: &DVector<f64>) -> DVector<f64> {
        &self.ortho_eval * coef
    }
}

/// Combine two marginal bases into the orthogonalized tensor-product basis.
pub fn build_tensor_basis(time: MarginalBasis, freq: MarginalBasis) -> Result<TensorBasis> {
    let (rot_time, sv_time) = rotation_from_svd(time.eval_matrix(), "time")?;
    let (rot_freq, sv_freq) = rotation_from_svd(freq.eval_matrix(), "freq")?;

    let rotated_t = time.eval_matrix() * &rot_time;
    let rotated_f = freq.eval_matrix() * &rot_freq;
    let ortho_eval = rotated_f.kronecker(&rotated_t);

    let k = time.k_dim() * freq.k_dim();
    let mut gram_diag = DVector::zeros(k);
    for kf in 0..freq.k_dim() {
        for kt in 0..time.k_dim() {
            gram_diag[kf * time.k_dim() + kt] =
                sv_freq[kf] * sv_freq[kf] * sv_time[kt] * sv_time[kt];
        }
    }

    Ok(TensorBasis {
        time,
        freq,
        rot_time,
        rot_freq,
        sv_time,
        sv_freq,
        ortho_eval,
        gram_diag,
    })
}

fn rotation_from_svd(
    eval: &DMatrix<f64>,
    dim_name: &'static str,
) -> Result<(DMatrix<f64>, DVector<f64>)> {
    let svd = eval.clone().svd(false, true);
    let sv = svd.singular_values.clone();
    if sv.min() <= RANK_TOL * sv.max() {
        return Err(Error::RankDeficient(dim_name));
    }
    let mut v = svd.v_t.expect("svd requested v_t").transpose();
    canonicalize_degenerate_groups(&mut v, &sv);
    fix_column_signs(&mut v);
    Ok((v, sv))
}

/// Replace the right-singular vectors of each (near-)equal singular-value
/// group by a canonical orthonormal basis of the same subspace.
///
/// Within such a group the SVD is not unique, so without this step the
/// rotation would depend on the factorization backend. The canonical choice
/// is Gram-Schmidt of the identity directions projected into the group
/// subspace, which reduces to the identity when the input is orthonormal.
fn canonicalize_degenerate_groups(v: &mut DMatrix<f64>, sv: &DVector<f64>) {
    let k = v.ncols();
    let s_max = sv.max();
    let mut start = 0;
    while start < k {
        let mut end = start + 1;
        while end < k && (sv[end - 1] - sv[end]).abs() <= 1e-8 * s_max {
            end += 1;
        }
        if end - start > 1 {
            let group = v.columns(start, end - start).clone_owned();
            let proj = &group * group.transpose();
            let mut basis: Vec<DVector<f64>> = Vec::with_capacity(end - start);
            for cand in 0..v.nrows() {
                if basis.len() == end - start {
                    break;
                }
                let mut w = proj.column(cand).clone_owned();
                for b in &basis {
                    let d = b.dot(&w);
                    w.axpy(-d, b, 1.0);
                }
                let norm = w.norm();
                if norm > 1e-8 {
                    basis.push(w / norm);
                }
            }
            assert_eq!(basis.len(), end - start, "degenerate group canonicalization");
            for (offset, b) in basis.iter().enumerate() {
                v.set_column(start + offset, b);
            }
        }
        start = end;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;
    use rand::Rng;
    use rand::SeedableRng;

    fn unit_grid(n: usize) -> Vec<f64> {
        (0..n).map(|i| i as f64 / (n - 1) as f64).collect()
    }

    fn toy_tensor(n: usize, k: usize) -> TensorBasis {
        let t = build_natural_cubic_basis(&unit_grid(n), k).unwrap();
        let f = build_natural_cubic_basis(&unit_grid(n), k).unwrap();
        build_tensor_basis(t, f).unwrap()
    }

    #[test]
    fn dimensions_and_rank_on_default_grid() {
        let b = build_natural_cubic_basis(&unit_grid(50), 6).unwrap();
        assert_eq!(b.eval_matrix().nrows(), 50);
        assert_eq!(b.eval_matrix().ncols(), 6);
        let sv = b.eval_matrix().clone().singular_values();
        assert!(sv.min() > 1e-10 * sv.max());
    }

    #[test]
    fn square_basis_is_full_rank() {
        for k in 4..=8 {
            let b = build_natural_cubic_basis(&unit_grid(k), k).unwrap();
            assert_eq!(b.eval_matrix().nrows(), k);
            let sv = b.eval_matrix().clone().singular_values();
            assert!(sv.min() > 1e-10 * sv.max(), "k = {k}");
        }
    }

    #[test]
    fn linear_functions_are_reproduced() {
        let grid = unit_grid(50);
        let b = build_natural_cubic_basis(&grid, 6).unwrap();
        let target = DVector::from_iterator(50, grid.iter().copied());
        let coef = b
            .eval_matrix()
            .clone()
            .svd(true, true)
            .solve(&target, 1e-12)
            .unwrap();
        let fitted = b.eval_matrix() * coef;
        assert!((fitted - target).amax() < 1e-8);
    }

    #[test]
    fn natural_boundary_second_derivative_vanishes() {
        // Finite-difference oracle on a fine grid in original units.
        let grid: Vec<f64> = (0..60).map(|i| 2.0 + 3.0 * i as f64 / 59.0).collect();
        let b = build_natural_cubic_basis(&grid, 6).unwrap();
        let h = 1e-4 * 3.0;
        let fd_d2 = |xs: &[f64]| -> DMatrix<f64> {
            let lo = b.evaluate(&xs.iter().map(|x| x - h).collect::<Vec<_>>());
            let mid = b.evaluate(xs);
            let hi = b.evaluate(&xs.iter().map(|x| x + h).collect::<Vec<_>>());
            (lo + hi - 2.0 * mid) / (h * h)
        };
        // interior probe points for the max second derivative, plus both ends
        let probes: Vec<f64> = (1..=58).map(|i| 2.0 + 3.0 * i as f64 / 59.0).collect();
        let interior = fd_d2(&probes);
        // one-sided 4-point second differences at the exact endpoints
        // (exact for cubics, so only rounding error remains)
        let ends = [2.0, 5.0];
        let end_rows = {
            let e0 = b.evaluate(&[ends[0], ends[0] + h, ends[0] + 2.0 * h, ends[0] + 3.0 * h]);
            let e1 = b.evaluate(&[ends[1], ends[1] - h, ends[1] - 2.0 * h, ends[1] - 3.0 * h]);
            let one_sided = |m: &DMatrix<f64>, col: usize| {
                (2.0 * m[(0, col)] - 5.0 * m[(1, col)] + 4.0 * m[(2, col)] - m[(3, col)])
                    / (h * h)
            };
            (0..6)
                .map(|c| (one_sided(&e0, c), one_sided(&e1, c)))
                .collect::<Vec<_>>()
        };
        for col in 0..6 {
            let max_d2 = (0..interior.nrows())
                .map(|r| interior[(r, col)].abs())
                .fold(0.0f64, f64::max);
            let (lo, hi) = end_rows[col];
            assert!(lo.abs() <= 1e-6 * max_d2 + 1e-9, "col {col}: {lo} vs {max_d2}");
            assert!(hi.abs() <= 1e-6 * max_d2 + 1e-9, "col {col}: {hi} vs {max_d2}");
        }
    }

    #[test]
    fn rejects_small_dimension_and_bad_grid() {
        assert!(matches!(
            build_natural_cubic_basis(&unit_grid(10), 3),
            Err(Error::InvalidDegree(3))
        ));
        assert!(matches!(
            build_natural_cubic_basis(&[0.0, 0.5, 0.5, 1.0, 2.0], 4),
            Err(Error::InvalidGrid(_))
        ));
        assert!(matches!(
            build_natural_cubic_basis(&[0.0, 1.0, 2.0], 4),
            Err(Error::InvalidGrid(_))
        ));
    }

    #[test]
    fn tensor_basis_dimensions_and_gram() {
        let tb = toy_tensor(50, 6);
        assert_eq!(tb.ortho_eval().nrows(), 2500);
        assert_eq!(tb.ortho_eval().ncols(), 36);
        assert_eq!(tb.gram_diag().len(), 36);
        assert!(tb.gram_diag().iter().all(|&d| d > 0.0));
    }

    #[test]
    fn gram_diag_matches_dense_gram_matrix() {
        // dense-oracle check of the Kronecker shortcut
        let tb = toy_tensor(14, 5);
        let dense = tb.ortho_eval().transpose() * tb.ortho_eval();
        let max_diag = (0..tb.k()).map(|k| dense[(k, k)]).fold(0.0f64, f64::max);
        for k1 in 0..tb.k() {
            for k2 in 0..tb.k() {
                if k1 == k2 {
                    assert_abs_diff_eq!(dense[(k1, k1)], tb.gram_diag()[k1], epsilon = 1e-9);
                } else {
                    assert!(dense[(k1, k2)].abs() < 1e-8 * max_diag);
                }
            }
        }
    }

    #[test]
    fn orthonormal_marginals_give_identity_rotation_and_unit_gram() {
        // build an orthonormal evaluation matrix by QR of a spline basis
        let raw = build_natural_cubic_basis(&unit_grid(30), 5).unwrap();
        let qr = raw.eval_matrix().clone().qr();
        let mut q = qr.q();
        fix_column_signs(&mut q);
        let ortho = MarginalBasis {
            grid: raw.grid.clone(),
            eval: q,
            k_dim: raw.k_dim,
            kind: raw.kind,
            offset: raw.offset,
            scale: raw.scale,
            knots: raw.knots.clone(),
            constraint: raw.constraint.clone(),
        };
        let tb = build_tensor_basis(ortho.clone(), ortho).unwrap();
        for j in 0..5 {
            for i in 0..5 {
                let expect = if i == j { 1.0 } else { 0.0 };
                assert_abs_diff_eq!(tb.rot_time()[(i, j)].abs(), expect, epsilon = 1e-9);
            }
        }
        for k in 0..tb.k() {
            assert_abs_diff_eq!(tb.gram_diag()[k], 1.0, epsilon = 1e-9);
        }
    }

    #[test]
    fn projection_is_left_inverse_on_column_space() {
        let tb = toy_tensor(12, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(1);
        let beta = DVector::from_fn(tb.k(), |_, _| rng.random_range(-2.0..2.0));
        let y = tb.reconstruct(&beta);
        let back = tb.project(&y).unwrap();
        assert!((back - beta).amax() < 1e-10);
    }

    #[test]
    fn projection_of_zero_is_zero() {
        let tb = toy_tensor(10, 4);
        let y = DVector::zeros(100);
        assert_eq!(tb.project(&y).unwrap().amax(), 0.0);
    }

    #[test]
    fn projection_rejects_wrong_length() {
        let tb = toy_tensor(10, 4);
        assert!(matches!(
            tb.project(&DVector::zeros(99)),
            Err(Error::Shape(_))
        ));
    }

    #[test]
    fn likelihood_equivalence_identity() {
        // || y - O b ||^2 = || y - O yhat ||^2 + || sqrt(D)(yhat - b) ||^2
        let tb = toy_tensor(9, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(2);
        let y = DVector::from_fn(81, |_, _| rng.random_range(-1.0..1.0));
        let beta = DVector::from_fn(tb.k(), |_, _| rng.random_range(-1.0..1.0));
        let yt = tb.project(&y).unwrap();
        let lhs = (&y - tb.reconstruct(&beta)).norm_squared();
        let fit = (&y - tb.reconstruct(&yt)).norm_squared();
        let quad: f64 = (0..tb.k())
            .map(|k| tb.gram_diag()[k] * (yt[k] - beta[k]).powi(2))
            .sum();
        assert_abs_diff_eq!(lhs, fit + quad, epsilon = 1e-8 * lhs.max(1.0));
    }

    #[test]
    fn reparametrization_round_trip() {
        // O_tilde (V_psi x V_phi)^T a  ==  (psi x phi) a
        let t = build_natural_cubic_basis(&unit_grid(11), 4).unwrap();
        let f = build_natural_cubic_basis(&unit_grid(13), 5).unwrap();
        let plain = f.eval_matrix().kronecker(t.eval_matrix());
        let tb = build_tensor_basis(t, f).unwrap();
        let rot = tb.rot_freq().kronecker(tb.rot_time());
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let a = DVector::from_fn(tb.k(), |_, _| rng.random_range(-1.0..1.0));
        let lhs = tb.reconstruct(&(rot.transpose() * &a));
        let rhs = plain * a;
        assert!((lhs - rhs).amax() < 1e-9);
    }

    #[test]
    fn projection_is_idempotent() {
        let tb = toy_tensor(10, 4);
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let y = DVector::from_fn(100, |_, _| rng.random_range(-3.0..3.0));
        let p1 = tb.project(&y).unwrap();
        let p2 = tb.project(&tb.reconstruct(&p1)).unwrap();
        assert!((p2 - p1).amax() < 1e-10);
    }
}

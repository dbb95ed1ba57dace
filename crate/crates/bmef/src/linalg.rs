//! Small dense linear-algebra helpers shared across modules.

use nalgebra::{DMatrix, DVector};

/// Flip each column so its largest-magnitude entry is positive.
///
/// Used wherever a subspace basis is unique only up to column signs (SVD
/// rotations, orthogonal complements), to keep runs bit-reproducible.
pub fn fix_column_signs(m: &mut DMatrix<f64>) {
    for j in 0..m.ncols() {
        let mut best = 0usize;
        let mut best_abs = 0.0;
        for i in 0..m.nrows() {
            let a = m[(i, j)].abs();
            if a > best_abs {
                best_abs = a;
                best = i;
            }
        }
        if m[(best, j)] < 0.0 {
            for i in 0..m.nrows() {
                m[(i, j)] = -m[(i, j)];
            }
        }
    }
}

/// Orthonormal basis of the orthogonal complement of `span(cols)` in R^dim.
///
/// `cols` must already have orthonormal columns (possibly zero of them).
/// Candidate directions are the canonical unit vectors taken in order, each
/// projected against everything accepted so far; near-dependent candidates are
/// skipped. Deterministic, with the column-sign convention applied.
pub fn orthonormal_complement(cols: &DMatrix<f64>, dim: usize) -> DMatrix<f64> {
    let existing = cols.ncols();
    assert!(cols.nrows() == dim || existing == 0, "dimension mismatch");
    let target = dim - existing;
    let mut basis: Vec<DVector<f64>> = Vec::with_capacity(target);
    for k in 0..dim {
        if basis.len() == target {
            break;
        }
        let mut v = DVector::zeros(dim);
        v[k] = 1.0;
        // two rounds of Gram-Schmidt for numerical safety
        for _ in 0..2 {
            for j in 0..existing {
                let col = cols.column(j);
                let proj = col.dot(&v);
                v.axpy(-proj, &col.clone_owned(), 1.0);
            }
            for b in &basis {
                let proj = b.dot(&v);
                v.axpy(-proj, b, 1.0);
            }
        }
        let norm = v.norm();
        if norm > 1e-8 {
            basis.push(v / norm);
        }
    }
    assert_eq!(basis.len(), target, "complement construction fell short");
    let mut out = DMatrix::from_fn(dim, target, |i, j| basis[j][i]);
    fix_column_signs(&mut out);
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn complement_of_empty_is_identity_up_to_order() {
        let empty = DMatrix::<f64>::zeros(4, 0);
        let c = orthonormal_complement(&empty, 4);
        assert_eq!(c.ncols(), 4);
        let g = c.transpose() * &c;
        assert!((g - DMatrix::identity(4, 4)).amax() < 1e-12);
    }

    #[test]
    fn complement_is_orthogonal_to_input() {
        let mut cols = DMatrix::from_column_slice(3, 1, &[1.0, 2.0, 2.0]);
        let n = cols.column(0).norm();
        cols /= n;
        let c = orthonormal_complement(&cols, 3);
        assert_eq!(c.ncols(), 2);
        assert!((cols.transpose() * &c).amax() < 1e-12);
        assert!((c.transpose() * &c - DMatrix::identity(2, 2)).amax() < 1e-12);
    }
}

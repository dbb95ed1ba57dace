//! Structured inverse of the per-subject marginal covariance.
//!
//! Stacking a subject's observed conditions gives covariance
//! `sigma_gamma^2 * ones * ones' + Lambda` with
//! `Lambda = diag(sigma_omega_i^2 + sigma_eps^2 / d_l)` repeated over
//! conditions. The inverse is one Sherman-Morrison step on the diagonal part,
//! so applying it costs `O(J_i K)` instead of the dense `O((J_i K)^2)`.

use nalgebra::DVector;

/// Cached pieces of one subject's inverse covariance.
#[derive(Debug, Clone)]
pub struct SubjectPrecision {
    /// Reciprocal diagonal `1 / (sigma_omega^2 + sigma_eps^2 / d_l)`, length K.
    a: DVector<f64>,
    shrink: f64,
    j_count: usize,
}

impl SubjectPrecision {
    /// `sigma_gamma2` and `sigma_omega2` enter as zero when the corresponding
    /// random-effect level is absent from the model.
    pub fn new(
        sigma_gamma2: f64,
        sigma_omega2: f64,
        sigma_eps2: f64,
        gram_diag: &DVector<f64>,
        j_count: usize,
    ) -> Self {
        let a = gram_diag.map(|d| 1.0 / (sigma_omega2 + sigma_eps2 / d));
        let total: f64 = j_count as f64 * a.sum();
        let shrink = if sigma_gamma2 > 0.0 {
            sigma_gamma2 / (1.0 + sigma_gamma2 * total)
        } else {
            0.0
        };
        SubjectPrecision { a, shrink, j_count }
    }

    pub fn k(&self) -> usize {
        self.a.len()
    }

    pub fn j_count(&self) -> usize {
        self.j_count
    }

    /// Reciprocal diagonal of the within-condition block.
    pub fn a(&self) -> &DVector<f64> {
        &self.a
    }

    /// Sherman-Morrison coefficient of the rank-one correction.
    pub fn shrink(&self) -> f64 {
        self.shrink
    }

    /// `Sigma_i^{-1} x` for a stacked vector of length `j_count * K`.
    pub fn apply(&self, x: &DVector<f64>) -> DVector<f64> {
        let k = self.k();
        assert_eq!(x.len(), self.j_count * k);
        let mut out = DVector::zeros(x.len());
        let mut s = 0.0;
        for b in 0..self.j_count {
            for l in 0..k {
                s += self.a[l] * x[b * k + l];
            }
        }
        for b in 0..self.j_count {
            for l in 0..k {
                out[b * k + l] = self.a[l] * (x[b * k + l] - self.shrink * s);
            }
        }
        out
    }

    /// Quadratic form `w' B w` of a single diagonal block
    /// `B = diag(a) - shrink * a a'`.
    pub fn block_quad_form(&self, w: &DVector<f64>) -> f64 {
        let mut direct = 0.0;
        let mut weighted = 0.0;
        for l in 0..self.k() {
            direct += self.a[l] * w[l] * w[l];
            weighted += self.a[l] * w[l];
        }
        direct - self.shrink * weighted * weighted
    }
}

//! Dense symmetric linear algebra shared by the Fisher, relaxation and
//! rounding modules.

use nalgebra::{DMatrix, DVector};

use crate::error::{FiralError, Result};

/// Relative eigenvalue floor used before inverting or taking inverse roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Symmetric eigendecomposition with eigenvalues sorted ascending.
#[derive(Debug, Clone)]
pub struct SymEigen {
    pub values: DVector<f64>,
    pub vectors: DMatrix<f64>,
}

impl SymEigen {
    pub fn new(a: &DMatrix<f64>) -> Self {
        let n = a.nrows();
        let eig = symmetrize(a).symmetric_eigen();
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| eig.eigenvalues[i].total_cmp(&eig.eigenvalues[j]));
        let values = DVector::from_iterator(n, order.iter().map(|&i| eig.eigenvalues[i]));
        let mut vectors = DMatrix::zeros(n, n);
        for (dst, &src) in order.iter().enumerate() {
            vectors.set_column(dst, &eig.eigenvectors.column(src));
        }
        SymEigen { values, vectors }
    }

    pub fn min(&self) -> f64 {
        self.values[0]
    }

    pub fn max(&self) -> f64 {
        self.values[self.values.len() - 1]
    }

    /// Rebuilds `V f(Λ) Vᵀ`.
    pub fn map(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let mut scaled = self.vectors.clone();
        for (j, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            scaled.column_mut(j).scale_mut(s);
        }
        symmetrize(&(scaled * self.vectors.transpose()))
    }

    /// Values below `EIGEN_FLOOR * λmax` are lifted to that floor.
    /// Returns the number of lifted eigenvalues.
    pub fn floor_relative(&mut self) -> usize {
        let top = self.max().max(0.0);
        let floor = EIGEN_FLOOR * top;
        let mut lifted = 0;
        for v in self.values.iter_mut() {
            if *v < floor {
                *v = floor;
                lifted += 1;
            }
        }
        lifted
    }
}

pub fn symmetrize(a: &DMatrix<f64>) -> DMatrix<f64> {
    (a + a.transpose()) * 0.5
}

/// Frobenius inner product `⟨A, B⟩ = Tr(AᵀB)`.
pub fn inner(a: &DMatrix<f64>, b: &DMatrix<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| x * y).sum()
}

/// `target += w · P Pᵀ`.
pub fn add_gram(target: &mut DMatrix<f64>, w: f64, p: &DMatrix<f64>) {
    target.gemm(w, p, &p.transpose(), 1.0);
}

pub fn kron(a: &DMatrix<f64>, b: &DMatrix<f64>) -> DMatrix<f64> {
    a.kronecker(b)
}

/// Inverse of a symmetric positive definite matrix through Cholesky.
pub fn spd_inverse(a: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let chol = symmetrize(a)
        .cholesky()
        .ok_or_else(|| FiralError::Singular(context.to_string()))?;
    Ok(symmetrize(&chol.inverse()))
}

/// Checks `λmin > EIGEN_FLOOR · λmax` and returns the decomposition.
pub fn require_pd(a: &DMatrix<f64>, context: &str) -> Result<SymEigen> {
    let eig = SymEigen::new(a);
    if !eig.values.iter().all(|v| v.is_finite()) {
        return Err(FiralError::NonFinite(context.to_string()));
    }
    if eig.max() <= 0.0 || eig.min() <= EIGEN_FLOOR * eig.max() {
        return Err(FiralError::Singular(format!(
            "{context}: eigenvalue range [{:.3e}, {:.3e}]",
            eig.min(),
            eig.max()
        )));
    }
    Ok(eig)
}

/// `A^{-1/2}` with relative eigenvalue flooring; also returns the clamp count.
pub fn inv_sqrt_floored(a: &DMatrix<f64>) -> (DMatrix<f64>, usize) {
    let mut eig = SymEigen::new(a);
    let lifted = eig.floor_relative();
    (eig.map(|v| 1.0 / v.sqrt()), lifted)
}

/// Principal square root of a PSD matrix (negative rounding noise is zeroed).
pub fn sqrt_psd(a: &DMatrix<f64>) -> DMatrix<f64> {
    SymEigen::new(a).map(|v| v.max(0.0).sqrt())
}

pub fn lambda_min(a: &DMatrix<f64>) -> f64 {
    SymEigen::new(a).min()
}

pub fn lambda_max(a: &DMatrix<f64>) -> f64 {
    SymEigen::new(a).max()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn eigen_sorted_and_reconstructs() {
        let a = DMatrix::from_row_slice(3, 3, &[4.0, 1.0, 0.5, 1.0, 3.0, 0.2, 0.5, 0.2, 1.0]);
        let eig = SymEigen::new(&a);
        assert!(eig.values[0] <= eig.values[1] && eig.values[1] <= eig.values[2]);
        let back = eig.map(|v| v);
        assert!((back - &a).abs().max() < 1e-12);
    }

    #[test]
    fn inverse_roots_agree() {
        let a = DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 1.0]);
        let (r, lifted) = inv_sqrt_floored(&a);
        assert_eq!(lifted, 0);
        let inv = spd_inverse(&a, "test").unwrap();
        assert!((&r * &r - inv).abs().max() < 1e-12);
        let s = sqrt_psd(&a);
        assert!((&s * &s - &a).abs().max() < 1e-12);
    }

    #[test]
    fn floor_flags_singular() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 1.0, 1.0, 1.0]);
        assert!(require_pd(&a, "rank one").is_err());
        let (_, lifted) = inv_sqrt_floored(&a);
        assert_eq!(lifted, 1);
    }
}

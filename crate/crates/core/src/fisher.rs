//! Fisher information aggregation and the FIR objective.
//!
//! Every shifted point Fisher matrix is kept as `H(x_i) = D + P_i P_iᵀ`, where
//! `D` is the labeled-set shift and `P_i = Q_i ⊗ x_i` is a `d̃ × (c-1)` factor
//! built from the eigendecomposition `V Λ Vᵀ` of `diag(h) - h hᵀ` with
//! `Q_i = V Λ^{1/2}`. Dense `d̃ × d̃` point matrices are only materialized on
//! request.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, FiralError, Result};
use crate::linalg::{add_gram, inner, inv_sqrt_floored, require_pd, spd_inverse, symmetrize, SymEigen};
use crate::model::{class_covariance, h_vector, point_fisher, Pool, Theta};
use crate::relax::Weights;

/// Average Fisher information of a sample, e.g. `H_p(θ)` or `H_q(θ)`.
#[derive(Debug, Clone, PartialEq)]
pub struct PoolHessian {
    pub matrix: DMatrix<f64>,
    pub sample_count: usize,
}

impl PoolHessian {
    pub fn new(matrix: DMatrix<f64>, sample_count: usize) -> Self {
        PoolHessian {
            matrix: symmetrize(&matrix),
            sample_count,
        }
    }

    pub fn d_tilde(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn scaled(&self, factor: f64) -> Self {
        PoolHessian::new(&self.matrix * factor, self.sample_count)
    }
}

/// Adds `weight · [diag(h) - h hᵀ] ⊗ x xᵀ` to `target` block by block.
pub(crate) fn accumulate_point_fisher(target: &mut DMatrix<f64>, class_cov: &DMatrix<f64>, x: &DVector<f64>, weight: f64) {
    let d = x.len();
    let cm1 = class_cov.nrows();
    for k in 0..cm1 {
        for l in 0..cm1 {
            let a = weight * class_cov[(k, l)];
            if a != 0.0 {
                target.view_mut((k * d, l * d), (d, d)).ger(a, x, x, 1.0);
            }
        }
    }
}

/// Sum of point Fisher matrices over `points`, unnormalized.
pub fn fisher_sum(points: &[DVector<f64>], theta: &Theta) -> Result<DMatrix<f64>> {
    let dt = theta.d_tilde();
    let mut acc = DMatrix::zeros(dt, dt);
    for x in points {
        let h = h_vector(x, theta)?;
        accumulate_point_fisher(&mut acc, &class_covariance(&h), x, 1.0);
    }
    Ok(symmetrize(&acc))
}

/// `(1/m) Σ_i H(x_i, θ)` over the pool.
pub fn pool_hessian(pool: &Pool, theta: &Theta) -> Result<PoolHessian> {
    check_dim("pool vs theta", theta.dim(), pool.dim())?;
    let sum = fisher_sum(pool.points(), theta)?;
    Ok(PoolHessian::new(sum / pool.len() as f64, pool.len()))
}

/// `(1/b) Σ_{x' ∈ X₀} H(x', θ₀)`: the labeled-set contribution spread over a
/// batch of `budget` new points. Zero when nothing is labeled yet.
pub fn labeled_shift(labeled: &[DVector<f64>], theta0: &Theta, budget: usize) -> Result<DMatrix<f64>> {
    if budget == 0 {
        return Err(FiralError::InvalidInput("budget must be >= 1".into()));
    }
    Ok(fisher_sum(labeled, theta0)? / budget as f64)
}

/// `H(x_i) = H(x_i, θ₀) + shift`, densely.
pub fn shifted_fisher(x: &DVector<f64>, theta0: &Theta, shift: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let dt = theta0.d_tilde();
    check_dim("labeled shift rows", dt, shift.nrows())?;
    check_dim("labeled shift cols", dt, shift.ncols())?;
    Ok(point_fisher(x, theta0)? + shift)
}

/// `Q ⊗ x` with `Q = V Λ^{1/2}` from `diag(h) - h hᵀ`; shape `d̃ × (c-1)`.
pub fn point_factor(x: &DVector<f64>, theta: &Theta) -> Result<DMatrix<f64>> {
    let h = h_vector(x, theta)?;
    let cm1 = h.len();
    let q = if cm1 == 1 {
        DMatrix::from_element(1, 1, (h[0] * (1.0 - h[0])).max(0.0).sqrt())
    } else {
        let eig = SymEigen::new(&class_covariance(&h));
        let mut q = eig.vectors.clone();
        for j in 0..cm1 {
            q.column_mut(j).scale_mut(eig.values[j].max(0.0).sqrt());
        }
        q
    };
    let xm = DMatrix::from_column_slice(x.len(), 1, x.as_slice());
    Ok(q.kronecker(&xm))
}

/// Factored shifted Fisher matrices `H(x_i) = D + P_i P_iᵀ` for a candidate set.
#[derive(Debug, Clone)]
pub struct FisherSet {
    shift: DMatrix<f64>,
    factors: Vec<DMatrix<f64>>,
    d_tilde: usize,
}

impl FisherSet {
    pub fn new(pool: &Pool, theta0: &Theta, shift: DMatrix<f64>) -> Result<Self> {
        check_dim("pool vs theta", theta0.dim(), pool.dim())?;
        let dt = theta0.d_tilde();
        check_dim("labeled shift", dt, shift.nrows())?;
        let factors = pool
            .points()
            .iter()
            .map(|x| point_factor(x, theta0))
            .collect::<Result<Vec<_>>>()?;
        Ok(FisherSet {
            shift: symmetrize(&shift),
            factors,
            d_tilde: dt,
        })
    }

    /// Builds a set directly from factors; used for synthetic PSD instances.
    pub fn from_factors(shift: DMatrix<f64>, factors: Vec<DMatrix<f64>>) -> Result<Self> {
        let dt = shift.nrows();
        check_dim("shift cols", dt, shift.ncols())?;
        if factors.is_empty() {
            return Err(FiralError::InvalidInput("empty Fisher set".into()));
        }
        for p in &factors {
            check_dim("factor rows", dt, p.nrows())?;
        }
        Ok(FisherSet {
            shift: symmetrize(&shift),
            factors,
            d_tilde: dt,
        })
    }

    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn d_tilde(&self) -> usize {
        self.d_tilde
    }

    pub fn shift(&self) -> &DMatrix<f64> {
        &self.shift
    }

    pub fn factor(&self, i: usize) -> &DMatrix<f64> {
        &self.factors[i]
    }

    pub fn factors(&self) -> &[DMatrix<f64>] {
        &self.factors
    }

    /// Dense `H(x_i)`.
    pub fn dense(&self, i: usize) -> DMatrix<f64> {
        let p = &self.factors[i];
        symmetrize(&(&self.shift + p * p.transpose()))
    }

    /// `Σ(z) = Σ_i z_i H(x_i)`.
    pub fn aggregate(&self, z: &[f64]) -> Result<DMatrix<f64>> {
        check_dim("weights", self.len(), z.len())?;
        let total: f64 = z.iter().sum();
        let mut sigma = &self.shift * total;
        for (p, &w) in self.factors.iter().zip(z) {
            if w != 0.0 {
                add_gram(&mut sigma, w, p);
            }
        }
        Ok(symmetrize(&sigma))
    }

    /// `Σ` of an index multiset; repeated indices count repeatedly.
    pub fn aggregate_indices(&self, indices: &[usize]) -> Result<DMatrix<f64>> {
        let mut z = vec![0.0; self.len()];
        for &i in indices {
            if i >= self.len() {
                return Err(FiralError::InvalidInput(format!("index {i} out of range")));
            }
            z[i] += 1.0;
        }
        self.aggregate(&z)
    }

    /// `⟨H(x_i), M⟩` for every point, for symmetric `M`.
    pub fn inner_all(&self, m: &DMatrix<f64>) -> Vec<f64> {
        let base = inner(&self.shift, m);
        self.factors
            .iter()
            .map(|p| {
                let mp = m * p;
                base + p.iter().zip(mp.iter()).map(|(a, b)| a * b).sum::<f64>()
            })
            .collect()
    }
}

/// `Tr(H_q⁻¹ H_p)` through a Cholesky factorization.
pub fn fir(hq: &PoolHessian, hp: &PoolHessian) -> Result<f64> {
    check_dim("FIR operands", hq.d_tilde(), hp.d_tilde())?;
    require_pd(&hq.matrix, "H_q in FIR")?;
    f_objective(&hq.matrix, &hp.matrix)
}

/// `f(Σ) = ⟨Σ⁻¹, H_p⟩`.
pub fn f_objective(sigma: &DMatrix<f64>, hp: &DMatrix<f64>) -> Result<f64> {
    check_dim("objective operands", sigma.nrows(), hp.nrows())?;
    let chol = symmetrize(sigma)
        .cholesky()
        .ok_or_else(|| FiralError::Singular("selection aggregate Σ".into()))?;
    let x = chol.solve(hp);
    let value = x.trace();
    if !value.is_finite() {
        return Err(FiralError::NonFinite("objective value".into()));
    }
    Ok(value)
}

/// `f(Σ(z))` for relaxed weights.
pub fn f_weights(z: &[f64], fishers: &FisherSet, hp: &PoolHessian) -> Result<f64> {
    f_objective(&fishers.aggregate(z)?, &hp.matrix)
}

/// `f` of a point selection (0/1 indicator, or counts if repeated).
pub fn f_indices(indices: &[usize], fishers: &FisherSet, hp: &PoolHessian) -> Result<f64> {
    f_objective(&fishers.aggregate_indices(indices)?, &hp.matrix)
}

/// `λmax(H_q^{-1/2} H_p H_q^{-1/2})`, the smallest σ with `H_p ⪯ σ H_q`.
pub fn sigma_max(hq: &PoolHessian, hp: &PoolHessian) -> Result<f64> {
    check_dim("sigma operands", hq.d_tilde(), hp.d_tilde())?;
    let eig = require_pd(&hq.matrix, "H_q in sigma")?;
    let r = eig.map(|v| 1.0 / v.sqrt());
    Ok(SymEigen::new(&(&r * &hp.matrix * &r)).max())
}

/// Fisher factors whitened by the relaxed solution: `H̃(x_i) = D̃ + P̃_i P̃_iᵀ`
/// with `Σ_i z_i H̃(x_i) = I`.
#[derive(Debug, Clone)]
pub struct WhitenedFactors {
    pub shift: DMatrix<f64>,
    pub factors: Vec<DMatrix<f64>>,
    pub sigma_inv_sqrt: DMatrix<f64>,
    /// Eigenvalues of `Σ_⋄` lifted to the relative floor before inversion.
    pub clamped: usize,
}

impl WhitenedFactors {
    pub fn len(&self) -> usize {
        self.factors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.factors.is_empty()
    }

    pub fn d_tilde(&self) -> usize {
        self.shift.nrows()
    }

    pub fn rank(&self) -> usize {
        self.factors.first().map(|p| p.ncols()).unwrap_or(0)
    }

    /// Dense `H̃(x_i)`.
    pub fn dense(&self, i: usize) -> DMatrix<f64> {
        let p = &self.factors[i];
        symmetrize(&(&self.shift + p * p.transpose()))
    }

    /// `Σ_t H̃(x_{i_t})` over an index multiset.
    pub fn sum_indices(&self, indices: &[usize]) -> DMatrix<f64> {
        let mut acc = &self.shift * indices.len() as f64;
        for &i in indices {
            let p = &self.factors[i];
            add_gram(&mut acc, 1.0, p);
        }
        symmetrize(&acc)
    }
}

/// Whitens every factor by `Σ_⋄^{-1/2}` where `Σ_⋄ = Σ_i z_⋄,i H(x_i)`.
pub fn whiten_factors(weights: &Weights, fishers: &FisherSet) -> Result<WhitenedFactors> {
    let sigma = fishers.aggregate(weights.as_slice())?;
    let eig = SymEigen::new(&sigma);
    if !(eig.max() > 0.0) {
        return Err(FiralError::Singular("relaxed aggregate Σ_⋄ is zero".into()));
    }
    let (r, clamped) = inv_sqrt_floored(&sigma);
    let shift = symmetrize(&(&r * fishers.shift() * &r));
    let factors = fishers.factors().iter().map(|p| &r * p).collect();
    Ok(WhitenedFactors {
        shift,
        factors,
        sigma_inv_sqrt: r,
        clamped,
    })
}

/// Dense inverse helper kept for oracle-style checks in downstream tests.
pub fn dense_fir(hq: &DMatrix<f64>, hp: &DMatrix<f64>) -> Result<f64> {
    Ok((spd_inverse(hq, "H_q")? * hp).trace())
}

//! Multinomial logistic regression with a reference class.
//!
//! Parameters are a `(c-1) × d` matrix; class `c-1` (zero-based) is the
//! reference class whose logit is pinned to zero. Whenever the parameters are
//! flattened they are stacked row by row, so the Hessian of a single point is
//! `[diag(h) - h hᵀ] ⊗ x xᵀ` with blocks indexed by class pairs.
//!
//! Labels are zero-based throughout the library; the CSV layer converts from
//! the one-based labels used on disk.

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, FiralError, Result};
use crate::linalg::{spd_inverse, symmetrize};

/// Probabilities are floored here before taking logarithms.
pub const PROB_FLOOR: f64 = 1e-300;

#[derive(Debug, Clone, PartialEq)]
pub struct LabeledExample {
    pub x: DVector<f64>,
    /// Zero-based class index in `0..c`.
    pub y: usize,
}

impl LabeledExample {
    pub fn new(x: DVector<f64>, y: usize) -> Self {
        LabeledExample { x, y }
    }
}

/// Unlabeled points sharing one dimension.
#[derive(Debug, Clone, PartialEq)]
pub struct Pool {
    points: Vec<DVector<f64>>,
    dim: usize,
}

impl Pool {
    pub fn new(points: Vec<DVector<f64>>) -> Result<Self> {
        let first = points
            .first()
            .ok_or_else(|| FiralError::InvalidInput("pool must contain at least one point".into()))?;
        let dim = first.len();
        if dim == 0 {
            return Err(FiralError::InvalidInput("points must have dimension >= 1".into()));
        }
        for p in &points {
            check_dim("pool point", dim, p.len())?;
        }
        Ok(Pool { points, dim })
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn points(&self) -> &[DVector<f64>] {
        &self.points
    }

    pub fn point(&self, i: usize) -> &DVector<f64> {
        &self.points[i]
    }

    /// Sub-pool with the given indices, in that order.
    pub fn subset(&self, indices: &[usize]) -> Result<Pool> {
        Pool::new(indices.iter().map(|&i| self.points[i].clone()).collect())
    }
}

/// Classifier parameters, one row per non-reference class.
#[derive(Debug, Clone, PartialEq)]
pub struct Theta {
    rows: DMatrix<f64>,
}

impl Theta {
    pub fn zeros(classes: usize, dim: usize) -> Self {
        assert!(classes >= 2, "need at least two classes");
        Theta {
            rows: DMatrix::zeros(classes - 1, dim),
        }
    }

    /// `rows` must be `(c-1) × d` with `c >= 2`.
    pub fn from_matrix(rows: DMatrix<f64>) -> Result<Self> {
        if rows.nrows() == 0 || rows.ncols() == 0 {
            return Err(FiralError::InvalidInput("theta needs c >= 2 and d >= 1".into()));
        }
        Ok(Theta { rows })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let d = rows.first().map(|r| r.len()).unwrap_or(0);
        for r in rows {
            check_dim("theta row", d, r.len())?;
        }
        let flat: Vec<f64> = rows.iter().flat_map(|r| r.iter().copied()).collect();
        Theta::from_matrix(DMatrix::from_row_slice(rows.len(), d, &flat))
    }

    /// Inverse of [`Theta::to_flat`].
    pub fn from_flat(classes: usize, dim: usize, flat: &DVector<f64>) -> Result<Self> {
        check_dim("flattened theta", (classes - 1) * dim, flat.len())?;
        Theta::from_matrix(DMatrix::from_row_slice(classes - 1, dim, flat.as_slice()))
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.rows
    }

    pub fn class_count(&self) -> usize {
        self.rows.nrows() + 1
    }

    pub fn dim(&self) -> usize {
        self.rows.ncols()
    }

    /// `d(c-1)`, the side length of every Fisher matrix.
    pub fn d_tilde(&self) -> usize {
        self.rows.len()
    }

    /// Row-stacked vectorization.
    pub fn to_flat(&self) -> DVector<f64> {
        DVector::from_iterator(
            self.rows.len(),
            (0..self.rows.nrows()).flat_map(|k| (0..self.rows.ncols()).map(move |j| self.rows[(k, j)])),
        )
    }

    pub fn norm(&self) -> f64 {
        self.rows.norm()
    }
}

fn logits(x: &DVector<f64>, theta: &Theta) -> Result<DVector<f64>> {
    check_dim("feature vector", theta.dim(), x.len())?;
    let c = theta.class_count();
    let mut z = DVector::zeros(c);
    let lin = theta.matrix() * x;
    z.rows_mut(0, c - 1).copy_from(&lin);
    Ok(z)
}

/// Log-probabilities of all `c` classes.
pub fn log_proba(x: &DVector<f64>, theta: &Theta) -> Result<DVector<f64>> {
    let z = logits(x, theta)?;
    let top = z.max();
    let lse = top + z.iter().map(|v| (v - top).exp()).sum::<f64>().ln();
    Ok(z.map(|v| v - lse))
}

/// `p(y | x, θ)` for every class, computed with max-logit subtraction.
pub fn predict_proba(x: &DVector<f64>, theta: &Theta) -> Result<DVector<f64>> {
    let z = logits(x, theta)?;
    let top = z.max();
    let mut p = z.map(|v| (v - top).exp());
    let s = p.sum();
    p /= s;
    Ok(p)
}

/// The first `c-1` class probabilities, written `h(x, θ)` throughout.
pub fn h_vector(x: &DVector<f64>, theta: &Theta) -> Result<DVector<f64>> {
    let p = predict_proba(x, theta)?;
    Ok(p.rows(0, theta.class_count() - 1).into_owned())
}

fn check_label(y: usize, theta: &Theta) -> Result<()> {
    if y >= theta.class_count() {
        return Err(FiralError::InvalidInput(format!(
            "label {y} out of range for {} classes",
            theta.class_count()
        )));
    }
    Ok(())
}

/// Negative log-likelihood `-log p(y | x, θ)`.
pub fn nll_loss(x: &DVector<f64>, y: usize, theta: &Theta) -> Result<f64> {
    check_label(y, theta)?;
    let lp = log_proba(x, theta)?;
    Ok(-lp[y].max(PROB_FLOOR.ln()))
}

/// Gradient of the loss, shaped like θ: row `i` is `(h_i - 1{y = i}) xᵀ`.
pub fn loss_gradient(x: &DVector<f64>, y: usize, theta: &Theta) -> Result<DMatrix<f64>> {
    check_label(y, theta)?;
    let mut beta = h_vector(x, theta)?;
    if y < beta.len() {
        beta[y] -= 1.0;
    }
    Ok(&beta * x.transpose())
}

/// `diag(h) - h hᵀ`, the class-space factor of the point Fisher matrix.
pub fn class_covariance(h: &DVector<f64>) -> DMatrix<f64> {
    let mut a = -(h * h.transpose());
    for k in 0..h.len() {
        a[(k, k)] += h[k];
    }
    a
}

/// Point Fisher information `[diag(h) - h hᵀ] ⊗ x xᵀ`. Label independent.
pub fn point_fisher(x: &DVector<f64>, theta: &Theta) -> Result<DMatrix<f64>> {
    let h = h_vector(x, theta)?;
    Ok(symmetrize(&class_covariance(&h).kronecker(&(x * x.transpose()))))
}

#[derive(Debug, Clone, Copy)]
pub struct ErmOptions {
    pub ridge: f64,
    pub tol: f64,
    pub max_iter: usize,
}

impl Default for ErmOptions {
    fn default() -> Self {
        ErmOptions {
            ridge: 1e-8,
            tol: 1e-8,
            max_iter: 100,
        }
    }
}

#[derive(Debug, Clone)]
pub struct ErmFit {
    pub theta: Theta,
    pub iterations: usize,
    /// False when `max_iter` ran out or the line search stalled first.
    pub converged: bool,
    /// Sup-norm of the regularized gradient at `theta`.
    pub grad_norm: f64,
    /// Regularized objective after every accepted iterate, starting at θ = 0.
    pub objective_history: Vec<f64>,
}

struct Derivatives {
    value: f64,
    grad: DVector<f64>,
    hess: DMatrix<f64>,
}

fn erm_value(examples: &[LabeledExample], theta: &Theta, ridge: f64) -> Result<f64> {
    let mut total = 0.0;
    for ex in examples {
        total += nll_loss(&ex.x, ex.y, theta)?;
    }
    let value = total / examples.len() as f64 + 0.5 * ridge * theta.matrix().norm_squared();
    if !value.is_finite() {
        return Err(FiralError::NonFinite("empirical loss".into()));
    }
    Ok(value)
}

fn erm_derivatives(examples: &[LabeledExample], theta: &Theta, ridge: f64) -> Result<Derivatives> {
    let dt = theta.d_tilde();
    let d = theta.dim();
    let cm1 = theta.class_count() - 1;
    let n = examples.len() as f64;
    let mut grad = DVector::zeros(dt);
    let mut hess = DMatrix::zeros(dt, dt);
    let mut total = 0.0;
    for ex in examples {
        let lp = log_proba(&ex.x, theta)?;
        total += -lp[ex.y].max(PROB_FLOOR.ln());
        let h = lp.rows(0, cm1).map(f64::exp);
        for k in 0..cm1 {
            let beta = h[k] - if ex.y == k { 1.0 } else { 0.0 };
            for j in 0..d {
                grad[k * d + j] += beta * ex.x[j];
            }
        }
        for k in 0..cm1 {
            for l in 0..cm1 {
                let a = if k == l { h[k] } else { 0.0 } - h[k] * h[l];
                if a == 0.0 {
                    continue;
                }
                let mut block = hess.view_mut((k * d, l * d), (d, d));
                block.ger(a, &ex.x, &ex.x, 1.0);
            }
        }
    }
    let flat = theta.to_flat();
    grad /= n;
    grad.axpy(ridge, &flat, 1.0);
    hess /= n;
    for i in 0..dt {
        hess[(i, i)] += ridge;
    }
    let value = total / n + 0.5 * ridge * flat.norm_squared();
    if !value.is_finite() {
        return Err(FiralError::NonFinite("empirical loss".into()));
    }
    Ok(Derivatives {
        value,
        grad,
        hess: symmetrize(&hess),
    })
}

/// Regularized empirical risk minimization by damped Newton with Armijo
/// backtracking, started from θ = 0.
pub fn fit_erm(examples: &[LabeledExample], classes: usize, opts: ErmOptions) -> Result<ErmFit> {
    let first = examples
        .first()
        .ok_or_else(|| FiralError::InvalidInput("fit_erm needs at least one example".into()))?;
    if classes < 2 {
        return Err(FiralError::InvalidInput("need at least two classes".into()));
    }
    if opts.ridge < 0.0 || !opts.ridge.is_finite() {
        return Err(FiralError::InvalidInput("ridge must be finite and >= 0".into()));
    }
    let d = first.x.len();
    for ex in examples {
        check_dim("training example", d, ex.x.len())?;
        if ex.y >= classes {
            return Err(FiralError::InvalidInput(format!("label {} out of range", ex.y)));
        }
    }

    let mut theta = Theta::zeros(classes, d);
    let mut derivs = erm_derivatives(examples, &theta, opts.ridge)?;
    let mut history = vec![derivs.value];
    let mut iterations = 0;
    let mut converged = derivs.grad.amax() <= opts.tol;

    while !converged && iterations < opts.max_iter {
        let step = newton_direction(&derivs.hess, &derivs.grad)?;
        let slope = derivs.grad.dot(&step);
        let base = theta.to_flat();
        let mut t = 1.0;
        let mut accepted = None;
        for _ in 0..60 {
            let trial = Theta::from_flat(classes, d, &(&base + t * &step))?;
            let value = erm_value(examples, &trial, opts.ridge)?;
            if value <= derivs.value + 1e-4 * t * slope {
                accepted = Some(trial);
                break;
            }
            t *= 0.5;
        }
        let Some(next) = accepted else {
            // line search stalled: we are at the floating-point floor of the objective
            break;
        };
        iterations += 1;
        theta = next;
        derivs = erm_derivatives(examples, &theta, opts.ridge)?;
        history.push(derivs.value);
        converged = derivs.grad.amax() <= opts.tol;
    }

    Ok(ErmFit {
        theta,
        iterations,
        converged,
        grad_norm: derivs.grad.amax(),
        objective_history: history,
    })
}

/// Solves `H p = -g`, adding Levenberg damping if `H` is not numerically PD.
fn newton_direction(hess: &DMatrix<f64>, grad: &DVector<f64>) -> Result<DVector<f64>> {
    let scale = hess.diagonal().amax().max(1e-300);
    let mut damping = 0.0;
    for _ in 0..40 {
        let mut h = hess.clone();
        for i in 0..h.nrows() {
            h[(i, i)] += damping;
        }
        if let Some(chol) = h.cholesky() {
            let p = chol.solve(&(-grad));
            if p.iter().all(|v| v.is_finite()) {
                return Ok(p);
            }
        }
        damping = if damping == 0.0 { 1e-12 * scale } else { damping * 10.0 };
    }
    Err(FiralError::Singular("ERM Newton system".into()))
}

/// Asymptotic standard errors `sqrt(diag(H⁻¹)/n)` of an unregularized fit.
pub fn standard_errors(examples: &[LabeledExample], theta: &Theta) -> Result<DVector<f64>> {
    let derivs = erm_derivatives(examples, theta, 0.0)?;
    let inv = spd_inverse(&derivs.hess, "empirical Hessian")?;
    let n = examples.len() as f64;
    Ok(inv.diagonal().map(|v| (v / n).sqrt()))
}

//! Continuous relaxation of the selection problem, solved by entropic mirror
//! descent over the probability simplex (`z = b κ`).

use crate::error::{check_dim, FiralError, Result};
use crate::fisher::{FisherSet, PoolHessian};

/// Relaxed selection weights on the scaled simplex `{z ≥ 0, Σ z = b}`.
#[derive(Debug, Clone, PartialEq)]
pub struct Weights {
    z: Vec<f64>,
    budget: f64,
}

impl Weights {
    pub fn new(z: Vec<f64>, budget: f64) -> Result<Self> {
        if z.is_empty() || !(budget > 0.0) {
            return Err(FiralError::InvalidInput("weights need m >= 1 and b > 0".into()));
        }
        if z.iter().any(|v| !(*v >= 0.0) || !v.is_finite()) {
            return Err(FiralError::InvalidInput("weights must be finite and nonnegative".into()));
        }
        let total: f64 = z.iter().sum();
        if (total - budget).abs() > 1e-9 * budget.max(1.0) {
            return Err(FiralError::InvalidInput(format!("weights sum to {total}, expected {budget}")));
        }
        Ok(Weights { z, budget })
    }

    pub fn uniform(m: usize, budget: f64) -> Result<Self> {
        Weights::new(vec![budget / m as f64; m], budget)
    }

    /// One per listed index (a 0/1 indicator when indices are distinct).
    pub fn indicator(m: usize, indices: &[usize]) -> Result<Self> {
        let mut z = vec![0.0; m];
        for &i in indices {
            if i >= m {
                return Err(FiralError::InvalidInput(format!("index {i} out of range")));
            }
            z[i] += 1.0;
        }
        Weights::new(z, indices.len() as f64)
    }

    pub fn as_slice(&self) -> &[f64] {
        &self.z
    }

    pub fn budget(&self) -> f64 {
        self.budget
    }

    pub fn len(&self) -> usize {
        self.z.len()
    }

    pub fn is_empty(&self) -> bool {
        self.z.is_empty()
    }

    /// Number of entries with `z_i > 1`, i.e. outside the box of the relaxation.
    pub fn box_violations(&self) -> usize {
        self.z.iter().filter(|&&v| v > 1.0 + 1e-12).count()
    }
}

struct Evaluation {
    value: f64,
    grad: Vec<f64>,
}

fn evaluate(kappa: &[f64], fishers: &FisherSet, hp: &PoolHessian) -> Result<Evaluation> {
    let sigma = fishers.aggregate(kappa)?;
    let chol = sigma
        .cholesky()
        .ok_or_else(|| FiralError::Singular("mirror-descent aggregate Σ(κ)".into()))?;
    let left = chol.solve(&hp.matrix);
    let value = left.trace();
    let m = chol.solve(&left.transpose());
    let m = (&m + m.transpose()) * 0.5;
    let grad: Vec<f64> = fishers.inner_all(&m).into_iter().map(|v| -v).collect();
    if !value.is_finite() || grad.iter().any(|g| !g.is_finite()) {
        return Err(FiralError::NonFinite("relaxation gradient".into()));
    }
    Ok(Evaluation { value, grad })
}

/// `∂f/∂κ_i = -⟨H(x_i), Σ⁻¹ H_p Σ⁻¹⟩` with `Σ = Σ_i κ_i H(x_i)`.
pub fn relax_gradient(kappa: &[f64], fishers: &FisherSet, hp: &PoolHessian) -> Result<Vec<f64>> {
    check_dim("kappa", fishers.len(), kappa.len())?;
    Ok(evaluate(kappa, fishers, hp)?.grad)
}

/// `f(κ) = ⟨Σ(κ)⁻¹, H_p⟩` on the unit simplex.
pub fn relax_objective(kappa: &[f64], fishers: &FisherSet, hp: &PoolHessian) -> Result<f64> {
    check_dim("kappa", fishers.len(), kappa.len())?;
    Ok(evaluate(kappa, fishers, hp)?.value)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StepScale {
    /// `β_t = β₀ √(log m / t)`.
    Raw,
    /// `β_t = β₀ √(log m / t) / ‖g_t‖_∞`, i.e. the Lipschitz-normalized step.
    GradientNormalized,
}

#[derive(Debug, Clone, Copy)]
pub struct RelaxOptions {
    pub iterations: usize,
    pub beta0: f64,
    pub step: StepScale,
    /// Early stop window and relative tolerance on the best objective.
    pub patience: usize,
    pub rel_tol: f64,
}

impl Default for RelaxOptions {
    fn default() -> Self {
        RelaxOptions {
            iterations: 200,
            beta0: 1.0,
            step: StepScale::GradientNormalized,
            patience: 20,
            rel_tol: 1e-7,
        }
    }
}

#[derive(Debug, Clone)]
pub struct RelaxOutcome {
    /// `z_⋄ = b κ_best`.
    pub weights: Weights,
    /// `f(z_⋄) = f(κ_best) / b`.
    pub objective: f64,
    /// Best-so-far `f(κ)` after each evaluated iterate.
    pub best_history: Vec<f64>,
    pub iterations: usize,
    pub box_violations: usize,
}

const KAPPA_FLOOR: f64 = 1e-300;

/// Entropic mirror descent from the uniform point; returns the best iterate.
pub fn relax_solve(budget: usize, hp: &PoolHessian, fishers: &FisherSet, opts: RelaxOptions) -> Result<RelaxOutcome> {
    if budget == 0 {
        return Err(FiralError::InvalidInput("budget must be >= 1".into()));
    }
    check_dim("H_p vs Fisher set", fishers.d_tilde(), hp.d_tilde())?;
    let m = fishers.len();
    let log_m = (m as f64).ln();
    let mut kappa = vec![1.0 / m as f64; m];
    let mut log_kappa: Vec<f64> = kappa.iter().map(|k| k.ln()).collect();

    let mut best_value = f64::INFINITY;
    let mut best_kappa = kappa.clone();
    let mut history = Vec::with_capacity(opts.iterations + 1);
    let mut iterations = 0;

    for t in 1..=opts.iterations + 1 {
        let eval = evaluate(&kappa, fishers, hp)?;
        if eval.value < best_value {
            best_value = eval.value;
            best_kappa.clone_from(&kappa);
        }
        history.push(best_value);
        if t > opts.iterations {
            break;
        }
        let w = opts.patience;
        if w > 0 && history.len() > w {
            let old = history[history.len() - 1 - w];
            if old - best_value <= opts.rel_tol * best_value.abs() {
                break;
            }
        }

        let mut beta = opts.beta0 * (log_m / t as f64).sqrt();
        if opts.step == StepScale::GradientNormalized {
            let gmax = eval.grad.iter().fold(0.0f64, |a, g| a.max(g.abs()));
            if gmax > 0.0 {
                beta /= gmax;
            }
        }
        // κ_i ← κ_i exp(-β g_i), renormalized; carried in log space
        for (lk, g) in log_kappa.iter_mut().zip(&eval.grad) {
            *lk -= beta * g;
        }
        let top = log_kappa.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut total = 0.0;
        for (k, lk) in kappa.iter_mut().zip(log_kappa.iter_mut()) {
            *lk -= top;
            *k = lk.exp().max(KAPPA_FLOOR);
            total += *k;
        }
        for (k, lk) in kappa.iter_mut().zip(log_kappa.iter_mut()) {
            *k /= total;
            *lk = k.ln();
        }
        iterations = t;
    }

    let b = budget as f64;
    let z: Vec<f64> = best_kappa.iter().map(|k| k * b).collect();
    // renormalize exactly onto Σz = b
    let s: f64 = z.iter().sum();
    let z: Vec<f64> = z.into_iter().map(|v| v * b / s).collect();
    let weights = Weights::new(z, b)?;
    let box_violations = weights.box_violations();
    Ok(RelaxOutcome {
        weights,
        objective: best_value / b,
        best_history: history,
        iterations,
        box_violations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::fisher::f_weights;
    use nalgebra::DMatrix;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random_set(rng: &mut ChaCha8Rng, m: usize, dt: usize, rank: usize) -> FisherSet {
        let factors = (0..m)
            .map(|_| DMatrix::from_fn(dt, rank, |_, _| rng.random_range(-1.0..1.0)))
            .collect();
        FisherSet::from_factors(DMatrix::identity(dt, dt) * 0.05, factors).unwrap()
    }

    #[test]
    fn identical_fishers_stay_uniform() {
        let p = DMatrix::from_row_slice(2, 2, &[1.0, 0.2, 0.0, 0.7]);
        let set = FisherSet::from_factors(DMatrix::identity(2, 2) * 0.1, vec![p.clone(); 5]).unwrap();
        let hp = PoolHessian::new(set.dense(0), 5);
        let g = relax_gradient(&[0.2; 5], &set, &hp).unwrap();
        assert!(g.iter().all(|v| (v - g[0]).abs() < 1e-12));
        let out = relax_solve(3, &hp, &set, RelaxOptions::default()).unwrap();
        for z in out.weights.as_slice() {
            assert!((z - 0.6).abs() < 1e-12);
        }
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let set = random_set(&mut rng, 6, 4, 2);
        let hp = PoolHessian::new(set.aggregate(&[1.0 / 6.0; 6]).unwrap(), 6);
        let kappa: Vec<f64> = (0..6).map(|i| 0.1 + 0.05 * i as f64).collect();
        let g = relax_gradient(&kappa, &set, &hp).unwrap();
        let h = 1e-6;
        for i in 0..6 {
            let mut up = kappa.clone();
            let mut dn = kappa.clone();
            up[i] += h;
            dn[i] -= h;
            let fd = (relax_objective(&up, &set, &hp).unwrap() - relax_objective(&dn, &set, &hp).unwrap()) / (2.0 * h);
            assert!((fd - g[i]).abs() <= 1e-5 * g[i].abs(), "{i}: fd {fd} vs {}", g[i]);
        }
    }

    #[test]
    fn single_point_gradient_is_minus_f() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let set = random_set(&mut rng, 1, 3, 3);
        let hp = PoolHessian::new(DMatrix::identity(3, 3), 1);
        let f = relax_objective(&[1.0], &set, &hp).unwrap();
        let g = relax_gradient(&[1.0], &set, &hp).unwrap();
        assert!((g[0] + f).abs() < 1e-12 * f);
    }

    #[test]
    fn two_point_matches_golden_section() {
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        let set = random_set(&mut rng, 2, 2, 1);
        let hp = PoolHessian::new(DMatrix::from_row_slice(2, 2, &[1.0, 0.3, 0.3, 0.8]), 2);
        let obj = |k: f64| relax_objective(&[k, 1.0 - k], &set, &hp).unwrap();
        let (mut lo, mut hi) = (0.0f64, 1.0f64);
        let phi = (5f64.sqrt() - 1.0) / 2.0;
        for _ in 0..200 {
            let a = hi - phi * (hi - lo);
            let b = lo + phi * (hi - lo);
            if obj(a) < obj(b) {
                hi = b;
            } else {
                lo = a;
            }
        }
        let best = obj(0.5 * (lo + hi));
        let out = relax_solve(1, &hp, &set, RelaxOptions::default()).unwrap();
        assert!((out.objective - best).abs() <= 1e-3 * best, "{} vs {}", out.objective, best);
    }

    #[test]
    fn best_history_non_increasing_and_beats_uniform() {
        let mut rng = ChaCha8Rng::seed_from_u64(14);
        let set = random_set(&mut rng, 12, 4, 2);
        let hp = PoolHessian::new(set.aggregate(&[1.0 / 12.0; 12]).unwrap(), 12);
        let out = relax_solve(3, &hp, &set, RelaxOptions::default()).unwrap();
        for w in out.best_history.windows(2) {
            assert!(w[1] <= w[0]);
        }
        let uniform = f_weights(Weights::uniform(12, 3.0).unwrap().as_slice(), &set, &hp).unwrap();
        assert!(out.objective <= uniform + 1e-12);
        let total: f64 = out.weights.as_slice().iter().sum();
        assert!((total - 3.0).abs() < 1e-9);
    }

    #[test]
    fn singular_aggregate_is_reported() {
        let p = DMatrix::from_row_slice(2, 1, &[1.0, 0.0]);
        let set = FisherSet::from_factors(DMatrix::zeros(2, 2), vec![p.clone(), p]).unwrap();
        let hp = PoolHessian::new(DMatrix::identity(2, 2), 2);
        assert!(matches!(
            relax_solve(1, &hp, &set, RelaxOptions::default()),
            Err(FiralError::Singular(_))
        ));
    }

    #[test]
    fn weights_validation() {
        assert!(Weights::new(vec![0.5, 0.6], 1.0).is_err());
        assert!(Weights::new(vec![-0.1, 1.1], 1.0).is_err());
        let w = Weights::new(vec![1.5, 0.5], 2.0).unwrap();
        assert_eq!(w.box_violations(), 1);
    }
}

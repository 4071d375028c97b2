//! Rounding the relaxed weights into `b` concrete points with
//! follow-the-regularized-leader under the `ℓ_{1/2}` regularizer.
//!
//! The action played at step `t` is `A_t = (ν_t I + η Σ_{l<t} H̃(x_{i_l}))^{-2}`
//! with `ν_t` chosen so that `Tr A_t = 1`. Candidates are scored with the
//! Woodbury-reduced `(c-1) × (c-1)` objective, which is equivalent to
//! minimizing `Tr[(A_t^{-1/2} + η H̃(x_i))^{-1}]` directly.

use nalgebra::DMatrix;

use crate::error::{FiralError, Result};
use crate::fisher::WhitenedFactors;
use crate::linalg::{add_gram, spd_inverse, symmetrize, SymEigen};

/// Closed-form FTRL action for cumulative loss `cum_f`.
#[derive(Debug, Clone)]
pub struct FtrlAction {
    pub a_inv_sqrt: DMatrix<f64>,
    pub nu: f64,
    /// Eigenvalues of `η · cum_f`, ascending.
    pub scaled_eigenvalues: Vec<f64>,
}

impl FtrlAction {
    /// `Tr A = Σ_j (ν + λ_j)^{-2}`.
    pub fn trace(&self) -> f64 {
        self.scaled_eigenvalues.iter().map(|l| (self.nu + l).powi(-2)).sum()
    }

    /// `Tr A^{1/2} = Σ_j (ν + λ_j)^{-1}`.
    pub fn trace_sqrt(&self) -> f64 {
        self.scaled_eigenvalues.iter().map(|l| 1.0 / (self.nu + l)).sum()
    }
}

/// Unique `ν` with `Σ_j (ν + λ_j)^{-2} = 1` and every `ν + λ_j > 0`, by bisection.
pub fn solve_nu(eigenvalues: &[f64]) -> f64 {
    let n = eigenvalues.len() as f64;
    let lam_min = eigenvalues.iter().cloned().fold(f64::INFINITY, f64::min);
    let residual = |nu: f64| eigenvalues.iter().map(|l| (nu + l).powi(-2)).sum::<f64>() - 1.0;
    let mut lo = -lam_min + 1e-14 * (1.0 + lam_min.abs());
    let mut hi = n.sqrt() - lam_min.min(0.0);
    debug_assert!(residual(lo) >= 0.0 && residual(hi) <= 1e-15, "ν bracket failed");
    let mut mid = 0.5 * (lo + hi);
    for _ in 0..200 {
        mid = 0.5 * (lo + hi);
        let r = residual(mid);
        if r.abs() < 1e-13 || hi - lo <= f64::EPSILON * mid.abs().max(1.0) {
            break;
        }
        if r > 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    mid
}

pub fn ftrl_action(cum_f: &DMatrix<f64>, eta: f64) -> Result<FtrlAction> {
    if !(eta > 0.0) {
        return Err(FiralError::InvalidInput("learning rate must be positive".into()));
    }
    let eig = SymEigen::new(&(cum_f * eta));
    // PSD input; rounding noise below zero is dropped
    let lams: Vec<f64> = eig.values.iter().map(|v| v.max(0.0)).collect();
    let nu = solve_nu(&lams);
    let mut scaled = eig.vectors.clone();
    for (j, l) in lams.iter().enumerate() {
        scaled.column_mut(j).scale_mut(nu + l);
    }
    let a_inv_sqrt = symmetrize(&(scaled * eig.vectors.transpose()));
    Ok(FtrlAction {
        a_inv_sqrt,
        nu,
        scaled_eigenvalues: lams,
    })
}

/// `⟨(I + η P̃ᵀ B^{1/2} P̃)^{-1}, P̃ᵀ B P̃⟩`.
pub fn score_candidate(b_sqrt: &DMatrix<f64>, b: &DMatrix<f64>, p: &DMatrix<f64>, eta: f64) -> Result<f64> {
    let w = b_sqrt * p;
    let mut s = p.transpose() * &w * eta;
    for k in 0..s.nrows() {
        s[(k, k)] += 1.0;
    }
    let t = p.transpose() * b * p;
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or_else(|| FiralError::Singular("candidate score system".into()))?;
    Ok(chol.solve(&t).trace())
}

/// Same score using `B = (B^{1/2})²` implicitly: `T = WᵀW` with `W = B^{1/2} P̃`.
fn score_fast(b_sqrt: &DMatrix<f64>, p: &DMatrix<f64>, eta: f64) -> Result<f64> {
    let w = b_sqrt * p;
    let r = p.ncols();
    if r == 1 {
        let s = 1.0 + eta * p.column(0).dot(&w.column(0));
        return Ok(w.column(0).norm_squared() / s);
    }
    let mut s = p.transpose() * &w * eta;
    for k in 0..r {
        s[(k, k)] += 1.0;
    }
    let t = w.transpose() * &w;
    let chol = symmetrize(&s)
        .cholesky()
        .ok_or_else(|| FiralError::Singular("candidate score system".into()))?;
    Ok(chol.solve(&t).trace())
}

/// Running state of the rounding loop.
#[derive(Debug, Clone)]
pub struct SelectionState {
    pub t: usize,
    pub eta: f64,
    pub action: FtrlAction,
    pub b_sqrt: DMatrix<f64>,
    pub cum_f: DMatrix<f64>,
    pub selected: Vec<usize>,
}

impl SelectionState {
    pub fn new(factors: &WhitenedFactors, eta: f64) -> Result<Self> {
        let dt = factors.d_tilde();
        let cum_f = DMatrix::zeros(dt, dt);
        let action = ftrl_action(&cum_f, eta)?;
        let b_sqrt = Self::b_sqrt_for(&action, factors, eta)?;
        Ok(SelectionState {
            t: 1,
            eta,
            action,
            b_sqrt,
            cum_f,
            selected: Vec::new(),
        })
    }

    fn b_sqrt_for(action: &FtrlAction, factors: &WhitenedFactors, eta: f64) -> Result<DMatrix<f64>> {
        spd_inverse(&(&action.a_inv_sqrt + &factors.shift * eta), "B_t^{-1/2}")
    }

    pub fn a_inv_sqrt(&self) -> &DMatrix<f64> {
        &self.action.a_inv_sqrt
    }

    pub fn b(&self) -> DMatrix<f64> {
        &self.b_sqrt * &self.b_sqrt
    }

    /// Woodbury score of every candidate at the current step.
    pub fn scores(&self, factors: &WhitenedFactors) -> Result<Vec<f64>> {
        factors.factors.iter().map(|p| score_fast(&self.b_sqrt, p, self.eta)).collect()
    }

    /// `Tr[A_t^{1/2} - (A_t^{-1/2} + η H̃(x_i))^{-1}]` from a candidate's score.
    pub fn gain_from_score(&self, score: f64) -> f64 {
        self.action.trace_sqrt() - self.b_sqrt.trace() + self.eta * score
    }

    /// Records index `i`, then recomputes `A_{t+1}^{-1/2}` and `B_{t+1}^{1/2}`.
    pub fn advance(&mut self, index: usize, factors: &WhitenedFactors) -> Result<()> {
        let p = &factors.factors[index];
        self.cum_f += &factors.shift;
        add_gram(&mut self.cum_f, 1.0, p);
        self.cum_f = symmetrize(&self.cum_f);
        self.selected.push(index);
        self.action = ftrl_action(&self.cum_f, self.eta)?;
        self.b_sqrt = Self::b_sqrt_for(&self.action, factors, self.eta)?;
        self.t += 1;
        Ok(())
    }
}

/// Per-step values needed by the regret audits.
#[derive(Debug, Clone, PartialEq)]
pub struct StepAudit {
    pub t: usize,
    pub index: usize,
    pub score: f64,
    /// Trace gain of the chosen point.
    pub gain: f64,
    /// Largest trace gain over all candidates, including masked ones.
    pub max_gain: f64,
    /// `Tr A_t`, which must equal one.
    pub trace_a: f64,
    /// `λmin(Σ_{l ≤ t} H̃(x_{i_l}))` after the step.
    pub lambda_min_after: f64,
}

#[derive(Debug, Clone)]
pub struct Selection {
    pub indices: Vec<usize>,
    pub eta: f64,
    pub budget: usize,
    pub d_tilde: usize,
    pub repeats_allowed: bool,
    pub steps: Vec<StepAudit>,
}

impl Selection {
    pub fn final_lambda_min(&self) -> f64 {
        self.steps.last().map(|s| s.lambda_min_after).unwrap_or(0.0)
    }
}

/// Runs `b` FTRL steps. With `mask_selected`, chosen indices are excluded
/// from later steps; otherwise repeats are allowed as in the analysis.
/// Ties go to the smallest index.
pub fn select_batch(budget: usize, eta: f64, factors: &WhitenedFactors, mask_selected: bool) -> Result<Selection> {
    if budget == 0 {
        return Err(FiralError::InvalidInput("budget must be >= 1".into()));
    }
    if !(eta > 0.0) {
        return Err(FiralError::InvalidInput("learning rate must be positive".into()));
    }
    let m = factors.len();
    if m == 0 || (mask_selected && budget > m) {
        return Err(FiralError::InvalidInput(format!("cannot select {budget} of {m} candidates")));
    }
    let mut state = SelectionState::new(factors, eta)?;
    let mut taken = vec![false; m];
    let mut steps = Vec::with_capacity(budget);
    for t in 1..=budget {
        let scores = state.scores(factors)?;
        let mut best: Option<usize> = None;
        let mut best_any = f64::NEG_INFINITY;
        for (i, &s) in scores.iter().enumerate() {
            if !s.is_finite() {
                return Err(FiralError::NonFinite(format!("score of candidate {i}")));
            }
            best_any = best_any.max(s);
            if mask_selected && taken[i] {
                continue;
            }
            if best.is_none_or(|j| s > scores[j]) {
                best = Some(i);
            }
        }
        let chosen = best.expect("at least one unmasked candidate");
        let trace_a = state.action.trace();
        let gain = state.gain_from_score(scores[chosen]);
        let max_gain = state.gain_from_score(best_any);
        state.advance(chosen, factors)?;
        taken[chosen] = true;
        let lambda_min_after = state.action.scaled_eigenvalues[0] / eta;
        steps.push(StepAudit {
            t,
            index: chosen,
            score: scores[chosen],
            gain,
            max_gain,
            trace_a,
            lambda_min_after,
        });
    }
    Ok(Selection {
        indices: state.selected,
        eta,
        budget,
        d_tilde: factors.d_tilde(),
        repeats_allowed: !mask_selected,
        steps,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct AuditReport {
    /// `min_t [λmin(Σ_{l≤t} H̃) - (-2√d̃/η + (1/η) Σ_{l≤t} gain_l)]`.
    pub worst_ftrl_margin: f64,
    /// `min_t [max_i gain_i / η - (1 - η/2b)/(b + η√d̃)]`; only with repeats allowed.
    pub worst_trace_margin: Option<f64>,
    /// `max_t |Tr A_t - 1|`.
    pub worst_trace_deviation: f64,
    pub steps: usize,
}

impl AuditReport {
    pub fn holds(&self, slack: f64) -> bool {
        self.worst_ftrl_margin >= -slack
            && self.worst_trace_margin.is_none_or(|m| m >= -slack)
            && self.worst_trace_deviation <= 1e-8
    }
}

pub fn regret_audit(selection: &Selection) -> AuditReport {
    let eta = selection.eta;
    let dt = selection.d_tilde as f64;
    let b = selection.budget as f64;
    let trace_rhs = (1.0 - eta / (2.0 * b)) / (b + eta * dt.sqrt());
    let mut cum_gain = 0.0;
    let mut worst_ftrl = f64::INFINITY;
    let mut worst_trace = f64::INFINITY;
    let mut worst_dev: f64 = 0.0;
    for step in &selection.steps {
        cum_gain += step.gain;
        let rhs = -2.0 * dt.sqrt() / eta + cum_gain / eta;
        worst_ftrl = worst_ftrl.min(step.lambda_min_after - rhs);
        worst_trace = worst_trace.min(step.max_gain / eta - trace_rhs);
        worst_dev = worst_dev.max((step.trace_a - 1.0).abs());
    }
    AuditReport {
        worst_ftrl_margin: worst_ftrl,
        worst_trace_margin: selection.repeats_allowed.then_some(worst_trace),
        worst_trace_deviation: worst_dev,
        steps: selection.steps.len(),
    }
}

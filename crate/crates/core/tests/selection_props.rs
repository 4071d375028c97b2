use nalgebra::{DMatrix, DVector};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use firal::fisher::{f_indices, f_objective, f_weights, labeled_shift, pool_hessian, whiten_factors, FisherSet, PoolHessian};
use firal::linalg::{lambda_min, spd_inverse};
use firal::model::{Pool, Theta};
use firal::relax::{relax_solve, RelaxOptions, Weights};
use firal::sparsify::{ftrl_action, regret_audit, select_batch, SelectionState};

fn normal(rng: &mut ChaCha8Rng) -> f64 {
    rng.sample(StandardNormal)
}

fn spd(rng: &mut ChaCha8Rng, n: usize) -> DMatrix<f64> {
    let a = DMatrix::from_fn(n, n, |_, _| normal(rng));
    &a * a.transpose() + DMatrix::identity(n, n) * 0.05
}

fn problem(seed: u64, m: usize, c: usize, d: usize, b: usize, labeled: usize) -> (FisherSet, PoolHessian) {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let theta = Theta::from_matrix(DMatrix::from_fn(c - 1, d, |_, _| 0.5 * normal(&mut rng))).unwrap();
    let pool = Pool::new((0..m).map(|_| DVector::from_fn(d, |_, _| 1.5 * normal(&mut rng))).collect()).unwrap();
    let lab: Vec<DVector<f64>> = (0..labeled).map(|_| DVector::from_fn(d, |_, _| 1.5 * normal(&mut rng))).collect();
    let shift = labeled_shift(&lab, &theta, b).unwrap();
    let hp = pool_hessian(&pool, &theta).unwrap();
    (FisherSet::new(&pool, &theta, shift).unwrap(), hp)
}

fn subsets(m: usize, b: usize) -> Vec<Vec<usize>> {
    if b == 0 {
        return vec![vec![]];
    }
    let mut out = Vec::new();
    for last in b - 1..m {
        for mut s in subsets(last, b - 1) {
            s.push(last);
            out.push(s);
        }
    }
    out
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn f_reciprocal_monotone_convex(seed in any::<u64>(), n in 1usize..6, t in 0.05f64..20.0, lam in 0.0f64..1.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (a, b, hp) = (spd(&mut rng, n), spd(&mut rng, n), spd(&mut rng, n));
        let fa = f_objective(&a, &hp).unwrap();
        let fb = f_objective(&b, &hp).unwrap();
        prop_assert!((f_objective(&(&a * t), &hp).unwrap() * t - fa).abs() <= 1e-10 * fa);
        prop_assert!(f_objective(&(&a + &b), &hp).unwrap() <= fa * (1.0 + 1e-12));
        let fm = f_objective(&(&a * lam + &b * (1.0 - lam)), &hp).unwrap();
        prop_assert!(fm <= (lam * fa + (1.0 - lam) * fb) * (1.0 + 1e-12));
    }

    #[test]
    fn lambda_min_is_min_rayleigh_quotient(seed in any::<u64>(), n in 1usize..7) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(&mut rng, n);
        let lmin = lambda_min(&a);
        for _ in 0..20 {
            let v = DVector::from_fn(n, |_, _| normal(&mut rng));
            prop_assert!(v.dot(&(&a * &v)) / v.norm_squared() >= lmin - 1e-10);
        }
    }

    #[test]
    fn trace_ratio_inequality(seed in any::<u64>(), n in 1usize..6) {
        // ⟨(I + B)⁻¹, A⟩ ≥ Tr A / (1 + Tr B) for PSD A, B
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let a = spd(&mut rng, n);
        let b = spd(&mut rng, n);
        let lhs = (spd_inverse(&(DMatrix::identity(n, n) + &b), "I+B").unwrap() * &a).trace();
        prop_assert!(lhs >= a.trace() / (1.0 + b.trace()) - 1e-12);
    }

    #[test]
    fn ftrl_action_has_unit_trace(seed in any::<u64>(), n in 1usize..8, eta in 0.01f64..50.0) {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let f = spd(&mut rng, n);
        let act = ftrl_action(&f, eta).unwrap();
        let a = spd_inverse(&(&act.a_inv_sqrt * &act.a_inv_sqrt), "A").unwrap();
        prop_assert!((a.trace() - 1.0).abs() < 1e-8);
        prop_assert!((act.trace() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn whitened_aggregate_is_identity(seed in any::<u64>(), m in 5usize..30, c in 2usize..4, d in 1usize..4) {
        let (fs, hp) = problem(seed, m, c, d, 3, 0);
        let z = relax_solve(3, &hp, &fs, RelaxOptions { iterations: 30, ..RelaxOptions::default() }).unwrap().weights;
        let w = whiten_factors(&z, &fs).unwrap();
        prop_assume!(w.clamped == 0);
        let mut agg = w.shift.clone() * z.as_slice().iter().sum::<f64>();
        for (p, zi) in w.factors.iter().zip(z.as_slice()) {
            agg += p * p.transpose() * *zi;
        }
        prop_assert!((agg - DMatrix::identity(fs.d_tilde(), fs.d_tilde())).amax() < 1e-8);
    }

    #[test]
    fn selection_state_invariants(seed in any::<u64>(), steps in 1usize..10) {
        let (fs, hp) = problem(seed, 15, 3, 2, 4, 3);
        let z = relax_solve(4, &hp, &fs, RelaxOptions::default()).unwrap().weights;
        let w = whiten_factors(&z, &fs).unwrap();
        let eta = 4.0;
        let mut st = SelectionState::new(&w, eta).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 1);
        for _ in 0..steps {
            prop_assert!((st.action.trace() - 1.0).abs() < 1e-8);
            let back = spd_inverse(&st.b_sqrt, "B^{1/2}").unwrap();
            prop_assert!((back - (st.a_inv_sqrt() + &w.shift * eta)).amax() < 1e-8);
            prop_assert!(lambda_min(&st.b_sqrt) > 0.0);
            st.advance(rng.random_range(0..15), &w).unwrap();
        }
    }
}

#[test]
fn rounding_respects_exhaustive_optimum() {
    for seed in 0..10 {
        let (fs, hp) = problem(seed, 8, 2, 2, 2, 3);
        let f_star = subsets(8, 2).iter().map(|s| f_indices(s, &fs, &hp).unwrap()).fold(f64::INFINITY, f64::min);
        let out = relax_solve(2, &hp, &fs, RelaxOptions { iterations: 3000, beta0: 10.0, patience: 0, ..RelaxOptions::default() }).unwrap();
        assert!(out.objective <= f_star + 1e-6, "seed {seed}: {} vs {f_star}", out.objective);
        let w = whiten_factors(&out.weights, &fs).unwrap();
        let sel = select_batch(2, 8.0 * 2f64.sqrt(), &w, true).unwrap();
        assert_ne!(sel.indices[0], sel.indices[1]);
        assert!(f_indices(&sel.indices, &fs, &hp).unwrap() >= f_star - 1e-12);
    }
}

#[test]
fn regret_margins_nonnegative_at_scale() {
    let (fs, hp) = problem(31, 60, 3, 2, 64, 0);
    let z = relax_solve(64, &hp, &fs, RelaxOptions::default()).unwrap().weights;
    let w = whiten_factors(&z, &fs).unwrap();
    let sel = select_batch(64, 8.0 * 2.0, &w, false).unwrap();
    let rep = regret_audit(&sel);
    assert!(rep.holds(1e-8), "{rep:?}");
}

#[test]
fn relaxation_gap_shrinks_with_iterations() {
    for seed in 0..5 {
        let (fs, hp) = problem(100 + seed, 9, 2, 2, 2, 3);
        let f_star = subsets(9, 2).iter().map(|s| f_indices(s, &fs, &hp).unwrap()).fold(f64::INFINITY, f64::min);
        let run = |t| relax_solve(2, &hp, &fs, RelaxOptions { iterations: t, patience: 0, ..RelaxOptions::default() }).unwrap().objective;
        let (g100, g400) = (run(100) - f_star, run(400) - f_star);
        assert!(g400 <= g100 + 1e-15, "seed {seed}: {g400} > {g100}");
    }
}

#[test]
fn uniform_weights_when_fishers_identical() {
    let p = DMatrix::from_row_slice(2, 1, &[1.0, 0.3]);
    let fs = FisherSet::from_factors(DMatrix::identity(2, 2) * 0.2, vec![p; 6]).unwrap();
    let hp = PoolHessian::new(DMatrix::identity(2, 2), 6);
    let out = relax_solve(3, &hp, &fs, RelaxOptions::default()).unwrap();
    for &z in out.weights.as_slice() {
        assert!((z - 0.5).abs() < 1e-12);
    }
    let uniform = f_weights(Weights::uniform(6, 3.0).unwrap().as_slice(), &fs, &hp).unwrap();
    assert!((out.objective - uniform).abs() < 1e-12);
}

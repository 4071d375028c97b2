//! Comparison selectors: random, k-means, entropy, variation ratios and
//! forward-backward greedy on the FIR objective.

use nalgebra::{DMatrix, DVector};
use rand::distr::{weighted::WeightedIndex, Distribution};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{FiralError, Result};
use crate::fisher::{f_objective, FisherSet, PoolHessian};
use crate::linalg::{add_gram, spd_inverse, symmetrize};
use crate::model::{predict_proba, Pool, Theta};

pub const KMEANS_MAX_ITER: usize = 50;

fn check_budget(b: usize, m: usize) -> Result<()> {
    if b == 0 || b > m {
        return Err(FiralError::InvalidInput(format!("cannot select {b} of {m} points")));
    }
    Ok(())
}

pub fn select_random(pool: &Pool, b: usize, seed: u64) -> Result<Vec<usize>> {
    check_budget(b, pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    Ok(rand::seq::index::sample(&mut rng, pool.len(), b).into_vec())
}

fn sq_dist(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum()
}

fn nearest(x: &DVector<f64>, centers: &[DVector<f64>]) -> (usize, f64) {
    let mut best = (0, f64::INFINITY);
    for (j, c) in centers.iter().enumerate() {
        let d = sq_dist(x, c);
        if d < best.1 {
            best = (j, d);
        }
    }
    best
}

/// k-means++ seeding followed by Lloyd iterations.
pub fn kmeans(points: &[DVector<f64>], k: usize, rng: &mut impl Rng) -> Vec<DVector<f64>> {
    let m = points.len();
    let mut centers = vec![points[rng.random_range(0..m)].clone()];
    let mut d2: Vec<f64> = points.iter().map(|x| sq_dist(x, &centers[0])).collect();
    while centers.len() < k {
        let next = match WeightedIndex::new(&d2) {
            Ok(dist) => dist.sample(rng),
            // every point coincides with a center already
            Err(_) => rng.random_range(0..m),
        };
        centers.push(points[next].clone());
        let c = centers.last().unwrap();
        for (d, x) in d2.iter_mut().zip(points) {
            *d = d.min(sq_dist(x, c));
        }
    }

    let mut assign = vec![usize::MAX; m];
    for _ in 0..KMEANS_MAX_ITER {
        let mut changed = false;
        for (a, x) in assign.iter_mut().zip(points) {
            let j = nearest(x, &centers).0;
            if *a != j {
                *a = j;
                changed = true;
            }
        }
        if !changed {
            break;
        }
        let dim = points[0].len();
        let mut sums = vec![DVector::zeros(dim); k];
        let mut counts = vec![0usize; k];
        for (&a, x) in assign.iter().zip(points) {
            sums[a] += x;
            counts[a] += 1;
        }
        for j in 0..k {
            // empty clusters keep their previous center
            if counts[j] > 0 {
                centers[j] = &sums[j] / counts[j] as f64;
            }
        }
    }
    centers
}

/// Runs k-means with `k = b` and returns, for each centroid in turn, the
/// nearest pool point not already claimed.
pub fn select_kmeans(pool: &Pool, b: usize, seed: u64) -> Result<Vec<usize>> {
    check_budget(b, pool.len())?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let centers = kmeans(pool.points(), b, &mut rng);
    let mut claimed = vec![false; pool.len()];
    let mut out = Vec::with_capacity(b);
    for c in &centers {
        let mut best = (usize::MAX, f64::INFINITY);
        for (i, x) in pool.points().iter().enumerate() {
            if claimed[i] {
                continue;
            }
            let d = sq_dist(x, c);
            if d < best.1 {
                best = (i, d);
            }
        }
        claimed[best.0] = true;
        out.push(best.0);
    }
    Ok(out)
}

fn smallest_b(scores: Vec<f64>, b: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&i, &j| scores[i].total_cmp(&scores[j]).then(i.cmp(&j)));
    order.truncate(b);
    order
}

/// `Σ_k p_k log p_k` (negative entropy).
pub fn neg_entropy(p: &DVector<f64>) -> f64 {
    p.iter().filter(|&&v| v > 0.0).map(|v| v * v.ln()).sum()
}

/// The `b` points with the smallest `Σ_k p(k|x) log p(k|x)`.
pub fn select_entropy(pool: &Pool, theta: &Theta, b: usize) -> Result<Vec<usize>> {
    check_budget(b, pool.len())?;
    let scores = pool
        .points()
        .iter()
        .map(|x| predict_proba(x, theta).map(|p| neg_entropy(&p)))
        .collect::<Result<Vec<_>>>()?;
    Ok(smallest_b(scores, b))
}

/// The `b` points with the smallest top-class probability.
pub fn select_var_ratios(pool: &Pool, theta: &Theta, b: usize) -> Result<Vec<usize>> {
    check_budget(b, pool.len())?;
    let scores = pool
        .points()
        .iter()
        .map(|x| predict_proba(x, theta).map(|p| p.max()))
        .collect::<Result<Vec<_>>>()?;
    Ok(smallest_b(scores, b))
}

/// Relative ridge keeping the seed matrix invertible before any point is added.
pub const GREEDY_SEED_RIDGE: f64 = 1e-9;

/// `tr[(I + s PᵀΣ⁻¹P)⁻¹ PᵀΣ⁻¹ H_p Σ⁻¹ P]`: the decrease (`s = 1`) or
/// increase (`s = -1`) of `f` when `P Pᵀ` is added or removed.
fn rank_update_delta(sigma_inv: &DMatrix<f64>, hp: &DMatrix<f64>, p: &DMatrix<f64>, s: f64) -> Option<f64> {
    let u = sigma_inv * p;
    let mut core = p.transpose() * &u * s;
    for k in 0..core.nrows() {
        core[(k, k)] += 1.0;
    }
    let t = u.transpose() * hp * &u;
    let chol = symmetrize(&core).cholesky()?;
    Some(chol.solve(&t).trace())
}

/// Forward-greedy adds `2b` points minimizing `f` of the running aggregate,
/// then backward-greedy removes the `b` whose removal raises `f` least.
/// The aggregate starts at `b·D + γI`, the labeled information plus a tiny ridge.
pub fn select_greedy_fb(fishers: &FisherSet, hp: &PoolHessian, b: usize) -> Result<Vec<usize>> {
    let m = fishers.len();
    if b == 0 || 2 * b > m {
        return Err(FiralError::InvalidInput(format!("greedy forward-backward needs 2b <= m (b={b}, m={m})")));
    }
    let dt = fishers.d_tilde();
    let gamma = GREEDY_SEED_RIDGE * hp.matrix.trace().max(f64::MIN_POSITIVE) / dt as f64;
    let mut sigma = fishers.shift() * b as f64 + DMatrix::identity(dt, dt) * gamma;
    let mut inside = vec![false; m];
    let mut chosen: Vec<usize> = Vec::with_capacity(2 * b);

    for _ in 0..2 * b {
        let sigma_inv = spd_inverse(&sigma, "greedy forward aggregate")?;
        let mut best: Option<(usize, f64)> = None;
        for (i, _) in inside.iter().enumerate().filter(|(_, &used)| !used) {
            let delta = rank_update_delta(&sigma_inv, &hp.matrix, fishers.factor(i), 1.0)
                .ok_or_else(|| FiralError::Singular("greedy forward update".into()))?;
            if best.is_none_or(|(_, v)| delta > v) {
                best = Some((i, delta));
            }
        }
        let (i, _) = best.expect("2b <= m leaves a candidate");
        inside[i] = true;
        chosen.push(i);
        add_gram(&mut sigma, 1.0, fishers.factor(i));
        sigma = symmetrize(&sigma);
    }

    for _ in 0..b {
        let sigma_inv = spd_inverse(&sigma, "greedy backward aggregate")?;
        let mut best: Option<(usize, f64)> = None;
        for (pos, &i) in chosen.iter().enumerate() {
            // removal that would make the aggregate singular is never preferred
            let Some(delta) = rank_update_delta(&sigma_inv, &hp.matrix, fishers.factor(i), -1.0) else {
                continue;
            };
            if best.is_none_or(|(_, v)| delta < v) {
                best = Some((pos, delta));
            }
        }
        let (pos, _) = best.ok_or_else(|| FiralError::Singular("every greedy removal is singular".into()))?;
        let i = chosen.remove(pos);
        add_gram(&mut sigma, -1.0, fishers.factor(i));
        sigma = symmetrize(&sigma);
    }
    // final sanity: the reported set has a finite objective
    f_objective(&sigma, &hp.matrix)?;
    Ok(chosen)
}

//! Synthetic design distributions, ground-truth parameters, label sampling
//! and Monte-Carlo excess risk.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{ChiSquared, Distribution, Exp, StandardNormal};

use crate::error::{FiralError, Result};
use crate::fisher::{fir, fisher_sum, PoolHessian};
use crate::model::{log_proba, predict_proba, Pool, Theta};

/// Variance of each coordinate of the default target distribution `N(0, 100 I)`.
pub const BASE_VARIANCE: f64 = 100.0;
pub const DEFAULT_STUDENT_DOF: f64 = 5.0;

/// RNG stream ids, so that independent draws from one seed never overlap.
const STREAM_POINTS: u64 = 0;
const STREAM_LABELS: u64 = 1;

pub fn seeded_rng(seed: u64, stream: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    rng
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Family {
    Gaussian,
    /// Symmetric multivariate Laplace, `μ + √W L g` with `W ~ Exp(1)`.
    Laplace,
    /// Multivariate t with the given degrees of freedom.
    StudentT { dof: f64 },
}

#[derive(Debug, Clone)]
pub struct DesignSpec {
    pub family: Family,
    pub mean: DVector<f64>,
    pub scale: DMatrix<f64>,
    chol: DMatrix<f64>,
}

impl DesignSpec {
    pub fn new(family: Family, mean: DVector<f64>, scale: DMatrix<f64>) -> Result<Self> {
        if scale.nrows() != mean.len() || scale.ncols() != mean.len() {
            return Err(FiralError::DimensionMismatch {
                context: "design scale",
                expected: mean.len(),
                found: scale.nrows(),
            });
        }
        if let Family::StudentT { dof } = family {
            if !(dof > 2.0) {
                return Err(FiralError::InvalidInput(format!("student-t dof must exceed 2, got {dof}")));
            }
        }
        let chol = scale
            .clone()
            .cholesky()
            .ok_or_else(|| FiralError::InvalidInput("design scale matrix is not positive definite".into()))?
            .l();
        Ok(DesignSpec {
            family,
            mean,
            scale,
            chol,
        })
    }

    /// `N(0, ν · 100 I_d)`.
    pub fn dilation(d: usize, nu: f64) -> Result<Self> {
        Self::new(
            Family::Gaussian,
            DVector::zeros(d),
            DMatrix::identity(d, d) * (nu * BASE_VARIANCE),
        )
    }

    /// `N(τ a, 100 I_d)` with `a = (1/√2, 1/√2, 0, …, 0)`.
    pub fn translation(d: usize, tau: f64) -> Result<Self> {
        Self::new(
            Family::Gaussian,
            translation_direction(d) * tau,
            DMatrix::identity(d, d) * BASE_VARIANCE,
        )
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    pub fn sample_one(&self, rng: &mut impl Rng) -> DVector<f64> {
        let d = self.dim();
        let g = DVector::from_iterator(d, (0..d).map(|_| rng.sample::<f64, _>(StandardNormal)));
        let mut core = &self.chol * g;
        match self.family {
            Family::Gaussian => {}
            Family::Laplace => {
                let w: f64 = Exp::new(1.0).expect("rate 1").sample(rng);
                core *= w.sqrt();
            }
            Family::StudentT { dof } => {
                let v: f64 = ChiSquared::new(dof).expect("dof > 2").sample(rng);
                core /= (v / dof).sqrt();
            }
        }
        core + &self.mean
    }
}

pub fn translation_direction(d: usize) -> DVector<f64> {
    let mut a = DVector::zeros(d);
    a[0] = std::f64::consts::FRAC_1_SQRT_2;
    if d > 1 {
        a[1] = std::f64::consts::FRAC_1_SQRT_2;
    }
    a
}

pub fn sample_points(spec: &DesignSpec, n: usize, seed: u64) -> Vec<DVector<f64>> {
    let mut rng = seeded_rng(seed, STREAM_POINTS);
    (0..n).map(|_| spec.sample_one(&mut rng)).collect()
}

pub fn sample_pool(spec: &DesignSpec, n: usize, seed: u64) -> Result<Pool> {
    if n == 0 {
        return Err(FiralError::InvalidInput("pool size must be >= 1".into()));
    }
    Pool::new(sample_points(spec, n, seed))
}

pub fn sample_label(x: &DVector<f64>, theta: &Theta, rng: &mut impl Rng) -> Result<usize> {
    let p = predict_proba(x, theta)?;
    let u: f64 = rng.random();
    let mut acc = 0.0;
    for (k, pk) in p.iter().enumerate() {
        acc += pk;
        if u < acc {
            return Ok(k);
        }
    }
    Ok(p.len() - 1)
}

/// One label per point drawn from `p(y | x, θ*)`, zero-based.
pub fn sample_labels(points: &[DVector<f64>], theta_star: &Theta, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seeded_rng(seed, STREAM_LABELS);
    points.iter().map(|x| sample_label(x, theta_star, &mut rng)).collect()
}

/// Class frequencies of sampled labels under `N(0, 100 I)`.
pub fn class_frequencies(theta: &Theta, samples: usize, seed: u64) -> Result<Vec<f64>> {
    let spec = DesignSpec::dilation(theta.dim(), 1.0)?;
    let points = sample_points(&spec, samples, seed);
    let labels = sample_labels(&points, theta, seed)?;
    let mut freq = vec![0.0; theta.class_count()];
    for y in labels {
        freq[y] += 1.0 / samples as f64;
    }
    Ok(freq)
}

pub const BALANCE_SAMPLES: usize = 100_000;
pub const BALANCE_ATTEMPTS: usize = 100;

/// Unit-norm rows whose induced classes are nearly balanced under
/// `N(0, 100 I)`: every class frequency within `balance_tol` of `1/c`.
///
/// When `d ≥ c` the first attempt uses a random orthonormal frame `w_1..w_c`
/// and `θ_k ∝ w_k − w_c`, which makes classes exchangeable. Later attempts
/// (and `d < c`) use independent random directions.
pub fn make_theta_star(c: usize, d: usize, seed: u64, balance_tol: f64) -> Result<Theta> {
    if c < 2 || d < 1 {
        return Err(FiralError::InvalidInput(format!("need c >= 2 and d >= 1, got c={c}, d={d}")));
    }
    let mut rng = seeded_rng(seed, 2);
    let mut best: Option<(f64, Theta)> = None;
    for attempt in 0..BALANCE_ATTEMPTS {
        let gauss = DMatrix::from_fn(d, c.max(d), |_, _| rng.sample::<f64, _>(StandardNormal));
        let rows = if attempt == 0 && d >= c {
            let q = gauss.qr().q();
            DMatrix::from_fn(c - 1, d, |k, j| q[(j, k)] - q[(j, c - 1)])
        } else {
            DMatrix::from_fn(c - 1, d, |k, j| gauss[(j, k)])
        };
        let mut rows = rows;
        for mut r in rows.row_iter_mut() {
            let n = r.norm();
            r /= n;
        }
        let theta = Theta::from_matrix(rows)?;
        let freq = class_frequencies(&theta, BALANCE_SAMPLES, seed.wrapping_add(attempt as u64))?;
        let dev = freq.iter().map(|f| (f - 1.0 / c as f64).abs()).fold(0.0, f64::max);
        if dev <= balance_tol {
            return Ok(theta);
        }
        if best.as_ref().is_none_or(|(b, _)| dev < *b) {
            best = Some((dev, theta));
        }
    }
    let (dev, theta) = best.expect("at least one attempt");
    Err(FiralError::InvalidInput(format!(
        "no balanced θ* after {BALANCE_ATTEMPTS} attempts; best max deviation {dev:.4} with rows {:?}",
        theta.matrix().as_slice()
    )))
}

pub fn default_balance_tol(c: usize) -> f64 {
    0.25 / c as f64
}

/// Mean and standard error of a Monte-Carlo estimate.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Estimate {
    pub mean: f64,
    pub std_err: f64,
}

impl Estimate {
    pub fn from_samples(values: &[f64]) -> Self {
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = if values.len() > 1 {
            values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0)
        } else {
            0.0
        };
        Estimate {
            mean,
            std_err: (var / n).sqrt(),
        }
    }
}

/// `L_p(θ_n) − L_p(θ*)` on `n_points` draws from `spec_p`, both parameters
/// evaluated on the same draws. `labels_per_point = 0` sums over `y`
/// exactly (a per-point KL divergence); otherwise that many labels per point
/// are sampled from `p(y | x, θ*)`.
pub fn mc_excess_risk(
    theta_n: &Theta,
    theta_star: &Theta,
    spec_p: &DesignSpec,
    n_points: usize,
    labels_per_point: usize,
    seed: u64,
) -> Result<Estimate> {
    if n_points == 0 {
        return Err(FiralError::InvalidInput("risk sample size must be >= 1".into()));
    }
    let mut point_rng = seeded_rng(seed, STREAM_POINTS);
    let mut label_rng = seeded_rng(seed, STREAM_LABELS);
    let mut per_point = Vec::with_capacity(n_points);
    for _ in 0..n_points {
        let x = spec_p.sample_one(&mut point_rng);
        let ln = log_proba(&x, theta_n)?;
        let ls = log_proba(&x, theta_star)?;
        let diff = |y: usize| ls[y] - ln[y].max(crate::model::PROB_FLOOR.ln());
        let value = if labels_per_point == 0 {
            let ps = ls.map(f64::exp);
            (0..ps.len()).filter(|&y| ps[y] > 0.0).map(|y| ps[y] * diff(y)).sum()
        } else {
            let mut acc = 0.0;
            for _ in 0..labels_per_point {
                acc += diff(sample_label(&x, theta_star, &mut label_rng)?);
            }
            acc / labels_per_point as f64
        };
        per_point.push(value);
    }
    Ok(Estimate::from_samples(&per_point))
}

/// Monte-Carlo population Fisher `E_{x∼spec} H(x, θ)`.
pub fn population_fisher(points: &[DVector<f64>], theta: &Theta) -> Result<PoolHessian> {
    Ok(PoolHessian::new(fisher_sum(points, theta)? / points.len() as f64, points.len()))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepProtocol {
    Dilation,
    Translation,
}

/// FIR of the dilation/translation family against `p = N(0, 100 I)`, using
/// common random numbers: `base` are draws from `p`, and the sampling
/// distribution is realized as `√ν · base` or `base + τ a`.
pub struct FirCurve<'a> {
    pub protocol: SweepProtocol,
    pub base: &'a [DVector<f64>],
    pub theta: &'a Theta,
    hp: PoolHessian,
}

impl<'a> FirCurve<'a> {
    pub fn new(protocol: SweepProtocol, base: &'a [DVector<f64>], theta: &'a Theta) -> Result<Self> {
        let hp = population_fisher(base, theta)?;
        Ok(FirCurve {
            protocol,
            base,
            theta,
            hp,
        })
    }

    pub fn hp(&self) -> &PoolHessian {
        &self.hp
    }

    pub fn hq(&self, param: f64) -> Result<PoolHessian> {
        let pts: Vec<DVector<f64>> = match self.protocol {
            SweepProtocol::Dilation => {
                let s = param.sqrt();
                self.base.iter().map(|x| x * s).collect()
            }
            SweepProtocol::Translation => {
                let shift = translation_direction(self.theta.dim()) * param;
                self.base.iter().map(|x| x + &shift).collect()
            }
        };
        population_fisher(&pts, self.theta)
    }

    pub fn fir(&self, param: f64) -> Result<f64> {
        fir(&self.hq(param)?, &self.hp)
    }

    pub fn spec(&self, param: f64) -> Result<DesignSpec> {
        match self.protocol {
            SweepProtocol::Dilation => DesignSpec::dilation(self.theta.dim(), param),
            SweepProtocol::Translation => DesignSpec::translation(self.theta.dim(), param),
        }
    }

    /// Minimizer of FIR over `log ν` by golden section on `[1e-3, 1e3]`
    /// (dilation only); returns `(ν, FIR)`.
    pub fn dilation_minimum(&self) -> Result<(f64, f64)> {
        let (mut a, mut b) = (1e-3f64.ln(), 1e3f64.ln());
        let g = 0.5 * (5f64.sqrt() - 1.0);
        let mut x1 = b - g * (b - a);
        let mut x2 = a + g * (b - a);
        let mut f1 = self.fir(x1.exp())?;
        let mut f2 = self.fir(x2.exp())?;
        while b - a > 1e-3 {
            if f1 < f2 {
                b = x2;
                x2 = x1;
                f2 = f1;
                x1 = b - g * (b - a);
                f1 = self.fir(x1.exp())?;
            } else {
                a = x1;
                x1 = x2;
                f1 = f2;
                x2 = a + g * (b - a);
                f2 = self.fir(x2.exp())?;
            }
        }
        let x = 0.5 * (a + b);
        Ok((x.exp(), self.fir(x.exp())?))
    }

    /// Parameter whose FIR equals `target`. Dilation searches the branch
    /// `ν ≤ ν_min`, where FIR decreases as the sampling spread grows;
    /// translation searches `τ ≥ 0`, where FIR grows from `d̃` at `τ = 0`.
    pub fn solve(&self, target: f64) -> Result<f64> {
        let rel_tol = 1e-6;
        match self.protocol {
            SweepProtocol::Dilation => {
                let (nu_min, fir_min) = self.dilation_minimum()?;
                if target < fir_min {
                    return Err(FiralError::InvalidInput(format!(
                        "FIR target {target:.4} below the dilation minimum {fir_min:.4}"
                    )));
                }
                let mut lo = nu_min.ln();
                let mut step = 1.0;
                let mut hi_val = self.fir((lo - step).exp())?;
                while hi_val < target {
                    step *= 2.0;
                    if step > 60.0 {
                        return Err(FiralError::InvalidInput(format!("FIR target {target} unreachable")));
                    }
                    hi_val = self.fir((lo - step).exp())?;
                }
                let mut hi = lo - step;
                // FIR(lo) ≤ target ≤ FIR(hi), hi < lo in log ν
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let v = self.fir(mid.exp())?;
                    if (v - target).abs() <= rel_tol * target {
                        return Ok(mid.exp());
                    }
                    if v > target {
                        hi = mid;
                    } else {
                        lo = mid;
                    }
                }
                Ok((0.5 * (lo + hi)).exp())
            }
            SweepProtocol::Translation => {
                let start = self.fir(0.0)?;
                if target < start {
                    return Err(FiralError::InvalidInput(format!(
                        "FIR target {target:.4} below the translation start {start:.4}"
                    )));
                }
                let mut hi = 1.0;
                while self.fir(hi)? < target {
                    hi *= 2.0;
                    if hi > 1e6 {
                        return Err(FiralError::InvalidInput(format!("FIR target {target} unreachable")));
                    }
                }
                let mut lo = 0.0;
                for _ in 0..200 {
                    let mid = 0.5 * (lo + hi);
                    let v = self.fir(mid)?;
                    if (v - target).abs() <= rel_tol * target {
                        return Ok(mid);
                    }
                    if v < target {
                        lo = mid;
                    } else {
                        hi = mid;
                    }
                }
                Ok(0.5 * (lo + hi))
            }
        }
    }
}

/// `count` log-spaced values on `[lo, hi]`.
pub fn log_spaced(lo: f64, hi: f64, count: usize) -> Vec<f64> {
    if count == 1 {
        return vec![lo];
    }
    let (a, b) = (lo.ln(), hi.ln());
    (0..count)
        .map(|i| (a + (b - a) * i as f64 / (count - 1) as f64).exp())
        .collect()
}

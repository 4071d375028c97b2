//! Experiment harness: run configuration, the multi-round active-learning
//! loop, FIR sweeps, theory-mode audits and CSV output.

use std::fmt;
use std::io::Write;
use std::path::PathBuf;
use std::str::FromStr;
use std::time::Instant;

use nalgebra::DVector;
use rand::seq::index::sample;

use crate::baselines::{select_entropy, select_greedy_fb, select_kmeans, select_random, select_var_ratios};
use crate::bounds::nine_fifths_envelope;
use crate::dataset::read_dataset;
use crate::error::{FiralError, Result};
use crate::fisher::{f_indices, fir, fisher_sum, labeled_shift, pool_hessian, sigma_max, whiten_factors, FisherSet, PoolHessian, WhitenedFactors};
use crate::model::{fit_erm, predict_proba, ErmOptions, LabeledExample, Pool, Theta};
use crate::relax::{relax_solve, RelaxOptions};
use crate::sparsify::{regret_audit, select_batch, AuditReport, Selection};
use crate::synth::{
    default_balance_tol, log_spaced, make_theta_star, mc_excess_risk, sample_labels, sample_points, seeded_rng, DesignSpec,
    Estimate, Family, FirCurve, SweepProtocol, DEFAULT_STUDENT_DOF,
};

/// SplitMix64 finalizer, used to derive independent seeds from a base seed.
pub fn derive_seed(base: u64, tag: u64, index: u64) -> u64 {
    let mut z = base ^ tag.wrapping_mul(0x9E37_79B9_7F4A_7C15) ^ index.wrapping_mul(0xD1B5_4A32_D192_ED03);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

const TAG_POOL: u64 = 1;
const TAG_THETA: u64 = 2;
const TAG_INIT: u64 = 3;
const TAG_SELECT: u64 = 4;
const TAG_EVAL: u64 = 5;
const TAG_SWEEP: u64 = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SelectorKind {
    Firal,
    Random,
    Kmeans,
    Entropy,
    VarRatios,
    GreedyFb,
}

impl SelectorKind {
    pub const ALL: [SelectorKind; 6] = [
        SelectorKind::Firal,
        SelectorKind::Random,
        SelectorKind::Kmeans,
        SelectorKind::Entropy,
        SelectorKind::VarRatios,
        SelectorKind::GreedyFb,
    ];

    pub fn name(self) -> &'static str {
        match self {
            SelectorKind::Firal => "firal",
            SelectorKind::Random => "random",
            SelectorKind::Kmeans => "kmeans",
            SelectorKind::Entropy => "entropy",
            SelectorKind::VarRatios => "var_ratios",
            SelectorKind::GreedyFb => "greedy_fb",
        }
    }
}

impl fmt::Display for SelectorKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for SelectorKind {
    type Err = FiralError;

    fn from_str(s: &str) -> Result<Self> {
        SelectorKind::ALL
            .into_iter()
            .find(|k| k.name() == s)
            .ok_or_else(|| FiralError::InvalidInput(format!("unknown selector {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSource {
    pub classes: usize,
    pub dim: usize,
    pub pool_size: usize,
    pub family: Family,
    /// Pool covariance multiplier relative to `100 I`.
    pub nu: f64,
    /// Pool mean offset along `(1/√2, 1/√2, 0, …)`.
    pub tau: f64,
}

impl Default for SyntheticSource {
    fn default() -> Self {
        SyntheticSource {
            classes: 3,
            dim: 8,
            pool_size: 3000,
            family: Family::Gaussian,
            nu: 1.0,
            tau: 0.0,
        }
    }
}

impl SyntheticSource {
    pub fn pool_spec(&self) -> Result<DesignSpec> {
        let mean = crate::synth::translation_direction(self.dim) * self.tau;
        let scale = nalgebra::DMatrix::identity(self.dim, self.dim) * (self.nu * crate::synth::BASE_VARIANCE);
        DesignSpec::new(self.family, mean, scale)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum DataSource {
    Synthetic(SyntheticSource),
    Csv(PathBuf),
}

#[derive(Debug, Clone, PartialEq)]
pub enum EtaChoice {
    Fixed(f64),
    /// `{2^k √d̃ : k = −2, …, 5}`, keeping the η with the largest `λmin`.
    Grid,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub seed: u64,
    pub source: DataSource,
    pub selector: SelectorKind,
    pub budget: usize,
    pub rounds: usize,
    pub initial_per_class: usize,
    pub eta: EtaChoice,
    /// Points drawn from the target distribution for risk estimates.
    pub eval_points: usize,
    /// Labels sampled per evaluation point; 0 sums over classes exactly.
    pub eval_labels: usize,
    pub ridge: f64,
    pub theory_mode: bool,
    pub relax_iterations: usize,
    pub record_time: bool,
    pub out: Option<PathBuf>,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            seed: 0,
            source: DataSource::Synthetic(SyntheticSource::default()),
            selector: SelectorKind::Firal,
            budget: 30,
            rounds: 3,
            initial_per_class: 1,
            eta: EtaChoice::Grid,
            eval_points: 50_000,
            eval_labels: 0,
            ridge: 1e-3,
            theory_mode: false,
            relax_iterations: RelaxOptions::default().iterations,
            record_time: false,
            out: None,
        }
    }
}

fn parse<T: FromStr>(key: &str, value: &str) -> Result<T> {
    value
        .parse()
        .map_err(|_| FiralError::InvalidInput(format!("bad value {value:?} for {key}")))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" => Ok(true),
        "false" | "0" | "no" => Ok(false),
        _ => Err(FiralError::InvalidInput(format!("bad boolean {value:?} for {key}"))),
    }
}

fn parse_family(value: &str, dof: f64) -> Result<Family> {
    match value {
        "gaussian" => Ok(Family::Gaussian),
        "laplace" => Ok(Family::Laplace),
        "student_t" => Ok(Family::StudentT { dof }),
        _ => Err(FiralError::InvalidInput(format!("unknown family {value:?}"))),
    }
}

/// Splits `key = value` lines; blank lines and `#` comments are skipped.
pub fn parse_kv(text: &str) -> Result<Vec<(String, String)>> {
    let mut out = Vec::new();
    for (no, line) in text.lines().enumerate() {
        let line = line.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let (k, v) = line
            .split_once('=')
            .ok_or_else(|| FiralError::InvalidInput(format!("config line {}: expected key=value", no + 1)))?;
        out.push((k.trim().to_string(), v.trim().to_string()));
    }
    Ok(out)
}

impl RunConfig {
    pub fn from_kv(text: &str) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (k, v) in parse_kv(text)? {
            cfg.set(&k, &v)?;
        }
        Ok(cfg)
    }

    fn synthetic_mut(&mut self, key: &str) -> Result<&mut SyntheticSource> {
        match &mut self.source {
            DataSource::Synthetic(s) => Ok(s),
            DataSource::Csv(_) => Err(FiralError::InvalidInput(format!("{key} only applies to synthetic sources"))),
        }
    }

    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "source" => {
                self.source = if value == "synthetic" {
                    DataSource::Synthetic(SyntheticSource::default())
                } else {
                    DataSource::Csv(PathBuf::from(value))
                }
            }
            "classes" => self.synthetic_mut(key)?.classes = parse(key, value)?,
            "dim" => self.synthetic_mut(key)?.dim = parse(key, value)?,
            "pool_size" => self.synthetic_mut(key)?.pool_size = parse(key, value)?,
            "family" => {
                let s = self.synthetic_mut(key)?;
                let dof = match s.family {
                    Family::StudentT { dof } => dof,
                    _ => DEFAULT_STUDENT_DOF,
                };
                s.family = parse_family(value, dof)?;
            }
            "dof" => {
                let dof = parse(key, value)?;
                let s = self.synthetic_mut(key)?;
                s.family = match s.family {
                    Family::StudentT { .. } => Family::StudentT { dof },
                    _ => return Err(FiralError::InvalidInput("dof requires family=student_t first".into())),
                };
            }
            "nu" => self.synthetic_mut(key)?.nu = parse(key, value)?,
            "tau" => self.synthetic_mut(key)?.tau = parse(key, value)?,
            "selector" => self.selector = value.parse()?,
            "budget" => self.budget = parse(key, value)?,
            "rounds" => self.rounds = parse(key, value)?,
            "initial_per_class" => self.initial_per_class = parse(key, value)?,
            "eta" => {
                self.eta = if value == "grid" {
                    EtaChoice::Grid
                } else {
                    EtaChoice::Fixed(parse(key, value)?)
                }
            }
            "eval_points" => self.eval_points = parse(key, value)?,
            "eval_labels" => self.eval_labels = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            "theory_mode" => self.theory_mode = parse_bool(key, value)?,
            "relax_iterations" => self.relax_iterations = parse(key, value)?,
            "record_time" => self.record_time = parse_bool(key, value)?,
            "out" => self.out = Some(PathBuf::from(value)),
            _ => return Err(FiralError::InvalidInput(format!("unknown config key {key:?}"))),
        }
        Ok(())
    }

    /// Per-round budget `b / r`.
    pub fn round_budget(&self) -> usize {
        self.budget.checked_div(self.rounds).unwrap_or(0)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(FiralError::InvalidInput(m));
        if self.rounds > 0 {
            if self.budget == 0 {
                return bad("budget must be positive".into());
            }
            if !self.budget.is_multiple_of(self.rounds) {
                return bad(format!("budget {} is not divisible by rounds {}", self.budget, self.rounds));
            }
        }
        if self.initial_per_class == 0 {
            return bad("initial_per_class must be positive".into());
        }
        if self.eval_points == 0 {
            return bad("eval_points must be positive".into());
        }
        if !(self.ridge >= 0.0) {
            return bad("ridge must be nonnegative".into());
        }
        if let EtaChoice::Fixed(e) = self.eta {
            if !(e > 0.0) {
                return bad("eta must be positive".into());
            }
        }
        if let DataSource::Synthetic(s) = &self.source {
            if s.classes < 2 || s.dim == 0 || s.pool_size == 0 || !(s.nu > 0.0) {
                return bad("synthetic source needs classes >= 2, dim >= 1, pool_size >= 1, nu > 0".into());
            }
        }
        Ok(())
    }
}

/// Ground truth for synthetic runs.
#[derive(Debug, Clone)]
pub struct Truth {
    pub theta_star: Theta,
    pub target: DesignSpec,
}

#[derive(Debug, Clone)]
pub struct LoadedData {
    pub pool: Pool,
    /// Oracle answers, zero-based.
    pub labels: Vec<usize>,
    pub classes: usize,
    pub truth: Option<Truth>,
}

pub fn load_data(cfg: &RunConfig) -> Result<LoadedData> {
    match &cfg.source {
        DataSource::Csv(path) => {
            let ds = read_dataset(path)?;
            Ok(LoadedData {
                pool: Pool::new(ds.points)?,
                labels: ds.labels,
                classes: ds.classes,
                truth: None,
            })
        }
        DataSource::Synthetic(s) => {
            let theta_star = make_theta_star(
                s.classes,
                s.dim,
                derive_seed(cfg.seed, TAG_THETA, 0),
                default_balance_tol(s.classes),
            )?;
            let pool_seed = derive_seed(cfg.seed, TAG_POOL, 0);
            let points = sample_points(&s.pool_spec()?, s.pool_size, pool_seed);
            let labels = sample_labels(&points, &theta_star, pool_seed)?;
            Ok(LoadedData {
                pool: Pool::new(points)?,
                labels,
                classes: s.classes,
                truth: Some(Truth {
                    theta_star,
                    target: DesignSpec::dilation(s.dim, 1.0)?,
                }),
            })
        }
    }
}

/// `initial_per_class` random pool points from every class, class by class.
pub fn initial_labeled(labels: &[usize], classes: usize, per_class: usize, seed: u64) -> Result<Vec<usize>> {
    let mut rng = seeded_rng(seed, 0);
    let mut out = Vec::with_capacity(classes * per_class);
    for k in 0..classes {
        let members: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == k).collect();
        if members.len() < per_class {
            return Err(FiralError::InvalidInput(format!(
                "class {} has {} points, fewer than initial_per_class = {per_class}",
                k + 1,
                members.len()
            )));
        }
        out.extend(sample(&mut rng, members.len(), per_class).into_iter().map(|j| members[j]));
    }
    Ok(out)
}

/// Default candidate learning rates `{2^k √d̃ : k = −2, …, 5}`.
pub fn eta_grid(d_tilde: usize) -> Vec<f64> {
    let s = (d_tilde as f64).sqrt();
    (-2..=5).map(|k| 2f64.powi(k) * s).collect()
}

/// Runs the rounding for each η and keeps the one with the largest
/// `λmin(Σ_t H̃(x_{i_t}))`; the first of equal values wins.
pub fn tune_eta(grid: &[f64], factors: &WhitenedFactors, b: usize, mask_selected: bool) -> Result<(f64, Selection)> {
    if grid.is_empty() {
        return Err(FiralError::InvalidInput("empty learning-rate grid".into()));
    }
    let mut best: Option<Selection> = None;
    for &eta in grid {
        let sel = select_batch(b, eta, factors, mask_selected)?;
        if best.as_ref().is_none_or(|bs| sel.final_lambda_min() > bs.final_lambda_min()) {
            best = Some(sel);
        }
    }
    let sel = best.expect("nonempty grid");
    Ok((sel.eta, sel))
}

/// Output of one FIRAL batch selection.
#[derive(Debug, Clone)]
pub struct FiralBatch {
    /// Indices into the candidate set.
    pub indices: Vec<usize>,
    pub eta: f64,
    pub audit: AuditReport,
    /// `f(z_⋄)`.
    pub relax_objective: f64,
    /// `f` of the rounded selection.
    pub selected_objective: f64,
    pub box_violations: usize,
}

#[allow(clippy::too_many_arguments)]
pub fn firal_select(
    candidates: &Pool,
    hp: &PoolHessian,
    labeled: &[DVector<f64>],
    theta: &Theta,
    b: usize,
    eta: &EtaChoice,
    mask_selected: bool,
    relax: RelaxOptions,
) -> Result<FiralBatch> {
    let shift = labeled_shift(labeled, theta, b)?;
    let fishers = FisherSet::new(candidates, theta, shift)?;
    let outcome = relax_solve(b, hp, &fishers, relax)?;
    let whitened = whiten_factors(&outcome.weights, &fishers)?;
    let selection = match eta {
        EtaChoice::Fixed(e) => select_batch(b, *e, &whitened, mask_selected)?,
        EtaChoice::Grid => tune_eta(&eta_grid(theta.d_tilde()), &whitened, b, mask_selected)?.1,
    };
    let selected_objective = f_indices(&selection.indices, &fishers, hp)?;
    Ok(FiralBatch {
        audit: regret_audit(&selection),
        eta: selection.eta,
        indices: selection.indices,
        relax_objective: outcome.objective,
        selected_objective,
        box_violations: outcome.box_violations,
    })
}

/// One row of the results file.
#[derive(Debug, Clone, PartialEq)]
pub struct ExperimentRecord {
    pub round: usize,
    pub labeled: usize,
    /// `Tr(H_L⁻¹ H_p)` at the current fit, `H_L` averaged over labeled points.
    pub fir: f64,
    /// `λmax(H_L^{-1/2} H_p H_L^{-1/2})`.
    pub sigma: f64,
    pub excess_risk: f64,
    pub excess_risk_se: f64,
    pub accuracy: f64,
    pub eta: f64,
    pub ftrl_margin: f64,
    pub trace_margin: f64,
    pub relax_objective: f64,
    pub selected_objective: f64,
    /// Pool indices labeled in this round.
    pub selected: Vec<usize>,
    pub wall_time: f64,
}

pub const RESULT_COLUMNS: [&str; 14] = [
    "round",
    "labeled",
    "fir",
    "sigma",
    "excess_risk",
    "excess_risk_se",
    "accuracy",
    "eta",
    "ftrl_margin",
    "trace_margin",
    "relax_objective",
    "selected_objective",
    "selected",
    "wall_time",
];

fn fmt_f(v: f64) -> String {
    format!("{v:.16e}")
}

pub fn write_results(mut w: impl Write, records: &[ExperimentRecord]) -> Result<()> {
    writeln!(w, "{}", RESULT_COLUMNS.join(","))?;
    for r in records {
        let sel: Vec<String> = r.selected.iter().map(|i| i.to_string()).collect();
        let fields = [
            r.round.to_string(),
            r.labeled.to_string(),
            fmt_f(r.fir),
            fmt_f(r.sigma),
            fmt_f(r.excess_risk),
            fmt_f(r.excess_risk_se),
            fmt_f(r.accuracy),
            fmt_f(r.eta),
            fmt_f(r.ftrl_margin),
            fmt_f(r.trace_margin),
            fmt_f(r.relax_objective),
            fmt_f(r.selected_objective),
            sel.join(";"),
            fmt_f(r.wall_time),
        ];
        writeln!(w, "{}", fields.join(","))?;
    }
    Ok(())
}

pub fn emit_results(records: &[ExperimentRecord], path: &std::path::Path) -> Result<()> {
    let mut f = std::io::BufWriter::new(std::fs::File::create(path)?);
    write_results(&mut f, records)?;
    f.flush()?;
    Ok(())
}

fn labeled_fir(labeled: &[DVector<f64>], hp: &PoolHessian, theta: &Theta) -> (f64, f64) {
    let hq = match fisher_sum(labeled, theta) {
        Ok(s) => PoolHessian::new(s / labeled.len() as f64, labeled.len()),
        Err(_) => return (f64::NAN, f64::NAN),
    };
    (fir(&hq, hp).unwrap_or(f64::NAN), sigma_max(&hq, hp).unwrap_or(f64::NAN))
}

fn pool_accuracy(pool: &Pool, labels: &[usize], theta: &Theta) -> Result<f64> {
    let mut hits = 0usize;
    for (x, &y) in pool.points().iter().zip(labels) {
        let p = predict_proba(x, theta)?;
        if p.argmax().0 == y {
            hits += 1;
        }
    }
    Ok(hits as f64 / pool.len() as f64)
}

/// The multi-round loop. Record 0 describes the initial fit; record `k`
/// lists the batch labeled in round `k` and the fit that follows it.
pub fn active_learning_loop(cfg: &RunConfig) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let data = load_data(cfg)?;
    run_loop(cfg, &data)
}

pub fn run_loop(cfg: &RunConfig, data: &LoadedData) -> Result<Vec<ExperimentRecord>> {
    cfg.validate()?;
    let m = data.pool.len();
    let mut labeled = initial_labeled(&data.labels, data.classes, cfg.initial_per_class, derive_seed(cfg.seed, TAG_INIT, 0))?;
    let rb = cfg.round_budget();
    if labeled.len() + cfg.budget * (cfg.rounds > 0) as usize > m {
        return Err(FiralError::InvalidInput(format!(
            "budget {} exceeds the {} unlabeled pool points",
            cfg.budget,
            m - labeled.len()
        )));
    }
    let erm = ErmOptions {
        ridge: cfg.ridge,
        ..ErmOptions::default()
    };
    let eval_seed = derive_seed(cfg.seed, TAG_EVAL, 0);
    let relax = RelaxOptions {
        iterations: cfg.relax_iterations,
        ..RelaxOptions::default()
    };

    let mut records = Vec::with_capacity(cfg.rounds + 1);
    for round in 0..=cfg.rounds {
        let clock = Instant::now();
        let wrap = |e: FiralError| e.in_round(round);
        let mut rec_eta = f64::NAN;
        let mut audit: Option<AuditReport> = None;
        let mut objectives = (f64::NAN, f64::NAN);
        let mut batch = Vec::new();

        if round > 0 {
            let theta_prev = fit_labeled(data, &labeled, erm).map_err(wrap)?;
            let mut is_labeled = vec![false; m];
            for &i in &labeled {
                is_labeled[i] = true;
            }
            let cand_global: Vec<usize> = (0..m).filter(|&i| !is_labeled[i]).collect();
            let candidates = data.pool.subset(&cand_global)?;
            let sel_seed = derive_seed(cfg.seed, TAG_SELECT, round as u64);
            let local = match cfg.selector {
                SelectorKind::Random => select_random(&candidates, rb, sel_seed),
                SelectorKind::Kmeans => select_kmeans(&candidates, rb, sel_seed),
                SelectorKind::Entropy => select_entropy(&candidates, &theta_prev, rb),
                SelectorKind::VarRatios => select_var_ratios(&candidates, &theta_prev, rb),
                SelectorKind::GreedyFb => (|| {
                    let hp = pool_hessian(&data.pool, &theta_prev)?;
                    let lab: Vec<DVector<f64>> = labeled.iter().map(|&i| data.pool.point(i).clone()).collect();
                    let fishers = FisherSet::new(&candidates, &theta_prev, labeled_shift(&lab, &theta_prev, rb)?)?;
                    select_greedy_fb(&fishers, &hp, rb)
                })(),
                SelectorKind::Firal => (|| {
                    let hp = pool_hessian(&data.pool, &theta_prev)?;
                    let lab: Vec<DVector<f64>> = labeled.iter().map(|&i| data.pool.point(i).clone()).collect();
                    let fb = firal_select(&candidates, &hp, &lab, &theta_prev, rb, &cfg.eta, !cfg.theory_mode, relax)?;
                    rec_eta = fb.eta;
                    audit = Some(fb.audit);
                    objectives = (fb.relax_objective, fb.selected_objective);
                    Ok(fb.indices)
                })(),
            }
            .map_err(wrap)?;
            batch = local.into_iter().map(|j| cand_global[j]).collect();
            labeled.extend(&batch);
        }

        let theta = fit_labeled(data, &labeled, erm).map_err(wrap)?;
        let hp = pool_hessian(&data.pool, &theta).map_err(wrap)?;
        let lab_points: Vec<DVector<f64>> = labeled.iter().map(|&i| data.pool.point(i).clone()).collect();
        let (fir_value, sigma) = labeled_fir(&lab_points, &hp, &theta);
        let risk = match &data.truth {
            Some(t) => mc_excess_risk(&theta, &t.theta_star, &t.target, cfg.eval_points, cfg.eval_labels, eval_seed).map_err(wrap)?,
            None => Estimate {
                mean: f64::NAN,
                std_err: f64::NAN,
            },
        };
        let accuracy = pool_accuracy(&data.pool, &data.labels, &theta).map_err(wrap)?;
        records.push(ExperimentRecord {
            round,
            labeled: labeled.len(),
            fir: fir_value,
            sigma,
            excess_risk: risk.mean,
            excess_risk_se: risk.std_err,
            accuracy,
            eta: rec_eta,
            ftrl_margin: audit.as_ref().map_or(f64::NAN, |a| a.worst_ftrl_margin),
            trace_margin: audit.as_ref().and_then(|a| a.worst_trace_margin).unwrap_or(f64::NAN),
            relax_objective: objectives.0,
            selected_objective: objectives.1,
            selected: batch,
            wall_time: if cfg.record_time {
                clock.elapsed().as_secs_f64()
            } else {
                f64::NAN
            },
        });
    }
    Ok(records)
}

fn fit_labeled(data: &LoadedData, labeled: &[usize], opts: ErmOptions) -> Result<Theta> {
    let examples: Vec<LabeledExample> = labeled
        .iter()
        .map(|&i| LabeledExample::new(data.pool.point(i).clone(), data.labels[i]))
        .collect();
    Ok(fit_erm(&examples, data.classes, opts)?.theta)
}

/// Settings of the synthetic FIR sweep.
#[derive(Debug, Clone, PartialEq)]
pub struct SweepConfig {
    pub seed: u64,
    pub protocol: SweepProtocol,
    pub classes: usize,
    pub dim: usize,
    /// Labeled sample size per fit.
    pub n: usize,
    pub settings: usize,
    pub seeds: usize,
    pub eval_points: usize,
    pub eval_labels: usize,
    /// Monte-Carlo size for the population Fisher matrices.
    pub fir_points: usize,
    /// FIR range as multiples of `d̃`.
    pub fir_lo: f64,
    pub fir_hi: f64,
    pub ridge: f64,
}

impl Default for SweepConfig {
    fn default() -> Self {
        SweepConfig {
            seed: 0,
            protocol: SweepProtocol::Dilation,
            classes: 2,
            dim: 8,
            n: 1600,
            settings: 5,
            seeds: 10,
            eval_points: 50_000,
            eval_labels: 0,
            fir_points: 200_000,
            fir_lo: 0.2,
            fir_hi: 10.0,
            ridge: ErmOptions::default().ridge,
        }
    }
}

impl SweepConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "protocol" => {
                self.protocol = match value {
                    "dilation" => SweepProtocol::Dilation,
                    "translation" => SweepProtocol::Translation,
                    _ => return Err(FiralError::InvalidInput(format!("unknown protocol {value:?}"))),
                }
            }
            "classes" => self.classes = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "n" => self.n = parse(key, value)?,
            "settings" => self.settings = parse(key, value)?,
            "seeds" => self.seeds = parse(key, value)?,
            "eval_points" => self.eval_points = parse(key, value)?,
            "eval_labels" => self.eval_labels = parse(key, value)?,
            "fir_points" => self.fir_points = parse(key, value)?,
            "fir_lo" => self.fir_lo = parse(key, value)?,
            "fir_hi" => self.fir_hi = parse(key, value)?,
            "ridge" => self.ridge = parse(key, value)?,
            _ => return Err(FiralError::InvalidInput(format!("unknown sweep key {key:?}"))),
        }
        Ok(())
    }

    pub fn validate(&self) -> Result<()> {
        if self.classes < 2 || self.dim == 0 || self.n == 0 || self.settings == 0 || self.seeds == 0 {
            return Err(FiralError::InvalidInput("sweep counts must be positive and classes >= 2".into()));
        }
        if self.eval_points == 0 || self.fir_points == 0 || !(self.fir_lo > 0.0 && self.fir_hi > self.fir_lo) {
            return Err(FiralError::InvalidInput("sweep needs eval_points, fir_points >= 1 and 0 < fir_lo < fir_hi".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SweepRecord {
    pub setting: usize,
    /// `ν_q` (dilation) or `τ_q` (translation).
    pub param: f64,
    pub fir: f64,
    pub seed_index: usize,
    pub excess_risk: f64,
    pub excess_risk_se: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct SettingSummary {
    pub param: f64,
    pub fir: f64,
    pub mean_risk: f64,
    /// Standard error across seeds.
    pub se_risk: f64,
    pub envelope: f64,
}

#[derive(Debug, Clone)]
pub struct SweepOutcome {
    pub d_tilde: usize,
    /// Realized FIR range after clipping to what the protocol can reach.
    pub fir_range: (f64, f64),
    pub records: Vec<SweepRecord>,
    pub settings: Vec<SettingSummary>,
    /// Least-squares slope of `log(mean risk)` on `log(FIR)`.
    pub slope: f64,
}

pub fn log_log_slope(x: &[f64], y: &[f64]) -> f64 {
    let lx: Vec<f64> = x.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = y.iter().map(|v| v.ln()).collect();
    let n = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / n;
    let my = ly.iter().sum::<f64>() / n;
    let sxy: f64 = lx.iter().zip(&ly).map(|(a, b)| (a - mx) * (b - my)).sum();
    let sxx: f64 = lx.iter().map(|a| (a - mx).powi(2)).sum();
    sxy / sxx
}

/// For each FIR target, solves for the protocol parameter, then fits ERM on
/// `n` labeled draws from `q` per seed and measures excess risk under `p`.
/// Dilation targets below the attainable FIR minimum are raised to
/// `1.05 ×` that minimum.
pub fn run_sweep(cfg: &SweepConfig) -> Result<SweepOutcome> {
    cfg.validate()?;
    let theta_star = make_theta_star(
        cfg.classes,
        cfg.dim,
        derive_seed(cfg.seed, TAG_THETA, 0),
        default_balance_tol(cfg.classes),
    )?;
    let dt = theta_star.d_tilde();
    let target_p = DesignSpec::dilation(cfg.dim, 1.0)?;
    let base = sample_points(&target_p, cfg.fir_points, derive_seed(cfg.seed, TAG_SWEEP, 0));
    let curve = FirCurve::new(cfg.protocol, &base, &theta_star)?;
    let mut lo = cfg.fir_lo * dt as f64;
    let hi = cfg.fir_hi * dt as f64;
    let floor = match cfg.protocol {
        SweepProtocol::Dilation => 1.05 * curve.dilation_minimum()?.1,
        SweepProtocol::Translation => curve.fir(0.0)?,
    };
    lo = lo.max(floor);
    if lo >= hi {
        return Err(FiralError::InvalidInput(format!("FIR range [{lo:.4}, {hi:.4}] is empty for this protocol")));
    }
    let erm = ErmOptions {
        ridge: cfg.ridge,
        ..ErmOptions::default()
    };
    let eval_seed = derive_seed(cfg.seed, TAG_EVAL, 0);
    let mut records = Vec::new();
    let mut settings = Vec::new();
    for (s, target) in log_spaced(lo, hi, cfg.settings).into_iter().enumerate() {
        let param = curve.solve(target)?;
        let fir_value = curve.fir(param)?;
        let spec_q = curve.spec(param)?;
        let mut risks = Vec::with_capacity(cfg.seeds);
        for k in 0..cfg.seeds {
            let seed = derive_seed(cfg.seed, TAG_SAMPLE_BASE + s as u64, k as u64);
            let pts = sample_points(&spec_q, cfg.n, seed);
            let ys = sample_labels(&pts, &theta_star, seed)?;
            let examples: Vec<LabeledExample> = pts.into_iter().zip(ys).map(|(x, y)| LabeledExample::new(x, y)).collect();
            let fit = fit_erm(&examples, cfg.classes, erm)?;
            let risk = mc_excess_risk(&fit.theta, &theta_star, &target_p, cfg.eval_points, cfg.eval_labels, eval_seed)?;
            risks.push(risk.mean);
            records.push(SweepRecord {
                setting: s,
                param,
                fir: fir_value,
                seed_index: k,
                excess_risk: risk.mean,
                excess_risk_se: risk.std_err,
                envelope: nine_fifths_envelope(fir_value, cfg.n),
            });
        }
        let est = Estimate::from_samples(&risks);
        settings.push(SettingSummary {
            param,
            fir: fir_value,
            mean_risk: est.mean,
            se_risk: est.std_err,
            envelope: nine_fifths_envelope(fir_value, cfg.n),
        });
    }
    let firs: Vec<f64> = settings.iter().map(|s| s.fir).collect();
    let means: Vec<f64> = settings.iter().map(|s| s.mean_risk).collect();
    let slope = if settings.len() > 1 { log_log_slope(&firs, &means) } else { f64::NAN };
    Ok(SweepOutcome {
        d_tilde: dt,
        fir_range: (lo, hi),
        records,
        settings,
        slope,
    })
}

const TAG_SAMPLE_BASE: u64 = 1000;

pub fn write_sweep(mut w: impl Write, outcome: &SweepOutcome) -> Result<()> {
    writeln!(w, "setting,param,fir,seed_index,excess_risk,excess_risk_se,envelope")?;
    for r in &outcome.records {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            r.setting,
            fmt_f(r.param),
            fmt_f(r.fir),
            r.seed_index,
            fmt_f(r.excess_risk),
            fmt_f(r.excess_risk_se),
            fmt_f(r.envelope)
        )?;
    }
    Ok(())
}

/// Theory-mode audit instance: a synthetic pool, no labeled set, and one
/// relax-and-round pass with repeats allowed.
#[derive(Debug, Clone, PartialEq)]
pub struct AuditConfig {
    pub seed: u64,
    pub classes: usize,
    pub dim: usize,
    pub pool_size: usize,
    /// Defaults to `⌈32 d̃ + 16 √d̃⌉`.
    pub budget: Option<usize>,
    pub epsilon: f64,
    /// Defaults to `8 √d̃ / ε`.
    pub eta: Option<f64>,
    pub relax_iterations: usize,
}

impl Default for AuditConfig {
    fn default() -> Self {
        AuditConfig {
            seed: 0,
            classes: 2,
            dim: 2,
            pool_size: 200,
            budget: None,
            epsilon: 1.0,
            eta: None,
            relax_iterations: 1000,
        }
    }
}

impl AuditConfig {
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        match key {
            "seed" => self.seed = parse(key, value)?,
            "classes" => self.classes = parse(key, value)?,
            "dim" => self.dim = parse(key, value)?,
            "pool_size" => self.pool_size = parse(key, value)?,
            "budget" => self.budget = Some(parse(key, value)?),
            "epsilon" => self.epsilon = parse(key, value)?,
            "eta" => self.eta = Some(parse(key, value)?),
            "relax_iterations" => self.relax_iterations = parse(key, value)?,
            _ => return Err(FiralError::InvalidInput(format!("unknown audit key {key:?}"))),
        }
        Ok(())
    }
}

pub fn theory_budget(d_tilde: usize) -> usize {
    let dt = d_tilde as f64;
    (32.0 * dt + 16.0 * dt.sqrt()).ceil() as usize
}

#[derive(Debug, Clone)]
pub struct AuditOutcome {
    pub selection: Selection,
    pub report: AuditReport,
    pub relax_objective: f64,
    pub selected_objective: f64,
    /// `f(selected) / f(z_⋄)`, to compare against `1 + ε`.
    pub ratio: f64,
    pub epsilon: f64,
}

pub fn run_audit(cfg: &AuditConfig) -> Result<AuditOutcome> {
    if cfg.classes < 2 || cfg.dim == 0 || cfg.pool_size == 0 || !(cfg.epsilon > 0.0) {
        return Err(FiralError::InvalidInput("audit needs classes >= 2, dim, pool_size >= 1 and epsilon > 0".into()));
    }
    let theta = make_theta_star(cfg.classes, cfg.dim, derive_seed(cfg.seed, TAG_THETA, 0), default_balance_tol(cfg.classes))?;
    let pool = Pool::new(sample_points(&DesignSpec::dilation(cfg.dim, 1.0)?, cfg.pool_size, derive_seed(cfg.seed, TAG_POOL, 0)))?;
    let dt = theta.d_tilde();
    let b = cfg.budget.unwrap_or_else(|| theory_budget(dt));
    let eta = cfg.eta.unwrap_or(8.0 * (dt as f64).sqrt() / cfg.epsilon);
    let hp = pool_hessian(&pool, &theta)?;
    let fishers = FisherSet::new(&pool, &theta, nalgebra::DMatrix::zeros(dt, dt))?;
    let outcome = relax_solve(
        b,
        &hp,
        &fishers,
        RelaxOptions {
            iterations: cfg.relax_iterations,
            ..RelaxOptions::default()
        },
    )?;
    let whitened = whiten_factors(&outcome.weights, &fishers)?;
    let selection = select_batch(b, eta, &whitened, false)?;
    let selected_objective = f_indices(&selection.indices, &fishers, &hp)?;
    Ok(AuditOutcome {
        report: regret_audit(&selection),
        ratio: selected_objective / outcome.objective,
        relax_objective: outcome.objective,
        selected_objective,
        selection,
        epsilon: cfg.epsilon,
    })
}

pub fn write_audit(mut w: impl Write, outcome: &AuditOutcome) -> Result<()> {
    writeln!(w, "t,index,score,gain,max_gain,trace_a,lambda_min")?;
    for s in &outcome.selection.steps {
        writeln!(
            w,
            "{},{},{},{},{},{},{}",
            s.t,
            s.index,
            fmt_f(s.score),
            fmt_f(s.gain),
            fmt_f(s.max_gain),
            fmt_f(s.trace_a),
            fmt_f(s.lambda_min_after)
        )?;
    }
    Ok(())
}

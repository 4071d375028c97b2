use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};

use firal::dataset::{read_matrix, write_matrix};
use firal::embed::{spectral_embed, EmbeddingConfig};
use firal::experiment::{
    active_learning_loop, parse_kv, run_audit, run_sweep, write_audit, write_results, write_sweep, AuditConfig, RunConfig,
    SweepConfig,
};
use firal::{FiralError, Result};

#[derive(Parser)]
#[command(name = "firal", version, about = "Fisher-information-ratio batch active learning")]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Multi-round active learning on a synthetic or CSV pool.
    Run(RunArgs),
    /// Excess risk against FIR over a dilation or translation sweep.
    Sweep(SweepArgs),
    /// Spectral embedding of a feature matrix.
    Embed(EmbedArgs),
    /// Theory-mode selection with per-step regret checks.
    Audit(AuditArgs),
}

#[derive(Args)]
struct RunArgs {
    /// key=value configuration file; flags below override it.
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    selector: Option<String>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    rounds: Option<usize>,
    /// Results CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
    /// Fixed learning rate, or `grid`.
    #[arg(long)]
    eta: Option<String>,
    /// Allow a point to be chosen more than once within a batch.
    #[arg(long)]
    theory_mode: bool,
}

#[derive(Args)]
struct SweepArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    /// `dilation` or `translation`.
    #[arg(long)]
    protocol: Option<String>,
    #[arg(long)]
    seeds: Option<usize>,
    #[arg(long)]
    settings: Option<usize>,
    #[arg(long)]
    n: Option<usize>,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct EmbedArgs {
    /// CSV with a header row and one point per row.
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value_t = 256)]
    k: usize,
    #[arg(long, default_value_t = 8)]
    dim: usize,
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct AuditArgs {
    #[arg(long)]
    config: Option<PathBuf>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    classes: Option<usize>,
    #[arg(long)]
    dim: Option<usize>,
    #[arg(long)]
    budget: Option<usize>,
    #[arg(long)]
    epsilon: Option<f64>,
    #[arg(long)]
    eta: Option<f64>,
    /// Per-step CSV; stdout when omitted.
    #[arg(long)]
    out: Option<PathBuf>,
}

fn read_kv(path: &Option<PathBuf>) -> Result<Vec<(String, String)>> {
    match path {
        Some(p) => parse_kv(&std::fs::read_to_string(p)?),
        None => Ok(Vec::new()),
    }
}

fn overrides<const N: usize>(pairs: [(&'static str, Option<String>); N]) -> impl Iterator<Item = (String, String)> {
    pairs.into_iter().filter_map(|(k, v)| v.map(|v| (k.to_string(), v)))
}

fn write_output(out: &Option<PathBuf>, f: impl FnOnce(&mut dyn Write) -> Result<()>) -> Result<()> {
    match out {
        Some(path) => {
            let mut w = std::io::BufWriter::new(std::fs::File::create(path)?);
            f(&mut w)?;
            w.flush()?;
        }
        None => {
            let stdout = std::io::stdout();
            let mut lock = stdout.lock();
            f(&mut lock)?;
        }
    }
    Ok(())
}

fn cmd_run(a: RunArgs) -> Result<()> {
    let mut cfg = RunConfig::default();
    for (k, v) in read_kv(&a.config)? {
        cfg.set(&k, &v)?;
    }
    let flags = overrides([
        ("seed", a.seed.map(|v| v.to_string())),
        ("selector", a.selector),
        ("budget", a.budget.map(|v| v.to_string())),
        ("rounds", a.rounds.map(|v| v.to_string())),
        ("eta", a.eta),
        ("out", a.out.map(|p| p.display().to_string())),
    ]);
    for (k, v) in flags {
        cfg.set(&k, &v)?;
    }
    if a.theory_mode {
        cfg.theory_mode = true;
    }
    let records = active_learning_loop(&cfg)?;
    write_output(&cfg.out, |w| write_results(w, &records))
}

fn cmd_sweep(a: SweepArgs) -> Result<()> {
    let mut cfg = SweepConfig::default();
    let flags = overrides([
        ("seed", a.seed.map(|v| v.to_string())),
        ("protocol", a.protocol),
        ("seeds", a.seeds.map(|v| v.to_string())),
        ("settings", a.settings.map(|v| v.to_string())),
        ("n", a.n.map(|v| v.to_string())),
    ]);
    for (k, v) in read_kv(&a.config)?.into_iter().chain(flags) {
        cfg.set(&k, &v)?;
    }
    let outcome = run_sweep(&cfg)?;
    for s in &outcome.settings {
        eprintln!(
            "param={:.6e} fir={:.6} risk={:.6e}±{:.2e} envelope={:.6e}",
            s.param, s.fir, s.mean_risk, s.se_risk, s.envelope
        );
    }
    eprintln!("log-log slope={:.4}", outcome.slope);
    write_output(&a.out, |w| write_sweep(w, &outcome))
}

fn cmd_embed(a: EmbedArgs) -> Result<()> {
    let x = read_matrix(&a.input)?;
    let emb = spectral_embed(&x, EmbeddingConfig { k: a.k, d_out: a.dim })?;
    let out = a.out.unwrap_or_else(|| default_embed_path(&a.input));
    write_matrix(&out, &emb.coords, "e")
}

fn default_embed_path(input: &Path) -> PathBuf {
    let stem = input.file_stem().and_then(|s| s.to_str()).unwrap_or("features");
    input.with_file_name(format!("{stem}.embedding.csv"))
}

fn cmd_audit(a: AuditArgs) -> Result<()> {
    let mut cfg = AuditConfig::default();
    let flags = overrides([
        ("seed", a.seed.map(|v| v.to_string())),
        ("classes", a.classes.map(|v| v.to_string())),
        ("dim", a.dim.map(|v| v.to_string())),
        ("budget", a.budget.map(|v| v.to_string())),
        ("epsilon", a.epsilon.map(|v| v.to_string())),
        ("eta", a.eta.map(|v| v.to_string())),
    ]);
    for (k, v) in read_kv(&a.config)?.into_iter().chain(flags) {
        cfg.set(&k, &v)?;
    }
    let outcome = run_audit(&cfg)?;
    let r = &outcome.report;
    eprintln!(
        "steps={} ftrl_margin={:.3e} trace_margin={:.3e} trace_dev={:.1e} ratio={:.6} (1+eps={}) holds={}",
        r.steps,
        r.worst_ftrl_margin,
        r.worst_trace_margin.unwrap_or(f64::NAN),
        r.worst_trace_deviation,
        outcome.ratio,
        1.0 + outcome.epsilon,
        r.holds(1e-8) && outcome.ratio <= 1.0 + outcome.epsilon
    );
    write_output(&a.out, |w| write_audit(w, &outcome))
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    let result = match cli.command {
        Command::Run(a) => cmd_run(a),
        Command::Sweep(a) => cmd_sweep(a),
        Command::Embed(a) => cmd_embed(a),
        Command::Audit(a) => cmd_audit(a),
    };
    match result {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            exit_code(&e)
        }
    }
}

fn exit_code(e: &FiralError) -> ExitCode {
    if e.is_numerical() {
        ExitCode::from(3)
    } else {
        ExitCode::from(2)
    }
}

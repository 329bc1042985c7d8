mod config;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand};
use twostage::cu_model::{random_instance, toy_instance, CuInstance};
use twostage::exact::{exact_policy, three_user_choices, two_stage_value, ExactConfig, IntegrationMode, ValueReport};
use twostage::gaussian::correlation_form;
use twostage::harness::experiment::{
    best_rows, movielens_units, synthetic_units, write_csv, write_curves, MovieLensConfig, PoolConvention, ResultRow,
};
use twostage::harness::{load_movielens, run_experiment, ExperimentConfig, SyntheticConfig};
use twostage::policies::{PolicyKind, DEFAULT_SAMPLES, LAMBDA_GRID};
use twostage::{Error, GaussianBelief, IndexSet};

use config::{parse_list, ConfigFile};

const EXIT_CODES: &str = "\
Exit codes:
  0   success
  1   I/O error (unreadable input, unwritable output)
  2   exact solver would enumerate too many stage-1 subsets
  3   malformed input data (ratings file or instance file)
  4   too few items meet the rating threshold for the cold-item split
  5   budget m + n exceeds the candidate pool
  6   invalid configuration (bad flag value, config file, or policy/model mismatch)
  7   numerical failure (covariance not positive definite, dimension mismatch)
  8   closed form undefined: pairwise covariances are not distinct
  9   a user has no training history
  10  invalid user selection (duplicate, out of pool, or repeated)
  64  command-line usage error";

#[derive(Parser, Debug)]
#[command(name = "twostage", version, about = "Two-stage recommendation for cold-start items", after_help = EXIT_CODES)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    common: Common,
}

#[derive(Args, Debug, Clone)]
struct Common {
    /// Base random seed.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output file (default: standard output).
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Maximum worker threads.
    #[arg(long, global = true)]
    threads: Option<usize>,
    /// Flat key = value file; command-line flags take precedence.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Three-user worked example: correlations, thresholds and values.
    Toy(ToyArgs),
    /// Exact two-stage values for every stage-1 subset.
    Exact(ExactArgs),
    /// Synthetic matrix-factorisation study.
    Synth(SynthArgs),
    /// MovieLens-100K cold-item study.
    Movielens(MovieLensArgs),
}

#[derive(Args, Debug)]
struct ToyArgs {
    /// Monte Carlo samples per stage-1 choice.
    #[arg(long)]
    samples: Option<usize>,
}

#[derive(Args, Debug)]
struct ExactArgs {
    /// Use the three-user worked example.
    #[arg(long)]
    toy: bool,
    /// Instance file: a line of means followed by one covariance row per user.
    #[arg(long)]
    instance: Option<PathBuf>,
    /// Number of users in a randomly generated instance.
    #[arg(long)]
    users: Option<usize>,
    /// Stage-1 budget.
    #[arg(long)]
    m: Option<usize>,
    /// Stage-2 budget.
    #[arg(long)]
    n: Option<usize>,
    /// Monte Carlo samples per candidate.
    #[arg(long)]
    samples: Option<usize>,
    /// Integration: mc, gh (single stage-1 user) or analytic (three users, m = n = 1).
    #[arg(long)]
    mode: Option<String>,
}

#[derive(Args, Debug)]
struct SweepArgs {
    /// Total budgets N, comma-separated.
    #[arg(long)]
    n_list: Option<String>,
    /// Stage-1 budgets m, comma-separated (default: every m in 1..N).
    #[arg(long)]
    m_list: Option<String>,
    /// Policies: greedy, al, ucb, cu_gee, cu_gee_i, mf_gee, mf_gee_i, mf_gee_ii.
    #[arg(long)]
    policies: Option<String>,
    /// λ grid, comma-separated.
    #[arg(long)]
    lambdas: Option<String>,
    /// Sampled stage-1 sets per GEE search.
    #[arg(long)]
    samples: Option<usize>,
    /// Best row per policy and N, as CSV.
    #[arg(long)]
    summary: Option<PathBuf>,
    /// Reward-vs-m/N curve data, as CSV.
    #[arg(long)]
    curves: Option<PathBuf>,
}

#[derive(Args, Debug)]
struct SynthArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Independently generated priors [default: 30]
    #[arg(long)]
    repeats: Option<usize>,
    /// Cold-start items per repeat [default: 50]
    #[arg(long)]
    items: Option<usize>,
    /// Users per repeat [default: 100]
    #[arg(long)]
    users: Option<usize>,
    /// Latent dimension K [default: 5]
    #[arg(long)]
    latent_dim: Option<usize>,
    /// Rating noise standard deviation [default: 0.5]
    #[arg(long)]
    noise_std: Option<f64>,
    /// Variance of each prior-mean coordinate [default: 0.1]
    #[arg(long)]
    prior_mean_var: Option<f64>,
}

#[derive(Args, Debug)]
struct MovieLensArgs {
    #[command(flatten)]
    sweep: SweepArgs,
    /// Path to the tab-separated u.data ratings file.
    #[arg(long)]
    data: Option<PathBuf>,
    /// Number of cold test items.
    #[arg(long)]
    test_items: Option<usize>,
    /// Minimum ratings for an item to be eligible as a test item.
    #[arg(long)]
    min_ratings: Option<usize>,
    /// Candidate pool per test item: all (every user; unrated counts as 0,
    /// the default) or raters (only users who rated it).
    #[arg(long)]
    pool: Option<String>,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Config(String),
    Io(io::Error),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl From<String> for CliError {
    fn from(e: String) -> Self {
        CliError::Config(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Io(_) => 1,
            CliError::Config(_) => 6,
            CliError::Core(e) => match e {
                Error::Io(_) => 1,
                Error::CombinatorialBlowup { .. } => 2,
                Error::Parse { .. } | Error::DuplicatePair { .. } => 3,
                Error::InsufficientItems { .. } => 4,
                Error::BudgetExceedsPool { .. } => 5,
                Error::InvalidConfig(_) | Error::VariantMismatch { .. } => 6,
                Error::DimensionMismatch { .. }
                | Error::SingularBlock
                | Error::NotPsd
                | Error::NotSymmetric(_)
                | Error::ZeroVariance { .. } => 7,
                Error::DegenerateCovariances => 8,
                Error::EmptyUserHistory(_) => 9,
                Error::InvalidIndexSet(_) | Error::IndexOutOfPool(_) | Error::RepeatedUser(_) => 10,
            },
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Config(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = Result<T, CliError>;

const COMMON_KEYS: [&str; 3] = ["seed", "out", "threads"];
const SWEEP_KEYS: [&str; 7] = ["n-list", "m-list", "policies", "lambdas", "samples", "summary", "curves"];

fn keys(extra: &[&'static str], sweep: bool) -> Vec<&'static str> {
    let mut k = COMMON_KEYS.to_vec();
    if sweep {
        k.extend(SWEEP_KEYS);
    }
    k.extend(extra);
    k
}

fn open_out(path: Option<&Path>) -> CliResult<Box<dyn Write>> {
    Ok(match path {
        Some(p) => Box::new(BufWriter::new(File::create(p)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    })
}

fn one_based(set: &IndexSet) -> String {
    set.iter().map(|u| (u + 1).to_string()).collect::<Vec<_>>().join(" ")
}

fn cmd_toy(args: &ToyArgs, common: &Common, cfg: &ConfigFile) -> CliResult<()> {
    cfg.check_keys(&keys(&["samples"], false))?;
    let samples = cfg.resolve(args.samples, "samples", 100_000usize)?;
    let seed = cfg.resolve(common.seed, "seed", 0u64)?;
    let out_path = cfg.resolve_opt(common.out.clone(), "out")?;
    let inst = toy_instance();
    let prior = inst.prior();
    let corr = correlation_form(prior)?.corr;
    let choices = three_user_choices(&inst)?;
    let mc_cfg = ExactConfig {
        mc_samples: samples,
        seed,
        integration_mode: IntegrationMode::MonteCarlo,
    };
    let mut w = open_out(out_path.as_deref())?;
    writeln!(w, "Toy instance (3 users, m = 1, n = 1)")?;
    writeln!(w, "means: {}", fmt_row(prior.mean().iter()))?;
    writeln!(w, "covariance:")?;
    for i in 0..3 {
        writeln!(w, "  {}", fmt_row(prior.cov().row(i).iter()))?;
    }
    writeln!(w, "correlation:")?;
    for i in 0..3 {
        writeln!(w, "  {}", fmt_row(corr.row(i).iter()))?;
    }
    writeln!(w, "stage-1 user,analytic value,monte carlo value,monte carlo std error,threshold rating,stage-2 above,stage-2 below")?;
    let mut best = &choices[0];
    for c in &choices {
        let (mc, se) = two_stage_value(&inst, &IndexSet::new(vec![c.user])?, 1, &mc_cfg)?;
        writeln!(
            w,
            "{},{:.4},{:.4},{:.4},{:.4},{},{}",
            c.user + 1,
            c.value,
            mc,
            se,
            c.threshold_rating,
            c.high + 1,
            c.low + 1
        )?;
        if c.value > best.value {
            best = c;
        }
    }
    writeln!(w, "best stage-1 user: {} (value {:.4})", best.user + 1, best.value)?;
    w.flush()?;
    Ok(())
}

fn fmt_row<'a>(vals: impl Iterator<Item = &'a f64>) -> String {
    vals.map(|v| format!("{v:.4}")).collect::<Vec<_>>().join(" ")
}

/// Whitespace- or comma-separated numbers; `#` starts a comment.
fn parse_instance_file(path: &Path) -> CliResult<CuInstance> {
    let text = std::fs::read_to_string(path)?;
    let mut rows: Vec<(usize, Vec<f64>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.split('#').next().unwrap_or("").trim();
        if line.is_empty() {
            continue;
        }
        let vals = line
            .split(|c: char| c == ',' || c.is_whitespace())
            .filter(|s| !s.is_empty())
            .map(|s| {
                s.parse::<f64>().map_err(|e| Error::Parse {
                    line: i + 1,
                    message: format!("{s:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>, _>>()?;
        rows.push((i + 1, vals));
    }
    let Some((_, means)) = rows.first() else {
        return Err(Error::Parse {
            line: 1,
            message: "empty instance file".into(),
        }
        .into());
    };
    let d = means.len();
    if rows.len() != d + 1 {
        return Err(Error::Parse {
            line: rows.last().map_or(1, |r| r.0),
            message: format!("expected {d} covariance rows after the means, found {}", rows.len() - 1),
        }
        .into());
    }
    let mut cov = nalgebra::DMatrix::zeros(d, d);
    for (r, (line, vals)) in rows[1..].iter().enumerate() {
        if vals.len() != d {
            return Err(Error::Parse {
                line: *line,
                message: format!("covariance row has {} entries, expected {d}", vals.len()),
            }
            .into());
        }
        for (c, v) in vals.iter().enumerate() {
            cov[(r, c)] = *v;
        }
    }
    let belief = GaussianBelief::new(nalgebra::DVector::from_vec(means.clone()), cov)?;
    Ok(CuInstance::full(belief))
}

fn cmd_exact(args: &ExactArgs, common: &Common, cfg: &ConfigFile) -> CliResult<()> {
    cfg.check_keys(&keys(&["toy", "instance", "users", "m", "n", "samples", "mode"], false))?;
    let seed = cfg.resolve(common.seed, "seed", 0u64)?;
    let toy = args.toy || cfg.resolve(None, "toy", false)?;
    let instance_path = cfg.resolve_opt(args.instance.clone(), "instance")?;
    let users = cfg.resolve_opt(args.users, "users")?;
    let m = cfg.resolve(args.m, "m", 1usize)?;
    let n = cfg.resolve(args.n, "n", 1usize)?;
    let samples = cfg.resolve(args.samples, "samples", 100_000usize)?;
    let mode = match cfg.resolve(args.mode.clone(), "mode", "mc".to_string())?.as_str() {
        "mc" => IntegrationMode::MonteCarlo,
        "gh" => IntegrationMode::GaussHermite,
        "analytic" => IntegrationMode::Analytic3User,
        other => return Err(format!("unknown integration mode {other:?}; expected mc, gh or analytic").into()),
    };
    let instance = match (toy, instance_path) {
        (true, Some(_)) => return Err("--toy and --instance are mutually exclusive".to_string().into()),
        (true, None) => {
            if users.is_some_and(|u| u != 3) {
                return Err("the toy instance has exactly 3 users".to_string().into());
            }
            toy_instance()
        }
        (false, Some(p)) => parse_instance_file(&p)?,
        (false, None) => {
            let d = users.unwrap_or(3);
            if d == 0 {
                return Err("--users must be positive".to_string().into());
            }
            random_instance(d, seed)
        }
    };
    let report = exact_policy(
        &instance,
        m,
        n,
        &ExactConfig {
            mc_samples: samples,
            seed,
            integration_mode: mode,
        },
    )?;
    let out_path = cfg.resolve_opt(common.out.clone(), "out")?;
    let mut w = open_out(out_path.as_deref())?;
    write_report(&report, &mut w)?;
    w.flush()?;
    Ok(())
}

fn write_report<W: Write>(report: &ValueReport, w: &mut W) -> io::Result<()> {
    writeln!(w, "subset,value,std_error,best")?;
    for c in &report.per_candidate {
        writeln!(
            w,
            "{},{},{},{}",
            one_based(&c.subset),
            c.value,
            c.std_error,
            c.subset == report.best_subset
        )?;
    }
    Ok(())
}

struct Sweep {
    exp: ExperimentConfig,
    out: Option<PathBuf>,
    summary: Option<PathBuf>,
    curves: Option<PathBuf>,
}

fn resolve_sweep(
    args: &SweepArgs,
    common: &Common,
    cfg: &ConfigFile,
    scenario: &str,
    n_default: &[usize],
    policy_default: &[PolicyKind],
) -> CliResult<Sweep> {
    let n_list = match cfg.resolve_opt(args.n_list.clone(), "n-list")? {
        Some(s) => parse_list::<usize>(&s).map_err(|e| format!("--n-list: {e}"))?,
        None => n_default.to_vec(),
    };
    let m_list = cfg
        .resolve_opt(args.m_list.clone(), "m-list")?
        .map(|s| parse_list::<usize>(&s).map_err(|e| format!("--m-list: {e}")))
        .transpose()?;
    let policies = match cfg.resolve_opt(args.policies.clone(), "policies")? {
        Some(s) => s
            .split(',')
            .map(str::trim)
            .filter(|p| !p.is_empty())
            .map(PolicyKind::parse)
            .collect::<Result<Vec<_>, _>>()?,
        None => policy_default.to_vec(),
    };
    let lambdas = match cfg.resolve_opt(args.lambdas.clone(), "lambdas")? {
        Some(s) => parse_list::<f64>(&s).map_err(|e| format!("--lambdas: {e}"))?,
        None => LAMBDA_GRID.to_vec(),
    };
    let exp = ExperimentConfig {
        scenario: scenario.to_string(),
        n_list,
        m_list,
        policies,
        lambdas,
        samples_t: cfg.resolve(args.samples, "samples", DEFAULT_SAMPLES)?,
        seed: cfg.resolve(common.seed, "seed", 0u64)?,
    };
    exp.validate()?;
    Ok(Sweep {
        exp,
        out: cfg.resolve_opt(common.out.clone(), "out")?,
        summary: cfg.resolve_opt(args.summary.clone(), "summary")?,
        curves: cfg.resolve_opt(args.curves.clone(), "curves")?,
    })
}

fn emit(rows: &[ResultRow], sweep: &Sweep) -> CliResult<()> {
    let mut w = open_out(sweep.out.as_deref())?;
    write_csv(rows, &mut w)?;
    w.flush()?;
    if let Some(p) = &sweep.summary {
        let mut w = BufWriter::new(File::create(p)?);
        write_csv(&best_rows(rows), &mut w)?;
        w.flush()?;
    }
    if let Some(p) = &sweep.curves {
        let mut w = BufWriter::new(File::create(p)?);
        write_curves(rows, &mut w)?;
        w.flush()?;
    }
    Ok(())
}

fn cmd_synth(args: &SynthArgs, common: &Common, cfg: &ConfigFile) -> CliResult<()> {
    cfg.check_keys(&keys(&["repeats", "items", "users", "latent-dim", "noise-std", "prior-mean-var"], true))?;
    let sweep = resolve_sweep(
        &args.sweep,
        common,
        cfg,
        "synthetic",
        &[10, 20, 30, 40],
        &[PolicyKind::Greedy, PolicyKind::Al, PolicyKind::Ucb, PolicyKind::MfGee],
    )?;
    let d = SyntheticConfig::default();
    let syn = SyntheticConfig {
        latent_dim: cfg.resolve(args.latent_dim, "latent-dim", d.latent_dim)?,
        n_users: cfg.resolve(args.users, "users", d.n_users)?,
        n_items: cfg.resolve(args.items, "items", d.n_items)?,
        n_repeats: cfg.resolve(args.repeats, "repeats", d.n_repeats)?,
        noise_std: cfg.resolve(args.noise_std, "noise-std", d.noise_std)?,
        prior_mean_var: cfg.resolve(args.prior_mean_var, "prior-mean-var", d.prior_mean_var)?,
        seed: sweep.exp.seed,
        ..d
    };
    let units = synthetic_units(&syn)?;
    let rows = run_experiment(&units, &sweep.exp)?;
    emit(&rows, &sweep)
}

fn cmd_movielens(args: &MovieLensArgs, common: &Common, cfg: &ConfigFile) -> CliResult<()> {
    cfg.check_keys(&keys(&["data", "test-items", "min-ratings", "pool"], true))?;
    let sweep = resolve_sweep(
        &args.sweep,
        common,
        cfg,
        "movielens",
        &[10, 20, 40, 80],
        &[PolicyKind::Greedy, PolicyKind::Al, PolicyKind::Ucb, PolicyKind::CuGeeI],
    )?;
    let data = cfg
        .resolve_opt(args.data.clone(), "data")?
        .ok_or_else(|| "--data <path to u.data> is required".to_string())?;
    let d = MovieLensConfig::default();
    let ml = MovieLensConfig {
        n_test: cfg.resolve(args.test_items, "test-items", d.n_test)?,
        min_ratings: cfg.resolve(args.min_ratings, "min-ratings", d.min_ratings)?,
        pool: PoolConvention::parse(&cfg.resolve(args.pool.clone(), "pool", d.pool.name().to_string())?)?,
        seed: sweep.exp.seed,
    };
    let table = load_movielens(&data)?;
    let units = movielens_units(&table, &ml)?;
    let rows = run_experiment(&units, &sweep.exp)?;
    emit(&rows, &sweep)
}

fn run(cli: Cli) -> CliResult<()> {
    let cfg = match &cli.common.config {
        Some(p) => ConfigFile::load(p)?,
        None => ConfigFile::default(),
    };
    if let Some(t) = cfg.resolve_opt(cli.common.threads, "threads")? {
        if t == 0 {
            return Err("--threads must be positive".to_string().into());
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| format!("thread pool: {e}"))?;
    }
    match &cli.command {
        Command::Toy(a) => cmd_toy(a, &cli.common, &cfg),
        Command::Exact(a) => cmd_exact(a, &cli.common, &cfg),
        Command::Synth(a) => cmd_synth(a, &cli.common, &cfg),
        Command::Movielens(a) => cmd_movielens(a, &cli.common, &cfg),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { ExitCode::from(64) } else { ExitCode::SUCCESS };
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

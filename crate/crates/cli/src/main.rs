use std::fmt;
use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Serialize;

use tailbound::data::{ingest_csv, ranks, CsvOptions};
use tailbound::empirical::estimate_on_grid;
use tailbound::sim::{self, ExperimentTable, ReproduceOptions, SimDesign};
use tailbound::stocks::{self, StocksConfig};
use tailbound::testing::run_test;
use tailbound::{
    DataMatrix, Error, EstimatorKind, EvalGrid, Family, FitOptions, FitResult, ModelSpec, StatisticKind, TestSpec,
    Transform, Weight, WlsProblem,
};

#[derive(Debug, Parser)]
#[command(
    name = "tailbound",
    version,
    about = "Tail dependence estimation and boundary hypothesis tests"
)]
struct Cli {
    /// Worker threads for the parallel parts (default: all cores).
    #[arg(long, global = true, env = "TAILBOUND_WORKERS")]
    workers: Option<usize>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Fit a parametric model by weighted least squares.
    Fit(FitArgs),
    /// Test a null hypothesis that may sit on the parameter boundary.
    Test(TestArgs),
    /// Draw data from a model, or run a simulation design file.
    Simulate(SimulateArgs),
    /// Rerun a named experiment (T1, T2, T3, F1 … F7).
    Reproduce(ReproduceArgs),
    /// Bivariate financial returns analysis.
    Stocks(StocksArgs),
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Estimator {
    Empirical,
    Beta,
}

impl From<Estimator> for EstimatorKind {
    fn from(e: Estimator) -> Self {
        match e {
            Estimator::Empirical => EstimatorKind::Empirical,
            Estimator::Beta => EstimatorKind::Beta,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum Statistic {
    Deviance,
    Wald,
}

impl From<Statistic> for StatisticKind {
    fn from(s: Statistic) -> Self {
        match s {
            Statistic::Deviance => StatisticKind::Deviance,
            Statistic::Wald => StatisticKind::Wald,
        }
    }
}

#[derive(Debug, Clone, Copy, ValueEnum)]
enum TransformArg {
    None,
    NegativeLogReturn,
}

impl From<TransformArg> for Transform {
    fn from(t: TransformArg) -> Self {
        match t {
            TransformArg::None => Transform::None,
            TransformArg::NegativeLogReturn => Transform::NegativeLogReturn,
        }
    }
}

#[derive(Debug, Args)]
struct DataArgs {
    /// Headed CSV file.
    #[arg(long)]
    data: PathBuf,
    /// Comma-separated column labels (default: every column).
    #[arg(long, value_delimiter = ',')]
    columns: Vec<String>,
    #[arg(long, value_enum, default_value = "none")]
    transform: TransformArg,
    /// Multiplier applied after the transform.
    #[arg(long, default_value_t = 1.0)]
    scale: f64,
}

#[derive(Debug, Args)]
struct FitArgs {
    #[command(flatten)]
    data: DataArgs,
    /// Model specification (JSON).
    #[arg(long)]
    model: PathBuf,
    #[arg(long)]
    k: usize,
    /// Headerless CSV of evaluation points (default: the built-in recipe).
    #[arg(long)]
    grid: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "empirical")]
    estimator: Estimator,
    /// `identity` or a headerless CSV weight matrix.
    #[arg(long, default_value = "identity")]
    omega: String,
    #[arg(long, default_value_t = 20)]
    starts: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Refit at each of these k and report the path instead of one fit.
    #[arg(long, value_delimiter = ',')]
    k_path: Vec<usize>,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct TestArgs {
    #[command(flatten)]
    fit: FitArgs,
    /// Null hypothesis as `index=value` pairs, e.g. "4=0,5=0".
    #[arg(long = "null")]
    null: String,
    #[arg(long, value_enum, default_value = "wald")]
    statistic: Statistic,
    #[arg(long, default_value_t = 0.05)]
    level: f64,
    /// Draws from the limit law.
    #[arg(long, default_value_t = tailbound::limit::DEFAULT_DRAWS)]
    draws: usize,
}

#[derive(Debug, Args)]
struct SimulateArgs {
    /// Simulation design (JSON); runs its level or RMSE study.
    #[arg(long, conflicts_with_all = ["model", "theta", "n"])]
    design: Option<PathBuf>,
    /// Model specification (JSON) to draw a single data set from.
    #[arg(long, requires_all = ["theta", "n"])]
    model: Option<PathBuf>,
    /// Parameter vector, comma separated.
    #[arg(long, value_delimiter = ',', allow_hyphen_values = true)]
    theta: Option<Vec<f64>>,
    #[arg(long)]
    n: Option<usize>,
    /// Spectral function cap of the Brown–Resnick sampler.
    #[arg(long, default_value_t = 1000)]
    accuracy: usize,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output file (default: standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct ReproduceArgs {
    /// Experiment id.
    id: String,
    /// Restrict to these k.
    #[arg(long, value_delimiter = ',')]
    k: Vec<usize>,
    /// Restrict to one estimator.
    #[arg(long, value_enum)]
    estimator: Option<Estimator>,
    #[arg(long)]
    replicates: Option<usize>,
    #[arg(long)]
    draws: Option<usize>,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// CI-scale run; the table is flagged as low precision.
    #[arg(long)]
    smoke: bool,
    /// Output directory for `<id>.json`, `<id>.csv` and `<id>_plot.csv`.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug, Args)]
struct StocksArgs {
    #[command(flatten)]
    data: DataArgs,
    #[arg(long, default_value_t = 40)]
    k: usize,
    #[arg(long, value_enum, default_value = "empirical")]
    estimator: Estimator,
    #[arg(long, default_value_t = 4)]
    factors: usize,
    /// Threshold quantile of the GPD margins.
    #[arg(long, default_value_t = 0.95)]
    quantile: f64,
    #[arg(long, default_value_t = 1000)]
    bootstrap: usize,
    #[arg(long, default_value_t = tailbound::limit::DEFAULT_DRAWS)]
    draws: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output directory (default: the JSON report on standard output).
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Config(String),
    Core(Error),
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(e) if e.is_numerical() => 1,
            _ => 2,
        }
    }
}

impl fmt::Display for CliError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            CliError::Config(msg) => f.write_str(msg),
            CliError::Core(e) => e.fmt(f),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Core(e)
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Config(e.to_string())
    }
}

type CliResult<T> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("tailbound: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult<()> {
    let mut pool = rayon::ThreadPoolBuilder::new();
    if let Some(n) = cli.workers {
        if n == 0 {
            return Err(CliError::Config("--workers must be at least 1".into()));
        }
        pool = pool.num_threads(n);
    }
    let pool = pool.build().map_err(|e| CliError::Config(e.to_string()))?;
    pool.install(|| match cli.command {
        Command::Fit(a) => cmd_fit(&a),
        Command::Test(a) => cmd_test(&a),
        Command::Simulate(a) => cmd_simulate(&a),
        Command::Reproduce(a) => cmd_reproduce(&a),
        Command::Stocks(a) => cmd_stocks(&a),
    })
}

fn read_data(args: &DataArgs) -> CliResult<DataMatrix> {
    let columns = if args.columns.is_empty() {
        let mut reader = csv::Reader::from_path(&args.data)
            .map_err(|e| CliError::Config(format!("cannot read {}: {e}", args.data.display())))?;
        let headers = reader.headers().map_err(Error::from)?;
        headers.iter().map(|h| h.trim().to_string()).collect()
    } else {
        args.columns.clone()
    };
    let cols: Vec<&str> = columns.iter().map(String::as_str).collect();
    let opts = CsvOptions {
        transform: args.transform.into(),
        scale: args.scale,
        ..CsvOptions::default()
    };
    Ok(ingest_csv(&args.data, &cols, &opts)?)
}

fn read_model(path: &Path) -> CliResult<ModelSpec> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.to_path_buf(),
        source,
    })?;
    Ok(ModelSpec::from_json(&text)?)
}

fn write_output(out: Option<&Path>, write: impl FnOnce(&mut dyn Write) -> CliResult<()>) -> CliResult<()> {
    match out {
        Some(path) => {
            let mut file = io::BufWriter::new(fs::File::create(path).map_err(|source| Error::Io {
                path: path.to_path_buf(),
                source,
            })?);
            write(&mut file)?;
            file.flush()?;
            Ok(())
        }
        None => {
            let stdout = io::stdout();
            let mut lock = stdout.lock();
            write(&mut lock)?;
            lock.flush()?;
            Ok(())
        }
    }
}

fn write_json<T: Serialize>(out: Option<&Path>, value: &T) -> CliResult<()> {
    write_output(out, |w| {
        serde_json::to_writer_pretty(&mut *w, value).map_err(Error::from)?;
        writeln!(w)?;
        Ok(())
    })
}

/// Ranks, grid and weight shared by `fit` and `test`, estimated at `k`.
struct Pipeline {
    model: ModelSpec,
    grid: EvalGrid,
    omega: Option<Weight>,
    ranks: tailbound::RankMatrix,
    estimator: EstimatorKind,
}

impl Pipeline {
    fn new(a: &FitArgs) -> CliResult<Self> {
        let model = read_model(&a.model)?;
        let data = read_data(&a.data)?;
        if data.d() != model.d() {
            return Err(CliError::Core(Error::DimensionMismatch {
                expected: model.d(),
                got: data.d(),
            }));
        }
        let grid = match &a.grid {
            Some(path) => EvalGrid::from_csv(path)?,
            None => sim::grid_recipe(&model)?,
        };
        let omega = match a.omega.as_str() {
            "identity" => None,
            path => Some(Weight::from_csv(Path::new(path))?),
        };
        Ok(Self {
            model,
            grid,
            omega,
            ranks: ranks(&data),
            estimator: a.estimator.into(),
        })
    }

    fn problem(&self, k: usize) -> CliResult<WlsProblem> {
        let lhat = estimate_on_grid(&self.ranks, k, &self.grid, self.estimator)?;
        let mut problem = WlsProblem::new(self.model.clone(), self.grid.clone(), lhat, self.ranks.n())?;
        if let Some(w) = &self.omega {
            problem = problem.with_weight(w.clone())?;
        }
        Ok(problem)
    }
}

fn fit_options(a: &FitArgs) -> FitOptions {
    FitOptions {
        starts: a.starts,
        seed: a.seed,
        ..FitOptions::default()
    }
}

#[derive(Serialize)]
struct KPathPoint {
    k: usize,
    theta_hat: Vec<f64>,
    objective: f64,
    std_errors: Option<Vec<f64>>,
}

fn cmd_fit(a: &FitArgs) -> CliResult<()> {
    let pipe = Pipeline::new(a)?;
    let opts = fit_options(a);
    if a.k_path.is_empty() {
        let fit: FitResult = pipe.problem(a.k)?.fit(&opts)?;
        return write_json(a.out.as_deref(), &fit);
    }
    let path = a
        .k_path
        .iter()
        .map(|&k| {
            let fit = pipe.problem(k)?.fit(&opts)?;
            Ok(KPathPoint {
                k,
                theta_hat: fit.theta_hat,
                objective: fit.objective,
                std_errors: fit.std_errors,
            })
        })
        .collect::<CliResult<Vec<_>>>()?;
    write_json(a.out.as_deref(), &path)
}

fn cmd_test(a: &TestArgs) -> CliResult<()> {
    let pipe = Pipeline::new(&a.fit)?;
    let (tested, beta_star) = TestSpec::parse_null(&a.null)?;
    let mut spec = TestSpec::new(tested, beta_star, a.statistic.into())?;
    spec.level = a.level;
    spec.n_draws = a.draws;
    spec.seed = a.fit.seed;
    let result = run_test(&pipe.problem(a.fit.k)?, &spec, &fit_options(&a.fit))?;
    write_json(a.fit.out.as_deref(), &result)
}

fn cmd_simulate(a: &SimulateArgs) -> CliResult<()> {
    if let Some(path) = &a.design {
        let text = fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let mut design: SimDesign = serde_json::from_str(&text).map_err(Error::from)?;
        design.seed = a.seed;
        if let Some(r) = a.replicates {
            design.replicates = r;
        }
        design.validate()?;
        let table = if design.test.is_some() {
            sim::run_level(&design)?
        } else {
            sim::run_rmse(&design)?
        };
        return write_json(a.out.as_deref(), &table);
    }
    let (Some(model), Some(theta), Some(n)) = (&a.model, &a.theta, a.n) else {
        return Err(CliError::Config(
            "simulate needs --design, or --model with --theta and --n".into(),
        ));
    };
    let model = read_model(model)?;
    let data = match model.family() {
        Family::MaxLinear | Family::MarshallOlkin => sim::sample_maxlinear(&model.b_matrix(theta)?, n, a.seed)?,
        Family::BrownResnick => {
            if theta.len() != 2 {
                return Err(CliError::Core(Error::DimensionMismatch {
                    expected: 2,
                    got: theta.len(),
                }));
            }
            sim::sample_brown_resnick(model.locations(), theta[0], theta[1], n, a.seed, a.accuracy)?
        }
        Family::Logistic => return Err(Error::Unsupported("simulation from the logistic model".into()).into()),
    };
    let Some(out) = &a.out else {
        return Err(CliError::Config("simulate needs --out for the data file".into()));
    };
    data.write_csv(out)?;
    Ok(())
}

fn create_dir(dir: &Path) -> CliResult<()> {
    fs::create_dir_all(dir).map_err(|source| {
        Error::Io {
            path: dir.to_path_buf(),
            source,
        }
        .into()
    })
}

fn cmd_reproduce(a: &ReproduceArgs) -> CliResult<()> {
    let opts = ReproduceOptions {
        replicates: a.replicates,
        ks: (!a.k.is_empty()).then(|| a.k.clone()),
        estimators: a.estimator.map(|e| vec![e.into()]),
        n_draws: a.draws,
        seed: a.seed,
        smoke: a.smoke,
    };
    let table: ExperimentTable = sim::reproduce(&a.id, &opts)?;
    let Some(dir) = &a.out else {
        return write_json(None, &table);
    };
    create_dir(dir)?;
    write_json(Some(&dir.join(format!("{}.json", table.id))), &table)?;
    write_output(Some(&dir.join(format!("{}.csv", table.id))), |w| {
        table.write_csv(&mut &mut *w)?;
        Ok(())
    })?;
    write_output(Some(&dir.join(format!("{}_plot.csv", table.id))), |w| {
        table.write_plot_csv(&mut &mut *w)?;
        Ok(())
    })
}

fn cmd_stocks(a: &StocksArgs) -> CliResult<()> {
    let data = read_data(&a.data)?;
    let cfg = StocksConfig {
        k: a.k,
        estimator: a.estimator.into(),
        quantile_level: a.quantile,
        factors: a.factors,
        bootstrap: a.bootstrap,
        n_draws: a.draws,
        seed: a.seed,
        ..StocksConfig::default()
    };
    let report = stocks::analyze(&data, &cfg)?;
    let Some(dir) = &a.out else {
        return write_json(None, &report);
    };
    create_dir(dir)?;
    write_json(Some(&dir.join("report.json")), &report)?;
    write_output(Some(&dir.join("chi_path.csv")), |w| Ok(report.write_chi_csv(w)?))?;
    write_output(Some(&dir.join("level_sets.csv")), |w| {
        Ok(report.write_level_sets_csv(w)?)
    })?;
    write_output(Some(&dir.join("exceedance.csv")), |w| {
        Ok(report.write_exceedance_csv(w)?)
    })
}

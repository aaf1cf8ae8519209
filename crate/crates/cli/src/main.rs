use std::fs::{self, File};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{Args, Parser, Subcommand};
use serde::Serialize;

use confbal::diagnostics::{association_stats, balance_report, bootstrap_se, SMD_CONVENTION};
use confbal::estimators::SolverSummary;
use confbal::simulation::{generate, run_balance_experiment, run_experiment, write_balance_csv, DgpSpec, Model};
use confbal::{load_csv, estimate_ate, CsvSchema, Dataset, EstimateConfig, Error, LambdaRule, LeafSize, Method};

const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Parser, Debug)]
#[command(name = "confbal", version, about = "Covariate balancing weights from a random-forest kernel")]
struct Cli {
    #[command(subcommand)]
    command: Command,
    /// Directory for output files.
    #[arg(long, global = true, default_value = "confbal-out")]
    out_dir: PathBuf,
    /// Worker threads (defaults to all cores).
    #[arg(long, global = true, env = "CONFBAL_THREADS")]
    threads: Option<usize>,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Fit balancing weights and write them with the solver trace.
    Weights(DataCmd),
    /// Estimate the average treatment effect, optionally with a bootstrap SE.
    Ate(AteCmd),
    /// Run replicated simulations over a grid of models and sizes.
    Simulate(SimulateCmd),
    /// Balance and association diagnostics.
    Diagnose(DiagnoseCmd),
    /// Write one simulated data set as CSV.
    Generate(GenerateCmd),
}

#[derive(Args, Debug, Clone, Serialize)]
struct DataArgs {
    #[arg(long)]
    input: PathBuf,
    #[arg(long, default_value = "y")]
    outcome: String,
    #[arg(long, default_value = "a")]
    treatment: String,
    /// Comma-separated covariate columns, or `rest` for all other columns.
    #[arg(long, default_value = "rest")]
    covariates: String,
}

#[derive(Args, Debug, Clone, Serialize)]
struct FitArgs {
    /// Comma-separated methods, or `all`.
    #[arg(long, default_value = "rf-kernel-mmd")]
    method: String,
    #[arg(long)]
    trees: Option<usize>,
    #[arg(long)]
    mtry: Option<usize>,
    /// Fixed minimum leaf size; without it the kernel forest scales leaf
    /// size with the square root of the subsample.
    #[arg(long)]
    min_node: Option<usize>,
    /// A number, `inv-n`, `inv-n2` (default), or `grid`.
    #[arg(long)]
    lambda: Option<String>,
    /// Allow negative weights.
    #[arg(long)]
    no_nonneg: bool,
    #[arg(long)]
    fit_fraction: Option<f64>,
    /// Master seed; drawn from OS entropy and recorded when absent.
    #[arg(long)]
    seed: Option<u64>,
}

#[derive(Args, Debug)]
struct DataCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct AteCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Bootstrap resamples for the standard error.
    #[arg(long)]
    bootstrap: Option<usize>,
}

#[derive(Args, Debug)]
struct SimulateCmd {
    /// Comma-separated models: toy, model1, model2, model3.
    #[arg(long, default_value = "model1")]
    model: String,
    /// Comma-separated sample sizes.
    #[arg(long, default_value = "250,500")]
    n: String,
    /// Comma-separated dimensions.
    #[arg(long, default_value = "50,100")]
    p: String,
    #[arg(long, default_value_t = 200)]
    reps: usize,
    /// Also write weighted means of mu_1 per arm.
    #[arg(long)]
    balance: bool,
    #[command(flatten)]
    fit: FitArgs,
}

#[derive(Args, Debug)]
struct DiagnoseCmd {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    fit: FitArgs,
    /// Read weights (`row,treatment,weight`) instead of fitting them.
    #[arg(long)]
    weights_file: Option<PathBuf>,
    /// Columns with at most this many distinct values are treated as discrete.
    #[arg(long, default_value_t = 10)]
    discrete_threshold: usize,
}

#[derive(Args, Debug)]
struct GenerateCmd {
    #[arg(long, default_value = "model1")]
    model: String,
    #[arg(long, default_value_t = 500)]
    n: usize,
    #[arg(long, default_value_t = 10)]
    p: usize,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    /// Output file; defaults to `<out-dir>/<model>.csv`.
    #[arg(long)]
    output: Option<PathBuf>,
}

#[derive(Serialize)]
struct Metadata<'a, C: Serialize> {
    tool: &'static str,
    version: &'static str,
    command: &'static str,
    seed: u64,
    config: &'a C,
    estimate_config: &'a EstimateConfig,
    wall_time_seconds: f64,
    #[serde(skip_serializing_if = "Option::is_none")]
    smd_convention: Option<&'static str>,
}

fn entropy_seed() -> u64 {
    use std::hash::{BuildHasher, RandomState};
    RandomState::new().hash_one(std::process::id())
}

fn parse_list<T: std::str::FromStr>(s: &str, what: &str) -> Result<Vec<T>, Error> {
    s.split(',')
        .map(|t| t.trim().parse().map_err(|_| Error::InvalidParameter(format!("bad {what} '{t}'"))))
        .collect()
}

impl FitArgs {
    fn methods(&self) -> Result<Vec<Method>, Error> {
        if self.method == "all" {
            return Ok(Method::ALL.to_vec());
        }
        self.method.split(',').map(|m| m.trim().parse()).collect()
    }

    fn config(&self, seed: u64) -> Result<EstimateConfig, Error> {
        let mut c = EstimateConfig { seed, nonneg: !self.no_nonneg, ..EstimateConfig::default() };
        if let Some(t) = self.trees {
            c.forest.trees = t;
        }
        if self.mtry.is_some() {
            c.forest.mtry = self.mtry;
        }
        if let Some(m) = self.min_node {
            c.forest.min_node = m;
            c.leaf_size = LeafSize::Fixed;
        }
        if let Some(f) = self.fit_fraction {
            c.fit_fraction = f;
        }
        if let Some(l) = &self.lambda {
            c.lambda = match l.as_str() {
                "inv-n" => LambdaRule::InverseN,
                "inv-n2" => LambdaRule::InverseNSquared,
                "grid" => LambdaRule::TreeHalvesGrid,
                s => LambdaRule::Fixed(
                    s.parse().map_err(|_| Error::InvalidParameter(format!("bad lambda '{s}'")))?,
                ),
            };
        }
        Ok(c)
    }
}

fn load(data: &DataArgs) -> Result<Dataset<f64>, Error> {
    let mut schema = CsvSchema::new(&data.outcome, &data.treatment);
    if data.covariates != "rest" {
        let cols: Vec<&str> = data.covariates.split(',').map(str::trim).collect();
        schema = schema.with_covariates(&cols);
    }
    load_csv(&data.input, &schema)
}

fn create(dir: &Path, name: &str) -> Result<BufWriter<File>, Error> {
    Ok(BufWriter::new(File::create(dir.join(name))?))
}

fn write_metadata<C: Serialize>(
    dir: &Path,
    command: &'static str,
    seed: u64,
    config: &C,
    estimate_config: &EstimateConfig,
    start: Instant,
    smd: bool,
) -> Result<(), Error> {
    let meta = Metadata {
        tool: "confbal",
        version: VERSION,
        command,
        seed,
        config,
        estimate_config,
        wall_time_seconds: start.elapsed().as_secs_f64(),
        smd_convention: smd.then_some(SMD_CONVENTION),
    };
    let mut f = create(dir, "metadata.json")?;
    serde_json::to_writer_pretty(&mut f, &meta).map_err(|e| Error::Format(e.to_string()))?;
    writeln!(f)?;
    Ok(())
}

fn write_weights(dir: &Path, method: Method, d: &Dataset<f64>, w: &[f64]) -> Result<(), Error> {
    let mut f = create(dir, &format!("weights_{method}.csv"))?;
    writeln!(f, "row,treatment,weight")?;
    for (i, (&a, wi)) in d.treatment().iter().zip(w).enumerate() {
        writeln!(f, "{},{},{:.16e}", i + 1, u8::from(a), wi)?;
    }
    Ok(())
}

fn write_trace(dir: &Path, method: Method, trace: &[confbal::weights::TraceRow]) -> Result<(), Error> {
    let mut f = create(dir, &format!("trace_{method}.csv"))?;
    writeln!(f, "iteration,objective,step,kkt_residual")?;
    for r in trace {
        writeln!(f, "{},{:.16e},{:.16e},{:.16e}", r.iteration, r.objective, r.step, r.kkt_residual)?;
    }
    Ok(())
}

fn write_solver_summary(dir: &Path, rows: &[(Method, Option<SolverSummary>)]) -> Result<(), Error> {
    let mut f = create(dir, "solver.csv")?;
    writeln!(f, "method,lambda,objective,constraint_residual,kkt_residual,iterations,converged")?;
    for (m, s) in rows {
        if let Some(s) = s {
            writeln!(
                f,
                "{m},{:.16e},{:.16e},{:.16e},{:.16e},{},{}",
                s.lambda, s.objective, s.constraint_residual, s.kkt_residual, s.iterations, s.converged
            )?;
        }
    }
    Ok(())
}

fn cmd_weights(cmd: &DataCmd, dir: &Path, start: Instant) -> Result<(), Error> {
    let methods = cmd.fit.methods()?;
    let seed = cmd.fit.seed.unwrap_or_else(entropy_seed);
    let config = cmd.fit.config(seed)?;
    let d = load(&cmd.data)?;
    let mut summaries = Vec::new();
    for method in methods {
        let opts = confbal::SolverOptions { record_trace: true, ..config.solver.clone() };
        let est = estimate_ate(&d, method, &EstimateConfig { solver: opts, ..config.clone() })?;
        write_weights(dir, method, &d, &est.weights)?;
        if est.solver.is_some() {
            write_trace(dir, method, &est.solver_trace)?;
        }
        summaries.push((method, est.solver));
    }
    write_solver_summary(dir, &summaries)?;
    write_metadata(dir, "weights", seed, &(&cmd.data, &cmd.fit), &config, start, false)
}

fn cmd_ate(cmd: &AteCmd, dir: &Path, start: Instant) -> Result<(), Error> {
    let methods = cmd.fit.methods()?;
    let seed = cmd.fit.seed.unwrap_or_else(entropy_seed);
    let config = cmd.fit.config(seed)?;
    let d = load(&cmd.data)?;
    let mut results = create(dir, "results.csv")?;
    writeln!(results, "method,estimate,se,bootstrap_resamples")?;
    for method in methods {
        let est = estimate_ate(&d, method, &config)?;
        let boot = match cmd.bootstrap {
            Some(b) => {
                let r = bootstrap_se(&d, method, &config, b, seed)?;
                r.write_csv(create(dir, &format!("bootstrap_{method}.csv"))?)?;
                Some(r)
            }
            None => None,
        };
        let se = boot.as_ref().map(|r| format!("{:.16e}", r.se)).unwrap_or_default();
        let b = cmd.bootstrap.map(|b| b.to_string()).unwrap_or_default();
        writeln!(results, "{method},{:.16e},{se},{b}", est.tau_hat)?;
        match &boot {
            Some(r) => println!("{method}\testimate={:.6}\tse={:.6}", est.tau_hat, r.se),
            None => println!("{method}\testimate={:.6}", est.tau_hat),
        }
    }
    results.flush()?;
    write_metadata(dir, "ate", seed, &(&cmd.data, &cmd.fit, cmd.bootstrap), &config, start, false)
}

fn cmd_simulate(cmd: &SimulateCmd, dir: &Path, start: Instant) -> Result<(), Error> {
    let models: Vec<Model> = cmd.model.split(',').map(|m| m.trim().parse()).collect::<Result<_, _>>()?;
    let ns: Vec<usize> = parse_list(&cmd.n, "n")?;
    let ps: Vec<usize> = parse_list(&cmd.p, "p")?;
    let methods = cmd.fit.methods()?;
    let seed = cmd.fit.seed.unwrap_or_else(entropy_seed);
    let config = cmd.fit.config(seed)?;
    let mut tidy = create(dir, "results.csv")?;
    let mut summary = create(dir, "summary.csv")?;
    let mut text = create(dir, "summary.txt")?;
    let mut balance = if cmd.balance { Some(create(dir, "balance.csv")?) } else { None };
    let mut first = true;
    for &model in &models {
        for &n in &ns {
            for &p in &ps {
                let spec = DgpSpec::new(model, n, p, seed);
                let report = run_experiment(&spec, &methods, cmd.reps, seed, &config)?;
                let mut buf = Vec::new();
                report.write_tidy_csv(&mut buf)?;
                let body = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
                let skip = if first { 0 } else { body.find('\n').map_or(0, |i| i + 1) };
                tidy.write_all(&body.as_bytes()[skip..])?;
                report.write_summary_csv(&mut summary, first)?;
                let t = report.summary_text();
                text.write_all(t.as_bytes())?;
                writeln!(text)?;
                print!("{t}");
                if let Some(out) = balance.as_mut() {
                    let rows = run_balance_experiment(&spec, &methods, cmd.reps, seed, &config)?;
                    let mut buf = Vec::new();
                    write_balance_csv(&spec, &rows, &mut buf)?;
                    let body = String::from_utf8(buf).map_err(|e| Error::Format(e.to_string()))?;
                    let skip = if first { 0 } else { body.find('\n').map_or(0, |i| i + 1) };
                    out.write_all(&body.as_bytes()[skip..])?;
                }
                first = false;
            }
        }
    }
    tidy.flush()?;
    summary.flush()?;
    text.flush()?;
    if let Some(mut b) = balance {
        b.flush()?;
    }
    #[derive(Serialize)]
    struct Grid<'a> {
        models: &'a str,
        n: &'a str,
        p: &'a str,
        reps: usize,
        fit: &'a FitArgs,
    }
    let grid = Grid { models: &cmd.model, n: &cmd.n, p: &cmd.p, reps: cmd.reps, fit: &cmd.fit };
    write_metadata(dir, "simulate", seed, &grid, &config, start, false)
}

fn read_weights(path: &Path, n: usize) -> Result<Vec<f64>, Error> {
    let text = fs::read_to_string(path)?;
    let mut lines = text.lines();
    let header = lines.next().ok_or_else(|| Error::Parse("empty weight file".into()))?;
    let cols: Vec<&str> = header.split(',').map(str::trim).collect();
    let wcol = cols
        .iter()
        .position(|&c| c == "weight")
        .ok_or_else(|| Error::Schema("weight file has no 'weight' column".into()))?;
    let w = lines
        .filter(|l| !l.trim().is_empty())
        .map(|l| {
            let cell = l.split(',').nth(wcol).unwrap_or("").trim();
            cell.parse::<f64>().map_err(|_| Error::Parse(format!("bad weight '{cell}'")))
        })
        .collect::<Result<Vec<_>, _>>()?;
    if w.len() != n {
        return Err(Error::Schema(format!("weight file has {} rows, data has {n}", w.len())));
    }
    Ok(w)
}

fn cmd_diagnose(cmd: &DiagnoseCmd, dir: &Path, start: Instant) -> Result<(), Error> {
    let methods = cmd.fit.methods()?;
    let seed = cmd.fit.seed.unwrap_or_else(entropy_seed);
    let config = cmd.fit.config(seed)?;
    let d = load(&cmd.data)?;
    let w = match &cmd.weights_file {
        Some(p) => read_weights(p, d.n())?,
        None => {
            let [method] = methods[..] else {
                return Err(Error::InvalidParameter("diagnose takes a single --method".into()));
            };
            let est = estimate_ate(&d, method, &config)?;
            write_weights(dir, method, &d, &est.weights)?;
            est.weights
        }
    };
    let balance = balance_report(&d, &w)?;
    balance.write_csv(create(dir, "balance.csv")?)?;
    balance.write_love_plot_csv(create(dir, "love_plot.csv")?)?;
    association_stats(&d, cmd.discrete_threshold).write_csv(create(dir, "association.csv")?)?;
    #[derive(Serialize)]
    struct Diag<'a> {
        data: &'a DataArgs,
        fit: &'a FitArgs,
        weights_file: &'a Option<PathBuf>,
        discrete_threshold: usize,
    }
    let cfg = Diag {
        data: &cmd.data,
        fit: &cmd.fit,
        weights_file: &cmd.weights_file,
        discrete_threshold: cmd.discrete_threshold,
    };
    write_metadata(dir, "diagnose", seed, &cfg, &config, start, true)
}

fn cmd_generate(cmd: &GenerateCmd, dir: &Path) -> Result<(), Error> {
    let model: Model = cmd.model.parse()?;
    let sample = generate(&DgpSpec::new(model, cmd.n, cmd.p, cmd.seed))?;
    let path = cmd.output.clone().unwrap_or_else(|| dir.join(format!("{model}.csv")));
    confbal::data::save_csv(&sample.dataset, &path)?;
    println!("{}", path.display());
    Ok(())
}

fn run(cli: &Cli) -> Result<(), Error> {
    if let Some(t) = cli.threads {
        rayon::ThreadPoolBuilder::new()
            .num_threads(t)
            .build_global()
            .map_err(|e| Error::InvalidParameter(e.to_string()))?;
    }
    fs::create_dir_all(&cli.out_dir)?;
    let start = Instant::now();
    let dir = cli.out_dir.as_path();
    match &cli.command {
        Command::Weights(c) => cmd_weights(c, dir, start),
        Command::Ate(c) => cmd_ate(c, dir, start),
        Command::Simulate(c) => cmd_simulate(c, dir, start),
        Command::Diagnose(c) => cmd_diagnose(c, dir, start),
        Command::Generate(c) => cmd_generate(c, dir),
    }
}

fn report(kind: &str, message: &str) {
    let line = serde_json::json!({ "error": kind, "message": message });
    eprintln!("{line}");
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) if !e.use_stderr() => {
            print!("{e}");
            return ExitCode::SUCCESS;
        }
        Err(e) => {
            report("UsageError", e.to_string().trim());
            return ExitCode::from(2);
        }
    };
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            report(e.kind(), &e.to_string());
            ExitCode::from(if e.is_usage() { 2 } else { 1 })
        }
    }
}

//! `pooltest`: enumeration, counting, optimization, zone maps, heuristics,
//! simulation, guided sessions and the HTTP service from one binary.
//!
//! Results go to stdout (JSON with `--json`), progress and notes to stderr.
//! Exit codes: 0 success, 2 usage, 3 size limit, 4 invalid input, 5 I/O,
//! 1 anything else.

mod interactive;

use std::fs::File;
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::sync::atomic::{AtomicU64, Ordering};

use clap::{ArgGroup, Args, Parser, Subcommand};
use pooltest::codec;
use pooltest::enumeration::{catalan_upper_bound, count_by_enumeration, count_naive, count_procedures, enumerate_procedures, CountResult, Pruning};
use pooltest::heuristics::greedy_procedure_in;
use pooltest::optimizer::find_optimal_in;
use pooltest::probability::expected_length_in;
use pooltest::session::{required_zone_maps, simulate, simulate_uniform, SimulationReport};
use pooltest::zones::{compute_metaprocedure, compute_metaprocedure_with_progress, default_resolution, slice, square_grid, Plane};
use pooltest::{EvalMode, Error, PriorVector, Procedure, Strategy, Value, ZoneMap, ZoneOptions};
use serde_json::json;

#[derive(Parser)]
#[command(name = "pooltest", version, about = "Adaptive pooled-testing procedures from per-sample infection priors")]
struct Cli {
    /// Print machine-readable JSON on stdout.
    #[arg(long, global = true)]
    json: bool,
    /// Worker threads for parallel commands (default: all cores).
    #[arg(long, global = true, value_name = "N")]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// List every testing procedure for n samples, one encoding per line.
    Enumerate {
        #[arg(long)]
        n: usize,
        /// Print only how many there are.
        #[arg(long)]
        count_only: bool,
        /// Skip redundant procedures (interchangeable tests, non-maximal pools).
        #[arg(long)]
        prune: bool,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Count testing procedures, naive procedures, or the Catalan upper bound.
    #[command(group(ArgGroup::new("kind").args(["naive", "catalan"])))]
    Count {
        #[arg(long)]
        n: usize,
        #[arg(long)]
        naive: bool,
        #[arg(long)]
        catalan: bool,
        /// Catalan index for the bound (default 2^n).
        #[arg(long, requires = "catalan")]
        t: Option<u64>,
    },
    /// Optimal procedure for the given priors.
    Optimal {
        #[command(flatten)]
        priors: PriorsArg,
        /// Exact rational arithmetic (implied by fractional priors).
        #[arg(long)]
        exact: bool,
        /// Also write the procedure encoding to FILE.
        #[arg(long, value_name = "FILE")]
        tree_out: Option<PathBuf>,
    },
    /// Compute and save the zone map (metaprocedure) for n samples.
    Zones {
        #[arg(long)]
        n: usize,
        /// Grid cells per axis (default depends on n).
        #[arg(long)]
        res: Option<u32>,
        /// Solve cells in exact arithmetic.
        #[arg(long)]
        exact: bool,
        /// Re-solve cells on zone boundaries exactly.
        #[arg(long)]
        refine: bool,
        #[arg(long, value_name = "FILE")]
        out: Option<PathBuf>,
    },
    /// Zone ids on a plane through a saved map, as CSV.
    Slice {
        #[arg(long, value_name = "FILE")]
        zonemap: PathBuf,
        /// `x=`, `y=`, `z=` or `d=` plane; required for n = 3, ignored for n = 2.
        #[arg(long)]
        plane: Option<Plane>,
        #[arg(long, default_value_t = 64)]
        res: usize,
        #[arg(long, value_name = "CSV")]
        out: Option<PathBuf>,
    },
    /// Greedy information heuristic procedure for the given priors.
    Greedy {
        #[command(flatten)]
        priors: PriorsArg,
        #[arg(long)]
        exact: bool,
    },
    /// Monte Carlo run of a strategy.
    #[command(group(ArgGroup::new("source").args(["priors", "uniform_priors"]).required(true)))]
    Simulate {
        #[arg(long, value_name = "P1,P2,...", allow_hyphen_values = true)]
        priors: Option<String>,
        /// Draw fresh uniform priors for every trial.
        #[arg(long, requires = "n")]
        uniform_priors: bool,
        #[arg(long)]
        n: Option<usize>,
        #[command(flatten)]
        strategy: StrategyArgs,
        #[arg(long, default_value_t = 100_000)]
        trials: u64,
        #[arg(long, default_value_t = 0)]
        seed: u64,
    },
    /// Guided session: prints the next pool and reads `+` or `-` from stdin.
    Session {
        #[command(flatten)]
        priors: PriorsArg,
        #[command(flatten)]
        strategy: StrategyArgs,
        /// Procedure encoding for `--strategy custom`.
        #[arg(long)]
        procedure: Option<String>,
    },
    /// Run the HTTP service.
    Serve {
        /// Listen address (default: POOLTEST_ADDR or 127.0.0.1:8080).
        #[arg(long, value_name = "HOST:PORT")]
        addr: Option<String>,
        /// Data directory (default: POOLTEST_DATA_DIR or ./pooltest-data).
        #[arg(long, value_name = "DIR")]
        data: Option<PathBuf>,
        /// Directory with the browser bundle.
        #[arg(long = "static", value_name = "DIR")]
        static_dir: Option<PathBuf>,
        /// Largest n the optimal endpoint accepts (default: 6)
        #[arg(long, value_name = "N")]
        optimizer_limit: Option<usize>,
    },
}

#[derive(Args)]
struct PriorsArg {
    /// Comma-separated infection probabilities; decimals or fractions like 17/100.
    #[arg(long, value_name = "P1,P2,...", allow_hyphen_values = true)]
    priors: String,
}

#[derive(Args)]
struct StrategyArgs {
    /// naive, optimal, greedy, metaprocedure, pairing:K[:SEED] or custom.
    #[arg(long, default_value = "optimal")]
    strategy: Strategy,
    /// Saved zone maps for metaprocedure and pairing; missing ones up to
    /// n = 3 are computed on the fly.
    #[arg(long, value_name = "FILE")]
    zonemap: Vec<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Core(Error),
    Io(io::Error),
    Other(String),
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        match e {
            Error::Io(io) => CliError::Io(io),
            other => CliError::Core(other),
        }
    }
}

impl From<io::Error> for CliError {
    fn from(e: io::Error) -> Self {
        CliError::Io(e)
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Core(Error::UnsupportedSize { .. } | Error::ResourceExhausted(_)) => 3,
            CliError::Core(
                Error::InvalidArgument(_)
                | Error::PriorOutOfRange { .. }
                | Error::Malformed { .. }
                | Error::InvalidProcedure(_)
                | Error::SizeMismatch { .. }
                | Error::CorruptZoneMap(_)
                | Error::Json(_),
            ) => 4,
            CliError::Io(_) => 5,
            _ => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Core(e) => write!(f, "{e}"),
            CliError::Io(e) => write!(f, "I/O error: {e}"),
            CliError::Other(m) => f.write_str(m),
        }
    }
}

type CliResult<T = ()> = Result<T, CliError>;

fn main() -> ExitCode {
    let cli = Cli::parse();
    if let Some(threads) = cli.threads {
        if threads == 0 {
            eprintln!("error: --threads must be positive");
            return ExitCode::from(2);
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build_global()
            .expect("thread pool is configured once");
    }
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e}");
            ExitCode::from(e.exit_code())
        }
    }
}

fn run(cli: Cli) -> CliResult {
    let json = cli.json;
    match cli.command {
        Command::Enumerate { n, count_only, prune, out } => enumerate(n, count_only, prune, out.as_deref(), json),
        Command::Count { n, naive, catalan, t } => {
            let (kind, result) = if naive {
                ("naive", count_naive(n)?)
            } else if catalan {
                ("catalan_bound", catalan_upper_bound(n, t)?)
            } else {
                ("procedures", count_procedures(n)?)
            };
            print_count(kind, &result, json)
        }
        Command::Optimal { priors, exact, tree_out } => {
            let (priors, mode) = parse_priors(&priors.priors, exact)?;
            let (procedure, value) = find_optimal_in(&priors, mode)?;
            if let Some(path) = tree_out {
                std::fs::write(path, format!("{procedure}\n"))?;
            }
            print_procedure(&priors, &procedure, &value, json)
        }
        Command::Greedy { priors, exact } => {
            let (priors, mode) = parse_priors(&priors.priors, exact)?;
            let procedure = greedy_procedure_in(&priors, mode)?;
            let value = expected_length_in(&procedure, &priors, mode)?;
            print_procedure(&priors, &procedure, &value, json)
        }
        Command::Zones { n, res, exact, refine, out } => zones(n, res, exact, refine, out, json),
        Command::Slice { zonemap, plane, res, out } => slice_command(&zonemap, plane, res, out.as_deref(), json),
        Command::Simulate {
            priors,
            uniform_priors,
            n,
            strategy,
            trials,
            seed,
        } => {
            let strat = strategy.strategy;
            let report = if uniform_priors {
                let n = n.expect("clap requires --n");
                let maps = zone_maps(strat, n, &strategy.zonemap)?;
                let refs: Vec<&ZoneMap> = maps.iter().collect();
                simulate_uniform(n, strat, trials, seed, &context(&refs))?
            } else {
                let (priors, _) = PriorVector::parse(priors.as_deref().expect("clap requires a prior source"))?;
                let maps = zone_maps(strat, priors.n(), &strategy.zonemap)?;
                let refs: Vec<&ZoneMap> = maps.iter().collect();
                simulate(&priors, strat, trials, seed, &context(&refs))?
            };
            print_report(&report, json)
        }
        Command::Session {
            priors,
            strategy,
            procedure,
        } => {
            let (priors, _) = PriorVector::parse(&priors.priors)?;
            let strat = strategy.strategy;
            let session = if strat == Strategy::Custom {
                let text = procedure.ok_or_else(|| CliError::Other("--strategy custom needs --procedure".into()))?;
                pooltest::Session::from_procedure("cli", priors, codec::decode(&text)?)?
            } else {
                let maps = zone_maps(strat, priors.n(), &strategy.zonemap)?;
                let refs: Vec<&ZoneMap> = maps.iter().collect();
                pooltest::Session::start("cli", priors, strat, &context(&refs))?
            };
            let stdin = io::stdin();
            interactive::run(session, &mut stdin.lock(), &mut io::stdout().lock(), json)
        }
        Command::Serve {
            addr,
            data,
            static_dir,
            optimizer_limit,
        } => serve(addr, data, static_dir, optimizer_limit),
    }
}

fn parse_priors(text: &str, exact: bool) -> CliResult<(PriorVector, EvalMode)> {
    let (priors, fraction) = PriorVector::parse(text)?;
    let mode = if exact || fraction { EvalMode::Exact } else { EvalMode::Float };
    Ok((priors, mode))
}

fn context<'a>(maps: &'a [&'a ZoneMap]) -> pooltest::SessionContext<'a> {
    pooltest::SessionContext {
        zone_maps: maps,
        ..Default::default()
    }
}

/// Loads the given maps and computes any missing ones the strategy needs.
fn zone_maps(strategy: Strategy, n: usize, files: &[PathBuf]) -> CliResult<Vec<ZoneMap>> {
    let mut maps = files.iter().map(|f| ZoneMap::load(f)).collect::<pooltest::Result<Vec<_>>>()?;
    for size in required_zone_maps(strategy, n)? {
        if maps.iter().any(|m| m.n() == size) {
            continue;
        }
        if size > 3 {
            return Err(Error::MissingZoneMap(size).into());
        }
        let resolution = default_resolution(size);
        eprintln!("computing the n = {size} zone map at resolution {resolution}");
        maps.push(compute_metaprocedure(size, ZoneOptions { resolution, ..ZoneOptions::new(size) })?);
    }
    Ok(maps)
}

fn emit(value: &serde_json::Value) -> CliResult {
    let mut out = io::stdout().lock();
    serde_json::to_writer_pretty(&mut out, value).map_err(Error::from)?;
    writeln!(out)?;
    Ok(())
}

fn count_value(c: &CountResult) -> serde_json::Value {
    match u64::try_from(&c.value) {
        Ok(v) => v.into(),
        Err(_) => c.value.to_string().into(),
    }
}

fn print_count(kind: &str, result: &CountResult, json: bool) -> CliResult {
    if json {
        emit(&json!({ "n": result.n, "kind": kind, "value": count_value(result), "method": result.method }))
    } else {
        println!("{}", result.value);
        Ok(())
    }
}

fn enumerate(n: usize, count_only: bool, prune: bool, out: Option<&Path>, json: bool) -> CliResult {
    let pruning = if prune { Pruning::ALL } else { Pruning::NONE };
    if count_only {
        let result = count_by_enumeration(n, pruning)?;
        return if json {
            emit(&json!({ "n": n, "pruned": prune, "count": count_value(&result) }))
        } else {
            println!("{}", result.value);
            Ok(())
        };
    }
    let stream = enumerate_procedures(n, pruning)?;
    let mut sink: Box<dyn Write> = match out {
        Some(path) => Box::new(BufWriter::new(File::create(path)?)),
        None => Box::new(BufWriter::new(io::stdout().lock())),
    };
    if json {
        let list: Vec<String> = stream.map(|p| p.to_string()).collect();
        serde_json::to_writer_pretty(&mut sink, &json!({ "n": n, "pruned": prune, "procedures": list }))
            .map_err(Error::from)?;
        writeln!(sink)?;
    } else {
        for procedure in stream {
            writeln!(sink, "{procedure}")?;
        }
    }
    sink.flush()?;
    Ok(())
}

fn print_procedure(priors: &PriorVector, procedure: &Procedure, value: &Value, json: bool) -> CliResult {
    if json {
        return emit(&json!({
            "priors": priors.to_strings(),
            "mode": if value.exact().is_some() { "exact" } else { "float" },
            "expected_length": value.to_f64(),
            "expected_length_exact": value.exact().map(|r| r.to_string()),
            "procedure": procedure.to_string(),
            "tree": codec::to_json(procedure),
        }));
    }
    match value.exact() {
        Some(r) => println!("expected length {:.6} (exact {r})", value.to_f64()),
        None => println!("expected length {:.6}", value.to_f64()),
    }
    println!("procedure {procedure}");
    Ok(())
}

fn zones(n: usize, res: Option<u32>, exact: bool, refine: bool, out: Option<PathBuf>, json: bool) -> CliResult {
    let resolution = res.unwrap_or_else(|| default_resolution(n));
    let options = ZoneOptions {
        resolution,
        mode: if exact { EvalMode::Exact } else { EvalMode::Float },
        refine_boundaries: refine,
    };
    let last = AtomicU64::new(u64::MAX);
    let map = compute_metaprocedure_with_progress(n, options, &|done, total| {
        let pct = (done * 100).checked_div(total).unwrap_or(100);
        if last.swap(pct, Ordering::Relaxed) != pct && pct % 10 == 0 {
            eprintln!("zones: {pct}% ({done}/{total} cells)");
        }
    })?;
    let path = out.unwrap_or_else(|| PathBuf::from(format!("zonemap-n{n}-r{resolution}.json")));
    map.save(&path)?;
    let meta = map.metadata();
    if json {
        let mut value = serde_json::to_value(&meta).map_err(Error::from)?;
        value["path"] = path.display().to_string().into();
        return emit(&value);
    }
    println!(
        "n={} resolution={} zones={} simplex_procedures={} checksum={}",
        meta.n, meta.resolution, meta.zones, meta.simplex_procedures, meta.checksum
    );
    println!("saved {}", path.display());
    Ok(())
}

fn slice_command(zonemap: &Path, plane: Option<Plane>, res: usize, out: Option<&Path>, json: bool) -> CliResult {
    let map = ZoneMap::load(zonemap)?;
    let grid = match (map.n(), plane) {
        (2, _) => square_grid(&map, res)?,
        (3, Some(plane)) => slice(&map, plane, res)?,
        (3, None) => return Err(Error::InvalidArgument("an n = 3 slice needs --plane".into()).into()),
        (n, _) => return Err(Error::InvalidArgument(format!("slices exist for n = 2 and n = 3, not n = {n}")).into()),
    };
    if let Some(path) = out {
        std::fs::write(path, grid.to_csv())?;
    }
    if json {
        return emit(&serde_json::to_value(&grid).map_err(Error::from)?);
    }
    if out.is_none() {
        print!("{}", grid.to_csv());
        return Ok(());
    }
    for id in grid.distinct_ids() {
        println!("{id}\t{}", grid.legend[id as usize]);
    }
    Ok(())
}

fn print_report(report: &SimulationReport, json: bool) -> CliResult {
    if json {
        return emit(&serde_json::to_value(report).map_err(Error::from)?);
    }
    println!(
        "{} over {} trials (seed {}): mean {:.6} ± {:.6}, expected {:.6}",
        report.strategy, report.trials, report.seed, report.mean_tests, report.std_error, report.expected_tests
    );
    for (tests, &count) in report.histogram.iter().enumerate() {
        if count > 0 {
            println!("{tests:>3} tests: {count}");
        }
    }
    Ok(())
}

fn serve(addr: Option<String>, data: Option<PathBuf>, static_dir: Option<PathBuf>, limit: Option<usize>) -> CliResult {
    tracing_subscriber::fmt()
        .with_env_filter(tracing_subscriber::EnvFilter::try_from_default_env().unwrap_or_else(|_| "info".into()))
        .with_writer(io::stderr)
        .init();
    let mut config = pooltest_service::ServiceConfig::from_env()?;
    if let Some(addr) = addr {
        config.addr = addr
            .parse()
            .map_err(|_| Error::InvalidArgument(format!("--addr '{addr}' is not HOST:PORT")))?;
    }
    if let Some(dir) = data {
        config.data_dir = dir;
    }
    if static_dir.is_some() {
        config.static_dir = static_dir;
    }
    if let Some(limit) = limit {
        config.optimizer_limit = limit;
    }
    let runtime = tokio::runtime::Runtime::new()?;
    runtime.block_on(pooltest_service::serve(config))?;
    Ok(())
}

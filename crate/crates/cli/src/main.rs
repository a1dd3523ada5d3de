use std::fs::{self, File};
use std::io::{self, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, Parser, Subcommand, ValueEnum};
use dplbfgs::data::{read_libsvm_file, LabelMap, ParseOptions};
use dplbfgs::harness::{
    self, compute_reference, first_reaching, reference_cache_path, Backend, Method, Problem, RunSpec,
    StepSizeHistogram, SweepRow, SWEEP_HEADER,
};
use dplbfgs::solver::{Status, WorkerOutcome};
use dplbfgs::{CostModel, DataError, Error, LabeledDataset, SolverConfig, SubproblemMode, Target};
use serde_json::json;

#[derive(Parser)]
#[command(
    name = "dplbfgs",
    version,
    about = "Distributed proximal LBFGS benchmarks for L1-regularized logistic regression"
)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Solve once and write `trace.csv`, `steps.csv` and `summary.json`.
    Run(RunArgs),
    /// Run DPLBFGS and direct SpaRSA on the same problem.
    Compare(RunArgs),
    /// Repeat a run over several `eps1` values and write `sweep.csv`.
    Sweep {
        #[command(flatten)]
        run: RunArgs,
        /// Comma-separated inner stopping tolerances.
        #[arg(long, value_delimiter = ',', default_values_t = [1e-1, 1e-2, 1e-3])]
        eps: Vec<f64>,
    },
    /// Compute (or load from `<data>.fstar`) the reference objective.
    Reference {
        #[command(flatten)]
        data: DataArgs,
        #[command(flatten)]
        problem: ProblemArgs,
    },
    /// Write a synthetic dataset in LIBSVM format.
    Generate {
        #[arg(long, value_enum)]
        kind: SynthKind,
        #[arg(long)]
        n: usize,
        #[arg(long)]
        d: usize,
        /// Nonzeros per instance (mean, for `text`); ignored by `dense`.
        #[arg(long, default_value_t = 20)]
        nnz: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long)]
        out: PathBuf,
    },
}

#[derive(Clone, Copy, ValueEnum)]
enum SynthKind {
    Signs,
    Text,
    Dense,
}

#[derive(Clone, Copy, ValueEnum)]
enum ModeArg {
    Partitioned,
    Replicated,
}

#[derive(Clone, Copy, ValueEnum)]
enum BackendArg {
    Sim,
    Socket,
}

#[derive(Args, Clone)]
struct DataArgs {
    /// LIBSVM file, optionally gzipped.
    #[arg(long)]
    data: PathBuf,
    /// Raw labels read as +1.
    #[arg(long, value_delimiter = ',', default_values_t = [1.0, 2.0], allow_negative_numbers = true)]
    positive: Vec<f64>,
    /// Raw labels read as -1.
    #[arg(long, value_delimiter = ',', default_values_t = [0.0, -1.0], allow_negative_numbers = true)]
    negative: Vec<f64>,
    /// Feature dimension; defaults to the largest index present.
    #[arg(long)]
    features: Option<usize>,
}

#[derive(Args, Clone, Copy)]
struct ProblemArgs {
    #[arg(long, default_value_t = 1.0)]
    c: f64,
    #[arg(long, default_value_t = 1.0)]
    lambda: f64,
}

#[derive(Args, Clone)]
struct RunArgs {
    #[command(flatten)]
    data: DataArgs,
    #[command(flatten)]
    problem: ProblemArgs,
    #[arg(long, default_value_t = 1)]
    k: usize,
    /// `dplbfgs`, or `sparsa` (alias `sparsa_direct`).
    #[arg(long, default_value = "dplbfgs")]
    method: Method,
    #[arg(long, default_value_t = 1e-2)]
    eps1: f64,
    #[arg(long, default_value_t = 10)]
    m: usize,
    #[arg(long, default_value_t = 1000)]
    max_iters: usize,
    /// Relative objective error at which the run stops.
    #[arg(long, default_value_t = 1e-3)]
    tol: f64,
    /// Known optimal objective; skips the reference solve.
    #[arg(long)]
    fstar: Option<f64>,
    /// Seconds of latency per allreduce stage.
    #[arg(long, default_value_t = 1e-3)]
    tinit: f64,
    /// Seconds per transmitted byte.
    #[arg(long, default_value_t = 1e-9)]
    tbyte: f64,
    #[arg(long, value_enum, default_value_t = ModeArg::Partitioned)]
    mode: ModeArg,
    #[arg(long, value_enum, default_value_t = BackendArg::Sim)]
    backend: BackendArg,
    /// Recorded in the summary. The solver itself draws no random numbers.
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long, default_value = "out")]
    out: PathBuf,
}

/// Failure carrying the process exit code.
struct Failure {
    code: u8,
    message: String,
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let code = match &e {
            Error::Data(DataError::Io(io)) if io.kind() == io::ErrorKind::NotFound => 2,
            _ => 1,
        };
        Failure {
            code,
            message: e.to_string(),
        }
    }
}

impl From<io::Error> for Failure {
    fn from(e: io::Error) -> Self {
        Failure {
            code: 1,
            message: e.to_string(),
        }
    }
}

fn not_converged(what: impl Into<String>) -> Failure {
    Failure {
        code: 3,
        message: what.into(),
    }
}

fn main() -> ExitCode {
    match dispatch(Cli::parse().command) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("error: {}", f.message);
            ExitCode::from(f.code)
        }
    }
}

fn dispatch(cmd: Command) -> Result<(), Failure> {
    match cmd {
        Command::Run(args) => {
            let (data, fstar) = prepare(&args)?;
            fs::create_dir_all(&args.out)?;
            let out = harness::run(&data, &spec(&args, args.method, fstar))?;
            write_outputs(&args.out, "", &args, args.method, fstar, &out, data.n_features())?;
            finish(args.method, &out)
        }
        Command::Compare(args) => {
            let (data, fstar) = prepare(&args)?;
            fs::create_dir_all(&args.out)?;
            let mut summary = BufWriter::new(File::create(args.out.join("compare.csv"))?);
            writeln!(
                summary,
                "method,status,comm_over_d,modeled_time_s,wall_time_s,outer_iters,final_rel_err"
            )?;
            let mut failures = Vec::new();
            for method in [Method::Dplbfgs, Method::Sparsa] {
                let out = harness::run(&data, &spec(&args, method, fstar))?;
                write_outputs(
                    &args.out,
                    &format!("_{method}"),
                    &args,
                    method,
                    fstar,
                    &out,
                    data.n_features(),
                )?;
                let hit = first_reaching(&out.trace, args.tol);
                let last = out.trace.rows.last().expect("initial row");
                let o = |v: Option<f64>| v.map(|x| format!("{x:e}")).unwrap_or_default();
                writeln!(
                    summary,
                    "{method},{:?},{},{},{},{},{}",
                    out.status,
                    o(hit.map(|r| r.comm_over_d)),
                    o(hit.map(|r| r.modeled_time_s)),
                    o(hit.map(|r| r.wall_time_s)),
                    hit.map(|r| r.iter.to_string()).unwrap_or_default(),
                    o(last.rel_err),
                )?;
                if let Err(f) = finish(method, &out) {
                    failures.push(f.message);
                }
            }
            summary.flush()?;
            if failures.is_empty() {
                Ok(())
            } else {
                Err(not_converged(failures.join("; ")))
            }
        }
        Command::Sweep { run, eps } => {
            let (data, fstar) = prepare(&run)?;
            fs::create_dir_all(&run.out)?;
            let rows = harness::eps_sweep(&data, &spec(&run, run.method, fstar), &eps, fstar, run.tol)?;
            let mut w = BufWriter::new(File::create(run.out.join("sweep.csv"))?);
            writeln!(w, "{SWEEP_HEADER}")?;
            for r in &rows {
                writeln!(w, "{}", r.csv_line())?;
            }
            w.flush()?;
            let missed: Vec<String> = rows
                .iter()
                .filter(|r| r.comm_over_d.is_none())
                .map(|r: &SweepRow| format!("{:e}", r.eps1))
                .collect();
            if missed.is_empty() {
                Ok(())
            } else {
                Err(not_converged(format!(
                    "tolerance not reached for eps1 = {}",
                    missed.join(", ")
                )))
            }
        }
        Command::Reference { data, problem } => {
            let dataset = load(&data)?;
            let (r, hit) = compute_reference(&dataset, &to_problem(problem), Some(&reference_cache_path(&data.data)))?;
            let text =
                serde_json::to_string_pretty(&json!({ "fstar": r.fstar, "cached": hit, "reference": r })).unwrap();
            // a closed pipe is not worth a panic
            let _ = writeln!(io::stdout(), "{text}");
            if r.converged {
                Ok(())
            } else {
                Err(not_converged("reference solve hit its iteration limit"))
            }
        }
        Command::Generate {
            kind,
            n,
            d,
            nnz,
            seed,
            out,
        } => {
            let ds = match kind {
                SynthKind::Signs => dplbfgs::synth::sparse_signs(n, d, nnz, seed),
                SynthKind::Text => dplbfgs::synth::text_like(n, d, nnz, seed),
                SynthKind::Dense => dplbfgs::synth::dense_like(n, d, seed),
            };
            fs::write(&out, ds.to_libsvm())?;
            Ok(())
        }
    }
}

fn to_problem(p: ProblemArgs) -> Problem {
    Problem {
        c: p.c,
        lambda: p.lambda,
    }
}

fn load(args: &DataArgs) -> Result<LabeledDataset, Failure> {
    let opts = ParseOptions {
        labels: LabelMap {
            positive: args.positive.clone(),
            negative: args.negative.clone(),
        },
        n_features: args.features,
    };
    read_libsvm_file(&args.data, &opts).map_err(|e| match e {
        DataError::Io(io) if io.kind() == io::ErrorKind::NotFound => Failure {
            code: 2,
            message: format!("dataset {} not found", args.data.display()),
        },
        other => Error::from(other).into(),
    })
}

fn prepare(args: &RunArgs) -> Result<(LabeledDataset, f64), Failure> {
    let data = load(&args.data)?;
    let fstar = match args.fstar {
        Some(f) => f,
        None => {
            let cache = reference_cache_path(&args.data.data);
            let (r, hit) = compute_reference(&data, &to_problem(args.problem), Some(&cache))?;
            if !hit {
                eprintln!("reference F* = {:.17e} written to {}", r.fstar, cache.display());
            }
            r.fstar
        }
    };
    Ok((data, fstar))
}

fn spec(args: &RunArgs, method: Method, fstar: f64) -> RunSpec {
    RunSpec {
        method,
        workers: args.k,
        problem: to_problem(args.problem),
        config: SolverConfig {
            m: args.m,
            eps1: args.eps1,
            max_outer_iters: args.max_iters,
            mode: match args.mode {
                ModeArg::Partitioned => SubproblemMode::Partitioned,
                ModeArg::Replicated => SubproblemMode::Replicated,
            },
            target: Some(Target::RelativeError { tol: args.tol }),
            reference_f: Some(fstar),
            ..SolverConfig::default()
        },
        cost: CostModel {
            t_initial: args.tinit,
            t_byte: args.tbyte,
        },
        backend: match args.backend {
            BackendArg::Sim => Backend::Sim,
            BackendArg::Socket => Backend::Socket,
        },
    }
}

fn write_outputs(
    dir: &Path,
    suffix: &str,
    args: &RunArgs,
    method: Method,
    fstar: f64,
    out: &WorkerOutcome,
    d: usize,
) -> Result<(), Failure> {
    let mut trace = BufWriter::new(File::create(dir.join(format!("trace{suffix}.csv")))?);
    harness::write_trace_csv(&mut trace, &out.trace)?;
    trace.flush()?;

    let theta = SolverConfig::default().theta;
    let hist = StepSizeHistogram::from_alphas(&out.trace.alphas(), theta);
    let mut steps = BufWriter::new(File::create(dir.join(format!("steps{suffix}.csv")))?);
    writeln!(steps, "alpha,count")?;
    for (i, count) in &hist.buckets {
        writeln!(steps, "{},{count}", theta.powi(*i as i32))?;
    }
    steps.flush()?;

    let summary = json!({
        "method": method.to_string(),
        "workers": args.k,
        "status": format!("{:?}", out.status),
        "f": out.f,
        "fstar": fstar,
        "c": args.problem.c,
        "lambda": args.problem.lambda,
        "eps1": args.eps1,
        "m": args.m,
        "seed": args.seed,
        "rounds": out.ledger.rounds(),
        "bytes": out.ledger.bytes(),
        "comm_over_d": out.ledger.bytes() as f64 / (8.0 * d as f64),
        "modeled_time_s": out.ledger.modeled_time(),
        "outer_iters": out.trace.rows.last().map(|r| r.iter),
        "percent_unit_steps": hist.percent_unit(),
        "min_alpha": hist.min_alpha,
    });
    fs::write(
        dir.join(format!("summary{suffix}.json")),
        serde_json::to_string_pretty(&summary).unwrap(),
    )?;
    Ok(())
}

fn finish(method: Method, out: &WorkerOutcome) -> Result<(), Failure> {
    match out.status {
        Status::TargetReached | Status::Stationary => Ok(()),
        s => Err(not_converged(format!("{method} stopped before the target ({s:?})"))),
    }
}

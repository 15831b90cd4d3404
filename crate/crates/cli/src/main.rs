use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, bail, Context};
use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::de::DeserializeOwned;
use serde::Serialize;

use fairot::costlearn::{match_with_learned_cost, LearnedCost};
use fairot::harness::{
    emit_plot_data, run_reusability, run_sweep, solve_point, Method, PointStatus, ProblemData,
    ReusabilitySpec, SweepSpec,
};
use fairot::io;
use fairot::oracle::{agreement_suite, AgreementSpec};
use fairot::sinkhorn::sinkhorn;
use fairot::synthdata::{DatasetKind, GenSpec};

const EXIT_INVALID_CONFIG: u8 = 1;
const EXIT_SOLVER_FAILURE: u8 = 2;
const EXIT_VERIFICATION_FAILURE: u8 = 3;

#[derive(Parser)]
#[command(
    name = "fairot",
    version,
    about = "Fair entropic optimal transport solvers and experiments"
)]
struct Cli {
    /// JSON configuration for the subcommand; missing fields take defaults.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    /// Output directory.
    #[arg(long, global = true, default_value = ".")]
    out: PathBuf,
    /// Master seed; overrides the configuration's seeds.
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Grid points solved concurrently by `sweep`.
    #[arg(long, global = true, default_value_t = 1)]
    jobs: usize,
    /// Repeat for more log output.
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    verbose: u8,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic dataset pair (x.csv, y.csv, provenance.json).
    Datagen {
        #[arg(long)]
        dataset: Option<DatasetKind>,
        #[arg(long)]
        n_x: Option<usize>,
        #[arg(long)]
        n_y: Option<usize>,
    },
    /// Solve one instance with any method (config: sweep spec).
    Solve {
        /// vanilla, fair_sinkhorn, penalized, costlearn_mahalanobis or costlearn_mlp.
        #[arg(long)]
        method: Option<Method>,
        /// ε for vanilla and fair_sinkhorn, λ otherwise.
        #[arg(long)]
        value: Option<f64>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Run a resumable parameter sweep (config: sweep spec).
    Sweep {
        /// vanilla, fair_sinkhorn, penalized, costlearn_mahalanobis or costlearn_mlp.
        #[arg(long)]
        method: Option<Method>,
    },
    /// Learn a cost on one instance (config: sweep spec).
    Costlearn {
        #[arg(long, value_enum, default_value_t = Family::Mahalanobis)]
        family: Family,
        #[arg(long)]
        lambda: Option<f64>,
        #[arg(long)]
        learning_rate: Option<f64>,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Score a learned cost on a dataset, or run the reusability study.
    Eval {
        /// Learned cost JSON written by `costlearn`.
        #[arg(long, conflicts_with = "reusability")]
        model: Option<PathBuf>,
        /// Train on one sample, test on fresh ones (config: reusability spec).
        #[arg(long)]
        reusability: bool,
        #[arg(long, default_value_t = 1.0)]
        epsilon: f64,
        #[command(flatten)]
        inputs: Inputs,
    },
    /// Compare the solvers against the dual-ascent oracles.
    OracleCheck,
}

#[derive(Args)]
struct Inputs {
    /// Source dataset CSV (x1..xd,label); generated from the config if absent.
    #[arg(long, requires = "y")]
    x: Option<PathBuf>,
    /// Destination dataset CSV.
    #[arg(long, requires = "x")]
    y: Option<PathBuf>,
    /// Fairness target CSV (K_s rows, K_w columns).
    #[arg(long)]
    target: Option<PathBuf>,
}

#[derive(Clone, Copy, ValueEnum)]
enum Family {
    Mahalanobis,
    Mlp,
}

/// Distinguishes verification failures from configuration and solver errors.
#[derive(Debug)]
struct VerificationFailed(String);

impl std::fmt::Display for VerificationFailed {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::error::Error for VerificationFailed {}

fn exit_code(err: &anyhow::Error) -> u8 {
    if err.downcast_ref::<VerificationFailed>().is_some() {
        return EXIT_VERIFICATION_FAILURE;
    }
    match err.downcast_ref::<fairot::Error>() {
        Some(fairot::Error::Solver(_) | fairot::Error::Numeric(_)) => EXIT_SOLVER_FAILURE,
        _ => EXIT_INVALID_CONFIG,
    }
}

fn load_config<T: DeserializeOwned + Default>(path: Option<&Path>) -> anyhow::Result<T> {
    match path {
        None => Ok(T::default()),
        Some(p) => Ok(io::read_json(p).with_context(|| format!("reading config {}", p.display()))?),
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> anyhow::Result<()> {
    Ok(io::write_json(path, value)?)
}

fn load_spec(cli: &Cli, method: Option<Method>) -> anyhow::Result<SweepSpec> {
    let mut spec = match (&cli.config, method) {
        (Some(p), _) => load_config::<SweepSpec>(Some(p))?,
        (None, Some(m)) => SweepSpec::for_method(m),
        (None, None) => bail!(fairot::Error::InvalidArgument(
            "give --method or --config".into()
        )),
    };
    if let Some(m) = method {
        spec.method = m;
    }
    if let Some(seed) = cli.seed {
        spec.seed = seed;
        spec.dataset.seed = seed;
    }
    Ok(spec)
}

fn load_data(spec: &SweepSpec, inputs: &Inputs) -> anyhow::Result<ProblemData> {
    let mut spec = spec.clone();
    if let Some(t) = &inputs.target {
        spec.target = io::read_target(t)?;
    }
    let data = match (&inputs.x, &inputs.y) {
        (Some(x), Some(y)) => {
            let groups = Some(spec.target.shape().0);
            let x = io::read_dataset(x, groups)?;
            let y = io::read_dataset(y, Some(spec.target.shape().1))?;
            ProblemData::from_samples(&spec, x, y)?
        }
        _ => ProblemData::generate(&spec)?,
    };
    Ok(data)
}

fn datagen(
    cli: &Cli,
    dataset: Option<DatasetKind>,
    n_x: Option<usize>,
    n_y: Option<usize>,
) -> anyhow::Result<()> {
    let mut spec: GenSpec = load_config(cli.config.as_deref())?;
    if let Some(d) = dataset {
        let sizes = (spec.n_x, spec.n_y);
        spec = match d {
            DatasetKind::Gaussians => GenSpec::gaussians(sizes.0, sizes.1, spec.seed),
            DatasetKind::Circles => GenSpec::circles(sizes.0, sizes.1, spec.seed),
        };
    }
    spec.n_x = n_x.unwrap_or(spec.n_x);
    spec.n_y = n_y.unwrap_or(spec.n_y);
    spec.seed = cli.seed.unwrap_or(spec.seed);
    let (x, y) = spec.generate()?;
    io::write_dataset(&cli.out.join("x.csv"), &x)?;
    io::write_dataset(&cli.out.join("y.csv"), &y)?;
    write_json(&cli.out.join("provenance.json"), &spec)?;
    println!(
        "wrote {} x and {} y points to {}",
        x.len(),
        y.len(),
        cli.out.display()
    );
    Ok(())
}

fn solve_one(
    cli: &Cli,
    mut spec: SweepSpec,
    value: Option<f64>,
    inputs: &Inputs,
) -> anyhow::Result<()> {
    let value = match (value, spec.grid.as_slice()) {
        (Some(v), _) => v,
        (None, [v]) => *v,
        (None, _) => bail!(fairot::Error::InvalidArgument(
            "give --value (ε for vanilla/fair_sinkhorn, λ otherwise) or a one-point grid".into()
        )),
    };
    spec.grid = vec![value];
    spec.validate()?;
    let data = load_data(&spec, inputs)?;
    let outcome = solve_point(&spec, &data, 0);
    let r = &outcome.record;
    write_json(&cli.out.join("record.json"), r)?;
    let (Some(plan), Some(report)) = (&outcome.plan, &outcome.report) else {
        bail!(fairot::Error::Solver(format!(
            "{} failed at {value}; see the log",
            spec.method
        )));
    };
    io::write_plan(&cli.out.join("plan.csv"), plan, report)?;
    if !outcome.trace.is_empty() {
        io::write_trace(&cli.out.join("trace.csv"), &outcome.trace)?;
    }
    if let Some(model) = &outcome.model {
        write_json(&cli.out.join("model.json"), model)?;
        io::write_history(&cli.out.join("history.csv"), &outcome.history)?;
    }
    if r.status != PointStatus::Converged {
        log::warn!("{} finished with status {:?}", spec.method, r.status);
    }
    println!(
        "{} at {value}: fairness loss {:.6e}, cost gap {:.6e}, {} iterations, {:?}",
        spec.method, r.fairness_loss, r.transport_cost_gap, r.iterations, r.status
    );
    Ok(())
}

fn sweep(cli: &Cli, method: Option<Method>) -> anyhow::Result<()> {
    let spec = load_spec(cli, method)?;
    let out = run_sweep(&spec, &cli.out, cli.jobs)?;
    let plots = emit_plot_data(&out.records, &cli.out);
    if let Err(e) = &plots {
        log::warn!("no plot written: {e}");
    }
    let failed = out.manifest.failed_points;
    println!(
        "{}: {} points ({} resumed, {} failed), hash {}",
        spec.method,
        out.records.len(),
        out.resumed,
        failed,
        out.manifest.determinism_hash
    );
    if failed > 0 {
        bail!(fairot::Error::Solver(format!(
            "{failed} grid points failed"
        )));
    }
    Ok(())
}

fn eval_model(cli: &Cli, model: &Path, epsilon: f64, inputs: &Inputs) -> anyhow::Result<()> {
    let model: LearnedCost =
        io::read_json(model).with_context(|| format!("reading model {}", model.display()))?;
    let spec = SweepSpec {
        epsilon,
        ..load_spec(cli, Some(Method::Vanilla))?
    };
    let data = load_data(&spec, inputs)?;
    let cfg = spec.sinkhorn_at(epsilon);
    let (plan, report) = match_with_learned_cost(&model, &data.x, &data.y, &data.target, &cfg)?;
    let vanilla = sinkhorn(&data.cost, &cfg)?;
    let vanilla_loss = fairot::fairness_loss(
        &vanilla.plan,
        &data.target,
        data.x.labels(),
        data.y.labels(),
    )?;
    let summary = serde_json::json!({
        "fairness_loss": report.fairness_loss,
        "vanilla_fairness_loss": vanilla_loss,
        "transport_cost": fairot::transport_cost(&plan, &data.cost)?,
        "vanilla_transport_cost": vanilla.report.transport_cost,
        "converged": report.converged,
        "wall_time_seconds": report.wall_time_seconds,
    });
    write_json(&cli.out.join("eval.json"), &summary)?;
    println!("{summary}");
    Ok(())
}

fn eval_reusability(cli: &Cli) -> anyhow::Result<()> {
    let mut spec: ReusabilitySpec = load_config(cli.config.as_deref())?;
    if let Some(seed) = cli.seed {
        spec.seed = seed;
        spec.train.seed = seed;
    }
    let out = run_reusability(&spec, Some(&cli.out))?;
    for m in [
        Method::Vanilla,
        Method::Penalized,
        Method::CostlearnMahalanobis,
        Method::CostlearnMlp,
    ] {
        let rows: Vec<_> = out.for_method(m).collect();
        let n = rows.len() as f64;
        let loss = rows.iter().map(|r| r.fairness_loss).sum::<f64>() / n;
        let time = rows.iter().map(|r| r.wall_time_seconds).sum::<f64>() / n;
        println!("{m}: mean fairness loss {loss:.4e}, mean wall time {time:.4}s");
    }
    Ok(())
}

fn oracle_check(cli: &Cli) -> anyhow::Result<()> {
    let mut spec: AgreementSpec = load_config(cli.config.as_deref())?;
    spec.seed = cli.seed.unwrap_or(spec.seed);
    let records = agreement_suite(&spec)?;
    let mut text = String::from("solver,n,m,epsilon,instance,frobenius_gap\n");
    for r in &records {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.solver,
            r.n,
            r.m,
            io::fmt_f64(r.epsilon),
            r.instance,
            io::fmt_f64(r.frobenius_gap)
        ));
    }
    std::fs::create_dir_all(&cli.out)?;
    let path = cli.out.join("oracle_gaps.csv");
    std::fs::write(&path, text).with_context(|| format!("writing {}", path.display()))?;
    let worst = records.iter().map(|r| r.frobenius_gap).fold(0.0, f64::max);
    let failures = records
        .iter()
        .filter(|r| r.frobenius_gap.is_nan() || r.frobenius_gap > spec.tolerance)
        .count();
    println!(
        "{} comparisons, worst gap {worst:.3e}, {failures} above {:.1e}",
        records.len(),
        spec.tolerance
    );
    if failures > 0 {
        return Err(anyhow!(VerificationFailed(format!(
            "{failures} solver/oracle gaps exceed {:.1e}",
            spec.tolerance
        ))));
    }
    Ok(())
}

fn run(cli: &Cli) -> anyhow::Result<()> {
    match &cli.command {
        Command::Datagen { dataset, n_x, n_y } => datagen(cli, *dataset, *n_x, *n_y),
        Command::Solve {
            method,
            value,
            inputs,
        } => solve_one(cli, load_spec(cli, *method)?, *value, inputs),
        Command::Sweep { method } => sweep(cli, *method),
        Command::Costlearn {
            family,
            lambda,
            learning_rate,
            inputs,
        } => {
            let method = match family {
                Family::Mahalanobis => Method::CostlearnMahalanobis,
                Family::Mlp => Method::CostlearnMlp,
            };
            let mut spec = load_spec(cli, Some(method))?;
            if learning_rate.is_some() {
                spec.costlearn.learning_rate = *learning_rate;
            }
            let lambda = lambda.or(if cli.config.is_some() {
                None
            } else {
                Some(1000.0)
            });
            solve_one(cli, spec, lambda, inputs)
        }
        Command::Eval {
            model,
            reusability,
            epsilon,
            inputs,
        } => match (model, reusability) {
            (_, true) => eval_reusability(cli),
            (Some(m), false) => eval_model(cli, m, *epsilon, inputs),
            (None, false) => bail!(fairot::Error::InvalidArgument(
                "give --model or --reusability".into()
            )),
        },
        Command::OracleCheck => oracle_check(cli),
    }
}

fn main() -> ExitCode {
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() {
                EXIT_INVALID_CONFIG
            } else {
                0
            });
        }
    };
    let level = match cli.verbose {
        0 => "warn",
        1 => "info",
        _ => "debug",
    };
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or(level)).init();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}

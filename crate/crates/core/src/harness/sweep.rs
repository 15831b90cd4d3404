use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;
use std::time::Instant;

use nalgebra::DMatrix;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{Method, PointStatus, SweepSpec, TradeoffRecord};
use crate::costlearn::{
    match_with_learned_cost, pretrain, train_cost, HistoryRow, LearnedCost, MahalanobisModel,
    MlpModel, TrainStatus, TrainingData,
};
use crate::domain::{transport_cost, CostMatrix, LabeledDataset};
use crate::error::{Error, Result};
use crate::fairness::{fairness_loss, resolve_target, FairnessTarget};
use crate::io::{fmt_f64, read_json, write_json};
use crate::penalized::{penalized_gcg, TraceRow};
use crate::sinkhorn::{fair_sinkhorn, sinkhorn, SolverReport};
use crate::synthdata::derive_seed;

const RECORDS_FILE: &str = "records.csv";
const CONFIG_FILE: &str = "config.json";
const MANIFEST_FILE: &str = "manifest.json";
const HEADER: &str =
    "point,method,grid_value,transport_cost_gap,fairness_loss,iterations,status,wall_time_seconds,seed";

/// A generated instance with its repaired target and reference plan cost.
#[derive(Debug, Clone)]
pub struct ProblemData {
    pub x: LabeledDataset,
    pub y: LabeledDataset,
    pub target: FairnessTarget,
    pub cost: CostMatrix,
    /// ⟨C, Π⟩ of the vanilla plan at the sweep's ε.
    pub reference_cost: f64,
}

impl ProblemData {
    pub fn generate(spec: &SweepSpec) -> Result<Self> {
        let (x, y) = spec.dataset.generate()?;
        Self::from_samples(spec, x, y)
    }

    pub fn from_samples(spec: &SweepSpec, x: LabeledDataset, y: LabeledDataset) -> Result<Self> {
        let target = resolve_target(&spec.target, x.labels(), y.labels(), true)?;
        let cost = CostMatrix::squared_euclidean(x.points(), y.points())?;
        let reference = sinkhorn(&cost, &spec.sinkhorn_at(spec.epsilon))?;
        if !reference.report.converged {
            log::warn!("reference vanilla plan did not converge");
        }
        let reference_cost = reference.report.transport_cost;
        Ok(Self {
            x,
            y,
            target,
            cost,
            reference_cost,
        })
    }
}

/// Everything one grid point produced.
#[derive(Debug, Clone)]
pub struct PointOutcome {
    pub record: TradeoffRecord,
    pub plan: Option<DMatrix<f64>>,
    /// Report of the solve that produced `plan`, with the fairness loss set.
    pub report: Option<SolverReport>,
    /// GCG trace for penalized points.
    pub trace: Vec<TraceRow>,
    /// Trained model and history for cost-learning points.
    pub model: Option<LearnedCost>,
    pub history: Vec<HistoryRow>,
}

struct Solved {
    plan: DMatrix<f64>,
    report: SolverReport,
    iterations: usize,
    status: PointStatus,
    trace: Vec<TraceRow>,
    model: Option<LearnedCost>,
    history: Vec<HistoryRow>,
}

fn status(converged: bool) -> PointStatus {
    if converged {
        PointStatus::Converged
    } else {
        PointStatus::Unconverged
    }
}

fn solved(plan: DMatrix<f64>, report: SolverReport) -> Solved {
    Solved {
        plan,
        iterations: report.iterations,
        status: status(report.converged),
        report,
        trace: Vec::new(),
        model: None,
        history: Vec::new(),
    }
}

fn train<M: crate::costlearn::CostModel>(
    model: M,
    wrap: fn(M) -> LearnedCost,
    spec: &SweepSpec,
    data: &ProblemData,
    lambda: f64,
) -> Result<Solved> {
    let sk = spec.sinkhorn_at(spec.epsilon);
    let training = TrainingData::new(data.x.clone(), data.y.clone(), data.target.clone())?;
    let mut model = model;
    if spec.method == Method::CostlearnMlp {
        let report = pretrain(&mut model, &training, &spec.costlearn.pretrain)?;
        log::debug!(
            "pretraining stopped after {} steps at gap {:.3e}",
            report.steps,
            report.relative_gap
        );
    }
    let cfg = spec.costlearn.bilevel(spec.method, lambda, &sk);
    let out = train_cost(model, &training, &cfg)?;
    let (plan, report) = match_with_learned_cost(&out.model, &data.x, &data.y, &data.target, &sk)?;
    let status = match out.status {
        TrainStatus::Diverged { .. } => PointStatus::Diverged,
        TrainStatus::Completed => status(report.converged && out.unconverged_inner_steps == 0),
    };
    Ok(Solved {
        plan: plan.into_inner(),
        report,
        iterations: out.history.len() - 1,
        status,
        trace: Vec::new(),
        model: Some(wrap(out.model)),
        history: out.history,
    })
}

fn run_method(spec: &SweepSpec, data: &ProblemData, value: f64, seed: u64) -> Result<Solved> {
    let (src, dst) = (data.x.labels(), data.y.labels());
    match spec.method {
        Method::Vanilla => {
            let out = sinkhorn(&data.cost, &spec.sinkhorn_at(value))?;
            Ok(solved(out.plan.into_inner(), out.report))
        }
        Method::FairSinkhorn => {
            let out = fair_sinkhorn(&data.cost, &data.target, src, dst, &spec.sinkhorn_at(value))?;
            Ok(solved(out.plan.into_inner(), out.report))
        }
        Method::Penalized => {
            let mut cfg = spec.gcg.config(value, spec.epsilon);
            cfg.sinkhorn = crate::sinkhorn::SinkhornConfig {
                tol: cfg.sinkhorn.tol,
                ..spec.sinkhorn_at(spec.epsilon)
            };
            let out = penalized_gcg(&data.cost, &data.target, src, dst, &cfg)?;
            let mut s = solved(out.plan.into_inner(), out.report);
            s.trace = out.trace;
            Ok(s)
        }
        Method::CostlearnMahalanobis => train(
            MahalanobisModel::identity(data.x.dim()),
            LearnedCost::Mahalanobis,
            spec,
            data,
            value,
        ),
        Method::CostlearnMlp => {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let model = MlpModel::random(data.x.dim(), spec.costlearn.hidden, &mut rng);
            train(model, LearnedCost::Mlp, spec, data, value)
        }
    }
}

/// Solves one grid point. Solver errors become a `Failed` record.
pub fn solve_point(spec: &SweepSpec, data: &ProblemData, point: usize) -> PointOutcome {
    let value = spec.grid[point];
    let seed = derive_seed(spec.seed, point as u64);
    let start = Instant::now();
    let result = run_method(spec, data, value, seed);
    let wall = start.elapsed().as_secs_f64();
    let mut record = TradeoffRecord {
        point,
        method: spec.method,
        grid_value: value,
        transport_cost_gap: f64::NAN,
        fairness_loss: f64::NAN,
        iterations: 0,
        status: PointStatus::Failed,
        wall_time_seconds: wall,
        seed,
    };
    let metrics = result.and_then(|s| {
        let cost = transport_cost(&s.plan, &data.cost)?;
        let loss = fairness_loss(&s.plan, &data.target, data.x.labels(), data.y.labels())?;
        Ok((s, cost, loss))
    });
    match metrics {
        Ok((mut s, cost, loss)) => {
            s.report.fairness_loss = Some(loss);
            // Learned-cost plans are reported under the squared Euclidean cost.
            s.report.transport_cost = cost;
            record.transport_cost_gap = cost - data.reference_cost;
            record.fairness_loss = loss;
            record.iterations = s.iterations;
            record.status = s.status;
            PointOutcome {
                record,
                plan: Some(s.plan),
                report: Some(s.report),
                trace: s.trace,
                model: s.model,
                history: s.history,
            }
        }
        Err(e) => {
            log::error!(
                "{} at {} = {value}: {e}",
                spec.method,
                if spec.method.grid_is_epsilon() {
                    "epsilon"
                } else {
                    "lambda"
                }
            );
            PointOutcome {
                record,
                plan: None,
                report: None,
                trace: Vec::new(),
                model: None,
                history: Vec::new(),
            }
        }
    }
}

fn record_line(r: &TradeoffRecord, with_wall_time: bool) -> String {
    let mut fields = vec![
        r.point.to_string(),
        r.method.name().to_string(),
        fmt_f64(r.grid_value),
        fmt_f64(r.transport_cost_gap),
        fmt_f64(r.fairness_loss),
        r.iterations.to_string(),
        serde_json::to_value(r.status)
            .ok()
            .and_then(|v| v.as_str().map(str::to_string))
            .unwrap_or_default(),
    ];
    if with_wall_time {
        fields.push(fmt_f64(r.wall_time_seconds));
    }
    fields.push(r.seed.to_string());
    fields.join(",")
}

/// SHA-256 of the records in point order, wall times excluded.
pub fn determinism_hash(records: &[TradeoffRecord]) -> String {
    let mut sorted: Vec<&TradeoffRecord> = records.iter().collect();
    sorted.sort_by_key(|r| r.point);
    let mut h = Sha256::new();
    for r in sorted {
        h.update(record_line(r, false).as_bytes());
        h.update(b"\n");
    }
    hex::encode(h.finalize())
}

fn parse_record(line: &str, path: &Path, n: usize) -> Result<TradeoffRecord> {
    let bad = |what: &str| Error::Parse(format!("{}:{n}: bad {what}", path.display()));
    let f: Vec<&str> = line.split(',').collect();
    if f.len() != 9 {
        return Err(bad("field count"));
    }
    let num = |s: &str, what: &str| s.parse::<f64>().map_err(|_| bad(what));
    Ok(TradeoffRecord {
        point: f[0].parse().map_err(|_| bad("point"))?,
        method: f[1].parse()?,
        grid_value: num(f[2], "grid_value")?,
        transport_cost_gap: num(f[3], "transport_cost_gap")?,
        fairness_loss: num(f[4], "fairness_loss")?,
        iterations: f[5].parse().map_err(|_| bad("iterations"))?,
        status: serde_json::from_value(serde_json::Value::String(f[6].to_string()))
            .map_err(|_| bad("status"))?,
        wall_time_seconds: num(f[7], "wall_time_seconds")?,
        seed: f[8].parse().map_err(|_| bad("seed"))?,
    })
}

/// Reads a `records.csv`. A truncated final line (an interrupted append) is
/// ignored.
pub fn load_records(path: &Path) -> Result<Vec<TradeoffRecord>> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut lines = text.split_inclusive('\n').enumerate();
    match lines.next() {
        Some((_, h)) if h.trim_end() == HEADER => {}
        None => return Ok(Vec::new()),
        _ => {
            return Err(Error::Parse(format!(
                "{}: unexpected header",
                path.display()
            )))
        }
    }
    let mut out = Vec::new();
    for (k, line) in lines {
        if !line.ends_with('\n') {
            log::warn!("{}: dropping incomplete last line", path.display());
            break;
        }
        out.push(parse_record(line.trim_end(), path, k + 1)?);
    }
    Ok(out)
}

fn write_records(path: &Path, records: &[TradeoffRecord]) -> Result<()> {
    let tmp = path.with_extension("csv.tmp");
    let mut out = BufWriter::new(File::create(&tmp).map_err(|e| Error::io(&tmp, e))?);
    let mut text = String::from(HEADER);
    text.push('\n');
    for r in records {
        text.push_str(&record_line(r, true));
        text.push('\n');
    }
    out.write_all(text.as_bytes())
        .and_then(|_| out.flush())
        .map_err(|e| Error::io(&tmp, e))?;
    drop(out);
    std::fs::rename(&tmp, path).map_err(|e| Error::io(path, e))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Manifest {
    pub crate_version: String,
    pub method: Method,
    pub master_seed: u64,
    pub dataset_seed: u64,
    pub points: usize,
    pub failed_points: usize,
    pub records_file: String,
    /// See [`determinism_hash`].
    pub determinism_hash: String,
}

#[derive(Debug, Clone)]
pub struct SweepOutput {
    /// In grid order.
    pub records: Vec<TradeoffRecord>,
    pub manifest: Manifest,
    /// Points found complete in an earlier run.
    pub resumed: usize,
    pub dir: PathBuf,
}

/// Runs every grid point not yet recorded in `dir`, up to `jobs` at a time.
///
/// Records are appended as points finish, so an interrupted run can be
/// resumed; on completion `records.csv` is rewritten in grid order.
pub fn run_sweep(spec: &SweepSpec, dir: &Path, jobs: usize) -> Result<SweepOutput> {
    spec.validate()?;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let config_path = dir.join(CONFIG_FILE);
    if config_path.exists() {
        let frozen: SweepSpec = read_json(&config_path)?;
        if &frozen != spec {
            return Err(Error::invalid(format!(
                "{} holds a different sweep configuration; use a fresh output directory",
                dir.display()
            )));
        }
    } else {
        write_json(&config_path, spec)?;
    }

    let records_path = dir.join(RECORDS_FILE);
    let mut done: Vec<TradeoffRecord> = if records_path.exists() {
        load_records(&records_path)?
            .into_iter()
            .filter(|r| r.point < spec.grid.len() && r.grid_value == spec.grid[r.point])
            .collect()
    } else {
        Vec::new()
    };
    done.sort_by_key(|r| r.point);
    done.dedup_by_key(|r| r.point);
    let resumed = done.len();
    // Rewrite so that a dropped partial line does not corrupt later appends.
    write_records(&records_path, &done)?;

    let pending: Vec<usize> = (0..spec.grid.len())
        .filter(|p| done.binary_search_by_key(p, |r| r.point).is_err())
        .collect();
    if !pending.is_empty() {
        let data = ProblemData::generate(spec)?;
        let file = OpenOptions::new()
            .append(true)
            .open(&records_path)
            .map_err(|e| Error::io(&records_path, e))?;
        let sink = Mutex::new((file, Vec::with_capacity(pending.len()), None::<Error>));
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(jobs.max(1))
            .build()
            .map_err(|e| Error::invalid(format!("thread pool: {e}")))?;
        pool.install(|| {
            pending.par_iter().for_each(|&p| {
                let outcome = solve_point(spec, &data, p);
                let mut guard = sink.lock().expect("records writer poisoned");
                let (file, records, err) = &mut *guard;
                let line = record_line(&outcome.record, true) + "\n";
                if let Err(e) = file.write_all(line.as_bytes()).and_then(|_| file.flush()) {
                    err.get_or_insert(Error::io(&records_path, e));
                }
                records.push(outcome.record);
            })
        });
        let (_, fresh, err) = sink.into_inner().expect("records writer poisoned");
        if let Some(e) = err {
            return Err(e);
        }
        done.extend(fresh);
        done.sort_by_key(|r| r.point);
        write_records(&records_path, &done)?;
    }

    let manifest = Manifest {
        crate_version: env!("CARGO_PKG_VERSION").to_string(),
        method: spec.method,
        master_seed: spec.seed,
        dataset_seed: spec.dataset.seed,
        points: done.len(),
        failed_points: done
            .iter()
            .filter(|r| r.status == PointStatus::Failed)
            .count(),
        records_file: RECORDS_FILE.to_string(),
        determinism_hash: determinism_hash(&done),
    };
    write_json(&dir.join(MANIFEST_FILE), &manifest)?;
    Ok(SweepOutput {
        records: done,
        manifest,
        resumed,
        dir: dir.to_path_buf(),
    })
}

use std::path::Path;
use std::time::Instant;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{default_target, CostLearnSettings, GcgSettings, Method};
use crate::costlearn::{
    match_with_learned_cost, pretrain, train_cost, AdamParams, BilevelConfig, CostModel,
    HistoryRow, LearnedCost, MahalanobisModel, MlpModel, TrainingData,
};
use crate::domain::{CostMatrix, LabeledDataset};
use crate::error::{Error, Result};
use crate::fairness::{fairness_loss, resolve_target, FairnessTarget};
use crate::io::{fmt_f64, write_history, write_json};
use crate::penalized::penalized_gcg;
use crate::sinkhorn::{sinkhorn, SinkhornConfig};
use crate::synthdata::{derive_seed, resample, GenSpec};

/// λ and learning rate for one learned cost.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ModelSettings {
    pub lambda: f64,
    pub learning_rate: f64,
}

/// Learn costs once on a training sample, then match fresh test samples.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ReusabilitySpec {
    pub train: GenSpec,
    pub test_n_x: usize,
    pub test_n_y: usize,
    pub trials: usize,
    pub epsilon: f64,
    pub target: FairnessTarget,
    /// λ of the penalized re-solve on each test sample.
    pub penalized_lambda: f64,
    pub mahalanobis: ModelSettings,
    pub mlp: ModelSettings,
    /// Steps, unroll length, width and pretraining; the learning rate comes
    /// from the per-model settings.
    pub costlearn: CostLearnSettings,
    pub sinkhorn: SinkhornConfig,
    pub gcg: GcgSettings,
    pub seed: u64,
}

impl Default for ReusabilitySpec {
    fn default() -> Self {
        Self {
            train: GenSpec::gaussians(1000, 100, 0),
            test_n_x: 500,
            test_n_y: 50,
            trials: 10,
            epsilon: 1.0,
            target: default_target(),
            penalized_lambda: 90.0,
            mahalanobis: ModelSettings {
                lambda: 1000.0,
                learning_rate: 0.1,
            },
            mlp: ModelSettings {
                lambda: 500.0,
                learning_rate: 0.05,
            },
            costlearn: CostLearnSettings::default(),
            sinkhorn: SinkhornConfig::new(1.0),
            gcg: GcgSettings::default(),
            seed: 0,
        }
    }
}

impl ReusabilitySpec {
    pub fn validate(&self) -> Result<()> {
        self.train.validate()?;
        self.train
            .with_sizes(self.test_n_x, self.test_n_y)
            .validate()?;
        if self.trials == 0 {
            return Err(Error::invalid("trials must be >= 1"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        self.gcg
            .config(self.penalized_lambda, self.epsilon)
            .validate()?;
        for m in [self.mahalanobis, self.mlp] {
            self.bilevel(m).validate()?;
        }
        Ok(())
    }

    fn sinkhorn_cfg(&self) -> SinkhornConfig {
        SinkhornConfig {
            epsilon: self.epsilon,
            log_domain: self.epsilon < 1.0,
            warm_start: None,
            ..self.sinkhorn.clone()
        }
    }

    fn bilevel(&self, m: ModelSettings) -> BilevelConfig {
        BilevelConfig {
            lambda: m.lambda,
            inner: self.sinkhorn_cfg(),
            outer_steps: self.costlearn.outer_steps,
            adam: AdamParams::with_learning_rate(m.learning_rate),
            unroll_length: self.costlearn.unroll_length,
        }
    }
}

/// One method on one test sample.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReusabilityRecord {
    pub trial: usize,
    pub method: Method,
    pub fairness_loss: f64,
    /// Cost evaluation plus solve, excluding data generation.
    pub wall_time_seconds: f64,
    pub converged: bool,
    pub data_seed: u64,
}

#[derive(Debug, Clone)]
pub struct ReusabilityOutput {
    pub records: Vec<ReusabilityRecord>,
    pub mahalanobis: MahalanobisModel,
    pub mlp: MlpModel,
    pub mahalanobis_history: Vec<HistoryRow>,
    pub mlp_history: Vec<HistoryRow>,
}

impl ReusabilityOutput {
    pub fn for_method(&self, method: Method) -> impl Iterator<Item = &ReusabilityRecord> {
        self.records.iter().filter(move |r| r.method == method)
    }
}

fn timed<T>(f: impl FnOnce() -> Result<T>) -> Result<(T, f64)> {
    let start = Instant::now();
    let out = f()?;
    Ok((out, start.elapsed().as_secs_f64()))
}

fn test_trial(
    spec: &ReusabilitySpec,
    trial: usize,
    maha: &MahalanobisModel,
    mlp: &MlpModel,
) -> Result<Vec<ReusabilityRecord>> {
    let test_spec = spec.train.with_sizes(spec.test_n_x, spec.test_n_y);
    // Trial k draws from stream k + 1 of the training seed.
    let stream = 1 + trial as u64;
    let data_seed = derive_seed(test_spec.seed, stream);
    let (x, y): (LabeledDataset, LabeledDataset) = resample(&test_spec, stream)?;
    let target = resolve_target(&spec.target, x.labels(), y.labels(), true)?;
    let sk = spec.sinkhorn_cfg();
    let (src, dst) = (x.labels(), y.labels());
    let record = |method, fairness_loss, wall_time_seconds, converged| ReusabilityRecord {
        trial,
        method,
        fairness_loss,
        wall_time_seconds,
        converged,
        data_seed,
    };
    let mut out = Vec::with_capacity(4);

    let (vanilla, t) = timed(|| {
        let cost = CostMatrix::squared_euclidean(x.points(), y.points())?;
        sinkhorn(&cost, &sk)
    })?;
    out.push(record(
        Method::Vanilla,
        fairness_loss(&vanilla.plan, &target, src, dst)?,
        t,
        vanilla.report.converged,
    ));

    let mut gcg = spec.gcg.config(spec.penalized_lambda, spec.epsilon);
    gcg.sinkhorn = SinkhornConfig {
        tol: gcg.sinkhorn.tol,
        ..sk.clone()
    };
    let (pen, t) = timed(|| {
        let cost = CostMatrix::squared_euclidean(x.points(), y.points())?;
        penalized_gcg(&cost, &target, src, dst, &gcg)
    })?;
    out.push(record(
        Method::Penalized,
        fairness_loss(&pen.plan, &target, src, dst)?,
        t,
        pen.report.converged,
    ));

    for (method, model) in [
        (
            Method::CostlearnMahalanobis,
            LearnedCost::Mahalanobis(maha.clone()),
        ),
        (Method::CostlearnMlp, LearnedCost::Mlp(mlp.clone())),
    ] {
        let ((_, report), t) = timed(|| match_with_learned_cost(&model, &x, &y, &target, &sk))?;
        out.push(record(
            method,
            report.fairness_loss.unwrap_or(f64::NAN),
            t,
            report.converged,
        ));
    }
    Ok(out)
}

fn write_records(path: &Path, records: &[ReusabilityRecord]) -> Result<()> {
    let mut text =
        String::from("trial,method,fairness_loss,wall_time_seconds,converged,data_seed\n");
    for r in records {
        text.push_str(&format!(
            "{},{},{},{},{},{}\n",
            r.trial,
            r.method,
            fmt_f64(r.fairness_loss),
            fmt_f64(r.wall_time_seconds),
            r.converged,
            r.data_seed
        ));
    }
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Trains a Mahalanobis and an MLP cost on `spec.train`, then, on each of
/// `spec.trials` fresh test samples, times and scores vanilla OT, a
/// penalized re-solve and vanilla OT under each learned cost.
///
/// Trials run sequentially so that wall times are not distorted by
/// contention. With `dir` set, writes `config.json`, `reusability.csv`,
/// the trained models and their training histories.
pub fn run_reusability(spec: &ReusabilitySpec, dir: Option<&Path>) -> Result<ReusabilityOutput> {
    spec.validate()?;
    let (x, y) = spec.train.generate()?;
    let target = resolve_target(&spec.target, x.labels(), y.labels(), true)?;
    let data = TrainingData::new(x, y, target)?;

    let maha_out = train_cost(
        MahalanobisModel::identity(data.x.dim()),
        &data,
        &spec.bilevel(spec.mahalanobis),
    )?;
    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(spec.seed, 0));
    let mut mlp = MlpModel::random(data.x.dim(), spec.costlearn.hidden, &mut rng);
    pretrain(&mut mlp, &data, &spec.costlearn.pretrain)?;
    let mlp_out = train_cost(mlp, &data, &spec.bilevel(spec.mlp))?;
    for (name, m) in [
        ("mahalanobis", maha_out.model.params()),
        ("mlp", mlp_out.model.params()),
    ] {
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Solver(format!(
                "{name} training produced non-finite parameters"
            )));
        }
    }

    let mut records = Vec::with_capacity(4 * spec.trials);
    for trial in 0..spec.trials {
        records.extend(test_trial(spec, trial, &maha_out.model, &mlp_out.model)?);
    }

    if let Some(dir) = dir {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
        write_json(&dir.join("config.json"), spec)?;
        write_records(&dir.join("reusability.csv"), &records)?;
        write_json(
            &dir.join("mahalanobis.json"),
            &LearnedCost::Mahalanobis(maha_out.model.clone()),
        )?;
        write_json(
            &dir.join("mlp.json"),
            &LearnedCost::Mlp(mlp_out.model.clone()),
        )?;
        write_history(&dir.join("mahalanobis_history.csv"), &maha_out.history)?;
        write_history(&dir.join("mlp_history.csv"), &mlp_out.history)?;
    }
    Ok(ReusabilityOutput {
        records,
        mahalanobis: maha_out.model,
        mlp: mlp_out.model,
        mahalanobis_history: maha_out.history,
        mlp_history: mlp_out.history,
    })
}

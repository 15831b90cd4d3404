//! Bilevel cost learning.
//!
//! Learns cost parameters θ so that the plain entropic plan under c_θ is fair:
//!
//! ```text
//! min_θ  L_F(Π_ε(C_θ)) + (1/λ) ‖C_θ − C_base‖²_F
//! ```
//!
//! The inner plan is differentiated by unrolling Sinkhorn (see [`unroll`]),
//! and each outer step is a single Adam update.

pub mod adam;
pub mod mahalanobis;
pub mod mlp;
pub mod unroll;

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::domain::{CostMatrix, LabeledDataset, TransportPlan};
use crate::error::{check_dim, Error, Result};
use crate::fairness::{
    fairness_loss, fairness_loss_grad_unchecked, fairness_loss_unchecked, validate_target,
    FairnessTarget,
};
use crate::sinkhorn::{sinkhorn, SinkhornConfig, SolverReport};

pub use adam::{Adam, AdamParams};
pub use mahalanobis::{mahalanobis_backward, mahalanobis_cost, psd_project, MahalanobisModel};
pub use mlp::{Dense, MlpModel, Tower, DEFAULT_HIDDEN, EMBEDDING_DIM};
pub use unroll::{unrolled_sinkhorn, UnrollConfig, Unrolled};

/// A differentiable parametric ground cost.
pub trait CostModel: Clone {
    fn input_dim(&self) -> usize;

    /// Cost between the rows of `x` and the rows of `y`.
    fn cost(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>>;

    /// Gradient of Σ_ij C̄_ij C_ij(θ) with respect to the flat parameters.
    fn cost_backward(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        c_bar: &DMatrix<f64>,
    ) -> Result<Vec<f64>>;

    fn params(&self) -> Vec<f64>;

    fn set_params(&mut self, params: &[f64]) -> Result<()>;

    /// Restores constraints after a gradient step.
    fn project(&mut self) -> Result<()> {
        Ok(())
    }
}

/// Either cost family, tagged by `kind` in JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum LearnedCost {
    Mahalanobis(MahalanobisModel),
    Mlp(MlpModel),
}

impl CostModel for LearnedCost {
    fn input_dim(&self) -> usize {
        match self {
            Self::Mahalanobis(m) => m.input_dim(),
            Self::Mlp(m) => m.input_dim(),
        }
    }

    fn cost(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        match self {
            Self::Mahalanobis(m) => m.cost(x, y),
            Self::Mlp(m) => m.cost(x, y),
        }
    }

    fn cost_backward(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        c_bar: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        match self {
            Self::Mahalanobis(m) => m.cost_backward(x, y, c_bar),
            Self::Mlp(m) => m.cost_backward(x, y, c_bar),
        }
    }

    fn params(&self) -> Vec<f64> {
        match self {
            Self::Mahalanobis(m) => m.params(),
            Self::Mlp(m) => m.params(),
        }
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        match self {
            Self::Mahalanobis(m) => m.set_params(params),
            Self::Mlp(m) => m.set_params(params),
        }
    }

    fn project(&mut self) -> Result<()> {
        match self {
            Self::Mahalanobis(m) => m.project(),
            Self::Mlp(m) => m.project(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BilevelConfig {
    /// Trade-off weight; the discrepancy enters with weight 1/λ, so
    /// `f64::INFINITY` drops it.
    pub lambda: f64,
    /// Inner solver: epsilon, tolerance, iteration cap and domain.
    pub inner: SinkhornConfig,
    pub outer_steps: usize,
    pub adam: AdamParams,
    pub unroll_length: usize,
}

impl Default for BilevelConfig {
    fn default() -> Self {
        Self::new(1000.0, 1.0, 0.1)
    }
}

impl BilevelConfig {
    pub fn new(lambda: f64, epsilon: f64, learning_rate: f64) -> Self {
        Self {
            lambda,
            inner: SinkhornConfig::new(epsilon),
            outer_steps: 300,
            adam: AdamParams::with_learning_rate(learning_rate),
            unroll_length: 200,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda > 0.0) {
            return Err(Error::invalid(format!(
                "lambda must be > 0, got {}",
                self.lambda
            )));
        }
        if self.unroll_length == 0 {
            return Err(Error::invalid("unroll_length must be >= 1"));
        }
        self.adam.validate()?;
        self.inner.validate()
    }

    fn unroll(&self) -> UnrollConfig {
        UnrollConfig {
            epsilon: self.inner.epsilon,
            tol: self.inner.tol,
            max_iter: self.inner.max_iter,
            unroll_length: self.unroll_length,
            log_domain: self.inner.log_domain,
        }
    }
}

/// Samples, fairness target and reference cost for training.
#[derive(Debug, Clone)]
pub struct TrainingData {
    pub x: LabeledDataset,
    pub y: LabeledDataset,
    pub target: FairnessTarget,
    pub base_cost: DMatrix<f64>,
}

impl TrainingData {
    /// Uses squared Euclidean distance as the reference cost. The target must
    /// couple the empirical group marginals.
    pub fn new(x: LabeledDataset, y: LabeledDataset, target: FairnessTarget) -> Result<Self> {
        check_dim("point dimension", x.dim(), y.dim())?;
        validate_target(&target, &x.labels().marginal(), &y.labels().marginal())
            .map_err(|v| Error::Infeasible(format!("invalid fairness target: {v}")))?;
        let base_cost = CostMatrix::squared_euclidean(x.points(), y.points())?.into_inner();
        Ok(Self {
            x,
            y,
            target,
            base_cost,
        })
    }
}

#[derive(Debug, Clone)]
pub struct BilevelEval {
    pub value: f64,
    pub fairness_loss: f64,
    /// ‖C_θ − C_base‖²_F, without the 1/λ weight.
    pub discrepancy: f64,
    pub grad: Vec<f64>,
    pub inner_converged: bool,
    pub inner_iterations: usize,
    pub plan: DMatrix<f64>,
    /// Inner column potential, for warm-starting the next solve.
    pub warm_g: DVector<f64>,
}

fn penalty_weight(lambda: f64) -> f64 {
    if lambda.is_infinite() {
        0.0
    } else {
        1.0 / lambda
    }
}

/// Objective value and parameter gradient at `model`.
///
/// Inner non-convergence still yields a gradient; it is flagged through
/// `inner_converged`.
pub fn bilevel_objective<M: CostModel>(
    model: &M,
    data: &TrainingData,
    cfg: &BilevelConfig,
    warm_g: Option<&DVector<f64>>,
) -> Result<BilevelEval> {
    cfg.validate()?;
    let (x, y) = (data.x.points(), data.y.points());
    let cost = model.cost(x, y)?;
    let inner = unrolled_sinkhorn(&cost, &cfg.unroll(), warm_g)?;
    let (src, dst) = (data.x.labels(), data.y.labels());
    let loss = fairness_loss_unchecked(inner.plan(), &data.target, src, dst);
    let diff = &cost - &data.base_cost;
    let discrepancy = diff.norm_squared();
    let weight = penalty_weight(cfg.lambda);

    let plan_bar = fairness_loss_grad_unchecked(inner.plan(), &data.target, src, dst);
    let mut c_bar = inner.backward(&plan_bar)?;
    if weight > 0.0 {
        c_bar += diff * (2.0 * weight);
    }
    let grad = model.cost_backward(x, y, &c_bar)?;
    Ok(BilevelEval {
        value: loss + weight * discrepancy,
        fairness_loss: loss,
        discrepancy,
        grad,
        inner_converged: inner.converged,
        inner_iterations: inner.iterations,
        warm_g: inner.potentials().1.clone(),
        plan: inner.plan().clone(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HistoryRow {
    pub step: usize,
    pub fairness_loss: f64,
    pub discrepancy: f64,
    pub objective: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum TrainStatus {
    Completed,
    /// Objective became non-finite or exceeded the divergence bound.
    Diverged {
        step: usize,
    },
}

#[derive(Debug, Clone)]
pub struct TrainOutput<M> {
    pub model: M,
    /// One row per outer step (state before its update) plus a final row for
    /// the trained model.
    pub history: Vec<HistoryRow>,
    pub status: TrainStatus,
    pub unconverged_inner_steps: usize,
}

impl<M> TrainOutput<M> {
    pub fn final_row(&self) -> &HistoryRow {
        self.history.last().expect("history is never empty")
    }
}

pub const DIVERGENCE_BOUND: f64 = 1e6;

/// Outer loop: warm-started inner solve, one Adam step, projection.
pub fn train_cost<M: CostModel>(
    model: M,
    data: &TrainingData,
    cfg: &BilevelConfig,
) -> Result<TrainOutput<M>> {
    cfg.validate()?;
    check_dim("model input dimension", model.input_dim(), data.x.dim())?;
    let mut model = model;
    let mut theta = model.params();
    let mut adam = Adam::new(cfg.adam, theta.len())?;
    let mut history = Vec::with_capacity(cfg.outer_steps + 1);
    let mut warm: Option<DVector<f64>> = None;
    let mut last: Option<(Vec<f64>, BilevelEval)> = None;
    let mut unconverged = 0;
    let mut status = TrainStatus::Completed;

    for step in 0..=cfg.outer_steps {
        // The inner solve is a function of θ alone once converged; reuse it
        // when θ did not move.
        let eval = match last.take() {
            Some((prev, eval)) if prev == theta => eval,
            _ => bilevel_objective(&model, data, cfg, warm.as_ref())?,
        };
        if !eval.inner_converged {
            unconverged += 1;
        }
        history.push(HistoryRow {
            step,
            fairness_loss: eval.fairness_loss,
            discrepancy: eval.discrepancy,
            objective: eval.value,
        });
        if !eval.value.is_finite() || eval.value > DIVERGENCE_BOUND {
            log::warn!(
                "cost learning diverged at step {step} (objective {})",
                eval.value
            );
            status = TrainStatus::Diverged { step };
            break;
        }
        if step == cfg.outer_steps {
            break;
        }
        warm = Some(eval.warm_g.clone());
        let before = theta.clone();
        adam.step(&mut theta, &eval.grad)?;
        model.set_params(&theta)?;
        model.project()?;
        theta = model.params();
        last = Some((before, eval));
    }
    if unconverged > 0 {
        log::warn!(
            "{unconverged} inner solves stopped before reaching tol {:.1e}",
            cfg.inner.tol
        );
    }
    Ok(TrainOutput {
        model,
        history,
        status,
        unconverged_inner_steps: unconverged,
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PretrainConfig {
    pub steps: usize,
    pub learning_rate: f64,
    /// Stop once ‖C_θ − C_base‖_F / ‖C_base‖_F falls below this.
    pub relative_gap: f64,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            steps: 500,
            learning_rate: 1e-2,
            relative_gap: 1e-2,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PretrainReport {
    pub steps: usize,
    pub relative_gap: f64,
}

/// Fits `model` to the reference cost by minimizing ‖C_θ − C_base‖²_F alone.
pub fn pretrain<M: CostModel>(
    model: &mut M,
    data: &TrainingData,
    cfg: &PretrainConfig,
) -> Result<PretrainReport> {
    let (x, y) = (data.x.points(), data.y.points());
    let base_norm = data.base_cost.norm().max(f64::MIN_POSITIVE);
    let mut theta = model.params();
    let mut adam = Adam::new(
        AdamParams::with_learning_rate(cfg.learning_rate),
        theta.len(),
    )?;
    let mut gap = f64::INFINITY;
    for step in 0..=cfg.steps {
        let diff = model.cost(x, y)? - &data.base_cost;
        gap = diff.norm() / base_norm;
        if gap < cfg.relative_gap || step == cfg.steps {
            return Ok(PretrainReport {
                steps: step,
                relative_gap: gap,
            });
        }
        let grad = model.cost_backward(x, y, &(diff * 2.0))?;
        adam.step(&mut theta, &grad)?;
        model.set_params(&theta)?;
        model.project()?;
        theta = model.params();
    }
    Ok(PretrainReport {
        steps: cfg.steps,
        relative_gap: gap,
    })
}

/// Vanilla entropic OT on new samples under a learned cost; the report's
/// fairness loss is measured against `target`.
pub fn match_with_learned_cost<M: CostModel>(
    model: &M,
    x: &LabeledDataset,
    y: &LabeledDataset,
    target: &FairnessTarget,
    cfg: &SinkhornConfig,
) -> Result<(TransportPlan, SolverReport)> {
    check_dim("model input dimension vs x", model.input_dim(), x.dim())?;
    check_dim("model input dimension vs y", model.input_dim(), y.dim())?;
    let start = std::time::Instant::now();
    let cost = CostMatrix::new(model.cost(x.points(), y.points())?)?;
    let out = sinkhorn(&cost, cfg)?;
    let mut report = out.report;
    report.wall_time_seconds = start.elapsed().as_secs_f64();
    report.fairness_loss = Some(fairness_loss(&out.plan, target, x.labels(), y.labels())?);
    Ok((out.plan, report))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::GroupLabels;
    use crate::oracle::{finite_diff, relative_error};
    use crate::synthdata::GenSpec;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn tiny_data(rng: &mut ChaCha8Rng, n: usize, m: usize, d: usize) -> TrainingData {
        let x = LabeledDataset::new(
            DMatrix::from_fn(n, d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
            GroupLabels::new((0..n).map(|i| i % 2).collect(), 2).unwrap(),
        )
        .unwrap();
        let y = LabeledDataset::new(
            DMatrix::from_fn(m, d, |_, _| rng.random::<f64>() * 2.0 - 1.0),
            GroupLabels::new((0..m).map(|j| j % 2).collect(), 2).unwrap(),
        )
        .unwrap();
        let p = x.labels().marginal();
        let q = y.labels().marginal();
        let t = 0.05;
        let target = FairnessTarget::new(DMatrix::from_fn(2, 2, |s, w| {
            p[s] * q[w] + if s == w { t } else { -t }
        }))
        .unwrap();
        TrainingData::new(x, y, target).unwrap()
    }

    fn tight(lambda: f64) -> BilevelConfig {
        BilevelConfig {
            inner: SinkhornConfig::new(1.0)
                .with_tol(1e-13)
                .with_max_iter(20_000),
            ..BilevelConfig::new(lambda, 1.0, 0.1)
        }
    }

    #[test]
    fn base_model_with_fair_plan_has_zero_objective() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let mut data = tiny_data(&mut rng, 4, 4, 2);
        let cfg = tight(10.0);
        let plain = bilevel_objective(&MahalanobisModel::identity(2), &data, &cfg, None).unwrap();
        let coupling =
            crate::group_coupling(&plain.plan, data.x.labels(), data.y.labels()).unwrap();
        data.target = FairnessTarget::new(coupling).unwrap();
        let eval = bilevel_objective(&MahalanobisModel::identity(2), &data, &cfg, None).unwrap();
        assert!(eval.value < 1e-20 && eval.discrepancy < 1e-24);
        assert!(eval.grad.iter().all(|g| g.abs() < 1e-9));
    }

    #[test]
    fn infinite_lambda_drops_the_discrepancy() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let data = tiny_data(&mut rng, 4, 3, 2);
        let m =
            MahalanobisModel::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.3, 0.3, 0.5])).unwrap();
        let eval = bilevel_objective(&m, &data, &tight(f64::INFINITY), None).unwrap();
        assert!(eval.discrepancy > 0.0);
        assert_eq!(eval.value, eval.fairness_loss);
    }

    fn check_bilevel_gradient<M: CostModel>(
        model: &M,
        data: &TrainingData,
        cfg: &BilevelConfig,
        tol: f64,
    ) {
        let eval = bilevel_objective(model, data, cfg, None).unwrap();
        let f = |p: &[f64]| {
            let mut m = model.clone();
            m.set_params(p).unwrap();
            bilevel_objective(&m, data, cfg, None).unwrap().value
        };
        let numeric = finite_diff(f, &model.params(), 1e-5).unwrap();
        let err = relative_error(&eval.grad, &numeric, 1e-10);
        assert!(
            err < tol,
            "relative error {err}: {:?} vs {numeric:?}",
            eval.grad
        );
    }

    #[test]
    fn mahalanobis_bilevel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for k in 0..5 {
            let data = tiny_data(&mut rng, 3, 3, 2);
            let a = DMatrix::from_fn(2, 2, |_, _| rng.random::<f64>());
            let m = MahalanobisModel::new(&a * a.transpose() + DMatrix::identity(2, 2)).unwrap();
            let mut cfg = tight(5.0);
            if k % 2 == 1 {
                cfg.inner = cfg.inner.with_log_domain(true);
            }
            check_bilevel_gradient(&m, &data, &cfg, 1e-3);
        }
    }

    #[test]
    fn mlp_bilevel_gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let data = tiny_data(&mut rng, 4, 3, 2);
        let model = MlpModel::random(2, 4, &mut rng);
        check_bilevel_gradient(&model, &data, &tight(20.0), 1e-3);
    }

    #[test]
    fn zero_learning_rate_keeps_everything_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let data = tiny_data(&mut rng, 6, 4, 2);
        let cfg = BilevelConfig {
            outer_steps: 5,
            ..BilevelConfig::new(10.0, 1.0, 0.0)
        };
        let init = MahalanobisModel::identity(2);
        let out = train_cost(init.clone(), &data, &cfg).unwrap();
        assert_eq!(out.model, init);
        assert_eq!(out.history.len(), 6);
        assert!(out
            .history
            .windows(2)
            .all(|w| w[0].objective == w[1].objective));
    }

    #[test]
    fn heavy_discrepancy_weight_pins_the_model() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let data = tiny_data(&mut rng, 6, 4, 2);
        let lr = 1e-3;
        let run = |lambda: f64| {
            let cfg = BilevelConfig {
                outer_steps: 50,
                ..BilevelConfig::new(lambda, 1.0, lr)
            };
            let out = train_cost(MahalanobisModel::identity(2), &data, &cfg).unwrap();
            (out.model.matrix() - DMatrix::<f64>::identity(2, 2)).norm()
        };
        // Adam steps have length about lr; a dominant discrepancy keeps
        // oscillating around the identity instead of drifting away.
        let pinned = run(1e-9);
        let free = run(f64::INFINITY);
        assert!(pinned < 4.0 * lr, "{pinned}");
        assert!(free > 10.0 * pinned, "{free} vs {pinned}");
    }

    #[test]
    fn training_reduces_fairness_loss_on_circles() {
        let (x, y) = GenSpec::circles(60, 20, 0).generate().unwrap();
        let target = FairnessTarget::from_rows(&[&[0.20, 0.30], &[0.28, 0.22]])
            .unwrap()
            .repaired(&x.labels().marginal(), &y.labels().marginal())
            .unwrap();
        let data = TrainingData::new(x, y, target).unwrap();
        let cfg = BilevelConfig {
            outer_steps: 300,
            ..BilevelConfig::new(f64::INFINITY, 1.0, 0.1)
        };
        let out = train_cost(MahalanobisModel::identity(2), &data, &cfg).unwrap();
        assert_eq!(out.status, TrainStatus::Completed);
        let first = out.history[0].fairness_loss;
        let last = out.final_row().fairness_loss;
        assert!(last < 0.1 * first, "{first} -> {last}");
        let eig = nalgebra::SymmetricEigen::new(out.model.matrix().clone())
            .eigenvalues
            .min();
        assert!(eig >= -1e-10);
    }

    #[test]
    fn pretraining_fits_the_base_cost() {
        let (x, y) = GenSpec::gaussians(40, 10, 1).generate().unwrap();
        let target = FairnessTarget::from_rows(&[&[0.25, 0.25], &[0.25, 0.25]]).unwrap();
        let data = TrainingData::new(x, y, target).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let mut model = MlpModel::random(2, 32, &mut rng);
        let report = pretrain(
            &mut model,
            &data,
            &PretrainConfig {
                steps: 2000,
                ..PretrainConfig::default()
            },
        )
        .unwrap();
        assert!(report.relative_gap < 5e-2, "{report:?}");
    }

    #[test]
    fn matching_with_identity_equals_vanilla() {
        let (x, y) = GenSpec::gaussians(30, 10, 2).generate().unwrap();
        let target = FairnessTarget::from_rows(&[&[0.2, 0.3], &[0.3, 0.2]]).unwrap();
        let cfg = SinkhornConfig::new(1.0);
        let (plan, report) =
            match_with_learned_cost(&MahalanobisModel::identity(2), &x, &y, &target, &cfg).unwrap();
        let cost = CostMatrix::squared_euclidean(x.points(), y.points()).unwrap();
        let vanilla = sinkhorn(&cost, &cfg).unwrap();
        assert!((plan.values() - vanilla.plan.values()).amax() < 1e-15);
        assert!(report.fairness_loss.unwrap() > 0.0);
        assert!(
            match_with_learned_cost(&MahalanobisModel::identity(3), &x, &y, &target, &cfg).is_err()
        );
    }

    #[test]
    fn learned_cost_json_is_tagged() {
        let m = LearnedCost::Mahalanobis(MahalanobisModel::identity(2));
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(
            s,
            r#"{"kind":"mahalanobis","matrix":[[1.0,0.0],[0.0,1.0]]}"#
        );
        assert_eq!(serde_json::from_str::<LearnedCost>(&s).unwrap(), m);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mlp = LearnedCost::Mlp(MlpModel::random(2, 3, &mut rng));
        let back: LearnedCost =
            serde_json::from_str(&serde_json::to_string(&mlp).unwrap()).unwrap();
        assert_eq!(back, mlp);
    }
}

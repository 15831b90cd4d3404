//! Fairness-penalized entropic OT
//!
//! ```text
//! min_Π  Tr(ΠᵀC) + ε Σ Π log Π + λ L_F(Π)
//! ```
//!
//! solved by generalized conditional gradient: linearize λ L_F at the current
//! iterate, solve the entropic OT problem with the modified cost
//! C + λ ∇L_F(Πᵗ) for a direction, then take an Armijo step towards it.

use std::time::Instant;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{entropy_term, marginal_residual, CostMatrix, GroupLabels, TransportPlan};
use crate::error::{check_dim, Error, Result};
use crate::fairness::{fairness_loss_grad_unchecked, fairness_loss_unchecked, FairnessTarget};
use crate::sinkhorn::{sinkhorn, solve_matrix, SinkhornConfig, SolverReport};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ArmijoParams {
    pub c1: f64,
    pub beta: f64,
    pub max_trials: u32,
}

impl Default for ArmijoParams {
    fn default() -> Self {
        Self {
            c1: 1e-4,
            beta: 0.5,
            max_trials: 30,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcgConfig {
    pub lambda: f64,
    pub num_iter_max: usize,
    pub num_inner_iter_max: usize,
    pub stop_thr: f64,
    pub stop_thr2: f64,
    /// Used for the initial solve; the direction solves reuse it with
    /// `max_iter = num_inner_iter_max`.
    pub sinkhorn: SinkhornConfig,
    /// Warm-start each direction solve from the previous one's potentials.
    pub warm_start_inner: bool,
    pub armijo: ArmijoParams,
}

impl Default for GcgConfig {
    fn default() -> Self {
        Self::new(1.0, 1.0)
    }
}

impl GcgConfig {
    pub fn new(lambda: f64, epsilon: f64) -> Self {
        Self {
            lambda,
            num_iter_max: 2000,
            num_inner_iter_max: 200,
            stop_thr: 1e-9,
            stop_thr2: 1e-9,
            sinkhorn: SinkhornConfig::new(epsilon).with_tol(1e-9),
            warm_start_inner: true,
            armijo: ArmijoParams::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.lambda >= 0.0 && self.lambda.is_finite()) {
            return Err(Error::invalid(format!(
                "lambda must be >= 0, got {}",
                self.lambda
            )));
        }
        if !(self.stop_thr > 0.0 && self.stop_thr2 > 0.0) {
            return Err(Error::invalid("GCG stopping thresholds must be > 0"));
        }
        if self.num_iter_max == 0 || self.num_inner_iter_max == 0 {
            return Err(Error::invalid("GCG iteration limits must be >= 1"));
        }
        let a = &self.armijo;
        if !(a.c1 > 0.0 && a.c1 < 1.0 && a.beta > 0.0 && a.beta < 1.0) {
            return Err(Error::invalid(
                "Armijo parameters need 0 < c1 < 1 and 0 < beta < 1",
            ));
        }
        self.sinkhorn.validate()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iter: usize,
    pub objective: f64,
    pub transport_cost: f64,
    pub fairness_loss: f64,
    pub alpha: f64,
}

#[derive(Debug, Clone)]
pub struct GcgOutput {
    pub plan: TransportPlan,
    pub report: SolverReport,
    pub trace: Vec<TraceRow>,
}

/// Tr(ΠᵀC) + ε Σ Π log Π + λ L_F(Π)
#[allow(clippy::too_many_arguments)]
pub fn penalized_objective(
    plan: &DMatrix<f64>,
    cost: &DMatrix<f64>,
    epsilon: f64,
    lambda: f64,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> Result<f64> {
    check_dim("cost rows", plan.nrows(), cost.nrows())?;
    check_dim("cost columns", plan.ncols(), cost.ncols())?;
    crate::fairness::fairness_loss(plan, target, src, dst)?;
    let terms = Objective {
        cost,
        epsilon,
        lambda,
        target,
        src,
        dst,
    };
    Ok(terms.value(plan))
}

struct Objective<'a> {
    cost: &'a DMatrix<f64>,
    epsilon: f64,
    lambda: f64,
    target: &'a FairnessTarget,
    src: &'a GroupLabels,
    dst: &'a GroupLabels,
}

impl Objective<'_> {
    fn transport(&self, plan: &DMatrix<f64>) -> f64 {
        plan.dot(self.cost)
    }

    fn loss(&self, plan: &DMatrix<f64>) -> f64 {
        fairness_loss_unchecked(plan, self.target, self.src, self.dst)
    }

    fn value(&self, plan: &DMatrix<f64>) -> f64 {
        self.transport(plan) + self.epsilon * entropy_term(plan) + self.lambda * self.loss(plan)
    }

    /// λ ∇L_F(Π), blockwise constant.
    fn penalty_grad(&self, plan: &DMatrix<f64>) -> DMatrix<f64> {
        let mut g = fairness_loss_grad_unchecked(plan, self.target, self.src, self.dst);
        g *= self.lambda;
        g
    }

    /// ⟨∇obj(Π), Δ⟩ with ∇obj = C + ε(1 + log Π) + λ∇L_F.
    ///
    /// Zero entries of Π contribute nothing when Δ is zero there and −∞
    /// (the one-sided limit) when Δ is positive.
    fn slope(&self, plan: &DMatrix<f64>, penalty_grad: &DMatrix<f64>, delta: &DMatrix<f64>) -> f64 {
        let mut slope = 0.0;
        for ((&p, &d), (&c, &g)) in plan
            .iter()
            .zip(delta.iter())
            .zip(self.cost.iter().zip(penalty_grad.iter()))
        {
            if d == 0.0 {
                continue;
            }
            if p > 0.0 {
                slope += (c + self.epsilon * (1.0 + p.ln()) + g) * d;
            } else {
                return f64::NEG_INFINITY;
            }
        }
        slope
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ArmijoStep {
    pub alpha: f64,
    /// Objective at the returned step.
    pub value: f64,
    /// False when no trial met the sufficient-decrease condition.
    pub accepted: bool,
}

/// Backtracking line search over α ∈ {1, β, β², …, β^kmax}.
///
/// Returns the largest α with `phi(α) <= phi0 + c1·α·slope`, where `phi(α)` is
/// the objective along the segment and `slope` its derivative at 0. A slope of
/// −∞ accepts the first α that strictly decreases the objective. If no trial
/// qualifies, returns α = β^kmax flagged as not accepted.
pub fn armijo_step(
    phi0: f64,
    slope: f64,
    mut phi: impl FnMut(f64) -> f64,
    params: &ArmijoParams,
) -> ArmijoStep {
    let mut alpha = 1.0;
    let mut value = f64::NAN;
    for trial in 0..=params.max_trials {
        value = phi(alpha);
        let ok = if slope == f64::NEG_INFINITY {
            value < phi0
        } else {
            value <= phi0 + params.c1 * alpha * slope
        };
        if ok && value.is_finite() {
            return ArmijoStep {
                alpha,
                value,
                accepted: true,
            };
        }
        if trial < params.max_trials {
            alpha *= params.beta;
        }
    }
    log::warn!("Armijo search found no sufficient decrease; using alpha = {alpha:.3e}");
    ArmijoStep {
        alpha,
        value,
        accepted: false,
    }
}

/// Armijo step from `plan` towards `direction` for an objective with gradient
/// `gradient` at `plan`.
pub fn armijo_plan_step(
    plan: &DMatrix<f64>,
    direction: &DMatrix<f64>,
    gradient: &DMatrix<f64>,
    objective: impl Fn(&DMatrix<f64>) -> f64,
    params: &ArmijoParams,
) -> Result<ArmijoStep> {
    check_dim("direction rows", plan.nrows(), direction.nrows())?;
    check_dim("direction columns", plan.ncols(), direction.ncols())?;
    let delta = direction - plan;
    let slope = gradient.dot(&delta);
    let phi0 = objective(plan);
    Ok(armijo_step(
        phi0,
        slope,
        |alpha| objective(&(plan + &delta * alpha)),
        params,
    ))
}

/// Generalized conditional gradient for the penalized problem.
///
/// Starts from the unconstrained entropic plan. Stops when the objective
/// decrease falls below `stop_thr` (relative) or `stop_thr2` (absolute), when
/// the direction is no longer a descent direction, or after `num_iter_max`
/// outer iterations.
pub fn penalized_gcg(
    cost: &CostMatrix,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
    cfg: &GcgConfig,
) -> Result<GcgOutput> {
    cfg.validate()?;
    check_dim("source labels vs cost rows", cost.nrows(), src.len())?;
    check_dim(
        "destination labels vs cost columns",
        cost.ncols(),
        dst.len(),
    )?;
    check_dim(
        "target rows vs source groups",
        src.groups(),
        target.shape().0,
    )?;
    check_dim(
        "target columns vs destination groups",
        dst.groups(),
        target.shape().1,
    )?;

    let start = Instant::now();
    let objective = Objective {
        cost: cost.values(),
        epsilon: cfg.sinkhorn.epsilon,
        lambda: cfg.lambda,
        target,
        src,
        dst,
    };

    let init = sinkhorn(cost, &cfg.sinkhorn)
        .map_err(|e| Error::Solver(format!("initial Sinkhorn solve failed: {e}")))?;
    let mut duals = init.potentials;
    let mut plan = init.plan.into_inner();
    let mut value = objective.value(&plan);
    let mut trace = vec![TraceRow {
        iter: 0,
        objective: value,
        transport_cost: objective.transport(&plan),
        fairness_loss: objective.loss(&plan),
        alpha: 0.0,
    }];

    let mut inner_cfg = cfg.sinkhorn.clone().with_max_iter(cfg.num_inner_iter_max);
    let mut converged = false;
    let mut iterations = 0;
    let mut inner_log_domain = init.report.log_domain;
    for t in 1..=cfg.num_iter_max {
        iterations = t;
        let penalty_grad = objective.penalty_grad(&plan);
        let mut modified = cost.values() + &penalty_grad;
        // Constant shifts leave the entropic plan unchanged and keep exp(−C/ε) ≤ 1.
        let shift = modified.min();
        modified.add_scalar_mut(-shift);

        if cfg.warm_start_inner {
            inner_cfg.warm_start = Some(duals.clone());
        }
        let dir = solve_matrix(&modified, &inner_cfg).map_err(|e| {
            Error::Solver(format!("inner Sinkhorn failed at outer iteration {t}: {e}"))
        })?;
        inner_log_domain |= dir.report.log_domain;
        duals = dir.potentials;
        let direction = dir.plan.into_inner();

        let delta = &direction - &plan;
        let slope = objective.slope(&plan, &penalty_grad, &delta);
        if slope >= 0.0 {
            // No descent left, unless the direction itself is inaccurate.
            converged = dir.report.converged;
            if !converged {
                log::warn!(
                    "GCG stopped on an unconverged direction at outer iteration {t} (residual {:.3e})",
                    dir.report.final_residual
                );
            }
            break;
        }
        let step = armijo_step(
            value,
            slope,
            |alpha| objective.value(&(&plan + &delta * alpha)),
            &cfg.armijo,
        );
        if !step.accepted && !(step.value < value) {
            log::warn!("GCG stalled at outer iteration {t}");
            break;
        }
        plan += &delta * step.alpha;
        let previous = value;
        value = step.value;
        trace.push(TraceRow {
            iter: t,
            objective: value,
            transport_cost: objective.transport(&plan),
            fairness_loss: objective.loss(&plan),
            alpha: step.alpha,
        });

        let decrease = (previous - value).abs();
        if decrease < cfg.stop_thr2 || decrease / value.abs() < cfg.stop_thr {
            converged = true;
            break;
        }
    }

    let report = SolverReport {
        converged,
        iterations,
        final_residual: marginal_residual(&plan),
        objective: value,
        transport_cost: objective.transport(&plan),
        fairness_loss: Some(objective.loss(&plan)),
        wall_time_seconds: start.elapsed().as_secs_f64(),
        log_domain: inner_log_domain,
    };
    Ok(GcgOutput {
        plan: TransportPlan::from_solver(plan)?,
        report,
        trace,
    })
}

//! Entropic OT by matrix scaling.
//!
//! [`sinkhorn`] solves min Tr(ΠᵀC) + ε Σ Π log Π over the uniform-marginal
//! polytope. [`fair_sinkhorn`] adds one blockwise scaling per iteration so the
//! plan's group coupling equals a target F exactly. Both share one engine:
//! the plan is kept in factored form
//!
//! ```text
//! Π = diag(u) (K ⊙ T) diag(v),   K = exp(−C/ε − 1),   T_ij = ℓ[s_i, w_j]
//! ```
//!
//! and the scalings relate to the dual potentials by u = e^{f/ε}, v = e^{g/ε},
//! ℓ = e^{h/ε}. The log-domain variant iterates on (f, g, h) directly.

use std::time::Instant;

use nalgebra::{DMatrix, DVector};
use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{entropy_term, CostMatrix, GroupLabels, TransportPlan};
use crate::error::{check_dim, Error, Result};
use crate::fairness::{fairness_loss_unchecked, validate_target, FairnessTarget};

/// Target entries below this are exact zeros.
pub const ZERO_TARGET: f64 = 1e-15;

/// Lower clamp for log ℓ (double-precision underflow boundary of exp).
/// Cost spread over epsilon above which log-domain solves anneal epsilon.
const ANNEALING_SPREAD: f64 = 500.0;
const ANNEALING_STAGE_ITERS: usize = 50;

pub const LOG_SCALING_FLOOR: f64 = -745.0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SinkhornConfig {
    pub epsilon: f64,
    pub max_iter: usize,
    pub tol: f64,
    pub log_domain: bool,
    #[serde(skip)]
    pub warm_start: Option<DualPotentials>,
}

impl Default for SinkhornConfig {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl SinkhornConfig {
    /// Defaults: 1000 iterations, tolerance 1e-6, log domain iff ε < 1.
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            max_iter: 1000,
            tol: 1e-6,
            log_domain: epsilon < 1.0,
            warm_start: None,
        }
    }

    pub fn with_tol(mut self, tol: f64) -> Self {
        self.tol = tol;
        self
    }

    pub fn with_max_iter(mut self, max_iter: usize) -> Self {
        self.max_iter = max_iter;
        self
    }

    pub fn with_log_domain(mut self, log_domain: bool) -> Self {
        self.log_domain = log_domain;
        self
    }

    pub fn with_warm_start(mut self, potentials: Option<DualPotentials>) -> Self {
        self.warm_start = potentials;
        self
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite()) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        if !(self.tol > 0.0) {
            return Err(Error::invalid(format!("tol must be > 0, got {}", self.tol)));
        }
        if self.max_iter == 0 {
            return Err(Error::invalid("max_iter must be >= 1"));
        }
        Ok(())
    }
}

/// Dual potentials (f, g, h); h is the K_s×K_w matrix of fairness multipliers
/// and is 1×1 zero for unconstrained solves.
#[derive(Debug, Clone, PartialEq)]
pub struct DualPotentials {
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    pub h: DMatrix<f64>,
}

impl DualPotentials {
    pub fn zeros(n: usize, m: usize, k_s: usize, k_w: usize) -> Self {
        Self {
            f: DVector::zeros(n),
            g: DVector::zeros(m),
            h: DMatrix::zeros(k_s, k_w),
        }
    }

    /// Π_ij = exp((f_i + g_j + h[s_i, w_j] − C_ij)/ε − 1).
    pub fn plan(
        &self,
        cost: &DMatrix<f64>,
        epsilon: f64,
        src: &GroupLabels,
        dst: &GroupLabels,
    ) -> DMatrix<f64> {
        let h = |i: usize, j: usize| {
            if self.h.len() == 1 {
                self.h[(0, 0)]
            } else {
                self.h[(src.get(i), dst.get(j))]
            }
        };
        DMatrix::from_fn(cost.nrows(), cost.ncols(), |i, j| {
            ((self.f[i] + self.g[j] + h(i, j) - cost[(i, j)]) / epsilon - 1.0).exp()
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SolverReport {
    pub converged: bool,
    pub iterations: usize,
    pub final_residual: f64,
    pub objective: f64,
    pub transport_cost: f64,
    /// `None` when no fairness target was involved.
    pub fairness_loss: Option<f64>,
    pub wall_time_seconds: f64,
    pub log_domain: bool,
}

#[derive(Debug, Clone)]
pub struct SinkhornOutput {
    pub plan: TransportPlan,
    pub potentials: DualPotentials,
    pub report: SolverReport,
}

/// Unconstrained entropic OT with uniform marginals.
pub fn sinkhorn(cost: &CostMatrix, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    solve_matrix(cost.values(), cfg)
}

/// Same as [`sinkhorn`] for any finite cost matrix, including negative entries
/// (the linearized costs of the penalized solver).
pub(crate) fn solve_matrix(cost: &DMatrix<f64>, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
    let (n, m) = cost.shape();
    let src = GroupLabels::single(n)?;
    let dst = GroupLabels::single(m)?;
    let problem = Problem {
        cost,
        src: &src,
        dst: &dst,
        target: None,
    };
    problem.solve(cfg)
}

/// FairSinkhorn: entropic OT whose group coupling equals `target` exactly.
///
/// `target` must couple the empirical group marginals of `src` and `dst`
/// (see [`crate::fairness::resolve_target`] for repairing near-misses).
pub fn fair_sinkhorn(
    cost: &CostMatrix,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
    cfg: &SinkhornConfig,
) -> Result<SinkhornOutput> {
    check_dim("source labels vs cost rows", cost.nrows(), src.len())?;
    check_dim(
        "destination labels vs cost columns",
        cost.ncols(),
        dst.len(),
    )?;
    validate_target(target, &src.marginal(), &dst.marginal())
        .map_err(|v| Error::Infeasible(format!("invalid fairness target: {v}")))?;
    let ns = src.counts();
    let mw = dst.counts();
    for s in 0..src.groups() {
        for w in 0..dst.groups() {
            if target.get(s, w) > ZERO_TARGET && (ns[s] == 0 || mw[w] == 0) {
                return Err(Error::Infeasible(format!(
                    "target cell ({s}, {w}) is positive but its block is empty"
                )));
            }
        }
    }
    let problem = Problem {
        cost: cost.values(),
        src,
        dst,
        target: Some(target),
    };
    problem.solve(cfg)
}

struct Problem<'a> {
    cost: &'a DMatrix<f64>,
    src: &'a GroupLabels,
    dst: &'a GroupLabels,
    target: Option<&'a FairnessTarget>,
}

/// Result of the iterations, before assembling the public output.
struct Iterate {
    plan: DMatrix<f64>,
    potentials: DualPotentials,
    iterations: usize,
    residual: f64,
}

/// The multiplicative iterations over- or underflowed.
struct Overflow;

impl Problem<'_> {
    fn groups(&self) -> (usize, usize) {
        (self.src.groups(), self.dst.groups())
    }

    fn target_cell(&self, s: usize, w: usize) -> f64 {
        match self.target {
            Some(t) if t.get(s, w) > ZERO_TARGET => t.get(s, w),
            Some(_) => 0.0,
            None => 1.0,
        }
    }

    fn solve(&self, cfg: &SinkhornConfig) -> Result<SinkhornOutput> {
        cfg.validate()?;
        if self.cost.iter().any(|c| !c.is_finite()) {
            return Err(Error::invalid("cost matrix has non-finite entries"));
        }
        let (n, m) = self.cost.shape();
        let (k_s, k_w) = self.groups();
        let warm = match &cfg.warm_start {
            Some(w) => {
                check_dim("warm-start f", n, w.f.len())?;
                check_dim("warm-start g", m, w.g.len())?;
                let mut w = w.clone();
                if self.target.is_none() || w.h.shape() != (k_s, k_w) {
                    if self.target.is_some() {
                        return Err(Error::invalid("warm-start h has the wrong shape"));
                    }
                    w.h = DMatrix::zeros(k_s, k_w);
                }
                w
            }
            None => DualPotentials::zeros(n, m, k_s, k_w),
        };

        let start = Instant::now();
        // Kernel entries underflow well before exp() overflows, so very spread
        // costs go straight to the log domain.
        let spread = self.cost.max() - self.cost.min();
        let mut log_domain = cfg.log_domain || spread / cfg.epsilon > ANNEALING_SPREAD;
        let it = if log_domain {
            self.annealed_log_iterations(cfg, warm)
        } else {
            match self.scaling_iterations(cfg, &warm) {
                Ok(it) => it,
                Err(Overflow) => {
                    log::warn!(
                        "multiplicative Sinkhorn overflowed at epsilon={}; retrying in the log domain",
                        cfg.epsilon
                    );
                    log_domain = true;
                    self.annealed_log_iterations(cfg, warm)
                }
            }
        };
        let wall = start.elapsed().as_secs_f64();
        if !it.residual.is_finite() {
            return Err(Error::Numeric("Sinkhorn produced a non-finite plan".into()));
        }

        let transport = it.plan.dot(self.cost);
        let fairness = self
            .target
            .map(|t| fairness_loss_unchecked(&it.plan, t, self.src, self.dst));
        let report = SolverReport {
            converged: it.residual <= cfg.tol,
            iterations: it.iterations,
            final_residual: it.residual,
            objective: transport + cfg.epsilon * entropy_term(&it.plan),
            transport_cost: transport,
            fairness_loss: fairness,
            wall_time_seconds: wall,
            log_domain,
        };
        if !report.converged {
            log::debug!(
                "Sinkhorn stopped after {} iterations at residual {:.3e} (tol {:.1e})",
                it.iterations,
                it.residual,
                cfg.tol
            );
        }
        Ok(SinkhornOutput {
            plan: TransportPlan::from_solver(it.plan)?,
            potentials: it.potentials,
            report,
        })
    }

    /// (K ⊙ T) v
    fn apply(&self, k: &DMatrix<f64>, l: &DMatrix<f64>, v: &DVector<f64>) -> DVector<f64> {
        let (n, m) = k.shape();
        let k_s = self.src.groups();
        let mut out = DVector::zeros(n);
        let mut sv = vec![0.0; k_s];
        for j in 0..m {
            let w = self.dst.get(j);
            for (s, x) in sv.iter_mut().enumerate() {
                *x = l[(s, w)] * v[j];
            }
            let col = k.column(j);
            for i in 0..n {
                out[i] += col[i] * sv[self.src.get(i)];
            }
        }
        out
    }

    /// acc[(s, j)] = Σ_{i in group s} K_ij u_i
    fn grouped_transpose(&self, k: &DMatrix<f64>, u: &DVector<f64>) -> DMatrix<f64> {
        let (n, m) = k.shape();
        let mut acc = DMatrix::zeros(self.src.groups(), m);
        for j in 0..m {
            let col = k.column(j);
            for i in 0..n {
                acc[(self.src.get(i), j)] += col[i] * u[i];
            }
        }
        acc
    }

    fn scaling_iterations(
        &self,
        cfg: &SinkhornConfig,
        warm: &DualPotentials,
    ) -> std::result::Result<Iterate, Overflow> {
        let (n, m) = self.cost.shape();
        let (k_s, k_w) = self.groups();
        let eps = cfg.epsilon;
        let a = 1.0 / n as f64;
        let b = 1.0 / m as f64;
        let fair = self.target.is_some();

        let k = self.cost.map(|c| (-c / eps - 1.0).exp());
        let mut u = warm.f.map(|f| (f / eps).exp());
        let mut v = warm.g.map(|g| (g / eps).exp());
        let mut l = if fair {
            warm.h.map(|h| (h / eps).exp())
        } else {
            DMatrix::from_element(k_s, k_w, 1.0)
        };

        let mut kv = self.apply(&k, &l, &v);
        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        for it in 1..=cfg.max_iter {
            iterations = it;
            for i in 0..n {
                u[i] = a / kv[i];
            }
            let acc = self.grouped_transpose(&k, &u);
            for j in 0..m {
                let w = self.dst.get(j);
                let ktu: f64 = (0..k_s).map(|s| l[(s, w)] * acc[(s, j)]).sum();
                v[j] = b / ktu;
            }

            let mut fair_res: f64 = 0.0;
            let mut col_res: f64 = 0.0;
            if fair {
                let mut phi = DMatrix::<f64>::zeros(k_s, k_w);
                for j in 0..m {
                    let w = self.dst.get(j);
                    for s in 0..k_s {
                        phi[(s, w)] += acc[(s, j)] * v[j];
                    }
                }
                for w in 0..k_w {
                    for s in 0..k_s {
                        let f = self.target_cell(s, w);
                        l[(s, w)] = if f == 0.0 { 0.0 } else { f / phi[(s, w)] };
                        fair_res = fair_res.max((l[(s, w)] * phi[(s, w)] - f).abs());
                    }
                }
                for j in 0..m {
                    let w = self.dst.get(j);
                    let col: f64 = (0..k_s).map(|s| l[(s, w)] * acc[(s, j)]).sum::<f64>() * v[j];
                    col_res = col_res.max((col - b).abs());
                }
            }

            kv = self.apply(&k, &l, &v);
            let row_res = (0..n).map(|i| (u[i] * kv[i] - a).abs()).fold(0.0, f64::max);
            residual = row_res.max(col_res).max(fair_res);
            if !residual.is_finite() {
                return Err(Overflow);
            }
            if residual <= cfg.tol {
                break;
            }
        }

        let plan = DMatrix::from_fn(n, m, |i, j| {
            u[i] * k[(i, j)] * l[(self.src.get(i), self.dst.get(j))] * v[j]
        });
        if plan.iter().any(|p| !p.is_finite())
            || u.iter()
                .chain(v.iter())
                .any(|x| !x.is_finite() || *x == 0.0)
        {
            return Err(Overflow);
        }
        let h = if fair {
            l.map(|x| {
                if x > 0.0 {
                    eps * x.ln().max(LOG_SCALING_FLOOR)
                } else {
                    eps * LOG_SCALING_FLOOR
                }
            })
        } else {
            DMatrix::zeros(k_s, k_w)
        };
        Ok(Iterate {
            plan,
            potentials: DualPotentials {
                f: u.map(|x| eps * x.ln()),
                g: v.map(|x| eps * x.ln()),
                h,
            },
            iterations,
            residual,
        })
    }

    /// Log-domain iterations, preceded by a coarse-to-fine pass over larger
    /// epsilons when the cost spread dwarfs epsilon. Plain iterations move the
    /// potentials by roughly epsilon per sweep and stall on such costs.
    /// Only the final stage counts towards `iterations` and `max_iter`.
    fn annealed_log_iterations(&self, cfg: &SinkhornConfig, mut warm: DualPotentials) -> Iterate {
        let spread = self.cost.max() - self.cost.min();
        if spread / cfg.epsilon > ANNEALING_SPREAD {
            let mut stage_cfg = cfg.clone().with_max_iter(ANNEALING_STAGE_ITERS);
            stage_cfg.epsilon = spread;
            while stage_cfg.epsilon > cfg.epsilon {
                let it = self.log_iterations(&stage_cfg, warm);
                warm = it.potentials;
                stage_cfg.epsilon *= 0.5;
            }
        }
        self.log_iterations(cfg, warm)
    }

    fn log_iterations(&self, cfg: &SinkhornConfig, warm: DualPotentials) -> Iterate {
        let (n, m) = self.cost.shape();
        let (k_s, k_w) = self.groups();
        let eps = cfg.epsilon;
        let log_a = -(n as f64).ln();
        let log_b = -(m as f64).ln();
        let fair = self.target.is_some();
        let c = self.cost;
        let src = self.src;
        let dst = self.dst;

        let DualPotentials {
            mut f,
            mut g,
            mut h,
        } = warm;
        if !fair {
            h.fill(0.0);
        }
        let exponent =
            |f: &DVector<f64>, g: &DVector<f64>, h: &DMatrix<f64>, i: usize, j: usize| {
                (f[i] + g[j] + h[(src.get(i), dst.get(j))] - c[(i, j)]) / eps - 1.0
            };

        let mut residual = f64::INFINITY;
        let mut iterations = 0;
        let mut row_max = DVector::<f64>::zeros(n);
        let mut row_sum = DVector::<f64>::zeros(n);
        for it in 1..=cfg.max_iter {
            iterations = it;

            // f-update: row log-sum-exp with f excluded.
            f.fill(0.0);
            row_max.fill(f64::NEG_INFINITY);
            for j in 0..m {
                for i in 0..n {
                    row_max[i] = row_max[i].max(exponent(&f, &g, &h, i, j));
                }
            }
            row_sum.fill(0.0);
            for j in 0..m {
                for i in 0..n {
                    row_sum[i] += (exponent(&f, &g, &h, i, j) - row_max[i]).exp();
                }
            }
            for i in 0..n {
                f[i] = eps * (log_a - row_max[i] - row_sum[i].ln());
            }

            // g-update: column log-sum-exp with g excluded.
            g.fill(0.0);
            for j in 0..m {
                let mx = (0..n)
                    .map(|i| exponent(&f, &g, &h, i, j))
                    .fold(f64::NEG_INFINITY, f64::max);
                let s: f64 = (0..n)
                    .map(|i| (exponent(&f, &g, &h, i, j) - mx).exp())
                    .sum();
                g[j] = eps * (log_b - mx - s.ln());
            }

            if fair {
                // h-update: block log-sum-exp with h excluded.
                let zero_h = DMatrix::zeros(k_s, k_w);
                let mut bmax = DMatrix::from_element(k_s, k_w, f64::NEG_INFINITY);
                for j in 0..m {
                    for i in 0..n {
                        let key = (src.get(i), dst.get(j));
                        bmax[key] = bmax[key].max(exponent(&f, &g, &zero_h, i, j));
                    }
                }
                let mut bsum = DMatrix::<f64>::zeros(k_s, k_w);
                for j in 0..m {
                    for i in 0..n {
                        let key = (src.get(i), dst.get(j));
                        bsum[key] += (exponent(&f, &g, &zero_h, i, j) - bmax[key]).exp();
                    }
                }
                for w in 0..k_w {
                    for s in 0..k_s {
                        let target = self.target_cell(s, w);
                        let log_l = if target == 0.0 || bsum[(s, w)] == 0.0 {
                            LOG_SCALING_FLOOR
                        } else {
                            (target.ln() - bmax[(s, w)] - bsum[(s, w)].ln()).max(LOG_SCALING_FLOOR)
                        };
                        h[(s, w)] = eps * log_l;
                    }
                }
            }

            // Residuals from the assembled plan.
            let mut rows = DVector::<f64>::zeros(n);
            let mut cols = DVector::<f64>::zeros(m);
            let mut blocks = DMatrix::<f64>::zeros(k_s, k_w);
            for j in 0..m {
                for i in 0..n {
                    let p = exponent(&f, &g, &h, i, j).exp();
                    rows[i] += p;
                    cols[j] += p;
                    blocks[(src.get(i), dst.get(j))] += p;
                }
            }
            let a = log_a.exp();
            let b = log_b.exp();
            residual = rows.iter().map(|r| (r - a).abs()).fold(0.0, f64::max);
            residual = residual.max(cols.iter().map(|c| (c - b).abs()).fold(0.0, f64::max));
            if fair {
                for w in 0..k_w {
                    for s in 0..k_s {
                        residual = residual.max((blocks[(s, w)] - self.target_cell(s, w)).abs());
                    }
                }
            }
            if !residual.is_finite() || residual <= cfg.tol {
                break;
            }
        }

        let plan = DMatrix::from_fn(n, m, |i, j| exponent(&f, &g, &h, i, j).exp());
        Iterate {
            plan,
            potentials: DualPotentials { f, g, h },
            iterations,
            residual,
        }
    }
}

/// Rounds a plan to one column per row: row i draws column j with probability
/// Π_ij / Σ_j Π_ij, rows in order, from a generator seeded with `seed`.
pub fn sample_matching(plan: &DMatrix<f64>, seed: u64) -> Result<Vec<(usize, usize)>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    plan.row_iter()
        .enumerate()
        .map(|(i, row)| {
            let dist = WeightedIndex::new(row.iter().copied())
                .map_err(|e| Error::invalid(format!("row {i} cannot be sampled: {e}")))?;
            Ok((i, dist.sample(&mut rng)))
        })
        .collect()
}

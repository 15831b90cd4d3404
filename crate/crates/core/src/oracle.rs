//! Slow reference solvers for verification.
//!
//! The entropic problem (optionally with group-coupling constraints) is solved
//! through its smooth concave dual
//!
//! ```text
//! D(f, g, h) = Σ a_i f_i + Σ b_j g_j + Σ F_sw h_sw − ε Σ_ij exp((f_i + g_j + h_{s_i w_j} − C_ij)/ε − 1)
//! ```
//!
//! by full-gradient ascent with backtracking. Nothing here shares iteration
//! code with [`crate::sinkhorn`]; exponentials go through `exp2` so that a
//! bug in one exp path cannot hide in both solvers.

use nalgebra::{DMatrix, DVector};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::domain::{CostMatrix, GroupLabels, TransportPlan};
use crate::error::{check_dim, Error, Result};
use crate::fairness::FairnessTarget;
use crate::sinkhorn::{fair_sinkhorn, sinkhorn, SinkhornConfig};

pub const MAX_SIZE: usize = 32;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct OracleConfig {
    pub epsilon: f64,
    /// Stop once the dual gradient's ∞-norm is at most this.
    pub grad_tol: f64,
    pub max_iter: usize,
}

impl Default for OracleConfig {
    fn default() -> Self {
        Self::new(1.0)
    }
}

impl OracleConfig {
    pub fn new(epsilon: f64) -> Self {
        Self {
            epsilon,
            grad_tol: 1e-10,
            max_iter: 1_000_000,
        }
    }
}

#[derive(Debug, Clone)]
pub struct OracleSolution {
    pub plan: TransportPlan,
    pub f: DVector<f64>,
    pub g: DVector<f64>,
    /// One multiplier per group pair; all zeros for the unconstrained problem.
    pub h: DMatrix<f64>,
    pub iterations: usize,
    pub grad_norm: f64,
}

fn exp_independent(x: f64) -> f64 {
    (x * std::f64::consts::LOG2_E).exp2()
}

struct Dual<'a> {
    cost: &'a DMatrix<f64>,
    eps: f64,
    src: &'a [usize],
    dst: &'a [usize],
    /// None for the unconstrained dual.
    target: Option<DMatrix<f64>>,
}

/// Flat layout: f (n), g (m), h (k_s·k_w, column-major) when constrained.
impl Dual<'_> {
    fn n(&self) -> usize {
        self.cost.nrows()
    }

    fn m(&self) -> usize {
        self.cost.ncols()
    }

    fn dim(&self) -> usize {
        self.n() + self.m() + self.target.as_ref().map_or(0, |t| t.len())
    }

    fn h_index(&self, i: usize, j: usize) -> Option<usize> {
        self.target
            .as_ref()
            .map(|t| self.n() + self.m() + self.src[i] + t.nrows() * self.dst[j])
    }

    fn entry(&self, x: &[f64], i: usize, j: usize) -> f64 {
        let h = self.h_index(i, j).map_or(0.0, |k| x[k]);
        exp_independent((x[i] + x[self.n() + j] + h - self.cost[(i, j)]) / self.eps - 1.0)
    }

    /// Value and gradient.
    fn eval(&self, x: &[f64]) -> (f64, Vec<f64>) {
        let (n, m) = (self.n(), self.m());
        let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
        let mut grad = vec![0.0; self.dim()];
        let mut value = 0.0;
        for i in 0..n {
            value += a * x[i];
            grad[i] = a;
        }
        for j in 0..m {
            value += b * x[n + j];
            grad[n + j] = b;
        }
        if let Some(t) = &self.target {
            for (k, &fv) in t.iter().enumerate() {
                value += fv * x[n + m + k];
                grad[n + m + k] = fv;
            }
        }
        let mut mass = 0.0;
        for i in 0..n {
            for j in 0..m {
                let p = self.entry(x, i, j);
                mass += p;
                grad[i] -= p;
                grad[n + j] -= p;
                if let Some(k) = self.h_index(i, j) {
                    grad[k] -= p;
                }
            }
        }
        (value - self.eps * mass, grad)
    }

    fn ascend(&self, cfg: &OracleConfig) -> Result<(Vec<f64>, usize, f64)> {
        let mut x = vec![0.0; self.dim()];
        let (mut value, mut grad) = self.eval(&x);
        let mut step = self.eps;
        let inf_norm = |g: &[f64]| g.iter().fold(0.0f64, |acc, v| acc.max(v.abs()));
        let mut norm = inf_norm(&grad);
        for iter in 0..cfg.max_iter {
            if norm <= cfg.grad_tol {
                return Ok((x, iter, norm));
            }
            let sq: f64 = grad.iter().map(|v| v * v).sum();
            loop {
                let trial: Vec<f64> = x.iter().zip(&grad).map(|(xi, gi)| xi + step * gi).collect();
                let (tv, tg) = self.eval(&trial);
                let tn = inf_norm(&tg);
                // Near the optimum the value change drowns in roundoff. The
                // trapezoid estimate t·(φ'(0) + φ'(t))/2 of the same change
                // stays accurate there, so test that instead.
                let reliable = (tv - value).abs() > 1e-12 * value.abs().max(1.0);
                let sufficient = if reliable {
                    tv >= value + 1e-4 * step * sq
                } else {
                    let slope_t: f64 = tg.iter().zip(&grad).map(|(a, b)| a * b).sum();
                    0.5 * (sq + slope_t) >= 1e-4 * sq
                };
                if tv.is_finite() && sufficient {
                    x = trial;
                    value = tv;
                    grad = tg;
                    norm = tn;
                    step *= 2.0;
                    break;
                }
                step *= 0.5;
                if step < 1e-300 {
                    return Err(Error::Solver(format!(
                        "oracle line search collapsed at gradient norm {norm:.3e}"
                    )));
                }
            }
        }
        if norm <= cfg.grad_tol {
            return Ok((x, cfg.max_iter, norm));
        }
        Err(Error::Solver(format!(
            "oracle hit the iteration cap ({}) at gradient norm {norm:.3e}",
            cfg.max_iter
        )))
    }

    fn solution(&self, x: Vec<f64>, iterations: usize, grad_norm: f64) -> Result<OracleSolution> {
        let (n, m) = (self.n(), self.m());
        let plan = DMatrix::from_fn(n, m, |i, j| self.entry(&x, i, j));
        let h = match &self.target {
            Some(t) => DMatrix::from_column_slice(t.nrows(), t.ncols(), &x[n + m..]),
            None => DMatrix::zeros(1, 1),
        };
        Ok(OracleSolution {
            plan: TransportPlan::with_tolerance(plan, 1e-8)?,
            f: DVector::from_column_slice(&x[..n]),
            g: DVector::from_column_slice(&x[n..n + m]),
            h,
            iterations,
            grad_norm,
        })
    }
}

fn check_size(cost: &DMatrix<f64>, cfg: &OracleConfig) -> Result<()> {
    let (n, m) = cost.shape();
    if n > MAX_SIZE || m > MAX_SIZE {
        return Err(Error::invalid(format!(
            "oracle supports sizes up to {MAX_SIZE}, got {n}x{m}"
        )));
    }
    if !(cfg.epsilon > 0.0 && cfg.grad_tol > 0.0) {
        return Err(Error::invalid("oracle epsilon and tolerance must be > 0"));
    }
    Ok(())
}

/// Unconstrained entropic OT by dual ascent.
pub fn dual_ascent_entropic(cost: &CostMatrix, cfg: &OracleConfig) -> Result<OracleSolution> {
    check_size(cost.values(), cfg)?;
    let (n, m) = cost.shape();
    let zeros_n = vec![0; n];
    let zeros_m = vec![0; m];
    let dual = Dual {
        cost: cost.values(),
        eps: cfg.epsilon,
        src: &zeros_n,
        dst: &zeros_m,
        target: None,
    };
    let (x, it, norm) = dual.ascend(cfg)?;
    dual.solution(x, it, norm)
}

/// Entropic OT with the group coupling pinned to `target`, by dual ascent.
pub fn dual_ascent_fair(
    cost: &CostMatrix,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
    cfg: &OracleConfig,
) -> Result<OracleSolution> {
    check_size(cost.values(), cfg)?;
    check_dim("source labels vs cost rows", cost.nrows(), src.len())?;
    check_dim(
        "destination labels vs cost columns",
        cost.ncols(),
        dst.len(),
    )?;
    check_dim("target rows", src.groups(), target.shape().0)?;
    check_dim("target columns", dst.groups(), target.shape().1)?;
    let dual = Dual {
        cost: cost.values(),
        eps: cfg.epsilon,
        src: src.labels(),
        dst: dst.labels(),
        target: Some(target.values().clone()),
    };
    let (x, it, norm) = dual.ascend(cfg)?;
    dual.solution(x, it, norm)
}

/// Central-difference gradient of `f` at `x`.
pub fn finite_diff(mut f: impl FnMut(&[f64]) -> f64, x: &[f64], step: f64) -> Result<Vec<f64>> {
    if !(step > 0.0) {
        return Err(Error::invalid(format!(
            "finite-difference step must be > 0, got {step}"
        )));
    }
    let mut p = x.to_vec();
    let mut grad = Vec::with_capacity(x.len());
    for k in 0..x.len() {
        p[k] = x[k] + step;
        let up = f(&p);
        p[k] = x[k] - step;
        let down = f(&p);
        p[k] = x[k];
        grad.push((up - down) / (2.0 * step));
    }
    Ok(grad)
}

/// Relative error ‖a − b‖ / max(‖a‖, ‖b‖, floor).
pub fn relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let diff: f64 = a
        .iter()
        .zip(b)
        .map(|(x, y)| (x - y) * (x - y))
        .sum::<f64>()
        .sqrt();
    let na: f64 = a.iter().map(|x| x * x).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|x| x * x).sum::<f64>().sqrt();
    diff / na.max(nb).max(floor)
}

/// A random fair-OT instance with two groups per side.
#[derive(Debug, Clone)]
pub struct RandomInstance {
    pub cost: CostMatrix,
    pub src: GroupLabels,
    pub dst: GroupLabels,
    pub target: FairnessTarget,
}

/// Costs uniform on [0, 2); labels alternate so both groups are present;
/// the target perturbs the independent coupling p⊗q while staying positive.
pub fn random_instance(rng: &mut impl Rng, n: usize, m: usize) -> Result<RandomInstance> {
    if n < 2 || m < 2 {
        return Err(Error::invalid(
            "random instances need at least two points per side",
        ));
    }
    let cost = CostMatrix::new(DMatrix::from_fn(n, m, |_, _| 2.0 * rng.random::<f64>()))?;
    let src = GroupLabels::new((0..n).map(|i| i % 2).collect(), 2)?;
    let dst = GroupLabels::new((0..m).map(|j| j % 2).collect(), 2)?;
    let p = src.marginal();
    let q = dst.marginal();
    let lo = -(p[0] * q[0]).min(p[1] * q[1]);
    let hi = (p[0] * q[1]).min(p[1] * q[0]);
    let t = 0.8 * (lo + (hi - lo) * rng.random::<f64>());
    let values = DMatrix::from_fn(2, 2, |s, w| p[s] * q[w] + if s == w { t } else { -t });
    Ok(RandomInstance {
        cost,
        src,
        dst,
        target: FairnessTarget::new(values)?,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AgreementRecord {
    pub solver: String,
    pub n: usize,
    pub m: usize,
    pub epsilon: f64,
    pub instance: usize,
    pub frobenius_gap: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct AgreementSpec {
    pub sizes: Vec<(usize, usize)>,
    pub epsilons: Vec<f64>,
    pub instances: usize,
    pub seed: u64,
    pub tolerance: f64,
}

impl Default for AgreementSpec {
    fn default() -> Self {
        Self {
            sizes: vec![(2, 2), (3, 5), (5, 5), (8, 8)],
            epsilons: vec![0.5, 1.0, 5.0],
            instances: 50,
            seed: 0,
            tolerance: 1e-5,
        }
    }
}

/// Compares `sinkhorn` and `fair_sinkhorn` with the oracles on random instances.
/// Oracle or solver failures are reported as an infinite gap.
impl AgreementSpec {
    pub fn validate(&self) -> Result<()> {
        if self
            .sizes
            .iter()
            .any(|&(n, m)| n == 0 || m == 0 || n > MAX_SIZE || m > MAX_SIZE)
        {
            return Err(Error::invalid(format!(
                "oracle sizes must lie in 1..={MAX_SIZE}"
            )));
        }
        if self.epsilons.iter().any(|e| !(e.is_finite() && *e > 0.0)) {
            return Err(Error::invalid("oracle epsilons must be finite and > 0"));
        }
        if !(self.tolerance > 0.0) {
            return Err(Error::invalid("oracle tolerance must be > 0"));
        }
        Ok(())
    }
}

pub fn agreement_suite(spec: &AgreementSpec) -> Result<Vec<AgreementRecord>> {
    spec.validate()?;
    let mut records = Vec::new();
    for (si, &(n, m)) in spec.sizes.iter().enumerate() {
        for (ei, &eps) in spec.epsilons.iter().enumerate() {
            let stream = (si * spec.epsilons.len() + ei) as u64;
            let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
            rng.set_stream(stream);
            let solver_cfg = SinkhornConfig::new(eps)
                .with_tol(1e-12)
                .with_max_iter(100_000);
            let oracle_cfg = OracleConfig::new(eps);
            for k in 0..spec.instances {
                let inst = random_instance(&mut rng, n, m)?;
                let gap = |a: Result<DMatrix<f64>>, b: Result<DMatrix<f64>>| match (a, b) {
                    (Ok(a), Ok(b)) => (a - b).norm(),
                    _ => f64::INFINITY,
                };
                let plain = gap(
                    sinkhorn(&inst.cost, &solver_cfg).map(|o| o.plan.into_inner()),
                    dual_ascent_entropic(&inst.cost, &oracle_cfg).map(|o| o.plan.into_inner()),
                );
                let fair = gap(
                    fair_sinkhorn(&inst.cost, &inst.target, &inst.src, &inst.dst, &solver_cfg)
                        .map(|o| o.plan.into_inner()),
                    dual_ascent_fair(&inst.cost, &inst.target, &inst.src, &inst.dst, &oracle_cfg)
                        .map(|o| o.plan.into_inner()),
                );
                for (solver, g) in [("sinkhorn", plain), ("fair_sinkhorn", fair)] {
                    records.push(AgreementRecord {
                        solver: solver.to_string(),
                        n,
                        m,
                        epsilon: eps,
                        instance: k,
                        frobenius_gap: g,
                    });
                }
            }
        }
    }
    Ok(records)
}

//! Sinkhorn iterations recorded for reverse-mode differentiation.
//!
//! The plan after T iterations is a smooth function of the cost. The forward
//! pass keeps the last `unroll_length` iterates and [`Unrolled::backward`]
//! pulls a plan gradient back to a cost gradient through them; the state
//! before the first recorded iterate is treated as a constant.

use std::collections::VecDeque;

use nalgebra::{DMatrix, DVector};

use crate::error::{check_dim, Error, Result};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct UnrollConfig {
    pub epsilon: f64,
    pub tol: f64,
    pub max_iter: usize,
    /// Number of trailing iterations differentiated. The forward pass runs at
    /// least this many iterations.
    pub unroll_length: usize,
    pub log_domain: bool,
}

impl UnrollConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.epsilon > 0.0 && self.epsilon.is_finite() && self.tol > 0.0) {
            return Err(Error::invalid(
                "unrolled Sinkhorn needs epsilon > 0 and tol > 0",
            ));
        }
        if self.unroll_length == 0 || self.max_iter == 0 {
            return Err(Error::invalid("unroll length and max_iter must be >= 1"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum Tape {
    /// Scalings (u_t, v_t), K = exp(−C/ε − 1), and v before the window.
    Scaling {
        kernel: DMatrix<f64>,
        steps: VecDeque<(DVector<f64>, DVector<f64>)>,
        boundary: DVector<f64>,
    },
    /// Potentials (f_t, g_t) and g before the window.
    Log {
        cost: DMatrix<f64>,
        steps: VecDeque<(DVector<f64>, DVector<f64>)>,
        boundary: DVector<f64>,
    },
}

#[derive(Debug, Clone)]
pub struct Unrolled {
    epsilon: f64,
    plan: DMatrix<f64>,
    f: DVector<f64>,
    g: DVector<f64>,
    pub iterations: usize,
    /// Row-marginal violation after the final column update.
    pub residual: f64,
    pub converged: bool,
    tape: Tape,
}

impl Unrolled {
    pub fn plan(&self) -> &DMatrix<f64> {
        &self.plan
    }

    /// Final dual potentials in cost units: Π_ij = exp((f_i + g_j − C_ij)/ε − 1).
    pub fn potentials(&self) -> (&DVector<f64>, &DVector<f64>) {
        (&self.f, &self.g)
    }

    pub fn log_domain(&self) -> bool {
        matches!(self.tape, Tape::Log { .. })
    }

    /// ∂⟨plan_bar, Π⟩/∂C through the recorded iterations.
    pub fn backward(&self, plan_bar: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("plan gradient rows", self.plan.nrows(), plan_bar.nrows())?;
        check_dim("plan gradient columns", self.plan.ncols(), plan_bar.ncols())?;
        Ok(match &self.tape {
            Tape::Scaling {
                kernel,
                steps,
                boundary,
            } => scaling_backward(kernel, steps, boundary, plan_bar, self.epsilon),
            Tape::Log {
                cost,
                steps,
                boundary,
            } => log_backward(cost, steps, boundary, plan_bar, self.epsilon),
        })
    }
}

fn push_step(
    steps: &mut VecDeque<(DVector<f64>, DVector<f64>)>,
    boundary: &mut DVector<f64>,
    len: usize,
    step: (DVector<f64>, DVector<f64>),
) {
    steps.push_back(step);
    if steps.len() > len {
        if let Some((_, second)) = steps.pop_front() {
            *boundary = second;
        }
    }
}

/// Runs Sinkhorn from `warm_g` (zeros when absent) until the residual meets
/// `tol` after at least `unroll_length` iterations, or the iteration budget
/// max(max_iter, unroll_length) is spent.
pub fn unrolled_sinkhorn(
    cost: &DMatrix<f64>,
    cfg: &UnrollConfig,
    warm_g: Option<&DVector<f64>>,
) -> Result<Unrolled> {
    cfg.validate()?;
    if cost.iter().any(|c| !c.is_finite()) {
        return Err(Error::invalid("cost matrix has non-finite entries"));
    }
    let g0 = match warm_g {
        Some(g) => {
            check_dim("warm-start g", cost.ncols(), g.len())?;
            g.clone()
        }
        None => DVector::zeros(cost.ncols()),
    };
    if !cfg.log_domain {
        if let Some(out) = scaling_forward(cost, cfg, &g0) {
            return Ok(out);
        }
        log::debug!("multiplicative unrolled Sinkhorn under/overflowed; using the log domain");
    }
    Ok(log_forward(cost, cfg, &g0))
}

fn scaling_forward(cost: &DMatrix<f64>, cfg: &UnrollConfig, g0: &DVector<f64>) -> Option<Unrolled> {
    let (n, m) = cost.shape();
    let eps = cfg.epsilon;
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let kernel = cost.map(|c| (-c / eps - 1.0).exp());
    if kernel.iter().any(|&k| !(k > 0.0 && k.is_finite())) {
        return None;
    }
    let mut v = g0.map(|g| (g / eps).exp());
    if v.iter().any(|x| !(x.is_finite() && *x > 0.0)) {
        return None;
    }
    let budget = cfg.max_iter.max(cfg.unroll_length);
    let mut steps = VecDeque::with_capacity(cfg.unroll_length + 1);
    let mut boundary = v.clone();
    let mut kv = &kernel * &v;
    let mut u = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for t in 1..=budget {
        iterations = t;
        u = kv.map(|r| a / r);
        v = (kernel.tr_mul(&u)).map(|q| b / q);
        kv = &kernel * &v;
        residual = u
            .iter()
            .zip(kv.iter())
            .map(|(ui, ki)| (ui * ki - a).abs())
            .fold(0.0, f64::max);
        if !residual.is_finite() {
            return None;
        }
        push_step(
            &mut steps,
            &mut boundary,
            cfg.unroll_length,
            (u.clone(), v.clone()),
        );
        if t >= cfg.unroll_length && residual <= cfg.tol {
            break;
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| u[i] * kernel[(i, j)] * v[j]);
    Some(Unrolled {
        epsilon: eps,
        plan,
        f: u.map(|x| eps * x.ln()),
        g: v.map(|x| eps * x.ln()),
        iterations,
        residual,
        converged: residual <= cfg.tol,
        tape: Tape::Scaling {
            kernel,
            steps,
            boundary,
        },
    })
}

fn log_sum_exp(values: impl Iterator<Item = f64> + Clone) -> f64 {
    let mx = values.clone().fold(f64::NEG_INFINITY, f64::max);
    if mx == f64::NEG_INFINITY {
        return mx;
    }
    mx + values.map(|v| (v - mx).exp()).sum::<f64>().ln()
}

fn log_forward(cost: &DMatrix<f64>, cfg: &UnrollConfig, g0: &DVector<f64>) -> Unrolled {
    let (n, m) = cost.shape();
    let eps = cfg.epsilon;
    let (log_a, log_b) = (-(n as f64).ln(), -(m as f64).ln());
    let a = 1.0 / n as f64;
    let budget = cfg.max_iter.max(cfg.unroll_length);
    let mut steps = VecDeque::with_capacity(cfg.unroll_length + 1);
    let mut g = g0.clone();
    let mut boundary = g.clone();
    let row_lse = |g: &DVector<f64>| {
        DVector::from_fn(n, |i, _| {
            log_sum_exp((0..m).map(|j| (g[j] - cost[(i, j)]) / eps - 1.0))
        })
    };
    let mut lse_rows = row_lse(&g);
    let mut f = DVector::zeros(n);
    let mut residual = f64::INFINITY;
    let mut iterations = 0;
    for t in 1..=budget {
        iterations = t;
        f = lse_rows.map(|l| eps * (log_a - l));
        g = DVector::from_fn(m, |j, _| {
            eps * (log_b - log_sum_exp((0..n).map(|i| (f[i] - cost[(i, j)]) / eps - 1.0)))
        });
        lse_rows = row_lse(&g);
        residual = (0..n)
            .map(|i| ((f[i] / eps + lse_rows[i]).exp() - a).abs())
            .fold(0.0, f64::max);
        push_step(
            &mut steps,
            &mut boundary,
            cfg.unroll_length,
            (f.clone(), g.clone()),
        );
        if t >= cfg.unroll_length && residual <= cfg.tol {
            break;
        }
    }
    let plan = DMatrix::from_fn(n, m, |i, j| {
        ((f[i] + g[j] - cost[(i, j)]) / eps - 1.0).exp()
    });
    Unrolled {
        epsilon: eps,
        plan,
        f,
        g,
        iterations,
        residual,
        converged: residual <= cfg.tol,
        tape: Tape::Log {
            cost: cost.clone(),
            steps,
            boundary,
        },
    }
}

/// Reverse pass through u_t = a / (K v_{t−1}), v_t = b / (Kᵀ u_t) and
/// Π = diag(u) K diag(v).
fn scaling_backward(
    kernel: &DMatrix<f64>,
    steps: &VecDeque<(DVector<f64>, DVector<f64>)>,
    boundary: &DVector<f64>,
    plan_bar: &DMatrix<f64>,
    eps: f64,
) -> DMatrix<f64> {
    let (n, m) = kernel.shape();
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let (u_last, v_last) = steps.back().expect("at least one iteration");
    let weighted = plan_bar.component_mul(kernel);
    let mut u_bar = &weighted * v_last;
    let mut v_bar = weighted.tr_mul(u_last);
    let mut k_bar = plan_bar.component_mul(&(u_last * v_last.transpose()));
    for t in (0..steps.len()).rev() {
        let (u, v) = &steps[t];
        let v_prev = if t == 0 { boundary } else { &steps[t - 1].1 };
        let q_bar = v_bar.zip_map(v, |vb, vi| -vb * vi * vi / b);
        u_bar += kernel * &q_bar;
        k_bar.ger(1.0, u, &q_bar, 1.0);
        let r_bar = u_bar.zip_map(u, |ub, ui| -ub * ui * ui / a);
        v_bar = kernel.tr_mul(&r_bar);
        k_bar.ger(1.0, &r_bar, v_prev, 1.0);
        u_bar.fill(0.0);
    }
    k_bar.zip_map(kernel, |kb, k| -kb * k / eps)
}

/// Reverse pass through the log-sum-exp updates
/// f_t = ε log a − ε LSE_j((g_{t−1,j} − C_ij)/ε − 1) and
/// g_t = ε log b − ε LSE_i((f_{t,i} − C_ij)/ε − 1).
fn log_backward(
    cost: &DMatrix<f64>,
    steps: &VecDeque<(DVector<f64>, DVector<f64>)>,
    boundary: &DVector<f64>,
    plan_bar: &DMatrix<f64>,
    eps: f64,
) -> DMatrix<f64> {
    let (n, m) = cost.shape();
    let (a, b) = (1.0 / n as f64, 1.0 / m as f64);
    let entry = |f: &DVector<f64>, g: &DVector<f64>, i: usize, j: usize| {
        ((f[i] + g[j] - cost[(i, j)]) / eps - 1.0).exp()
    };
    let (f_last, g_last) = steps.back().expect("at least one iteration");
    let w = DMatrix::from_fn(n, m, |i, j| {
        plan_bar[(i, j)] * entry(f_last, g_last, i, j) / eps
    });
    let mut f_bar = w.column_sum();
    let mut g_bar = w.row_sum().transpose();
    let mut c_bar = -w;
    for t in (0..steps.len()).rev() {
        let (f, g) = &steps[t];
        let g_prev = if t == 0 { boundary } else { &steps[t - 1].1 };
        // g_t: softmax over i of column j, weights P(f_t, g_t)_ij / b.
        for j in 0..m {
            if g_bar[j] == 0.0 {
                continue;
            }
            for i in 0..n {
                let z = g_bar[j] * entry(f, g, i, j) / b;
                f_bar[i] -= z;
                c_bar[(i, j)] += z;
            }
        }
        // f_t: softmax over j of row i, weights P(f_t, g_{t−1})_ij / a.
        let mut next = DVector::zeros(m);
        for j in 0..m {
            for i in 0..n {
                let y = f_bar[i] * entry(f, g_prev, i, j) / a;
                next[j] -= y;
                c_bar[(i, j)] += y;
            }
        }
        g_bar = next;
        f_bar.fill(0.0);
    }
    c_bar
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff, relative_error};
    use crate::sinkhorn::{solve_matrix, SinkhornConfig};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cfg(eps: f64, log_domain: bool, unroll: usize) -> UnrollConfig {
        UnrollConfig {
            epsilon: eps,
            tol: 1e-12,
            max_iter: 5000,
            unroll_length: unroll,
            log_domain,
        }
    }

    #[test]
    fn forward_matches_production_solver() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let c = DMatrix::from_fn(5, 4, |_, _| rng.random::<f64>() * 3.0);
        let reference = solve_matrix(
            &c,
            &SinkhornConfig::new(0.7)
                .with_tol(1e-13)
                .with_max_iter(10_000),
        )
        .unwrap();
        for log in [false, true] {
            let out = unrolled_sinkhorn(&c, &cfg(0.7, log, 20), None).unwrap();
            assert_eq!(out.log_domain(), log);
            assert!(out.converged);
            assert!((out.plan() - reference.plan.values()).norm() < 1e-10);
        }
    }

    #[test]
    fn runs_at_least_unroll_length_iterations() {
        let c = DMatrix::zeros(3, 3);
        let out = unrolled_sinkhorn(&c, &cfg(1.0, false, 50), None).unwrap();
        assert_eq!(out.iterations, 50);
    }

    #[test]
    fn underflowing_kernel_switches_to_log_domain() {
        let mut c = DMatrix::from_element(2, 2, 1.0);
        c[(0, 1)] = 900.0;
        let out = unrolled_sinkhorn(&c, &cfg(1.0, false, 5), None).unwrap();
        assert!(out.log_domain());
    }

    #[test]
    fn warm_start_from_solution_is_a_fixed_point() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let c = DMatrix::from_fn(4, 6, |_, _| rng.random::<f64>());
        let cold = unrolled_sinkhorn(&c, &cfg(1.0, false, 10), None).unwrap();
        let warm = unrolled_sinkhorn(&c, &cfg(1.0, false, 10), Some(cold.potentials().1)).unwrap();
        assert!((warm.plan() - cold.plan()).amax() < 1e-14);
    }

    /// Gradient of ⟨W, Π_T(C)⟩ for the T-step map from a fixed start,
    /// against finite differences of the same map.
    #[test]
    fn backward_matches_finite_differences_of_the_unrolled_map() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for log in [false, true] {
            for _ in 0..10 {
                let (n, m) = (rng.random_range(2..=5), rng.random_range(2..=5));
                let eps = rng.random_range(0.3..2.0);
                let c = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() * 2.0);
                let w = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() - 0.5);
                let g0 = DVector::from_fn(m, |_, _| rng.random::<f64>() - 0.5);
                // Fixed T: exact iteration count regardless of the residual.
                let fixed = UnrollConfig {
                    tol: 1e-300,
                    max_iter: 7,
                    ..cfg(eps, log, 7)
                };
                let out = unrolled_sinkhorn(&c, &fixed, Some(&g0)).unwrap();
                assert_eq!(out.iterations, 7);
                let analytic = out.backward(&w).unwrap();
                let f = |p: &[f64]| {
                    let c = DMatrix::from_column_slice(n, m, p);
                    unrolled_sinkhorn(&c, &fixed, Some(&g0))
                        .unwrap()
                        .plan()
                        .dot(&w)
                };
                let numeric = finite_diff(f, c.as_slice(), 1e-6).unwrap();
                let err = relative_error(analytic.as_slice(), &numeric, 1e-10);
                assert!(err < 1e-6, "log={log} error {err}");
            }
        }
    }

    /// Truncated window: the boundary state is a constant, so the gradient is
    /// that of the last L steps started from the recorded boundary.
    #[test]
    fn truncated_window_differentiates_the_tail() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let (n, m) = (3, 4);
        let c = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>());
        let w = DMatrix::from_fn(n, m, |_, _| rng.random::<f64>() - 0.5);
        let long = UnrollConfig {
            tol: 1e-300,
            max_iter: 9,
            ..cfg(1.0, true, 4)
        };
        let out = unrolled_sinkhorn(&c, &long, None).unwrap();
        let Tape::Log { boundary, .. } = &out.tape else {
            panic!("log tape expected")
        };
        let tail = UnrollConfig {
            tol: 1e-300,
            max_iter: 4,
            ..cfg(1.0, true, 4)
        };
        let from_boundary = unrolled_sinkhorn(&c, &tail, Some(boundary)).unwrap();
        assert!((from_boundary.plan() - out.plan()).amax() < 1e-14);
        let a = out.backward(&w).unwrap();
        let b = from_boundary.backward(&w).unwrap();
        assert!((a - b).amax() < 1e-14);
    }
}

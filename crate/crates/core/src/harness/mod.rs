//! Experiment orchestration: parameter sweeps, the reusability study and
//! plot-ready output.
//!
//! A sweep run directory holds
//!
//! * `config.json`: the frozen [`SweepSpec`],
//! * `records.csv`: one [`TradeoffRecord`] per grid point,
//! * `manifest.json`: seed, crate version and a hash of the records with wall
//!   times removed,
//! * `plots/`: output of [`emit_plot_data`].

mod plot;
mod reuse;
mod sweep;

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::costlearn::{BilevelConfig, PretrainConfig, DEFAULT_HIDDEN};
use crate::error::{Error, Result};
use crate::fairness::FairnessTarget;
use crate::penalized::GcgConfig;
use crate::sinkhorn::SinkhornConfig;
use crate::synthdata::GenSpec;

pub use plot::{emit_plot_data, PlotFiles};
pub use reuse::{run_reusability, ReusabilityRecord, ReusabilitySpec};
pub use sweep::{
    determinism_hash, load_records, run_sweep, solve_point, Manifest, PointOutcome, ProblemData,
    SweepOutput,
};

/// The default target: a 0.20/0.30/0.28/0.22 split between the two groups.
pub fn default_target() -> FairnessTarget {
    FairnessTarget::from_rows(&[&[0.20, 0.30], &[0.28, 0.22]]).expect("valid constant")
}

/// `num` points evenly spaced in log10 between `10^start` and `10^stop`.
pub fn logspace(start: f64, stop: f64, num: usize) -> Vec<f64> {
    match num {
        0 => Vec::new(),
        1 => vec![10f64.powf(start)],
        _ => (0..num)
            .map(|k| 10f64.powf(start + (stop - start) * k as f64 / (num - 1) as f64))
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    /// Grid over ε.
    Vanilla,
    /// Grid over ε.
    FairSinkhorn,
    /// Grid over λ.
    Penalized,
    /// Grid over λ.
    CostlearnMahalanobis,
    /// Grid over λ.
    CostlearnMlp,
}

impl Method {
    pub const ALL: [Method; 5] = [
        Method::Vanilla,
        Method::FairSinkhorn,
        Method::Penalized,
        Method::CostlearnMahalanobis,
        Method::CostlearnMlp,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Method::Vanilla => "vanilla",
            Method::FairSinkhorn => "fair_sinkhorn",
            Method::Penalized => "penalized",
            Method::CostlearnMahalanobis => "costlearn_mahalanobis",
            Method::CostlearnMlp => "costlearn_mlp",
        }
    }

    /// Whether the grid parameter is ε (otherwise λ).
    pub fn grid_is_epsilon(self) -> bool {
        matches!(self, Method::Vanilla | Method::FairSinkhorn)
    }
}

impl fmt::Display for Method {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for Method {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Method::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| Error::Parse(format!("unknown method {s:?}")))
    }
}

/// Cost-learning settings shared by every grid point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostLearnSettings {
    /// Adam learning rate; `None` uses 0.1 for Mahalanobis and 0.05 for the MLP.
    pub learning_rate: Option<f64>,
    pub outer_steps: usize,
    pub unroll_length: usize,
    pub hidden: usize,
    pub pretrain: PretrainConfig,
}

impl Default for CostLearnSettings {
    fn default() -> Self {
        let b = BilevelConfig::default();
        Self {
            learning_rate: None,
            outer_steps: b.outer_steps,
            unroll_length: b.unroll_length,
            hidden: DEFAULT_HIDDEN,
            pretrain: PretrainConfig::default(),
        }
    }
}

impl CostLearnSettings {
    pub fn learning_rate_for(&self, method: Method) -> f64 {
        self.learning_rate.unwrap_or(match method {
            Method::CostlearnMlp => 0.05,
            _ => 0.1,
        })
    }

    pub fn bilevel(&self, method: Method, lambda: f64, sinkhorn: &SinkhornConfig) -> BilevelConfig {
        BilevelConfig {
            lambda,
            inner: sinkhorn.clone(),
            outer_steps: self.outer_steps,
            adam: crate::costlearn::AdamParams::with_learning_rate(self.learning_rate_for(method)),
            unroll_length: self.unroll_length,
        }
    }
}

/// GCG settings apart from λ, which comes from the grid.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct GcgSettings {
    pub num_iter_max: usize,
    pub num_inner_iter_max: usize,
    pub stop_thr: f64,
    pub stop_thr2: f64,
}

impl Default for GcgSettings {
    fn default() -> Self {
        let g = GcgConfig::new(1.0, 1.0);
        Self {
            num_iter_max: g.num_iter_max,
            num_inner_iter_max: g.num_inner_iter_max,
            stop_thr: g.stop_thr,
            stop_thr2: g.stop_thr2,
        }
    }
}

impl GcgSettings {
    pub fn config(&self, lambda: f64, epsilon: f64) -> GcgConfig {
        GcgConfig {
            num_iter_max: self.num_iter_max,
            num_inner_iter_max: self.num_inner_iter_max,
            stop_thr: self.stop_thr,
            stop_thr2: self.stop_thr2,
            ..GcgConfig::new(lambda, epsilon)
        }
    }
}

/// One sweep: a method, its parameter grid and the problem instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SweepSpec {
    pub method: Method,
    /// ε for vanilla and FairSinkhorn, λ otherwise.
    pub grid: Vec<f64>,
    pub dataset: GenSpec,
    /// Repaired onto the generated data's group marginals.
    pub target: FairnessTarget,
    /// ε for the λ-grid methods and for the reference vanilla plan.
    pub epsilon: f64,
    /// Stopping rule for every Sinkhorn solve; `epsilon` and `log_domain`
    /// are overridden per point.
    pub sinkhorn: SinkhornConfig,
    pub gcg: GcgSettings,
    pub costlearn: CostLearnSettings,
    /// Master seed for model initialization.
    pub seed: u64,
}

impl Default for SweepSpec {
    fn default() -> Self {
        Self {
            method: Method::Penalized,
            grid: logspace(0.0, 3.0, 80),
            dataset: GenSpec::gaussians(250, 25, 0),
            target: default_target(),
            epsilon: 1.0,
            sinkhorn: SinkhornConfig::new(1.0),
            gcg: GcgSettings::default(),
            costlearn: CostLearnSettings::default(),
            seed: 0,
        }
    }
}

impl SweepSpec {
    /// Defaults for `method`, with the grid used for it in the experiments.
    pub fn for_method(method: Method) -> Self {
        let grid = match method {
            Method::Vanilla | Method::FairSinkhorn => logspace(0.0, 2.0, 20),
            Method::Penalized => logspace(0.0, 3.0, 80),
            Method::CostlearnMahalanobis | Method::CostlearnMlp => logspace(0.0, 4.0, 80),
        };
        Self {
            method,
            grid,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.is_empty() {
            return Err(Error::invalid("sweep grid is empty"));
        }
        if self.grid.iter().any(|v| !(v.is_finite() && *v > 0.0)) {
            return Err(Error::invalid("sweep grid values must be finite and > 0"));
        }
        if self.grid.windows(2).any(|w| w[1] <= w[0]) {
            return Err(Error::invalid("sweep grid must be strictly increasing"));
        }
        if !(self.epsilon.is_finite() && self.epsilon > 0.0) {
            return Err(Error::invalid(format!(
                "epsilon must be > 0, got {}",
                self.epsilon
            )));
        }
        self.dataset.validate()?;
        self.sinkhorn.validate()?;
        self.gcg.config(1.0, self.epsilon).validate()?;
        if self.costlearn.unroll_length == 0 {
            return Err(Error::invalid("unroll_length must be >= 1"));
        }
        if self.costlearn.hidden == 0 {
            return Err(Error::invalid("hidden width must be >= 1"));
        }
        crate::costlearn::AdamParams::with_learning_rate(
            self.costlearn.learning_rate_for(self.method),
        )
        .validate()
    }

    /// Sinkhorn settings at regularization `epsilon`, choosing the log domain
    /// below 1.
    pub fn sinkhorn_at(&self, epsilon: f64) -> SinkhornConfig {
        SinkhornConfig {
            epsilon,
            log_domain: epsilon < 1.0,
            warm_start: None,
            ..self.sinkhorn.clone()
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PointStatus {
    Converged,
    /// The solver hit its iteration cap (or, for cost learning, some inner
    /// solve did).
    Unconverged,
    /// Cost learning stopped on a non-finite or exploding objective.
    Diverged,
    /// The solver returned an error; metrics are NaN.
    Failed,
}

/// One grid point of a sweep.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TradeoffRecord {
    pub point: usize,
    pub method: Method,
    pub grid_value: f64,
    /// ⟨C, Π⟩ − ⟨C, Π_vanilla⟩ with C the squared Euclidean cost and the
    /// vanilla plan at the sweep's ε.
    pub transport_cost_gap: f64,
    pub fairness_loss: f64,
    pub iterations: usize,
    pub status: PointStatus,
    pub wall_time_seconds: f64,
    pub seed: u64,
}

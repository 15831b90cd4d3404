//! Fairness targets and the quadratic fairness loss.
//!
//! A target F is a K_s×K_w matrix prescribing how much mass the plan should move
//! from each source group to each destination group. It must itself couple the
//! empirical group marginals p̂ and q̂.

use std::fmt;

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::domain::{group_coupling_unchecked, GroupLabels, TransportPlan};
use crate::error::{check_dim, Error, Result};

/// Tolerance for target marginals against the empirical group marginals.
pub const TARGET_TOL: f64 = 1e-8;

const REPAIR_MAX_ITER: usize = 1000;
const REPAIR_TOL: f64 = 1e-12;

/// Serialized as a row-major array of rows.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "Vec<Vec<f64>>", into = "Vec<Vec<f64>>")]
pub struct FairnessTarget {
    values: DMatrix<f64>,
}

impl TryFrom<Vec<Vec<f64>>> for FairnessTarget {
    type Error = Error;

    fn try_from(rows: Vec<Vec<f64>>) -> Result<Self> {
        let refs: Vec<&[f64]> = rows.iter().map(Vec::as_slice).collect();
        Self::from_rows(&refs)
    }
}

impl From<FairnessTarget> for Vec<Vec<f64>> {
    fn from(t: FairnessTarget) -> Self {
        t.values
            .row_iter()
            .map(|r| r.iter().copied().collect())
            .collect()
    }
}

impl FairnessTarget {
    /// Checks shape and entry signs only; marginal consistency is checked by
    /// [`validate_target`] against a concrete pair of datasets.
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("fairness target is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "fairness target entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self { values })
    }

    pub fn from_rows(rows: &[&[f64]]) -> Result<Self> {
        let k_s = rows.len();
        let k_w = rows.first().map_or(0, |r| r.len());
        if rows.iter().any(|r| r.len() != k_w) {
            return Err(Error::invalid("ragged fairness target rows"));
        }
        Self::new(DMatrix::from_fn(k_s, k_w, |s, w| rows[s][w]))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn shape(&self) -> (usize, usize) {
        self.values.shape()
    }

    #[inline]
    pub fn get(&self, s: usize, w: usize) -> f64 {
        self.values[(s, w)]
    }

    /// Iterative proportional fitting onto the couplings of `p` and `q`:
    /// alternate row and column rescaling until both residuals fall below 1e-12
    /// or 1000 sweeps have run. Zero entries stay zero.
    pub fn repaired(&self, p: &[f64], q: &[f64]) -> Result<Self> {
        check_dim("target rows vs source groups", self.values.nrows(), p.len())?;
        check_dim(
            "target columns vs destination groups",
            self.values.ncols(),
            q.len(),
        )?;
        let mut f = self.values.clone();
        for _ in 0..REPAIR_MAX_ITER {
            for (s, &ps) in p.iter().enumerate() {
                let sum = f.row(s).sum();
                if sum > 0.0 {
                    f.row_mut(s).scale_mut(ps / sum);
                } else if ps > 0.0 {
                    return Err(Error::Infeasible(format!(
                        "target row {s} is zero but the source group has mass {ps}"
                    )));
                }
            }
            for (w, &qw) in q.iter().enumerate() {
                let sum = f.column(w).sum();
                if sum > 0.0 {
                    f.column_mut(w).scale_mut(qw / sum);
                } else if qw > 0.0 {
                    return Err(Error::Infeasible(format!(
                        "target column {w} is zero but the destination group has mass {qw}"
                    )));
                }
            }
            if marginal_violation(&f, p, q).map_or(0.0, |v| v.magnitude()) < REPAIR_TOL {
                break;
            }
        }
        let repaired = Self::new(f)?;
        validate_target(&repaired, p, q).map_err(|v| {
            Error::Infeasible(format!(
                "target could not be repaired onto the marginals: {v}"
            ))
        })?;
        Ok(repaired)
    }
}

/// Worst single violation found by [`validate_target`].
#[derive(Debug, Clone, PartialEq)]
pub enum TargetViolation {
    Shape {
        expected: (usize, usize),
        got: (usize, usize),
    },
    NegativeEntry {
        s: usize,
        w: usize,
        value: f64,
    },
    RowSum {
        s: usize,
        got: f64,
        expected: f64,
    },
    ColumnSum {
        w: usize,
        got: f64,
        expected: f64,
    },
}

impl TargetViolation {
    pub fn magnitude(&self) -> f64 {
        match *self {
            TargetViolation::Shape { .. } => f64::INFINITY,
            TargetViolation::NegativeEntry { value, .. } => -value,
            TargetViolation::RowSum { got, expected, .. }
            | TargetViolation::ColumnSum { got, expected, .. } => (got - expected).abs(),
        }
    }
}

impl fmt::Display for TargetViolation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            TargetViolation::Shape { expected, got } => write!(
                f,
                "target is {}x{}, expected {}x{}",
                got.0, got.1, expected.0, expected.1
            ),
            TargetViolation::NegativeEntry { s, w, value } => {
                write!(f, "entry ({s}, {w}) is negative: {value}")
            }
            TargetViolation::RowSum { s, got, expected } => write!(
                f,
                "row {s} sums to {got}, expected {expected} (violation {:.3e})",
                (got - expected).abs()
            ),
            TargetViolation::ColumnSum { w, got, expected } => write!(
                f,
                "column {w} sums to {got}, expected {expected} (violation {:.3e})",
                (got - expected).abs()
            ),
        }
    }
}

impl std::error::Error for TargetViolation {}

fn marginal_violation(f: &DMatrix<f64>, p: &[f64], q: &[f64]) -> Option<TargetViolation> {
    let rows = p.iter().enumerate().map(|(s, &e)| TargetViolation::RowSum {
        s,
        got: f.row(s).sum(),
        expected: e,
    });
    let cols = q
        .iter()
        .enumerate()
        .map(|(w, &e)| TargetViolation::ColumnSum {
            w,
            got: f.column(w).sum(),
            expected: e,
        });
    rows.chain(cols)
        .max_by(|a, b| a.magnitude().total_cmp(&b.magnitude()))
}

/// Accepts `target` iff it is nonnegative and its row and column sums match
/// `p` and `q` within [`TARGET_TOL`]. Otherwise reports the worst violation.
pub fn validate_target(
    target: &FairnessTarget,
    p: &[f64],
    q: &[f64],
) -> std::result::Result<(), TargetViolation> {
    let f = target.values();
    if f.shape() != (p.len(), q.len()) {
        return Err(TargetViolation::Shape {
            expected: (p.len(), q.len()),
            got: f.shape(),
        });
    }
    for w in 0..f.ncols() {
        for s in 0..f.nrows() {
            if f[(s, w)] < 0.0 {
                return Err(TargetViolation::NegativeEntry {
                    s,
                    w,
                    value: f[(s, w)],
                });
            }
        }
    }
    match marginal_violation(f, p, q) {
        Some(v) if v.magnitude() > TARGET_TOL => Err(v),
        _ => Ok(()),
    }
}

/// Validates `target` against the empirical group marginals of two label sets,
/// projecting it with [`FairnessTarget::repaired`] when `repair` is set.
pub fn resolve_target(
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
    repair: bool,
) -> Result<FairnessTarget> {
    let p = src.marginal();
    let q = dst.marginal();
    match validate_target(target, &p, &q) {
        Ok(()) => Ok(target.clone()),
        Err(v) if repair && !matches!(v, TargetViolation::Shape { .. }) => {
            let fixed = target.repaired(&p, &q)?;
            log::warn!("fairness target repaired onto empirical marginals ({v})");
            Ok(fixed)
        }
        Err(v) => Err(Error::Infeasible(format!("invalid fairness target: {v}"))),
    }
}

/// Two-group quota target: a share `quota` of source-group-1 mass goes to
/// destination group 2, the rest of each column is filled by source group 2.
pub fn target_from_quota(p: &[f64], q: &[f64], quota: f64) -> Result<FairnessTarget> {
    if p.len() != 2 || q.len() != 2 {
        return Err(Error::invalid(
            "quota targets need exactly two groups per side",
        ));
    }
    if !(0.0..=1.0).contains(&quota) {
        return Err(Error::invalid(format!("quota {quota} outside [0, 1]")));
    }
    let entries = [
        [(1.0 - quota) * p[0], quota * p[0]],
        [q[0] - (1.0 - quota) * p[0], q[1] - quota * p[0]],
    ];
    for (s, row) in entries.iter().enumerate() {
        for (w, &v) in row.iter().enumerate() {
            if v < 0.0 {
                return Err(Error::Infeasible(format!(
                    "quota {quota} makes entry ({s}, {w}) negative ({v})"
                )));
            }
        }
    }
    FairnessTarget::from_rows(&[&entries[0], &entries[1]])
}

/// Plan spreading each target cell uniformly over its block:
/// Π_ij = F[s_i, w_j] / (n_{s_i} m_{w_j}). Meets the target exactly.
pub fn product_fair_plan(
    src: &GroupLabels,
    dst: &GroupLabels,
    target: &FairnessTarget,
) -> Result<TransportPlan> {
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
    let ns = src.counts();
    let mw = dst.counts();
    for s in 0..src.groups() {
        for w in 0..dst.groups() {
            if target.get(s, w) > 0.0 && (ns[s] == 0 || mw[w] == 0) {
                return Err(Error::Infeasible(format!(
                    "target cell ({s}, {w}) has mass {} but its block is empty",
                    target.get(s, w)
                )));
            }
        }
    }
    let values = DMatrix::from_fn(src.len(), dst.len(), |i, j| {
        let (s, w) = (src.get(i), dst.get(j));
        target.get(s, w) / (ns[s] * mw[w]) as f64
    });
    TransportPlan::with_tolerance(values, TARGET_TOL)
}

fn check_shapes(
    plan: &DMatrix<f64>,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> Result<()> {
    check_dim("source labels vs plan rows", plan.nrows(), src.len())?;
    check_dim(
        "destination labels vs plan columns",
        plan.ncols(),
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
    )
}

/// Σ_{s,w} (group_coupling(Π)_sw − F_sw)².
pub fn fairness_loss(
    plan: &DMatrix<f64>,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> Result<f64> {
    check_shapes(plan, target, src, dst)?;
    Ok(fairness_loss_unchecked(plan, target, src, dst))
}

pub(crate) fn fairness_loss_unchecked(
    plan: &DMatrix<f64>,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> f64 {
    let g = group_coupling_unchecked(plan, src, dst);
    (g - target.values()).norm_squared()
}

/// Gradient of [`fairness_loss`] with respect to the plan:
/// 2·(group_coupling(Π) − F) broadcast to the (s_i, w_j) block of each entry.
pub fn fairness_loss_grad(
    plan: &DMatrix<f64>,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> Result<DMatrix<f64>> {
    check_shapes(plan, target, src, dst)?;
    Ok(fairness_loss_grad_unchecked(plan, target, src, dst))
}

pub(crate) fn fairness_loss_grad_unchecked(
    plan: &DMatrix<f64>,
    target: &FairnessTarget,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> DMatrix<f64> {
    let dev = (group_coupling_unchecked(plan, src, dst) - target.values()) * 2.0;
    broadcast_blocks(&dev, src, dst)
}

/// n×m matrix whose (i, j) entry is `blocks[s_i, w_j]`.
pub(crate) fn broadcast_blocks(
    blocks: &DMatrix<f64>,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> DMatrix<f64> {
    DMatrix::from_fn(src.len(), dst.len(), |i, j| {
        blocks[(src.get(i), dst.get(j))]
    })
}

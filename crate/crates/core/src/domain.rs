//! Core data shared by every solver: labelled point clouds, cost matrices,
//! transport plans, and the group-level marginalization of a plan.
//!
//! Group labels are stored 0-based. The CSV formats in [`crate::io`] use
//! 1-based labels and convert at the boundary.

use nalgebra::DMatrix;

use crate::error::{check_dim, Error, Result};

/// Marginal tolerance for user-constructed plans.
pub const MARGINAL_TOL: f64 = 1e-7;

/// Sensitive-group membership of one side of the matching.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GroupLabels {
    labels: Vec<usize>,
    groups: usize,
}

impl GroupLabels {
    /// `labels` are 0-based group indices in `0..groups`.
    pub fn new(labels: Vec<usize>, groups: usize) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("label vector is empty"));
        }
        if groups == 0 {
            return Err(Error::invalid("group count must be positive"));
        }
        if let Some((i, &l)) = labels.iter().enumerate().find(|(_, &l)| l >= groups) {
            return Err(Error::invalid(format!(
                "label {l} at position {i} is outside 0..{groups}"
            )));
        }
        Ok(Self { labels, groups })
    }

    /// Builds labels from 1-based indices; the group count is the largest label.
    pub fn from_one_based(labels: &[usize]) -> Result<Self> {
        if labels.contains(&0) {
            return Err(Error::invalid("1-based labels must be >= 1"));
        }
        let groups = labels.iter().copied().max().unwrap_or(0);
        Self::new(labels.iter().map(|l| l - 1).collect(), groups)
    }

    /// Single group containing `n` points.
    pub fn single(n: usize) -> Result<Self> {
        Self::new(vec![0; n], 1)
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn groups(&self) -> usize {
        self.groups
    }

    pub fn labels(&self) -> &[usize] {
        &self.labels
    }

    #[inline]
    pub fn get(&self, i: usize) -> usize {
        self.labels[i]
    }

    pub fn counts(&self) -> Vec<usize> {
        let mut counts = vec![0; self.groups];
        for &l in &self.labels {
            counts[l] += 1;
        }
        counts
    }

    /// Empirical group marginal: fraction of points in each group.
    pub fn marginal(&self) -> Vec<f64> {
        let n = self.labels.len() as f64;
        self.counts().into_iter().map(|c| c as f64 / n).collect()
    }

    /// Applies a permutation: the result's i-th label is `self[perm[i]]`.
    pub fn permuted(&self, perm: &[usize]) -> Result<Self> {
        check_dim("permutation length", self.len(), perm.len())?;
        Self::new(perm.iter().map(|&p| self.labels[p]).collect(), self.groups)
    }
}

/// Feature points (rows of an n×d matrix) with their sensitive-group labels.
#[derive(Debug, Clone, PartialEq)]
pub struct LabeledDataset {
    points: DMatrix<f64>,
    labels: GroupLabels,
}

impl LabeledDataset {
    pub fn new(points: DMatrix<f64>, labels: GroupLabels) -> Result<Self> {
        if points.nrows() == 0 || points.ncols() == 0 {
            return Err(Error::invalid(
                "dataset needs n >= 1 points of dimension d >= 1",
            ));
        }
        check_dim("label count", points.nrows(), labels.len())?;
        if points.iter().any(|v| !v.is_finite()) {
            return Err(Error::invalid("dataset contains non-finite coordinates"));
        }
        Ok(Self { points, labels })
    }

    pub fn from_rows(rows: &[Vec<f64>], labels: GroupLabels) -> Result<Self> {
        let n = rows.len();
        let d = rows.first().map_or(0, Vec::len);
        if let Some(r) = rows.iter().find(|r| r.len() != d) {
            return Err(Error::DimensionMismatch {
                what: "point dimension",
                expected: d,
                got: r.len(),
            });
        }
        let points = DMatrix::from_fn(n, d, |i, k| rows[i][k]);
        Self::new(points, labels)
    }

    pub fn len(&self) -> usize {
        self.points.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.points.nrows() == 0
    }

    pub fn dim(&self) -> usize {
        self.points.ncols()
    }

    pub fn points(&self) -> &DMatrix<f64> {
        &self.points
    }

    pub fn labels(&self) -> &GroupLabels {
        &self.labels
    }
}

/// Nonnegative, finite ground-cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix(DMatrix<f64>);

impl CostMatrix {
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("cost matrix is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::invalid(format!(
                "cost entries must be finite and >= 0, found {v}"
            )));
        }
        Ok(Self(values))
    }

    /// Squared Euclidean cost between the rows of `x` and `y`.
    pub fn squared_euclidean(x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<Self> {
        check_dim("point dimension", x.ncols(), y.ncols())?;
        let values = DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
            (0..x.ncols())
                .map(|k| {
                    let d = x[(i, k)] - y[(j, k)];
                    d * d
                })
                .sum::<f64>()
        });
        Self::new(values)
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.0
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.0
    }

    pub fn shape(&self) -> (usize, usize) {
        self.0.shape()
    }
}

impl std::ops::Deref for CostMatrix {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.0
    }
}

/// Coupling with uniform marginals: rows sum to 1/n, columns to 1/m.
#[derive(Debug, Clone, PartialEq)]
pub struct TransportPlan {
    values: DMatrix<f64>,
    residual: f64,
}

impl TransportPlan {
    /// Validates nonnegativity and the uniform marginals within [`MARGINAL_TOL`].
    pub fn new(values: DMatrix<f64>) -> Result<Self> {
        Self::with_tolerance(values, MARGINAL_TOL)
    }

    pub fn with_tolerance(values: DMatrix<f64>, tol: f64) -> Result<Self> {
        let plan = Self::from_solver(values)?;
        if plan.residual > tol {
            return Err(Error::invalid(format!(
                "plan marginal residual {:.3e} exceeds tolerance {tol:.1e}",
                plan.residual
            )));
        }
        Ok(plan)
    }

    /// Plans produced by iterative solvers carry their own residual, which the
    /// solver reports against its configured tolerance.
    pub(crate) fn from_solver(values: DMatrix<f64>) -> Result<Self> {
        if values.nrows() == 0 || values.ncols() == 0 {
            return Err(Error::invalid("plan is empty"));
        }
        if let Some(v) = values.iter().find(|v| !v.is_finite() || **v < 0.0) {
            return Err(Error::Numeric(format!(
                "plan entries must be finite and >= 0, found {v}"
            )));
        }
        let residual = marginal_residual(&values);
        Ok(Self { values, residual })
    }

    /// Independent coupling 1/(nm).
    pub fn uniform(n: usize, m: usize) -> Result<Self> {
        Self::new(DMatrix::from_element(n, m, 1.0 / (n * m) as f64))
    }

    pub fn values(&self) -> &DMatrix<f64> {
        &self.values
    }

    pub fn into_inner(self) -> DMatrix<f64> {
        self.values
    }

    /// ∞-norm distance of the row/column sums from 1/n and 1/m.
    pub fn residual(&self) -> f64 {
        self.residual
    }

    pub fn total_mass(&self) -> f64 {
        self.values.sum()
    }
}

impl std::ops::Deref for TransportPlan {
    type Target = DMatrix<f64>;

    fn deref(&self) -> &DMatrix<f64> {
        &self.values
    }
}

/// One cell (s, w) of the group-pair grid.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct GroupPair {
    pub s: usize,
    pub w: usize,
}

impl GroupPair {
    pub fn new(s: usize, w: usize, src_groups: usize, dst_groups: usize) -> Result<Self> {
        if s >= src_groups || w >= dst_groups {
            return Err(Error::invalid(format!(
                "group pair ({s}, {w}) outside {src_groups}x{dst_groups}"
            )));
        }
        Ok(Self { s, w })
    }
}

/// max(‖Π1 − 1/n‖∞, ‖Πᵀ1 − 1/m‖∞)
pub fn marginal_residual(plan: &DMatrix<f64>) -> f64 {
    let (n, m) = plan.shape();
    let a = 1.0 / n as f64;
    let b = 1.0 / m as f64;
    let rows = plan
        .column_sum()
        .iter()
        .map(|r| (r - a).abs())
        .fold(0.0, f64::max);
    let cols = plan
        .row_sum()
        .iter()
        .map(|c| (c - b).abs())
        .fold(0.0, f64::max);
    rows.max(cols)
}

fn check_labels(plan: &DMatrix<f64>, src: &GroupLabels, dst: &GroupLabels) -> Result<()> {
    check_dim("source labels vs plan rows", plan.nrows(), src.len())?;
    check_dim("target labels vs plan columns", plan.ncols(), dst.len())
}

/// Mass the plan moves between every source group and every target group.
///
/// Entry (s, w) sums Π_ij over i in group s and j in group w.
pub fn group_coupling(
    plan: &DMatrix<f64>,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> Result<DMatrix<f64>> {
    check_labels(plan, src, dst)?;
    Ok(group_coupling_unchecked(plan, src, dst))
}

pub(crate) fn group_coupling_unchecked(
    plan: &DMatrix<f64>,
    src: &GroupLabels,
    dst: &GroupLabels,
) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(src.groups(), dst.groups());
    let mut acc = vec![0.0; src.groups()];
    for (j, col) in plan.column_iter().enumerate() {
        acc.iter_mut().for_each(|a| *a = 0.0);
        for (i, &p) in col.iter().enumerate() {
            acc[src.get(i)] += p;
        }
        let w = dst.get(j);
        for (s, a) in acc.iter().enumerate() {
            out[(s, w)] += a;
        }
    }
    out
}

/// Tr(ΠᵀC).
pub fn transport_cost(plan: &DMatrix<f64>, cost: &DMatrix<f64>) -> Result<f64> {
    check_dim("cost rows", plan.nrows(), cost.nrows())?;
    check_dim("cost columns", plan.ncols(), cost.ncols())?;
    Ok(plan.dot(cost))
}

/// Σ Π_ij log Π_ij with 0·log 0 = 0.
pub fn entropy_term(plan: &DMatrix<f64>) -> f64 {
    plan.iter()
        .map(|&p| if p > 0.0 { p * p.ln() } else { 0.0 })
        .sum()
}

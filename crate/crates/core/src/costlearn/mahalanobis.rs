use nalgebra::{DMatrix, SymmetricEigen};
use serde::{Deserialize, Serialize};

use crate::domain::CostMatrix;
use crate::error::{check_dim, Error, Result};

use super::CostModel;

/// Tolerance on the smallest eigenvalue for a matrix to count as PSD.
pub const PSD_TOL: f64 = 1e-10;
pub const SYMMETRY_TOL: f64 = 1e-12;

/// c(x, y) = (x − y)ᵀ M (x − y) with M symmetric PSD.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "MatrixRows", into = "MatrixRows")]
pub struct MahalanobisModel {
    m: DMatrix<f64>,
}

/// Row-major JSON layout.
#[derive(Serialize, Deserialize)]
struct MatrixRows {
    matrix: Vec<Vec<f64>>,
}

impl TryFrom<MatrixRows> for MahalanobisModel {
    type Error = Error;

    fn try_from(rows: MatrixRows) -> Result<Self> {
        let d = rows.matrix.len();
        if rows.matrix.iter().any(|r| r.len() != d) {
            return Err(Error::Parse("Mahalanobis matrix must be square".into()));
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows.matrix[i][j]))
    }
}

impl From<MahalanobisModel> for MatrixRows {
    fn from(model: MahalanobisModel) -> Self {
        Self {
            matrix: model
                .m
                .row_iter()
                .map(|r| r.iter().copied().collect())
                .collect(),
        }
    }
}

impl MahalanobisModel {
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        check_psd(&m)?;
        Ok(Self { m })
    }

    pub fn identity(d: usize) -> Self {
        Self {
            m: DMatrix::identity(d, d),
        }
    }

    pub fn matrix(&self) -> &DMatrix<f64> {
        &self.m
    }
}

fn check_psd(m: &DMatrix<f64>) -> Result<()> {
    if !m.is_square() || m.nrows() == 0 {
        return Err(Error::invalid(
            "Mahalanobis matrix must be square and nonempty",
        ));
    }
    if m.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("Mahalanobis matrix has non-finite entries"));
    }
    let asym = (m - m.transpose()).amax();
    if asym > SYMMETRY_TOL {
        return Err(Error::invalid(format!(
            "Mahalanobis matrix is not symmetric (gap {asym:.3e})"
        )));
    }
    let min_eig = SymmetricEigen::new(m.clone()).eigenvalues.min();
    if min_eig < -PSD_TOL {
        return Err(Error::invalid(format!(
            "Mahalanobis matrix is not PSD (smallest eigenvalue {min_eig:.3e})"
        )));
    }
    Ok(())
}

/// C_ij = (x_i − y_j)ᵀ M (x_i − y_j), for the rows of `x` and `y`.
pub fn mahalanobis_cost(
    m: &DMatrix<f64>,
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
) -> Result<CostMatrix> {
    check_psd(m)?;
    check_dim("Mahalanobis dimension vs x", m.nrows(), x.ncols())?;
    check_dim("Mahalanobis dimension vs y", m.nrows(), y.ncols())?;
    CostMatrix::new(quadratic_form(m, x, y))
}

/// The raw quadratic forms; roundoff below zero is clamped.
fn quadratic_form(m: &DMatrix<f64>, x: &DMatrix<f64>, y: &DMatrix<f64>) -> DMatrix<f64> {
    let d = m.nrows();
    let mut diff = vec![0.0; d];
    DMatrix::from_fn(x.nrows(), y.nrows(), |i, j| {
        for (k, dk) in diff.iter_mut().enumerate() {
            *dk = x[(i, k)] - y[(j, k)];
        }
        let mut acc = 0.0;
        for a in 0..d {
            let mut row = 0.0;
            for b in 0..d {
                row += m[(a, b)] * diff[b];
            }
            acc += diff[a] * row;
        }
        acc.max(0.0)
    })
}

/// Σ_ij C̄_ij (x_i − y_j)(x_i − y_j)ᵀ, i.e. the gradient with respect to M of
/// Σ_ij C̄_ij C_ij:
///
/// ```text
/// Xᵀ diag(C̄ 1) X + Yᵀ diag(C̄ᵀ 1) Y − Xᵀ C̄ Y − (Xᵀ C̄ Y)ᵀ
/// ```
pub fn mahalanobis_backward(
    x: &DMatrix<f64>,
    y: &DMatrix<f64>,
    c_bar: &DMatrix<f64>,
) -> Result<DMatrix<f64>> {
    check_dim("point dimension", x.ncols(), y.ncols())?;
    check_dim("upstream rows", x.nrows(), c_bar.nrows())?;
    check_dim("upstream columns", y.nrows(), c_bar.ncols())?;
    let r = c_bar.column_sum();
    let c = c_bar.row_sum().transpose();
    let mut xr = x.clone();
    for (i, mut row) in xr.row_iter_mut().enumerate() {
        row *= r[i];
    }
    let mut yc = y.clone();
    for (j, mut row) in yc.row_iter_mut().enumerate() {
        row *= c[j];
    }
    let cross = x.transpose() * c_bar * y;
    Ok(x.transpose() * xr + y.transpose() * yc - &cross - cross.transpose())
}

/// Frobenius-nearest PSD matrix to the symmetric part of `a`.
///
/// Eigenvalues below zero are clamped. Matrices that are already PSD come
/// back as their symmetric part, so symmetric PSD input is returned as is.
pub fn psd_project(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::invalid("psd_project needs a square matrix"));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric(
            "psd_project input has non-finite entries".into(),
        ));
    }
    let sym = (a + a.transpose()) * 0.5;
    let eig = SymmetricEigen::new(sym.clone());
    if eig.eigenvalues.iter().any(|v| !v.is_finite()) {
        return Err(Error::Numeric("eigendecomposition failed".into()));
    }
    if eig.eigenvalues.min() >= 0.0 {
        return Ok(sym);
    }
    let clamped = eig.eigenvalues.map(|v| v.max(0.0));
    let p = &eig.eigenvectors * DMatrix::from_diagonal(&clamped) * eig.eigenvectors.transpose();
    Ok((&p + p.transpose()) * 0.5)
}

impl CostModel for MahalanobisModel {
    fn input_dim(&self) -> usize {
        self.m.nrows()
    }

    fn cost(&self, x: &DMatrix<f64>, y: &DMatrix<f64>) -> Result<DMatrix<f64>> {
        check_dim("Mahalanobis dimension vs x", self.m.nrows(), x.ncols())?;
        check_dim("Mahalanobis dimension vs y", self.m.nrows(), y.ncols())?;
        Ok(quadratic_form(&self.m, x, y))
    }

    fn cost_backward(
        &self,
        x: &DMatrix<f64>,
        y: &DMatrix<f64>,
        c_bar: &DMatrix<f64>,
    ) -> Result<Vec<f64>> {
        check_dim("Mahalanobis dimension vs x", self.m.nrows(), x.ncols())?;
        Ok(mahalanobis_backward(x, y, c_bar)?.as_slice().to_vec())
    }

    fn params(&self) -> Vec<f64> {
        self.m.as_slice().to_vec()
    }

    fn set_params(&mut self, params: &[f64]) -> Result<()> {
        check_dim("Mahalanobis parameter count", self.m.len(), params.len())?;
        self.m.copy_from_slice(params);
        Ok(())
    }

    fn project(&mut self) -> Result<()> {
        self.m = psd_project(&self.m)?;
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::oracle::{finite_diff, relative_error};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rng: &mut ChaCha8Rng, r: usize, c: usize) -> DMatrix<f64> {
        DMatrix::from_fn(r, c, |_, _| rng.random::<f64>() * 2.0 - 1.0)
    }

    fn random_psd(rng: &mut ChaCha8Rng, d: usize) -> DMatrix<f64> {
        let a = random(rng, d, d);
        let m = &a * a.transpose();
        (&m + m.transpose()) * 0.5
    }

    #[test]
    fn identity_gives_squared_euclidean_and_zero_gives_zero() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let x = random(&mut rng, 5, 3);
        let y = random(&mut rng, 4, 3);
        let c = mahalanobis_cost(&DMatrix::identity(3, 3), &x, &y).unwrap();
        let e = CostMatrix::squared_euclidean(&x, &y).unwrap();
        assert!((c.values() - e.values()).amax() < 1e-14);
        let z = mahalanobis_cost(&DMatrix::zeros(3, 3), &x, &y).unwrap();
        assert!(z.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn doubling_m_doubles_cost_exactly() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let x = random(&mut rng, 6, 2);
        let y = random(&mut rng, 3, 2);
        let m = random_psd(&mut rng, 2);
        let c1 = mahalanobis_cost(&m, &x, &y).unwrap();
        let c2 = mahalanobis_cost(&(&m * 2.0), &x, &y).unwrap();
        assert_eq!(c2.values(), &(c1.values() * 2.0));
    }

    #[test]
    fn rejects_non_psd_and_bad_shapes() {
        let x = DMatrix::zeros(2, 2);
        let bad = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        assert!(mahalanobis_cost(&bad, &x, &x).is_err());
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.5, 0.0, 1.0]);
        assert!(mahalanobis_cost(&asym, &x, &x).is_err());
        assert!(mahalanobis_cost(&DMatrix::identity(3, 3), &x, &x).is_err());
        assert!(MahalanobisModel::new(bad).is_err());
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        for _ in 0..20 {
            let d = rng.random_range(1..=3);
            let x = random(&mut rng, 4, d);
            let y = random(&mut rng, 5, d);
            let m = random_psd(&mut rng, d);
            let w = random(&mut rng, 4, 5);
            let analytic = mahalanobis_backward(&x, &y, &w).unwrap();
            let f = |p: &[f64]| {
                let m = DMatrix::from_column_slice(d, d, p);
                quadratic_form(&m, &x, &y).dot(&w)
            };
            // Perturbing entries independently, so symmetric M is irrelevant here;
            // keep away from the clamp at zero by using distinct points.
            let numeric = finite_diff(f, m.as_slice(), 1e-6).unwrap();
            assert!(relative_error(analytic.as_slice(), &numeric, 1e-12) < 1e-6);
        }
    }

    #[test]
    fn projection_examples() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -1.0]);
        let p = psd_project(&a).unwrap();
        assert!((p - DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, 0.0])).amax() < 1e-15);

        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let m = random_psd(&mut rng, 3);
        assert!((psd_project(&m).unwrap() - &m).amax() < 1e-12);
    }

    #[test]
    fn projection_is_idempotent_and_nearest() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        for _ in 0..5 {
            let a = random(&mut rng, 3, 3);
            let a = (&a + a.transpose()) * 0.5;
            let p = psd_project(&a).unwrap();
            let pp = psd_project(&p).unwrap();
            assert!((&pp - &p).amax() < 1e-12);
            assert!(SymmetricEigen::new(p.clone()).eigenvalues.min() >= -1e-12);
            let best = (&a - &p).norm();
            for _ in 0..10_000 {
                let cand = random_psd(&mut rng, 3) * rng.random_range(0.0..2.0);
                assert!((&a - cand).norm() >= best - 1e-12);
            }
        }
    }

    #[test]
    fn json_round_trip() {
        let m =
            MahalanobisModel::new(DMatrix::from_row_slice(2, 2, &[2.0, 0.5, 0.5, 1.0])).unwrap();
        let s = serde_json::to_string(&m).unwrap();
        assert_eq!(s, r#"{"matrix":[[2.0,0.5],[0.5,1.0]]}"#);
        let back: MahalanobisModel = serde_json::from_str(&s).unwrap();
        assert_eq!(back, m);
        assert!(
            serde_json::from_str::<MahalanobisModel>(r#"{"matrix":[[1.0,0.0],[0.0,-1.0]]}"#)
                .is_err()
        );
    }
}

//! Estimating-function models `g(X; theta)` with analytic first and second
//! partial derivatives: the high-dimensional mean model, sparse linear
//! regression, and quadratic inference functions (QIF) for repeated measures
//! with two basis working-correlation matrices.

use std::io::BufRead;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::linalg::Mat;
use crate::scalar::Real;

#[derive(Debug, Error)]
pub enum DataError {
    #[error("dataset must have at least 2 observations, got {0}")]
    TooFewRows(usize),
    #[error("row {0} has length {1}, expected {2}")]
    RaggedRow(usize, usize, usize),
    #[error("non-finite value at row {0}, column {1}")]
    NonFinite(usize, usize),
    #[error("row {row}, column {col}: {msg}")]
    Parse { row: usize, col: usize, msg: String },
    #[error("empty dataset")]
    Empty,
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("theta has length {got}, model expects p = {expected}")]
    ThetaDim { got: usize, expected: usize },
    #[error("row has length {got}, model expects {expected}")]
    RowDim { got: usize, expected: usize },
    #[error("output buffer has length {got}, model expects r = {expected}")]
    OutDim { got: usize, expected: usize },
    #[error("QIF working-correlation parameter must lie in (-1, 1), got {0}")]
    InvalidQifRho(f64),
    #[error("model dimension p must be >= 1")]
    ZeroDim,
}

/// Flat row-major data store; each row is one observation whose layout the
/// owning model interprets.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Dataset<F> {
    n: usize,
    row_len: usize,
    values: Vec<F>,
}

impl<F: Real> Dataset<F> {
    pub fn from_rows(rows: Vec<Vec<F>>) -> Result<Self, DataError> {
        if rows.is_empty() {
            return Err(DataError::Empty);
        }
        if rows.len() < 2 {
            return Err(DataError::TooFewRows(rows.len()));
        }
        let row_len = rows[0].len();
        let mut values = Vec::with_capacity(rows.len() * row_len);
        for (i, row) in rows.iter().enumerate() {
            if row.len() != row_len {
                return Err(DataError::RaggedRow(i, row.len(), row_len));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() {
                    return Err(DataError::NonFinite(i, j));
                }
                values.push(v);
            }
        }
        Ok(Dataset { n: rows.len(), row_len, values })
    }

    /// One observation per line, comma-separated, no header.
    pub fn from_csv_reader<R: BufRead>(reader: R) -> Result<Self, DataError> {
        let mut rows = Vec::new();
        for (i, line) in reader.lines().enumerate() {
            let line = line?;
            let trimmed = line.trim();
            if trimmed.is_empty() {
                continue;
            }
            let mut row = Vec::new();
            for (j, field) in trimmed.split(',').enumerate() {
                let v: f64 = field.trim().parse().map_err(|e| DataError::Parse {
                    row: i,
                    col: j,
                    msg: format!("{e}"),
                })?;
                row.push(F::of(v));
            }
            rows.push(row);
        }
        Self::from_rows(rows)
    }

    pub fn from_csv_path(path: &Path) -> Result<Self, DataError> {
        let file = std::fs::File::open(path)?;
        Self::from_csv_reader(std::io::BufReader::new(file))
    }

    pub fn to_csv(&self) -> String {
        let mut out = String::new();
        for i in 0..self.n {
            let row = self.row(i);
            for (j, v) in row.iter().enumerate() {
                if j > 0 {
                    out.push(',');
                }
                out.push_str(&format!("{v:?}"));
            }
            out.push('\n');
        }
        out
    }

    #[inline]
    pub fn n(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn row_len(&self) -> usize {
        self.row_len
    }

    #[inline]
    pub fn row(&self, i: usize) -> &[F] {
        &self.values[i * self.row_len..(i + 1) * self.row_len]
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ModelKind {
    Mean,
    LinearRegression,
    Qif,
}

/// Immutable model definition; evaluation is pure.
#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct EstimatingModel<F> {
    pub kind: ModelKind,
    /// Parameter dimension.
    pub p: usize,
    /// Number of estimating equations.
    pub r: usize,
    /// Working-correlation parameter of the second QIF basis matrix.
    pub qif_rho: F,
}

/// Per-observation evaluation bundle: the estimating function, its first
/// partials, and the diagonal-in-k second partials.
#[derive(Debug, Clone)]
pub struct ModelJet<F> {
    pub g: Vec<F>,
    /// r x p first partials d g_j / d theta_k.
    pub dg: Mat<F>,
    /// r x p second partials d^2 g_j / d theta_k^2.
    pub d2g_diag: Mat<F>,
}

impl<F: Real> EstimatingModel<F> {
    pub fn mean(p: usize) -> Result<Self, ModelError> {
        if p == 0 {
            return Err(ModelError::ZeroDim);
        }
        Ok(EstimatingModel { kind: ModelKind::Mean, p, r: p, qif_rho: F::zero() })
    }

    pub fn linear_regression(p: usize) -> Result<Self, ModelError> {
        if p == 0 {
            return Err(ModelError::ZeroDim);
        }
        Ok(EstimatingModel { kind: ModelKind::LinearRegression, p, r: p, qif_rho: F::zero() })
    }

    /// QIF with two basis matrices (identity and compound symmetry), so
    /// `r = 2p`.
    pub fn qif(p: usize, rho: F) -> Result<Self, ModelError> {
        if p == 0 {
            return Err(ModelError::ZeroDim);
        }
        if !(rho > -F::one() && rho < F::one()) {
            return Err(ModelError::InvalidQifRho(rho.as_f64()));
        }
        Ok(EstimatingModel { kind: ModelKind::Qif, p, r: 2 * p, qif_rho: rho })
    }

    /// Expected flat row layout length for this model.
    pub fn expected_row_len(&self) -> usize {
        match self.kind {
            ModelKind::Mean => self.p,
            ModelKind::LinearRegression => 1 + self.p,
            ModelKind::Qif => 2 + 2 * self.p,
        }
    }

    fn check_dims(&self, row: &[F], theta: &[F]) -> Result<(), ModelError> {
        if theta.len() != self.p {
            return Err(ModelError::ThetaDim { got: theta.len(), expected: self.p });
        }
        let want = self.expected_row_len();
        if row.len() != want {
            return Err(ModelError::RowDim { got: row.len(), expected: want });
        }
        Ok(())
    }

    /// `g(X; theta)` written into `out` (length `r`).
    pub fn eval_g_into(&self, row: &[F], theta: &[F], out: &mut [F]) -> Result<(), ModelError> {
        self.check_dims(row, theta)?;
        if out.len() != self.r {
            return Err(ModelError::OutDim { got: out.len(), expected: self.r });
        }
        match self.kind {
            ModelKind::Mean => {
                for k in 0..self.p {
                    out[k] = row[k] - theta[k];
                }
            }
            ModelKind::LinearRegression => {
                let y = row[0];
                let z = &row[1..];
                let mut resid = y;
                for k in 0..self.p {
                    resid = resid - z[k] * theta[k];
                }
                for k in 0..self.p {
                    out[k] = z[k] * resid;
                }
            }
            ModelKind::Qif => {
                let p = self.p;
                let rho = self.qif_rho;
                let (y1, y2) = (row[0], row[1]);
                let z1 = &row[2..2 + p];
                let z2 = &row[2 + p..2 + 2 * p];
                let mut r1 = y1;
                let mut r2 = y2;
                for k in 0..p {
                    r1 = r1 - z1[k] * theta[k];
                    r2 = r2 - z2[k] * theta[k];
                }
                // basis 1: identity
                for k in 0..p {
                    out[k] = z1[k] * r1 + z2[k] * r2;
                }
                // basis 2: compound symmetry, diagonal 1, off-diagonal rho
                let m1 = r1 + rho * r2;
                let m2 = rho * r1 + r2;
                for k in 0..p {
                    out[p + k] = z1[k] * m1 + z2[k] * m2;
                }
            }
        }
        Ok(())
    }

    pub fn eval_g(&self, row: &[F], theta: &[F]) -> Result<Vec<F>, ModelError> {
        let mut out = vec![F::zero(); self.r];
        self.eval_g_into(row, theta, &mut out)?;
        Ok(out)
    }

    /// Column `k` of the first-partials matrix, i.e. `d g / d theta_k`,
    /// written into `out` (length `r`). All three models are linear in theta
    /// so the column does not depend on theta.
    pub fn eval_dg_column_into(
        &self,
        row: &[F],
        k: usize,
        out: &mut [F],
    ) -> Result<(), ModelError> {
        assert!(k < self.p, "coordinate index out of range");
        if out.len() != self.r {
            return Err(ModelError::OutDim { got: out.len(), expected: self.r });
        }
        let want = self.expected_row_len();
        if row.len() != want {
            return Err(ModelError::RowDim { got: row.len(), expected: want });
        }
        match self.kind {
            ModelKind::Mean => {
                for v in out.iter_mut() {
                    *v = F::zero();
                }
                out[k] = -F::one();
            }
            ModelKind::LinearRegression => {
                let z = &row[1..];
                let zk = z[k];
                for j in 0..self.p {
                    out[j] = -z[j] * zk;
                }
            }
            ModelKind::Qif => {
                let p = self.p;
                let rho = self.qif_rho;
                let z1 = &row[2..2 + p];
                let z2 = &row[2 + p..2 + 2 * p];
                let (a, b) = (z1[k], z2[k]);
                for j in 0..p {
                    out[j] = -(z1[j] * a + z2[j] * b);
                }
                let c1 = a + rho * b;
                let c2 = rho * a + b;
                for j in 0..p {
                    out[p + j] = -(z1[j] * c1 + z2[j] * c2);
                }
            }
        }
        Ok(())
    }

    /// True when some second partial `d^2 g / d theta_k^2` can be nonzero.
    /// Every supported model is linear in theta, so the solver may skip the
    /// curvature term of the outer Newton update when this is false.
    pub fn has_second_partials(&self) -> bool {
        false
    }

    /// Full per-observation jet. The second partials are identically zero for
    /// all three (theta-linear) models but are carried explicitly because the
    /// outer coordinate update consumes them.
    pub fn eval_jet(&self, row: &[F], theta: &[F]) -> Result<ModelJet<F>, ModelError> {
        self.check_dims(row, theta)?;
        let g = self.eval_g(row, theta)?;
        let mut dg = Mat::zeros(self.r, self.p);
        let mut col = vec![F::zero(); self.r];
        for k in 0..self.p {
            self.eval_dg_column_into(row, k, &mut col)?;
            for j in 0..self.r {
                *dg.at_mut(j, k) = col[j];
            }
        }
        let d2g_diag = Mat::zeros(self.r, self.p);
        Ok(ModelJet { g, dg, d2g_diag })
    }
}

/// Max absolute discrepancy between the analytic Jacobian and a central
/// finite difference with step `h`.
pub fn check_jet<F: Real>(
    model: &EstimatingModel<F>,
    row: &[F],
    theta: &[F],
    h: F,
) -> Result<F, ModelError> {
    assert!(h > F::zero());
    let jet = model.eval_jet(row, theta)?;
    let mut worst = F::zero();
    let mut th = theta.to_vec();
    for k in 0..model.p {
        let orig = th[k];
        th[k] = orig + h;
        let g_plus = model.eval_g(row, &th)?;
        th[k] = orig - h;
        let g_minus = model.eval_g(row, &th)?;
        th[k] = orig;
        for j in 0..model.r {
            let fd = (g_plus[j] - g_minus[j]) / (F::of(2.0) * h);
            let err = (fd - jet.dg.at(j, k)).abs();
            if err > worst {
                worst = err;
            }
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn mean_is_exact_root_at_data() {
        let m = EstimatingModel::<f64>::mean(2).unwrap();
        let g = m.eval_g(&[5.0, 4.0], &[5.0, 4.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn linear_regression_zero_residual() {
        let m = EstimatingModel::<f64>::linear_regression(2).unwrap();
        let g = m.eval_g(&[3.0, 1.0, 2.0], &[1.0, 1.0]).unwrap();
        assert_eq!(g, vec![0.0, 0.0]);
    }

    #[test]
    fn qif_blocks_reduce_with_identity_bases() {
        let m = EstimatingModel::<f64>::qif(1, 0.0).unwrap();
        let g = m.eval_g(&[2.0, 2.0, 1.0, 1.0], &[1.0]).unwrap();
        assert_eq!(g, vec![2.0, 2.0]);
    }

    #[test]
    fn mean_jacobian_is_minus_identity() {
        let m = EstimatingModel::<f64>::mean(2).unwrap();
        let jet = m.eval_jet(&[1.0, 2.0], &[0.5, 0.5]).unwrap();
        assert_eq!(jet.dg.at(0, 0), -1.0);
        assert_eq!(jet.dg.at(1, 1), -1.0);
        assert_eq!(jet.dg.at(0, 1), 0.0);
    }

    #[test]
    fn regression_jacobian_is_minus_outer_product() {
        let m = EstimatingModel::<f64>::linear_regression(2).unwrap();
        let jet = m.eval_jet(&[3.0, 1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!(jet.dg.at(0, 0), -1.0);
        assert_eq!(jet.dg.at(0, 1), -2.0);
        assert_eq!(jet.dg.at(1, 0), -2.0);
        assert_eq!(jet.dg.at(1, 1), -4.0);
    }

    #[test]
    fn second_partials_vanish_for_all_models() {
        let mean = EstimatingModel::<f64>::mean(2).unwrap();
        let jet = mean.eval_jet(&[1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert!(jet.d2g_diag.data.iter().all(|&v| v == 0.0));
        let qif = EstimatingModel::<f64>::qif(2, 0.7).unwrap();
        let jet = qif.eval_jet(&[1.0, 2.0, 0.1, 0.2, 0.3, 0.4], &[0.0, 0.0]).unwrap();
        assert!(jet.d2g_diag.data.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn qif_first_block_is_stacked_independence_gee() {
        // Block 1 (identity basis) must equal the per-repeat regression
        // estimating function summed over the two repeats.
        let p = 3;
        let qif = EstimatingModel::<f64>::qif(p, 0.7).unwrap();
        let lin = EstimatingModel::<f64>::linear_regression(p).unwrap();
        let row = [1.4, -0.3, 0.5, -1.2, 0.8, 0.2, 1.1, -0.7];
        let theta = [0.3, -0.4, 0.9];
        let g = qif.eval_g(&row, &theta).unwrap();
        let rep1: Vec<f64> =
            [row[0], row[2], row[3], row[4]].to_vec();
        let rep2: Vec<f64> = [row[1], row[5], row[6], row[7]].to_vec();
        let g1 = lin.eval_g(&rep1, &theta).unwrap();
        let g2 = lin.eval_g(&rep2, &theta).unwrap();
        for k in 0..p {
            assert!((g[k] - (g1[k] + g2[k])).abs() < 1e-12);
        }
    }

    #[test]
    fn finite_difference_check_all_models() {
        let mut rng = crate::simlab::SplitMix64::new(7);
        let models: Vec<EstimatingModel<f64>> = vec![
            EstimatingModel::mean(3).unwrap(),
            EstimatingModel::linear_regression(3).unwrap(),
            EstimatingModel::qif(3, 0.7).unwrap(),
        ];
        for model in &models {
            for _ in 0..100 {
                let row: Vec<f64> =
                    (0..model.expected_row_len()).map(|_| rng.next_normal()).collect();
                let theta: Vec<f64> = (0..model.p).map(|_| rng.next_normal()).collect();
                let err = check_jet(model, &row, &theta, 1e-5).unwrap();
                let tol = if model.kind == ModelKind::Mean { 1e-8 } else { 1e-6 };
                assert!(err <= tol, "{:?}: {}", model.kind, err);
            }
        }
    }

    #[test]
    fn dataset_validation() {
        assert!(matches!(
            Dataset::<f64>::from_rows(vec![vec![1.0]]),
            Err(DataError::TooFewRows(1))
        ));
        assert!(matches!(
            Dataset::<f64>::from_rows(vec![vec![1.0, 2.0], vec![1.0]]),
            Err(DataError::RaggedRow(1, 1, 2))
        ));
        assert!(matches!(
            Dataset::<f64>::from_rows(vec![vec![1.0], vec![f64::NAN]]),
            Err(DataError::NonFinite(1, 0))
        ));
    }

    #[test]
    fn csv_round_trip() {
        let d = Dataset::<f64>::from_rows(vec![vec![1.0, 2.5], vec![-0.5, 3.0]]).unwrap();
        let csv = d.to_csv();
        let d2 = Dataset::<f64>::from_csv_reader(csv.as_bytes()).unwrap();
        assert_eq!(d.row(1), d2.row(1));
    }
}

//! Numerical primitives: QR least squares, stratum partialling, symmetric
//! eigendecomposition and inverse square roots. Moments use the 1/n convention.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative threshold on the R diagonal of the (column-equilibrated) QR factor.
pub const RANK_TOL: f64 = 1e-10;
/// Eigenvalues below `PSD_FLOOR * ||A||` make an inverse square root unusable.
pub const PSD_FLOOR: f64 = 1e-12;
/// Eigenvalues below `-NEG_EIG_TOL * ||A||` are treated as genuinely negative.
pub const NEG_EIG_TOL: f64 = 1e-10;
/// Iteration budget for the symmetric eigen solver.
pub const EIGEN_MAX_ITER: usize = 10_000;

/// Coefficients and per-unit residuals of a least-squares fit.
#[derive(Debug, Clone)]
pub struct LsFit {
    /// Intercept first (when requested), then one entry per predictor column.
    pub coefficients: DVector<f64>,
    pub residuals: DVector<f64>,
}

/// Coefficients and residuals for several responses sharing one design.
#[derive(Debug, Clone)]
pub struct LsFitMulti {
    /// P x R: column r holds the coefficients for response r.
    pub coefficients: DMatrix<f64>,
    /// n x R residual matrix.
    pub residuals: DMatrix<f64>,
}

/// Centered (and optionally weighted) second moments of one study.
#[derive(Debug, Clone, Default)]
pub struct MomentSet {
    pub s_yy: DMatrix<f64>,
    pub s_yz: DVector<f64>,
    pub s_zz: f64,
    pub y_mean: DVector<f64>,
    pub z_mean: f64,
}

impl MomentSet {
    /// Unweighted 1/n moments of (z, y).
    pub fn unweighted(z: &DVector<f64>, y: &DMatrix<f64>) -> Self {
        let n = z.len() as f64;
        let z_mean = z.mean();
        let y_mean = column_means(y);
        let yc = center(y, &y_mean);
        let zc = z.add_scalar(-z_mean);
        MomentSet { s_yy: yc.tr_mul(&yc) / n, s_yz: yc.tr_mul(&zc) / n, s_zz: zc.dot(&zc) / n, y_mean, z_mean }
    }
}

/// Prepend a column of ones.
pub fn with_intercept(m: &DMatrix<f64>) -> DMatrix<f64> {
    let n = m.nrows();
    let mut out = DMatrix::from_element(n, m.ncols() + 1, 1.0);
    out.view_mut((0, 1), (n, m.ncols())).copy_from(m);
    out
}

/// Horizontal concatenation.
pub fn hcat(parts: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let n = parts.first().map_or(0, |p| p.nrows());
    let cols: usize = parts.iter().map(|p| p.ncols()).sum();
    let mut out = DMatrix::zeros(n, cols);
    let mut at = 0;
    for p in parts {
        out.view_mut((0, at), (n, p.ncols())).copy_from(*p);
        at += p.ncols();
    }
    out
}

/// Column means.
pub fn column_means(m: &DMatrix<f64>) -> DVector<f64> {
    let n = m.nrows() as f64;
    DVector::from_iterator(m.ncols(), m.column_iter().map(|c| c.sum() / n))
}

/// Subtract `means` from every row.
pub fn center(m: &DMatrix<f64>, means: &DVector<f64>) -> DMatrix<f64> {
    let mut out = m.clone();
    for (j, mut col) in out.column_iter_mut().enumerate() {
        col.add_scalar_mut(-means[j]);
    }
    out
}

/// n^{-1} sum_i w_i r_i r_i^T for the rows r_i of `rows`.
pub fn weighted_mean_outer(rows: &DMatrix<f64>, weights: &DVector<f64>) -> DMatrix<f64> {
    let n = rows.nrows() as f64;
    let mut scaled = rows.clone();
    for (i, mut row) in scaled.row_iter_mut().enumerate() {
        row *= weights[i];
    }
    let mut out = rows.tr_mul(&scaled) / n;
    symmetrize(&mut out);
    out
}

/// n^{-1} sum_i r_i r_i^T.
pub fn mean_outer(rows: &DMatrix<f64>) -> DMatrix<f64> {
    let n = rows.nrows() as f64;
    let mut out = rows.tr_mul(rows) / n;
    symmetrize(&mut out);
    out
}

/// Replace `m` by (m + m^T) / 2.
pub fn symmetrize(m: &mut DMatrix<f64>) {
    let t = m.transpose();
    *m += t;
    *m *= 0.5;
}

/// Least squares of several responses on one design through Householder QR
/// of the column-equilibrated design.
pub fn lstsq(design: &DMatrix<f64>, responses: &DMatrix<f64>) -> Result<LsFitMulti> {
    let (n, p) = design.shape();
    if responses.nrows() != n {
        return Err(Error::DimensionMismatch(format!("design has {n} rows, response has {}", responses.nrows())));
    }
    if p == 0 {
        return Ok(LsFitMulti { coefficients: DMatrix::zeros(0, responses.ncols()), residuals: responses.clone() });
    }
    if p > n {
        return Err(Error::RankDeficient { columns: (n..p).collect() });
    }
    let norms: Vec<f64> = design.column_iter().map(|c| c.norm()).collect();
    let zero_cols: Vec<usize> = (0..p).filter(|&j| !(norms[j] > 0.0)).collect();
    if !zero_cols.is_empty() {
        return Err(Error::RankDeficient { columns: zero_cols });
    }
    let mut scaled = design.clone();
    for (j, mut col) in scaled.column_iter_mut().enumerate() {
        col /= norms[j];
    }
    let qr = scaled.qr();
    let r = qr.r();
    let diag: Vec<f64> = (0..p).map(|j| r[(j, j)].abs()).collect();
    let dmax = diag.iter().cloned().fold(0.0, f64::max);
    let small: Vec<usize> = (0..p).filter(|&j| diag[j] < RANK_TOL * dmax).collect();
    if !small.is_empty() {
        return Err(Error::RankDeficient { columns: small });
    }
    let mut qty = responses.clone();
    qr.q_tr_mul(&mut qty);
    let top = qty.rows(0, p).into_owned();
    let mut coef = r.solve_upper_triangular(&top).ok_or(Error::RankDeficient { columns: vec![] })?;
    for (j, mut row) in coef.row_iter_mut().enumerate() {
        row /= norms[j];
    }
    let residuals = responses - design * &coef;
    Ok(LsFitMulti { coefficients: coef, residuals })
}

/// Ordinary least squares of one response on `predictors` (plus a leading
/// intercept when `intercept` is true).
pub fn ols(response: &DVector<f64>, predictors: &DMatrix<f64>, intercept: bool) -> Result<LsFit> {
    let design = if intercept { with_intercept(predictors) } else { predictors.clone() };
    let y = DMatrix::from_column_slice(response.len(), 1, response.as_slice());
    let fit = lstsq(&design, &y)?;
    Ok(LsFit { coefficients: fit.coefficients.column(0).into_owned(), residuals: fit.residuals.column(0).into_owned() })
}

/// Weighted least squares with strictly positive weights.
pub fn wls(
    response: &DVector<f64>,
    predictors: &DMatrix<f64>,
    weights: &DVector<f64>,
    intercept: bool,
) -> Result<LsFit> {
    let y = DMatrix::from_column_slice(response.len(), 1, response.as_slice());
    let fit = wls_multi(&y, predictors, weights, intercept)?;
    Ok(LsFit { coefficients: fit.coefficients.column(0).into_owned(), residuals: fit.residuals.column(0).into_owned() })
}

/// Component-wise WLS of every response column on one design.
pub fn wls_multi(
    responses: &DMatrix<f64>,
    predictors: &DMatrix<f64>,
    weights: &DVector<f64>,
    intercept: bool,
) -> Result<LsFitMulti> {
    check_weights(weights)?;
    let design = if intercept { with_intercept(predictors) } else { predictors.clone() };
    let sw = weights.map(f64::sqrt);
    let mut dw = design.clone();
    let mut yw = responses.clone();
    for i in 0..design.nrows() {
        dw.row_mut(i).scale_mut(sw[i]);
        yw.row_mut(i).scale_mut(sw[i]);
    }
    let fit = lstsq(&dw, &yw)?;
    let residuals = responses - &design * &fit.coefficients;
    Ok(LsFitMulti { coefficients: fit.coefficients, residuals })
}

/// Reject non-positive or non-finite weights.
pub fn check_weights(weights: &DVector<f64>) -> Result<()> {
    match weights.iter().position(|w| !(*w > 0.0) || !w.is_finite()) {
        Some(index) => Err(Error::NonPositiveWeight { index }),
        None => Ok(()),
    }
}

/// Stratum sizes for dense labels 0..S-1.
pub fn stratum_counts(labels: &[usize], s: usize) -> Vec<usize> {
    let mut counts = vec![0usize; s];
    for &l in labels {
        counts[l] += 1;
    }
    counts
}

/// Within-stratum means (S x P) for dense labels 0..S-1.
pub fn stratum_means(columns: &DMatrix<f64>, labels: &[usize], s: usize) -> DMatrix<f64> {
    let counts = stratum_counts(labels, s);
    let mut sums = DMatrix::zeros(s, columns.ncols());
    for (i, &l) in labels.iter().enumerate() {
        let mut row = sums.row_mut(l);
        row += columns.row(i);
    }
    for (k, mut row) in sums.row_iter_mut().enumerate() {
        row /= counts[k].max(1) as f64;
    }
    sums
}

/// Residualize every column on the stratum indicators (within-stratum centering).
pub fn partial_out_strata(columns: &DMatrix<f64>, labels: &[usize]) -> DMatrix<f64> {
    let s = labels.iter().copied().max().map_or(0, |m| m + 1);
    let means = stratum_means(columns, labels, s);
    let mut out = columns.clone();
    for (i, &l) in labels.iter().enumerate() {
        let mut row = out.row_mut(i);
        row -= means.row(l);
    }
    out
}

/// Eigenvalues in descending order with matching orthonormal eigenvectors.
#[derive(Debug, Clone)]
pub struct EigenSpectrum {
    pub lambdas: Vec<f64>,
    /// Column j is the eigenvector for `lambdas[j]`.
    pub basis: DMatrix<f64>,
}

impl EigenSpectrum {
    /// Q diag(f(lambda)) Q^T.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> DMatrix<f64> {
        let d = DVector::from_iterator(self.lambdas.len(), self.lambdas.iter().map(|&l| f(l)));
        let mut scaled = self.basis.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= d[j];
        }
        let mut out = scaled * self.basis.transpose();
        symmetrize(&mut out);
        out
    }
}

/// Symmetric eigendecomposition of (A + A^T) / 2.
pub fn sym_eigen(matrix: &DMatrix<f64>) -> Result<EigenSpectrum> {
    if !matrix.is_square() {
        return Err(Error::DimensionMismatch("sym_eigen needs a square matrix".into()));
    }
    let mut a = matrix.clone();
    symmetrize(&mut a);
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::NoConvergence { iterations: 0 });
    }
    let eig = SymmetricEigen::try_new(a, f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or(Error::NoConvergence { iterations: EIGEN_MAX_ITER })?;
    let mut order: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    order.sort_by(|&i, &j| eig.eigenvalues[j].total_cmp(&eig.eigenvalues[i]));
    let lambdas = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let basis =
        DMatrix::from_columns(&order.iter().map(|&i| eig.eigenvectors.column(i).into_owned()).collect::<Vec<_>>());
    Ok(EigenSpectrum { lambdas, basis })
}

/// Symmetric M with M A M = I for a positive definite A.
pub fn inv_sqrt_psd(matrix: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let eig = sym_eigen(matrix)?;
    let norm = eig.lambdas.iter().fold(0.0f64, |m, l| m.max(l.abs()));
    let min = eig.lambdas.last().copied().unwrap_or(0.0);
    if norm == 0.0 {
        return Err(Error::NearSingular { min_eigenvalue: 0.0 });
    }
    if min < -NEG_EIG_TOL * norm {
        return Err(Error::NegativeEigenvalue { value: min });
    }
    if min < PSD_FLOOR * norm {
        return Err(Error::NearSingular { min_eigenvalue: min });
    }
    Ok(eig.reconstruct_with(|l| 1.0 / l.sqrt()))
}

/// Solve A x = b for square A through QR with the rank check of [`lstsq`].
/// Rank failures surface as `NearSingular`.
pub fn solve(a: &DMatrix<f64>, b: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    if !a.is_square() {
        return Err(Error::DimensionMismatch("solve needs a square matrix".into()));
    }
    match lstsq(a, b) {
        Ok(fit) => Ok(fit.coefficients),
        Err(Error::RankDeficient { .. }) => {
            let min = sym_eigen(a).ok().and_then(|e| e.lambdas.last().copied()).unwrap_or(0.0);
            Err(Error::NearSingular { min_eigenvalue: min })
        }
        Err(e) => Err(e),
    }
}

/// Solve A x = b for a single right-hand side.
pub fn solve_vec(a: &DMatrix<f64>, b: &DVector<f64>) -> Result<DVector<f64>> {
    let rhs = DMatrix::from_column_slice(b.len(), 1, b.as_slice());
    Ok(solve(a, &rhs)?.column(0).into_owned())
}

/// ||a - b|| / max(||a||, ||b||), zero when both vanish.
pub fn rel_err(a: &DVector<f64>, b: &DVector<f64>) -> f64 {
    let d = (a - b).norm();
    let s = a.norm().max(b.norm());
    if s == 0.0 {
        d
    } else {
        d / s
    }
}

/// Scalar counterpart of [`rel_err`].
pub fn rel_err_scalar(a: f64, b: f64) -> f64 {
    let s = a.abs().max(b.abs());
    if s == 0.0 {
        (a - b).abs()
    } else {
        (a - b).abs() / s
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn ols_hand_example() {
        let y = DVector::from_vec(vec![2.0, 4.0, 1.0, 3.0]);
        let z = DMatrix::from_column_slice(4, 1, &[1.0, 1.0, 0.0, 0.0]);
        let fit = ols(&y, &z, true).unwrap();
        assert!((fit.coefficients[0] - 2.0).abs() < 1e-12);
        assert!((fit.coefficients[1] - 1.0).abs() < 1e-12);
    }

    #[test]
    fn duplicated_column_is_rank_deficient() {
        let x = DMatrix::from_column_slice(4, 2, &[1.0, 2.0, 3.0, 5.0, 1.0, 2.0, 3.0, 5.0]);
        let y = DVector::from_vec(vec![1.0, 0.0, 2.0, 1.0]);
        assert!(matches!(ols(&y, &x, true), Err(Error::RankDeficient { .. })));
    }

    #[test]
    fn inv_sqrt_scalar() {
        let a = DMatrix::from_element(1, 1, 1.25);
        let m = inv_sqrt_psd(&a).unwrap();
        assert!((m[(0, 0)] - 0.894_427_190_999_915_9).abs() < 1e-12);
    }

    #[test]
    fn inv_sqrt_rejects_negative() {
        let a = DMatrix::from_row_slice(2, 2, &[1.0, 0.0, 0.0, -0.5]);
        assert!(matches!(inv_sqrt_psd(&a), Err(Error::NegativeEigenvalue { .. })));
    }
}

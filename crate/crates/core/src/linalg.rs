//! Dense kernels shared by both estimation stages: annihilator projections,
//! covariance PCA, factor-count selection and least squares.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative singular-value tolerance below which a basis is rank deficient.
pub const RANK_TOL: f64 = 1e-10;
/// Eigenvalues below this fraction of the largest one are treated as zero.
pub const EIGEN_ZERO_TOL: f64 = 1e-12;
/// Maximum absolute asymmetry accepted by [`extract_factors`].
pub const SYMMETRY_TOL: f64 = 1e-8;

/// Annihilator `M = I - A(A'A)^{-1}A'` together with its source basis.
#[derive(Clone, Debug)]
pub struct Projector {
    source: DMatrix<f64>,
    basis: DMatrix<f64>,
    annihilator: DMatrix<f64>,
}

impl Projector {
    pub fn source(&self) -> &DMatrix<f64> {
        &self.source
    }

    /// Orthonormal basis of the column space of the source.
    pub fn basis(&self) -> &DMatrix<f64> {
        &self.basis
    }

    pub fn annihilator(&self) -> &DMatrix<f64> {
        &self.annihilator
    }

    pub fn rank(&self) -> usize {
        self.basis.ncols()
    }

    /// `M x` computed as `x - Q(Q'x)`, without forming the T×T matrix product.
    pub fn apply(&self, x: &DMatrix<f64>) -> DMatrix<f64> {
        residualize(&self.basis, x)
    }

    pub fn apply_vec(&self, x: &DVector<f64>) -> DVector<f64> {
        residualize_vec(&self.basis, x)
    }
}

/// Orthonormal basis for the columns of `a`, rejecting rank-deficient input.
pub fn orthonormal_basis(a: &DMatrix<f64>) -> Result<DMatrix<f64>> {
    let (t, k) = a.shape();
    if k >= t {
        return Err(Error::DimensionMismatch(format!(
            "basis has {k} columns but only {t} rows"
        )));
    }
    if k == 0 {
        return Ok(DMatrix::zeros(t, 0));
    }
    if a.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("basis contains non-finite entries".into()));
    }
    let sv = a.clone().singular_values();
    let smax = sv.max();
    let smin = sv.min();
    let ratio = if smax > 0.0 { smin / smax } else { 0.0 };
    if ratio <= RANK_TOL {
        return Err(Error::RankDeficient { ratio });
    }
    Ok(a.clone().qr().q())
}

/// Builds the annihilator of the column space of `basis` (T×K, K < T).
pub fn annihilator(basis: &DMatrix<f64>) -> Result<Projector> {
    let t = basis.nrows();
    let q = orthonormal_basis(basis)?;
    let mut m = DMatrix::identity(t, t);
    m -= &q * q.transpose();
    // Exact symmetry regardless of rounding in the product.
    let m = (&m + m.transpose()) * 0.5;
    Ok(Projector {
        source: basis.clone(),
        basis: q,
        annihilator: m,
    })
}

/// `x - Q(Q'x)` for an orthonormal `q`.
pub fn residualize(q: &DMatrix<f64>, x: &DMatrix<f64>) -> DMatrix<f64> {
    if q.ncols() == 0 {
        return x.clone();
    }
    let coef = q.tr_mul(x);
    x - q * coef
}

pub fn residualize_vec(q: &DMatrix<f64>, x: &DVector<f64>) -> DVector<f64> {
    if q.ncols() == 0 {
        return x.clone();
    }
    let coef = q.tr_mul(x);
    x - q * coef
}

/// Leading principal components of a T×T covariance matrix.
#[derive(Clone, Debug)]
pub struct FactorEstimate {
    /// T×k factor matrix normalised so that `F'F/T = I`.
    pub factors: DMatrix<f64>,
    /// The k leading eigenvalues, descending.
    pub eigenvalues: Vec<f64>,
    /// `λ_j / Σ λ` for each retained factor.
    pub explained_share: Vec<f64>,
    /// Full clipped spectrum, descending.
    pub spectrum: Vec<f64>,
}

impl FactorEstimate {
    pub fn k(&self) -> usize {
        self.factors.ncols()
    }

    /// A factor set with no columns, used when defactoring is disabled.
    pub fn empty(t: usize) -> Self {
        Self {
            factors: DMatrix::zeros(t, 0),
            eigenvalues: Vec::new(),
            explained_share: Vec::new(),
            spectrum: Vec::new(),
        }
    }

    /// Orthonormal basis `F/√T` of the factor space.
    pub fn orthonormal(&self) -> DMatrix<f64> {
        let t = self.factors.nrows() as f64;
        &self.factors / t.sqrt()
    }
}

/// Symmetric eigendecomposition with eigenpairs sorted by descending value.
pub fn sorted_eigen(sym: &DMatrix<f64>) -> (Vec<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(sym.clone());
    let n = eig.eigenvalues.len();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]));
    let values = order.iter().map(|&i| eig.eigenvalues[i]).collect();
    let mut vectors = DMatrix::zeros(sym.nrows(), n);
    for (dst, &src) in order.iter().enumerate() {
        vectors.set_column(dst, &eig.eigenvectors.column(src));
    }
    (values, vectors)
}

fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0_f64;
    for i in 0..n {
        for j in (i + 1)..n {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

/// Extracts `k` factors from a T×T covariance matrix.
pub fn extract_factors(covariance: &DMatrix<f64>, k: usize) -> Result<FactorEstimate> {
    let (t, c) = covariance.shape();
    if t != c {
        return Err(Error::DimensionMismatch(format!(
            "covariance must be square, got {t}x{c}"
        )));
    }
    if covariance.iter().any(|v| !v.is_finite()) {
        return Err(Error::Validation("covariance contains non-finite entries".into()));
    }
    let asym = max_asymmetry(covariance);
    if asym > SYMMETRY_TOL {
        return Err(Error::NotSymmetric { max_asymmetry: asym });
    }
    if k == 0 || k >= t {
        return Err(Error::KTooLarge {
            k,
            available: t.saturating_sub(1),
        });
    }
    let sym = (covariance + covariance.transpose()) * 0.5;
    let (mut values, vectors) = sorted_eigen(&sym);
    let lmax = values[0].max(0.0);
    for v in values.iter_mut() {
        if *v < EIGEN_ZERO_TOL * lmax || *v < 0.0 {
            *v = 0.0;
        }
    }
    let total: f64 = values.iter().sum();
    let scale = (t as f64).sqrt();
    let mut factors = DMatrix::zeros(t, k);
    for j in 0..k {
        let col = vectors.column(j);
        let pivot = col.iamax();
        let sign = if col[pivot] < 0.0 { -scale } else { scale };
        factors.set_column(j, &(col * sign));
    }
    let explained_share = values[..k]
        .iter()
        .map(|v| if total > 0.0 { v / total } else { 0.0 })
        .collect();
    Ok(FactorEstimate {
        factors,
        eigenvalues: values[..k].to_vec(),
        explained_share,
        spectrum: values,
    })
}

/// `(1/(N·T)) Σ_i W_i W_i'` over T×K blocks.
pub fn pooled_covariance(blocks: &[DMatrix<f64>]) -> Result<DMatrix<f64>> {
    let first = blocks
        .first()
        .ok_or_else(|| Error::Validation("no blocks to pool".into()))?;
    let t = first.nrows();
    let width: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut stacked = DMatrix::zeros(t, width);
    let mut col = 0;
    for b in blocks {
        if b.nrows() != t {
            return Err(Error::DimensionMismatch(format!(
                "block has {} rows, expected {t}",
                b.nrows()
            )));
        }
        stacked.columns_mut(col, b.ncols()).copy_from(b);
        col += b.ncols();
    }
    let scale = 1.0 / (blocks.len() as f64 * t as f64);
    let mut cov = &stacked * stacked.transpose() * scale;
    cov = (&cov + cov.transpose()) * 0.5;
    Ok(cov)
}

/// Number of factors maximising the ratio of adjacent eigenvalues.
pub fn eigenvalue_ratio_count(eigenvalues: &[f64], k_max: usize) -> Result<usize> {
    if k_max == 0 || eigenvalues.len() <= k_max {
        return Err(Error::EmptySpectrum);
    }
    let mut best_k = 1;
    let mut best = f64::NEG_INFINITY;
    for k in 1..=k_max {
        let (num, den) = (eigenvalues[k - 1], eigenvalues[k]);
        let ratio = if num <= 0.0 {
            0.0
        } else if den <= 0.0 {
            f64::INFINITY
        } else {
            num / den
        };
        if ratio > best {
            best = ratio;
            best_k = k;
        }
    }
    Ok(best_k)
}

/// Condition number of a symmetric positive semi-definite matrix.
pub fn spd_condition(m: &DMatrix<f64>) -> f64 {
    let eig = SymmetricEigen::new((m + m.transpose()) * 0.5);
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Ordinary least squares with classical and HC1 covariances.
#[derive(Clone, Debug)]
pub struct OlsFit {
    pub coef: DVector<f64>,
    pub residuals: DVector<f64>,
    pub xtx_inv: DMatrix<f64>,
    pub cov_hc1: DMatrix<f64>,
    pub sigma2: f64,
}

impl OlsFit {
    pub fn stderr_hc1(&self) -> DVector<f64> {
        self.cov_hc1.diagonal().map(|v| v.max(0.0).sqrt())
    }

    pub fn stderr_classical(&self) -> DVector<f64> {
        self.xtx_inv.diagonal().map(|v| (v * self.sigma2).max(0.0).sqrt())
    }

    pub fn r_squared(&self, y: &DVector<f64>) -> f64 {
        let mean = y.mean();
        let tss: f64 = y.iter().map(|v| (v - mean).powi(2)).sum();
        if tss == 0.0 {
            return 0.0;
        }
        1.0 - self.residuals.norm_squared() / tss
    }
}

/// Least squares of `y` on `x` through a QR factorisation.
pub fn ols(y: &DVector<f64>, x: &DMatrix<f64>) -> Result<OlsFit> {
    let (t, k) = x.shape();
    if y.len() != t {
        return Err(Error::DimensionMismatch(format!(
            "outcome has {} rows, design has {t}",
            y.len()
        )));
    }
    if t <= k {
        return Err(Error::DegreesOfFreedomExhausted {
            observations: t,
            parameters: k,
        });
    }
    let qr = x.clone().qr();
    let r = qr.r();
    let dmax = r.diagonal().amax();
    if dmax == 0.0 || r.diagonal().iter().any(|d| d.abs() <= RANK_TOL * dmax) {
        return Err(Error::RankDeficientDesign);
    }
    let q = qr.q();
    let qty = q.tr_mul(y);
    let coef = r
        .solve_upper_triangular(&qty)
        .ok_or(Error::RankDeficientDesign)?;
    let r_inv = r
        .solve_upper_triangular(&DMatrix::identity(k, k))
        .ok_or(Error::RankDeficientDesign)?;
    let xtx_inv = &r_inv * r_inv.transpose();
    let residuals = y - x * &coef;
    let df = (t - k) as f64;
    let sigma2 = residuals.norm_squared() / df;
    let mut meat = DMatrix::zeros(k, k);
    for (i, row) in x.row_iter().enumerate() {
        let e2 = residuals[i] * residuals[i];
        meat.ger(e2, &row.transpose(), &row.transpose(), 1.0);
    }
    let mut cov_hc1 = &xtx_inv * meat * &xtx_inv * (t as f64 / df);
    cov_hc1 = (&cov_hc1 + cov_hc1.transpose()) * 0.5;
    Ok(OlsFit {
        coef,
        residuals,
        xtx_inv,
        cov_hc1,
        sigma2,
    })
}

/// Prepends a column of ones.
pub fn with_intercept(x: &DMatrix<f64>) -> DMatrix<f64> {
    x.clone().insert_column(0, 1.0)
}

/// Selects the listed columns of `x` in order.
pub fn select_columns(x: &DMatrix<f64>, cols: &[usize]) -> DMatrix<f64> {
    let mut out = DMatrix::zeros(x.nrows(), cols.len());
    for (dst, &src) in cols.iter().enumerate() {
        out.set_column(dst, &x.column(src));
    }
    out
}

/// Horizontal concatenation of blocks that share a row count.
pub fn hstack(blocks: &[&DMatrix<f64>]) -> DMatrix<f64> {
    let rows = blocks.first().map(|b| b.nrows()).unwrap_or(0);
    let cols: usize = blocks.iter().map(|b| b.ncols()).sum();
    let mut out = DMatrix::zeros(rows, cols);
    let mut at = 0;
    for b in blocks {
        debug_assert_eq!(b.nrows(), rows);
        out.columns_mut(at, b.ncols()).copy_from(*b);
        at += b.ncols();
    }
    out
}

/// Sample Pearson correlation.
pub fn correlation(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len().min(b.len()) as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    if saa == 0.0 || sbb == 0.0 {
        return 0.0;
    }
    sab / (saa * sbb).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    #[test]
    fn demeaning_matrix_for_two_periods() {
        let p = annihilator(&DMatrix::from_element(2, 1, 1.0)).unwrap();
        let expected = DMatrix::from_row_slice(2, 2, &[0.5, -0.5, -0.5, 0.5]);
        assert_abs_diff_eq!(p.annihilator(), &expected, epsilon = 1e-12);
    }

    #[test]
    fn orthonormal_basis_gives_identity_minus_qqt() {
        let q = DMatrix::from_row_slice(3, 1, &[1.0, 0.0, 0.0]);
        let p = annihilator(&q).unwrap();
        let expected = DMatrix::from_diagonal(&DVector::from_vec(vec![0.0, 1.0, 1.0]));
        assert_abs_diff_eq!(p.annihilator(), &expected, epsilon = 1e-12);
        assert!((p.annihilator() * &q).amax() < 1e-12);
    }

    #[test]
    fn rank_deficient_and_wide_bases_are_rejected() {
        let a = DMatrix::from_row_slice(3, 2, &[1.0, 2.0, 1.0, 2.0, 1.0, 2.0]);
        assert!(matches!(annihilator(&a), Err(Error::RankDeficient { .. })));
        let wide = DMatrix::from_element(2, 2, 1.0);
        assert!(matches!(annihilator(&wide), Err(Error::DimensionMismatch(_))));
    }

    #[test]
    fn diagonal_covariance_factor() {
        let cov = DMatrix::from_diagonal(&DVector::from_vec(vec![2.0, 1.0]));
        let f = extract_factors(&cov, 1).unwrap();
        assert_abs_diff_eq!(f.eigenvalues[0], 2.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.explained_share[0], 2.0 / 3.0, epsilon = 1e-12);
        assert_abs_diff_eq!(f.factors[(0, 0)], 2f64.sqrt(), epsilon = 1e-12);
        assert_abs_diff_eq!(f.factors[(1, 0)], 0.0, epsilon = 1e-12);
    }

    #[test]
    fn factor_errors() {
        let asym = DMatrix::from_row_slice(2, 2, &[1.0, 0.1, 0.0, 1.0]);
        assert!(matches!(extract_factors(&asym, 1), Err(Error::NotSymmetric { .. })));
        let cov = DMatrix::<f64>::identity(3, 3);
        assert!(matches!(extract_factors(&cov, 3), Err(Error::KTooLarge { .. })));
        assert!(matches!(extract_factors(&cov, 0), Err(Error::KTooLarge { .. })));
    }

    #[test]
    fn rank_one_panel_is_fully_explained() {
        let g = DVector::from_fn(20, |t, _| ((t as f64) * 0.7).sin());
        let blocks: Vec<DMatrix<f64>> = (0..5)
            .map(|i| DMatrix::from_column_slice(20, 1, (&g * (1.0 + i as f64)).as_slice()))
            .collect();
        let cov = pooled_covariance(&blocks).unwrap();
        let f = extract_factors(&cov, 1).unwrap();
        assert_abs_diff_eq!(f.explained_share[0], 1.0, epsilon = 1e-8);
    }

    #[test]
    fn eigenvalue_ratio_examples() {
        assert_eq!(eigenvalue_ratio_count(&[10.0, 5.0, 0.1, 0.05], 3).unwrap(), 2);
        assert_eq!(eigenvalue_ratio_count(&[9.0, 0.1, 0.09], 2).unwrap(), 1);
        assert!(matches!(
            eigenvalue_ratio_count(&[1.0, 0.5], 2),
            Err(Error::EmptySpectrum)
        ));
        // Equal ratios resolve to the smaller count.
        assert_eq!(eigenvalue_ratio_count(&[8.0, 4.0, 2.0, 1.0], 3).unwrap(), 1);
    }

    #[test]
    fn ols_recovers_exact_coefficients() {
        let x = DMatrix::from_fn(10, 2, |i, j| if j == 0 { 1.0 } else { i as f64 });
        let y = DVector::from_fn(10, |i, _| 2.0 - 0.5 * i as f64);
        let fit = ols(&y, &x).unwrap();
        assert_abs_diff_eq!(fit.coef[0], 2.0, epsilon = 1e-10);
        assert_abs_diff_eq!(fit.coef[1], -0.5, epsilon = 1e-10);
    }
}

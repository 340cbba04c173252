//! Small shared linear-algebra and statistics helpers.

use nalgebra::{DMatrix, DVector};

/// Symmetrize a square matrix: (M + M^T)/2.
pub(crate) fn sym_part(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric PSD square root via eigendecomposition.
///
/// Eigenvalues below `-tol` are rejected; small negatives are clipped to 0.
pub(crate) fn psd_sqrt(m: &DMatrix<f64>, tol: f64) -> Result<DMatrix<f64>, String> {
    let eig = nalgebra::SymmetricEigen::new(sym_part(m));
    let mut vals = eig.eigenvalues.clone();
    for v in vals.iter_mut() {
        if *v < -tol {
            return Err(format!("matrix has negative eigenvalue {v:.3e}"));
        }
        *v = v.max(0.0).sqrt();
    }
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&vals) * q.transpose())
}

/// Check symmetric positive semi-definiteness up to `tol`.
pub(crate) fn is_psd(m: &DMatrix<f64>, tol: f64) -> bool {
    if m.nrows() != m.ncols() {
        return false;
    }
    let eig = nalgebra::SymmetricEigen::new(sym_part(m));
    eig.eigenvalues.iter().all(|&v| v >= -tol)
}

/// Condition number lambda_max/lambda_min of a symmetric PSD matrix.
/// Returns +inf when the smallest eigenvalue is not strictly positive.
pub(crate) fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    let eig = nalgebra::SymmetricEigen::new(sym_part(m));
    let max = eig.eigenvalues.max();
    let min = eig.eigenvalues.min();
    if min <= 0.0 || !min.is_finite() {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Pearson correlation between two equal-length slices.
/// Returns `None` when either side has zero variance.
pub(crate) fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    debug_assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let mut sab = 0.0;
    let mut saa = 0.0;
    let mut sbb = 0.0;
    for (&x, &y) in a.iter().zip(b.iter()) {
        let dx = x - ma;
        let dy = y - mb;
        sab += dx * dy;
        saa += dx * dx;
        sbb += dy * dy;
    }
    if saa <= 0.0 || sbb <= 0.0 {
        None
    } else {
        Some(sab / (saa * sbb).sqrt())
    }
}

/// Column means of a T x n matrix.
pub(crate) fn column_means(x: &DMatrix<f64>) -> DVector<f64> {
    let t = x.nrows() as f64;
    DVector::from_iterator(x.ncols(), x.column_iter().map(|c| c.sum() / t))
}

/// Center columns in place and return the removed means.
pub(crate) fn center_columns(x: &mut DMatrix<f64>) -> DVector<f64> {
    let means = column_means(x);
    for (j, mean) in means.iter().enumerate() {
        for v in x.column_mut(j).iter_mut() {
            *v -= mean;
        }
    }
    means
}

/// Standardize columns to zero mean and unit (population) standard deviation.
/// Zero-variance columns are left centered with `std = 0` reported.
pub(crate) fn standardize_columns(x: &DMatrix<f64>) -> (DMatrix<f64>, DVector<f64>) {
    let mut out = x.clone();
    center_columns(&mut out);
    let t = x.nrows() as f64;
    let mut stds = DVector::zeros(x.ncols());
    for j in 0..x.ncols() {
        let var = out.column(j).iter().map(|v| v * v).sum::<f64>() / t;
        let sd = var.sqrt();
        stds[j] = sd;
        if sd > 0.0 {
            for v in out.column_mut(j).iter_mut() {
                *v /= sd;
            }
        }
    }
    (out, stds)
}

/// Sample covariance of a T x n panel with divisor `t - ddof`.
pub(crate) fn sample_cov(x: &DMatrix<f64>, ddof: usize) -> DMatrix<f64> {
    let t = x.nrows();
    let mut centered = x.clone();
    center_columns(&mut centered);
    let denom = (t.saturating_sub(ddof)).max(1) as f64;
    centered.transpose() * centered / denom
}

/// Linearly interpolated quantile of a pre-sorted slice, q in [0, 1].
pub(crate) fn quantile_sorted(sorted: &[f64], q: f64) -> f64 {
    debug_assert!(!sorted.is_empty());
    let h = q.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = (lo + 1).min(sorted.len() - 1);
    let frac = h - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Moore-Penrose pseudoinverse via SVD with a relative singular-value cutoff.
pub(crate) fn pinv(m: &DMatrix<f64>, rel_tol: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let max_sv = svd.singular_values.max();
    let cut = rel_tol * max_sv;
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut sinv = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cut {
            sinv[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * sinv * u.transpose()
}

/// Euclidean projection of a vector onto the probability simplex
/// { w : w_i >= 0, sum w_i = 1 }.
pub fn simplex_projection(v: &DVector<f64>) -> DVector<f64> {
    let n = v.len();
    let mut sorted: Vec<f64> = v.iter().copied().collect();
    sorted.sort_by(|a, b| b.partial_cmp(a).unwrap());
    let mut cumsum = 0.0;
    let mut theta = 0.0;
    let mut rho = 0;
    for (k, &u) in sorted.iter().enumerate() {
        cumsum += u;
        let candidate = (cumsum - 1.0) / (k + 1) as f64;
        if u - candidate > 0.0 {
            rho = k + 1;
            theta = candidate;
        }
    }
    debug_assert!(rho > 0, "simplex projection needs at least one active entry");
    DVector::from_iterator(n, v.iter().map(|&x| (x - theta).max(0.0)))
}

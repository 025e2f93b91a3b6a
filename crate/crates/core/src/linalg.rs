//! Small dense linear-algebra helpers shared by the regression and
//! control-variate code.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Eigenvalue floor used when forming symmetric square roots.
pub const EIGEN_FLOOR: f64 = 1e-12;

/// Relative singular-value cutoff for pseudoinverse solves.
pub const PINV_CUTOFF: f64 = 1e-10;

/// Numerically stable logistic function.
pub fn sigmoid(z: f64) -> f64 {
    if z >= 0.0 {
        1.0 / (1.0 + (-z).exp())
    } else {
        let e = z.exp();
        e / (1.0 + e)
    }
}

/// `(M + Mᵀ) / 2`.
pub fn symmetrize(m: &DMatrix<f64>) -> DMatrix<f64> {
    (m + m.transpose()) * 0.5
}

/// Symmetric square root and inverse square root of a PSD matrix.
///
/// Eigenvalues below [`EIGEN_FLOOR`] are clamped to the floor before
/// taking roots.
pub fn symmetric_sqrt_pair(m: &DMatrix<f64>) -> (DMatrix<f64>, DMatrix<f64>) {
    let eig = SymmetricEigen::new(symmetrize(m));
    let vals = eig.eigenvalues.map(|v| v.max(EIGEN_FLOOR));
    let u = &eig.eigenvectors;
    let root = u * DMatrix::from_diagonal(&vals.map(f64::sqrt)) * u.transpose();
    let inv_root = u * DMatrix::from_diagonal(&vals.map(|v| 1.0 / v.sqrt())) * u.transpose();
    (symmetrize(&root), symmetrize(&inv_root))
}

/// Spectral condition number of a symmetric matrix (infinite when singular).
pub fn condition_number_sym(m: &DMatrix<f64>) -> f64 {
    let vals = SymmetricEigen::new(symmetrize(m)).eigenvalues;
    let max = vals.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let min = vals.iter().fold(f64::INFINITY, |a, v| a.min(v.abs()));
    if min == 0.0 {
        f64::INFINITY
    } else {
        max / min
    }
}

/// Inverts a symmetric positive-definite matrix, adding a ridge of
/// `1e-8 * trace / dim` when the condition number exceeds `1e12`.
pub fn ridge_inverse(m: &DMatrix<f64>) -> Option<DMatrix<f64>> {
    let dim = m.nrows();
    let mut work = symmetrize(m);
    if condition_number_sym(&work) > 1e12 {
        let eps = 1e-8 * work.trace() / dim as f64;
        if !(eps > 0.0) {
            return None;
        }
        for i in 0..dim {
            work[(i, i)] += eps;
        }
    }
    let inv = work.cholesky()?.inverse();
    inv.iter().all(|v| v.is_finite()).then(|| symmetrize(&inv))
}

/// Least-squares solution of `a · x ≈ b`.
///
/// Uses a QR factorisation; falls back to an SVD pseudoinverse (cutoff
/// [`PINV_CUTOFF`] · σ_max) when `a` is rank deficient. The flag reports
/// whether the fallback was taken.
pub fn lstsq(a: &DMatrix<f64>, b: &DVector<f64>) -> (DVector<f64>, bool) {
    let cols = a.ncols();
    if a.nrows() >= cols && cols > 0 {
        let qr = a.clone().qr();
        let r = qr.r();
        let diag_max = (0..cols).fold(0.0_f64, |m, i| m.max(r[(i, i)].abs()));
        let diag_min = (0..cols).fold(f64::INFINITY, |m, i| m.min(r[(i, i)].abs()));
        if diag_max > 0.0 && diag_min > PINV_CUTOFF * diag_max {
            let qtb = qr.q().transpose() * b;
            if let Some(x) = r.solve_upper_triangular(&qtb) {
                return (x, false);
            }
        }
    }
    (pinv_solve(a, b), true)
}

/// Pseudoinverse of a symmetric PSD matrix; eigenvalues below
/// [`PINV_CUTOFF`] · λ_max are treated as zero.
pub fn pseudo_inverse_sym(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(symmetrize(m));
    let max = eig.eigenvalues.iter().fold(0.0_f64, |a, v| a.max(v.abs()));
    let inv = eig.eigenvalues.map(|v| if max > 0.0 && v > PINV_CUTOFF * max { 1.0 / v } else { 0.0 });
    let u = &eig.eigenvectors;
    symmetrize(&(u * DMatrix::from_diagonal(&inv) * u.transpose()))
}

/// Minimum-norm least-squares solution via the SVD pseudoinverse.
pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let cols = a.ncols();
    if a.iter().all(|v| *v == 0.0) {
        return DVector::zeros(cols);
    }
    let svd = a.clone().svd(true, true);
    let smax = svd.singular_values.max();
    let u = svd.u.as_ref().expect("u requested");
    let vt = svd.v_t.as_ref().expect("v_t requested");
    let mut x = DVector::zeros(cols);
    for (j, &s) in svd.singular_values.iter().enumerate() {
        if s > PINV_CUTOFF * smax {
            let coeff = u.column(j).dot(b) / s;
            x += vt.row(j).transpose() * coeff;
        }
    }
    x
}

/// Running sum that switches to Kahan compensation for long inputs.
#[derive(Debug, Clone, Copy)]
pub struct Accumulator {
    sum: f64,
    carry: f64,
    compensated: bool,
}

/// Inputs longer than this are summed with compensation.
pub const KAHAN_THRESHOLD: usize = 100_000;

impl Accumulator {
    pub fn for_len(n: usize) -> Self {
        Self {
            sum: 0.0,
            carry: 0.0,
            compensated: n > KAHAN_THRESHOLD,
        }
    }

    #[inline]
    pub fn add(&mut self, v: f64) {
        if self.compensated {
            let y = v - self.carry;
            let t = self.sum + y;
            self.carry = (t - self.sum) - y;
            self.sum = t;
        } else {
            self.sum += v;
        }
    }

    pub fn sum(&self) -> f64 {
        self.sum
    }
}

/// Sample mean and unbiased sample variance.
pub fn mean_var(values: &[f64]) -> (f64, f64) {
    let n = values.len();
    if n == 0 {
        return (f64::NAN, f64::NAN);
    }
    let mut acc = Accumulator::for_len(n);
    values.iter().for_each(|v| acc.add(*v));
    let mean = acc.sum() / n as f64;
    if n < 2 {
        return (mean, f64::NAN);
    }
    let mut sq = Accumulator::for_len(n);
    values.iter().for_each(|v| sq.add((v - mean) * (v - mean)));
    (mean, sq.sum() / (n - 1) as f64)
}


/// Serde adapter storing a `DMatrix` as an array of rows.
pub mod rows {
    use nalgebra::DMatrix;
    use serde::{de::Error as _, Deserialize, Deserializer, Serialize, Serializer};

    pub fn serialize<S: Serializer>(m: &DMatrix<f64>, s: S) -> Result<S::Ok, S::Error> {
        let rows: Vec<Vec<f64>> = m.row_iter().map(|r| r.iter().copied().collect()).collect();
        rows.serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<DMatrix<f64>, D::Error> {
        let rows = Vec::<Vec<f64>>::deserialize(d)?;
        let nrows = rows.len();
        let ncols = rows.first().map_or(0, Vec::len);
        if rows.iter().any(|r| r.len() != ncols) {
            return Err(D::Error::custom("ragged matrix rows"));
        }
        Ok(DMatrix::from_row_iterator(nrows, ncols, rows.into_iter().flatten()))
    }
}

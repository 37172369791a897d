//! Dense symmetric helpers shared by the REML engine, the simulator and the
//! matrix validators.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn, SymmetricEigen};

use crate::error::{Error, Result};

/// Relative eigenvalue tolerance used to accept a matrix as PSD.
pub const PSD_REL_TOL: f64 = 1e-8;

/// Cholesky factorization of a symmetric positive-definite matrix.
pub struct SpdFactor {
    chol: Cholesky<f64, Dyn>,
}

impl SpdFactor {
    /// Factorizes `m`; `what` names the matrix in the error message.
    pub fn new(m: DMatrix<f64>, what: &str) -> Result<Self> {
        let n = m.nrows();
        let (mut dmin, mut dmax) = (f64::INFINITY, f64::NEG_INFINITY);
        for i in 0..n {
            dmin = dmin.min(m[(i, i)]);
            dmax = dmax.max(m[(i, i)]);
        }
        if m.iter().any(|v| !v.is_finite()) {
            return Err(Error::Numerical(format!(
                "{what} contains non-finite entries"
            )));
        }
        match m.cholesky() {
            Some(chol) => Ok(Self { chol }),
            None => Err(Error::Numerical(format!(
                "{what} ({n}x{n}) is not positive definite; diagonal range [{dmin:.3e}, {dmax:.3e}]"
            ))),
        }
    }

    pub fn dim(&self) -> usize {
        self.chol.l_dirty().nrows()
    }

    /// log|M| = 2 Σ log L_ii.
    pub fn log_det(&self) -> f64 {
        let l = self.chol.l_dirty();
        (0..l.nrows()).map(|i| l[(i, i)].ln()).sum::<f64>() * 2.0
    }

    pub fn solve_vec(&self, b: &DVector<f64>) -> DVector<f64> {
        self.chol.solve(b)
    }

    pub fn solve_mat(&self, b: &DMatrix<f64>) -> DMatrix<f64> {
        self.chol.solve(b)
    }

    /// Full inverse computed as L⁻ᵀ L⁻¹.
    ///
    /// The triangular inverse is formed column by column with contiguous
    /// axpy updates, which is markedly faster than solving against the
    /// identity for the sizes seen here.
    pub fn inverse(&self) -> DMatrix<f64> {
        let l = self.chol.l_dirty();
        let n = l.nrows();
        let ls = l.as_slice();
        let mut linv = DMatrix::<f64>::zeros(n, n);
        let out = linv.as_mut_slice();
        for j in 0..n {
            let col = &mut out[j * n..(j + 1) * n];
            col[j] = 1.0;
            for k in j..n {
                let xk = col[k] / ls[k * n + k];
                col[k] = xk;
                if xk != 0.0 {
                    let lcol = &ls[k * n + k + 1..(k + 1) * n];
                    for (c, &lv) in col[k + 1..].iter_mut().zip(lcol) {
                        *c -= xk * lv;
                    }
                }
            }
        }
        let mut inv = linv.transpose() * &linv;
        symmetrize_in_place(&mut inv);
        inv
    }
}

/// Smallest and largest eigenvalue of a symmetric matrix.
pub fn eigen_extremes(m: &DMatrix<f64>) -> (f64, f64) {
    let eig = SymmetricEigen::new(m.clone());
    let min = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::INFINITY, f64::min);
    let max = eig
        .eigenvalues
        .iter()
        .cloned()
        .fold(f64::NEG_INFINITY, f64::max);
    (min, max)
}

/// Fails unless `min eig >= -rel_tol * max(max eig, 0)`.
pub fn check_psd(m: &DMatrix<f64>, name: &str, rel_tol: f64) -> Result<(f64, f64)> {
    let (min_eig, max_eig) = eigen_extremes(m);
    if min_eig < -rel_tol * max_eig.max(0.0) || !min_eig.is_finite() {
        return Err(Error::NotPsd {
            name: name.to_string(),
            min_eig,
            max_eig,
        });
    }
    Ok((min_eig, max_eig))
}

/// Returns `F` with `F Fᵀ = M` for a symmetric PSD `M`, via the eigen
/// decomposition with negative eigenvalues clipped to zero. Works for
/// singular matrices such as J_p or a centred kinship.
pub fn psd_factor(m: &DMatrix<f64>) -> DMatrix<f64> {
    let eig = SymmetricEigen::new(m.clone());
    let mut f = eig.eigenvectors;
    for (j, &lam) in eig.eigenvalues.iter().enumerate() {
        let s = lam.max(0.0).sqrt();
        f.column_mut(j).scale_mut(s);
    }
    f
}

/// Clips negative eigenvalues to zero and rebuilds the matrix.
pub fn clip_negative_eigenvalues(m: &DMatrix<f64>) -> DMatrix<f64> {
    let f = psd_factor(m);
    let mut out = &f * f.transpose();
    symmetrize_in_place(&mut out);
    out
}

pub fn max_asymmetry(m: &DMatrix<f64>) -> f64 {
    let n = m.nrows();
    let mut worst = 0.0f64;
    for i in 0..n {
        for j in 0..i {
            worst = worst.max((m[(i, j)] - m[(j, i)]).abs());
        }
    }
    worst
}

pub fn symmetrize_in_place(m: &mut DMatrix<f64>) {
    let n = m.nrows();
    for i in 0..n {
        for j in 0..i {
            let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
            m[(i, j)] = avg;
            m[(j, i)] = avg;
        }
    }
}

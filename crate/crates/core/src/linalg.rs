//! Small dense helpers on top of nalgebra.

use nalgebra::{DMatrix, DVector, SymmetricEigen};

/// Relative cutoff below which eigenvalues are treated as zero.
pub const PINV_RTOL: f64 = 1e-12;

/// Solves `A x = b` for symmetric positive semidefinite `A` using the
/// eigen-decomposition pseudo-inverse. Returns the minimum-norm solution.
pub fn solve_psd(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let n = a.nrows();
    if n == 0 {
        return DVector::zeros(0);
    }
    if let Some(chol) = a.clone().cholesky() {
        let x = chol.solve(b);
        if x.iter().all(|v| v.is_finite()) && condition_ok(a) {
            return x;
        }
    }
    pinv_solve(a, b)
}

fn condition_ok(a: &DMatrix<f64>) -> bool {
    let diag_max = a.diagonal().iter().cloned().fold(0.0_f64, f64::max);
    let diag_min = a.diagonal().iter().cloned().fold(f64::INFINITY, f64::min);
    diag_min > diag_max * 1e-10
}

pub fn pinv_solve(a: &DMatrix<f64>, b: &DVector<f64>) -> DVector<f64> {
    let eig = SymmetricEigen::new(a.clone());
    let max = eig.eigenvalues.iter().fold(0.0_f64, |m, v| m.max(v.abs()));
    let cutoff = max * PINV_RTOL;
    let qtb = eig.eigenvectors.transpose() * b;
    let scaled = DVector::from_iterator(
        qtb.len(),
        qtb.iter()
            .zip(eig.eigenvalues.iter())
            .map(|(c, l)| if l.abs() > cutoff { c / l } else { 0.0 }),
    );
    &eig.eigenvectors * scaled
}

/// Orthonormal basis (in the weighted inner product `Σ w_i u_i v_i`) of the
/// complement of `span(vectors)` in R^n. Vectors are columns of length `n`.
pub fn weighted_complement(weights: &[f64], vectors: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let n = weights.len();
    let dot = |u: &[f64], v: &[f64]| -> f64 {
        weights
            .iter()
            .zip(u.iter().zip(v))
            .map(|(w, (a, b))| w * a * b)
            .sum()
    };
    let mut basis: Vec<Vec<f64>> = Vec::new();
    let push = |mut v: Vec<f64>, basis: &mut Vec<Vec<f64>>| -> bool {
        let norm0 = dot(&v, &v).sqrt();
        if norm0 == 0.0 {
            return false;
        }
        // two passes of modified Gram-Schmidt
        for _ in 0..2 {
            for b in basis.iter() {
                let c = dot(&v, b);
                v.iter_mut().zip(b).for_each(|(x, y)| *x -= c * y);
            }
        }
        let norm = dot(&v, &v).sqrt();
        if norm <= 1e-10 * norm0 {
            return false;
        }
        v.iter_mut().for_each(|x| *x /= norm);
        basis.push(v);
        true
    };
    for v in vectors {
        push(v.clone(), &mut basis);
    }
    let span_dim = basis.len();
    for i in 0..n {
        if basis.len() == n {
            break;
        }
        let mut e = vec![0.0; n];
        e[i] = 1.0;
        push(e, &mut basis);
    }
    basis.split_off(span_dim)
}

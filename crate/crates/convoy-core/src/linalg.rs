//! Pseudoinverse and damped least-squares helpers shared by inverse
//! kinematics, the task-priority controller, and constraint projection.

use nalgebra::{DMatrix, DVector};

/// Singular values below this are treated as zero by [`pinv_truncated`]
/// callers that do not pass their own cutoff.
pub const DEFAULT_SV_CUTOFF: f64 = 1e-8;

/// Moore-Penrose pseudoinverse with singular values below `cutoff` dropped.
pub fn pinv_truncated(m: &DMatrix<f64>, cutoff: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut inv_s = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s > cutoff {
            inv_s[(i, i)] = 1.0 / s;
        }
    }
    vt.transpose() * inv_s * u.transpose()
}

/// Pseudoinverse with selective damping: singular values at or above
/// `sigma_min` are inverted exactly, smaller ones are damped as
/// `s / (s^2 + lambda^2)`. Exact inversion away from singularities keeps
/// null-space projections crisp while the damped branch bounds the gain
/// near rank loss.
pub fn pinv_selective(m: &DMatrix<f64>, sigma_min: f64, lambda: f64) -> DMatrix<f64> {
    let svd = m.clone().svd(true, true);
    let u = svd.u.as_ref().expect("svd computed with u");
    let vt = svd.v_t.as_ref().expect("svd computed with v_t");
    let mut inv_s = DMatrix::zeros(vt.nrows(), u.ncols());
    for (i, &s) in svd.singular_values.iter().enumerate() {
        if s >= sigma_min {
            inv_s[(i, i)] = 1.0 / s;
        } else if s > 0.0 {
            inv_s[(i, i)] = s / (s * s + lambda * lambda);
        }
    }
    vt.transpose() * inv_s * u.transpose()
}

/// One damped least-squares step `J^T (J J^T + lambda^2 I)^-1 e` for a wide
/// task Jacobian. Falls back to SVD if the normal matrix loses positive
/// definiteness numerically.
pub fn dls_step(j: &DMatrix<f64>, e: &DVector<f64>, lambda: f64) -> DVector<f64> {
    let m = j.nrows();
    let jjt = j * j.transpose() + DMatrix::identity(m, m) * (lambda * lambda);
    match jjt.clone().cholesky() {
        Some(chol) => j.transpose() * chol.solve(e),
        None => {
            let svd = jjt.svd(true, true);
            j.transpose() * svd.solve(e, 0.0).expect("svd solve")
        }
    }
}

/// `sqrt(det(J J^T))`, the manipulability measure of a task Jacobian.
pub fn manipulability(j: &DMatrix<f64>) -> f64 {
    let jjt = j * j.transpose();
    jjt.determinant().max(0.0).sqrt()
}

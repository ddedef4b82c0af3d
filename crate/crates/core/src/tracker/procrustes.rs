//! Closed-form weighted rigid alignment and its sensitivity to the weights.

use nalgebra::{Matrix3, Matrix6, SymmetricEigen, Vector6};

use crate::error::{Result, SlamError};
use crate::geometry::{skew, Mat3, PoseSE3, Vec3};

/// Relative spread below which the current points count as collinear.
const DEGENERATE_RATIO: f64 = 1e-10;

/// `(R, t)` minimising `Σ w ||p_r − (R p_c + t)||²`, i.e. reference from
/// current.
pub fn weighted_procrustes(pc: &[Vec3], pr: &[Vec3], w: &[f64]) -> Result<PoseSE3> {
    if pc.len() != pr.len() || pc.len() != w.len() {
        return Err(SlamError::contract("procrustes: point and weight counts differ"));
    }
    if w.iter().any(|v| !v.is_finite() || *v < 0.0) {
        return Err(SlamError::contract("procrustes: weights must be finite and non-negative"));
    }
    let total: f64 = w.iter().sum();
    if pc.len() < 3 || total <= 0.0 {
        return Err(SlamError::TrackerLost(format!(
            "{} correspondences with total weight {total}",
            pc.len()
        )));
    }
    let mu_c = pc.iter().zip(w).fold(Vec3::zeros(), |a, (p, w)| a + p * *w) / total;
    let mu_r = pr.iter().zip(w).fold(Vec3::zeros(), |a, (p, w)| a + p * *w) / total;
    let mut m = Mat3::zeros();
    let mut spread = Mat3::zeros();
    for i in 0..pc.len() {
        let (a, b) = (pc[i] - mu_c, pr[i] - mu_r);
        m += w[i] * b * a.transpose();
        spread += w[i] * a * a.transpose();
    }
    let eig = SymmetricEigen::new(spread).eigenvalues;
    let mut ev = [eig[0], eig[1], eig[2]];
    ev.sort_by(|a, b| b.total_cmp(a));
    if ev[0] <= 1e-18 || ev[1] <= DEGENERATE_RATIO * ev[0] {
        return Err(SlamError::TrackerLost("correspondences are collinear or coincident".into()));
    }
    let svd = m.svd(true, true);
    let (u, vt) = match (svd.u, svd.v_t) {
        (Some(u), Some(vt)) => (u, vt),
        _ => return Err(SlamError::TrackerLost("SVD did not converge".into())),
    };
    let mut d = Matrix3::identity();
    d[(2, 2)] = (u * vt).determinant().signum();
    let r = u * d * vt;
    Ok(PoseSE3::new(r, mu_r - r * mu_c))
}

/// Residuals `p_r − (R p_c + t)`.
pub fn residuals(pc: &[Vec3], pr: &[Vec3], t: &PoseSE3) -> Vec<Vec3> {
    pc.iter().zip(pr).map(|(c, r)| r - t.transform_point(c)).collect()
}

/// `∂r/∂θ` for `θ = (ξ, t)`, the solution perturbed as `R = Exp(ξ) R*`.
fn jacobian(q: &Vec3) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&skew(q));
    j.fixed_view_mut::<3, 3>(0, 3).copy_from(&(-Mat3::identity()));
    j
}

/// Given `g = dL/dθ` at the solution, returns `dL/dw_i` for every weight
/// through the optimality condition `∇_θ E = 0` (implicit differentiation).
pub fn weight_gradient(pc: &[Vec3], pr: &[Vec3], w: &[f64], solution: &PoseSE3, g: &[f64; 6]) -> Vec<f64> {
    let mut h = Matrix6::<f64>::zeros();
    let mut parts = Vec::with_capacity(pc.len());
    for i in 0..pc.len() {
        let q = solution.rotation * pc[i];
        let r = pr[i] - q - solution.translation;
        let j = jacobian(&q);
        let mut hi = 2.0 * j.transpose() * j;
        // Curvature of the rotation: −(r qᵀ + q rᵀ) + 2 (r·q) I.
        let curv = -(r * q.transpose() + q * r.transpose()) + 2.0 * r.dot(&q) * Mat3::identity();
        let mut block = hi.fixed_view_mut::<3, 3>(0, 0);
        block += curv;
        h += w[i] * hi;
        parts.push((j, r));
    }
    let gv = Vector6::from_row_slice(g);
    let Some(u) = h.cholesky().map(|c| c.solve(&gv)).or_else(|| h.lu().solve(&gv)) else {
        return vec![0.0; pc.len()];
    };
    parts.iter().map(|(j, r)| -2.0 * (j * u).dot(r)).collect()
}

/// Weighted median of non-negative values.
pub fn weighted_median(values: &[f64], weights: &[f64]) -> Option<f64> {
    let total: f64 = weights.iter().sum();
    if values.is_empty() || total <= 0.0 {
        return None;
    }
    let mut idx: Vec<usize> = (0..values.len()).collect();
    idx.sort_by(|a, b| values[*a].total_cmp(&values[*b]));
    let mut acc = 0.0;
    for i in idx {
        acc += weights[i];
        if acc >= 0.5 * total {
            return Some(values[i]);
        }
    }
    None
}

//! Small rotation toolbox: so(3) exponential map, nearest-rotation
//! projection, and the angular distance between two rotations.

use nalgebra::{Matrix3, Vector3};

/// Cross-product (hat) matrix of `w`.
pub fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Rodrigues exponential map from an axis-angle vector to a rotation matrix.
///
/// Falls back to the second-order series near zero so small increments stay
/// accurate during iterative refinement.
pub fn so3_exp(w: &Vector3<f64>) -> Matrix3<f64> {
    let theta = w.norm();
    let k = skew(w);
    if theta < 1e-10 {
        Matrix3::identity() + k + 0.5 * k * k
    } else {
        let a = theta.sin() / theta;
        let b = (1.0 - theta.cos()) / (theta * theta);
        Matrix3::identity() + a * k + b * k * k
    }
}

/// Projects an arbitrary 3x3 matrix onto the closest proper rotation in the
/// Frobenius sense (via SVD, with a determinant sign fix).
pub fn nearest_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let u = svd.u.expect("3x3 svd yields u");
    let v_t = svd.v_t.expect("3x3 svd yields v_t");
    let mut r = u * v_t;
    if r.determinant() < 0.0 {
        let mut u_fix = u;
        u_fix.column_mut(2).neg_mut();
        r = u_fix * v_t;
    }
    r
}

/// Angle of the relative rotation `ra * rb^T`, in degrees.
///
/// Uses atan2 of the antisymmetric part against the trace, which stays
/// accurate for tiny angles where acos of the trace loses half the digits.
pub fn rotation_angle_deg(ra: &Matrix3<f64>, rb: &Matrix3<f64>) -> f64 {
    let rel = ra * rb.transpose();
    let axis_sin = 0.5
        * Vector3::new(
            rel[(2, 1)] - rel[(1, 2)],
            rel[(0, 2)] - rel[(2, 0)],
            rel[(1, 0)] - rel[(0, 1)],
        )
        .norm();
    let cos_theta = (rel.trace() - 1.0) * 0.5;
    axis_sin.atan2(cos_theta).to_degrees()
}

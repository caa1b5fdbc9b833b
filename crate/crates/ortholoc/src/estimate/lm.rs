//! Levenberg-Marquardt refinement of camera pose and (optionally) shared
//! focal length and principal point, minimizing a Huber-robustified
//! reprojection cost with analytic Jacobians.
//!
//! The rotation is parameterized by a local so(3) increment applied on the
//! left in the camera frame, so Jacobians are evaluated at the identity
//! increment and the state re-linearizes after every accepted step.

use nalgebra::{DMatrix, DVector, Vector2, Vector3};

use super::EstimateError;
use crate::camera::{CameraIntrinsics, CameraPose, DEPTH_EPSILON};

/// Stand-in residual magnitude for points behind the camera: large enough
/// to reject any step that pushes points behind, finite so costs compare.
const BEHIND_RESIDUAL: f64 = 1e6;

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct LmOptions {
    /// Optimize a single shared focal length (fx = fy).
    pub optimize_focal: bool,
    /// Also optimize the principal point (for full-intrinsics experiments).
    pub optimize_principal: bool,
    /// Huber transition point in pixels.
    pub huber_delta_px: f64,
    pub max_iterations: usize,
    /// Convergence threshold on the infinity norm of the cost gradient.
    pub gradient_tolerance: f64,
}

impl Default for LmOptions {
    fn default() -> Self {
        Self {
            optimize_focal: false,
            optimize_principal: false,
            huber_delta_px: 5.0,
            max_iterations: 100,
            gradient_tolerance: 1e-10,
        }
    }
}

/// Joint pose/intrinsics estimate with convergence diagnostics. The shared
/// focal constraint keeps `fx == fy` whenever it was active.
#[derive(Debug, Clone)]
pub struct CalibEstimate {
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
    pub mean_reproj_px: f64,
    pub converged: bool,
    pub iterations: usize,
}

/// Which parameters are active, in order: rotation (3), translation (3),
/// then optional shared focal and optional principal point.
#[derive(Debug, Clone, Copy)]
pub struct ParamLayout {
    pub optimize_focal: bool,
    pub optimize_principal: bool,
}

impl ParamLayout {
    pub fn dim(&self) -> usize {
        6 + usize::from(self.optimize_focal) + 2 * usize::from(self.optimize_principal)
    }
}

/// Huber cost of a residual magnitude: quadratic inside `delta`, linear
/// growth outside.
pub fn huber_cost(s: f64, delta: f64) -> f64 {
    if s <= delta {
        0.5 * s * s
    } else {
        delta * (s - 0.5 * delta)
    }
}

/// IRLS weight for the Huber cost: `rho'(s) / s`.
fn huber_weight(s: f64, delta: f64) -> f64 {
    if s <= delta {
        1.0
    } else {
        delta / s
    }
}

/// Residual and its analytic Jacobian rows for a single correspondence at
/// the current state (increment at zero). Returns `None` for points at or
/// behind the camera plane.
pub fn residual_and_jacobian(
    p_world: &Vector3<f64>,
    observed: &Vector2<f64>,
    k: &CameraIntrinsics,
    pose: &CameraPose,
    layout: &ParamLayout,
) -> Option<(Vector2<f64>, Vec<f64>, Vec<f64>)> {
    let pc = pose.transform_point(p_world);
    if pc.z <= DEPTH_EPSILON {
        return None;
    }
    let (x, y, z) = (pc.x, pc.y, pc.z);
    let inv_z = 1.0 / z;
    let u = k.fx * x * inv_z + k.cx;
    let v = k.fy * y * inv_z + k.cy;
    let r = Vector2::new(u - observed.x, v - observed.y);

    // d(u,v)/dPc
    let a = [
        [k.fx * inv_z, 0.0, -k.fx * x * inv_z * inv_z],
        [0.0, k.fy * inv_z, -k.fy * y * inv_z * inv_z],
    ];
    // dPc/domega = -[Pc]x for a left increment exp(w^) Pc + dt.
    let dpc_dw = [
        [0.0, z, -y],
        [-z, 0.0, x],
        [y, -x, 0.0],
    ];

    let dim = layout.dim();
    let mut row_u = vec![0.0; dim];
    let mut row_v = vec![0.0; dim];
    for c in 0..3 {
        let mut ju = 0.0;
        let mut jv = 0.0;
        for m in 0..3 {
            ju += a[0][m] * dpc_dw[m][c];
            jv += a[1][m] * dpc_dw[m][c];
        }
        row_u[c] = ju;
        row_v[c] = jv;
        // Translation columns: dPc/dt = I.
        row_u[3 + c] = a[0][c];
        row_v[3 + c] = a[1][c];
    }
    let mut col = 6;
    if layout.optimize_focal {
        row_u[col] = x * inv_z;
        row_v[col] = y * inv_z;
        col += 1;
    }
    if layout.optimize_principal {
        row_u[col] = 1.0;
        row_v[col + 1] = 1.0;
    }
    Some((r, row_u, row_v))
}

struct State {
    pose: CameraPose,
    k: CameraIntrinsics,
}

impl State {
    fn apply(&self, step: &DVector<f64>, layout: &ParamLayout) -> State {
        let w = Vector3::new(step[0], step[1], step[2]);
        let dt = Vector3::new(step[3], step[4], step[5]);
        let pose = self.pose.apply_increment(&w, &dt);
        let mut k = self.k;
        let mut col = 6;
        if layout.optimize_focal {
            let f = (self.k.shared_focal() + step[col]).max(1e-6);
            k = k.with_shared_focal(f);
            col += 1;
        }
        if layout.optimize_principal {
            k.cx += step[col];
            k.cy += step[col + 1];
        }
        State { pose, k }
    }

    fn robust_cost(&self, world: &[Vector3<f64>], image: &[Vector2<f64>], delta: f64) -> f64 {
        let mut cost = 0.0;
        for (p3, p2) in world.iter().zip(image.iter()) {
            let pc = self.pose.transform_point(p3);
            let s = if pc.z <= DEPTH_EPSILON {
                BEHIND_RESIDUAL
            } else {
                let u = self.k.fx * pc.x / pc.z + self.k.cx;
                let v = self.k.fy * pc.y / pc.z + self.k.cy;
                Vector2::new(u - p2.x, v - p2.y).norm()
            };
            cost += huber_cost(s, delta);
        }
        cost
    }
}

/// Jointly refines extrinsics and (optionally) intrinsics by damped
/// Gauss-Newton steps on the robust reprojection cost. Accepted steps never
/// increase the cost.
pub fn refine_lm(
    world: &[Vector3<f64>],
    image: &[Vector2<f64>],
    k0: &CameraIntrinsics,
    t0: &CameraPose,
    opts: &LmOptions,
) -> Result<CalibEstimate, EstimateError> {
    let n = world.len();
    if n != image.len() {
        return Err(EstimateError::MismatchedLengths);
    }
    let layout = ParamLayout {
        optimize_focal: opts.optimize_focal,
        optimize_principal: opts.optimize_principal,
    };
    let needed = if opts.optimize_focal || opts.optimize_principal { 6 } else { 3 };
    if n < needed {
        return Err(EstimateError::NotEnoughPoints { needed, got: n });
    }

    let mut k_init = *k0;
    if opts.optimize_focal {
        // The shared-focal constraint starts from the average of fx and fy.
        k_init = k_init.with_shared_focal(k0.shared_focal());
    }
    let mut state = State {
        pose: *t0,
        k: k_init,
    };
    let dim = layout.dim();
    let delta = opts.huber_delta_px;
    let mut lambda = 1e-3;
    let mut cost = state.robust_cost(world, image, delta);
    if !cost.is_finite() {
        return Err(EstimateError::Diverged);
    }
    let mut converged = false;
    let mut iterations = 0usize;

    'outer: for _ in 0..opts.max_iterations {
        // Assemble the weighted normal equations at the current state.
        let mut h = DMatrix::<f64>::zeros(dim, dim);
        let mut g = DVector::<f64>::zeros(dim);
        let mut visible = 0usize;
        for (p3, p2) in world.iter().zip(image.iter()) {
            let Some((r, row_u, row_v)) = residual_and_jacobian(p3, p2, &state.k, &state.pose, &layout)
            else {
                continue;
            };
            visible += 1;
            let w = huber_weight(r.norm(), delta);
            for a in 0..dim {
                g[a] += w * (row_u[a] * r.x + row_v[a] * r.y);
                for b in a..dim {
                    h[(a, b)] += w * (row_u[a] * row_u[b] + row_v[a] * row_v[b]);
                }
            }
        }
        if visible * 2 < dim {
            return Err(EstimateError::SingularNormalEquations);
        }
        for a in 0..dim {
            for b in 0..a {
                h[(a, b)] = h[(b, a)];
            }
        }
        if g.amax() < opts.gradient_tolerance {
            converged = true;
            break;
        }

        // Damped solve, rejecting steps that increase the robust cost.
        loop {
            let mut damped = h.clone();
            for d in 0..dim {
                let scale = h[(d, d)].max(1e-12);
                damped[(d, d)] += lambda * scale;
            }
            let solved = damped.clone().cholesky().map(|c| c.solve(&(-&g)));
            let step = match solved {
                Some(s) => s,
                None => {
                    lambda *= 10.0;
                    if lambda > 1e12 {
                        return Err(EstimateError::SingularNormalEquations);
                    }
                    continue;
                }
            };
            let candidate = state.apply(&step, &layout);
            let new_cost = candidate.robust_cost(world, image, delta);
            if !new_cost.is_finite() {
                return Err(EstimateError::Diverged);
            }
            if new_cost < cost {
                let step_norm = step.norm();
                state = candidate;
                cost = new_cost;
                lambda = (lambda / 10.0).max(1e-12);
                iterations += 1;
                if step_norm < 1e-12 {
                    converged = true;
                    break 'outer;
                }
                break;
            }
            lambda *= 10.0;
            if lambda > 1e12 {
                // No descent direction left at machine precision: the state
                // is as converged as damping can make it.
                converged = g.amax() < opts.gradient_tolerance.max(1e-6);
                break 'outer;
            }
        }
    }

    let errs = super::reprojection_errors_px(world, image, &state.k, &state.pose);
    let mean = super::mean_finite(&errs);
    Ok(CalibEstimate {
        pose: state.pose,
        intrinsics: state.k,
        mean_reproj_px: mean,
        converged,
        iterations,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::camera::project_perspective;
    use crate::rotation::{rotation_angle_deg, so3_exp};
    use rand::{RngExt, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn test_k() -> CameraIntrinsics {
        CameraIntrinsics::new_unchecked(640.0, 640.0, 320.0, 240.0, 640, 480)
    }

    fn gt_pose() -> CameraPose {
        CameraPose::new_unchecked(
            so3_exp(&Vector3::new(0.2, -0.1, 0.05)),
            Vector3::new(0.5, -0.3, 12.0),
        )
    }

    /// Deep-relief synthetic scene so focal and depth are identifiable.
    fn scene(n: usize, seed: u64) -> (Vec<Vector3<f64>>, Vec<Vector2<f64>>) {
        let k = test_k();
        let gt = gt_pose();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut world = Vec::new();
        let mut image = Vec::new();
        while world.len() < n {
            let p = Vector3::new(
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(-4.0..4.0),
            );
            if let Ok((px, _)) = project_perspective(&p, &k, &gt) {
                if px.x >= 0.0 && px.x < 640.0 && px.y >= 0.0 && px.y < 480.0 {
                    world.push(p);
                    image.push(px);
                }
            }
        }
        (world, image)
    }

    /// Perturb-recover oracle: noise-free data, pose knocked off by roughly
    /// 2 degrees / 2 m, focal fixed.
    #[test]
    fn recovers_perturbed_pose() {
        let k = test_k();
        let gt = gt_pose();
        let (world, image) = scene(60, 3);
        let t0 = gt.apply_increment(
            &Vector3::new(0.02, -0.02, 0.015),
            &Vector3::new(1.2, -0.8, 1.1),
        );
        let est = refine_lm(&world, &image, &k, &t0, &LmOptions::default()).unwrap();
        assert!(est.converged);
        let re = rotation_angle_deg(est.pose.rotation(), gt.rotation());
        let te = (est.pose.camera_center() - gt.camera_center()).norm();
        assert!(re < 1e-6, "rotation error {re}");
        assert!(te < 1e-6, "translation error {te}");
        assert!(est.mean_reproj_px < 1e-6);
    }

    /// Joint focal recovery from the standard oversized initial guess on a
    /// scene with strong depth variation.
    #[test]
    fn recovers_focal_from_max_dim_guess() {
        let gt_k = test_k();
        let gt = gt_pose();
        let (world, image) = scene(80, 7);
        let f_guess = CameraIntrinsics::focal_guess(640, 480);
        let k0 = gt_k.with_shared_focal(f_guess);
        // Pose init from a small perturbation of truth (stage one's job).
        let t0 = gt.apply_increment(
            &Vector3::new(0.01, 0.01, -0.01),
            &Vector3::new(0.5, 0.5, -0.5),
        );
        let est = refine_lm(
            &world,
            &image,
            &k0,
            &t0,
            &LmOptions {
                optimize_focal: true,
                ..Default::default()
            },
        )
        .unwrap();
        assert_eq!(est.intrinsics.fx, est.intrinsics.fy);
        let rfe = (est.intrinsics.fx - gt_k.fx).abs() / gt_k.fx * 100.0;
        assert!(rfe < 0.1, "relative focal error {rfe}%");
    }

    /// Zero perturbation: already at the optimum, so the solver stops
    /// immediately without moving the parameters.
    #[test]
    fn zero_perturbation_converges_immediately() {
        let k = test_k();
        let gt = gt_pose();
        let (world, image) = scene(40, 11);
        let est = refine_lm(&world, &image, &k, &gt, &LmOptions::default()).unwrap();
        assert!(est.converged);
        assert!(est.iterations <= 2);
        assert!((est.pose.rotation() - gt.rotation()).norm() < 1e-12);
        assert!((est.pose.translation() - gt.translation()).norm() < 1e-12);
    }

    #[test]
    fn huber_matches_quadratic_inside_linear_outside() {
        let delta = 5.0;
        for s in [0.0, 0.1, 2.5, 4.999, 5.0] {
            assert!((huber_cost(s, delta) - 0.5 * s * s).abs() < 1e-12);
        }
        // Linear growth with slope delta beyond the transition.
        for s in [5.1, 8.0, 50.0, 1e4] {
            let expected = delta * (s - 0.5 * delta);
            assert!((huber_cost(s, delta) - expected).abs() < 1e-9);
        }
        let g1 = huber_cost(10.0 + 1e-6, delta) - huber_cost(10.0, delta);
        assert!((g1 / 1e-6 - delta).abs() < 1e-3);
    }

    /// Analytic Jacobians against central finite differences at random
    /// parameter points.
    #[test]
    fn jacobian_matches_finite_differences() {
        let layout = ParamLayout {
            optimize_focal: true,
            optimize_principal: true,
        };
        let dim = layout.dim();
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut checked = 0;
        while checked < 100 {
            // Shared focal, matching the state refine_lm iterates on when
            // the focal column is active.
            let f = rng.random_range(200.0..1500.0);
            let k = CameraIntrinsics::new_unchecked(
                f,
                f,
                rng.random_range(100.0..500.0),
                rng.random_range(100.0..400.0),
                640,
                480,
            );
            let pose = CameraPose::new_unchecked(
                so3_exp(&Vector3::new(
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                    rng.random_range(-0.5..0.5),
                )),
                Vector3::new(
                    rng.random_range(-2.0..2.0),
                    rng.random_range(-2.0..2.0),
                    rng.random_range(5.0..15.0),
                ),
            );
            let p3 = Vector3::new(
                rng.random_range(-4.0..4.0),
                rng.random_range(-4.0..4.0),
                rng.random_range(-2.0..2.0),
            );
            let observed = Vector2::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
            );
            let Some((_, row_u, row_v)) = residual_and_jacobian(&p3, &observed, &k, &pose, &layout)
            else {
                continue;
            };

            let eval = |step: &DVector<f64>| -> Option<Vector2<f64>> {
                let state = State { pose, k };
                let s = state.apply(step, &layout);
                let pc = s.pose.transform_point(&p3);
                if pc.z <= DEPTH_EPSILON {
                    return None;
                }
                let u = s.k.fx * pc.x / pc.z + s.k.cx;
                let v = s.k.fy * pc.y / pc.z + s.k.cy;
                Some(Vector2::new(u - observed.x, v - observed.y))
            };

            let h = 1e-6;
            let mut all_ok = true;
            for c in 0..dim {
                let mut plus = DVector::zeros(dim);
                plus[c] = h;
                let mut minus = DVector::zeros(dim);
                minus[c] = -h;
                let (Some(rp), Some(rm)) = (eval(&plus), eval(&minus)) else {
                    all_ok = false;
                    break;
                };
                let fd_u = (rp.x - rm.x) / (2.0 * h);
                let fd_v = (rp.y - rm.y) / (2.0 * h);
                let scale_u = row_u[c].abs().max(1.0);
                let scale_v = row_v[c].abs().max(1.0);
                assert!(
                    (fd_u - row_u[c]).abs() / scale_u < 1e-4,
                    "du/dp{c}: fd {fd_u} vs analytic {}",
                    row_u[c]
                );
                assert!(
                    (fd_v - row_v[c]).abs() / scale_v < 1e-4,
                    "dv/dp{c}: fd {fd_v} vs analytic {}",
                    row_v[c]
                );
            }
            if all_ok {
                checked += 1;
            }
        }
    }

    /// Robust cost is monotone non-increasing across accepted steps; probe
    /// it with an outlier-contaminated problem.
    #[test]
    fn robust_cost_never_increases() {
        let k = test_k();
        let gt = gt_pose();
        let (mut world, mut image) = scene(50, 23);
        let mut rng = ChaCha8Rng::seed_from_u64(24);
        for _ in 0..10 {
            world.push(Vector3::new(
                rng.random_range(-6.0..6.0),
                rng.random_range(-6.0..6.0),
                rng.random_range(-4.0..4.0),
            ));
            image.push(Vector2::new(
                rng.random_range(0.0..640.0),
                rng.random_range(0.0..480.0),
            ));
        }
        let t0 = gt.apply_increment(
            &Vector3::new(0.03, 0.0, -0.02),
            &Vector3::new(1.0, 1.0, 0.0),
        );
        // Track the cost by re-running with increasing iteration caps; each
        // prefix must cost at least as much as the longer run.
        let mut last = f64::INFINITY;
        for max_iter in [1, 2, 5, 20, 60] {
            let est = refine_lm(
                &world,
                &image,
                &k,
                &t0,
                &LmOptions {
                    max_iterations: max_iter,
                    ..Default::default()
                },
            )
            .unwrap();
            let state = State {
                pose: est.pose,
                k: est.intrinsics,
            };
            let cost = state.robust_cost(&world, &image, 5.0);
            assert!(cost <= last + 1e-9, "cost rose from {last} to {cost}");
            last = cost;
        }
    }

    #[test]
    fn needs_six_points_for_focal() {
        let k = test_k();
        let (world, image) = scene(5, 31);
        let r = refine_lm(
            &world,
            &image,
            &k,
            &gt_pose(),
            &LmOptions {
                optimize_focal: true,
                ..Default::default()
            },
        );
        assert!(matches!(r, Err(EstimateError::NotEnoughPoints { .. })));
    }
}

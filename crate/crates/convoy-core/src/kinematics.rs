//! Forward kinematics, Jacobians, and damped least-squares inverse
//! kinematics for a planar-base mobile manipulator.
//!
//! Configurations are ordered `[x, y, theta, q_arm...]`. Task-space
//! velocities are `[linear; angular]`; the analytical Jacobian expresses the
//! angular part as roll-pitch-yaw rates of the end effector.

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};
use rand::Rng;

use crate::geometry::{matrix_to_rpy, rpy_rate_matrix_inv, GeometryError, Transform};
use crate::linalg::{dls_step, manipulability};
use crate::model::{MMConfig, RobotModel};

/// Radius of the base column the arm must stay clear of.
const COLUMN_RADIUS: f64 = 0.16;
/// Clearance band kept above the base body when checking the column.
const COLUMN_TOP_MARGIN: f64 = 0.03;
/// Minimum height above the ground for any checked arm point.
const GROUND_CLEARANCE: f64 = 0.02;
/// Leading arm segments that hug the column by construction and are skipped
/// by the self-collision check.
const SELF_CHECK_SKIP_SEGMENTS: usize = 2;
/// Sample points per arm segment in collision point clouds.
const POINTS_PER_SEGMENT: usize = 5;

/// Frames of the arm chain in the base frame: the mount, each joint frame
/// after its rotation is applied, and the tool frame.
pub fn arm_frames(model: &RobotModel, q_a: &DVector<f64>) -> Vec<Transform> {
    debug_assert_eq!(q_a.len(), model.n_arm());
    let mut frames = Vec::with_capacity(model.n_arm() + 2);
    let mut t = model.arm_mount.to_transform();
    frames.push(t);
    for (i, joint) in model.joints.iter().enumerate() {
        let spin = nalgebra::Rotation3::from_axis_angle(
            &nalgebra::Unit::new_normalize(joint.axis),
            q_a[i],
        );
        t = t
            .compose(&joint.origin.to_transform())
            .compose(&Transform::from_parts_unchecked(
                spin.into_inner(),
                Vector3::zeros(),
            ));
        frames.push(t);
    }
    frames.push(t.compose(&model.tool.to_transform()));
    frames
}

/// End-effector transform in the base frame.
pub fn fk_arm(model: &RobotModel, q_a: &DVector<f64>) -> Transform {
    *arm_frames(model, q_a).last().expect("chain is nonempty")
}

/// End-effector transform in the world frame.
pub fn fk_world(model: &RobotModel, q: &MMConfig) -> Transform {
    q.base.to_transform().compose(&fk_arm(model, &q.arm))
}

/// Geometric Jacobian in the world frame, mapping `[dx, dy, dtheta, dq_a]`
/// to end-effector `[linear velocity; angular velocity]`. Always defined.
pub fn geometric_jacobian(model: &RobotModel, q: &MMConfig) -> DMatrix<f64> {
    let base_t = q.base.to_transform();
    let frames = arm_frames(model, &q.arm);
    let n_a = model.n_arm();
    let ee_w = base_t.compose(&frames[n_a + 1]);
    let p_ee = *ee_w.translation();
    let p_base = Vector3::new(q.base.x, q.base.y, 0.0);
    let e_z = Vector3::z();

    let mut j = DMatrix::zeros(6, 3 + n_a);
    j[(0, 0)] = 1.0;
    j[(1, 1)] = 1.0;
    let v_theta = e_z.cross(&(p_ee - p_base));
    j.fixed_view_mut::<3, 1>(0, 2).copy_from(&v_theta);
    j.fixed_view_mut::<3, 1>(3, 2).copy_from(&e_z);
    for i in 0..n_a {
        let f_w = base_t.compose(&frames[i + 1]);
        let axis_w = f_w.rotation() * model.joints[i].axis;
        let col_v = axis_w.cross(&(p_ee - f_w.translation()));
        j.fixed_view_mut::<3, 1>(0, 3 + i).copy_from(&col_v);
        j.fixed_view_mut::<3, 1>(3, 3 + i).copy_from(&axis_w);
    }
    j
}

/// Analytical Jacobian: rotation rows of [`geometric_jacobian`] mapped to
/// roll-pitch-yaw rates of the end effector. Fails at gimbal lock.
pub fn jacobian(model: &RobotModel, q: &MMConfig) -> Result<DMatrix<f64>, GeometryError> {
    let mut j = geometric_jacobian(model, q);
    let ee = fk_world(model, q);
    let alpha = matrix_to_rpy(ee.rotation())?;
    let binv = rpy_rate_matrix_inv(&alpha)?;
    let rot = binv * j.rows(3, 3);
    j.rows_mut(3, 3).copy_from(&rot);
    Ok(j)
}

/// Rotation vector (axis times angle) taking `current` to `target` in the
/// frame both are expressed in: `exp(skew(e)) * current == target`.
pub fn rotation_error(current: &Matrix3<f64>, target: &Matrix3<f64>) -> Vector3<f64> {
    let r = target * current.transpose();
    let cos_a = ((r.trace() - 1.0) * 0.5).clamp(-1.0, 1.0);
    let angle = cos_a.acos();
    if angle < 1e-12 {
        return Vector3::zeros();
    }
    let s = Vector3::new(
        r[(2, 1)] - r[(1, 2)],
        r[(0, 2)] - r[(2, 0)],
        r[(1, 0)] - r[(0, 1)],
    );
    if angle > std::f64::consts::PI - 1e-4 {
        // Near a half turn the off-diagonal form degenerates; recover the
        // axis from the dominant column of (R + I) / 2 instead.
        let m = (r + Matrix3::identity()) * 0.5;
        let k = if m[(0, 0)] >= m[(1, 1)] && m[(0, 0)] >= m[(2, 2)] {
            0
        } else if m[(1, 1)] >= m[(2, 2)] {
            1
        } else {
            2
        };
        let mut a: Vector3<f64> = m.column(k).into_owned() / m[(k, k)].max(1e-12).sqrt();
        a.normalize_mut();
        if a.dot(&s) < 0.0 {
            a = -a;
        }
        a * angle
    } else {
        s * (angle / (2.0 * angle.sin()))
    }
}

/// Tuning for [`ik_arm`].
#[derive(Debug, Clone)]
pub struct IkOptions {
    pub max_iters: usize,
    /// Damping factor in the least-squares step.
    pub lambda: f64,
    /// Per-component cap on each joint update (radians).
    pub step_cap: f64,
    pub pos_tol: f64,
    pub rot_tol: f64,
    /// Random restarts after the seeded (or first random) attempt.
    pub restarts: usize,
}

impl Default for IkOptions {
    fn default() -> Self {
        IkOptions {
            max_iters: 200,
            lambda: 1e-3,
            step_cap: 0.2,
            pos_tol: 1e-4,
            rot_tol: 1e-3,
            restarts: 8,
        }
    }
}

impl IkOptions {
    /// Tight tolerances for fixture generation and verification passes.
    pub fn tight() -> Self {
        IkOptions {
            max_iters: 500,
            pos_tol: 1e-8,
            rot_tol: 1e-8,
            restarts: 12,
            ..IkOptions::default()
        }
    }
}

/// Damped least-squares inverse kinematics for the arm alone.
///
/// `target` is the desired end-effector transform in the base frame. The
/// first attempt starts from `seed` when given, otherwise from a random
/// configuration; subsequent attempts restart randomly. Returns a joint
/// configuration within limits whose forward kinematics meets the
/// tolerances, or `None` when every attempt fails.
pub fn ik_arm(
    model: &RobotModel,
    target: &Transform,
    seed: Option<&DVector<f64>>,
    opts: &IkOptions,
    rng: &mut impl Rng,
) -> Option<DVector<f64>> {
    // Attempt order: the caller's seed, then the two canonical postures
    // (their basins cover most of the reachable envelope), then uniform
    // random draws.
    let skip = usize::from(seed.is_some());
    for attempt in 0..=opts.restarts {
        let mut q = if attempt == 0 && skip == 1 {
            seed.unwrap().clone()
        } else {
            match attempt - skip {
                0 => DVector::zeros(model.n_arm()),
                1 => ready_arm(model),
                _ => model.random_arm(rng),
            }
        };
        model.clamp_arm(&mut q);
        if let Some(sol) = dls_solve(model, target, q, opts) {
            return Some(sol);
        }
    }
    None
}

/// Canonical elbow-bent posture; together with the all-zeros home
/// configuration it anchors the restart ladder of [`ik_arm`].
pub fn ready_arm(model: &RobotModel) -> DVector<f64> {
    let mut q = DVector::zeros(model.n_arm());
    for (i, v) in [(1usize, 0.9), (2, -1.5), (4, 0.6)] {
        if i < q.len() {
            q[i] = v;
        }
    }
    model.clamp_arm(&mut q);
    q
}

fn dls_solve(
    model: &RobotModel,
    target: &Transform,
    mut q: DVector<f64>,
    opts: &IkOptions,
) -> Option<DVector<f64>> {
    let mut best = f64::INFINITY;
    let mut stalled = 0;
    for _ in 0..opts.max_iters {
        let frames = arm_frames(model, &q);
        let ee = frames[frames.len() - 1];
        let mut e_p = target.translation() - ee.translation();
        let mut e_r = rotation_error(ee.rotation(), target.rotation());
        if e_p.norm() < opts.pos_tol && e_r.norm() < opts.rot_tol {
            return Some(q);
        }
        let err = e_p.norm() + e_r.norm();
        if err < best - 1e-14 {
            best = err;
            stalled = 0;
        } else {
            stalled += 1;
            if stalled >= 25 {
                return None;
            }
        }
        // Saturating the task-space error keeps the update in the regime
        // where the local linearization holds; without it, distant targets
        // drive near-singular iterates into wild oscillation.
        let p_n = e_p.norm();
        if p_n > 0.2 {
            e_p *= 0.2 / p_n;
        }
        let r_n = e_r.norm();
        if r_n > 0.5 {
            e_r *= 0.5 / r_n;
        }
        let j = arm_geometric_jacobian(model, &frames);
        let e6 = Vector6::new(e_p.x, e_p.y, e_p.z, e_r.x, e_r.y, e_r.z);
        let mut dq = dls_step(&j, &DVector::from_column_slice(e6.as_slice()), opts.lambda);
        // Scale rather than clamp per component, so the step direction
        // survives saturation.
        let m = dq.amax();
        if m > opts.step_cap {
            dq *= opts.step_cap / m;
        }
        q += &dq;
        model.clamp_arm(&mut q);
    }
    None
}

/// Geometric Jacobian of the arm alone (base frame), from precomputed frames.
fn arm_geometric_jacobian(model: &RobotModel, frames: &[Transform]) -> DMatrix<f64> {
    let n_a = model.n_arm();
    let p_ee = *frames[n_a + 1].translation();
    let mut j = DMatrix::zeros(6, n_a);
    for i in 0..n_a {
        let axis = frames[i + 1].rotation() * model.joints[i].axis;
        let col_v = axis.cross(&(p_ee - frames[i + 1].translation()));
        j.fixed_view_mut::<3, 1>(0, i).copy_from(&col_v);
        j.fixed_view_mut::<3, 1>(3, i).copy_from(&axis);
    }
    j
}

/// Sample points along the arm links in the base frame, for collision
/// checks. Includes the mount, interior points of every segment, and the
/// segment endpoints.
pub fn arm_points(model: &RobotModel, q_a: &DVector<f64>) -> Vec<Vector3<f64>> {
    let frames = arm_frames(model, q_a);
    let mut pts = Vec::with_capacity(1 + (frames.len() - 1) * POINTS_PER_SEGMENT);
    pts.push(*frames[0].translation());
    for w in frames.windows(2) {
        let (a, b) = (w[0].translation(), w[1].translation());
        for k in 1..=POINTS_PER_SEGMENT {
            let t = k as f64 / POINTS_PER_SEGMENT as f64;
            pts.push(a + (b - a) * t);
        }
    }
    pts
}

/// [`arm_points`] mapped into the world frame.
pub fn arm_points_world(model: &RobotModel, q: &MMConfig) -> Vec<Vector3<f64>> {
    let base_t = q.base.to_transform();
    arm_points(model, &q.arm)
        .iter()
        .map(|p| base_t.transform_point(p))
        .collect()
}

/// True when the arm intersects its own base column or the ground.
///
/// The check samples points along the links past the shoulder and tests
/// them against a vertical cylinder around the base and a ground-clearance
/// plane. It is a conservative proxy for exact link geometry.
pub fn self_collides(model: &RobotModel, q_a: &DVector<f64>) -> bool {
    let frames = arm_frames(model, q_a);
    let column_top = model.base_height + COLUMN_TOP_MARGIN;
    for (s, w) in frames.windows(2).enumerate() {
        if s < SELF_CHECK_SKIP_SEGMENTS {
            continue;
        }
        let (a, b) = (w[0].translation(), w[1].translation());
        for k in 0..=POINTS_PER_SEGMENT {
            let t = k as f64 / POINTS_PER_SEGMENT as f64;
            let p = a + (b - a) * t;
            if p.z < GROUND_CLEARANCE {
                return true;
            }
            if p.z < column_top && p.xy().norm() < COLUMN_RADIUS {
                return true;
            }
        }
    }
    false
}

/// Estimates the maximum manipulability of the model by sampling arm
/// configurations with the base fixed at the origin (manipulability does
/// not depend on base placement, see the invariance test).
pub fn calibrate_omega_max(model: &RobotModel, samples: usize, rng: &mut impl Rng) -> f64 {
    let base = crate::model::BaseConfig::new(0.0, 0.0, 0.0);
    let mut best: f64 = 0.0;
    for _ in 0..samples {
        let q = MMConfig::new(base, model.random_arm(rng));
        best = best.max(manipulability(&geometric_jacobian(model, &q)));
    }
    best
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::model::BaseConfig;
    use approx::assert_abs_diff_eq;
    use rand::Rng;

    pub(crate) fn reference_model() -> RobotModel {
        RobotModel::builtin("mm_standard").expect("built-in model exists")
    }

    fn random_config(model: &RobotModel, rng: &mut impl Rng) -> MMConfig {
        MMConfig::new(
            BaseConfig::new(
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-2.0..2.0),
                rng.gen_range(-3.0..3.0),
            ),
            model.random_arm(rng),
        )
    }

    #[test]
    fn zero_configuration_matches_stacked_offsets() {
        let model = reference_model();
        let q = MMConfig::new(BaseConfig::new(0.0, 0.0, 0.0), DVector::zeros(model.n_arm()));
        let ee = fk_world(&model, &q);
        assert!((ee.translation() - Vector3::new(0.0, 0.0, 1.02)).abs().max() < 1e-12);
        assert!((ee.rotation() - Matrix3::identity()).abs().max() < 1e-12);
    }

    #[test]
    fn base_motion_translates_the_end_effector() {
        let model = reference_model();
        let mut rng = crate::test_rng(20);
        let q_a = model.random_arm(&mut rng);
        let home = fk_world(&model, &MMConfig::new(BaseConfig::new(0.0, 0.0, 0.0), q_a.clone()));
        let moved = fk_world(&model, &MMConfig::new(BaseConfig::new(0.7, -0.4, 0.0), q_a));
        let dp = moved.translation() - home.translation();
        assert!((dp - Vector3::new(0.7, -0.4, 0.0)).abs().max() < 1e-12);
        assert!((moved.rotation() - home.rotation()).abs().max() < 1e-12);
    }

    #[test]
    fn jacobian_matches_finite_differences() {
        let model = reference_model();
        let mut rng = crate::test_rng(21);
        let h = 1e-6;
        let mut tested = 0;
        let mut attempts = 0;
        while tested < 100 {
            attempts += 1;
            assert!(attempts < 2000, "could not sample enough non-singular configs");
            let q = random_config(&model, &mut rng);
            let Ok(pose) = fk_world(&model, &q).to_pose() else {
                continue;
            };
            if pose.alpha.y.abs() > 1.3 {
                continue;
            }
            let j = jacobian(&model, &q).unwrap();
            let v = q.to_vector();
            for col in 0..v.len() {
                let mut vp = v.clone();
                vp[col] += h;
                let mut vm = v.clone();
                vm[col] -= h;
                let pp = fk_world(&model, &MMConfig::from_vector(&vp)).to_pose().unwrap();
                let pm = fk_world(&model, &MMConfig::from_vector(&vm)).to_pose().unwrap();
                let fd = pp.diff(&pm) / (2.0 * h);
                for row in 0..6 {
                    assert!(
                        (fd[row] - j[(row, col)]).abs() < 1e-5,
                        "J[{row},{col}] analytic {} vs finite difference {}",
                        j[(row, col)],
                        fd[row]
                    );
                }
            }
            tested += 1;
        }
    }

    #[test]
    fn rotation_error_recovers_rotation_vectors() {
        let mut rng = crate::test_rng(23);
        for _ in 0..300 {
            let axis = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let angle = rng.gen_range(1e-6..std::f64::consts::PI - 1e-3);
            let v = axis * angle;
            let r = nalgebra::Rotation3::from_scaled_axis(v).into_inner();
            let e = rotation_error(&Matrix3::identity(), &r);
            assert!((e - v).norm() < 1e-8, "angle {angle}");
        }
        // Near a half turn.
        let axis = Vector3::new(0.6, -0.64, 0.48).normalize();
        let v = axis * (std::f64::consts::PI - 1e-6);
        let r = nalgebra::Rotation3::from_scaled_axis(v).into_inner();
        let e = rotation_error(&Matrix3::identity(), &r);
        assert!((e - v).norm() < 1e-5);
    }

    #[test]
    fn rotation_error_composes_current_to_target() {
        let mut rng = crate::test_rng(24);
        for _ in 0..100 {
            let ra = nalgebra::Rotation3::from_scaled_axis(Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ))
            .into_inner();
            let rb = nalgebra::Rotation3::from_scaled_axis(Vector3::new(
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
                rng.gen_range(-1.5..1.5),
            ))
            .into_inner();
            let e = rotation_error(&ra, &rb);
            let recon = nalgebra::Rotation3::from_scaled_axis(e).into_inner() * ra;
            assert!((recon - rb).abs().max() < 1e-9);
        }
    }

    #[test]
    fn manipulability_ignores_base_placement() {
        let model = reference_model();
        let mut rng = crate::test_rng(25);
        let mut checked = 0;
        while checked < 50 {
            let q_a = model.random_arm(&mut rng);
            let b1 = BaseConfig::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let b2 = BaseConfig::new(
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
                rng.gen_range(-3.0..3.0),
            );
            let q1 = MMConfig::new(b1, q_a.clone());
            let q2 = MMConfig::new(b2, q_a);
            let g1 = manipulability(&geometric_jacobian(&model, &q1));
            let g2 = manipulability(&geometric_jacobian(&model, &q2));
            assert!((g1 - g2).abs() <= 1e-9 * (1.0 + g1.abs()), "{g1} vs {g2}");
            match (jacobian(&model, &q1), jacobian(&model, &q2)) {
                (Ok(j1), Ok(j2)) => {
                    let w1 = manipulability(&j1);
                    let w2 = manipulability(&j2);
                    assert!(
                        (w1 - w2).abs() <= 1e-9 * (1.0 + w1.abs()),
                        "{w1} vs {w2}"
                    );
                    checked += 1;
                }
                (Err(_), Err(_)) => continue,
                _ => panic!("gimbal lock must not depend on base placement"),
            }
        }
    }

    #[test]
    fn ik_reaches_forward_kinematics_targets() {
        let model = reference_model();
        let mut rng = crate::test_rng(26);
        let opts = IkOptions::default();
        let mut solved = 0;
        for _ in 0..50 {
            let q_true = model.random_arm(&mut rng);
            let target = fk_arm(&model, &q_true);
            if let Some(q) = ik_arm(&model, &target, None, &opts, &mut rng) {
                let reached = fk_arm(&model, &q);
                assert!((reached.translation() - target.translation()).norm() < opts.pos_tol);
                assert!(
                    rotation_error(reached.rotation(), target.rotation()).norm() < opts.rot_tol
                );
                assert!(model.arm_within_limits(&q));
                solved += 1;
            }
        }
        assert!(solved >= 45, "solved only {solved} of 50 reachable targets");
    }

    #[test]
    fn ik_converges_from_a_nearby_seed_without_restarts() {
        let model = reference_model();
        let mut rng = crate::test_rng(27);
        let opts = IkOptions {
            restarts: 0,
            ..IkOptions::default()
        };
        for _ in 0..20 {
            let q_true = model.random_arm(&mut rng);
            let target = fk_arm(&model, &q_true);
            let mut seed = q_true.clone();
            for v in seed.iter_mut() {
                *v += rng.gen_range(-0.05..0.05);
            }
            model.clamp_arm(&mut seed);
            let q = ik_arm(&model, &target, Some(&seed), &opts, &mut rng)
                .expect("seeded attempt converges");
            assert!((q - &q_true).norm() < 0.5, "left the seed basin");
        }
    }

    #[test]
    fn ik_is_deterministic_for_a_fixed_rng_seed() {
        let model = reference_model();
        let target = fk_arm(&model, &model.random_arm(&mut crate::test_rng(28)));
        let opts = IkOptions::default();
        let a = ik_arm(&model, &target, None, &opts, &mut crate::test_rng(29));
        let b = ik_arm(&model, &target, None, &opts, &mut crate::test_rng(29));
        assert_eq!(a, b);
    }

    #[test]
    fn tight_ik_refines_to_fixture_precision() {
        let model = reference_model();
        let mut rng = crate::test_rng(30);
        let opts = IkOptions::tight();
        let q_true = model.random_arm(&mut rng);
        let target = fk_arm(&model, &q_true);
        let q = ik_arm(&model, &target, Some(&q_true), &opts, &mut rng).unwrap();
        let reached = fk_arm(&model, &q);
        assert!((reached.translation() - target.translation()).norm() < 1e-8);
        assert!(rotation_error(reached.rotation(), target.rotation()).norm() < 1e-8);
    }

    #[test]
    fn zero_configuration_is_self_collision_free() {
        let model = reference_model();
        assert!(!self_collides(&model, &DVector::zeros(model.n_arm())));
    }

    #[test]
    fn folded_and_ground_striking_arms_self_collide() {
        let model = reference_model();
        // Shoulder pitched far past horizontal sweeps the forearm through
        // the base column.
        let folded = DVector::from_vec(vec![0.0, 2.2, 0.0, 0.0, 0.0, 0.0]);
        assert!(self_collides(&model, &folded));
        // Elbow straight down from a horizontal shoulder pushes the tool
        // below the ground plane.
        let striking = DVector::from_vec(vec![0.0, 1.57, 1.57, 0.0, 0.0, 0.0]);
        assert!(self_collides(&model, &striking));
    }

    #[test]
    fn arm_point_cloud_covers_every_segment() {
        let model = reference_model();
        let q_a = DVector::zeros(model.n_arm());
        let pts = arm_points(&model, &q_a);
        assert_eq!(pts.len(), 1 + (model.n_arm() + 1) * 5);
        for p in &pts {
            assert!(p.x.abs() < 1e-12 && p.y.abs() < 1e-12);
            assert!(p.z > 0.2 && p.z < 1.03);
        }
        let world = arm_points_world(
            &model,
            &MMConfig::new(BaseConfig::new(1.0, 2.0, 0.9), q_a),
        );
        for p in &world {
            assert_abs_diff_eq!(p.x, 1.0, epsilon = 1e-12);
            assert_abs_diff_eq!(p.y, 2.0, epsilon = 1e-12);
        }
    }

    #[test]
    fn calibration_returns_a_positive_bound() {
        let model = reference_model();
        let mut rng = crate::test_rng(33);
        let w = calibrate_omega_max(&model, 500, &mut rng);
        assert!(w > 1e-4, "reference arm should have usable manipulability, got {w}");
    }
}

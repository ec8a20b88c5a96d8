//! Capability metrics scoring how well a robot placement supports a grasp:
//! normalized manipulability, ground-plane alignment angles, and the
//! combined per-robot and formation-wide transport metric.

use nalgebra::{Vector2, Vector3};
use thiserror::Error;

use crate::geometry::{wrap_angle, GeometryError};
use crate::kinematics::{fk_world, geometric_jacobian};
use crate::linalg::manipulability;
use crate::model::{BaseConfig, MMConfig, RobotModel};

/// Angle at which the reach penalty falls to zero.
pub const THETA_MAX: f64 = std::f64::consts::PI;

/// Metric value below which a placement is considered inadmissible.
pub const DEFAULT_THRESHOLD: f64 = 0.4;

/// Ground-projection rays shorter than this are degenerate.
const PROJECTION_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum MetricError {
    #[error("model {0} has no calibrated manipulability bound")]
    UncalibratedModel(String),
    #[error("ground projections coincide; alignment angles are undefined")]
    DegenerateProjection,
    #[error("formation metric over an empty robot set")]
    EmptyFormation,
    #[error(transparent)]
    Geometry(#[from] GeometryError),
}

/// Manipulability of the full geometric Jacobian (base plus arm) at `q`.
///
/// The geometric form keeps the measure bounded for every reachable pose;
/// the task-space form would divide by the pitch cosine and blow up near
/// the representation singularity, which would poison the calibrated
/// maximum and flatten the normalized metric everywhere else.
pub fn manipulability_at(model: &RobotModel, q: &MMConfig) -> Result<f64, MetricError> {
    Ok(manipulability(&geometric_jacobian(model, q)))
}

/// Manipulability normalized by the model's calibrated maximum, clamped to
/// `[0, 1]`.
pub fn normalized_manipulability(model: &RobotModel, q: &MMConfig) -> Result<f64, MetricError> {
    let omega_max = model
        .omega_max
        .ok_or_else(|| MetricError::UncalibratedModel(model.id.clone()))?;
    Ok((manipulability_at(model, q)? / omega_max).clamp(0.0, 1.0))
}

/// Sixth-order reach penalty: 1 at zero deflection, 0 at `theta_max` and
/// beyond.
pub fn reach_penalty(theta: f64, theta_max: f64) -> f64 {
    let u = (theta.abs() / theta_max).min(1.0);
    let v = 1.0 - u * u;
    v * v * v
}

/// Alignment angles of an end effector, both measured on the ground plane:
///
/// * `theta_eb`: bearing of the end effector in the base frame (zero when
///   the arm points straight ahead of the base).
/// * `theta_eo`: angle at the end effector between the ray toward the
///   object center and the ray extending away from the base (zero when the
///   base sits directly behind the grasp, facing the object).
pub fn alignment_angles(
    base: &BaseConfig,
    p_ee: &Vector3<f64>,
    p_obj: &Vector3<f64>,
) -> Result<(f64, f64), MetricError> {
    let base_to_ee = Vector2::new(p_ee.x - base.x, p_ee.y - base.y);
    if base_to_ee.norm() < PROJECTION_TOL {
        return Err(MetricError::DegenerateProjection);
    }
    let ee_to_obj = Vector2::new(p_obj.x - p_ee.x, p_obj.y - p_ee.y);
    if ee_to_obj.norm() < PROJECTION_TOL {
        return Err(MetricError::DegenerateProjection);
    }
    let bearing = base_to_ee.y.atan2(base_to_ee.x);
    let theta_eb = wrap_angle(bearing - base.theta).abs();
    let theta_eo = wrap_angle(ee_to_obj.y.atan2(ee_to_obj.x) - bearing).abs();
    Ok((theta_eb, theta_eo))
}

/// Per-robot transport metric: normalized manipulability scaled by the
/// reach penalties of both alignment angles.
pub fn robot_capability(
    model: &RobotModel,
    q: &MMConfig,
    p_obj: &Vector3<f64>,
) -> Result<f64, MetricError> {
    let mu = normalized_manipulability(model, q)?;
    let p_ee = *fk_world(model, q).translation();
    let (theta_eb, theta_eo) = alignment_angles(&q.base, &p_ee, p_obj)?;
    Ok(mu * reach_penalty(theta_eb, THETA_MAX) * reach_penalty(theta_eo, THETA_MAX))
}

/// Formation-wide transport metric: the minimum [`robot_capability`] over
/// the formation.
pub fn formation_capability<'a>(
    robots: impl IntoIterator<Item = (&'a RobotModel, &'a MMConfig)>,
    p_obj: &Vector3<f64>,
) -> Result<f64, MetricError> {
    let mut best: Option<f64> = None;
    for (model, q) in robots {
        let f = robot_capability(model, q, p_obj)?;
        best = Some(match best {
            Some(b) => b.min(f),
            None => f,
        });
    }
    best.ok_or(MetricError::EmptyFormation)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::calibrate_omega_max;
    use approx::assert_abs_diff_eq;
    use nalgebra::DVector;
    use rand::Rng;

    fn calibrated_model() -> RobotModel {
        let mut m = RobotModel::builtin("mm_standard").unwrap();
        m.omega_max = Some(calibrate_omega_max(&m, 2000, &mut crate::test_rng(40)));
        m
    }

    #[test]
    fn reach_penalty_known_values() {
        assert_abs_diff_eq!(reach_penalty(0.0, THETA_MAX), 1.0);
        assert_abs_diff_eq!(reach_penalty(THETA_MAX, THETA_MAX), 0.0);
        assert_abs_diff_eq!(reach_penalty(-THETA_MAX, THETA_MAX), 0.0);
        assert_abs_diff_eq!(reach_penalty(THETA_MAX / 2.0, THETA_MAX), 0.421875);
        assert_abs_diff_eq!(reach_penalty(10.0 * THETA_MAX, THETA_MAX), 0.0);
    }

    #[test]
    fn reach_penalty_is_monotone_in_deflection() {
        let mut prev = f64::INFINITY;
        for k in 0..=100 {
            let theta = THETA_MAX * k as f64 / 100.0;
            let f = reach_penalty(theta, THETA_MAX);
            assert!(f <= prev + 1e-15);
            assert!((0.0..=1.0).contains(&f));
            prev = f;
        }
    }

    #[test]
    fn normalized_manipulability_stays_in_unit_interval() {
        let model = calibrated_model();
        let mut rng = crate::test_rng(41);
        for _ in 0..200 {
            let q = MMConfig::new(
                BaseConfig::new(0.0, 0.0, rng.gen_range(-3.0..3.0)),
                model.random_arm(&mut rng),
            );
            match normalized_manipulability(&model, &q) {
                Ok(mu) => assert!((0.0..=1.0).contains(&mu)),
                Err(MetricError::Geometry(_)) => continue,
                Err(e) => panic!("unexpected error: {e}"),
            }
        }
    }

    #[test]
    fn uncalibrated_model_is_reported() {
        let model = RobotModel::builtin("mm_standard").unwrap();
        let q = MMConfig::new(BaseConfig::new(0.0, 0.0, 0.0), DVector::zeros(6));
        assert!(matches!(
            normalized_manipulability(&model, &q),
            Err(MetricError::UncalibratedModel(_))
        ));
    }

    #[test]
    fn alignment_angles_hand_cases() {
        let ee = Vector3::new(0.5, 0.0, 0.8);
        let obj = Vector3::new(1.0, 0.0, 0.5);

        let straight = BaseConfig::new(0.0, 0.0, 0.0);
        let (eb, eo) = alignment_angles(&straight, &ee, &obj).unwrap();
        assert_abs_diff_eq!(eb, 0.0);
        assert_abs_diff_eq!(eo, 0.0);

        let turned = BaseConfig::new(0.0, 0.0, std::f64::consts::FRAC_PI_2);
        let (eb, _) = alignment_angles(&turned, &ee, &obj).unwrap();
        assert_abs_diff_eq!(eb, std::f64::consts::FRAC_PI_2);

        let side_obj = Vector3::new(0.5, 0.5, 0.5);
        let (_, eo) = alignment_angles(&straight, &ee, &side_obj).unwrap();
        assert_abs_diff_eq!(eo, std::f64::consts::FRAC_PI_2);

        let behind = BaseConfig::new(1.5, 0.0, 0.0);
        let (eb, eo) = alignment_angles(&behind, &ee, &obj).unwrap();
        assert_abs_diff_eq!(eb, std::f64::consts::PI);
        assert_abs_diff_eq!(eo, std::f64::consts::PI);
    }

    #[test]
    fn degenerate_projections_are_reported() {
        let base = BaseConfig::new(0.0, 0.0, 0.0);
        let above = Vector3::new(0.0, 0.0, 1.0);
        assert!(matches!(
            alignment_angles(&base, &above, &Vector3::new(1.0, 0.0, 0.5)),
            Err(MetricError::DegenerateProjection)
        ));
        let ee = Vector3::new(0.5, 0.0, 0.8);
        let obj_on_ee = Vector3::new(0.5, 0.0, 0.3);
        assert!(matches!(
            alignment_angles(&base, &ee, &obj_on_ee),
            Err(MetricError::DegenerateProjection)
        ));
    }

    #[test]
    fn planar_two_link_manipulability_matches_closed_form() {
        let (l1, l2) = (0.4, 0.3);
        let mut model = RobotModel::builtin("mm_standard").unwrap();
        model.id = "planar_2r".into();
        model.arm_mount = crate::geometry::Pose6::identity();
        model.tool = crate::geometry::Pose6::from_parts(l2, 0.0, 0.0, 0.0, 0.0, 0.0);
        model.joints = vec![
            crate::model::JointSpec {
                origin: crate::geometry::Pose6::identity(),
                axis: Vector3::z(),
                limits: [-3.0, 3.0],
            },
            crate::model::JointSpec {
                origin: crate::geometry::Pose6::from_parts(l1, 0.0, 0.0, 0.0, 0.0, 0.0),
                axis: Vector3::z(),
                limits: [-3.0, 3.0],
            },
        ];
        for k in 0..=100 {
            let t2 = -3.0 + 6.0 * k as f64 / 100.0;
            let q = MMConfig::new(
                BaseConfig::new(0.0, 0.0, 0.0),
                DVector::from_vec(vec![0.7, t2]),
            );
            let j = crate::kinematics::geometric_jacobian(&model, &q);
            let planar = j.view((0, 3), (2, 2)).into_owned();
            let w = manipulability(&planar);
            assert!(
                (w - l1 * l2 * t2.sin().abs()).abs() < 1e-9,
                "theta2 = {t2}: {w} vs {}",
                l1 * l2 * t2.sin().abs()
            );
        }
    }

    #[test]
    fn formation_capability_takes_the_worst_robot() {
        let model = calibrated_model();
        let mut rng = crate::test_rng(42);
        let p_obj = Vector3::new(0.0, 0.0, 0.55);
        let mut configs = Vec::new();
        for k in 0..3 {
            let angle = k as f64 * 2.0 * std::f64::consts::FRAC_PI_3;
            let base = BaseConfig::new(0.9 * angle.cos(), 0.9 * angle.sin(), angle + std::f64::consts::PI);
            configs.push(MMConfig::new(base, model.random_arm(&mut rng)));
        }
        let singles: Vec<f64> = configs
            .iter()
            .map(|q| robot_capability(&model, q, &p_obj).unwrap())
            .collect();
        let formation = formation_capability(
            configs.iter().map(|q| (&model, q)),
            &p_obj,
        )
        .unwrap();
        let min = singles.iter().copied().fold(f64::INFINITY, f64::min);
        assert_abs_diff_eq!(formation, min);
    }

    #[test]
    fn empty_formation_is_an_error() {
        assert!(matches!(
            formation_capability(std::iter::empty(), &Vector3::zeros()),
            Err(MetricError::EmptyFormation)
        ));
    }
}

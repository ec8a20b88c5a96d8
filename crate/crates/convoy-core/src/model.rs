//! Robot model descriptions, configuration types, and model file I/O.
//!
//! A robot is a planar holonomic base (x, y, heading) carrying a serial
//! revolute arm. Model files are versioned JSON documents; see
//! `docs/formats.md` for the field reference.

use std::path::Path;

use nalgebra::{DVector, Vector3};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose6, Transform};

/// Current model file format version.
pub const MODEL_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error("failed to read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}")]
    Parse {
        path: String,
        #[source]
        source: serde_json::Error,
    },
    #[error("model file has format_version {found}, this build reads {MODEL_FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error("invalid model: {0}")]
    Invalid(String),
}

/// One revolute joint: a fixed offset from the previous frame, then a
/// rotation about `axis`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "JointSpecRepr", into = "JointSpecRepr")]
pub struct JointSpec {
    /// Fixed transform from the previous joint frame to this joint's frame.
    pub origin: Pose6,
    /// Unit rotation axis in this joint's frame.
    pub axis: Vector3<f64>,
    /// Lower and upper position limits (radians).
    pub limits: [f64; 2],
}

#[derive(Serialize, Deserialize)]
struct JointSpecRepr {
    origin: Pose6,
    axis: [f64; 3],
    limits: [f64; 2],
}

impl From<JointSpecRepr> for JointSpec {
    fn from(r: JointSpecRepr) -> Self {
        JointSpec {
            origin: r.origin,
            axis: Vector3::from(r.axis),
            limits: r.limits,
        }
    }
}

impl From<JointSpec> for JointSpecRepr {
    fn from(j: JointSpec) -> Self {
        JointSpecRepr {
            origin: j.origin,
            axis: j.axis.into(),
            limits: j.limits,
        }
    }
}

/// Kinematic and physical description of one mobile manipulator.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotModel {
    pub id: String,
    /// Radius of the base's circular footprint (meters).
    pub footprint_radius: f64,
    /// Height of the base body; the arm mounts on top of it (meters).
    pub base_height: f64,
    /// Maximum base speed (m/s).
    pub v_max: f64,
    /// Arm mount frame in the base frame.
    pub arm_mount: Pose6,
    pub joints: Vec<JointSpec>,
    /// End-effector frame in the last joint's frame.
    pub tool: Pose6,
    /// Maximum manipulability over the configuration space, estimated by
    /// sampling and stored with the model. `None` until calibrated.
    pub omega_max: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct ModelFile {
    format_version: u32,
    #[serde(flatten)]
    model: RobotModel,
}

impl Default for RobotModel {
    /// Placeholder for serde-skipped fields; real models come from files or
    /// [`RobotModel::builtin`].
    fn default() -> Self {
        RobotModel::builtin("mm_standard").expect("built-in model")
    }
}

impl RobotModel {
    /// Number of arm joints.
    pub fn n_arm(&self) -> usize {
        self.joints.len()
    }

    /// Total degrees of freedom (planar base + arm).
    pub fn n_dof(&self) -> usize {
        3 + self.joints.len()
    }

    /// Upper bound on the horizontal distance from the base center to the
    /// end effector: every link stretched out flat.
    pub fn max_horizontal_reach(&self) -> f64 {
        let mount = self.arm_mount.p.xy().norm();
        let links: f64 = self.joints.iter().map(|j| j.origin.p.norm()).sum();
        mount + links + self.tool.p.norm()
    }

    /// Checks structural invariants; called on load and before save.
    pub fn validate(&self) -> Result<(), ModelError> {
        if self.joints.is_empty() {
            return Err(ModelError::Invalid("model has no arm joints".into()));
        }
        for (i, j) in self.joints.iter().enumerate() {
            if (j.axis.norm() - 1.0).abs() > 1e-6 {
                return Err(ModelError::Invalid(format!(
                    "joint {i} axis has norm {:.6}, expected a unit vector",
                    j.axis.norm()
                )));
            }
            if j.limits[0] >= j.limits[1] {
                return Err(ModelError::Invalid(format!(
                    "joint {i} limits [{}, {}] are not an interval",
                    j.limits[0], j.limits[1]
                )));
            }
        }
        if self.footprint_radius <= 0.0 {
            return Err(ModelError::Invalid("footprint_radius must be > 0".into()));
        }
        if self.base_height < 0.0 {
            return Err(ModelError::Invalid("base_height must be >= 0".into()));
        }
        if self.v_max <= 0.0 {
            return Err(ModelError::Invalid("v_max must be > 0".into()));
        }
        if let Some(w) = self.omega_max {
            if !(w > 0.0) {
                return Err(ModelError::Invalid(format!(
                    "omega_max must be > 0 once calibrated, got {w}"
                )));
            }
        }
        Ok(())
    }

    /// Clamps an arm configuration into the joint limits, in place.
    pub fn clamp_arm(&self, q_a: &mut DVector<f64>) {
        for (i, j) in self.joints.iter().enumerate() {
            q_a[i] = q_a[i].clamp(j.limits[0], j.limits[1]);
        }
    }

    /// True when every joint value is within its limits.
    pub fn arm_within_limits(&self, q_a: &DVector<f64>) -> bool {
        self.joints
            .iter()
            .enumerate()
            .all(|(i, j)| q_a[i] >= j.limits[0] && q_a[i] <= j.limits[1])
    }

    /// Uniform random arm configuration within the joint limits.
    pub fn random_arm(&self, rng: &mut impl Rng) -> DVector<f64> {
        DVector::from_iterator(
            self.joints.len(),
            self.joints.iter().map(|j| rng.gen_range(j.limits[0]..=j.limits[1])),
        )
    }

    /// Built-in robot descriptions used by the shipped scenes and tests.
    ///
    /// The three arms share the same joint layout (z-y-y-z-y-z) and differ
    /// in link lengths. `omega_max` is left unset; calibrated values live in
    /// the committed model files.
    pub fn builtin(id: &str) -> Option<RobotModel> {
        let joint = |z: f64, axis: Vector3<f64>, lo: f64, hi: f64| JointSpec {
            origin: Pose6::from_parts(0.0, 0.0, z, 0.0, 0.0, 0.0),
            axis,
            limits: [lo, hi],
        };
        let (upper, fore) = match id {
            "mm_standard" => (0.30, 0.15),
            "mm_long" => (0.35, 0.20),
            "mm_compact" => (0.25, 0.12),
            _ => return None,
        };
        Some(RobotModel {
            id: id.to_string(),
            footprint_radius: 0.25,
            base_height: 0.25,
            v_max: 0.1,
            arm_mount: Pose6::from_parts(0.0, 0.0, 0.25, 0.0, 0.0, 0.0),
            joints: vec![
                joint(0.05, Vector3::z(), -3.0, 3.0),
                joint(0.05, Vector3::y(), -2.2, 2.2),
                joint(upper, Vector3::y(), -2.6, 2.6),
                joint(0.10, Vector3::z(), -3.0, 3.0),
                joint(fore, Vector3::y(), -2.2, 2.2),
                joint(0.06, Vector3::z(), -3.0, 3.0),
            ],
            tool: Pose6::from_parts(0.0, 0.0, 0.06, 0.0, 0.0, 0.0),
            omega_max: None,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<RobotModel, ModelError> {
        let path = path.as_ref();
        let text = std::fs::read_to_string(path).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })?;
        RobotModel::from_json(&text).map_err(|e| match e {
            ModelError::Parse { source, .. } => ModelError::Parse {
                path: path.display().to_string(),
                source,
            },
            other => other,
        })
    }

    pub fn from_json(text: &str) -> Result<RobotModel, ModelError> {
        let file: ModelFile = serde_json::from_str(text).map_err(|source| ModelError::Parse {
            path: "<string>".into(),
            source,
        })?;
        if file.format_version != MODEL_FORMAT_VERSION {
            return Err(ModelError::VersionMismatch {
                found: file.format_version,
            });
        }
        file.model.validate()?;
        Ok(file.model)
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), ModelError> {
        let path = path.as_ref();
        self.validate()?;
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: self.clone(),
        };
        let text = serde_json::to_string_pretty(&file).expect("model serializes");
        std::fs::write(path, text).map_err(|source| ModelError::Io {
            path: path.display().to_string(),
            source,
        })
    }
}

/// Planar base configuration: position and heading, heading wrapped.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BaseConfig {
    pub x: f64,
    pub y: f64,
    pub theta: f64,
}

impl BaseConfig {
    pub fn new(x: f64, y: f64, theta: f64) -> Self {
        BaseConfig {
            x,
            y,
            theta: wrap_angle(theta),
        }
    }

    /// World transform of the base frame (origin on the ground).
    pub fn to_transform(&self) -> Transform {
        let (s, c) = self.theta.sin_cos();
        Transform::from_parts_unchecked(
            nalgebra::Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            Vector3::new(self.x, self.y, 0.0),
        )
    }
}

/// Full configuration of one robot: base plus arm joints.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "MMConfigRepr", into = "MMConfigRepr")]
pub struct MMConfig {
    pub base: BaseConfig,
    pub arm: DVector<f64>,
}

#[derive(Serialize, Deserialize)]
struct MMConfigRepr {
    base: BaseConfig,
    arm: Vec<f64>,
}

impl From<MMConfigRepr> for MMConfig {
    fn from(r: MMConfigRepr) -> Self {
        MMConfig {
            base: BaseConfig::new(r.base.x, r.base.y, r.base.theta),
            arm: DVector::from_vec(r.arm),
        }
    }
}

impl From<MMConfig> for MMConfigRepr {
    fn from(c: MMConfig) -> Self {
        MMConfigRepr {
            base: c.base,
            arm: c.arm.iter().copied().collect(),
        }
    }
}

impl MMConfig {
    pub fn new(base: BaseConfig, arm: DVector<f64>) -> Self {
        MMConfig { base, arm }
    }

    pub fn n_dof(&self) -> usize {
        3 + self.arm.len()
    }

    /// Stacks the configuration as `[x, y, theta, arm...]`.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.n_dof());
        v[0] = self.base.x;
        v[1] = self.base.y;
        v[2] = self.base.theta;
        v.rows_mut(3, self.arm.len()).copy_from(&self.arm);
        v
    }

    pub fn from_vector(v: &DVector<f64>) -> Self {
        MMConfig {
            base: BaseConfig::new(v[0], v[1], v[2]),
            arm: v.rows(3, v.len() - 3).into_owned(),
        }
    }
}

/// System configuration: every robot plus the object pose.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CompositeConfig {
    pub robots: Vec<MMConfig>,
    pub object: Pose6,
}

impl CompositeConfig {
    /// Total dimension: sum of robot DOFs plus 6 for the object.
    pub fn dim(&self) -> usize {
        self.robots.iter().map(|r| r.n_dof()).sum::<usize>() + 6
    }

    /// Stacks `[q_1, ..., q_n, t_obj]` into one vector.
    pub fn to_vector(&self) -> DVector<f64> {
        let mut v = DVector::zeros(self.dim());
        let mut at = 0;
        for r in &self.robots {
            let rv = r.to_vector();
            v.rows_mut(at, rv.len()).copy_from(&rv);
            at += rv.len();
        }
        v.rows_mut(at, 6).copy_from(&self.object.to_vector());
        v
    }

    /// Rebuilds from a stacked vector, using `dofs` to split robot blocks.
    pub fn from_vector(v: &DVector<f64>, dofs: &[usize]) -> Self {
        let mut at = 0;
        let robots = dofs
            .iter()
            .map(|&d| {
                let block = v.rows(at, d).into_owned();
                at += d;
                MMConfig::from_vector(&block)
            })
            .collect();
        let object = Pose6::new(
            Vector3::new(v[at], v[at + 1], v[at + 2]),
            Vector3::new(v[at + 3], v[at + 4], v[at + 5]),
        );
        CompositeConfig { robots, object }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn test_model() -> RobotModel {
        RobotModel::builtin("mm_standard").unwrap()
    }

    #[test]
    fn model_json_round_trip() {
        let model = test_model();
        let file = ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model: model.clone(),
        };
        let text = serde_json::to_string_pretty(&file).unwrap();
        let back = RobotModel::from_json(&text).unwrap();
        assert_eq!(model, back);
    }

    #[test]
    fn version_mismatch_is_reported() {
        let model = test_model();
        let mut value = serde_json::to_value(ModelFile {
            format_version: MODEL_FORMAT_VERSION,
            model,
        })
        .unwrap();
        value["format_version"] = serde_json::json!(99);
        let err = RobotModel::from_json(&value.to_string()).unwrap_err();
        assert!(matches!(err, ModelError::VersionMismatch { found: 99 }));
    }

    #[test]
    fn invalid_models_are_rejected() {
        let mut m = test_model();
        m.joints[2].axis *= 2.0;
        assert!(matches!(m.validate(), Err(ModelError::Invalid(_))));

        let mut m = test_model();
        m.joints[0].limits = [1.0, -1.0];
        assert!(matches!(m.validate(), Err(ModelError::Invalid(_))));

        let mut m = test_model();
        m.footprint_radius = 0.0;
        assert!(matches!(m.validate(), Err(ModelError::Invalid(_))));

        let mut m = test_model();
        m.omega_max = Some(0.0);
        assert!(matches!(m.validate(), Err(ModelError::Invalid(_))));
    }

    #[test]
    fn base_transform_matches_components() {
        let b = BaseConfig::new(1.0, -2.0, 0.7);
        let t = b.to_transform();
        let expected = Pose6::from_parts(1.0, -2.0, 0.0, 0.0, 0.0, 0.7).to_transform();
        assert!((t.rotation() - expected.rotation()).abs().max() < 1e-12);
        assert!((t.translation() - expected.translation()).abs().max() < 1e-12);
    }

    #[test]
    fn composite_vector_round_trip() {
        let model = test_model();
        let mut rng = crate::test_rng(31);
        let robots: Vec<MMConfig> = (0..3)
            .map(|_| {
                MMConfig::new(
                    BaseConfig::new(
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-2.0..2.0),
                        rng.gen_range(-3.0..3.0),
                    ),
                    model.random_arm(&mut rng),
                )
            })
            .collect();
        let c = CompositeConfig {
            robots,
            object: Pose6::from_parts(0.3, -0.2, 0.6, 0.1, -0.1, 0.5),
        };
        assert_eq!(c.dim(), 3 * 9 + 6);
        let v = c.to_vector();
        let back = CompositeConfig::from_vector(&v, &[9, 9, 9]);
        assert_eq!(c, back);
    }

    #[test]
    fn mm_config_json_uses_plain_arrays() {
        let model = test_model();
        let mut rng = crate::test_rng(32);
        let q = MMConfig::new(BaseConfig::new(0.5, 1.5, -0.3), model.random_arm(&mut rng));
        let json = serde_json::to_value(&q).unwrap();
        assert!(json["arm"].is_array());
        let back: MMConfig = serde_json::from_value(json).unwrap();
        assert_eq!(q, back);
    }
}

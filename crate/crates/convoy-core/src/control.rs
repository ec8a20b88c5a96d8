//! Per-robot decentralized layer: a bounded base-placement optimizer that
//! keeps each robot in a dexterous posture while the object moves, and the
//! task-priority controller that tracks end-effector and base references
//! on the redundant platform. A fixed-rate executor ties both together and
//! logs the resulting tracking behavior.

use nalgebra::{DMatrix, DVector, Vector3, Vector6};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capmap::{CapabilityMap, CmLibrary};
use crate::geometry::{angle_diff, wrap_angle, GeometryError, Pose6};
use crate::kinematics::{fk_world, ik_arm, jacobian, self_collides, IkOptions};
use crate::linalg::pinv_selective;
use crate::metrics::robot_capability;
use crate::model::{BaseConfig, MMConfig, RobotModel};
use crate::planner::{
    interpolate, sample_in_asr, AsrBounds, AsrOptions, ObjectPath, PlanCounters, SamplingMode,
};
use crate::scene::{arm_in_collision, base_in_collision, Scene};

/// Budget conversion: pseudo-time charged per seed-phase base draw, sized
/// so the default 40 ms optimizer slot yields 40 draws.
pub const SEED_DRAW_TIME: f64 = 5.0e-4;
/// Budget conversion: pseudo-time charged per simplex evaluation, sized so
/// the default 40 ms optimizer slot yields 60 evaluations.
pub const NM_EVAL_TIME: f64 = 1.0e-3 / 3.0;

/// Tracking is declared diverged when the end-effector position error
/// exceeds this many meters.
pub const DIVERGE_POS: f64 = 0.05;
/// Rotation-error divergence limit in radians.
pub const DIVERGE_ROT: f64 = 0.1;

/// Singular values at or above this are inverted exactly in the controller
/// pseudoinverses, keeping the null-space projector crisp.
const SIGMA_MIN: f64 = 1e-2;
/// Damping applied to singular values below [`SIGMA_MIN`].
const DAMPING: f64 = 1e-4;
/// Heavier damping for the secondary (base) task: its inversion may run
/// close to rank loss whenever base motion cannot be compensated by the
/// arm, and the bounded gain keeps those ticks from commanding violent
/// joint rates.
const SECONDARY_DAMPING: f64 = 5e-3;
/// Uniform joint-rate ceiling applied to arm joints during execution.
const ARM_RATE_CAP: f64 = std::f64::consts::PI;

#[derive(Debug, Error)]
pub enum ControlError {
    #[error("invalid control parameter: {0}")]
    InvalidParams(String),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("no consistent start configuration found for robot {robot}")]
    NoStart { robot: usize },
    #[error(
        "tracking diverged at t={time:.3}s on robot {robot}: \
         {pos:.4} m / {rot:.4} rad"
    )]
    DivergedTracking {
        time: f64,
        robot: usize,
        pos: f64,
        rot: f64,
    },
}

/// Diagonal feedback gains of the closed-loop controller.
#[derive(Debug, Clone, PartialEq)]
pub struct ControllerGains {
    pub k_e: Vector6<f64>,
    pub k_b: Vector3<f64>,
}

impl Default for ControllerGains {
    fn default() -> Self {
        ControllerGains {
            k_e: Vector6::repeat(2.0),
            k_b: Vector3::repeat(2.0),
        }
    }
}

impl ControllerGains {
    pub fn validate(&self) -> Result<(), ControlError> {
        if self.k_e.iter().chain(self.k_b.iter()).any(|&k| k <= 0.0) {
            return Err(ControlError::InvalidParams(
                "controller gains must be positive".into(),
            ));
        }
        Ok(())
    }
}

/// Desired end-effector and base motion for one control tick. Rates are
/// feedforward pose velocities in the same parameterization as the poses.
#[derive(Debug, Clone)]
pub struct TrackingTarget {
    pub ee_pose: Pose6,
    pub ee_rate: Vector6<f64>,
    pub base: BaseConfig,
    pub base_rate: Vector3<f64>,
}

/// Budget knobs of the per-tick base-placement optimizer. The wall-clock
/// slot `t_opt` is split by `epsilon` into a sampling phase and a simplex
/// refinement phase; both are realized as deterministic iteration counts
/// via the calibrated per-operation times, so identical seeds reproduce
/// identical optimizer decisions.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct OptimizerParams {
    pub t_opt: f64,
    pub epsilon: f64,
    pub v_max: f64,
}

impl Default for OptimizerParams {
    fn default() -> Self {
        OptimizerParams {
            t_opt: 0.040,
            epsilon: 0.5,
            v_max: 0.1,
        }
    }
}

impl OptimizerParams {
    pub fn validate(&self) -> Result<(), ControlError> {
        if !(self.t_opt > 0.0) {
            return Err(ControlError::InvalidParams(format!(
                "t_opt must be > 0, got {}",
                self.t_opt
            )));
        }
        if !(0.0..=1.0).contains(&self.epsilon) {
            return Err(ControlError::InvalidParams(format!(
                "epsilon must be in [0, 1], got {}",
                self.epsilon
            )));
        }
        if !(self.v_max > 0.0) {
            return Err(ControlError::InvalidParams(format!(
                "v_max must be > 0, got {}",
                self.v_max
            )));
        }
        Ok(())
    }

    /// Seed-phase draw count realizing the `epsilon * t_opt` slot.
    pub fn seed_draws(&self) -> usize {
        (self.epsilon * self.t_opt / SEED_DRAW_TIME).round() as usize
    }

    /// Simplex evaluation count realizing the `(1 - epsilon) * t_opt` slot.
    pub fn nm_evals(&self) -> usize {
        ((1.0 - self.epsilon) * self.t_opt / NM_EVAL_TIME).round() as usize
    }
}

/// Outcome of one optimizer run. `value` is the capability of the returned
/// base (-1.0 when even the reference is infeasible); `no_improvement`
/// reports that nothing beat the reference.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OptimizedBase {
    pub base: BaseConfig,
    pub value: f64,
    pub no_improvement: bool,
}

/// Reachable base window around `q_b_ref` for one optimizer slot: the
/// square the base can translate to at `v_max` within `t_opt`, plus the
/// heading window obtained by spending the same travel on the footprint
/// circumference.
pub fn travel_bounds(
    q_b_ref: &BaseConfig,
    v_max: f64,
    t_opt: f64,
    footprint_radius: f64,
) -> AsrBounds {
    let d = v_max * t_opt;
    let dth = d / footprint_radius;
    AsrBounds {
        x: [q_b_ref.x - d, q_b_ref.x + d],
        y: [q_b_ref.y - d, q_b_ref.y + d],
        theta: [q_b_ref.theta - dth, q_b_ref.theta + dth],
    }
}

/// Capability of grasping `t_g` from `base`: solves the arm, rejects
/// collisions, and evaluates the full per-robot metric against the object
/// center. Returns -1.0 for infeasible placements so optimizers can rank
/// them below every feasible value. `warm` carries the previous solution
/// as an inverse-kinematics seed across nearby queries.
pub fn base_objective(
    scene: &Scene,
    model: &RobotModel,
    t_g: &Pose6,
    p_obj: &Vector3<f64>,
    base: &BaseConfig,
    warm: &mut Option<DVector<f64>>,
    rng: &mut impl Rng,
) -> f64 {
    if base_in_collision(scene, base, model.footprint_radius) {
        return -1.0;
    }
    let pose_eb = base.to_transform().invert().compose(&t_g.to_transform());
    let opts = IkOptions {
        restarts: if warm.is_some() { 2 } else { 6 },
        ..IkOptions::default()
    };
    let Some(q_a) = ik_arm(model, &pose_eb, warm.as_ref(), &opts, rng) else {
        return -1.0;
    };
    if self_collides(model, &q_a) {
        return -1.0;
    }
    let q = MMConfig::new(*base, q_a);
    if arm_in_collision(scene, model, &q) {
        return -1.0;
    }
    let value = robot_capability(model, &q, p_obj).unwrap_or(-1.0);
    *warm = Some(q.arm);
    value
}

/// Tracks the best value seen while metering a fixed evaluation budget.
struct Budgeted<F> {
    f: F,
    left: usize,
    best: ([f64; 3], f64),
}

impl<F: FnMut(&[f64; 3]) -> f64> Budgeted<F> {
    fn eval(&mut self, x: [f64; 3]) -> Option<f64> {
        if self.left == 0 {
            return None;
        }
        self.left -= 1;
        let v = (self.f)(&x);
        if v > self.best.1 {
            self.best = (x, v);
        }
        Some(v)
    }
}

/// Derivative-free simplex ascent over (x, y, theta) with standard
/// reflection/expansion/contraction coefficients, restarted once from the
/// incumbent if it collapses early. Returns the best point evaluated
/// anywhere within the budget.
fn nelder_mead(
    start: [f64; 3],
    edges: [f64; 3],
    budget: usize,
    f: impl FnMut(&[f64; 3]) -> f64,
) -> ([f64; 3], f64) {
    let mut b = Budgeted {
        f,
        left: budget,
        best: (start, f64::NEG_INFINITY),
    };
    let offset = |x: [f64; 3], axis: usize, s: f64| {
        let mut y = x;
        y[axis] += s * edges[axis];
        y
    };
    let build = |b: &mut Budgeted<_>, x0: [f64; 3], scale: f64| {
        let mut simplex = Vec::with_capacity(4);
        for v in [x0, offset(x0, 0, scale), offset(x0, 1, scale), offset(x0, 2, scale)] {
            match b.eval(v) {
                Some(val) => simplex.push((v, val)),
                None => break,
            }
        }
        simplex
    };
    let mut simplex = build(&mut b, start, 1.0);
    let mut restarted = false;
    while simplex.len() == 4 {
        simplex.sort_by(|a, c| c.1.total_cmp(&a.1));
        let spread = simplex[0].1 - simplex[3].1;
        let size = simplex[1..]
            .iter()
            .map(|(v, _)| {
                (0..3)
                    .map(|k| (v[k] - simplex[0].0[k]).abs())
                    .fold(0.0, f64::max)
            })
            .fold(0.0, f64::max);
        if spread < 1e-12 || size < 1e-9 {
            if restarted {
                break;
            }
            restarted = true;
            let incumbent = b.best.0;
            simplex = build(&mut b, incumbent, 0.5);
            continue;
        }
        let worst = simplex[3].0;
        let mut centroid = [0.0; 3];
        for (v, _) in &simplex[..3] {
            for k in 0..3 {
                centroid[k] += v[k] / 3.0;
            }
        }
        let along = |s: f64| {
            let mut y = [0.0; 3];
            for k in 0..3 {
                y[k] = centroid[k] + s * (centroid[k] - worst[k]);
            }
            y
        };
        let xr = along(1.0);
        let Some(vr) = b.eval(xr) else { break };
        let replacement = if vr > simplex[0].1 {
            let xe = along(2.0);
            match b.eval(xe) {
                Some(ve) if ve > vr => (xe, ve),
                Some(_) => (xr, vr),
                None => break,
            }
        } else if vr > simplex[2].1 {
            (xr, vr)
        } else {
            let contracted = if vr > simplex[3].1 {
                along(0.5)
            } else {
                along(-0.5)
            };
            let Some(vc) = b.eval(contracted) else { break };
            if vc > vr.max(simplex[3].1) {
                (contracted, vc)
            } else {
                let anchor = simplex[0].0;
                let mut shrunk = vec![simplex[0]];
                for (v, _) in &simplex[1..] {
                    let mut y = [0.0; 3];
                    for k in 0..3 {
                        y[k] = anchor[k] + 0.5 * (v[k] - anchor[k]);
                    }
                    match b.eval(y) {
                        Some(val) => shrunk.push((y, val)),
                        None => break,
                    }
                }
                simplex = shrunk;
                continue;
            }
        };
        simplex[3] = replacement;
    }
    b.best
}

/// One bounded formation-optimization slot: evaluates the reference,
/// samples the window for a seed (capability-map gated when a map is
/// available), refines with the simplex, and returns the best feasible
/// base found. Degrades to the reference when nothing beats it.
/// `warm_arm` seeds the first inverse-kinematics solve, typically with the
/// robot's current arm configuration.
#[allow(clippy::too_many_arguments)]
pub fn optimize_base(
    scene: &Scene,
    cm: Option<&CapabilityMap>,
    model: &RobotModel,
    t_g: &Pose6,
    p_obj: &Vector3<f64>,
    q_b_ref: &BaseConfig,
    warm_arm: Option<&DVector<f64>>,
    params: &OptimizerParams,
    rng: &mut impl Rng,
) -> OptimizedBase {
    let bounds = travel_bounds(q_b_ref, params.v_max, params.t_opt, model.footprint_radius);
    let grasp_w = t_g.to_transform();
    let mut warm: Option<DVector<f64>> = warm_arm.cloned();

    let ref_value = base_objective(scene, model, t_g, p_obj, q_b_ref, &mut warm, rng);
    let mut best = (*q_b_ref, ref_value);

    for _ in 0..params.seed_draws() {
        let cand = BaseConfig::new(
            rng.gen_range(bounds.x[0]..=bounds.x[1]),
            rng.gen_range(bounds.y[0]..=bounds.y[1]),
            rng.gen_range(bounds.theta[0]..=bounds.theta[1]),
        );
        if base_in_collision(scene, &cand, model.footprint_radius) {
            continue;
        }
        if let Some(map) = cm {
            let rel = cand.to_transform().invert().compose(&grasp_w);
            match rel.to_pose() {
                Ok(rel) if map.query(&rel).is_some() => {}
                _ => continue,
            }
        }
        let v = base_objective(scene, model, t_g, p_obj, &cand, &mut warm, rng);
        if v > best.1 {
            best = (cand, v);
        }
    }

    let seed = if best.1 >= 0.0 { best.0 } else { *q_b_ref };
    let widths = [
        bounds.x[1] - bounds.x[0],
        bounds.y[1] - bounds.y[0],
        bounds.theta[1] - bounds.theta[0],
    ];
    let inside = |p: &[f64; 3]| {
        p[0] >= bounds.x[0]
            && p[0] <= bounds.x[1]
            && p[1] >= bounds.y[0]
            && p[1] <= bounds.y[1]
            && p[2] >= bounds.theta[0]
            && p[2] <= bounds.theta[1]
    };
    let (nm_point, nm_value) = nelder_mead(
        [seed.x, seed.y, seed.theta],
        [widths[0] * 0.25, widths[1] * 0.25, widths[2] * 0.25],
        params.nm_evals(),
        |p| {
            if !inside(p) {
                return -1.0;
            }
            let cand = BaseConfig::new(p[0], p[1], p[2]);
            base_objective(scene, model, t_g, p_obj, &cand, &mut warm, rng)
        },
    );
    if nm_value > best.1 {
        best = (BaseConfig::new(nm_point[0], nm_point[1], nm_point[2]), nm_value);
    }

    let no_improvement = best.1 <= ref_value + 1e-12;
    if best.1 < 0.0 {
        best = (*q_b_ref, ref_value);
    }
    OptimizedBase {
        base: best.0,
        value: best.1,
        no_improvement,
    }
}

/// Closed-loop task-priority resolution plus the controller diagnostic:
/// the commanded joint velocity and the infinity norm of the end-effector
/// velocity induced by the base (null-space) term alone.
fn step_with_diagnostics(
    model: &RobotModel,
    q: &MMConfig,
    target: &TrackingTarget,
    gains: &ControllerGains,
) -> Result<(DVector<f64>, f64), GeometryError> {
    let j = jacobian(model, q)?;
    let current = fk_world(model, q).to_pose()?;
    let e_e = target.ee_pose.diff(&current);
    let omega_e = gains.k_e.component_mul(&e_e) + target.ee_rate;
    let e_b = Vector3::new(
        target.base.x - q.base.x,
        target.base.y - q.base.y,
        angle_diff(target.base.theta, q.base.theta),
    );
    let omega_b = gains.k_b.component_mul(&e_b) + target.base_rate;

    let j_pinv = pinv_selective(&j, SIGMA_MIN, DAMPING);
    let primary = &j_pinv * DVector::from_column_slice(omega_e.as_slice());
    let dof = model.n_dof();
    let projector = DMatrix::identity(dof, dof) - &j_pinv * &j;
    let base_rows = projector.rows(0, 3).into_owned();
    let base_pinv = pinv_selective(&base_rows, SIGMA_MIN, SECONDARY_DAMPING);
    let residual_cmd = Vector3::new(
        omega_b.x - primary[0],
        omega_b.y - primary[1],
        omega_b.z - primary[2],
    );
    let null_term = &base_pinv * DVector::from_column_slice(residual_cmd.as_slice());
    let leak = (&j * &null_term).amax();
    Ok((primary + null_term, leak))
}

/// Joint velocity command tracking the end-effector reference as the
/// primary task and the base reference in its null space. Feedback errors
/// are scaled by the gains and added to the feedforward rates.
pub fn task_priority_step(
    model: &RobotModel,
    q: &MMConfig,
    target: &TrackingTarget,
    gains: &ControllerGains,
) -> Result<DVector<f64>, GeometryError> {
    step_with_diagnostics(model, q, target, gains).map(|(qdot, _)| qdot)
}

/// Object pose at time `t` along a time-parameterized path, clamped to
/// the endpoints.
pub fn pose_along(path: &ObjectPath, t: f64) -> Pose6 {
    let mut acc = 0.0;
    for (k, &dur) in path.durations.iter().enumerate() {
        if t <= acc + dur {
            let u = if dur > 0.0 { (t - acc) / dur } else { 1.0 };
            return interpolate(&path.waypoints[k], &path.waypoints[k + 1], u.clamp(0.0, 1.0));
        }
        acc += dur;
    }
    *path.waypoints.last().expect("path has waypoints")
}

/// Per-robot state logged at one tick.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotTick {
    pub ee_desired: Pose6,
    pub ee_actual: Pose6,
    pub base_desired: BaseConfig,
    pub base_actual: BaseConfig,
    pub qdot: Vec<f64>,
    pub capability: f64,
    pub null_residual: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TickRecord {
    pub time: f64,
    pub object: Pose6,
    pub robots: Vec<RobotTick>,
}

/// Fixed-rate record of one simulated execution.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingLog {
    pub dt: f64,
    pub ticks: Vec<TickRecord>,
}

/// Aggregate tracking figures over one log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrackingSummary {
    pub ticks: usize,
    pub duration: f64,
    /// Per-axis maximum end-effector error over the last quarter of the
    /// run, taken across robots.
    pub steady_state_err: [f64; 6],
    pub max_pos_err: f64,
    pub max_rot_err: f64,
    /// Largest per-axis mismatch in meters between any actual end
    /// effector and its commanded grasp frame.
    pub max_chain_residual: f64,
    pub max_null_residual: f64,
    pub min_capability: f64,
}

impl TrackingLog {
    pub fn duration(&self) -> f64 {
        self.ticks.last().map_or(0.0, |t| t.time)
    }

    /// CSV export, one row per tick. Pose and configuration columns carry
    /// nine decimals; the null-space diagnostic keeps scientific notation
    /// to stay readable at its 1e-8 scale.
    pub fn to_csv(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        out.push_str("time");
        if let Some(first) = self.ticks.first() {
            for (i, robot) in first.robots.iter().enumerate() {
                for field in ["ed", "ea"] {
                    for axis in ["x", "y", "z", "roll", "pitch", "yaw"] {
                        let _ = write!(out, ",r{i}_{field}_{axis}");
                    }
                }
                for field in ["bd", "ba"] {
                    for axis in ["x", "y", "theta"] {
                        let _ = write!(out, ",r{i}_{field}_{axis}");
                    }
                }
                for k in 0..robot.qdot.len() {
                    let _ = write!(out, ",r{i}_qd_{k}");
                }
                let _ = write!(out, ",r{i}_cap,r{i}_nullres");
            }
        }
        out.push('\n');
        for tick in &self.ticks {
            let _ = write!(out, "{:.9}", tick.time);
            for robot in &tick.robots {
                for pose in [&robot.ee_desired, &robot.ee_actual] {
                    for v in pose.to_vector().iter() {
                        let _ = write!(out, ",{v:.9}");
                    }
                }
                for base in [&robot.base_desired, &robot.base_actual] {
                    let _ = write!(out, ",{:.9},{:.9},{:.9}", base.x, base.y, base.theta);
                }
                for v in &robot.qdot {
                    let _ = write!(out, ",{v:.9}");
                }
                let _ = write!(out, ",{:.9},{:.3e}", robot.capability, robot.null_residual);
            }
            out.push('\n');
        }
        out
    }

    pub fn summary(&self) -> TrackingSummary {
        let duration = self.duration();
        let steady_from = 0.75 * duration;
        let mut s = TrackingSummary {
            ticks: self.ticks.len(),
            duration,
            steady_state_err: [0.0; 6],
            max_pos_err: 0.0,
            max_rot_err: 0.0,
            max_chain_residual: 0.0,
            max_null_residual: 0.0,
            min_capability: f64::INFINITY,
        };
        for tick in &self.ticks {
            for robot in &tick.robots {
                let err = robot.ee_desired.diff(&robot.ee_actual);
                s.max_pos_err = s.max_pos_err.max(err.fixed_rows::<3>(0).norm());
                s.max_rot_err = s.max_rot_err.max(err.fixed_rows::<3>(3).norm());
                s.max_chain_residual = s.max_chain_residual.max(err.fixed_rows::<3>(0).amax());
                s.max_null_residual = s.max_null_residual.max(robot.null_residual);
                s.min_capability = s.min_capability.min(robot.capability);
                if tick.time >= steady_from {
                    for k in 0..6 {
                        s.steady_state_err[k] = s.steady_state_err[k].max(err[k].abs());
                    }
                }
            }
        }
        if !s.min_capability.is_finite() {
            s.min_capability = -1.0;
        }
        s
    }
}

/// Closed-chain-consistent start configurations for `t0`: the scene's
/// frozen composite start when it matches, otherwise sampled placements
/// refined with tight inverse kinematics.
pub fn start_configs(
    scene: &Scene,
    cms: Option<&CmLibrary>,
    t0: &Pose6,
    seed: u64,
) -> Result<Vec<MMConfig>, ControlError> {
    if let Some(c) = &scene.c_start {
        if c.object.diff(t0).amax() < 1e-9 && c.robots.len() == scene.robots.len() {
            return Ok(c.robots.clone());
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed_c0f1);
    let grasps = scene.grasp_transforms(t0);
    let opts = AsrOptions {
        max_samples: 400,
        ..AsrOptions::default()
    };
    let mut counters = PlanCounters::default();
    let mut out = Vec::with_capacity(scene.robots.len());
    for (i, robot) in scene.robots.iter().enumerate() {
        let cm = cms.and_then(|lib| lib.get(&robot.model.id));
        let mode = if cm.is_some() {
            SamplingMode::Cmcl
        } else {
            SamplingMode::Ikcl
        };
        let t_g = grasps[i].to_pose().map_err(ControlError::Geometry)?;
        let bounds = AsrBounds::reach_window(scene, &robot.model, &t_g.p);
        let mut found = None;
        for _ in 0..4 {
            let Some((q_b, _)) = sample_in_asr(
                scene,
                cm,
                &robot.model,
                &t_g,
                &t0.p,
                &bounds,
                mode,
                &opts,
                &mut rng,
                &mut counters,
            ) else {
                continue;
            };
            let pose_eb = q_b.to_transform().invert().compose(&grasps[i]);
            let Some(q_a) = ik_arm(&robot.model, &pose_eb, None, &IkOptions::tight(), &mut rng)
            else {
                continue;
            };
            if self_collides(&robot.model, &q_a) {
                continue;
            }
            let q = MMConfig::new(q_b, q_a);
            if !arm_in_collision(scene, &robot.model, &q) {
                found = Some(q);
                break;
            }
        }
        out.push(found.ok_or(ControlError::NoStart { robot: i })?);
    }
    Ok(out)
}

/// Runs the decentralized layer at a fixed rate along a planned object
/// path: per tick each robot re-optimizes its base placement, runs the
/// task-priority controller against the moving grasp frame, and
/// integrates the commanded joint velocity. Robots only share read-only
/// scene data, so the per-robot work is independent; the integration step
/// applies all commands after every robot has computed its own.
pub fn simulate_execution(
    scene: &Scene,
    cms: Option<&CmLibrary>,
    path: &ObjectPath,
    params: &OptimizerParams,
    gains: &ControllerGains,
    rate_hz: f64,
    seed: u64,
) -> Result<TrackingLog, ControlError> {
    params.validate()?;
    gains.validate()?;
    if !(rate_hz > 0.0) {
        return Err(ControlError::InvalidParams(format!(
            "rate must be > 0 Hz, got {rate_hz}"
        )));
    }
    if path.waypoints.len() < 2
        || path.durations.len() + 1 != path.waypoints.len()
        || path.durations.iter().any(|&d| !(d > 0.0))
    {
        return Err(ControlError::InvalidParams(
            "path needs >= 2 waypoints and positive segment durations".into(),
        ));
    }

    let dt = 1.0 / rate_hz;
    let total = path.total_duration();
    let n_steps = (total / dt).ceil() as usize;
    let mut configs = start_configs(scene, cms, &path.waypoints[0], seed)?;
    let mut rngs: Vec<ChaCha8Rng> = (0..scene.robots.len())
        .map(|i| {
            ChaCha8Rng::seed_from_u64(seed ^ (i as u64 + 1).wrapping_mul(0x9e37_79b9_7f4a_7c15))
        })
        .collect();
    let mut log = TrackingLog {
        dt,
        ticks: Vec::with_capacity(n_steps + 1),
    };

    for k in 0..=n_steps {
        let t = (k as f64 * dt).min(total);
        let t_obj = pose_along(path, t);
        let t_ahead = pose_along(path, (t + dt).min(total));
        let grasps_now = scene.grasp_transforms(&t_obj);
        let grasps_ahead = scene.grasp_transforms(&t_ahead);
        let v_obj = (t_ahead.p - t_obj.p) / dt;
        let omega_z = angle_diff(t_ahead.alpha.z, t_obj.alpha.z) / dt;
        let mut tick = TickRecord {
            time: t,
            object: t_obj,
            robots: Vec::with_capacity(scene.robots.len()),
        };
        let mut qdots = Vec::with_capacity(scene.robots.len());
        for (i, robot) in scene.robots.iter().enumerate() {
            let ee_des = grasps_now[i].to_pose().map_err(ControlError::Geometry)?;
            let ee_ahead = grasps_ahead[i].to_pose().map_err(ControlError::Geometry)?;
            let ee_rate = ee_ahead.diff(&ee_des) / dt;
            let cm = cms.and_then(|lib| lib.get(&robot.model.id));
            let opt = optimize_base(
                scene,
                cm,
                &robot.model,
                &ee_des,
                &t_obj.p,
                &configs[i].base,
                Some(&configs[i].arm),
                params,
                &mut rngs[i],
            );
            let r_x = configs[i].base.x - t_obj.p.x;
            let r_y = configs[i].base.y - t_obj.p.y;
            let base_rate = Vector3::new(
                v_obj.x - omega_z * r_y,
                v_obj.y + omega_z * r_x,
                omega_z,
            );
            let target = TrackingTarget {
                ee_pose: ee_des,
                ee_rate,
                base: opt.base,
                base_rate,
            };
            let (mut qdot, null_residual) =
                step_with_diagnostics(&robot.model, &configs[i], &target, gains)?;
            let lin = (qdot[0].powi(2) + qdot[1].powi(2)).sqrt();
            let ang_cap = robot.model.v_max / robot.model.footprint_radius;
            let arm_peak = (3..qdot.len()).map(|j| qdot[j].abs()).fold(0.0, f64::max);
            let mut scale: f64 = 1.0;
            if lin > robot.model.v_max {
                scale = scale.min(robot.model.v_max / lin);
            }
            if qdot[2].abs() > ang_cap {
                scale = scale.min(ang_cap / qdot[2].abs());
            }
            if arm_peak > ARM_RATE_CAP {
                scale = scale.min(ARM_RATE_CAP / arm_peak);
            }
            if scale < 1.0 {
                qdot *= scale;
            }
            let ee_actual = fk_world(&robot.model, &configs[i])
                .to_pose()
                .map_err(ControlError::Geometry)?;
            let err = ee_des.diff(&ee_actual);
            let pos = err.fixed_rows::<3>(0).norm();
            let rot = err.fixed_rows::<3>(3).norm();
            if pos > DIVERGE_POS || rot > DIVERGE_ROT {
                return Err(ControlError::DivergedTracking {
                    time: t,
                    robot: i,
                    pos,
                    rot,
                });
            }
            let capability = robot_capability(&robot.model, &configs[i], &t_obj.p).unwrap_or(-1.0);
            tick.robots.push(RobotTick {
                ee_desired: ee_des,
                ee_actual,
                base_desired: opt.base,
                base_actual: configs[i].base,
                qdot: qdot.iter().copied().collect(),
                capability,
                null_residual,
            });
            qdots.push(qdot);
        }
        log.ticks.push(tick);
        if k < n_steps {
            for (i, robot) in scene.robots.iter().enumerate() {
                let q = &mut configs[i];
                q.base.x += qdots[i][0] * dt;
                q.base.y += qdots[i][1] * dt;
                q.base.theta = wrap_angle(q.base.theta + qdots[i][2] * dt);
                for j in 0..robot.model.n_arm() {
                    q.arm[j] += qdots[i][3 + j] * dt;
                }
                robot.model.clamp_arm(&mut q.arm);
            }
        }
    }
    Ok(log)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::kinematics::ready_arm;
    use crate::planner::tests::{calibrated_scene, library};
    use crate::planner::weighted_distance;

    fn flat_pose(x: f64, y: f64, z: f64) -> Pose6 {
        Pose6::from_parts(x, y, z, 0.0, 0.0, 0.0)
    }

    fn posed_robot() -> (RobotModel, MMConfig) {
        let model = RobotModel::builtin("mm_standard").unwrap();
        let q = MMConfig::new(BaseConfig::new(0.2, -0.3, 0.4), ready_arm(&model));
        (model, q)
    }

    #[test]
    fn default_gains_validate_and_zero_gains_do_not() {
        assert!(ControllerGains::default().validate().is_ok());
        let mut gains = ControllerGains::default();
        gains.k_b.x = 0.0;
        assert!(gains.validate().is_err());
    }

    #[test]
    fn budget_counts_match_the_stated_splits() {
        let params = OptimizerParams::default();
        assert_eq!(params.seed_draws(), 40);
        assert_eq!(params.nm_evals(), 60);
        let slow = OptimizerParams {
            t_opt: 0.5,
            ..OptimizerParams::default()
        };
        assert_eq!(slow.seed_draws(), 500);
        assert_eq!(slow.nm_evals(), 750);
    }

    #[test]
    fn travel_bounds_scale_with_speed_time_and_footprint() {
        let b = travel_bounds(&BaseConfig::new(1.0, -2.0, 0.3), 0.1, 0.5, 0.25);
        assert!((b.x[0] - 0.95).abs() < 1e-12 && (b.x[1] - 1.05).abs() < 1e-12);
        assert!((b.y[0] + 2.05).abs() < 1e-12 && (b.y[1] + 1.95).abs() < 1e-12);
        assert!((b.theta[0] - 0.1).abs() < 1e-12 && (b.theta[1] - 0.5).abs() < 1e-12);
    }

    #[test]
    fn zero_error_and_zero_feedforward_command_nothing() {
        let (model, q) = posed_robot();
        let current = fk_world(&model, &q).to_pose().unwrap();
        let target = TrackingTarget {
            ee_pose: current,
            ee_rate: Vector6::zeros(),
            base: q.base,
            base_rate: Vector3::zeros(),
        };
        let qdot = task_priority_step(&model, &q, &target, &ControllerGains::default()).unwrap();
        assert!(qdot.amax() < 1e-12);
    }

    #[test]
    fn primary_task_velocity_matches_the_commanded_error() {
        let (model, q) = posed_robot();
        let j = jacobian(&model, &q).unwrap();
        let sigma_min = j.clone().svd(false, false).singular_values.min();
        assert!(sigma_min > 1e-2, "test posture too close to singular");
        let current = fk_world(&model, &q).to_pose().unwrap();
        let e = Vector6::new(0.01, -0.02, 0.015, 0.02, -0.01, 0.03);
        let target = TrackingTarget {
            ee_pose: Pose6::from_parts(
                current.p.x + e[0],
                current.p.y + e[1],
                current.p.z + e[2],
                current.alpha.x + e[3],
                current.alpha.y + e[4],
                current.alpha.z + e[5],
            ),
            ee_rate: Vector6::zeros(),
            base: q.base,
            base_rate: Vector3::zeros(),
        };
        let gains = ControllerGains::default();
        let qdot = task_priority_step(&model, &q, &target, &gains).unwrap();
        let achieved = &j * &qdot;
        let commanded = gains.k_e.component_mul(&e);
        for k in 0..6 {
            assert!(
                (achieved[k] - commanded[k]).abs() < 1e-6,
                "axis {k}: {} vs {}",
                achieved[k],
                commanded[k]
            );
        }
    }

    #[test]
    fn opposing_base_command_is_absorbed_by_the_redundancy() {
        let (model, q) = posed_robot();
        let current = fk_world(&model, &q).to_pose().unwrap();
        let mut ee_rate = Vector6::zeros();
        ee_rate[0] = 0.05;
        let target = TrackingTarget {
            ee_pose: current,
            ee_rate,
            base: BaseConfig::new(q.base.x - 0.08, q.base.y, q.base.theta),
            base_rate: Vector3::zeros(),
        };
        let gains = ControllerGains::default();
        let qdot = task_priority_step(&model, &q, &target, &gains).unwrap();
        let j = jacobian(&model, &q).unwrap();
        let achieved = &j * &qdot;
        for k in 0..6 {
            assert!((achieved[k] - ee_rate[k]).abs() < 1e-6);
        }
        let omega_b = gains.k_b.component_mul(&Vector3::new(-0.08, 0.0, 0.0));
        let base_vel = Vector3::new(qdot[0], qdot[1], qdot[2]);
        assert!(
            (base_vel - omega_b).norm() < 1e-6,
            "three redundant degrees should serve the base exactly, off by {:.3e}",
            (base_vel - omega_b).norm()
        );
    }

    #[test]
    fn base_command_never_leaks_into_the_end_effector() {
        let mut rng = crate::test_rng(100);
        let model = RobotModel::builtin("mm_standard").unwrap();
        let mut checked = 0;
        for _ in 0..40 {
            let q = MMConfig::new(
                BaseConfig::new(
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-1.0..=1.0),
                    rng.gen_range(-3.0..=3.0),
                ),
                model.random_arm(&mut rng),
            );
            let Ok(j) = jacobian(&model, &q) else { continue };
            if j.clone().svd(false, false).singular_values.min() < 2e-2 {
                continue;
            }
            let current = fk_world(&model, &q).to_pose().unwrap();
            let target = TrackingTarget {
                ee_pose: current,
                ee_rate: Vector6::zeros(),
                base: BaseConfig::new(q.base.x + 0.05, q.base.y - 0.03, q.base.theta + 0.1),
                base_rate: Vector3::zeros(),
            };
            let qdot =
                task_priority_step(&model, &q, &target, &ControllerGains::default()).unwrap();
            assert!(
                (&j * &qdot).amax() <= 1e-8,
                "null-space leak {:.3e}",
                (&j * &qdot).amax()
            );
            checked += 1;
        }
        assert!(checked >= 10, "only {checked} postures checked");
    }

    #[test]
    fn zero_gains_reduce_to_the_open_loop_resolution() {
        let (model, q) = posed_robot();
        let ee_rate = Vector6::new(0.02, -0.01, 0.03, 0.01, 0.02, -0.02);
        let base_rate = Vector3::new(-0.04, 0.02, 0.05);
        let current = fk_world(&model, &q).to_pose().unwrap();
        let target = TrackingTarget {
            ee_pose: current,
            ee_rate,
            base: q.base,
            base_rate,
        };
        let gains = ControllerGains {
            k_e: Vector6::repeat(1.0),
            k_b: Vector3::repeat(1.0),
        };
        let qdot = task_priority_step(&model, &q, &target, &gains).unwrap();

        let j = jacobian(&model, &q).unwrap();
        let jp = j.clone().pseudo_inverse(1e-10).unwrap();
        let dof = model.n_dof();
        let n = DMatrix::identity(dof, dof) - &jp * &j;
        let ap = n.rows(0, 3).into_owned().pseudo_inverse(1e-10).unwrap();
        let te = DVector::from_column_slice(ee_rate.as_slice());
        let primary = &jp * &te;
        let rhs = DVector::from_column_slice(
            (base_rate - Vector3::new(primary[0], primary[1], primary[2])).as_slice(),
        );
        let oracle = &primary + &ap * rhs;
        assert!(
            (&qdot - &oracle).amax() < 1e-9,
            "max deviation {:.3e}",
            (&qdot - &oracle).amax()
        );
    }

    #[test]
    fn pose_along_walks_segments_at_constant_metric_rate() {
        let a = flat_pose(0.0, 0.0, 0.5);
        let b = flat_pose(1.0, 0.0, 0.5);
        let c = Pose6::from_parts(1.0, 0.0, 0.5, 0.0, 0.0, 1.0);
        let path = ObjectPath {
            waypoints: vec![a, b, c],
            durations: vec![2.0, 1.0],
        };
        assert_eq!(pose_along(&path, -1.0), a);
        assert_eq!(pose_along(&path, 10.0), c);
        let mid = pose_along(&path, 1.0);
        assert!((mid.p.x - 0.5).abs() < 1e-12);
        let within = pose_along(&path, 2.5);
        assert!(
            (weighted_distance(&b, &within) - 0.5 * weighted_distance(&b, &c)).abs() < 1e-9
        );
    }


    fn grasp_setup() -> (Scene, Pose6, Pose6) {
        let scene = calibrated_scene(50, 50);
        let t_obj = scene.start;
        let t_g = scene.grasp_transforms(&t_obj)[0].to_pose().unwrap();
        (scene, t_obj, t_g)
    }

    fn anchor_arm(model: &RobotModel, base: &BaseConfig, t_g: &Pose6) -> DVector<f64> {
        let pose_eb = base.to_transform().invert().compose(&t_g.to_transform());
        ik_arm(
            model,
            &pose_eb,
            None,
            &IkOptions::default(),
            &mut crate::test_rng(977),
        )
        .expect("anchor arm")
    }

    fn grid_argmax(
        scene: &Scene,
        model: &RobotModel,
        t_g: &Pose6,
        p_obj: &Vector3<f64>,
        bounds: &AsrBounds,
        steps: [usize; 3],
        warm0: &DVector<f64>,
        rng: &mut impl Rng,
    ) -> (BaseConfig, f64) {
        let mut warm = Some(warm0.clone());
        let mut best = (BaseConfig::new(0.0, 0.0, 0.0), f64::NEG_INFINITY);
        for ix in 0..=steps[0] {
            for iy in 0..=steps[1] {
                for it in 0..=steps[2] {
                    let frac = |i: usize, n: usize, r: [f64; 2]| {
                        r[0] + (r[1] - r[0]) * i as f64 / n as f64
                    };
                    let cand = BaseConfig::new(
                        frac(ix, steps[0], bounds.x),
                        frac(iy, steps[1], bounds.y),
                        frac(it, steps[2], bounds.theta),
                    );
                    let v = base_objective(scene, model, t_g, p_obj, &cand, &mut warm, rng);
                    if v > best.1 {
                        best = (cand, v);
                    }
                }
            }
        }
        best
    }

    #[test]
    fn optimizer_matches_or_beats_the_window_grid() {
        let (scene, t_obj, t_g) = grasp_setup();
        let model = &scene.robots[0].model;
        let mut rng = crate::test_rng(101);
        let mut counters = PlanCounters::default();
        let opts = AsrOptions {
            max_samples: 400,
            ..AsrOptions::default()
        };
        let window = AsrBounds::reach_window(&scene, model, &t_g.p);
        let (anchor, _) = sample_in_asr(
            &scene,
            library().get(&model.id),
            model,
            &t_g,
            &t_obj.p,
            &window,
            SamplingMode::Ikcl,
            &opts,
            &mut rng,
            &mut counters,
        )
        .expect("anchor base");

        let params = OptimizerParams::default();
        let arm0 = anchor_arm(model, &anchor, &t_g);
        let bounds = travel_bounds(&anchor, params.v_max, params.t_opt, model.footprint_radius);
        let (q_ref, grid_value) = grid_argmax(
            &scene, model, &t_g, &t_obj.p, &bounds, [4, 4, 8], &arm0, &mut rng,
        );
        assert!(grid_value > 0.0, "anchor window should be feasible");

        let out = optimize_base(
            &scene,
            library().get(&model.id),
            model,
            &t_g,
            &t_obj.p,
            &q_ref,
            Some(&arm0),
            &params,
            &mut crate::test_rng(102),
        );
        let mut warm = Some(arm0.clone());
        let ref_fresh = base_objective(
            &scene,
            model,
            &t_g,
            &t_obj.p,
            &q_ref,
            &mut warm,
            &mut crate::test_rng(103),
        );
        assert!(out.value >= ref_fresh - 1e-12, "optimizer went backwards");
        assert!(
            out.value >= 0.95 * grid_value,
            "grid {grid_value:.6} vs returned {:.6}",
            out.value
        );
    }

    #[test]
    fn lateral_offset_recovers_the_window_optimum() {
        let (scene, t_obj, t_g) = grasp_setup();
        let model = &scene.robots[0].model;
        let mut rng = crate::test_rng(104);
        let mut counters = PlanCounters::default();
        let opts = AsrOptions {
            max_samples: 400,
            ..AsrOptions::default()
        };
        let window = AsrBounds::reach_window(&scene, model, &t_g.p);
        let (anchor, _) = sample_in_asr(
            &scene,
            library().get(&model.id),
            model,
            &t_g,
            &t_obj.p,
            &window,
            SamplingMode::Ikcl,
            &opts,
            &mut rng,
            &mut counters,
        )
        .expect("anchor base");
        let q_ref = BaseConfig::new(anchor.x, anchor.y - 0.015, anchor.theta);
        let arm0 = anchor_arm(model, &anchor, &t_g);
        let params = OptimizerParams {
            t_opt: 0.2,
            ..OptimizerParams::default()
        };
        let bounds = travel_bounds(&q_ref, params.v_max, params.t_opt, model.footprint_radius);
        let (_, grid_value) = grid_argmax(
            &scene, model, &t_g, &t_obj.p, &bounds, [8, 8, 16], &arm0, &mut rng,
        );

        let out = optimize_base(
            &scene,
            library().get(&model.id),
            model,
            &t_g,
            &t_obj.p,
            &q_ref,
            Some(&arm0),
            &params,
            &mut crate::test_rng(105),
        );
        let mut warm = Some(arm0.clone());
        let ref_value = base_objective(
            &scene,
            model,
            &t_g,
            &t_obj.p,
            &q_ref,
            &mut warm,
            &mut crate::test_rng(106),
        );
        assert!(out.value >= ref_value - 1e-12);
        assert!(
            out.value >= 0.95 * grid_value,
            "returned {:.4} vs grid {:.4}",
            out.value,
            grid_value
        );
    }

    #[test]
    fn colliding_window_returns_the_reference_unchanged() {
        let mut scene = calibrated_scene(50, 50);
        let t_obj = scene.start;
        let t_g = scene.grasp_transforms(&t_obj)[0].to_pose().unwrap();
        let q_ref = BaseConfig::new(0.0, -2.2, 1.0);
        scene.grid.fill_rect(-0.4, -2.6, 0.4, -1.8, 2.0);
        let model = scene.robots[0].model.clone();
        let out = optimize_base(
            &scene,
            library().get(&model.id),
            &model,
            &t_g,
            &t_obj.p,
            &q_ref,
            None,
            &OptimizerParams::default(),
            &mut crate::test_rng(107),
        );
        assert!(out.no_improvement);
        assert_eq!(out.base, q_ref);
        assert_eq!(out.value, -1.0);
    }

    #[test]
    fn returned_base_stays_inside_the_travel_window() {
        let (scene, t_obj, t_g) = grasp_setup();
        let model = &scene.robots[0].model;
        let params = OptimizerParams::default();
        let d = params.v_max * params.t_opt;
        let dth = d / model.footprint_radius;
        let mut rng = crate::test_rng(108);
        for k in 0..5 {
            let q_ref = BaseConfig::new(
                rng.gen_range(-1.0..=1.0),
                rng.gen_range(-2.4..=-0.8),
                rng.gen_range(-3.0..=3.0),
            );
            let out = optimize_base(
                &scene,
                library().get(&model.id),
                model,
                &t_g,
                &t_obj.p,
                &q_ref,
                None,
                &params,
                &mut crate::test_rng(109 + k),
            );
            assert!((out.base.x - q_ref.x).abs() <= d + 1e-9);
            assert!((out.base.y - q_ref.y).abs() <= d + 1e-9);
            assert!(angle_diff(out.base.theta, q_ref.theta).abs() <= dth + 1e-9);
        }
    }

    fn short_params() -> OptimizerParams {
        OptimizerParams {
            t_opt: 0.02,
            ..OptimizerParams::default()
        }
    }

    #[test]
    fn stationary_path_holds_station() {
        let scene = calibrated_scene(50, 50);
        let start = scene.start;
        let path = ObjectPath {
            waypoints: vec![start, start],
            durations: vec![1.0],
        };
        let log = simulate_execution(
            &scene,
            Some(library()),
            &path,
            &short_params(),
            &ControllerGains::default(),
            50.0,
            11,
        )
        .expect("stationary run");
        assert_eq!(log.ticks.len(), 51);
        let s = log.summary();
        assert!(s.max_pos_err < 1e-3, "pos err {:.2e}", s.max_pos_err);
        assert!(s.max_null_residual <= 1e-8);
        assert!(s.min_capability > 0.0, "capability {}", s.min_capability);
        let last = log.ticks.last().unwrap();
        for (robot, first) in last.robots.iter().zip(&log.ticks[0].robots) {
            assert!(
                robot.capability >= first.capability - 1e-6,
                "formation quality regressed: {} -> {}",
                first.capability,
                robot.capability
            );
        }
    }

    #[test]
    fn simulation_is_deterministic_per_seed() {
        let scene = calibrated_scene(50, 50);
        let start = scene.start;
        let path = ObjectPath {
            waypoints: vec![start, start],
            durations: vec![0.3],
        };
        let run = || {
            simulate_execution(
                &scene,
                Some(library()),
                &path,
                &short_params(),
                &ControllerGains::default(),
                50.0,
                12,
            )
            .expect("run")
        };
        let a = run();
        let b = run();
        assert_eq!(a, b);
        assert_eq!(a.to_csv(), b.to_csv());
    }

    #[test]
    fn sinusoidal_roll_is_tracked_to_spec_tolerances() {
        let scene = calibrated_scene(50, 50);
        let start = scene.start;
        let period = 10.0;
        let horizon = 5.0;
        let spacing = 0.1;
        let n = (horizon / spacing) as usize;
        let waypoints: Vec<Pose6> = (0..=n)
            .map(|k| {
                let t = k as f64 * spacing;
                let roll = 0.2 * (2.0 * std::f64::consts::PI * t / period).sin();
                Pose6::from_parts(start.p.x, start.p.y, start.p.z, roll, 0.0, 0.0)
            })
            .collect();
        let path = ObjectPath {
            durations: vec![spacing; n],
            waypoints,
        };
        let log = simulate_execution(
            &scene,
            Some(library()),
            &path,
            &short_params(),
            &ControllerGains::default(),
            50.0,
            13,
        )
        .expect("sinusoid run");
        let s = log.summary();
        for (k, err) in s.steady_state_err.iter().enumerate() {
            assert!(*err < 1e-3, "steady-state axis {k} error {err:.2e}");
        }
        assert!(s.max_chain_residual < 5e-3, "chain {:.2e}", s.max_chain_residual);
        assert!(s.max_null_residual <= 1e-8, "null {:.2e}", s.max_null_residual);
    }

    #[test]
    fn teleporting_reference_reports_divergence() {
        let scene = calibrated_scene(50, 50);
        let start = scene.start;
        let jump = Pose6::from_parts(
            start.p.x + 1.0,
            start.p.y,
            start.p.z,
            0.0,
            0.0,
            0.0,
        );
        let path = ObjectPath {
            waypoints: vec![start, jump],
            durations: vec![0.01],
        };
        let err = simulate_execution(
            &scene,
            Some(library()),
            &path,
            &short_params(),
            &ControllerGains::default(),
            100.0,
            14,
        )
        .unwrap_err();
        match err {
            ControlError::DivergedTracking { pos, .. } => assert!(pos > DIVERGE_POS),
            other => panic!("expected divergence, got {other}"),
        }
    }

    #[test]
    fn csv_and_summary_expose_the_log_consistently() {
        let scene = calibrated_scene(50, 50);
        let start = scene.start;
        let path = ObjectPath {
            waypoints: vec![start, start],
            durations: vec![0.2],
        };
        let log = simulate_execution(
            &scene,
            Some(library()),
            &path,
            &short_params(),
            &ControllerGains::default(),
            50.0,
            15,
        )
        .expect("run");
        let csv = log.to_csv();
        let mut lines = csv.lines();
        let header = lines.next().unwrap();
        assert!(header.starts_with("time,r0_ed_x,r0_ed_y"));
        assert!(header.contains("r2_cap,r2_nullres"));
        assert_eq!(lines.count(), log.ticks.len());

        let s = log.summary();
        assert_eq!(s.ticks, log.ticks.len());
        for k in 0..3 {
            assert!(s.steady_state_err[k] <= s.max_pos_err + 1e-15);
        }
        let json = serde_json::to_string(&log).unwrap();
        let back: TrackingLog = serde_json::from_str(&json).unwrap();
        assert_eq!(back, log);
    }

    #[test]
    fn start_configs_close_the_chain_tightly() {
        let scene = calibrated_scene(50, 50);
        let configs = start_configs(&scene, Some(library()), &scene.start, 16).unwrap();
        assert_eq!(configs.len(), 3);
        let grasps = scene.grasp_transforms(&scene.start);
        for (q, grasp) in configs.iter().zip(&grasps) {
            let model = &scene.robots[0].model;
            let ee = fk_world(model, q).to_pose().unwrap();
            let target = grasp.to_pose().unwrap();
            let err = target.diff(&ee);
            assert!(err.fixed_rows::<3>(0).norm() < 1e-6);
            assert!(err.fixed_rows::<3>(3).norm() < 1e-6);
        }
    }
}

//! Centralized object-pose planners: single-tree and bidirectional RRT
//! plus a roadmap planner, all searching the 6-DOF object-pose space with
//! validity defined by per-robot base-placement sampling (the allowed
//! sampling region), in either capability-map or inverse-kinematics mode.
//!
//! Planning time is budgeted by a deterministic work model: every
//! primitive operation is charged a frozen pseudo-second cost, and the
//! budget cuts off on accumulated work rather than the wall clock. Runs
//! with equal inputs and seeds therefore produce identical results; a wall
//! backstop at 1.05x the budget exists only as a safety net.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::capmap::{CapabilityMap, CmLibrary};
use crate::geometry::Pose6;
use crate::kinematics::{ik_arm, self_collides, IkOptions};
use crate::metrics::{robot_capability, DEFAULT_THRESHOLD};
use crate::model::{BaseConfig, MMConfig, RobotModel};
use crate::scene::{
    arm_in_collision, base_in_collision, object_in_collision, Scene, SamplingBounds,
};

/// Meters-per-radian exchange rate of the object-space planner metric.
pub const ROTATION_WEIGHT: f64 = 0.5;

/// Default extension step in weighted-metric units.
pub const DEFAULT_STEP: f64 = 0.3;

/// Default goal tolerance in weighted-metric units.
pub const DEFAULT_GOAL_TOL: f64 = 1e-3;

/// Default object speed for time parameterization, weighted units/s.
pub const DEFAULT_OBJECT_SPEED: f64 = 0.05;

/// Default base-sample cap per allowed-sampling-region query.
pub const DEFAULT_MAX_ASR_SAMPLES: usize = 100;

/// Margin added to the arm reach when windowing base-sampling bounds.
const REACH_MARGIN: f64 = 0.05;

/// Shortcut-smoothing attempts in path post-processing.
const SHORTCUT_ATTEMPTS: usize = 100;

/// Roadmap connectivity degree.
const PRM_NEIGHBORS: usize = 8;

/// Frozen pseudo-second costs of the budgeted primitives. Values are
/// calibrated against single-core wall time and deliberately rounded up a
/// little, so the deterministic budget exhausts before the wall backstop.
mod cost {
    pub const POSE_SAMPLE: f64 = 0.4e-6;
    pub const NN_VISIT: f64 = 0.05e-6;
    pub const OBJECT_CHECK: f64 = 4e-6;
    pub const BASE_DRAW: f64 = 1.5e-6;
    pub const CM_QUERY: f64 = 0.6e-6;
    pub const IK_CALL: f64 = 800e-6;
    pub const ARM_CHECK: f64 = 3e-6;
    pub const METRIC_EVAL: f64 = 8e-6;
    pub const ASTAR_EDGE: f64 = 0.15e-6;
    /// One constraint-projection Newton iteration costs `n_robots^3`
    /// units: the stacked-Jacobian SVD dominates and grows cubically.
    pub const PROJ_UNIT: f64 = 3e-6;
}

#[derive(Debug, Error)]
pub enum PlanError {
    #[error("invalid plan request: {0}")]
    InvalidRequest(String),
    #[error("capability-map mode without a map for model {0}")]
    MissingCapabilityMap(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PlannerKind {
    Rrt,
    RrtConnect,
    Prm,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SamplingMode {
    Ikcl,
    Cmcl,
}

#[derive(Debug, Clone)]
pub struct PlanRequest {
    pub start: Pose6,
    pub goal: Pose6,
    /// Planning budget in (pseudo) seconds.
    pub budget_s: f64,
    pub planner: PlannerKind,
    pub mode: SamplingMode,
    pub seed: u64,
    /// Extension step in weighted-metric units.
    pub step: f64,
    pub goal_tol: f64,
    /// Constant speed used for time parameterization, weighted units/s.
    pub object_speed: f64,
    /// Per-robot metric threshold a base sample must attain.
    pub thres: f64,
    pub max_asr_samples: usize,
}

impl PlanRequest {
    pub fn new(start: Pose6, goal: Pose6, budget_s: f64) -> Self {
        PlanRequest {
            start,
            goal,
            budget_s,
            planner: PlannerKind::RrtConnect,
            mode: SamplingMode::Cmcl,
            seed: 0,
            step: DEFAULT_STEP,
            goal_tol: DEFAULT_GOAL_TOL,
            object_speed: DEFAULT_OBJECT_SPEED,
            thres: DEFAULT_THRESHOLD,
            max_asr_samples: DEFAULT_MAX_ASR_SAMPLES,
        }
    }

    fn validate(&self) -> Result<(), PlanError> {
        if !(self.budget_s > 0.0) {
            return Err(PlanError::InvalidRequest(format!(
                "budget must be > 0, got {}",
                self.budget_s
            )));
        }
        if !(self.step > 0.0) {
            return Err(PlanError::InvalidRequest(format!(
                "step must be > 0, got {}",
                self.step
            )));
        }
        if !(self.object_speed > 0.0) {
            return Err(PlanError::InvalidRequest(format!(
                "object speed must be > 0, got {}",
                self.object_speed
            )));
        }
        Ok(())
    }
}

/// Planned object motion: waypoints plus one duration per segment.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectPath {
    pub waypoints: Vec<Pose6>,
    pub durations: Vec<f64>,
}

impl ObjectPath {
    pub fn total_duration(&self) -> f64 {
        self.durations.iter().sum()
    }

    pub fn length(&self) -> f64 {
        self.waypoints
            .windows(2)
            .map(|w| weighted_distance(&w[0], &w[1]))
            .sum()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum PlanStatus {
    Success,
    Timeout,
    InvalidGoal,
    /// The object path exists but some waypoint admits no valid robot
    /// placement; reported by the decoupled baseline.
    RobotInfeasible { waypoint: usize },
}

/// Raw counters for every budgeted primitive.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct PlanCounters {
    pub samples: u64,
    pub valid_checks: u64,
    pub cm_queries: u64,
    pub ik_calls: u64,
    pub base_draws: u64,
    pub nn_visits: u64,
    pub arm_checks: u64,
    pub metric_evals: u64,
    pub astar_edges: u64,
    /// Constraint-projection Newton iterations, scaled by robot count
    /// cubed at the charging site.
    pub proj_units: u64,
}

impl PlanCounters {
    /// Accumulated deterministic work in pseudo-seconds.
    pub fn work(&self) -> f64 {
        self.samples as f64 * cost::POSE_SAMPLE
            + self.valid_checks as f64 * cost::OBJECT_CHECK
            + self.cm_queries as f64 * cost::CM_QUERY
            + self.ik_calls as f64 * cost::IK_CALL
            + self.base_draws as f64 * cost::BASE_DRAW
            + self.nn_visits as f64 * cost::NN_VISIT
            + self.arm_checks as f64 * cost::ARM_CHECK
            + self.metric_evals as f64 * cost::METRIC_EVAL
            + self.astar_edges as f64 * cost::ASTAR_EDGE
            + self.proj_units as f64 * cost::PROJ_UNIT
    }
}

/// Reported planning statistics.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct PlanStats {
    pub samples: u64,
    pub valid_checks: u64,
    pub cm_queries: u64,
    pub ik_calls: u64,
    /// Deterministic pseudo-seconds consumed.
    pub time_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanResult {
    pub status: PlanStatus,
    pub path: Option<ObjectPath>,
    pub stats: PlanStats,
}

/// Weighted object-space distance: meters plus [`ROTATION_WEIGHT`] per
/// radian of wrapped per-axis rotation difference.
pub fn weighted_distance(a: &Pose6, b: &Pose6) -> f64 {
    let d = b.diff(a);
    let dp = Vector3::new(d[0], d[1], d[2]).norm();
    let da = Vector3::new(d[3], d[4], d[5]).norm();
    dp + ROTATION_WEIGHT * da
}

/// Metric-linear interpolation from `a` to `b`; each rotation axis moves
/// along its shortest wrapped arc.
pub fn interpolate(a: &Pose6, b: &Pose6, s: f64) -> Pose6 {
    let d = b.diff(a);
    Pose6::from_parts(
        a.p.x + s * d[0],
        a.p.y + s * d[1],
        a.p.z + s * d[2],
        a.alpha.x + s * d[3],
        a.alpha.y + s * d[4],
        a.alpha.z + s * d[5],
    )
}

/// Base-placement sampling window: an xy box with a heading range.
#[derive(Debug, Clone, PartialEq)]
pub struct AsrBounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub theta: [f64; 2],
}

impl AsrBounds {
    /// Window covering every base placement that could reach a grasp at
    /// `p_g`: the reach disc around the grasp's ground projection,
    /// clipped to the scene extent. Placements outside it can never
    /// realize the grasp, so restricting sampling to it preserves the
    /// full-workspace semantics.
    pub fn reach_window(scene: &Scene, model: &RobotModel, p_g: &Vector3<f64>) -> Self {
        let r = model.max_horizontal_reach() + REACH_MARGIN;
        let ([x0, x1], [y0, y1]) = scene.grid.extent();
        AsrBounds {
            x: [(p_g.x - r).max(x0), (p_g.x + r).min(x1)],
            y: [(p_g.y - r).max(y0), (p_g.y + r).min(y1)],
            theta: [-std::f64::consts::PI, std::f64::consts::PI],
        }
    }

    pub fn is_empty(&self) -> bool {
        self.x[0] >= self.x[1] || self.y[0] >= self.y[1]
    }
}

/// Options shared by the validity-checking layers.
#[derive(Debug, Clone, Copy)]
pub struct AsrOptions {
    pub thres: f64,
    pub max_samples: usize,
}

impl Default for AsrOptions {
    fn default() -> Self {
        AsrOptions {
            thres: DEFAULT_THRESHOLD,
            max_samples: DEFAULT_MAX_ASR_SAMPLES,
        }
    }
}

/// Samples base placements inside `bounds` until one realizes the grasp
/// `t_g` (world frame) with per-robot metric at least `thres`, or gives
/// up after `max_samples` draws. Capability-map mode answers each draw by
/// a map lookup; inverse-kinematics mode solves the arm, rejects
/// scene-colliding arms, and evaluates the full metric against the object
/// center `p_obj`.
#[allow(clippy::too_many_arguments)]
pub fn sample_in_asr(
    scene: &Scene,
    cm: Option<&CapabilityMap>,
    model: &RobotModel,
    t_g: &Pose6,
    p_obj: &Vector3<f64>,
    bounds: &AsrBounds,
    mode: SamplingMode,
    opts: &AsrOptions,
    rng: &mut impl Rng,
    counters: &mut PlanCounters,
) -> Option<(BaseConfig, f64)> {
    if bounds.is_empty() {
        return None;
    }
    let grasp_w = t_g.to_transform();
    let ik_opts = IkOptions {
        restarts: 2,
        ..IkOptions::default()
    };
    for _ in 0..opts.max_samples {
        counters.base_draws += 1;
        let q_b = BaseConfig::new(
            rng.gen_range(bounds.x[0]..=bounds.x[1]),
            rng.gen_range(bounds.y[0]..=bounds.y[1]),
            rng.gen_range(bounds.theta[0]..=bounds.theta[1]),
        );
        if base_in_collision(scene, &q_b, model.footprint_radius) {
            continue;
        }
        let pose_eb = q_b.to_transform().invert().compose(&grasp_w);
        match mode {
            SamplingMode::Cmcl => {
                let map = cm.expect("capability-map mode requires a map");
                let Ok(rel) = pose_eb.to_pose() else { continue };
                counters.cm_queries += 1;
                if let Some(v) = map.query(&rel) {
                    if v >= opts.thres {
                        return Some((q_b, v));
                    }
                }
            }
            SamplingMode::Ikcl => {
                counters.ik_calls += 1;
                let Some(q_a) = ik_arm(model, &pose_eb, None, &ik_opts, rng) else {
                    continue;
                };
                if self_collides(model, &q_a) {
                    continue;
                }
                let q = MMConfig::new(q_b, q_a);
                counters.arm_checks += 1;
                if arm_in_collision(scene, model, &q) {
                    continue;
                }
                counters.metric_evals += 1;
                let Ok(v) = robot_capability(model, &q, p_obj) else {
                    continue;
                };
                if v >= opts.thres {
                    return Some((q_b, v));
                }
            }
        }
    }
    None
}

/// Object-pose validity: the pose must be collision-free and every
/// robot's allowed sampling region must be nonempty (a valid base sample
/// must exist for every grasp).
#[allow(clippy::too_many_arguments)]
pub fn valid_checking(
    scene: &Scene,
    cms: Option<&CmLibrary>,
    t_rand: &Pose6,
    mode: SamplingMode,
    opts: &AsrOptions,
    rng: &mut impl Rng,
    counters: &mut PlanCounters,
) -> bool {
    counters.valid_checks += 1;
    if object_in_collision(scene, t_rand) {
        return false;
    }
    let grasps = scene.grasp_transforms(t_rand);
    for (robot, grasp_w) in scene.robots.iter().zip(&grasps) {
        let Ok(t_g) = grasp_w.to_pose() else {
            return false;
        };
        let cm = cms.and_then(|lib| lib.get(&robot.model.id));
        let bounds = AsrBounds::reach_window(scene, &robot.model, &t_g.p);
        if sample_in_asr(
            scene,
            cm,
            &robot.model,
            &t_g,
            &t_rand.p,
            &bounds,
            mode,
            opts,
            rng,
            counters,
        )
        .is_none()
        {
            return false;
        }
    }
    true
}

/// Uniform object-pose sample within the scene's sampling bounds.
fn sample_pose(bounds: &SamplingBounds, rng: &mut impl Rng) -> Pose6 {
    fn draw(r: [f64; 2], rng: &mut impl Rng) -> f64 {
        if r[0] >= r[1] {
            r[0]
        } else {
            rng.gen_range(r[0]..=r[1])
        }
    }
    Pose6::from_parts(
        draw(bounds.x, rng),
        draw(bounds.y, rng),
        draw(bounds.z, rng),
        draw(bounds.roll, rng),
        draw(bounds.pitch, rng),
        draw(bounds.yaw, rng),
    )
}

/// Draws a uniform sample, finds its nearest tree node under the weighted
/// metric, and steers from that node toward the sample by at most `step`.
pub fn sample_and_extend(
    nodes: &[Pose6],
    bounds: &SamplingBounds,
    step: f64,
    rng: &mut impl Rng,
    counters: &mut PlanCounters,
) -> Pose6 {
    counters.samples += 1;
    let target = sample_pose(bounds, rng);
    let (near, _) = nearest(nodes, &target, counters);
    steer(&nodes[near], &target, step)
}

fn nearest(nodes: &[Pose6], target: &Pose6, counters: &mut PlanCounters) -> (usize, f64) {
    counters.nn_visits += nodes.len() as u64;
    let mut best = (0, f64::INFINITY);
    for (i, n) in nodes.iter().enumerate() {
        let d = weighted_distance(n, target);
        if d < best.1 {
            best = (i, d);
        }
    }
    best
}

fn steer(from: &Pose6, toward: &Pose6, step: f64) -> Pose6 {
    let d = weighted_distance(from, toward);
    if d <= step {
        *toward
    } else {
        interpolate(from, toward, step / d)
    }
}

struct Ctx<'a> {
    scene: &'a Scene,
    cms: Option<&'a CmLibrary>,
    mode: SamplingMode,
    opts: AsrOptions,
    budget_s: f64,
    wall_start: std::time::Instant,
    counters: PlanCounters,
}

impl Ctx<'_> {
    fn exhausted(&self) -> bool {
        self.counters.work() >= self.budget_s
            || self.wall_start.elapsed().as_secs_f64() >= 1.05 * self.budget_s
    }

    fn valid(&mut self, pose: &Pose6, rng: &mut ChaCha8Rng) -> bool {
        valid_checking(
            self.scene,
            self.cms,
            pose,
            self.mode,
            &self.opts,
            rng,
            &mut self.counters,
        )
    }

    /// Validates the open segment `(from, to]` at spacing `step / 2`.
    fn valid_edge(&mut self, from: &Pose6, to: &Pose6, step: f64, rng: &mut ChaCha8Rng) -> bool {
        let d = weighted_distance(from, to);
        let checks = (d / (step / 2.0)).ceil().max(1.0) as usize;
        for i in 1..=checks {
            let s = i as f64 / checks as f64;
            let pose = interpolate(from, to, s);
            if !self.valid(&pose, rng) {
                return false;
            }
        }
        true
    }
}

struct Tree {
    nodes: Vec<Pose6>,
    parents: Vec<Option<usize>>,
}

impl Tree {
    fn rooted(at: Pose6) -> Self {
        Tree {
            nodes: vec![at],
            parents: vec![None],
        }
    }

    fn add(&mut self, pose: Pose6, parent: usize) -> usize {
        self.nodes.push(pose);
        self.parents.push(Some(parent));
        self.nodes.len() - 1
    }

    fn chain_to_root(&self, mut idx: usize) -> Vec<Pose6> {
        let mut out = vec![self.nodes[idx]];
        while let Some(p) = self.parents[idx] {
            out.push(self.nodes[p]);
            idx = p;
        }
        out
    }
}

/// Plans an object path from the request's start to its goal.
pub fn plan(
    scene: &Scene,
    cms: Option<&CmLibrary>,
    request: &PlanRequest,
) -> Result<PlanResult, PlanError> {
    request.validate()?;
    if request.mode == SamplingMode::Cmcl {
        let lib = cms.ok_or_else(|| {
            PlanError::MissingCapabilityMap("no capability maps supplied".into())
        })?;
        for robot in &scene.robots {
            if lib.get(&robot.model.id).is_none() {
                return Err(PlanError::MissingCapabilityMap(robot.model.id.clone()));
            }
        }
    }

    let mut rng = ChaCha8Rng::seed_from_u64(request.seed);
    let mut ctx = Ctx {
        scene,
        cms,
        mode: request.mode,
        opts: AsrOptions {
            thres: request.thres,
            max_samples: request.max_asr_samples,
        },
        budget_s: request.budget_s,
        wall_start: std::time::Instant::now(),
        counters: PlanCounters::default(),
    };

    if !ctx.valid(&request.start, &mut rng) || !ctx.valid(&request.goal, &mut rng) {
        return Ok(finish(PlanStatus::InvalidGoal, None, &ctx, request));
    }

    let raw = match request.planner {
        PlannerKind::RrtConnect => rrt_connect(&mut ctx, request, &mut rng),
        PlannerKind::Rrt => rrt(&mut ctx, request, &mut rng),
        PlannerKind::Prm => prm(&mut ctx, request, &mut rng),
    };

    match raw {
        Some(waypoints) => {
            let path = postprocess_path(
                waypoints,
                scene,
                cms,
                request,
                &mut ctx.counters,
                &mut rng,
            );
            Ok(finish(PlanStatus::Success, Some(path), &ctx, request))
        }
        None => Ok(finish(PlanStatus::Timeout, None, &ctx, request)),
    }
}

fn finish(
    status: PlanStatus,
    path: Option<ObjectPath>,
    ctx: &Ctx<'_>,
    _request: &PlanRequest,
) -> PlanResult {
    PlanResult {
        status,
        path,
        stats: PlanStats {
            samples: ctx.counters.samples,
            valid_checks: ctx.counters.valid_checks,
            cm_queries: ctx.counters.cm_queries,
            ik_calls: ctx.counters.ik_calls,
            time_s: ctx.counters.work(),
        },
    }
}

fn rrt_connect(
    ctx: &mut Ctx<'_>,
    request: &PlanRequest,
    rng: &mut ChaCha8Rng,
) -> Option<Vec<Pose6>> {
    let mut tree_a = Tree::rooted(request.start);
    let mut tree_b = Tree::rooted(request.goal);
    // Tracks whether tree_a is currently the start tree.
    let mut a_is_start = true;

    while !ctx.exhausted() {
        ctx.counters.samples += 1;
        let target = sample_pose(&ctx.scene.sampling, rng);
        let (near_a, _) = nearest(&tree_a.nodes, &target, &mut ctx.counters);
        let q_new = steer(&tree_a.nodes[near_a], &target, request.step);
        if !ctx.valid_edge(&tree_a.nodes[near_a], &q_new, request.step, rng) {
            std::mem::swap(&mut tree_a, &mut tree_b);
            a_is_start = !a_is_start;
            continue;
        }
        let new_a = tree_a.add(q_new, near_a);

        // Greedy connect: march tree_b toward the new node until it
        // reaches it or a step fails validation.
        let (mut near_b, _) = nearest(&tree_b.nodes, &q_new, &mut ctx.counters);
        loop {
            if ctx.exhausted() {
                break;
            }
            let q_next = steer(&tree_b.nodes[near_b], &q_new, request.step);
            if !ctx.valid_edge(&tree_b.nodes[near_b], &q_next, request.step, rng) {
                break;
            }
            near_b = tree_b.add(q_next, near_b);
            if weighted_distance(&q_next, &q_new) < 1e-12 {
                let mut from_a = tree_a.chain_to_root(new_a);
                from_a.reverse();
                let from_b = tree_b.chain_to_root(near_b);
                // from_b starts at the connect point already present at
                // the end of from_a.
                from_a.extend(from_b.into_iter().skip(1));
                if !a_is_start {
                    from_a.reverse();
                }
                return Some(from_a);
            }
        }
        std::mem::swap(&mut tree_a, &mut tree_b);
        a_is_start = !a_is_start;
    }
    None
}

fn rrt(ctx: &mut Ctx<'_>, request: &PlanRequest, rng: &mut ChaCha8Rng) -> Option<Vec<Pose6>> {
    let mut tree = Tree::rooted(request.start);
    while !ctx.exhausted() {
        ctx.counters.samples += 1;
        let target = sample_pose(&ctx.scene.sampling, rng);
        let (near, _) = nearest(&tree.nodes, &target, &mut ctx.counters);
        let q_new = steer(&tree.nodes[near], &target, request.step);
        if !ctx.valid_edge(&tree.nodes[near], &q_new, request.step, rng) {
            continue;
        }
        let mut tip = tree.add(q_new, near);

        // Greedy goal connect from the fresh node.
        loop {
            if ctx.exhausted() {
                break;
            }
            let d_goal = weighted_distance(&tree.nodes[tip], &request.goal);
            if d_goal <= request.goal_tol {
                let mut path = tree.chain_to_root(tip);
                path.reverse();
                if d_goal > 0.0 {
                    path.push(request.goal);
                }
                return Some(path);
            }
            let q_next = steer(&tree.nodes[tip], &request.goal, request.step);
            if !ctx.valid_edge(&tree.nodes[tip], &q_next, request.step, rng) {
                break;
            }
            tip = tree.add(q_next, tip);
        }
    }
    None
}

fn prm(ctx: &mut Ctx<'_>, request: &PlanRequest, rng: &mut ChaCha8Rng) -> Option<Vec<Pose6>> {
    let mut nodes = vec![request.start, request.goal];
    let mut adjacency: Vec<Vec<(usize, f64)>> = vec![Vec::new(), Vec::new()];

    // Connect the node at `idx` to its nearest roadmap neighbors with
    // validated edges.
    fn link(
        ctx: &mut Ctx<'_>,
        request: &PlanRequest,
        nodes: &[Pose6],
        adjacency: &mut [Vec<(usize, f64)>],
        idx: usize,
        rng: &mut ChaCha8Rng,
    ) {
        let mut order: Vec<(f64, usize)> = nodes
            .iter()
            .enumerate()
            .filter(|(j, _)| *j != idx)
            .map(|(j, n)| (weighted_distance(n, &nodes[idx]), j))
            .collect();
        ctx.counters.nn_visits += nodes.len() as u64;
        order.sort_by(|a, b| a.0.total_cmp(&b.0));
        for &(d, j) in order.iter().take(PRM_NEIGHBORS) {
            if ctx.exhausted() {
                return;
            }
            if adjacency[idx].iter().any(|(k, _)| *k == j) {
                continue;
            }
            if ctx.valid_edge(&nodes[idx], &nodes[j], request.step, rng) {
                adjacency[idx].push((j, d));
                adjacency[j].push((idx, d));
            }
        }
    }

    link(ctx, request, &nodes, &mut adjacency, 0, rng);
    link(ctx, request, &nodes, &mut adjacency, 1, rng);

    // Grow the roadmap until the budget is spent; the query runs after.
    while !ctx.exhausted() {
        ctx.counters.samples += 1;
        let cand = sample_pose(&ctx.scene.sampling, rng);
        if !ctx.valid(&cand, rng) {
            continue;
        }
        nodes.push(cand);
        adjacency.push(Vec::new());
        let idx = nodes.len() - 1;
        link(ctx, request, &nodes, &mut adjacency, idx, rng);
    }

    astar(&nodes, &adjacency, 0, 1, &mut ctx.counters).map(|idxs| {
        let mut out: Vec<Pose6> = idxs.into_iter().map(|i| nodes[i]).collect();
        densify(&mut out, request.step);
        out
    })
}

/// Inserts interpolated waypoints so consecutive poses sit within `step`.
fn densify(path: &mut Vec<Pose6>, step: f64) {
    let mut out = vec![path[0]];
    for w in path.windows(2) {
        let d = weighted_distance(&w[0], &w[1]);
        let pieces = (d / step).ceil().max(1.0) as usize;
        for i in 1..=pieces {
            out.push(interpolate(&w[0], &w[1], i as f64 / pieces as f64));
        }
    }
    *path = out;
}

fn astar(
    nodes: &[Pose6],
    adjacency: &[Vec<(usize, f64)>],
    from: usize,
    to: usize,
    counters: &mut PlanCounters,
) -> Option<Vec<usize>> {
    use std::cmp::Reverse;
    use std::collections::BinaryHeap;

    let h = |i: usize| weighted_distance(&nodes[i], &nodes[to]);
    let mut dist = vec![f64::INFINITY; nodes.len()];
    let mut prev = vec![usize::MAX; nodes.len()];
    let mut heap: BinaryHeap<Reverse<(OrdF64, usize)>> = BinaryHeap::new();
    dist[from] = 0.0;
    heap.push(Reverse((OrdF64(h(from)), from)));
    while let Some(Reverse((_, u))) = heap.pop() {
        if u == to {
            let mut path = vec![to];
            let mut cur = to;
            while cur != from {
                cur = prev[cur];
                path.push(cur);
            }
            path.reverse();
            return Some(path);
        }
        for &(v, w) in &adjacency[u] {
            counters.astar_edges += 1;
            let nd = dist[u] + w;
            if nd < dist[v] {
                dist[v] = nd;
                prev[v] = u;
                heap.push(Reverse((OrdF64(nd + h(v)), v)));
            }
        }
    }
    None
}

/// Total-order wrapper so finite path costs can live in a binary heap.
#[derive(PartialEq, PartialOrd)]
struct OrdF64(f64);
impl Eq for OrdF64 {}
impl Ord for OrdF64 {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Shortcut smoothing followed by constant-speed time parameterization.
pub fn postprocess_path(
    mut waypoints: Vec<Pose6>,
    scene: &Scene,
    cms: Option<&CmLibrary>,
    request: &PlanRequest,
    counters: &mut PlanCounters,
    rng: &mut ChaCha8Rng,
) -> ObjectPath {
    let opts = AsrOptions {
        thres: request.thres,
        max_samples: request.max_asr_samples,
    };
    for _ in 0..SHORTCUT_ATTEMPTS {
        if waypoints.len() < 3 {
            break;
        }
        let i = rng.gen_range(0..waypoints.len() - 2);
        let j = rng.gen_range(i + 2..waypoints.len());
        let d = weighted_distance(&waypoints[i], &waypoints[j]);
        let old: f64 = waypoints[i..=j]
            .windows(2)
            .map(|w| weighted_distance(&w[0], &w[1]))
            .sum();
        if d >= old - 1e-9 {
            continue;
        }
        // Validate the straight segment at step/2 spacing, then splice it
        // in re-discretized at step spacing (every other validated pose).
        let pieces = (d / request.step).ceil().max(1.0) as usize;
        let fine = 2 * pieces;
        let mut ok = true;
        for k in 1..fine {
            let pose = interpolate(&waypoints[i], &waypoints[j], k as f64 / fine as f64);
            if !valid_checking(scene, cms, &pose, request.mode, &opts, rng, counters) {
                ok = false;
                break;
            }
        }
        if !ok {
            continue;
        }
        let mut replacement = Vec::with_capacity(pieces - 1);
        for k in 1..pieces {
            replacement.push(interpolate(
                &waypoints[i],
                &waypoints[j],
                k as f64 / pieces as f64,
            ));
        }
        waypoints.splice(i + 1..j, replacement);
    }

    let durations = waypoints
        .windows(2)
        .map(|w| weighted_distance(&w[0], &w[1]) / request.object_speed)
        .collect();
    ObjectPath {
        waypoints,
        durations,
    }
}

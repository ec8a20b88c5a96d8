//! 2.5-D world model: a height-field occupancy grid, the transported
//! object's geometry and grasp frames, collision queries, and scene file
//! I/O.
//!
//! Obstacles are vertical prisms extruded from the ground, one height per
//! grid cell. Bases may never cross occupied cells; the object and the arms
//! may pass over obstacles lower than their own height, which is what makes
//! crossing strategies possible.

use std::path::Path;

use nalgebra::{Vector2, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{GeometryError, Pose6, Transform};
use crate::kinematics::arm_points_world;
use crate::model::{BaseConfig, CompositeConfig, MMConfig, ModelError, RobotModel};

/// Current scene file format version.
pub const SCENE_FORMAT_VERSION: u32 = 1;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("failed to read {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error("failed to parse {path}: {message}")]
    Parse { path: String, message: String },
    #[error("scene file has format_version {found}, this build reads {SCENE_FORMAT_VERSION}")]
    VersionMismatch { found: u32 },
    #[error(transparent)]
    Model(#[from] ModelError),
}

/// Height-field occupancy grid. Heights are meters above the ground plane;
/// zero means free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HeightGrid {
    /// World coordinates of the grid's lower corner (cell `(0, 0)`).
    pub origin: [f64; 2],
    pub cell_size: f64,
    pub nx: usize,
    pub ny: usize,
    /// Row-major heights, indexed `iy * nx + ix`.
    pub heights: Vec<f64>,
}

impl HeightGrid {
    /// An all-free grid covering `[origin, origin + (nx, ny) * cell_size]`.
    pub fn empty(origin: [f64; 2], cell_size: f64, nx: usize, ny: usize) -> Self {
        HeightGrid {
            origin,
            cell_size,
            nx,
            ny,
            heights: vec![0.0; nx * ny],
        }
    }

    pub fn height(&self, ix: usize, iy: usize) -> f64 {
        self.heights[iy * self.nx + ix]
    }

    /// World extent covered by the grid: `(x range, y range)`.
    pub fn extent(&self) -> ([f64; 2], [f64; 2]) {
        (
            [self.origin[0], self.origin[0] + self.cell_size * self.nx as f64],
            [self.origin[1], self.origin[1] + self.cell_size * self.ny as f64],
        )
    }

    /// Largest obstacle height in the grid.
    pub fn max_height(&self) -> f64 {
        self.heights.iter().copied().fold(0.0, f64::max)
    }

    /// Sets every cell whose center lies in `[x0, x1) x [y0, y1)` to height
    /// `h`. Authoring helper for the bundled scenes.
    pub fn fill_rect(&mut self, x0: f64, y0: f64, x1: f64, y1: f64, h: f64) {
        for iy in 0..self.ny {
            for ix in 0..self.nx {
                let cx = self.origin[0] + (ix as f64 + 0.5) * self.cell_size;
                let cy = self.origin[1] + (iy as f64 + 0.5) * self.cell_size;
                if cx >= x0 && cx < x1 && cy >= y0 && cy < y1 {
                    self.heights[iy * self.nx + ix] = h;
                }
            }
        }
    }

    /// Cell index range whose rectangles intersect the closed box
    /// `[x0, x1] x [y0, y1]`, clamped to the grid; `None` when the box
    /// misses the grid entirely.
    fn cell_range(&self, x0: f64, y0: f64, x1: f64, y1: f64) -> Option<(usize, usize, usize, usize)> {
        let to_ix = |x: f64| ((x - self.origin[0]) / self.cell_size).floor() as isize;
        let to_iy = |y: f64| ((y - self.origin[1]) / self.cell_size).floor() as isize;
        let (ix0, iy0, ix1, iy1) = (to_ix(x0), to_iy(y0), to_ix(x1), to_iy(y1));
        if ix1 < 0 || iy1 < 0 || ix0 >= self.nx as isize || iy0 >= self.ny as isize {
            return None;
        }
        Some((
            ix0.max(0) as usize,
            iy0.max(0) as usize,
            (ix1 as usize).min(self.nx - 1),
            (iy1 as usize).min(self.ny - 1),
        ))
    }

    /// World rectangle of one cell.
    fn cell_rect(&self, ix: usize, iy: usize) -> ([f64; 2], [f64; 2]) {
        let x0 = self.origin[0] + ix as f64 * self.cell_size;
        let y0 = self.origin[1] + iy as f64 * self.cell_size;
        ([x0, x0 + self.cell_size], [y0, y0 + self.cell_size])
    }
}

/// The transported object: an oriented box. The collision slab convention
/// places the object's vertical extent at
/// `[z_center - half_extents.z, z_center + half_extents.z]` regardless of
/// tilt.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ObjectSpec {
    pub half_extents: [f64; 3],
}

impl ObjectSpec {
    pub fn half_extents_vec(&self) -> Vector3<f64> {
        Vector3::from(self.half_extents)
    }
}

/// Object sampling bounds for the planners: position box plus RPY ranges.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplingBounds {
    pub x: [f64; 2],
    pub y: [f64; 2],
    pub z: [f64; 2],
    pub roll: [f64; 2],
    pub pitch: [f64; 2],
    pub yaw: [f64; 2],
}

impl SamplingBounds {
    fn intervals(&self) -> [[f64; 2]; 6] {
        [self.x, self.y, self.z, self.roll, self.pitch, self.yaw]
    }
}

/// One robot in a scene: its model (stored by file reference), and its
/// rigid grasp frame in the object frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobotRef {
    /// Model file path, relative to the scene file's directory.
    pub model_file: String,
    /// Resolved model; skipped in files, filled in by [`load_scene`].
    #[serde(skip)]
    pub model: RobotModel,
    /// Grasp frame in the object frame.
    pub grasp: Pose6,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Scene {
    pub name: String,
    pub grid: HeightGrid,
    pub sampling: SamplingBounds,
    pub object: ObjectSpec,
    pub robots: Vec<RobotRef>,
    /// Object start and goal poses.
    pub start: Pose6,
    pub goal: Pose6,
    /// Frozen full-system start configuration on the closed-chain manifold,
    /// used by the composite-space frameworks and the execution simulator.
    pub c_start: Option<CompositeConfig>,
    pub c_goal: Option<CompositeConfig>,
}

#[derive(Serialize, Deserialize)]
struct SceneFile {
    format_version: u32,
    #[serde(flatten)]
    scene: Scene,
}

impl Scene {
    pub fn n_robots(&self) -> usize {
        self.robots.len()
    }

    /// Structural invariants, checked on load and before save.
    pub fn validate(&self) -> Result<(), SceneError> {
        let fail = |message: String| {
            Err(SceneError::Parse {
                path: format!("scene {}", self.name),
                message,
            })
        };
        if self.grid.cell_size <= 0.0 {
            return fail(format!("grid.cell_size must be > 0, got {}", self.grid.cell_size));
        }
        if self.grid.heights.len() != self.grid.nx * self.grid.ny {
            return fail(format!(
                "grid.heights has {} entries, expected nx * ny = {}",
                self.grid.heights.len(),
                self.grid.nx * self.grid.ny
            ));
        }
        if self.grid.heights.iter().any(|h| *h < 0.0 || !h.is_finite()) {
            return fail("grid.heights must be finite and >= 0".into());
        }
        if self.object.half_extents.iter().any(|h| *h <= 0.0) {
            return fail(format!(
                "object.half_extents must be > 0, got {:?}",
                self.object.half_extents
            ));
        }
        for (name, [lo, hi]) in ["x", "y", "z", "roll", "pitch", "yaw"]
            .into_iter()
            .zip(self.sampling.intervals())
        {
            if lo >= hi {
                return fail(format!("sampling.{name} = [{lo}, {hi}] is not an interval"));
            }
        }
        if self.robots.is_empty() {
            return fail("scene has no robots".into());
        }
        Ok(())
    }

    /// Grasp frames in the world frame for an object pose, ordered by robot
    /// index.
    pub fn grasp_transforms(&self, t_obj: &Pose6) -> Vec<Transform> {
        let obj = t_obj.to_transform();
        self.robots
            .iter()
            .map(|r| obj.compose(&r.grasp.to_transform()))
            .collect()
    }

    /// [`Scene::grasp_transforms`] as poses; fails only if a grasp frame
    /// lands on the representation singularity.
    pub fn grasp_poses(&self, t_obj: &Pose6) -> Result<Vec<Pose6>, GeometryError> {
        self.grasp_transforms(t_obj)
            .iter()
            .map(Transform::to_pose)
            .collect()
    }
}

/// True when the base footprint disc overlaps any occupied cell or exits
/// the world bounds. Bases never cross obstacles regardless of height.
pub fn base_in_collision(scene: &Scene, q_b: &BaseConfig, footprint_radius: f64) -> bool {
    let grid = &scene.grid;
    let (xr, yr) = grid.extent();
    let r = footprint_radius;
    if q_b.x - r < xr[0] || q_b.x + r > xr[1] || q_b.y - r < yr[0] || q_b.y + r > yr[1] {
        return true;
    }
    let Some((ix0, iy0, ix1, iy1)) = grid.cell_range(q_b.x - r, q_b.y - r, q_b.x + r, q_b.y + r)
    else {
        return false;
    };
    for iy in iy0..=iy1 {
        for ix in ix0..=ix1 {
            if grid.height(ix, iy) <= 0.0 {
                continue;
            }
            let (cx, cy) = grid.cell_rect(ix, iy);
            let px = q_b.x.clamp(cx[0], cx[1]);
            let py = q_b.y.clamp(cy[0], cy[1]);
            if (px - q_b.x).powi(2) + (py - q_b.y).powi(2) <= r * r {
                return true;
            }
        }
    }
    false
}

/// Ground-plane footprint of the object at a pose: the convex hull of its
/// eight projected corners, counterclockwise.
pub fn object_footprint(object: &ObjectSpec, t_obj: &Pose6) -> Vec<Vector2<f64>> {
    let t = t_obj.to_transform();
    let h = object.half_extents_vec();
    let mut pts = Vec::with_capacity(8);
    for sx in [-1.0, 1.0] {
        for sy in [-1.0, 1.0] {
            for sz in [-1.0, 1.0] {
                let c = t.transform_point(&Vector3::new(sx * h.x, sy * h.y, sz * h.z));
                pts.push(Vector2::new(c.x, c.y));
            }
        }
    }
    convex_hull(&pts)
}

/// True when the object's footprint overlaps a cell at least as tall as the
/// object's bottom, or leaves the world bounds. A high enough object clears
/// low obstacles, which is what allows crossing.
pub fn object_in_collision(scene: &Scene, t_obj: &Pose6) -> bool {
    let bottom = t_obj.p.z - scene.object.half_extents[2];
    let hull = object_footprint(&scene.object, t_obj);
    let grid = &scene.grid;
    let (xr, yr) = grid.extent();
    let (mut x0, mut y0, mut x1, mut y1) = (f64::MAX, f64::MAX, f64::MIN, f64::MIN);
    for p in &hull {
        x0 = x0.min(p.x);
        y0 = y0.min(p.y);
        x1 = x1.max(p.x);
        y1 = y1.max(p.y);
    }
    if x0 < xr[0] || x1 > xr[1] || y0 < yr[0] || y1 > yr[1] {
        return true;
    }
    if bottom > grid.max_height() {
        return false;
    }
    let Some((ix0, iy0, ix1, iy1)) = grid.cell_range(x0, y0, x1, y1) else {
        return false;
    };
    for iy in iy0..=iy1 {
        for ix in ix0..=ix1 {
            if grid.height(ix, iy) < bottom {
                continue;
            }
            let (cx, cy) = grid.cell_rect(ix, iy);
            if convex_polygon_intersects_rect(&hull, cx, cy) {
                return true;
            }
        }
    }
    false
}

/// True when any sampled arm point enters an obstacle column or leaves the
/// world bounds. Points may pass over obstacles shorter than their height.
pub fn arm_in_collision(scene: &Scene, model: &RobotModel, q: &MMConfig) -> bool {
    let grid = &scene.grid;
    let (xr, yr) = grid.extent();
    for p in arm_points_world(model, q) {
        if p.x < xr[0] || p.x > xr[1] || p.y < yr[0] || p.y > yr[1] {
            return true;
        }
        let ix = (((p.x - grid.origin[0]) / grid.cell_size) as usize).min(grid.nx - 1);
        let iy = (((p.y - grid.origin[1]) / grid.cell_size) as usize).min(grid.ny - 1);
        if p.z <= grid.height(ix, iy) {
            return true;
        }
    }
    false
}

/// Convex hull (monotone chain), counterclockwise, collinear points
/// dropped. Returns the input when fewer than three points survive.
pub fn convex_hull(points: &[Vector2<f64>]) -> Vec<Vector2<f64>> {
    let mut pts: Vec<Vector2<f64>> = points.to_vec();
    pts.sort_by(|a, b| (a.x, a.y).partial_cmp(&(b.x, b.y)).expect("finite coords"));
    pts.dedup_by(|a, b| (a.x - b.x).abs() < 1e-12 && (a.y - b.y).abs() < 1e-12);
    if pts.len() < 3 {
        return pts;
    }
    let cross = |o: &Vector2<f64>, a: &Vector2<f64>, b: &Vector2<f64>| {
        (a.x - o.x) * (b.y - o.y) - (a.y - o.y) * (b.x - o.x)
    };
    let mut hull: Vec<Vector2<f64>> = Vec::with_capacity(pts.len() * 2);
    for p in &pts {
        while hull.len() >= 2 && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 1e-12 {
            hull.pop();
        }
        hull.push(*p);
    }
    let lower_len = hull.len() + 1;
    for p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len
            && cross(&hull[hull.len() - 2], &hull[hull.len() - 1], p) <= 1e-12
        {
            hull.pop();
        }
        hull.push(*p);
    }
    hull.pop();
    hull
}

/// Separating-axis test between a convex polygon and an axis-aligned
/// rectangle; touching counts as intersecting.
pub fn convex_polygon_intersects_rect(
    poly: &[Vector2<f64>],
    xr: [f64; 2],
    yr: [f64; 2],
) -> bool {
    if poly.is_empty() {
        return false;
    }
    let rect = [
        Vector2::new(xr[0], yr[0]),
        Vector2::new(xr[1], yr[0]),
        Vector2::new(xr[1], yr[1]),
        Vector2::new(xr[0], yr[1]),
    ];
    let mut axes: Vec<Vector2<f64>> = vec![Vector2::new(1.0, 0.0), Vector2::new(0.0, 1.0)];
    for i in 0..poly.len() {
        let e = poly[(i + 1) % poly.len()] - poly[i];
        let n = Vector2::new(-e.y, e.x);
        if n.norm() > 1e-12 {
            axes.push(n);
        }
    }
    for axis in axes {
        let project = |pts: &[Vector2<f64>]| {
            let mut lo = f64::MAX;
            let mut hi = f64::MIN;
            for p in pts {
                let d = p.dot(&axis);
                lo = lo.min(d);
                hi = hi.max(d);
            }
            (lo, hi)
        };
        let (a0, a1) = project(poly);
        let (b0, b1) = project(&rect);
        if a1 < b0 || b1 < a0 {
            return false;
        }
    }
    true
}

pub fn load_scene(path: impl AsRef<Path>) -> Result<Scene, SceneError> {
    let path = path.as_ref();
    let text = std::fs::read_to_string(path).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })?;
    let file: SceneFile = serde_json::from_str(&text).map_err(|e| SceneError::Parse {
        path: path.display().to_string(),
        message: e.to_string(),
    })?;
    if file.format_version != SCENE_FORMAT_VERSION {
        return Err(SceneError::VersionMismatch {
            found: file.format_version,
        });
    }
    let mut scene = file.scene;
    scene.validate()?;
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    for robot in &mut scene.robots {
        robot.model = RobotModel::load(dir.join(&robot.model_file))?;
    }
    Ok(scene)
}

pub fn save_scene(scene: &Scene, path: impl AsRef<Path>) -> Result<(), SceneError> {
    let path = path.as_ref();
    scene.validate()?;
    let file = SceneFile {
        format_version: SCENE_FORMAT_VERSION,
        scene: scene.clone(),
    };
    let text = serde_json::to_string_pretty(&file).expect("scene serializes");
    std::fs::write(path, text).map_err(|source| SceneError::Io {
        path: path.display().to_string(),
        source,
    })
}

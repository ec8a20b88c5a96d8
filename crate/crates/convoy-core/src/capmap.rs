//! Capability maps: offline tabulation of the per-robot transport metric
//! over a grid of end-effector poses in the base frame, with constant-time
//! lookup and a compact binary file format.
//!
//! A map answers "could this robot hold a grasp at this relative pose with
//! metric at least `thres`?" without running inverse kinematics. Values are
//! computed with the object-direction term at its ideal, so stored metrics
//! are an optimistic bound on the full metric.

use std::path::Path;

use nalgebra::DVector;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::geometry::{wrap_angle, Pose6};
use crate::kinematics::{ik_arm, ready_arm, self_collides, IkOptions};
use crate::metrics::{normalized_manipulability, reach_penalty, MetricError, THETA_MAX};
use crate::model::{BaseConfig, MMConfig, RobotModel};

pub const CM_MAGIC: &[u8; 4] = b"CMAP";
pub const CM_FORMAT_VERSION: u32 = 1;

/// Pitch grid bound keeping every tabulated orientation clear of the
/// representation singularity.
const PITCH_LIMIT: f64 = 1.4;

/// Bytes per serialized entry: six float32 key coordinates plus the value.
const ENTRY_BYTES: usize = 28;

#[derive(Debug, Error)]
pub enum CmError {
    #[error("invalid capability map parameter: {0}")]
    InvalidResolution(String),
    #[error("no pose reaches the threshold; the map would be empty")]
    EmptyMap,
    #[error("bad capability map file {path}: {message}")]
    Format { path: String, message: String },
    #[error("capability map file {path} failed its checksum")]
    ChecksumMismatch { path: String },
    #[error("failed to access {path}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Map metadata, serialized as a JSON block inside the binary file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CmMeta {
    pub model_id: String,
    /// Manipulability normalizer the values were computed with.
    pub omega_max: f64,
    pub res_t: f64,
    pub res_r: f64,
    pub thres: f64,
    pub entry_count: u64,
}

/// Construction parameters.
#[derive(Debug, Clone)]
pub struct CmParams {
    pub res_t: f64,
    pub res_r: f64,
    pub thres: f64,
    /// Random IK restarts per grid cell after the warm-started attempt.
    pub restarts: usize,
}

impl Default for CmParams {
    fn default() -> Self {
        CmParams {
            res_t: 0.1,
            res_r: std::f64::consts::FRAC_PI_4,
            thres: crate::metrics::DEFAULT_THRESHOLD,
            restarts: 4,
        }
    }
}

/// Summary aggregates for reporting.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CmStats {
    pub entry_count: usize,
    pub mean_metric: Option<f64>,
    pub min_metric: Option<f64>,
    pub max_metric: Option<f64>,
    /// Per-coordinate key range in world units, `None` for an empty map.
    pub bounding_box: Option<[[f64; 2]; 6]>,
}

/// Outcome of re-verifying stored entries against fresh IK solutions.
#[derive(Debug, Clone)]
pub struct VerifyOutcome {
    pub checked: usize,
    pub passed: usize,
    pub failed_keys: Vec<[i16; 6]>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CapabilityMap {
    meta: CmMeta,
    /// Full turn divided by `res_r`; angle keys are canonical modulo this.
    wrap_m: i64,
    /// Sorted by key for binary search.
    entries: Vec<([i16; 6], f32)>,
}

fn validate_params(res_t: f64, res_r: f64, thres: f64) -> Result<i64, CmError> {
    if !(res_t > 0.0) || !res_t.is_finite() {
        return Err(CmError::InvalidResolution(format!(
            "translation resolution must be > 0, got {res_t}"
        )));
    }
    if !(res_r > 0.0) || !res_r.is_finite() {
        return Err(CmError::InvalidResolution(format!(
            "rotation resolution must be > 0, got {res_r}"
        )));
    }
    let turns = std::f64::consts::TAU / res_r;
    let m = turns.round();
    if (turns - m).abs() > 1e-6 || m < 2.0 {
        return Err(CmError::InvalidResolution(format!(
            "rotation resolution must evenly divide a full turn, got {res_r}"
        )));
    }
    if !(thres > 0.0 && thres < 1.0) {
        return Err(CmError::InvalidResolution(format!(
            "threshold must lie strictly inside (0, 1), got {thres}"
        )));
    }
    Ok(m as i64)
}

fn quantize_angle(a: f64, res_r: f64, m: i64) -> i16 {
    let k = (wrap_angle(a) / res_r).round() as i64;
    let mut k = ((k % m) + m) % m;
    if k > m / 2 {
        k -= m;
    }
    k as i16
}

fn quantize(pose: &Pose6, res_t: f64, res_r: f64, m: i64) -> [i16; 6] {
    [
        (pose.p.x / res_t).round() as i16,
        (pose.p.y / res_t).round() as i16,
        (pose.p.z / res_t).round() as i16,
        quantize_angle(pose.alpha.x, res_r, m),
        (pose.alpha.y / res_r).round() as i16,
        quantize_angle(pose.alpha.z, res_r, m),
    ]
}

fn dequantize(key: &[i16; 6], res_t: f64, res_r: f64) -> Pose6 {
    Pose6::from_parts(
        key[0] as f64 * res_t,
        key[1] as f64 * res_t,
        key[2] as f64 * res_t,
        key[3] as f64 * res_r,
        key[4] as f64 * res_r,
        key[5] as f64 * res_r,
    )
}

/// The tabulated metric for one end-effector pose in the base frame:
/// normalized manipulability scaled by the bearing penalty, with the
/// object-direction penalty at its ideal.
fn entry_metric(model: &RobotModel, q_arm: DVector<f64>, pose: &Pose6) -> Option<f64> {
    let q = MMConfig::new(BaseConfig::new(0.0, 0.0, 0.0), q_arm);
    let mu = normalized_manipulability(model, &q).ok()?;
    let theta_eb = pose.p.y.atan2(pose.p.x).abs();
    Some(mu * reach_penalty(theta_eb, THETA_MAX))
}

fn key_seed(key: &[i16; 6]) -> u64 {
    let mut h: u64 = 0x517c_c1b7_2722_0a95;
    for &k in key {
        h ^= k as u16 as u64;
        h = h.wrapping_mul(0x2545_f491_4f6c_dd1d).rotate_left(17);
    }
    h
}

/// Build-time certification: before a candidate is stored, three
/// independent cold-start verification runs must each re-find the pose,
/// and the stored value is capped at the worst metric they achieve. Every
/// stored entry is therefore re-findable at its recorded value without
/// the builder's warm-start chain. The runs draw from per-key generators
/// and never touch the caller's stream, keeping the stored set a pure
/// function of (model, grid, seed) filtered by the threshold.
fn certify_entry(model: &RobotModel, key: &[i16; 6], pose: &Pose6, value: f64) -> Option<f64> {
    let mut certified = value;
    for i in 0..3u64 {
        let salt = i.wrapping_mul(0x9e37_79b9_7f4a_7c15);
        let mut gate_rng = ChaCha8Rng::seed_from_u64(key_seed(key) ^ salt);
        certified = certified.min(reverify_entry(model, pose, 3, &mut gate_rng)?);
    }
    Some(certified)
}

/// One fresh verification attempt for a key pose: best metric over
/// `restarts + 1` independent IK solutions, skipping self-colliding ones.
/// The first two attempts start from the canonical postures, the rest
/// from random self-collision-free configurations.
pub fn reverify_entry(
    model: &RobotModel,
    key_pose: &Pose6,
    restarts: usize,
    rng: &mut impl Rng,
) -> Option<f64> {
    let target = key_pose.to_transform();
    let opts = IkOptions {
        max_iters: 400,
        restarts: 0,
        ..IkOptions::default()
    };
    let mut best: Option<f64> = None;
    for attempt in 0..=restarts {
        let start = match attempt {
            0 => DVector::zeros(model.n_arm()),
            1 => ready_arm(model),
            _ => {
                // Starting outside a self-colliding basin makes converging
                // to a collision-free branch far more likely.
                let mut s = model.random_arm(rng);
                for _ in 0..8 {
                    if !self_collides(model, &s) {
                        break;
                    }
                    s = model.random_arm(rng);
                }
                s
            }
        };
        let Some(q) = ik_arm(model, &target, Some(&start), &opts, rng) else {
            continue;
        };
        if self_collides(model, &q) {
            continue;
        }
        if let Some(v) = entry_metric(model, q, key_pose) {
            best = Some(best.map_or(v, |b: f64| b.max(v)));
        }
    }
    best
}

impl CapabilityMap {
    /// Tabulates the map by sweeping the pose grid covering the arm's
    /// reach. Each cell is solved by IK warm-started from the previous
    /// solved cell, with random restarts on failure; self-colliding
    /// solutions are discarded, and candidates must pass the cold-restart
    /// admission gate. Identical inputs and RNG seed reproduce the map
    /// exactly, and the threshold only filters the stored set.
    pub fn build(
        model: &RobotModel,
        params: &CmParams,
        rng: &mut impl Rng,
    ) -> Result<CapabilityMap, CmError> {
        let m = validate_params(params.res_t, params.res_r, params.thres)?;
        let omega_max = model
            .omega_max
            .ok_or_else(|| MetricError::UncalibratedModel(model.id.clone()))?;

        let chain: f64 = model.joints.iter().map(|j| j.origin.p.norm()).sum::<f64>()
            + model.tool.p.norm();
        let mount = model.arm_mount.p;
        let r_xy = chain + mount.xy().norm();
        let n_xy = (r_xy / params.res_t).ceil() as i16;
        let n_z = ((mount.z + chain) / params.res_t).ceil() as i16;
        let pitch_n = (PITCH_LIMIT / params.res_r).floor() as i16;
        let half_diag = params.res_t * 3f64.sqrt() / 2.0;
        let circle: Vec<i16> = (-(m as i16) / 2 + 1..=(m as i16) / 2).collect();

        let opts = IkOptions {
            restarts: 0,
            ..IkOptions::default()
        };
        let mut entries: Vec<([i16; 6], f32)> = Vec::new();
        let mut last: Option<DVector<f64>> = None;
        for &kr in &circle {
            for kp in -pitch_n..=pitch_n {
                for &kw in &circle {
                    for kz in 0..=n_z {
                        for ky in -n_xy..=n_xy {
                            for kx in -n_xy..=n_xy {
                                let key = [kx, ky, kz, kr, kp, kw];
                                let pose = dequantize(&key, params.res_t, params.res_r);
                                if (pose.p - mount).norm() > chain + half_diag {
                                    continue;
                                }
                                if pose.p.xy().norm() < 1e-9 {
                                    continue;
                                }
                                let target = pose.to_transform();
                                // Attempt ladder per cell: warm start from
                                // the previous solved cell, then the
                                // canonical postures, then random restarts;
                                // a self-colliding solution moves on to the
                                // next rung.
                                let mut solution = None;
                                for attempt in 0..params.restarts + 3 {
                                    let start = match attempt {
                                        0 => match &last {
                                            Some(q) => q.clone(),
                                            None => continue,
                                        },
                                        1 => DVector::zeros(model.n_arm()),
                                        2 => ready_arm(model),
                                        _ => model.random_arm(rng),
                                    };
                                    if let Some(q) =
                                        ik_arm(model, &target, Some(&start), &opts, rng)
                                    {
                                        if !self_collides(model, &q) {
                                            solution = Some(q);
                                            break;
                                        }
                                    }
                                }
                                let Some(q) = solution else { continue };
                                last = Some(q.clone());
                                let Some(value) = entry_metric(model, q, &pose) else {
                                    continue;
                                };
                                if value >= params.thres {
                                    if let Some(cert) =
                                        certify_entry(model, &key, &pose, value)
                                    {
                                        if cert >= params.thres {
                                            entries.push((key, cert as f32));
                                        }
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
        if entries.is_empty() {
            return Err(CmError::EmptyMap);
        }
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        Ok(CapabilityMap {
            meta: CmMeta {
                model_id: model.id.clone(),
                omega_max,
                res_t: params.res_t,
                res_r: params.res_r,
                thres: params.thres,
                entry_count: entries.len() as u64,
            },
            wrap_m: m,
            entries,
        })
    }

    /// Assembles a map from raw parts; entries are sorted and must carry
    /// values in `[thres, 1]`.
    pub fn from_parts(meta: CmMeta, mut entries: Vec<([i16; 6], f32)>) -> Result<Self, CmError> {
        let m = validate_params(meta.res_t, meta.res_r, meta.thres)?;
        for (key, v) in &entries {
            if !(*v as f64 >= meta.thres - 1e-6 && *v as f64 <= 1.0 + 1e-6) {
                return Err(CmError::Format {
                    path: "<memory>".into(),
                    message: format!("entry {key:?} value {v} outside [thres, 1]"),
                });
            }
        }
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        entries.dedup_by(|a, b| a.0 == b.0);
        let mut meta = meta;
        meta.entry_count = entries.len() as u64;
        Ok(CapabilityMap {
            meta,
            wrap_m: m,
            entries,
        })
    }

    pub fn meta(&self) -> &CmMeta {
        &self.meta
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn entries(&self) -> &[([i16; 6], f32)] {
        &self.entries
    }

    /// The grid pose a key stands for.
    pub fn key_pose(&self, key: &[i16; 6]) -> Pose6 {
        dequantize(key, self.meta.res_t, self.meta.res_r)
    }

    /// The key a pose rounds to.
    pub fn quantize_pose(&self, pose: &Pose6) -> [i16; 6] {
        quantize(pose, self.meta.res_t, self.meta.res_r, self.wrap_m)
    }

    /// Constant-time lookup: rounds the pose to its grid key and returns
    /// the stored metric, or `None` when the key holds no entry. Never
    /// runs IK.
    pub fn query(&self, pose_in_base: &Pose6) -> Option<f64> {
        let key = self.quantize_pose(pose_in_base);
        self.entries
            .binary_search_by(|e| e.0.cmp(&key))
            .ok()
            .map(|i| self.entries[i].1 as f64)
    }

    pub fn stats(&self) -> CmStats {
        if self.entries.is_empty() {
            return CmStats {
                entry_count: 0,
                mean_metric: None,
                min_metric: None,
                max_metric: None,
                bounding_box: None,
            };
        }
        let mut sum = 0.0;
        let mut min = f64::MAX;
        let mut max = f64::MIN;
        let mut lo = [i16::MAX; 6];
        let mut hi = [i16::MIN; 6];
        for (key, v) in &self.entries {
            sum += *v as f64;
            min = min.min(*v as f64);
            max = max.max(*v as f64);
            for i in 0..6 {
                lo[i] = lo[i].min(key[i]);
                hi[i] = hi[i].max(key[i]);
            }
        }
        let res = |i: usize| if i < 3 { self.meta.res_t } else { self.meta.res_r };
        let mut bb = [[0.0; 2]; 6];
        for i in 0..6 {
            bb[i] = [lo[i] as f64 * res(i), hi[i] as f64 * res(i)];
        }
        CmStats {
            entry_count: self.entries.len(),
            mean_metric: Some(sum / self.entries.len() as f64),
            min_metric: Some(min),
            max_metric: Some(max),
            bounding_box: Some(bb),
        }
    }

    /// Re-verifies `samples` randomly chosen stored entries with fresh IK
    /// (best over `restarts + 1` solutions each) against
    /// `thres - tolerance`.
    pub fn verify(
        &self,
        model: &RobotModel,
        samples: usize,
        restarts: usize,
        tolerance: f64,
        rng: &mut impl Rng,
    ) -> VerifyOutcome {
        let amount = samples.min(self.entries.len());
        let picks = rand::seq::index::sample(rng, self.entries.len(), amount);
        let mut passed = 0;
        let mut failed_keys = Vec::new();
        for i in picks {
            let (key, _) = self.entries[i];
            let pose = self.key_pose(&key);
            match reverify_entry(model, &pose, restarts, rng) {
                Some(v) if v >= self.meta.thres - tolerance => passed += 1,
                _ => failed_keys.push(key),
            }
        }
        VerifyOutcome {
            checked: amount,
            passed,
            failed_keys,
        }
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<(), CmError> {
        let path = path.as_ref();
        if self.entries.is_empty() {
            return Err(CmError::EmptyMap);
        }
        let mut meta = self.meta.clone();
        meta.entry_count = self.entries.len() as u64;
        let meta_json = serde_json::to_vec(&meta).expect("metadata serializes");

        let mut payload = Vec::with_capacity(self.entries.len() * ENTRY_BYTES);
        for (key, v) in &self.entries {
            for (i, k) in key.iter().enumerate() {
                let res = if i < 3 { self.meta.res_t } else { self.meta.res_r };
                payload.extend_from_slice(&((*k as f64 * res) as f32).to_le_bytes());
            }
            payload.extend_from_slice(&v.to_le_bytes());
        }
        let mut bytes = Vec::with_capacity(16 + meta_json.len() + payload.len() + 8);
        bytes.extend_from_slice(CM_MAGIC);
        bytes.extend_from_slice(&CM_FORMAT_VERSION.to_le_bytes());
        bytes.extend_from_slice(&(meta_json.len() as u32).to_le_bytes());
        bytes.extend_from_slice(&meta_json);
        bytes.extend_from_slice(&payload);
        let sum = checksum(&meta_json).wrapping_add(checksum(&payload));
        bytes.extend_from_slice(&sum.to_le_bytes());
        std::fs::write(path, bytes).map_err(|source| CmError::Io {
            path: path.display().to_string(),
            source,
        })
    }

    pub fn load(path: impl AsRef<Path>) -> Result<CapabilityMap, CmError> {
        let path = path.as_ref();
        let name = path.display().to_string();
        let bytes = std::fs::read(path).map_err(|source| CmError::Io {
            path: name.clone(),
            source,
        })?;
        let fail = |message: &str| CmError::Format {
            path: name.clone(),
            message: message.to_string(),
        };
        if bytes.len() < 12 || &bytes[0..4] != CM_MAGIC {
            return Err(fail("missing magic bytes"));
        }
        let version = u32::from_le_bytes(bytes[4..8].try_into().unwrap());
        if version != CM_FORMAT_VERSION {
            return Err(fail(&format!(
                "format_version {version}, this build reads {CM_FORMAT_VERSION}"
            )));
        }
        let meta_len = u32::from_le_bytes(bytes[8..12].try_into().unwrap()) as usize;
        if bytes.len() < 12 + meta_len + 8 {
            return Err(fail("truncated metadata"));
        }
        let meta_json = &bytes[12..12 + meta_len];
        let meta: CmMeta = serde_json::from_slice(meta_json)
            .map_err(|e| fail(&format!("bad metadata: {e}")))?;
        let m = validate_params(meta.res_t, meta.res_r, meta.thres)?;
        let body = &bytes[12 + meta_len..bytes.len() - 8];
        if body.len() != meta.entry_count as usize * ENTRY_BYTES {
            return Err(fail(&format!(
                "entry block holds {} bytes, expected {} entries of {ENTRY_BYTES}",
                body.len(),
                meta.entry_count
            )));
        }
        let stored_sum = u64::from_le_bytes(bytes[bytes.len() - 8..].try_into().unwrap());
        if checksum(meta_json).wrapping_add(checksum(body)) != stored_sum {
            return Err(CmError::ChecksumMismatch { path: name });
        }
        if meta.entry_count == 0 {
            return Err(CmError::EmptyMap);
        }
        let mut entries = Vec::with_capacity(meta.entry_count as usize);
        for chunk in body.chunks_exact(ENTRY_BYTES) {
            let mut key = [0i16; 6];
            for i in 0..6 {
                let raw = f32::from_le_bytes(chunk[4 * i..4 * i + 4].try_into().unwrap());
                let res = if i < 3 { meta.res_t } else { meta.res_r };
                key[i] = (raw as f64 / res).round() as i16;
            }
            let v = f32::from_le_bytes(chunk[24..28].try_into().unwrap());
            entries.push((key, v));
        }
        entries.sort_unstable_by(|a, b| a.0.cmp(&b.0));
        Ok(CapabilityMap {
            meta,
            wrap_m: m,
            entries,
        })
    }
}

/// Capability maps indexed by model id, shared by all robots of a model.
#[derive(Debug, Default)]
pub struct CmLibrary {
    maps: std::collections::HashMap<String, CapabilityMap>,
}

impl CmLibrary {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, map: CapabilityMap) {
        self.maps.insert(map.meta().model_id.clone(), map);
    }

    pub fn get(&self, model_id: &str) -> Option<&CapabilityMap> {
        self.maps.get(model_id)
    }

    pub fn len(&self) -> usize {
        self.maps.len()
    }

    pub fn is_empty(&self) -> bool {
        self.maps.is_empty()
    }
}

fn checksum(bytes: &[u8]) -> u64 {
    let mut sum: u64 = 0;
    for chunk in bytes.chunks(8) {
        let mut b = [0u8; 8];
        b[..chunk.len()].copy_from_slice(chunk);
        sum = sum.wrapping_add(u64::from_le_bytes(b));
    }
    sum
}

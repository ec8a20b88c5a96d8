//! Core library for cooperative object transport with mobile manipulators.
//!
//! The crate provides the shared geometry and kinematics layer, capability
//! maps, object-path planners with per-pose admissibility checks, the
//! decentralized base-placement and whole-body control layer, comparison
//! frameworks, and the benchmark harness behind the `convoy` CLI.

pub mod capmap;
pub mod control;
pub mod geometry;
pub mod kinematics;
pub mod linalg;
pub mod metrics;
pub mod model;
pub mod planner;
pub mod scene;

/// Seeded RNG used across unit tests; deterministic per seed.
#[cfg(test)]
pub(crate) fn test_rng(seed: u64) -> rand_chacha::ChaCha8Rng {
    use rand::SeedableRng;
    rand_chacha::ChaCha8Rng::seed_from_u64(seed)
}

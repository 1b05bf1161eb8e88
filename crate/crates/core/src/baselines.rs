//! Passive and scripted camera policies used for comparison.

use crate::crowdworld::{next_camera_position, translation_levels, AgentAction, Level, WorldConfig, TRANSLATION_COMBOS};
use crate::geometry3d::{CameraPose, Skeleton3D, Vec3, NUM_JOINTS};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum BaselineError {
    #[error("no fixed formation for {0} cameras (supported: 2 to 6)")]
    UnsupportedCount(usize),
}

pub const FIXED_ALTITUDE: f64 = 3.0;
pub const FIXED_PITCH_DEG: f64 = -35.0;

/// Static placements on the arena boundary: a right angle for two cameras,
/// otherwise a regular polygon with the first vertex at -90 degrees.
pub fn fixed_formation(n: usize, config: &WorldConfig) -> Result<Vec<CameraPose>, BaselineError> {
    if !(2..=6).contains(&n) {
        return Err(BaselineError::UnsupportedCount(n));
    }
    let radius = 0.5 * config.arena_size[0].min(config.arena_size[1]);
    let angles: Vec<f64> = if n == 2 {
        vec![0.0, 0.5 * PI]
    } else {
        (0..n).map(|k| -0.5 * PI + 2.0 * PI * k as f64 / n as f64).collect()
    };
    Ok(angles
        .into_iter()
        .map(|a| {
            let position = Vec3::new(radius * a.cos(), radius * a.sin(), FIXED_ALTITUDE);
            let yaw = (-position.y).atan2(-position.x);
            CameraPose::new(position, FIXED_PITCH_DEG.to_radians(), yaw)
        })
        .collect())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FormationConfig {
    /// Horizontal distance of each vertex from the target.
    pub radius: f64,
    pub altitude: f64,
}

impl Default for FormationConfig {
    fn default() -> Self {
        Self {
            radius: 2.5,
            altitude: 2.5,
        }
    }
}

/// Vertex assigned to camera `i` of `n` around `target`.
pub fn formation_vertex(i: usize, n: usize, target: &Vec3, cfg: &FormationConfig) -> Vec3 {
    let a = -0.5 * PI + 2.0 * PI * i as f64 / n as f64;
    Vec3::new(target.x + cfg.radius * a.cos(), target.y + cfg.radius * a.sin(), cfg.altitude)
}

/// Translation combination that brings `pose` closest to `goal` after one
/// step; the zero action wins ties.
pub fn greedy_translation(config: &WorldConfig, pose: &CameraPose, goal: &Vec3) -> AgentAction {
    let idle = translation_levels(13);
    let dist = |levels: [Level; 3]| (next_camera_position(config, pose, levels.map(Level::value)) - goal).norm();
    let mut best = (idle, dist(idle));
    for j in 0..TRANSLATION_COMBOS {
        let levels = translation_levels(j);
        let d = dist(levels);
        if d < best.1 {
            best = (levels, d);
        }
    }
    AgentAction {
        translation: best.0,
        ..AgentAction::IDLE
    }
}

/// Steers every camera toward its polygon vertex around the estimated target.
/// Rotation is left to the look-at controller.
pub fn rule_based_formation(
    config: &WorldConfig,
    cameras: &[CameraPose],
    target: &Vec3,
    cfg: &FormationConfig,
) -> Vec<AgentAction> {
    let n = cameras.len();
    cameras
        .iter()
        .enumerate()
        .map(|(i, pose)| greedy_translation(config, pose, &formation_vertex(i, n, target, cfg)))
        .collect()
}

/// First-order low-pass over reconstructed skeletons with gap filling.
#[derive(Debug, Clone, PartialEq)]
pub struct TemporalSmoother {
    pub alpha: f64,
    prev: Option<Skeleton3D>,
}

impl TemporalSmoother {
    pub fn new(alpha: f64) -> Self {
        Self { alpha, prev: None }
    }

    pub fn reset(&mut self) {
        self.prev = None;
    }

    /// Feeds one frame: per-joint values, `None` where the joint is missing.
    pub fn push(&mut self, joints: &[Option<Vec3>; NUM_JOINTS]) -> Option<Skeleton3D> {
        let prev = self.prev;
        let fallback = joints.iter().flatten().next().copied();
        if prev.is_none() && fallback.is_none() {
            return None;
        }
        let out = Skeleton3D::new(std::array::from_fn(|j| match (joints[j], prev) {
            (Some(x), Some(p)) => p.joints[j] + (x - p.joints[j]) * self.alpha,
            (Some(x), None) => x,
            (None, Some(p)) => p.joints[j],
            (None, None) => fallback.unwrap(),
        }));
        self.prev = Some(out);
        Some(out)
    }
}

/// Applies `TemporalSmoother` to a whole stream.
pub fn temporal_smoothing(stream: &[[Option<Vec3>; NUM_JOINTS]], alpha: f64) -> Vec<Option<Skeleton3D>> {
    let mut s = TemporalSmoother::new(alpha);
    stream.iter().map(|f| s.push(f)).collect()
}

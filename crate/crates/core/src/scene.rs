//! Single-frame scene files and per-camera contribution reports.
//!
//! ```json
//! {
//!   "cameras": [
//!     {"position": [4, 0, 1.5], "look_at": [0, 0, 1]},
//!     {"position": [0, 4, 1.5], "pitch": -5, "yaw": -90}
//!   ],
//!   "humans": [
//!     {"position": [0, 0, 0], "heading": 0, "is_target": true}
//!   ]
//! }
//! ```
//!
//! Angles are in degrees. A camera gives either `look_at` or `pitch`/`yaw`.

use crate::crowdworld::{skeleton_of, CameraAgentState, HumanState, WorldConfig, WorldState};
use crate::geometry3d::{mpjpe, CameraIntrinsics, CameraPose, Vec3};
use crate::perception::{broadcast, reconstruct_human, CameraSet, PerceptionConfig, Triangulator};
use crate::reward::{coalition_table, ctcr, RewardError, MAX_TEAM};
use nalgebra::Vector2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SceneError {
    #[error("scene parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scene: {0}")]
    Invalid(String),
    #[error(transparent)]
    Reward(#[from] RewardError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneCamera {
    pub position: [f64; 3],
    #[serde(default)]
    pub pitch: Option<f64>,
    #[serde(default)]
    pub yaw: Option<f64>,
    #[serde(default)]
    pub look_at: Option<[f64; 3]>,
}

impl SceneCamera {
    pub fn pose(&self) -> Result<CameraPose, SceneError> {
        let p = Vec3::from(self.position);
        match (self.look_at, self.pitch, self.yaw) {
            (Some(t), None, None) => Ok(CameraPose::looking_at(p, Vec3::from(t))),
            (None, Some(pitch), Some(yaw)) => Ok(CameraPose::new(p, pitch.to_radians(), yaw.to_radians())),
            _ => Err(SceneError::Invalid(
                "each camera needs either look_at or both pitch and yaw".into(),
            )),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneHuman {
    pub position: [f64; 3],
    #[serde(default)]
    pub heading: f64,
    #[serde(default)]
    pub is_target: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scene {
    pub cameras: Vec<SceneCamera>,
    pub humans: Vec<SceneHuman>,
    /// Keypoint noise in pixels; 0 unless given.
    #[serde(default)]
    pub noise_sigma: f64,
    #[serde(default)]
    pub seed: u64,
}

impl Scene {
    pub fn parse(text: &str) -> Result<Self, SceneError> {
        let scene: Scene = serde_json::from_str(text).map_err(|e| SceneError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        scene.validate()?;
        Ok(scene)
    }

    pub fn validate(&self) -> Result<(), SceneError> {
        if self.cameras.is_empty() || self.cameras.len() > MAX_TEAM {
            return Err(SceneError::Invalid(format!(
                "{} cameras; between 1 and {MAX_TEAM} are supported",
                self.cameras.len()
            )));
        }
        let targets = self.humans.iter().filter(|h| h.is_target).count();
        if targets != 1 {
            return Err(SceneError::Invalid(format!("{targets} humans marked is_target; exactly one is required")));
        }
        if !(self.noise_sigma >= 0.0 && self.noise_sigma.is_finite()) {
            return Err(SceneError::Invalid("noise_sigma must be finite and non-negative".into()));
        }
        for c in &self.cameras {
            c.pose()?;
        }
        Ok(())
    }

    pub fn world(&self, config: &WorldConfig) -> Result<WorldState, SceneError> {
        let cameras = self
            .cameras
            .iter()
            .enumerate()
            .map(|(id, c)| {
                Ok(CameraAgentState {
                    id,
                    pose: c.pose()?,
                    intrinsics: CameraIntrinsics::default(),
                })
            })
            .collect::<Result<Vec<_>, SceneError>>()?;
        let humans = self
            .humans
            .iter()
            .enumerate()
            .map(|(id, h)| HumanState {
                id,
                position: Vec3::from(h.position),
                heading: h.heading.to_radians(),
                speed: 0.0,
                gait_phase: 0.0,
                is_target: h.is_target,
                radius: config.capsule_radius,
                height: config.human_height,
                waypoint: Vector2::new(h.position[0], h.position[1]),
            })
            .collect();
        Ok(WorldState {
            config: Arc::new(config.clone()),
            humans,
            cameras,
            step: 0,
            rng: ChaCha8Rng::seed_from_u64(self.seed),
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionEntry {
    pub cameras: Vec<usize>,
    pub reward: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ContributionReport {
    pub n_cameras: usize,
    /// Every subset, ordered by bitmask.
    pub coalitions: Vec<CoalitionEntry>,
    pub team_reward: f64,
    /// Full-team reconstruction error; `None` if the target was not triangulated.
    pub mpjpe_mm: Option<f64>,
    /// Joints of the target each camera sees.
    pub visible_joints: Vec<usize>,
    pub ctcr: Vec<f64>,
}

/// Coalition table and CTCR of one frame.
pub fn contributions(scene: &Scene) -> Result<ContributionReport, SceneError> {
    scene.validate()?;
    let wc = WorldConfig {
        num_cameras: scene.cameras.len(),
        ..WorldConfig::default()
    };
    let world = scene.world(&wc)?;
    let perception = PerceptionConfig {
        noise_sigma: scene.noise_sigma,
        ..PerceptionConfig::default()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(scene.seed);
    let packets = broadcast(&world, &perception, &mut rng);
    let target = world.target();
    let truth = skeleton_of(target);
    let triangulator = Triangulator {
        seed: scene.seed,
        ..Triangulator::dlt()
    };
    let table = coalition_table(&packets, target.id, &truth, &triangulator, None)?;
    let n = table.n;
    let full = CameraSet::full(n);
    let error = reconstruct_human(&packets, full, target.id, &triangulator, None).map(|e| mpjpe(&e.skeleton, &truth));
    let visible_joints = packets
        .iter()
        .map(|p| {
            p.detections
                .iter()
                .find(|d| d.human_id == target.id)
                .map_or(0, |d| d.detection.visible_count())
        })
        .collect();
    Ok(ContributionReport {
        n_cameras: n,
        coalitions: (0..1u32 << n)
            .map(|m| CoalitionEntry {
                cameras: CameraSet(m).ids().collect(),
                reward: table.values[m as usize],
            })
            .collect(),
        team_reward: table.full(),
        mpjpe_mm: error,
        visible_joints,
        ctcr: ctcr(&table)?,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parse_errors_carry_line() {
        let text = "{\n  \"cameras\": [\n    {\"position\": [1, 2]}\n  ],\n  \"humans\": []\n}";
        match Scene::parse(text) {
            Err(SceneError::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("expected parse error, got {other:?}"),
        }
        let no_target = r#"{"cameras": [{"position": [4,0,1.5], "look_at": [0,0,1]}], "humans": [{"position": [0,0,0]}]}"#;
        assert!(matches!(Scene::parse(no_target), Err(SceneError::Invalid(_))));
        let both = r#"{"cameras": [{"position": [4,0,1.5], "look_at": [0,0,1], "yaw": 3}], "humans": [{"position": [0,0,0], "is_target": true}]}"#;
        assert!(matches!(Scene::parse(both), Err(SceneError::Invalid(_))));
    }

    fn ring(n: usize, radius: f64) -> Scene {
        Scene {
            cameras: (0..n)
                .map(|k| {
                    let a = 2.0 * std::f64::consts::PI * k as f64 / n as f64;
                    SceneCamera {
                        position: [radius * a.cos(), radius * a.sin(), 1.5],
                        pitch: None,
                        yaw: None,
                        look_at: Some([0.0, 0.0, 0.9]),
                    }
                })
                .collect(),
            humans: vec![SceneHuman {
                position: [0.0, 0.0, 0.0],
                heading: 0.0,
                is_target: true,
            }],
            noise_sigma: 0.0,
            seed: 0,
        }
    }

    #[test]
    fn two_cameras_share_equally() {
        let r = contributions(&ring(2, 4.0)).unwrap();
        assert_eq!(r.ctcr[0], r.ctcr[1]);
        assert_eq!(r.ctcr[0], r.team_reward);
        assert!(r.mpjpe_mm.unwrap() < 1.0);
    }

    #[test]
    fn symmetric_ring_is_even() {
        let r = contributions(&ring(4, 4.0)).unwrap();
        for c in &r.ctcr {
            assert!((c - r.ctcr[0]).abs() < 1e-9, "{:?}", r.ctcr);
        }
    }

    #[test]
    fn occluded_camera_contributes_least() {
        let mut s = ring(3, 4.0);
        // A bystander between camera 0 and the target.
        s.humans.push(SceneHuman {
            position: [2.0, 0.0, 0.0],
            heading: 0.0,
            is_target: false,
        });
        s.noise_sigma = 2.0;
        let r = contributions(&s).unwrap();
        let min = r.ctcr.iter().cloned().fold(f64::INFINITY, f64::min);
        assert_eq!(r.ctcr[0], min, "{:?} visible {:?}", r.ctcr, r.visible_joints);
        assert!(r.ctcr[0] < r.ctcr[1] && r.ctcr[0] < r.ctcr[2]);
    }
}

//! Collision avoidance (override and action masking) and command conditioning.

use crate::crowdworld::{
    next_camera_position, translation_levels, world_to_egocentric, AgentAction, Level, WorldConfig, WorldState,
    TRANSLATION_COMBOS,
};
use crate::geometry3d::{point_segment_distance, CameraPose, Vec3};
use crate::neural::ActionDistribution;
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum SafetyError {
    #[error("every translation combination violates the safety range")]
    NoSafeAction,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum SafetyMode {
    #[default]
    None,
    Oca,
    Mask,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SafetyConfig {
    pub mode: SafetyMode,
    /// Metres.
    pub range: f64,
    /// Level magnitude used by the override.
    pub reverse_magnitude: f64,
}

impl Default for SafetyConfig {
    fn default() -> Self {
        Self {
            mode: SafetyMode::None,
            range: 0.8,
            reverse_magnitude: 1.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SmoothConfig {
    /// EMA factor in (0, 1]; 1 disables smoothing.
    pub eta: f64,
}

impl Default for SmoothConfig {
    fn default() -> Self {
        Self { eta: 1.0 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseConfig {
    pub enabled: bool,
    pub lo: f64,
    pub hi: f64,
}

impl Default for NoiseConfig {
    fn default() -> Self {
        Self {
            enabled: false,
            lo: 0.8,
            hi: 1.2,
        }
    }
}

/// Something a camera must keep clear of.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Obstacle {
    /// Body centre line of a person.
    Segment(Vec3, Vec3),
    Point(Vec3),
}

impl Obstacle {
    pub fn nearest(&self, p: &Vec3) -> Vec3 {
        match *self {
            Obstacle::Point(q) => q,
            Obstacle::Segment(a, b) => {
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                a + ab * t
            }
        }
    }

    pub fn distance(&self, p: &Vec3) -> f64 {
        match *self {
            Obstacle::Point(q) => (p - q).norm(),
            Obstacle::Segment(a, b) => point_segment_distance(p, &a, &b),
        }
    }
}

/// Humans and every other camera, as seen by camera `camera_id`.
pub fn obstacles_for(world: &WorldState, camera_id: usize) -> Vec<Obstacle> {
    let mut out: Vec<Obstacle> = world
        .humans
        .iter()
        .map(|h| {
            let (a, b) = h.axis();
            Obstacle::Segment(a, b)
        })
        .collect();
    out.extend(
        world
            .cameras
            .iter()
            .filter(|c| c.id != camera_id)
            .map(|c| Obstacle::Point(c.pose.position)),
    );
    out
}

pub fn min_distance(p: &Vec3, obstacles: &[Obstacle]) -> f64 {
    obstacles.iter().map(|o| o.distance(p)).fold(f64::INFINITY, f64::min)
}

/// Egocentric repulsion direction summed over obstacles inside `range`.
fn repulsion(pose: &CameraPose, obstacles: &[Obstacle], range: f64) -> Option<[f64; 3]> {
    let p = pose.position;
    let mut sum = Vec3::zeros();
    let mut any = false;
    for o in obstacles {
        let away = p - o.nearest(&p);
        let d = away.norm();
        if d < range {
            any = true;
            if d > 1e-12 {
                sum += away / d;
            }
        }
    }
    any.then(|| world_to_egocentric(pose.yaw, &sum))
}

const SIGN_EPS: f64 = 1e-9;

/// Overrides translation components toward the repulsion direction when any
/// obstacle is inside `range`; components with no repulsion keep their level.
pub fn oca_filter(action: AgentAction, pose: &CameraPose, obstacles: &[Obstacle], range: f64) -> AgentAction {
    let Some(dir) = repulsion(pose, obstacles, range) else {
        return action;
    };
    let mut out = action;
    for (level, &d) in out.translation.iter_mut().zip(&dir) {
        if d.abs() > SIGN_EPS {
            *level = Level::from_sign(d);
        }
    }
    out
}

/// Continuous-command variant of `oca_filter`.
pub fn oca_command(translation: [f64; 3], pose: &CameraPose, obstacles: &[Obstacle], range: f64, magnitude: f64) -> [f64; 3] {
    let Some(dir) = repulsion(pose, obstacles, range) else {
        return translation;
    };
    let mut out = translation;
    for (t, &d) in out.iter_mut().zip(&dir) {
        if d.abs() > SIGN_EPS {
            *t = magnitude * d.signum();
        }
    }
    out
}

/// True for every translation combination whose post-step position keeps at
/// least `range` from all obstacles.
pub fn safe_translations(
    config: &WorldConfig,
    pose: &CameraPose,
    obstacles: &[Obstacle],
    range: f64,
) -> [bool; TRANSLATION_COMBOS] {
    std::array::from_fn(|j| {
        let levels = translation_levels(j).map(Level::value);
        let next = next_camera_position(config, pose, levels);
        min_distance(&next, obstacles) >= range
    })
}

/// Zeroes unsafe translation combinations and renormalises.
pub fn action_mask(
    dist: ActionDistribution,
    config: &WorldConfig,
    pose: &CameraPose,
    obstacles: &[Obstacle],
    range: f64,
) -> Result<ActionDistribution, SafetyError> {
    let mask = safe_translations(config, pose, obstacles, range);
    dist.masked(mask).ok_or(SafetyError::NoSafeAction)
}

/// `(1 - eta) * prev + eta * current`.
pub fn ema_smooth<const N: usize>(prev: &[f64; N], current: &[f64; N], eta: f64) -> [f64; N] {
    std::array::from_fn(|i| (1.0 - eta) * prev[i] + eta * current[i])
}

/// Multiplies each component by an independent factor drawn from `[lo, hi)`.
pub fn action_noise<const N: usize, R: Rng + ?Sized>(v: &[f64; N], rng: &mut R, lo: f64, hi: f64) -> [f64; N] {
    std::array::from_fn(|i| {
        let f = if hi > lo { rng.random_range(lo..hi) } else { lo };
        v[i] * f
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn pose() -> CameraPose {
        CameraPose::new(Vec3::new(0.0, 0.0, 2.0), 0.0, 0.0)
    }

    fn fwd() -> AgentAction {
        AgentAction {
            translation: [Level::Pos, Level::Pos, Level::Zero],
            ..AgentAction::IDLE
        }
    }

    #[test]
    fn far_obstacle_passes_through() {
        let obs = [Obstacle::Point(Vec3::new(5.0, 0.0, 2.0))];
        assert_eq!(oca_filter(fwd(), &pose(), &obs, 1.0), fwd());
    }

    #[test]
    fn repulsion_sign_rules() {
        let obs = [Obstacle::Point(Vec3::new(0.5, 0.0, 2.0))];
        let a = oca_filter(fwd(), &pose(), &obs, 1.0);
        assert_eq!(a.translation, [Level::Neg, Level::Pos, Level::Zero]);
        let d = 0.4 / 2f64.sqrt();
        let obs = [Obstacle::Point(Vec3::new(d, d, 2.0))];
        let a = oca_filter(fwd(), &pose(), &obs, 1.0);
        assert_eq!(a.translation[..2], [Level::Neg, Level::Neg]);
        assert_eq!(oca_filter(a, &pose(), &obs, 1.0), a);
    }

    #[test]
    fn egocentric_repulsion() {
        // Facing +y: an obstacle at +y is straight ahead.
        let p = CameraPose::new(Vec3::new(0.0, 0.0, 2.0), 0.0, std::f64::consts::FRAC_PI_2);
        let obs = [Obstacle::Point(Vec3::new(0.0, 0.5, 2.0))];
        let a = oca_filter(AgentAction::IDLE, &p, &obs, 1.0);
        assert_eq!(a.translation, [Level::Neg, Level::Zero, Level::Zero]);
    }

    #[test]
    fn mask_without_obstacles_is_identity() {
        let cfg = WorldConfig::default();
        let d = ActionDistribution::from_logits(&[0.1, 0.5, -0.2, 0.3, 0.0, 0.0, 1.0, -1.0, 0.2]);
        let m = action_mask(d.clone(), &cfg, &pose(), &[], 0.8).unwrap();
        assert_eq!(m, d);
    }

    #[test]
    fn surrounded_except_below() {
        let cfg = WorldConfig::default();
        let p = pose();
        // A slab of points at and above the camera; only descending moves clear it.
        let mut obs = Vec::new();
        for i in -10..=10 {
            for k in -10..=10 {
                for dz in [0.0, 0.3] {
                    obs.push(Obstacle::Point(p.position + Vec3::new(0.1 * i as f64, 0.1 * k as f64, dz)));
                }
            }
        }
        let r = 0.2;
        let safe = safe_translations(&cfg, &p, &obs, r);
        for (j, &ok) in safe.iter().enumerate() {
            assert_eq!(ok, translation_levels(j)[2] == Level::Neg, "combo {j}");
        }
        let d = ActionDistribution::from_logits(&[0.0; 9]);
        let m = action_mask(d, &cfg, &p, &obs, r).unwrap();
        let total: f64 = (0..27)
            .filter(|&j| translation_levels(j)[2] == Level::Neg)
            .map(|j| m.translation_joint()[j])
            .sum();
        assert!((total - 1.0).abs() < 1e-12);
    }

    #[test]
    fn no_safe_action() {
        let cfg = WorldConfig::default();
        let obs = [Obstacle::Point(pose().position)];
        let d = ActionDistribution::from_logits(&[0.0; 9]);
        assert_eq!(action_mask(d, &cfg, &pose(), &obs, 5.0).unwrap_err(), SafetyError::NoSafeAction);
    }

    #[test]
    fn ema_cases() {
        assert_eq!(ema_smooth(&[0.3], &[0.9], 1.0), [0.9]);
        assert_eq!(ema_smooth(&[0.0], &[1.0], 0.5), [0.5]);
        let mut s = [0.0];
        for _ in 0..10 {
            let next = ema_smooth(&s, &[2.0], 0.25);
            assert!(((2.0 - next[0]) - 0.75 * (2.0 - s[0])).abs() < 1e-12);
            s = next;
        }
    }

    #[test]
    fn noise_cases() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        assert_eq!(action_noise(&[0.0, 0.0], &mut rng, 0.8, 1.2), [0.0, 0.0]);
        assert_eq!(action_noise(&[0.4, -1.0], &mut rng, 1.0, 1.0), [0.4, -1.0]);
        let n = 100_000;
        let mean: f64 = (0..n).map(|_| action_noise(&[1.0], &mut rng, 0.8, 1.2)[0]).sum::<f64>() / n as f64;
        assert!((0.995..=1.005).contains(&mean));
    }
}

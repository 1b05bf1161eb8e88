//! Ground-truth world: walking humans in a bounded arena plus camera kinematics.

use crate::geometry3d::{
    project, segment_segment_distance, wrap_angle, CameraIntrinsics, CameraPose, Skeleton3D, Vec3,
    NUM_JOINTS,
};
use nalgebra::Vector2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum WorldError {
    #[error("expected {expected} actions, got {got}")]
    ActionCountMismatch { expected: usize, got: usize },
    #[error("invalid world configuration: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PitchYawMode {
    /// Pitch and yaw aim at the last estimated target position.
    RuleBased,
    /// The policy drives all five action dimensions.
    Learned,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CameraSpawn {
    /// Regular polygon around the arena centre, jittered by `spawn_jitter`.
    Formation,
    /// Uniform inside the arena at a random altitude.
    Random,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WorldConfig {
    /// Arena extent in metres (x, y), centred on the origin.
    pub arena_size: [f64; 2],
    pub num_cameras: usize,
    /// Inclusive range the per-episode human count is drawn from.
    pub human_count: [usize; 2],
    /// Translation per action level per step (metres).
    pub translation_step: f64,
    /// Rotation per action level per step (degrees).
    pub rotation_step_deg: f64,
    pub speed_range: [f64; 2],
    pub capsule_radius: f64,
    pub human_height: f64,
    pub altitude_range: [f64; 2],
    /// How far cameras may fly beyond the arena edge.
    pub flight_margin: f64,
    pub step_seconds: f64,
    pub waypoint_tolerance: f64,
    /// Weight of the previous velocity in the steering blend.
    pub steering_blend: f64,
    /// Extra clearance (beyond the capsule radii) where repulsion acts.
    pub personal_space: f64,
    pub repulsion_gain: f64,
    pub max_episode_length: usize,
    pub pitch_yaw_mode: PitchYawMode,
    pub camera_spawn: CameraSpawn,
    pub spawn_jitter: f64,
    /// Centred region humans walk in, metres; the whole arena when absent.
    pub walk_area: Option<[f64; 2]>,
    pub seed: u64,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            arena_size: [10.0, 10.0],
            num_cameras: 3,
            human_count: [1, 6],
            translation_step: 0.25,
            rotation_step_deg: 5.0,
            speed_range: [0.5, 1.5],
            capsule_radius: 0.30,
            human_height: 1.70,
            altitude_range: [0.5, 3.5],
            flight_margin: 1.0,
            step_seconds: 0.1,
            waypoint_tolerance: 0.3,
            steering_blend: 0.6,
            personal_space: 0.6,
            repulsion_gain: 1.5,
            max_episode_length: 500,
            pitch_yaw_mode: PitchYawMode::RuleBased,
            camera_spawn: CameraSpawn::Formation,
            spawn_jitter: 0.5,
            walk_area: None,
            seed: 0,
        }
    }
}

/// Largest crowd the observation layout supports.
pub const MAX_HUMANS: usize = 7;

impl WorldConfig {
    pub fn validate(&self) -> Result<(), WorldError> {
        let bad = |m: &str| Err(WorldError::InvalidConfig(m.to_string()));
        if self.num_cameras == 0 {
            return bad("num_cameras must be positive");
        }
        if self.human_count[0] < 1 || self.human_count[0] > self.human_count[1] {
            return bad("human_count must be a non-empty range starting at 1 or more");
        }
        if self.human_count[1] > MAX_HUMANS {
            return bad("human_count exceeds 7");
        }
        if self.speed_range[0] <= 0.0 || self.speed_range[0] > self.speed_range[1] {
            return bad("speed_range must be positive and ordered");
        }
        if self.altitude_range[0] > self.altitude_range[1] {
            return bad("altitude_range must be ordered");
        }
        if self.arena_size.iter().any(|&s| s <= 4.0 * self.capsule_radius) {
            return bad("arena too small");
        }
        if self.max_episode_length == 0 {
            return bad("max_episode_length must be positive");
        }
        if let Some([w, h]) = self.walk_area {
            if w <= 2.0 || h <= 2.0 || w > self.arena_size[0] || h > self.arena_size[1] {
                return bad("walk_area must exceed 2 m per side and fit inside the arena");
            }
        }
        Ok(())
    }

    pub fn half_extent(&self) -> [f64; 2] {
        [0.5 * self.arena_size[0], 0.5 * self.arena_size[1]]
    }

    pub fn walk_half_extent(&self) -> [f64; 2] {
        let [w, h] = self.walk_area.unwrap_or(self.arena_size);
        [0.5 * w, 0.5 * h]
    }

    pub fn rotation_step(&self) -> f64 {
        self.rotation_step_deg.to_radians()
    }

    /// Clamps a camera position to the flight envelope.
    pub fn clamp_camera(&self, p: Vec3) -> Vec3 {
        let [hx, hy] = self.half_extent();
        Vec3::new(
            p.x.clamp(-hx - self.flight_margin, hx + self.flight_margin),
            p.y.clamp(-hy - self.flight_margin, hy + self.flight_margin),
            p.z.clamp(self.altitude_range[0], self.altitude_range[1]),
        )
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HumanState {
    pub id: usize,
    pub position: Vec3,
    pub heading: f64,
    pub speed: f64,
    pub gait_phase: f64,
    pub is_target: bool,
    pub radius: f64,
    pub height: f64,
    pub waypoint: Vector2<f64>,
}

impl HumanState {
    /// Core segment of the body capsule; the surface lies `radius` around it.
    pub fn axis(&self) -> (Vec3, Vec3) {
        let r = self.radius.min(0.5 * self.height);
        (
            self.position + Vec3::new(0.0, 0.0, r),
            self.position + Vec3::new(0.0, 0.0, self.height - r),
        )
    }

    /// Distance from `p` to the body centre line.
    pub fn axis_distance(&self, p: &Vec3) -> f64 {
        let (a, b) = self.axis();
        crate::geometry3d::point_segment_distance(p, &a, &b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraAgentState {
    pub id: usize,
    pub pose: CameraPose,
    pub intrinsics: CameraIntrinsics,
}

/// One of the three discrete action levels.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
pub enum Level {
    Pos,
    #[default]
    Zero,
    Neg,
}

impl Level {
    /// Category order used by the policy heads: `[+1, 0, -1]`.
    pub const ALL: [Level; 3] = [Level::Pos, Level::Zero, Level::Neg];

    pub fn value(self) -> f64 {
        match self {
            Level::Pos => 1.0,
            Level::Zero => 0.0,
            Level::Neg => -1.0,
        }
    }

    pub fn index(self) -> usize {
        match self {
            Level::Pos => 0,
            Level::Zero => 1,
            Level::Neg => 2,
        }
    }

    pub fn from_index(i: usize) -> Level {
        Level::ALL[i]
    }

    pub fn from_sign(x: f64) -> Level {
        if x > 0.0 {
            Level::Pos
        } else if x < 0.0 {
            Level::Neg
        } else {
            Level::Zero
        }
    }
}

/// Discrete camera action: egocentric (x, y, z) translation and (pitch, yaw) rotation.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct AgentAction {
    pub translation: [Level; 3],
    pub rotation: [Level; 2],
}

/// Number of joint translation combinations.
pub const TRANSLATION_COMBOS: usize = 27;

impl AgentAction {
    pub const IDLE: AgentAction = AgentAction {
        translation: [Level::Zero; 3],
        rotation: [Level::Zero; 2],
    };

    /// Index of the translation triple in `0..27`.
    pub fn translation_index(&self) -> usize {
        translation_index(&self.translation)
    }

    pub fn translation_vector(&self) -> [f64; 3] {
        self.translation.map(Level::value)
    }
}

pub fn translation_index(levels: &[Level; 3]) -> usize {
    9 * levels[0].index() + 3 * levels[1].index() + levels[2].index()
}

pub fn translation_levels(index: usize) -> [Level; 3] {
    [
        Level::from_index(index / 9),
        Level::from_index((index / 3) % 3),
        Level::from_index(index % 3),
    ]
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum RotationControl {
    /// Pitch and yaw rates in level units (scaled by the rotation step).
    Rates([f64; 2]),
    /// Rate-limited look-at controller.
    LookAt(Vec3),
    Hold,
}

/// Continuous command actually executed by a camera for one step.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ControlCommand {
    /// Egocentric (forward, left, up) velocity in level units.
    pub translation: [f64; 3],
    pub rotation: RotationControl,
}

impl From<AgentAction> for ControlCommand {
    fn from(a: AgentAction) -> Self {
        ControlCommand {
            translation: a.translation_vector(),
            rotation: RotationControl::Rates(a.rotation.map(Level::value)),
        }
    }
}

/// Egocentric (forward, left, up) to world displacement for a camera yaw.
pub fn egocentric_to_world(yaw: f64, v: [f64; 3]) -> Vec3 {
    let (s, c) = yaw.sin_cos();
    Vec3::new(c * v[0] - s * v[1], s * v[0] + c * v[1], v[2])
}

/// World to egocentric (forward, left, up).
pub fn world_to_egocentric(yaw: f64, v: &Vec3) -> [f64; 3] {
    let (s, c) = yaw.sin_cos();
    [c * v.x + s * v.y, -s * v.x + c * v.y, v.z]
}

/// Position a camera would reach by executing `translation` (level units).
pub fn next_camera_position(config: &WorldConfig, pose: &CameraPose, translation: [f64; 3]) -> Vec3 {
    let scaled = translation.map(|t| t * config.translation_step);
    config.clamp_camera(pose.position + egocentric_to_world(pose.yaw, scaled))
}

fn apply_rotation(config: &WorldConfig, pose: &CameraPose, position: Vec3, rot: RotationControl) -> CameraPose {
    let eta = config.rotation_step();
    match rot {
        RotationControl::Hold => CameraPose::new(position, pose.pitch, pose.yaw),
        RotationControl::Rates([dp, dy]) => {
            CameraPose::new(position, pose.pitch + dp * eta, pose.yaw + dy * eta)
        }
        RotationControl::LookAt(target) => {
            let desired = CameraPose::looking_at(position, target);
            let d = target - position;
            let yaw = if d.x.hypot(d.y) > 1e-9 {
                pose.yaw + wrap_angle(desired.yaw - pose.yaw).clamp(-eta, eta)
            } else {
                pose.yaw
            };
            let pitch = pose.pitch + (desired.pitch - pose.pitch).clamp(-eta, eta);
            CameraPose::new(position, pitch, yaw)
        }
    }
}

/// Full simulator state at one timestep.
#[derive(Debug, Clone, PartialEq)]
pub struct WorldState {
    pub config: Arc<WorldConfig>,
    pub humans: Vec<HumanState>,
    pub cameras: Vec<CameraAgentState>,
    pub step: usize,
    pub rng: ChaCha8Rng,
}

impl WorldState {
    /// Samples a fresh crowd; cameras are placed at `camera_poses`.
    pub fn reset(config: Arc<WorldConfig>, seed: u64, camera_poses: &[CameraPose]) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let count = rng.random_range(config.human_count[0]..=config.human_count[1]);
        let humans = spawn_humans(&config, count, &mut rng);
        let cameras = camera_poses
            .iter()
            .enumerate()
            .map(|(id, pose)| CameraAgentState {
                id,
                pose: CameraPose::new(config.clamp_camera(pose.position), pose.pitch, pose.yaw),
                intrinsics: CameraIntrinsics::default(),
            })
            .collect();
        Self {
            config,
            humans,
            cameras,
            step: 0,
            rng,
        }
    }

    pub fn target(&self) -> &HumanState {
        self.humans
            .iter()
            .find(|h| h.is_target)
            .expect("world always has a target")
    }

    pub fn is_done(&self) -> bool {
        self.step >= self.config.max_episode_length
    }

    pub fn skeletons(&self) -> Vec<Skeleton3D> {
        self.humans.iter().map(skeleton_of).collect()
    }

    /// Executes one step with explicit continuous commands.
    pub fn step_commands(&mut self, commands: &[ControlCommand]) -> Result<(), WorldError> {
        if commands.len() != self.cameras.len() {
            return Err(WorldError::ActionCountMismatch {
                expected: self.cameras.len(),
                got: commands.len(),
            });
        }
        for (cam, cmd) in self.cameras.iter_mut().zip(commands) {
            let position = next_camera_position(&self.config, &cam.pose, cmd.translation);
            cam.pose = apply_rotation(&self.config, &cam.pose, position, cmd.rotation);
        }
        let config = Arc::clone(&self.config);
        step_humans(&config, &mut self.humans, &mut self.rng);
        self.step += 1;
        Ok(())
    }
}

/// Transition function: applies discrete actions (rotation levels as rates).
pub fn step_world(state: &WorldState, actions: &[AgentAction]) -> Result<WorldState, WorldError> {
    let commands: Vec<ControlCommand> = actions.iter().map(|&a| a.into()).collect();
    let mut next = state.clone();
    next.step_commands(&commands)?;
    Ok(next)
}

fn sample_waypoint(config: &WorldConfig, rng: &mut ChaCha8Rng) -> Vector2<f64> {
    let [hx, hy] = config.walk_half_extent();
    let m = 0.5;
    Vector2::new(rng.random_range(-hx + m..hx - m), rng.random_range(-hy + m..hy - m))
}

fn sample_speed(config: &WorldConfig, rng: &mut ChaCha8Rng) -> f64 {
    let [lo, hi] = config.speed_range;
    if hi > lo {
        rng.random_range(lo..=hi)
    } else {
        lo
    }
}

fn spawn_humans(config: &WorldConfig, count: usize, rng: &mut ChaCha8Rng) -> Vec<HumanState> {
    let r = config.capsule_radius;
    let [hx, hy] = config.walk_half_extent();
    let mut humans: Vec<HumanState> = Vec::with_capacity(count);
    for id in 0..count {
        let mut pos = Vec3::zeros();
        for _ in 0..1000 {
            pos = Vec3::new(
                rng.random_range(-hx + 1.0..hx - 1.0),
                rng.random_range(-hy + 1.0..hy - 1.0),
                0.0,
            );
            if humans
                .iter()
                .all(|h| (h.position - pos).norm() > 2.0 * r + 0.2)
            {
                break;
            }
        }
        humans.push(HumanState {
            id,
            position: pos,
            heading: rng.random_range(-PI..PI),
            speed: sample_speed(config, rng),
            gait_phase: rng.random_range(0.0..2.0 * PI),
            is_target: id == 0,
            radius: r,
            height: config.human_height,
            waypoint: sample_waypoint(config, rng),
        });
    }
    enforce_separation(config, &mut humans);
    humans
}

/// Stride length used to advance the gait phase.
const STRIDE_LENGTH: f64 = 1.4;

/// Advances every human toward its waypoint with repulsion steering, then
/// resolves any remaining capsule overlap.
pub fn step_humans(config: &WorldConfig, humans: &mut [HumanState], rng: &mut ChaCha8Rng) {
    let dt = config.step_seconds;
    let snapshot: Vec<HumanState> = humans.to_vec();
    for (i, h) in humans.iter_mut().enumerate() {
        let pos = Vector2::new(h.position.x, h.position.y);
        if (h.waypoint - pos).norm() < config.waypoint_tolerance {
            h.waypoint = sample_waypoint(config, rng);
            h.speed = sample_speed(config, rng);
        }
        let to_wp = h.waypoint - pos;
        let dist = to_wp.norm();
        let desired = if dist > 1e-9 {
            to_wp * (h.speed / dist)
        } else {
            Vector2::zeros()
        };
        let mut push = Vector2::zeros();
        for (j, o) in snapshot.iter().enumerate() {
            if j == i {
                continue;
            }
            let d = pos - Vector2::new(o.position.x, o.position.y);
            let reach = h.radius + o.radius + config.personal_space;
            let n = d.norm();
            if n < reach && n > 1e-9 {
                push += d / n * (config.repulsion_gain * (reach - n) / reach * h.speed);
            }
        }
        let current = Vector2::new(h.heading.cos(), h.heading.sin()) * h.speed;
        let b = config.steering_blend;
        let mut vel = current * b + (desired + push) * (1.0 - b);
        let speed = vel.norm();
        if speed > h.speed {
            vel *= h.speed / speed;
        }
        if vel.norm() > 1e-9 {
            h.heading = vel.y.atan2(vel.x);
        }
        h.position.x += vel.x * dt;
        h.position.y += vel.y * dt;
        h.gait_phase = (h.gait_phase + vel.norm() * dt * 2.0 * PI / STRIDE_LENGTH) % (2.0 * PI);
    }
    enforce_separation(config, humans);
}

fn clamp_human(config: &WorldConfig, h: &mut HumanState) {
    let [hx, hy] = config.walk_half_extent();
    h.position.x = h.position.x.clamp(-hx + h.radius, hx - h.radius);
    h.position.y = h.position.y.clamp(-hy + h.radius, hy - h.radius);
}

/// Pushes overlapping capsules apart until every pair clears the sum of radii.
fn enforce_separation(config: &WorldConfig, humans: &mut [HumanState]) {
    for h in humans.iter_mut() {
        clamp_human(config, h);
    }
    let n = humans.len();
    for _ in 0..50 {
        let mut violated = false;
        for i in 0..n {
            for j in i + 1..n {
                let min_sep = humans[i].radius + humans[j].radius + 1e-6;
                let d = Vector2::new(
                    humans[i].position.x - humans[j].position.x,
                    humans[i].position.y - humans[j].position.y,
                );
                let dist = d.norm();
                if dist >= min_sep {
                    continue;
                }
                violated = true;
                let dir = if dist > 1e-9 {
                    d / dist
                } else {
                    let a = (i * 7 + j * 13) as f64;
                    Vector2::new(a.cos(), a.sin())
                };
                let corr = dir * (0.5 * (min_sep - dist) + 1e-6);
                humans[i].position.x += corr.x;
                humans[i].position.y += corr.y;
                humans[j].position.x -= corr.x;
                humans[j].position.y -= corr.y;
                clamp_human(config, &mut humans[i]);
                clamp_human(config, &mut humans[j]);
            }
        }
        if !violated {
            break;
        }
    }
}

/// Body-frame joint offsets (forward, left, up) for a 1.70 m person at rest.
const JOINT_OFFSETS: [[f64; 3]; NUM_JOINTS] = [
    [0.10, 0.0, 1.62],
    [0.08, 0.035, 1.65],
    [0.08, -0.035, 1.65],
    [0.0, 0.08, 1.63],
    [0.0, -0.08, 1.63],
    [0.0, 0.19, 1.42],
    [0.0, -0.19, 1.42],
    [0.0, 0.21, 1.12],
    [0.0, -0.21, 1.12],
    [0.0, 0.22, 0.85],
    [0.0, -0.22, 0.85],
    [0.0, 0.10, 0.93],
    [0.0, -0.10, 0.93],
    [0.0, 0.10, 0.50],
    [0.0, -0.10, 0.50],
    [0.0, 0.10, 0.08],
    [0.0, -0.10, 0.08],
];

const REFERENCE_HEIGHT: f64 = 1.70;
const ANKLE_SWING: f64 = 0.25;
const WRIST_SWING: f64 = 0.15;

/// Forward swing per joint as a multiple of `sin(gait_phase)`.
fn swing(joint: usize) -> f64 {
    use crate::geometry3d::joint::*;
    match joint {
        LEFT_ANKLE => ANKLE_SWING,
        RIGHT_ANKLE => -ANKLE_SWING,
        LEFT_KNEE => 0.5 * ANKLE_SWING,
        RIGHT_KNEE => -0.5 * ANKLE_SWING,
        LEFT_WRIST => -WRIST_SWING,
        RIGHT_WRIST => WRIST_SWING,
        LEFT_ELBOW => -0.5 * WRIST_SWING,
        RIGHT_ELBOW => 0.5 * WRIST_SWING,
        _ => 0.0,
    }
}

/// Procedural 17-joint pose: fixed segment offsets with sinusoidal limb swing.
pub fn skeleton_of(human: &HumanState) -> Skeleton3D {
    let scale = human.height / REFERENCE_HEIGHT;
    let s = human.gait_phase.sin();
    let joints = std::array::from_fn(|j| {
        let [fx, ly, uz] = JOINT_OFFSETS[j];
        let local = [(fx + swing(j) * s) * scale, ly * scale, uz * scale];
        human.position + egocentric_to_world(human.heading, local)
    });
    Skeleton3D::new(joints)
}

/// True if `joint` is outside the camera frustum or the sight line to it
/// passes through any other human's capsule.
pub fn occluded(camera: &CameraAgentState, joint: &Vec3, humans: &[HumanState], exclude_id: usize) -> bool {
    if project(&camera.pose, &camera.intrinsics, joint).is_none() {
        return true;
    }
    let c = camera.pose.position;
    humans.iter().filter(|h| h.id != exclude_id).any(|h| {
        let (a, b) = h.axis();
        segment_segment_distance(&c, joint, &a, &b) < h.radius
    })
}

//! Gym-style multi-camera environment: world stepping, team perception,
//! rewards and the command conditioning applied before execution.

use crate::baselines::fixed_formation;
use crate::crowdworld::{
    AgentAction, CameraSpawn, ControlCommand, Level, PitchYawMode, RotationControl, WorldConfig, WorldError,
    WorldState, TRANSLATION_COMBOS,
};
use crate::geometry3d::{mpjpe, CameraPose, Skeleton3D, Vec3};
use crate::neural::STATE_DIM;
use crate::perception::{
    assemble_observation, broadcast, reconstruct, AgentPacket, CameraSet, HumanEstimate, LocalObservation,
    PerceptionConfig, TrackMemory, Triangulator,
};
use crate::reward::{coalition_table, ctcr, RewardError};
use crate::safety::{
    action_noise, ema_smooth, min_distance, obstacles_for, oca_command, safe_translations, NoiseConfig, SafetyConfig,
    SafetyMode, SmoothConfig,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum EnvError {
    #[error(transparent)]
    World(#[from] WorldError),
    #[error(transparent)]
    Reward(#[from] RewardError),
    #[error("invalid environment configuration: {0}")]
    InvalidConfig(String),
}

/// How per-agent rewards are derived from the team reward.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum RewardMode {
    /// Every agent receives the team reward.
    Shared,
    /// Every agent receives its triangulation contribution.
    #[default]
    Ctcr,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EnvConfig {
    pub world: WorldConfig,
    pub perception: PerceptionConfig,
    pub safety: SafetyConfig,
    pub smooth: SmoothConfig,
    pub noise: NoiseConfig,
    pub reward_mode: RewardMode,
    /// Compute the contribution vector even when rewards are shared.
    pub always_ctcr: bool,
    /// Ignore actions and keep every camera where it spawned.
    pub freeze_cameras: bool,
}

impl EnvConfig {
    pub fn validate(&self) -> Result<(), EnvError> {
        self.world
            .validate()
            .map_err(|e| EnvError::InvalidConfig(e.to_string()))?;
        self.perception.validate().map_err(EnvError::InvalidConfig)?;
        if self.world.num_cameras > self.perception.max_cameras {
            return Err(EnvError::InvalidConfig(format!(
                "{} cameras exceed the observation capacity of {}",
                self.world.num_cameras, self.perception.max_cameras
            )));
        }
        if self.world.human_count[1] > self.perception.max_humans {
            return Err(EnvError::InvalidConfig("more humans than observation slots".into()));
        }
        if self.world.camera_spawn == CameraSpawn::Formation && !(2..=6).contains(&self.world.num_cameras) {
            return Err(EnvError::InvalidConfig("formation spawn needs 2 to 6 cameras".into()));
        }
        if !(self.smooth.eta > 0.0 && self.smooth.eta <= 1.0) {
            return Err(EnvError::InvalidConfig("smooth.eta must lie in (0, 1]".into()));
        }
        if self.noise.enabled && self.noise.lo > self.noise.hi {
            return Err(EnvError::InvalidConfig("noise.lo exceeds noise.hi".into()));
        }
        if self.safety.mode != SafetyMode::None && self.safety.range <= 0.0 {
            return Err(EnvError::InvalidConfig("safety.range must be positive".into()));
        }
        Ok(())
    }

    /// Policy output factors: translation only, or translation plus rotation.
    pub fn action_factors(&self) -> usize {
        match self.world.pitch_yaw_mode {
            PitchYawMode::RuleBased => 3,
            PitchYawMode::Learned => 5,
        }
    }
}

/// Derives an independent stream seed.
pub fn stream_seed(base: u64, stream: u64) -> u64 {
    let mut z = base ^ stream.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// `[x/10, y/10, sin yaw, cos yaw]` conditioning vector.
pub fn state_vector(position: &Vec3, yaw: f64) -> [f64; STATE_DIM] {
    [position.x / 10.0, position.y / 10.0, yaw.sin(), yaw.cos()]
}

pub fn planar(position: &Vec3) -> [f64; 2] {
    [position.x / 10.0, position.y / 10.0]
}

/// Outcome of one environment step.
#[derive(Debug, Clone, PartialEq)]
pub struct StepResult {
    pub team_reward: f64,
    /// Per-agent rewards according to the reward mode.
    pub rewards: Vec<f64>,
    pub ctcr: Option<Vec<f64>>,
    /// Target reconstruction error in millimetres, if any estimate exists.
    pub mpjpe: Option<f64>,
    /// Smallest distance from any camera to any human body axis.
    pub min_human_distance: f64,
    pub done: bool,
}

/// Pedestrians tracked by the team at the current step.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PedestrianContext {
    pub ids: Vec<usize>,
    pub states: Vec<[f64; STATE_DIM]>,
}

pub struct MocapEnv {
    pub config: Arc<EnvConfig>,
    world_config: Arc<WorldConfig>,
    pub world: WorldState,
    pub tracks: TrackMemory,
    pub packets: Vec<AgentPacket>,
    /// Current team estimate of the target skeleton (gaps filled from memory).
    pub estimate: Option<Skeleton3D>,
    /// This step's reconstruction of the target, if any.
    pub target_estimate: Option<HumanEstimate>,
    pub episode: u64,
    seed: u64,
    rng: ChaCha8Rng,
    smoothed: Vec<[f64; 5]>,
    triangulator: Triangulator,
}

impl MocapEnv {
    pub fn new(config: Arc<EnvConfig>, seed: u64) -> Result<Self, EnvError> {
        config.validate()?;
        let world_config = Arc::new(config.world.clone());
        let world = WorldState::reset(Arc::clone(&world_config), seed, &[]);
        let mut env = Self {
            triangulator: Triangulator {
                method: config.perception.triangulation,
                ransac: config.perception.ransac,
                seed,
            },
            config,
            world_config,
            world,
            tracks: TrackMemory::default(),
            packets: Vec::new(),
            estimate: None,
            target_estimate: None,
            episode: 0,
            seed,
            rng: ChaCha8Rng::seed_from_u64(seed),
            smoothed: Vec::new(),
        };
        env.reset_episode(0);
        Ok(env)
    }

    /// Starts the next episode.
    pub fn reset(&mut self) {
        self.reset_episode(self.episode + 1);
    }

    fn reset_episode(&mut self, episode: u64) {
        self.episode = episode;
        let s = stream_seed(self.seed, episode);
        self.rng = ChaCha8Rng::seed_from_u64(stream_seed(s, 1));
        let poses = self.spawn_poses(stream_seed(s, 2));
        self.world = WorldState::reset(Arc::clone(&self.world_config), s, &poses);
        if self.config.world.camera_spawn == CameraSpawn::Random {
            let target = self.world.target().position + Vec3::new(0.0, 0.0, 1.0);
            for cam in &mut self.world.cameras {
                cam.pose = CameraPose::looking_at(cam.pose.position, target);
            }
        }
        self.tracks.clear();
        self.estimate = None;
        self.target_estimate = None;
        self.smoothed = vec![[0.0; 5]; self.n_agents()];
        self.triangulator.seed = s;
        self.perceive();
    }

    fn spawn_poses(&self, seed: u64) -> Vec<CameraPose> {
        let cfg = &self.config.world;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        match cfg.camera_spawn {
            CameraSpawn::Formation => fixed_formation(cfg.num_cameras, cfg)
                .expect("validated camera count")
                .into_iter()
                .map(|p| {
                    let j = cfg.spawn_jitter;
                    let d = if j > 0.0 {
                        Vec3::new(rng.random_range(-j..j), rng.random_range(-j..j), rng.random_range(-j..j))
                    } else {
                        Vec3::zeros()
                    };
                    CameraPose::new(p.position + d, p.pitch, p.yaw)
                })
                .collect(),
            CameraSpawn::Random => {
                let [hx, hy] = cfg.half_extent();
                let [lo, hi] = cfg.altitude_range;
                (0..cfg.num_cameras)
                    .map(|_| {
                        let p = Vec3::new(rng.random_range(-hx..hx), rng.random_range(-hy..hy), rng.random_range(lo..=hi));
                        CameraPose::new(p, 0.0, rng.random_range(-PI..PI))
                    })
                    .collect()
            }
        }
    }

    pub fn n_agents(&self) -> usize {
        self.config.world.num_cameras
    }

    pub fn target_id(&self) -> usize {
        self.world.target().id
    }

    fn perceive(&mut self) {
        self.packets = broadcast(&self.world, &self.config.perception, &mut self.rng);
        let full = CameraSet::full(self.n_agents());
        let result = reconstruct(&self.packets, full, &self.triangulator, Some(&self.tracks));
        self.tracks.update(&result, self.world.step);
        let id = self.target_id();
        self.target_estimate = result.get(id).cloned();
        self.estimate = self.tracks.get(id).map(|t| t.skeleton);
    }

    pub fn observations(&self) -> Vec<LocalObservation> {
        let layout = self.config.perception.layout();
        (0..self.n_agents())
            .map(|i| assemble_observation(i, &self.packets, &self.tracks, self.target_id(), &layout))
            .collect()
    }

    /// Team estimate of the target state; zeros while unknown.
    pub fn target_state(&self) -> [f64; STATE_DIM] {
        self.tracks
            .get(self.target_id())
            .map_or([0.0; STATE_DIM], |t| state_vector(&t.position, t.yaw))
    }

    /// Current state vectors of all cameras, by id.
    pub fn camera_states(&self) -> Vec<[f64; STATE_DIM]> {
        self.world
            .cameras
            .iter()
            .map(|c| state_vector(&c.pose.position, c.pose.yaw))
            .collect()
    }

    pub fn pedestrians(&self) -> PedestrianContext {
        let target = self.target_id();
        let mut ctx = PedestrianContext::default();
        for (&id, t) in &self.tracks.tracks {
            if id != target && self.world.humans.iter().any(|h| h.id == id) {
                ctx.ids.push(id);
                ctx.states.push(state_vector(&t.position, t.yaw));
            }
        }
        ctx
    }

    /// Safe translation combinations per agent when masking is enabled.
    pub fn masks(&self) -> Vec<Option<[bool; TRANSLATION_COMBOS]>> {
        (0..self.n_agents())
            .map(|i| {
                (self.config.safety.mode == SafetyMode::Mask).then(|| {
                    let obs = obstacles_for(&self.world, i);
                    safe_translations(&self.config.world, &self.world.cameras[i].pose, &obs, self.config.safety.range)
                })
            })
            .collect()
    }

    /// Planar ground-truth position of a human, scaled like `state_vector`.
    pub fn human_planar(&self, id: usize) -> Option<[f64; 2]> {
        self.world.humans.iter().find(|h| h.id == id).map(|h| planar(&h.position))
    }

    pub fn camera_planar(&self) -> Vec<[f64; 2]> {
        self.world.cameras.iter().map(|c| planar(&c.pose.position)).collect()
    }

    pub fn min_human_distance(&self) -> f64 {
        let axes: Vec<_> = self
            .world
            .humans
            .iter()
            .map(|h| {
                let (a, b) = h.axis();
                crate::safety::Obstacle::Segment(a, b)
            })
            .collect();
        self.world
            .cameras
            .iter()
            .map(|c| min_distance(&c.pose.position, &axes))
            .fold(f64::INFINITY, f64::min)
    }

    fn command_for(&mut self, agent: usize, action: AgentAction) -> ControlCommand {
        let cfg = Arc::clone(&self.config);
        if cfg.freeze_cameras {
            return ControlCommand {
                translation: [0.0; 3],
                rotation: RotationControl::Hold,
            };
        }
        let pose = self.world.cameras[agent].pose;
        let mut t = action.translation_vector();
        let (range, mag) = (cfg.safety.range, cfg.safety.reverse_magnitude);
        match cfg.safety.mode {
            SafetyMode::None => {}
            SafetyMode::Oca => {
                let obs = obstacles_for(&self.world, agent);
                t = oca_command(t, &pose, &obs, range, mag);
            }
            SafetyMode::Mask => {
                // The policy samples from the masked distribution, so an unsafe
                // choice here means no safe combination existed.
                let obs = obstacles_for(&self.world, agent);
                let safe = safe_translations(&cfg.world, &pose, &obs, range);
                if !safe[action.translation_index()] {
                    t = oca_command(t, &pose, &obs, range, mag);
                }
            }
        }
        let r = action.rotation.map(Level::value);
        let raw = [t[0], t[1], t[2], r[0], r[1]];
        let mut v = ema_smooth(&self.smoothed[agent], &raw, cfg.smooth.eta);
        self.smoothed[agent] = v;
        if cfg.noise.enabled {
            v = action_noise(&v, &mut self.rng, cfg.noise.lo, cfg.noise.hi);
        }
        let rotation = match cfg.world.pitch_yaw_mode {
            PitchYawMode::Learned => RotationControl::Rates([v[3], v[4]]),
            PitchYawMode::RuleBased => match self.tracks.get(self.target_id()) {
                Some(t) => RotationControl::LookAt(t.position),
                None => RotationControl::Hold,
            },
        };
        ControlCommand {
            translation: [v[0], v[1], v[2]],
            rotation,
        }
    }

    /// Executes one joint action. Episodes do not auto-reset; call `reset`
    /// once `done` is reported.
    pub fn step(&mut self, actions: &[AgentAction]) -> Result<StepResult, EnvError> {
        let n = self.n_agents();
        if actions.len() != n {
            return Err(WorldError::ActionCountMismatch {
                expected: n,
                got: actions.len(),
            }
            .into());
        }
        let commands: Vec<ControlCommand> = actions
            .iter()
            .enumerate()
            .map(|(i, &a)| self.command_for(i, a))
            .collect();
        self.world.step_commands(&commands)?;

        let memory = self.tracks.clone();
        self.perceive();
        let target = self.world.target().clone();
        let truth = crate::crowdworld::skeleton_of(&target);
        let want_ctcr = self.config.reward_mode == RewardMode::Ctcr || self.config.always_ctcr;
        let (team_reward, contrib) = if want_ctcr {
            let table = coalition_table(&self.packets, target.id, &truth, &self.triangulator, Some(&memory))?;
            let c = ctcr(&table)?;
            (table.full(), Some(c))
        } else {
            let r = crate::reward::team_reward(
                CameraSet::full(n),
                &self.packets,
                target.id,
                &truth,
                &self.triangulator,
                Some(&memory),
            );
            (r, None)
        };
        let rewards = match (self.config.reward_mode, &contrib) {
            (RewardMode::Ctcr, Some(c)) => c.clone(),
            _ => vec![team_reward; n],
        };
        Ok(StepResult {
            team_reward,
            rewards,
            ctcr: contrib,
            mpjpe: self.estimate.map(|e| mpjpe(&e, &truth)),
            min_human_distance: self.min_human_distance(),
            done: self.world.is_done(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn config(n: usize) -> EnvConfig {
        let mut c = EnvConfig::default();
        c.world.num_cameras = n;
        c.world.max_episode_length = 30;
        c
    }

    #[test]
    fn reset_is_reproducible() {
        let cfg = Arc::new(config(3));
        let a = MocapEnv::new(Arc::clone(&cfg), 5).unwrap();
        let b = MocapEnv::new(cfg, 5).unwrap();
        assert_eq!(a.world, b.world);
        assert_eq!(a.observations(), b.observations());
    }

    #[test]
    fn rollout_until_done() {
        let cfg = Arc::new(config(3));
        let mut env = MocapEnv::new(cfg, 1).unwrap();
        let mut steps = 0;
        loop {
            let r = env.step(&[AgentAction::IDLE; 3]).unwrap();
            steps += 1;
            assert_eq!(r.rewards.len(), 3);
            assert!((0.0..=1.0).contains(&r.team_reward));
            let c = r.ctcr.unwrap();
            assert!((c.iter().sum::<f64>() / 3.0 - r.team_reward).abs() < 1e-9);
            if r.done {
                break;
            }
        }
        assert_eq!(steps, 30);
        env.reset();
        assert_eq!(env.world.step, 0);
        assert_eq!(env.episode, 1);
    }

    #[test]
    fn two_cameras_share_team_reward() {
        let mut env = MocapEnv::new(Arc::new(config(2)), 3).unwrap();
        for _ in 0..10 {
            let r = env.step(&[AgentAction::IDLE; 2]).unwrap();
            assert_eq!(r.rewards, vec![r.team_reward; 2]);
        }
    }

    #[test]
    fn wrong_action_count() {
        let mut env = MocapEnv::new(Arc::new(config(3)), 0).unwrap();
        assert!(matches!(env.step(&[AgentAction::IDLE; 2]), Err(EnvError::World(_))));
    }

    #[test]
    fn observation_width() {
        let env = MocapEnv::new(Arc::new(config(3)), 0).unwrap();
        for o in env.observations() {
            assert_eq!(o.0.len(), 171);
        }
    }
}

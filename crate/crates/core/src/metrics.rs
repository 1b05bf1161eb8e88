//! Evaluation: success rate, per-frame logs, episode summaries and
//! behaviour histograms.

use crate::baselines::{rule_based_formation, FormationConfig, TemporalSmoother};
use crate::crowdworld::{AgentAction, CameraSpawn, PitchYawMode};
use crate::env::{stream_seed, EnvConfig, EnvError, MocapEnv};
use crate::geometry3d::{mpjpe, CameraPose, Vec3, NUM_JOINTS};
use crate::neural::checkpoint::Checkpoint;
use crate::neural::{ActionDistribution, Architecture, Network, STATE_DIM};
use crate::par;
use ndarray::Array2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum MetricsError {
    #[error("empty MPJPE series")]
    EmptySeries,
    #[error("checkpoint does not fit this environment: {0}")]
    ConfigMismatch(String),
    #[error(transparent)]
    Env(#[from] EnvError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

/// Fraction of frames with error at or below `tau` millimetres.
pub fn success_rate(mpjpe_mm: &[f64], tau: f64) -> Result<f64, MetricsError> {
    if mpjpe_mm.is_empty() {
        return Err(MetricsError::EmptySeries);
    }
    Ok(mpjpe_mm.iter().filter(|&&e| e <= tau).count() as f64 / mpjpe_mm.len() as f64)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CameraRecord {
    pub position: [f64; 3],
    pub pitch: f64,
    pub yaw: f64,
}

impl CameraRecord {
    pub fn pose(&self) -> CameraPose {
        CameraPose::new(Vec3::from(self.position), self.pitch, self.yaw)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HumanRecord {
    pub id: usize,
    pub position: [f64; 3],
    pub is_target: bool,
}

/// One line of `frames.jsonl`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameRecord {
    pub episode: usize,
    pub step: usize,
    pub cameras: Vec<CameraRecord>,
    pub humans: Vec<HumanRecord>,
    /// `None` while the team has never reconstructed the target.
    pub mpjpe_mm: Option<f64>,
    pub team_reward: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ctcr: Option<Vec<f64>>,
    pub min_human_distance: f64,
}

impl FrameRecord {
    pub fn target(&self) -> Option<Vec3> {
        self.humans.iter().find(|h| h.is_target).map(|h| Vec3::from(h.position))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub edges: Vec<f64>,
    /// Samples below the first edge land in the first bin, above the last
    /// edge in the last bin.
    pub counts: Vec<u64>,
}

impl Histogram {
    pub fn new(edges: Vec<f64>) -> Self {
        assert!(edges.len() >= 2, "a histogram needs at least one bin");
        let bins = edges.len() - 1;
        Self {
            edges,
            counts: vec![0; bins],
        }
    }

    pub fn uniform(lo: f64, hi: f64, bins: usize) -> Self {
        Self::new((0..=bins).map(|i| lo + (hi - lo) * i as f64 / bins as f64).collect())
    }

    pub fn add(&mut self, x: f64) {
        let last = self.counts.len() - 1;
        let bin = self.edges[1..]
            .iter()
            .position(|&e| x < e)
            .unwrap_or(last);
        self.counts[bin] += 1;
    }

    pub fn total(&self) -> u64 {
        self.counts.iter().sum()
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("lo,hi,count\n");
        for (i, c) in self.counts.iter().enumerate() {
            s.push_str(&format!("{},{},{}\n", self.edges[i], self.edges[i + 1], c));
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct HistogramEdges {
    pub distance: Vec<f64>,
    pub pitch_deg: Vec<f64>,
    pub angle_deg: Vec<f64>,
    pub min_human_distance: Vec<f64>,
}

impl Default for HistogramEdges {
    fn default() -> Self {
        let uniform = |lo: f64, hi: f64, n: usize| Histogram::uniform(lo, hi, n).edges;
        Self {
            distance: uniform(0.0, 10.0, 40),
            pitch_deg: uniform(-90.0, 90.0, 36),
            angle_deg: uniform(0.0, 180.0, 36),
            min_human_distance: uniform(0.0, 5.0, 50),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BehaviorStats {
    /// One sample per camera per frame.
    pub camera_target_distance: Histogram,
    /// One sample per camera per frame; positive looks upward.
    pub pitch_deg: Histogram,
    /// Per-frame mean over cameras of the smallest optical-axis angle to a peer.
    pub min_camera_angle_deg: Histogram,
    /// Per-frame closest camera-to-human-axis distance.
    pub min_human_distance: Histogram,
}

/// Per-frame mean over cameras of the smallest angle between its optical
/// axis and any other camera's, in degrees.
pub fn mean_min_camera_angle(cameras: &[CameraPose]) -> Option<f64> {
    if cameras.len() < 2 {
        return None;
    }
    let axes: Vec<Vec3> = cameras.iter().map(|c| c.forward()).collect();
    let total: f64 = axes
        .iter()
        .enumerate()
        .map(|(i, a)| {
            axes.iter()
                .enumerate()
                .filter(|&(j, _)| j != i)
                .map(|(_, b)| a.dot(b).clamp(-1.0, 1.0).acos().to_degrees())
                .fold(f64::INFINITY, f64::min)
        })
        .sum();
    Some(total / axes.len() as f64)
}

pub fn behavior_stats(frames: &[FrameRecord], edges: &HistogramEdges) -> BehaviorStats {
    let mut s = BehaviorStats {
        camera_target_distance: Histogram::new(edges.distance.clone()),
        pitch_deg: Histogram::new(edges.pitch_deg.clone()),
        min_camera_angle_deg: Histogram::new(edges.angle_deg.clone()),
        min_human_distance: Histogram::new(edges.min_human_distance.clone()),
    };
    for f in frames {
        let poses: Vec<CameraPose> = f.cameras.iter().map(CameraRecord::pose).collect();
        if let Some(t) = f.target() {
            for p in &poses {
                s.camera_target_distance.add((p.position - t).norm());
            }
        }
        for p in &poses {
            s.pitch_deg.add(p.pitch.to_degrees());
        }
        if let Some(a) = mean_min_camera_angle(&poses) {
            s.min_camera_angle_deg.add(a);
        }
        s.min_human_distance.add(f.min_human_distance);
    }
    s
}

/// Camera controller under evaluation.
#[derive(Debug, Clone)]
pub enum EvalPolicy {
    /// Static formation on the arena boundary.
    Fixed,
    /// Scripted tracker around the estimated target.
    RuleBased(FormationConfig),
    Learned {
        network: Arc<Network>,
        params: Arc<Vec<f32>>,
        /// Sample actions instead of taking the mode.
        stochastic: bool,
    },
}

impl EvalPolicy {
    pub fn name(&self) -> &'static str {
        match self {
            EvalPolicy::Fixed => "fixed",
            EvalPolicy::RuleBased(_) => "rulebased",
            EvalPolicy::Learned { .. } => "learned",
        }
    }

    /// Loads a checkpoint and checks it against the environment's layout.
    pub fn from_checkpoint(ck: &Checkpoint, expected: &Architecture, stochastic: bool) -> Result<Self, MetricsError> {
        ck.ensure_arch(expected)
            .map_err(|e| MetricsError::ConfigMismatch(e.to_string()))?;
        let network = Network::new(ck.arch.clone());
        Ok(EvalPolicy::Learned {
            network: Arc::new(network),
            params: Arc::new(ck.params.clone()),
            stochastic,
        })
    }

    /// Environment adjustments the policy requires.
    pub fn adapt(&self, config: &EnvConfig) -> EnvConfig {
        let mut c = config.clone();
        match self {
            EvalPolicy::Fixed => {
                c.world.camera_spawn = CameraSpawn::Formation;
                c.world.spawn_jitter = 0.0;
                c.freeze_cameras = true;
            }
            EvalPolicy::RuleBased(_) => c.world.pitch_yaw_mode = PitchYawMode::RuleBased,
            EvalPolicy::Learned { .. } => {}
        }
        c
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalOptions {
    pub episodes: usize,
    pub tau_mm: f64,
    pub seed: u64,
    /// Low-pass coefficient applied to the target reconstruction before scoring.
    pub smoothing: Option<f64>,
    /// Record the contribution vector in every frame.
    pub log_ctcr: bool,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            episodes: 10,
            tau_mm: 200.0,
            seed: 0,
            smoothing: None,
            log_ctcr: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalSummary {
    pub policy: String,
    pub episodes: usize,
    pub frames: usize,
    pub tau_mm: f64,
    /// Mean over frames with an estimate.
    pub mean_mpjpe_mm: f64,
    /// Frames without an estimate count as failures.
    pub success_rate: f64,
    pub lost_frames: usize,
    pub mean_team_reward: f64,
    pub min_human_distance: f64,
    pub mean_min_human_distance: f64,
    pub episode_mpjpe_mm: Vec<f64>,
}

fn frame(env: &MocapEnv, episode: usize, mpjpe_mm: Option<f64>, team_reward: f64, ctcr: Option<Vec<f64>>) -> FrameRecord {
    FrameRecord {
        episode,
        step: env.world.step,
        cameras: env
            .world
            .cameras
            .iter()
            .map(|c| CameraRecord {
                position: c.pose.position.into(),
                pitch: c.pose.pitch,
                yaw: c.pose.yaw,
            })
            .collect(),
        humans: env
            .world
            .humans
            .iter()
            .map(|h| HumanRecord {
                id: h.id,
                position: h.position.into(),
                is_target: h.is_target,
            })
            .collect(),
        mpjpe_mm,
        team_reward,
        ctcr,
        min_human_distance: env.min_human_distance(),
    }
}

struct Actor<'a> {
    policy: &'a EvalPolicy,
    hidden: Option<Array2<f32>>,
    rng: ChaCha8Rng,
}

impl Actor<'_> {
    fn act(&mut self, env: &MocapEnv) -> Vec<AgentAction> {
        let n = env.n_agents();
        match self.policy {
            EvalPolicy::Fixed => vec![AgentAction::IDLE; n],
            EvalPolicy::RuleBased(f) => {
                let target = env
                    .tracks
                    .get(env.target_id())
                    .map_or(Vec3::zeros(), |t| t.position);
                let poses: Vec<CameraPose> = env.world.cameras.iter().map(|c| c.pose).collect();
                rule_based_formation(&env.config.world, &poses, &target, f)
            }
            EvalPolicy::Learned {
                network,
                params,
                stochastic,
            } => {
                let od = network.arch.obs_dim;
                let obs: Vec<f32> = env
                    .observations()
                    .into_iter()
                    .flat_map(|o| o.0.into_iter().map(|x| x as f32))
                    .collect();
                let t = env.target_state().map(|x| x as f32);
                let p_tgt = Array2::from_shape_fn((n, STATE_DIM), |(_, c)| t[c]);
                let hidden = self
                    .hidden
                    .take()
                    .unwrap_or_else(|| Array2::zeros((n, network.hidden_dim())));
                let out = network
                    .step(
                        params,
                        Array2::from_shape_vec((n, od), obs).expect("observation width"),
                        hidden,
                        p_tgt,
                    )
                    .expect("architecture checked at load");
                self.hidden = Some(out.h);
                let masks = env.masks();
                (0..n)
                    .map(|i| {
                        let l: Vec<f64> = out.logits.row(i).iter().map(|&x| f64::from(x)).collect();
                        let base = ActionDistribution::from_logits(&l);
                        let d = match masks[i] {
                            Some(m) => base.clone().masked(m).unwrap_or(base),
                            None => base,
                        };
                        if *stochastic {
                            d.sample(&mut self.rng)
                        } else {
                            d.mode()
                        }
                    })
                    .collect()
            }
        }
    }
}

fn run_episode(
    policy: &EvalPolicy,
    config: &Arc<EnvConfig>,
    options: &EvalOptions,
    episode: usize,
) -> Result<Vec<FrameRecord>, EnvError> {
    let seed = stream_seed(options.seed, 100 + episode as u64);
    let mut env = MocapEnv::new(Arc::clone(config), seed)?;
    let mut actor = Actor {
        policy,
        hidden: None,
        rng: ChaCha8Rng::seed_from_u64(stream_seed(seed, 3)),
    };
    let mut smoother = options.smoothing.map(TemporalSmoother::new);
    let mut frames = Vec::with_capacity(config.world.max_episode_length);
    loop {
        let actions = actor.act(&env);
        let r = env.step(&actions)?;
        let error = match smoother.as_mut() {
            None => r.mpjpe,
            Some(s) => {
                let joints: [Option<Vec3>; NUM_JOINTS] = match &env.target_estimate {
                    Some(e) => std::array::from_fn(|j| e.triangulated[j].then_some(e.skeleton.joints[j])),
                    None => [None; NUM_JOINTS],
                };
                let truth = crate::crowdworld::skeleton_of(env.world.target());
                s.push(&joints).map(|sk| mpjpe(&sk, &truth))
            }
        };
        frames.push(frame(&env, episode, error, r.team_reward, r.ctcr));
        if r.done {
            break;
        }
    }
    Ok(frames)
}

/// Runs `options.episodes` episodes, streaming frames to `frames_out` in
/// episode order.
pub fn evaluate(
    policy: &EvalPolicy,
    config: &EnvConfig,
    options: &EvalOptions,
    frames_out: Option<&mut dyn Write>,
) -> Result<EvalSummary, MetricsError> {
    let mut cfg = policy.adapt(config);
    cfg.always_ctcr = options.log_ctcr;
    if let EvalPolicy::Learned { network, .. } = policy {
        let a = &network.arch;
        let obs = cfg.perception.layout().len();
        if a.obs_dim != obs || a.action_factors != cfg.action_factors() || a.max_cameras != cfg.perception.max_cameras {
            return Err(MetricsError::ConfigMismatch(format!(
                "network expects obs {} / {} factors / {} cameras, environment gives {} / {} / {}",
                a.obs_dim,
                a.action_factors,
                a.max_cameras,
                obs,
                cfg.action_factors(),
                cfg.perception.max_cameras
            )));
        }
    }
    cfg.validate()?;
    let cfg = Arc::new(cfg);
    let episodes = par::map_range(options.episodes, |e| run_episode(policy, &cfg, options, e));
    let mut summary = EvalSummary {
        policy: policy.name().to_string(),
        episodes: options.episodes,
        frames: 0,
        tau_mm: options.tau_mm,
        mean_mpjpe_mm: f64::NAN,
        success_rate: 0.0,
        lost_frames: 0,
        mean_team_reward: 0.0,
        min_human_distance: f64::INFINITY,
        mean_min_human_distance: 0.0,
        episode_mpjpe_mm: Vec::with_capacity(options.episodes),
    };
    let mut errors = Vec::new();
    let mut reward = 0.0;
    let mut dist = 0.0;
    let mut out = frames_out;
    for ep in episodes {
        let frames = ep?;
        let ep_err: Vec<f64> = frames.iter().filter_map(|f| f.mpjpe_mm).collect();
        summary
            .episode_mpjpe_mm
            .push(if ep_err.is_empty() { f64::NAN } else { ep_err.iter().sum::<f64>() / ep_err.len() as f64 });
        for f in &frames {
            summary.frames += 1;
            match f.mpjpe_mm {
                Some(e) => errors.push(e),
                None => summary.lost_frames += 1,
            }
            reward += f.team_reward;
            dist += f.min_human_distance;
            summary.min_human_distance = summary.min_human_distance.min(f.min_human_distance);
            if let Some(w) = out.as_deref_mut() {
                serde_json::to_writer(&mut *w, f).map_err(std::io::Error::from)?;
                w.write_all(b"\n")?;
            }
        }
    }
    if summary.frames > 0 {
        let n = summary.frames as f64;
        if !errors.is_empty() {
            summary.mean_mpjpe_mm = errors.iter().sum::<f64>() / errors.len() as f64;
        }
        summary.success_rate = errors.iter().filter(|&&e| e <= options.tau_mm).count() as f64 / n;
        summary.mean_team_reward = reward / n;
        summary.mean_min_human_distance = dist / n;
    }
    Ok(summary)
}

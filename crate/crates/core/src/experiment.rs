//! Multi-run studies: learned policies against baselines, and perturbation
//! sensitivity of a trained policy.

use crate::config::RunConfig;
use crate::env::RewardMode;
use crate::marl::{paper_lr_schedule, train, TrainError};
use crate::metrics::{evaluate, EvalOptions, EvalPolicy, EvalSummary, MetricsError};
use crate::neural::Network;
use serde::{Deserialize, Serialize};
use std::path::Path;
use std::sync::Arc;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ExperimentError {
    #[error("training {arm} (seed {seed}): {source}")]
    Train {
        arm: &'static str,
        seed: u64,
        #[source]
        source: TrainError,
    },
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyConfig {
    pub seeds: Vec<u64>,
    pub total_steps: usize,
    pub num_cameras: usize,
    pub num_humans: usize,
    pub noise_sigma: f64,
    pub eval_episodes: usize,
    /// Evaluation seed shared by every arm of a training seed.
    pub eval_seed_offset: u64,
}

impl Default for EfficacyConfig {
    fn default() -> Self {
        Self {
            seeds: vec![0, 1, 2],
            total_steps: 150_000,
            num_cameras: 3,
            num_humans: 3,
            noise_sigma: 2.0,
            eval_episodes: 10,
            eval_seed_offset: 10_000,
        }
    }
}

impl EfficacyConfig {
    /// Reference-scale training restricted to the study's world.
    pub fn base_run(&self, seed: u64) -> RunConfig {
        let mut r = RunConfig::paper();
        r.world.seed = seed;
        r.world.num_cameras = self.num_cameras;
        r.world.human_count = [self.num_humans, self.num_humans];
        r.perception.noise_sigma = self.noise_sigma;
        r.train.total_steps = self.total_steps;
        r.train.lr_schedule = paper_lr_schedule();
        r
    }

    pub fn arm(&self, seed: u64, arm: Arm) -> RunConfig {
        let mut r = self.base_run(seed);
        match arm {
            Arm::CtcrWdl => {
                r.train.reward_mode = RewardMode::Ctcr;
            }
            Arm::Shared => {
                r.train.reward_mode = RewardMode::Shared;
                r.train.wdl_coeff = 0.0;
            }
        }
        r
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arm {
    /// Per-camera Shapley credit with the auxiliary dynamics losses.
    CtcrWdl,
    /// Team reward for every camera, no auxiliary losses.
    Shared,
}

impl Arm {
    pub fn name(self) -> &'static str {
        match self {
            Arm::CtcrWdl => "ctcr_wdl",
            Arm::Shared => "shared",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SeedResult {
    pub seed: u64,
    pub ctcr_wdl: EvalSummary,
    pub shared: EvalSummary,
    pub fixed: EvalSummary,
    /// Mean MPJPE over the last ten training iterations.
    pub ctcr_wdl_train_tail_mm: Option<f64>,
    pub shared_train_tail_mm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EfficacyReport {
    pub config: EfficacyConfig,
    pub seeds: Vec<SeedResult>,
}

fn mean(xs: impl Iterator<Item = f64>) -> f64 {
    let v: Vec<f64> = xs.collect();
    v.iter().sum::<f64>() / v.len().max(1) as f64
}

impl EfficacyReport {
    pub fn mean_mpjpe(&self, arm: Option<Arm>) -> f64 {
        mean(self.seeds.iter().map(|s| match arm {
            Some(Arm::CtcrWdl) => s.ctcr_wdl.mean_mpjpe_mm,
            Some(Arm::Shared) => s.shared.mean_mpjpe_mm,
            None => s.fixed.mean_mpjpe_mm,
        }))
    }

    /// Learned arm beats the static formation on average.
    pub fn beats_fixed(&self) -> bool {
        self.mean_mpjpe(Some(Arm::CtcrWdl)) < self.mean_mpjpe(None)
    }

    /// Seeds where the credited arm is no worse than the shared-reward arm.
    pub fn seeds_not_worse_than_shared(&self) -> usize {
        self.seeds
            .iter()
            .filter(|s| s.ctcr_wdl.mean_mpjpe_mm <= s.shared.mean_mpjpe_mm)
            .count()
    }
}

fn tail_mpjpe(rows: &[crate::marl::IterationRow]) -> Option<f64> {
    let tail: Vec<f64> = rows.iter().rev().take(10).filter_map(|r| r.mpjpe_mm).collect();
    (!tail.is_empty()).then(|| mean(tail.into_iter()))
}

/// Policies act as they did during training: the argmax of an immature
/// policy tends to fly every camera the same way.
fn learned(outcome: crate::marl::TrainOutcome) -> EvalPolicy {
    EvalPolicy::Learned {
        network: Arc::new(outcome.network),
        params: Arc::new(outcome.params),
        stochastic: true,
    }
}

/// Trains both arms for every seed and evaluates them next to the fixed
/// formation. Run directories go under `out_dir/seed_<s>/<arm>`.
pub fn run_efficacy(
    cfg: &EfficacyConfig,
    out_dir: Option<&Path>,
    mut progress: impl FnMut(&str),
) -> Result<EfficacyReport, ExperimentError> {
    let mut seeds = Vec::new();
    for &seed in &cfg.seeds {
        let options = EvalOptions {
            episodes: cfg.eval_episodes,
            seed: cfg.eval_seed_offset + seed,
            ..EvalOptions::default()
        };
        let env = cfg.base_run(seed).env_config();
        let mut arms = Vec::new();
        for arm in [Arm::CtcrWdl, Arm::Shared] {
            let run = cfg.arm(seed, arm);
            let dir = out_dir.map(|d| d.join(format!("seed_{seed}")).join(arm.name()));
            let outcome = train(&run, dir.as_deref(), |row| {
                if row.iteration % 10 == 0 {
                    progress(&format!(
                        "seed {seed} {} iter {} steps {} mpjpe {:?} team_reward {:.3}",
                        arm.name(),
                        row.iteration,
                        row.env_steps,
                        row.mpjpe_mm.map(|m| m.round()),
                        row.team_reward
                    ));
                }
            })
            .map_err(|source| ExperimentError::Train {
                arm: arm.name(),
                seed,
                source,
            })?;
            let tail = tail_mpjpe(&outcome.rows);
            let summary = evaluate(&learned(outcome), &env, &options, None)?;
            progress(&format!("seed {seed} {} eval mpjpe {:.1}", arm.name(), summary.mean_mpjpe_mm));
            arms.push((summary, tail));
        }
        let fixed = evaluate(&EvalPolicy::Fixed, &env, &options, None)?;
        progress(&format!("seed {seed} fixed eval mpjpe {:.1}", fixed.mean_mpjpe_mm));
        let (shared, shared_tail) = arms.pop().expect("two arms");
        let (ctcr_wdl, ctcr_tail) = arms.pop().expect("two arms");
        seeds.push(SeedResult {
            seed,
            ctcr_wdl,
            shared,
            fixed,
            ctcr_wdl_train_tail_mm: ctcr_tail,
            shared_train_tail_mm: shared_tail,
        });
    }
    Ok(EfficacyReport {
        config: cfg.clone(),
        seeds,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessRow {
    pub condition: String,
    pub mean_mpjpe_mm: f64,
    pub success_rate: f64,
    /// Relative to the unperturbed policy.
    pub degradation_mm: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RobustnessReport {
    pub episodes: usize,
    pub eta: f64,
    pub noise: [f64; 2],
    /// vanilla, delay, noise, noise+delay.
    pub rows: Vec<RobustnessRow>,
}

impl RobustnessReport {
    fn mm(&self, condition: &str) -> f64 {
        self.rows
            .iter()
            .find(|r| r.condition == condition)
            .map_or(f64::NAN, |r| r.mean_mpjpe_mm)
    }

    /// The individual comparisons of noise+delay ≥ noise ≥ delay ≥ vanilla.
    pub fn ordering(&self) -> [(String, bool); 3] {
        let pairs = [("noise+delay", "noise"), ("noise", "delay"), ("delay", "vanilla")];
        pairs.map(|(a, b)| (format!("{a} >= {b}"), self.mm(a) >= self.mm(b)))
    }
}

/// Evaluates `network` unperturbed, with command smoothing, with
/// multiplicative command noise, and with both.
pub fn robustness(
    run: &RunConfig,
    network: Network,
    params: Vec<f32>,
    episodes: usize,
    eta: f64,
    noise: [f64; 2],
    seed: u64,
    stochastic: bool,
) -> Result<RobustnessReport, MetricsError> {
    let policy = EvalPolicy::Learned {
        network: Arc::new(network),
        params: Arc::new(params),
        stochastic,
    };
    let options = EvalOptions {
        episodes,
        seed,
        ..EvalOptions::default()
    };
    let mut rows: Vec<RobustnessRow> = Vec::new();
    for (name, delay, noisy) in [
        ("vanilla", false, false),
        ("delay", true, false),
        ("noise", false, true),
        ("noise+delay", true, true),
    ] {
        let mut env = run.env_config();
        env.smooth.eta = if delay { eta } else { 1.0 };
        env.noise.enabled = noisy;
        env.noise.lo = noise[0];
        env.noise.hi = noise[1];
        let s: EvalSummary = evaluate(&policy, &env, &options, None)?;
        let base = rows.first().map_or(s.mean_mpjpe_mm, |r| r.mean_mpjpe_mm);
        rows.push(RobustnessRow {
            condition: name.to_string(),
            mean_mpjpe_mm: s.mean_mpjpe_mm,
            success_rate: s.success_rate,
            degradation_mm: s.mean_mpjpe_mm - base,
        });
    }
    Ok(RobustnessReport {
        episodes,
        eta,
        noise,
        rows,
    })
}

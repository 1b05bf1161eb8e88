//! Multi-agent PPO with a centralised critic, contribution-based rewards and
//! world-dynamics auxiliary losses.

mod learner;
mod rollout;
mod run;

pub use learner::{adapt_kl, ppo_terms, Adam, EpochStats, Learner, PpoTerms};
pub use rollout::{Batch, Collector, Segment, Transition};
pub use run::{train, IterationRow, TrainOutcome};

use crate::env::{EnvError, RewardMode};
use crate::neural::checkpoint::CheckpointError;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum TrainError {
    #[error("non-finite {component} loss at iteration {iteration}, SGD pass {pass}, minibatch {minibatch}")]
    NonFiniteLoss {
        component: &'static str,
        iteration: usize,
        pass: usize,
        minibatch: usize,
    },
    #[error("invalid training configuration: {0}")]
    InvalidConfig(String),
    #[error("iteration {iteration}: {source}")]
    Env {
        iteration: usize,
        #[source]
        source: EnvError,
    },
    #[error("iteration {iteration}: {source}")]
    Checkpoint {
        iteration: usize,
        #[source]
        source: CheckpointError,
    },
    #[error("iteration {iteration}: {source}")]
    Io {
        iteration: usize,
        #[source]
        source: std::io::Error,
    },
}

/// Which reward the centralised critic regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "snake_case")]
pub enum CriticTarget {
    #[default]
    Team,
    /// Mean of the per-agent rewards (identical to `team` under contribution rewards).
    AgentMean,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct WdlCoefficients {
    pub self_state: f64,
    pub peer: f64,
    pub reward: f64,
    pub target: f64,
    pub pedestrian: f64,
}

impl Default for WdlCoefficients {
    fn default() -> Self {
        Self {
            self_state: 1.0,
            peer: 1.0,
            reward: 1.0,
            target: 1.0,
            pedestrian: 0.1,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainConfig {
    pub gamma: f64,
    pub gae_lambda: f64,
    pub clip: f64,
    pub ppo_coeff: f64,
    pub kl_coeff: f64,
    pub kl_target: f64,
    pub entropy_coeff: f64,
    pub value_coeff: f64,
    /// Upper bound on the per-sample squared value error.
    pub value_clip: f64,
    /// Global gradient-norm bound.
    pub grad_clip: f64,
    pub adam_eps: f64,
    /// Steps each environment runs per collection.
    pub rollout_fragment: usize,
    pub num_envs: usize,
    /// Environment steps per iteration; must equal `num_envs * rollout_fragment`.
    pub train_batch: usize,
    /// Environment steps per minibatch.
    pub minibatch: usize,
    pub sgd_iters: usize,
    /// `(env step, learning rate)` breakpoints, linearly interpolated.
    pub lr_schedule: Vec<(f64, f64)>,
    pub total_steps: usize,
    pub wdl_coeff: f64,
    pub wdl: WdlCoefficients,
    pub reward_mode: RewardMode,
    pub critic_target: CriticTarget,
    pub normalize_advantages: bool,
    /// Keep value-loss gradients out of the shared encoder.
    pub detach_critic: bool,
    /// Fixed number of gradient shards per minibatch (independent of threads).
    pub grad_chunks: usize,
    /// Iterations between checkpoints; 0 writes only the first and last.
    pub checkpoint_every: usize,
    /// Success threshold for the logged success rate, millimetres.
    pub tau_mm: f64,
}

pub const PAPER_TOTAL_STEPS: f64 = 700_000.0;

pub fn paper_lr_schedule() -> Vec<(f64, f64)> {
    vec![
        (0.0, 5e-4),
        (200e3, 5e-4),
        (200e3, 1e-4),
        (400e3, 1e-4),
        (600e3, 5e-5),
        (600e3, 5e-5),
    ]
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            gamma: 0.99,
            gae_lambda: 1.0,
            clip: 0.3,
            ppo_coeff: 1.0,
            kl_coeff: 0.2,
            kl_target: 0.01,
            entropy_coeff: 0.0,
            value_coeff: 0.1,
            value_clip: 1000.0,
            grad_clip: 50.0,
            adam_eps: 1e-8,
            rollout_fragment: 25,
            num_envs: 28,
            train_batch: 700,
            minibatch: 350,
            sgd_iters: 16,
            lr_schedule: paper_lr_schedule(),
            total_steps: 700_000,
            wdl_coeff: 1.0,
            wdl: WdlCoefficients::default(),
            reward_mode: RewardMode::Ctcr,
            critic_target: CriticTarget::Team,
            normalize_advantages: true,
            detach_critic: false,
            grad_chunks: 4,
            checkpoint_every: 50,
            tau_mm: 200.0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let bad = |m: String| Err(TrainError::InvalidConfig(m));
        if self.num_envs == 0 || self.rollout_fragment == 0 {
            return bad("num_envs and rollout_fragment must be positive".into());
        }
        if self.train_batch != self.num_envs * self.rollout_fragment {
            return bad(format!(
                "train_batch {} must equal num_envs × rollout_fragment = {}",
                self.train_batch,
                self.num_envs * self.rollout_fragment
            ));
        }
        if self.minibatch == 0 || self.train_batch % self.minibatch != 0 {
            return bad(format!("minibatch {} must divide train_batch {}", self.minibatch, self.train_batch));
        }
        let coeffs = [
            ("gamma", self.gamma),
            ("gae_lambda", self.gae_lambda),
            ("clip", self.clip),
            ("ppo_coeff", self.ppo_coeff),
            ("kl_coeff", self.kl_coeff),
            ("kl_target", self.kl_target),
            ("entropy_coeff", self.entropy_coeff),
            ("value_coeff", self.value_coeff),
            ("value_clip", self.value_clip),
            ("grad_clip", self.grad_clip),
            ("wdl_coeff", self.wdl_coeff),
            ("wdl.self_state", self.wdl.self_state),
            ("wdl.peer", self.wdl.peer),
            ("wdl.reward", self.wdl.reward),
            ("wdl.target", self.wdl.target),
            ("wdl.pedestrian", self.wdl.pedestrian),
        ];
        for (name, v) in coeffs {
            if !(v >= 0.0 && v.is_finite()) {
                return bad(format!("{name} must be a finite non-negative number"));
            }
        }
        if self.gamma > 1.0 || self.gae_lambda > 1.0 {
            return bad("gamma and gae_lambda must not exceed 1".into());
        }
        if self.lr_schedule.is_empty() || self.lr_schedule.windows(2).any(|w| w[1].0 < w[0].0) {
            return bad("lr_schedule must be non-empty with non-decreasing steps".into());
        }
        if self.grad_chunks == 0 {
            return bad("grad_chunks must be positive".into());
        }
        Ok(())
    }

    pub fn iterations(&self) -> usize {
        self.total_steps / self.train_batch
    }

    pub fn lr_at(&self, env_steps: f64) -> f64 {
        lr_at(&self.lr_schedule, env_steps)
    }

    /// The reference schedule compressed to `total_steps`.
    pub fn scaled_schedule(total_steps: usize) -> Vec<(f64, f64)> {
        let f = total_steps as f64 / PAPER_TOTAL_STEPS;
        paper_lr_schedule().into_iter().map(|(t, v)| (t * f, v)).collect()
    }
}

/// Piecewise-linear schedule; repeated breakpoints make a step change and the
/// last value holds beyond the final breakpoint.
pub fn lr_at(schedule: &[(f64, f64)], t: f64) -> f64 {
    let Some(&(t0, v0)) = schedule.first() else {
        return 0.0;
    };
    if t < t0 {
        return v0;
    }
    let mut value = schedule[schedule.len() - 1].1;
    for w in schedule.windows(2) {
        let ((a, va), (b, vb)) = (w[0], w[1]);
        if t >= a && t < b {
            value = va + (vb - va) * (t - a) / (b - a);
            break;
        }
    }
    value
}

/// Generalised advantage estimation over one uninterrupted segment.
pub fn gae(rewards: &[f64], values: &[f64], bootstrap: f64, gamma: f64, lambda: f64) -> Vec<f64> {
    assert_eq!(rewards.len(), values.len());
    let mut adv = vec![0.0; rewards.len()];
    let mut acc = 0.0;
    let mut next = bootstrap;
    for t in (0..rewards.len()).rev() {
        let delta = rewards[t] + gamma * next - values[t];
        acc = delta + gamma * lambda * acc;
        adv[t] = acc;
        next = values[t];
    }
    adv
}

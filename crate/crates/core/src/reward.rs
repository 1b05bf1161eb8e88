//! Team reconstruction reward and per-camera Shapley credit (CTCR).

use crate::geometry3d::{geman_mcclure, mpjpe, Skeleton3D};
use crate::perception::{reconstruct_human, AgentPacket, CameraSet, TrackMemory, Triangulator};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Largest team for which the exact enumeration is allowed.
pub const MAX_TEAM: usize = 12;
/// Geman-McClure scale in millimetres.
pub const REWARD_SCALE_MM: f64 = 50.0;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum RewardError {
    #[error("team of {0} cameras exceeds the exact-enumeration limit of 12")]
    TeamTooLarge(usize),
    #[error("reward table has {got} entries, expected {expected}")]
    BadTable { expected: usize, got: usize },
}

/// Reward of a reconstruction error in millimetres.
pub fn reward_from_error(mpjpe_mm: f64) -> f64 {
    1.0 - geman_mcclure(mpjpe_mm, REWARD_SCALE_MM)
}

/// Reward of camera subset `subset` for reconstructing the target.
pub fn team_reward(
    subset: CameraSet,
    packets: &[AgentPacket],
    target_id: usize,
    truth: &Skeleton3D,
    triangulator: &Triangulator,
    memory: Option<&TrackMemory>,
) -> f64 {
    if subset.len() <= 1 {
        return 0.0;
    }
    match reconstruct_human(packets, subset, target_id, triangulator, memory) {
        Some(est) => reward_from_error(mpjpe(&est.skeleton, truth)),
        None => 0.0,
    }
}

/// r(S) for every subset S of an n-camera team, indexed by bitmask.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CoalitionRewardTable {
    pub n: usize,
    pub values: Vec<f64>,
}

impl CoalitionRewardTable {
    pub fn new(n: usize, values: Vec<f64>) -> Result<Self, RewardError> {
        if n > MAX_TEAM {
            return Err(RewardError::TeamTooLarge(n));
        }
        if values.len() != 1 << n {
            return Err(RewardError::BadTable {
                expected: 1 << n,
                got: values.len(),
            });
        }
        Ok(Self { n, values })
    }

    /// Builds a table by evaluating `f` on every subset.
    pub fn from_fn(n: usize, f: impl FnMut(CameraSet) -> f64) -> Result<Self, RewardError> {
        if n > MAX_TEAM {
            return Err(RewardError::TeamTooLarge(n));
        }
        let values = (0..1u32 << n).map(CameraSet).map(f).collect();
        Ok(Self { n, values })
    }

    pub fn get(&self, s: CameraSet) -> f64 {
        self.values[s.0 as usize]
    }

    pub fn full(&self) -> f64 {
        self.values[self.values.len() - 1]
    }
}

/// Evaluates the team reward on every camera subset.
pub fn coalition_table(
    packets: &[AgentPacket],
    target_id: usize,
    truth: &Skeleton3D,
    triangulator: &Triangulator,
    memory: Option<&TrackMemory>,
) -> Result<CoalitionRewardTable, RewardError> {
    let n = packets.len();
    // Packets are addressed by sender id; map subset bits onto those ids.
    let senders: Vec<usize> = packets.iter().map(|p| p.sender).collect();
    CoalitionRewardTable::from_fn(n, |s| {
        let ids = CameraSet::from_ids(s.ids().map(|k| senders[k]));
        team_reward(ids, packets, target_id, truth, triangulator, memory)
    })
}

/// Shapley weights |S|!(n-|S|-1)!/n! indexed by |S|.
fn shapley_weights(n: usize) -> Vec<f64> {
    let fact = |k: usize| (1..=k).map(|x| x as f64).product::<f64>();
    (0..n).map(|k| fact(k) * fact(n - k - 1) / fact(n)).collect()
}

/// Shapley value of each camera.
pub fn shapley(table: &CoalitionRewardTable) -> Result<Vec<f64>, RewardError> {
    let n = table.n;
    if n > MAX_TEAM {
        return Err(RewardError::TeamTooLarge(n));
    }
    let w = shapley_weights(n);
    Ok((0..n)
        .map(|i| {
            let bit = 1usize << i;
            (0..1usize << n)
                .filter(|s| s & bit == 0)
                .map(|s| w[s.count_ones() as usize] * (table.values[s | bit] - table.values[s]))
                .sum()
        })
        .collect())
}

/// CTCR(i) = n * Shapley(i).
pub fn ctcr(table: &CoalitionRewardTable) -> Result<Vec<f64>, RewardError> {
    let n = table.n as f64;
    Ok(shapley(table)?.into_iter().map(|phi| n * phi).collect())
}

use super::learner::{EpochStats, Learner, LossParts};
use super::rollout::{Batch, Collector};
use super::TrainError;
use crate::config::RunConfig;
use crate::env::stream_seed;
use crate::neural::checkpoint::Checkpoint;
use crate::neural::Network;
use serde::{Deserialize, Serialize};
use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;

/// One line of the training metrics log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct IterationRow {
    pub iteration: usize,
    pub env_steps: usize,
    pub agent_transitions: usize,
    pub episodes: usize,
    pub team_reward: f64,
    pub agent_reward: f64,
    /// Mean over frames that had a target estimate.
    pub mpjpe_mm: Option<f64>,
    pub success_rate: f64,
    pub min_human_distance: f64,
    pub losses: LossParts,
    pub kl: f64,
    pub kl_coeff: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

impl IterationRow {
    fn new(iteration: usize, env_steps: usize, batch: &Batch, stats: &EpochStats, tau: f64) -> Self {
        let steps: Vec<_> = batch.transitions().collect();
        let count = steps.len().max(1) as f64;
        let n = batch.n_agents as f64;
        let errors: Vec<f64> = steps.iter().filter_map(|t| t.mpjpe).collect();
        Self {
            iteration,
            env_steps,
            agent_transitions: batch.agent_transitions(),
            episodes: batch.episodes_completed,
            team_reward: steps.iter().map(|t| t.team_reward).sum::<f64>() / count,
            agent_reward: steps.iter().map(|t| t.rewards.iter().sum::<f64>() / n).sum::<f64>() / count,
            mpjpe_mm: (!errors.is_empty()).then(|| errors.iter().sum::<f64>() / errors.len() as f64),
            success_rate: errors.iter().filter(|&&e| e <= tau).count() as f64 / count,
            min_human_distance: steps
                .iter()
                .map(|t| t.min_human_distance)
                .fold(f64::INFINITY, f64::min),
            losses: stats.losses,
            kl: stats.kl,
            kl_coeff: stats.beta,
            lr: stats.lr,
            grad_norm: stats.grad_norm,
        }
    }
}

pub struct TrainOutcome {
    pub network: Network,
    pub params: Vec<f32>,
    pub rows: Vec<IterationRow>,
    /// Checkpoints written, in order.
    pub checkpoints: Vec<PathBuf>,
}

fn checkpoint_path(dir: &Path, iteration: usize) -> PathBuf {
    dir.join("checkpoints").join(format!("iter_{iteration:06}.ckpt"))
}

/// Full training run. With `out_dir` the resolved config, metrics log and
/// checkpoints are written there; `on_row` sees every metrics row.
pub fn train(
    run: &RunConfig,
    out_dir: Option<&Path>,
    mut on_row: impl FnMut(&IterationRow),
) -> Result<TrainOutcome, TrainError> {
    run.validate()
        .map_err(|e| TrainError::InvalidConfig(e.to_string()))?;
    let cfg = &run.train;
    let seed = run.world.seed;
    let io = |iteration| move |source| TrainError::Io { iteration, source };
    let env_config = Arc::new(run.env_config());
    let net = Network::new(run.architecture());
    let params: Vec<f32> = net.init_params(stream_seed(seed, 1));
    let mut collector = Collector::new(env_config, cfg.num_envs, net.hidden_dim(), stream_seed(seed, 2))
        .map_err(|source| TrainError::Env { iteration: 0, source })?;
    let mut learner = Learner::new(net, params, cfg, stream_seed(seed, 3));

    let mut log = None;
    if let Some(dir) = out_dir {
        std::fs::create_dir_all(dir.join("checkpoints")).map_err(io(0))?;
        std::fs::write(dir.join("config.toml"), run.to_toml_string()).map_err(io(0))?;
        log = Some(BufWriter::new(File::create(dir.join("metrics.jsonl")).map_err(io(0))?));
    }
    let mut checkpoints = Vec::new();
    let mut save = |learner: &Learner, iteration: usize| -> Result<(), TrainError> {
        if let Some(dir) = out_dir {
            let path = checkpoint_path(dir, iteration);
            let ck = Checkpoint::from_params(&learner.net, &learner.params);
            ck.save(&path)
                .map_err(|source| TrainError::Checkpoint { iteration, source })?;
            ck.save(&dir.join("policy.ckpt"))
                .map_err(|source| TrainError::Checkpoint { iteration, source })?;
            checkpoints.push(path);
        }
        Ok(())
    };
    save(&learner, 0)?;

    let iterations = cfg.iterations();
    let mut rows = Vec::with_capacity(iterations);
    for it in 1..=iterations {
        let mut batch = collector
            .collect(&learner.net, &learner.params, cfg.rollout_fragment)
            .map_err(|source| TrainError::Env { iteration: it, source })?;
        batch.postprocess(cfg);
        learner.env_steps += batch.env_steps();
        let stats = learner.train_epoch(&batch, cfg, it)?;
        let row = IterationRow::new(it, learner.env_steps, &batch, &stats, cfg.tau_mm);
        if let Some(w) = log.as_mut() {
            serde_json::to_writer(&mut *w, &row).map_err(|e| io(it)(e.into()))?;
            w.write_all(b"\n").map_err(io(it))?;
            w.flush().map_err(io(it))?;
        }
        on_row(&row);
        rows.push(row);
        if it == iterations || (cfg.checkpoint_every > 0 && it % cfg.checkpoint_every == 0) {
            save(&learner, it)?;
        }
    }
    Ok(TrainOutcome {
        network: learner.net,
        params: learner.params,
        rows,
        checkpoints,
    })
}

use super::{gae, CriticTarget, TrainConfig};
use crate::crowdworld::{AgentAction, TRANSLATION_COMBOS};
use crate::env::{stream_seed, EnvConfig, EnvError, MocapEnv, StepResult};
use crate::neural::{ActionDistribution, Network, STATE_DIM};
use crate::par;
use ndarray::{s, Array2};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use std::sync::Arc;

/// One environment step: per-agent rows (agent-major) plus shared fields.
#[derive(Debug, Clone, PartialEq)]
pub struct Transition {
    pub obs: Vec<f32>,
    pub next_obs: Vec<f32>,
    /// Recurrent state each agent acted from.
    pub h_prev: Vec<f32>,
    /// Team target estimate, replicated per agent.
    pub p_tgt: Vec<f32>,
    pub actions: Vec<AgentAction>,
    pub prev_actions: Vec<AgentAction>,
    /// Behaviour-policy logits.
    pub logits: Vec<f32>,
    pub logp: Vec<f64>,
    pub masks: Vec<Option<[bool; TRANSLATION_COMBOS]>>,
    /// Critic estimate at collection time.
    pub value: f64,
    /// Per-agent rewards after substitution.
    pub rewards: Vec<f64>,
    pub team_reward: f64,
    /// Peer states per (agent, peer) pair.
    pub peer_cond: Vec<f32>,
    pub pd_cond: Vec<f32>,
    pub n_pedestrians: usize,
    // Next-step ground-truth labels for the auxiliary heads.
    pub self_next: Vec<f32>,
    pub peer_next: Vec<f32>,
    pub target_next: [f32; 2],
    pub pd_next: Vec<f32>,
    pub mpjpe: Option<f64>,
    pub min_human_distance: f64,
    pub done: bool,
    // Filled by `Batch::postprocess`.
    pub advantages: Vec<f64>,
    pub value_target: f64,
}

/// Uninterrupted run of one environment.
#[derive(Debug, Clone, PartialEq)]
pub struct Segment {
    pub env: usize,
    pub steps: Vec<Transition>,
    pub bootstrap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Batch {
    pub n_agents: usize,
    pub segments: Vec<Segment>,
    pub episodes_completed: usize,
}

impl Batch {
    pub fn env_steps(&self) -> usize {
        self.segments.iter().map(|s| s.steps.len()).sum()
    }

    /// |D| in agent transitions.
    pub fn agent_transitions(&self) -> usize {
        self.env_steps() * self.n_agents
    }

    pub fn transitions(&self) -> impl Iterator<Item = &Transition> {
        self.segments.iter().flat_map(|s| s.steps.iter())
    }

    /// Advantages from per-agent rewards and value targets from the critic's
    /// reward, both against the centralised value.
    pub fn postprocess(&mut self, config: &TrainConfig) {
        let n = self.n_agents;
        for seg in &mut self.segments {
            let values: Vec<f64> = seg.steps.iter().map(|t| t.value).collect();
            let critic_r: Vec<f64> = seg
                .steps
                .iter()
                .map(|t| match config.critic_target {
                    CriticTarget::Team => t.team_reward,
                    CriticTarget::AgentMean => t.rewards.iter().sum::<f64>() / n as f64,
                })
                .collect();
            let team_adv = gae(&critic_r, &values, seg.bootstrap, config.gamma, config.gae_lambda);
            for (t, a) in seg.steps.iter_mut().zip(&team_adv) {
                t.value_target = t.value + a;
                t.advantages = vec![0.0; n];
            }
            for i in 0..n {
                let r: Vec<f64> = seg.steps.iter().map(|t| t.rewards[i]).collect();
                let adv = gae(&r, &values, seg.bootstrap, config.gamma, config.gae_lambda);
                for (t, a) in seg.steps.iter_mut().zip(adv) {
                    t.advantages[i] = a;
                }
            }
        }
        if config.normalize_advantages {
            let all: Vec<f64> = self.transitions().flat_map(|t| t.advantages.iter().copied()).collect();
            if all.len() > 1 {
                let mean = all.iter().sum::<f64>() / all.len() as f64;
                let var = all.iter().map(|a| (a - mean).powi(2)).sum::<f64>() / all.len() as f64;
                let sd = var.sqrt().max(1e-8);
                for seg in &mut self.segments {
                    for t in &mut seg.steps {
                        for a in &mut t.advantages {
                            *a = (*a - mean) / sd;
                        }
                    }
                }
            }
        }
    }
}

struct Worker {
    index: usize,
    env: MocapEnv,
    hidden: Vec<f32>,
    rng: ChaCha8Rng,
    prev_actions: Vec<AgentAction>,
    segment: Vec<Transition>,
    finished: Vec<Vec<Transition>>,
    episodes: usize,
}

/// Persistent set of environments stepped in lockstep with batched inference.
pub struct Collector {
    workers: Vec<Worker>,
    n_agents: usize,
    hidden_dim: usize,
}

fn levels(a: &AgentAction, factors: usize) -> Vec<usize> {
    let mut v: Vec<usize> = a.translation.iter().map(|l| l.index()).collect();
    if factors == 5 {
        v.extend(a.rotation.iter().map(|l| l.index()));
    }
    v
}

/// Policy distribution of one agent given its logits and safety mask.
pub(crate) fn distribution(logits: &[f64], mask: &Option<[bool; TRANSLATION_COMBOS]>) -> ActionDistribution {
    let d = ActionDistribution::from_logits(logits);
    match mask {
        Some(m) => d.masked(*m).expect("stored masks are feasible"),
        None => d,
    }
}

impl Collector {
    pub fn new(env_config: Arc<EnvConfig>, num_envs: usize, hidden_dim: usize, seed: u64) -> Result<Self, EnvError> {
        let n_agents = env_config.world.num_cameras;
        let workers = (0..num_envs)
            .map(|index| {
                let s = stream_seed(seed, 1000 + index as u64);
                Ok(Worker {
                    index,
                    env: MocapEnv::new(Arc::clone(&env_config), s)?,
                    hidden: vec![0.0; n_agents * hidden_dim],
                    rng: ChaCha8Rng::seed_from_u64(stream_seed(s, 7)),
                    prev_actions: vec![AgentAction::IDLE; n_agents],
                    segment: Vec::new(),
                    finished: Vec::new(),
                    episodes: 0,
                })
            })
            .collect::<Result<Vec<_>, EnvError>>()?;
        Ok(Self {
            workers,
            n_agents,
            hidden_dim,
        })
    }

    pub fn n_agents(&self) -> usize {
        self.n_agents
    }

    fn obs_rows(env: &MocapEnv) -> Vec<f32> {
        env.observations()
            .into_iter()
            .flat_map(|o| o.0.into_iter().map(|x| x as f32))
            .collect()
    }

    /// Centralised values of stacked observation rows (`n_agents` per state).
    fn values(net: &Network, params: &[f32], obs: Array2<f32>, n_agents: usize) -> Vec<f64> {
        let z = net.encoder.eval(params, obs);
        net.value(params, net.critic_input(z.view(), n_agents))
            .into_iter()
            .map(f64::from)
            .collect()
    }

    /// Runs every environment for `fragment` steps with the given parameters.
    pub fn collect(&mut self, net: &Network, params: &[f32], fragment: usize) -> Result<Batch, EnvError> {
        let n = self.n_agents;
        let hd = self.hidden_dim;
        let od = net.arch.obs_dim;
        let e = self.workers.len();
        for _ in 0..fragment {
            let mut obs = Array2::<f32>::zeros((e * n, od));
            let mut hidden = Array2::<f32>::zeros((e * n, hd));
            let mut p_tgt = Array2::<f32>::zeros((e * n, STATE_DIM));
            for w in &self.workers {
                let rows = s![w.index * n..(w.index + 1) * n, ..];
                let o = Self::obs_rows(&w.env);
                obs.slice_mut(rows)
                    .assign(&Array2::from_shape_vec((n, od), o).expect("observation width"));
                hidden
                    .slice_mut(rows)
                    .assign(&Array2::from_shape_vec((n, hd), w.hidden.clone()).expect("hidden width"));
                let t = w.env.target_state().map(|x| x as f32);
                for i in 0..n {
                    p_tgt.row_mut(w.index * n + i).assign(&ndarray::arr1(&t));
                }
            }
            let out = net
                .step(params, obs.clone(), hidden, p_tgt.clone())
                .expect("collector builds well-formed inputs");
            let values: Vec<f64> = net
                .value(params, net.critic_input(out.z.view(), n))
                .into_iter()
                .map(f64::from)
                .collect();
            let (obs, p_tgt, out) = (&obs, &p_tgt, &out);
            let results = par::map_slice_mut(&mut self.workers, |w| -> Result<(), EnvError> {
                let k = w.index;
                let masks = w.env.masks();
                let mut actions = Vec::with_capacity(n);
                let mut logp = Vec::with_capacity(n);
                let mut used_masks = Vec::with_capacity(n);
                let logits = out.logits.slice(s![k * n..(k + 1) * n, ..]).to_owned();
                for i in 0..n {
                    let l: Vec<f64> = logits.row(i).iter().map(|&x| f64::from(x)).collect();
                    let base = ActionDistribution::from_logits(&l);
                    let (d, m) = match masks[i] {
                        Some(m) => match base.clone().masked(m) {
                            Some(d) => (d, Some(m)),
                            None => (base, None),
                        },
                        None => (base, None),
                    };
                    let a = d.sample(&mut w.rng);
                    logp.push(d.log_prob(&a));
                    actions.push(a);
                    used_masks.push(m);
                }
                let cams = w.env.camera_states();
                let peer_cond: Vec<f32> = (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i))
                    .flat_map(|j| cams[j].map(|x| x as f32))
                    .collect();
                let pd = w.env.pedestrians();

                let result: StepResult = w.env.step(&actions)?;

                let cam_next = w.env.camera_planar();
                let self_next: Vec<f32> = cam_next.iter().flat_map(|c| c.map(|x| x as f32)).collect();
                let peer_next: Vec<f32> = (0..n)
                    .flat_map(|i| (0..n).filter(move |&j| j != i))
                    .flat_map(|j| cam_next[j].map(|x| x as f32))
                    .collect();
                let tid = w.env.target_id();
                let target_next = w.env.human_planar(tid).expect("target exists").map(|x| x as f32);
                let pd_next: Vec<f32> = pd
                    .ids
                    .iter()
                    .flat_map(|&id| w.env.human_planar(id).expect("tracked pedestrian exists").map(|x| x as f32))
                    .collect();
                let h_prev = std::mem::take(&mut w.hidden);
                let next_obs = Self::obs_rows(&w.env);
                let t = Transition {
                    obs: obs.slice(s![k * n..(k + 1) * n, ..]).iter().copied().collect(),
                    next_obs,
                    h_prev,
                    p_tgt: p_tgt.slice(s![k * n..(k + 1) * n, ..]).iter().copied().collect(),
                    actions: actions.clone(),
                    prev_actions: std::mem::replace(&mut w.prev_actions, actions),
                    logits: logits.iter().copied().collect(),
                    logp,
                    masks: used_masks,
                    value: values[k],
                    rewards: result.rewards,
                    team_reward: result.team_reward,
                    peer_cond,
                    pd_cond: pd.states.iter().flat_map(|s| s.map(|x| x as f32)).collect(),
                    n_pedestrians: pd.ids.len(),
                    self_next,
                    peer_next,
                    target_next,
                    pd_next,
                    mpjpe: result.mpjpe,
                    min_human_distance: result.min_human_distance,
                    done: result.done,
                    advantages: Vec::new(),
                    value_target: 0.0,
                };
                w.segment.push(t);
                if result.done {
                    w.finished.push(std::mem::take(&mut w.segment));
                    w.env.reset();
                    w.hidden = vec![0.0; n * hd];
                    w.prev_actions = vec![AgentAction::IDLE; n];
                    w.episodes += 1;
                } else {
                    w.hidden = out.h.slice(s![k * n..(k + 1) * n, ..]).iter().copied().collect();
                }
                Ok(())
            });
            results.into_iter().collect::<Result<(), EnvError>>()?;
        }

        let mut pending: Vec<(usize, Vec<Transition>)> = Vec::new();
        let mut episodes = 0;
        for w in &mut self.workers {
            for seg in w.finished.drain(..) {
                pending.push((w.index, seg));
            }
            if !w.segment.is_empty() {
                pending.push((w.index, std::mem::take(&mut w.segment)));
            }
            episodes += std::mem::take(&mut w.episodes);
        }
        let last_obs: Vec<f32> = pending
            .iter()
            .flat_map(|(_, s)| s.last().expect("non-empty segment").next_obs.iter().copied())
            .collect();
        let boot = Self::values(
            net,
            params,
            Array2::from_shape_vec((pending.len() * n, od), last_obs).expect("bootstrap rows"),
            n,
        );
        let segments = pending
            .into_iter()
            .zip(boot)
            .map(|((env, steps), bootstrap)| Segment { env, steps, bootstrap })
            .collect();
        Ok(Batch {
            n_agents: n,
            segments,
            episodes_completed: episodes,
        })
    }

    /// The environments, in worker order.
    pub fn envs(&self) -> impl Iterator<Item = &MocapEnv> {
        self.workers.iter().map(|w| &w.env)
    }
}

impl Transition {
    /// Factor level indices of the taken actions.
    pub fn action_levels(&self, factors: usize) -> Vec<Vec<usize>> {
        self.actions.iter().map(|a| levels(a, factors)).collect()
    }
}

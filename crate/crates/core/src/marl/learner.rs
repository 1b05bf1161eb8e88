use super::rollout::{distribution, Batch, Transition};
use super::{TrainConfig, TrainError};
use crate::crowdworld::AgentAction;
use crate::neural::mdn::nll_and_grad;
use crate::neural::{action_one_hot, ActionDistribution, GraphInputs, HeadSwitches, Network, OutputGrads, STATE_DIM};
use crate::par;
use ndarray::Array2;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

/// Adaptive KL rule: double above twice the target, halve below half of it.
pub fn adapt_kl(beta: f64, measured: f64, target: f64) -> f64 {
    if measured > 2.0 * target {
        beta * 2.0
    } else if measured < 0.5 * target {
        beta * 0.5
    } else {
        beta
    }
}

/// Per-sample clipped-surrogate quantities.
#[derive(Debug, Clone, PartialEq)]
pub struct PpoTerms {
    pub ratio: f64,
    pub surrogate: f64,
    /// d surrogate / d logits of the new policy.
    pub surrogate_grad: Vec<f64>,
    pub kl: f64,
}

pub fn ppo_terms(
    new: &ActionDistribution,
    old: &ActionDistribution,
    action: &AgentAction,
    logp_old: f64,
    advantage: f64,
    clip: f64,
) -> PpoTerms {
    let ratio = (new.log_prob(action) - logp_old).exp();
    let unclipped = ratio * advantage;
    let clipped = ratio.clamp(1.0 - clip, 1.0 + clip) * advantage;
    let (surrogate, surrogate_grad) = if unclipped <= clipped {
        let g = new.log_prob_grad(action).into_iter().map(|x| x * ratio * advantage).collect();
        (unclipped, g)
    } else {
        (clipped, vec![0.0; 3 * new.n_factors()])
    };
    PpoTerms {
        ratio,
        surrogate,
        surrogate_grad,
        kl: old.kl(new),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Adam {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    m: Vec<f32>,
    v: Vec<f32>,
    t: i32,
}

impl Adam {
    pub fn new(n: usize, eps: f64) -> Self {
        Self {
            beta1: 0.9,
            beta2: 0.999,
            eps,
            m: vec![0.0; n],
            v: vec![0.0; n],
            t: 0,
        }
    }

    pub fn step(&mut self, p: &mut [f32], g: &[f32], lr: f64) {
        self.t += 1;
        let (b1, b2) = (self.beta1 as f32, self.beta2 as f32);
        let c1 = 1.0 - self.beta1.powi(self.t);
        let c2 = 1.0 - self.beta2.powi(self.t);
        let step = (lr * c2.sqrt() / c1) as f32;
        let eps = (self.eps * c2.sqrt()) as f32;
        for (((p, &g), m), v) in p.iter_mut().zip(g).zip(&mut self.m).zip(&mut self.v) {
            *m = b1 * *m + (1.0 - b1) * g;
            *v = b2 * *v + (1.0 - b2) * g * g;
            *p -= step * *m / (v.sqrt() + eps);
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossParts {
    pub policy: f64,
    pub value: f64,
    pub kl: f64,
    pub entropy: f64,
    pub wdl_self: f64,
    pub wdl_reward: f64,
    pub wdl_peer: f64,
    pub wdl_target: f64,
    pub wdl_pedestrian: f64,
    pub total: f64,
}

impl LossParts {
    fn add(&mut self, o: &LossParts) {
        self.policy += o.policy;
        self.value += o.value;
        self.kl += o.kl;
        self.entropy += o.entropy;
        self.wdl_self += o.wdl_self;
        self.wdl_reward += o.wdl_reward;
        self.wdl_peer += o.wdl_peer;
        self.wdl_target += o.wdl_target;
        self.wdl_pedestrian += o.wdl_pedestrian;
        self.total += o.total;
    }

    fn scaled(mut self, f: f64) -> Self {
        for x in [
            &mut self.policy,
            &mut self.value,
            &mut self.kl,
            &mut self.entropy,
            &mut self.wdl_self,
            &mut self.wdl_reward,
            &mut self.wdl_peer,
            &mut self.wdl_target,
            &mut self.wdl_pedestrian,
            &mut self.total,
        ] {
            *x *= f;
        }
        self
    }

    fn first_non_finite(&self) -> Option<&'static str> {
        [
            ("policy", self.policy),
            ("value", self.value),
            ("kl", self.kl),
            ("entropy", self.entropy),
            ("self-state", self.wdl_self),
            ("reward-prediction", self.wdl_reward),
            ("peer", self.wdl_peer),
            ("target", self.wdl_target),
            ("pedestrian", self.wdl_pedestrian),
        ]
        .into_iter()
        .find(|(_, v)| !v.is_finite())
        .map(|(n, _)| n)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochStats {
    /// Means over all minibatch updates.
    pub losses: LossParts,
    /// Mean KL over the final SGD pass.
    pub kl: f64,
    /// KL coefficient after adaptation.
    pub beta: f64,
    pub lr: f64,
    pub grad_norm: f64,
}

/// Loss normalisers for one minibatch.
#[derive(Debug, Clone, Copy)]
struct Counts {
    steps: f64,
    rows: f64,
    peer_rows: f64,
    pd_rows: f64,
}

pub struct Learner {
    pub net: Network,
    pub params: Vec<f32>,
    pub adam: Adam,
    pub beta: f64,
    /// Environment steps consumed so far (drives the learning-rate schedule).
    pub env_steps: usize,
    rng: ChaCha8Rng,
}

impl Learner {
    pub fn new(net: Network, params: Vec<f32>, config: &TrainConfig, seed: u64) -> Self {
        let n = params.len();
        Self {
            net,
            params,
            adam: Adam::new(n, config.adam_eps),
            beta: config.kl_coeff,
            env_steps: 0,
            rng: ChaCha8Rng::seed_from_u64(seed),
        }
    }

    fn heads(&self, cfg: &TrainConfig, n_agents: usize) -> HeadSwitches {
        let on = |c: f64| cfg.wdl_coeff * c > 0.0;
        HeadSwitches {
            self_state: on(cfg.wdl.self_state),
            reward: on(cfg.wdl.reward),
            peer: on(cfg.wdl.peer) && n_agents > 1,
            pedestrian: on(cfg.wdl.pedestrian),
        }
    }

    fn chunk_grad(&self, steps: &[&Transition], n: usize, counts: Counts, cfg: &TrainConfig, beta: f64) -> (Vec<f32>, LossParts) {
        let net = &self.net;
        let od = net.arch.obs_dim;
        let hd = net.hidden_dim();
        let f = net.arch.action_factors;
        let rows = steps.len() * n;
        let pd_rows: usize = steps.iter().map(|t| t.n_pedestrians * n).sum();
        let mut obs = Vec::with_capacity(rows * od);
        let mut h_prev = Vec::with_capacity(rows * hd);
        let mut p_tgt = Vec::with_capacity(rows * STATE_DIM);
        let mut onehot = Vec::with_capacity(rows * 3 * f);
        let mut peer_cond = Vec::new();
        let mut pd_owner = Vec::with_capacity(pd_rows);
        let mut pd_cond = Vec::with_capacity(pd_rows * STATE_DIM);
        let mut y_self = Vec::with_capacity(rows * 2);
        let mut y_peer = Vec::new();
        let mut y_target = Vec::with_capacity(rows * 2);
        let mut y_reward = Vec::with_capacity(rows);
        let mut y_pd = Vec::with_capacity(pd_rows * 2);
        for (s, t) in steps.iter().enumerate() {
            obs.extend_from_slice(&t.obs);
            h_prev.extend_from_slice(&t.h_prev);
            p_tgt.extend_from_slice(&t.p_tgt);
            for lv in t.action_levels(f) {
                onehot.extend(action_one_hot::<f32>(&lv, f));
            }
            peer_cond.extend_from_slice(&t.peer_cond);
            y_self.extend_from_slice(&t.self_next);
            y_peer.extend_from_slice(&t.peer_next);
            for i in 0..n {
                y_target.extend_from_slice(&t.target_next);
                y_reward.push(t.team_reward as f32);
                for p in 0..t.n_pedestrians {
                    pd_owner.push(s * n + i);
                    pd_cond.extend_from_slice(&t.pd_cond[p * STATE_DIM..(p + 1) * STATE_DIM]);
                    y_pd.extend_from_slice(&t.pd_next[2 * p..2 * p + 2]);
                }
            }
        }
        let arr = |v: Vec<f32>, w: usize| Array2::from_shape_vec((v.len() / w.max(1), w), v).expect("row width");
        let inputs = GraphInputs {
            obs: arr(obs, od),
            h_prev: arr(h_prev, hd),
            p_tgt: arr(p_tgt, STATE_DIM),
            action_onehot: arr(onehot, 3 * f),
            n_agents: n,
            peer_cond: arr(peer_cond, STATE_DIM),
            pd_owner,
            pd_cond: arr(pd_cond, STATE_DIM),
        };
        let heads = self.heads(cfg, n);
        let graph = net
            .forward_graph(&self.params, &inputs, heads, cfg.detach_critic)
            .expect("learner builds well-formed inputs");
        let out = &graph.outputs;
        let mut parts = LossParts::default();

        let mut d_logits = Array2::<f32>::zeros(out.logits.raw_dim());
        for (s, t) in steps.iter().enumerate() {
            for i in 0..n {
                let r = s * n + i;
                let l: Vec<f64> = out.logits.row(r).iter().map(|&x| f64::from(x)).collect();
                let new = distribution(&l, &t.masks[i]);
                let lo: Vec<f64> = t.logits[i * 3 * f..(i + 1) * 3 * f].iter().map(|&x| f64::from(x)).collect();
                let old = distribution(&lo, &t.masks[i]);
                let pt = ppo_terms(&new, &old, &t.actions[i], t.logp[i], t.advantages[i], cfg.clip);
                let kl_g = new.kl_grad(&old);
                let ent = new.entropy();
                let ent_g = new.entropy_grad();
                parts.policy -= pt.surrogate / counts.rows;
                parts.kl += pt.kl / counts.rows;
                parts.entropy += ent / counts.rows;
                for c in 0..3 * f {
                    let g = -cfg.ppo_coeff * pt.surrogate_grad[c] + beta * kl_g[c] - cfg.entropy_coeff * ent_g[c];
                    d_logits[(r, c)] = (g / counts.rows) as f32;
                }
            }
        }

        let mut d_values = Array2::<f32>::zeros(out.values.raw_dim());
        for (s, t) in steps.iter().enumerate() {
            let v = f64::from(out.values[(s, 0)]);
            let err = v - t.value_target;
            let sq = err * err;
            if sq < cfg.value_clip {
                d_values[(s, 0)] = (cfg.value_coeff * 2.0 * err / counts.steps) as f32;
                parts.value += sq / counts.steps;
            } else {
                parts.value += cfg.value_clip / counts.steps;
            }
        }

        let mdn = |raw: &Array2<f32>, y: Vec<f32>, dim: usize, spec, coef: f64, norm: f64, slot: &mut f64| {
            let scale = cfg.wdl_coeff * coef / norm.max(1.0);
            let mut d = Array2::zeros(raw.raw_dim());
            let nll = nll_and_grad(spec, raw.view(), arr(y, dim).view(), scale as f32, &mut d);
            *slot += nll / norm.max(1.0);
            d
        };
        let d_target = (cfg.wdl_coeff * cfg.wdl.target > 0.0).then(|| {
            mdn(&out.target_raw, y_target, 2, net.mix2(), cfg.wdl.target, counts.rows, &mut parts.wdl_target)
        });
        let d_self = out
            .self_raw
            .as_ref()
            .map(|raw| mdn(raw, y_self, 2, net.mix2(), cfg.wdl.self_state, counts.rows, &mut parts.wdl_self));
        let d_reward = out
            .reward_raw
            .as_ref()
            .map(|raw| mdn(raw, y_reward, 1, net.mix1(), cfg.wdl.reward, counts.rows, &mut parts.wdl_reward));
        let d_peer = out
            .peer_raw
            .as_ref()
            .map(|raw| mdn(raw, y_peer, 2, net.mix2(), cfg.wdl.peer, counts.peer_rows, &mut parts.wdl_peer));
        let d_pd = out.pd_raw.as_ref().map(|raw| {
            mdn(raw, y_pd, 2, net.mix2(), cfg.wdl.pedestrian, counts.pd_rows, &mut parts.wdl_pedestrian)
        });

        parts.total = cfg.ppo_coeff * parts.policy + cfg.value_coeff * parts.value + beta * parts.kl
            - cfg.entropy_coeff * parts.entropy
            + cfg.wdl_coeff
                * (cfg.wdl.self_state * parts.wdl_self
                    + cfg.wdl.reward * parts.wdl_reward
                    + cfg.wdl.peer * parts.wdl_peer
                    + cfg.wdl.target * parts.wdl_target
                    + cfg.wdl.pedestrian * parts.wdl_pedestrian);

        let grads = OutputGrads {
            logits: Some(d_logits),
            values: Some(d_values),
            target_raw: d_target,
            self_raw: d_self,
            reward_raw: d_reward,
            peer_raw: d_peer,
            pd_raw: d_pd,
        };
        let mut g = vec![0f32; net.n_params];
        net.backward_graph(&self.params, &graph, &grads, &mut g);
        (g, parts)
    }

    /// Gradient and loss of one minibatch, sharded into a fixed number of
    /// chunks and reduced in chunk order.
    pub fn minibatch_grad(&self, steps: &[&Transition], n: usize, cfg: &TrainConfig, beta: f64) -> (Vec<f32>, LossParts) {
        let rows = (steps.len() * n) as f64;
        let counts = Counts {
            steps: steps.len() as f64,
            rows,
            peer_rows: rows * n.saturating_sub(1) as f64,
            pd_rows: steps.iter().map(|t| (t.n_pedestrians * n) as f64).sum(),
        };
        let k = cfg.grad_chunks.min(steps.len()).max(1);
        let bounds: Vec<(usize, usize)> = (0..k)
            .map(|c| (c * steps.len() / k, (c + 1) * steps.len() / k))
            .collect();
        let shards = par::map_range(k, |c| {
            let (a, b) = bounds[c];
            self.chunk_grad(&steps[a..b], n, counts, cfg, beta)
        });
        let mut g = vec![0f32; self.net.n_params];
        let mut parts = LossParts::default();
        for (sg, sp) in &shards {
            for (a, b) in g.iter_mut().zip(sg) {
                *a += b;
            }
            parts.add(sp);
        }
        (g, parts)
    }

    /// Runs the SGD passes over a post-processed batch.
    pub fn train_epoch(&mut self, batch: &Batch, cfg: &TrainConfig, iteration: usize) -> Result<EpochStats, TrainError> {
        let steps: Vec<&Transition> = batch.transitions().collect();
        let n = batch.n_agents;
        let lr = cfg.lr_at(self.env_steps as f64);
        let mut order: Vec<usize> = (0..steps.len()).collect();
        let mut sum = LossParts::default();
        let mut updates = 0usize;
        let mut grad_norm_sum = 0.0;
        let mut last_kl = 0.0;
        for pass in 0..cfg.sgd_iters {
            order.shuffle(&mut self.rng);
            let mut pass_kl = 0.0;
            let mut pass_mb = 0;
            for (mb, idx) in order.chunks(cfg.minibatch.max(1)).enumerate() {
                let chosen: Vec<&Transition> = idx.iter().map(|&i| steps[i]).collect();
                let (mut g, parts) = self.minibatch_grad(&chosen, n, cfg, self.beta);
                if let Some(component) = parts.first_non_finite().or((!parts.total.is_finite()).then_some("total")) {
                    return Err(TrainError::NonFiniteLoss {
                        component,
                        iteration,
                        pass,
                        minibatch: mb,
                    });
                }
                let norm = g.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt();
                if !norm.is_finite() {
                    return Err(TrainError::NonFiniteLoss {
                        component: "gradient",
                        iteration,
                        pass,
                        minibatch: mb,
                    });
                }
                if norm > cfg.grad_clip && norm > 0.0 {
                    let s = (cfg.grad_clip / norm) as f32;
                    g.iter_mut().for_each(|x| *x *= s);
                }
                self.adam.step(&mut self.params, &g, lr);
                sum.add(&parts);
                grad_norm_sum += norm;
                updates += 1;
                pass_kl += parts.kl;
                pass_mb += 1;
            }
            last_kl = pass_kl / pass_mb.max(1) as f64;
        }
        self.beta = adapt_kl(self.beta, last_kl, cfg.kl_target);
        let u = updates.max(1) as f64;
        Ok(EpochStats {
            losses: sum.scaled(1.0 / u),
            kl: last_kl,
            beta: self.beta,
            lr,
            grad_norm: grad_norm_sum / u,
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::crowdworld::{translation_levels, Level};

    #[test]
    fn kl_rule() {
        assert_eq!(adapt_kl(0.2, 0.03, 0.01), 0.4);
        assert_eq!(adapt_kl(0.2, 0.001, 0.01), 0.1);
        assert_eq!(adapt_kl(0.2, 0.01, 0.01), 0.2);
    }

    #[test]
    fn fresh_policy_surrogate_is_advantage() {
        let d = ActionDistribution::from_logits(&[0.3, -0.1, 0.2, 0.0, 0.5, -0.5, 1.0, 0.0, 0.0]);
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let mut total = 0.0;
        let advs = [0.5, -1.2, 2.0, 0.1];
        for &a in &advs {
            let act = d.sample(&mut rng);
            let t = ppo_terms(&d, &d, &act, d.log_prob(&act), a, 0.3);
            assert!((t.ratio - 1.0).abs() < 1e-12);
            assert_eq!(t.kl, 0.0);
            total += t.surrogate;
        }
        assert!((total / 4.0 - advs.iter().sum::<f64>() / 4.0).abs() < 1e-12);
    }

    #[test]
    fn zero_learning_rate_is_noop() {
        let mut adam = Adam::new(3, 1e-8);
        let mut p = vec![0.1f32, -0.2, 0.3];
        let before = p.clone();
        adam.step(&mut p, &[1.0, -4.0, 0.5], 0.0);
        assert_eq!(p, before);
    }

    #[test]
    fn bandit_converges() {
        // Reward depends on the first translation factor only.
        let reward = |a: &AgentAction| match a.translation[0] {
            Level::Pos => 0.2,
            Level::Zero => 1.0,
            Level::Neg => 0.5,
        };
        let mut logits = vec![0.0f64; 9];
        let mut adam = Adam::new(9, 1e-8);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut reached = None;
        for it in 0..200 {
            let old = ActionDistribution::from_logits(&logits);
            let samples: Vec<(AgentAction, f64)> = (0..64)
                .map(|_| {
                    let a = old.sample(&mut rng);
                    (a, reward(&a))
                })
                .collect();
            let mean = samples.iter().map(|s| s.1).sum::<f64>() / 64.0;
            for _ in 0..4 {
                let new = ActionDistribution::from_logits(&logits);
                let mut g = vec![0f32; 9];
                for (a, r) in &samples {
                    let t = ppo_terms(&new, &old, a, old.log_prob(a), r - mean, 0.3);
                    for (gi, s) in g.iter_mut().zip(&t.surrogate_grad) {
                        *gi -= (*s / 64.0) as f32;
                    }
                }
                let mut p: Vec<f32> = logits.iter().map(|&x| x as f32).collect();
                adam.step(&mut p, &g, 0.05);
                logits = p.iter().map(|&x| f64::from(x)).collect();
            }
            let d = ActionDistribution::from_logits(&logits);
            let p_best: f64 = (0..27)
                .filter(|&j| translation_levels(j)[0] == Level::Zero)
                .map(|j| d.translation_joint()[j])
                .sum();
            if p_best > 0.9 {
                reached = Some(it);
                break;
            }
        }
        assert!(reached.is_some(), "argmax probability never exceeded 0.9");
    }
}

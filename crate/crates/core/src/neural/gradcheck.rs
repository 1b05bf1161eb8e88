//! Finite-difference check of the hand-written network adjoints.

use super::mdn::nll_and_grad;
use super::{Architecture, Graph, GraphInputs, HeadSwitches, ModelConfig, Network, OutputGrads};
use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Five action factors, default model, reference observation layout.
pub fn reference_architecture() -> Architecture {
    Architecture {
        model: ModelConfig::default(),
        obs_dim: 5 * 9 + 7 * 18,
        action_factors: 5,
        max_cameras: 5,
    }
}

fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng, scale: f64) -> Array2<f64> {
    Array2::from_shape_fn((rows, cols), |_| rng.random_range(-scale..scale))
}

/// Inputs and a scalar loss touching every output of the training graph.
pub struct Probe {
    pub inputs: GraphInputs<f64>,
    w_logits: Array2<f64>,
    w_values: Array2<f64>,
    y2: Array2<f64>,
    y1: Array2<f64>,
    y_peer: Array2<f64>,
    y_pd: Array2<f64>,
}

impl Probe {
    pub fn new(net: &Network, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = 3;
        let b = 2 * n;
        let f = net.arch.action_factors;
        let mut onehot = Array2::zeros((b, 3 * f));
        for r in 0..b {
            for k in 0..f {
                onehot[(r, 3 * k + rng.random_range(0..3))] = 1.0;
            }
        }
        let inputs = GraphInputs {
            obs: random(b, net.arch.obs_dim, &mut rng, 1.0),
            h_prev: random(b, 128, &mut rng, 0.8),
            p_tgt: random(b, 4, &mut rng, 1.0),
            action_onehot: onehot,
            n_agents: n,
            peer_cond: random(b * (n - 1), 4, &mut rng, 1.0),
            pd_owner: vec![0, 2, 2, 5],
            pd_cond: random(4, 4, &mut rng, 1.0),
        };
        Self {
            inputs,
            w_logits: random(b, 3 * f, &mut rng, 1.0),
            w_values: random(2, 1, &mut rng, 1.0),
            y2: random(b, 2, &mut rng, 0.5),
            y1: random(b, 1, &mut rng, 0.5),
            y_peer: random(b * (n - 1), 2, &mut rng, 0.5),
            y_pd: random(4, 2, &mut rng, 0.5),
        }
    }

    pub fn loss_grads(&self, net: &Network, p: &[f64]) -> (f64, OutputGrads<f64>, Graph<f64>) {
        let graph = net.forward_graph(p, &self.inputs, HeadSwitches::ALL, false).unwrap();
        let o = &graph.outputs;
        let mut loss = (&o.logits * &self.w_logits).sum() + (&o.values * &self.w_values).sum();
        let mut mdn_term = |raw: &Array2<f64>, y: &Array2<f64>, spec| {
            let mut d = Array2::zeros(raw.raw_dim());
            loss += nll_and_grad(spec, raw.view(), y.view(), 1.0, &mut d);
            d
        };
        let d_target = mdn_term(&o.target_raw, &self.y2, net.mix2());
        let d_self = mdn_term(o.self_raw.as_ref().unwrap(), &self.y2, net.mix2());
        let d_reward = mdn_term(o.reward_raw.as_ref().unwrap(), &self.y1, net.mix1());
        let d_peer = mdn_term(o.peer_raw.as_ref().unwrap(), &self.y_peer, net.mix2());
        let d_pd = mdn_term(o.pd_raw.as_ref().unwrap(), &self.y_pd, net.mix2());
        let grads = OutputGrads {
            logits: Some(self.w_logits.clone()),
            values: Some(self.w_values.clone()),
            target_raw: Some(d_target),
            self_raw: Some(d_self),
            reward_raw: Some(d_reward),
            peer_raw: Some(d_peer),
            pd_raw: Some(d_pd),
        };
        (loss, grads, graph)
    }
}

/// Largest relative error between analytic and central-difference gradients
/// over `samples` parameters, at least one per tensor.
pub fn max_gradient_error(samples: usize, seed: u64) -> f64 {
    let net = Network::new(reference_architecture());
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut p: Vec<f64> = net.init_params(seed);
    // Give the small-gain output layers and zero biases non-trivial values.
    for v in p.iter_mut() {
        *v += rng.random_range(-0.05..0.05);
    }
    let probe = Probe::new(&net, seed + 1);
    let (_, grads, graph) = probe.loss_grads(&net, &p);
    let mut g = vec![0.0; net.n_params];
    net.backward_graph(&p, &graph, &grads, &mut g);

    let mut idx: Vec<usize> = net
        .specs
        .iter()
        .map(|s| s.offset + rng.random_range(0..s.len()))
        .collect();
    while idx.len() < samples {
        idx.push(rng.random_range(0..net.n_params));
    }
    let h = 1e-4;
    let mut worst: f64 = 0.0;
    for &i in &idx {
        let mut q = p.clone();
        q[i] += h;
        let up = probe.loss_grads(&net, &q).0;
        q[i] -= 2.0 * h;
        let dn = probe.loss_grads(&net, &q).0;
        let num = (up - dn) / (2.0 * h);
        let rel = (num - g[i]).abs() / num.abs().max(g[i].abs()).max(1e-6);
        worst = worst.max(rel);
    }
    worst
}


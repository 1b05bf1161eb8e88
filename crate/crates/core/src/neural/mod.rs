//! Policy network: observation encoder, recurrent cell, mixture-density world
//! model heads, factored actor and centralised critic, with explicit adjoints.

pub mod checkpoint;
pub mod dist;
pub mod gradcheck;
pub mod layers;
pub mod mdn;

use layers::{Activation, Gru, GruTape, Mlp, MlpTape};
use mdn::MixtureSpec;
use ndarray::{concatenate, s, Array2, ArrayView2, Axis, NdFloat};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub use dist::ActionDistribution;
pub use mdn::MixtureDensityOutput;

/// Float type the network can run in.
pub trait Real: NdFloat + Default {
    fn c(x: f64) -> Self;
    fn f64(self) -> f64;
}

impl Real for f32 {
    fn c(x: f64) -> Self {
        x as f32
    }
    fn f64(self) -> f64 {
        self as f64
    }
}

impl Real for f64 {
    fn c(x: f64) -> Self {
        x
    }
    fn f64(self) -> f64 {
        self
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum NeuralError {
    #[error("shape mismatch for {what}: expected {expected}, got {got}")]
    ShapeMismatch {
        what: &'static str,
        expected: usize,
        got: usize,
    },
}

/// Layer sizes; the input/output widths come from the task.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelConfig {
    pub encoder_hidden: Vec<usize>,
    pub recurrent_size: usize,
    pub mdn_hidden: Vec<usize>,
    pub mixture_components: usize,
    pub projector_hidden: Vec<usize>,
    pub actor_hidden: Vec<usize>,
    pub critic_hidden: Vec<usize>,
}

impl Default for ModelConfig {
    fn default() -> Self {
        Self {
            encoder_hidden: vec![128, 128, 128],
            recurrent_size: 128,
            mdn_hidden: vec![128, 128],
            mixture_components: 16,
            projector_hidden: vec![128, 128],
            actor_hidden: vec![128],
            critic_hidden: vec![128],
        }
    }
}

/// Everything that determines the parameter layout.
#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Architecture {
    pub model: ModelConfig,
    pub obs_dim: usize,
    /// 3 (translation only) or 5 (translation and rotation).
    pub action_factors: usize,
    /// Agents concatenated into the critic input.
    pub max_cameras: usize,
}

impl Architecture {
    /// First 8 bytes of the SHA-256 of the canonical JSON encoding.
    pub fn hash(&self) -> u64 {
        let json = serde_json::to_vec(self).expect("serialisable");
        let digest = Sha256::digest(&json);
        u64::from_le_bytes(digest[..8].try_into().unwrap())
    }
}

/// Width of per-entity conditioning vectors (x/10, y/10, sin yaw, cos yaw).
pub const STATE_DIM: usize = 4;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TensorSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Network {
    pub arch: Architecture,
    pub encoder: Mlp,
    pub gru: Gru,
    pub target_mdn: Mlp,
    pub projector: Mlp,
    pub actor: Mlp,
    pub critic: Mlp,
    pub self_head: Mlp,
    pub reward_head: Mlp,
    pub peer_head: Mlp,
    pub pd_head: Mlp,
    pub specs: Vec<TensorSpec>,
    pub n_params: usize,
}

fn sizes(first: usize, hidden: &[usize], last: usize) -> Vec<usize> {
    let mut v = vec![first];
    v.extend_from_slice(hidden);
    v.push(last);
    v
}

impl Network {
    pub fn new(arch: Architecture) -> Self {
        let m = &arch.model;
        let z = *m.encoder_hidden.last().expect("encoder needs a layer");
        let h = m.recurrent_size;
        let a = 3 * arch.action_factors;
        let mix2 = MixtureSpec {
            components: m.mixture_components,
            dim: 2,
        }
        .raw_len();
        let mix1 = MixtureSpec {
            components: m.mixture_components,
            dim: 1,
        }
        .raw_len();
        let proj = *m.projector_hidden.last().expect("projector needs a layer");

        let mut off = 0;
        let encoder = Mlp::build(
            &sizes(arch.obs_dim, &m.encoder_hidden[..m.encoder_hidden.len() - 1], z),
            Activation::Tanh,
            &mut off,
        );
        let gru = Gru::build(z, h, &mut off);
        let target_mdn = Mlp::build(&sizes(z + h + STATE_DIM, &m.mdn_hidden, mix2), Activation::Linear, &mut off);
        let projector = Mlp::build(
            &sizes(mix2, &m.projector_hidden[..m.projector_hidden.len() - 1], proj),
            Activation::Tanh,
            &mut off,
        );
        let actor = Mlp::build(&sizes(z + h + proj, &m.actor_hidden, a), Activation::Linear, &mut off);
        let critic = Mlp::build(&sizes(arch.max_cameras * z, &m.critic_hidden, 1), Activation::Linear, &mut off);
        let self_head = Mlp::build(&sizes(z + h + a, &m.mdn_hidden, mix2), Activation::Linear, &mut off);
        let reward_head = Mlp::build(&sizes(z + h + a, &m.mdn_hidden, mix1), Activation::Linear, &mut off);
        let peer_head = Mlp::build(
            &sizes(z + h + a + STATE_DIM, &m.mdn_hidden, mix2),
            Activation::Linear,
            &mut off,
        );
        let pd_head = Mlp::build(&sizes(z + h + STATE_DIM, &m.mdn_hidden, mix2), Activation::Linear, &mut off);

        let mut specs = Vec::new();
        let named: [(&str, &Mlp); 9] = [
            ("encoder", &encoder),
            ("target_mdn", &target_mdn),
            ("projector", &projector),
            ("actor", &actor),
            ("critic", &critic),
            ("self_head", &self_head),
            ("reward_head", &reward_head),
            ("peer_head", &peer_head),
            ("pd_head", &pd_head),
        ];
        let mut push_dense = |name: String, d: &layers::Dense| {
            specs.push(TensorSpec {
                name: format!("{name}.weight"),
                shape: vec![d.inp, d.out],
                offset: d.offset,
            });
            specs.push(TensorSpec {
                name: format!("{name}.bias"),
                shape: vec![d.out],
                offset: d.offset + d.inp * d.out,
            });
        };
        push_dense("gru.input".into(), &gru.input);
        push_dense("gru.hidden".into(), &gru.hidden);
        for (name, mlp) in named {
            for (i, d) in mlp.layers.iter().enumerate() {
                push_dense(format!("{name}.{i}"), d);
            }
        }
        specs.sort_by_key(|s| s.offset);

        Self {
            arch,
            encoder,
            gru,
            target_mdn,
            projector,
            actor,
            critic,
            self_head,
            reward_head,
            peer_head,
            pd_head,
            specs,
            n_params: off,
        }
    }

    pub fn z_dim(&self) -> usize {
        self.encoder.out()
    }

    pub fn hidden_dim(&self) -> usize {
        self.gru.size()
    }

    pub fn logits_dim(&self) -> usize {
        3 * self.arch.action_factors
    }

    pub fn mix2(&self) -> MixtureSpec {
        MixtureSpec {
            components: self.arch.model.mixture_components,
            dim: 2,
        }
    }

    pub fn mix1(&self) -> MixtureSpec {
        MixtureSpec {
            components: self.arch.model.mixture_components,
            dim: 1,
        }
    }

    /// Glorot-uniform weights, zero biases, and a small actor/critic output
    /// layer so the initial policy is close to uniform.
    pub fn init_params<T: Real>(&self, seed: u64) -> Vec<T> {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut p = vec![T::zero(); self.n_params];
        let mut fill = |d: &layers::Dense, gain: f64, rng: &mut ChaCha8Rng| {
            let bound = gain * (6.0 / (d.inp + d.out) as f64).sqrt();
            for v in &mut p[d.offset..d.offset + d.inp * d.out] {
                *v = T::c(rng.random_range(-bound..bound));
            }
        };
        for mlp in [&self.encoder, &self.target_mdn, &self.projector, &self.self_head, &self.reward_head, &self.peer_head, &self.pd_head] {
            for d in &mlp.layers {
                fill(d, 1.0, &mut rng);
            }
        }
        for mlp in [&self.actor, &self.critic] {
            let last = mlp.layers.len() - 1;
            for (i, d) in mlp.layers.iter().enumerate() {
                fill(d, if i == last { 0.01 } else { 1.0 }, &mut rng);
            }
        }
        fill(&self.gru.input, 1.0, &mut rng);
        fill(&self.gru.hidden, 1.0, &mut rng);
        p
    }

    fn check(&self, what: &'static str, expected: usize, got: usize) -> Result<(), NeuralError> {
        if expected == got {
            Ok(())
        } else {
            Err(NeuralError::ShapeMismatch { what, expected, got })
        }
    }

    /// Acting pass for a batch of agents.
    pub fn step<T: Real>(
        &self,
        p: &[T],
        obs: Array2<T>,
        hidden: Array2<T>,
        p_tgt: Array2<T>,
    ) -> Result<StepOutput<T>, NeuralError> {
        self.check("observation", self.arch.obs_dim, obs.ncols())?;
        self.check("hidden state", self.hidden_dim(), hidden.ncols())?;
        self.check("target state", STATE_DIM, p_tgt.ncols())?;
        let z = self.encoder.eval(p, obs);
        let h = self.gru.forward(p, z.clone(), hidden).h_next;
        let tin = concatenate![Axis(1), z, h, p_tgt];
        let target_raw = self.target_mdn.eval(p, tin);
        let proc_ = mdn::processed(self.mix2(), target_raw.view());
        let f = self.projector.eval(p, proc_);
        let logits = self.actor.eval(p, concatenate![Axis(1), z, h, f]);
        Ok(StepOutput {
            z,
            h,
            target_raw,
            logits,
        })
    }

    /// Critic rows: consecutive groups of `n_agents` encoder rows, zero padded.
    pub fn critic_input<T: Real>(&self, z: ArrayView2<T>, n_agents: usize) -> Array2<T> {
        let zd = self.z_dim();
        let steps = z.nrows() / n_agents;
        let mut out = Array2::zeros((steps, self.arch.max_cameras * zd));
        for s in 0..steps {
            for a in 0..n_agents.min(self.arch.max_cameras) {
                out.slice_mut(s![s, a * zd..(a + 1) * zd])
                    .assign(&z.row(s * n_agents + a));
            }
        }
        out
    }

    pub fn value<T: Real>(&self, p: &[T], critic_in: Array2<T>) -> Vec<T> {
        self.critic.eval(p, critic_in).column(0).to_vec()
    }
}

/// Result of one acting pass.
#[derive(Debug, Clone)]
pub struct StepOutput<T> {
    pub z: Array2<T>,
    pub h: Array2<T>,
    pub target_raw: Array2<T>,
    pub logits: Array2<T>,
}

/// Inputs of the training graph. Rows are grouped by environment step:
/// rows `s * n_agents .. (s + 1) * n_agents` belong to step `s`.
#[derive(Debug, Clone)]
pub struct GraphInputs<T> {
    pub obs: Array2<T>,
    pub h_prev: Array2<T>,
    pub p_tgt: Array2<T>,
    pub action_onehot: Array2<T>,
    pub n_agents: usize,
    /// One row per (agent, peer) pair, `n_agents - 1` per agent row.
    pub peer_cond: Array2<T>,
    /// Owning agent row of each pedestrian row.
    pub pd_owner: Vec<usize>,
    pub pd_cond: Array2<T>,
}

/// Which auxiliary heads to evaluate.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct HeadSwitches {
    pub self_state: bool,
    pub reward: bool,
    pub peer: bool,
    pub pedestrian: bool,
}

impl HeadSwitches {
    pub const NONE: HeadSwitches = HeadSwitches {
        self_state: false,
        reward: false,
        peer: false,
        pedestrian: false,
    };
    pub const ALL: HeadSwitches = HeadSwitches {
        self_state: true,
        reward: true,
        peer: true,
        pedestrian: true,
    };
}

/// Raw outputs of the training graph.
#[derive(Debug, Clone)]
pub struct GraphOutputs<T> {
    pub logits: Array2<T>,
    /// One value per environment step.
    pub values: Array2<T>,
    pub target_raw: Array2<T>,
    pub self_raw: Option<Array2<T>>,
    pub reward_raw: Option<Array2<T>>,
    pub peer_raw: Option<Array2<T>>,
    pub pd_raw: Option<Array2<T>>,
}

/// Loss gradients with respect to `GraphOutputs`; `None` means zero.
#[derive(Debug, Clone, Default)]
pub struct OutputGrads<T> {
    pub logits: Option<Array2<T>>,
    pub values: Option<Array2<T>>,
    pub target_raw: Option<Array2<T>>,
    pub self_raw: Option<Array2<T>>,
    pub reward_raw: Option<Array2<T>>,
    pub peer_raw: Option<Array2<T>>,
    pub pd_raw: Option<Array2<T>>,
}

/// Recorded forward pass.
pub struct Graph<T> {
    pub outputs: GraphOutputs<T>,
    n_agents: usize,
    pd_owner: Vec<usize>,
    critic_detached: bool,
    enc: MlpTape<T>,
    gru: GruTape<T>,
    tgt: MlpTape<T>,
    proj: MlpTape<T>,
    actor: MlpTape<T>,
    critic: MlpTape<T>,
    self_h: Option<MlpTape<T>>,
    reward_h: Option<MlpTape<T>>,
    peer_h: Option<MlpTape<T>>,
    pd_h: Option<MlpTape<T>>,
}

impl Network {
    /// Full forward with recording. With `detach_critic` the value loss does
    /// not reach the encoder.
    pub fn forward_graph<T: Real>(
        &self,
        p: &[T],
        inp: &GraphInputs<T>,
        heads: HeadSwitches,
        detach_critic: bool,
    ) -> Result<Graph<T>, NeuralError> {
        let b = inp.obs.nrows();
        self.check("observation", self.arch.obs_dim, inp.obs.ncols())?;
        self.check("hidden rows", b, inp.h_prev.nrows())?;
        self.check("action one-hot", self.logits_dim(), inp.action_onehot.ncols())?;
        self.check("agent grouping", 0, b % inp.n_agents.max(1))?;
        let enc = self.encoder.forward(p, inp.obs.clone());
        let z = enc.output().clone();
        let gru = self.gru.forward(p, z.clone(), inp.h_prev.clone());
        let h = gru.h_next.clone();

        let tgt = self
            .target_mdn
            .forward(p, concatenate![Axis(1), z, h, inp.p_tgt]);
        let target_raw = tgt.output().clone();
        let proj = self
            .projector
            .forward(p, mdn::processed(self.mix2(), target_raw.view()));
        let actor = self
            .actor
            .forward(p, concatenate![Axis(1), z, h, *proj.output()]);
        let critic = self
            .critic
            .forward(p, self.critic_input(z.view(), inp.n_agents));

        let zh_a = (heads.self_state || heads.reward).then(|| concatenate![Axis(1), z, h, inp.action_onehot]);
        let self_h = heads
            .self_state
            .then(|| self.self_head.forward(p, zh_a.clone().unwrap()));
        let reward_h = heads
            .reward
            .then(|| self.reward_head.forward(p, zh_a.clone().unwrap()));
        let peers = inp.n_agents.saturating_sub(1);
        let peer_h = (heads.peer && peers > 0).then(|| {
            let rows: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat_n(r, peers)).collect();
            let base = concatenate![Axis(1), z, h, inp.action_onehot];
            let x = concatenate![Axis(1), base.select(Axis(0), &rows), inp.peer_cond];
            self.peer_head.forward(p, x)
        });
        let pd_h = (heads.pedestrian && !inp.pd_owner.is_empty()).then(|| {
            let base = concatenate![Axis(1), z, h];
            let x = concatenate![Axis(1), base.select(Axis(0), &inp.pd_owner), inp.pd_cond];
            self.pd_head.forward(p, x)
        });

        let outputs = GraphOutputs {
            logits: actor.output().clone(),
            values: critic.output().clone(),
            target_raw,
            self_raw: self_h.as_ref().map(|t| t.output().clone()),
            reward_raw: reward_h.as_ref().map(|t| t.output().clone()),
            peer_raw: peer_h.as_ref().map(|t| t.output().clone()),
            pd_raw: pd_h.as_ref().map(|t| t.output().clone()),
        };
        Ok(Graph {
            outputs,
            n_agents: inp.n_agents,
            pd_owner: inp.pd_owner.clone(),
            critic_detached: detach_critic,
            enc,
            gru,
            tgt,
            proj,
            actor,
            critic,
            self_h,
            reward_h,
            peer_h,
            pd_h,
        })
    }

    /// Accumulates parameter gradients of a loss with output gradients `d`.
    pub fn backward_graph<T: Real>(&self, p: &[T], graph: &Graph<T>, d: &OutputGrads<T>, g: &mut [T]) {
        let b = graph.outputs.logits.nrows();
        let zd = self.z_dim();
        let hd = self.hidden_dim();
        let mut dz = Array2::<T>::zeros((b, zd));
        let mut dh = Array2::<T>::zeros((b, hd));
        let add_zh = |dz: &mut Array2<T>, dh: &mut Array2<T>, dx: &Array2<T>, rows: Option<&[usize]>| {
            match rows {
                None => {
                    *dz += &dx.slice(s![.., ..zd]);
                    *dh += &dx.slice(s![.., zd..zd + hd]);
                }
                Some(rows) => {
                    for (i, &r) in rows.iter().enumerate() {
                        let mut zr = dz.row_mut(r);
                        zr += &dx.slice(s![i, ..zd]);
                        let mut hr = dh.row_mut(r);
                        hr += &dx.slice(s![i, zd..zd + hd]);
                    }
                }
            }
        };

        let mut dtarget = d
            .target_raw
            .clone()
            .unwrap_or_else(|| Array2::zeros(graph.outputs.target_raw.raw_dim()));
        if let Some(dl) = &d.logits {
            let de = self.actor.backward(p, g, &graph.actor, dl.clone(), true).unwrap();
            add_zh(&mut dz, &mut dh, &de, None);
            let dproj = de.slice(s![.., zd + hd..]).to_owned();
            let dproc = self.projector.backward(p, g, &graph.proj, dproj, true).unwrap();
            dtarget += &mdn::processed_backward(self.mix2(), graph.outputs.target_raw.view(), dproc.view());
        }
        let dtin = self.target_mdn.backward(p, g, &graph.tgt, dtarget, true).unwrap();
        add_zh(&mut dz, &mut dh, &dtin, None);

        for (head, tape, grad) in [
            (&self.self_head, &graph.self_h, &d.self_raw),
            (&self.reward_head, &graph.reward_h, &d.reward_raw),
        ] {
            if let (Some(tape), Some(grad)) = (tape, grad) {
                let dx = head.backward(p, g, tape, grad.clone(), true).unwrap();
                add_zh(&mut dz, &mut dh, &dx, None);
            }
        }
        if let (Some(tape), Some(grad)) = (&graph.peer_h, &d.peer_raw) {
            let peers = graph.n_agents - 1;
            let rows: Vec<usize> = (0..b).flat_map(|r| std::iter::repeat_n(r, peers)).collect();
            let dx = self.peer_head.backward(p, g, tape, grad.clone(), true).unwrap();
            add_zh(&mut dz, &mut dh, &dx, Some(&rows));
        }
        if let (Some(tape), Some(grad)) = (&graph.pd_h, &d.pd_raw) {
            let dx = self.pd_head.backward(p, g, tape, grad.clone(), true).unwrap();
            add_zh(&mut dz, &mut dh, &dx, Some(&graph.pd_owner));
        }
        if let Some(dv) = &d.values {
            let dcin = self
                .critic
                .backward(p, g, &graph.critic, dv.clone(), !graph.critic_detached);
            if let Some(dcin) = dcin {
                let n = graph.n_agents;
                for r in 0..b {
                    let (step, a) = (r / n, r % n);
                    if a < self.arch.max_cameras {
                        let mut zr = dz.row_mut(r);
                        zr += &dcin.slice(s![step, a * zd..(a + 1) * zd]);
                    }
                }
            }
        }
        let (dx, _) = self.gru.backward(p, g, &graph.gru, dh.view(), true);
        dz += &dx.unwrap();
        self.encoder.backward(p, g, &graph.enc, dz, false);
    }
}

/// One-hot encoding of factor levels, `3 * factors` wide.
pub fn action_one_hot<T: Real>(levels: &[usize], factors: usize) -> Vec<T> {
    let mut v = vec![T::zero(); 3 * factors];
    for (k, &l) in levels.iter().take(factors).enumerate() {
        v[3 * k + l] = T::one();
    }
    v
}

/// Converts between float widths.
pub fn cast_params<A: Real, B: Real>(p: &[A]) -> Vec<B> {
    p.iter().map(|&x| B::c(x.f64())).collect()
}

/// Builds an `Array2` from row slices.
pub fn rows_to_array<T: Real>(rows: &[Vec<T>], width: usize) -> Array2<T> {
    let mut a = Array2::zeros((rows.len(), width));
    for (mut dst, src) in a.rows_mut().into_iter().zip(rows) {
        dst.assign(&ArrayView2::from_shape((1, width), src).unwrap().row(0));
    }
    a
}

#[cfg(test)]
mod tests;

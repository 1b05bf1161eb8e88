//! Factored categorical policy over the 3-level action grid.
//!
//! The three translation factors are combined into a joint distribution over
//! the 27 translation combinations so that a safety mask can remove individual
//! combinations; rotation factors stay independent.

use crate::crowdworld::{translation_levels, AgentAction, Level, TRANSLATION_COMBOS};
use rand::Rng;

fn softmax3(l: &[f64]) -> [f64; 3] {
    let m = l[0].max(l[1]).max(l[2]);
    let e = [(l[0] - m).exp(), (l[1] - m).exp(), (l[2] - m).exp()];
    let s = e[0] + e[1] + e[2];
    [e[0] / s, e[1] / s, e[2] / s]
}

fn digits(j: usize) -> [usize; 3] {
    translation_levels(j).map(Level::index)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ActionDistribution {
    /// Per-factor probabilities in level order `[+1, 0, -1]`.
    pub factors: Vec<[f64; 3]>,
    pub mask: [bool; TRANSLATION_COMBOS],
    joint: [f64; TRANSLATION_COMBOS],
}

impl ActionDistribution {
    /// `logits` holds three entries per factor (3 or 5 factors).
    pub fn from_logits(logits: &[f64]) -> Self {
        assert!(logits.len() == 9 || logits.len() == 15, "expected 3 or 5 factors");
        let factors: Vec<[f64; 3]> = logits.chunks(3).map(softmax3).collect();
        let mut d = Self {
            factors,
            mask: [true; TRANSLATION_COMBOS],
            joint: [0.0; TRANSLATION_COMBOS],
        };
        d.rebuild_joint();
        d
    }

    fn rebuild_joint(&mut self) {
        let mut z = 0.0;
        for j in 0..TRANSLATION_COMBOS {
            let [a, b, c] = digits(j);
            let q = if self.mask[j] {
                self.factors[0][a] * self.factors[1][b] * self.factors[2][c]
            } else {
                0.0
            };
            self.joint[j] = q;
            z += q;
        }
        for q in &mut self.joint {
            *q /= z;
        }
    }

    /// Restricts translation to the allowed combinations; `None` if none remain.
    pub fn masked(mut self, mask: [bool; TRANSLATION_COMBOS]) -> Option<Self> {
        if !mask.iter().any(|&m| m) {
            return None;
        }
        self.mask = mask;
        self.rebuild_joint();
        Some(self)
    }

    pub fn n_factors(&self) -> usize {
        self.factors.len()
    }

    pub fn translation_joint(&self) -> &[f64; TRANSLATION_COMBOS] {
        &self.joint
    }

    /// Marginals of the (masked) joint for each translation factor.
    pub fn translation_marginals(&self) -> [[f64; 3]; 3] {
        let mut m = [[0.0; 3]; 3];
        for (j, &q) in self.joint.iter().enumerate() {
            for (k, &d) in digits(j).iter().enumerate() {
                m[k][d] += q;
            }
        }
        m
    }

    fn rotation(&self) -> &[[f64; 3]] {
        &self.factors[3..]
    }

    pub fn log_prob(&self, a: &AgentAction) -> f64 {
        let mut lp = self.joint[a.translation_index()].ln();
        for (f, l) in self.rotation().iter().zip(&a.rotation) {
            lp += f[l.index()].ln();
        }
        lp
    }

    fn pick(probs: &[f64], u: f64) -> usize {
        let mut acc = 0.0;
        let mut last = 0;
        for (i, &p) in probs.iter().enumerate() {
            if p <= 0.0 {
                continue;
            }
            acc += p;
            last = i;
            if u < acc {
                return i;
            }
        }
        last
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> AgentAction {
        let j = Self::pick(&self.joint, rng.random::<f64>());
        let mut a = AgentAction {
            translation: translation_levels(j),
            ..AgentAction::IDLE
        };
        for (k, f) in self.rotation().iter().enumerate() {
            a.rotation[k] = Level::from_index(Self::pick(f, rng.random::<f64>()));
        }
        a
    }

    /// Most likely translation combination and rotation levels.
    pub fn mode(&self) -> AgentAction {
        let argmax = |p: &[f64]| {
            p.iter()
                .enumerate()
                .fold((0, f64::NEG_INFINITY), |b, (i, &v)| if v > b.1 { (i, v) } else { b })
                .0
        };
        let mut a = AgentAction {
            translation: translation_levels(argmax(&self.joint)),
            ..AgentAction::IDLE
        };
        for (k, f) in self.rotation().iter().enumerate() {
            a.rotation[k] = Level::from_index(argmax(f));
        }
        a
    }

    fn plogp(p: f64) -> f64 {
        if p > 0.0 {
            p * p.ln()
        } else {
            0.0
        }
    }

    pub fn entropy(&self) -> f64 {
        let mut h = -self.joint.iter().map(|&q| Self::plogp(q)).sum::<f64>();
        for f in self.rotation() {
            h -= f.iter().map(|&p| Self::plogp(p)).sum::<f64>();
        }
        h
    }

    /// KL(self || other); both must share the same mask.
    pub fn kl(&self, other: &Self) -> f64 {
        let mut kl = 0.0;
        for (&p, &q) in self.joint.iter().zip(&other.joint) {
            if p > 0.0 {
                kl += p * (p.ln() - q.ln());
            }
        }
        for (fp, fq) in self.rotation().iter().zip(other.rotation()) {
            for (&p, &q) in fp.iter().zip(fq) {
                if p > 0.0 {
                    kl += p * (p.ln() - q.ln());
                }
            }
        }
        kl
    }

    fn one_hot_minus(&self, translation: [usize; 3], rotation: &[usize], marg: &[[f64; 3]; 3]) -> Vec<f64> {
        let mut g = vec![0.0; 3 * self.n_factors()];
        for k in 0..3 {
            for c in 0..3 {
                g[3 * k + c] = if translation[k] == c { 1.0 } else { 0.0 } - marg[k][c];
            }
        }
        for (r, f) in self.rotation().iter().enumerate() {
            for c in 0..3 {
                g[9 + 3 * r + c] = if rotation[r] == c { 1.0 } else { 0.0 } - f[c];
            }
        }
        g
    }

    /// d log p(a) / d logits.
    pub fn log_prob_grad(&self, a: &AgentAction) -> Vec<f64> {
        let rot: Vec<usize> = a.rotation.iter().map(|l| l.index()).collect();
        self.one_hot_minus(
            a.translation.map(Level::index),
            &rot,
            &self.translation_marginals(),
        )
    }

    /// d KL(old || self) / d logits of `self`.
    pub fn kl_grad(&self, old: &Self) -> Vec<f64> {
        let mut g = vec![0.0; 3 * self.n_factors()];
        let mn = self.translation_marginals();
        let mo = old.translation_marginals();
        for k in 0..3 {
            for c in 0..3 {
                g[3 * k + c] = mn[k][c] - mo[k][c];
            }
        }
        for (r, (fn_, fo)) in self.rotation().iter().zip(old.rotation()).enumerate() {
            for c in 0..3 {
                g[9 + 3 * r + c] = fn_[c] - fo[c];
            }
        }
        g
    }

    /// d entropy / d logits.
    pub fn entropy_grad(&self) -> Vec<f64> {
        let mut g = vec![0.0; 3 * self.n_factors()];
        let marg = self.translation_marginals();
        let total: f64 = self.joint.iter().map(|&q| Self::plogp(q)).sum();
        let mut partial = [[0.0; 3]; 3];
        for (j, &q) in self.joint.iter().enumerate() {
            for (k, &d) in digits(j).iter().enumerate() {
                partial[k][d] += Self::plogp(q);
            }
        }
        for k in 0..3 {
            for c in 0..3 {
                g[3 * k + c] = -(partial[k][c] - marg[k][c] * total);
            }
        }
        for (r, f) in self.rotation().iter().enumerate() {
            let h: f64 = -f.iter().map(|&p| Self::plogp(p)).sum::<f64>();
            for c in 0..3 {
                g[9 + 3 * r + c] = -f[c] * (f[c].ln() + h);
            }
        }
        g
    }
}

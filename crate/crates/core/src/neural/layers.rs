//! Dense stacks and the gated recurrent cell, each with a hand-written adjoint.
//!
//! Parameters live in one flat slice; layers only hold offsets into it so the
//! optimizer and checkpoints can treat the model as a single vector.

use super::Real;
use ndarray::linalg::general_mat_mul;
use ndarray::{Array2, ArrayView1, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis, Zip};

/// `y = x W + b` with `W` stored row-major as `inp x out` followed by `b`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Dense {
    pub offset: usize,
    pub inp: usize,
    pub out: usize,
}

impl Dense {
    pub fn param_count(&self) -> usize {
        self.inp * self.out + self.out
    }

    pub fn weight<'a, T: Real>(&self, p: &'a [T]) -> ArrayView2<'a, T> {
        let n = self.inp * self.out;
        ArrayView2::from_shape((self.inp, self.out), &p[self.offset..self.offset + n]).unwrap()
    }

    pub fn bias<'a, T: Real>(&self, p: &'a [T]) -> ArrayView1<'a, T> {
        let s = self.offset + self.inp * self.out;
        ArrayView1::from(&p[s..s + self.out])
    }

    fn grads_mut<'a, T: Real>(&self, g: &'a mut [T]) -> (ArrayViewMut2<'a, T>, ArrayViewMut1<'a, T>) {
        let n = self.inp * self.out;
        let (w, b) = g[self.offset..self.offset + n + self.out].split_at_mut(n);
        (
            ArrayViewMut2::from_shape((self.inp, self.out), w).unwrap(),
            ArrayViewMut1::from(b),
        )
    }

    pub fn forward<T: Real>(&self, p: &[T], x: ArrayView2<T>) -> Array2<T> {
        let mut y = x.dot(&self.weight(p));
        y += &self.bias(p);
        y
    }

    /// Accumulates parameter gradients and optionally returns `dL/dx`.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        x: ArrayView2<T>,
        dy: ArrayView2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let (mut gw, mut gb) = self.grads_mut(g);
        general_mat_mul(T::one(), &x.t(), &dy, T::one(), &mut gw);
        gb += &dy.sum_axis(Axis(0));
        need_dx.then(|| dy.dot(&self.weight(p).t()))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Activation {
    Tanh,
    Linear,
}

/// Stack of dense layers: tanh on every hidden layer, configurable output.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Mlp {
    pub layers: Vec<Dense>,
    pub output: Activation,
}

/// Layer inputs and the final output recorded by `Mlp::forward`.
#[derive(Debug, Clone)]
pub struct MlpTape<T> {
    acts: Vec<Array2<T>>,
}

impl<T: Real> MlpTape<T> {
    pub fn output(&self) -> &Array2<T> {
        self.acts.last().unwrap()
    }
}

impl Mlp {
    /// Lays out `sizes[0] -> sizes[1] -> ...` starting at `*offset`.
    pub fn build(sizes: &[usize], output: Activation, offset: &mut usize) -> Self {
        let layers = sizes
            .windows(2)
            .map(|w| {
                let d = Dense {
                    offset: *offset,
                    inp: w[0],
                    out: w[1],
                };
                *offset += d.param_count();
                d
            })
            .collect();
        Self { layers, output }
    }

    pub fn inp(&self) -> usize {
        self.layers[0].inp
    }

    pub fn out(&self) -> usize {
        self.layers.last().unwrap().out
    }

    fn activation(&self, i: usize) -> Activation {
        if i + 1 == self.layers.len() {
            self.output
        } else {
            Activation::Tanh
        }
    }

    pub fn forward<T: Real>(&self, p: &[T], x: Array2<T>) -> MlpTape<T> {
        let mut acts = Vec::with_capacity(self.layers.len() + 1);
        acts.push(x);
        for (i, layer) in self.layers.iter().enumerate() {
            let mut y = layer.forward(p, acts.last().unwrap().view());
            if self.activation(i) == Activation::Tanh {
                y.mapv_inplace(|v| v.tanh());
            }
            acts.push(y);
        }
        MlpTape { acts }
    }

    /// Inference-only forward.
    pub fn eval<T: Real>(&self, p: &[T], x: Array2<T>) -> Array2<T> {
        self.forward(p, x).acts.pop().unwrap()
    }

    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        tape: &MlpTape<T>,
        dy: Array2<T>,
        need_dx: bool,
    ) -> Option<Array2<T>> {
        let mut d = dy;
        for (i, layer) in self.layers.iter().enumerate().rev() {
            if self.activation(i) == Activation::Tanh {
                Zip::from(&mut d)
                    .and(&tape.acts[i + 1])
                    .for_each(|d, &a| *d *= T::one() - a * a);
            }
            let want = need_dx || i > 0;
            match layer.backward(p, g, tape.acts[i].view(), d.view(), want) {
                Some(dx) => d = dx,
                None => return None,
            }
        }
        Some(d)
    }
}

fn sigmoid<T: Real>(x: T) -> T {
    T::one() / (T::one() + (-x).exp())
}

/// Gated recurrent unit with gates ordered `[reset | update | candidate]`:
///
/// ```text
/// r  = sigmoid(x Wi_r + bi_r + h Wh_r + bh_r)
/// u  = sigmoid(x Wi_u + bi_u + h Wh_u + bh_u)
/// n  = tanh(x Wi_n + bi_n + r * (h Wh_n + bh_n))
/// h' = (1 - u) * n + u * h
/// ```
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Gru {
    pub input: Dense,
    pub hidden: Dense,
}

#[derive(Debug, Clone)]
pub struct GruTape<T> {
    x: Array2<T>,
    h: Array2<T>,
    r: Array2<T>,
    u: Array2<T>,
    n: Array2<T>,
    hn: Array2<T>,
    pub h_next: Array2<T>,
}

impl Gru {
    pub fn build(inp: usize, hid: usize, offset: &mut usize) -> Self {
        let input = Dense {
            offset: *offset,
            inp,
            out: 3 * hid,
        };
        *offset += input.param_count();
        let hidden = Dense {
            offset: *offset,
            inp: hid,
            out: 3 * hid,
        };
        *offset += hidden.param_count();
        Self { input, hidden }
    }

    pub fn size(&self) -> usize {
        self.hidden.inp
    }

    pub fn forward<T: Real>(&self, p: &[T], x: Array2<T>, h: Array2<T>) -> GruTape<T> {
        let hs = self.size();
        let gi = self.input.forward(p, x.view());
        let gh = self.hidden.forward(p, h.view());
        let b = x.nrows();
        let mut r = Array2::zeros((b, hs));
        let mut u = Array2::zeros((b, hs));
        let mut n = Array2::zeros((b, hs));
        let hn = gh.slice(ndarray::s![.., 2 * hs..]).to_owned();
        let mut h_next = Array2::zeros((b, hs));
        for row in 0..b {
            for k in 0..hs {
                let rv = sigmoid(gi[(row, k)] + gh[(row, k)]);
                let uv = sigmoid(gi[(row, hs + k)] + gh[(row, hs + k)]);
                let nv = (gi[(row, 2 * hs + k)] + rv * hn[(row, k)]).tanh();
                r[(row, k)] = rv;
                u[(row, k)] = uv;
                n[(row, k)] = nv;
                h_next[(row, k)] = (T::one() - uv) * nv + uv * h[(row, k)];
            }
        }
        GruTape {
            x,
            h,
            r,
            u,
            n,
            hn,
            h_next,
        }
    }

    /// Returns `(dL/dx, dL/dh_prev)`.
    pub fn backward<T: Real>(
        &self,
        p: &[T],
        g: &mut [T],
        tape: &GruTape<T>,
        dh_next: ArrayView2<T>,
        need_dx: bool,
    ) -> (Option<Array2<T>>, Array2<T>) {
        let hs = self.size();
        let b = dh_next.nrows();
        let mut dgi = Array2::zeros((b, 3 * hs));
        let mut dgh = Array2::zeros((b, 3 * hs));
        let mut dh = Array2::zeros((b, hs));
        let one = T::one();
        for row in 0..b {
            for k in 0..hs {
                let d = dh_next[(row, k)];
                let (r, u, n) = (tape.r[(row, k)], tape.u[(row, k)], tape.n[(row, k)]);
                let dn = d * (one - u) * (one - n * n);
                let du = d * (tape.h[(row, k)] - n) * u * (one - u);
                let dr = dn * tape.hn[(row, k)] * r * (one - r);
                dgi[(row, k)] = dr;
                dgi[(row, hs + k)] = du;
                dgi[(row, 2 * hs + k)] = dn;
                dgh[(row, k)] = dr;
                dgh[(row, hs + k)] = du;
                dgh[(row, 2 * hs + k)] = dn * r;
                dh[(row, k)] = d * u;
            }
        }
        let dx = self.input.backward(p, g, tape.x.view(), dgi.view(), need_dx);
        let dh_rec = self
            .hidden
            .backward(p, g, tape.h.view(), dgh.view(), true)
            .unwrap();
        (dx, dh + &dh_rec)
    }
}

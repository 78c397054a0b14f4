//! Parameter storage and the building-block layers, all recorded on a
//! [`Tape`].

use ndarray::Array2;
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::tape::{Mat, Tape, Var};

/// Optimizer parameter group.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// The frame encoder.
    Backbone,
    /// Everything initialized fresh for this task.
    New,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub value: Mat,
}

#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Mat) -> ParamId {
        self.params.push(Param { name: name.into(), group, value });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn iter(&self) -> std::slice::Iter<'_, Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> std::slice::IterMut<'_, Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<&Param> {
        self.params.iter().find(|p| p.name == name)
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    /// Records every parameter as a differentiable leaf. The returned vector is
    /// indexed by [`ParamId`].
    pub fn bind(&self, tape: &mut Tape) -> Bound {
        Bound(self.params.iter().map(|p| tape.leaf(p.value.clone())).collect())
    }
}

/// Parameter handles on one tape.
#[derive(Clone, Debug)]
pub struct Bound(pub(crate) Vec<Var>);

impl Bound {
    pub fn var(&self, id: ParamId) -> Var {
        self.0[id.0]
    }

    pub fn vars(&self) -> &[Var] {
        &self.0
    }
}

/// Registers freshly initialized parameters under a name prefix.
pub(crate) struct Init<'a> {
    pub store: &'a mut ParamStore,
    pub rng: &'a mut ChaCha8Rng,
    pub group: ParamGroup,
    pub prefix: String,
}

impl Init<'_> {
    pub fn scoped<R>(&mut self, name: &str, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let prefix = format!("{}{name}.", self.prefix);
        let mut sub = Init { store: self.store, rng: self.rng, group: self.group, prefix };
        f(&mut sub)
    }

    pub fn with_group<R>(&mut self, group: ParamGroup, f: impl FnOnce(&mut Init<'_>) -> R) -> R {
        let mut sub = Init { store: self.store, rng: self.rng, group, prefix: self.prefix.clone() };
        f(&mut sub)
    }

    pub fn param(&mut self, name: &str, value: Mat) -> ParamId {
        self.store.add(format!("{}{name}", self.prefix), self.group, value)
    }

    /// Uniform in `±1/sqrt(fan_in)`.
    pub fn fan_in_uniform(&mut self, name: &str, rows: usize, cols: usize, fan_in: usize) -> ParamId {
        let bound = 1.0 / (fan_in as f64).sqrt();
        let rng = &mut *self.rng;
        let v = Array2::from_shape_fn((rows, cols), |_| rng.gen_range(-bound..bound));
        self.param(name, v)
    }

    pub fn normal(&mut self, name: &str, rows: usize, cols: usize, std: f64) -> ParamId {
        let dist = Normal::new(0.0, std).expect("valid std");
        let rng = &mut *self.rng;
        let v = Array2::from_shape_fn((rows, cols), |_| dist.sample(rng));
        self.param(name, v)
    }

    pub fn zeros(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.param(name, Array2::zeros((rows, cols)))
    }

    pub fn ones(&mut self, name: &str, rows: usize, cols: usize) -> ParamId {
        self.param(name, Array2::ones((rows, cols)))
    }
}

/// `y = x W + b` with `W: in×out` and a zero-initialized bias.
#[derive(Clone, Debug)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, inp: usize, out: usize) -> Self {
        init.scoped(name, |i| Linear { w: i.fan_in_uniform("w", inp, out, inp), b: i.zeros("b", 1, out) })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let h = tape.matmul(x, p.var(self.w));
        tape.add_row(h, p.var(self.b))
    }
}

/// Row-wise layer normalization with learned gain and bias.
#[derive(Clone, Debug)]
pub struct LayerNorm {
    pub gain: ParamId,
    pub bias: ParamId,
}

impl LayerNorm {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, dim: usize) -> Self {
        init.scoped(name, |i| LayerNorm { gain: i.ones("gain", 1, dim), bias: i.zeros("bias", 1, dim) })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, x: Var) -> Var {
        let n = tape.layer_norm_rows(x, 1e-5);
        let g = tape.mul_row(n, p.var(self.gain));
        tape.add_row(g, p.var(self.bias))
    }
}

/// One direction of an LSTM. Gate order: input, forget, cell, output.
#[derive(Clone, Debug)]
pub struct Lstm {
    pub w_ih: ParamId,
    pub w_hh: ParamId,
    pub b: ParamId,
    pub hidden: usize,
}

impl Lstm {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, inp: usize, hidden: usize) -> Self {
        init.scoped(name, |i| {
            let w_ih = i.fan_in_uniform("w_ih", inp, 4 * hidden, hidden);
            let w_hh = i.fan_in_uniform("w_hh", hidden, 4 * hidden, hidden);
            let mut bias = Array2::zeros((1, 4 * hidden));
            bias.slice_mut(ndarray::s![.., hidden..2 * hidden]).fill(1.0);
            let b = i.param("b", bias);
            Lstm { w_ih, w_hh, b, hidden }
        })
    }

    /// Runs over the rows of `xs` (`T×in`), in reverse time order when
    /// `reverse`. Output row `t` is the hidden state at frame `t`.
    pub fn forward(&self, tape: &mut Tape, p: &Bound, xs: Var, reverse: bool) -> Var {
        let h_dim = self.hidden;
        let t_len = tape.value(xs).nrows();
        let xw = tape.matmul(xs, p.var(self.w_ih));
        let xw = tape.add_row(xw, p.var(self.b));
        let mut h = tape.constant(Array2::zeros((1, h_dim)));
        let mut c = tape.constant(Array2::zeros((1, h_dim)));
        let mut states = vec![h; t_len];
        let order: Box<dyn Iterator<Item = usize>> =
            if reverse { Box::new((0..t_len).rev()) } else { Box::new(0..t_len) };
        for t in order {
            let x_t = tape.slice_rows(xw, t, 1);
            let rec = tape.matmul(h, p.var(self.w_hh));
            let gates = tape.add(x_t, rec);
            let i = tape.slice_cols(gates, 0, h_dim);
            let i = tape.sigmoid(i);
            let f = tape.slice_cols(gates, h_dim, h_dim);
            let f = tape.sigmoid(f);
            let g = tape.slice_cols(gates, 2 * h_dim, h_dim);
            let g = tape.tanh(g);
            let o = tape.slice_cols(gates, 3 * h_dim, h_dim);
            let o = tape.sigmoid(o);
            let keep = tape.mul(f, c);
            let write = tape.mul(i, g);
            c = tape.add(keep, write);
            let tc = tape.tanh(c);
            h = tape.mul(o, tc);
            states[t] = h;
        }
        tape.concat_rows(&states)
    }
}

/// Multi-head scaled dot-product attention with separate query and
/// key/value inputs.
#[derive(Clone, Debug)]
pub struct MultiHeadAttention {
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub heads: usize,
}

pub struct AttentionOutput {
    pub out: Var,
    /// One `queries×keys` weight matrix per head.
    pub weights: Vec<Var>,
}

impl MultiHeadAttention {
    pub(crate) fn new(init: &mut Init<'_>, name: &str, dim: usize, heads: usize) -> Self {
        init.scoped(name, |i| MultiHeadAttention {
            q: Linear::new(i, "q", dim, dim),
            k: Linear::new(i, "k", dim, dim),
            v: Linear::new(i, "v", dim, dim),
            o: Linear::new(i, "o", dim, dim),
            heads,
        })
    }

    pub fn forward(&self, tape: &mut Tape, p: &Bound, queries: Var, keys_values: Var) -> AttentionOutput {
        let q = self.q.forward(tape, p, queries);
        let k = self.k.forward(tape, p, keys_values);
        let v = self.v.forward(tape, p, keys_values);
        let dim = tape.value(q).ncols();
        let dh = dim / self.heads;
        let scale = 1.0 / (dh as f64).sqrt();
        let mut outs = Vec::with_capacity(self.heads);
        let mut weights = Vec::with_capacity(self.heads);
        for h in 0..self.heads {
            let qh = tape.slice_cols(q, h * dh, dh);
            let kh = tape.slice_cols(k, h * dh, dh);
            let vh = tape.slice_cols(v, h * dh, dh);
            let kt = tape.transpose(kh);
            let scores = tape.matmul(qh, kt);
            let scores = tape.scale(scores, scale);
            let a = tape.softmax_rows(scores);
            outs.push(tape.matmul(a, vh));
            weights.push(a);
        }
        let cat = if outs.len() == 1 { outs[0] } else { tape.concat_cols(&outs) };
        AttentionOutput { out: self.o.forward(tape, p, cat), weights }
    }
}

//! Neural building blocks on top of [`Graph`]: affine maps, the GRU cell,
//! word-level attention, w-gram convolution, max-pooling and the
//! softmax/cross-entropy head.

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::graph::{Graph, Var};
use super::tensor::{ParamId, ParamSet, Shape};
use crate::error::{argument, shape, Result};

/// Nonlinearity applied to the attention projection.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    #[default]
    Tanh,
    Sigmoid,
}

impl Activation {
    pub fn apply(self, g: &mut Graph, x: Var) -> Var {
        match self {
            Activation::Tanh => g.tanh(x),
            Activation::Sigmoid => g.sigmoid(x),
        }
    }
}

fn expect_vector(g: &Graph, v: Var, n: usize, what: &str) -> Result<()> {
    match g.shape(v) {
        Shape::Vector(m) if m == n => Ok(()),
        other => Err(shape(format!("{what}: expected vector of {n}, got {other:?}"))),
    }
}

fn matrix_dims(params: &ParamSet, id: ParamId) -> (usize, usize) {
    match params.get(id).shape {
        Shape::Matrix(r, c) => (r, c),
        Shape::Vector(n) => (n, 1),
    }
}

/// `W x + b` with `W` stored `out x in`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Linear {
    pub w: ParamId,
    pub b: ParamId,
}

impl Linear {
    pub fn register(params: &mut ParamSet, name: &str, d_in: usize, d_out: usize, rng: &mut impl Rng) -> Self {
        Self {
            w: params.weight(&format!("{name}.w"), d_out, d_in, rng),
            b: params.bias(&format!("{name}.b"), d_out),
        }
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        matrix_dims(params, self.w).1
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        matrix_dims(params, self.w).0
    }

    pub fn forward(&self, g: &mut Graph, x: Var) -> Var {
        let w = g.param(self.w);
        let b = g.param(self.b);
        let wx = g.matvec(w, x);
        g.add(wx, b)
    }
}

/// Update gate `z`, reset gate `r` and candidate `h~` weights.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct GruParams {
    pub w_z: ParamId,
    pub u_z: ParamId,
    pub b_z: ParamId,
    pub w_r: ParamId,
    pub u_r: ParamId,
    pub b_r: ParamId,
    pub w_h: ParamId,
    pub u_h: ParamId,
    pub b_h: ParamId,
}

impl GruParams {
    pub fn register(params: &mut ParamSet, name: &str, d_in: usize, d_h: usize, rng: &mut impl Rng) -> Self {
        let mut gate = |gate: &str| {
            (
                params.weight(&format!("{name}.w_{gate}"), d_h, d_in, rng),
                params.weight(&format!("{name}.u_{gate}"), d_h, d_h, rng),
                params.bias(&format!("{name}.b_{gate}"), d_h),
            )
        };
        let (w_z, u_z, b_z) = gate("z");
        let (w_r, u_r, b_r) = gate("r");
        let (w_h, u_h, b_h) = gate("h");
        Self {
            w_z,
            u_z,
            b_z,
            w_r,
            u_r,
            b_r,
            w_h,
            u_h,
            b_h,
        }
    }

    pub fn input_dim(&self, params: &ParamSet) -> usize {
        matrix_dims(params, self.w_z).1
    }

    pub fn hidden_dim(&self, params: &ParamSet) -> usize {
        matrix_dims(params, self.u_z).0
    }

    pub fn validate(&self, params: &ParamSet) -> Result<()> {
        let (d_h, d_in) = matrix_dims(params, self.w_z);
        for (w, u, b) in [
            (self.w_z, self.u_z, self.b_z),
            (self.w_r, self.u_r, self.b_r),
            (self.w_h, self.u_h, self.b_h),
        ] {
            if matrix_dims(params, w) != (d_h, d_in)
                || params.get(u).shape != Shape::Matrix(d_h, d_h)
                || params.get(b).shape != Shape::Vector(d_h)
            {
                return Err(shape("GRU gate shapes are inconsistent"));
            }
        }
        Ok(())
    }
}

/// One GRU step:
///
/// ```text
/// z  = sigmoid(W_z x + U_z h + b_z)
/// r  = sigmoid(W_r x + U_r h + b_r)
/// h~ = tanh(W_h x + r * (U_h h) + b_h)
/// h' = (1 - z) * h + z * h~
/// ```
pub fn gru_step(g: &mut Graph, x: Var, h_prev: Var, p: &GruParams) -> Result<Var> {
    let params = g.params();
    let d_in = p.input_dim(params);
    let d_h = p.hidden_dim(params);
    expect_vector(g, x, d_in, "gru input")?;
    expect_vector(g, h_prev, d_h, "gru state")?;
    Ok(gru_step_unchecked(g, x, h_prev, p))
}

fn gate(g: &mut Graph, x: Var, h: Var, w: ParamId, u: ParamId, b: ParamId) -> Var {
    let w = g.param(w);
    let u = g.param(u);
    let b = g.param(b);
    let wx = g.matvec(w, x);
    let uh = g.matvec(u, h);
    let s = g.add(wx, uh);
    let pre = g.add(s, b);
    g.sigmoid(pre)
}

fn gru_step_unchecked(g: &mut Graph, x: Var, h: Var, p: &GruParams) -> Var {
    let z = gate(g, x, h, p.w_z, p.u_z, p.b_z);
    let r = gate(g, x, h, p.w_r, p.u_r, p.b_r);
    let w_h = g.param(p.w_h);
    let u_h = g.param(p.u_h);
    let b_h = g.param(p.b_h);
    let wx = g.matvec(w_h, x);
    let uh = g.matvec(u_h, h);
    let ruh = g.mul(r, uh);
    let s = g.add(wx, ruh);
    let pre = g.add(s, b_h);
    let cand = g.tanh(pre);
    let keep = g.one_minus(z);
    let old = g.mul(keep, h);
    let new = g.mul(z, cand);
    g.add(old, new)
}

/// Runs the GRU left to right from a zero state, returning every hidden state.
pub fn gru_sequence(g: &mut Graph, xs: &[Var], p: &GruParams) -> Result<Vec<Var>> {
    let d_in = p.input_dim(g.params());
    let d_h = p.hidden_dim(g.params());
    let mut h = g.input(vec![0.0; d_h]);
    let mut out = Vec::with_capacity(xs.len());
    for &x in xs {
        expect_vector(g, x, d_in, "gru input")?;
        h = gru_step_unchecked(g, x, h, p);
        out.push(h);
    }
    Ok(out)
}

/// Projection `W_w`, bias `b_w` and word context vector `u_w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionParams {
    pub w_w: ParamId,
    pub b_w: ParamId,
    pub u_w: ParamId,
}

impl AttentionParams {
    pub fn register(params: &mut ParamSet, name: &str, d_h: usize, d_a: usize, rng: &mut impl Rng) -> Self {
        Self {
            w_w: params.weight(&format!("{name}.w_w"), d_a, d_h, rng),
            b_w: params.bias(&format!("{name}.b_w"), d_a),
            u_w: params.uniform_vector(&format!("{name}.u_w"), d_a, rng),
        }
    }
}

pub struct AttentionOutput {
    pub alpha: Var,
    pub context: Var,
}

/// `u_i = act(W_w h_i + b_w)`, `alpha = softmax_i(u_i . u_w)`,
/// `v = sum_i alpha_i h_i`.
pub fn attention(g: &mut Graph, hs: &[Var], p: &AttentionParams, act: Activation) -> Result<AttentionOutput> {
    if hs.is_empty() {
        return Err(argument("attention over an empty sequence"));
    }
    let (d_a, d_h) = matrix_dims(g.params(), p.w_w);
    if g.params().get(p.u_w).shape != Shape::Vector(d_a) {
        return Err(shape("context vector length differs from attention projection"));
    }
    let w = g.param(p.w_w);
    let b = g.param(p.b_w);
    let u_w = g.param(p.u_w);
    let mut scores = Vec::with_capacity(hs.len());
    for &h in hs {
        expect_vector(g, h, d_h, "attention input")?;
        let wh = g.matvec(w, h);
        let pre = g.add(wh, b);
        let u = act.apply(g, pre);
        scores.push(g.dot(u, u_w));
    }
    let scores = g.concat(&scores);
    let alpha = g.softmax(scores);
    let rows = g.stack(hs);
    let context = g.weighted_rows(alpha, rows);
    Ok(AttentionOutput { alpha, context })
}

/// Filter `W` of shape `d_out x (w * d_in)`, bias `b`, width `w`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ConvParams {
    pub w: ParamId,
    pub b: ParamId,
    pub width: usize,
}

impl ConvParams {
    pub fn register(
        params: &mut ParamSet,
        name: &str,
        d_in: usize,
        d_out: usize,
        width: usize,
        rng: &mut impl Rng,
    ) -> Self {
        assert!(width >= 1);
        Self {
            w: params.weight(&format!("{name}.w"), d_out, width * d_in, rng),
            b: params.bias(&format!("{name}.b"), d_out),
            width,
        }
    }

    pub fn output_dim(&self, params: &ParamSet) -> usize {
        matrix_dims(params, self.w).0
    }
}

/// Valid w-gram convolution: `p_i = relu(W [x_{i-w+1}; ...; x_i] + b)`,
/// returned as an `(n - w + 1) x d_out` matrix.
pub fn conv_wgram(g: &mut Graph, xs: &[Var], p: &ConvParams) -> Result<Var> {
    let w = p.width;
    if w == 0 {
        return Err(argument("filter width must be at least 1"));
    }
    if xs.len() < w {
        return Err(argument(format!("sequence of {} is shorter than filter width {w}", xs.len())));
    }
    let (_, cols) = matrix_dims(g.params(), p.w);
    let d_in = cols / w;
    if d_in * w != cols {
        return Err(shape("filter columns are not a multiple of the width"));
    }
    for &x in xs {
        expect_vector(g, x, d_in, "convolution input")?;
    }
    let wv = g.param(p.w);
    let b = g.param(p.b);
    let rows: Vec<Var> = xs
        .windows(w)
        .map(|win| {
            let c = g.concat(win);
            let wc = g.matvec(wv, c);
            let pre = g.add(wc, b);
            g.relu(pre)
        })
        .collect();
    Ok(g.stack(&rows))
}

/// Column-wise max over a matrix of row vectors.
pub fn max_pool(g: &mut Graph, m: Var) -> Result<Var> {
    match g.shape(m) {
        Shape::Matrix(r, _) if r > 0 => Ok(g.max_rows(m)),
        Shape::Matrix(..) => Err(argument("max-pool over zero rows")),
        Shape::Vector(_) => Err(shape("max-pool needs a matrix")),
    }
}

/// Softmax probabilities and the cross-entropy loss `-ln p[label]`.
pub fn softmax_xent(g: &mut Graph, logits: Var, label: usize) -> Result<(Vec<f64>, Var)> {
    let n = match g.shape(logits) {
        Shape::Vector(n) => n,
        Shape::Matrix(..) => return Err(shape("logits must be a vector")),
    };
    if label >= n {
        return Err(argument(format!("label {label} outside {n} classes")));
    }
    let p = super::graph::softmax(g.value(logits));
    Ok((p, g.softmax_xent(logits, label)))
}

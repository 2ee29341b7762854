use std::collections::BTreeMap;

use super::tensor::{ParamId, ParamSet, Shape};
use crate::corpus::{TokenId, PAD};
use crate::embeddings::EmbeddingTable;

/// Handle to a node on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Input,
    Param(ParamId),
    Embed(TokenId),
    MatVec(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    OneMinus(Var),
    Sigmoid(Var),
    Tanh(Var),
    Relu(Var),
    Dot(Var, Var),
    Softmax(Var),
    Concat(Vec<Var>),
    Stack(Vec<Var>),
    MaxRows { input: Var, argmax: Vec<usize> },
    WeightedRows { weights: Var, rows: Var },
    Sum(Vec<Var>),
    Xent { logits: Var, label: usize },
}

#[derive(Debug, Clone)]
struct Node {
    shape: Shape,
    // empty for Param and Embed nodes, which read through to their source
    value: Vec<f64>,
    op: Op,
}

/// Single-use reverse-mode tape over dense vectors and matrices.
///
/// Parameters and embedding rows are borrowed, not copied. Every primitive
/// panics on a shape mismatch; the layer functions in
/// [`crate::autodiff::nn`] validate shapes up front and return errors.
pub struct Graph<'a> {
    params: &'a ParamSet,
    table: Option<&'a EmbeddingTable>,
    nodes: Vec<Node>,
    param_nodes: Vec<Option<Var>>,
}

/// Gradients of a scalar with respect to parameters and embedding rows.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Gradients {
    pub params: Vec<Option<Vec<f64>>>,
    pub embeddings: BTreeMap<TokenId, Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &ParamSet) -> Self {
        Self {
            params: vec![None; params.len()],
            embeddings: BTreeMap::new(),
        }
    }

    pub fn param(&self, id: ParamId) -> Option<&[f64]> {
        self.params.get(id.0).and_then(|g| g.as_deref())
    }

    /// Elementwise `self += other`.
    pub fn accumulate(&mut self, other: &Gradients) {
        if self.params.len() < other.params.len() {
            self.params.resize(other.params.len(), None);
        }
        for (mine, theirs) in self.params.iter_mut().zip(&other.params) {
            if let Some(theirs) = theirs {
                match mine {
                    Some(m) => add_into(m, theirs),
                    None => *mine = Some(theirs.clone()),
                }
            }
        }
        for (row, g) in &other.embeddings {
            match self.embeddings.get_mut(row) {
                Some(m) => add_into(m, g),
                None => {
                    self.embeddings.insert(*row, g.clone());
                }
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.params.iter().flatten().all(|g| g.iter().all(|v| v.is_finite()))
            && self.embeddings.values().all(|g| g.iter().all(|v| v.is_finite()))
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Numerically stable softmax (max subtracted).
pub fn softmax(x: &[f64]) -> Vec<f64> {
    let max = x.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = x.iter().map(|v| (v - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

impl<'a> Graph<'a> {
    pub fn new(params: &'a ParamSet) -> Self {
        Self {
            params,
            table: None,
            nodes: Vec::new(),
            param_nodes: vec![None; params.len()],
        }
    }

    pub fn with_embeddings(params: &'a ParamSet, table: &'a EmbeddingTable) -> Self {
        let mut g = Self::new(params);
        g.table = Some(table);
        g
    }

    pub fn params(&self) -> &'a ParamSet {
        self.params
    }

    pub fn table(&self) -> Option<&'a EmbeddingTable> {
        self.table
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &[f64] {
        let node = &self.nodes[v.0];
        match node.op {
            Op::Param(id) => &self.params.get(id).data,
            Op::Embed(tok) => self.table.expect("embedding node without a table").row(tok),
            _ => &node.value,
        }
    }

    pub fn scalar(&self, v: Var) -> f64 {
        let value = self.value(v);
        assert_eq!(value.len(), 1, "not a scalar");
        value[0]
    }

    pub fn shape(&self, v: Var) -> Shape {
        self.nodes[v.0].shape
    }

    fn push(&mut self, shape: Shape, value: Vec<f64>, op: Op) -> Var {
        debug_assert!(matches!(op, Op::Param(_) | Op::Embed(_)) || value.len() == shape.len());
        self.nodes.push(Node { shape, value, op });
        Var(self.nodes.len() - 1)
    }

    fn vec_len(&self, v: Var) -> usize {
        match self.shape(v) {
            Shape::Vector(n) => n,
            Shape::Matrix(..) => panic!("expected a vector"),
        }
    }

    /// Constant input; receives no gradient outside this graph.
    pub fn input(&mut self, values: Vec<f64>) -> Var {
        let n = values.len();
        self.push(Shape::Vector(n), values, Op::Input)
    }

    pub fn param(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.param_nodes[id.0] {
            return v;
        }
        let shape = self.params.get(id).shape;
        let v = self.push(shape, Vec::new(), Op::Param(id));
        self.param_nodes[id.0] = Some(v);
        v
    }

    /// Embedding row of `token`; its gradient is reported per row.
    pub fn embed(&mut self, token: TokenId) -> Var {
        let table = self.table.expect("graph was built without an embedding table");
        assert!((token as usize) < table.len(), "token {token} outside embedding table");
        self.push(Shape::Vector(table.dim()), Vec::new(), Op::Embed(token))
    }

    pub fn matvec(&mut self, w: Var, x: Var) -> Var {
        let (rows, cols) = match self.shape(w) {
            Shape::Matrix(r, c) => (r, c),
            Shape::Vector(_) => panic!("matvec needs a matrix"),
        };
        assert_eq!(self.vec_len(x), cols, "matvec inner dimension");
        let wv = self.value(w);
        let xv = self.value(x);
        let out = (0..rows)
            .map(|i| {
                let row = &wv[i * cols..(i + 1) * cols];
                row.iter().zip(xv).map(|(a, b)| a * b).sum()
            })
            .collect();
        self.push(Shape::Vector(rows), out, Op::MatVec(w, x))
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: Op) -> Var {
        assert_eq!(self.shape(a), self.shape(b), "elementwise shape mismatch");
        let out = self.value(a).iter().zip(self.value(b)).map(|(x, y)| f(*x, *y)).collect();
        let shape = self.shape(a);
        self.push(shape, out, op)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let out = self.value(a).iter().map(|x| f(*x)).collect();
        let shape = self.shape(a);
        self.push(shape, out, op)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.map(a, |x| c * x, Op::Scale(a, c))
    }

    /// `1 - a`
    pub fn one_minus(&mut self, a: Var) -> Var {
        self.map(a, |x| 1.0 - x, Op::OneMinus(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.map(a, sigmoid, Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn dot(&mut self, a: Var, b: Var) -> Var {
        assert_eq!(self.vec_len(a), self.vec_len(b), "dot length mismatch");
        let s = self.value(a).iter().zip(self.value(b)).map(|(x, y)| x * y).sum();
        self.push(Shape::scalar(), vec![s], Op::Dot(a, b))
    }

    pub fn softmax(&mut self, a: Var) -> Var {
        let n = self.vec_len(a);
        assert!(n > 0, "softmax of an empty vector");
        let p = softmax(self.value(a));
        self.push(Shape::Vector(n), p, Op::Softmax(a))
    }

    pub fn concat(&mut self, parts: &[Var]) -> Var {
        let mut out = Vec::new();
        for &p in parts {
            self.vec_len(p);
            out.extend_from_slice(self.value(p));
        }
        let n = out.len();
        self.push(Shape::Vector(n), out, Op::Concat(parts.to_vec()))
    }

    /// Stacks equal-length vectors as the rows of a matrix.
    pub fn stack(&mut self, rows: &[Var]) -> Var {
        assert!(!rows.is_empty(), "stack of zero rows");
        let cols = self.vec_len(rows[0]);
        let mut out = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            assert_eq!(self.vec_len(r), cols, "stack row length mismatch");
            out.extend_from_slice(self.value(r));
        }
        self.push(Shape::Matrix(rows.len(), cols), out, Op::Stack(rows.to_vec()))
    }

    /// Column-wise max over the rows of a matrix. The gradient flows to the
    /// first row attaining the max.
    pub fn max_rows(&mut self, m: Var) -> Var {
        let (rows, cols) = match self.shape(m) {
            Shape::Matrix(r, c) => (r, c),
            Shape::Vector(_) => panic!("max_rows needs a matrix"),
        };
        assert!(rows > 0);
        let v = self.value(m);
        let mut out = v[..cols].to_vec();
        let mut argmax = vec![0; cols];
        for r in 1..rows {
            for c in 0..cols {
                let x = v[r * cols + c];
                if x > out[c] {
                    out[c] = x;
                    argmax[c] = r;
                }
            }
        }
        self.push(Shape::Vector(cols), out, Op::MaxRows { input: m, argmax })
    }

    /// `sum_i weights[i] * rows[i]`
    pub fn weighted_rows(&mut self, weights: Var, rows: Var) -> Var {
        let (n, cols) = match self.shape(rows) {
            Shape::Matrix(r, c) => (r, c),
            Shape::Vector(_) => panic!("weighted_rows needs a matrix"),
        };
        assert_eq!(self.vec_len(weights), n, "one weight per row");
        let w = self.value(weights);
        let m = self.value(rows);
        let mut out = vec![0.0; cols];
        for (i, wi) in w.iter().enumerate() {
            for (o, x) in out.iter_mut().zip(&m[i * cols..(i + 1) * cols]) {
                *o += wi * x;
            }
        }
        self.push(Shape::Vector(cols), out, Op::WeightedRows { weights, rows })
    }

    /// Sum of same-shaped nodes.
    pub fn sum(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let shape = self.shape(parts[0]);
        let mut out = vec![0.0; shape.len()];
        for &p in parts {
            assert_eq!(self.shape(p), shape, "sum shape mismatch");
            add_into(&mut out, self.value(p));
        }
        self.push(shape, out, Op::Sum(parts.to_vec()))
    }

    /// `-ln softmax(logits)[label]`.
    pub fn softmax_xent(&mut self, logits: Var, label: usize) -> Var {
        let n = self.vec_len(logits);
        assert!(label < n, "label outside logits");
        let z = self.value(logits);
        let max = z.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let lse = max + z.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
        let loss = lse - z[label];
        self.push(Shape::scalar(), vec![loss], Op::Xent { logits, label })
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Gradients {
        assert_eq!(self.shape(root).len(), 1, "backward needs a scalar root");
        let mut grads: Vec<Vec<f64>> = vec![Vec::new(); root.0 + 1];
        grads[root.0] = vec![1.0];
        let mut out = Gradients::zeros_like(self.params);

        for i in (0..=root.0).rev() {
            let g = std::mem::take(&mut grads[i]);
            if g.is_empty() {
                continue;
            }
            let node = &self.nodes[i];
            match &node.op {
                Op::Input => {}
                Op::Param(id) => out.params[id.0] = Some(g),
                Op::Embed(tok) => {
                    if *tok != PAD {
                        match out.embeddings.get_mut(tok) {
                            Some(acc) => add_into(acc, &g),
                            None => {
                                out.embeddings.insert(*tok, g);
                            }
                        }
                    }
                }
                Op::MatVec(w, x) => {
                    let (rows, cols) = match self.shape(*w) {
                        Shape::Matrix(r, c) => (r, c),
                        Shape::Vector(_) => unreachable!(),
                    };
                    let wv = self.value(*w);
                    let xv = self.value(*x);
                    let gw = slot(&mut grads, *w, rows * cols);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            for (dst, xj) in gw[r * cols..(r + 1) * cols].iter_mut().zip(xv) {
                                *dst += g[r] * xj;
                            }
                        }
                    }
                    let gx = slot(&mut grads, *x, cols);
                    for r in 0..rows {
                        if g[r] != 0.0 {
                            for (dst, wij) in gx.iter_mut().zip(&wv[r * cols..(r + 1) * cols]) {
                                *dst += g[r] * wij;
                            }
                        }
                    }
                }
                Op::Add(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    add_into(slot(&mut grads, *b, g.len()), &g);
                }
                Op::Sub(a, b) => {
                    add_into(slot(&mut grads, *a, g.len()), &g);
                    for (d, s) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
                Op::Mul(a, b) => {
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    for ((d, s), y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(bv) {
                        *d += s * y;
                    }
                    for ((d, s), x) in slot(&mut grads, *b, g.len()).iter_mut().zip(&g).zip(av) {
                        *d += s * x;
                    }
                }
                Op::Scale(a, c) => {
                    for (d, s) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d += c * s;
                    }
                }
                Op::OneMinus(a) => {
                    for (d, s) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g) {
                        *d -= s;
                    }
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    for ((d, s), y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *d += s * y * (1.0 - y);
                    }
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    for ((d, s), y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        *d += s * (1.0 - y * y);
                    }
                }
                Op::Relu(a) => {
                    let y = &node.value;
                    for ((d, s), y) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(y) {
                        if *y > 0.0 {
                            *d += s;
                        }
                    }
                }
                Op::Dot(a, b) => {
                    let s = g[0];
                    let av = self.value(*a);
                    let bv = self.value(*b);
                    let n = av.len();
                    for (d, y) in slot(&mut grads, *a, n).iter_mut().zip(bv) {
                        *d += s * y;
                    }
                    for (d, x) in slot(&mut grads, *b, n).iter_mut().zip(av) {
                        *d += s * x;
                    }
                }
                Op::Softmax(a) => {
                    let p = &node.value;
                    let gp: f64 = g.iter().zip(p).map(|(x, y)| x * y).sum();
                    for ((d, s), p) in slot(&mut grads, *a, g.len()).iter_mut().zip(&g).zip(p) {
                        *d += p * (s - gp);
                    }
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.shape(*p).len();
                        add_into(slot(&mut grads, *p, n), &g[offset..offset + n]);
                        offset += n;
                    }
                }
                Op::Stack(rows) => {
                    let cols = g.len() / rows.len();
                    for (r, p) in rows.iter().enumerate() {
                        add_into(slot(&mut grads, *p, cols), &g[r * cols..(r + 1) * cols]);
                    }
                }
                Op::MaxRows { input, argmax } => {
                    let cols = argmax.len();
                    let n = self.shape(*input).len();
                    let gi = slot(&mut grads, *input, n);
                    for (c, &r) in argmax.iter().enumerate() {
                        gi[r * cols + c] += g[c];
                    }
                }
                Op::WeightedRows { weights, rows } => {
                    let w = self.value(*weights);
                    let m = self.value(*rows);
                    let cols = g.len();
                    let gw = slot(&mut grads, *weights, w.len());
                    for (r, d) in gw.iter_mut().enumerate() {
                        *d += m[r * cols..(r + 1) * cols]
                            .iter()
                            .zip(&g)
                            .map(|(x, s)| x * s)
                            .sum::<f64>();
                    }
                    let gm = slot(&mut grads, *rows, m.len());
                    for (r, wr) in w.iter().enumerate() {
                        for (d, s) in gm[r * cols..(r + 1) * cols].iter_mut().zip(&g) {
                            *d += wr * s;
                        }
                    }
                }
                Op::Sum(parts) => {
                    for p in parts {
                        add_into(slot(&mut grads, *p, g.len()), &g);
                    }
                }
                Op::Xent { logits, label } => {
                    let s = g[0];
                    let p = softmax(self.value(*logits));
                    let gl = slot(&mut grads, *logits, p.len());
                    for (j, (d, pj)) in gl.iter_mut().zip(&p).enumerate() {
                        let target = if j == *label { 1.0 } else { 0.0 };
                        *d += s * (pj - target);
                    }
                }
            }
        }
        out
    }
}

fn slot(grads: &mut [Vec<f64>], v: Var, len: usize) -> &mut Vec<f64> {
    let g = &mut grads[v.0];
    if g.is_empty() {
        g.resize(len, 0.0);
    }
    g
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_gradient() {
        // f(w) = |W x|^2 / 2 with x fixed
        let mut params = ParamSet::new();
        let w = params.add("w", Shape::Matrix(2, 2), vec![1.0, 2.0, 3.0, 4.0]);
        let mut g = Graph::new(&params);
        let x = g.input(vec![1.0, -1.0]);
        let wv = g.param(w);
        let y = g.matvec(wv, x);
        let sq = g.dot(y, y);
        let f = g.scale(sq, 0.5);
        assert_eq!(g.scalar(f), 0.5 * (1.0 + 1.0));
        let grads = g.backward(f);
        // df/dW = y x^T with y = (-1, -1)
        assert_eq!(grads.param(w).unwrap(), [-1.0, 1.0, -1.0, 1.0]);
    }

    #[test]
    fn shared_param_node_accumulates() {
        let mut params = ParamSet::new();
        let a = params.add("a", Shape::Vector(1), vec![3.0]);
        let mut g = Graph::new(&params);
        let v1 = g.param(a);
        let v2 = g.param(a);
        assert_eq!(v1, v2);
        let y = g.mul(v1, v2);
        assert_eq!(g.backward(y).param(a).unwrap(), [6.0]);
    }

    #[test]
    fn max_rows_routes_to_first_argmax() {
        let params = ParamSet::new();
        let mut g = Graph::new(&params);
        let r0 = g.input(vec![1.0, 5.0]);
        let r1 = g.input(vec![3.0, 2.0]);
        let m = g.stack(&[r0, r1]);
        let h = g.max_rows(m);
        assert_eq!(g.value(h), [3.0, 5.0]);
    }

    #[test]
    fn stable_softmax() {
        let p = softmax(&[1000.0, 1000.0]);
        assert_eq!(p, [0.5, 0.5]);
        let p = softmax(&[-1e9, 0.0]);
        assert_eq!(p[1], 1.0);
    }
}

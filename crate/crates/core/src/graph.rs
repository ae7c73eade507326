//! Reverse-mode automatic differentiation over [`Tensor`] values.
//!
//! A [`Graph`] records every operation in creation order, which is also a
//! topological order, so [`Graph::backward`] is a single reverse sweep.
//! Parameters are borrowed from their store for the lifetime of the graph;
//! gradients come back as a [`Gradients`] table that the caller folds into
//! the store with `+=`.
//!
//! A graph built with [`Graph::inference`] records no operations and
//! marks nothing as requiring a gradient. Forward values are computed by
//! the same code either way, so the two modes agree bitwise.

use std::cell::{Ref, RefCell};
use std::collections::HashMap;
use std::ops::Deref;

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Value<'p> {
    Owned(Tensor),
    Borrowed(&'p Tensor),
}

impl Deref for Value<'_> {
    type Target = Tensor;

    fn deref(&self) -> &Tensor {
        match self {
            Value::Owned(t) => t,
            Value::Borrowed(t) => t,
        }
    }
}

/// Vector-Jacobian product of a custom op: maps the upstream gradient to one
/// gradient buffer per input (same order as the op's inputs).
pub type CustomVjp<'p> = Box<dyn Fn(&[f64]) -> Vec<Vec<f64>> + 'p>;

enum Op<'p> {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Tanh(Var),
    Sigmoid(Var),
    Swish(Var),
    SoftmaxMasked(Var),
    LogSoftmax(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
    },
    Concat {
        parts: Vec<Var>,
        axis: usize,
    },
    Slice {
        x: Var,
        axis: usize,
        start: usize,
    },
    CausalDepthwiseConv {
        x: Var,
        w: Var,
    },
    Embedding {
        table: Var,
        ids: Vec<usize>,
    },
    Gather {
        x: Var,
        idx: Vec<usize>,
    },
    Sum(Var),
    OuterAddRows(Var, Var),
    Custom {
        inputs: Vec<Var>,
        vjp: CustomVjp<'p>,
    },
}

struct Node<'p> {
    value: Value<'p>,
    op: Op<'p>,
    requires_grad: bool,
}

/// Operation recorder. Confined to one thread; build one per utterance.
pub struct Graph<'p> {
    nodes: RefCell<Vec<Node<'p>>>,
    recording: bool,
    named: RefCell<HashMap<String, Var>>,
}

impl Default for Graph<'_> {
    fn default() -> Self {
        Self::new()
    }
}

impl<'p> Graph<'p> {
    /// A recording graph.
    pub fn new() -> Self {
        Graph {
            nodes: RefCell::new(Vec::with_capacity(256)),
            recording: true,
            named: RefCell::new(HashMap::new()),
        }
    }

    /// A graph that only evaluates forward values.
    pub fn inference() -> Self {
        Graph {
            recording: false,
            ..Graph::new()
        }
    }

    pub fn is_recording(&self) -> bool {
        self.recording
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, value: Value<'p>, op: Op<'p>, requires_grad: bool) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let rg = self.recording && requires_grad;
        let op = if rg { op } else { Op::Leaf };
        nodes.push(Node {
            value,
            op,
            requires_grad: rg,
        });
        Var(nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        let nodes = self.nodes.borrow();
        vars.iter().any(|v| nodes[v.0].requires_grad)
    }

    /// A constant input; receives no gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, false)
    }

    /// An owned leaf that receives a gradient.
    pub fn variable(&self, t: Tensor) -> Var {
        self.push(Value::Owned(t), Op::Leaf, true)
    }

    /// Binds a named parameter without copying it. Trainability follows
    /// `t.requires_grad`; binding the same name twice returns the same node.
    pub fn param(&self, name: &str, t: &'p Tensor) -> Var {
        if let Some(&v) = self.named.borrow().get(name) {
            return v;
        }
        let v = self.push(Value::Borrowed(t), Op::Leaf, t.requires_grad);
        self.named.borrow_mut().insert(name.to_string(), v);
        v
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &*n[v.0].value)
    }

    /// Detached copy of a node's value.
    pub fn tensor(&self, v: Var) -> Tensor {
        self.value(v).detached()
    }

    pub fn shape(&self, v: Var) -> Vec<usize> {
        self.value(v).shape().to_vec()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    fn owned(&self, t: Tensor, op: Op<'p>, inputs: &[Var]) -> Var {
        let rg = self.rg(inputs);
        self.push(Value::Owned(t), op, rg)
    }

    // ---- linear algebra -------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
                return Err(Error::shape("matmul", ta.shape(), tb.shape()));
            }
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            let mut out = vec![0.0; m * n];
            matmul_into(ta.data(), tb.data(), &mut out, m, k, n);
            Tensor::new(vec![m, n], out)?
        };
        Ok(self.owned(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&self, x: Var) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if t.rank() != 2 {
                return Err(Error::invalid("transpose", format!("rank-2 input required, got {:?}", t.shape())));
            }
            let (r, c) = (t.shape()[0], t.shape()[1]);
            Tensor::new(vec![c, r], transpose_data(t.data(), r, c))?
        };
        Ok(self.owned(out, Op::Transpose(x), &[x]))
    }

    pub fn reshape(&self, x: Var, shape: &[usize]) -> Result<Var> {
        let out = self.value(x).reshape(shape.to_vec())?;
        Ok(self.owned(out, Op::Reshape(x), &[x]))
    }

    // ---- elementwise ----------------------------------------------------

    fn binary(&self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(op, ta.shape(), tb.shape()));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn unary(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "add", |x, y| x + y)?;
        Ok(self.owned(out, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "sub", |x, y| x - y)?;
        Ok(self.owned(out, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let out = self.binary(a, b, "mul", |x, y| x * y)?;
        Ok(self.owned(out, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&self, x: Var, c: f64) -> Var {
        let out = self.unary(x, |v| v * c);
        self.owned(out, Op::Scale(x, c), &[x])
    }

    /// Adds a `[d]` bias to every row of a `[...×d]` tensor.
    pub fn add_bias(&self, x: Var, b: Var) -> Result<Var> {
        let out = {
            let (tx, tb) = (self.value(x), self.value(b));
            if tb.rank() != 1 || tx.last_dim() != tb.len() {
                return Err(Error::shape("add_bias", tx.shape(), tb.shape()));
            }
            let d = tb.len();
            let mut data = tx.data().to_vec();
            if d > 0 {
                for row in data.chunks_mut(d) {
                    for (v, bv) in row.iter_mut().zip(tb.data()) {
                        *v += bv;
                    }
                }
            }
            Tensor::new(tx.shape().to_vec(), data)?
        };
        Ok(self.owned(out, Op::AddBias(x, b), &[x, b]))
    }

    pub fn tanh(&self, x: Var) -> Var {
        let out = self.unary(x, f64::tanh);
        self.owned(out, Op::Tanh(x), &[x])
    }

    pub fn sigmoid(&self, x: Var) -> Var {
        let out = self.unary(x, sigmoid);
        self.owned(out, Op::Sigmoid(x), &[x])
    }

    /// `x · sigmoid(x)`.
    pub fn swish(&self, x: Var) -> Var {
        let out = self.unary(x, |v| v * sigmoid(v));
        self.owned(out, Op::Swish(x), &[x])
    }

    // ---- normalisation --------------------------------------------------

    /// Softmax over the last axis restricted to positions where `visible` is
    /// true. Masked slots come out as exactly `0.0`.
    pub fn softmax_masked(&self, x: Var, visible: &[bool]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if visible.len() != t.len() {
                return Err(Error::shape("softmax_masked", t.shape(), &[visible.len()]));
            }
            let l = t.last_dim();
            let mut data = vec![0.0; t.len()];
            if l > 0 {
                for (r, (row, out)) in t.data().chunks(l).zip(data.chunks_mut(l)).enumerate() {
                    let vis = &visible[r * l..(r + 1) * l];
                    // additive -inf mask, then max subtraction
                    let shifted: Vec<f64> = row
                        .iter()
                        .zip(vis)
                        .map(|(&v, &ok)| if ok { v } else { f64::NEG_INFINITY })
                        .collect();
                    let max = shifted.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                    if max == f64::NEG_INFINITY {
                        return Err(Error::InvalidMask { row: r });
                    }
                    let mut sum = 0.0;
                    for (o, &s) in out.iter_mut().zip(&shifted) {
                        *o = (s - max).exp();
                        sum += *o;
                    }
                    for (o, &ok) in out.iter_mut().zip(vis) {
                        *o = if ok { *o / sum } else { 0.0 };
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data)?
        };
        Ok(self.owned(out, Op::SoftmaxMasked(x), &[x]))
    }

    pub fn softmax(&self, x: Var) -> Result<Var> {
        let n = self.value(x).len();
        self.softmax_masked(x, &vec![true; n])
    }

    pub fn log_softmax(&self, x: Var) -> Var {
        let out = {
            let t = self.value(x);
            let l = t.last_dim();
            let mut data = t.data().to_vec();
            if l > 0 {
                for row in data.chunks_mut(l) {
                    let lse = log_sum_exp(row);
                    for v in row.iter_mut() {
                        *v -= lse;
                    }
                }
            }
            Tensor::new(t.shape().to_vec(), data).expect("same shape")
        };
        self.owned(out, Op::LogSoftmax(x), &[x])
    }

    /// Layer normalisation over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm(&self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::invalid("layer_norm", "eps must be positive"));
        }
        let (out, xhat, inv_std) = {
            let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
            let d = tx.last_dim();
            if tg.shape() != [d] || tb.shape() != [d] {
                return Err(Error::shape("layer_norm", tx.shape(), tg.shape()));
            }
            let rows = tx.rows();
            let mut xhat = vec![0.0; tx.len()];
            let mut inv_std = vec![0.0; rows];
            let mut out = vec![0.0; tx.len()];
            for r in 0..rows {
                let row = &tx.data()[r * d..(r + 1) * d];
                let mean = row.iter().sum::<f64>() / d as f64;
                let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                let is = 1.0 / (var + eps).sqrt();
                inv_std[r] = is;
                for j in 0..d {
                    let h = (row[j] - mean) * is;
                    xhat[r * d + j] = h;
                    out[r * d + j] = h * tg.data()[j] + tb.data()[j];
                }
            }
            (Tensor::new(tx.shape().to_vec(), out)?, xhat, inv_std)
        };
        Ok(self.owned(
            out,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
            },
            &[x, gamma, beta],
        ))
    }

    // ---- structural -----------------------------------------------------

    pub fn concat(&self, parts: &[Var], axis: usize) -> Result<Var> {
        let out = {
            let vals: Vec<Ref<'_, Tensor>> = parts.iter().map(|&p| self.value(p)).collect();
            let first = vals
                .first()
                .ok_or_else(|| Error::invalid("concat", "no parts"))?;
            let rank = first.rank();
            if axis >= rank {
                return Err(Error::invalid("concat", format!("axis {axis} out of range for rank {rank}")));
            }
            for v in &vals[1..] {
                let ok = v.rank() == rank
                    && v.shape().iter().zip(first.shape()).enumerate().all(|(i, (a, b))| i == axis || a == b);
                if !ok {
                    return Err(Error::shape("concat", first.shape(), v.shape()));
                }
            }
            let outer: usize = first.shape()[..axis].iter().product();
            let inner: usize = first.shape()[axis + 1..].iter().product();
            let total: usize = vals.iter().map(|v| v.shape()[axis]).sum();
            let mut shape = first.shape().to_vec();
            shape[axis] = total;
            let mut data = Vec::with_capacity(outer * total * inner);
            for o in 0..outer {
                for v in &vals {
                    let chunk = v.shape()[axis] * inner;
                    data.extend_from_slice(&v.data()[o * chunk..(o + 1) * chunk]);
                }
            }
            Tensor::new(shape, data)?
        };
        Ok(self.owned(
            out,
            Op::Concat {
                parts: parts.to_vec(),
                axis,
            },
            parts,
        ))
    }

    /// Positions `start..start+len` along `axis`.
    pub fn slice(&self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if axis >= t.rank() || start + len > t.shape()[axis] {
                return Err(Error::invalid(
                    "slice",
                    format!("range {start}..{} on axis {axis} of {:?}", start + len, t.shape()),
                ));
            }
            let outer: usize = t.shape()[..axis].iter().product();
            let inner: usize = t.shape()[axis + 1..].iter().product();
            let ext = t.shape()[axis];
            let mut data = Vec::with_capacity(outer * len * inner);
            for o in 0..outer {
                let base = (o * ext + start) * inner;
                data.extend_from_slice(&t.data()[base..base + len * inner]);
            }
            let mut shape = t.shape().to_vec();
            shape[axis] = len;
            Tensor::new(shape, data)?
        };
        Ok(self.owned(out, Op::Slice { x, axis, start }, &[x]))
    }

    /// Depthwise 1-D convolution over time with left padding of `K-1`
    /// frames: `y[t,c] = Σ_k w[k,c]·x[t-(K-1)+k, c]`. Input `[T×C]`, kernel `[K×C]`.
    pub fn causal_depthwise_conv(&self, x: Var, w: Var) -> Result<Var> {
        let out = {
            let (tx, tw) = (self.value(x), self.value(w));
            if tx.rank() != 2 || tw.rank() != 2 || tx.shape()[1] != tw.shape()[1] {
                return Err(Error::shape("causal_depthwise_conv", tx.shape(), tw.shape()));
            }
            let (t_len, c) = (tx.shape()[0], tx.shape()[1]);
            let k_len = tw.shape()[0];
            let mut out = vec![0.0; t_len * c];
            for t in 0..t_len {
                for k in 0..k_len {
                    let Some(src) = (t + k).checked_sub(k_len - 1) else {
                        continue;
                    };
                    for ch in 0..c {
                        out[t * c + ch] += tw.data()[k * c + ch] * tx.data()[src * c + ch];
                    }
                }
            }
            Tensor::new(vec![t_len, c], out)?
        };
        Ok(self.owned(out, Op::CausalDepthwiseConv { x, w }, &[x, w]))
    }

    /// Rows of `table` selected by `ids`.
    pub fn embedding(&self, table: Var, ids: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(table);
            if t.rank() != 2 {
                return Err(Error::invalid("embedding", "table must be rank 2"));
            }
            let (v, d) = (t.shape()[0], t.shape()[1]);
            let mut data = Vec::with_capacity(ids.len() * d);
            for &id in ids {
                if id >= v {
                    return Err(Error::OutOfVocabulary { id, size: v });
                }
                data.extend_from_slice(t.row(id));
            }
            Tensor::new(vec![ids.len(), d], data)?
        };
        Ok(self.owned(
            out,
            Op::Embedding {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Flat gather: `out[i] = x.data[idx[i]]`, shape `[idx.len()]`.
    pub fn gather(&self, x: Var, idx: &[usize]) -> Result<Var> {
        let out = {
            let t = self.value(x);
            if let Some(&bad) = idx.iter().find(|&&i| i >= t.len()) {
                return Err(Error::invalid("gather", format!("index {bad} out of range {}", t.len())));
            }
            Tensor::vector(idx.iter().map(|&i| t.data()[i]).collect())
        };
        Ok(self.owned(out, Op::Gather { x, idx: idx.to_vec() }, &[x]))
    }

    pub fn sum(&self, x: Var) -> Var {
        let out = Tensor::scalar(self.value(x).data().iter().sum());
        self.owned(out, Op::Sum(x), &[x])
    }

    /// `[m×d] ⊞ [n×d] → [(m·n)×d]`, row `i·n+j` is `a_i + b_j`.
    pub fn outer_add_rows(&self, a: Var, b: Var) -> Result<Var> {
        let out = {
            let (ta, tb) = (self.value(a), self.value(b));
            if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
                return Err(Error::shape("outer_add_rows", ta.shape(), tb.shape()));
            }
            let (m, n, d) = (ta.shape()[0], tb.shape()[0], ta.shape()[1]);
            let mut data = Vec::with_capacity(m * n * d);
            for i in 0..m {
                for j in 0..n {
                    data.extend(ta.row(i).iter().zip(tb.row(j)).map(|(x, y)| x + y));
                }
            }
            Tensor::new(vec![m * n, d], data)?
        };
        Ok(self.owned(out, Op::OuterAddRows(a, b), &[a, b]))
    }

    /// Records an op whose forward value was computed by the caller. `vjp`
    /// is only invoked on backward and only when some input needs a gradient.
    pub fn custom(&self, inputs: &[Var], value: Tensor, vjp: CustomVjp<'p>) -> Var {
        self.owned(
            value,
            Op::Custom {
                inputs: inputs.to_vec(),
                vjp,
            },
            inputs,
        )
    }

    // ---- backward -------------------------------------------------------

    /// Reverse sweep from a scalar `loss`. Gradients of nodes that are used
    /// several times accumulate.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        let loss_shape = nodes[loss.0].value.shape().to_vec();
        if nodes[loss.0].value.len() != 1 {
            return Err(Error::NonScalarLoss(loss_shape));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; nodes.len()];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let node = &nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads);
            grads[i] = Some(g);
        }

        let named = self
            .named
            .borrow()
            .iter()
            .filter(|(_, v)| nodes[v.0].requires_grad)
            .map(|(n, &v)| (n.clone(), v))
            .collect();
        Ok(Gradients { grads, named })
    }
}

/// Result of [`Graph::backward`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
    named: Vec<(String, Var)>,
}

impl Gradients {
    /// Gradient of the loss with respect to `v`, if `v` requires one and is
    /// reachable from the loss.
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradients of named (trainable) parameters, sorted by name.
    pub fn named(&self) -> Vec<(&str, &[f64])> {
        let mut out: Vec<(&str, &[f64])> = self
            .named
            .iter()
            .filter_map(|(n, v)| self.get(*v).map(|g| (n.as_str(), g)))
            .collect();
        out.sort_by(|a, b| a.0.cmp(b.0));
        out
    }

    pub fn param(&self, name: &str) -> Option<&[f64]> {
        self.named
            .iter()
            .find(|(n, _)| n == name)
            .and_then(|(_, v)| self.get(*v))
    }
}

fn slot<'a>(nodes: &[Node<'_>], grads: &'a mut [Option<Vec<f64>>], v: Var) -> Option<&'a mut Vec<f64>> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.value.len();
    Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
}

fn backprop_node(nodes: &[Node<'_>], node: &Node<'_>, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    let out = &*node.value;
    match &node.op {
        Op::Leaf => {}
        Op::MatMul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
            if let Some(ga) = slot(nodes, grads, *a) {
                // dA = dC · Bᵀ
                for i in 0..m {
                    for p in 0..k {
                        let brow = &tb.data()[p * n..(p + 1) * n];
                        let grow = &g[i * n..(i + 1) * n];
                        ga[i * k + p] += dot(grow, brow);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                // dB = Aᵀ · dC
                for i in 0..m {
                    let grow = &g[i * n..(i + 1) * n];
                    for p in 0..k {
                        let a_ip = ta.data()[i * k + p];
                        for (dst, &gv) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                            *dst += a_ip * gv;
                        }
                    }
                }
            }
        }
        Op::Transpose(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let (r, c) = (val(*x).shape()[0], val(*x).shape()[1]);
                let back = transpose_data(g, c, r);
                add_assign(gx, &back);
            }
        }
        Op::Reshape(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                add_assign(gx, g);
            }
        }
        Op::Add(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_assign(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                add_assign(gb, g);
            }
        }
        Op::Sub(a, b) => {
            if let Some(ga) = slot(nodes, grads, *a) {
                add_assign(ga, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for (d, s) in gb.iter_mut().zip(g) {
                    *d -= s;
                }
            }
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if let Some(ga) = slot(nodes, grads, *a) {
                for ((d, s), y) in ga.iter_mut().zip(g).zip(tb.data()) {
                    *d += s * y;
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for ((d, s), x) in gb.iter_mut().zip(g).zip(ta.data()) {
                    *d += s * x;
                }
            }
        }
        Op::Scale(x, c) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (d, s) in gx.iter_mut().zip(g) {
                    *d += s * c;
                }
            }
        }
        Op::AddBias(x, b) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                add_assign(gx, g);
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                let d = gb.len();
                if d > 0 {
                    for row in g.chunks(d) {
                        add_assign(gb, row);
                    }
                }
            }
        }
        Op::Tanh(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += s * (1.0 - y * y);
                }
            }
        }
        Op::Sigmoid(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, s), y) in gx.iter_mut().zip(g).zip(out.data()) {
                    *d += s * y * (1.0 - y);
                }
            }
        }
        Op::Swish(x) => {
            let tx = val(*x);
            if let Some(gx) = slot(nodes, grads, *x) {
                for ((d, s), &v) in gx.iter_mut().zip(g).zip(tx.data()) {
                    let sg = sigmoid(v);
                    *d += s * (sg + v * sg * (1.0 - sg));
                }
            }
        }
        Op::SoftmaxMasked(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let l = out.last_dim();
                if l > 0 {
                    for ((dst, y), gy) in gx.chunks_mut(l).zip(out.data().chunks(l)).zip(g.chunks(l)) {
                        let inner = dot(y, gy);
                        for j in 0..l {
                            dst[j] += y[j] * (gy[j] - inner);
                        }
                    }
                }
            }
        }
        Op::LogSoftmax(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let l = out.last_dim();
                if l > 0 {
                    for ((dst, y), gy) in gx.chunks_mut(l).zip(out.data().chunks(l)).zip(g.chunks(l)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..l {
                            dst[j] += gy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gamma,
            beta,
            xhat,
            inv_std,
        } => {
            let tg = val(*gamma);
            let d = tg.len();
            if d == 0 {
                return;
            }
            if let Some(gg) = slot(nodes, grads, *gamma) {
                for (gy, h) in g.chunks(d).zip(xhat.chunks(d)) {
                    for j in 0..d {
                        gg[j] += gy[j] * h[j];
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *beta) {
                for gy in g.chunks(d) {
                    add_assign(gb, gy);
                }
            }
            if let Some(gx) = slot(nodes, grads, *x) {
                let n = d as f64;
                for (r, ((dst, gy), h)) in gx.chunks_mut(d).zip(g.chunks(d)).zip(xhat.chunks(d)).enumerate() {
                    let dh: Vec<f64> = gy.iter().zip(tg.data()).map(|(a, b)| a * b).collect();
                    let sum_dh: f64 = dh.iter().sum();
                    let sum_dh_h = dot(&dh, h);
                    for j in 0..d {
                        dst[j] += inv_std[r] / n * (n * dh[j] - sum_dh - h[j] * sum_dh_h);
                    }
                }
            }
        }
        Op::Concat { parts, axis } => {
            let shape = out.shape();
            let outer: usize = shape[..*axis].iter().product();
            let inner: usize = shape[axis + 1..].iter().product();
            let total = shape[*axis];
            let mut offset = 0;
            for p in parts {
                let ext = val(*p).shape()[*axis];
                if let Some(gp) = slot(nodes, grads, *p) {
                    for o in 0..outer {
                        let src = (o * total + offset) * inner;
                        let dst = o * ext * inner;
                        add_assign(&mut gp[dst..dst + ext * inner], &g[src..src + ext * inner]);
                    }
                }
                offset += ext;
            }
        }
        Op::Slice { x, axis, start } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                let in_shape = val(*x).shape();
                let outer: usize = in_shape[..*axis].iter().product();
                let inner: usize = in_shape[axis + 1..].iter().product();
                let ext = in_shape[*axis];
                let len = out.shape()[*axis];
                for o in 0..outer {
                    let dst = (o * ext + start) * inner;
                    let src = o * len * inner;
                    add_assign(&mut gx[dst..dst + len * inner], &g[src..src + len * inner]);
                }
            }
        }
        Op::CausalDepthwiseConv { x, w } => {
            let (tx, tw) = (val(*x), val(*w));
            let (t_len, c) = (tx.shape()[0], tx.shape()[1]);
            let k_len = tw.shape()[0];
            if let Some(gx) = slot(nodes, grads, *x) {
                for t in 0..t_len {
                    for k in 0..k_len {
                        let Some(src) = (t + k).checked_sub(k_len - 1) else { continue };
                        for ch in 0..c {
                            gx[src * c + ch] += tw.data()[k * c + ch] * g[t * c + ch];
                        }
                    }
                }
            }
            if let Some(gw) = slot(nodes, grads, *w) {
                for t in 0..t_len {
                    for k in 0..k_len {
                        let Some(src) = (t + k).checked_sub(k_len - 1) else { continue };
                        for ch in 0..c {
                            gw[k * c + ch] += tx.data()[src * c + ch] * g[t * c + ch];
                        }
                    }
                }
            }
        }
        Op::Embedding { table, ids } => {
            if let Some(gt) = slot(nodes, grads, *table) {
                let d = val(*table).shape()[1];
                for (r, &id) in ids.iter().enumerate() {
                    add_assign(&mut gt[id * d..(id + 1) * d], &g[r * d..(r + 1) * d]);
                }
            }
        }
        Op::Gather { x, idx } => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for (&i, &gv) in idx.iter().zip(g) {
                    gx[i] += gv;
                }
            }
        }
        Op::Sum(x) => {
            if let Some(gx) = slot(nodes, grads, *x) {
                for d in gx.iter_mut() {
                    *d += g[0];
                }
            }
        }
        Op::OuterAddRows(a, b) => {
            let (m, d) = (val(*a).shape()[0], val(*a).shape()[1]);
            let n = val(*b).shape()[0];
            if let Some(ga) = slot(nodes, grads, *a) {
                for i in 0..m {
                    for j in 0..n {
                        let r = i * n + j;
                        add_assign(&mut ga[i * d..(i + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
            if let Some(gb) = slot(nodes, grads, *b) {
                for i in 0..m {
                    for j in 0..n {
                        let r = i * n + j;
                        add_assign(&mut gb[j * d..(j + 1) * d], &g[r * d..(r + 1) * d]);
                    }
                }
            }
        }
        Op::Custom { inputs, vjp } => {
            let parts = vjp(g);
            for (v, part) in inputs.iter().zip(parts) {
                if let Some(gv) = slot(nodes, grads, *v) {
                    add_assign(gv, &part);
                }
            }
        }
    }
}

pub(crate) fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

/// `log Σ exp(x_i)` with max subtraction. Empty input gives `-∞`.
pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let max = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == f64::NEG_INFINITY {
        return f64::NEG_INFINITY;
    }
    max + xs.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

/// Numerically stable `log(exp(a) + exp(b))`.
pub fn log_add(a: f64, b: f64) -> f64 {
    if a == f64::NEG_INFINITY {
        return b;
    }
    if b == f64::NEG_INFINITY {
        return a;
    }
    let (hi, lo) = if a > b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn add_assign(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

fn transpose_data(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

fn matmul_into(a: &[f64], b: &[f64], out: &mut [f64], m: usize, k: usize, n: usize) {
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let a_ip = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += a_ip * bv;
            }
        }
    }
}

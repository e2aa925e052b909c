//! Reverse-mode automatic differentiation over matrix-valued nodes.
//!
//! Nodes are appended in evaluation order, so the tape is topologically
//! sorted by construction and [`Tape::backward`] is a single reverse sweep.
//! Elementwise binary ops accept equal shapes or a `1x1` operand on either
//! side (broadcast).

use super::lstm::{self, LstmCache, LstmShape};
use super::tensor::{gemm, Tensor};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct NodeId(usize);

impl NodeId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(NodeId, NodeId),
    Sub(NodeId, NodeId),
    Mul(NodeId, NodeId),
    Div(NodeId, NodeId),
    /// `a (r x c) + bias (1 x c)` on every row.
    AddRow(NodeId, NodeId),
    MatMul(NodeId, NodeId),
    Sigmoid(NodeId),
    Tanh(NodeId),
    Exp(NodeId),
    Log(NodeId),
    /// `max(a, 0)`, subgradient 0 at the kink.
    Relu(NodeId),
    Powf(NodeId, f64),
    Scale(NodeId, f64),
    AddScalar(NodeId),
    Sum(NodeId),
    SoftmaxRows(NodeId),
    Col(NodeId, usize),
    Gather(NodeId, Vec<usize>),
    Lstm {
        shape: LstmShape,
        x: Vec<f64>,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
        cache: LstmCache,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints indexed by node.
#[derive(Debug)]
pub struct Grads {
    adj: Vec<Option<Tensor>>,
}

impl Grads {
    /// Gradient for `id`; `None` when the loss does not depend on it.
    pub fn get(&self, id: NodeId) -> Option<&Tensor> {
        self.adj.get(id.0).and_then(|a| a.as_ref())
    }

    pub fn take(&mut self, id: NodeId) -> Option<Tensor> {
        self.adj.get_mut(id.0).and_then(|a| a.take())
    }
}

fn broadcast_shape(a: &Tensor, b: &Tensor) -> (usize, usize) {
    if a.shape() == b.shape() || b.len() == 1 {
        a.shape()
    } else if a.len() == 1 {
        b.shape()
    } else {
        panic!("shape mismatch {:?} vs {:?}", a.shape(), b.shape());
    }
}

#[inline]
fn at(t: &Tensor, i: usize) -> f64 {
    if t.data.len() == 1 {
        t.data[0]
    } else {
        t.data[i]
    }
}

/// Accumulate `g` into an adjoint of shape `target`, summing when the
/// operand was broadcast from `1x1`.
fn reduce_to(target: (usize, usize), g: Tensor) -> Tensor {
    if g.shape() == target {
        g
    } else {
        Tensor::scalar(g.data.iter().sum())
    }
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drop every node so the tape can be reused.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, value: Tensor, op: Op) -> NodeId {
        self.nodes.push(Node { value, op });
        NodeId(self.nodes.len() - 1)
    }

    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Input or parameter.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf)
    }

    pub fn constant_column(&mut self, values: Vec<f64>) -> NodeId {
        self.leaf(Tensor::column(values))
    }

    fn zip(&mut self, a: NodeId, b: NodeId, f: impl Fn(f64, f64) -> f64, op: Op) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let (r, c) = broadcast_shape(va, vb);
        let data = (0..r * c).map(|i| f(at(va, i), at(vb, i))).collect();
        self.push(Tensor::from_vec(r, c, data), op)
    }

    fn map(&mut self, a: NodeId, f: impl Fn(f64) -> f64, op: Op) -> NodeId {
        let v = &self.nodes[a.0].value;
        let out = Tensor::from_vec(v.rows, v.cols, v.data.iter().map(|x| f(*x)).collect());
        self.push(out, op)
    }

    pub fn add(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x * y, Op::Mul(a, b))
    }

    pub fn div(&mut self, a: NodeId, b: NodeId) -> NodeId {
        self.zip(a, b, |x, y| x / y, Op::Div(a, b))
    }

    pub fn add_row(&mut self, a: NodeId, bias: NodeId) -> NodeId {
        let (va, vb) = (&self.nodes[a.0].value, &self.nodes[bias.0].value);
        assert_eq!((1, va.cols), vb.shape(), "bias shape");
        let mut out = va.clone();
        for row in out.data.chunks_exact_mut(va.cols) {
            for (x, b) in row.iter_mut().zip(&vb.data) {
                *x += b;
            }
        }
        self.push(out, Op::AddRow(a, bias))
    }

    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> NodeId {
        let out = super::tensor::matmul(&self.nodes[a.0].value, &self.nodes[b.0].value);
        self.push(out, Op::MatMul(a, b))
    }

    pub fn sigmoid(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| 1.0 / (1.0 + (-x).exp()), Op::Sigmoid(a))
    }

    pub fn tanh(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::exp, Op::Exp(a))
    }

    pub fn log(&mut self, a: NodeId) -> NodeId {
        self.map(a, f64::ln, Op::Log(a))
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn powf(&mut self, a: NodeId, p: f64) -> NodeId {
        self.map(a, |x| x.powf(p), Op::Powf(a, p))
    }

    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a)
    }

    pub fn scale(&mut self, a: NodeId, k: f64) -> NodeId {
        self.map(a, |x| k * x, Op::Scale(a, k))
    }

    pub fn neg(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    pub fn add_scalar(&mut self, a: NodeId, k: f64) -> NodeId {
        self.map(a, |x| x + k, Op::AddScalar(a))
    }

    /// Sum of all entries, `1x1`.
    pub fn sum(&mut self, a: NodeId) -> NodeId {
        let s = self.nodes[a.0].value.data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a))
    }

    pub fn softmax_rows(&mut self, a: NodeId) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut out = v.clone();
        for row in out.data.chunks_exact_mut(v.cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for x in row.iter_mut() {
                *x = (*x - m).exp();
                z += *x;
            }
            for x in row.iter_mut() {
                *x /= z;
            }
        }
        self.push(out, Op::SoftmaxRows(a))
    }

    /// Column `j` as an `r x 1` node.
    pub fn col(&mut self, a: NodeId, j: usize) -> NodeId {
        let v = &self.nodes[a.0].value;
        let data = (0..v.rows).map(|r| v.get(r, j)).collect();
        self.push(Tensor::column(data), Op::Col(a, j))
    }

    /// Rows `idx` of `a`, in that order.
    pub fn gather(&mut self, a: NodeId, idx: Vec<usize>) -> NodeId {
        let v = &self.nodes[a.0].value;
        let mut data = Vec::with_capacity(idx.len() * v.cols);
        for &r in &idx {
            data.extend_from_slice(&v.data[r * v.cols..(r + 1) * v.cols]);
        }
        let out = Tensor::from_vec(idx.len(), v.cols, data);
        self.push(out, Op::Gather(a, idx))
    }

    /// Fused LSTM over a step-major input; returns the final hidden state.
    pub fn lstm(
        &mut self,
        x: Vec<f64>,
        batch: usize,
        steps: usize,
        w_ih: NodeId,
        w_hh: NodeId,
        bias: NodeId,
    ) -> NodeId {
        let (wi, wh, b) = (
            &self.nodes[w_ih.0].value,
            &self.nodes[w_hh.0].value,
            &self.nodes[bias.0].value,
        );
        let shape = LstmShape {
            batch,
            steps,
            input: wi.rows,
            hidden: wh.rows,
        };
        let mut cache = LstmCache::default();
        let h = lstm::forward(&shape, &x, &wi.data, &wh.data, &b.data, Some(&mut cache));
        let out = Tensor::from_vec(batch, shape.hidden, h);
        self.push(
            out,
            Op::Lstm {
                shape,
                x,
                w_ih,
                w_hh,
                bias,
                cache,
            },
        )
    }

    /// Reverse sweep from a `1x1` node.
    pub fn backward(&self, loss: NodeId) -> Grads {
        assert_eq!(
            self.nodes[loss.0].value.len(),
            1,
            "backward needs a scalar loss"
        );
        let mut adj: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        adj[loss.0] = Some(Tensor::scalar(1.0));

        fn acc(adj: &mut [Option<Tensor>], id: NodeId, g: Tensor) {
            match &mut adj[id.0] {
                Some(t) => t.add_assign(&g),
                slot => *slot = Some(g),
            }
        }

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            let node = &self.nodes[i];
            let val = |id: NodeId| &self.nodes[id.0].value;
            let elementwise = |id: NodeId, f: &dyn Fn(usize) -> f64| {
                let (r, c) = node.value.shape();
                let t = Tensor::from_vec(r, c, (0..r * c).map(f).collect());
                reduce_to(val(id).shape(), t)
            };
            match &node.op {
                Op::Leaf => {
                    adj[i] = Some(g);
                    continue;
                }
                Op::Add(a, b) => {
                    let ga = elementwise(*a, &|k| g.data[k]);
                    let gb = elementwise(*b, &|k| g.data[k]);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Sub(a, b) => {
                    let ga = elementwise(*a, &|k| g.data[k]);
                    let gb = elementwise(*b, &|k| -g.data[k]);
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Mul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = elementwise(*a, &|k| g.data[k] * at(vb, k));
                    let gb = elementwise(*b, &|k| g.data[k] * at(va, k));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Div(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let ga = elementwise(*a, &|k| g.data[k] / at(vb, k));
                    let gb = elementwise(*b, &|k| -g.data[k] * at(va, k) / (at(vb, k) * at(vb, k)));
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::AddRow(a, bias) => {
                    let cols = g.cols;
                    let mut gb = Tensor::zeros(1, cols);
                    for row in g.data.chunks_exact(cols) {
                        for (s, x) in gb.data.iter_mut().zip(row) {
                            *s += x;
                        }
                    }
                    acc(&mut adj, *bias, gb);
                    acc(&mut adj, *a, g);
                }
                Op::MatMul(a, b) => {
                    let (va, vb) = (val(*a), val(*b));
                    let mut ga = Tensor::zeros(va.rows, va.cols);
                    gemm(
                        va.rows,
                        g.cols,
                        va.cols,
                        1.0,
                        &g.data,
                        false,
                        &vb.data,
                        true,
                        0.0,
                        &mut ga.data,
                    );
                    let mut gb = Tensor::zeros(vb.rows, vb.cols);
                    gemm(
                        vb.rows,
                        va.rows,
                        vb.cols,
                        1.0,
                        &va.data,
                        true,
                        &g.data,
                        false,
                        0.0,
                        &mut gb.data,
                    );
                    acc(&mut adj, *a, ga);
                    acc(&mut adj, *b, gb);
                }
                Op::Sigmoid(a) => {
                    let y = &node.value;
                    let ga = elementwise(*a, &|k| g.data[k] * y.data[k] * (1.0 - y.data[k]));
                    acc(&mut adj, *a, ga);
                }
                Op::Tanh(a) => {
                    let y = &node.value;
                    let ga = elementwise(*a, &|k| g.data[k] * (1.0 - y.data[k] * y.data[k]));
                    acc(&mut adj, *a, ga);
                }
                Op::Exp(a) => {
                    let y = &node.value;
                    let ga = elementwise(*a, &|k| g.data[k] * y.data[k]);
                    acc(&mut adj, *a, ga);
                }
                Op::Log(a) => {
                    let x = val(*a);
                    let ga = elementwise(*a, &|k| g.data[k] / x.data[k]);
                    acc(&mut adj, *a, ga);
                }
                Op::Relu(a) => {
                    let x = val(*a);
                    let ga = elementwise(*a, &|k| if x.data[k] > 0.0 { g.data[k] } else { 0.0 });
                    acc(&mut adj, *a, ga);
                }
                Op::Powf(a, p) => {
                    let x = val(*a);
                    let ga = elementwise(*a, &|k| g.data[k] * p * x.data[k].powf(p - 1.0));
                    acc(&mut adj, *a, ga);
                }
                Op::Scale(a, s) => {
                    let ga = elementwise(*a, &|k| g.data[k] * s);
                    acc(&mut adj, *a, ga);
                }
                Op::AddScalar(a) => acc(&mut adj, *a, g),
                Op::Sum(a) => {
                    let v = val(*a);
                    acc(&mut adj, *a, Tensor::filled(v.rows, v.cols, g.data[0]));
                }
                Op::SoftmaxRows(a) => {
                    let y = &node.value;
                    let cols = y.cols;
                    let mut ga = Tensor::zeros(y.rows, cols);
                    for r in 0..y.rows {
                        let yr = &y.data[r * cols..(r + 1) * cols];
                        let gr = &g.data[r * cols..(r + 1) * cols];
                        let dot: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for j in 0..cols {
                            ga.data[r * cols + j] = yr[j] * (gr[j] - dot);
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Col(a, j) => {
                    let v = val(*a);
                    let mut ga = Tensor::zeros(v.rows, v.cols);
                    for r in 0..v.rows {
                        ga.data[r * v.cols + j] = g.data[r];
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Gather(a, idx) => {
                    let v = val(*a);
                    let mut ga = Tensor::zeros(v.rows, v.cols);
                    for (k, &r) in idx.iter().enumerate() {
                        for c in 0..v.cols {
                            ga.data[r * v.cols + c] += g.data[k * v.cols + c];
                        }
                    }
                    acc(&mut adj, *a, ga);
                }
                Op::Lstm {
                    shape,
                    x,
                    w_ih,
                    w_hh,
                    bias,
                    cache,
                } => {
                    let grads = lstm::backward(shape, x, &val(*w_hh).data, cache, &g.data);
                    let (wi, wh, b) = (val(*w_ih), val(*w_hh), val(*bias));
                    acc(
                        &mut adj,
                        *w_ih,
                        Tensor::from_vec(wi.rows, wi.cols, grads.w_ih),
                    );
                    acc(
                        &mut adj,
                        *w_hh,
                        Tensor::from_vec(wh.rows, wh.cols, grads.w_hh),
                    );
                    acc(
                        &mut adj,
                        *bias,
                        Tensor::from_vec(b.rows, b.cols, grads.bias),
                    );
                }
            }
        }
        Grads { adj }
    }
}

//! Define-by-run computation graph with reverse-mode differentiation.
//!
//! A [`Graph`] is rebuilt for every forward pass. Operations append nodes in
//! execution order, so node indices are already a topological order and the
//! backward sweep simply walks them in reverse.
//!
//! Shape mismatches inside an operation are programming errors and panic.
//! Non-finite values do not panic: the first offending node is remembered and
//! reported by [`Graph::backward`] or [`Graph::check_finite`].

use super::kernels::{col2im, gemm_nn, gemm_nt, gemm_tn, im2col, ConvGeometry};
use super::tensor::{DiffTensor, ParamSet, Tensor};
use crate::error::{Error, Result};

/// Handle to a node of a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddScalar(Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    MatMul(Var, Var),
    BatchMatMul { a: Var, b: Var, trans_b: bool },
    Conv2d {
        input: Var,
        weight: Var,
        bias: Var,
        geom: ConvGeometry,
        cols: Vec<f64>,
    },
    Relu(Var),
    Tanh(Var),
    Exp(Var),
    Abs(Var),
    Square(Var),
    Softmax(Var),
    LogSoftmax(Var),
    Sum(Var),
    Mean(Var),
    Clip { x: Var, lo: f64, hi: f64 },
    Minimum(Var, Var),
    Gather { x: Var, indices: Vec<usize> },
    Reshape(Var),
    TransposeLast2(Var),
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddScalar(..) => "add_scalar",
            Op::Scale(..) => "scale",
            Op::AddBias(..) => "add_bias",
            Op::MatMul(..) => "matmul",
            Op::BatchMatMul { .. } => "batch_matmul",
            Op::Conv2d { .. } => "conv2d",
            Op::Relu(..) => "relu",
            Op::Tanh(..) => "tanh",
            Op::Exp(..) => "exp",
            Op::Abs(..) => "abs",
            Op::Square(..) => "square",
            Op::Softmax(..) => "softmax",
            Op::LogSoftmax(..) => "log_softmax",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
            Op::Clip { .. } => "clip",
            Op::Minimum(..) => "minimum",
            Op::Gather { .. } => "gather",
            Op::Reshape(..) => "reshape",
            Op::TransposeLast2(..) => "transpose",
        }
    }
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    first_nonfinite: Option<(usize, &'static str)>,
}

/// Gradients produced by [`Graph::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&[f64]> {
        self.grads.get(var.0).and_then(|g| g.as_deref())
    }

    /// Writes the gradient of each bound variable into the matching parameter.
    /// Parameters that did not take part in the loss receive a zero gradient.
    pub fn assign(&self, params: &mut ParamSet, vars: &[Var]) {
        assert_eq!(params.len(), vars.len(), "binding length mismatch");
        for (i, &v) in vars.iter().enumerate() {
            let p = params.get_mut(i);
            if !p.requires_grad {
                continue;
            }
            let g = match self.get(v) {
                Some(g) => g.to_vec(),
                None => vec![0.0; p.value.len()],
            };
            p.grad = Some(g);
        }
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let requires_grad = match &op {
            Op::Leaf => false,
            _ => self.inputs_require_grad(&op),
        };
        self.push_node(value, op, requires_grad)
    }

    fn push_node(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        let idx = self.nodes.len();
        if self.first_nonfinite.is_none() && !value.is_finite() {
            self.first_nonfinite = Some((idx, op.name()));
        }
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(idx)
    }

    fn inputs_require_grad(&self, op: &Op) -> bool {
        let rg = |v: &Var| self.nodes[v.0].requires_grad;
        match op {
            Op::Leaf => false,
            Op::Add(a, b) | Op::Sub(a, b) | Op::Mul(a, b) | Op::MatMul(a, b) => rg(a) || rg(b),
            Op::AddBias(a, b) | Op::Minimum(a, b) => rg(a) || rg(b),
            Op::BatchMatMul { a, b, .. } => rg(a) || rg(b),
            Op::Conv2d {
                input,
                weight,
                bias,
                ..
            } => rg(input) || rg(weight) || rg(bias),
            Op::AddScalar(x)
            | Op::Scale(x, _)
            | Op::Relu(x)
            | Op::Tanh(x)
            | Op::Exp(x)
            | Op::Abs(x)
            | Op::Square(x)
            | Op::Softmax(x)
            | Op::LogSoftmax(x)
            | Op::Sum(x)
            | Op::Mean(x)
            | Op::Reshape(x)
            | Op::TransposeLast2(x) => rg(x),
            Op::Clip { x, .. } | Op::Gather { x, .. } => rg(x),
        }
    }

    /// Index and operation name of the first node holding a non-finite value.
    pub fn first_nonfinite(&self) -> Option<(usize, &'static str)> {
        self.first_nonfinite
    }

    pub fn check_finite(&self) -> Result<()> {
        match self.first_nonfinite {
            Some((node, op)) => Err(Error::Numeric { node, op }),
            None => Ok(()),
        }
    }

    // ---- leaves -------------------------------------------------------------

    /// Inserts a parameter. Gradients flow to it iff `requires_grad` is set.
    pub fn param(&mut self, p: &DiffTensor) -> Var {
        self.push_node(p.value.clone(), Op::Leaf, p.requires_grad)
    }

    /// Inserts a value that never receives gradients.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, false)
    }

    /// Inserts a value that receives gradients, without a backing parameter.
    pub fn variable(&mut self, t: Tensor) -> Var {
        self.push_node(t, Op::Leaf, true)
    }

    /// Inserts every parameter of `params`; with `frozen` set, none of them
    /// take gradients regardless of their own flags.
    pub fn bind(&mut self, params: &ParamSet, frozen: bool) -> Vec<Var> {
        params
            .tensors()
            .iter()
            .map(|p| {
                self.push_node(p.value.clone(), Op::Leaf, p.requires_grad && !frozen)
            })
            .collect()
    }

    /// Copy of `v` cut off from the graph.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = self.value(v).clone();
        self.constant(t)
    }

    // ---- elementwise ------------------------------------------------------------

    fn same_shape(&self, a: Var, b: Var, op: &str) {
        assert_eq!(
            self.shape(a),
            self.shape(b),
            "{op}: operand shapes differ"
        );
    }

    fn zip_map(&self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Tensor {
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::from_parts(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        Tensor::from_parts(t.shape().to_vec(), t.data().iter().map(|&v| f(v)).collect())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "add");
        let t = self.zip_map(a, b, |x, y| x + y);
        self.push(t, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "sub");
        let t = self.zip_map(a, b, |x, y| x - y);
        self.push(t, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "mul");
        let t = self.zip_map(a, b, |x, y| x * y);
        self.push(t, Op::Mul(a, b))
    }

    pub fn minimum(&mut self, a: Var, b: Var) -> Var {
        self.same_shape(a, b, "minimum");
        let t = self.zip_map(a, b, f64::min);
        self.push(t, Op::Minimum(a, b))
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v + c);
        self.push(t, Op::AddScalar(x))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let t = self.map(x, |v| v * c);
        self.push(t, Op::Scale(x, c))
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v.max(0.0));
        self.push(t, Op::Relu(x))
    }

    pub fn tanh(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::tanh);
        self.push(t, Op::Tanh(x))
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::exp);
        self.push(t, Op::Exp(x))
    }

    pub fn abs(&mut self, x: Var) -> Var {
        let t = self.map(x, f64::abs);
        self.push(t, Op::Abs(x))
    }

    pub fn square(&mut self, x: Var) -> Var {
        let t = self.map(x, |v| v * v);
        self.push(t, Op::Square(x))
    }

    pub fn clip(&mut self, x: Var, lo: f64, hi: f64) -> Var {
        assert!(lo <= hi, "clip: lo > hi");
        let t = self.map(x, |v| v.clamp(lo, hi));
        self.push(t, Op::Clip { x, lo, hi })
    }

    /// Adds a bias vector along the last axis.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let n = *self.shape(x).last().expect("add_bias: rank-0 input");
        assert_eq!(self.shape(bias), [n], "add_bias: bias length");
        let b = self.value(bias).data().to_vec();
        let tx = self.value(x);
        let mut data = tx.data().to_vec();
        for row in data.chunks_mut(n) {
            add_into(row, &b);
        }
        let t = Tensor::from_parts(tx.shape().to_vec(), data);
        self.push(t, Op::AddBias(x, bias))
    }

    // ---- linear algebra ---------------------------------------------------------

    /// `(m, k) x (k, n) -> (m, n)`
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (sa, sb) = (self.shape(a), self.shape(b));
        assert!(sa.len() == 2 && sb.len() == 2, "matmul: rank-2 operands");
        let (m, k, n) = (sa[0], sa[1], sb[1]);
        assert_eq!(sb[0], k, "matmul: inner dimensions");
        let mut c = vec![0.0; m * n];
        gemm_nn(self.value(a).data(), self.value(b).data(), &mut c, m, k, n);
        self.push(Tensor::from_parts(vec![m, n], c), Op::MatMul(a, b))
    }

    /// `(B, m, k) x (B, k, n) -> (B, m, n)`, or with `trans_b`
    /// `(B, m, k) x (B, n, k)^T -> (B, m, n)`.
    pub fn batch_matmul(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let (sa, sb) = (self.shape(a).to_vec(), self.shape(b).to_vec());
        assert!(sa.len() == 3 && sb.len() == 3, "batch_matmul: rank-3 operands");
        assert_eq!(sa[0], sb[0], "batch_matmul: batch sizes");
        let (batch, m, k) = (sa[0], sa[1], sa[2]);
        let n = if trans_b {
            assert_eq!(sb[2], k, "batch_matmul: inner dimensions");
            sb[1]
        } else {
            assert_eq!(sb[1], k, "batch_matmul: inner dimensions");
            sb[2]
        };
        let (da, db) = (self.value(a).data(), self.value(b).data());
        let mut c = vec![0.0; batch * m * n];
        for i in 0..batch {
            let ai = &da[i * m * k..(i + 1) * m * k];
            let bi = &db[i * k * n..(i + 1) * k * n];
            let ci = &mut c[i * m * n..(i + 1) * m * n];
            if trans_b {
                gemm_nt(ai, bi, ci, m, k, n);
            } else {
                gemm_nn(ai, bi, ci, m, k, n);
            }
        }
        self.push(
            Tensor::from_parts(vec![batch, m, n], c),
            Op::BatchMatMul { a, b, trans_b },
        )
    }

    /// Square-kernel convolution. `input` is `(B, C, H, W)`, `weight`
    /// `(O, C, k, k)`, `bias` `(O)`; the result is `(B, O, H', W')`.
    pub fn conv2d(&mut self, input: Var, weight: Var, bias: Var, stride: usize, padding: usize) -> Var {
        let si = self.shape(input).to_vec();
        let sw = self.shape(weight).to_vec();
        assert_eq!(si.len(), 4, "conv2d: input must be (B, C, H, W)");
        assert_eq!(sw.len(), 4, "conv2d: weight must be (O, C, k, k)");
        assert_eq!(si[1], sw[1], "conv2d: channel mismatch");
        assert_eq!(sw[2], sw[3], "conv2d: square kernels only");
        assert_eq!(self.shape(bias), [sw[0]], "conv2d: bias length");
        assert!(stride >= 1, "conv2d: stride must be positive");
        assert!(si[2] + 2 * padding >= sw[2] && si[3] + 2 * padding >= sw[2], "conv2d: kernel larger than padded input");
        let geom = ConvGeometry {
            batch: si[0],
            in_channels: si[1],
            height: si[2],
            width: si[3],
            kernel: sw[2],
            stride,
            padding,
        };
        let out_ch = sw[0];
        let positions = geom.positions();
        let rows = geom.batch * positions;
        let patch = geom.patch_len();
        let cols = im2col(self.value(input).data(), &geom);
        let mut out_mat = vec![0.0; rows * out_ch];
        gemm_nt(&cols, self.value(weight).data(), &mut out_mat, rows, patch, out_ch);
        let b = self.value(bias).data();
        let mut out = vec![0.0; rows * out_ch];
        for bi in 0..geom.batch {
            for p in 0..positions {
                let r = bi * positions + p;
                for o in 0..out_ch {
                    out[(bi * out_ch + o) * positions + p] = out_mat[r * out_ch + o] + b[o];
                }
            }
        }
        let shape = vec![geom.batch, out_ch, geom.out_height(), geom.out_width()];
        self.push(
            Tensor::from_parts(shape, out),
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            },
        )
    }

    // ---- reductions and row-wise maps ------------------------------------------

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("softmax: rank-0 input");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut z = 0.0;
            for v in row.iter_mut() {
                *v = (*v - max).exp();
                z += *v;
            }
            for v in row.iter_mut() {
                *v /= z;
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(t, Op::Softmax(x))
    }

    /// Log of the softmax over the last axis.
    pub fn log_softmax(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let n = *t.shape().last().expect("log_softmax: rank-0 input");
        let mut data = t.data().to_vec();
        for row in data.chunks_mut(n) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln();
            for v in row.iter_mut() {
                *v -= lse;
            }
        }
        let t = Tensor::from_parts(t.shape().to_vec(), data);
        self.push(t, Op::LogSoftmax(x))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x))
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(s), Op::Mean(x))
    }

    /// Selects `x[r, indices[r]]` from a `(B, n)` input, giving `(B)`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Var {
        let s = self.shape(x);
        assert_eq!(s.len(), 2, "gather: input must be (B, n)");
        let (rows, n) = (s[0], s[1]);
        assert_eq!(indices.len(), rows, "gather: one index per row");
        assert!(indices.iter().all(|&i| i < n), "gather: index out of range");
        let d = self.value(x).data();
        let out = indices.iter().enumerate().map(|(r, &i)| d[r * n + i]).collect();
        self.push(
            Tensor::from_parts(vec![rows], out),
            Op::Gather {
                x,
                indices: indices.to_vec(),
            },
        )
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let t = self.value(x).clone();
        let t = t.reshape(shape).unwrap_or_else(|e| panic!("reshape: {e}"));
        self.push(t, Op::Reshape(x))
    }

    /// Swaps the last two axes of a rank-3 tensor.
    pub fn transpose_last2(&mut self, x: Var) -> Var {
        let s = self.shape(x).to_vec();
        assert_eq!(s.len(), 3, "transpose_last2: rank-3 input");
        let (b, r, c) = (s[0], s[1], s[2]);
        let d = self.value(x).data();
        let mut out = vec![0.0; d.len()];
        for bi in 0..b {
            let base = bi * r * c;
            for i in 0..r {
                for j in 0..c {
                    out[base + j * r + i] = d[base + i * c + j];
                }
            }
        }
        self.push(Tensor::from_parts(vec![b, c, r], out), Op::TransposeLast2(x))
    }

    // ---- backward ---------------------------------------------------------------

    /// Reverse sweep from a scalar `loss`.
    pub fn backward(&self, loss: Var) -> Result<Gradients> {
        if !self.value(loss).is_scalar() {
            return Err(Error::Shape(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.check_finite()?;

        let mut grads: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else {
                continue;
            };
            if g.iter().any(|v| !v.is_finite()) {
                return Err(Error::Numeric {
                    node: i,
                    op: self.nodes[i].op.name(),
                });
            }
            self.backward_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn slot<'g>(&self, grads: &'g mut [Option<Vec<f64>>], v: Var) -> Option<&'g mut Vec<f64>> {
        if !self.nodes[v.0].requires_grad {
            return None;
        }
        let len = self.nodes[v.0].value.len();
        Some(grads[v.0].get_or_insert_with(|| vec![0.0; len]))
    }

    fn backward_node(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    add_into(gb, g);
                }
            }
            Op::Sub(a, b) => {
                if let Some(ga) = self.slot(grads, *a) {
                    add_into(ga, g);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (d, s) in gb.iter_mut().zip(g) {
                        *d -= s;
                    }
                }
            }
            Op::Mul(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for ((d, s), y) in ga.iter_mut().zip(g).zip(vb) {
                        *d += s * y;
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for ((d, s), x) in gb.iter_mut().zip(g).zip(va) {
                        *d += s * x;
                    }
                }
            }
            Op::Minimum(a, b) => {
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for (j, d) in ga.iter_mut().enumerate() {
                        if va[j] <= vb[j] {
                            *d += g[j];
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for (j, d) in gb.iter_mut().enumerate() {
                        if va[j] > vb[j] {
                            *d += g[j];
                        }
                    }
                }
            }
            Op::AddScalar(x) | Op::Reshape(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
            }
            Op::Scale(x, c) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for (d, s) in gx.iter_mut().zip(g) {
                        *d += c * s;
                    }
                }
            }
            Op::AddBias(x, bias) => {
                if let Some(gx) = self.slot(grads, *x) {
                    add_into(gx, g);
                }
                let n = self.value(*bias).len();
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in g.chunks(n) {
                        add_into(gb, row);
                    }
                }
            }
            Op::MatMul(a, b) => {
                let (sa, sb) = (self.shape(*a), self.shape(*b));
                let (m, k, n) = (sa[0], sa[1], sb[1]);
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    gemm_nt(g, vb, ga, m, n, k);
                }
                if let Some(gb) = self.slot(grads, *b) {
                    gemm_tn(va, g, gb, k, m, n);
                }
            }
            Op::BatchMatMul { a, b, trans_b } => {
                let sa = self.shape(*a);
                let (batch, m, k) = (sa[0], sa[1], sa[2]);
                let n = node.value.shape()[2];
                let (va, vb) = (self.value(*a).data(), self.value(*b).data());
                if let Some(ga) = self.slot(grads, *a) {
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let bm = &vb[bi * k * n..(bi + 1) * k * n];
                        let gai = &mut ga[bi * m * k..(bi + 1) * m * k];
                        if *trans_b {
                            gemm_nn(gi, bm, gai, m, n, k);
                        } else {
                            gemm_nt(gi, bm, gai, m, n, k);
                        }
                    }
                }
                if let Some(gb) = self.slot(grads, *b) {
                    for bi in 0..batch {
                        let gi = &g[bi * m * n..(bi + 1) * m * n];
                        let am = &va[bi * m * k..(bi + 1) * m * k];
                        let gbi = &mut gb[bi * k * n..(bi + 1) * k * n];
                        if *trans_b {
                            gemm_tn(gi, am, gbi, n, m, k);
                        } else {
                            gemm_tn(am, gi, gbi, k, m, n);
                        }
                    }
                }
            }
            Op::Conv2d {
                input,
                weight,
                bias,
                geom,
                cols,
            } => {
                let out_ch = self.shape(*weight)[0];
                let positions = geom.positions();
                let rows = geom.batch * positions;
                let patch = geom.patch_len();
                let mut dmat = vec![0.0; rows * out_ch];
                for bi in 0..geom.batch {
                    for o in 0..out_ch {
                        let src = &g[(bi * out_ch + o) * positions..(bi * out_ch + o + 1) * positions];
                        for (p, &v) in src.iter().enumerate() {
                            dmat[(bi * positions + p) * out_ch + o] = v;
                        }
                    }
                }
                if let Some(gw) = self.slot(grads, *weight) {
                    gemm_tn(&dmat, cols, gw, out_ch, rows, patch);
                }
                if let Some(gb) = self.slot(grads, *bias) {
                    for row in dmat.chunks(out_ch) {
                        add_into(gb, row);
                    }
                }
                if self.nodes[input.0].requires_grad {
                    let mut dcols = vec![0.0; rows * patch];
                    gemm_nn(&dmat, self.value(*weight).data(), &mut dcols, rows, out_ch, patch);
                    if let Some(gi) = self.slot(grads, *input) {
                        col2im(&dcols, geom, gi);
                    }
                }
            }
            Op::Relu(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        if *v > 0.0 {
                            *d += s;
                        }
                    }
                }
            }
            Op::Tanh(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += s * (1.0 - y * y);
                    }
                }
            }
            Op::Exp(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), y) in gx.iter_mut().zip(g).zip(out) {
                        *d += s * y;
                    }
                }
            }
            Op::Abs(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        if *v > 0.0 {
                            *d += s;
                        } else if *v < 0.0 {
                            *d -= s;
                        }
                    }
                }
            }
            Op::Square(x) => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        *d += 2.0 * s * v;
                    }
                }
            }
            Op::Softmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dx, gy), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let inner: f64 = gy.iter().zip(y).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            dx[j] += y[j] * (gy[j] - inner);
                        }
                    }
                }
            }
            Op::LogSoftmax(x) => {
                let n = *node.value.shape().last().unwrap();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((dx, gy), y) in gx.chunks_mut(n).zip(g.chunks(n)).zip(out.chunks(n)) {
                        let total: f64 = gy.iter().sum();
                        for j in 0..n {
                            dx[j] += gy[j] - y[j].exp() * total;
                        }
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0]);
                }
            }
            Op::Mean(x) => {
                let n = self.value(*x).len() as f64;
                if let Some(gx) = self.slot(grads, *x) {
                    gx.iter_mut().for_each(|d| *d += g[0] / n);
                }
            }
            Op::Clip { x, lo, hi } => {
                let vx = self.value(*x).data();
                if let Some(gx) = self.slot(grads, *x) {
                    for ((d, s), v) in gx.iter_mut().zip(g).zip(vx) {
                        if *v >= *lo && *v <= *hi {
                            *d += s;
                        }
                    }
                }
            }
            Op::Gather { x, indices } => {
                let n = self.shape(*x)[1];
                if let Some(gx) = self.slot(grads, *x) {
                    for (r, &idx) in indices.iter().enumerate() {
                        gx[r * n + idx] += g[r];
                    }
                }
            }
            Op::TransposeLast2(x) => {
                let s = node.value.shape();
                // output is (b, c, r); input (b, r, c)
                let (b, c, r) = (s[0], s[1], s[2]);
                if let Some(gx) = self.slot(grads, *x) {
                    for bi in 0..b {
                        let base = bi * r * c;
                        for j in 0..c {
                            for i in 0..r {
                                gx[base + i * c + j] += g[base + j * r + i];
                            }
                        }
                    }
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn square_derivative() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::scalar(3.0));
        let y = g.mul(x, x);
        let grads = g.backward(y).unwrap();
        assert_eq!(grads.get(x).unwrap(), &[6.0]);
    }

    #[test]
    fn mean_of_softmax_has_zero_gradient() {
        let mut g = Graph::new();
        let z = g.variable(Tensor::new(vec![2, 3], vec![0.3, -1.0, 2.0, 5.0, 0.1, -0.4]).unwrap());
        let p = g.softmax(z);
        let m = g.mean(p);
        let grads = g.backward(m).unwrap();
        for v in grads.get(z).unwrap() {
            assert!(v.abs() < 1e-15, "{v}");
        }
    }

    #[test]
    fn non_scalar_loss_is_a_shape_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1.0, 2.0]));
        let y = g.tanh(x);
        assert!(matches!(g.backward(y), Err(Error::Shape(_))));
    }

    #[test]
    fn nan_is_reported_with_its_node() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::from_vec(vec![1e308, 1.0]));
        let y = g.scale(x, 10.0);
        let s = g.sum(y);
        match g.backward(s) {
            Err(Error::Numeric { node, op }) => {
                assert_eq!(node, y.index());
                assert_eq!(op, "scale");
            }
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn unused_parameters_get_zero_gradients() {
        let mut params = ParamSet::new();
        params.push("used", Tensor::from_vec(vec![1.0, 2.0]));
        params.push("unused", Tensor::from_vec(vec![3.0]));
        let mut g = Graph::new();
        let vars = g.bind(&params, false);
        let s = g.sum(vars[0]);
        let grads = g.backward(s).unwrap();
        grads.assign(&mut params, &vars);
        assert_eq!(params.get(0).grad.as_deref(), Some(&[1.0, 1.0][..]));
        assert_eq!(params.get(1).grad.as_deref(), Some(&[0.0][..]));
    }

    #[test]
    fn frozen_binding_blocks_gradients() {
        let mut params = ParamSet::new();
        params.push("w", Tensor::from_vec(vec![1.0, 2.0]));
        let mut g = Graph::new();
        let vars = g.bind(&params, true);
        let x = g.variable(Tensor::from_vec(vec![0.5, 0.5]));
        let y = g.mul(vars[0], x);
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(vars[0]).is_none());
        assert_eq!(grads.get(x).unwrap(), &[1.0, 2.0]);
    }

    #[test]
    fn backward_is_bitwise_deterministic() {
        let build = || {
            let mut g = Graph::new();
            let a = g.variable(Tensor::new(vec![3, 4], (0..12).map(|i| (i as f64).sin()).collect()).unwrap());
            let b = g.variable(Tensor::new(vec![4, 2], (0..8).map(|i| (i as f64).cos()).collect()).unwrap());
            let c = g.matmul(a, b);
            let d = g.tanh(c);
            let l = g.mean(d);
            let grads = g.backward(l).unwrap();
            (grads.get(a).unwrap().to_vec(), grads.get(b).unwrap().to_vec())
        };
        let (a1, b1) = build();
        let (a2, b2) = build();
        assert!(a1.iter().zip(&a2).all(|(x, y)| x.to_bits() == y.to_bits()));
        assert!(b1.iter().zip(&b2).all(|(x, y)| x.to_bits() == y.to_bits()));
    }
}

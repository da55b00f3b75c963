//! Reverse-mode automatic differentiation over a flat operation tape.
//!
//! A [`Tape`] records every operation in execution order (define-by-run); the
//! graph is rebuilt per training iteration because episode structure changes
//! from batch to batch. [`Tape::backward`] consumes the tape, walks the nodes
//! once in reverse, and returns a [`Gradients`] map keyed by parameter name.
//!
//! Accumulation order is fixed by the recording order, so identical inputs
//! produce bitwise-identical gradients.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::tensor::{matmul_at_raw, matmul_bt_raw, matmul_raw, Tensor};

/// Handle to a value recorded on a tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct NodeId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Matmul { a: NodeId, b: NodeId },
    Add { a: NodeId, b: NodeId },
    AddBias { a: NodeId, bias: NodeId },
    Mul { a: NodeId, b: NodeId },
    Scale { a: NodeId, c: f64 },
    Relu { a: NodeId },
    Exp { a: NodeId },
    Log { a: NodeId },
    Clamp { a: NodeId, lo: f64, hi: f64 },
    ReduceSum { a: NodeId },
    ReduceMean { a: NodeId },
    SqDist { a: NodeId, b: NodeId },
    SoftmaxLast { a: NodeId },
    GatherRows { a: NodeId, indices: Vec<usize> },
    Reshape { a: NodeId },
    Conv2d { x: NodeId, w: NodeId, bias: NodeId, dims: ConvDims },
    MaxPool2 { x: NodeId, argmax: Vec<usize> },
}

#[derive(Debug, Clone, Copy)]
struct ConvDims {
    batch: usize,
    c_in: usize,
    h: usize,
    w: usize,
    c_out: usize,
    kh: usize,
    kw: usize,
}

impl ConvDims {
    fn out_h(&self) -> usize {
        self.h - self.kh + 1
    }
    fn out_w(&self) -> usize {
        self.w - self.kw + 1
    }
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    name: Option<String>,
}

/// Gradients of a scalar loss with respect to every named parameter leaf.
#[derive(Debug, Clone, Default)]
pub struct Gradients {
    map: BTreeMap<String, Tensor>,
}

impl Gradients {
    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.map.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.map.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }
}

/// Operation tape; single-owner, one training step per tape.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

impl Tape {
    pub fn new() -> Self {
        Tape { nodes: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Value at a node.
    pub fn value(&self, id: NodeId) -> &Tensor {
        &self.nodes[id.0].value
    }

    /// Records a constant input; no gradient flows into it.
    pub fn leaf(&mut self, value: Tensor) -> NodeId {
        self.push(value, Op::Leaf, false, None)
    }

    /// Records a named trainable leaf. Gradients for it appear in the
    /// [`Gradients`] map under `name`.
    pub fn param(&mut self, name: &str, value: Tensor) -> Result<NodeId> {
        if self
            .nodes
            .iter()
            .any(|n| n.name.as_deref() == Some(name))
        {
            return Err(Error::domain(
                "tape.param",
                format!("duplicate parameter name {:?}", name),
            ));
        }
        Ok(self.push(value, Op::Leaf, true, Some(name.to_string())))
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool, name: Option<String>) -> NodeId {
        let id = NodeId(self.nodes.len());
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            name,
        });
        id
    }

    fn grad_of(&self, id: NodeId) -> bool {
        self.nodes[id.0].requires_grad
    }

    fn record(&mut self, value: Tensor, op: Op, requires_grad: bool) -> NodeId {
        self.push(value, op, requires_grad, None)
    }

    // ── forward ops ─────────────────────────────────────────────────────

    /// `a[m×k] · b[k×n]`.
    pub fn matmul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.cols() != tb.rows() {
            return Err(Error::shape(
                "matmul",
                format!("{:?} x {:?}", ta.shape(), tb.shape()),
            ));
        }
        let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
        let out = matmul_raw(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.record(value, Op::Matmul { a, b }, rg))
    }

    /// Elementwise sum of two tensors with identical shapes.
    pub fn add(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.record(value, Op::Add { a, b }, rg))
    }

    /// Adds a rank-1 bias of length `m` to every row of `a[n×m]`; the one
    /// broadcast this op set allows.
    pub fn add_bias(&mut self, a: NodeId, bias: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(bias));
        if ta.rank() != 2 || tb.rank() != 1 || ta.cols() != tb.numel() {
            return Err(Error::shape(
                "add_bias",
                format!("{:?} + bias {:?}", ta.shape(), tb.shape()),
            ));
        }
        let cols = ta.cols();
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, x)| x + tb.data()[i % cols])
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.grad_of(a) || self.grad_of(bias);
        Ok(self.record(value, Op::AddBias { a, bias }, rg))
    }

    /// Elementwise (Hadamard) product of two tensors with identical shapes.
    pub fn mul(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let data = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.record(value, Op::Mul { a, b }, rg))
    }

    /// Multiplies every element by a constant.
    pub fn scale(&mut self, a: NodeId, c: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x * c).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.grad_of(a);
        self.record(value, Op::Scale { a, c }, rg)
    }

    /// Elementwise negation.
    pub fn negate(&mut self, a: NodeId) -> NodeId {
        self.scale(a, -1.0)
    }

    /// Elementwise square.
    pub fn square(&mut self, a: NodeId) -> NodeId {
        self.mul(a, a).expect("identical shapes")
    }

    pub fn relu(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.grad_of(a);
        self.record(value, Op::Relu { a }, rg)
    }

    pub fn exp(&mut self, a: NodeId) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.exp()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.grad_of(a);
        self.record(value, Op::Exp { a }, rg)
    }

    /// Natural logarithm; every element must be strictly positive.
    pub fn log(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if let Some(bad) = ta.data().iter().find(|v| **v <= 0.0) {
            return Err(Error::domain("log", format!("non-positive input {}", bad)));
        }
        let data = ta.data().iter().map(|x| x.ln()).collect();
        let value = Tensor::new(ta.shape().to_vec(), data)?;
        let rg = self.grad_of(a);
        Ok(self.record(value, Op::Log { a }, rg))
    }

    /// Clamps every element into `[lo, hi]`; gradient is passed through on
    /// the interior and zeroed where the clamp engaged.
    pub fn clamp(&mut self, a: NodeId, lo: f64, hi: f64) -> NodeId {
        let ta = self.value(a);
        let data = ta.data().iter().map(|x| x.clamp(lo, hi)).collect();
        let value = Tensor::new(ta.shape().to_vec(), data).expect("shape preserved");
        let rg = self.grad_of(a);
        self.record(value, Op::Clamp { a, lo, hi }, rg)
    }

    /// Sum of all elements, as a rank-0 tensor.
    pub fn reduce_sum(&mut self, a: NodeId) -> NodeId {
        let s: f64 = self.value(a).data().iter().sum();
        let rg = self.grad_of(a);
        self.record(Tensor::scalar(s), Op::ReduceSum { a }, rg)
    }

    /// Mean of all elements, as a rank-0 tensor.
    pub fn reduce_mean(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.numel() == 0 {
            return Err(Error::domain("reduce_mean", "empty tensor"));
        }
        let s: f64 = ta.data().iter().sum();
        let mean = s / ta.numel() as f64;
        let rg = self.grad_of(a);
        Ok(self.record(Tensor::scalar(mean), Op::ReduceMean { a }, rg))
    }

    /// Pairwise squared Euclidean distances between the rows of `a[n×m]` and
    /// the rows of `b[p×m]`, giving `[n×p]`. Rank-1 inputs are treated as a
    /// single row; two rank-1 inputs give a rank-0 result.
    pub fn sq_dist(&mut self, a: NodeId, b: NodeId) -> Result<NodeId> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (n, m) = rows_cols(ta, "squared_euclidean_distance")?;
        let (p, mb) = rows_cols(tb, "squared_euclidean_distance")?;
        if m != mb {
            return Err(Error::shape(
                "squared_euclidean_distance",
                format!("{:?} vs {:?}", ta.shape(), tb.shape()),
            ));
        }
        let mut out = vec![0.0; n * p];
        for i in 0..n {
            let ra = &ta.data()[i * m..(i + 1) * m];
            for j in 0..p {
                let rb = &tb.data()[j * m..(j + 1) * m];
                let mut d = 0.0;
                for (x, y) in ra.iter().zip(rb) {
                    let diff = x - y;
                    d += diff * diff;
                }
                out[i * p + j] = d;
            }
        }
        let shape = if ta.rank() == 1 && tb.rank() == 1 {
            Vec::new()
        } else {
            vec![n, p]
        };
        let value = Tensor::new(shape, out)?;
        let rg = self.grad_of(a) || self.grad_of(b);
        Ok(self.record(value, Op::SqDist { a, b }, rg))
    }

    /// Row-wise softmax over the last axis of a rank-2 tensor. Rows are
    /// shifted by their maximum before exponentiation, so every output row
    /// sums to one even for widely spread inputs.
    pub fn softmax_last(&mut self, a: NodeId) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape(
                "softmax_over_last_axis",
                format!("expected rank 2, got {:?}", ta.shape()),
            ));
        }
        let (n, c) = (ta.rows(), ta.cols());
        let mut out = vec![0.0; n * c];
        for i in 0..n {
            let row = ta.row(i);
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let mut denom = 0.0;
            for (j, &z) in row.iter().enumerate() {
                let e = (z - mx).exp();
                out[i * c + j] = e;
                denom += e;
            }
            for v in &mut out[i * c..(i + 1) * c] {
                *v /= denom;
            }
        }
        let value = Tensor::new(vec![n, c], out)?;
        let rg = self.grad_of(a);
        Ok(self.record(value, Op::SoftmaxLast { a }, rg))
    }

    /// Selects rows of a rank-2 tensor, in the order given; indices may repeat.
    pub fn gather_rows(&mut self, a: NodeId, indices: &[usize]) -> Result<NodeId> {
        let ta = self.value(a);
        if ta.rank() != 2 {
            return Err(Error::shape(
                "gather_rows",
                format!("expected rank 2, got {:?}", ta.shape()),
            ));
        }
        if let Some(&bad) = indices.iter().find(|&&i| i >= ta.rows()) {
            return Err(Error::shape(
                "gather_rows",
                format!("row index {} out of range for {} rows", bad, ta.rows()),
            ));
        }
        let value = ta.select_rows(indices)?;
        let rg = self.grad_of(a);
        Ok(self.record(
            value,
            Op::GatherRows {
                a,
                indices: indices.to_vec(),
            },
            rg,
        ))
    }

    /// Reinterprets the data buffer under a new shape with equal element count.
    pub fn reshape(&mut self, a: NodeId, shape: Vec<usize>) -> Result<NodeId> {
        let ta = self.value(a);
        let numel: usize = shape.iter().product();
        if numel != ta.numel() {
            return Err(Error::shape(
                "reshape",
                format!("{:?} -> {:?}", ta.shape(), shape),
            ));
        }
        let value = Tensor::new(shape, ta.data().to_vec())?;
        let rg = self.grad_of(a);
        Ok(self.record(value, Op::Reshape { a }, rg))
    }

    /// Valid (no padding), stride-1 2‑D convolution with per-channel bias.
    /// `x` is `[n, c_in, h, w]`, `w` is `[c_out, c_in, kh, kw]`, `bias` is
    /// `[c_out]`; the result is `[n, c_out, h-kh+1, w-kw+1]`.
    pub fn conv2d(&mut self, x: NodeId, w: NodeId, bias: NodeId) -> Result<NodeId> {
        let (tx, tw, tb) = (self.value(x), self.value(w), self.value(bias));
        if tx.rank() != 4 || tw.rank() != 4 {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        let dims = ConvDims {
            batch: tx.shape()[0],
            c_in: tx.shape()[1],
            h: tx.shape()[2],
            w: tx.shape()[3],
            c_out: tw.shape()[0],
            kh: tw.shape()[2],
            kw: tw.shape()[3],
        };
        if tw.shape()[1] != dims.c_in || dims.kh > dims.h || dims.kw > dims.w {
            return Err(Error::shape(
                "conv2d",
                format!("input {:?}, weight {:?}", tx.shape(), tw.shape()),
            ));
        }
        if tb.rank() != 1 || tb.numel() != dims.c_out {
            return Err(Error::shape(
                "conv2d",
                format!("bias {:?} for {} output channels", tb.shape(), dims.c_out),
            ));
        }
        let (oh, ow) = (dims.out_h(), dims.out_w());
        // im2col: [c_in*kh*kw × n*oh*ow], then one matmul with the flattened kernel.
        let col = im2col(tx.data(), &dims);
        let k = dims.c_in * dims.kh * dims.kw;
        let cols = dims.batch * oh * ow;
        let out_mat = matmul_raw(tw.data(), &col, dims.c_out, k, cols);
        let mut out = vec![0.0; dims.batch * dims.c_out * oh * ow];
        for co in 0..dims.c_out {
            let b = tb.data()[co];
            for n in 0..dims.batch {
                for s in 0..oh * ow {
                    out[((n * dims.c_out) + co) * oh * ow + s] =
                        out_mat[co * cols + n * oh * ow + s] + b;
                }
            }
        }
        let value = Tensor::new(vec![dims.batch, dims.c_out, oh, ow], out)?;
        let rg = self.grad_of(x) || self.grad_of(w) || self.grad_of(bias);
        Ok(self.record(value, Op::Conv2d { x, w, bias, dims }, rg))
    }

    /// 2×2 max pooling with stride 2 over `[n, c, h, w]`; `h` and `w` must be
    /// even.
    pub fn max_pool2(&mut self, x: NodeId) -> Result<NodeId> {
        let tx = self.value(x);
        if tx.rank() != 4 || !tx.shape()[2].is_multiple_of(2) || !tx.shape()[3].is_multiple_of(2) {
            return Err(Error::shape(
                "max_pool2",
                format!("expected [n,c,even,even], got {:?}", tx.shape()),
            ));
        }
        let (n, c, h, w) = (tx.shape()[0], tx.shape()[1], tx.shape()[2], tx.shape()[3]);
        let (oh, ow) = (h / 2, w / 2);
        let mut out = vec![0.0; n * c * oh * ow];
        let mut argmax = vec![0usize; n * c * oh * ow];
        let data = tx.data();
        for img in 0..n * c {
            let base = img * h * w;
            for i in 0..oh {
                for j in 0..ow {
                    let mut best = f64::NEG_INFINITY;
                    let mut best_idx = 0;
                    for di in 0..2 {
                        for dj in 0..2 {
                            let idx = base + (2 * i + di) * w + (2 * j + dj);
                            if data[idx] > best {
                                best = data[idx];
                                best_idx = idx;
                            }
                        }
                    }
                    let o = img * oh * ow + i * ow + j;
                    out[o] = best;
                    argmax[o] = best_idx;
                }
            }
        }
        let value = Tensor::new(vec![n, c, oh, ow], out)?;
        let rg = self.grad_of(x);
        Ok(self.record(value, Op::MaxPool2 { x, argmax }, rg))
    }

    // ── backward ────────────────────────────────────────────────────────

    /// Runs the reverse pass from a scalar `loss`, consuming the tape, and
    /// returns gradients for every named parameter leaf (zeros for parameters
    /// the loss does not reach).
    pub fn backward(self, loss: NodeId) -> Result<Gradients> {
        if !self.nodes[loss.0].value.is_scalar() {
            return Err(Error::shape(
                "backward",
                format!(
                    "loss must be scalar, got shape {:?}",
                    self.nodes[loss.0].value.shape()
                ),
            ));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; n];
        grads[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.accumulate(i, &g, &mut grads);
            if matches!(self.nodes[i].op, Op::Leaf) {
                grads[i] = Some(g); // keep leaf gradients for collection
            }
        }

        let mut map = BTreeMap::new();
        for (i, node) in self.nodes.iter().enumerate() {
            if let Some(name) = &node.name {
                let data = grads[i]
                    .take()
                    .unwrap_or_else(|| vec![0.0; node.value.numel()]);
                map.insert(name.clone(), Tensor::new(node.value.shape().to_vec(), data)?);
            }
        }
        Ok(Gradients { map })
    }

    fn accumulate(&self, i: usize, g: &[f64], grads: &mut [Option<Vec<f64>>]) {
        let add_into = |grads: &mut [Option<Vec<f64>>], id: NodeId, contrib: &[f64]| {
            let slot = grads[id.0].get_or_insert_with(|| vec![0.0; contrib.len()]);
            for (s, c) in slot.iter_mut().zip(contrib) {
                *s += c;
            }
        };

        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Matmul { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                if self.grad_of(*a) {
                    // dA = G · Bᵀ
                    let da = matmul_bt_raw(g, tb.data(), m, k, n);
                    add_into(grads, *a, &da);
                }
                if self.grad_of(*b) {
                    // dB = Aᵀ · G
                    let db = matmul_at_raw(ta.data(), g, m, k, n);
                    add_into(grads, *b, &db);
                }
            }
            Op::Add { a, b } => {
                if self.grad_of(*a) {
                    add_into(grads, *a, g);
                }
                if self.grad_of(*b) {
                    add_into(grads, *b, g);
                }
            }
            Op::AddBias { a, bias } => {
                if self.grad_of(*a) {
                    add_into(grads, *a, g);
                }
                if self.grad_of(*bias) {
                    let cols = self.nodes[bias.0].value.numel();
                    let mut db = vec![0.0; cols];
                    for (idx, gv) in g.iter().enumerate() {
                        db[idx % cols] += gv;
                    }
                    add_into(grads, *bias, &db);
                }
            }
            Op::Mul { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                if self.grad_of(*a) {
                    let da: Vec<f64> = g.iter().zip(tb.data()).map(|(g, y)| g * y).collect();
                    add_into(grads, *a, &da);
                }
                if self.grad_of(*b) {
                    let db: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g * x).collect();
                    add_into(grads, *b, &db);
                }
            }
            Op::Scale { a, c } => {
                if self.grad_of(*a) {
                    let da: Vec<f64> = g.iter().map(|g| g * c).collect();
                    add_into(grads, *a, &da);
                }
            }
            Op::Relu { a } => {
                if self.grad_of(*a) {
                    let ta = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ta.data())
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    add_into(grads, *a, &da);
                }
            }
            Op::Exp { a } => {
                if self.grad_of(*a) {
                    let out = &self.nodes[i].value;
                    let da: Vec<f64> = g.iter().zip(out.data()).map(|(g, e)| g * e).collect();
                    add_into(grads, *a, &da);
                }
            }
            Op::Log { a } => {
                if self.grad_of(*a) {
                    let ta = &self.nodes[a.0].value;
                    let da: Vec<f64> = g.iter().zip(ta.data()).map(|(g, x)| g / x).collect();
                    add_into(grads, *a, &da);
                }
            }
            Op::Clamp { a, lo, hi } => {
                if self.grad_of(*a) {
                    let ta = &self.nodes[a.0].value;
                    let da: Vec<f64> = g
                        .iter()
                        .zip(ta.data())
                        .map(|(g, &x)| if x > *lo && x < *hi { *g } else { 0.0 })
                        .collect();
                    add_into(grads, *a, &da);
                }
            }
            Op::ReduceSum { a } => {
                if self.grad_of(*a) {
                    let numel = self.nodes[a.0].value.numel();
                    add_into(grads, *a, &vec![g[0]; numel]);
                }
            }
            Op::ReduceMean { a } => {
                if self.grad_of(*a) {
                    let numel = self.nodes[a.0].value.numel();
                    add_into(grads, *a, &vec![g[0] / numel as f64; numel]);
                }
            }
            Op::SqDist { a, b } => {
                let ta = &self.nodes[a.0].value;
                let tb = &self.nodes[b.0].value;
                let (n, m) = rows_cols(ta, "sq_dist").expect("validated at record time");
                let (p, _) = rows_cols(tb, "sq_dist").expect("validated at record time");
                if self.grad_of(*a) {
                    let mut da = vec![0.0; n * m];
                    for i in 0..n {
                        for j in 0..p {
                            let gv = g[i * p + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for d in 0..m {
                                da[i * m + d] +=
                                    gv * 2.0 * (ta.data()[i * m + d] - tb.data()[j * m + d]);
                            }
                        }
                    }
                    add_into(grads, *a, &da);
                }
                if self.grad_of(*b) {
                    let mut db = vec![0.0; p * m];
                    for i in 0..n {
                        for j in 0..p {
                            let gv = g[i * p + j];
                            if gv == 0.0 {
                                continue;
                            }
                            for d in 0..m {
                                db[j * m + d] +=
                                    gv * 2.0 * (tb.data()[j * m + d] - ta.data()[i * m + d]);
                            }
                        }
                    }
                    add_into(grads, *b, &db);
                }
            }
            Op::SoftmaxLast { a } => {
                if self.grad_of(*a) {
                    let out = &self.nodes[i].value;
                    let (n, c) = (out.rows(), out.cols());
                    let mut da = vec![0.0; n * c];
                    for r in 0..n {
                        let y = &out.data()[r * c..(r + 1) * c];
                        let gr = &g[r * c..(r + 1) * c];
                        let dot: f64 = y.iter().zip(gr).map(|(y, g)| y * g).sum();
                        for j in 0..c {
                            da[r * c + j] = y[j] * (gr[j] - dot);
                        }
                    }
                    add_into(grads, *a, &da);
                }
            }
            Op::GatherRows { a, indices } => {
                if self.grad_of(*a) {
                    let ta = &self.nodes[a.0].value;
                    let cols = ta.cols();
                    let mut da = vec![0.0; ta.numel()];
                    for (k, &src) in indices.iter().enumerate() {
                        for d in 0..cols {
                            da[src * cols + d] += g[k * cols + d];
                        }
                    }
                    add_into(grads, *a, &da);
                }
            }
            Op::Reshape { a } => {
                if self.grad_of(*a) {
                    add_into(grads, *a, g);
                }
            }
            Op::Conv2d { x, w, bias, dims } => {
                let (oh, ow) = (dims.out_h(), dims.out_w());
                let k = dims.c_in * dims.kh * dims.kw;
                let cols = dims.batch * oh * ow;
                // Reorder the output gradient to the [c_out × n*oh*ow] layout
                // used by the im2col product.
                let mut g_mat = vec![0.0; dims.c_out * cols];
                for n in 0..dims.batch {
                    for co in 0..dims.c_out {
                        for s in 0..oh * ow {
                            g_mat[co * cols + n * oh * ow + s] =
                                g[((n * dims.c_out) + co) * oh * ow + s];
                        }
                    }
                }
                if self.grad_of(*w) {
                    let col = im2col(self.nodes[x.0].value.data(), dims);
                    // dW = G · colᵀ
                    let dw = matmul_bt_raw(&g_mat, &col, dims.c_out, k, cols);
                    add_into(grads, *w, &dw);
                }
                if self.grad_of(*bias) {
                    let mut db = vec![0.0; dims.c_out];
                    for co in 0..dims.c_out {
                        db[co] = g_mat[co * cols..(co + 1) * cols].iter().sum();
                    }
                    add_into(grads, *bias, &db);
                }
                if self.grad_of(*x) {
                    // dcol = Wᵀ · G, then scatter back to image layout.
                    let tw = &self.nodes[w.0].value;
                    let dcol = matmul_at_raw(tw.data(), &g_mat, dims.c_out, k, cols);
                    let dx = col2im(&dcol, dims);
                    add_into(grads, *x, &dx);
                }
            }
            Op::MaxPool2 { x, argmax } => {
                if self.grad_of(*x) {
                    let numel = self.nodes[x.0].value.numel();
                    let mut dx = vec![0.0; numel];
                    for (o, &src) in argmax.iter().enumerate() {
                        dx[src] += g[o];
                    }
                    add_into(grads, *x, &dx);
                }
            }
        }
    }
}

/// Interprets rank-1 tensors as a single row, rank-2 as-is.
fn rows_cols(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.rank() {
        1 => Ok((1, t.shape()[0])),
        2 => Ok((t.shape()[0], t.shape()[1])),
        _ => Err(Error::shape(
            op,
            format!("expected rank 1 or 2, got {:?}", t.shape()),
        )),
    }
}

fn im2col(x: &[f64], dims: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (dims.out_h(), dims.out_w());
    let k = dims.c_in * dims.kh * dims.kw;
    let cols = dims.batch * oh * ow;
    let mut col = vec![0.0; k * cols];
    for n in 0..dims.batch {
        for ci in 0..dims.c_in {
            let img = &x[(n * dims.c_in + ci) * dims.h * dims.w..];
            for ki in 0..dims.kh {
                for kj in 0..dims.kw {
                    let row = (ci * dims.kh + ki) * dims.kw + kj;
                    let out_base = row * cols + n * oh * ow;
                    for i in 0..oh {
                        let src = (i + ki) * dims.w + kj;
                        let dst = out_base + i * ow;
                        col[dst..dst + ow].copy_from_slice(&img[src..src + ow]);
                    }
                }
            }
        }
    }
    col
}

fn col2im(dcol: &[f64], dims: &ConvDims) -> Vec<f64> {
    let (oh, ow) = (dims.out_h(), dims.out_w());
    let cols = dims.batch * oh * ow;
    let mut dx = vec![0.0; dims.batch * dims.c_in * dims.h * dims.w];
    for n in 0..dims.batch {
        for ci in 0..dims.c_in {
            let img_base = (n * dims.c_in + ci) * dims.h * dims.w;
            for ki in 0..dims.kh {
                for kj in 0..dims.kw {
                    let row = (ci * dims.kh + ki) * dims.kw + kj;
                    let src_base = row * cols + n * oh * ow;
                    for i in 0..oh {
                        let dst = img_base + (i + ki) * dims.w + kj;
                        let src = src_base + i * ow;
                        for j in 0..ow {
                            dx[dst + j] += dcol[src + j];
                        }
                    }
                }
            }
        }
    }
    dx
}

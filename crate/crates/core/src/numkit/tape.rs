//! Define-by-run reverse-mode differentiation over [`Tensor`] values.
//!
//! Every primitive appends a node holding its output value. Nodes whose
//! inputs do not require gradients are stored as constants, so a tape built
//! purely from constants doubles as a plain evaluator. A tape is meant to be
//! rebuilt for every batch: [`Tape::backward`] consumes the recorded graph.

use super::tensor::broadcast_shape;
use super::{NumError, ParamId, ParamStore, Tensor};

/// Handle to a node on a [`Tape`]. Only valid until the tape is cleared.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Clone, Copy, Debug)]
enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Softplus,
    Sqrt,
    Abs,
    LeakyRelu(f64),
    Scale(f64),
    Shift(f64),
    Clamp(f64, f64),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
enum Binary {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Debug)]
enum Op {
    Constant,
    Param(ParamId),
    Unary(Unary, Var),
    Binary(Binary, Var, Var),
    MatMul(Var, Var),
    Sum(Var),
    Mean(Var),
    SumLast(Var),
    LogSoftmaxLast(Var),
    CumsumLast(Var),
    PadLast { x: Var, before: usize, after: usize },
    NarrowLast { x: Var, start: usize },
    ConcatLast(Var, Var),
    GatherLast { x: Var, idx: Vec<usize> },
    IndexSelect { x: Var, idx: Vec<usize> },
    BroadcastTo(Var),
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
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

    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Constant,
            requires_grad: false,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Leaf reading the current value of a stored parameter.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let p = store.get(id);
        self.nodes.push(Node {
            value: p.value.clone(),
            op: Op::Param(id),
            requires_grad: p.requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Var {
        let requires_grad = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        let op = if requires_grad { op } else { Op::Constant };
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    // ---- elementwise ------------------------------------------------------

    fn unary(&mut self, kind: Unary, x: Var) -> Result<Var, NumError> {
        let input = &self.nodes[x.0].value;
        let check = |op: &'static str, ok: fn(f64) -> bool| {
            match input.data().iter().position(|&v| !ok(v)) {
                Some(index) => Err(NumError::Domain {
                    op,
                    index,
                    value: input.data()[index],
                }),
                None => Ok(()),
            }
        };
        match kind {
            Unary::Log => check("log", |v| v > 0.0)?,
            Unary::Sqrt => check("sqrt", |v| v >= 0.0)?,
            _ => {}
        }
        let out = match kind {
            Unary::Neg => input.map(|v| -v),
            Unary::Exp => input.map(f64::exp),
            Unary::Log => input.map(f64::ln),
            Unary::Tanh => input.map(f64::tanh),
            Unary::Sigmoid => input.map(sigmoid),
            Unary::Softplus => input.map(softplus),
            Unary::Sqrt => input.map(f64::sqrt),
            Unary::Abs => input.map(f64::abs),
            Unary::LeakyRelu(slope) => input.map(|v| if v > 0.0 { v } else { slope * v }),
            Unary::Scale(c) => input.map(|v| c * v),
            Unary::Shift(c) => input.map(|v| v + c),
            Unary::Clamp(lo, hi) => input.map(|v| v.clamp(lo, hi)),
        };
        Ok(self.push(out, Op::Unary(kind, x), &[x]))
    }

    pub fn neg(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Neg, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Exp, x)
    }

    /// Natural log; non-positive operands are a domain error.
    pub fn log(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Log, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Tanh, x)
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Sigmoid, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Softplus, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Sqrt, x)
    }

    pub fn abs(&mut self, x: Var) -> Result<Var, NumError> {
        self.unary(Unary::Abs, x)
    }

    pub fn leaky_relu(&mut self, x: Var, slope: f64) -> Result<Var, NumError> {
        self.unary(Unary::LeakyRelu(slope), x)
    }

    pub fn mul_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumError> {
        self.unary(Unary::Scale(c), x)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var, NumError> {
        self.unary(Unary::Shift(c), x)
    }

    /// Clamp into `[lo, hi]`; the gradient is zero where clamping is active.
    pub fn clamp(&mut self, x: Var, lo: f64, hi: f64) -> Result<Var, NumError> {
        self.unary(Unary::Clamp(lo, hi), x)
    }

    fn binary(&mut self, kind: Binary, a: Var, b: Var) -> Result<Var, NumError> {
        let name = match kind {
            Binary::Add => "add",
            Binary::Sub => "sub",
            Binary::Mul => "mul",
            Binary::Div => "div",
        };
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        let shape = broadcast_shape(name, ta.shape(), tb.shape())?;
        if kind == Binary::Div {
            if let Some(index) = tb.data().iter().position(|&v| v == 0.0) {
                return Err(NumError::Domain {
                    op: "div",
                    index,
                    value: 0.0,
                });
            }
        }
        let n: usize = shape.iter().product();
        let (da, db) = (ta.data(), tb.data());
        let (na, nb) = (da.len(), db.len());
        let f: fn(f64, f64) -> f64 = match kind {
            Binary::Add => |x, y| x + y,
            Binary::Sub => |x, y| x - y,
            Binary::Mul => |x, y| x * y,
            Binary::Div => |x, y| x / y,
        };
        let data = if na == n && nb == n {
            da.iter().zip(db).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(da[i % na], db[i % nb])).collect()
        };
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::Binary(kind, a, b), &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(Binary::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(Binary::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(Binary::Mul, a, b)
    }

    /// Elementwise division; a zero divisor is a domain error.
    pub fn div(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        self.binary(Binary::Div, a, b)
    }

    pub fn square(&mut self, x: Var) -> Result<Var, NumError> {
        self.binary(Binary::Mul, x, x)
    }

    /// `mask * a + (1 - mask) * b` for a constant 0/1 mask.
    pub fn select(&mut self, mask: &Tensor, a: Var, b: Var) -> Result<Var, NumError> {
        let m = self.constant(mask.clone());
        let inv = self.constant(mask.map(|v| 1.0 - v));
        let left = self.mul(m, a)?;
        let right = self.mul(inv, b)?;
        self.add(left, right)
    }

    // ---- linear algebra and reductions -----------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(NumError::ShapeMismatch {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::new(vec![m, n], matmul_raw(ta.data(), tb.data(), m, k, n))?;
        Ok(self.push(out, Op::MatMul(a, b), &[a, b]))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var, NumError> {
        let s = self.nodes[x.0].value.data().iter().sum();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    pub fn mean(&mut self, x: Var) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        if t.is_empty() {
            return Err(NumError::Invalid {
                op: "mean",
                detail: "mean of an empty tensor".into(),
            });
        }
        let m = t.data().iter().sum::<f64>() / t.len() as f64;
        Ok(self.push(Tensor::scalar(m), Op::Mean(x), &[x]))
    }

    /// Sum over the trailing axis, dropping it.
    pub fn sum_last(&mut self, x: Var) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let data: Vec<f64> = t.data().chunks(n).map(|c| c.iter().sum()).collect();
        let shape = leading_shape(t.shape());
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::SumLast(x), &[x]))
    }

    pub fn log_softmax_last(&mut self, x: Var) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let lse = log_sum_exp(row);
            data.extend(row.iter().map(|v| v - lse));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::LogSoftmaxLast(x), &[x]))
    }

    pub fn cumsum_last(&mut self, x: Var) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = Vec::with_capacity(t.len());
        for row in t.data().chunks(n) {
            let mut acc = 0.0;
            data.extend(row.iter().map(|v| {
                acc += v;
                acc
            }));
        }
        let out = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push(out, Op::CumsumLast(x), &[x]))
    }

    /// Pads the trailing axis with a constant.
    pub fn pad_last(&mut self, x: Var, before: usize, after: usize, value: f64) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let mut data = Vec::with_capacity(t.len() / n.max(1) * (n + before + after));
        for row in t.data().chunks(n) {
            data.extend(std::iter::repeat_n(value, before));
            data.extend_from_slice(row);
            data.extend(std::iter::repeat_n(value, after));
        }
        let mut shape = t.shape().to_vec();
        *shape.last_mut().expect("pad_last on a scalar") += before + after;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::PadLast { x, before, after }, &[x]))
    }

    /// Slice `[start, start + len)` of the trailing axis.
    pub fn narrow_last(&mut self, x: Var, start: usize, len: usize) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        if t.rank() == 0 || start + len > n {
            return Err(NumError::Invalid {
                op: "narrow_last",
                detail: format!("range {start}..{} out of bounds for shape {:?}", start + len, t.shape()),
            });
        }
        let data: Vec<f64> = t
            .data()
            .chunks(n)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        let mut shape = t.shape().to_vec();
        *shape.last_mut().unwrap() = len;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::NarrowLast { x, start }, &[x]))
    }

    pub fn concat_last(&mut self, a: Var, b: Var) -> Result<Var, NumError> {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        if ta.rank() == 0 || ta.rank() != tb.rank() || leading_shape(ta.shape()) != leading_shape(tb.shape()) {
            return Err(NumError::ShapeMismatch {
                op: "concat_last",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let (na, nb) = (ta.last_dim(), tb.last_dim());
        let mut data = Vec::with_capacity(ta.len() + tb.len());
        for (ra, rb) in ta.data().chunks(na.max(1)).zip(tb.data().chunks(nb.max(1))) {
            data.extend_from_slice(ra);
            data.extend_from_slice(rb);
        }
        let mut shape = ta.shape().to_vec();
        *shape.last_mut().unwrap() = na + nb;
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::ConcatLast(a, b), &[a, b]))
    }

    /// Picks one entry of the trailing axis per leading position.
    pub fn gather_last(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let n = t.last_dim();
        let rows = t.len() / n.max(1);
        if t.rank() == 0 || idx.len() != rows {
            return Err(NumError::ShapeMismatch {
                op: "gather_last",
                lhs: t.shape().to_vec(),
                rhs: vec![idx.len()],
            });
        }
        if let Some(&bad) = idx.iter().find(|&&i| i >= n) {
            return Err(NumError::Invalid {
                op: "gather_last",
                detail: format!("index {bad} out of range for trailing extent {n}"),
            });
        }
        let data: Vec<f64> = idx.iter().enumerate().map(|(r, &i)| t.data()[r * n + i]).collect();
        let out = Tensor::new(leading_shape(t.shape()), data)?;
        Ok(self.push(out, Op::GatherLast { x, idx }, &[x]))
    }

    /// Selects rows along the leading axis.
    pub fn index_select(&mut self, x: Var, idx: Vec<usize>) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        if t.rank() == 0 {
            return Err(NumError::Invalid {
                op: "index_select",
                detail: "cannot index a scalar".into(),
            });
        }
        let m = t.shape()[0];
        let stride = t.len() / m.max(1);
        if let Some(&bad) = idx.iter().find(|&&i| i >= m) {
            return Err(NumError::Invalid {
                op: "index_select",
                detail: format!("index {bad} out of range for leading extent {m}"),
            });
        }
        let mut data = Vec::with_capacity(idx.len() * stride);
        for &i in &idx {
            data.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
        }
        let mut shape = t.shape().to_vec();
        shape[0] = idx.len();
        let out = Tensor::new(shape, data)?;
        Ok(self.push(out, Op::IndexSelect { x, idx }, &[x]))
    }

    /// Repeats `x` over new leading axes; its shape must be a suffix of `shape`.
    pub fn broadcast_to(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let t = &self.nodes[x.0].value;
        let target = broadcast_shape("broadcast_to", t.shape(), shape)?;
        if target != shape {
            return Err(NumError::ShapeMismatch {
                op: "broadcast_to",
                lhs: t.shape().to_vec(),
                rhs: shape.to_vec(),
            });
        }
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|i| t.data()[i % t.len()]).collect();
        let out = Tensor::new(shape.to_vec(), data)?;
        Ok(self.push(out, Op::BroadcastTo(x), &[x]))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var, NumError> {
        let out = self.nodes[x.0].value.clone().reshaped(shape.to_vec())?;
        Ok(self.push(out, Op::Reshape(x), &[x]))
    }

    // ---- backward ---------------------------------------------------------

    /// Accumulates d(root)/d(param) into the store for every parameter leaf
    /// reachable from `root`, then clears the tape.
    pub fn backward(&mut self, root: Var, store: &mut ParamStore) -> Result<(), NumError> {
        if self.nodes.is_empty() {
            return Err(NumError::EmptyTape);
        }
        let root_value = &self.nodes[root.0].value;
        if root_value.len() != 1 {
            return Err(NumError::NonScalarRoot {
                shape: root_value.shape().to_vec(),
            });
        }
        let mut grads: Vec<Option<Tensor>> = (0..=root.0).map(|_| None).collect();
        grads[root.0] = Some(Tensor::full(root_value.shape().to_vec(), 1.0));

        for i in (0..=root.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            self.propagate(node, &g, &mut grads, store);
        }
        self.nodes.clear();
        Ok(())
    }

    fn propagate(&self, node: &Node, g: &Tensor, grads: &mut [Option<Tensor>], store: &mut ParamStore) {
        let gd = g.data();
        match &node.op {
            Op::Constant => {}
            Op::Param(id) => store.accumulate_grad(*id, g),
            Op::Unary(kind, x) => {
                let xv = self.value(*x).data();
                let yv = node.value.data();
                let dx: Vec<f64> = (0..gd.len())
                    .map(|i| {
                        let (x, y) = (xv[i], yv[i]);
                        gd[i]
                            * match *kind {
                                Unary::Neg => -1.0,
                                Unary::Exp => y,
                                Unary::Log => 1.0 / x,
                                Unary::Tanh => 1.0 - y * y,
                                Unary::Sigmoid => y * (1.0 - y),
                                Unary::Softplus => sigmoid(x),
                                Unary::Sqrt => 0.5 / y,
                                Unary::Abs => {
                                    if x > 0.0 {
                                        1.0
                                    } else if x < 0.0 {
                                        -1.0
                                    } else {
                                        0.0
                                    }
                                }
                                Unary::LeakyRelu(slope) => {
                                    if x > 0.0 {
                                        1.0
                                    } else {
                                        slope
                                    }
                                }
                                Unary::Scale(c) => c,
                                Unary::Shift(_) => 1.0,
                                Unary::Clamp(lo, hi) => {
                                    if x >= lo && x <= hi {
                                        1.0
                                    } else {
                                        0.0
                                    }
                                }
                            }
                    })
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::Binary(kind, a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                let (na, nb) = (av.len(), bv.len());
                let want_a = self.nodes[a.0].requires_grad;
                let want_b = self.nodes[b.0].requires_grad;
                let mut ga = vec![0.0; if want_a { na } else { 0 }];
                let mut gb = vec![0.0; if want_b { nb } else { 0 }];
                for (i, &gi) in gd.iter().enumerate() {
                    let (ia, ib) = (i % na, i % nb);
                    let (x, y) = (av[ia], bv[ib]);
                    let (da, db) = match kind {
                        Binary::Add => (gi, gi),
                        Binary::Sub => (gi, -gi),
                        Binary::Mul => (gi * y, gi * x),
                        Binary::Div => (gi / y, -gi * x / (y * y)),
                    };
                    if want_a {
                        ga[ia] += da;
                    }
                    if want_b {
                        gb[ib] += db;
                    }
                }
                if want_a {
                    self.accumulate(grads, *a, ga);
                }
                if want_b {
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if self.nodes[a.0].requires_grad {
                    // dA = G · Bᵀ
                    let mut ga = vec![0.0; m * k];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let brow = &tb.data()[p * n..(p + 1) * n];
                            ga[i * k + p] = grow.iter().zip(brow).map(|(x, y)| x * y).sum();
                        }
                    }
                    self.accumulate(grads, *a, ga);
                }
                if self.nodes[b.0].requires_grad {
                    // dB = Aᵀ · G
                    let mut gb = vec![0.0; k * n];
                    for i in 0..m {
                        let grow = &gd[i * n..(i + 1) * n];
                        for p in 0..k {
                            let av = ta.data()[i * k + p];
                            let out = &mut gb[p * n..(p + 1) * n];
                            for (o, gv) in out.iter_mut().zip(grow) {
                                *o += av * gv;
                            }
                        }
                    }
                    self.accumulate(grads, *b, gb);
                }
            }
            Op::Sum(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0]; n]);
            }
            Op::Mean(x) => {
                let n = self.value(*x).len();
                self.accumulate(grads, *x, vec![gd[0] / n as f64; n]);
            }
            Op::SumLast(x) => {
                let n = self.value(*x).last_dim();
                let dx = gd.iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect();
                self.accumulate(grads, *x, dx);
            }
            Op::LogSoftmaxLast(x) => {
                let n = node.value.last_dim();
                let mut dx = Vec::with_capacity(gd.len());
                for (grow, yrow) in gd.chunks(n).zip(node.value.data().chunks(n)) {
                    let total: f64 = grow.iter().sum();
                    dx.extend(grow.iter().zip(yrow).map(|(g, y)| g - y.exp() * total));
                }
                self.accumulate(grads, *x, dx);
            }
            Op::CumsumLast(x) => {
                let n = node.value.last_dim();
                let mut dx = vec![0.0; gd.len()];
                for (grow, drow) in gd.chunks(n).zip(dx.chunks_mut(n)) {
                    let mut acc = 0.0;
                    for j in (0..n).rev() {
                        acc += grow[j];
                        drow[j] = acc;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::PadLast { x, before, after } => {
                let n = node.value.last_dim();
                let dx = gd
                    .chunks(n)
                    .flat_map(|row| row[*before..n - *after].iter().copied())
                    .collect();
                self.accumulate(grads, *x, dx);
            }
            Op::NarrowLast { x, start } => {
                let src = self.value(*x);
                let n = src.last_dim();
                let len = node.value.last_dim();
                let mut dx = vec![0.0; src.len()];
                for (r, grow) in gd.chunks(len).enumerate() {
                    dx[r * n + start..r * n + start + len].copy_from_slice(grow);
                }
                self.accumulate(grads, *x, dx);
            }
            Op::ConcatLast(a, b) => {
                let (na, nb) = (self.value(*a).last_dim(), self.value(*b).last_dim());
                let mut ga = Vec::with_capacity(self.value(*a).len());
                let mut gb = Vec::with_capacity(self.value(*b).len());
                for row in gd.chunks(na + nb) {
                    ga.extend_from_slice(&row[..na]);
                    gb.extend_from_slice(&row[na..]);
                }
                self.accumulate(grads, *a, ga);
                self.accumulate(grads, *b, gb);
            }
            Op::GatherLast { x, idx } => {
                let src = self.value(*x);
                let n = src.last_dim();
                let mut dx = vec![0.0; src.len()];
                for (r, (&i, &gv)) in idx.iter().zip(gd).enumerate() {
                    dx[r * n + i] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::IndexSelect { x, idx } => {
                let src = self.value(*x);
                let stride = src.len() / src.shape()[0].max(1);
                let mut dx = vec![0.0; src.len()];
                for (r, &i) in idx.iter().enumerate() {
                    for (d, gv) in dx[i * stride..(i + 1) * stride]
                        .iter_mut()
                        .zip(&gd[r * stride..(r + 1) * stride])
                    {
                        *d += gv;
                    }
                }
                self.accumulate(grads, *x, dx);
            }
            Op::BroadcastTo(x) => {
                let n = self.value(*x).len();
                let mut dx = vec![0.0; n];
                for (i, gv) in gd.iter().enumerate() {
                    dx[i % n] += gv;
                }
                self.accumulate(grads, *x, dx);
            }
            Op::Reshape(x) => self.accumulate(grads, *x, gd.to_vec()),
        }
    }

    fn accumulate(&self, grads: &mut [Option<Tensor>], v: Var, g: Vec<f64>) {
        let node = &self.nodes[v.0];
        if !node.requires_grad {
            return;
        }
        match &mut grads[v.0] {
            Some(existing) => {
                for (e, x) in existing.data_mut().iter_mut().zip(&g) {
                    *e += x;
                }
            }
            slot @ None => {
                *slot = Some(Tensor::new(node.value.shape().to_vec(), g).expect("gradient shape"));
            }
        }
    }
}

fn leading_shape(shape: &[usize]) -> Vec<usize> {
    shape[..shape.len().saturating_sub(1)].to_vec()
}

pub(crate) fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let orow = &mut out[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            for (o, bv) in orow.iter_mut().zip(&b[p * n..(p + 1) * n]) {
                *o += av * bv;
            }
        }
    }
    out
}

pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

pub fn log_sum_exp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if !m.is_finite() {
        return m;
    }
    m + xs.iter().map(|v| (v - m).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn leaf(store: &mut ParamStore, tape: &mut Tape, t: Tensor) -> (ParamId, Var) {
        let id = store.add("x", t);
        (id, tape.param(store, id))
    }

    #[test]
    fn matmul_by_hand() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::matrix(2, 2, vec![1.0, 2.0, 3.0, 4.0]).unwrap());
        let b = tape.constant(Tensor::matrix(2, 1, vec![1.0, 1.0]).unwrap());
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(c).shape(), &[2, 1]);
        assert_eq!(tape.value(c).data(), &[3.0, 7.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        let msg = err.to_string();
        assert!(msg.contains("matmul") && msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn leaky_relu_slope() {
        let mut tape = Tape::new();
        let x = tape.scalar(-10.0);
        let y = tape.leaky_relu(x, 0.1).unwrap();
        assert_eq!(tape.value(y).item(), Some(-1.0));
    }

    #[test]
    fn log_softmax_of_equal_logits() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = tape.log_softmax_last(x).unwrap();
        for v in tape.value(y).data() {
            assert!((v + std::f64::consts::LN_2).abs() < 1e-15);
        }
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(matches!(tape.log(x), Err(NumError::Domain { op: "log", index: 1, .. })));
        let one = tape.scalar(1.0);
        assert!(matches!(tape.div(one, x), Err(NumError::Domain { op: "div", .. })));
    }

    #[test]
    fn square_gradient() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (id, x) = leaf(&mut store, &mut tape, Tensor::scalar(3.0));
        let y = tape.mul(x, x).unwrap();
        tape.backward(y, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().item(), Some(6.0));
        assert!(tape.is_empty());
    }

    #[test]
    fn sum_exp_gradient() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (id, x) = leaf(&mut store, &mut tape, Tensor::vector(vec![0.0, 0.0]));
        let e = tape.exp(x).unwrap();
        let s = tape.sum(e).unwrap();
        tape.backward(s, &mut store).unwrap();
        assert_eq!(store.get(id).grad.as_ref().unwrap().data(), &[1.0, 1.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut store = ParamStore::new();
        let mut tape = Tape::new();
        let (_, x) = leaf(&mut store, &mut tape, Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(
            tape.backward(x, &mut store),
            Err(NumError::NonScalarRoot { .. })
        ));
        let mut empty = Tape::new();
        assert!(matches!(empty.backward(Var(0), &mut store), Err(NumError::EmptyTape)));
    }

    #[test]
    fn gradients_accumulate_across_backwards() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(2.0));
        for _ in 0..2 {
            let mut tape = Tape::new();
            let x = tape.param(&store, id);
            let y = tape.mul_scalar(x, 5.0).unwrap();
            tape.backward(y, &mut store).unwrap();
        }
        assert_eq!(store.get(id).grad.as_ref().unwrap().item(), Some(10.0));
    }

    #[test]
    fn constants_do_not_record_ops() {
        let mut tape = Tape::new();
        let a = tape.scalar(1.0);
        let b = tape.exp(a).unwrap();
        assert!(!tape.requires_grad(b));
    }
}

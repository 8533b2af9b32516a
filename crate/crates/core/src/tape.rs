//! Define-by-run reverse-mode automatic differentiation.
//!
//! A [`Tape`] records every primitive applied during a forward pass. Each
//! recorded node keeps its value plus whatever the backward rule needs, and
//! only ever refers to earlier nodes, so a single reverse sweep over the node
//! list is a valid topological order. Build a fresh tape for every forward
//! pass; tapes are cheap and never reused across parameter updates.
//!
//! Binary elementwise ops broadcast in one restricted form: the shape of the
//! smaller operand must be a suffix of the larger operand's shape (a scalar
//! `[]` is a suffix of everything). That covers bias rows `[n]` against
//! `[batch, n]` and scalar constants, which is all the library needs.

use std::sync::Arc;

use crate::error::{Error, Result};
use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum UnaryKind {
    Sigmoid,
    Tanh,
    /// Exponential linear unit with α = 1.
    Elu,
    Softplus,
    Exp,
    Log,
    Square,
    Negate,
    Sqrt,
}

impl UnaryKind {
    pub fn name(self) -> &'static str {
        match self {
            UnaryKind::Sigmoid => "sigmoid",
            UnaryKind::Tanh => "tanh",
            UnaryKind::Elu => "elu",
            UnaryKind::Softplus => "softplus",
            UnaryKind::Exp => "exp",
            UnaryKind::Log => "log",
            UnaryKind::Square => "square",
            UnaryKind::Negate => "negate",
            UnaryKind::Sqrt => "sqrt",
        }
    }

    pub fn apply(self, x: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => sigmoid(x),
            UnaryKind::Tanh => x.tanh(),
            UnaryKind::Elu => {
                if x >= 0.0 {
                    x
                } else {
                    x.exp_m1()
                }
            }
            UnaryKind::Softplus => softplus(x),
            UnaryKind::Exp => x.exp(),
            UnaryKind::Log => x.ln(),
            UnaryKind::Square => x * x,
            UnaryKind::Negate => -x,
            UnaryKind::Sqrt => x.sqrt(),
        }
    }

    /// Derivative given the input `x` and the already computed output `y`.
    fn derivative(self, x: f64, y: f64) -> f64 {
        match self {
            UnaryKind::Sigmoid => y * (1.0 - y),
            UnaryKind::Tanh => 1.0 - y * y,
            // right derivative at 0
            UnaryKind::Elu => {
                if x >= 0.0 {
                    1.0
                } else {
                    y + 1.0
                }
            }
            UnaryKind::Softplus => sigmoid(x),
            UnaryKind::Exp => y,
            UnaryKind::Log => 1.0 / x,
            UnaryKind::Square => 2.0 * x,
            UnaryKind::Negate => -1.0,
            UnaryKind::Sqrt => 0.5 / y,
        }
    }
}

/// Logistic sigmoid, evaluated without overflow for large |x|.
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `log(1 + e^x)`, evaluated without overflow for large |x|.
pub fn softplus(x: f64) -> f64 {
    if x > 0.0 {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum BinaryKind {
    Add,
    Sub,
    Mul,
    Div,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ReduceKind {
    Sum,
    Mean,
}

#[derive(Debug)]
enum Op {
    Leaf,
    Param(ParamId),
    Unary(UnaryKind, Var),
    Binary(BinaryKind, Var, Var),
    Affine {
        x: Var,
        w: Var,
        b: Option<Var>,
        mask: Option<Arc<Tensor>>,
    },
    Reduce {
        kind: ReduceKind,
        x: Var,
        axis: Option<usize>,
    },
    SelectCols {
        x: Var,
        cols: Vec<usize>,
    },
    ConcatCols(Vec<Var>),
    ClampMin {
        x: Var,
        floor: f64,
    },
    Reshape(Var),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Append-only record of a forward computation.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    param_vars: Vec<Option<Var>>,
}

/// Gradients of one scalar with respect to every node of a tape.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `var`, or `None` when the loss does not depend on it.
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(|g| g.as_ref())
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

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Scalar value of a one-element node.
    pub fn scalar(&self, v: Var) -> f64 {
        self.nodes[v.0].value.data()[0]
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf)
    }

    pub fn scalar_const(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Records parameter `id`. Repeated calls return the same node.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let i = id.index();
        if self.param_vars.len() <= i {
            self.param_vars.resize(i + 1, None);
        }
        if let Some(v) = self.param_vars[i] {
            return v;
        }
        let v = self.push(store.value(id).clone(), Op::Param(id));
        self.param_vars[i] = Some(v);
        v
    }

    pub fn unary(&mut self, kind: UnaryKind, x: Var) -> Result<Var> {
        let input = &self.nodes[x.0].value;
        if kind == UnaryKind::Log {
            if let Some(bad) = input.data().iter().find(|&&v| !(v > 0.0)) {
                return Err(Error::domain("log", format!("non-positive input {bad}")));
            }
        }
        if kind == UnaryKind::Sqrt {
            if let Some(bad) = input.data().iter().find(|&&v| !(v >= 0.0)) {
                return Err(Error::domain("sqrt", format!("negative input {bad}")));
            }
        }
        let value = input.map(|v| kind.apply(v));
        Ok(self.push(value, Op::Unary(kind, x)))
    }

    pub fn sigmoid(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sigmoid, x)
    }

    pub fn tanh(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Tanh, x)
    }

    pub fn elu(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Elu, x)
    }

    pub fn softplus(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Softplus, x)
    }

    pub fn exp(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Exp, x)
    }

    pub fn log(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Log, x)
    }

    pub fn square(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Square, x)
    }

    pub fn neg(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Negate, x)
    }

    pub fn sqrt(&mut self, x: Var) -> Result<Var> {
        self.unary(UnaryKind::Sqrt, x)
    }

    pub fn binary(&mut self, kind: BinaryKind, a: Var, b: Var) -> Result<Var> {
        let av = &self.nodes[a.0].value;
        let bv = &self.nodes[b.0].value;
        let out_shape = broadcast_shape(av.shape(), bv.shape())
            .ok_or_else(|| Error::shape(binary_name(kind), av.shape(), bv.shape()))?;
        let n = out_shape.iter().product::<usize>();
        let (ad, bd) = (av.data(), bv.data());
        let (na, nb) = (ad.len(), bd.len());
        let f = |x: f64, y: f64| match kind {
            BinaryKind::Add => x + y,
            BinaryKind::Sub => x - y,
            BinaryKind::Mul => x * y,
            BinaryKind::Div => x / y,
        };
        let data: Vec<f64> = if na == nb {
            ad.iter().zip(bd).map(|(&x, &y)| f(x, y)).collect()
        } else {
            (0..n).map(|i| f(ad[i % na], bd[i % nb])).collect()
        };
        let value = Tensor::new(out_shape, data)?;
        Ok(self.push(value, Op::Binary(kind, a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Add, a, b)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Sub, a, b)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Mul, a, b)
    }

    pub fn div(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary(BinaryKind::Div, a, b)
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar_const(c);
        self.mul(x, c)
    }

    pub fn add_scalar(&mut self, x: Var, c: f64) -> Result<Var> {
        let c = self.scalar_const(c);
        self.add(x, c)
    }

    /// `x · (w ⊙ mask) + b` for `x: [batch, in]`, `w: [in, out]`, `b: [out]`.
    ///
    /// The mask is applied again to the weight gradient, so masked-out
    /// weights always receive exactly zero gradient.
    pub fn affine(
        &mut self,
        x: Var,
        w: Var,
        b: Option<Var>,
        mask: Option<Arc<Tensor>>,
    ) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let wv = &self.nodes[w.0].value;
        let (batch, n_in) = xv.dims2()?;
        let (w_in, n_out) = wv.dims2()?;
        if w_in != n_in {
            return Err(Error::shape("affine", xv.shape(), wv.shape()));
        }
        if let Some(m) = &mask {
            if m.shape() != wv.shape() {
                return Err(Error::shape("affine(mask)", m.shape(), wv.shape()));
            }
            if m.data().iter().any(|&v| v != 0.0 && v != 1.0) {
                return Err(Error::Contract("affine mask entries must be 0 or 1".into()));
            }
        }
        let w_eff = effective_weight(wv, mask.as_deref());
        let mut out = vec![0.0; batch * n_out];
        if let Some(b) = b {
            let bv = &self.nodes[b.0].value;
            if bv.shape() != [n_out] {
                return Err(Error::shape("affine(bias)", bv.shape(), &[n_out]));
            }
            for row in out.chunks_mut(n_out) {
                row.copy_from_slice(bv.data());
            }
        }
        matmul_acc(xv.data(), &w_eff, &mut out, batch, n_in, n_out);
        let value = Tensor::from_rows(batch, n_out, out)?;
        Ok(self.push(value, Op::Affine { x, w, b, mask }))
    }

    pub fn reduce(&mut self, kind: ReduceKind, x: Var, axis: Option<usize>) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let value = match axis {
            None => {
                let s = xv.sum();
                match kind {
                    ReduceKind::Sum => Tensor::scalar(s),
                    ReduceKind::Mean => Tensor::scalar(s / xv.len() as f64),
                }
            }
            Some(axis) => {
                if axis >= xv.rank() {
                    return Err(Error::shape("reduce(axis)", xv.shape(), &[axis]));
                }
                let (outer, n, inner) = axis_split(xv.shape(), axis);
                let mut out = vec![0.0; outer * inner];
                let d = xv.data();
                for o in 0..outer {
                    for k in 0..n {
                        let base = (o * n + k) * inner;
                        for i in 0..inner {
                            out[o * inner + i] += d[base + i];
                        }
                    }
                }
                if kind == ReduceKind::Mean {
                    let inv = 1.0 / n as f64;
                    out.iter_mut().for_each(|v| *v *= inv);
                }
                let mut shape = xv.shape().to_vec();
                shape.remove(axis);
                Tensor::new(shape, out)?
            }
        };
        Ok(self.push(value, Op::Reduce { kind, x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, None)
    }

    pub fn mean(&mut self, x: Var) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, None)
    }

    pub fn sum_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Sum, x, Some(axis))
    }

    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        self.reduce(ReduceKind::Mean, x, Some(axis))
    }

    /// Gathers columns of a matrix: `out[:, k] = x[:, cols[k]]`.
    pub fn select_cols(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let xv = &self.nodes[x.0].value;
        let (rows, n) = xv.dims2()?;
        if let Some(&bad) = cols.iter().find(|&&c| c >= n) {
            return Err(Error::shape("select_cols", xv.shape(), &[bad]));
        }
        let k = cols.len();
        let mut out = Vec::with_capacity(rows * k);
        for r in 0..rows {
            let row = xv.row(r);
            out.extend(cols.iter().map(|&c| row[c]));
        }
        let value = Tensor::from_rows(rows, k, out)?;
        Ok(self.push(
            value,
            Op::SelectCols {
                x,
                cols: cols.to_vec(),
            },
        ))
    }

    /// Column range `[start, end)` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let cols: Vec<usize> = (start..end).collect();
        self.select_cols(x, &cols)
    }

    /// Concatenates matrices with equal row counts side by side.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Contract("concat_cols of nothing".into()))?;
        let (rows, _) = self.nodes[first.0].value.dims2()?;
        let mut total = 0;
        for p in parts {
            let v = &self.nodes[p.0].value;
            let (r, c) = v.dims2()?;
            if r != rows {
                return Err(Error::shape("concat_cols", &[rows], v.shape()));
            }
            total += c;
        }
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for p in parts {
                out.extend_from_slice(self.nodes[p.0].value.row(r));
            }
        }
        let value = Tensor::from_rows(rows, total, out)?;
        Ok(self.push(value, Op::ConcatCols(parts.to_vec())))
    }

    /// Elementwise `max(x, floor)`. The gradient is passed through only where
    /// `x > floor`.
    pub fn clamp_min(&mut self, x: Var, floor: f64) -> Result<Var> {
        let value = self.nodes[x.0].value.map(|v| v.max(floor));
        Ok(self.push(value, Op::ClampMin { x, floor }))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.nodes[x.0].value.reshape(shape.to_vec())?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    /// Reverse sweep from a scalar `loss`, returning gradients for every node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = &self.nodes[loss.0].value;
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; loss.0 + 1];
        grads[loss.0] = Some(Tensor::ones(lv.shape()));

        for i in (0..=loss.0).rev() {
            let Some(g) = grads[i].take() else { continue };
            let node = &self.nodes[i];
            match &node.op {
                Op::Leaf | Op::Param(_) => {}
                Op::Unary(kind, x) => {
                    let xv = &self.nodes[x.0].value;
                    let gx: Vec<f64> = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .zip(node.value.data())
                        .map(|((&gi, &xi), &yi)| gi * kind.derivative(xi, yi))
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::Binary(kind, a, b) => {
                    let av = &self.nodes[a.0].value;
                    let bv = &self.nodes[b.0].value;
                    let (ad, bd, gd) = (av.data(), bv.data(), g.data());
                    let (na, nb) = (ad.len(), bd.len());
                    let mut ga = vec![0.0; na];
                    let mut gb = vec![0.0; nb];
                    for (k, &gk) in gd.iter().enumerate() {
                        let (x, y) = (ad[k % na], bd[k % nb]);
                        let (dx, dy) = match kind {
                            BinaryKind::Add => (gk, gk),
                            BinaryKind::Sub => (gk, -gk),
                            BinaryKind::Mul => (gk * y, gk * x),
                            BinaryKind::Div => (gk / y, -gk * x / (y * y)),
                        };
                        ga[k % na] += dx;
                        gb[k % nb] += dy;
                    }
                    accumulate(&mut grads, *a, av.shape(), ga);
                    accumulate(&mut grads, *b, bv.shape(), gb);
                }
                Op::Affine { x, w, b, mask } => {
                    let xv = &self.nodes[x.0].value;
                    let wv = &self.nodes[w.0].value;
                    let (batch, n_in) = xv.dims2()?;
                    let n_out = wv.shape()[1];
                    let gd = g.data();
                    let w_eff = effective_weight(wv, mask.as_deref());
                    // dx = g · w_effᵀ
                    let mut gx = vec![0.0; batch * n_in];
                    for r in 0..batch {
                        let grow = &gd[r * n_out..(r + 1) * n_out];
                        for (j, gxj) in gx[r * n_in..(r + 1) * n_in].iter_mut().enumerate() {
                            let wrow = &w_eff[j * n_out..(j + 1) * n_out];
                            *gxj = dot(grow, wrow);
                        }
                    }
                    // dW = xᵀ · g, masked
                    let mut gw = vec![0.0; n_in * n_out];
                    let xd = xv.data();
                    for r in 0..batch {
                        let grow = &gd[r * n_out..(r + 1) * n_out];
                        for j in 0..n_in {
                            let xj = xd[r * n_in + j];
                            if xj == 0.0 {
                                continue;
                            }
                            for (gwk, &gk) in gw[j * n_out..(j + 1) * n_out].iter_mut().zip(grow) {
                                *gwk += xj * gk;
                            }
                        }
                    }
                    if let Some(m) = mask {
                        gw.iter_mut().zip(m.data()).for_each(|(v, &mk)| *v *= mk);
                    }
                    accumulate(&mut grads, *x, xv.shape(), gx);
                    accumulate(&mut grads, *w, wv.shape(), gw);
                    if let Some(b) = b {
                        let mut gb = vec![0.0; n_out];
                        for r in 0..batch {
                            for (k, v) in gb.iter_mut().enumerate() {
                                *v += gd[r * n_out + k];
                            }
                        }
                        accumulate(&mut grads, *b, &[n_out], gb);
                    }
                }
                Op::Reduce { kind, x, axis } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = match axis {
                        None => {
                            let mut s = g.data()[0];
                            if *kind == ReduceKind::Mean {
                                s /= xv.len() as f64;
                            }
                            vec![s; xv.len()]
                        }
                        Some(axis) => {
                            let (outer, n, inner) = axis_split(xv.shape(), *axis);
                            let scale = match kind {
                                ReduceKind::Sum => 1.0,
                                ReduceKind::Mean => 1.0 / n as f64,
                            };
                            let gd = g.data();
                            let mut gx = vec![0.0; xv.len()];
                            for o in 0..outer {
                                for k in 0..n {
                                    let base = (o * n + k) * inner;
                                    for i in 0..inner {
                                        gx[base + i] = gd[o * inner + i] * scale;
                                    }
                                }
                            }
                            gx
                        }
                    };
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::SelectCols { x, cols } => {
                    let xv = &self.nodes[x.0].value;
                    let (rows, n) = xv.dims2()?;
                    let k = cols.len();
                    let mut gx = vec![0.0; rows * n];
                    let gd = g.data();
                    for r in 0..rows {
                        for (j, &c) in cols.iter().enumerate() {
                            gx[r * n + c] += gd[r * k + j];
                        }
                    }
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::ConcatCols(parts) => {
                    let (rows, total) = g.dims2()?;
                    let mut offset = 0;
                    for p in parts {
                        let pv = &self.nodes[p.0].value;
                        let c = pv.shape()[1];
                        let mut gp = Vec::with_capacity(rows * c);
                        for r in 0..rows {
                            let start = r * total + offset;
                            gp.extend_from_slice(&g.data()[start..start + c]);
                        }
                        accumulate(&mut grads, *p, pv.shape(), gp);
                        offset += c;
                    }
                }
                Op::ClampMin { x, floor } => {
                    let xv = &self.nodes[x.0].value;
                    let gx = g
                        .data()
                        .iter()
                        .zip(xv.data())
                        .map(|(&gi, &xi)| if xi > *floor { gi } else { 0.0 })
                        .collect();
                    accumulate(&mut grads, *x, xv.shape(), gx);
                }
                Op::Reshape(x) => {
                    let xv = &self.nodes[x.0].value;
                    accumulate(&mut grads, *x, xv.shape(), g.data().to_vec());
                }
            }
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    /// Runs the reverse sweep and writes parameter gradients into `store`.
    ///
    /// Every gradient slot in the store is overwritten; parameters that do not
    /// influence `loss` end up with zero gradient.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let grads = self.gradients(loss)?;
        store.zero_grad();
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let Op::Param(id) = node.op {
                if let Some(g) = grads.get(Var(i)) {
                    let slot = store.grad_mut(id);
                    slot.data_mut()
                        .iter_mut()
                        .zip(g.data())
                        .for_each(|(s, &v)| *s += v);
                }
            }
        }
        Ok(())
    }
}

fn binary_name(kind: BinaryKind) -> &'static str {
    match kind {
        BinaryKind::Add => "add",
        BinaryKind::Sub => "sub",
        BinaryKind::Mul => "mul",
        BinaryKind::Div => "div",
    }
}

fn broadcast_shape(a: &[usize], b: &[usize]) -> Option<Vec<usize>> {
    if a == b {
        return Some(a.to_vec());
    }
    let (long, short) = if a.len() >= b.len() { (a, b) } else { (b, a) };
    let suffix = &long[long.len() - short.len()..];
    (suffix == short).then(|| long.to_vec())
}

fn axis_split(shape: &[usize], axis: usize) -> (usize, usize, usize) {
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    (outer, shape[axis], inner)
}

fn effective_weight(w: &Tensor, mask: Option<&Tensor>) -> Vec<f64> {
    match mask {
        Some(m) => w.data().iter().zip(m.data()).map(|(a, b)| a * b).collect(),
        None => w.data().to_vec(),
    }
}

fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// `out += x · w` with `x: [rows, n_in]`, `w: [n_in, n_out]`.
fn matmul_acc(x: &[f64], w: &[f64], out: &mut [f64], rows: usize, n_in: usize, n_out: usize) {
    for r in 0..rows {
        let orow = &mut out[r * n_out..(r + 1) * n_out];
        for j in 0..n_in {
            let xj = x[r * n_in + j];
            if xj == 0.0 {
                continue;
            }
            let wrow = &w[j * n_out..(j + 1) * n_out];
            for (o, &wv) in orow.iter_mut().zip(wrow) {
                *o += xj * wv;
            }
        }
    }
}

fn accumulate(grads: &mut [Option<Tensor>], v: Var, shape: &[usize], g: Vec<f64>) {
    match &mut grads[v.0] {
        Some(existing) => existing
            .data_mut()
            .iter_mut()
            .zip(&g)
            .for_each(|(e, &x)| *e += x),
        slot @ None => {
            *slot = Some(Tensor::new(shape.to_vec(), g).expect("gradient shape"));
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: f64, b: f64, tol: f64) -> bool {
        (a - b).abs() <= tol
    }

    #[test]
    fn unary_reference_values() {
        assert_eq!(UnaryKind::Sigmoid.apply(0.0), 0.5);
        assert!(close(
            UnaryKind::Elu.apply(-1.0),
            (-1.0f64).exp() - 1.0,
            1e-15
        ));
        assert!(close(UnaryKind::Elu.apply(-1.0), -0.63212, 1e-5));
        assert!(close(UnaryKind::Softplus.apply(0.0), 2f64.ln(), 1e-15));
        assert!(close(UnaryKind::Softplus.apply(800.0), 800.0, 1e-12));
        assert_eq!(UnaryKind::Softplus.apply(-800.0), 0.0);
        assert_eq!(sigmoid(-800.0), 0.0);
        assert_eq!(sigmoid(800.0), 1.0);
    }

    #[test]
    fn elu_right_derivative_at_zero() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.0]));
        let y = t.elu(x).unwrap();
        let s = t.sum(y).unwrap();
        let g = t.gradients(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0]);
    }

    #[test]
    fn log_of_non_positive_is_domain_error() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 0.0]));
        match t.log(x) {
            Err(Error::Domain { op, .. }) => assert_eq!(op, "log"),
            other => panic!("expected domain error, got {other:?}"),
        }
    }

    #[test]
    fn affine_identity_weights() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(&[&[1.0, 2.0]]));
        let w = t.constant(Tensor::identity(2));
        let b = t.constant(Tensor::vector(vec![0.0, 0.0]));
        let y = t.affine(x, w, Some(b), None).unwrap();
        assert_eq!(t.value(y).data(), &[1.0, 2.0]);
    }

    #[test]
    fn affine_all_zero_mask_is_inert() {
        let mut store = ParamStore::new();
        let wid = store
            .add("w", Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]))
            .unwrap();
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(&[&[1.0, -2.0], &[0.5, 3.0]]));
        let w = t.param(&store, wid);
        let b = t.constant(Tensor::vector(vec![0.25, -1.0]));
        let mask = Arc::new(Tensor::zeros(&[2, 2]));
        let y = t.affine(x, w, Some(b), Some(mask)).unwrap();
        assert_eq!(t.value(y).data(), &[0.25, -1.0, 0.25, -1.0]);
        let s = t.sum(y).unwrap();
        t.backward(s, &mut store).unwrap();
        assert!(store.grad(wid).data().iter().all(|&g| g == 0.0));
    }

    #[test]
    fn affine_shape_error_lists_both_shapes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::zeros(&[1, 3]));
        let w = t.constant(Tensor::zeros(&[2, 2]));
        match t.affine(x, w, None, None) {
            Err(Error::Shape { left, right, .. }) => {
                assert_eq!(left, vec![1, 3]);
                assert_eq!(right, vec![2, 2]);
            }
            other => panic!("expected shape error, got {other:?}"),
        }
    }

    #[test]
    fn reductions() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        let s = t.sum(x).unwrap();
        assert_eq!(t.scalar(s), 6.0);
        let c = t.constant(Tensor::full(&[2, 3], 1.75));
        let m = t.mean(c).unwrap();
        assert_eq!(t.scalar(m), 1.75);
        let g = t.gradients(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);
        assert!(t.reduce(ReduceKind::Sum, x, Some(1)).is_err());
    }

    #[test]
    fn reduce_along_axes() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0]]));
        let r0 = t.sum_axis(x, 0).unwrap();
        let r1 = t.mean_axis(x, 1).unwrap();
        assert_eq!(t.value(r0).data(), &[5.0, 7.0, 9.0]);
        assert_eq!(t.value(r1).data(), &[2.0, 5.0]);
        assert_eq!(t.value(r1).shape(), &[2]);
    }

    #[test]
    fn backward_of_sum_of_squares() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let mut t = Tape::new();
        let th = t.param(&store, id);
        let sq = t.square(th).unwrap();
        let loss = t.sum(sq).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[2.0, -4.0]);
    }

    #[test]
    fn backward_of_independent_loss_is_zero() {
        let mut store = ParamStore::new();
        let id = store.add("theta", Tensor::vector(vec![1.0, -2.0])).unwrap();
        let other = store.add("other", Tensor::vector(vec![3.0])).unwrap();
        let mut t = Tape::new();
        let _ = t.param(&store, id);
        let o = t.param(&store, other);
        let loss = t.sum(o).unwrap();
        t.backward(loss, &mut store).unwrap();
        assert_eq!(store.grad(id).data(), &[0.0, 0.0]);
    }

    #[test]
    fn non_scalar_loss_is_rejected() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![1.0, 2.0]));
        assert!(matches!(t.gradients(x), Err(Error::Contract(_))));
    }

    #[test]
    fn broadcasting_rules() {
        let mut t = Tape::new();
        let m = t.constant(Tensor::matrix(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let row = t.constant(Tensor::vector(vec![10.0, 20.0]));
        let y = t.add(m, row).unwrap();
        assert_eq!(t.value(y).data(), &[11.0, 22.0, 13.0, 24.0]);
        let col = t.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(t.add(m, col).is_err());
        let s = t.sum(y).unwrap();
        let g = t.gradients(s).unwrap();
        assert_eq!(g.get(row).unwrap().data(), &[2.0, 2.0]);
    }

    #[test]
    fn clamp_min_blocks_gradient_below_floor() {
        let mut t = Tape::new();
        let x = t.constant(Tensor::vector(vec![0.2, 0.7]));
        let c = t.clamp_min(x, 0.5).unwrap();
        assert_eq!(t.value(c).data(), &[0.5, 0.7]);
        let s = t.sum(c).unwrap();
        let g = t.gradients(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[0.0, 1.0]);
    }

    #[test]
    fn select_and_concat_route_gradients() {
        let mut t = Tape::new();
        let a = t.constant(Tensor::matrix(&[&[1.0, 2.0, 3.0]]));
        let b = t.constant(Tensor::matrix(&[&[4.0]]));
        let s = t.select_cols(a, &[2, 0, 2]).unwrap();
        assert_eq!(t.value(s).data(), &[3.0, 1.0, 3.0]);
        let c = t.concat_cols(&[s, b]).unwrap();
        assert_eq!(t.value(c).data(), &[3.0, 1.0, 3.0, 4.0]);
        let l = t.sum(c).unwrap();
        let g = t.gradients(l).unwrap();
        assert_eq!(g.get(a).unwrap().data(), &[1.0, 0.0, 2.0]);
        assert_eq!(g.get(b).unwrap().data(), &[1.0]);
    }
}

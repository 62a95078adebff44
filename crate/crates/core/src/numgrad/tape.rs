//! Tape-style reverse-mode differentiation over dense `f64` tensors.
//!
//! A [`Tape`] is rebuilt for every forward pass. Operations append nodes
//! holding their output values; [`Tape::backward`] walks the nodes in
//! reverse creation order, which is a valid topological order because a
//! node can only reference nodes created before it.

use super::params::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Smallest row norm accepted by [`Tape::l2_normalize`].
pub const MIN_NORM: f64 = 1e-12;

#[derive(Debug)]
enum Op {
    Constant,
    Param(String),
    MatMul(usize, usize),
    Transpose(usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    MulCol(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Sum(usize),
    Mean(usize),
    SumLast(usize),
    Abs(usize),
    Ln(usize),
    Exp(usize),
    Sigmoid(usize),
    Tanh(usize),
    Relu(usize),
    Clamp(usize, f64, f64),
    Cos(usize),
    Acos(usize),
    L2Normalize(usize, Vec<f64>),
    Dot(usize, usize),
    Concat(Vec<usize>),
    LogSumExp(usize),
    Pick(usize, Vec<usize>),
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// Records a computation graph for one forward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Rows and columns when a tensor is viewed as a stack of last-axis vectors.
fn last_axis(t: &Tensor) -> (usize, usize) {
    let cols = t.shape().last().copied().unwrap_or(1);
    (t.len() / cols, cols)
}

fn matmul_kernel(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    for i in 0..m {
        let crow = &mut c[i * n..(i + 1) * n];
        for p in 0..k {
            let av = a[i * k + p];
            let brow = &b[p * n..(p + 1) * n];
            for (cv, bv) in crow.iter_mut().zip(brow) {
                *cv += av * bv;
            }
        }
    }
    c
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

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    /// Scalar value of `v`.
    pub fn item(&self, v: Var) -> f64 {
        self.nodes[v.0].value.item()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push_unary(&mut self, a: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad;
        self.push(value, op, rg)
    }

    fn push_binary(&mut self, a: Var, b: Var, value: Tensor, op: Op) -> Var {
        let rg = self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad;
        self.push(value, op, rg)
    }

    fn map(&self, a: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = &self.nodes[a.0].value;
        let data = t.data().iter().map(|&x| f(x)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(Error::Shape {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    // ---- leaves -------------------------------------------------------

    /// A value that receives no gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Constant, false)
    }

    pub fn scalar(&mut self, value: f64) -> Var {
        self.constant(Tensor::scalar(value))
    }

    /// Binds a trainable parameter; its gradient is accumulated into `params`
    /// by [`Tape::backward`].
    pub fn param(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        let value = params.value(name)?.clone();
        Ok(self.push(value, Op::Param(name.to_string()), true))
    }

    /// Binds a parameter's current value as a constant.
    pub fn frozen(&mut self, params: &ParamSet, name: &str) -> Result<Var> {
        Ok(self.constant(params.value(name)?.clone()))
    }

    /// `param` when `trainable`, otherwise `frozen`.
    pub fn bind(&mut self, params: &ParamSet, name: &str, trainable: bool) -> Result<Var> {
        if trainable {
            self.param(params, name)
        } else {
            self.frozen(params, name)
        }
    }

    // ---- linear algebra ----------------------------------------------

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (Some((m, k)), Some((k2, n))) = (ta.dims2(), tb.dims2()) else {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        };
        if k != k2 {
            return Err(Error::Shape {
                op: "matmul",
                lhs: ta.shape().to_vec(),
                rhs: tb.shape().to_vec(),
            });
        }
        let c = matmul_kernel(ta.data(), tb.data(), m, k, n);
        let value = Tensor::new(vec![m, n], c)?;
        Ok(self.push_binary(a, b, value, Op::MatMul(a.0, b.0)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let Some((m, n)) = t.dims2() else {
            return Err(Error::Shape {
                op: "transpose",
                lhs: t.shape().to_vec(),
                rhs: vec![],
            });
        };
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        let value = Tensor::new(vec![n, m], out)?;
        Ok(self.push_unary(a, value, Op::Transpose(a.0)))
    }

    fn zip(&mut self, op: &'static str, a: Var, b: Var, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(op, a, b)?;
        let (ta, tb) = (self.value(a), self.value(b));
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("add", a, b, |x, y| x + y)?;
        Ok(self.push_binary(a, b, v, Op::Add(a.0, b.0)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("sub", a, b, |x, y| x - y)?;
        Ok(self.push_binary(a, b, v, Op::Sub(a.0, b.0)))
    }

    /// Elementwise (Hadamard) product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.zip("mul", a, b, |x, y| x * y)?;
        Ok(self.push_binary(a, b, v, Op::Mul(a.0, b.0)))
    }

    fn row_broadcast(&self, op: &'static str, a: Var, r: Var) -> Result<(usize, usize)> {
        let (ta, tr) = (self.value(a), self.value(r));
        let (_, cols) = last_axis(ta);
        if tr.rank() != 1 || tr.len() != cols || ta.rank() == 0 {
            return Err(Error::Shape {
                op,
                lhs: ta.shape().to_vec(),
                rhs: tr.shape().to_vec(),
            });
        }
        Ok(last_axis(ta))
    }

    /// Adds vector `r` to every last-axis row of `a` (bias broadcast).
    pub fn add_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast("add_row", a, r)?;
        let (ta, tr) = (self.value(a), self.value(r));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x + tr.data()[i % cols])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_binary(a, r, v, Op::AddRow(a.0, r.0)))
    }

    /// Multiplies every last-axis row of `a` elementwise by vector `r`.
    pub fn mul_row(&mut self, a: Var, r: Var) -> Result<Var> {
        let (_, cols) = self.row_broadcast("mul_row", a, r)?;
        let (ta, tr) = (self.value(a), self.value(r));
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tr.data()[i % cols])
            .collect();
        let v = Tensor::new(ta.shape().to_vec(), data)?;
        Ok(self.push_binary(a, r, v, Op::MulRow(a.0, r.0)))
    }

    /// Scales row `i` of matrix `a` by `c[i]`.
    pub fn mul_col(&mut self, a: Var, c: Var) -> Result<Var> {
        let (ta, tc) = (self.value(a), self.value(c));
        let Some((m, n)) = ta.dims2() else {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: ta.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        };
        if tc.rank() != 1 || tc.len() != m {
            return Err(Error::Shape {
                op: "mul_col",
                lhs: ta.shape().to_vec(),
                rhs: tc.shape().to_vec(),
            });
        }
        let data = ta
            .data()
            .iter()
            .enumerate()
            .map(|(i, &x)| x * tc.data()[i / n])
            .collect();
        let v = Tensor::new(vec![m, n], data)?;
        Ok(self.push_binary(a, c, v, Op::MulCol(a.0, c.0)))
    }

    /// Multiplies by a scalar constant.
    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x * c);
        self.push_unary(a, v, Op::Scale(a.0, c))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        self.scale(a, -1.0)
    }

    /// Adds a scalar constant to every element.
    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let v = self.map(a, |x| x + c);
        self.push_unary(a, v, Op::AddScalar(a.0))
    }

    /// `c - a`, elementwise.
    pub fn rsub_scalar(&mut self, c: f64, a: Var) -> Var {
        let n = self.neg(a);
        self.add_scalar(n, c)
    }

    /// Sum of two scalars (or any equal shapes); convenience over [`Tape::add`].
    pub fn sum_all(&mut self, terms: &[Var]) -> Result<Var> {
        let (&first, rest) = terms
            .split_first()
            .ok_or_else(|| Error::invalid("sum_all of no terms"))?;
        rest.iter().try_fold(first, |acc, &t| self.add(acc, t))
    }

    // ---- reductions --------------------------------------------------

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push_unary(a, Tensor::scalar(s), Op::Sum(a.0))
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.len() as f64;
        self.push_unary(a, Tensor::scalar(s), Op::Mean(a.0))
    }

    /// Sums along the last axis: `[.., n] -> [..]`.
    pub fn sum_last(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::Shape {
                op: "sum_last",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let (rows, cols) = last_axis(t);
        let data = (0..rows)
            .map(|i| t.data()[i * cols..(i + 1) * cols].iter().sum())
            .collect();
        let shape = t.shape()[..t.rank() - 1].to_vec();
        let v = Tensor::new(shape, data)?;
        Ok(self.push_unary(a, v, Op::SumLast(a.0)))
    }

    /// Inner product of two equally shaped tensors.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("dot", a, b)?;
        let s = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .sum();
        Ok(self.push_binary(a, b, Tensor::scalar(s), Op::Dot(a.0, b.0)))
    }

    /// Concatenates along the first axis.
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(Error::invalid("concat of no tensors"));
        };
        let base = self.shape(first).to_vec();
        if base.is_empty() {
            return Err(Error::Shape {
                op: "concat",
                lhs: base,
                rhs: vec![],
            });
        }
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let t = self.value(p);
            if t.rank() != base.len() || t.shape()[1..] != base[1..] {
                return Err(Error::Shape {
                    op: "concat",
                    lhs: base,
                    rhs: t.shape().to_vec(),
                });
            }
            rows += t.shape()[0];
            data.extend_from_slice(t.data());
        }
        let mut shape = base;
        shape[0] = rows;
        let v = Tensor::new(shape, data)?;
        let rg = parts.iter().any(|p| self.nodes[p.0].requires_grad);
        Ok(self.push(v, Op::Concat(parts.iter().map(|p| p.0).collect()), rg))
    }

    // ---- elementwise nonlinearities -----------------------------------

    pub fn abs(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::abs);
        self.push_unary(a, v, Op::Abs(a.0))
    }

    /// Natural logarithm; non-positive inputs are a domain error.
    pub fn ln(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x > 0.0)) {
            return Err(Error::domain("ln", format!("non-positive input {bad}")));
        }
        let v = self.map(a, f64::ln);
        Ok(self.push_unary(a, v, Op::Ln(a.0)))
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::exp);
        self.push_unary(a, v, Op::Exp(a.0))
    }

    /// Logistic function `1 / (1 + e^-x)`.
    pub fn sigmoid(&mut self, a: Var) -> Var {
        let v = self.map(a, logistic);
        self.push_unary(a, v, Op::Sigmoid(a.0))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::tanh);
        self.push_unary(a, v, Op::Tanh(a.0))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let v = self.map(a, |x| x.max(0.0));
        self.push_unary(a, v, Op::Relu(a.0))
    }

    /// Clamps into `[lo, hi]`; the gradient is zero where the bound is active.
    pub fn clamp(&mut self, a: Var, lo: f64, hi: f64) -> Result<Var> {
        if !(lo <= hi) {
            return Err(Error::invalid(format!("clamp bounds [{lo}, {hi}]")));
        }
        let v = self.map(a, |x| x.clamp(lo, hi));
        Ok(self.push_unary(a, v, Op::Clamp(a.0, lo, hi)))
    }

    pub fn cos(&mut self, a: Var) -> Var {
        let v = self.map(a, f64::cos);
        self.push_unary(a, v, Op::Cos(a.0))
    }

    /// Arc cosine; inputs must lie strictly inside `(-1, 1)` so the
    /// derivative stays finite.
    pub fn acos(&mut self, a: Var) -> Result<Var> {
        if let Some(bad) = self.value(a).data().iter().find(|&&x| !(x.abs() < 1.0)) {
            return Err(Error::domain("acos", format!("input {bad} outside (-1, 1)")));
        }
        let v = self.map(a, f64::acos);
        Ok(self.push_unary(a, v, Op::Acos(a.0)))
    }

    /// Scales every last-axis vector to unit Euclidean norm.
    pub fn l2_normalize(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (rows, cols) = last_axis(t);
        let mut norms = Vec::with_capacity(rows);
        let mut data = Vec::with_capacity(t.len());
        for i in 0..rows {
            let row = &t.data()[i * cols..(i + 1) * cols];
            let norm = row.iter().map(|x| x * x).sum::<f64>().sqrt();
            if !(norm >= MIN_NORM) {
                return Err(Error::domain(
                    "l2_normalize",
                    format!("row {i} has norm {norm:e}"),
                ));
            }
            norms.push(norm);
            data.extend(row.iter().map(|x| x / norm));
        }
        let v = Tensor::new(t.shape().to_vec(), data)?;
        Ok(self.push_unary(a, v, Op::L2Normalize(a.0, norms)))
    }

    /// `log Σ exp` along the last axis, stabilized by subtracting each
    /// row's maximum: `[.., n] -> [..]`.
    pub fn logsumexp(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.rank() == 0 {
            return Err(Error::Shape {
                op: "logsumexp",
                lhs: vec![],
                rhs: vec![],
            });
        }
        let (rows, cols) = last_axis(t);
        let data = (0..rows)
            .map(|i| logsumexp_slice(&t.data()[i * cols..(i + 1) * cols]))
            .collect();
        let v = Tensor::new(t.shape()[..t.rank() - 1].to_vec(), data)?;
        Ok(self.push_unary(a, v, Op::LogSumExp(a.0)))
    }

    /// Gathers `a[i, index[i]]` from a matrix: `[m, n] -> [m]`.
    pub fn pick(&mut self, a: Var, index: &[usize]) -> Result<Var> {
        let t = self.value(a);
        let Some((m, n)) = t.dims2() else {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        };
        if index.len() != m {
            return Err(Error::Shape {
                op: "pick",
                lhs: t.shape().to_vec(),
                rhs: vec![index.len()],
            });
        }
        if let Some(&bad) = index.iter().find(|&&j| j >= n) {
            return Err(Error::invalid(format!("pick index {bad} out of range for {n} columns")));
        }
        let data = index.iter().enumerate().map(|(i, &j)| t.data()[i * n + j]).collect();
        let v = Tensor::new(vec![m], data)?;
        Ok(self.push_unary(a, v, Op::Pick(a.0, index.to_vec())))
    }

    // ---- backward ----------------------------------------------------

    /// Accumulates `d root / d p` into the gradient of every parameter bound
    /// on this tape. Gradients add to whatever `params` already holds.
    pub fn backward(&self, root: Var, params: &mut ParamSet) -> Result<()> {
        let rv = self.value(root);
        if !rv.is_scalar() {
            return Err(Error::NonScalarRoot(rv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Vec<f64>>> = Vec::with_capacity(root.0 + 1);
        grads.resize_with(root.0 + 1, || None);
        grads[root.0] = Some(vec![1.0]);

        for i in (0..=root.0).rev() {
            let node = &self.nodes[i];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            let y = node.value.data();
            match &node.op {
                Op::Constant => {}
                Op::Param(name) => params.accumulate_grad(name, &g)?,
                Op::MatMul(a, b) => {
                    let (ta, tb) = (&self.nodes[*a].value, &self.nodes[*b].value);
                    let (m, k) = ta.dims2().expect("matmul lhs");
                    let n = tb.dims2().expect("matmul rhs").1;
                    let (ad, bd) = (ta.data(), tb.data());
                    self.accumulate(&mut grads, *a, |ga| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let brow = &bd[p * n..(p + 1) * n];
                                ga[i * k + p] += grow.iter().zip(brow).map(|(x, y)| x * y).sum::<f64>();
                            }
                        }
                    });
                    self.accumulate(&mut grads, *b, |gb| {
                        for i in 0..m {
                            let grow = &g[i * n..(i + 1) * n];
                            for p in 0..k {
                                let av = ad[i * k + p];
                                for (gv, x) in gb[p * n..(p + 1) * n].iter_mut().zip(grow) {
                                    *gv += av * x;
                                }
                            }
                        }
                    });
                }
                Op::Transpose(a) => {
                    let (m, n) = self.nodes[*a].value.dims2().expect("transpose input");
                    self.accumulate(&mut grads, *a, |ga| {
                        for i in 0..m {
                            for j in 0..n {
                                ga[i * n + j] += g[j * m + i];
                            }
                        }
                    });
                }
                Op::Add(a, b) => {
                    self.accumulate(&mut grads, *a, |ga| axpy(ga, &g, 1.0));
                    self.accumulate(&mut grads, *b, |gb| axpy(gb, &g, 1.0));
                }
                Op::Sub(a, b) => {
                    self.accumulate(&mut grads, *a, |ga| axpy(ga, &g, 1.0));
                    self.accumulate(&mut grads, *b, |gb| axpy(gb, &g, -1.0));
                }
                Op::Mul(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, x), bv) in ga.iter_mut().zip(&g).zip(bd) {
                            *gv += x * bv;
                        }
                    });
                    self.accumulate(&mut grads, *b, |gb| {
                        for ((gv, x), av) in gb.iter_mut().zip(&g).zip(ad) {
                            *gv += x * av;
                        }
                    });
                }
                Op::AddRow(a, r) => {
                    let cols = self.nodes[*r].value.len();
                    self.accumulate(&mut grads, *a, |ga| axpy(ga, &g, 1.0));
                    self.accumulate(&mut grads, *r, |gr| {
                        for (i, x) in g.iter().enumerate() {
                            gr[i % cols] += x;
                        }
                    });
                }
                Op::MulRow(a, r) => {
                    let (ad, rd) = (self.nodes[*a].value.data(), self.nodes[*r].value.data());
                    let cols = rd.len();
                    self.accumulate(&mut grads, *a, |ga| {
                        for (i, (gv, x)) in ga.iter_mut().zip(&g).enumerate() {
                            *gv += x * rd[i % cols];
                        }
                    });
                    self.accumulate(&mut grads, *r, |gr| {
                        for (i, (x, av)) in g.iter().zip(ad).enumerate() {
                            gr[i % cols] += x * av;
                        }
                    });
                }
                Op::MulCol(a, c) => {
                    let (ad, cd) = (self.nodes[*a].value.data(), self.nodes[*c].value.data());
                    let n = ad.len() / cd.len();
                    self.accumulate(&mut grads, *a, |ga| {
                        for (i, (gv, x)) in ga.iter_mut().zip(&g).enumerate() {
                            *gv += x * cd[i / n];
                        }
                    });
                    self.accumulate(&mut grads, *c, |gc| {
                        for (i, (x, av)) in g.iter().zip(ad).enumerate() {
                            gc[i / n] += x * av;
                        }
                    });
                }
                Op::Scale(a, c) => self.accumulate(&mut grads, *a, |ga| axpy(ga, &g, *c)),
                Op::AddScalar(a) => self.accumulate(&mut grads, *a, |ga| axpy(ga, &g, 1.0)),
                Op::Sum(a) => self.accumulate(&mut grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0])),
                Op::Mean(a) => {
                    let n = self.nodes[*a].value.len() as f64;
                    self.accumulate(&mut grads, *a, |ga| ga.iter_mut().for_each(|v| *v += g[0] / n));
                }
                Op::SumLast(a) => {
                    let (_, cols) = last_axis(&self.nodes[*a].value);
                    self.accumulate(&mut grads, *a, |ga| {
                        for (i, v) in ga.iter_mut().enumerate() {
                            *v += g[i / cols];
                        }
                    });
                }
                Op::Abs(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, d), xv) in ga.iter_mut().zip(&g).zip(x) {
                            // subgradient 0 at the kink
                            *gv += d * if *xv > 0.0 {
                                1.0
                            } else if *xv < 0.0 {
                                -1.0
                            } else {
                                0.0
                            };
                        }
                    });
                }
                Op::Ln(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, d), xv) in ga.iter_mut().zip(&g).zip(x) {
                            *gv += d / xv;
                        }
                    });
                }
                Op::Exp(a) => self.accumulate(&mut grads, *a, |ga| {
                    for ((gv, d), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *gv += d * yv;
                    }
                }),
                Op::Sigmoid(a) => self.accumulate(&mut grads, *a, |ga| {
                    for ((gv, d), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *gv += d * yv * (1.0 - yv);
                    }
                }),
                Op::Tanh(a) => self.accumulate(&mut grads, *a, |ga| {
                    for ((gv, d), yv) in ga.iter_mut().zip(&g).zip(y) {
                        *gv += d * (1.0 - yv * yv);
                    }
                }),
                Op::Relu(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, d), xv) in ga.iter_mut().zip(&g).zip(x) {
                            if *xv > 0.0 {
                                *gv += d;
                            }
                        }
                    });
                }
                Op::Clamp(a, lo, hi) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, d), xv) in ga.iter_mut().zip(&g).zip(x) {
                            if xv > lo && xv < hi {
                                *gv += d;
                            }
                        }
                    });
                }
                Op::Cos(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, d), xv) in ga.iter_mut().zip(&g).zip(x) {
                            *gv -= d * xv.sin();
                        }
                    });
                }
                Op::Acos(a) => {
                    let x = self.nodes[*a].value.data();
                    self.accumulate(&mut grads, *a, |ga| {
                        for ((gv, d), xv) in ga.iter_mut().zip(&g).zip(x) {
                            *gv -= d / (1.0 - xv * xv).sqrt();
                        }
                    });
                }
                Op::L2Normalize(a, norms) => {
                    let cols = y.len() / norms.len();
                    self.accumulate(&mut grads, *a, |ga| {
                        for (r, norm) in norms.iter().enumerate() {
                            let span = r * cols..(r + 1) * cols;
                            let (yr, gr) = (&y[span.clone()], &g[span.clone()]);
                            let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                            for ((gv, gi), yi) in ga[span].iter_mut().zip(gr).zip(yr) {
                                *gv += (gi - yi * proj) / norm;
                            }
                        }
                    });
                }
                Op::Dot(a, b) => {
                    let (ad, bd) = (self.nodes[*a].value.data(), self.nodes[*b].value.data());
                    self.accumulate(&mut grads, *a, |ga| axpy(ga, bd, g[0]));
                    self.accumulate(&mut grads, *b, |gb| axpy(gb, ad, g[0]));
                }
                Op::Concat(parts) => {
                    let mut offset = 0;
                    for &p in parts {
                        let n = self.nodes[p].value.len();
                        self.accumulate(&mut grads, p, |gp| axpy(gp, &g[offset..offset + n], 1.0));
                        offset += n;
                    }
                }
                Op::LogSumExp(a) => {
                    let x = self.nodes[*a].value.data();
                    let cols = x.len() / y.len();
                    self.accumulate(&mut grads, *a, |ga| {
                        for (r, (lse, d)) in y.iter().zip(&g).enumerate() {
                            for j in r * cols..(r + 1) * cols {
                                ga[j] += d * (x[j] - lse).exp();
                            }
                        }
                    });
                }
                Op::Pick(a, index) => {
                    let n = self.nodes[*a].value.len() / index.len();
                    self.accumulate(&mut grads, *a, |ga| {
                        for (i, (&j, d)) in index.iter().zip(&g).enumerate() {
                            ga[i * n + j] += d;
                        }
                    });
                }
            }
        }
        Ok(())
    }

    fn accumulate(&self, grads: &mut [Option<Vec<f64>>], idx: usize, f: impl FnOnce(&mut [f64])) {
        let node = &self.nodes[idx];
        if !node.requires_grad {
            return;
        }
        let buf = grads[idx].get_or_insert_with(|| vec![0.0; node.value.len()]);
        f(buf);
    }

    /// Hash of the branch taken by every piecewise op (absolute value sign,
    /// rectifier activity, clamp region). Two evaluations with equal
    /// signatures lie on the same smooth piece of the function.
    pub fn branch_signature(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut feed = |b: u8| h = (h ^ u64::from(b)).wrapping_mul(0x0000_0100_0000_01B3);
        for node in &self.nodes {
            let (input, classify): (usize, Box<dyn Fn(f64) -> u8>) = match &node.op {
                Op::Abs(a) => (*a, Box::new(|x: f64| u8::from(x > 0.0) + 2 * u8::from(x < 0.0))),
                Op::Relu(a) => (*a, Box::new(|x: f64| u8::from(x > 0.0))),
                Op::Clamp(a, lo, hi) => {
                    let (lo, hi) = (*lo, *hi);
                    (*a, Box::new(move |x: f64| u8::from(x <= lo) + 2 * u8::from(x >= hi)))
                }
                _ => continue,
            };
            for &x in self.nodes[input].value.data() {
                feed(classify(x));
            }
        }
        h
    }
}

fn axpy(dst: &mut [f64], src: &[f64], alpha: f64) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += alpha * s;
    }
}

pub fn logistic(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

pub(crate) fn logsumexp_slice(row: &[f64]) -> f64 {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    max + row.iter().map(|v| (v - max).exp()).sum::<f64>().ln()
}

#[cfg(test)]
mod tests {
    use super::*;

    fn one_param(name: &str, t: Tensor) -> ParamSet {
        let mut p = ParamSet::new();
        p.insert(name, t).unwrap();
        p
    }

    #[test]
    fn matmul_identity() {
        let mut tape = Tape::new();
        let m = Tensor::from_rows(&[[1.0, 2.0, 3.0], [4.0, 5.0, 6.0], [7.0, 8.0, 9.5]]).unwrap();
        let i = tape.constant(Tensor::identity(3));
        let mv = tape.constant(m.clone());
        let out = tape.matmul(i, mv).unwrap();
        assert_eq!(tape.value(out), &m);
    }

    #[test]
    fn logistic_and_normalize_anchors() {
        assert_eq!(logistic(0.0), 0.5);
        let mut tape = Tape::new();
        let v = tape.constant(Tensor::vector(vec![3.0, 4.0]).unwrap());
        let n = tape.l2_normalize(v).unwrap();
        let d = tape.value(n).data();
        assert!((d[0] - 0.6).abs() < 1e-15 && (d[1] - 0.8).abs() < 1e-15);
    }

    #[test]
    fn square_sum_gradient() {
        let mut p = one_param("x", Tensor::vector(vec![1.0, 2.0, 3.0]).unwrap());
        let mut tape = Tape::new();
        let x = tape.param(&p, "x").unwrap();
        let sq = tape.mul(x, x).unwrap();
        let root = tape.sum(sq);
        tape.backward(root, &mut p).unwrap();
        assert_eq!(p.grad("x").unwrap(), &[2.0, 4.0, 6.0]);
    }

    #[test]
    fn log_logistic_gradient_at_zero() {
        let mut p = one_param("w", Tensor::scalar(0.0));
        let mut tape = Tape::new();
        let w = tape.param(&p, "w").unwrap();
        let s = tape.sigmoid(w);
        let root = tape.ln(s).unwrap();
        tape.backward(root, &mut p).unwrap();
        assert!((p.grad("w").unwrap()[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn backward_accumulates_until_reset() {
        let mut p = one_param("w", Tensor::scalar(2.0));
        for expected in [3.0, 6.0] {
            let mut tape = Tape::new();
            let w = tape.param(&p, "w").unwrap();
            let root = tape.scale(w, 3.0);
            tape.backward(root, &mut p).unwrap();
            assert_eq!(p.grad("w").unwrap(), &[expected]);
        }
        p.zero_grad();
        assert_eq!(p.grad("w").unwrap(), &[0.0]);
    }

    #[test]
    fn non_scalar_root_rejected() {
        let mut p = one_param("w", Tensor::vector(vec![1.0, 2.0]).unwrap());
        let mut tape = Tape::new();
        let w = tape.param(&p, "w").unwrap();
        assert!(matches!(tape.backward(w, &mut p), Err(Error::NonScalarRoot(_))));
    }

    #[test]
    fn shape_errors_name_the_op() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        match tape.matmul(a, b) {
            Err(Error::Shape { op, lhs, rhs }) => {
                assert_eq!(op, "matmul");
                assert_eq!((lhs, rhs), (vec![2, 3], vec![2, 3]));
            }
            other => panic!("{other:?}"),
        }
        let c = tape.constant(Tensor::zeros(&[3]));
        assert!(matches!(tape.add(a, c), Err(Error::Shape { .. })));
    }

    #[test]
    fn domain_errors() {
        let mut tape = Tape::new();
        let z = tape.constant(Tensor::vector(vec![1.0, 0.0]).unwrap());
        assert!(matches!(tape.ln(z), Err(Error::Domain { .. })));
        let zero = tape.constant(Tensor::zeros(&[2, 2]));
        assert!(matches!(tape.l2_normalize(zero), Err(Error::Domain { .. })));
        let one = tape.constant(Tensor::vector(vec![1.0]).unwrap());
        assert!(matches!(tape.acos(one), Err(Error::Domain { .. })));
    }

    #[test]
    fn constants_get_no_gradient_path() {
        let mut p = one_param("w", Tensor::scalar(1.0));
        let mut tape = Tape::new();
        let c = tape.constant(Tensor::scalar(5.0));
        let f = tape.frozen(&p, "w").unwrap();
        let prod = tape.mul(c, f).unwrap();
        tape.backward(prod, &mut p).unwrap();
        assert_eq!(p.grad("w").unwrap(), &[0.0]);
    }

    #[test]
    fn stable_logsumexp() {
        assert!((logsumexp_slice(&[1000.0, 1000.0]) - (1000.0 + 2f64.ln())).abs() < 1e-12);
        assert!((logsumexp_slice(&[0.0; 4]) - 4f64.ln()).abs() < 1e-15);
    }
}

//! Tape-based reverse-mode automatic differentiation over dense tensors.
//!
//! Operations are recorded in the order they are executed, which is already a
//! topological order, so `backward` is a single reverse sweep. Each node is
//! visited once and gradients of shared subexpressions accumulate additively.

use std::cell::{Ref, RefCell};

use super::tensor::{gemm, gemm_nt, gemm_tn, Tensor};
use crate::error::{Error, Result};

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Unary {
    Neg,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    MaxScalar(f64),
    Scale(f64),
    AddScalar(f64),
    Square,
    Sqrt,
    Abs,
    Recip,
}

/// Operation kinds accepted by [`Tape::elementwise`].
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum ElementwiseOp {
    Add,
    Sub,
    Mul,
    Div,
    Exp,
    Log,
    Tanh,
    Sigmoid,
    Relu,
    MaxWithScalar(f64),
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Div(Var, Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    Unary(Var, Unary),
    Matmul(Var, Var),
    Transpose(Var),
    SumAll(Var),
    SumRows(Var),
    SumCols(Var),
    LogSumExpCols(Var),
    HCat(Vec<Var>),
    VCat(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    Pick(Var, Vec<usize>),
    GaussPairs(Var, Var, Var),
}

impl Op {
    fn inputs(&self) -> Vec<Var> {
        match self {
            Op::Leaf => vec![],
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::Div(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::MulCol(a, b)
            | Op::Matmul(a, b) => vec![*a, *b],
            Op::Unary(a, _)
            | Op::Transpose(a)
            | Op::SumAll(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::LogSumExpCols(a)
            | Op::SliceCols(a, _)
            | Op::SelectRows(a, _)
            | Op::Pick(a, _) => vec![*a],
            Op::HCat(v) | Op::VCat(v) => v.clone(),
            Op::GaussPairs(a, b, c) => vec![*a, *b, *c],
        }
    }
}

struct Node {
    op: Op,
    value: Tensor,
    requires_grad: bool,
}

/// Recorded computation graph for one forward/backward pass.
#[derive(Default)]
pub struct Tape {
    nodes: RefCell<Vec<Node>>,
}

/// Gradients produced by [`Tape::backward`], indexed by [`Var`].
pub struct Gradients {
    grads: Vec<Option<Vec<f64>>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&[f64]> {
        self.grads.get(v.0).and_then(|g| g.as_deref())
    }

    /// Gradient as a vector, zeros when the node was not reached.
    pub fn get_or_zeros(&self, v: Var, len: usize) -> Vec<f64> {
        self.get(v).map_or_else(|| vec![0.0; len], <[f64]>::to_vec)
    }
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite { op })
    }
}

fn is_scalar(t: &Tensor) -> bool {
    t.len() == 1
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.borrow().len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn push(&self, op: Op, value: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        let requires_grad = op.inputs().iter().any(|v| nodes[v.0].requires_grad);
        nodes.push(Node { op, value, requires_grad });
        Var(nodes.len() - 1)
    }

    /// Differentiable leaf.
    pub fn leaf(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value: t, requires_grad: true });
        Var(nodes.len() - 1)
    }

    /// Leaf that never receives a gradient.
    pub fn constant(&self, t: Tensor) -> Var {
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value: t, requires_grad: false });
        Var(nodes.len() - 1)
    }

    /// Leaf whose `requires_grad` flag is taken from the tensor itself.
    pub fn input(&self, t: Tensor) -> Var {
        let rg = t.requires_grad();
        let mut nodes = self.nodes.borrow_mut();
        nodes.push(Node { op: Op::Leaf, value: t, requires_grad: rg });
        Var(nodes.len() - 1)
    }

    pub fn value(&self, v: Var) -> Ref<'_, Tensor> {
        Ref::map(self.nodes.borrow(), |n| &n[v.0].value)
    }

    pub fn to_tensor(&self, v: Var) -> Tensor {
        self.value(v).clone()
    }

    pub fn scalar_value(&self, v: Var) -> f64 {
        self.value(v).data()[0]
    }

    pub fn shape(&self, v: Var) -> (usize, usize) {
        let t = self.value(v);
        t.dims2().unwrap_or((0, 0))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes.borrow()[v.0].requires_grad
    }

    /// Detached copy of `v`: same value, no gradient path.
    pub fn detach(&self, v: Var) -> Var {
        let t = self.to_tensor(v);
        self.constant(t)
    }

    // ---- binary elementwise ---------------------------------------------

    fn binary(
        &self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> Result<f64>,
    ) -> Result<Tensor> {
        let ta = self.value(a);
        let tb = self.value(b);
        let data = if ta.shape() == tb.shape() {
            ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect::<Result<Vec<_>>>()?
        } else if is_scalar(&tb) {
            let y = tb.data()[0];
            ta.data().iter().map(|&x| f(x, y)).collect::<Result<Vec<_>>>()?
        } else if is_scalar(&ta) {
            let x = ta.data()[0];
            tb.data().iter().map(|&y| f(x, y)).collect::<Result<Vec<_>>>()?
        } else {
            return Err(Error::shape(name, format!("{:?} vs {:?}", ta.shape(), tb.shape())));
        };
        let shape = if ta.shape() == tb.shape() || is_scalar(&tb) {
            ta.shape().to_vec()
        } else {
            tb.shape().to_vec()
        };
        check_finite(name, &data)?;
        Ok(Tensor::from_parts(shape, data))
    }

    pub fn add(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("add", a, b, |x, y| Ok(x + y))?;
        Ok(self.push(Op::Add(a, b), t))
    }

    pub fn sub(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("sub", a, b, |x, y| Ok(x - y))?;
        Ok(self.push(Op::Sub(a, b), t))
    }

    pub fn mul(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("mul", a, b, |x, y| Ok(x * y))?;
        Ok(self.push(Op::Mul(a, b), t))
    }

    pub fn div(&self, a: Var, b: Var) -> Result<Var> {
        let t = self.binary("div", a, b, |x, y| {
            if y == 0.0 {
                Err(Error::domain("div", "division by zero"))
            } else {
                Ok(x / y)
            }
        })?;
        Ok(self.push(Op::Div(a, b), t))
    }

    /// `a[N x m] + row[1 x m]` broadcast over rows.
    pub fn add_row(&self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("add_row", a, row, |x, y| x + y)?;
        Ok(self.push(Op::AddRow(a, row), t))
    }

    /// `a[N x m] * row[1 x m]` broadcast over rows.
    pub fn mul_row(&self, a: Var, row: Var) -> Result<Var> {
        let t = self.row_broadcast("mul_row", a, row, |x, y| x * y)?;
        Ok(self.push(Op::MulRow(a, row), t))
    }

    fn row_broadcast(
        &self,
        name: &'static str,
        a: Var,
        row: Var,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let ta = self.value(a);
        let tr = self.value(row);
        let (n, m) = ta.dims2()?;
        let (rr, rm) = tr.dims2()?;
        if rr != 1 || rm != m {
            return Err(Error::shape(name, format!("{:?} vs row {:?}", ta.shape(), tr.shape())));
        }
        let mut out = Vec::with_capacity(n * m);
        for i in 0..n {
            out.extend(ta.row_slice(i).iter().zip(tr.data()).map(|(&x, &y)| f(x, y)));
        }
        check_finite(name, &out)?;
        Ok(Tensor::from_parts(vec![n, m], out))
    }

    /// `a[N x m] * col[N x 1]` broadcast over columns.
    pub fn mul_col(&self, a: Var, col: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let tc = self.value(col);
            let (n, m) = ta.dims2()?;
            if tc.dims2()? != (n, 1) {
                return Err(Error::shape(
                    "mul_col",
                    format!("{:?} vs col {:?}", ta.shape(), tc.shape()),
                ));
            }
            let mut out = Vec::with_capacity(n * m);
            for i in 0..n {
                let c = tc.data()[i];
                out.extend(ta.row_slice(i).iter().map(|&x| x * c));
            }
            check_finite("mul_col", &out)?;
            Tensor::from_parts(vec![n, m], out)
        };
        Ok(self.push(Op::MulCol(a, col), t))
    }

    // ---- unary ------------------------------------------------------------

    pub fn unary(&self, a: Var, op: Unary) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let name = unary_name(op);
            let data = ta.data().iter().map(|&x| unary_forward(op, x)).collect::<Result<Vec<_>>>()?;
            check_finite(name, &data)?;
            Tensor::from_parts(ta.shape().to_vec(), data)
        };
        Ok(self.push(Op::Unary(a, op), t))
    }

    pub fn neg(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Neg)
    }
    pub fn exp(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Exp)
    }
    pub fn log(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Log)
    }
    pub fn tanh(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Tanh)
    }
    pub fn sigmoid(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sigmoid)
    }
    pub fn relu(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Relu)
    }
    pub fn max_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::MaxScalar(c))
    }
    pub fn scale(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::Scale(c))
    }
    pub fn add_scalar(&self, a: Var, c: f64) -> Result<Var> {
        self.unary(a, Unary::AddScalar(c))
    }
    pub fn square(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Square)
    }
    pub fn sqrt(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Sqrt)
    }
    pub fn abs(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Abs)
    }
    pub fn recip(&self, a: Var) -> Result<Var> {
        self.unary(a, Unary::Recip)
    }

    /// Dispatcher over the elementwise operation set. Binary kinds need `b`.
    pub fn elementwise(&self, kind: ElementwiseOp, a: Var, b: Option<Var>) -> Result<Var> {
        let need_b = || b.ok_or_else(|| Error::invalid(format!("{kind:?} needs a second operand")));
        match kind {
            ElementwiseOp::Add => self.add(a, need_b()?),
            ElementwiseOp::Sub => self.sub(a, need_b()?),
            ElementwiseOp::Mul => self.mul(a, need_b()?),
            ElementwiseOp::Div => self.div(a, need_b()?),
            ElementwiseOp::Exp => self.exp(a),
            ElementwiseOp::Log => self.log(a),
            ElementwiseOp::Tanh => self.tanh(a),
            ElementwiseOp::Sigmoid => self.sigmoid(a),
            ElementwiseOp::Relu => self.relu(a),
            ElementwiseOp::MaxWithScalar(c) => self.max_scalar(a, c),
        }
    }

    // ---- linear algebra ---------------------------------------------------

    pub fn matmul(&self, a: Var, b: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let tb = self.value(b);
            let (m, k) = ta.dims2()?;
            let (k2, n) = tb.dims2()?;
            if k != k2 {
                return Err(Error::shape("matmul", format!("{m}x{k} * {k2}x{n}")));
            }
            let out = gemm(ta.data(), tb.data(), m, k, n);
            check_finite("matmul", &out)?;
            Tensor::from_parts(vec![m, n], out)
        };
        Ok(self.push(Op::Matmul(a, b), t))
    }

    pub fn transpose(&self, a: Var) -> Result<Var> {
        let t = self.value(a).transpose()?;
        Ok(self.push(Op::Transpose(a), t))
    }

    // ---- reductions -------------------------------------------------------

    pub fn sum(&self, a: Var) -> Result<Var> {
        let s: f64 = self.value(a).data().iter().sum();
        check_finite("sum", &[s])?;
        Ok(self.push(Op::SumAll(a), Tensor::scalar(s)))
    }

    pub fn mean(&self, a: Var) -> Result<Var> {
        let n = self.value(a).len();
        if n == 0 {
            return Err(Error::invalid("mean of empty tensor"));
        }
        let s = self.sum(a)?;
        self.scale(s, 1.0 / n as f64)
    }

    /// Sum over rows: `N x m -> 1 x m`.
    pub fn sum_rows(&self, a: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let (n, m) = ta.dims2()?;
            let mut out = vec![0.0; m];
            for i in 0..n {
                for (o, &x) in out.iter_mut().zip(ta.row_slice(i)) {
                    *o += x;
                }
            }
            check_finite("sum_rows", &out)?;
            Tensor::from_parts(vec![1, m], out)
        };
        Ok(self.push(Op::SumRows(a), t))
    }

    /// Sum over columns: `N x m -> N x 1`.
    pub fn sum_cols(&self, a: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let (n, _) = ta.dims2()?;
            let out: Vec<f64> = (0..n).map(|i| ta.row_slice(i).iter().sum()).collect();
            check_finite("sum_cols", &out)?;
            Tensor::from_parts(vec![n, 1], out)
        };
        Ok(self.push(Op::SumCols(a), t))
    }

    /// Row-wise log-sum-exp: `N x m -> N x 1`.
    pub fn logsumexp_cols(&self, a: Var) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let (n, m) = ta.dims2()?;
            if m == 0 {
                return Err(Error::invalid("logsumexp over zero columns"));
            }
            let out: Vec<f64> = (0..n).map(|i| logsumexp(ta.row_slice(i))).collect();
            check_finite("logsumexp_cols", &out)?;
            Tensor::from_parts(vec![n, 1], out)
        };
        Ok(self.push(Op::LogSumExpCols(a), t))
    }

    // ---- structural -------------------------------------------------------

    /// Concatenate along the feature (column) axis.
    pub fn hcat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("hcat of nothing"));
        }
        let t = {
            let vals: Vec<_> = parts.iter().map(|&p| self.value(p)).collect();
            let n = vals[0].rows();
            for v in &vals {
                if v.rows() != n {
                    return Err(Error::shape("hcat", format!("row counts {} vs {n}", v.rows())));
                }
            }
            let total: usize = vals.iter().map(|v| v.cols()).sum();
            let mut out = Vec::with_capacity(n * total);
            for i in 0..n {
                for v in &vals {
                    out.extend_from_slice(v.row_slice(i));
                }
            }
            Tensor::from_parts(vec![n, total], out)
        };
        Ok(self.push(Op::HCat(parts.to_vec()), t))
    }

    /// Concatenate along the row axis.
    pub fn vcat(&self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::invalid("vcat of nothing"));
        }
        let t = {
            let vals: Vec<Tensor> = parts.iter().map(|&p| self.to_tensor(p)).collect();
            Tensor::vstack(&vals)?
        };
        Ok(self.push(Op::VCat(parts.to_vec()), t))
    }

    pub fn slice_cols(&self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let (n, m) = ta.dims2()?;
            if start + len > m {
                return Err(Error::shape("slice_cols", format!("[{start}, {}) of {m}", start + len)));
            }
            let mut out = Vec::with_capacity(n * len);
            for i in 0..n {
                out.extend_from_slice(&ta.row_slice(i)[start..start + len]);
            }
            Tensor::from_parts(vec![n, len], out)
        };
        Ok(self.push(Op::SliceCols(a, start), t))
    }

    /// Gather rows (repeats allowed); gradients scatter-add back.
    pub fn select_rows(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(a).select_rows(idx)?;
        Ok(self.push(Op::SelectRows(a, idx.to_vec()), t))
    }

    /// `out[i] = a[i, idx[i]]`, shape `N x 1`.
    pub fn pick(&self, a: Var, idx: &[usize]) -> Result<Var> {
        let t = {
            let ta = self.value(a);
            let (n, m) = ta.dims2()?;
            if idx.len() != n || idx.iter().any(|&j| j >= m) {
                return Err(Error::shape("pick", format!("{} indices into {n}x{m}", idx.len())));
            }
            let out: Vec<f64> = idx.iter().enumerate().map(|(i, &j)| ta.at(i, j)).collect();
            Tensor::from_parts(vec![n, 1], out)
        };
        Ok(self.push(Op::Pick(a, idx.to_vec()), t))
    }

    /// Pairwise diagonal-Gaussian log densities:
    /// `out[i][j] = sum_d log N(x[i,d]; mu[j,d], exp(log_sigma[j,d])^2)`.
    pub fn gauss_log_density_pairs(&self, x: Var, mu: Var, log_sigma: Var) -> Result<Var> {
        let t = {
            let tx = self.value(x);
            let tm = self.value(mu);
            let tl = self.value(log_sigma);
            let (n, d) = tx.dims2()?;
            let (k, d2) = tm.dims2()?;
            if d != d2 || tl.dims2()? != (k, d) {
                return Err(Error::shape(
                    "gauss_log_density_pairs",
                    format!("x {:?}, mu {:?}, log_sigma {:?}", tx.shape(), tm.shape(), tl.shape()),
                ));
            }
            let half_log_2pi = 0.5 * (2.0 * std::f64::consts::PI).ln();
            let mut out = vec![0.0; n * k];
            for i in 0..n {
                let xi = tx.row_slice(i);
                for j in 0..k {
                    let mj = tm.row_slice(j);
                    let lj = tl.row_slice(j);
                    let mut acc = 0.0;
                    for ((&xv, &mv), &lv) in xi.iter().zip(mj).zip(lj) {
                        let u = (xv - mv) * (-lv).exp();
                        acc += -0.5 * u * u - lv - half_log_2pi;
                    }
                    out[i * k + j] = acc;
                }
            }
            check_finite("gauss_log_density_pairs", &out)?;
            Tensor::from_parts(vec![n, k], out)
        };
        Ok(self.push(Op::GaussPairs(x, mu, log_sigma), t))
    }

    // ---- backward ---------------------------------------------------------

    /// Reverse sweep from a scalar output.
    pub fn backward(&self, out: Var) -> Result<Gradients> {
        let nodes = self.nodes.borrow();
        if nodes[out.0].value.len() != 1 {
            return Err(Error::shape("backward", "output must be a scalar"));
        }
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; out.0 + 1];
        grads[out.0] = Some(vec![1.0]);
        for id in (0..=out.0).rev() {
            let node = &nodes[id];
            if !node.requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            backprop_node(&nodes, node, &g, &mut grads)?;
            grads[id] = Some(g);
        }
        // every differentiable leaf gets a populated gradient
        for (id, node) in nodes.iter().enumerate().take(out.0 + 1) {
            if matches!(node.op, Op::Leaf) && node.requires_grad && grads[id].is_none() {
                grads[id] = Some(vec![0.0; node.value.len()]);
            }
        }
        Ok(Gradients { grads })
    }
}

pub(crate) fn logsumexp(xs: &[f64]) -> f64 {
    let m = xs.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + xs.iter().map(|&x| (x - m).exp()).sum::<f64>().ln()
}

fn unary_name(op: Unary) -> &'static str {
    match op {
        Unary::Neg => "neg",
        Unary::Exp => "exp",
        Unary::Log => "log",
        Unary::Tanh => "tanh",
        Unary::Sigmoid => "sigmoid",
        Unary::Relu => "relu",
        Unary::MaxScalar(_) => "max_scalar",
        Unary::Scale(_) => "scale",
        Unary::AddScalar(_) => "add_scalar",
        Unary::Square => "square",
        Unary::Sqrt => "sqrt",
        Unary::Abs => "abs",
        Unary::Recip => "recip",
    }
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

fn unary_forward(op: Unary, x: f64) -> Result<f64> {
    Ok(match op {
        Unary::Neg => -x,
        Unary::Exp => x.exp(),
        Unary::Log => {
            if x <= 0.0 {
                return Err(Error::domain("log", format!("log of nonpositive value {x}")));
            }
            x.ln()
        }
        Unary::Tanh => x.tanh(),
        Unary::Sigmoid => sigmoid(x),
        Unary::Relu => x.max(0.0),
        Unary::MaxScalar(c) => x.max(c),
        Unary::Scale(c) => c * x,
        Unary::AddScalar(c) => x + c,
        Unary::Square => x * x,
        Unary::Sqrt => {
            if x < 0.0 {
                return Err(Error::domain("sqrt", format!("sqrt of negative value {x}")));
            }
            x.sqrt()
        }
        Unary::Abs => x.abs(),
        Unary::Recip => {
            if x == 0.0 {
                return Err(Error::domain("recip", "division by zero"));
            }
            1.0 / x
        }
    })
}

/// d(out)/d(in) given input `x` and output `y`.
fn unary_derivative(op: Unary, x: f64, y: f64) -> f64 {
    match op {
        Unary::Neg => -1.0,
        Unary::Exp => y,
        Unary::Log => 1.0 / x,
        Unary::Tanh => 1.0 - y * y,
        Unary::Sigmoid => y * (1.0 - y),
        Unary::Relu => {
            if x > 0.0 {
                1.0
            } else {
                0.0
            }
        }
        Unary::MaxScalar(c) => {
            if x > c {
                1.0
            } else {
                0.0
            }
        }
        Unary::Scale(c) => c,
        Unary::AddScalar(_) => 1.0,
        Unary::Square => 2.0 * x,
        Unary::Sqrt => {
            if y > 0.0 {
                0.5 / y
            } else {
                0.0
            }
        }
        Unary::Abs => {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        }
        Unary::Recip => -y * y,
    }
}

fn accumulate(grads: &mut [Option<Vec<f64>>], nodes: &[Node], v: Var, contrib: Vec<f64>) {
    if !nodes[v.0].requires_grad {
        return;
    }
    match &mut grads[v.0] {
        Some(g) => {
            for (a, b) in g.iter_mut().zip(&contrib) {
                *a += b;
            }
        }
        slot @ None => *slot = Some(contrib),
    }
}

/// Reduce a gradient computed at the output shape back onto an operand that
/// may have been broadcast as a scalar.
fn unbroadcast(operand: &Tensor, g: Vec<f64>) -> Vec<f64> {
    if operand.len() == g.len() {
        g
    } else {
        vec![g.iter().sum()]
    }
}

fn broadcast_get(t: &Tensor, i: usize) -> f64 {
    if t.len() == 1 {
        t.data()[0]
    } else {
        t.data()[i]
    }
}

fn backprop_node(nodes: &[Node], node: &Node, g: &[f64], grads: &mut [Option<Vec<f64>>]) -> Result<()> {
    let val = |v: Var| -> &Tensor { &nodes[v.0].value };
    match &node.op {
        Op::Leaf => {}
        Op::Add(a, b) => {
            accumulate(grads, nodes, *a, unbroadcast(val(*a), g.to_vec()));
            accumulate(grads, nodes, *b, unbroadcast(val(*b), g.to_vec()));
        }
        Op::Sub(a, b) => {
            accumulate(grads, nodes, *a, unbroadcast(val(*a), g.to_vec()));
            let neg: Vec<f64> = g.iter().map(|x| -x).collect();
            accumulate(grads, nodes, *b, unbroadcast(val(*b), neg));
        }
        Op::Mul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if nodes[a.0].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * broadcast_get(tb, i)).collect();
                accumulate(grads, nodes, *a, unbroadcast(ta, ga));
            }
            if nodes[b.0].requires_grad {
                let gb: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * broadcast_get(ta, i)).collect();
                accumulate(grads, nodes, *b, unbroadcast(tb, gb));
            }
        }
        Op::Div(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            if nodes[a.0].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi / broadcast_get(tb, i)).collect();
                accumulate(grads, nodes, *a, unbroadcast(ta, ga));
            }
            if nodes[b.0].requires_grad {
                let gb: Vec<f64> = g
                    .iter()
                    .enumerate()
                    .map(|(i, &gi)| {
                        let y = broadcast_get(tb, i);
                        -gi * broadcast_get(ta, i) / (y * y)
                    })
                    .collect();
                accumulate(grads, nodes, *b, unbroadcast(tb, gb));
            }
        }
        Op::AddRow(a, r) => {
            accumulate(grads, nodes, *a, g.to_vec());
            if nodes[r.0].requires_grad {
                let m = val(*r).len();
                let mut gr = vec![0.0; m];
                for chunk in g.chunks(m) {
                    for (o, x) in gr.iter_mut().zip(chunk) {
                        *o += x;
                    }
                }
                accumulate(grads, nodes, *r, gr);
            }
        }
        Op::MulRow(a, r) => {
            let (ta, tr) = (val(*a), val(*r));
            let m = tr.len();
            if nodes[a.0].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * tr.data()[i % m]).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[r.0].requires_grad {
                let mut gr = vec![0.0; m];
                for (i, &gi) in g.iter().enumerate() {
                    gr[i % m] += gi * ta.data()[i];
                }
                accumulate(grads, nodes, *r, gr);
            }
        }
        Op::MulCol(a, c) => {
            let (ta, tc) = (val(*a), val(*c));
            let (n, m) = ta.dims2()?;
            if nodes[a.0].requires_grad {
                let ga: Vec<f64> = g.iter().enumerate().map(|(i, &gi)| gi * tc.data()[i / m]).collect();
                accumulate(grads, nodes, *a, ga);
            }
            if nodes[c.0].requires_grad {
                let gc: Vec<f64> = (0..n)
                    .map(|i| g[i * m..(i + 1) * m].iter().zip(ta.row_slice(i)).map(|(x, y)| x * y).sum())
                    .collect();
                accumulate(grads, nodes, *c, gc);
            }
        }
        Op::Unary(a, op) => {
            let ta = val(*a);
            let y = &node.value;
            let ga: Vec<f64> = g
                .iter()
                .zip(ta.data())
                .zip(y.data())
                .map(|((&gi, &x), &yi)| gi * unary_derivative(*op, x, yi))
                .collect();
            accumulate(grads, nodes, *a, ga);
        }
        Op::Matmul(a, b) => {
            let (ta, tb) = (val(*a), val(*b));
            let (m, k) = ta.dims2()?;
            let (_, n) = tb.dims2()?;
            if nodes[a.0].requires_grad {
                // dA = dC * B^T
                accumulate(grads, nodes, *a, gemm_nt(g, tb.data(), m, n, k));
            }
            if nodes[b.0].requires_grad {
                // dB = A^T * dC
                accumulate(grads, nodes, *b, gemm_tn(ta.data(), g, m, k, n));
            }
        }
        Op::Transpose(a) => {
            let (r, c) = node.value.dims2()?;
            let gt = Tensor::from_parts(vec![r, c], g.to_vec()).transpose()?;
            accumulate(grads, nodes, *a, gt.into_data());
        }
        Op::SumAll(a) => {
            accumulate(grads, nodes, *a, vec![g[0]; val(*a).len()]);
        }
        Op::SumRows(a) => {
            let (n, m) = val(*a).dims2()?;
            let mut ga = Vec::with_capacity(n * m);
            for _ in 0..n {
                ga.extend_from_slice(&g[..m]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SumCols(a) => {
            let (n, m) = val(*a).dims2()?;
            let mut ga = Vec::with_capacity(n * m);
            for &gi in g.iter().take(n) {
                ga.extend(std::iter::repeat(gi).take(m));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::LogSumExpCols(a) => {
            let ta = val(*a);
            let (n, m) = ta.dims2()?;
            let mut ga = Vec::with_capacity(n * m);
            for i in 0..n {
                let l = node.value.data()[i];
                ga.extend(ta.row_slice(i).iter().map(|&x| g[i] * (x - l).exp()));
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::HCat(parts) => {
            let n = node.value.rows();
            let total = node.value.cols();
            let mut offset = 0;
            for p in parts {
                let c = val(*p).cols();
                if nodes[p.0].requires_grad {
                    let mut gp = Vec::with_capacity(n * c);
                    for i in 0..n {
                        gp.extend_from_slice(&g[i * total + offset..i * total + offset + c]);
                    }
                    accumulate(grads, nodes, *p, gp);
                }
                offset += c;
            }
        }
        Op::VCat(parts) => {
            let mut offset = 0;
            for p in parts {
                let len = val(*p).len();
                accumulate(grads, nodes, *p, g[offset..offset + len].to_vec());
                offset += len;
            }
        }
        Op::SliceCols(a, start) => {
            let (n, m) = val(*a).dims2()?;
            let len = node.value.cols();
            let mut ga = vec![0.0; n * m];
            for i in 0..n {
                ga[i * m + start..i * m + start + len].copy_from_slice(&g[i * len..(i + 1) * len]);
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::SelectRows(a, idx) => {
            let (n, m) = val(*a).dims2()?;
            let mut ga = vec![0.0; n * m];
            for (k, &i) in idx.iter().enumerate() {
                for c in 0..m {
                    ga[i * m + c] += g[k * m + c];
                }
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::Pick(a, idx) => {
            let (n, m) = val(*a).dims2()?;
            let mut ga = vec![0.0; n * m];
            for (i, &j) in idx.iter().enumerate() {
                ga[i * m + j] = g[i];
            }
            accumulate(grads, nodes, *a, ga);
        }
        Op::GaussPairs(x, mu, ls) => {
            let (tx, tm, tl) = (val(*x), val(*mu), val(*ls));
            let (n, d) = tx.dims2()?;
            let k = tm.rows();
            let mut gx = vec![0.0; n * d];
            let mut gm = vec![0.0; k * d];
            let mut gl = vec![0.0; k * d];
            for i in 0..n {
                for j in 0..k {
                    let gij = g[i * k + j];
                    if gij == 0.0 {
                        continue;
                    }
                    for c in 0..d {
                        let inv = (-tl.at(j, c)).exp();
                        let diff = tx.at(i, c) - tm.at(j, c);
                        let u = diff * inv;
                        // d/dx = -u/sigma, d/dmu = u/sigma, d/dlog_sigma = u^2 - 1
                        gx[i * d + c] -= gij * u * inv;
                        gm[j * d + c] += gij * u * inv;
                        gl[j * d + c] += gij * (u * u - 1.0);
                    }
                }
            }
            accumulate(grads, nodes, *x, gx);
            accumulate(grads, nodes, *mu, gm);
            accumulate(grads, nodes, *ls, gl);
        }
    }
    Ok(())
}

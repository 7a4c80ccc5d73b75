//! Dense-matrix reverse-mode differentiation.
//!
//! A [`Graph`] is an append-only arena of nodes. Every operation evaluates
//! eagerly, records how it was produced, and checks that its result is
//! finite. [`Graph::backward`] walks the arena in reverse creation order,
//! which is always a valid topological order.
//!
//! Broadcasting is limited to scalar-times-matrix ([`Graph::scale`],
//! [`Graph::add_scalar`]) and per-row bias addition ([`Graph::add_row_bias`]).

mod matrix;

pub use matrix::Matrix;

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum DiffError {
    #[error("dimension error in {op}: {detail}")]
    Dimension { op: &'static str, detail: String },
    #[error("domain error in {op}: {detail}")]
    Domain { op: &'static str, detail: String },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a 1x1 loss, got {rows}x{cols}")]
    NonScalarLoss { rows: usize, cols: usize },
}

/// Handle to a node inside a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Hadamard(Var, Var),
    AddRowBias(Var, Var),
    /// Elementwise product with a constant (dropout masks).
    MulConst(Var, Matrix),
    Scale(Var, f64),
    AddScalar(Var),
    Neg(Var),
    Tanh(Var),
    Sigmoid(Var),
    Exp(Var),
    Log(Var),
    Relu(Var),
    Softplus(Var),
    Transpose(Var),
    Sum(Var),
    Mean(Var),
    SoftmaxRows(Var),
    MaxRows(Var, Vec<usize>),
    SelectRows(Var, Vec<usize>),
}

#[derive(Clone, Debug)]
struct Node {
    value: Matrix,
    grad: Matrix,
    op: Op,
    requires_grad: bool,
}

/// Gradients produced by one [`Graph::backward`] call.
#[derive(Clone, Debug)]
pub struct Gradients {
    grads: Vec<Option<Matrix>>,
}

impl Gradients {
    /// Gradient of the loss with respect to `var`, or `None` when no
    /// gradient reached it.
    pub fn get(&self, var: Var) -> Option<&Matrix> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }
}

/// Arena of differentiable nodes. Confined to one thread; independent graphs
/// may run concurrently.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Numerically stable logistic function.
#[inline]
pub fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// `ln(1 + e^x)` without overflow.
#[inline]
pub fn softplus(x: f64) -> f64 {
    x.max(0.0) + (-x.abs()).exp().ln_1p()
}

fn same_shape(op: &'static str, a: &Matrix, b: &Matrix) -> Result<(), DiffError> {
    if a.shape() != b.shape() {
        return Err(DiffError::Dimension {
            op,
            detail: format!("{:?} vs {:?}", a.shape(), b.shape()),
        });
    }
    Ok(())
}

fn non_empty(op: &'static str, a: &Matrix) -> Result<(), DiffError> {
    if a.is_empty() {
        return Err(DiffError::Dimension {
            op,
            detail: "empty input".into(),
        });
    }
    Ok(())
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

    fn push(&mut self, value: Matrix, op: Op, requires_grad: bool) -> Result<Var, DiffError> {
        if !value.is_finite() {
            return Err(DiffError::NonFinite { op: op_name(&op) });
        }
        let grad = Matrix::zeros(value.rows(), value.cols());
        self.nodes.push(Node {
            value,
            grad,
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Trainable leaf; gradients are accumulated into it.
    pub fn param(&mut self, value: Matrix) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, true)
    }

    /// Leaf that never receives gradients.
    pub fn constant(&mut self, value: Matrix) -> Result<Var, DiffError> {
        self.push(value, Op::Leaf, false)
    }

    pub fn value(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v` across all `backward` calls since the
    /// last [`Graph::zero_grad`].
    pub fn grad(&self, v: Var) -> &Matrix {
        &self.nodes[v.0].grad
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.grad.as_mut_slice().fill(0.0);
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        if av.cols() != bv.rows() {
            return Err(DiffError::Dimension {
                op: "matmul",
                detail: format!("{:?} x {:?}", av.shape(), bv.shape()),
            });
        }
        let out = av.matmul(bv);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, Op::MatMul(a, b), rg)
    }

    fn binary(
        &mut self,
        a: Var,
        b: Var,
        op: Op,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(b));
        same_shape(name, av, bv)?;
        let out = av.zip_map(bv, f);
        let rg = self.rg(a) || self.rg(b);
        self.push(out, op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Add(a, b), "add", |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Sub(a, b), "sub", |x, y| x - y)
    }

    pub fn hadamard(&mut self, a: Var, b: Var) -> Result<Var, DiffError> {
        self.binary(a, b, Op::Hadamard(a, b), "hadamard", |x, y| x * y)
    }

    /// Adds the `1×c` row vector `bias` to every row of `a`.
    pub fn add_row_bias(&mut self, a: Var, bias: Var) -> Result<Var, DiffError> {
        let (av, bv) = (self.value(a), self.value(bias));
        if bv.rows() != 1 || bv.cols() != av.cols() {
            return Err(DiffError::Dimension {
                op: "add_row_bias",
                detail: format!("bias {:?} for input {:?}", bv.shape(), av.shape()),
            });
        }
        let cols = av.cols();
        let mut out = av.clone();
        for (i, v) in out.as_mut_slice().iter_mut().enumerate() {
            *v += bv.as_slice()[i % cols];
        }
        let rg = self.rg(a) || self.rg(bias);
        self.push(out, Op::AddRowBias(a, bias), rg)
    }

    /// Elementwise product with a constant matrix.
    pub fn mul_const(&mut self, a: Var, mask: Matrix) -> Result<Var, DiffError> {
        let av = self.value(a);
        same_shape("mul_const", av, &mask)?;
        let out = av.zip_map(&mask, |x, m| x * m);
        let rg = self.rg(a);
        self.push(out, Op::MulConst(a, mask), rg)
    }

    fn unary(&mut self, a: Var, op: Op, f: impl Fn(f64) -> f64) -> Result<Var, DiffError> {
        let out = self.value(a).map(f);
        let rg = self.rg(a);
        self.push(out, op, rg)
    }

    pub fn scale(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::Scale(a, k), |x| x * k)
    }

    pub fn add_scalar(&mut self, a: Var, k: f64) -> Result<Var, DiffError> {
        self.unary(a, Op::AddScalar(a), |x| x + k)
    }

    pub fn neg(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Neg(a), |x| -x)
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Tanh(a), f64::tanh)
    }

    pub fn sigmoid(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Sigmoid(a), sigmoid)
    }

    pub fn exp(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Exp(a), f64::exp)
    }

    pub fn log(&mut self, a: Var) -> Result<Var, DiffError> {
        if let Some(bad) = self.value(a).as_slice().iter().find(|&&x| x <= 0.0) {
            return Err(DiffError::Domain {
                op: "log",
                detail: format!("non-positive argument {bad}"),
            });
        }
        self.unary(a, Op::Log(a), f64::ln)
    }

    pub fn relu(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Relu(a), |x| x.max(0.0))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var, DiffError> {
        self.unary(a, Op::Softplus(a), softplus)
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var, DiffError> {
        let out = self.value(a).transpose();
        let rg = self.rg(a);
        self.push(out, Op::Transpose(a), rg)
    }

    pub fn sum(&mut self, a: Var) -> Result<Var, DiffError> {
        non_empty("sum", self.value(a))?;
        let out = Matrix::scalar(self.value(a).sum());
        let rg = self.rg(a);
        self.push(out, Op::Sum(a), rg)
    }

    pub fn mean(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        non_empty("mean", av)?;
        let out = Matrix::scalar(av.sum() / av.len() as f64);
        let rg = self.rg(a);
        self.push(out, Op::Mean(a), rg)
    }

    /// Softmax across the columns of every row.
    pub fn softmax_rows(&mut self, a: Var) -> Result<Var, DiffError> {
        let av = self.value(a);
        non_empty("softmax_rows", av)?;
        let mut out = av.clone();
        let cols = av.cols();
        for row in out.as_mut_slice().chunks_mut(cols) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut total = 0.0;
            for v in row.iter_mut() {
                *v = (*v - m).exp();
                total += *v;
            }
            for v in row.iter_mut() {
                *v /= total;
            }
        }
        let rg = self.rg(a);
        self.push(out, Op::SoftmaxRows(a), rg)
    }

    /// Maximum of every row as an `r×1` column. The first maximal entry wins
    /// ties and is the only one to receive gradient.
    pub fn max_rows(&mut self, a: Var) -> Result<(Var, Vec<usize>), DiffError> {
        let av = self.value(a);
        non_empty("max_rows", av)?;
        let mut out = Matrix::zeros(av.rows(), 1);
        let mut argmax = Vec::with_capacity(av.rows());
        for r in 0..av.rows() {
            let (idx, best) = argmax_first(av.row(r));
            out.set(r, 0, best);
            argmax.push(idx);
        }
        let rg = self.rg(a);
        let v = self.push(out, Op::MaxRows(a, argmax.clone()), rg)?;
        Ok((v, argmax))
    }

    /// Gathers the listed rows (repeats allowed) into a new matrix.
    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, DiffError> {
        let av = self.value(a);
        if let Some(&bad) = rows.iter().find(|&&r| r >= av.rows()) {
            return Err(DiffError::Dimension {
                op: "select_rows",
                detail: format!("row {bad} out of {}", av.rows()),
            });
        }
        let cols = av.cols();
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(av.row(r));
        }
        let out = Matrix::from_vec(rows.len(), cols, data)?;
        let rg = self.rg(a);
        self.push(out, Op::SelectRows(a, rows.to_vec()), rg)
    }

    /// Back-propagates from the `1×1` node `loss`.
    ///
    /// The returned [`Gradients`] hold this call's contribution only. The
    /// same contribution is also added to every node's stored gradient, so
    /// repeated calls without [`Graph::zero_grad`] accumulate.
    pub fn backward(&mut self, loss: Var) -> Result<Gradients, DiffError> {
        let (rows, cols) = self.value(loss).shape();
        if (rows, cols) != (1, 1) {
            return Err(DiffError::NonScalarLoss { rows, cols });
        }
        let mut adj: Vec<Option<Matrix>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(Matrix::ones(1, 1));

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if !self.nodes[i].requires_grad {
                adj[i] = Some(g);
                continue;
            }
            self.propagate(i, &g, &mut adj);
            adj[i] = Some(g);
        }

        for (node, g) in self.nodes.iter_mut().zip(&adj) {
            if let (true, Some(g)) = (node.requires_grad, g) {
                node.grad.add_assign(g);
            }
        }
        adj.iter_mut()
            .enumerate()
            .for_each(|(i, g)| {
                if !self.nodes[i].requires_grad {
                    *g = None;
                }
            });
        Ok(Gradients { grads: adj })
    }

    fn propagate(&self, i: usize, g: &Matrix, adj: &mut [Option<Matrix>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let mut send = |v: Var, contrib: Matrix| {
            if !self.nodes[v.0].requires_grad {
                return;
            }
            match &mut adj[v.0] {
                Some(acc) => acc.add_assign(&contrib),
                slot @ None => *slot = Some(contrib),
            }
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                if self.rg(*a) {
                    send(*a, g.matmul_nt(self.value(*b)));
                }
                if self.rg(*b) {
                    send(*b, self.value(*a).matmul_tn(g));
                }
            }
            Op::Add(a, b) => {
                send(*a, g.clone());
                send(*b, g.clone());
            }
            Op::Sub(a, b) => {
                send(*a, g.clone());
                send(*b, g.map(|x| -x));
            }
            Op::Hadamard(a, b) => {
                send(*a, g.zip_map(self.value(*b), |x, y| x * y));
                send(*b, g.zip_map(self.value(*a), |x, y| x * y));
            }
            Op::AddRowBias(a, bias) => {
                send(*a, g.clone());
                if self.rg(*bias) {
                    let mut col = Matrix::zeros(1, g.cols());
                    for r in 0..g.rows() {
                        for (c, v) in g.row(r).iter().enumerate() {
                            col.as_mut_slice()[c] += v;
                        }
                    }
                    send(*bias, col);
                }
            }
            Op::MulConst(a, mask) => send(*a, g.zip_map(mask, |x, m| x * m)),
            Op::Scale(a, k) => send(*a, g.map(|x| x * k)),
            Op::AddScalar(a) => send(*a, g.clone()),
            Op::Neg(a) => send(*a, g.map(|x| -x)),
            Op::Tanh(a) => send(*a, g.zip_map(out, |x, y| x * (1.0 - y * y))),
            Op::Sigmoid(a) => send(*a, g.zip_map(out, |x, y| x * y * (1.0 - y))),
            Op::Exp(a) => send(*a, g.zip_map(out, |x, y| x * y)),
            Op::Log(a) => send(*a, g.zip_map(self.value(*a), |x, y| x / y)),
            Op::Relu(a) => send(
                *a,
                g.zip_map(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 }),
            ),
            Op::Softplus(a) => send(*a, g.zip_map(self.value(*a), |x, y| x * sigmoid(y))),
            Op::Transpose(a) => send(*a, g.transpose()),
            Op::Sum(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Matrix::filled(r, c, g.item()));
            }
            Op::Mean(a) => {
                let (r, c) = self.value(*a).shape();
                send(*a, Matrix::filled(r, c, g.item() / (r * c) as f64));
            }
            Op::SoftmaxRows(a) => {
                let cols = out.cols();
                let mut d = Matrix::zeros(out.rows(), cols);
                for r in 0..out.rows() {
                    let y = out.row(r);
                    let gr = g.row(r);
                    let dot: f64 = y.iter().zip(gr).map(|(a, b)| a * b).sum();
                    for c in 0..cols {
                        d.set(r, c, y[c] * (gr[c] - dot));
                    }
                }
                send(*a, d);
            }
            Op::MaxRows(a, argmax) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (row, &col) in argmax.iter().enumerate() {
                    d.set(row, col, g.get(row, 0));
                }
                send(*a, d);
            }
            Op::SelectRows(a, rows) => {
                let (r, c) = self.value(*a).shape();
                let mut d = Matrix::zeros(r, c);
                for (k, &src) in rows.iter().enumerate() {
                    for col in 0..c {
                        let v = d.get(src, col) + g.get(k, col);
                        d.set(src, col, v);
                    }
                }
                send(*a, d);
            }
        }
    }
}

/// Index and value of the first maximum.
pub fn argmax_first(values: &[f64]) -> (usize, f64) {
    let mut idx = 0;
    let mut best = values[0];
    for (i, &v) in values.iter().enumerate().skip(1) {
        if v > best {
            best = v;
            idx = i;
        }
    }
    (idx, best)
}

fn op_name(op: &Op) -> &'static str {
    match op {
        Op::Leaf => "leaf",
        Op::MatMul(..) => "matmul",
        Op::Add(..) => "add",
        Op::Sub(..) => "sub",
        Op::Hadamard(..) => "hadamard",
        Op::AddRowBias(..) => "add_row_bias",
        Op::MulConst(..) => "mul_const",
        Op::Scale(..) => "scale",
        Op::AddScalar(..) => "add_scalar",
        Op::Neg(..) => "neg",
        Op::Tanh(..) => "tanh",
        Op::Sigmoid(..) => "sigmoid",
        Op::Exp(..) => "exp",
        Op::Log(..) => "log",
        Op::Relu(..) => "relu",
        Op::Softplus(..) => "softplus",
        Op::Transpose(..) => "transpose",
        Op::Sum(..) => "sum",
        Op::Mean(..) => "mean",
        Op::SoftmaxRows(..) => "softmax_rows",
        Op::MaxRows(..) => "max_rows",
        Op::SelectRows(..) => "select_rows",
    }
}

use super::tensor::{matmul_raw, Tensor};
use super::{AutodiffError, LOG_EPS};

/// Handle to a node in a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
enum Op {
    Leaf,
    MatMul(usize, usize),
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    AddRow(usize, usize),
    MulRow(usize, usize),
    Scale(usize, f64),
    AddScalar(usize),
    Neg(usize),
    Relu(usize),
    Log(usize),
    Exp(usize),
    Sigmoid(usize),
    Softmax(usize),
    /// Row-wise standardization; caches `1 / sqrt(var + eps)` per row.
    Standardize(usize, Vec<f64>),
    Concat(usize, usize),
    SelectRows(usize, Vec<usize>),
    SumRows(usize),
    MeanRows(usize),
    Sum(usize),
    Mean(usize),
}

impl Op {
    fn tag(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul(..) => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::AddRow(..) => "add_row",
            Op::MulRow(..) => "mul_row",
            Op::Scale(..) => "scale",
            Op::AddScalar(..) => "add_scalar",
            Op::Neg(..) => "negate",
            Op::Relu(..) => "relu",
            Op::Log(..) => "log",
            Op::Exp(..) => "exp",
            Op::Sigmoid(..) => "sigmoid",
            Op::Softmax(..) => "softmax",
            Op::Standardize(..) => "standardize",
            Op::Concat(..) => "concat",
            Op::SelectRows(..) => "select_rows",
            Op::SumRows(..) => "sum_rows",
            Op::MeanRows(..) => "mean_rows",
            Op::Sum(..) => "sum",
            Op::Mean(..) => "mean",
        }
    }
}

/// A computation node: operation, cached output, accumulated gradient.
#[derive(Clone, Debug)]
pub struct ComputationNode {
    op: Op,
    value: Tensor,
    needs_grad: bool,
    grad: Option<Tensor>,
}

impl ComputationNode {
    pub fn op_tag(&self) -> &'static str {
        self.op.tag()
    }

    pub fn value(&self) -> &Tensor {
        &self.value
    }
}

/// Define-by-run computation graph with reverse-mode differentiation.
///
/// Nodes are appended in evaluation order, so the node list is already a
/// topological order and `backward` walks it in reverse. Gradients accumulate
/// across `backward` calls until [`Graph::zero_grad`].
#[derive(Default)]
pub struct Graph {
    nodes: Vec<ComputationNode>,
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

    pub fn node(&self, v: Var) -> &ComputationNode {
        &self.nodes[v.0]
    }

    /// Leaf whose gradient is tracked.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, true)
    }

    /// Leaf that never receives gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(Op::Leaf, value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Accumulated gradient of `v`; zeros if no backward pass reached it.
    pub fn grad(&self, v: Var) -> Tensor {
        let node = &self.nodes[v.0];
        node.grad
            .clone()
            .unwrap_or_else(|| Tensor::zeros(node.value.shape()))
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.grad = None;
        }
    }

    fn push(&mut self, op: Op, value: Tensor, leaf_grad: bool) -> Var {
        let needs_grad = leaf_grad || self.inputs(&op).iter().any(|&i| self.nodes[i].needs_grad);
        self.nodes.push(ComputationNode {
            op,
            value,
            needs_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn inputs(&self, op: &Op) -> Vec<usize> {
        match *op {
            Op::Leaf => vec![],
            Op::MatMul(a, b)
            | Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::MulRow(a, b)
            | Op::Concat(a, b) => vec![a, b],
            Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Neg(a)
            | Op::Relu(a)
            | Op::Log(a)
            | Op::Exp(a)
            | Op::Sigmoid(a)
            | Op::Softmax(a)
            | Op::SumRows(a)
            | Op::MeanRows(a)
            | Op::Sum(a)
            | Op::Mean(a) => vec![a],
            Op::Standardize(a, _) | Op::SelectRows(a, _) => vec![a],
        }
    }

    fn mismatch(&self, op: &'static str, a: Var, b: Var) -> AutodiffError {
        AutodiffError::ShapeMismatch {
            op,
            left: self.value(a).shape().to_vec(),
            right: self.value(b).shape().to_vec(),
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(self.mismatch("matmul", a, b));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = Tensor::matrix(m, n, matmul_raw(ta.data(), tb.data(), m, k, n));
        Ok(self.push(Op::MatMul(a.0, b.0), out, false))
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<(), AutodiffError> {
        if self.value(a).shape() != self.value(b).shape() {
            return Err(self.mismatch(op, a, b));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("add", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x + y);
        Ok(self.push(Op::Add(a.0, b.0), out, false))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("sub", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x - y);
        Ok(self.push(Op::Sub(a.0, b.0), out, false))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        self.same_shape("mul", a, b)?;
        let out = self.value(a).zip(self.value(b), |x, y| x * y);
        Ok(self.push(Op::Mul(a.0, b.0), out, false))
    }

    fn row_broadcast_check(&self, op: &'static str, a: Var, row: Var) -> Result<(), AutodiffError> {
        let (_, cols) = self.value(a).dims2();
        let r = self.value(row);
        if r.rank() != 1 || r.numel() != cols {
            return Err(self.mismatch(op, a, row));
        }
        Ok(())
    }

    /// `a[i, j] + row[j]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast_check("add_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let cols = tr.numel();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v += tr.data()[i % cols];
        }
        Ok(self.push(Op::AddRow(a.0, row.0), out, false))
    }

    /// `a[i, j] * row[j]`.
    pub fn mul_row(&mut self, a: Var, row: Var) -> Result<Var, AutodiffError> {
        self.row_broadcast_check("mul_row", a, row)?;
        let (ta, tr) = (self.value(a), self.value(row));
        let cols = tr.numel();
        let mut out = ta.clone();
        for (i, v) in out.data_mut().iter_mut().enumerate() {
            *v *= tr.data()[i % cols];
        }
        Ok(self.push(Op::MulRow(a.0, row.0), out, false))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let out = self.value(a).map(|x| x * factor);
        self.push(Op::Scale(a.0, factor), out, false)
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let out = self.value(a).map(|x| x + c);
        self.push(Op::AddScalar(a.0), out, false)
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| -x);
        self.push(Op::Neg(a.0), out, false)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let out = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(Op::Relu(a.0), out, false)
    }

    /// Natural log of `max(x, LOG_EPS)`.
    pub fn log(&mut self, a: Var) -> Var {
        let out = self.value(a).map(clamped_ln);
        self.push(Op::Log(a.0), out, false)
    }

    pub fn exp(&mut self, a: Var) -> Var {
        let out = self.value(a).map(f64::exp);
        self.push(Op::Exp(a.0), out, false)
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        let out = self.value(a).map(sigmoid);
        self.push(Op::Sigmoid(a.0), out, false)
    }

    /// Row-wise softmax over the last axis.
    pub fn softmax(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = t.clone();
        for r in 0..rows {
            softmax_in_place(&mut out.data_mut()[r * cols..(r + 1) * cols]);
        }
        self.push(Op::Softmax(a.0), out, false)
    }

    /// Row-wise `(x - mean) / sqrt(var + eps)` over the last axis.
    pub fn standardize(&mut self, a: Var, eps: f64) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut out = t.clone();
        let mut inv_std = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = &mut out.data_mut()[r * cols..(r + 1) * cols];
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|x| (x - mean) * (x - mean)).sum::<f64>() / cols as f64;
            let is = 1.0 / (var + eps).sqrt();
            for x in row.iter_mut() {
                *x = (*x - mean) * is;
            }
            inv_std.push(is);
        }
        self.push(Op::Standardize(a.0, inv_std), out, false)
    }

    /// Concatenates two matrices along the last axis.
    pub fn concat(&mut self, a: Var, b: Var) -> Result<Var, AutodiffError> {
        let (ta, tb) = (self.value(a), self.value(b));
        let ((ra, ca), (rb, cb)) = (ta.dims2(), tb.dims2());
        if ta.rank() != 2 || tb.rank() != 2 || ra != rb {
            return Err(self.mismatch("concat", a, b));
        }
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for r in 0..ra {
            data.extend_from_slice(ta.row(r));
            data.extend_from_slice(tb.row(r));
        }
        let out = Tensor::matrix(ra, ca + cb, data);
        Ok(self.push(Op::Concat(a.0, b.0), out, false))
    }

    pub fn select_rows(&mut self, a: Var, rows: &[usize]) -> Result<Var, AutodiffError> {
        let t = self.value(a);
        let (n, cols) = t.dims2();
        if t.rank() != 2 || rows.iter().any(|&r| r >= n) {
            return Err(AutodiffError::ShapeMismatch {
                op: "select_rows",
                left: t.shape().to_vec(),
                right: vec![rows.len()],
            });
        }
        let mut data = Vec::with_capacity(rows.len() * cols);
        for &r in rows {
            data.extend_from_slice(t.row(r));
        }
        let out = Tensor::matrix(rows.len(), cols, data);
        Ok(self.push(Op::SelectRows(a.0, rows.to_vec()), out, false))
    }

    /// Sums each row: `[m, n] -> [m]`.
    pub fn sum_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, _) = t.dims2();
        let data = (0..rows).map(|r| t.row(r).iter().sum()).collect();
        self.push(Op::SumRows(a.0), Tensor::vector(data), false)
    }

    /// Averages over rows: `[m, n] -> [n]`.
    pub fn mean_rows(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let (rows, cols) = t.dims2();
        let mut data = vec![0.0; cols];
        for r in 0..rows {
            for (d, &x) in data.iter_mut().zip(t.row(r)) {
                *d += x;
            }
        }
        for d in &mut data {
            *d /= rows as f64;
        }
        self.push(Op::MeanRows(a.0), Tensor::vector(data), false)
    }

    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(Op::Sum(a.0), Tensor::scalar(s), false)
    }

    pub fn mean(&mut self, a: Var) -> Var {
        let t = self.value(a);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        self.push(Op::Mean(a.0), Tensor::scalar(s), false)
    }

    /// Reverse pass from a scalar `loss`, adding into every node's gradient.
    pub fn backward(&mut self, loss: Var) -> Result<(), AutodiffError> {
        let lt = self.value(loss);
        if lt.numel() != 1 {
            return Err(AutodiffError::NonScalarLoss {
                shape: lt.shape().to_vec(),
            });
        }
        let mut adj: Vec<Option<Vec<f64>>> = vec![None; loss.0 + 1];
        adj[loss.0] = Some(vec![1.0]);

        for i in (0..=loss.0).rev() {
            let Some(g) = adj[i].take() else { continue };
            if self.nodes[i].needs_grad {
                self.propagate(i, &g, &mut adj);
            }
            let node = &mut self.nodes[i];
            match node.grad.as_mut() {
                Some(acc) => {
                    for (a, d) in acc.data_mut().iter_mut().zip(&g) {
                        *a += d;
                    }
                }
                None => {
                    node.grad = Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"));
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[i];
        let out = &node.value;
        let val = |j: usize| &self.nodes[j].value;
        let wants = |j: usize| self.nodes[j].needs_grad;
        match &node.op {
            Op::Leaf => {}
            &Op::MatMul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
                if wants(a) {
                    let bt = transpose(tb.data(), k, n);
                    accumulate(adj, a, matmul_raw(g, &bt, m, n, k));
                }
                if wants(b) {
                    let at = transpose(ta.data(), m, k);
                    accumulate(adj, b, matmul_raw(&at, g, k, m, n));
                }
            }
            &Op::Add(a, b) => {
                if wants(a) {
                    accumulate(adj, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(adj, b, g.to_vec());
                }
            }
            &Op::Sub(a, b) => {
                if wants(a) {
                    accumulate(adj, a, g.to_vec());
                }
                if wants(b) {
                    accumulate(adj, b, g.iter().map(|x| -x).collect());
                }
            }
            &Op::Mul(a, b) => {
                let (ta, tb) = (val(a), val(b));
                if wants(a) {
                    accumulate(adj, a, g.iter().zip(tb.data()).map(|(g, y)| g * y).collect());
                }
                if wants(b) {
                    accumulate(adj, b, g.iter().zip(ta.data()).map(|(g, x)| g * x).collect());
                }
            }
            &Op::AddRow(a, row) => {
                if wants(a) {
                    accumulate(adj, a, g.to_vec());
                }
                if wants(row) {
                    let cols = val(row).numel();
                    let mut gr = vec![0.0; cols];
                    for (idx, &gv) in g.iter().enumerate() {
                        gr[idx % cols] += gv;
                    }
                    accumulate(adj, row, gr);
                }
            }
            &Op::MulRow(a, row) => {
                let (ta, tr) = (val(a), val(row));
                let cols = tr.numel();
                if wants(a) {
                    let ga = g
                        .iter()
                        .enumerate()
                        .map(|(idx, gv)| gv * tr.data()[idx % cols])
                        .collect();
                    accumulate(adj, a, ga);
                }
                if wants(row) {
                    let mut gr = vec![0.0; cols];
                    for (idx, (&gv, &x)) in g.iter().zip(ta.data()).enumerate() {
                        gr[idx % cols] += gv * x;
                    }
                    accumulate(adj, row, gr);
                }
            }
            &Op::Scale(a, f) => accumulate(adj, a, g.iter().map(|x| x * f).collect()),
            &Op::AddScalar(a) => accumulate(adj, a, g.to_vec()),
            &Op::Neg(a) => accumulate(adj, a, g.iter().map(|x| -x).collect()),
            &Op::Relu(a) => {
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                    .collect();
                accumulate(adj, a, ga);
            }
            &Op::Log(a) => {
                let ga = g
                    .iter()
                    .zip(val(a).data())
                    .map(|(&gv, &x)| if x > LOG_EPS { gv / x } else { 0.0 })
                    .collect();
                accumulate(adj, a, ga);
            }
            &Op::Exp(a) => accumulate(adj, a, g.iter().zip(out.data()).map(|(g, y)| g * y).collect()),
            &Op::Sigmoid(a) => {
                let ga = g
                    .iter()
                    .zip(out.data())
                    .map(|(gv, s)| gv * s * (1.0 - s))
                    .collect();
                accumulate(adj, a, ga);
            }
            &Op::Softmax(a) => {
                let (rows, cols) = out.dims2();
                let mut ga = vec![0.0; g.len()];
                for r in 0..rows {
                    let p = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let dot: f64 = p.iter().zip(gr).map(|(p, g)| p * g).sum();
                    for c in 0..cols {
                        ga[r * cols + c] = p[c] * (gr[c] - dot);
                    }
                }
                accumulate(adj, a, ga);
            }
            Op::Standardize(a, inv_std) => {
                let (rows, cols) = out.dims2();
                let n = cols as f64;
                let mut ga = vec![0.0; g.len()];
                for r in 0..rows {
                    let y = out.row(r);
                    let gr = &g[r * cols..(r + 1) * cols];
                    let mean_g = gr.iter().sum::<f64>() / n;
                    let mean_gy = gr.iter().zip(y).map(|(g, y)| g * y).sum::<f64>() / n;
                    for c in 0..cols {
                        ga[r * cols + c] = inv_std[r] * (gr[c] - mean_g - y[c] * mean_gy);
                    }
                }
                accumulate(adj, *a, ga);
            }
            &Op::Concat(a, b) => {
                let (rows, ca) = val(a).dims2();
                let (_, cb) = val(b).dims2();
                let width = ca + cb;
                if wants(a) {
                    let mut ga = Vec::with_capacity(rows * ca);
                    for r in 0..rows {
                        ga.extend_from_slice(&g[r * width..r * width + ca]);
                    }
                    accumulate(adj, a, ga);
                }
                if wants(b) {
                    let mut gb = Vec::with_capacity(rows * cb);
                    for r in 0..rows {
                        gb.extend_from_slice(&g[r * width + ca..(r + 1) * width]);
                    }
                    accumulate(adj, b, gb);
                }
            }
            Op::SelectRows(a, picked) => {
                let src = val(*a);
                let (_, cols) = src.dims2();
                let mut ga = vec![0.0; src.numel()];
                for (k, &r) in picked.iter().enumerate() {
                    for c in 0..cols {
                        ga[r * cols + c] += g[k * cols + c];
                    }
                }
                accumulate(adj, *a, ga);
            }
            &Op::SumRows(a) => {
                let (rows, cols) = val(a).dims2();
                let mut ga = Vec::with_capacity(rows * cols);
                for &gv in g.iter().take(rows) {
                    ga.extend(std::iter::repeat_n(gv, cols));
                }
                accumulate(adj, a, ga);
            }
            &Op::MeanRows(a) => {
                let (rows, cols) = val(a).dims2();
                let inv = 1.0 / rows as f64;
                let mut ga = Vec::with_capacity(rows * cols);
                for _ in 0..rows {
                    ga.extend(g.iter().map(|x| x * inv));
                }
                accumulate(adj, a, ga);
            }
            &Op::Sum(a) => accumulate(adj, a, vec![g[0]; val(a).numel()]),
            &Op::Mean(a) => {
                let n = val(a).numel();
                accumulate(adj, a, vec![g[0] / n as f64; n]);
            }
        }
    }
}

fn accumulate(adj: &mut [Option<Vec<f64>>], idx: usize, g: Vec<f64>) {
    match adj[idx].as_mut() {
        Some(acc) => {
            for (a, d) in acc.iter_mut().zip(&g) {
                *a += d;
            }
        }
        None => adj[idx] = Some(g),
    }
}

fn transpose(data: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; data.len()];
    for r in 0..rows {
        for c in 0..cols {
            out[c * rows + r] = data[r * cols + c];
        }
    }
    out
}

pub(crate) fn clamped_ln(x: f64) -> f64 {
    x.max(LOG_EPS).ln()
}

pub(crate) fn sigmoid(x: f64) -> f64 {
    if x >= 0.0 {
        1.0 / (1.0 + (-x).exp())
    } else {
        let e = x.exp();
        e / (1.0 + e)
    }
}

/// Max-subtracted softmax over one row.
pub fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut total = 0.0;
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        total += *x;
    }
    for x in row.iter_mut() {
        *x /= total;
    }
}

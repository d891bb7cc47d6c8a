//! Dense tensors with a reverse-mode tape.
//!
//! Every value produced during a forward pass lives on a [`Tape`] and is
//! addressed by a [`Var`] handle. Nodes are appended in execution order, so
//! the tape is topologically sorted by construction and `backward` is a single
//! reverse sweep.

use thiserror::Error;

/// Guard used when normalising rows that may be (near) zero.
pub const NORM_EPS: f64 = 1e-8;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("{op}: incompatible shapes {left:?} and {right:?}")]
    Shape {
        op: &'static str,
        left: Vec<usize>,
        right: Vec<usize>,
    },
    #[error("{op}: row {row} has no admissible entry in its mask")]
    InvalidMask { op: &'static str, row: usize },
    #[error("backward needs a scalar loss, got shape {0:?}")]
    NonScalar(Vec<usize>),
    #[error("{op}: index {index} out of range for extent {extent}")]
    Index {
        op: &'static str,
        index: usize,
        extent: usize,
    },
}

pub type Result<T> = std::result::Result<T, TensorError>;

/// A row-major dense array with optional gradient storage.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(TensorError::Shape {
                op: "tensor",
                left: shape,
                right: vec![data.len()],
            });
        }
        Ok(Tensor {
            shape,
            data,
            requires_grad: false,
            grad: None,
        })
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Tensor {
            shape,
            data: vec![0.0; numel],
            requires_grad: false,
            grad: None,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Tensor {
            shape: vec![],
            data: vec![value],
            requires_grad: false,
            grad: None,
        }
    }

    /// Builds an `rows × cols` matrix from nested rows.
    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let cols = rows.first().map_or(0, Vec::len);
        if let Some(bad) = rows.iter().find(|r| r.len() != cols) {
            return Err(TensorError::Shape {
                op: "from_rows",
                left: vec![cols],
                right: vec![bad.len()],
            });
        }
        Tensor::new(vec![rows.len(), cols], rows.concat())
    }

    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub fn rows(&self) -> usize {
        self.shape.first().copied().unwrap_or(1)
    }

    pub fn cols(&self) -> usize {
        match self.shape.len() {
            0 => 1,
            1 => self.shape[0],
            _ => self.shape[1..].iter().product(),
        }
    }

    pub fn row(&self, i: usize) -> &[f64] {
        let c = self.cols();
        &self.data[i * c..(i + 1) * c]
    }

    /// Value of a scalar (or the first element of any tensor).
    pub fn item(&self) -> f64 {
        self.data[0]
    }
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    Transpose(Var),
    AddRowBias(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddScalar(Var),
    Relu(Var),
    L2Normalize { x: Var, norms: Vec<f64>, eps: f64 },
    LogSumExp { x: Var, mask: Vec<bool> },
    Pick { x: Var, cols: Vec<usize> },
    GatherRows { x: Var, rows: Vec<usize> },
    ConcatRows(Vec<Var>),
    SumRows(Var),
    Sum(Var),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
}

/// Ordered record of executed operations.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (p, &av) in arow.iter().enumerate() {
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            for (o, &bv) in orow.iter_mut().zip(brow) {
                *o += av * bv;
            }
        }
    }
    out
}

fn transpose_raw(a: &[f64], rows: usize, cols: usize) -> Vec<f64> {
    let mut out = vec![0.0; rows * cols];
    for i in 0..rows {
        for j in 0..cols {
            out[j * rows + i] = a[i * cols + j];
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Tape::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every recorded node. Handles issued before the call become invalid.
    pub fn clear(&mut self) {
        self.nodes.clear();
    }

    fn push(&mut self, mut value: Tensor, op: Op, parents: &[Var]) -> Var {
        value.requires_grad = parents.iter().any(|p| self.nodes[p.0].value.requires_grad);
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a tensor as a leaf; gradient tracking follows `t.requires_grad()`.
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.nodes.push(Node {
            value: t,
            op: Op::Leaf,
        });
        Var(self.nodes.len() - 1)
    }

    /// Records a constant (no gradient).
    pub fn constant(&mut self, mut t: Tensor) -> Var {
        t.requires_grad = false;
        self.leaf(t)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.leaf(t.with_grad())
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].value.shape
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad.as_deref()
    }

    pub fn zero_grad(&mut self) {
        for n in &mut self.nodes {
            n.value.grad = None;
        }
    }

    fn dims2(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((s[0], s[1])),
            1 => Ok((1, s[0])),
            _ => Err(TensorError::Shape {
                op,
                left: s.to_vec(),
                right: vec![],
            }),
        }
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(TensorError::Shape {
                op,
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        Ok(())
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims2(a, "matmul")?;
        let (k2, n) = self.dims2(b, "matmul")?;
        if k != k2 || self.shape(a).len() != 2 || self.shape(b).len() != 2 {
            return Err(TensorError::Shape {
                op: "matmul",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let data = matmul_raw(self.value(a).data(), self.value(b).data(), m, k, n);
        let t = Tensor::new(vec![m, n], data)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.dims2(a, "transpose")?;
        let data = transpose_raw(self.value(a).data(), r, c);
        let t = Tensor::new(vec![c, r], data)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// `x[n×d] + bias[d]`, broadcast over rows.
    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (n, d) = self.dims2(x, "add_row_bias")?;
        if self.value(bias).numel() != d {
            return Err(TensorError::Shape {
                op: "add_row_bias",
                left: self.shape(x).to_vec(),
                right: self.shape(bias).to_vec(),
            });
        }
        let b = self.value(bias).data().to_vec();
        let mut data = self.value(x).data().to_vec();
        for i in 0..n {
            for (o, bv) in data[i * d..(i + 1) * d].iter_mut().zip(&b) {
                *o += bv;
            }
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::AddRowBias(x, bias), &[x, bias]))
    }

    fn zip_with(&mut self, a: Var, b: Var, op: &'static str, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
        self.same_shape(a, b, op)?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        Tensor::new(self.shape(a).to_vec(), data)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "add", |x, y| x + y)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "sub", |x, y| x - y)?;
        Ok(self.push(t, Op::Sub(a, b), &[a, b]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let t = self.zip_with(a, b, "mul", |x, y| x * y)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|x| x * c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Scale(a, c), &[a])
    }

    pub fn add_scalar(&mut self, a: Var, c: f64) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|x| x + c).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::AddScalar(a), &[a])
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let src = self.value(a);
        let t = Tensor {
            shape: src.shape.clone(),
            data: src.data.iter().map(|&x| if x > 0.0 { x } else { 0.0 }).collect(),
            requires_grad: false,
            grad: None,
        };
        self.push(t, Op::Relu(a), &[a])
    }

    /// Divides each row by `max(‖row‖₂, eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Result<Var> {
        let (n, d) = self.dims2(x, "l2_normalize")?;
        let src = self.value(x).data();
        let mut norms = Vec::with_capacity(n);
        let mut data = Vec::with_capacity(n * d);
        for i in 0..n {
            let row = &src[i * d..(i + 1) * d];
            let norm = row.iter().map(|v| v * v).sum::<f64>().sqrt();
            let denom = norm.max(eps);
            data.extend(row.iter().map(|v| v / denom));
            norms.push(norm);
        }
        let t = Tensor::new(self.shape(x).to_vec(), data)?;
        Ok(self.push(t, Op::L2Normalize { x, norms, eps }, &[x]))
    }

    /// Row-wise `log Σ_{j: mask_j} exp(x_ij)` with one mask shared by every row.
    pub fn log_sum_exp(&mut self, x: Var, mask: &[bool]) -> Result<Var> {
        let (n, c) = self.dims2(x, "log_sum_exp")?;
        if mask.len() != c {
            return Err(TensorError::Shape {
                op: "log_sum_exp",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let full: Vec<bool> = (0..n).flat_map(|_| mask.iter().copied()).collect();
        self.log_sum_exp_rows(x, full)
    }

    /// Row-wise masked log-sum-exp with a separate mask per row (`mask` is `n×c`).
    ///
    /// Masked-out entries are excluded from both the max and the sum, so their
    /// values never influence the result.
    pub fn log_sum_exp_rows(&mut self, x: Var, mask: Vec<bool>) -> Result<Var> {
        let (n, c) = self.dims2(x, "log_sum_exp")?;
        if mask.len() != n * c {
            return Err(TensorError::Shape {
                op: "log_sum_exp",
                left: self.shape(x).to_vec(),
                right: vec![mask.len()],
            });
        }
        let src = self.value(x).data();
        let mut out = Vec::with_capacity(n);
        for i in 0..n {
            let row = &src[i * c..(i + 1) * c];
            let m = &mask[i * c..(i + 1) * c];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY && !m.iter().any(|&k| k) {
                return Err(TensorError::InvalidMask {
                    op: "log_sum_exp",
                    row: i,
                });
            }
            let s: f64 = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| (v - max).exp())
                .sum();
            out.push(max + s.ln());
        }
        let t = Tensor::new(vec![n], out)?;
        Ok(self.push(t, Op::LogSumExp { x, mask }, &[x]))
    }

    /// Selects `x[i, cols[i]]` for each row, giving a length-`n` vector.
    pub fn pick(&mut self, x: Var, cols: &[usize]) -> Result<Var> {
        let (n, c) = self.dims2(x, "pick")?;
        if cols.len() != n {
            return Err(TensorError::Shape {
                op: "pick",
                left: self.shape(x).to_vec(),
                right: vec![cols.len()],
            });
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(TensorError::Index {
                op: "pick",
                index: bad,
                extent: c,
            });
        }
        let src = self.value(x).data();
        let data = cols.iter().enumerate().map(|(i, &j)| src[i * c + j]).collect();
        let t = Tensor::new(vec![n], data)?;
        Ok(self.push(t, Op::Pick { x, cols: cols.to_vec() }, &[x]))
    }

    /// Stacks the listed rows of `x` (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, rows: &[usize]) -> Result<Var> {
        let (n, d) = self.dims2(x, "gather_rows")?;
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(rows.len() * d);
        for &r in rows {
            if r >= n {
                return Err(TensorError::Index {
                    op: "gather_rows",
                    index: r,
                    extent: n,
                });
            }
            data.extend_from_slice(&src[r * d..(r + 1) * d]);
        }
        let t = Tensor::new(vec![rows.len(), d], data)?;
        Ok(self.push(t, Op::GatherRows { x, rows: rows.to_vec() }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = match parts.first() {
            Some(&p) => self.dims2(p, "concat_rows")?.1,
            None => 0,
        };
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (n, dp) = self.dims2(p, "concat_rows")?;
            if dp != d {
                return Err(TensorError::Shape {
                    op: "concat_rows",
                    left: vec![rows, d],
                    right: self.shape(p).to_vec(),
                });
            }
            rows += n;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::new(vec![rows, d], data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    /// Sums each row of an `n×c` matrix into a length-`n` vector.
    pub fn sum_rows(&mut self, x: Var) -> Result<Var> {
        let (n, c) = self.dims2(x, "sum_rows")?;
        let src = self.value(x).data();
        let data = (0..n).map(|i| src[i * c..(i + 1) * c].iter().sum()).collect();
        let t = Tensor::new(vec![n], data)?;
        Ok(self.push(t, Op::SumRows(x), &[x]))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Reverse sweep from a scalar `loss`. Gradients accumulate into every
    /// reachable node that requires them; call [`Tape::zero_grad`] to reset.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss).to_vec();
        if self.value(loss).numel() != 1 {
            return Err(TensorError::NonScalar(shape));
        }
        let end = loss.0 + 1;
        let mut grads: Vec<Option<Vec<f64>>> = vec![None; end];
        grads[loss.0] = Some(vec![1.0]);

        fn acc(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
            slot.get_or_insert_with(|| vec![0.0; len])
        }

        for idx in (0..end).rev() {
            let Some(g) = grads[idx].take() else { continue };
            if !self.nodes[idx].value.requires_grad {
                continue;
            }
            let node = &self.nodes[idx];
            match &node.op {
                Op::Leaf => {}
                Op::MatMul(a, b) => {
                    let (m, k) = self.dims2(*a, "matmul")?;
                    let n = self.shape(*b)[1];
                    if self.nodes[a.0].value.requires_grad {
                        let bt = transpose_raw(self.value(*b).data(), k, n);
                        let da = matmul_raw(&g, &bt, m, n, k);
                        add_into(acc(&mut grads[a.0], m * k), &da);
                    }
                    if self.nodes[b.0].value.requires_grad {
                        let at = transpose_raw(self.value(*a).data(), m, k);
                        let db = matmul_raw(&at, &g, k, m, n);
                        add_into(acc(&mut grads[b.0], k * n), &db);
                    }
                }
                Op::Transpose(a) => {
                    let (r, c) = self.dims2(*a, "transpose")?;
                    let ga = transpose_raw(&g, c, r);
                    add_into(acc(&mut grads[a.0], r * c), &ga);
                }
                Op::AddRowBias(x, b) => {
                    let d = self.value(*b).numel();
                    if self.nodes[x.0].value.requires_grad {
                        add_into(acc(&mut grads[x.0], g.len()), &g);
                    }
                    if self.nodes[b.0].value.requires_grad {
                        let gb = acc(&mut grads[b.0], d);
                        for row in g.chunks(d) {
                            add_into(gb, row);
                        }
                    }
                }
                Op::Add(a, b) => {
                    for p in [a, b] {
                        if self.nodes[p.0].value.requires_grad {
                            add_into(acc(&mut grads[p.0], g.len()), &g);
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if self.nodes[a.0].value.requires_grad {
                        add_into(acc(&mut grads[a.0], g.len()), &g);
                    }
                    if self.nodes[b.0].value.requires_grad {
                        let gb = acc(&mut grads[b.0], g.len());
                        for (o, v) in gb.iter_mut().zip(&g) {
                            *o -= v;
                        }
                    }
                }
                Op::Mul(a, b) => {
                    let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                    if self.nodes[a.0].value.requires_grad {
                        let ga: Vec<f64> = g.iter().zip(bv).map(|(x, y)| x * y).collect();
                        add_into(acc(&mut grads[a.0], g.len()), &ga);
                    }
                    if self.nodes[b.0].value.requires_grad {
                        let gb: Vec<f64> = g.iter().zip(av).map(|(x, y)| x * y).collect();
                        add_into(acc(&mut grads[b.0], g.len()), &gb);
                    }
                }
                Op::Scale(a, c) => {
                    let ga: Vec<f64> = g.iter().map(|v| v * c).collect();
                    add_into(acc(&mut grads[a.0], g.len()), &ga);
                }
                Op::AddScalar(a) => add_into(acc(&mut grads[a.0], g.len()), &g),
                Op::Relu(a) => {
                    let ga: Vec<f64> = g
                        .iter()
                        .zip(self.value(*a).data())
                        .map(|(&gv, &x)| if x > 0.0 { gv } else { 0.0 })
                        .collect();
                    add_into(acc(&mut grads[a.0], g.len()), &ga);
                }
                Op::L2Normalize { x, norms, eps } => {
                    let d = self.value(*x).cols();
                    let y = node.value.data();
                    let mut gx = vec![0.0; g.len()];
                    for (i, &norm) in norms.iter().enumerate() {
                        let gi = &g[i * d..(i + 1) * d];
                        let yi = &y[i * d..(i + 1) * d];
                        let out = &mut gx[i * d..(i + 1) * d];
                        if norm > *eps {
                            let dot: f64 = gi.iter().zip(yi).map(|(a, b)| a * b).sum();
                            for j in 0..d {
                                out[j] = (gi[j] - dot * yi[j]) / norm;
                            }
                        } else {
                            for j in 0..d {
                                out[j] = gi[j] / eps;
                            }
                        }
                    }
                    add_into(acc(&mut grads[x.0], g.len()), &gx);
                }
                Op::LogSumExp { x, mask } => {
                    let c = self.value(*x).cols();
                    let xv = self.value(*x).data();
                    let out = node.value.data();
                    let mut gx = vec![0.0; xv.len()];
                    for (i, &gi) in g.iter().enumerate() {
                        for j in 0..c {
                            if mask[i * c + j] {
                                gx[i * c + j] = gi * (xv[i * c + j] - out[i]).exp();
                            }
                        }
                    }
                    add_into(acc(&mut grads[x.0], xv.len()), &gx);
                }
                Op::Pick { x, cols } => {
                    let c = self.value(*x).cols();
                    let len = self.value(*x).numel();
                    let gx = acc(&mut grads[x.0], len);
                    for (i, &j) in cols.iter().enumerate() {
                        gx[i * c + j] += g[i];
                    }
                }
                Op::GatherRows { x, rows } => {
                    let d = self.value(*x).cols();
                    let len = self.value(*x).numel();
                    let gx = acc(&mut grads[x.0], len);
                    for (k, &r) in rows.iter().enumerate() {
                        add_into(&mut gx[r * d..(r + 1) * d], &g[k * d..(k + 1) * d]);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut off = 0;
                    for p in parts {
                        let len = self.value(*p).numel();
                        if self.nodes[p.0].value.requires_grad {
                            add_into(acc(&mut grads[p.0], len), &g[off..off + len]);
                        }
                        off += len;
                    }
                }
                Op::SumRows(x) => {
                    let c = self.value(*x).cols();
                    let len = self.value(*x).numel();
                    let gx = acc(&mut grads[x.0], len);
                    for (i, &gi) in g.iter().enumerate() {
                        for v in &mut gx[i * c..(i + 1) * c] {
                            *v += gi;
                        }
                    }
                }
                Op::Sum(x) => {
                    let len = self.value(*x).numel();
                    let gx = acc(&mut grads[x.0], len);
                    for v in gx.iter_mut() {
                        *v += g[0];
                    }
                }
            }
            let slot = self.nodes[idx].value.grad.get_or_insert_with(|| vec![0.0; g.len()]);
            add_into(slot, &g);
        }
        Ok(())
    }
}

fn add_into(dst: &mut [f64], src: &[f64]) {
    for (d, s) in dst.iter_mut().zip(src) {
        *d += s;
    }
}

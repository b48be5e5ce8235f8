//! Define-by-run reverse-mode differentiation over small dense tensors.
//!
//! A [`Tape`] records every primitive as a node holding its forward value.
//! [`Tape::backward`] walks the nodes in reverse creation order, which is a
//! valid topological order because a node can only reference older nodes.
//! All arithmetic is `f64`; any primitive that produces a NaN or infinity
//! fails with [`AutodiffError::NonFinite`].

use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum AutodiffError {
    #[error("shape mismatch in {op}: {lhs:?} vs {rhs:?}")]
    ShapeMismatch {
        op: &'static str,
        lhs: Vec<usize>,
        rhs: Vec<usize>,
    },
    #[error("{op}: index {index} out of range for {len} rows")]
    IndexOutOfRange {
        op: &'static str,
        index: usize,
        len: usize,
    },
    #[error("non-finite value produced by {op}")]
    NonFinite { op: &'static str },
    #[error("backward requires a scalar root, got shape {0:?}")]
    NonScalarRoot(Vec<usize>),
    #[error("tensor data length {len} does not match shape {shape:?}")]
    BadData { shape: Vec<usize>, len: usize },
}

pub type Result<T> = std::result::Result<T, AutodiffError>;

/// Dense row-major tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
}

impl Tensor {
    pub fn new(shape: Vec<usize>, data: Vec<f64>) -> Result<Self> {
        let numel: usize = shape.iter().product();
        if numel != data.len() {
            return Err(AutodiffError::BadData {
                shape,
                len: data.len(),
            });
        }
        Ok(Self { shape, data })
    }

    pub fn matrix(rows: usize, cols: usize, data: Vec<f64>) -> Result<Self> {
        Self::new(vec![rows, cols], data)
    }

    pub fn row(data: Vec<f64>) -> Self {
        Self {
            shape: vec![1, data.len()],
            data,
        }
    }

    pub fn scalar(value: f64) -> Self {
        Self {
            shape: vec![],
            data: vec![value],
        }
    }

    pub fn zeros(shape: Vec<usize>) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![0.0; numel],
        }
    }

    pub fn filled(shape: Vec<usize>, value: f64) -> Self {
        let numel = shape.iter().product();
        Self {
            shape,
            data: vec![value; numel],
        }
    }

    pub fn eye(n: usize) -> Self {
        let mut t = Self::zeros(vec![n, n]);
        for i in 0..n {
            t.data[i * n + i] = 1.0;
        }
        t
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

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }

    pub fn is_scalar(&self) -> bool {
        self.data.len() == 1
    }

    /// Value of a one-element tensor.
    pub fn item(&self) -> f64 {
        debug_assert!(self.is_scalar());
        self.data[0]
    }

    /// Rows and columns of a rank-2 tensor.
    pub fn dims2(&self, op: &'static str) -> Result<(usize, usize)> {
        match self.shape.as_slice() {
            [r, c] => Ok((*r, *c)),
            _ => Err(AutodiffError::ShapeMismatch {
                op,
                lhs: self.shape.clone(),
                rhs: vec![0, 0],
            }),
        }
    }

    fn map(&self, f: impl Fn(f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self.data.iter().map(|&x| f(x)).collect(),
        }
    }

    fn zip(&self, other: &Tensor, f: impl Fn(f64, f64) -> f64) -> Tensor {
        Tensor {
            shape: self.shape.clone(),
            data: self
                .data
                .iter()
                .zip(&other.data)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    fn add_assign(&mut self, other: &Tensor) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            *a += b;
        }
    }

    fn all_finite(&self) -> bool {
        self.data.iter().all(|x| x.is_finite())
    }
}

/// `c = op(a) * op(b)` for row-major `a` (m×k after op) and `b` (k×n after op).
fn gemm(
    m: usize,
    k: usize,
    n: usize,
    a: &[f64],
    a_trans: bool,
    b: &[f64],
    b_trans: bool,
) -> Vec<f64> {
    let mut c = vec![0.0; m * n];
    if m == 0 || n == 0 || k == 0 {
        return c;
    }
    // Row-major (m×k) has strides (k, 1); its transpose view swaps them.
    let (rsa, csa) = if a_trans { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_trans { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: slice lengths match the stated dimensions and strides, and `c`
    // is a distinct, fully allocated m×n buffer.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            c.as_mut_ptr(),
            n as isize,
            1,
        );
    }
    c
}

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    MatMul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    Relu(Var),
    Exp(Var),
    Log(Var),
    Sum(Var),
    Mean(Var),
    GatherRows(Var, Vec<usize>),
    ScalarMul(Var, f64),
    AddScalar(Var),
    MaxReduce(Var, usize),
    AddRow(Var, Var),
    ConcatCols(Var, Var),
    /// Output row `i` depends only on input row `i`; `jac` holds the
    /// out_cols×in_cols Jacobian of every row, row-major, stacked.
    RowJacobian(Var, Vec<f64>),
}

#[derive(Debug, Clone)]
struct Node {
    value: Tensor,
    op: Op,
    trainable: bool,
}

/// Operation record for one forward pass.
#[derive(Debug, Default, Clone)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Adjoints produced by [`Tape::backward`].
#[derive(Debug, Clone)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
    shapes: Vec<Vec<usize>>,
    trainable: Vec<bool>,
}

impl Gradients {
    /// Gradient of the root with respect to `var`; zero if `var` did not
    /// contribute to the root.
    pub fn get(&self, var: Var) -> Tensor {
        match &self.grads[var.0] {
            Some(g) => g.clone(),
            None => Tensor::zeros(self.shapes[var.0].clone()),
        }
    }

    /// Gradients of all trainable variables, in creation order.
    pub fn trainable(&self) -> impl Iterator<Item = (Var, Tensor)> + '_ {
        (0..self.grads.len())
            .filter(|&i| self.trainable[i])
            .map(|i| (Var(i), self.get(Var(i))))
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

    pub fn value(&self, var: Var) -> &Tensor {
        &self.nodes[var.0].value
    }

    pub fn shape(&self, var: Var) -> &[usize] {
        &self.nodes[var.0].value.shape
    }

    pub fn is_trainable(&self, var: Var) -> bool {
        self.nodes[var.0].trainable
    }

    fn push(&mut self, value: Tensor, op: Op, name: &'static str) -> Result<Var> {
        if !value.all_finite() {
            return Err(AutodiffError::NonFinite { op: name });
        }
        self.nodes.push(Node {
            value,
            op,
            trainable: false,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    /// Non-trainable input.
    pub fn constant(&mut self, value: Tensor) -> Result<Var> {
        self.push(value, Op::Leaf, "constant")
    }

    /// Trainable input.
    pub fn param(&mut self, value: Tensor) -> Result<Var> {
        let v = self.push(value, Op::Leaf, "param")?;
        self.nodes[v.0].trainable = true;
        Ok(v)
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        if sa != sb {
            return Err(AutodiffError::ShapeMismatch {
                op,
                lhs: sa.to_vec(),
                rhs: sb.to_vec(),
            });
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x + y);
        self.push(v, Op::Add(a, b), "add")
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("sub", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x - y);
        self.push(v, Op::Sub(a, b), "sub")
    }

    /// Elementwise product.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let v = self.value(a).zip(self.value(b), |x, y| x * y);
        self.push(v, Op::Mul(a, b), "mul")
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.value(a).dims2("matmul")?;
        let (k2, n) = self.value(b).dims2("matmul")?;
        if k != k2 {
            return Err(AutodiffError::ShapeMismatch {
                op: "matmul",
                lhs: vec![m, k],
                rhs: vec![k2, n],
            });
        }
        let data = gemm(m, k, n, &self.value(a).data, false, &self.value(b).data, false);
        self.push(Tensor { shape: vec![m, n], data }, Op::MatMul(a, b), "matmul")
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("transpose")?;
        let src = &self.value(a).data;
        let mut data = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        self.push(Tensor { shape: vec![c, r], data }, Op::Transpose(a), "transpose")
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let numel: usize = shape.iter().product();
        if numel != self.value(a).len() {
            return Err(AutodiffError::ShapeMismatch {
                op: "reshape",
                lhs: self.shape(a).to_vec(),
                rhs: shape,
            });
        }
        let v = Tensor {
            shape,
            data: self.value(a).data.clone(),
        };
        self.push(v, Op::Reshape(a), "reshape")
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(|x| if x > 0.0 { x } else { 0.0 });
        self.push(v, Op::Relu(a), "relu")
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::exp);
        self.push(v, Op::Exp(a), "exp")
    }

    pub fn log(&mut self, a: Var) -> Result<Var> {
        let v = self.value(a).map(f64::ln);
        self.push(v, Op::Log(a), "log")
    }

    pub fn sum(&mut self, a: Var) -> Result<Var> {
        let s = self.value(a).data.iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(a), "sum")
    }

    pub fn mean(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        if t.is_empty() {
            return Err(AutodiffError::ShapeMismatch {
                op: "mean",
                lhs: t.shape.clone(),
                rhs: vec![1],
            });
        }
        let m = t.data.iter().sum::<f64>() / t.len() as f64;
        self.push(Tensor::scalar(m), Op::Mean(a), "mean")
    }

    /// Select rows of a rank-2 tensor; indices may repeat.
    pub fn gather_rows(&mut self, a: Var, indices: &[usize]) -> Result<Var> {
        let (r, c) = self.value(a).dims2("gather_rows")?;
        let src = &self.value(a).data;
        let mut data = Vec::with_capacity(indices.len() * c);
        for &i in indices {
            if i >= r {
                return Err(AutodiffError::IndexOutOfRange {
                    op: "gather_rows",
                    index: i,
                    len: r,
                });
            }
            data.extend_from_slice(&src[i * c..(i + 1) * c]);
        }
        let v = Tensor {
            shape: vec![indices.len(), c],
            data,
        };
        self.push(v, Op::GatherRows(a, indices.to_vec()), "gather_rows")
    }

    pub fn scalar_mul(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| s * x);
        self.push(v, Op::ScalarMul(a, s), "scalar_mul")
    }

    /// Add a constant offset to every entry.
    pub fn add_scalar(&mut self, a: Var, s: f64) -> Result<Var> {
        let v = self.value(a).map(|x| x + s);
        self.push(v, Op::AddScalar(a), "add_scalar")
    }

    /// Maximum entry; the gradient flows to the first maximal entry.
    pub fn max_reduce(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (arg, max) = t
            .data
            .iter()
            .copied()
            .enumerate()
            .fold((0, f64::NEG_INFINITY), |(bi, bv), (i, x)| {
                if x > bv {
                    (i, x)
                } else {
                    (bi, bv)
                }
            });
        self.push(Tensor::scalar(max), Op::MaxReduce(a, arg), "max_reduce")
    }

    /// Add a 1×C row to every row of an N×C tensor.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.value(a).dims2("add_row")?;
        let (rr, rc) = self.value(row).dims2("add_row")?;
        if rr != 1 || rc != c {
            return Err(AutodiffError::ShapeMismatch {
                op: "add_row",
                lhs: vec![r, c],
                rhs: vec![rr, rc],
            });
        }
        let b = &self.value(row).data;
        let mut data = self.value(a).data.clone();
        for chunk in data.chunks_mut(c.max(1)) {
            for (x, y) in chunk.iter_mut().zip(b) {
                *x += y;
            }
        }
        self.push(Tensor { shape: vec![r, c], data }, Op::AddRow(a, row), "add_row")
    }

    /// Horizontal concatenation of two tensors with equal row counts.
    pub fn concat_cols(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ra, ca) = self.value(a).dims2("concat_cols")?;
        let (rb, cb) = self.value(b).dims2("concat_cols")?;
        if ra != rb {
            return Err(AutodiffError::ShapeMismatch {
                op: "concat_cols",
                lhs: vec![ra, ca],
                rhs: vec![rb, cb],
            });
        }
        let (da, db) = (&self.value(a).data, &self.value(b).data);
        let mut data = Vec::with_capacity(ra * (ca + cb));
        for i in 0..ra {
            data.extend_from_slice(&da[i * ca..(i + 1) * ca]);
            data.extend_from_slice(&db[i * cb..(i + 1) * cb]);
        }
        let v = Tensor {
            shape: vec![ra, ca + cb],
            data,
        };
        self.push(v, Op::ConcatCols(a, b), "concat_cols")
    }

    /// Row-local map whose forward value and per-row Jacobians were computed
    /// by the caller. `jacobians` has `rows * out_cols * in_cols` entries.
    pub fn row_map(&mut self, a: Var, value: Tensor, jacobians: Vec<f64>) -> Result<Var> {
        let (r, cin) = self.value(a).dims2("row_map")?;
        let (rv, cout) = value.dims2("row_map")?;
        if rv != r || jacobians.len() != r * cin * cout {
            return Err(AutodiffError::ShapeMismatch {
                op: "row_map",
                lhs: vec![r, cin],
                rhs: vec![rv, cout],
            });
        }
        self.push(value, Op::RowJacobian(a, jacobians), "row_map")
    }

    /// Reverse sweep from a scalar root.
    pub fn backward(&self, root: Var) -> Result<Gradients> {
        let root_val = self.value(root);
        if !root_val.is_scalar() {
            return Err(AutodiffError::NonScalarRoot(root_val.shape.clone()));
        }
        let mut grads: Vec<Option<Tensor>> = vec![None; root.0 + 1];
        grads[root.0] = Some(Tensor::filled(root_val.shape.clone(), 1.0));

        for id in (0..=root.0).rev() {
            let Some(g) = grads[id].take() else {
                continue;
            };
            let node = &self.nodes[id];
            let send = |grads: &mut Vec<Option<Tensor>>, v: Var, t: Tensor| {
                match &mut grads[v.0] {
                    Some(acc) => acc.add_assign(&t),
                    slot @ None => *slot = Some(t),
                }
            };
            match &node.op {
                Op::Leaf => {}
                Op::Add(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.clone());
                }
                Op::Sub(a, b) => {
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *b, g.map(|x| -x));
                }
                Op::Mul(a, b) => {
                    let ga = g.zip(self.value(*b), |x, y| x * y);
                    let gb = g.zip(self.value(*a), |x, y| x * y);
                    send(&mut grads, *a, ga);
                    send(&mut grads, *b, gb);
                }
                Op::MatMul(a, b) => {
                    let (m, k) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let n = self.shape(*b)[1];
                    // dA = G·Bᵀ, dB = Aᵀ·G
                    let ga = gemm(m, n, k, &g.data, false, &self.value(*b).data, true);
                    let gb = gemm(k, m, n, &self.value(*a).data, true, &g.data, false);
                    send(&mut grads, *a, Tensor { shape: vec![m, k], data: ga });
                    send(&mut grads, *b, Tensor { shape: vec![k, n], data: gb });
                }
                Op::Transpose(a) => {
                    let (r, c) = (g.shape[0], g.shape[1]);
                    let mut data = vec![0.0; r * c];
                    for i in 0..r {
                        for j in 0..c {
                            data[j * r + i] = g.data[i * c + j];
                        }
                    }
                    send(&mut grads, *a, Tensor { shape: vec![c, r], data });
                }
                Op::Reshape(a) => {
                    let t = Tensor {
                        shape: self.shape(*a).to_vec(),
                        data: g.data.clone(),
                    };
                    send(&mut grads, *a, t);
                }
                Op::Relu(a) => {
                    let t = g.zip(self.value(*a), |x, y| if y > 0.0 { x } else { 0.0 });
                    send(&mut grads, *a, t);
                }
                Op::Exp(a) => {
                    let t = g.zip(&node.value, |x, y| x * y);
                    send(&mut grads, *a, t);
                }
                Op::Log(a) => {
                    let t = g.zip(self.value(*a), |x, y| x / y);
                    send(&mut grads, *a, t);
                }
                Op::Sum(a) => {
                    let t = Tensor::filled(self.shape(*a).to_vec(), g.item());
                    send(&mut grads, *a, t);
                }
                Op::Mean(a) => {
                    let n = self.value(*a).len() as f64;
                    let t = Tensor::filled(self.shape(*a).to_vec(), g.item() / n);
                    send(&mut grads, *a, t);
                }
                Op::GatherRows(a, idx) => {
                    let c = self.shape(*a)[1];
                    let mut t = Tensor::zeros(self.shape(*a).to_vec());
                    for (out_row, &i) in idx.iter().enumerate() {
                        for j in 0..c {
                            t.data[i * c + j] += g.data[out_row * c + j];
                        }
                    }
                    send(&mut grads, *a, t);
                }
                Op::ScalarMul(a, s) => {
                    let s = *s;
                    send(&mut grads, *a, g.map(|x| s * x));
                }
                Op::AddScalar(a) => send(&mut grads, *a, g.clone()),
                Op::MaxReduce(a, arg) => {
                    let mut t = Tensor::zeros(self.shape(*a).to_vec());
                    t.data[*arg] = g.item();
                    send(&mut grads, *a, t);
                }
                Op::AddRow(a, row) => {
                    let c = self.shape(*row)[1];
                    let mut rg = vec![0.0; c];
                    for chunk in g.data.chunks(c.max(1)) {
                        for (acc, x) in rg.iter_mut().zip(chunk) {
                            *acc += x;
                        }
                    }
                    send(&mut grads, *a, g.clone());
                    send(&mut grads, *row, Tensor { shape: vec![1, c], data: rg });
                }
                Op::ConcatCols(a, b) => {
                    let (ca, cb) = (self.shape(*a)[1], self.shape(*b)[1]);
                    let rows = g.shape[0];
                    let mut ga = Vec::with_capacity(rows * ca);
                    let mut gb = Vec::with_capacity(rows * cb);
                    for i in 0..rows {
                        let r = &g.data[i * (ca + cb)..(i + 1) * (ca + cb)];
                        ga.extend_from_slice(&r[..ca]);
                        gb.extend_from_slice(&r[ca..]);
                    }
                    send(&mut grads, *a, Tensor { shape: vec![rows, ca], data: ga });
                    send(&mut grads, *b, Tensor { shape: vec![rows, cb], data: gb });
                }
                Op::RowJacobian(a, jac) => {
                    let (rows, cin) = (self.shape(*a)[0], self.shape(*a)[1]);
                    let cout = node.value.shape[1];
                    let mut t = Tensor::zeros(vec![rows, cin]);
                    for i in 0..rows {
                        let j = &jac[i * cout * cin..(i + 1) * cout * cin];
                        for o in 0..cout {
                            let go = g.data[i * cout + o];
                            for k in 0..cin {
                                t.data[i * cin + k] += go * j[o * cin + k];
                            }
                        }
                    }
                    send(&mut grads, *a, t);
                }
            }
            grads[id] = Some(g);
        }

        grads.resize(self.nodes.len(), None);
        Ok(Gradients {
            grads,
            shapes: self.nodes.iter().map(|n| n.value.shape.clone()).collect(),
            trainable: self.nodes.iter().map(|n| n.trainable).collect(),
        })
    }
}

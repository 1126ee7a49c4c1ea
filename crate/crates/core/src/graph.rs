//! Define-by-run reverse-mode differentiation over dense tensors.
//!
//! A [`Graph`] is rebuilt for every forward pass (sampling changes the
//! topology between steps), records each executed operation in topological
//! order, and replays the record in reverse to accumulate gradients.
//! Storage is row-major with explicit shapes; the only broadcasting rule is
//! bias-style row addition ([`Graph::add_row_broadcast`]).

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor stored in a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct TensorId(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    Add { a: TensorId, b: TensorId },
    Sub { a: TensorId, b: TensorId },
    Mul { a: TensorId, b: TensorId },
    Neg { a: TensorId },
    OneMinus { a: TensorId },
    Scale { a: TensorId, c: f64 },
    Concat { parts: Vec<TensorId> },
    MatMul { a: TensorId, b: TensorId },
    MatVec { m: TensorId, v: TensorId },
    VecMat { v: TensorId, m: TensorId },
    Dot { a: TensorId, b: TensorId },
    Tanh { a: TensorId },
    Sigmoid { a: TensorId },
    Log { a: TensorId },
    Softplus { a: TensorId },
    Softmax { a: TensorId, mask: Option<Vec<bool>> },
    LogSoftmax { a: TensorId },
    Pick { a: TensorId, index: usize },
    Sum { a: TensorId },
    Mean { a: TensorId },
    StackRows { rows: Vec<TensorId> },
    AddRowBroadcast { m: TensorId, v: TensorId },
    LookupRow { table: TensorId, row: usize },
    /// Forward value is a constant (the hard sample); gradients pass through
    /// to `soft` unchanged.
    StraightThrough { soft: TensorId },
}

struct Node<S: Scalar> {
    tensor: Tensor<S>,
    op: Op,
}

/// Ordered record of executed operations plus their result tensors.
pub struct Graph<S: Scalar> {
    nodes: Vec<Node<S>>,
    // leaves that mirror persistent model parameters: (node, parameter index)
    param_leaves: Vec<(TensorId, usize)>,
}

impl<S: Scalar> Default for Graph<S> {
    fn default() -> Self {
        Self::new()
    }
}

fn stable_sigmoid<S: Scalar>(x: S) -> S {
    if x >= S::zero() {
        S::one() / (S::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (S::one() + e)
    }
}

fn stable_softplus<S: Scalar>(x: S) -> S {
    // ln(1 + e^x) without overflow on large |x|
    if x > S::zero() {
        x + (-x).exp().ln_1p()
    } else {
        x.exp().ln_1p()
    }
}

impl<S: Scalar> Graph<S> {
    pub fn new() -> Self {
        Graph { nodes: Vec::new(), param_leaves: Vec::new() }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn values(&self, id: TensorId) -> &[S] {
        &self.nodes[id.0].tensor.values
    }

    pub fn shape(&self, id: TensorId) -> &[usize] {
        &self.nodes[id.0].tensor.shape
    }

    pub fn grad(&self, id: TensorId) -> Option<&[S]> {
        self.nodes[id.0].tensor.grad.as_deref()
    }

    pub fn requires_grad(&self, id: TensorId) -> bool {
        self.nodes[id.0].tensor.requires_grad
    }

    /// Value of a single-element tensor.
    pub fn scalar_value(&self, id: TensorId) -> S {
        debug_assert_eq!(self.nodes[id.0].tensor.numel(), 1);
        self.nodes[id.0].tensor.values[0]
    }

    fn push(&mut self, tensor: Tensor<S>, op: Op) -> TensorId {
        debug_assert!(
            tensor.values.iter().all(|v| v.is_finite()),
            "non-finite forward value"
        );
        let id = TensorId(self.nodes.len());
        self.nodes.push(Node { tensor, op });
        id
    }

    fn any_requires(&self, ids: &[TensorId]) -> bool {
        ids.iter().any(|id| self.nodes[id.0].tensor.requires_grad)
    }

    // ---- leaves ----------------------------------------------------------

    pub fn leaf(&mut self, shape: Vec<usize>, values: Vec<S>, requires_grad: bool) -> Result<TensorId> {
        let t = Tensor::new(shape, values, requires_grad)?;
        Ok(self.push(t, Op::Leaf))
    }

    /// Constant vector that never receives gradients.
    pub fn constant(&mut self, values: Vec<S>) -> TensorId {
        let n = values.len();
        let t = Tensor { shape: vec![n], values, requires_grad: false, grad: None };
        self.push(t, Op::Leaf)
    }

    pub fn scalar_const(&mut self, value: S) -> TensorId {
        self.push(Tensor::scalar(value), Op::Leaf)
    }

    pub fn zeros(&mut self, shape: Vec<usize>) -> TensorId {
        self.push(Tensor::zeros(shape), Op::Leaf)
    }

    /// Leaf mirroring a persistent model parameter; after [`Graph::backward`]
    /// the gradient can be copied back with
    /// [`crate::model::ModelParams::accumulate_grads`].
    pub fn leaf_param(
        &mut self,
        param_index: usize,
        shape: Vec<usize>,
        values: Vec<S>,
        trainable: bool,
    ) -> Result<TensorId> {
        let id = self.leaf(shape, values, trainable)?;
        self.param_leaves.push((id, param_index));
        Ok(id)
    }

    pub fn param_leaves(&self) -> &[(TensorId, usize)] {
        &self.param_leaves
    }

    // ---- shape guards ----------------------------------------------------

    fn same_shape(&self, op: &'static str, a: TensorId, b: TensorId) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            });
        }
        Ok(())
    }

    fn expect_vector(&self, op: &'static str, a: TensorId) -> Result<usize> {
        let shape = self.shape(a);
        if shape.len() != 1 {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("expected vector, got {:?}", shape),
            });
        }
        Ok(shape[0])
    }

    fn expect_matrix(&self, op: &'static str, a: TensorId) -> Result<(usize, usize)> {
        let shape = self.shape(a);
        if shape.len() != 2 {
            return Err(Error::ShapeMismatch {
                op,
                details: format!("expected matrix, got {:?}", shape),
            });
        }
        Ok((shape[0], shape[1]))
    }

    // ---- elementwise -----------------------------------------------------

    pub fn add(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("add", a, b)?;
        let values: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x + y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Add { a, b }))
    }

    pub fn sub(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("sub", a, b)?;
        let values: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x - y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Sub { a, b }))
    }

    pub fn mul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        self.same_shape("mul", a, b)?;
        let values: Vec<S> = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .map(|(&x, &y)| x * y)
            .collect();
        let rg = self.any_requires(&[a, b]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Mul { a, b }))
    }

    pub fn neg(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<S> = self.values(a).iter().map(|&x| -x).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Neg { a }))
    }

    /// `1 - x` elementwise (GRU convex-combination gate).
    pub fn one_minus(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<S> = self.values(a).iter().map(|&x| S::one() - x).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::OneMinus { a }))
    }

    /// Multiply by a compile-time constant (not differentiated through `c`).
    pub fn scale(&mut self, a: TensorId, c: f64) -> Result<TensorId> {
        let cs = S::from_f64(c);
        let values: Vec<S> = self.values(a).iter().map(|&x| x * cs).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Scale { a, c }))
    }

    // ---- nonlinearities ---------------------------------------------------

    pub fn tanh(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<S> = self.values(a).iter().map(|&x| x.tanh()).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Tanh { a }))
    }

    pub fn sigmoid(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<S> = self.values(a).iter().map(|&x| stable_sigmoid(x)).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Sigmoid { a }))
    }

    pub fn log(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<S> = self.values(a).iter().map(|&x| x.ln()).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Log { a }))
    }

    /// `ln(1 + e^x)`, overflow-safe; `-softplus(-x)` is `log sigmoid(x)`.
    pub fn softplus(&mut self, a: TensorId) -> Result<TensorId> {
        let values: Vec<S> = self.values(a).iter().map(|&x| stable_softplus(x)).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: self.shape(a).to_vec(), values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Softplus { a }))
    }

    // ---- softmax family ----------------------------------------------------

    /// Numerically stable softmax over a vector, with an optional validity
    /// mask: positions where `mask` is `false` get probability zero and are
    /// excluded from normalization.
    pub fn softmax(&mut self, a: TensorId, mask: Option<&[bool]>) -> Result<TensorId> {
        let n = self.expect_vector("softmax", a)?;
        if let Some(m) = mask {
            if m.len() != n {
                return Err(Error::ShapeMismatch {
                    op: "softmax",
                    details: format!("mask length {} vs input length {}", m.len(), n),
                });
            }
            if !m.iter().any(|&keep| keep) {
                return Err(Error::AllPositionsMasked);
            }
        }
        let x = self.values(a);
        let keep = |i: usize| mask.map_or(true, |m| m[i]);
        let mut max = S::neg_infinity();
        for (i, &v) in x.iter().enumerate() {
            if keep(i) && v > max {
                max = v;
            }
        }
        let mut values = vec![S::zero(); n];
        let mut total = S::zero();
        for (i, &v) in x.iter().enumerate() {
            if keep(i) {
                let e = (v - max).exp();
                values[i] = e;
                total = total + e;
            }
        }
        for v in values.iter_mut() {
            *v = *v / total;
        }
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: vec![n], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Softmax { a, mask: mask.map(<[bool]>::to_vec) }))
    }

    /// Stable `log(softmax(x))` over a vector.
    pub fn log_softmax(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.expect_vector("log_softmax", a)?;
        let x = self.values(a);
        let max = x.iter().cloned().fold(S::neg_infinity(), S::max);
        let lse = x
            .iter()
            .map(|&v| (v - max).exp())
            .fold(S::zero(), |acc, e| acc + e)
            .ln()
            + max;
        let values: Vec<S> = x.iter().map(|&v| v - lse).collect();
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: vec![n], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::LogSoftmax { a }))
    }

    // ---- linear algebra ----------------------------------------------------

    pub fn matmul(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let (m, ka) = self.expect_matrix("matmul", a)?;
        let (kb, n) = self.expect_matrix("matmul", b)?;
        if ka != kb {
            return Err(Error::ShapeMismatch {
                op: "matmul",
                details: format!("[{m}, {ka}] x [{kb}, {n}]"),
            });
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut values = vec![S::zero(); m * n];
        for i in 0..m {
            for p in 0..ka {
                let aip = av[i * ka + p];
                let brow = &bv[p * n..(p + 1) * n];
                let orow = &mut values[i * n..(i + 1) * n];
                for (o, &bval) in orow.iter_mut().zip(brow) {
                    *o = *o + aip * bval;
                }
            }
        }
        let rg = self.any_requires(&[a, b]);
        let t = Tensor { shape: vec![m, n], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::MatMul { a, b }))
    }

    pub fn matvec(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.expect_matrix("matvec", m)?;
        let n = self.expect_vector("matvec", v)?;
        if cols != n {
            return Err(Error::ShapeMismatch {
                op: "matvec",
                details: format!("[{rows}, {cols}] x [{n}]"),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let values: Vec<S> = (0..rows)
            .map(|i| {
                mv[i * cols..(i + 1) * cols]
                    .iter()
                    .zip(vv)
                    .fold(S::zero(), |acc, (&a, &b)| acc + a * b)
            })
            .collect();
        let rg = self.any_requires(&[m, v]);
        let t = Tensor { shape: vec![rows], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::MatVec { m, v }))
    }

    /// Row vector times matrix: `v[k] . M[k, n] -> [n]`.
    pub fn vecmat(&mut self, v: TensorId, m: TensorId) -> Result<TensorId> {
        let k = self.expect_vector("vecmat", v)?;
        let (rows, cols) = self.expect_matrix("vecmat", m)?;
        if k != rows {
            return Err(Error::ShapeMismatch {
                op: "vecmat",
                details: format!("[{k}] x [{rows}, {cols}]"),
            });
        }
        let vv = self.values(v);
        let mv = self.values(m);
        let mut values = vec![S::zero(); cols];
        for (i, &w) in vv.iter().enumerate() {
            let row = &mv[i * cols..(i + 1) * cols];
            for (o, &x) in values.iter_mut().zip(row) {
                *o = *o + w * x;
            }
        }
        let rg = self.any_requires(&[v, m]);
        let t = Tensor { shape: vec![cols], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::VecMat { v, m }))
    }

    pub fn dot(&mut self, a: TensorId, b: TensorId) -> Result<TensorId> {
        let na = self.expect_vector("dot", a)?;
        let nb = self.expect_vector("dot", b)?;
        if na != nb {
            return Err(Error::ShapeMismatch { op: "dot", details: format!("[{na}] . [{nb}]") });
        }
        let value = self
            .values(a)
            .iter()
            .zip(self.values(b))
            .fold(S::zero(), |acc, (&x, &y)| acc + x * y);
        let rg = self.any_requires(&[a, b]);
        let t = Tensor { shape: vec![1], values: vec![value], requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Dot { a, b }))
    }

    // ---- structure ---------------------------------------------------------

    /// Concatenate vectors into one vector.
    pub fn concat(&mut self, parts: &[TensorId]) -> Result<TensorId> {
        if parts.is_empty() {
            return Err(Error::ShapeMismatch { op: "concat", details: "no inputs".into() });
        }
        let mut values = Vec::new();
        for &p in parts {
            self.expect_vector("concat", p)?;
            values.extend_from_slice(self.values(p));
        }
        let rg = self.any_requires(parts);
        let n = values.len();
        let t = Tensor { shape: vec![n], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Concat { parts: parts.to_vec() }))
    }

    /// Stack equal-length vectors as the rows of a matrix.
    pub fn stack_rows(&mut self, rows: &[TensorId]) -> Result<TensorId> {
        if rows.is_empty() {
            return Err(Error::ShapeMismatch { op: "stack_rows", details: "no inputs".into() });
        }
        let width = self.expect_vector("stack_rows", rows[0])?;
        let mut values = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            let w = self.expect_vector("stack_rows", r)?;
            if w != width {
                return Err(Error::ShapeMismatch {
                    op: "stack_rows",
                    details: format!("row widths {width} vs {w}"),
                });
            }
            values.extend_from_slice(self.values(r));
        }
        let rg = self.any_requires(rows);
        let t = Tensor { shape: vec![rows.len(), width], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::StackRows { rows: rows.to_vec() }))
    }

    /// Add a vector to every row of a matrix (bias broadcasting).
    pub fn add_row_broadcast(&mut self, m: TensorId, v: TensorId) -> Result<TensorId> {
        let (rows, cols) = self.expect_matrix("add_row_broadcast", m)?;
        let n = self.expect_vector("add_row_broadcast", v)?;
        if cols != n {
            return Err(Error::ShapeMismatch {
                op: "add_row_broadcast",
                details: format!("[{rows}, {cols}] + [{n}]"),
            });
        }
        let mv = self.values(m);
        let vv = self.values(v);
        let values: Vec<S> = mv
            .chunks_exact(cols)
            .flat_map(|row| row.iter().zip(vv).map(|(&a, &b)| a + b))
            .collect();
        let rg = self.any_requires(&[m, v]);
        let t = Tensor { shape: vec![rows, cols], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::AddRowBroadcast { m, v }))
    }

    /// Embedding lookup: one row of a matrix.
    pub fn lookup_row(&mut self, table: TensorId, row: usize) -> Result<TensorId> {
        let (rows, cols) = self.expect_matrix("lookup_row", table)?;
        if row >= rows {
            return Err(Error::ShapeMismatch {
                op: "lookup_row",
                details: format!("row {row} out of {rows}"),
            });
        }
        let values = self.values(table)[row * cols..(row + 1) * cols].to_vec();
        let rg = self.any_requires(&[table]);
        let t = Tensor { shape: vec![cols], values, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::LookupRow { table, row }))
    }

    /// One element of a vector, as a scalar tensor.
    pub fn pick(&mut self, a: TensorId, index: usize) -> Result<TensorId> {
        let n = self.expect_vector("pick", a)?;
        if index >= n {
            return Err(Error::ShapeMismatch {
                op: "pick",
                details: format!("index {index} out of {n}"),
            });
        }
        let value = self.values(a)[index];
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: vec![1], values: vec![value], requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Pick { a, index }))
    }

    // ---- reductions --------------------------------------------------------

    pub fn sum(&mut self, a: TensorId) -> Result<TensorId> {
        let value = self.values(a).iter().fold(S::zero(), |acc, &x| acc + x);
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: vec![1], values: vec![value], requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Sum { a }))
    }

    pub fn mean(&mut self, a: TensorId) -> Result<TensorId> {
        let n = self.values(a).len();
        if n == 0 {
            return Err(Error::ShapeMismatch { op: "mean", details: "empty input".into() });
        }
        let value = self.values(a).iter().fold(S::zero(), |acc, &x| acc + x)
            / S::from_f64(n as f64);
        let rg = self.any_requires(&[a]);
        let t = Tensor { shape: vec![1], values: vec![value], requires_grad: rg, grad: None };
        Ok(self.push(t, Op::Mean { a }))
    }

    // ---- discrete sampling bridge -------------------------------------------

    /// Straight-through estimator: forward value is `hard` (typically a
    /// one-hot sample), backward routes the incoming gradient to `soft`
    /// as if the forward value had been `soft`.
    pub fn straight_through(&mut self, soft: TensorId, hard: Vec<S>) -> Result<TensorId> {
        let n = self.expect_vector("straight_through", soft)?;
        if hard.len() != n {
            return Err(Error::ShapeMismatch {
                op: "straight_through",
                details: format!("hard length {} vs soft length {}", hard.len(), n),
            });
        }
        let rg = self.any_requires(&[soft]);
        let t = Tensor { shape: vec![n], values: hard, requires_grad: rg, grad: None };
        Ok(self.push(t, Op::StraightThrough { soft }))
    }

    // ---- backward ------------------------------------------------------------

    /// Reverse-mode sweep from a scalar loss. Gradients of every
    /// `requires_grad` tensor accumulate additively across uses; repeated
    /// calls on the same graph keep accumulating.
    pub fn backward(&mut self, loss: TensorId) -> Result<()> {
        if self.nodes[loss.0].tensor.numel() != 1 {
            return Err(Error::LossNotScalar { shape: self.shape(loss).to_vec() });
        }
        for node in self.nodes.iter_mut() {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![S::zero(); node.tensor.numel()]);
            }
        }
        if !self.nodes[loss.0].tensor.requires_grad {
            return Ok(()); // nothing reachable needs gradients
        }
        if let Some(g) = self.nodes[loss.0].tensor.grad.as_mut() {
            g[0] = g[0] + S::one();
        }

        for i in (0..=loss.0).rev() {
            if !self.nodes[i].tensor.requires_grad {
                continue;
            }
            let grad = match self.nodes[i].tensor.grad.as_ref() {
                Some(g) => g.clone(),
                None => continue,
            };
            let op = self.nodes[i].op.clone();
            match op {
                Op::Leaf => {}
                Op::Add { a, b } => {
                    self.accumulate(a, |_, g| g, &grad);
                    self.accumulate(b, |_, g| g, &grad);
                }
                Op::Sub { a, b } => {
                    self.accumulate(a, |_, g| g, &grad);
                    self.accumulate(b, |_, g| -g, &grad);
                }
                Op::Mul { a, b } => {
                    let av = self.nodes[a.0].tensor.values.clone();
                    let bv = self.nodes[b.0].tensor.values.clone();
                    self.accumulate_with(a, &grad, &bv, |g, other| g * other);
                    self.accumulate_with(b, &grad, &av, |g, other| g * other);
                }
                Op::Neg { a } => self.accumulate(a, |_, g| -g, &grad),
                Op::OneMinus { a } => self.accumulate(a, |_, g| -g, &grad),
                Op::Scale { a, c } => {
                    let cs = S::from_f64(c);
                    self.accumulate(a, move |_, g| g * cs, &grad);
                }
                Op::Concat { parts } => {
                    let mut offset = 0;
                    for p in parts {
                        let n = self.nodes[p.0].tensor.numel();
                        let slice = grad[offset..offset + n].to_vec();
                        self.accumulate_slice(p, &slice);
                        offset += n;
                    }
                }
                Op::MatMul { a, b } => {
                    let (m, k) = (self.shape(a)[0], self.shape(a)[1]);
                    let n = self.shape(b)[1];
                    let av = self.nodes[a.0].tensor.values.clone();
                    let bv = self.nodes[b.0].tensor.values.clone();
                    if self.nodes[a.0].tensor.requires_grad {
                        // dA = G . B^T
                        let mut da = vec![S::zero(); m * k];
                        for i in 0..m {
                            for p in 0..k {
                                let mut acc = S::zero();
                                for j in 0..n {
                                    acc = acc + grad[i * n + j] * bv[p * n + j];
                                }
                                da[i * k + p] = acc;
                            }
                        }
                        self.accumulate_slice(a, &da);
                    }
                    if self.nodes[b.0].tensor.requires_grad {
                        // dB = A^T . G
                        let mut db = vec![S::zero(); k * n];
                        for p in 0..k {
                            for j in 0..n {
                                let mut acc = S::zero();
                                for i in 0..m {
                                    acc = acc + av[i * k + p] * grad[i * n + j];
                                }
                                db[p * n + j] = acc;
                            }
                        }
                        self.accumulate_slice(b, &db);
                    }
                }
                Op::MatVec { m, v } => {
                    let (rows, cols) = (self.shape(m)[0], self.shape(m)[1]);
                    let mv = self.nodes[m.0].tensor.values.clone();
                    let vv = self.nodes[v.0].tensor.values.clone();
                    if self.nodes[m.0].tensor.requires_grad {
                        let mut dm = vec![S::zero(); rows * cols];
                        for i in 0..rows {
                            for j in 0..cols {
                                dm[i * cols + j] = grad[i] * vv[j];
                            }
                        }
                        self.accumulate_slice(m, &dm);
                    }
                    if self.nodes[v.0].tensor.requires_grad {
                        let mut dv = vec![S::zero(); cols];
                        for i in 0..rows {
                            let gi = grad[i];
                            let row = &mv[i * cols..(i + 1) * cols];
                            for (d, &w) in dv.iter_mut().zip(row) {
                                *d = *d + gi * w;
                            }
                        }
                        self.accumulate_slice(v, &dv);
                    }
                }
                Op::VecMat { v, m } => {
                    let (rows, cols) = (self.shape(m)[0], self.shape(m)[1]);
                    let mv = self.nodes[m.0].tensor.values.clone();
                    let vv = self.nodes[v.0].tensor.values.clone();
                    if self.nodes[v.0].tensor.requires_grad {
                        let mut dv = vec![S::zero(); rows];
                        for (i, d) in dv.iter_mut().enumerate() {
                            let row = &mv[i * cols..(i + 1) * cols];
                            *d = row.iter().zip(&grad).fold(S::zero(), |acc, (&w, &g)| acc + w * g);
                        }
                        self.accumulate_slice(v, &dv);
                    }
                    if self.nodes[m.0].tensor.requires_grad {
                        let mut dm = vec![S::zero(); rows * cols];
                        for i in 0..rows {
                            let wi = vv[i];
                            for j in 0..cols {
                                dm[i * cols + j] = wi * grad[j];
                            }
                        }
                        self.accumulate_slice(m, &dm);
                    }
                }
                Op::Dot { a, b } => {
                    let g0 = grad[0];
                    let av = self.nodes[a.0].tensor.values.clone();
                    let bv = self.nodes[b.0].tensor.values.clone();
                    self.accumulate_with(a, &vec![g0; bv.len()], &bv, |g, other| g * other);
                    self.accumulate_with(b, &vec![g0; av.len()], &av, |g, other| g * other);
                }
                Op::Tanh { a } => {
                    let out = self.nodes[i].tensor.values.clone();
                    self.accumulate_with(a, &grad, &out, |g, y| g * (S::one() - y * y));
                }
                Op::Sigmoid { a } => {
                    let out = self.nodes[i].tensor.values.clone();
                    self.accumulate_with(a, &grad, &out, |g, y| g * y * (S::one() - y));
                }
                Op::Log { a } => {
                    let x = self.nodes[a.0].tensor.values.clone();
                    self.accumulate_with(a, &grad, &x, |g, x| g / x);
                }
                Op::Softplus { a } => {
                    let x = self.nodes[a.0].tensor.values.clone();
                    self.accumulate_with(a, &grad, &x, |g, x| g * stable_sigmoid(x));
                }
                Op::Softmax { a, mask } => {
                    let y = self.nodes[i].tensor.values.clone();
                    let keep = |idx: usize| mask.as_ref().map_or(true, |m| m[idx]);
                    let inner = y
                        .iter()
                        .zip(&grad)
                        .enumerate()
                        .filter(|(idx, _)| keep(*idx))
                        .fold(S::zero(), |acc, (_, (&yi, &gi))| acc + yi * gi);
                    let da: Vec<S> = y
                        .iter()
                        .zip(&grad)
                        .enumerate()
                        .map(|(idx, (&yi, &gi))| {
                            if keep(idx) {
                                yi * (gi - inner)
                            } else {
                                S::zero()
                            }
                        })
                        .collect();
                    self.accumulate_slice(a, &da);
                }
                Op::LogSoftmax { a } => {
                    let y = self.nodes[i].tensor.values.clone();
                    let gsum = grad.iter().fold(S::zero(), |acc, &g| acc + g);
                    let da: Vec<S> = y
                        .iter()
                        .zip(&grad)
                        .map(|(&yi, &gi)| gi - yi.exp() * gsum)
                        .collect();
                    self.accumulate_slice(a, &da);
                }
                Op::Pick { a, index } => {
                    let n = self.nodes[a.0].tensor.numel();
                    let mut da = vec![S::zero(); n];
                    da[index] = grad[0];
                    self.accumulate_slice(a, &da);
                }
                Op::Sum { a } => {
                    let n = self.nodes[a.0].tensor.numel();
                    self.accumulate_slice(a, &vec![grad[0]; n]);
                }
                Op::Mean { a } => {
                    let n = self.nodes[a.0].tensor.numel();
                    let g = grad[0] / S::from_f64(n as f64);
                    self.accumulate_slice(a, &vec![g; n]);
                }
                Op::StackRows { rows } => {
                    let width = self.shape(TensorId(i)).to_vec()[1];
                    for (r, row) in rows.iter().enumerate() {
                        let slice = grad[r * width..(r + 1) * width].to_vec();
                        self.accumulate_slice(*row, &slice);
                    }
                }
                Op::AddRowBroadcast { m, v } => {
                    let cols = self.shape(v)[0];
                    self.accumulate_slice(m, &grad);
                    if self.nodes[v.0].tensor.requires_grad {
                        let mut dv = vec![S::zero(); cols];
                        for row in grad.chunks_exact(cols) {
                            for (d, &g) in dv.iter_mut().zip(row) {
                                *d = *d + g;
                            }
                        }
                        self.accumulate_slice(v, &dv);
                    }
                }
                Op::LookupRow { table, row } => {
                    if self.nodes[table.0].tensor.requires_grad {
                        let cols = self.shape(table)[1];
                        if let Some(tg) = self.nodes[table.0].tensor.grad.as_mut() {
                            for (d, &g) in tg[row * cols..(row + 1) * cols].iter_mut().zip(&grad) {
                                *d = *d + g;
                            }
                        }
                    }
                }
                Op::StraightThrough { soft } => {
                    self.accumulate_slice(soft, &grad);
                }
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, target: TensorId, f: impl Fn(usize, S) -> S, grad: &[S]) {
        if !self.nodes[target.0].tensor.requires_grad {
            return;
        }
        if let Some(tg) = self.nodes[target.0].tensor.grad.as_mut() {
            for (idx, (d, &g)) in tg.iter_mut().zip(grad).enumerate() {
                *d = *d + f(idx, g);
            }
        }
    }

    fn accumulate_with(&mut self, target: TensorId, grad: &[S], other: &[S], f: impl Fn(S, S) -> S) {
        if !self.nodes[target.0].tensor.requires_grad {
            return;
        }
        if let Some(tg) = self.nodes[target.0].tensor.grad.as_mut() {
            for ((d, &g), &o) in tg.iter_mut().zip(grad).zip(other) {
                *d = *d + f(g, o);
            }
        }
    }

    fn accumulate_slice(&mut self, target: TensorId, grad: &[S]) {
        if !self.nodes[target.0].tensor.requires_grad {
            return;
        }
        if let Some(tg) = self.nodes[target.0].tensor.grad.as_mut() {
            for (d, &g) in tg.iter_mut().zip(grad) {
                *d = *d + g;
            }
        }
    }
}

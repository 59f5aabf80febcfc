use super::kernels::{self, add_assign, matmul_acc, matmul_nt_acc, matmul_tn_acc};
use super::{Result, Tensor, TensorError};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulNt(Var, Var),
    Transpose(Var),
    MatVec(Var, Var),
    Dot(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRowBroadcast(Var, Var),
    Scale(Var, f64),
    Tanh(Var),
    Sigmoid(Var),
    Relu(Var),
    Sum(Var),
    MeanRows(Var),
    Broadcast(Var),
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        normalized: Vec<f64>,
        inv_std: Vec<f64>,
    },
    SliceRows(Var, usize),
    SliceCols(Var, usize),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Gather(Var, Vec<usize>),
    GaussianBias {
        center: Var,
        window: Var,
        sigma: Vec<f64>,
        /// Whether sigma followed `window / 2` (false when clamped or overridden).
        window_active: Vec<bool>,
    },
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
}

struct Node {
    value: Tensor,
    op: Op,
    needs_grad: bool,
}

/// Define-by-run record of executed operations.
///
/// Nodes are appended in execution order, so inputs always precede outputs and
/// the backward pass is a single reverse sweep.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

fn mismatch(op: &'static str, a: &Tensor, b: &Tensor) -> TensorError {
    TensorError::ShapeMismatch {
        op,
        left: a.shape().to_vec(),
        right: b.shape().to_vec(),
    }
}

fn rank(op: &'static str, expected: &'static str, t: &Tensor) -> TensorError {
    TensorError::Rank {
        op,
        expected,
        shape: t.shape().to_vec(),
    }
}

fn matrix_dims(op: &'static str, t: &Tensor) -> Result<(usize, usize)> {
    t.dims2().ok_or_else(|| rank(op, "a matrix", t))
}

fn vector_len(op: &'static str, t: &Tensor) -> Result<usize> {
    match t.shape() {
        [n] => Ok(*n),
        _ => Err(rank(op, "a vector", t)),
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

    /// Records a leaf; it receives a gradient iff `tensor.requires_grad()`.
    pub fn leaf(&mut self, tensor: Tensor) -> Var {
        let needs_grad = tensor.requires_grad();
        self.push_node(tensor, Op::Leaf, needs_grad)
    }

    /// Records a leaf that receives a gradient.
    pub fn param(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a leaf that never receives a gradient.
    pub fn constant(&mut self, tensor: Tensor) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn data(&self, v: Var) -> &[f64] {
        self.nodes[v.0].value.data()
    }

    /// Accumulated gradient of a leaf; `None` if it was never reached by a backward pass.
    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].value.grad()
    }

    pub fn zero_grad(&mut self) {
        for node in &mut self.nodes {
            node.value.zero_grad();
        }
    }

    fn push_node(&mut self, value: Tensor, op: Op, needs_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            needs_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<f64>, op: Op, inputs: &[Var]) -> Var {
        let needs_grad = inputs.iter().any(|v| self.nodes[v.0].needs_grad);
        self.push_node(Tensor::from_parts(shape, data), op, needs_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul", ta)?;
        let (k2, n) = matrix_dims("matmul", tb)?;
        if k != k2 {
            return Err(mismatch("matmul", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMul(a, b), &[a, b]))
    }

    /// `a * b^T` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        let (m, k) = matrix_dims("matmul_nt", ta)?;
        let (n, k2) = matrix_dims("matmul_nt", tb)?;
        if k != k2 {
            return Err(mismatch("matmul_nt", ta, tb));
        }
        let mut out = vec![0.0; m * n];
        matmul_nt_acc(ta.data(), tb.data(), &mut out, m, k, n);
        Ok(self.push(vec![m, n], out, Op::MatMulNt(a, b), &[a, b]))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = matrix_dims("transpose", t)?;
        let src = t.data();
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            for j in 0..n {
                out[j * m + i] = src[i * n + j];
            }
        }
        Ok(self.push(vec![n, m], out, Op::Transpose(a), &[a]))
    }

    /// Matrix `[r x c]` times vector `[c]`, giving `[r]`.
    pub fn matvec(&mut self, m: Var, v: Var) -> Result<Var> {
        let (tm, tv) = (self.value(m), self.value(v));
        let (r, c) = matrix_dims("matvec", tm)?;
        let n = vector_len("matvec", tv)?;
        if c != n {
            return Err(mismatch("matvec", tm, tv));
        }
        let out = (0..r)
            .map(|i| kernels::dot(&tm.data()[i * c..(i + 1) * c], tv.data()))
            .collect();
        Ok(self.push(vec![r], out, Op::MatVec(m, v), &[m, v]))
    }

    /// Inner product of two equal-length vectors, giving a `[1]` scalar.
    pub fn dot(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() || ta.shape().len() != 1 {
            return Err(mismatch("dot", ta, tb));
        }
        let out = kernels::dot(ta.data(), tb.data());
        Ok(self.push(vec![1], vec![out], Op::Dot(a, b), &[a, b]))
    }

    fn binary(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: impl Fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(mismatch(name, ta, tb));
        }
        let out = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        let shape = ta.shape().to_vec();
        Ok(self.push(shape, out, op, &[a, b]))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("sub", a, b, |x, y| x - y, Op::Sub(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.binary("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds vector `[n]` to every row of matrix `[m x n]`.
    pub fn add_row_broadcast(&mut self, x: Var, row: Var) -> Result<Var> {
        let (tx, tr) = (self.value(x), self.value(row));
        let (m, n) = matrix_dims("add_row_broadcast", tx)?;
        if vector_len("add_row_broadcast", tr)? != n {
            return Err(mismatch("add_row_broadcast", tx, tr));
        }
        let mut out = tx.data().to_vec();
        for i in 0..m {
            add_assign(&mut out[i * n..(i + 1) * n], tr.data());
        }
        Ok(self.push(vec![m, n], out, Op::AddRowBroadcast(x, row), &[x, row]))
    }

    fn unary(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Var {
        let t = self.value(a);
        let out = t.data().iter().map(|&x| f(x)).collect();
        let shape = t.shape().to_vec();
        self.push(shape, out, op, &[a])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        self.unary(a, |x| c * x, Op::Scale(a, c))
    }

    pub fn tanh(&mut self, a: Var) -> Var {
        self.unary(a, f64::tanh, Op::Tanh(a))
    }

    pub fn sigmoid(&mut self, a: Var) -> Var {
        self.unary(a, kernels::sigmoid, Op::Sigmoid(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.unary(a, |x| if x > 0.0 { x } else { 0.0 }, Op::Relu(a))
    }

    /// Sum of all entries, as a `[1]` scalar.
    pub fn sum(&mut self, a: Var) -> Var {
        let s = self.value(a).data().iter().sum();
        self.push(vec![1], vec![s], Op::Sum(a), &[a])
    }

    /// Mean over the first axis of `[I x d]`, giving `[d]`.
    pub fn mean_rows(&mut self, a: Var) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = matrix_dims("mean_rows", t)?;
        let mut out = vec![0.0; n];
        for i in 0..m {
            add_assign(&mut out, t.row(i));
        }
        let inv = 1.0 / m as f64;
        out.iter_mut().for_each(|x| *x *= inv);
        Ok(self.push(vec![n], out, Op::MeanRows(a), &[a]))
    }

    /// Repeats a `[1]` scalar into a `[n]` vector.
    pub fn broadcast(&mut self, a: Var, n: usize) -> Result<Var> {
        let t = self.value(a);
        if t.numel() != 1 {
            return Err(rank("broadcast", "a scalar", t));
        }
        let v = t.data()[0];
        Ok(self.push(vec![n], vec![v; n], Op::Broadcast(a), &[a]))
    }

    /// Softmax over each row of `[m x n]`. `mask[i*n + j] == false` excludes entry `(i, j)`.
    pub fn rowwise_softmax(&mut self, x: Var, mask: Option<&[bool]>) -> Result<Var> {
        let t = self.value(x);
        let (m, n) = matrix_dims("rowwise_softmax", t)?;
        if let Some(mask) = mask {
            if mask.len() != m * n {
                return Err(TensorError::Contract(format!(
                    "rowwise_softmax: mask has {} entries, input has {}",
                    mask.len(),
                    m * n
                )));
            }
        }
        let mut out = vec![0.0; m * n];
        for i in 0..m {
            let row_mask = mask.map(|mk| &mk[i * n..(i + 1) * n]);
            if !kernels::softmax_row(t.row(i), row_mask, &mut out[i * n..(i + 1) * n]) {
                return Err(TensorError::InvalidMask { row: i });
            }
        }
        Ok(self.push(vec![m, n], out, Op::Softmax(x), &[x]))
    }

    /// Per-row normalization to zero mean and unit variance, then `gain * x + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(TensorError::Contract("layer_norm: eps must be positive".into()));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gain), self.value(bias));
        let (m, d) = matrix_dims("layer_norm", tx)?;
        if vector_len("layer_norm", tg)? != d {
            return Err(mismatch("layer_norm", tx, tg));
        }
        if vector_len("layer_norm", tb)? != d {
            return Err(mismatch("layer_norm", tx, tb));
        }
        let mut normalized = vec![0.0; m * d];
        let mut inv_std = vec![0.0; m];
        let mut out = vec![0.0; m * d];
        for i in 0..m {
            let row = tx.row(i);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + eps).sqrt();
            inv_std[i] = s;
            for j in 0..d {
                let xh = (row[j] - mean) * s;
                normalized[i * d + j] = xh;
                out[i * d + j] = tg.data()[j] * xh + tb.data()[j];
            }
        }
        let op = Op::LayerNorm {
            x,
            gain,
            bias,
            normalized,
            inv_std,
        };
        Ok(self.push(vec![m, d], out, op, &[x, gain, bias]))
    }

    /// Rows `start..start + len` of a matrix.
    pub fn slice_rows(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = matrix_dims("slice_rows", t)?;
        if len == 0 || start + len > m {
            return Err(TensorError::Contract(format!(
                "slice_rows: rows {start}..{} out of range for {m} rows",
                start + len
            )));
        }
        let out = t.data()[start * n..(start + len) * n].to_vec();
        Ok(self.push(vec![len, n], out, Op::SliceRows(a, start), &[a]))
    }

    /// Columns `start..start + len` of a matrix.
    pub fn slice_cols(&mut self, a: Var, start: usize, len: usize) -> Result<Var> {
        let t = self.value(a);
        let (m, n) = matrix_dims("slice_cols", t)?;
        if len == 0 || start + len > n {
            return Err(TensorError::Contract(format!(
                "slice_cols: columns {start}..{} out of range for {n} columns",
                start + len
            )));
        }
        let mut out = Vec::with_capacity(m * len);
        for i in 0..m {
            out.extend_from_slice(&t.row(i)[start..start + len]);
        }
        Ok(self.push(vec![m, len], out, Op::SliceCols(a, start), &[a]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_rows: no inputs".into()))?;
        let (_, n) = matrix_dims("concat_rows", self.value(*first))?;
        let mut rows = 0;
        let mut out = Vec::new();
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_rows", t)?;
            if c != n {
                return Err(mismatch("concat_rows", self.value(*first), t));
            }
            rows += r;
            out.extend_from_slice(t.data());
        }
        Ok(self.push(vec![rows, n], out, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat_cols: no inputs".into()))?;
        let (m, _) = matrix_dims("concat_cols", self.value(*first))?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let t = self.value(p);
            let (r, c) = matrix_dims("concat_cols", t)?;
            if r != m {
                return Err(mismatch("concat_cols", self.value(*first), t));
            }
            widths.push(c);
        }
        let total: usize = widths.iter().sum();
        let mut out = Vec::with_capacity(m * total);
        for i in 0..m {
            for &p in parts {
                out.extend_from_slice(self.value(p).row(i));
            }
        }
        Ok(self.push(vec![m, total], out, Op::ConcatCols(parts.to_vec()), parts))
    }

    /// Selects rows of `table` by index (embedding lookup).
    pub fn gather_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let t = self.value(table);
        let (m, n) = matrix_dims("gather_rows", t)?;
        if ids.is_empty() {
            return Err(TensorError::Contract("gather_rows: no indices".into()));
        }
        let mut out = Vec::with_capacity(ids.len() * n);
        for &id in ids {
            if id >= m {
                return Err(TensorError::Contract(format!(
                    "gather_rows: index {id} out of range for {m} rows"
                )));
            }
            out.extend_from_slice(t.row(id));
        }
        Ok(self.push(vec![ids.len(), n], out, Op::Gather(table, ids.to_vec()), &[table]))
    }

    /// Gaussian log-bias `G[i][j] = -(j - center_i)^2 / (2 sigma_i^2)` over `cols` positions.
    ///
    /// `sigma_i = max(window_i / 2, sigma_floor)`, or the constant `sigma_override`
    /// when given (no gradient then flows to `window`).
    pub fn gaussian_bias(
        &mut self,
        center: Var,
        window: Var,
        cols: usize,
        sigma_floor: f64,
        sigma_override: Option<f64>,
    ) -> Result<Var> {
        let (tp, td) = (self.value(center), self.value(window));
        let rows = vector_len("gaussian_bias", tp)?;
        if td.shape() != tp.shape() {
            return Err(mismatch("gaussian_bias", tp, td));
        }
        if let Some(j) = td.data().iter().position(|&d| d <= 0.0 || d.is_nan()) {
            return Err(TensorError::Contract(format!(
                "gaussian_bias: window {j} is not positive ({})",
                td.data()[j]
            )));
        }
        let mut sigma = Vec::with_capacity(rows);
        let mut window_active = Vec::with_capacity(rows);
        for &d in td.data() {
            match sigma_override {
                Some(s) => {
                    sigma.push(s);
                    window_active.push(false);
                }
                None => {
                    let half = d / 2.0;
                    window_active.push(half >= sigma_floor);
                    sigma.push(half.max(sigma_floor));
                }
            }
        }
        let mut out = vec![0.0; rows * cols];
        for (i, (&p, &s)) in tp.data().iter().zip(&sigma).enumerate() {
            let denom = 2.0 * s * s;
            for j in 0..cols {
                let diff = j as f64 - p;
                out[i * cols + j] = -(diff * diff) / denom;
            }
        }
        let op = Op::GaussianBias {
            center,
            window,
            sigma,
            window_active,
        };
        Ok(self.push(vec![rows, cols], out, op, &[center, window]))
    }

    /// Mean token cross-entropy of `logits: [N x V]`; `None` targets are skipped.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let t = self.value(logits);
        let (n, v) = matrix_dims("cross_entropy", t)?;
        if targets.len() != n {
            return Err(TensorError::Contract(format!(
                "cross_entropy: {} targets for {n} rows",
                targets.len()
            )));
        }
        let count = targets.iter().flatten().count();
        if count == 0 {
            return Err(TensorError::Contract(
                "cross_entropy: every position is padding".into(),
            ));
        }
        let mut probs = vec![0.0; n * v];
        let mut total = 0.0;
        for (i, target) in targets.iter().enumerate() {
            let Some(target) = *target else { continue };
            if target >= v {
                return Err(TensorError::Contract(format!(
                    "cross_entropy: target {target} out of range for {v} classes"
                )));
            }
            let row = t.row(i);
            kernels::softmax_row(row, None, &mut probs[i * v..(i + 1) * v]);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = max + row.iter().map(|x| (x - max).exp()).sum::<f64>().ln();
            total += lse - row[target];
        }
        let op = Op::CrossEntropy {
            logits,
            targets: targets.to_vec(),
            probs,
            count,
        };
        Ok(self.push(vec![1], vec![total / count as f64], op, &[logits]))
    }

    /// Reverse sweep from a scalar `loss`; leaf gradients accumulate across calls.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        let shape = self.shape(loss);
        if shape.iter().product::<usize>() != 1 {
            return Err(TensorError::NotScalar(shape.to_vec()));
        }
        let mut adj: Vec<Option<Vec<f64>>> = (0..=loss.0).map(|_| None).collect();
        adj[loss.0] = Some(vec![1.0]);
        for idx in (0..=loss.0).rev() {
            let Some(g) = adj[idx].take() else { continue };
            if !self.nodes[idx].needs_grad {
                continue;
            }
            if let Op::Leaf = self.nodes[idx].op {
                self.nodes[idx].value.accumulate_grad(&g);
                continue;
            }
            self.propagate(idx, &g, &mut adj);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].needs_grad
    }

    fn propagate(&self, idx: usize, g: &[f64], adj: &mut [Option<Vec<f64>>]) {
        let node = &self.nodes[idx];
        let out = node.value.data();
        let mut send = |v: Var, f: &dyn Fn(&mut [f64])| {
            if !self.nodes[v.0].needs_grad {
                return;
            }
            let slot = adj[v.0].get_or_insert_with(|| vec![0.0; self.nodes[v.0].value.numel()]);
            f(slot);
        };
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.shape()[1];
                send(*a, &|s| matmul_nt_acc(g, tb.data(), s, m, n, k));
                send(*b, &|s| matmul_tn_acc(ta.data(), g, s, m, k, n));
            }
            Op::MatMulNt(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                let (m, k) = ta.dims2().unwrap();
                let n = tb.shape()[0];
                // out = a b^T: da = g b, db = g^T a
                send(*a, &|s| matmul_acc(g, tb.data(), s, m, n, k));
                send(*b, &|s| matmul_tn_acc(g, ta.data(), s, m, n, k));
            }
            Op::Transpose(a) => {
                let (m, n) = self.value(*a).dims2().unwrap();
                send(*a, &|s| {
                    for i in 0..m {
                        for j in 0..n {
                            s[i * n + j] += g[j * m + i];
                        }
                    }
                });
            }
            Op::MatVec(m, v) => {
                let (tm, tv) = (self.value(*m), self.value(*v));
                let (r, c) = tm.dims2().unwrap();
                send(*m, &|s| {
                    for i in 0..r {
                        for j in 0..c {
                            s[i * c + j] += g[i] * tv.data()[j];
                        }
                    }
                });
                send(*v, &|s| matmul_tn_acc(tm.data(), g, s, r, c, 1));
            }
            Op::Dot(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, &|s| s.iter_mut().zip(tb.data()).for_each(|(x, y)| *x += g[0] * y));
                send(*b, &|s| s.iter_mut().zip(ta.data()).for_each(|(x, y)| *x += g[0] * y));
            }
            Op::Add(a, b) => {
                send(*a, &|s| add_assign(s, g));
                send(*b, &|s| add_assign(s, g));
            }
            Op::Sub(a, b) => {
                send(*a, &|s| add_assign(s, g));
                send(*b, &|s| s.iter_mut().zip(g).for_each(|(x, y)| *x -= y));
            }
            Op::Mul(a, b) => {
                let (ta, tb) = (self.value(*a), self.value(*b));
                send(*a, &|s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(tb.data()) {
                        *x += gi * y;
                    }
                });
                send(*b, &|s| {
                    for ((x, gi), y) in s.iter_mut().zip(g).zip(ta.data()) {
                        *x += gi * y;
                    }
                });
            }
            Op::AddRowBroadcast(x, row) => {
                let n = self.value(*row).numel();
                send(*x, &|s| add_assign(s, g));
                send(*row, &|s| {
                    for chunk in g.chunks_exact(n) {
                        add_assign(s, chunk);
                    }
                });
            }
            Op::Scale(a, c) => send(*a, &|s| s.iter_mut().zip(g).for_each(|(x, gi)| *x += c * gi)),
            Op::Tanh(a) => send(*a, &|s| {
                for ((x, gi), y) in s.iter_mut().zip(g).zip(out) {
                    *x += gi * (1.0 - y * y);
                }
            }),
            Op::Sigmoid(a) => send(*a, &|s| {
                for ((x, gi), y) in s.iter_mut().zip(g).zip(out) {
                    *x += gi * y * (1.0 - y);
                }
            }),
            Op::Relu(a) => {
                let input = self.value(*a).data();
                send(*a, &|s| {
                    for ((x, gi), z) in s.iter_mut().zip(g).zip(input) {
                        if *z > 0.0 {
                            *x += gi;
                        }
                    }
                });
            }
            Op::Sum(a) => send(*a, &|s| s.iter_mut().for_each(|x| *x += g[0])),
            Op::MeanRows(a) => {
                let (m, _) = self.value(*a).dims2().unwrap();
                let inv = 1.0 / m as f64;
                send(*a, &|s| {
                    for row in s.chunks_exact_mut(g.len()) {
                        row.iter_mut().zip(g).for_each(|(x, gi)| *x += inv * gi);
                    }
                });
            }
            Op::Broadcast(a) => send(*a, &|s| s[0] += g.iter().sum::<f64>()),
            Op::Softmax(x) => {
                let (_, n) = node.value.dims2().unwrap();
                send(*x, &|s| {
                    for ((srow, grow), yrow) in s
                        .chunks_exact_mut(n)
                        .zip(g.chunks_exact(n))
                        .zip(out.chunks_exact(n))
                    {
                        let inner = kernels::dot(grow, yrow);
                        for ((x, gi), y) in srow.iter_mut().zip(grow).zip(yrow) {
                            *x += y * (gi - inner);
                        }
                    }
                });
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                normalized,
                inv_std,
            } => {
                let (m, d) = node.value.dims2().unwrap();
                let gn = self.value(*gain).data();
                send(*x, &|s| {
                    for i in 0..m {
                        let gr = &g[i * d..(i + 1) * d];
                        let xh = &normalized[i * d..(i + 1) * d];
                        let dxh: Vec<f64> = gr.iter().zip(gn).map(|(a, b)| a * b).collect();
                        let mean_dxh = dxh.iter().sum::<f64>() / d as f64;
                        let mean_dxh_xh = kernels::dot(&dxh, xh) / d as f64;
                        for j in 0..d {
                            s[i * d + j] += inv_std[i] * (dxh[j] - mean_dxh - xh[j] * mean_dxh_xh);
                        }
                    }
                });
                send(*gain, &|s| {
                    for i in 0..m {
                        for j in 0..d {
                            s[j] += g[i * d + j] * normalized[i * d + j];
                        }
                    }
                });
                send(*bias, &|s| {
                    for chunk in g.chunks_exact(d) {
                        add_assign(s, chunk);
                    }
                });
            }
            Op::SliceRows(a, start) => {
                let n = self.value(*a).shape()[1];
                send(*a, &|s| add_assign(&mut s[start * n..start * n + g.len()], g));
            }
            Op::SliceCols(a, start) => {
                let n = self.value(*a).shape()[1];
                let len = node.value.shape()[1];
                send(*a, &|s| {
                    for (i, grow) in g.chunks_exact(len).enumerate() {
                        add_assign(&mut s[i * n + start..i * n + start + len], grow);
                    }
                });
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let len = self.value(*p).numel();
                    let o = offset;
                    send(*p, &|s| add_assign(s, &g[o..o + len]));
                    offset += len;
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.shape()[1];
                let mut offset = 0;
                for p in parts {
                    let w = self.value(*p).shape()[1];
                    let o = offset;
                    send(*p, &|s| {
                        for (srow, grow) in s.chunks_exact_mut(w).zip(g.chunks_exact(total)) {
                            add_assign(srow, &grow[o..o + w]);
                        }
                    });
                    offset += w;
                }
            }
            Op::Gather(table, ids) => {
                let n = self.value(*table).shape()[1];
                send(*table, &|s| {
                    for (k, &id) in ids.iter().enumerate() {
                        add_assign(&mut s[id * n..(id + 1) * n], &g[k * n..(k + 1) * n]);
                    }
                });
            }
            Op::GaussianBias {
                center,
                window,
                sigma,
                window_active,
            } => {
                let cols = node.value.shape()[1];
                let p = self.value(*center).data();
                // dG/dP_i = (j - P_i) / sigma_i^2, dG/dsigma_i = (j - P_i)^2 / sigma_i^3
                send(*center, &|s| {
                    for i in 0..p.len() {
                        let s2 = sigma[i] * sigma[i];
                        s[i] += (0..cols)
                            .map(|j| g[i * cols + j] * (j as f64 - p[i]) / s2)
                            .sum::<f64>();
                    }
                });
                if self.wants(*window) {
                    send(*window, &|s| {
                        for i in 0..p.len() {
                            if !window_active[i] {
                                continue;
                            }
                            let s3 = sigma[i] * sigma[i] * sigma[i];
                            let dsigma: f64 = (0..cols)
                                .map(|j| {
                                    let diff = j as f64 - p[i];
                                    g[i * cols + j] * diff * diff / s3
                                })
                                .sum();
                            s[i] += 0.5 * dsigma;
                        }
                    });
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let v = self.value(*logits).shape()[1];
                let scale = g[0] / *count as f64;
                send(*logits, &|s| {
                    for (i, target) in targets.iter().enumerate() {
                        let Some(target) = *target else { continue };
                        for j in 0..v {
                            let onehot = if j == target { 1.0 } else { 0.0 };
                            s[i * v + j] += scale * (probs[i * v + j] - onehot);
                        }
                    }
                });
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.len() == b.len() && a.iter().zip(b).all(|(x, y)| (x - y).abs() <= tol)
    }

    fn mat(rows: &[&[f64]]) -> Tensor {
        Tensor::matrix(&rows.iter().map(|r| r.to_vec()).collect::<Vec<_>>()).unwrap()
    }

    #[test]
    fn matmul_identity_and_hand_product() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0, 3.0], &[4.0, 5.0, 6.0], &[7.0, 8.0, 9.0]]));
        let id = tape.constant(Tensor::identity(3));
        let y = tape.matmul(id, x).unwrap();
        assert_eq!(tape.data(y), tape.data(x));

        let a = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = tape.constant(mat(&[&[1.0], &[1.0]]));
        let c = tape.matmul(a, b).unwrap();
        assert_eq!(tape.shape(c), &[2, 1]);
        assert_eq!(tape.data(c), &[3.0, 7.0]);

        let z = tape.constant(Tensor::zeros(vec![2, 3]));
        let zx = tape.matmul(z, x).unwrap();
        assert!(tape.data(zx).iter().all(|&v| v == 0.0));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(vec![2, 3]));
        let b = tape.constant(Tensor::zeros(vec![2, 3]));
        let err = tape.matmul(a, b).unwrap_err();
        assert_eq!(
            err,
            TensorError::ShapeMismatch {
                op: "matmul",
                left: vec![2, 3],
                right: vec![2, 3]
            }
        );
        assert!(err.to_string().contains("[2, 3]"));
    }

    #[test]
    fn softmax_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[0.0; 4]]));
        let y = tape.rowwise_softmax(x, None).unwrap();
        assert!(close(tape.data(y), &[0.25; 4], 1e-15));

        let x = tape.constant(mat(&[&[1f64.ln(), 2f64.ln(), 3f64.ln()]]));
        let y = tape.rowwise_softmax(x, None).unwrap();
        assert!(close(tape.data(y), &[1.0 / 6.0, 2.0 / 6.0, 3.0 / 6.0], 1e-15));

        let x = tape.constant(mat(&[&[5.0, 5.0]]));
        let y = tape.rowwise_softmax(x, Some(&[true, false])).unwrap();
        assert_eq!(tape.data(y), &[1.0, 0.0]);
    }

    #[test]
    fn softmax_fully_masked_row_is_an_error() {
        let mut tape = Tape::new();
        let x = tape.constant(mat(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let err = tape.rowwise_softmax(x, Some(&[true, true, false, false])).unwrap_err();
        assert_eq!(err, TensorError::InvalidMask { row: 1 });
    }

    #[test]
    fn elementwise_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(Tensor::vector(vec![0.0, 3f64.ln()]));
        let s = tape.sigmoid(x);
        assert_eq!(tape.data(s)[0], 0.5);
        assert!((tape.data(s)[1] - 0.75).abs() < 1e-15);
        let t = tape.tanh(x);
        assert_eq!(tape.data(t)[0], 0.0);
        let r = tape.constant(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r2 = tape.relu(r);
        assert_eq!(tape.data(r2), &[0.0, 0.0, 2.0]);
        let a = tape.constant(Tensor::vector(vec![1.0, 2.0]));
        let b = tape.constant(Tensor::vector(vec![1.0, 2.0, 3.0]));
        assert!(matches!(tape.add(a, b), Err(TensorError::ShapeMismatch { op: "add", .. })));
    }

    #[test]
    fn relu_subgradient_at_zero_is_zero() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![-1.0, 0.0, 2.0]));
        let r = tape.relu(x);
        let l = tape.sum(r);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[0.0, 0.0, 1.0]);
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let gain = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let bias = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let x = tape.constant(mat(&[&[4.0, 4.0], &[1.0, 3.0]]));
        let y = tape.layer_norm(x, gain, bias, 1e-12).unwrap();
        assert!(close(tape.data(y), &[0.0, 0.0, -1.0, 1.0], 1e-10));

        let zero_gain = tape.constant(Tensor::vector(vec![0.0, 0.0]));
        let b = tape.constant(Tensor::vector(vec![0.3, -0.7]));
        let y = tape.layer_norm(x, zero_gain, b, 1e-5).unwrap();
        assert_eq!(tape.data(y), &[0.3, -0.7, 0.3, -0.7]);
    }

    #[test]
    fn mean_rows_examples() {
        let mut tape = Tape::new();
        let one = tape.constant(mat(&[&[1.5, -2.0]]));
        let m = tape.mean_rows(one).unwrap();
        assert_eq!(tape.data(m), &[1.5, -2.0]);
        let two = tape.constant(mat(&[&[0.0, 2.0], &[2.0, 0.0]]));
        let m = tape.mean_rows(two).unwrap();
        assert_eq!(tape.data(m), &[1.0, 1.0]);
        let z = tape.constant(Tensor::zeros(vec![3, 2]));
        let m = tape.mean_rows(z).unwrap();
        assert_eq!(tape.data(m), &[0.0, 0.0]);
    }

    #[test]
    fn backward_examples() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::new(vec![2, 3], vec![0.1; 6]).unwrap());
        let l = tape.sum(x);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[1.0; 6]);

        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, -2.0]));
        let unused = tape.param(Tensor::vector(vec![5.0]));
        let sq = tape.mul(x, x).unwrap();
        let l = tape.sum(sq);
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[2.0, -4.0]);
        assert!(tape.grad(unused).is_none());

        // repeated calls accumulate
        tape.backward(l).unwrap();
        assert_eq!(tape.grad(x).unwrap(), &[4.0, -8.0]);
    }

    #[test]
    fn backward_rejects_non_scalar() {
        let mut tape = Tape::new();
        let x = tape.param(Tensor::vector(vec![1.0, 2.0]));
        assert_eq!(tape.backward(x), Err(TensorError::NotScalar(vec![2])));
    }

    #[test]
    fn gaussian_bias_hand_values() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![2.0]));
        let d = tape.constant(Tensor::vector(vec![2.0]));
        let g = tape.gaussian_bias(p, d, 5, 1e-3, None).unwrap();
        let row = tape.data(g);
        assert_eq!(row[2], 0.0);
        assert_eq!(row[4], -2.0);
        assert_eq!(row[0], row[4]);
        assert_eq!(row[1], row[3]);
    }

    #[test]
    fn gaussian_bias_rejects_non_positive_window() {
        let mut tape = Tape::new();
        let p = tape.constant(Tensor::vector(vec![1.0, 1.0]));
        let d = tape.constant(Tensor::vector(vec![1.0, 0.0]));
        assert!(tape.gaussian_bias(p, d, 3, 1e-3, None).is_err());
    }

    #[test]
    fn cross_entropy_uniform_logits() {
        let mut tape = Tape::new();
        let logits = tape.constant(Tensor::zeros(vec![3, 8]));
        let l = tape.cross_entropy(logits, &[Some(1), None, Some(7)]).unwrap();
        assert!((tape.data(l)[0] - 8f64.ln()).abs() < 1e-12);
        assert!(tape.cross_entropy(logits, &[None, None, None]).is_err());
    }
}

use crate::error::{Result, TensorError};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Handle to a tensor recorded on a [`Graph`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// How the right operand of a binary op maps onto the left operand's layout.
/// `None` means identical shapes; otherwise `map[i]` is the right-hand flat
/// index read for left-hand flat index `i`.
pub(crate) type BroadcastMap = Option<Vec<usize>>;

pub(crate) enum Op<T> {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    Transpose {
        x: Var,
        rows: usize,
        cols: usize,
    },
    Add {
        a: Var,
        b: Var,
        map: BroadcastMap,
    },
    Mul {
        a: Var,
        b: Var,
        map: BroadcastMap,
    },
    Scale {
        x: Var,
        factor: T,
    },
    Concat {
        inputs: Vec<Var>,
        lens: Vec<usize>,
        outer: usize,
        inner: usize,
    },
    Narrow {
        x: Var,
        outer: usize,
        len_in: usize,
        start: usize,
        len: usize,
        inner: usize,
    },
    Reshape {
        x: Var,
    },
    Sum {
        x: Var,
    },
    Mean {
        x: Var,
    },
    Sigmoid {
        x: Var,
    },
    Silu {
        x: Var,
    },
    Log {
        x: Var,
    },
    Exp {
        x: Var,
    },
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
        inv_std: Vec<T>,
    },
    Embedding {
        table: Var,
        indices: Vec<usize>,
        dim: usize,
    },
    Dropout {
        x: Var,
        mask: Vec<T>,
    },
    KlDiv {
        p: Var,
        q: Var,
    },
    RowCosine {
        x: Var,
        a: Var,
        rows: usize,
        cols: usize,
        dim: usize,
        x_norm: Vec<T>,
        a_norm: Vec<T>,
    },
    Gather {
        x: Var,
        indices: Vec<usize>,
        cols: usize,
    },
    ShiftRows {
        x: Var,
        offset: isize,
        rows: usize,
        cols: usize,
    },
}

pub(crate) struct Node<T> {
    pub(crate) tensor: Tensor<T>,
    pub(crate) op: Op<T>,
}

/// Ordered record of executed operations.
///
/// Nodes are appended as operations run, so every node sits after the
/// producers of its inputs.
pub struct Graph<T> {
    pub(crate) nodes: Vec<Node<T>>,
    backward_done: bool,
    warnings: Vec<String>,
}

impl<T: Scalar> Default for Graph<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Scalar> Graph<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            backward_done: false,
            warnings: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Records a leaf. Its `requires_grad` flag is kept as given.
    pub fn leaf(&mut self, tensor: Tensor<T>) -> Var {
        self.push_node(tensor, Op::Leaf)
    }

    /// Records a trainable leaf.
    pub fn param(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(true))
    }

    /// Records a constant leaf.
    pub fn constant(&mut self, tensor: Tensor<T>) -> Var {
        self.leaf(tensor.with_requires_grad(false))
    }

    pub fn constant_from(&mut self, shape: impl Into<Vec<usize>>, values: Vec<T>) -> Result<Var> {
        Ok(self.constant(Tensor::new(shape, values)?))
    }

    /// Copy of `v` cut off from the tape; no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let t = &self.nodes[v.0].tensor;
        let copy = Tensor::from_parts(t.shape().to_vec(), t.values().to_vec());
        self.constant(copy)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].tensor
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].tensor.shape()
    }

    pub fn values(&self, v: Var) -> &[T] {
        self.nodes[v.0].tensor.values()
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.nodes[v.0].tensor.grad()
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    /// Non-fatal numeric conditions met during the forward pass, such as a
    /// zero-norm cosine operand.
    pub fn warnings(&self) -> &[String] {
        &self.warnings
    }

    pub(crate) fn warn(&mut self, msg: String) {
        self.warnings.push(msg);
    }

    /// Drops all gradients so `backward` may run again on the same tape.
    pub fn reset_grads(&mut self) {
        for node in &mut self.nodes {
            node.tensor.grad = None;
        }
        self.backward_done = false;
    }

    pub(crate) fn push(&mut self, shape: Vec<usize>, values: Vec<T>, op: Op<T>) -> Var {
        let tensor = Tensor::from_parts(shape, values);
        self.push_node(tensor, op)
    }

    fn push_node(&mut self, mut tensor: Tensor<T>, op: Op<T>) -> Var {
        if !matches!(op, Op::Leaf) {
            tensor.requires_grad = op_inputs(&op)
                .iter()
                .any(|v| self.nodes[v.0].tensor.requires_grad);
        }
        self.nodes.push(Node { tensor, op });
        Var(self.nodes.len() - 1)
    }

    /// Populates gradients for every `requires_grad` node reachable from
    /// `loss`. Trainable leaves that the loss does not depend on receive a
    /// zero gradient.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.nodes.is_empty() {
            return Err(TensorError::EmptyTape);
        }
        if self.backward_done {
            return Err(TensorError::BackwardAlreadyRun);
        }
        let loss_t = &self.nodes[loss.0].tensor;
        if loss_t.numel() != 1 {
            return Err(TensorError::NotScalar(loss_t.shape().to_vec()));
        }
        self.backward_done = true;
        if loss_t.requires_grad {
            self.nodes[loss.0].tensor.grad = Some(vec![T::one()]);
        }
        for i in (0..=loss.0).rev() {
            if self.nodes[i].tensor.grad.is_none() || matches!(self.nodes[i].op, Op::Leaf) {
                continue;
            }
            let op = std::mem::replace(&mut self.nodes[i].op, Op::Leaf);
            self.backprop_node(i, &op);
            self.nodes[i].op = op;
        }
        for node in &mut self.nodes {
            if node.tensor.requires_grad && node.tensor.grad.is_none() {
                node.tensor.grad = Some(vec![T::zero(); node.tensor.numel()]);
            }
        }
        Ok(())
    }

    fn accumulate(&mut self, v: Var, contrib: Vec<T>) {
        let t = &mut self.nodes[v.0].tensor;
        if !t.requires_grad {
            return;
        }
        match &mut t.grad {
            Some(g) => g.iter_mut().zip(contrib).for_each(|(a, b)| *a = *a + b),
            slot @ None => *slot = Some(contrib),
        }
    }

    fn needs(&self, v: Var) -> bool {
        self.nodes[v.0].tensor.requires_grad
    }

    fn backprop_node(&mut self, i: usize, op: &Op<T>) {
        let g: Vec<T> = self.nodes[i].tensor.grad.clone().unwrap_or_default();
        let out_buf: Vec<T> = self.nodes[i].tensor.values().to_vec();
        let out: &[T] = &out_buf;
        match op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                let (m, k, n) = (*m, *k, *n);
                if self.needs(*a) {
                    // dA = dC · Bᵀ
                    let bv = self.values(*b);
                    let mut da = vec![T::zero(); m * k];
                    for r in 0..m {
                        let grow = &g[r * n..(r + 1) * n];
                        for p in 0..k {
                            let brow = &bv[p * n..(p + 1) * n];
                            da[r * k + p] = grow
                                .iter()
                                .zip(brow)
                                .fold(T::zero(), |acc, (&x, &y)| acc + x * y);
                        }
                    }
                    self.accumulate(*a, da);
                }
                if self.needs(*b) {
                    // dB = Aᵀ · dC
                    let av = self.values(*a);
                    let mut db = vec![T::zero(); k * n];
                    for r in 0..m {
                        for p in 0..k {
                            let x = av[r * k + p];
                            if x == T::zero() {
                                continue;
                            }
                            let row = &g[r * n..(r + 1) * n];
                            let dst = &mut db[p * n..(p + 1) * n];
                            for (d, &gv) in dst.iter_mut().zip(row) {
                                *d = *d + x * gv;
                            }
                        }
                    }
                    self.accumulate(*b, db);
                }
            }
            Op::Transpose { x, rows, cols } => {
                let (rows, cols) = (*rows, *cols);
                let mut dx = vec![T::zero(); rows * cols];
                for r in 0..rows {
                    for c in 0..cols {
                        dx[r * cols + c] = g[c * rows + r];
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Add { a, b, map } => {
                if self.needs(*b) {
                    let nb = self.value(*b).numel();
                    let db = reduce_broadcast(&g, map, nb, |gv, _| gv);
                    self.accumulate(*b, db);
                }
                if self.needs(*a) {
                    self.accumulate(*a, g);
                }
            }
            Op::Mul { a, b, map } => {
                let av = self.values(*a).to_vec();
                let bv = self.values(*b).to_vec();
                if self.needs(*b) {
                    let db = reduce_broadcast(&g, map, bv.len(), |gv, i| gv * av[i]);
                    self.accumulate(*b, db);
                }
                if self.needs(*a) {
                    let da = g
                        .iter()
                        .enumerate()
                        .map(|(i, &gv)| gv * bv[bidx(map, i)])
                        .collect();
                    self.accumulate(*a, da);
                }
            }
            Op::Scale { x, factor } => {
                let f = *factor;
                self.accumulate(*x, g.iter().map(|&gv| gv * f).collect());
            }
            Op::Concat {
                inputs,
                lens,
                outer,
                inner,
            } => {
                let total: usize = lens.iter().sum();
                let mut offset = 0;
                for (v, &len) in inputs.iter().zip(lens) {
                    if self.needs(*v) {
                        let mut dx = Vec::with_capacity(outer * len * inner);
                        for o in 0..*outer {
                            let start = (o * total + offset) * inner;
                            dx.extend_from_slice(&g[start..start + len * inner]);
                        }
                        self.accumulate(*v, dx);
                    }
                    offset += len;
                }
            }
            Op::Narrow {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            } => {
                let mut dx = vec![T::zero(); outer * len_in * inner];
                for o in 0..*outer {
                    let src = o * len * inner;
                    let dst = (o * len_in + start) * inner;
                    dx[dst..dst + len * inner].copy_from_slice(&g[src..src + len * inner]);
                }
                self.accumulate(*x, dx);
            }
            Op::Reshape { x } => self.accumulate(*x, g),
            Op::Sum { x } => {
                let n = self.value(*x).numel();
                self.accumulate(*x, vec![g[0]; n]);
            }
            Op::Mean { x } => {
                let n = self.value(*x).numel();
                let gv = g[0] / T::from_f64(n as f64);
                self.accumulate(*x, vec![gv; n]);
            }
            Op::Sigmoid { x } => {
                let dx = g
                    .iter()
                    .zip(out)
                    .map(|(&gv, &s)| gv * s * (T::one() - s))
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Silu { x } => {
                let xv = self.values(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &xi)| {
                        let s = sigmoid(xi);
                        gv * s * (T::one() + xi * (T::one() - s))
                    })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Log { x } => {
                let eps = T::from_f64(crate::EPS);
                let xv = self.values(*x);
                let dx = g
                    .iter()
                    .zip(xv)
                    .map(|(&gv, &xi)| if xi > eps { gv / xi } else { T::zero() })
                    .collect();
                self.accumulate(*x, dx);
            }
            Op::Exp { x } => {
                let dx = g.iter().zip(out).map(|(&gv, &y)| gv * y).collect();
                self.accumulate(*x, dx);
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let dot = (0..*len).fold(T::zero(), |acc, j| acc + g[idx(j)] * out[idx(j)]);
                        for j in 0..*len {
                            dx[idx(j)] = out[idx(j)] * (g[idx(j)] - dot);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::LayerNorm {
                x,
                outer,
                len,
                inner,
                inv_std,
            } => {
                let n = T::from_f64(*len as f64);
                let mut dx = vec![T::zero(); g.len()];
                for o in 0..*outer {
                    for i in 0..*inner {
                        let idx = |j: usize| (o * len + j) * inner + i;
                        let r = inv_std[o * inner + i];
                        let mean_g = (0..*len).fold(T::zero(), |a, j| a + g[idx(j)]) / n;
                        let mean_gy =
                            (0..*len).fold(T::zero(), |a, j| a + g[idx(j)] * out[idx(j)]) / n;
                        for j in 0..*len {
                            dx[idx(j)] = r * (g[idx(j)] - mean_g - out[idx(j)] * mean_gy);
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
            Op::Embedding {
                table,
                indices,
                dim,
            } => {
                let n = self.value(*table).numel();
                let mut dt = vec![T::zero(); n];
                for (row, &idx) in indices.iter().enumerate() {
                    for c in 0..*dim {
                        dt[idx * dim + c] = dt[idx * dim + c] + g[row * dim + c];
                    }
                }
                self.accumulate(*table, dt);
            }
            Op::Dropout { x, mask } => {
                let dx = g.iter().zip(mask).map(|(&gv, &m)| gv * m).collect();
                self.accumulate(*x, dx);
            }
            Op::KlDiv { p, q } => {
                let eps = T::from_f64(crate::EPS);
                let gv = g[0];
                let pv = self.values(*p).to_vec();
                let qv = self.values(*q).to_vec();
                if self.needs(*p) {
                    let dp = pv
                        .iter()
                        .zip(&qv)
                        .map(|(&pi, &qi)| {
                            if pi > T::zero() {
                                gv * (pi.ln() - qi.max(eps).ln() + T::one())
                            } else {
                                T::zero()
                            }
                        })
                        .collect();
                    self.accumulate(*p, dp);
                }
                if self.needs(*q) {
                    let dq = pv
                        .iter()
                        .zip(&qv)
                        .map(|(&pi, &qi)| if qi > eps { -gv * pi / qi } else { T::zero() })
                        .collect();
                    self.accumulate(*q, dq);
                }
            }
            Op::RowCosine {
                x,
                a,
                rows,
                cols,
                dim,
                x_norm,
                a_norm,
            } => {
                let eps = T::from_f64(crate::EPS);
                let (rows, cols, dim) = (*rows, *cols, *dim);
                let xv = self.values(*x).to_vec();
                let av = self.values(*a).to_vec();
                let need_x = self.needs(*x);
                let need_a = self.needs(*a);
                let mut dx = vec![T::zero(); xv.len()];
                let mut da = vec![T::zero(); av.len()];
                for r in 0..rows {
                    let xr = &xv[r * dim..(r + 1) * dim];
                    for c in 0..cols {
                        let gv = g[r * cols + c];
                        if gv == T::zero() {
                            continue;
                        }
                        let ar = &av[c * dim..(c + 1) * dim];
                        let raw = x_norm[r] * a_norm[c];
                        let denom = raw.max(eps);
                        let s = out[r * cols + c];
                        let clamped = raw <= eps;
                        for j in 0..dim {
                            if need_x {
                                let mut d = ar[j] / denom;
                                if !clamped {
                                    d = d - s * xr[j] / (x_norm[r] * x_norm[r]);
                                }
                                dx[r * dim + j] = dx[r * dim + j] + gv * d;
                            }
                            if need_a {
                                let mut d = xr[j] / denom;
                                if !clamped {
                                    d = d - s * ar[j] / (a_norm[c] * a_norm[c]);
                                }
                                da[c * dim + j] = da[c * dim + j] + gv * d;
                            }
                        }
                    }
                }
                if need_x {
                    self.accumulate(*x, dx);
                }
                if need_a {
                    self.accumulate(*a, da);
                }
            }
            Op::Gather { x, indices, cols } => {
                let n = self.value(*x).numel();
                let mut dx = vec![T::zero(); n];
                for (r, &c) in indices.iter().enumerate() {
                    dx[r * cols + c] = dx[r * cols + c] + g[r];
                }
                self.accumulate(*x, dx);
            }
            Op::ShiftRows {
                x,
                offset,
                rows,
                cols,
            } => {
                let mut dx = vec![T::zero(); rows * cols];
                for t in 0..*rows {
                    let src = t as isize + offset;
                    if src >= 0 && (src as usize) < *rows {
                        let s = src as usize;
                        for c in 0..*cols {
                            dx[s * cols + c] = dx[s * cols + c] + g[t * cols + c];
                        }
                    }
                }
                self.accumulate(*x, dx);
            }
        }
    }
}

pub(crate) fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

pub(crate) fn bidx(map: &BroadcastMap, i: usize) -> usize {
    match map {
        None => i,
        Some(m) => m[i],
    }
}

fn reduce_broadcast<T: Scalar>(
    g: &[T],
    map: &BroadcastMap,
    nb: usize,
    f: impl Fn(T, usize) -> T,
) -> Vec<T> {
    let mut db = vec![T::zero(); nb];
    for (i, &gv) in g.iter().enumerate() {
        let j = bidx(map, i);
        db[j] = db[j] + f(gv, i);
    }
    db
}

fn op_inputs<T>(op: &Op<T>) -> Vec<Var> {
    match op {
        Op::Leaf => vec![],
        Op::MatMul { a, b, .. }
        | Op::Add { a, b, .. }
        | Op::Mul { a, b, .. }
        | Op::RowCosine { x: a, a: b, .. }
        | Op::KlDiv { p: a, q: b } => vec![*a, *b],
        Op::Concat { inputs, .. } => inputs.clone(),
        Op::Embedding { table, .. } => vec![*table],
        Op::Transpose { x, .. }
        | Op::Scale { x, .. }
        | Op::Narrow { x, .. }
        | Op::Reshape { x }
        | Op::Sum { x }
        | Op::Mean { x }
        | Op::Sigmoid { x }
        | Op::Silu { x }
        | Op::Log { x }
        | Op::Exp { x }
        | Op::Softmax { x, .. }
        | Op::LayerNorm { x, .. }
        | Op::Dropout { x, .. }
        | Op::Gather { x, .. }
        | Op::ShiftRows { x, .. } => vec![*x],
    }
}

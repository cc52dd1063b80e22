use rand::Rng;

use crate::error::{Result, TensorError};
use crate::graph::{bidx, sigmoid, BroadcastMap, Graph, Op, Var};
use crate::scalar::Scalar;

/// Splits `shape` around `axis` into (outer, axis length, inner) extents.
fn split_axis(op: &'static str, shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(TensorError::InvalidAxis {
            op,
            axis,
            shape: shape.to_vec(),
        });
    }
    let outer = shape[..axis].iter().product();
    let inner = shape[axis + 1..].iter().product();
    Ok((outer, shape[axis], inner))
}

/// Right-aligned one-sided broadcast of `b` onto `a`: each dimension of `b`
/// must equal the aligned dimension of `a` or be 1.
fn broadcast_map(op: &'static str, a: &[usize], b: &[usize]) -> Result<BroadcastMap> {
    if a == b {
        return Ok(None);
    }
    let mismatch = || TensorError::ShapeMismatch {
        op,
        left: a.to_vec(),
        right: b.to_vec(),
    };
    if b.len() > a.len() {
        // Allow leading unit dims on b, e.g. [1, d] onto [d].
        if b[..b.len() - a.len()].iter().any(|&d| d != 1) {
            return Err(mismatch());
        }
        return broadcast_map(op, a, &b[b.len() - a.len()..]);
    }
    let lead = a.len() - b.len();
    let mut strides = vec![0usize; a.len()];
    let mut stride = 1;
    for i in (0..a.len()).rev() {
        if i < lead {
            continue;
        }
        let bd = b[i - lead];
        if bd == a[i] {
            strides[i] = stride;
        } else if bd != 1 {
            return Err(mismatch());
        }
        stride *= bd;
    }
    let n: usize = a.iter().product();
    let mut map = Vec::with_capacity(n);
    let mut idx = vec![0usize; a.len()];
    for _ in 0..n {
        map.push(idx.iter().zip(&strides).map(|(i, s)| i * s).sum());
        for d in (0..a.len()).rev() {
            idx[d] += 1;
            if idx[d] < a[d] {
                break;
            }
            idx[d] = 0;
        }
    }
    Ok(Some(map))
}

fn require_rank2(op: &'static str, shape: &[usize]) -> Result<(usize, usize)> {
    match shape {
        [r, c] => Ok((*r, *c)),
        _ => Err(TensorError::InvalidArgument {
            op,
            msg: format!("expected a matrix, got shape {shape:?}"),
        }),
    }
}

impl<T: Scalar> Graph<T> {
    /// Matrix product of `[m, k]` and `[k, n]`.
    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        let mismatch = || TensorError::ShapeMismatch {
            op: "matmul",
            left: sa.clone(),
            right: sb.clone(),
        };
        let ((m, k), (k2, n)) = match (sa.as_slice(), sb.as_slice()) {
            ([m, k], [k2, n]) => ((*m, *k), (*k2, *n)),
            _ => return Err(mismatch()),
        };
        if k != k2 {
            return Err(mismatch());
        }
        let av = self.values(a);
        let bv = self.values(b);
        let mut out = vec![T::zero(); m * n];
        for r in 0..m {
            let dst = &mut out[r * n..(r + 1) * n];
            for p in 0..k {
                let x = av[r * k + p];
                if x == T::zero() {
                    continue;
                }
                let row = &bv[p * n..(p + 1) * n];
                for (d, &y) in dst.iter_mut().zip(row) {
                    *d = *d + x * y;
                }
            }
        }
        Ok(self.push(vec![m, n], out, Op::MatMul { a, b, m, k, n }))
    }

    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let (rows, cols) = require_rank2("transpose", self.shape(x))?;
        let xv = self.values(x);
        let mut out = vec![T::zero(); rows * cols];
        for r in 0..rows {
            for c in 0..cols {
                out[c * rows + r] = xv[r * cols + c];
            }
        }
        Ok(self.push(vec![cols, rows], out, Op::Transpose { x, rows, cols }))
    }

    /// `a + b`, with `b` broadcast onto `a`'s shape.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map("add", self.shape(a), self.shape(b))?;
        let av = self.values(a);
        let bv = self.values(b);
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x + bv[bidx(&map, i)])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Add { a, b, map }))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let nb = self.neg(b);
        self.add(a, nb)
    }

    /// Elementwise `a * b`, with `b` broadcast onto `a`'s shape.
    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let map = broadcast_map("mul", self.shape(a), self.shape(b))?;
        let av = self.values(a);
        let bv = self.values(b);
        let out = av
            .iter()
            .enumerate()
            .map(|(i, &x)| x * bv[bidx(&map, i)])
            .collect();
        let shape = self.shape(a).to_vec();
        Ok(self.push(shape, out, Op::Mul { a, b, map }))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let f = T::from_f64(factor);
        let out = self.values(x).iter().map(|&v| v * f).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Scale { x, factor: f })
    }

    pub fn neg(&mut self, x: Var) -> Var {
        self.scale(x, -1.0)
    }

    /// Concatenates along `axis`; all other dimensions must agree.
    pub fn concat(&mut self, inputs: &[Var], axis: usize) -> Result<Var> {
        let first = inputs.first().ok_or(TensorError::InvalidArgument {
            op: "concat",
            msg: "no inputs".into(),
        })?;
        let base = self.shape(*first).to_vec();
        let (outer, _, inner) = split_axis("concat", &base, axis)?;
        let mut lens = Vec::with_capacity(inputs.len());
        for v in inputs {
            let s = self.shape(*v);
            let compatible = s.len() == base.len()
                && s.iter()
                    .zip(&base)
                    .enumerate()
                    .all(|(d, (x, y))| d == axis || x == y);
            if !compatible {
                return Err(TensorError::ShapeMismatch {
                    op: "concat",
                    left: base.clone(),
                    right: s.to_vec(),
                });
            }
            lens.push(s[axis]);
        }
        let total: usize = lens.iter().sum();
        let mut out = Vec::with_capacity(outer * total * inner);
        for o in 0..outer {
            for (v, &len) in inputs.iter().zip(&lens) {
                let vals = self.values(*v);
                out.extend_from_slice(&vals[o * len * inner..(o + 1) * len * inner]);
            }
        }
        let mut shape = base;
        shape[axis] = total;
        Ok(self.push(
            shape,
            out,
            Op::Concat {
                inputs: inputs.to_vec(),
                lens,
                outer,
                inner,
            },
        ))
    }

    /// Slice `[start, start + len)` along `axis`.
    pub fn narrow(&mut self, x: Var, axis: usize, start: usize, len: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len_in, inner) = split_axis("narrow", &shape, axis)?;
        if start + len > len_in {
            return Err(TensorError::InvalidArgument {
                op: "narrow",
                msg: format!("range {start}..{} exceeds axis length {len_in}", start + len),
            });
        }
        let xv = self.values(x);
        let mut out = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let s = (o * len_in + start) * inner;
            out.extend_from_slice(&xv[s..s + len * inner]);
        }
        let mut new_shape = shape;
        new_shape[axis] = len;
        Ok(self.push(
            new_shape,
            out,
            Op::Narrow {
                x,
                outer,
                len_in,
                start,
                len,
                inner,
            },
        ))
    }

    pub fn reshape(&mut self, x: Var, shape: impl Into<Vec<usize>>) -> Result<Var> {
        let shape = shape.into();
        let n: usize = shape.iter().product();
        if n != self.value(x).numel() {
            return Err(TensorError::ShapeMismatch {
                op: "reshape",
                left: self.shape(x).to_vec(),
                right: shape,
            });
        }
        let out = self.values(x).to_vec();
        Ok(self.push(shape, out, Op::Reshape { x }))
    }

    /// Sum of all entries, as a scalar.
    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.values(x).iter().fold(T::zero(), |a, &b| a + b);
        self.push(vec![], vec![s], Op::Sum { x })
    }

    /// Mean of all entries, as a scalar.
    pub fn mean(&mut self, x: Var) -> Var {
        let vals = self.values(x);
        let n = T::from_f64(vals.len().max(1) as f64);
        let s = vals.iter().fold(T::zero(), |a, &b| a + b) / n;
        self.push(vec![], vec![s], Op::Mean { x })
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let out = self.values(x).iter().map(|&v| sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Sigmoid { x })
    }

    /// `x · σ(x)`.
    pub fn silu(&mut self, x: Var) -> Var {
        let out = self.values(x).iter().map(|&v| v * sigmoid(v)).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Silu { x })
    }

    /// Natural log with the argument clamped below at [`crate::EPS`].
    pub fn log(&mut self, x: Var) -> Var {
        let eps = T::from_f64(crate::EPS);
        let out = self.values(x).iter().map(|&v| v.max(eps).ln()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Log { x })
    }

    pub fn exp(&mut self, x: Var) -> Var {
        let out = self.values(x).iter().map(|&v| v.exp()).collect();
        let shape = self.shape(x).to_vec();
        self.push(shape, out, Op::Exp { x })
    }

    /// Max-shifted softmax along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("softmax", &shape, axis)?;
        let xv = self.values(x);
        let mut out = vec![T::zero(); xv.len()];
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let max = (0..len).fold(T::neg_infinity(), |m, j| m.max(xv[idx(j)]));
                let mut total = T::zero();
                for j in 0..len {
                    let e = (xv[idx(j)] - max).exp();
                    out[idx(j)] = e;
                    total = total + e;
                }
                for j in 0..len {
                    out[idx(j)] = out[idx(j)] / total;
                }
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
        ))
    }

    /// Normalizes to zero mean and unit variance along `axis` (no affine part).
    pub fn layer_norm(&mut self, x: Var, axis: usize, eps: f64) -> Result<Var> {
        let shape = self.shape(x).to_vec();
        let (outer, len, inner) = split_axis("layer_norm", &shape, axis)?;
        let eps = T::from_f64(eps);
        let n = T::from_f64(len as f64);
        let xv = self.values(x);
        let mut out = vec![T::zero(); xv.len()];
        let mut inv_std = Vec::with_capacity(outer * inner);
        for o in 0..outer {
            for i in 0..inner {
                let idx = |j: usize| (o * len + j) * inner + i;
                let mean = (0..len).fold(T::zero(), |a, j| a + xv[idx(j)]) / n;
                let var = (0..len).fold(T::zero(), |a, j| {
                    let d = xv[idx(j)] - mean;
                    a + d * d
                }) / n;
                let r = T::one() / (var + eps).sqrt();
                for j in 0..len {
                    out[idx(j)] = (xv[idx(j)] - mean) * r;
                }
                inv_std.push(r);
            }
        }
        Ok(self.push(
            shape,
            out,
            Op::LayerNorm {
                x,
                outer,
                len,
                inner,
                inv_std,
            },
        ))
    }

    /// Rows of a `[rows, dim]` table selected by `indices`.
    pub fn embedding(&mut self, table: Var, indices: &[usize]) -> Result<Var> {
        let (rows, dim) = require_rank2("embedding", self.shape(table))?;
        if let Some(&bad) = indices.iter().find(|&&i| i >= rows) {
            return Err(TensorError::InvalidArgument {
                op: "embedding",
                msg: format!("index {bad} out of range for {rows} rows"),
            });
        }
        let tv = self.values(table);
        let mut out = Vec::with_capacity(indices.len() * dim);
        for &i in indices {
            out.extend_from_slice(&tv[i * dim..(i + 1) * dim]);
        }
        Ok(self.push(
            vec![indices.len(), dim],
            out,
            Op::Embedding {
                table,
                indices: indices.to_vec(),
                dim,
            },
        ))
    }

    /// Inverted dropout: in training, zeroes each entry with probability `p`
    /// and scales survivors by `1/(1-p)`; otherwise the identity.
    ///
    /// Consumes one uniform draw per entry when `train` is set and `p > 0`.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R, train: bool) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(TensorError::InvalidArgument {
                op: "dropout",
                msg: format!("probability {p} outside [0, 1)"),
            });
        }
        if !train || p == 0.0 {
            return Ok(x);
        }
        let keep = T::from_f64(1.0 / (1.0 - p));
        let n = self.value(x).numel();
        let mask: Vec<T> = (0..n)
            .map(|_| if rng.random::<f64>() < p { T::zero() } else { keep })
            .collect();
        let out = self
            .values(x)
            .iter()
            .zip(&mask)
            .map(|(&v, &m)| v * m)
            .collect();
        let shape = self.shape(x).to_vec();
        Ok(self.push(shape, out, Op::Dropout { x, mask }))
    }

    /// `Σ p·ln(p/q)` over all entries, with `0·ln(0/q) = 0` and `q` clamped
    /// below at [`crate::EPS`].
    pub fn kl_div(&mut self, p: Var, q: Var) -> Result<Var> {
        if self.shape(p) != self.shape(q) {
            return Err(TensorError::ShapeMismatch {
                op: "kl_div",
                left: self.shape(p).to_vec(),
                right: self.shape(q).to_vec(),
            });
        }
        let eps = T::from_f64(crate::EPS);
        let s = self
            .values(p)
            .iter()
            .zip(self.values(q))
            .fold(T::zero(), |acc, (&pi, &qi)| {
                if pi > T::zero() {
                    acc + pi * (pi.ln() - qi.max(eps).ln())
                } else {
                    acc
                }
            });
        Ok(self.push(vec![], vec![s], Op::KlDiv { p, q }))
    }

    /// Cosine similarity of every row of `x: [rows, dim]` with every row of
    /// `a: [cols, dim]`, giving `[rows, cols]`. The denominator is clamped
    /// below at [`crate::EPS`]; a zero-norm row scores 0 and is recorded in
    /// [`Graph::warnings`].
    pub fn row_cosine(&mut self, x: Var, a: Var) -> Result<Var> {
        let (rows, dim) = require_rank2("row_cosine", self.shape(x))?;
        let (cols, dim_a) = require_rank2("row_cosine", self.shape(a))?;
        if dim != dim_a {
            return Err(TensorError::ShapeMismatch {
                op: "row_cosine",
                left: self.shape(x).to_vec(),
                right: self.shape(a).to_vec(),
            });
        }
        let eps = T::from_f64(crate::EPS);
        let xv = self.values(x);
        let av = self.values(a);
        let norm = |row: &[T]| row.iter().fold(T::zero(), |s, &v| s + v * v).sqrt();
        let x_norm: Vec<T> = xv.chunks(dim).map(norm).collect();
        let a_norm: Vec<T> = av.chunks(dim).map(norm).collect();
        let mut out = Vec::with_capacity(rows * cols);
        for r in 0..rows {
            let xr = &xv[r * dim..(r + 1) * dim];
            for c in 0..cols {
                let ar = &av[c * dim..(c + 1) * dim];
                let dot = xr.iter().zip(ar).fold(T::zero(), |s, (&p, &q)| s + p * q);
                out.push(dot / (x_norm[r] * a_norm[c]).max(eps));
            }
        }
        let zero_rows = x_norm.iter().filter(|&&n| n == T::zero()).count();
        let zero_anchors = a_norm.iter().filter(|&&n| n == T::zero()).count();
        if zero_rows + zero_anchors > 0 {
            self.warn(format!(
                "row_cosine: {zero_rows} zero-norm row(s) and {zero_anchors} zero-norm reference(s) scored as 0"
            ));
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::RowCosine {
                x,
                a,
                rows,
                cols,
                dim,
                x_norm,
                a_norm,
            },
        ))
    }

    /// Cosine similarity of two vectors of equal length, as a scalar.
    pub fn cosine_sim(&mut self, a: Var, b: Var) -> Result<Var> {
        let la = self.value(a).numel();
        let lb = self.value(b).numel();
        if la != lb || la == 0 {
            return Err(TensorError::ShapeMismatch {
                op: "cosine_sim",
                left: self.shape(a).to_vec(),
                right: self.shape(b).to_vec(),
            });
        }
        let ra = self.reshape(a, [1, la])?;
        let rb = self.reshape(b, [1, lb])?;
        let s = self.row_cosine(ra, rb)?;
        self.reshape(s, Vec::<usize>::new())
    }

    /// Picks `x[r, indices[r]]` from each row of a matrix, giving `[rows]`.
    pub fn gather(&mut self, x: Var, indices: &[usize]) -> Result<Var> {
        let (rows, cols) = require_rank2("gather", self.shape(x))?;
        if indices.len() != rows {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("{} indices for {rows} rows", indices.len()),
            });
        }
        if let Some(&bad) = indices.iter().find(|&&c| c >= cols) {
            return Err(TensorError::InvalidArgument {
                op: "gather",
                msg: format!("index {bad} out of range for {cols} columns"),
            });
        }
        let xv = self.values(x);
        let out = indices
            .iter()
            .enumerate()
            .map(|(r, &c)| xv[r * cols + c])
            .collect();
        Ok(self.push(
            vec![rows],
            out,
            Op::Gather {
                x,
                indices: indices.to_vec(),
                cols,
            },
        ))
    }

    /// Row `t` of the output is row `t + offset` of `x`, or zeros when that
    /// row lies outside the matrix.
    pub fn shift_rows(&mut self, x: Var, offset: isize) -> Result<Var> {
        let (rows, cols) = require_rank2("shift_rows", self.shape(x))?;
        let xv = self.values(x);
        let mut out = vec![T::zero(); rows * cols];
        for t in 0..rows {
            let src = t as isize + offset;
            if src >= 0 && (src as usize) < rows {
                let s = src as usize;
                out[t * cols..(t + 1) * cols].copy_from_slice(&xv[s * cols..(s + 1) * cols]);
            }
        }
        Ok(self.push(
            vec![rows, cols],
            out,
            Op::ShiftRows {
                x,
                offset,
                rows,
                cols,
            },
        ))
    }
}

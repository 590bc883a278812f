//! Define-by-run reverse-mode differentiation.
//!
//! Every value on a [`Tape`] is a row-major matrix. Rank-1 tensors enter as a
//! single row, a scalar is `1×1`. Parameters are borrowed rather than copied so
//! a forward pass over large projection matrices costs no allocation.

use std::borrow::Cow;

use crate::error::{DiffError, Result};
use crate::real::Real;
use crate::tensor::{gemm, Tensor};

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

const GELU_COEF: f64 = 0.044715;
const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;

/// Smallest row norm accepted by [`Tape::cosine_rows`].
pub const MIN_NORM: f64 = 1e-12;

enum Op<T> {
    Leaf,
    MatMul { a: Var, b: Var, b_t: bool },
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    AddRow { x: Var, row: Var },
    ScaleRows { x: Var, w: Var },
    Relu(Var),
    Gelu(Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    SliceCols { x: Var, start: usize },
    MeanAxis { x: Var, axis: usize },
    Sum(Var),
    GatherRows { x: Var, index: Vec<usize> },
    Softmax { x: Var, axis: usize, tau: T },
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<T>,
        rstd: Vec<T>,
    },
    CosineRows {
        a: Var,
        b: Var,
        norm_a: Vec<T>,
        norm_b: Vec<T>,
    },
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<T>,
    },
    NormalizedAdjacency { a: Var, inv_sqrt_deg: Vec<T> },
    RowNormalize { x: Var, sums: Vec<T> },
}

struct Node<'p, T: Real> {
    rows: usize,
    cols: usize,
    data: Cow<'p, [T]>,
    requires_grad: bool,
    op: Op<T>,
}

/// Records operations for one forward pass; `'p` is the lifetime of borrowed parameters.
pub struct Tape<'p, T: Real = f32> {
    nodes: Vec<Node<'p, T>>,
    grads: Vec<Option<Vec<T>>>,
    backward_done: bool,
}

impl<T: Real> Default for Tape<'_, T> {
    fn default() -> Self {
        Self::new()
    }
}

fn gelu_value<T: Real>(v: T) -> T {
    let half = T::lit(0.5);
    let inner = T::lit(SQRT_2_OVER_PI) * (v + T::lit(GELU_COEF) * v * v * v);
    half * v * (T::one() + inner.tanh())
}

fn gelu_slope<T: Real>(v: T) -> T {
    let half = T::lit(0.5);
    let k = T::lit(SQRT_2_OVER_PI);
    let c = T::lit(GELU_COEF);
    let t = (k * (v + c * v * v * v)).tanh();
    half * (T::one() + t) + half * v * (T::one() - t * t) * k * (T::one() + T::lit(3.0) * c * v * v)
}

impl<'p, T: Real> Tape<'p, T> {
    pub fn new() -> Self {
        Tape {
            nodes: Vec::new(),
            grads: Vec::new(),
            backward_done: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, rows: usize, cols: usize, data: Cow<'p, [T]>, requires_grad: bool, op: Op<T>) -> Var {
        debug_assert_eq!(rows * cols, data.len());
        self.nodes.push(Node {
            rows,
            cols,
            data,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn owned(&mut self, rows: usize, cols: usize, data: Vec<T>, inputs: &[Var], op: Op<T>) -> Var {
        let rg = inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.push(rows, cols, Cow::Owned(data), rg, op)
    }

    /// Records an owned tensor; it participates in differentiation iff `requires_grad` is set.
    pub fn leaf(&mut self, t: Tensor<T>) -> Var {
        let (r, c) = t.matrix_dims();
        let rg = t.requires_grad();
        self.push(r, c, Cow::Owned(t.into_data()), rg, Op::Leaf)
    }

    /// Records a non-differentiable input.
    pub fn constant(&mut self, t: Tensor<T>) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, Cow::Owned(t.into_data()), false, Op::Leaf)
    }

    /// Records a borrowed tensor without copying its data.
    pub fn param(&mut self, t: &'p Tensor<T>) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, Cow::Borrowed(t.data()), t.requires_grad(), Op::Leaf)
    }

    /// Borrowed non-differentiable input.
    pub fn borrowed_constant(&mut self, t: &'p Tensor<T>) -> Var {
        let (r, c) = t.matrix_dims();
        self.push(r, c, Cow::Borrowed(t.data()), false, Op::Leaf)
    }

    pub fn dims(&self, v: Var) -> (usize, usize) {
        let n = &self.nodes[v.0];
        (n.rows, n.cols)
    }

    pub fn data(&self, v: Var) -> &[T] {
        &self.nodes[v.0].data
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn to_tensor(&self, v: Var) -> Tensor<T> {
        let n = &self.nodes[v.0];
        Tensor::new(vec![n.rows, n.cols], n.data.to_vec()).expect("tape node shape")
    }

    pub fn scalar_value(&self, v: Var) -> Result<T> {
        match self.dims(v) {
            (1, 1) => Ok(self.data(v)[0]),
            (r, c) => Err(DiffError::shape("scalar_value", &[r, c], &[1, 1])),
        }
    }

    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Moves the gradient of `v` out of the tape.
    pub fn take_grad(&mut self, v: Var) -> Option<Vec<T>> {
        self.grads[v.0].take()
    }

    fn shape_of(&self, v: Var) -> [usize; 2] {
        let (r, c) = self.dims(v);
        [r, c]
    }

    fn same_shape(&self, op: &'static str, a: Var, b: Var) -> Result<()> {
        if self.dims(a) != self.dims(b) {
            return Err(DiffError::shape(op, &self.shape_of(a), &self.shape_of(b)));
        }
        Ok(())
    }

    // ── linear algebra ───────────────────────────────────────────────

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (k2, n) = self.dims(b);
        if k != k2 {
            return Err(DiffError::shape("matmul", &[m, k], &[k2, n]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), false, &mut out, T::zero());
        Ok(self.owned(m, n, out, &[a, b], Op::MatMul { a, b, b_t: false }))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.dims(a);
        let (n, k2) = self.dims(b);
        if k != k2 {
            return Err(DiffError::shape("matmul_nt", &[m, k], &[n, k2]));
        }
        let mut out = vec![T::zero(); m * n];
        gemm(m, k, n, self.data(a), false, self.data(b), true, &mut out, T::zero());
        Ok(self.owned(m, n, out, &[a, b], Op::MatMul { a, b, b_t: true }))
    }

    pub fn transpose(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = src[i * c + j];
            }
        }
        self.owned(c, r, out, &[x], Op::Transpose(x))
    }

    pub fn reshape(&mut self, x: Var, rows: usize, cols: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if r * c != rows * cols {
            return Err(DiffError::shape("reshape", &[r, c], &[rows, cols]));
        }
        let data = self.data(x).to_vec();
        Ok(self.owned(rows, cols, data, &[x], Op::Reshape(x)))
    }

    // ── elementwise ──────────────────────────────────────────────────

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("add", a, b)?;
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect();
        Ok(self.owned(r, c, out, &[a, b], Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape("mul", a, b)?;
        let (r, c) = self.dims(a);
        let out = self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect();
        Ok(self.owned(r, c, out, &[a, b], Op::Mul(a, b)))
    }

    pub fn scale(&mut self, x: Var, s: T) -> Var {
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().map(|&v| v * s).collect();
        self.owned(r, c, out, &[x], Op::Scale(x, s))
    }

    /// Adds a `1×c` row to every row of `x`.
    pub fn add_row(&mut self, x: Var, row: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        if self.dims(row) != (1, c) {
            return Err(DiffError::shape("add_row", &[r, c], &self.shape_of(row)));
        }
        let bias = self.data(row);
        let mut out = self.data(x).to_vec();
        for chunk in out.chunks_exact_mut(c) {
            chunk.iter_mut().zip(bias).for_each(|(o, &b)| *o += b);
        }
        Ok(self.owned(r, c, out, &[x, row], Op::AddRow { x, row }))
    }

    /// Multiplies row `i` of `x` by `w[i]`; `w` is `r×1` or `1×r`.
    pub fn scale_rows(&mut self, x: Var, w: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let (wr, wc) = self.dims(w);
        if wr * wc != r || (wr != 1 && wc != 1) {
            return Err(DiffError::shape("scale_rows", &[r, c], &[wr, wc]));
        }
        let weights = self.data(w);
        let mut out = self.data(x).to_vec();
        for (chunk, &wi) in out.chunks_exact_mut(c).zip(weights) {
            chunk.iter_mut().for_each(|o| *o *= wi);
        }
        Ok(self.owned(r, c, out, &[x, w], Op::ScaleRows { x, w }))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().map(|&v| v.max(T::zero())).collect();
        self.owned(r, c, out, &[x], Op::Relu(x))
    }

    /// GELU, tanh approximation with coefficient 0.044715.
    pub fn gelu(&mut self, x: Var) -> Var {
        let (r, c) = self.dims(x);
        let out = self.data(x).iter().map(|&v| gelu_value(v)).collect();
        self.owned(r, c, out, &[x], Op::Gelu(x))
    }

    // ── structural ───────────────────────────────────────────────────

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::domain("concat_rows", "no inputs"));
        };
        let c = self.dims(first).1;
        let mut out = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pc != c {
                return Err(DiffError::shape("concat_rows", &self.shape_of(first), &[pr, pc]));
            }
            out.extend_from_slice(self.data(p));
            rows += pr;
        }
        Ok(self.owned(rows, c, out, parts, Op::ConcatRows(parts.to_vec())))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let Some(&first) = parts.first() else {
            return Err(DiffError::domain("concat_cols", "no inputs"));
        };
        let r = self.dims(first).0;
        let mut cols = 0;
        for &p in parts {
            let (pr, pc) = self.dims(p);
            if pr != r {
                return Err(DiffError::shape("concat_cols", &self.shape_of(first), &[pr, pc]));
            }
            cols += pc;
        }
        let mut out = vec![T::zero(); r * cols];
        let mut offset = 0;
        for &p in parts {
            let pc = self.dims(p).1;
            for (i, src) in self.data(p).chunks_exact(pc).enumerate() {
                out[i * cols + offset..i * cols + offset + pc].copy_from_slice(src);
            }
            offset += pc;
        }
        Ok(self.owned(r, cols, out, parts, Op::ConcatCols(parts.to_vec())))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        if len == 0 || start + len > c {
            return Err(DiffError::Index {
                op: "slice_cols",
                index: start + len,
                bound: c + 1,
            });
        }
        let out = self
            .data(x)
            .chunks_exact(c)
            .flat_map(|row| row[start..start + len].iter().copied())
            .collect();
        Ok(self.owned(r, len, out, &[x], Op::SliceCols { x, start }))
    }

    /// Mean over `axis` (0: over rows → `1×c`, 1: over columns → `r×1`).
    pub fn mean_axis(&mut self, x: Var, axis: usize) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let (rows, cols, out) = match axis {
            0 => {
                let mut acc = vec![T::zero(); c];
                for row in src.chunks_exact(c) {
                    acc.iter_mut().zip(row).for_each(|(a, &v)| *a += v);
                }
                let n = T::from_usize_lossy(r);
                acc.iter_mut().for_each(|a| *a /= n);
                (1, c, acc)
            }
            1 => {
                let n = T::from_usize_lossy(c);
                let acc = src.chunks_exact(c).map(|row| row.iter().copied().sum::<T>() / n).collect();
                (r, 1, acc)
            }
            _ => {
                return Err(DiffError::Index {
                    op: "mean_axis",
                    index: axis,
                    bound: 2,
                })
            }
        };
        Ok(self.owned(rows, cols, out, &[x], Op::MeanAxis { x, axis }))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.data(x).iter().copied().sum();
        self.owned(1, 1, vec![s], &[x], Op::Sum(x))
    }

    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Result<Var> {
        let (r, c) = self.dims(x);
        if let Some(&bad) = index.iter().find(|&&i| i >= r) {
            return Err(DiffError::Index {
                op: "gather_rows",
                index: bad,
                bound: r,
            });
        }
        if index.is_empty() {
            return Err(DiffError::domain("gather_rows", "empty index"));
        }
        let src = self.data(x);
        let out = index.iter().flat_map(|&i| src[i * c..(i + 1) * c].iter().copied()).collect();
        Ok(self.owned(
            index.len(),
            c,
            out,
            &[x],
            Op::GatherRows {
                x,
                index: index.to_vec(),
            },
        ))
    }

    // ── normalizations ───────────────────────────────────────────────

    /// `exp((x - max) / tau)` normalized along `axis`.
    pub fn softmax(&mut self, x: Var, axis: usize, tau: T) -> Result<Var> {
        if !(tau > T::zero()) || !tau.is_finite() {
            return Err(DiffError::domain("softmax", format!("temperature must be > 0, got {tau}")));
        }
        let (r, c) = self.dims(x);
        let lanes = Lanes::new(r, c, axis)?;
        let src = self.data(x);
        let mut out = vec![T::zero(); r * c];
        for l in 0..lanes.count {
            let max = (0..lanes.len)
                .map(|t| src[lanes.at(l, t)])
                .fold(T::neg_infinity(), T::max);
            let mut total = T::zero();
            for t in 0..lanes.len {
                let e = ((src[lanes.at(l, t)] - max) / tau).exp();
                out[lanes.at(l, t)] = e;
                total += e;
            }
            for t in 0..lanes.len {
                out[lanes.at(l, t)] /= total;
            }
        }
        Ok(self.owned(r, c, out, &[x], Op::Softmax { x, axis, tau }))
    }

    /// Per-row standardization then affine `gain`/`bias` (`1×c` each).
    pub fn layernorm(&mut self, x: Var, gain: Var, bias: Var, eps: T) -> Result<Var> {
        let (r, c) = self.dims(x);
        for p in [gain, bias] {
            if self.dims(p) != (1, c) {
                return Err(DiffError::shape("layernorm", &[r, c], &self.shape_of(p)));
            }
        }
        if !(eps > T::zero()) {
            return Err(DiffError::domain("layernorm", format!("eps must be > 0, got {eps}")));
        }
        let src = self.data(x);
        let g = self.data(gain);
        let b = self.data(bias);
        let n = T::from_usize_lossy(c);
        let mut xhat = vec![T::zero(); r * c];
        let mut rstd = vec![T::zero(); r];
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let row = &src[i * c..(i + 1) * c];
            let mean = row.iter().copied().sum::<T>() / n;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() / n;
            let rs = T::one() / (var + eps).sqrt();
            rstd[i] = rs;
            for j in 0..c {
                let h = (row[j] - mean) * rs;
                xhat[i * c + j] = h;
                out[i * c + j] = h * g[j] + b[j];
            }
        }
        Ok(self.owned(
            r,
            c,
            out,
            &[x, gain, bias],
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
        ))
    }

    /// Pairwise cosine similarity between the rows of `a` (`n×d`) and `b` (`m×d`).
    pub fn cosine_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (n, d) = self.dims(a);
        let (m, d2) = self.dims(b);
        if d != d2 {
            return Err(DiffError::shape("cosine_rows", &[n, d], &[m, d2]));
        }
        let norm_a = row_norms(self.data(a), d, "lhs")?;
        let norm_b = row_norms(self.data(b), d, "rhs")?;
        let mut out = vec![T::zero(); n * m];
        gemm(n, d, m, self.data(a), false, self.data(b), true, &mut out, T::zero());
        for i in 0..n {
            for j in 0..m {
                let v = out[i * m + j] / (norm_a[i] * norm_b[j]);
                out[i * m + j] = v.max(-T::one()).min(T::one());
            }
        }
        Ok(self.owned(
            n,
            m,
            out,
            &[a, b],
            Op::CosineRows {
                a,
                b,
                norm_a,
                norm_b,
            },
        ))
    }

    /// Mean negative log-likelihood of `labels` under row-wise softmax of `logits`.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let (n, c) = self.dims(logits);
        if labels.len() != n {
            return Err(DiffError::shape("cross_entropy", &[n, c], &[labels.len()]));
        }
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(DiffError::Index {
                op: "cross_entropy",
                index: bad,
                bound: c,
            });
        }
        let src = self.data(logits);
        let mut probs = vec![T::zero(); n * c];
        let mut total = T::zero();
        for (i, &y) in labels.iter().enumerate() {
            let row = &src[i * c..(i + 1) * c];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let z: T = row.iter().map(|&v| (v - max).exp()).sum();
            let lse = max + z.ln();
            total += lse - row[y];
            for j in 0..c {
                probs[i * c + j] = (row[j] - lse).exp();
            }
        }
        let mean = total / T::from_usize_lossy(n);
        Ok(self.owned(
            1,
            1,
            vec![mean],
            &[logits],
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
        ))
    }

    /// `D̃^{-1/2} (A + I) D̃^{-1/2}` where `D̃` holds the row sums of `A + I`.
    pub fn normalized_adjacency(&mut self, a: Var) -> Result<Var> {
        let (n, n2) = self.dims(a);
        if n != n2 {
            return Err(DiffError::shape("normalized_adjacency", &[n, n2], &[n, n]));
        }
        let src = self.data(a);
        let mut inv_sqrt_deg = Vec::with_capacity(n);
        let mut deg = Vec::with_capacity(n);
        for i in 0..n {
            let d = src[i * n..(i + 1) * n].iter().copied().sum::<T>() + T::one();
            if !(d > T::zero()) || !d.is_finite() {
                return Err(DiffError::domain(
                    "normalized_adjacency",
                    format!("row {i} has non-positive degree {d}"),
                ));
            }
            inv_sqrt_deg.push(T::one() / d.sqrt());
            deg.push(d);
        }
        let mut out = vec![T::zero(); n * n];
        for i in 0..n {
            for j in 0..n {
                let tilde = src[i * n + j] + if i == j { T::one() } else { T::zero() };
                // one rounding of sqrt(d_i·d_j) keeps symmetric cases such as 2×2 exact
                out[i * n + j] = tilde / (deg[i] * deg[j]).sqrt();
            }
        }
        Ok(self.owned(n, n, out, &[a], Op::NormalizedAdjacency { a, inv_sqrt_deg }))
    }

    /// Divides every row by its sum; every row sum must be positive.
    pub fn row_normalize(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.dims(x);
        let src = self.data(x);
        let mut sums = Vec::with_capacity(r);
        let mut out = vec![T::zero(); r * c];
        for i in 0..r {
            let s: T = src[i * c..(i + 1) * c].iter().copied().sum();
            if !(s > T::zero()) {
                return Err(DiffError::domain("row_normalize", format!("row {i} sums to {s}")));
            }
            for j in 0..c {
                out[i * c + j] = src[i * c + j] / s;
            }
            sums.push(s);
        }
        Ok(self.owned(r, c, out, &[x], Op::RowNormalize { x, sums }))
    }

    // ── backward ─────────────────────────────────────────────────────

    /// Propagates d(loss)/d(·) to every value reachable from `loss`.
    ///
    /// A tape supports exactly one backward pass.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(DiffError::Contract("backward already ran on this tape".into()));
        }
        if loss.0 >= self.nodes.len() {
            return Err(DiffError::Contract(format!("loss {loss:?} is not on this tape")));
        }
        let (r, c) = self.dims(loss);
        if (r, c) != (1, 1) {
            return Err(DiffError::Contract(format!("loss must be scalar, got {r}×{c}")));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![T::one()]);
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            propagate(&self.nodes, &mut self.grads, i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }
}

fn row_norms<T: Real>(data: &[T], d: usize, who: &str) -> Result<Vec<T>> {
    let min = T::lit(MIN_NORM);
    data.chunks_exact(d)
        .enumerate()
        .map(|(i, row)| {
            let norm = row.iter().map(|&v| v * v).sum::<T>().sqrt();
            if norm > min && norm.is_finite() {
                Ok(norm)
            } else {
                Err(DiffError::domain(
                    "cosine_rows",
                    format!("row {i} of {who} has norm {norm}"),
                ))
            }
        })
        .collect()
}

struct Lanes {
    count: usize,
    len: usize,
    cols: usize,
    axis: usize,
}

impl Lanes {
    fn new(rows: usize, cols: usize, axis: usize) -> Result<Self> {
        match axis {
            0 => Ok(Lanes {
                count: cols,
                len: rows,
                cols,
                axis,
            }),
            1 => Ok(Lanes {
                count: rows,
                len: cols,
                cols,
                axis,
            }),
            _ => Err(DiffError::Index {
                op: "softmax",
                index: axis,
                bound: 2,
            }),
        }
    }

    #[inline]
    fn at(&self, lane: usize, t: usize) -> usize {
        if self.axis == 1 {
            lane * self.cols + t
        } else {
            t * self.cols + lane
        }
    }
}

fn grad_buf<'g, T: Real>(nodes: &[Node<'_, T>], grads: &'g mut [Option<Vec<T>>], v: Var) -> Option<&'g mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let len = node.rows * node.cols;
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); len]))
}

fn add_into<T: Real>(buf: &mut [T], g: &[T]) {
    buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi);
}

fn propagate<T: Real>(nodes: &[Node<'_, T>], grads: &mut [Option<Vec<T>>], i: usize, g: &[T]) {
    let node = &nodes[i];
    let (rows, cols) = (node.rows, node.cols);
    let val = |v: Var| -> &[T] { &nodes[v.0].data };
    let dims = |v: Var| (nodes[v.0].rows, nodes[v.0].cols);
    match &node.op {
        Op::Leaf => {}
        Op::MatMul { a, b, b_t } => {
            let (m, k) = dims(*a);
            let n = cols;
            if !*b_t {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    gemm(m, n, k, g, false, val(*b), true, ga, T::one());
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    gemm(k, m, n, val(*a), true, g, false, gb, T::one());
                }
            } else {
                if let Some(ga) = grad_buf(nodes, grads, *a) {
                    gemm(m, n, k, g, false, val(*b), false, ga, T::one());
                }
                if let Some(gb) = grad_buf(nodes, grads, *b) {
                    gemm(n, m, k, g, true, val(*a), false, gb, T::one());
                }
            }
        }
        Op::Add(a, b) => {
            for v in [*a, *b] {
                if let Some(buf) = grad_buf(nodes, grads, v) {
                    add_into(buf, g);
                }
            }
        }
        Op::Mul(a, b) => {
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                let other = val(*b);
                buf.iter_mut().zip(g).zip(other).for_each(|((o, &gi), &y)| *o += gi * y);
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                let other = val(*a);
                buf.iter_mut().zip(g).zip(other).for_each(|((o, &gi), &x)| *o += gi * x);
            }
        }
        Op::Scale(x, s) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * *s);
            }
        }
        Op::AddRow { x, row } => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                add_into(buf, g);
            }
            if let Some(buf) = grad_buf(nodes, grads, *row) {
                for grow in g.chunks_exact(cols) {
                    add_into(buf, grow);
                }
            }
        }
        Op::ScaleRows { x, w } => {
            let weights = val(*w);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((brow, grow), &wi) in buf.chunks_exact_mut(cols).zip(g.chunks_exact(cols)).zip(weights) {
                    brow.iter_mut().zip(grow).for_each(|(o, &gi)| *o += gi * wi);
                }
            }
            let xs = val(*x);
            if let Some(buf) = grad_buf(nodes, grads, *w) {
                for (r, o) in buf.iter_mut().enumerate() {
                    *o += g[r * cols..(r + 1) * cols]
                        .iter()
                        .zip(&xs[r * cols..(r + 1) * cols])
                        .map(|(&gi, &xi)| gi * xi)
                        .sum::<T>();
                }
            }
        }
        Op::Relu(x) => {
            let xs = val(*x);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((o, &gi), &xi) in buf.iter_mut().zip(g).zip(xs) {
                    if xi > T::zero() {
                        *o += gi;
                    }
                }
            }
        }
        Op::Gelu(x) => {
            let xs = val(*x);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for ((o, &gi), &v) in buf.iter_mut().zip(g).zip(xs) {
                    *o += gi * gelu_slope(v);
                }
            }
        }
        Op::Transpose(x) => {
            // this node is the transpose: rows×cols here, cols×rows in x
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for r in 0..rows {
                    for c in 0..cols {
                        buf[c * rows + r] += g[r * cols + c];
                    }
                }
            }
        }
        Op::Reshape(x) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                add_into(buf, g);
            }
        }
        Op::ConcatRows(parts) => {
            let mut offset = 0;
            for &p in parts {
                let len = nodes[p.0].data.len();
                if let Some(buf) = grad_buf(nodes, grads, p) {
                    add_into(buf, &g[offset..offset + len]);
                }
                offset += len;
            }
        }
        Op::ConcatCols(parts) => {
            let mut offset = 0;
            for &p in parts {
                let pc = nodes[p.0].cols;
                if let Some(buf) = grad_buf(nodes, grads, p) {
                    for r in 0..rows {
                        add_into(
                            &mut buf[r * pc..(r + 1) * pc],
                            &g[r * cols + offset..r * cols + offset + pc],
                        );
                    }
                }
                offset += pc;
            }
        }
        Op::SliceCols { x, start } => {
            let xc = nodes[x.0].cols;
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for r in 0..rows {
                    add_into(
                        &mut buf[r * xc + start..r * xc + start + cols],
                        &g[r * cols..(r + 1) * cols],
                    );
                }
            }
        }
        Op::MeanAxis { x, axis } => {
            let (xr, xc) = dims(*x);
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                if *axis == 0 {
                    let inv = T::one() / T::from_usize_lossy(xr);
                    for brow in buf.chunks_exact_mut(xc) {
                        brow.iter_mut().zip(g).for_each(|(o, &gi)| *o += gi * inv);
                    }
                } else {
                    let inv = T::one() / T::from_usize_lossy(xc);
                    for (brow, &gi) in buf.chunks_exact_mut(xc).zip(g) {
                        brow.iter_mut().for_each(|o| *o += gi * inv);
                    }
                }
            }
        }
        Op::Sum(x) => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                buf.iter_mut().for_each(|o| *o += g[0]);
            }
        }
        Op::GatherRows { x, index } => {
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for (k, &src) in index.iter().enumerate() {
                    add_into(&mut buf[src * cols..(src + 1) * cols], &g[k * cols..(k + 1) * cols]);
                }
            }
        }
        Op::Softmax { x, axis, tau } => {
            let y = &node.data;
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let lanes = Lanes::new(rows, cols, *axis).expect("validated at forward");
                for l in 0..lanes.count {
                    let dot: T = (0..lanes.len).map(|t| g[lanes.at(l, t)] * y[lanes.at(l, t)]).sum();
                    for t in 0..lanes.len {
                        let at = lanes.at(l, t);
                        buf[at] += y[at] * (g[at] - dot) / *tau;
                    }
                }
            }
        }
        Op::LayerNorm {
            x,
            gain,
            bias,
            xhat,
            rstd,
        } => {
            let gains = val(*gain);
            if let Some(buf) = grad_buf(nodes, grads, *gain) {
                for (grow, hrow) in g.chunks_exact(cols).zip(xhat.chunks_exact(cols)) {
                    buf.iter_mut()
                        .zip(grow.iter().zip(hrow))
                        .for_each(|(o, (&gi, &h))| *o += gi * h);
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *bias) {
                for grow in g.chunks_exact(cols) {
                    add_into(buf, grow);
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                let inv_c = T::one() / T::from_usize_lossy(cols);
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let hrow = &xhat[r * cols..(r + 1) * cols];
                    let mut mean_d = T::zero();
                    let mut mean_dh = T::zero();
                    for j in 0..cols {
                        let d = grow[j] * gains[j];
                        mean_d += d;
                        mean_dh += d * hrow[j];
                    }
                    mean_d *= inv_c;
                    mean_dh *= inv_c;
                    for j in 0..cols {
                        let d = grow[j] * gains[j];
                        buf[r * cols + j] += rstd[r] * (d - mean_d - hrow[j] * mean_dh);
                    }
                }
            }
        }
        Op::CosineRows {
            a,
            b,
            norm_a,
            norm_b,
        } => {
            let cosines = &node.data;
            let d = nodes[a.0].cols;
            let (n, m) = (rows, cols);
            let av = val(*a);
            let bv = val(*b);
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                for i in 0..n {
                    let mut gc = T::zero();
                    for j in 0..m {
                        let gij = g[i * m + j];
                        gc += gij * cosines[i * m + j];
                        let coef = gij / (norm_a[i] * norm_b[j]);
                        for t in 0..d {
                            buf[i * d + t] += coef * bv[j * d + t];
                        }
                    }
                    let coef = gc / (norm_a[i] * norm_a[i]);
                    for t in 0..d {
                        buf[i * d + t] -= coef * av[i * d + t];
                    }
                }
            }
            if let Some(buf) = grad_buf(nodes, grads, *b) {
                for j in 0..m {
                    let mut gc = T::zero();
                    for i in 0..n {
                        let gij = g[i * m + j];
                        gc += gij * cosines[i * m + j];
                        let coef = gij / (norm_a[i] * norm_b[j]);
                        for t in 0..d {
                            buf[j * d + t] += coef * av[i * d + t];
                        }
                    }
                    let coef = gc / (norm_b[j] * norm_b[j]);
                    for t in 0..d {
                        buf[j * d + t] -= coef * bv[j * d + t];
                    }
                }
            }
        }
        Op::CrossEntropy { logits, labels, probs } => {
            let c = nodes[logits.0].cols;
            if let Some(buf) = grad_buf(nodes, grads, *logits) {
                let scale = g[0] / T::from_usize_lossy(labels.len());
                for (r, &y) in labels.iter().enumerate() {
                    for j in 0..c {
                        let target = if j == y { T::one() } else { T::zero() };
                        buf[r * c + j] += scale * (probs[r * c + j] - target);
                    }
                }
            }
        }
        Op::NormalizedAdjacency { a, inv_sqrt_deg } => {
            let n = rows;
            let av = val(*a);
            if let Some(buf) = grad_buf(nodes, grads, *a) {
                let r = inv_sqrt_deg;
                let tilde = |i: usize, j: usize| av[i * n + j] + if i == j { T::one() } else { T::zero() };
                // dL/dr_i collects both the row and the column scaling by r_i.
                let mut d_r = vec![T::zero(); n];
                for i in 0..n {
                    for j in 0..n {
                        let gt = g[i * n + j] * tilde(i, j);
                        d_r[i] += gt * r[j];
                        d_r[j] += gt * r[i];
                    }
                }
                let half = T::lit(0.5);
                for i in 0..n {
                    // r = deg^{-1/2}, so dr/ddeg = -r³/2; deg_i sums row i of Ã.
                    let d_deg = -half * r[i] * r[i] * r[i] * d_r[i];
                    for k in 0..n {
                        buf[i * n + k] += g[i * n + k] * r[i] * r[k] + d_deg;
                    }
                }
            }
        }
        Op::RowNormalize { x, sums } => {
            let y = &node.data;
            if let Some(buf) = grad_buf(nodes, grads, *x) {
                for r in 0..rows {
                    let grow = &g[r * cols..(r + 1) * cols];
                    let yrow = &y[r * cols..(r + 1) * cols];
                    let dot: T = grow.iter().zip(yrow).map(|(&a, &b)| a * b).sum();
                    for j in 0..cols {
                        buf[r * cols + j] += (grow[j] - dot) / sums[r];
                    }
                }
            }
        }
    }
}

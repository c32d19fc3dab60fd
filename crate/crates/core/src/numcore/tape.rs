//! Tape-based reverse-mode differentiation over [`Tensor`] values.
//!
//! Every operation appends a node holding its forward value and enough
//! saved state for its backward rule. Nodes are appended in evaluation
//! order, so walking the tape backwards visits them in reverse topological
//! order. Leaves are either tracked (trainable parameters) or constants;
//! a node is tracked iff one of its inputs is, and gradients are only ever
//! produced for tracked nodes.

use std::sync::atomic::{AtomicUsize, Ordering};

use rand::Rng;
use thiserror::Error;

use super::tensor::{gemm, Tensor};

static NEXT_TAPE_ID: AtomicUsize = AtomicUsize::new(0);

#[derive(Debug, Error, PartialEq)]
pub enum TapeError {
    #[error("variable does not belong to this tape")]
    ForeignVar,
    #[error("loss must be a scalar, got shape {0:?}")]
    NotScalar(Vec<usize>),
    #[error("softmax row {0} is fully masked")]
    FullyMaskedRow(usize),
    #[error("non-finite value produced by {0}")]
    NonFinite(&'static str),
}

/// Handle to a node on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Var {
    tape: usize,
    idx: usize,
}

enum Op {
    Leaf,
    MatMul { a: usize, b: usize, ta: bool, tb: bool },
    Add(usize, usize),
    Sub(usize, usize),
    Mul(usize, usize),
    Scale(usize, f64),
    AddRow { x: usize, bias: usize },
    Gelu(usize),
    Relu(usize),
    Softmax { x: usize, mask: Option<Vec<bool>> },
    LogSoftmax { x: usize, mask: Option<Vec<bool>> },
    LayerNorm { x: usize, gamma: usize, beta: usize, xhat: Vec<f64>, rstd: Vec<f64> },
    SliceCols { x: usize, start: usize },
    ConcatCols(Vec<usize>),
    GatherRows { x: usize, index: Vec<usize> },
    View { x: usize, offset: usize },
    Sum(usize),
    BlockRowDot { x: usize, b: usize, blocks: usize },
}

impl Op {
    fn name(&self) -> &'static str {
        match self {
            Op::Leaf => "leaf",
            Op::MatMul { .. } => "matmul",
            Op::Add(..) => "add",
            Op::Sub(..) => "sub",
            Op::Mul(..) => "mul",
            Op::Scale(..) => "scale",
            Op::AddRow { .. } => "add_row",
            Op::Gelu(_) => "gelu",
            Op::Relu(_) => "relu",
            Op::Softmax { .. } => "softmax_rows",
            Op::LogSoftmax { .. } => "log_softmax_rows",
            Op::LayerNorm { .. } => "layer_norm",
            Op::SliceCols { .. } => "slice_cols",
            Op::ConcatCols(_) => "concat_cols",
            Op::GatherRows { .. } => "gather_rows",
            Op::View { .. } => "view",
            Op::Sum(_) => "sum",
            Op::BlockRowDot { .. } => "block_row_dot",
        }
    }
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

/// Standard normal CDF via `erf`.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn normal_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

/// Exact GELU, `x·Φ(x)`.
pub fn gelu_scalar(x: f64) -> f64 {
    x * normal_cdf(x)
}

/// Recorded computation. See the module docs.
pub struct Tape {
    id: usize,
    nodes: Vec<Node>,
    checked: bool,
    non_finite: Option<&'static str>,
}

impl Default for Tape {
    fn default() -> Self {
        Tape::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: NEXT_TAPE_ID.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
            checked: false,
            non_finite: None,
        }
    }

    /// A tape that validates every forward value and refuses to backpropagate
    /// once a NaN or infinity has been produced.
    pub fn checked() -> Self {
        Tape {
            checked: true,
            ..Tape::new()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// First non-finite op recorded in checked mode.
    pub fn check(&self) -> Result<(), TapeError> {
        match self.non_finite {
            Some(op) => Err(TapeError::NonFinite(op)),
            None => Ok(()),
        }
    }

    pub fn value(&self, v: Var) -> &Tensor {
        assert_eq!(v.tape, self.id, "variable from another tape");
        &self.nodes[v.idx].value
    }

    pub fn is_tracked(&self, v: Var) -> bool {
        self.nodes[v.idx].tracked
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        if self.checked && self.non_finite.is_none() && !value.all_finite() {
            self.non_finite = Some(op.name());
        }
        self.nodes.push(Node { value, op, tracked });
        Var {
            tape: self.id,
            idx: self.nodes.len() - 1,
        }
    }

    fn idx(&self, v: Var) -> usize {
        assert_eq!(v.tape, self.id, "variable from another tape");
        v.idx
    }

    fn val(&self, idx: usize) -> &Tensor {
        &self.nodes[idx].value
    }

    fn tracked(&self, idxs: &[usize]) -> bool {
        idxs.iter().any(|&i| self.nodes[i].tracked)
    }

    /// Trainable leaf: gradients are produced for it.
    pub fn param(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, true)
    }

    /// Frozen leaf: no gradient is ever produced for it.
    pub fn constant(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf, false)
    }

    pub fn leaf(&mut self, t: Tensor, trainable: bool) -> Var {
        self.push(t, Op::Leaf, trainable)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_t(a, b, false, false)
    }

    /// `op(a)·op(b)` where `op` transposes when the matching flag is set.
    pub fn matmul_t(&mut self, a: Var, b: Var, ta: bool, tb: bool) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (self.val(ai), self.val(bi));
        assert!(av.is_matrix() && bv.is_matrix(), "matmul needs matrices");
        let (m, k) = if ta {
            (av.shape()[1], av.shape()[0])
        } else {
            (av.shape()[0], av.shape()[1])
        };
        let (k2, n) = if tb {
            (bv.shape()[1], bv.shape()[0])
        } else {
            (bv.shape()[0], bv.shape()[1])
        };
        assert_eq!(k, k2, "matmul inner dimensions differ");
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, av.data(), ta, bv.data(), tb, 0.0, &mut out);
        let tracked = self.tracked(&[ai, bi]);
        let value = Tensor::new(vec![m, n], out).expect("matmul shape");
        self.push(value, Op::MatMul { a: ai, b: bi, ta, tb }, tracked)
    }

    fn zip_with(&mut self, a: Var, b: Var, f: impl Fn(f64, f64) -> f64, op: fn(usize, usize) -> Op) -> Var {
        let (ai, bi) = (self.idx(a), self.idx(b));
        let (av, bv) = (self.val(ai), self.val(bi));
        assert_eq!(av.shape(), bv.shape(), "elementwise shapes differ");
        let data = av.data().iter().zip(bv.data()).map(|(&x, &y)| f(x, y)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(&[ai, bi]);
        self.push(value, op(ai, bi), tracked)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x + y, Op::Add)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x - y, Op::Sub)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.zip_with(a, b, |x, y| x * y, Op::Mul)
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let ai = self.idx(a);
        let value = self.val(ai).scaled(factor);
        let tracked = self.tracked(&[ai]);
        self.push(value, Op::Scale(ai, factor), tracked)
    }

    /// Adds `bias` (one value per column) to every row of `x`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let (xi, bi) = (self.idx(x), self.idx(bias));
        let (xv, bv) = (self.val(xi), self.val(bi));
        let cols = xv.cols();
        assert_eq!(bv.len(), cols, "bias length must equal column count");
        let mut data = xv.data().to_vec();
        for row in data.chunks_mut(cols.max(1)) {
            for (v, b) in row.iter_mut().zip(bv.data()) {
                *v += b;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(&[xi, bi]);
        self.push(value, Op::AddRow { x: xi, bias: bi }, tracked)
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: fn(usize) -> Op) -> Var {
        let ai = self.idx(a);
        let av = self.val(ai);
        let data = av.data().iter().map(|&x| f(x)).collect();
        let value = Tensor::new(av.shape().to_vec(), data).expect("same shape");
        let tracked = self.tracked(&[ai]);
        self.push(value, op(ai), tracked)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        self.map(a, gelu_scalar, Op::Gelu)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        self.map(a, |x| x.max(0.0), Op::Relu)
    }

    /// Row-wise softmax. `mask` (one flag per element, `true` = excluded)
    /// zeroes the excluded entries; the remaining entries of each row sum to 1.
    pub fn softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, TapeError> {
        let xi = self.idx(x);
        let value = softmax_values(self.val(xi), mask.as_deref())?;
        let tracked = self.tracked(&[xi]);
        Ok(self.push(value, Op::Softmax { x: xi, mask }, tracked))
    }

    /// Row-wise log-softmax. Masked entries are excluded from the
    /// normalizer and read as 0 (they carry no gradient).
    pub fn log_softmax_rows(&mut self, x: Var, mask: Option<Vec<bool>>) -> Result<Var, TapeError> {
        let xi = self.idx(x);
        let xv = self.val(xi);
        let cols = xv.cols();
        if let Some(m) = &mask {
            assert_eq!(m.len(), xv.len(), "mask length");
        }
        let mut out = vec![0.0; xv.len()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let keep = |c: usize| mask.as_ref().is_none_or(|m| !m[r * cols + c]);
            let max = (0..cols)
                .filter(|&c| keep(c))
                .map(|c| row[c])
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(TapeError::FullyMaskedRow(r));
            }
            let lse = max
                + (0..cols)
                    .filter(|&c| keep(c))
                    .map(|c| (row[c] - max).exp())
                    .sum::<f64>()
                    .ln();
            for c in (0..cols).filter(|&c| keep(c)) {
                out[r * cols + c] = row[c] - lse;
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[xi]);
        Ok(self.push(value, Op::LogSoftmax { x: xi, mask }, tracked))
    }

    /// Row-wise layer normalization with per-column gain and shift.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var) -> Var {
        let (xi, gi, bi) = (self.idx(x), self.idx(gamma), self.idx(beta));
        let (xv, gv, bv) = (self.val(xi), self.val(gi), self.val(bi));
        let cols = xv.cols();
        assert_eq!(gv.len(), cols);
        assert_eq!(bv.len(), cols);
        let rows = xv.rows();
        let mut xhat = vec![0.0; xv.len()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; xv.len()];
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / cols as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / cols as f64;
            let rs = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd[r] = rs;
            for c in 0..cols {
                let h = (row[c] - mean) * rs;
                xhat[r * cols + c] = h;
                out[r * cols + c] = h * gv.data()[c] + bv.data()[c];
            }
        }
        let value = Tensor::new(xv.shape().to_vec(), out).expect("same shape");
        let tracked = self.tracked(&[xi, gi, bi]);
        self.push(
            value,
            Op::LayerNorm {
                x: xi,
                gamma: gi,
                beta: bi,
                xhat,
                rstd,
            },
            tracked,
        )
    }

    /// Columns `start..end` of a matrix.
    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Var {
        let xi = self.idx(x);
        let xv = self.val(xi);
        let cols = xv.cols();
        assert!(start <= end && end <= cols);
        let rows = xv.rows();
        let mut out = Vec::with_capacity(rows * (end - start));
        for r in 0..rows {
            out.extend_from_slice(&xv.row(r)[start..end]);
        }
        let value = Tensor::new(vec![rows, end - start], out).expect("slice shape");
        let tracked = self.tracked(&[xi]);
        self.push(value, Op::SliceCols { x: xi, start }, tracked)
    }

    /// Horizontal concatenation of matrices with equal row counts.
    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        let idxs: Vec<usize> = parts.iter().map(|&p| self.idx(p)).collect();
        let rows = self.val(idxs[0]).rows();
        let total: usize = idxs.iter().map(|&i| self.val(i).cols()).sum();
        let mut out = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &i in &idxs {
                let v = self.val(i);
                assert_eq!(v.rows(), rows, "concat row counts differ");
                out.extend_from_slice(v.row(r));
            }
        }
        let value = Tensor::new(vec![rows, total], out).expect("concat shape");
        let tracked = self.tracked(&idxs);
        self.push(value, Op::ConcatCols(idxs), tracked)
    }

    /// Selects rows by index (repeats allowed).
    pub fn gather_rows(&mut self, x: Var, index: &[usize]) -> Var {
        let xi = self.idx(x);
        let xv = self.val(xi);
        let cols = xv.cols();
        let mut out = Vec::with_capacity(index.len() * cols);
        for &r in index {
            out.extend_from_slice(xv.row(r));
        }
        let value = Tensor::new(vec![index.len(), cols], out).expect("gather shape");
        let tracked = self.tracked(&[xi]);
        self.push(
            value,
            Op::GatherRows {
                x: xi,
                index: index.to_vec(),
            },
            tracked,
        )
    }

    /// Contiguous slice of the flattened data of `x`, given a new shape.
    pub fn view(&mut self, x: Var, offset: usize, shape: &[usize]) -> Var {
        let xi = self.idx(x);
        let len: usize = shape.iter().product();
        let xv = self.val(xi);
        assert!(offset + len <= xv.len(), "view out of range");
        let value = Tensor::new(shape.to_vec(), xv.data()[offset..offset + len].to_vec())
            .expect("view shape");
        let tracked = self.tracked(&[xi]);
        self.push(value, Op::View { x: xi, offset }, tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let xi = self.idx(x);
        let value = Tensor::scalar(self.val(xi).sum());
        let tracked = self.tracked(&[xi]);
        self.push(value, Op::Sum(xi), tracked)
    }

    /// For `x` of shape `[n, blocks·w]` and `b` of shape `[n, w]`, returns the
    /// `[n, blocks]` matrix of dot products between each width-`w` block of a
    /// row of `x` and the same row of `b`.
    pub fn block_row_dot(&mut self, x: Var, b: Var, blocks: usize) -> Var {
        let (xi, bi) = (self.idx(x), self.idx(b));
        let (xv, bv) = (self.val(xi), self.val(bi));
        let n = xv.rows();
        let w = bv.cols();
        assert_eq!(bv.rows(), n);
        assert_eq!(xv.cols(), blocks * w);
        let mut out = vec![0.0; n * blocks];
        for i in 0..n {
            let xr = xv.row(i);
            let br = bv.row(i);
            for y in 0..blocks {
                out[i * blocks + y] = xr[y * w..(y + 1) * w]
                    .iter()
                    .zip(br)
                    .map(|(p, q)| p * q)
                    .sum();
            }
        }
        let value = Tensor::new(vec![n, blocks], out).expect("block shape");
        let tracked = self.tracked(&[xi, bi]);
        self.push(value, Op::BlockRowDot { x: xi, b: bi, blocks }, tracked)
    }

    /// Inverted dropout: zeroes entries with probability `p` and rescales the
    /// rest by `1/(1-p)`. Identity when `p` is 0.
    pub fn dropout<R: Rng + ?Sized>(&mut self, x: Var, p: f64, rng: &mut R) -> Var {
        if p <= 0.0 {
            return x;
        }
        let shape = self.value(x).shape().to_vec();
        let keep = 1.0 - p;
        let n: usize = shape.iter().product();
        let mask = (0..n)
            .map(|_| if rng.random::<f64>() < keep { 1.0 / keep } else { 0.0 })
            .collect();
        let m = self.constant(Tensor::new(shape, mask).expect("mask shape"));
        self.mul(x, m)
    }

    /// Gradients of the scalar `loss` with respect to every tracked node.
    pub fn backward(&self, loss: Var) -> Result<Gradients, TapeError> {
        if loss.tape != self.id {
            return Err(TapeError::ForeignVar);
        }
        self.check()?;
        let lv = &self.nodes[loss.idx].value;
        if lv.len() != 1 {
            return Err(TapeError::NotScalar(lv.shape().to_vec()));
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if self.nodes[loss.idx].tracked {
            grads[loss.idx] = Some(Tensor::full(lv.shape(), 1.0));
        }
        for i in (0..=loss.idx).rev() {
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Ok(Gradients {
            tape: self.id,
            grads,
        })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let node = &self.nodes[i];
        let gd = g.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, ta, tb } => {
                let (av, bv) = (self.val(*a), self.val(*b));
                let (m, n) = (node.value.shape()[0], node.value.shape()[1]);
                let k = if *ta { av.shape()[0] } else { av.shape()[1] };
                if self.nodes[*a].tracked {
                    let mut da = vec![0.0; av.len()];
                    if *ta {
                        // A stored [k, m]: dA = op(B)·dCᵀ
                        gemm(k, n, m, bv.data(), *tb, gd, true, 0.0, &mut da);
                    } else {
                        // dA = dC·op(B)ᵀ
                        gemm(m, n, k, gd, false, bv.data(), !*tb, 0.0, &mut da);
                    }
                    accumulate(grads, *a, av.shape(), da);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![0.0; bv.len()];
                    if *tb {
                        // B stored [n, k]: dB = dCᵀ·op(A)
                        gemm(n, m, k, gd, true, av.data(), *ta, 0.0, &mut db);
                    } else {
                        // dB = op(A)ᵀ·dC
                        gemm(k, m, n, av.data(), !*ta, gd, false, 0.0, &mut db);
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
            Op::Add(a, b) => {
                self.pass(grads, *a, g.clone());
                self.pass(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                self.pass(grads, *a, g.clone());
                self.pass(grads, *b, g.scaled(-1.0));
            }
            Op::Mul(a, b) => {
                if self.nodes[*a].tracked {
                    let d = zip(gd, self.val(*b).data(), |x, y| x * y);
                    accumulate(grads, *a, g.shape(), d);
                }
                if self.nodes[*b].tracked {
                    let d = zip(gd, self.val(*a).data(), |x, y| x * y);
                    accumulate(grads, *b, g.shape(), d);
                }
            }
            Op::Scale(a, f) => self.pass(grads, *a, g.scaled(*f)),
            Op::AddRow { x, bias } => {
                self.pass(grads, *x, g.clone());
                if self.nodes[*bias].tracked {
                    let bv = self.val(*bias);
                    let cols = bv.len();
                    let mut db = vec![0.0; cols];
                    for row in gd.chunks(cols.max(1)) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *bias, bv.shape(), db);
                }
            }
            Op::Gelu(a) => {
                let av = self.val(*a);
                let d = zip(gd, av.data(), |dy, x| dy * (normal_cdf(x) + x * normal_pdf(x)));
                accumulate(grads, *a, av.shape(), d);
            }
            Op::Relu(a) => {
                let av = self.val(*a);
                let d = zip(gd, av.data(), |dy, x| if x > 0.0 { dy } else { 0.0 });
                accumulate(grads, *a, av.shape(), d);
            }
            Op::Softmax { x, mask } => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let yr = y.row(r);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let dot: f64 = yr.iter().zip(gr).map(|(p, q)| p * q).sum();
                    for c in 0..cols {
                        let masked = mask.as_ref().is_some_and(|m| m[r * cols + c]);
                        if !masked {
                            d[r * cols + c] = yr[c] * (gr[c] - dot);
                        }
                    }
                }
                accumulate(grads, *x, y.shape(), d);
            }
            Op::LogSoftmax { x, mask } => {
                let y = &node.value;
                let cols = y.cols();
                let mut d = vec![0.0; y.len()];
                for r in 0..y.rows() {
                    let keep = |c: usize| mask.as_ref().is_none_or(|m| !m[r * cols + c]);
                    let gr = &gd[r * cols..(r + 1) * cols];
                    let total: f64 = (0..cols).filter(|&c| keep(c)).map(|c| gr[c]).sum();
                    for c in (0..cols).filter(|&c| keep(c)) {
                        d[r * cols + c] = gr[c] - y.row(r)[c].exp() * total;
                    }
                }
                accumulate(grads, *x, y.shape(), d);
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = self.val(*gamma).data();
                let cols = gv.len();
                let rows = rstd.len();
                if self.nodes[*x].tracked {
                    let mut dx = vec![0.0; xhat.len()];
                    for r in 0..rows {
                        let base = r * cols;
                        let mut mean_dh = 0.0;
                        let mut mean_dh_h = 0.0;
                        for c in 0..cols {
                            let dh = gd[base + c] * gv[c];
                            mean_dh += dh;
                            mean_dh_h += dh * xhat[base + c];
                        }
                        mean_dh /= cols as f64;
                        mean_dh_h /= cols as f64;
                        for c in 0..cols {
                            let dh = gd[base + c] * gv[c];
                            dx[base + c] = rstd[r] * (dh - mean_dh - xhat[base + c] * mean_dh_h);
                        }
                    }
                    accumulate(grads, *x, node.value.shape(), dx);
                }
                if self.nodes[*gamma].tracked {
                    let mut dg = vec![0.0; cols];
                    for r in 0..rows {
                        for c in 0..cols {
                            dg[c] += gd[r * cols + c] * xhat[r * cols + c];
                        }
                    }
                    accumulate(grads, *gamma, self.val(*gamma).shape(), dg);
                }
                if self.nodes[*beta].tracked {
                    let mut db = vec![0.0; cols];
                    for row in gd.chunks(cols) {
                        for (d, v) in db.iter_mut().zip(row) {
                            *d += v;
                        }
                    }
                    accumulate(grads, *beta, self.val(*beta).shape(), db);
                }
            }
            Op::SliceCols { x, start } => {
                let xv = self.val(*x);
                let (cols, w) = (xv.cols(), node.value.cols());
                let mut d = vec![0.0; xv.len()];
                for r in 0..xv.rows() {
                    d[r * cols + start..r * cols + start + w].copy_from_slice(&gd[r * w..(r + 1) * w]);
                }
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::ConcatCols(parts) => {
                let total = node.value.cols();
                let mut offset = 0;
                for &p in parts {
                    let pv = self.val(p);
                    let w = pv.cols();
                    if self.nodes[p].tracked {
                        let mut d = Vec::with_capacity(pv.len());
                        for r in 0..pv.rows() {
                            d.extend_from_slice(&gd[r * total + offset..r * total + offset + w]);
                        }
                        accumulate(grads, p, pv.shape(), d);
                    }
                    offset += w;
                }
            }
            Op::GatherRows { x, index } => {
                let xv = self.val(*x);
                let cols = xv.cols();
                let mut d = vec![0.0; xv.len()];
                for (k, &r) in index.iter().enumerate() {
                    for c in 0..cols {
                        d[r * cols + c] += gd[k * cols + c];
                    }
                }
                accumulate(grads, *x, xv.shape(), d);
            }
            Op::View { x, offset } => {
                if self.nodes[*x].tracked {
                    let xv = self.val(*x);
                    let slot = grads[*x].get_or_insert_with(|| Tensor::zeros(xv.shape()));
                    for (t, v) in slot.data_mut()[*offset..*offset + gd.len()].iter_mut().zip(gd) {
                        *t += v;
                    }
                }
            }
            Op::Sum(a) => {
                let av = self.val(*a);
                self.pass(grads, *a, Tensor::full(av.shape(), gd[0]));
            }
            Op::BlockRowDot { x, b, blocks } => {
                let (xv, bv) = (self.val(*x), self.val(*b));
                let (n, w) = (bv.rows(), bv.cols());
                if self.nodes[*x].tracked {
                    let mut dx = vec![0.0; xv.len()];
                    for i in 0..n {
                        for y in 0..*blocks {
                            let gy = gd[i * blocks + y];
                            let base = i * blocks * w + y * w;
                            for q in 0..w {
                                dx[base + q] = gy * bv.data()[i * w + q];
                            }
                        }
                    }
                    accumulate(grads, *x, xv.shape(), dx);
                }
                if self.nodes[*b].tracked {
                    let mut db = vec![0.0; bv.len()];
                    for i in 0..n {
                        for y in 0..*blocks {
                            let gy = gd[i * blocks + y];
                            let base = i * blocks * w + y * w;
                            for q in 0..w {
                                db[i * w + q] += gy * xv.data()[base + q];
                            }
                        }
                    }
                    accumulate(grads, *b, bv.shape(), db);
                }
            }
        }
    }

    fn pass(&self, grads: &mut [Option<Tensor>], target: usize, g: Tensor) {
        if !self.nodes[target].tracked {
            return;
        }
        match &mut grads[target] {
            Some(existing) => existing.add_assign(&g),
            slot @ None => *slot = Some(g),
        }
    }
}

fn zip(a: &[f64], b: &[f64], f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    a.iter().zip(b).map(|(&x, &y)| f(x, y)).collect()
}

fn accumulate(grads: &mut [Option<Tensor>], target: usize, shape: &[usize], data: Vec<f64>) {
    match &mut grads[target] {
        Some(existing) => {
            for (e, d) in existing.data_mut().iter_mut().zip(&data) {
                *e += d;
            }
        }
        slot @ None => *slot = Some(Tensor::new(shape.to_vec(), data).expect("grad shape")),
    }
}

/// Row-wise (masked) softmax on plain values.
pub fn softmax_values(x: &Tensor, mask: Option<&[bool]>) -> Result<Tensor, TapeError> {
    let cols = x.cols();
    if let Some(m) = mask {
        assert_eq!(m.len(), x.len(), "mask length");
    }
    let mut out = vec![0.0; x.len()];
    for r in 0..x.rows() {
        let row = x.row(r);
        let keep = |c: usize| mask.is_none_or(|m| !m[r * cols + c]);
        let max = (0..cols)
            .filter(|&c| keep(c))
            .map(|c| row[c])
            .fold(f64::NEG_INFINITY, f64::max);
        if max == f64::NEG_INFINITY {
            return Err(TapeError::FullyMaskedRow(r));
        }
        let mut total = 0.0;
        for c in (0..cols).filter(|&c| keep(c)) {
            let e = (row[c] - max).exp();
            out[r * cols + c] = e;
            total += e;
        }
        for v in &mut out[r * cols..(r + 1) * cols] {
            *v /= total;
        }
    }
    Ok(Tensor::new(x.shape().to_vec(), out).expect("same shape"))
}

/// Gradients produced by [`Tape::backward`].
pub struct Gradients {
    tape: usize,
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` is untracked (frozen).
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get(v.idx).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        if v.tape != self.tape {
            return None;
        }
        self.grads.get_mut(v.idx).and_then(Option::take)
    }
}

//! Reverse-mode autodiff over whole-tensor operations.
//!
//! A [`Tape`] is an append-only arena of nodes; every op records its parents
//! and enough structure to evaluate the backward pass. One tape per training
//! step, single-threaded by contract; batch elements get independent tapes.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

use crate::error::{HthError, Result};
use crate::tensor::{self, Tensor, NORM_EPS};

static TAPE_COUNTER: AtomicU64 = AtomicU64::new(1);

/// Handle to a tensor recorded on a specific tape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var {
    tape: u64,
    idx: u32,
}

enum Op {
    Leaf,
    Add(u32, u32),
    Sub(u32, u32),
    Mul(u32, u32),
    Scale(u32, f64),
    AddConst(u32),
    MulConst(u32, Tensor),
    Matmul(u32, u32),
    Transpose(u32),
    Exp(u32),
    Ln(u32),
    Silu(u32),
    Softplus(u32),
    SoftmaxRows(u32),
    RmsNormRows(u32),
    LayerNormRows(u32),
    MeanAll(u32),
    SumAll(u32),
    AddBroadcastRow(u32, u32),
    MulBroadcastRow(u32, u32),
    MulBroadcastCol(u32, u32),
    MulScalarVar(u32, u32),
    Recip(u32),
    PermuteRows(u32, Arc<Vec<usize>>),
    PermuteFlat(u32, Arc<Vec<usize>>),
    ShiftRowsDown(u32),
    SliceRows(u32, usize),
    SliceCols(u32, usize),
    ConcatRows(Vec<u32>),
    ConcatCols(Vec<u32>),
    Reshape(u32),
    CumsumCol(u32),
    ConvDepthwise(u32, u32, usize),
}

struct Node {
    value: Tensor,
    op: Op,
}

pub struct Tape {
    id: u64,
    nodes: Vec<Node>,
}

impl Default for Tape {
    fn default() -> Self {
        Self::new()
    }
}

impl Tape {
    pub fn new() -> Self {
        Tape {
            id: TAPE_COUNTER.fetch_add(1, Ordering::Relaxed),
            nodes: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op) -> Var {
        let idx = self.nodes.len() as u32;
        self.nodes.push(Node { value, op });
        Var { tape: self.id, idx }
    }

    fn check(&self, v: Var) -> Result<u32> {
        if v.tape != self.id {
            return Err(HthError::NotOnTape {
                expected: self.id,
                got: v.tape,
            });
        }
        Ok(v.idx)
    }

    fn val(&self, idx: u32) -> &Tensor {
        &self.nodes[idx as usize].value
    }

    /// Register an input tensor (parameter or constant).
    pub fn leaf(&mut self, t: Tensor) -> Var {
        self.push(t, Op::Leaf)
    }

    pub fn value(&self, v: Var) -> Result<&Tensor> {
        let idx = self.check(v)?;
        Ok(self.val(idx))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::add(self.val(ia), self.val(ib))?;
        Ok(self.push(v, Op::Add(ia, ib)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::sub(self.val(ia), self.val(ib))?;
        Ok(self.push(v, Op::Sub(ia, ib)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::mul(self.val(ia), self.val(ib))?;
        Ok(self.push(v, Op::Mul(ia, ib)))
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::scale(self.val(ia), c)?;
        Ok(self.push(v, Op::Scale(ia, c)))
    }

    /// Add a non-differentiable constant tensor (positional embeddings, masks).
    pub fn add_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::add(self.val(ia), c)?;
        Ok(self.push(v, Op::AddConst(ia)))
    }

    /// Elementwise multiply by a non-differentiable constant tensor.
    pub fn mul_const(&mut self, a: Var, c: &Tensor) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::mul(self.val(ia), c)?;
        Ok(self.push(v, Op::MulConst(ia, c.clone())))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ia, ib) = (self.check(a)?, self.check(b)?);
        let v = tensor::matmul(self.val(ia), self.val(ib))?;
        Ok(self.push(v, Op::Matmul(ia, ib)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::transpose(self.val(ia))?;
        Ok(self.push(v, Op::Transpose(ia)))
    }

    pub fn exp(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::exp(self.val(ia))?;
        Ok(self.push(v, Op::Exp(ia)))
    }

    pub fn ln(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.val(ia).map(f64::ln);
        v.check_finite("ln")?;
        Ok(self.push(v, Op::Ln(ia)))
    }

    pub fn silu(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::silu(self.val(ia))?;
        Ok(self.push(v, Op::Silu(ia)))
    }

    pub fn softplus(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::softplus(self.val(ia))?;
        Ok(self.push(v, Op::Softplus(ia)))
    }

    pub fn softmax_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::softmax_rows(self.val(ia))?;
        Ok(self.push(v, Op::SoftmaxRows(ia)))
    }

    pub fn rmsnorm_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::rmsnorm_rows(self.val(ia))?;
        Ok(self.push(v, Op::RmsNormRows(ia)))
    }

    pub fn layernorm_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = tensor::layernorm_rows(self.val(ia))?;
        Ok(self.push(v, Op::LayerNormRows(ia)))
    }

    pub fn mean_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(tensor::mean_all(self.val(ia)));
        Ok(self.push(v, Op::MeanAll(ia)))
    }

    pub fn sum_all(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = Tensor::scalar(tensor::sum_all(self.val(ia)));
        Ok(self.push(v, Op::SumAll(ia)))
    }

    /// `a` is R×C, `row` is 1×C, broadcast-added to every row.
    pub fn add_broadcast_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (at, rt) = (self.val(ia), self.val(ir));
        let cols = at.cols();
        if rt.shape() != [1, cols] {
            return Err(HthError::shape("add_broadcast_row", format!("[1, {cols}]"), format!("{:?}", rt.shape())));
        }
        let mut out = at.clone();
        for i in 0..at.rows() {
            for j in 0..cols {
                let v = out.at2(i, j) + rt.data()[j];
                out.set2(i, j, v);
            }
        }
        out.check_finite("add_broadcast_row")?;
        Ok(self.push(out, Op::AddBroadcastRow(ia, ir)))
    }

    pub fn mul_broadcast_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (ia, ir) = (self.check(a)?, self.check(row)?);
        let (at, rt) = (self.val(ia), self.val(ir));
        let cols = at.cols();
        if rt.shape() != [1, cols] {
            return Err(HthError::shape("mul_broadcast_row", format!("[1, {cols}]"), format!("{:?}", rt.shape())));
        }
        let mut out = at.clone();
        for i in 0..at.rows() {
            for j in 0..cols {
                let v = out.at2(i, j) * rt.data()[j];
                out.set2(i, j, v);
            }
        }
        out.check_finite("mul_broadcast_row")?;
        Ok(self.push(out, Op::MulBroadcastRow(ia, ir)))
    }

    /// `a` is R×C, `col` is R×1, each row of `a` scaled by its column entry.
    pub fn mul_broadcast_col(&mut self, a: Var, col: Var) -> Result<Var> {
        let (ia, ic) = (self.check(a)?, self.check(col)?);
        let (at, ct) = (self.val(ia), self.val(ic));
        let rows = at.rows();
        if ct.shape() != [rows, 1] {
            return Err(HthError::shape("mul_broadcast_col", format!("[{rows}, 1]"), format!("{:?}", ct.shape())));
        }
        let mut out = at.clone();
        let cols = at.cols();
        for i in 0..rows {
            let s = ct.data()[i];
            for j in 0..cols {
                let v = out.at2(i, j) * s;
                out.set2(i, j, v);
            }
        }
        out.check_finite("mul_broadcast_col")?;
        Ok(self.push(out, Op::MulBroadcastCol(ia, ic)))
    }

    /// Multiply every element by a 1×1 scalar variable.
    pub fn mul_scalar_var(&mut self, a: Var, s: Var) -> Result<Var> {
        let (ia, is) = (self.check(a)?, self.check(s)?);
        let sv = self.val(is);
        if sv.len() != 1 {
            return Err(HthError::shape("mul_scalar_var", "[1, 1]", format!("{:?}", sv.shape())));
        }
        let v = tensor::scale(self.val(ia), sv.data()[0])?;
        Ok(self.push(v, Op::MulScalarVar(ia, is)))
    }

    pub fn recip(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.val(ia).map(|x| 1.0 / x);
        v.check_finite("recip")?;
        Ok(self.push(v, Op::Recip(ia)))
    }

    /// Reorder rows: `out[i] = a[perm[i]]`. `inv` must be the exact inverse.
    pub fn permute_rows(&mut self, a: Var, perm: Arc<Vec<usize>>, inv: Arc<Vec<usize>>) -> Result<Var> {
        let ia = self.check(a)?;
        let at = self.val(ia);
        let v = permute_rows_tensor(at, &perm)?;
        Ok(self.push(v, Op::PermuteRows(ia, inv)))
    }

    /// Reorder raw elements: `out[i] = a.data[perm[i]]`, reinterpreted as `out_shape`.
    pub fn permute_flat(
        &mut self,
        a: Var,
        perm: Arc<Vec<usize>>,
        inv: Arc<Vec<usize>>,
        out_shape: Vec<usize>,
    ) -> Result<Var> {
        let ia = self.check(a)?;
        let at = self.val(ia);
        if perm.len() != at.len() {
            return Err(HthError::shape("permute_flat", at.len(), perm.len()));
        }
        let data: Vec<f64> = perm.iter().map(|&p| at.data()[p]).collect();
        let v = Tensor::new(out_shape, data)?;
        Ok(self.push(v, Op::PermuteFlat(ia, inv)))
    }

    pub fn flip_rows(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let rows = self.val(ia).rows();
        let perm: Arc<Vec<usize>> = Arc::new((0..rows).rev().collect());
        self.permute_rows(a, perm.clone(), perm)
    }

    /// Shift rows down by one, zero row at the top; the last row is discarded.
    pub fn shift_rows_down(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let at = self.val(ia);
        let (rows, cols) = (at.rows(), at.cols());
        let mut out = Tensor::zeros(&[rows, cols]);
        for i in 1..rows {
            for j in 0..cols {
                out.set2(i, j, at.at2(i - 1, j));
            }
        }
        Ok(self.push(out, Op::ShiftRowsDown(ia)))
    }

    pub fn slice_rows(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let at = self.val(ia);
        let (rows, cols) = (at.rows(), at.cols());
        if lo >= hi || hi > rows {
            return Err(HthError::invalid(format!("slice_rows {lo}..{hi} of {rows}")));
        }
        let data = at.data()[lo * cols..hi * cols].to_vec();
        let v = Tensor::new(vec![hi - lo, cols], data)?;
        Ok(self.push(v, Op::SliceRows(ia, lo)))
    }

    pub fn slice_cols(&mut self, a: Var, lo: usize, hi: usize) -> Result<Var> {
        let ia = self.check(a)?;
        let at = self.val(ia);
        let (rows, cols) = (at.rows(), at.cols());
        if lo >= hi || hi > cols {
            return Err(HthError::invalid(format!("slice_cols {lo}..{hi} of {cols}")));
        }
        let mut data = Vec::with_capacity(rows * (hi - lo));
        for i in 0..rows {
            data.extend_from_slice(&at.data()[i * cols + lo..i * cols + hi]);
        }
        let v = Tensor::new(vec![rows, hi - lo], data)?;
        Ok(self.push(v, Op::SliceCols(ia, lo)))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(HthError::invalid("concat_rows of zero parts"));
        }
        let idxs: Vec<u32> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let cols = self.val(idxs[0]).cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &i in &idxs {
            let t = self.val(i);
            if t.cols() != cols {
                return Err(HthError::shape("concat_rows cols", cols, t.cols()));
            }
            rows += t.rows();
            data.extend_from_slice(t.data());
        }
        let v = Tensor::new(vec![rows, cols], data)?;
        Ok(self.push(v, Op::ConcatRows(idxs)))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        if parts.is_empty() {
            return Err(HthError::invalid("concat_cols of zero parts"));
        }
        let idxs: Vec<u32> = parts.iter().map(|&p| self.check(p)).collect::<Result<_>>()?;
        let rows = self.val(idxs[0]).rows();
        let total_cols: usize = idxs.iter().map(|&i| self.val(i).cols()).sum();
        let mut data = vec![0.0; rows * total_cols];
        let mut off = 0;
        for &i in &idxs {
            let t = self.val(i);
            if t.rows() != rows {
                return Err(HthError::shape("concat_cols rows", rows, t.rows()));
            }
            let c = t.cols();
            for r in 0..rows {
                data[r * total_cols + off..r * total_cols + off + c]
                    .copy_from_slice(&t.data()[r * c..(r + 1) * c]);
            }
            off += c;
        }
        let v = Tensor::new(vec![rows, total_cols], data)?;
        Ok(self.push(v, Op::ConcatCols(idxs)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        let ia = self.check(a)?;
        let v = self.val(ia).reshaped(shape)?;
        Ok(self.push(v, Op::Reshape(ia)))
    }

    /// Cumulative sum down a column vector (R×1).
    pub fn cumsum_col(&mut self, a: Var) -> Result<Var> {
        let ia = self.check(a)?;
        let at = self.val(ia);
        if at.cols() != 1 {
            return Err(HthError::shape("cumsum_col", "[R, 1]", format!("{:?}", at.shape())));
        }
        let mut acc = 0.0;
        let data: Vec<f64> = at
            .data()
            .iter()
            .map(|&v| {
                acc += v;
                acc
            })
            .collect();
        let v = Tensor::new(at.shape().to_vec(), data)?;
        Ok(self.push(v, Op::CumsumCol(ia)))
    }

    /// Depthwise 1D convolution along rows: `x` is T×C, `w` is K×C with K odd,
    /// zero-padded. Centered taps by default; `causal` pads entirely on the
    /// left so position t reads only positions ≤ t. No bias, no activation.
    pub fn conv_depthwise(&mut self, x: Var, w: Var, causal: bool) -> Result<Var> {
        let (ix, iw) = (self.check(x)?, self.check(w)?);
        let (xt, wt) = (self.val(ix), self.val(iw));
        let (t, c) = (xt.rows(), xt.cols());
        let k = wt.rows();
        if wt.cols() != c || k % 2 == 0 {
            return Err(HthError::shape("conv_depthwise", format!("[odd K, {c}]"), format!("{:?}", wt.shape())));
        }
        let pad = if causal { k - 1 } else { k / 2 };
        let mut out = Tensor::zeros(&[t, c]);
        for ti in 0..t {
            for kk in 0..k {
                let src = ti as isize + kk as isize - pad as isize;
                if src < 0 || src >= t as isize {
                    continue;
                }
                let src = src as usize;
                for ci in 0..c {
                    let v = out.at2(ti, ci) + wt.at2(kk, ci) * xt.at2(src, ci);
                    out.set2(ti, ci, v);
                }
            }
        }
        out.check_finite("conv_depthwise")?;
        Ok(self.push(out, Op::ConvDepthwise(ix, iw, pad)))
    }

    /// Gradient of a scalar loss with respect to each of `params`; parameters
    /// the loss does not depend on receive an exactly-zero gradient.
    pub fn grad(&self, loss: Var, params: &[Var]) -> Result<Vec<Tensor>> {
        let loss_idx = self.check(loss)?;
        if self.val(loss_idx).len() != 1 {
            return Err(HthError::invalid("grad: loss must be a scalar"));
        }
        let mut keep = vec![false; self.nodes.len()];
        for &p in params {
            keep[self.check(p)? as usize] = true;
        }
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        grads[loss_idx as usize] = Some(Tensor::scalar(1.0));
        for idx in (0..=loss_idx as usize).rev() {
            let g = if keep[idx] {
                grads[idx].clone()
            } else {
                grads[idx].take()
            };
            if let Some(g) = g {
                self.backprop(idx, &g, &mut grads)?;
            }
        }
        params
            .iter()
            .map(|&p| {
                let i = p.idx as usize;
                Ok(grads[i]
                    .take()
                    .unwrap_or_else(|| Tensor::zeros(self.val(p.idx).shape())))
            })
            .collect()
    }

    fn backprop(&self, idx: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let acc = |grads: &mut [Option<Tensor>], parent: u32, delta: Tensor| {
            let slot = &mut grads[parent as usize];
            match slot {
                Some(existing) => {
                    for (e, d) in existing.data_mut().iter_mut().zip(delta.data()) {
                        *e += d;
                    }
                }
                None => *slot = Some(delta),
            }
        };
        match &self.nodes[idx].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, g.clone());
            }
            Op::Sub(a, b) => {
                acc(grads, *a, g.clone());
                acc(grads, *b, tensor::scale(g, -1.0)?);
            }
            Op::Mul(a, b) => {
                acc(grads, *a, tensor::mul(g, self.val(*b))?);
                acc(grads, *b, tensor::mul(g, self.val(*a))?);
            }
            Op::Scale(a, c) => acc(grads, *a, tensor::scale(g, *c)?),
            Op::AddConst(a) => acc(grads, *a, g.clone()),
            Op::MulConst(a, c) => acc(grads, *a, tensor::mul(g, c)?),
            Op::Matmul(a, b) => {
                let bt = tensor::transpose(self.val(*b))?;
                acc(grads, *a, tensor::matmul(g, &bt)?);
                let at = tensor::transpose(self.val(*a))?;
                acc(grads, *b, tensor::matmul(&at, g)?);
            }
            Op::Transpose(a) => acc(grads, *a, tensor::transpose(g)?),
            Op::Exp(a) => acc(grads, *a, tensor::mul(g, &self.nodes[idx].value)?),
            Op::Ln(a) => {
                let inv = self.val(*a).map(|x| 1.0 / x);
                acc(grads, *a, tensor::mul(g, &inv)?);
            }
            Op::Silu(a) => {
                let d = self.val(*a).map(|x| {
                    let s = tensor::sigmoid_scalar(x);
                    s * (1.0 + x * (1.0 - s))
                });
                acc(grads, *a, tensor::mul(g, &d)?);
            }
            Op::Softplus(a) => {
                let d = self.val(*a).map(tensor::sigmoid_scalar);
                acc(grads, *a, tensor::mul(g, &d)?);
            }
            Op::SoftmaxRows(a) => {
                let y = &self.nodes[idx].value;
                let (rows, cols) = (y.rows(), y.cols());
                let mut out = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    let dot: f64 = (0..cols).map(|j| g.at2(i, j) * y.at2(i, j)).sum();
                    for j in 0..cols {
                        out.set2(i, j, (g.at2(i, j) - dot) * y.at2(i, j));
                    }
                }
                acc(grads, *a, out);
            }
            Op::RmsNormRows(a) => {
                let x = self.val(*a);
                let y = &self.nodes[idx].value;
                let (rows, cols) = (x.rows(), x.cols());
                let n = cols as f64;
                let mut out = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    let ms: f64 = (0..cols).map(|j| x.at2(i, j) * x.at2(i, j)).sum::<f64>() / n;
                    let r = (ms + NORM_EPS).sqrt();
                    let dot: f64 = (0..cols).map(|j| g.at2(i, j) * y.at2(i, j)).sum();
                    for j in 0..cols {
                        out.set2(i, j, (g.at2(i, j) - y.at2(i, j) * dot / n) / r);
                    }
                }
                acc(grads, *a, out);
            }
            Op::LayerNormRows(a) => {
                let x = self.val(*a);
                let y = &self.nodes[idx].value;
                let (rows, cols) = (x.rows(), x.cols());
                let n = cols as f64;
                let mut out = Tensor::zeros(&[rows, cols]);
                for i in 0..rows {
                    let mean: f64 = (0..cols).map(|j| x.at2(i, j)).sum::<f64>() / n;
                    let var: f64 = (0..cols)
                        .map(|j| (x.at2(i, j) - mean).powi(2))
                        .sum::<f64>()
                        / n;
                    let sd = (var + NORM_EPS).sqrt();
                    let gmean: f64 = (0..cols).map(|j| g.at2(i, j)).sum::<f64>() / n;
                    let gydot: f64 = (0..cols).map(|j| g.at2(i, j) * y.at2(i, j)).sum::<f64>() / n;
                    for j in 0..cols {
                        out.set2(i, j, (g.at2(i, j) - gmean - y.at2(i, j) * gydot) / sd);
                    }
                }
                acc(grads, *a, out);
            }
            Op::MeanAll(a) => {
                let n = self.val(*a).len() as f64;
                let d = Tensor::full(self.val(*a).shape(), g.data()[0] / n);
                acc(grads, *a, d);
            }
            Op::SumAll(a) => {
                let d = Tensor::full(self.val(*a).shape(), g.data()[0]);
                acc(grads, *a, d);
            }
            Op::AddBroadcastRow(a, r) => {
                acc(grads, *a, g.clone());
                let cols = g.cols();
                let mut rg = Tensor::zeros(&[1, cols]);
                for i in 0..g.rows() {
                    for j in 0..cols {
                        rg.data_mut()[j] += g.at2(i, j);
                    }
                }
                acc(grads, *r, rg);
            }
            Op::MulBroadcastRow(a, r) => {
                let at = self.val(*a);
                let rt = self.val(*r);
                let (rows, cols) = (at.rows(), at.cols());
                let mut ag = Tensor::zeros(&[rows, cols]);
                let mut rg = Tensor::zeros(&[1, cols]);
                for i in 0..rows {
                    for j in 0..cols {
                        ag.set2(i, j, g.at2(i, j) * rt.data()[j]);
                        rg.data_mut()[j] += g.at2(i, j) * at.at2(i, j);
                    }
                }
                acc(grads, *a, ag);
                acc(grads, *r, rg);
            }
            Op::MulBroadcastCol(a, c) => {
                let at = self.val(*a);
                let ct = self.val(*c);
                let (rows, cols) = (at.rows(), at.cols());
                let mut ag = Tensor::zeros(&[rows, cols]);
                let mut cg = Tensor::zeros(&[rows, 1]);
                for i in 0..rows {
                    let s = ct.data()[i];
                    let mut dot = 0.0;
                    for j in 0..cols {
                        ag.set2(i, j, g.at2(i, j) * s);
                        dot += g.at2(i, j) * at.at2(i, j);
                    }
                    cg.data_mut()[i] = dot;
                }
                acc(grads, *a, ag);
                acc(grads, *c, cg);
            }
            Op::MulScalarVar(a, s) => {
                let sv = self.val(*s).data()[0];
                acc(grads, *a, tensor::scale(g, sv)?);
                let dot: f64 = g
                    .data()
                    .iter()
                    .zip(self.val(*a).data())
                    .map(|(x, y)| x * y)
                    .sum();
                acc(grads, *s, Tensor::scalar(dot));
            }
            Op::Recip(a) => {
                let y = &self.nodes[idx].value;
                let d = tensor::mul(y, y)?;
                acc(grads, *a, tensor::scale(&tensor::mul(g, &d)?, -1.0)?);
            }
            Op::PermuteRows(a, inv) => {
                acc(grads, *a, permute_rows_tensor(g, inv)?);
            }
            Op::PermuteFlat(a, inv) => {
                let src_shape = self.val(*a).shape().to_vec();
                let data: Vec<f64> = inv.iter().map(|&p| g.data()[p]).collect();
                acc(grads, *a, Tensor::new(src_shape, data)?);
            }
            Op::ShiftRowsDown(a) => {
                // y_t = x_{t-1}, so dx_t collects g_{t+1}.
                let (rows, cols) = (g.rows(), g.cols());
                let mut out = Tensor::zeros(&[rows, cols]);
                for i in 0..rows.saturating_sub(1) {
                    for j in 0..cols {
                        out.set2(i, j, g.at2(i + 1, j));
                    }
                }
                acc(grads, *a, out);
            }
            Op::SliceRows(a, lo) => {
                let src = self.val(*a);
                let mut out = Tensor::zeros(src.shape());
                let cols = src.cols();
                for i in 0..g.rows() {
                    for j in 0..cols {
                        out.set2(lo + i, j, g.at2(i, j));
                    }
                }
                acc(grads, *a, out);
            }
            Op::SliceCols(a, lo) => {
                let src = self.val(*a);
                let mut out = Tensor::zeros(src.shape());
                for i in 0..g.rows() {
                    for j in 0..g.cols() {
                        out.set2(i, lo + j, g.at2(i, j));
                    }
                }
                acc(grads, *a, out);
            }
            Op::ConcatRows(parts) => {
                let mut lo = 0;
                for &p in parts {
                    let r = self.val(p).rows();
                    let cols = self.val(p).cols();
                    let data = g.data()[lo * cols..(lo + r) * cols].to_vec();
                    acc(grads, p, Tensor::new(vec![r, cols], data)?);
                    lo += r;
                }
            }
            Op::ConcatCols(parts) => {
                let rows = g.rows();
                let total = g.cols();
                let mut lo = 0;
                for &p in parts {
                    let c = self.val(p).cols();
                    let mut pg = Tensor::zeros(&[rows, c]);
                    for i in 0..rows {
                        for j in 0..c {
                            pg.set2(i, j, g.data()[i * total + lo + j]);
                        }
                    }
                    acc(grads, p, pg);
                    lo += c;
                }
            }
            Op::Reshape(a) => {
                let src_shape = self.val(*a).shape().to_vec();
                acc(grads, *a, g.reshaped(src_shape)?);
            }
            Op::CumsumCol(a) => {
                // reverse cumulative sum of the incoming gradient
                let rows = g.rows();
                let mut out = Tensor::zeros(&[rows, 1]);
                let mut acc_v = 0.0;
                for i in (0..rows).rev() {
                    acc_v += g.data()[i];
                    out.data_mut()[i] = acc_v;
                }
                acc(grads, *a, out);
            }
            Op::ConvDepthwise(x, w, pad) => {
                let xt = self.val(*x);
                let wt = self.val(*w);
                let (t, c) = (xt.rows(), xt.cols());
                let k = wt.rows();
                let pad = *pad;
                let mut gx = Tensor::zeros(&[t, c]);
                let mut gw = Tensor::zeros(&[k, c]);
                for ti in 0..t {
                    for kk in 0..k {
                        let src = ti as isize + kk as isize - pad as isize;
                        if src < 0 || src >= t as isize {
                            continue;
                        }
                        let src = src as usize;
                        for ci in 0..c {
                            let gv = g.at2(ti, ci);
                            let nv = gx.at2(src, ci) + wt.at2(kk, ci) * gv;
                            gx.set2(src, ci, nv);
                            let wv = gw.at2(kk, ci) + xt.at2(src, ci) * gv;
                            gw.set2(kk, ci, wv);
                        }
                    }
                }
                acc(grads, *x, gx);
                acc(grads, *w, gw);
            }
        }
        Ok(())
    }
}

fn permute_rows_tensor(t: &Tensor, perm: &[usize]) -> Result<Tensor> {
    let (rows, cols) = (t.rows(), t.cols());
    if perm.len() != rows {
        return Err(HthError::shape("permute_rows", rows, perm.len()));
    }
    let mut data = Vec::with_capacity(rows * cols);
    for &p in perm {
        data.extend_from_slice(&t.data()[p * cols..(p + 1) * cols]);
    }
    Tensor::new(vec![rows, cols], data)
}

/// Central finite-difference check: rebuilds the computation at perturbed
/// inputs and compares the analytic gradient entry-wise, relative to the
/// larger magnitude. Returns the worst relative error seen.
pub fn finite_diff_check(
    build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>,
    inits: &[Tensor],
    eps: f64,
) -> Result<f64> {
    let eval = |tensors: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = tensors.iter().map(|t| tape.leaf(t.clone())).collect();
        let loss = build(&mut tape, &vars)?;
        Ok(tape.value(loss)?.data()[0])
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = inits.iter().map(|t| tape.leaf(t.clone())).collect();
    let loss = build(&mut tape, &vars)?;
    let analytic = tape.grad(loss, &vars)?;

    let mut worst = 0.0f64;
    for (pi, init) in inits.iter().enumerate() {
        for ei in 0..init.len() {
            let mut plus = inits.to_vec();
            plus[pi].data_mut()[ei] += eps;
            let mut minus = inits.to_vec();
            minus[pi].data_mut()[ei] -= eps;
            let numeric = (eval(&plus)? - eval(&minus)?) / (2.0 * eps);
            let a = analytic[pi].data()[ei];
            let denom = a.abs().max(numeric.abs()).max(1e-6);
            worst = worst.max((a - numeric).abs() / denom);
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::tensor::randn;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    const FD_EPS: f64 = 1e-4;
    const FD_TOL: f64 = 1e-3;

    fn check_op(name: &str, build: &dyn Fn(&mut Tape, &[Var]) -> Result<Var>, shapes: &[&[usize]]) {
        let mut rng = ChaCha8Rng::seed_from_u64(0x5eed ^ name.len() as u64);
        for trial in 0..20 {
            let inits: Vec<Tensor> = shapes.iter().map(|s| randn(s, &mut rng)).collect();
            let worst = finite_diff_check(build, &inits, FD_EPS).unwrap();
            assert!(
                worst < FD_TOL,
                "{name} trial {trial}: worst rel err {worst:.3e}"
            );
        }
    }

    #[test]
    fn grad_of_sum_is_ones() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![1.0, -2.0], vec![3.0, 0.5]]).unwrap());
        let loss = tape.sum_all(p).unwrap();
        let g = tape.grad(loss, &[p]).unwrap();
        assert_eq!(g[0].data(), &[1.0, 1.0, 1.0, 1.0]);
    }

    #[test]
    fn grad_of_sum_of_squares() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::from_rows(&[vec![1.0, 2.0]]).unwrap());
        let sq = tape.mul(p, p).unwrap();
        let loss = tape.sum_all(sq).unwrap();
        let g = tape.grad(loss, &[p]).unwrap();
        assert_eq!(g[0].data(), &[2.0, 4.0]);
    }

    #[test]
    fn grad_of_unused_param_is_exactly_zero() {
        let mut tape = Tape::new();
        let p = tape.leaf(Tensor::full(&[2, 3], 1.5));
        let q = tape.leaf(Tensor::full(&[2, 2], -0.5));
        let loss = tape.sum_all(p).unwrap();
        let g = tape.grad(loss, &[q]).unwrap();
        assert!(g[0].data().iter().all(|&v| v == 0.0));
    }

    #[test]
    fn cross_tape_var_rejected() {
        let mut t1 = Tape::new();
        let mut t2 = Tape::new();
        let a = t1.leaf(Tensor::scalar(1.0));
        let b = t2.leaf(Tensor::scalar(2.0));
        assert!(matches!(t1.add(a, b), Err(HthError::NotOnTape { .. })));
    }

    #[test]
    fn fd_add_sub_mul_scale() {
        check_op(
            "add",
            &|t, v| {
                let s = t.add(v[0], v[1])?;
                let sq = t.mul(s, s)?;
                t.mean_all(sq)
            },
            &[&[3, 4], &[3, 4]],
        );
        check_op(
            "sub_scale",
            &|t, v| {
                let s = t.sub(v[0], v[1])?;
                let s = t.scale(s, 1.7)?;
                let sq = t.mul(s, s)?;
                t.mean_all(sq)
            },
            &[&[3, 4], &[3, 4]],
        );
    }

    #[test]
    fn fd_matmul_transpose() {
        check_op(
            "matmul",
            &|t, v| {
                let m = t.matmul(v[0], v[1])?;
                let sq = t.mul(m, m)?;
                t.mean_all(sq)
            },
            &[&[3, 5], &[5, 2]],
        );
        check_op(
            "transpose",
            &|t, v| {
                let m = t.transpose(v[0])?;
                let m = t.matmul(m, v[0])?;
                t.sum_all(m)
            },
            &[&[4, 3]],
        );
    }

    #[test]
    fn fd_activations() {
        check_op(
            "silu",
            &|t, v| {
                let y = t.silu(v[0])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[2, 6]],
        );
        check_op(
            "softplus_exp",
            &|t, v| {
                let y = t.softplus(v[0])?;
                let neg = t.scale(y, -1.0)?;
                let y = t.exp(neg)?;
                t.sum_all(y)
            },
            &[&[2, 6]],
        );
    }

    #[test]
    fn fd_ln_recip() {
        // keep inputs positive via softplus shift
        check_op(
            "ln",
            &|t, v| {
                let pos = t.softplus(v[0])?;
                let y = t.ln(pos)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[3, 3]],
        );
        check_op(
            "recip",
            &|t, v| {
                let pos = t.softplus(v[0])?;
                let y = t.recip(pos)?;
                t.sum_all(y)
            },
            &[&[2, 2]],
        );
    }

    #[test]
    fn fd_norms_softmax() {
        check_op(
            "softmax",
            &|t, v| {
                let y = t.softmax_rows(v[0])?;
                let w = t.mul(y, v[0])?;
                t.sum_all(w)
            },
            &[&[3, 5]],
        );
        check_op(
            "rmsnorm",
            &|t, v| {
                let y = t.rmsnorm_rows(v[0])?;
                let w = t.mul(y, v[0])?;
                t.sum_all(w)
            },
            &[&[3, 5]],
        );
        check_op(
            "layernorm",
            &|t, v| {
                let y = t.layernorm_rows(v[0])?;
                let w = t.mul(y, v[0])?;
                t.sum_all(w)
            },
            &[&[3, 5]],
        );
    }

    #[test]
    fn fd_broadcast_ops() {
        check_op(
            "add_broadcast_row",
            &|t, v| {
                let y = t.add_broadcast_row(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[4, 3], &[1, 3]],
        );
        check_op(
            "mul_broadcast_row",
            &|t, v| {
                let y = t.mul_broadcast_row(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[4, 3], &[1, 3]],
        );
        check_op(
            "mul_broadcast_col",
            &|t, v| {
                let y = t.mul_broadcast_col(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[4, 3], &[4, 1]],
        );
        check_op(
            "mul_scalar_var",
            &|t, v| {
                let y = t.mul_scalar_var(v[0], v[1])?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[4, 3], &[1, 1]],
        );
    }

    #[test]
    fn fd_structural_ops() {
        check_op(
            "permute_shift_slice_concat",
            &|t, v| {
                let f = t.flip_rows(v[0])?;
                let s = t.shift_rows_down(f)?;
                let left = t.slice_cols(s, 0, 2)?;
                let right = t.slice_cols(s, 2, 3)?;
                let cat = t.concat_cols(&[right, left])?;
                let top = t.slice_rows(cat, 0, 2)?;
                let bottom = t.slice_rows(cat, 2, 4)?;
                let rows = t.concat_rows(&[bottom, top])?;
                let sq = t.mul(rows, rows)?;
                t.mean_all(sq)
            },
            &[&[4, 3]],
        );
        check_op(
            "reshape_cumsum",
            &|t, v| {
                let col = t.reshape(v[0], vec![6, 1])?;
                let cs = t.cumsum_col(col)?;
                let sq = t.mul(cs, cs)?;
                t.mean_all(sq)
            },
            &[&[2, 3]],
        );
    }

    #[test]
    fn fd_conv_depthwise() {
        check_op(
            "conv_depthwise",
            &|t, v| {
                let y = t.conv_depthwise(v[0], v[1], false)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[9, 3], &[7, 3]],
        );
        check_op(
            "conv_depthwise_causal",
            &|t, v| {
                let y = t.conv_depthwise(v[0], v[1], true)?;
                let sq = t.mul(y, y)?;
                t.mean_all(sq)
            },
            &[&[9, 3], &[7, 3]],
        );
    }

    #[test]
    fn fd_permute_flat() {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        for _ in 0..20 {
            let x = randn(&[2, 6], &mut rng);
            // fixed pairing swap as an arbitrary flat permutation
            let perm: Vec<usize> = (0..12).map(|i| (i * 5) % 12).collect();
            let mut inv = vec![0; 12];
            for (i, &p) in perm.iter().enumerate() {
                inv[p] = i;
            }
            let perm = Arc::new(perm);
            let inv = Arc::new(inv);
            let worst = finite_diff_check(
                &|t, v| {
                    let y = t.permute_flat(v[0], perm.clone(), inv.clone(), vec![3, 4])?;
                    let sq = t.mul(y, y)?;
                    t.mean_all(sq)
                },
                &[x],
                FD_EPS,
            )
            .unwrap();
            assert!(worst < FD_TOL);
        }
    }
}

//! Reverse-mode differentiation tape.
//!
//! Ops append nodes holding their forward value plus whatever the backward
//! pass needs; [`Tape::backward`] replays the node list in reverse, which is a
//! topological order by construction. Gradients live in a buffer parallel to
//! the node list so leaf gradients can be read back after the sweep.
//!
//! Log-space tensors use `-inf` as the additive zero. Signed log-space tensors
//! additionally carry a `Vec<i8>` of signs; gradients flow through magnitudes
//! only (signs are piecewise constant). The log-space matmuls are evaluated as
//! ordinary matrix products of `sign * exp(x - rowmax)` scaled factors, which
//! turns the inner logsumexp into a single real matmul; backward uses per-lane
//! shifts so intermediate factors stay bounded even when row and column
//! maxima are badly misaligned.

use std::sync::Arc;

use rand::Rng;

use super::logspace::signed_log_add_exp;
use super::ops::{
    layer_norm_row, log_sum_exp_row, logistic_scalar, mm_acc, mm_nt_acc, mm_tn_acc, softmax_row,
};
use super::{Mode, Tensor};
use crate::real::Real;
use crate::rng::Prng;
use crate::{Error, Result};

/// Sentinel index for gather ops: the output element takes the fill value.
pub const GATHER_FILL: u32 = u32::MAX;

/// Index map for [`Tape::gather_log_matmul`]: describes, for every element of
/// the gathered left operand, which source tensor and flat offset it comes
/// from (or the `-inf` fill).
///
/// The structured variant enumerates the inner-weight layout of the VPDA pop
/// contraction without materializing O(n^3) index vectors: batch `y` (times
/// vector lane `j` when `m > 1`), rows `(i, qx)` with `i` from `-1` to `t-2`,
/// columns `(k, u)` with `k` from `0` to `t-2`; the element is
/// `source[k][(j,) (i, qx), (u, y)]` when `k > i` and fill otherwise.
#[derive(Clone)]
pub enum GatherSpec {
    Dense(Arc<Vec<(u32, u32)>>),
    PopA { t: usize, s: usize, qn: usize, g: usize, m: usize },
}

impl GatherSpec {
    pub fn batch(&self) -> usize {
        match self {
            GatherSpec::Dense(_) => 0, // caller supplies batch explicitly
            GatherSpec::PopA { g, m, .. } => g * m,
        }
    }

    fn len(&self) -> usize {
        match self {
            GatherSpec::Dense(v) => v.len(),
            GatherSpec::PopA { t, s, qn, g, m } => g * m * (t * s) * ((t - 1) * qn),
        }
    }

    /// Calls `f(flat_output_index, source_index, source_flat_index)` for every
    /// output element; fills are reported as `(e, GATHER_FILL, 0)`.
    #[inline]
    fn for_each(&self, mut f: impl FnMut(usize, u32, u32)) {
        match self {
            GatherSpec::Dense(v) => {
                for (e, &(s, fl)) in v.iter().enumerate() {
                    f(e, s, fl);
                }
            }
            GatherSpec::PopA { t, s, qn, g, m } => {
                let (t, s, qn, g, m) = (*t, *s, *qn, *g, *m);
                let kcount = t - 1;
                let mut e = 0usize;
                for y in 0..g {
                    for j in 0..m {
                        for i1 in 0..t {
                            for qx in 0..s {
                                for k in 0..kcount {
                                    let base_rows = (k + 1) * s;
                                    let row_ok = k >= i1; // k > i with i = i1 - 1
                                    for u in 0..qn {
                                        if row_ok {
                                            let flat = if m == 1 {
                                                (i1 * s + qx) * s + (u * g + y)
                                            } else {
                                                ((j * base_rows + i1 * s + qx) * s) + (u * g + y)
                                            };
                                            f(e, k as u32, flat as u32);
                                        } else {
                                            f(e, GATHER_FILL, 0);
                                        }
                                        e += 1;
                                    }
                                }
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Handle to a tape node.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(pub(crate) usize);

enum Op<F: Real> {
    Leaf { requires_grad: bool },
    /// Recorded in no-grad mode; carries nothing.
    Eval,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Neg(Var),
    Scale(Var, F),
    AddRow(Var, Var),
    Matmul(Var, Var),
    Transpose(Var),
    Reshape(Var),
    ConcatRows { parts: Vec<Var>, batch: usize },
    SliceRows { src: Var, from: usize },
    SliceCols { src: Var, from: usize },
    RowGather { src: Var, rows: Vec<usize> },
    GatherFill { src: Var, idx: Arc<Vec<u32>> },
    CausalMask(Var),
    Softmax(Var),
    LogSoftmax(Var),
    PickPerRow { src: Var, cols: Vec<usize> },
    LayerNorm { x: Var, gain: Var, bias: Var, mean: Vec<F>, inv_std: Vec<F> },
    Logistic(Var),
    Relu(Var),
    Dropout { src: Var, keep: Vec<F> },
    SumAll(Var),
    LogSumExpLast(Var),
    ToSignedLog(Var),
    LogAddExp(Var, Var),
    LogMatmul { a: Var, b: Var, dims: LmDims },
    GatherLogMatmul { srcs: Vec<Var>, idx: GatherSpec, b: Var, dims: LmDims },
    SignedExpNorm { mag: Var, z: Var },
    SupScan { actions: Var, pushed: Var, hist: Vec<F> },
}

/// Dimensions of a (possibly batched) log-space matmul: `[batch, p, k] x
/// [batch, k, q] -> [batch, p, q]` with optional broadcast of either operand
/// across the batch axis.
#[derive(Clone, Copy)]
struct LmDims {
    batch: usize,
    p: usize,
    k: usize,
    q: usize,
    a_bcast: bool,
    b_bcast: bool,
}

struct Node<F: Real> {
    shape: Vec<usize>,
    data: Vec<F>,
    sign: Option<Vec<i8>>,
    needs_grad: bool,
    op: Op<F>,
}

pub struct Tape<F: Real> {
    nodes: Vec<Node<F>>,
    grads: Vec<Option<Vec<F>>>,
    grad_enabled: bool,
    backward_done: bool,
}

impl<F: Real> Default for Tape<F> {
    fn default() -> Self {
        Self::new()
    }
}

impl<F: Real> Tape<F> {
    pub fn new() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: true, backward_done: false }
    }

    /// A tape that records values only; `backward` on it is a contract error.
    pub fn no_grad() -> Self {
        Self { nodes: Vec::new(), grads: Vec::new(), grad_enabled: false, backward_done: false }
    }

    fn push(&mut self, shape: Vec<usize>, data: Vec<F>, sign: Option<Vec<i8>>, op: Op<F>) -> Var {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        if let Some(s) = &sign {
            debug_assert_eq!(s.len(), data.len());
        }
        let needs_grad = match &op {
            Op::Leaf { requires_grad } => *requires_grad,
            Op::Eval => false,
            other => self.any_input_needs_grad(other),
        };
        let op = if self.grad_enabled { op } else { Op::Eval };
        let needs_grad = needs_grad && self.grad_enabled;
        self.nodes.push(Node { shape, data, sign, needs_grad, op });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn any_input_needs_grad(&self, op: &Op<F>) -> bool {
        let mut needs = false;
        self.for_each_input(op, |v| needs |= self.nodes[v.0].needs_grad);
        needs
    }

    fn for_each_input(&self, op: &Op<F>, mut f: impl FnMut(Var)) {
        match op {
            Op::Leaf { .. } | Op::Eval => {}
            Op::Add(a, b)
            | Op::Sub(a, b)
            | Op::Mul(a, b)
            | Op::AddRow(a, b)
            | Op::Matmul(a, b)
            | Op::LogAddExp(a, b) => {
                f(*a);
                f(*b);
            }
            Op::Neg(a)
            | Op::Scale(a, _)
            | Op::Transpose(a)
            | Op::Reshape(a)
            | Op::CausalMask(a)
            | Op::Softmax(a)
            | Op::LogSoftmax(a)
            | Op::Logistic(a)
            | Op::Relu(a)
            | Op::SumAll(a)
            | Op::LogSumExpLast(a)
            | Op::ToSignedLog(a) => f(*a),
            Op::ConcatRows { parts, .. } => parts.iter().copied().for_each(f),
            Op::SliceRows { src, .. }
            | Op::SliceCols { src, .. }
            | Op::RowGather { src, .. }
            | Op::GatherFill { src, .. }
            | Op::PickPerRow { src, .. }
            | Op::Dropout { src, .. } => f(*src),
            Op::LayerNorm { x, gain, bias, .. } => {
                f(*x);
                f(*gain);
                f(*bias);
            }
            Op::LogMatmul { a, b, .. } => {
                f(*a);
                f(*b);
            }
            Op::GatherLogMatmul { srcs, b, .. } => {
                srcs.iter().copied().for_each(&mut f);
                f(*b);
            }
            Op::SignedExpNorm { mag, z } => {
                f(*mag);
                f(*z);
            }
            Op::SupScan { actions, pushed, .. } => {
                f(*actions);
                f(*pushed);
            }
        }
    }

    // -- accessors ----------------------------------------------------------

    pub fn shape(&self, v: Var) -> &[usize] {
        &self.nodes[v.0].shape
    }

    pub fn data(&self, v: Var) -> &[F] {
        &self.nodes[v.0].data
    }

    pub fn sign(&self, v: Var) -> Option<&[i8]> {
        self.nodes[v.0].sign.as_deref()
    }

    pub fn numel(&self, v: Var) -> usize {
        self.nodes[v.0].data.len()
    }

    /// Gradient of a node after `backward`; only leaves retain gradients.
    pub fn grad(&self, v: Var) -> Option<&[F]> {
        self.grads[v.0].as_deref()
    }

    pub fn value_tensor(&self, v: Var) -> Tensor<F> {
        Tensor::new(self.shape(v).to_vec(), self.data(v).to_vec()).expect("node shape consistent")
    }

    fn rows_cols(&self, v: Var) -> Result<(usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            1 => Ok((1, s[0])),
            2 => Ok((s[0], s[1])),
            _ => Err(Error::Dimension(format!("expected 1-D or 2-D, got {:?}", s))),
        }
    }

    // -- leaves --------------------------------------------------------------

    pub fn leaf(&mut self, t: &Tensor<F>) -> Var {
        self.push(
            t.shape().to_vec(),
            t.data().to_vec(),
            None,
            Op::Leaf { requires_grad: t.requires_grad },
        )
    }

    pub fn constant(&mut self, shape: Vec<usize>, data: Vec<F>) -> Var {
        self.push(shape, data, None, Op::Leaf { requires_grad: false })
    }

    pub fn constant_signed(&mut self, shape: Vec<usize>, data: Vec<F>, sign: Vec<i8>) -> Var {
        self.push(shape, data, Some(sign), Op::Leaf { requires_grad: false })
    }

    // -- elementwise / linear -------------------------------------------------

    fn check_same_shape(&self, a: Var, b: Var, what: &str) -> Result<()> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::Dimension(format!(
                "{}: shapes {:?} and {:?} differ",
                what,
                self.shape(a),
                self.shape(b)
            )));
        }
        Ok(())
    }

    fn combined_sign(&self, a: Var, b: Var) -> Option<Vec<i8>> {
        match (self.sign(a), self.sign(b)) {
            (None, None) => None,
            (sa, sb) => {
                let n = self.numel(a);
                let mut out = vec![1i8; n];
                for i in 0..n {
                    let x = sa.map_or(1, |s| s[i]);
                    let y = sb.map_or(1, |s| s[i]);
                    out[i] = x * y;
                }
                Some(out)
            }
        }
    }

    /// Elementwise sum. In signed log-space use this is a product of values,
    /// so signs multiply.
    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "add")?;
        let data =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x + y).collect::<Vec<_>>();
        let sign = self.combined_sign(a, b);
        Ok(self.push(self.shape(a).to_vec(), data, sign, Op::Add(a, b)))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "sub")?;
        debug_assert!(self.sign(a).is_none() && self.sign(b).is_none());
        let data =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x - y).collect::<Vec<_>>();
        Ok(self.push(self.shape(a).to_vec(), data, None, Op::Sub(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "mul")?;
        debug_assert!(self.sign(a).is_none() && self.sign(b).is_none());
        let data =
            self.data(a).iter().zip(self.data(b)).map(|(&x, &y)| x * y).collect::<Vec<_>>();
        Ok(self.push(self.shape(a).to_vec(), data, None, Op::Mul(a, b)))
    }

    pub fn neg(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| -x).collect::<Vec<_>>();
        self.push(self.shape(a).to_vec(), data, None, Op::Neg(a))
    }

    pub fn scale(&mut self, a: Var, c: F) -> Var {
        let data = self.data(a).iter().map(|&x| x * c).collect::<Vec<_>>();
        self.push(self.shape(a).to_vec(), data, None, Op::Scale(a, c))
    }

    /// `[r, c] + [1, c]` row broadcast (bias add).
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a)?;
        if self.numel(row) != c {
            return Err(Error::Dimension(format!(
                "add_row: row has {} elements, expected {}",
                self.numel(row),
                c
            )));
        }
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            for j in 0..c {
                data[i * c + j] += self.data(row)[j];
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, None, Op::AddRow(a, row)))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.rows_cols(a)?;
        let (k2, n) = self.rows_cols(b)?;
        if k != k2 {
            return Err(Error::Dimension(format!(
                "matmul inner extents disagree: {:?} vs {:?}",
                self.shape(a),
                self.shape(b)
            )));
        }
        let mut data = vec![F::ZERO; m * n];
        mm_acc(self.data(a), self.data(b), &mut data, m, k, n);
        Ok(self.push(vec![m, n], data, None, Op::Matmul(a, b)))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a)?;
        let src = self.data(a);
        let mut data = vec![F::ZERO; r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let sign = self.sign(a).map(|s| {
            let mut out = vec![1i8; r * c];
            for i in 0..r {
                for j in 0..c {
                    out[j * r + i] = s[i * c + j];
                }
            }
            out
        });
        Ok(self.push(vec![c, r], data, sign, Op::Transpose(a)))
    }

    pub fn reshape(&mut self, a: Var, shape: Vec<usize>) -> Result<Var> {
        if shape.iter().product::<usize>() != self.numel(a) {
            return Err(Error::Dimension(format!(
                "reshape {:?} -> {:?} changes element count",
                self.shape(a),
                shape
            )));
        }
        let data = self.data(a).to_vec();
        let sign = self.sign(a).map(|s| s.to_vec());
        Ok(self.push(shape, data, sign, Op::Reshape(a)))
    }

    /// Concatenates along the row axis; with `batch > 1` every part is
    /// `[batch, r_i, c]` and rows are concatenated within each batch slab.
    pub fn concat_rows(&mut self, parts: &[Var], batch: usize) -> Result<Var> {
        if parts.is_empty() {
            return Err(Error::Dimension("concat_rows of zero parts".into()));
        }
        let mut rows = Vec::with_capacity(parts.len());
        let mut cols = None;
        for &p in parts {
            let s = self.shape(p);
            let (b, r, c) = match s.len() {
                2 if batch == 1 => (1, s[0], s[1]),
                3 => (s[0], s[1], s[2]),
                _ => {
                    return Err(Error::Dimension(format!(
                        "concat_rows: bad part shape {:?} for batch {}",
                        s, batch
                    )))
                }
            };
            if b != batch {
                return Err(Error::Dimension(format!(
                    "concat_rows: part batch {} != {}",
                    b, batch
                )));
            }
            if *cols.get_or_insert(c) != c {
                return Err(Error::Dimension("concat_rows: column extents differ".into()));
            }
            rows.push(r);
        }
        let c = cols.unwrap();
        let total_rows: usize = rows.iter().sum();
        let any_sign = parts.iter().any(|&p| self.sign(p).is_some());
        let mut data = vec![F::ZERO; batch * total_rows * c];
        let mut sign = if any_sign { Some(vec![1i8; batch * total_rows * c]) } else { None };
        for bi in 0..batch {
            let mut row_off = 0;
            for (pi, &p) in parts.iter().enumerate() {
                let r = rows[pi];
                let src = self.data(p);
                let dst_start = (bi * total_rows + row_off) * c;
                let src_start = bi * r * c;
                data[dst_start..dst_start + r * c]
                    .copy_from_slice(&src[src_start..src_start + r * c]);
                if let Some(sg) = &mut sign {
                    if let Some(ps) = self.sign(p) {
                        sg[dst_start..dst_start + r * c]
                            .copy_from_slice(&ps[src_start..src_start + r * c]);
                    }
                }
                row_off += r;
            }
        }
        let shape = if batch == 1 { vec![total_rows, c] } else { vec![batch, total_rows, c] };
        Ok(self.push(shape, data, sign, Op::ConcatRows { parts: parts.to_vec(), batch }))
    }

    pub fn slice_rows(&mut self, src: Var, from: usize, to: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(src)?;
        if from > to || to > r {
            return Err(Error::Dimension(format!("slice_rows {}..{} out of {} rows", from, to, r)));
        }
        let data = self.data(src)[from * c..to * c].to_vec();
        let sign = self.sign(src).map(|s| s[from * c..to * c].to_vec());
        Ok(self.push(vec![to - from, c], data, sign, Op::SliceRows { src, from }))
    }

    pub fn slice_cols(&mut self, src: Var, from: usize, to: usize) -> Result<Var> {
        let (r, c) = self.rows_cols(src)?;
        if from > to || to > c {
            return Err(Error::Dimension(format!("slice_cols {}..{} out of {} cols", from, to, c)));
        }
        debug_assert!(self.sign(src).is_none());
        let w = to - from;
        let mut data = vec![F::ZERO; r * w];
        for i in 0..r {
            data[i * w..(i + 1) * w]
                .copy_from_slice(&self.data(src)[i * c + from..i * c + to]);
        }
        Ok(self.push(vec![r, w], data, None, Op::SliceCols { src, from }))
    }

    /// Selects rows of `src` by index (embedding lookup).
    pub fn row_gather(&mut self, src: Var, rows: Vec<usize>) -> Result<Var> {
        let (r, c) = self.rows_cols(src)?;
        if let Some(&bad) = rows.iter().find(|&&ix| ix >= r) {
            return Err(Error::Input(format!("row index {} out of {} rows", bad, r)));
        }
        let mut data = vec![F::ZERO; rows.len() * c];
        for (i, &ix) in rows.iter().enumerate() {
            data[i * c..(i + 1) * c].copy_from_slice(&self.data(src)[ix * c..(ix + 1) * c]);
        }
        Ok(self.push(vec![rows.len(), c], data, None, Op::RowGather { src, rows }))
    }

    /// General gather: `out[e] = idx[e] == GATHER_FILL ? fill : src[idx[e]]`.
    /// Signs propagate from the source; fill elements get sign +1.
    pub fn gather_fill(
        &mut self,
        src: Var,
        idx: Vec<u32>,
        out_shape: Vec<usize>,
        fill: F,
    ) -> Result<Var> {
        let n: usize = out_shape.iter().product();
        if idx.len() != n {
            return Err(Error::Dimension(format!(
                "gather_fill: {} indices for shape {:?}",
                idx.len(),
                out_shape
            )));
        }
        let src_len = self.numel(src);
        let sdata = self.data(src);
        let ssign = self.sign(src);
        let mut data = vec![F::ZERO; n];
        let mut sign = ssign.map(|_| vec![1i8; n]);
        for (e, &ix) in idx.iter().enumerate() {
            if ix == GATHER_FILL {
                data[e] = fill;
            } else {
                let ix = ix as usize;
                if ix >= src_len {
                    return Err(Error::Dimension(format!(
                        "gather_fill index {} out of {} elements",
                        ix, src_len
                    )));
                }
                data[e] = sdata[ix];
                if let (Some(sg), Some(ss)) = (&mut sign, ssign) {
                    sg[e] = ss[ix];
                }
            }
        }
        Ok(self.push(out_shape, data, sign, Op::GatherFill { src, idx: Arc::new(idx) }))
    }

    /// Sets entries above the diagonal of a square matrix to `-inf`.
    pub fn causal_mask(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a)?;
        if r != c {
            return Err(Error::Dimension(format!("causal_mask expects square, got {:?}", self.shape(a))));
        }
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            for j in i + 1..c {
                data[i * c + j] = F::NEG_INF;
            }
        }
        Ok(self.push(vec![r, c], data, None, Op::CausalMask(a)))
    }

    pub fn softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a)?;
        if c == 0 {
            return Err(Error::Dimension("softmax over empty axis".into()));
        }
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            softmax_row(&mut data[i * c..(i + 1) * c]);
        }
        Ok(self.push(self.shape(a).to_vec(), data, None, Op::Softmax(a)))
    }

    pub fn log_softmax(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a)?;
        if c == 0 {
            return Err(Error::Dimension("log_softmax over empty axis".into()));
        }
        let mut data = self.data(a).to_vec();
        for i in 0..r {
            let row = &mut data[i * c..(i + 1) * c];
            let z = log_sum_exp_row(row);
            row.iter_mut().for_each(|x| *x -= z);
        }
        Ok(self.push(self.shape(a).to_vec(), data, None, Op::LogSoftmax(a)))
    }

    /// `out[i, 0] = src[i, cols[i]]`.
    pub fn pick_per_row(&mut self, src: Var, cols: Vec<usize>) -> Result<Var> {
        let (r, c) = self.rows_cols(src)?;
        if cols.len() != r {
            return Err(Error::Dimension(format!("pick_per_row: {} picks for {} rows", cols.len(), r)));
        }
        if let Some(&bad) = cols.iter().find(|&&j| j >= c) {
            return Err(Error::Input(format!("column index {} out of {} columns", bad, c)));
        }
        let data = cols.iter().enumerate().map(|(i, &j)| self.data(src)[i * c + j]).collect();
        Ok(self.push(vec![r, 1], data, None, Op::PickPerRow { src, cols }))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: F) -> Result<Var> {
        let (r, d) = self.rows_cols(x)?;
        if self.numel(gain) != d || self.numel(bias) != d {
            return Err(Error::Dimension(format!(
                "layer_norm gain/bias must have extent {}, got {}/{}",
                d,
                self.numel(gain),
                self.numel(bias)
            )));
        }
        let mut data = vec![F::ZERO; r * d];
        let mut mean = vec![F::ZERO; r];
        let mut inv_std = vec![F::ZERO; r];
        for i in 0..r {
            let (m, s) = layer_norm_row(
                &self.data(x)[i * d..(i + 1) * d],
                self.data(gain),
                self.data(bias),
                eps,
                &mut data[i * d..(i + 1) * d],
            );
            mean[i] = m;
            inv_std[i] = s;
        }
        Ok(self.push(
            self.shape(x).to_vec(),
            data,
            None,
            Op::LayerNorm { x, gain, bias, mean, inv_std },
        ))
    }

    pub fn logistic(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| logistic_scalar(x)).collect::<Vec<_>>();
        self.push(self.shape(a).to_vec(), data, None, Op::Logistic(a))
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let data = self.data(a).iter().map(|&x| x.maxv(F::ZERO)).collect::<Vec<_>>();
        self.push(self.shape(a).to_vec(), data, None, Op::Relu(a))
    }

    /// Inverted dropout; eval mode returns the input var unchanged.
    pub fn dropout(&mut self, a: Var, p: f64, mode: Mode, rng: &mut Prng) -> Result<Var> {
        if !(0.0..1.0).contains(&p) {
            return Err(Error::Parameter(format!("dropout probability {} not in [0, 1)", p)));
        }
        if mode == Mode::Eval || p == 0.0 {
            return Ok(a);
        }
        let scale = F::from_f64(1.0 / (1.0 - p));
        let keep: Vec<F> = (0..self.numel(a))
            .map(|_| if rng.gen::<f64>() >= p { scale } else { F::ZERO })
            .collect();
        let data =
            self.data(a).iter().zip(&keep).map(|(&x, &k)| x * k).collect::<Vec<_>>();
        Ok(self.push(self.shape(a).to_vec(), data, None, Op::Dropout { src: a, keep }))
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let total = self.data(a).iter().copied().fold(F::ZERO, |acc, x| acc + x);
        self.push(vec![1], vec![total], None, Op::SumAll(a))
    }

    /// Log-sum-exp over the last axis of a 2-D tensor, yielding `[r, 1]`.
    pub fn logsumexp_last(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.rows_cols(a)?;
        if c == 0 {
            return Err(Error::Dimension("logsumexp over empty axis".into()));
        }
        debug_assert!(self.sign(a).is_none());
        let data =
            (0..r).map(|i| log_sum_exp_row(&self.data(a)[i * c..(i + 1) * c])).collect();
        Ok(self.push(vec![r, 1], data, None, Op::LogSumExpLast(a)))
    }

    /// Splits a linear-space tensor into `(log-magnitude, sign)`.
    ///
    /// Exactly-zero inputs map to `(-inf, +1)` and receive zero gradient; the
    /// network only routes strictly positive values (logistic outputs) here.
    pub fn to_signed_log(&mut self, a: Var) -> Var {
        let n = self.numel(a);
        let mut data = vec![F::ZERO; n];
        let mut sign = vec![1i8; n];
        for (e, &x) in self.data(a).iter().enumerate() {
            let (m, s) = super::logspace::to_signed_log(x);
            data[e] = m;
            sign[e] = s;
        }
        self.push(self.shape(a).to_vec(), data, Some(sign), Op::ToSignedLog(a))
    }

    /// Elementwise log-space addition `ln(e^a + e^b)`, sign-aware.
    pub fn log_add_exp(&mut self, a: Var, b: Var) -> Result<Var> {
        self.check_same_shape(a, b, "log_add_exp")?;
        let n = self.numel(a);
        let sa = self.sign(a);
        let sb = self.sign(b);
        let signed = sa.is_some() || sb.is_some();
        let mut data = vec![F::ZERO; n];
        let mut sign = if signed { Some(vec![1i8; n]) } else { None };
        for e in 0..n {
            let (m, s) = signed_log_add_exp(
                self.data(a)[e],
                sa.map_or(1, |s| s[e]),
                self.data(b)[e],
                sb.map_or(1, |s| s[e]),
            );
            data[e] = m;
            if let Some(sg) = &mut sign {
                sg[e] = s;
            }
        }
        Ok(self.push(self.shape(a).to_vec(), data, sign, Op::LogAddExp(a, b)))
    }

    // -- log-space matmuls ----------------------------------------------------

    fn lm_dims(&self, a: Var, b: Var, batch: usize) -> Result<LmDims> {
        let (ab, p, k) = self.batched_dims(a)?;
        let (bb, k2, q) = self.batched_dims(b)?;
        let a_bcast = ab == 1 && batch > 1;
        let b_bcast = bb == 1 && batch > 1;
        if (ab != batch && !a_bcast) || (bb != batch && !b_bcast) {
            return Err(Error::Dimension(format!(
                "log_matmul: batch extents {}/{} incompatible with {}",
                ab, bb, batch
            )));
        }
        if k != k2 {
            return Err(Error::Dimension(format!(
                "log_matmul inner extents disagree: {} vs {}",
                k, k2
            )));
        }
        Ok(LmDims { batch, p, k, q, a_bcast, b_bcast })
    }

    fn batched_dims(&self, v: Var) -> Result<(usize, usize, usize)> {
        let s = self.shape(v);
        match s.len() {
            2 => Ok((1, s[0], s[1])),
            3 => Ok((s[0], s[1], s[2])),
            _ => Err(Error::Dimension(format!("expected 2-D or 3-D, got {:?}", s))),
        }
    }

    /// Log-space matmul: `C[b,i,j] = lse_k(A[b,i,k] + B[b,k,j])` with signs.
    pub fn log_matmul(&mut self, a: Var, b: Var, batch: usize) -> Result<Var> {
        let dims = self.lm_dims(a, b, batch)?;
        let signed = self.sign(a).is_some() || self.sign(b).is_some();
        let (data, sign) = lm_forward(
            self.data(a),
            self.sign(a),
            self.data(b),
            self.sign(b),
            dims,
            signed,
        );
        let shape = if batch == 1 { vec![dims.p, dims.q] } else { vec![batch, dims.p, dims.q] };
        Ok(self.push(shape, data, sign, Op::LogMatmul { a, b, dims }))
    }

    /// Fused gather + log-space matmul.
    ///
    /// The left operand is materialized on the fly from `(source, flat-index)`
    /// pairs (`GATHER_FILL` source = `-inf`), used for the contraction and
    /// discarded; backward re-gathers it. This keeps the O(n^3) inner-weight
    /// contraction of the VPDA dynamic program from retaining its gathered
    /// operands.
    pub fn gather_log_matmul(
        &mut self,
        srcs: &[Var],
        idx: GatherSpec,
        p: usize,
        k: usize,
        b: Var,
        batch: usize,
    ) -> Result<Var> {
        if idx.len() != batch * p * k {
            return Err(Error::Dimension(format!(
                "gather_log_matmul: {} indices for batch {} x {} x {}",
                idx.len(),
                batch,
                p,
                k
            )));
        }
        let (bb, k2, q) = self.batched_dims(b)?;
        if bb != batch || k2 != k {
            return Err(Error::Dimension(format!(
                "gather_log_matmul: b shape {:?} incompatible",
                self.shape(b)
            )));
        }
        if let GatherSpec::Dense(pairs) = &idx {
            for &(s, f) in pairs.iter() {
                if s != GATHER_FILL {
                    let s = s as usize;
                    if s >= srcs.len() || f as usize >= self.numel(srcs[s]) {
                        return Err(Error::Dimension(
                            "gather_log_matmul: index out of range".into(),
                        ));
                    }
                }
            }
        }
        let dims = LmDims { batch, p, k, q, a_bcast: false, b_bcast: false };
        let a_signed = srcs.iter().any(|&s| self.sign(s).is_some());
        let signed = a_signed || self.sign(b).is_some();
        let (amag, asign) = materialize_gather(&self.nodes, srcs, &idx, a_signed);
        let (data, sign) =
            lm_forward(&amag, asign.as_deref(), self.data(b), self.sign(b), dims, signed);
        let shape = vec![batch, p, q];
        Ok(self.push(
            shape,
            data,
            sign,
            Op::GatherLogMatmul { srcs: srcs.to_vec(), idx, b, dims },
        ))
    }

    /// Converts signed log magnitudes to linear space with a shared log
    /// normalizer: `out = sign * exp(mag - z)`. A `-inf` normalizer yields the
    /// zero vector (degenerate total weight).
    pub fn signed_exp_norm(&mut self, mag: Var, z: Var) -> Result<Var> {
        if self.numel(z) != 1 {
            return Err(Error::Dimension("signed_exp_norm: z must be scalar".into()));
        }
        let zv = self.data(z)[0];
        let n = self.numel(mag);
        let mut data = vec![F::ZERO; n];
        if zv != F::NEG_INF {
            for e in 0..n {
                let m = self.data(mag)[e];
                if m != F::NEG_INF {
                    let s = self.sign(mag).map_or(1, |s| s[e]);
                    let v = (m - zv).exp();
                    data[e] = if s >= 0 { v } else { -v };
                }
            }
        }
        Ok(self.push(self.shape(mag).to_vec(), data, None, Op::SignedExpNorm { mag, z }))
    }

    // -- superposition scan ---------------------------------------------------

    /// Runs the full superposition-stack recurrence over a sequence.
    ///
    /// `actions` is `[n, 3]` (push, no-op, pop per step), `pushed` is `[n, m]`;
    /// the result is the `[n, m]` matrix of stack readings (top elements).
    pub fn sup_scan(&mut self, actions: Var, pushed: Var) -> Result<Var> {
        let (n, three) = self.rows_cols(actions)?;
        if three != 3 {
            return Err(Error::Dimension(format!(
                "sup_scan: actions must be [n, 3], got {:?}",
                self.shape(actions)
            )));
        }
        let (n2, m) = self.rows_cols(pushed)?;
        if n2 != n {
            return Err(Error::Dimension(format!(
                "sup_scan: {} action rows vs {} pushed rows",
                n, n2
            )));
        }
        // hist stores V_1..V_n back to back; V_t has t rows of width m.
        let mut hist = vec![F::ZERO; m * n * (n + 1) / 2];
        let mut out = vec![F::ZERO; n * m];
        let act = self.data(actions);
        let push_vecs = self.data(pushed);
        let mut prev_off = 0usize;
        for t in 1..=n {
            let (p, no, o) =
                (act[(t - 1) * 3], act[(t - 1) * 3 + 1], act[(t - 1) * 3 + 2]);
            let v = &push_vecs[(t - 1) * m..t * m];
            let cur_off = m * t * (t - 1) / 2;
            let (lo, hi) = hist.split_at_mut(cur_off);
            let prev = &lo[prev_off..];
            let cur = &mut hi[..t * m];
            for j in 0..t {
                let row = &mut cur[j * m..(j + 1) * m];
                for e in 0..m {
                    let above = if j == 0 { v[e] } else { prev[(j - 1) * m + e] };
                    let at = if j < t - 1 { prev[j * m + e] } else { F::ZERO };
                    let below = if j + 2 < t { prev[(j + 1) * m + e] } else { F::ZERO };
                    row[e] = p * above + no * at + o * below;
                }
            }
            out[(t - 1) * m..t * m].copy_from_slice(&cur[..m]);
            prev_off = cur_off;
        }
        Ok(self.push(vec![n, m], out, None, Op::SupScan { actions, pushed, hist }))
    }

    // -- backward -------------------------------------------------------------

    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if !self.grad_enabled {
            return Err(Error::Contract("tape was built in no-grad mode".into()));
        }
        if self.backward_done {
            return Err(Error::Contract(
                "backward already replayed on this tape; build a fresh tape".into(),
            ));
        }
        if self.numel(loss) != 1 {
            return Err(Error::Contract(format!(
                "backward root must be scalar, got shape {:?}",
                self.shape(loss)
            )));
        }
        self.backward_done = true;
        self.grads[loss.0] = Some(vec![F::ONE]);
        for i in (0..=loss.0).rev() {
            if self.grads[i].is_none() || !self.nodes[i].needs_grad {
                continue;
            }
            if matches!(self.nodes[i].op, Op::Leaf { .. }) {
                continue; // keep leaf gradients readable
            }
            let g = self.grads[i].take().expect("checked above");
            self.step_backward(i, &g);
        }
        Ok(())
    }


    fn acc_into(grads: &mut [Option<Vec<F>>], v: Var, n: usize, f: impl FnOnce(&mut [F])) {
        let buf = grads[v.0].get_or_insert_with(|| vec![F::ZERO; n]);
        f(buf);
    }

    fn step_backward(&mut self, i: usize, g: &[F]) {
        // Split borrows: nodes are read-only here, gradients are written.
        let nodes = std::mem::take(&mut self.nodes);
        let node = &nodes[i];
        {
            let grads = &mut self.grads;
            let needs = |v: Var| nodes[v.0].needs_grad;
            let numel = |v: Var| nodes[v.0].data.len();
            let data = |v: Var| nodes[v.0].data.as_slice();
            let sgn = |v: Var| nodes[v.0].sign.as_deref();
            match &node.op {
                Op::Leaf { .. } | Op::Eval => {}
                Op::Add(a, b) => {
                    for &v in [a, b].iter() {
                        if needs(*v) {
                            Self::acc_into(grads, *v, numel(*v), |buf| {
                                buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv)
                            });
                        }
                    }
                }
                Op::Sub(a, b) => {
                    if needs(*a) {
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv)
                        });
                    }
                    if needs(*b) {
                        Self::acc_into(grads, *b, numel(*b), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &gv)| *o -= gv)
                        });
                    }
                }
                Op::Mul(a, b) => {
                    if needs(*a) {
                        let bd = data(*b);
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                *o += g[e] * bd[e];
                            }
                        });
                    }
                    if needs(*b) {
                        let ad = data(*a);
                        Self::acc_into(grads, *b, numel(*b), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                *o += g[e] * ad[e];
                            }
                        });
                    }
                }
                Op::Neg(a) => {
                    if needs(*a) {
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &gv)| *o -= gv)
                        });
                    }
                }
                Op::Scale(a, c) => {
                    if needs(*a) {
                        let c = *c;
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv * c)
                        });
                    }
                }
                Op::AddRow(a, row) => {
                    let c = numel(*row);
                    if needs(*a) {
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv)
                        });
                    }
                    if needs(*row) {
                        let r = numel(*a) / c;
                        Self::acc_into(grads, *row, c, |buf| {
                            for i in 0..r {
                                for j in 0..c {
                                    buf[j] += g[i * c + j];
                                }
                            }
                        });
                    }
                }
                Op::Matmul(a, b) => {
                    let (m, k) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                    let n = nodes[b.0].shape[1];
                    if needs(*a) {
                        let bd = data(*b);
                        Self::acc_into(grads, *a, m * k, |buf| {
                            mm_nt_acc(g, bd, buf, m, n, k);
                        });
                    }
                    if needs(*b) {
                        let ad = data(*a);
                        Self::acc_into(grads, *b, k * n, |buf| {
                            mm_tn_acc(ad, g, buf, m, k, n);
                        });
                    }
                }
                Op::Transpose(a) => {
                    if needs(*a) {
                        let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                        Self::acc_into(grads, *a, r * c, |buf| {
                            for ii in 0..r {
                                for j in 0..c {
                                    buf[ii * c + j] += g[j * r + ii];
                                }
                            }
                        });
                    }
                }
                Op::Reshape(a) => {
                    if needs(*a) {
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            buf.iter_mut().zip(g).for_each(|(o, &gv)| *o += gv)
                        });
                    }
                }
                Op::ConcatRows { parts, batch } => {
                    let c = *node.shape.last().unwrap();
                    let total_rows = node.data.len() / (batch * c);
                    let mut row_offsets = Vec::with_capacity(parts.len());
                    let mut off = 0;
                    for &p in parts {
                        let r = nodes[p.0].data.len() / (batch * c);
                        row_offsets.push((off, r));
                        off += r;
                    }
                    for (pi, &p) in parts.iter().enumerate() {
                        if !needs(p) {
                            continue;
                        }
                        let (row_off, r) = row_offsets[pi];
                        Self::acc_into(grads, p, numel(p), |buf| {
                            for bi in 0..*batch {
                                let src = (bi * total_rows + row_off) * c;
                                let dst = bi * r * c;
                                for e in 0..r * c {
                                    buf[dst + e] += g[src + e];
                                }
                            }
                        });
                    }
                }
                Op::SliceRows { src, from } => {
                    if needs(*src) {
                        let c = nodes[src.0].shape[1];
                        let start = from * c;
                        Self::acc_into(grads, *src, numel(*src), |buf| {
                            for (e, &gv) in g.iter().enumerate() {
                                buf[start + e] += gv;
                            }
                        });
                    }
                }
                Op::SliceCols { src, from } => {
                    if needs(*src) {
                        let c = nodes[src.0].shape[1];
                        let w = node.shape[1];
                        let r = node.shape[0];
                        Self::acc_into(grads, *src, numel(*src), |buf| {
                            for ii in 0..r {
                                for j in 0..w {
                                    buf[ii * c + from + j] += g[ii * w + j];
                                }
                            }
                        });
                    }
                }
                Op::RowGather { src, rows } => {
                    if needs(*src) {
                        let c = nodes[src.0].shape[1];
                        Self::acc_into(grads, *src, numel(*src), |buf| {
                            for (i, &ix) in rows.iter().enumerate() {
                                for j in 0..c {
                                    buf[ix * c + j] += g[i * c + j];
                                }
                            }
                        });
                    }
                }
                Op::GatherFill { src, idx } => {
                    if needs(*src) {
                        Self::acc_into(grads, *src, numel(*src), |buf| {
                            for (e, &ix) in idx.iter().enumerate() {
                                if ix != GATHER_FILL {
                                    buf[ix as usize] += g[e];
                                }
                            }
                        });
                    }
                }
                Op::CausalMask(a) => {
                    if needs(*a) {
                        let n = node.shape[0];
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            for ii in 0..n {
                                for j in 0..=ii {
                                    buf[ii * n + j] += g[ii * n + j];
                                }
                            }
                        });
                    }
                }
                Op::Softmax(a) => {
                    if needs(*a) {
                        let (r, c) = (node.shape[0], node.shape[1]);
                        let y = &node.data;
                        Self::acc_into(grads, *a, r * c, |buf| {
                            for ii in 0..r {
                                let yrow = &y[ii * c..(ii + 1) * c];
                                let grow = &g[ii * c..(ii + 1) * c];
                                let mut dot = F::ZERO;
                                for j in 0..c {
                                    dot += yrow[j] * grow[j];
                                }
                                for j in 0..c {
                                    buf[ii * c + j] += yrow[j] * (grow[j] - dot);
                                }
                            }
                        });
                    }
                }
                Op::LogSoftmax(a) => {
                    if needs(*a) {
                        let (r, c) = (node.shape[0], node.shape[1]);
                        let y = &node.data;
                        Self::acc_into(grads, *a, r * c, |buf| {
                            for ii in 0..r {
                                let grow = &g[ii * c..(ii + 1) * c];
                                let mut tot = F::ZERO;
                                for j in 0..c {
                                    tot += grow[j];
                                }
                                for j in 0..c {
                                    buf[ii * c + j] += grow[j] - y[ii * c + j].exp() * tot;
                                }
                            }
                        });
                    }
                }
                Op::PickPerRow { src, cols } => {
                    if needs(*src) {
                        let c = nodes[src.0].shape[1];
                        Self::acc_into(grads, *src, numel(*src), |buf| {
                            for (ii, &j) in cols.iter().enumerate() {
                                buf[ii * c + j] += g[ii];
                            }
                        });
                    }
                }
                Op::LayerNorm { x, gain, bias, mean, inv_std } => {
                    let (r, d) = (node.shape[0], node.shape[1]);
                    let xd = data(*x);
                    let gd = data(*gain);
                    if needs(*bias) {
                        Self::acc_into(grads, *bias, d, |buf| {
                            for ii in 0..r {
                                for j in 0..d {
                                    buf[j] += g[ii * d + j];
                                }
                            }
                        });
                    }
                    if needs(*gain) {
                        Self::acc_into(grads, *gain, d, |buf| {
                            for ii in 0..r {
                                for j in 0..d {
                                    let xh = (xd[ii * d + j] - mean[ii]) * inv_std[ii];
                                    buf[j] += g[ii * d + j] * xh;
                                }
                            }
                        });
                    }
                    if needs(*x) {
                        let dn = F::from_f64(d as f64);
                        Self::acc_into(grads, *x, r * d, |buf| {
                            for ii in 0..r {
                                let mut gy_mean = F::ZERO;
                                let mut gyxh_mean = F::ZERO;
                                for j in 0..d {
                                    let gy = g[ii * d + j] * gd[j];
                                    let xh = (xd[ii * d + j] - mean[ii]) * inv_std[ii];
                                    gy_mean += gy;
                                    gyxh_mean += gy * xh;
                                }
                                gy_mean /= dn;
                                gyxh_mean /= dn;
                                for j in 0..d {
                                    let gy = g[ii * d + j] * gd[j];
                                    let xh = (xd[ii * d + j] - mean[ii]) * inv_std[ii];
                                    buf[ii * d + j] +=
                                        inv_std[ii] * (gy - gy_mean - xh * gyxh_mean);
                                }
                            }
                        });
                    }
                }
                Op::Logistic(a) => {
                    if needs(*a) {
                        let y = &node.data;
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                *o += g[e] * y[e] * (F::ONE - y[e]);
                            }
                        });
                    }
                }
                Op::Relu(a) => {
                    if needs(*a) {
                        let xd = data(*a);
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                if xd[e] > F::ZERO {
                                    *o += g[e];
                                }
                            }
                        });
                    }
                }
                Op::Dropout { src, keep } => {
                    if needs(*src) {
                        Self::acc_into(grads, *src, numel(*src), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                *o += g[e] * keep[e];
                            }
                        });
                    }
                }
                Op::SumAll(a) => {
                    if needs(*a) {
                        let gv = g[0];
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            buf.iter_mut().for_each(|o| *o += gv)
                        });
                    }
                }
                Op::LogSumExpLast(a) => {
                    if needs(*a) {
                        let (r, c) = (nodes[a.0].shape[0], nodes[a.0].shape[1]);
                        let xd = data(*a);
                        let y = &node.data;
                        Self::acc_into(grads, *a, r * c, |buf| {
                            for ii in 0..r {
                                if y[ii] == F::NEG_INF || g[ii] == F::ZERO {
                                    continue;
                                }
                                for j in 0..c {
                                    let x = xd[ii * c + j];
                                    if x != F::NEG_INF {
                                        buf[ii * c + j] += g[ii] * (x - y[ii]).exp();
                                    }
                                }
                            }
                        });
                    }
                }
                Op::ToSignedLog(a) => {
                    if needs(*a) {
                        let xd = data(*a);
                        Self::acc_into(grads, *a, numel(*a), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                if xd[e] != F::ZERO {
                                    *o += g[e] / xd[e];
                                }
                            }
                        });
                    }
                }
                Op::LogAddExp(a, b) => {
                    let cmag = &node.data;
                    let csig = node.sign.as_deref();
                    for &v in [a, b].iter() {
                        if !needs(*v) {
                            continue;
                        }
                        let vd = data(*v);
                        let vs = sgn(*v);
                        Self::acc_into(grads, *v, numel(*v), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                if cmag[e] == F::NEG_INF
                                    || vd[e] == F::NEG_INF
                                    || g[e] == F::ZERO
                                {
                                    continue;
                                }
                                let sv = vs.map_or(1, |s| s[e]);
                                let sc = csig.map_or(1, |s| s[e]);
                                let w = (vd[e] - cmag[e]).exp();
                                let w = if sv * sc >= 0 { w } else { -w };
                                *o += g[e] * w;
                            }
                        });
                    }
                }
                Op::LogMatmul { a, b, dims } => {
                    lm_backward(
                        g,
                        &node.data,
                        node.sign.as_deref(),
                        LmOperand::Node(*a),
                        *b,
                        *dims,
                        &nodes,
                        grads,
                    );
                }
                Op::GatherLogMatmul { srcs, idx, b, dims } => {
                    lm_backward(
                        g,
                        &node.data,
                        node.sign.as_deref(),
                        LmOperand::Gather { srcs, idx },
                        *b,
                        *dims,
                        &nodes,
                        grads,
                    );
                }
                Op::SignedExpNorm { mag, z } => {
                    let out = &node.data;
                    if needs(*mag) {
                        Self::acc_into(grads, *mag, numel(*mag), |buf| {
                            for (e, o) in buf.iter_mut().enumerate() {
                                *o += g[e] * out[e];
                            }
                        });
                    }
                    if needs(*z) {
                        let mut dz = F::ZERO;
                        for (e, &gv) in g.iter().enumerate() {
                            dz -= gv * out[e];
                        }
                        Self::acc_into(grads, *z, 1, |buf| buf[0] += dz);
                    }
                }
                Op::SupScan { actions, pushed, hist } => {
                    let n = node.shape[0];
                    let m = node.shape[1];
                    let act = data(*actions);
                    let push_vecs = data(*pushed);
                    let mut g_act = vec![F::ZERO; n * 3];
                    let mut g_push = vec![F::ZERO; n * m];
                    let mut gv = vec![F::ZERO; n * m];
                    for t in (1..=n).rev() {
                        for e in 0..m {
                            gv[e] += g[(t - 1) * m + e];
                        }
                        let (p, no, o) =
                            (act[(t - 1) * 3], act[(t - 1) * 3 + 1], act[(t - 1) * 3 + 2]);
                        let v = &push_vecs[(t - 1) * m..t * m];
                        let prev: &[F] = if t >= 2 {
                            let prev_off = m * (t - 1) * (t - 2) / 2;
                            &hist[prev_off..prev_off + (t - 1) * m]
                        } else {
                            &[]
                        };
                        let mut gprev = vec![F::ZERO; (t - 1) * m];
                        for j in 0..t {
                            let gj = &gv[j * m..(j + 1) * m];
                            let mut da = [F::ZERO; 3];
                            for e in 0..m {
                                let above = if j == 0 { v[e] } else { prev[(j - 1) * m + e] };
                                let at = if j < t - 1 { prev[j * m + e] } else { F::ZERO };
                                let below = if j + 2 < t { prev[(j + 1) * m + e] } else { F::ZERO };
                                da[0] += gj[e] * above;
                                da[1] += gj[e] * at;
                                da[2] += gj[e] * below;
                            }
                            g_act[(t - 1) * 3] += da[0];
                            g_act[(t - 1) * 3 + 1] += da[1];
                            g_act[(t - 1) * 3 + 2] += da[2];
                            for e in 0..m {
                                if j == 0 {
                                    g_push[(t - 1) * m + e] += p * gj[e];
                                } else {
                                    gprev[(j - 1) * m + e] += p * gj[e];
                                }
                                if j < t - 1 {
                                    gprev[j * m + e] += no * gj[e];
                                }
                                if j + 2 < t {
                                    gprev[(j + 1) * m + e] += o * gj[e];
                                }
                            }
                        }
                        gv = gprev;
                    }
                    if needs(*actions) {
                        Self::acc_into(grads, *actions, n * 3, |buf| {
                            buf.iter_mut().zip(&g_act).for_each(|(o, &gv)| *o += gv)
                        });
                    }
                    if needs(*pushed) {
                        Self::acc_into(grads, *pushed, n * m, |buf| {
                            buf.iter_mut().zip(&g_push).for_each(|(o, &gv)| *o += gv)
                        });
                    }
                }
            }
        }
        self.nodes = nodes;
    }
}

// ---------------------------------------------------------------------------
// Log-matmul kernels.
// ---------------------------------------------------------------------------

/// Builds `sign * exp(x - rowmax)` factors for one `p x k` slab; `-inf` rows
/// yield all-zero factors. Returns (factors, row maxima).
fn scaled_rows<F: Real>(x: &[F], sign: Option<&[i8]>, p: usize, k: usize) -> (Vec<F>, Vec<F>) {
    let mut out = vec![F::ZERO; p * k];
    let mut maxes = vec![F::NEG_INF; p];
    for i in 0..p {
        let row = &x[i * k..(i + 1) * k];
        let mut m = F::NEG_INF;
        for &v in row {
            if v > m {
                m = v;
            }
        }
        maxes[i] = m;
        if m == F::NEG_INF {
            continue;
        }
        let orow = &mut out[i * k..(i + 1) * k];
        for (j, &v) in row.iter().enumerate() {
            if v != F::NEG_INF {
                let f = (v - m).exp();
                let s = sign.map_or(1, |s| s[i * k + j]);
                orow[j] = if s >= 0 { f } else { -f };
            }
        }
    }
    (out, maxes)
}

/// Column version of [`scaled_rows`] for a `k x q` slab.
fn scaled_cols<F: Real>(x: &[F], sign: Option<&[i8]>, k: usize, q: usize) -> (Vec<F>, Vec<F>) {
    let mut maxes = vec![F::NEG_INF; q];
    for i in 0..k {
        for j in 0..q {
            let v = x[i * q + j];
            if v > maxes[j] {
                maxes[j] = v;
            }
        }
    }
    let mut out = vec![F::ZERO; k * q];
    for i in 0..k {
        for j in 0..q {
            let v = x[i * q + j];
            if v != F::NEG_INF {
                let f = (v - maxes[j]).exp();
                let s = sign.map_or(1, |s| s[i * q + j]);
                out[i * q + j] = if s >= 0 { f } else { -f };
            }
        }
    }
    (out, maxes)
}

fn lm_forward<F: Real>(
    a: &[F],
    a_sign: Option<&[i8]>,
    b: &[F],
    b_sign: Option<&[i8]>,
    dims: LmDims,
    signed: bool,
) -> (Vec<F>, Option<Vec<i8>>) {
    let LmDims { batch, p, k, q, a_bcast, b_bcast } = dims;
    let mut data = vec![F::ZERO; batch * p * q];
    let mut sign = if signed { Some(vec![1i8; batch * p * q]) } else { None };
    let mut cached_a: Option<(Vec<F>, Vec<F>)> = None;
    let mut cached_b: Option<(Vec<F>, Vec<F>)> = None;
    for bi in 0..batch {
        let a_off = if a_bcast { 0 } else { bi * p * k };
        let b_off = if b_bcast { 0 } else { bi * k * q };
        let (af, am) = if a_bcast {
            cached_a.get_or_insert_with(|| {
                scaled_rows(&a[..p * k], a_sign.map(|s| &s[..p * k]), p, k)
            })
        } else {
            cached_a = Some(scaled_rows(
                &a[a_off..a_off + p * k],
                a_sign.map(|s| &s[a_off..a_off + p * k]),
                p,
                k,
            ));
            cached_a.as_ref().unwrap()
        };
        let (bf, bm) = if b_bcast {
            cached_b.get_or_insert_with(|| {
                scaled_cols(&b[..k * q], b_sign.map(|s| &s[..k * q]), k, q)
            })
        } else {
            cached_b = Some(scaled_cols(
                &b[b_off..b_off + k * q],
                b_sign.map(|s| &s[b_off..b_off + k * q]),
                k,
                q,
            ));
            cached_b.as_ref().unwrap()
        };
        let mut c_lin = vec![F::ZERO; p * q];
        mm_acc(af, bf, &mut c_lin, p, k, q);
        let out = &mut data[bi * p * q..(bi + 1) * p * q];
        for i in 0..p {
            for j in 0..q {
                let v = c_lin[i * q + j];
                let e = i * q + j;
                if v == F::ZERO || am[i] == F::NEG_INF || bm[j] == F::NEG_INF {
                    out[e] = F::NEG_INF;
                } else {
                    out[e] = v.abs().ln() + am[i] + bm[j];
                    if let Some(sg) = &mut sign {
                        sg[bi * p * q + e] = if v >= F::ZERO { 1 } else { -1 };
                    }
                }
            }
        }
    }
    (data, sign)
}

fn materialize_gather<F: Real>(
    nodes: &[Node<F>],
    srcs: &[Var],
    idx: &GatherSpec,
    signed: bool,
) -> (Vec<F>, Option<Vec<i8>>) {
    let mut mag = vec![F::NEG_INF; idx.len()];
    let mut sign = if signed { Some(vec![1i8; idx.len()]) } else { None };
    match &mut sign {
        Some(sg) => idx.for_each(|e, s, f| {
            if s != GATHER_FILL {
                let (s, f) = (s as usize, f as usize);
                mag[e] = nodes[srcs[s].0].data[f];
                sg[e] = nodes[srcs[s].0].sign.as_deref().map_or(1, |ss| ss[f]);
            }
        }),
        None => idx.for_each(|e, s, f| {
            if s != GATHER_FILL {
                mag[e] = nodes[srcs[s as usize].0].data[f as usize];
            }
        }),
    }
    (mag, sign)
}

enum LmOperand<'a> {
    Node(Var),
    Gather { srcs: &'a [Var], idx: &'a GatherSpec },
}

/// Backward for (gathered) log matmul.
///
/// For output cell `C = ln|sum_k s e^{A+B}|`, `dC/dA[i,k] = s_A s_B s_C
/// e^{A+B-C}`. Contributions are accumulated with per-row (for `gA`) and
/// per-column (for `gB`) shifts so no intermediate exceeds `e^{A+shift}`,
/// which is of the order of the true gradient itself.
#[allow(clippy::too_many_arguments)]
fn lm_backward<F: Real>(
    g: &[F],
    cmag: &[F],
    csig: Option<&[i8]>,
    a_op: LmOperand<'_>,
    b: Var,
    dims: LmDims,
    nodes: &[Node<F>],
    grads: &mut [Option<Vec<F>>],
) {
    let LmDims { batch, p, k, q, a_bcast, b_bcast } = dims;
    let a_needs = match &a_op {
        LmOperand::Node(a) => nodes[a.0].needs_grad,
        LmOperand::Gather { srcs, .. } => srcs.iter().any(|s| nodes[s.0].needs_grad),
    };
    let b_needs = nodes[b.0].needs_grad;
    if !a_needs && !b_needs {
        return;
    }
    let bd = &nodes[b.0].data;
    let bs = nodes[b.0].sign.as_deref();

    // Gradient accumulators sized to the raw operands.
    let mut ga_full: Vec<F> = if a_needs {
        match &a_op {
            LmOperand::Node(a) => vec![F::ZERO; nodes[a.0].data.len()],
            LmOperand::Gather { .. } => vec![F::ZERO; batch * p * k],
        }
    } else {
        Vec::new()
    };
    let mut gb_full: Vec<F> = if b_needs { vec![F::ZERO; bd.len()] } else { Vec::new() };

    let mut gathered: Option<(Vec<F>, Option<Vec<i8>>)> = None;
    for bi in 0..batch {
        let (amag_slab, asign_slab): (&[F], Option<&[i8]>) = match &a_op {
            LmOperand::Node(a) => {
                let off = if a_bcast { 0 } else { bi * p * k };
                (
                    &nodes[a.0].data[off..off + p * k],
                    nodes[a.0].sign.as_deref().map(|s| &s[off..off + p * k]),
                )
            }
            LmOperand::Gather { srcs, idx } => {
                let g = gathered.get_or_insert_with(|| {
                    let signed = srcs.iter().any(|s| nodes[s.0].sign.is_some());
                    materialize_gather(nodes, srcs, idx, signed)
                });
                (
                    &g.0[bi * p * k..(bi + 1) * p * k],
                    g.1.as_deref().map(|s| &s[bi * p * k..(bi + 1) * p * k]),
                )
            }
        };
        let b_off = if b_bcast { 0 } else { bi * k * q };
        let bmag_slab = &bd[b_off..b_off + k * q];
        let bsign_slab = bs.map(|s| &s[b_off..b_off + k * q]);
        let (af, am) = scaled_rows(amag_slab, asign_slab, p, k);
        let (bf, bm) = scaled_cols(bmag_slab, bsign_slab, k, q);
        let cm = &cmag[bi * p * q..(bi + 1) * p * q];
        let cs = csig.map(|s| &s[bi * p * q..(bi + 1) * p * q]);
        let gg = &g[bi * p * q..(bi + 1) * p * q];

        if a_needs {
            let ga = match &a_op {
                LmOperand::Node(_) if a_bcast => &mut ga_full[0..p * k],
                LmOperand::Node(_) => &mut ga_full[bi * p * k..(bi + 1) * p * k],
                LmOperand::Gather { .. } => &mut ga_full[bi * p * k..(bi + 1) * p * k],
            };
            let mut grow = vec![F::ZERO; q];
            for i in 0..p {
                // Row shift: K_i = max_j (Mb[j] - C[i,j]) over contributing j.
                let mut ki = F::NEG_INF;
                for j in 0..q {
                    let e = i * q + j;
                    if gg[e] != F::ZERO && cm[e] != F::NEG_INF {
                        let t = bm[j] - cm[e];
                        if t > ki {
                            ki = t;
                        }
                    }
                }
                if ki == F::NEG_INF {
                    continue;
                }
                for j in 0..q {
                    let e = i * q + j;
                    grow[j] = if gg[e] == F::ZERO || cm[e] == F::NEG_INF {
                        F::ZERO
                    } else {
                        let sc = cs.map_or(1, |s| s[e]);
                        let w = gg[e] * (bm[j] - cm[e] - ki).exp();
                        if sc >= 0 {
                            w
                        } else {
                            -w
                        }
                    };
                }
                for kk in 0..k {
                    let amv = amag_slab[i * k + kk];
                    if amv == F::NEG_INF {
                        continue;
                    }
                    let mut acc = F::ZERO;
                    for j in 0..q {
                        acc += grow[j] * bf[kk * q + j];
                    }
                    if acc == F::ZERO {
                        continue;
                    }
                    let sa = asign_slab.map_or(1, |s| s[i * k + kk]);
                    let contrib = (amv + ki).exp() * acc;
                    ga[i * k + kk] += if sa >= 0 { contrib } else { -contrib };
                }
            }
        }
        if b_needs {
            let gb = if b_bcast {
                &mut gb_full[0..k * q]
            } else {
                &mut gb_full[bi * k * q..(bi + 1) * k * q]
            };
            let mut gcol = vec![F::ZERO; p];
            for j in 0..q {
                // Column shift: L_j = max_i (Ma[i] - C[i,j]).
                let mut lj = F::NEG_INF;
                for i in 0..p {
                    let e = i * q + j;
                    if gg[e] != F::ZERO && cm[e] != F::NEG_INF {
                        let t = am[i] - cm[e];
                        if t > lj {
                            lj = t;
                        }
                    }
                }
                if lj == F::NEG_INF {
                    continue;
                }
                for i in 0..p {
                    let e = i * q + j;
                    gcol[i] = if gg[e] == F::ZERO || cm[e] == F::NEG_INF {
                        F::ZERO
                    } else {
                        let sc = cs.map_or(1, |s| s[e]);
                        let w = gg[e] * (am[i] - cm[e] - lj).exp();
                        if sc >= 0 {
                            w
                        } else {
                            -w
                        }
                    };
                }
                for kk in 0..k {
                    let bmv = bmag_slab[kk * q + j];
                    if bmv == F::NEG_INF {
                        continue;
                    }
                    let mut acc = F::ZERO;
                    for i in 0..p {
                        if gcol[i] != F::ZERO {
                            acc += gcol[i] * af[i * k + kk];
                        }
                    }
                    if acc == F::ZERO {
                        continue;
                    }
                    let sb = bsign_slab.map_or(1, |s| s[kk * q + j]);
                    let contrib = (bmv + lj).exp() * acc;
                    gb[kk * q + j] += if sb >= 0 { contrib } else { -contrib };
                }
            }
        }
    }

    if a_needs {
        match &a_op {
            LmOperand::Node(a) => {
                Tape::acc_into(grads, *a, nodes[a.0].data.len(), |buf| {
                    buf.iter_mut().zip(&ga_full).for_each(|(o, &gv)| *o += gv)
                });
            }
            LmOperand::Gather { srcs, idx } => {
                // Scatter-add through the gather map, per source.
                idx.for_each(|e, s, f| {
                    if s == GATHER_FILL {
                        return;
                    }
                    let sv = srcs[s as usize];
                    if !nodes[sv.0].needs_grad {
                        return;
                    }
                    let gv = ga_full[e];
                    if gv == F::ZERO {
                        return;
                    }
                    let n = nodes[sv.0].data.len();
                    Tape::acc_into(grads, sv, n, |buf| buf[f as usize] += gv);
                });
            }
        }
    }
    if b_needs {
        Tape::acc_into(grads, b, bd.len(), |buf| {
            buf.iter_mut().zip(&gb_full).for_each(|(o, &gv)| *o += gv)
        });
    }
}

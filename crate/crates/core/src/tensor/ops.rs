//! Value-level tensor operations and the shared kernels behind them.
//!
//! The free functions here operate on plain [`Tensor`]s and are the reference
//! forward implementations; the tape in [`super::tape`] calls into the same
//! kernels so that the differentiable path cannot drift from the tested one.

use rand::Rng;

use super::{Mode, Tensor};
use crate::real::Real;
use crate::rng::Prng;
use crate::{Error, Result};

// ---------------------------------------------------------------------------
// Matmul kernels (row-major).
// ---------------------------------------------------------------------------

/// `out += a (m×k) · b (k×n)`; `out` must be zeroed by the caller.
pub(crate) fn mm_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let brow = &b[kk * n..(kk + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
}

/// `out += a (m×k) · bᵀ` where `b` is stored `n×k`.
pub(crate) fn mm_nt_acc<F: Real>(a: &[F], b: &[F], out: &mut [F], m: usize, k: usize, n: usize) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), n * k);
    debug_assert_eq!(out.len(), m * n);
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        let orow = &mut out[i * n..(i + 1) * n];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut acc = F::ZERO;
            for kk in 0..k {
                acc += arow[kk] * brow[kk];
            }
            orow[j] += acc;
        }
    }
}

/// `out += aᵀ · g` where `a` is stored `p×k` and `g` is `p×q`; out is `k×q`.
pub(crate) fn mm_tn_acc<F: Real>(a: &[F], g: &[F], out: &mut [F], p: usize, k: usize, q: usize) {
    debug_assert_eq!(a.len(), p * k);
    debug_assert_eq!(g.len(), p * q);
    debug_assert_eq!(out.len(), k * q);
    for i in 0..p {
        let arow = &a[i * k..(i + 1) * k];
        let grow = &g[i * q..(i + 1) * q];
        for (kk, &av) in arow.iter().enumerate() {
            if av == F::ZERO {
                continue;
            }
            let orow = &mut out[kk * q..(kk + 1) * q];
            for j in 0..q {
                orow[j] += av * grow[j];
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Row kernels (softmax family, layer norm) over the last axis.
// ---------------------------------------------------------------------------

/// Shift-stable softmax of one row, in place.
pub(crate) fn softmax_row<F: Real>(row: &mut [F]) {
    let mut m = F::NEG_INF;
    for &x in row.iter() {
        if x > m {
            m = x;
        }
    }
    let mut s = F::ZERO;
    for x in row.iter_mut() {
        *x = (*x - m).exp();
        s += *x;
    }
    for x in row.iter_mut() {
        *x /= s;
    }
}

pub(crate) fn log_sum_exp_row<F: Real>(row: &[F]) -> F {
    super::logspace::log_sum_exp(row)
}

/// Layer norm of one row: population variance, eps inside the square root.
/// Returns `(mean, inv_std)`.
pub(crate) fn layer_norm_row<F: Real>(
    x: &[F],
    gain: &[F],
    bias: &[F],
    eps: F,
    out: &mut [F],
) -> (F, F) {
    let d = x.len();
    let dn = F::from_f64(d as f64);
    let mut mean = F::ZERO;
    for &v in x {
        mean += v;
    }
    mean /= dn;
    let mut var = F::ZERO;
    for &v in x {
        let c = v - mean;
        var += c * c;
    }
    var /= dn;
    let inv_std = F::ONE / (var + eps).sqrt();
    for j in 0..d {
        out[j] = (x[j] - mean) * inv_std * gain[j] + bias[j];
    }
    (mean, inv_std)
}

#[inline]
pub(crate) fn logistic_scalar<F: Real>(x: F) -> F {
    F::ONE / (F::ONE + (-x).exp())
}

// ---------------------------------------------------------------------------
// Axis helpers for the value-level API.
// ---------------------------------------------------------------------------

fn axis_view(shape: &[usize], axis: usize) -> Result<(usize, usize, usize)> {
    if axis >= shape.len() {
        return Err(Error::Dimension(format!(
            "axis {} out of range for shape {:?}",
            axis, shape
        )));
    }
    let extent = shape[axis];
    if extent == 0 {
        return Err(Error::Dimension("empty axis".into()));
    }
    let outer: usize = shape[..axis].iter().product();
    let inner: usize = shape[axis + 1..].iter().product();
    Ok((outer, extent, inner))
}

/// Applies `f` to each 1-D lane along `axis`, writing results through `g`.
fn for_each_lane<F: Real>(
    t: &Tensor<F>,
    axis: usize,
    mut f: impl FnMut(&[F]) -> Vec<F>,
) -> Result<(Vec<F>, usize)> {
    let (outer, extent, inner) = axis_view(t.shape(), axis)?;
    let data = t.data();
    let mut lanes_out: Vec<F> = Vec::with_capacity(outer * inner);
    let mut lane = vec![F::ZERO; extent];
    let mut lane_len = 0;
    for o in 0..outer {
        for i in 0..inner {
            for e in 0..extent {
                lane[e] = data[(o * extent + e) * inner + i];
            }
            let r = f(&lane);
            lane_len = r.len();
            lanes_out.extend_from_slice(&r);
        }
    }
    Ok((lanes_out, lane_len))
}

fn scatter_lanes<F: Real>(
    shape: &[usize],
    axis: usize,
    lanes: &[F],
    lane_len: usize,
) -> Result<Tensor<F>> {
    let (outer, _, inner) = axis_view(shape, axis)?;
    let mut out_shape = shape.to_vec();
    out_shape[axis] = lane_len;
    let mut out = Tensor::zeros(out_shape);
    {
        let data = out.data_mut();
        let mut li = 0;
        for o in 0..outer {
            for i in 0..inner {
                for e in 0..lane_len {
                    data[(o * lane_len + e) * inner + i] = lanes[li * lane_len + e];
                }
                li += 1;
            }
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Public value-level operations.
// ---------------------------------------------------------------------------

/// Standard matrix product of two 2-D tensors.
pub fn matmul<F: Real>(a: &Tensor<F>, b: &Tensor<F>) -> Result<Tensor<F>> {
    let (sa, sb) = (a.shape(), b.shape());
    if sa.len() != 2 || sb.len() != 2 {
        return Err(Error::Dimension(format!("matmul expects 2-D, got {:?} and {:?}", sa, sb)));
    }
    if sa[1] != sb[0] {
        return Err(Error::Dimension(format!(
            "matmul inner extents disagree: {:?} vs {:?}",
            sa, sb
        )));
    }
    let (m, k, n) = (sa[0], sa[1], sb[1]);
    let mut out = Tensor::zeros(vec![m, n]);
    mm_acc(a.data(), b.data(), out.data_mut(), m, k, n);
    Ok(out)
}

/// Shift-stable softmax along `axis`; outputs are nonnegative and sum to 1.
pub fn softmax<F: Real>(t: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (lanes, lane_len) = for_each_lane(t, axis, |lane| {
        let mut row = lane.to_vec();
        softmax_row(&mut row);
        row
    })?;
    scatter_lanes(t.shape(), axis, &lanes, lane_len)
}

/// Log of summed exponentials along `axis`; the axis collapses to extent 1.
/// `-inf` entries contribute zero mass; an all-`-inf` lane yields `-inf`.
pub fn logsumexp<F: Real>(t: &Tensor<F>, axis: usize) -> Result<Tensor<F>> {
    let (lanes, lane_len) = for_each_lane(t, axis, |lane| vec![log_sum_exp_row(lane)])?;
    scatter_lanes(t.shape(), axis, &lanes, lane_len)
}

/// Per-vector layer normalization over the last axis, then affine.
pub fn layer_norm<F: Real>(
    x: &Tensor<F>,
    gain: &Tensor<F>,
    bias: &Tensor<F>,
    eps: F,
) -> Result<Tensor<F>> {
    let d = *x.shape().last().ok_or_else(|| Error::Dimension("0-d layer_norm input".into()))?;
    if gain.numel() != d || bias.numel() != d {
        return Err(Error::Dimension(format!(
            "layer_norm gain/bias must have extent {}, got {}/{}",
            d,
            gain.numel(),
            bias.numel()
        )));
    }
    let rows = x.numel() / d;
    let mut out = Tensor::zeros(x.shape().to_vec());
    for r in 0..rows {
        let mut row = vec![F::ZERO; d];
        layer_norm_row(&x.data()[r * d..(r + 1) * d], gain.data(), bias.data(), eps, &mut row);
        out.data_mut()[r * d..(r + 1) * d].copy_from_slice(&row);
    }
    Ok(out)
}

/// Elementwise `1/(1+e^-x)`; values are strictly inside `(0, 1)`.
pub fn logistic<F: Real>(t: &Tensor<F>) -> Tensor<F> {
    let mut out = t.clone();
    out.requires_grad = false;
    out.grad = None;
    for v in out.data_mut() {
        *v = logistic_scalar(*v);
    }
    out
}

/// Inverted dropout: eval mode is the identity, train mode zeroes each element
/// with probability `p` and rescales survivors by `1/(1-p)`.
pub fn dropout<F: Real>(t: &Tensor<F>, p: f64, mode: Mode, rng: &mut Prng) -> Result<Tensor<F>> {
    if !(0.0..1.0).contains(&p) {
        return Err(Error::Parameter(format!("dropout probability {} not in [0, 1)", p)));
    }
    if mode == Mode::Eval || p == 0.0 {
        let mut out = t.clone();
        out.requires_grad = false;
        out.grad = None;
        return Ok(out);
    }
    let keep = F::from_f64(1.0 / (1.0 - p));
    let mut out = Tensor::zeros(t.shape().to_vec());
    for (o, &v) in out.data_mut().iter_mut().zip(t.data()) {
        if rng.gen::<f64>() >= p {
            *o = v * keep;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::stream;

    #[test]
    fn matmul_identity_and_hand_case() {
        let i2 = Tensor::new(vec![2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap();
        let m = Tensor::new(vec![2, 2], vec![2.0, -1.0, 0.5, 3.0]).unwrap();
        assert_eq!(matmul(&i2, &m).unwrap().data(), m.data());

        // [[1,2],[3,4]] * [[5],[6]] = [[17],[39]]
        let a = Tensor::new(vec![2, 2], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let b = Tensor::new(vec![2, 1], vec![5.0, 6.0]).unwrap();
        assert_eq!(matmul(&a, &b).unwrap().data(), &[17.0, 39.0]);

        let z = Tensor::<f64>::zeros(vec![2, 2]);
        assert_eq!(matmul(&z, &m).unwrap().data(), &[0.0; 4]);
    }

    #[test]
    fn matmul_shape_mismatch_errors() {
        let a = Tensor::<f64>::zeros(vec![2, 3]);
        let b = Tensor::<f64>::zeros(vec![2, 3]);
        assert!(matches!(matmul(&a, &b), Err(Error::Dimension(_))));
    }

    #[test]
    fn softmax_hand_cases() {
        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 0.5).abs() < 1e-15);

        let t = Tensor::new(vec![2], vec![1.0f64.ln(), 3.0f64.ln()]).unwrap();
        let s = softmax(&t, 0).unwrap();
        assert!((s.data()[0] - 0.25).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
    }

    #[test]
    fn softmax_shift_invariance_and_normalization() {
        let mut rng = stream(3, "softmax", &[]);
        for _ in 0..50 {
            let v: Vec<f64> = (0..6).map(|_| rng.gen_range(-50.0..50.0)).collect();
            let t = Tensor::new(vec![6], v.clone()).unwrap();
            let s = softmax(&t, 0).unwrap();
            let total: f64 = s.data().iter().sum();
            assert!((total - 1.0).abs() <= 1e-12);
            let shifted = Tensor::new(vec![6], v.iter().map(|x| x + 17.5).collect()).unwrap();
            let s2 = softmax(&shifted, 0).unwrap();
            for (a, b) in s.data().iter().zip(s2.data()) {
                assert!((a - b).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn softmax_empty_axis_errors() {
        let t = Tensor::<f64>::zeros(vec![0]);
        assert!(matches!(softmax(&t, 0), Err(Error::Dimension(_))));
    }

    #[test]
    fn logsumexp_cases() {
        let t = Tensor::new(vec![1], vec![4.25]).unwrap();
        assert_eq!(logsumexp(&t, 0).unwrap().data()[0], 4.25);

        let t = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        assert!((logsumexp(&t, 0).unwrap().data()[0] - 2.0f64.ln()).abs() < 1e-15);

        let t = Tensor::new(vec![2], vec![f64::NEG_INFINITY, 1.5]).unwrap();
        assert_eq!(logsumexp(&t, 0).unwrap().data()[0], 1.5);
    }

    #[test]
    fn layer_norm_cases() {
        // Constant input normalizes to zero, so the output is the bias.
        let x = Tensor::new(vec![1, 3], vec![4.0, 4.0, 4.0]).unwrap();
        let g = Tensor::new(vec![3], vec![2.0, 2.0, 2.0]).unwrap();
        let b = Tensor::new(vec![3], vec![0.5, -1.0, 3.0]).unwrap();
        let out = layer_norm(&x, &g, &b, 1e-12).unwrap();
        for (o, bb) in out.data().iter().zip(b.data()) {
            assert!((o - bb).abs() < 1e-6);
        }

        // Population variance of [1,-1] is 1, so it is a fixed point as eps -> 0.
        let x = Tensor::new(vec![1, 2], vec![1.0, -1.0]).unwrap();
        let g = Tensor::new(vec![2], vec![1.0, 1.0]).unwrap();
        let b = Tensor::new(vec![2], vec![0.0, 0.0]).unwrap();
        let out = layer_norm(&x, &g, &b, 1e-14).unwrap();
        assert!((out.data()[0] - 1.0).abs() < 1e-6);
        assert!((out.data()[1] + 1.0).abs() < 1e-6);

        // Scale invariance for positive scalings.
        let x = Tensor::new(vec![1, 4], vec![0.3, -2.0, 1.1, 0.6]).unwrap();
        let xs = Tensor::new(vec![1, 4], x.data().iter().map(|v| v * 7.0).collect()).unwrap();
        let g = Tensor::new(vec![4], vec![1.0; 4]).unwrap();
        let b = Tensor::new(vec![4], vec![0.0; 4]).unwrap();
        let a = layer_norm(&x, &g, &b, 1e-14).unwrap();
        let c = layer_norm(&xs, &g, &b, 1e-14).unwrap();
        for (u, v) in a.data().iter().zip(c.data()) {
            assert!((u - v).abs() < 1e-9);
        }
    }

    #[test]
    fn logistic_cases() {
        let t = Tensor::new(vec![3], vec![0.0, 3.0f64.ln(), 25.0]).unwrap();
        let s = logistic(&t);
        assert!((s.data()[0] - 0.5).abs() < 1e-15);
        assert!((s.data()[1] - 0.75).abs() < 1e-15);
        assert!(s.data()[2] < 1.0 && s.data()[2] > 0.9999);
        // Monotone saturation toward 1.
        let t2 = Tensor::new(vec![3], vec![1.0, 2.0, 20.0]).unwrap();
        let s2 = logistic(&t2);
        assert!(s2.data()[0] < s2.data()[1] && s2.data()[1] < s2.data()[2] && s2.data()[2] < 1.0);
    }

    #[test]
    fn dropout_contract() {
        let t = Tensor::new(vec![4], vec![1.0, 2.0, 3.0, 4.0]).unwrap();
        let mut rng = stream(1, "drop", &[]);
        // p = 0 is the identity.
        let d = dropout(&t, 0.0, Mode::Train, &mut rng).unwrap();
        assert_eq!(d.data(), t.data());
        // Eval mode is the identity regardless of p.
        let d = dropout(&t, 0.9, Mode::Eval, &mut rng).unwrap();
        assert_eq!(d.data(), t.data());
        // p >= 1 rejected.
        assert!(matches!(dropout(&t, 1.0, Mode::Train, &mut rng), Err(Error::Parameter(_))));
    }

    #[test]
    fn dropout_monte_carlo_expectation() {
        // Mean over 1e5 samples of dropout(1, p=0.5) should be 1 within 0.02.
        let t = Tensor::new(vec![1], vec![1.0f64]).unwrap();
        let mut rng = stream(7, "drop-mc", &[]);
        let n = 100_000;
        let mut total = 0.0;
        for _ in 0..n {
            total += dropout(&t, 0.5, Mode::Train, &mut rng).unwrap().data()[0];
        }
        let mean = total / n as f64;
        assert!((mean - 1.0).abs() < 0.02, "mean {}", mean);
    }
}

//! Log-space scalar arithmetic with `-inf` as the additive zero.
//!
//! Signed values are `(log-magnitude, sign)` pairs; a zero is `(-inf, +1)`.
//! Signs multiply under log-space products and combine under log-space sums
//! via the usual `ln|e^a ± e^b|` identities.

use crate::real::Real;

/// `ln(e^a + e^b)`, tolerating `-inf` on either side.
#[inline]
pub fn log_add_exp<F: Real>(a: F, b: F) -> F {
    if a == F::NEG_INF {
        return b;
    }
    if b == F::NEG_INF {
        return a;
    }
    let (hi, lo) = if a >= b { (a, b) } else { (b, a) };
    hi + (lo - hi).exp().ln_1p()
}

/// Signed log-space addition: `s_c e^c = s_a e^a + s_b e^b`.
///
/// Returns `(c, s_c)`; exact cancellation yields `(-inf, +1)`.
#[inline]
pub fn signed_log_add_exp<F: Real>(a: F, sa: i8, b: F, sb: i8) -> (F, i8) {
    if a == F::NEG_INF {
        return (b, if b == F::NEG_INF { 1 } else { sb });
    }
    if b == F::NEG_INF {
        return (a, sa);
    }
    let (hi, hs, lo, ls) = if a >= b { (a, sa, b, sb) } else { (b, sb, a, sa) };
    let d = (lo - hi).exp();
    if hs == ls {
        (hi + d.ln_1p(), hs)
    } else {
        let rem = F::ONE - d;
        if rem <= F::ZERO {
            (F::NEG_INF, 1)
        } else {
            (hi + rem.ln(), hs)
        }
    }
}

/// `ln|x|` and sign of `x`; zero maps to `(-inf, +1)`.
#[inline]
pub fn to_signed_log<F: Real>(x: F) -> (F, i8) {
    if x == F::ZERO {
        (F::NEG_INF, 1)
    } else if x > F::ZERO {
        (x.ln(), 1)
    } else {
        ((-x).ln(), -1)
    }
}

/// Log-sum-exp of a slice; empty or all `-inf` input yields `-inf`.
pub fn log_sum_exp<F: Real>(xs: &[F]) -> F {
    let mut m = F::NEG_INF;
    for &x in xs {
        if x > m {
            m = x;
        }
    }
    if m == F::NEG_INF {
        return F::NEG_INF;
    }
    let mut s = F::ZERO;
    for &x in xs {
        if x != F::NEG_INF {
            s += (x - m).exp();
        }
    }
    m + s.ln()
}

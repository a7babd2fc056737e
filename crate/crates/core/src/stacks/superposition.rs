//! Superposition stack: fractional push/no-op/pop over vector elements.
//!
//! Each update forms the new stack as an elementwise interpolation of three
//! shifted copies of the old one, so every element is a convex combination of
//! the vectors pushed so far and the zero vector. The reading is the top
//! element.

use crate::real::Real;
use crate::{Error, Result};

const TRIPLE_TOL: f64 = 1e-6;

/// Probability distribution over the three stack actions.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ActionTriple<F: Real> {
    pub push: F,
    pub noop: F,
    pub pop: F,
}

impl<F: Real> ActionTriple<F> {
    pub fn new(push: F, noop: F, pop: F) -> Result<Self> {
        for (name, v) in [("push", push), ("noop", noop), ("pop", pop)] {
            if !(v.to_f64() >= -TRIPLE_TOL) {
                return Err(Error::Parameter(format!("{} weight {} is negative", name, v)));
            }
        }
        let total = (push + noop + pop).to_f64();
        if (total - 1.0).abs() > TRIPLE_TOL {
            return Err(Error::Parameter(format!("action weights sum to {}, expected 1", total)));
        }
        Ok(Self { push, noop, pop })
    }
}

/// Stack of fractional vector elements; row 0 is the top.
///
/// The initial state holds the single zero row; after `t` updates the matrix
/// has exactly `t` rows.
#[derive(Debug, Clone)]
pub struct SuperpositionState<F: Real> {
    dim: usize,
    steps: usize,
    rows: Vec<F>,
}

impl<F: Real> SuperpositionState<F> {
    pub fn new(dim: usize) -> Self {
        Self { dim, steps: 0, rows: vec![F::ZERO; dim] }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of updates applied so far.
    pub fn steps(&self) -> usize {
        self.steps
    }

    fn row(&self, i: usize) -> &[F] {
        &self.rows[i * self.dim..(i + 1) * self.dim]
    }

    /// Applies one weighted stack action, producing the next state.
    ///
    /// Row `i` of the result mixes the element above (`push`), at (`noop`) and
    /// below (`pop`) position `i` in the previous stack, where "above" the top
    /// is the newly pushed vector and positions past the bottom are zero.
    pub fn update(&self, actions: &ActionTriple<F>, pushed: &[F]) -> Result<Self> {
        if pushed.len() != self.dim {
            return Err(Error::Dimension(format!(
                "pushed vector has dimension {}, stack expects {}",
                pushed.len(),
                self.dim
            )));
        }
        let t = self.steps + 1;
        let m = self.dim;
        let mut rows = vec![F::ZERO; t * m];
        for j in 0..t {
            let out = &mut rows[j * m..(j + 1) * m];
            for e in 0..m {
                let above = if j == 0 { pushed[e] } else { self.row(j - 1)[e] };
                let at = if j < t - 1 { self.row(j)[e] } else { F::ZERO };
                let below = if j + 2 < t { self.row(j + 1)[e] } else { F::ZERO };
                out[e] = actions.push * above + actions.noop * at + actions.pop * below;
            }
        }
        Ok(Self { dim: m, steps: t, rows })
    }

    /// The top element; the initial state reads as the zero vector.
    pub fn reading(&self) -> &[F] {
        self.row(0)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn triple(p: f64, n: f64, o: f64) -> ActionTriple<f64> {
        ActionTriple::new(p, n, o).unwrap()
    }

    #[test]
    fn action_triple_validation() {
        assert!(ActionTriple::new(0.5, 0.3, 0.2).is_ok());
        assert!(ActionTriple::new(0.5, 0.6, -0.1).is_err());
        assert!(ActionTriple::new(0.5, 0.3, 0.3).is_err());
    }

    #[test]
    fn initial_reading_is_zero() {
        let s = SuperpositionState::<f64>::new(3);
        assert_eq!(s.reading(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn pure_push_reads_pushed_vector() {
        let s = SuperpositionState::new(2);
        let s = s.update(&triple(1.0, 0.0, 0.0), &[0.3, -0.7]).unwrap();
        assert_eq!(s.reading(), &[0.3, -0.7]);
        assert_eq!(s.steps(), 1);
    }

    #[test]
    fn push_then_pop_reads_zero() {
        let s = SuperpositionState::new(2);
        let s = s.update(&triple(1.0, 0.0, 0.0), &[0.3, -0.7]).unwrap();
        let s = s.update(&triple(0.0, 0.0, 1.0), &[9.0, 9.0]).unwrap();
        assert_eq!(s.reading(), &[0.0, 0.0]);
    }

    #[test]
    fn half_push_mixes_new_and_old_top() {
        let s = SuperpositionState::new(1);
        let s = s.update(&triple(1.0, 0.0, 0.0), &[1.0]).unwrap();
        let s = s.update(&triple(0.5, 0.5, 0.0), &[2.0]).unwrap();
        // 0.5 * v2 + 0.5 * v1
        assert!((s.reading()[0] - 1.5).abs() < 1e-15);
    }

    #[test]
    fn pushes_then_pops_unwind_to_zero() {
        let k = 5;
        let mut s = SuperpositionState::new(2);
        for i in 0..k {
            s = s.update(&triple(1.0, 0.0, 0.0), &[i as f64, 1.0]).unwrap();
        }
        for _ in 0..k {
            s = s.update(&triple(0.0, 0.0, 1.0), &[9.0, 9.0]).unwrap();
        }
        assert_eq!(s.reading(), &[0.0, 0.0]);
    }

    #[test]
    fn dimension_mismatch_rejected() {
        let s = SuperpositionState::<f64>::new(3);
        assert!(s.update(&triple(1.0, 0.0, 0.0), &[1.0]).is_err());
    }

    #[test]
    fn elements_stay_in_convex_hull() {
        use crate::rng::stream;
        use rand::Rng;
        let mut rng = stream(41, "sup-hull", &[]);
        for _ in 0..50 {
            let m = 2;
            let mut s = SuperpositionState::new(m);
            let mut lo = 0.0f64;
            let mut hi = 0.0f64;
            for _ in 0..8 {
                let a = {
                    let x: f64 = rng.gen_range(0.0..1.0);
                    let y: f64 = rng.gen_range(0.0..(1.0 - x).max(1e-9));
                    triple(x, y, 1.0 - x - y)
                };
                let v: Vec<f64> = (0..m).map(|_| rng.gen_range(-2.0..2.0)).collect();
                for &x in &v {
                    lo = lo.min(x);
                    hi = hi.max(x);
                }
                s = s.update(&a, &v).unwrap();
                for i in 0..s.steps() {
                    for &x in s.row(i) {
                        assert!(x >= lo - 1e-12 && x <= hi + 1e-12);
                    }
                }
            }
        }
    }
}

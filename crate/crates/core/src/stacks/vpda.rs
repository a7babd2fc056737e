//! Nondeterministic vector pushdown automaton, simulated in log space.
//!
//! Stack elements pair a discrete symbol with a vector in `R^m`; transitions
//! are push / replace / pop in normal form, weighted, and conditioned only on
//! `(state, top symbol)`. The reading at time `t` is the run-weight-normalized
//! expectation of the top stack vector over all runs scanning `t` symbols,
//! grouped by the run's final `(state, top symbol)` pair.
//!
//! The simulation keeps three pre-allocated tensors updated in place in
//! increasing `t`: inner weights `gamma[i -> t](q, x, r, y)` (weight of run
//! segments taking `x` on top at time `i` to `y` on top at time `t`, with `y`
//! one level above `x`), their vector counterparts `zeta` (signed log space),
//! and forward weights `alpha[t](r, y)`. Popping the depth-1 element is a
//! regenerating transition: it yields a fresh `(bottom, r0)` cell. This keeps
//! the total run weight of a normalized transition distribution at exactly 1
//! and makes the superposition stack an exact special case; it is realized as
//! one extra term feeding the `i = -1` channel of `gamma`/`zeta`.

use crate::real::Real;
use crate::tensor::logspace::{log_add_exp, signed_log_add_exp, to_signed_log};
use crate::tensor::Tensor;
use crate::{Error, Result};

use super::superposition::ActionTriple;

/// Shape of a vector PDA: states `Q`, stack symbols `Gamma`, vector dimension
/// `m`. State 0 is the start state and symbol 0 the designated bottom symbol.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VpdaConfig {
    pub states: usize,
    pub symbols: usize,
    pub vector_dim: usize,
}

impl VpdaConfig {
    pub const START_STATE: usize = 0;
    pub const BOTTOM: usize = 0;

    pub fn new(states: usize, symbols: usize, vector_dim: usize) -> Result<Self> {
        if states == 0 || symbols == 0 || vector_dim == 0 {
            return Err(Error::Parameter(format!(
                "VPDA extents must be positive, got |Q|={}, |Gamma|={}, m={}",
                states, symbols, vector_dim
            )));
        }
        Ok(Self { states, symbols, vector_dim })
    }

    /// Number of `(state, symbol)` pairs.
    pub fn pairs(&self) -> usize {
        self.states * self.symbols
    }

    /// Flattened size of one transition-weight tensor:
    /// `|Q| * |Gamma| * |Q| * (2 |Gamma| + 1)`.
    pub fn action_dim(&self) -> usize {
        self.states * self.symbols * self.states * (2 * self.symbols + 1)
    }

    /// Dimension of the stack reading: `|Q| * |Gamma| * m`.
    pub fn reading_dim(&self) -> usize {
        self.pairs() * self.vector_dim
    }
}

/// Log-weights of all transitions usable at one timestep.
///
/// Layout per `(q, x, r)`: `|Gamma|` push targets, then `|Gamma|` replace
/// targets, then one pop weight. This flat ordering is a wire contract: it is
/// how action projections and serialized tensors are interpreted.
#[derive(Debug, Clone)]
pub struct TransitionWeights<F: Real> {
    states: usize,
    symbols: usize,
    log_weights: Vec<F>,
}

impl<F: Real> TransitionWeights<F> {
    pub fn new(cfg: &VpdaConfig, log_weights: Vec<F>) -> Result<Self> {
        if log_weights.len() != cfg.action_dim() {
            return Err(Error::Dimension(format!(
                "expected {} transition log-weights, got {}",
                cfg.action_dim(),
                log_weights.len()
            )));
        }
        if log_weights.iter().any(|w| w.is_nan() || (!w.is_finite() && *w > F::ZERO)) {
            return Err(Error::Parameter("transition log-weights must be in [-inf, inf)".into()));
        }
        Ok(Self { states: cfg.states, symbols: cfg.symbols, log_weights })
    }

    pub fn from_tensor(cfg: &VpdaConfig, t: &Tensor<F>) -> Result<Self> {
        Self::new(cfg, t.data().to_vec())
    }

    /// All transitions at the same log-weight.
    pub fn uniform(cfg: &VpdaConfig, log_weight: F) -> Self {
        Self {
            states: cfg.states,
            symbols: cfg.symbols,
            log_weights: vec![log_weight; cfg.action_dim()],
        }
    }

    /// The `|Q| = |Gamma| = 1` weights matching a superposition action triple:
    /// push/replace/pop log-probabilities.
    pub fn from_action_triple(a: &ActionTriple<F>) -> Self {
        Self {
            states: 1,
            symbols: 1,
            log_weights: vec![a.push.ln(), a.noop.ln(), a.pop.ln()],
        }
    }

    pub fn log_weights(&self) -> &[F] {
        &self.log_weights
    }

    pub fn log_weights_mut(&mut self) -> &mut [F] {
        &mut self.log_weights
    }

    #[inline]
    fn base(&self, q: usize, x: usize, r: usize) -> usize {
        ((q * self.symbols + x) * self.states + r) * (2 * self.symbols + 1)
    }

    /// Log-weight of `q, x -> r, push y`.
    #[inline]
    pub fn push_w(&self, q: usize, x: usize, r: usize, y: usize) -> F {
        self.log_weights[self.base(q, x, r) + y]
    }

    /// Log-weight of `q, x -> r, replace with y`.
    #[inline]
    pub fn replace_w(&self, q: usize, x: usize, r: usize, y: usize) -> F {
        self.log_weights[self.base(q, x, r) + self.symbols + y]
    }

    /// Log-weight of `q, x -> r, pop`.
    #[inline]
    pub fn pop_w(&self, q: usize, x: usize, r: usize) -> F {
        self.log_weights[self.base(q, x, r) + 2 * self.symbols]
    }
}

/// In-place dynamic-program state for one sequence, pre-allocated for length
/// `n` and advanced one timestep per update.
#[derive(Debug, Clone)]
pub struct VpdaState<F: Real> {
    cfg: VpdaConfig,
    n: usize,
    t: usize,
    r0: Vec<F>,
    /// `gamma[i -> t](qx, ry)`, `i` offset by one (index 0 is `i = -1`).
    gamma: Vec<F>,
    /// Signed log-space vector inner weights, trailing extent `m`.
    zeta_mag: Vec<F>,
    zeta_sign: Vec<i8>,
    /// Forward weights `alpha[t](ry)`, `t` offset by one.
    alpha: Vec<F>,
}

impl<F: Real> VpdaState<F> {
    /// Allocates and initializes the state for sequences of length `n`.
    ///
    /// `r0` is the vector carried by the initial bottom element.
    pub fn new(n: usize, cfg: &VpdaConfig, r0: &[F]) -> Result<Self> {
        if r0.len() != cfg.vector_dim {
            return Err(Error::Dimension(format!(
                "r0 has dimension {}, config says {}",
                r0.len(),
                cfg.vector_dim
            )));
        }
        let s = cfg.pairs();
        let gamma_len = (n + 1)
            .checked_mul(n + 1)
            .and_then(|v| v.checked_mul(s * s))
            .ok_or_else(|| Error::Resource("gamma tensor size overflows".into()))?;
        let zeta_len = gamma_len
            .checked_mul(cfg.vector_dim)
            .ok_or_else(|| Error::Resource("zeta tensor size overflows".into()))?;
        let mut st = Self {
            cfg: *cfg,
            n,
            t: 0,
            r0: r0.to_vec(),
            gamma: vec![F::NEG_INF; gamma_len],
            zeta_mag: vec![F::NEG_INF; zeta_len],
            zeta_sign: vec![1; zeta_len],
            alpha: vec![F::NEG_INF; (n + 2) * s],
        };
        // gamma[-1 -> 0] and zeta[-1 -> 0] are indicators at (q0, bottom);
        // alpha[-1] likewise.
        let g0 = st.g_idx(-1, 0, 0, 0);
        st.gamma[g0] = F::ZERO;
        for j in 0..cfg.vector_dim {
            let (mag, sign) = to_signed_log(r0[j]);
            st.zeta_mag[g0 * cfg.vector_dim + j] = mag;
            st.zeta_sign[g0 * cfg.vector_dim + j] = sign;
        }
        st.alpha[0] = F::ZERO; // alpha[-1](q0, bottom)
        st.recompute_alpha(0);
        Ok(st)
    }

    pub fn config(&self) -> &VpdaConfig {
        &self.cfg
    }

    /// Timesteps processed so far.
    pub fn t(&self) -> usize {
        self.t
    }

    pub fn capacity(&self) -> usize {
        self.n
    }

    #[inline]
    fn g_idx(&self, i: isize, t: usize, qx: usize, ry: usize) -> usize {
        let s = self.cfg.pairs();
        let i1 = (i + 1) as usize;
        ((i1 * (self.n + 1) + t) * s + qx) * s + ry
    }

    #[inline]
    fn a_idx(&self, t: isize, ry: usize) -> usize {
        ((t + 1) as usize) * self.cfg.pairs() + ry
    }

    /// `alpha[t](ry) = lse_{i, qx} alpha[i] + gamma[i -> t](qx, ry)`.
    fn recompute_alpha(&mut self, t: usize) {
        let s = self.cfg.pairs();
        for ry in 0..s {
            let mut acc = F::NEG_INF;
            for i in -1..t as isize {
                for qx in 0..s {
                    let a = self.alpha[self.a_idx(i, qx)];
                    if a == F::NEG_INF {
                        continue;
                    }
                    let g = self.gamma[self.g_idx(i, t, qx, ry)];
                    if g == F::NEG_INF {
                        continue;
                    }
                    acc = log_add_exp(acc, a + g);
                }
            }
            let ai = self.a_idx(t as isize, ry);
            self.alpha[ai] = acc;
        }
    }

    /// Advances the dynamic program by one timestep.
    pub fn update(&mut self, delta: &TransitionWeights<F>, pushed: &[F]) -> Result<()> {
        let cfg = self.cfg;
        if delta.states != cfg.states || delta.symbols != cfg.symbols {
            return Err(Error::Dimension("transition weights do not match config".into()));
        }
        if pushed.len() != cfg.vector_dim {
            return Err(Error::Dimension(format!(
                "pushed vector has dimension {}, config says {}",
                pushed.len(),
                cfg.vector_dim
            )));
        }
        if self.t >= self.n {
            return Err(Error::Contract(format!(
                "update past pre-allocated length {}",
                self.n
            )));
        }
        let t = self.t + 1;
        let (qn, g, m, s) = (cfg.states, cfg.symbols, cfg.vector_dim, cfg.pairs());

        let pushed_log: Vec<(F, i8)> = pushed.iter().map(|&v| to_signed_log(v)).collect();

        // Auxiliary pop table: gp[k][uy][r] = lse_{sz} gamma[k -> t-1](uy, sz)
        // + pop(sz -> r), for 0 <= k <= t-2.
        let kcount = t.saturating_sub(1);
        let mut gp = vec![F::NEG_INF; kcount * s * qn];
        for k in 0..kcount {
            for uy in 0..s {
                for r in 0..qn {
                    let mut acc = F::NEG_INF;
                    for sz in 0..s {
                        let gv = self.gamma[self.g_idx(k as isize, t - 1, uy, sz)];
                        if gv == F::NEG_INF {
                            continue;
                        }
                        let pw = delta.pop_w(sz / g, sz % g, r);
                        if pw == F::NEG_INF {
                            continue;
                        }
                        acc = log_add_exp(acc, gv + pw);
                    }
                    gp[(k * s + uy) * qn + r] = acc;
                }
            }
        }

        for i in -1..t as isize {
            if i == t as isize - 1 {
                // Push block: y is created one level above x right now.
                for qx in 0..s {
                    for ry in 0..s {
                        let w = delta.push_w(qx / g, qx % g, ry / g, ry % g);
                        let gi = self.g_idx(i, t, qx, ry);
                        self.gamma[gi] = w;
                        for j in 0..m {
                            let (vm, vs) = pushed_log[j];
                            self.zeta_mag[gi * m + j] =
                                if w == F::NEG_INF { F::NEG_INF } else { w + vm };
                            self.zeta_sign[gi * m + j] = vs;
                        }
                    }
                }
                continue;
            }
            for qx in 0..s {
                for ry in 0..s {
                    let (r, y) = (ry / g, ry % g);
                    let mut acc = F::NEG_INF;
                    let mut zacc: Vec<(F, i8)> = vec![(F::NEG_INF, 1); m];
                    // Replace: the top at t-1 turns into y in place.
                    for sz in 0..s {
                        let gv = self.gamma[self.g_idx(i, t - 1, qx, sz)];
                        let rw = delta.replace_w(sz / g, sz % g, r, y);
                        if rw == F::NEG_INF {
                            continue;
                        }
                        if gv != F::NEG_INF {
                            acc = log_add_exp(acc, gv + rw);
                        }
                        let zi = self.g_idx(i, t - 1, qx, sz) * m;
                        for j in 0..m {
                            let zm = self.zeta_mag[zi + j];
                            if zm == F::NEG_INF {
                                continue;
                            }
                            zacc[j] = signed_log_add_exp(
                                zacc[j].0,
                                zacc[j].1,
                                zm + rw,
                                self.zeta_sign[zi + j],
                            );
                        }
                    }
                    // Pop: a push at k+1 on top of y is resolved at t.
                    let kmin = (i + 1).max(0) as usize;
                    for k in kmin..kcount {
                        for u in 0..qn {
                            let uy = u * g + y;
                            let gpw = gp[(k * s + uy) * qn + r];
                            if gpw == F::NEG_INF {
                                continue;
                            }
                            let gv = self.gamma[self.g_idx(i, k, qx, uy)];
                            if gv != F::NEG_INF {
                                acc = log_add_exp(acc, gv + gpw);
                            }
                            let zi = self.g_idx(i, k, qx, uy) * m;
                            for j in 0..m {
                                let zm = self.zeta_mag[zi + j];
                                if zm == F::NEG_INF {
                                    continue;
                                }
                                zacc[j] = signed_log_add_exp(
                                    zacc[j].0,
                                    zacc[j].1,
                                    zm + gpw,
                                    self.zeta_sign[zi + j],
                                );
                            }
                        }
                    }
                    // Regenerating bottom: popping the depth-1 cell in the
                    // i = -1 channel re-exposes a fresh (bottom, r0) element.
                    if i == -1 && y == VpdaConfig::BOTTOM {
                        for sz in 0..s {
                            let pw = delta.pop_w(sz / g, sz % g, r);
                            if pw == F::NEG_INF {
                                continue;
                            }
                            let gv = self.gamma[self.g_idx(-1, t - 1, qx, sz)];
                            if gv != F::NEG_INF {
                                acc = log_add_exp(acc, gv + pw);
                            }
                            let zi = self.g_idx(-1, t - 1, qx, sz) * m;
                            for j in 0..m {
                                let zm = self.zeta_mag[zi + j];
                                if zm == F::NEG_INF {
                                    continue;
                                }
                                zacc[j] = signed_log_add_exp(
                                    zacc[j].0,
                                    zacc[j].1,
                                    zm + pw,
                                    self.zeta_sign[zi + j],
                                );
                            }
                        }
                    }
                    let gi = self.g_idx(i, t, qx, ry);
                    self.gamma[gi] = acc;
                    for j in 0..m {
                        self.zeta_mag[gi * m + j] = zacc[j].0;
                        self.zeta_sign[gi * m + j] = zacc[j].1;
                    }
                }
            }
        }
        self.recompute_alpha(t);
        self.t = t;
        Ok(())
    }

    /// The stack reading after `t` updates: per `(r, y)` slice, the weighted
    /// mean of run top vectors, normalized by the total weight of all runs.
    ///
    /// If the total run weight underflows to log-zero the reading is the zero
    /// vector.
    pub fn reading(&self) -> Vec<F> {
        let (m, s) = (self.cfg.vector_dim, self.cfg.pairs());
        let t = self.t;
        let mut denom = F::NEG_INF;
        for ry in 0..s {
            denom = log_add_exp(denom, self.alpha[self.a_idx(t as isize, ry)]);
        }
        let mut out = vec![F::ZERO; s * m];
        if denom == F::NEG_INF {
            return out;
        }
        for ry in 0..s {
            for j in 0..m {
                let mut acc = (F::NEG_INF, 1i8);
                for i in -1..t as isize {
                    for qx in 0..s {
                        let a = self.alpha[self.a_idx(i, qx)];
                        if a == F::NEG_INF {
                            continue;
                        }
                        let zi = self.g_idx(i, t, qx, ry) * m + j;
                        let zm = self.zeta_mag[zi];
                        if zm == F::NEG_INF {
                            continue;
                        }
                        acc = signed_log_add_exp(acc.0, acc.1, a + zm, self.zeta_sign[zi]);
                    }
                }
                if acc.0 != F::NEG_INF {
                    let v = (acc.0 - denom).exp();
                    out[ry * m + j] = if acc.1 >= 0 { v } else { -v };
                }
            }
        }
        out
    }

    /// Total log-weight of all runs scanning `t` symbols.
    pub fn total_log_weight(&self) -> F {
        let s = self.cfg.pairs();
        let mut denom = F::NEG_INF;
        for ry in 0..s {
            denom = log_add_exp(denom, self.alpha[self.a_idx(self.t as isize, ry)]);
        }
        denom
    }
}

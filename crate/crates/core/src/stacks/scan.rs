//! Differentiable whole-sequence stack readings on the tape.
//!
//! These are the computations the attention sublayers call: given per-step
//! actions and pushed vectors for an entire sequence, produce the reading at
//! every timestep, with gradients flowing back through the recurrence.
//!
//! The nondeterministic scan mirrors [`super::vpda::VpdaState`] exactly, but
//! expressed in batched log-space contractions: per timestep it extends the
//! inner weights (`gamma`, and `zeta` for vectors) by one column using
//! replace, pop and regenerating-bottom terms plus a fresh push block, then
//! folds forward weights and the reading numerator. The cubic-cost pop
//! contraction runs through the fused gather-log-matmul so its gathered
//! operand is never retained.

use crate::real::Real;
use crate::tensor::tape::{GatherSpec, Tape, Var, GATHER_FILL};
use crate::{Error, Result};

use super::vpda::VpdaConfig;

/// Superposition-stack readings for a whole sequence.
///
/// `actions`: `[n, 3]` rows of (push, noop, pop) weights; `pushed`: `[n, m]`.
/// Returns `[n, m]` readings.
pub fn superposition_readings<F: Real>(
    tape: &mut Tape<F>,
    actions: Var,
    pushed: Var,
) -> Result<Var> {
    tape.sup_scan(actions, pushed)
}

/// Nondeterministic (vector PDA) stack readings for a whole sequence.
///
/// `deltas`: `[n, |Q| |Gamma| |Q| (2 |Gamma| + 1)]` transition log-weights per
/// step, laid out as in [`super::vpda::TransitionWeights`]; `pushed`:
/// `[n, m]` (linear space); `r0`: `[1, m]` initial bottom vector (linear).
/// Returns `[n, |Q| |Gamma| m]` readings, position `t` holding the reading
/// after scanning `t` symbols.
pub fn nondeterministic_readings<F: Real>(
    tape: &mut Tape<F>,
    cfg: &VpdaConfig,
    deltas: Var,
    pushed: Var,
    r0: Var,
) -> Result<Var> {
    let (qn, g, m) = (cfg.states, cfg.symbols, cfg.vector_dim);
    let s = cfg.pairs();
    let d_a = cfg.action_dim();
    let dshape = tape.shape(deltas).to_vec();
    if dshape.len() != 2 || dshape[1] != d_a {
        return Err(Error::Dimension(format!(
            "deltas must be [n, {}], got {:?}",
            d_a, dshape
        )));
    }
    let n = dshape[0];
    if tape.shape(pushed) != [n, m] {
        return Err(Error::Dimension(format!(
            "pushed must be [{}, {}], got {:?}",
            n,
            m,
            tape.shape(pushed)
        )));
    }
    if tape.numel(r0) != m {
        return Err(Error::Dimension(format!(
            "r0 must have {} elements, got {}",
            m,
            tape.numel(r0)
        )));
    }
    let neg = F::NEG_INF;

    // Index maps from a delta row [1, d_a] into per-step weight matrices.
    // Row layout per (q, x, r): g push targets, g replace targets, 1 pop.
    let dflat = |qx: usize, r: usize, v: usize| ((qx * qn + r) * (2 * g + 1) + v) as u32;
    let mut push_idx = Vec::with_capacity(s * s);
    let mut repl_idx = Vec::with_capacity(s * s);
    for qx in 0..s {
        for ry in 0..s {
            push_idx.push(dflat(qx, ry / g, ry % g));
            repl_idx.push(dflat(qx, ry / g, g + ry % g));
        }
    }
    let mut pop_idx = Vec::with_capacity(s * qn);
    for qx in 0..s {
        for r in 0..qn {
            pop_idx.push(dflat(qx, r, 2 * g));
        }
    }

    // t = 0 bases: indicator inner weights at (q0, bottom) and alpha[-1].
    let mut gam0 = vec![neg; s * s];
    gam0[0] = F::ZERO;
    let gam0 = tape.constant(vec![s, s], gam0);
    let logr0 = tape.to_signed_log(r0);
    let zeta0 = {
        let mut idx = vec![GATHER_FILL; m * s * s];
        for j in 0..m {
            idx[j * s * s] = j as u32; // (j, qx=0, ry=0) <- log r0[j]
        }
        tape.gather_fill(logr0, idx, vec![m, s, s], neg)?
    };
    let mut alpha_neg1 = vec![neg; s];
    alpha_neg1[0] = F::ZERO;
    let alpha_neg1 = tape.constant(vec![1, s], alpha_neg1);

    let mut gams: Vec<Var> = vec![gam0];
    let mut zetas: Vec<Var> = vec![zeta0];
    let mut alphas: Vec<Var> = vec![alpha_neg1];
    let mut readings: Vec<Var> = Vec::with_capacity(n);

    for t in 1..=n {
        let drow = tape.slice_rows(deltas, t - 1, t)?;
        let push_t = tape.gather_fill(drow, push_idx.clone(), vec![s, s], neg)?;
        let repl_t = tape.gather_fill(drow, repl_idx.clone(), vec![s, s], neg)?;
        let pop_t = tape.gather_fill(drow, pop_idx.clone(), vec![s, qn], neg)?;
        let vrow = tape.slice_rows(pushed, t - 1, t)?;
        let logv = tape.to_signed_log(vrow);

        let prev_g = gams[t - 1]; // [t s, s]
        let prev_z = zetas[t - 1]; // [m, t s, s]

        // Replace terms extend every span by one in-place substitution.
        let rg = tape.log_matmul(prev_g, repl_t, 1)?; // [t s, s]
        let rz = tape.log_matmul(prev_z, repl_t, m)?; // [m, t s, s]

        // gp[(k, uy), r]: weight of a span from (k, uy) whose top push is
        // popped at t. The k = -1 row group doubles as the regenerating-bottom
        // term for the i = -1 channel.
        let gp = tape.log_matmul(prev_g, pop_t, 1)?; // [t s, qn]

        // Regenerating bottom: gamma[-1 -> t](qx, (r, bottom)) gains
        // lse_sz gamma[-1 -> t-1](qx, sz) + pop(sz -> r) = gp rows 0..s.
        let reg_small = tape.slice_rows(gp, 0, s)?; // [s, qn]
        let reg_g = {
            let mut idx = vec![GATHER_FILL; t * s * s];
            for qx in 0..s {
                for r in 0..qn {
                    idx[qx * s + r * g + VpdaConfig::BOTTOM] = (qx * qn + r) as u32;
                }
            }
            tape.gather_fill(reg_small, idx, vec![t * s, s], neg)?
        };
        let reg_z = {
            // Same with vector lanes: zeta[-1 -> t-1] restricted to rows 0..s.
            let mut idx = vec![GATHER_FILL; m * s * s];
            for j in 0..m {
                for qx in 0..s {
                    for c in 0..s {
                        idx[(j * s + qx) * s + c] = ((j * t * s + qx) * s + c) as u32;
                    }
                }
            }
            let bot_z = tape.gather_fill(prev_z, idx, vec![m, s, s], neg)?;
            let reg_small_z = tape.log_matmul(bot_z, pop_t, m)?; // [m, s, qn]
            let mut idx2 = vec![GATHER_FILL; m * t * s * s];
            for j in 0..m {
                for qx in 0..s {
                    for r in 0..qn {
                        idx2[(j * t * s + qx) * s + r * g + VpdaConfig::BOTTOM] =
                            ((j * s + qx) * qn + r) as u32;
                    }
                }
            }
            tape.gather_fill(reg_small_z, idx2, vec![m, t * s, s], neg)?
        };

        let mut low_g = tape.log_add_exp(rg, reg_g)?;
        let mut low_z = tape.log_add_exp(rz, reg_z)?;

        // Pop terms: spans gamma[i -> k] whose later push is resolved at t.
        if t >= 2 {
            let kcount = t - 1;
            // B for gamma: [g, kcount qn, qn] gathered from gp (k >= 0 rows).
            let mut bg_idx = vec![GATHER_FILL; g * kcount * qn * qn];
            for y in 0..g {
                for k in 0..kcount {
                    for u in 0..qn {
                        for r in 0..qn {
                            bg_idx[((y * kcount * qn + k * qn + u) * qn) + r] =
                                (((k + 1) * s + u * g + y) * qn + r) as u32;
                        }
                    }
                }
            }
            let bg = tape.gather_fill(gp, bg_idx, vec![g, kcount * qn, qn], neg)?;
            let pg = tape.gather_log_matmul(
                &gams[0..t - 1],
                GatherSpec::PopA { t, s, qn, g, m: 1 },
                t * s,
                kcount * qn,
                bg,
                g,
            )?; // [g, t s, qn]
            let mut perm = vec![GATHER_FILL; t * s * s];
            for row in 0..t * s {
                for r in 0..qn {
                    for y in 0..g {
                        perm[row * s + r * g + y] = ((y * t * s + row) * qn + r) as u32;
                    }
                }
            }
            let pg_perm = tape.gather_fill(pg, perm, vec![t * s, s], neg)?;
            low_g = tape.log_add_exp(low_g, pg_perm)?;

            // Vector side: same contraction per (y, j) batch.
            let mut bz_idx = vec![GATHER_FILL; g * m * kcount * qn * qn];
            for y in 0..g {
                for j in 0..m {
                    let b2 = y * m + j;
                    for k in 0..kcount {
                        for u in 0..qn {
                            for r in 0..qn {
                                bz_idx[((b2 * kcount * qn + k * qn + u) * qn) + r] =
                                    (((k + 1) * s + u * g + y) * qn + r) as u32;
                            }
                        }
                    }
                }
            }
            let bz = tape.gather_fill(gp, bz_idx, vec![g * m, kcount * qn, qn], neg)?;
            let pz = tape.gather_log_matmul(
                &zetas[0..t - 1],
                GatherSpec::PopA { t, s, qn, g, m },
                t * s,
                kcount * qn,
                bz,
                g * m,
            )?; // [g m, t s, qn]
            let mut permz = vec![GATHER_FILL; m * t * s * s];
            for j in 0..m {
                for row in 0..t * s {
                    for r in 0..qn {
                        for y in 0..g {
                            permz[(j * t * s + row) * s + r * g + y] =
                                (((y * m + j) * t * s + row) * qn + r) as u32;
                        }
                    }
                }
            }
            let pz_perm = tape.gather_fill(pz, permz, vec![m, t * s, s], neg)?;
            low_z = tape.log_add_exp(low_z, pz_perm)?;
        }

        // Push block: row group i = t-1.
        let push_z = {
            let mut tile_push = vec![GATHER_FILL; m * s * s];
            let mut tile_v = vec![GATHER_FILL; m * s * s];
            for j in 0..m {
                for e in 0..s * s {
                    tile_push[j * s * s + e] = e as u32;
                    tile_v[j * s * s + e] = j as u32;
                }
            }
            let a = tape.gather_fill(push_t, tile_push, vec![m, s, s], neg)?;
            let b = tape.gather_fill(logv, tile_v, vec![m, s, s], neg)?;
            tape.add(a, b)?
        };
        let gam_t = tape.concat_rows(&[low_g, push_t], 1)?; // [(t+1) s, s]
        let zeta_t = tape.concat_rows(&[low_z, push_z], m)?; // [m, (t+1) s, s]

        // Forward weights and reading.
        let astack = tape.concat_rows(&alphas, 1)?; // [t+1, s]
        let ahist = tape.reshape(astack, vec![1, (t + 1) * s])?;
        let alpha_t = tape.log_matmul(ahist, gam_t, 1)?; // [1, s]
        let eta = tape.log_matmul(ahist, zeta_t, m)?; // [m, 1, s]
        let eta = tape.reshape(eta, vec![m, s])?;
        let z = tape.logsumexp_last(alpha_t)?; // [1, 1]
        let lin = tape.signed_exp_norm(eta, z)?; // [m, s], linear space
        let lin_t = tape.transpose(lin)?; // [s, m]
        let row = tape.reshape(lin_t, vec![1, s * m])?;
        readings.push(row);

        gams.push(gam_t);
        zetas.push(zeta_t);
        alphas.push(alpha_t);
    }

    tape.concat_rows(&readings, 1)
}

//! Brute-force run enumeration: the testing oracle for the VPDA dynamic
//! program.
//!
//! Every run is a sequence of transitions from the initial configuration
//! `(state 0, stack [(bottom, r0)])`, one transition per scanned symbol, with
//! weight equal to the product of transition weights. Semantics match the
//! dynamic program: push puts `(y, v_t)` on top, replace swaps the top symbol
//! keeping its vector, pop removes the top element — and popping the last
//! (depth-1) element regenerates a fresh `(bottom, r0)` cell instead of dying.
//! Zero-weight transitions produce no runs.

use crate::real::Real;
use crate::{Error, Result};

use super::vpda::{TransitionWeights, VpdaConfig};

/// Hard cap on the number of enumerated runs; the oracle is for tiny
/// instances only.
pub const MAX_RUNS: usize = 1_000_000;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RunAction {
    Push(usize),
    Replace(usize),
    Pop,
}

/// One transition as taken by a concrete run.
#[derive(Debug, Clone, Copy)]
pub struct RunStep {
    pub from_state: usize,
    pub top_symbol: usize,
    pub action: RunAction,
    pub to_state: usize,
}

/// A complete run: its transitions, accumulated weight, and final
/// configuration.
#[derive(Debug, Clone)]
pub struct VpdaRun<F: Real> {
    pub steps: Vec<RunStep>,
    pub weight: F,
    pub state: usize,
    pub stack: Vec<(usize, Vec<F>)>,
}

impl<F: Real> VpdaRun<F> {
    pub fn top(&self) -> &(usize, Vec<F>) {
        self.stack.last().expect("runs always keep at least the bottom element")
    }
}

/// Exhaustively enumerates every run scanning exactly `deltas.len()` symbols.
pub fn enumerate_runs<F: Real>(
    cfg: &VpdaConfig,
    deltas: &[TransitionWeights<F>],
    pushed: &[Vec<F>],
    r0: &[F],
) -> Result<Vec<VpdaRun<F>>> {
    if pushed.len() != deltas.len() {
        return Err(Error::Dimension(format!(
            "{} transition tensors but {} pushed vectors",
            deltas.len(),
            pushed.len()
        )));
    }
    if r0.len() != cfg.vector_dim {
        return Err(Error::Dimension("r0 dimension mismatch".into()));
    }
    for v in pushed {
        if v.len() != cfg.vector_dim {
            return Err(Error::Dimension("pushed vector dimension mismatch".into()));
        }
    }
    let mut runs = Vec::new();
    let start = VpdaRun {
        steps: Vec::new(),
        weight: F::ONE,
        state: VpdaConfig::START_STATE,
        stack: vec![(VpdaConfig::BOTTOM, r0.to_vec())],
    };
    extend(cfg, deltas, pushed, r0, start, &mut runs)?;
    Ok(runs)
}

fn extend<F: Real>(
    cfg: &VpdaConfig,
    deltas: &[TransitionWeights<F>],
    pushed: &[Vec<F>],
    r0: &[F],
    run: VpdaRun<F>,
    out: &mut Vec<VpdaRun<F>>,
) -> Result<()> {
    let t = run.steps.len();
    if t == deltas.len() {
        if out.len() >= MAX_RUNS {
            return Err(Error::Resource(format!("run enumeration exceeds cap {}", MAX_RUNS)));
        }
        out.push(run);
        return Ok(());
    }
    let delta = &deltas[t];
    let q = run.state;
    let x = run.top().0;
    for r in 0..cfg.states {
        for y in 0..cfg.symbols {
            let w = delta.push_w(q, x, r, y).exp();
            if w > F::ZERO {
                let mut next = run.clone();
                next.weight *= w;
                next.state = r;
                next.stack.push((y, pushed[t].clone()));
                next.steps.push(RunStep {
                    from_state: q,
                    top_symbol: x,
                    action: RunAction::Push(y),
                    to_state: r,
                });
                extend(cfg, deltas, pushed, r0, next, out)?;
            }
        }
        for y in 0..cfg.symbols {
            let w = delta.replace_w(q, x, r, y).exp();
            if w > F::ZERO {
                let mut next = run.clone();
                next.weight *= w;
                next.state = r;
                next.stack.last_mut().expect("non-empty").0 = y;
                next.steps.push(RunStep {
                    from_state: q,
                    top_symbol: x,
                    action: RunAction::Replace(y),
                    to_state: r,
                });
                extend(cfg, deltas, pushed, r0, next, out)?;
            }
        }
        let w = delta.pop_w(q, x, r).exp();
        if w > F::ZERO {
            let mut next = run.clone();
            next.weight *= w;
            next.state = r;
            if next.stack.len() == 1 {
                // Regenerating bottom: popping the depth-1 cell exposes a
                // fresh (bottom, r0) element.
                *next.stack.last_mut().expect("non-empty") =
                    (VpdaConfig::BOTTOM, r0.to_vec());
            } else {
                next.stack.pop();
            }
            next.steps.push(RunStep { from_state: q, top_symbol: x, action: RunAction::Pop, to_state: r });
            extend(cfg, deltas, pushed, r0, next, out)?;
        }
    }
    Ok(())
}

/// Implements the stack-reading definition directly on enumerated runs: per
/// `(r, y)` slice, the weighted sum of run top vectors over the total weight
/// of all runs. Zero total weight yields the zero vector.
pub fn oracle_reading<F: Real>(runs: &[VpdaRun<F>], t: usize, cfg: &VpdaConfig) -> Result<Vec<F>> {
    let (m, s) = (cfg.vector_dim, cfg.pairs());
    let mut numer = vec![F::ZERO; s * m];
    let mut denom = F::ZERO;
    for run in runs {
        if run.steps.len() != t {
            return Err(Error::Contract(format!(
                "run scans {} symbols, expected {}",
                run.steps.len(),
                t
            )));
        }
        denom += run.weight;
        let (y, vec) = run.top();
        let slice = run.state * cfg.symbols + y;
        for j in 0..m {
            numer[slice * m + j] += run.weight * vec[j];
        }
    }
    if denom > F::ZERO {
        for v in &mut numer {
            *v /= denom;
        }
    } else {
        numer.iter_mut().for_each(|v| *v = F::ZERO);
    }
    Ok(numer)
}

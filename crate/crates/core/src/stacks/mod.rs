//! Differentiable stacks.
//!
//! Two stack state machines share this module: the superposition stack
//! ([`superposition`]) and the nondeterministic vector pushdown automaton
//! simulated by a log-space dynamic program ([`vpda`]). [`oracle`] holds a
//! brute-force run enumerator used to test the dynamic program, and [`scan`]
//! builds the differentiable whole-sequence readings used by the attention
//! sublayers.

pub mod oracle;
pub mod scan;
pub mod superposition;
pub mod vpda;

pub use oracle::{enumerate_runs, oracle_reading, RunAction, VpdaRun, MAX_RUNS};
pub use scan::{nondeterministic_readings, superposition_readings};
pub use superposition::{ActionTriple, SuperpositionState};
pub use vpda::{TransitionWeights, VpdaConfig, VpdaState};

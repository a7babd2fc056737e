//! Stack attention for small transformer language models.
//!
//! This crate implements two differentiable stacks — a superposition stack and
//! a nondeterministic vector pushdown automaton (VPDA) simulated with a
//! log-space dynamic program — and wires them into a small causal transformer
//! as drop-in replacements for scaled dot-product attention. Around the models
//! it provides:
//!
//! * a minimal dense-tensor engine with reverse-mode differentiation
//!   ([`tensor`]),
//! * the stack state machines plus a brute-force run-enumeration oracle used
//!   to test them ([`stacks`]),
//! * attention sublayers and positional encodings ([`attention`]),
//! * model assembly with exact parameter accounting and checkpoints
//!   ([`model`]),
//! * probabilistic context-free grammar task generators with exact-probability
//!   oracles and the cross-entropy-difference metric ([`tasks`]),
//! * the training recipe: Adam, gradient clipping, LR schedule, early stopping
//!   ([`train`]).
//!
//! Everything is generic over [`real::Real`] (`f32` or `f64`); tests and
//! oracles run at 64-bit, training defaults to 32-bit.

pub mod attention;
pub mod model;
pub mod real;
pub mod rng;
pub mod stacks;
pub mod tasks;
pub mod tensor;
pub mod train;

/// Crate-wide error type.
#[derive(Debug, thiserror::Error)]
pub enum Error {
    /// Tensor shapes or extents do not line up.
    #[error("dimension error: {0}")]
    Dimension(String),
    /// An argument is outside its documented domain.
    #[error("parameter error: {0}")]
    Parameter(String),
    /// An API contract was violated (wrong call order, wrong variant, ...).
    #[error("contract error: {0}")]
    Contract(String),
    /// An allocation or cap would be exceeded.
    #[error("resource error: {0}")]
    Resource(String),
    /// Malformed input data (out-of-vocabulary token, bad string, ...).
    #[error("input error: {0}")]
    Input(String),
    /// A file or serialized payload could not be parsed.
    #[error("format error: {0}")]
    Format(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
}

pub type Result<T> = std::result::Result<T, Error>;

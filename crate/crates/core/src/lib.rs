//! Exact filtering and separated optimal control for finite pure-jump Markov
//! processes observed through a noise-free map.
//!
//! The signal `X` jumps on a finite set at controlled rates `lambda(x, u, z)`
//! and only `Y = h(X)` is observed. The conditional law of `X` given the past
//! of `Y` moves deterministically on one face of the effective simplex between
//! jumps of `Y` and is reset at each jump ([`filter`]). That makes it a
//! piecewise-deterministic process ([`pdmp`]) whose discounted control problem
//! is solved on a simplex grid by value iteration ([`solver`]). The
//! ground-truth simulator ([`signal`]) and the oracles in [`verify`] tie the
//! pieces together.

pub mod control;
pub mod filter;
pub mod io;
pub mod model;
pub mod pdmp;
pub mod rng;
pub mod signal;
pub mod solver;
pub mod stats;
pub mod verify;

pub use control::{ConstantPolicy, ControlPath, Policy, SojournLaw};
pub use model::{dirac, face_states, validate_model, Belief, ModelError, ModelSpec, RawModel, ValidateOptions};

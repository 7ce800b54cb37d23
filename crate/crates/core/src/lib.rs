//! Learning revenue-maximizing, low-regret contextual auction mechanisms.
//!
//! The crate provides a small reverse-mode autodiff tensor engine
//! ([`tensor`]), a permutation-equivariant transformer mechanism network
//! ([`net`]), contextual data generators ([`env`]), an augmented-Lagrangian
//! trainer ([`train`]), a multi-restart regret evaluator ([`eval`]) and an
//! item-wise Myerson baseline ([`myerson`]).

pub mod env;
pub mod net;
pub mod rng;
pub mod tensor;

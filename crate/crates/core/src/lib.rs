//! Causally-adjusted sequential event prediction.
//!
//! The crate provides a reverse-mode autodiff tape ([`tensor`]), dataset
//! handling and gap splits ([`data`]), a synthetic confounded generator with
//! exact oracles ([`scm`]), the branching network ([`model`]), its training
//! objective ([`objective`]), the optimizer loop ([`train`]) and gap-wise
//! evaluation ([`eval`]).

pub mod config;
pub mod data;
pub mod eval;
pub mod model;
pub mod objective;
pub mod par;
pub mod rng;
pub mod scm;
pub mod tensor;
pub mod train;
pub mod verify;

//! Desk-scale laboratory for gradient-based off-policy temporal-difference
//! policy evaluation on finite Markov decision processes.
//!
//! The crate has two halves that check each other:
//!
//! * an exact, matrix-analytic oracle for the projected-Bellman-error
//!   objective (its value, gradients, constrained optima, TD fixed points
//!   and minimax saddle points), and
//! * seeded simulations of the full GTD algorithm family (two- and
//!   single-time-scale GTDa/GTDb, mirror-descent variants, biased variants,
//!   composite eligibility-trace schemes) driven by the behavior chain.
//!
//! Everything is `no_std`-compatible (with `alloc`); file formats, CLI and
//! parallel execution live in the companion `gtdlab` crate.

#![cfg_attr(not(feature = "std"), no_std)]
// Validation guards use `!(x > 0.0)` deliberately: the negated form also
// rejects NaN parameters, which `x <= 0.0` would let through.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

extern crate alloc;

pub mod algo;
pub mod bellman;
pub mod estimator;
pub mod linalg;
pub mod mdp;
pub mod presets;
pub mod rng;
pub mod sim;
pub mod trace;
pub mod verify;

pub use mdp::{FeatureMap, FiniteMdp, ValidatedMdp};

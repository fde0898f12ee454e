//! Stationary analysis of the N-system matching model with unobservable
//! supply (and, in the two-sided variant, demand) types.
//!
//! Flexible supply serves both demand types; inflexible supply serves only
//! type-2 demand. Types are revealed only when a match is attempted, and
//! unmatched customers renege at exponential rates.

pub mod cli;
pub mod io;
pub mod logspace;
pub mod metrics;
pub mod model;
pub mod oracle;
pub mod product_form;
pub mod simulator;

pub use model::{
    ChainState, NSystemParams, OneSidedState, StationaryDistribution, SystemDistribution,
    SystemKind, Truncation, TwoSidedState,
};

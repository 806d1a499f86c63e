//! Second-order sensitivity of expected-utility value functions to the
//! market price of risk, on finite trees and by Monte Carlo.

// `!(x > 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod kw;
pub mod linalg;
pub mod market;
pub mod mc;
pub mod oracle;
pub mod preferences;
pub mod sensitivity;
pub mod solver;
pub mod strategies;

pub use error::{Error, Result};
pub use market::{NodeFunction, PathFunctional, TreeMarket};
pub use preferences::{UtilityChoice, UtilitySpec};
pub use solver::{solve_unperturbed, OptimalPair};

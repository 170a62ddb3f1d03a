//! Robust scheduling of byproduct gas in an integrated steel plant.
//!
//! The crate is layered bottom-up:
//!
//! - [`lp`]: dense revised simplex with dual values and warm starts;
//! - [`milp`]: branch-and-bound over binary variables;
//! - [`network`]: plant network types and the deterministic scheduling MILP;
//! - [`uncertainty`]: box and budget uncertainty sets over gas supply;
//! - [`forecast`]: quantile gradient-boosted trees for supply intervals;
//! - [`tsro`]: two-stage robust model, dualized subproblem, and
//!   column-and-constraint generation;
//! - [`instances`]: bundled toy and synthetic plant instances.

// `!(x >= 0.0)` style checks are deliberate: they reject NaN.
#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod forecast;
pub mod instances;
pub mod lp;
pub mod milp;
pub mod network;
pub mod oracle;
pub mod tsro;
pub mod uncertainty;

//! Optimal and heuristic pooled-testing procedures for small sample sets.
//!
//! Outcomes are bit vectors with bit `i` set when sample `i + 1` is infected.
//! A pooled test is positive when any sample in the pool is infected, and
//! priors are per-sample infection probabilities.

pub mod enumeration;
pub mod error;
pub mod heuristics;
pub mod model;
pub mod optimizer;
pub mod probability;
pub mod session;
pub mod zones;

pub use error::{Error, Result};
pub use model::codec;
pub use model::procedure::{Node, Procedure, ValidationReport, Violation};
pub use model::{Outcome, OutcomeSet, Permutation, Pool, TestResult};
pub use probability::{EvalMode, LengthVector, PriorVector, Scalar, Value};
pub use session::{Session, SessionContext, SessionSnapshot, SimulationReport, Strategy};
pub use zones::{ZoneMap, ZoneOptions};

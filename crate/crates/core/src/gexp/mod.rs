//! Nonlinear expectations built on the BSDE solver, and checks of their properties.

pub mod axioms;
pub mod bounds;
pub mod crossing;
pub mod expect;
pub mod oracle;
pub mod rmatrix;

pub use axioms::{axioms_report, Axiom, AxiomResult, AxiomsConfig, AxiomsReport, Envelope};
pub use bounds::{
    girsanov_density, growth_bound_check, norm_bound_check, GrowthReport, NormBoundReport,
};
pub use crossing::{
    check_submartingale, crossing_inequality_check, crossings, CrossingCounts, CrossingReport,
};
pub use expect::{er_driver, er_expectation, er_oracle, g_expectation, Sign};
pub use oracle::{
    ClassicalOracle, ExpectationOracle, ExternalOracle, GOracle, Provenance, ScenarioSet,
    StaticWorstCase, TableOracle,
};
pub use rmatrix::{RMatrix, RSpec};

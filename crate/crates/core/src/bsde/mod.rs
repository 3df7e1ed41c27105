//! Scalar BSDEs on the grid: drivers, the backward solver, balanced-driver
//! certificates and the comparison harness.

pub mod balance;
pub mod compare;
pub mod driver;
pub mod solve;

pub use balance::{
    check_balanced, check_r_balanced, max_w_norm, BalanceCertificate, BalanceVerdict,
};
pub use compare::{compare, ComparisonInput, ComparisonReport, ComparisonVerdict};
pub use driver::{
    audit_lipschitz, check_standard, AtomCtx, CatalogDriver, Classification, Driver, DriverMeta,
    DriverSpec, Lipschitz,
};
pub use solve::{solve, verify_solution, BsdeSolution, SolveOptions};

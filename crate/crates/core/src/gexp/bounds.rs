//! Change-of-measure density of a solved BSDE, the Hölder norm bound and the growth bound.

use serde::Serialize;

use super::expect::{er_oracle, Sign};
use super::oracle::ExpectationOracle;
use super::rmatrix::RMatrix;
use crate::bsde::{solve, BsdeSolution, Driver, SolveOptions};
use crate::error::{Error, Result};
use crate::martrep::MartingaleBasis;
use crate::probspace::{FilteredSpace, RandomVariable};

/// Terminal density `Λ_T = 𝔈(∫ θ dM)_T` with `θ = g Z / ||Z||²_M` (and `θ = 0` where `Z = 0`).
pub fn girsanov_density(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    sol: &BsdeSolution,
) -> RandomVariable {
    let kk = sol.terminal_level();
    let mut lambda = vec![1.0];
    for k in 1..=kk {
        let mut next = vec![0.0; space.n_nodes(k)];
        for a in 0..space.n_nodes(k - 1) {
            let z = sol.z.at(k, a);
            let norm = crate::martrep::m_norm_sq_with(z, basis.phi(k, a));
            let g = sol.gpath.at(k)[a];
            let theta: Vec<f64> = if norm > 0.0 {
                z.iter().map(|v| g * v / norm).collect()
            } else {
                vec![0.0; z.len()]
            };
            for c in space.children(k - 1, a) {
                next[c] = lambda[a] * (1.0 + basis.dot_increment(&theta, k, c));
            }
        }
        lambda = next;
    }
    RandomVariable::new(kk, lambda)
}

fn lp_norm(space: &FilteredSpace, x: &RandomVariable, p: f64) -> f64 {
    space
        .probs(x.level)
        .iter()
        .zip(&x.values)
        .map(|(w, v)| w * v.abs().powf(p))
        .sum::<f64>()
        .powf(1.0 / p)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct NormBoundReport {
    pub eps: f64,
    /// `E_g(Q)` from the solver.
    pub value: f64,
    /// `E[Λ_T Q]`.
    pub girsanov_value: f64,
    pub identity_gap: f64,
    /// `||Λ_T||_{1 + 1/eps}`.
    pub c_eps: f64,
    /// `||Q||_{1 + eps}`.
    pub q_norm: f64,
    pub density_positive: bool,
    pub holds: bool,
}

/// Checks `|E_g(Q)| <= C_eps ||Q||_{1+eps}` and `E_g(Q) = E[Λ_T Q]`.
pub fn norm_bound_check(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    q: &RandomVariable,
    eps: f64,
) -> Result<NormBoundReport> {
    if !(eps > 0.0 && eps.is_finite()) {
        return Err(Error::ParamsOutOfRange(format!(
            "eps must be positive, got {eps}"
        )));
    }
    if !driver.meta().zero_at_zero {
        return Err(Error::DriverNotAdmissible(
            "g(t, y, 0) = 0 is not declared".into(),
        ));
    }
    let sol = solve(driver, space, basis, q, &SolveOptions::default())?;
    let lambda = girsanov_density(space, basis, &sol);
    let value = sol.y0();
    let girsanov_value = space.expectation(&lambda.zip(q, |l, x| l * x));
    let c_eps = lp_norm(space, &lambda, 1.0 + 1.0 / eps);
    let q_norm = lp_norm(space, q, 1.0 + eps);
    let identity_gap = (value - girsanov_value).abs();
    let bound = c_eps * q_norm;
    Ok(NormBoundReport {
        eps,
        value,
        girsanov_value,
        identity_gap,
        c_eps,
        q_norm,
        density_positive: lambda.values.iter().all(|&l| l > 0.0),
        holds: value.abs() <= bound * (1.0 + 1e-12) + 1e-14,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct GrowthReport {
    pub level: usize,
    /// `E[E^r(Q | F_k)²]`.
    pub lhs: f64,
    /// `E[Q²] exp(sup ||r||²_D (μ_T - μ_k))`.
    pub rhs: f64,
    pub holds: bool,
}

pub fn growth_bound_check(
    r: &RMatrix,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    q: &RandomVariable,
    k: usize,
) -> Result<GrowthReport> {
    let er = er_oracle(r, Sign::Plus, space, basis)?;
    let cond = er.cond(q, k)?;
    let lhs = space.expectation(&cond.map(|v| v * v));
    let q2 = space.expectation(&q.map(|v| v * v));
    let sup = r.sup_d_norm_after(k);
    let horizon = space.grid().mu()[q.level] - space.grid().mu()[k];
    let rhs = q2 * (sup * sup * horizon).exp();
    Ok(GrowthReport {
        level: k,
        lhs,
        rhs,
        holds: lhs <= rhs * (1.0 + 1e-12) + 1e-14,
    })
}

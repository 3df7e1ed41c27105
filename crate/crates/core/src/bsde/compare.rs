//! Comparison harness: solve both problems, check the hypotheses on the
//! primed solution, certify the balanced condition, then compare pathwise.

use serde::Serialize;

use super::balance::{check_balanced, BalanceCertificate};
use super::driver::{AtomCtx, Driver};
use super::solve::{solve, BsdeSolution, SolveOptions};
use crate::error::Result;
use crate::martrep::MartingaleBasis;
use crate::probspace::{FilteredSpace, RandomVariable};

/// Slack allowed in the hypothesis and conclusion inequalities.
pub const COMPARE_TOL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "verdict", rename_all = "snake_case")]
pub enum ComparisonVerdict {
    HypothesisFails {
        reason: String,
    },
    /// The balanced condition could not be certified for the first driver.
    Inconclusive,
    Holds,
    Violated {
        level: usize,
        node: usize,
        gap: f64,
    },
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ComparisonReport {
    pub verdict: ComparisonVerdict,
    pub certificate: BalanceCertificate,
    /// `min (Y - Y')` over levels `>= s`.
    pub min_gap: f64,
    /// Nodes at levels `>= s` with `Y = Y'`.
    pub equality_nodes: usize,
    /// Whether equality at a node forces `Y = Y'` on its whole subtree.
    pub strictness_ok: bool,
    pub y0: f64,
    pub y0_primed: f64,
}

pub struct ComparisonInput<'a> {
    pub driver: &'a dyn Driver,
    pub q: &'a RandomVariable,
    pub driver2: &'a dyn Driver,
    pub q2: &'a RandomVariable,
    pub from_level: usize,
}

pub fn compare(
    input: &ComparisonInput<'_>,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    opts: &SolveOptions,
) -> Result<ComparisonReport> {
    let sol = solve(input.driver, space, basis, input.q, opts)?;
    let primed = solve(input.driver2, space, basis, input.q2, opts)?;
    let certificate = check_balanced(input.driver, space, basis, 50, 0x5eed);
    let (min_gap, equality_nodes, strictness_ok) = gaps(space, &sol, &primed, input.from_level);
    let mut report = ComparisonReport {
        verdict: ComparisonVerdict::Holds,
        certificate,
        min_gap,
        equality_nodes,
        strictness_ok,
        y0: sol.y0(),
        y0_primed: primed.y0(),
    };
    if let Some(reason) = hypothesis_failure(input, space, basis, &primed) {
        report.verdict = ComparisonVerdict::HypothesisFails { reason };
        return Ok(report);
    }
    if !certificate.is_balanced() {
        report.verdict = ComparisonVerdict::Inconclusive;
        return Ok(report);
    }
    let kk = sol.terminal_level();
    for t in input.from_level..=kk {
        for n in 0..space.n_nodes(t) {
            let gap = sol.y.levels[t].values[n] - primed.y.levels[t].values[n];
            if gap < -COMPARE_TOL * scale(&sol, &primed, t, n) {
                report.verdict = ComparisonVerdict::Violated {
                    level: t,
                    node: n,
                    gap,
                };
                return Ok(report);
            }
        }
    }
    Ok(report)
}

fn scale(a: &BsdeSolution, b: &BsdeSolution, t: usize, n: usize) -> f64 {
    a.y.levels[t].values[n]
        .abs()
        .max(b.y.levels[t].values[n].abs())
        .max(1.0)
}

fn hypothesis_failure(
    input: &ComparisonInput<'_>,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    primed: &BsdeSolution,
) -> Option<String> {
    if input.q.level != input.q2.level {
        return Some(format!(
            "terminal levels {} and {} differ",
            input.q.level, input.q2.level
        ));
    }
    if let Some((n, (a, b))) = input
        .q
        .values
        .iter()
        .zip(&input.q2.values)
        .enumerate()
        .find(|(_, (a, b))| **a < **b - COMPARE_TOL * a.abs().max(b.abs()).max(1.0))
    {
        return Some(format!("Q < Q' at node {n}: {a} < {b}"));
    }
    for k in input.from_level + 1..=input.q.level {
        for a in 0..space.n_nodes(k - 1) {
            let ctx = AtomCtx::new(basis, k, a);
            let y = primed.y.levels[k - 1].values[a];
            let z = primed.z.at(k, a);
            let g = input.driver.eval(&ctx, y, z);
            let g2 = input.driver2.eval(&ctx, y, z);
            if g < g2 - COMPARE_TOL * g.abs().max(g2.abs()).max(1.0) {
                return Some(format!("g < g' on step {k} atom {a}: {g} < {g2}"));
            }
        }
    }
    None
}

/// Minimum gap, count of equality nodes, and whether equality propagates forward.
fn gaps(
    space: &FilteredSpace,
    sol: &BsdeSolution,
    primed: &BsdeSolution,
    from: usize,
) -> (f64, usize, bool) {
    let kk = sol.terminal_level();
    let mut min_gap = f64::INFINITY;
    let mut equal = 0;
    let mut strict = true;
    let is_equal = |t: usize, n: usize| {
        (sol.y.levels[t].values[n] - primed.y.levels[t].values[n]).abs()
            <= COMPARE_TOL * scale(sol, primed, t, n)
    };
    for t in from..=kk {
        for n in 0..space.n_nodes(t) {
            min_gap = min_gap.min(sol.y.levels[t].values[n] - primed.y.levels[t].values[n]);
            if is_equal(t, n) {
                equal += 1;
                strict &= (t + 1..=kk).all(|u| space.descendants(t, n, u).all(|m| is_equal(u, m)));
            }
        }
    }
    (min_gap, equal, strict)
}

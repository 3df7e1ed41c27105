//! Up- and downcrossing counts and the crossing inequalities under `E^r`.

use serde::Serialize;

use super::expect::{er_oracle, Sign};
use super::oracle::ExpectationOracle;
use super::rmatrix::RMatrix;
use crate::error::{Error, Result};
use crate::martrep::MartingaleBasis;
use crate::probspace::{AdaptedProcess, FilteredSpace, RandomVariable};

/// Relative slack used for the submartingale precondition and the inequalities.
const CROSSING_TOL: f64 = 1e-10;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct CrossingCounts {
    pub up: usize,
    pub down: usize,
}

#[derive(Clone, Copy, PartialEq)]
enum Band {
    Below,
    Above,
    Unset,
}

/// Completed crossings of `[alpha, beta]` by `path[0..=up_to]`.
pub fn crossings(path: &[f64], alpha: f64, beta: f64, up_to: usize) -> Result<CrossingCounts> {
    if !(alpha < beta) {
        return Err(Error::BadInterval { alpha, beta });
    }
    let mut counts = CrossingCounts { up: 0, down: 0 };
    let mut last = Band::Unset;
    for &x in path.iter().take(up_to + 1) {
        if x <= alpha {
            if last == Band::Above {
                counts.down += 1;
            }
            last = Band::Below;
        } else if x >= beta {
            if last == Band::Below {
                counts.up += 1;
            }
            last = Band::Above;
        }
    }
    Ok(counts)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct CrossingReport {
    pub alpha: f64,
    pub beta: f64,
    pub horizon: usize,
    /// `E^r(U)` and the upper bound `(E^r((Y_S - alpha)^+) - (Y_0 - alpha)^+) / (beta - alpha)`.
    pub up_lhs: f64,
    pub up_rhs: f64,
    /// `E^r(D)`, `-E^r(-(Y_S - beta)^+) / (beta - alpha)` and `E^r((Y_S - beta)^+) / (beta - alpha)`.
    pub down_lhs: f64,
    pub down_mid: f64,
    pub down_rhs: f64,
    pub up_holds: bool,
    pub down_holds: bool,
}

impl CrossingReport {
    pub fn holds(&self) -> bool {
        self.up_holds && self.down_holds
    }
}

fn slack(a: f64, b: f64) -> f64 {
    CROSSING_TOL * a.abs().max(b.abs()).max(1.0)
}

/// Checks `Y_s <= E(Y_t | F_s)` for every `s < t <= horizon`.
pub fn check_submartingale(
    oracle: &dyn ExpectationOracle,
    y: &AdaptedProcess,
    horizon: usize,
) -> Result<()> {
    for t in 1..=horizon {
        for s in 0..t {
            let e = oracle.cond(&y.levels[t], s)?;
            for (n, (&ys, &es)) in y.levels[s].values.iter().zip(&e.values).enumerate() {
                if ys > es + slack(ys, es) {
                    return Err(Error::NotSubmartingale(format!(
                        "Y_{s} = {ys} > E(Y_{t} | F_{s}) = {es} at node {n}"
                    )));
                }
            }
        }
    }
    Ok(())
}

/// Evaluates both crossing inequalities for `Y` on `[0, horizon]` with `E = E^r`.
pub fn crossing_inequality_check(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    r: &RMatrix,
    y: &AdaptedProcess,
    alpha: f64,
    beta: f64,
    horizon: usize,
) -> Result<CrossingReport> {
    if !(alpha < beta) {
        return Err(Error::BadInterval { alpha, beta });
    }
    if horizon >= y.levels.len() {
        return Err(Error::LevelOrder {
            from: y.levels.len().saturating_sub(1),
            to: horizon,
        });
    }
    let er = er_oracle(r, Sign::Plus, space, basis)?;
    check_submartingale(&er, y, horizon)?;

    let n = space.n_nodes(horizon);
    let mut ups = Vec::with_capacity(n);
    let mut downs = Vec::with_capacity(n);
    for node in 0..n {
        let path: Vec<f64> = (0..=horizon)
            .map(|t| y.levels[t].values[space.ancestor(horizon, node, t)])
            .collect();
        let c = crossings(&path, alpha, beta, horizon)?;
        ups.push(c.up as f64);
        downs.push(c.down as f64);
    }
    let width = beta - alpha;
    let at0 = |x: RandomVariable| -> Result<f64> { Ok(er.cond(&x, 0)?.values[0]) };
    let ys = &y.levels[horizon];
    let y0 = y.levels[0].values[0];

    let up_lhs = at0(RandomVariable::new(horizon, ups))?;
    let up_rhs = (at0(ys.map(|v| (v - alpha).max(0.0)))? - (y0 - alpha).max(0.0)) / width;
    let down_lhs = at0(RandomVariable::new(horizon, downs))?;
    let down_mid = -at0(ys.map(|v| -(v - beta).max(0.0)))? / width;
    let down_rhs = at0(ys.map(|v| (v - beta).max(0.0)))? / width;
    let up_holds = up_lhs <= up_rhs + slack(up_lhs, up_rhs);
    let down_holds = down_lhs <= down_mid + slack(down_lhs, down_mid)
        && down_mid <= down_rhs + slack(down_mid, down_rhs);
    Ok(CrossingReport {
        alpha,
        beta,
        horizon,
        up_lhs,
        up_rhs,
        down_lhs,
        down_mid,
        down_rhs,
        up_holds,
        down_holds,
    })
}

//! Pathwise stochastic calculus on the grid: integrals, Doléans-Dade
//! exponentials, right-jump inversion, backward Grönwall bounds and
//! Girsanov reweighting.
//!
//! Every process here is purely discontinuous, so exponentials are jump
//! products and there is no continuous part to track.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::martrep::{IntegrandVector, MartingaleBasis};
use crate::probspace::{AdaptedProcess, FilteredSpace, RandomVariable};

/// Relative tolerance for the density checks in [`girsanov`].
const DENSITY_TOL: f64 = 1e-9;

/// Cumulative `∫_{]0,t]} Z dM` as an adapted process.
pub fn integral_process(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    z: &IntegrandVector,
) -> AdaptedProcess {
    let mut out = AdaptedProcess::zero(space);
    for k in 1..=space.steps() {
        for c in 0..space.n_nodes(k) {
            let a = space.parent(k, c);
            out.levels[k].values[c] =
                out.levels[k - 1].values[a] + basis.dot_increment(z.at(k, a), k, c);
        }
    }
    out
}

/// `∫_{]t_a, t_b]} Z dM`, measurable at level `b`.
pub fn stoch_integral(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    z: &IntegrandVector,
    a: usize,
    b: usize,
) -> Result<RandomVariable> {
    basis.stoch_integral(space, z, a, b)
}

/// Increments `ΔN_k` at every node of level `k >= 1`; index 0 is empty.
pub fn increments(space: &FilteredSpace, n: &AdaptedProcess) -> Vec<Vec<f64>> {
    let mut out = vec![Vec::new()];
    for k in 1..=space.steps() {
        out.push(
            (0..space.n_nodes(k))
                .map(|c| n.levels[k].values[c] - n.levels[k - 1].values[space.parent(k, c)])
                .collect(),
        );
    }
    out
}

/// Quadratic variation `[N]_t = Σ_{s<=t} (ΔN_s)²`.
pub fn square_bracket(space: &FilteredSpace, n: &AdaptedProcess) -> AdaptedProcess {
    let dn = increments(space, n);
    let mut out = AdaptedProcess::zero(space);
    for k in 1..=space.steps() {
        for c in 0..space.n_nodes(k) {
            out.levels[k].values[c] =
                out.levels[k - 1].values[space.parent(k, c)] + dn[k][c] * dn[k][c];
        }
    }
    out
}

/// Predictable quadratic variation `<N>`: the compensator of `[N]`.
pub fn angle_bracket(space: &FilteredSpace, n: &AdaptedProcess) -> AdaptedProcess {
    let dn = increments(space, n);
    let mut out = AdaptedProcess::zero(space);
    for k in 1..=space.steps() {
        for a in 0..space.n_nodes(k - 1) {
            let kids = space.children(k - 1, a);
            let q: f64 = kids
                .clone()
                .map(|c| space.cond_prob(k, c) * dn[k][c] * dn[k][c])
                .sum();
            let base = out.levels[k - 1].values[a] + q;
            for c in kids {
                out.levels[k].values[c] = base;
            }
        }
    }
    out
}

/// Doléans-Dade exponential with its positivity flag.
#[derive(Debug, Clone, PartialEq)]
pub struct Exponential {
    pub value: AdaptedProcess,
    /// False if some path hits zero or goes negative (a jump `<= -1`).
    pub strictly_positive: bool,
}

/// `𝔈(N; t_k) = Π_{j<=k} (1 + ΔN_j)` on every path.
pub fn doleans_exponential(space: &FilteredSpace, n: &AdaptedProcess) -> Exponential {
    let dn = increments(space, n);
    let mut value = AdaptedProcess::zero(space);
    value.levels[0].values.iter_mut().for_each(|v| *v = 1.0);
    let mut strictly_positive = true;
    for k in 1..=space.steps() {
        for c in 0..space.n_nodes(k) {
            let v = value.levels[k - 1].values[space.parent(k, c)] * (1.0 + dn[k][c]);
            strictly_positive &= v > 0.0;
            value.levels[k].values[c] = v;
        }
    }
    Exponential {
        value,
        strictly_positive,
    }
}

/// Deterministic exponential of a jump sequence: `[1, 1+x_1, (1+x_1)(1+x_2), ...]`.
pub fn exponential_of_jumps(jumps: &[f64]) -> Vec<f64> {
    let mut out = Vec::with_capacity(jumps.len() + 1);
    out.push(1.0);
    let mut acc = 1.0;
    for x in jumps {
        acc *= 1.0 + x;
        out.push(acc);
    }
    out
}

/// Deterministic finite-variation path `ν(t_0), ..., ν(t_K)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct FvProcess {
    values: Vec<f64>,
}

impl FvProcess {
    pub fn new(values: Vec<f64>) -> Self {
        Self { values }
    }

    /// Path starting at zero with the given jumps.
    pub fn from_jumps(jumps: &[f64]) -> Self {
        let mut values = vec![0.0];
        for j in jumps {
            values.push(values.last().unwrap() + j);
        }
        Self { values }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }

    pub fn jumps(&self) -> Vec<f64> {
        self.values.windows(2).map(|w| w[1] - w[0]).collect()
    }

    pub fn negated(&self) -> Self {
        Self::new(self.values.iter().map(|v| -v).collect())
    }

    /// `𝔈(ν; t_k)` for every `k`.
    pub fn exponential(&self) -> Vec<f64> {
        exponential_of_jumps(&self.jumps())
    }
}

fn check_jumps(jumps: &[f64]) -> Result<()> {
    match jumps.iter().position(|&j| !(j < 1.0)) {
        Some(i) => Err(Error::JumpTooLarge {
            index: i + 1,
            jump: jumps[i],
        }),
        None => Ok(()),
    }
}

/// `ν̃ = ν + Σ (Δν)² / (1 - Δν)`, so that each jump maps to `Δν / (1 - Δν)`.
pub fn right_jump_inversion(nu: &FvProcess) -> Result<FvProcess> {
    let jumps = nu.jumps();
    check_jumps(&jumps)?;
    let mut values = vec![nu.values[0]];
    for d in jumps {
        values.push(values.last().unwrap() + d / (1.0 - d));
    }
    Ok(FvProcess::new(values))
}

/// Forcing term of the backward Grönwall inequality.
#[derive(Debug, Clone, PartialEq)]
pub enum Alpha {
    Constant(f64),
    /// One value per grid point.
    Path(Vec<f64>),
}

/// Largest `u_t` compatible with `u_k <= α_k + Σ_{j>k} u_{j-1} Δν_j`.
///
/// The integrand is evaluated at the left end of each jump, which is what
/// makes the constant-α bound `α / Π_{j>t} (1 - Δν_j)`.
pub fn gronwall_bound(alpha: &Alpha, nu: &FvProcess, t: usize) -> Result<f64> {
    let jumps = nu.jumps();
    check_jumps(&jumps)?;
    let kk = nu.steps();
    if t > kk {
        return Err(Error::LevelOrder { from: kk, to: t });
    }
    match alpha {
        Alpha::Constant(a) => {
            let e = nu.negated().exponential();
            Ok(a * e[t] / e[kk])
        }
        Alpha::Path(a) => {
            if a.len() != kk + 1 {
                return Err(Error::DimensionMismatch {
                    expected: kk + 1,
                    got: a.len(),
                });
            }
            let tilde = right_jump_inversion(nu)?;
            let e_tilde = tilde.exponential();
            let d_tilde = tilde.jumps();
            let e_neg = nu.negated().exponential();
            let tail: f64 = (t + 1..=kk)
                .map(|j| e_tilde[j - 1] * a[j - 1] * d_tilde[j - 1])
                .sum();
            Ok(a[t] + e_neg[t] * tail)
        }
    }
}

/// Probability measure on the terminal outcomes.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Measure {
    q: Vec<f64>,
}

impl Measure {
    pub fn q(&self) -> &[f64] {
        &self.q
    }

    /// Whether every outcome keeps positive mass.
    pub fn equivalent_to_p(&self) -> bool {
        self.q.iter().all(|&q| q > 0.0)
    }

    /// Mass of each node at `level`.
    pub fn node_mass(&self, space: &FilteredSpace, level: usize) -> Vec<f64> {
        let kk = space.steps();
        let mut out = vec![0.0; space.n_nodes(level)];
        for (w, q) in self.q.iter().enumerate() {
            out[space.ancestor(kk, w, level)] += q;
        }
        out
    }

    /// Largest conditional drift `|E_q[X_k - X_{k-1} | F_{k-1}]|` over atoms with positive mass.
    pub fn max_drift(&self, space: &FilteredSpace, x: &AdaptedProcess) -> f64 {
        let mut worst: f64 = 0.0;
        let mut mass_prev = self.node_mass(space, 0);
        for k in 1..=space.steps() {
            let mass = self.node_mass(space, k);
            for a in 0..space.n_nodes(k - 1) {
                if mass_prev[a] <= 0.0 {
                    continue;
                }
                let base = x.levels[k - 1].values[a];
                let drift: f64 = space
                    .children(k - 1, a)
                    .map(|c| mass[c] * (x.levels[k].values[c] - base))
                    .sum::<f64>()
                    / mass_prev[a];
                worst = worst.max(drift.abs());
            }
            mass_prev = mass;
        }
        worst
    }

    /// Whether `x` is a martingale under this measure, to `tol`.
    pub fn is_martingale_under(&self, space: &FilteredSpace, x: &AdaptedProcess, tol: f64) -> bool {
        self.max_drift(space, x) <= tol
    }
}

/// Measure with density `Λ_T` against `P`.
pub fn girsanov(space: &FilteredSpace, lambda_t: &RandomVariable) -> Result<Measure> {
    let kk = space.steps();
    if lambda_t.level != kk {
        return Err(Error::LevelOrder {
            from: lambda_t.level,
            to: kk,
        });
    }
    space.check_rv(lambda_t)?;
    if let Some(v) = lambda_t.values.iter().find(|v| !(**v >= 0.0)) {
        return Err(Error::NotADensity(format!(
            "negative or non-finite value {v}"
        )));
    }
    let mean = space.expectation(lambda_t);
    if (mean - 1.0).abs() > DENSITY_TOL {
        return Err(Error::NotADensity(format!("mean {mean} differs from 1")));
    }
    let q = lambda_t
        .values
        .iter()
        .zip(space.probs(kk))
        .map(|(l, p)| l * p)
        .collect();
    Ok(Measure { q })
}

/// Moment table and squared-exponential bound for `𝔈(N)`.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ExpMomentReport {
    /// `(p, E[𝔈(N;T)^p])` for `p = 1, 2, 4, ...` up to `p_max`.
    pub moments: Vec<(u32, f64)>,
    pub strictly_positive: bool,
    /// `k = max <N>_T` over paths.
    pub k: f64,
    /// `max_t E[𝔈²(N;t)] e^{-k}`; at most 1 for a martingale `N`.
    pub second_moment_ratio: f64,
    /// Whether `𝔈²(N) e^{-<N>}` is a supermartingale, to 1e-10.
    pub compensated_supermartingale: bool,
    /// Paths on which `𝔈²(N;t) <= e^k 𝔈(2N+[N]-<N>;t)` fails at some `t`.
    pub pathwise_violations: usize,
}

impl ExpMomentReport {
    pub fn bound_holds(&self) -> bool {
        self.second_moment_ratio <= 1.0 + 1e-10 && self.compensated_supermartingale
    }
}

/// Exponential-moment diagnostics for a martingale `N` with `N_0 = 0`.
pub fn exp_moment_report(space: &FilteredSpace, n: &AdaptedProcess, p_max: u32) -> ExpMomentReport {
    let kk = space.steps();
    let exp = doleans_exponential(space, n);
    let terminal = exp.value.terminal();
    let mut moments = Vec::new();
    let mut p = 1u32;
    while p <= p_max.max(1) {
        moments.push((p, space.expectation(&terminal.map(|v| v.powi(p as i32)))));
        p = match p.checked_mul(2) {
            Some(q) => q,
            None => break,
        };
    }
    let sq = square_bracket(space, n);
    let ang = angle_bracket(space, n);
    let k = ang.terminal().values.iter().cloned().fold(0.0, f64::max);
    let second_moment_ratio = (0..=kk)
        .map(|t| space.expectation(&exp.value.at(t).map(|v| v * v)) * (-k).exp())
        .fold(0.0, f64::max);

    let compensated = AdaptedProcess {
        levels: (0..=kk)
            .map(|t| exp.value.at(t).zip(ang.at(t), |e, a| e * e * (-a).exp()))
            .collect(),
    };
    let compensated_supermartingale = (1..=kk).all(|t| {
        let back = space
            .conditional_expectation(compensated.at(t), t - 1)
            .expect("levels are ordered");
        back.values
            .iter()
            .zip(&compensated.at(t - 1).values)
            .all(|(b, c)| *b <= c + 1e-10 * c.abs().max(1.0))
    });

    let two_n = AdaptedProcess {
        levels: (0..=kk)
            .map(|t| {
                let s = n.at(t).zip(sq.at(t), |a, b| 2.0 * a + b);
                s.zip(ang.at(t), |a, b| a - b)
            })
            .collect(),
    };
    let rhs = doleans_exponential(space, &two_n).value;
    let pathwise_violations = (0..space.n_outcomes())
        .filter(|&w| {
            let lhs = exp.value.path(space, w);
            let r = rhs.path(space, w);
            lhs.iter()
                .zip(&r)
                .any(|(l, r)| l * l > k.exp() * r + 1e-10 * (l * l).max(1.0))
        })
        .count();

    ExpMomentReport {
        moments,
        strictly_positive: exp.strictly_positive,
        k,
        second_moment_ratio,
        compensated_supermartingale,
        pathwise_violations,
    }
}

//! Nonlinear Doob–Meyer decompositions: a direct one-pass compensator, the
//! penalization scheme that approximates it, drift extraction for martingales
//! of a dominated expectation, and the decomposition under such an expectation.

use serde::Serialize;

use crate::bsde::{solve, AtomCtx, Driver, DriverMeta, Lipschitz, SolveOptions};
use crate::error::{Error, Result};
use crate::exec::{for_level, try_map_indexed, Execution};
use crate::gexp::oracle::exec_for;
use crate::gexp::{ExpectationOracle, GOracle, RMatrix};
use crate::martrep::{IntegrandVector, MartingaleBasis};
use crate::probspace::{AdaptedProcess, FilteredSpace, PredictableProcess, RandomVariable};

/// Floating-point guard before a compensator increment counts as negative.
pub const COMPENSATOR_TOL: f64 = 1e-12;
/// Relative slack for the penalization sandwich and the martingale checks.
const ORDER_TOL: f64 = 1e-10;
/// Slack in the drift bound `|g| <= ||r Z||_M`.
pub const DRIFT_TOL: f64 = 1e-10;

fn scale(a: f64, b: f64) -> f64 {
    a.abs().max(b.abs()).max(1.0)
}

fn terminal(y: &AdaptedProcess) -> usize {
    y.levels.len() - 1
}

fn check_process(space: &FilteredSpace, y: &AdaptedProcess) -> Result<()> {
    if y.levels.is_empty() || y.levels.len() > space.steps() + 1 {
        return Err(Error::DimensionMismatch {
            expected: space.steps() + 1,
            got: y.levels.len(),
        });
    }
    for (k, level) in y.levels.iter().enumerate() {
        if level.level != k {
            return Err(Error::LevelOrder {
                from: level.level,
                to: k,
            });
        }
        space.check_rv(level)?;
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupermartingaleWitness {
    pub s: usize,
    pub t: usize,
    pub node: usize,
    pub value: f64,
    pub expectation: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SupermartingaleCheck {
    pub holds: bool,
    pub witness: Option<SupermartingaleWitness>,
}

/// Checks `Y_s >= E(Y_t | F_s)` for every pair `s < t`.
pub fn check_supermartingale(
    oracle: &dyn ExpectationOracle,
    y: &AdaptedProcess,
) -> Result<SupermartingaleCheck> {
    let mut worst: Option<(f64, SupermartingaleWitness)> = None;
    for t in 1..y.levels.len() {
        for s in 0..t {
            let e = oracle.cond(&y.levels[t], s)?;
            for (node, (&v, &ev)) in y.levels[s].values.iter().zip(&e.values).enumerate() {
                let excess = (ev - v) / scale(v, ev);
                if excess > ORDER_TOL && worst.as_ref().is_none_or(|w| excess > w.0) {
                    worst = Some((
                        excess,
                        SupermartingaleWitness {
                            s,
                            t,
                            node,
                            value: v,
                            expectation: ev,
                        },
                    ));
                }
            }
        }
    }
    Ok(SupermartingaleCheck {
        holds: worst.is_none(),
        witness: worst.map(|w| w.1),
    })
}

pub fn is_g_supermartingale(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
) -> Result<SupermartingaleCheck> {
    check_process(space, y)?;
    check_supermartingale(&GOracle::unchecked(space, basis, Box::new(driver)), y)
}

/// `Y_t = Y_0 - ∫ g dμ - A_t + ∫ Z dM` with `A` nondecreasing and predictable.
#[derive(Debug, Clone, PartialEq)]
pub struct Decomposition {
    pub y0: f64,
    pub z: IntegrandVector,
    /// `A_k` on the nodes of level `k`; constant over the children of an atom.
    pub a: AdaptedProcess,
    pub gpath: PredictableProcess,
    pub reconstruction_error: f64,
}

struct StepPiece {
    z: Vec<f64>,
    g: f64,
    da: f64,
}

/// Exact compensator of a `g`-supermartingale, computed one step at a time.
pub fn decompose_direct(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
) -> Result<Decomposition> {
    check_process(space, y)?;
    let top = terminal(y);
    let mut z = IntegrandVector::zeros(space, basis.dim());
    let mut g_steps: Vec<Vec<f64>> = (1..=space.steps())
        .map(|k| vec![0.0; space.n_nodes(k - 1)])
        .collect();
    let mut a_levels = vec![RandomVariable::new(0, vec![0.0])];
    let mut recon = 0.0f64;
    for k in 1..=top {
        let n_atoms = space.n_nodes(k - 1);
        let pieces = try_map_indexed(for_level(Execution::default(), n_atoms), n_atoms, |a| {
            let kids = space.children(k - 1, a);
            let next = &y.levels[k].values;
            let m: f64 = kids.clone().map(|c| space.cond_prob(k, c) * next[c]).sum();
            let diff: Vec<f64> = kids.map(|c| next[c] - m).collect();
            let zk = basis.project_increment(space, k, a, &diff);
            let ctx = AtomCtx::new(basis, k, a);
            let prev = y.levels[k - 1].values[a];
            let g = driver.eval(&ctx, prev, &zk);
            if !g.is_finite() {
                return Err(Error::NonFiniteDriver { step: k, node: a });
            }
            let da = prev - m - g * ctx.dmu;
            if da < -COMPENSATOR_TOL * scale(prev, m) {
                return Err(Error::NegativeCompensator {
                    step: k,
                    node: a,
                    increment: da,
                });
            }
            Ok(StepPiece {
                z: zk,
                g,
                da: da.max(0.0),
            })
        })?;
        let mut a_next = vec![0.0; space.n_nodes(k)];
        let dmu = basis.dmu(k);
        for (a, piece) in pieces.into_iter().enumerate() {
            let prev = y.levels[k - 1].values[a];
            for c in space.children(k - 1, a) {
                a_next[c] = a_levels[k - 1].values[a] + piece.da;
                let rebuilt = prev - piece.g * dmu - piece.da + basis.dot_increment(&piece.z, k, c);
                recon = recon.max((rebuilt - y.levels[k].values[c]).abs());
            }
            z.at_mut(k, a).copy_from_slice(&piece.z);
            g_steps[k - 1][a] = piece.g;
        }
        a_levels.push(RandomVariable::new(k, a_next));
    }
    Ok(Decomposition {
        y0: y.levels[0].values[0],
        z,
        a: AdaptedProcess { levels: a_levels },
        gpath: PredictableProcess::from_steps(space, g_steps)?,
        reconstruction_error: recon,
    })
}

/// `M_t = -∫ g dμ + ∫ Z dM`, the martingale part of a decomposition.
pub fn martingale_part(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    dec: &Decomposition,
) -> AdaptedProcess {
    let top = dec.a.levels.len() - 1;
    let mut levels = vec![RandomVariable::new(0, vec![0.0])];
    for k in 1..=top {
        let mut next = vec![0.0; space.n_nodes(k)];
        for a in 0..space.n_nodes(k - 1) {
            let drift = dec.gpath.at(k)[a] * basis.dmu(k);
            for c in space.children(k - 1, a) {
                next[c] =
                    levels[k - 1].values[a] - drift + basis.dot_increment(dec.z.at(k, a), k, c);
            }
        }
        levels.push(RandomVariable::new(k, next));
    }
    AdaptedProcess { levels }
}

/// Largest `|E_g(M_T | F_t) - M_t|` for the martingale part; needs `g` free of `y`.
pub fn check_martingale_part(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    dec: &Decomposition,
) -> Result<f64> {
    if !driver.meta().y_independent {
        return Err(Error::DriverNotAdmissible(
            "the martingale split needs a driver free of y".into(),
        ));
    }
    let m = martingale_part(space, basis, dec);
    let sol = solve(
        driver,
        space,
        basis,
        &m.levels[terminal(&m)],
        &SolveOptions::default(),
    )?;
    Ok(sol.y.max_abs_diff(&m))
}

/// Driver `g(y, z) + n (Y_{t-} - y)^+` for a fixed target process `Y`.
pub struct PenalizedDriver<'a> {
    base: &'a dyn Driver,
    target: &'a AdaptedProcess,
    n: f64,
    meta: DriverMeta,
}

impl<'a> PenalizedDriver<'a> {
    pub fn new(base: &'a dyn Driver, target: &'a AdaptedProcess, n: f64) -> Self {
        let b = base.meta();
        let meta = DriverMeta {
            lipschitz: b.lipschitz.map(|l| Lipschitz {
                lip_y: l.lip_y + n,
                lip_z: l.lip_z,
                max_y_slope: l.max_y_slope,
            }),
            zero_at_zero: false,
            y_independent: n == 0.0 && b.y_independent,
            z_independent: b.z_independent,
            dominating_r: None,
        };
        Self {
            base,
            target,
            n,
            meta,
        }
    }
}

impl Driver for PenalizedDriver<'_> {
    fn eval(&self, ctx: &AtomCtx<'_>, y: f64, z: &[f64]) -> f64 {
        let pre = self.target.levels[ctx.step - 1].values[ctx.node];
        self.base.eval(ctx, y, z) + self.n * (pre - y).max(0.0)
    }

    fn meta(&self) -> &DriverMeta {
        &self.meta
    }

    fn label(&self) -> String {
        format!("{} + {} (Y- - y)^+", self.base.label(), self.n)
    }
}

/// Penalty levels `1, 2, 4, ..., 2^16`.
pub fn default_schedule() -> Vec<f64> {
    (0..=16).map(|e| f64::from(1u32 << e)).collect()
}

/// `A^n_k = sum_{j <= k} n (Y_{j-1} - Y^n_{j-1})^+ Δμ_j`.
fn penalty_compensator(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
    yn: &AdaptedProcess,
    n: f64,
) -> AdaptedProcess {
    let mut levels = vec![RandomVariable::new(0, vec![0.0])];
    for k in 1..=terminal(y) {
        let mut next = vec![0.0; space.n_nodes(k)];
        for a in 0..space.n_nodes(k - 1) {
            let da = n
                * (y.levels[k - 1].values[a] - yn.levels[k - 1].values[a]).max(0.0)
                * basis.dmu(k);
            for c in space.children(k - 1, a) {
                next[c] = levels[k - 1].values[a] + da;
            }
        }
        levels.push(RandomVariable::new(k, next));
    }
    AdaptedProcess { levels }
}

fn z_distance(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    z1: &IntegrandVector,
    z2: &IntegrandVector,
    top: usize,
) -> f64 {
    let mut total = 0.0;
    for k in 1..=top {
        let probs = space.probs(k - 1);
        for (a, p) in probs.iter().enumerate() {
            let diff: Vec<f64> = z1
                .at(k, a)
                .iter()
                .zip(z2.at(k, a))
                .map(|(x, y)| x - y)
                .collect();
            total += p * crate::martrep::m_norm_sq_with(&diff, basis.phi(k, a)) * basis.dmu(k);
        }
    }
    total.sqrt()
}

fn z_energy(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    z: &IntegrandVector,
    top: usize,
) -> f64 {
    z_distance(
        space,
        basis,
        z,
        &IntegrandVector::zeros(space, basis.dim()),
        top,
    )
    .powi(2)
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizationStep {
    pub n: f64,
    pub y: AdaptedProcess,
    pub z: IntegrandVector,
    pub a: AdaptedProcess,
    /// `sup |Y - Y^n|`.
    pub gap_y: f64,
    /// `||Z - Z^n||` in `H²_M` against the direct decomposition.
    pub gap_z: f64,
    /// `sup |A - A^n|` against the direct decomposition.
    pub gap_a: f64,
    /// `E[(A^n_T)²]`.
    pub a_second_moment: f64,
    /// `E[∫ |Z^n|² d<M>]`.
    pub z_energy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PenalizationRow {
    pub n: f64,
    pub y0: f64,
    pub gap_y0: f64,
    pub gap_y: f64,
    pub gap_z: f64,
    pub gap_a: f64,
    pub a_second_moment: f64,
    pub z_energy: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PenalizationTrace {
    pub tol: f64,
    /// `Y^0 = E_g(Y_T | F_.)`.
    pub baseline: AdaptedProcess,
    pub steps: Vec<PenalizationStep>,
    pub direct: Decomposition,
    pub sandwich_ok: bool,
    pub sandwich_witness: Option<String>,
    pub converged: bool,
}

impl PenalizationTrace {
    pub fn rows(&self, target: &AdaptedProcess) -> Vec<PenalizationRow> {
        let y0 = target.levels[0].values[0];
        self.steps
            .iter()
            .map(|s| PenalizationRow {
                n: s.n,
                y0: s.y.levels[0].values[0],
                gap_y0: y0 - s.y.levels[0].values[0],
                gap_y: s.gap_y,
                gap_z: s.gap_z,
                gap_a: s.gap_a,
                a_second_moment: s.a_second_moment,
                z_energy: s.z_energy,
            })
            .collect()
    }

    pub fn last(&self) -> &PenalizationStep {
        self.steps.last().expect("schedule is nonempty")
    }

    /// `Err(NoConvergence)` when the tolerance was not met by the end of the schedule.
    pub fn require_converged(&self) -> Result<()> {
        if self.converged {
            return Ok(());
        }
        Err(Error::NoConvergence(format!(
            "sup |Y - Y^n| = {:e} at n = {} exceeds {:e}",
            self.last().gap_y,
            self.last().n,
            self.tol
        )))
    }
}

/// First place where `lower <= upper` fails, as a message.
fn order_violation(lower: &AdaptedProcess, upper: &AdaptedProcess, what: &str) -> Option<String> {
    for (k, (l, u)) in lower.levels.iter().zip(&upper.levels).enumerate() {
        for (node, (&x, &y)) in l.values.iter().zip(&u.values).enumerate() {
            if x > y + ORDER_TOL * scale(x, y) {
                return Some(format!("{what}: {x} > {y} at level {k} node {node}"));
            }
        }
    }
    None
}

/// Solves the penalized BSDEs along `schedule` and compares them with the direct decomposition.
pub fn penalized_sequence(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
    schedule: &[f64],
    tol: f64,
    exec: Execution,
) -> Result<PenalizationTrace> {
    if schedule.is_empty() || schedule.iter().any(|n| !(n.is_finite() && *n > 0.0)) {
        return Err(Error::ParamsOutOfRange(
            "penalty schedule must be nonempty and positive".into(),
        ));
    }
    let direct = decompose_direct(driver, space, basis, y)?;
    let top = terminal(y);
    let q = &y.levels[top];
    let opts = SolveOptions {
        exec,
        ..SolveOptions::default()
    };
    let baseline = solve(driver, space, basis, q, &opts)?.y;
    let solved = try_map_indexed(exec, schedule.len(), |i| {
        let pen = PenalizedDriver::new(driver, y, schedule[i]);
        solve(
            &pen,
            space,
            basis,
            q,
            &SolveOptions {
                exec: Execution::Sequential,
                ..opts
            },
        )
    })?;
    let mut steps = Vec::new();
    let mut converged = false;
    for (n, sol) in schedule.iter().copied().zip(solved) {
        let a = penalty_compensator(space, basis, y, &sol.y, n);
        let a_t = &a.levels[top];
        let step = PenalizationStep {
            n,
            gap_y: sol.y.max_abs_diff(y),
            gap_z: z_distance(space, basis, &sol.z, &direct.z, top),
            gap_a: a.max_abs_diff(&direct.a),
            a_second_moment: space.expectation(&a_t.map(|v| v * v)),
            z_energy: z_energy(space, basis, &sol.z, top),
            y: sol.y,
            z: sol.z,
            a,
        };
        converged = step.gap_y < tol;
        steps.push(step);
        if converged {
            break;
        }
    }
    let mut witness = None;
    let mut below = &baseline;
    for s in &steps {
        witness = witness.or_else(|| order_violation(below, &s.y, &format!("Y^prev <= Y^{}", s.n)));
        below = &s.y;
    }
    witness = witness.or_else(|| order_violation(below, y, "Y^n <= Y"));
    Ok(PenalizationTrace {
        tol,
        baseline,
        steps,
        direct,
        sandwich_ok: witness.is_none(),
        sandwich_witness: witness,
        converged,
    })
}

/// Drift and integrand of a martingale of a dominated expectation.
#[derive(Debug, Clone, PartialEq)]
pub struct Drift {
    pub gpath: PredictableProcess,
    pub z: IntegrandVector,
    /// `max (|g| - ||r Z||_M)` over all atoms.
    pub max_excess: f64,
}

/// Splits an `E`-martingale into `-∫ g dμ + ∫ Z dM` and checks `|g| <= ||r Z||_M`.
pub fn drift_extract(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    r: &RMatrix,
    y: &AdaptedProcess,
) -> Result<Drift> {
    check_process(space, y)?;
    let top = terminal(y);
    for t in 0..top {
        let e = oracle.cond(&y.levels[top], t)?;
        for (node, (&v, &ev)) in y.levels[t].values.iter().zip(&e.values).enumerate() {
            if (v - ev).abs() > 1e-9 * scale(v, ev) {
                return Err(Error::NotEMartingale(format!(
                    "Y_{t} = {v} but E(Y_{top} | F_{t}) = {ev} at node {node}"
                )));
            }
        }
    }
    let (gpath, z) = raw_drift(space, basis, y)?;
    let mut max_excess = f64::NEG_INFINITY;
    for k in 1..=top {
        for a in 0..space.n_nodes(k - 1) {
            let g = gpath.at(k)[a];
            let bound = r.image_norm(basis.phi(k, a), z.at(k, a));
            let excess = g.abs() - bound;
            max_excess = max_excess.max(excess);
            if excess > DRIFT_TOL {
                return Err(Error::BoundViolated {
                    step: k,
                    node: a,
                    g,
                    bound,
                });
            }
        }
    }
    Ok(Drift {
        gpath,
        z,
        max_excess,
    })
}

/// `g = (Y_{k-1} - E[Y_k | atom]) / Δμ` and `Z` from the martingale difference.
fn raw_drift(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
) -> Result<(PredictableProcess, IntegrandVector)> {
    let top = terminal(y);
    let mut z = IntegrandVector::zeros(space, basis.dim());
    let mut g_steps: Vec<Vec<f64>> = (1..=space.steps())
        .map(|k| vec![0.0; space.n_nodes(k - 1)])
        .collect();
    for k in 1..=top {
        for a in 0..space.n_nodes(k - 1) {
            let kids = space.children(k - 1, a);
            let next = &y.levels[k].values;
            let m: f64 = kids.clone().map(|c| space.cond_prob(k, c) * next[c]).sum();
            let diff: Vec<f64> = kids.map(|c| next[c] - m).collect();
            z.at_mut(k, a)
                .copy_from_slice(&basis.project_increment(space, k, a, &diff));
            g_steps[k - 1][a] = (y.levels[k - 1].values[a] - m) / basis.dmu(k);
        }
    }
    Ok((PredictableProcess::from_steps(space, g_steps)?, z))
}

/// `max (|g - g'| - ||r (Z - Z')||_M)` for two extracted drifts.
pub fn pairwise_excess(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    r: &RMatrix,
    d1: &Drift,
    d2: &Drift,
) -> f64 {
    let mut worst = f64::NEG_INFINITY;
    for k in 1..=d1.z.steps().min(d2.z.steps()) {
        for a in 0..space.n_nodes(k - 1) {
            let dz: Vec<f64> =
                d1.z.at(k, a)
                    .iter()
                    .zip(d2.z.at(k, a))
                    .map(|(x, y)| x - y)
                    .collect();
            let dg = (d1.gpath.at(k)[a] - d2.gpath.at(k)[a]).abs();
            worst = worst.max(dg - r.image_norm(basis.phi(k, a), &dz));
        }
    }
    worst
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErDomOptions {
    pub schedule: Vec<f64>,
    pub tol: f64,
    /// Oracle invocations allowed per time step over the whole schedule.
    pub max_oracle_calls: usize,
    pub exec: Execution,
}

impl Default for ErDomOptions {
    fn default() -> Self {
        Self {
            schedule: default_schedule(),
            tol: 1e-6,
            max_oracle_calls: 10_000,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErDomStep {
    pub n: f64,
    pub y: AdaptedProcess,
    pub a: AdaptedProcess,
    pub gap_y: f64,
    pub gap_a: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErDomDecomposition {
    /// Limiting compensator.
    pub a: AdaptedProcess,
    /// `max |Y_t + A_t - E(Y_T + A_T | F_t)|`.
    pub verification_error: f64,
    pub trace: Vec<ErDomStep>,
    pub converged: bool,
    pub oracle_calls: usize,
}

/// Decomposition `Y + A = E(Y_T + A_T | F_.)` of an `E`-supermartingale for an
/// `E^r`-dominated, translation-invariant oracle.
pub fn er_dom_decompose(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    r: &RMatrix,
    y: &AdaptedProcess,
    opts: &ErDomOptions,
) -> Result<ErDomDecomposition> {
    check_process(space, y)?;
    if opts.schedule.iter().any(|n| !(n.is_finite() && *n > 0.0)) {
        return Err(Error::ParamsOutOfRange(
            "penalty schedule must be positive".into(),
        ));
    }
    let top = terminal(y);
    let calls_per_step = 1 + 2 * opts.schedule.len();
    if calls_per_step > opts.max_oracle_calls {
        return Err(Error::NoConvergence(format!(
            "{calls_per_step} oracle calls per step exceed the limit {}",
            opts.max_oracle_calls
        )));
    }

    // Limiting compensator: ΔA_k = Y_{k-1} - E(Y_k | F_{k-1}).
    let mut a_levels = vec![RandomVariable::new(0, vec![0.0])];
    let mut calls = 0;
    for k in 1..=top {
        let e = oracle.cond(&y.levels[k], k - 1)?;
        calls += 1;
        let mut next = vec![0.0; space.n_nodes(k)];
        for a in 0..space.n_nodes(k - 1) {
            let prev = y.levels[k - 1].values[a];
            let da = prev - e.values[a];
            if da < -COMPENSATOR_TOL * scale(prev, e.values[a]) {
                return Err(Error::NegativeCompensator {
                    step: k,
                    node: a,
                    increment: da,
                });
            }
            for c in space.children(k - 1, a) {
                next[c] = a_levels[k - 1].values[a] + da.max(0.0);
            }
        }
        a_levels.push(RandomVariable::new(k, next));
    }
    let a_lim = AdaptedProcess { levels: a_levels };

    let sum = AdaptedProcess {
        levels: y
            .levels
            .iter()
            .zip(&a_lim.levels)
            .map(|(u, v)| u.zip(v, |p, q| p + q))
            .collect(),
    };
    let mut verification_error = 0.0f64;
    for t in 0..top {
        let e = oracle.cond(&sum.levels[top], t)?;
        verification_error = verification_error.max(e.max_abs_diff(&sum.levels[t]));
    }
    if verification_error
        > 1e-9
            * (1.0
                + sum.levels[top]
                    .values
                    .iter()
                    .fold(0.0f64, |m, v| m.max(v.abs())))
    {
        return Err(Error::OracleNotDominated(format!(
            "Y + A is not an E-martingale: defect {verification_error:e}; the oracle is not translation invariant"
        )));
    }
    let (gpath, z) = raw_drift(space, basis, &sum)?;
    for k in 1..=top {
        for a in 0..space.n_nodes(k - 1) {
            let g = gpath.at(k)[a];
            let bound = r.image_norm(basis.phi(k, a), z.at(k, a));
            if g.abs() > bound + DRIFT_TOL {
                return Err(Error::OracleNotDominated(format!(
                    "drift |g| = {} exceeds ||r Z||_M = {bound} at step {k} node {a}",
                    g.abs()
                )));
            }
        }
    }

    let exec = exec_for(oracle, opts.exec);
    let trace = try_map_indexed(exec, opts.schedule.len(), |i| {
        let n = opts.schedule[i];
        let yn = penalized_oracle_solve(oracle, space, basis, y, n)?;
        let a = penalty_compensator(space, basis, y, &yn, n);
        Ok::<_, Error>(ErDomStep {
            n,
            gap_y: yn.max_abs_diff(y),
            gap_a: a.max_abs_diff(&a_lim),
            y: yn,
            a,
        })
    })?;
    calls += trace.len() * 2 * top;
    let converged = trace.last().is_none_or(|s| s.gap_y < opts.tol);
    Ok(ErDomDecomposition {
        a: a_lim,
        verification_error,
        trace,
        converged,
        oracle_calls: calls,
    })
}

/// Backward solve of `Y^n_t = E(Y_T + n ∫_{]t,T]} (Y_{u-} - Y^n_{u-})^+ dμ | F_t)`.
fn penalized_oracle_solve(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
    n: f64,
) -> Result<AdaptedProcess> {
    let top = terminal(y);
    let mut levels = vec![RandomVariable::new(0, Vec::new()); top + 1];
    levels[top] = y.levels[top].clone();
    for k in (1..=top).rev() {
        let w = n * basis.dmu(k);
        let e = oracle.cond(&levels[k], k - 1)?;
        let prev = &y.levels[k - 1].values;
        let x: Vec<f64> = e
            .values
            .iter()
            .zip(prev)
            .map(|(&ev, &p)| ev.max((ev + w * p) / (1.0 + w)))
            .collect();
        let penalty = RandomVariable::new(
            k - 1,
            x.iter()
                .zip(prev)
                .map(|(&xv, &p)| w * (p - xv).max(0.0))
                .collect(),
        );
        let lifted = space.lift(&penalty, k)?;
        let check = oracle.cond(&levels[k].zip(&lifted, |u, v| u + v), k - 1)?;
        for (a, (&c, &xv)) in check.values.iter().zip(&x).enumerate() {
            if (c - xv).abs() > 1e-9 * scale(c, xv) {
                return Err(Error::OracleNotDominated(format!(
                    "penalized fixed point fails at step {k} node {a}: {c} != {xv}"
                )));
            }
        }
        levels[k - 1] = RandomVariable::new(k - 1, x);
    }
    Ok(AdaptedProcess { levels })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::{CatalogDriver, DriverSpec};
    use crate::gexp::{er_oracle, ClassicalOracle, RSpec, Sign};
    use crate::martrep::davis_varaiya_basis;
    use crate::probspace::TimeGrid;

    fn s2() -> (FilteredSpace, MartingaleBasis) {
        let s = FilteredSpace::regular(TimeGrid::from_increments(&[1.0]).unwrap(), 2).unwrap();
        let b = davis_varaiya_basis(&s);
        (s, b)
    }

    fn s2_process() -> AdaptedProcess {
        AdaptedProcess {
            levels: vec![
                RandomVariable::new(0, vec![1.0]),
                RandomVariable::new(1, vec![1.0, -1.0]),
            ],
        }
    }

    #[test]
    fn supermartingale_checks() {
        let (s, b) = s2();
        let zero = CatalogDriver::new(DriverSpec::Zero, &s, &b).unwrap();
        assert!(
            is_g_supermartingale(&zero, &s, &b, &s2_process())
                .unwrap()
                .holds
        );
        let bad = AdaptedProcess {
            levels: vec![
                RandomVariable::new(0, vec![-1.0]),
                RandomVariable::new(1, vec![1.0, -1.0]),
            ],
        };
        let check = is_g_supermartingale(&zero, &s, &b, &bad).unwrap();
        assert!(!check.holds);
        assert_eq!(check.witness.unwrap().node, 0);
    }

    #[test]
    fn direct_decomposition_by_hand() {
        let (s, b) = s2();
        let zero = CatalogDriver::new(DriverSpec::Zero, &s, &b).unwrap();
        let d = decompose_direct(&zero, &s, &b, &s2_process()).unwrap();
        assert_eq!(d.z.at(1, 0), &[1.0]);
        assert_eq!(d.a.levels[1].values, vec![1.0, 1.0]);
        let g = CatalogDriver::new(
            DriverSpec::RNorm {
                r: RSpec::Scalar(0.5),
            },
            &s,
            &b,
        )
        .unwrap();
        let d = decompose_direct(&g, &s, &b, &s2_process()).unwrap();
        assert_eq!(d.a.levels[1].values, vec![0.5, 0.5]);
        assert!(d.reconstruction_error < 1e-15);
    }

    #[test]
    fn martingale_has_zero_compensator() {
        let (s, b) = s2();
        let g = CatalogDriver::new(
            DriverSpec::RNorm {
                r: RSpec::Scalar(0.5),
            },
            &s,
            &b,
        )
        .unwrap();
        let q = RandomVariable::new(1, vec![1.0, -1.0]);
        let y = solve(&g, &s, &b, &q, &SolveOptions::default()).unwrap().y;
        let d = decompose_direct(&g, &s, &b, &y).unwrap();
        assert!(d.a.levels[1].values.iter().all(|v| v.abs() < 1e-15));
        assert!(check_martingale_part(&g, &s, &b, &d).unwrap() < 1e-12);
    }

    #[test]
    fn submartingale_is_rejected() {
        let (s, b) = s2();
        let zero = CatalogDriver::new(DriverSpec::Zero, &s, &b).unwrap();
        let y = AdaptedProcess {
            levels: vec![
                RandomVariable::new(0, vec![-1.0]),
                RandomVariable::new(1, vec![1.0, -1.0]),
            ],
        };
        assert!(matches!(
            decompose_direct(&zero, &s, &b, &y),
            Err(Error::NegativeCompensator {
                step: 1,
                node: 0,
                ..
            })
        ));
    }

    #[test]
    fn penalized_values_follow_the_closed_form() {
        let (s, b) = s2();
        let g = CatalogDriver::new(
            DriverSpec::RNorm {
                r: RSpec::Scalar(0.5),
            },
            &s,
            &b,
        )
        .unwrap();
        let y = s2_process();
        let schedule = [1.0, 3.0, 8.0, 100.0];
        let trace =
            penalized_sequence(&g, &s, &b, &y, &schedule, 0.0, Execution::Sequential).unwrap();
        assert!(trace.sandwich_ok, "{:?}", trace.sandwich_witness);
        for step in &trace.steps {
            let expected = (0.5 + step.n) / (1.0 + step.n);
            assert!(
                (step.y.levels[0].values[0] - expected).abs() < 1e-13,
                "n = {}",
                step.n
            );
        }
        assert!(!trace.converged);
        assert!(matches!(
            trace.require_converged(),
            Err(Error::NoConvergence(_))
        ));
    }

    #[test]
    fn penalization_leaves_martingales_alone() {
        let (s, b) = s2();
        let g = CatalogDriver::new(
            DriverSpec::RNorm {
                r: RSpec::Scalar(0.5),
            },
            &s,
            &b,
        )
        .unwrap();
        let y = solve(
            &g,
            &s,
            &b,
            &RandomVariable::new(1, vec![2.0, 0.0]),
            &SolveOptions::default(),
        )
        .unwrap()
        .y;
        let trace =
            penalized_sequence(&g, &s, &b, &y, &[1.0, 2.0], 1e-12, Execution::Sequential).unwrap();
        assert!(trace.converged);
        assert_eq!(trace.steps.len(), 1);
        assert!(trace.steps[0].a.levels[1].values.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn drift_of_er_martingale_is_tight() {
        let (s, b) = s2();
        let r = RMatrix::new(RSpec::Scalar(0.5), &s, &b).unwrap();
        let er = er_oracle(&r, Sign::Plus, &s, &b).unwrap();
        let q = RandomVariable::new(1, vec![1.0, -1.0]);
        let y = AdaptedProcess {
            levels: vec![er.cond(&q, 0).unwrap(), q.clone()],
        };
        let d = drift_extract(&er, &s, &b, &r, &y).unwrap();
        assert!((d.gpath.at(1)[0] - 0.5).abs() < 1e-14);
        assert_eq!(d.z.at(1, 0), &[1.0]);
        assert!(d.max_excess.abs() < 1e-14);
        let classical = drift_extract(
            &ClassicalOracle::new(&s),
            &s,
            &b,
            &r,
            &AdaptedProcess {
                levels: vec![RandomVariable::new(0, vec![0.0]), q],
            },
        )
        .unwrap();
        assert_eq!(classical.gpath.at(1)[0], 0.0);
    }

    #[test]
    fn drift_rejects_non_martingales() {
        let (s, b) = s2();
        let r = RMatrix::new(RSpec::Scalar(0.5), &s, &b).unwrap();
        let err = drift_extract(&ClassicalOracle::new(&s), &s, &b, &r, &s2_process()).unwrap_err();
        assert!(matches!(err, Error::NotEMartingale(_)));
    }

    #[test]
    fn oracle_decomposition_matches_direct_for_er() {
        let grid = TimeGrid::from_increments(&[0.5, 1.0]).unwrap();
        let s = FilteredSpace::regular(grid, 2).unwrap();
        let b = davis_varaiya_basis(&s);
        let r = RMatrix::new(RSpec::Scalar(0.4), &s, &b).unwrap();
        let g = CatalogDriver::new(
            DriverSpec::RNorm {
                r: RSpec::Scalar(0.4),
            },
            &s,
            &b,
        )
        .unwrap();
        let er = er_oracle(&r, Sign::Plus, &s, &b).unwrap();
        let q = RandomVariable::new(2, vec![1.0, -1.0, 0.5, 2.0]);
        let mut y = solve(&g, &s, &b, &q, &SolveOptions::default()).unwrap().y;
        y.levels[1].values[0] += 0.3;
        y.levels[0].values[0] += 0.7;
        let direct = decompose_direct(&g, &s, &b, &y).unwrap();
        let dom = er_dom_decompose(&er, &s, &b, &r, &y, &ErDomOptions::default()).unwrap();
        assert!(dom.a.max_abs_diff(&direct.a) < 1e-12);
        assert!(dom.verification_error < 1e-12);
        let last = dom.trace.last().unwrap();
        assert!(last.gap_a < 1e-4);
        assert!(dom
            .trace
            .windows(2)
            .all(|w| w[1].gap_y <= w[0].gap_y + 1e-15));
    }

    #[test]
    fn classical_oracle_gives_doob_compensator() {
        let grid = TimeGrid::from_increments(&[1.0, 1.0]).unwrap();
        let s = FilteredSpace::regular(grid, 2).unwrap();
        let b = davis_varaiya_basis(&s);
        let r = RMatrix::new(RSpec::Scalar(0.0), &s, &b).unwrap();
        let y = AdaptedProcess {
            levels: vec![
                RandomVariable::new(0, vec![2.0]),
                RandomVariable::new(1, vec![1.5, 0.5]),
                RandomVariable::new(2, vec![1.0, 0.0, 0.0, 0.0]),
            ],
        };
        let dom = er_dom_decompose(
            &ClassicalOracle::new(&s),
            &s,
            &b,
            &r,
            &y,
            &ErDomOptions::default(),
        )
        .unwrap();
        assert_eq!(dom.a.levels[1].values, vec![1.0, 1.0]);
        assert_eq!(dom.a.levels[2].values, vec![2.0, 2.0, 1.5, 1.5]);
    }
}

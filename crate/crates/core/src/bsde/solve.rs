//! Backward solver: one atom at a time, `Z` from the martingale difference,
//! then the scalar equation for the pre-jump value.

use super::driver::{AtomCtx, Driver};
use crate::error::{Error, Result};
use crate::exec::{for_level, try_map_indexed, Execution};
use crate::martrep::{IntegrandVector, MartingaleBasis};
use crate::probspace::{AdaptedProcess, FilteredSpace, PredictableProcess, RandomVariable};

/// Target accuracy of the scalar root solve.
pub const ROOT_TOL: f64 = 1e-13;
const MAX_ROOT_ITERS: usize = 400;
const MAX_BRACKET_DOUBLINGS: usize = 80;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolveOptions {
    pub exec: Execution,
    /// Offset added to the root finder's starting point; the solution must not depend on it.
    pub init_shift: f64,
}

impl Default for SolveOptions {
    fn default() -> Self {
        Self {
            exec: Execution::default(),
            init_shift: 0.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct BsdeSolution {
    /// Post-jump values `Y_{t_k}` for `k = 0..=L`, `L` the terminal level.
    pub y: AdaptedProcess,
    pub z: IntegrandVector,
    /// Realised driver values `g(k, atom, Y_{t_k-}, Z_k)`.
    pub gpath: PredictableProcess,
    /// Largest pathwise defect of the one-step equation.
    pub residual: f64,
}

impl BsdeSolution {
    pub fn terminal_level(&self) -> usize {
        self.y.levels.len() - 1
    }

    /// `Y_{t_k-}` at a node of level `k`; it is the value at the parent.
    pub fn pre_jump(&self, space: &FilteredSpace, k: usize, node: usize) -> f64 {
        self.y.levels[k - 1].values[space.parent(k, node)]
    }

    pub fn y0(&self) -> f64 {
        self.y.levels[0].values[0]
    }
}

#[derive(Debug, Clone)]
struct AtomSolution {
    y: f64,
    z: Vec<f64>,
    g: f64,
}

/// Solve the BSDE with terminal value `q` (at any level `L`) on `[0, t_L]`.
pub fn solve(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    q: &RandomVariable,
    opts: &SolveOptions,
) -> Result<BsdeSolution> {
    space.check_rv(q)?;
    let top = q.level;
    let mut levels = vec![RandomVariable::new(0, Vec::new()); top + 1];
    levels[top] = q.clone();
    let mut z = IntegrandVector::zeros(space, basis.dim());
    let mut g_steps: Vec<Vec<f64>> = (1..=space.steps())
        .map(|k| vec![0.0; space.n_nodes(k - 1)])
        .collect();
    for k in (1..=top).rev() {
        let next = &levels[k].values;
        let n_atoms = space.n_nodes(k - 1);
        let atoms = try_map_indexed(for_level(opts.exec, n_atoms), n_atoms, |a| {
            solve_atom(driver, space, basis, k, a, next, opts.init_shift)
        })?;
        let mut values = Vec::with_capacity(n_atoms);
        for (a, sol) in atoms.into_iter().enumerate() {
            values.push(sol.y);
            z.at_mut(k, a).copy_from_slice(&sol.z);
            g_steps[k - 1][a] = sol.g;
        }
        levels[k - 1] = RandomVariable::new(k - 1, values);
    }
    let y = AdaptedProcess { levels };
    let gpath = PredictableProcess::from_steps(space, g_steps)?;
    let residual = residual(space, basis, &y, &z, &gpath);
    Ok(BsdeSolution {
        y,
        z,
        gpath,
        residual,
    })
}

fn solve_atom(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    k: usize,
    a: usize,
    next: &[f64],
    init_shift: f64,
) -> Result<AtomSolution> {
    let kids = space.children(k - 1, a);
    let m: f64 = kids.clone().map(|c| space.cond_prob(k, c) * next[c]).sum();
    let diff: Vec<f64> = kids.map(|c| next[c] - m).collect();
    let z = basis.project_increment(space, k, a, &diff);
    let ctx = AtomCtx::new(basis, k, a);
    let meta = driver.meta();
    let y = if meta.y_independent {
        m + driver.eval(&ctx, m, &z) * ctx.dmu
    } else {
        invert_phi(driver, &ctx, &z, m, init_shift)?
    };
    let g = driver.eval(&ctx, y, &z);
    if !g.is_finite() || !y.is_finite() {
        return Err(Error::NonFiniteDriver { step: k, node: a });
    }
    Ok(AtomSolution { y, z, g })
}

/// Solve `y - g(y, z) Δmu = m` for the unique root of the increasing map.
fn invert_phi(
    driver: &dyn Driver,
    ctx: &AtomCtx<'_>,
    z: &[f64],
    m: f64,
    init_shift: f64,
) -> Result<f64> {
    let fail = |detail: String| Error::RootFindFailure {
        step: ctx.step,
        node: ctx.node,
        detail,
    };
    let f = |y: f64| -> Result<f64> {
        let g = driver.eval(ctx, y, z);
        if !g.is_finite() {
            return Err(Error::NonFiniteDriver {
                step: ctx.step,
                node: ctx.node,
            });
        }
        Ok(y - g * ctx.dmu - m)
    };
    let y0 = m + driver.eval(ctx, m, z) * ctx.dmu + init_shift;
    let f0 = f(y0)?;
    if f0 == 0.0 {
        return Ok(y0);
    }
    // φ has slope at least 1 - max_slope Δmu when that is positive; otherwise
    // fall back on the bi-Lipschitz constant 1 + c.
    let radius = match driver.meta().lipschitz {
        Some(l) if l.max_y_slope * ctx.dmu < 1.0 => f0.abs() / (1.0 - l.max_y_slope * ctx.dmu),
        Some(l) => (1.0 + l.plain_c()) * f0.abs(),
        None => f0.abs(),
    };
    let mut h = radius * (1.0 + 1e-9) + 1e-300;
    let (mut lo, mut hi, mut flo, mut fhi);
    let mut doublings = 0;
    loop {
        lo = y0 - h;
        hi = y0 + h;
        flo = f(lo)?;
        fhi = f(hi)?;
        if flo <= 0.0 && fhi >= 0.0 {
            break;
        }
        if flo > fhi {
            return Err(fail(format!("decreasing on [{lo}, {hi}]")));
        }
        doublings += 1;
        if doublings > MAX_BRACKET_DOUBLINGS {
            return Err(fail(format!("no sign change within radius {h}")));
        }
        h *= 2.0;
    }
    if flo == 0.0 {
        return Ok(lo);
    }
    if fhi == 0.0 {
        return Ok(hi);
    }
    // Illinois false position; keeps the bracket and converges superlinearly
    // on smooth and piecewise-linear φ alike.
    let (mut vlo, mut vhi) = (flo, fhi);
    let mut side = 0i8;
    let mut best = if flo.abs() < fhi.abs() { lo } else { hi };
    let mut fbest = flo.abs().min(fhi.abs());
    for _ in 0..MAX_ROOT_ITERS {
        let mut x = (lo * fhi - hi * flo) / (fhi - flo);
        if !(x > lo && x < hi) {
            x = 0.5 * (lo + hi);
        }
        let fx = f(x)?;
        if fx < vlo || fx > vhi {
            return Err(fail(format!("not monotone near {x}")));
        }
        if fx.abs() < fbest {
            best = x;
            fbest = fx.abs();
        }
        if fx == 0.0
            || fbest <= ROOT_TOL * m.abs().max(1.0)
            || hi - lo <= 4.0 * f64::EPSILON * x.abs().max(1.0)
        {
            return Ok(best);
        }
        if fx < 0.0 {
            lo = x;
            flo = fx;
            vlo = fx;
            if side == -1 {
                fhi *= 0.5;
            }
            side = -1;
        } else {
            hi = x;
            fhi = fx;
            vhi = fx;
            if side == 1 {
                flo *= 0.5;
            }
            side = 1;
        }
    }
    if fbest <= 1e3 * ROOT_TOL * m.abs().max(1.0) {
        Ok(best)
    } else {
        Err(fail(format!(
            "residual {fbest} after {MAX_ROOT_ITERS} iterations"
        )))
    }
}

/// Largest `|Y_{k-1} - g Δmu + Z ΔM - Y_k|` over all nodes.
fn residual(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
    z: &IntegrandVector,
    gpath: &PredictableProcess,
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 1..y.levels.len() {
        for c in 0..space.n_nodes(k) {
            let a = space.parent(k, c);
            let lhs = y.levels[k - 1].values[a] - gpath.at(k)[a] * space.dmu(k)
                + basis.dot_increment(z.at(k, a), k, c);
            worst = worst.max((lhs - y.levels[k].values[c]).abs());
        }
    }
    worst
}

/// Pathwise defect of an arbitrary `(Y, Z)` pair against a driver, re-evaluating `g`.
pub fn verify_solution(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    y: &AdaptedProcess,
    z: &IntegrandVector,
) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 1..y.levels.len() {
        for a in 0..space.n_nodes(k - 1) {
            let ctx = AtomCtx::new(basis, k, a);
            let ya = y.levels[k - 1].values[a];
            let g = driver.eval(&ctx, ya, z.at(k, a));
            for c in space.children(k - 1, a) {
                let lhs = ya - g * ctx.dmu + basis.dot_increment(z.at(k, a), k, c);
                worst = worst.max((lhs - y.levels[k].values[c]).abs());
            }
        }
    }
    worst
}

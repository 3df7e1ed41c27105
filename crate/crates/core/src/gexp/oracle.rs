//! Conditional-expectation oracles: classical, g-expectations, scenario
//! tables, a static worst case, and an external subprocess.

use std::io::{BufRead, BufReader, Write};
use std::process::{Child, ChildStdin, ChildStdout, Command, Stdio};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};

use crate::bsde::{check_balanced, solve, Driver, SolveOptions};
use crate::error::{Error, Result};
use crate::exec::Execution;
use crate::martrep::MartingaleBasis;
use crate::probspace::{FilteredSpace, RandomVariable};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Provenance {
    Classical,
    GExpectation,
    Table,
    StaticWorstCase,
    External,
}

/// `E(Q | F_k)` for payoffs `Q` at any level `>= k`.
pub trait ExpectationOracle: Send + Sync {
    fn cond(&self, q: &RandomVariable, k: usize) -> Result<RandomVariable>;
    fn provenance(&self) -> Provenance;
    fn label(&self) -> String;
    /// Whether concurrent calls are allowed.
    fn concurrent(&self) -> bool {
        true
    }
}

/// Execution policy that respects an oracle's concurrency flag.
pub fn exec_for(oracle: &dyn ExpectationOracle, exec: Execution) -> Execution {
    if oracle.concurrent() {
        exec
    } else {
        Execution::Sequential
    }
}

fn check_levels(q: &RandomVariable, k: usize) -> Result<()> {
    if k > q.level {
        return Err(Error::LevelOrder {
            from: q.level,
            to: k,
        });
    }
    Ok(())
}

pub struct ClassicalOracle<'a> {
    space: &'a FilteredSpace,
}

impl<'a> ClassicalOracle<'a> {
    pub fn new(space: &'a FilteredSpace) -> Self {
        Self { space }
    }
}

impl ExpectationOracle for ClassicalOracle<'_> {
    fn cond(&self, q: &RandomVariable, k: usize) -> Result<RandomVariable> {
        self.space.conditional_expectation(q, k)
    }

    fn provenance(&self) -> Provenance {
        Provenance::Classical
    }

    fn label(&self) -> String {
        "classical".into()
    }
}

/// `E_g(Q | F_k)`: the `Y` component of the BSDE with terminal value `Q`.
pub struct GOracle<'a> {
    space: &'a FilteredSpace,
    basis: &'a MartingaleBasis,
    driver: Box<dyn Driver + 'a>,
    opts: SolveOptions,
}

impl<'a> GOracle<'a> {
    /// Checks that the driver vanishes at `z = 0` and is certified balanced.
    pub fn new(
        space: &'a FilteredSpace,
        basis: &'a MartingaleBasis,
        driver: Box<dyn Driver + 'a>,
    ) -> Result<Self> {
        if !driver.meta().zero_at_zero {
            return Err(Error::DriverNotAdmissible(format!(
                "{} does not vanish at z = 0",
                driver.label()
            )));
        }
        let cert = check_balanced(driver.as_ref(), space, basis, 50, 0x6a7);
        if !cert.is_balanced() {
            return Err(Error::DriverNotAdmissible(format!(
                "{} is not certified balanced (bound {})",
                driver.label(),
                cert.upper
            )));
        }
        Ok(Self::unchecked(space, basis, driver))
    }

    pub fn unchecked(
        space: &'a FilteredSpace,
        basis: &'a MartingaleBasis,
        driver: Box<dyn Driver + 'a>,
    ) -> Self {
        Self {
            space,
            basis,
            driver,
            opts: SolveOptions::default(),
        }
    }

    pub fn with_options(mut self, opts: SolveOptions) -> Self {
        self.opts = opts;
        self
    }

    pub fn driver(&self) -> &dyn Driver {
        self.driver.as_ref()
    }
}

impl ExpectationOracle for GOracle<'_> {
    fn cond(&self, q: &RandomVariable, k: usize) -> Result<RandomVariable> {
        check_levels(q, k)?;
        let sol = solve(self.driver.as_ref(), self.space, self.basis, q, &self.opts)?;
        Ok(sol.y.levels[k].clone())
    }

    fn provenance(&self) -> Provenance {
        Provenance::GExpectation
    }

    fn label(&self) -> String {
        format!("g-expectation[{}]", self.driver.label())
    }
}

/// A set of probability measures on the terminal outcomes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScenarioSet {
    pub measures: Vec<Vec<f64>>,
}

/// Per-node conditional probabilities of each measure in a set.
#[derive(Debug, Clone, PartialEq)]
struct Conditionals {
    /// `cond[m][k][c]` for node `c` of level `k >= 1`.
    cond: Vec<Vec<Vec<f64>>>,
    /// `mass[m][k][n]`
    mass: Vec<Vec<Vec<f64>>>,
}

fn conditionals(space: &FilteredSpace, set: &ScenarioSet) -> Result<Conditionals> {
    if set.measures.is_empty() {
        return Err(Error::ParamsOutOfRange("scenario set is empty".into()));
    }
    let kk = space.steps();
    let mut cond = Vec::new();
    let mut mass = Vec::new();
    for (i, q) in set.measures.iter().enumerate() {
        if q.len() != space.n_outcomes() {
            return Err(Error::DimensionMismatch {
                expected: space.n_outcomes(),
                got: q.len(),
            });
        }
        if let Some(v) = q.iter().find(|v| !(**v > 0.0) || !v.is_finite()) {
            return Err(Error::ParamsOutOfRange(format!(
                "measure {i} has non-positive mass {v}"
            )));
        }
        let total: f64 = q.iter().sum();
        if (total - 1.0).abs() > 1e-9 {
            return Err(Error::ParamsOutOfRange(format!(
                "measure {i} has total mass {total}"
            )));
        }
        let mut m = vec![Vec::new(); kk + 1];
        m[kk] = q.clone();
        for k in (0..kk).rev() {
            let mut level = vec![0.0; space.n_nodes(k)];
            for (c, v) in m[k + 1].iter().enumerate() {
                level[space.parent(k + 1, c)] += v;
            }
            m[k] = level;
        }
        let mut cm = vec![Vec::new()];
        for k in 1..=kk {
            cm.push(
                (0..space.n_nodes(k))
                    .map(|c| m[k][c] / m[k - 1][space.parent(k, c)])
                    .collect(),
            );
        }
        cond.push(cm);
        mass.push(m);
    }
    Ok(Conditionals { cond, mass })
}

/// Time-consistent worst case: the per-atom maximum over the set's
/// conditional laws, applied one step at a time.
pub struct TableOracle<'a> {
    space: &'a FilteredSpace,
    tables: Conditionals,
}

impl<'a> TableOracle<'a> {
    pub fn new(space: &'a FilteredSpace, set: &ScenarioSet) -> Result<Self> {
        Ok(Self {
            space,
            tables: conditionals(space, set)?,
        })
    }

    /// Smallest scalar `r` with `|g(z)| <= r ||z||_M` for this oracle's one-step driver.
    pub fn dominating_scalar_r(&self, basis: &MartingaleBasis) -> f64 {
        let s = self.space;
        let mut worst: f64 = 0.0;
        for k in 1..=s.steps() {
            for a in 0..s.n_nodes(k - 1) {
                let phi = basis.phi(k, a);
                for cm in &self.tables.cond {
                    let mut v = vec![0.0; basis.dim()];
                    for c in s.children(k - 1, a) {
                        let dp = cm[k][c] - s.cond_prob(k, c);
                        for (i, m) in basis.increment(k, c).iter().enumerate() {
                            if phi[i] > 0.0 {
                                v[i] += dp * m / phi[i].sqrt();
                            }
                        }
                    }
                    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt() / basis.dmu(k);
                    worst = worst.max(n);
                }
            }
        }
        worst
    }
}

impl ExpectationOracle for TableOracle<'_> {
    fn cond(&self, q: &RandomVariable, k: usize) -> Result<RandomVariable> {
        check_levels(q, k)?;
        self.space.check_rv(q)?;
        let mut x = q.values.clone();
        for t in (k + 1..=q.level).rev() {
            x = (0..self.space.n_nodes(t - 1))
                .map(|a| {
                    self.tables
                        .cond
                        .iter()
                        .map(|cm| {
                            self.space
                                .children(t - 1, a)
                                .map(|c| cm[t][c] * x[c])
                                .sum::<f64>()
                        })
                        .fold(f64::NEG_INFINITY, f64::max)
                })
                .collect();
        }
        Ok(RandomVariable::new(k, x))
    }

    fn provenance(&self) -> Provenance {
        Provenance::Table
    }

    fn label(&self) -> String {
        format!("table[{} measures]", self.tables.cond.len())
    }
}

/// Static worst case: for each node, the maximum over the set of the
/// ordinary conditional expectations. Not time consistent in general.
pub struct StaticWorstCase<'a> {
    space: &'a FilteredSpace,
    tables: Conditionals,
}

impl<'a> StaticWorstCase<'a> {
    pub fn new(space: &'a FilteredSpace, set: &ScenarioSet) -> Result<Self> {
        Ok(Self {
            space,
            tables: conditionals(space, set)?,
        })
    }
}

impl ExpectationOracle for StaticWorstCase<'_> {
    fn cond(&self, q: &RandomVariable, k: usize) -> Result<RandomVariable> {
        check_levels(q, k)?;
        self.space.check_rv(q)?;
        let l = q.level;
        let values = (0..self.space.n_nodes(k))
            .map(|n| {
                self.tables
                    .mass
                    .iter()
                    .map(|m| {
                        let below = self.space.descendants(k, n, l);
                        below.map(|c| m[l][c] * q.values[c]).sum::<f64>() / m[k][n]
                    })
                    .fold(f64::NEG_INFINITY, f64::max)
            })
            .collect();
        Ok(RandomVariable::new(k, values))
    }

    fn provenance(&self) -> Provenance {
        Provenance::StaticWorstCase
    }

    fn label(&self) -> String {
        format!("static-worst-case[{} measures]", self.tables.mass.len())
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OracleRequest {
    pub q: Vec<f64>,
    pub level: usize,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct OracleResponse {
    pub values: Vec<f64>,
}

/// Oracle answered by a subprocess over line-delimited JSON on stdin/stdout.
///
/// Each request carries the payoff lifted to the terminal level. Calls are
/// serialised through a mutex and the oracle reports itself as not concurrent.
pub struct ExternalOracle<'a> {
    space: &'a FilteredSpace,
    command: String,
    io: Mutex<(Child, ChildStdin, BufReader<ChildStdout>)>,
}

impl<'a> ExternalOracle<'a> {
    pub fn spawn(space: &'a FilteredSpace, program: &str, args: &[String]) -> Result<Self> {
        let mut child = Command::new(program)
            .args(args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .spawn()
            .map_err(|e| Error::Oracle(format!("cannot start {program}: {e}")))?;
        let stdin = child.stdin.take().expect("piped stdin");
        let stdout = BufReader::new(child.stdout.take().expect("piped stdout"));
        Ok(Self {
            space,
            command: std::iter::once(program.to_string())
                .chain(args.iter().cloned())
                .collect::<Vec<_>>()
                .join(" "),
            io: Mutex::new((child, stdin, stdout)),
        })
    }
}

impl ExpectationOracle for ExternalOracle<'_> {
    fn cond(&self, q: &RandomVariable, k: usize) -> Result<RandomVariable> {
        check_levels(q, k)?;
        let lifted = self.space.lift(q, self.space.steps())?;
        let req = serde_json::to_string(&OracleRequest {
            q: lifted.values,
            level: k,
        })
        .map_err(|e| Error::Oracle(e.to_string()))?;
        let mut guard = self
            .io
            .lock()
            .map_err(|_| Error::Oracle("oracle lock poisoned".into()))?;
        let (_, stdin, stdout) = &mut *guard;
        writeln!(stdin, "{req}").map_err(|e| Error::Oracle(format!("write failed: {e}")))?;
        stdin
            .flush()
            .map_err(|e| Error::Oracle(format!("flush failed: {e}")))?;
        let mut line = String::new();
        let n = stdout
            .read_line(&mut line)
            .map_err(|e| Error::Oracle(format!("read failed: {e}")))?;
        if n == 0 {
            return Err(Error::Oracle(format!("{} closed its output", self.command)));
        }
        let resp: OracleResponse = serde_json::from_str(line.trim())
            .map_err(|e| Error::Oracle(format!("bad response {line:?}: {e}")))?;
        if resp.values.len() != self.space.n_nodes(k) {
            return Err(Error::Oracle(format!(
                "expected {} values at level {k}, got {}",
                self.space.n_nodes(k),
                resp.values.len()
            )));
        }
        Ok(RandomVariable::new(k, resp.values))
    }

    fn provenance(&self) -> Provenance {
        Provenance::External
    }

    fn label(&self) -> String {
        format!("external[{}]", self.command)
    }

    fn concurrent(&self) -> bool {
        false
    }
}

impl Drop for ExternalOracle<'_> {
    fn drop(&mut self) {
        if let Ok(guard) = self.io.get_mut() {
            let _ = guard.0.kill();
            let _ = guard.0.wait();
        }
    }
}

/// Answer one protocol line with `oracle`; used by servers of the protocol.
pub fn answer_request(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    line: &str,
) -> Result<String> {
    let req: OracleRequest = serde_json::from_str(line)
        .map_err(|e| Error::Oracle(format!("bad request {line:?}: {e}")))?;
    let q = RandomVariable::new(space.steps(), req.q);
    space.check_rv(&q)?;
    let values = oracle.cond(&q, req.level)?.values;
    serde_json::to_string(&OracleResponse { values }).map_err(|e| Error::Oracle(e.to_string()))
}

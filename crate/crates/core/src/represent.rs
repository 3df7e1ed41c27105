//! Recover the driver of a translation-invariant, dominated expectation from
//! oracle queries, and check that the oracle equals the g-expectation it defines.

use std::collections::HashMap;
use std::sync::Mutex;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::bsde::{solve, AtomCtx, Driver, DriverMeta, Lipschitz, SolveOptions};
use crate::doobmeyer::{drift_extract, er_dom_decompose, ErDomOptions};
use crate::error::{Error, Result};
use crate::exec::{derive_seed, try_map_indexed, Execution};
use crate::gexp::oracle::exec_for;
use crate::gexp::{
    axioms_report, er_oracle, AxiomsConfig, Envelope, ExpectationOracle, RMatrix, Sign,
};
use crate::martrep::MartingaleBasis;
use crate::probspace::{AdaptedProcess, FilteredSpace, RandomVariable};

/// Slack for the domination and pairwise Lipschitz certificates.
pub const DOMINATION_TOL: f64 = 1e-9;
const QUANTUM: f64 = 1e12;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum RecoveryMethod {
    /// `g(z) = E(z ΔM_k | F_{k-1}) / Δμ_k`.
    #[default]
    OneStep,
    /// Forward process, dominated decomposition, then drift extraction.
    Global,
}

#[derive(Debug, Clone, PartialEq)]
pub struct RecoveryOptions {
    pub method: RecoveryMethod,
    pub seed: u64,
    /// Random query directions per atom.
    pub random_directions: usize,
    /// Extra query points applied at every atom (inactive components are zeroed).
    pub extra_points: Vec<Vec<f64>>,
    /// Audit the oracle before recovery; `None` skips the audit.
    pub audit: Option<AxiomsConfig>,
    pub exec: Execution,
}

impl Default for RecoveryOptions {
    fn default() -> Self {
        Self {
            method: RecoveryMethod::OneStep,
            seed: 0,
            random_directions: 20,
            extra_points: Vec::new(),
            audit: Some(AxiomsConfig {
                samples: 50,
                ..AxiomsConfig::default()
            }),
            exec: Execution::default(),
        }
    }
}

type Key = (usize, usize, Vec<i64>);

fn quantize(z: &[f64]) -> Vec<i64> {
    z.iter().map(|v| (v * QUANTUM).round() as i64).collect()
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct QueryRecord {
    pub step: usize,
    pub node: usize,
    pub z: Vec<f64>,
    pub g: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct RecoveryCertificate {
    pub queries: usize,
    /// `max (|g(z)| - ||r z||_M)`.
    pub domination_excess: f64,
    /// `max (|g(z) - g(z')| - ||r (z - z')||_M)` over queried pairs on the same atom.
    pub pair_excess: f64,
    /// Every query at `z = 0` returned exactly 0.
    pub zero_exact: bool,
}

impl RecoveryCertificate {
    pub fn passed(&self) -> bool {
        self.zero_exact
            && self.domination_excess <= DOMINATION_TOL
            && self.pair_excess <= DOMINATION_TOL
    }
}

/// Driver whose values come from oracle queries, memoized by atom and quantized `z`.
pub struct RecoveredDriver<'a> {
    oracle: &'a dyn ExpectationOracle,
    space: &'a FilteredSpace,
    basis: &'a MartingaleBasis,
    r: RMatrix,
    method: RecoveryMethod,
    meta: DriverMeta,
    cache: Mutex<HashMap<Key, (Vec<f64>, f64)>>,
    failure: Mutex<Option<Error>>,
}

impl<'a> RecoveredDriver<'a> {
    fn new(
        oracle: &'a dyn ExpectationOracle,
        space: &'a FilteredSpace,
        basis: &'a MartingaleBasis,
        r: &RMatrix,
        method: RecoveryMethod,
    ) -> Self {
        let meta = DriverMeta {
            lipschitz: Some(Lipschitz {
                lip_y: 0.0,
                lip_z: r.sup_d_norm(),
                max_y_slope: 0.0,
            }),
            zero_at_zero: true,
            y_independent: true,
            z_independent: false,
            dominating_r: Some(r.clone()),
        };
        Self {
            oracle,
            space,
            basis,
            r: r.clone(),
            method,
            meta,
            cache: Mutex::new(HashMap::new()),
            failure: Mutex::new(None),
        }
    }

    pub fn method(&self) -> RecoveryMethod {
        self.method
    }

    /// `g(z; k, atom)`, querying the oracle on a cache miss.
    pub fn query(&self, k: usize, atom: usize, z: &[f64]) -> Result<f64> {
        if z.len() != self.basis.dim() {
            return Err(Error::DimensionMismatch {
                expected: self.basis.dim(),
                got: z.len(),
            });
        }
        let phi = self.basis.phi(k, atom);
        let z: Vec<f64> = z
            .iter()
            .zip(phi)
            .map(|(v, p)| if *p > 0.0 { *v } else { 0.0 })
            .collect();
        let key = (k, atom, quantize(&z));
        if let Some((_, g)) = self.cache.lock().expect("cache lock").get(&key) {
            return Ok(*g);
        }
        let g = match self.method {
            RecoveryMethod::OneStep => one_step(self.oracle, self.space, self.basis, k, atom, &z)?,
            RecoveryMethod::Global => {
                global(self.oracle, self.space, self.basis, &self.r, k, atom, &z)?
            }
        };
        if !g.is_finite() {
            return Err(Error::OracleAuditFailed(format!(
                "oracle returned a non-finite value at step {k} node {atom}"
            )));
        }
        let bound = self.r.image_norm(phi, &z);
        if g.abs() > bound + DOMINATION_TOL {
            return Err(Error::DominationViolated {
                step: k,
                node: atom,
                g: g.abs(),
                bound,
            });
        }
        self.cache.lock().expect("cache lock").insert(key, (z, g));
        Ok(g)
    }

    /// The first error raised during lazy evaluation inside the solver, if any.
    pub fn take_failure(&self) -> Option<Error> {
        self.failure.lock().expect("failure lock").take()
    }

    /// All cached queries, sorted by atom and then `z`.
    pub fn records(&self) -> Vec<QueryRecord> {
        let cache = self.cache.lock().expect("cache lock");
        let mut keys: Vec<&Key> = cache.keys().collect();
        keys.sort();
        keys.into_iter()
            .map(|key| {
                let (z, g) = &cache[key];
                QueryRecord {
                    step: key.0,
                    node: key.1,
                    z: z.clone(),
                    g: *g,
                }
            })
            .collect()
    }

    /// Domination and pairwise Lipschitz bounds over every cached query.
    pub fn certificate(&self) -> RecoveryCertificate {
        let records = self.records();
        let mut cert = RecoveryCertificate {
            queries: records.len(),
            domination_excess: f64::NEG_INFINITY,
            pair_excess: f64::NEG_INFINITY,
            zero_exact: true,
        };
        let mut start = 0;
        while start < records.len() {
            let (k, a) = (records[start].step, records[start].node);
            let end = start
                + records[start..]
                    .iter()
                    .take_while(|q| q.step == k && q.node == a)
                    .count();
            let phi = self.basis.phi(k, a);
            let group = &records[start..end];
            for (i, q) in group.iter().enumerate() {
                if q.z.iter().all(|v| *v == 0.0) && q.g != 0.0 {
                    cert.zero_exact = false;
                }
                cert.domination_excess = cert
                    .domination_excess
                    .max(q.g.abs() - self.r.image_norm(phi, &q.z));
                for p in &group[i + 1..] {
                    let dz: Vec<f64> = q.z.iter().zip(&p.z).map(|(x, y)| x - y).collect();
                    cert.pair_excess = cert
                        .pair_excess
                        .max((q.g - p.g).abs() - self.r.image_norm(phi, &dz));
                }
            }
            start = end;
        }
        cert
    }
}

impl Driver for RecoveredDriver<'_> {
    fn eval(&self, ctx: &AtomCtx<'_>, _y: f64, z: &[f64]) -> f64 {
        match self.query(ctx.step, ctx.node, z) {
            Ok(g) => g,
            Err(e) => {
                self.failure.lock().expect("failure lock").get_or_insert(e);
                f64::NAN
            }
        }
    }

    fn meta(&self) -> &DriverMeta {
        &self.meta
    }

    fn label(&self) -> String {
        format!("recovered[{}]", self.oracle.label())
    }
}

/// Payoff `z · ΔM_k` on the children of `atom`, zero elsewhere.
fn increment_payoff(
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    k: usize,
    atom: usize,
    z: &[f64],
) -> RandomVariable {
    let mut values = vec![0.0; space.n_nodes(k)];
    for c in space.children(k - 1, atom) {
        values[c] = basis.dot_increment(z, k, c);
    }
    RandomVariable::new(k, values)
}

fn one_step(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    k: usize,
    atom: usize,
    z: &[f64],
) -> Result<f64> {
    let x = increment_payoff(space, basis, k, atom, z);
    Ok(oracle.cond(&x, k - 1)?.values[atom] / basis.dmu(k))
}

fn global(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    r: &RMatrix,
    k: usize,
    atom: usize,
    z: &[f64],
) -> Result<f64> {
    // Forward process Y^z = -∫ ||r z||_M dμ + ∫ z dM, active on one atom and step.
    let top = space.steps();
    let drift = r.image_norm(basis.phi(k, atom), z) * basis.dmu(k);
    let mut jump = increment_payoff(space, basis, k, atom, z);
    for c in space.children(k - 1, atom) {
        jump.values[c] -= drift;
    }
    let mut levels: Vec<RandomVariable> = (0..k)
        .map(|j| RandomVariable::constant(space, j, 0.0))
        .collect();
    for j in k..=top {
        levels.push(space.lift(&jump, j)?);
    }
    let y = AdaptedProcess { levels };
    let opts = ErDomOptions {
        schedule: Vec::new(),
        exec: Execution::Sequential,
        ..ErDomOptions::default()
    };
    let dec = er_dom_decompose(oracle, space, basis, r, &y, &opts)?;
    let martingale = AdaptedProcess {
        levels: y
            .levels
            .iter()
            .zip(&dec.a.levels)
            .map(|(u, v)| u.zip(v, |p, q| p + q))
            .collect(),
    };
    let extracted = drift_extract(oracle, space, basis, r, &martingale)?;
    Ok(extracted.gpath.at(k)[atom])
}

/// Query points for one atom: axis points `{0, ±1, ±2}` on active components,
/// random directions, and caller-supplied points.
fn query_grid(
    phi: &[f64],
    extra: &[Vec<f64>],
    n_random: usize,
    rng: &mut ChaCha8Rng,
) -> Vec<Vec<f64>> {
    let d = phi.len();
    let active: Vec<usize> = (0..d).filter(|&i| phi[i] > 0.0).collect();
    let mut points = vec![vec![0.0; d]];
    for &i in &active {
        for v in [-2.0, -1.0, 1.0, 2.0] {
            let mut z = vec![0.0; d];
            z[i] = v;
            points.push(z);
        }
    }
    if !active.is_empty() {
        for _ in 0..n_random {
            let mut z = vec![0.0; d];
            for &i in &active {
                z[i] = rng.gen_range(-2.0..2.0);
            }
            points.push(z);
        }
    }
    points.extend(extra.iter().filter(|p| p.len() == d).cloned());
    points
}

/// Recovers the driver of `oracle` on every atom of the query grid.
pub fn recover_driver<'a>(
    oracle: &'a dyn ExpectationOracle,
    space: &'a FilteredSpace,
    basis: &'a MartingaleBasis,
    r: &RMatrix,
    opts: &RecoveryOptions,
) -> Result<RecoveredDriver<'a>> {
    if let Some(cfg) = &opts.audit {
        let upper = er_oracle(r, Sign::Plus, space, basis)?;
        let lower = er_oracle(r, Sign::Minus, space, basis)?;
        let env = Envelope {
            upper: &upper,
            lower: &lower,
        };
        let report = axioms_report(oracle, space, Some(&env), cfg)?;
        if !report.passed() {
            let failed: Vec<String> = report
                .results
                .iter()
                .filter(|r| r.asserted && r.passed == Some(false))
                .map(|r| {
                    format!(
                        "{} ({})",
                        r.axiom.name(),
                        r.witness.clone().unwrap_or_default()
                    )
                })
                .collect();
            return Err(Error::OracleAuditFailed(failed.join("; ")));
        }
    }
    let rec = RecoveredDriver::new(oracle, space, basis, r, opts.method);
    let atoms: Vec<(usize, usize)> = (1..=space.steps())
        .flat_map(|k| (0..space.n_nodes(k - 1)).map(move |a| (k, a)))
        .collect();
    let exec = exec_for(oracle, opts.exec);
    try_map_indexed(exec, atoms.len(), |i| {
        let (k, a) = atoms[i];
        let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(opts.seed, i as u64));
        for z in query_grid(
            basis.phi(k, a),
            &opts.extra_points,
            opts.random_directions,
            &mut rng,
        ) {
            rec.query(k, a, &z)?;
        }
        Ok::<_, Error>(())
    })?;
    let cert = rec.certificate();
    if !cert.zero_exact {
        return Err(Error::OracleAuditFailed("g(0) is not exactly 0".into()));
    }
    if cert.pair_excess > DOMINATION_TOL {
        let worst = worst_pair(&rec);
        return Err(worst);
    }
    Ok(rec)
}

fn worst_pair(rec: &RecoveredDriver<'_>) -> Error {
    let records = rec.records();
    let mut worst = (f64::NEG_INFINITY, 0, 0, 0.0, 0.0);
    for (i, q) in records.iter().enumerate() {
        for p in records[i + 1..]
            .iter()
            .filter(|p| p.step == q.step && p.node == q.node)
        {
            let dz: Vec<f64> = q.z.iter().zip(&p.z).map(|(x, y)| x - y).collect();
            let bound = rec.r.image_norm(rec.basis.phi(q.step, q.node), &dz);
            let gap = (q.g - p.g).abs();
            if gap - bound > worst.0 {
                worst = (gap - bound, q.step, q.node, gap, bound);
            }
        }
    }
    Error::DominationViolated {
        step: worst.1,
        node: worst.2,
        g: worst.3,
        bound: worst.4,
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LabeledPayoff {
    pub label: String,
    pub payoff: RandomVariable,
}

/// Terminal indicators, `n_random` uniform payoffs on `[-2, 2]`, and payoffs that
/// share conditional means with a random payoff but have larger spread.
pub fn default_payoffs(
    space: &FilteredSpace,
    n_random: usize,
    seed: u64,
) -> Result<Vec<LabeledPayoff>> {
    let kk = space.steps();
    let n = space.n_outcomes();
    let mut out: Vec<LabeledPayoff> = (0..n)
        .map(|w| {
            let mut v = vec![0.0; n];
            v[w] = 1.0;
            LabeledPayoff {
                label: format!("indicator {w}"),
                payoff: RandomVariable::new(kk, v),
            }
        })
        .collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    for i in 0..n_random {
        let v = (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect();
        out.push(LabeledPayoff {
            label: format!("random {i}"),
            payoff: RandomVariable::new(kk, v),
        });
    }
    for i in 0..(n_random / 4).max(1) {
        let x = RandomVariable::new(kk, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect());
        let mean = space.lift(&space.conditional_expectation(&x, kk - 1)?, kk)?;
        let spread: f64 = rng.gen_range(2.0..4.0);
        out.push(LabeledPayoff {
            label: format!("matched-mean {i}"),
            payoff: mean.zip(&x, |m, v| m + spread * (v - m)),
        });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationWitness {
    pub payoff: String,
    pub level: usize,
    pub node: usize,
    pub oracle_value: f64,
    pub g_value: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RepresentationReport {
    pub payoffs: usize,
    pub max_deviation: f64,
    pub tol: f64,
    pub passed: bool,
    pub witness: Option<RepresentationWitness>,
}

/// `max_{Q, k} |E(Q | F_k) - E_g(Q | F_k)|` with `g` the recovered driver.
pub fn verify_representation(
    oracle: &dyn ExpectationOracle,
    rec: &RecoveredDriver<'_>,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    payoffs: &[LabeledPayoff],
    tol: f64,
) -> Result<RepresentationReport> {
    let exec = exec_for(oracle, Execution::default());
    let per_payoff = try_map_indexed(exec, payoffs.len(), |i| {
        let q = &payoffs[i].payoff;
        let sol = solve(
            rec,
            space,
            basis,
            q,
            &SolveOptions {
                exec: Execution::Sequential,
                ..SolveOptions::default()
            },
        );
        if let Some(e) = rec.take_failure() {
            return Err(e);
        }
        let sol = sol?;
        let mut worst: Option<(f64, RepresentationWitness)> = None;
        for k in 0..=q.level {
            let e = oracle.cond(q, k)?;
            for (node, (&ov, &gv)) in e.values.iter().zip(&sol.y.levels[k].values).enumerate() {
                let dev = (ov - gv).abs();
                if worst.as_ref().is_none_or(|w| dev > w.0) {
                    worst = Some((
                        dev,
                        RepresentationWitness {
                            payoff: payoffs[i].label.clone(),
                            level: k,
                            node,
                            oracle_value: ov,
                            g_value: gv,
                        },
                    ));
                }
            }
        }
        Ok::<_, Error>(worst)
    })?;
    let worst =
        per_payoff
            .into_iter()
            .flatten()
            .fold(None::<(f64, RepresentationWitness)>, |acc, w| match acc {
                Some(a) if a.0 >= w.0 => Some(a),
                _ => Some(w),
            });
    let max_deviation = worst.as_ref().map_or(0.0, |w| w.0);
    let passed = max_deviation < tol;
    Ok(RepresentationReport {
        payoffs: payoffs.len(),
        max_deviation,
        tol,
        passed,
        witness: if passed { None } else { worst.map(|w| w.1) },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct UniquenessReport {
    pub compared: usize,
    pub max_difference: f64,
    pub tol: f64,
    pub passed: bool,
}

/// Compares two recoveries on the queries they share.
pub fn uniqueness_probe(
    a: &RecoveredDriver<'_>,
    b: &RecoveredDriver<'_>,
    tol: f64,
) -> UniquenessReport {
    let left = a.cache.lock().expect("cache lock");
    let right = b.cache.lock().expect("cache lock");
    let mut compared = 0;
    let mut max_difference = 0.0f64;
    for (key, (_, g)) in left.iter() {
        if let Some((_, h)) = right.get(key) {
            compared += 1;
            max_difference = max_difference.max((g - h).abs());
        }
    }
    UniquenessReport {
        compared,
        max_difference,
        tol,
        passed: max_difference < tol,
    }
}

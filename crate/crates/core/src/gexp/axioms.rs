//! Sampled audit of the structural properties of an expectation oracle.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::oracle::{exec_for, ExpectationOracle};
use crate::error::Result;
use crate::exec::{derive_seed, try_map_indexed, Execution};
use crate::probspace::{FilteredSpace, RandomVariable};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AxiomsConfig {
    pub samples: usize,
    pub seed: u64,
    pub tol: f64,
    pub exec: Execution,
}

impl Default for AxiomsConfig {
    fn default() -> Self {
        Self {
            samples: 200,
            seed: 0,
            tol: 1e-9,
            exec: Execution::default(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Axiom {
    Constants,
    Monotonicity,
    StrictMonotonicity,
    Tower,
    LocalProperty,
    ZeroOne,
    TranslationInvariance,
    Convexity,
    PositiveHomogeneity,
    Additivity,
    Domination,
    Sandwich,
}

impl Axiom {
    pub const ALL: [Axiom; 12] = [
        Axiom::Constants,
        Axiom::Monotonicity,
        Axiom::StrictMonotonicity,
        Axiom::Tower,
        Axiom::LocalProperty,
        Axiom::ZeroOne,
        Axiom::TranslationInvariance,
        Axiom::Convexity,
        Axiom::PositiveHomogeneity,
        Axiom::Additivity,
        Axiom::Domination,
        Axiom::Sandwich,
    ];

    /// Properties whose failure fails the audit. The rest are reported only.
    pub fn asserted(self) -> bool {
        !matches!(
            self,
            Axiom::Convexity | Axiom::PositiveHomogeneity | Axiom::Additivity
        )
    }

    pub fn name(self) -> &'static str {
        match self {
            Axiom::Constants => "constants",
            Axiom::Monotonicity => "monotonicity",
            Axiom::StrictMonotonicity => "strict_monotonicity",
            Axiom::Tower => "tower",
            Axiom::LocalProperty => "local_property",
            Axiom::ZeroOne => "zero_one",
            Axiom::TranslationInvariance => "translation_invariance",
            Axiom::Convexity => "convexity",
            Axiom::PositiveHomogeneity => "positive_homogeneity",
            Axiom::Additivity => "additivity",
            Axiom::Domination => "domination",
            Axiom::Sandwich => "sandwich",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomResult {
    pub axiom: Axiom,
    pub asserted: bool,
    /// `None` when the property was not checked (domination without an `r`).
    pub passed: Option<bool>,
    /// Largest scaled violation seen.
    pub worst: f64,
    pub witness: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AxiomsReport {
    pub samples: usize,
    pub results: Vec<AxiomResult>,
}

impl AxiomsReport {
    pub fn get(&self, axiom: Axiom) -> &AxiomResult {
        self.results
            .iter()
            .find(|r| r.axiom == axiom)
            .expect("every axiom is reported")
    }

    /// True iff every asserted and checked property passed.
    pub fn passed(&self) -> bool {
        self.results
            .iter()
            .all(|r| !r.asserted || r.passed != Some(false))
    }
}

/// Upper and lower envelopes `E^r` and `E^{-r}` used for the domination checks.
pub struct Envelope<'a> {
    pub upper: &'a dyn ExpectationOracle,
    pub lower: &'a dyn ExpectationOracle,
}

type Violation = (f64, String);

fn excess(lhs: &RandomVariable, rhs: &RandomVariable) -> (f64, usize) {
    lhs.values
        .iter()
        .zip(&rhs.values)
        .enumerate()
        .map(|(i, (a, b))| ((a - b) / a.abs().max(b.abs()).max(1.0), i))
        .fold(
            (f64::NEG_INFINITY, 0),
            |acc, x| if x.0 > acc.0 { x } else { acc },
        )
}

fn mismatch(lhs: &RandomVariable, rhs: &RandomVariable) -> (f64, usize) {
    let (a, i) = excess(lhs, rhs);
    let (b, j) = excess(rhs, lhs);
    if a >= b {
        (a.max(0.0), i)
    } else {
        (b.max(0.0), j)
    }
}

fn random_rv(rng: &mut ChaCha8Rng, level: usize, n: usize) -> RandomVariable {
    RandomVariable::new(level, (0..n).map(|_| rng.gen_range(-2.0..2.0)).collect())
}

/// Audit `oracle` with `cfg.samples` seeded random instances.
pub fn axioms_report(
    oracle: &dyn ExpectationOracle,
    space: &FilteredSpace,
    envelope: Option<&Envelope<'_>>,
    cfg: &AxiomsConfig,
) -> Result<AxiomsReport> {
    let mut exec = exec_for(oracle, cfg.exec);
    if let Some(env) = envelope {
        exec = exec_for(env.upper, exec_for(env.lower, exec));
    }
    let per_sample = try_map_indexed(exec, cfg.samples, |i| {
        sample(oracle, space, envelope, derive_seed(cfg.seed, i as u64), i)
    })?;
    let results = Axiom::ALL
        .iter()
        .enumerate()
        .map(|(j, &axiom)| {
            let checked =
                envelope.is_some() || !matches!(axiom, Axiom::Domination | Axiom::Sandwich);
            let (worst, witness) =
                per_sample
                    .iter()
                    .map(|v| v[j].clone())
                    .fold(
                        (0.0f64, None),
                        |acc, (w, s)| if w > acc.0 { (w, Some(s)) } else { acc },
                    );
            AxiomResult {
                axiom,
                asserted: axiom.asserted(),
                passed: checked.then_some(worst <= cfg.tol),
                worst,
                witness: if worst > cfg.tol { witness } else { None },
            }
        })
        .collect();
    Ok(AxiomsReport {
        samples: cfg.samples,
        results,
    })
}

fn sample(
    e: &dyn ExpectationOracle,
    space: &FilteredSpace,
    envelope: Option<&Envelope<'_>>,
    seed: u64,
    index: usize,
) -> Result<Vec<Violation>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let kk = space.steps();
    let n = space.n_outcomes();
    let t = rng.gen_range(0..=kk);
    let s = rng.gen_range(0..=t);
    let x = random_rv(&mut rng, kk, n);
    let y = random_rv(&mut rng, kk, n);
    let eta = space.lift(&random_rv(&mut rng, t, space.n_nodes(t)), kk)?;
    let in_a: Vec<bool> = (0..space.n_nodes(t)).map(|_| rng.gen_bool(0.5)).collect();
    let ind = space.lift(
        &RandomVariable::new(t, in_a.iter().map(|&b| if b { 1.0 } else { 0.0 }).collect()),
        kk,
    )?;
    let lambda: f64 = rng.gen_range(0.05..0.95);
    let scale: f64 = rng.gen_range(0.1..3.0);
    let c: f64 = rng.gen_range(-2.0..2.0);
    let tag = |name: &str, i: usize| {
        format!("sample {index} (seed {seed}): {name} at level {t} node {i}")
    };
    let mut out: Vec<Violation> = Vec::with_capacity(Axiom::ALL.len());

    let ex_t = e.cond(&x, t)?;

    // Constants.
    let cst = RandomVariable::constant(space, kk, c);
    let (v, i) = mismatch(&e.cond(&cst, t)?, &RandomVariable::constant(space, t, c));
    out.push((v, tag("E(c) != c", i)));

    // Monotonicity, with a strictly smaller payoff on a random nonempty set.
    let bump_at = rng.gen_range(0..n);
    let lower = RandomVariable::new(
        kk,
        x.values
            .iter()
            .enumerate()
            .map(|(w, v)| {
                if w == bump_at || rng.gen_bool(0.3) {
                    v - rng.gen_range(0.1..1.0)
                } else {
                    *v
                }
            })
            .collect(),
    );
    let (v, i) = excess(&e.cond(&lower, t)?, &ex_t);
    out.push((v.max(0.0), tag("E(X - d) > E(X)", i)));
    let gap = e.cond(&x, 0)?.values[0] - e.cond(&lower, 0)?.values[0];
    out.push((
        if gap > 0.0 { 0.0 } else { 1.0 + gap.abs() },
        format!("sample {index} (seed {seed}): E(X) - E(X - d) = {gap} at level 0"),
    ));

    // Tower.
    let (v, i) = mismatch(&e.cond(&ex_t, s)?, &e.cond(&x, s)?);
    out.push((
        v,
        format!("{} (inner level {t}, outer {s})", tag("tower", i)),
    ));

    // Local property and zero-one law over the partition {A, A^c}.
    let ia_x = ind.zip(&x, |a, b| a * b);
    let local_rhs = RandomVariable::new(
        t,
        ex_t.values
            .iter()
            .zip(&in_a)
            .map(|(v, &a)| if a { *v } else { 0.0 })
            .collect(),
    );
    let (v, i) = mismatch(&e.cond(&ia_x, t)?, &local_rhs);
    out.push((v, tag("E(1_A X) != 1_A E(X)", i)));
    let mixed = RandomVariable::new(
        kk,
        (0..n)
            .map(|w| {
                if ind.values[w] > 0.5 {
                    x.values[w]
                } else {
                    y.values[w]
                }
            })
            .collect(),
    );
    let ey_t = e.cond(&y, t)?;
    let zero_one_rhs = RandomVariable::new(
        t,
        (0..space.n_nodes(t))
            .map(|m| {
                if in_a[m] {
                    ex_t.values[m]
                } else {
                    ey_t.values[m]
                }
            })
            .collect(),
    );
    let (v, i) = mismatch(&e.cond(&mixed, t)?, &zero_one_rhs);
    out.push((v, tag("zero-one law", i)));

    // Translation invariance.
    let shifted = x.zip(&eta, |a, b| a + b);
    let eta_t = RandomVariable::new(
        t,
        (0..space.n_nodes(t))
            .map(|m| eta.values[space.descendants(t, m, kk).start])
            .collect(),
    );
    let (v, i) = mismatch(&e.cond(&shifted, t)?, &ex_t.zip(&eta_t, |a, b| a + b));
    out.push((v, tag("E(X + eta) != E(X) + eta", i)));

    // Convexity.
    let combo = x.zip(&y, |a, b| lambda * a + (1.0 - lambda) * b);
    let (v, i) = excess(
        &e.cond(&combo, t)?,
        &ex_t.zip(&ey_t, |a, b| lambda * a + (1.0 - lambda) * b),
    );
    out.push((v.max(0.0), tag("convexity", i)));

    // Positive homogeneity.
    let (v, i) = mismatch(&e.cond(&x.map(|a| scale * a), t)?, &ex_t.map(|a| scale * a));
    out.push((v, tag("positive homogeneity", i)));

    // Additivity.
    let (v, i) = mismatch(
        &e.cond(&x.zip(&y, |a, b| a + b), t)?,
        &ex_t.zip(&ey_t, |a, b| a + b),
    );
    out.push((v, tag("additivity", i)));

    // Domination and the two-sided sandwich.
    match envelope {
        Some(env) => {
            let lhs = e
                .cond(&x.zip(&y, |a, b| a + b), t)?
                .zip(&ey_t, |a, b| a - b);
            let (v, i) = excess(&lhs, &env.upper.cond(&x, t)?);
            out.push((v.max(0.0), tag("E(X + Y) - E(Y) > E^r(X)", i)));
            let (v1, i1) = excess(&ex_t, &env.upper.cond(&x, t)?);
            let (v2, i2) = excess(&env.lower.cond(&x, t)?, &ex_t);
            out.push(if v1 >= v2 {
                (v1.max(0.0), tag("E(X) > E^r(X)", i1))
            } else {
                (v2.max(0.0), tag("E^-r(X) > E(X)", i2))
            });
        }
        None => {
            out.push((0.0, String::new()));
            out.push((0.0, String::new()));
        }
    }
    Ok(out)
}

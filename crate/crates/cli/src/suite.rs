//! Seeded property battery over random spaces.

use std::collections::BTreeMap;

use gexpect_core::bsde::{
    compare, max_w_norm, solve, verify_solution, CatalogDriver, ComparisonInput, ComparisonVerdict,
};
use gexpect_core::bsde::{DriverSpec, SolveOptions};
use gexpect_core::doobmeyer::{
    decompose_direct, drift_extract, pairwise_excess, penalized_sequence,
};
use gexpect_core::exec::{derive_seed, map_indexed};
use gexpect_core::gexp::{
    crossing_inequality_check, er_oracle, growth_bound_check, norm_bound_check, ExpectationOracle,
    GOracle, RMatrix, RSpec, ScenarioSet, Sign, StaticWorstCase,
};
use gexpect_core::martrep::davis_varaiya_basis;
use gexpect_core::probspace::{
    random_space, AdaptedProcess, FilteredSpace, RandomSpaceParams, RandomVariable, TimeGrid,
};
use gexpect_core::represent::{
    default_payoffs, recover_driver, uniqueness_probe, verify_representation, RecoveryMethod,
    RecoveryOptions,
};
use gexpect_core::stochcalc::{
    doleans_exponential, gronwall_bound, integral_process, right_jump_inversion, Alpha, FvProcess,
};
use gexpect_core::{Execution, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::report::Report;

const SCHEDULE: [f64; 6] = [1.0, 4.0, 16.0, 64.0, 256.0, 1024.0];

/// One check's outcome on one trial; `value` is compared against `limit`.
struct Outcome {
    name: &'static str,
    asserted: bool,
    value: f64,
    limit: f64,
}

impl Outcome {
    fn passed(&self) -> bool {
        self.value <= self.limit
    }
}

fn at_most(name: &'static str, value: f64, limit: f64) -> Outcome {
    Outcome {
        name,
        asserted: true,
        value,
        limit,
    }
}

fn flag(name: &'static str, asserted: bool, ok: bool) -> Outcome {
    Outcome {
        name,
        asserted,
        value: if ok { 0.0 } else { 1.0 },
        limit: 0.0,
    }
}

#[derive(Serialize)]
struct Row {
    check: &'static str,
    asserted: bool,
    trials: usize,
    failures: usize,
    worst: f64,
    limit: f64,
    first_failing_seed: Option<u64>,
}

pub fn run(seed: u64, trials: usize, exec: Execution) -> Report {
    let results = map_indexed(exec, trials, |i| {
        let s = derive_seed(seed, i as u64);
        (s, trial(s))
    });
    let mut rows: BTreeMap<&'static str, Row> = BTreeMap::new();
    let mut errors = Vec::new();
    for (trial_seed, res) in results {
        let outcomes = match res {
            Ok(o) => o,
            Err(e) => {
                errors.push(format!("seed {trial_seed}: {e}"));
                continue;
            }
        };
        for o in outcomes {
            let row = rows.entry(o.name).or_insert(Row {
                check: o.name,
                asserted: o.asserted,
                trials: 0,
                failures: 0,
                worst: f64::NEG_INFINITY,
                limit: o.limit,
                first_failing_seed: None,
            });
            row.trials += 1;
            row.worst = row.worst.max(o.value);
            if !o.passed() {
                row.failures += 1;
                row.first_failing_seed.get_or_insert(trial_seed);
            }
        }
    }
    let mut report = Report::new("suite", Some(seed));
    report.check(
        "trials_completed",
        errors.is_empty(),
        format!("{} of {trials} trials ran", trials - errors.len()),
    );
    for row in rows.values() {
        let detail = format!(
            "{} failures in {} trials, worst {:e} (limit {:e})",
            row.failures, row.trials, row.worst, row.limit
        );
        if row.asserted {
            report.check(row.check, row.failures == 0, detail);
        } else {
            report.note(row.check, row.failures == 0, detail);
        }
    }
    match negative_control() {
        Ok((failed, detail)) => report.check("negative_control_fails", failed, detail),
        Err(e) => report.check("negative_control_fails", false, e.to_string()),
    }
    report.set("rows", rows.into_values().collect::<Vec<_>>());
    report.set("errors", errors);
    report
}

fn random_q(rng: &mut ChaCha8Rng, space: &FilteredSpace) -> RandomVariable {
    RandomVariable::new(
        space.steps(),
        (0..space.n_outcomes())
            .map(|_| rng.gen_range(-2.0..2.0))
            .collect(),
    )
}

fn oracle_path(oracle: &dyn ExpectationOracle, q: &RandomVariable) -> Result<AdaptedProcess> {
    let levels = (0..=q.level)
        .map(|k| oracle.cond(q, k))
        .collect::<Result<_>>()?;
    Ok(AdaptedProcess { levels })
}

fn trial(seed: u64) -> Result<Vec<Outcome>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let params = RandomSpaceParams {
        depth: rng.gen_range(1..=4),
        branching: (2, 3),
        clock: (0.1, 1.0),
    };
    let s = random_space(rng.gen(), &params)?;
    let b = davis_varaiya_basis(&s);
    let kk = s.steps();
    let seq = SolveOptions {
        exec: Execution::Sequential,
        ..SolveOptions::default()
    };
    let q = random_q(&mut rng, &s);
    let rho = rng.gen_range(0.1..0.9);
    let r_spec = RSpec::Scalar(rho / max_w_norm(&s, &b));
    let r = RMatrix::new(r_spec.clone(), &s, &b)?;
    let mut out = Vec::new();

    let specs = [
        DriverSpec::Zero,
        DriverSpec::LinearY {
            a: rng.gen_range(-0.5..0.5),
        },
        DriverSpec::RNorm { r: r_spec.clone() },
        DriverSpec::NegRNorm { r: r_spec.clone() },
        DriverSpec::LinearZ {
            b: (0..b.dim()).map(|_| rng.gen_range(-0.5..0.5)).collect(),
        },
    ];
    let mut residual: f64 = 0.0;
    for spec in specs {
        let g = CatalogDriver::new(spec, &s, &b)?;
        let sol = solve(&g, &s, &b, &q, &seq)?;
        residual = residual.max(verify_solution(&g, &s, &b, &sol.y, &sol.z));
    }
    out.push(at_most("bsde_residual", residual, 1e-10));

    let zero = CatalogDriver::new(DriverSpec::Zero, &s, &b)?;
    let sol = solve(&zero, &s, &b, &q, &seq)?;
    let mut linear: f64 = 0.0;
    for k in 0..=kk {
        linear = linear.max(sol.y.at(k).max_abs_diff(&s.conditional_expectation(&q, k)?));
    }
    out.push(at_most("linear_reduction", linear, 1e-12));

    let n = AdaptedProcess {
        levels: (0..=kk)
            .map(|k| s.conditional_expectation(&q, k))
            .collect::<Result<_>>()?,
    };
    let z = b.represent(&s, &n, 1e-10)?;
    let integral = integral_process(&s, &b, &z);
    let mut recon: f64 = 0.0;
    for k in 0..=kk {
        let shifted = integral.at(k).map(|v| v + n.at(0).values[0]);
        recon = recon.max(shifted.max_abs_diff(n.at(k)));
    }
    out.push(at_most("representation_reconstruction", recon, 1e-10));
    out.push(at_most(
        "basis_orthogonality",
        b.max_cross_moment(&s),
        1e-10,
    ));
    let span_ok = (1..=kk).all(|k| {
        let expected: usize = (0..s.n_nodes(k - 1))
            .map(|a| s.children(k - 1, a).len() - 1)
            .sum();
        b.span_dimension(&s, k) == expected
    });
    out.push(flag("span_dimension", true, span_ok));

    let g_hi = CatalogDriver::new(DriverSpec::RNorm { r: r_spec.clone() }, &s, &b)?;
    let g_lo = CatalogDriver::new(DriverSpec::NegRNorm { r: r_spec.clone() }, &s, &b)?;
    let q_lo = RandomVariable::new(
        kk,
        q.values
            .iter()
            .map(|&v| {
                if rng.gen_bool(0.3) {
                    v
                } else {
                    v - rng.gen_range(0.0..1.0)
                }
            })
            .collect(),
    );
    let cmp = compare(
        &ComparisonInput {
            driver: &g_hi,
            q: &q,
            driver2: &g_lo,
            q2: &q_lo,
            from_level: 0,
        },
        &s,
        &b,
        &seq,
    )?;
    out.push(flag(
        "comparison",
        true,
        cmp.verdict == ComparisonVerdict::Holds,
    ));
    let same = compare(
        &ComparisonInput {
            driver: &g_hi,
            q: &q,
            driver2: &g_hi,
            q2: &q,
            from_level: 0,
        },
        &s,
        &b,
        &seq,
    )?;
    out.push(flag(
        "comparison_strictness",
        true,
        cmp.strictness_ok && same.strictness_ok,
    ));

    let max_jump = (1..=kk)
        .flat_map(|k| (0..s.n_nodes(k)).map(move |c| (k, c)))
        .map(|(k, c)| (n.at(k).values[c] - n.at(k - 1).values[s.parent(k, c)]).abs())
        .fold(0.0, f64::max);
    let scale = if max_jump > 0.0 { 0.9 / max_jump } else { 0.0 };
    let small = AdaptedProcess {
        levels: n
            .levels
            .iter()
            .map(|l| l.map(|v| (v - n.at(0).values[0]) * scale))
            .collect(),
    };
    let e = doleans_exponential(&s, &small);
    let mut mart: f64 = 0.0;
    for k in 1..=kk {
        mart = mart.max(
            s.conditional_expectation(e.value.at(k), k - 1)?
                .max_abs_diff(e.value.at(k - 1)),
        );
    }
    out.push(at_most("exponential_martingale", mart, 1e-10));
    let nu = FvProcess::from_jumps(
        &(0..kk.max(2))
            .map(|_| rng.gen_range(-0.9..0.9))
            .collect::<Vec<_>>(),
    );
    let product = nu
        .negated()
        .exponential()
        .iter()
        .zip(right_jump_inversion(&nu)?.exponential())
        .map(|(a, b)| (a * b - 1.0).abs())
        .fold(0.0, f64::max);
    out.push(at_most("exponential_inversion", product, 1e-12));

    let alpha = rng.gen_range(0.1..2.0);
    let jumps = nu.jumps().iter().map(|j| j.abs()).collect::<Vec<_>>();
    let pos = FvProcess::from_jumps(&jumps);
    let steps = jumps.len();
    let mut u = vec![0.0; steps + 1];
    u[steps] = alpha;
    for k in (0..steps).rev() {
        let tail: f64 = (k + 2..=steps).map(|j| u[j - 1] * jumps[j - 1]).sum();
        u[k] = (alpha + tail) / (1.0 - jumps[k]);
    }
    let mut gron: f64 = 0.0;
    for (t, &ut) in u.iter().enumerate() {
        gron = gron.max(
            (gronwall_bound(&Alpha::Constant(alpha), &pos, t)? - ut).abs() / ut.abs().max(1.0),
        );
    }
    out.push(at_most("gronwall_equality", gron, 1e-12));

    let eg = GOracle::new(&s, &b, Box::new(g_hi.clone()))?;
    let base = oracle_path(&eg, &q)?;
    let drops: Vec<f64> = (0..=kk).map(|_| rng.gen_range(0.0..0.5)).collect();
    let super_y = AdaptedProcess {
        levels: base
            .levels
            .iter()
            .enumerate()
            .map(|(k, l)| {
                let tail: f64 = drops[k + 1..].iter().sum();
                l.map(|v| v + tail)
            })
            .collect(),
    };
    let dec = decompose_direct(&g_hi, &s, &b, &super_y)?;
    let a_min = dec
        .a
        .levels
        .iter()
        .flat_map(|l| l.values.iter())
        .fold(0.0, |m: f64, v| m.min(*v));
    out.push(at_most("compensator_nonnegative", -a_min, 1e-12));
    out.push(at_most(
        "decomposition_reconstruction",
        dec.reconstruction_error,
        1e-10,
    ));
    let trace = penalized_sequence(
        &g_hi,
        &s,
        &b,
        &super_y,
        &SCHEDULE,
        1e-6,
        Execution::Sequential,
    )?;
    out.push(flag("penalization_sandwich", true, trace.sandwich_ok));

    let lower = er_oracle(&r, Sign::Minus, &s, &b)?;
    let q2 = random_q(&mut rng, &s);
    let d1 = drift_extract(&lower, &s, &b, &r, &oracle_path(&lower, &q)?)?;
    let d2 = drift_extract(&lower, &s, &b, &r, &oracle_path(&lower, &q2)?)?;
    out.push(at_most(
        "drift_bound",
        d1.max_excess.max(d2.max_excess),
        1e-10,
    ));
    out.push(at_most(
        "drift_pairwise",
        pairwise_excess(&s, &b, &r, &d1, &d2),
        1e-10,
    ));

    let opts = RecoveryOptions {
        random_directions: 4,
        audit: None,
        seed,
        exec: Execution::Sequential,
        ..RecoveryOptions::default()
    };
    let rec = recover_driver(&eg, &s, &b, &r, &opts)?;
    let payoffs = default_payoffs(&s, 5, seed)?;
    let ver = verify_representation(&eg, &rec, &s, &b, &payoffs, 1e-9)?;
    out.push(at_most(
        "representation_round_trip",
        ver.max_deviation,
        1e-9,
    ));
    let glob = recover_driver(
        &eg,
        &s,
        &b,
        &r,
        &RecoveryOptions {
            method: RecoveryMethod::Global,
            ..opts.clone()
        },
    )?;
    out.push(at_most(
        "recovery_modes_agree",
        uniqueness_probe(&rec, &glob, 1e-8).max_difference,
        1e-8,
    ));

    let eps = rng.gen_range(0.2..3.0);
    let nb = norm_bound_check(&g_hi, &s, &b, &q, eps)?;
    out.push(at_most("girsanov_identity", nb.identity_gap, 1e-10));
    out.push(flag("holder_bound", true, nb.holds && nb.density_positive));
    let level = rng.gen_range(0..=kk);
    out.push(flag(
        "growth_bound",
        true,
        growth_bound_check(&r, &s, &b, &q, level)?.holds,
    ));

    let upper = er_oracle(&r, Sign::Plus, &s, &b)?;
    let mut drift = 0.0;
    let mut levels = Vec::with_capacity(kk + 1);
    for k in 0..=kk {
        drift += rng.gen_range(0.0..0.3);
        levels.push(upper.cond(&q, k)?.map(|v| v + drift));
    }
    let alpha = rng.gen_range(-1.0..0.5);
    let beta = alpha + rng.gen_range(0.1..1.0);
    let cr = crossing_inequality_check(&s, &b, &r, &AdaptedProcess { levels }, alpha, beta, kk)?;
    out.push(flag("upcrossing_bound", true, cr.up_holds));
    out.push(flag("downcrossing_bound", false, cr.down_holds));
    Ok(out)
}

/// Static worst case over two measures on a two-period binary tree; must fail.
fn negative_control() -> Result<(bool, String)> {
    let s = FilteredSpace::regular(TimeGrid::from_increments(&[1.0, 1.0])?, 2)?;
    let b = davis_varaiya_basis(&s);
    let set = ScenarioSet {
        measures: vec![vec![0.4, 0.1, 0.1, 0.4], vec![0.1, 0.4, 0.4, 0.1]],
    };
    let oracle = StaticWorstCase::new(&s, &set)?;
    let r = RMatrix::new(RSpec::Scalar(0.9 / max_w_norm(&s, &b)), &s, &b)?;
    let opts = RecoveryOptions {
        audit: None,
        exec: Execution::Sequential,
        ..RecoveryOptions::default()
    };
    let rec = recover_driver(&oracle, &s, &b, &r, &opts)?;
    let rep = verify_representation(&oracle, &rec, &s, &b, &default_payoffs(&s, 20, 1)?, 1e-9)?;
    let detail = match &rep.witness {
        Some(w) => format!(
            "max deviation {:e}, witness {} at level {} node {}",
            rep.max_deviation, w.payoff, w.level, w.node
        ),
        None => format!("max deviation {:e}, no witness", rep.max_deviation),
    };
    Ok((!rep.passed && rep.witness.is_some(), detail))
}

//! One function per subcommand; each returns a report or an engine error.

use gexpect_core::bsde::{
    check_balanced, check_standard, compare as run_compare, solve as run_solve, verify_solution,
};
use gexpect_core::bsde::{ComparisonInput, ComparisonVerdict, Driver, SolveOptions};
use gexpect_core::doobmeyer::{
    check_martingale_part, decompose_direct, default_schedule, er_dom_decompose,
    penalized_sequence, ErDomOptions,
};
use gexpect_core::gexp::{axioms_report, er_oracle, AxiomsConfig, Envelope, Sign};
use gexpect_core::martrep::IntegrandVector;
use gexpect_core::probspace::{AdaptedProcess, FilteredSpace};
use gexpect_core::represent::{
    default_payoffs, recover_driver, verify_representation, RecoveryMethod, RecoveryOptions,
};
use gexpect_core::scenario::LoadedScenario;
use gexpect_core::{Execution, Result};

use crate::report::Report;
use crate::MethodArg;

const DEFAULT_SEED: u64 = 0;

pub fn levels(y: &AdaptedProcess) -> Vec<Vec<f64>> {
    y.levels.iter().map(|l| l.values.clone()).collect()
}

/// `z[k - 1][atom]` for every step.
pub fn integrands(space: &FilteredSpace, z: &IntegrandVector, top: usize) -> Vec<Vec<Vec<f64>>> {
    (1..=top)
        .map(|k| {
            (0..space.n_nodes(k - 1))
                .map(|a| z.at(k, a).to_vec())
                .collect()
        })
        .collect()
}

pub fn solve(
    l: &LoadedScenario,
    driver: &str,
    payoff: &str,
    tol: Option<f64>,
    exec: Execution,
) -> Result<Report> {
    let g = l.driver(driver)?;
    let q = l.payoff(payoff)?;
    let tol = tol.or(l.scenario.params.tol).unwrap_or(1e-10);
    let mut report = Report::new("solve", None);
    let class = check_standard(&g, &l.space)?;
    report.set("classification", &class);
    report.note(
        "driver_supported",
        class.is_supported(),
        format!("{class:?}"),
    );
    let sol = run_solve(
        &g,
        &l.space,
        &l.basis,
        &q,
        &SolveOptions {
            exec,
            ..SolveOptions::default()
        },
    )?;
    let defect = verify_solution(&g, &l.space, &l.basis, &sol.y, &sol.z);
    report.check(
        "residual",
        defect < tol,
        format!("max pathwise defect {defect:e} (tol {tol:e})"),
    );
    let cert = check_balanced(&g, &l.space, &l.basis, 50, DEFAULT_SEED);
    report.note(
        "balanced",
        cert.is_balanced(),
        format!("{:?} via {:?}", cert.verdict, cert.method),
    );
    report.set("driver", g.label());
    report.set("y0", sol.y0());
    report.set("y", levels(&sol.y));
    report.set("z", integrands(&l.space, &sol.z, q.level));
    report.set("balance", cert);
    Ok(report)
}

pub fn compare(
    l: &LoadedScenario,
    driver: &str,
    payoff: &str,
    driver2: &str,
    payoff2: &str,
    from_level: usize,
    exec: Execution,
) -> Result<Report> {
    let (g, g2) = (l.driver(driver)?, l.driver(driver2)?);
    let (q, q2) = (l.payoff(payoff)?, l.payoff(payoff2)?);
    let input = ComparisonInput {
        driver: &g,
        q: &q,
        driver2: &g2,
        q2: &q2,
        from_level,
    };
    let rep = run_compare(
        &input,
        &l.space,
        &l.basis,
        &SolveOptions {
            exec,
            ..SolveOptions::default()
        },
    )?;
    let mut report = Report::new("compare", None);
    report.check(
        "comparison",
        rep.verdict == ComparisonVerdict::Holds,
        format!("{:?}", rep.verdict),
    );
    report.check(
        "strictness",
        rep.strictness_ok,
        format!("{} equality nodes", rep.equality_nodes),
    );
    report.set("report", &rep);
    Ok(report)
}

pub struct DecomposeInput<'a> {
    pub driver: Option<&'a str>,
    pub oracle: Option<&'a str>,
    pub r: Option<&'a str>,
    pub process: &'a str,
    pub penalized: bool,
    pub schedule: Option<Vec<f64>>,
    pub tol: Option<f64>,
}

pub fn decompose(
    l: &LoadedScenario,
    input: &DecomposeInput<'_>,
    exec: Execution,
) -> Result<Report> {
    let y = l.process(input.process)?;
    let params = &l.scenario.params;
    let schedule = input
        .schedule
        .clone()
        .or_else(|| params.schedule.clone())
        .unwrap_or_else(default_schedule);
    let tol = input.tol.or(params.tol).unwrap_or(1e-6);
    let top = y.levels.len() - 1;
    let mut report = Report::new("decompose", None);
    match (input.driver, input.oracle) {
        (Some(name), _) => {
            let g = l.driver(name)?;
            let dec = decompose_direct(&g, &l.space, &l.basis, &y)?;
            report.check(
                "reconstruction",
                dec.reconstruction_error < 1e-10,
                format!("max error {:e}", dec.reconstruction_error),
            );
            if g.meta().y_independent {
                let defect = check_martingale_part(&g, &l.space, &l.basis, &dec)?;
                report.check(
                    "martingale_part",
                    defect < 1e-10,
                    format!("max defect {defect:e}"),
                );
            }
            report.set("a", levels(&dec.a));
            report.set("z", integrands(&l.space, &dec.z, top));
            if input.penalized {
                let trace = penalized_sequence(&g, &l.space, &l.basis, &y, &schedule, tol, exec)?;
                report.check(
                    "penalization_sandwich",
                    trace.sandwich_ok,
                    trace
                        .sandwich_witness
                        .clone()
                        .unwrap_or_else(|| "Y^0 <= Y^n <= Y^(n+1) <= Y at every n".into()),
                );
                let last = trace.last();
                report.note(
                    "penalization_converged",
                    trace.converged,
                    format!(
                        "sup |Y - Y^n| = {:e} at n = {} (tol {tol:e})",
                        last.gap_y, last.n
                    ),
                );
                report.set("trace", trace.rows(&y));
            }
        }
        (None, Some(name)) => {
            let oracle = l.oracle(name)?;
            let r = l.r_matrix(input.r.unwrap_or_default())?;
            let opts = ErDomOptions {
                schedule,
                tol,
                exec,
                ..ErDomOptions::default()
            };
            let dec = er_dom_decompose(oracle.as_ref(), &l.space, &l.basis, &r, &y, &opts)?;
            report.check(
                "verification",
                dec.verification_error < 1e-9,
                format!(
                    "max |Y + A - E(Y_T + A_T | F)| = {:e}",
                    dec.verification_error
                ),
            );
            let last_gap = dec.trace.last().map_or(0.0, |s| s.gap_y);
            report.note(
                "penalization_converged",
                dec.converged,
                format!("last gap {last_gap:e}"),
            );
            report.set("a", levels(&dec.a));
            report.set("oracle_calls", dec.oracle_calls);
            let rows: Vec<(f64, f64, f64)> =
                dec.trace.iter().map(|s| (s.n, s.gap_y, s.gap_a)).collect();
            report.set("trace_n_gap_y_gap_a", rows);
        }
        (None, None) => {
            return Err(gexpect_core::Error::ScenarioInvalid {
                pointer: String::new(),
                detail: "decompose needs --driver or --oracle".into(),
            })
        }
    }
    Ok(report)
}

pub struct RecoverInput<'a> {
    pub oracle: &'a str,
    pub r: &'a str,
    pub method: MethodArg,
    pub verify: usize,
    pub seed: Option<u64>,
    pub audit: bool,
    pub tol: Option<f64>,
}

pub fn recover(l: &LoadedScenario, input: &RecoverInput<'_>, exec: Execution) -> Result<Report> {
    let oracle = l.oracle(input.oracle)?;
    let r = l.r_matrix(input.r)?;
    let seed = input
        .seed
        .or(l.scenario.params.seed)
        .unwrap_or(DEFAULT_SEED);
    let tol = input.tol.or(l.scenario.params.tol).unwrap_or(1e-9);
    let opts = RecoveryOptions {
        method: match input.method {
            MethodArg::Onestep => RecoveryMethod::OneStep,
            MethodArg::Global => RecoveryMethod::Global,
        },
        seed,
        audit: input.audit.then(|| AxiomsConfig {
            seed,
            exec,
            ..AxiomsConfig::default()
        }),
        exec,
        ..RecoveryOptions::default()
    };
    let rec = recover_driver(oracle.as_ref(), &l.space, &l.basis, &r, &opts)?;
    let mut report = Report::new("recover", Some(seed));
    let cert = rec.certificate();
    report.check(
        "domination",
        cert.passed(),
        format!(
            "{} queries, worst excess {:e}",
            cert.queries,
            cert.domination_excess.max(cert.pair_excess)
        ),
    );
    if input.verify > 0 {
        let payoffs = default_payoffs(&l.space, input.verify, seed)?;
        let v = verify_representation(oracle.as_ref(), &rec, &l.space, &l.basis, &payoffs, tol)?;
        report.check(
            "representation",
            v.passed,
            format!(
                "max deviation {:e} over {} payoffs",
                v.max_deviation, v.payoffs
            ),
        );
        report.set("verification", v);
    }
    report.set("certificate", cert);
    report.set("method", rec.method());
    report.set("queries", rec.records());
    Ok(report)
}

pub fn axioms(
    l: &LoadedScenario,
    oracle: &str,
    r: Option<&str>,
    samples: Option<usize>,
    seed: Option<u64>,
    tol: Option<f64>,
    exec: Execution,
) -> Result<Report> {
    let o = l.oracle(oracle)?;
    let params = &l.scenario.params;
    let cfg = AxiomsConfig {
        samples: samples.or(params.samples).unwrap_or(200),
        seed: seed.or(params.seed).unwrap_or(DEFAULT_SEED),
        tol: tol.or(params.tol).unwrap_or(1e-9),
        exec,
    };
    let rep = match r {
        Some(name) => {
            let r = l.r_matrix(name)?;
            let upper = er_oracle(&r, Sign::Plus, &l.space, &l.basis)?;
            let lower = er_oracle(&r, Sign::Minus, &l.space, &l.basis)?;
            let env = Envelope {
                upper: &upper,
                lower: &lower,
            };
            axioms_report(o.as_ref(), &l.space, Some(&env), &cfg)?
        }
        None => axioms_report(o.as_ref(), &l.space, None, &cfg)?,
    };
    let mut report = Report::new("axioms", Some(cfg.seed));
    for res in &rep.results {
        let detail = match res.passed {
            None => "not checked".to_string(),
            Some(_) => format!(
                "worst {:e}{}",
                res.worst,
                res.witness
                    .as_ref()
                    .map(|w| format!(" ({w})"))
                    .unwrap_or_default()
            ),
        };
        let passed = res.passed.unwrap_or(true);
        if res.asserted {
            report.check(res.axiom.name(), passed, detail);
        } else {
            report.note(res.axiom.name(), passed, detail);
        }
    }
    report.set("samples", rep.samples);
    Ok(report)
}

pub fn basis(l: &LoadedScenario) -> Report {
    let mut report = Report::new("basis", None);
    report.check(
        "chain",
        l.basis.chain_holds(),
        "each active set contains the next",
    );
    let cross = l.basis.max_cross_moment(&l.space);
    report.check(
        "orthogonality",
        cross < 1e-10,
        format!("max |E[M^i M^j]| {cross:e}"),
    );
    report.set("basis", l.basis.dump(&l.space));
    report
}

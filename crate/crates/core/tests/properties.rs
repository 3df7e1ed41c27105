//! Cross-module invariants on random spaces.

use gexpect_core::bsde::{
    max_w_norm, solve, verify_solution, CatalogDriver, DriverSpec, SolveOptions,
};
use gexpect_core::doobmeyer::{decompose_direct, drift_extract};
use gexpect_core::gexp::{er_oracle, ExpectationOracle, RMatrix, RSpec, Sign};
use gexpect_core::martrep::{davis_varaiya_basis, MartingaleBasis};
use gexpect_core::probspace::{
    random_space, AdaptedProcess, FilteredSpace, RandomSpaceParams, RandomVariable,
};
use gexpect_core::represent::{recover_driver, RecoveryOptions};
use gexpect_core::Execution;
use proptest::prelude::*;

fn space(seed: u64, depth: usize) -> (FilteredSpace, MartingaleBasis) {
    let params = RandomSpaceParams {
        depth,
        branching: (1, 3),
        clock: (0.1, 1.0),
    };
    let s = random_space(seed, &params).unwrap();
    let b = davis_varaiya_basis(&s);
    (s, b)
}

fn scalar_r(s: &FilteredSpace, b: &MartingaleBasis, fraction: f64) -> RSpec {
    let w = max_w_norm(s, b);
    RSpec::Scalar(if w > 0.0 { fraction / w } else { fraction })
}

fn payoff(s: &FilteredSpace, raw: &[f64]) -> RandomVariable {
    RandomVariable::new(
        s.steps(),
        (0..s.n_outcomes()).map(|i| raw[i % raw.len()]).collect(),
    )
}

fn seq() -> SolveOptions {
    SolveOptions {
        exec: Execution::Sequential,
        ..SolveOptions::default()
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn solutions_satisfy_the_equation(
        seed in any::<u64>(),
        depth in 1usize..5,
        frac in 0.0f64..0.95,
        raw in prop::collection::vec(-3.0f64..3.0, 1..20),
    ) {
        let (s, b) = space(seed, depth);
        let g = CatalogDriver::new(DriverSpec::NegRNorm { r: scalar_r(&s, &b, frac) }, &s, &b).unwrap();
        let sol = solve(&g, &s, &b, &payoff(&s, &raw), &seq()).unwrap();
        prop_assert!(verify_solution(&g, &s, &b, &sol.y, &sol.z) < 1e-10);
    }

    #[test]
    fn er_expectation_is_monotone_and_translation_invariant(
        seed in any::<u64>(),
        depth in 1usize..4,
        frac in 0.0f64..0.95,
        raw in prop::collection::vec(-3.0f64..3.0, 1..20),
        bump in prop::collection::vec(0.0f64..1.0, 1..20),
        shift in -5.0f64..5.0,
    ) {
        let (s, b) = space(seed, depth);
        let r = RMatrix::new(scalar_r(&s, &b, frac), &s, &b).unwrap();
        let er = er_oracle(&r, Sign::Plus, &s, &b).unwrap();
        let q = payoff(&s, &raw);
        let higher = q.zip(&payoff(&s, &bump), |x, y| x + y);
        let base = er.cond(&q, 0).unwrap().values[0];
        prop_assert!(er.cond(&higher, 0).unwrap().values[0] >= base - 1e-12);
        let moved = er.cond(&q.map(|x| x + shift), 0).unwrap().values[0];
        prop_assert!((moved - base - shift).abs() < 1e-10);
    }

    #[test]
    fn martingales_have_bounded_drift_and_zero_compensator(
        seed in any::<u64>(),
        depth in 1usize..4,
        frac in 0.0f64..0.95,
        raw in prop::collection::vec(-3.0f64..3.0, 1..20),
    ) {
        let (s, b) = space(seed, depth);
        let spec = scalar_r(&s, &b, frac);
        let r = RMatrix::new(spec.clone(), &s, &b).unwrap();
        let er = er_oracle(&r, Sign::Minus, &s, &b).unwrap();
        let q = payoff(&s, &raw);
        let y = AdaptedProcess { levels: (0..=s.steps()).map(|k| er.cond(&q, k).unwrap()).collect() };
        prop_assert!(drift_extract(&er, &s, &b, &r, &y).unwrap().max_excess <= 1e-10);
        let g = CatalogDriver::new(DriverSpec::NegRNorm { r: spec }, &s, &b).unwrap();
        let dec = decompose_direct(&g, &s, &b, &y).unwrap();
        prop_assert!(dec.a.levels.iter().all(|l| l.values.iter().all(|v| v.abs() < 1e-10)));
    }

    #[test]
    fn recovered_driver_vanishes_at_zero(seed in any::<u64>(), depth in 1usize..3, frac in 0.05f64..0.95) {
        let (s, b) = space(seed, depth);
        let r = RMatrix::new(scalar_r(&s, &b, frac), &s, &b).unwrap();
        let er = er_oracle(&r, Sign::Plus, &s, &b).unwrap();
        let opts = RecoveryOptions { audit: None, random_directions: 2, exec: Execution::Sequential, ..RecoveryOptions::default() };
        let rec = recover_driver(&er, &s, &b, &r, &opts).unwrap();
        for k in 1..=s.steps() {
            for a in 0..s.n_nodes(k - 1) {
                prop_assert_eq!(rec.query(k, a, &vec![0.0; b.dim()]).unwrap(), 0.0);
            }
        }
        prop_assert!(rec.certificate().passed());
    }
}

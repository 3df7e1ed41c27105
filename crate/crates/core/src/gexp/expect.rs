//! g-expectations and the `E^r` family.

use serde::Serialize;

use super::oracle::{ExpectationOracle, GOracle};
use super::rmatrix::RMatrix;
use crate::bsde::{check_r_balanced, CatalogDriver, Driver, DriverSpec};
use crate::error::{Error, Result};
use crate::martrep::MartingaleBasis;
use crate::probspace::{FilteredSpace, RandomVariable};

/// `E_g(Q | F_k)` for an admissible driver.
pub fn g_expectation(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    q: &RandomVariable,
    k: usize,
) -> Result<RandomVariable> {
    GOracle::new(space, basis, Box::new(driver))?.cond(q, k)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Sign {
    Plus,
    Minus,
}

/// Driver `±||r z||_M`.
pub fn er_driver(
    r: &RMatrix,
    sign: Sign,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
) -> Result<CatalogDriver> {
    let spec = match sign {
        Sign::Plus => DriverSpec::RNorm {
            r: r.spec().clone(),
        },
        Sign::Minus => DriverSpec::NegRNorm {
            r: r.spec().clone(),
        },
    };
    CatalogDriver::new(spec, space, basis)
}

/// Oracle for `E^{±r}`; fails unless `r` is certified uniformly balanced.
pub fn er_oracle<'a>(
    r: &RMatrix,
    sign: Sign,
    space: &'a FilteredSpace,
    basis: &'a MartingaleBasis,
) -> Result<GOracle<'a>> {
    let cert = check_r_balanced(r, space, basis);
    if !cert.is_balanced() {
        return Err(Error::RNotBalanced { worst: cert.upper });
    }
    let driver = er_driver(r, sign, space, basis)?;
    Ok(GOracle::unchecked(space, basis, Box::new(driver)))
}

/// `E^{±r}(Q | F_k)`.
pub fn er_expectation(
    r: &RMatrix,
    q: &RandomVariable,
    k: usize,
    sign: Sign,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
) -> Result<RandomVariable> {
    er_oracle(r, sign, space, basis)?.cond(q, k)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::bsde::max_w_norm;
    use crate::gexp::rmatrix::RSpec;
    use crate::martrep::davis_varaiya_basis;
    use crate::probspace::{random_space, RandomSpaceParams, TimeGrid};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn s2() -> (FilteredSpace, MartingaleBasis) {
        let s = FilteredSpace::regular(TimeGrid::from_increments(&[1.0]).unwrap(), 2).unwrap();
        let b = davis_varaiya_basis(&s);
        (s, b)
    }

    #[test]
    fn g_expectation_examples() {
        let (s, b) = s2();
        let q = RandomVariable::new(1, vec![1.0, -1.0]);
        let zero = CatalogDriver::new(DriverSpec::Zero, &s, &b).unwrap();
        assert_eq!(
            g_expectation(&zero, &s, &b, &q, 0).unwrap().values,
            vec![0.0]
        );
        let half = CatalogDriver::new(
            DriverSpec::RNorm {
                r: RSpec::Scalar(0.5),
            },
            &s,
            &b,
        )
        .unwrap();
        assert_eq!(
            g_expectation(&half, &s, &b, &q, 0).unwrap().values,
            vec![0.5]
        );
        let c = RandomVariable::new(1, vec![3.0, 3.0]);
        assert_eq!(
            g_expectation(&half, &s, &b, &c, 0).unwrap().values,
            vec![3.0]
        );
    }

    #[test]
    fn er_examples() {
        let (s, b) = s2();
        let r = RMatrix::new(RSpec::Scalar(0.5), &s, &b).unwrap();
        let q = RandomVariable::new(1, vec![1.0, -1.0]);
        assert_eq!(
            er_expectation(&r, &q, 0, Sign::Plus, &s, &b)
                .unwrap()
                .values,
            vec![0.5]
        );
        assert_eq!(
            er_expectation(&r, &q, 0, Sign::Minus, &s, &b)
                .unwrap()
                .values,
            vec![-0.5]
        );
        let big = RMatrix::new(RSpec::Scalar(1.5), &s, &b).unwrap();
        assert!(matches!(
            er_expectation(&big, &q, 0, Sign::Plus, &s, &b),
            Err(Error::RNotBalanced { .. })
        ));
    }

    #[test]
    fn duality_on_fuzzed_instances() {
        for seed in 0..20 {
            let s = random_space(seed, &RandomSpaceParams::default()).unwrap();
            let b = davis_varaiya_basis(&s);
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let r = RMatrix::new(
                RSpec::Scalar(rng.gen_range(0.1..0.9) / max_w_norm(&s, &b)),
                &s,
                &b,
            )
            .unwrap();
            let x = RandomVariable::new(
                s.steps(),
                (0..s.n_outcomes())
                    .map(|_| rng.gen_range(-2.0..2.0))
                    .collect(),
            );
            let neg_x = x.map(|v| -v);
            for k in 0..=s.steps() {
                let lower = er_expectation(&r, &x, k, Sign::Minus, &s, &b).unwrap();
                let upper = er_expectation(&r, &neg_x, k, Sign::Plus, &s, &b).unwrap();
                let worst = lower
                    .zip(&upper, |a, b| (a + b).abs())
                    .values
                    .iter()
                    .cloned()
                    .fold(0.0, f64::max);
                assert!(worst < 1e-10);
            }
        }
    }
}

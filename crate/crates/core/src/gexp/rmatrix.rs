//! Dominating matrices `r` acting on integrand vectors.
//!
//! An `r` is given once for the whole grid and is restricted, at each
//! predictable atom, to the components where the basis is active. Norms are
//! taken in the `M`-seminorm of that atom.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::martrep::MartingaleBasis;
use crate::probspace::FilteredSpace;

/// User-facing form of `r`: a number, a diagonal, or a full square matrix.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum RSpec {
    Scalar(f64),
    Diagonal(Vec<f64>),
    Full(Vec<Vec<f64>>),
}

impl RSpec {
    pub fn scaled(&self, s: f64) -> RSpec {
        match self {
            RSpec::Scalar(x) => RSpec::Scalar(x * s),
            RSpec::Diagonal(d) => RSpec::Diagonal(d.iter().map(|x| x * s).collect()),
            RSpec::Full(m) => RSpec::Full(
                m.iter()
                    .map(|row| row.iter().map(|x| x * s).collect())
                    .collect(),
            ),
        }
    }
}

/// `r` resolved against a basis, with its `D`-norm cached per atom.
#[derive(Debug, Clone, PartialEq)]
pub struct RMatrix {
    spec: RSpec,
    full: Option<DMatrix<f64>>,
    d_norms: Vec<Vec<f64>>,
    sup: f64,
}

impl RMatrix {
    pub fn new(spec: RSpec, space: &FilteredSpace, basis: &MartingaleBasis) -> Result<Self> {
        let d = basis.dim();
        let full = match &spec {
            RSpec::Scalar(x) => {
                check_finite([*x])?;
                None
            }
            RSpec::Diagonal(v) => {
                if v.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: v.len(),
                    });
                }
                check_finite(v.iter().copied())?;
                None
            }
            RSpec::Full(rows) => {
                if rows.len() != d {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: rows.len(),
                    });
                }
                if let Some(row) = rows.iter().find(|r| r.len() != d) {
                    return Err(Error::DimensionMismatch {
                        expected: d,
                        got: row.len(),
                    });
                }
                check_finite(rows.iter().flatten().copied())?;
                Some(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
            }
        };
        let mut r = Self {
            spec,
            full,
            d_norms: Vec::new(),
            sup: 0.0,
        };
        let mut d_norms = vec![Vec::new()];
        for k in 1..=space.steps() {
            d_norms.push(
                (0..space.n_nodes(k - 1))
                    .map(|a| r.d_norm_at(basis.phi(k, a)))
                    .collect(),
            );
        }
        r.sup = d_norms.iter().flatten().copied().fold(0.0, f64::max);
        r.d_norms = d_norms;
        Ok(r)
    }

    pub fn spec(&self) -> &RSpec {
        &self.spec
    }

    /// `r z` restricted to the active components of `phi`.
    pub fn apply(&self, phi: &[f64], z: &[f64]) -> Vec<f64> {
        let active = |i: usize| phi[i] > 0.0;
        match &self.spec {
            RSpec::Scalar(x) => z
                .iter()
                .enumerate()
                .map(|(i, v)| if active(i) { x * v } else { 0.0 })
                .collect(),
            RSpec::Diagonal(d) => z
                .iter()
                .enumerate()
                .map(|(i, v)| if active(i) { d[i] * v } else { 0.0 })
                .collect(),
            RSpec::Full(_) => {
                let m = self.full.as_ref().expect("full matrix cached");
                (0..z.len())
                    .map(|i| {
                        if !active(i) {
                            return 0.0;
                        }
                        (0..z.len())
                            .filter(|&j| active(j))
                            .map(|j| m[(i, j)] * z[j])
                            .sum()
                    })
                    .collect()
            }
        }
    }

    /// `||r z||_M` on an atom with densities `phi`.
    pub fn image_norm(&self, phi: &[f64], z: &[f64]) -> f64 {
        let rz = self.apply(phi, z);
        rz.iter()
            .zip(phi)
            .map(|(x, p)| x * x * p)
            .sum::<f64>()
            .sqrt()
    }

    /// `sup_{||u||_M = 1} ||r u||_M` on an atom with densities `phi`.
    pub fn d_norm_at(&self, phi: &[f64]) -> f64 {
        let active: Vec<usize> = (0..phi.len()).filter(|&i| phi[i] > 0.0).collect();
        if active.is_empty() {
            return 0.0;
        }
        match &self.spec {
            RSpec::Scalar(x) => x.abs(),
            RSpec::Diagonal(d) => active.iter().map(|&i| d[i].abs()).fold(0.0, f64::max),
            RSpec::Full(_) => self.weighted_block(phi, &active).singular_values().max(),
        }
    }

    /// `W^{1/2} r W^{-1/2}` on the active block, `W = diag(phi)`.
    pub(crate) fn weighted_block(&self, phi: &[f64], active: &[usize]) -> DMatrix<f64> {
        let n = active.len();
        DMatrix::from_fn(n, n, |i, j| {
            let (a, b) = (active[i], active[j]);
            let rij = match &self.spec {
                RSpec::Scalar(x) => {
                    if a == b {
                        *x
                    } else {
                        0.0
                    }
                }
                RSpec::Diagonal(d) => {
                    if a == b {
                        d[a]
                    } else {
                        0.0
                    }
                }
                RSpec::Full(_) => self.full.as_ref().expect("full matrix cached")[(a, b)],
            };
            phi[a].sqrt() * rij / phi[b].sqrt()
        })
    }

    /// Cached `D`-norm on atom `atom` of step `k`.
    pub fn d_norm(&self, k: usize, atom: usize) -> f64 {
        self.d_norms[k][atom]
    }

    /// Largest `D`-norm over steps `k > from`.
    pub fn sup_d_norm_after(&self, from: usize) -> f64 {
        self.d_norms
            .iter()
            .skip(from + 1)
            .flatten()
            .copied()
            .fold(0.0, f64::max)
    }

    pub fn sup_d_norm(&self) -> f64 {
        self.sup
    }
}

fn check_finite(values: impl IntoIterator<Item = f64>) -> Result<()> {
    match values.into_iter().find(|v| !v.is_finite()) {
        Some(v) => Err(Error::ParamsOutOfRange(format!(
            "r entry {v} is not finite"
        ))),
        None => Ok(()),
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::martrep::davis_varaiya_basis;
    use crate::probspace::TimeGrid;
    use approx::assert_abs_diff_eq;

    fn ternary() -> (FilteredSpace, MartingaleBasis) {
        let grid = TimeGrid::from_increments(&[0.5]).unwrap();
        let s = FilteredSpace::from_conditional(grid, &[vec![vec![0.2, 0.3, 0.5]]]).unwrap();
        let b = davis_varaiya_basis(&s);
        (s, b)
    }

    #[test]
    fn spec_parses_all_three_shapes() {
        let s: RSpec = serde_json::from_str("0.5").unwrap();
        assert_eq!(s, RSpec::Scalar(0.5));
        let d: RSpec = serde_json::from_str("[0.5, 0.25]").unwrap();
        assert_eq!(d, RSpec::Diagonal(vec![0.5, 0.25]));
        let f: RSpec = serde_json::from_str("[[1, 0], [0, 1]]").unwrap();
        assert_eq!(f, RSpec::Full(vec![vec![1.0, 0.0], vec![0.0, 1.0]]));
    }

    #[test]
    fn d_norms_of_simple_shapes() {
        let (s, b) = ternary();
        let r = RMatrix::new(RSpec::Scalar(-0.7), &s, &b).unwrap();
        assert_eq!(r.d_norm(1, 0), 0.7);
        let r = RMatrix::new(RSpec::Diagonal(vec![0.3, -0.9]), &s, &b).unwrap();
        assert_eq!(r.d_norm(1, 0), 0.9);
        assert!(matches!(
            RMatrix::new(RSpec::Diagonal(vec![1.0]), &s, &b),
            Err(Error::DimensionMismatch { .. })
        ));
    }

    #[test]
    fn full_d_norm_matches_sampled_sup() {
        let (s, b) = ternary();
        let r = RMatrix::new(RSpec::Full(vec![vec![0.4, 0.3], vec![-0.2, 0.1]]), &s, &b).unwrap();
        let phi = b.phi(1, 0);
        let mut best: f64 = 0.0;
        for i in 0..20000 {
            let t = i as f64 * std::f64::consts::TAU / 20000.0;
            let u = [t.cos() / phi[0].sqrt(), t.sin() / phi[1].sqrt()];
            best = best.max(r.image_norm(phi, &u));
        }
        assert!(best <= r.d_norm(1, 0) + 1e-12);
        assert_abs_diff_eq!(best, r.d_norm(1, 0), epsilon = 1e-6);
    }

    #[test]
    fn inactive_components_are_ignored() {
        let r = RMatrix {
            spec: RSpec::Full(vec![vec![1.0, 5.0], vec![5.0, 1.0]]),
            full: Some(DMatrix::from_row_slice(2, 2, &[1.0, 5.0, 5.0, 1.0])),
            d_norms: Vec::new(),
            sup: 0.0,
        };
        let phi = [2.0, 0.0];
        assert_eq!(r.apply(&phi, &[1.0, 100.0]), vec![1.0, 0.0]);
        assert_eq!(r.d_norm_at(&phi), 1.0);
        assert_eq!(r.d_norm_at(&[0.0, 0.0]), 0.0);
    }
}

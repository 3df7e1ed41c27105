//! Orthogonal martingale basis and martingale representation.
//!
//! The basis is built atom by atom. At each predictable atom (a node at level
//! `k - 1` seen as the information set for step `k`) the centred indicators of
//! the children are run through Gram–Schmidt in canonical child order under the
//! conditional inner product; null residuals are dropped and survivors are
//! normalised to unit conditional variance. These are the same directions the
//! terminal-atom indicators produce, since leaves below one child give parallel
//! increments. The `i`-th surviving direction at every atom is then assigned to
//! `M^i`, so `M^{i+1}` is only ever active where `M^i` is.

use serde::Serialize;

use crate::error::{Error, Result};
use crate::probspace::{AdaptedProcess, FilteredSpace, RandomVariable};

/// Residual norm, relative to the candidate norm, below which a candidate is null.
const NULL_REL: f64 = 1e-10;

#[derive(Debug, Clone, PartialEq)]
pub struct MartingaleBasis {
    dim: usize,
    /// `increments[k][c * dim + i]` is `ΔM^i` at child node `c` of level `k`.
    increments: Vec<Vec<f64>>,
    /// `dqv[k][a * dim + i]` is `Δ<M^i>` on atom `a` of level `k - 1`.
    dqv: Vec<Vec<f64>>,
    /// `phi[k][a * dim + i]` is `Δ<M^i> / Δmu_k`.
    phi: Vec<Vec<f64>>,
    dmu: Vec<f64>,
}

/// Integrand with `dim` components per predictable atom.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct IntegrandVector {
    dim: usize,
    steps: Vec<Vec<f64>>,
}

impl IntegrandVector {
    pub fn zeros(space: &FilteredSpace, dim: usize) -> Self {
        let mut steps = vec![Vec::new()];
        steps.extend((1..=space.steps()).map(|k| vec![0.0; space.n_nodes(k - 1) * dim]));
        Self { dim, steps }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn at(&self, k: usize, atom: usize) -> &[f64] {
        &self.steps[k][atom * self.dim..(atom + 1) * self.dim]
    }

    pub fn at_mut(&mut self, k: usize, atom: usize) -> &mut [f64] {
        let d = self.dim;
        &mut self.steps[k][atom * d..(atom + 1) * d]
    }

    pub fn steps(&self) -> usize {
        self.steps.len() - 1
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.steps
            .iter()
            .zip(&other.steps)
            .flat_map(|(a, b)| a.iter().zip(b).map(|(x, y)| (x - y).abs()))
            .fold(0.0, f64::max)
    }
}

/// A predictable set: membership flag per predictable atom.
#[derive(Debug, Clone, PartialEq)]
pub struct PredictableSet {
    steps: Vec<Vec<bool>>,
}

impl PredictableSet {
    pub fn all(space: &FilteredSpace) -> Self {
        Self::from_fn(space, |_, _| true)
    }

    pub fn from_fn(space: &FilteredSpace, f: impl Fn(usize, usize) -> bool) -> Self {
        let mut steps = vec![Vec::new()];
        steps.extend(
            (1..=space.steps()).map(|k| (0..space.n_nodes(k - 1)).map(|a| f(k, a)).collect()),
        );
        Self { steps }
    }

    pub fn contains(&self, k: usize, atom: usize) -> bool {
        self.steps[k][atom]
    }
}

/// Both sides of the isometry on a predictable set.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct IsometryReport {
    /// `E[∫_A ||Z||²_M dmu]`
    pub mu_side: f64,
    /// `E[Σ_i ∫_A (Z^i)² d<M^i>]`
    pub qv_side: f64,
    /// `E[(∫_A Z dM)²]`
    pub integral_side: f64,
}

impl IsometryReport {
    pub fn holds(&self, tol: f64) -> bool {
        let scale = 1.0f64.max(self.qv_side.abs());
        self.mu_side <= self.qv_side + tol * scale
            && (self.mu_side - self.qv_side).abs() <= tol * scale
            && (self.qv_side - self.integral_side).abs() <= tol * scale
    }
}

/// Per-atom dump of the basis, for golden files.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct BasisDump {
    pub dim: usize,
    pub atoms: Vec<AtomDump>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct AtomDump {
    pub step: usize,
    pub node: String,
    pub phi: Vec<f64>,
    /// `increments[c][i]` for each child `c` in canonical order.
    pub increments: Vec<Vec<f64>>,
}

/// Build the orthogonal martingale basis of `space`.
pub fn davis_varaiya_basis(space: &FilteredSpace) -> MartingaleBasis {
    let kk = space.steps();
    let dim = space.max_branching_dim();
    let mut increments = vec![Vec::new(); kk + 1];
    let mut dqv = vec![Vec::new(); kk + 1];
    let mut phi = vec![Vec::new(); kk + 1];
    let mut dmu = vec![0.0; kk + 1];
    for k in 1..=kk {
        dmu[k] = space.dmu(k);
        increments[k] = vec![0.0; space.n_nodes(k) * dim];
        dqv[k] = vec![0.0; space.n_nodes(k - 1) * dim];
        phi[k] = vec![0.0; space.n_nodes(k - 1) * dim];
        for a in 0..space.n_nodes(k - 1) {
            let kids = space.children(k - 1, a);
            let pi: Vec<f64> = kids.clone().map(|c| space.cond_prob(k, c)).collect();
            let dirs = orthonormal_directions(&pi);
            for (i, dir) in dirs.iter().enumerate() {
                let mut var = 0.0;
                for (j, c) in kids.clone().enumerate() {
                    increments[k][c * dim + i] = dir[j];
                    var += pi[j] * dir[j] * dir[j];
                }
                dqv[k][a * dim + i] = var;
                phi[k][a * dim + i] = var / dmu[k];
            }
        }
    }
    MartingaleBasis {
        dim,
        increments,
        dqv,
        phi,
        dmu,
    }
}

/// Gram–Schmidt on the centred child indicators `e_j - pi` under `<x,y> = Σ pi x y`.
fn orthonormal_directions(pi: &[f64]) -> Vec<Vec<f64>> {
    let m = pi.len();
    let dot = |x: &[f64], y: &[f64]| -> f64 {
        x.iter().zip(y).zip(pi).map(|((a, b), p)| a * b * p).sum()
    };
    let mut out: Vec<Vec<f64>> = Vec::new();
    for j in 0..m {
        let mut v: Vec<f64> = (0..m)
            .map(|c| if c == j { 1.0 } else { 0.0 } - pi[j])
            .collect();
        let n0 = dot(&v, &v).sqrt();
        // Two passes of modified Gram–Schmidt keep the directions orthogonal to rounding.
        for _ in 0..2 {
            for u in &out {
                let h = dot(&v, u);
                for (x, y) in v.iter_mut().zip(u) {
                    *x -= h * y;
                }
            }
        }
        let n = dot(&v, &v).sqrt();
        if n > NULL_REL * n0 {
            out.push(v.into_iter().map(|x| x / n).collect());
        }
    }
    out
}

impl MartingaleBasis {
    /// Number of basis martingales `d`.
    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn steps(&self) -> usize {
        self.dmu.len() - 1
    }

    pub fn dmu(&self, k: usize) -> f64 {
        self.dmu[k]
    }

    /// `ΔM^1..ΔM^d` at a child node of level `k`.
    pub fn increment(&self, k: usize, child: usize) -> &[f64] {
        &self.increments[k][child * self.dim..(child + 1) * self.dim]
    }

    /// `Δ<M^1>..Δ<M^d>` on atom `atom` of level `k - 1`.
    pub fn dqv(&self, k: usize, atom: usize) -> &[f64] {
        &self.dqv[k][atom * self.dim..(atom + 1) * self.dim]
    }

    /// Densities `phi^i` of `<M^i>` against `mu × P` on a predictable atom.
    pub fn phi(&self, k: usize, atom: usize) -> &[f64] {
        &self.phi[k][atom * self.dim..(atom + 1) * self.dim]
    }

    /// `||z||²_M` on a predictable atom.
    pub fn m_norm_sq(&self, z: &[f64], k: usize, atom: usize) -> Result<f64> {
        if z.len() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.len(),
            });
        }
        Ok(m_norm_sq_with(z, self.phi(k, atom)))
    }

    /// Cumulative martingale `M^i`, `i` zero-based.
    pub fn martingale(&self, space: &FilteredSpace, i: usize) -> AdaptedProcess {
        let mut m = AdaptedProcess::zero(space);
        for k in 1..=space.steps() {
            for c in 0..space.n_nodes(k) {
                let prev = m.levels[k - 1].values[space.parent(k, c)];
                m.levels[k].values[c] = prev + self.increment(k, c)[i];
            }
        }
        m
    }

    /// Integrand of a martingale increment on one atom, given the child values
    /// `x` of the increment (in canonical child order). Components with zero
    /// `Δ<M^i>` are set to zero.
    pub fn project_increment(
        &self,
        space: &FilteredSpace,
        k: usize,
        atom: usize,
        x: &[f64],
    ) -> Vec<f64> {
        let kids = space.children(k - 1, atom);
        let dqv = self.dqv(k, atom);
        (0..self.dim)
            .map(|i| {
                if dqv[i] <= 0.0 {
                    return 0.0;
                }
                let cov: f64 = kids
                    .clone()
                    .zip(x)
                    .map(|(c, &xc)| space.cond_prob(k, c) * xc * self.increment(k, c)[i])
                    .sum();
                cov / dqv[i]
            })
            .collect()
    }

    /// Integrands `Z` with `N = N_0 + ∫ Z dM`.
    pub fn represent(
        &self,
        space: &FilteredSpace,
        n: &AdaptedProcess,
        tol: f64,
    ) -> Result<IntegrandVector> {
        let mut z = IntegrandVector::zeros(space, self.dim);
        for k in 1..=space.steps() {
            for a in 0..space.n_nodes(k - 1) {
                let base = n.levels[k - 1].values[a];
                let x: Vec<f64> = space
                    .children(k - 1, a)
                    .map(|c| n.levels[k].values[c] - base)
                    .collect();
                let drift: f64 = space
                    .children(k - 1, a)
                    .zip(&x)
                    .map(|(c, v)| space.cond_prob(k, c) * v)
                    .sum();
                let scale = x.iter().fold(base.abs(), |m, v| m.max(v.abs())).max(1.0);
                if drift.abs() > tol * scale {
                    return Err(Error::NotAMartingale {
                        step: k,
                        node: a,
                        drift,
                    });
                }
                let zk = self.project_increment(space, k, a, &x);
                z.at_mut(k, a).copy_from_slice(&zk);
            }
        }
        Ok(z)
    }

    /// `Σ_i z^i ΔM^i` at a child node of level `k`.
    pub fn dot_increment(&self, z: &[f64], k: usize, child: usize) -> f64 {
        z.iter()
            .zip(self.increment(k, child))
            .map(|(a, b)| a * b)
            .sum()
    }

    /// Both sides of the isometry for `Z` on the predictable set `set`.
    pub fn isometry_check(
        &self,
        space: &FilteredSpace,
        z: &IntegrandVector,
        set: &PredictableSet,
    ) -> IsometryReport {
        let kk = space.steps();
        let mut mu_side = 0.0;
        let mut qv_side = 0.0;
        for k in 1..=kk {
            for a in 0..space.n_nodes(k - 1) {
                if !set.contains(k, a) {
                    continue;
                }
                let p = space.prob(k - 1, a);
                let zk = z.at(k, a);
                mu_side += p * m_norm_sq_with(zk, self.phi(k, a)) * self.dmu(k);
                qv_side += p * zk
                    .iter()
                    .zip(self.dqv(k, a))
                    .map(|(x, q)| x * x * q)
                    .sum::<f64>();
            }
        }
        let integral_side = (0..space.n_outcomes())
            .map(|w| {
                let x: f64 = (1..=kk)
                    .filter_map(|k| {
                        let a = space.ancestor(kk, w, k - 1);
                        set.contains(k, a)
                            .then(|| self.dot_increment(z.at(k, a), k, space.ancestor(kk, w, k)))
                    })
                    .sum();
                space.prob(kk, w) * x * x
            })
            .sum();
        IsometryReport {
            mu_side,
            qv_side,
            integral_side,
        }
    }

    /// Whether `phi^{i+1} > 0` implies `phi^i > 0` on every atom.
    pub fn chain_holds(&self) -> bool {
        self.phi.iter().skip(1).all(|step| {
            step.chunks(self.dim.max(1))
                .all(|atom| atom.windows(2).all(|w| !(w[1] > 0.0) || w[0] > 0.0))
        })
    }

    /// Largest `|E[M^i_T M^j_T]|` over `i != j`.
    pub fn max_cross_moment(&self, space: &FilteredSpace) -> f64 {
        let ms: Vec<AdaptedProcess> = (0..self.dim).map(|i| self.martingale(space, i)).collect();
        let mut worst: f64 = 0.0;
        for i in 0..self.dim {
            for j in i + 1..self.dim {
                let prod = ms[i].terminal().zip(ms[j].terminal(), |a, b| a * b);
                worst = worst.max(space.expectation(&prod).abs());
            }
        }
        worst
    }

    /// Numerical rank of the increment vectors `1_atom ΔM^i` spanning step `k`.
    ///
    /// Vectors of different atoms have disjoint support, so the rank is the sum
    /// of per-atom ranks; each is computed by Gram–Schmidt over the children.
    pub fn span_dimension(&self, space: &FilteredSpace, k: usize) -> usize {
        (0..space.n_nodes(k - 1))
            .map(|a| {
                let kids: Vec<usize> = space.children(k - 1, a).collect();
                let vecs: Vec<Vec<f64>> = (0..self.dim)
                    .map(|i| kids.iter().map(|&c| self.increment(k, c)[i]).collect())
                    .collect();
                numerical_rank(vecs)
            })
            .sum()
    }

    /// Serialisable per-atom view of the basis.
    pub fn dump(&self, space: &FilteredSpace) -> BasisDump {
        let mut atoms = Vec::new();
        for k in 1..=space.steps() {
            for a in 0..space.n_nodes(k - 1) {
                atoms.push(AtomDump {
                    step: k,
                    node: space.id(k - 1, a).to_string(),
                    phi: self.phi(k, a).to_vec(),
                    increments: space
                        .children(k - 1, a)
                        .map(|c| self.increment(k, c).to_vec())
                        .collect(),
                });
            }
        }
        BasisDump {
            dim: self.dim,
            atoms,
        }
    }

    /// `∫_{]t_a, t_b]} Z dM`, measurable at level `b`.
    pub fn stoch_integral(
        &self,
        space: &FilteredSpace,
        z: &IntegrandVector,
        a: usize,
        b: usize,
    ) -> Result<RandomVariable> {
        if a > b || b > space.steps() {
            return Err(Error::LevelOrder { from: a, to: b });
        }
        if z.dim() != self.dim {
            return Err(Error::DimensionMismatch {
                expected: self.dim,
                got: z.dim(),
            });
        }
        let values = (0..space.n_nodes(b))
            .map(|n| {
                (a + 1..=b)
                    .map(|k| {
                        let atom = space.ancestor(b, n, k - 1);
                        self.dot_increment(z.at(k, atom), k, space.ancestor(b, n, k))
                    })
                    .sum()
            })
            .collect();
        Ok(RandomVariable::new(b, values))
    }
}

pub(crate) fn m_norm_sq_with(z: &[f64], phi: &[f64]) -> f64 {
    z.iter().zip(phi).map(|(x, p)| x * x * p).sum()
}

fn numerical_rank(mut vecs: Vec<Vec<f64>>) -> usize {
    let mut basis: Vec<Vec<f64>> = Vec::new();
    for v in vecs.iter_mut() {
        let n0 = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n0 == 0.0 {
            continue;
        }
        for u in &basis {
            let h: f64 = v.iter().zip(u).map(|(a, b)| a * b).sum();
            for (x, y) in v.iter_mut().zip(u) {
                *x -= h * y;
            }
        }
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 * n0 {
            basis.push(v.iter().map(|x| x / n).collect());
        }
    }
    basis.len()
}

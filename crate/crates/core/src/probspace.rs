//! Finite filtered probability spaces.
//!
//! A space is a tree: level `k` holds the atoms of the partition generating
//! `F_{t_k}`, level 0 is the single root and level `K` holds the outcomes.
//! Nodes at each level are stored in canonical order (grouped by parent, in
//! parent order), so the children of a node form a contiguous index range.
//! All vectors in this crate that are indexed by nodes use that order.

use std::collections::HashMap;
use std::ops::Range;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Relative tolerance used when checking that node probabilities add up.
const PROB_TOL: f64 = 1e-9;

/// Grid times `t_0 = 0 < t_1 < ... < t_K = T` and clock values `mu(t_k)`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    times: Vec<f64>,
    mu: Vec<f64>,
}

impl TimeGrid {
    pub fn new(times: Vec<f64>, mu: Vec<f64>) -> Result<Self> {
        if times.len() != mu.len() {
            return Err(Error::DimensionMismatch {
                expected: times.len(),
                got: mu.len(),
            });
        }
        if times.len() < 2 {
            return Err(Error::NoStep);
        }
        for (index, (t, m)) in times.iter().zip(&mu).enumerate() {
            if !t.is_finite() || !m.is_finite() {
                return Err(Error::NonIncreasingClock { index });
            }
        }
        for index in 1..times.len() {
            if times[index] <= times[index - 1] || mu[index] <= mu[index - 1] {
                return Err(Error::NonIncreasingClock { index });
            }
        }
        Ok(Self { times, mu })
    }

    /// Grid with unit time steps and the given clock increments.
    pub fn from_increments(dmu: &[f64]) -> Result<Self> {
        let times = (0..=dmu.len()).map(|k| k as f64).collect();
        let mut mu = vec![0.0];
        for d in dmu {
            mu.push(mu.last().unwrap() + d);
        }
        Self::new(times, mu)
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.times.len() - 1
    }

    pub fn times(&self) -> &[f64] {
        &self.times
    }

    pub fn mu(&self) -> &[f64] {
        &self.mu
    }

    /// Clock increment `mu(t_k) - mu(t_{k-1})` for `k` in `1..=K`.
    pub fn dmu(&self, k: usize) -> f64 {
        self.mu[k] - self.mu[k - 1]
    }

    /// `mu_T - mu_{t_k}`.
    pub fn remaining_mu(&self, k: usize) -> f64 {
        self.mu[self.steps()] - self.mu[k]
    }
}

#[derive(Debug, Clone, PartialEq)]
struct Level {
    prob: Vec<f64>,
    parent: Vec<usize>,
    children: Vec<Range<usize>>,
    ids: Vec<String>,
}

/// Finite filtered probability space with a deterministic clock.
#[derive(Debug, Clone, PartialEq)]
pub struct FilteredSpace {
    grid: TimeGrid,
    levels: Vec<Level>,
}

/// One node of a structured space description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub parent: Option<String>,
    /// Unconditional probability of the node.
    pub p: f64,
}

/// Structured description accepted by [`build_space`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SpaceSpec {
    pub times: Vec<f64>,
    pub mu: Vec<f64>,
    pub nodes: Vec<NodeSpec>,
}

/// Validate a structured description and build the space.
pub fn build_space(spec: &SpaceSpec) -> Result<FilteredSpace> {
    let grid = TimeGrid::new(spec.times.clone(), spec.mu.clone())?;
    let k_max = grid.steps();

    let mut index: HashMap<&str, usize> = HashMap::new();
    for (i, n) in spec.nodes.iter().enumerate() {
        if index.insert(n.id.as_str(), i).is_some() {
            return Err(Error::NonRefining {
                level: 0,
                detail: format!("duplicate node id {:?}", n.id),
            });
        }
    }
    let roots: Vec<usize> = spec
        .nodes
        .iter()
        .enumerate()
        .filter(|(_, n)| n.parent.is_none())
        .map(|(i, _)| i)
        .collect();
    if roots.len() != 1 {
        return Err(Error::NonRefining {
            level: 0,
            detail: format!("expected exactly one root, found {}", roots.len()),
        });
    }
    let mut kids: Vec<Vec<usize>> = vec![Vec::new(); spec.nodes.len()];
    for (i, n) in spec.nodes.iter().enumerate() {
        if let Some(p) = &n.parent {
            let pi = *index.get(p.as_str()).ok_or_else(|| Error::NonRefining {
                level: 0,
                detail: format!("node {:?} has unknown parent {:?}", n.id, p),
            })?;
            kids[pi].push(i);
        }
    }

    // Breadth-first walk in canonical order; nodes not reached hang off a cycle.
    let mut order: Vec<Vec<usize>> = vec![vec![roots[0]]];
    let mut seen = 1;
    for k in 0..k_max {
        let next: Vec<usize> = order[k]
            .iter()
            .flat_map(|&i| kids[i].iter().copied())
            .collect();
        for &i in &order[k] {
            if kids[i].is_empty() {
                return Err(Error::NonRefining {
                    level: k,
                    detail: format!(
                        "node {:?} has no children before the terminal level",
                        spec.nodes[i].id
                    ),
                });
            }
        }
        seen += next.len();
        order.push(next);
    }
    if let Some(&i) = order[k_max].iter().find(|&&i| !kids[i].is_empty()) {
        return Err(Error::NonRefining {
            level: k_max,
            detail: format!(
                "node {:?} lies deeper than the terminal level",
                spec.nodes[i].id
            ),
        });
    }
    if seen != spec.nodes.len() {
        return Err(Error::NonRefining {
            level: 0,
            detail: "some nodes are not reachable from the root".into(),
        });
    }

    let mut raw = Vec::with_capacity(k_max + 1);
    for (k, lvl) in order.iter().enumerate() {
        let parent = if k == 0 {
            vec![0]
        } else {
            let prev: HashMap<usize, usize> = order[k - 1]
                .iter()
                .enumerate()
                .map(|(j, &i)| (i, j))
                .collect();
            lvl.iter()
                .map(|&i| prev[&index[spec.nodes[i].parent.as_deref().unwrap()]])
                .collect()
        };
        raw.push(RawLevel {
            prob: lvl.iter().map(|&i| spec.nodes[i].p).collect(),
            parent,
            ids: lvl.iter().map(|&i| spec.nodes[i].id.clone()).collect(),
        });
    }
    FilteredSpace::assemble(grid, raw)
}

struct RawLevel {
    prob: Vec<f64>,
    parent: Vec<usize>,
    ids: Vec<String>,
}

impl FilteredSpace {
    fn assemble(grid: TimeGrid, raw: Vec<RawLevel>) -> Result<Self> {
        let k_max = grid.steps();
        if raw.len() != k_max + 1 {
            return Err(Error::NonRefining {
                level: raw.len().saturating_sub(1),
                detail: format!("expected {} levels, got {}", k_max + 1, raw.len()),
            });
        }
        if raw[0].prob.len() != 1 {
            return Err(Error::NonRefining {
                level: 0,
                detail: "level 0 must be the trivial partition".into(),
            });
        }
        let mut levels: Vec<Level> = Vec::with_capacity(k_max + 1);
        for (k, r) in raw.into_iter().enumerate() {
            for (node, &p) in r.prob.iter().enumerate() {
                if !(p > 0.0) || !p.is_finite() {
                    return Err(Error::ZeroProbabilityAtom { node, p });
                }
            }
            if k > 0 {
                let prev = levels.last_mut().unwrap();
                if r.parent.windows(2).any(|w| w[1] < w[0]) {
                    return Err(Error::NonRefining {
                        level: k,
                        detail: "nodes are not grouped by parent".into(),
                    });
                }
                let mut start = 0;
                for pn in 0..prev.prob.len() {
                    let mut end = start;
                    while end < r.parent.len() && r.parent[end] == pn {
                        end += 1;
                    }
                    if end == start {
                        return Err(Error::NonRefining {
                            level: k - 1,
                            detail: format!("node {pn} has no children"),
                        });
                    }
                    let sum: f64 = r.prob[start..end].iter().sum();
                    let expected = prev.prob[pn];
                    if (sum - expected).abs() > PROB_TOL * expected.max(1.0) {
                        return Err(Error::ProbabilityMismatch {
                            level: k - 1,
                            node: pn,
                            expected,
                            got: sum,
                        });
                    }
                    prev.children.push(start..end);
                    start = end;
                }
                if start != r.parent.len() {
                    return Err(Error::NonRefining {
                        level: k,
                        detail: "node refers to a parent outside the previous level".into(),
                    });
                }
            } else if (r.prob[0] - 1.0).abs() > PROB_TOL {
                return Err(Error::ProbabilityMismatch {
                    level: 0,
                    node: 0,
                    expected: 1.0,
                    got: r.prob[0],
                });
            }
            levels.push(Level {
                prob: r.prob,
                parent: r.parent,
                children: Vec::new(),
                ids: r.ids,
            });
        }
        Ok(Self { grid, levels })
    }

    /// Build from conditional branching probabilities:
    /// `cond[k][node]` lists the conditional probabilities of the children of
    /// `node` at level `k`, for `k` in `0..K`.
    pub fn from_conditional(grid: TimeGrid, cond: &[Vec<Vec<f64>>]) -> Result<Self> {
        let mut raw = vec![RawLevel {
            prob: vec![1.0],
            parent: vec![0],
            ids: vec!["0".into()],
        }];
        for (k, lvl) in cond.iter().enumerate() {
            let prev = &raw[k];
            if lvl.len() != prev.prob.len() {
                return Err(Error::NonRefining {
                    level: k,
                    detail: format!(
                        "expected {} branching lists, got {}",
                        prev.prob.len(),
                        lvl.len()
                    ),
                });
            }
            let mut next = RawLevel {
                prob: Vec::new(),
                parent: Vec::new(),
                ids: Vec::new(),
            };
            for (node, probs) in lvl.iter().enumerate() {
                let s: f64 = probs.iter().sum();
                if (s - 1.0).abs() > PROB_TOL {
                    return Err(Error::ProbabilityMismatch {
                        level: k,
                        node,
                        expected: 1.0,
                        got: s,
                    });
                }
                for (c, q) in probs.iter().enumerate() {
                    next.prob.push(prev.prob[node] * q);
                    next.parent.push(node);
                    next.ids.push(format!("{}.{}", prev.ids[node], c));
                }
            }
            raw.push(next);
        }
        Self::assemble(grid, raw)
    }

    /// Tree where every node has `branching` equally likely children.
    pub fn regular(grid: TimeGrid, branching: usize) -> Result<Self> {
        let mut cond = Vec::new();
        let mut width = 1;
        for _ in 0..grid.steps() {
            cond.push(vec![vec![1.0 / branching as f64; branching]; width]);
            width *= branching;
        }
        Self::from_conditional(grid, &cond)
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    /// Number of steps `K`.
    pub fn steps(&self) -> usize {
        self.grid.steps()
    }

    pub fn dmu(&self, k: usize) -> f64 {
        self.grid.dmu(k)
    }

    pub fn n_nodes(&self, level: usize) -> usize {
        self.levels[level].prob.len()
    }

    /// Number of outcomes (terminal atoms).
    pub fn n_outcomes(&self) -> usize {
        self.n_nodes(self.steps())
    }

    /// Unconditional probability of a node.
    pub fn prob(&self, level: usize, node: usize) -> f64 {
        self.levels[level].prob[node]
    }

    pub fn probs(&self, level: usize) -> &[f64] {
        &self.levels[level].prob
    }

    pub fn parent(&self, level: usize, node: usize) -> usize {
        self.levels[level].parent[node]
    }

    /// Children (at `level + 1`) of a node at `level < K`.
    pub fn children(&self, level: usize, node: usize) -> Range<usize> {
        self.levels[level].children[node].clone()
    }

    /// Probability of a node at `level` conditional on its parent.
    pub fn cond_prob(&self, level: usize, node: usize) -> f64 {
        let p = self.parent(level, node);
        self.prob(level, node) / self.prob(level - 1, p)
    }

    pub fn id(&self, level: usize, node: usize) -> &str {
        &self.levels[level].ids[node]
    }

    /// Ancestor at `to` of a node at `from >= to`.
    pub fn ancestor(&self, from: usize, node: usize, to: usize) -> usize {
        let mut n = node;
        for k in (to + 1..=from).rev() {
            n = self.parent(k, n);
        }
        n
    }

    /// Descendants at level `to` of a node at `from <= to`, as an index range.
    pub fn descendants(&self, from: usize, node: usize, to: usize) -> Range<usize> {
        let mut r = node..node + 1;
        for k in from..to {
            let lo = self.children(k, r.start).start;
            let hi = self.children(k, r.end - 1).end;
            r = lo..hi;
        }
        r
    }

    /// Largest number of children minus one over all nodes.
    pub fn max_branching_dim(&self) -> usize {
        (0..self.steps())
            .flat_map(|k| self.levels[k].children.iter().map(|r| r.len() - 1))
            .max()
            .unwrap_or(0)
    }

    /// `E[X | F_{t_k}]` for `X` measurable at a level `>= k`.
    pub fn conditional_expectation(&self, x: &RandomVariable, k: usize) -> Result<RandomVariable> {
        if k > x.level {
            return Err(Error::LevelOrder {
                from: x.level,
                to: k,
            });
        }
        self.check_rv(x)?;
        let mut values = x.values.clone();
        for level in (k..x.level).rev() {
            values = (0..self.n_nodes(level))
                .map(|n| {
                    let pn = self.prob(level, n);
                    self.children(level, n)
                        .map(|c| self.prob(level + 1, c) * values[c])
                        .sum::<f64>()
                        / pn
                })
                .collect();
        }
        Ok(RandomVariable { level: k, values })
    }

    /// Classical expectation `E[X]`.
    pub fn expectation(&self, x: &RandomVariable) -> f64 {
        x.values
            .iter()
            .zip(self.probs(x.level))
            .map(|(v, p)| v * p)
            .sum()
    }

    /// Re-express `X` as a random variable at the finer level `to`.
    pub fn lift(&self, x: &RandomVariable, to: usize) -> Result<RandomVariable> {
        if to < x.level {
            return Err(Error::LevelOrder { from: x.level, to });
        }
        self.check_rv(x)?;
        let values = (0..self.n_nodes(to))
            .map(|n| x.values[self.ancestor(to, n, x.level)])
            .collect();
        Ok(RandomVariable { level: to, values })
    }

    /// Pathwise Stieltjes integral `∫_{]t_a, t_b]} h dmu`, measurable at level `b`.
    pub fn stieltjes_integral(
        &self,
        h: &PredictableProcess,
        a: usize,
        b: usize,
    ) -> Result<RandomVariable> {
        if a > b {
            return Err(Error::LevelOrder { from: a, to: b });
        }
        if b > self.steps() {
            return Err(Error::LevelOrder {
                from: self.steps(),
                to: b,
            });
        }
        let values = (0..self.n_nodes(b))
            .map(|n| {
                (a + 1..=b)
                    .map(|k| h.at(k)[self.ancestor(b, n, k - 1)] * self.dmu(k))
                    .sum()
            })
            .collect();
        Ok(RandomVariable { level: b, values })
    }

    pub(crate) fn check_rv(&self, x: &RandomVariable) -> Result<()> {
        if x.level > self.steps() {
            return Err(Error::LevelOrder {
                from: self.steps(),
                to: x.level,
            });
        }
        if x.values.len() != self.n_nodes(x.level) {
            return Err(Error::DimensionMismatch {
                expected: self.n_nodes(x.level),
                got: x.values.len(),
            });
        }
        Ok(())
    }

    /// Deterministic pseudo-random space for fuzzing.
    pub fn random(seed: u64, params: &RandomSpaceParams) -> Result<Self> {
        random_space(seed, params)
    }
}

/// A random variable measurable with respect to `F_{t_level}`: one value per node.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomVariable {
    pub level: usize,
    pub values: Vec<f64>,
}

impl RandomVariable {
    pub fn new(level: usize, values: Vec<f64>) -> Self {
        Self { level, values }
    }

    pub fn constant(space: &FilteredSpace, level: usize, c: f64) -> Self {
        Self {
            level,
            values: vec![c; space.n_nodes(level)],
        }
    }

    pub fn map(&self, f: impl Fn(f64) -> f64) -> Self {
        Self {
            level: self.level,
            values: self.values.iter().map(|&v| f(v)).collect(),
        }
    }

    /// Pointwise combination of two variables at the same level.
    pub fn zip(&self, other: &Self, f: impl Fn(f64, f64) -> f64) -> Self {
        assert_eq!(self.level, other.level, "level mismatch in zip");
        Self {
            level: self.level,
            values: self
                .values
                .iter()
                .zip(&other.values)
                .map(|(&a, &b)| f(a, b))
                .collect(),
        }
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.values
            .iter()
            .zip(&other.values)
            .map(|(a, b)| (a - b).abs())
            .fold(0.0, f64::max)
    }
}

/// Process with one random variable per grid level, `levels[k]` at level `k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AdaptedProcess {
    pub levels: Vec<RandomVariable>,
}

impl AdaptedProcess {
    /// Build from per-level value vectors, validating their lengths.
    pub fn from_values(space: &FilteredSpace, values: Vec<Vec<f64>>) -> Result<Self> {
        if values.len() != space.steps() + 1 {
            return Err(Error::DimensionMismatch {
                expected: space.steps() + 1,
                got: values.len(),
            });
        }
        let levels: Vec<RandomVariable> = values
            .into_iter()
            .enumerate()
            .map(|(k, v)| RandomVariable::new(k, v))
            .collect();
        for x in &levels {
            space.check_rv(x)?;
        }
        Ok(Self { levels })
    }

    pub fn zero(space: &FilteredSpace) -> Self {
        Self {
            levels: (0..=space.steps())
                .map(|k| RandomVariable::constant(space, k, 0.0))
                .collect(),
        }
    }

    pub fn at(&self, k: usize) -> &RandomVariable {
        &self.levels[k]
    }

    pub fn terminal(&self) -> &RandomVariable {
        self.levels.last().expect("process has no levels")
    }

    /// Values along the path leading to outcome `omega`.
    pub fn path(&self, space: &FilteredSpace, omega: usize) -> Vec<f64> {
        let kk = space.steps();
        (0..self.levels.len())
            .map(|k| self.levels[k].values[space.ancestor(kk, omega, k)])
            .collect()
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.levels
            .iter()
            .zip(&other.levels)
            .map(|(a, b)| a.max_abs_diff(b))
            .fold(0.0, f64::max)
    }
}

/// Predictable process: the value on `]t_{k-1}, t_k]` is known at `t_{k-1}`,
/// so step `k` carries one value per node of level `k - 1`. Step 0 is empty.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PredictableProcess {
    values: Vec<Vec<f64>>,
}

impl PredictableProcess {
    pub fn from_steps(space: &FilteredSpace, steps: Vec<Vec<f64>>) -> Result<Self> {
        if steps.len() != space.steps() {
            return Err(Error::DimensionMismatch {
                expected: space.steps(),
                got: steps.len(),
            });
        }
        for (i, s) in steps.iter().enumerate() {
            if s.len() != space.n_nodes(i) {
                return Err(Error::DimensionMismatch {
                    expected: space.n_nodes(i),
                    got: s.len(),
                });
            }
        }
        let mut values = vec![Vec::new()];
        values.extend(steps);
        Ok(Self { values })
    }

    pub fn constant(space: &FilteredSpace, c: f64) -> Self {
        let mut values = vec![Vec::new()];
        values.extend((1..=space.steps()).map(|k| vec![c; space.n_nodes(k - 1)]));
        Self { values }
    }

    /// Values for step `k` in `1..=K`, indexed by nodes of level `k - 1`.
    pub fn at(&self, k: usize) -> &[f64] {
        &self.values[k]
    }

    pub fn at_mut(&mut self, k: usize) -> &mut Vec<f64> {
        &mut self.values[k]
    }

    pub fn steps(&self) -> usize {
        self.values.len() - 1
    }
}

/// Parameters for [`random_space`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RandomSpaceParams {
    pub depth: usize,
    pub branching: (usize, usize),
    /// Range for each clock increment.
    pub clock: (f64, f64),
}

impl Default for RandomSpaceParams {
    fn default() -> Self {
        Self {
            depth: 3,
            branching: (2, 3),
            clock: (0.1, 1.0),
        }
    }
}

pub const MAX_RANDOM_DEPTH: usize = 12;
pub const MAX_RANDOM_BRANCHING: usize = 4;

/// Deterministic pseudo-random space: same seed and parameters give the same space.
pub fn random_space(seed: u64, params: &RandomSpaceParams) -> Result<FilteredSpace> {
    if params.depth == 0 {
        return Err(Error::NoStep);
    }
    let (blo, bhi) = params.branching;
    if params.depth > MAX_RANDOM_DEPTH {
        return Err(Error::ParamsOutOfRange(format!(
            "depth {} exceeds {MAX_RANDOM_DEPTH}",
            params.depth
        )));
    }
    if blo == 0 || blo > bhi || bhi > MAX_RANDOM_BRANCHING {
        return Err(Error::ParamsOutOfRange(format!(
            "branching range {blo}..={bhi} not within 1..={MAX_RANDOM_BRANCHING}"
        )));
    }
    let (clo, chi) = params.clock;
    if !(clo > 0.0) || clo > chi || !chi.is_finite() {
        return Err(Error::ParamsOutOfRange(format!("clock range {clo}..{chi}")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let dmu: Vec<f64> = (0..params.depth)
        .map(|_| {
            if clo == chi {
                clo
            } else {
                rng.gen_range(clo..=chi)
            }
        })
        .collect();
    let grid = TimeGrid::from_increments(&dmu)?;
    let mut cond = Vec::with_capacity(params.depth);
    let mut width = 1;
    for _ in 0..params.depth {
        let mut lvl = Vec::with_capacity(width);
        let mut next = 0;
        for _ in 0..width {
            let b = rng.gen_range(blo..=bhi);
            let w: Vec<f64> = (0..b).map(|_| rng.gen_range(0.2..1.0)).collect();
            let s: f64 = w.iter().sum();
            let mut probs: Vec<f64> = w.iter().map(|x| x / s).collect();
            // Force an exact unit sum so validation never trips on rounding.
            let head: f64 = probs[..b - 1].iter().sum();
            probs[b - 1] = 1.0 - head;
            lvl.push(probs);
            next += b;
        }
        cond.push(lvl);
        width = next;
    }
    FilteredSpace::from_conditional(grid, &cond)
}

//! Certificates for the balanced condition
//! `sup_{||u||_M = 1} ||r u||_M |u ΔM| < 1` on every atom and child.
//!
//! With `w_i = ΔM^i / sqrt(phi^i)` and `v = W^{1/2} u` the product becomes
//! `||R v|| |<w, v>|` over the Euclidean unit sphere, `R = W^{1/2} r W^{-1/2}`.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use super::driver::{AtomCtx, Driver};
use crate::gexp::rmatrix::{RMatrix, RSpec};
use crate::martrep::MartingaleBasis;
use crate::probspace::FilteredSpace;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceVerdict {
    Balanced,
    NotCertified,
    Inconclusive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum BalanceMethod {
    /// Driver does not depend on `z`.
    Trivial,
    Scalar,
    Diagonal,
    /// Operator norm times `|w|`; sound but not tight.
    Spectral,
    Sampled,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct BalanceCertificate {
    pub verdict: BalanceVerdict,
    pub method: BalanceMethod,
    /// Upper bound on the supremum of the product (for sampling: worst observed).
    pub upper: f64,
    /// A value of the product actually attained.
    pub attained: f64,
    /// Step and child node where `upper` occurs.
    pub witness: Option<(usize, usize)>,
}

impl BalanceCertificate {
    pub fn is_balanced(&self) -> bool {
        self.verdict == BalanceVerdict::Balanced
    }

    pub fn conservative(&self) -> bool {
        self.method == BalanceMethod::Spectral
    }

    fn trivial() -> Self {
        Self {
            verdict: BalanceVerdict::Balanced,
            method: BalanceMethod::Trivial,
            upper: 0.0,
            attained: 0.0,
            witness: None,
        }
    }
}

/// `w_i = ΔM^i / sqrt(phi^i)` at a child node, zero on inactive components.
pub fn w_vector(basis: &MartingaleBasis, k: usize, atom: usize, child: usize) -> Vec<f64> {
    let phi = basis.phi(k, atom);
    basis
        .increment(k, child)
        .iter()
        .zip(phi)
        .map(|(m, p)| if *p > 0.0 { m / p.sqrt() } else { 0.0 })
        .collect()
}

/// `max |w|` over all atoms and children; a scalar `r` below its inverse is balanced.
pub fn max_w_norm(space: &FilteredSpace, basis: &MartingaleBasis) -> f64 {
    let mut worst: f64 = 0.0;
    for k in 1..=space.steps() {
        for a in 0..space.n_nodes(k - 1) {
            for c in space.children(k - 1, a) {
                worst = worst.max(norm(&w_vector(basis, k, a, c)));
            }
        }
    }
    worst
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Certify a uniformly balanced `r`.
pub fn check_r_balanced(
    r: &RMatrix,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
) -> BalanceCertificate {
    let method = match r.spec() {
        RSpec::Scalar(_) => BalanceMethod::Scalar,
        RSpec::Diagonal(_) => BalanceMethod::Diagonal,
        RSpec::Full(_) => BalanceMethod::Spectral,
    };
    let mut upper: f64 = 0.0;
    let mut attained: f64 = 0.0;
    let mut witness = None;
    for k in 1..=space.steps() {
        for a in 0..space.n_nodes(k - 1) {
            let phi = basis.phi(k, a);
            for c in space.children(k - 1, a) {
                let w = w_vector(basis, k, a, c);
                let (hi, lo) = match r.spec() {
                    RSpec::Scalar(x) => {
                        let v = x.abs() * norm(&w);
                        (v, v)
                    }
                    RSpec::Diagonal(d) => {
                        let active: Vec<usize> = (0..phi.len()).filter(|&i| phi[i] > 0.0).collect();
                        let sq: Vec<f64> = active.iter().map(|&i| d[i] * d[i]).collect();
                        let ws: Vec<f64> = active.iter().map(|&i| w[i].abs()).collect();
                        diagonal_sup(&sq, &ws)
                    }
                    RSpec::Full(_) => {
                        let hi = r.d_norm(k, a) * norm(&w);
                        // Attained value along v = w / |w|.
                        let nw = norm(&w);
                        let lo = if nw > 0.0 {
                            let v: Vec<f64> = w.iter().map(|x| x / nw).collect();
                            let u: Vec<f64> = v
                                .iter()
                                .zip(phi)
                                .map(|(x, p)| if *p > 0.0 { x / p.sqrt() } else { 0.0 })
                                .collect();
                            r.image_norm(phi, &u) * nw
                        } else {
                            0.0
                        };
                        (hi, lo)
                    }
                };
                if hi > upper || witness.is_none() {
                    upper = upper.max(hi);
                    witness = Some((k, c));
                }
                attained = attained.max(lo);
            }
        }
    }
    let verdict = if upper < 1.0 {
        BalanceVerdict::Balanced
    } else if attained >= 1.0 {
        BalanceVerdict::NotCertified
    } else if method == BalanceMethod::Spectral {
        BalanceVerdict::Inconclusive
    } else {
        BalanceVerdict::NotCertified
    };
    BalanceCertificate {
        verdict,
        method,
        upper,
        attained,
        witness,
    }
}

/// `sup_{|v| = 1} sqrt(Σ a_i v_i²) Σ c_i |v_i|` with `a_i = d_i²`, `c_i = |w_i|`.
///
/// Returns `(upper, attained)`. With `x_i = v_i²` on the simplex the log of the
/// square is concave, so exponentiated-gradient ascent converges and the
/// Frank–Wolfe gap gives a certified upper bound.
pub fn diagonal_sup(a: &[f64], c: &[f64]) -> (f64, f64) {
    let idx: Vec<usize> = (0..a.len()).filter(|&i| a[i] > 0.0 || c[i] > 0.0).collect();
    if idx.iter().all(|&i| a[i] == 0.0) || idx.iter().all(|&i| c[i] == 0.0) {
        return (0.0, 0.0);
    }
    let a: Vec<f64> = idx.iter().map(|&i| a[i]).collect();
    let c: Vec<f64> = idx.iter().map(|&i| c[i]).collect();
    let h = |x: &[f64]| -> f64 {
        let ax: f64 = a.iter().zip(x).map(|(a, x)| a * x).sum();
        let s: f64 = c.iter().zip(x).map(|(c, x)| c * x.sqrt()).sum();
        ax.ln() + 2.0 * s.ln()
    };
    let grad = |x: &[f64]| -> Vec<f64> {
        let ax: f64 = a.iter().zip(x).map(|(a, x)| a * x).sum();
        let s: f64 = c.iter().zip(x).map(|(c, x)| c * x.sqrt()).sum();
        (0..a.len())
            .map(|i| {
                let zc = if c[i] > 0.0 {
                    c[i] / (x[i].sqrt() * s)
                } else {
                    0.0
                };
                a[i] / ax + zc
            })
            .collect()
    };
    // ∇h · x = 2 on the simplex, so the Frank-Wolfe gap is max ∇h - 2.
    let fw_gap = |x: &[f64]| grad(x).into_iter().fold(f64::NEG_INFINITY, f64::max) - 2.0;
    let certify = |x: &[f64]| -> Option<(f64, f64)> {
        let (hx, gap) = (h(x), fw_gap(x));
        (hx.is_finite() && gap.is_finite()).then_some((hx, gap.max(0.0)))
    };
    let mut best = stationary_point(&a, &c).and_then(|x| certify(&x));
    if best.map_or(true, |(_, gap)| gap > 1e-12) {
        let x = ascend(&h, &grad, a.len());
        if let Some((hx, gap)) = certify(&x) {
            best = Some(match best {
                Some((hb, gb)) => (hb.max(hx), (hb + gb).min(hx + gap) - hb.max(hx)),
                None => (hx, gap),
            });
        }
    }
    let (hx, gap) = best.unwrap_or((f64::NEG_INFINITY, f64::INFINITY));
    let attained = (hx / 2.0).exp();
    let upper = ((hx + gap) / 2.0).exp();
    (upper, attained)
}

/// Maximiser of the log-concave objective in closed form up to one root.
///
/// Stationarity gives `sqrt(x_i) ∝ c_i / (μ - a_i)` with `μ = 2 Σ a_i x_i`.
/// If a coordinate with `c_i = 0` has `a_i` above the root, it absorbs the
/// remaining mass at `μ = a_i` instead.
fn stationary_point(a: &[f64], c: &[f64]) -> Option<Vec<f64>> {
    let n = a.len();
    let top = |pos: bool| {
        (0..n)
            .filter(|&i| (c[i] > 0.0) == pos)
            .map(|i| a[i])
            .fold(f64::NEG_INFINITY, f64::max)
    };
    let (a_c, a_h) = (top(true), top(false));
    let weights = |mu: f64| -> Vec<f64> {
        (0..n)
            .map(|i| if c[i] > 0.0 { c[i] / (mu - a[i]) } else { 0.0 })
            .collect()
    };
    let twice_a = |mu: f64| -> f64 {
        let w = weights(mu);
        let norm: f64 = w.iter().map(|w| w * w).sum();
        2.0 * (0..n).map(|i| a[i] * w[i] * w[i]).sum::<f64>() / norm
    };
    let root = (a_c > 0.0).then(|| {
        let (mut lo, mut hi) = (a_c, 2.0 * a_c + 1.0);
        for _ in 0..200 {
            let mid = 0.5 * (lo + hi);
            if mid <= lo || mid >= hi {
                break;
            }
            if mid < twice_a(mid) {
                lo = mid;
            } else {
                hi = mid;
            }
        }
        hi
    });
    let x = match root {
        Some(mu) if mu >= a_h => {
            let w = weights(mu);
            let norm: f64 = w.iter().map(|w| w * w).sum();
            w.iter().map(|w| w * w / norm).collect()
        }
        _ if a_h > 0.0 => {
            let w = weights(a_h);
            let s2 = 0.5 * a_h / (0..n).map(|i| c[i] * w[i]).sum::<f64>();
            let used: f64 = s2 * w.iter().map(|w| w * w).sum::<f64>();
            if !(used <= 1.0) {
                return None;
            }
            let hard = (0..n).find(|&i| c[i] == 0.0 && a[i] == a_h)?;
            let mut x: Vec<f64> = w.iter().map(|w| s2 * w * w).collect();
            x[hard] = 1.0 - used;
            x
        }
        _ => return None,
    };
    x.iter().all(|v| v.is_finite()).then_some(x)
}

/// Exponentiated-gradient ascent on the simplex.
fn ascend(h: &dyn Fn(&[f64]) -> f64, grad: &dyn Fn(&[f64]) -> Vec<f64>, n: usize) -> Vec<f64> {
    let mut x = vec![1.0 / n as f64; n];
    let mut hx = h(&x);
    let mut eta = 0.5;
    for _ in 0..20000 {
        let g = grad(&x);
        let gmax = g.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if gmax - 2.0 <= 1e-13 {
            break;
        }
        loop {
            let mut y: Vec<f64> = x
                .iter()
                .zip(&g)
                .map(|(x, g)| x * (eta * (g - gmax)).exp())
                .collect();
            let sum: f64 = y.iter().sum();
            y.iter_mut().for_each(|v| *v /= sum);
            let hy = h(&y);
            if hy.is_finite() && hy >= hx {
                x = y;
                hx = hy;
                eta = (eta * 1.5).min(1e6);
                break;
            }
            eta *= 0.5;
            if eta < 1e-18 {
                return x;
            }
        }
    }
    x
}

/// Certificate for an arbitrary driver.
///
/// Drivers that ignore `z` are trivially balanced; drivers declaring a
/// dominating `r` are certified through it; anything else is sampled and can
/// at best be reported inconclusive.
pub fn check_balanced(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    samples_per_atom: usize,
    seed: u64,
) -> BalanceCertificate {
    let meta = driver.meta();
    if meta.z_independent || basis.dim() == 0 {
        return BalanceCertificate::trivial();
    }
    if let Some(r) = &meta.dominating_r {
        return check_r_balanced(r, space, basis);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut worst: f64 = 0.0;
    let mut witness = None;
    for k in 1..=space.steps() {
        for a in 0..space.n_nodes(k - 1) {
            let ctx = AtomCtx::new(basis, k, a);
            for _ in 0..samples_per_atom {
                let y: f64 = rng.gen_range(-3.0..3.0);
                let z: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let z2: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let u: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a - b).collect();
                let nu = ctx.m_norm(&u);
                if nu == 0.0 {
                    continue;
                }
                let dg = (driver.eval(&ctx, y, &z) - driver.eval(&ctx, y, &z2)).abs();
                for c in space.children(k - 1, a) {
                    let ratio = dg / (nu * nu) * basis.dot_increment(&u, k, c).abs();
                    if ratio > worst {
                        worst = ratio;
                        witness = Some((k, c));
                    }
                }
            }
        }
    }
    BalanceCertificate {
        verdict: if worst >= 1.0 {
            BalanceVerdict::NotCertified
        } else {
            BalanceVerdict::Inconclusive
        },
        method: BalanceMethod::Sampled,
        upper: worst,
        attained: worst,
        witness,
    }
}

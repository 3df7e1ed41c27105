//! Drivers, their metadata, and the catalog addressable from scenario files.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::gexp::rmatrix::{RMatrix, RSpec};
use crate::martrep::{m_norm_sq_with, MartingaleBasis};
use crate::probspace::FilteredSpace;

/// Where a driver is being evaluated: step `k`, atom `node` of level `k - 1`.
#[derive(Debug, Clone, Copy)]
pub struct AtomCtx<'a> {
    pub step: usize,
    pub node: usize,
    pub phi: &'a [f64],
    pub dmu: f64,
}

impl<'a> AtomCtx<'a> {
    pub fn new(basis: &'a MartingaleBasis, step: usize, node: usize) -> Self {
        Self {
            step,
            node,
            phi: basis.phi(step, node),
            dmu: basis.dmu(step),
        }
    }

    /// `||z||_M` on this atom.
    pub fn m_norm(&self, z: &[f64]) -> f64 {
        m_norm_sq_with(z, self.phi).sqrt()
    }
}

/// Ordinary Lipschitz data: `|g(y,z) - g(y',z')| <= lip_y |y-y'| + lip_z ||z-z'||_M`,
/// and `(g(y,z) - g(y',z)) / (y - y') <= max_y_slope`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct Lipschitz {
    pub lip_y: f64,
    pub lip_z: f64,
    pub max_y_slope: f64,
}

impl Lipschitz {
    /// Per-step constant of the firm bound `|Δg|² <= c_t |Δy|² + c ||Δz||²`.
    pub fn firm_c_t(&self) -> f64 {
        self.lip_y * (self.lip_y + self.lip_z)
    }

    /// Constant of the plain bound `|Δg|² <= c (|Δy|² + ||Δz||²)`.
    pub fn plain_c(&self) -> f64 {
        self.lip_y * self.lip_y + self.lip_z * self.lip_z
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct DriverMeta {
    pub lipschitz: Option<Lipschitz>,
    /// `g(t, y, 0) = 0` for every `y`.
    pub zero_at_zero: bool,
    pub y_independent: bool,
    pub z_independent: bool,
    /// An `r` with `|g(y,z) - g(y,z')| <= ||r (z - z')||_M`.
    pub dominating_r: Option<RMatrix>,
}

/// A BSDE driver. Evaluation must be a pure function of its arguments.
pub trait Driver: Send + Sync {
    fn eval(&self, ctx: &AtomCtx<'_>, y: f64, z: &[f64]) -> f64;
    fn meta(&self) -> &DriverMeta;
    fn label(&self) -> String;
}

impl<D: Driver + ?Sized> Driver for &D {
    fn eval(&self, ctx: &AtomCtx<'_>, y: f64, z: &[f64]) -> f64 {
        (**self).eval(ctx, y, z)
    }

    fn meta(&self) -> &DriverMeta {
        (**self).meta()
    }

    fn label(&self) -> String {
        (**self).label()
    }
}

/// Catalog entries as written in scenario files.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DriverSpec {
    Zero,
    LinearY {
        a: f64,
    },
    RNorm {
        r: RSpec,
    },
    NegRNorm {
        r: RSpec,
    },
    /// `g(z) = Σ b_i sqrt(phi^i) z^i`, a signed linear driver with `|g| <= |b| ||z||_M`.
    LinearZ {
        b: Vec<f64>,
    },
    /// Per-atom constants `values[k - 1][node]`, independent of `y` and `z`.
    Table {
        values: Vec<Vec<f64>>,
    },
}

#[derive(Debug, Clone, PartialEq)]
enum Kind {
    Zero,
    LinearY(f64),
    Norm { r: RMatrix, sign: f64 },
    LinearZ(Vec<f64>),
    Table(Vec<Vec<f64>>),
}

/// A catalog driver resolved against a space and basis.
#[derive(Debug, Clone, PartialEq)]
pub struct CatalogDriver {
    spec: DriverSpec,
    kind: Kind,
    meta: DriverMeta,
}

impl CatalogDriver {
    pub fn new(spec: DriverSpec, space: &FilteredSpace, basis: &MartingaleBasis) -> Result<Self> {
        let lip = |lip_y, lip_z, max_y_slope| {
            Some(Lipschitz {
                lip_y,
                lip_z,
                max_y_slope,
            })
        };
        let (kind, meta) = match &spec {
            DriverSpec::Zero => (
                Kind::Zero,
                DriverMeta {
                    lipschitz: lip(0.0, 0.0, 0.0),
                    zero_at_zero: true,
                    y_independent: true,
                    z_independent: true,
                    dominating_r: None,
                },
            ),
            DriverSpec::LinearY { a } => {
                if !a.is_finite() {
                    return Err(Error::ParamsOutOfRange(format!("linear_y coefficient {a}")));
                }
                (
                    Kind::LinearY(*a),
                    DriverMeta {
                        lipschitz: lip(a.abs(), 0.0, *a),
                        zero_at_zero: *a == 0.0,
                        y_independent: *a == 0.0,
                        z_independent: true,
                        dominating_r: None,
                    },
                )
            }
            DriverSpec::RNorm { r } | DriverSpec::NegRNorm { r } => {
                let r = RMatrix::new(r.clone(), space, basis)?;
                let sign = if matches!(spec, DriverSpec::RNorm { .. }) {
                    1.0
                } else {
                    -1.0
                };
                let meta = DriverMeta {
                    lipschitz: lip(0.0, r.sup_d_norm(), 0.0),
                    zero_at_zero: true,
                    y_independent: true,
                    z_independent: r.sup_d_norm() == 0.0,
                    dominating_r: Some(r.clone()),
                };
                (Kind::Norm { r, sign }, meta)
            }
            DriverSpec::LinearZ { b } => {
                if b.len() != basis.dim() {
                    return Err(Error::DimensionMismatch {
                        expected: basis.dim(),
                        got: b.len(),
                    });
                }
                if b.iter().any(|x| !x.is_finite()) {
                    return Err(Error::ParamsOutOfRange(
                        "linear_z coefficient is not finite".into(),
                    ));
                }
                let norm = b.iter().map(|x| x * x).sum::<f64>().sqrt();
                let meta = DriverMeta {
                    lipschitz: lip(0.0, norm, 0.0),
                    zero_at_zero: true,
                    y_independent: true,
                    z_independent: norm == 0.0,
                    dominating_r: Some(RMatrix::new(RSpec::Scalar(norm), space, basis)?),
                };
                (Kind::LinearZ(b.clone()), meta)
            }
            DriverSpec::Table { values } => {
                if values.len() != space.steps() {
                    return Err(Error::DimensionMismatch {
                        expected: space.steps(),
                        got: values.len(),
                    });
                }
                for (k, row) in values.iter().enumerate() {
                    if row.len() != space.n_nodes(k) {
                        return Err(Error::DimensionMismatch {
                            expected: space.n_nodes(k),
                            got: row.len(),
                        });
                    }
                    if row.iter().any(|x| !x.is_finite()) {
                        return Err(Error::ParamsOutOfRange(format!(
                            "table value at step {} is not finite",
                            k + 1
                        )));
                    }
                }
                let zero = values.iter().flatten().all(|v| *v == 0.0);
                (
                    Kind::Table(values.clone()),
                    DriverMeta {
                        lipschitz: lip(0.0, 0.0, 0.0),
                        zero_at_zero: zero,
                        y_independent: true,
                        z_independent: true,
                        dominating_r: None,
                    },
                )
            }
        };
        Ok(Self { spec, kind, meta })
    }

    pub fn spec(&self) -> &DriverSpec {
        &self.spec
    }
}

impl Driver for CatalogDriver {
    fn eval(&self, ctx: &AtomCtx<'_>, y: f64, z: &[f64]) -> f64 {
        match &self.kind {
            Kind::Zero => 0.0,
            Kind::LinearY(a) => a * y,
            Kind::Norm { r, sign } => sign * r.image_norm(ctx.phi, z),
            Kind::LinearZ(b) => b
                .iter()
                .zip(z)
                .zip(ctx.phi)
                .map(|((b, z), p)| b * p.sqrt() * z)
                .sum(),
            Kind::Table(values) => values[ctx.step - 1][ctx.node],
        }
    }

    fn meta(&self) -> &DriverMeta {
        &self.meta
    }

    fn label(&self) -> String {
        match &self.spec {
            DriverSpec::Zero => "zero".into(),
            DriverSpec::LinearY { a } => format!("linear_y(a={a})"),
            DriverSpec::RNorm { r } => {
                format!("r_norm(r={})", serde_json::to_string(r).unwrap_or_default())
            }
            DriverSpec::NegRNorm { r } => format!(
                "neg_r_norm(r={})",
                serde_json::to_string(r).unwrap_or_default()
            ),
            DriverSpec::LinearZ { b } => format!("linear_z(b={b:?})"),
            DriverSpec::Table { .. } => "table".into(),
        }
    }
}

/// Outcome of [`check_standard`].
#[derive(Debug, Clone, PartialEq, Serialize)]
#[serde(tag = "class", rename_all = "snake_case")]
pub enum Classification {
    Standard,
    /// Steps where `c_t Δmu² >= 1` but the jump-monotonicity condition holds.
    ScalarExtensionOk {
        steps: Vec<usize>,
    },
    /// Steps where neither condition holds.
    Unsupported {
        steps: Vec<usize>,
    },
}

impl Classification {
    pub fn is_supported(&self) -> bool {
        !matches!(self, Classification::Unsupported { .. })
    }
}

/// Classify a driver by its declared Lipschitz data.
pub fn check_standard(driver: &dyn Driver, space: &FilteredSpace) -> Result<Classification> {
    let lip = driver.meta().lipschitz.ok_or(Error::MetadataMissing)?;
    let c_t = lip.firm_c_t();
    let c = lip.plain_c();
    let mut extension = Vec::new();
    let mut unsupported = Vec::new();
    for k in 1..=space.steps() {
        let dmu = space.dmu(k);
        if c_t * dmu * dmu < 1.0 {
            continue;
        }
        if lip.max_y_slope * dmu <= 1.0 - 1.0 / (1.0 + c) {
            extension.push(k);
        } else {
            unsupported.push(k);
        }
    }
    Ok(if !unsupported.is_empty() {
        Classification::Unsupported { steps: unsupported }
    } else if !extension.is_empty() {
        Classification::ScalarExtensionOk { steps: extension }
    } else {
        Classification::Standard
    })
}

/// Worst observed ratios against the declared Lipschitz data.
#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct LipschitzAudit {
    pub samples: usize,
    /// `max |Δ_y g| / |Δy|`
    pub worst_y: f64,
    /// `max |Δ_z g| / ||Δz||_M`
    pub worst_z: f64,
    /// `max Δ_y g / Δy`
    pub worst_slope: f64,
    pub violations: usize,
}

/// Sample `(y, y', z, z')` on every atom and compare with the declared bounds.
pub fn audit_lipschitz(
    driver: &dyn Driver,
    space: &FilteredSpace,
    basis: &MartingaleBasis,
    samples_per_atom: usize,
    seed: u64,
) -> Result<LipschitzAudit> {
    let lip = driver.meta().lipschitz.ok_or(Error::MetadataMissing)?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut audit = LipschitzAudit {
        samples: 0,
        worst_y: 0.0,
        worst_z: 0.0,
        worst_slope: f64::NEG_INFINITY,
        violations: 0,
    };
    let tol = 1e-9;
    for k in 1..=space.steps() {
        for a in 0..space.n_nodes(k - 1) {
            let ctx = AtomCtx::new(basis, k, a);
            for _ in 0..samples_per_atom {
                let y: f64 = rng.gen_range(-5.0..5.0);
                let y2: f64 = rng.gen_range(-5.0..5.0);
                let z: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let z2: Vec<f64> = (0..basis.dim()).map(|_| rng.gen_range(-3.0..3.0)).collect();
                let g = driver.eval(&ctx, y, &z);
                let gy = driver.eval(&ctx, y2, &z);
                let gz = driver.eval(&ctx, y, &z2);
                audit.samples += 1;
                if y != y2 {
                    let ratio = (g - gy) / (y - y2);
                    audit.worst_y = audit.worst_y.max(ratio.abs());
                    audit.worst_slope = audit.worst_slope.max(ratio);
                    if ratio.abs() > lip.lip_y + tol || ratio > lip.max_y_slope + tol {
                        audit.violations += 1;
                    }
                }
                let dz: Vec<f64> = z.iter().zip(&z2).map(|(a, b)| a - b).collect();
                let nz = ctx.m_norm(&dz);
                let diff = (g - gz).abs();
                if nz > 0.0 {
                    audit.worst_z = audit.worst_z.max(diff / nz);
                }
                if diff > lip.lip_z * nz + tol * (1.0 + g.abs()) {
                    audit.violations += 1;
                }
            }
        }
    }
    Ok(audit)
}

//! Scenario files: a space, named payoffs, drivers, oracles, processes and
//! `r` matrices, validated up front so every reference resolves.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::bsde::{CatalogDriver, DriverSpec};
use crate::error::{Error, Result};
use crate::gexp::{
    er_oracle, ClassicalOracle, ExpectationOracle, ExternalOracle, GOracle, RMatrix, RSpec,
    ScenarioSet, Sign, StaticWorstCase, TableOracle,
};
use crate::martrep::{davis_varaiya_basis, MartingaleBasis};
use crate::probspace::{build_space, AdaptedProcess, FilteredSpace, RandomVariable, SpaceSpec};

pub const SCHEMA_VERSION: u32 = 1;

fn invalid(pointer: impl Into<String>, detail: impl Into<String>) -> Error {
    Error::ScenarioInvalid {
        pointer: pointer.into(),
        detail: detail.into(),
    }
}

/// A payoff: terminal values, or values at an explicit level.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum PayoffSpec {
    Terminal(Vec<f64>),
    AtLevel { level: usize, values: Vec<f64> },
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SignSpec {
    Plus,
    Minus,
}

/// Either inline measures or a JSON file holding `{"measures": [...]}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum MeasureSource {
    Inline { measures: Vec<Vec<f64>> },
    File { file: PathBuf },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OracleSpec {
    Classical,
    GExpectation {
        driver: String,
    },
    Er {
        r: RSpec,
        sign: SignSpec,
    },
    Table(MeasureSource),
    StaticWorstCase(MeasureSource),
    External {
        program: String,
        #[serde(default)]
        args: Vec<String>,
    },
}

/// Command parameters; command-line flags take precedence.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Params {
    pub tol: Option<f64>,
    pub seed: Option<u64>,
    pub samples: Option<usize>,
    pub schedule: Option<Vec<f64>>,
    pub level: Option<usize>,
    pub eps: Option<f64>,
    pub alpha: Option<f64>,
    pub beta: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    pub schema: u32,
    pub space: SpaceSpec,
    #[serde(default)]
    pub payoffs: BTreeMap<String, PayoffSpec>,
    #[serde(default)]
    pub drivers: BTreeMap<String, DriverSpec>,
    #[serde(default)]
    pub oracles: BTreeMap<String, OracleSpec>,
    /// One vector per level, starting at level 0.
    #[serde(default)]
    pub processes: BTreeMap<String, Vec<Vec<f64>>>,
    #[serde(default)]
    pub r: BTreeMap<String, RSpec>,
    #[serde(default)]
    pub params: Params,
}

/// A validated scenario with its space and basis built.
pub struct LoadedScenario {
    pub scenario: Scenario,
    pub space: FilteredSpace,
    pub basis: MartingaleBasis,
    base_dir: PathBuf,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Self> {
        let value: serde_json::Value =
            serde_json::from_str(text).map_err(|e| invalid("", format!("not valid JSON: {e}")))?;
        match value.get("schema") {
            Some(serde_json::Value::Number(n)) if n.as_u64() == Some(u64::from(SCHEMA_VERSION)) => {
            }
            Some(other) => {
                return Err(invalid(
                    "/schema",
                    format!("unsupported schema {other}, expected {SCHEMA_VERSION}"),
                ))
            }
            None => return Err(invalid("/schema", "missing schema field")),
        }
        if let Some(obj) = value.as_object() {
            for (field, v) in obj {
                let pointer = format!("/{field}");
                let probe = match field.as_str() {
                    "space" => serde_json::from_value::<SpaceSpec>(v.clone()).err(),
                    "params" => serde_json::from_value::<Params>(v.clone()).err(),
                    "payoffs" => entry_errors::<PayoffSpec>(v, &pointer)?,
                    "drivers" => entry_errors::<DriverSpec>(v, &pointer)?,
                    "oracles" => entry_errors::<OracleSpec>(v, &pointer)?,
                    "processes" => entry_errors::<Vec<Vec<f64>>>(v, &pointer)?,
                    "r" => entry_errors::<RSpec>(v, &pointer)?,
                    "schema" => None,
                    _ => return Err(invalid(pointer, "unknown field")),
                };
                if let Some(e) = probe {
                    return Err(invalid(pointer, e.to_string()));
                }
            }
        }
        serde_json::from_value(value).map_err(|e| invalid("", e.to_string()))
    }

    pub fn load(path: &Path) -> Result<LoadedScenario> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| invalid("", format!("cannot read {}: {e}", path.display())))?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Self::from_json(&text)?.validate(base)
    }

    /// Builds the space and checks every entry and reference.
    pub fn validate(self, base_dir: PathBuf) -> Result<LoadedScenario> {
        let space = build_space(&self.space).map_err(|e| invalid("/space", e.to_string()))?;
        let basis = davis_varaiya_basis(&space);
        let loaded = LoadedScenario {
            scenario: self,
            space,
            basis,
            base_dir,
        };
        let s = &loaded.scenario;
        for name in s.payoffs.keys() {
            loaded.payoff(name)?;
        }
        for name in s.processes.keys() {
            loaded.process(name)?;
        }
        for name in s.drivers.keys() {
            loaded.driver(name)?;
        }
        for name in s.r.keys() {
            loaded.r_matrix(name)?;
        }
        for (name, spec) in &s.oracles {
            let pointer = format!("/oracles/{name}");
            match spec {
                OracleSpec::GExpectation { driver } if !s.drivers.contains_key(driver) => {
                    return Err(invalid(
                        format!("{pointer}/g_expectation/driver"),
                        format!("dangling driver reference {driver:?}"),
                    ));
                }
                OracleSpec::Er { r, .. } => {
                    RMatrix::new(r.clone(), &loaded.space, &loaded.basis)
                        .map_err(|e| invalid(format!("{pointer}/er/r"), e.to_string()))?;
                }
                OracleSpec::Table(src) | OracleSpec::StaticWorstCase(src) => {
                    let set = loaded.measures(src, &pointer)?;
                    TableOracle::new(&loaded.space, &set)
                        .map_err(|e| invalid(pointer.clone(), e.to_string()))?;
                }
                _ => {}
            }
        }
        Ok(loaded)
    }
}

fn entry_errors<T: serde::de::DeserializeOwned>(
    v: &serde_json::Value,
    pointer: &str,
) -> Result<Option<serde_json::Error>> {
    let obj = v
        .as_object()
        .ok_or_else(|| invalid(pointer, "expected an object of named entries"))?;
    for (name, entry) in obj {
        if let Err(e) = serde_json::from_value::<T>(entry.clone()) {
            return Err(invalid(format!("{pointer}/{name}"), e.to_string()));
        }
    }
    Ok(None)
}

impl LoadedScenario {
    pub fn payoff(&self, name: &str) -> Result<RandomVariable> {
        let pointer = format!("/payoffs/{name}");
        let spec = self
            .scenario
            .payoffs
            .get(name)
            .ok_or_else(|| invalid(&pointer, format!("no payoff named {name:?}")))?;
        let rv = match spec {
            PayoffSpec::Terminal(values) => RandomVariable::new(self.space.steps(), values.clone()),
            PayoffSpec::AtLevel { level, values } => RandomVariable::new(*level, values.clone()),
        };
        self.space
            .check_rv(&rv)
            .map_err(|e| invalid(pointer, e.to_string()))?;
        Ok(rv)
    }

    pub fn process(&self, name: &str) -> Result<AdaptedProcess> {
        let pointer = format!("/processes/{name}");
        let values = self
            .scenario
            .processes
            .get(name)
            .ok_or_else(|| invalid(&pointer, format!("no process named {name:?}")))?;
        if values.is_empty() || values.len() > self.space.steps() + 1 {
            return Err(invalid(
                pointer,
                format!("expected 1..={} levels", self.space.steps() + 1),
            ));
        }
        let levels = values
            .iter()
            .enumerate()
            .map(|(k, v)| {
                let rv = RandomVariable::new(k, v.clone());
                self.space
                    .check_rv(&rv)
                    .map(|_| rv)
                    .map_err(|e| invalid(format!("{pointer}/{k}"), e.to_string()))
            })
            .collect::<Result<Vec<_>>>()?;
        Ok(AdaptedProcess { levels })
    }

    pub fn driver(&self, name: &str) -> Result<CatalogDriver> {
        let pointer = format!("/drivers/{name}");
        let spec = self
            .scenario
            .drivers
            .get(name)
            .ok_or_else(|| invalid(&pointer, format!("no driver named {name:?}")))?;
        CatalogDriver::new(spec.clone(), &self.space, &self.basis)
            .map_err(|e| invalid(pointer, e.to_string()))
    }

    /// A named `r`, or an inline JSON literal such as `0.5` or `[0.5, 0.2]`.
    pub fn r_matrix(&self, name_or_literal: &str) -> Result<RMatrix> {
        let pointer = format!("/r/{name_or_literal}");
        let spec = match self.scenario.r.get(name_or_literal) {
            Some(spec) => spec.clone(),
            None => serde_json::from_str::<RSpec>(name_or_literal).map_err(|_| {
                invalid(
                    &pointer,
                    format!("no r named {name_or_literal:?} and not an r literal"),
                )
            })?,
        };
        RMatrix::new(spec, &self.space, &self.basis).map_err(|e| invalid(pointer, e.to_string()))
    }

    fn measures(&self, src: &MeasureSource, pointer: &str) -> Result<ScenarioSet> {
        match src {
            MeasureSource::Inline { measures } => Ok(ScenarioSet {
                measures: measures.clone(),
            }),
            MeasureSource::File { file } => {
                let path = self.base_dir.join(file);
                let text = std::fs::read_to_string(&path).map_err(|e| {
                    invalid(
                        format!("{pointer}/file"),
                        format!("cannot read {}: {e}", path.display()),
                    )
                })?;
                serde_json::from_str(&text)
                    .map_err(|e| invalid(format!("{pointer}/file"), e.to_string()))
            }
        }
    }

    pub fn oracle(&self, name: &str) -> Result<Box<dyn ExpectationOracle + '_>> {
        let pointer = format!("/oracles/{name}");
        let spec = self
            .scenario
            .oracles
            .get(name)
            .ok_or_else(|| invalid(&pointer, format!("no oracle named {name:?}")))?;
        Ok(match spec {
            OracleSpec::Classical => Box::new(ClassicalOracle::new(&self.space)),
            OracleSpec::GExpectation { driver } => {
                let d = self.driver(driver)?;
                Box::new(GOracle::new(&self.space, &self.basis, Box::new(d))?)
            }
            OracleSpec::Er { r, sign } => {
                let r = RMatrix::new(r.clone(), &self.space, &self.basis)?;
                let sign = match sign {
                    SignSpec::Plus => Sign::Plus,
                    SignSpec::Minus => Sign::Minus,
                };
                Box::new(er_oracle(&r, sign, &self.space, &self.basis)?)
            }
            OracleSpec::Table(src) => Box::new(TableOracle::new(
                &self.space,
                &self.measures(src, &pointer)?,
            )?),
            OracleSpec::StaticWorstCase(src) => Box::new(StaticWorstCase::new(
                &self.space,
                &self.measures(src, &pointer)?,
            )?),
            OracleSpec::External { program, args } => {
                Box::new(ExternalOracle::spawn(&self.space, program, args)?)
            }
        })
    }
}

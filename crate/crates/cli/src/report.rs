//! Report structure and its JSON and text renderings.

use std::fmt::Write as _;

use serde::Serialize;
use serde_json::Value;

#[derive(Debug, Clone, Copy, PartialEq, Eq, clap::ValueEnum)]
pub enum Format {
    Json,
    Text,
}

#[derive(Debug, Clone, Serialize)]
pub struct Check {
    pub name: String,
    pub asserted: bool,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct Report {
    pub schema: u32,
    pub command: String,
    pub seed: Option<u64>,
    pub passed: bool,
    pub checks: Vec<Check>,
    pub data: Value,
    /// Omitted from text output so that it stays byte-stable.
    pub wall_clock_ms: u64,
}

impl Report {
    pub fn new(command: &str, seed: Option<u64>) -> Self {
        Self {
            schema: 1,
            command: command.to_string(),
            seed,
            passed: true,
            checks: Vec::new(),
            data: Value::Object(Default::default()),
            wall_clock_ms: 0,
        }
    }

    pub fn check(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.push(name, true, passed, detail.into());
    }

    pub fn note(&mut self, name: &str, passed: bool, detail: impl Into<String>) {
        self.push(name, false, passed, detail.into());
    }

    fn push(&mut self, name: &str, asserted: bool, passed: bool, detail: String) {
        if asserted && !passed {
            self.passed = false;
        }
        self.checks.push(Check {
            name: name.to_string(),
            asserted,
            passed,
            detail,
        });
    }

    pub fn set(&mut self, key: &str, value: impl Serialize) {
        let v = serde_json::to_value(value).unwrap_or(Value::Null);
        if let Value::Object(map) = &mut self.data {
            map.insert(key.to_string(), v);
        }
    }

    pub fn render(&self, format: Format) -> String {
        match format {
            Format::Json => serde_json::to_string_pretty(self).expect("report serializes") + "\n",
            Format::Text => self.render_text(),
        }
    }

    fn render_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(out, "schema: {}", self.schema);
        let _ = writeln!(out, "command: {}", self.command);
        if let Some(seed) = self.seed {
            let _ = writeln!(out, "seed: {seed}");
        }
        let _ = writeln!(out, "result: {}", if self.passed { "PASS" } else { "FAIL" });
        for c in &self.checks {
            let verdict = match (c.passed, c.asserted) {
                (true, _) => "PASS",
                (false, true) => "FAIL",
                (false, false) => "INFO",
            };
            let _ = writeln!(out, "check {}: {verdict} {}", c.name, c.detail);
        }
        flatten(&mut out, "data", &self.data);
        out
    }
}

fn scalar(v: &Value) -> Option<String> {
    match v {
        Value::Null => Some("null".into()),
        Value::Bool(b) => Some(b.to_string()),
        Value::Number(n) => Some(n.to_string()),
        Value::String(s) => Some(s.clone()),
        _ => None,
    }
}

fn flatten(out: &mut String, prefix: &str, v: &Value) {
    if let Some(s) = scalar(v) {
        let _ = writeln!(out, "{prefix} = {s}");
        return;
    }
    match v {
        Value::Array(items) if items.iter().all(|i| scalar(i).is_some()) => {
            let parts: Vec<String> = items.iter().filter_map(scalar).collect();
            let _ = writeln!(out, "{prefix} = [{}]", parts.join(", "));
        }
        Value::Array(items) => {
            for (i, item) in items.iter().enumerate() {
                flatten(out, &format!("{prefix}.{i}"), item);
            }
        }
        Value::Object(map) => {
            for (k, item) in map {
                flatten(out, &format!("{prefix}.{k}"), item);
            }
        }
        _ => {}
    }
}

//! Run reports: check records, stage log, artifacts and their files.

use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::stats::Summary;

use super::config::ExperimentConfig;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize)]
#[serde(rename_all = "snake_case")]
pub enum Rule {
    /// `|value - expected| <= tolerance`.
    Within,
    /// `value <= expected`.
    AtMost,
    /// `value >= expected`.
    AtLeast,
    /// `value == expected` bit for bit.
    Exact,
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct Check {
    pub name: String,
    pub value: f64,
    pub expected: f64,
    pub tolerance: f64,
    pub rule: Rule,
    /// Standard error of `value`, absent for exact quantities.
    pub std_error: Option<f64>,
    pub exact: bool,
    pub pass: bool,
}

impl Check {
    fn new(
        name: impl Into<String>,
        value: f64,
        expected: f64,
        tolerance: f64,
        rule: Rule,
        std_error: Option<f64>,
    ) -> Self {
        let pass = match rule {
            Rule::Within => (value - expected).abs() <= tolerance,
            Rule::AtMost => value <= expected,
            Rule::AtLeast => value >= expected,
            Rule::Exact => value == expected,
        };
        Self {
            name: name.into(),
            value,
            expected,
            tolerance,
            rule,
            exact: std_error.is_none(),
            std_error,
            pass,
        }
    }

    /// `|estimate - expected| <= k SE`.
    pub fn within_se(name: impl Into<String>, estimate: &Summary, expected: f64, k: f64) -> Self {
        Self::new(
            name,
            estimate.mean,
            expected,
            k * estimate.std_error,
            Rule::Within,
            Some(estimate.std_error),
        )
    }

    /// `|value - expected| <= tolerance` with an explicit tolerance.
    pub fn within(name: impl Into<String>, value: f64, expected: f64, tolerance: f64, std_error: Option<f64>) -> Self {
        Self::new(name, value, expected, tolerance, Rule::Within, std_error)
    }

    pub fn at_most(name: impl Into<String>, value: f64, bound: f64, std_error: Option<f64>) -> Self {
        Self::new(name, value, bound, 0.0, Rule::AtMost, std_error)
    }

    pub fn at_least(name: impl Into<String>, value: f64, bound: f64, std_error: Option<f64>) -> Self {
        Self::new(name, value, bound, 0.0, Rule::AtLeast, std_error)
    }

    pub fn exact(name: impl Into<String>, value: f64, expected: f64) -> Self {
        Self::new(name, value, expected, 0.0, Rule::Exact, None)
    }

    pub fn holds(name: impl Into<String>, condition: bool) -> Self {
        Self::exact(name, if condition { 1.0 } else { 0.0 }, 1.0)
    }
}

/// A pipeline stage and the identity of the result it exercises.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct StageRecord {
    pub stage: String,
    pub anchor: String,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Artifact {
    /// Relative to the output directory.
    pub path: String,
    pub bytes: Vec<u8>,
}

#[derive(Clone, Debug, Serialize)]
pub struct RunReport {
    pub kind: String,
    pub config: ExperimentConfig,
    pub stages: Vec<StageRecord>,
    pub checks: Vec<Check>,
    /// Headline numbers that are not checks.
    pub values: Vec<(String, f64)>,
    pub artifacts: Vec<String>,
    pub pass: bool,
    #[serde(skip)]
    pub files: Vec<Artifact>,
    #[serde(skip)]
    pub wall_clock_seconds: f64,
}

impl RunReport {
    pub fn new(config: ExperimentConfig) -> Self {
        Self {
            kind: config.kind.name().to_string(),
            config,
            stages: Vec::new(),
            checks: Vec::new(),
            values: Vec::new(),
            artifacts: Vec::new(),
            pass: true,
            files: Vec::new(),
            wall_clock_seconds: 0.0,
        }
    }

    pub fn stage(&mut self, stage: impl Into<String>, anchor: impl Into<String>) {
        self.stages.push(StageRecord {
            stage: stage.into(),
            anchor: anchor.into(),
        });
    }

    pub fn check(&mut self, check: Check) {
        self.pass &= check.pass;
        self.checks.push(check);
    }

    pub fn value(&mut self, name: impl Into<String>, v: f64) {
        self.values.push((name.into(), v));
    }

    pub fn artifact(&mut self, path: impl Into<String>, bytes: Vec<u8>) {
        let path = path.into();
        self.artifacts.push(path.clone());
        self.files.push(Artifact { path, bytes });
    }

    pub fn failures(&self) -> impl Iterator<Item = &Check> {
        self.checks.iter().filter(|c| !c.pass)
    }

    /// Summary JSON; excludes the wall-clock so reruns compare byte for byte.
    pub fn summary_json(&self) -> Result<String> {
        serde_json::to_string_pretty(self).map_err(|e| Error::Format(e.to_string()))
    }

    /// Human-readable table with one row per check, in insertion order.
    pub fn table(&self) -> String {
        let width = self.checks.iter().map(|c| c.name.len()).max().unwrap_or(5).max(5);
        let mut out = String::new();
        let _ = writeln!(
            out,
            "experiment: {}  seed: {}  paths: {}",
            self.kind, self.config.seed, self.config.paths
        );
        let _ = writeln!(out, "wall clock: {:.2} s", self.wall_clock_seconds);
        for s in &self.stages {
            let _ = writeln!(out, "stage: {} [{}]", s.stage, s.anchor);
        }
        let _ = writeln!(
            out,
            "{:<width$}  {:>14}  {:>14}  {:>12}  {:>12}  {:<8}  result",
            "check", "value", "expected", "tolerance", "std_error", "rule"
        );
        for c in &self.checks {
            let se = c.std_error.map_or_else(|| "exact".to_string(), |s| format!("{s:.4e}"));
            let _ = writeln!(
                out,
                "{:<width$}  {:>14.6e}  {:>14.6e}  {:>12.4e}  {:>12}  {:<8}  {}",
                c.name,
                c.value,
                c.expected,
                c.tolerance,
                se,
                format!("{:?}", c.rule).to_lowercase(),
                if c.pass { "PASS" } else { "FAIL" }
            );
        }
        for (k, v) in &self.values {
            let _ = writeln!(out, "value: {k} = {v}");
        }
        let _ = writeln!(out, "overall: {}", if self.pass { "PASS" } else { "FAIL" });
        out
    }

    /// Exit status: 0 when every check passes, 1 otherwise.
    pub fn exit_code(&self) -> i32 {
        if self.pass {
            0
        } else {
            1
        }
    }
}

/// Writes `summary.json`, `report.txt` and the artifacts under `dir`.
pub fn write_report(report: &RunReport, dir: &Path) -> Result<Vec<PathBuf>> {
    fs::create_dir_all(dir)?;
    let mut written = Vec::with_capacity(report.files.len() + 2);
    let summary = dir.join("summary.json");
    fs::write(&summary, report.summary_json()?)?;
    written.push(summary);
    let table = dir.join("report.txt");
    fs::write(&table, report.table())?;
    written.push(table);
    for a in &report.files {
        let path = dir.join(&a.path);
        if let Some(parent) = path.parent() {
            fs::create_dir_all(parent)?;
        }
        fs::write(&path, &a.bytes)?;
        written.push(path);
    }
    Ok(written)
}

//! Experiment configuration: a TOML document with dotted keys and strict
//! unknown-key rejection.

use std::fmt;
use std::path::PathBuf;

use serde::{Deserialize, Serialize};

use crate::credit::{BenchmarkSettings, CreditMarketSpec};
use crate::error::{Error, Result};
use crate::max_principle::OptimizerConfig;
use crate::noise::NoiseModel;
use crate::regression::BasisSpec;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ExperimentKind {
    ValidateNoise,
    DissectCheck,
    DerivativeOracle,
    Duality,
    Representation,
    AdjointCheck,
    Criticality,
    Optimize,
    CreditBenchmark,
}

impl ExperimentKind {
    pub const ALL: [ExperimentKind; 9] = [
        ExperimentKind::ValidateNoise,
        ExperimentKind::DissectCheck,
        ExperimentKind::DerivativeOracle,
        ExperimentKind::Duality,
        ExperimentKind::Representation,
        ExperimentKind::AdjointCheck,
        ExperimentKind::Criticality,
        ExperimentKind::Optimize,
        ExperimentKind::CreditBenchmark,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            ExperimentKind::ValidateNoise => "validate-noise",
            ExperimentKind::DissectCheck => "dissect-check",
            ExperimentKind::DerivativeOracle => "derivative-oracle",
            ExperimentKind::Duality => "duality",
            ExperimentKind::Representation => "representation",
            ExperimentKind::AdjointCheck => "adjoint-check",
            ExperimentKind::Criticality => "criticality",
            ExperimentKind::Optimize => "optimize",
            ExperimentKind::CreditBenchmark => "credit-benchmark",
        }
    }

    pub fn parse(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|k| k.name() == name)
            .ok_or_else(|| Error::Config(format!("unknown experiment kind `{name}`")))
    }
}

impl fmt::Display for ExperimentKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct GridSpec {
    pub horizon: f64,
    pub steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        Self {
            horizon: 1.0,
            steps: 16,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct DissectingSpec {
    pub level: usize,
    /// Levels compared by the representation study; empty means `[level]`.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub levels: Vec<usize>,
}

impl Default for DissectingSpec {
    fn default() -> Self {
        Self {
            level: 4,
            levels: Vec::new(),
        }
    }
}

/// Random variables whose derivative is estimated.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum TargetSpec {
    /// `mu((0,T] x {mark})`.
    TerminalNoise {
        #[serde(default)]
        mark: usize,
    },
    TerminalNoiseSquared {
        #[serde(default)]
        mark: usize,
    },
    /// Raw count `H_T` of a counting model.
    TerminalCount {
        #[serde(default)]
        mark: usize,
    },
    TerminalCountSquared {
        #[serde(default)]
        mark: usize,
    },
    /// `mu((t_start, t_end] x {mark})` in step indices.
    CellNoise {
        start: usize,
        end: usize,
        #[serde(default)]
        mark: usize,
    },
    Constant {
        value: f64,
    },
    /// Standard normal drawn from a stream unrelated to the noise.
    Independent,
}

impl TargetSpec {
    pub fn mark(&self) -> Option<usize> {
        match self {
            TargetSpec::TerminalNoise { mark }
            | TargetSpec::TerminalNoiseSquared { mark }
            | TargetSpec::TerminalCount { mark }
            | TargetSpec::TerminalCountSquared { mark }
            | TargetSpec::CellNoise { mark, .. } => Some(*mark),
            TargetSpec::Constant { .. } | TargetSpec::Independent => None,
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum IntegrandSpec {
    /// `kappa = 1`.
    #[default]
    One,
    /// `kappa(t) = t`.
    Time,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct StudySpec {
    /// Independent repetitions with derived seeds.
    pub replicates: usize,
    /// Path counts for the convergence-rate study; empty disables it.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub paths: Vec<usize>,
}

impl Default for StudySpec {
    fn default() -> Self {
        Self {
            replicates: 1,
            paths: Vec::new(),
        }
    }
}

/// Control problems used by the adjoint, criticality and optimizer runs.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ProblemSpec {
    /// `dX = u dt + noise dW`, `g(x) = -x^2`, constant control seen through
    /// the trivial filtration.
    QuadraticToy {
        #[serde(default = "one")]
        noise: f64,
        #[serde(default)]
        control: f64,
        #[serde(default = "toy_bound")]
        bound: f64,
    },
    /// The credit market of `market` with a constant proportion.
    Credit {
        #[serde(default = "half")]
        proportion: f64,
    },
}

fn one() -> f64 {
    1.0
}

fn half() -> f64 {
    0.5
}

fn toy_bound() -> f64 {
    4.0
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ConsistencySpec {
    /// Perturbation anchors in steps; empty means a quarter and half of the grid.
    #[serde(skip_serializing_if = "Vec::is_empty")]
    pub anchors: Vec<usize>,
    pub h_steps: Vec<usize>,
}

impl Default for ConsistencySpec {
    fn default() -> Self {
        Self {
            anchors: Vec::new(),
            h_steps: vec![1, 2],
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OutputSpec {
    #[serde(skip_serializing_if = "Option::is_none")]
    pub dir: Option<PathBuf>,
    /// Also write the main ensemble in the columnar binary format.
    pub ensemble: bool,
    /// Per-path CSV exports are skipped above this many paths.
    pub csv_paths_limit: usize,
}

impl Default for OutputSpec {
    fn default() -> Self {
        Self {
            dir: None,
            ensemble: false,
            csv_paths_limit: 2000,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExperimentConfig {
    pub kind: ExperimentKind,
    pub seed: u64,
    #[serde(default = "default_paths")]
    pub paths: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub threads: Option<usize>,
    /// Fit derivative fields on an independent ensemble.
    #[serde(default = "yes")]
    pub independent_fit: bool,
    #[serde(default)]
    pub grid: GridSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise: Option<NoiseModel>,
    #[serde(default)]
    pub dissecting: DissectingSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub basis: Option<BasisSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub target: Option<TargetSpec>,
    #[serde(default)]
    pub integrand: IntegrandSpec,
    #[serde(default)]
    pub study: StudySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub problem: Option<ProblemSpec>,
    #[serde(default)]
    pub consistency: ConsistencySpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub optimizer: Option<OptimizerConfig>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub market: Option<CreditMarketSpec>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub benchmark: Option<BenchmarkSettings>,
    #[serde(default)]
    pub output: OutputSpec,
}

fn default_paths() -> usize {
    10_000
}

fn yes() -> bool {
    true
}

impl ExperimentConfig {
    /// A config with defaults for everything but the kind and seed.
    pub fn new(kind: ExperimentKind, seed: u64) -> Self {
        Self {
            kind,
            seed,
            paths: default_paths(),
            threads: None,
            independent_fit: true,
            grid: GridSpec::default(),
            noise: None,
            dissecting: DissectingSpec::default(),
            basis: None,
            target: None,
            integrand: IntegrandSpec::default(),
            study: StudySpec::default(),
            problem: None,
            consistency: ConsistencySpec::default(),
            optimizer: None,
            market: None,
            benchmark: None,
            output: OutputSpec::default(),
        }
    }

    pub fn to_toml(&self) -> Result<String> {
        toml::to_string(self).map_err(|e| Error::Config(e.to_string()))
    }

    /// Checks that every section the kind reads is present and in range.
    pub fn validate(&self) -> Result<()> {
        let need = |present: bool, key: &str| {
            if present {
                Ok(())
            } else {
                Err(Error::Config(format!("kind `{}` needs `{key}`", self.kind)))
            }
        };
        if self.paths < 2 {
            return Err(Error::Config("`paths` must be at least 2".into()));
        }
        if self.threads == Some(0) {
            return Err(Error::Config("`threads` must be positive".into()));
        }
        if self.study.replicates == 0 {
            return Err(Error::Config("`study.replicates` must be positive".into()));
        }
        match self.kind {
            ExperimentKind::ValidateNoise | ExperimentKind::DissectCheck => need(self.noise.is_some(), "noise")?,
            ExperimentKind::DerivativeOracle | ExperimentKind::Duality | ExperimentKind::Representation => {
                need(self.noise.is_some(), "noise")?;
                need(self.target.is_some(), "target")?;
            }
            ExperimentKind::AdjointCheck | ExperimentKind::Criticality | ExperimentKind::Optimize => {
                need(self.problem.is_some(), "problem")?;
                if matches!(self.problem, Some(ProblemSpec::Credit { .. })) {
                    need(self.market.is_some(), "market")?;
                }
                if self.kind == ExperimentKind::Optimize {
                    need(self.optimizer.is_some(), "optimizer")?;
                }
            }
            ExperimentKind::CreditBenchmark => need(self.market.is_some(), "market")?,
        }
        if let Some(o) = &self.optimizer {
            o.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(b) = &self.benchmark {
            b.optimizer.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if let Some(m) = &self.market {
            m.validate().map_err(|e| Error::Config(e.to_string()))?;
        }
        if self.consistency.h_steps.contains(&0) {
            return Err(Error::Config("`consistency.h_steps` must be positive".into()));
        }
        Ok(())
    }
}

/// Parses and validates a config. Syntax errors carry line information and
/// unknown keys are named.
pub fn parse_config(text: &str) -> Result<ExperimentConfig> {
    let cfg: ExperimentConfig = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
    cfg.validate()?;
    Ok(cfg)
}

#[cfg(test)]
mod tests {
    use super::*;

    const DUALITY: &str = r#"
kind = "duality"
seed = 42
paths = 1000
noise.kind = "compensated_poisson"
noise.intensities = [2.0]
target.kind = "terminal_count"
"#;

    #[test]
    fn minimal_duality_config() {
        let c = parse_config(DUALITY).unwrap();
        assert_eq!(c.seed, 42);
        assert_eq!(c.kind, ExperimentKind::Duality);
        assert_eq!(c.grid.steps, 16);
    }

    #[test]
    fn round_trip() {
        let mut c = parse_config(DUALITY).unwrap();
        c.optimizer = Some(OptimizerConfig::default());
        c.market = Some(CreditMarketSpec::single(0.05, 0.02));
        c.benchmark = Some(BenchmarkSettings::default());
        c.study.paths = vec![100, 400];
        let text = c.to_toml().unwrap();
        assert_eq!(parse_config(&text).unwrap(), c);
    }

    #[test]
    fn unknown_key_is_named() {
        let err = parse_config(&format!("{DUALITY}foo = 1\n")).unwrap_err().to_string();
        assert!(err.contains("foo"), "{err}");
        let err = parse_config(&format!("{DUALITY}grid.foo = 1\n"))
            .unwrap_err()
            .to_string();
        assert!(err.contains("foo"), "{err}");
    }

    #[test]
    fn seed_is_mandatory() {
        let text = DUALITY.replace("seed = 42\n", "");
        assert!(parse_config(&text).unwrap_err().to_string().contains("seed"));
    }

    #[test]
    fn kind_requirements() {
        let text = DUALITY.replace("target.kind = \"terminal_count\"\n", "");
        let err = parse_config(&text).unwrap_err();
        assert!(err.is_config() && err.to_string().contains("target"));
    }

    #[test]
    fn kind_names_round_trip() {
        for k in ExperimentKind::ALL {
            assert_eq!(ExperimentKind::parse(k.name()).unwrap(), k);
        }
        assert!(ExperimentKind::parse("nope").is_err());
    }
}

//! The experiment pipelines, one strategy object per kind.

use std::sync::Arc;

use rayon::prelude::*;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::credit::{
    analytic_log_optimum, build_credit_market, credit_basis, credit_benchmark, BenchmarkSettings, CreditMarket,
};
use crate::derivative::{
    coefficient_covariance, duality_fit_variance, duality_gap, estimate_derivative, representation_residual,
    DerivativeField, TargetVariable,
};
use crate::dissecting::{build_dissecting_system, verify_system, DissectingSystem};
use crate::error::{Error, Result, StageExt};
use crate::max_principle::{evaluate_policy, optimize_policy, simple_perturbation_check, Evaluation, Problem};
use crate::models::{quadratic_toy_cost, quadratic_toy_dynamics, LinearDynamics, PolynomialCost};
use crate::noise::{
    field_property_suite, io, isometry_check, sample_ensemble, Cell, MarkSpace, NoiseModel, PathEnsemble,
    PredictableField, TimeGrid,
};
use crate::registry::Registry;
use crate::regression::{BasisSpec, RegressionBasis};
use crate::rng::{derive_seed, PathStream};
use crate::sde::{ConstantPolicy, ControlBox, ControlPolicy, Cost, Dynamics, Filtration};
use crate::stats::{slope, Summary};

use super::config::{ExperimentConfig, ExperimentKind, IntegrandSpec, ProblemSpec, TargetSpec};
use super::report::{Check, RunReport};

/// Tolerance on the root mean square error of a unit-valued derivative field.
pub const ORACLE_RMSE: f64 = 0.05;
/// Tolerance on the relative L2 error of a non-constant derivative field.
pub const ORACLE_REL_L2: f64 = 0.10;
/// Acceptance band for Monte Carlo estimates, in standard errors.
pub const Z_BAND: f64 = 4.0;

const FIT_TAG: u64 = 0xF17;
const INDEPENDENT_TAG: u64 = 0x1D1D;
const REPLICATE_TAG: u64 = 0x5EED;
const POISSON_TWIN_TAG: u64 = 0x7171;

pub trait Experiment: Send + Sync {
    fn kind(&self) -> ExperimentKind;
    fn describe(&self) -> &'static str;
    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()>;
}

pub fn experiment_registry() -> Registry<Box<dyn Experiment>> {
    let mut reg: Registry<Box<dyn Experiment>> = Registry::new("experiment");
    let all: [Box<dyn Experiment>; 9] = [
        Box::new(ValidateNoise),
        Box::new(DissectCheck),
        Box::new(DerivativeOracle),
        Box::new(Duality),
        Box::new(Representation),
        Box::new(AdjointCheck),
        Box::new(Criticality),
        Box::new(Optimize),
        Box::new(CreditBenchmark),
    ];
    for e in all {
        reg.register(e.kind().name(), e);
    }
    reg
}

fn config_error(e: Error) -> Error {
    match e {
        Error::Config(_) => e,
        other => Error::Config(other.to_string()),
    }
}

fn grid_of(config: &ExperimentConfig) -> Result<TimeGrid> {
    TimeGrid::new(config.grid.horizon, config.grid.steps).map_err(config_error)
}

fn marks_for(model: &NoiseModel) -> Result<MarkSpace> {
    match model {
        NoiseModel::Brownian => Ok(MarkSpace::singleton()),
        NoiseModel::CompensatedPoisson { intensities } if intensities.len() == 1 => Ok(MarkSpace::singleton()),
        NoiseModel::CompensatedPoisson { intensities } => MarkSpace::numbered(intensities.len()),
        NoiseModel::DoublyStochasticPoisson { drivers } if drivers.len() == 1 => Ok(MarkSpace::singleton()),
        NoiseModel::DoublyStochasticPoisson { drivers } => MarkSpace::numbered(drivers.len()),
        NoiseModel::External { .. } => Err(Error::Config("external ensembles cannot be sampled".into())),
    }
    .map_err(config_error)
}

fn noise_of(config: &ExperimentConfig) -> Result<&NoiseModel> {
    config
        .noise
        .as_ref()
        .ok_or_else(|| Error::Config(format!("kind `{}` needs `noise`", config.kind)))
}

/// Intensity of mark `z` when it is deterministic and constant.
pub fn constant_intensity(model: &NoiseModel, z: usize) -> Option<f64> {
    match model {
        NoiseModel::Brownian => Some(1.0),
        NoiseModel::CompensatedPoisson { intensities } => intensities.get(z).copied(),
        NoiseModel::DoublyStochasticPoisson { drivers } => drivers
            .get(z)
            .filter(|d| d.volatility == 0.0 && (d.mean_reversion == 0.0 || d.initial == d.long_run))
            .map(|d| d.initial),
        NoiseModel::External { .. } => None,
    }
}

struct Ensembles {
    main: PathEnsemble,
    fit: Option<PathEnsemble>,
}

impl Ensembles {
    fn sample(config: &ExperimentConfig, model: &NoiseModel, n_paths: usize, seed: u64) -> Result<Self> {
        let grid = grid_of(config)?;
        let marks = marks_for(model)?;
        let main = sample_ensemble(model, &grid, &marks, n_paths, seed).stage("noise sampling")?;
        let fit = if config.independent_fit {
            Some(
                sample_ensemble(model, &grid, &marks, n_paths, derive_seed(seed, FIT_TAG))
                    .stage("noise sampling for the fitting ensemble")?,
            )
        } else {
            None
        };
        Ok(Self { main, fit })
    }

    fn fit(&self) -> &PathEnsemble {
        self.fit.as_ref().unwrap_or(&self.main)
    }
}

fn export_ensemble(config: &ExperimentConfig, report: &mut RunReport, ensemble: &PathEnsemble) -> Result<()> {
    if config.output.ensemble {
        let mut bytes = Vec::new();
        io::write_binary(ensemble, &mut bytes).stage("ensemble export")?;
        report.artifact("ensembles/main.bin", bytes);
    }
    Ok(())
}

fn basis_of(config: &ExperimentConfig, model: &NoiseModel, n_marks: usize) -> Result<Arc<RegressionBasis>> {
    let spec = config
        .basis
        .clone()
        .unwrap_or_else(|| BasisSpec::default_for(model, n_marks, false));
    spec.build(n_marks).map(Arc::new).map_err(config_error)
}

fn system_of(ensemble: &PathEnsemble, max_level: usize) -> Result<DissectingSystem> {
    build_dissecting_system(ensemble.grid(), ensemble.marks(), max_level).map_err(config_error)
}

fn csv_bytes<F>(f: F) -> Result<Vec<u8>>
where
    F: FnOnce(&mut Vec<u8>) -> Result<()>,
{
    let mut out = Vec::new();
    f(&mut out)?;
    Ok(out)
}

/// Per-path values of a configured target.
pub fn target_values(spec: &TargetSpec, ensemble: &PathEnsemble, seed: u64) -> Result<TargetVariable> {
    let k = ensemble.n_steps();
    if let Some(z) = spec.mark() {
        if z >= ensemble.n_marks() {
            return Err(Error::Config(format!(
                "target mark {z} outside {} mark(s)",
                ensemble.n_marks()
            )));
        }
    }
    let counting = |z: usize| {
        if ensemble.is_counting() {
            Ok(z)
        } else {
            Err(Error::Config(format!("target {spec:?} needs a counting noise")))
        }
    };
    let n = ensemble.n_paths();
    let values: Vec<f64> = match *spec {
        TargetSpec::TerminalNoise { mark } => (0..n).map(|i| ensemble.running_noise(i, k, mark)).collect(),
        TargetSpec::TerminalNoiseSquared { mark } => {
            (0..n).map(|i| ensemble.running_noise(i, k, mark).powi(2)).collect()
        }
        TargetSpec::TerminalCount { mark } => {
            let z = counting(mark)?;
            (0..n).map(|i| ensemble.running_count(i, k, z) as f64).collect()
        }
        TargetSpec::TerminalCountSquared { mark } => {
            let z = counting(mark)?;
            (0..n)
                .map(|i| (ensemble.running_count(i, k, z) as f64).powi(2))
                .collect()
        }
        TargetSpec::CellNoise { start, end, mark } => {
            let cell = Cell::single(start, end, mark).map_err(config_error)?;
            ensemble.check_cell(&cell).map_err(config_error)?;
            (0..n).map(|i| ensemble.cell_noise(i, &cell)).collect()
        }
        TargetSpec::Constant { value } => vec![value; n],
        TargetSpec::Independent => {
            let s = derive_seed(seed, INDEPENDENT_TAG);
            (0..n)
                .into_par_iter()
                .map(|i| PathStream::new(s, i).next_cell().normal())
                .collect()
        }
    };
    TargetVariable::new(values)
}

/// Closed-form derivative of a target on the cell starting at `start` with
/// mark `z`, for path `i`, when one is known for the noise model.
pub fn derivative_oracle(
    spec: &TargetSpec,
    model: &NoiseModel,
    ensemble: &PathEnsemble,
    i: usize,
    start: usize,
    z: usize,
) -> Option<f64> {
    let t = ensemble.grid().time(start);
    let horizon = ensemble.grid().horizon();
    let on = |mark: usize| if z == mark { 1.0 } else { 0.0 };
    match *spec {
        TargetSpec::TerminalNoise { mark } | TargetSpec::TerminalCount { mark } => Some(on(mark)),
        TargetSpec::TerminalNoiseSquared { mark } => {
            let third = match model {
                NoiseModel::Brownian => 0.0,
                NoiseModel::CompensatedPoisson { .. } => 1.0,
                _ => return None,
            };
            Some(on(mark) * (2.0 * ensemble.running_noise(i, start, mark) + third))
        }
        TargetSpec::TerminalCountSquared { mark } => match model {
            NoiseModel::CompensatedPoisson { intensities } => Some(
                on(mark)
                    * (2.0 * (ensemble.running_count(i, start, mark) as f64 + intensities[mark] * (horizon - t)) + 1.0),
            ),
            _ => None,
        },
        TargetSpec::CellNoise { start: a, end: b, mark } => {
            Some(on(mark) * if start >= a && start < b { 1.0 } else { 0.0 })
        }
        TargetSpec::Constant { .. } | TargetSpec::Independent => Some(0.0),
    }
}

/// Closed form of `E[xi int kappa dmu]` where available.
fn duality_expectation(
    spec: &TargetSpec,
    integrand: IntegrandSpec,
    model: &NoiseModel,
    grid: &TimeGrid,
) -> Option<f64> {
    let horizon = grid.horizon();
    match (spec, integrand) {
        (TargetSpec::Constant { .. } | TargetSpec::Independent, _) => Some(0.0),
        (TargetSpec::TerminalNoise { mark } | TargetSpec::TerminalCount { mark }, IntegrandSpec::One) => {
            constant_intensity(model, *mark).map(|l| l * horizon)
        }
        (TargetSpec::TerminalNoise { mark } | TargetSpec::TerminalCount { mark }, IntegrandSpec::Time) => {
            let dt = grid.dt();
            let left: f64 = (0..grid.n_steps()).map(|k| grid.time(k) * dt).sum();
            constant_intensity(model, *mark).map(|l| l * left)
        }
        (TargetSpec::CellNoise { start, end, mark }, IntegrandSpec::One) => {
            constant_intensity(model, *mark).map(|l| l * (end - start) as f64 * grid.dt())
        }
        _ => None,
    }
}

fn integrand_field(integrand: IntegrandSpec, ensemble: &PathEnsemble) -> PredictableField {
    match integrand {
        IntegrandSpec::One => PredictableField::constant(ensemble, 1.0),
        IntegrandSpec::Time => PredictableField::from_fn(ensemble, |obs, _| obs.time()),
    }
}

/// `E[int kappa^2 lambda dt]` for deterministic intensities, summed over marks.
fn isometry_expectation(integrand: IntegrandSpec, model: &NoiseModel, grid: &TimeGrid, n_marks: usize) -> Option<f64> {
    let dt = grid.dt();
    let time_part: f64 = match integrand {
        IntegrandSpec::One => grid.horizon(),
        IntegrandSpec::Time => (0..grid.n_steps()).map(|k| grid.time(k).powi(2) * dt).sum(),
    };
    (0..n_marks)
        .map(|z| constant_intensity(model, z))
        .sum::<Option<f64>>()
        .map(|l| l * time_part)
}

struct ValidateNoise;

impl Experiment for ValidateNoise {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::ValidateNoise
    }

    fn describe(&self) -> &'static str {
        "isometry, martingale, orthogonality and additivity checks of the noise field"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let model = noise_of(config)?;
        let grid = grid_of(config)?;
        let marks = marks_for(model)?;
        let m = marks.len();
        let mut zs_total = 0usize;
        let mut zs_within = 0usize;
        let mut additivity = true;
        let mut isometry_rows = String::from("replicate,second_moment,se,compensator,gap,gap_se\n");
        for r in 0..config.study.replicates {
            let seed = if r == 0 {
                config.seed
            } else {
                derive_seed(config.seed, REPLICATE_TAG + r as u64)
            };
            let ens = sample_ensemble(model, &grid, &marks, config.paths, seed).stage("noise sampling")?;
            if r == 0 {
                export_ensemble(config, report, &ens)?;
                report.stage("stochastic integral", "Ito isometry");
            }
            let field = integrand_field(config.integrand, &ens);
            let iso = isometry_check(&ens, &field).stage("isometry check")?;
            isometry_rows.push_str(&format!(
                "{r},{},{},{},{},{}\n",
                iso.second_moment.mean,
                iso.second_moment.std_error,
                iso.compensator.mean,
                iso.gap.mean,
                iso.gap.std_error
            ));
            if r == 0 {
                report.check(Check::within_se("isometry paired gap", &iso.gap, 0.0, Z_BAND));
                if let Some(v) = isometry_expectation(config.integrand, model, &grid, m) {
                    report.check(Check::within_se(
                        "isometry second moment vs closed form",
                        &iso.second_moment,
                        v,
                        Z_BAND,
                    ));
                }
                report.stage(
                    "martingale property of the field",
                    "zero conditional mean on future sets",
                );
                for z in 0..m {
                    let total = Summary::from_fn(ens.n_paths(), |i| ens.running_noise(i, grid.n_steps(), z));
                    report.check(Check::within_se(
                        format!("mean terminal noise, mark {z}"),
                        &total,
                        0.0,
                        Z_BAND,
                    ));
                    if ens.is_counting() {
                        if let Some(l) = constant_intensity(model, z) {
                            let h = Summary::from_fn(ens.n_paths(), |i| ens.running_count(i, grid.n_steps(), z) as f64);
                            report.check(Check::within_se(
                                format!("mean terminal count, mark {z}"),
                                &h,
                                l * grid.horizon(),
                                Z_BAND,
                            ));
                        }
                    }
                }
                report.stage("field axioms on dissecting cells", "conditionally orthogonal values");
            }
            let level = config.dissecting.level;
            let system = system_of(&ens, level)?;
            let cells = &system.level(level)?.cells;
            let props = field_property_suite(&ens, cells).stage("field property suite")?;
            let zs: Vec<f64> = props
                .martingale_z
                .iter()
                .copied()
                .chain(props.orthogonality.iter().flat_map(|c| [c.z_plain, c.z_weighted]))
                .collect();
            zs_total += zs.len();
            zs_within += zs.iter().filter(|z| z.abs() <= Z_BAND).count();
            additivity &= props.additivity_exact();
        }
        report.check(Check::at_least(
            "share of martingale and orthogonality z-scores within 4",
            zs_within as f64 / zs_total.max(1) as f64,
            0.99,
            None,
        ));
        report.value("z-scores tested", zs_total as f64);
        report.check(Check::holds("additivity exact on every split cell", additivity));
        report.artifact("artifacts/isometry.csv", isometry_rows.into_bytes());

        if let NoiseModel::DoublyStochasticPoisson { drivers } = model {
            let constants: Option<Vec<f64>> = (0..drivers.len()).map(|z| constant_intensity(model, z)).collect();
            if let Some(intensities) = constants {
                report.stage("degenerate Cox process against Poisson", "conditionally Poisson counts");
                let cox = sample_ensemble(model, &grid, &marks, config.paths, config.seed).stage("noise sampling")?;
                let twin = NoiseModel::CompensatedPoisson { intensities };
                let pois = sample_ensemble(
                    &twin,
                    &grid,
                    &marks,
                    config.paths,
                    derive_seed(config.seed, POISSON_TWIN_TAG),
                )
                .stage("noise sampling for the Poisson twin")?;
                for z in 0..m {
                    let a: Vec<u32> = (0..cox.n_paths())
                        .map(|i| cox.running_count(i, grid.n_steps(), z))
                        .collect();
                    let b: Vec<u32> = (0..pois.n_paths())
                        .map(|i| pois.running_count(i, grid.n_steps(), z))
                        .collect();
                    let p = two_sample_chi_square(&a, &b);
                    report.check(Check::at_least(
                        format!("count histogram two-sample p-value, mark {z}"),
                        p,
                        1e-3,
                        None,
                    ));
                }
            }
        }
        Ok(())
    }
}

/// p-value of the chi-square homogeneity test on two count samples, with
/// sparse upper bins pooled so that every expected count is at least 5.
pub fn two_sample_chi_square(a: &[u32], b: &[u32]) -> f64 {
    let top = a.iter().chain(b).copied().max().unwrap_or(0) as usize;
    let mut ha = vec![0.0f64; top + 1];
    let mut hb = vec![0.0f64; top + 1];
    for &v in a {
        ha[v as usize] += 1.0;
    }
    for &v in b {
        hb[v as usize] += 1.0;
    }
    let (na, nb) = (a.len() as f64, b.len() as f64);
    let total = na + nb;
    let mut bins: Vec<(f64, f64)> = Vec::new();
    let mut acc = (0.0, 0.0);
    for k in 0..=top {
        acc.0 += ha[k];
        acc.1 += hb[k];
        let pooled = acc.0 + acc.1;
        if pooled * na.min(nb) / total >= 5.0 {
            bins.push(acc);
            acc = (0.0, 0.0);
        }
    }
    if acc.0 + acc.1 > 0.0 {
        match bins.last_mut() {
            Some(last) => {
                last.0 += acc.0;
                last.1 += acc.1;
            }
            None => bins.push(acc),
        }
    }
    if bins.len() < 2 {
        return 1.0;
    }
    let mut stat = 0.0;
    for (x, y) in &bins {
        let pooled = x + y;
        let ea = pooled * na / total;
        let eb = pooled * nb / total;
        stat += (x - ea).powi(2) / ea + (y - eb).powi(2) / eb;
    }
    let dof = (bins.len() - 1) as f64;
    let dist = ChiSquared::new(dof).expect("positive degrees of freedom");
    1.0 - dist.cdf(stat)
}

struct DissectCheck;

impl Experiment for DissectCheck {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::DissectCheck
    }

    fn describe(&self) -> &'static str {
        "partition conditions of the dyadic dissecting system"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let model = noise_of(config)?;
        let grid = grid_of(config)?;
        let marks = marks_for(model)?;
        let ens = sample_ensemble(model, &grid, &marks, config.paths, config.seed).stage("noise sampling")?;
        export_ensemble(config, report, &ens)?;
        report.stage("dissecting system", "nested partitions with vanishing mesh");
        let system = system_of(&ens, config.dissecting.level)?;
        let verified = verify_system(&system, &ens).stage("partition verification")?;
        report.check(Check::holds(
            "disjoint, covering, nested, single-mark, mesh below bound",
            verified.all_exact_ok(),
        ));
        report.check(Check::holds(
            "variance maxima and bounds decrease",
            verified.variance_decreasing,
        ));
        let lambda_max = (0..marks.len())
            .map(|z| constant_intensity(model, z))
            .try_fold(0.0f64, |a, l| l.map(|l| a.max(l)));
        for l in &verified.levels {
            report.check(Check::at_most(
                format!("level {} max variance below bound", l.level),
                l.max_variance.mean,
                l.variance_bound,
                Some(l.max_variance.std_error),
            ));
            if let Some(lmax) = lambda_max {
                report.check(Check::within_se(
                    format!("level {} max variance vs lambda |time|", l.level),
                    &l.max_variance,
                    lmax * l.mesh,
                    Z_BAND,
                ));
            }
        }
        report.artifact("artifacts/dissecting.txt", system.dump(&marks).into_bytes());
        Ok(())
    }
}

/// Field values evaluated on `ensemble` together with the oracle, as
/// `(rmse, relative L2 error)`.
pub fn oracle_errors(
    field: &DerivativeField,
    values: &[f64],
    spec: &TargetSpec,
    model: &NoiseModel,
    ensemble: &PathEnsemble,
) -> Option<(f64, f64)> {
    let n_cells = field.n_cells();
    let rows: Option<Vec<(f64, f64)>> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut err = 0.0;
            let mut norm = 0.0;
            for (c, fit) in field.fits.iter().enumerate() {
                let o = derivative_oracle(spec, model, ensemble, i, fit.cell.start, fit.cell.marks[0])?;
                err += (values[i * n_cells + c] - o).powi(2);
                norm += o * o;
            }
            Some((err, norm))
        })
        .collect();
    let rows = rows?;
    let err: f64 = rows.iter().map(|r| r.0).sum();
    let norm: f64 = rows.iter().map(|r| r.1).sum();
    let count = (ensemble.n_paths() * n_cells) as f64;
    let rel = if norm > 0.0 { (err / norm).sqrt() } else { f64::NAN };
    Some(((err / count).sqrt(), rel))
}

fn uses_rmse(spec: &TargetSpec) -> bool {
    !matches!(
        spec,
        TargetSpec::TerminalNoiseSquared { .. } | TargetSpec::TerminalCountSquared { .. }
    )
}

struct DerivativeOracle;

impl Experiment for DerivativeOracle {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::DerivativeOracle
    }

    fn describe(&self) -> &'static str {
        "derivative estimates against closed-form oracles"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let model = noise_of(config)?;
        let spec = config.target.as_ref().expect("validated");
        let ens = Ensembles::sample(config, model, config.paths, config.seed)?;
        export_ensemble(config, report, &ens.main)?;
        let basis = basis_of(config, model, ens.main.n_marks())?;
        let level = config.dissecting.level;
        let system = system_of(&ens.main, level)?;
        report.stage(
            "derivative by cell-wise regression",
            "limit of conditional expectations over dissecting cells",
        );
        let fit_target = target_values(spec, ens.fit(), config.seed)?;
        let field =
            estimate_derivative(ens.fit(), None, &fit_target, &system, level, basis).stage("derivative estimation")?;
        let values = field.evaluate_on(&ens.main, None).stage("derivative evaluation")?;
        report.value("dropped cells", field.dropped().len() as f64);
        let (rmse, rel) = oracle_errors(&field, &values, spec, model, &ens.main)
            .ok_or_else(|| Error::Config(format!("no closed-form derivative for {spec:?} under {}", model.name())))?;
        report.value("rmse", rmse);
        report.value("relative L2 error", rel);
        if uses_rmse(spec) {
            report.check(Check::at_most(
                "derivative rmse against oracle",
                rmse,
                ORACLE_RMSE,
                None,
            ));
        } else {
            report.check(Check::at_most(
                "derivative relative L2 error against oracle",
                rel,
                ORACLE_REL_L2,
                None,
            ));
        }
        let again = field.evaluate_on(&ens.main, None)?;
        report.check(Check::holds(
            "field is a function of left-edge features",
            again == values,
        ));
        report.artifact(
            "artifacts/derivative_field.csv",
            csv_bytes(|w| field.write_csv(&ens.main, w))?,
        );
        Ok(())
    }
}

struct Duality;

impl Experiment for Duality {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Duality
    }

    fn describe(&self) -> &'static str {
        "duality between the stochastic integral and the derivative"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let model = noise_of(config)?;
        let spec = config.target.as_ref().expect("validated");
        report.stage("duality gap", "duality formula");
        let (record, ens, fit_var) = duality_once(config, model, spec, config.paths, config.seed, true)?;
        export_ensemble(config, report, &ens)?;
        let with_fit = |s: &Summary| Summary {
            std_error: (s.std_error.powi(2) + fit_var).sqrt(),
            ..*s
        };
        report.check(Check::within_se(
            "duality paired gap",
            &with_fit(&record.gap),
            0.0,
            Z_BAND,
        ));
        report.value("lhs", record.lhs.mean);
        report.value("lhs std error", record.lhs.std_error);
        report.value("rhs", record.rhs.mean);
        report.value("rhs std error", record.rhs.std_error);
        report.value("rhs std error from the fitted coefficients", fit_var.sqrt());
        report.value(
            "field fitted on an independent ensemble",
            if record.fresh { 1.0 } else { 0.0 },
        );
        if let Some(v) = duality_expectation(spec, config.integrand, model, ens.grid()) {
            report.check(Check::within_se("duality lhs vs closed form", &record.lhs, v, Z_BAND));
            report.check(Check::within_se(
                "duality rhs vs closed form",
                &with_fit(&record.rhs),
                v,
                Z_BAND,
            ));
        }
        let mut rows = format!(
            "paths,replicate,lhs,rhs,gap,gap_se\n{},0,{},{},{},{}\n",
            config.paths, record.lhs.mean, record.rhs.mean, record.gap.mean, record.gap.std_error
        );
        if config.study.paths.len() >= 2 {
            report.stage("duality gap convergence", "duality formula");
            let mut xs = Vec::new();
            let mut ys = Vec::new();
            for (a, &n) in config.study.paths.iter().enumerate() {
                let mut sq = 0.0;
                for r in 0..config.study.replicates {
                    let seed = derive_seed(config.seed, REPLICATE_TAG + (a * 1000 + r) as u64);
                    let (rec, _, _) = duality_once(config, model, spec, n, seed, false)?;
                    sq += rec.gap.mean.powi(2);
                    rows.push_str(&format!(
                        "{n},{},{},{},{},{}\n",
                        r + 1,
                        rec.lhs.mean,
                        rec.rhs.mean,
                        rec.gap.mean,
                        rec.gap.std_error
                    ));
                }
                let rms = (sq / config.study.replicates as f64).sqrt();
                xs.push((n as f64).ln());
                ys.push(rms.ln());
            }
            report.check(Check::within(
                "log-log slope of the rms duality gap",
                slope(&xs, &ys),
                -0.5,
                0.15,
                None,
            ));
        }
        report.artifact("artifacts/duality.csv", rows.into_bytes());
        Ok(())
    }
}

fn duality_once(
    config: &ExperimentConfig,
    model: &NoiseModel,
    spec: &TargetSpec,
    n_paths: usize,
    seed: u64,
    with_fit_variance: bool,
) -> Result<(crate::derivative::DualityRecord, PathEnsemble, f64)> {
    let ens = Ensembles::sample(config, model, n_paths, seed)?;
    let basis = basis_of(config, model, ens.main.n_marks())?;
    let level = config.dissecting.level;
    let system = system_of(&ens.main, level)?;
    let fit_target = target_values(spec, ens.fit(), seed)?;
    let field =
        estimate_derivative(ens.fit(), None, &fit_target, &system, level, basis).stage("derivative estimation")?;
    let target = target_values(spec, &ens.main, seed)?;
    let kappa = integrand_field(config.integrand, &ens.main);
    let record = duality_gap(&ens.main, None, &target, &kappa, &field).stage("duality gap")?;
    let fit_var = match (&ens.fit, with_fit_variance) {
        (Some(fit), true) => {
            let cov = coefficient_covariance(fit, None, &fit_target, &field).stage("coefficient covariance")?;
            duality_fit_variance(&ens.main, None, &kappa, &field, &cov).stage("duality gap")?
        }
        _ => 0.0,
    };
    Ok((record, ens.main, fit_var))
}

struct Representation;

impl Experiment for Representation {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Representation
    }

    fn describe(&self) -> &'static str {
        "representation residual across dissecting levels"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let model = noise_of(config)?;
        let spec = config.target.as_ref().expect("validated");
        let ens = Ensembles::sample(config, model, config.paths, config.seed)?;
        export_ensemble(config, report, &ens.main)?;
        let basis = basis_of(config, model, ens.main.n_marks())?;
        let levels = if config.dissecting.levels.is_empty() {
            vec![config.dissecting.level]
        } else {
            config.dissecting.levels.clone()
        };
        let max_level = *levels.iter().max().expect("non-empty");
        let system = system_of(&ens.main, max_level)?;
        let fit_target = target_values(spec, ens.fit(), config.seed)?;
        let target = target_values(spec, &ens.main, config.seed)?;
        report.stage("representation residual", "representation with the derivative");
        let mut variances = Vec::with_capacity(levels.len());
        let mut rows = String::from("level,xi0,target_variance,residual_variance,max_abs_z\n");
        for &level in &levels {
            let field = estimate_derivative(ens.fit(), None, &fit_target, &system, level, basis.clone())
                .stage("derivative estimation")?;
            let cov = match ens.fit {
                Some(ref fit) => {
                    Some(coefficient_covariance(fit, None, &fit_target, &field).stage("coefficient covariance")?)
                }
                None => None,
            };
            let rec = representation_residual(&ens.main, None, &target, &field, cov.as_deref())
                .stage("representation residual")?;
            let max_z = rec.orthogonality_z.iter().fold(0.0f64, |a, z| a.max(z.abs()));
            report.check(Check::at_most(
                format!("level {level} max |orthogonality z|"),
                max_z,
                Z_BAND,
                None,
            ));
            report.value(format!("level {level} residual variance"), rec.residual_variance);
            report.value(
                format!("level {level} residual to target variance"),
                rec.residual_variance / rec.target_variance,
            );
            rows.push_str(&format!(
                "{level},{},{},{},{max_z}\n",
                rec.xi0_estimate, rec.target_variance, rec.residual_variance
            ));
            variances.push(rec.residual_variance);
        }
        if variances.len() >= 2 {
            let decreasing = variances.windows(2).all(|w| w[1] < w[0]);
            report.check(Check::holds(
                "residual variance strictly decreasing in level",
                decreasing,
            ));
        }
        report.artifact("artifacts/representation.csv", rows.into_bytes());
        Ok(())
    }
}

/// A control problem assembled from the config.
#[allow(clippy::large_enum_variant)]
pub enum Setup {
    Toy {
        dynamics: LinearDynamics,
        cost: PolynomialCost,
        noise: f64,
        control: f64,
        bound: f64,
    },
    Credit {
        market: Box<CreditMarket>,
        proportion: f64,
    },
}

impl Setup {
    pub fn from_config(config: &ExperimentConfig) -> Result<Self> {
        match config.problem.as_ref().expect("validated") {
            ProblemSpec::QuadraticToy { noise, control, bound } => {
                if !(*bound > 0.0) || control.abs() >= *bound {
                    return Err(Error::Config("toy control must lie inside (-bound, bound)".into()));
                }
                Ok(Setup::Toy {
                    dynamics: quadratic_toy_dynamics(*noise),
                    cost: quadratic_toy_cost(),
                    noise: *noise,
                    control: *control,
                    bound: *bound,
                })
            }
            ProblemSpec::Credit { proportion } => {
                let market = build_credit_market(config.market.clone().expect("validated")).map_err(config_error)?;
                Ok(Setup::Credit {
                    market: Box::new(market),
                    proportion: *proportion,
                })
            }
        }
    }

    pub fn model(&self) -> NoiseModel {
        match self {
            Setup::Toy { .. } => NoiseModel::Brownian,
            Setup::Credit { market, .. } => market.noise.clone(),
        }
    }

    pub fn dynamics(&self) -> &dyn Dynamics {
        match self {
            Setup::Toy { dynamics, .. } => dynamics,
            Setup::Credit { market, .. } => &market.dynamics,
        }
    }

    pub fn cost(&self) -> &dyn Cost {
        match self {
            Setup::Toy { cost, .. } => cost,
            Setup::Credit { market, .. } => &market.cost,
        }
    }

    pub fn policy(&self) -> Result<Box<dyn ControlPolicy>> {
        match self {
            Setup::Toy { control, bound, .. } => {
                let set = ControlBox::new(vec![-bound], vec![*bound], 1e-3)?;
                Ok(Box::new(
                    ConstantPolicy::new(vec![*control], set)?.with_filtration(Filtration::Trivial),
                ))
            }
            Setup::Credit { market, proportion } => Ok(Box::new(
                market
                    .proportional_policy(vec![*proportion; market.n_assets()])
                    .map_err(config_error)?,
            )),
        }
    }

    /// Adjoint and projection bases.
    pub fn bases(&self, config: &ExperimentConfig) -> Result<(Arc<RegressionBasis>, Arc<RegressionBasis>)> {
        match self {
            Setup::Toy { .. } => {
                let adjoint = basis_of(config, &NoiseModel::Brownian, 1)?;
                Ok((adjoint, Arc::new(RegressionBasis::intercept())))
            }
            Setup::Credit { market, .. } => {
                let spec = config
                    .basis
                    .clone()
                    .or_else(|| config.benchmark.as_ref().map(|b| b.basis.clone()))
                    .unwrap_or_else(credit_basis);
                let basis = Arc::new(spec.build(market.n_assets()).map_err(config_error)?);
                Ok((basis.clone(), basis))
            }
        }
    }

    /// Parameter value maximizing the performance, when known in closed form.
    pub fn optimum(&self) -> Option<f64> {
        match self {
            Setup::Toy { .. } => Some(0.0),
            Setup::Credit { market, .. } => {
                let s = &market.spec;
                if s.n_assets() != 1 || s.utility.kind != "log" || s.excess_return_slope.iter().any(|v| *v != 0.0) {
                    return None;
                }
                analytic_log_optimum(s.excess_return[0], s.intensity[0].constant()?).ok()
            }
        }
    }

    pub fn start(&self) -> f64 {
        match self {
            Setup::Toy { control, .. } => *control,
            Setup::Credit { proportion, .. } => *proportion,
        }
    }
}

struct ProblemRun {
    setup: Setup,
    ens: Ensembles,
    system: DissectingSystem,
    adjoint_basis: Arc<RegressionBasis>,
    projection_basis: Arc<RegressionBasis>,
}

impl ProblemRun {
    fn new(config: &ExperimentConfig, report: &mut RunReport) -> Result<Self> {
        let setup = Setup::from_config(config)?;
        let ens = Ensembles::sample(config, &setup.model(), config.paths, config.seed)?;
        export_ensemble(config, report, &ens.main)?;
        let system = system_of(&ens.main, config.dissecting.level)?;
        let (adjoint_basis, projection_basis) = setup.bases(config)?;
        Ok(Self {
            setup,
            ens,
            system,
            adjoint_basis,
            projection_basis,
        })
    }

    fn problem(&self, level: usize) -> Problem<'_> {
        Problem {
            dynamics: self.setup.dynamics(),
            cost: self.setup.cost(),
            system: &self.system,
            level,
            adjoint_basis: self.adjoint_basis.clone(),
            projection_basis: self.projection_basis.clone(),
        }
    }

    fn evaluate(&self, level: usize, policy: &dyn ControlPolicy) -> Result<Evaluation> {
        evaluate_policy(&self.problem(level), &self.ens.main, self.ens.fit.as_ref(), policy).stage("policy evaluation")
    }
}

struct AdjointCheck;

impl Experiment for AdjointCheck {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::AdjointCheck
    }

    fn describe(&self) -> &'static str {
        "adjoint processes K, F, p and kappa against their exact identities"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let run = ProblemRun::new(config, report)?;
        let policy = run.setup.policy()?;
        report.stage("state equation", "controlled jump SDE");
        report.stage("adjoints", "terminal adjoint K, drift F, p and kappa");
        let eval = run.evaluate(config.dissecting.level, policy.as_ref())?;
        let b = &eval.bundle;
        let s = &eval.states;
        let (n, k_steps) = (s.n_paths, s.n_steps);
        let max_f = b.f.iter().fold(0.0f64, |a, v| a.max(v.abs()));
        report.check(Check::exact("max |F| with state-free coefficients", max_f, 0.0));
        let max_pk = b.p.iter().zip(&b.k).fold(0.0f64, |a, (p, k)| a.max((p - k).abs()));
        report.check(Check::exact("max |p - K|", max_pk, 0.0));
        let cost = run.setup.cost();
        let max_kg = (0..n)
            .flat_map(|i| (0..=k_steps).map(move |t| (i, t)))
            .fold(0.0f64, |a, (i, t)| {
                a.max((b.k(i, t) - cost.terminal_x(s.terminal(i))).abs())
            });
        report.check(Check::exact("max |K - g'(X_T)| without running cost", max_kg, 0.0));
        let kappa = Summary::from_fn(n, |i| {
            (0..k_steps).map(|t| b.kappa(i, t, 0)).sum::<f64>() / k_steps as f64
        });
        report.value("mean kappa", kappa.mean);
        report.value("mean kappa std error", kappa.std_error);
        if let Setup::Toy { noise, .. } = run.setup {
            report.check(Check::within(
                "mean kappa vs -2 noise",
                kappa.mean,
                -2.0 * noise,
                0.05 * 2.0 * noise.abs(),
                Some(kappa.std_error),
            ));
        }
        for p in &b.proxies {
            report.check(Check::holds(
                format!("integrability proxy {} stable", p.name),
                p.is_stable(),
            ));
        }
        report.artifact(
            "artifacts/adjoint_fields.csv",
            csv_bytes(|w| b.write_fields_csv(&run.ens.main, w))?,
        );
        if n <= config.output.csv_paths_limit {
            report.artifact(
                "artifacts/adjoint_paths.csv",
                csv_bytes(|w| b.write_paths_csv(&run.ens.main, w))?,
            );
        }
        Ok(())
    }
}

struct Criticality;

impl Experiment for Criticality {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Criticality
    }

    fn describe(&self) -> &'static str {
        "Gateaux derivative against the projected Hamiltonian gradient"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let run = ProblemRun::new(config, report)?;
        let policy = run.setup.policy()?;
        report.stage("Hamiltonian gradient", "Hamiltonian");
        let eval = run.evaluate(config.dissecting.level, policy.as_ref())?;
        let s = &eval.states;
        let (n, k_steps) = (s.n_paths, s.n_steps);
        let anchors = if config.consistency.anchors.is_empty() {
            vec![k_steps / 4, k_steps / 2]
        } else {
            config.consistency.anchors.clone()
        };
        let at_optimum = run
            .setup
            .optimum()
            .is_some_and(|o| (o - run.setup.start()).abs() < 1e-12);
        report.stage("perturbation consistency", "critical point condition");
        let mut rows =
            String::from("anchor,h_steps,direction,gateaux,gateaux_se,hamiltonian,difference,difference_se,z\n");
        let size = policy.control_set().margin(0);
        for &anchor in &anchors {
            let unit: Vec<f64> = (0..n).map(|i| size * policy.scale(s.observed(i, anchor))).collect();
            let mut dirs: Vec<(&str, Vec<f64>)> = vec![("one", unit.clone())];
            match run.setup {
                Setup::Credit { .. } => dirs.push((
                    "survival",
                    (0..n)
                        .map(|i| unit[i] * run.ens.main.observe(None, i, anchor).survived(0))
                        .collect(),
                )),
                Setup::Toy { .. } => dirs.push(("minus_half", unit.iter().map(|v| -0.5 * v).collect())),
            }
            for &h in &config.consistency.h_steps {
                for (name, alpha) in &dirs {
                    let rec = simple_perturbation_check(
                        &run.ens.main,
                        s,
                        run.setup.cost(),
                        policy.as_ref(),
                        &eval.gradient,
                        anchor,
                        h,
                        0,
                        alpha,
                    )
                    .stage("perturbation consistency")?;
                    report.check(Check::within_se(
                        format!("gateaux minus projected gradient, anchor {anchor}, h {h}, {name}"),
                        &rec.difference,
                        0.0,
                        Z_BAND,
                    ));
                    rows.push_str(&format!(
                        "{anchor},{h},{name},{},{},{},{},{},{}\n",
                        rec.gateaux.mean,
                        rec.gateaux.std_error,
                        rec.hamiltonian.mean,
                        rec.difference.mean,
                        rec.difference.std_error,
                        rec.z
                    ));
                    if at_optimum && *name == "one" {
                        report.check(Check::within_se(
                            format!("gateaux at the optimum, anchor {anchor}, h {h}"),
                            &rec.gateaux,
                            0.0,
                            Z_BAND,
                        ));
                        let raw = Summary::from_fn(n, |i| {
                            alpha[i]
                                * (anchor..anchor + h)
                                    .map(|k| eval.gradient.raw[(i * k_steps + k) * s.n_controls])
                                    .sum::<f64>()
                                * s.dt
                        });
                        report.check(Check::within(
                            format!("projected gradient at the optimum, anchor {anchor}, h {h}"),
                            rec.hamiltonian.mean,
                            0.0,
                            Z_BAND * raw.std_error,
                            Some(raw.std_error),
                        ));
                    }
                }
            }
        }
        let score = eval.criticality.score;
        report.value("criticality score", score.mean);
        report.value("criticality score std error", score.std_error);
        if at_optimum {
            report.check(Check::at_most(
                "criticality score at the optimum",
                score.mean,
                1e-3,
                Some(score.std_error),
            ));
        } else if let Setup::Toy { .. } = run.setup {
            report.check(Check::at_least(
                "criticality score in standard errors away from the optimum",
                score.mean / score.std_error,
                10.0,
                None,
            ));
        }
        report.artifact("artifacts/consistency.csv", rows.into_bytes());
        Ok(())
    }
}

struct Optimize;

impl Experiment for Optimize {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::Optimize
    }

    fn describe(&self) -> &'static str {
        "projected gradient ascent driven by the Hamiltonian"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let run = ProblemRun::new(config, report)?;
        let policy = run.setup.policy()?;
        let opt = config.optimizer.as_ref().expect("validated");
        report.stage("optimizer", "critical point condition");
        let (done, trace) = optimize_policy(
            &run.problem(config.dissecting.level),
            &run.ens.main,
            run.ens.fit.as_ref(),
            policy,
            opt,
        )
        .stage("policy optimization")?;
        let theta = done.params()[0];
        report.value("final parameter", theta);
        report.value("iterations", trace.rows.len() as f64);
        if let Some(o) = run.setup.optimum() {
            let tol = match run.setup {
                Setup::Toy { .. } => 0.01,
                Setup::Credit { .. } => 0.02,
            };
            report.check(Check::within("optimized parameter vs closed form", theta, o, tol, None));
        }
        report.artifact("artifacts/trace.csv", csv_bytes(|w| trace.write_csv(w))?);
        Ok(())
    }
}

struct CreditBenchmark;

impl Experiment for CreditBenchmark {
    fn kind(&self) -> ExperimentKind {
        ExperimentKind::CreditBenchmark
    }

    fn describe(&self) -> &'static str {
        "credit portfolio against the analytic log-utility optimum"
    }

    fn run(&self, config: &ExperimentConfig, report: &mut RunReport) -> Result<()> {
        let market = build_credit_market(config.market.clone().expect("validated")).map_err(config_error)?;
        let settings = config.benchmark.clone().unwrap_or_default();
        let ens = Ensembles::sample(config, &market.noise, config.paths, config.seed)?;
        export_ensemble(config, report, &ens.main)?;
        let system = system_of(&ens.main, settings.level)?;
        report.stage("performance grid", "strict concavity of the performance");
        report.stage(
            "first-order residual",
            "optimality characterization for the credit market",
        );
        report.stage("multi-start optimizer", "critical point condition");
        let bench =
            credit_benchmark(&market, &ens.main, ens.fit.as_ref(), &system, &settings).stage("credit benchmark")?;
        benchmark_checks(report, &bench, &settings);
        let mut grid = String::from("pi,J,J_se,J_adjusted,J_adjusted_se\n");
        for r in &bench.grid {
            grid.push_str(&format!(
                "{},{},{},{},{}\n",
                r.pi, r.j.raw.mean, r.j.raw.std_error, r.j.adjusted.mean, r.j.adjusted.std_error
            ));
        }
        report.artifact("artifacts/performance_grid.csv", grid.into_bytes());
        let mut res = String::from("pi,signed_mean,signed_se,aggregate_l2\n");
        for r in &bench.residuals {
            res.push_str(&format!(
                "{},{},{},{}\n",
                r.pi, r.record.signed[0].mean, r.record.signed[0].std_error, r.record.aggregate_l2
            ));
        }
        report.artifact("artifacts/residuals.csv", res.into_bytes());
        for (k, s) in bench.starts.iter().enumerate() {
            report.artifact(
                format!("artifacts/trace_start_{k}.csv"),
                csv_bytes(|w| s.trace.write_csv(w))?,
            );
        }
        Ok(())
    }
}

fn benchmark_checks(report: &mut RunReport, bench: &crate::credit::BenchmarkReport, settings: &BenchmarkSettings) {
    let pi = bench.analytic;
    report.value("analytic optimum", pi);
    report.value("optimizer estimate", bench.estimate());
    report.value("grid argmax", bench.grid_argmax);
    report.value("residual argmin", bench.residual_argmin);
    for s in &bench.starts {
        report.check(Check::within(
            format!("optimizer from {} vs analytic", s.start),
            s.estimate,
            pi,
            0.02,
            None,
        ));
    }
    report.check(Check::at_most("multi-start spread", bench.start_spread(), 0.02, None));
    if let Some(r) = bench.residual_at(pi) {
        report.check(Check::within_se(
            "first-order residual at the optimum",
            &r.record.signed[0],
            0.0,
            Z_BAND,
        ));
    }
    if let Some(r) = bench.residual_at(0.2) {
        let s = &r.record.signed[0];
        report.check(Check::at_least(
            "first-order residual at 0.2 in standard errors",
            s.mean / s.std_error,
            10.0,
            None,
        ));
    }
    let step = settings
        .pi_grid
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min);
    report.check(Check::within(
        "grid argmax vs analytic",
        bench.grid_argmax,
        pi,
        step + 1e-12,
        None,
    ));
    report.check(Check::at_least(
        "midpoint concavity, smallest paired z",
        bench.concavity_min_z,
        0.0,
        None,
    ));
}

/// Validates the config and runs its pipeline, on a dedicated pool when a
/// thread count is given.
pub fn run_experiment(config: &ExperimentConfig) -> Result<RunReport> {
    config.validate()?;
    let registry = experiment_registry();
    let pipeline = registry.get(config.kind.name())?;
    let start = std::time::Instant::now();
    let mut report = RunReport::new(config.clone());
    match config.threads {
        Some(t) => {
            let pool = rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .map_err(|e| Error::Config(e.to_string()))?;
            pool.install(|| pipeline.run(config, &mut report))?;
        }
        None => pipeline.run(config, &mut report)?,
    }
    report.wall_clock_seconds = start.elapsed().as_secs_f64();
    Ok(report)
}

//! Utility maximization over defaultable assets whose default times are the
//! first jumps of doubly stochastic Poisson processes.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{AdjointBundle, IntegrabilityProxy};
use crate::dissecting::DissectingSystem;
use crate::error::{Error, Result, StageExt};
use crate::max_principle::{
    conditional_projection, evaluate_policy, optimize_policy, OptimizationTrace, OptimizerConfig, Problem,
};
use crate::noise::{Cell, CoxDriver, NoiseModel, Observation, PathEnsemble};
use crate::registry::Registry;
use crate::regression::{BasisSpec, RegressionBasis};
use crate::sde::{simulate_state, ControlBox, ControlPolicy, Cost, Dynamics, ProportionalPolicy, StatePaths};
use crate::stats::{ordered_sum, Summary};

pub trait Utility: Send + Sync {
    fn name(&self) -> &str;
    fn value(&self, x: f64) -> f64;
    fn first(&self, x: f64) -> f64;
    fn second(&self, x: f64) -> f64;
}

pub struct LogUtility;

impl Utility for LogUtility {
    fn name(&self) -> &str {
        "log"
    }

    fn value(&self, x: f64) -> f64 {
        if x > 0.0 {
            x.ln()
        } else {
            f64::NAN
        }
    }

    fn first(&self, x: f64) -> f64 {
        1.0 / x
    }

    fn second(&self, x: f64) -> f64 {
        -1.0 / (x * x)
    }
}

/// `U(x) = x^gamma / gamma`.
pub struct PowerUtility {
    pub gamma: f64,
}

impl Utility for PowerUtility {
    fn name(&self) -> &str {
        "power"
    }

    fn value(&self, x: f64) -> f64 {
        if x >= 0.0 {
            x.powf(self.gamma) / self.gamma
        } else {
            f64::NAN
        }
    }

    fn first(&self, x: f64) -> f64 {
        x.powf(self.gamma - 1.0)
    }

    fn second(&self, x: f64) -> f64 {
        (self.gamma - 1.0) * x.powf(self.gamma - 2.0)
    }
}

type Scalar = Arc<dyn Fn(f64) -> f64 + Send + Sync>;

/// A utility given by closures for `U`, `U'` and `U''`.
#[derive(Clone)]
pub struct CallbackUtility {
    name: String,
    value: Scalar,
    first: Scalar,
    second: Scalar,
}

impl CallbackUtility {
    pub fn new(name: impl Into<String>, value: Scalar, first: Scalar, second: Scalar) -> Self {
        Self {
            name: name.into(),
            value,
            first,
            second,
        }
    }
}

impl Utility for CallbackUtility {
    fn name(&self) -> &str {
        &self.name
    }

    fn value(&self, x: f64) -> f64 {
        (self.value)(x)
    }

    fn first(&self, x: f64) -> f64 {
        (self.first)(x)
    }

    fn second(&self, x: f64) -> f64 {
        (self.second)(x)
    }
}

/// Checks on a geometric grid around `x0` that `U' > 0`, `U'' < 0` and that
/// both derivatives agree with central differences.
pub fn probe_utility(u: &dyn Utility, x0: f64) -> Result<()> {
    for k in -4..=4 {
        let x = x0 * 2f64.powi(k);
        let h = 1e-4 * x;
        let (d1, d2) = (u.first(x), u.second(x));
        let fd1 = (u.value(x + h) - u.value(x - h)) / (2.0 * h);
        let fd2 = (u.first(x + h) - u.first(x - h)) / (2.0 * h);
        let close = |a: f64, b: f64| (a - b).abs() <= 1e-4 * a.abs().max(b.abs()).max(1e-12);
        if !(d1 > 0.0 && d2 < 0.0) {
            return Err(Error::invalid(format!(
                "utility {} is not increasing and strictly concave at {x}",
                u.name()
            )));
        }
        if !close(d1, fd1) || !close(d2, fd2) {
            return Err(Error::CallbackMismatch(format!(
                "utility {} derivatives disagree with differences at {x}",
                u.name()
            )));
        }
    }
    Ok(())
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct UtilitySpec {
    pub kind: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gamma: Option<f64>,
}

impl Default for UtilitySpec {
    fn default() -> Self {
        Self {
            kind: "log".into(),
            gamma: None,
        }
    }
}

pub type UtilityFactory = fn(&UtilitySpec) -> Result<Arc<dyn Utility>>;

pub fn utility_registry() -> Registry<UtilityFactory> {
    let mut reg: Registry<UtilityFactory> = Registry::new("utility");
    reg.register("log", |_| Ok(Arc::new(LogUtility)))
        .register("power", |s| {
            let gamma = s
                .gamma
                .ok_or_else(|| Error::Config("power utility needs gamma".into()))?;
            if !(gamma > 0.0 && gamma < 1.0) {
                return Err(Error::invalid(format!(
                    "power utility needs gamma in (0, 1), got {gamma}"
                )));
            }
            Ok(Arc::new(PowerUtility { gamma }))
        });
    reg
}

/// Default intensity of one asset: a constant or a mean-reverting driver.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum IntensitySpec {
    Constant(f64),
    Cox(CoxDriver),
}

impl IntensitySpec {
    pub fn driver(&self) -> CoxDriver {
        match self {
            IntensitySpec::Constant(l) => CoxDriver::constant(*l),
            IntensitySpec::Cox(d) => *d,
        }
    }

    pub fn constant(&self) -> Option<f64> {
        match self {
            IntensitySpec::Constant(l) => Some(*l),
            IntensitySpec::Cox(d) if d.volatility == 0.0 && (d.mean_reversion == 0.0 || d.initial == d.long_run) => {
                Some(d.initial)
            }
            IntensitySpec::Cox(_) => None,
        }
    }
}

fn default_margin() -> f64 {
    1e-3
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreditMarketSpec {
    /// Excess return `rho(t) = excess_return + excess_return_slope t` per asset.
    pub excess_return: Vec<f64>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub excess_return_slope: Vec<f64>,
    pub intensity: Vec<IntensitySpec>,
    pub initial_wealth: f64,
    #[serde(default)]
    pub utility: UtilitySpec,
    /// Interior margin of the proportion box, as a fraction of its width.
    #[serde(default = "default_margin")]
    pub margin: f64,
}

impl CreditMarketSpec {
    pub fn single(rho: f64, lambda: f64) -> Self {
        Self {
            excess_return: vec![rho],
            excess_return_slope: vec![],
            intensity: vec![IntensitySpec::Constant(lambda)],
            initial_wealth: 1.0,
            utility: UtilitySpec::default(),
            margin: default_margin(),
        }
    }

    pub fn n_assets(&self) -> usize {
        self.excess_return.len()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.n_assets();
        if n == 0 || self.intensity.len() != n {
            return Err(Error::invalid("each asset needs one excess return and one intensity"));
        }
        if !self.excess_return_slope.is_empty() && self.excess_return_slope.len() != n {
            return Err(Error::invalid("excess_return_slope must be empty or one per asset"));
        }
        if self
            .excess_return
            .iter()
            .chain(&self.excess_return_slope)
            .any(|v| !v.is_finite())
        {
            return Err(Error::invalid("excess returns must be finite"));
        }
        for i in &self.intensity {
            i.driver().validate()?;
        }
        if !(self.initial_wealth > 0.0 && self.initial_wealth.is_finite()) {
            return Err(Error::invalid("initial wealth must be positive"));
        }
        if !(self.margin > 0.0 && self.margin < 0.5) {
            return Err(Error::invalid("margin must lie in (0, 0.5)"));
        }
        Ok(())
    }
}

/// Wealth `dX = sum_z 1{tau_z > t} u_z (rho_z dt - dH~_z)` with `H~` the
/// compensated default indicator.
#[derive(Clone, Debug)]
pub struct CreditDynamics {
    initial: f64,
    rho: Vec<f64>,
    slope: Vec<f64>,
}

impl CreditDynamics {
    fn rho(&self, z: usize, t: f64) -> f64 {
        self.rho[z] + self.slope.get(z).copied().unwrap_or(0.0) * t
    }
}

impl Dynamics for CreditDynamics {
    fn name(&self) -> &str {
        "credit_wealth"
    }

    fn initial(&self) -> f64 {
        self.initial
    }

    fn n_controls(&self) -> usize {
        self.rho.len()
    }

    fn n_marks(&self) -> usize {
        self.rho.len()
    }

    fn drift(&self, ctx: &Observation<'_>, u: &[f64], _x: f64) -> f64 {
        let t = ctx.time();
        (0..u.len()).map(|z| ctx.survived(z) * u[z] * self.rho(z, t)).sum()
    }

    fn drift_x(&self, _: &Observation<'_>, _: &[f64], _: f64) -> f64 {
        0.0
    }

    fn drift_u(&self, ctx: &Observation<'_>, _: &[f64], _: f64, out: &mut [f64]) {
        let t = ctx.time();
        for (z, o) in out.iter_mut().enumerate() {
            *o = ctx.survived(z) * self.rho(z, t);
        }
    }

    fn jump(&self, ctx: &Observation<'_>, z: usize, u: &[f64], _: f64) -> f64 {
        -ctx.survived(z) * u[z]
    }

    fn jump_x(&self, _: &Observation<'_>, _: usize, _: &[f64], _: f64) -> f64 {
        0.0
    }

    fn jump_u(&self, ctx: &Observation<'_>, z: usize, _: &[f64], _: f64, out: &mut [f64]) {
        out.fill(0.0);
        out[z] = -ctx.survived(z);
    }

    /// Only the first jump defaults the asset; later jumps in the same step
    /// find it already worthless.
    fn effective_noise(&self, ensemble: &PathEnsemble, path: usize, step: usize, z: usize) -> f64 {
        ensemble.count(path, step, z).min(1) as f64 - ensemble.compensator(path, step, z)
    }
}

/// `f = 0`, `g = U`.
#[derive(Clone)]
pub struct UtilityCost {
    pub utility: Arc<dyn Utility>,
    n_controls: usize,
}

impl Cost for UtilityCost {
    fn name(&self) -> &str {
        self.utility.name()
    }

    fn running(&self, _: &Observation<'_>, _: &[f64], _: f64) -> f64 {
        0.0
    }

    fn running_x(&self, _: &Observation<'_>, _: &[f64], _: f64) -> f64 {
        0.0
    }

    fn running_u(&self, _: &Observation<'_>, _: &[f64], _: f64, out: &mut [f64]) {
        debug_assert_eq!(out.len(), self.n_controls);
        out.fill(0.0);
    }

    fn terminal(&self, x: f64) -> f64 {
        self.utility.value(x)
    }

    fn terminal_x(&self, x: f64) -> f64 {
        self.utility.first(x)
    }
}

pub struct CreditMarket {
    pub spec: CreditMarketSpec,
    pub noise: NoiseModel,
    pub dynamics: CreditDynamics,
    pub cost: UtilityCost,
    /// Proportions live in `(0, 1)^n`.
    pub control_set: ControlBox,
}

impl fmt::Debug for CreditMarket {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("CreditMarket").field("spec", &self.spec).finish()
    }
}

pub fn build_credit_market(spec: CreditMarketSpec) -> Result<CreditMarket> {
    build_credit_market_with(spec, None)
}

/// As [`build_credit_market`], with an explicit utility in place of the
/// one named in the spec.
pub fn build_credit_market_with(spec: CreditMarketSpec, utility: Option<Arc<dyn Utility>>) -> Result<CreditMarket> {
    spec.validate()?;
    let utility = match utility {
        Some(u) => u,
        None => (utility_registry().get(&spec.utility.kind)?)(&spec.utility)?,
    };
    probe_utility(utility.as_ref(), spec.initial_wealth)?;
    let n = spec.n_assets();
    Ok(CreditMarket {
        noise: NoiseModel::DoublyStochasticPoisson {
            drivers: spec.intensity.iter().map(IntensitySpec::driver).collect(),
        },
        dynamics: CreditDynamics {
            initial: spec.initial_wealth,
            rho: spec.excess_return.clone(),
            slope: spec.excess_return_slope.clone(),
        },
        cost: UtilityCost { utility, n_controls: n },
        control_set: ControlBox::new(vec![0.0; n], vec![1.0; n], spec.margin)?,
        spec,
    })
}

impl CreditMarket {
    pub fn proportional_policy(&self, pi: Vec<f64>) -> Result<ProportionalPolicy> {
        ProportionalPolicy::new(pi, self.control_set.clone())
    }

    pub fn n_assets(&self) -> usize {
        self.spec.n_assets()
    }
}

/// Default step of each asset on each path: the step containing the first
/// jump, or `None` while alive at the horizon.
#[derive(Clone, Debug, PartialEq)]
pub struct DefaultState {
    n_assets: usize,
    tau: Vec<Option<usize>>,
}

impl DefaultState {
    pub fn of(ensemble: &PathEnsemble) -> Result<Self> {
        if !ensemble.is_counting() {
            return Err(Error::invalid("default times need a counting noise"));
        }
        let (n, k_steps, m) = (ensemble.n_paths(), ensemble.n_steps(), ensemble.n_marks());
        let tau = (0..n)
            .flat_map(|i| (0..m).map(move |z| (i, z)))
            .map(|(i, z)| (0..k_steps).find(|&k| ensemble.count(i, k, z) > 0))
            .collect();
        Ok(Self { n_assets: m, tau })
    }

    pub fn tau(&self, path: usize, asset: usize) -> Option<usize> {
        self.tau[path * self.n_assets + asset]
    }

    /// `1{tau > t_step}`: no jump strictly before `step`.
    pub fn alive(&self, path: usize, step: usize, asset: usize) -> bool {
        self.tau(path, asset).is_none_or(|k| k >= step)
    }
}

/// Maximizer of `pi (rho + lambda) + lambda ln(1 - pi)` over `[0, 1)`.
pub fn analytic_log_optimum(rho: f64, lambda: f64) -> Result<f64> {
    if !(lambda > 0.0 && lambda.is_finite()) {
        return Err(Error::invalid(format!("intensity must be positive, got {lambda}")));
    }
    if !(rho >= 0.0 && rho.is_finite()) {
        return Err(Error::invalid(format!("excess return must be non-negative, got {rho}")));
    }
    Ok(rho / (rho + lambda))
}

/// Mean of `y` with the zero-mean `controls` regressed out; the standard
/// error is that of the residual.
pub fn control_variate_summary(y: &[f64], controls: &[Vec<f64>]) -> Summary {
    let n = y.len();
    let q = controls.len();
    let raw = Summary::of(y);
    if q == 0 || n < q + 2 {
        return raw;
    }
    let means: Vec<f64> = controls.iter().map(|c| ordered_sum(n, |i| c[i]) / n as f64).collect();
    let mut cov = DMatrix::zeros(q, q);
    let mut cross = DVector::zeros(q);
    for a in 0..q {
        cross[a] = ordered_sum(n, |i| (controls[a][i] - means[a]) * (y[i] - raw.mean));
        for b in 0..=a {
            let v = ordered_sum(n, |i| (controls[a][i] - means[a]) * (controls[b][i] - means[b]));
            cov[(a, b)] = v;
            cov[(b, a)] = v;
        }
    }
    let Some(beta) = cov.clone().cholesky().map(|c| c.solve(&cross)) else {
        return raw;
    };
    let adjusted = Summary::from_fn(n, |i| y[i] - (0..q).map(|a| beta[a] * controls[a][i]).sum::<f64>());
    Summary {
        std_error: (adjusted.variance * (n - 1) as f64 / ((n - q - 1) * n) as f64).sqrt(),
        ..adjusted
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct PerformanceRecord {
    /// Plain sample mean of `U(X_T)`.
    pub raw: Summary,
    /// Mean with the terminal field values `mu((0, T] x {z})` as control
    /// variates.
    pub adjusted: Summary,
    pub proxies: Vec<IntegrabilityProxy>,
}

pub fn estimate_performance(
    ensemble: &PathEnsemble,
    market: &CreditMarket,
    policy: &dyn ControlPolicy,
) -> Result<(StatePaths, PerformanceRecord)> {
    let states = simulate_state(ensemble, &market.dynamics, policy).stage("wealth equation")?;
    let record = performance_of(ensemble, market, &states)?;
    Ok((states, record))
}

pub fn performance_of(
    ensemble: &PathEnsemble,
    market: &CreditMarket,
    states: &StatePaths,
) -> Result<PerformanceRecord> {
    let n = states.n_paths;
    let u = &market.cost.utility;
    let mut values = Vec::with_capacity(n);
    let mut marginal = Vec::with_capacity(n);
    for i in 0..n {
        let x = states.terminal(i);
        let v = u.value(x);
        if !(x > 0.0) || !v.is_finite() {
            return Err(Error::DomainViolation { path: i, wealth: x });
        }
        values.push(v);
        marginal.push(u.first(x));
    }
    let k_steps = ensemble.n_steps();
    let controls: Vec<Vec<f64>> = (0..ensemble.n_marks())
        .map(|z| (0..n).map(|i| ensemble.running_noise(i, k_steps, z)).collect())
        .collect();
    Ok(PerformanceRecord {
        raw: Summary::of(&values),
        adjusted: control_variate_summary(&values, &controls),
        proxies: vec![
            IntegrabilityProxy::of("U(X_T)", &values),
            IntegrabilityProxy::of("U'(X_T)", &marginal),
        ],
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct FirstOrderRecord {
    /// Root mean square of the projected residual at each `[step][asset]`.
    pub per_step: Vec<Vec<f64>>,
    /// `sqrt(sum_t mean(projected residual^2) dt)`.
    pub aggregate_l2: f64,
    /// Per asset: paths' `sum_t 1{tau > t} (rho p_t - lambda_t p_t mu(D_t) / Lambda(D_t)) dt`,
    /// with `D_t` the level's cell starting at `t`.
    pub signed: Vec<Summary>,
}

/// Residual of the first-order condition
/// `1{tau > t} (rho E[U'(X_T) | F_t] - D_{t,z} U'(X_T) lambda_t) = 0`.
pub fn first_order_residual(
    ensemble: &PathEnsemble,
    states: &StatePaths,
    market: &CreditMarket,
    bundle: &AdjointBundle,
    projection_basis: &RegressionBasis,
) -> Result<FirstOrderRecord> {
    states.check_aligned(ensemble)?;
    let (n, k_steps, m) = (states.n_paths, states.n_steps, market.n_assets());
    if bundle.n_anchors() < k_steps || bundle.n_paths != n {
        return Err(Error::MissingAnchor(bundle.n_anchors().min(k_steps)));
    }
    let dt = states.dt;
    let grid = ensemble.grid();
    let alive = |i: usize, k: usize, z: usize| ensemble.observe(None, i, k).survived(z);
    let mut raw = vec![0.0; n * k_steps * m];
    raw.par_chunks_mut(k_steps * m).enumerate().for_each(|(i, row)| {
        for k in 0..k_steps {
            let t = grid.time(k);
            for z in 0..m {
                let s = alive(i, k, z);
                row[k * m + z] = s
                    * (market.dynamics.rho(z, t) * bundle.p(i, k)
                        - bundle.kappa(i, k, z) * ensemble.intensity(i, k, z));
            }
        }
    });
    let projected = conditional_projection(ensemble, Some(states), &raw, m, projection_basis)?;
    let per_step: Vec<Vec<f64>> = (0..k_steps)
        .map(|k| {
            (0..m)
                .map(|z| {
                    Summary::from_fn(n, |i| projected[(i * k_steps + k) * m + z].powi(2))
                        .mean
                        .sqrt()
                })
                .collect()
        })
        .collect();
    let aggregate_l2 = (per_step.iter().flatten().map(|v| v * v).sum::<f64>() * dt).sqrt();
    let width = bundle.kappa_field.width;
    let mut signed = Vec::with_capacity(m);
    for z in 0..m {
        let cells: Vec<Cell> = (0..k_steps)
            .map(|k| Cell::single(k, (k + width).min(k_steps), z))
            .collect::<Result<_>>()?;
        let per_path: Vec<f64> = (0..n)
            .into_par_iter()
            .map(|i| {
                let mut acc = 0.0;
                for (k, cell) in cells.iter().enumerate() {
                    if alive(i, k, z) == 0.0 {
                        break;
                    }
                    let big = ensemble.cell_variance(i, cell).max(crate::derivative::LAMBDA_CLAMP);
                    let p = bundle.p(i, k);
                    acc += market.dynamics.rho(z, grid.time(k)) * p
                        - ensemble.intensity(i, k, z) * p * ensemble.cell_noise(i, cell) / big;
                }
                acc * dt
            })
            .collect();
        signed.push(Summary::of(&per_path));
    }
    Ok(FirstOrderRecord {
        per_step,
        aggregate_l2,
        signed,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct BenchmarkSettings {
    /// Proportions at which `J` is estimated.
    pub pi_grid: Vec<f64>,
    /// Proportions at which the first-order residual is evaluated; the
    /// analytic optimum is always added.
    pub residual_points: Vec<f64>,
    pub starts: Vec<f64>,
    pub level: usize,
    pub basis: BasisSpec,
    pub optimizer: OptimizerConfig,
}

impl Default for BenchmarkSettings {
    fn default() -> Self {
        Self {
            pi_grid: (1..100).map(|k| k as f64 / 100.0).collect(),
            residual_points: (1..10).map(|k| k as f64 / 10.0).chain([0.2, 0.7]).collect(),
            starts: vec![0.1, 0.5, 0.9],
            level: 4,
            basis: credit_basis(),
            optimizer: OptimizerConfig {
                max_iter: 12,
                gamma0: 5.0,
                refit_period: 1,
                ..OptimizerConfig::default()
            },
        }
    }
}

pub fn credit_basis() -> BasisSpec {
    BasisSpec {
        observables: vec!["inverse_state".into(), "survival:0".into()],
        degree: 2,
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct GridRow {
    pub pi: f64,
    pub j: PerformanceRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct ResidualRow {
    pub pi: f64,
    pub record: FirstOrderRecord,
}

#[derive(Clone, Debug, Serialize)]
pub struct StartRow {
    pub start: f64,
    pub estimate: f64,
    pub trace: OptimizationTrace,
}

#[derive(Clone, Debug, Serialize)]
pub struct BenchmarkReport {
    pub analytic: f64,
    pub grid: Vec<GridRow>,
    pub grid_argmax: f64,
    /// Smallest `(J(mid) - chord) / SE` over consecutive grid triples, with
    /// paired per-path differences.
    pub concavity_min_z: f64,
    pub residuals: Vec<ResidualRow>,
    /// Residual point with the smallest `|signed mean|`.
    pub residual_argmin: f64,
    pub starts: Vec<StartRow>,
}

impl BenchmarkReport {
    pub fn estimate(&self) -> f64 {
        self.starts.first().map_or(f64::NAN, |s| s.estimate)
    }

    pub fn start_spread(&self) -> f64 {
        let (lo, hi) = self
            .starts
            .iter()
            .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), s| {
                (lo.min(s.estimate), hi.max(s.estimate))
            });
        hi - lo
    }

    pub fn residual_at(&self, pi: f64) -> Option<&ResidualRow> {
        self.residuals.iter().find(|r| r.pi == pi)
    }
}

/// Grid search, concavity check, first-order residuals and multi-start
/// optimization for a single constant-intensity asset.
pub fn credit_benchmark(
    market: &CreditMarket,
    ensemble: &PathEnsemble,
    fit_ensemble: Option<&PathEnsemble>,
    system: &DissectingSystem,
    settings: &BenchmarkSettings,
) -> Result<BenchmarkReport> {
    if market.n_assets() != 1 {
        return Err(Error::invalid("the benchmark covers a single asset"));
    }
    let lambda = market.spec.intensity[0]
        .constant()
        .ok_or_else(|| Error::invalid("the analytic benchmark needs a constant intensity"))?;
    let analytic = analytic_log_optimum(market.spec.excess_return[0], lambda)?;
    let basis = Arc::new(settings.basis.build(1)?);
    let problem = Problem {
        dynamics: &market.dynamics,
        cost: &market.cost,
        system,
        level: settings.level,
        adjoint_basis: basis.clone(),
        projection_basis: basis.clone(),
    };

    let mut grid = Vec::with_capacity(settings.pi_grid.len());
    let mut window: Vec<Vec<f64>> = Vec::new();
    let mut concavity_min_z = f64::INFINITY;
    for &pi in &settings.pi_grid {
        let policy = market.proportional_policy(vec![pi])?;
        let (states, j) =
            estimate_performance(ensemble, market, &policy).stage("performance on the proportion grid")?;
        let values: Vec<f64> = (0..states.n_paths)
            .map(|i| market.cost.utility.value(states.terminal(i)))
            .collect();
        window.push(values);
        if window.len() == 3 {
            let d = Summary::from_fn(ensemble.n_paths(), |i| {
                window[1][i] - 0.5 * (window[0][i] + window[2][i])
            });
            concavity_min_z = concavity_min_z.min(if d.std_error > 0.0 {
                d.mean / d.std_error
            } else if d.mean >= 0.0 {
                f64::INFINITY
            } else {
                f64::NEG_INFINITY
            });
            window.remove(0);
        }
        grid.push(GridRow { pi, j });
    }
    let grid_argmax = grid
        .iter()
        .fold((f64::NAN, f64::NEG_INFINITY), |best, r| {
            if r.j.adjusted.mean > best.1 {
                (r.pi, r.j.adjusted.mean)
            } else {
                best
            }
        })
        .0;

    let mut points = settings.residual_points.clone();
    points.push(analytic);
    points.sort_by(f64::total_cmp);
    points.dedup();
    let mut residuals = Vec::with_capacity(points.len());
    for &pi in &points {
        let policy = market.proportional_policy(vec![pi])?;
        let eval = evaluate_policy(&problem, ensemble, fit_ensemble, &policy).stage("adjoints on the residual grid")?;
        let record =
            first_order_residual(ensemble, &eval.states, market, &eval.bundle, &basis).stage("first-order residual")?;
        residuals.push(ResidualRow { pi, record });
    }
    let residual_argmin = residuals
        .iter()
        .min_by(|a, b| a.record.signed[0].mean.abs().total_cmp(&b.record.signed[0].mean.abs()))
        .map_or(f64::NAN, |r| r.pi);

    let mut starts = Vec::with_capacity(settings.starts.len());
    for &start in &settings.starts {
        let policy = Box::new(market.proportional_policy(vec![start])?);
        let (done, trace) = optimize_policy(&problem, ensemble, fit_ensemble, policy, &settings.optimizer)
            .stage("proportion optimizer")?;
        starts.push(StartRow {
            start,
            estimate: done.params()[0],
            trace,
        });
    }
    Ok(BenchmarkReport {
        analytic,
        grid,
        grid_argmax,
        concavity_min_z,
        residuals,
        residual_argmin,
        starts,
    })
}

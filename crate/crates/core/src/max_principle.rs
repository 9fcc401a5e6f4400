//! Hamiltonian gradient, its projection on the controller's information,
//! the criticality score and a projected gradient-ascent optimizer.

use std::io::Write;
use std::sync::Arc;

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::adjoint::{build_adjoint_bundle, rebuild_with_fields, AdjointBundle, Sample};
use crate::dissecting::DissectingSystem;
use crate::error::{Error, Result, StageExt};
use crate::noise::PathEnsemble;
use crate::regression::{pseudo_inverse, Design, RegressionBasis};
use crate::sde::{gateaux_derivative, performance, simulate_state, ControlPolicy, Cost, Dynamics, StatePaths};
use crate::stats::Summary;

/// Relative lattice for projection coefficients, `2^-28` of the largest.
const COEFFICIENT_BITS: i32 = 28;
const FIXED_POINT_ROUNDS: usize = 4;

/// `dH/du = f_u + b_u p_t + sum_z kappa_t(z) phi_u(z) lambda_t(z)` per
/// `[path][step][control]`.
pub fn hamiltonian_gradient(ensemble: &PathEnsemble, states: &StatePaths, bundle: &AdjointBundle) -> Result<Vec<f64>> {
    states.check_aligned(ensemble)?;
    if bundle.n_anchors() < states.n_steps || bundle.n_paths != states.n_paths {
        return Err(Error::MissingAnchor(bundle.n_anchors().min(states.n_steps)));
    }
    let (k_steps, m, nc) = (states.n_steps, states.n_marks, states.n_controls);
    let mut out = vec![0.0; states.n_paths * k_steps * nc];
    out.par_chunks_mut(k_steps * nc).enumerate().for_each(|(i, row)| {
        for t in 0..k_steps {
            let p = bundle.p(i, t);
            for j in 0..nc {
                let mut v = bundle.costs.fu[(i * k_steps + t) * nc + j] + states.bu(i, t)[j] * p;
                for z in 0..m {
                    let du = states.phiu(i, t, z)[j];
                    if du != 0.0 {
                        v += bundle.kappa(i, t, z) * du * ensemble.intensity(i, t, z);
                    }
                }
                row[t * nc + j] = v;
            }
        }
    });
    Ok(out)
}

fn snap(c: &mut [f64]) {
    let max = c.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if max == 0.0 || !max.is_finite() {
        return;
    }
    let lattice = 2f64.powi(max.log2().floor() as i32 - COEFFICIENT_BITS);
    for v in c.iter_mut() {
        *v = (*v / lattice).round() * lattice;
    }
}

/// Design columns rescaled by powers of two to unit root-mean-square.
fn standardized(mut d: Design) -> Design {
    let p = d.p;
    let mut ms = vec![0.0; p];
    for r in d.data.chunks_exact(p) {
        for (m, v) in ms.iter_mut().zip(r) {
            *m += v * v;
        }
    }
    let scale: Vec<f64> = ms
        .iter()
        .map(|m| {
            let m = m / d.n as f64;
            if m > 0.0 && m.is_finite() {
                2f64.powi(-(0.5 * m.log2()).round() as i32)
            } else {
                1.0
            }
        })
        .collect();
    for r in d.data.chunks_exact_mut(p) {
        for (v, s) in r.iter_mut().zip(&scale) {
            *v *= s;
        }
    }
    d
}

/// Least-squares projection operator for one design: coefficients are held
/// on a lattice and iterated to a fixed point `c = S(P^+ X^T X c)`, so that
/// applying the projection to its own output returns it bit for bit.
pub struct Projector {
    design: Design,
    pinv: nalgebra::DMatrix<f64>,
}

impl Projector {
    pub fn new(design: Design, context: &str) -> Result<Self> {
        let design = standardized(design);
        let pinv = pseudo_inverse(&design.gram(), context)?;
        Ok(Self { design, pinv })
    }

    fn raw(&self, y: &[f64]) -> Vec<f64> {
        let c: DVector<f64> = &self.pinv * self.design.cross(y);
        c.iter().copied().collect()
    }

    pub fn coefficients(&self, y: &[f64]) -> Vec<f64> {
        let mut c = self.raw(y);
        snap(&mut c);
        for _ in 0..FIXED_POINT_ROUNDS {
            let mut next = self.raw(&self.design.fitted(&c));
            snap(&mut next);
            if next == c {
                break;
            }
            c = next;
        }
        c
    }

    pub fn project(&self, y: &[f64]) -> Vec<f64> {
        self.design.fitted(&self.coefficients(y))
    }
}

/// Per-step projection of `[path][step][control]` values on the basis
/// evaluated at each step.
pub fn conditional_projection(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    values: &[f64],
    n_controls: usize,
    basis: &RegressionBasis,
) -> Result<Vec<f64>> {
    let (n, k_steps) = (ensemble.n_paths(), ensemble.n_steps());
    if values.len() != n * k_steps * n_controls {
        return Err(Error::Misaligned(
            "projected field shape differs from the ensemble".into(),
        ));
    }
    let mut out = vec![0.0; values.len()];
    for t in 0..k_steps {
        let proj = Projector::new(basis.design(ensemble, states, t)?, &format!("projection at step {t}"))?;
        for j in 0..n_controls {
            let y: Vec<f64> = (0..n).map(|i| values[(i * k_steps + t) * n_controls + j]).collect();
            for (i, v) in proj.project(&y).into_iter().enumerate() {
                out[(i * k_steps + t) * n_controls + j] = v;
            }
        }
    }
    Ok(out)
}

#[derive(Clone, Debug)]
pub struct HamiltonianGradientField {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_controls: usize,
    pub dt: f64,
    pub raw: Vec<f64>,
    pub projected: Vec<f64>,
}

impl HamiltonianGradientField {
    pub fn build(
        ensemble: &PathEnsemble,
        states: &StatePaths,
        bundle: &AdjointBundle,
        projection_basis: &RegressionBasis,
    ) -> Result<Self> {
        let raw = hamiltonian_gradient(ensemble, states, bundle)?;
        let projected = conditional_projection(ensemble, Some(states), &raw, states.n_controls, projection_basis)?;
        Ok(Self {
            n_paths: states.n_paths,
            n_steps: states.n_steps,
            n_controls: states.n_controls,
            dt: states.dt,
            raw,
            projected,
        })
    }

    #[inline]
    pub fn projected(&self, path: usize, step: usize, control: usize) -> f64 {
        self.projected[(path * self.n_steps + step) * self.n_controls + control]
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct CriticalityRecord {
    /// Per-path `sum_t |projected gradient|^2 dt`, summarized.
    pub score: Summary,
    /// Mean of `|projected gradient|^2` at each step.
    pub profile: Vec<f64>,
}

pub fn criticality_score(gradient: &HamiltonianGradientField) -> CriticalityRecord {
    let (k_steps, nc) = (gradient.n_steps, gradient.n_controls);
    let sq = |i: usize, t: usize| (0..nc).map(|j| gradient.projected(i, t, j).powi(2)).sum::<f64>();
    let score = Summary::from_fn(gradient.n_paths, |i| {
        (0..k_steps).map(|t| sq(i, t)).sum::<f64>() * gradient.dt
    });
    let profile = (0..k_steps)
        .map(|t| Summary::from_fn(gradient.n_paths, |i| sq(i, t)).mean)
        .collect();
    CriticalityRecord { score, profile }
}

/// The pieces of a control problem shared by the optimizer and the checks.
#[derive(Clone)]
pub struct Problem<'a> {
    pub dynamics: &'a dyn Dynamics,
    pub cost: &'a dyn Cost,
    pub system: &'a DissectingSystem,
    pub level: usize,
    pub adjoint_basis: Arc<RegressionBasis>,
    pub projection_basis: Arc<RegressionBasis>,
}

/// States, adjoints and projected gradient for one policy.
pub struct Evaluation {
    pub states: StatePaths,
    pub performance: Summary,
    pub bundle: AdjointBundle,
    pub gradient: HamiltonianGradientField,
    pub criticality: CriticalityRecord,
}

pub fn evaluate_policy(
    problem: &Problem<'_>,
    ensemble: &PathEnsemble,
    fit_ensemble: Option<&PathEnsemble>,
    policy: &dyn ControlPolicy,
) -> Result<Evaluation> {
    policy.filtration().check_basis(&problem.projection_basis)?;
    let states = simulate_state(ensemble, problem.dynamics, policy).stage("state equation")?;
    let fit_states = match fit_ensemble {
        Some(e) => Some(simulate_state(e, problem.dynamics, policy).stage("state equation on the fitting ensemble")?),
        None => None,
    };
    let main = Sample::new(ensemble, &states)?;
    let fit = match (fit_ensemble, fit_states.as_ref()) {
        (Some(e), Some(s)) => Some(Sample::new(e, s)?),
        _ => None,
    };
    let bundle = build_adjoint_bundle(
        main,
        fit,
        problem.cost,
        problem.system,
        problem.level,
        problem.adjoint_basis.clone(),
    )?;
    finish_evaluation(problem, ensemble, states, bundle)
}

fn finish_evaluation(
    problem: &Problem<'_>,
    ensemble: &PathEnsemble,
    states: StatePaths,
    bundle: AdjointBundle,
) -> Result<Evaluation> {
    let performance = performance(ensemble, &states, problem.cost).stage("performance functional")?;
    let gradient = HamiltonianGradientField::build(ensemble, &states, &bundle, &problem.projection_basis)
        .stage("Hamiltonian gradient and its projection")?;
    let criticality = criticality_score(&gradient);
    Ok(Evaluation {
        states,
        performance,
        bundle,
        gradient,
        criticality,
    })
}

/// `E[sum_t sum_j projected_j(t) du_j/dtheta(t) dt]` with the state fixed.
pub fn parameter_gradient(
    ensemble: &PathEnsemble,
    policy: &dyn ControlPolicy,
    states: &StatePaths,
    gradient: &HamiltonianGradientField,
) -> Vec<f64> {
    let (nc, np) = (policy.n_controls(), policy.params().len());
    let per_path: Vec<Vec<f64>> = (0..states.n_paths)
        .into_par_iter()
        .map(|i| {
            let mut jac = vec![0.0; nc * np];
            let mut acc = vec![0.0; np];
            for t in 0..states.n_steps {
                policy.jacobian(&ensemble.observe(None, i, t), states.observed(i, t), &mut jac);
                for j in 0..nc {
                    let g = gradient.projected(i, t, j);
                    for (a, d) in acc.iter_mut().zip(&jac[j * np..(j + 1) * np]) {
                        *a += g * d * states.dt;
                    }
                }
            }
            acc
        })
        .collect();
    (0..np)
        .map(|a| Summary::from_fn(per_path.len(), |i| per_path[i][a]).mean)
        .collect()
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct OptimizerConfig {
    pub max_iter: usize,
    pub gamma0: f64,
    /// `gamma_m = gamma0 / (1 + m / decay)`.
    pub decay: f64,
    pub refit_period: usize,
    /// Stop once the criticality score falls below this.
    pub tolerance: f64,
}

impl Default for OptimizerConfig {
    fn default() -> Self {
        Self {
            max_iter: 40,
            gamma0: 1.0,
            decay: 50.0,
            refit_period: 5,
            tolerance: 0.0,
        }
    }
}

impl OptimizerConfig {
    pub fn step(&self, m: usize) -> f64 {
        self.gamma0 / (1.0 + m as f64 / self.decay)
    }

    pub fn validate(&self) -> Result<()> {
        if self.max_iter == 0 || self.refit_period == 0 || !(self.decay > 0.0) || !(self.gamma0 >= 0.0) {
            return Err(Error::invalid(format!("optimizer settings out of range: {self:?}")));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct TraceRow {
    pub iter: usize,
    pub theta: Vec<f64>,
    pub performance: f64,
    pub performance_se: f64,
    pub score: f64,
    pub gradient: Vec<f64>,
    pub step: f64,
    pub refit: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OptimizationTrace {
    pub rows: Vec<TraceRow>,
    pub termination: String,
}

impl OptimizationTrace {
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        let np = self.rows.first().map_or(0, |r| r.theta.len());
        let th: Vec<String> = (0..np).map(|j| format!("theta_{j}")).collect();
        let gr: Vec<String> = (0..np).map(|j| format!("grad_{j}")).collect();
        writeln!(w, "iter,{},J,J_se,score,{},step,refit", th.join(","), gr.join(","))?;
        for r in &self.rows {
            let t: Vec<String> = r.theta.iter().map(|v| v.to_string()).collect();
            let g: Vec<String> = r.gradient.iter().map(|v| v.to_string()).collect();
            writeln!(
                w,
                "{},{},{},{},{},{},{},{}",
                r.iter,
                t.join(","),
                r.performance,
                r.performance_se,
                r.score,
                g.join(","),
                r.step,
                r.refit
            )?;
        }
        Ok(())
    }
}

/// Projected gradient ascent `theta <- clamp(theta + gamma_m g_m)`, with the
/// adjoint fields refitted every `refit_period` iterations.
pub fn optimize_policy(
    problem: &Problem<'_>,
    ensemble: &PathEnsemble,
    fit_ensemble: Option<&PathEnsemble>,
    mut policy: Box<dyn ControlPolicy>,
    config: &OptimizerConfig,
) -> Result<(Box<dyn ControlPolicy>, OptimizationTrace)> {
    config.validate()?;
    let bounds = policy.param_box();
    if !bounds.in_shrunk(policy.params()) {
        return Err(Error::Admissibility(
            "initial parameters outside the admissible box".into(),
        ));
    }
    let mut rows = Vec::with_capacity(config.max_iter);
    let mut fields = None;
    let mut termination = format!("reached max_iter = {}", config.max_iter);
    for m in 0..config.max_iter {
        let refit = m % config.refit_period == 0 || fields.is_none();
        let eval = if refit {
            evaluate_policy(problem, ensemble, fit_ensemble, policy.as_ref())?
        } else {
            let (dk, kappa) = fields.as_ref().expect("fields fitted earlier");
            let states = simulate_state(ensemble, problem.dynamics, policy.as_ref()).stage("state equation")?;
            let bundle = rebuild_with_fields(
                Sample::new(ensemble, &states)?,
                problem.cost,
                dk,
                kappa,
                problem.level,
                fit_ensemble.is_some(),
            )?;
            finish_evaluation(problem, ensemble, states, bundle)?
        };
        for proxy in &eval.bundle.proxies {
            proxy.check()?;
        }
        if refit {
            fields = Some((eval.bundle.dk_field.clone(), eval.bundle.kappa_field.clone()));
        }
        let grad = parameter_gradient(ensemble, policy.as_ref(), &eval.states, &eval.gradient);
        if grad.iter().any(|g| !g.is_finite()) {
            return Err(Error::NonFiniteGradient(m));
        }
        let step = config.step(m);
        rows.push(TraceRow {
            iter: m,
            theta: policy.params().to_vec(),
            performance: eval.performance.mean,
            performance_se: eval.performance.std_error,
            score: eval.criticality.score.mean,
            gradient: grad.clone(),
            step,
            refit,
        });
        if eval.criticality.score.mean < config.tolerance {
            termination = format!("criticality score below {} at iteration {m}", config.tolerance);
            break;
        }
        let mut theta: Vec<f64> = policy.params().iter().zip(&grad).map(|(t, g)| t + step * g).collect();
        bounds.clamp_shrunk(&mut theta);
        policy.set_params(&theta);
    }
    Ok((policy, OptimizationTrace { rows, termination }))
}

#[derive(Clone, Debug, Serialize)]
pub struct ConsistencyRecord {
    pub anchor: usize,
    pub h_steps: usize,
    /// `d/dy J(u + y beta)` via the variation process.
    pub gateaux: Summary,
    /// `E[alpha sum_{window} projected dH/du dt]`.
    pub hamiltonian: Summary,
    /// Paired per-path difference.
    pub difference: Summary,
    pub z: f64,
}

/// Compares the Gateaux derivative along `beta = alpha 1_(t, t+h] e_j` with
/// the projected Hamiltonian gradient over the same window. `alpha` holds
/// one value per path and must be known at the anchor.
#[allow(clippy::too_many_arguments)]
pub fn simple_perturbation_check(
    ensemble: &PathEnsemble,
    states: &StatePaths,
    cost: &dyn Cost,
    policy: &dyn ControlPolicy,
    gradient: &HamiltonianGradientField,
    anchor: usize,
    h_steps: usize,
    control: usize,
    alpha: &[f64],
) -> Result<ConsistencyRecord> {
    let (n, k_steps, nc) = (states.n_paths, states.n_steps, states.n_controls);
    if anchor + h_steps > k_steps || h_steps == 0 || control >= nc || alpha.len() != n {
        return Err(Error::invalid("perturbation window or direction outside the grid"));
    }
    let mut beta = vec![0.0; n * k_steps * nc];
    for i in 0..n {
        for k in anchor..anchor + h_steps {
            beta[(i * k_steps + k) * nc + control] = alpha[i];
        }
    }
    let g = gateaux_derivative(ensemble, states, cost, policy, &beta)?;
    let ham: Vec<f64> = (0..n)
        .map(|i| {
            alpha[i]
                * (anchor..anchor + h_steps)
                    .map(|k| gradient.projected(i, k, control))
                    .sum::<f64>()
                * states.dt
        })
        .collect();
    let difference = Summary::from_fn(n, |i| g.per_path[i] - ham[i]);
    Ok(ConsistencyRecord {
        anchor,
        h_steps,
        gateaux: g.value,
        hamiltonian: Summary::of(&ham),
        z: difference.z_score(),
        difference,
    })
}

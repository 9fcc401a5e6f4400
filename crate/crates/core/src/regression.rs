//! Cross-sectional regression used for conditional expectations.
//!
//! Features are evaluated on an [`Observation`] at the left edge of a step,
//! so every fitted value is a function of information up to that step.

use std::fmt;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{NoiseModel, Observation, PathEnsemble};
use crate::registry::Registry;
use crate::sde::StatePaths;
use crate::stats::BLOCK;

/// A scalar read off the information available at a step.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub enum Observable {
    Time,
    State,
    InverseState,
    LaggedState(usize),
    RunningNoise(usize),
    RunningCount(usize),
    Intensity(usize),
    Survival(usize),
}

impl Observable {
    pub fn needs_states(&self) -> bool {
        matches!(
            self,
            Observable::State | Observable::InverseState | Observable::LaggedState(_)
        )
    }

    pub fn is_indicator(&self) -> bool {
        matches!(self, Observable::Survival(_))
    }

    pub fn mark(&self) -> Option<usize> {
        match self {
            Observable::RunningNoise(z)
            | Observable::RunningCount(z)
            | Observable::Intensity(z)
            | Observable::Survival(z) => Some(*z),
            _ => None,
        }
    }

    #[inline]
    pub fn eval(&self, obs: &Observation<'_>) -> f64 {
        match *self {
            Observable::Time => obs.time(),
            Observable::State => obs.state().unwrap_or(f64::NAN),
            Observable::InverseState => obs.state().map_or(f64::NAN, |x| 1.0 / x),
            Observable::LaggedState(l) => obs.lagged_state(l).unwrap_or(f64::NAN),
            Observable::RunningNoise(z) => obs.running_noise(z),
            Observable::RunningCount(z) => obs.running_count(z),
            Observable::Intensity(z) => obs.intensity(z),
            Observable::Survival(z) => obs.survived(z),
        }
    }

    /// Parses `time`, `state`, `inverse_state`, `lagged_state:L`,
    /// `running_noise:Z`, `running_count:Z`, `intensity:Z`, `survival:Z`.
    pub fn parse(text: &str) -> Result<Self> {
        let (name, arg) = match text.split_once(':') {
            Some((n, a)) => {
                let v = a
                    .trim()
                    .parse::<usize>()
                    .map_err(|_| Error::Config(format!("bad observable argument in `{text}`")))?;
                (n.trim(), Some(v))
            }
            None => (text.trim(), None),
        };
        let ctor = observable_registry().get(name).copied()?;
        ctor(arg).ok_or_else(|| {
            Error::Config(format!(
                "observable `{text}` takes {}",
                if arg.is_some() { "no argument" } else { "an argument" }
            ))
        })
    }
}

impl fmt::Display for Observable {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Observable::Time => write!(f, "time"),
            Observable::State => write!(f, "state"),
            Observable::InverseState => write!(f, "inverse_state"),
            Observable::LaggedState(l) => write!(f, "lagged_state:{l}"),
            Observable::RunningNoise(z) => write!(f, "running_noise:{z}"),
            Observable::RunningCount(z) => write!(f, "running_count:{z}"),
            Observable::Intensity(z) => write!(f, "intensity:{z}"),
            Observable::Survival(z) => write!(f, "survival:{z}"),
        }
    }
}

type ObservableCtor = fn(Option<usize>) -> Option<Observable>;

pub fn observable_registry() -> Registry<ObservableCtor> {
    let mut reg: Registry<ObservableCtor> = Registry::new("observable");
    reg.register("time", |a| a.is_none().then_some(Observable::Time))
        .register("state", |a| a.is_none().then_some(Observable::State))
        .register("inverse_state", |a| a.is_none().then_some(Observable::InverseState))
        .register("lagged_state", |a| a.map(Observable::LaggedState))
        .register("running_noise", |a| a.map(Observable::RunningNoise))
        .register("running_count", |a| a.map(Observable::RunningCount))
        .register("intensity", |a| a.map(Observable::Intensity))
        .register("survival", |a| a.map(Observable::Survival));
    reg
}

/// A regression feature evaluated at the left edge of a step.
pub trait Feature: Send + Sync + fmt::Debug {
    fn name(&self) -> String;
    fn eval(&self, obs: &Observation<'_>) -> f64;
    fn needs_states(&self) -> bool;
    fn observables(&self) -> Vec<Observable>;
    fn as_monomial(&self) -> Option<&Monomial> {
        None
    }
}

#[inline]
fn ipow(x: f64, p: u32) -> f64 {
    let mut acc = 1.0;
    for _ in 0..p {
        acc *= x;
    }
    acc
}

/// Product of observable powers; the empty product is the intercept.
#[derive(Clone, Debug, PartialEq)]
pub struct Monomial {
    pub factors: Vec<(Observable, u32)>,
}

impl Feature for Monomial {
    fn name(&self) -> String {
        if self.factors.is_empty() {
            return "1".into();
        }
        self.factors
            .iter()
            .map(|(o, p)| if *p == 1 { o.to_string() } else { format!("{o}^{p}") })
            .collect::<Vec<_>>()
            .join("*")
    }

    #[inline]
    fn eval(&self, obs: &Observation<'_>) -> f64 {
        let mut acc = 1.0;
        for (o, p) in &self.factors {
            acc *= ipow(o.eval(obs), *p);
        }
        acc
    }

    fn needs_states(&self) -> bool {
        self.factors.iter().any(|(o, _)| o.needs_states())
    }

    fn observables(&self) -> Vec<Observable> {
        self.factors.iter().map(|(o, _)| *o).collect()
    }

    fn as_monomial(&self) -> Option<&Monomial> {
        Some(self)
    }
}

const PLAN_LIMIT: usize = 32;

/// Monomial bases evaluate each distinct observable once per row.
#[derive(Debug, Clone)]
struct Plan {
    observables: Vec<Observable>,
    terms: Vec<Vec<(usize, u32)>>,
}

impl Plan {
    fn of(features: &[Arc<dyn Feature>]) -> Option<Self> {
        let mut observables: Vec<Observable> = Vec::new();
        let mut terms = Vec::with_capacity(features.len());
        for f in features {
            let m = f.as_monomial()?;
            let mut term = Vec::with_capacity(m.factors.len());
            for (o, p) in &m.factors {
                let idx = observables.iter().position(|x| x == o).unwrap_or_else(|| {
                    observables.push(*o);
                    observables.len() - 1
                });
                term.push((idx, *p));
            }
            terms.push(term);
        }
        (observables.len() <= PLAN_LIMIT).then_some(Self { observables, terms })
    }
}

#[derive(Debug, Clone)]
pub struct RegressionBasis {
    features: Vec<Arc<dyn Feature>>,
    plan: Option<Plan>,
}

impl RegressionBasis {
    pub fn new(features: Vec<Arc<dyn Feature>>) -> Result<Self> {
        if features.is_empty() {
            return Err(Error::invalid("regression basis needs at least one feature"));
        }
        Ok(Self::from_features(features))
    }

    fn from_features(features: Vec<Arc<dyn Feature>>) -> Self {
        let plan = Plan::of(&features);
        Self { features, plan }
    }

    pub fn intercept() -> Self {
        Self::from_features(vec![Arc::new(Monomial { factors: vec![] })])
    }

    /// All monomials of total degree `<= degree` in the observables,
    /// intercept first, then by degree.
    pub fn polynomial(observables: &[Observable], degree: u32) -> Self {
        let mut out: Vec<Vec<usize>> = vec![vec![]];
        let mut frontier: Vec<Vec<usize>> = vec![vec![]];
        for _ in 0..degree {
            let mut next = Vec::new();
            for combo in &frontier {
                let lo = combo.last().copied().unwrap_or(0);
                for i in lo..observables.len() {
                    let mut c = combo.clone();
                    c.push(i);
                    next.push(c);
                }
            }
            out.extend(next.iter().cloned());
            frontier = next;
        }
        let mut seen: Vec<Vec<(Observable, u32)>> = Vec::new();
        for combo in out {
            let mut factors: Vec<(Observable, u32)> = Vec::new();
            for i in combo {
                match factors.last_mut() {
                    Some((o, p)) if *o == observables[i] => *p += 1,
                    _ => factors.push((observables[i], 1)),
                }
            }
            // Indicators are idempotent: higher powers repeat a column.
            for (o, p) in &mut factors {
                if o.is_indicator() {
                    *p = 1;
                }
            }
            if !seen.contains(&factors) {
                seen.push(factors);
            }
        }
        let features = seen
            .into_iter()
            .map(|factors| Arc::new(Monomial { factors }) as Arc<dyn Feature>)
            .collect();
        Self::from_features(features)
    }

    pub fn len(&self) -> usize {
        self.features.len()
    }

    pub fn is_empty(&self) -> bool {
        self.features.is_empty()
    }

    pub fn names(&self) -> Vec<String> {
        self.features.iter().map(|f| f.name()).collect()
    }

    pub fn needs_states(&self) -> bool {
        self.features.iter().any(|f| f.needs_states())
    }

    pub fn observables(&self) -> Vec<Observable> {
        let mut out: Vec<Observable> = Vec::new();
        for o in self.features.iter().flat_map(|f| f.observables()) {
            if !out.contains(&o) {
                out.push(o);
            }
        }
        out
    }

    #[inline]
    pub fn eval_row(&self, obs: &Observation<'_>, row: &mut [f64]) {
        let Some(plan) = &self.plan else {
            for (v, f) in row.iter_mut().zip(&self.features) {
                *v = f.eval(obs);
            }
            return;
        };
        let mut cache = [0.0; PLAN_LIMIT];
        for (c, o) in cache.iter_mut().zip(&plan.observables) {
            *c = o.eval(obs);
        }
        for (v, term) in row.iter_mut().zip(&plan.terms) {
            let mut acc = 1.0;
            for &(idx, p) in term {
                acc *= ipow(cache[idx], p);
            }
            *v = acc;
        }
    }

    pub fn design(&self, ensemble: &PathEnsemble, states: Option<&StatePaths>, step: usize) -> Result<Design> {
        if self.needs_states() && states.is_none() {
            return Err(Error::invalid("basis uses the state but no state paths were supplied"));
        }
        let (n, p) = (ensemble.n_paths(), self.len());
        let mut data = vec![0.0; n * p];
        data.par_chunks_mut(p).enumerate().for_each(|(i, row)| {
            self.eval_row(&ensemble.observe(states, i, step), row);
        });
        if let Some(pos) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::DegenerateDesign {
                context: format!(
                    "non-finite feature `{}` at path {} step {step}",
                    self.names()[pos % p],
                    pos / p
                ),
            });
        }
        Ok(Design { n, p, data })
    }
}

/// Serializable basis description: observables and a total degree.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct BasisSpec {
    pub observables: Vec<String>,
    pub degree: u32,
}

impl BasisSpec {
    pub fn build(&self, n_marks: usize) -> Result<RegressionBasis> {
        let obs = self
            .observables
            .iter()
            .map(|s| Observable::parse(s))
            .collect::<Result<Vec<_>>>()?;
        if let Some(z) = obs.iter().filter_map(|o| o.mark()).find(|z| *z >= n_marks) {
            return Err(Error::Config(format!("observable mark {z} outside {n_marks} mark(s)")));
        }
        Ok(RegressionBasis::polynomial(&obs, self.degree))
    }

    /// Degree-2 polynomial in the state (when present), the running noise of
    /// every mark and, for stochastic intensities, the current intensity.
    pub fn default_for(model: &NoiseModel, n_marks: usize, with_state: bool) -> Self {
        let mut observables = Vec::new();
        if with_state {
            observables.push("state".to_string());
        }
        for z in 0..n_marks {
            observables.push(format!("running_noise:{z}"));
        }
        if matches!(model, NoiseModel::DoublyStochasticPoisson { .. }) {
            for z in 0..n_marks {
                observables.push(format!("intensity:{z}"));
            }
        }
        Self { observables, degree: 2 }
    }
}

/// Row-major `n x p` design matrix.
#[derive(Clone, Debug)]
pub struct Design {
    pub n: usize,
    pub p: usize,
    pub data: Vec<f64>,
}

impl Design {
    #[inline]
    pub fn row(&self, i: usize) -> &[f64] {
        &self.data[i * self.p..(i + 1) * self.p]
    }

    /// `X^T X`, with block partial sums combined in block order.
    pub fn gram(&self) -> DMatrix<f64> {
        let p = self.p;
        let blocks: Vec<Vec<f64>> = (0..self.n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![0.0; p * p];
                let hi = ((b + 1) * BLOCK).min(self.n);
                for r in self.data[b * BLOCK * p..hi * p].chunks_exact(p) {
                    for (a, (row, &ra)) in acc.chunks_exact_mut(p).zip(r).enumerate() {
                        for (o, &rc) in row[a..].iter_mut().zip(&r[a..]) {
                            *o += ra * rc;
                        }
                    }
                }
                acc
            })
            .collect();
        let mut g = DMatrix::zeros(p, p);
        for acc in &blocks {
            for a in 0..p {
                for c in a..p {
                    g[(a, c)] += acc[a * p + c];
                }
            }
        }
        for a in 0..p {
            for c in 0..a {
                g[(a, c)] = g[(c, a)];
            }
        }
        g
    }

    /// `X^T y` with ordered block reduction.
    pub fn cross(&self, y: &[f64]) -> DVector<f64> {
        assert_eq!(y.len(), self.n, "response length differs from the design");
        let p = self.p;
        let blocks: Vec<Vec<f64>> = (0..self.n.div_ceil(BLOCK))
            .into_par_iter()
            .map(|b| {
                let mut acc = vec![0.0; p];
                let (lo, hi) = (b * BLOCK, ((b + 1) * BLOCK).min(self.n));
                for (r, &yi) in self.data[lo * p..hi * p].chunks_exact(p).zip(&y[lo..hi]) {
                    for (o, &x) in acc.iter_mut().zip(r) {
                        *o += x * yi;
                    }
                }
                acc
            })
            .collect();
        let mut v = DVector::zeros(p);
        for acc in &blocks {
            for a in 0..p {
                v[a] += acc[a];
            }
        }
        v
    }

    pub fn fitted(&self, coef: &[f64]) -> Vec<f64> {
        self.data
            .par_chunks_exact(self.p)
            .map(|r| r.iter().zip(coef).map(|(x, c)| x * c).sum())
            .collect()
    }
}

/// `(G + r I)^{-1}` with `r = 1e-8 trace(G) / p`.
pub fn ridge_inverse(gram: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let p = gram.nrows();
    let ridge = 1e-8 * gram.trace() / p as f64;
    let degenerate = || Error::DegenerateDesign {
        context: context.to_string(),
    };
    if !(ridge.is_finite() && ridge > 0.0) {
        return Err(degenerate());
    }
    let mut m = gram.clone();
    for a in 0..p {
        m[(a, a)] += ridge;
    }
    let inv = m.cholesky().ok_or_else(degenerate)?.inverse();
    if inv.iter().all(|v| v.is_finite()) {
        Ok(inv)
    } else {
        Err(degenerate())
    }
}

/// Moore-Penrose inverse of a symmetric PSD matrix; eigenvalues below
/// `1e-12 * max` are treated as zero.
pub fn pseudo_inverse(gram: &DMatrix<f64>, context: &str) -> Result<DMatrix<f64>> {
    let eig = SymmetricEigen::new(gram.clone());
    let max = eig.eigenvalues.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    if !(max.is_finite() && max > 0.0) {
        return Err(Error::DegenerateDesign {
            context: context.to_string(),
        });
    }
    let tol = 1e-12 * max;
    let inv_vals = eig.eigenvalues.map(|v| if v > tol { 1.0 / v } else { 0.0 });
    let q = &eig.eigenvectors;
    Ok(q * DMatrix::from_diagonal(&inv_vals) * q.transpose())
}

/// Ridge least-squares coefficients of `y` on the design.
pub fn ridge_fit(design: &Design, y: &[f64], context: &str) -> Result<Vec<f64>> {
    let inv = ridge_inverse(&design.gram(), context)?;
    Ok((inv * design.cross(y)).iter().copied().collect())
}

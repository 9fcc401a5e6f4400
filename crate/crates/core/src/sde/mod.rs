//! Controlled jump SDE `dX = b(t, u, X) dt + sum_z phi(t, z, u, X) mu(dt, z)`
//! with an Euler scheme evaluated at left endpoints.

mod exact;
mod simulate;

pub use exact::DyadicProduct;
pub use simulate::{
    first_variation, first_variation_exact, gateaux_derivative, performance, perturbed_performance, simulate_state,
    validate_callbacks, variation_process, variation_process_exact, CostPaths, GateauxRecord, ProbeReport, StatePaths,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::{Observation, PathEnsemble};
use crate::registry::Registry;
use crate::regression::{Observable, RegressionBasis};

/// Drift and jump coefficients with their partial derivatives. `ctx` is the
/// left-edge information of the current step; coefficients may depend on it
/// (for instance through a survival indicator).
pub trait Dynamics: Send + Sync {
    fn name(&self) -> &str;
    fn initial(&self) -> f64;
    fn n_controls(&self) -> usize;
    fn n_marks(&self) -> usize;

    fn drift(&self, ctx: &Observation<'_>, u: &[f64], x: f64) -> f64;
    fn drift_x(&self, ctx: &Observation<'_>, u: &[f64], x: f64) -> f64;
    fn drift_u(&self, ctx: &Observation<'_>, u: &[f64], x: f64, out: &mut [f64]);

    fn jump(&self, ctx: &Observation<'_>, z: usize, u: &[f64], x: f64) -> f64;
    fn jump_x(&self, ctx: &Observation<'_>, z: usize, u: &[f64], x: f64) -> f64;
    fn jump_u(&self, ctx: &Observation<'_>, z: usize, u: &[f64], x: f64, out: &mut [f64]);

    /// Noise increment that drives the state on cell `(step, z)`.
    fn effective_noise(&self, ensemble: &PathEnsemble, path: usize, step: usize, z: usize) -> f64 {
        ensemble.increment(path, step, z)
    }
}

/// Running cost `f(t, u, x)` and terminal cost `g(x)`, both to be maximized
/// in expectation.
pub trait Cost: Send + Sync {
    fn name(&self) -> &str;
    fn running(&self, ctx: &Observation<'_>, u: &[f64], x: f64) -> f64;
    fn running_x(&self, ctx: &Observation<'_>, u: &[f64], x: f64) -> f64;
    fn running_u(&self, ctx: &Observation<'_>, u: &[f64], x: f64, out: &mut [f64]);
    fn terminal(&self, x: f64) -> f64;
    fn terminal_x(&self, x: f64) -> f64;
}

/// Open box `prod (lower_j, upper_j)` with an interior margin of
/// `margin_fraction` times the width (zero for unbounded sides).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ControlBox {
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    pub margin_fraction: f64,
}

impl ControlBox {
    pub fn new(lower: Vec<f64>, upper: Vec<f64>, margin_fraction: f64) -> Result<Self> {
        if lower.len() != upper.len() || lower.is_empty() {
            return Err(Error::invalid("control box bounds must have equal, positive length"));
        }
        if lower.iter().zip(&upper).any(|(l, u)| !(l < u)) {
            return Err(Error::invalid("control box needs lower < upper"));
        }
        if !(0.0..0.5).contains(&margin_fraction) {
            return Err(Error::invalid("margin fraction must lie in [0, 0.5)"));
        }
        Ok(Self {
            lower,
            upper,
            margin_fraction,
        })
    }

    pub fn unbounded(dim: usize) -> Self {
        Self {
            lower: vec![f64::NEG_INFINITY; dim],
            upper: vec![f64::INFINITY; dim],
            margin_fraction: 0.0,
        }
    }

    pub fn dim(&self) -> usize {
        self.lower.len()
    }

    pub fn margin(&self, j: usize) -> f64 {
        let w = self.upper[j] - self.lower[j];
        if w.is_finite() {
            self.margin_fraction * w
        } else {
            0.0
        }
    }

    /// Closed shrunken box `[lower + eps, upper - eps]`.
    pub fn shrunk(&self, j: usize) -> (f64, f64) {
        let e = self.margin(j);
        (self.lower[j] + e, self.upper[j] - e)
    }

    pub fn in_shrunk(&self, v: &[f64]) -> bool {
        v.iter().enumerate().all(|(j, x)| {
            let (lo, hi) = self.shrunk(j);
            *x >= lo && *x <= hi
        })
    }

    /// As [`in_shrunk`](Self::in_shrunk), allowing `1e-12` of the box width
    /// for coordinates recovered from controls by division.
    pub fn in_shrunk_up_to_rounding(&self, v: &[f64]) -> bool {
        v.iter()
            .zip(self.shrunk_with_slack())
            .all(|(x, (lo, hi))| *x >= lo && *x <= hi)
    }

    pub(crate) fn shrunk_with_slack(&self) -> Vec<(f64, f64)> {
        (0..self.dim())
            .map(|j| {
                let (lo, hi) = self.shrunk(j);
                let slack = 1e-12 * (self.upper[j] - self.lower[j]).min(1.0 / f64::EPSILON);
                (lo - slack, hi + slack)
            })
            .collect()
    }

    pub fn in_open(&self, v: &[f64]) -> bool {
        v.iter()
            .enumerate()
            .all(|(j, x)| *x > self.lower[j] && *x < self.upper[j])
    }

    pub fn clamp_shrunk(&self, v: &mut [f64]) {
        for (j, x) in v.iter_mut().enumerate() {
            let (lo, hi) = self.shrunk(j);
            *x = x.clamp(lo, hi);
        }
    }
}

/// Information available to the controller.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Filtration {
    /// The full noise filtration.
    Full,
    /// Only the listed marks and the state delayed by `state_lag` steps.
    Partial { marks: Vec<usize>, state_lag: usize },
    /// Nothing beyond time itself: conditional expectations are plain means.
    Trivial,
}

impl Filtration {
    pub fn admits(&self, o: &Observable) -> bool {
        match self {
            Filtration::Full => true,
            Filtration::Trivial => matches!(o, Observable::Time),
            Filtration::Partial { marks, state_lag } => match o {
                Observable::Time => true,
                Observable::State | Observable::InverseState => *state_lag == 0,
                Observable::LaggedState(l) => l >= state_lag,
                _ => o.mark().is_some_and(|z| marks.contains(&z)),
            },
        }
    }

    pub fn state_lag(&self) -> Option<usize> {
        match self {
            Filtration::Full => Some(0),
            Filtration::Partial { state_lag, .. } => Some(*state_lag),
            Filtration::Trivial => None,
        }
    }

    pub fn check_basis(&self, basis: &RegressionBasis) -> Result<()> {
        match basis.observables().iter().find(|o| !self.admits(o)) {
            Some(o) => Err(Error::invalid(format!(
                "observable `{o}` in basis {:?} is not measurable for the policy filtration",
                basis.names()
            ))),
            None => Ok(()),
        }
    }
}

/// A parameterized feedback control `u_theta`. The policy sees the state as
/// allowed by its filtration (`observed_state`), and the control set is
/// expressed in coordinates `u / scale(x)`.
pub trait ControlPolicy: Send + Sync {
    fn name(&self) -> &str;
    fn n_controls(&self) -> usize;
    fn params(&self) -> &[f64];
    fn set_params(&mut self, theta: &[f64]);
    fn control_set(&self) -> &ControlBox;
    fn filtration(&self) -> &Filtration;

    fn control(&self, ctx: &Observation<'_>, observed_state: f64, out: &mut [f64]);
    /// `d u / d theta`, row-major `n_controls x n_params`, state held fixed.
    fn jacobian(&self, ctx: &Observation<'_>, observed_state: f64, out: &mut [f64]);
    /// Map from control values to box coordinates.
    fn scale(&self, observed_state: f64) -> f64;

    /// Admissible parameter box; iterates are clamped into it.
    fn param_box(&self) -> ControlBox;

    fn boxed_clone(&self) -> Box<dyn ControlPolicy>;
}

/// `u = theta`, a constant control.
#[derive(Clone, Debug)]
pub struct ConstantPolicy {
    theta: Vec<f64>,
    set: ControlBox,
    filtration: Filtration,
}

impl ConstantPolicy {
    pub fn new(theta: Vec<f64>, set: ControlBox) -> Result<Self> {
        if theta.len() != set.dim() {
            return Err(Error::invalid("parameter and control-set dimensions differ"));
        }
        if !set.in_shrunk(&theta) {
            return Err(Error::invalid(format!(
                "constant control {theta:?} outside the shrunken control set"
            )));
        }
        Ok(Self {
            theta,
            set,
            filtration: Filtration::Full,
        })
    }

    pub fn with_filtration(mut self, f: Filtration) -> Self {
        self.filtration = f;
        self
    }
}

impl ControlPolicy for ConstantPolicy {
    fn name(&self) -> &str {
        "constant"
    }

    fn n_controls(&self) -> usize {
        self.theta.len()
    }

    fn params(&self) -> &[f64] {
        &self.theta
    }

    fn set_params(&mut self, theta: &[f64]) {
        self.theta.copy_from_slice(theta);
    }

    fn control_set(&self) -> &ControlBox {
        &self.set
    }

    fn filtration(&self) -> &Filtration {
        &self.filtration
    }

    fn control(&self, _ctx: &Observation<'_>, _x: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.theta);
    }

    fn jacobian(&self, _ctx: &Observation<'_>, _x: f64, out: &mut [f64]) {
        let n = self.theta.len();
        out.fill(0.0);
        for j in 0..n {
            out[j * n + j] = 1.0;
        }
    }

    fn scale(&self, _x: f64) -> f64 {
        1.0
    }

    fn param_box(&self) -> ControlBox {
        self.set.clone()
    }

    fn boxed_clone(&self) -> Box<dyn ControlPolicy> {
        Box::new(self.clone())
    }
}

/// `u_j = pi_j x`: constant proportions of the observed state.
#[derive(Clone, Debug)]
pub struct ProportionalPolicy {
    pi: Vec<f64>,
    set: ControlBox,
    filtration: Filtration,
}

impl ProportionalPolicy {
    pub fn new(pi: Vec<f64>, set: ControlBox) -> Result<Self> {
        if pi.len() != set.dim() {
            return Err(Error::invalid("parameter and control-set dimensions differ"));
        }
        if !set.in_shrunk(&pi) {
            return Err(Error::invalid(format!(
                "proportions {pi:?} outside the shrunken control set"
            )));
        }
        Ok(Self {
            pi,
            set,
            filtration: Filtration::Full,
        })
    }
}

impl ControlPolicy for ProportionalPolicy {
    fn name(&self) -> &str {
        "proportional"
    }

    fn n_controls(&self) -> usize {
        self.pi.len()
    }

    fn params(&self) -> &[f64] {
        &self.pi
    }

    fn set_params(&mut self, theta: &[f64]) {
        self.pi.copy_from_slice(theta);
    }

    fn control_set(&self) -> &ControlBox {
        &self.set
    }

    fn filtration(&self) -> &Filtration {
        &self.filtration
    }

    fn control(&self, _ctx: &Observation<'_>, x: f64, out: &mut [f64]) {
        for (o, p) in out.iter_mut().zip(&self.pi) {
            *o = p * x;
        }
    }

    fn jacobian(&self, _ctx: &Observation<'_>, x: f64, out: &mut [f64]) {
        let n = self.pi.len();
        out.fill(0.0);
        for j in 0..n {
            out[j * n + j] = x;
        }
    }

    fn scale(&self, x: f64) -> f64 {
        x
    }

    fn param_box(&self) -> ControlBox {
        self.set.clone()
    }

    fn boxed_clone(&self) -> Box<dyn ControlPolicy> {
        Box::new(self.clone())
    }
}

pub type PolicyFactory = fn(Vec<f64>, ControlBox) -> Result<Box<dyn ControlPolicy>>;

pub fn policy_registry() -> Registry<PolicyFactory> {
    let mut reg: Registry<PolicyFactory> = Registry::new("policy");
    reg.register("constant", |t, b| Ok(Box::new(ConstantPolicy::new(t, b)?)))
        .register("proportional", |t, b| Ok(Box::new(ProportionalPolicy::new(t, b)?)));
    reg
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn box_margin_and_clamp() {
        let b = ControlBox::new(vec![0.0], vec![1.0], 1e-3).unwrap();
        assert_eq!(b.shrunk(0), (1e-3, 1.0 - 1e-3));
        let mut v = [1.5];
        b.clamp_shrunk(&mut v);
        assert_eq!(v[0], 1.0 - 1e-3);
        assert!(!b.in_open(&[1.0]) && b.in_open(&[0.5]));
        assert!(ControlBox::new(vec![1.0], vec![0.0], 0.0).is_err());
        assert_eq!(ControlBox::unbounded(1).margin(0), 0.0);
    }

    #[test]
    fn policies_respect_margin() {
        let b = ControlBox::new(vec![0.0], vec![1.0], 1e-3).unwrap();
        assert!(ProportionalPolicy::new(vec![0.9995], b.clone()).is_err());
        assert!(ConstantPolicy::new(vec![0.5], b.clone()).is_ok());
        let reg = policy_registry();
        let p = reg.get("proportional").unwrap()(vec![0.3], b).unwrap();
        assert_eq!(p.params(), &[0.3]);
    }

    #[test]
    fn partial_filtration_admission() {
        let f = Filtration::Partial {
            marks: vec![1],
            state_lag: 1,
        };
        assert!(f.admits(&Observable::RunningNoise(1)));
        assert!(!f.admits(&Observable::RunningNoise(0)));
        assert!(!f.admits(&Observable::State));
        assert!(f.admits(&Observable::LaggedState(2)));
        assert!(Filtration::Trivial.admits(&Observable::Time));
        assert!(!Filtration::Trivial.admits(&Observable::State));
    }
}

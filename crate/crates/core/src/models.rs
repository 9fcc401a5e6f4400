//! Affine dynamics and polynomial costs, including the linear-quadratic toy.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::noise::Observation;
use crate::sde::{Cost, Dynamics};

/// `b = a0 + ax x + sum_j au_j u_j` and per mark
/// `phi_z = c0_z + cx_z x + sum_j cu_{z,j} u_j`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinearDynamics {
    pub initial: f64,
    pub drift_const: f64,
    pub drift_x: f64,
    pub drift_u: Vec<f64>,
    pub jump_const: Vec<f64>,
    pub jump_x: Vec<f64>,
    /// `[mark][control]`.
    pub jump_u: Vec<Vec<f64>>,
}

impl LinearDynamics {
    pub fn validate(&self) -> Result<()> {
        let m = self.jump_const.len();
        let nc = self.drift_u.len();
        if m == 0 || nc == 0 {
            return Err(Error::invalid("linear dynamics need at least one mark and one control"));
        }
        if self.jump_x.len() != m || self.jump_u.len() != m || self.jump_u.iter().any(|r| r.len() != nc) {
            return Err(Error::invalid("linear dynamics coefficient shapes disagree"));
        }
        Ok(())
    }
}

impl Dynamics for LinearDynamics {
    fn name(&self) -> &str {
        "linear"
    }

    fn initial(&self) -> f64 {
        self.initial
    }

    fn n_controls(&self) -> usize {
        self.drift_u.len()
    }

    fn n_marks(&self) -> usize {
        self.jump_const.len()
    }

    fn drift(&self, _: &Observation<'_>, u: &[f64], x: f64) -> f64 {
        self.drift_const + self.drift_x * x + self.drift_u.iter().zip(u).map(|(a, v)| a * v).sum::<f64>()
    }

    fn drift_x(&self, _: &Observation<'_>, _: &[f64], _: f64) -> f64 {
        self.drift_x
    }

    fn drift_u(&self, _: &Observation<'_>, _: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.drift_u);
    }

    fn jump(&self, _: &Observation<'_>, z: usize, u: &[f64], x: f64) -> f64 {
        self.jump_const[z] + self.jump_x[z] * x + self.jump_u[z].iter().zip(u).map(|(a, v)| a * v).sum::<f64>()
    }

    fn jump_x(&self, _: &Observation<'_>, z: usize, _: &[f64], _: f64) -> f64 {
        self.jump_x[z]
    }

    fn jump_u(&self, _: &Observation<'_>, z: usize, _: &[f64], _: f64, out: &mut [f64]) {
        out.copy_from_slice(&self.jump_u[z]);
    }
}

/// `f = r0 + rx x + rxx x^2 + sum_j (ru_j u_j + ruu_j u_j^2)`,
/// `g = g0 + gx x + gxx x^2`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolynomialCost {
    pub running_const: f64,
    pub running_x: f64,
    pub running_xx: f64,
    pub running_u: Vec<f64>,
    pub running_uu: Vec<f64>,
    pub terminal_const: f64,
    pub terminal_x: f64,
    pub terminal_xx: f64,
}

impl PolynomialCost {
    pub fn terminal_only(n_controls: usize, g0: f64, gx: f64, gxx: f64) -> Self {
        Self {
            running_const: 0.0,
            running_x: 0.0,
            running_xx: 0.0,
            running_u: vec![0.0; n_controls],
            running_uu: vec![0.0; n_controls],
            terminal_const: g0,
            terminal_x: gx,
            terminal_xx: gxx,
        }
    }
}

impl Cost for PolynomialCost {
    fn name(&self) -> &str {
        "polynomial"
    }

    fn running(&self, _: &Observation<'_>, u: &[f64], x: f64) -> f64 {
        let mut v = self.running_const + self.running_x * x + self.running_xx * x * x;
        for (j, uj) in u.iter().enumerate() {
            v += self.running_u[j] * uj + self.running_uu[j] * uj * uj;
        }
        v
    }

    fn running_x(&self, _: &Observation<'_>, _: &[f64], x: f64) -> f64 {
        self.running_x + 2.0 * self.running_xx * x
    }

    fn running_u(&self, _: &Observation<'_>, u: &[f64], _: f64, out: &mut [f64]) {
        for (j, o) in out.iter_mut().enumerate() {
            *o = self.running_u[j] + 2.0 * self.running_uu[j] * u[j];
        }
    }

    fn terminal(&self, x: f64) -> f64 {
        self.terminal_const + self.terminal_x * x + self.terminal_xx * x * x
    }

    fn terminal_x(&self, x: f64) -> f64 {
        self.terminal_x + 2.0 * self.terminal_xx * x
    }
}

/// `dX = u dt + noise dW`, `X_0 = 0`, one control, one mark.
pub fn quadratic_toy_dynamics(noise: f64) -> LinearDynamics {
    LinearDynamics {
        initial: 0.0,
        drift_const: 0.0,
        drift_x: 0.0,
        drift_u: vec![1.0],
        jump_const: vec![noise],
        jump_x: vec![0.0],
        jump_u: vec![vec![0.0]],
    }
}

/// `f = 0`, `g(x) = -x^2`.
pub fn quadratic_toy_cost() -> PolynomialCost {
    PolynomialCost::terminal_only(1, 0.0, 0.0, -1.0)
}

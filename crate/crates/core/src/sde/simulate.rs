use rayon::prelude::*;
use serde::Serialize;

use super::{ControlPolicy, Cost, DyadicProduct, Dynamics};
use crate::error::{Error, Result};
use crate::noise::PathEnsemble;
use crate::stats::Summary;

/// Simulated state, controls and coefficient derivatives along every path.
///
/// Layouts: `x` is `[path][0..=K]`; `u`, `bu` are `[path][K][control]`;
/// `bx` is `[path][K]`; `phix`, `noise` are `[path][K][mark]`; `phiu` is
/// `[path][K][mark][control]`.
#[derive(Clone, Debug, PartialEq)]
pub struct StatePaths {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_marks: usize,
    pub n_controls: usize,
    pub dt: f64,
    pub state_lag: usize,
    pub x: Vec<f64>,
    pub u: Vec<f64>,
    pub bx: Vec<f64>,
    pub bu: Vec<f64>,
    pub phix: Vec<f64>,
    pub phiu: Vec<f64>,
    pub noise: Vec<f64>,
}

impl StatePaths {
    #[inline]
    pub fn x(&self, path: usize, step: usize) -> f64 {
        self.x[path * (self.n_steps + 1) + step]
    }

    pub fn terminal(&self, path: usize) -> f64 {
        self.x(path, self.n_steps)
    }

    /// The state as seen by the controller at `step`.
    #[inline]
    pub fn observed(&self, path: usize, step: usize) -> f64 {
        self.x(path, step.saturating_sub(self.state_lag))
    }

    #[inline]
    pub fn u(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.n_steps + step) * self.n_controls;
        &self.u[i..i + self.n_controls]
    }

    #[inline]
    pub fn bx(&self, path: usize, step: usize) -> f64 {
        self.bx[path * self.n_steps + step]
    }

    #[inline]
    pub fn bu(&self, path: usize, step: usize) -> &[f64] {
        let i = (path * self.n_steps + step) * self.n_controls;
        &self.bu[i..i + self.n_controls]
    }

    #[inline]
    pub fn phix(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.phix[(path * self.n_steps + step) * self.n_marks + mark]
    }

    #[inline]
    pub fn phiu(&self, path: usize, step: usize, mark: usize) -> &[f64] {
        let i = ((path * self.n_steps + step) * self.n_marks + mark) * self.n_controls;
        &self.phiu[i..i + self.n_controls]
    }

    #[inline]
    pub fn noise(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.noise[(path * self.n_steps + step) * self.n_marks + mark]
    }

    /// `1 + b_x dt + sum_z phi_x nu`, the one-step factor of the first
    /// variation.
    #[inline]
    pub fn variation_factor(&self, path: usize, step: usize) -> f64 {
        let mut f = 1.0 + self.bx(path, step) * self.dt;
        for z in 0..self.n_marks {
            f += self.phix(path, step, z) * self.noise(path, step, z);
        }
        f
    }

    pub fn check_aligned(&self, ensemble: &PathEnsemble) -> Result<()> {
        if (self.n_paths, self.n_steps, self.n_marks) != (ensemble.n_paths(), ensemble.n_steps(), ensemble.n_marks()) {
            return Err(Error::Misaligned("state paths and ensemble differ in shape".into()));
        }
        Ok(())
    }

    /// CSV rows `path, step, x, u_0, ...` (controls empty at the last step).
    pub fn write_csv<W: std::io::Write>(&self, ensemble: &PathEnsemble, mut w: W) -> Result<()> {
        let grid = ensemble.grid();
        let head: Vec<String> = (0..self.n_controls).map(|j| format!("u_{j}")).collect();
        writeln!(w, "path,step,t,x,{}", head.join(","))?;
        for p in 0..self.n_paths {
            for k in 0..=self.n_steps {
                let u: Vec<String> = if k < self.n_steps {
                    self.u(p, k).iter().map(|v| v.to_string()).collect()
                } else {
                    vec![String::new(); self.n_controls]
                };
                writeln!(w, "{p},{k},{},{},{}", grid.time(k), self.x(p, k), u.join(","))?;
            }
        }
        Ok(())
    }
}

fn check_shapes(ensemble: &PathEnsemble, dynamics: &dyn Dynamics, policy: &dyn ControlPolicy) -> Result<()> {
    if dynamics.n_marks() != ensemble.n_marks() {
        return Err(Error::Misaligned(format!(
            "dynamics `{}` expects {} mark(s), ensemble has {}",
            dynamics.name(),
            dynamics.n_marks(),
            ensemble.n_marks()
        )));
    }
    if dynamics.n_controls() != policy.n_controls() {
        return Err(Error::Misaligned(format!(
            "dynamics take {} control(s), policy `{}` produces {}",
            dynamics.n_controls(),
            policy.name(),
            policy.n_controls()
        )));
    }
    Ok(())
}

/// Euler scheme with controls and coefficients at left endpoints.
pub fn simulate_state(
    ensemble: &PathEnsemble,
    dynamics: &dyn Dynamics,
    policy: &dyn ControlPolicy,
) -> Result<StatePaths> {
    check_shapes(ensemble, dynamics, policy)?;
    let lag = policy.filtration().state_lag().unwrap_or(0);
    let (n, k_steps, m, nc, dt) = (
        ensemble.n_paths(),
        ensemble.n_steps(),
        ensemble.n_marks(),
        policy.n_controls(),
        ensemble.grid().dt(),
    );
    let bounds = policy.control_set().shrunk_with_slack();
    let mut out = StatePaths {
        n_paths: n,
        n_steps: k_steps,
        n_marks: m,
        n_controls: nc,
        dt,
        state_lag: lag,
        x: vec![0.0; n * (k_steps + 1)],
        u: vec![0.0; n * k_steps * nc],
        bx: vec![0.0; n * k_steps],
        bu: vec![0.0; n * k_steps * nc],
        phix: vec![0.0; n * k_steps * m],
        phiu: vec![0.0; n * k_steps * m * nc],
        noise: vec![0.0; n * k_steps * m],
    };
    let errors: Vec<Option<Error>> = (
        out.x.par_chunks_mut(k_steps + 1),
        out.u.par_chunks_mut(k_steps * nc),
        out.bx.par_chunks_mut(k_steps),
        out.bu.par_chunks_mut(k_steps * nc),
        out.phix.par_chunks_mut(k_steps * m),
        out.phiu.par_chunks_mut(k_steps * m * nc),
        out.noise.par_chunks_mut(k_steps * m),
    )
        .into_par_iter()
        .enumerate()
        .map(|(p, (xs, us, bx, bu, phix, phiu, noise))| {
            let mut error = None;
            let mut x = dynamics.initial();
            xs[0] = x;
            let mut coords = vec![0.0; nc];
            for k in 0..k_steps {
                let ctx = ensemble.observe(None, p, k);
                let observed = xs[k.saturating_sub(lag)];
                let u = &mut us[k * nc..(k + 1) * nc];
                policy.control(&ctx, observed, u);
                let s = policy.scale(observed);
                for (c, v) in coords.iter_mut().zip(u.iter()) {
                    *c = v / s;
                }
                if error.is_none() && !coords.iter().zip(&bounds).all(|(c, (lo, hi))| c >= lo && c <= hi) {
                    error = Some(Error::ControlOutsideMargin { path: p, step: k });
                }
                let u = &us[k * nc..(k + 1) * nc];
                bx[k] = dynamics.drift_x(&ctx, u, x);
                dynamics.drift_u(&ctx, u, x, &mut bu[k * nc..(k + 1) * nc]);
                let mut next = x + dynamics.drift(&ctx, u, x) * dt;
                for z in 0..m {
                    let i = k * m + z;
                    let nu = dynamics.effective_noise(ensemble, p, k, z);
                    noise[i] = nu;
                    phix[i] = dynamics.jump_x(&ctx, z, u, x);
                    dynamics.jump_u(&ctx, z, u, x, &mut phiu[i * nc..(i + 1) * nc]);
                    next += dynamics.jump(&ctx, z, u, x) * nu;
                }
                if !next.is_finite() && error.is_none() {
                    error = Some(Error::NonFiniteState { path: p, step: k + 1 });
                }
                x = next;
                xs[k + 1] = x;
            }
            error
        })
        .collect();
    if let Some(e) = errors.into_iter().flatten().next() {
        return Err(e);
    }
    Ok(out)
}

/// `G_s(t)` for `s = t, ..., K` on every path, `[path][s - t]`, by the
/// multiplicative recursion. Zero and negative factors are kept.
pub fn first_variation(ensemble: &PathEnsemble, states: &StatePaths, anchor: usize) -> Result<Vec<f64>> {
    states.check_aligned(ensemble)?;
    if anchor > states.n_steps {
        return Err(Error::invalid(format!(
            "anchor {anchor} beyond grid of {} steps",
            states.n_steps
        )));
    }
    let len = states.n_steps - anchor + 1;
    let mut out = vec![0.0; states.n_paths * len];
    out.par_chunks_mut(len).enumerate().for_each(|(p, row)| {
        row[0] = 1.0;
        for s in anchor..states.n_steps {
            row[s - anchor + 1] = row[s - anchor] * states.variation_factor(p, s);
        }
    });
    Ok(out)
}

/// The same products in exact dyadic arithmetic, for one path.
pub fn first_variation_exact(states: &StatePaths, path: usize, anchor: usize) -> Vec<DyadicProduct> {
    let mut out = Vec::with_capacity(states.n_steps - anchor + 1);
    out.push(DyadicProduct::one());
    for s in anchor..states.n_steps {
        let next = out[s - anchor].mul_f64(states.variation_factor(path, s));
        out.push(next);
    }
    out
}

fn check_perturbation(states: &StatePaths, policy: &dyn ControlPolicy, beta: &[f64]) -> Result<()> {
    let nc = states.n_controls;
    if beta.len() != states.n_paths * states.n_steps * nc {
        return Err(Error::Misaligned("perturbation shape differs from the controls".into()));
    }
    if let Some(i) = beta.iter().position(|b| !b.is_finite()) {
        return Err(Error::invalid(format!("non-finite perturbation at flat index {i}")));
    }
    let set = policy.control_set();
    let bad = (0..states.n_paths).into_par_iter().find_first(|&p| {
        let mut plus = vec![0.0; nc];
        let mut minus = vec![0.0; nc];
        (0..states.n_steps).any(|k| {
            let s = policy.scale(states.observed(p, k));
            let u = states.u(p, k);
            let b = &beta[(p * states.n_steps + k) * nc..][..nc];
            for j in 0..nc {
                plus[j] = (u[j] + b[j]) / s;
                minus[j] = (u[j] - b[j]) / s;
            }
            !(set.in_open(&plus) && set.in_open(&minus))
        })
    });
    if let Some(p) = bad {
        let step = (0..states.n_steps)
            .find(|&k| {
                let s = policy.scale(states.observed(p, k));
                let u = states.u(p, k);
                let b = &beta[(p * states.n_steps + k) * nc..][..nc];
                let plus: Vec<f64> = u.iter().zip(b).map(|(u, b)| (u + b) / s).collect();
                let minus: Vec<f64> = u.iter().zip(b).map(|(u, b)| (u - b) / s).collect();
                !(set.in_open(&plus) && set.in_open(&minus))
            })
            .unwrap_or(0);
        return Err(Error::PerturbationExitsControlSet { path: p, step });
    }
    Ok(())
}

/// `Y_{k+1} = Y_k + (b_x Y_k + b_u beta_k) dt + sum_z (phi_x Y_k + phi_u beta_k) nu`,
/// `Y_0 = 0`; `beta` is `[path][K][control]`, output `[path][0..=K]`.
pub fn variation_process(
    ensemble: &PathEnsemble,
    states: &StatePaths,
    policy: &dyn ControlPolicy,
    beta: &[f64],
) -> Result<Vec<f64>> {
    states.check_aligned(ensemble)?;
    check_perturbation(states, policy, beta)?;
    let (k_steps, m, nc, dt) = (states.n_steps, states.n_marks, states.n_controls, states.dt);
    let mut out = vec![0.0; states.n_paths * (k_steps + 1)];
    out.par_chunks_mut(k_steps + 1).enumerate().for_each(|(p, y)| {
        for k in 0..k_steps {
            let b = &beta[(p * k_steps + k) * nc..][..nc];
            let yk = y[k];
            let mut drift = states.bx(p, k) * yk;
            for (d, bj) in states.bu(p, k).iter().zip(b) {
                drift += d * bj;
            }
            let mut next = yk + drift * dt;
            for z in 0..m {
                let mut jump = states.phix(p, k, z) * yk;
                for (d, bj) in states.phiu(p, k, z).iter().zip(b) {
                    jump += d * bj;
                }
                next += jump * states.noise(p, k, z);
            }
            y[k + 1] = next;
        }
    });
    Ok(out)
}

/// The variation recursion for one path in exact dyadic arithmetic, so that
/// linearity in `beta` holds bit for bit.
pub fn variation_process_exact(states: &StatePaths, path: usize, beta: &[f64]) -> Result<Vec<DyadicProduct>> {
    let (k_steps, m, nc) = (states.n_steps, states.n_marks, states.n_controls);
    if path >= states.n_paths || beta.len() != states.n_paths * k_steps * nc {
        return Err(Error::Misaligned("perturbation shape differs from the controls".into()));
    }
    if beta.iter().any(|b| !b.is_finite()) {
        return Err(Error::invalid("non-finite perturbation"));
    }
    let exact = DyadicProduct::from_f64;
    let dt = exact(states.dt);
    let mut y = Vec::with_capacity(k_steps + 1);
    y.push(exact(0.0));
    for k in 0..k_steps {
        let b = &beta[(path * k_steps + k) * nc..][..nc];
        let yk = &y[k];
        let mut drift = exact(states.bx(path, k)).mul(yk);
        for (d, bj) in states.bu(path, k).iter().zip(b) {
            drift = drift.add(&exact(*d).mul_f64(*bj));
        }
        let mut next = yk.add(&drift.mul(&dt));
        for z in 0..m {
            let mut jump = exact(states.phix(path, k, z)).mul(yk);
            for (d, bj) in states.phiu(path, k, z).iter().zip(b) {
                jump = jump.add(&exact(*d).mul_f64(*bj));
            }
            next = next.add(&jump.mul_f64(states.noise(path, k, z)));
        }
        y.push(next);
    }
    Ok(y)
}

/// Cost derivatives along the paths: `f`, `f_x` `[path][K]`, `f_u`
/// `[path][K][control]`, and `g(X_T)`, `g'(X_T)` per path.
#[derive(Clone, Debug)]
pub struct CostPaths {
    pub f: Vec<f64>,
    pub fx: Vec<f64>,
    pub fu: Vec<f64>,
    pub g: Vec<f64>,
    pub gx: Vec<f64>,
}

impl CostPaths {
    pub fn evaluate(ensemble: &PathEnsemble, states: &StatePaths, cost: &dyn Cost) -> Result<Self> {
        states.check_aligned(ensemble)?;
        let (n, k_steps, nc) = (states.n_paths, states.n_steps, states.n_controls);
        let rows: Vec<(Vec<f64>, Vec<f64>, Vec<f64>)> = (0..n)
            .into_par_iter()
            .map(|p| {
                let mut f = vec![0.0; k_steps];
                let mut fx = vec![0.0; k_steps];
                let mut fu = vec![0.0; k_steps * nc];
                for k in 0..k_steps {
                    let ctx = ensemble.observe(None, p, k);
                    let (u, x) = (states.u(p, k), states.x(p, k));
                    f[k] = cost.running(&ctx, u, x);
                    fx[k] = cost.running_x(&ctx, u, x);
                    cost.running_u(&ctx, u, x, &mut fu[k * nc..(k + 1) * nc]);
                }
                (f, fx, fu)
            })
            .collect();
        let g: Vec<f64> = (0..n).map(|p| cost.terminal(states.terminal(p))).collect();
        if let Some(p) = g.iter().position(|v| !v.is_finite()) {
            return Err(Error::DomainViolation {
                path: p,
                wealth: states.terminal(p),
            });
        }
        let gx = (0..n).map(|p| cost.terminal_x(states.terminal(p))).collect();
        let mut out = Self {
            f: Vec::with_capacity(n * k_steps),
            fx: Vec::with_capacity(n * k_steps),
            fu: Vec::with_capacity(n * k_steps * nc),
            g,
            gx,
        };
        for (f, fx, fu) in rows {
            out.f.extend(f);
            out.fx.extend(fx);
            out.fu.extend(fu);
        }
        Ok(out)
    }
}

/// `J = E[sum f dt + g(X_T)]` with its standard error.
pub fn performance(ensemble: &PathEnsemble, states: &StatePaths, cost: &dyn Cost) -> Result<Summary> {
    let c = CostPaths::evaluate(ensemble, states, cost)?;
    let k_steps = states.n_steps;
    Ok(Summary::from_fn(states.n_paths, |p| {
        c.f[p * k_steps..(p + 1) * k_steps].iter().sum::<f64>() * states.dt + c.g[p]
    }))
}

/// Per-path performance under the open-loop control `u + h beta`, on the
/// same noise (common random numbers).
pub fn perturbed_performance(
    ensemble: &PathEnsemble,
    dynamics: &dyn Dynamics,
    cost: &dyn Cost,
    states: &StatePaths,
    beta: &[f64],
    h: f64,
) -> Result<Vec<f64>> {
    states.check_aligned(ensemble)?;
    let (k_steps, m, nc, dt) = (states.n_steps, states.n_marks, states.n_controls, states.dt);
    if beta.len() != states.u.len() {
        return Err(Error::Misaligned("perturbation shape differs from the controls".into()));
    }
    let values: Vec<Result<f64>> = (0..states.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut x = dynamics.initial();
            let mut acc = 0.0;
            let mut u = vec![0.0; nc];
            for k in 0..k_steps {
                let ctx = ensemble.observe(None, p, k);
                for j in 0..nc {
                    u[j] = states.u(p, k)[j] + h * beta[(p * k_steps + k) * nc + j];
                }
                acc += cost.running(&ctx, &u, x) * dt;
                let mut next = x + dynamics.drift(&ctx, &u, x) * dt;
                for z in 0..m {
                    next += dynamics.jump(&ctx, z, &u, x) * states.noise(p, k, z);
                }
                if !next.is_finite() {
                    return Err(Error::NonFiniteState { path: p, step: k + 1 });
                }
                x = next;
            }
            let g = cost.terminal(x);
            if !g.is_finite() {
                return Err(Error::DomainViolation { path: p, wealth: x });
            }
            Ok(acc + g)
        })
        .collect();
    values.into_iter().collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct GateauxRecord {
    pub value: Summary,
    #[serde(skip)]
    pub per_path: Vec<f64>,
}

/// `E[sum (f_x Y + f_u beta) dt + g'(X_T) Y_T]`.
pub fn gateaux_derivative(
    ensemble: &PathEnsemble,
    states: &StatePaths,
    cost: &dyn Cost,
    policy: &dyn ControlPolicy,
    beta: &[f64],
) -> Result<GateauxRecord> {
    let y = variation_process(ensemble, states, policy, beta)?;
    let c = CostPaths::evaluate(ensemble, states, cost)?;
    let (k_steps, nc, dt) = (states.n_steps, states.n_controls, states.dt);
    let per_path: Vec<f64> = (0..states.n_paths)
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..k_steps {
                let i = p * k_steps + k;
                let mut v = c.fx[i] * y[p * (k_steps + 1) + k];
                for j in 0..nc {
                    v += c.fu[i * nc + j] * beta[i * nc + j];
                }
                acc += v * dt;
            }
            acc + c.gx[p] * y[p * (k_steps + 1) + k_steps]
        })
        .collect();
    Ok(GateauxRecord {
        value: Summary::of(&per_path),
        per_path,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct ProbeReport {
    pub n_probes: usize,
    pub max_error: f64,
    pub worst: String,
}

const PROBE_TOLERANCE: f64 = 1e-6;

/// Compares the supplied partial derivatives with central differences at
/// probe points `(path, step, u, x)`; errors are relative to
/// `max(1, |value|)`.
pub fn validate_callbacks(
    ensemble: &PathEnsemble,
    dynamics: &dyn Dynamics,
    cost: &dyn Cost,
    probes: &[(usize, usize, Vec<f64>, f64)],
) -> Result<ProbeReport> {
    let nc = dynamics.n_controls();
    let mut report = ProbeReport {
        n_probes: 0,
        max_error: 0.0,
        worst: String::new(),
    };
    let mut record = |name: String, analytic: f64, numeric: f64| {
        let err = (analytic - numeric).abs() / analytic.abs().max(numeric.abs()).max(1.0);
        report.n_probes += 1;
        if err > report.max_error || report.worst.is_empty() {
            report.max_error = report.max_error.max(err);
            report.worst = name;
        }
    };
    let diff = |f: &dyn Fn(f64) -> f64, at: f64| {
        let h = 1e-5 * at.abs().max(1.0);
        (f(at + h) - f(at - h)) / (2.0 * h)
    };
    for (path, step, u, x) in probes {
        if u.len() != nc {
            return Err(Error::invalid("probe control has the wrong dimension"));
        }
        let ctx = ensemble.observe(None, *path, *step);
        let (u, x) = (u.as_slice(), *x);
        let with_u = |j: usize, v: f64| {
            let mut w = u.to_vec();
            w[j] = v;
            w
        };
        record(
            "b_x".into(),
            dynamics.drift_x(&ctx, u, x),
            diff(&|v| dynamics.drift(&ctx, u, v), x),
        );
        record(
            "f_x".into(),
            cost.running_x(&ctx, u, x),
            diff(&|v| cost.running(&ctx, u, v), x),
        );
        record("g'".into(), cost.terminal_x(x), diff(&|v| cost.terminal(v), x));
        let mut bu = vec![0.0; nc];
        let mut fu = vec![0.0; nc];
        dynamics.drift_u(&ctx, u, x, &mut bu);
        cost.running_u(&ctx, u, x, &mut fu);
        for j in 0..nc {
            record(
                format!("b_u[{j}]"),
                bu[j],
                diff(&|v| dynamics.drift(&ctx, &with_u(j, v), x), u[j]),
            );
            record(
                format!("f_u[{j}]"),
                fu[j],
                diff(&|v| cost.running(&ctx, &with_u(j, v), x), u[j]),
            );
        }
        for z in 0..dynamics.n_marks() {
            record(
                format!("phi_x[{z}]"),
                dynamics.jump_x(&ctx, z, u, x),
                diff(&|v| dynamics.jump(&ctx, z, u, v), x),
            );
            let mut pu = vec![0.0; nc];
            dynamics.jump_u(&ctx, z, u, x, &mut pu);
            for j in 0..nc {
                record(
                    format!("phi_u[{z}][{j}]"),
                    pu[j],
                    diff(&|v| dynamics.jump(&ctx, z, &with_u(j, v), x), u[j]),
                );
            }
        }
    }
    if !(report.max_error <= PROBE_TOLERANCE) {
        return Err(Error::CallbackMismatch(format!(
            "`{}` differs from its finite difference by {:.3e} (relative)",
            report.worst, report.max_error
        )));
    }
    Ok(report)
}

//! Adjoint quantities along simulated paths.
//!
//! * `K_t = g'(X_T) + sum_{s >= t} f_x(s) dt`
//! * `DK_t(z)`: the derivative of the anchor-`t` target `K_t` on the cell
//!   `(t, t + w] x {z}`
//! * `F_t = K_t b_x + sum_z DK_t(z) phi_x(z) lambda_t(z)`
//! * `p_t = K_t + sum_{s > t} F_s G_s(t) dt`, accumulated backwards as
//!   `Q_t = (1 + b_x dt + sum phi_x nu)_t (F_{t+1} dt + Q_{t+1})`
//! * `kappa_t(z)`: the derivative of `p_t` on the same diagonal cells.
//!
//! Fields are fitted on a fitting sample (an independent ensemble by
//! default) and evaluated on the main sample.

use std::io::Write;
use std::sync::Arc;

use rayon::prelude::*;
use serde::Serialize;

use crate::derivative::{estimate_diagonal, AnchorField, TargetVariable};
use crate::dissecting::DissectingSystem;
use crate::error::{Error, Result, StageExt};
use crate::noise::PathEnsemble;
use crate::regression::RegressionBasis;
use crate::sde::{Cost, CostPaths, StatePaths};
use crate::stats::Summary;

/// An ensemble together with the states simulated on it.
#[derive(Clone, Copy)]
pub struct Sample<'a> {
    pub ensemble: &'a PathEnsemble,
    pub states: &'a StatePaths,
}

impl<'a> Sample<'a> {
    pub fn new(ensemble: &'a PathEnsemble, states: &'a StatePaths) -> Result<Self> {
        states.check_aligned(ensemble)?;
        Ok(Self { ensemble, states })
    }
}

/// Second moment of a per-path quantity on the full sample and on its first
/// half; a ratio far from one flags heavy tails.
#[derive(Clone, Debug, Serialize)]
pub struct IntegrabilityProxy {
    pub name: String,
    pub full: f64,
    pub half: f64,
    pub ratio: f64,
}

impl IntegrabilityProxy {
    pub fn of(name: &str, values: &[f64]) -> Self {
        let sq = |v: &[f64]| Summary::from_fn(v.len(), |i| v[i] * v[i]).mean;
        let full = sq(values);
        let half = sq(&values[..values.len().div_ceil(2)]);
        let ratio = if full == 0.0 && half == 0.0 { 1.0 } else { half / full };
        Self {
            name: name.into(),
            full,
            half,
            ratio,
        }
    }

    pub fn is_stable(&self) -> bool {
        self.full.is_finite() && self.half.is_finite() && (0.25..=4.0).contains(&self.ratio)
    }

    pub fn check(&self) -> Result<()> {
        if self.is_stable() {
            Ok(())
        } else {
            Err(Error::Admissibility(format!(
                "{}: second moment {} (full) vs {} (half sample)",
                self.name, self.full, self.half
            )))
        }
    }
}

/// `K` per `[path][0..=K]` from the cost derivatives.
pub fn k_values(states: &StatePaths, costs: &CostPaths) -> Vec<f64> {
    let (k_steps, dt) = (states.n_steps, states.dt);
    let mut out = vec![0.0; states.n_paths * (k_steps + 1)];
    out.par_chunks_mut(k_steps + 1).enumerate().for_each(|(p, row)| {
        row[k_steps] = costs.gx[p];
        for t in (0..k_steps).rev() {
            row[t] = row[t + 1] + costs.fx[p * k_steps + t] * dt;
        }
    });
    out
}

fn anchor_targets(values: &[f64], n_paths: usize, n_steps: usize, label: &str) -> Result<Vec<TargetVariable>> {
    (0..n_steps)
        .map(|t| {
            TargetVariable::new((0..n_paths).map(|p| values[p * (n_steps + 1) + t]).collect())
                .map(|v| v.labelled(format!("{label}_{t}")))
        })
        .collect()
}

#[derive(Clone, Debug)]
pub struct KBundle {
    pub k: Vec<f64>,
    pub dk: Vec<f64>,
    pub field: AnchorField,
    /// `K` and `DK` on the fitting sample (equal to the above when the
    /// fitting sample is the main one).
    pub k_fit: Vec<f64>,
    pub dk_fit: Vec<f64>,
    pub costs: CostPaths,
    pub costs_fit: CostPaths,
    pub proxies: Vec<IntegrabilityProxy>,
}

fn cell_width(system: &DissectingSystem, level: usize, ensemble: &PathEnsemble) -> Result<usize> {
    if system.grid() != ensemble.grid() {
        return Err(Error::Misaligned("dissecting system and ensemble grids differ".into()));
    }
    system.level(level)?;
    Ok(system.width_steps(level))
}

#[allow(non_snake_case)]
pub fn compute_K(
    main: Sample<'_>,
    fit: Option<Sample<'_>>,
    cost: &dyn Cost,
    system: &DissectingSystem,
    level: usize,
    basis: Arc<RegressionBasis>,
) -> Result<KBundle> {
    let width = cell_width(system, level, main.ensemble)?;
    let costs = CostPaths::evaluate(main.ensemble, main.states, cost)?;
    let k = k_values(main.states, &costs);
    let (n, k_steps) = (main.states.n_paths, main.states.n_steps);
    let running_sq: Vec<f64> = (0..n)
        .map(|p| {
            costs.fx[p * k_steps..(p + 1) * k_steps]
                .iter()
                .map(|v| v * v)
                .sum::<f64>()
                * main.states.dt
        })
        .collect();
    let proxies = vec![
        IntegrabilityProxy::of("g'(X_T)", &costs.gx),
        IntegrabilityProxy::of("int f_x^2 dt", &running_sq.iter().map(|v| v.sqrt()).collect::<Vec<_>>()),
    ];
    for p in &proxies {
        p.check()?;
    }
    let (fs, costs_fit, k_fit) = match fit {
        Some(f) => {
            let c = CostPaths::evaluate(f.ensemble, f.states, cost)?;
            let kf = k_values(f.states, &c);
            (f, c, kf)
        }
        None => (main, costs.clone(), k.clone()),
    };
    let targets = anchor_targets(&k_fit, fs.states.n_paths, fs.states.n_steps, "K")?;
    let field = estimate_diagonal(fs.ensemble, Some(fs.states), &targets, width, basis)?;
    let dk = field.evaluate_on(main.ensemble, Some(main.states))?;
    let dk_fit = if fit.is_some() {
        field.evaluate_on(fs.ensemble, Some(fs.states))?
    } else {
        dk.clone()
    };
    Ok(KBundle {
        k,
        dk,
        field,
        k_fit,
        dk_fit,
        costs,
        costs_fit,
        proxies,
    })
}

/// `F` per `[path][K]`.
#[allow(non_snake_case)]
pub fn compute_F(sample: Sample<'_>, k: &[f64], dk: &[f64]) -> Result<Vec<f64>> {
    let s = sample.states;
    let (k_steps, m) = (s.n_steps, s.n_marks);
    if k.len() != s.n_paths * (k_steps + 1) || dk.len() != s.n_paths * k_steps * m {
        return Err(Error::Misaligned("K or DK shape differs from the states".into()));
    }
    let mut out = vec![0.0; s.n_paths * k_steps];
    out.par_chunks_mut(k_steps).enumerate().for_each(|(p, row)| {
        for t in 0..k_steps {
            let mut v = k[p * (k_steps + 1) + t] * s.bx(p, t);
            for z in 0..m {
                let phix = s.phix(p, t, z);
                if phix != 0.0 {
                    v += dk[(p * k_steps + t) * m + z] * phix * sample.ensemble.intensity(p, t, z);
                }
            }
            row[t] = v;
        }
    });
    Ok(out)
}

/// `p` per `[path][0..=K]` by the backward recursion; `p_K = K_K`.
pub fn p_values(states: &StatePaths, k: &[f64], f: &[f64]) -> Vec<f64> {
    let (k_steps, dt) = (states.n_steps, states.dt);
    let mut out = vec![0.0; states.n_paths * (k_steps + 1)];
    out.par_chunks_mut(k_steps + 1).enumerate().for_each(|(p, row)| {
        let base = p * (k_steps + 1);
        row[k_steps] = k[base + k_steps];
        if k_steps == 0 {
            return;
        }
        let mut q = 0.0;
        row[k_steps - 1] = k[base + k_steps - 1];
        for t in (0..k_steps - 1).rev() {
            q = states.variation_factor(p, t) * (f[p * k_steps + t + 1] * dt + q);
            row[t] = k[base + t] + q;
        }
    });
    out
}

#[derive(Clone, Debug)]
pub struct PKappa {
    pub p: Vec<f64>,
    pub kappa: Vec<f64>,
    pub field: AnchorField,
    /// The field was copied from `DK` because `p = K` on the fitting sample.
    pub reused_dk: bool,
}

/// Inputs of one sample for [`compute_p_kappa`].
#[derive(Clone, Copy)]
pub struct AdjointSide<'a> {
    pub sample: Sample<'a>,
    pub k: &'a [f64],
    pub f: &'a [f64],
}

pub fn compute_p_kappa(
    main: AdjointSide<'_>,
    fit: Option<AdjointSide<'_>>,
    dk_field: Option<(&AnchorField, &[f64])>,
    system: &DissectingSystem,
    level: usize,
    basis: Arc<RegressionBasis>,
) -> Result<PKappa> {
    let width = cell_width(system, level, main.sample.ensemble)?;
    let p = p_values(main.sample.states, main.k, main.f);
    let side = fit.unwrap_or(main);
    let p_fit = if fit.is_some() {
        p_values(side.sample.states, side.k, side.f)
    } else {
        p.clone()
    };
    let fg: Vec<f64> = {
        let s = main.sample.states;
        (0..s.n_paths)
            .map(|i| {
                (main.f[i * s.n_steps..(i + 1) * s.n_steps]
                    .iter()
                    .map(|v| v * v)
                    .sum::<f64>()
                    * s.dt)
                    .sqrt()
            })
            .collect()
    };
    IntegrabilityProxy::of("int F^2 dt", &fg).check()?;
    let (field, kappa, reused_dk) = match dk_field {
        Some((f, dk)) if p_fit == side.k => (f.clone(), dk.to_vec(), true),
        _ => {
            let s = side.sample.states;
            let targets = anchor_targets(&p_fit, s.n_paths, s.n_steps, "p")?;
            let field = estimate_diagonal(side.sample.ensemble, Some(s), &targets, width, basis)?;
            let kappa = field.evaluate_on(main.sample.ensemble, Some(main.sample.states))?;
            (field, kappa, false)
        }
    };
    Ok(PKappa {
        p,
        kappa,
        field,
        reused_dk,
    })
}

/// Everything the Hamiltonian gradient needs, on the main sample.
#[derive(Clone, Debug)]
pub struct AdjointBundle {
    pub n_paths: usize,
    pub n_steps: usize,
    pub n_marks: usize,
    pub level: usize,
    pub k: Vec<f64>,
    pub dk: Vec<f64>,
    pub f: Vec<f64>,
    pub p: Vec<f64>,
    pub kappa: Vec<f64>,
    pub dk_field: AnchorField,
    pub kappa_field: AnchorField,
    pub costs: CostPaths,
    pub proxies: Vec<IntegrabilityProxy>,
    /// Fields were fitted on an ensemble other than the main one.
    pub independent_fit: bool,
}

impl AdjointBundle {
    #[inline]
    pub fn k(&self, path: usize, t: usize) -> f64 {
        self.k[path * (self.n_steps + 1) + t]
    }

    #[inline]
    pub fn p(&self, path: usize, t: usize) -> f64 {
        self.p[path * (self.n_steps + 1) + t]
    }

    #[inline]
    pub fn f(&self, path: usize, t: usize) -> f64 {
        self.f[path * self.n_steps + t]
    }

    #[inline]
    pub fn dk(&self, path: usize, t: usize, z: usize) -> f64 {
        self.dk[(path * self.n_steps + t) * self.n_marks + z]
    }

    #[inline]
    pub fn kappa(&self, path: usize, t: usize, z: usize) -> f64 {
        self.kappa[(path * self.n_steps + t) * self.n_marks + z]
    }

    pub fn n_anchors(&self) -> usize {
        self.kappa_field.n_anchors()
    }

    /// CSV rows `path, step, t, K, F, p` (`F` empty at the last step).
    pub fn write_paths_csv<W: Write>(&self, ensemble: &PathEnsemble, mut w: W) -> Result<()> {
        writeln!(w, "path,step,t,K,F,p")?;
        for i in 0..self.n_paths {
            for t in 0..=self.n_steps {
                let f = if t < self.n_steps {
                    self.f(i, t).to_string()
                } else {
                    String::new()
                };
                writeln!(
                    w,
                    "{i},{t},{},{},{f},{}",
                    ensemble.grid().time(t),
                    self.k(i, t),
                    self.p(i, t)
                )?;
            }
        }
        Ok(())
    }

    /// CSV rows `field, anchor, t, mark, c_0, ...` for `DK` and `kappa`.
    pub fn write_fields_csv<W: Write>(&self, ensemble: &PathEnsemble, mut w: W) -> Result<()> {
        let names = self.kappa_field.basis().names();
        writeln!(w, "field,anchor,t,mark,{}", names.join(","))?;
        for (label, field) in [("DK", &self.dk_field), ("kappa", &self.kappa_field)] {
            for (t, fits) in field.fits.iter().enumerate() {
                for (z, fit) in fits.iter().enumerate() {
                    let c: Vec<String> = fit.coefficients.iter().map(|v| v.to_string()).collect();
                    writeln!(
                        w,
                        "{label},{t},{},{},{}",
                        ensemble.grid().time(t),
                        ensemble.marks().labels()[z],
                        c.join(",")
                    )?;
                }
            }
        }
        Ok(())
    }
}

/// Fits `DK` and `kappa` (on `fit` when given) and assembles the bundle.
pub fn build_adjoint_bundle(
    main: Sample<'_>,
    fit: Option<Sample<'_>>,
    cost: &dyn Cost,
    system: &DissectingSystem,
    level: usize,
    basis: Arc<RegressionBasis>,
) -> Result<AdjointBundle> {
    let kb = compute_K(main, fit, cost, system, level, basis.clone()).stage("terminal adjoint K and its derivative")?;
    let f = compute_F(main, &kb.k, &kb.dk).stage("adjoint drift F")?;
    let f_fit = match fit {
        Some(s) => compute_F(s, &kb.k_fit, &kb.dk_fit).stage("adjoint drift F")?,
        None => f.clone(),
    };
    let main_side = AdjointSide {
        sample: main,
        k: &kb.k,
        f: &f,
    };
    let fit_side = fit.map(|s| AdjointSide {
        sample: s,
        k: &kb.k_fit,
        f: &f_fit,
    });
    let pk = compute_p_kappa(main_side, fit_side, Some((&kb.field, &kb.dk)), system, level, basis)
        .stage("adjoint p and its derivative kappa")?;
    Ok(AdjointBundle {
        n_paths: main.states.n_paths,
        n_steps: main.states.n_steps,
        n_marks: main.states.n_marks,
        level,
        k: kb.k,
        dk: kb.dk,
        f,
        p: pk.p,
        kappa: pk.kappa,
        dk_field: kb.field,
        kappa_field: pk.field,
        costs: kb.costs,
        proxies: kb.proxies,
        independent_fit: fit.is_some(),
    })
}

/// Re-evaluates previously fitted `DK` and `kappa` fields on new states.
pub fn rebuild_with_fields(
    main: Sample<'_>,
    cost: &dyn Cost,
    dk_field: &AnchorField,
    kappa_field: &AnchorField,
    level: usize,
    independent_fit: bool,
) -> Result<AdjointBundle> {
    let costs = CostPaths::evaluate(main.ensemble, main.states, cost)?;
    let k = k_values(main.states, &costs);
    let dk = dk_field.evaluate_on(main.ensemble, Some(main.states))?;
    let f = compute_F(main, &k, &dk)?;
    let p = p_values(main.states, &k, &f);
    let kappa = kappa_field.evaluate_on(main.ensemble, Some(main.states))?;
    Ok(AdjointBundle {
        n_paths: main.states.n_paths,
        n_steps: main.states.n_steps,
        n_marks: main.states.n_marks,
        level,
        k,
        dk,
        f,
        p,
        kappa,
        dk_field: dk_field.clone(),
        kappa_field: kappa_field.clone(),
        proxies: vec![IntegrabilityProxy::of("g'(X_T)", &costs.gx)],
        costs,
        independent_fit,
    })
}

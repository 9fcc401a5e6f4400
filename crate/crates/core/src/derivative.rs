//! The non-anticipating stochastic derivative, estimated cell by cell as
//! `E[xi mu(Delta) / Lambda(Delta) | G_t]` with `t` the cell's left edge.
//!
//! Coefficients are accumulated in fixed point: the target is held on the
//! 2^-32 lattice, the per-path regression weights are rounded to 40
//! significant bits per coefficient, and the products are summed in `i128`.
//! The coefficient map is therefore exactly linear in the target (for
//! integer combinations of lattice targets) and independent of thread count.

use std::io::Write;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;
use serde::Serialize;

use crate::dissecting::DissectingSystem;
use crate::error::{Error, Result};
use crate::noise::{quantize, stochastic_integral, Cell, PathEnsemble, PredictableField};
use crate::regression::{ridge_inverse, Design, RegressionBasis};
use crate::sde::StatePaths;
use crate::stats::{ordered_sum, z_score, Summary};

/// Per-path denominator floor for `Lambda(Delta)`.
pub const LAMBDA_CLAMP: f64 = 1e-12;
/// Cells whose ensemble-mean `Lambda` falls below this are dropped.
pub const DROP_THRESHOLD: f64 = 1e-8;

const TARGET_SCALE: f64 = 4_294_967_296.0; // 2^32
const TARGET_LIMIT: f64 = 1_073_741_824.0; // 2^30
const WEIGHT_BITS: i32 = 40;

/// A square-integrable random variable given by its per-path values,
/// stored on the 2^-32 lattice.
#[derive(Clone, Debug, PartialEq)]
pub struct TargetVariable {
    values: Vec<f64>,
    pub label: Option<String>,
}

impl TargetVariable {
    pub fn new(values: Vec<f64>) -> Result<Self> {
        if values.is_empty() {
            return Err(Error::invalid("target needs at least one path"));
        }
        if let Some(i) = values.iter().position(|v| !(v.is_finite() && v.abs() < TARGET_LIMIT)) {
            return Err(Error::invalid(format!(
                "target value {} at path {i} is not finite or exceeds 2^30",
                values[i]
            )));
        }
        Ok(Self {
            values: values.into_iter().map(quantize).collect(),
            label: None,
        })
    }

    pub fn labelled(mut self, label: impl Into<String>) -> Self {
        self.label = Some(label.into());
        self
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    fn fixed(&self) -> Vec<i64> {
        self.values.iter().map(|v| (v * TARGET_SCALE) as i64).collect()
    }
}

/// `mantissa * 2^exponent`, exactly.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ExactCoefficient {
    pub mantissa: i128,
    pub exponent: i32,
}

impl ExactCoefficient {
    pub fn to_f64(self) -> f64 {
        (self.mantissa as f64) * 2f64.powi(self.exponent)
    }
}

#[derive(Clone, Debug)]
pub struct CellFit {
    pub cell: Cell,
    pub coefficients: Vec<f64>,
    pub exact: Vec<ExactCoefficient>,
    pub dropped: bool,
    pub mean_variance: f64,
}

/// Design-side quantities shared by all cells starting at one step.
struct Prepared {
    design: Design,
    /// Row `i` holds `(X^T X + r I)^{-1} x_i`.
    projected: Vec<f64>,
}

fn prepare(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    basis: &RegressionBasis,
    step: usize,
) -> Result<Prepared> {
    let design = basis.design(ensemble, states, step)?;
    let inv = ridge_inverse(&design.gram(), &format!("derivative regression at step {step}"))?;
    let p = design.p;
    let inv_rows: Vec<f64> = (0..p)
        .flat_map(|j| (0..p).map(move |l| (j, l)))
        .map(|(j, l)| inv[(j, l)])
        .collect();
    let mut projected = vec![0.0; design.n * p];
    projected
        .par_chunks_mut(p)
        .zip(design.data.par_chunks_exact(p))
        .for_each(|(out, x)| {
            for (o, inv_row) in out.iter_mut().zip(inv_rows.chunks_exact(p)) {
                *o = inv_row.iter().zip(x).map(|(a, b)| a * b).sum();
            }
        });
    Ok(Prepared { design, projected })
}

fn fit_cell(ensemble: &PathEnsemble, prep: &Prepared, cell: &Cell, target: &[i64]) -> CellFit {
    let n = ensemble.n_paths();
    let p = prep.design.p;
    let variances: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| ensemble.cell_variance(i, cell))
        .collect();
    let mean_variance = ordered_sum(n, |i| variances[i]) / n as f64;
    if mean_variance < DROP_THRESHOLD {
        return CellFit {
            cell: cell.clone(),
            coefficients: vec![0.0; p],
            exact: vec![
                ExactCoefficient {
                    mantissa: 0,
                    exponent: 0
                };
                p
            ],
            dropped: true,
            mean_variance,
        };
    }
    let weights: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| ensemble.cell_noise(i, cell) / variances[i].max(LAMBDA_CLAMP))
        .collect();
    let mut exact = Vec::with_capacity(p);
    for j in 0..p {
        let b = |i: usize| prep.projected[i * p + j] * weights[i];
        let max = (0..n).map(|i| b(i).abs()).fold(0.0, f64::max);
        if max == 0.0 {
            exact.push(ExactCoefficient {
                mantissa: 0,
                exponent: 0,
            });
            continue;
        }
        let shift = WEIGHT_BITS - max.log2().ceil() as i32;
        let scale = 2f64.powi(shift);
        let mantissa: i128 = (0..n)
            .into_par_iter()
            .map(|i| ((b(i) * scale).round() as i64 as i128) * target[i] as i128)
            .sum();
        exact.push(ExactCoefficient {
            mantissa,
            exponent: -(shift + 32),
        });
    }
    CellFit {
        cell: cell.clone(),
        coefficients: exact.iter().map(|c| c.to_f64()).collect(),
        exact,
        dropped: false,
        mean_variance,
    }
}

fn check_target(ensemble: &PathEnsemble, target: &TargetVariable) -> Result<()> {
    if target.len() != ensemble.n_paths() {
        return Err(Error::Misaligned(format!(
            "target has {} paths, ensemble {}",
            target.len(),
            ensemble.n_paths()
        )));
    }
    if ensemble.n_paths() > 1 << 24 {
        return Err(Error::invalid("fixed-point accumulation supports at most 2^24 paths"));
    }
    Ok(())
}

/// Fitted derivative field on the cells of one dissecting level.
#[derive(Clone, Debug)]
pub struct DerivativeField {
    pub level: usize,
    basis: Arc<RegressionBasis>,
    width: usize,
    n_marks: usize,
    pub fits: Vec<CellFit>,
    /// Fitted values on the fitting ensemble, `[path][cell]`.
    pub fitted: Vec<f64>,
    fit_ensemble: (u64, usize),
}

pub fn estimate_derivative(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    target: &TargetVariable,
    system: &DissectingSystem,
    level: usize,
    basis: Arc<RegressionBasis>,
) -> Result<DerivativeField> {
    check_target(ensemble, target)?;
    if system.grid() != ensemble.grid() || system.n_marks() != ensemble.n_marks() {
        return Err(Error::Misaligned(
            "dissecting system does not match the ensemble".into(),
        ));
    }
    let cells = &system.level(level)?.cells;
    let fixed = target.fixed();
    let m = ensemble.n_marks();
    let mut fits = Vec::with_capacity(cells.len());
    for chunk in cells.chunks(m) {
        let prep = prepare(ensemble, states, &basis, chunk[0].start)?;
        for cell in chunk {
            fits.push(fit_cell(ensemble, &prep, cell, &fixed));
        }
    }
    if fits.iter().all(|f| f.dropped) {
        return Err(Error::AllCellsDropped);
    }
    let mut field = DerivativeField {
        level,
        basis,
        width: system.width_steps(level),
        n_marks: m,
        fits,
        fitted: Vec::new(),
        fit_ensemble: (ensemble.seed(), ensemble.n_paths()),
    };
    field.fitted = field.evaluate_on(ensemble, states)?;
    Ok(field)
}

impl DerivativeField {
    pub fn basis(&self) -> &Arc<RegressionBasis> {
        &self.basis
    }

    pub fn n_cells(&self) -> usize {
        self.fits.len()
    }

    pub fn dropped(&self) -> Vec<usize> {
        self.fits
            .iter()
            .enumerate()
            .filter(|(_, f)| f.dropped)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn cell_index(&self, step: usize, mark: usize) -> usize {
        (step / self.width) * self.n_marks + mark
    }

    /// Whether `ensemble` differs from the one the field was fitted on.
    pub fn is_fresh_for(&self, ensemble: &PathEnsemble) -> bool {
        self.fit_ensemble != (ensemble.seed(), ensemble.n_paths())
    }

    /// Field values `[path][cell]` on any ensemble with the same grid, each
    /// computed from features at the cell's left edge.
    pub fn evaluate_on(&self, ensemble: &PathEnsemble, states: Option<&StatePaths>) -> Result<Vec<f64>> {
        let n_cells = self.fits.len();
        if ensemble.n_marks() != self.n_marks || ensemble.n_steps() != self.width * n_cells / self.n_marks {
            return Err(Error::Misaligned("field and ensemble grids differ".into()));
        }
        if self.basis.needs_states() && states.is_none() {
            return Err(Error::invalid("field features need state paths"));
        }
        let p = self.basis.len();
        let mut out = vec![0.0; ensemble.n_paths() * n_cells];
        out.par_chunks_mut(n_cells).enumerate().for_each(|(i, row)| {
            let mut x = vec![0.0; p];
            let mut last_start = usize::MAX;
            for (c, fit) in self.fits.iter().enumerate() {
                if fit.cell.start != last_start {
                    self.basis
                        .eval_row(&ensemble.observe(states, i, fit.cell.start), &mut x);
                    last_start = fit.cell.start;
                }
                row[c] = if fit.dropped {
                    0.0
                } else {
                    x.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum()
                };
            }
        });
        Ok(out)
    }

    /// Spreads `[path][cell]` values over the grid as a predictable field.
    pub fn as_predictable(&self, ensemble: &PathEnsemble, values: &[f64]) -> Result<PredictableField> {
        let n_cells = self.fits.len();
        if values.len() != ensemble.n_paths() * n_cells {
            return Err(Error::Misaligned("cell values do not match the ensemble".into()));
        }
        Ok(PredictableField::from_fn(ensemble, |obs, z| {
            values[obs.path * n_cells + self.cell_index(obs.step, z)]
        }))
    }

    /// CSV rows `level, cell, t_a, t_b, mark, c_0, c_1, ...`.
    pub fn write_csv<W: Write>(&self, ensemble: &PathEnsemble, mut w: W) -> Result<()> {
        let names = self.basis.names();
        writeln!(w, "level,cell,t_a,t_b,mark,dropped,{}", names.join(","))?;
        let grid = ensemble.grid();
        for (k, f) in self.fits.iter().enumerate() {
            let coefs: Vec<String> = f.coefficients.iter().map(|c| c.to_string()).collect();
            writeln!(
                w,
                "{},{k},{},{},{},{},{}",
                self.level,
                grid.time(f.cell.start),
                grid.time(f.cell.end),
                ensemble.marks().labels()[f.cell.marks[0]],
                f.dropped,
                coefs.join(",")
            )?;
        }
        Ok(())
    }
}

/// Derivative values on the diagonal: for each anchor step `t` and mark
/// `z`, the fit on the cell `(t, min(t + width, K)] x {z}` of a per-anchor
/// target.
#[derive(Clone, Debug)]
pub struct AnchorField {
    pub width: usize,
    basis: Arc<RegressionBasis>,
    n_marks: usize,
    /// `[anchor][mark]`.
    pub fits: Vec<Vec<CellFit>>,
}

impl AnchorField {
    pub fn n_anchors(&self) -> usize {
        self.fits.len()
    }

    pub fn basis(&self) -> &Arc<RegressionBasis> {
        &self.basis
    }

    /// Values `[path][anchor][mark]` on `ensemble`.
    pub fn evaluate_on(&self, ensemble: &PathEnsemble, states: Option<&StatePaths>) -> Result<Vec<f64>> {
        if ensemble.n_steps() != self.fits.len() || ensemble.n_marks() != self.n_marks {
            return Err(Error::Misaligned("anchor field and ensemble grids differ".into()));
        }
        let (k_steps, m, p) = (self.fits.len(), self.n_marks, self.basis.len());
        let mut out = vec![0.0; ensemble.n_paths() * k_steps * m];
        out.par_chunks_mut(k_steps * m).enumerate().for_each(|(i, row)| {
            let mut x = vec![0.0; p];
            for (t, fits) in self.fits.iter().enumerate() {
                self.basis.eval_row(&ensemble.observe(states, i, t), &mut x);
                for (z, fit) in fits.iter().enumerate() {
                    row[t * m + z] = if fit.dropped {
                        0.0
                    } else {
                        x.iter().zip(&fit.coefficients).map(|(a, b)| a * b).sum()
                    };
                }
            }
        });
        Ok(out)
    }

    /// Coefficients `[anchor][mark][feature]`.
    pub fn coefficients(&self) -> Vec<Vec<Vec<f64>>> {
        self.fits
            .iter()
            .map(|fs| fs.iter().map(|f| f.coefficients.clone()).collect())
            .collect()
    }
}

/// Fits one target per anchor on its diagonal cells.
pub fn estimate_diagonal(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    targets: &[TargetVariable],
    width: usize,
    basis: Arc<RegressionBasis>,
) -> Result<AnchorField> {
    let k_steps = ensemble.n_steps();
    if targets.len() != k_steps {
        return Err(Error::MissingAnchor(targets.len().min(k_steps)));
    }
    if width == 0 {
        return Err(Error::invalid("diagonal cell width must be positive"));
    }
    let m = ensemble.n_marks();
    let mut fits = Vec::with_capacity(k_steps);
    for (t, target) in targets.iter().enumerate() {
        check_target(ensemble, target)?;
        let prep = prepare(ensemble, states, &basis, t)?;
        let fixed = target.fixed();
        let end = (t + width).min(k_steps);
        fits.push(
            (0..m)
                .map(|z| {
                    let cell = Cell::single(t, end, z).expect("non-empty anchor cell");
                    fit_cell(ensemble, &prep, &cell, &fixed)
                })
                .collect(),
        );
    }
    if fits.iter().flatten().all(|f: &CellFit| f.dropped) {
        return Err(Error::AllCellsDropped);
    }
    Ok(AnchorField {
        width,
        basis,
        n_marks: m,
        fits,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct DualityRecord {
    /// `E[xi int kappa dmu]`.
    pub lhs: Summary,
    /// `E[int int field kappa lambda dz dt]`.
    pub rhs: Summary,
    /// Paired per-path difference `lhs_i - rhs_i`.
    pub gap: Summary,
    pub z: f64,
    /// The field was fitted on a different ensemble.
    pub fresh: bool,
}

pub fn duality_gap(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    target: &TargetVariable,
    kappa: &PredictableField,
    field: &DerivativeField,
) -> Result<DualityRecord> {
    check_target(ensemble, target)?;
    let integral = stochastic_integral(ensemble, kappa)?;
    let values = field.evaluate_on(ensemble, states)?;
    let n_cells = field.n_cells();
    let (k_steps, m, dt) = (ensemble.n_steps(), ensemble.n_marks(), ensemble.grid().dt());
    let rhs: Vec<f64> = (0..ensemble.n_paths())
        .into_par_iter()
        .map(|i| {
            let mut acc = 0.0;
            for k in 0..k_steps {
                for z in 0..m {
                    acc += values[i * n_cells + field.cell_index(k, z)]
                        * kappa.get(i, k, z)
                        * ensemble.intensity(i, k, z)
                        * dt;
                }
            }
            acc
        })
        .collect();
    let xi = target.values();
    let lhs: Vec<f64> = xi.iter().zip(&integral).map(|(a, b)| a * b).collect();
    let gap = Summary::from_fn(lhs.len(), |i| lhs[i] - rhs[i]);
    Ok(DualityRecord {
        lhs: Summary::of(&lhs),
        rhs: Summary::of(&rhs),
        z: gap.z_score(),
        gap,
        fresh: field.is_fresh_for(ensemble),
    })
}

/// Variance that the fitted coefficients add to the mean of the right-hand
/// side of [`duality_gap`], given their covariance on the fitting ensemble.
pub fn duality_fit_variance(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    kappa: &PredictableField,
    field: &DerivativeField,
    fit_covariance: &[DMatrix<f64>],
) -> Result<f64> {
    if fit_covariance.len() != field.fits.len() {
        return Err(Error::Misaligned("one covariance per cell expected".into()));
    }
    let (n, p, dt) = (ensemble.n_paths(), field.basis.len(), ensemble.grid().dt());
    let mut total = 0.0;
    for (c, fit) in field.fits.iter().enumerate() {
        if fit.dropped {
            continue;
        }
        let cell = &fit.cell;
        let d = field.basis.design(ensemble, states, cell.start)?;
        let weight = |i: usize| {
            let mut w = 0.0;
            for k in cell.start..cell.end {
                for &z in &cell.marks {
                    w += kappa.get(i, k, z) * ensemble.intensity(i, k, z) * dt;
                }
            }
            w
        };
        let a = DVector::from_iterator(
            p,
            (0..p).map(|j| ordered_sum(n, |i| d.row(i)[j] * weight(i)) / n as f64),
        );
        total += (a.transpose() * &fit_covariance[c] * &a)[(0, 0)];
    }
    Ok(total)
}

#[derive(Clone, Debug, Serialize)]
pub struct RepresentationRecord {
    pub xi0_estimate: f64,
    pub target_variance: f64,
    pub residual_variance: f64,
    /// z-scores of `E[residual * int phi dmu]` for indicator integrands of
    /// the field's cells, plain and weighted by a left-edge observable.
    pub orthogonality_z: Vec<f64>,
}

/// Heteroskedasticity-robust covariance `G^-1 (sum x x^T e^2) G^-1` of each
/// cell's coefficients, from the ensemble and target the field was fitted on.
pub fn coefficient_covariance(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    target: &TargetVariable,
    field: &DerivativeField,
) -> Result<Vec<DMatrix<f64>>> {
    check_target(ensemble, target)?;
    if field.is_fresh_for(ensemble) {
        return Err(Error::Misaligned("covariance needs the fitting ensemble".into()));
    }
    let p = field.basis.len();
    let xi = target.values();
    let mut out = Vec::with_capacity(field.fits.len());
    let mut design: Option<(usize, Design, DMatrix<f64>)> = None;
    for fit in &field.fits {
        if fit.dropped {
            out.push(DMatrix::zeros(p, p));
            continue;
        }
        let start = fit.cell.start;
        if design.as_ref().is_none_or(|d| d.0 != start) {
            let d = field.basis.design(ensemble, states, start)?;
            let inv = ridge_inverse(&d.gram(), &format!("coefficient covariance at step {start}"))?;
            design = Some((start, d, inv));
        }
        let (_, d, inv) = design.as_ref().expect("set above");
        let fitted = d.fitted(&fit.coefficients);
        let sq: Vec<f64> = (0..d.n)
            .map(|i| {
                let y =
                    xi[i] * ensemble.cell_noise(i, &fit.cell) / ensemble.cell_variance(i, &fit.cell).max(LAMBDA_CLAMP);
                (y - fitted[i]).powi(2)
            })
            .collect();
        let mut meat = DMatrix::<f64>::zeros(p, p);
        for (i, e2) in sq.iter().enumerate() {
            let x = d.row(i);
            for a in 0..p {
                for b in 0..p {
                    meat[(a, b)] += x[a] * x[b] * e2;
                }
            }
        }
        out.push(inv * meat * inv);
    }
    Ok(out)
}

/// Residual `xi - mean - int field dmu` and its orthogonality to simple
/// integrals. With `fit_covariance` from an independent fitting ensemble,
/// each z-score's standard error also carries the coefficient noise.
pub fn representation_residual(
    ensemble: &PathEnsemble,
    states: Option<&StatePaths>,
    target: &TargetVariable,
    field: &DerivativeField,
    fit_covariance: Option<&[DMatrix<f64>]>,
) -> Result<RepresentationRecord> {
    check_target(ensemble, target)?;
    if let Some(c) = fit_covariance {
        if c.len() != field.fits.len() {
            return Err(Error::Misaligned("one covariance per cell expected".into()));
        }
    }
    let values = field.evaluate_on(ensemble, states)?;
    let n = ensemble.n_paths();
    let n_cells = field.n_cells();
    let xi = target.values();
    let mean = Summary::of(xi).mean;
    let residual: Vec<f64> = (0..n)
        .into_par_iter()
        .map(|i| {
            let mut integral = 0.0;
            for (c, fit) in field.fits.iter().enumerate() {
                integral += values[i * n_cells + c] * ensemble.cell_noise(i, &fit.cell);
            }
            xi[i] - mean - integral
        })
        .collect();
    let p = field.basis.len();
    let mut orthogonality_z = Vec::with_capacity(2 * n_cells);
    for (c, fit) in field.fits.iter().enumerate() {
        let cell = &fit.cell;
        let weight = |i: usize, weighted: bool| {
            if weighted {
                ensemble.running_noise(i, cell.start, cell.marks[0]).tanh()
            } else {
                1.0
            }
        };
        let design = match fit_covariance {
            Some(_) => Some(field.basis.design(ensemble, states, cell.start)?),
            None => None,
        };
        for weighted in [false, true] {
            let s = Summary::from_fn(n, |i| residual[i] * weight(i, weighted) * ensemble.cell_noise(i, cell));
            let fit_var = match (fit_covariance, &design) {
                (Some(cov), Some(d)) => {
                    let a = DVector::from_iterator(
                        p,
                        (0..p).map(|j| {
                            ordered_sum(n, |i| {
                                d.row(i)[j] * ensemble.cell_noise(i, cell).powi(2) * weight(i, weighted)
                            }) / n as f64
                        }),
                    );
                    (a.transpose() * &cov[c] * &a)[(0, 0)]
                }
                _ => 0.0,
            };
            orthogonality_z.push(z_score(s.mean, (s.std_error.powi(2) + fit_var).sqrt()));
        }
    }
    Ok(RepresentationRecord {
        xi0_estimate: mean,
        target_variance: Summary::of(xi).variance,
        residual_variance: Summary::of(&residual).variance,
        orthogonality_z,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::dissecting::build_dissecting_system;
    use crate::noise::{sample_ensemble, MarkSpace, NoiseModel, TimeGrid};
    use crate::regression::Observable;

    fn brownian(n: usize, seed: u64) -> PathEnsemble {
        let g = TimeGrid::new(1.0, 16).unwrap();
        sample_ensemble(&NoiseModel::Brownian, &g, &MarkSpace::singleton(), n, seed).unwrap()
    }

    #[test]
    fn target_is_lattice_valued() {
        let t = TargetVariable::new(vec![0.1, -3.0]).unwrap();
        assert_eq!(t.values()[1], -3.0);
        assert_eq!(t.values()[0], quantize(0.1));
        assert!(TargetVariable::new(vec![f64::NAN]).is_err());
        assert!(TargetVariable::new(vec![2e9]).is_err());
    }

    #[test]
    fn terminal_noise_has_unit_derivative() {
        let e = brownian(20_000, 5);
        let s = build_dissecting_system(e.grid(), e.marks(), 2).unwrap();
        let xi = TargetVariable::new((0..e.n_paths()).map(|i| e.running_noise(i, 16, 0)).collect()).unwrap();
        let basis = Arc::new(RegressionBasis::polynomial(&[Observable::RunningNoise(0)], 1));
        let f = estimate_derivative(&e, None, &xi, &s, 2, basis).unwrap();
        let n = f.fitted.len() as f64;
        let mae = f.fitted.iter().map(|v| (v - 1.0).abs()).sum::<f64>() / n;
        let worst = f.fitted.iter().fold(0.0f64, |a, v| a.max((v - 1.0).abs()));
        assert!(mae < 0.03, "{mae}");
        assert!(worst < 0.25, "{worst}");
        assert!(f.dropped().is_empty());
    }

    #[test]
    fn constant_target_has_zero_derivative_exactly() {
        let e = brownian(1000, 6);
        let s = build_dissecting_system(e.grid(), e.marks(), 1).unwrap();
        let xi = TargetVariable::new(vec![0.0; 1000]).unwrap();
        let f = estimate_derivative(&e, None, &xi, &s, 1, Arc::new(RegressionBasis::intercept())).unwrap();
        assert!(f.fitted.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn target_length_checked() {
        let e = brownian(10, 6);
        let s = build_dissecting_system(e.grid(), e.marks(), 1).unwrap();
        let xi = TargetVariable::new(vec![1.0; 9]).unwrap();
        assert!(estimate_derivative(&e, None, &xi, &s, 1, Arc::new(RegressionBasis::intercept())).is_err());
        let xi = TargetVariable::new(vec![1.0; 10]).unwrap();
        assert!(estimate_derivative(&e, None, &xi, &s, 2, Arc::new(RegressionBasis::intercept())).is_err());
    }
}

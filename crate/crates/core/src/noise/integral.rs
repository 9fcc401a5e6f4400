use rayon::prelude::*;
use serde::Serialize;

use super::{Cell, Observation, PathEnsemble};
use crate::error::{Error, Result};
use crate::stats::{z_score, Summary};

/// Integrand values per `[path][step][mark]`, each fixed at the left edge of
/// its step. Predictability is a caller contract: a value at step `k` must
/// only use information up to `t_k`. [`PredictableField::from_fn`] enforces
/// this by handing the closure an [`Observation`] at the left edge.
#[derive(Clone, Debug, PartialEq)]
pub struct PredictableField {
    n_paths: usize,
    n_steps: usize,
    n_marks: usize,
    values: Vec<f64>,
}

impl PredictableField {
    pub fn from_fn<F>(ensemble: &PathEnsemble, f: F) -> Self
    where
        F: Fn(&Observation<'_>, usize) -> f64 + Sync,
    {
        let (k_steps, m) = (ensemble.n_steps(), ensemble.n_marks());
        let mut values = vec![0.0; ensemble.n_paths() * k_steps * m];
        values.par_chunks_mut(k_steps * m).enumerate().for_each(|(p, row)| {
            for k in 0..k_steps {
                let obs = ensemble.observe(None, p, k);
                for z in 0..m {
                    row[k * m + z] = f(&obs, z);
                }
            }
        });
        Self {
            n_paths: ensemble.n_paths(),
            n_steps: k_steps,
            n_marks: m,
            values,
        }
    }

    pub fn constant(ensemble: &PathEnsemble, c: f64) -> Self {
        Self::from_fn(ensemble, |_, _| c)
    }

    pub fn from_values(n_paths: usize, n_steps: usize, n_marks: usize, values: Vec<f64>) -> Result<Self> {
        if values.len() != n_paths * n_steps * n_marks {
            return Err(Error::Misaligned(format!(
                "{} values for {n_paths} x {n_steps} x {n_marks}",
                values.len()
            )));
        }
        Ok(Self {
            n_paths,
            n_steps,
            n_marks,
            values,
        })
    }

    #[inline]
    pub fn get(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.values[(path * self.n_steps + step) * self.n_marks + mark]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn check_aligned(&self, ensemble: &PathEnsemble) -> Result<()> {
        if (self.n_paths, self.n_steps, self.n_marks) != (ensemble.n_paths(), ensemble.n_steps(), ensemble.n_marks()) {
            return Err(Error::Misaligned(format!(
                "field shape {}x{}x{} vs ensemble {}x{}x{}",
                self.n_paths,
                self.n_steps,
                self.n_marks,
                ensemble.n_paths(),
                ensemble.n_steps(),
                ensemble.n_marks()
            )));
        }
        Ok(())
    }
}

/// `sum_k sum_z field(k, z) mu(cell_{k,z})` per path.
pub fn stochastic_integral(ensemble: &PathEnsemble, field: &PredictableField) -> Result<Vec<f64>> {
    field.check_aligned(ensemble)?;
    let (k_steps, m) = (ensemble.n_steps(), ensemble.n_marks());
    Ok((0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..k_steps {
                for z in 0..m {
                    acc += field.get(p, k, z) * ensemble.increment(p, k, z);
                }
            }
            acc
        })
        .collect())
}

/// Per-path `sum_k sum_z field^2 lambda dt`.
fn quadratic_compensator(ensemble: &PathEnsemble, field: &PredictableField) -> Vec<f64> {
    let (k_steps, m, dt) = (ensemble.n_steps(), ensemble.n_marks(), ensemble.grid().dt());
    (0..ensemble.n_paths())
        .into_par_iter()
        .map(|p| {
            let mut acc = 0.0;
            for k in 0..k_steps {
                for z in 0..m {
                    let v = field.get(p, k, z);
                    acc += v * v * ensemble.intensity(p, k, z) * dt;
                }
            }
            acc
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct IsometryReport {
    /// `E[(int field dmu)^2]`.
    pub second_moment: Summary,
    /// `E[int int field^2 lambda dz dt]`.
    pub compensator: Summary,
    /// Paired difference of the two per-path quantities.
    pub gap: Summary,
    pub z: f64,
}

pub fn isometry_check(ensemble: &PathEnsemble, field: &PredictableField) -> Result<IsometryReport> {
    let integral = stochastic_integral(ensemble, field)?;
    let squares: Vec<f64> = integral.iter().map(|x| x * x).collect();
    let comp = quadratic_compensator(ensemble, field);
    let gap = Summary::from_fn(squares.len(), |i| squares[i] - comp[i]);
    Ok(IsometryReport {
        second_moment: Summary::of(&squares),
        compensator: Summary::of(&comp),
        z: gap.z_score(),
        gap,
    })
}

#[derive(Clone, Debug, Serialize)]
pub struct PairCheck {
    pub first: usize,
    pub second: usize,
    /// z-score of `E[mu(A) mu(B)]`.
    pub z_plain: f64,
    /// z-score of `E[w mu(A) mu(B)]` for a bounded weight `w` known at the
    /// earlier left edge; probes the conditional form of orthogonality.
    pub z_weighted: f64,
}

#[derive(Clone, Debug, Serialize)]
pub struct PropertyReport {
    pub martingale_z: Vec<f64>,
    pub orthogonality: Vec<PairCheck>,
    /// Largest `|mu(A) - mu(A') - mu(A'')|` over paths for a split of each
    /// cell; exact zeros are expected.
    pub additivity_residuals: Vec<f64>,
    /// z-scores of `E[mu(A)^2] - E[Lambda(A)]`.
    pub isometry_z: Vec<f64>,
}

impl PropertyReport {
    /// Share of martingale and orthogonality z-scores within `bound`.
    pub fn fraction_within(&self, bound: f64) -> f64 {
        let zs: Vec<f64> = self
            .martingale_z
            .iter()
            .copied()
            .chain(self.orthogonality.iter().flat_map(|c| [c.z_plain, c.z_weighted]))
            .collect();
        if zs.is_empty() {
            return 1.0;
        }
        zs.iter().filter(|z| z.abs() <= bound).count() as f64 / zs.len() as f64
    }

    pub fn additivity_exact(&self) -> bool {
        self.additivity_residuals.iter().all(|r| *r == 0.0)
    }
}

fn split(cell: &Cell) -> Option<(Cell, Cell)> {
    if cell.steps() > 1 {
        let mid = cell.start + cell.steps() / 2;
        Some((
            Cell::new(cell.start, mid, cell.marks.clone()).ok()?,
            Cell::new(mid, cell.end, cell.marks.clone()).ok()?,
        ))
    } else if cell.marks.len() > 1 {
        let h = cell.marks.len() / 2;
        Some((
            Cell::new(cell.start, cell.end, cell.marks[..h].to_vec()).ok()?,
            Cell::new(cell.start, cell.end, cell.marks[h..].to_vec()).ok()?,
        ))
    } else {
        None
    }
}

/// Empirical checks of the field axioms over the given cells. Every pair of
/// cells enters the orthogonality check, so the cells must be disjoint.
pub fn field_property_suite(ensemble: &PathEnsemble, cells: &[Cell]) -> Result<PropertyReport> {
    for c in cells {
        ensemble.check_cell(c)?;
    }
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            if cells[i].overlaps(&cells[j]) {
                return Err(Error::OverlappingCells { first: i, second: j });
            }
        }
    }
    let n = ensemble.n_paths();
    let noise: Vec<Vec<f64>> = cells
        .iter()
        .map(|c| (0..n).into_par_iter().map(|p| ensemble.cell_noise(p, c)).collect())
        .collect();

    let martingale_z = noise.iter().map(|v| Summary::of(v).z_score()).collect();

    let mut orthogonality = Vec::new();
    for i in 0..cells.len() {
        for j in i + 1..cells.len() {
            let anchor = cells[i].start.min(cells[j].start);
            let (a, b) = (&noise[i], &noise[j]);
            let plain = Summary::from_fn(n, |p| a[p] * b[p]);
            let weighted = Summary::from_fn(n, |p| {
                let obs = ensemble.observe(None, p, anchor);
                let s: f64 = (0..ensemble.n_marks()).map(|z| obs.running_noise(z)).sum();
                (1.0 + s.tanh()) * a[p] * b[p]
            });
            orthogonality.push(PairCheck {
                first: i,
                second: j,
                z_plain: plain.z_score(),
                z_weighted: weighted.z_score(),
            });
        }
    }

    let additivity_residuals = cells
        .iter()
        .zip(&noise)
        .map(|(c, whole)| match split(c) {
            Some((l, r)) => (0..n)
                .map(|p| (whole[p] - ensemble.cell_noise(p, &l) - ensemble.cell_noise(p, &r)).abs())
                .fold(0.0, f64::max),
            None => 0.0,
        })
        .collect();

    let isometry_z = cells
        .iter()
        .zip(&noise)
        .map(|(c, v)| {
            let gap = Summary::from_fn(n, |p| v[p] * v[p] - ensemble.cell_variance(p, c));
            z_score(gap.mean, gap.std_error)
        })
        .collect();

    Ok(PropertyReport {
        martingale_z,
        orthogonality,
        additivity_residuals,
        isometry_z,
    })
}

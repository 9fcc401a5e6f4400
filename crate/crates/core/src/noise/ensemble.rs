use rayon::prelude::*;

use super::{quantize, Cell, MarkSpace, NoiseModel, PathSlot, TimeGrid};
use crate::error::{Error, Result};
use crate::rng::PathStream;
use crate::sde::StatePaths;

/// A seeded Monte Carlo sample of a martingale random field.
///
/// Per-cell arrays are laid out `[path][step][mark]`; running sums
/// `mu((0, t_k] x {z})` are laid out `[path][step 0..=K][mark]`.
#[derive(Clone, Debug, PartialEq)]
pub struct PathEnsemble {
    model: NoiseModel,
    grid: TimeGrid,
    marks: MarkSpace,
    n_paths: usize,
    seed: u64,
    increments: Vec<f64>,
    intensity: Vec<f64>,
    counts: Option<Vec<u32>>,
    running: Vec<f64>,
    running_counts: Option<Vec<u32>>,
}

pub fn sample_ensemble(
    model: &NoiseModel,
    grid: &TimeGrid,
    marks: &MarkSpace,
    n_paths: usize,
    seed: u64,
) -> Result<PathEnsemble> {
    if n_paths == 0 {
        return Err(Error::invalid("n_paths must be at least 1"));
    }
    let source = model.source()?;
    source.check_marks(marks)?;
    let m = marks.len();
    let per_path = grid.n_steps() * m;
    let mut increments = vec![0.0; n_paths * per_path];
    let mut intensity = vec![0.0; n_paths * per_path];
    let mut counts = source.counting().then(|| vec![0u32; n_paths * per_path]);

    let fill = |p: usize, inc: &mut [f64], lam: &mut [f64], cnt: Option<&mut [u32]>| {
        let mut stream = PathStream::new(seed, p);
        source.fill_path(
            grid,
            m,
            &mut stream,
            PathSlot {
                increments: inc,
                intensity: lam,
                counts: cnt,
            },
        );
    };
    match counts.as_mut() {
        Some(c) => increments
            .par_chunks_mut(per_path)
            .zip(intensity.par_chunks_mut(per_path))
            .zip(c.par_chunks_mut(per_path))
            .enumerate()
            .for_each(|(p, ((inc, lam), cnt))| fill(p, inc, lam, Some(cnt))),
        None => increments
            .par_chunks_mut(per_path)
            .zip(intensity.par_chunks_mut(per_path))
            .enumerate()
            .for_each(|(p, (inc, lam))| fill(p, inc, lam, None)),
    }
    Ok(PathEnsemble::assemble(
        source.model(),
        grid.clone(),
        marks.clone(),
        n_paths,
        seed,
        increments,
        intensity,
        counts,
    ))
}

impl PathEnsemble {
    /// Builds an ensemble from explicit arrays (enumerated trees, imported
    /// data). Increments are snapped to the 2^-32 lattice.
    #[allow(clippy::too_many_arguments)]
    pub fn from_parts(
        model: NoiseModel,
        grid: TimeGrid,
        marks: MarkSpace,
        seed: u64,
        increments: Vec<f64>,
        intensity: Vec<f64>,
        counts: Option<Vec<u32>>,
    ) -> Result<Self> {
        let per_path = grid.n_steps() * marks.len();
        if increments.is_empty() || !increments.len().is_multiple_of(per_path) {
            return Err(Error::Misaligned(format!(
                "{} increments do not fill whole paths of {per_path} cells",
                increments.len()
            )));
        }
        if intensity.len() != increments.len() || counts.as_ref().is_some_and(|c| c.len() != increments.len()) {
            return Err(Error::Misaligned("array lengths differ".into()));
        }
        if intensity.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid("intensity values must be strictly positive"));
        }
        if increments.iter().any(|x| !x.is_finite()) {
            return Err(Error::invalid("increments must be finite"));
        }
        let n_paths = increments.len() / per_path;
        let increments = increments.into_iter().map(quantize).collect();
        Ok(Self::assemble(
            model, grid, marks, n_paths, seed, increments, intensity, counts,
        ))
    }

    #[allow(clippy::too_many_arguments)]
    fn assemble(
        model: NoiseModel,
        grid: TimeGrid,
        marks: MarkSpace,
        n_paths: usize,
        seed: u64,
        increments: Vec<f64>,
        intensity: Vec<f64>,
        counts: Option<Vec<u32>>,
    ) -> Self {
        let (k_steps, m) = (grid.n_steps(), marks.len());
        let stride = (k_steps + 1) * m;
        let mut running = vec![0.0; n_paths * stride];
        running.par_chunks_mut(stride).enumerate().for_each(|(p, run)| {
            for k in 0..k_steps {
                for z in 0..m {
                    run[(k + 1) * m + z] = run[k * m + z] + increments[(p * k_steps + k) * m + z];
                }
            }
        });
        let running_counts = counts.as_ref().map(|c| {
            let mut rc = vec![0u32; n_paths * stride];
            rc.par_chunks_mut(stride).enumerate().for_each(|(p, run)| {
                for k in 0..k_steps {
                    for z in 0..m {
                        run[(k + 1) * m + z] = run[k * m + z] + c[(p * k_steps + k) * m + z];
                    }
                }
            });
            rc
        });
        Self {
            model,
            grid,
            marks,
            n_paths,
            seed,
            increments,
            intensity,
            counts,
            running,
            running_counts,
        }
    }

    pub fn model(&self) -> &NoiseModel {
        &self.model
    }

    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn marks(&self) -> &MarkSpace {
        &self.marks
    }

    pub fn n_paths(&self) -> usize {
        self.n_paths
    }

    pub fn n_steps(&self) -> usize {
        self.grid.n_steps()
    }

    pub fn n_marks(&self) -> usize {
        self.marks.len()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn is_counting(&self) -> bool {
        self.counts.is_some()
    }

    #[inline]
    pub fn index(&self, path: usize, step: usize, mark: usize) -> usize {
        (path * self.grid.n_steps() + step) * self.marks.len() + mark
    }

    #[inline]
    pub fn increment(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.increments[self.index(path, step, mark)]
    }

    /// `lambda_{t_k}(z)`, known at the left edge of step `k`.
    #[inline]
    pub fn intensity(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.intensity[self.index(path, step, mark)]
    }

    #[inline]
    pub fn count(&self, path: usize, step: usize, mark: usize) -> u32 {
        self.counts.as_ref().map_or(0, |c| c[self.index(path, step, mark)])
    }

    /// Compensator of one grid cell on the lattice used by the sampler.
    #[inline]
    pub fn compensator(&self, path: usize, step: usize, mark: usize) -> f64 {
        quantize(self.intensity(path, step, mark) * self.grid.dt())
    }

    /// `mu((0, t_step] x {mark})`.
    #[inline]
    pub fn running_noise(&self, path: usize, step: usize, mark: usize) -> f64 {
        self.running[(path * (self.grid.n_steps() + 1) + step) * self.marks.len() + mark]
    }

    /// `H((0, t_step] x {mark})`, zero for non-counting models.
    #[inline]
    pub fn running_count(&self, path: usize, step: usize, mark: usize) -> u32 {
        self.running_counts.as_ref().map_or(0, |c| {
            c[(path * (self.grid.n_steps() + 1) + step) * self.marks.len() + mark]
        })
    }

    pub fn increments(&self) -> &[f64] {
        &self.increments
    }

    pub fn intensities(&self) -> &[f64] {
        &self.intensity
    }

    pub fn counts(&self) -> Option<&[u32]> {
        self.counts.as_deref()
    }

    pub fn check_cell(&self, cell: &Cell) -> Result<()> {
        cell.check_within(&self.grid, &self.marks)
    }

    /// `mu(cell)` on one path; exact thanks to the lattice.
    pub fn cell_noise(&self, path: usize, cell: &Cell) -> f64 {
        cell.marks
            .iter()
            .map(|&z| self.running_noise(path, cell.end, z) - self.running_noise(path, cell.start, z))
            .sum()
    }

    /// `Lambda(cell) = sum lambda dt` on one path.
    pub fn cell_variance(&self, path: usize, cell: &Cell) -> f64 {
        let dt = self.grid.dt();
        let mut acc = 0.0;
        for k in cell.start..cell.end {
            for &z in &cell.marks {
                acc += self.intensity(path, k, z) * dt;
            }
        }
        acc
    }

    pub fn cell_count(&self, path: usize, cell: &Cell) -> u32 {
        cell.marks
            .iter()
            .map(|&z| self.running_count(path, cell.end, z) - self.running_count(path, cell.start, z))
            .sum()
    }

    pub fn observe<'a>(&'a self, states: Option<&'a StatePaths>, path: usize, step: usize) -> Observation<'a> {
        Observation {
            ensemble: self,
            states,
            path,
            step,
        }
    }
}

/// The information available at the left edge of a step on one path.
#[derive(Clone, Copy)]
pub struct Observation<'a> {
    pub ensemble: &'a PathEnsemble,
    pub states: Option<&'a StatePaths>,
    pub path: usize,
    pub step: usize,
}

impl Observation<'_> {
    pub fn time(&self) -> f64 {
        self.ensemble.grid().time(self.step)
    }

    pub fn running_noise(&self, mark: usize) -> f64 {
        self.ensemble.running_noise(self.path, self.step, mark)
    }

    pub fn running_count(&self, mark: usize) -> f64 {
        self.ensemble.running_count(self.path, self.step, mark) as f64
    }

    pub fn intensity(&self, mark: usize) -> f64 {
        let k = self.step.min(self.ensemble.n_steps() - 1);
        self.ensemble.intensity(self.path, k, mark)
    }

    /// 1 while no jump of `mark` has occurred strictly before this step.
    pub fn survived(&self, mark: usize) -> f64 {
        if self.ensemble.running_count(self.path, self.step, mark) == 0 {
            1.0
        } else {
            0.0
        }
    }

    pub fn state(&self) -> Option<f64> {
        self.states.map(|s| s.x(self.path, self.step))
    }

    /// `X_{t_{k - lag}}`, clamped at `X_0`.
    pub fn lagged_state(&self, lag: usize) -> Option<f64> {
        self.states.map(|s| s.x(self.path, self.step.saturating_sub(lag)))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::noise::CoxDriver;

    fn poisson(lambda: f64) -> NoiseModel {
        NoiseModel::CompensatedPoisson {
            intensities: vec![lambda],
        }
    }

    #[test]
    fn same_seed_is_bit_identical() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let m = MarkSpace::numbered(2).unwrap();
        let model = NoiseModel::DoublyStochasticPoisson {
            drivers: vec![
                CoxDriver {
                    initial: 1.0,
                    mean_reversion: 0.5,
                    long_run: 1.5,
                    volatility: 0.4,
                };
                2
            ],
        };
        let a = sample_ensemble(&model, &g, &m, 300, 17).unwrap();
        let b = sample_ensemble(&model, &g, &m, 300, 17).unwrap();
        assert_eq!(a, b);
        let c = sample_ensemble(&model, &g, &m, 300, 18).unwrap();
        assert_ne!(a.increments(), c.increments());
    }

    #[test]
    fn compensated_increments_match_counts() {
        let g = TimeGrid::new(1.0, 10).unwrap();
        let m = MarkSpace::numbered(1).unwrap();
        let e = sample_ensemble(&poisson(2.0), &g, &m, 200, 3).unwrap();
        for p in 0..e.n_paths() {
            for k in 0..e.n_steps() {
                let lhs = e.increment(p, k, 0);
                let rhs = e.count(p, k, 0) as f64 - e.compensator(p, k, 0);
                assert_eq!(lhs, rhs);
                assert!((e.compensator(p, k, 0) - 0.2).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn brownian_requires_single_mark() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = MarkSpace::numbered(2).unwrap();
        assert!(matches!(
            sample_ensemble(&NoiseModel::Brownian, &g, &m, 10, 1),
            Err(Error::MarkModelMismatch { .. })
        ));
        assert!(sample_ensemble(&NoiseModel::Brownian, &g, &MarkSpace::singleton(), 0, 1).is_err());
    }

    #[test]
    fn path_content_independent_of_ensemble_size() {
        let g = TimeGrid::new(1.0, 8).unwrap();
        let m = MarkSpace::singleton();
        let small = sample_ensemble(&NoiseModel::Brownian, &g, &m, 5, 9).unwrap();
        let large = sample_ensemble(&NoiseModel::Brownian, &g, &m, 50, 9).unwrap();
        assert_eq!(small.increments(), &large.increments()[..small.increments().len()]);
    }

    #[test]
    fn from_parts_validates() {
        let g = TimeGrid::new(1.0, 2).unwrap();
        let m = MarkSpace::singleton();
        let ext = NoiseModel::External { label: "t".into() };
        assert!(
            PathEnsemble::from_parts(ext.clone(), g.clone(), m.clone(), 0, vec![0.1; 3], vec![1.0; 3], None).is_err()
        );
        assert!(
            PathEnsemble::from_parts(ext.clone(), g.clone(), m.clone(), 0, vec![0.1; 4], vec![0.0; 4], None).is_err()
        );
        let e = PathEnsemble::from_parts(ext, g, m, 0, vec![0.5, -0.25, 1.0, 0.0], vec![1.0; 4], None).unwrap();
        assert_eq!(e.n_paths(), 2);
        assert_eq!(e.running_noise(0, 2, 0), 0.25);
    }
}

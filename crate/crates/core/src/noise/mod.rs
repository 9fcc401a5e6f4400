//! Martingale random fields on a time grid times a finite mark space.
//!
//! Three sources are registered: Brownian (single mark, unit kernel),
//! compensated Poisson and doubly stochastic (Cox) Poisson. Increments are
//! stored on a dyadic lattice of spacing 2^-32 so that the sum of a cell's
//! increments is exact in `f64`; additivity over grid-aligned partitions
//! then holds bit for bit.

mod ensemble;
mod integral;
pub mod io;

pub use ensemble::{sample_ensemble, Observation, PathEnsemble};
pub use integral::{
    field_property_suite, isometry_check, stochastic_integral, IsometryReport, PairCheck, PredictableField,
    PropertyReport,
};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::registry::Registry;
use crate::rng::PathStream;

const LATTICE: f64 = 4_294_967_296.0; // 2^32

/// Rounds to the 2^-32 lattice.
pub fn quantize(x: f64) -> f64 {
    (x * LATTICE).round() / LATTICE
}

/// Floor applied to simulated Cox intensities (full truncation).
pub const INTENSITY_FLOOR: f64 = 1e-8;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TimeGrid {
    horizon: f64,
    n_steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, n_steps: usize) -> Result<Self> {
        if !(horizon.is_finite() && horizon > 0.0) {
            return Err(Error::invalid(format!("horizon must be positive, got {horizon}")));
        }
        if n_steps == 0 {
            return Err(Error::invalid("grid needs at least one step"));
        }
        Ok(Self { horizon, n_steps })
    }

    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn n_steps(&self) -> usize {
        self.n_steps
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.n_steps as f64
    }

    /// Left edge of step `k`; `time(n_steps)` is the horizon exactly.
    pub fn time(&self, k: usize) -> f64 {
        if k >= self.n_steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.n_steps as f64
        }
    }

    pub fn edges(&self) -> Vec<f64> {
        (0..=self.n_steps).map(|k| self.time(k)).collect()
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct MarkSpace {
    labels: Vec<u32>,
}

impl MarkSpace {
    pub fn new(labels: Vec<u32>) -> Result<Self> {
        if labels.is_empty() {
            return Err(Error::invalid("mark space must be non-empty"));
        }
        let mut sorted = labels.clone();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != labels.len() {
            return Err(Error::invalid("mark labels must be distinct"));
        }
        Ok(Self { labels })
    }

    /// The Brownian mark space `{0}`.
    pub fn singleton() -> Self {
        Self { labels: vec![0] }
    }

    /// Marks `{1, ..., n}`.
    pub fn numbered(n: usize) -> Result<Self> {
        Self::new((1..=n as u32).collect())
    }

    pub fn len(&self) -> usize {
        self.labels.len()
    }

    pub fn is_empty(&self) -> bool {
        self.labels.is_empty()
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }
}

/// A grid-aligned set `(t_start, t_end] x Z`, with step indices and mark
/// indices (positions in the [`MarkSpace`]).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct Cell {
    pub start: usize,
    pub end: usize,
    pub marks: Vec<usize>,
}

impl Cell {
    pub fn new(start: usize, end: usize, mut marks: Vec<usize>) -> Result<Self> {
        if start >= end {
            return Err(Error::invalid(format!("empty time interval ({start}, {end}]")));
        }
        marks.sort_unstable();
        marks.dedup();
        if marks.is_empty() {
            return Err(Error::invalid("cell needs at least one mark"));
        }
        Ok(Self { start, end, marks })
    }

    pub fn single(start: usize, end: usize, mark: usize) -> Result<Self> {
        Self::new(start, end, vec![mark])
    }

    pub fn steps(&self) -> usize {
        self.end - self.start
    }

    pub fn contains_point(&self, step: usize, mark: usize) -> bool {
        step >= self.start && step < self.end && self.marks.binary_search(&mark).is_ok()
    }

    pub fn overlaps(&self, other: &Cell) -> bool {
        let time = self.start < other.end && other.start < self.end;
        time && self.marks.iter().any(|m| other.marks.binary_search(m).is_ok())
    }

    /// `other` is a subset of `self`.
    pub fn contains(&self, other: &Cell) -> bool {
        other.start >= self.start
            && other.end <= self.end
            && other.marks.iter().all(|m| self.marks.binary_search(m).is_ok())
    }

    pub fn check_within(&self, grid: &TimeGrid, marks: &MarkSpace) -> Result<()> {
        if self.end > grid.n_steps() || self.marks.iter().any(|&m| m >= marks.len()) {
            return Err(Error::Misaligned(format!(
                "cell ({}, {}] x {:?} outside grid of {} steps and {} marks",
                self.start,
                self.end,
                self.marks,
                grid.n_steps(),
                marks.len()
            )));
        }
        Ok(())
    }
}

/// Mean-reverting positive intensity driver, advanced by
/// `l' = max(l + a (b - l) dt + s sqrt(l) sqrt(dt) Z, floor)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoxDriver {
    pub initial: f64,
    pub mean_reversion: f64,
    pub long_run: f64,
    pub volatility: f64,
}

impl CoxDriver {
    pub fn constant(intensity: f64) -> Self {
        Self {
            initial: intensity,
            mean_reversion: 0.0,
            long_run: intensity,
            volatility: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.initial > 0.0
            && self.long_run > 0.0
            && self.mean_reversion >= 0.0
            && self.volatility >= 0.0
            && [self.initial, self.long_run, self.mean_reversion, self.volatility]
                .iter()
                .all(|v| v.is_finite());
        if ok {
            Ok(())
        } else {
            Err(Error::invalid(format!(
                "Cox driver parameters must be positive: {self:?}"
            )))
        }
    }

    pub fn step(&self, current: f64, dt: f64, normal: f64) -> f64 {
        let l = current.max(0.0);
        let next = l + self.mean_reversion * (self.long_run - l) * dt + self.volatility * l.sqrt() * dt.sqrt() * normal;
        next.max(INTENSITY_FLOOR)
    }
}

/// Serializable descriptor of a noise model.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum NoiseModel {
    Brownian,
    CompensatedPoisson {
        intensities: Vec<f64>,
    },
    DoublyStochasticPoisson {
        drivers: Vec<CoxDriver>,
    },
    /// Ensembles assembled from explicit data (enumerations, imports).
    External {
        label: String,
    },
}

impl NoiseModel {
    pub fn name(&self) -> &'static str {
        match self {
            NoiseModel::Brownian => "brownian",
            NoiseModel::CompensatedPoisson { .. } => "compensated_poisson",
            NoiseModel::DoublyStochasticPoisson { .. } => "doubly_stochastic_poisson",
            NoiseModel::External { .. } => "external",
        }
    }

    /// Looks up the sampling strategy for this model in the default registry.
    pub fn source(&self) -> Result<Box<dyn NoiseSource>> {
        let registry = noise_registry();
        let factory = registry.get(self.name())?;
        factory(self)
    }
}

/// Buffers for one path, laid out `[step][mark]`.
pub struct PathSlot<'a> {
    pub increments: &'a mut [f64],
    pub intensity: &'a mut [f64],
    pub counts: Option<&'a mut [u32]>,
}

/// A sampling strategy for a martingale random field.
pub trait NoiseSource: Send + Sync {
    fn model(&self) -> NoiseModel;

    /// Whether the field is a compensated counting process (raw counts kept).
    fn counting(&self) -> bool;

    fn check_marks(&self, marks: &MarkSpace) -> Result<()>;

    /// Fills one path. Cells must be visited in `(step, mark)` order, one
    /// `next_cell` per cell.
    fn fill_path(&self, grid: &TimeGrid, n_marks: usize, stream: &mut PathStream, slot: PathSlot<'_>);
}

pub type NoiseFactory = fn(&NoiseModel) -> Result<Box<dyn NoiseSource>>;

pub fn noise_registry() -> Registry<NoiseFactory> {
    let mut reg: Registry<NoiseFactory> = Registry::new("noise source");
    reg.register("brownian", |_| Ok(Box::new(BrownianField)))
        .register("compensated_poisson", |m| match m {
            NoiseModel::CompensatedPoisson { intensities } => Ok(Box::new(PoissonField::new(intensities.clone())?)),
            _ => Err(Error::invalid("expected compensated_poisson parameters")),
        })
        .register("doubly_stochastic_poisson", |m| match m {
            NoiseModel::DoublyStochasticPoisson { drivers } => Ok(Box::new(CoxField::new(drivers.clone())?)),
            _ => Err(Error::invalid("expected doubly_stochastic_poisson parameters")),
        });
    reg
}

pub struct BrownianField;

impl NoiseSource for BrownianField {
    fn model(&self) -> NoiseModel {
        NoiseModel::Brownian
    }

    fn counting(&self) -> bool {
        false
    }

    fn check_marks(&self, marks: &MarkSpace) -> Result<()> {
        if marks.len() != 1 {
            return Err(Error::MarkModelMismatch {
                model: "brownian".into(),
                marks: marks.len(),
            });
        }
        Ok(())
    }

    fn fill_path(&self, grid: &TimeGrid, _n_marks: usize, stream: &mut PathStream, slot: PathSlot<'_>) {
        let sd = grid.dt().sqrt();
        for k in 0..grid.n_steps() {
            let d = stream.next_cell();
            slot.increments[k] = quantize(sd * d.normal());
            slot.intensity[k] = 1.0;
        }
    }
}

pub struct PoissonField {
    intensities: Vec<f64>,
}

impl PoissonField {
    pub fn new(intensities: Vec<f64>) -> Result<Self> {
        if intensities.is_empty() || intensities.iter().any(|l| !(l.is_finite() && *l > 0.0)) {
            return Err(Error::invalid(format!(
                "Poisson intensities must be strictly positive, got {intensities:?}"
            )));
        }
        Ok(Self { intensities })
    }
}

impl NoiseSource for PoissonField {
    fn model(&self) -> NoiseModel {
        NoiseModel::CompensatedPoisson {
            intensities: self.intensities.clone(),
        }
    }

    fn counting(&self) -> bool {
        true
    }

    fn check_marks(&self, marks: &MarkSpace) -> Result<()> {
        if marks.len() != self.intensities.len() {
            return Err(Error::MarkModelMismatch {
                model: "compensated_poisson".into(),
                marks: marks.len(),
            });
        }
        Ok(())
    }

    fn fill_path(&self, grid: &TimeGrid, n_marks: usize, stream: &mut PathStream, slot: PathSlot<'_>) {
        let dt = grid.dt();
        let counts = slot.counts.expect("counting source needs count buffer");
        for k in 0..grid.n_steps() {
            for (z, &lambda) in self.intensities.iter().enumerate() {
                let i = k * n_marks + z;
                let d = stream.next_cell();
                let comp = quantize(lambda * dt);
                let n = d.poisson(lambda * dt);
                counts[i] = n;
                slot.intensity[i] = lambda;
                slot.increments[i] = n as f64 - comp;
            }
        }
    }
}

pub struct CoxField {
    drivers: Vec<CoxDriver>,
}

impl CoxField {
    pub fn new(drivers: Vec<CoxDriver>) -> Result<Self> {
        if drivers.is_empty() {
            return Err(Error::invalid("Cox model needs one driver per mark"));
        }
        for d in &drivers {
            d.validate()?;
        }
        Ok(Self { drivers })
    }
}

impl NoiseSource for CoxField {
    fn model(&self) -> NoiseModel {
        NoiseModel::DoublyStochasticPoisson {
            drivers: self.drivers.clone(),
        }
    }

    fn counting(&self) -> bool {
        true
    }

    fn check_marks(&self, marks: &MarkSpace) -> Result<()> {
        if marks.len() != self.drivers.len() {
            return Err(Error::MarkModelMismatch {
                model: "doubly_stochastic_poisson".into(),
                marks: marks.len(),
            });
        }
        Ok(())
    }

    fn fill_path(&self, grid: &TimeGrid, n_marks: usize, stream: &mut PathStream, slot: PathSlot<'_>) {
        let dt = grid.dt();
        let counts = slot.counts.expect("counting source needs count buffer");
        let mut current: Vec<f64> = self.drivers.iter().map(|d| d.initial).collect();
        for k in 0..grid.n_steps() {
            for (z, driver) in self.drivers.iter().enumerate() {
                let i = k * n_marks + z;
                let d = stream.next_cell();
                let lambda = current[z];
                let comp = quantize(lambda * dt);
                let n = d.poisson(lambda * dt);
                counts[i] = n;
                slot.intensity[i] = lambda;
                slot.increments[i] = n as f64 - comp;
                current[z] = driver.step(lambda, dt, d.normal());
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn grid_edges_end_at_horizon() {
        let g = TimeGrid::new(0.3, 7).unwrap();
        let e = g.edges();
        assert_eq!(e.len(), 8);
        assert_eq!(*e.last().unwrap(), 0.3);
        assert!(e.windows(2).all(|w| w[0] < w[1]));
        assert!(TimeGrid::new(0.0, 3).is_err());
        assert!(TimeGrid::new(1.0, 0).is_err());
    }

    #[test]
    fn mark_space_rejects_duplicates() {
        assert!(MarkSpace::new(vec![]).is_err());
        assert!(MarkSpace::new(vec![1, 1]).is_err());
        assert_eq!(MarkSpace::numbered(3).unwrap().labels(), &[1, 2, 3]);
    }

    #[test]
    fn cell_relations() {
        let a = Cell::new(0, 4, vec![0, 1]).unwrap();
        let b = Cell::single(2, 3, 1).unwrap();
        let c = Cell::single(4, 6, 1).unwrap();
        assert!(a.contains(&b) && a.overlaps(&b));
        assert!(!a.overlaps(&c));
        assert!(Cell::single(3, 3, 0).is_err());
        assert!(Cell::new(0, 1, vec![]).is_err());
    }

    #[test]
    fn quantized_sums_are_associative() {
        let xs: Vec<f64> = (0..64).map(|i| quantize(((i * 7919) as f64).sin() * 0.3)).collect();
        let whole: f64 = xs.iter().sum();
        let split: f64 = xs[..29].iter().sum::<f64>() + xs[29..].iter().sum::<f64>();
        assert_eq!(whole.to_bits(), split.to_bits());
    }

    #[test]
    fn cox_driver_stays_positive() {
        let d = CoxDriver {
            initial: 0.01,
            mean_reversion: 1.0,
            long_run: 0.02,
            volatility: 5.0,
        };
        assert_eq!(d.step(0.01, 0.1, -50.0), INTENSITY_FLOOR);
        assert!(CoxDriver::constant(-1.0).validate().is_err());
    }

    #[test]
    fn registry_resolves_models() {
        let reg = noise_registry();
        assert!(reg.contains("brownian") && reg.contains("doubly_stochastic_poisson"));
        assert!(NoiseModel::External { label: "x".into() }.source().is_err());
        assert!(NoiseModel::CompensatedPoisson { intensities: vec![0.0] }
            .source()
            .is_err());
    }
}

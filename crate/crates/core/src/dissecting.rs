//! Nested dyadic partitions of `[0, T] x Z`.
//!
//! Level `n` splits time into `2^n` intervals and pairs each with a single
//! mark, so `K_n = 2^n * |Z|`. Cells are ordered time-major: index
//! `j * |Z| + z`.

use std::fmt::Write as _;

use rayon::prelude::*;
use serde::Serialize;

use crate::error::{Error, Result};
use crate::noise::{Cell, MarkSpace, PathEnsemble, TimeGrid};
use crate::stats::Summary;

#[derive(Clone, Debug, PartialEq)]
pub struct Level {
    pub cells: Vec<Cell>,
    /// Index of the enclosing cell one level up (empty at level 0).
    pub parents: Vec<usize>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct DissectingSystem {
    grid: TimeGrid,
    n_marks: usize,
    levels: Vec<Level>,
}

pub fn build_dissecting_system(grid: &TimeGrid, marks: &MarkSpace, max_level: usize) -> Result<DissectingSystem> {
    let cells_at_max = 1usize.checked_shl(max_level as u32).unwrap_or(0);
    if cells_at_max == 0 || !grid.n_steps().is_multiple_of(cells_at_max) {
        return Err(Error::GridNotDyadic {
            steps: grid.n_steps(),
            level: max_level,
        });
    }
    let m = marks.len();
    let levels = (0..=max_level)
        .map(|n| {
            let w = grid.n_steps() >> n;
            let mut cells = Vec::with_capacity((1 << n) * m);
            let mut parents = Vec::new();
            for j in 0..1usize << n {
                for z in 0..m {
                    cells.push(Cell::single(j * w, (j + 1) * w, z).expect("non-empty dyadic cell"));
                    if n > 0 {
                        parents.push((j / 2) * m + z);
                    }
                }
            }
            Level { cells, parents }
        })
        .collect();
    Ok(DissectingSystem {
        grid: grid.clone(),
        n_marks: m,
        levels,
    })
}

impl DissectingSystem {
    pub fn grid(&self) -> &TimeGrid {
        &self.grid
    }

    pub fn n_marks(&self) -> usize {
        self.n_marks
    }

    pub fn max_level(&self) -> usize {
        self.levels.len() - 1
    }

    pub fn level(&self, n: usize) -> Result<&Level> {
        self.levels
            .get(n)
            .ok_or_else(|| Error::invalid(format!("level {n} exceeds system maximum {}", self.max_level())))
    }

    pub fn levels(&self) -> &[Level] {
        &self.levels
    }

    /// Time width of a level-`n` cell in grid steps.
    pub fn width_steps(&self, n: usize) -> usize {
        self.grid.n_steps() >> n
    }

    pub fn mesh(&self, n: usize) -> f64 {
        self.grid.horizon() / (1u64 << n) as f64
    }

    /// Strict upper bound on the time mesh at level `n`: `T 2^(1-n)`.
    pub fn mesh_bound(&self, n: usize) -> f64 {
        2.0 * self.mesh(n)
    }

    /// One line per cell: `level k t_a t_b mark`.
    pub fn dump(&self, marks: &MarkSpace) -> String {
        let mut out = String::from("level\tk\tt_a\tt_b\tmark\n");
        for (n, level) in self.levels.iter().enumerate() {
            for (k, c) in level.cells.iter().enumerate() {
                let _ = writeln!(
                    out,
                    "{n}\t{k}\t{}\t{}\t{}",
                    self.grid.time(c.start),
                    self.grid.time(c.end),
                    marks.labels()[c.marks[0]]
                );
            }
        }
        out
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct LevelReport {
    pub level: usize,
    pub n_cells: usize,
    pub mesh: f64,
    pub mesh_bound: f64,
    /// `max_k` of the sample mean of `mu(Delta_{n,k})^2`.
    pub max_variance: Summary,
    pub variance_bound: f64,
    pub disjoint: bool,
    pub covers: bool,
    pub nested: bool,
    pub single_mark: bool,
}

impl LevelReport {
    pub fn mesh_ok(&self) -> bool {
        self.mesh < self.mesh_bound
    }

    pub fn variance_ok(&self) -> bool {
        self.max_variance.mean < self.variance_bound
    }
}

#[derive(Clone, Debug, Serialize)]
pub struct SystemReport {
    pub levels: Vec<LevelReport>,
    /// Both the empirical maxima and the bounds decrease strictly in `n`.
    pub variance_decreasing: bool,
}

impl SystemReport {
    pub fn all_exact_ok(&self) -> bool {
        self.levels
            .iter()
            .all(|l| l.disjoint && l.covers && l.nested && l.single_mark && l.mesh_ok())
    }
}

fn pairwise_disjoint(cells: &[Cell]) -> bool {
    (0..cells.len()).all(|i| (i + 1..cells.len()).all(|j| !cells[i].overlaps(&cells[j])))
}

fn covers(cells: &[Cell], n_steps: usize, n_marks: usize) -> bool {
    let mut hits = vec![0u32; n_steps * n_marks];
    for c in cells {
        for k in c.start..c.end {
            for &z in &c.marks {
                hits[k * n_marks + z] += 1;
            }
        }
    }
    hits.iter().all(|h| *h == 1)
}

/// Checks the partition conditions against an ensemble. Set relations are
/// exact; the variance bound is `T 2^(1-n) * max_{k,z} E[lambda_{t_k}(z)]`,
/// so that `V(Delta) = E[Lambda(Delta)]` sits at about half the bound.
pub fn verify_system(system: &DissectingSystem, ensemble: &PathEnsemble) -> Result<SystemReport> {
    if ensemble.grid() != system.grid() || ensemble.n_marks() != system.n_marks() {
        return Err(Error::Misaligned(
            "dissecting system and ensemble use different grids".into(),
        ));
    }
    let n_paths = ensemble.n_paths();
    let max_rate = (0..ensemble.n_steps())
        .flat_map(|k| (0..ensemble.n_marks()).map(move |z| (k, z)))
        .map(|(k, z)| Summary::from_fn(n_paths, |p| ensemble.intensity(p, k, z)).mean)
        .fold(0.0, f64::max);

    let mut levels = Vec::new();
    for (n, level) in system.levels().iter().enumerate() {
        for c in &level.cells {
            ensemble.check_cell(c)?;
        }
        let variances: Vec<Summary> = level
            .cells
            .par_iter()
            .map(|c| {
                Summary::from_fn(n_paths, |p| {
                    let v = ensemble.cell_noise(p, c);
                    v * v
                })
            })
            .collect();
        let max_variance = variances
            .iter()
            .copied()
            .fold(None, |acc: Option<Summary>, s| match acc {
                Some(a) if a.mean >= s.mean => Some(a),
                _ => Some(s),
            })
            .expect("levels are non-empty");
        let nested = n == 0
            || level.cells.iter().zip(&level.parents).all(|(c, &pi)| {
                let up = &system.levels()[n - 1].cells;
                up[pi].contains(c) && up.iter().enumerate().all(|(j, other)| j == pi || !other.overlaps(c))
            });
        levels.push(LevelReport {
            level: n,
            n_cells: level.cells.len(),
            mesh: system.mesh(n),
            mesh_bound: system.mesh_bound(n),
            max_variance,
            variance_bound: system.mesh_bound(n) * max_rate,
            disjoint: pairwise_disjoint(&level.cells),
            covers: covers(&level.cells, ensemble.n_steps(), ensemble.n_marks()),
            nested,
            single_mark: level.cells.iter().all(|c| c.marks.len() == 1),
        });
    }
    let variance_decreasing = levels
        .windows(2)
        .all(|w| w[1].max_variance.mean < w[0].max_variance.mean && w[1].variance_bound < w[0].variance_bound);
    Ok(SystemReport {
        levels,
        variance_decreasing,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn level_sizes_and_widths() {
        let g = TimeGrid::new(1.0, 64).unwrap();
        let m = MarkSpace::numbered(2).unwrap();
        let s = build_dissecting_system(&g, &m, 3).unwrap();
        let l3 = s.level(3).unwrap();
        assert_eq!(l3.cells.len(), 16);
        assert!(l3.cells.iter().all(|c| c.steps() == 8));
        assert_eq!(s.mesh(3), 0.125);
        assert_eq!(s.level(0).unwrap().cells.len(), 2);
        assert!(s.level(4).is_err());
    }

    #[test]
    fn non_dyadic_grid_rejected() {
        let g = TimeGrid::new(1.0, 12).unwrap();
        let m = MarkSpace::singleton();
        assert!(build_dissecting_system(&g, &m, 2).is_ok());
        assert!(matches!(
            build_dissecting_system(&g, &m, 3),
            Err(Error::GridNotDyadic { steps: 12, level: 3 })
        ));
    }

    #[test]
    fn parents_contain_children() {
        let g = TimeGrid::new(1.0, 16).unwrap();
        let m = MarkSpace::numbered(3).unwrap();
        let s = build_dissecting_system(&g, &m, 4).unwrap();
        for n in 1..=4 {
            let (up, here) = (&s.levels()[n - 1], &s.levels()[n]);
            for (c, &p) in here.cells.iter().zip(&here.parents) {
                assert!(up.cells[p].contains(c));
            }
        }
        assert!(covers(&s.levels()[4].cells, 16, 3));
        assert!(pairwise_disjoint(&s.levels()[4].cells));
    }

    #[test]
    fn dump_lists_every_cell() {
        let g = TimeGrid::new(1.0, 4).unwrap();
        let m = MarkSpace::numbered(2).unwrap();
        let s = build_dissecting_system(&g, &m, 2).unwrap();
        let text = s.dump(&m);
        assert_eq!(text.lines().count(), 1 + 2 + 4 + 8);
        assert!(text.contains("2\t7\t0.75\t1\t2"));
    }
}

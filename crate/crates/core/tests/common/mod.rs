//! Independent oracles shared by the integration tests.

#![allow(dead_code)]

use jumpsmp::noise::{MarkSpace, NoiseModel, PathEnsemble, TimeGrid};

/// Plain mean and standard error, written independently of the crate's
/// ordered reductions.
pub fn mean_se(values: &[f64]) -> (f64, f64) {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
    (mean, (var / n).sqrt())
}

/// Every path of a symmetric binomial walk with steps `+-sqrt(dt)`, as an
/// ensemble with unit intensity. Path `p` takes an up-step at `k` when bit
/// `k` of `p` is set.
pub fn binomial_tree(horizon: f64, steps: usize) -> PathEnsemble {
    let grid = TimeGrid::new(horizon, steps).unwrap();
    let s = grid.dt().sqrt();
    let n = 1usize << steps;
    let mut inc = Vec::with_capacity(n * steps);
    for p in 0..n {
        for k in 0..steps {
            inc.push(if p >> k & 1 == 1 { s } else { -s });
        }
    }
    let intensity = vec![1.0; inc.len()];
    PathEnsemble::from_parts(
        NoiseModel::External {
            label: "binomial tree".into(),
        },
        grid,
        MarkSpace::singleton(),
        0,
        inc,
        intensity,
        None,
    )
    .unwrap()
}

/// Exact `E[xi mu(cell) / Lambda(cell) | path prefix up to start]` on an
/// equally weighted tree, by averaging over the subtree of each prefix.
pub fn tree_conditional(tree: &PathEnsemble, xi: &[f64], start: usize, end: usize) -> Vec<f64> {
    let n = tree.n_paths();
    let dt = tree.grid().dt();
    let lambda = (end - start) as f64 * dt;
    let mask = (1usize << start) - 1;
    let mut sums = std::collections::HashMap::<usize, (f64, usize)>::new();
    for (p, x) in xi.iter().enumerate().take(n) {
        let mu = tree.running_noise(p, end, 0) - tree.running_noise(p, start, 0);
        let e = sums.entry(p & mask).or_insert((0.0, 0));
        e.0 += x * mu / lambda;
        e.1 += 1;
    }
    (0..n)
        .map(|p| {
            let (s, c) = sums[&(p & mask)];
            s / c as f64
        })
        .collect()
}

fn poisson_pmf(mean: f64, max: usize) -> Vec<f64> {
    let mut out = Vec::with_capacity(max + 1);
    let mut p = (-mean).exp();
    for k in 0..=max {
        out.push(p);
        p *= mean / (k + 1) as f64;
    }
    out
}

/// `E[(h + N1 + N2)^2 (N1 - a) / a]` with `N1 ~ Poisson(a)`,
/// `N2 ~ Poisson(b)`, counts truncated at `max`.
pub fn poisson_count_square_oracle(h: f64, a: f64, b: f64, max: usize) -> f64 {
    let p1 = poisson_pmf(a, max);
    let p2 = poisson_pmf(b, max);
    let mut acc = 0.0;
    for (n1, q1) in p1.iter().enumerate() {
        for (n2, q2) in p2.iter().enumerate() {
            let xi = (h + n1 as f64 + n2 as f64).powi(2);
            acc += q1 * q2 * xi * (n1 as f64 - a) / a;
        }
    }
    acc
}

/// Relative L2 distance `|a - b| / |b|`.
pub fn rel_l2(a: &[f64], b: &[f64]) -> f64 {
    let num: f64 = a.iter().zip(b).map(|(x, y)| (x - y).powi(2)).sum();
    let den: f64 = b.iter().map(|y| y * y).sum();
    (num / den).sqrt()
}

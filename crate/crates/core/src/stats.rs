//! Monte Carlo summaries with reductions whose result does not depend on the
//! number of worker threads.

use rayon::prelude::*;

/// Reduction block size. Partial sums are formed per block and combined in
/// block order, so results are identical for every thread count.
pub const BLOCK: usize = 2048;

pub fn ordered_sum<F>(n: usize, f: F) -> f64
where
    F: Fn(usize) -> f64 + Sync,
{
    let n_blocks = n.div_ceil(BLOCK);
    let partials: Vec<f64> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let lo = b * BLOCK;
            let hi = (lo + BLOCK).min(n);
            let mut acc = 0.0;
            for i in lo..hi {
                acc += f(i);
            }
            acc
        })
        .collect();
    partials.iter().sum()
}

/// Mean, sample variance and standard error of the mean.
#[derive(Clone, Copy, Debug, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct Summary {
    pub n: usize,
    pub mean: f64,
    pub variance: f64,
    pub std_error: f64,
}

impl Summary {
    pub fn of(values: &[f64]) -> Self {
        Self::from_fn(values.len(), |i| values[i])
    }

    pub fn from_fn<F>(n: usize, f: F) -> Self
    where
        F: Fn(usize) -> f64 + Sync,
    {
        if n == 0 {
            return Self {
                n,
                mean: f64::NAN,
                variance: f64::NAN,
                std_error: f64::NAN,
            };
        }
        let origin = f(0);
        let mean = origin + ordered_sum(n, |i| f(i) - origin) / n as f64;
        let variance = if n > 1 {
            ordered_sum(n, |i| {
                let d = f(i) - mean;
                d * d
            }) / (n - 1) as f64
        } else {
            0.0
        };
        Self {
            n,
            mean,
            variance,
            std_error: (variance / n as f64).sqrt(),
        }
    }

    /// `mean / std_error`; zero when both vanish.
    pub fn z_score(&self) -> f64 {
        z_score(self.mean, self.std_error)
    }
}

pub fn z_score(value: f64, std_error: f64) -> f64 {
    if std_error > 0.0 {
        value / std_error
    } else if value == 0.0 {
        0.0
    } else {
        value.signum() * f64::INFINITY
    }
}

/// Least-squares slope of `ys` against `xs`.
pub fn slope(xs: &[f64], ys: &[f64]) -> f64 {
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let sxy: f64 = xs.iter().zip(ys).map(|(x, y)| (x - mx) * (y - my)).sum();
    let sxx: f64 = xs.iter().map(|x| (x - mx) * (x - mx)).sum();
    sxy / sxx
}

//! The classical Ornstein-Uhlenbeck disturbance `dq = -u q dt - v dw`.

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::OuParams;
use crate::parallel::{map_indexed, Parallelism};
use crate::rng::{wiener_increments, StreamKind, StreamSeed};

#[derive(Debug, Clone, PartialEq)]
pub struct OuPath {
    pub t: Vec<f64>,
    pub q: Vec<f64>,
    pub seed: StreamSeed,
}

/// Pointwise ensemble mean and unbiased variance.
#[derive(Debug, Clone, PartialEq)]
pub struct EnsembleStats {
    pub t: Vec<f64>,
    pub mean: Vec<f64>,
    pub var: Vec<f64>,
    pub n: usize,
}

impl EnsembleStats {
    /// Standard error of the mean at grid index `k`.
    pub fn std_error(&self, k: usize) -> f64 {
        (self.var[k] / self.n as f64).sqrt()
    }
}

/// Welford accumulator over equally sized series, folded in a fixed order.
#[derive(Debug, Clone)]
pub struct SeriesAccumulator {
    n: usize,
    mean: Vec<f64>,
    m2: Vec<f64>,
}

impl SeriesAccumulator {
    pub fn new(len: usize) -> Self {
        Self {
            n: 0,
            mean: vec![0.0; len],
            m2: vec![0.0; len],
        }
    }

    pub fn push(&mut self, series: &[f64]) {
        debug_assert_eq!(series.len(), self.mean.len());
        self.n += 1;
        let n = self.n as f64;
        for ((m, s), &x) in self.mean.iter_mut().zip(self.m2.iter_mut()).zip(series) {
            let delta = x - *m;
            *m += delta / n;
            *s += delta * (x - *m);
        }
    }

    pub fn count(&self) -> usize {
        self.n
    }

    pub fn mean(&self) -> &[f64] {
        &self.mean
    }

    /// Unbiased variance; zero when fewer than two series were pushed.
    pub fn variance(&self) -> Vec<f64> {
        if self.n < 2 {
            return vec![0.0; self.m2.len()];
        }
        let d = (self.n - 1) as f64;
        self.m2.iter().map(|s| (s / d).max(0.0)).collect()
    }
}

/// Euler-Maruyama recursion driven by the given Wiener increments.
pub fn simulate_ou_with_increments(p: &OuParams, dt: f64, increments: &[f64]) -> Vec<f64> {
    let mut q = Vec::with_capacity(increments.len() + 1);
    let mut x = p.q0;
    q.push(x);
    for dw in increments {
        x = x - p.u * x * dt - p.v * dw;
        q.push(x);
    }
    q
}

pub fn simulate_ou(p: &OuParams, dt: f64, t_final: f64, seed: impl Into<StreamSeed>) -> Result<OuPath> {
    let grid = TimeGrid::new(dt, t_final)?;
    let seed = seed.into();
    let dw = wiener_increments(seed, grid.dt(), grid.steps());
    Ok(OuPath {
        t: grid.times(),
        q: simulate_ou_with_increments(p, grid.dt(), &dw),
        seed,
    })
}

/// Samples the exact Gaussian transition on the same grid. Used as an
/// oracle for the Euler path statistics.
pub fn simulate_ou_exact(p: &OuParams, dt: f64, t_final: f64, seed: impl Into<StreamSeed>) -> Result<OuPath> {
    let grid = TimeGrid::new(dt, t_final)?;
    let seed = seed.into();
    // unit-variance normals, rescaled below
    let z = wiener_increments(seed, 1.0, grid.steps());
    let decay = (-p.u * grid.dt()).exp();
    let sd = p.v.abs() * ((1.0 - decay * decay) / (2.0 * p.u)).sqrt();
    let mut q = Vec::with_capacity(grid.len());
    let mut x = p.q0;
    q.push(x);
    for zk in z {
        x = x * decay - sd * zk;
        q.push(x);
    }
    Ok(OuPath {
        t: grid.times(),
        q,
        seed,
    })
}

/// `n` Euler paths, path `i` seeded with stream `(base_seed, i)`.
pub fn simulate_ensemble(
    p: &OuParams,
    dt: f64,
    t_final: f64,
    base_seed: u64,
    n: usize,
    par: Parallelism,
) -> Result<Vec<OuPath>> {
    TimeGrid::new(dt, t_final)?;
    map_indexed(0, n, par, |i| {
        simulate_ou(
            p,
            dt,
            t_final,
            StreamSeed::for_trajectory(base_seed, StreamKind::ClassicalPath, i),
        )
    })
    .into_iter()
    .collect()
}

pub fn ensemble_stats(paths: &[OuPath]) -> Result<EnsembleStats> {
    let first = paths.first().ok_or(Error::EmptyEnsemble)?;
    let mut acc = SeriesAccumulator::new(first.q.len());
    for (index, path) in paths.iter().enumerate() {
        if path.t != first.t || path.q.len() != first.q.len() {
            return Err(Error::GridMismatch { index });
        }
        acc.push(&path.q);
    }
    Ok(EnsembleStats {
        t: first.t.clone(),
        var: acc.variance(),
        mean: acc.mean().to_vec(),
        n: acc.count(),
    })
}

/// Exact mean `q0 e^{-ut}` and variance `v^2 (1 - e^{-2ut}) / (2u)`.
pub fn ou_analytic_moments(p: &OuParams, t: f64) -> (f64, f64) {
    let mean = p.q0 * (-p.u * t).exp();
    let var = p.v * p.v * (1.0 - (-2.0 * p.u * t).exp()) / (2.0 * p.u);
    (mean, var)
}

use crate::error::{Error, Result};

/// Uniform grid `t_k = k dt`, `k = 0..=steps`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    dt: f64,
    steps: usize,
}

impl TimeGrid {
    /// `steps = floor(t_final / dt)`, tolerant of the usual representation
    /// error in the ratio.
    pub fn new(dt: f64, t_final: f64) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
        }
        if !(t_final >= dt) || !t_final.is_finite() {
            return Err(Error::invalid(
                "t_final",
                format!("must be >= dt ({dt}), got {t_final}"),
            ));
        }
        let steps = (t_final / dt + 1e-9).floor() as usize;
        Ok(Self { dt, steps })
    }

    pub fn from_steps(dt: f64, steps: usize) -> Result<Self> {
        if !(dt > 0.0) || !dt.is_finite() {
            return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
        }
        if steps == 0 {
            return Err(Error::invalid("t_final", "grid needs at least one step"));
        }
        Ok(Self { dt, steps })
    }

    pub fn dt(&self) -> f64 {
        self.dt
    }

    pub fn steps(&self) -> usize {
        self.steps
    }

    /// Number of grid points, `steps + 1`.
    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn time(&self, k: usize) -> f64 {
        k as f64 * self.dt
    }

    pub fn times(&self) -> Vec<f64> {
        (0..self.len()).map(|k| self.time(k)).collect()
    }

    pub fn t_final(&self) -> f64 {
        self.time(self.steps)
    }

    /// Index of the grid point nearest `t`, clamped to the grid.
    pub fn index_of(&self, t: f64) -> usize {
        ((t / self.dt).round().max(0.0) as usize).min(self.steps)
    }
}

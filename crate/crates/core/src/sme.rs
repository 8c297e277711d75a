//! Stochastic master equation: homodyne unraveling of the combined system
//! and the exact conditional-state filter driven by a measurement record.
//!
//! Dissipation acts through every coupling channel; the innovation enters
//! only through channel 0, the homodyne-monitored output.
//!
//! Two integrators are provided. [`SmeScheme::Kraus`] (the default) writes
//! the step as a completely positive map,
//!
//! ```text
//! M   = I + (-iH - 1/2 sum_j L_j^dag L_j) dt + L_0 dy
//! rho' = M rho M^dag + sum_{j>0} L_j rho L_j^dag dt
//! ```
//!
//! which agrees with the Ito SME to first order and keeps `rho` positive
//! semidefinite. [`SmeScheme::Euler`] is the literal Euler-Maruyama step of
//! the SME. Both renormalize the trace and re-Hermitize after every step.

use nalgebra::SymmetricEigen;

use crate::error::{Error, Result};
use crate::grid::TimeGrid;
use crate::model::{CombinedModel, OpenSystem, Readout};
use crate::operators::{c, max_abs_diff, CMatrix, SpaceLayout};
use crate::rng::{wiener_increments, StreamSeed};

/// Smallest eigenvalue tolerated before a step is reported as unstable.
pub const INSTABILITY_EIGENVALUE: f64 = -1e-6;

/// Density matrix of the full system.
#[derive(Debug, Clone, PartialEq)]
pub struct DensityState {
    rho: CMatrix,
}

/// Invariant diagnostics for a density matrix.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct StateHealth {
    pub trace_error: f64,
    pub hermiticity_error: f64,
    pub min_eigenvalue: f64,
    pub purity: f64,
}

impl DensityState {
    /// Validates unit trace (1e-8), Hermiticity (1e-10) and a minimum
    /// eigenvalue of at least -1e-8.
    pub fn new(rho: CMatrix) -> Result<Self> {
        if rho.nrows() != rho.ncols() || rho.nrows() == 0 {
            return Err(Error::Dimension(format!(
                "density matrix must be square and non-empty, got {}x{}",
                rho.nrows(),
                rho.ncols()
            )));
        }
        let state = Self { rho };
        let h = state.health();
        if h.trace_error >= 1e-8 || h.hermiticity_error >= 1e-10 || h.min_eigenvalue < -1e-8 {
            return Err(Error::invalid(
                "rho",
                format!("not a valid density matrix: {h:?}"),
            ));
        }
        Ok(state)
    }

    /// `|k><k|` in a `dim`-dimensional space.
    pub fn pure_basis(dim: usize, k: usize) -> Result<Self> {
        if k >= dim {
            return Err(Error::Dimension(format!(
                "basis index {k} out of range for {dim}"
            )));
        }
        let mut rho = CMatrix::zeros(dim, dim);
        rho[(k, k)] = c(1.0);
        Ok(Self { rho })
    }

    /// `(|0> + |1>)(<0| + <1|) / 2` on `dim` levels; `(I + sigma_x)/2` when `dim = 2`.
    pub fn plus(dim: usize) -> Result<Self> {
        if dim < 2 {
            return Err(Error::Dimension("plus state needs at least 2 levels".into()));
        }
        let mut rho = CMatrix::zeros(dim, dim);
        for i in 0..2 {
            for j in 0..2 {
                rho[(i, j)] = c(0.5);
            }
        }
        Ok(Self { rho })
    }

    /// Tensor product in slot order.
    pub fn product(factors: &[DensityState]) -> Result<Self> {
        let first = factors
            .first()
            .ok_or_else(|| Error::Dimension("empty product".into()))?;
        let rho = factors[1..]
            .iter()
            .fold(first.rho.clone(), |acc, f| acc.kronecker(&f.rho));
        Ok(Self { rho })
    }

    /// The plus state in every slot of `layout`.
    pub fn plus_product(layout: &SpaceLayout) -> Result<Self> {
        let factors = layout
            .dims()
            .iter()
            .map(|&d| Self::plus(d))
            .collect::<Result<Vec<_>>>()?;
        Self::product(&factors)
    }

    pub fn dim(&self) -> usize {
        self.rho.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.rho
    }

    pub fn into_matrix(self) -> CMatrix {
        self.rho
    }

    pub fn purity(&self) -> f64 {
        crate::operators::trace_of_product(&self.rho, &self.rho).re
    }

    pub fn min_eigenvalue(&self) -> f64 {
        let herm = hermitian_part(&self.rho);
        SymmetricEigen::new(herm)
            .eigenvalues
            .iter()
            .copied()
            .fold(f64::INFINITY, f64::min)
    }

    pub fn health(&self) -> StateHealth {
        StateHealth {
            trace_error: (self.rho.trace() - c(1.0)).norm(),
            hermiticity_error: max_abs_diff(&self.rho, &self.rho.adjoint()),
            min_eigenvalue: self.min_eigenvalue(),
            purity: self.purity(),
        }
    }
}

fn hermitian_part(m: &CMatrix) -> CMatrix {
    (m + m.adjoint()) * c(0.5)
}

/// Homodyne increments on a uniform grid.
#[derive(Debug, Clone, PartialEq)]
pub struct MeasurementRecord {
    pub t: Vec<f64>,
    pub dy: Vec<f64>,
    pub seed: Option<StreamSeed>,
}

impl MeasurementRecord {
    pub fn new(grid: TimeGrid, dy: Vec<f64>, seed: Option<StreamSeed>) -> Result<Self> {
        if dy.len() != grid.steps() {
            return Err(Error::Dimension(format!(
                "record has {} increments for a {}-step grid",
                dy.len(),
                grid.steps()
            )));
        }
        Ok(Self {
            t: grid.times(),
            dy,
            seed,
        })
    }

    /// Recovers the grid, rejecting non-uniform spacing.
    pub fn grid(&self) -> Result<TimeGrid> {
        if self.t.len() != self.dy.len() + 1 || self.t.len() < 2 {
            return Err(Error::Dimension(format!(
                "record has {} times for {} increments",
                self.t.len(),
                self.dy.len()
            )));
        }
        let dt = self.t[1] - self.t[0];
        let uniform = self.t[0] == 0.0
            && self
                .t
                .iter()
                .enumerate()
                .all(|(k, &t)| (t - k as f64 * dt).abs() < 1e-9);
        if !uniform {
            return Err(Error::invalid("record", "time grid is not uniform from t = 0"));
        }
        TimeGrid::from_steps(dt, self.dy.len())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SmeTrajectory {
    pub record: MeasurementRecord,
    pub states: Vec<DensityState>,
    /// `Tr(rho Q2) / alpha`.
    pub q_hat: Vec<f64>,
    /// `(Q1, P1, Q2, P2)` expectations.
    pub quad_hat: Vec<[f64; 4]>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum SmeScheme {
    #[default]
    Kraus,
    Euler,
}

fn advance(
    rho: &CMatrix,
    dy: f64,
    dt: f64,
    sys: &OpenSystem,
    scheme: SmeScheme,
) -> std::result::Result<CMatrix, String> {
    let l0 = sys.measured().matrix();
    let l0_dag = sys.coupling_dag(0);
    let next = match scheme {
        SmeScheme::Kraus => {
            let dim = rho.nrows();
            let m = CMatrix::identity(dim, dim) + sys.effective_generator() * c(dt) + l0 * c(dy);
            let mut out = &m * rho * m.adjoint();
            for (j, l) in sys.couplings().iter().enumerate().skip(1) {
                out += l.matrix() * rho * sys.coupling_dag(j) * c(dt);
            }
            out
        }
        SmeScheme::Euler => {
            let mean = sys.measurement_mean(rho);
            let innovation = dy - mean * dt;
            let kick = l0 * rho + rho * l0_dag - rho * c(mean);
            rho + sys.lindblad_drift(rho) * c(dt) + kick * c(innovation)
        }
    };
    if next.iter().any(|z| !z.re.is_finite() || !z.im.is_finite()) {
        return Err("state has non-finite entries".into());
    }
    let mut next = hermitian_part(&next);
    let tr = next.trace().re;
    if !(tr > 0.0) {
        return Err(format!("trace collapsed to {tr:e}"));
    }
    next /= c(tr);
    let min_eig = SymmetricEigen::new(next.clone())
        .eigenvalues
        .iter()
        .copied()
        .fold(f64::INFINITY, f64::min);
    if min_eig < INSTABILITY_EIGENVALUE {
        return Err(format!("state lost positivity (min eigenvalue {min_eig:e})"));
    }
    Ok(next)
}

/// One filter step with the default [`SmeScheme::Kraus`] integrator.
pub fn sme_step(rho: &DensityState, dy: f64, dt: f64, system: &OpenSystem) -> Result<DensityState> {
    sme_step_with(rho, dy, dt, system, SmeScheme::default())
}

pub fn sme_step_with(
    rho: &DensityState,
    dy: f64,
    dt: f64,
    system: &OpenSystem,
    scheme: SmeScheme,
) -> Result<DensityState> {
    check_inputs(rho, system)?;
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
    }
    advance(rho.matrix(), dy, dt, system, scheme)
        .map(|rho| DensityState { rho })
        .map_err(|reason| Error::NumericalInstability { step: 0, reason })
}

fn check_inputs(rho: &DensityState, system: &OpenSystem) -> Result<()> {
    if rho.dim() != system.dim() {
        return Err(Error::Dimension(format!(
            "state has dimension {} but the system has {}",
            rho.dim(),
            system.dim()
        )));
    }
    Ok(())
}

/// Unravels a trajectory of the true system: at each step draws
/// `dW ~ N(0, dt)`, emits `dy = Tr[(L0 + L0^dag) rho] dt + dW` and advances
/// the state. `observe(k, rho_k)` sees every grid point, including `k = 0`.
pub fn unravel<F>(
    system: &OpenSystem,
    rho0: &DensityState,
    grid: TimeGrid,
    seed: StreamSeed,
    scheme: SmeScheme,
    mut observe: F,
) -> Result<MeasurementRecord>
where
    F: FnMut(usize, &DensityState),
{
    check_inputs(rho0, system)?;
    let dt = grid.dt();
    let noise = wiener_increments(seed, dt, grid.steps());
    let mut dy = Vec::with_capacity(grid.steps());
    let mut state = rho0.clone();
    observe(0, &state);
    for (k, dw) in noise.into_iter().enumerate() {
        let inc = system.measurement_mean(state.matrix()) * dt + dw;
        state.rho = advance(state.matrix(), inc, dt, system, scheme)
            .map_err(|reason| Error::NumericalInstability { step: k, reason })?;
        dy.push(inc);
        observe(k + 1, &state);
    }
    MeasurementRecord::new(grid, dy, Some(seed))
}

/// Runs the filter along an existing record. `observe` sees every grid point.
pub fn filter_with<F>(
    system: &OpenSystem,
    rho0: &DensityState,
    record: &MeasurementRecord,
    scheme: SmeScheme,
    mut observe: F,
) -> Result<()>
where
    F: FnMut(usize, &DensityState),
{
    check_inputs(rho0, system)?;
    let dt = record.grid()?.dt();
    let mut state = rho0.clone();
    observe(0, &state);
    for (k, &inc) in record.dy.iter().enumerate() {
        state.rho = advance(state.matrix(), inc, dt, system, scheme)
            .map_err(|reason| Error::NumericalInstability { step: k, reason })?;
        observe(k + 1, &state);
    }
    Ok(())
}

struct Collector<'a> {
    readout: &'a Readout,
    states: Vec<DensityState>,
    q_hat: Vec<f64>,
    quad_hat: Vec<[f64; 4]>,
}

impl<'a> Collector<'a> {
    fn new(readout: &'a Readout, len: usize) -> Self {
        Self {
            readout,
            states: Vec::with_capacity(len),
            q_hat: Vec::with_capacity(len),
            quad_hat: Vec::with_capacity(len),
        }
    }

    fn push(&mut self, rho: &DensityState) {
        self.q_hat.push(self.readout.q_hat(rho.matrix()));
        self.quad_hat.push(self.readout.quadrature_means(rho.matrix()));
        self.states.push(rho.clone());
    }

    fn finish(self, record: MeasurementRecord) -> SmeTrajectory {
        SmeTrajectory {
            record,
            states: self.states,
            q_hat: self.q_hat,
            quad_hat: self.quad_hat,
        }
    }
}

/// [`unravel`] on an arbitrary system, collecting every state.
pub fn simulate_truth_on(
    system: &OpenSystem,
    readout: &Readout,
    rho0: &DensityState,
    grid: TimeGrid,
    seed: StreamSeed,
    scheme: SmeScheme,
) -> Result<SmeTrajectory> {
    let mut col = Collector::new(readout, grid.len());
    let record = unravel(system, rho0, grid, seed, scheme, |_, rho| col.push(rho))?;
    Ok(col.finish(record))
}

pub fn simulate_truth(
    model: &CombinedModel,
    rho0: &DensityState,
    dt: f64,
    t_final: f64,
    seed: impl Into<StreamSeed>,
) -> Result<SmeTrajectory> {
    simulate_truth_on(
        model.system(),
        model.readout(),
        rho0,
        TimeGrid::new(dt, t_final)?,
        seed.into(),
        SmeScheme::default(),
    )
}

/// [`filter_with`] on an arbitrary system, collecting every state.
pub fn filter_record_on(
    system: &OpenSystem,
    readout: &Readout,
    rho0: &DensityState,
    record: &MeasurementRecord,
    scheme: SmeScheme,
) -> Result<SmeTrajectory> {
    let mut col = Collector::new(readout, record.t.len());
    filter_with(system, rho0, record, scheme, |_, rho| col.push(rho))?;
    Ok(col.finish(record.clone()))
}

pub fn filter_record(
    model: &CombinedModel,
    rho0: &DensityState,
    record: &MeasurementRecord,
) -> Result<SmeTrajectory> {
    filter_record_on(
        model.system(),
        model.readout(),
        rho0,
        record,
        SmeScheme::default(),
    )
}

//! Quantum extended Kalman filter on a commutative projection of the
//! quadratures.
//!
//! The filter core ([`riccati_step`], [`kalman_gain`], [`qekf_step`]) is
//! generic over an [`EkfModel`] with `N` states and one homodyne channel.
//! [`TwoCavityEkf`] is the instance for the two-cavity model with state
//! `x = (Q1, P1, Q2, P2)`:
//!
//! ```text
//! dx_hat = [f(x_hat) - K h(x_hat)] dt + K dy,    K = (P H^T + S) R^-1
//! dP/dt  = F P + P F^T + Q - (P H^T + S) R^-1 (P H^T + S)^T
//! ```

use nalgebra::{DMatrix, Matrix4, SMatrix, SVector, SymmetricEigen, Vector4};

use crate::error::{Error, Result};
use crate::model::{CombinedModel, Quadrature};
use crate::sme::MeasurementRecord;

/// Smallest covariance eigenvalue tolerated by [`riccati_step`].
pub const INSTABILITY_EIGENVALUE: f64 = -1e-6;

/// Covariances of process and measurement noise for a single channel.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct NoiseSpec<const N: usize> {
    /// Process covariance.
    pub q: SMatrix<f64, N, N>,
    /// Measurement covariance.
    pub r: f64,
    /// Process/measurement cross-correlation.
    pub s: SVector<f64, N>,
}

/// Drift, measurement map, their Jacobians and the noise covariances.
pub trait EkfModel<const N: usize> {
    fn drift(&self, x: &SVector<f64, N>) -> SVector<f64, N>;
    fn drift_jacobian(&self, x: &SVector<f64, N>) -> SMatrix<f64, N, N>;
    fn measurement(&self, x: &SVector<f64, N>) -> f64;
    fn measurement_jacobian(&self, x: &SVector<f64, N>) -> SMatrix<f64, 1, N>;
    fn noise(&self) -> NoiseSpec<N>;
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EkfState<const N: usize> {
    pub x_hat: SVector<f64, N>,
    pub p: SMatrix<f64, N, N>,
}

impl<const N: usize> EkfState<N> {
    /// Requires `p` symmetric to 1e-10 with eigenvalues >= -1e-8.
    pub fn new(x_hat: SVector<f64, N>, p: SMatrix<f64, N, N>) -> Result<Self> {
        let asym = (p - p.transpose()).amax();
        if asym >= 1e-10 {
            return Err(Error::invalid(
                "P",
                format!("covariance not symmetric ({asym:e})"),
            ));
        }
        let min_eig = min_eigenvalue(&p);
        if min_eig < -1e-8 {
            return Err(Error::invalid(
                "P",
                format!("covariance not PSD (min eigenvalue {min_eig:e})"),
            ));
        }
        Ok(Self { x_hat, p })
    }

    pub fn min_eigenvalue(&self) -> f64 {
        min_eigenvalue(&self.p)
    }
}

fn min_eigenvalue<const N: usize>(p: &SMatrix<f64, N, N>) -> f64 {
    let sym = (p + p.transpose()) * 0.5;
    let dynamic = DMatrix::from_iterator(N, N, sym.iter().copied());
    SymmetricEigen::new(dynamic).eigenvalues.min()
}

/// Riccati right-hand side integrated by one Euler step, then symmetrized.
pub fn riccati_step<const N: usize>(
    state: &EkfState<N>,
    fns: &impl EkfModel<N>,
    dt: f64,
) -> Result<SMatrix<f64, N, N>> {
    if !(dt > 0.0) {
        return Err(Error::invalid("dt", format!("must be > 0, got {dt}")));
    }
    let f = fns.drift_jacobian(&state.x_hat);
    let h = fns.measurement_jacobian(&state.x_hat);
    let noise = fns.noise();
    let p = &state.p;
    let cross = p * h.transpose() + noise.s;
    let rate = f * p + p * f.transpose() + noise.q - cross * cross.transpose() / noise.r;
    let next = p + rate * dt;
    let next = (next + next.transpose()) * 0.5;
    if next.iter().any(|v| !v.is_finite()) {
        return Err(Error::NumericalInstability {
            step: 0,
            reason: "covariance has non-finite entries".into(),
        });
    }
    let min_eig = min_eigenvalue(&next);
    if min_eig < INSTABILITY_EIGENVALUE {
        return Err(Error::NumericalInstability {
            step: 0,
            reason: format!("covariance lost positivity (min eigenvalue {min_eig:e})"),
        });
    }
    Ok(next)
}

/// `K = (P H^T + S) R^-1`.
pub fn kalman_gain<const N: usize>(state: &EkfState<N>, fns: &impl EkfModel<N>) -> SVector<f64, N> {
    let h = fns.measurement_jacobian(&state.x_hat);
    let noise = fns.noise();
    (state.p * h.transpose() + noise.s) / noise.r
}

pub fn qekf_step<const N: usize>(
    state: &EkfState<N>,
    dy: f64,
    dt: f64,
    fns: &impl EkfModel<N>,
) -> Result<EkfState<N>> {
    let gain = kalman_gain(state, fns);
    let x = &state.x_hat;
    let x_hat = x + (fns.drift(x) - gain * fns.measurement(x)) * dt + gain * dy;
    let p = riccati_step(state, fns, dt)?;
    Ok(EkfState { x_hat, p })
}

/// Runs the filter along `record`; `observe(k, state_k)` sees every grid
/// point. Returns the final state.
pub fn filter_with<const N: usize, F>(
    fns: &impl EkfModel<N>,
    initial: EkfState<N>,
    record: &MeasurementRecord,
    mut observe: F,
) -> Result<EkfState<N>>
where
    F: FnMut(usize, &EkfState<N>),
{
    let dt = record.grid()?.dt();
    let mut state = initial;
    observe(0, &state);
    for (k, &dy) in record.dy.iter().enumerate() {
        state = qekf_step(&state, dy, dt, fns).map_err(|e| match e {
            Error::NumericalInstability { reason, .. } => Error::NumericalInstability { step: k, reason },
            other => other,
        })?;
        observe(k + 1, &state);
    }
    Ok(state)
}

/// The two-cavity instance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TwoCavityEkf {
    k1: f64,
    k2: f64,
    alpha: f64,
    noise: NoiseSpec<4>,
}

impl TwoCavityEkf {
    pub fn new(model: &CombinedModel) -> Self {
        Self {
            k1: model.k1(),
            k2: model.k2(),
            alpha: model.alpha(),
            noise: noise_matrices(model),
        }
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// `q_hat = x_hat[Q2] / alpha`.
    pub fn q_hat(&self, x: &Vector4<f64>) -> f64 {
        x[Quadrature::Q2.index()] / self.alpha
    }

    fn f(&self, x: &Vector4<f64>) -> Vector4<f64> {
        let (k1, k2, a) = (self.k1, self.k2, self.alpha);
        Vector4::new(
            -0.5 * k1 * x[0] + x[1] * x[2] / a,
            -0.5 * k1 * x[1] - x[0] * x[2] / a,
            -0.5 * k2 * x[2],
            -0.5 * k2 * x[3] - x[0] * x[0] / (2.0 * a) - x[1] * x[1] / (2.0 * a) - 1.0 / (4.0 * a),
        )
    }

    #[rustfmt::skip]
    fn jac(&self, x: &Vector4<f64>) -> Matrix4<f64> {
        let (k1, k2, a) = (self.k1, self.k2, self.alpha);
        Matrix4::new(
            -0.5 * k1, x[2] / a, x[1] / a, 0.0,
            -x[2] / a, -0.5 * k1, -x[0] / a, 0.0,
            0.0, 0.0, -0.5 * k2, 0.0,
            -x[0] / a, -x[1] / a, 0.0, -0.5 * k2,
        )
    }

    fn c_row(&self) -> SMatrix<f64, 1, 4> {
        SMatrix::<f64, 1, 4>::new(2.0 * self.k1.sqrt(), 0.0, 0.0, 0.0)
    }
}

impl EkfModel<4> for TwoCavityEkf {
    fn drift(&self, x: &Vector4<f64>) -> Vector4<f64> {
        self.f(x)
    }

    fn drift_jacobian(&self, x: &Vector4<f64>) -> Matrix4<f64> {
        self.jac(x)
    }

    fn measurement(&self, x: &Vector4<f64>) -> f64 {
        (self.c_row() * x)[0]
    }

    fn measurement_jacobian(&self, _x: &Vector4<f64>) -> SMatrix<f64, 1, 4> {
        self.c_row()
    }

    fn noise(&self) -> NoiseSpec<4> {
        self.noise
    }
}

/// Drift of the quadrature vector under the two-cavity dynamics.
pub fn drift_f(x: &Vector4<f64>, model: &CombinedModel) -> Vector4<f64> {
    TwoCavityEkf::new(model).f(x)
}

/// Analytic Jacobian of [`drift_f`].
pub fn jacobian_f(x: &Vector4<f64>, model: &CombinedModel) -> Matrix4<f64> {
    TwoCavityEkf::new(model).jac(x)
}

/// `Q = diag(k1/4, k1/4, k2/4, k2/4)`, `R = 1`, `S = 0`.
pub fn noise_matrices(model: &CombinedModel) -> NoiseSpec<4> {
    NoiseSpec {
        q: model.process_noise(),
        r: 1.0,
        s: Vector4::zeros(),
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct QekfTrajectory {
    pub x_hat: Vec<[f64; 4]>,
    pub q_hat: Vec<f64>,
    pub final_state: EkfState<4>,
}

/// Filters `record` with the two-cavity QEKF from `initial`.
pub fn run_qekf(
    model: &CombinedModel,
    initial: EkfState<4>,
    record: &MeasurementRecord,
) -> Result<QekfTrajectory> {
    let fns = TwoCavityEkf::new(model);
    let mut x_hat = Vec::with_capacity(record.t.len());
    let mut q_hat = Vec::with_capacity(record.t.len());
    let final_state = filter_with(&fns, initial, record, |_, s| {
        x_hat.push(s.x_hat.into());
        q_hat.push(fns.q_hat(&s.x_hat));
    })?;
    Ok(QekfTrajectory {
        x_hat,
        q_hat,
        final_state,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::grid::TimeGrid;
    use crate::model::{build_combined_model, map_classical_to_cavity, OuParams};
    use crate::operators::SpaceLayout;

    fn reference_model() -> CombinedModel {
        let mapping = map_classical_to_cavity(&OuParams::default()).unwrap();
        build_combined_model(0.55, mapping, SpaceLayout::two_level_pair()).unwrap()
    }

    /// A linear test model with fully configurable matrices.
    struct Linear {
        f: Matrix4<f64>,
        h: SMatrix<f64, 1, 4>,
        noise: NoiseSpec<4>,
    }

    impl EkfModel<4> for Linear {
        fn drift(&self, x: &Vector4<f64>) -> Vector4<f64> {
            self.f * x
        }
        fn drift_jacobian(&self, _: &Vector4<f64>) -> Matrix4<f64> {
            self.f
        }
        fn measurement(&self, x: &Vector4<f64>) -> f64 {
            (self.h * x)[0]
        }
        fn measurement_jacobian(&self, _: &Vector4<f64>) -> SMatrix<f64, 1, 4> {
            self.h
        }
        fn noise(&self) -> NoiseSpec<4> {
            self.noise
        }
    }

    fn linear(q: Matrix4<f64>) -> Linear {
        Linear {
            f: Matrix4::zeros(),
            h: SMatrix::zeros(),
            noise: NoiseSpec {
                q,
                r: 1.0,
                s: Vector4::zeros(),
            },
        }
    }

    #[test]
    fn drift_at_origin() {
        let m = reference_model();
        let f = drift_f(&Vector4::zeros(), &m);
        assert_eq!((f[0], f[1], f[2]), (0.0, 0.0, 0.0));
        assert!((f[3] + 0.088_388_347_648_318_44).abs() < 1e-12);
    }

    #[test]
    fn drift_on_q2_axis() {
        let m = reference_model();
        let f = drift_f(&Vector4::new(0.0, 0.0, 1.0, 0.0), &m);
        assert_eq!((f[0], f[1]), (0.0, 0.0));
        assert!((f[2] + 0.25).abs() < 1e-15);
        assert!((f[3] + 1.0 / (4.0 * m.alpha())).abs() < 1e-15);
    }

    #[test]
    fn drift_matches_term_by_term_evaluation() {
        let m = reference_model();
        let (k1, k2, a) = (0.55, 0.5, 2.0 * 2f64.sqrt());
        for x in [[0.3, -0.2, 0.7, 0.1], [-1.0, 0.5, 0.25, -0.4]] {
            let f = drift_f(&Vector4::from(x), &m);
            let [x1, x2, x3, x4] = x;
            let want = [
                -k1 / 2.0 * x1 + x2 * x3 / a,
                -k1 / 2.0 * x2 - x1 * x3 / a,
                -k2 / 2.0 * x3,
                -k2 / 2.0 * x4 - x1 * x1 / (2.0 * a) - x2 * x2 / (2.0 * a) - 1.0 / (4.0 * a),
            ];
            for i in 0..4 {
                assert!((f[i] - want[i]).abs() < 1e-14);
            }
        }
    }

    #[test]
    fn jacobian_at_origin_is_diagonal() {
        let j = jacobian_f(&Vector4::zeros(), &reference_model());
        let want = Matrix4::from_diagonal(&Vector4::new(-0.275, -0.275, -0.25, -0.25));
        assert!((j - want).amax() < 1e-15);
    }

    #[test]
    fn jacobian_entry_for_q1() {
        let j = jacobian_f(&Vector4::new(1.0, 0.0, 0.0, 0.0), &reference_model());
        assert!((j[(3, 0)] + 0.353_553_390_593_273_8).abs() < 1e-12);
    }

    #[test]
    fn noise_for_reference_model() {
        let n = noise_matrices(&reference_model());
        let want = Matrix4::from_diagonal(&Vector4::new(0.1375, 0.1375, 0.125, 0.125));
        assert!((n.q - want).amax() < 1e-15);
        assert_eq!(n.r, 1.0);
        assert_eq!(n.s, Vector4::zeros());
    }

    #[test]
    fn stationary_riccati() {
        let lin = linear(Matrix4::zeros());
        let p = Matrix4::new(
            0.3, 0.1, 0.0, 0.0, 0.1, 0.2, 0.0, 0.0, 0.0, 0.0, 0.5, 0.05, 0.0, 0.0, 0.05, 0.1,
        );
        let s = EkfState::new(Vector4::zeros(), p).unwrap();
        assert_eq!(riccati_step(&s, &lin, 0.01).unwrap(), p);
    }

    #[test]
    fn pure_process_noise_growth() {
        let lin = linear(Matrix4::identity());
        let s = EkfState::new(Vector4::zeros(), Matrix4::zeros()).unwrap();
        let p = riccati_step(&s, &lin, 0.01).unwrap();
        assert!((p - Matrix4::identity() * 0.01).amax() < 1e-18);
    }

    #[test]
    fn riccati_rejects_bad_step() {
        let lin = linear(Matrix4::zeros());
        let s = EkfState::new(Vector4::zeros(), Matrix4::identity()).unwrap();
        assert!(riccati_step(&s, &lin, 0.0).is_err());
        let mut neg = linear(Matrix4::identity() * -10.0);
        neg.noise.q[(0, 1)] = 0.0;
        assert!(matches!(
            riccati_step(&s, &neg, 1.0),
            Err(Error::NumericalInstability { .. })
        ));
    }

    #[test]
    fn state_validation() {
        let mut p = Matrix4::identity();
        p[(0, 1)] = 0.5;
        assert!(EkfState::new(Vector4::zeros(), p).is_err());
        assert!(EkfState::new(Vector4::zeros(), -Matrix4::identity()).is_err());
    }

    #[test]
    fn gain_examples() {
        let fns = TwoCavityEkf::new(&reference_model());
        let eye = EkfState::new(Vector4::zeros(), Matrix4::identity()).unwrap();
        let k = kalman_gain(&eye, &fns);
        assert!((k - Vector4::new(1.483_239_697_419_132_6, 0.0, 0.0, 0.0)).amax() < 1e-12);

        let zero = EkfState::new(Vector4::zeros(), Matrix4::zeros()).unwrap();
        assert_eq!(kalman_gain(&zero, &fns), Vector4::zeros());

        let diag = EkfState::new(
            Vector4::zeros(),
            Matrix4::from_diagonal(&Vector4::new(0.2, 0.3, 0.4, 0.5)),
        )
        .unwrap();
        let k = kalman_gain(&diag, &fns);
        assert!((k[0] - 2.0 * 0.55f64.sqrt() * 0.2).abs() < 1e-15);
        assert_eq!((k[1], k[2], k[3]), (0.0, 0.0, 0.0));
    }

    #[test]
    fn zero_innovation_is_pure_drift() {
        let fns = TwoCavityEkf::new(&reference_model());
        let s = EkfState::new(Vector4::new(0.5, 0.1, 0.5, -0.2), Matrix4::identity() * 0.25).unwrap();
        let dt = 1e-3;
        let dy = fns.measurement(&s.x_hat) * dt;
        let next = qekf_step(&s, dy, dt, &fns).unwrap();
        let expect = s.x_hat + fns.drift(&s.x_hat) * dt;
        assert!((next.x_hat - expect).amax() < 1e-15);
    }

    #[test]
    fn unmeasured_limit_decays_q2() {
        // k1 -> 0: no gain, autonomous drift; Q2 decays as exp(-k2 t / 2)
        let mapping = map_classical_to_cavity(&OuParams::default()).unwrap();
        let m = build_combined_model(1e-300, mapping, SpaceLayout::two_level_pair()).unwrap();
        let grid = TimeGrid::new(1e-3, 2.0).unwrap();
        let record = MeasurementRecord::new(grid, vec![0.05; grid.steps()], None).unwrap();
        let init = EkfState::new(Vector4::new(0.5, 0.0, 0.5, 0.0), Matrix4::identity() * 0.25).unwrap();
        let traj = run_qekf(&m, init, &record).unwrap();
        let q2_end = traj.x_hat.last().unwrap()[2];
        assert!((q2_end - 0.5 * (-0.5f64).exp()).abs() < 1e-4);
    }

    #[test]
    fn filtering_is_deterministic() {
        let m = reference_model();
        let grid = TimeGrid::new(1e-3, 1.0).unwrap();
        let dy = crate::rng::wiener_increments(crate::rng::StreamSeed::new(2, 2), 1e-3, grid.steps());
        let record = MeasurementRecord::new(grid, dy, None).unwrap();
        let init = EkfState::new(Vector4::new(0.5, 0.0, 0.5, 0.0), Matrix4::identity() * 0.25).unwrap();
        let a = run_qekf(&m, init, &record).unwrap();
        let b = run_qekf(&m, init, &record).unwrap();
        assert_eq!(a, b);
        let p = a.final_state.p;
        assert!((p - p.transpose()).amax() < 1e-10);
        assert!(a.final_state.min_eigenvalue() > -1e-8);
    }
}

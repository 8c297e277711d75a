//! The two-cavity model: cavity `S1` whose Hamiltonian is modulated by the
//! quadrature of an auxiliary damped cavity `S2` standing in for the
//! classical disturbance.
//!
//! With identity scattering, the combined system is
//!
//! ```text
//! H = Q2 a^dag a / alpha,    L = (sqrt(k1) a, sqrt(k2) b)
//! ```
//!
//! and channel 0 (the output of `S1`) is the one under homodyne detection.

use nalgebra::{Matrix4, RowVector4, SMatrix};

use crate::error::{Error, Result};
use crate::operators::{
    c, embed, fock_annihilation, fock_number, quadrature_p, quadrature_q, CMatrix, Complex64, Operator,
    SpaceLayout, I,
};
use crate::sme::DensityState;

/// Parameters of `dq = -u q dt - v dw`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct OuParams {
    pub u: f64,
    pub v: f64,
    pub q0: f64,
}

impl OuParams {
    pub fn new(u: f64, v: f64, q0: f64) -> Result<Self> {
        if !(u > 0.0) || !u.is_finite() {
            return Err(Error::invalid("u", format!("decay rate must be > 0, got {u}")));
        }
        if !v.is_finite() || !q0.is_finite() {
            return Err(Error::invalid("v", "parameters must be finite"));
        }
        Ok(Self { u, v, q0 })
    }
}

impl Default for OuParams {
    /// `u = 1/4`, `v = 1/8`, `q0 = 1/(4 sqrt 2)`.
    fn default() -> Self {
        Self {
            u: 0.25,
            v: 0.125,
            q0: 1.0 / (4.0 * 2f64.sqrt()),
        }
    }
}

/// How the classical process maps onto the auxiliary cavity: `q ~ Q2 / alpha`
/// with damping `k2`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AnalogMapping {
    pub alpha: f64,
    pub k2: f64,
}

/// Matches the drift and diffusion of `q` to those of `Q2 / alpha`:
/// `alpha = sqrt(2u) / (2v)` and `k2 = 2u = 4 (alpha v)^2`.
pub fn map_classical_to_cavity(p: &OuParams) -> Result<AnalogMapping> {
    if !(p.u > 0.0) || !p.u.is_finite() {
        return Err(Error::invalid(
            "u",
            format!(
                "the cavity analog needs a positive coupling, so u must be > 0 (got {})",
                p.u
            ),
        ));
    }
    if p.v == 0.0 || !p.v.is_finite() {
        return Err(Error::invalid(
            "v",
            format!("the mapping is singular for v = {}", p.v),
        ));
    }
    Ok(AnalogMapping {
        alpha: (2.0 * p.u).sqrt() / (2.0 * p.v),
        k2: 2.0 * p.u,
    })
}

/// Index into the quadrature vector `x = (Q1, P1, Q2, P2)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum Quadrature {
    Q1 = 0,
    P1 = 1,
    Q2 = 2,
    P2 = 3,
}

impl Quadrature {
    pub const ALL: [Quadrature; 4] = [Self::Q1, Self::P1, Self::Q2, Self::P2];

    pub fn index(self) -> usize {
        self as usize
    }
}

/// An open system with identity scattering: Hamiltonian plus coupling
/// operators. Channel 0 is the measured one.
#[derive(Debug, Clone)]
pub struct OpenSystem {
    hamiltonian: Operator,
    couplings: Vec<Operator>,
    couplings_dag: Vec<CMatrix>,
    // -iH - (1/2) sum_j L_j^dag L_j
    effective: CMatrix,
    effective_dag: CMatrix,
}

impl OpenSystem {
    pub fn new(hamiltonian: Operator, couplings: Vec<Operator>) -> Result<Self> {
        if !hamiltonian.is_hermitian(1e-12) {
            return Err(Error::Dimension("Hamiltonian must be Hermitian".into()));
        }
        if couplings.is_empty() {
            return Err(Error::Dimension("need at least one coupling channel".into()));
        }
        let dim = hamiltonian.dim();
        if let Some(l) = couplings.iter().find(|l| l.dim() != dim) {
            return Err(Error::Dimension(format!(
                "coupling has dimension {} but the Hamiltonian has {dim}",
                l.dim()
            )));
        }
        let couplings_dag: Vec<CMatrix> = couplings.iter().map(|l| l.matrix().adjoint()).collect();
        let mut effective = hamiltonian.matrix() * (-I);
        for (l, ld) in couplings.iter().zip(&couplings_dag) {
            effective -= (ld * l.matrix()) * c(0.5);
        }
        let effective_dag = effective.adjoint();
        Ok(Self {
            hamiltonian,
            couplings,
            couplings_dag,
            effective,
            effective_dag,
        })
    }

    pub fn dim(&self) -> usize {
        self.hamiltonian.dim()
    }

    pub fn hamiltonian(&self) -> &Operator {
        &self.hamiltonian
    }

    pub fn couplings(&self) -> &[Operator] {
        &self.couplings
    }

    pub fn measured(&self) -> &Operator {
        &self.couplings[0]
    }

    pub(crate) fn coupling_dag(&self, j: usize) -> &CMatrix {
        &self.couplings_dag[j]
    }

    /// `-iH - (1/2) sum_j L_j^dag L_j`, the no-jump generator.
    pub fn effective_generator(&self) -> &CMatrix {
        &self.effective
    }

    /// `-i[H, rho] + sum_j (L_j rho L_j^dag - {L_j^dag L_j, rho}/2)`.
    pub fn lindblad_drift(&self, rho: &CMatrix) -> CMatrix {
        let mut out = &self.effective * rho + rho * &self.effective_dag;
        for (l, ld) in self.couplings.iter().zip(&self.couplings_dag) {
            out += l.matrix() * rho * ld;
        }
        out
    }

    /// `Tr[(L_0 + L_0^dag) rho]`, the expected homodyne rate.
    pub fn measurement_mean(&self, rho: &CMatrix) -> f64 {
        let l = self.measured().matrix();
        let ld = &self.couplings_dag[0];
        let mut acc = Complex64::new(0.0, 0.0);
        let n = rho.nrows();
        for i in 0..n {
            for j in 0..n {
                acc += (l[(i, j)] + ld[(i, j)]) * rho[(j, i)];
            }
        }
        acc.re
    }
}

/// Observables read out along SME trajectories.
#[derive(Debug, Clone)]
pub struct Readout {
    quadratures: [Operator; 4],
    alpha: f64,
}

impl Readout {
    pub fn new(quadratures: [Operator; 4], alpha: f64) -> Self {
        Self { quadratures, alpha }
    }

    pub fn quadrature(&self, q: Quadrature) -> &Operator {
        &self.quadratures[q.index()]
    }

    pub fn alpha(&self) -> f64 {
        self.alpha
    }

    /// Real parts of `Tr(rho X_i)` for `x = (Q1, P1, Q2, P2)`.
    pub fn quadrature_means(&self, rho: &CMatrix) -> [f64; 4] {
        let mut out = [0.0; 4];
        for (o, x) in out.iter_mut().zip(&self.quadratures) {
            *o = crate::operators::trace_of_product(rho, x.matrix()).re;
        }
        out
    }

    /// `q_hat = Tr(rho Q2) / alpha`.
    pub fn q_hat(&self, rho: &CMatrix) -> f64 {
        crate::operators::trace_of_product(rho, self.quadratures[2].matrix()).re / self.alpha
    }
}

#[derive(Debug, Clone)]
pub struct CombinedModel {
    layout: SpaceLayout,
    system: OpenSystem,
    readout: Readout,
    photon_number_s1: Operator,
    k1: f64,
    mapping: AnalogMapping,
    measurement_row: RowVector4<f64>,
    process_noise: Matrix4<f64>,
}

pub fn build_combined_model(k1: f64, mapping: AnalogMapping, layout: SpaceLayout) -> Result<CombinedModel> {
    if !(k1 > 0.0) || !k1.is_finite() {
        return Err(Error::invalid("k1", format!("coupling must be > 0, got {k1}")));
    }
    if !(mapping.k2 > 0.0) || !(mapping.alpha.is_finite() && mapping.alpha != 0.0) {
        return Err(Error::invalid(
            "mapping",
            format!("need k2 > 0 and finite nonzero alpha, got {mapping:?}"),
        ));
    }
    if layout.subsystems() != 2 {
        return Err(Error::Dimension(format!(
            "the combined model has exactly 2 subsystems, layout has {}",
            layout.subsystems()
        )));
    }
    let (n1, n2) = (layout.dims()[0], layout.dims()[1]);

    let a = embed(&fock_annihilation(n1)?, 0, &layout)?;
    let b = embed(&fock_annihilation(n2)?, 1, &layout)?;
    let n_a = embed(&fock_number(n1)?, 0, &layout)?;
    let quadratures = [
        embed(&quadrature_q(n1)?, 0, &layout)?,
        embed(&quadrature_p(n1)?, 0, &layout)?,
        embed(&quadrature_q(n2)?, 1, &layout)?,
        embed(&quadrature_p(n2)?, 1, &layout)?,
    ];

    let hamiltonian = (&quadratures[2] * &n_a).scale(c(1.0 / mapping.alpha));
    let couplings = vec![a.scale(c(k1.sqrt())), b.scale(c(mapping.k2.sqrt()))];
    let system = OpenSystem::new(Operator::hermitian(hamiltonian.into_matrix())?, couplings)?;

    let k2 = mapping.k2;
    Ok(CombinedModel {
        layout,
        system,
        readout: Readout::new(quadratures, mapping.alpha),
        photon_number_s1: n_a,
        k1,
        mapping,
        measurement_row: RowVector4::new(2.0 * k1.sqrt(), 0.0, 0.0, 0.0),
        process_noise: Matrix4::from_diagonal(&nalgebra::Vector4::new(
            k1 / 4.0,
            k1 / 4.0,
            k2 / 4.0,
            k2 / 4.0,
        )),
    })
}

impl CombinedModel {
    pub fn layout(&self) -> &SpaceLayout {
        &self.layout
    }

    pub fn system(&self) -> &OpenSystem {
        &self.system
    }

    pub fn readout(&self) -> &Readout {
        &self.readout
    }

    pub fn hamiltonian(&self) -> &Operator {
        self.system.hamiltonian()
    }

    pub fn couplings(&self) -> &[Operator] {
        self.system.couplings()
    }

    /// Identity, since the model has no scattering between channels.
    pub fn scattering(&self) -> nalgebra::Matrix2<f64> {
        nalgebra::Matrix2::identity()
    }

    pub fn quadrature(&self, q: Quadrature) -> &Operator {
        self.readout.quadrature(q)
    }

    /// `a^dag a` on the full space.
    pub fn photon_number_s1(&self) -> &Operator {
        &self.photon_number_s1
    }

    pub fn k1(&self) -> f64 {
        self.k1
    }

    pub fn k2(&self) -> f64 {
        self.mapping.k2
    }

    pub fn alpha(&self) -> f64 {
        self.mapping.alpha
    }

    pub fn mapping(&self) -> AnalogMapping {
        self.mapping
    }

    /// `C = (2 sqrt(k1), 0, 0, 0)`, so that `h(x) = C x`.
    pub fn measurement_row(&self) -> RowVector4<f64> {
        self.measurement_row
    }

    /// `diag(k1/4, k1/4, k2/4, k2/4)`.
    pub fn process_noise(&self) -> Matrix4<f64> {
        self.process_noise
    }

    /// Noise gain `G` of the quadrature QSDE `dx = f(x) dt + G dz + G^* dz^*`.
    pub fn diffusion_gain(&self) -> SMatrix<Complex64, 4, 2> {
        let s1 = self.k1.sqrt() / 2.0;
        let s2 = self.k2().sqrt() / 2.0;
        // -sqrt(k)/(2i) = i sqrt(k)/2
        SMatrix::<Complex64, 4, 2>::new(
            c(-s1),
            c(0.0),
            Complex64::new(0.0, s1),
            c(0.0),
            c(0.0),
            c(-s2),
            c(0.0),
            Complex64::new(0.0, s2),
        )
    }
}

/// Deterministic part of the SME for the combined model.
pub fn lindblad_drift(model: &CombinedModel, rho: &DensityState) -> Result<CMatrix> {
    if rho.dim() != model.system.dim() {
        return Err(Error::Dimension(format!(
            "state has dimension {} but the model has {}",
            rho.dim(),
            model.system.dim()
        )));
    }
    Ok(model.system.lindblad_drift(rho.matrix()))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::operators::{expectation, max_abs_diff};
    use proptest::prelude::*;

    fn reference_model() -> CombinedModel {
        let mapping = map_classical_to_cavity(&OuParams::default()).unwrap();
        build_combined_model(0.55, mapping, SpaceLayout::two_level_pair()).unwrap()
    }

    fn random_density(dim: usize, vals: &[f64]) -> CMatrix {
        // rho = A A^dag / Tr(A A^dag)
        let a = CMatrix::from_fn(dim, dim, |i, j| {
            Complex64::new(vals[2 * (i * dim + j)], vals[2 * (i * dim + j) + 1])
        });
        let r = &a * a.adjoint();
        let t = r.trace();
        r / t
    }

    #[test]
    fn mapping_for_reference_parameters() {
        let m = map_classical_to_cavity(&OuParams::new(0.25, 0.125, 0.0).unwrap()).unwrap();
        assert!((m.alpha - 2.0 * 2f64.sqrt()).abs() < 1e-12);
        assert!((m.k2 - 0.5).abs() < 1e-12);
        assert!((4.0 * (m.alpha * 0.125).powi(2) - m.k2).abs() < 1e-12);
    }

    #[test]
    fn mapping_unit_case() {
        let m = map_classical_to_cavity(&OuParams::new(0.5, 0.5, 0.0).unwrap()).unwrap();
        assert!((m.alpha - 1.0).abs() < 1e-15);
        assert!((m.k2 - 1.0).abs() < 1e-15);
    }

    #[test]
    fn mapping_rejects_bad_parameters() {
        let p = OuParams {
            u: -1.0,
            v: 0.1,
            q0: 0.0,
        };
        assert!(matches!(
            map_classical_to_cavity(&p),
            Err(Error::InvalidParameter { name: "u", .. })
        ));
        let p = OuParams {
            u: 0.0,
            v: 0.1,
            q0: 0.0,
        };
        assert!(map_classical_to_cavity(&p).is_err());
        let p = OuParams {
            u: 0.3,
            v: 0.0,
            q0: 0.0,
        };
        assert!(matches!(
            map_classical_to_cavity(&p),
            Err(Error::InvalidParameter { name: "v", .. })
        ));
        assert!(OuParams::new(-0.1, 0.1, 0.0).is_err());
    }

    #[test]
    fn combined_model_structure() {
        let m = reference_model();
        assert_eq!(m.hamiltonian().dim(), 4);
        assert!(m.hamiltonian().is_hermitian(1e-12));
        assert!(m.hamiltonian().max_abs() > 0.0);
        assert_eq!(m.couplings().len(), 2);
        let c_row = m.measurement_row();
        assert!((c_row[0] - 1.483_239_697_419_132_6).abs() < 1e-12);
        assert_eq!((c_row[1], c_row[2], c_row[3]), (0.0, 0.0, 0.0));
        assert_eq!(m.scattering(), nalgebra::Matrix2::identity());
        // H commutes with the photon number of S1
        assert!(m.hamiltonian().commutator(m.photon_number_s1()).max_abs() < 1e-14);
    }

    #[test]
    fn process_noise_from_gain_matrix() {
        let m = reference_model();
        let g = m.diffusion_gain();
        let ggd = g * g.adjoint();
        let sym = (ggd + ggd.transpose()) * c(0.5);
        let expect = [0.1375, 0.1375, 0.125, 0.125];
        for i in 0..4 {
            for j in 0..4 {
                let want = if i == j { expect[i] } else { 0.0 };
                assert!((sym[(i, j)] - c(want)).norm() < 1e-12);
                assert!((m.process_noise()[(i, j)] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn build_rejects_bad_input() {
        let mapping = map_classical_to_cavity(&OuParams::default()).unwrap();
        assert!(build_combined_model(0.0, mapping, SpaceLayout::two_level_pair()).is_err());
        assert!(build_combined_model(-1.0, mapping, SpaceLayout::two_level_pair()).is_err());
        let three = SpaceLayout::new(vec![2, 2, 2]).unwrap();
        assert!(build_combined_model(0.55, mapping, three).is_err());
    }

    #[test]
    fn closed_static_system_has_zero_drift() {
        let sys = OpenSystem::new(Operator::zeros(3), vec![Operator::zeros(3)]).unwrap();
        let rho = random_density(3, &[0.3; 18]);
        assert!(sys.lindblad_drift(&rho).iter().all(|z| z.norm() == 0.0));
    }

    #[test]
    fn single_photon_decays_at_unit_rate() {
        let a = fock_annihilation(2).unwrap();
        let sys = OpenSystem::new(Operator::zeros(2), vec![a]).unwrap();
        let rho = DensityState::pure_basis(2, 1).unwrap();
        let drift = sys.lindblad_drift(rho.matrix());
        let n = fock_number(2).unwrap();
        let rate = crate::operators::trace_of_product(n.matrix(), &drift);
        assert!((rate - c(-1.0)).norm() < 1e-15);
    }

    #[test]
    fn photon_number_commutator_with_b() {
        // [b, H] = a^dag a / (2 alpha) on rows where S2 is in its ground state
        let m = reference_model();
        let b = embed(&fock_annihilation(2).unwrap(), 1, m.layout()).unwrap();
        let comm = b.commutator(m.hamiltonian());
        let target = m.photon_number_s1().scale(c(1.0 / (2.0 * m.alpha())));
        for row in [0usize, 2] {
            for col in 0..4 {
                assert!((comm.matrix()[(row, col)] - target.matrix()[(row, col)]).norm() < 1e-14);
            }
        }
    }

    #[test]
    fn measurement_row_matches_coupling_expectation() {
        let m = reference_model();
        let vals: Vec<f64> = (0..32).map(|k| ((k * 37 % 11) as f64 - 5.0) / 7.0).collect();
        let rho = random_density(4, &vals);
        let x = m.readout().quadrature_means(&rho);
        let cx: f64 = (m.measurement_row() * nalgebra::Vector4::from(x))[0];
        assert!((cx - m.system().measurement_mean(&rho)).abs() < 1e-10);
    }

    proptest! {
        #[test]
        fn drift_is_traceless_and_hermitian(vals in proptest::collection::vec(-1.0f64..1.0, 32)) {
            let m = reference_model();
            let rho = DensityState::new(random_density(4, &vals)).unwrap();
            let d = lindblad_drift(&m, &rho).unwrap();
            prop_assert!(d.trace().norm() < 1e-12);
            prop_assert!(max_abs_diff(&d, &d.adjoint()) < 1e-12);
            // expectation of identity stays 1
            prop_assert!((expectation(&rho, &Operator::identity(4)).unwrap() - c(1.0)).norm() < 1e-12);
        }

        #[test]
        fn mapping_identity_holds(u in 1e-3f64..10.0, v in prop_oneof![-5.0f64..-1e-3, 1e-3f64..5.0]) {
            let m = map_classical_to_cavity(&OuParams::new(u, v, 0.0).unwrap()).unwrap();
            prop_assert!((4.0 * (m.alpha * v).powi(2) - m.k2).abs() < 1e-12 * m.k2.max(1.0));
        }
    }
}

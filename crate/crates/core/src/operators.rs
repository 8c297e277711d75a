//! Dense operator algebra on truncated Fock spaces.
//!
//! Every matrix here is a plain `nalgebra` complex matrix wrapped in
//! [`Operator`], which only adds the Hilbert dimension check. Multi-mode
//! spaces are ordered Kronecker products: slot 0 is the most significant
//! factor.

use std::ops::{Add, Mul, Sub};

use nalgebra::{Complex, DMatrix};

use crate::error::{Error, Result};
use crate::sme::DensityState;

pub type Complex64 = Complex<f64>;
pub type CMatrix = DMatrix<Complex64>;

pub const I: Complex64 = Complex64::new(0.0, 1.0);

#[inline]
pub fn c(re: f64) -> Complex64 {
    Complex64::new(re, 0.0)
}

/// Square complex matrix acting on a Hilbert space of dimension `dim`.
#[derive(Debug, Clone, PartialEq)]
pub struct Operator {
    entries: CMatrix,
}

impl Operator {
    pub fn new(entries: CMatrix) -> Result<Self> {
        if entries.nrows() != entries.ncols() {
            return Err(Error::Dimension(format!(
                "operator must be square, got {}x{}",
                entries.nrows(),
                entries.ncols()
            )));
        }
        if entries.nrows() == 0 {
            return Err(Error::Dimension("operator dimension must be positive".into()));
        }
        Ok(Self { entries })
    }

    /// Like [`Operator::new`] but also requires `max|A - A^H| < 1e-12`.
    pub fn hermitian(entries: CMatrix) -> Result<Self> {
        let op = Self::new(entries)?;
        let err = op.hermiticity_error();
        if err >= 1e-12 {
            return Err(Error::Dimension(format!(
                "operator is not Hermitian (max deviation {err:e})"
            )));
        }
        Ok(op)
    }

    pub fn identity(dim: usize) -> Self {
        Self {
            entries: CMatrix::identity(dim, dim),
        }
    }

    pub fn zeros(dim: usize) -> Self {
        Self {
            entries: CMatrix::zeros(dim, dim),
        }
    }

    pub fn dim(&self) -> usize {
        self.entries.nrows()
    }

    pub fn matrix(&self) -> &CMatrix {
        &self.entries
    }

    pub fn into_matrix(self) -> CMatrix {
        self.entries
    }

    pub fn dagger(&self) -> Self {
        Self {
            entries: self.entries.adjoint(),
        }
    }

    pub fn scale(&self, factor: Complex64) -> Self {
        Self {
            entries: &self.entries * factor,
        }
    }

    pub fn trace(&self) -> Complex64 {
        self.entries.trace()
    }

    pub fn commutator(&self, other: &Operator) -> Self {
        &(self * other) - &(other * self)
    }

    /// Largest elementwise deviation `max|A - A^H|`.
    pub fn hermiticity_error(&self) -> f64 {
        max_abs_diff(&self.entries, &self.entries.adjoint())
    }

    pub fn is_hermitian(&self, tol: f64) -> bool {
        self.hermiticity_error() < tol
    }

    /// Largest elementwise modulus.
    pub fn max_abs(&self) -> f64 {
        self.entries.iter().fold(0.0, |m, z| m.max(z.norm()))
    }
}

impl<'a> Mul<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn mul(self, rhs: &'a Operator) -> Operator {
        Operator {
            entries: &self.entries * &rhs.entries,
        }
    }
}

impl<'a> Add<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn add(self, rhs: &'a Operator) -> Operator {
        Operator {
            entries: &self.entries + &rhs.entries,
        }
    }
}

impl<'a> Sub<&'a Operator> for &'a Operator {
    type Output = Operator;
    fn sub(self, rhs: &'a Operator) -> Operator {
        Operator {
            entries: &self.entries - &rhs.entries,
        }
    }
}

pub(crate) fn max_abs_diff(a: &CMatrix, b: &CMatrix) -> f64 {
    a.iter()
        .zip(b.iter())
        .fold(0.0, |m, (x, y)| m.max((x - y).norm()))
}

/// Per-subsystem truncation dimensions of a tensor-product space.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SpaceLayout {
    dims: Vec<usize>,
}

impl SpaceLayout {
    pub fn new(dims: Vec<usize>) -> Result<Self> {
        if dims.is_empty() {
            return Err(Error::Dimension("layout needs at least one subsystem".into()));
        }
        if let Some(d) = dims.iter().find(|&&d| d < 2) {
            return Err(Error::Dimension(format!(
                "every subsystem needs dimension >= 2, got {d}"
            )));
        }
        Ok(Self { dims })
    }

    /// Two two-level cavities.
    pub fn two_level_pair() -> Self {
        Self { dims: vec![2, 2] }
    }

    pub fn dims(&self) -> &[usize] {
        &self.dims
    }

    pub fn subsystems(&self) -> usize {
        self.dims.len()
    }

    pub fn total_dim(&self) -> usize {
        self.dims.iter().product()
    }
}

fn check_truncation(n: usize) -> Result<()> {
    if n < 2 {
        return Err(Error::Dimension(format!(
            "Fock truncation must be at least 2, got {n}"
        )));
    }
    Ok(())
}

/// Lowering operator on the lowest `n` number states: `<k-1|a|k> = sqrt(k)`.
pub fn fock_annihilation(n: usize) -> Result<Operator> {
    check_truncation(n)?;
    let mut m = CMatrix::zeros(n, n);
    for k in 1..n {
        m[(k - 1, k)] = c((k as f64).sqrt());
    }
    Operator::new(m)
}

pub fn fock_creation(n: usize) -> Result<Operator> {
    Ok(fock_annihilation(n)?.dagger())
}

/// `a^dagger a`, exactly diagonal `(0, 1, ..., n-1)`.
pub fn fock_number(n: usize) -> Result<Operator> {
    check_truncation(n)?;
    let diag = nalgebra::DVector::from_fn(n, |k, _| c(k as f64));
    Operator::new(CMatrix::from_diagonal(&diag))
}

/// Real quadrature `Q = (a + a^dagger) / 2`.
pub fn quadrature_q(n: usize) -> Result<Operator> {
    let a = fock_annihilation(n)?;
    Ok((&a + &a.dagger()).scale(c(0.5)))
}

/// Imaginary quadrature `P = (a - a^dagger) / (2i)`.
pub fn quadrature_p(n: usize) -> Result<Operator> {
    let a = fock_annihilation(n)?;
    Ok((&a - &a.dagger()).scale(Complex64::new(0.0, -0.5)))
}

/// Lifts `op` acting on subsystem `slot` to the full space, tensoring with
/// identities on every other slot.
pub fn embed(op: &Operator, slot: usize, layout: &SpaceLayout) -> Result<Operator> {
    let dims = layout.dims();
    if slot >= dims.len() {
        return Err(Error::Dimension(format!(
            "slot {slot} out of range for a {}-subsystem layout",
            dims.len()
        )));
    }
    if op.dim() != dims[slot] {
        return Err(Error::Dimension(format!(
            "operator has dimension {} but slot {slot} has dimension {}",
            op.dim(),
            dims[slot]
        )));
    }
    let mut out = CMatrix::identity(1, 1);
    for (k, &d) in dims.iter().enumerate() {
        out = if k == slot {
            out.kronecker(op.matrix())
        } else {
            out.kronecker(&CMatrix::identity(d, d))
        };
    }
    Operator::new(out)
}

/// `Tr(rho X)`.
pub fn expectation(rho: &DensityState, x: &Operator) -> Result<Complex64> {
    if rho.dim() != x.dim() {
        return Err(Error::Dimension(format!(
            "state has dimension {} but observable has dimension {}",
            rho.dim(),
            x.dim()
        )));
    }
    Ok(trace_of_product(rho.matrix(), x.matrix()))
}

/// `Tr(A B)` without forming the product.
pub(crate) fn trace_of_product(a: &CMatrix, b: &CMatrix) -> Complex64 {
    let n = a.nrows();
    let mut acc = Complex64::new(0.0, 0.0);
    for i in 0..n {
        for j in 0..n {
            acc += a[(i, j)] * b[(j, i)];
        }
    }
    acc
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn close(a: &CMatrix, b: &CMatrix, tol: f64) -> bool {
        max_abs_diff(a, b) < tol
    }

    #[test]
    fn two_level_lowering() {
        let a = fock_annihilation(2).unwrap();
        let expect = CMatrix::from_row_slice(2, 2, &[c(0.0), c(1.0), c(0.0), c(0.0)]);
        assert_eq!(a.matrix(), &expect);
    }

    #[test]
    fn three_level_superdiagonal() {
        let a = fock_annihilation(3).unwrap();
        assert_eq!(a.matrix()[(0, 1)], c(1.0));
        assert_eq!(a.matrix()[(1, 2)], c(2f64.sqrt()));
        let nonzero = a.matrix().iter().filter(|z| z.norm() > 0.0).count();
        assert_eq!(nonzero, 2);
    }

    #[test]
    fn truncated_commutator_three_levels() {
        // hand multiplication: a a^dag = diag(1,2,0), a^dag a = diag(0,1,2)
        let a = fock_annihilation(3).unwrap();
        let comm = a.commutator(&a.dagger());
        let expect = CMatrix::from_diagonal(&nalgebra::DVector::from_vec(vec![c(1.0), c(1.0), c(-2.0)]));
        assert!(close(comm.matrix(), &expect, 1e-14));
    }

    #[test]
    fn rejects_small_truncation() {
        assert!(matches!(fock_annihilation(1), Err(Error::Dimension(_))));
        assert!(matches!(fock_annihilation(0), Err(Error::Dimension(_))));
        assert!(SpaceLayout::new(vec![2, 1]).is_err());
    }

    #[test]
    fn embed_identity_is_identity() {
        let layout = SpaceLayout::new(vec![2, 3]).unwrap();
        for slot in 0..2 {
            let id = Operator::identity(layout.dims()[slot]);
            let e = embed(&id, slot, &layout).unwrap();
            assert_eq!(e, Operator::identity(6));
        }
    }

    #[test]
    fn embed_lowering_in_first_slot() {
        let layout = SpaceLayout::two_level_pair();
        let a = embed(&fock_annihilation(2).unwrap(), 0, &layout).unwrap();
        let m = a.matrix();
        for i in 0..4 {
            for j in 0..4 {
                let want = if (i, j) == (0, 2) || (i, j) == (1, 3) {
                    1.0
                } else {
                    0.0
                };
                assert_eq!(m[(i, j)], c(want), "entry ({i},{j})");
            }
        }
    }

    #[test]
    fn embed_errors() {
        let layout = SpaceLayout::two_level_pair();
        let a3 = fock_annihilation(3).unwrap();
        assert!(embed(&a3, 0, &layout).is_err());
        let a2 = fock_annihilation(2).unwrap();
        assert!(embed(&a2, 2, &layout).is_err());
    }

    #[test]
    fn embed_trace_multiplies_by_other_dims() {
        let layout = SpaceLayout::two_level_pair();
        let x = Operator::new(CMatrix::from_row_slice(
            2,
            2,
            &[c(0.3), Complex64::new(1.0, 2.0), c(-4.0), c(1.2)],
        ))
        .unwrap();
        let e = embed(&x, 0, &layout).unwrap();
        assert!((e.trace() - x.trace() * 2.0).norm() < 1e-15);
    }

    #[test]
    fn expectation_examples() {
        let id = Operator::identity(2);
        let plus = DensityState::new(CMatrix::from_element(2, 2, c(0.5))).unwrap();
        assert!((expectation(&plus, &id).unwrap() - c(1.0)).norm() < 1e-15);

        // (I + sigma_x)/2 against the truncated Q = sigma_x/2
        let q = quadrature_q(2).unwrap();
        let v = expectation(&plus, &q).unwrap();
        assert!((v - c(0.5)).norm() < 1e-15);

        let vac = DensityState::pure_basis(2, 0).unwrap();
        let n = fock_number(2).unwrap();
        assert_eq!(expectation(&vac, &n).unwrap(), c(0.0));

        assert!(expectation(&vac, &Operator::identity(3)).is_err());
    }

    #[test]
    fn number_matches_product() {
        for n in 2..6 {
            let a = fock_annihilation(n).unwrap();
            let prod = &a.dagger() * &a;
            assert!(close(prod.matrix(), fock_number(n).unwrap().matrix(), 1e-14));
        }
    }

    #[test]
    fn quadrature_commutator_on_low_levels() {
        // With Q = (a+a^dag)/2 and P = (a-a^dag)/(2i) the canonical value is +i/2.
        for n in 3..7 {
            let comm = quadrature_q(n).unwrap().commutator(&quadrature_p(n).unwrap());
            let m = comm.matrix();
            for i in 0..2 {
                for j in 0..2 {
                    let want = if i == j { Complex64::new(0.0, 0.5) } else { c(0.0) };
                    assert!((m[(i, j)] - want).norm() < 1e-14);
                }
            }
        }
        // two-level truncation: ground level only
        let comm = quadrature_q(2).unwrap().commutator(&quadrature_p(2).unwrap());
        assert!((comm.matrix()[(0, 0)] - Complex64::new(0.0, 0.5)).norm() < 1e-15);
        assert!((comm.matrix()[(1, 1)] + Complex64::new(0.0, 0.5)).norm() < 1e-15);
    }

    #[test]
    fn quadratures_are_hermitian() {
        for n in 2..6 {
            assert!(Operator::hermitian(quadrature_q(n).unwrap().into_matrix()).is_ok());
            assert!(Operator::hermitian(quadrature_p(n).unwrap().into_matrix()).is_ok());
        }
    }

    proptest! {
        #[test]
        fn creation_is_exact_adjoint(n in 2usize..12) {
            let adag = fock_creation(n).unwrap();
            for i in 0..n {
                for j in 0..n {
                    let want = if i == j + 1 { ((j + 1) as f64).sqrt() } else { 0.0 };
                    prop_assert_eq!(adag.matrix()[(i, j)], c(want));
                }
            }
        }

        #[test]
        fn commutator_is_identity_below_top_level(n in 2usize..12) {
            let a = fock_annihilation(n).unwrap();
            let comm = a.commutator(&a.dagger());
            for i in 0..n - 1 {
                for j in 0..n - 1 {
                    let want = if i == j { 1.0 } else { 0.0 };
                    prop_assert!((comm.matrix()[(i, j)] - c(want)).norm() < 1e-12);
                }
            }
        }

        #[test]
        fn embedded_ops_on_distinct_slots_commute(
            n0 in 2usize..4,
            n1 in 2usize..4,
            re in proptest::collection::vec(-1.0f64..1.0, 18),
            im in proptest::collection::vec(-1.0f64..1.0, 18),
        ) {
            let layout = SpaceLayout::new(vec![n0, n1]).unwrap();
            let x = CMatrix::from_fn(n0, n0, |i, j| Complex64::new(re[i * 3 + j], im[i * 3 + j]));
            let y = CMatrix::from_fn(n1, n1, |i, j| Complex64::new(re[9 + i * 3 + j], im[9 + i * 3 + j]));
            let ex = embed(&Operator::new(x).unwrap(), 0, &layout).unwrap();
            let ey = embed(&Operator::new(y).unwrap(), 1, &layout).unwrap();
            prop_assert!(ex.commutator(&ey).max_abs() < 1e-12);

            // Hermiticity survives embedding
            let h = &ex + &ex.dagger();
            prop_assert!(h.is_hermitian(1e-12));
        }
    }
}

//! Dense linear algebra on the Hilbert space of an n-spin cluster.
//!
//! Basis states are indexed big-endian: site 0 is the leftmost tensor factor,
//! i.e. the most significant bit of the basis index. A cleared bit is spin up
//! (σz = +1), a set bit is spin down.

use std::fmt;
use std::str::FromStr;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_SPINS: usize = 10;
pub const MAX_DIM: usize = 1 << MAX_SPINS;

const NORM_TOL: f64 = 1e-9;
const HERMITIAN_TOL: f64 = 1e-12;

/// Pauli operator label.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Pauli {
    X,
    Y,
    Z,
}

impl Pauli {
    pub fn matrix(self) -> [[C64; 2]; 2] {
        let o = C64::new(0.0, 0.0);
        let l = C64::new(1.0, 0.0);
        let i = C64::new(0.0, 1.0);
        match self {
            Pauli::X => [[o, l], [l, o]],
            Pauli::Y => [[o, -i], [i, o]],
            Pauli::Z => [[l, o], [o, -l]],
        }
    }
}

impl FromStr for Pauli {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" => Ok(Pauli::X),
            "y" => Ok(Pauli::Y),
            "z" => Ok(Pauli::Z),
            other => Err(Error::InvalidParameter(format!("unknown Pauli axis `{other}`"))),
        }
    }
}

/// Control axis in the rotating frame: transverse, with sign.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Axis {
    #[serde(rename = "+x")]
    PlusX,
    #[serde(rename = "-x")]
    MinusX,
    #[serde(rename = "+y")]
    PlusY,
    #[serde(rename = "-y")]
    MinusY,
}

impl Axis {
    pub fn pauli(self) -> Pauli {
        match self {
            Axis::PlusX | Axis::MinusX => Pauli::X,
            Axis::PlusY | Axis::MinusY => Pauli::Y,
        }
    }

    pub fn sign(self) -> f64 {
        match self {
            Axis::PlusX | Axis::PlusY => 1.0,
            Axis::MinusX | Axis::MinusY => -1.0,
        }
    }

    /// Bloch-sphere unit vector of the axis.
    pub fn unit_vector(self) -> [f64; 3] {
        match self {
            Axis::PlusX => [1.0, 0.0, 0.0],
            Axis::MinusX => [-1.0, 0.0, 0.0],
            Axis::PlusY => [0.0, 1.0, 0.0],
            Axis::MinusY => [0.0, -1.0, 0.0],
        }
    }
}

impl fmt::Display for Axis {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            Axis::PlusX => "+x",
            Axis::MinusX => "-x",
            Axis::PlusY => "+y",
            Axis::MinusY => "-y",
        };
        f.write_str(s)
    }
}

impl FromStr for Axis {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "x" | "+x" => Ok(Axis::PlusX),
            "-x" => Ok(Axis::MinusX),
            "y" | "+y" => Ok(Axis::PlusY),
            "-y" => Ok(Axis::MinusY),
            other => Err(Error::InvalidParameter(format!(
                "unsupported control axis `{other}` (expected ±x or ±y)"
            ))),
        }
    }
}

pub(crate) fn check_spins(n_spins: usize) -> Result<()> {
    if (1..=MAX_SPINS).contains(&n_spins) {
        Ok(())
    } else if n_spins > MAX_SPINS && n_spins < usize::BITS as usize {
        Err(Error::DimensionTooLarge(1 << n_spins))
    } else {
        Err(Error::SpinCount(n_spins))
    }
}

/// Bit mask selecting `site` in a basis index.
#[inline]
pub(crate) fn site_mask(site: usize, n_spins: usize) -> usize {
    1 << (n_spins - 1 - site)
}

/// Eigenvalue of Σσz on a basis index.
#[inline]
pub(crate) fn magnetization(index: usize, n_spins: usize) -> f64 {
    n_spins as f64 - 2.0 * index.count_ones() as f64
}

/// Normalized pure state of an n-spin cluster.
#[derive(Clone, Debug, PartialEq)]
pub struct SpinState {
    n_spins: usize,
    amplitudes: DVector<C64>,
}

impl SpinState {
    pub fn new(n_spins: usize, amplitudes: DVector<C64>) -> Result<Self> {
        check_spins(n_spins)?;
        if amplitudes.len() != 1 << n_spins {
            return Err(Error::DimensionMismatch(format!(
                "{} amplitudes for {n_spins} spins",
                amplitudes.len()
            )));
        }
        let norm = amplitudes.norm();
        if (norm - 1.0).abs() > NORM_TOL {
            return Err(Error::InvalidParameter(format!("state norm {norm} is not 1")));
        }
        Ok(Self { n_spins, amplitudes })
    }

    pub(crate) fn from_raw(n_spins: usize, amplitudes: DVector<C64>) -> Self {
        debug_assert_eq!(amplitudes.len(), 1 << n_spins);
        Self { n_spins, amplitudes }
    }

    /// Computational basis state; `index` follows the big-endian site order.
    pub fn basis(n_spins: usize, index: usize) -> Result<Self> {
        check_spins(n_spins)?;
        let dim = 1 << n_spins;
        if index >= dim {
            return Err(Error::InvalidParameter(format!("basis index {index} >= {dim}")));
        }
        let mut amplitudes = DVector::zeros(dim);
        amplitudes[index] = C64::new(1.0, 0.0);
        Ok(Self { n_spins, amplitudes })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        self.amplitudes.len()
    }

    pub fn amplitudes(&self) -> &DVector<C64> {
        &self.amplitudes
    }

    pub fn norm(&self) -> f64 {
        self.amplitudes.norm()
    }

    /// ⟨self|other⟩
    pub fn overlap(&self, other: &SpinState) -> C64 {
        self.amplitudes.dotc(&other.amplitudes)
    }

    /// Site-averaged ⟨σx⟩, ⟨σy⟩, ⟨σz⟩.
    pub fn collective_expectations(&self) -> [f64; 3] {
        collective_expectations(self.amplitudes.as_slice(), self.n_spins)
    }

    pub fn expect_sx(&self) -> f64 {
        self.collective_expectations()[0]
    }
}

/// Site-averaged Pauli expectation values of a raw amplitude vector.
pub(crate) fn collective_expectations(psi: &[C64], n_spins: usize) -> [f64; 3] {
    let mut sx = 0.0;
    let mut sy = 0.0;
    let mut sz = 0.0;
    for (idx, a) in psi.iter().enumerate() {
        let p = a.norm_sqr();
        sz += p * magnetization(idx, n_spins);
        for site in 0..n_spins {
            let m = site_mask(site, n_spins);
            if idx & m == 0 {
                // ⟨σ+⟩ contribution from the (up, down) pair: conj(ψ_up) ψ_down
                let c = a.conj() * psi[idx | m];
                sx += 2.0 * c.re;
                sy += 2.0 * c.im;
            }
        }
    }
    let n = n_spins as f64;
    [sx / n, sy / n, sz / n]
}

/// |+⟩^⊗n, every spin polarized along +x.
pub fn plus_state(n_spins: usize) -> Result<SpinState> {
    check_spins(n_spins)?;
    let dim = 1 << n_spins;
    let a = C64::new(1.0 / (dim as f64).sqrt(), 0.0);
    Ok(SpinState { n_spins, amplitudes: DVector::from_element(dim, a) })
}

/// (1/n) Σ_i ⟨σx_i⟩
pub fn expect_sx(state: &SpinState) -> f64 {
    state.expect_sx()
}

/// Hermitian operator on the cluster Hilbert space (angular frequency units).
#[derive(Clone, Debug, PartialEq)]
pub struct HermitianOperator {
    n_spins: usize,
    matrix: DMatrix<C64>,
}

fn hermitian_deviation(m: &DMatrix<C64>) -> (f64, f64) {
    let mut dev: f64 = 0.0;
    let mut scale: f64 = 0.0;
    let n = m.nrows();
    for i in 0..n {
        for j in 0..n {
            scale = scale.max(m[(i, j)].norm());
            dev = dev.max((m[(i, j)] - m[(j, i)].conj()).norm());
        }
    }
    (dev, scale)
}

impl HermitianOperator {
    pub fn new(n_spins: usize, matrix: DMatrix<C64>) -> Result<Self> {
        check_spins(n_spins)?;
        let dim = 1 << n_spins;
        if matrix.nrows() != dim || matrix.ncols() != dim {
            return Err(Error::DimensionMismatch(format!(
                "{}x{} matrix for {n_spins} spins",
                matrix.nrows(),
                matrix.ncols()
            )));
        }
        let (dev, scale) = hermitian_deviation(&matrix);
        if dev > HERMITIAN_TOL * scale {
            return Err(Error::NotHermitian(dev));
        }
        Ok(Self { n_spins, matrix })
    }

    pub(crate) fn from_raw(n_spins: usize, matrix: DMatrix<C64>) -> Self {
        Self { n_spins, matrix }
    }

    pub fn zeros(n_spins: usize) -> Result<Self> {
        check_spins(n_spins)?;
        let dim = 1 << n_spins;
        Ok(Self { n_spins, matrix: DMatrix::zeros(dim, dim) })
    }

    pub fn identity(n_spins: usize) -> Result<Self> {
        check_spins(n_spins)?;
        let dim = 1 << n_spins;
        Ok(Self { n_spins, matrix: DMatrix::identity(dim, dim) })
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        self.matrix.nrows()
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn into_matrix(self) -> DMatrix<C64> {
        self.matrix
    }

    pub fn trace(&self) -> C64 {
        self.matrix.trace()
    }

    /// Largest absolute matrix element.
    pub fn max_abs(&self) -> f64 {
        self.matrix.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    pub fn scaled(&self, s: f64) -> Self {
        Self { n_spins: self.n_spins, matrix: self.matrix.map(|z| z * s) }
    }

    pub fn try_add(&self, other: &HermitianOperator) -> Result<Self> {
        if self.n_spins != other.n_spins {
            return Err(Error::DimensionMismatch(format!(
                "{} vs {} spins",
                self.n_spins, other.n_spins
            )));
        }
        Ok(Self { n_spins: self.n_spins, matrix: &self.matrix + &other.matrix })
    }

    pub fn mul(&self, other: &HermitianOperator) -> DMatrix<C64> {
        &self.matrix * &other.matrix
    }

    /// Largest element of [A, B].
    pub fn commutator_norm(&self, other: &HermitianOperator) -> f64 {
        let c = &self.matrix * &other.matrix - &other.matrix * &self.matrix;
        c.iter().fold(0.0_f64, |m, z| m.max(z.norm()))
    }

    pub fn expectation(&self, state: &SpinState) -> f64 {
        let v = &self.matrix * state.amplitudes();
        state.amplitudes().dotc(&v).re
    }

    pub fn eigensystem(&self) -> Eigensystem {
        Eigensystem::new(self)
    }
}

/// Unitary time-evolution operator.
#[derive(Clone, Debug, PartialEq)]
pub struct UnitaryPropagator {
    n_spins: usize,
    matrix: DMatrix<C64>,
}

impl UnitaryPropagator {
    pub fn identity(n_spins: usize) -> Result<Self> {
        check_spins(n_spins)?;
        let dim = 1 << n_spins;
        Ok(Self { n_spins, matrix: DMatrix::identity(dim, dim) })
    }

    pub(crate) fn from_raw(n_spins: usize, matrix: DMatrix<C64>) -> Self {
        Self { n_spins, matrix }
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn matrix(&self) -> &DMatrix<C64> {
        &self.matrix
    }

    pub fn apply(&self, state: &SpinState) -> SpinState {
        SpinState::from_raw(self.n_spins, &self.matrix * state.amplitudes())
    }

    /// `self` after `first`: returns self·first.
    pub fn after(&self, first: &UnitaryPropagator) -> Self {
        Self { n_spins: self.n_spins, matrix: &self.matrix * &first.matrix }
    }

    pub fn adjoint(&self) -> Self {
        Self { n_spins: self.n_spins, matrix: self.matrix.adjoint() }
    }

    /// max |U†U − I| elementwise.
    pub fn unitarity_error(&self) -> f64 {
        let p = self.matrix.adjoint() * &self.matrix;
        let dim = p.nrows();
        let mut err: f64 = 0.0;
        for i in 0..dim {
            for j in 0..dim {
                let target = if i == j { 1.0 } else { 0.0 };
                err = err.max((p[(i, j)] - target).norm());
            }
        }
        err
    }
}

/// Spectral decomposition H = V diag(E) V†, reusable across time steps.
#[derive(Clone, Debug)]
pub struct Eigensystem {
    n_spins: usize,
    values: Vec<f64>,
    vectors: DMatrix<C64>,
    vectors_adj: DMatrix<C64>,
}

impl Eigensystem {
    pub fn new(h: &HermitianOperator) -> Self {
        let eig = SymmetricEigen::new(h.matrix.clone());
        let vectors = eig.eigenvectors;
        let vectors_adj = vectors.adjoint();
        Self {
            n_spins: h.n_spins,
            values: eig.eigenvalues.iter().copied().collect(),
            vectors,
            vectors_adj,
        }
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn vectors(&self) -> &DMatrix<C64> {
        &self.vectors
    }

    /// exp(−i H t)
    pub fn propagator(&self, t: f64) -> UnitaryPropagator {
        let phases: Vec<C64> = self.values.iter().map(|&e| C64::from_polar(1.0, -e * t)).collect();
        let mut scaled = self.vectors.clone();
        for (j, mut col) in scaled.column_iter_mut().enumerate() {
            col *= phases[j];
        }
        UnitaryPropagator::from_raw(self.n_spins, scaled * &self.vectors_adj)
    }

    /// Coefficients of `psi` in the eigenbasis.
    pub fn to_eigenbasis(&self, psi: &DVector<C64>) -> DVector<C64> {
        &self.vectors_adj * psi
    }

    /// ψ(t) from eigenbasis coefficients.
    pub fn from_eigenbasis(&self, coeffs: &DVector<C64>, t: f64) -> DVector<C64> {
        let rotated = DVector::from_iterator(
            coeffs.len(),
            coeffs.iter().zip(&self.values).map(|(c, &e)| c * C64::from_polar(1.0, -e * t)),
        );
        &self.vectors * rotated
    }

    /// In-place ψ ← exp(−i H t) ψ.
    pub fn evolve(&self, psi: &mut DVector<C64>, t: f64) {
        let coeffs = self.to_eigenbasis(psi);
        *psi = self.from_eigenbasis(&coeffs, t);
    }
}

/// I⊗…⊗σ_axis⊗…⊗I with the Pauli matrix at `site`.
pub fn pauli_embed(axis: Pauli, site: usize, n_spins: usize) -> Result<HermitianOperator> {
    check_spins(n_spins)?;
    if site >= n_spins {
        return Err(Error::SiteOutOfRange { site, n_spins });
    }
    let dim = 1 << n_spins;
    let mask = site_mask(site, n_spins);
    let p = axis.matrix();
    let mut m = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let bit_in = usize::from(col & mask != 0);
        for bit_out in 0..2 {
            let v = p[bit_out][bit_in];
            if v != C64::new(0.0, 0.0) {
                let row = if bit_out == 1 { col | mask } else { col & !mask };
                m[(row, col)] = v;
            }
        }
    }
    Ok(HermitianOperator { n_spins, matrix: m })
}

/// Σ_i σ^axis_i
pub fn collective_pauli(axis: Pauli, n_spins: usize) -> Result<HermitianOperator> {
    let mut total = HermitianOperator::zeros(n_spins)?;
    for site in 0..n_spins {
        total.matrix += pauli_embed(axis, site, n_spins)?.matrix;
    }
    Ok(total)
}

/// U = exp(−i H dt) via Hermitian eigendecomposition.
pub fn propagator(h: &HermitianOperator, dt: f64) -> Result<UnitaryPropagator> {
    if !(dt >= 0.0) || !dt.is_finite() {
        return Err(Error::InvalidParameter(format!("time step {dt} must be finite and >= 0")));
    }
    let (dev, scale) = hermitian_deviation(&h.matrix);
    if dev > HERMITIAN_TOL * scale {
        return Err(Error::NotHermitian(dev));
    }
    Ok(Eigensystem::new(h).propagator(dt))
}

/// 2×2 matrix exp(−i(θ/2) σ_axis).
pub fn rotation_matrix(axis: Axis, angle: f64) -> [[C64; 2]; 2] {
    let (s, c) = (0.5 * angle * axis.sign()).sin_cos();
    let p = axis.pauli().matrix();
    let mut u = [[C64::new(0.0, 0.0); 2]; 2];
    for r in 0..2 {
        for k in 0..2 {
            let id = if r == k { c } else { 0.0 };
            u[r][k] = C64::new(id, 0.0) - C64::new(0.0, s) * p[r][k];
        }
    }
    u
}

/// Applies the same 2×2 unitary to every spin of a raw amplitude vector.
pub(crate) fn apply_collective_unitary(psi: &mut [C64], n_spins: usize, u: &[[C64; 2]; 2]) {
    for site in 0..n_spins {
        let m = site_mask(site, n_spins);
        for idx in 0..psi.len() {
            if idx & m == 0 {
                let a = psi[idx];
                let b = psi[idx | m];
                psi[idx] = u[0][0] * a + u[0][1] * b;
                psi[idx | m] = u[1][0] * a + u[1][1] * b;
            }
        }
    }
}

/// Collective instantaneous rotation exp(−i(θ/2) Σ_i σ_i^axis).
pub fn apply_rotation(state: &SpinState, axis: Axis, angle: f64) -> SpinState {
    let mut out = state.clone();
    let u = rotation_matrix(axis, angle);
    apply_collective_unitary(out.amplitudes.as_mut_slice(), out.n_spins, &u);
    out
}

/// Dense matrix of the collective rotation; used by the average-Hamiltonian calculator.
pub fn rotation_propagator(axis: Axis, angle: f64, n_spins: usize) -> Result<UnitaryPropagator> {
    check_spins(n_spins)?;
    let dim = 1 << n_spins;
    let u = rotation_matrix(axis, angle);
    let mut m = DMatrix::zeros(dim, dim);
    for col in 0..dim {
        let mut e = vec![C64::new(0.0, 0.0); dim];
        e[col] = C64::new(1.0, 0.0);
        apply_collective_unitary(&mut e, n_spins, &u);
        for (row, v) in e.into_iter().enumerate() {
            m[(row, col)] = v;
        }
    }
    Ok(UnitaryPropagator::from_raw(n_spins, m))
}

/// ψ ← exp(−i H dt) ψ by a truncated Taylor series with sub-stepping.
///
/// `apply_h(x, y)` must write H·x into y. `norm_bound` is any upper bound on
/// the spectral radius of H; the series is split into sub-steps of size at
/// most 0.5/norm_bound and truncated once terms fall below 1e-16.
pub(crate) fn taylor_evolve<F>(psi: &mut [C64], dt: f64, norm_bound: f64, mut apply_h: F, scratch: &mut TaylorScratch)
where
    F: FnMut(&[C64], &mut [C64]),
{
    let dim = psi.len();
    scratch.resize(dim);
    let substeps = ((norm_bound * dt) / 0.5).ceil().max(1.0) as usize;
    let h = dt / substeps as f64;
    let minus_ih = C64::new(0.0, -h);
    for _ in 0..substeps {
        scratch.term.copy_from_slice(psi);
        for k in 1..=40 {
            apply_h(&scratch.term, &mut scratch.next);
            let f = minus_ih / k as f64;
            let mut size = 0.0;
            for (t, n) in scratch.term.iter_mut().zip(&scratch.next) {
                *t = n * f;
                size += t.norm_sqr();
            }
            for (p, t) in psi.iter_mut().zip(&scratch.term) {
                *p += t;
            }
            if size < 1e-32 {
                break;
            }
        }
    }
}

#[derive(Default)]
pub(crate) struct TaylorScratch {
    term: Vec<C64>,
    next: Vec<C64>,
}

impl TaylorScratch {
    fn resize(&mut self, dim: usize) {
        if self.term.len() != dim {
            self.term = vec![C64::new(0.0, 0.0); dim];
            self.next = vec![C64::new(0.0, 0.0); dim];
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use approx::assert_abs_diff_eq;

    fn c(re: f64) -> C64 {
        C64::new(re, 0.0)
    }

    #[test]
    fn single_spin_pauli_x() {
        let x = pauli_embed(Pauli::X, 0, 1).unwrap();
        assert_eq!(x.matrix()[(0, 1)], c(1.0));
        assert_eq!(x.matrix()[(1, 0)], c(1.0));
        assert_eq!(x.matrix()[(0, 0)], c(0.0));
    }

    #[test]
    fn big_endian_sigma_z() {
        let z = pauli_embed(Pauli::Z, 1, 2).unwrap();
        let diag: Vec<f64> = (0..4).map(|i| z.matrix()[(i, i)].re).collect();
        assert_eq!(diag, vec![1.0, -1.0, 1.0, -1.0]);
    }

    #[test]
    fn pauli_traceless_and_involutory() {
        let y = pauli_embed(Pauli::Y, 2, 3).unwrap();
        assert_abs_diff_eq!(y.trace().norm(), 0.0);
        let sq = y.mul(&y);
        assert!((sq - DMatrix::<C64>::identity(8, 8)).iter().all(|z| z.norm() < 1e-15));
    }

    #[test]
    fn pauli_embed_rejects_bad_input() {
        assert!(matches!(pauli_embed(Pauli::X, 3, 3), Err(Error::SiteOutOfRange { .. })));
        assert!(pauli_embed(Pauli::X, 0, 0).is_err());
        assert!(pauli_embed(Pauli::X, 0, 11).is_err());
    }

    #[test]
    fn distinct_sites_commute() {
        let n = 4;
        for a in [Pauli::X, Pauli::Y, Pauli::Z] {
            for b in [Pauli::X, Pauli::Y, Pauli::Z] {
                let p = pauli_embed(a, 0, n).unwrap();
                let q = pauli_embed(b, 3, n).unwrap();
                assert!(p.commutator_norm(&q) <= 1e-12);
            }
        }
    }

    #[test]
    fn plus_states() {
        let s1 = plus_state(1).unwrap();
        let h = 1.0 / 2f64.sqrt();
        assert_abs_diff_eq!(s1.amplitudes()[0].re, h, epsilon = 1e-15);
        assert_abs_diff_eq!(s1.amplitudes()[1].re, h, epsilon = 1e-15);
        let s2 = plus_state(2).unwrap();
        assert!(s2.amplitudes().iter().all(|a| (a.re - 0.5).abs() < 1e-15));
        assert_abs_diff_eq!(plus_state(6).unwrap().norm(), 1.0, epsilon = 1e-12);
        assert!(plus_state(0).is_err());
        assert!(plus_state(11).is_err());
    }

    #[test]
    fn sx_expectations() {
        assert_abs_diff_eq!(plus_state(4).unwrap().expect_sx(), 1.0, epsilon = 1e-12);
        assert_abs_diff_eq!(SpinState::basis(4, 0).unwrap().expect_sx(), 0.0);
        // |+⟩ → |−⟩ under a π rotation about z, built from the z propagator.
        let z = pauli_embed(Pauli::Z, 0, 1).unwrap();
        let u = propagator(&z, std::f64::consts::FRAC_PI_2).unwrap();
        let minus = u.apply(&plus_state(1).unwrap());
        assert_abs_diff_eq!(minus.expect_sx(), -1.0, epsilon = 1e-12);
    }

    #[test]
    fn collective_expectations_match_dense() {
        let n = 3;
        let s = apply_rotation(&plus_state(n).unwrap(), Axis::PlusY, 0.7);
        let s = apply_rotation(&s, Axis::MinusX, 0.3);
        let e = s.collective_expectations();
        for (k, axis) in [Pauli::X, Pauli::Y, Pauli::Z].into_iter().enumerate() {
            let m = collective_pauli(axis, n).unwrap();
            assert_abs_diff_eq!(e[k], m.expectation(&s) / n as f64, epsilon = 1e-12);
        }
    }

    #[test]
    fn zero_hamiltonian_gives_identity() {
        let h = HermitianOperator::zeros(3).unwrap();
        let u = propagator(&h, 1.7).unwrap();
        assert!(u.unitarity_error() < 1e-14);
        let diff = u.matrix() - DMatrix::<C64>::identity(8, 8);
        assert!(diff.iter().all(|z| z.norm() < 1e-14));
    }

    #[test]
    fn sigma_z_propagator_closed_form() {
        let w = 2.3;
        let dt = 0.37;
        let h = pauli_embed(Pauli::Z, 0, 1).unwrap().scaled(w);
        let u = propagator(&h, dt).unwrap();
        assert_abs_diff_eq!((u.matrix()[(0, 0)] - C64::from_polar(1.0, -w * dt)).norm(), 0.0, epsilon = 1e-14);
        assert_abs_diff_eq!((u.matrix()[(1, 1)] - C64::from_polar(1.0, w * dt)).norm(), 0.0, epsilon = 1e-14);
    }

    #[test]
    fn propagator_rejects_bad_input() {
        let h = pauli_embed(Pauli::Z, 0, 1).unwrap();
        assert!(propagator(&h, -1.0).is_err());
        let mut m = DMatrix::zeros(2, 2);
        m[(0, 1)] = c(1.0);
        assert!(HermitianOperator::new(1, m.clone()).is_err());
        assert!(matches!(propagator(&HermitianOperator::from_raw(1, m), 0.1), Err(Error::NotHermitian(_))));
    }

    #[test]
    fn rotations() {
        let p = plus_state(3).unwrap();
        let same = apply_rotation(&p, Axis::PlusX, 0.0);
        assert_eq!(same, p);
        let r = apply_rotation(&p, Axis::PlusX, std::f64::consts::PI);
        assert_abs_diff_eq!(r.expect_sx(), 1.0, epsilon = 1e-12);
        let twice = apply_rotation(&r, Axis::PlusX, std::f64::consts::PI);
        assert_abs_diff_eq!(twice.overlap(&p).norm(), 1.0, epsilon = 1e-12);
        assert!("z".parse::<Axis>().is_err());
    }

    #[test]
    fn rotation_matches_drive_exponential() {
        // θ = 2Ωt for a drive Ω Σσx.
        let n = 2;
        let omega = 3.0;
        let t = 0.4;
        let h = collective_pauli(Pauli::X, n).unwrap().scaled(omega);
        let s = SpinState::basis(n, 1).unwrap();
        let a = propagator(&h, t).unwrap().apply(&s);
        let b = apply_rotation(&s, Axis::PlusX, 2.0 * omega * t);
        assert_abs_diff_eq!(a.overlap(&b).norm(), 1.0, epsilon = 1e-12);
        let dense = rotation_propagator(Axis::PlusX, 2.0 * omega * t, n).unwrap().apply(&s);
        assert_abs_diff_eq!((dense.amplitudes() - b.amplitudes()).norm(), 0.0, epsilon = 1e-13);
    }

    #[test]
    fn taylor_matches_eigendecomposition() {
        let n = 3;
        let h = collective_pauli(Pauli::X, n)
            .unwrap()
            .scaled(1.3)
            .try_add(&pauli_embed(Pauli::Z, 1, n).unwrap().scaled(-0.4))
            .unwrap();
        let s = SpinState::basis(n, 5).unwrap();
        let exact = propagator(&h, 2.1).unwrap().apply(&s);
        let mut psi: Vec<C64> = s.amplitudes().iter().copied().collect();
        let mut scratch = TaylorScratch::default();
        let m = h.matrix().clone();
        taylor_evolve(&mut psi, 2.1, 4.3, |x, y| {
            let v = &m * DVector::from_column_slice(x);
            y.copy_from_slice(v.as_slice());
        }, &mut scratch);
        let err: f64 = psi.iter().zip(exact.amplitudes().iter()).map(|(a, b)| (a - b).norm()).fold(0.0, f64::max);
        assert!(err < 1e-12, "{err}");
    }
}

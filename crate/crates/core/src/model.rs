//! Rotating-frame Hamiltonians of a dipolar-coupled cluster: the NV
//! two-level-subspace dipolar term, the uniform bath field and the resonant
//! drive.

use std::fmt;
use std::str::FromStr;

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::spin::{check_spins, collective_pauli, magnetization, site_mask, Axis, HermitianOperator, Pauli};

/// Dipolar constant J₀ in s⁻¹·nm³ (bare angular units).
pub const J0_BARE: f64 = 5.2e7;

/// How quoted frequencies enter the Hamiltonian.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AngularUnits {
    /// A quoted "60 Hz" is used as 60 s⁻¹.
    #[default]
    Bare,
    /// A quoted "60 Hz" is used as 2π·60 s⁻¹.
    TwoPi,
}

impl AngularUnits {
    pub fn factor(self) -> f64 {
        match self {
            AngularUnits::Bare => 1.0,
            AngularUnits::TwoPi => std::f64::consts::TAU,
        }
    }

    /// Converts a quoted frequency into the angular value used by the Hamiltonian.
    pub fn angular(self, quoted: f64) -> f64 {
        quoted * self.factor()
    }
}

impl fmt::Display for AngularUnits {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            AngularUnits::Bare => "bare",
            AngularUnits::TwoPi => "two_pi",
        })
    }
}

impl FromStr for AngularUnits {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "bare" => Ok(AngularUnits::Bare),
            "two_pi" | "two-pi" | "2pi" => Ok(AngularUnits::TwoPi),
            other => Err(Error::InvalidParameter(format!("unknown angular units `{other}`"))),
        }
    }
}

/// Symmetric pairwise coupling strengths ω_ij (s⁻¹) with zero diagonal.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingMatrix {
    n_spins: usize,
    w: Vec<Vec<f64>>,
}

impl CouplingMatrix {
    pub fn new(w: Vec<Vec<f64>>) -> Result<Self> {
        let n = w.len();
        check_spins(n)?;
        for (i, row) in w.iter().enumerate() {
            if row.len() != n {
                return Err(Error::InvalidCouplings(format!("row {i} has length {}", row.len())));
            }
            if row[i] != 0.0 {
                return Err(Error::InvalidCouplings(format!("non-zero diagonal at {i}")));
            }
            for (j, &v) in row.iter().enumerate() {
                if !v.is_finite() || v < 0.0 {
                    return Err(Error::InvalidCouplings(format!("w[{i}][{j}] = {v}")));
                }
                if v != w[j][i] {
                    return Err(Error::InvalidCouplings(format!("asymmetric at ({i}, {j})")));
                }
            }
        }
        Ok(Self { n_spins: n, w })
    }

    /// All pairs coupled with the same strength ω₀.
    pub fn equal(n_spins: usize, omega0: f64) -> Result<Self> {
        check_spins(n_spins)?;
        let w = (0..n_spins)
            .map(|i| (0..n_spins).map(|j| if i == j { 0.0 } else { omega0 }).collect())
            .collect();
        Self::new(w)
    }

    /// Builds the matrix from the upper-triangle pair list in (0,1), (0,2), … order.
    pub fn from_pairs(n_spins: usize, pairs: &[f64]) -> Result<Self> {
        check_spins(n_spins)?;
        let expected = n_spins * (n_spins - 1) / 2;
        if pairs.len() != expected {
            return Err(Error::InvalidCouplings(format!(
                "{} pair strengths for {n_spins} spins (expected {expected})",
                pairs.len()
            )));
        }
        let mut w = vec![vec![0.0; n_spins]; n_spins];
        let mut it = pairs.iter();
        for i in 0..n_spins {
            for j in i + 1..n_spins {
                let v = *it.next().unwrap();
                w[i][j] = v;
                w[j][i] = v;
            }
        }
        Self::new(w)
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.w[i][j]
    }

    pub fn rows(&self) -> &[Vec<f64>] {
        &self.w
    }

    /// Upper-triangle pairs (i, j, w_ij) with i < j.
    pub fn pairs(&self) -> impl Iterator<Item = (usize, usize, f64)> + '_ {
        (0..self.n_spins).flat_map(move |i| (i + 1..self.n_spins).map(move |j| (i, j, self.w[i][j])))
    }

    pub fn scaled(&self, s: f64) -> Result<Self> {
        Self::new(self.w.iter().map(|r| r.iter().map(|v| v * s).collect()).collect())
    }

    pub fn max_strength(&self) -> f64 {
        self.pairs().map(|(_, _, w)| w).fold(0.0, f64::max)
    }
}

/// Continuous resonant drive Ω Σ σ^axis.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriveSettings {
    pub omega: f64,
    pub axis: Axis,
}

impl DriveSettings {
    pub fn new(omega: f64, axis: Axis) -> Result<Self> {
        if !(omega >= 0.0) || !omega.is_finite() {
            return Err(Error::InvalidParameter(format!("drive amplitude {omega} must be finite and >= 0")));
        }
        Ok(Self { omega, axis })
    }
}

/// H = Σ_{i<j} w_ij [σ⃗_i·σ⃗_j − 2σz_iσz_j]
pub fn dipolar_hamiltonian(couplings: &CouplingMatrix) -> Result<HermitianOperator> {
    let h = ClusterHamiltonian::new(couplings);
    Ok(h.to_operator(0.0, None))
}

/// Isotropic part Σ_{i<j} w_ij σ⃗_i·σ⃗_j.
pub fn isotropic_hamiltonian(couplings: &CouplingMatrix) -> Result<HermitianOperator> {
    let n = couplings.n_spins();
    let dim = 1 << n;
    let mut m = DMatrix::<C64>::zeros(dim, dim);
    for (i, j, w) in couplings.pairs() {
        let (mi, mj) = (site_mask(i, n), site_mask(j, n));
        for idx in 0..dim {
            let same = (idx & mi == 0) == (idx & mj == 0);
            if same {
                m[(idx, idx)] += w;
            } else {
                m[(idx, idx)] -= w;
                m[(idx ^ mi ^ mj, idx)] += 2.0 * w;
            }
        }
    }
    Ok(HermitianOperator::from_raw(n, m))
}

/// H = B Σ_i σz_i
pub fn bath_hamiltonian(b_field: f64, n_spins: usize) -> Result<HermitianOperator> {
    if !b_field.is_finite() {
        return Err(Error::InvalidParameter(format!("bath field {b_field} is not finite")));
    }
    Ok(collective_pauli(Pauli::Z, n_spins)?.scaled(b_field))
}

/// H = Ω Σ_i σ^axis_i with the axis sign folded into Ω.
pub fn drive_hamiltonian(settings: &DriveSettings, n_spins: usize) -> Result<HermitianOperator> {
    Ok(collective_pauli(settings.axis.pauli(), n_spins)?.scaled(settings.omega * settings.axis.sign()))
}

/// Elementwise sum of the dipolar, bath and drive terms.
pub fn total_hamiltonian(
    dipolar: &HermitianOperator,
    bath: &HermitianOperator,
    drive: &HermitianOperator,
) -> Result<HermitianOperator> {
    dipolar.try_add(bath)?.try_add(drive)
}

/// Matrix-free form of the cluster Hamiltonian
/// H = H_dipolar + B Σσz + Ω Σσ^axis acting directly on amplitude vectors.
#[derive(Clone, Debug)]
pub struct ClusterHamiltonian {
    n_spins: usize,
    /// ⟨idx| H_dipolar |idx⟩
    dipolar_diag: Vec<f64>,
    /// (flip mask, 2·w_ij) for every pair.
    flips: Vec<(usize, usize, f64)>,
    magnetization: Vec<f64>,
    dipolar_bound: f64,
}

impl ClusterHamiltonian {
    pub fn new(couplings: &CouplingMatrix) -> Self {
        let n = couplings.n_spins();
        let dim = 1 << n;
        let mut diag = vec![0.0; dim];
        let mut flips = Vec::new();
        let mut bound = 0.0;
        for (i, j, w) in couplings.pairs() {
            if w == 0.0 {
                continue;
            }
            let (mi, mj) = (site_mask(i, n), site_mask(j, n));
            for (idx, d) in diag.iter_mut().enumerate() {
                let same = (idx & mi == 0) == (idx & mj == 0);
                // σ⃗·σ⃗ − 2σzσz has diagonal −σzσz
                *d += if same { -w } else { w };
            }
            flips.push((mi, mj, 2.0 * w));
            bound += 3.0 * w;
        }
        let magnetization = (0..dim).map(|idx| magnetization(idx, n)).collect();
        Self { n_spins: n, dipolar_diag: diag, flips, magnetization, dipolar_bound: bound }
    }

    pub fn n_spins(&self) -> usize {
        self.n_spins
    }

    pub fn dim(&self) -> usize {
        1 << self.n_spins
    }

    /// Σσz eigenvalue per basis index.
    pub fn magnetization(&self) -> &[f64] {
        &self.magnetization
    }

    /// Upper bound on ‖H‖ for the given bath field and drive.
    pub fn norm_bound(&self, b_field: f64, drive: Option<&DriveSettings>) -> f64 {
        let n = self.n_spins as f64;
        self.dipolar_bound + n * b_field.abs() + drive.map_or(0.0, |d| n * d.omega)
    }

    /// y = H x
    pub fn apply(&self, b_field: f64, drive: Option<&DriveSettings>, x: &[C64], y: &mut [C64]) {
        for (idx, out) in y.iter_mut().enumerate() {
            let mut acc = x[idx] * (self.dipolar_diag[idx] + b_field * self.magnetization[idx]);
            for &(mi, mj, w2) in &self.flips {
                if (idx & mi == 0) != (idx & mj == 0) {
                    acc += x[idx ^ mi ^ mj] * w2;
                }
            }
            *out = acc;
        }
        if let Some(d) = drive {
            if d.omega == 0.0 {
                return;
            }
            let amp = d.omega * d.axis.sign();
            for site in 0..self.n_spins {
                let m = site_mask(site, self.n_spins);
                for (idx, out) in y.iter_mut().enumerate() {
                    let partner = x[idx ^ m];
                    *out += match d.axis.pauli() {
                        Pauli::X => partner * amp,
                        // σy: ⟨up|σy|down⟩ = −i, ⟨down|σy|up⟩ = +i
                        _ => {
                            if idx & m == 0 {
                                partner * C64::new(0.0, -amp)
                            } else {
                                partner * C64::new(0.0, amp)
                            }
                        }
                    };
                }
            }
        }
    }

    /// Dense matrix of H for the given bath field and drive.
    pub fn to_operator(&self, b_field: f64, drive: Option<&DriveSettings>) -> HermitianOperator {
        let dim = self.dim();
        let mut m = DMatrix::<C64>::zeros(dim, dim);
        let mut e = vec![C64::new(0.0, 0.0); dim];
        let mut col = vec![C64::new(0.0, 0.0); dim];
        for j in 0..dim {
            e.iter_mut().for_each(|z| *z = C64::new(0.0, 0.0));
            e[j] = C64::new(1.0, 0.0);
            self.apply(b_field, drive, &e, &mut col);
            for (i, v) in col.iter().enumerate() {
                m[(i, j)] = *v;
            }
        }
        HermitianOperator::from_raw(self.n_spins, m)
    }
}

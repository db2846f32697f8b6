//! Closed-form dynamics of a cluster in which every pair has the same coupling.
//!
//! With all couplings equal the dipolar Hamiltonian reduces, on the fully
//! symmetric sector that contains the initial state, to −ω₀M² with M the total
//! σz. ⟨Sx⟩ is then a binomially weighted sum of cosines at 4ω₀(2k − n − 1).

use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const MAX_ANALYTIC_SPINS: usize = 10_000;

/// One oscillation component: angular frequency `freq_multiple·ω₀`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumLine {
    pub freq_multiple: u64,
    pub weight: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EqualCouplingSpectrum {
    /// Non-zero frequencies, ascending.
    pub lines: Vec<SpectrumLine>,
    /// Weight of the static component (non-zero only for odd n).
    pub dc: f64,
}

impl EqualCouplingSpectrum {
    pub fn total_weight(&self) -> f64 {
        self.dc + self.lines.iter().map(|l| l.weight).sum::<f64>()
    }

    pub fn weight_at(&self, freq_multiple: u64) -> f64 {
        self.lines
            .iter()
            .find(|l| l.freq_multiple == freq_multiple)
            .map_or(0.0, |l| l.weight)
    }

    /// Sum of the weights of lines strictly below `freq_multiple`, plus DC.
    pub fn weight_below(&self, freq_multiple: f64) -> f64 {
        self.dc
            + self
                .lines
                .iter()
                .filter(|l| (l.freq_multiple as f64) < freq_multiple)
                .map(|l| l.weight)
                .sum::<f64>()
    }

    /// CSV with header `freq_multiple,weight` and a trailing `DC,value` row.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "freq_multiple,weight")?;
        for l in &self.lines {
            writeln!(w, "{},{:e}", l.freq_multiple, l.weight)?;
        }
        writeln!(w, "DC,{:e}", self.dc)?;
        Ok(())
    }
}

fn check_n(n: usize) -> Result<()> {
    if !(2..=MAX_ANALYTIC_SPINS).contains(&n) {
        return Err(Error::InvalidParameter(format!(
            "cluster size {n} outside 2..={MAX_ANALYTIC_SPINS}"
        )));
    }
    Ok(())
}

/// C(n−1, k)/2^{n−1} for k = 0..n, built by ratios outward from the centre so
/// nothing overflows; tails that underflow are genuinely negligible.
fn binomial_weights(n: usize) -> Vec<f64> {
    let m = n - 1;
    let mut w = vec![0.0; n];
    let c = m / 2;
    w[c] = 1.0;
    for k in c + 1..=m {
        w[k] = w[k - 1] * (m - k + 1) as f64 / k as f64;
    }
    for k in (0..c).rev() {
        w[k] = w[k + 1] * (k + 1) as f64 / (m - k) as f64;
    }
    let total: f64 = w.iter().sum();
    w.iter_mut().for_each(|x| *x /= total);
    w
}

/// Line weights and DC for an n-spin equal-coupling cluster.
pub fn equal_coupling_spectrum(n: usize) -> Result<EqualCouplingSpectrum> {
    check_n(n)?;
    let w = binomial_weights(n);
    let mut dc = 0.0;
    let mut lines: Vec<SpectrumLine> = Vec::new();
    // k and n−1−k give the same |2k − n + 1|; walk from the top down so that
    // frequencies come out ascending.
    for k in (0..n).rev() {
        let diff = 2 * k as i64 - (n as i64 - 1);
        if diff < 0 {
            break;
        }
        if diff == 0 {
            dc = w[k];
        } else {
            lines.push(SpectrumLine { freq_multiple: 4 * diff as u64, weight: w[k] + w[n - 1 - k] });
        }
    }
    lines.sort_by_key(|l| l.freq_multiple);
    Ok(EqualCouplingSpectrum { lines, dc })
}

/// ⟨Sx⟩(t) for n spins with common coupling ω₀.
pub fn equal_coupling_sx(n: usize, omega0: f64, t: f64) -> Result<f64> {
    let spec = equal_coupling_spectrum(n)?;
    Ok(evaluate(&spec, omega0, t))
}

/// Evaluates on many times, reusing the spectrum.
pub fn equal_coupling_trace(n: usize, omega0: f64, times: &[f64]) -> Result<Vec<f64>> {
    let spec = equal_coupling_spectrum(n)?;
    Ok(times.iter().map(|&t| evaluate(&spec, omega0, t)).collect())
}

fn evaluate(spec: &EqualCouplingSpectrum, omega0: f64, t: f64) -> f64 {
    let mut order: Vec<&SpectrumLine> = spec.lines.iter().collect();
    order.sort_by(|a, b| a.weight.total_cmp(&b.weight));
    let osc: f64 = order
        .iter()
        .map(|l| l.weight * (l.freq_multiple as f64 * omega0 * t).cos())
        .sum();
    (spec.dc + osc).clamp(-1.0, 1.0)
}

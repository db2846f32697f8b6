//! Spectra of ⟨Sx⟩ traces, typical-strength extraction and decay fits.

use std::f64::consts::PI;
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use num_complex::Complex64 as C64;
use rustfft::FftPlanner;
use serde::{Deserialize, Serialize};

use crate::engine::TraceResult;
use crate::error::{Error, Result};

pub const MIN_SPECTRUM_SAMPLES: usize = 64;
const ZERO_PAD: usize = 4;

/// One-sided magnitude spectrum, scaled so that a cosine of amplitude A
/// produces a peak of height ≈ A.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SpectrumEstimate {
    pub omega: Vec<f64>,
    pub omega_over_omega0: Vec<f64>,
    pub magnitude: Vec<f64>,
    pub omega0: f64,
    /// Samples in the original trace.
    n_samples: usize,
    /// Σw and Σw² of the window, for power normalization.
    window_sum: f64,
    window_sq_sum: f64,
}

impl SpectrumEstimate {
    /// Bin spacing in ω/ω₀.
    pub fn bin_width(&self) -> f64 {
        self.omega_over_omega0.get(1).copied().unwrap_or(0.0)
    }

    /// Σ magnitude over bins within ±`half_width` of `multiple`, times the
    /// bin width (ω/ω₀ axis).
    pub fn band_area(&self, multiple: f64, half_width: f64) -> f64 {
        let area: f64 = self
            .omega_over_omega0
            .iter()
            .zip(&self.magnitude)
            .filter(|(x, _)| (**x - multiple).abs() <= half_width)
            .map(|(_, m)| m)
            .sum();
        area * self.bin_width()
    }

    /// Mean power of the (mean-subtracted) signal estimated from the spectrum,
    /// corrected for the window.
    pub fn total_power(&self) -> f64 {
        let m = (self.magnitude.len() - 1) * 2;
        let scale = self.window_sum / 2.0;
        let last = self.magnitude.len() - 1;
        let two_sided: f64 = self
            .magnitude
            .iter()
            .enumerate()
            .map(|(k, a)| {
                let p = (a * scale).powi(2);
                if k == 0 || k == last {
                    p
                } else {
                    2.0 * p
                }
            })
            .sum();
        two_sided / (m as f64 * self.window_sq_sum)
    }

    /// Dominant peak in ω/ω₀ units, refined by a parabola through three bins.
    pub fn dominant_peak(&self) -> Result<f64> {
        // skip the lowest bins where a slow envelope leaks through the window
        let skip = 2 * ZERO_PAD;
        let n = self.magnitude.len();
        if n < skip + 3 {
            return Err(Error::NoDominantPeak);
        }
        let (k, &peak) = self.magnitude[skip..n - 1]
            .iter()
            .enumerate()
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(k, v)| (k + skip, v))
            .ok_or(Error::NoDominantPeak)?;
        let mut sorted = self.magnitude.clone();
        sorted.sort_by(f64::total_cmp);
        let median = sorted[sorted.len() / 2];
        if !(peak > 1e-12) || peak < 10.0 * median {
            return Err(Error::NoDominantPeak);
        }
        let (a, b, c) = (self.magnitude[k - 1], peak, self.magnitude[k + 1]);
        let denom = a - 2.0 * b + c;
        let shift = if denom.abs() > 0.0 { 0.5 * (a - c) / denom } else { 0.0 };
        Ok(self.omega_over_omega0[k] + shift.clamp(-0.5, 0.5) * self.bin_width())
    }

    /// CSV with header `omega_rad_s,omega_over_omega0,magnitude`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "omega_rad_s,omega_over_omega0,magnitude")?;
        for k in 0..self.omega.len() {
            writeln!(w, "{:e},{:e},{:e}", self.omega[k], self.omega_over_omega0[k], self.magnitude[k])?;
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_samples
    }
}

fn uniform_step(times: &[f64]) -> Result<f64> {
    let n = times.len();
    let dt = (times[n - 1] - times[0]) / (n - 1) as f64;
    if !(dt > 0.0) {
        return Err(Error::NonUniformGrid);
    }
    for w in times.windows(2) {
        if ((w[1] - w[0]) - dt).abs() > 1e-6 * dt {
            return Err(Error::NonUniformGrid);
        }
    }
    Ok(dt)
}

/// Hann-windowed, ×4 zero-padded magnitude spectrum of sx_mean minus its mean.
pub fn fourier_spectrum(trace: &TraceResult, omega0: f64) -> Result<SpectrumEstimate> {
    spectrum_of(&trace.times, &trace.sx_mean, omega0)
}

pub fn spectrum_of(times: &[f64], values: &[f64], omega0: f64) -> Result<SpectrumEstimate> {
    let n = values.len();
    if n < MIN_SPECTRUM_SAMPLES || times.len() != n {
        return Err(Error::InvalidParameter(format!(
            "spectrum needs at least {MIN_SPECTRUM_SAMPLES} samples on a matching time axis"
        )));
    }
    if !(omega0 > 0.0) {
        return Err(Error::InvalidParameter(format!("omega0 = {omega0} must be positive")));
    }
    let dt = uniform_step(times)?;
    let mean = values.iter().sum::<f64>() / n as f64;
    let window: Vec<f64> = (0..n).map(|k| 0.5 * (1.0 - (2.0 * PI * k as f64 / (n - 1) as f64).cos())).collect();
    let m = ZERO_PAD * n;
    let mut buf: Vec<C64> = vec![C64::new(0.0, 0.0); m];
    for k in 0..n {
        buf[k] = C64::new((values[k] - mean) * window[k], 0.0);
    }
    FftPlanner::new().plan_fft_forward(m).process(&mut buf);
    let window_sum: f64 = window.iter().sum();
    let window_sq_sum: f64 = window.iter().map(|w| w * w).sum();
    let half = m / 2;
    let omega: Vec<f64> = (0..=half).map(|k| 2.0 * PI * k as f64 / (m as f64 * dt)).collect();
    Ok(SpectrumEstimate {
        omega_over_omega0: omega.iter().map(|w| w / omega0).collect(),
        omega,
        magnitude: buf[..=half].iter().map(|z| 2.0 * z.norm() / window_sum).collect(),
        omega0,
        n_samples: n,
        window_sum,
        window_sq_sum,
    })
}

/// ω₀ estimate and its ±25 % band.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TypicalStrength {
    pub omega0: f64,
    pub uncertainty: f64,
}

/// The slowest line of a cluster sits at 4ω₀, so ω₀ ≈ peak/4 ± peak/16.
pub fn extract_typical_strength(spectrum: &SpectrumEstimate) -> Result<TypicalStrength> {
    let peak = spectrum.dominant_peak()? * spectrum.omega0;
    Ok(TypicalStrength { omega0: peak / 4.0, uncertainty: peak / 16.0 })
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum DecayModel {
    Exponential,
    Stretched,
}

impl fmt::Display for DecayModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            DecayModel::Exponential => "exponential",
            DecayModel::Stretched => "stretched",
        })
    }
}

impl FromStr for DecayModel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "exponential" | "exp" => Ok(DecayModel::Exponential),
            "stretched" => Ok(DecayModel::Stretched),
            _ => Err(Error::InvalidParameter(format!("unknown decay model {s:?}"))),
        }
    }
}

/// Least-squares fit of exp(−(t/T)^p).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct DecayFit {
    pub model: DecayModel,
    #[serde(rename = "T_seconds")]
    pub t_seconds: f64,
    pub p: f64,
    /// RMS deviation between trace and fit.
    pub residual: f64,
}

impl DecayFit {
    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

/// Minimizes a unimodal function on [lo, hi].
fn golden_section<F: Fn(f64) -> f64>(f: F, mut lo: f64, mut hi: f64, iters: usize) -> f64 {
    let g = 0.5 * (5f64.sqrt() - 1.0);
    let mut x1 = hi - g * (hi - lo);
    let mut x2 = lo + g * (hi - lo);
    let (mut f1, mut f2) = (f(x1), f(x2));
    for _ in 0..iters {
        if f1 < f2 {
            hi = x2;
            x2 = x1;
            f2 = f1;
            x1 = hi - g * (hi - lo);
            f1 = f(x1);
        } else {
            lo = x1;
            x1 = x2;
            f1 = f2;
            x2 = lo + g * (hi - lo);
            f2 = f(x2);
        }
    }
    0.5 * (lo + hi)
}

pub fn fit_decay(trace: &TraceResult, model: DecayModel) -> Result<DecayFit> {
    fit_decay_samples(&trace.times, &trace.sx_mean, model)
}

pub fn fit_decay_samples(times: &[f64], values: &[f64], model: DecayModel) -> Result<DecayFit> {
    if times.len() != values.len() || times.len() < 3 {
        return Err(Error::InvalidParameter("decay fit needs at least 3 samples".into()));
    }
    let level = (-1.0f64).exp();
    let k = values.iter().position(|&v| v < level).ok_or(Error::NoDecay)?;
    if k == 0 {
        return Err(Error::NoDecay);
    }
    // fit in units of the 1/e crossing time so the result scales with the time axis
    let t_e = times[k];
    let u: Vec<f64> = times.iter().map(|t| t / t_e).collect();
    let sse = |tau: f64, p: f64| -> f64 {
        u.iter()
            .zip(values)
            .map(|(x, y)| (y - (-(x / tau).powf(p)).exp()).powi(2))
            .sum()
    };
    let best_tau = |p: f64| golden_section(|lt| sse(lt.exp(), p), (0.05f64).ln(), (20.0f64).ln(), 120).exp();
    let (tau, p) = match model {
        DecayModel::Exponential => (best_tau(1.0), 1.0),
        DecayModel::Stretched => {
            let p = golden_section(|p| sse(best_tau(p), p), 0.1, 3.0, 80);
            (best_tau(p), p)
        }
    };
    Ok(DecayFit {
        model,
        t_seconds: tau * t_e,
        p,
        residual: (sse(tau, p) / u.len() as f64).sqrt(),
    })
}

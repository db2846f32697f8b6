//! Ornstein–Uhlenbeck bath field generated with the exact update rule, so the
//! sampled statistics do not depend on the step size.

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// OU bath parameters: correlation time τc (s) and coupling strength b (s⁻¹).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseParams {
    pub tau_c: f64,
    pub b: f64,
}

impl NoiseParams {
    pub fn new(tau_c: f64, b: f64) -> Result<Self> {
        if !(tau_c > 0.0) || !tau_c.is_finite() {
            return Err(Error::InvalidParameter(format!("tau_c = {tau_c} must be positive")));
        }
        if !(b >= 0.0) || !b.is_finite() {
            return Err(Error::InvalidParameter(format!("b = {b} must be non-negative")));
        }
        Ok(Self { tau_c, b })
    }

    /// τc = 5 μs, b = 20 kHz.
    pub fn paper_bath() -> Self {
        Self { tau_c: 5e-6, b: 2e4 }
    }

    /// Motional-narrowing dephasing time 1/(b²τc).
    pub fn t2_star(&self) -> f64 {
        1.0 / (self.b * self.b * self.tau_c)
    }

    /// Standard deviation of the stationary field distribution.
    pub fn stationary_std(&self) -> f64 {
        0.5 * self.b
    }
}

/// Uniformly sampled bath field B(t_k), t_k = k·dt.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseTrajectory {
    pub dt: f64,
    pub values: Vec<f64>,
    pub seed: u64,
}

impl NoiseTrajectory {
    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    /// CSV with header `t_seconds,B_rad_per_s`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_seconds,B_rad_per_s")?;
        for (k, b) in self.values.iter().enumerate() {
            writeln!(w, "{:e},{:e}", k as f64 * self.dt, b)?;
        }
        Ok(())
    }
}

/// One exact OU update: B·e^{−dt/τc} + (b/2)·g·√(1 − e^{−2dt/τc}).
pub fn ou_step(b_field: f64, dt: f64, params: &NoiseParams, gauss: f64) -> Result<f64> {
    if !(dt > 0.0) {
        return Err(Error::InvalidParameter(format!("dt = {dt} must be positive")));
    }
    let (decay, kick) = step_coefficients(dt, params);
    Ok(b_field * decay + kick * gauss)
}

fn step_coefficients(dt: f64, params: &NoiseParams) -> (f64, f64) {
    let decay = (-dt / params.tau_c).exp();
    // 1 − e^{−2x} without cancellation for small x
    let var_factor = -(-2.0 * dt / params.tau_c).exp_m1();
    (decay, params.stationary_std() * var_factor.sqrt())
}

/// Samples B over [0, T] on a uniform grid; B(0) is drawn from the stationary
/// distribution N(0, (b/2)²).
pub fn ou_trajectory(total_time: f64, dt: f64, params: &NoiseParams, seed: u64) -> Result<NoiseTrajectory> {
    if !(dt > 0.0) || !(total_time >= dt) || !total_time.is_finite() {
        return Err(Error::InvalidParameter(format!(
            "invalid time bounds T = {total_time}, dt = {dt}"
        )));
    }
    let steps = (total_time / dt - 1e-9).ceil() as usize;
    Ok(ou_trajectory_steps(steps + 1, dt, params, seed))
}

pub(crate) fn ou_trajectory_steps(samples: usize, dt: f64, params: &NoiseParams, seed: u64) -> NoiseTrajectory {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (decay, kick) = step_coefficients(dt, params);
    let mut values = Vec::with_capacity(samples);
    let g: f64 = rng.sample(StandardNormal);
    let mut b = params.stationary_std() * g;
    for _ in 0..samples {
        values.push(b);
        let g: f64 = rng.sample(StandardNormal);
        b = b * decay + kick * g;
    }
    NoiseTrajectory { dt, values, seed }
}

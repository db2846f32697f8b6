//! Control schedules (spin-lock, CPMG, XY8, WAHUHA, CPMG with embedded
//! WAHUHA blocks) and the zeroth-order average Hamiltonian of a schedule.

use std::f64::consts::{FRAC_PI_2, PI};

use nalgebra::DMatrix;
use num_complex::Complex64 as C64;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::DriveSettings;
use crate::spin::{pauli_embed, rotation_propagator, Axis, HermitianOperator, Pauli, UnitaryPropagator};

/// Relative tolerance for schedule timing comparisons.
const TIME_TOL: f64 = 1e-12;

/// A rotation of `angle` about `axis`. Zero duration is an ideal pulse;
/// otherwise the rotation is driven at Ω = angle / (2·duration).
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct PulseEvent {
    #[serde(rename = "start_s")]
    pub start: f64,
    #[serde(rename = "duration_s")]
    pub duration: f64,
    pub axis: Axis,
    #[serde(rename = "angle_rad")]
    pub angle: f64,
}

impl PulseEvent {
    pub fn ideal(at: f64, axis: Axis, angle: f64) -> Self {
        Self { start: at, duration: 0.0, axis, angle }
    }

    /// Pulse of `duration` centered on `center`.
    pub fn centered(center: f64, duration: f64, axis: Axis, angle: f64) -> Self {
        Self { start: center - 0.5 * duration, duration, axis, angle }
    }

    pub fn end(&self) -> f64 {
        self.start + self.duration
    }

    pub fn is_ideal(&self) -> bool {
        self.duration == 0.0
    }

    /// Drive amplitude realizing the rotation over the pulse duration.
    pub fn drive_amplitude(&self) -> Option<f64> {
        (self.duration > 0.0).then(|| self.angle / (2.0 * self.duration))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
struct DriveRecord {
    omega_rad_s: f64,
    axis: Axis,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
struct ScheduleRecord {
    total_time_s: f64,
    events: Vec<PulseEvent>,
    drive: Option<DriveRecord>,
}

/// Timed control events over [0, total_time], optionally with a continuous
/// drive active for the whole window.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ScheduleRecord", into = "ScheduleRecord")]
pub struct PulseSchedule {
    total_time: f64,
    events: Vec<PulseEvent>,
    continuous_drive: Option<DriveSettings>,
}

impl TryFrom<ScheduleRecord> for PulseSchedule {
    type Error = Error;

    fn try_from(r: ScheduleRecord) -> Result<Self> {
        let drive = r.drive.map(|d| DriveSettings::new(d.omega_rad_s, d.axis)).transpose()?;
        PulseSchedule::new(r.total_time_s, r.events, drive)
    }
}

impl From<PulseSchedule> for ScheduleRecord {
    fn from(s: PulseSchedule) -> Self {
        ScheduleRecord {
            total_time_s: s.total_time,
            events: s.events,
            drive: s.continuous_drive.map(|d| DriveRecord { omega_rad_s: d.omega, axis: d.axis }),
        }
    }
}

impl PulseSchedule {
    pub fn new(total_time: f64, events: Vec<PulseEvent>, continuous_drive: Option<DriveSettings>) -> Result<Self> {
        let s = Self { total_time, events, continuous_drive };
        s.validate()?;
        Ok(s)
    }

    /// No control at all.
    pub fn free(total_time: f64) -> Result<Self> {
        Self::new(total_time, Vec::new(), None)
    }

    pub fn total_time(&self) -> f64 {
        self.total_time
    }

    pub fn events(&self) -> &[PulseEvent] {
        &self.events
    }

    pub fn continuous_drive(&self) -> Option<&DriveSettings> {
        self.continuous_drive.as_ref()
    }

    pub fn pulse_count(&self) -> usize {
        self.events.len()
    }

    pub fn has_finite_pulses(&self) -> bool {
        self.events.iter().any(|e| !e.is_ideal())
    }

    /// Checks ordering, overlap and bounds.
    pub fn validate(&self) -> Result<()> {
        let t = self.total_time;
        if !(t > 0.0) || !t.is_finite() {
            return Err(Error::InvalidParameter(format!("total time {t} must be positive")));
        }
        let tol = TIME_TOL * t;
        for (k, e) in self.events.iter().enumerate() {
            if !(e.duration >= 0.0) || !e.duration.is_finite() || !e.angle.is_finite() || !e.start.is_finite() {
                return Err(Error::InvalidParameter(format!("event {k} has invalid timing or angle")));
            }
            if e.start < -tol || e.end() > t + tol {
                return Err(Error::ScheduleOverlap(format!(
                    "event {k} [{:e}, {:e}] lies outside [0, {t:e}]",
                    e.start,
                    e.end()
                )));
            }
        }
        for (k, w) in self.events.windows(2).enumerate() {
            if w[1].start < w[0].start - tol {
                return Err(Error::ScheduleOverlap(format!("events {k} and {} are out of order", k + 1)));
            }
            if w[1].start < w[0].end() - tol {
                return Err(Error::ScheduleOverlap(format!(
                    "event {} starts at {:e} before event {k} ends at {:e}",
                    k + 1,
                    w[1].start,
                    w[0].end()
                )));
            }
        }
        Ok(())
    }

    /// Copy with every time multiplied by `s` and every drive amplitude by 1/s.
    pub fn time_scaled(&self, s: f64) -> Result<Self> {
        let events = self
            .events
            .iter()
            .map(|e| PulseEvent { start: e.start * s, duration: e.duration * s, ..*e })
            .collect();
        let drive = self.continuous_drive.map(|d| DriveSettings { omega: d.omega / s, axis: d.axis });
        Self::new(self.total_time * s, events, drive)
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }

    pub fn from_json(s: &str) -> Result<Self> {
        Ok(serde_json::from_str(s)?)
    }
}

/// Continuous +x drive over the whole window.
pub fn build_spinlock(omega: f64, total_time: f64) -> Result<PulseSchedule> {
    PulseSchedule::new(total_time, Vec::new(), Some(DriveSettings::new(omega, Axis::PlusX)?))
}

fn check_train(count: usize, tau: f64, pulse_duration: f64) -> Result<()> {
    if count == 0 {
        return Err(Error::InvalidParameter("pulse train needs at least one pulse".into()));
    }
    if !(tau > 0.0) || !(pulse_duration >= 0.0) {
        return Err(Error::InvalidParameter(format!("invalid spacing {tau} or duration {pulse_duration}")));
    }
    if tau <= pulse_duration {
        return Err(Error::ScheduleOverlap(format!(
            "pulse duration {pulse_duration:e} s does not fit in spacing {tau:e} s"
        )));
    }
    Ok(())
}

fn pi_train(axes: impl Iterator<Item = Axis>, tau: f64, pulse_duration: f64) -> Vec<PulseEvent> {
    axes.enumerate()
        .map(|(k, axis)| PulseEvent::centered((k as f64 + 0.5) * tau, pulse_duration, axis, PI))
        .collect()
}

/// [τ/2 − π_x − τ/2] × n
pub fn build_cpmg(n_pulses: usize, tau: f64, pulse_duration: f64) -> Result<PulseSchedule> {
    check_train(n_pulses, tau, pulse_duration)?;
    let events = pi_train(std::iter::repeat_n(Axis::PlusX, n_pulses), tau, pulse_duration);
    PulseSchedule::new(n_pulses as f64 * tau, events, None)
}

pub const XY8_AXES: [Axis; 8] = [
    Axis::PlusX,
    Axis::PlusY,
    Axis::PlusX,
    Axis::PlusY,
    Axis::PlusY,
    Axis::PlusX,
    Axis::PlusY,
    Axis::PlusX,
];

/// XYXYYXYX π pulses with CPMG timing.
pub fn build_xy8(n_reps: usize, tau: f64, pulse_duration: f64) -> Result<PulseSchedule> {
    check_train(n_reps, tau, pulse_duration)?;
    let n = 8 * n_reps;
    let events = pi_train(XY8_AXES.iter().copied().cycle().take(n), tau, pulse_duration);
    PulseSchedule::new(n as f64 * tau, events, None)
}

/// WAHUHA π/2 pulse axes in order of application.
pub const WAHUHA_AXES: [Axis; 4] = [Axis::MinusX, Axis::PlusY, Axis::MinusY, Axis::PlusX];

/// Nominal pulse instants within one 6τ cycle, in units of τ.
const WAHUHA_OFFSETS: [f64; 4] = [1.0, 2.0, 4.0, 5.0];

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WahuhaOptions {
    /// Which of the four pulses (0-based) is shifted by ε·τ.
    pub shifted_pulse: usize,
}

impl Default for WahuhaOptions {
    fn default() -> Self {
        Self { shifted_pulse: 1 }
    }
}

/// Delays (τ, τ, 2τ, τ, τ) with π/2 pulses about (−x, +y, −y, +x); cycle 6τ.
pub fn build_wahuha(n_reps: usize, tau: f64, pulse_duration: f64, epsilon: f64) -> Result<PulseSchedule> {
    build_wahuha_with(n_reps, tau, pulse_duration, epsilon, WahuhaOptions::default())
}

pub fn build_wahuha_with(
    n_reps: usize,
    tau: f64,
    pulse_duration: f64,
    epsilon: f64,
    options: WahuhaOptions,
) -> Result<PulseSchedule> {
    check_train(n_reps, tau, pulse_duration)?;
    if !(epsilon.abs() < 1.0) {
        return Err(Error::InvalidParameter(format!("|ε| = {} must be < 1", epsilon.abs())));
    }
    if options.shifted_pulse >= 4 {
        return Err(Error::InvalidParameter(format!("shifted pulse index {} >= 4", options.shifted_pulse)));
    }
    let events = wahuha_block(0.0, n_reps, tau, pulse_duration, epsilon, options.shifted_pulse);
    PulseSchedule::new(6.0 * tau * n_reps as f64, events, None)
}

fn wahuha_block(start: f64, n_reps: usize, tau: f64, d: f64, epsilon: f64, shifted: usize) -> Vec<PulseEvent> {
    let mut events = Vec::with_capacity(4 * n_reps);
    for c in 0..n_reps {
        let cycle = start + 6.0 * tau * c as f64;
        for (k, (&axis, &off)) in WAHUHA_AXES.iter().zip(&WAHUHA_OFFSETS).enumerate() {
            let shift = if k == shifted { epsilon } else { 0.0 };
            events.push(PulseEvent::centered(cycle + (off + shift) * tau, d, axis, FRAC_PI_2));
        }
    }
    events
}

/// CPMG backbone of `n_cpmg` cells of length τ_cpmg. Each cell holds
/// `wahuha_reps_per_gap` WAHUHA cycles followed by a π_x pulse centered in a
/// final free slot; the WAHUHA spacing is τ_cpmg / (6·reps + 1). With zero
/// repetitions this is plain CPMG.
pub fn build_combined(n_cpmg: usize, wahuha_reps_per_gap: usize, tau_cpmg: f64, pulse_duration: f64) -> Result<PulseSchedule> {
    check_train(n_cpmg, tau_cpmg, pulse_duration)?;
    let reps = wahuha_reps_per_gap;
    let tau_w = tau_cpmg / (6 * reps + 1) as f64;
    if reps > 0 && tau_w <= pulse_duration {
        return Err(Error::ScheduleOverlap(format!(
            "{reps} WAHUHA cycles with {pulse_duration:e} s pulses do not fit in a {tau_cpmg:e} s gap"
        )));
    }
    let mut events = Vec::with_capacity(n_cpmg * (1 + 4 * reps));
    for k in 0..n_cpmg {
        let cell = k as f64 * tau_cpmg;
        events.extend(wahuha_block(cell, reps, tau_w, pulse_duration, 0.0, 0));
        let pi_at = cell + tau_cpmg - 0.5 * tau_w;
        events.push(PulseEvent::centered(pi_at, pulse_duration, Axis::PlusX, PI));
    }
    PulseSchedule::new(n_cpmg as f64 * tau_cpmg, events, None)
}

/// Zeroth-order average Hamiltonian (1/T) Σ_k Δt_k U_k† H U_k, where U_k is
/// the product of all pulses applied before free interval k.
pub fn average_hamiltonian(schedule: &PulseSchedule, h: &HermitianOperator) -> Result<HermitianOperator> {
    if schedule.has_finite_pulses() {
        return Err(Error::FiniteWidthUnsupported(
            "average Hamiltonian is computed for ideal pulses only".into(),
        ));
    }
    if schedule.continuous_drive().is_some() {
        return Err(Error::InvalidParameter("average Hamiltonian of a continuously driven schedule".into()));
    }
    let n = h.n_spins();
    let dim = h.dim();
    let mut acc = DMatrix::<C64>::zeros(dim, dim);
    let mut frame = UnitaryPropagator::identity(n)?;
    let mut t_prev = 0.0;
    let add_interval = |frame: &UnitaryPropagator, dt: f64, acc: &mut DMatrix<C64>| {
        if dt > 0.0 {
            let u = frame.matrix();
            *acc += (u.adjoint() * h.matrix() * u) * C64::new(dt, 0.0);
        }
    };
    for e in schedule.events() {
        add_interval(&frame, e.start - t_prev, &mut acc);
        frame = rotation_propagator(e.axis, e.angle, n)?.after(&frame);
        t_prev = e.start;
    }
    add_interval(&frame, schedule.total_time() - t_prev, &mut acc);
    acc /= C64::new(schedule.total_time(), 0.0);
    // symmetrize away rounding
    let herm = (&acc + acc.adjoint()) * C64::new(0.5, 0.0);
    Ok(HermitianOperator::new(n, herm)?)
}

/// Spin-1/2 dipolar pair term w[σ⃗·σ⃗ − 3σzσz].
pub fn spin_half_pair(w: f64) -> Result<HermitianOperator> {
    pair_term(w, 3.0)
}

/// NV two-level-subspace pair term w[σ⃗·σ⃗ − 2σzσz].
pub fn nv_pair(w: f64) -> Result<HermitianOperator> {
    pair_term(w, 2.0)
}

fn pair_term(w: f64, zz: f64) -> Result<HermitianOperator> {
    let mut m = DMatrix::<C64>::zeros(4, 4);
    for (a, c) in [(Pauli::X, 1.0), (Pauli::Y, 1.0), (Pauli::Z, 1.0 - zz)] {
        m += pauli_embed(a, 0, 2)?.mul(&pauli_embed(a, 1, 2)?) * C64::new(w * c, 0.0);
    }
    HermitianOperator::new(2, m)
}

pub const PAULI_LABELS: [&str; 4] = ["I", "X", "Y", "Z"];

/// Coefficients c_ab of H = Σ c_ab σ_a⊗σ_b for a two-spin operator, indexed
/// by (I, X, Y, Z).
pub fn pauli_decomposition_2spin(h: &HermitianOperator) -> Result<[[f64; 4]; 4]> {
    if h.n_spins() != 2 {
        return Err(Error::DimensionMismatch(format!("expected a 2-spin operator, got {} spins", h.n_spins())));
    }
    let single = |k: usize| -> DMatrix<C64> {
        match k {
            0 => DMatrix::identity(2, 2),
            _ => {
                let p = [Pauli::X, Pauli::Y, Pauli::Z][k - 1].matrix();
                DMatrix::from_fn(2, 2, |r, c| p[r][c])
            }
        }
    };
    let mut out = [[0.0; 4]; 4];
    for (a, row) in out.iter_mut().enumerate() {
        for (b, v) in row.iter_mut().enumerate() {
            let p = single(a).kronecker(&single(b));
            *v = (p * h.matrix()).trace().re / 4.0;
        }
    }
    Ok(out)
}

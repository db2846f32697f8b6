//! Cluster propagation and ensemble averaging of ⟨Sx⟩(t).
//!
//! The bath term B(t)Σσz commutes with the dipolar Hamiltonian, so undriven
//! intervals are propagated exactly in a magnetization-resolved eigenbasis of
//! H_dipolar with one diagonal phase per step. Driven intervals without noise
//! reuse a cached eigendecomposition of H_dipolar + drive. Driven intervals
//! with noise change Hamiltonian every step and are integrated by a Taylor
//! series converged to machine precision.

use std::io::{BufRead, Write};

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use num_complex::Complex64 as C64;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::ensemble::{draw_cluster_couplings_with, ClusterSampling, CouplingDistribution};
use crate::error::{Error, Result};
use crate::model::{AngularUnits, ClusterHamiltonian, CouplingMatrix, DriveSettings};
use crate::noise::{ou_trajectory_steps, NoiseParams};
use crate::seed::{derive_seed, STREAM_DIPOLAR, STREAM_NOISE};
use crate::sequences::PulseSchedule;
use crate::spin::{
    apply_collective_unitary, check_spins, collective_expectations, rotation_matrix, taylor_evolve, Axis,
    Eigensystem, TaylorScratch, MAX_SPINS,
};

/// Where the pair couplings of each dipolar realization come from.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "kind")]
pub enum CouplingSource {
    /// Fresh cluster drawn from the distribution for every dipolar realization.
    Distribution {
        distribution: CouplingDistribution,
        #[serde(default)]
        sampling: ClusterSampling,
    },
    /// The same matrix for every realization.
    Explicit { matrix: CouplingMatrix },
    /// All pairs coupled with ω₀.
    Equal { omega0: f64 },
    /// No dipolar coupling (bath-only problems).
    None,
}

/// Which polarization is reported.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ObservableFrame {
    /// Polarization along the image of +x under all pulses applied so far, so
    /// that phase-cycled sequences read out the preserved component.
    #[default]
    Toggling,
    /// Plain ⟨Sx⟩.
    Lab,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SimulationConfig {
    pub cluster_size: usize,
    pub couplings: CouplingSource,
    pub schedule: PulseSchedule,
    pub noise: Option<NoiseParams>,
    pub dt: f64,
    pub t_max: f64,
    pub sample_stride: usize,
    pub n_dipolar_realizations: usize,
    pub n_noise_realizations: usize,
    pub master_seed: u64,
    #[serde(default)]
    pub units: AngularUnits,
    #[serde(default)]
    pub observable: ObservableFrame,
}

impl SimulationConfig {
    /// Single-realization config with defaults for everything but the physics.
    pub fn new(cluster_size: usize, couplings: CouplingSource, schedule: PulseSchedule, dt: f64, t_max: f64) -> Self {
        Self {
            cluster_size,
            couplings,
            schedule,
            noise: None,
            dt,
            t_max,
            sample_stride: 1,
            n_dipolar_realizations: 1,
            n_noise_realizations: 1,
            master_seed: 0,
            units: AngularUnits::default(),
            observable: ObservableFrame::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt > 0.0) || !self.dt.is_finite() {
            return Err(Error::InvalidParameter(format!("dt = {} must be positive", self.dt)));
        }
        if !(self.t_max >= self.dt) || !self.t_max.is_finite() {
            return Err(Error::InvalidParameter(format!("t_max = {} must be at least dt", self.t_max)));
        }
        if self.sample_stride == 0 || self.n_dipolar_realizations == 0 || self.n_noise_realizations == 0 {
            return Err(Error::InvalidParameter("stride and realization counts must be at least 1".into()));
        }
        check_spins(self.cluster_size)?;
        match &self.couplings {
            CouplingSource::Explicit { matrix } if matrix.n_spins() != self.cluster_size => {
                return Err(Error::DimensionMismatch(format!(
                    "coupling matrix has {} spins, cluster size is {}",
                    matrix.n_spins(),
                    self.cluster_size
                )))
            }
            CouplingSource::Equal { omega0 } if !(*omega0 >= 0.0) => {
                return Err(Error::InvalidParameter(format!("omega0 = {omega0} must be non-negative")))
            }
            _ => {}
        }
        if self.t_max > self.schedule.total_time() * (1.0 + 1e-9) {
            return Err(Error::ScheduleTiming(format!(
                "t_max {:e} s exceeds the schedule length {:e} s",
                self.t_max,
                self.schedule.total_time()
            )));
        }
        Ok(())
    }

    /// SHA-256 of the canonical JSON form.
    pub fn fingerprint(&self) -> String {
        let bytes = serde_json::to_vec(self).expect("config serializes");
        hex(&Sha256::digest(bytes))
    }

    fn couplings_for(&self, i: u64) -> Result<CouplingMatrix> {
        let n = self.cluster_size;
        match &self.couplings {
            CouplingSource::Distribution { distribution, sampling } => {
                draw_cluster_couplings_with(distribution, n, *sampling, coupling_seed(self.master_seed, i))
            }
            CouplingSource::Explicit { matrix } => Ok(matrix.clone()),
            CouplingSource::Equal { omega0 } => CouplingMatrix::equal(n, *omega0),
            CouplingSource::None => CouplingMatrix::new(vec![vec![0.0; n]; n]),
        }
    }
}

fn hex(bytes: &[u8]) -> String {
    bytes.iter().map(|b| format!("{b:02x}")).collect()
}

pub fn coupling_seed(master: u64, i: u64) -> u64 {
    derive_seed(master, &[STREAM_DIPOLAR, i])
}

pub fn noise_seed(master: u64, j: u64) -> u64 {
    derive_seed(master, &[STREAM_NOISE, j])
}

/// Largest step resolving the bath correlation time, the drive rotation and
/// the fastest dipolar phase.
pub fn default_dt(noise: Option<&NoiseParams>, omega_drive_max: f64, omega0_max: f64) -> f64 {
    let mut dt = f64::INFINITY;
    if let Some(p) = noise {
        dt = dt.min(p.tau_c / 20.0);
    }
    if omega_drive_max > 0.0 {
        dt = dt.min(0.05 / omega_drive_max);
    }
    if omega0_max > 0.0 {
        dt = dt.min(0.02 / (4.0 * omega0_max));
    }
    dt
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceResult {
    pub times: Vec<f64>,
    pub sx_mean: Vec<f64>,
    pub sx_std: Vec<f64>,
    pub n_realizations: usize,
    pub fingerprint: String,
    /// Largest shift applied when snapping finite pulses to the step grid.
    pub max_snap_error: f64,
    /// Largest |‖ψ‖ − 1| seen at any sample.
    pub max_norm_error: f64,
}

impl TraceResult {
    pub fn len(&self) -> usize {
        self.times.len()
    }

    pub fn is_empty(&self) -> bool {
        self.times.is_empty()
    }

    /// Mean of sx_mean over samples with t ≥ `from`.
    pub fn window_mean(&self, from: f64) -> f64 {
        let vals: Vec<f64> = self
            .times
            .iter()
            .zip(&self.sx_mean)
            .filter(|(t, _)| **t >= from)
            .map(|(_, v)| *v)
            .collect();
        vals.iter().sum::<f64>() / vals.len() as f64
    }

    /// First time sx_mean drops below 1/e, linearly interpolated.
    pub fn one_over_e_time(&self) -> Option<f64> {
        let level = (-1.0f64).exp();
        for k in 1..self.len() {
            let (a, b) = (self.sx_mean[k - 1], self.sx_mean[k]);
            if b < level {
                let f = (a - level) / (a - b);
                return Some(self.times[k - 1] + f * (self.times[k] - self.times[k - 1]));
            }
        }
        None
    }

    /// CSV with header `t_seconds,sx_mean,sx_std,n_realizations`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "t_seconds,sx_mean,sx_std,n_realizations")?;
        for k in 0..self.len() {
            writeln!(w, "{:e},{:e},{:e},{}", self.times[k], self.sx_mean[k], self.sx_std[k], self.n_realizations)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut out = TraceResult {
            times: Vec::new(),
            sx_mean: Vec::new(),
            sx_std: Vec::new(),
            n_realizations: 0,
            fingerprint: String::new(),
            max_snap_error: 0.0,
            max_norm_error: 0.0,
        };
        for (k, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = k + 1;
            if k == 0 {
                if line.trim() != "t_seconds,sx_mean,sx_std,n_realizations" {
                    return Err(Error::Parse { line: lineno, msg: format!("unexpected header {line:?}") });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let cols: Vec<&str> = line.split(',').map(str::trim).collect();
            if cols.len() != 4 {
                return Err(Error::Parse { line: lineno, msg: format!("expected 4 columns, found {}", cols.len()) });
            }
            let num = |s: &str| {
                s.parse::<f64>()
                    .map_err(|e| Error::Parse { line: lineno, msg: format!("{s:?}: {e}") })
            };
            out.times.push(num(cols[0])?);
            out.sx_mean.push(num(cols[1])?);
            out.sx_std.push(num(cols[2])?);
            out.n_realizations = cols[3]
                .parse()
                .map_err(|e| Error::Parse { line: lineno, msg: format!("{:?}: {e}", cols[3]) })?;
        }
        if out.times.is_empty() {
            return Err(Error::Parse { line: 1, msg: "no samples".into() });
        }
        Ok(out)
    }
}

/// JSON sidecar written next to a trace CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct TraceMetadata {
    pub fingerprint: String,
    pub config: SimulationConfig,
    pub coupling_seeds: Vec<u64>,
    pub noise_seeds: Vec<u64>,
    pub n_realizations: usize,
    pub max_snap_error: f64,
    pub max_norm_error: f64,
    pub version: String,
}

impl TraceMetadata {
    pub fn new(config: &SimulationConfig, trace: &TraceResult) -> Self {
        let m = config.master_seed;
        Self {
            fingerprint: trace.fingerprint.clone(),
            config: config.clone(),
            coupling_seeds: (0..config.n_dipolar_realizations as u64).map(|i| coupling_seed(m, i)).collect(),
            noise_seeds: (0..config.n_noise_realizations as u64).map(|j| noise_seed(m, j)).collect(),
            n_realizations: trace.n_realizations,
            max_snap_error: trace.max_snap_error,
            max_norm_error: trace.max_norm_error,
            version: env!("CARGO_PKG_VERSION").to_string(),
        }
    }

    pub fn to_json(&self) -> Result<String> {
        Ok(serde_json::to_string_pretty(self)?)
    }
}

// ---------------------------------------------------------------------------
// timeline

#[derive(Clone, Copy, Debug)]
struct Instant {
    t: f64,
    axis: Axis,
    angle: f64,
}

#[derive(Clone, Copy, Debug)]
struct DriveRun {
    start: usize,
    end: usize,
    drive: DriveSettings,
}

/// Schedule resolved onto the step grid.
#[derive(Clone, Debug)]
struct Timeline {
    dt: f64,
    n_steps: usize,
    stride: usize,
    ideal: Vec<Instant>,
    runs: Vec<DriveRun>,
    /// Rotations of the observation frame, keyed by time.
    frame: Vec<Instant>,
    max_snap_error: f64,
}

impl Timeline {
    fn new(schedule: &PulseSchedule, dt: f64, t_max: f64, stride: usize) -> Result<Self> {
        let n_steps = (t_max / dt).round().max(1.0) as usize;
        let mut ideal = Vec::new();
        let mut runs: Vec<DriveRun> = Vec::new();
        let mut frame = Vec::new();
        let mut max_snap: f64 = 0.0;
        if let Some(d) = schedule.continuous_drive() {
            if schedule.has_finite_pulses() {
                return Err(Error::InvalidParameter(
                    "a continuous drive cannot be combined with finite-width pulses".into(),
                ));
            }
            if d.omega != 0.0 {
                runs.push(DriveRun { start: 0, end: n_steps, drive: *d });
            }
        }
        for (k, e) in schedule.events().iter().enumerate() {
            if e.is_ideal() {
                if e.start <= t_max * (1.0 + 1e-12) {
                    let at = Instant { t: e.start, axis: e.axis, angle: e.angle };
                    ideal.push(at);
                    frame.push(at);
                }
                continue;
            }
            // snap the length first so equal pulses stay equal, then the center
            let len = (e.duration / dt).round();
            let ks = ((e.start + 0.5 * e.duration) / dt - 0.5 * len).round();
            let ke = ks + len;
            let snap = (e.start - ks * dt).abs().max((e.end() - ke * dt).abs());
            if snap > 0.5 * dt * (1.0 + 1e-9) {
                return Err(Error::ScheduleTiming(format!("event {k} cannot be snapped to the dt grid")));
            }
            if ke <= ks {
                return Err(Error::ScheduleTiming(format!(
                    "event {k} lasts {:e} s, shorter than one step of {dt:e} s",
                    e.duration
                )));
            }
            let (ks, ke) = (ks as usize, ke as usize);
            if let Some(prev) = runs.last() {
                if ks < prev.end {
                    return Err(Error::ScheduleOverlap(format!(
                        "event {k} overlaps the previous pulse after snapping to dt = {dt:e} s"
                    )));
                }
            }
            max_snap = max_snap.max(snap);
            if ks >= n_steps {
                continue;
            }
            let omega = e.angle / (2.0 * (ke - ks) as f64 * dt);
            runs.push(DriveRun { start: ks, end: ke.min(n_steps), drive: DriveSettings { omega, axis: e.axis } });
            if ke <= n_steps {
                frame.push(Instant { t: ke as f64 * dt, axis: e.axis, angle: e.angle });
            }
        }
        frame.sort_by(|a, b| a.t.total_cmp(&b.t));
        Ok(Self { dt, n_steps, stride, ideal, runs, frame, max_snap_error: max_snap })
    }

    fn sample_times(&self) -> Vec<f64> {
        (0..=self.n_steps).step_by(self.stride).map(|k| k as f64 * self.dt).collect()
    }

    fn distinct_drives(&self) -> Vec<DriveSettings> {
        let mut out: Vec<DriveSettings> = Vec::new();
        for r in &self.runs {
            if !out.iter().any(|d| same_drive(d, &r.drive)) {
                out.push(r.drive);
            }
        }
        out
    }
}

fn same_drive(a: &DriveSettings, b: &DriveSettings) -> bool {
    a.axis == b.axis && a.omega.to_bits() == b.omega.to_bits()
}

// ---------------------------------------------------------------------------
// prepared cluster

/// Eigenbasis of H_dipolar built sector by sector, so every eigenvector has a
/// definite total magnetization.
#[derive(Clone, Debug)]
struct SectorEigen {
    blocks: Vec<(Vec<usize>, DMatrix<C64>)>,
    values: Vec<f64>,
    /// Σσz of each eigenvector.
    mz: Vec<f64>,
}

impl SectorEigen {
    fn new(ham: &ClusterHamiltonian) -> Self {
        let n = ham.n_spins();
        let full = ham.to_operator(0.0, None);
        let h = full.matrix();
        let mut blocks = Vec::new();
        let mut values = Vec::new();
        let mut mz = Vec::new();
        for ones in 0..=n {
            let idx: Vec<usize> = (0..ham.dim()).filter(|i| i.count_ones() as usize == ones).collect();
            let d = idx.len();
            let sub = DMatrix::from_fn(d, d, |r, c| h[(idx[r], idx[c])]);
            let eig = SymmetricEigen::new(sub);
            values.extend(eig.eigenvalues.iter().copied());
            mz.extend(std::iter::repeat_n(n as f64 - 2.0 * ones as f64, d));
            blocks.push((idx, eig.eigenvectors));
        }
        Self { blocks, values, mz }
    }

    fn to_eigen(&self, psi: &[C64], out: &mut [C64]) {
        let mut off = 0;
        for (idx, v) in &self.blocks {
            let d = idx.len();
            for c in 0..d {
                let mut acc = C64::new(0.0, 0.0);
                for (r, &i) in idx.iter().enumerate() {
                    acc += v[(r, c)].conj() * psi[i];
                }
                out[off + c] = acc;
            }
            off += d;
        }
    }

    fn from_eigen(&self, coeffs: &[C64], out: &mut [C64]) {
        let mut off = 0;
        for (idx, v) in &self.blocks {
            let d = idx.len();
            for (r, &i) in idx.iter().enumerate() {
                let mut acc = C64::new(0.0, 0.0);
                for c in 0..d {
                    acc += v[(r, c)] * coeffs[off + c];
                }
                out[i] = acc;
            }
            off += d;
        }
    }
}

struct DriveEigen {
    drive: DriveSettings,
    eig: Eigensystem,
    step_phase: Vec<C64>,
}

/// Everything about one dipolar realization that can be reused across noise
/// realizations.
struct Prepared {
    n_spins: usize,
    ham: ClusterHamiltonian,
    sectors: SectorEigen,
    sector_step_phase: Vec<C64>,
    drives: Vec<DriveEigen>,
}

impl Prepared {
    fn new(couplings: &CouplingMatrix, timeline: &Timeline, noisy: bool) -> Self {
        let ham = ClusterHamiltonian::new(couplings);
        let sectors = SectorEigen::new(&ham);
        let dt = timeline.dt;
        let sector_step_phase = sectors.values.iter().map(|&e| C64::from_polar(1.0, -e * dt)).collect();
        let drives = if noisy {
            Vec::new()
        } else {
            timeline
                .distinct_drives()
                .into_iter()
                .map(|drive| {
                    let eig = Eigensystem::new(&ham.to_operator(0.0, Some(&drive)));
                    let step_phase = eig.values().iter().map(|&e| C64::from_polar(1.0, -e * dt)).collect();
                    DriveEigen { drive, eig, step_phase }
                })
                .collect()
        };
        Self { n_spins: couplings.n_spins(), ham, sectors, sector_step_phase, drives }
    }

    fn drive_index(&self, d: &DriveSettings) -> Option<usize> {
        self.drives.iter().position(|x| same_drive(&x.drive, d))
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
enum Repr {
    Computational,
    Sector,
    Drive(usize),
}

/// State vector stored in whichever basis the current interval is diagonal in.
struct Evolver<'a> {
    prep: &'a Prepared,
    coeffs: Vec<C64>,
    repr: Repr,
    buf: Vec<C64>,
    scratch: TaylorScratch,
    level_phase: Vec<C64>,
}

impl<'a> Evolver<'a> {
    fn new(prep: &'a Prepared) -> Self {
        let dim = 1usize << prep.n_spins;
        let a = C64::new(1.0 / (dim as f64).sqrt(), 0.0);
        Self {
            prep,
            coeffs: vec![a; dim],
            repr: Repr::Computational,
            buf: vec![C64::new(0.0, 0.0); dim],
            scratch: TaylorScratch::default(),
            level_phase: vec![C64::new(0.0, 0.0); prep.n_spins + 1],
        }
    }

    fn write_computational(&self, out: &mut [C64]) {
        match self.repr {
            Repr::Computational => out.copy_from_slice(&self.coeffs),
            Repr::Sector => self.prep.sectors.from_eigen(&self.coeffs, out),
            Repr::Drive(k) => {
                let c = DVector::from_column_slice(&self.coeffs);
                let psi = self.prep.drives[k].eig.from_eigenbasis(&c, 0.0);
                out.copy_from_slice(psi.as_slice());
            }
        }
    }

    fn ensure(&mut self, target: Repr) {
        if self.repr == target {
            return;
        }
        if self.repr != Repr::Computational {
            let mut psi = std::mem::take(&mut self.buf);
            self.write_computational(&mut psi);
            self.buf = std::mem::replace(&mut self.coeffs, psi);
            self.repr = Repr::Computational;
        }
        match target {
            Repr::Computational => {}
            Repr::Sector => {
                self.prep.sectors.to_eigen(&self.coeffs, &mut self.buf);
                std::mem::swap(&mut self.coeffs, &mut self.buf);
            }
            Repr::Drive(k) => {
                let psi = DVector::from_column_slice(&self.coeffs);
                let c = self.prep.drives[k].eig.to_eigenbasis(&psi);
                self.coeffs.copy_from_slice(c.as_slice());
            }
        }
        self.repr = target;
    }

    /// Evolves for `tau` under H_dipolar + bΣσz. `full_step` selects the
    /// precomputed dt phases.
    fn free(&mut self, tau: f64, b: f64, full_step: bool) {
        self.ensure(Repr::Sector);
        let s = &self.prep.sectors;
        if full_step {
            let n = self.prep.n_spins;
            for (l, p) in self.level_phase.iter_mut().enumerate() {
                *p = C64::from_polar(1.0, -b * (n as f64 - 2.0 * l as f64) * tau);
            }
            let mut k = 0;
            for (l, (idx, _)) in s.blocks.iter().enumerate() {
                let lp = self.level_phase[l];
                for _ in 0..idx.len() {
                    self.coeffs[k] *= self.prep.sector_step_phase[k] * lp;
                    k += 1;
                }
            }
        } else {
            for (k, c) in self.coeffs.iter_mut().enumerate() {
                *c *= C64::from_polar(1.0, -(s.values[k] + b * s.mz[k]) * tau);
            }
        }
    }

    fn driven(&mut self, tau: f64, b: f64, drive: &DriveSettings, full_step: bool) {
        if b == 0.0 {
            if let Some(k) = self.prep.drive_index(drive) {
                self.ensure(Repr::Drive(k));
                let de = &self.prep.drives[k];
                if full_step {
                    for (c, p) in self.coeffs.iter_mut().zip(&de.step_phase) {
                        *c *= p;
                    }
                } else {
                    for (c, &e) in self.coeffs.iter_mut().zip(de.eig.values()) {
                        *c *= C64::from_polar(1.0, -e * tau);
                    }
                }
                return;
            }
        }
        self.ensure(Repr::Computational);
        let ham = &self.prep.ham;
        let bound = ham.norm_bound(b, Some(drive));
        taylor_evolve(&mut self.coeffs, tau, bound, |x, y| ham.apply(b, Some(drive), x, y), &mut self.scratch);
    }

    fn rotate(&mut self, axis: Axis, angle: f64) {
        self.ensure(Repr::Computational);
        let u = rotation_matrix(axis, angle);
        apply_collective_unitary(&mut self.coeffs, self.prep.n_spins, &u);
    }

    /// Site-averaged ⟨σ⃗⟩ and the state norm.
    fn measure(&mut self) -> ([f64; 3], f64) {
        let mut psi = std::mem::take(&mut self.buf);
        self.write_computational(&mut psi);
        let e = collective_expectations(&psi, self.prep.n_spins);
        let norm = psi.iter().map(|z| z.norm_sqr()).sum::<f64>().sqrt();
        self.buf = psi;
        (e, norm)
    }
}

/// Bloch-vector rotation by `angle` about the signed axis.
fn rotate_vector(v: [f64; 3], axis: Axis, angle: f64) -> [f64; 3] {
    let u = axis.unit_vector();
    let (s, c) = angle.sin_cos();
    let dot = u[0] * v[0] + u[1] * v[1] + u[2] * v[2];
    let cross = [u[1] * v[2] - u[2] * v[1], u[2] * v[0] - u[0] * v[2], u[0] * v[1] - u[1] * v[0]];
    [0, 1, 2].map(|i| v[i] * c + cross[i] * s + u[i] * dot * (1.0 - c))
}

struct RunOutput {
    sx: Vec<f64>,
    norm_error: f64,
}

fn run_single(prep: &Prepared, timeline: &Timeline, field: Option<&[f64]>, frame: ObservableFrame) -> RunOutput {
    let dt = timeline.dt;
    let tol = 1e-9 * dt;
    let mut ev = Evolver::new(prep);
    let mut axis_image = [1.0, 0.0, 0.0];
    let mut sx = Vec::with_capacity(timeline.n_steps / timeline.stride + 1);
    let mut norm_error: f64 = 0.0;
    let mut record = |ev: &mut Evolver, image: [f64; 3]| {
        let (e, norm) = ev.measure();
        norm_error = norm_error.max((norm - 1.0).abs());
        let v = match frame {
            ObservableFrame::Toggling => image[0] * e[0] + image[1] * e[1] + image[2] * e[2],
            ObservableFrame::Lab => e[0],
        };
        v.clamp(-1.0, 1.0)
    };
    sx.push(record(&mut ev, axis_image));

    let (mut p, mut r, mut f) = (0, 0, 0);
    for k in 0..timeline.n_steps {
        let t0 = k as f64 * dt;
        let t1 = (k + 1) as f64 * dt;
        let b = field.map_or(0.0, |v| v[k]);
        while r < timeline.runs.len() && timeline.runs[r].end <= k {
            r += 1;
        }
        let drive = timeline.runs.get(r).filter(|run| run.start <= k).map(|run| run.drive);
        let mut t = t0;
        while p < timeline.ideal.len() && timeline.ideal[p].t <= t1 + tol {
            let pulse = timeline.ideal[p];
            let tau = (pulse.t - t).max(0.0);
            if tau > 0.0 {
                step(&mut ev, tau, b, drive.as_ref(), false);
            }
            t = t.max(pulse.t);
            ev.rotate(pulse.axis, pulse.angle);
            p += 1;
        }
        let rest = t1 - t;
        if t == t0 {
            step(&mut ev, dt, b, drive.as_ref(), true);
        } else if rest > 0.0 {
            step(&mut ev, rest, b, drive.as_ref(), false);
        }
        while f < timeline.frame.len() && timeline.frame[f].t <= t1 + tol {
            axis_image = rotate_vector(axis_image, timeline.frame[f].axis, timeline.frame[f].angle);
            f += 1;
        }
        if (k + 1) % timeline.stride == 0 {
            sx.push(record(&mut ev, axis_image));
        }
    }
    RunOutput { sx, norm_error }
}

fn step(ev: &mut Evolver, tau: f64, b: f64, drive: Option<&DriveSettings>, full: bool) {
    match drive {
        Some(d) => ev.driven(tau, b, d, full),
        None => ev.free(tau, b, full),
    }
}

fn is_uncoupled(c: &CouplingMatrix) -> bool {
    c.pairs().all(|(_, _, w)| w == 0.0)
}

fn single_spin() -> CouplingMatrix {
    CouplingMatrix::new(vec![vec![0.0]]).expect("1x1 zero matrix")
}

fn noise_field(noise: Option<&NoiseParams>, timeline: &Timeline, seed: u64) -> Option<Vec<f64>> {
    noise
        .filter(|p| p.b > 0.0)
        .map(|p| ou_trajectory_steps(timeline.n_steps, timeline.dt, p, seed).values)
}

/// One realization: couplings, schedule and (optionally) a noise seed.
///
/// Uncoupled clusters are simulated as a single spin: a uniform field and
/// collective pulses act identically on every spin of a product state.
pub fn evolve_trace(
    couplings: &CouplingMatrix,
    schedule: &PulseSchedule,
    noise: Option<&NoiseParams>,
    dt: f64,
    t_max: f64,
    seed: u64,
) -> Result<TraceResult> {
    evolve_trace_with(couplings, schedule, noise, dt, t_max, seed, &TraceOptions::default())
}

/// Knobs for [`evolve_trace_with`].
#[derive(Clone, Copy, Debug)]
pub struct TraceOptions {
    pub sample_stride: usize,
    pub observable: ObservableFrame,
    pub single_spin_shortcut: bool,
}

impl Default for TraceOptions {
    fn default() -> Self {
        Self { sample_stride: 1, observable: ObservableFrame::default(), single_spin_shortcut: true }
    }
}

pub fn evolve_trace_with(
    couplings: &CouplingMatrix,
    schedule: &PulseSchedule,
    noise: Option<&NoiseParams>,
    dt: f64,
    t_max: f64,
    seed: u64,
    options: &TraceOptions,
) -> Result<TraceResult> {
    let mut config = SimulationConfig::new(
        couplings.n_spins(),
        CouplingSource::Explicit { matrix: couplings.clone() },
        schedule.clone(),
        dt,
        t_max,
    );
    config.noise = noise.copied();
    config.sample_stride = options.sample_stride;
    config.observable = options.observable;
    config.master_seed = seed;
    config.validate()?;
    let timeline = Timeline::new(schedule, dt, t_max, options.sample_stride)?;
    let noisy = noise.is_some_and(|p| p.b > 0.0);
    let effective = if options.single_spin_shortcut && is_uncoupled(couplings) { single_spin() } else { couplings.clone() };
    let prep = Prepared::new(&effective, &timeline, noisy);
    let field = noise_field(noise, &timeline, seed);
    let out = run_single(&prep, &timeline, field.as_deref(), options.observable);
    Ok(TraceResult {
        times: timeline.sample_times(),
        sx_std: vec![0.0; out.sx.len()],
        sx_mean: out.sx,
        n_realizations: 1,
        fingerprint: config.fingerprint(),
        max_snap_error: timeline.max_snap_error,
        max_norm_error: out.norm_error,
    })
}

/// Mean and standard deviation over the crossed dipolar × noise realizations.
///
/// Dipolar realization i uses [`coupling_seed`]`(master, i)` and noise
/// realization j uses [`noise_seed`]`(master, j)`. Results are reduced in
/// (i, j) order, so the output does not depend on the thread count.
pub fn ensemble_average(config: &SimulationConfig) -> Result<TraceResult> {
    config.validate()?;
    let timeline = Timeline::new(&config.schedule, config.dt, config.t_max, config.sample_stride)?;
    let noise = config.noise.as_ref();
    let noisy = noise.is_some_and(|p| p.b > 0.0);
    let n_noise = config.n_noise_realizations;

    let runs: Vec<Vec<RunOutput>> = (0..config.n_dipolar_realizations as u64)
        .into_par_iter()
        .map(|i| {
            let c = config.couplings_for(i)?;
            let c = if is_uncoupled(&c) { single_spin() } else { c };
            let prep = Prepared::new(&c, &timeline, noisy);
            Ok((0..n_noise as u64)
                .into_par_iter()
                .map(|j| {
                    let field = noise_field(noise, &timeline, noise_seed(config.master_seed, j));
                    run_single(&prep, &timeline, field.as_deref(), config.observable)
                })
                .collect())
        })
        .collect::<Result<_>>()?;

    let n_samples = timeline.sample_times().len();
    let total = config.n_dipolar_realizations * n_noise;
    let mut mean = vec![0.0; n_samples];
    let mut m2 = vec![0.0; n_samples];
    let mut norm_error: f64 = 0.0;
    let mut count = 0.0;
    for run in runs.iter().flatten() {
        count += 1.0;
        norm_error = norm_error.max(run.norm_error);
        for (k, &x) in run.sx.iter().enumerate() {
            let d = x - mean[k];
            mean[k] += d / count;
            m2[k] += d * (x - mean[k]);
        }
    }
    let std = m2
        .iter()
        .map(|&s| if total > 1 { (s / (total - 1) as f64).sqrt() } else { 0.0 })
        .collect();
    Ok(TraceResult {
        times: timeline.sample_times(),
        sx_mean: mean.into_iter().map(|v: f64| v.clamp(-1.0, 1.0)).collect(),
        sx_std: std,
        n_realizations: total,
        fingerprint: config.fingerprint(),
        max_snap_error: timeline.max_snap_error,
        max_norm_error: norm_error,
    })
}

/// Replays `config` for each cluster size.
pub fn convergence_scan(config: &SimulationConfig, cluster_sizes: &[usize]) -> Result<Vec<TraceResult>> {
    if matches!(config.couplings, CouplingSource::Explicit { .. }) {
        return Err(Error::InvalidParameter("convergence scans need a size-independent coupling source".into()));
    }
    cluster_sizes
        .iter()
        .map(|&n| {
            if !(2..=MAX_SPINS).contains(&n) {
                return Err(Error::InvalidParameter(format!("cluster size {n} outside 2..={MAX_SPINS}")));
            }
            let mut c = config.clone();
            c.cluster_size = n;
            ensemble_average(&c)
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sequences::{build_cpmg, build_spinlock, build_xy8, PulseEvent};
    use crate::spin::{plus_state, propagator};
    use approx::assert_abs_diff_eq;
    use std::f64::consts::PI;

    fn dense_reference(c: &CouplingMatrix, drive: Option<&DriveSettings>, times: &[f64]) -> Vec<f64> {
        let h = ClusterHamiltonian::new(c).to_operator(0.0, drive);
        let psi0 = plus_state(c.n_spins()).unwrap();
        times.iter().map(|&t| propagator(&h, t).unwrap().apply(&psi0).expect_sx()).collect()
    }

    fn random_couplings(n: usize) -> CouplingMatrix {
        let pairs: Vec<f64> = (0..n * (n - 1) / 2).map(|k| 0.3 + ((k * 7919) % 13) as f64 * 0.11).collect();
        CouplingMatrix::from_pairs(n, &pairs).unwrap()
    }

    #[test]
    fn two_spin_free_is_cosine() {
        let c = CouplingMatrix::equal(2, 1.7).unwrap();
        let tr = evolve_trace(&c, &PulseSchedule::free(3.0).unwrap(), None, 0.01, 3.0, 0).unwrap();
        for (t, v) in tr.times.iter().zip(&tr.sx_mean) {
            assert_abs_diff_eq!(*v, (4.0 * 1.7 * t).cos(), epsilon = 1e-10);
        }
        assert_eq!(tr.sx_mean[0], 1.0);
    }

    #[test]
    fn free_and_spinlock_match_dense_propagator() {
        let c = random_couplings(4);
        let dt = 0.05;
        let tr = evolve_trace(&c, &PulseSchedule::free(2.0).unwrap(), None, dt, 2.0, 0).unwrap();
        let reference = dense_reference(&c, None, &tr.times);
        for (a, b) in tr.sx_mean.iter().zip(&reference) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
        let sched = build_spinlock(3.0, 2.0).unwrap();
        let tr = evolve_trace(&c, &sched, None, dt, 2.0, 0).unwrap();
        let drive = DriveSettings::new(3.0, Axis::PlusX).unwrap();
        let reference = dense_reference(&c, Some(&drive), &tr.times);
        for (a, b) in tr.sx_mean.iter().zip(&reference) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-10);
        }
    }

    #[test]
    fn cpmg_is_transparent_to_dipolar_coupling() {
        let c = random_couplings(5);
        let free = evolve_trace(&c, &PulseSchedule::free(4.0).unwrap(), None, 0.01, 4.0, 0).unwrap();
        let cpmg = evolve_trace(&c, &build_cpmg(40, 0.1, 0.0).unwrap(), None, 0.01, 4.0, 0).unwrap();
        for (a, b) in free.sx_mean.iter().zip(&cpmg.sx_mean) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn xy8_toggling_frame_matches_cpmg_on_dipolar() {
        let c = random_couplings(4);
        let a = evolve_trace(&c, &build_cpmg(16, 0.1, 0.0).unwrap(), None, 0.01, 1.6, 0).unwrap();
        let b = evolve_trace(&c, &build_xy8(2, 0.1, 0.0).unwrap(), None, 0.01, 1.6, 0).unwrap();
        for (x, y) in a.sx_mean.iter().zip(&b.sx_mean) {
            assert_abs_diff_eq!(x, y, epsilon = 1e-9);
        }
        let opts = TraceOptions { observable: ObservableFrame::Lab, ..Default::default() };
        let lab = evolve_trace_with(&c, &build_xy8(2, 0.1, 0.0).unwrap(), None, 0.01, 1.6, 0, &opts).unwrap();
        // after the first π_y (t = 0.15) the lab-frame polarization has flipped sign
        assert!(lab.sx_mean[20] < 0.0);
    }

    #[test]
    fn finite_pulse_matches_ideal_in_short_limit() {
        let c = CouplingMatrix::new(vec![vec![0.0; 2]; 2]).unwrap();
        // a single π/2 about y turns +x into −z; ⟨Sx⟩ → 0
        let ev = PulseEvent { start: 0.5, duration: 0.2, axis: Axis::PlusY, angle: PI / 2.0 };
        let sched = PulseSchedule::new(1.0, vec![ev], None).unwrap();
        let opts = TraceOptions { observable: ObservableFrame::Lab, ..Default::default() };
        let tr = evolve_trace_with(&c, &sched, None, 0.01, 1.0, 0, &opts).unwrap();
        assert_abs_diff_eq!(*tr.sx_mean.last().unwrap(), 0.0, epsilon = 1e-10);
        assert_abs_diff_eq!(tr.sx_mean[60], (PI / 4.0).cos(), epsilon = 1e-10);
    }

    #[test]
    fn noisy_driven_steps_match_dense_exponentials() {
        let c = random_couplings(3);
        let p = NoiseParams::new(0.3, 4.0).unwrap();
        let dt = 0.02;
        let sched = build_spinlock(2.5, 1.0).unwrap();
        let tr = evolve_trace(&c, &sched, Some(&p), dt, 1.0, 11).unwrap();
        let field = ou_trajectory_steps(50, dt, &p, 11).values;
        let ham = ClusterHamiltonian::new(&c);
        let drive = DriveSettings::new(2.5, Axis::PlusX).unwrap();
        let mut psi = plus_state(3).unwrap();
        for (k, b) in field.iter().enumerate() {
            psi = propagator(&ham.to_operator(*b, Some(&drive)), dt).unwrap().apply(&psi);
            assert_abs_diff_eq!(psi.expect_sx(), tr.sx_mean[k + 1], epsilon = 1e-10);
        }
    }

    #[test]
    fn bath_only_shortcut_matches_full_cluster() {
        let c = CouplingMatrix::new(vec![vec![0.0; 4]; 4]).unwrap();
        let p = NoiseParams::new(0.5, 3.0).unwrap();
        let sched = build_cpmg(5, 0.4, 0.05).unwrap();
        let fast = evolve_trace(&c, &sched, Some(&p), 0.01, 2.0, 3).unwrap();
        let opts = TraceOptions { single_spin_shortcut: false, ..Default::default() };
        let full = evolve_trace_with(&c, &sched, Some(&p), 0.01, 2.0, 3, &opts).unwrap();
        for (a, b) in fast.sx_mean.iter().zip(&full.sx_mean) {
            assert_abs_diff_eq!(a, b, epsilon = 1e-9);
        }
    }

    #[test]
    fn rejects_unresolvable_pulses() {
        let c = CouplingMatrix::equal(2, 1.0).unwrap();
        let sched = build_cpmg(4, 1.0, 0.001).unwrap();
        let err = evolve_trace(&c, &sched, None, 0.01, 4.0, 0).unwrap_err();
        assert_eq!(err.code(), "SCHEDULE_TIMING");
        assert!(evolve_trace(&c, &PulseSchedule::free(1.0).unwrap(), None, 0.1, 2.0, 0).is_err());
    }

    #[test]
    fn ensemble_is_deterministic_and_crossed() {
        let mut cfg = SimulationConfig::new(
            3,
            CouplingSource::Equal { omega0: 1.0 },
            build_cpmg(10, 0.2, 0.0).unwrap(),
            0.01,
            2.0,
        );
        cfg.noise = Some(NoiseParams::new(0.2, 2.0).unwrap());
        cfg.n_noise_realizations = 6;
        cfg.n_dipolar_realizations = 2;
        cfg.sample_stride = 10;
        cfg.master_seed = 5;
        let a = ensemble_average(&cfg).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = pool.install(|| ensemble_average(&cfg).unwrap());
        assert_eq!(a, b);
        assert_eq!(a.n_realizations, 12);
        assert_eq!(a.times.len(), 21);
        assert!(a.max_norm_error < 1e-9);
        cfg.master_seed = 6;
        assert_ne!(ensemble_average(&cfg).unwrap().sx_mean, a.sx_mean);
    }

    #[test]
    fn csv_round_trip() {
        let c = CouplingMatrix::equal(2, 1.0).unwrap();
        let tr = evolve_trace(&c, &PulseSchedule::free(1.0).unwrap(), None, 0.1, 1.0, 0).unwrap();
        let mut buf = Vec::new();
        tr.write_csv(&mut buf).unwrap();
        let back = TraceResult::read_csv(&buf[..]).unwrap();
        assert_eq!(back.sx_mean, tr.sx_mean);
        assert_eq!(back.times, tr.times);
        let bad = b"t_seconds,sx_mean,sx_std,n_realizations\n0,1,0,1\n0.1,x,0,1\n";
        match TraceResult::read_csv(&bad[..]) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 3),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn toggling_image_rotation() {
        let v = rotate_vector([1.0, 0.0, 0.0], Axis::PlusY, PI / 2.0);
        assert_abs_diff_eq!(v[2], -1.0, epsilon = 1e-15);
        let w = rotate_vector([1.0, 0.0, 0.0], Axis::MinusX, 1.3);
        assert_eq!(w, [1.0, 0.0, 0.0]);
    }
}

//! Shipped experiment recipes. Each one expands into a list of jobs whose
//! outputs are fully determined by the master seed.

use std::collections::HashMap;

use spinbath::engine::{CouplingSource, SimulationConfig};
use spinbath::ensemble::{nn_coupling_histogram, CouplingDistribution, Preset};
use spinbath::model::AngularUnits;
use spinbath::noise::NoiseParams;
use spinbath::sequences::{
    build_combined, build_cpmg, build_spinlock, build_wahuha, build_xy8, PulseSchedule,
};
use spinbath::{Error, Result};

pub struct Recipe {
    pub name: &'static str,
    /// Acceptance criteria this recipe feeds.
    pub criteria: &'static str,
    pub summary: &'static str,
    pub expect: &'static str,
}

pub const RECIPES: &[Recipe] = &[
    Recipe { name: "fig1a", criteria: "3, 5c", summary: "free dipolar evolution, 60 Hz preset, clusters of 4, 6 and 8 spins", expect: "decay within a few 1/w0; sizes agree closely" },
    Recipe { name: "fig1b", criteria: "13", summary: "free dipolar evolution of 6-spin clusters for the three presets", expect: "same shape once time is scaled by w0" },
    Recipe { name: "fig2a", criteria: "6", summary: "spin-lock at 1, 10 and 100 w0 on the 10 kHz preset", expect: "<Sx> >= 0.99 at 100 w0" },
    Recipe { name: "fig2b", criteria: "6", summary: "spin-lock at 1, 10 and 100 w0 on the 1 MHz preset", expect: "<Sx> >= 0.99 at 100 w0" },
    Recipe { name: "fig2c", criteria: "-", summary: "spin-lock at 2e3, 2e4 and 2e5 s^-1 on the 60 Hz preset in the OU bath, 5 dipolar realizations", expect: "near-unity polarization at 2e5 s^-1" },
    Recipe { name: "fig3a", criteria: "8, 9b", summary: "bath only: FID, CPMG, XY8 (1000 pulses each) and WAHUHA (250 cycles) over 5 ms", expect: "CPMG/XY8 preserve <Sx>; WAHUHA gives less than a twofold extension" },
    Recipe { name: "fig3b", criteria: "7, 9a", summary: "60 Hz dipolar only: free, CPMG, XY8 (1000 pulses each) and 100 WAHUHA cycles over 50 ms", expect: "CPMG and XY8 identical to free; WAHUHA preserves <Sx>" },
    Recipe { name: "fig3c", criteria: "11", summary: "60 Hz preset in the OU bath: 21000-pulse CPMG, WAHUHA and combined sequences over 5 ms", expect: "combined sequence ends highest" },
    Recipe { name: "fig4", criteria: "12", summary: "4000-pulse CPMG with pulse lengths of 1, 5 and 25% of the spacing, with and without dipolar coupling", expect: "bath-only traces do not depend on pulse length" },
    Recipe { name: "fig5", criteria: "10", summary: "average Hamiltonians of WAHUHA for spin-1/2 and NV pairs, with and without a shifted pulse", expect: "zero for spin-1/2; w/3 on XX, YY, ZZ for NV" },
    Recipe { name: "fig6", criteria: "2", summary: "closed-form equal-coupling line weights for 2 to 10 spins", expect: "6 spins: 0.625, 0.3125, 0.0625 at 4, 12, 20 w0" },
    Recipe { name: "fig8", criteria: "3", summary: "long free-evolution traces and their spectra for 4, 6 and 8 spins, 60 Hz preset", expect: "lines near 4 and 12 w0" },
    Recipe { name: "fig9", criteria: "5b, 5c", summary: "spin-lock at 12 w0 on the 60 Hz preset for 4, 6 and 8 spins", expect: "plateau near 0.945" },
    Recipe { name: "fig10", criteria: "13", summary: "coupling distributions of the three presets with matching 6-spin free traces", expect: "similar shapes in units of w0" },
    Recipe { name: "appC-ii", criteria: "6", summary: "spin-lock at 1e5 s^-1 on the 60 Hz preset over 50 ms", expect: "<Sx> stays at 1" },
    Recipe { name: "appC-iii", criteria: "9a", summary: "100 WAHUHA cycles with spacing 0.005/w0 on the three presets", expect: "decay time well beyond 10x the free decay" },
    Recipe { name: "appC-iv", criteria: "12", summary: "500 XY8 cycles with pulse lengths of 1, 5 and 25% of the spacing in the OU bath", expect: "smaller duration effect than CPMG" },
];

pub enum JobKind {
    Trace { config: Box<SimulationConfig>, spectrum_omega0: Option<f64> },
    Distribution { preset: Preset },
    AnalyticSpectra { sizes: Vec<usize> },
    AverageHamiltonians,
}

pub struct Job {
    pub label: String,
    pub kind: JobKind,
}

/// Preset distributions, built on demand and rescaled to the preset's quoted
/// typical strength.
pub struct Presets {
    pub units: AngularUnits,
    pub realizations: usize,
    pub seed: u64,
    cache: HashMap<&'static str, CouplingDistribution>,
}

impl Presets {
    pub fn new(units: AngularUnits, realizations: usize, seed: u64) -> Self {
        Self { units, realizations, seed, cache: HashMap::new() }
    }

    pub fn raw(&self, p: Preset) -> Result<CouplingDistribution> {
        nn_coupling_histogram(&p.spec(), self.realizations, 200, self.seed)
    }

    pub fn get(&mut self, p: Preset) -> Result<CouplingDistribution> {
        if let Some(d) = self.cache.get(p.name()) {
            return Ok(d.clone());
        }
        let d = self.raw(p)?.rescaled_to_mean(self.omega0(p))?;
        self.cache.insert(p.name(), d.clone());
        Ok(d)
    }

    pub fn omega0(&self, p: Preset) -> f64 {
        self.units.angular(p.reference_omega0())
    }

    fn source(&mut self, p: Preset) -> Result<CouplingSource> {
        Ok(CouplingSource::Distribution { distribution: self.get(p)?, sampling: Default::default() })
    }
}

pub fn find(name: &str) -> Option<&'static Recipe> {
    RECIPES.iter().find(|r| r.name == name)
}

/// Splits `fig3b-wahuha100` into the recipe and an optional run label.
pub fn resolve(spec: &str) -> Option<(&'static Recipe, Option<&str>)> {
    if let Some(r) = find(spec) {
        return Some((r, None));
    }
    RECIPES.iter().find_map(|r| {
        spec.strip_prefix(r.name)
            .and_then(|rest| rest.strip_prefix('-'))
            .map(|label| (r, Some(label)))
    })
}

fn short(p: Preset) -> &'static str {
    p.name().trim_start_matches("paper-")
}

/// Sample stride giving at most about 2000 points.
fn stride_for(t_max: f64, dt: f64) -> usize {
    ((t_max / dt / 2000.0).round() as usize).max(1)
}

fn trace(label: impl Into<String>, n: usize, src: CouplingSource, sched: PulseSchedule, dt: f64) -> Job {
    let t = sched.total_time();
    let mut config = SimulationConfig::new(n, src, sched, dt, t);
    config.sample_stride = stride_for(t, dt);
    Job { label: label.into(), kind: JobKind::Trace { config: Box::new(config), spectrum_omega0: None } }
}

fn with(mut job: Job, f: impl FnOnce(&mut SimulationConfig)) -> Job {
    if let JobKind::Trace { config, .. } = &mut job.kind {
        f(config);
    }
    job
}

fn realizations(n_dip: usize, n_noise: usize) -> impl FnOnce(&mut SimulationConfig) {
    move |c| {
        c.n_dipolar_realizations = n_dip;
        c.n_noise_realizations = n_noise;
    }
}

fn bath(n_dip: usize, n_noise: usize) -> impl FnOnce(&mut SimulationConfig) {
    move |c| {
        c.noise = Some(NoiseParams::paper_bath());
        c.n_dipolar_realizations = n_dip;
        c.n_noise_realizations = n_noise;
    }
}

pub fn jobs(recipe: &Recipe, presets: &mut Presets) -> Result<Vec<Job>> {
    use Preset::*;
    let w60 = presets.omega0(Paper60Hz);
    let units = presets.units;
    let p = NoiseParams::paper_bath();
    let bath_dt = p.tau_c / 20.0;
    let mut out = Vec::new();
    match recipe.name {
        "fig1a" | "fig8" => {
            let span = if recipe.name == "fig1a" { 10.0 } else { 40.0 };
            let t = span / w60;
            for n in [4, 6, 8] {
                let mut job = with(
                    trace(format!("n{n}"), n, presets.source(Paper60Hz)?, PulseSchedule::free(t)?, t / 4000.0),
                    realizations(200, 1),
                );
                if recipe.name == "fig8" {
                    if let JobKind::Trace { config, spectrum_omega0 } = &mut job.kind {
                        config.sample_stride = 1;
                        *spectrum_omega0 = Some(w60);
                    }
                }
                out.push(job);
            }
        }
        "fig1b" | "fig10" => {
            for pr in Preset::ALL {
                if recipe.name == "fig10" {
                    out.push(Job { label: format!("dist-{}", short(pr)), kind: JobKind::Distribution { preset: pr } });
                }
                let t = 10.0 / presets.omega0(pr);
                out.push(with(
                    trace(short(pr), 6, presets.source(pr)?, PulseSchedule::free(t)?, t / 2000.0),
                    realizations(100, 1),
                ));
            }
        }
        "fig2a" | "fig2b" => {
            let pr = if recipe.name == "fig2a" { Paper10kHz } else { Paper1MHz };
            let w0 = presets.omega0(pr);
            let t = 10.0 / w0;
            for m in [1.0, 10.0, 100.0] {
                let omega = m * w0;
                let dt = (t / 2000.0).min(0.05 / omega);
                out.push(with(
                    trace(format!("omega{m}x"), 6, presets.source(pr)?, build_spinlock(omega, t)?, dt),
                    realizations(100, 1),
                ));
            }
        }
        "fig2c" => {
            let t = 10e-3;
            for omega in [2e3, 2e4, 2e5] {
                let omega = units.angular(omega);
                let dt = bath_dt.min(0.05 / omega);
                out.push(with(
                    trace(format!("omega{omega:e}"), 6, presets.source(Paper60Hz)?, build_spinlock(omega, t)?, dt),
                    bath(5, 10),
                ));
            }
        }
        "fig3a" => {
            let t = 10.0 * p.t2_star();
            let runs = [
                ("fid", PulseSchedule::free(t)?),
                ("cpmg1000", build_cpmg(1000, t / 1000.0, 0.0)?),
                ("xy8-125", build_xy8(125, t / 1000.0, 0.0)?),
                ("wahuha250", build_wahuha(250, t / 1500.0, 0.0, 0.0)?),
            ];
            for (label, sched) in runs {
                out.push(with(trace(label, 6, CouplingSource::None, sched, bath_dt), bath(1, 400)));
            }
        }
        "fig3b" => {
            let t = 50e-3;
            let runs = [
                ("free", PulseSchedule::free(t)?),
                ("cpmg1000", build_cpmg(1000, t / 1000.0, 0.0)?),
                ("xy8-125", build_xy8(125, t / 1000.0, 0.0)?),
                ("wahuha100", build_wahuha(100, t / 600.0, 0.0, 0.0)?),
            ];
            for (label, sched) in runs {
                out.push(with(
                    trace(label, 6, presets.source(Paper60Hz)?, sched, t / 10_000.0),
                    realizations(100, 1),
                ));
            }
        }
        "fig3c" => {
            let t = 5e-3;
            let runs = [
                ("combined", build_combined(1000, 5, t / 1000.0, 0.0)?),
                ("cpmg21000", build_cpmg(21000, t / 21000.0, 0.0)?),
                ("wahuha5250", build_wahuha(5250, t / 31500.0, 0.0, 0.0)?),
            ];
            for (label, sched) in runs {
                out.push(with(trace(label, 6, presets.source(Paper60Hz)?, sched, bath_dt), bath(5, 10)));
            }
        }
        "fig4" | "appC-iv" => {
            let tau = 1.25e-6;
            for pct in [1.0, 5.0, 25.0] {
                let d = pct / 100.0 * tau;
                let sched = if recipe.name == "fig4" { build_cpmg(4000, tau, d)? } else { build_xy8(500, tau, d)? };
                out.push(with(
                    trace(format!("d{pct}"), 6, presets.source(Paper60Hz)?, sched.clone(), 0.01 * tau),
                    bath(5, 2),
                ));
                if recipe.name == "fig4" {
                    out.push(with(
                        trace(format!("bath-d{pct}"), 6, CouplingSource::None, sched, 0.01 * tau),
                        bath(1, 200),
                    ));
                }
            }
        }
        "fig5" => out.push(Job { label: "avg-ham".into(), kind: JobKind::AverageHamiltonians }),
        "fig6" => out.push(Job { label: "weights".into(), kind: JobKind::AnalyticSpectra { sizes: (2..=10).collect() } }),
        "fig9" => {
            let t = 20.0 / w60;
            for n in [4, 6, 8] {
                out.push(with(
                    trace(format!("n{n}"), n, presets.source(Paper60Hz)?, build_spinlock(12.0 * w60, t)?, t / 2000.0),
                    realizations(100, 1),
                ));
            }
        }
        "appC-ii" => {
            let t = 50e-3;
            let omega = units.angular(1e5);
            out.push(with(
                trace("omega1e5", 6, presets.source(Paper60Hz)?, build_spinlock(omega, t)?, 0.05 / omega),
                realizations(20, 1),
            ));
        }
        "appC-iii" => {
            for pr in Preset::ALL {
                let tau = 0.005 / presets.omega0(pr);
                out.push(with(
                    trace(short(pr), 6, presets.source(pr)?, build_wahuha(100, tau, 0.0, 0.0)?, tau),
                    realizations(100, 1),
                ));
            }
        }
        other => return Err(Error::InvalidParameter(format!("unknown recipe `{other}`"))),
    }
    for job in &mut out {
        if let JobKind::Trace { config, .. } = &mut job.kind {
            config.units = units;
        }
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn resolves_run_labels() {
        let (r, label) = resolve("fig3b-wahuha100").unwrap();
        assert_eq!(r.name, "fig3b");
        assert_eq!(label, Some("wahuha100"));
        assert_eq!(resolve("appC-iv").unwrap().0.name, "appC-iv");
        assert!(resolve("fig7").is_none());
    }

    #[test]
    fn every_recipe_expands() {
        let mut presets = Presets::new(AngularUnits::Bare, 2, 1);
        for r in RECIPES {
            let jobs = jobs(r, &mut presets).unwrap();
            assert!(!jobs.is_empty(), "{}", r.name);
            for j in &jobs {
                if let JobKind::Trace { config, .. } = &j.kind {
                    config.validate().unwrap_or_else(|e| panic!("{}-{}: {e}", r.name, j.label));
                }
            }
        }
    }

    #[test]
    fn wahuha100_has_400_pulses() {
        let mut presets = Presets::new(AngularUnits::Bare, 2, 1);
        let jobs = jobs(find("fig3b").unwrap(), &mut presets).unwrap();
        let j = jobs.iter().find(|j| j.label == "wahuha100").unwrap();
        match &j.kind {
            JobKind::Trace { config, .. } => assert_eq!(config.schedule.pulse_count(), 400),
            _ => unreachable!(),
        }
    }
}

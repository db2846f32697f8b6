//! `spinbath` command-line front end.
//!
//! Exit codes: 0 success, 1 I/O, 2 usage, 3 physics or validation.

mod recipes;

use std::ffi::OsString;
use std::fs::{self, File};
use std::io::{BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand, ValueEnum};
use serde_json::json;

use spinbath::analysis::{extract_typical_strength, fit_decay, fourier_spectrum, DecayModel};
use spinbath::analytic::equal_coupling_spectrum;
use spinbath::engine::{
    default_dt, ensemble_average, CouplingSource, ObservableFrame, SimulationConfig, TraceMetadata, TraceResult,
};
use spinbath::ensemble::{
    nn_coupling_histogram_with, CouplingDistribution, DistributionMeta, EnsembleSpec, HistogramOptions, Preset,
};
use spinbath::model::{AngularUnits, J0_BARE};
use spinbath::noise::NoiseParams;
use spinbath::sequences::{
    average_hamiltonian, build_combined, build_cpmg, build_spinlock, build_wahuha, build_xy8, nv_pair,
    pauli_decomposition_2spin, spin_half_pair, PulseSchedule, PAULI_LABELS,
};
use spinbath::spin::HermitianOperator;

use recipes::{JobKind, Presets, RECIPES};

pub const OUT_DIR_ENV: &str = "SPINBATH_OUT_DIR";

#[derive(Parser, Debug)]
#[command(name = "spinbath", version, about = "Cluster simulations of driven dipolar spin ensembles in a spin bath")]
struct Cli {
    /// Worker threads for realizations (results do not depend on this).
    #[arg(long, global = true)]
    threads: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Build a nearest-neighbour coupling distribution.
    GenDist(GenDistArgs),
    /// Run an ensemble simulation and write the averaged trace.
    Simulate(SimulateArgs),
    /// Spectrum and decay fit of a trace CSV.
    Analyze(AnalyzeArgs),
    /// Zeroth-order average Hamiltonian of a pulse cycle on a spin pair.
    AvgHam(AvgHamArgs),
}

#[derive(Args, Debug)]
struct GenDistArgs {
    /// One of paper-60hz, paper-10khz, paper-1mhz.
    #[arg(long, conflicts_with_all = ["density", "area_um2"], required_unless_present_any = ["density", "area_um2"])]
    preset: Option<String>,
    /// Areal density in cm⁻².
    #[arg(long, requires = "area_um2")]
    density: Option<f64>,
    /// Measurement area in μm².
    #[arg(long = "area-um2", requires = "density")]
    area_um2: Option<f64>,
    #[arg(long, default_value_t = J0_BARE)]
    j0: f64,
    #[arg(long, default_value_t = 1000)]
    realizations: usize,
    #[arg(long, default_value_t = 200)]
    bins: usize,
    /// Upper bin edge as a quantile of the raw samples.
    #[arg(long, default_value_t = 0.99)]
    upper_quantile: f64,
    /// Rescale so that the mean equals this quoted strength.
    #[arg(long)]
    rescale_to: Option<f64>,
    #[arg(long, value_enum, default_value_t = Units::Bare)]
    units: Units,
    #[arg(long, default_value_t = 1)]
    seed: u64,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    out_dir: PathBuf,
    /// Output file stem (default: preset name or `dist`).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum Sequence {
    Free,
    Spinlock,
    Cpmg,
    Xy8,
    Wahuha,
    #[value(name = "cpmg+wahuha")]
    CpmgWahuha,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Units {
    Bare,
    TwoPi,
}

impl From<Units> for AngularUnits {
    fn from(u: Units) -> Self {
        match u {
            Units::Bare => AngularUnits::Bare,
            Units::TwoPi => AngularUnits::TwoPi,
        }
    }
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Observable {
    Toggling,
    Lab,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, ValueEnum)]
enum NoisePreset {
    None,
    PaperBath,
}

#[derive(Args, Debug)]
struct SimulateArgs {
    /// Flat `key = value` file; keys are the long flag names.
    #[arg(long)]
    config: Option<PathBuf>,
    /// Shipped recipe, optionally with a run label (`fig3b-wahuha100`).
    #[arg(long, conflicts_with = "sequence")]
    recipe: Option<String>,
    #[arg(long)]
    list_recipes: bool,
    #[arg(long, value_enum)]
    sequence: Option<Sequence>,

    /// Couplings drawn from a preset distribution (default paper-60hz).
    #[arg(long, group = "couplings")]
    preset: Option<String>,
    /// Couplings drawn from a distribution CSV written by gen-dist.
    #[arg(long, group = "couplings")]
    dist: Option<PathBuf>,
    /// All pairs coupled with this quoted strength.
    #[arg(long, group = "couplings")]
    equal: Option<f64>,
    /// Bath-only problem.
    #[arg(long, group = "couplings")]
    no_dipolar: bool,
    #[arg(long, default_value_t = 6)]
    cluster_size: usize,

    /// Spin-lock Rabi frequency (quoted, s⁻¹).
    #[arg(long)]
    omega: Option<f64>,
    /// CPMG pulse count (also the CPMG backbone of cpmg+wahuha).
    #[arg(long)]
    pulses: Option<usize>,
    /// XY8 or WAHUHA cycle count.
    #[arg(long)]
    reps: Option<usize>,
    #[arg(long, default_value_t = 5)]
    wahuha_per_gap: usize,
    /// Pulse spacing τ in seconds (default: derived from --t-max).
    #[arg(long)]
    tau: Option<f64>,
    #[arg(long, default_value_t = 0.0)]
    pulse_duration: f64,
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,

    #[arg(long)]
    t_max: Option<f64>,
    #[arg(long)]
    dt: Option<f64>,
    #[arg(long)]
    stride: Option<usize>,

    #[arg(long, visible_alias = "recipe-noise", value_enum)]
    noise: Option<NoisePreset>,
    #[arg(long)]
    tau_c: Option<f64>,
    #[arg(long)]
    b: Option<f64>,

    #[arg(long)]
    dipolar_realizations: Option<usize>,
    #[arg(long)]
    noise_realizations: Option<usize>,
    /// Geometries used to build preset distributions.
    #[arg(long, default_value_t = 200)]
    dist_realizations: usize,
    #[arg(long, default_value_t = 1)]
    dist_seed: u64,
    #[arg(long)]
    seed: Option<u64>,

    #[arg(long, value_enum, default_value_t = Units::Bare)]
    units: Units,
    #[arg(long, value_enum, default_value_t = Observable::Toggling)]
    observable: Observable,
    #[arg(long, env = OUT_DIR_ENV, default_value = ".")]
    out_dir: PathBuf,
    /// Output file stem (default `trace`).
    #[arg(long)]
    name: Option<String>,
}

#[derive(Args, Debug)]
struct AnalyzeArgs {
    #[arg(long = "in")]
    input: PathBuf,
    #[arg(long, requires = "omega0")]
    fft: bool,
    /// Typical coupling used to normalize the frequency axis.
    #[arg(long)]
    omega0: Option<f64>,
    #[arg(long)]
    fit: Option<DecayModel>,
    /// Default: next to the input.
    #[arg(long)]
    out_dir: Option<PathBuf>,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum AhtSequence {
    Wahuha,
    Cpmg,
    Xy8,
}

#[derive(Clone, Copy, Debug, ValueEnum)]
enum Pair {
    SpinHalf,
    Nv,
}

#[derive(Args, Debug)]
struct AvgHamArgs {
    #[arg(long, value_enum, default_value_t = AhtSequence::Wahuha)]
    sequence: AhtSequence,
    #[arg(long, value_enum)]
    pair: Pair,
    /// Shift of the second WAHUHA pulse in units of τ.
    #[arg(long, default_value_t = 0.0)]
    epsilon: f64,
    /// Pair coupling w.
    #[arg(long, default_value_t = 1.0)]
    w: f64,
    /// Pulse length in units of τ; only ideal pulses are supported.
    #[arg(long, default_value_t = 0.0)]
    pulse_duration: f64,
    /// Also write the matrix and coefficients as JSON.
    #[arg(long)]
    json: Option<PathBuf>,
}

#[derive(Debug)]
enum CliError {
    Usage(String),
    Core(spinbath::Error),
}

impl From<spinbath::Error> for CliError {
    fn from(e: spinbath::Error) -> Self {
        CliError::Core(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl From<serde_json::Error> for CliError {
    fn from(e: serde_json::Error) -> Self {
        CliError::Core(e.into())
    }
}

impl CliError {
    fn exit_code(&self) -> u8 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Core(e) if e.is_io() => 1,
            CliError::Core(_) => 3,
        }
    }

    fn code(&self) -> &'static str {
        match self {
            CliError::Usage(_) => "USAGE",
            CliError::Core(e) => e.code(),
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => f.write_str(m),
            CliError::Core(e) => write!(f, "{e}"),
        }
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

fn main() -> ExitCode {
    let args = match expand_config(std::env::args_os().collect()) {
        Ok(a) => a,
        Err(e) => return fail(&e),
    };
    let matches = match Cli::command().try_get_matches_from(args) {
        Ok(m) => m,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { 2 } else { 0 });
        }
    };
    let cli = Cli::from_arg_matches(&matches).expect("matches come from the same definition");
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => fail(&e),
    }
}

fn fail(e: &CliError) -> ExitCode {
    eprintln!("error[{}]: {e}", e.code());
    ExitCode::from(e.exit_code())
}

/// Splices `--key value` pairs from the `--config` file in front of the
/// command-line flags, skipping keys that are also given on the command line.
fn expand_config(args: Vec<OsString>) -> CliResult<Vec<OsString>> {
    let strs: Vec<String> = args.iter().map(|a| a.to_string_lossy().into_owned()).collect();
    let Some(sub) = strs.iter().position(|a| a == "simulate") else {
        return Ok(args);
    };
    let path = strs[sub + 1..].iter().enumerate().find_map(|(k, a)| {
        if a == "--config" {
            strs.get(sub + 2 + k).cloned()
        } else {
            a.strip_prefix("--config=").map(str::to_string)
        }
    });
    let Some(path) = path else { return Ok(args) };
    let given = |key: &str| {
        let flag = format!("--{key}");
        strs[sub + 1..].iter().any(|a| *a == flag || a.starts_with(&format!("{flag}=")))
    };
    let ini = ini::Ini::load_from_file(&path).map_err(|e| match e {
        ini::Error::Io(io) => CliError::from(io),
        ini::Error::Parse(p) => CliError::Core(spinbath::Error::Parse { line: p.line, msg: p.msg.to_string() }),
    })?;
    let mut injected = Vec::new();
    for (section, props) in ini.iter() {
        if let Some(s) = section {
            return Err(usage(format!("{path}: sections are not supported (found [{s}])")));
        }
        for (key, value) in props.iter() {
            let key = key.trim().replace('_', "-");
            if key == "config" || given(&key) {
                continue;
            }
            match value.trim() {
                "true" => injected.push(format!("--{key}")),
                "false" => {}
                v => {
                    injected.push(format!("--{key}"));
                    injected.push(v.to_string());
                }
            }
        }
    }
    let mut out: Vec<OsString> = args[..=sub].to_vec();
    out.extend(injected.into_iter().map(OsString::from));
    out.extend(args[sub + 1..].iter().cloned());
    Ok(out)
}

fn run(cli: Cli) -> CliResult<()> {
    if let Some(n) = cli.threads {
        if n == 0 {
            return Err(usage("--threads must be at least 1"));
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .map_err(|e| usage(format!("cannot set thread count: {e}")))?;
    }
    match cli.command {
        Command::GenDist(a) => gen_dist(a),
        Command::Simulate(a) => simulate(a),
        Command::Analyze(a) => analyze(a),
        Command::AvgHam(a) => avg_ham(a),
    }
}

fn create(path: &Path) -> CliResult<BufWriter<File>> {
    Ok(BufWriter::new(File::create(path)?))
}

fn write_text(path: &Path, text: &str) -> CliResult<()> {
    fs::write(path, text)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// gen-dist

fn gen_dist(a: GenDistArgs) -> CliResult<()> {
    let (spec, preset) = match (&a.preset, a.density, a.area_um2) {
        (Some(name), _, _) => {
            let p = Preset::from_name(name)?;
            (EnsembleSpec { j0: a.j0, ..p.spec() }, Some(p))
        }
        (None, Some(d), Some(area)) => (EnsembleSpec::from_density(d, area, a.j0)?, None),
        _ => return Err(usage("give --preset or both --density and --area-um2")),
    };
    let options = HistogramOptions { bins: a.bins, upper_quantile: a.upper_quantile };
    let mut dist = nn_coupling_histogram_with(&spec, a.realizations, options, a.seed)?;
    if let Some(target) = a.rescale_to {
        dist = dist.rescaled_to_mean(AngularUnits::from(a.units).angular(target))?;
    }
    fs::create_dir_all(&a.out_dir)?;
    let stem = a.name.clone().unwrap_or_else(|| preset.map_or("dist".to_string(), |p| p.name().to_string()));
    let csv = a.out_dir.join(format!("{stem}.csv"));
    let mut w = create(&csv)?;
    dist.write_csv(&mut w)?;
    w.flush()?;
    let meta = DistributionMeta {
        spec: spec.clone(),
        density_cm2: spec.density_cm2(),
        seed: a.seed,
        realizations: a.realizations,
        options,
        mean_strength: dist.mean_strength,
        sample_count: dist.sample_count,
        clipped_fraction: dist.clipped_fraction,
        reference_omega0: preset.map(|p| p.reference_omega0()),
    };
    write_text(&a.out_dir.join(format!("{stem}.json")), &serde_json::to_string_pretty(&meta)?)?;
    println!("spins {}  density {:.4e} cm^-2  area {} um^2", spec.n_spins, spec.density_cm2(), spec.area_um2);
    println!("mean strength {:.6e} s^-1", dist.mean_strength);
    println!("wrote {}", csv.display());
    Ok(())
}

// ---------------------------------------------------------------------------
// simulate

fn simulate(a: SimulateArgs) -> CliResult<()> {
    if a.list_recipes {
        for r in RECIPES {
            println!("{:<9} [{}] {}", r.name, r.criteria, r.summary);
        }
        return Ok(());
    }
    let units: AngularUnits = a.units.into();
    let mut presets = Presets::new(units, a.dist_realizations, a.dist_seed);
    fs::create_dir_all(&a.out_dir)?;
    if let Some(spec) = &a.recipe {
        return run_recipe(spec, &a, &mut presets);
    }
    let config = config_from_args(&a, &mut presets)?;
    let stem = a.name.clone().unwrap_or_else(|| "trace".into());
    run_trace(&a.out_dir, &stem, &config, None)
}

fn noise_from_args(a: &SimulateArgs) -> CliResult<Option<NoiseParams>> {
    let base = NoiseParams::paper_bath();
    let explicit = a.tau_c.is_some() || a.b.is_some();
    if a.noise == Some(NoisePreset::None) {
        if explicit {
            return Err(usage("--tau-c/--b given together with --noise none"));
        }
        return Ok(None);
    }
    if a.noise == Some(NoisePreset::PaperBath) || explicit {
        return Ok(Some(NoiseParams::new(a.tau_c.unwrap_or(base.tau_c), a.b.unwrap_or(base.b))?));
    }
    Ok(None)
}

fn config_from_args(a: &SimulateArgs, presets: &mut Presets) -> CliResult<SimulationConfig> {
    let units = presets.units;
    let n = a.cluster_size;
    let (couplings, omega0, omega0_max) = if a.no_dipolar {
        (CouplingSource::None, 0.0, 0.0)
    } else if let Some(w) = a.equal {
        let w = units.angular(w);
        (CouplingSource::Equal { omega0: w }, w, w)
    } else {
        let dist = if let Some(path) = &a.dist {
            CouplingDistribution::read_csv(BufReader::new(File::open(path)?))?
        } else {
            let name = a.preset.as_deref().unwrap_or("paper-60hz");
            presets.get(Preset::from_name(name)?)?
        };
        let (mean, top) = (dist.mean_strength, *dist.bin_edges.last().unwrap());
        (CouplingSource::Distribution { distribution: dist, sampling: Default::default() }, mean, top)
    };
    let noise = noise_from_args(a)?;
    let sequence = a.sequence.unwrap_or(Sequence::Free);

    let default_span = || -> CliResult<f64> {
        if let Some(t) = a.t_max {
            Ok(t)
        } else if omega0 > 0.0 {
            Ok(10.0 / omega0)
        } else if let Some(p) = &noise {
            Ok(10.0 * p.t2_star())
        } else {
            Err(usage("nothing sets a time scale; give --t-max"))
        }
    };
    let spacing = |count: usize| -> CliResult<f64> {
        match (a.tau, a.t_max) {
            (Some(tau), _) => Ok(tau),
            (None, Some(t)) => Ok(t / count as f64),
            _ => Err(usage("give --tau or --t-max for a pulse sequence")),
        }
    };
    let d = a.pulse_duration;
    let mut omega_drive: f64 = 0.0;
    let schedule = match sequence {
        Sequence::Free => PulseSchedule::free(default_span()?)?,
        Sequence::Spinlock => {
            let omega = units.angular(a.omega.ok_or_else(|| usage("spinlock needs --omega"))?);
            omega_drive = omega;
            build_spinlock(omega, default_span()?)?
        }
        Sequence::Cpmg => {
            let k = a.pulses.unwrap_or(1000);
            build_cpmg(k, spacing(k)?, d)?
        }
        Sequence::Xy8 => {
            let r = a.reps.unwrap_or(125);
            build_xy8(r, spacing(8 * r)?, d)?
        }
        Sequence::Wahuha => {
            let r = a.reps.unwrap_or(100);
            build_wahuha(r, spacing(6 * r)?, d, a.epsilon)?
        }
        Sequence::CpmgWahuha => {
            let k = a.pulses.unwrap_or(1000);
            build_combined(k, a.wahuha_per_gap, spacing(k)?, d)?
        }
    };
    if d > 0.0 {
        omega_drive = omega_drive.max(std::f64::consts::PI / (2.0 * d));
    }
    let t_max = a.t_max.unwrap_or_else(|| schedule.total_time());
    let dt = match a.dt {
        Some(dt) => dt,
        None => {
            let mut dt = default_dt(noise.as_ref(), omega_drive, omega0_max).min(t_max / 2000.0);
            if d > 0.0 {
                dt = dt.min(d);
            }
            dt
        }
    };
    let mut c = SimulationConfig::new(n, couplings, schedule, dt, t_max);
    c.noise = noise;
    c.units = units;
    c.observable = match a.observable {
        Observable::Toggling => ObservableFrame::Toggling,
        Observable::Lab => ObservableFrame::Lab,
    };
    c.sample_stride = a.stride.unwrap_or_else(|| ((t_max / dt / 2000.0).round() as usize).max(1));
    c.n_dipolar_realizations = a.dipolar_realizations.unwrap_or(match c.couplings {
        CouplingSource::Distribution { .. } => 100,
        _ => 1,
    });
    c.n_noise_realizations = a.noise_realizations.unwrap_or(if c.noise.is_some() { 100 } else { 1 });
    c.master_seed = a.seed.unwrap_or(0);
    c.validate()?;
    Ok(c)
}

fn run_trace(dir: &Path, stem: &str, config: &SimulationConfig, spectrum_omega0: Option<f64>) -> CliResult<()> {
    let trace = ensemble_average(config)?;
    let csv = dir.join(format!("{stem}.csv"));
    let mut w = create(&csv)?;
    trace.write_csv(&mut w)?;
    w.flush()?;
    write_text(&dir.join(format!("{stem}.json")), &TraceMetadata::new(config, &trace).to_json()?)?;
    println!(
        "{}: {} samples, {} realizations, final <Sx> {:.4}",
        csv.display(),
        trace.len(),
        trace.n_realizations,
        trace.sx_mean.last().copied().unwrap_or(f64::NAN)
    );
    if let Some(w0) = spectrum_omega0 {
        write_spectrum(dir, stem, &trace, w0)?;
    }
    Ok(())
}

fn write_spectrum(dir: &Path, stem: &str, trace: &TraceResult, omega0: f64) -> CliResult<()> {
    let sp = fourier_spectrum(trace, omega0)?;
    let path = dir.join(format!("{stem}_spectrum.csv"));
    let mut w = create(&path)?;
    sp.write_csv(&mut w)?;
    w.flush()?;
    match extract_typical_strength(&sp) {
        Ok(t) => println!(
            "{}: dominant line at {:.3} w0, typical strength {:.4e} +- {:.2e} s^-1",
            path.display(),
            t.omega0 * 4.0 / omega0,
            t.omega0,
            t.uncertainty
        ),
        Err(e) => println!("{}: {e}", path.display()),
    }
    Ok(())
}

fn run_recipe(spec: &str, a: &SimulateArgs, presets: &mut Presets) -> CliResult<()> {
    let (recipe, label) = recipes::resolve(spec).ok_or_else(|| {
        let names: Vec<&str> = RECIPES.iter().map(|r| r.name).collect();
        usage(format!("unknown recipe `{spec}` (known: {})", names.join(", ")))
    })?;
    let mut jobs = recipes::jobs(recipe, presets)?;
    if let Some(label) = label {
        jobs.retain(|j| j.label == label);
        if jobs.is_empty() {
            return Err(usage(format!("recipe {} has no run `{label}`", recipe.name)));
        }
    }
    let dir = &a.out_dir;
    let mut runs = Vec::new();
    for job in jobs {
        let stem = format!("{}-{}", recipe.name, job.label);
        match job.kind {
            JobKind::Trace { mut config, spectrum_omega0 } => {
                if let Some(s) = a.seed {
                    config.master_seed = s;
                }
                if let (Some(k), CouplingSource::Distribution { .. }) = (a.dipolar_realizations, &config.couplings) {
                    config.n_dipolar_realizations = k;
                }
                if let (Some(k), Some(_)) = (a.noise_realizations, &config.noise) {
                    config.n_noise_realizations = k;
                }
                config.validate()?;
                run_trace(dir, &stem, &config, spectrum_omega0)?;
                runs.push(json!({ "label": job.label, "file": format!("{stem}.csv"), "fingerprint": config.fingerprint() }));
            }
            JobKind::Distribution { preset } => {
                let dist = presets.raw(preset)?;
                let path = dir.join(format!("{stem}.csv"));
                let mut w = create(&path)?;
                dist.write_csv(&mut w)?;
                w.flush()?;
                println!("{}: mean strength {:.4e} s^-1", path.display(), dist.mean_strength);
                runs.push(json!({ "label": job.label, "file": format!("{stem}.csv"), "mean_strength": dist.mean_strength }));
            }
            JobKind::AnalyticSpectra { sizes } => {
                let path = dir.join(format!("{stem}.csv"));
                let mut w = create(&path)?;
                writeln!(w, "n_spins,freq_multiple,weight")?;
                for n in sizes {
                    let s = equal_coupling_spectrum(n)?;
                    if s.dc > 0.0 {
                        writeln!(w, "{n},0,{:e}", s.dc)?;
                    }
                    for l in &s.lines {
                        writeln!(w, "{n},{},{:e}", l.freq_multiple, l.weight)?;
                    }
                }
                w.flush()?;
                println!("{}", path.display());
                runs.push(json!({ "label": job.label, "file": format!("{stem}.csv") }));
            }
            JobKind::AverageHamiltonians => {
                let mut cases = Vec::new();
                for (pair, eps) in [("spin-half", 0.0), ("nv", 0.0), ("nv", 0.01), ("nv", 0.02), ("nv", 0.04)] {
                    let h = if pair == "nv" { nv_pair(1.0)? } else { spin_half_pair(1.0)? };
                    let avg = average_hamiltonian(&build_wahuha(1, 1.0, 0.0, eps)?, &h)?;
                    cases.push(json!({ "pair": pair, "epsilon": eps, "pauli": pauli_json(&pauli_decomposition_2spin(&avg)?) }));
                }
                let path = dir.join(format!("{stem}.json"));
                write_text(&path, &serde_json::to_string_pretty(&json!({ "w": 1.0, "cases": cases }))?)?;
                println!("{}", path.display());
                runs.push(json!({ "label": job.label, "file": format!("{stem}.json") }));
            }
        }
    }
    let manifest = json!({
        "recipe": recipe.name,
        "summary": recipe.summary,
        "criteria": recipe.criteria,
        "expect": recipe.expect,
        "runs": runs,
    });
    let name = match label {
        Some(l) => format!("{}-{l}.recipe.json", recipe.name),
        None => format!("{}.recipe.json", recipe.name),
    };
    write_text(&dir.join(name), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(())
}

// ---------------------------------------------------------------------------
// analyze

fn analyze(a: AnalyzeArgs) -> CliResult<()> {
    if !a.fft && a.fit.is_none() {
        return Err(usage("nothing to do: give --fft and/or --fit"));
    }
    let trace = TraceResult::read_csv(BufReader::new(File::open(&a.input)?))?;
    let dir = match &a.out_dir {
        Some(d) => d.clone(),
        None => a.input.parent().map(Path::to_path_buf).unwrap_or_default(),
    };
    fs::create_dir_all(if dir.as_os_str().is_empty() { Path::new(".") } else { &dir })?;
    let stem = a.input.file_stem().map(|s| s.to_string_lossy().into_owned()).unwrap_or_else(|| "trace".into());
    if a.fft {
        write_spectrum(&dir, &stem, &trace, a.omega0.expect("clap enforces --omega0"))?;
    }
    if let Some(model) = a.fit {
        let fit = fit_decay(&trace, model)?;
        let path = dir.join(format!("{stem}_fit.json"));
        write_text(&path, &fit.to_json()?)?;
        println!(
            "{}: {} decay time {:.6e} s (p = {:.3}, rms residual {:.2e})",
            path.display(),
            model,
            fit.t_seconds,
            fit.p,
            fit.residual
        );
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// avg-ham

fn pauli_json(c: &[[f64; 4]; 4]) -> serde_json::Value {
    let mut m = serde_json::Map::new();
    for (a, row) in c.iter().enumerate() {
        for (b, v) in row.iter().enumerate() {
            m.insert(format!("{}{}", PAULI_LABELS[a], PAULI_LABELS[b]), json!(v));
        }
    }
    serde_json::Value::Object(m)
}

fn matrix_json(h: &HermitianOperator) -> serde_json::Value {
    let m = h.matrix();
    let rows: Vec<Vec<[f64; 2]>> =
        (0..m.nrows()).map(|i| (0..m.ncols()).map(|j| [m[(i, j)].re, m[(i, j)].im]).collect()).collect();
    json!(rows)
}

fn avg_ham(a: AvgHamArgs) -> CliResult<()> {
    if a.epsilon != 0.0 && !matches!(a.sequence, AhtSequence::Wahuha) {
        return Err(usage("--epsilon applies to wahuha only"));
    }
    let d = a.pulse_duration;
    let schedule = match a.sequence {
        AhtSequence::Wahuha => build_wahuha(1, 1.0, d, a.epsilon)?,
        AhtSequence::Cpmg => build_cpmg(2, 1.0, d)?,
        AhtSequence::Xy8 => build_xy8(1, 1.0, d)?,
    };
    let h = match a.pair {
        Pair::SpinHalf => spin_half_pair(a.w)?,
        Pair::Nv => nv_pair(a.w)?,
    };
    let avg = average_hamiltonian(&schedule, &h)?;
    let coeffs = pauli_decomposition_2spin(&avg)?;
    println!("average Hamiltonian, Pauli coefficients in units of w = {}:", a.w);
    let mut any = false;
    for (i, row) in coeffs.iter().enumerate() {
        for (j, &c) in row.iter().enumerate() {
            if c.abs() > 1e-12 {
                println!("  {}{}  {:+.12}", PAULI_LABELS[i], PAULI_LABELS[j], c / a.w);
                any = true;
            }
        }
    }
    if !any {
        println!("  (all zero)");
    }
    if let Some(path) = &a.json {
        let doc = json!({
            "sequence": format!("{:?}", a.sequence).to_lowercase(),
            "pair": format!("{:?}", a.pair).to_lowercase(),
            "epsilon": a.epsilon,
            "w": a.w,
            "matrix": matrix_json(&avg),
            "pauli": pauli_json(&coeffs),
        });
        write_text(path, &serde_json::to_string_pretty(&doc)?)?;
    }
    Ok(())
}

//! Quasi-2D spin geometries, the nearest-neighbour coupling distribution built
//! from them, and cluster coupling matrices drawn from that distribution.

use std::io::{BufRead, Write};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CouplingMatrix, J0_BARE};
use crate::seed::{derive_seed, STREAM_GEOMETRY};
use crate::spin::MAX_SPINS;

const NM2_PER_UM2: f64 = 1e6;
const CM2_PER_UM2: f64 = 1e-8;

/// Spins placed uniformly on a disc of the given area.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EnsembleSpec {
    pub n_spins: usize,
    pub area_um2: f64,
    /// J₀ in s⁻¹·nm³
    pub j0: f64,
}

impl EnsembleSpec {
    pub fn new(n_spins: usize, area_um2: f64, j0: f64) -> Result<Self> {
        if n_spins < 2 {
            return Err(Error::InvalidParameter(format!("ensemble needs at least 2 spins, got {n_spins}")));
        }
        if !(area_um2 > 0.0) || !area_um2.is_finite() {
            return Err(Error::InvalidParameter(format!("area {area_um2} μm² must be positive")));
        }
        if !(j0 > 0.0) {
            return Err(Error::InvalidParameter(format!("J0 = {j0} must be positive")));
        }
        Ok(Self { n_spins, area_um2, j0 })
    }

    /// Spin count rounded from density (cm⁻²) times area (μm²).
    pub fn from_density(density_cm2: f64, area_um2: f64, j0: f64) -> Result<Self> {
        let n = (density_cm2 * area_um2 * CM2_PER_UM2).round();
        if !n.is_finite() || n < 0.0 {
            return Err(Error::InvalidParameter(format!("density {density_cm2} cm⁻² is invalid")));
        }
        Self::new(n as usize, area_um2, j0)
    }

    /// Spins per cm².
    pub fn density_cm2(&self) -> f64 {
        self.n_spins as f64 / (self.area_um2 * CM2_PER_UM2)
    }

    pub fn radius_nm(&self) -> f64 {
        (self.area_um2 * NM2_PER_UM2 / std::f64::consts::PI).sqrt()
    }
}

/// The three measurement configurations used throughout the study.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum Preset {
    /// 464 spins on ≈4.5 μm², reference ω₀ ≈ 60 Hz
    Paper60Hz,
    /// 9980 spins on ≈4.5 μm², reference ω₀ ≈ 10 kHz
    Paper10kHz,
    /// 9980 spins on ≈0.46 μm², reference ω₀ ≈ 1 MHz
    Paper1MHz,
}

impl Preset {
    pub const ALL: [Preset; 3] = [Preset::Paper60Hz, Preset::Paper10kHz, Preset::Paper1MHz];

    pub fn name(self) -> &'static str {
        match self {
            Preset::Paper60Hz => "paper-60hz",
            Preset::Paper10kHz => "paper-10khz",
            Preset::Paper1MHz => "paper-1mhz",
        }
    }

    pub fn from_name(name: &str) -> Result<Self> {
        Self::ALL
            .into_iter()
            .find(|p| p.name() == name)
            .ok_or_else(|| Error::InvalidParameter(format!("unknown preset `{name}`")))
    }

    pub fn spec(self) -> EnsembleSpec {
        let (n, area) = match self {
            Preset::Paper60Hz => (464, 4.5),
            Preset::Paper10kHz => (9980, 4.5),
            Preset::Paper1MHz => (9980, 0.46),
        };
        EnsembleSpec { n_spins: n, area_um2: area, j0: J0_BARE }
    }

    /// Quoted typical coupling strength (before any 2π factor).
    pub fn reference_omega0(self) -> f64 {
        match self {
            Preset::Paper60Hz => 60.0,
            Preset::Paper10kHz => 1e4,
            Preset::Paper1MHz => 1e6,
        }
    }
}

/// Uniform points on the disc of area `spec.area_um2`, in nm.
pub fn sample_positions(spec: &EnsembleSpec, seed: u64) -> Vec<[f64; 2]> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    disc_points(spec.n_spins, spec.radius_nm(), &mut rng)
}

fn disc_points<R: Rng>(n: usize, radius: f64, rng: &mut R) -> Vec<[f64; 2]> {
    (0..n)
        .map(|_| {
            let u: f64 = rng.random();
            let v: f64 = rng.random();
            let r = radius * u.sqrt();
            let (s, c) = (std::f64::consts::TAU * v).sin_cos();
            [r * c, r * s]
        })
        .collect()
}

/// J₀ / r_nn³ for every point's nearest neighbour.
pub fn nearest_neighbor_strengths(points: &[[f64; 2]], j0: f64) -> Result<Vec<f64>> {
    if points.len() < 2 {
        return Err(Error::InvalidParameter("nearest neighbours need at least 2 spins".into()));
    }
    Ok(nearest_neighbor_distances(points).into_iter().map(|r| j0 / (r * r * r)).collect())
}

fn nearest_neighbor_distances(points: &[[f64; 2]]) -> Vec<f64> {
    let n = points.len();
    let (mut lo, mut hi) = ([f64::INFINITY; 2], [f64::NEG_INFINITY; 2]);
    for p in points {
        for k in 0..2 {
            lo[k] = lo[k].min(p[k]);
            hi[k] = hi[k].max(p[k]);
        }
    }
    let extent = (hi[0] - lo[0]).max(hi[1] - lo[1]).max(1e-12);
    let cells = ((n as f64).sqrt().ceil() as usize).max(1);
    let size = extent / cells as f64 * (1.0 + 1e-12);
    let cell_of = |p: &[f64; 2]| {
        let cx = (((p[0] - lo[0]) / size) as usize).min(cells - 1);
        let cy = (((p[1] - lo[1]) / size) as usize).min(cells - 1);
        (cx, cy)
    };
    let mut grid: Vec<Vec<usize>> = vec![Vec::new(); cells * cells];
    for (i, p) in points.iter().enumerate() {
        let (cx, cy) = cell_of(p);
        grid[cy * cells + cx].push(i);
    }
    points
        .iter()
        .enumerate()
        .map(|(i, p)| {
            let (cx, cy) = cell_of(p);
            let mut best2 = f64::INFINITY;
            for ring in 0..=cells {
                let reach = ring.saturating_sub(1) as f64 * size;
                if best2.is_finite() && best2 <= reach * reach {
                    break;
                }
                let (x0, x1) = (cx.saturating_sub(ring), (cx + ring).min(cells - 1));
                let (y0, y1) = (cy.saturating_sub(ring), (cy + ring).min(cells - 1));
                for gy in y0..=y1 {
                    for gx in x0..=x1 {
                        let on_ring = gx + ring == cx || gx == cx + ring || gy + ring == cy || gy == cy + ring;
                        if !on_ring {
                            continue;
                        }
                        for &j in &grid[gy * cells + gx] {
                            if j != i {
                                let d2 = (points[j][0] - p[0]).powi(2) + (points[j][1] - p[1]).powi(2);
                                best2 = best2.min(d2);
                            }
                        }
                    }
                }
            }
            best2.sqrt()
        })
        .collect()
}

/// Histogram of coupling strengths (s⁻¹).
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CouplingDistribution {
    pub bin_edges: Vec<f64>,
    pub probabilities: Vec<f64>,
    pub mean_strength: f64,
    pub sample_count: usize,
    /// Fraction of raw samples above the upper edge, dropped before normalizing.
    pub clipped_fraction: f64,
}

/// Binning choices for [`CouplingDistribution::from_samples`].
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HistogramOptions {
    pub bins: usize,
    /// Upper bin edge as a quantile of the raw samples. The nearest-neighbour
    /// strength J₀/r³ has a tail too heavy for a finite mean, so the
    /// histogram is truncated.
    pub upper_quantile: f64,
}

impl Default for HistogramOptions {
    fn default() -> Self {
        Self { bins: 200, upper_quantile: 0.99 }
    }
}

impl CouplingDistribution {
    pub fn new(bin_edges: Vec<f64>, probabilities: Vec<f64>) -> Result<Self> {
        if probabilities.is_empty() || bin_edges.len() != probabilities.len() + 1 {
            return Err(Error::EmptyDistribution);
        }
        if bin_edges.windows(2).any(|w| !(w[1] > w[0])) || bin_edges[0] < 0.0 {
            return Err(Error::InvalidParameter("bin edges must be non-negative and strictly increasing".into()));
        }
        if probabilities.iter().any(|p| !(*p >= 0.0)) {
            return Err(Error::InvalidParameter("negative probability".into()));
        }
        let total: f64 = probabilities.iter().sum();
        if !(total > 0.0) {
            return Err(Error::EmptyDistribution);
        }
        let probabilities: Vec<f64> = probabilities.iter().map(|p| p / total).collect();
        let mut d = Self { bin_edges, probabilities, mean_strength: 0.0, sample_count: 0, clipped_fraction: 0.0 };
        d.mean_strength = d.histogram_mean();
        Ok(d)
    }

    pub fn from_samples(samples: &[f64], options: HistogramOptions) -> Result<Self> {
        if samples.is_empty() || options.bins == 0 {
            return Err(Error::EmptyDistribution);
        }
        let mut sorted = samples.to_vec();
        sorted.sort_by(f64::total_cmp);
        let lo = sorted[0];
        let q = options.upper_quantile.clamp(0.0, 1.0);
        let hi_idx = ((sorted.len() - 1) as f64 * q).round() as usize;
        let mut hi = sorted[hi_idx];
        let (lo, hi) = if hi > lo {
            (lo, hi)
        } else {
            hi = lo;
            (lo * (1.0 - 1e-9), hi * (1.0 + 1e-9) + f64::MIN_POSITIVE)
        };
        let bins = options.bins;
        let width = (hi - lo) / bins as f64;
        let edges: Vec<f64> = (0..=bins).map(|k| if k == bins { hi } else { lo + width * k as f64 }).collect();
        let mut counts = vec![0.0; bins];
        let mut clipped = 0usize;
        for &s in &sorted {
            if s > hi {
                clipped += 1;
                continue;
            }
            let k = (((s - lo) / width) as usize).min(bins - 1);
            counts[k] += 1.0;
        }
        let mut d = Self::new(edges, counts)?;
        d.sample_count = samples.len();
        d.clipped_fraction = clipped as f64 / samples.len() as f64;
        Ok(d)
    }

    fn histogram_mean(&self) -> f64 {
        self.probabilities
            .iter()
            .zip(self.bin_edges.windows(2))
            .map(|(p, w)| p * 0.5 * (w[0] + w[1]))
            .sum()
    }

    /// Every strength multiplied by `factor`.
    pub fn rescaled(&self, factor: f64) -> Result<Self> {
        if !(factor > 0.0) {
            return Err(Error::InvalidParameter(format!("scale factor {factor} must be positive")));
        }
        Ok(Self {
            bin_edges: self.bin_edges.iter().map(|e| e * factor).collect(),
            probabilities: self.probabilities.clone(),
            mean_strength: self.mean_strength * factor,
            sample_count: self.sample_count,
            clipped_fraction: self.clipped_fraction,
        })
    }

    /// Same shape, rescaled so that the histogram mean equals `omega0`.
    pub fn rescaled_to_mean(&self, omega0: f64) -> Result<Self> {
        self.rescaled(omega0 / self.mean_strength)
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let mut acc = 0.0;
        for (p, w) in self.probabilities.iter().zip(self.bin_edges.windows(2)) {
            if x >= w[1] {
                acc += p;
            } else if x > w[0] {
                acc += p * (x - w[0]) / (w[1] - w[0]);
                break;
            } else {
                break;
            }
        }
        acc.min(1.0)
    }

    /// One strength: bin by probability, uniform within the bin.
    pub fn sample<R: Rng>(&self, rng: &mut R) -> f64 {
        let u: f64 = rng.random();
        let mut acc = 0.0;
        let last = self.probabilities.len() - 1;
        for (k, p) in self.probabilities.iter().enumerate() {
            acc += p;
            if u < acc || k == last {
                let v: f64 = rng.random();
                return self.bin_edges[k] + v * (self.bin_edges[k + 1] - self.bin_edges[k]);
            }
        }
        unreachable!()
    }

    /// CSV `bin_low_hz,bin_high_hz,probability`.
    pub fn write_csv<W: Write>(&self, mut w: W) -> Result<()> {
        writeln!(w, "bin_low_hz,bin_high_hz,probability")?;
        for (p, e) in self.probabilities.iter().zip(self.bin_edges.windows(2)) {
            writeln!(w, "{:e},{:e},{:e}", e[0], e[1], p)?;
        }
        Ok(())
    }

    pub fn read_csv<R: BufRead>(r: R) -> Result<Self> {
        let mut edges: Vec<f64> = Vec::new();
        let mut probs = Vec::new();
        for (i, line) in r.lines().enumerate() {
            let line = line?;
            let lineno = i + 1;
            if i == 0 {
                if line.trim() != "bin_low_hz,bin_high_hz,probability" {
                    return Err(Error::Parse { line: lineno, msg: format!("unexpected header `{line}`") });
                }
                continue;
            }
            if line.trim().is_empty() {
                continue;
            }
            let fields: Vec<&str> = line.split(',').collect();
            if fields.len() != 3 {
                return Err(Error::Parse { line: lineno, msg: "expected 3 fields".into() });
            }
            let parse = |s: &str| {
                s.trim()
                    .parse::<f64>()
                    .map_err(|e| Error::Parse { line: lineno, msg: format!("`{s}`: {e}") })
            };
            let (lo, hi, p) = (parse(fields[0])?, parse(fields[1])?, parse(fields[2])?);
            match edges.last() {
                None => edges.push(lo),
                Some(&prev) if (prev - lo).abs() > 1e-9 * prev.abs().max(1.0) => {
                    return Err(Error::Parse { line: lineno, msg: "bins are not contiguous".into() });
                }
                _ => {}
            }
            edges.push(hi);
            probs.push(p);
        }
        Self::new(edges, probs)
    }
}

/// Sidecar metadata written next to a distribution CSV.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DistributionMeta {
    pub spec: EnsembleSpec,
    pub density_cm2: f64,
    pub seed: u64,
    pub realizations: usize,
    pub options: HistogramOptions,
    pub mean_strength: f64,
    pub sample_count: usize,
    pub clipped_fraction: f64,
    pub reference_omega0: Option<f64>,
}

/// Nearest-neighbour strength histogram accumulated over `realizations`
/// independent geometries.
pub fn nn_coupling_histogram(spec: &EnsembleSpec, realizations: usize, bins: usize, seed: u64) -> Result<CouplingDistribution> {
    nn_coupling_histogram_with(spec, realizations, HistogramOptions { bins, ..Default::default() }, seed)
}

pub fn nn_coupling_histogram_with(
    spec: &EnsembleSpec,
    realizations: usize,
    options: HistogramOptions,
    seed: u64,
) -> Result<CouplingDistribution> {
    if realizations == 0 {
        return Err(Error::InvalidParameter("need at least one realization".into()));
    }
    if spec.n_spins < 2 {
        return Err(Error::InvalidParameter("nearest neighbours need at least 2 spins".into()));
    }
    let per_realization: Vec<Vec<f64>> = (0..realizations as u64)
        .into_par_iter()
        .map(|r| {
            let pts = sample_positions(spec, derive_seed(seed, &[STREAM_GEOMETRY, r]));
            nearest_neighbor_strengths(&pts, spec.j0)
        })
        .collect::<Result<_>>()?;
    let samples: Vec<f64> = per_realization.into_iter().flatten().collect();
    CouplingDistribution::from_samples(&samples, options)
}

/// Histogram mean, used as the typical coupling strength ω₀.
pub fn typical_strength(dist: &CouplingDistribution) -> Result<f64> {
    if dist.probabilities.is_empty() {
        return Err(Error::EmptyDistribution);
    }
    Ok(dist.mean_strength)
}

/// How cluster couplings are generated.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case", tag = "mode")]
pub enum ClusterSampling {
    /// Every pair strength drawn independently from the distribution.
    #[default]
    IidPairs,
    /// Positions drawn on a disc holding `cluster_size` spins at the given
    /// density; all pairs coupled by J₀/r³.
    Positions { density_cm2: f64, j0: f64 },
}

pub fn draw_cluster_couplings(dist: &CouplingDistribution, cluster_size: usize, seed: u64) -> Result<CouplingMatrix> {
    draw_cluster_couplings_with(dist, cluster_size, ClusterSampling::IidPairs, seed)
}

pub fn draw_cluster_couplings_with(
    dist: &CouplingDistribution,
    cluster_size: usize,
    mode: ClusterSampling,
    seed: u64,
) -> Result<CouplingMatrix> {
    if !(2..=MAX_SPINS).contains(&cluster_size) {
        return Err(Error::InvalidParameter(format!("cluster size {cluster_size} outside 2..=10")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match mode {
        ClusterSampling::IidPairs => {
            let n_pairs = cluster_size * (cluster_size - 1) / 2;
            let pairs: Vec<f64> = (0..n_pairs).map(|_| dist.sample(&mut rng)).collect();
            CouplingMatrix::from_pairs(cluster_size, &pairs)
        }
        ClusterSampling::Positions { density_cm2, j0 } => {
            let area_nm2 = cluster_size as f64 / (density_cm2 * 1e-14);
            let radius = (area_nm2 / std::f64::consts::PI).sqrt();
            let pts = disc_points(cluster_size, radius, &mut rng);
            let mut pairs = Vec::with_capacity(cluster_size * (cluster_size - 1) / 2);
            for i in 0..cluster_size {
                for j in i + 1..cluster_size {
                    let r2 = (pts[i][0] - pts[j][0]).powi(2) + (pts[i][1] - pts[j][1]).powi(2);
                    pairs.push(j0 / (r2 * r2.sqrt()));
                }
            }
            CouplingMatrix::from_pairs(cluster_size, &pairs)
        }
    }
}

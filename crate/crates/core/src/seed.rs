//! Deterministic per-task seed derivation.

const GOLDEN: u64 = 0x9E37_79B9_7F4A_7C15;

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(GOLDEN);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Mixes a master seed with a path of indices (stream tag, realization, ...).
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    path.iter().fold(splitmix(master), |acc, &p| splitmix(acc ^ splitmix(p)))
}

pub(crate) const STREAM_DIPOLAR: u64 = 1;
pub(crate) const STREAM_NOISE: u64 = 2;
pub(crate) const STREAM_GEOMETRY: u64 = 3;

//! Perturbation vectors with density proportional to `exp(-gamma * ||b||_2)`.
//!
//! In `p` dimensions that density factors into a norm distributed as
//! `Gamma(shape = p, scale = 1/gamma)` and an independent direction uniform
//! on the unit sphere.

use ndarray::Array1;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Gamma, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

/// RNG used for every stream in the crate. ChaCha output is specified
/// bit-for-bit, so runs replay identically across platforms.
pub type Stream = ChaCha8Rng;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub gamma: f64,
    pub dim: usize,
    pub seed: u64,
}

impl NoiseSpec {
    pub fn new(gamma: f64, dim: usize, seed: u64) -> Result<Self> {
        let spec = Self { gamma, dim, seed };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma.is_finite()) {
            return Err(Error::param(
                "gamma",
                format!("must be finite and > 0, got {}", self.gamma),
            ));
        }
        if self.dim == 0 {
            return Err(Error::param("dim", "must be at least 1"));
        }
        Ok(())
    }

    pub fn stream(&self) -> Stream {
        stream(self.seed)
    }
}

pub fn stream(seed: u64) -> Stream {
    ChaCha8Rng::seed_from_u64(seed)
}

/// Derives a child stream seed as the first 8 bytes (little endian) of
/// `SHA-256(master || path[0] || path[1] || ...)`, each word little endian.
pub fn derive_seed(master: u64, path: &[u64]) -> u64 {
    let mut hasher = Sha256::new();
    hasher.update(master.to_le_bytes());
    for word in path {
        hasher.update(word.to_le_bytes());
    }
    let digest = hasher.finalize();
    let mut out = [0u8; 8];
    out.copy_from_slice(&digest[..8]);
    u64::from_le_bytes(out)
}

/// Draws `b = r * u` with `r ~ Gamma(dim, 1/gamma)` and `u` uniform on the sphere.
pub fn sample_noise<R: Rng + ?Sized>(spec: &NoiseSpec, rng: &mut R) -> Result<Array1<f64>> {
    spec.validate()?;
    let norm_law = Gamma::new(spec.dim as f64, 1.0 / spec.gamma)
        .map_err(|e| Error::param("gamma", e.to_string()))?;
    let radius = norm_law.sample(rng);
    Ok(unit_direction(spec.dim, rng) * radius)
}

/// Uniform direction on the unit sphere in `dim` dimensions, by normalizing a
/// standard normal vector.
pub fn unit_direction<R: Rng + ?Sized>(dim: usize, rng: &mut R) -> Array1<f64> {
    loop {
        let g: Array1<f64> = (0..dim).map(|_| StandardNormal.sample(rng)).collect();
        let norm = g.dot(&g).sqrt();
        if norm > 0.0 && norm.is_finite() {
            return g / norm;
        }
    }
}

pub fn zero_noise(dim: usize) -> Array1<f64> {
    Array1::zeros(dim)
}

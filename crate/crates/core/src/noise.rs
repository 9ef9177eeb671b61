//! Reproducible Brownian and Poisson noise.
//!
//! Every simulated path owns a [`RandomStream`] keyed by `(master_seed,
//! stream_id)`. The underlying generator is ChaCha8, which is counter based:
//! the key is derived from the master seed and the path index selects the
//! 64-bit stream, so draws never depend on which worker runs the path.

use rand_chacha::ChaCha8Rng;
use rand_core::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Brownian intensities and the single-mark jump specification. Jump sizes
/// are multiplicative: one event scales the prey by `1 + jump1`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NoiseParams {
    pub sigma1: f64,
    pub sigma2: f64,
    pub lambda: f64,
    pub jump1: f64,
    pub jump2: f64,
}

impl Default for NoiseParams {
    fn default() -> Self {
        NoiseParams { sigma1: 0.02, sigma2: 0.02, lambda: 1.0, jump1: 1.0, jump2: 1.0 }
    }
}

impl NoiseParams {
    pub const NONE: NoiseParams = NoiseParams { sigma1: 0.0, sigma2: 0.0, lambda: 0.0, jump1: 0.0, jump2: 0.0 };

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("sigma1", self.sigma1),
            ("sigma2", self.sigma2),
            ("lambda", self.lambda),
            ("jump1", self.jump1),
            ("jump2", self.jump2),
        ] {
            if !v.is_finite() {
                return Err(Error::constraint(name, "must be finite"));
            }
        }
        for (name, v) in [("sigma1", self.sigma1), ("sigma2", self.sigma2), ("lambda", self.lambda)] {
            if v < 0.0 {
                return Err(Error::constraint(name, "must be nonnegative"));
            }
        }
        for (name, v) in [("jump1", self.jump1), ("jump2", self.jump2)] {
            if v <= -1.0 {
                return Err(Error::constraint(name, "must exceed -1"));
            }
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.sigma1 == 0.0 && self.sigma2 == 0.0 && (self.lambda == 0.0 || (self.jump1 == 0.0 && self.jump2 == 0.0))
    }
}

/// Noise consumed by one integration step.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub struct NoiseIncrement {
    pub dw1: f64,
    pub dw2: f64,
    pub dn1: u32,
    pub dn2: u32,
}

impl NoiseIncrement {
    pub const ZERO: NoiseIncrement = NoiseIncrement { dw1: 0.0, dw2: 0.0, dn1: 0, dn2: 0 };
}

const TWO_POW_NEG_53: f64 = 1.0 / (1u64 << 53) as f64;

/// A single-owner generator for one path.
#[derive(Debug, Clone)]
pub struct RandomStream {
    master_seed: u64,
    stream_id: u64,
    rng: ChaCha8Rng,
    spare: Option<f64>,
}

fn splitmix64(state: &mut u64) -> u64 {
    *state = state.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let mut z = *state;
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

impl RandomStream {
    pub fn new(master_seed: u64, stream_id: u64) -> Self {
        // the first splitmix output is a bijection of the seed, so distinct
        // seeds always give distinct keys
        let mut sm = master_seed;
        let mut key = [0u8; 32];
        for chunk in key.chunks_exact_mut(8) {
            chunk.copy_from_slice(&splitmix64(&mut sm).to_le_bytes());
        }
        let mut rng = ChaCha8Rng::from_seed(key);
        rng.set_stream(stream_id);
        RandomStream { master_seed, stream_id, rng, spare: None }
    }

    pub fn master_seed(&self) -> u64 {
        self.master_seed
    }

    pub fn stream_id(&self) -> u64 {
        self.stream_id
    }

    pub fn next_u64(&mut self) -> u64 {
        self.rng.next_u64()
    }

    /// Uniform on `[0, 1)` with 53 bits of resolution.
    pub fn uniform(&mut self) -> f64 {
        (self.next_u64() >> 11) as f64 * TWO_POW_NEG_53
    }

    /// Uniform with zero replaced by the smallest positive normal double.
    pub fn uniform_nonzero(&mut self) -> f64 {
        let u = self.uniform();
        if u == 0.0 {
            f64::MIN_POSITIVE
        } else {
            u
        }
    }

    /// Standard normal, using the cached second value of the last pair.
    pub fn standard_normal(&mut self) -> f64 {
        if let Some(z) = self.spare.take() {
            return z;
        }
        let (z1, z2) = gaussian_pair(self);
        self.spare = Some(z2);
        z1
    }
}

/// Stream for path `path_index` of an ensemble seeded with `master_seed`.
pub fn derive_stream(master_seed: u64, path_index: u64) -> RandomStream {
    RandomStream::new(master_seed, path_index)
}

/// `(sin, cos)` of `2 pi turns`, exact at quarter turns.
fn sin_cos_turns(turns: f64) -> (f64, f64) {
    let quarters = turns * 4.0;
    if quarters.fract() == 0.0 {
        match (quarters as i64).rem_euclid(4) {
            0 => (0.0, 1.0),
            1 => (1.0, 0.0),
            2 => (0.0, -1.0),
            _ => (-1.0, 0.0),
        }
    } else {
        (std::f64::consts::TAU * turns).sin_cos()
    }
}

/// Box-Muller transform of `u1 in (0, 1]`, `u2 in [0, 1)`.
pub fn box_muller(u1: f64, u2: f64) -> (f64, f64) {
    let radius = (-2.0 * u1.ln()).sqrt();
    let (s, c) = sin_cos_turns(u2);
    (radius * c, radius * s)
}

/// Pair of independent standard normals.
pub fn gaussian_pair(stream: &mut RandomStream) -> (f64, f64) {
    let u1 = stream.uniform_nonzero();
    let u2 = stream.uniform();
    box_muller(u1, u2)
}

/// Brownian increment over a step of length `dt`.
pub fn brownian_increment(stream: &mut RandomStream, dt: f64) -> Result<f64> {
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step must be positive and finite, got {dt}")));
    }
    Ok(stream.standard_normal() * dt.sqrt())
}

/// Largest mean handled by a single inversion; larger means are split into
/// independent chunks, which keeps the sum exactly Poisson.
const POISSON_CHUNK: f64 = 16.0;

fn poisson_inversion(stream: &mut RandomStream, mean: f64) -> u32 {
    let u = stream.uniform();
    let mut k = 0u32;
    let mut p = (-mean).exp();
    let mut cdf = p;
    while u >= cdf && k < 10_000 {
        k += 1;
        p *= mean / k as f64;
        if p == 0.0 {
            break;
        }
        cdf += p;
    }
    k
}

/// Number of jump events in a step of length `dt` at intensity `lambda`.
/// Draws nothing from the stream when `lambda == 0`.
pub fn poisson_count(stream: &mut RandomStream, lambda: f64, dt: f64) -> Result<u32> {
    if !(lambda >= 0.0) || !lambda.is_finite() {
        return Err(Error::invalid(format!("jump intensity must be nonnegative and finite, got {lambda}")));
    }
    if !(dt > 0.0) || !dt.is_finite() {
        return Err(Error::invalid(format!("time step must be positive and finite, got {dt}")));
    }
    Ok(poisson_count_unchecked(stream, lambda * dt))
}

pub(crate) fn poisson_count_unchecked(stream: &mut RandomStream, mean: f64) -> u32 {
    if mean == 0.0 {
        return 0;
    }
    let chunks = (mean / POISSON_CHUNK).ceil().max(1.0);
    let per = mean / chunks;
    let mut total = 0u32;
    for _ in 0..chunks as u64 {
        total = total.saturating_add(poisson_inversion(stream, per));
    }
    total
}

/// All noise for one step. Both populations see the same jump events.
pub fn draw_increment(stream: &mut RandomStream, np: &NoiseParams, dt: f64) -> NoiseIncrement {
    let (z1, z2) = gaussian_pair(stream);
    let sq = dt.sqrt();
    let dn = poisson_count_unchecked(stream, np.lambda * dt);
    NoiseIncrement { dw1: z1 * sq, dw2: z2 * sq, dn1: dn, dn2: dn }
}

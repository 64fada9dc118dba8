//! Gradient sanitization: per-example norm bounding plus calibrated Gaussian
//! noise on the batch sum.
//!
//! Given per-example output gradients `g_1 … g_B`, the sanitized gradient is
//!
//! ```text
//! g̃ = (Σᵢ bound(gᵢ) + N(0, σ²C²I)) / B
//! ```
//!
//! where `bound` either normalizes (`C·g/(‖g‖₂+e)`, each example by its own
//! norm) or clips (`g·min(1, C/‖g‖₂)`). Noise is drawn once per call, never
//! per example.
//!
//! Gaussian draws come from the ziggurat sampler in `rand_distr`
//! (`StandardNormal`) over a ChaCha20 stream keyed by a 64-bit seed. Outputs
//! are bit-reproducible within this implementation; another implementation
//! following the same description can only match statistically.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::l2_norm;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum BoundMode {
    #[default]
    Normalize,
    Clip,
}

impl std::str::FromStr for BoundMode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "normalize" => Ok(BoundMode::Normalize),
            "clip" => Ok(BoundMode::Clip),
            other => Err(Error::invalid(format!("unknown mode `{other}` (normalize|clip)"))),
        }
    }
}

impl std::fmt::Display for BoundMode {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            BoundMode::Normalize => "normalize",
            BoundMode::Clip => "clip",
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MechanismConfig {
    /// `C`
    pub norm_bound: f64,
    /// `σ`; the noise standard deviation on the sum is `σ·C`.
    pub noise_scale: f64,
    /// `e`
    pub stability: f64,
    pub mode: BoundMode,
}

impl Default for MechanismConfig {
    fn default() -> Self {
        MechanismConfig {
            norm_bound: 1e-3,
            noise_scale: 100.0,
            stability: 1e-4,
            mode: BoundMode::Normalize,
        }
    }
}

impl MechanismConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.norm_bound > 0.0 && self.norm_bound.is_finite()) {
            return Err(Error::invalid(format!("norm bound C = {} must be positive", self.norm_bound)));
        }
        if !(self.noise_scale >= 0.0 && self.noise_scale.is_finite()) {
            return Err(Error::invalid(format!("noise scale σ = {} must be >= 0", self.noise_scale)));
        }
        if !(self.stability >= 0.0 && self.stability.is_finite()) {
            return Err(Error::invalid(format!("stability e = {} must be >= 0", self.stability)));
        }
        Ok(())
    }
}

/// Seeded stream of standard normal draws.
#[derive(Debug, Clone)]
pub struct NoiseSource {
    seed: u64,
    rng: ChaCha20Rng,
}

impl NoiseSource {
    pub fn new(seed: u64) -> Self {
        NoiseSource {
            seed,
            rng: ChaCha20Rng::seed_from_u64(seed),
        }
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Position in the underlying ChaCha20 keystream, in 32-bit words.
    pub fn position(&self) -> u128 {
        self.rng.get_word_pos()
    }

    pub fn standard_normal(&mut self) -> f64 {
        self.rng.sample(StandardNormal)
    }

    /// Draws `n` values of `N(0, std²)`.
    pub fn gaussian_vector(&mut self, n: usize, std: f64) -> Vec<f64> {
        (0..n).map(|_| std * self.standard_normal()).collect()
    }
}

/// `C·g/(‖g‖₂+e)`, each example scaled by its own norm.
pub fn normalize_example(g: &[f64], cfg: &MechanismConfig) -> Result<Vec<f64>> {
    let norm = l2_norm(g);
    let denom = norm + cfg.stability;
    if denom == 0.0 {
        return Err(Error::Degenerate(
            "zero gradient cannot be normalized with stability e = 0".into(),
        ));
    }
    Ok(scale_into_ball(g, cfg.norm_bound / denom, cfg.norm_bound, false))
}

/// `g·min(1, C/‖g‖₂)`.
pub fn clip_example(g: &[f64], cfg: &MechanismConfig) -> Vec<f64> {
    let norm = l2_norm(g);
    if norm <= cfg.norm_bound {
        return g.to_vec();
    }
    scale_into_ball(g, cfg.norm_bound / norm, cfg.norm_bound, true)
}

/// `g·scale`, stepping `scale` down by ulps while rounding would leave the
/// result outside the ball (or on its boundary when `closed` is false).
fn scale_into_ball(g: &[f64], mut scale: f64, c: f64, closed: bool) -> Vec<f64> {
    loop {
        let out: Vec<f64> = g.iter().map(|v| v * scale).collect();
        let n = l2_norm(&out);
        if n < c || (closed && n == c) || scale == 0.0 {
            return out;
        }
        scale = scale.next_down();
    }
}

/// Applies the configured bounding rule to one example.
pub fn bound_example(g: &[f64], cfg: &MechanismConfig) -> Result<Vec<f64>> {
    match cfg.mode {
        BoundMode::Normalize => normalize_example(g, cfg),
        BoundMode::Clip => Ok(clip_example(g, cfg)),
    }
}

/// Sum of bounded per-example gradients, before noise and averaging.
pub fn bounded_sum<G: AsRef<[f64]>>(grads: &[G], cfg: &MechanismConfig) -> Result<Vec<f64>> {
    let first = grads
        .first()
        .ok_or_else(|| Error::invalid("cannot sanitize an empty gradient list"))?;
    let n = first.as_ref().len();
    let mut sum = vec![0.0; n];
    for (i, g) in grads.iter().enumerate() {
        let g = g.as_ref();
        if g.len() != n {
            return Err(Error::dim(format!("gradient {i} has length {}, expected {n}", g.len())));
        }
        for (s, v) in sum.iter_mut().zip(bound_example(g, cfg)?) {
            *s += v;
        }
    }
    Ok(sum)
}

/// `(Σᵢ bound(gᵢ) + z)/m` with `z ~ N(0, σ²C²I)` and `m = grads.len()`.
pub fn sanitize_batch<G: AsRef<[f64]>>(
    grads: &[G],
    cfg: &MechanismConfig,
    noise: &mut NoiseSource,
) -> Result<Vec<f64>> {
    cfg.validate()?;
    let mut sum = bounded_sum(grads, cfg)?;
    let std = cfg.noise_scale * cfg.norm_bound;
    if std > 0.0 {
        for s in sum.iter_mut() {
            *s += std * noise.standard_normal();
        }
    }
    let m = grads.len() as f64;
    sum.iter_mut().for_each(|s| *s /= m);
    Ok(sum)
}

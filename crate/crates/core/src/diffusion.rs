//! Preconditioning, forward noising, noise-level sampling and the Euler sampler.

use rand::Rng as _;
use rand_distr::{Distribution, LogNormal, StandardNormal};

use crate::denoiser::{Conditioning, DenoiserParams, PreparedDenoiser};
use crate::error::{config_err, domain_err, Result};
use crate::rng::Rng;
use crate::tensor::{Clip, ClipShape, NoisyClip};

/// `(c_skip, c_out) = (1/(σ²+1), −σ/√(σ²+1))`.
pub fn precondition_coeffs(sigma: f64) -> Result<(f64, f64)> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain_err!("noise level must be positive and finite, got {sigma}"));
    }
    let s2 = sigma * sigma + 1.0;
    Ok((1.0 / s2, -sigma / s2.sqrt()))
}

/// Network input scale `1/√(σ²+1)`, giving the noisy input roughly unit variance.
pub fn input_scale(sigma: f64) -> Result<f64> {
    if !(sigma > 0.0) || !sigma.is_finite() {
        return Err(domain_err!("noise level must be positive and finite, got {sigma}"));
    }
    Ok(1.0 / (sigma * sigma + 1.0).sqrt())
}

/// `x0 + σ·ε` with `ε ~ N(0, I)`. `σ = 0` returns `x0` unchanged and draws nothing.
pub fn forward_noise(x0: &Clip, sigma: f64, rng: &mut Rng) -> Result<NoisyClip> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(domain_err!("noise level must be non-negative and finite, got {sigma}"));
    }
    let mut clip = x0.clone();
    if sigma > 0.0 {
        for v in clip.data_mut() {
            *v += sigma * rng.sample::<f64, _>(StandardNormal);
        }
    }
    Ok(NoisyClip { clip, sigma })
}

/// Training distribution over noise levels.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum SigmaDistribution {
    /// `ln σ ~ N(location, scale²)`.
    LogNormal { location: f64, scale: f64 },
    Fixed(f64),
}

impl Default for SigmaDistribution {
    fn default() -> Self {
        SigmaDistribution::LogNormal { location: -1.2, scale: 1.2 }
    }
}

impl SigmaDistribution {
    pub fn validate(&self) -> Result<()> {
        match *self {
            SigmaDistribution::LogNormal { location, scale } => {
                if !location.is_finite() || !(scale >= 0.0) || !scale.is_finite() {
                    return Err(config_err!("log-normal sigma needs finite location and scale ≥ 0, got ({location}, {scale})"));
                }
            }
            SigmaDistribution::Fixed(s) => {
                if !(s > 0.0) || !s.is_finite() {
                    return Err(config_err!("fixed sigma must be positive, got {s}"));
                }
            }
        }
        Ok(())
    }
}

pub fn sample_sigma(rng: &mut Rng, dist: SigmaDistribution) -> Result<f64> {
    dist.validate()?;
    Ok(match dist {
        SigmaDistribution::Fixed(s) => s,
        SigmaDistribution::LogNormal { location, scale } => {
            let d = LogNormal::new(location, scale).map_err(|e| config_err!("log-normal sigma: {e}"))?;
            d.sample(rng)
        }
    })
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SamplerConfig {
    pub steps: usize,
    pub sigma_max: f64,
    pub sigma_min: f64,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        SamplerConfig { steps: 50, sigma_max: 80.0, sigma_min: 0.002 }
    }
}

impl SamplerConfig {
    pub fn with_steps(steps: usize) -> Self {
        SamplerConfig { steps, ..Self::default() }
    }

    pub fn validate(&self) -> Result<()> {
        if self.steps < 1 {
            return Err(config_err!("sampler needs at least one step"));
        }
        if !(self.sigma_min > 0.0) || !(self.sigma_max > self.sigma_min) || !self.sigma_max.is_finite() {
            return Err(config_err!(
                "sampler needs 0 < sigma_min < sigma_max, got ({}, {})",
                self.sigma_min,
                self.sigma_max
            ));
        }
        Ok(())
    }

    /// `steps + 1` noise levels, geometric from `sigma_max` down to `sigma_min`.
    pub fn schedule(&self) -> Result<Vec<f64>> {
        self.validate()?;
        let n = self.steps;
        let ratio = (self.sigma_min / self.sigma_max).ln();
        let mut s: Vec<f64> = (0..=n).map(|i| self.sigma_max * (ratio * i as f64 / n as f64).exp()).collect();
        s[0] = self.sigma_max;
        s[n] = self.sigma_min;
        Ok(s)
    }
}

/// Euler integration of the probability-flow ODE with an arbitrary denoiser.
///
/// Starts from `σ_max·ε` and, for each pair of adjacent levels, moves along
/// `(x − D(x, σ))/σ`. The returned clip is the state at `σ_min`.
pub fn euler_sample_with<F>(shape: ClipShape, sampler: &SamplerConfig, rng: &mut Rng, mut denoise: F) -> Result<Clip>
where
    F: FnMut(&NoisyClip) -> Result<Clip>,
{
    let sigmas = sampler.schedule()?;
    let noise: Vec<f64> = (0..shape.len()).map(|_| sampler.sigma_max * rng.sample::<f64, _>(StandardNormal)).collect();
    let mut x = NoisyClip { clip: Clip::from_vec(shape, noise)?, sigma: sigmas[0] };
    for w in sigmas.windows(2) {
        let (s, s_next) = (w[0], w[1]);
        let d = denoise(&x)?;
        let h = (s_next - s) / s;
        let data = x.clip.data_mut();
        for (xi, di) in data.iter_mut().zip(d.data()) {
            *xi += h * (*xi - di);
        }
        x.sigma = s_next;
    }
    Ok(x.clip)
}

/// Samples a clip of `shape` from the learned denoiser under `cond`.
pub fn euler_sample(
    params: &DenoiserParams,
    cond: &Conditioning,
    shape: ClipShape,
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Clip> {
    let prepared = PreparedDenoiser::new(params, cond)?;
    euler_sample_with(shape, sampler, rng, |x| prepared.denoise(x))
}

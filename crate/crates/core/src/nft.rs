//! Reward-weighted contrastive denoising objective.
//!
//! Given the current prediction `x_θ` and the reference prediction `x_old`,
//! two implicit predictions are formed,
//! `x⁺ = (1−β)·x_old + β·x_θ` and `x⁻ = (1+β)·x_old − β·x_θ`,
//! and the loss `r·‖x⁺ − x0‖² + (1−r)·‖x⁻ − x0‖²` pulls `x⁺` toward
//! high-reward samples and `x⁻` toward low-reward ones.

use crate::denoiser::{Conditioning, DenoiserParams, Gradients, PreparedDenoiser};
use crate::error::{domain_err, shape_err, Result};
use crate::tensor::{Clip, NoisyClip};

#[derive(Debug, Clone, PartialEq)]
pub struct Branches {
    pub x_plus: Clip,
    pub x_minus: Clip,
    pub beta: f64,
}

/// How squared norms are reduced over entries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Reduction {
    Sum,
    /// Divide by the number of entries, so step sizes do not depend on resolution.
    #[default]
    Mean,
}

impl Reduction {
    fn scale(self, n: usize) -> f64 {
        match self {
            Reduction::Sum => 1.0,
            Reduction::Mean => 1.0 / n as f64,
        }
    }
}

fn check_beta(beta: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&beta) {
        return Err(domain_err!("beta must lie in [0, 1], got {beta}"));
    }
    Ok(())
}

fn check_r(r: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&r) {
        return Err(domain_err!("reward weight must lie in [0, 1], got {r}"));
    }
    Ok(())
}

/// `β = 0` is accepted and collapses both branches onto `x_old`.
pub fn make_branches(x_theta: &Clip, x_old: &Clip, beta: f64) -> Result<Branches> {
    x_theta.check_same_shape(x_old)?;
    check_beta(beta)?;
    Ok(Branches { x_plus: x_old.lincomb(1.0 - beta, x_theta, beta), x_minus: x_old.lincomb(1.0 + beta, x_theta, -beta), beta })
}

pub fn nft_loss(branches: &Branches, x0: &Clip, r: f64, reduction: Reduction) -> Result<f64> {
    check_r(r)?;
    branches.x_plus.check_same_shape(x0)?;
    let s = reduction.scale(x0.shape().len());
    Ok(s * (r * branches.x_plus.squared_distance(x0) + (1.0 - r) * branches.x_minus.squared_distance(x0)))
}

/// `λ·‖x_θ − x_old‖²`, reduced like the main loss.
pub fn kl_regularizer(x_theta: &Clip, x_old: &Clip, lambda: f64, reduction: Reduction) -> Result<f64> {
    x_theta.check_same_shape(x_old)?;
    if !(lambda >= 0.0) {
        return Err(domain_err!("regularizer weight must be non-negative, got {lambda}"));
    }
    if lambda == 0.0 {
        return Ok(0.0);
    }
    Ok(lambda * reduction.scale(x_old.shape().len()) * x_theta.squared_distance(x_old))
}

/// Loss terms and their gradient with respect to `x_θ`.
#[derive(Debug, Clone)]
pub struct PredictionGrad {
    pub loss: f64,
    pub kl: f64,
    pub grad: Clip,
}

/// Value and `x_θ`-gradient of `nft_loss + kl_regularizer` for fixed `x_old`, `x0`.
pub fn loss_and_prediction_grad(
    x_theta: &Clip,
    x_old: &Clip,
    x0: &Clip,
    r: f64,
    beta: f64,
    kl_lambda: f64,
    reduction: Reduction,
) -> Result<PredictionGrad> {
    let b = make_branches(x_theta, x_old, beta)?;
    let loss = nft_loss(&b, x0, r, reduction)?;
    let kl = kl_regularizer(x_theta, x_old, kl_lambda, reduction)?;
    let s = reduction.scale(x0.shape().len());
    let mut grad = Clip::zeros(x0.shape());
    let (xp, xm, t, o, g0) = (b.x_plus.data(), b.x_minus.data(), x_theta.data(), x_old.data(), x0.data());
    for (i, g) in grad.data_mut().iter_mut().enumerate() {
        *g = s * (2.0 * beta * (r * (xp[i] - g0[i]) - (1.0 - r) * (xm[i] - g0[i])) + 2.0 * kl_lambda * (t[i] - o[i]));
    }
    Ok(PredictionGrad { loss, kl, grad })
}

/// Frozen or slowly moving copy of the model that anchors the branches.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferencePolicy {
    pub params: DenoiserParams,
    /// Steps over which the EMA coefficient ramps up.
    pub warm_steps: u64,
    /// Final EMA coefficient.
    pub max_coeff: f64,
}

impl ReferencePolicy {
    pub fn new(params: DenoiserParams) -> Self {
        ReferencePolicy { params, warm_steps: 500, max_coeff: 0.5 }
    }

    pub fn coefficient(&self, step: u64) -> f64 {
        if self.warm_steps == 0 {
            return self.max_coeff;
        }
        self.max_coeff * (step as f64 / self.warm_steps as f64).min(1.0)
    }
}

/// `ref ← c·ref + (1−c)·current` with `c = max_coeff·min(step/warm_steps, 1)`.
/// The result is kept on the f32 grid, like the trained parameters.
pub fn ema_update(reference: &mut ReferencePolicy, current: &DenoiserParams, step: u64) -> Result<()> {
    if reference.params.arrays.len() != current.arrays.len() {
        return Err(shape_err!("reference and current parameter sets differ"));
    }
    let c = reference.coefficient(step);
    for (r, a) in reference.params.arrays.iter_mut().zip(&current.arrays) {
        if r.shape != a.shape {
            return Err(shape_err!("array {} has shape {:?} in the reference and {:?} in the model", r.name, r.shape, a.shape));
        }
        for (x, &y) in r.data.iter_mut().zip(&a.data) {
            *x = (c * *x + (1.0 - c) * y) as f32 as f64;
        }
    }
    Ok(())
}

/// Plain exponential moving average of the learning policy, applied after
/// each optimizer step when enabled.
pub fn policy_ema_update(ema: &mut DenoiserParams, current: &DenoiserParams, decay: f64) {
    for (e, a) in ema.arrays.iter_mut().zip(&current.arrays) {
        for (x, &y) in e.data.iter_mut().zip(&a.data) {
            *x = (decay * *x + (1.0 - decay) * y) as f32 as f64;
        }
    }
}

/// Everything [`nft_loss_gradients`] reports.
#[derive(Debug, Clone)]
pub struct NftOutput {
    pub loss: f64,
    pub kl: f64,
    pub grads: Gradients,
    pub x_theta: Clip,
    pub x_old: Clip,
}

/// Parameter gradient of the branch loss (plus the optional regularizer).
/// The reference prediction is a constant; gradients flow only through `x_θ`.
#[allow(clippy::too_many_arguments)]
pub fn nft_loss_gradients(
    params: &DenoiserParams,
    reference: &ReferencePolicy,
    x_sigma: &NoisyClip,
    cond: &Conditioning,
    x0: &Clip,
    r: f64,
    beta: f64,
    kl_lambda: f64,
    reduction: Reduction,
) -> Result<NftOutput> {
    let x_old = PreparedDenoiser::new(&reference.params, cond)?.denoise(x_sigma)?;
    let current = PreparedDenoiser::new(params, cond)?;
    let x_theta = current.denoise(x_sigma)?;
    let pg = loss_and_prediction_grad(&x_theta, &x_old, x0, r, beta, kl_lambda, reduction)?;
    let grads = current.gradients(x_sigma, &pg.grad)?;
    Ok(NftOutput { loss: pg.loss, kl: pg.kl, grads, x_theta, x_old })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserLayout, NUM_ARRAYS};
    use crate::rng::rng_from;
    use crate::tensor::ClipShape;
    use rand::Rng as _;
    use rand_distr::StandardNormal;

    fn randn(shape: ClipShape, seed: u64) -> Clip {
        let mut r = rng_from(seed);
        Clip::from_vec(shape, (0..shape.len()).map(|_| r.sample::<f64, _>(StandardNormal)).collect()).unwrap()
    }

    const S: ClipShape = ClipShape { views: 2, frames: 2, channels: 1, height: 3, width: 3 };

    #[test]
    fn branch_cases() {
        let (t, o) = (randn(S, 1), randn(S, 2));
        let b = make_branches(&t, &o, 0.0).unwrap();
        assert_eq!((&b.x_plus, &b.x_minus), (&o, &o));
        let zero = Clip::zeros(S);
        let b = make_branches(&t, &zero, 1.0).unwrap();
        assert_eq!(b.x_plus, t);
        assert_eq!(b.x_minus, t.scale(-1.0));
        assert!(make_branches(&t, &o, 1.5).is_err());
        assert!(make_branches(&t, &o, -0.1).is_err());
    }

    #[test]
    fn loss_boundaries_and_no_drift() {
        let (t, o, x0) = (randn(S, 1), randn(S, 2), randn(S, 3));
        let b = make_branches(&t, &o, 0.3).unwrap();
        assert_eq!(nft_loss(&b, &x0, 1.0, Reduction::Sum).unwrap(), b.x_plus.squared_distance(&x0));
        assert_eq!(nft_loss(&b, &x0, 0.0, Reduction::Sum).unwrap(), b.x_minus.squared_distance(&x0));
        let want = o.squared_distance(&x0);
        for (r, beta) in [(0.0, 0.1), (0.3, 0.5), (1.0, 1.0)] {
            let b = make_branches(&o, &o, beta).unwrap();
            assert!((nft_loss(&b, &x0, r, Reduction::Sum).unwrap() - want).abs() < 1e-12);
        }
        assert!(nft_loss(&b, &x0, 1.2, Reduction::Sum).is_err());
        let mean = nft_loss(&b, &x0, 0.4, Reduction::Mean).unwrap();
        assert!((mean * S.len() as f64 - nft_loss(&b, &x0, 0.4, Reduction::Sum).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn kl_cases() {
        let (t, o) = (randn(S, 1), randn(S, 2));
        assert_eq!(kl_regularizer(&t, &o, 0.0, Reduction::Sum).unwrap(), 0.0);
        assert_eq!(kl_regularizer(&o, &o, 1.0, Reduction::Sum).unwrap(), 0.0);
        let shape = ClipShape::new(1, 1, 1, 1, 2);
        let a = Clip::from_vec(shape, vec![1.0, 0.5]).unwrap();
        let z = Clip::zeros(shape);
        assert!((kl_regularizer(&a, &z, 1.0, Reduction::Sum).unwrap() - 1.25).abs() < 1e-15);
        let a = Clip::from_vec(shape, vec![1.5, 0.5]).unwrap();
        assert!((kl_regularizer(&a, &z, 1.0, Reduction::Sum).unwrap() - 2.5).abs() < 1e-15);
    }

    #[test]
    fn prediction_gradient_matches_differences() {
        let (t, o, x0) = (randn(S, 4), randn(S, 5), randn(S, 6));
        for reduction in [Reduction::Sum, Reduction::Mean] {
            let pg = loss_and_prediction_grad(&t, &o, &x0, 0.7, 0.3, 0.05, reduction).unwrap();
            let f = |x: &Clip| {
                let b = make_branches(x, &o, 0.3).unwrap();
                nft_loss(&b, &x0, 0.7, reduction).unwrap() + kl_regularizer(x, &o, 0.05, reduction).unwrap()
            };
            for i in 0..S.len() {
                let mut p = t.clone();
                p.data_mut()[i] += 1e-5;
                let mut m = t.clone();
                m.data_mut()[i] -= 1e-5;
                let num = (f(&p) - f(&m)) / 2e-5;
                assert!((num - pg.grad.data()[i]).abs() < 1e-7 * num.abs().max(1.0));
            }
        }
    }

    #[test]
    fn balanced_reward_at_the_reference_has_zero_gradient() {
        let (o, x0) = (randn(S, 7), randn(S, 8));
        for beta in [0.1, 0.5, 1.0] {
            let pg = loss_and_prediction_grad(&o, &o, &x0, 0.5, beta, 0.2, Reduction::Sum).unwrap();
            assert!(pg.grad.data().iter().all(|g| g.abs() < 1e-12));
            // Off-balance the pull is toward x0 with weight (2r - 1)·2β.
            let pg = loss_and_prediction_grad(&o, &o, &x0, 1.0, beta, 0.0, Reduction::Sum).unwrap();
            for i in 0..S.len() {
                let want = 2.0 * beta * (o.data()[i] - x0.data()[i]);
                assert!((pg.grad.data()[i] - want).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn ema_schedule() {
        let mut rng = rng_from(1);
        let layout = DenoiserLayout { noisy_channels: 1, context_channels: 1, cond_dim: 1, hidden: 2 };
        let mut cur = DenoiserParams::random(layout, 1.0, &mut rng);
        cur.round_to_f32();
        let mut old = DenoiserParams::random(layout, 1.0, &mut rng);
        old.round_to_f32();
        let mut r = ReferencePolicy::new(old.clone());
        assert_eq!(r.coefficient(0), 0.0);
        assert_eq!(r.coefficient(250), 0.25);
        assert_eq!(r.coefficient(500), 0.5);
        assert_eq!(r.coefficient(10_000), 0.5);
        ema_update(&mut r, &cur, 0).unwrap();
        assert_eq!(r.params, cur);
        let mut same = ReferencePolicy::new(cur.clone());
        for step in [1, 77, 499, 500, 900] {
            ema_update(&mut same, &cur, step).unwrap();
            assert_eq!(same.params, cur);
        }
        let mut r = ReferencePolicy::new(old.clone());
        ema_update(&mut r, &cur, 600).unwrap();
        for i in 0..NUM_ARRAYS {
            for j in 0..old.arrays[i].data.len() {
                let want = 0.5 * old.arrays[i].data[j] + 0.5 * cur.arrays[i].data[j];
                assert!((r.params.arrays[i].data[j] - want).abs() <= 1e-6 * want.abs().max(1.0));
            }
        }
    }
}

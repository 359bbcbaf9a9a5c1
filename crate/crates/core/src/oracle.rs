//! Closed-form and brute-force checks on scalar discrete worlds: the
//! reward split of the reference posterior, the optimal branch predictor,
//! and a generic finite-difference gradient checker.

use std::io::Write;

use rand::Rng as _;
use rayon::prelude::*;

use crate::denoiser::{DenoiserParams, Gradients};
use crate::error::{domain_err, Result};
use crate::nft::{loss_and_prediction_grad, Reduction};
use crate::rng::{derive_rng, Rng};
use crate::tensor::{Clip, ClipShape};

/// A finite prior over scalar clean samples with a reward per point.
#[derive(Debug, Clone, PartialEq)]
pub struct DiscreteWorld {
    pub points: Vec<f64>,
    pub prior: Vec<f64>,
    pub reward: Vec<f64>,
}

impl DiscreteWorld {
    pub fn new(points: Vec<f64>, prior: Vec<f64>, reward: Vec<f64>) -> Result<Self> {
        let n = points.len();
        if n == 0 || prior.len() != n || reward.len() != n {
            return Err(domain_err!("world needs matching non-empty points, prior and reward"));
        }
        if prior.iter().any(|&p| !(p >= 0.0)) || (prior.iter().sum::<f64>() - 1.0).abs() > 1e-9 {
            return Err(domain_err!("prior must be non-negative and sum to 1"));
        }
        if reward.iter().any(|r| !(0.0..=1.0).contains(r)) || points.iter().any(|x| !x.is_finite()) {
            return Err(domain_err!("rewards must lie in [0, 1] and points be finite"));
        }
        let w = DiscreteWorld { points, prior, reward };
        let z = w.partition();
        if !(z > 0.0 && z < 1.0) {
            return Err(domain_err!("partition value {z} is degenerate"));
        }
        Ok(w)
    }

    /// Expected reward under the prior.
    pub fn partition(&self) -> f64 {
        self.prior.iter().zip(&self.reward).map(|(p, r)| p * r).sum()
    }

    /// `n` random points in [−2, 2], a random prior and uniform rewards.
    pub fn random(rng: &mut Rng, n: usize) -> Result<Self> {
        loop {
            let points = (0..n).map(|_| rng.random_range(-2.0..2.0)).collect();
            let raw: Vec<f64> = (0..n).map(|_| rng.random_range(0.05..1.0)).collect();
            let s: f64 = raw.iter().sum();
            let prior = raw.iter().map(|p| p / s).collect();
            let reward = (0..n).map(|_| rng.random::<f64>()).collect();
            match DiscreteWorld::new(points, prior, reward) {
                Ok(w) => return Ok(w),
                Err(_) if n > 0 => continue,
                Err(e) => return Err(e),
            }
        }
    }

    /// Points ±1 with equal prior and rewards 0.45 / 0.55.
    pub fn two_point() -> Self {
        DiscreteWorld::new(vec![-1.0, 1.0], vec![0.5, 0.5], vec![0.45, 0.55]).expect("valid world")
    }

    /// Five evenly spaced points on [−1, 1] with rewards near 1/2, so the
    /// optimal prediction stays inside [−3, 3] even for β = 0.05.
    pub fn five_point() -> Self {
        DiscreteWorld::new(
            vec![-1.0, -0.5, 0.0, 0.5, 1.0],
            vec![0.1, 0.25, 0.3, 0.2, 0.15],
            vec![0.54, 0.46, 0.5, 0.47, 0.53],
        )
        .expect("valid world")
    }
}

/// Posterior quantities at one noisy observation.
#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorDecomposition {
    pub alpha: f64,
    pub mu_old: f64,
    pub mu_plus: f64,
    pub mu_minus: f64,
    pub delta: f64,
    pub post_old: Vec<f64>,
    pub post_plus: Vec<f64>,
    pub post_minus: Vec<f64>,
}

fn log_sum_exp(v: &[f64]) -> f64 {
    let m = v.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if m == f64::NEG_INFINITY {
        return m;
    }
    m + v.iter().map(|x| (x - m).exp()).sum::<f64>().ln()
}

/// Normalized weights and the log normalizer of `exp(logw)`.
fn softmax(logw: &[f64]) -> (Vec<f64>, f64) {
    let z = log_sum_exp(logw);
    (logw.iter().map(|l| (l - z).exp()).collect(), z)
}

fn mean(w: &[f64], x: &[f64]) -> f64 {
    w.iter().zip(x).map(|(a, b)| a * b).sum()
}

/// Splits the reference posterior at `x_sigma` into its reward-weighted
/// and complementary parts. Each posterior is normalized on its own, and
/// `alpha` is the ratio of the noisy marginals, so the mixture identities
/// are genuine checks rather than consequences of the construction.
pub fn decompose(world: &DiscreteWorld, x_sigma: f64, sigma: f64) -> Result<PosteriorDecomposition> {
    if !(sigma > 0.0 && sigma.is_finite()) || !x_sigma.is_finite() {
        return Err(domain_err!("decompose needs sigma > 0 and a finite observation"));
    }
    let z = world.partition();
    if !(z > 0.0 && z < 1.0) {
        return Err(domain_err!("partition value {z} is degenerate"));
    }
    let log_kernel: Vec<f64> = world
        .points
        .iter()
        .map(|x0| -0.5 * ((x_sigma - x0) / sigma).powi(2) - (sigma * (2.0 * std::f64::consts::PI).sqrt()).ln())
        .collect();
    let ln = |v: f64| if v > 0.0 { v.ln() } else { f64::NEG_INFINITY };
    let prior_old: Vec<f64> = world.prior.iter().map(|&p| ln(p)).collect();
    let prior_plus: Vec<f64> = world.prior.iter().zip(&world.reward).map(|(p, r)| ln(p * r / z)).collect();
    let prior_minus: Vec<f64> = world.prior.iter().zip(&world.reward).map(|(p, r)| ln(p * (1.0 - r) / (1.0 - z))).collect();
    let joint = |prior: &[f64]| -> Vec<f64> { prior.iter().zip(&log_kernel).map(|(a, b)| a + b).collect() };
    let (post_old, m_old) = softmax(&joint(&prior_old));
    let (post_plus, m_plus) = softmax(&joint(&prior_plus));
    let (post_minus, _) = softmax(&joint(&prior_minus));
    let alpha = (z.ln() + m_plus - m_old).exp();
    let mu_old = mean(&post_old, &world.points);
    let mu_plus = mean(&post_plus, &world.points);
    let mu_minus = mean(&post_minus, &world.points);
    Ok(PosteriorDecomposition { alpha, mu_old, mu_plus, mu_minus, delta: alpha * (mu_plus - mu_old), post_old, post_plus, post_minus })
}

/// Optimal prediction `μ_old + (2/β)·Δ`.
pub fn theorem1_target(world: &DiscreteWorld, beta: f64, x_sigma: f64, sigma: f64) -> Result<f64> {
    if !(beta > 0.0) {
        return Err(domain_err!("beta must be positive, got {beta}"));
    }
    let d = decompose(world, x_sigma, sigma)?;
    Ok(d.mu_old + 2.0 / beta * d.delta)
}

/// `n` evenly spaced values from `lo` to `hi` inclusive.
pub fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    match n {
        0 => vec![],
        1 => vec![lo],
        _ => (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect(),
    }
}

/// Default prediction grid: 201 points on [−3, 3] (step 0.03).
pub fn prediction_grid() -> Vec<f64> {
    linspace(-3.0, 3.0, 201)
}

/// Default observation grid: 41 points on [−3, 3].
pub fn observation_grid() -> Vec<f64> {
    linspace(-3.0, 3.0, 41)
}

/// Plain Bayes posterior of the prior given one observation, written
/// without the log-space machinery of [`decompose`].
fn direct_posterior(world: &DiscreteWorld, x_sigma: f64, sigma: f64) -> Vec<f64> {
    let w: Vec<f64> = world.points.iter().zip(&world.prior).map(|(x0, p)| p * (-0.5 * ((x_sigma - x0) / sigma).powi(2)).exp()).collect();
    let s: f64 = w.iter().sum();
    w.iter().map(|v| v / s).collect()
}

/// Expected branch loss at one observation for prediction `pred`, with the
/// reference prediction pinned to the reference posterior mean.
pub fn expected_branch_loss(world: &DiscreteWorld, post: &[f64], mu_old: f64, beta: f64, pred: f64) -> f64 {
    let xp = (1.0 - beta) * mu_old + beta * pred;
    let xm = (1.0 + beta) * mu_old - beta * pred;
    post.iter()
        .zip(world.points.iter().zip(&world.reward))
        .map(|(w, (x0, r))| w * (r * (xp - x0).powi(2) + (1.0 - r) * (xm - x0).powi(2)))
        .sum()
}

/// Brute-force argmin of the expected branch loss over `pred_grid`, per
/// observation in `xs_grid`. Ties keep the first grid point.
pub fn grid_minimize_loss(world: &DiscreteWorld, beta: f64, sigma: f64, xs_grid: &[f64], pred_grid: &[f64]) -> Vec<f64> {
    xs_grid
        .iter()
        .map(|&xs| {
            let post = direct_posterior(world, xs, sigma);
            let mu_old = mean(&post, &world.points);
            let mut best = (f64::INFINITY, f64::NAN);
            for &p in pred_grid {
                let l = expected_branch_loss(world, &post, mu_old, beta, p);
                if l < best.0 {
                    best = (l, p);
                }
            }
            best.1
        })
        .collect()
}

/// Largest relative disagreement between central differences and the
/// analytic gradient on `n_probes` random coordinates. The relative error
/// uses `max(|numeric|, |analytic|, 1e-6)` as denominator.
pub fn finite_diff_check<F>(f: F, x: &[f64], h: f64, n_probes: usize, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&[f64]) -> Result<(f64, Vec<f64>)>,
{
    if !(h > 0.0) || x.is_empty() {
        return Err(domain_err!("finite differences need h > 0 and a non-empty point"));
    }
    let (_, grad) = f(x)?;
    if grad.len() != x.len() {
        return Err(domain_err!("gradient has {} entries for {} coordinates", grad.len(), x.len()));
    }
    let mut worst: f64 = 0.0;
    let mut probe = x.to_vec();
    for _ in 0..n_probes {
        let i = rng.random_range(0..x.len());
        probe[i] = x[i] + h;
        let up = f(&probe)?.0;
        probe[i] = x[i] - h;
        let down = f(&probe)?.0;
        probe[i] = x[i];
        let numeric = (up - down) / (2.0 * h);
        worst = worst.max((numeric - grad[i]).abs() / numeric.abs().max(grad[i].abs()).max(1e-6));
    }
    Ok(worst)
}

pub fn flatten_params(params: &DenoiserParams) -> Vec<f64> {
    params.arrays.iter().flat_map(|a| a.data.iter().copied()).collect()
}

pub fn unflatten_params(template: &DenoiserParams, flat: &[f64]) -> DenoiserParams {
    let mut p = template.clone();
    let mut off = 0;
    for a in &mut p.arrays {
        let n = a.data.len();
        a.data.copy_from_slice(&flat[off..off + n]);
        off += n;
    }
    p
}

/// [`finite_diff_check`] over the trainable arrays of a parameter set.
pub fn finite_diff_params<F>(f: F, params: &DenoiserParams, h: f64, n_probes: usize, rng: &mut Rng) -> Result<f64>
where
    F: Fn(&DenoiserParams) -> Result<(f64, Gradients)>,
{
    let trainable: Vec<usize> = {
        let mut idx = Vec::new();
        let mut off = 0;
        for a in &params.arrays {
            if !a.frozen {
                idx.extend(off..off + a.data.len());
            }
            off += a.data.len();
        }
        idx
    };
    if trainable.is_empty() {
        return Err(domain_err!("every array is frozen"));
    }
    let base = flatten_params(params);
    let sub: Vec<f64> = trainable.iter().map(|&i| base[i]).collect();
    let eval = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut full = base.clone();
        trainable.iter().zip(v).for_each(|(&i, &x)| full[i] = x);
        let (l, g) = f(&unflatten_params(params, &full))?;
        let gf: Vec<f64> = g.arrays.concat();
        Ok((l, trainable.iter().map(|&i| gf[i]).collect()))
    };
    finite_diff_check(eval, &sub, h, n_probes, rng)
}

/// Per-observation scalar predictor trained by gradient descent on the
/// exact expected squared error; returns the learned value per bin.
pub fn train_mse_predictors(world: &DiscreteWorld, sigma: f64, xs_grid: &[f64], steps: usize, lr: f64) -> Vec<f64> {
    xs_grid
        .iter()
        .map(|&xs| {
            let post = direct_posterior(world, xs, sigma);
            let mut p = 0.0;
            for _ in 0..steps {
                let g: f64 = post.iter().zip(&world.points).map(|(w, x0)| 2.0 * w * (p - x0)).sum();
                p -= lr * g;
            }
            p
        })
        .collect()
}

/// Per-observation scalar predictors trained with the branch loss
/// gradient of [`loss_and_prediction_grad`] against a reference fixed at
/// the posterior mean. Each step takes the posterior-weighted gradient
/// over every world point.
pub fn train_branch_predictors(world: &DiscreteWorld, beta: f64, sigma: f64, xs_grid: &[f64], steps: usize) -> Result<Vec<f64>> {
    let shape = ClipShape::new(1, 1, 1, 1, 1);
    let scalar = |v: f64| Clip::from_vec(shape, vec![v]);
    let lr = 0.25 / (beta * beta);
    xs_grid
        .iter()
        .map(|&xs| {
            let post = direct_posterior(world, xs, sigma);
            let mu_old = mean(&post, &world.points);
            let x_old = scalar(mu_old)?;
            let mut p = mu_old;
            for _ in 0..steps {
                let x_theta = scalar(p)?;
                let mut g = 0.0;
                for ((w, &x0), &r) in post.iter().zip(&world.points).zip(&world.reward) {
                    let pg = loss_and_prediction_grad(&x_theta, &x_old, &scalar(x0)?, r, beta, 0.0, Reduction::Sum)?;
                    g += w * pg.grad.data()[0];
                }
                p -= lr * g;
            }
            Ok(p)
        })
        .collect()
}

/// One line of the oracle report.
#[derive(Debug, Clone, PartialEq)]
pub struct OracleRow {
    pub check: String,
    pub world_seed: u64,
    pub max_error: f64,
    pub pass: bool,
}

impl OracleRow {
    fn new(check: &str, world_seed: u64, max_error: f64, tol: f64) -> Self {
        OracleRow { check: check.into(), world_seed, max_error, pass: max_error.is_finite() && max_error < tol }
    }
}

pub fn write_oracle_csv<W: Write>(out: W, rows: &[OracleRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["check", "world_seed", "max_error", "pass"])?;
    for r in rows {
        w.write_record([r.check.clone(), r.world_seed.to_string(), format!("{:e}", r.max_error), r.pass.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const LEMMA_TOL: f64 = 1e-10;
pub const GRID_STEP: f64 = 0.03;
pub const THEOREM_TOL: f64 = 2.0 * GRID_STEP + 1e-9;
pub const BETAS: [f64; 5] = [0.05, 0.1, 0.5, 1.0, 2.0];

/// Mixture identities on `n_worlds` random worlds (up to 8 points,
/// σ ∈ [0.2, 3], 21 observations each). One row per world and identity.
pub fn lemma1_suite(seed: u64, n_worlds: usize) -> Result<Vec<OracleRow>> {
    let per_world = (0..n_worlds as u64)
        .into_par_iter()
        .map(|i| -> Result<Vec<OracleRow>> {
            let mut rng = derive_rng(seed, crate::rng::streams::ORACLE, i);
            let n = rng.random_range(2..=8);
            let world = DiscreteWorld::random(&mut rng, n)?;
            let sigma = rng.random_range(0.2..=3.0);
            let (mut post_err, mut mean_err, mut delta_err, mut alpha_range) = (0.0f64, 0.0f64, 0.0f64, 0.0f64);
            for xs in linspace(-4.0, 4.0, 21) {
                let d = decompose(&world, xs, sigma)?;
                for j in 0..n {
                    post_err = post_err.max((d.post_old[j] - (d.alpha * d.post_plus[j] + (1.0 - d.alpha) * d.post_minus[j])).abs());
                }
                mean_err = mean_err.max((d.mu_old - (d.alpha * d.mu_plus + (1.0 - d.alpha) * d.mu_minus)).abs());
                delta_err = delta_err.max(((1.0 - d.alpha) * (d.mu_old - d.mu_minus) - d.alpha * (d.mu_plus - d.mu_old)).abs());
                alpha_range = alpha_range.max((-d.alpha).max(d.alpha - 1.0).max(0.0));
            }
            Ok(vec![
                OracleRow::new("posterior_mixture", i, post_err, LEMMA_TOL),
                OracleRow::new("mean_mixture", i, mean_err, LEMMA_TOL),
                OracleRow::new("delta_parallel", i, delta_err, LEMMA_TOL),
                OracleRow::new("alpha_in_unit", i, alpha_range, 1e-12),
            ])
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_world.into_iter().flatten().collect())
}

/// Analytic target against the brute-force grid minimizer for the two
/// fixed worlds, every β in [`BETAS`] and σ ∈ {0.5, 1}, plus the doubling
/// of the displacement when β halves. `world_seed` numbers the world.
pub fn theorem1_suite() -> Result<Vec<OracleRow>> {
    let xs = observation_grid();
    let preds = prediction_grid();
    let mut rows = Vec::new();
    for (wi, world) in [DiscreteWorld::two_point(), DiscreteWorld::five_point()].iter().enumerate() {
        for sigma in [0.5, 1.0] {
            let mu: Vec<f64> = xs.iter().map(|&x| decompose(world, x, sigma).map(|d| d.mu_old)).collect::<Result<_>>()?;
            let mut disp = Vec::new();
            for &beta in &BETAS {
                let grid = grid_minimize_loss(world, beta, sigma, &xs, &preds);
                let mut err: f64 = 0.0;
                for (g, &x) in grid.iter().zip(&xs) {
                    let t = theorem1_target(world, beta, x, sigma)?;
                    if t.abs() > 3.0 {
                        return Err(domain_err!("target {t} leaves the prediction grid"));
                    }
                    err = err.max((g - t).abs());
                }
                rows.push(OracleRow::new(&format!("theorem1_beta{beta}_sigma{sigma}"), wi as u64, err, THEOREM_TOL));
                disp.push(grid.iter().zip(&mu).map(|(g, m)| g - m).collect::<Vec<f64>>());
            }
            // Halving pairs: (0.1→0.05), (1→0.5), (2→1).
            for (hi, lo) in [(1usize, 0usize), (3, 2), (4, 3)] {
                let err = disp[hi].iter().zip(&disp[lo]).map(|(a, b)| (b - 2.0 * a).abs()).fold(0.0, f64::max);
                rows.push(OracleRow::new(&format!("halving_beta{}_sigma{sigma}", BETAS[hi]), wi as u64, err, THEOREM_TOL));
            }
        }
    }
    Ok(rows)
}

/// Convergence of trained scalar predictors: plain squared error to the
/// posterior mean, and the branch loss to the optimal shifted mean.
pub fn convergence_suite() -> Result<Vec<OracleRow>> {
    let xs = observation_grid();
    let mut rows = Vec::new();
    for (wi, world) in [DiscreteWorld::two_point(), DiscreteWorld::five_point()].iter().enumerate() {
        let sigma = 1.0;
        let learned = train_mse_predictors(world, sigma, &xs, 200, 0.25);
        let err = learned.iter().zip(&xs).map(|(p, &x)| decompose(world, x, sigma).map(|d| (p - d.mu_old).abs())).collect::<Result<Vec<_>>>()?;
        rows.push(OracleRow::new("mse_posterior_mean", wi as u64, err.into_iter().fold(0.0, f64::max), 1e-3));
        for beta in [0.1, 1.0] {
            let learned = train_branch_predictors(world, beta, sigma, &xs, 200)?;
            let mut e: f64 = 0.0;
            for (p, &x) in learned.iter().zip(&xs) {
                e = e.max((p - theorem1_target(world, beta, x, sigma)?).abs());
            }
            rows.push(OracleRow::new(&format!("branch_descent_beta{beta}"), wi as u64, e, 1e-6));
        }
    }
    Ok(rows)
}

/// Finite differences on a random quadratic form.
pub fn quadratic_fd_check(seed: u64) -> Result<OracleRow> {
    let mut rng = derive_rng(seed, crate::rng::streams::ORACLE, 1_000_000);
    let n = 12;
    let a: Vec<f64> = (0..n * n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let b: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    let x: Vec<f64> = (0..n).map(|_| rng.random_range(-1.0..1.0)).collect();
    // f(x) = ½ xᵀAx + bᵀx, ∇f = ½(A + Aᵀ)x + b.
    let f = |v: &[f64]| -> Result<(f64, Vec<f64>)> {
        let mut val = 0.0;
        let mut g = b.clone();
        for i in 0..n {
            val += b[i] * v[i];
            for j in 0..n {
                val += 0.5 * a[i * n + j] * v[i] * v[j];
                g[i] += 0.5 * (a[i * n + j] + a[j * n + i]) * v[j];
            }
        }
        Ok((val, g))
    };
    let err = finite_diff_check(f, &x, 1e-4, 50, &mut rng)?;
    Ok(OracleRow::new("fd_quadratic", seed, err, 1e-8))
}

/// Everything above, in report order.
pub fn run_oracle_suite(seed: u64) -> Result<Vec<OracleRow>> {
    let mut rows = lemma1_suite(seed, 100)?;
    rows.extend(theorem1_suite()?);
    rows.extend(convergence_suite()?);
    rows.push(quadratic_fd_check(seed)?);
    Ok(rows)
}

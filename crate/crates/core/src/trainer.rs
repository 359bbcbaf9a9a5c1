//! Optimization loops: teacher-forced pretraining and reward-driven
//! post-training, with checkpoints that resume bit-exactly.

use std::fs::OpenOptions;
use std::io::Write as _;
use std::path::{Path, PathBuf};

use rand::Rng as _;
use rayon::prelude::*;

use crate::checkpoint::{load_params, load_training_state, save_params, save_state, state_path, OptimizerState};
use crate::config::TrainConfig;
use crate::denoiser::{DenoiserParams, Gradients};
use crate::diffusion::sample_sigma;
use crate::error::{config_err, Error, Result};
use crate::nft::ReferencePolicy;
use crate::rewards::Scorer;
use crate::rng::{derive_rng, rng_from, streams};
use crate::rollout::{training_step, StepReport};
use crate::world::Episode;
use crate::world_model::{episode_window, teacher_forced_loss};

pub const ADAM_BETA1: f64 = 0.9;
pub const ADAM_BETA2: f64 = 0.999;
pub const ADAM_EPS: f64 = 1e-8;

/// One bias-corrected Adam update. Frozen arrays keep their values and
/// moments; the step counter always advances. Parameters stay on the f32 grid.
pub fn optimizer_step(params: &mut DenoiserParams, grads: &Gradients, state: &mut OptimizerState, lr: f64) -> Result<()> {
    if grads.arrays.len() != params.arrays.len() || !state.matches(params) {
        return Err(crate::error::shape_err!("gradients or optimizer state do not match the parameters"));
    }
    if !(lr >= 0.0 && lr.is_finite()) {
        return Err(config_err!("learning rate must be finite and non-negative, got {lr}"));
    }
    for (a, g) in params.arrays.iter().zip(&grads.arrays) {
        if !a.frozen && (g.len() != a.data.len() || g.iter().any(|x| !x.is_finite())) {
            return Err(Error::Numeric(format!("non-finite or misshaped gradient for array {}", a.name)));
        }
    }
    state.step += 1;
    let t = state.step as i32;
    let c1 = 1.0 - ADAM_BETA1.powi(t);
    let c2 = 1.0 - ADAM_BETA2.powi(t);
    for (i, a) in params.arrays.iter_mut().enumerate() {
        if a.frozen {
            continue;
        }
        let (m, v, g) = (&mut state.m[i], &mut state.v[i], &grads.arrays[i]);
        for j in 0..a.data.len() {
            m[j] = ADAM_BETA1 * m[j] + (1.0 - ADAM_BETA1) * g[j];
            v[j] = ADAM_BETA2 * v[j] + (1.0 - ADAM_BETA2) * g[j] * g[j];
            let step = lr * (m[j] / c1) / ((v[j] / c2).sqrt() + ADAM_EPS);
            a.data[j] = (a.data[j] - step) as f32 as f64;
        }
    }
    params.version += 1;
    Ok(())
}

fn append_csv(path: &Path, header: &str, lines: &[String]) -> Result<()> {
    let fresh = !path.exists();
    let mut f = OpenOptions::new().create(true).append(true).open(path)?;
    if fresh {
        writeln!(f, "{header}")?;
    }
    for l in lines {
        writeln!(f, "{l}")?;
    }
    Ok(())
}

fn save_with_state(params: &DenoiserParams, state: &OptimizerState, path: &Path) -> Result<()> {
    save_params(params, path)?;
    save_state(state, params.version, &state_path(path))
}

/// Fresh parameters for `config`, drawn from the initialization stream.
pub fn initial_params(config: &TrainConfig) -> DenoiserParams {
    DenoiserParams::init(config.model.layout(), &mut derive_rng(config.seed, streams::INIT, 0))
}

pub const PRETRAIN_LOG: &str = "pretrain_log.csv";
pub const POSTTRAIN_LOG: &str = "posttrain_log.csv";
pub const PRETRAINED: &str = "pretrained.pwck";
pub const POSTTRAINED: &str = "posttrained.pwck";

#[derive(Debug, Clone)]
pub struct PretrainRun {
    pub params: DenoiserParams,
    pub state: OptimizerState,
    /// Mean batch loss of every step run in this call.
    pub losses: Vec<f64>,
}

/// Mean teacher-forced loss over `batch` random windows and its gradient.
/// All draws come from `rng`; the per-window work runs in parallel.
pub fn pretrain_batch(params: &DenoiserParams, config: &TrainConfig, episodes: &[Episode], rng: &mut crate::rng::Rng) -> Result<(f64, Gradients)> {
    let l = config.model.chunk;
    let mut jobs = Vec::with_capacity(config.pretrain_batch);
    for _ in 0..config.pretrain_batch {
        let e = rng.random_range(0..episodes.len());
        let t = episodes[e].len();
        if t < l {
            return Err(config_err!("episode {e} has {t} steps, fewer than one chunk"));
        }
        let start = rng.random_range(0..=t - l);
        let sigma = sample_sigma(rng, config.sigma)?;
        jobs.push((e, start, sigma, rng.random::<u64>()));
    }
    let results: Vec<Result<(f64, Gradients)>> = jobs
        .par_iter()
        .map(|&(e, start, sigma, seed)| {
            let window = episode_window(&config.model, &episodes[e], start)?;
            teacher_forced_loss(params, &config.model, &window, sigma, &mut rng_from(seed))
        })
        .collect();
    let mut grads = Gradients::zeros_like(params);
    let mut loss = 0.0;
    for r in results {
        let (l, g) = r?;
        loss += l;
        grads.add_assign(&g);
    }
    let n = jobs.len() as f64;
    grads.scale(1.0 / n);
    Ok((loss / n, grads))
}

/// Teacher-forced pretraining up to `config.pretrain_steps` total updates.
///
/// `resume` continues from saved parameters and optimizer state. Every step
/// draws from a generator derived from `(seed, step)`, so an interrupted and
/// resumed run matches an uninterrupted one exactly. With `out` set,
/// periodic checkpoints, the final checkpoint and a loss log are written.
pub fn pretrain(
    config: &TrainConfig,
    episodes: &[Episode],
    resume: Option<(DenoiserParams, OptimizerState)>,
    out: Option<&Path>,
) -> Result<PretrainRun> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(config_err!("pretraining needs at least one episode"));
    }
    let (mut params, mut state) = match resume {
        Some((p, s)) => {
            config.model.check_params(&p)?;
            (p, s)
        }
        None => {
            let p = initial_params(config);
            let s = OptimizerState::new(&p);
            (p, s)
        }
    };
    let mut losses = Vec::new();
    let mut log = Vec::new();
    while state.step < config.pretrain_steps {
        let step = state.step;
        let mut rng = derive_rng(config.seed, streams::PRETRAIN, step);
        let (loss, grads) = pretrain_batch(&params, config, episodes, &mut rng)?;
        optimizer_step(&mut params, &grads, &mut state, config.pretrain_lr)?;
        losses.push(loss);
        log.push(format!("{},{loss:e}", step + 1));
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && state.step % config.checkpoint_every == 0 {
                append_csv(&dir.join(PRETRAIN_LOG), "step,loss", &std::mem::take(&mut log))?;
                save_with_state(&params, &state, &dir.join(format!("pretrain_step{}.pwck", state.step)))?;
            }
        }
        if step % 100 == 0 {
            log::debug!("pretrain step {} loss {loss:.5}", step + 1);
        }
    }
    if let Some(dir) = out {
        append_csv(&dir.join(PRETRAIN_LOG), "step,loss", &log)?;
        save_with_state(&params, &state, &dir.join(PRETRAINED))?;
    }
    Ok(PretrainRun { params, state, losses })
}

/// Learner, reference and optimizer state of a post-training run.
#[derive(Debug, Clone, PartialEq)]
pub struct PosttrainState {
    pub params: DenoiserParams,
    pub reference: ReferencePolicy,
    pub opt: OptimizerState,
    /// Slow average of the learner, kept when `policy_ema` is enabled.
    pub ema: Option<DenoiserParams>,
}

pub fn reference_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".ref");
    PathBuf::from(s)
}

pub fn ema_path(checkpoint: &Path) -> PathBuf {
    let mut s = checkpoint.as_os_str().to_owned();
    s.push(".ema");
    PathBuf::from(s)
}

impl PosttrainState {
    /// Starts post-training from pretrained parameters: applies the freeze
    /// policy, copies the reference and resets the optimizer.
    pub fn start(config: &TrainConfig, mut params: DenoiserParams) -> Result<Self> {
        config.model.check_params(&params)?;
        params.set_freeze_mask(&DenoiserParams::posttrain_freeze_mask())?;
        // Copies do not count updates; a reloaded copy reads version 0 too.
        let copy = DenoiserParams { version: 0, ..params.clone() };
        let mut reference = ReferencePolicy::new(copy.clone());
        reference.warm_steps = config.ema_warm_steps;
        reference.max_coeff = config.ema_max;
        let opt = OptimizerState::new(&params);
        let ema = config.policy_ema.then_some(copy);
        Ok(PosttrainState { params, reference, opt, ema })
    }

    pub fn step(&self) -> u64 {
        self.opt.step
    }

    /// Writes the learner with its optimizer sidecar, the reference and,
    /// when present, the learner average.
    pub fn save(&self, path: &Path) -> Result<()> {
        save_with_state(&self.params, &self.opt, path)?;
        save_params(&self.reference.params, &reference_path(path))?;
        if let Some(e) = &self.ema {
            save_params(e, &ema_path(path))?;
        }
        Ok(())
    }

    /// Opens a post-training checkpoint when it has a reference sidecar;
    /// otherwise treats the file as pretrained parameters and starts fresh.
    pub fn open(config: &TrainConfig, path: &Path) -> Result<Self> {
        if !path.exists() {
            return Err(config_err!("checkpoint {} does not exist", path.display()));
        }
        let rp = reference_path(path);
        if !rp.exists() {
            return Self::start(config, load_params(path)?);
        }
        let (params, opt) = load_training_state(path)?;
        config.model.check_params(&params)?;
        let opt = opt.ok_or_else(|| config_err!("post-training checkpoint {} lacks its optimizer state", path.display()))?;
        let mut reference = ReferencePolicy::new(load_params(&rp)?);
        reference.warm_steps = config.ema_warm_steps;
        reference.max_coeff = config.ema_max;
        let ema = if config.policy_ema {
            let ep = ema_path(path);
            Some(if ep.exists() { load_params(&ep)? } else { DenoiserParams { version: 0, ..params.clone() } })
        } else {
            None
        };
        Ok(PosttrainState { params, reference, opt, ema })
    }
}

pub const STEP_HEADER: &str = "step,P,mean_R,std_R,loss,lr,retained";

/// Runs [`training_step`] until `config.steps` updates have been applied.
pub fn posttrain(config: &TrainConfig, episodes: &[Episode], mut state: PosttrainState, out: Option<&Path>) -> Result<(PosttrainState, Vec<StepReport>)> {
    config.validate()?;
    if episodes.is_empty() {
        return Err(config_err!("post-training needs at least one episode"));
    }
    let scorer = Scorer::new(config.model.world.channels);
    let mut reports = Vec::new();
    let mut pending = Vec::new();
    while state.step() < config.steps {
        let mut rng = derive_rng(config.seed, streams::POSTTRAIN, state.step());
        let report = training_step(&mut state, episodes, config, &scorer, &mut rng)?;
        if report.step % 50 == 0 {
            log::debug!("posttrain step {} mean_R {:.4} loss {:.5}", report.step, report.mean_r, report.loss);
        }
        pending.push(report.csv_line());
        reports.push(report);
        if let Some(dir) = out {
            if config.checkpoint_every > 0 && state.step() % config.checkpoint_every == 0 {
                append_csv(&dir.join(POSTTRAIN_LOG), STEP_HEADER, &std::mem::take(&mut pending))?;
                state.save(&dir.join(format!("posttrain_step{}.pwck", state.step())))?;
            }
        }
    }
    if let Some(dir) = out {
        append_csv(&dir.join(POSTTRAIN_LOG), STEP_HEADER, &pending)?;
        state.save(&dir.join(POSTTRAINED))?;
    }
    Ok((state, reports))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::denoiser::{DenoiserLayout, ParamArray};
    use crate::world::{generate_dataset, WorldConfig};
    use crate::world_model::ModelConfig;

    fn scalar(v: f64) -> (DenoiserParams, OptimizerState) {
        let p = DenoiserParams { arrays: vec![ParamArray { name: "x".into(), shape: vec![1], data: vec![v], frozen: false }], version: 0 };
        let s = OptimizerState::new(&p);
        (p, s)
    }

    #[test]
    fn adam_unit_step_and_zero_grad() {
        let (mut p, mut s) = scalar(1.0);
        optimizer_step(&mut p, &Gradients { arrays: vec![vec![1.0]] }, &mut s, 0.1).unwrap();
        assert!((p.arrays[0].data[0] - 0.9).abs() < 1e-6, "{}", p.arrays[0].data[0]);
        let before = p.clone();
        optimizer_step(&mut p, &Gradients { arrays: vec![vec![0.0]] }, &mut s, 0.1).unwrap();
        assert_eq!(s.step, 2);
        // The first moment still carries momentum, so take a fresh state.
        let (mut q, mut t) = scalar(0.25);
        optimizer_step(&mut q, &Gradients { arrays: vec![vec![0.0]] }, &mut t, 0.1).unwrap();
        assert_eq!(q.arrays[0].data, vec![0.25]);
        assert_eq!(t.step, 1);
        assert!(p.arrays[0].data[0] < before.arrays[0].data[0]);
    }

    #[test]
    fn adam_rejects_nonfinite_and_skips_frozen() {
        let (mut p, mut s) = scalar(1.0);
        let e = optimizer_step(&mut p, &Gradients { arrays: vec![vec![f64::NAN]] }, &mut s, 0.1).unwrap_err();
        assert!(e.to_string().contains("array x"), "{e}");
        p.arrays[0].frozen = true;
        optimizer_step(&mut p, &Gradients { arrays: vec![vec![f64::NAN]] }, &mut s, 0.1).unwrap();
        assert_eq!(p.arrays[0].data, vec![1.0]);
        assert_eq!(s.step, 1);
    }

    fn tiny() -> TrainConfig {
        TrainConfig {
            model: ModelConfig { hidden: 4, world: WorldConfig { height: 10, width: 10, ..WorldConfig::default() }, ..ModelConfig::default() },
            episode_steps: 12,
            pretrain_steps: 6,
            pretrain_batch: 2,
            steps: 0,
            prefix: crate::rollout::PrefixStrategy::Random { lo: 0, hi: 2 },
            eval_chunks: 2,
            checkpoint_every: 3,
            ..TrainConfig::default()
        }
    }

    #[test]
    fn pretrain_zero_steps_is_init_and_resume_is_exact() {
        let mut c = tiny();
        let ds = generate_dataset(&c.model.world, 2, c.episode_steps, 3).unwrap();
        c.pretrain_steps = 0;
        let r = pretrain(&c, &ds.episodes, None, None).unwrap();
        assert_eq!(r.params, initial_params(&c));

        c.pretrain_steps = 6;
        let full = pretrain(&c, &ds.episodes, None, None).unwrap();
        assert_ne!(full.params.arrays, initial_params(&c).arrays);
        let dir = tempfile::tempdir().unwrap();
        c.pretrain_steps = 3;
        pretrain(&c, &ds.episodes, None, Some(dir.path())).unwrap();
        let (p, s) = load_training_state(&dir.path().join(PRETRAINED)).unwrap();
        c.pretrain_steps = 6;
        let resumed = pretrain(&c, &ds.episodes, Some((p, s.unwrap())), Some(dir.path())).unwrap();
        assert_eq!(resumed.params, full.params);
        assert_eq!(resumed.state, full.state);
        assert_eq!(resumed.losses, full.losses[3..]);
        let log = std::fs::read_to_string(dir.path().join(PRETRAIN_LOG)).unwrap();
        assert_eq!(log.lines().count(), 7);
    }

    #[test]
    fn posttrain_resume_matches_uninterrupted() {
        let mut c = tiny();
        c.group_size = 3;
        c.selection = crate::rollout::SelectionPolicy { keep_top: 1, keep_bottom: 1 };
        c.sampler = crate::diffusion::SamplerConfig::with_steps(2);
        c.lr = 1e-3;
        let ds = generate_dataset(&c.model.world, 2, c.episode_steps, 4).unwrap();
        let init = pretrain(&c, &ds.episodes, None, None).unwrap().params;
        let frozen_before: Vec<ParamArray> = init.arrays[..3].to_vec();

        c.steps = 0;
        let (s0, reps) = posttrain(&c, &ds.episodes, PosttrainState::start(&c, init.clone()).unwrap(), None).unwrap();
        assert!(reps.is_empty());
        assert!(s0.params.arrays.iter().zip(&init.arrays).all(|(a, b)| a.data == b.data));

        c.steps = 4;
        let (full, full_reps) = posttrain(&c, &ds.episodes, PosttrainState::start(&c, init.clone()).unwrap(), None).unwrap();
        assert_eq!(full_reps.len(), 4);
        for (a, b) in full.params.arrays[..3].iter().zip(&frozen_before) {
            assert_eq!(a.data, b.data);
        }
        assert_ne!(full.params.arrays[5].data, init.arrays[5].data);

        let dir = tempfile::tempdir().unwrap();
        c.steps = 2;
        posttrain(&c, &ds.episodes, PosttrainState::start(&c, init).unwrap(), Some(dir.path())).unwrap();
        c.steps = 4;
        let state = PosttrainState::open(&c, &dir.path().join(POSTTRAINED)).unwrap();
        assert_eq!(state.step(), 2);
        let (resumed, reps) = posttrain(&c, &ds.episodes, state, Some(dir.path())).unwrap();
        assert_eq!(resumed, full);
        assert_eq!(reps, full_reps[2..]);
    }

    #[test]
    fn layout_mismatch_is_rejected() {
        let c = tiny();
        let other = DenoiserParams::init(DenoiserLayout { hidden: 5, ..c.model.layout() }, &mut rng_from(0));
        assert!(PosttrainState::start(&c, other).is_err());
    }
}

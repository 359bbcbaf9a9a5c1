//! Run configuration: plain-text `key = value` lines with `#` comments.
//!
//! Unknown keys are rejected. Command-line overrides use the same keys and
//! are applied after the file.

use std::fmt::Write as _;
use std::path::Path;

use crate::diffusion::{SamplerConfig, SigmaDistribution};
use crate::error::{config_err, Result};
use crate::nft::Reduction;
use crate::rewards::MetricWeights;
use crate::rollout::{PrefixStrategy, SelectionPolicy};
use crate::world::WorldConfig;
use crate::world_model::ModelConfig;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub seed: u64,
    pub model: ModelConfig,

    pub train_episodes: usize,
    pub test_episodes: usize,
    pub episode_steps: usize,

    pub sampler: SamplerConfig,
    pub sigma: SigmaDistribution,

    pub pretrain_steps: u64,
    pub pretrain_lr: f64,
    pub pretrain_batch: usize,

    pub steps: u64,
    pub lr: f64,
    /// Candidate groups per post-training update.
    pub batch: usize,
    pub beta: f64,
    pub group_size: usize,
    pub horizon: usize,
    pub selection: SelectionPolicy,
    pub prefix: PrefixStrategy,
    pub kl_lambda: f64,
    pub reduction: Reduction,
    pub norm_eps: f64,
    pub weights: MetricWeights,
    pub ema_warm_steps: u64,
    pub ema_max: f64,
    pub policy_ema: bool,
    pub policy_ema_decay: f64,

    pub eval_episodes: usize,
    pub eval_chunks: usize,
    pub masked_eval: bool,

    pub checkpoint_every: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            seed: 0,
            model: ModelConfig::default(),
            train_episodes: 64,
            test_episodes: 50,
            episode_steps: 36,
            sampler: SamplerConfig::default(),
            sigma: SigmaDistribution::default(),
            pretrain_steps: 2000,
            pretrain_lr: 2e-3,
            pretrain_batch: 8,
            steps: 1500,
            lr: 1e-4,
            batch: 1,
            beta: 0.1,
            group_size: 8,
            horizon: 1,
            selection: SelectionPolicy { keep_top: 3, keep_bottom: 3 },
            prefix: PrefixStrategy::Random { lo: 0, hi: 9 },
            kl_lambda: 0.01,
            reduction: Reduction::Mean,
            norm_eps: 1e-8,
            weights: MetricWeights::default(),
            ema_warm_steps: 500,
            ema_max: 0.5,
            policy_ema: false,
            policy_ema_decay: 0.99,
            eval_episodes: 50,
            eval_chunks: 10,
            masked_eval: false,
            checkpoint_every: 500,
        }
    }
}

fn parse<T: std::str::FromStr>(key: &str, value: &str) -> Result<T> {
    value.parse().map_err(|_| config_err!("cannot parse {value:?} for key {key}"))
}

fn parse_bool(key: &str, value: &str) -> Result<bool> {
    match value {
        "true" | "1" | "yes" | "on" => Ok(true),
        "false" | "0" | "no" | "off" => Ok(false),
        _ => Err(config_err!("cannot parse {value:?} as a boolean for key {key}")),
    }
}

/// Every accepted key, in the order the effective configuration is printed.
pub const KEYS: &[&str] = &[
    "seed",
    "height",
    "width",
    "channels",
    "n_objects",
    "max_translation",
    "max_rotation",
    "history",
    "chunk",
    "hidden",
    "train_episodes",
    "test_episodes",
    "episode_steps",
    "sampler_steps",
    "sigma_max",
    "sigma_min",
    "sigma_dist",
    "pretrain_steps",
    "pretrain_lr",
    "pretrain_batch",
    "steps",
    "lr",
    "batch",
    "beta",
    "group_size",
    "horizon",
    "keep_top",
    "keep_bottom",
    "prefix",
    "kl_lambda",
    "reduction",
    "norm_eps",
    "w_perceptual",
    "w_ssim",
    "w_psnr",
    "view_weights",
    "ema_warm_steps",
    "ema_max",
    "policy_ema",
    "policy_ema_decay",
    "eval_episodes",
    "eval_chunks",
    "masked_eval",
    "checkpoint_every",
];

impl TrainConfig {
    pub fn world(&self) -> &WorldConfig {
        &self.model.world
    }

    /// Sets one key from its textual value.
    pub fn set(&mut self, key: &str, value: &str) -> Result<()> {
        let v = value.trim();
        let w = &mut self.model.world;
        match key {
            "seed" => self.seed = parse(key, v)?,
            "height" => w.height = parse(key, v)?,
            "width" => w.width = parse(key, v)?,
            "channels" => w.channels = parse(key, v)?,
            "n_objects" => w.n_objects = parse(key, v)?,
            "max_translation" => w.max_translation = parse(key, v)?,
            "max_rotation" => w.max_rotation = parse(key, v)?,
            "history" => self.model.history = parse(key, v)?,
            "chunk" => self.model.chunk = parse(key, v)?,
            "hidden" => self.model.hidden = parse(key, v)?,
            "train_episodes" => self.train_episodes = parse(key, v)?,
            "test_episodes" => self.test_episodes = parse(key, v)?,
            "episode_steps" => self.episode_steps = parse(key, v)?,
            "sampler_steps" => self.sampler.steps = parse(key, v)?,
            "sigma_max" => self.sampler.sigma_max = parse(key, v)?,
            "sigma_min" => self.sampler.sigma_min = parse(key, v)?,
            "sigma_dist" => self.sigma = parse_sigma(v)?,
            "pretrain_steps" => self.pretrain_steps = parse(key, v)?,
            "pretrain_lr" => self.pretrain_lr = parse(key, v)?,
            "pretrain_batch" => self.pretrain_batch = parse(key, v)?,
            "steps" => self.steps = parse(key, v)?,
            "lr" => self.lr = parse(key, v)?,
            "batch" => self.batch = parse(key, v)?,
            "beta" => self.beta = parse(key, v)?,
            "group_size" => self.group_size = parse(key, v)?,
            "horizon" => self.horizon = parse(key, v)?,
            "keep_top" => self.selection.keep_top = parse(key, v)?,
            "keep_bottom" => self.selection.keep_bottom = parse(key, v)?,
            "prefix" => self.prefix = v.parse()?,
            "kl_lambda" => self.kl_lambda = parse(key, v)?,
            "reduction" => {
                self.reduction = match v {
                    "mean" => Reduction::Mean,
                    "sum" => Reduction::Sum,
                    _ => return Err(config_err!("reduction must be mean or sum, got {v:?}")),
                }
            }
            "norm_eps" => self.norm_eps = parse(key, v)?,
            "w_perceptual" => self.weights.perceptual = parse(key, v)?,
            "w_ssim" => self.weights.ssim = parse(key, v)?,
            "w_psnr" => self.weights.psnr = parse(key, v)?,
            "view_weights" => {
                self.weights.views = v.split(',').map(|s| parse(key, s.trim())).collect::<Result<Vec<f64>>>()?;
            }
            "ema_warm_steps" => self.ema_warm_steps = parse(key, v)?,
            "ema_max" => self.ema_max = parse(key, v)?,
            "policy_ema" => self.policy_ema = parse_bool(key, v)?,
            "policy_ema_decay" => self.policy_ema_decay = parse(key, v)?,
            "eval_episodes" => self.eval_episodes = parse(key, v)?,
            "eval_chunks" => self.eval_chunks = parse(key, v)?,
            "masked_eval" => self.masked_eval = parse_bool(key, v)?,
            "checkpoint_every" => self.checkpoint_every = parse(key, v)?,
            _ => return Err(config_err!("unknown configuration key {key:?}")),
        }
        Ok(())
    }

    /// Value of a key, formatted so that `set(key, get(key))` is the identity.
    pub fn get(&self, key: &str) -> Option<String> {
        let w = &self.model.world;
        Some(match key {
            "seed" => self.seed.to_string(),
            "height" => w.height.to_string(),
            "width" => w.width.to_string(),
            "channels" => w.channels.to_string(),
            "n_objects" => w.n_objects.to_string(),
            "max_translation" => w.max_translation.to_string(),
            "max_rotation" => w.max_rotation.to_string(),
            "history" => self.model.history.to_string(),
            "chunk" => self.model.chunk.to_string(),
            "hidden" => self.model.hidden.to_string(),
            "train_episodes" => self.train_episodes.to_string(),
            "test_episodes" => self.test_episodes.to_string(),
            "episode_steps" => self.episode_steps.to_string(),
            "sampler_steps" => self.sampler.steps.to_string(),
            "sigma_max" => self.sampler.sigma_max.to_string(),
            "sigma_min" => self.sampler.sigma_min.to_string(),
            "sigma_dist" => match self.sigma {
                SigmaDistribution::LogNormal { location, scale } => format!("lognormal:{location}:{scale}"),
                SigmaDistribution::Fixed(s) => format!("fixed:{s}"),
            },
            "pretrain_steps" => self.pretrain_steps.to_string(),
            "pretrain_lr" => self.pretrain_lr.to_string(),
            "pretrain_batch" => self.pretrain_batch.to_string(),
            "steps" => self.steps.to_string(),
            "lr" => self.lr.to_string(),
            "batch" => self.batch.to_string(),
            "beta" => self.beta.to_string(),
            "group_size" => self.group_size.to_string(),
            "horizon" => self.horizon.to_string(),
            "keep_top" => self.selection.keep_top.to_string(),
            "keep_bottom" => self.selection.keep_bottom.to_string(),
            "prefix" => self.prefix.to_string(),
            "kl_lambda" => self.kl_lambda.to_string(),
            "reduction" => match self.reduction {
                Reduction::Mean => "mean".into(),
                Reduction::Sum => "sum".into(),
            },
            "norm_eps" => self.norm_eps.to_string(),
            "w_perceptual" => self.weights.perceptual.to_string(),
            "w_ssim" => self.weights.ssim.to_string(),
            "w_psnr" => self.weights.psnr.to_string(),
            "view_weights" => self.weights.views.iter().map(|v| v.to_string()).collect::<Vec<_>>().join(","),
            "ema_warm_steps" => self.ema_warm_steps.to_string(),
            "ema_max" => self.ema_max.to_string(),
            "policy_ema" => self.policy_ema.to_string(),
            "policy_ema_decay" => self.policy_ema_decay.to_string(),
            "eval_episodes" => self.eval_episodes.to_string(),
            "eval_chunks" => self.eval_chunks.to_string(),
            "masked_eval" => self.masked_eval.to_string(),
            "checkpoint_every" => self.checkpoint_every.to_string(),
            _ => return None,
        })
    }

    /// Applies `key = value` lines. Blank lines and `#` comments are ignored.
    pub fn apply_text(&mut self, text: &str) -> Result<()> {
        for (n, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let (k, v) = line.split_once('=').ok_or_else(|| config_err!("line {}: expected key = value, got {raw:?}", n + 1))?;
            self.set(k.trim(), v).map_err(|e| config_err!("line {}: {}", n + 1, e.to_string().trim_start_matches("invalid configuration: ")))?;
        }
        Ok(())
    }

    pub fn from_text(text: &str) -> Result<Self> {
        let mut c = TrainConfig::default();
        c.apply_text(text)?;
        c.validate()?;
        Ok(c)
    }

    pub fn from_file(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| config_err!("cannot read config {}: {e}", path.display()))?;
        Self::from_text(&text)
    }

    /// Applies `key=value` override strings.
    pub fn apply_overrides<S: AsRef<str>>(&mut self, overrides: &[S]) -> Result<()> {
        for o in overrides {
            let o = o.as_ref();
            let (k, v) = o.split_once('=').ok_or_else(|| config_err!("override {o:?} is not key=value"))?;
            self.set(k.trim(), v)?;
        }
        Ok(())
    }

    /// The effective configuration in file syntax.
    pub fn to_text(&self) -> String {
        let mut s = String::new();
        for k in KEYS {
            let _ = writeln!(s, "{k} = {}", self.get(k).expect("every listed key has a value"));
        }
        s
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        self.sampler.validate()?;
        self.sigma.validate()?;
        self.weights.validate()?;
        if self.weights.views.len() != crate::world::VIEWS {
            return Err(config_err!("view_weights needs {} entries", crate::world::VIEWS));
        }
        if !(self.lr >= 0.0 && self.lr.is_finite() && self.pretrain_lr >= 0.0 && self.pretrain_lr.is_finite()) {
            return Err(config_err!("learning rates must be finite and non-negative"));
        }
        if !(self.beta > 0.0 && self.beta <= 1.0) {
            return Err(config_err!("beta must lie in (0, 1], got {}", self.beta));
        }
        if self.group_size < 2 {
            return Err(config_err!("group_size must be at least 2"));
        }
        if self.horizon < 1 || self.batch < 1 || self.pretrain_batch < 1 {
            return Err(config_err!("horizon, batch and pretrain_batch must be at least 1"));
        }
        if self.selection.keep_top + self.selection.keep_bottom > self.group_size || self.selection.keep_top + self.selection.keep_bottom == 0 {
            return Err(config_err!(
                "keep_top + keep_bottom must be in 1..={} (got {} + {})",
                self.group_size,
                self.selection.keep_top,
                self.selection.keep_bottom
            ));
        }
        if !(self.kl_lambda >= 0.0) || !(self.norm_eps >= 0.0) {
            return Err(config_err!("kl_lambda and norm_eps must be non-negative"));
        }
        if !(0.0..=1.0).contains(&self.ema_max) || !(0.0..1.0).contains(&self.policy_ema_decay) {
            return Err(config_err!("ema_max must be in [0, 1] and policy_ema_decay in [0, 1)"));
        }
        let l = self.model.chunk;
        let min_steps = (self.prefix.max_len() + self.horizon) * l;
        if self.episode_steps < min_steps {
            return Err(config_err!(
                "episode_steps = {} cannot hold the longest prefix plus horizon ({} steps)",
                self.episode_steps,
                min_steps
            ));
        }
        if self.eval_chunks * l > self.episode_steps {
            return Err(config_err!("eval_chunks × chunk exceeds episode_steps"));
        }
        Ok(())
    }
}

fn parse_sigma(v: &str) -> Result<SigmaDistribution> {
    let parts: Vec<&str> = v.split(':').map(str::trim).collect();
    let d = match parts.as_slice() {
        ["lognormal", loc, scale] => SigmaDistribution::LogNormal { location: parse("sigma_dist", loc)?, scale: parse("sigma_dist", scale)? },
        ["fixed", s] => SigmaDistribution::Fixed(parse("sigma_dist", s)?),
        _ => return Err(config_err!("sigma_dist must be lognormal:LOC:SCALE or fixed:SIGMA, got {v:?}")),
    };
    d.validate()?;
    Ok(d)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn parses_comments_and_rejects_unknown_keys() {
        let c = TrainConfig::from_text("# header\nseed = 7  # trailing\n\nlr=0.5\nprefix = fixed:3\nview_weights = 2,1,1\n").unwrap();
        assert_eq!(c.seed, 7);
        assert_eq!(c.lr, 0.5);
        assert_eq!(c.prefix, PrefixStrategy::Fixed(3));
        assert_eq!(c.weights.views, vec![2.0, 1.0, 1.0]);
        let e = TrainConfig::from_text("seed = 1\nbogus = 2\n").unwrap_err();
        assert!(e.is_validation());
        assert!(e.to_string().contains("line 2") && e.to_string().contains("bogus"), "{e}");
        assert!(TrainConfig::from_text("seed 1").is_err());
        assert!(TrainConfig::from_text("beta = 0").is_err());
    }

    #[test]
    fn echo_round_trips() {
        let mut c = TrainConfig::default();
        c.apply_overrides(&["sigma_dist=fixed:0.5", "policy_ema=true", "reduction=sum", "prefix=curriculum:6"]).unwrap();
        let back = TrainConfig::from_text(&c.to_text()).unwrap();
        assert_eq!(back, c);
        for k in KEYS {
            assert!(c.get(k).is_some(), "{k}");
        }
    }
}

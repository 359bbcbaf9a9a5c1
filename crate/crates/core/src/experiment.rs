//! The full pipeline: datasets, pretraining, post-training and a paired
//! closed-loop comparison of the two models on held-out episodes.

use std::fs::File;
use std::io::BufWriter;
use std::path::Path;

use crate::config::TrainConfig;
use crate::eval::{paired_compare, rollout_eval, step_curve, write_paired_csv, EvalSettings, PairedResult, ALL_VIEWS};
use crate::error::Result;
use crate::rewards::{write_metric_csv, MetricRow, Scorer};
use crate::rng::{derive_seed, streams};
use crate::rollout::StepReport;
use crate::trainer::{posttrain, pretrain, PosttrainState};
use crate::world::{generate_dataset, Dataset};
use crate::world_model::DiffusionModel;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn name(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

impl std::str::FromStr for Split {
    type Err = crate::Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "test" => Ok(Split::Test),
            _ => Err(crate::error::config_err!("split must be train or test, got {s:?}")),
        }
    }
}

/// Generates one split. The two splits use unrelated seeds.
pub fn make_split(config: &TrainConfig, split: Split) -> Result<Dataset> {
    let (n, idx) = match split {
        Split::Train => (config.train_episodes, 0),
        Split::Test => (config.test_episodes, 1),
    };
    generate_dataset(&config.model.world, n, config.episode_steps, derive_seed(config.seed, streams::DATASET, idx))
}

pub fn eval_settings(config: &TrainConfig) -> EvalSettings {
    EvalSettings { n_chunks: config.eval_chunks, weights: config.weights.clone(), masked: config.masked_eval, seed: config.seed }
}

#[derive(Debug, Clone)]
pub struct EndToEnd {
    pub pretrain_losses: Vec<f64>,
    pub reports: Vec<StepReport>,
    pub base_rows: Vec<MetricRow>,
    pub post_rows: Vec<MetricRow>,
    /// Post-trained versus pretrained.
    pub paired: PairedResult,
    pub base_final_ssim: f64,
    pub post_final_ssim: f64,
}

impl EndToEnd {
    /// Mean of the per-rollout combined scores of each model.
    pub fn mean_scores(&self) -> (f64, f64) {
        let mean = |rows: &[MetricRow]| {
            let s = crate::eval::rollout_scores(rows);
            s.values().sum::<f64>() / s.len() as f64
        };
        (mean(&self.base_rows), mean(&self.post_rows))
    }
}

/// Runs everything with `config`. With `out` set, checkpoints, training
/// logs, both metric tables and the paired deltas are written there.
pub fn end_to_end(config: &TrainConfig, out: Option<&Path>) -> Result<EndToEnd> {
    config.validate()?;
    let train = make_split(config, Split::Train)?;
    let test = make_split(config, Split::Test)?;
    let base = pretrain(config, &train.episodes, None, out)?;
    let (post, reports) = posttrain(config, &train.episodes, PosttrainState::start(config, base.params.clone())?, out)?;

    let scorer = Scorer::new(config.model.world.channels);
    let settings = EvalSettings { n_chunks: config.eval_chunks, ..eval_settings(config) };
    let eval_eps = &test.episodes[..config.eval_episodes.min(test.episodes.len())];
    let evaluate = |params| rollout_eval(&DiffusionModel { params, config: &config.model, sampler: config.sampler }, &config.model, eval_eps, &scorer, &settings);
    let base_rows = evaluate(&base.params)?;
    let post_params = post.ema.as_ref().unwrap_or(&post.params);
    let post_rows = evaluate(post_params)?;
    let paired = paired_compare(&post_rows, &base_rows)?;
    let final_ssim = |rows: &[MetricRow]| step_curve(rows, ALL_VIEWS, "ssim").last().map_or(f64::NAN, |s| s.1);

    if let Some(dir) = out {
        write_metric_csv(BufWriter::new(File::create(dir.join("eval_pretrained.csv"))?), &base_rows)?;
        write_metric_csv(BufWriter::new(File::create(dir.join("eval_posttrained.csv"))?), &post_rows)?;
        write_paired_csv(BufWriter::new(File::create(dir.join("paired.csv"))?), &paired)?;
    }
    Ok(EndToEnd {
        pretrain_losses: base.losses,
        base_final_ssim: final_ssim(&base_rows),
        post_final_ssim: final_ssim(&post_rows),
        reports,
        base_rows,
        post_rows,
        paired,
    })
}

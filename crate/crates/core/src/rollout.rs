//! Post-training rollouts: a shared prefix generated by the current model,
//! K private continuations, group-relative scoring, selection of the most
//! informative candidates and one contrastive update.

use std::fmt;
use std::str::FromStr;

use rand::Rng as _;
use rayon::prelude::*;

use crate::config::TrainConfig;
use crate::denoiser::Gradients;
use crate::diffusion::{forward_noise, sample_sigma};
use crate::error::{config_err, domain_err, Result};
use crate::nft::{ema_update, nft_loss_gradients, policy_ema_update};
use crate::rewards::{group_normalize, GroupRewards, MetricWeights, Scorer};
use crate::rng::{derive_seed, rng_from, streams, Rng};
use crate::tensor::Clip;
use crate::trainer::{optimizer_step, PosttrainState};
use crate::world::Episode;
use crate::world_model::{build_conditioning, episode_chunk, init_history, push_chunk, rollout, ChunkModel, DiffusionModel, HistoryBuffer, ModelConfig};

/// How many chunks the shared prefix spans.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PrefixStrategy {
    Fixed(usize),
    /// Uniform on `lo..=hi`.
    Random { lo: usize, hi: usize },
    /// Uniform on `0..=m(step)` where `m` grows linearly from 0 to `max`
    /// over `ramp_steps` steps. `ramp_steps = 0` means half of the run.
    Curriculum { max: usize, ramp_steps: u64 },
}

impl PrefixStrategy {
    pub fn validate(&self) -> Result<()> {
        match *self {
            PrefixStrategy::Random { lo, hi } if lo > hi => Err(config_err!("prefix range {lo}..={hi} is empty")),
            _ => Ok(()),
        }
    }

    pub fn max_len(&self) -> usize {
        match *self {
            PrefixStrategy::Fixed(p) => p,
            PrefixStrategy::Random { hi, .. } => hi,
            PrefixStrategy::Curriculum { max, .. } => max,
        }
    }

    /// Replaces a zero curriculum ramp by half of `total_steps`.
    pub fn resolve(self, total_steps: u64) -> Self {
        match self {
            PrefixStrategy::Curriculum { max, ramp_steps: 0 } => PrefixStrategy::Curriculum { max, ramp_steps: (total_steps / 2).max(1) },
            s => s,
        }
    }
}

impl fmt::Display for PrefixStrategy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            PrefixStrategy::Fixed(p) => write!(f, "fixed:{p}"),
            PrefixStrategy::Random { lo, hi } => write!(f, "random:{lo}:{hi}"),
            PrefixStrategy::Curriculum { max, ramp_steps: 0 } => write!(f, "curriculum:{max}"),
            PrefixStrategy::Curriculum { max, ramp_steps } => write!(f, "curriculum:{max}:{ramp_steps}"),
        }
    }
}

impl FromStr for PrefixStrategy {
    type Err = crate::Error;

    /// `fixed:P`, `random:LO:HI` or `curriculum:MAX[:RAMP]`.
    fn from_str(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.trim().split(':').map(str::trim).collect();
        let num = |x: &str| x.parse::<u64>().map_err(|_| config_err!("bad number {x:?} in prefix strategy {s:?}"));
        let p = match parts.as_slice() {
            ["fixed", p] => PrefixStrategy::Fixed(num(p)? as usize),
            ["random", lo, hi] => PrefixStrategy::Random { lo: num(lo)? as usize, hi: num(hi)? as usize },
            ["curriculum", m] => PrefixStrategy::Curriculum { max: num(m)? as usize, ramp_steps: 0 },
            ["curriculum", m, r] => PrefixStrategy::Curriculum { max: num(m)? as usize, ramp_steps: num(r)? },
            _ => return Err(config_err!("prefix must be fixed:P, random:LO:HI or curriculum:MAX[:RAMP], got {s:?}")),
        };
        p.validate()?;
        Ok(p)
    }
}

/// Draws the prefix length for outer step `step`. A curriculum must be
/// resolved first (see [`PrefixStrategy::resolve`]).
pub fn sample_prefix_length(strategy: PrefixStrategy, rng: &mut Rng, step: u64) -> usize {
    match strategy {
        PrefixStrategy::Fixed(p) => p,
        PrefixStrategy::Random { lo, hi } => rng.random_range(lo..=hi),
        PrefixStrategy::Curriculum { max, ramp_steps } => {
            let frac = if ramp_steps == 0 { 1.0 } else { (step as f64 / ramp_steps as f64).min(1.0) };
            let cap = (max as f64 * frac).floor() as usize;
            rng.random_range(0..=cap)
        }
    }
}

/// Initializes the history from the first frame and rolls `p` chunks with
/// the model, conditioning on the episode's actions.
pub fn roll_prefix<M: ChunkModel + ?Sized>(model: &M, config: &ModelConfig, episode: &Episode, p: usize, rng: &mut Rng) -> Result<HistoryBuffer> {
    if (p * config.chunk) > episode.len() {
        return Err(domain_err!("episode of {} steps is too short for a {p}-chunk prefix", episode.len()));
    }
    let mut buffer = init_history(config, &episode.views[0], episode.states[0].ee_pose());
    rollout(model, config, episode, &mut buffer, 0, p, rng)?;
    Ok(buffer)
}

#[derive(Debug, Clone, PartialEq)]
pub struct Candidate {
    /// Generated chunks.
    pub chunks: Vec<Clip>,
    /// The candidate's private buffer before each chunk.
    pub contexts: Vec<HistoryBuffer>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CandidateGroup {
    pub prefix: HistoryBuffer,
    /// Frame index the continuations start from.
    pub start: usize,
    pub candidates: Vec<Candidate>,
    pub seeds: Vec<u64>,
}

/// Per-candidate seeds derived from one group seed.
pub fn candidate_seeds(group_seed: u64, k: usize) -> Vec<u64> {
    (0..k as u64).map(|i| derive_seed(group_seed, streams::CANDIDATE, i)).collect()
}

/// `K = seeds.len()` continuations of `f` chunks, each on its own copy of
/// `prefix`, generated in parallel.
pub fn branch_candidates_with_seeds<M: ChunkModel + ?Sized>(
    model: &M,
    config: &ModelConfig,
    episode: &Episode,
    prefix: &HistoryBuffer,
    start: usize,
    f: usize,
    seeds: &[u64],
) -> Result<CandidateGroup> {
    if seeds.len() < 2 || f < 1 {
        return Err(domain_err!("branching needs K ≥ 2 and F ≥ 1 (got K={}, F={f})", seeds.len()));
    }
    let l = config.chunk;
    if start + f * l > episode.len() {
        return Err(domain_err!("episode of {} steps cannot hold {f} chunks from frame {start}", episode.len()));
    }
    let candidates = seeds
        .par_iter()
        .map(|&seed| {
            let mut rng = rng_from(seed);
            let mut buffer = prefix.clone();
            let mut chunks = Vec::with_capacity(f);
            let mut contexts = Vec::with_capacity(f);
            for n in 0..f {
                let t = start + n * l;
                contexts.push(buffer.clone());
                let chunk = model.generate(&buffer, &episode.actions[t..t + l], t, &mut rng)?;
                push_chunk(config, &mut buffer, chunk.clone(), episode.states[t + l].ee_pose())?;
                chunks.push(chunk);
            }
            Ok(Candidate { chunks, contexts })
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CandidateGroup { prefix: prefix.clone(), start, candidates, seeds: seeds.to_vec() })
}

pub fn branch_candidates<M: ChunkModel + ?Sized>(
    model: &M,
    config: &ModelConfig,
    episode: &Episode,
    prefix: &HistoryBuffer,
    start: usize,
    k: usize,
    f: usize,
    group_seed: u64,
) -> Result<CandidateGroup> {
    branch_candidates_with_seeds(model, config, episode, prefix, start, f, &candidate_seeds(group_seed, k))
}

/// Combined score of every candidate, averaged over its chunks, then
/// normalized within the group.
pub fn score_candidates(
    group: &CandidateGroup,
    config: &ModelConfig,
    episode: &Episode,
    scorer: &Scorer,
    weights: &MetricWeights,
    eps: f64,
) -> Result<GroupRewards> {
    let f = group.candidates.first().map_or(0, |c| c.chunks.len());
    let gt: Vec<Clip> = (0..f).map(|n| episode_chunk(config, episode, group.start + n * config.chunk)).collect::<Result<_>>()?;
    let raw = group
        .candidates
        .par_iter()
        .map(|c| {
            if c.chunks.len() != f {
                return Err(domain_err!("candidates have different horizons"));
            }
            let mut s = 0.0;
            for (chunk, truth) in c.chunks.iter().zip(&gt) {
                s += scorer.clip_score(chunk, truth, weights)?.combined;
            }
            Ok(s / f as f64)
        })
        .collect::<Result<Vec<f64>>>()?;
    group_normalize(&raw, eps)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SelectionPolicy {
    pub keep_top: usize,
    pub keep_bottom: usize,
}

/// The `keep_top` highest raw rewards (descending) followed by the
/// `keep_bottom` lowest of the rest (ascending). Ties go to the lower index.
pub fn select_informative(raw: &[f64], policy: SelectionPolicy) -> Result<Vec<usize>> {
    if policy.keep_top + policy.keep_bottom > raw.len() {
        return Err(config_err!("cannot keep {} + {} of {} candidates", policy.keep_top, policy.keep_bottom, raw.len()));
    }
    let mut desc: Vec<usize> = (0..raw.len()).collect();
    desc.sort_by(|&a, &b| raw[b].total_cmp(&raw[a]).then(a.cmp(&b)));
    let top: Vec<usize> = desc[..policy.keep_top].to_vec();
    let mut asc: Vec<usize> = desc[policy.keep_top..].to_vec();
    asc.sort_by(|&a, &b| raw[a].total_cmp(&raw[b]).then(a.cmp(&b)));
    Ok(top.into_iter().chain(asc.into_iter().take(policy.keep_bottom)).collect())
}

/// One line of the post-training log.
#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub step: u64,
    /// Prefix length of each group in the batch.
    pub prefixes: Vec<usize>,
    pub mean_r: f64,
    pub std_r: f64,
    pub loss: f64,
    pub lr: f64,
    pub retained: usize,
}

impl StepReport {
    pub fn csv_line(&self) -> String {
        let p: Vec<String> = self.prefixes.iter().map(|p| p.to_string()).collect();
        format!("{},{},{:e},{:e},{:e},{:e},{}", self.step, p.join(";"), self.mean_r, self.std_r, self.loss, self.lr, self.retained)
    }
}

/// One post-training update over `config.batch` candidate groups: prefix,
/// branch, score, select, then the reward-weighted branch loss on every
/// retained chunk, a single optimizer step and the reference update.
pub fn training_step(state: &mut PosttrainState, episodes: &[Episode], config: &TrainConfig, scorer: &Scorer, rng: &mut Rng) -> Result<StepReport> {
    let mc = &config.model;
    let l = mc.chunk;
    let f = config.horizon;
    let step = state.step();
    let strategy = config.prefix.resolve(config.steps);
    let model = DiffusionModel { params: &state.params, config: mc, sampler: config.sampler };

    let mut prefixes = Vec::with_capacity(config.batch);
    let mut jobs: Vec<(usize, Clip, HistoryBuffer, Vec<crate::world::Action>, f64, u64, usize)> = Vec::new();
    let (mut mean_r, mut std_r) = (0.0, 0.0);
    for _ in 0..config.batch {
        let e = rng.random_range(0..episodes.len());
        let ep = &episodes[e];
        let max_p = (ep.len() / l).checked_sub(f).ok_or_else(|| domain_err!("episode {e} is shorter than the horizon"))?;
        let p = sample_prefix_length(strategy, rng, step).min(max_p);
        let prefix_seed = rng.random::<u64>();
        let group_seed = rng.random::<u64>();
        prefixes.push(p);

        let prefix = roll_prefix(&model, mc, ep, p, &mut rng_from(prefix_seed))?;
        let start = p * l;
        let group = branch_candidates(&model, mc, ep, &prefix, start, config.group_size, f, group_seed)?;
        let rewards = score_candidates(&group, mc, ep, scorer, &config.weights, config.norm_eps)?;
        mean_r += rewards.mean;
        std_r += rewards.std;
        for k in select_informative(&rewards.raw, config.selection)? {
            let cand = &group.candidates[k];
            for n in 0..f {
                let t = start + n * l;
                jobs.push((
                    e,
                    cand.chunks[n].clone(),
                    cand.contexts[n].clone(),
                    ep.actions[t..t + l].to_vec(),
                    rewards.weights[k],
                    derive_seed(group.seeds[k], streams::NOISE, n as u64),
                    k,
                ));
            }
        }
    }

    let results = jobs
        .par_iter()
        .map(|(_, x0, context, actions, r, noise_seed, _)| {
            let mut nr = rng_from(*noise_seed);
            let sigma = sample_sigma(&mut nr, config.sigma)?;
            let x_sigma = forward_noise(x0, sigma, &mut nr)?;
            let cond = build_conditioning(mc, context, actions)?;
            let out = nft_loss_gradients(&state.params, &state.reference, &x_sigma, &cond, x0, *r, config.beta, config.kl_lambda, config.reduction)?;
            Ok((out.loss + out.kl, out.grads))
        })
        .collect::<Result<Vec<_>>>()?;
    let mut grads = Gradients::zeros_like(&state.params);
    let mut loss = 0.0;
    for (l, g) in &results {
        loss += l;
        grads.add_assign(g);
    }
    let n = results.len().max(1) as f64;
    grads.scale(1.0 / n);
    loss /= n;

    optimizer_step(&mut state.params, &grads, &mut state.opt, config.lr)?;
    ema_update(&mut state.reference, &state.params, state.opt.step)?;
    if let Some(ema) = &mut state.ema {
        policy_ema_update(ema, &state.params, config.policy_ema_decay);
    }
    let b = config.batch as f64;
    Ok(StepReport { step: state.opt.step, prefixes, mean_r: mean_r / b, std_r: std_r / b, loss, lr: config.lr, retained: results.len() })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::world::{generate_episode, Action, WorldConfig};

    fn cfg() -> ModelConfig {
        ModelConfig { hidden: 4, world: WorldConfig { height: 10, width: 10, ..WorldConfig::default() }, ..ModelConfig::default() }
    }

    struct Truth<'a>(&'a Episode, &'a ModelConfig);
    impl ChunkModel for Truth<'_> {
        fn generate(&self, _: &HistoryBuffer, _: &[Action], start: usize, _: &mut Rng) -> Result<Clip> {
            episode_chunk(self.1, self.0, start)
        }
    }

    /// Ground truth plus noise whose size is keyed off the generator.
    struct Noisy<'a>(&'a Episode, &'a ModelConfig);
    impl ChunkModel for Noisy<'_> {
        fn generate(&self, _: &HistoryBuffer, _: &[Action], start: usize, rng: &mut Rng) -> Result<Clip> {
            let mut c = episode_chunk(self.1, self.0, start)?;
            let amp = rng.random_range(0.0..0.3);
            c.data_mut().iter_mut().for_each(|v| *v = (*v + amp * rng.random_range(-1.0..1.0)).clamp(0.0, 1.0));
            Ok(c)
        }
    }

    #[test]
    fn prefix_strategies() {
        let mut rng = rng_from(0);
        assert!((0..50).all(|_| sample_prefix_length(PrefixStrategy::Fixed(3), &mut rng, 0) == 3));
        assert!((0..50).all(|_| sample_prefix_length(PrefixStrategy::Random { lo: 0, hi: 0 }, &mut rng, 0) == 0));
        let c = PrefixStrategy::Curriculum { max: 9, ramp_steps: 100 };
        assert!((0..50).all(|_| sample_prefix_length(c, &mut rng, 0) == 0));
        assert!((0..200).all(|_| sample_prefix_length(c, &mut rng, 50) <= 4));
        assert!((0..200).any(|_| sample_prefix_length(c, &mut rng, 1000) == 9));
        for s in ["fixed:3", "random:0:9", "curriculum:9", "curriculum:9:750"] {
            assert_eq!(s.parse::<PrefixStrategy>().unwrap().to_string(), s);
        }
        assert!("random:5:2".parse::<PrefixStrategy>().is_err());
        assert_eq!("curriculum:9".parse::<PrefixStrategy>().unwrap().resolve(1500), PrefixStrategy::Curriculum { max: 9, ramp_steps: 750 });
    }

    #[test]
    fn prefix_with_truth_model_matches_ground_truth() {
        let c = cfg();
        let ep = generate_episode(&c.world, 15, 2, 0);
        let b0 = roll_prefix(&Truth(&ep, &c), &c, &ep, 0, &mut rng_from(0)).unwrap();
        assert_eq!(b0, init_history(&c, &ep.views[0], ep.states[0].ee_pose()));
        let b = roll_prefix(&Truth(&ep, &c), &c, &ep, 3, &mut rng_from(0)).unwrap();
        let w = crate::world_model::episode_window(&c, &ep, 9).unwrap();
        for (a, g) in b.slots.iter().zip(&w.buffer.slots).skip(1) {
            assert_eq!(a, g);
        }
        assert!(roll_prefix(&Truth(&ep, &c), &c, &ep, 6, &mut rng_from(0)).is_err());
    }

    #[test]
    fn branching_has_value_semantics_and_private_seeds() {
        let c = cfg();
        let ep = generate_episode(&c.world, 15, 2, 0);
        let m = Noisy(&ep, &c);
        let prefix = roll_prefix(&m, &c, &ep, 1, &mut rng_from(1)).unwrap();
        let hash = prefix.fingerprint();
        let g = branch_candidates(&m, &c, &ep, &prefix, 3, 4, 2, 11).unwrap();
        assert_eq!(prefix.fingerprint(), hash);
        assert!(g.candidates.iter().all(|k| k.contexts[0].fingerprint() == hash));
        for i in 0..4 {
            for j in i + 1..4 {
                assert_ne!(g.candidates[i].chunks, g.candidates[j].chunks);
            }
        }
        let same = branch_candidates_with_seeds(&m, &c, &ep, &prefix, 3, 2, &[5, 5]).unwrap();
        assert_eq!(same.candidates[0], same.candidates[1]);
        assert_eq!(branch_candidates(&m, &c, &ep, &prefix, 3, 4, 2, 11).unwrap(), g);
        assert!(branch_candidates_with_seeds(&m, &c, &ep, &prefix, 3, 1, &[5]).is_err());
    }

    #[test]
    fn scoring_prefers_truth() {
        let c = cfg();
        let ep = generate_episode(&c.world, 15, 2, 0);
        let scorer = Scorer::new(3);
        let prefix = init_history(&c, &ep.views[0], ep.states[0].ee_pose());
        let mut g = branch_candidates(&Noisy(&ep, &c), &c, &ep, &prefix, 0, 4, 1, 3).unwrap();
        g.candidates[2].chunks[0] = episode_chunk(&c, &ep, 0).unwrap();
        let r = score_candidates(&g, &c, &ep, &scorer, &MetricWeights::default(), 1e-8).unwrap();
        let best = r.weights.iter().cloned().fold(f64::MIN, f64::max);
        assert_eq!(r.weights[2], best);
        let same = branch_candidates(&Truth(&ep, &c), &c, &ep, &prefix, 0, 3, 1, 3).unwrap();
        let r = score_candidates(&same, &c, &ep, &scorer, &MetricWeights::default(), 1e-8).unwrap();
        assert_eq!(r.weights, vec![0.5; 3]);
    }

    #[test]
    fn selection_rules() {
        let raw = [0.3, 0.9, 0.1, 0.5, 0.5, 0.2];
        assert_eq!(select_informative(&raw, SelectionPolicy { keep_top: 6, keep_bottom: 0 }).unwrap(), vec![1, 3, 4, 0, 5, 2]);
        assert_eq!(select_informative(&raw, SelectionPolicy { keep_top: 2, keep_bottom: 2 }).unwrap(), vec![1, 3, 2, 5]);
        let ties = [1.0, 1.0, 1.0, 1.0];
        assert_eq!(select_informative(&ties, SelectionPolicy { keep_top: 1, keep_bottom: 1 }).unwrap(), vec![0, 1]);
        assert!(select_informative(&raw, SelectionPolicy { keep_top: 4, keep_bottom: 3 }).is_err());
    }

    #[test]
    fn step_report_csv() {
        let r = StepReport { step: 3, prefixes: vec![2, 0], mean_r: 0.5, std_r: 0.25, loss: 1.0, lr: 1e-4, retained: 6 };
        assert_eq!(r.csv_line(), "3,2;0,5e-1,2.5e-1,1e0,1e-4,6");
    }
}

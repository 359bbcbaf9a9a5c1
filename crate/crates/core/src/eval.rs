//! Closed-loop evaluation tables, paired sign tests and ELO aggregation.

use std::collections::{BTreeMap, BTreeSet};
use std::io::{Read, Write};

use rayon::prelude::*;

use crate::error::{domain_err, Result};
use crate::rewards::{MetricRow, MetricWeights, Scorer, METRIC_NAMES};
use crate::rng::{derive_rng, streams};
use crate::world::{Episode, VIEWS};
use crate::world_model::{episode_chunk, init_history, rollout, ChunkModel, ModelConfig};

pub const VIEW_NAMES: [&str; VIEWS] = ["wrist", "top", "side"];
/// View label of rows aggregated over views.
pub const ALL_VIEWS: &str = "all";
pub const COMBINED: &str = "combined";

pub fn rollout_id(index: usize) -> String {
    format!("ep{index:04}")
}

/// Evaluation settings shared by every episode.
#[derive(Debug, Clone)]
pub struct EvalSettings {
    pub n_chunks: usize,
    pub weights: MetricWeights,
    /// Also score object-only and robot-only pixels.
    pub masked: bool,
    pub seed: u64,
}

fn metric_rows(id: &str, step: usize, prefix: &str, score: &crate::rewards::ClipScore, out: &mut Vec<MetricRow>) {
    for (v, m) in score.per_view.iter().enumerate() {
        if let Some(m) = m {
            for (name, value) in METRIC_NAMES.iter().zip(m) {
                out.push(MetricRow { rollout_id: id.into(), step, view: VIEW_NAMES[v].into(), metric: format!("{prefix}{name}"), value: *value });
            }
        }
    }
    for (name, value) in METRIC_NAMES.iter().zip(&score.mean) {
        out.push(MetricRow { rollout_id: id.into(), step, view: ALL_VIEWS.into(), metric: format!("{prefix}{name}"), value: *value });
    }
    out.push(MetricRow { rollout_id: id.into(), step, view: ALL_VIEWS.into(), metric: format!("{prefix}{COMBINED}"), value: score.combined });
}

/// Rolls every episode closed-loop for `n_chunks` chunks from its first
/// frame and scores each chunk against ground truth. Steps are numbered
/// from 1. Episodes too short for the rollout are skipped with a warning.
pub fn rollout_eval<M: ChunkModel + ?Sized>(
    model: &M,
    config: &ModelConfig,
    episodes: &[Episode],
    scorer: &Scorer,
    settings: &EvalSettings,
) -> Result<Vec<MetricRow>> {
    settings.weights.validate()?;
    let l = config.chunk;
    let per_episode = episodes
        .par_iter()
        .enumerate()
        .map(|(i, ep)| -> Result<Vec<MetricRow>> {
            let id = rollout_id(i);
            if ep.len() < settings.n_chunks * l {
                log::warn!("skipping {id}: {} steps, rollout needs {}", ep.len(), settings.n_chunks * l);
                return Ok(Vec::new());
            }
            let mut rng = derive_rng(settings.seed, streams::EVAL, i as u64);
            let mut buffer = init_history(config, &ep.views[0], ep.states[0].ee_pose());
            let chunks = rollout(model, config, ep, &mut buffer, 0, settings.n_chunks, &mut rng)?;
            let mut rows = Vec::new();
            for (n, chunk) in chunks.iter().enumerate() {
                let gt = episode_chunk(config, ep, n * l)?;
                metric_rows(&id, n + 1, "", &scorer.clip_score(chunk, &gt, &settings.weights)?, &mut rows);
                if settings.masked {
                    let frames: Vec<usize> = (n * l + 1..=n * l + l).collect();
                    for (prefix, robot) in [("object_", false), ("robot_", true)] {
                        let masks: Vec<Vec<Vec<bool>>> = (0..VIEWS)
                            .map(|v| {
                                frames
                                    .iter()
                                    .map(|&t| if robot { ep.views[t].robot_mask(v, &config.world) } else { ep.views[t].object_mask(v, &config.world) })
                                    .collect()
                            })
                            .collect();
                        if let Some(s) = scorer.masked_clip_score(chunk, &gt, &masks, &settings.weights)? {
                            metric_rows(&id, n + 1, prefix, &s, &mut rows);
                        }
                    }
                }
            }
            Ok(rows)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_episode.into_iter().flatten().collect())
}

/// Mean of `metric` in `view` at each step, over rollouts, sorted by step.
pub fn step_curve(rows: &[MetricRow], view: &str, metric: &str) -> Vec<(usize, f64)> {
    let mut acc: BTreeMap<usize, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.view == view && r.metric == metric) {
        let e = acc.entry(r.step).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(s, (sum, n))| (s, sum / n as f64)).collect()
}

/// Per-rollout mean of the combined score over steps.
pub fn rollout_scores(rows: &[MetricRow]) -> BTreeMap<String, f64> {
    let mut acc: BTreeMap<String, (f64, usize)> = BTreeMap::new();
    for r in rows.iter().filter(|r| r.view == ALL_VIEWS && r.metric == COMBINED) {
        let e = acc.entry(r.rollout_id.clone()).or_insert((0.0, 0));
        e.0 += r.value;
        e.1 += 1;
    }
    acc.into_iter().map(|(k, (s, n))| (k, s / n as f64)).collect()
}

fn ln_factorial(n: u64) -> f64 {
    (2..=n).map(|i| (i as f64).ln()).sum()
}

/// `ln P(X = k)` for `X ~ Binomial(n, 1/2)`.
fn ln_binom_half(n: u64, k: u64) -> f64 {
    ln_factorial(n) - ln_factorial(k) - ln_factorial(n - k) - n as f64 * std::f64::consts::LN_2
}

/// `P(X ≥ k)` for `X ~ Binomial(n, 1/2)`, summed in log space.
pub fn binomial_upper_tail(n: u64, k: u64) -> f64 {
    if k == 0 {
        return 1.0;
    }
    if k > n {
        return 0.0;
    }
    let terms: Vec<f64> = (k..=n).map(|j| ln_binom_half(n, j)).collect();
    let m = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    (m + terms.iter().map(|t| (t - m).exp()).sum::<f64>().ln()).exp().min(1.0)
}

/// Exact two-sided sign test; no decisive pairs gives 1.
pub fn sign_test_two_sided(wins: u64, losses: u64) -> f64 {
    let n = wins + losses;
    if n == 0 {
        return 1.0;
    }
    (2.0 * binomial_upper_tail(n, wins.max(losses))).min(1.0)
}

/// One-sided sign test for "more wins than chance".
pub fn sign_test_one_sided(wins: u64, losses: u64) -> f64 {
    binomial_upper_tail(wins + losses, wins)
}

pub fn win_rate(wins: u64, losses: u64) -> f64 {
    if wins + losses == 0 {
        return 0.5;
    }
    wins as f64 / (wins + losses) as f64
}

#[derive(Debug, Clone, PartialEq)]
pub struct PairedResult {
    pub ids: Vec<String>,
    /// Per-rollout `a − b` of the mean combined score.
    pub deltas: Vec<f64>,
    pub wins: u64,
    pub losses: u64,
    pub ties: u64,
    pub p_two_sided: f64,
    pub p_one_sided: f64,
}

/// Compares two evaluation tables rollout by rollout. Exact ties are
/// excluded from the sign test.
pub fn paired_compare(a: &[MetricRow], b: &[MetricRow]) -> Result<PairedResult> {
    let (sa, sb) = (rollout_scores(a), rollout_scores(b));
    let ka: BTreeSet<&String> = sa.keys().collect();
    let kb: BTreeSet<&String> = sb.keys().collect();
    if ka != kb {
        let only: Vec<&&String> = ka.symmetric_difference(&kb).take(5).collect();
        return Err(domain_err!("rollout ids differ between the tables (e.g. {only:?})"));
    }
    if sa.is_empty() {
        return Err(domain_err!("no combined-score rows to compare"));
    }
    let ids: Vec<String> = sa.keys().cloned().collect();
    let deltas: Vec<f64> = ids.iter().map(|k| sa[k] - sb[k]).collect();
    let wins = deltas.iter().filter(|&&d| d > 0.0).count() as u64;
    let losses = deltas.iter().filter(|&&d| d < 0.0).count() as u64;
    let ties = deltas.len() as u64 - wins - losses;
    Ok(PairedResult { ids, deltas, wins, losses, ties, p_two_sided: sign_test_two_sided(wins, losses), p_one_sided: sign_test_one_sided(wins, losses) })
}

pub fn write_paired_csv<W: Write>(out: W, r: &PairedResult) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rollout_id", "delta"])?;
    for (id, d) in r.ids.iter().zip(&r.deltas) {
        w.write_record([id.as_str(), &d.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub const ELO_INITIAL: f64 = 800.0;
pub const ELO_K: f64 = 32.0;

#[derive(Debug, Clone, PartialEq)]
pub struct EloState {
    pub ratings: BTreeMap<String, f64>,
    pub k_factor: f64,
}

impl EloState {
    pub fn new<S: AsRef<str>>(ids: &[S], k_factor: f64) -> Result<Self> {
        if !(k_factor > 0.0 && k_factor.is_finite()) {
            return Err(domain_err!("ELO gain must be positive, got {k_factor}"));
        }
        Ok(EloState { ratings: ids.iter().map(|s| (s.as_ref().to_string(), ELO_INITIAL)).collect(), k_factor })
    }

    pub fn rating(&self, id: &str) -> Option<f64> {
        self.ratings.get(id).copied()
    }

    pub fn total(&self) -> f64 {
        self.ratings.values().sum()
    }
}

/// Expected score of a player rated `ri` against one rated `rj`.
pub fn elo_expected(ri: f64, rj: f64) -> f64 {
    1.0 / (1.0 + 10f64.powf((rj - ri) / 400.0))
}

pub fn elo_update(state: &mut EloState, winner: &str, loser: &str) -> Result<()> {
    if winner == loser {
        return Err(domain_err!("a model cannot play itself ({winner})"));
    }
    let rw = state.rating(winner).ok_or_else(|| domain_err!("unknown model {winner:?}"))?;
    let rl = state.rating(loser).ok_or_else(|| domain_err!("unknown model {loser:?}"))?;
    let gain = state.k_factor * (1.0 - elo_expected(rw, rl));
    // E_l = 1 − E_w, so the loser's change is exactly −gain.
    state.ratings.insert(winner.to_string(), rw + gain);
    state.ratings.insert(loser.to_string(), rl - gain);
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vote {
    pub model_a: String,
    pub model_b: String,
    pub winner: String,
}

/// Sequential updates from all models at the initial rating.
pub fn elo_tournament(votes: &[Vote], k_factor: f64) -> Result<EloState> {
    let mut ids: BTreeSet<&str> = BTreeSet::new();
    for v in votes {
        ids.insert(&v.model_a);
        ids.insert(&v.model_b);
    }
    let ids: Vec<&str> = ids.into_iter().collect();
    let mut state = EloState::new(&ids, k_factor)?;
    for (i, v) in votes.iter().enumerate() {
        let loser = if v.winner == v.model_a {
            &v.model_b
        } else if v.winner == v.model_b {
            &v.model_a
        } else {
            return Err(domain_err!("vote {i}: winner {:?} is neither {:?} nor {:?}", v.winner, v.model_a, v.model_b));
        };
        elo_update(&mut state, &v.winner, loser)?;
    }
    Ok(state)
}

pub fn read_votes_csv<R: Read>(input: R) -> Result<Vec<Vote>> {
    let mut r = csv::Reader::from_reader(input);
    let mut out = Vec::new();
    for (i, rec) in r.records().enumerate() {
        let rec = rec?;
        if rec.len() != 3 {
            return Err(domain_err!("vote {i} has {} fields, expected model_a,model_b,winner", rec.len()));
        }
        out.push(Vote { model_a: rec[0].trim().into(), model_b: rec[1].trim().into(), winner: rec[2].trim().into() });
    }
    Ok(out)
}

pub fn write_votes_csv<W: Write>(out: W, votes: &[Vote]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model_a", "model_b", "winner"])?;
    for v in votes {
        w.write_record([&v.model_a, &v.model_b, &v.winner])?;
    }
    w.flush()?;
    Ok(())
}

pub fn write_ratings_csv<W: Write>(out: W, state: &EloState) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["model", "rating"])?;
    for (id, r) in &state.ratings {
        w.write_record([id.as_str(), &r.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

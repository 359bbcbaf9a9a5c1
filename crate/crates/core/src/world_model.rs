//! Autoregressive chunk model: history buffer, conditioning encoder, chunk
//! generation and the teacher-forced denoising loss.
//!
//! The buffer stores pixels directly. Slot `j` holds a whole chunk (`L`
//! frames of every view) together with the end-effector pose at its last
//! frame. The conditioning seen by the denoiser consists of
//! - the last frame of every slot,
//! - the newest frame resampled into the camera of each future frame (only
//!   the wrist camera moves, so the external views are plain copies),
//! - Gaussian blobs at the current and the `L` commanded end-effector
//!   positions, drawn in the current camera,
//! - two coordinate planes,
//!
//! plus a per-view vector of the buffered poses, the actions and a view one-hot.

use std::collections::VecDeque;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::denoiser::{Conditioning, DenoiserLayout, DenoiserParams, Gradients, PreparedDenoiser};
use crate::diffusion::{euler_sample, SamplerConfig};
use crate::error::{config_err, domain_err, shape_err, Result};
use crate::rng::Rng;
use crate::tensor::{Clip, ClipShape, NoisyClip};
use crate::world::{clamp_target, Action, Camera, EePose, Episode, ViewSet, WorldConfig, VIEWS};

#[derive(Debug, Clone, PartialEq)]
pub struct ModelConfig {
    /// History length `H` in chunks.
    pub history: usize,
    /// Frames per chunk `L`.
    pub chunk: usize,
    pub hidden: usize,
    pub world: WorldConfig,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig { history: 4, chunk: 3, hidden: 16, world: WorldConfig::default() }
    }
}

const POSE_FEATURES: usize = 5;
const ACTION_FEATURES: usize = 4;

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.history < 1 || self.chunk < 1 {
            return Err(config_err!("history and chunk length must be ≥ 1 (got H={}, L={})", self.history, self.chunk));
        }
        if self.hidden < 1 {
            return Err(config_err!("hidden width must be ≥ 1"));
        }
        self.world.validate()
    }

    pub fn chunk_shape(&self) -> ClipShape {
        ClipShape::new(VIEWS, self.chunk, self.world.channels, self.world.height, self.world.width)
    }

    pub fn context_channels(&self) -> usize {
        let c = self.world.channels;
        self.history * c + self.chunk * c + self.chunk + 3
    }

    pub fn cond_dim(&self) -> usize {
        POSE_FEATURES * self.history + ACTION_FEATURES * self.chunk + VIEWS
    }

    pub fn layout(&self) -> DenoiserLayout {
        DenoiserLayout {
            noisy_channels: self.chunk * self.world.channels,
            context_channels: self.context_channels(),
            cond_dim: self.cond_dim(),
            hidden: self.hidden,
        }
    }

    /// Checks that a parameter set was built for this configuration.
    pub fn check_params(&self, params: &DenoiserParams) -> Result<()> {
        let got = params.layout()?;
        if got != self.layout() {
            return Err(config_err!("checkpoint layout {:?} does not match model configuration {:?}", got, self.layout()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Slot {
    pub chunk: Clip,
    pub pose: EePose,
}

/// The last `H` chunks, oldest first.
#[derive(Debug, Clone, PartialEq)]
pub struct HistoryBuffer {
    pub slots: VecDeque<Slot>,
}

impl HistoryBuffer {
    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    pub fn newest(&self) -> &Slot {
        self.slots.back().expect("history buffer is never empty")
    }

    /// Stable fingerprint of the buffer contents.
    pub fn fingerprint(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        let mut eat = |bits: u64| {
            h ^= bits;
            h = h.wrapping_mul(0x0000_0100_0000_01b3);
        };
        for s in &self.slots {
            s.chunk.data().iter().for_each(|v| eat(v.to_bits()));
            [s.pose.x, s.pose.y, s.pose.theta].iter().for_each(|v| eat(v.to_bits()));
            eat(s.pose.closed as u64);
        }
        h
    }
}

/// Clip holding frame `t` of an episode, replicated `frames` times.
pub fn replicated_clip(config: &ModelConfig, views: &ViewSet, frames: usize) -> Clip {
    let w = &config.world;
    let shape = ClipShape::new(VIEWS, frames, w.channels, w.height, w.width);
    let mut clip = Clip::zeros(shape);
    for v in 0..VIEWS {
        let src = views.frame(v, w);
        for f in 0..frames {
            clip.frame_mut(v, f).iter_mut().zip(src).for_each(|(d, &s)| *d = s as f64);
        }
    }
    clip
}

/// Ground-truth frames `start+1 ..= start+L` of an episode as a chunk.
pub fn episode_chunk(config: &ModelConfig, episode: &Episode, start: usize) -> Result<Clip> {
    let l = config.chunk;
    if start + l >= episode.views.len() {
        return Err(domain_err!("episode has {} frames, chunk after frame {start} needs {}", episode.views.len(), start + l + 1));
    }
    let w = &config.world;
    let mut clip = Clip::zeros(config.chunk_shape());
    for f in 0..l {
        let vs = &episode.views[start + 1 + f];
        for v in 0..VIEWS {
            clip.frame_mut(v, f).iter_mut().zip(vs.frame(v, w)).for_each(|(d, &s)| *d = s as f64);
        }
    }
    Ok(clip)
}

/// Buffer with every slot holding `obs` (replicated over the chunk) and `pose`.
pub fn init_history(config: &ModelConfig, obs: &ViewSet, pose: EePose) -> HistoryBuffer {
    let chunk = replicated_clip(config, obs, config.chunk);
    HistoryBuffer { slots: (0..config.history).map(|_| Slot { chunk: chunk.clone(), pose }).collect() }
}

/// Appends a chunk, evicting the oldest slot.
pub fn push_chunk(config: &ModelConfig, buffer: &mut HistoryBuffer, chunk: Clip, pose: EePose) -> Result<()> {
    if chunk.shape() != config.chunk_shape() {
        return Err(shape_err!("chunk {:?} does not match configured {:?}", chunk.shape(), config.chunk_shape()));
    }
    buffer.slots.pop_front();
    buffer.slots.push_back(Slot { chunk, pose });
    Ok(())
}

/// End-effector positions after each of the given actions, starting at `pose`.
fn commanded_positions(config: &ModelConfig, pose: EePose, actions: &[Action]) -> Vec<(f64, f64)> {
    let t = config.world.max_translation;
    let mut p = (pose.x, pose.y);
    actions
        .iter()
        .map(|a| {
            p = clamp_target((p.0 + a.dx().clamp(-t, t), p.1 + a.dy().clamp(-t, t)));
            p
        })
        .collect()
}

fn bilinear(frame: &[f64], h: usize, w: usize, x: f64, y: f64) -> f64 {
    let x = (x - 0.5).clamp(0.0, (w - 1) as f64);
    let y = (y - 0.5).clamp(0.0, (h - 1) as f64);
    let (x0, y0) = (x.floor() as usize, y.floor() as usize);
    let (x1, y1) = ((x0 + 1).min(w - 1), (y0 + 1).min(h - 1));
    let (fx, fy) = (x - x0 as f64, y - y0 as f64);
    let at = |yy: usize, xx: usize| frame[yy * w + xx];
    (1.0 - fy) * ((1.0 - fx) * at(y0, x0) + fx * at(y0, x1)) + fy * ((1.0 - fx) * at(y1, x0) + fx * at(y1, x1))
}

/// Encodes a full buffer and the next `L` actions for the denoiser.
pub fn build_conditioning(config: &ModelConfig, buffer: &HistoryBuffer, actions: &[Action]) -> Result<Conditioning> {
    let (h, w, c, l) = (config.world.height, config.world.width, config.world.channels, config.chunk);
    if buffer.len() != config.history {
        return Err(shape_err!("history buffer holds {} slots, expected {}", buffer.len(), config.history));
    }
    if actions.len() != l {
        return Err(shape_err!("got {} actions for a chunk of {l} frames", actions.len()));
    }
    let ctx = config.context_channels();
    let hw = h * w;
    let pose = buffer.newest().pose;
    let future = commanded_positions(config, pose, actions);
    let mut planes = vec![0.0; VIEWS * hw * ctx];
    let newest = &buffer.newest().chunk;

    for v in 0..VIEWS {
        let cam = Camera::for_view(v, (pose.x, pose.y));
        let base = v * hw * ctx;
        let mut put = |px: usize, ch: usize, val: f64| planes[base + px * ctx + ch] = val;

        for (j, slot) in buffer.slots.iter().enumerate() {
            let frame = slot.chunk.frame(v, l - 1);
            for ch in 0..c {
                for px in 0..hw {
                    put(px, j * c + ch, 2.0 * frame[ch * hw + px] - 1.0);
                }
            }
        }

        let last = newest.frame(v, l - 1);
        let off = config.history * c;
        for (k, &p) in future.iter().enumerate() {
            let future_cam = Camera::for_view(v, p);
            for y in 0..h {
                for x in 0..w {
                    let px = y * w + x;
                    let (sx, sy) = if future_cam == cam {
                        (x as f64 + 0.5, y as f64 + 0.5)
                    } else {
                        cam.to_pixel(future_cam.to_scene(x as f64 + 0.5, y as f64 + 0.5, h, w), h, w)
                    };
                    for ch in 0..c {
                        let val = bilinear(&last[ch * hw..(ch + 1) * hw], h, w, sx, sy);
                        put(px, off + k * c + ch, 2.0 * val - 1.0);
                    }
                }
            }
        }

        let off = off + l * c;
        let spread = (0.035 * cam.zoom * w as f64).max(0.6);
        let points: Vec<(f64, f64)> = future.iter().copied().chain(std::iter::once((pose.x, pose.y))).collect();
        for (k, &p) in points.iter().enumerate() {
            let (cx, cy) = cam.to_pixel(p, h, w);
            for y in 0..h {
                for x in 0..w {
                    let d2 = (x as f64 + 0.5 - cx).powi(2) + (y as f64 + 0.5 - cy).powi(2);
                    put(y * w + x, off + k, (-d2 / (2.0 * spread * spread)).exp());
                }
            }
        }

        let off = off + l + 1;
        for y in 0..h {
            for x in 0..w {
                put(y * w + x, off, 2.0 * (x as f64 + 0.5) / w as f64 - 1.0);
                put(y * w + x, off + 1, 2.0 * (y as f64 + 0.5) / h as f64 - 1.0);
            }
        }
    }

    let d = config.cond_dim();
    let mut vector = vec![0.0; VIEWS * d];
    let (mt, mr) = (config.world.max_translation, config.world.max_rotation.max(1e-9));
    for v in 0..VIEWS {
        let row = &mut vector[v * d..(v + 1) * d];
        let mut i = 0;
        for slot in &buffer.slots {
            let p = slot.pose;
            let (s, co) = p.theta.sin_cos();
            row[i..i + POSE_FEATURES].copy_from_slice(&[2.0 * p.x - 1.0, 2.0 * p.y - 1.0, s, co, p.closed as u8 as f64]);
            i += POSE_FEATURES;
        }
        for a in actions {
            row[i..i + ACTION_FEATURES].copy_from_slice(&[a.dx() / mt, a.dy() / mt, a.dtheta() / mr, a.grip()]);
            i += ACTION_FEATURES;
        }
        row[i + v] = 1.0;
    }

    Ok(Conditioning { views: VIEWS, height: h, width: w, context_channels: ctx, planes, cond_dim: d, vector })
}

/// Anything that can propose the next chunk from a buffer and actions.
///
/// `start` is the index of the frame the chunk continues from, which lets
/// test models look up ground truth.
pub trait ChunkModel: Sync {
    fn generate(&self, buffer: &HistoryBuffer, actions: &[Action], start: usize, rng: &mut Rng) -> Result<Clip>;
}

/// The learned model: Euler sampling of the denoiser, clamped to [0, 1].
pub struct DiffusionModel<'a> {
    pub params: &'a DenoiserParams,
    pub config: &'a ModelConfig,
    pub sampler: SamplerConfig,
}

impl ChunkModel for DiffusionModel<'_> {
    fn generate(&self, buffer: &HistoryBuffer, actions: &[Action], _start: usize, rng: &mut Rng) -> Result<Clip> {
        generate_chunk(self.params, self.config, buffer, actions, &self.sampler, rng)
    }
}

pub fn generate_chunk(
    params: &DenoiserParams,
    config: &ModelConfig,
    buffer: &HistoryBuffer,
    actions: &[Action],
    sampler: &SamplerConfig,
    rng: &mut Rng,
) -> Result<Clip> {
    let cond = build_conditioning(config, buffer, actions)?;
    let mut clip = euler_sample(params, &cond, config.chunk_shape(), sampler, rng)?;
    clip.clamp_unit();
    Ok(clip)
}

/// Rolls `n_chunks` chunks closed-loop from frame `start`, feeding each
/// generated chunk back into `buffer`. Consumes `n_chunks·L` episode actions.
pub fn rollout<M: ChunkModel + ?Sized>(
    model: &M,
    config: &ModelConfig,
    episode: &Episode,
    buffer: &mut HistoryBuffer,
    start: usize,
    n_chunks: usize,
    rng: &mut Rng,
) -> Result<Vec<Clip>> {
    let l = config.chunk;
    if start + n_chunks * l > episode.len() {
        return Err(domain_err!("episode of {} steps is too short for {n_chunks} chunks from frame {start}", episode.len()));
    }
    let mut out = Vec::with_capacity(n_chunks);
    for n in 0..n_chunks {
        let f = start + n * l;
        let chunk = model.generate(buffer, &episode.actions[f..f + l], f, rng)?;
        push_chunk(config, buffer, chunk.clone(), episode.states[f + l].ee_pose())?;
        out.push(chunk);
    }
    Ok(out)
}

/// A teacher-forced training example: ground-truth history, the next actions
/// and the chunk that followed.
#[derive(Debug, Clone)]
pub struct Window {
    pub buffer: HistoryBuffer,
    pub actions: Vec<Action>,
    pub target: Clip,
}

/// Builds the ground-truth window whose target chunk follows frame `start`.
/// Slots before the episode start are backfilled with the first frame, as
/// after [`init_history`].
pub fn episode_window(config: &ModelConfig, episode: &Episode, start: usize) -> Result<Window> {
    let (l, hist) = (config.chunk, config.history);
    let target = episode_chunk(config, episode, start)?;
    let mut slots = VecDeque::with_capacity(hist);
    for j in (0..hist).rev() {
        let end = start as isize - (j * l) as isize;
        let chunk = if end <= 0 {
            replicated_clip(config, &episode.views[0], l)
        } else {
            let end = end as usize;
            let mut clip = Clip::zeros(config.chunk_shape());
            for f in 0..l {
                let t = (end + 1 + f).saturating_sub(l);
                let vs = &episode.views[t];
                for v in 0..VIEWS {
                    clip.frame_mut(v, f).iter_mut().zip(vs.frame(v, &config.world)).for_each(|(d, &s)| *d = s as f64);
                }
            }
            clip
        };
        let pose = episode.states[end.max(0) as usize].ee_pose();
        slots.push_back(Slot { chunk, pose });
    }
    Ok(Window { buffer: HistoryBuffer { slots }, actions: episode.actions[start..start + l].to_vec(), target })
}

/// Mean squared error between the denoised estimate and the target chunk at
/// noise level `sigma`, with its parameter gradient.
pub fn teacher_forced_loss(
    params: &DenoiserParams,
    config: &ModelConfig,
    window: &Window,
    sigma: f64,
    rng: &mut Rng,
) -> Result<(f64, Gradients)> {
    let cond = build_conditioning(config, &window.buffer, &window.actions)?;
    let mut noisy = window.target.clone();
    for v in noisy.data_mut() {
        *v += sigma * rng.sample::<f64, _>(StandardNormal);
    }
    let x = NoisyClip { clip: noisy, sigma };
    let prepared = PreparedDenoiser::new(params, &cond)?;
    let d = prepared.denoise(&x)?;
    let n = d.shape().len() as f64;
    let loss = d.mse(&window.target);
    let upstream = d.lincomb(2.0 / n, &window.target, -2.0 / n);
    let grads = prepared.gradients(&x, &upstream)?;
    Ok((loss, grads))
}

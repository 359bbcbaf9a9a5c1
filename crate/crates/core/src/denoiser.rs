//! The x0-prediction denoiser: a small convolutional network `m_θ` wrapped in
//! the affine preconditioning `D = c_out(σ)·m_θ + c_skip(σ)·x_σ`.
//!
//! Views share weights and are processed as a batch. Per pixel the network
//! sees the scaled noisy chunk plus context planes (history frames, action
//! and pose blobs, coordinates); a dense projection of the conditioning
//! vector and the noise level is added to the first layer's pre-activation.
//! The head also reads a 1×1 linear skip from the network input, and its
//! output is multiplied by a learned per-channel gain that is
//! log-linear in `ln σ` and `ln(σ² + 1)`.
//! The context half of the first layer is independent of the noisy input, so
//! [`PreparedDenoiser`] computes it once per conditioning and reuses it across
//! sampler steps.

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::diffusion::{input_scale, precondition_coeffs};
use crate::error::{shape_err, Error, Result};
use crate::ops::{accumulate_col_sums, add_row_bias, col2im3, gemm, im2col3, silu, silu_grad, Grid};
use crate::rng::Rng;
use crate::tensor::{Clip, NoisyClip};

pub const IN_NOISY_W: usize = 0;
pub const IN_CTX_W: usize = 1;
pub const IN_B: usize = 2;
pub const COND_W: usize = 3;
pub const COND_B: usize = 4;
pub const MID_W: usize = 5;
pub const MID_B: usize = 6;
pub const OUT_W: usize = 7;
pub const OUT_B: usize = 8;
pub const SKIP_W: usize = 9;
pub const OUT_GAIN: usize = 10;
pub const NUM_ARRAYS: usize = 11;

const ARRAY_NAMES: [&str; NUM_ARRAYS] =
    ["in_noisy.w", "in_ctx.w", "in.b", "cond.w", "cond.b", "mid.w", "mid.b", "out.w", "out.b", "skip.w", "out.gain"];

/// Channel counts that fix every parameter shape.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DenoiserLayout {
    /// Frames × channels of the noisy chunk (also the output width).
    pub noisy_channels: usize,
    pub context_channels: usize,
    /// Length of the per-view conditioning vector, excluding the noise-level feature.
    pub cond_dim: usize,
    pub hidden: usize,
}

impl DenoiserLayout {
    fn shapes(&self) -> [Vec<usize>; NUM_ARRAYS] {
        let (n, c, d, h) = (self.noisy_channels, self.context_channels, self.cond_dim, self.hidden);
        [
            vec![3, 3, n, h],
            vec![3, 3, c, h],
            vec![h],
            vec![d + 1, h],
            vec![h],
            vec![3, 3, h, h],
            vec![h],
            vec![h, n],
            vec![n],
            vec![n + c, n],
            vec![GAIN_FEATURES, n],
        ]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamArray {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub frozen: bool,
}

/// Trainable weights of the denoiser plus the per-array freeze mask.
///
/// Values are kept on the f32 grid (see [`DenoiserParams::round_to_f32`]) so a
/// checkpoint stores them without loss.
#[derive(Debug, Clone, PartialEq)]
pub struct DenoiserParams {
    pub arrays: Vec<ParamArray>,
    /// Number of optimizer updates applied since initialization.
    pub version: u64,
}

impl DenoiserParams {
    /// Fan-in scaled Gaussian initialization with a zero output head, so a
    /// fresh model starts at `m_θ ≡ 0`.
    pub fn init(layout: DenoiserLayout, rng: &mut Rng) -> Self {
        let arrays = layout
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let len: usize = shape.iter().product();
                let data = match i {
                    IN_NOISY_W | IN_CTX_W | MID_W | COND_W => {
                        let fan_in = match i {
                            IN_NOISY_W | IN_CTX_W => 9 * (layout.noisy_channels + layout.context_channels),
                            MID_W => 9 * layout.hidden,
                            _ => layout.cond_dim + 1,
                        };
                        let std = (1.0 / fan_in as f64).sqrt();
                        (0..len).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect()
                    }
                    OUT_GAIN => initial_gain(layout.noisy_channels),
                    _ => vec![0.0; len],
                };
                ParamArray { name: ARRAY_NAMES[i].to_string(), shape, data, frozen: false }
            })
            .collect();
        let mut params = DenoiserParams { arrays, version: 0 };
        params.round_to_f32();
        params
    }

    /// Every array drawn at random with standard deviation `scale`, including
    /// the head. Used by gradient checks, where a zero head hides most paths.
    pub fn random(layout: DenoiserLayout, scale: f64, rng: &mut Rng) -> Self {
        let arrays = layout
            .shapes()
            .into_iter()
            .enumerate()
            .map(|(i, shape)| {
                let len: usize = shape.iter().product();
                let data = (0..len).map(|_| scale * rng.sample::<f64, _>(StandardNormal)).collect();
                ParamArray { name: ARRAY_NAMES[i].to_string(), shape, data, frozen: false }
            })
            .collect();
        DenoiserParams { arrays, version: 0 }
    }

    pub fn from_arrays(arrays: Vec<ParamArray>) -> Result<Self> {
        let params = DenoiserParams { arrays, version: 0 };
        params.layout()?;
        Ok(params)
    }

    /// Recovers the layout from array shapes, validating that they agree.
    pub fn layout(&self) -> Result<DenoiserLayout> {
        if self.arrays.len() != NUM_ARRAYS {
            return Err(shape_err!("denoiser needs {NUM_ARRAYS} arrays, got {}", self.arrays.len()));
        }
        let w = &self.arrays[IN_NOISY_W].shape;
        let c = &self.arrays[IN_CTX_W].shape;
        let d = &self.arrays[COND_W].shape;
        if w.len() != 4 || c.len() != 4 || d.len() != 2 {
            return Err(shape_err!("denoiser weight ranks are wrong"));
        }
        let layout = DenoiserLayout { noisy_channels: w[2], context_channels: c[2], cond_dim: d[0].saturating_sub(1), hidden: w[3] };
        for (i, want) in layout.shapes().iter().enumerate() {
            let a = &self.arrays[i];
            if &a.shape != want || a.data.len() != want.iter().product::<usize>() || a.name != ARRAY_NAMES[i] {
                return Err(shape_err!("array {} ({}) has shape {:?}, expected {:?}", i, a.name, a.shape, want));
            }
        }
        Ok(layout)
    }

    pub fn num_params(&self) -> usize {
        self.arrays.iter().map(|a| a.data.len()).sum()
    }

    pub fn freeze_mask(&self) -> Vec<bool> {
        self.arrays.iter().map(|a| a.frozen).collect()
    }

    pub fn set_freeze_mask(&mut self, mask: &[bool]) -> Result<()> {
        if mask.len() != self.arrays.len() {
            return Err(shape_err!("freeze mask has {} entries for {} arrays", mask.len(), self.arrays.len()));
        }
        for (a, &f) in self.arrays.iter_mut().zip(mask) {
            a.frozen = f;
        }
        Ok(())
    }

    /// Freeze policy for post-training: only the conditioning projection and
    /// the last two layers move.
    pub fn posttrain_freeze_mask() -> Vec<bool> {
        (0..NUM_ARRAYS).map(|i| matches!(i, IN_NOISY_W | IN_CTX_W | IN_B)).collect()
    }

    pub fn round_to_f32(&mut self) {
        for a in &mut self.arrays {
            for v in &mut a.data {
                *v = *v as f32 as f64;
            }
        }
    }

    pub fn zero_head(&mut self) {
        for i in [OUT_W, OUT_B, SKIP_W] {
            self.arrays[i].data.iter_mut().for_each(|v| *v = 0.0);
        }
    }
}

/// Per-array gradients, aligned with [`DenoiserParams::arrays`].
#[derive(Debug, Clone, PartialEq)]
pub struct Gradients {
    pub arrays: Vec<Vec<f64>>,
}

impl Gradients {
    pub fn zeros_like(params: &DenoiserParams) -> Self {
        Gradients { arrays: params.arrays.iter().map(|a| vec![0.0; a.data.len()]).collect() }
    }

    pub fn add_assign(&mut self, other: &Gradients) {
        for (a, b) in self.arrays.iter_mut().zip(&other.arrays) {
            a.iter_mut().zip(b).for_each(|(x, y)| *x += y);
        }
    }

    pub fn scale(&mut self, s: f64) {
        self.arrays.iter_mut().flatten().for_each(|v| *v *= s);
    }

    pub fn max_abs(&self) -> f64 {
        self.arrays.iter().flatten().fold(0.0, |m, v| m.max(v.abs()))
    }

    /// Value at a flat index running over all arrays in order.
    pub fn flat(&self, mut idx: usize) -> f64 {
        for a in &self.arrays {
            if idx < a.len() {
                return a[idx];
            }
            idx -= a.len();
        }
        panic!("gradient index out of range");
    }
}

/// Network-ready conditioning: per-view context planes and vectors.
#[derive(Debug, Clone, PartialEq)]
pub struct Conditioning {
    pub views: usize,
    pub height: usize,
    pub width: usize,
    pub context_channels: usize,
    /// Pixel-major planes, `[views][height][width][context_channels]`.
    pub planes: Vec<f64>,
    pub cond_dim: usize,
    /// `[views][cond_dim]`.
    pub vector: Vec<f64>,
}

impl Conditioning {
    fn grid(&self) -> Grid {
        Grid { batch: self.views, height: self.height, width: self.width }
    }
}

fn noise_feature(sigma: f64) -> f64 {
    sigma.ln() / 4.0
}

const GAIN_FEATURES: usize = 3;

/// Features of the head's log-gain: `ln σ`, `½ ln(σ² + 1)`, 1.
fn gain_features(sigma: f64) -> [f64; GAIN_FEATURES] {
    [sigma.ln(), 0.5 * sigma.mul_add(sigma, 1.0).ln(), 1.0]
}

/// Gain rows starting at `√(σ² + 1)/σ = 1/|c_out|`, which lets the head work
/// in clean-clip units at every noise level.
fn initial_gain(n: usize) -> Vec<f64> {
    [-1.0, 1.0, 0.0].iter().flat_map(|&v| std::iter::repeat_n(v, n)).collect()
}

/// Per-output-channel head gain `exp(Σ_j φ_j(σ)·G[j])`.
fn head_gain(g: &[f64], n: usize, sigma: f64) -> Vec<f64> {
    let phi = gain_features(sigma);
    (0..n).map(|k| phi.iter().enumerate().map(|(j, f)| f * g[j * n + k]).sum::<f64>().exp()).collect()
}

struct Cache {
    cols_x: Vec<f64>,
    pre1: Vec<f64>,
    cols_h1: Vec<f64>,
    x_in: Vec<f64>,
    pre2: Vec<f64>,
    h2: Vec<f64>,
    out: Vec<f64>,
    gain: Vec<f64>,
}

fn check_finite(values: &[f64], layer: usize) -> Result<()> {
    if values.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::Numeric(format!("denoiser layer {layer} ({})", ARRAY_NAMES[layer.min(NUM_ARRAYS - 1)])))
    }
}

/// Denoiser bound to one conditioning, with the input-independent part of
/// the first layer precomputed.
pub struct PreparedDenoiser<'a> {
    params: &'a DenoiserParams,
    cond: &'a Conditioning,
    layout: DenoiserLayout,
    /// `[pixels][hidden]`: context convolution + bias + static conditioning projection.
    ctx_pre: Vec<f64>,
    /// `[pixels][noisy_channels]`: context half of the linear skip into the head.
    ctx_skip: Vec<f64>,
}

impl<'a> PreparedDenoiser<'a> {
    pub fn new(params: &'a DenoiserParams, cond: &'a Conditioning) -> Result<Self> {
        let layout = params.layout()?;
        let grid = cond.grid();
        if cond.context_channels != layout.context_channels || cond.cond_dim != layout.cond_dim {
            return Err(shape_err!(
                "conditioning has {} context channels / {} vector dims, model expects {} / {}",
                cond.context_channels,
                cond.cond_dim,
                layout.context_channels,
                layout.cond_dim
            ));
        }
        if cond.planes.len() != grid.pixels() * cond.context_channels || cond.vector.len() != cond.views * cond.cond_dim {
            return Err(shape_err!("conditioning buffers do not match their declared sizes"));
        }
        let h = layout.hidden;
        let px = grid.pixels();
        let mut cols = Vec::new();
        im2col3(&cond.planes, grid, layout.context_channels, &mut cols);
        let mut ctx_pre = vec![0.0; px * h];
        gemm(px, 9 * layout.context_channels, h, &cols, false, &params.arrays[IN_CTX_W].data, false, 0.0, &mut ctx_pre);
        add_row_bias(&mut ctx_pre, &params.arrays[IN_B].data);

        let wc = &params.arrays[COND_W].data;
        let bc = &params.arrays[COND_B].data;
        let per_view = grid.height * grid.width;
        for v in 0..cond.views {
            let vec_v = &cond.vector[v * layout.cond_dim..(v + 1) * layout.cond_dim];
            let mut proj = bc.clone();
            gemm(1, layout.cond_dim, h, vec_v, false, &wc[..layout.cond_dim * h], false, 1.0, &mut proj);
            add_row_bias(&mut ctx_pre[v * per_view * h..(v + 1) * per_view * h], &proj);
        }
        let n = layout.noisy_channels;
        let mut ctx_skip = vec![0.0; px * n];
        let skip = &params.arrays[SKIP_W].data;
        gemm(px, layout.context_channels, n, &cond.planes, false, &skip[n * n..], false, 0.0, &mut ctx_skip);
        Ok(PreparedDenoiser { params, cond, layout, ctx_pre, ctx_skip })
    }

    fn check_input(&self, x: &NoisyClip) -> Result<()> {
        let s = x.clip.shape();
        if s.views != self.cond.views || s.height != self.cond.height || s.width != self.cond.width {
            return Err(shape_err!("noisy clip {:?} does not match conditioning grid", s));
        }
        if s.frames * s.channels != self.layout.noisy_channels {
            return Err(shape_err!(
                "noisy clip carries {} frame-channels, model expects {}",
                s.frames * s.channels,
                self.layout.noisy_channels
            ));
        }
        Ok(())
    }

    /// Runs `m_θ`; returns its output pixel-major, `[pixels][frames·channels]`.
    fn run(&self, x: &NoisyClip, keep: bool) -> Result<(Vec<f64>, Option<Cache>)> {
        self.check_input(x)?;
        let sigma = x.sigma;
        let scale = input_scale(sigma)?;
        let grid = self.cond.grid();
        let px = grid.pixels();
        let (n, h) = (self.layout.noisy_channels, self.layout.hidden);
        let arrays = &self.params.arrays;

        let x_in = to_pixel_major(&x.clip, scale);
        let mut cols_x = Vec::new();
        im2col3(&x_in, grid, n, &mut cols_x);
        let mut pre1 = self.ctx_pre.clone();
        gemm(px, 9 * n, h, &cols_x, false, &arrays[IN_NOISY_W].data, false, 1.0, &mut pre1);
        let sig_row = &arrays[COND_W].data[self.layout.cond_dim * h..];
        let feat = noise_feature(sigma);
        let sig_bias: Vec<f64> = sig_row.iter().map(|w| w * feat).collect();
        add_row_bias(&mut pre1, &sig_bias);
        check_finite(&pre1, IN_NOISY_W)?;

        let h1: Vec<f64> = pre1.iter().map(|&v| silu(v)).collect();
        let mut cols_h1 = Vec::new();
        im2col3(&h1, grid, h, &mut cols_h1);
        let mut pre2 = vec![0.0; px * h];
        gemm(px, 9 * h, h, &cols_h1, false, &arrays[MID_W].data, false, 0.0, &mut pre2);
        add_row_bias(&mut pre2, &arrays[MID_B].data);
        check_finite(&pre2, MID_W)?;

        let h2: Vec<f64> = pre2.iter().map(|&v| silu(v)).collect();
        let mut out = self.ctx_skip.clone();
        gemm(px, n, n, &x_in, false, &arrays[SKIP_W].data[..n * n], false, 1.0, &mut out);
        gemm(px, h, n, &h2, false, &arrays[OUT_W].data, false, 1.0, &mut out);
        add_row_bias(&mut out, &arrays[OUT_B].data);
        let gain = head_gain(&arrays[OUT_GAIN].data, n, sigma);
        for row in out.chunks_exact_mut(n) {
            row.iter_mut().zip(&gain).for_each(|(o, g)| *o *= g);
        }
        check_finite(&out, OUT_W)?;

        let cache = keep.then(|| Cache { cols_x, pre1, cols_h1, x_in, pre2, h2, out: out.clone(), gain });
        Ok((out, cache))
    }

    /// Raw network output `m_θ(x_σ, σ, c)` in clip layout.
    pub fn network_output(&self, x: &NoisyClip) -> Result<Clip> {
        let (out, _) = self.run(x, false)?;
        Ok(from_pixel_major(&out, &x.clip))
    }

    /// Clean-clip estimate `c_out·m_θ + c_skip·x_σ`.
    pub fn denoise(&self, x: &NoisyClip) -> Result<Clip> {
        let (c_skip, c_out) = precondition_coeffs(x.sigma)?;
        let (out, _) = self.run(x, false)?;
        let m = from_pixel_major(&out, &x.clip);
        Ok(m.lincomb(c_out, &x.clip, c_skip))
    }

    /// Pulls a cotangent on the clean-clip estimate back to every non-frozen
    /// parameter array. Frozen arrays get exact zeros.
    pub fn gradients(&self, x: &NoisyClip, upstream: &Clip) -> Result<Gradients> {
        upstream.check_same_shape(&x.clip)?;
        let (_, c_out) = precondition_coeffs(x.sigma)?;
        let (_, cache) = self.run(x, true)?;
        let cache = cache.expect("cache requested");
        let grid = self.cond.grid();
        let px = grid.pixels();
        let (n, h, d) = (self.layout.noisy_channels, self.layout.hidden, self.layout.cond_dim);
        let arrays = &self.params.arrays;
        let frozen: Vec<bool> = self.params.freeze_mask();
        let mut grads = Gradients::zeros_like(self.params);

        let d_m = to_pixel_major(upstream, c_out);
        if !frozen[OUT_GAIN] {
            let phi = gain_features(x.sigma);
            let mut s = vec![0.0; n];
            for (dm, m) in d_m.chunks_exact(n).zip(cache.out.chunks_exact(n)) {
                s.iter_mut().zip(dm.iter().zip(m)).for_each(|(a, (g, v))| *a += g * v);
            }
            for (j, f) in phi.iter().enumerate() {
                grads.arrays[OUT_GAIN][j * n..(j + 1) * n].iter_mut().zip(&s).for_each(|(g, sv)| *g = f * sv);
            }
        }
        let mut d_out = d_m;
        for row in d_out.chunks_exact_mut(n) {
            row.iter_mut().zip(&cache.gain).for_each(|(o, g)| *o *= g);
        }
        if !frozen[OUT_W] {
            gemm(h, px, n, &cache.h2, true, &d_out, false, 0.0, &mut grads.arrays[OUT_W]);
        }
        if !frozen[OUT_B] {
            accumulate_col_sums(&d_out, &mut grads.arrays[OUT_B]);
        }
        if !frozen[SKIP_W] {
            let (gx, gc) = grads.arrays[SKIP_W].split_at_mut(n * n);
            gemm(n, px, n, &cache.x_in, true, &d_out, false, 0.0, gx);
            gemm(self.layout.context_channels, px, n, &self.cond.planes, true, &d_out, false, 0.0, gc);
        }
        let below_out = [IN_NOISY_W, IN_CTX_W, IN_B, COND_W, COND_B, MID_W, MID_B];
        if below_out.iter().all(|&i| frozen[i]) {
            return Ok(grads);
        }

        let mut d_pre2 = vec![0.0; px * h];
        gemm(px, n, h, &d_out, false, &arrays[OUT_W].data, true, 0.0, &mut d_pre2);
        d_pre2.iter_mut().zip(&cache.pre2).for_each(|(g, &p)| *g *= silu_grad(p));
        if !frozen[MID_W] {
            gemm(9 * h, px, h, &cache.cols_h1, true, &d_pre2, false, 0.0, &mut grads.arrays[MID_W]);
        }
        if !frozen[MID_B] {
            accumulate_col_sums(&d_pre2, &mut grads.arrays[MID_B]);
        }
        let first = [IN_NOISY_W, IN_CTX_W, IN_B, COND_W, COND_B];
        if first.iter().all(|&i| frozen[i]) {
            return Ok(grads);
        }

        let mut d_cols = vec![0.0; px * 9 * h];
        gemm(px, h, 9 * h, &d_pre2, false, &arrays[MID_W].data, true, 0.0, &mut d_cols);
        let mut d_pre1 = vec![0.0; px * h];
        col2im3(&d_cols, grid, h, &mut d_pre1);
        d_pre1.iter_mut().zip(&cache.pre1).for_each(|(g, &p)| *g *= silu_grad(p));

        if !frozen[IN_NOISY_W] {
            gemm(9 * n, px, h, &cache.cols_x, true, &d_pre1, false, 0.0, &mut grads.arrays[IN_NOISY_W]);
        }
        if !frozen[IN_CTX_W] {
            let mut cols_ctx = Vec::new();
            im2col3(&self.cond.planes, grid, self.layout.context_channels, &mut cols_ctx);
            gemm(9 * self.layout.context_channels, px, h, &cols_ctx, true, &d_pre1, false, 0.0, &mut grads.arrays[IN_CTX_W]);
        }
        if !frozen[IN_B] {
            accumulate_col_sums(&d_pre1, &mut grads.arrays[IN_B]);
        }
        if !frozen[COND_W] || !frozen[COND_B] {
            let per_view = grid.height * grid.width;
            let feat = noise_feature(x.sigma);
            for v in 0..self.cond.views {
                let mut s = vec![0.0; h];
                accumulate_col_sums(&d_pre1[v * per_view * h..(v + 1) * per_view * h], &mut s);
                if !frozen[COND_W] {
                    let vec_v = &self.cond.vector[v * d..(v + 1) * d];
                    let gw = &mut grads.arrays[COND_W];
                    for (j, &c) in vec_v.iter().chain(std::iter::once(&feat)).enumerate() {
                        gw[j * h..(j + 1) * h].iter_mut().zip(&s).for_each(|(g, sv)| *g += c * sv);
                    }
                }
                if !frozen[COND_B] {
                    grads.arrays[COND_B].iter_mut().zip(&s).for_each(|(g, sv)| *g += sv);
                }
            }
        }
        Ok(grads)
    }
}

/// Clip layout `[v][frame][ch][y][x]` → pixel-major `[v][y][x][frame·ch]`, scaled.
fn to_pixel_major(clip: &Clip, scale: f64) -> Vec<f64> {
    let s = clip.shape();
    let fc = s.frames * s.channels;
    let hw = s.pixels();
    let data = clip.data();
    let mut out = vec![0.0; s.views * hw * fc];
    for v in 0..s.views {
        for f in 0..s.frames {
            for c in 0..s.channels {
                let src = ((v * s.frames + f) * s.channels + c) * hw;
                let k = f * s.channels + c;
                for p in 0..hw {
                    out[(v * hw + p) * fc + k] = scale * data[src + p];
                }
            }
        }
    }
    out
}

fn from_pixel_major(values: &[f64], like: &Clip) -> Clip {
    let s = like.shape();
    let fc = s.frames * s.channels;
    let hw = s.pixels();
    let mut clip = Clip::zeros(s);
    let data = clip.data_mut();
    for v in 0..s.views {
        for f in 0..s.frames {
            for c in 0..s.channels {
                let dst = ((v * s.frames + f) * s.channels + c) * hw;
                let k = f * s.channels + c;
                for p in 0..hw {
                    data[dst + p] = values[(v * hw + p) * fc + k];
                }
            }
        }
    }
    clip
}

/// `c_out(σ)·m_θ(x_σ, σ, c) + c_skip(σ)·x_σ`.
pub fn denoise_x0(params: &DenoiserParams, x_sigma: &NoisyClip, cond: &Conditioning) -> Result<Clip> {
    PreparedDenoiser::new(params, cond)?.denoise(x_sigma)
}

/// Gradient of `⟨upstream, denoise_x0(params, x_sigma, cond)⟩` with respect to
/// every non-frozen parameter array.
pub fn denoiser_param_gradients(
    params: &DenoiserParams,
    x_sigma: &NoisyClip,
    cond: &Conditioning,
    upstream: &Clip,
) -> Result<Gradients> {
    PreparedDenoiser::new(params, cond)?.gradients(x_sigma, upstream)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::rng_from;
    use crate::tensor::ClipShape;

    fn setup(layout: DenoiserLayout, views: usize, side: usize, seed: u64) -> (Conditioning, NoisyClip, Clip) {
        let mut rng = rng_from(seed);
        let mut draw = |n: usize| -> Vec<f64> { (0..n).map(|_| rng.sample::<f64, _>(StandardNormal)).collect() };
        let px = views * side * side;
        let cond = Conditioning {
            views,
            height: side,
            width: side,
            context_channels: layout.context_channels,
            planes: draw(px * layout.context_channels),
            cond_dim: layout.cond_dim,
            vector: draw(views * layout.cond_dim),
        };
        let shape = ClipShape::new(views, layout.noisy_channels, 1, side, side);
        let x = NoisyClip { clip: Clip::from_vec(shape, draw(shape.len())).unwrap(), sigma: 0.7 };
        let up = Clip::from_vec(shape, draw(shape.len())).unwrap();
        (cond, x, up)
    }

    fn small() -> DenoiserLayout {
        DenoiserLayout { noisy_channels: 1, context_channels: 1, cond_dim: 1, hidden: 2 }
    }

    #[test]
    fn zero_head_gives_skip_path() {
        let layout = DenoiserLayout { noisy_channels: 3, context_channels: 4, cond_dim: 5, hidden: 6 };
        let params = DenoiserParams::init(layout, &mut rng_from(1));
        let (cond, mut x, _) = setup(layout, 3, 6, 2);
        x.sigma = 1.0;
        let out = denoise_x0(&params, &x, &cond).unwrap();
        for (o, xi) in out.data().iter().zip(x.clip.data()) {
            assert_eq!(*o, 0.5 * xi);
        }
    }

    #[test]
    fn deterministic_and_tends_to_input_at_low_noise() {
        let layout = small();
        let mut params = DenoiserParams::random(layout, 0.5, &mut rng_from(4));
        params.arrays[OUT_GAIN].data.iter_mut().for_each(|g| *g = 0.0);
        let (cond, mut x, _) = setup(layout, 2, 4, 5);
        assert_eq!(denoise_x0(&params, &x, &cond).unwrap(), denoise_x0(&params, &x, &cond).unwrap());
        x.sigma = 1e-9;
        let out = denoise_x0(&params, &x, &cond).unwrap();
        assert!(out.squared_distance(&x.clip).sqrt() < 1e-6);
    }

    #[test]
    fn output_is_affine_in_the_head() {
        let layout = small();
        let mut rng = rng_from(7);
        let p1 = DenoiserParams::random(layout, 0.5, &mut rng);
        let mut p2 = p1.clone();
        for i in [OUT_W, OUT_B, SKIP_W] {
            p2.arrays[i].data.iter_mut().for_each(|v| *v = rng.sample::<f64, _>(StandardNormal));
        }
        let (a, b) = (rng.random_range(-2.0..2.0), rng.random_range(-2.0..2.0));
        let mut pab = p1.clone();
        for i in [OUT_W, OUT_B, SKIP_W] {
            for (j, v) in pab.arrays[i].data.iter_mut().enumerate() {
                *v = a * p1.arrays[i].data[j] + b * p2.arrays[i].data[j];
            }
        }
        let (cond, x, _) = setup(layout, 2, 4, 8);
        let (c_skip, _) = precondition_coeffs(x.sigma).unwrap();
        let d1 = denoise_x0(&p1, &x, &cond).unwrap();
        let d2 = denoise_x0(&p2, &x, &cond).unwrap();
        let dab = denoise_x0(&pab, &x, &cond).unwrap();
        let want = d1.lincomb(a, &d2, b).lincomb(1.0, &x.clip, -(a + b - 1.0) * c_skip);
        assert!(dab.squared_distance(&want).sqrt() < 1e-10);
    }

    #[test]
    fn gradients_match_central_differences() {
        let layout = small();
        let mut params = DenoiserParams::random(layout, 0.6, &mut rng_from(21));
        let (cond, x, up) = setup(layout, 2, 4, 22);
        let grads = denoiser_param_gradients(&params, &x, &cond, &up).unwrap();
        let objective = |p: &DenoiserParams| -> f64 {
            let d = denoise_x0(p, &x, &cond).unwrap();
            d.data().iter().zip(up.data()).map(|(a, b)| a * b).sum()
        };
        let h = 1e-4;
        let mut worst: f64 = 0.0;
        let mut flat = 0;
        for i in 0..NUM_ARRAYS {
            for j in 0..params.arrays[i].data.len() {
                let orig = params.arrays[i].data[j];
                params.arrays[i].data[j] = orig + h;
                let fp = objective(&params);
                params.arrays[i].data[j] = orig - h;
                let fm = objective(&params);
                params.arrays[i].data[j] = orig;
                let numeric = (fp - fm) / (2.0 * h);
                let analytic = grads.flat(flat);
                let rel = (numeric - analytic).abs() / numeric.abs().max(analytic.abs()).max(1e-6);
                worst = worst.max(rel);
                flat += 1;
            }
        }
        assert!(params.num_params() >= 64);
        assert!(worst < 1e-4, "max relative error {worst}");
    }

    #[test]
    fn frozen_and_zero_upstream_give_zero_gradients() {
        let layout = small();
        let mut params = DenoiserParams::random(layout, 0.6, &mut rng_from(31));
        let (cond, x, up) = setup(layout, 2, 4, 32);
        let zero = Clip::zeros(up.shape());
        assert_eq!(denoiser_param_gradients(&params, &x, &cond, &zero).unwrap().max_abs(), 0.0);
        params.set_freeze_mask(&DenoiserParams::posttrain_freeze_mask()).unwrap();
        let g = denoiser_param_gradients(&params, &x, &cond, &up).unwrap();
        for i in [IN_NOISY_W, IN_CTX_W, IN_B] {
            assert!(g.arrays[i].iter().all(|&v| v == 0.0));
        }
        assert!(g.arrays[MID_W].iter().any(|&v| v != 0.0));
        params.set_freeze_mask(&[true; NUM_ARRAYS]).unwrap();
        assert_eq!(denoiser_param_gradients(&params, &x, &cond, &up).unwrap().max_abs(), 0.0);
    }

    #[test]
    fn non_finite_activation_names_the_layer() {
        let layout = small();
        let mut params = DenoiserParams::random(layout, 0.6, &mut rng_from(41));
        params.arrays[MID_B].data[0] = f64::NAN;
        let (cond, x, _) = setup(layout, 1, 4, 42);
        match denoise_x0(&params, &x, &cond) {
            Err(Error::Numeric(msg)) => assert!(msg.contains("layer 5"), "{msg}"),
            other => panic!("expected numeric error, got {other:?}"),
        }
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let layout = small();
        let params = DenoiserParams::random(layout, 0.6, &mut rng_from(51));
        let (cond, _, _) = setup(layout, 2, 4, 52);
        let bad = NoisyClip { clip: Clip::zeros(ClipShape::new(2, 2, 1, 4, 4)), sigma: 1.0 };
        assert!(matches!(denoise_x0(&params, &bad, &cond), Err(Error::Shape(_))));
    }
}

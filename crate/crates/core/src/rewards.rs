//! Frame metrics, clip-level reward aggregation and group normalization.
//!
//! Three per-frame metrics are combined into one scalar reward: a
//! random-feature perceptual distance (lower is better, so it enters with a
//! negative sign), SSIM and PSNR. Frame metrics are averaged over the frames
//! of a chunk, then over views.

use std::io::Write;

use rand::Rng as _;
use rand_distr::StandardNormal;

use crate::error::{config_err, domain_err, shape_err, Result};
use crate::ops::{gemm, im2col3_strided, Grid};
use crate::rng::rng_from;
use crate::tensor::Clip;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameDims {
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl FrameDims {
    pub fn len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn check(a: &[f64], b: &[f64], dims: FrameDims) -> Result<()> {
    if a.len() != dims.len() || b.len() != dims.len() {
        return Err(shape_err!("frames of {} and {} values, expected {}", a.len(), b.len(), dims.len()));
    }
    Ok(())
}

pub const DEFAULT_PSNR_CAP: f64 = 100.0;

/// Peak signal-to-noise ratio for unit peak, `10·log10(1/MSE)`, at most `cap`.
pub fn psnr(a: &[f64], b: &[f64], cap: f64) -> Result<f64> {
    if a.len() != b.len() || a.is_empty() {
        return Err(shape_err!("psnr needs equal non-empty frames ({} vs {})", a.len(), b.len()));
    }
    let mse = a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / a.len() as f64;
    if mse == 0.0 {
        return Ok(cap);
    }
    Ok((10.0 * (1.0 / mse).log10()).min(cap))
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SsimConfig {
    pub window: usize,
    pub sigma: f64,
    pub k1: f64,
    pub k2: f64,
}

impl Default for SsimConfig {
    fn default() -> Self {
        SsimConfig { window: 7, sigma: 1.5, k1: 0.01, k2: 0.03 }
    }
}

fn gaussian_kernel(window: usize, sigma: f64) -> Vec<f64> {
    let c = (window as f64 - 1.0) / 2.0;
    let k: Vec<f64> = (0..window).map(|i| (-(i as f64 - c).powi(2) / (2.0 * sigma * sigma)).exp()).collect();
    let s: f64 = k.iter().sum();
    k.into_iter().map(|v| v / s).collect()
}

/// Separable valid-mode filtering of an `h×w` plane.
fn filter_valid(src: &[f64], h: usize, w: usize, k: &[f64], tmp: &mut Vec<f64>, out: &mut Vec<f64>) {
    let n = k.len();
    let (oh, ow) = (h + 1 - n, w + 1 - n);
    tmp.clear();
    tmp.resize(h * ow, 0.0);
    for y in 0..h {
        for x in 0..ow {
            tmp[y * ow + x] = (0..n).map(|i| k[i] * src[y * w + x + i]).sum();
        }
    }
    out.clear();
    out.resize(oh * ow, 0.0);
    for y in 0..oh {
        for x in 0..ow {
            out[y * ow + x] = (0..n).map(|i| k[i] * tmp[(y + i) * ow + x]).sum();
        }
    }
}

/// Mean structural similarity over all window positions, averaged over channels.
pub fn ssim(a: &[f64], b: &[f64], dims: FrameDims, config: &SsimConfig) -> Result<f64> {
    check(a, b, dims)?;
    let (h, w) = (dims.height, dims.width);
    if config.window == 0 || config.window > h.min(w) {
        return Err(domain_err!("ssim window {} does not fit a {h}×{w} frame", config.window));
    }
    let k = gaussian_kernel(config.window, config.sigma);
    let c1 = (config.k1).powi(2);
    let c2 = (config.k2).powi(2);
    let hw = h * w;
    let mut tmp = Vec::new();
    let (mut ma, mut mb, mut saa, mut sbb, mut sab) = (Vec::new(), Vec::new(), Vec::new(), Vec::new(), Vec::new());
    let mut total = 0.0;
    for ch in 0..dims.channels {
        let pa = &a[ch * hw..(ch + 1) * hw];
        let pb = &b[ch * hw..(ch + 1) * hw];
        let aa: Vec<f64> = pa.iter().map(|v| v * v).collect();
        let bb: Vec<f64> = pb.iter().map(|v| v * v).collect();
        let ab: Vec<f64> = pa.iter().zip(pb).map(|(x, y)| x * y).collect();
        filter_valid(pa, h, w, &k, &mut tmp, &mut ma);
        filter_valid(pb, h, w, &k, &mut tmp, &mut mb);
        filter_valid(&aa, h, w, &k, &mut tmp, &mut saa);
        filter_valid(&bb, h, w, &k, &mut tmp, &mut sbb);
        filter_valid(&ab, h, w, &k, &mut tmp, &mut sab);
        let mut acc = 0.0;
        for i in 0..ma.len() {
            let (mx, my) = (ma[i], mb[i]);
            let vx = saa[i] - mx * mx;
            let vy = sbb[i] - my * my;
            let cxy = sab[i] - mx * my;
            acc += ((2.0 * mx * my + c1) * (2.0 * cxy + c2)) / ((mx * mx + my * my + c1) * (vx + vy + c2));
        }
        total += acc / ma.len() as f64;
    }
    Ok(total / dims.channels as f64)
}

/// Fixed random convolutional stack used as a perceptual distance:
/// three 3×3 conv + ReLU layers (stride 1, 2, 2) with eight channels each.
#[derive(Debug, Clone)]
pub struct FeatureExtractor {
    channels: usize,
    layers: Vec<ConvLayer>,
}

#[derive(Debug, Clone)]
struct ConvLayer {
    cin: usize,
    cout: usize,
    stride: usize,
    /// `[(ky·3 + kx)·cin + ci][cout]`, the im2col layout.
    weights: Vec<f64>,
    bias: Vec<f64>,
}

const FEATURE_WIDTH: usize = 8;

impl ConvLayer {
    /// Pixel-major input `[y][x][cin]` to pixel-major ReLU output `[oy][ox][cout]`.
    fn apply(&self, input: &[f64], h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (oh, ow) = (h.div_ceil(self.stride), w.div_ceil(self.stride));
        let mut cols = Vec::new();
        im2col3_strided(input, Grid { batch: 1, height: h, width: w }, self.cin, self.stride, &mut cols);
        let mut out = vec![0.0; oh * ow * self.cout];
        for row in out.chunks_exact_mut(self.cout) {
            row.copy_from_slice(&self.bias);
        }
        gemm(oh * ow, 9 * self.cin, self.cout, &cols, false, &self.weights, false, 1.0, &mut out);
        out.iter_mut().for_each(|v| *v = v.max(0.0));
        (out, oh, ow)
    }
}

impl FeatureExtractor {
    pub fn new(channels: usize, seed: u64) -> Self {
        let mut rng = rng_from(seed);
        let mut layers = Vec::new();
        let mut cin = channels;
        for stride in [1, 2, 2] {
            let std = (2.0 / (9 * cin) as f64).sqrt();
            // Drawn as [cout][cin][3][3], stored transposed for the matrix product.
            let drawn: Vec<f64> = (0..FEATURE_WIDTH * cin * 9).map(|_| std * rng.sample::<f64, _>(StandardNormal)).collect();
            let mut weights = vec![0.0; drawn.len()];
            for co in 0..FEATURE_WIDTH {
                for ci in 0..cin {
                    for k in 0..9 {
                        weights[(k * cin + ci) * FEATURE_WIDTH + co] = drawn[(co * cin + ci) * 9 + k];
                    }
                }
            }
            let bias = (0..FEATURE_WIDTH).map(|_| 0.1 * rng.sample::<f64, _>(StandardNormal)).collect();
            layers.push(ConvLayer { cin, cout: FEATURE_WIDTH, stride, weights, bias });
            cin = FEATURE_WIDTH;
        }
        FeatureExtractor { channels, layers }
    }

    /// Unit-normalized responses of every layer, `[layer][location][channel]`.
    fn features(&self, frame: &[f64], h: usize, w: usize) -> Vec<Vec<f64>> {
        let hw = h * w;
        let mut x = vec![0.0; frame.len()];
        for (c, plane) in frame.chunks_exact(hw).enumerate() {
            for (p, v) in plane.iter().enumerate() {
                x[p * self.channels + c] = 2.0 * v - 1.0;
            }
        }
        let (mut h, mut w) = (h, w);
        let mut out = Vec::with_capacity(self.layers.len());
        for layer in &self.layers {
            let (y, oh, ow) = layer.apply(&x, h, w);
            let mut f = y.clone();
            for px in f.chunks_exact_mut(layer.cout) {
                let norm = px.iter().map(|v| v * v).sum::<f64>().sqrt() + 1e-10;
                px.iter_mut().for_each(|v| *v /= norm);
            }
            out.push(f);
            x = y;
            h = oh;
            w = ow;
        }
        out
    }

    /// Mean over layers of the location-averaged squared distance between normalized responses.
    pub fn distance(&self, a: &[f64], b: &[f64], dims: FrameDims) -> Result<f64> {
        check(a, b, dims)?;
        if dims.channels != self.channels {
            return Err(shape_err!("extractor built for {} channels, frame has {}", self.channels, dims.channels));
        }
        if a == b {
            return Ok(0.0);
        }
        let fa = self.features(a, dims.height, dims.width);
        let fb = self.features(b, dims.height, dims.width);
        let mut total = 0.0;
        for (la, lb) in fa.iter().zip(&fb) {
            let locations = la.len() / FEATURE_WIDTH;
            total += la.iter().zip(lb).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / locations as f64;
        }
        Ok(total / fa.len() as f64)
    }
}

/// Perceptual distance with an extractor built from `seed`.
pub fn feature_perceptual(a: &[f64], b: &[f64], dims: FrameDims, seed: u64) -> Result<f64> {
    FeatureExtractor::new(dims.channels, seed).distance(a, b, dims)
}

/// Metric order used in every per-metric array.
pub const METRIC_NAMES: [&str; 3] = ["perceptual", "ssim", "psnr"];

#[derive(Debug, Clone, PartialEq)]
pub struct MetricWeights {
    pub perceptual: f64,
    pub ssim: f64,
    pub psnr: f64,
    pub views: Vec<f64>,
}

impl Default for MetricWeights {
    fn default() -> Self {
        MetricWeights { perceptual: 1.0, ssim: 1.0, psnr: 1.0 / 32.0, views: vec![1.0; 3] }
    }
}

impl MetricWeights {
    pub fn validate(&self) -> Result<()> {
        let m = [self.perceptual, self.ssim, self.psnr];
        if m.iter().chain(&self.views).any(|w| !(w.is_finite() && *w >= 0.0)) {
            return Err(config_err!("metric and view weights must be finite and non-negative"));
        }
        if m.iter().all(|&w| w == 0.0) || self.views.iter().all(|&w| w == 0.0) {
            return Err(config_err!("at least one metric weight and one view weight must be positive"));
        }
        Ok(())
    }

    pub fn combine(&self, m: [f64; 3]) -> f64 {
        -self.perceptual * m[0] + self.ssim * m[1] + self.psnr * m[2]
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClipScore {
    /// Temporally averaged metrics per view; `None` where a masked view had no pixels.
    pub per_view: Vec<Option<[f64; 3]>>,
    /// View-weighted mean over the present views.
    pub mean: [f64; 3],
    pub combined: f64,
}

/// Frame metrics with their shared configuration.
#[derive(Debug, Clone)]
pub struct Scorer {
    pub ssim: SsimConfig,
    pub psnr_cap: f64,
    pub extractor: FeatureExtractor,
}

impl Scorer {
    pub fn new(channels: usize) -> Self {
        Scorer { ssim: SsimConfig::default(), psnr_cap: DEFAULT_PSNR_CAP, extractor: FeatureExtractor::new(channels, 0) }
    }

    /// `[perceptual, ssim, psnr]` for one frame pair.
    pub fn frame_metrics(&self, a: &[f64], b: &[f64], dims: FrameDims) -> Result<[f64; 3]> {
        Ok([self.extractor.distance(a, b, dims)?, ssim(a, b, dims, &self.ssim)?, psnr(a, b, self.psnr_cap)?])
    }

    fn aggregate(&self, per_view: Vec<Option<[f64; 3]>>, weights: &MetricWeights) -> Result<Option<ClipScore>> {
        if weights.views.len() != per_view.len() {
            return Err(shape_err!("{} view weights for {} views", weights.views.len(), per_view.len()));
        }
        let mut mean = [0.0; 3];
        let mut wsum = 0.0;
        for (m, &w) in per_view.iter().zip(&weights.views) {
            if let Some(m) = m {
                for i in 0..3 {
                    mean[i] += w * m[i];
                }
                wsum += w;
            }
        }
        if wsum == 0.0 {
            return Ok(None);
        }
        mean.iter_mut().for_each(|v| *v /= wsum);
        Ok(Some(ClipScore { combined: weights.combine(mean), per_view, mean }))
    }

    /// Per-view temporal mean of each metric, then the weighted view mean.
    pub fn clip_score(&self, gen: &Clip, gt: &Clip, weights: &MetricWeights) -> Result<ClipScore> {
        gen.check_same_shape(gt)?;
        let s = gen.shape();
        let dims = FrameDims { channels: s.channels, height: s.height, width: s.width };
        let mut per_view = Vec::with_capacity(s.views);
        for v in 0..s.views {
            let mut acc = [0.0; 3];
            for f in 0..s.frames {
                let m = self.frame_metrics(gen.frame(v, f), gt.frame(v, f), dims)?;
                (0..3).for_each(|i| acc[i] += m[i]);
            }
            per_view.push(Some(acc.map(|x| x / s.frames as f64)));
        }
        Ok(self.aggregate(per_view, weights)?.expect("all views present"))
    }

    /// Clip score restricted to masked pixels. `masks[v][f]` marks the pixels
    /// of frame `f` in view `v` to evaluate. Outside the mask the generated
    /// frame is replaced by ground truth, and both frames are cropped to the
    /// mask's bounding box grown to at least the SSIM window. Frames with an
    /// empty mask are skipped; a view with no usable frame is absent, and the
    /// result is `None` when every view is absent.
    pub fn masked_clip_score(&self, gen: &Clip, gt: &Clip, masks: &[Vec<Vec<bool>>], weights: &MetricWeights) -> Result<Option<ClipScore>> {
        gen.check_same_shape(gt)?;
        let s = gen.shape();
        let (h, w, c) = (s.height, s.width, s.channels);
        if masks.len() != s.views || masks.iter().any(|m| m.len() != s.frames || m.iter().any(|f| f.len() != h * w)) {
            return Err(shape_err!("masks do not match clip {:?}", s));
        }
        let win = self.ssim.window;
        let mut per_view = Vec::with_capacity(s.views);
        for v in 0..s.views {
            let mut acc = [0.0; 3];
            let mut used = 0;
            for f in 0..s.frames {
                let mask = &masks[v][f];
                let Some((y0, y1, x0, x1)) = bounding_box(mask, h, w, win) else { continue };
                let (ch, cw) = (y1 - y0, x1 - x0);
                let (g, t) = (gen.frame(v, f), gt.frame(v, f));
                let mut ca = Vec::with_capacity(c * ch * cw);
                let mut cb = Vec::with_capacity(c * ch * cw);
                for k in 0..c {
                    for y in y0..y1 {
                        for x in x0..x1 {
                            let i = k * h * w + y * w + x;
                            ca.push(if mask[y * w + x] { g[i] } else { t[i] });
                            cb.push(t[i]);
                        }
                    }
                }
                let m = self.frame_metrics(&ca, &cb, FrameDims { channels: c, height: ch, width: cw })?;
                (0..3).for_each(|i| acc[i] += m[i]);
                used += 1;
            }
            per_view.push((used > 0).then(|| acc.map(|x| x / used as f64)));
        }
        self.aggregate(per_view, weights)
    }
}

/// Half-open bounding box of the set pixels, grown symmetrically (and
/// clamped to the frame) to at least `min_side` in each direction.
fn bounding_box(mask: &[bool], h: usize, w: usize, min_side: usize) -> Option<(usize, usize, usize, usize)> {
    let (mut y0, mut y1, mut x0, mut x1) = (h, 0, w, 0);
    for y in 0..h {
        for x in 0..w {
            if mask[y * w + x] {
                y0 = y0.min(y);
                y1 = y1.max(y + 1);
                x0 = x0.min(x);
                x1 = x1.max(x + 1);
            }
        }
    }
    if y1 == 0 {
        return None;
    }
    let grow = |lo: usize, hi: usize, n: usize| -> (usize, usize) {
        let side = min_side.min(n);
        if hi - lo >= side {
            return (lo, hi);
        }
        let extra = side - (hi - lo);
        let lo = lo.saturating_sub(extra / 2);
        let hi = (lo + side).min(n);
        (hi - side, hi)
    };
    let (y0, y1) = grow(y0, y1, h);
    let (x0, x1) = grow(x0, x1, w);
    Some((y0, y1, x0, x1))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GroupRewards {
    pub raw: Vec<f64>,
    pub advantages: Vec<f64>,
    /// Rescaled advantages in [0, 1].
    pub weights: Vec<f64>,
    pub mean: f64,
    pub std: f64,
}

/// Z-scores the group (population standard deviation), clips to [−1, 1]
/// and maps to [0, 1]. A group whose values are all identical gets
/// advantage 0 and weight 0.5 everywhere.
pub fn group_normalize(raw: &[f64], eps: f64) -> Result<GroupRewards> {
    if raw.len() < 2 {
        return Err(domain_err!("group normalization needs at least two rewards, got {}", raw.len()));
    }
    if raw.iter().any(|r| !r.is_finite()) || !(eps >= 0.0) {
        return Err(domain_err!("rewards must be finite and eps non-negative"));
    }
    let k = raw.len() as f64;
    let mean = raw.iter().sum::<f64>() / k;
    let degenerate = raw.iter().all(|&r| r == raw[0]);
    let std = if degenerate { 0.0 } else { (raw.iter().map(|r| (r - mean).powi(2)).sum::<f64>() / k).sqrt() };
    let advantages: Vec<f64> = if degenerate || std + eps == 0.0 {
        vec![0.0; raw.len()]
    } else {
        raw.iter().map(|r| (r - mean) / (std + eps)).collect()
    };
    let weights = advantages.iter().map(|a| (a.clamp(-1.0, 1.0) + 1.0) / 2.0).collect();
    Ok(GroupRewards { raw: raw.to_vec(), advantages, weights, mean, std })
}

/// One line of a metric dump.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricRow {
    pub rollout_id: String,
    pub step: usize,
    pub view: String,
    pub metric: String,
    pub value: f64,
}

pub fn write_metric_csv<W: Write>(out: W, rows: &[MetricRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(["rollout_id", "step", "view", "metric", "value"])?;
    for r in rows {
        w.write_record([r.rollout_id.as_str(), &r.step.to_string(), r.view.as_str(), r.metric.as_str(), &r.value.to_string()])?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_metric_csv<R: std::io::Read>(input: R) -> Result<Vec<MetricRow>> {
    let mut r = csv::Reader::from_reader(input);
    let mut rows = Vec::new();
    for rec in r.records() {
        let rec = rec?;
        if rec.len() != 5 {
            return Err(domain_err!("metric row with {} fields", rec.len()));
        }
        let parse_err = |what: &str| domain_err!("bad {what} in metric row {:?}", rec);
        rows.push(MetricRow {
            rollout_id: rec[0].to_string(),
            step: rec[1].parse().map_err(|_| parse_err("step"))?,
            view: rec[2].to_string(),
            metric: rec[3].to_string(),
            value: rec[4].parse().map_err(|_| parse_err("value"))?,
        });
    }
    Ok(rows)
}

//! Multi-view frame chunks in pixel space.

use crate::error::{shape_err, Result};

/// Layout of a clip: `[views][frames][channels][height][width]`, row-major.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ClipShape {
    pub views: usize,
    pub frames: usize,
    pub channels: usize,
    pub height: usize,
    pub width: usize,
}

impl ClipShape {
    pub fn new(views: usize, frames: usize, channels: usize, height: usize, width: usize) -> Self {
        ClipShape { views, frames, channels, height, width }
    }

    pub fn len(&self) -> usize {
        self.views * self.frames * self.frame_len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Entries in one frame of one view (`channels × height × width`).
    pub fn frame_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    pub fn pixels(&self) -> usize {
        self.height * self.width
    }

    pub fn frame_offset(&self, view: usize, frame: usize) -> usize {
        (view * self.frames + frame) * self.frame_len()
    }
}

/// A chunk of frames for every view. Used both for clean clips (`x0`, model
/// outputs) and, wrapped in [`NoisyClip`], for noised inputs.
#[derive(Debug, Clone, PartialEq)]
pub struct Clip {
    shape: ClipShape,
    data: Vec<f64>,
}

impl Clip {
    pub fn zeros(shape: ClipShape) -> Self {
        Clip { shape, data: vec![0.0; shape.len()] }
    }

    pub fn filled(shape: ClipShape, value: f64) -> Self {
        Clip { shape, data: vec![value; shape.len()] }
    }

    pub fn from_vec(shape: ClipShape, data: Vec<f64>) -> Result<Self> {
        if data.len() != shape.len() {
            return Err(shape_err!("clip data has {} entries, shape {:?} needs {}", data.len(), shape, shape.len()));
        }
        Ok(Clip { shape, data })
    }

    pub fn shape(&self) -> ClipShape {
        self.shape
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_vec(self) -> Vec<f64> {
        self.data
    }

    /// One frame (`channels × height × width`) of one view.
    pub fn frame(&self, view: usize, frame: usize) -> &[f64] {
        let off = self.shape.frame_offset(view, frame);
        &self.data[off..off + self.shape.frame_len()]
    }

    pub fn frame_mut(&mut self, view: usize, frame: usize) -> &mut [f64] {
        let off = self.shape.frame_offset(view, frame);
        let n = self.shape.frame_len();
        &mut self.data[off..off + n]
    }

    pub fn check_same_shape(&self, other: &Clip) -> Result<()> {
        if self.shape != other.shape {
            return Err(shape_err!("clip shapes differ: {:?} vs {:?}", self.shape, other.shape));
        }
        Ok(())
    }

    pub fn is_finite(&self) -> bool {
        self.data.iter().all(|v| v.is_finite())
    }

    pub fn clamp_unit(&mut self) {
        for v in &mut self.data {
            *v = v.clamp(0.0, 1.0);
        }
    }

    /// Sum of squared differences.
    pub fn squared_distance(&self, other: &Clip) -> f64 {
        self.data.iter().zip(&other.data).map(|(a, b)| (a - b) * (a - b)).sum()
    }

    /// Mean squared difference per entry.
    pub fn mse(&self, other: &Clip) -> f64 {
        self.squared_distance(other) / self.data.len().max(1) as f64
    }

    /// `a·self + b·other`, elementwise.
    pub fn lincomb(&self, a: f64, other: &Clip, b: f64) -> Clip {
        let data = self.data.iter().zip(&other.data).map(|(x, y)| a * x + b * y).collect();
        Clip { shape: self.shape, data }
    }

    pub fn scale(&self, a: f64) -> Clip {
        Clip { shape: self.shape, data: self.data.iter().map(|x| a * x).collect() }
    }
}

/// A clip observed through additive Gaussian noise of standard deviation `sigma`.
#[derive(Debug, Clone, PartialEq)]
pub struct NoisyClip {
    pub clip: Clip,
    pub sigma: f64,
}

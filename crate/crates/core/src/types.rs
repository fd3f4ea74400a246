//! Shared data types for clips, masks, latents and motion ground truth.

use ndarray::{Array3, Array4};

use crate::error::CoreError;
use crate::flowlab::FlowField;
use crate::Result;

/// A video clip: `[S, 3, H, W]` RGB values in `[0, 1]`.
#[derive(Debug, Clone, PartialEq)]
pub struct VideoClip {
    pub data: Array4<f64>,
}

impl VideoClip {
    /// Wraps raw data, requiring at least two frames and an RGB channel axis.
    pub fn new(data: Array4<f64>) -> Result<Self> {
        let (s, c, _h, _w) = data.dim();
        if s < 2 {
            return Err(CoreError::Config(format!("clip needs >= 2 frames, got {s}")));
        }
        if c != 3 {
            return Err(CoreError::Config(format!("clip needs 3 channels, got {c}")));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn height(&self) -> usize {
        self.data.dim().2
    }

    pub fn width(&self) -> usize {
        self.data.dim().3
    }

    /// Checks that the spatial dims divide evenly by the latent factor `f`.
    pub fn check_divisible(&self, f: usize) -> Result<()> {
        let (_, _, h, w) = self.data.dim();
        if h % f != 0 || w % f != 0 {
            return Err(CoreError::Config(format!(
                "frame size {h}x{w} not divisible by latent factor {f}"
            )));
        }
        Ok(())
    }
}

/// Per-frame binary masks: `[S, H, W]`, 1 marks the region to inpaint.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskSequence {
    pub data: Array3<u8>,
}

impl MaskSequence {
    pub fn new(data: Array3<u8>) -> Result<Self> {
        if data.iter().any(|&v| v > 1) {
            return Err(CoreError::Data("mask values must be 0 or 1".into()));
        }
        Ok(Self { data })
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    /// Fraction of masked pixels in one frame.
    pub fn coverage(&self, frame: usize) -> f64 {
        let m = self.data.index_axis(ndarray::Axis(0), frame);
        let total = m.len() as f64;
        m.iter().map(|&v| v as f64).sum::<f64>() / total
    }
}

/// Exact motion ground truth recorded by the generator.
///
/// `flows[i]` lives on frame `i`'s grid and points into frame `i+1`: sampling
/// frame `i+1` at `x + flows[i](x)` reconstructs frame `i` wherever the same
/// surface is visible in both frames. `flows_reverse[i]` is the opposite
/// direction (on frame `i+1`'s grid, pointing into frame `i`); the pair feeds
/// forward-backward occlusion checks. `visibility[s]` is 1 where the
/// background is visible (not covered by a foreground shape) in frame `s`.
///
/// `occlusion[i]` marks pixels of frame `i` with no valid correspondence in
/// frame `i+1`: anti-aliased layer boundaries (at either end), pixels whose
/// target leaves the frame, and pixels covered by a different layer in the
/// next frame. On pixels where `occlusion` is 0, warping frame `i+1` by
/// `flows[i]` reproduces frame `i` exactly.
#[derive(Debug, Clone)]
pub struct GroundTruth {
    /// The clip rendered with zero foreground shapes: `[S, 3, H, W]`.
    pub background: Array4<f64>,
    pub flows: Vec<FlowField>,
    pub flows_reverse: Vec<FlowField>,
    pub visibility: Array3<u8>,
    /// `[S-1, H, W]`, 1 = no valid forward correspondence.
    pub occlusion: Array3<u8>,
}

/// Per-frame latent maps: `[S, C, h, w]`.
#[derive(Debug, Clone, PartialEq)]
pub struct LatentClip {
    pub data: Array4<f64>,
}

impl LatentClip {
    pub fn new(data: Array4<f64>) -> Self {
        Self { data }
    }

    pub fn frames(&self) -> usize {
        self.data.dim().0
    }

    pub fn channels(&self) -> usize {
        self.data.dim().1
    }

    pub fn zeros_like(&self) -> Self {
        Self { data: Array4::zeros(self.data.dim()) }
    }
}

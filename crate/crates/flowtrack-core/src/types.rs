//! Shared data model: image sequences, coordinate grids, flow fields, and
//! the model configuration.
//!
//! Coordinate convention, used everywhere: x grows rightward, y grows
//! downward, and flow channels are ordered `(dx, dy)`. A [`FlowField`]
//! stores displacements in units of its own grid cells; at stride 1 those
//! units are pixels. Rescaling between strides multiplies magnitudes by
//! the stride ratio and is owned by `sampling::upsample_flow`.

use crate::error::{Error, Result};
use ndarray::{Array2, Array3, Array4, Axis};
use serde::{Deserialize, Serialize};

/// T RGB frames sharing one resolution, values expected in `[0, 1]`.
/// Stored channel-first as `(T, 3, H, W)`.
#[derive(Debug, Clone)]
pub struct ImageSequence {
    frames: Array4<f64>,
}

impl ImageSequence {
    pub fn new(frames: Array4<f64>) -> Result<Self> {
        let t = frames.shape()[0];
        if t < 2 {
            return Err(Error::InvalidArgument(format!(
                "image sequence needs at least 2 frames, got {t}"
            )));
        }
        if frames.shape()[1] != 3 {
            return Err(Error::shape("ImageSequence", "(T, 3, H, W)", format!("{:?}", frames.shape())));
        }
        if !frames.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("image sequence"));
        }
        Ok(ImageSequence { frames })
    }

    pub fn len(&self) -> usize {
        self.frames.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    pub fn height(&self) -> usize {
        self.frames.shape()[2]
    }

    pub fn width(&self) -> usize {
        self.frames.shape()[3]
    }

    pub fn frames(&self) -> &Array4<f64> {
        &self.frames
    }

    pub fn frame(&self, t: usize) -> ndarray::ArrayView3<'_, f64> {
        self.frames.index_axis(Axis(0), t)
    }

    /// Sequence restricted to the first `t` frames.
    pub fn truncate(&self, t: usize) -> Result<Self> {
        ImageSequence::new(
            self.frames
                .slice_axis(Axis(0), ndarray::Slice::from(0..t))
                .to_owned(),
        )
    }

    /// Sequence assembled from the given frame indices, in order.
    pub fn select(&self, indices: &[usize]) -> Result<Self> {
        let views: Vec<_> = indices
            .iter()
            .map(|&i| self.frames.index_axis(Axis(0), i))
            .collect();
        ImageSequence::new(ndarray::stack(Axis(0), &views).expect("select frames"))
    }
}

/// Integer pixel grid of its own stride: entry `(i, j)` is `(j, i)`,
/// i.e. `(x, y)` with x rightward and y downward.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CoordinateGrid {
    pub height: usize,
    pub width: usize,
}

impl CoordinateGrid {
    pub fn new(height: usize, width: usize) -> Self {
        CoordinateGrid { height, width }
    }

    /// Materialized `(H, W, 2)` coordinates.
    pub fn coords(&self) -> Array3<f64> {
        let mut out = Array3::zeros((self.height, self.width, 2));
        for i in 0..self.height {
            for j in 0..self.width {
                out[[i, j, 0]] = j as f64;
                out[[i, j, 1]] = i as f64;
            }
        }
        out
    }

    /// Row-major flattened `(H*W, 2)` coordinates; cell `(i, j)` maps to
    /// flat index `i*W + j`.
    pub fn flat(&self) -> Array2<f64> {
        self.coords()
            .into_shape_with_order((self.height * self.width, 2))
            .unwrap()
    }

    pub fn len(&self) -> usize {
        self.height * self.width
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Dense 2-channel displacement field at an explicit stride, stored as
/// `(H, W, 2)` with channel order `(dx, dy)` in units of its own grid cells.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    vectors: Array3<f64>,
    stride: u32,
}

impl FlowField {
    pub fn new(vectors: Array3<f64>, stride: u32) -> Result<Self> {
        if vectors.shape()[2] != 2 {
            return Err(Error::shape("FlowField", "(H, W, 2)", format!("{:?}", vectors.shape())));
        }
        if stride == 0 {
            return Err(Error::InvalidArgument("flow stride must be positive".into()));
        }
        if !vectors.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("flow field"));
        }
        Ok(FlowField { vectors, stride })
    }

    pub fn zeros(height: usize, width: usize, stride: u32) -> Self {
        FlowField {
            vectors: Array3::zeros((height, width, 2)),
            stride,
        }
    }

    pub fn constant(height: usize, width: usize, stride: u32, dx: f64, dy: f64) -> Self {
        let mut vectors = Array3::zeros((height, width, 2));
        vectors.index_axis_mut(Axis(2), 0).fill(dx);
        vectors.index_axis_mut(Axis(2), 1).fill(dy);
        FlowField { vectors, stride }
    }

    pub fn height(&self) -> usize {
        self.vectors.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.vectors.shape()[1]
    }

    pub fn stride(&self) -> u32 {
        self.stride
    }

    pub fn vectors(&self) -> &Array3<f64> {
        &self.vectors
    }

    pub fn vectors_mut(&mut self) -> &mut Array3<f64> {
        &mut self.vectors
    }

    pub fn into_vectors(self) -> Array3<f64> {
        self.vectors
    }

    /// Channel-first `(2, H, W)` copy, the layout model internals use.
    pub fn to_chw(&self) -> Array3<f64> {
        let (h, w) = (self.height(), self.width());
        let mut out = Array3::zeros((2, h, w));
        for i in 0..h {
            for j in 0..w {
                out[[0, i, j]] = self.vectors[[i, j, 0]];
                out[[1, i, j]] = self.vectors[[i, j, 1]];
            }
        }
        out
    }

    pub fn from_chw(chw: &Array3<f64>, stride: u32) -> Result<Self> {
        if chw.shape()[0] != 2 {
            return Err(Error::shape("FlowField::from_chw", "(2, H, W)", format!("{:?}", chw.shape())));
        }
        let (h, w) = (chw.shape()[1], chw.shape()[2]);
        let mut vectors = Array3::zeros((h, w, 2));
        for i in 0..h {
            for j in 0..w {
                vectors[[i, j, 0]] = chw[[0, i, j]];
                vectors[[i, j, 1]] = chw[[1, i, j]];
            }
        }
        FlowField::new(vectors, stride)
    }
}

/// How softmax logits are scaled in the matching distribution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Temperature {
    /// `sqrt(D)`, keeping logit scale independent of the feature width.
    SqrtDim,
    /// Literal unscaled correlation logits.
    One,
    /// A fixed positive value.
    Fixed(f64),
}

impl Temperature {
    pub fn resolve(&self, feature_dim: usize) -> f64 {
        match *self {
            Temperature::SqrtDim => (feature_dim as f64).sqrt(),
            Temperature::One => 1.0,
            Temperature::Fixed(v) => v,
        }
    }
}

/// Architecture hyperparameters. Every width is shrinkable for desk-scale
/// runs; `toy()` is the preset used by the CLI defaults and the test suite.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ModelConfig {
    /// Side length of square tokenizer patches; must be a multiple of 4.
    pub patch_size: usize,
    /// Width of transformer tokens.
    pub token_dim: usize,
    /// Number of (frame-wise, global) attention block pairs.
    pub num_blocks: usize,
    /// Attention heads in each transformer layer.
    pub num_heads: usize,
    /// Channels D of the fused matching features.
    pub fuse_dim: usize,
    /// Stride of the fused matching features.
    pub global_stride: usize,
    /// Stride of the refinement grid; fixed at 4.
    pub refine_stride: usize,
    /// Local correlation radius r; the window has (2r+1)^2 offsets.
    pub corr_radius: usize,
    /// Channels of the recurrent hidden state.
    pub hidden_dim: usize,
    /// Refinement iterations during training.
    pub train_iters: usize,
    /// Refinement iterations during evaluation.
    pub eval_iters: usize,
    /// Channels of the motion encoder output.
    pub motion_dim: usize,
    /// Channels of the projected context features fed to the RNN cell.
    pub context_dim: usize,
    /// CNN pyramid channels at 1/2 resolution.
    pub cnn_dim_half: usize,
    /// CNN pyramid channels at 1/4 resolution.
    pub cnn_dim_quarter: usize,
    /// Working width of the token fusion head.
    pub fusion_width: usize,
    /// Transformer layer indices (flattened order) tapped for fusion.
    pub tap_layers: Vec<usize>,
    /// Softmax temperature for the matching distribution.
    pub temperature: Temperature,
    /// Enable the global (cross-frame) attention layers; when false they
    /// fall back to frame-wise attention, isolating every frame.
    pub global_attention: bool,
    /// Couple the frame-pair axis with attention inside refinement.
    pub temporal_attention: bool,
    /// Heads of the temporal attention.
    pub temporal_heads: usize,
    /// Initialize the hidden state to zero instead of projected context.
    pub zero_init_hidden: bool,
    /// Stop gradients from the refinement context branch into the fused
    /// features, so the matching loss alone shapes them.
    pub detach_context: bool,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            patch_size: 8,
            token_dim: 256,
            num_blocks: 12,
            num_heads: 8,
            fuse_dim: 128,
            global_stride: 8,
            refine_stride: 4,
            corr_radius: 4,
            hidden_dim: 128,
            train_iters: 4,
            eval_iters: 8,
            motion_dim: 128,
            context_dim: 64,
            cnn_dim_half: 32,
            cnn_dim_quarter: 64,
            fusion_width: 128,
            tap_layers: vec![3, 10, 16, 22],
            temperature: Temperature::SqrtDim,
            global_attention: true,
            temporal_attention: true,
            temporal_heads: 2,
            zero_init_hidden: false,
            detach_context: true,
        }
    }
}

impl ModelConfig {
    /// Desk-scale preset: 2 alternating block pairs, 32-channel fused
    /// features, trainable in minutes on one CPU core.
    pub fn toy() -> Self {
        ModelConfig {
            patch_size: 8,
            token_dim: 48,
            num_blocks: 2,
            num_heads: 4,
            fuse_dim: 32,
            global_stride: 8,
            refine_stride: 4,
            corr_radius: 3,
            hidden_dim: 32,
            train_iters: 4,
            eval_iters: 8,
            motion_dim: 32,
            context_dim: 16,
            cnn_dim_half: 16,
            cnn_dim_quarter: 24,
            fusion_width: 48,
            tap_layers: vec![0, 1, 2, 3],
            temperature: Temperature::SqrtDim,
            global_attention: true,
            temporal_attention: true,
            temporal_heads: 2,
            zero_init_hidden: false,
            detach_context: true,
        }
    }

    /// Total number of transformer layers in flattened order
    /// (frame-wise and global alternating).
    pub fn num_layers(&self) -> usize {
        self.num_blocks * 2
    }

    pub fn validate(&self) -> Result<()> {
        let fail = |msg: String| Err(Error::InvalidConfig(msg));
        if self.patch_size == 0 || self.patch_size % 4 != 0 {
            return fail(format!(
                "patch_size must be a positive multiple of 4, got {}",
                self.patch_size
            ));
        }
        if self.refine_stride != 4 {
            return fail(format!("refine_stride is fixed at 4, got {}", self.refine_stride));
        }
        if self.global_stride == 0 {
            return fail("global_stride must be positive".into());
        }
        if self.train_iters < 1 || self.eval_iters < self.train_iters {
            return fail(format!(
                "need eval_iters >= train_iters >= 1, got {}/{}",
                self.train_iters, self.eval_iters
            ));
        }
        if self.token_dim % self.num_heads != 0 {
            return fail(format!(
                "token_dim {} not divisible by num_heads {}",
                self.token_dim, self.num_heads
            ));
        }
        if self.hidden_dim % self.temporal_heads != 0 {
            return fail(format!(
                "hidden_dim {} not divisible by temporal_heads {}",
                self.hidden_dim, self.temporal_heads
            ));
        }
        if self.num_blocks == 0 {
            return fail("num_blocks must be at least 1".into());
        }
        if self.tap_layers.is_empty() {
            return fail("tap_layers must not be empty".into());
        }
        if let Some(&bad) = self.tap_layers.iter().find(|&&l| l >= self.num_layers()) {
            return fail(format!(
                "tap layer {bad} out of range for {} layers",
                self.num_layers()
            ));
        }
        Ok(())
    }

    /// Smallest resolution unit inputs must divide into: lcm(patch, 4).
    /// There is no automatic padding; the caller pads or crops.
    pub fn resolution_multiple(&self) -> usize {
        lcm(self.patch_size, 4).max(lcm(self.patch_size, self.global_stride))
    }

    /// Check an input resolution against the strides of every stage.
    pub fn check_resolution(&self, height: usize, width: usize) -> Result<()> {
        let m = self.resolution_multiple();
        if height == 0 || width == 0 || height % m != 0 || width % m != 0 {
            return Err(Error::InvalidArgument(format!(
                "resolution {height}x{width} must be a positive multiple of {m} (no automatic padding)"
            )));
        }
        Ok(())
    }
}

fn gcd(a: usize, b: usize) -> usize {
    if b == 0 {
        a
    } else {
        gcd(b, a % b)
    }
}

fn lcm(a: usize, b: usize) -> usize {
    a / gcd(a, b) * b
}

//! Feature extraction and fusion: a shared-weight residual CNN pyramid, a
//! learned patch tokenizer with fixed sinusoidal position encoding, L
//! alternating frame-wise/global attention block pairs, and a fusion head
//! that merges tapped token states with pixel-unshuffled CNN features into
//! the per-frame matching features.

use crate::autodiff::{bilinear_resize, concat, pixel_unshuffle, Tape, Var};
use crate::error::Result;
use crate::nn::{conv, linear, lnorm, self_attention};
use crate::params::{Binder, ParamInit, Parameters};
use crate::real::Real;
use crate::types::{ImageSequence, ModelConfig};
use ndarray::{Array3, Array4, ArrayD, IxDyn};

const MLP_RATIO: usize = 3;

/// Multi-scale CNN features; the quarter-resolution map doubles as the
/// local-correlation feature for refinement.
#[derive(Debug, Clone)]
pub struct PyramidFeatures {
    /// `(T, C2, H/2, W/2)`
    pub half: Array4<f64>,
    /// `(T, C4, H/4, W/4)`
    pub quarter: Array4<f64>,
}

/// Per-frame patch tokens with position encoding baked in: `(T, N, C)`.
#[derive(Debug, Clone)]
pub struct TokenGrid {
    pub tokens: Array3<f64>,
    pub grid_h: usize,
    pub grid_w: usize,
}

impl TokenGrid {
    pub fn frames(&self) -> usize {
        self.tokens.shape()[0]
    }

    pub fn tokens_per_frame(&self) -> usize {
        self.tokens.shape()[1]
    }
}

/// Fused matching features at the global stride: `(T, D, H_g, W_g)`.
#[derive(Debug, Clone)]
pub struct FusedFeatureMap {
    pub features: Array4<f64>,
    pub stride: u32,
}

/// Backbone stage outputs on a tape, shared by matching and refinement.
pub struct BackboneVars<'t, T: Real> {
    /// `(T, C4, H/4, W/4)` quarter-resolution CNN features.
    pub quarter: Var<'t, T>,
    /// `(T, D, H_g, W_g)` fused matching features.
    pub fused: Var<'t, T>,
}

/// The trainable feature extractor. Holds the architecture shape; weights
/// live in a [`Parameters`] store under the `backbone.` prefix.
#[derive(Debug, Clone)]
pub struct Backbone {
    cfg: ModelConfig,
}

impl Backbone {
    pub fn new(cfg: ModelConfig) -> Self {
        Backbone { cfg }
    }

    pub fn init<T: Real>(&self, init: &mut ParamInit<'_, T>) {
        let c = &self.cfg;
        init.conv("backbone.cnn.conv1", c.cnn_dim_half, 3, 3);
        init.conv("backbone.cnn.res1a", c.cnn_dim_half, c.cnn_dim_half, 3);
        init.conv("backbone.cnn.res1b", c.cnn_dim_half, c.cnn_dim_half, 3);
        init.conv("backbone.cnn.conv2", c.cnn_dim_quarter, c.cnn_dim_half, 3);
        init.conv("backbone.cnn.res2a", c.cnn_dim_quarter, c.cnn_dim_quarter, 3);
        init.conv("backbone.cnn.res2b", c.cnn_dim_quarter, c.cnn_dim_quarter, 3);
        init.conv("backbone.cnn.out", c.cnn_dim_quarter, c.cnn_dim_quarter, 1);

        let patch_dim = 3 * c.patch_size * c.patch_size;
        init.linear("backbone.tok.embed", patch_dim, c.token_dim);

        for l in 0..c.num_layers() {
            let p = format!("backbone.attn{l}");
            init.layer_norm(&format!("{p}.ln1"), c.token_dim);
            init.linear(&format!("{p}.q"), c.token_dim, c.token_dim);
            init.linear(&format!("{p}.k"), c.token_dim, c.token_dim);
            init.linear(&format!("{p}.v"), c.token_dim, c.token_dim);
            init.linear(&format!("{p}.o"), c.token_dim, c.token_dim);
            init.layer_norm(&format!("{p}.ln2"), c.token_dim);
            init.linear(&format!("{p}.mlp1"), c.token_dim, c.token_dim * MLP_RATIO);
            init.linear(&format!("{p}.mlp2"), c.token_dim * MLP_RATIO, c.token_dim);
        }

        let f = c.fusion_width;
        for (i, _) in c.tap_layers.iter().enumerate() {
            init.linear(&format!("backbone.fuse.tap{i}"), c.token_dim, f);
        }
        for i in 0..c.tap_layers.len().saturating_sub(1) {
            init.conv(&format!("backbone.fuse.merge{i}"), f, f, 3);
        }
        let unshuffle = c.patch_size / 4;
        let cnn_ch = c.cnn_dim_quarter * unshuffle * unshuffle;
        init.conv("backbone.fuse.mix1", f, f + cnn_ch, 1);
        init.conv("backbone.fuse.mix2", c.fuse_dim, f, 1);
        // the matching features end with a channel norm: dot-product logits
        // stay in a trainable range instead of saturating the softmax
        init.layer_norm("backbone.fuse.ln", c.fuse_dim);
    }

    /// CNN pyramid over all frames: `(T, 3, H, W)` in.
    pub fn cnn_forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        frames: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let x = conv(b, "backbone.cnn.conv1", frames, 2, 1).relu();
        let r = conv(b, "backbone.cnn.res1a", x, 1, 1).relu();
        let r = conv(b, "backbone.cnn.res1b", r, 1, 1);
        let half = x.add(r).relu();
        let x = conv(b, "backbone.cnn.conv2", half, 2, 1).relu();
        let r = conv(b, "backbone.cnn.res2a", x, 1, 1).relu();
        let r = conv(b, "backbone.cnn.res2b", r, 1, 1);
        // linear output projection: correlation features want a roughly
        // zero-mean range, not a rectified one
        let quarter = conv(b, "backbone.cnn.out", x.add(r).relu(), 1, 0);
        (half, quarter)
    }

    /// Patch embedding plus sinusoidal 2-D position encoding.
    /// Returns `(T*N, C)` tokens, frame-major.
    pub fn tokenize_forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        frames: Var<'t, T>,
        t_frames: usize,
        grid_h: usize,
        grid_w: usize,
    ) -> Var<'t, T> {
        let c = &self.cfg;
        let p = c.patch_size;
        let n = grid_h * grid_w;
        // (T, 3, H, W) -> (T, 3*p*p, gh, gw) -> (T, gh*gw, 3*p*p)
        let patches = pixel_unshuffle(frames, p)
            .reshape(&[t_frames, 3 * p * p, n])
            .permute(&[0, 2, 1])
            .reshape(&[t_frames * n, 3 * p * p]);
        let emb = linear(b, "backbone.tok.embed", patches);
        let pe = position_encoding::<T>(grid_h, grid_w, c.token_dim);
        let mut tiled = ArrayD::<T>::zeros(IxDyn(&[t_frames * n, c.token_dim]));
        for f in 0..t_frames {
            for i in 0..n {
                for j in 0..c.token_dim {
                    tiled[[f * n + i, j]] = pe[[i, j]];
                }
            }
        }
        emb.add(b.tape().leaf(tiled))
    }

    /// Run the alternating attention stack over `(T*N, C)` tokens.
    /// Even layers attend within each frame, odd layers attend globally
    /// over all frames' tokens. Returns the final tokens and the tapped
    /// intermediate states in `tap_layers` order.
    pub fn attention_forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        mut tokens: Var<'t, T>,
        t_frames: usize,
        tokens_per_frame: usize,
    ) -> (Var<'t, T>, Vec<Var<'t, T>>) {
        let c = &self.cfg;
        let mut taps = vec![None; c.tap_layers.len()];
        for l in 0..c.num_layers() {
            let p = format!("backbone.attn{l}");
            let global = l % 2 == 1 && c.global_attention;
            let (batch, seq) = if global {
                (1, t_frames * tokens_per_frame)
            } else {
                (t_frames, tokens_per_frame)
            };
            let att = self_attention(b, &p, lnorm(b, &format!("{p}.ln1"), tokens), batch, seq, c.num_heads);
            tokens = tokens.add(att);
            let h = linear(b, &format!("{p}.mlp1"), lnorm(b, &format!("{p}.ln2"), tokens)).gelu();
            tokens = tokens.add(linear(b, &format!("{p}.mlp2"), h));
            for (ti, &tl) in c.tap_layers.iter().enumerate() {
                if tl == l {
                    taps[ti] = Some(tokens);
                }
            }
        }
        let taps = taps
            .into_iter()
            .map(|t| t.expect("tap layer out of range"))
            .collect();
        (tokens, taps)
    }

    /// Fuse tapped token states with pixel-unshuffled quarter-resolution
    /// CNN features into `(T, D, H_g, W_g)` matching features.
    pub fn fuse_forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        taps: &[Var<'t, T>],
        quarter: Var<'t, T>,
        t_frames: usize,
        grid_h: usize,
        grid_w: usize,
        out_h: usize,
        out_w: usize,
    ) -> Var<'t, T> {
        let c = &self.cfg;
        assert_eq!(taps.len(), c.tap_layers.len(), "tap count mismatch");
        let f = c.fusion_width;
        let to_map = |v: Var<'t, T>| {
            v.reshape(&[t_frames, grid_h * grid_w, f])
                .permute(&[0, 2, 1])
                .reshape(&[t_frames, f, grid_h, grid_w])
        };
        // deepest tap first, shallower taps merged in with 3x3 convs
        let mut x = to_map(linear(b, &format!("backbone.fuse.tap{}", taps.len() - 1), taps[taps.len() - 1]));
        for (stage, ti) in (0..taps.len() - 1).rev().enumerate() {
            let side = to_map(linear(b, &format!("backbone.fuse.tap{ti}"), taps[ti]));
            x = conv(b, &format!("backbone.fuse.merge{stage}"), x.add(side), 1, 1).relu();
        }
        if x.shape()[2] != out_h || x.shape()[3] != out_w {
            x = bilinear_resize(x, out_h, out_w);
        }
        let mut cnn = pixel_unshuffle(quarter, c.patch_size / 4);
        if cnn.shape()[2] != out_h || cnn.shape()[3] != out_w {
            cnn = bilinear_resize(cnn, out_h, out_w);
        }
        let merged = concat(1, &[x, cnn]);
        let y = conv(b, "backbone.fuse.mix1", merged, 1, 0).relu();
        let fused = conv(b, "backbone.fuse.mix2", y, 1, 0);
        let d = self.cfg.fuse_dim;
        let normed = lnorm(
            b,
            "backbone.fuse.ln",
            fused
                .reshape(&[t_frames, d, out_h * out_w])
                .permute(&[0, 2, 1])
                .reshape(&[t_frames * out_h * out_w, d]),
        );
        normed
            .reshape(&[t_frames, out_h * out_w, d])
            .permute(&[0, 2, 1])
            .reshape(&[t_frames, d, out_h, out_w])
    }

    /// Full backbone pass from raw frames.
    pub fn forward<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        frames: Var<'t, T>,
    ) -> BackboneVars<'t, T> {
        let c = &self.cfg;
        let shape = frames.shape();
        let (t_frames, h, w) = (shape[0], shape[2], shape[3]);
        let (gh, gw) = (h / c.patch_size, w / c.patch_size);
        let (out_h, out_w) = (h / c.global_stride, w / c.global_stride);
        let (_, quarter) = self.cnn_forward(b, frames);
        let tokens = self.tokenize_forward(b, frames, t_frames, gh, gw);
        let (_, taps) = self.attention_forward(b, tokens, t_frames, gh * gw);
        let fused = self.fuse_forward(b, &taps, quarter, t_frames, gh, gw, out_h, out_w);
        BackboneVars { quarter, fused }
    }
}

/// Fixed 2-D sinusoidal position encoding for a token grid, x and y each
/// occupying half the channels.
pub fn position_encoding<T: Real>(grid_h: usize, grid_w: usize, dim: usize) -> ArrayD<T> {
    assert!(dim % 4 == 0, "token_dim must be divisible by 4");
    let quarter = dim / 4;
    let n = grid_h * grid_w;
    let mut pe = ArrayD::<T>::zeros(IxDyn(&[n, dim]));
    for i in 0..grid_h {
        for j in 0..grid_w {
            let row = i * grid_w + j;
            for k in 0..quarter {
                let omega = 1.0 / 10000f64.powf(k as f64 / quarter as f64);
                pe[[row, 2 * k]] = T::of_f64((j as f64 * omega).sin());
                pe[[row, 2 * k + 1]] = T::of_f64((j as f64 * omega).cos());
                pe[[row, 2 * quarter + 2 * k]] = T::of_f64((i as f64 * omega).sin());
                pe[[row, 2 * quarter + 2 * k + 1]] = T::of_f64((i as f64 * omega).cos());
            }
        }
    }
    pe
}

/// Cast an image sequence to a `(T, 3, H, W)` leaf on a tape.
pub fn frames_leaf<'t, T: Real>(tape: &'t Tape<T>, seq: &ImageSequence) -> Var<'t, T> {
    let f = seq.frames();
    let data: Vec<T> = f.iter().map(|&v| T::of_f64(v)).collect();
    tape.leaf(ArrayD::from_shape_vec(IxDyn(f.shape()), data).unwrap())
}

/// Array-level stage wrappers over a parameter store. Each runs the
/// differentiable path on a scratch tape and extracts plain arrays, so the
/// stage contracts can be exercised independently of training.
pub struct BackboneRunner<'p, T: Real> {
    pub backbone: Backbone,
    pub params: &'p Parameters<T>,
    pub cfg: ModelConfig,
}

impl<'p, T: Real> BackboneRunner<'p, T> {
    pub fn new(cfg: ModelConfig, params: &'p Parameters<T>) -> Self {
        BackboneRunner {
            backbone: Backbone::new(cfg.clone()),
            params,
            cfg,
        }
    }

    fn check_input(&self, seq: &ImageSequence) -> Result<()> {
        self.cfg.check_resolution(seq.height(), seq.width())
    }

    pub fn encode_cnn(&self, seq: &ImageSequence) -> Result<PyramidFeatures> {
        self.check_input(seq)?;
        let tape: Tape<T> = Tape::new();
        let binder = Binder::new(&tape, self.params);
        let frames = frames_leaf(&tape, seq);
        let (half, quarter) = self.backbone.cnn_forward(&binder, frames);
        Ok(PyramidFeatures {
            half: to_f64_4(&half.value()),
            quarter: to_f64_4(&quarter.value()),
        })
    }

    pub fn tokenize(&self, seq: &ImageSequence) -> Result<TokenGrid> {
        self.check_input(seq)?;
        let tape: Tape<T> = Tape::new();
        let binder = Binder::new(&tape, self.params);
        let frames = frames_leaf(&tape, seq);
        let (gh, gw) = (
            seq.height() / self.cfg.patch_size,
            seq.width() / self.cfg.patch_size,
        );
        let tok = self
            .backbone
            .tokenize_forward(&binder, frames, seq.len(), gh, gw);
        Ok(TokenGrid {
            tokens: to_f64_3(&tok.value(), seq.len(), gh * gw, self.cfg.token_dim),
            grid_h: gh,
            grid_w: gw,
        })
    }

    pub fn alternating_attention(&self, tok: &TokenGrid) -> Result<(TokenGrid, Vec<TokenGrid>)> {
        let (t, n, c) = (
            tok.frames(),
            tok.tokens_per_frame(),
            tok.tokens.shape()[2],
        );
        let tape: Tape<T> = Tape::new();
        let binder = Binder::new(&tape, self.params);
        let data: Vec<T> = tok.tokens.iter().map(|&v| T::of_f64(v)).collect();
        let x = tape.leaf(ArrayD::from_shape_vec(IxDyn(&[t * n, c]), data).unwrap());
        let (out, taps) = self.backbone.attention_forward(&binder, x, t, n);
        let wrap = |v: &Var<'_, T>| TokenGrid {
            tokens: to_f64_3(&v.value(), t, n, c),
            grid_h: tok.grid_h,
            grid_w: tok.grid_w,
        };
        Ok((wrap(&out), taps.iter().map(wrap).collect()))
    }

    pub fn fuse(&self, taps: &[TokenGrid], pyr: &PyramidFeatures) -> Result<FusedFeatureMap> {
        let t = pyr.quarter.shape()[0];
        let (gh, gw) = (taps[0].grid_h, taps[0].grid_w);
        let c = taps[0].tokens.shape()[2];
        let p = self.cfg.patch_size;
        let (out_h, out_w) = (
            gh * p / self.cfg.global_stride,
            gw * p / self.cfg.global_stride,
        );
        let tape: Tape<T> = Tape::new();
        let binder = Binder::new(&tape, self.params);
        let tap_vars: Vec<Var<'_, T>> = taps
            .iter()
            .map(|tg| {
                let data: Vec<T> = tg.tokens.iter().map(|&v| T::of_f64(v)).collect();
                tape.leaf(ArrayD::from_shape_vec(IxDyn(&[t * gh * gw, c]), data).unwrap())
            })
            .collect();
        let qdata: Vec<T> = pyr.quarter.iter().map(|&v| T::of_f64(v)).collect();
        let quarter = tape.leaf(ArrayD::from_shape_vec(IxDyn(pyr.quarter.shape()), qdata).unwrap());
        let fused = self
            .backbone
            .fuse_forward(&binder, &tap_vars, quarter, t, gh, gw, out_h, out_w);
        Ok(FusedFeatureMap {
            features: to_f64_4(&fused.value()),
            stride: self.cfg.global_stride as u32,
        })
    }
}

pub(crate) fn to_f64_4<T: Real>(a: &ArrayD<T>) -> Array4<f64> {
    let v = a.view().into_dimensionality::<ndarray::Ix4>().unwrap();
    Array4::from_shape_fn(
        (v.shape()[0], v.shape()[1], v.shape()[2], v.shape()[3]),
        |(b, c, h, w)| v[[b, c, h, w]].as_f64(),
    )
}

fn to_f64_3<T: Real>(a: &ArrayD<T>, d0: usize, d1: usize, d2: usize) -> Array3<f64> {
    let flat = a.view().into_shape_with_order((d0, d1, d2)).unwrap();
    Array3::from_shape_fn((d0, d1, d2), |(i, j, k)| flat[[i, j, k]].as_f64())
}

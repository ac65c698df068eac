//! Local recurrent refinement: a radius-r correlation volume sampled around
//! the current flow estimate feeds a motion encoder, a convolutional GRU,
//! attention along the frame-pair axis, and a two-layer flow head that
//! regresses the residual update. The local correlation is re-sampled from
//! the updated flow at every iteration.

use crate::autodiff::{bilinear_resize, concat, Tape, Var};
use crate::error::{Error, Result};
use crate::nn::{conv, linear};
use crate::params::{Binder, ParamInit, Parameters};
use crate::real::Real;
use crate::sampling::{taps, upsample_flow_var};
use crate::types::{FlowField, ModelConfig};
use ndarray::{Array3, Array4, ArrayD, Ix4, IxDyn};

/// Radius-r correlation costs per offset channel: `((2r+1)^2, H, W)` with
/// channel `(dy + r) * (2r+1) + (dx + r)` holding offset `(dx, dy)`.
#[derive(Debug, Clone)]
pub struct LocalCorrVolume {
    pub values: Array3<f64>,
    pub radius: usize,
}

impl LocalCorrVolume {
    pub fn channels(&self) -> usize {
        self.values.shape()[0]
    }
}

/// Correlate `f1` at each cell with `f2` bilinearly sampled at the cell
/// displaced by the current flow plus every offset in `[-r, r]^2`.
/// Both feature maps are `(C, H, W)` at stride 4; the flow is stride 4.
pub fn local_correlation(
    f1: &Array3<f64>,
    f2: &Array3<f64>,
    flow: &FlowField,
    radius: i64,
) -> Result<LocalCorrVolume> {
    if radius < 0 {
        return Err(Error::InvalidArgument(format!(
            "correlation radius must be non-negative, got {radius}"
        )));
    }
    if f1.shape() != f2.shape() {
        return Err(Error::shape(
            "local_correlation features",
            format!("{:?}", f1.shape()),
            format!("{:?}", f2.shape()),
        ));
    }
    if flow.stride() != 4 {
        return Err(Error::InvalidArgument(format!(
            "local correlation expects stride-4 flow, got {}",
            flow.stride()
        )));
    }
    let (c, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    if flow.height() != h || flow.width() != w {
        return Err(Error::shape(
            "local_correlation flow",
            format!("{h}x{w}"),
            format!("{}x{}", flow.height(), flow.width()),
        ));
    }
    let r = radius as usize;
    let side = 2 * r + 1;
    let mut out = Array3::zeros((side * side, h, w));
    for y in 0..h {
        for x in 0..w {
            let bx = x as f64 + flow.vectors()[[y, x, 0]];
            let by = y as f64 + flow.vectors()[[y, x, 1]];
            for dy in -radius..=radius {
                for dx in -radius..=radius {
                    let t = taps(bx + dx as f64, by + dy as f64, w, h);
                    let mut dot = 0.0;
                    for ch in 0..c {
                        let top = f2[[ch, t.y0, t.x0]]
                            + (f2[[ch, t.y0, t.x1]] - f2[[ch, t.y0, t.x0]]) * t.fx;
                        let bot = f2[[ch, t.y1, t.x0]]
                            + (f2[[ch, t.y1, t.x1]] - f2[[ch, t.y1, t.x0]]) * t.fx;
                        dot += f1[[ch, y, x]] * (top + (bot - top) * t.fy);
                    }
                    let k = ((dy + radius) * side as i64 + dx + radius) as usize;
                    out[[k, y, x]] = dot;
                }
            }
        }
    }
    Ok(LocalCorrVolume {
        values: out,
        radius: r,
    })
}

/// Fused differentiable local correlation over a `(P, C, H, W)` batch of
/// frame pairs with `(P, 2, H, W)` flows. Gradients flow to both feature
/// stacks and to the flow.
pub fn local_correlation_var<'t, T: Real>(
    f1: Var<'t, T>,
    f2: Var<'t, T>,
    flow: Var<'t, T>,
    radius: usize,
) -> Var<'t, T> {
    let tape: &'t Tape<T> = f1.tape();
    let shape = f1.shape();
    let (p, c, h, w) = (shape[0], shape[1], shape[2], shape[3]);
    let side = 2 * radius + 1;
    let k2 = side * side;
    let ir = radius as i64;

    // channel-last copies so per-tap corner rows are contiguous
    let chan_last = move |a: &ArrayD<T>| -> Vec<T> {
        let v = a.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = vec![T::zero(); p * h * w * c];
        for pi in 0..p {
            for ci in 0..c {
                for y in 0..h {
                    for x in 0..w {
                        out[((pi * h + y) * w + x) * c + ci] = v[[pi, ci, y, x]];
                    }
                }
            }
        }
        out
    };

    let forward = move |f1v: &ArrayD<T>, f2v: &ArrayD<T>, flv: &ArrayD<T>| -> ArrayD<T> {
        let f1l = chan_last(f1v);
        let f2l = chan_last(f2v);
        let fl = flv.view().into_dimensionality::<Ix4>().unwrap();
        let mut out = ArrayD::<T>::zeros(IxDyn(&[p, k2, h, w]));
        for pi in 0..p {
            for y in 0..h {
                for x in 0..w {
                    let bx = T::of_f64(x as f64) + fl[[pi, 0, y, x]];
                    let by = T::of_f64(y as f64) + fl[[pi, 1, y, x]];
                    let row1 = &f1l[((pi * h + y) * w + x) * c..((pi * h + y) * w + x + 1) * c];
                    for dy in -ir..=ir {
                        for dx in -ir..=ir {
                            let t = taps(
                                bx + T::of_f64(dx as f64),
                                by + T::of_f64(dy as f64),
                                w,
                                h,
                            );
                            let base = pi * h * w;
                            let r00 = &f2l[(base + t.y0 * w + t.x0) * c..(base + t.y0 * w + t.x0 + 1) * c];
                            let r01 = &f2l[(base + t.y0 * w + t.x1) * c..(base + t.y0 * w + t.x1 + 1) * c];
                            let r10 = &f2l[(base + t.y1 * w + t.x0) * c..(base + t.y1 * w + t.x0 + 1) * c];
                            let r11 = &f2l[(base + t.y1 * w + t.x1) * c..(base + t.y1 * w + t.x1 + 1) * c];
                            let w00 = (T::one() - t.fy) * (T::one() - t.fx);
                            let w01 = (T::one() - t.fy) * t.fx;
                            let w10 = t.fy * (T::one() - t.fx);
                            let w11 = t.fy * t.fx;
                            let mut dot = T::zero();
                            for ci in 0..c {
                                dot += row1[ci]
                                    * (w00 * r00[ci] + w01 * r01[ci] + w10 * r10[ci] + w11 * r11[ci]);
                            }
                            let k = ((dy + ir) * side as i64 + dx + ir) as usize;
                            out[[pi, k, y, x]] = dot;
                        }
                    }
                }
            }
        }
        out
    };

    let value = tape.with_value(f1.index, |f1v| {
        tape.with_value(f2.index, |f2v| {
            tape.with_value(flow.index, |flv| forward(f1v, f2v, flv))
        })
    });

    tape.push(
        value,
        vec![f1.index, f2.index, flow.index],
        Some(Box::new(move |args| {
            let f1v = args.inputs[0];
            let f2v = args.inputs[1];
            let flv = args.inputs[2].view().into_dimensionality::<Ix4>().unwrap();
            let f1l = chan_last(f1v);
            let f2l = chan_last(f2v);
            let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut d1l = vec![T::zero(); p * h * w * c];
            let mut d2l = vec![T::zero(); p * h * w * c];
            let mut dflow = Array4::<T>::zeros((p, 2, h, w));
            for pi in 0..p {
                for y in 0..h {
                    for x in 0..w {
                        let bx = T::of_f64(x as f64) + flv[[pi, 0, y, x]];
                        let by = T::of_f64(y as f64) + flv[[pi, 1, y, x]];
                        let at = ((pi * h + y) * w + x) * c;
                        let row1 = &f1l[at..at + c];
                        let mut gx = T::zero();
                        let mut gy = T::zero();
                        for dy in -ir..=ir {
                            for dx in -ir..=ir {
                                let k = ((dy + ir) * side as i64 + dx + ir) as usize;
                                let gv = g[[pi, k, y, x]];
                                if gv == T::zero() {
                                    continue;
                                }
                                let t = taps(
                                    bx + T::of_f64(dx as f64),
                                    by + T::of_f64(dy as f64),
                                    w,
                                    h,
                                );
                                let base = pi * h * w;
                                let o00 = (base + t.y0 * w + t.x0) * c;
                                let o01 = (base + t.y0 * w + t.x1) * c;
                                let o10 = (base + t.y1 * w + t.x0) * c;
                                let o11 = (base + t.y1 * w + t.x1) * c;
                                let w00 = (T::one() - t.fy) * (T::one() - t.fx);
                                let w01 = (T::one() - t.fy) * t.fx;
                                let w10 = t.fy * (T::one() - t.fx);
                                let w11 = t.fy * t.fx;
                                for ci in 0..c {
                                    let s00 = f2l[o00 + ci];
                                    let s01 = f2l[o01 + ci];
                                    let s10 = f2l[o10 + ci];
                                    let s11 = f2l[o11 + ci];
                                    let sampled =
                                        w00 * s00 + w01 * s01 + w10 * s10 + w11 * s11;
                                    d1l[at + ci] += gv * sampled;
                                    let gf = gv * row1[ci];
                                    d2l[o00 + ci] += gf * w00;
                                    d2l[o01 + ci] += gf * w01;
                                    d2l[o10 + ci] += gf * w10;
                                    d2l[o11 + ci] += gf * w11;
                                    if t.open_x {
                                        gx += gf
                                            * ((s01 - s00) * (T::one() - t.fy)
                                                + (s11 - s10) * t.fy);
                                    }
                                    if t.open_y {
                                        gy += gf
                                            * ((s10 - s00) * (T::one() - t.fx)
                                                + (s11 - s01) * t.fx);
                                    }
                                }
                            }
                        }
                        dflow[[pi, 0, y, x]] = gx;
                        dflow[[pi, 1, y, x]] = gy;
                    }
                }
            }
            let chan_first = move |l: Vec<T>| -> ArrayD<T> {
                let mut out = Array4::<T>::zeros((p, c, h, w));
                for pi in 0..p {
                    for ci in 0..c {
                        for y in 0..h {
                            for x in 0..w {
                                out[[pi, ci, y, x]] = l[((pi * h + y) * w + x) * c + ci];
                            }
                        }
                    }
                }
                out.into_dyn()
            };
            vec![chan_first(d1l), chan_first(d2l), dflow.into_dyn()]
        })),
    )
}

/// The recurrent refinement network. Weights live under the `refine.`
/// prefix of a [`Parameters`] store.
#[derive(Debug, Clone)]
pub struct Refiner {
    cfg: ModelConfig,
}

impl Refiner {
    pub fn new(cfg: ModelConfig) -> Self {
        Refiner { cfg }
    }

    pub fn init<T: Real>(&self, init: &mut ParamInit<'_, T>) {
        let c = &self.cfg;
        let k2 = (2 * c.corr_radius + 1) * (2 * c.corr_radius + 1);
        let ctx_in = c.fuse_dim + c.cnn_dim_quarter;
        init.conv("refine.motion1", c.motion_dim, k2 + 2, 3);
        init.conv("refine.motion2", c.motion_dim, c.motion_dim, 3);
        init.conv("refine.ctx", c.context_dim, ctx_in, 1);
        init.conv("refine.hidden0", c.hidden_dim, ctx_in, 1);
        let x_ch = c.motion_dim + c.context_dim;
        init.conv("refine.gru.z", c.hidden_dim, c.hidden_dim + x_ch, 1);
        // biased toward keeping state: damps drift when iterating past the
        // trained horizon
        init.set_bias("refine.gru.z", -1.0);
        init.conv("refine.gru.r", c.hidden_dim, c.hidden_dim + x_ch, 1);
        init.conv("refine.gru.h", c.hidden_dim, c.hidden_dim + x_ch, 3);
        init.linear("refine.tattn.q", c.hidden_dim, c.hidden_dim);
        init.linear("refine.tattn.k", c.hidden_dim, c.hidden_dim);
        init.linear("refine.tattn.v", c.hidden_dim, c.hidden_dim);
        init.linear("refine.tattn.o", c.hidden_dim, c.hidden_dim);
        init.conv("refine.head1", c.hidden_dim, c.hidden_dim, 3);
        // residual flow output starts close to the identity update
        init.conv_scaled("refine.head2", 2, c.hidden_dim, 3, 0.1);
    }

    /// Hidden state from source-frame context: a learned projection of the
    /// fused features (resized to stride 4) concatenated with the CNN
    /// features, squashed by tanh so `|h| <= 1` at initialization.
    pub fn init_hidden_var<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        ctx_in: Var<'t, T>,
    ) -> Var<'t, T> {
        if self.cfg.zero_init_hidden {
            let shape = ctx_in.shape();
            return b.tape().leaf(ArrayD::zeros(IxDyn(&[
                shape[0],
                self.cfg.hidden_dim,
                shape[2],
                shape[3],
            ])));
        }
        conv(b, "refine.hidden0", ctx_in, 1, 0).tanh()
    }

    /// Context features for the RNN cell, from the same concatenated input.
    pub fn context_var<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        ctx_in: Var<'t, T>,
    ) -> Var<'t, T> {
        conv(b, "refine.ctx", ctx_in, 1, 0).relu()
    }

    /// One refinement step over all pairs jointly:
    /// motion encoding of (local correlation, flow), a ConvGRU spatial
    /// update, attention along the pair axis, and the residual flow head.
    #[allow(clippy::too_many_arguments)]
    pub fn step_var<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        flows: Var<'t, T>,
        hidden: Var<'t, T>,
        f_src: Var<'t, T>,
        f_tgt: Var<'t, T>,
        context: Var<'t, T>,
    ) -> (Var<'t, T>, Var<'t, T>) {
        let c = &self.cfg;
        let corr = local_correlation_var(f_src, f_tgt, flows, c.corr_radius);
        // normalize the dot-product range so the motion encoder sees
        // feature-width-independent magnitudes
        let corr_scale = 1.0 / (f_src.shape()[1] as f64).sqrt();
        let m = conv(
            b,
            "refine.motion1",
            concat(1, &[corr.scale(corr_scale), flows]),
            1,
            1,
        )
        .relu();
        let motion = conv(b, "refine.motion2", m, 1, 1).relu();

        let x = concat(1, &[motion, context]);
        let hx = concat(1, &[hidden, x]);
        let z = conv(b, "refine.gru.z", hx, 1, 0).sigmoid();
        let r = conv(b, "refine.gru.r", hx, 1, 0).sigmoid();
        let rhx = concat(1, &[r.mul(hidden), x]);
        let cand = conv(b, "refine.gru.h", rhx, 1, 1).tanh();
        // h' = (1 - z) * h + z * cand
        let mut h = hidden.add(z.mul(cand.sub(hidden)));

        if c.temporal_attention {
            h = h.add(self.temporal_attention_var(b, h));
        }

        let d = conv(b, "refine.head1", h, 1, 1).relu();
        // damped residual: smaller per-step corrections keep the iteration
        // contractive when run past the trained horizon
        let delta = conv(b, "refine.head2", d, 1, 1).scale(0.5);
        (flows.add(delta), h)
    }

    /// Multi-head attention across the pair axis at every spatial location,
    /// returned as a residual branch.
    fn temporal_attention_var<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        h: Var<'t, T>,
    ) -> Var<'t, T> {
        let c = &self.cfg;
        let shape = h.shape();
        let (p, ch, hh, ww) = (shape[0], shape[1], shape[2], shape[3]);
        let hw = hh * ww;
        let heads = c.temporal_heads;
        let dh = ch / heads;
        // (P, C, H, W) -> (HW, P, C) rows
        let seq = h
            .reshape(&[p, ch, hw])
            .permute(&[2, 0, 1])
            .reshape(&[hw * p, ch]);
        let split = |v: Var<'t, T>| {
            v.reshape(&[hw, p, heads, dh])
                .permute(&[0, 2, 1, 3])
                .reshape(&[hw * heads, p, dh])
        };
        let q = split(linear(b, "refine.tattn.q", seq));
        let k = split(linear(b, "refine.tattn.k", seq));
        let v = split(linear(b, "refine.tattn.v", seq));
        let att = q
            .bmm(k.permute(&[0, 2, 1]))
            .scale(1.0 / (dh as f64).sqrt())
            .softmax_last();
        let o = att
            .bmm(v)
            .reshape(&[hw, heads, p, dh])
            .permute(&[0, 2, 1, 3])
            .reshape(&[hw * p, ch]);
        linear(b, "refine.tattn.o", o)
            .reshape(&[hw, p, ch])
            .permute(&[1, 2, 0])
            .reshape(&[p, ch, hh, ww])
    }

    /// Run K refinement iterations from stride-S_g initial flows (or given
    /// stride-4 seeds) and return every stride-4 iterate.
    #[allow(clippy::too_many_arguments)]
    pub fn refine_var<'t, T: Real>(
        &self,
        b: &Binder<'t, '_, T>,
        init_flows_sg: Var<'t, T>,
        seed_flows_s4: Option<Var<'t, T>>,
        quarter_src: Var<'t, T>,
        quarter_tgt: Var<'t, T>,
        fused_src: Var<'t, T>,
        iters: usize,
    ) -> Vec<Var<'t, T>> {
        assert!(iters >= 1, "refinement needs at least one iteration");
        let c = &self.cfg;
        let qshape = quarter_src.shape();
        let (h4, w4) = (qshape[2], qshape[3]);
        let fused_ctx = if c.detach_context {
            fused_src.detach()
        } else {
            fused_src
        };
        let ctx4 = bilinear_resize(fused_ctx, h4, w4);
        let ctx_in = concat(1, &[ctx4, quarter_src]);
        let context = self.context_var(b, ctx_in);
        let mut hidden = self.init_hidden_var(b, ctx_in);
        let mut flows = match seed_flows_s4 {
            Some(seed) => seed,
            None => upsample_flow_var(init_flows_sg, c.global_stride as u32, 4),
        };
        let mut iterates = Vec::with_capacity(iters);
        for _ in 0..iters {
            let (f, h) = self.step_var(b, flows, hidden, quarter_src, quarter_tgt, context);
            flows = f;
            hidden = h;
            iterates.push(flows);
        }
        iterates
    }
}

/// Array-level wrappers over the differentiable refinement path, for
/// exercising the stage contracts directly.
pub struct RefineRunner<'p, T: Real> {
    pub refiner: Refiner,
    pub params: &'p Parameters<T>,
    pub cfg: ModelConfig,
}

impl<'p, T: Real> RefineRunner<'p, T> {
    pub fn new(cfg: ModelConfig, params: &'p Parameters<T>) -> Self {
        RefineRunner {
            refiner: Refiner::new(cfg.clone()),
            params,
            cfg,
        }
    }

    /// One refinement step over `pairs.len()` flow fields at stride 4.
    /// `quarter` is `(T, C4, H/4, W/4)`, `fused` is `(T, D, H_g, W_g)`,
    /// `hidden` is `(P, C_h, H/4, W/4)`.
    pub fn refine_step(
        &self,
        flows: &[FlowField],
        hidden: &Array4<f64>,
        quarter: &Array4<f64>,
        fused: &Array4<f64>,
        pairs: &[(usize, usize)],
    ) -> Result<(Vec<FlowField>, Array4<f64>)> {
        if pairs.is_empty() {
            return Err(Error::InvalidArgument(
                "refinement needs at least one frame pair (T >= 2)".into(),
            ));
        }
        let tape: Tape<T> = Tape::new();
        let binder = Binder::new(&tape, self.params);
        let (h4, w4) = (quarter.shape()[2], quarter.shape()[3]);
        let flows_var = flows_to_var(&tape, flows)?;
        let hidden_var = tape.leaf(cast_dyn::<T>(&hidden.clone().into_dyn()));
        let q = tape.leaf(cast_dyn::<T>(&quarter.clone().into_dyn()));
        let f = tape.leaf(cast_dyn::<T>(&fused.clone().into_dyn()));
        let src = select_frames(q, &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let tgt = select_frames(q, &pairs.iter().map(|p| p.1).collect::<Vec<_>>());
        let fsrc = select_frames(f, &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let ctx4 = bilinear_resize(fsrc, h4, w4);
        let ctx_in = concat(1, &[ctx4, src]);
        let context = self.refiner.context_var(&binder, ctx_in);
        let (new_flows, new_hidden) =
            self.refiner
                .step_var(&binder, flows_var, hidden_var, src, tgt, context);
        Ok((
            var_to_flows(&new_flows, 4)?,
            to_f64_dyn(&new_hidden.value())
                .into_dimensionality::<Ix4>()
                .unwrap(),
        ))
    }

    /// Hidden state for the given pairs from fused and CNN context.
    pub fn init_hidden(
        &self,
        fused: &Array4<f64>,
        quarter: &Array4<f64>,
        pairs: &[(usize, usize)],
    ) -> Result<Array4<f64>> {
        let tape: Tape<T> = Tape::new();
        let binder = Binder::new(&tape, self.params);
        let (h4, w4) = (quarter.shape()[2], quarter.shape()[3]);
        let q = tape.leaf(cast_dyn::<T>(&quarter.clone().into_dyn()));
        let f = tape.leaf(cast_dyn::<T>(&fused.clone().into_dyn()));
        let src = select_frames(q, &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let fsrc = select_frames(f, &pairs.iter().map(|p| p.0).collect::<Vec<_>>());
        let ctx4 = bilinear_resize(fsrc, h4, w4);
        let hidden = self.refiner.init_hidden_var(&binder, concat(1, &[ctx4, src]));
        Ok(to_f64_dyn(&hidden.value())
            .into_dimensionality::<Ix4>()
            .unwrap())
    }
}

/// Gather frames of a `(T, ...)` stack into a `(P, ...)` stack.
pub fn select_frames<'t, T: Real>(stack: Var<'t, T>, indices: &[usize]) -> Var<'t, T> {
    // fast path: a contiguous run is a single slice
    if indices
        .windows(2)
        .all(|w| w[1] == w[0] + 1)
    {
        return stack.narrow(0, indices[0], indices.len());
    }
    let parts: Vec<Var<'t, T>> = indices
        .iter()
        .map(|&i| stack.narrow(0, i, 1))
        .collect();
    concat(0, &parts)
}

pub(crate) fn flows_to_var<'t, T: Real>(
    tape: &'t Tape<T>,
    flows: &[FlowField],
) -> Result<Var<'t, T>> {
    let (h, w) = (flows[0].height(), flows[0].width());
    let mut out = Array4::<T>::zeros((flows.len(), 2, h, w));
    for (p, f) in flows.iter().enumerate() {
        if f.height() != h || f.width() != w {
            return Err(Error::shape(
                "flows_to_var",
                format!("{h}x{w}"),
                format!("{}x{}", f.height(), f.width()),
            ));
        }
        let chw = f.to_chw();
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    out[[p, c, y, x]] = T::of_f64(chw[[c, y, x]]);
                }
            }
        }
    }
    Ok(tape.leaf(out.into_dyn()))
}

pub(crate) fn var_to_flows<T: Real>(v: &Var<'_, T>, stride: u32) -> Result<Vec<FlowField>> {
    let val = v.value();
    let a = val.view().into_dimensionality::<Ix4>().unwrap();
    let (p, h, w) = (a.shape()[0], a.shape()[2], a.shape()[3]);
    (0..p)
        .map(|pi| {
            let mut chw = Array3::zeros((2, h, w));
            for c in 0..2 {
                for y in 0..h {
                    for x in 0..w {
                        chw[[c, y, x]] = a[[pi, c, y, x]].as_f64();
                    }
                }
            }
            FlowField::from_chw(&chw, stride)
        })
        .collect()
}

pub(crate) fn cast_dyn<T: Real>(a: &ArrayD<f64>) -> ArrayD<T> {
    ArrayD::from_shape_vec(
        IxDyn(a.shape()),
        a.iter().map(|&v| T::of_f64(v)).collect(),
    )
    .unwrap()
}

pub(crate) fn to_f64_dyn<T: Real>(a: &ArrayD<T>) -> ArrayD<f64> {
    ArrayD::from_shape_vec(IxDyn(a.shape()), a.iter().map(|&v| v.as_f64()).collect()).unwrap()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sampling::bilinear_sample;
    use crate::types::ModelConfig;
    use ndarray::Array2;
    use rand::Rng;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn one_hot(h: usize, w: usize) -> Array3<f64> {
        let n = h * w;
        let mut f = Array3::zeros((n, h, w));
        for i in 0..h {
            for j in 0..w {
                f[[i * w + j, i, j]] = 1.0;
            }
        }
        f
    }

    #[test]
    fn channel_count_is_window_squared() {
        let f = one_hot(3, 3);
        for r in 0..=3i64 {
            let c = local_correlation(&f, &f, &FlowField::zeros(3, 3, 4), r).unwrap();
            assert_eq!(c.channels(), ((2 * r + 1) * (2 * r + 1)) as usize);
        }
        assert!(local_correlation(&f, &f, &FlowField::zeros(3, 3, 4), -1).is_err());
    }

    #[test]
    fn zero_flow_one_hot_center_channel_is_one() {
        let f = one_hot(4, 4);
        let c = local_correlation(&f, &f, &FlowField::zeros(4, 4, 4), 1).unwrap();
        let center = 4usize; // (dy=0, dx=0) in a 3x3 window
        for y in 0..4 {
            for x in 0..4 {
                assert_eq!(c.values[[center, y, x]], 1.0, "center at ({y},{x})");
            }
        }
        // all neighbor channels vanish away from the border (border cells
        // clamp onto themselves for outward offsets)
        for k in 0..9 {
            if k == center {
                continue;
            }
            for y in 1..3 {
                for x in 1..3 {
                    assert_eq!(c.values[[k, y, x]], 0.0, "offset {k} at ({y},{x})");
                }
            }
        }
    }

    #[test]
    fn radius_zero_is_warped_pointwise_dot() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let f1 = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() - 0.5);
        let f2 = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() - 0.5);
        let mut flow = FlowField::zeros(4, 4, 4);
        for v in flow.vectors_mut().iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let c = local_correlation(&f1, &f2, &flow, 0).unwrap();
        assert_eq!(c.channels(), 1);
        for y in 0..4 {
            for x in 0..4 {
                let pt = Array2::from_shape_vec(
                    (1, 2),
                    vec![
                        x as f64 + flow.vectors()[[y, x, 0]],
                        y as f64 + flow.vectors()[[y, x, 1]],
                    ],
                )
                .unwrap();
                let s = bilinear_sample(&f2, &pt).unwrap();
                let dot: f64 = (0..3).map(|ch| f1[[ch, y, x]] * s[[0, ch]]).sum();
                assert!((c.values[[0, y, x]] - dot).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn matches_per_offset_sampling_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let f1 = Array3::from_shape_fn((4, 5, 5), |_| rng.random::<f64>() - 0.5);
        let f2 = Array3::from_shape_fn((4, 5, 5), |_| rng.random::<f64>() - 0.5);
        let mut flow = FlowField::zeros(5, 5, 4);
        for v in flow.vectors_mut().iter_mut() {
            *v = (rng.random::<f64>() - 0.5) * 3.0;
        }
        let r = 2i64;
        let c = local_correlation(&f1, &f2, &flow, r).unwrap();
        for y in 0..5 {
            for x in 0..5 {
                for dy in -r..=r {
                    for dx in -r..=r {
                        let pt = Array2::from_shape_vec(
                            (1, 2),
                            vec![
                                x as f64 + flow.vectors()[[y, x, 0]] + dx as f64,
                                y as f64 + flow.vectors()[[y, x, 1]] + dy as f64,
                            ],
                        )
                        .unwrap();
                        let s = bilinear_sample(&f2, &pt).unwrap();
                        let dot: f64 = (0..4).map(|ch| f1[[ch, y, x]] * s[[0, ch]]).sum();
                        let k = ((dy + r) * (2 * r + 1) + dx + r) as usize;
                        assert!(
                            (c.values[[k, y, x]] - dot).abs() < 1e-5,
                            "offset ({dx},{dy}) at ({y},{x})"
                        );
                    }
                }
            }
        }
    }

    #[test]
    fn var_op_matches_array_op() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let f1 = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() - 0.5);
        let f2 = Array3::from_shape_fn((3, 4, 4), |_| rng.random::<f64>() - 0.5);
        let mut flow = FlowField::zeros(4, 4, 4);
        for v in flow.vectors_mut().iter_mut() {
            *v = (rng.random::<f64>() - 0.5) * 2.0;
        }
        let arr = local_correlation(&f1, &f2, &flow, 1).unwrap();
        let tape: Tape<f64> = Tape::new();
        let v1 = tape.leaf(f1.insert_axis(ndarray::Axis(0)).into_dyn());
        let v2 = tape.leaf(f2.insert_axis(ndarray::Axis(0)).into_dyn());
        let fv = flows_to_var(&tape, &[flow]).unwrap();
        let out = local_correlation_var(v1, v2, fv, 1).value();
        for k in 0..9 {
            for y in 0..4 {
                for x in 0..4 {
                    assert!((out[[0, k, y, x]] - arr.values[[k, y, x]]).abs() < 1e-12);
                }
            }
        }
    }

    fn runner_config() -> ModelConfig {
        ModelConfig {
            token_dim: 16,
            num_blocks: 1,
            num_heads: 2,
            fuse_dim: 8,
            hidden_dim: 8,
            motion_dim: 8,
            context_dim: 4,
            cnn_dim_half: 4,
            cnn_dim_quarter: 6,
            fusion_width: 8,
            corr_radius: 1,
            tap_layers: vec![0, 1],
            ..ModelConfig::toy()
        }
    }

    fn runner_inputs(
        t: usize,
        seed: u64,
    ) -> (Array4<f64>, Array4<f64>, Vec<FlowField>, Vec<(usize, usize)>) {
        let cfg = runner_config();
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let quarter =
            Array4::from_shape_fn((t, cfg.cnn_dim_quarter, 4, 4), |_| rng.random::<f64>() - 0.5);
        let fused = Array4::from_shape_fn((t, cfg.fuse_dim, 2, 2), |_| rng.random::<f64>() - 0.5);
        let flows = vec![FlowField::zeros(4, 4, 4); t - 1];
        let pairs: Vec<(usize, usize)> = (0..t - 1).map(|i| (i, i + 1)).collect();
        (quarter, fused, flows, pairs)
    }

    #[test]
    fn hidden_state_is_bounded_and_deterministic() {
        use crate::model::FlowModel;
        let cfg = runner_config();
        let model: FlowModel<f64> = FlowModel::new(cfg.clone(), 31).unwrap();
        let runner = model.refine_runner();
        let (quarter, fused, _, pairs) = runner_inputs(3, 32);
        let h = runner.init_hidden(&fused, &quarter, &pairs).unwrap();
        assert_eq!(h.shape(), &[2, cfg.hidden_dim, 4, 4]);
        assert!(h.iter().all(|&v| v.abs() <= 1.0), "tanh bound violated");
        let h2 = runner.init_hidden(&fused, &quarter, &pairs).unwrap();
        assert_eq!(h, h2);
        // identical frame pairs produce identical hidden states
        let mut q = quarter.clone();
        let q0 = q.index_axis(ndarray::Axis(0), 0).to_owned();
        let mut f = fused.clone();
        let f0 = f.index_axis(ndarray::Axis(0), 0).to_owned();
        for t in 1..3 {
            q.index_axis_mut(ndarray::Axis(0), t).assign(&q0);
            f.index_axis_mut(ndarray::Axis(0), t).assign(&f0);
        }
        let h3 = runner.init_hidden(&f, &q, &pairs).unwrap();
        assert_eq!(
            h3.index_axis(ndarray::Axis(0), 0),
            h3.index_axis(ndarray::Axis(0), 1)
        );
        // zero context with zero projection bias gives a zero hidden state
        let hz = runner
            .init_hidden(
                &Array4::zeros(fused.raw_dim()),
                &Array4::zeros(quarter.raw_dim()),
                &pairs,
            )
            .unwrap();
        assert!(hz.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn single_pair_step_runs_and_preserves_shapes() {
        use crate::model::FlowModel;
        let cfg = runner_config();
        let model: FlowModel<f64> = FlowModel::new(cfg.clone(), 33).unwrap();
        let runner = model.refine_runner();
        let (quarter, fused, flows, pairs) = runner_inputs(2, 34);
        let hidden = runner.init_hidden(&fused, &quarter, &pairs).unwrap();
        let (new_flows, new_hidden) = runner
            .refine_step(&flows, &hidden, &quarter, &fused, &pairs)
            .unwrap();
        assert_eq!(new_flows.len(), 1);
        assert_eq!(new_flows[0].height(), 4);
        assert_eq!(new_flows[0].stride(), 4);
        assert_eq!(new_hidden.shape(), hidden.shape());
        assert!(runner
            .refine_step(&flows, &hidden, &quarter, &fused, &[])
            .is_err());
    }

    #[test]
    fn temporal_attention_couples_pairs_exactly_when_enabled() {
        use crate::model::FlowModel;
        for (enabled, expect_coupled) in [(true, true), (false, false)] {
            let mut cfg = runner_config();
            cfg.temporal_attention = enabled;
            let model: FlowModel<f64> = FlowModel::new(cfg.clone(), 35).unwrap();
            let runner = model.refine_runner();
            let (quarter, fused, flows, pairs) = runner_inputs(3, 36);
            let hidden = runner.init_hidden(&fused, &quarter, &pairs).unwrap();
            let (base, _) = runner
                .refine_step(&flows, &hidden, &quarter, &fused, &pairs)
                .unwrap();
            // perturb pair 0's inputs only (its flow feeds its motion features)
            let mut flows_p = flows.clone();
            flows_p[0].vectors_mut()[[1, 1, 0]] += 0.5;
            let (perturbed, _) = runner
                .refine_step(&flows_p, &hidden, &quarter, &fused, &pairs)
                .unwrap();
            let diff_pair1: f64 = base[1]
                .vectors()
                .iter()
                .zip(perturbed[1].vectors().iter())
                .map(|(a, b)| (a - b).abs())
                .sum();
            if expect_coupled {
                assert!(
                    diff_pair1 > 1e-12,
                    "temporal attention on: pair 1 must react to pair 0"
                );
            } else {
                assert_eq!(diff_pair1, 0.0, "temporal attention off: pairs are independent");
            }
        }
    }

    #[test]
    fn one_iteration_refine_equals_one_step_plus_upsampling() {
        use crate::model::{FlowModel, ForwardOptions};
        use crate::types::ImageSequence;
        let cfg = runner_config();
        let model: FlowModel<f64> = FlowModel::new(cfg.clone(), 37).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(38);
        let seq = ImageSequence::new(Array4::from_shape_fn((2, 3, 16, 16), |_| rng.random::<f64>()))
            .unwrap();
        let out1 = model.infer(&seq, &ForwardOptions::new(1)).unwrap();
        let out3 = model.infer(&seq, &ForwardOptions::new(3)).unwrap();
        // the first iterate of a longer run equals the single-step run
        assert_eq!(out1.iterates[0], out3.iterates[0]);
        assert_eq!(out1.flows, out1.iterates[0]);
    }

    #[test]
    fn var_op_gradients_match_finite_differences() {
        use crate::autodiff::numgrad;
        let mut rng = ChaCha8Rng::seed_from_u64(29);
        let f1 = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random::<f64>() - 0.5).into_dyn();
        let f2 = Array4::from_shape_fn((1, 2, 4, 4), |_| rng.random::<f64>() - 0.5).into_dyn();
        // keep sampled coordinates off the integer lattice and inside borders
        let flow =
            Array4::from_shape_fn((1, 2, 4, 4), |_| 0.3 + rng.random::<f64>() * 0.4).into_dyn();
        let weights =
            Array4::from_shape_fn((1, 9, 4, 4), |_| rng.random::<f64>() - 0.5).into_dyn();

        let run = |a: &ArrayD<f64>, b: &ArrayD<f64>, fl: &ArrayD<f64>| -> f64 {
            let tape: Tape<f64> = Tape::new();
            let (va, vb, vf) = (tape.leaf(a.clone()), tape.leaf(b.clone()), tape.leaf(fl.clone()));
            local_correlation_var(va, vb, vf, 1)
                .mul_const(&weights)
                .sum_all()
                .scalar_value()
        };

        let tape: Tape<f64> = Tape::new();
        let (va, vb, vf) = (
            tape.leaf(f1.clone()),
            tape.leaf(f2.clone()),
            tape.leaf(flow.clone()),
        );
        let loss = local_correlation_var(va, vb, vf, 1)
            .mul_const(&weights)
            .sum_all();
        let grads = tape.backward(loss);

        let g1 = numgrad::central_diff(&mut |a| run(a, &f2, &flow), &f1, 1e-4);
        let g2 = numgrad::central_diff(&mut |b| run(&f1, b, &flow), &f2, 1e-4);
        let gf = numgrad::central_diff(&mut |fl| run(&f1, &f2, fl), &flow, 1e-4);
        assert!(numgrad::max_rel_error(&grads.wrt(va), &g1, 1e-2) < 1e-4);
        assert!(numgrad::max_rel_error(&grads.wrt(vb), &g2, 1e-2) < 1e-4);
        assert!(numgrad::max_rel_error(&grads.wrt(vf), &gf, 1e-2) < 1e-4);
    }
}

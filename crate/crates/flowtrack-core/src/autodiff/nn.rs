//! Fused neural-network operations: convolution, layer norm, bias,
//! pixel unshuffle, and fixed-grid bilinear resizing.

use super::{Tape, Var};
use crate::real::Real;
use ndarray::{Array1, Array2, ArrayD, Axis, Ix1, Ix4, IxDyn};

/// Flat gather table for an im2col patch matrix. `-1` marks zero padding.
fn im2col_indices(
    c_in: usize,
    h: usize,
    w: usize,
    kh: usize,
    kw: usize,
    stride: usize,
    pad: usize,
) -> (Vec<i64>, usize, usize) {
    let ho = (h + 2 * pad - kh) / stride + 1;
    let wo = (w + 2 * pad - kw) / stride + 1;
    let rows = c_in * kh * kw;
    let cols = ho * wo;
    let mut idx = vec![-1i64; rows * cols];
    for c in 0..c_in {
        for ki in 0..kh {
            for kj in 0..kw {
                let r = (c * kh + ki) * kw + kj;
                for oy in 0..ho {
                    let hi = (oy * stride + ki) as i64 - pad as i64;
                    for ox in 0..wo {
                        let wi = (ox * stride + kj) as i64 - pad as i64;
                        if hi >= 0 && hi < h as i64 && wi >= 0 && wi < w as i64 {
                            idx[r * cols + oy * wo + ox] =
                                (c * h * w) as i64 + hi * w as i64 + wi;
                        }
                    }
                }
            }
        }
    }
    (idx, ho, wo)
}

fn gather_cols<T: Real>(src: &[T], idx: &[i64], rows: usize, cols: usize) -> Array2<T> {
    let mut out = Array2::<T>::zeros((rows, cols));
    {
        let flat = out.as_slice_mut().unwrap();
        for (dst, &i) in flat.iter_mut().zip(idx.iter()) {
            if i >= 0 {
                *dst = src[i as usize];
            }
        }
    }
    out
}

fn scatter_cols<T: Real>(dst: &mut [T], cols_grad: &Array2<T>, idx: &[i64]) {
    let flat = cols_grad.as_slice().unwrap();
    for (&g, &i) in flat.iter().zip(idx.iter()) {
        if i >= 0 {
            dst[i as usize] += g;
        }
    }
}

/// 2-D convolution with zero padding: `(B, C, H, W) -> (B, O, Ho, Wo)`.
pub fn conv2d<'t, T: Real>(
    x: Var<'t, T>,
    weight: Var<'t, T>,
    bias: Var<'t, T>,
    stride: usize,
    pad: usize,
) -> Var<'t, T> {
    let tape: &'t Tape<T> = x.tape();
    let xv = x.value();
    let wv = weight.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().expect("conv2d x");
    let w4 = wv
        .view()
        .into_dimensionality::<Ix4>()
        .expect("conv2d weight");
    let (b, c_in, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let (c_out, wc, kh, kw) = (w4.shape()[0], w4.shape()[1], w4.shape()[2], w4.shape()[3]);
    assert_eq!(c_in, wc, "conv2d: channel mismatch");
    let (idx, ho, wo) = im2col_indices(c_in, h, w, kh, kw, stride, pad);
    let rows = c_in * kh * kw;
    let cols = ho * wo;
    let w2 = w4.to_shape((c_out, rows)).unwrap().to_owned();
    let bias1 = bias.value().into_dimensionality::<Ix1>().unwrap();

    let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c_out, ho, wo]));
    {
        let xs = x4.as_slice().unwrap();
        for bi in 0..b {
            let colmat = gather_cols(&xs[bi * c_in * h * w..(bi + 1) * c_in * h * w], &idx, rows, cols);
            let mut res = w2.dot(&colmat);
            for (mut row, &bv) in res.axis_iter_mut(Axis(0)).zip(bias1.iter()) {
                row.mapv_inplace(|v| v + bv);
            }
            out.index_axis_mut(Axis(0), bi).assign(
                &res.into_shape_with_order((c_out, ho, wo)).unwrap(),
            );
        }
    }

    tape.push(
        out,
        vec![x.index, weight.index, bias.index],
        Some(Box::new(move |args| {
            let xin = args.inputs[0].view().into_dimensionality::<Ix4>().unwrap();
            let win = args.inputs[1].view().into_dimensionality::<Ix4>().unwrap();
            let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
            let w2 = win.to_shape((c_out, rows)).unwrap().to_owned();
            let w2t = w2.t();
            let xs = xin.as_slice().unwrap();
            let mut dx = vec![T::zero(); b * c_in * h * w];
            let mut dw2 = Array2::<T>::zeros((c_out, rows));
            let mut db = Array1::<T>::zeros(c_out);
            for bi in 0..b {
                let g2 = g
                    .index_axis(Axis(0), bi)
                    .to_shape((c_out, cols))
                    .unwrap()
                    .to_owned();
                let colmat = gather_cols(
                    &xs[bi * c_in * h * w..(bi + 1) * c_in * h * w],
                    &idx,
                    rows,
                    cols,
                );
                dw2 += &g2.dot(&colmat.t());
                for (o, gr) in g2.axis_iter(Axis(0)).enumerate() {
                    db[o] += gr.iter().copied().sum::<T>();
                }
                let dcols = w2t.dot(&g2);
                scatter_cols(&mut dx[bi * c_in * h * w..(bi + 1) * c_in * h * w], &dcols, &idx);
            }
            vec![
                ArrayD::from_shape_vec(IxDyn(&[b, c_in, h, w]), dx).unwrap(),
                dw2.into_shape_with_order(IxDyn(&[c_out, c_in, kh, kw]))
                    .unwrap(),
                db.into_dyn(),
            ]
        })),
    )
}

/// Layer normalization over the last axis with learned gain and bias.
pub fn layer_norm<'t, T: Real>(
    x: Var<'t, T>,
    gain: Var<'t, T>,
    bias: Var<'t, T>,
    eps: f64,
) -> Var<'t, T> {
    let tape: &'t Tape<T> = x.tape();
    let xv = x.value();
    let shape = xv.shape().to_vec();
    let c = *shape.last().expect("layer_norm: rank >= 1");
    let rows = xv.len() / c;
    let eps_t = T::of_f64(eps);
    let gv = gain.value().into_dimensionality::<Ix1>().unwrap();
    let bv = bias.value().into_dimensionality::<Ix1>().unwrap();

    let normalize = move |input: &ArrayD<T>| -> (Array2<T>, Array1<T>) {
        let flat = input.view().into_shape_with_order((rows, c)).unwrap();
        let mut xhat = Array2::<T>::zeros((rows, c));
        let mut sigma = Array1::<T>::zeros(rows);
        for r in 0..rows {
            let row = flat.index_axis(Axis(0), r);
            let mu = row.iter().copied().sum::<T>() / T::of_f64(c as f64);
            let var = row
                .iter()
                .map(|&v| (v - mu) * (v - mu))
                .sum::<T>()
                / T::of_f64(c as f64);
            let s = (var + eps_t).sqrt();
            sigma[r] = s;
            let mut hrow = xhat.index_axis_mut(Axis(0), r);
            for (hv, &v) in hrow.iter_mut().zip(row.iter()) {
                *hv = (v - mu) / s;
            }
        }
        (xhat, sigma)
    };

    let (xhat, _) = normalize(&xv);
    let mut y = Array2::<T>::zeros((rows, c));
    for r in 0..rows {
        for j in 0..c {
            y[[r, j]] = gv[j] * xhat[[r, j]] + bv[j];
        }
    }
    let value = y.into_shape_with_order(IxDyn(&shape)).unwrap();

    tape.push(
        value,
        vec![x.index, gain.index, bias.index],
        Some(Box::new(move |args| {
            let (xhat, sigma) = normalize(args.inputs[0]);
            let gin = args.inputs[1].view().into_dimensionality::<Ix1>().unwrap();
            let g = args
                .grad
                .view()
                .into_shape_with_order((rows, c))
                .unwrap();
            let mut dx = Array2::<T>::zeros((rows, c));
            let mut dgain = Array1::<T>::zeros(c);
            let mut dbias = Array1::<T>::zeros(c);
            let cn = T::of_f64(c as f64);
            for r in 0..rows {
                let grow = g.index_axis(Axis(0), r);
                let hrow = xhat.index_axis(Axis(0), r);
                let mut mean_dxhat = T::zero();
                let mut mean_dxhat_xhat = T::zero();
                for j in 0..c {
                    let dxh = grow[j] * gin[j];
                    mean_dxhat += dxh;
                    mean_dxhat_xhat += dxh * hrow[j];
                    dgain[j] += grow[j] * hrow[j];
                    dbias[j] += grow[j];
                }
                mean_dxhat /= cn;
                mean_dxhat_xhat /= cn;
                let inv_s = T::one() / sigma[r];
                for j in 0..c {
                    let dxh = grow[j] * gin[j];
                    dx[[r, j]] = (dxh - mean_dxhat - hrow[j] * mean_dxhat_xhat) * inv_s;
                }
            }
            let in_shape = args.inputs[0].shape().to_vec();
            vec![
                dx.into_shape_with_order(IxDyn(&in_shape)).unwrap(),
                dgain.into_dyn(),
                dbias.into_dyn(),
            ]
        })),
    )
}

/// Add a per-channel bias broadcast along `channel_axis`.
pub fn add_bias<'t, T: Real>(x: Var<'t, T>, bias: Var<'t, T>, channel_axis: usize) -> Var<'t, T> {
    let tape: &'t Tape<T> = x.tape();
    let mut value = x.value();
    let bv = bias.value().into_dimensionality::<Ix1>().unwrap();
    assert_eq!(value.shape()[channel_axis], bv.len(), "add_bias: size");
    for (i, mut lane) in value.axis_iter_mut(Axis(channel_axis)).enumerate() {
        let b = bv[i];
        lane.mapv_inplace(|v| v + b);
    }
    tape.push(
        value,
        vec![x.index, bias.index],
        Some(Box::new(move |args| {
            let g = args.grad;
            let n = g.shape()[channel_axis];
            let mut db = Array1::<T>::zeros(n);
            for (i, lane) in g.axis_iter(Axis(channel_axis)).enumerate() {
                db[i] = lane.iter().copied().sum();
            }
            vec![g.clone(), db.into_dyn()]
        })),
    )
}

/// Rearrange each `f x f` spatial block into channels:
/// `(B, C, H, W) -> (B, C*f^2, H/f, W/f)` with the block offset packed as
/// `c*f^2 + dy*f + dx`.
pub fn pixel_unshuffle<'t, T: Real>(x: Var<'t, T>, factor: usize) -> Var<'t, T> {
    let tape: &'t Tape<T> = x.tape();
    let xv = x.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    assert!(
        factor >= 1 && h % factor == 0 && w % factor == 0,
        "pixel_unshuffle: {h}x{w} not divisible by {factor}"
    );
    let (ho, wo) = (h / factor, w / factor);
    let mut out = ArrayD::<T>::zeros(IxDyn(&[b, c * factor * factor, ho, wo]));
    for bi in 0..b {
        for ci in 0..c {
            for dy in 0..factor {
                for dx in 0..factor {
                    let co = ci * factor * factor + dy * factor + dx;
                    for oy in 0..ho {
                        for ox in 0..wo {
                            out[[bi, co, oy, ox]] =
                                x4[[bi, ci, oy * factor + dy, ox * factor + dx]];
                        }
                    }
                }
            }
        }
    }
    tape.push(
        out,
        vec![x.index],
        Some(Box::new(move |args| {
            let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<T>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for dy in 0..factor {
                        for dx_ in 0..factor {
                            let co = ci * factor * factor + dy * factor + dx_;
                            for oy in 0..ho {
                                for ox in 0..wo {
                                    dx[[bi, ci, oy * factor + dy, ox * factor + dx_]] =
                                        g[[bi, co, oy, ox]];
                                }
                            }
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        })),
    )
}

/// Precomputed 1-D bilinear taps under the half-pixel-center convention.
pub(crate) fn resize_taps(src: usize, dst: usize) -> Vec<(usize, usize, f64)> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let pos = ((d as f64 + 0.5) * scale - 0.5).clamp(0.0, (src - 1) as f64);
            let lo = pos.floor() as usize;
            let hi = (lo + 1).min(src - 1);
            (lo, hi, pos - lo as f64)
        })
        .collect()
}

/// Bilinear spatial resize of `(B, C, H, W)` to `(B, C, out_h, out_w)`,
/// sampling at half-pixel-aligned cell centers with border clamping.
pub fn bilinear_resize<'t, T: Real>(x: Var<'t, T>, out_h: usize, out_w: usize) -> Var<'t, T> {
    let tape: &'t Tape<T> = x.tape();
    let xv = x.value();
    let x4 = xv.view().into_dimensionality::<Ix4>().unwrap();
    let (b, c, h, w) = (x4.shape()[0], x4.shape()[1], x4.shape()[2], x4.shape()[3]);
    let ytaps = resize_taps(h, out_h);
    let xtaps = resize_taps(w, out_w);
    let mut out = ndarray::Array4::<T>::zeros((b, c, out_h, out_w));
    for bi in 0..b {
        for ci in 0..c {
            for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
                for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
                    let fy = T::of_f64(fy);
                    let fx = T::of_f64(fx);
                    let v00 = x4[[bi, ci, y0, x0]];
                    let v01 = x4[[bi, ci, y0, x1]];
                    let v10 = x4[[bi, ci, y1, x0]];
                    let v11 = x4[[bi, ci, y1, x1]];
                    let top = v00 + (v01 - v00) * fx;
                    let bot = v10 + (v11 - v10) * fx;
                    out[[bi, ci, oy, ox]] = top + (bot - top) * fy;
                }
            }
        }
    }
    let ytaps_b = ytaps.clone();
    let xtaps_b = xtaps.clone();
    tape.push(
        out.into_dyn(),
        vec![x.index],
        Some(Box::new(move |args| {
            let g = args.grad.view().into_dimensionality::<Ix4>().unwrap();
            let mut dx = ndarray::Array4::<T>::zeros((b, c, h, w));
            for bi in 0..b {
                for ci in 0..c {
                    for (oy, &(y0, y1, fy)) in ytaps_b.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in xtaps_b.iter().enumerate() {
                            let gv = g[[bi, ci, oy, ox]];
                            let fy = T::of_f64(fy);
                            let fx = T::of_f64(fx);
                            dx[[bi, ci, y0, x0]] += gv * (T::one() - fy) * (T::one() - fx);
                            dx[[bi, ci, y0, x1]] += gv * (T::one() - fy) * fx;
                            dx[[bi, ci, y1, x0]] += gv * fy * (T::one() - fx);
                            dx[[bi, ci, y1, x1]] += gv * fy * fx;
                        }
                    }
                }
            }
            vec![dx.into_dyn()]
        })),
    )
}

//! Differentiable bilinear sampling and flow-field rescaling.
//!
//! Out-of-range coordinates clamp to the border; this preserves correlation
//! magnitude near image edges and is fixed across the whole crate.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::FlowField;
use ndarray::{Array2, Array3, ArrayD, Ix2, Ix3};

/// Bilinear taps of one clamped 2-D coordinate.
#[derive(Clone, Copy)]
pub(crate) struct Taps<T> {
    pub x0: usize,
    pub x1: usize,
    pub y0: usize,
    pub y1: usize,
    pub fx: T,
    pub fy: T,
    /// Whether x (resp. y) lies strictly inside the border, so gradients
    /// with respect to the coordinate pass through the clamp.
    pub open_x: bool,
    pub open_y: bool,
}

pub(crate) fn taps<T: Real>(x: T, y: T, width: usize, height: usize) -> Taps<T> {
    let max_x = T::of_f64((width - 1) as f64);
    let max_y = T::of_f64((height - 1) as f64);
    let cx = x.max(T::zero()).min(max_x);
    let cy = y.max(T::zero()).min(max_y);
    let x0 = cx.floor().as_f64() as usize;
    let y0 = cy.floor().as_f64() as usize;
    let x1 = (x0 + 1).min(width - 1);
    let y1 = (y0 + 1).min(height - 1);
    Taps {
        x0,
        x1,
        y0,
        y1,
        fx: cx - T::of_f64(x0 as f64),
        fy: cy - T::of_f64(y0 as f64),
        open_x: x > T::zero() && x < max_x,
        open_y: y > T::zero() && y < max_y,
    }
}

#[inline]
fn blend<T: Real>(t: &Taps<T>, f: impl Fn(usize, usize) -> T) -> T {
    let top = f(t.y0, t.x0) + (f(t.y0, t.x1) - f(t.y0, t.x0)) * t.fx;
    let bot = f(t.y1, t.x0) + (f(t.y1, t.x1) - f(t.y1, t.x0)) * t.fx;
    top + (bot - top) * t.fy
}

/// Sample a `(C, H, W)` field at N `(x, y)` coordinates, bilinearly blending
/// the four surrounding cells and clamping out-of-range coordinates to the
/// border. Returns `(N, C)`.
pub fn bilinear_sample(field: &Array3<f64>, points: &Array2<f64>) -> Result<Array2<f64>> {
    if points.shape()[1] != 2 {
        return Err(Error::shape("bilinear_sample points", "(N, 2)", format!("{:?}", points.shape())));
    }
    if !field.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("bilinear_sample field"));
    }
    if !points.iter().all(|v| v.is_finite()) {
        return Err(Error::NonFinite("bilinear_sample points"));
    }
    let (c, h, w) = (field.shape()[0], field.shape()[1], field.shape()[2]);
    let n = points.shape()[0];
    let mut out = Array2::zeros((n, c));
    for p in 0..n {
        let t = taps(points[[p, 0]], points[[p, 1]], w, h);
        for ch in 0..c {
            out[[p, ch]] = blend(&t, |y, x| field[[ch, y, x]]);
        }
    }
    Ok(out)
}

/// Differentiable sampling with gradients to the field only; the sample
/// coordinates are fixed.
pub fn sample_fixed<'t, T: Real>(field: Var<'t, T>, points: &Array2<f64>) -> Var<'t, T> {
    let tape: &'t Tape<T> = field.tape();
    let fv = field.value();
    let f3 = fv.view().into_dimensionality::<Ix3>().expect("sample field");
    let (c, h, w) = (f3.shape()[0], f3.shape()[1], f3.shape()[2]);
    let n = points.shape()[0];
    let pts: Vec<Taps<T>> = (0..n)
        .map(|p| {
            taps(
                T::of_f64(points[[p, 0]]),
                T::of_f64(points[[p, 1]]),
                w,
                h,
            )
        })
        .collect();
    let mut out = Array2::<T>::zeros((n, c));
    for (p, t) in pts.iter().enumerate() {
        for ch in 0..c {
            out[[p, ch]] = blend(t, |y, x| f3[[ch, y, x]]);
        }
    }
    tape.push(
        out.into_dyn(),
        vec![field.index],
        Some(Box::new(move |args| {
            let g = args.grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut df = Array3::<T>::zeros((c, h, w));
            for (p, t) in pts.iter().enumerate() {
                let (fx, fy) = (t.fx, t.fy);
                for ch in 0..c {
                    let gv = g[[p, ch]];
                    df[[ch, t.y0, t.x0]] += gv * (T::one() - fy) * (T::one() - fx);
                    df[[ch, t.y0, t.x1]] += gv * (T::one() - fy) * fx;
                    df[[ch, t.y1, t.x0]] += gv * fy * (T::one() - fx);
                    df[[ch, t.y1, t.x1]] += gv * fy * fx;
                }
            }
            vec![df.into_dyn()]
        })),
    )
}

/// Differentiable sampling with gradients to both the field and the
/// `(N, 2)` coordinates. The coordinate gradient is zero where the clamp
/// is active and one-sided exactly on the integer lattice.
pub fn sample_points<'t, T: Real>(field: Var<'t, T>, points: Var<'t, T>) -> Var<'t, T> {
    let tape: &'t Tape<T> = field.tape();
    let fv = field.value();
    let pv = points.value();
    let f3 = fv.view().into_dimensionality::<Ix3>().expect("sample field");
    let p2 = pv.view().into_dimensionality::<Ix2>().expect("sample points");
    let (c, h, w) = (f3.shape()[0], f3.shape()[1], f3.shape()[2]);
    let n = p2.shape()[0];
    let mut out = Array2::<T>::zeros((n, c));
    for p in 0..n {
        let t = taps(p2[[p, 0]], p2[[p, 1]], w, h);
        for ch in 0..c {
            out[[p, ch]] = blend(&t, |y, x| f3[[ch, y, x]]);
        }
    }
    tape.push(
        out.into_dyn(),
        vec![field.index, points.index],
        Some(Box::new(move |args| {
            let f = args.inputs[0].view().into_dimensionality::<Ix3>().unwrap();
            let p = args.inputs[1].view().into_dimensionality::<Ix2>().unwrap();
            let g = args.grad.view().into_dimensionality::<Ix2>().unwrap();
            let mut df = Array3::<T>::zeros((c, h, w));
            let mut dp = Array2::<T>::zeros((n, 2));
            for pi in 0..n {
                let t = taps(p[[pi, 0]], p[[pi, 1]], w, h);
                let (fx, fy) = (t.fx, t.fy);
                for ch in 0..c {
                    let gv = g[[pi, ch]];
                    if gv == T::zero() {
                        continue;
                    }
                    let f00 = f[[ch, t.y0, t.x0]];
                    let f01 = f[[ch, t.y0, t.x1]];
                    let f10 = f[[ch, t.y1, t.x0]];
                    let f11 = f[[ch, t.y1, t.x1]];
                    df[[ch, t.y0, t.x0]] += gv * (T::one() - fy) * (T::one() - fx);
                    df[[ch, t.y0, t.x1]] += gv * (T::one() - fy) * fx;
                    df[[ch, t.y1, t.x0]] += gv * fy * (T::one() - fx);
                    df[[ch, t.y1, t.x1]] += gv * fy * fx;
                    if t.open_x {
                        dp[[pi, 0]] +=
                            gv * ((f01 - f00) * (T::one() - fy) + (f11 - f10) * fy);
                    }
                    if t.open_y {
                        dp[[pi, 1]] +=
                            gv * ((f10 - f00) * (T::one() - fx) + (f11 - f01) * fx);
                    }
                }
            }
            vec![df.into_dyn(), dp.into_dyn()]
        })),
    )
}

fn resample(flow: &FlowField, target_stride: u32) -> FlowField {
    let (h, w) = (flow.height(), flow.width());
    let ratio = flow.stride() as f64 / target_stride as f64;
    let out_h = (h as f64 * ratio).round() as usize;
    let out_w = (w as f64 * ratio).round() as usize;
    let ytaps = crate::autodiff::resize_taps(h, out_h);
    let xtaps = crate::autodiff::resize_taps(w, out_w);
    let src = flow.vectors();
    let mut out = Array3::zeros((out_h, out_w, 2));
    for (oy, &(y0, y1, fy)) in ytaps.iter().enumerate() {
        for (ox, &(x0, x1, fx)) in xtaps.iter().enumerate() {
            for ch in 0..2 {
                let top = src[[y0, x0, ch]] + (src[[y0, x1, ch]] - src[[y0, x0, ch]]) * fx;
                let bot = src[[y1, x0, ch]] + (src[[y1, x1, ch]] - src[[y1, x0, ch]]) * fx;
                out[[oy, ox, ch]] = (top + (bot - top) * fy) * ratio;
            }
        }
    }
    FlowField::new(out, target_stride).expect("resampled flow is finite")
}

/// Bilinearly upsample a flow field to a finer stride, scaling vector
/// magnitudes by the stride ratio so displacements stay physically equal.
pub fn upsample_flow(flow: &FlowField, target_stride: u32) -> Result<FlowField> {
    let s = flow.stride();
    if target_stride == 0 || s % target_stride != 0 {
        return Err(Error::InvalidArgument(format!(
            "target stride {target_stride} must divide source stride {s}"
        )));
    }
    Ok(resample(flow, target_stride))
}

/// Bilinearly downsample a flow field to a coarser stride (used to seed
/// refinement from a previous window's full-resolution prediction).
pub fn downsample_flow(flow: &FlowField, target_stride: u32) -> Result<FlowField> {
    let s = flow.stride();
    if target_stride < s || target_stride % s != 0 {
        return Err(Error::InvalidArgument(format!(
            "target stride {target_stride} must be a multiple of source stride {s}"
        )));
    }
    Ok(resample(flow, target_stride))
}

/// Differentiable counterpart of [`upsample_flow`] on a `(P, 2, H, W)`
/// stack of flow fields.
pub fn upsample_flow_var<'t, T: Real>(
    flows: Var<'t, T>,
    from_stride: u32,
    to_stride: u32,
) -> Var<'t, T> {
    assert!(to_stride > 0 && from_stride % to_stride == 0);
    let shape = flows.shape();
    let ratio = from_stride as f64 / to_stride as f64;
    let out_h = (shape[2] as f64 * ratio).round() as usize;
    let out_w = (shape[3] as f64 * ratio).round() as usize;
    crate::autodiff::bilinear_resize(flows, out_h, out_w).scale(ratio)
}

/// Convert an `(N, C)` sampling result to a plain array, used by
/// inference-side callers.
pub fn to_array2<T: Real>(sampled: &ArrayD<T>) -> Array2<f64> {
    let v = sampled.view().into_dimensionality::<Ix2>().unwrap();
    Array2::from_shape_fn((v.shape()[0], v.shape()[1]), |(i, j)| v[[i, j]].as_f64())
}

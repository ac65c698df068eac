//! Flow visualization: the 55-bin Middlebury color wheel (hue encodes
//! direction, saturation encodes magnitude, zero flow is white) and a
//! monotone error heatmap.

use crate::error::Result;
use crate::metrics;
use crate::types::FlowField;
use ndarray::{Array2, Array3};
use serde::Serialize;

/// The standard wheel: six hue arcs with 15/6/4/11/13/6 bins
/// (RY, YG, GC, CB, BM, MR), each arc linearly ramping one RGB channel.
fn colorwheel() -> Vec<[f64; 3]> {
    const ARCS: [(usize, [f64; 3], [f64; 3]); 6] = [
        (15, [1.0, 0.0, 0.0], [1.0, 1.0, 0.0]), // red -> yellow
        (6, [1.0, 1.0, 0.0], [0.0, 1.0, 0.0]),  // yellow -> green
        (4, [0.0, 1.0, 0.0], [0.0, 1.0, 1.0]),  // green -> cyan
        (11, [0.0, 1.0, 1.0], [0.0, 0.0, 1.0]), // cyan -> blue
        (13, [0.0, 0.0, 1.0], [1.0, 0.0, 1.0]), // blue -> magenta
        (6, [1.0, 0.0, 1.0], [1.0, 0.0, 0.0]),  // magenta -> red
    ];
    let mut wheel = Vec::with_capacity(55);
    for (bins, from, to) in ARCS {
        for i in 0..bins {
            let t = i as f64 / bins as f64;
            wheel.push([
                from[0] + (to[0] - from[0]) * t,
                from[1] + (to[1] - from[1]) * t,
                from[2] + (to[2] - from[2]) * t,
            ]);
        }
    }
    wheel
}

/// Render a flow field to RGB: direction picks the wheel hue, magnitude
/// relative to `max_magnitude` (default: the field's own maximum) sets the
/// saturation. Zero flow renders white; magnitudes beyond the maximum
/// darken. Deterministic for identical inputs.
pub fn flow_to_color(flow: &FlowField, max_magnitude: Option<f64>) -> Array3<u8> {
    let wheel = colorwheel();
    let ncols = wheel.len() as f64;
    let (h, w) = (flow.height(), flow.width());
    let max_rad = max_magnitude.unwrap_or_else(|| {
        let mut m = 0.0f64;
        for y in 0..h {
            for x in 0..w {
                let dx = flow.vectors()[[y, x, 0]];
                let dy = flow.vectors()[[y, x, 1]];
                m = m.max((dx * dx + dy * dy).sqrt());
            }
        }
        m
    });
    let max_rad = max_rad.max(1e-12);
    let mut out = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let dx = flow.vectors()[[y, x, 0]];
            let dy = flow.vectors()[[y, x, 1]];
            let rad = (dx * dx + dy * dy).sqrt() / max_rad;
            let angle = (-dy).atan2(-dx) / std::f64::consts::PI; // [-1, 1]
            let fk = (angle + 1.0) / 2.0 * (ncols - 1.0);
            let k0 = fk.floor() as usize % wheel.len();
            let k1 = (k0 + 1) % wheel.len();
            let f = fk - fk.floor();
            for c in 0..3 {
                let col = wheel[k0][c] + (wheel[k1][c] - wheel[k0][c]) * f;
                let v = if rad <= 1.0 {
                    1.0 - rad * (1.0 - col) // toward white at zero magnitude
                } else {
                    col * 0.75 // out of range: darken
                };
                out[[y, x, c]] = (v.clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    out
}

/// Legend parameters of an error heatmap, written as a sidecar next to the
/// rendered image.
#[derive(Debug, Clone, Serialize)]
pub struct HeatmapMeta {
    pub max_error: f64,
    pub colormap: &'static str,
    pub stops: Vec<(f64, [f64; 3])>,
}

/// Monotone four-stop ramp from black through purple and orange to white.
const HEAT_STOPS: [(f64, [f64; 3]); 4] = [
    (0.0, [0.0, 0.0, 0.0]),
    (1.0 / 3.0, [0.45, 0.0, 0.55]),
    (2.0 / 3.0, [1.0, 0.55, 0.1]),
    (1.0, [1.0, 1.0, 1.0]),
];

/// Normalized colormap position of an error value; strictly increasing in
/// the error until saturation at `max_error`.
pub fn colormap_position(error: f64, max_error: f64) -> f64 {
    (error / max_error.max(1e-12)).clamp(0.0, 1.0)
}

fn heat_rgb(t: f64) -> [f64; 3] {
    let mut rgb = HEAT_STOPS[3].1;
    for w in HEAT_STOPS.windows(2) {
        let (t0, c0) = w[0];
        let (t1, c1) = w[1];
        if t <= t1 {
            let f = ((t - t0) / (t1 - t0)).clamp(0.0, 1.0);
            rgb = [
                c0[0] + (c1[0] - c0[0]) * f,
                c0[1] + (c1[1] - c0[1]) * f,
                c0[2] + (c1[2] - c0[2]) * f,
            ];
            break;
        }
    }
    rgb
}

/// Render per-pixel end-point error between two flow fields. Returns the
/// image, the raw EPE map (identical to the metrics module's), and the
/// legend metadata.
pub fn error_heatmap(
    pred: &FlowField,
    gt: &FlowField,
    max_error: Option<f64>,
) -> Result<(Array3<u8>, Array2<f64>, HeatmapMeta)> {
    let (_, map) = metrics::epe(pred, gt, None)?;
    let max_err = max_error
        .unwrap_or_else(|| map.iter().copied().fold(0.0, f64::max))
        .max(1e-12);
    let (h, w) = (map.shape()[0], map.shape()[1]);
    let mut image = Array3::zeros((h, w, 3));
    for y in 0..h {
        for x in 0..w {
            let rgb = heat_rgb(colormap_position(map[[y, x]], max_err));
            for c in 0..3 {
                image[[y, x, c]] = (rgb[c].clamp(0.0, 1.0) * 255.0).round() as u8;
            }
        }
    }
    Ok((
        image,
        map,
        HeatmapMeta {
            max_error: max_err,
            colormap: "black-purple-orange-white",
            stops: HEAT_STOPS.to_vec(),
        },
    ))
}

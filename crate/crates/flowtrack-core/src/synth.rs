//! Synthetic sequences with exact ground truth: procedural multi-octave
//! value-noise textures warped by parametric translation / affine /
//! homography schedules. Every flow field, anchored flow field, and track
//! is the analytic displacement of the composed warp, exact to float
//! precision.

use crate::error::{Error, Result};
use crate::tracking::TrackSet;
use crate::types::{FlowField, ImageSequence};
use ndarray::{Array2, Array3, Array4};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// One inter-frame warp. Frame t+1 sees the scene of frame t moved by this
/// map (forward map on scene points).
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum StepWarp {
    Translation { dx: f64, dy: f64 },
    /// `x' = m * x + t`, row-major 2x2 matrix.
    Affine { m: [[f64; 2]; 2], t: [f64; 2] },
    /// Row-major 3x3 homography acting on homogeneous `(x, y, 1)`.
    Homography { h: [[f64; 3]; 3] },
}

impl StepWarp {
    fn matrix(&self) -> Mat3 {
        match *self {
            StepWarp::Translation { dx, dy } => {
                Mat3([[1.0, 0.0, dx], [0.0, 1.0, dy], [0.0, 0.0, 1.0]])
            }
            StepWarp::Affine { m, t } => Mat3([
                [m[0][0], m[0][1], t[0]],
                [m[1][0], m[1][1], t[1]],
                [0.0, 0.0, 1.0],
            ]),
            StepWarp::Homography { h } => Mat3(h),
        }
    }
}

/// Row-major 3x3 matrix with homogeneous application.
#[derive(Debug, Clone, Copy, PartialEq)]
pub(crate) struct Mat3(pub [[f64; 3]; 3]);

impl Mat3 {
    pub fn identity() -> Self {
        Mat3([[1.0, 0.0, 0.0], [0.0, 1.0, 0.0], [0.0, 0.0, 1.0]])
    }

    pub fn mul(&self, rhs: &Mat3) -> Mat3 {
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                out[i][j] = (0..3).map(|k| self.0[i][k] * rhs.0[k][j]).sum();
            }
        }
        Mat3(out)
    }

    pub fn det(&self) -> f64 {
        let m = &self.0;
        m[0][0] * (m[1][1] * m[2][2] - m[1][2] * m[2][1])
            - m[0][1] * (m[1][0] * m[2][2] - m[1][2] * m[2][0])
            + m[0][2] * (m[1][0] * m[2][1] - m[1][1] * m[2][0])
    }

    pub fn inverse(&self) -> Option<Mat3> {
        let d = self.det();
        if d.abs() < 1e-12 {
            return None;
        }
        let m = &self.0;
        let inv_d = 1.0 / d;
        let mut out = [[0.0; 3]; 3];
        for i in 0..3 {
            for j in 0..3 {
                let (a, b, c, e) = (
                    m[(j + 1) % 3][(i + 1) % 3],
                    m[(j + 1) % 3][(i + 2) % 3],
                    m[(j + 2) % 3][(i + 1) % 3],
                    m[(j + 2) % 3][(i + 2) % 3],
                );
                out[i][j] = (a * e - b * c) * inv_d;
            }
        }
        Some(Mat3(out))
    }

    /// Apply to a point; `None` when the perspective denominator vanishes.
    pub fn apply(&self, x: f64, y: f64) -> Option<(f64, f64)> {
        let m = &self.0;
        let w = m[2][0] * x + m[2][1] * y + m[2][2];
        if w.abs() < 1e-9 {
            return None;
        }
        Some((
            (m[0][0] * x + m[0][1] * y + m[0][2]) / w,
            (m[1][0] * x + m[1][1] * y + m[1][2]) / w,
        ))
    }
}

/// Parametric warp schedule over a sequence, with a displacement cap the
/// generated ground truth must respect at every pixel.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WarpSpec {
    pub steps: Vec<StepWarp>,
    /// Cap on the L2 norm of any ground-truth displacement (consecutive
    /// and anchored), in pixels.
    pub max_displacement: f64,
}

impl WarpSpec {
    pub fn translation(t: usize, dx: f64, dy: f64, cap: f64) -> Self {
        WarpSpec {
            steps: vec![StepWarp::Translation { dx, dy }; t - 1],
            max_displacement: cap,
        }
    }

    pub fn frames(&self) -> usize {
        self.steps.len() + 1
    }

    /// Cumulative scene maps `phi_t` from frame-0 coordinates, `t = 0..T`.
    pub(crate) fn cumulative(&self) -> Vec<Mat3> {
        let mut out = vec![Mat3::identity()];
        for step in &self.steps {
            let prev = *out.last().unwrap();
            out.push(step.matrix().mul(&prev));
        }
        out
    }

    /// Reject non-invertible warps and displacement-cap violations over an
    /// `height x width` pixel domain.
    pub fn validate(&self, height: usize, width: usize) -> Result<()> {
        if self.steps.is_empty() {
            return Err(Error::InvalidArgument("warp needs at least one step".into()));
        }
        if !(self.max_displacement > 0.0) {
            return Err(Error::InvalidArgument(
                "displacement cap must be positive".into(),
            ));
        }
        let cum = self.cumulative();
        for (t, m) in cum.iter().enumerate() {
            let inv = m
                .inverse()
                .ok_or_else(|| Error::InvalidArgument(format!("warp at frame {t} is singular")))?;
            // perspective denominators must stay positive over the domain
            for &(x, y) in &domain_corners(height, width) {
                for mat in [m, &inv] {
                    if mat.apply(x, y).is_none() {
                        return Err(Error::InvalidArgument(format!(
                            "warp at frame {t} degenerates on the image domain"
                        )));
                    }
                }
            }
        }
        let max = self.max_domain_displacement(height, width)?;
        if max > self.max_displacement + 1e-9 {
            return Err(Error::InvalidArgument(format!(
                "ground-truth displacement {max:.3} px exceeds the cap {}",
                self.max_displacement
            )));
        }
        Ok(())
    }

    /// Largest ground-truth displacement (consecutive or anchored) over
    /// the pixel grid.
    pub fn max_domain_displacement(&self, height: usize, width: usize) -> Result<f64> {
        let cum = self.cumulative();
        let mut max = 0.0f64;
        for t in 0..self.steps.len() {
            let inv_t = cum[t].inverse().unwrap();
            let step = cum[t + 1].mul(&inv_t);
            for y in 0..height {
                for x in 0..width {
                    let (xf, yf) = (x as f64, y as f64);
                    let (cx, cy) = step.apply(xf, yf).ok_or_else(|| {
                        Error::InvalidArgument("degenerate warp on domain".into())
                    })?;
                    max = max.max(((cx - xf).powi(2) + (cy - yf).powi(2)).sqrt());
                    let (ax, ay) = cum[t + 1].apply(xf, yf).ok_or_else(|| {
                        Error::InvalidArgument("degenerate warp on domain".into())
                    })?;
                    max = max.max(((ax - xf).powi(2) + (ay - yf).powi(2)).sqrt());
                }
            }
        }
        Ok(max)
    }
}

/// One rendered sequence with exact analytic supervision.
#[derive(Debug, Clone)]
pub struct Sample {
    pub sequence: ImageSequence,
    /// Consecutive flows `f_t` for `t = 0..T-1`, stride 1.
    pub gt_flows: Vec<FlowField>,
    /// Pixels whose match stays inside both frames.
    pub gt_valid: Vec<Array2<bool>>,
    /// Anchored flows `f_{0->t}` for targets `t = 1..T-1`, stride 1.
    pub gt_anchor_flows: Vec<FlowField>,
    pub gt_anchor_valid: Vec<Array2<bool>>,
    /// Query-grid trajectories under the same analytic maps.
    pub gt_tracks: TrackSet,
}

/// Deterministic multi-octave value noise in `[0, 1]`, three channels.
pub fn generate_texture(seed: u64, height: usize, width: usize) -> Array3<f64> {
    let octaves = 4usize;
    let mut out = Array3::zeros((3, height, width));
    let norm: f64 = (0..octaves).map(|o| 0.6f64.powi(o as i32)).sum();
    for ch in 0..3 {
        for o in 0..octaves {
            // coarsest lattice at size/4 keeps enough independent degrees
            // of freedom that textures from different seeds decorrelate
            let cell = ((height.min(width) as f64) / 2f64.powi(o as i32 + 2))
                .max(1.0)
                .round() as usize;
            let (gh, gw) = (height.div_ceil(cell) + 1, width.div_ceil(cell) + 1);
            let mut rng =
                ChaCha8Rng::seed_from_u64(seed ^ (ch as u64).wrapping_mul(0x9e3779b97f4a7c15)
                    ^ (o as u64).wrapping_mul(0xd1b54a32d192ed03));
            let lattice = Array2::from_shape_fn((gh, gw), |_| rng.random::<f64>());
            let amp = 0.6f64.powi(o as i32) / norm;
            for y in 0..height {
                for x in 0..width {
                    let fy = y as f64 / cell as f64;
                    let fx = x as f64 / cell as f64;
                    let (y0, x0) = (fy.floor() as usize, fx.floor() as usize);
                    let (ty, tx) = (fy - y0 as f64, fx - x0 as f64);
                    // smoothstep fade keeps the noise band-limited
                    let (sy, sx) = (ty * ty * (3.0 - 2.0 * ty), tx * tx * (3.0 - 2.0 * tx));
                    let v00 = lattice[[y0, x0]];
                    let v01 = lattice[[y0, x0 + 1]];
                    let v10 = lattice[[y0 + 1, x0]];
                    let v11 = lattice[[y0 + 1, x0 + 1]];
                    let top = v00 + (v01 - v00) * sx;
                    let bot = v10 + (v11 - v10) * sx;
                    out[[ch, y, x]] += amp * (top + (bot - top) * sy);
                }
            }
        }
    }
    out.mapv_inplace(|v: f64| v.clamp(0.0, 1.0));
    out
}

fn domain_corners(height: usize, width: usize) -> Vec<(f64, f64)> {
    let (h, w) = ((height - 1) as f64, (width - 1) as f64);
    vec![(0.0, 0.0), (w, 0.0), (0.0, h), (w, h)]
}

fn inside(x: f64, y: f64, height: usize, width: usize) -> bool {
    x >= 0.0 && x <= (width - 1) as f64 && y >= 0.0 && y <= (height - 1) as f64
}

/// Render a sequence and its exact ground truth. Frame t is the pull-back
/// of frame 0 through the composed warp; photometry is perfect unless
/// `noise_std`/`brightness_jitter` are set.
pub fn render_sequence(
    spec: &WarpSpec,
    seed: u64,
    height: usize,
    width: usize,
    query_step: usize,
    noise_std: f64,
    brightness_jitter: f64,
) -> Result<Sample> {
    spec.validate(height, width)?;
    let t_total = spec.frames();
    let cum = spec.cumulative();
    let inverses: Vec<Mat3> = cum.iter().map(|m| m.inverse().unwrap()).collect();
    let base = generate_texture(seed, height, width);

    let mut frames = Array4::zeros((t_total, 3, height, width));
    let mut jitter_rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(0x5851f42d4c957f2d));
    for t in 0..t_total {
        let gain = if brightness_jitter > 0.0 {
            1.0 + brightness_jitter * (jitter_rng.random::<f64>() * 2.0 - 1.0)
        } else {
            1.0
        };
        for y in 0..height {
            for x in 0..width {
                let (sx, sy) = inverses[t]
                    .apply(x as f64, y as f64)
                    .ok_or_else(|| Error::InvalidArgument("degenerate warp".into()))?;
                let cx = sx.clamp(0.0, (width - 1) as f64);
                let cy = sy.clamp(0.0, (height - 1) as f64);
                let (x0, y0) = (cx.floor() as usize, cy.floor() as usize);
                let (x1, y1) = ((x0 + 1).min(width - 1), (y0 + 1).min(height - 1));
                let (fx, fy) = (cx - x0 as f64, cy - y0 as f64);
                for ch in 0..3 {
                    let top = base[[ch, y0, x0]] + (base[[ch, y0, x1]] - base[[ch, y0, x0]]) * fx;
                    let bot = base[[ch, y1, x0]] + (base[[ch, y1, x1]] - base[[ch, y1, x0]]) * fx;
                    let mut v = (top + (bot - top) * fy) * gain;
                    if noise_std > 0.0 {
                        let u1: f64 = jitter_rng.random::<f64>().max(1e-12);
                        let u2: f64 = jitter_rng.random::<f64>();
                        v += noise_std
                            * (-2.0 * u1.ln()).sqrt()
                            * (2.0 * std::f64::consts::PI * u2).cos();
                    }
                    frames[[t, ch, y, x]] = v.clamp(0.0, 1.0);
                }
            }
        }
    }

    let mut gt_flows = Vec::with_capacity(t_total - 1);
    let mut gt_valid = Vec::with_capacity(t_total - 1);
    for t in 0..t_total - 1 {
        let step = cum[t + 1].mul(&inverses[t]);
        let mut v = Array3::zeros((height, width, 2));
        let mut mask = Array2::from_elem((height, width), true);
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let (tx, ty) = step.apply(xf, yf).unwrap();
                v[[y, x, 0]] = tx - xf;
                v[[y, x, 1]] = ty - yf;
                let (ox, oy) = inverses[t].apply(xf, yf).unwrap();
                mask[[y, x]] = inside(ox, oy, height, width) && inside(tx, ty, height, width);
            }
        }
        gt_flows.push(FlowField::new(v, 1)?);
        gt_valid.push(mask);
    }

    let mut gt_anchor_flows = Vec::with_capacity(t_total - 1);
    let mut gt_anchor_valid = Vec::with_capacity(t_total - 1);
    for t in 1..t_total {
        let mut v = Array3::zeros((height, width, 2));
        let mut mask = Array2::from_elem((height, width), true);
        for y in 0..height {
            for x in 0..width {
                let (xf, yf) = (x as f64, y as f64);
                let (tx, ty) = cum[t].apply(xf, yf).unwrap();
                v[[y, x, 0]] = tx - xf;
                v[[y, x, 1]] = ty - yf;
                mask[[y, x]] = inside(tx, ty, height, width);
            }
        }
        gt_anchor_flows.push(FlowField::new(v, 1)?);
        gt_anchor_valid.push(mask);
    }

    let margin = query_step.max(2);
    let mut qs: Vec<f64> = Vec::new();
    let mut y = margin;
    while y < height - margin {
        let mut x = margin;
        while x < width - margin {
            qs.push(x as f64);
            qs.push(y as f64);
            x += query_step;
        }
        y += query_step;
    }
    let nq = qs.len() / 2;
    let queries = Array2::from_shape_vec((nq, 2), qs).unwrap();
    let mut positions = Array3::zeros((nq, t_total, 2));
    let mut valid = Array2::from_elem((nq, t_total), true);
    for p in 0..nq {
        let (qx, qy) = (queries[[p, 0]], queries[[p, 1]]);
        for t in 0..t_total {
            let (tx, ty) = cum[t].apply(qx, qy).unwrap();
            positions[[p, t, 0]] = tx;
            positions[[p, t, 1]] = ty;
            if t > 0 {
                valid[[p, t]] = inside(tx, ty, height, width);
            }
        }
    }
    let gt_tracks = TrackSet::new(queries, positions, valid)?;

    Ok(Sample {
        sequence: ImageSequence::new(frames)?,
        gt_flows,
        gt_valid,
        gt_anchor_flows,
        gt_anchor_valid,
        gt_tracks,
    })
}

/// One reproducible dataset record: everything needed to regenerate the
/// sample is in the manifest line.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestEntry {
    pub seed: u64,
    pub height: usize,
    pub width: usize,
    pub warp: WarpSpec,
    #[serde(default = "default_query_step")]
    pub query_step: usize,
    #[serde(default)]
    pub noise_std: f64,
    #[serde(default)]
    pub brightness_jitter: f64,
}

fn default_query_step() -> usize {
    4
}

impl ManifestEntry {
    pub fn render(&self) -> Result<Sample> {
        render_sequence(
            &self.warp,
            self.seed,
            self.height,
            self.width,
            self.query_step,
            self.noise_std,
            self.brightness_jitter,
        )
    }

    /// Entry restricted to its first `t` frames.
    pub fn truncated(&self, t: usize) -> ManifestEntry {
        let mut e = self.clone();
        e.warp.steps.truncate(t.saturating_sub(1).max(1));
        e
    }
}

/// Plain-text dataset manifest: one JSON record per line.
pub fn write_manifest(path: &Path, entries: &[ManifestEntry]) -> Result<()> {
    let mut out = String::new();
    for e in entries {
        out.push_str(&serde_json::to_string(e)?);
        out.push('\n');
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_manifest(path: &Path) -> Result<Vec<ManifestEntry>> {
    let f = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut out = Vec::new();
    for (i, line) in BufReader::new(f).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if line.trim().is_empty() {
            continue;
        }
        let entry: ManifestEntry = serde_json::from_str(&line).map_err(|e| Error::Format {
            path: path.display().to_string(),
            reason: format!("line {}: {e}", i + 1),
        })?;
        out.push(entry);
    }
    if out.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "empty manifest".into(),
        });
    }
    Ok(out)
}

/// Distribution the random dataset generator draws from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum WarpFamily {
    Translation,
    Affine,
    Homography,
}

/// Draw a random warp schedule whose ground truth respects `cap` pixels of
/// displacement per the spec's validation, shrinking parameters until the
/// cap holds.
pub fn random_spec(
    rng: &mut ChaCha8Rng,
    family: WarpFamily,
    frames: usize,
    cap: f64,
    height: usize,
    width: usize,
) -> WarpSpec {
    for attempt in 0..16 {
        let shrink = 0.7f64.powi(attempt);
        let steps: Vec<StepWarp> = (0..frames - 1)
            .map(|_| match family {
                WarpFamily::Translation => {
                    let ang = rng.random::<f64>() * std::f64::consts::TAU;
                    let mag = rng.random::<f64>() * cap * shrink;
                    StepWarp::Translation {
                        dx: mag * ang.cos(),
                        dy: mag * ang.sin(),
                    }
                }
                WarpFamily::Affine => {
                    let s = shrink;
                    let rot = (rng.random::<f64>() - 0.5) * 0.04 * s;
                    let scale = 1.0 + (rng.random::<f64>() - 0.5) * 0.04 * s;
                    let shear = (rng.random::<f64>() - 0.5) * 0.02 * s;
                    let (dx, dy) = (
                        (rng.random::<f64>() - 0.5) * cap * s,
                        (rng.random::<f64>() - 0.5) * cap * s,
                    );
                    StepWarp::Affine {
                        m: [
                            [scale * rot.cos(), -rot.sin() + shear],
                            [rot.sin(), scale * rot.cos()],
                        ],
                        t: [dx, dy],
                    }
                }
                WarpFamily::Homography => {
                    let s = shrink;
                    let (dx, dy) = (
                        (rng.random::<f64>() - 0.5) * cap * s,
                        (rng.random::<f64>() - 0.5) * cap * s,
                    );
                    let px = (rng.random::<f64>() - 0.5) * 2e-4 * s;
                    let py = (rng.random::<f64>() - 0.5) * 2e-4 * s;
                    StepWarp::Homography {
                        h: [[1.0, 0.0, dx], [0.0, 1.0, dy], [px, py, 1.0]],
                    }
                }
            })
            .collect();
        let spec = WarpSpec {
            steps,
            max_displacement: cap,
        };
        if spec.validate(height, width).is_ok() {
            return spec;
        }
    }
    // translations always satisfy the cap
    WarpSpec::translation(frames, 0.0, 0.0, cap)
}

//! Point tracking through anchored displacement fields: trajectories are
//! read out as `p_t(x) = x + f_{0->t}(x)`, long sequences run through a
//! sliding window of anchored windows, and accuracy is scored with the
//! delta-threshold metric.
//!
//! There is no visibility prediction: points that leave the image are
//! clamp-sampled and flagged in the valid mask, never dropped.

use crate::error::{Error, Result};
use crate::model::{FlowModel, ForwardOptions, PairMode};
use crate::real::Real;
use crate::sampling::bilinear_sample;
use crate::types::{FlowField, ImageSequence};
use ndarray::{Array2, Array3};
use std::io::{BufRead, BufReader, Write};
use std::path::Path;

/// Trajectories of P query points over T time steps. Frame 0 is the query
/// frame: positions there equal the queries bit-exactly.
#[derive(Debug, Clone, PartialEq)]
pub struct TrackSet {
    queries: Array2<f64>,
    positions: Array3<f64>,
    valid: Array2<bool>,
}

impl TrackSet {
    pub fn new(queries: Array2<f64>, positions: Array3<f64>, valid: Array2<bool>) -> Result<Self> {
        let p = queries.shape()[0];
        let t = positions.shape()[1];
        if queries.shape()[1] != 2 || positions.shape() != [p, t, 2] || valid.shape() != [p, t] {
            return Err(Error::shape(
                "TrackSet",
                format!("queries (P,2), positions (P,{t},2), valid (P,{t})"),
                format!(
                    "{:?} / {:?} / {:?}",
                    queries.shape(),
                    positions.shape(),
                    valid.shape()
                ),
            ));
        }
        for pi in 0..p {
            if positions[[pi, 0, 0]] != queries[[pi, 0]]
                || positions[[pi, 0, 1]] != queries[[pi, 1]]
            {
                return Err(Error::InvalidArgument(format!(
                    "track {pi}: position at t=0 must equal its query"
                )));
            }
            if !valid[[pi, 0]] {
                return Err(Error::InvalidArgument(format!(
                    "track {pi}: the query frame must be valid"
                )));
            }
        }
        Ok(TrackSet {
            queries,
            positions,
            valid,
        })
    }

    /// Number of tracked points.
    pub fn len(&self) -> usize {
        self.queries.shape()[0]
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Number of time steps, including the query frame.
    pub fn steps(&self) -> usize {
        self.positions.shape()[1]
    }

    pub fn queries(&self) -> &Array2<f64> {
        &self.queries
    }

    pub fn positions(&self) -> &Array3<f64> {
        &self.positions
    }

    pub fn valid(&self) -> &Array2<bool> {
        &self.valid
    }
}

/// Frame indices of one anchored window: the query frame plus its targets.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Window {
    pub frame_indices: Vec<usize>,
}

/// Sliding-window schedule over a long sequence. Frame 0 is re-included as
/// the anchor of every window so matching always pairs against the query
/// frame; each target frame is covered exactly once.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct WindowPlan {
    pub window_size: usize,
    pub windows: Vec<Window>,
}

impl WindowPlan {
    pub fn new(total_frames: usize, window_size: usize) -> Result<Self> {
        if window_size < 2 {
            return Err(Error::InvalidArgument(format!(
                "window size must be at least 2, got {window_size}"
            )));
        }
        if total_frames < 2 {
            return Err(Error::InvalidArgument(format!(
                "tracking needs at least 2 frames, got {total_frames}"
            )));
        }
        let windows = (1..total_frames)
            .collect::<Vec<_>>()
            .chunks(window_size - 1)
            .map(|targets| Window {
                frame_indices: std::iter::once(0).chain(targets.iter().copied()).collect(),
            })
            .collect();
        Ok(WindowPlan {
            window_size,
            windows,
        })
    }

    /// All target frames in plan order (anchor excluded).
    pub fn targets(&self) -> Vec<usize> {
        self.windows
            .iter()
            .flat_map(|w| w.frame_indices[1..].iter().copied())
            .collect()
    }
}

/// Read trajectories from anchored stride-1 flow fields: `flows[t-1]` is
/// `f_{0->t}` for targets `t = 1..=flows.len()`. Positions that leave the
/// image (or queries starting outside it) are clamp-sampled and flagged.
pub fn flows_to_tracks(flows: &[FlowField], queries: &Array2<f64>) -> Result<TrackSet> {
    if queries.shape()[1] != 2 {
        return Err(Error::shape("flows_to_tracks queries", "(P, 2)", format!("{:?}", queries.shape())));
    }
    let p = queries.shape()[0];
    let t_total = flows.len() + 1;
    let mut positions = Array3::zeros((p, t_total, 2));
    let mut valid = Array2::from_elem((p, t_total), true);
    for pi in 0..p {
        positions[[pi, 0, 0]] = queries[[pi, 0]];
        positions[[pi, 0, 1]] = queries[[pi, 1]];
    }
    for (ti, flow) in flows.iter().enumerate() {
        if flow.stride() != 1 {
            return Err(Error::InvalidArgument(
                "flows_to_tracks expects stride-1 flow fields".into(),
            ));
        }
        let (h, w) = (flow.height() as f64, flow.width() as f64);
        let chw = flow.to_chw();
        let sampled = bilinear_sample(&chw, queries)?;
        for pi in 0..p {
            let x = queries[[pi, 0]] + sampled[[pi, 0]];
            let y = queries[[pi, 1]] + sampled[[pi, 1]];
            positions[[pi, ti + 1, 0]] = x;
            positions[[pi, ti + 1, 1]] = y;
            let query_inside = queries[[pi, 0]] >= 0.0
                && queries[[pi, 0]] <= w - 1.0
                && queries[[pi, 1]] >= 0.0
                && queries[[pi, 1]] <= h - 1.0;
            valid[[pi, ti + 1]] =
                query_inside && x >= 0.0 && x <= w - 1.0 && y >= 0.0 && y <= h - 1.0;
        }
    }
    TrackSet::new(queries.clone(), positions, valid)
}

/// Run the model in anchored mode over one window (`frames` holds the
/// anchor plus its targets, in order). `prev_flow_init` seeds every
/// target's refinement with the previous window's last prediction; by
/// default global matching still runs and only the refinement start is
/// replaced.
pub fn track_window<T: Real>(
    model: &FlowModel<T>,
    frames: &ImageSequence,
    prev_flow_init: Option<&FlowField>,
    iters: usize,
    skip_matching_on_chain: bool,
) -> Result<Vec<FlowField>> {
    let mut opts = ForwardOptions::new(iters).mode(PairMode::Anchored);
    if let Some(prev) = prev_flow_init {
        opts.seed_flows = Some(vec![prev.clone(); frames.len() - 1]);
        opts.skip_matching_when_seeded = skip_matching_on_chain;
    }
    Ok(model.infer(frames, &opts)?.flows)
}

/// Anchored flows `f_{0->t}` for every target frame of a long sequence,
/// chained window by window.
pub fn track_sequence<T: Real>(
    model: &FlowModel<T>,
    seq: &ImageSequence,
    window_size: usize,
    iters: usize,
    skip_matching_on_chain: bool,
) -> Result<Vec<FlowField>> {
    let plan = WindowPlan::new(seq.len(), window_size)?;
    let mut flows: Vec<FlowField> = Vec::with_capacity(seq.len() - 1);
    let mut prev: Option<FlowField> = None;
    for window in &plan.windows {
        let frames = seq.select(&window.frame_indices)?;
        let out = track_window(model, &frames, prev.as_ref(), iters, skip_matching_on_chain)?;
        prev = Some(out.last().expect("window has targets").clone());
        flows.extend(out);
    }
    Ok(flows)
}

/// Accuracy of predicted tracks at the pixel thresholds {1, 2, 4, 8, 16}.
#[derive(Debug, Clone, serde::Serialize)]
pub struct DeltaReport {
    /// Percentage of gt-valid (point, target-frame) pairs within each
    /// threshold.
    pub per_threshold: Vec<(f64, f64)>,
    /// Mean over the five thresholds; `None` when no valid pairs exist.
    pub delta_avg: Option<f64>,
    pub valid_pairs: usize,
}

pub const DELTA_THRESHOLDS: [f64; 5] = [1.0, 2.0, 4.0, 8.0, 16.0];

/// Score predictions against ground truth over gt-valid pairs on target
/// frames (the anchored query frame is excluded from scoring).
pub fn evaluate_tracks(pred: &TrackSet, gt: &TrackSet) -> Result<DeltaReport> {
    if pred.len() != gt.len() || pred.steps() != gt.steps() {
        return Err(Error::shape(
            "evaluate_tracks",
            format!("{} x {}", gt.len(), gt.steps()),
            format!("{} x {}", pred.len(), pred.steps()),
        ));
    }
    let mut valid_pairs = 0usize;
    let mut within = [0usize; 5];
    for p in 0..gt.len() {
        for t in 1..gt.steps() {
            if !gt.valid()[[p, t]] {
                continue;
            }
            valid_pairs += 1;
            let dx = pred.positions()[[p, t, 0]] - gt.positions()[[p, t, 0]];
            let dy = pred.positions()[[p, t, 1]] - gt.positions()[[p, t, 1]];
            let err = (dx * dx + dy * dy).sqrt();
            for (k, &thr) in DELTA_THRESHOLDS.iter().enumerate() {
                if err < thr {
                    within[k] += 1;
                }
            }
        }
    }
    let per_threshold: Vec<(f64, f64)> = DELTA_THRESHOLDS
        .iter()
        .zip(within.iter())
        .map(|(&thr, &n)| {
            let pct = if valid_pairs == 0 {
                f64::NAN
            } else {
                100.0 * n as f64 / valid_pairs as f64
            };
            (thr, pct)
        })
        .collect();
    let delta_avg = if valid_pairs == 0 {
        None
    } else {
        Some(per_threshold.iter().map(|&(_, p)| p).sum::<f64>() / 5.0)
    };
    Ok(DeltaReport {
        per_threshold,
        delta_avg,
        valid_pairs,
    })
}

/// Write tracks as a plain-text table: a header line, then one
/// `point_id,frame,x,y,valid` row per (point, frame). Floats use Rust's
/// shortest round-trip formatting, so read-back is exact.
pub fn write_tracks(path: &Path, tracks: &TrackSet) -> Result<()> {
    let mut out = String::from("point_id,frame,x,y,valid\n");
    for p in 0..tracks.len() {
        for t in 0..tracks.steps() {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                p,
                t,
                tracks.positions()[[p, t, 0]],
                tracks.positions()[[p, t, 1]],
                if tracks.valid()[[p, t]] { 1 } else { 0 }
            ));
        }
    }
    let mut f = std::fs::File::create(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    f.write_all(out.as_bytes())
        .map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn read_tracks(path: &Path) -> Result<TrackSet> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut rows: Vec<(usize, usize, f64, f64, bool)> = Vec::new();
    let mut max_p = 0usize;
    let mut max_t = 0usize;
    for (ln, line) in BufReader::new(file).lines().enumerate() {
        let line = line.map_err(|e| Error::io(path.display().to_string(), e))?;
        if ln == 0 {
            if line.trim() != "point_id,frame,x,y,valid" {
                return Err(Error::Format {
                    path: path.display().to_string(),
                    reason: format!("unexpected header: {line}"),
                });
            }
            continue;
        }
        if line.trim().is_empty() {
            continue;
        }
        let parts: Vec<&str> = line.trim().split(',').collect();
        if parts.len() != 5 {
            return Err(Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: expected 5 fields, got {}", ln + 1, parts.len()),
            });
        }
        let parse = |s: &str, what: &str| -> Result<f64> {
            s.parse().map_err(|_| Error::Format {
                path: path.display().to_string(),
                reason: format!("line {}: bad {what}: {s}", ln + 1),
            })
        };
        let p = parse(parts[0], "point_id")? as usize;
        let t = parse(parts[1], "frame")? as usize;
        let x = parse(parts[2], "x")?;
        let y = parse(parts[3], "y")?;
        let v = parts[4] == "1";
        max_p = max_p.max(p);
        max_t = max_t.max(t);
        rows.push((p, t, x, y, v));
    }
    if rows.is_empty() {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: "no track rows".into(),
        });
    }
    let (np, nt) = (max_p + 1, max_t + 1);
    if rows.len() != np * nt {
        return Err(Error::Format {
            path: path.display().to_string(),
            reason: format!("expected {} rows for {np} points x {nt} frames, got {}", np * nt, rows.len()),
        });
    }
    let mut positions = Array3::zeros((np, nt, 2));
    let mut valid = Array2::from_elem((np, nt), false);
    for (p, t, x, y, v) in rows {
        positions[[p, t, 0]] = x;
        positions[[p, t, 1]] = y;
        valid[[p, t]] = v;
    }
    let queries = Array2::from_shape_fn((np, 2), |(p, c)| positions[[p, 0, c]]);
    TrackSet::new(queries, positions, valid)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn grid_queries() -> Array2<f64> {
        Array2::from_shape_vec((3, 2), vec![1.0, 1.0, 2.5, 3.0, 4.0, 2.0]).unwrap()
    }

    #[test]
    fn zero_flow_gives_constant_tracks() {
        let flows = vec![FlowField::zeros(6, 6, 1); 4];
        let tracks = flows_to_tracks(&flows, &grid_queries()).unwrap();
        for p in 0..3 {
            for t in 0..5 {
                assert_eq!(tracks.positions()[[p, t, 0]], grid_queries()[[p, 0]]);
                assert_eq!(tracks.positions()[[p, t, 1]], grid_queries()[[p, 1]]);
                assert!(tracks.valid()[[p, t]]);
            }
        }
    }

    #[test]
    fn constant_translation_flows_accumulate() {
        let flows: Vec<FlowField> = (1..=3)
            .map(|t| FlowField::constant(8, 8, 1, t as f64, 0.0))
            .collect();
        let tracks = flows_to_tracks(&flows, &grid_queries()).unwrap();
        for p in 0..3 {
            for t in 1..=3usize {
                assert_eq!(
                    tracks.positions()[[p, t, 0]],
                    grid_queries()[[p, 0]] + t as f64
                );
            }
        }
    }

    #[test]
    fn out_of_image_positions_are_flagged_not_dropped() {
        let flows = vec![FlowField::constant(4, 4, 1, 10.0, 0.0)];
        let tracks = flows_to_tracks(&flows, &grid_queries()).unwrap();
        for p in 0..3 {
            assert!(!tracks.valid()[[p, 1]]);
            assert!(tracks.positions()[[p, 1, 0]] > 3.0);
        }
    }

    #[test]
    fn sampling_matches_four_corner_oracle() {
        use rand::Rng;
        use rand::SeedableRng;
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(4);
        let mut flow = FlowField::zeros(7, 7, 1);
        for v in flow.vectors_mut().iter_mut() {
            *v = rng.random::<f64>() - 0.5;
        }
        let queries = Array2::from_shape_fn((10, 2), |_| rng.random::<f64>() * 6.0);
        let tracks = flows_to_tracks(&[flow.clone()], &queries).unwrap();
        for p in 0..10 {
            let (x, y) = (queries[[p, 0]], queries[[p, 1]]);
            let (x0, y0) = (x.floor() as usize, y.floor() as usize);
            let (x1, y1) = ((x0 + 1).min(6), (y0 + 1).min(6));
            let (fx, fy) = (x - x0 as f64, y - y0 as f64);
            for c in 0..2 {
                let v = flow.vectors();
                let oracle = v[[y0, x0, c]] * (1.0 - fx) * (1.0 - fy)
                    + v[[y0, x1, c]] * fx * (1.0 - fy)
                    + v[[y1, x0, c]] * (1.0 - fx) * fy
                    + v[[y1, x1, c]] * fx * fy;
                let got = tracks.positions()[[p, 1, c]] - queries[[p, c]];
                assert!((got - oracle).abs() < 1e-6);
            }
        }
    }

    #[test]
    fn window_plan_covers_each_target_once() {
        let plan = WindowPlan::new(20, 8).unwrap();
        assert_eq!(plan.windows.len(), 3);
        for w in &plan.windows {
            assert_eq!(w.frame_indices[0], 0);
            assert!(w.frame_indices.len() <= 8);
        }
        let mut targets = plan.targets();
        targets.sort_unstable();
        assert_eq!(targets, (1..20).collect::<Vec<_>>());
        assert!(WindowPlan::new(20, 1).is_err());
    }

    #[test]
    fn delta_of_three_pixel_error_is_sixty() {
        let queries = Array2::from_shape_vec((1, 2), vec![5.0, 5.0]).unwrap();
        let mk = |x: f64| {
            let mut pos = Array3::zeros((1, 2, 2));
            pos[[0, 0, 0]] = 5.0;
            pos[[0, 0, 1]] = 5.0;
            pos[[0, 1, 0]] = x;
            pos[[0, 1, 1]] = 5.0;
            TrackSet::new(queries.clone(), pos, Array2::from_elem((1, 2), true)).unwrap()
        };
        let gt = mk(5.0);
        let r = evaluate_tracks(&mk(8.0), &gt).unwrap();
        assert_eq!(r.delta_avg, Some(60.0));
        let perfect = evaluate_tracks(&gt, &gt).unwrap();
        assert_eq!(perfect.delta_avg, Some(100.0));
        let hopeless = evaluate_tracks(&mk(25.0), &gt).unwrap();
        assert_eq!(hopeless.delta_avg, Some(0.0));
    }

    #[test]
    fn delta_is_monotone_under_error_inflation() {
        let queries = Array2::from_shape_vec((1, 2), vec![5.0, 5.0]).unwrap();
        let mk = |err: f64| {
            let mut pos = Array3::zeros((1, 5, 2));
            for t in 0..5 {
                pos[[0, t, 0]] = 5.0 + if t > 0 { err * t as f64 } else { 0.0 };
                pos[[0, t, 1]] = 5.0;
            }
            TrackSet::new(queries.clone(), pos, Array2::from_elem((1, 5), true)).unwrap()
        };
        let gt = mk(0.0);
        let mut last = 101.0;
        for err in [0.0, 0.5, 1.0, 2.0, 5.0] {
            let d = evaluate_tracks(&mk(err), &gt).unwrap().delta_avg.unwrap();
            assert!(d <= last, "delta_avg must not increase with error");
            last = d;
        }
    }

    #[test]
    fn no_valid_points_reports_undefined() {
        let queries = Array2::from_shape_vec((1, 2), vec![5.0, 5.0]).unwrap();
        let mut pos = Array3::zeros((1, 2, 2));
        pos[[0, 0, 0]] = 5.0;
        pos[[0, 0, 1]] = 5.0;
        let mut valid = Array2::from_elem((1, 2), true);
        valid[[0, 1]] = false;
        let ts = TrackSet::new(queries, pos, valid).unwrap();
        let r = evaluate_tracks(&ts, &ts).unwrap();
        assert_eq!(r.delta_avg, None);
        assert_eq!(r.valid_pairs, 0);
    }

    #[test]
    fn track_file_round_trips_exactly() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("tracks.csv");
        let queries = Array2::from_shape_vec((2, 2), vec![0.25, 0.75, 3.1, 2.9]).unwrap();
        let mut pos = Array3::zeros((2, 3, 2));
        for p in 0..2 {
            pos[[p, 0, 0]] = queries[[p, 0]];
            pos[[p, 0, 1]] = queries[[p, 1]];
            for t in 1..3 {
                pos[[p, t, 0]] = queries[[p, 0]] + 0.123456789 * t as f64;
                pos[[p, t, 1]] = queries[[p, 1]] - 1.0 / 3.0 * t as f64;
            }
        }
        let mut valid = Array2::from_elem((2, 3), true);
        valid[[1, 2]] = false;
        let ts = TrackSet::new(queries, pos, valid).unwrap();
        write_tracks(&path, &ts).unwrap();
        let back = read_tracks(&path).unwrap();
        assert_eq!(back, ts);
        // corrupted header rejected
        std::fs::write(&path, "bogus\n1,2,3,4,5\n").unwrap();
        assert!(read_tracks(&path).is_err());
    }
}

//! Training objectives: the flow loss (smooth-L1 on the matching init plus
//! exponentially weighted L1 on every refinement iterate) and the
//! point-tracking loss with the identical weighting schedule.
//!
//! Reduction convention: per-component error summed over `(dx, dy)`,
//! averaged over valid pixels or points, summed over frame pairs or time
//! steps. Masked-out entries never contribute.

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::real::Real;
use crate::refinement::flows_to_var;
use crate::tracking::TrackSet;
use crate::types::FlowField;
use ndarray::{Array2, ArrayD, IxDyn};

/// Loss hyperparameters.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(default)]
pub struct LossConfig {
    /// Exponential weight on refinement iterates; iterate k of K gets
    /// `gamma^(K-k)`.
    pub gamma: f64,
    /// Smooth-L1 threshold for the init-flow term.
    pub smooth_beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        LossConfig {
            gamma: 0.9,
            smooth_beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.gamma > 0.0 && self.gamma <= 1.0) {
            return Err(Error::InvalidConfig(format!(
                "gamma must lie in (0, 1], got {}",
                self.gamma
            )));
        }
        if !(self.smooth_beta > 0.0) {
            return Err(Error::InvalidConfig(format!(
                "smooth_beta must be positive, got {}",
                self.smooth_beta
            )));
        }
        Ok(())
    }
}

/// Weights `gamma^(K-k)` for iterates `k = 1..=K`; strictly increasing for
/// `gamma < 1`, so later iterates dominate.
pub fn iterate_weights(k: usize, gamma: f64) -> Vec<f64> {
    (1..=k).map(|i| gamma.powi((k - i) as i32)).collect()
}

/// Scalar loss terms still attached to a tape.
pub struct LossVars<'t, T: Real> {
    pub total: Var<'t, T>,
    pub init_term: Var<'t, T>,
    pub iterate_terms: Vec<Var<'t, T>>,
    /// Some group (frame pair or time step) had no valid entries.
    pub empty_mask: bool,
}

enum Penalty {
    SmoothL1(f64),
    L1,
}

/// Weighted elementwise penalty, summed: the per-group weight array already
/// encodes the valid mask and the 1/valid-count normalization, broadcast
/// over both displacement components.
fn masked_term<'t, T: Real>(
    pred: Var<'t, T>,
    gt: &ArrayD<T>,
    weights: &ArrayD<T>,
    penalty: &Penalty,
) -> Var<'t, T> {
    let err = pred.add(pred.tape().leaf(gt.mapv(|v| -v)));
    let elem = match penalty {
        Penalty::SmoothL1(beta) => err.smooth_l1(*beta),
        Penalty::L1 => err.abs(),
    };
    elem.mul_const(weights).sum_all()
}

/// Per-element weights for `(P, 2, H, W)` flow stacks: `1/valid_count(p)`
/// on valid pixels of pair `p`, zero elsewhere, identical on both flow
/// components. Returns the weights and whether any pair had no valid pixel.
fn flow_weights<T: Real>(
    p: usize,
    h: usize,
    w: usize,
    valid: Option<&[Array2<bool>]>,
) -> (ArrayD<T>, bool) {
    let is_valid =
        |pi: usize, y: usize, x: usize| valid.map_or(true, |m| m[pi][[y, x]]);
    let mut empty = false;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[p, 2, h, w]));
    for pi in 0..p {
        let count = (0..h)
            .flat_map(|y| (0..w).map(move |x| (y, x)))
            .filter(|&(y, x)| is_valid(pi, y, x))
            .count();
        if count == 0 {
            empty = true;
            continue;
        }
        let wv = T::of_f64(1.0 / count as f64);
        for y in 0..h {
            for x in 0..w {
                if is_valid(pi, y, x) {
                    out[[pi, 0, y, x]] = wv;
                    out[[pi, 1, y, x]] = wv;
                }
            }
        }
    }
    (out, empty)
}

/// Per-element weights for `(S, N, 2)` position stacks, normalizing each
/// time step by its valid point count.
fn point_weights<T: Real>(s: usize, n: usize, gt: &TrackSet) -> (ArrayD<T>, bool) {
    let mut empty = false;
    let mut out = ArrayD::<T>::zeros(IxDyn(&[s, n, 2]));
    for t in 0..s {
        let count = (0..n).filter(|&p| gt.valid()[[p, t + 1]]).count();
        if count == 0 {
            empty = true;
            continue;
        }
        let wv = T::of_f64(1.0 / count as f64);
        for p in 0..n {
            if gt.valid()[[p, t + 1]] {
                out[[t, p, 0]] = wv;
                out[[t, p, 1]] = wv;
            }
        }
    }
    (out, empty)
}

/// Flow training loss over a `(P, 2, H, W)` init stack and K iterate
/// stacks against stride-1 ground truth. `valid[p]` masks pixels with
/// usable ground truth; `None` means all pixels count.
pub fn flow_loss_var<'t, T: Real>(
    init_s1: Var<'t, T>,
    iterates_s1: &[Var<'t, T>],
    gt: &[FlowField],
    valid: Option<&[Array2<bool>]>,
    cfg: &LossConfig,
) -> Result<LossVars<'t, T>> {
    cfg.validate()?;
    let shape = init_s1.shape();
    let (p, h, w) = (shape[0], shape[2], shape[3]);
    if gt.len() != p {
        return Err(Error::shape("flow_loss gt", p, gt.len()));
    }
    for g in gt {
        if g.stride() != 1 || g.height() != h || g.width() != w {
            return Err(Error::shape(
                "flow_loss gt field",
                format!("stride-1 {h}x{w}"),
                format!("stride-{} {}x{}", g.stride(), g.height(), g.width()),
            ));
        }
    }
    if let Some(masks) = valid {
        if masks.len() != p {
            return Err(Error::shape("flow_loss masks", p, masks.len()));
        }
    }

    let mut gt_stack = ArrayD::<T>::zeros(IxDyn(&[p, 2, h, w]));
    for (pi, g) in gt.iter().enumerate() {
        let chw = g.to_chw();
        for c in 0..2 {
            for y in 0..h {
                for x in 0..w {
                    gt_stack[[pi, c, y, x]] = T::of_f64(chw[[c, y, x]]);
                }
            }
        }
    }
    let (weights, empty_mask) = flow_weights::<T>(p, h, w, valid);

    let init_term = masked_term(init_s1, &gt_stack, &weights, &Penalty::SmoothL1(cfg.smooth_beta));
    let k = iterates_s1.len();
    let ws = iterate_weights(k, cfg.gamma);
    let mut iterate_terms = Vec::with_capacity(k);
    let mut total = init_term;
    for (it, &wk) in iterates_s1.iter().zip(ws.iter()) {
        let term = masked_term(*it, &gt_stack, &weights, &Penalty::L1);
        iterate_terms.push(term);
        total = total.add(term.scale(wk));
    }
    Ok(LossVars {
        total,
        init_term,
        iterate_terms,
        empty_mask,
    })
}

/// Point-tracking loss over predicted positions `(S, N, 2)` for S target
/// steps and N query points, against the target-frame slice of a ground
/// truth track set. Identical weighting schedule to the flow loss.
pub fn point_loss_var<'t, T: Real>(
    init_pos: Var<'t, T>,
    iterate_pos: &[Var<'t, T>],
    gt: &TrackSet,
    cfg: &LossConfig,
) -> Result<LossVars<'t, T>> {
    cfg.validate()?;
    let shape = init_pos.shape();
    let (s, n) = (shape[0], shape[1]);
    if n != gt.len() || s + 1 != gt.steps() {
        return Err(Error::shape(
            "point_loss gt",
            format!("{} points x {} steps", n, s + 1),
            format!("{} points x {} steps", gt.len(), gt.steps()),
        ));
    }
    let mut gt_stack = ArrayD::<T>::zeros(IxDyn(&[s, n, 2]));
    for t in 0..s {
        for pt in 0..n {
            gt_stack[[t, pt, 0]] = T::of_f64(gt.positions()[[pt, t + 1, 0]]);
            gt_stack[[t, pt, 1]] = T::of_f64(gt.positions()[[pt, t + 1, 1]]);
        }
    }
    let (weights, empty_mask) = point_weights::<T>(s, n, gt);
    let init_term = masked_term(init_pos, &gt_stack, &weights, &Penalty::SmoothL1(cfg.smooth_beta));
    let k = iterate_pos.len();
    let ws = iterate_weights(k, cfg.gamma);
    let mut iterate_terms = Vec::with_capacity(k);
    let mut total = init_term;
    for (it, &wk) in iterate_pos.iter().zip(ws.iter()) {
        let term = masked_term(*it, &gt_stack, &weights, &Penalty::L1);
        iterate_terms.push(term);
        total = total.add(term.scale(wk));
    }
    Ok(LossVars {
        total,
        init_term,
        iterate_terms,
        empty_mask,
    })
}

/// Plain-array flow loss (scratch tape), for tests and reporting.
#[derive(Debug, Clone)]
pub struct LossReport {
    pub total: f64,
    pub init_term: f64,
    pub iterate_terms: Vec<f64>,
    pub weights: Vec<f64>,
    pub empty_mask: bool,
}

pub fn flow_loss(
    init: &[FlowField],
    iterates: &[Vec<FlowField>],
    gt: &[FlowField],
    valid: Option<&[Array2<bool>]>,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let tape: Tape<f64> = Tape::new();
    let init_var = flows_to_var(&tape, init)?;
    let iter_vars: Result<Vec<_>> = iterates.iter().map(|fs| flows_to_var(&tape, fs)).collect();
    let iter_vars = iter_vars?;
    let out = flow_loss_var(init_var, &iter_vars, gt, valid, cfg)?;
    Ok(LossReport {
        total: out.total.scalar_value(),
        init_term: out.init_term.scalar_value(),
        iterate_terms: out.iterate_terms.iter().map(|t| t.scalar_value()).collect(),
        weights: iterate_weights(iterates.len(), cfg.gamma),
        empty_mask: out.empty_mask,
    })
}

pub fn point_loss(
    init_tracks: &TrackSet,
    iterate_tracks: &[TrackSet],
    gt: &TrackSet,
    cfg: &LossConfig,
) -> Result<LossReport> {
    let tape: Tape<f64> = Tape::new();
    let to_var = |ts: &TrackSet| -> Var<'_, f64> {
        let s = ts.steps() - 1;
        let n = ts.len();
        let mut a = ArrayD::<f64>::zeros(IxDyn(&[s, n, 2]));
        for t in 0..s {
            for p in 0..n {
                a[[t, p, 0]] = ts.positions()[[p, t + 1, 0]];
                a[[t, p, 1]] = ts.positions()[[p, t + 1, 1]];
            }
        }
        tape.leaf(a)
    };
    let init_var = to_var(init_tracks);
    let iter_vars: Vec<_> = iterate_tracks.iter().map(&to_var).collect();
    let out = point_loss_var(init_var, &iter_vars, gt, cfg)?;
    Ok(LossReport {
        total: out.total.scalar_value(),
        init_term: out.init_term.scalar_value(),
        iterate_terms: out.iterate_terms.iter().map(|t| t.scalar_value()).collect(),
        weights: iterate_weights(iterate_tracks.len(), cfg.gamma),
        empty_mask: out.empty_mask,
    })
}

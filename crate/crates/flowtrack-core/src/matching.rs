//! Global matching: all-pairs correlation, softmax matching distribution,
//! and expectation flow over the target coordinate grid.
//!
//! Grid cells flatten row-major with y major: cell `(i, j)` is flat index
//! `i * W + j`, identically in the fast path and the test oracles. Both
//! memory and compute scale as `(H_g * W_g)^2 * D`, quadratic in grid
//! cells; see the workspace bench crate.
//!
//! Expectation flow is emitted in grid-cell units at the global stride;
//! conversion to pixel units happens solely through
//! [`crate::sampling::upsample_flow`].

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::real::Real;
use crate::types::{CoordinateGrid, FlowField};
use ndarray::{Array2, Array3, ArrayD, IxDyn};

/// All-pairs feature correlation between one source and one target frame:
/// entry `(u, v)` is the dot product of the source feature at cell `u`
/// with the target feature at cell `v`.
#[derive(Debug, Clone)]
pub struct CorrelationVolume {
    values: Array2<f64>,
    height: usize,
    width: usize,
}

impl CorrelationVolume {
    pub fn from_values(values: Array2<f64>, height: usize, width: usize) -> Result<Self> {
        let n = height * width;
        if values.shape() != [n, n] {
            return Err(Error::shape(
                "CorrelationVolume",
                format!("({n}, {n})"),
                format!("{:?}", values.shape()),
            ));
        }
        if !values.iter().all(|v| v.is_finite()) {
            return Err(Error::NonFinite("correlation volume"));
        }
        Ok(CorrelationVolume {
            values,
            height,
            width,
        })
    }

    pub fn values(&self) -> &Array2<f64> {
        &self.values
    }

    pub fn grid(&self) -> CoordinateGrid {
        CoordinateGrid::new(self.height, self.width)
    }
}

/// Per-source-cell probability rows over all target cells; every row sums
/// to one.
#[derive(Debug, Clone)]
pub struct MatchDistribution {
    probs: Array2<f64>,
    height: usize,
    width: usize,
}

impl MatchDistribution {
    pub fn probs(&self) -> &Array2<f64> {
        &self.probs
    }

    pub fn grid(&self) -> CoordinateGrid {
        CoordinateGrid::new(self.height, self.width)
    }
}

/// Compute the all-pairs correlation of two `(D, H, W)` feature maps.
pub fn all_pairs_correlation(f1: &Array3<f64>, f2: &Array3<f64>) -> Result<CorrelationVolume> {
    if f1.shape() != f2.shape() {
        return Err(Error::shape(
            "all_pairs_correlation",
            format!("{:?}", f1.shape()),
            format!("{:?}", f2.shape()),
        ));
    }
    let (d, h, w) = (f1.shape()[0], f1.shape()[1], f1.shape()[2]);
    let n = h * w;
    let a = f1.to_shape((d, n)).unwrap();
    let b = f2.to_shape((d, n)).unwrap();
    let values = a.t().dot(&b);
    CorrelationVolume::from_values(values, h, w)
}

/// Softmax-normalize correlation rows into a matching distribution,
/// dividing logits by `temperature` with max-subtraction stability.
pub fn softmax_match(c: &CorrelationVolume, temperature: f64) -> Result<MatchDistribution> {
    if !(temperature > 0.0) {
        return Err(Error::InvalidArgument(format!(
            "softmax temperature must be positive, got {temperature}"
        )));
    }
    let mut probs = c.values.clone();
    for mut row in probs.rows_mut() {
        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        row.mapv_inplace(|x| ((x - max) / temperature).exp());
        let sum: f64 = row.iter().sum();
        row.mapv_inplace(|x| x / sum);
    }
    Ok(MatchDistribution {
        probs,
        height: c.height,
        width: c.width,
    })
}

/// Expectation flow over the matching distribution: the probability-weighted
/// mean target coordinate minus the source coordinate, in grid-cell units
/// at the given stride.
pub fn expectation_flow(
    m: &MatchDistribution,
    grid: &CoordinateGrid,
    stride: u32,
) -> Result<FlowField> {
    if grid.height != m.height || grid.width != m.width {
        return Err(Error::shape(
            "expectation_flow",
            format!("{}x{}", m.height, m.width),
            format!("{}x{}", grid.height, grid.width),
        ));
    }
    let coords = grid.flat();
    let expected = m.probs.dot(&coords);
    let flow = (&expected - &coords)
        .into_shape_with_order((grid.height, grid.width, 2))
        .unwrap();
    FlowField::new(flow, stride)
}

/// Hard-argmax correspondence, ties broken by the lowest flat index. Test
/// oracle for the softmax-expectation path as the temperature goes to zero.
pub fn argmax_match_oracle(
    c: &CorrelationVolume,
    grid: &CoordinateGrid,
    stride: u32,
) -> Result<FlowField> {
    if grid.height != c.height || grid.width != c.width {
        return Err(Error::shape(
            "argmax_match_oracle",
            format!("{}x{}", c.height, c.width),
            format!("{}x{}", grid.height, grid.width),
        ));
    }
    let coords = grid.flat();
    let n = grid.len();
    let mut flow = Array3::zeros((grid.height, grid.width, 2));
    for u in 0..n {
        let mut best = 0usize;
        let mut best_val = f64::NEG_INFINITY;
        for v in 0..n {
            let val = c.values[[u, v]];
            if val > best_val {
                best_val = val;
                best = v;
            }
        }
        let (i, j) = (u / grid.width, u % grid.width);
        flow[[i, j, 0]] = coords[[best, 0]] - coords[[u, 0]];
        flow[[i, j, 1]] = coords[[best, 1]] - coords[[u, 1]];
    }
    FlowField::new(flow, stride)
}

/// Differentiable matching chain for one frame pair: `(D, H, W)` features
/// in, `(2, H, W)` expectation flow out, in grid-cell units.
pub fn matching_flow_var<'t, T: Real>(
    f1: Var<'t, T>,
    f2: Var<'t, T>,
    temperature: f64,
) -> Var<'t, T> {
    let shape = f1.shape();
    let (d, h, w) = (shape[0], shape[1], shape[2]);
    let n = h * w;
    let a = f1.reshape(&[d, n]).permute(&[1, 0]);
    let b = f2.reshape(&[d, n]);
    let corr = a.matmul(b); // (N, N)
    let probs = corr.scale(1.0 / temperature).softmax_last();
    let coords = CoordinateGrid::new(h, w).flat();
    let coords_t: ArrayD<T> = ArrayD::from_shape_vec(
        IxDyn(&[n, 2]),
        coords.iter().map(|&v| T::of_f64(v)).collect(),
    )
    .unwrap();
    let grid_leaf = f1.tape().leaf(coords_t.clone());
    let expected = probs.matmul(grid_leaf);
    let flow = expected.add(grid_leaf.scale(-1.0));
    flow.reshape(&[h, w, 2]).permute(&[2, 0, 1])
}

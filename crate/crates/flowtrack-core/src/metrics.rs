//! Flow evaluation metrics: end-point error, EPE bucketed by ground-truth
//! magnitude, the KITTI-style Fl-all outlier rate, and the 1px rate.
//!
//! Buckets are left-closed: `[0, 10)`, `[10, 40)`, `[40, inf)` by
//! ground-truth L2 magnitude. Fl-all marks a pixel an outlier when its EPE
//! exceeds 3 px AND 5% of the ground-truth magnitude.

use crate::error::{Error, Result};
use crate::types::FlowField;
use ndarray::Array2;
use serde::Serialize;

pub const BUCKET_EDGES: [f64; 2] = [10.0, 40.0];
pub const FL_ABS_THRESHOLD: f64 = 3.0;
pub const FL_REL_THRESHOLD: f64 = 0.05;

fn check_shapes(pred: &FlowField, gt: &FlowField, mask: Option<&Array2<bool>>) -> Result<()> {
    if pred.height() != gt.height() || pred.width() != gt.width() {
        return Err(Error::shape(
            "metrics",
            format!("{}x{}", gt.height(), gt.width()),
            format!("{}x{}", pred.height(), pred.width()),
        ));
    }
    if let Some(m) = mask {
        if m.shape() != [gt.height(), gt.width()] {
            return Err(Error::shape(
                "metrics mask",
                format!("{}x{}", gt.height(), gt.width()),
                format!("{:?}", m.shape()),
            ));
        }
    }
    Ok(())
}

/// Per-pixel L2 error map plus its mean over valid pixels
/// (`None` when the mask is empty).
pub fn epe(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&Array2<bool>>,
) -> Result<(Option<f64>, Array2<f64>)> {
    check_shapes(pred, gt, mask)?;
    let (h, w) = (gt.height(), gt.width());
    let mut map = Array2::zeros((h, w));
    let mut sum = 0.0;
    let mut count = 0usize;
    for y in 0..h {
        for x in 0..w {
            let dx = pred.vectors()[[y, x, 0]] - gt.vectors()[[y, x, 0]];
            let dy = pred.vectors()[[y, x, 1]] - gt.vectors()[[y, x, 1]];
            let e = (dx * dx + dy * dy).sqrt();
            map[[y, x]] = e;
            if mask.map_or(true, |m| m[[y, x]]) {
                sum += e;
                count += 1;
            }
        }
    }
    let mean = if count == 0 { None } else { Some(sum / count as f64) };
    Ok((mean, map))
}

/// Mean EPE and pixel count per ground-truth magnitude bucket.
#[derive(Debug, Clone, Serialize)]
pub struct BucketedEpe {
    /// `[s0_10, s10_40, s40_plus]`: mean EPE, `None` on empty buckets.
    pub epe: [Option<f64>; 3],
    pub pixels: [usize; 3],
}

pub fn bucket_of(gt_magnitude: f64) -> usize {
    if gt_magnitude < BUCKET_EDGES[0] {
        0
    } else if gt_magnitude < BUCKET_EDGES[1] {
        1
    } else {
        2
    }
}

pub fn bucketed_epe(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&Array2<bool>>,
) -> Result<BucketedEpe> {
    check_shapes(pred, gt, mask)?;
    let (_, map) = epe(pred, gt, mask)?;
    let mut sums = [0.0f64; 3];
    let mut pixels = [0usize; 3];
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !mask.map_or(true, |m| m[[y, x]]) {
                continue;
            }
            let gx = gt.vectors()[[y, x, 0]];
            let gy = gt.vectors()[[y, x, 1]];
            let b = bucket_of((gx * gx + gy * gy).sqrt());
            sums[b] += map[[y, x]];
            pixels[b] += 1;
        }
    }
    let epe = [0, 1, 2].map(|b| {
        if pixels[b] == 0 {
            None
        } else {
            Some(sums[b] / pixels[b] as f64)
        }
    });
    Ok(BucketedEpe { epe, pixels })
}

/// Percentage of valid pixels whose EPE exceeds both 3 px and 5% of the
/// ground-truth magnitude.
pub fn fl_all(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&Array2<bool>>,
) -> Result<Option<f64>> {
    check_shapes(pred, gt, mask)?;
    let (_, map) = epe(pred, gt, mask)?;
    let mut outliers = 0usize;
    let mut count = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !mask.map_or(true, |m| m[[y, x]]) {
                continue;
            }
            count += 1;
            let gx = gt.vectors()[[y, x, 0]];
            let gy = gt.vectors()[[y, x, 1]];
            let mag = (gx * gx + gy * gy).sqrt();
            if map[[y, x]] > FL_ABS_THRESHOLD && map[[y, x]] > FL_REL_THRESHOLD * mag {
                outliers += 1;
            }
        }
    }
    Ok(if count == 0 {
        None
    } else {
        Some(100.0 * outliers as f64 / count as f64)
    })
}

/// Percentage of valid pixels with EPE above one pixel.
pub fn one_px(
    pred: &FlowField,
    gt: &FlowField,
    mask: Option<&Array2<bool>>,
) -> Result<Option<f64>> {
    check_shapes(pred, gt, mask)?;
    let (_, map) = epe(pred, gt, mask)?;
    let mut over = 0usize;
    let mut count = 0usize;
    for y in 0..gt.height() {
        for x in 0..gt.width() {
            if !mask.map_or(true, |m| m[[y, x]]) {
                continue;
            }
            count += 1;
            if map[[y, x]] > 1.0 {
                over += 1;
            }
        }
    }
    Ok(if count == 0 {
        None
    } else {
        Some(100.0 * over as f64 / count as f64)
    })
}

/// Pixel-weighted accumulation of flow metrics across many fields.
#[derive(Debug, Clone, Default, Serialize)]
pub struct MetricAccumulator {
    pub epe_sum: f64,
    pub valid_pixels: usize,
    pub bucket_sums: [f64; 3],
    pub bucket_pixels: [usize; 3],
    pub fl_outliers: usize,
    pub one_px_outliers: usize,
    pub fields: usize,
}

impl MetricAccumulator {
    pub fn add(
        &mut self,
        pred: &FlowField,
        gt: &FlowField,
        mask: Option<&Array2<bool>>,
    ) -> Result<()> {
        check_shapes(pred, gt, mask)?;
        let (_, map) = epe(pred, gt, mask)?;
        for y in 0..gt.height() {
            for x in 0..gt.width() {
                if !mask.map_or(true, |m| m[[y, x]]) {
                    continue;
                }
                let e = map[[y, x]];
                let gx = gt.vectors()[[y, x, 0]];
                let gy = gt.vectors()[[y, x, 1]];
                let mag = (gx * gx + gy * gy).sqrt();
                self.epe_sum += e;
                self.valid_pixels += 1;
                let b = bucket_of(mag);
                self.bucket_sums[b] += e;
                self.bucket_pixels[b] += 1;
                if e > FL_ABS_THRESHOLD && e > FL_REL_THRESHOLD * mag {
                    self.fl_outliers += 1;
                }
                if e > 1.0 {
                    self.one_px_outliers += 1;
                }
            }
        }
        self.fields += 1;
        Ok(())
    }

    pub fn epe(&self) -> Option<f64> {
        (self.valid_pixels > 0).then(|| self.epe_sum / self.valid_pixels as f64)
    }

    pub fn bucket_epe(&self) -> [Option<f64>; 3] {
        [0, 1, 2].map(|b| {
            (self.bucket_pixels[b] > 0).then(|| self.bucket_sums[b] / self.bucket_pixels[b] as f64)
        })
    }

    pub fn fl_all(&self) -> Option<f64> {
        (self.valid_pixels > 0).then(|| 100.0 * self.fl_outliers as f64 / self.valid_pixels as f64)
    }

    pub fn one_px(&self) -> Option<f64> {
        (self.valid_pixels > 0)
            .then(|| 100.0 * self.one_px_outliers as f64 / self.valid_pixels as f64)
    }

    /// The bucket means, weighted by their pixel counts, must average back
    /// to the overall EPE; returns the absolute discrepancy.
    pub fn bucket_consistency(&self) -> f64 {
        if self.valid_pixels == 0 {
            return 0.0;
        }
        let weighted: f64 = self.bucket_sums.iter().sum();
        (weighted / self.valid_pixels as f64 - self.epe().unwrap()).abs()
    }
}

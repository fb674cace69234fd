//! Depth error and accuracy metrics with masking, capping and median scaling.

use alloc::vec::Vec;

use crate::image::DepthMap;
use crate::{math, Error, Result};

/// Column order of every metrics table: errors, then inlier ratios.
pub const CSV_COLUMNS: [&str; 7] = ["abs_rel", "sq_rel", "rmse", "rmse_log", "a1", "a2", "a3"];

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct DepthMetricsRecord {
    pub abs_rel: f64,
    pub sq_rel: f64,
    pub rmse: f64,
    pub rmse_log: f64,
    pub delta1: f64,
    pub delta2: f64,
    pub delta3: f64,
    pub n_pixels: usize,
}

impl DepthMetricsRecord {
    /// Values in [`CSV_COLUMNS`] order.
    pub fn values(&self) -> [f64; 7] {
        [self.abs_rel, self.sq_rel, self.rmse, self.rmse_log, self.delta1, self.delta2, self.delta3]
    }
}

/// Rectangular evaluation crop as fractions of height and width.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Crop {
    pub top: f64,
    pub bottom: f64,
    pub left: f64,
    pub right: f64,
}

impl Crop {
    fn contains(&self, y: usize, x: usize, h: usize, w: usize) -> bool {
        let (fy, fx) = (y as f64 / h as f64, x as f64 / w as f64);
        fy >= self.top && fy < self.bottom && fx >= self.left && fx < self.right
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct EvalOptions {
    pub min_depth: f64,
    pub max_depth: f64,
    pub median_scaling: bool,
    pub crop: Option<Crop>,
}

impl Default for EvalOptions {
    fn default() -> Self {
        Self {
            min_depth: 1e-3,
            max_depth: 80.0,
            median_scaling: true,
            crop: None,
        }
    }
}

fn check_sizes(pred: &DepthMap, gt: &DepthMap) -> Result<()> {
    if !pred.same_size(gt) {
        return Err(Error::shape(
            "depth metrics",
            alloc::format!("pred {}x{} vs gt {}x{}", pred.height(), pred.width(), gt.height(), gt.width()),
        ));
    }
    Ok(())
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

/// `pred * median(gt[mask]) / median(pred[mask])`.
pub fn median_scale(pred: &DepthMap, gt: &DepthMap, mask: &[bool]) -> Result<DepthMap> {
    check_sizes(pred, gt)?;
    if mask.len() != gt.values().len() {
        return Err(Error::shape("median_scale", "mask size differs from depth size"));
    }
    let pick = |d: &DepthMap| -> Vec<f64> { d.values().iter().zip(mask).filter(|(_, &m)| m).map(|(&v, _)| v).collect() };
    let (p, g) = (pick(pred), pick(gt));
    if p.is_empty() {
        return Err(Error::EmptyMask("median_scale"));
    }
    let (mp, mg) = (median(p), median(g));
    if !(mp > 0.0) {
        return Err(Error::InvalidArgument(alloc::format!("median prediction {mp} is not positive")));
    }
    let ratio = mg / mp;
    let mut out = pred.clone();
    out.values_mut().iter_mut().for_each(|v| *v *= ratio);
    Ok(out)
}

/// Metrics over pixels with `min_depth < gt < max_depth`, predictions
/// clamped to `[min_depth, max_depth]`.
pub fn compute_metrics(pred: &DepthMap, gt: &DepthMap, min_depth: f64, max_depth: f64) -> Result<DepthMetricsRecord> {
    let mask = valid_mask(gt, min_depth, max_depth, None);
    metrics_on_mask(pred, gt, &mask, min_depth, max_depth)
}

fn valid_mask(gt: &DepthMap, min_depth: f64, max_depth: f64, crop: Option<Crop>) -> Vec<bool> {
    let (h, w) = (gt.height(), gt.width());
    gt.values()
        .iter()
        .enumerate()
        .map(|(i, &g)| g > min_depth && g < max_depth && crop.is_none_or(|c| c.contains(i / w, i % w, h, w)))
        .collect()
}

fn metrics_on_mask(pred: &DepthMap, gt: &DepthMap, mask: &[bool], min_depth: f64, max_depth: f64) -> Result<DepthMetricsRecord> {
    check_sizes(pred, gt)?;
    if !(min_depth > 0.0 && max_depth > min_depth) {
        return Err(Error::InvalidArgument(alloc::format!("invalid depth caps ({min_depth}, {max_depth})")));
    }
    let (mut abs_rel, mut sq_rel, mut se, mut sle) = (0.0, 0.0, 0.0, 0.0);
    let mut within = [0usize; 3];
    let mut n = 0usize;
    for ((&p, &g), &m) in pred.values().iter().zip(gt.values()).zip(mask) {
        if !m {
            continue;
        }
        let p = p.clamp(min_depth, max_depth);
        let d = p - g;
        abs_rel += d.abs() / g;
        sq_rel += d * d / g;
        se += d * d;
        let dl = math::ln(p) - math::ln(g);
        sle += dl * dl;
        let ratio = (p / g).max(g / p);
        for (k, c) in within.iter_mut().enumerate() {
            if ratio < math::powf(1.25, (k + 1) as f64) {
                *c += 1;
            }
        }
        n += 1;
    }
    if n == 0 {
        return Err(Error::EmptyMask("compute_metrics"));
    }
    let nf = n as f64;
    Ok(DepthMetricsRecord {
        abs_rel: abs_rel / nf,
        sq_rel: sq_rel / nf,
        rmse: math::sqrt(se / nf),
        rmse_log: math::sqrt(sle / nf),
        delta1: within[0] as f64 / nf,
        delta2: within[1] as f64 / nf,
        delta3: within[2] as f64 / nf,
        n_pixels: n,
    })
}

/// Full protocol: mask, optional crop and median scaling, then metrics.
pub fn evaluate_depth(pred: &DepthMap, gt: &DepthMap, opts: &EvalOptions) -> Result<DepthMetricsRecord> {
    check_sizes(pred, gt)?;
    let mask = valid_mask(gt, opts.min_depth, opts.max_depth, opts.crop);
    let scaled;
    let pred = if opts.median_scaling {
        scaled = median_scale(pred, gt, &mask)?;
        &scaled
    } else {
        pred
    };
    metrics_on_mask(pred, gt, &mask, opts.min_depth, opts.max_depth)
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum Weighting {
    /// Arithmetic mean over images.
    #[default]
    PerImage,
    /// Weighted by each record's pixel count.
    PerPixel,
}

/// Summary of several records. RMSE-type entries are averaged like the
/// others (per-image convention).
pub fn aggregate(records: &[DepthMetricsRecord], weighting: Weighting) -> Result<DepthMetricsRecord> {
    if records.is_empty() {
        return Err(Error::InvalidArgument("aggregate needs at least one record".into()));
    }
    let weights: Vec<f64> = records
        .iter()
        .map(|r| match weighting {
            Weighting::PerImage => 1.0,
            Weighting::PerPixel => r.n_pixels as f64,
        })
        .collect();
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) {
        return Err(Error::InvalidArgument("aggregate weights sum to zero".into()));
    }
    let mut acc = [0.0; 7];
    for (r, w) in records.iter().zip(&weights) {
        for (a, v) in acc.iter_mut().zip(r.values()) {
            *a += w * v;
        }
    }
    let acc = acc.map(|a| a / total);
    if records.len() == 1 {
        return Ok(records[0]);
    }
    Ok(DepthMetricsRecord {
        abs_rel: acc[0],
        sq_rel: acc[1],
        rmse: acc[2],
        rmse_log: acc[3],
        delta1: acc[4],
        delta2: acc[5],
        delta3: acc[6],
        n_pixels: records.iter().map(|r| r.n_pixels).sum(),
    })
}

//! Self-supervised objective: SSIM + L1 photometric reconstruction with
//! per-pixel minimum reprojection and auto-masking, plus edge-aware
//! disparity smoothness.

use alloc::vec::Vec;

use crate::acm_ffd::disparity_to_depth;
use crate::autograd::{Graph, Var};
use crate::camera::CameraIntrinsics;
use crate::geometry::{inverse_warp, WarpResult};
use crate::image::ImageFrame;
use crate::{math, Error, Result, Tensor};

pub const SSIM_C1: f64 = 0.01 * 0.01;
pub const SSIM_C2: f64 = 0.03 * 0.03;
/// Cost added to a source's per-pixel loss where its sample is invalid, so
/// the per-pixel minimum prefers any valid source.
const INVALID_PENALTY: f64 = 1e6;
/// Identity reprojection gets this offset so ties keep the pixel.
const AUTO_MASK_OFFSET: f64 = 1e-5;

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossWeights {
    pub ssim: f64,
    pub l1: f64,
    pub smoothness: f64,
}

impl Default for LossWeights {
    fn default() -> Self {
        Self {
            ssim: 0.85,
            l1: 0.15,
            smoothness: 0.001,
        }
    }
}

impl LossWeights {
    pub fn validate(&self) -> Result<()> {
        let nonneg = self.ssim >= 0.0 && self.l1 >= 0.0 && self.smoothness >= 0.0;
        if !nonneg || (self.ssim + self.l1 - 1.0).abs() > 1e-12 {
            return Err(Error::Config(alloc::format!(
                "loss weights need ssim + l1 = 1 and all >= 0, got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Loss weights plus the reprojection switches.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LossConfig {
    pub weights: LossWeights,
    /// Per-pixel minimum over sources instead of the mean.
    pub min_reprojection: bool,
    /// Drop pixels whose unwarped source already matches the target better.
    pub auto_mask: bool,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            weights: LossWeights::default(),
            min_reprojection: true,
            auto_mask: true,
        }
    }
}

/// Per-pixel SSIM of two `[C, H, W]` images over 3x3 windows with
/// reflection padding.
pub fn ssim_map(g: &mut Graph, a: Var, b: Var) -> Var {
    let pa = g.pad_reflect(a, 1);
    let pb = g.pad_reflect(b, 1);
    let mu_a = g.avg_pool(pa, 3);
    let mu_b = g.avg_pool(pb, 3);
    let aa = g.mul(pa, pa);
    let bb = g.mul(pb, pb);
    let ab = g.mul(pa, pb);
    let e_aa = g.avg_pool(aa, 3);
    let e_bb = g.avg_pool(bb, 3);
    let e_ab = g.avg_pool(ab, 3);
    let mu_a2 = g.mul(mu_a, mu_a);
    let mu_b2 = g.mul(mu_b, mu_b);
    let mu_ab = g.mul(mu_a, mu_b);
    let var_a = g.sub(e_aa, mu_a2);
    let var_b = g.sub(e_bb, mu_b2);
    let cov = g.sub(e_ab, mu_ab);

    let two_mu_ab = g.mul_scalar(mu_ab, 2.0);
    let n1 = g.add_scalar(two_mu_ab, SSIM_C1);
    let two_cov = g.mul_scalar(cov, 2.0);
    let n2 = g.add_scalar(two_cov, SSIM_C2);
    let num = g.mul(n1, n2);
    let mu_sum = g.add(mu_a2, mu_b2);
    let d1 = g.add_scalar(mu_sum, SSIM_C1);
    let var_sum = g.add(var_a, var_b);
    let d2 = g.add_scalar(var_sum, SSIM_C2);
    let den = g.mul(d1, d2);
    g.div(num, den)
}

/// Plain-value SSIM map of two frames.
pub fn ssim(a: &ImageFrame, b: &ImageFrame) -> Result<Tensor> {
    if a.tensor().shape() != b.tensor().shape() {
        return Err(Error::shape("ssim", "images differ in size"));
    }
    let mut g = Graph::new();
    let va = g.constant(a.tensor().clone());
    let vb = g.constant(b.tensor().clone());
    let s = ssim_map(&mut g, va, vb);
    Ok(g.value(s).clone())
}

/// `ssim_w * (1 - SSIM) / 2 + l1_w * |a - b|`, averaged over channels: `[1, H, W]`.
pub fn photometric_cost(g: &mut Graph, target: Var, pred: Var, w: &LossWeights) -> Var {
    let s = ssim_map(g, pred, target);
    let one_minus = g.neg(s);
    let one_minus = g.add_scalar(one_minus, 1.0);
    let ssim_term = g.mul_scalar(one_minus, w.ssim / 2.0);
    let diff = g.sub(pred, target);
    let l1 = g.abs(diff);
    let l1_term = g.mul_scalar(l1, w.l1);
    let cost = g.add(ssim_term, l1_term);
    g.mean_leading(cost)
}

/// Photometric reconstruction loss of `target` from warped sources.
///
/// `identity_sources` are the unwarped sources used for auto-masking; pass
/// `None` to disable it for this call. Returns the scalar loss (0 with a
/// warning when no pixel survives masking).
pub fn photometric_loss(
    g: &mut Graph,
    target: Var,
    warps: &[WarpResult],
    identity_sources: Option<&[Var]>,
    cfg: &LossConfig,
) -> Result<Var> {
    if warps.is_empty() {
        return Err(Error::InvalidArgument("photometric loss needs a warped source".into()));
    }
    let ts = g.shape(target).to_vec();
    let (h, w) = (ts[1], ts[2]);
    let n = h * w;
    let mut costs = Vec::with_capacity(warps.len());
    let mut any_valid = alloc::vec![false; n];
    for wr in warps {
        let cost = photometric_cost(g, target, wr.warped, &cfg.weights);
        let mask = wr.valid_mask.data();
        for (a, &m) in any_valid.iter_mut().zip(mask) {
            *a |= m > 0.0;
        }
        costs.push((cost, mask.to_vec()));
    }

    let reprojection = if cfg.min_reprojection || costs.len() == 1 {
        let penalized: Vec<Var> = costs
            .iter()
            .map(|(c, m)| {
                let pen = Tensor::from_parts(&[1, h, w], m.iter().map(|&m| (1.0 - m) * INVALID_PENALTY).collect());
                let pen = g.constant(pen);
                g.add(*c, pen)
            })
            .collect();
        g.min_elementwise(&penalized)
    } else {
        // Mean over the sources valid at each pixel.
        let mut count = alloc::vec![0.0; n];
        for (_, m) in &costs {
            for (c, &v) in count.iter_mut().zip(m) {
                *c += v;
            }
        }
        let mut acc: Option<Var> = None;
        for (c, m) in &costs {
            let weight = Tensor::from_parts(
                &[1, h, w],
                m.iter().zip(&count).map(|(&m, &k)| if k > 0.0 { m / k } else { 0.0 }).collect(),
            );
            let weight = g.constant(weight);
            let term = g.mul(*c, weight);
            acc = Some(match acc {
                Some(a) => g.add(a, term),
                None => term,
            });
        }
        acc.expect("at least one source")
    };

    let mut keep: Vec<bool> = any_valid;
    if cfg.auto_mask {
        if let Some(sources) = identity_sources {
            let reproj = g.value(reprojection).data().to_vec();
            let mut best = alloc::vec![f64::INFINITY; n];
            for &s in sources {
                let c = photometric_cost(g, target, s, &cfg.weights);
                for (b, &v) in best.iter_mut().zip(g.value(c).data()) {
                    *b = b.min(v);
                }
            }
            for ((k, r), b) in keep.iter_mut().zip(&reproj).zip(&best) {
                *k &= *r < b + AUTO_MASK_OFFSET;
            }
        }
    }
    let count = keep.iter().filter(|&&k| k).count();
    if count == 0 {
        log::warn!("photometric loss: every pixel is masked out; returning 0");
        return Ok(g.constant(Tensor::scalar(0.0)));
    }
    let mask = Tensor::from_parts(
        &[1, h, w],
        keep.iter().map(|&k| if k { 1.0 / count as f64 } else { 0.0 }).collect(),
    );
    let mask = g.constant(mask);
    let weighted = g.mul(reprojection, mask);
    Ok(g.sum(weighted))
}

/// Edge-aware smoothness of a `[1, H, W]` (or `[H, W]`) disparity against a
/// `[C, H, W]` image, on mean-normalized disparity.
pub fn smoothness_loss(g: &mut Graph, disp: Var, image: &Tensor) -> Result<Var> {
    let ds = g.shape(disp).to_vec();
    let is = image.shape();
    let (h, w) = match ds.as_slice() {
        [1, h, w] | [h, w] => (*h, *w),
        _ => return Err(Error::shape("smoothness_loss", alloc::format!("disparity {ds:?}"))),
    };
    if is.len() != 3 || is[1] != h || is[2] != w {
        return Err(Error::shape("smoothness_loss", alloc::format!("disparity {ds:?} vs image {is:?}")));
    }
    if h < 2 || w < 2 {
        return Err(Error::shape("smoothness_loss", "needs at least 2x2 pixels"));
    }
    let disp = g.reshape(disp, &[1, h, w]);
    let mean = g.mean(disp);
    let norm = g.div_by(disp, mean);

    let c = is[0];
    let px = image.data();
    let mut wx = alloc::vec![0.0; h * (w - 1)];
    let mut wy = alloc::vec![0.0; (h - 1) * w];
    for ch in 0..c {
        let p = &px[ch * h * w..(ch + 1) * h * w];
        for y in 0..h {
            for x in 0..w - 1 {
                wx[y * (w - 1) + x] += (p[y * w + x + 1] - p[y * w + x]).abs() / c as f64;
            }
        }
        for y in 0..h - 1 {
            for x in 0..w {
                wy[y * w + x] += (p[(y + 1) * w + x] - p[y * w + x]).abs() / c as f64;
            }
        }
    }
    let wx = g.constant(Tensor::from_parts(&[1, h, w - 1], wx.iter().map(|&v| math::exp(-v)).collect()));
    let wy = g.constant(Tensor::from_parts(&[1, h - 1, w], wy.iter().map(|&v| math::exp(-v)).collect()));

    let dx = g.diff_x(norm);
    let dx = g.abs(dx);
    let dx = g.mul(dx, wx);
    let dy = g.diff_y(norm);
    let dy = g.abs(dy);
    let dy = g.mul(dy, wy);
    let mx = g.mean(dx);
    let my = g.mean(dy);
    Ok(g.add(mx, my))
}

/// Scalar loss plus its per-term breakdown (summed over scales).
#[derive(Clone, Copy, Debug)]
pub struct LossTerms {
    pub total: Var,
    pub photometric: f64,
    pub smoothness: f64,
}

/// Full objective for one sample.
///
/// `disparities` are full-resolution `[1, H, W]` maps (one per output
/// scale); `poses` hold one `[6]` target-to-source motion per source.
#[allow(clippy::too_many_arguments)]
pub fn total_loss(
    g: &mut Graph,
    target: Var,
    sources: &[Var],
    disparities: &[Var],
    poses: &[Var],
    k: &CameraIntrinsics,
    depth_range: (f64, f64),
    cfg: &LossConfig,
) -> Result<LossTerms> {
    if sources.len() != poses.len() || sources.is_empty() {
        return Err(Error::InvalidArgument("need one pose per source and at least one source".into()));
    }
    if disparities.is_empty() {
        return Err(Error::InvalidArgument("no disparity scales".into()));
    }
    let target_value = g.value(target).clone();
    let (h, w) = (target_value.shape()[1], target_value.shape()[2]);
    let mut total: Option<Var> = None;
    let (mut photo_sum, mut smooth_sum) = (0.0, 0.0);
    for &disp in disparities {
        if g.shape(disp) != [1, h, w] {
            return Err(Error::shape("total_loss", "disparity must be full resolution [1, H, W]"));
        }
        let depth = disparity_to_depth(g, disp, depth_range.0, depth_range.1)?;
        let depth = g.reshape(depth, &[h, w]);
        let mut warps = Vec::with_capacity(sources.len());
        for (&src, &pose) in sources.iter().zip(poses) {
            warps.push(inverse_warp(g, src, depth, pose, k)?);
        }
        let photo = photometric_loss(g, target, &warps, Some(sources), cfg)?;
        let smooth = smoothness_loss(g, disp, &target_value)?;
        photo_sum += g.value(photo).data()[0];
        smooth_sum += g.value(smooth).data()[0];
        let weighted = g.mul_scalar(smooth, cfg.weights.smoothness);
        let scale_loss = g.add(photo, weighted);
        total = Some(match total {
            Some(t) => g.add(t, scale_loss),
            None => scale_loss,
        });
    }
    Ok(LossTerms {
        total: total.expect("at least one scale"),
        photometric: photo_sum,
        smoothness: smooth_sum,
    })
}

//! Texture-shift filters: edge-preserving watercolor smoothing and a
//! dodge-based pencil sketch. Both are deterministic functions of the input.

use alloc::vec;
use alloc::vec::Vec;

use crate::image::ImageFrame;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct WatercolorParams {
    /// Spatial extent, pixels.
    pub sigma_spatial: f64,
    /// Edge sensitivity in intensity units, in (0, 1).
    pub sigma_range: f64,
    pub iterations: usize,
}

impl Default for WatercolorParams {
    fn default() -> Self {
        Self {
            sigma_spatial: 60.0,
            sigma_range: 0.45,
            iterations: 3,
        }
    }
}

impl WatercolorParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.sigma_spatial > 0.0) || !(self.sigma_range > 0.0 && self.sigma_range < 1.0) || self.iterations == 0 {
            return Err(Error::InvalidArgument(alloc::format!(
                "watercolor needs sigma_spatial > 0, sigma_range in (0, 1), iterations >= 1; got {self:?}"
            )));
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct PencilParams {
    /// Gaussian sigma in pixels; `None` means `width / 24`.
    pub blur_sigma: Option<f64>,
    /// Weight of the plain grayscale mixed back into the sketch.
    pub shade: f64,
}

impl Default for PencilParams {
    fn default() -> Self {
        Self {
            blur_sigma: None,
            shade: 0.05,
        }
    }
}

impl PencilParams {
    pub fn validate(&self) -> Result<()> {
        if self.blur_sigma.is_some_and(|s| !(s > 0.0)) || !(0.0..=1.0).contains(&self.shade) {
            return Err(Error::InvalidArgument(alloc::format!(
                "pencil sketch needs blur_sigma > 0 and shade in [0, 1]; got {self:?}"
            )));
        }
        Ok(())
    }
}

/// Edge-preserving smoothing with the recursive domain-transform filter.
///
/// Per-pixel transform derivatives come from the input image; each iteration
/// runs a horizontal then a vertical causal/anti-causal recursive pass with
/// a shrinking spatial sigma.
pub fn watercolor(image: &ImageFrame, params: &WatercolorParams) -> Result<ImageFrame> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let src = image.tensor().data();
    let ratio = params.sigma_spatial / params.sigma_range;
    let plane = h * w;

    // Domain-transform derivatives between horizontal / vertical neighbors.
    let mut dx = vec![0.0; plane];
    let mut dy = vec![0.0; plane];
    for y in 0..h {
        for x in 0..w {
            let i = y * w + x;
            if x + 1 < w {
                let s: f64 = (0..3).map(|c| (src[c * plane + i + 1] - src[c * plane + i]).abs()).sum();
                dx[i + 1] = 1.0 + ratio * s;
            }
            if y + 1 < h {
                let s: f64 = (0..3).map(|c| (src[c * plane + i + w] - src[c * plane + i]).abs()).sum();
                dy[i + w] = 1.0 + ratio * s;
            }
        }
    }

    let mut out = src.to_vec();
    let n = params.iterations as i32;
    let denom = math::sqrt(math::powf(4.0, n as f64) - 1.0);
    for it in 0..n {
        let sigma = params.sigma_spatial * math::sqrt(3.0) * math::powf(2.0, (n - it - 1) as f64) / denom;
        let a = math::exp(-math::sqrt(2.0) / sigma);
        let wx: Vec<f64> = dx.iter().map(|&d| math::powf(a, d)).collect();
        let wy: Vec<f64> = dy.iter().map(|&d| math::powf(a, d)).collect();
        for c in 0..3 {
            let ch = &mut out[c * plane..(c + 1) * plane];
            for y in 0..h {
                let row = y * w;
                for x in 1..w {
                    let i = row + x;
                    ch[i] += wx[i] * (ch[i - 1] - ch[i]);
                }
                for x in (0..w - 1).rev() {
                    let i = row + x;
                    ch[i] += wx[i + 1] * (ch[i + 1] - ch[i]);
                }
            }
            for x in 0..w {
                for y in 1..h {
                    let i = y * w + x;
                    ch[i] += wy[i] * (ch[i - w] - ch[i]);
                }
                for y in (0..h - 1).rev() {
                    let i = y * w + x;
                    ch[i] += wy[i + w] * (ch[i + w] - ch[i]);
                }
            }
        }
    }
    ImageFrame::new(h, w, out)
}

/// Luma `0.299 R + 0.587 G + 0.114 B`.
pub fn grayscale(image: &ImageFrame) -> Vec<f64> {
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| 0.299 * r + 0.587 * g + 0.114 * b)
        .collect()
}

/// Separable, normalized Gaussian blur of one plane (edge-replicated,
/// radius `ceil(3 sigma)`).
pub fn gaussian_blur(plane: &[f64], h: usize, w: usize, sigma: f64) -> Vec<f64> {
    let radius = math::floor(3.0 * sigma) as usize + 1;
    let kernel: Vec<f64> = {
        let k: Vec<f64> = (0..=2 * radius)
            .map(|i| {
                let d = i as f64 - radius as f64;
                math::exp(-d * d / (2.0 * sigma * sigma))
            })
            .collect();
        let s: f64 = k.iter().sum();
        k.into_iter().map(|v| v / s).collect()
    };
    let clamp = |i: isize, n: usize| i.clamp(0, n as isize - 1) as usize;
    let mut tmp = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            tmp[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * plane[y * w + clamp(x as isize + k as isize - radius as isize, w)])
                .sum();
        }
    }
    let mut out = vec![0.0; h * w];
    for y in 0..h {
        for x in 0..w {
            out[y * w + x] = kernel
                .iter()
                .enumerate()
                .map(|(k, kv)| kv * tmp[clamp(y as isize + k as isize - radius as isize, h) * w + x])
                .sum();
        }
    }
    out
}

/// Color-dodge pencil sketch on three identical channels:
/// `s = min(1, g / (1 - blur(1 - g)))`, `out = (1 - shade) s + shade g`.
pub fn pencil_sketch(image: &ImageFrame, params: &PencilParams) -> Result<ImageFrame> {
    params.validate()?;
    let (h, w) = (image.height(), image.width());
    let sigma = params.blur_sigma.unwrap_or(w as f64 / 24.0);
    let g = grayscale(image);
    let inv: Vec<f64> = g.iter().map(|v| 1.0 - v).collect();
    let blurred = gaussian_blur(&inv, h, w, sigma);
    let sketch: Vec<f64> = g
        .iter()
        .zip(&blurred)
        .map(|(&g, &b)| {
            let s = (g / (1.0 - b).max(1e-6)).min(1.0);
            ((1.0 - params.shade) * s + params.shade * g).clamp(0.0, 1.0)
        })
        .collect();
    let mut data = Vec::with_capacity(3 * h * w);
    for _ in 0..3 {
        data.extend_from_slice(&sketch);
    }
    ImageFrame::new(h, w, data)
}

/// Anisotropic total variation summed over channels.
pub fn total_variation(image: &ImageFrame) -> f64 {
    let (h, w) = (image.height(), image.width());
    let mut tv = 0.0;
    for c in 0..3 {
        let p = image.channel(c);
        for y in 0..h {
            for x in 0..w {
                if x + 1 < w {
                    tv += (p[y * w + x + 1] - p[y * w + x]).abs();
                }
                if y + 1 < h {
                    tv += (p[(y + 1) * w + x] - p[y * w + x]).abs();
                }
            }
        }
    }
    tv
}

/// Largest channel difference over all pixels (0 means gray).
pub fn max_chroma(image: &ImageFrame) -> f64 {
    let (r, g, b) = (image.channel(0), image.channel(1), image.channel(2));
    r.iter()
        .zip(g)
        .zip(b)
        .map(|((r, g), b)| (r - g).abs().max((g - b).abs()).max((r - b).abs()))
        .fold(0.0, f64::max)
}

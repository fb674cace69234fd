//! RGB frames and per-pixel depth maps.

use alloc::vec::Vec;

use crate::{Error, Result, Tensor};

/// Channels-first RGB image with intensities in `[0, 1]`.
#[derive(Clone, Debug, PartialEq)]
pub struct ImageFrame {
    data: Tensor,
}

impl ImageFrame {
    /// `data` is planar RGB, `3 * height * width` values.
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty image".into()));
        }
        Ok(Self {
            data: Tensor::new(&[3, height, width], data)?,
        })
    }

    pub fn from_tensor(t: Tensor) -> Result<Self> {
        match t.shape() {
            [3, h, w] if *h > 0 && *w > 0 => Ok(Self { data: t }),
            s => Err(Error::shape("ImageFrame", alloc::format!("expected [3, H, W], got {s:?}"))),
        }
    }

    pub fn filled(height: usize, width: usize, rgb: [f64; 3]) -> Self {
        let mut data = Vec::with_capacity(3 * height * width);
        for c in rgb {
            data.extend(core::iter::repeat_n(c, height * width));
        }
        Self {
            data: Tensor::from_parts(&[3, height, width], data),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[2]
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn into_tensor(self) -> Tensor {
        self.data
    }

    pub fn channel(&self, c: usize) -> &[f64] {
        let n = self.height() * self.width();
        &self.data.data()[c * n..(c + 1) * n]
    }

    pub fn channel_mut(&mut self, c: usize) -> &mut [f64] {
        let n = self.height() * self.width();
        &mut self.data.data_mut()[c * n..(c + 1) * n]
    }

    pub fn get(&self, c: usize, y: usize, x: usize) -> f64 {
        self.data.data()[(c * self.height() + y) * self.width() + x]
    }

    /// Clamps every intensity into `[0, 1]`.
    pub fn clamp_unit(mut self) -> Self {
        self.data.data_mut().iter_mut().for_each(|v| *v = v.clamp(0.0, 1.0));
        self
    }

    pub fn in_unit_range(&self) -> bool {
        self.data.data().iter().all(|v| (0.0..=1.0).contains(v))
    }

    /// Area-interpolated resize.
    pub fn resize_area(&self, height: usize, width: usize) -> Self {
        let data = resize_area_planes(self.data.data(), 3, self.height(), self.width(), height, width);
        Self {
            data: Tensor::from_parts(&[3, height, width], data),
        }
    }
}

/// Per-pixel depth in meters.
#[derive(Clone, Debug, PartialEq)]
pub struct DepthMap {
    data: Tensor,
}

impl DepthMap {
    pub fn new(height: usize, width: usize, data: Vec<f64>) -> Result<Self> {
        if height == 0 || width == 0 {
            return Err(Error::InvalidArgument("empty depth map".into()));
        }
        Ok(Self {
            data: Tensor::new(&[height, width], data)?,
        })
    }

    pub fn filled(height: usize, width: usize, depth: f64) -> Self {
        Self {
            data: Tensor::full(&[height, width], depth),
        }
    }

    pub fn height(&self) -> usize {
        self.data.shape()[0]
    }

    pub fn width(&self) -> usize {
        self.data.shape()[1]
    }

    pub fn values(&self) -> &[f64] {
        self.data.data()
    }

    pub fn values_mut(&mut self) -> &mut [f64] {
        self.data.data_mut()
    }

    pub fn tensor(&self) -> &Tensor {
        &self.data
    }

    pub fn get(&self, y: usize, x: usize) -> f64 {
        self.data.data()[y * self.width() + x]
    }

    pub fn same_size(&self, other: &DepthMap) -> bool {
        self.height() == other.height() && self.width() == other.width()
    }

    /// Area-interpolated resize.
    pub fn resize_area(&self, height: usize, width: usize) -> Self {
        let data = resize_area_planes(self.data.data(), 1, self.height(), self.width(), height, width);
        Self {
            data: Tensor::from_parts(&[height, width], data),
        }
    }
}

/// Coverage weights of destination cells over source cells along one axis.
fn area_weights(src: usize, dst: usize) -> Vec<Vec<(usize, f64)>> {
    let scale = src as f64 / dst as f64;
    (0..dst)
        .map(|d| {
            let lo = d as f64 * scale;
            let hi = lo + scale;
            let mut taps = Vec::new();
            let mut s = crate::math::floor(lo) as usize;
            while (s as f64) < hi && s < src {
                let overlap = f64::min(hi, (s + 1) as f64) - f64::max(lo, s as f64);
                if overlap > 1e-12 {
                    taps.push((s, overlap / scale));
                }
                s += 1;
            }
            taps
        })
        .collect()
}

/// Box-filter ("area") resampling of `planes` stacked `h x w` planes.
pub fn resize_area_planes(data: &[f64], planes: usize, h: usize, w: usize, oh: usize, ow: usize) -> Vec<f64> {
    if (h, w) == (oh, ow) {
        return data.to_vec();
    }
    let wy = area_weights(h, oh);
    let wx = area_weights(w, ow);
    let mut out = Vec::with_capacity(planes * oh * ow);
    let mut tmp = alloc::vec![0.0; h * ow];
    for p in 0..planes {
        let plane = &data[p * h * w..(p + 1) * h * w];
        for y in 0..h {
            for (x, taps) in wx.iter().enumerate() {
                tmp[y * ow + x] = taps.iter().map(|&(s, f)| plane[y * w + s] * f).sum();
            }
        }
        for taps in &wy {
            for x in 0..ow {
                out.push(taps.iter().map(|&(s, f)| tmp[s * ow + x] * f).sum());
            }
        }
    }
    out
}

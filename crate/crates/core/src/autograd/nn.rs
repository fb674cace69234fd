//! Neural-network operations: softmax, layer norm, convolution, pooling,
//! padding, resampling and patch extraction.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;

use super::ops::gemm;
use super::{Graph, Var};
use crate::{math, Tensor};

/// Stride and zero padding of a square-kernel convolution.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct Conv2dSpec {
    pub stride: usize,
    pub pad: usize,
}

impl Conv2dSpec {
    pub const fn new(stride: usize, pad: usize) -> Self {
        Self { stride, pad }
    }

    pub fn output_size(&self, input: usize, kernel: usize) -> usize {
        (input + 2 * self.pad - kernel) / self.stride + 1
    }
}

struct ConvGeom {
    cin: usize,
    h: usize,
    w: usize,
    k: usize,
    stride: usize,
    pad: usize,
    ho: usize,
    wo: usize,
}

impl ConvGeom {
    fn is_pointwise(&self) -> bool {
        self.k == 1 && self.stride == 1 && self.pad == 0
    }

    fn im2col(&self, x: &[f64]) -> Vec<f64> {
        let (k, hw_o) = (self.k, self.ho * self.wo);
        let mut cols = vec![0.0; self.cin * k * k * hw_o];
        for c in 0..self.cin {
            let plane = &x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &mut cols[((c * k + ky) * k + kx) * hw_o..][..hw_o];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let src = &plane[iy as usize * self.w..][..self.w];
                        let dst = &mut row[oy * self.wo..][..self.wo];
                        for (ox, d) in dst.iter_mut().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                *d = src[ix as usize];
                            }
                        }
                    }
                }
            }
        }
        cols
    }

    fn col2im(&self, cols: &[f64]) -> Vec<f64> {
        let (k, hw_o) = (self.k, self.ho * self.wo);
        let mut x = vec![0.0; self.cin * self.h * self.w];
        for c in 0..self.cin {
            let plane = &mut x[c * self.h * self.w..(c + 1) * self.h * self.w];
            for ky in 0..k {
                for kx in 0..k {
                    let row = &cols[((c * k + ky) * k + kx) * hw_o..][..hw_o];
                    for oy in 0..self.ho {
                        let iy = (oy * self.stride + ky) as isize - self.pad as isize;
                        if iy < 0 || iy >= self.h as isize {
                            continue;
                        }
                        let dst = &mut plane[iy as usize * self.w..][..self.w];
                        let src = &row[oy * self.wo..][..self.wo];
                        for (ox, &s) in src.iter().enumerate() {
                            let ix = (ox * self.stride + kx) as isize - self.pad as isize;
                            if ix >= 0 && ix < self.w as isize {
                                dst[ix as usize] += s;
                            }
                        }
                    }
                }
            }
        }
        x
    }
}

/// Bilinear source taps along one axis (half-pixel centers, edge clamped).
fn bilinear_taps(src_len: usize, dst_len: usize) -> Vec<(usize, usize, f64)> {
    let scale = src_len as f64 / dst_len as f64;
    (0..dst_len)
        .map(|d| {
            let s = ((d as f64 + 0.5) * scale - 0.5).max(0.0);
            let i0 = (math::floor(s) as usize).min(src_len - 1);
            let i1 = (i0 + 1).min(src_len - 1);
            let f = if i0 == i1 { 0.0 } else { s - i0 as f64 };
            (i0, i1, f)
        })
        .collect()
}

fn reflect(i: isize, n: usize) -> usize {
    let n = n as isize;
    let mut i = i;
    if i < 0 {
        i = -i;
    }
    if i >= n {
        i = 2 * (n - 1) - i;
    }
    i as usize
}

impl Graph {
    /// Softmax along the last axis (max-subtracted).
    pub fn softmax_rows(&mut self, x: Var) -> Var {
        let c = *self.shape(x).last().expect("softmax of a scalar");
        let mut out = self.value(x).data().to_vec();
        for row in out.chunks_mut(c) {
            let m = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut s = 0.0;
            for v in row.iter_mut() {
                *v = math::exp(*v - m);
                s += *v;
            }
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let value = Tensor::from_parts(self.shape(x), out);
        self.custom(
            value,
            &[x],
            Box::new(move |ctx| {
                let y = ctx.output.data();
                let mut g = Vec::with_capacity(y.len());
                for (yr, gr) in y.chunks(c).zip(ctx.grad.chunks(c)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    g.extend(yr.iter().zip(gr).map(|(y, g)| y * (g - dot)));
                }
                vec![Some(g)]
            }),
        )
    }

    /// Layer normalization over the last axis with affine `gamma`, `beta`.
    pub fn layer_norm_rows(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Var {
        let c = *self.shape(x).last().expect("layer norm of a scalar");
        assert_eq!(self.value(gamma).numel(), c, "layer norm gamma size");
        assert_eq!(self.value(beta).numel(), c, "layer norm beta size");
        let stats = move |row: &[f64]| {
            let mean = row.iter().sum::<f64>() / c as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / c as f64;
            (mean, 1.0 / math::sqrt(var + eps))
        };
        let (gs, bs) = (self.value(gamma).data(), self.value(beta).data());
        let mut out = Vec::with_capacity(self.value(x).numel());
        for row in self.value(x).data().chunks(c) {
            let (mean, inv) = stats(row);
            out.extend(
                row.iter()
                    .zip(gs.iter().zip(bs))
                    .map(|(v, (g, b))| (v - mean) * inv * g + b),
            );
        }
        let value = Tensor::from_parts(self.shape(x), out);
        self.custom(
            value,
            &[x, gamma, beta],
            Box::new(move |ctx| {
                let xs = ctx.inputs[0].data();
                let gs = ctx.inputs[1].data();
                let mut gx = ctx.needs[0].then(|| Vec::with_capacity(xs.len()));
                let mut gg = vec![0.0; c];
                let mut gb = vec![0.0; c];
                let mut dxhat = vec![0.0; c];
                let mut xhat = vec![0.0; c];
                for (row, grow) in xs.chunks(c).zip(ctx.grad.chunks(c)) {
                    let (mean, inv) = stats(row);
                    for j in 0..c {
                        xhat[j] = (row[j] - mean) * inv;
                        dxhat[j] = grow[j] * gs[j];
                        gg[j] += grow[j] * xhat[j];
                        gb[j] += grow[j];
                    }
                    if let Some(gx) = gx.as_mut() {
                        let m1 = dxhat.iter().sum::<f64>() / c as f64;
                        let m2 = dxhat.iter().zip(&xhat).map(|(d, x)| d * x).sum::<f64>() / c as f64;
                        gx.extend((0..c).map(|j| inv * (dxhat[j] - m1 - xhat[j] * m2)));
                    }
                }
                vec![gx, ctx.needs[1].then_some(gg), ctx.needs[2].then_some(gb)]
            }),
        )
    }

    /// 2-D convolution of a `[Cin, H, W]` input with `[Cout, Cin, k, k]`
    /// weights and an optional `[Cout]` bias; zero padding.
    pub fn conv2d(&mut self, x: Var, weight: Var, bias: Option<Var>, spec: Conv2dSpec) -> Var {
        let xs = self.shape(x);
        let ws = self.shape(weight);
        assert!(
            xs.len() == 3 && ws.len() == 4 && ws[1] == xs[0] && ws[2] == ws[3],
            "conv2d: input {:?}, weight {:?}",
            xs,
            ws
        );
        assert!(
            xs[1] + 2 * spec.pad >= ws[2] && xs[2] + 2 * spec.pad >= ws[2],
            "conv2d: kernel larger than padded input"
        );
        let cout = ws[0];
        let geom = ConvGeom {
            cin: xs[0],
            h: xs[1],
            w: xs[2],
            k: ws[2],
            stride: spec.stride,
            pad: spec.pad,
            ho: spec.output_size(xs[1], ws[2]),
            wo: spec.output_size(xs[2], ws[2]),
        };
        let kdim = geom.cin * geom.k * geom.k;
        let hw_o = geom.ho * geom.wo;
        let cols = if geom.is_pointwise() {
            None
        } else {
            Some(geom.im2col(self.value(x).data()))
        };
        let mut out = vec![0.0; cout * hw_o];
        {
            let b_mat = cols.as_deref().unwrap_or(self.value(x).data());
            gemm(cout, kdim, hw_o, self.value(weight).data(), false, b_mat, false, &mut out, false);
        }
        if let Some(b) = bias {
            let bs = self.value(b).data();
            assert_eq!(bs.len(), cout, "conv2d bias size");
            for (row, b) in out.chunks_mut(hw_o).zip(bs) {
                row.iter_mut().for_each(|v| *v += b);
            }
        }
        let value = Tensor::from_parts(&[cout, geom.ho, geom.wo], out);
        let mut parents = vec![x, weight];
        parents.extend(bias);
        let has_bias = bias.is_some();
        // Column buffers are only worth keeping when a weight gradient is needed.
        let keep_cols = self.requires_grad(weight);
        let cols = if keep_cols { cols } else { None };
        self.custom(
            value,
            &parents,
            Box::new(move |ctx| {
                let wv = ctx.inputs[1].data();
                let gx = ctx.needs[0].then(|| {
                    let mut dcols = vec![0.0; kdim * hw_o];
                    gemm(kdim, cout, hw_o, wv, true, ctx.grad, false, &mut dcols, false);
                    if geom.is_pointwise() {
                        dcols
                    } else {
                        geom.col2im(&dcols)
                    }
                });
                let gw = ctx.needs[1].then(|| {
                    let mut gw = vec![0.0; cout * kdim];
                    let owned;
                    let b_mat: &[f64] = match cols.as_deref() {
                        Some(c) => c,
                        None if geom.is_pointwise() => ctx.inputs[0].data(),
                        None => {
                            owned = geom.im2col(ctx.inputs[0].data());
                            &owned
                        }
                    };
                    gemm(cout, hw_o, kdim, ctx.grad, false, b_mat, true, &mut gw, false);
                    gw
                });
                let mut res = vec![gx, gw];
                if has_bias {
                    res.push(
                        ctx.needs[2]
                            .then(|| ctx.grad.chunks(hw_o).map(|r| r.iter().sum()).collect()),
                    );
                }
                res
            }),
        )
    }

    /// Reflection padding of `[C, H, W]` by `p` on every side (edge not repeated).
    pub fn pad_reflect(&mut self, x: Var, p: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] > p && s[2] > p, "pad_reflect: {:?} by {}", s, p);
        let (c, h, w) = (s[0], s[1], s[2]);
        let (hp, wp) = (h + 2 * p, w + 2 * p);
        let index: Vec<usize> = (0..hp)
            .flat_map(|y| {
                let sy = reflect(y as isize - p as isize, h);
                (0..wp).map(move |xx| sy * w + reflect(xx as isize - p as isize, w))
            })
            .collect();
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(c * hp * wp);
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            out.extend(index.iter().map(|&i| plane[i]));
        }
        self.custom(
            Tensor::from_parts(&[c, hp, wp], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &mut g[ch * h * w..(ch + 1) * h * w];
                    let op = &ctx.grad[ch * hp * wp..(ch + 1) * hp * wp];
                    for (&i, &v) in index.iter().zip(op) {
                        gp[i] += v;
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Stride-1 `k x k` mean pooling without padding: `[C, H-k+1, W-k+1]`.
    pub fn avg_pool(&mut self, x: Var, k: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && s[1] >= k && s[2] >= k, "avg_pool: {:?} k={}", s, k);
        let (c, h, w) = (s[0], s[1], s[2]);
        let (ho, wo) = (h - k + 1, w - k + 1);
        let norm = 1.0 / (k * k) as f64;
        let xs = self.value(x).data();
        let mut out = vec![0.0; c * ho * wo];
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            let op = &mut out[ch * ho * wo..(ch + 1) * ho * wo];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = 0.0;
                    for dy in 0..k {
                        let row = &plane[(oy + dy) * w + ox..][..k];
                        acc += row.iter().sum::<f64>();
                    }
                    op[oy * wo + ox] = acc * norm;
                }
            }
        }
        self.custom(
            Tensor::from_parts(&[c, ho, wo], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &mut g[ch * h * w..(ch + 1) * h * w];
                    let op = &ctx.grad[ch * ho * wo..(ch + 1) * ho * wo];
                    for oy in 0..ho {
                        for ox in 0..wo {
                            let v = op[oy * wo + ox] * norm;
                            for dy in 0..k {
                                for d in &mut gp[(oy + dy) * w + ox..][..k] {
                                    *d += v;
                                }
                            }
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Bilinear resampling of `[C, H, W]` to `[C, oh, ow]` (half-pixel
    /// centers). Same-size resampling is the identity.
    pub fn resize_bilinear(&mut self, x: Var, oh: usize, ow: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(s.len() == 3 && oh > 0 && ow > 0, "resize_bilinear: {:?}", s);
        let (c, h, w) = (s[0], s[1], s[2]);
        if (h, w) == (oh, ow) {
            let value = self.value(x).clone();
            return self.custom(value, &[x], Box::new(|ctx| vec![Some(ctx.grad.to_vec())]));
        }
        let ty = bilinear_taps(h, oh);
        let tx = bilinear_taps(w, ow);
        let xs = self.value(x).data();
        let mut out = Vec::with_capacity(c * oh * ow);
        for ch in 0..c {
            let plane = &xs[ch * h * w..(ch + 1) * h * w];
            for &(y0, y1, fy) in &ty {
                for &(x0, x1, fx) in &tx {
                    let top = plane[y0 * w + x0] * (1.0 - fx) + plane[y0 * w + x1] * fx;
                    let bot = plane[y1 * w + x0] * (1.0 - fx) + plane[y1 * w + x1] * fx;
                    out.push(top * (1.0 - fy) + bot * fy);
                }
            }
        }
        self.custom(
            Tensor::from_parts(&[c, oh, ow], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &mut g[ch * h * w..(ch + 1) * h * w];
                    let op = &ctx.grad[ch * oh * ow..(ch + 1) * oh * ow];
                    for (oy, &(y0, y1, fy)) in ty.iter().enumerate() {
                        for (ox, &(x0, x1, fx)) in tx.iter().enumerate() {
                            let v = op[oy * ow + ox];
                            gp[y0 * w + x0] += v * (1.0 - fy) * (1.0 - fx);
                            gp[y0 * w + x1] += v * (1.0 - fy) * fx;
                            gp[y1 * w + x0] += v * fy * (1.0 - fx);
                            gp[y1 * w + x1] += v * fy * fx;
                        }
                    }
                }
                vec![Some(g)]
            }),
        )
    }

    /// Splits `[C, H, W]` into non-overlapping `p x p` patches in raster
    /// order, one flattened `(c, dy, dx)` patch per row: `[N, C*p*p]`.
    pub fn patchify(&mut self, x: Var, p: usize) -> Var {
        let s = self.shape(x).to_vec();
        assert!(
            s.len() == 3 && p > 0 && s[1].is_multiple_of(p) && s[2].is_multiple_of(p),
            "patchify: {:?} by {}",
            s,
            p
        );
        let (c, h, w) = (s[0], s[1], s[2]);
        let (gh, gw) = (h / p, w / p);
        let dim = c * p * p;
        // index[n * dim + j] = flat input index of patch element j of patch n
        let mut index = Vec::with_capacity(gh * gw * dim);
        for py in 0..gh {
            for px in 0..gw {
                for ch in 0..c {
                    for dy in 0..p {
                        for dx in 0..p {
                            index.push(ch * h * w + (py * p + dy) * w + px * p + dx);
                        }
                    }
                }
            }
        }
        let xs = self.value(x).data();
        let out = index.iter().map(|&i| xs[i]).collect();
        self.custom(
            Tensor::from_parts(&[gh * gw, dim], out),
            &[x],
            Box::new(move |ctx| {
                let mut g = vec![0.0; c * h * w];
                for (&i, &v) in index.iter().zip(ctx.grad) {
                    g[i] = v;
                }
                vec![Some(g)]
            }),
        )
    }
}

//! Differentiable inverse warping: backproject target pixels with depth,
//! move them by a rigid motion, project into the source camera and sample
//! the source image bilinearly.

use alloc::boxed::Box;
use alloc::vec;
use alloc::vec::Vec;
use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::autograd::{Graph, Var};
use crate::camera::{rotation_matrix, CameraIntrinsics, Pose6DoF, RotationScalar};
use crate::image::{DepthMap, ImageFrame};
use crate::{math, Error, Result, Tensor};

/// Points closer than this to the source image plane are treated as invalid.
const MIN_PROJECTED_DEPTH: f64 = 1e-3;
/// Slack (pixels) on the in-bounds test so exact border samples stay valid.
const BOUNDS_SLACK: f64 = 1e-6;

/// Output of [`inverse_warp`].
pub struct WarpResult {
    pub warped: Var,
    /// `[H, W]`, 1 where the sample landed inside the source image.
    pub valid_mask: Tensor,
}

/// Forward-mode dual number carrying derivatives w.r.t. three inputs.
#[derive(Clone, Copy, Debug)]
struct Dual3 {
    v: f64,
    d: [f64; 3],
}

impl Dual3 {
    fn var(v: f64, i: usize) -> Self {
        let mut d = [0.0; 3];
        d[i] = 1.0;
        Self { v, d }
    }
    fn chain(self, v: f64, dv: f64) -> Self {
        Self {
            v,
            d: [self.d[0] * dv, self.d[1] * dv, self.d[2] * dv],
        }
    }
}

impl Add for Dual3 {
    type Output = Self;
    fn add(self, o: Self) -> Self {
        Self {
            v: self.v + o.v,
            d: [self.d[0] + o.d[0], self.d[1] + o.d[1], self.d[2] + o.d[2]],
        }
    }
}

impl Sub for Dual3 {
    type Output = Self;
    fn sub(self, o: Self) -> Self {
        Self {
            v: self.v - o.v,
            d: [self.d[0] - o.d[0], self.d[1] - o.d[1], self.d[2] - o.d[2]],
        }
    }
}

#[allow(clippy::suspicious_arithmetic_impl)]
impl Mul for Dual3 {
    type Output = Self;
    fn mul(self, o: Self) -> Self {
        let d = core::array::from_fn(|i| self.d[i] * o.v + self.v * o.d[i]);
        Self { v: self.v * o.v, d }
    }
}

impl Div for Dual3 {
    type Output = Self;
    fn div(self, o: Self) -> Self {
        let inv = 1.0 / o.v;
        let d = core::array::from_fn(|i| (self.d[i] * o.v - self.v * o.d[i]) * inv * inv);
        Self { v: self.v * inv, d }
    }
}

impl Neg for Dual3 {
    type Output = Self;
    fn neg(self) -> Self {
        Self {
            v: -self.v,
            d: [-self.d[0], -self.d[1], -self.d[2]],
        }
    }
}

impl RotationScalar for Dual3 {
    fn constant(v: f64) -> Self {
        Self { v, d: [0.0; 3] }
    }
    fn value(self) -> f64 {
        self.v
    }
    fn sqrt(self) -> Self {
        let r = math::sqrt(self.v);
        self.chain(r, 0.5 / r)
    }
    fn sin(self) -> Self {
        self.chain(math::sin(self.v), math::cos(self.v))
    }
    fn cos(self) -> Self {
        self.chain(math::cos(self.v), -math::sin(self.v))
    }
}

/// `[6]` axis-angle + translation -> `[12]` = row-major `R` then `t`.
pub fn pose_to_transform(g: &mut Graph, pose: Var) -> Var {
    assert_eq!(g.value(pose).numel(), 6, "pose must have 6 entries");
    let p = g.value(pose).data();
    let dual = rotation_matrix([Dual3::var(p[0], 0), Dual3::var(p[1], 1), Dual3::var(p[2], 2)]);
    let mut out = Vec::with_capacity(12);
    let mut jac = [[0.0; 3]; 9];
    for i in 0..3 {
        for j in 0..3 {
            out.push(dual[i][j].v);
            jac[i * 3 + j] = dual[i][j].d;
        }
    }
    out.extend_from_slice(&p[3..6]);
    g.custom(
        Tensor::from_parts(&[12], out),
        &[pose],
        Box::new(move |ctx| {
            let mut gp = vec![0.0; 6];
            for (k, row) in jac.iter().enumerate() {
                for a in 0..3 {
                    gp[a] += ctx.grad[k] * row[a];
                }
            }
            gp[3..6].copy_from_slice(&ctx.grad[9..12]);
            vec![Some(gp)]
        }),
    )
}

/// Source-image pixel coordinates `[2, H, W]` of every target pixel, plus a
/// flag per pixel telling whether the point lies in front of the source
/// camera.
pub fn project_pixels(
    g: &mut Graph,
    depth: Var,
    transform: Var,
    k: &CameraIntrinsics,
) -> (Var, Vec<bool>) {
    let s = g.shape(depth).to_vec();
    assert!(s.len() == 2, "depth must be [H, W], got {s:?}");
    let (h, w) = (s[0], s[1]);
    let k = *k;
    let rays: Vec<[f64; 3]> = (0..h)
        .flat_map(|y| (0..w).map(move |x| k.ray(x as f64, y as f64)))
        .collect();
    let tr = g.value(transform).data().to_vec();
    let ds = g.value(depth).data();
    let mut coords = vec![0.0; 2 * h * w];
    let mut in_front = vec![false; h * w];
    for i in 0..h * w {
        let p = camera_point(&tr, &rays[i], ds[i]);
        let z = p[2].max(MIN_PROJECTED_DEPTH);
        in_front[i] = p[2] > MIN_PROJECTED_DEPTH;
        coords[i] = k.fx * p[0] / z + k.cx;
        coords[h * w + i] = k.fy * p[1] / z + k.cy;
    }
    let front = in_front.clone();
    let var = g.custom(
        Tensor::from_parts(&[2, h, w], coords),
        &[depth, transform],
        Box::new(move |ctx| {
            let ds = ctx.inputs[0].data();
            let tr = ctx.inputs[1].data();
            let n = h * w;
            let mut gd = vec![0.0; n];
            let mut gt = vec![0.0; 12];
            for i in 0..n {
                if !front[i] {
                    continue;
                }
                let ray = &rays[i];
                let p = camera_point(tr, ray, ds[i]);
                let (gx, gy) = (ctx.grad[i], ctx.grad[n + i]);
                let iz = 1.0 / p[2];
                // d(loss)/dP for P = R (d ray) + t
                let dp = [
                    gx * k.fx * iz,
                    gy * k.fy * iz,
                    -(gx * k.fx * p[0] + gy * k.fy * p[1]) * iz * iz,
                ];
                let mut rr = [0.0; 3];
                for r in 0..3 {
                    rr[r] = tr[r * 3] * ray[0] + tr[r * 3 + 1] * ray[1] + tr[r * 3 + 2] * ray[2];
                    for c in 0..3 {
                        gt[r * 3 + c] += dp[r] * ds[i] * ray[c];
                    }
                    gt[9 + r] += dp[r];
                }
                gd[i] = dp[0] * rr[0] + dp[1] * rr[1] + dp[2] * rr[2];
            }
            vec![ctx.needs[0].then_some(gd), ctx.needs[1].then_some(gt)]
        }),
    );
    (var, in_front)
}

fn camera_point(tr: &[f64], ray: &[f64; 3], depth: f64) -> [f64; 3] {
    let q = [ray[0] * depth, ray[1] * depth, ray[2] * depth];
    core::array::from_fn(|r| tr[r * 3] * q[0] + tr[r * 3 + 1] * q[1] + tr[r * 3 + 2] * q[2] + tr[9 + r])
}

/// Bilinear sampling of `[C, H, W]` at `[2, Ho, Wo]` pixel coordinates
/// (x then y). Coordinates are clamped to the image; clamped coordinates
/// receive no gradient.
pub fn grid_sample(g: &mut Graph, image: Var, coords: Var) -> Var {
    let is = g.shape(image).to_vec();
    let cs = g.shape(coords).to_vec();
    assert!(is.len() == 3 && cs.len() == 3 && cs[0] == 2, "grid_sample: {is:?} at {cs:?}");
    let (c, h, w) = (is[0], is[1], is[2]);
    let n = cs[1] * cs[2];
    struct Tap {
        x0: usize,
        x1: usize,
        y0: usize,
        y1: usize,
        fx: f64,
        fy: f64,
        free_x: bool,
        free_y: bool,
    }
    let cd = g.value(coords).data();
    let taps: Vec<Tap> = (0..n)
        .map(|i| {
            let (x, y) = (cd[i], cd[n + i]);
            let xc = x.clamp(0.0, (w - 1) as f64);
            let yc = y.clamp(0.0, (h - 1) as f64);
            let x0 = (math::floor(xc) as usize).min(w - 1);
            let y0 = (math::floor(yc) as usize).min(h - 1);
            Tap {
                x0,
                x1: (x0 + 1).min(w - 1),
                y0,
                y1: (y0 + 1).min(h - 1),
                fx: xc - x0 as f64,
                fy: yc - y0 as f64,
                free_x: xc == x,
                free_y: yc == y,
            }
        })
        .collect();
    let img = g.value(image).data();
    let mut out = Vec::with_capacity(c * n);
    for ch in 0..c {
        let p = &img[ch * h * w..(ch + 1) * h * w];
        out.extend(taps.iter().map(|t| {
            let top = p[t.y0 * w + t.x0] * (1.0 - t.fx) + p[t.y0 * w + t.x1] * t.fx;
            let bot = p[t.y1 * w + t.x0] * (1.0 - t.fx) + p[t.y1 * w + t.x1] * t.fx;
            top * (1.0 - t.fy) + bot * t.fy
        }));
    }
    g.custom(
        Tensor::from_parts(&[c, cs[1], cs[2]], out),
        &[image, coords],
        Box::new(move |ctx| {
            let img = ctx.inputs[0].data();
            let gi = ctx.needs[0].then(|| {
                let mut gi = vec![0.0; c * h * w];
                for ch in 0..c {
                    let gp = &mut gi[ch * h * w..(ch + 1) * h * w];
                    let go = &ctx.grad[ch * n..(ch + 1) * n];
                    for (t, &v) in taps.iter().zip(go) {
                        gp[t.y0 * w + t.x0] += v * (1.0 - t.fy) * (1.0 - t.fx);
                        gp[t.y0 * w + t.x1] += v * (1.0 - t.fy) * t.fx;
                        gp[t.y1 * w + t.x0] += v * t.fy * (1.0 - t.fx);
                        gp[t.y1 * w + t.x1] += v * t.fy * t.fx;
                    }
                }
                gi
            });
            let gc = ctx.needs[1].then(|| {
                let mut gc = vec![0.0; 2 * n];
                for ch in 0..c {
                    let p = &img[ch * h * w..(ch + 1) * h * w];
                    let go = &ctx.grad[ch * n..(ch + 1) * n];
                    for (i, (t, &v)) in taps.iter().zip(go).enumerate() {
                        let (a, b) = (p[t.y0 * w + t.x0], p[t.y0 * w + t.x1]);
                        let (cc, d) = (p[t.y1 * w + t.x0], p[t.y1 * w + t.x1]);
                        if t.free_x && t.x1 != t.x0 {
                            gc[i] += v * ((1.0 - t.fy) * (b - a) + t.fy * (d - cc));
                        }
                        if t.free_y && t.y1 != t.y0 {
                            let top = a * (1.0 - t.fx) + b * t.fx;
                            let bot = cc * (1.0 - t.fx) + d * t.fx;
                            gc[n + i] += v * (bot - top);
                        }
                    }
                }
                gc
            });
            vec![gi, gc]
        }),
    )
}

/// Synthesizes the target view from `source` given target depth `[H, W]` and
/// the target-to-source motion `pose` (`[6]`).
pub fn inverse_warp(
    g: &mut Graph,
    source: Var,
    depth: Var,
    pose: Var,
    k: &CameraIntrinsics,
) -> Result<WarpResult> {
    let ss = g.shape(source).to_vec();
    let ds = g.shape(depth).to_vec();
    if ss.len() != 3 || ds.len() != 2 || ss[1..] != ds[..] {
        return Err(Error::shape(
            "inverse_warp",
            alloc::format!("source {ss:?} vs depth {ds:?}"),
        ));
    }
    if (k.height, k.width) != (ds[0], ds[1]) {
        return Err(Error::shape("inverse_warp", "intrinsics do not match the image size"));
    }
    if let Some((index, &value)) = g
        .value(depth)
        .data()
        .iter()
        .enumerate()
        .find(|(_, &d)| !(d > 0.0))
    {
        return Err(Error::NonPositiveDepth { index, value });
    }
    let transform = pose_to_transform(g, pose);
    let (coords, in_front) = project_pixels(g, depth, transform, k);
    let (h, w) = (ds[0], ds[1]);
    let cd = g.value(coords).data();
    let n = h * w;
    let mask = (0..n)
        .map(|i| {
            let (x, y) = (cd[i], cd[n + i]);
            let inside = x >= -BOUNDS_SLACK
                && x <= (w - 1) as f64 + BOUNDS_SLACK
                && y >= -BOUNDS_SLACK
                && y <= (h - 1) as f64 + BOUNDS_SLACK;
            if inside && in_front[i] {
                1.0
            } else {
                0.0
            }
        })
        .collect();
    let warped = grid_sample(g, source, coords);
    Ok(WarpResult {
        warped,
        valid_mask: Tensor::from_parts(&[h, w], mask),
    })
}

/// Non-differentiable convenience wrapper over [`inverse_warp`].
pub fn warp_frame(
    source: &ImageFrame,
    depth: &DepthMap,
    pose: &Pose6DoF,
    k: &CameraIntrinsics,
) -> Result<(ImageFrame, Tensor)> {
    let mut g = Graph::new();
    let s = g.constant(source.tensor().clone());
    let d = g.constant(depth.tensor().clone());
    let p = g.constant(Tensor::from_parts(&[6], pose.to_vector().to_vec()));
    let r = inverse_warp(&mut g, s, d, p, k)?;
    let img = ImageFrame::from_tensor(g.value(r.warped).clone())?;
    Ok((img, r.valid_mask))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autograd::check::{check_gradient, DEFAULT_EPS};
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn intrinsics(h: usize, w: usize) -> CameraIntrinsics {
        CameraIntrinsics::new(w as f64 * 0.8, w as f64 * 0.8, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
            .unwrap()
    }

    fn random_image(h: usize, w: usize, seed: u64) -> ImageFrame {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        ImageFrame::new(h, w, (0..3 * h * w).map(|_| rng.random::<f64>()).collect()).unwrap()
    }

    #[test]
    fn identity_pose_reproduces_source() {
        let (h, w) = (6, 8);
        let src = random_image(h, w, 1);
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let depth = DepthMap::new(h, w, (0..h * w).map(|_| rng.random_range(0.5..50.0)).collect()).unwrap();
        let (out, mask) = warp_frame(&src, &depth, &Pose6DoF::identity(), &intrinsics(h, w)).unwrap();
        assert!(out.tensor().max_abs_diff(src.tensor()) < 1e-12);
        assert!(mask.data().iter().all(|&m| m == 1.0));
    }

    #[test]
    fn translation_out_of_view_invalidates_everything() {
        let (h, w) = (6, 8);
        let src = random_image(h, w, 3);
        let depth = DepthMap::filled(h, w, 1.0);
        let pose = Pose6DoF::new([0.0; 3], [50.0, 0.0, 0.0]);
        let (_, mask) = warp_frame(&src, &depth, &pose, &intrinsics(h, w)).unwrap();
        assert!(mask.data().iter().all(|&m| m == 0.0));
    }

    #[test]
    fn nonpositive_depth_is_rejected() {
        let src = random_image(4, 4, 4);
        let mut depth = DepthMap::filled(4, 4, 1.0);
        depth.values_mut()[5] = 0.0;
        let err = warp_frame(&src, &depth, &Pose6DoF::identity(), &intrinsics(4, 4)).unwrap_err();
        assert_eq!(err, Error::NonPositiveDepth { index: 5, value: 0.0 });
    }

    #[test]
    fn integer_shift_moves_pixels() {
        // Plane at depth 2 with fx = 6.4; tx = 2 / 6.4 moves samples by one pixel.
        let (h, w) = (6, 8);
        let k = intrinsics(h, w);
        let src = random_image(h, w, 5);
        let depth = DepthMap::filled(h, w, 2.0);
        let pose = Pose6DoF::new([0.0; 3], [2.0 / k.fx, 0.0, 0.0]);
        let (out, mask) = warp_frame(&src, &depth, &pose, &k).unwrap();
        for y in 0..h {
            for x in 0..w - 1 {
                assert_eq!(mask.data()[y * w + x], 1.0);
                assert!((out.get(0, y, x) - src.get(0, y, x + 1)).abs() < 1e-9);
            }
            assert_eq!(mask.data()[y * w + w - 1], 0.0);
        }
    }

    #[test]
    fn pose_transform_gradient() {
        let pose = Tensor::new(&[6], vec![0.3, -0.2, 0.5, 0.1, 0.2, -0.3]).unwrap();
        let r = check_gradient(&[pose], |g, v| pose_to_transform(g, v[0]), DEFAULT_EPS, 100);
        assert!(r.rel_error < 1e-8, "{}", r.rel_error);
        let tiny = Tensor::new(&[6], vec![1e-6, -2e-6, 0.0, 0.0, 0.0, 0.0]).unwrap();
        let r = check_gradient(&[tiny], |g, v| pose_to_transform(g, v[0]), 1e-7, 100);
        assert!(r.rel_error < 1e-6, "{}", r.rel_error);
    }

    #[test]
    fn warp_gradients_wrt_depth_pose_and_image() {
        let (h, w) = (5, 7);
        let k = intrinsics(h, w);
        let src = random_image(h, w, 6);
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let depth = Tensor::new(&[h, w], (0..h * w).map(|_| rng.random_range(2.0..4.0)).collect()).unwrap();
        let pose = Tensor::new(&[6], vec![0.02, -0.03, 0.01, 0.15, -0.05, 0.1]).unwrap();
        let r = check_gradient(
            &[src.tensor().clone(), depth, pose],
            |g, v| inverse_warp(g, v[0], v[1], v[2], &k).unwrap().warped,
            DEFAULT_EPS,
            200,
        );
        assert!(r.rel_error < 1e-4, "{}", r.rel_error);
    }
}

//! Ray-cast synthetic scenes with exact depth and camera motion.
//!
//! World frame: x right, y down, z forward (the camera convention), so a
//! camera with identity pose looks down +z. `camera_path` poses map camera
//! coordinates to world coordinates.

use alloc::vec;
use alloc::vec::Vec;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::camera::{CameraIntrinsics, Pose6DoF};
use crate::image::{DepthMap, ImageFrame};
use crate::sample::SequenceSample;
use crate::{math, Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum TextureKind {
    /// Smooth checkerboard `sin(2 pi f u) sin(2 pi f v)`.
    Checker,
    /// Sinusoidal stripes along `u`.
    Stripes,
    /// Seeded value noise on a lattice of spacing `1 / f`.
    Noise,
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TextureSpec {
    pub kind: TextureKind,
    /// Cycles per meter of surface.
    pub frequency: f64,
}

impl Default for TextureSpec {
    fn default() -> Self {
        Self {
            kind: TextureKind::Noise,
            frequency: 1.5,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub enum SceneLayout {
    /// Infinite fronto-parallel plane at world `z = depth`.
    TexturedPlane { depth: f64 },
    /// Ground plane `camera_height` below the origin, a back wall at the
    /// far end of the depth range and `num_boxes` seeded boxes on the ground.
    BoxesOnGround { camera_height: f64, num_boxes: usize },
}

#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticSceneConfig {
    pub layout: SceneLayout,
    pub texture: TextureSpec,
    /// Camera-to-world pose per frame.
    pub camera_path: Vec<Pose6DoF>,
    /// `(height, width)`.
    pub image_size: (usize, usize),
    /// `(min, max)` meters; geometry must lie inside.
    pub depth_range: (f64, f64),
    /// Focal length as a multiple of the image width.
    pub focal_scale: f64,
    /// Source offsets `i - stride` and `i + stride` around each target.
    pub frame_stride: usize,
}

impl SyntheticSceneConfig {
    /// Camera translating by `step` meters per frame from the origin.
    pub fn translating_path(frames: usize, step: [f64; 3]) -> Vec<Pose6DoF> {
        (0..frames)
            .map(|i| {
                let k = i as f64;
                Pose6DoF::new([0.0; 3], [step[0] * k, step[1] * k, step[2] * k])
            })
            .collect()
    }

    pub fn textured_plane(depth: f64, image_size: (usize, usize), camera_path: Vec<Pose6DoF>) -> Self {
        Self {
            layout: SceneLayout::TexturedPlane { depth },
            texture: TextureSpec::default(),
            camera_path,
            image_size,
            depth_range: (0.5, 2.0 * depth),
            focal_scale: 0.8,
            frame_stride: 1,
        }
    }

    pub fn boxes_on_ground(image_size: (usize, usize), camera_path: Vec<Pose6DoF>) -> Self {
        Self {
            layout: SceneLayout::BoxesOnGround {
                camera_height: 1.5,
                num_boxes: 4,
            },
            texture: TextureSpec::default(),
            camera_path,
            image_size,
            depth_range: (0.5, 30.0),
            focal_scale: 0.8,
            frame_stride: 1,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let (lo, hi) = self.depth_range;
        let bad = |m: &str| Err(Error::Config(m.into()));
        if !(lo > 0.0 && hi > lo && hi.is_finite()) {
            return bad("depth_range needs 0 < min < max");
        }
        if self.camera_path.len() < 3 {
            return bad("camera_path needs at least 3 poses");
        }
        if self.frame_stride == 0 || 2 * self.frame_stride >= self.camera_path.len() {
            return bad("frame_stride must be positive and leave at least one target with both neighbors");
        }
        if self.image_size.0 < 2 || self.image_size.1 < 2 {
            return bad("image_size must be at least 2x2");
        }
        if !(self.focal_scale > 0.0) {
            return bad("focal_scale must be positive");
        }
        if !(self.texture.frequency > 0.0) {
            return bad("texture frequency must be positive");
        }
        if let SceneLayout::TexturedPlane { depth } = self.layout {
            if !(depth >= lo && depth <= hi) {
                return bad("plane depth must lie inside depth_range");
            }
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Result<CameraIntrinsics> {
        let (h, w) = self.image_size;
        let f = self.focal_scale * w as f64;
        CameraIntrinsics::new(f, f, (w as f64 - 1.0) / 2.0, (h as f64 - 1.0) / 2.0, w, h)
    }
}

/// Everything rendered for a scene.
#[derive(Clone, Debug, PartialEq)]
pub struct SyntheticScene {
    pub frames: Vec<ImageFrame>,
    pub depths: Vec<DepthMap>,
    pub intrinsics: CameraIntrinsics,
    pub camera_path: Vec<Pose6DoF>,
}

impl SyntheticScene {
    /// Target-to-source motion between two frames.
    pub fn relative_pose(&self, target: usize, source: usize) -> Pose6DoF {
        self.camera_path[source].inverse().compose(&self.camera_path[target])
    }

    /// Samples with targets `stride..n - stride` and sources at `+-stride`.
    pub fn samples(&self, stride: usize) -> Vec<SequenceSample> {
        let n = self.frames.len();
        if stride == 0 || 2 * stride >= n {
            return Vec::new();
        }
        (stride..n - stride)
            .map(|i| {
                let src = [i - stride, i + stride];
                SequenceSample {
                    target: self.frames[i].clone(),
                    sources: src.iter().map(|&j| self.frames[j].clone()).collect(),
                    intrinsics: self.intrinsics,
                    gt_depth: Some(self.depths[i].clone()),
                    gt_relative_poses: Some(src.iter().map(|&j| self.relative_pose(i, j)).collect()),
                }
            })
            .collect()
    }
}

#[derive(Clone, Copy, Debug)]
struct Aabb {
    min: [f64; 3],
    max: [f64; 3],
}

impl Aabb {
    fn contains(&self, p: [f64; 3]) -> bool {
        (0..3).all(|i| p[i] >= self.min[i] && p[i] <= self.max[i])
    }

    /// Entry distance and the axis of the entered face.
    fn intersect(&self, o: [f64; 3], d: [f64; 3]) -> Option<(f64, usize)> {
        let (mut t0, mut t1, mut axis) = (f64::NEG_INFINITY, f64::INFINITY, 0);
        for i in 0..3 {
            if d[i] == 0.0 {
                if o[i] < self.min[i] || o[i] > self.max[i] {
                    return None;
                }
                continue;
            }
            let (mut a, mut b) = ((self.min[i] - o[i]) / d[i], (self.max[i] - o[i]) / d[i]);
            if a > b {
                core::mem::swap(&mut a, &mut b);
            }
            if a > t0 {
                t0 = a;
                axis = i;
            }
            t1 = t1.min(b);
        }
        (t0 <= t1 && t0 > 0.0).then_some((t0, axis))
    }
}

/// A surface hit: ray parameter plus surface id and 2-D texture coordinates.
struct Hit {
    t: f64,
    surface: usize,
    uv: [f64; 2],
}

struct Scene {
    planes: Vec<(usize, f64, usize)>, // (axis, coordinate, surface id)
    boxes: Vec<Aabb>,
    palette: Vec<([f64; 3], [f64; 3], [f64; 2])>,
    texture: TextureSpec,
    seed: u64,
}

impl Scene {
    fn build(cfg: &SyntheticSceneConfig, seed: u64) -> Self {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut planes = Vec::new();
        let mut boxes = Vec::new();
        match cfg.layout {
            SceneLayout::TexturedPlane { depth } => planes.push((2, depth, 0)),
            SceneLayout::BoxesOnGround { camera_height, num_boxes } => {
                planes.push((1, camera_height, 0));
                planes.push((2, cfg.depth_range.1 * 0.9, 1));
                let far = cfg.depth_range.1 * 0.5;
                for _ in 0..num_boxes {
                    let size = rng.random_range(0.6..1.6);
                    let x = rng.random_range(-3.0..3.0);
                    let z = rng.random_range(4.0..far.max(5.0));
                    let height = rng.random_range(0.5..2.0f64).min(camera_height * 1.5);
                    boxes.push(Aabb {
                        min: [x - size / 2.0, camera_height - height, z - size / 2.0],
                        max: [x + size / 2.0, camera_height, z + size / 2.0],
                    });
                }
            }
        }
        let surfaces = planes.len() + boxes.len();
        let palette = (0..surfaces)
            .map(|_| {
                let mut color = || -> [f64; 3] { core::array::from_fn(|_| rng.random_range(0.1..0.9)) };
                let a = color();
                let b = color();
                let phase = [rng.random_range(0.0..1.0), rng.random_range(0.0..1.0)];
                (a, b, phase)
            })
            .collect();
        Self {
            planes,
            boxes,
            palette,
            texture: cfg.texture,
            seed,
        }
    }

    fn inside(&self, p: [f64; 3]) -> bool {
        self.planes.iter().any(|&(axis, c, _)| p[axis] >= c) || self.boxes.iter().any(|b| b.contains(p))
    }

    fn cast(&self, o: [f64; 3], d: [f64; 3]) -> Option<Hit> {
        let mut best: Option<Hit> = None;
        let mut consider = |h: Hit| {
            if best.as_ref().is_none_or(|b| h.t < b.t) {
                best = Some(h);
            }
        };
        for &(axis, c, surface) in &self.planes {
            if d[axis] > 0.0 {
                let t = (c - o[axis]) / d[axis];
                if t > 0.0 {
                    let p = point(o, d, t);
                    let uv = match axis {
                        1 => [p[0], p[2]],
                        _ => [p[0], p[1]],
                    };
                    consider(Hit { t, surface, uv });
                }
            }
        }
        for (i, b) in self.boxes.iter().enumerate() {
            if let Some((t, axis)) = b.intersect(o, d) {
                let p = point(o, d, t);
                let uv = match axis {
                    0 => [p[2], p[1]],
                    1 => [p[0], p[2]],
                    _ => [p[0], p[1]],
                };
                consider(Hit {
                    t,
                    surface: self.planes.len() + i,
                    uv,
                });
            }
        }
        best
    }

    fn shade(&self, hit: &Hit) -> [f64; 3] {
        let (a, b, phase) = self.palette[hit.surface];
        let f = self.texture.frequency;
        let (u, v) = (hit.uv[0] * f + phase[0], hit.uv[1] * f + phase[1]);
        let tau = 2.0 * core::f64::consts::PI;
        let s = match self.texture.kind {
            TextureKind::Checker => 0.5 + 0.5 * math::sin(tau * u) * math::sin(tau * v),
            TextureKind::Stripes => 0.5 + 0.5 * math::sin(tau * u),
            TextureKind::Noise => value_noise(u, v, self.seed ^ (hit.surface as u64).wrapping_mul(0x9e37_79b9)),
        };
        core::array::from_fn(|c| a[c] * (1.0 - s) + b[c] * s)
    }
}

fn point(o: [f64; 3], d: [f64; 3], t: f64) -> [f64; 3] {
    [o[0] + t * d[0], o[1] + t * d[1], o[2] + t * d[2]]
}

fn lattice(i: i64, j: i64, seed: u64) -> f64 {
    let mut x = seed ^ (i as u64).wrapping_mul(0x9e37_79b9_7f4a_7c15) ^ (j as u64).wrapping_mul(0xc2b2_ae3d_27d4_eb4f);
    x = (x ^ (x >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    x = (x ^ (x >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    x ^= x >> 31;
    (x >> 11) as f64 / (1u64 << 53) as f64
}

/// Quintic-faded value noise in [0, 1].
fn value_noise(u: f64, v: f64, seed: u64) -> f64 {
    let (fu, fv) = (math::floor(u), math::floor(v));
    let (i, j) = (fu as i64, fv as i64);
    let fade = |t: f64| t * t * t * (t * (t * 6.0 - 15.0) + 10.0);
    let (su, sv) = (fade(u - fu), fade(v - fv));
    let top = lattice(i, j, seed) * (1.0 - su) + lattice(i + 1, j, seed) * su;
    let bot = lattice(i, j + 1, seed) * (1.0 - su) + lattice(i + 1, j + 1, seed) * su;
    top * (1.0 - sv) + bot * sv
}

/// Renders every frame of the camera path and assembles samples.
pub fn generate_synthetic_scene(config: &SyntheticSceneConfig, seed: u64) -> Result<(Vec<SequenceSample>, SyntheticScene)> {
    config.validate()?;
    let k = config.intrinsics()?;
    let scene = Scene::build(config, seed);
    let (h, w) = config.image_size;
    let (lo, hi) = config.depth_range;
    let mut frames = Vec::with_capacity(config.camera_path.len());
    let mut depths = Vec::with_capacity(config.camera_path.len());
    for (fi, pose) in config.camera_path.iter().enumerate() {
        let origin = pose.translation;
        if scene.inside(origin) {
            return Err(Error::CameraInsideGeometry { frame: fi });
        }
        let r = pose.rotation_matrix();
        let mut rgb = vec![0.0; 3 * h * w];
        let mut depth = vec![0.0; h * w];
        for y in 0..h {
            for x in 0..w {
                let ray = k.ray(x as f64, y as f64);
                let d: [f64; 3] = core::array::from_fn(|i| r[i][0] * ray[0] + r[i][1] * ray[1] + r[i][2] * ray[2]);
                let hit = scene.cast(origin, d).ok_or_else(|| {
                    Error::InvalidArgument(alloc::format!("frame {fi}: ray through pixel ({x}, {y}) hits nothing"))
                })?;
                // The camera-frame ray has unit z, so the ray parameter is the depth.
                if hit.t < lo || hit.t > hi {
                    return Err(Error::InvalidArgument(alloc::format!(
                        "frame {fi}: depth {} at pixel ({x}, {y}) outside depth_range",
                        hit.t
                    )));
                }
                depth[y * w + x] = hit.t;
                let c = scene.shade(&hit);
                for ch in 0..3 {
                    rgb[ch * h * w + y * w + x] = c[ch];
                }
            }
        }
        frames.push(ImageFrame::new(h, w, rgb)?);
        depths.push(DepthMap::new(h, w, depth)?);
    }
    let out = SyntheticScene {
        frames,
        depths,
        intrinsics: k,
        camera_path: config.camera_path.clone(),
    };
    Ok((out.samples(config.frame_stride), out))
}

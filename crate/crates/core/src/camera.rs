//! Pinhole intrinsics and 6-DoF rigid motions.

use core::ops::{Add, Div, Mul, Neg, Sub};

use crate::{math, Error, Result};

/// Pinhole camera. Pixel centers sit at integer coordinates.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let k = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        k.validate()?;
        Ok(k)
    }

    pub fn validate(&self) -> Result<()> {
        let ok = self.fx > 0.0
            && self.fy > 0.0
            && self.fx.is_finite()
            && self.fy.is_finite()
            && (0.0..self.width as f64).contains(&self.cx)
            && (0.0..self.height as f64).contains(&self.cy);
        if ok {
            Ok(())
        } else {
            Err(Error::InvalidArgument(alloc::format!("invalid intrinsics {self:?}")))
        }
    }

    /// Intrinsics for the same camera imaging at a different resolution.
    pub fn scaled(&self, width: usize, height: usize) -> Self {
        let sx = width as f64 / self.width as f64;
        let sy = height as f64 / self.height as f64;
        Self {
            fx: self.fx * sx,
            fy: self.fy * sy,
            cx: (self.cx + 0.5) * sx - 0.5,
            cy: (self.cy + 0.5) * sy - 0.5,
            width,
            height,
        }
    }

    /// Viewing ray `K^-1 [u, v, 1]` (unit z).
    pub fn ray(&self, u: f64, v: f64) -> [f64; 3] {
        [(u - self.cx) / self.fx, (v - self.cy) / self.fy, 1.0]
    }

    /// Pixel coordinates of a camera-frame point with positive z.
    pub fn project(&self, p: [f64; 3]) -> [f64; 2] {
        [self.fx * p[0] / p[2] + self.cx, self.fy * p[1] / p[2] + self.cy]
    }
}

/// Scalar operations needed to evaluate a rotation matrix, so the same code
/// serves plain `f64` and forward-mode dual numbers.
pub trait RotationScalar:
    Copy + Add<Output = Self> + Sub<Output = Self> + Mul<Output = Self> + Div<Output = Self> + Neg<Output = Self>
{
    fn constant(v: f64) -> Self;
    fn value(self) -> f64;
    fn sqrt(self) -> Self;
    fn sin(self) -> Self;
    fn cos(self) -> Self;
}

impl RotationScalar for f64 {
    fn constant(v: f64) -> Self {
        v
    }
    fn value(self) -> f64 {
        self
    }
    fn sqrt(self) -> Self {
        math::sqrt(self)
    }
    fn sin(self) -> Self {
        math::sin(self)
    }
    fn cos(self) -> Self {
        math::cos(self)
    }
}

/// Rotation matrix (row-major) of an axis-angle vector.
///
/// Uses `R = I + a [v]x + b (v v^T - |v|^2 I)` with `a = sin t / t`,
/// `b = (1 - cos t) / t^2`, both expanded in `t^2` near zero so the map is
/// smooth at the identity.
pub fn rotation_matrix<T: RotationScalar>(v: [T; 3]) -> [[T; 3]; 3] {
    let one = T::constant(1.0);
    let s = v[0] * v[0] + v[1] * v[1] + v[2] * v[2];
    let (a, b) = if s.value() < 1e-8 {
        let s2 = s * s;
        (
            one - s / T::constant(6.0) + s2 / T::constant(120.0),
            T::constant(0.5) - s / T::constant(24.0) + s2 / T::constant(720.0),
        )
    } else {
        let t = s.sqrt();
        (t.sin() / t, (one - t.cos()) / s)
    };
    let [x, y, z] = v;
    let k = [
        [T::constant(0.0), -z, y],
        [z, T::constant(0.0), -x],
        [-y, x, T::constant(0.0)],
    ];
    let mut r = [[T::constant(0.0); 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            let diag = if i == j { one - b * s } else { T::constant(0.0) };
            r[i][j] = diag + a * k[i][j] + b * v[i] * v[j];
        }
    }
    r
}

/// Rigid motion `p -> R p + t` with `R` given as an axis-angle vector.
///
/// Relative poses follow the convention target-to-source: a point in the
/// target camera frame maps into the source camera frame.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct Pose6DoF {
    /// Axis-angle, radians.
    pub rotation: [f64; 3],
    /// Meters.
    pub translation: [f64; 3],
}

impl Pose6DoF {
    pub fn identity() -> Self {
        Self::default()
    }

    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_vector(v: [f64; 6]) -> Self {
        Self {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn to_vector(&self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [d, e, f] = self.translation;
        [a, b, c, d, e, f]
    }

    pub fn is_finite(&self) -> bool {
        self.to_vector().iter().all(|v| v.is_finite())
    }

    pub fn rotation_matrix(&self) -> [[f64; 3]; 3] {
        rotation_matrix(self.rotation)
    }

    pub fn from_matrix(r: [[f64; 3]; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation: axis_angle(r),
            translation,
        }
    }

    pub fn apply(&self, p: [f64; 3]) -> [f64; 3] {
        let r = self.rotation_matrix();
        let mut out = self.translation;
        for (i, o) in out.iter_mut().enumerate() {
            *o += r[i][0] * p[0] + r[i][1] * p[1] + r[i][2] * p[2];
        }
        out
    }

    /// `self ∘ other`: apply `other` first.
    pub fn compose(&self, other: &Pose6DoF) -> Pose6DoF {
        let ra = self.rotation_matrix();
        let rb = other.rotation_matrix();
        let r = matmul3(&ra, &rb);
        Pose6DoF::from_matrix(r, self.apply(other.translation))
    }

    pub fn inverse(&self) -> Pose6DoF {
        let r = self.rotation_matrix();
        let rt = transpose3(&r);
        let t = self.translation;
        let mut ti = [0.0; 3];
        for (i, o) in ti.iter_mut().enumerate() {
            *o = -(rt[i][0] * t[0] + rt[i][1] * t[1] + rt[i][2] * t[2]);
        }
        Pose6DoF::from_matrix(rt, ti)
    }
}

pub(crate) fn matmul3(a: &[[f64; 3]; 3], b: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    r
}

pub(crate) fn transpose3(a: &[[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut r = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            r[i][j] = a[j][i];
        }
    }
    r
}

/// Axis-angle vector of a rotation matrix (log map).
pub fn axis_angle(r: [[f64; 3]; 3]) -> [f64; 3] {
    let trace = r[0][0] + r[1][1] + r[2][2];
    let cos = ((trace - 1.0) / 2.0).clamp(-1.0, 1.0);
    let theta = math::acos(cos);
    let skew = [r[2][1] - r[1][2], r[0][2] - r[2][0], r[1][0] - r[0][1]];
    if theta < 1e-7 {
        return [skew[0] / 2.0, skew[1] / 2.0, skew[2] / 2.0];
    }
    if core::f64::consts::PI - theta < 1e-6 {
        // R = 2 a a^T - I near a half turn.
        let mut axis = [0.0; 3];
        let i = (0..3)
            .max_by(|&a, &b| r[a][a].partial_cmp(&r[b][b]).unwrap())
            .unwrap();
        axis[i] = math::sqrt(((r[i][i] + 1.0) / 2.0).max(0.0));
        for j in 0..3 {
            if j != i {
                axis[j] = (r[i][j] + r[j][i]) / (4.0 * axis[i]);
            }
        }
        return [axis[0] * theta, axis[1] * theta, axis[2] * theta];
    }
    let k = theta / (2.0 * math::sin(theta));
    [skew[0] * k, skew[1] * k, skew[2] * k]
}

//! Pinhole projection under rigid camera motion, extended with per-pixel
//! multiplicative object motion.
//!
//! Pixel convention: `i` is the row (image y), `j` the column (image x). A pixel
//! is lifted as `x = d * K^-1 (j, i, 1)^T`, so the returned projection is
//! `(u, v) = (column, row)`.

use nalgebra::{Matrix3, Matrix4, Vector3};
use serde::{Deserialize, Serialize};

use crate::error::{contract, Error, Result};
use crate::image::ImageGrid;
use crate::warp::FlowField;

/// Projections with `|z| < DEGENERATE_DEPTH` are flagged invalid.
pub const DEGENERATE_DEPTH: f64 = 1e-12;

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CameraModel {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: usize,
    pub height: usize,
}

impl CameraModel {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64, width: usize, height: usize) -> Result<Self> {
        let cam = Self {
            fx,
            fy,
            cx,
            cy,
            width,
            height,
        };
        cam.validate()?;
        Ok(cam)
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.fx, self.fy, self.cx, self.cy]
            .iter()
            .all(|v| v.is_finite());
        if !finite || self.fx <= 0.0 || self.fy <= 0.0 {
            return Err(contract(format!(
                "camera focal lengths must be finite and positive (fx={}, fy={})",
                self.fx, self.fy
            )));
        }
        Ok(())
    }

    pub fn intrinsics(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    /// Viewing ray `K^-1 (j, i, 1)` with unit z-component.
    #[inline]
    pub fn ray(&self, i: f64, j: f64) -> Vector3<f64> {
        Vector3::new((j - self.cx) / self.fx, (i - self.cy) / self.fy, 1.0)
    }

    /// Camera for the left-right mirrored image.
    pub fn flipped_horizontally(&self) -> Self {
        Self {
            cx: self.width as f64 - 1.0 - self.cx,
            ..*self
        }
    }
}

/// 6-DoF pose as axis-angle rotation (radians) and translation.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct PoseParams {
    pub rotation: [f64; 3],
    pub translation: [f64; 3],
}

impl PoseParams {
    pub fn new(rotation: [f64; 3], translation: [f64; 3]) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_slice(v: &[f64]) -> Self {
        Self {
            rotation: [v[0], v[1], v[2]],
            translation: [v[3], v[4], v[5]],
        }
    }

    pub fn to_array(&self) -> [f64; 6] {
        let [a, b, c] = self.rotation;
        let [d, e, f] = self.translation;
        [a, b, c, d, e, f]
    }

    pub fn scaled(&self, factor: f64) -> Self {
        Self {
            rotation: self.rotation.map(|v| v * factor),
            translation: self.translation.map(|v| v * factor),
        }
    }
}

/// Homogeneous 4x4 rigid transform taking camera-`t` coordinates to the new pose.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct RigidTransform {
    pub matrix: Matrix4<f64>,
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            matrix: Matrix4::identity(),
        }
    }

    pub fn from_parts(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        let mut m = Matrix4::identity();
        m.fixed_view_mut::<3, 3>(0, 0).copy_from(&rotation);
        m.fixed_view_mut::<3, 1>(0, 3).copy_from(&translation);
        Self { matrix: m }
    }

    pub fn translation_only(t: [f64; 3]) -> Self {
        Self::from_parts(Matrix3::identity(), Vector3::from(t))
    }

    pub fn rotation(&self) -> Matrix3<f64> {
        self.matrix.fixed_view::<3, 3>(0, 0).into_owned()
    }

    pub fn translation(&self) -> Vector3<f64> {
        self.matrix.fixed_view::<3, 1>(0, 3).into_owned()
    }

    #[inline]
    pub fn apply(&self, x: &Vector3<f64>) -> Vector3<f64> {
        self.rotation() * x + self.translation()
    }

    /// `self` after `first`.
    pub fn compose(&self, first: &RigidTransform) -> RigidTransform {
        RigidTransform {
            matrix: self.matrix * first.matrix,
        }
    }

    /// Closed-form inverse `[R^T, -R^T t]`.
    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation().transpose();
        RigidTransform::from_parts(rt, -(rt * self.translation()))
    }
}

#[inline]
pub(crate) fn skew(w: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -w.z, w.y, w.z, 0.0, -w.x, -w.y, w.x, 0.0)
}

/// Coefficients of `R = I + a K + b K^2` and their `(d/dθ)/θ` derivatives.
struct RodriguesCoeffs {
    a: f64,
    b: f64,
    da: f64,
    db: f64,
}

fn rodrigues_coeffs(theta: f64) -> RodriguesCoeffs {
    let t2 = theta * theta;
    if theta < 1e-2 {
        // Taylor series; truncation error below 1e-16 on this range.
        let t4 = t2 * t2;
        let t6 = t4 * t2;
        RodriguesCoeffs {
            a: 1.0 - t2 / 6.0 + t4 / 120.0 - t6 / 5040.0,
            b: 0.5 - t2 / 24.0 + t4 / 720.0 - t6 / 40320.0,
            da: -1.0 / 3.0 + t2 / 30.0 - t4 / 840.0 + t6 / 45360.0,
            db: -1.0 / 12.0 + t2 / 180.0 - t4 / 6720.0 + t6 / 453600.0,
        }
    } else {
        let (s, c) = theta.sin_cos();
        RodriguesCoeffs {
            a: s / theta,
            b: (1.0 - c) / t2,
            da: (theta * c - s) / (t2 * theta),
            db: (theta * s - 2.0 * (1.0 - c)) / (t2 * t2),
        }
    }
}

pub(crate) fn rotation_from_axis_angle(w: &Vector3<f64>) -> Matrix3<f64> {
    let k = skew(w);
    let co = rodrigues_coeffs(w.norm());
    Matrix3::identity() + k * co.a + k * k * co.b
}

/// `dR/dw_k` for k = 0, 1, 2.
pub(crate) fn rotation_jacobian(w: &Vector3<f64>) -> [Matrix3<f64>; 3] {
    let k = skew(w);
    let k2 = k * k;
    let co = rodrigues_coeffs(w.norm());
    std::array::from_fn(|axis| {
        let e = skew(&Vector3::ith(axis, 1.0));
        e * co.a + (e * k + k * e) * co.b + k * (co.da * w[axis]) + k2 * (co.db * w[axis])
    })
}

/// Rodrigues rotation from the axis-angle part, translation in the last column.
pub fn pose_to_transform(p: &PoseParams) -> Result<RigidTransform> {
    if p.to_array().iter().any(|v| !v.is_finite()) {
        return Err(contract(format!("non-finite pose parameters {:?}", p)));
    }
    let w = Vector3::from(p.rotation);
    if w.norm() >= std::f64::consts::PI {
        return Err(contract(format!(
            "rotation angle {} outside the principal branch",
            w.norm()
        )));
    }
    Ok(RigidTransform::from_parts(
        rotation_from_axis_angle(&w),
        Vector3::from(p.translation),
    ))
}

/// Lifts pixel `(row i, col j)` at depth `d` to camera coordinates.
pub fn backproject(cam: &CameraModel, i: f64, j: f64, d: f64) -> Result<Vector3<f64>> {
    if d.is_nan() || d <= 0.0 {
        return Err(Error::InvalidDepth(d));
    }
    Ok(cam.ray(i, j) * d)
}

/// Elementwise `(1 + t) ⊙ x`.
#[inline]
pub fn apply_object_motion(x: &Vector3<f64>, t: &Vector3<f64>) -> Vector3<f64> {
    Vector3::new((1.0 + t.x) * x.x, (1.0 + t.y) * x.y, (1.0 + t.z) * x.z)
}

/// Image-plane landing point of a transformed camera point.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct Projection {
    /// Column coordinate.
    pub u: f64,
    /// Row coordinate.
    pub v: f64,
    /// Depth along the target optical axis.
    pub z: f64,
    /// False behind the camera or when degenerate / non-finite.
    pub valid: bool,
}

#[inline]
pub(crate) fn project_camera_point(cam: &CameraModel, xp: &Vector3<f64>) -> Projection {
    let z = xp.z;
    if !(z.abs() >= DEGENERATE_DEPTH) {
        return Projection {
            u: 0.0,
            v: 0.0,
            z,
            valid: false,
        };
    }
    let u = (cam.fx * xp.x + cam.cx * z) / z;
    let v = (cam.fy * xp.y + cam.cy * z) / z;
    let valid = z > 0.0 && u.is_finite() && v.is_finite();
    Projection { u, v, z, valid }
}

/// Moves `x` by `r` and projects it through `K`.
pub fn project(cam: &CameraModel, r: &RigidTransform, x: &Vector3<f64>) -> Projection {
    project_camera_point(cam, &r.apply(x))
}

/// Per-pixel backproject, optional object motion, rigid transform and projection.
pub fn project_grid(
    cam: &CameraModel,
    r: &RigidTransform,
    inv_depth: &ImageGrid,
    motion: Option<&ImageGrid>,
) -> Result<FlowField> {
    let (h, w, ch) = inv_depth.dims();
    if ch != 1 {
        return Err(contract("inverse depth must have one channel"));
    }
    if let Some(m) = motion {
        if m.dims() != (h, w, 3) {
            return Err(contract(format!(
                "translation field {:?} does not match inverse depth {h}x{w}",
                m.dims()
            )));
        }
    }
    let mut flow = FlowField::new(h, w);
    let rot = r.rotation();
    let tr = r.translation();
    for i in 0..h {
        for j in 0..w {
            let disp = inv_depth.get(i, j, 0);
            if !(disp > 0.0) {
                return Err(Error::InvalidDepth(1.0 / disp));
            }
            let mut x = backproject(cam, i as f64, j as f64, 1.0 / disp)?;
            if let Some(m) = motion {
                let t = Vector3::from_column_slice(m.pixel(i, j));
                x = apply_object_motion(&x, &t);
            }
            let p = project_camera_point(cam, &(rot * x + tr));
            flow.set(i, j, p);
        }
    }
    Ok(flow)
}

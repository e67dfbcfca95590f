//! Pinhole cameras, plane-induced homographies and image warping.
//!
//! Conventions used throughout the crate:
//!
//! * Poses are world-to-camera: `x_cam = R * x_world + t`.
//! * Pixel centres sit on integer coordinates, origin top-left, `+u` right,
//!   `+v` down.
//! * Depth `z` is the camera-frame z coordinate, not the range along the ray.

use nalgebra::{Matrix3, Point2, Vector3};
use ndarray::{Array2, Array3, ArrayView3};

use crate::error::{Error, Result};

/// Tolerance on `RᵀR = I` when validating a pose.
pub const ROTATION_TOLERANCE: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
}

impl CameraIntrinsics {
    pub fn new(fx: f64, fy: f64, cx: f64, cy: f64) -> Result<Self> {
        if !(fx > 0.0 && fy > 0.0 && fx.is_finite() && fy.is_finite()) {
            return Err(Error::domain(format!(
                "focal lengths must be positive and finite, got fx={fx}, fy={fy}"
            )));
        }
        if !(cx.is_finite() && cy.is_finite()) {
            return Err(Error::domain("principal point must be finite"));
        }
        Ok(Self { fx, fy, cx, cy })
    }

    pub fn matrix(&self) -> Matrix3<f64> {
        Matrix3::new(self.fx, 0.0, self.cx, 0.0, self.fy, self.cy, 0.0, 0.0, 1.0)
    }

    pub fn inverse_matrix(&self) -> Matrix3<f64> {
        Matrix3::new(
            1.0 / self.fx,
            0.0,
            -self.cx / self.fx,
            0.0,
            1.0 / self.fy,
            -self.cy / self.fy,
            0.0,
            0.0,
            1.0,
        )
    }

    /// Intrinsics of an image decimated by `factor` (pixel `j` of the small
    /// image sits at pixel `factor * j` of the large one).
    pub fn decimated(&self, factor: f64) -> Self {
        Self {
            fx: self.fx / factor,
            fy: self.fy / factor,
            cx: self.cx / factor,
            cy: self.cy / factor,
        }
    }
}

/// World-to-camera rigid transform.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CameraPose {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl CameraPose {
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self> {
        let err = (rotation.transpose() * rotation - Matrix3::identity()).abs().max();
        if !(err <= ROTATION_TOLERANCE) {
            return Err(Error::domain(format!(
                "rotation is not orthonormal (max |RᵀR - I| = {err:e})"
            )));
        }
        if rotation.determinant() <= 0.0 {
            return Err(Error::domain("rotation has negative determinant"));
        }
        if !translation.iter().all(|v| v.is_finite()) {
            return Err(Error::domain("translation must be finite"));
        }
        Ok(Self {
            rotation,
            translation,
        })
    }

    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    /// Camera at `eye` looking at `target`; `up` is the approximate world
    /// direction of image `-v`.
    pub fn look_at(eye: Vector3<f64>, target: Vector3<f64>, up: Vector3<f64>) -> Result<Self> {
        let forward = (target - eye)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at: eye and target coincide"))?;
        // Image +v points down, so camera y is the negated up vector projected.
        let right = (-up)
            .cross(&forward)
            .try_normalize(1e-12)
            .ok_or_else(|| Error::domain("look_at: up is parallel to view direction"))?;
        let down = forward.cross(&right);
        let rotation = Matrix3::from_rows(&[right.transpose(), down.transpose(), forward.transpose()]);
        let translation = -(rotation * eye);
        Self::new(rotation, translation)
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }

    /// Camera centre in world coordinates, `-Rᵀt`.
    pub fn center(&self) -> Vector3<f64> {
        -(self.rotation.transpose() * self.translation)
    }

    /// Camera z axis expressed in world coordinates (third row of `R`).
    pub fn principal_axis(&self) -> Vector3<f64> {
        self.rotation.row(2).transpose()
    }

    pub fn to_camera(&self, world: &Vector3<f64>) -> Vector3<f64> {
        self.rotation * world + self.translation
    }

    pub fn to_world(&self, cam: &Vector3<f64>) -> Vector3<f64> {
        self.rotation.transpose() * (cam - self.translation)
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Viewpoint {
    pub intrinsics: CameraIntrinsics,
    pub pose: CameraPose,
    pub width: usize,
    pub height: usize,
}

impl Viewpoint {
    pub const MIN_SIZE: usize = 8;

    pub fn new(
        intrinsics: CameraIntrinsics,
        pose: CameraPose,
        width: usize,
        height: usize,
    ) -> Result<Self> {
        if width < Self::MIN_SIZE || height < Self::MIN_SIZE {
            return Err(Error::domain(format!(
                "viewpoint must be at least {0}x{0}, got {width}x{height}",
                Self::MIN_SIZE
            )));
        }
        Ok(Self {
            intrinsics,
            pose,
            width,
            height,
        })
    }

    /// The same camera observing an image decimated by `factor`. The size
    /// floor is not enforced so coarse pyramid levels stay representable.
    pub fn decimated(&self, factor: usize) -> Self {
        Self {
            intrinsics: self.intrinsics.decimated(factor as f64),
            pose: self.pose,
            width: self.width / factor,
            height: self.height / factor,
        }
    }

    pub fn center(&self) -> Vector3<f64> {
        self.pose.center()
    }
}

/// A pixel with its camera-frame depth.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Projection {
    pub pixel: Point2<f64>,
    pub depth: f64,
}

/// Back-project pixel `(u, v)` to the world point whose camera depth is `z`.
pub fn unproject(vp: &Viewpoint, pixel: (f64, f64), z: f64) -> Result<Vector3<f64>> {
    if !(z > 0.0) {
        return Err(Error::domain(format!("unproject depth must be positive, got {z}")));
    }
    Ok(unproject_unchecked(vp, pixel, z))
}

#[inline]
pub(crate) fn unproject_unchecked(vp: &Viewpoint, (u, v): (f64, f64), z: f64) -> Vector3<f64> {
    let k = &vp.intrinsics;
    let cam = Vector3::new((u - k.cx) / k.fx * z, (v - k.cy) / k.fy * z, z);
    vp.pose.to_world(&cam)
}

/// Pinhole projection. Points behind the camera keep their negative depth.
pub fn project(vp: &Viewpoint, world: &Vector3<f64>) -> Result<Projection> {
    let cam = vp.pose.to_camera(world);
    if cam.z == 0.0 {
        return Err(Error::domain("point lies on the camera's focal plane"));
    }
    let k = &vp.intrinsics;
    Ok(Projection {
        pixel: Point2::new(k.fx * cam.x / cam.z + k.cx, k.fy * cam.y / cam.z + k.cy),
        depth: cam.z,
    })
}

/// Plane-induced homography mapping target pixels to source pixels for the
/// target-frame plane at depth `z`, normalised so `H[2][2] = 1`.
pub fn homography(src: &Viewpoint, tgt: &Viewpoint, z: f64) -> Result<Matrix3<f64>> {
    if !(z > 0.0) {
        return Err(Error::domain(format!("homography depth must be positive, got {z}")));
    }
    let mut h = HomographyFamily::new(src, tgt)?.at(z);
    let s = h[(2, 2)];
    if s != 0.0 {
        h /= s;
    }
    Ok(h)
}

/// `H(z) = A + B / z`, factored so a plane sweep costs one 3x3 product per
/// pixel and plane.
#[derive(Debug, Clone, Copy)]
pub struct HomographyFamily {
    pub rotational: Matrix3<f64>,
    pub translational: Matrix3<f64>,
}

impl HomographyFamily {
    pub fn new(src: &Viewpoint, tgt: &Viewpoint) -> Result<Self> {
        let k_src = src.intrinsics.matrix();
        let k_tgt_inv = tgt
            .intrinsics
            .matrix()
            .try_inverse()
            .ok_or_else(|| Error::domain("target intrinsics are singular"))?;
        if k_src.determinant() == 0.0 {
            return Err(Error::domain("source intrinsics are singular"));
        }
        let r_src = src.pose.rotation();
        let r_tgt = tgt.pose.rotation();
        // R_src⁻¹ t_src - R_tgt⁻¹ t_tgt
        let offset = r_src.transpose() * src.pose.translation()
            - r_tgt.transpose() * tgt.pose.translation();
        // aᵀ R_tgt with a the target principal axis, i.e. the unit z row.
        let axis_row = Vector3::z().transpose() * r_tgt;
        let rotational = k_src * r_src * r_tgt.transpose() * k_tgt_inv;
        let translational = k_src * r_src * (offset * axis_row) * r_tgt.transpose() * k_tgt_inv;
        Ok(Self {
            rotational,
            translational,
        })
    }

    pub fn at(&self, z: f64) -> Matrix3<f64> {
        self.rotational + self.translational / z
    }

    /// Source pixel for target pixel `(u, v)` on the plane at depth `z`;
    /// `None` when the point falls behind the source camera.
    #[inline]
    pub fn transfer(&self, u: f64, v: f64, z: f64) -> Option<(f64, f64)> {
        let x = Vector3::new(u, v, 1.0);
        let p = self.rotational * x + (self.translational * x) / z;
        if p.z <= 1e-12 {
            return None;
        }
        Some((p.x / p.z, p.y / p.z))
    }
}

/// Bilinear sample of an `h × w × F` map into `out`. Coordinates outside
/// `[0, w-1] × [0, h-1]` zero the output and return `false`.
#[inline]
pub fn sample_bilinear(map: &ArrayView3<f32>, x: f64, y: f64, out: &mut [f32]) -> bool {
    let (h, w, f) = map.dim();
    debug_assert_eq!(out.len(), f);
    if !(x >= 0.0 && y >= 0.0 && x <= (w - 1) as f64 && y <= (h - 1) as f64) {
        out.iter_mut().for_each(|o| *o = 0.0);
        return false;
    }
    let x0 = (x.floor() as usize).min(w - 1);
    let y0 = (y.floor() as usize).min(h - 1);
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = (x - x0 as f64) as f32;
    let fy = (y - y0 as f64) as f32;
    let w00 = (1.0 - fx) * (1.0 - fy);
    let w01 = fx * (1.0 - fy);
    let w10 = (1.0 - fx) * fy;
    let w11 = fx * fy;
    for (c, o) in out.iter_mut().enumerate() {
        *o = w00 * map[[y0, x0, c]]
            + w01 * map[[y0, x1, c]]
            + w10 * map[[y1, x0, c]]
            + w11 * map[[y1, x1, c]];
    }
    true
}

/// Warp a source map onto an `out_h × out_w` target grid: each output pixel
/// samples the input at `H · [u, v, 1]ᵀ`. Out-of-bounds pixels are zero and
/// masked `false`.
pub fn warp_map(
    map: &ArrayView3<f32>,
    h: &Matrix3<f64>,
    out_h: usize,
    out_w: usize,
) -> (Array3<f32>, Array2<bool>) {
    let f = map.dim().2;
    let mut out = Array3::<f32>::zeros((out_h, out_w, f));
    let mut mask = Array2::<bool>::from_elem((out_h, out_w), false);
    let mut buf = vec![0.0f32; f];
    for v in 0..out_h {
        for u in 0..out_w {
            let p = h * Vector3::new(u as f64, v as f64, 1.0);
            if p.z.abs() < 1e-12 {
                continue;
            }
            if sample_bilinear(map, p.x / p.z, p.y / p.z, &mut buf) {
                mask[[v, u]] = true;
                for c in 0..f {
                    out[[v, u, c]] = buf[c];
                }
            }
        }
    }
    (out, mask)
}

/// Unit world-frame viewing direction through every pixel centre.
pub fn ray_directions(vp: &Viewpoint) -> Array3<f64> {
    let mut out = Array3::<f64>::zeros((vp.height, vp.width, 3));
    for v in 0..vp.height {
        for u in 0..vp.width {
            let d = pixel_direction(vp, u as f64, v as f64);
            out[[v, u, 0]] = d.x;
            out[[v, u, 1]] = d.y;
            out[[v, u, 2]] = d.z;
        }
    }
    out
}

#[inline]
pub fn pixel_direction(vp: &Viewpoint, u: f64, v: f64) -> Vector3<f64> {
    let k = &vp.intrinsics;
    let cam = Vector3::new((u - k.cx) / k.fx, (v - k.cy) / k.fy, 1.0);
    (vp.pose.rotation().transpose() * cam).normalize()
}

//! Frames, rigid transforms, the gimbal kinematic chain and the pinhole model.
//!
//! Everything downstream computes in the culvert coordinate frame (CCF):
//! right-handed, `+x` along the bore, `+z` up. Two cameras are modeled:
//! camera-1 is a fixed forward-looking stereo camera used for proposals,
//! camera-2 sits on a pan-tilt gimbal and is the one being planned for.
//!
//! Camera frames follow the usual optical convention (`+z` out of the lens,
//! `+x` right, `+y` down). The fixed remapping between a forward-looking
//! camera and the CCF (`+z_C -> +x_S`, `+x_C -> -y_S`, `+y_C -> -z_S`) is
//! carried as calibration data inside [`RigConfig`], not baked into any
//! operation.

use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Behind-camera threshold on the optical-axis coordinate, in meters.
pub const Z_MIN: f64 = 1e-6;

const ORTHO_TOL: f64 = 1e-9;
/// Slack applied when checking gimbal limits, so poses sitting exactly on a
/// bound (grid endpoints, projected refinement iterates) are accepted.
const LIMIT_TOL: f64 = 1e-9;

#[derive(Debug, Error)]
pub enum GeometryError {
    #[error("rotation matrix is not orthonormal (max deviation {deviation:.3e})")]
    NotOrthonormal { deviation: f64 },
    #[error("gimbal state ({yaw}, {pitch}, {axial}) violates rig limits")]
    LimitViolation { yaw: f64, pitch: f64, axial: f64 },
    #[error("point is behind the camera (z = {z:.6} m)")]
    BehindCamera { z: f64 },
    #[error("depth must be finite and > 0, got {depth}")]
    InvalidDepth { depth: f64 },
    #[error("invalid camera intrinsics: {reason}")]
    InvalidIntrinsics { reason: String },
    #[error("invalid rig configuration: {reason}")]
    InvalidRig { reason: String },
}

/// A rigid body transform: rotation plus translation, applied as `R p + t`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigidTransform {
    rotation: Matrix3<f64>,
    translation: Vector3<f64>,
}

impl RigidTransform {
    /// Build a transform, verifying the rotation is orthonormal with
    /// determinant +1 (within 1e-9).
    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Result<Self, GeometryError> {
        let gram = rotation.transpose() * rotation;
        let mut dev: f64 = 0.0;
        for i in 0..3 {
            for j in 0..3 {
                let target = if i == j { 1.0 } else { 0.0 };
                dev = dev.max((gram[(i, j)] - target).abs());
            }
        }
        dev = dev.max((rotation.determinant() - 1.0).abs());
        if dev > ORTHO_TOL {
            return Err(GeometryError::NotOrthonormal { deviation: dev });
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

    pub fn from_translation(translation: Vector3<f64>) -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation,
        }
    }

    /// Rotation about the frame `+z` axis; positive angle turns `+x` toward `+y`.
    pub fn rot_z(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, -s, 0.0, s, c, 0.0, 0.0, 0.0, 1.0),
            translation: Vector3::zeros(),
        }
    }

    /// Rotation about the frame `+y` axis; positive angle turns `+x` toward `-z`.
    pub fn rot_y(angle: f64) -> Self {
        let (s, c) = angle.sin_cos();
        Self {
            rotation: Matrix3::new(c, 0.0, s, 0.0, 1.0, 0.0, -s, 0.0, c),
            translation: Vector3::zeros(),
        }
    }

    pub fn rotation(&self) -> &Matrix3<f64> {
        &self.rotation
    }

    pub fn translation(&self) -> &Vector3<f64> {
        &self.translation
    }
}

/// `compose(a, b)` applies `b` first, then `a`.
pub fn compose(a: &RigidTransform, b: &RigidTransform) -> RigidTransform {
    RigidTransform {
        rotation: a.rotation * b.rotation,
        translation: a.rotation * b.translation + a.translation,
    }
}

pub fn inverse(t: &RigidTransform) -> RigidTransform {
    let rot_inv = t.rotation.transpose();
    RigidTransform {
        rotation: rot_inv,
        translation: -(rot_inv * t.translation),
    }
}

pub fn transform_point(t: &RigidTransform, p: &Vector3<f64>) -> Vector3<f64> {
    t.rotation * p + t.translation
}

impl RigidTransform {
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        compose(self, other)
    }

    pub fn inverse(&self) -> RigidTransform {
        inverse(self)
    }

    pub fn transform_point(&self, p: &Vector3<f64>) -> Vector3<f64> {
        transform_point(self, p)
    }
}

/// Gimbal configuration: yaw, pitch and axial translation of the platform.
///
/// Positive yaw turns the optical axis toward CCF `+y` (left), positive pitch
/// toward CCF `-z` (down); both follow the right-hand rule about the gimbal
/// `+z` and `+y` axes.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GimbalState {
    /// Pan angle psi, radians.
    pub yaw: f64,
    /// Tilt angle phi, radians.
    pub pitch: f64,
    /// Platform translation along CCF +x, meters.
    pub axial: f64,
}

impl GimbalState {
    pub fn new(yaw: f64, pitch: f64, axial: f64) -> Self {
        Self { yaw, pitch, axial }
    }
}

/// Pinhole intrinsics of a rectified camera. No distortion model.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CameraIntrinsics {
    pub fx: f64,
    pub fy: f64,
    pub cx: f64,
    pub cy: f64,
    pub width: u32,
    pub height: u32,
}

impl CameraIntrinsics {
    pub fn new(
        fx: f64,
        fy: f64,
        cx: f64,
        cy: f64,
        width: u32,
        height: u32,
    ) -> Result<Self, GeometryError> {
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

    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |reason: &str| GeometryError::InvalidIntrinsics {
            reason: reason.to_string(),
        };
        if !(self.fx > 0.0 && self.fy > 0.0) {
            return Err(bad("focal lengths must be positive"));
        }
        if !(self.cx > 0.0 && self.cx < self.width as f64) {
            return Err(bad("cx must lie inside the image"));
        }
        if !(self.cy > 0.0 && self.cy < self.height as f64) {
            return Err(bad("cy must lie inside the image"));
        }
        Ok(())
    }
}

/// The fixed axis remapping from an optical camera frame to the CCF for a
/// forward-looking camera: `+z_C -> +x_S`, `+x_C -> -y_S`, `+y_C -> -z_S`.
pub fn camera_axis_remap() -> Matrix3<f64> {
    // Columns are the images of the camera axes expressed in the CCF.
    Matrix3::new(
        0.0, 0.0, 1.0, //
        -1.0, 0.0, 0.0, //
        0.0, -1.0, 0.0,
    )
}

/// Static rig calibration: camera extrinsics, gimbal placement and actuation
/// limits. Angles are radians here; the config file takes degrees.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RigConfig {
    /// Camera-1 to CCF extrinsic.
    pub t_sc1: RigidTransform,
    /// Camera-2 to gimbal extrinsic.
    pub t_gc2: RigidTransform,
    /// Gimbal rotation center in the CCF when the platform is at x = 0.
    pub gimbal_origin_in_ccf: Vector3<f64>,
    /// Full pan range, radians; yaw is limited to +/- pan_limit / 2.
    pub pan_limit: f64,
    /// Full tilt range, radians; pitch is limited to +/- tilt_limit / 2.
    pub tilt_limit: f64,
    /// Allowed platform translation interval along CCF +x, meters.
    pub x_bounds: (f64, f64),
}

impl RigConfig {
    pub fn validate(&self) -> Result<(), GeometryError> {
        let bad = |reason: &str| GeometryError::InvalidRig {
            reason: reason.to_string(),
        };
        if !(self.pan_limit > 0.0 && self.tilt_limit > 0.0) {
            return Err(bad("pan and tilt limits must be positive"));
        }
        // NaN bounds must fail too, hence the negated comparison.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.x_bounds.0 <= self.x_bounds.1) {
            return Err(bad("x_bounds interval is empty"));
        }
        Ok(())
    }

    pub fn within_limits(&self, g: &GimbalState) -> bool {
        g.yaw.abs() <= self.pan_limit / 2.0 + LIMIT_TOL
            && g.pitch.abs() <= self.tilt_limit / 2.0 + LIMIT_TOL
            && g.axial >= self.x_bounds.0 - LIMIT_TOL
            && g.axial <= self.x_bounds.1 + LIMIT_TOL
    }

    /// Same rig with a different platform translation interval. Used by the
    /// mission controller, which plans each waypoint inside its own segment.
    pub fn with_x_bounds(&self, x_bounds: (f64, f64)) -> RigConfig {
        RigConfig {
            x_bounds,
            ..self.clone()
        }
    }
}

impl Default for RigConfig {
    /// Platform defaults at the 1.2 m-bore scale: a 120 deg pan / 45 deg tilt
    /// gimbal, cameras 0.2 m below the bore axis. The gimbal mounting height
    /// and camera-2 mount offset are simulator defaults, not calibration
    /// ground truth.
    fn default() -> Self {
        let remap = camera_axis_remap();
        RigConfig {
            t_sc1: RigidTransform::new(remap, Vector3::new(0.0, 0.0, -0.2)).unwrap(),
            t_gc2: RigidTransform::new(remap, Vector3::zeros()).unwrap(),
            gimbal_origin_in_ccf: Vector3::new(0.0, 0.0, -0.2),
            pan_limit: 120f64.to_radians(),
            tilt_limit: 45f64.to_radians(),
            x_bounds: (0.0, 66.0),
        }
    }
}

/// The camera-2 pose in the CCF for a gimbal state:
/// `T_SG(x) * Rz(yaw) * Ry(pitch) * T_GC2`, pitch applied after yaw in the
/// chain as written.
pub fn camera2_to_ccf(rig: &RigConfig, g: &GimbalState) -> Result<RigidTransform, GeometryError> {
    if !rig.within_limits(g) {
        return Err(GeometryError::LimitViolation {
            yaw: g.yaw,
            pitch: g.pitch,
            axial: g.axial,
        });
    }
    Ok(camera2_to_ccf_unchecked(rig, g))
}

/// Same chain without the limit check. The planner evaluates costs only at
/// in-bound states it constructs itself.
pub(crate) fn camera2_to_ccf_unchecked(rig: &RigConfig, g: &GimbalState) -> RigidTransform {
    let t_sg = RigidTransform::from_translation(
        rig.gimbal_origin_in_ccf + Vector3::new(g.axial, 0.0, 0.0),
    );
    compose(
        &compose(
            &compose(&t_sg, &RigidTransform::rot_z(g.yaw)),
            &RigidTransform::rot_y(g.pitch),
        ),
        &rig.t_gc2,
    )
}

/// Pinhole projection of a camera-frame point to pixel coordinates.
///
/// Out-of-frame pixels are legal output; only points at or behind the image
/// plane are rejected.
pub fn project(k: &CameraIntrinsics, p: &Vector3<f64>) -> Result<(f64, f64), GeometryError> {
    if p.z <= Z_MIN {
        return Err(GeometryError::BehindCamera { z: p.z });
    }
    Ok((
        k.fx * p.x / p.z + k.cx, //
        k.fy * p.y / p.z + k.cy,
    ))
}

/// Inverse pinhole map: pixel plus depth to a camera-frame point.
pub fn backproject(
    k: &CameraIntrinsics,
    u: f64,
    v: f64,
    depth: f64,
) -> Result<Vector3<f64>, GeometryError> {
    if !(depth > 0.0 && depth.is_finite()) {
        return Err(GeometryError::InvalidDepth { depth });
    }
    Ok(Vector3::new(
        (u - k.cx) * depth / k.fx,
        (v - k.cy) * depth / k.fy,
        depth,
    ))
}

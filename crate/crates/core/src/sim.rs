//! Deterministic synthetic culvert.
//!
//! Ray-casts depth images of an open-ended cylinder from any interior
//! camera pose, with seeded per-pixel Gaussian depth noise and a seeded
//! invalid-pixel mask. Planted defect patches carry exact ground-truth
//! surface positions and can be turned into proposal boxes, which makes the
//! whole pipeline testable without a live model endpoint.
//!
//! Defect angular positions are measured from the invert (bottom of the
//! bore), increasing toward CCF `+y`.

use crate::geometry::{project, CameraIntrinsics, RigidTransform, Z_MIN};
use crate::roi::{DepthImage, RoiProposal};
use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("camera center is not strictly inside the cylinder")]
    CameraOutsideCylinder,
    #[error("defect {index} is not visible from this pose")]
    NotVisible { index: usize },
    #[error("no defect with index {index}")]
    UnknownDefect { index: usize },
    #[error("invalid scene: {reason}")]
    InvalidScene { reason: String },
}

/// A planted ground-truth defect patch on the cylinder wall.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Defect {
    /// Angle from the invert, radians (0 = bottom, positive toward +y).
    pub angular_position: f64,
    /// Axial position along the bore, meters.
    pub axial_position: f64,
    /// Patch side length, meters (axially and along the arc).
    pub extent: f64,
    pub label: String,
}

/// Synthetic scene description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SceneConfig {
    pub length: f64,
    pub diameter: f64,
    #[serde(default)]
    pub defects: Vec<Defect>,
    #[serde(default)]
    pub depth_noise_sigma: f64,
    #[serde(default)]
    pub invalid_fraction: f64,
    #[serde(default)]
    pub seed: u64,
}

impl SceneConfig {
    /// Field-scale default: a 66 m long, 1.2 m diameter conduit.
    pub fn culvert_110() -> Self {
        Self {
            length: 66.0,
            diameter: 1.2,
            defects: Vec::new(),
            depth_noise_sigma: 0.0,
            invalid_fraction: 0.0,
            seed: 0,
        }
    }

    pub fn radius(&self) -> f64 {
        self.diameter / 2.0
    }

    pub fn validate(&self) -> Result<(), SimError> {
        let bad = |reason: &str| SimError::InvalidScene {
            reason: reason.to_string(),
        };
        if !(self.diameter > 0.0 && self.length > 0.0) {
            return Err(bad("length and diameter must be positive"));
        }
        if !(0.0..1.0).contains(&self.invalid_fraction) {
            return Err(bad("invalid_fraction must be in [0, 1)"));
        }
        for d in &self.defects {
            if d.axial_position < 0.0 || d.axial_position > self.length {
                return Err(bad("defect outside the culvert extent"));
            }
        }
        Ok(())
    }

    /// CCF position of a surface point at (angle-from-invert, axial x).
    pub fn surface_point(&self, theta: f64, x: f64) -> Vector3<f64> {
        let r = self.radius();
        Vector3::new(x, r * theta.sin(), -r * theta.cos())
    }
}

/// Depth frame plus the exact pose and per-pixel wall-hit flags it was
/// rendered with.
#[derive(Debug, Clone, PartialEq)]
pub struct RenderedFrame {
    pub depth: DepthImage,
    pub camera_pose_ccf: RigidTransform,
    pub ground_truth_hits: Vec<bool>,
}

/// Ray-cast a depth image of the cylinder from a camera pose (camera to
/// CCF).
///
/// Per pixel, the ray through the pixel center is intersected with the
/// infinite cylinder (axis CCF +x) and the nearest positive root is kept if
/// it lands within the axial extent. Depth is stored as the camera-frame z
/// coordinate, so backprojecting a valid pixel reproduces the exact hit
/// point. Noise and the invalid mask derive from per-pixel RNG streams, so
/// the render is one fixed function of (scene, pose, intrinsics, seed).
pub fn render_depth(
    scene: &SceneConfig,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<RenderedFrame, SimError> {
    scene.validate()?;
    let r = scene.radius();
    let origin = *pose.translation();
    if origin.y * origin.y + origin.z * origin.z >= r * r {
        return Err(SimError::CameraOutsideCylinder);
    }
    if origin.x < 0.0 || origin.x > scene.length {
        return Err(SimError::CameraOutsideCylinder);
    }

    let n_pixels = (k.width * k.height) as usize;
    let mut values = vec![f32::NAN; n_pixels];
    let mut hits = vec![false; n_pixels];
    let base_rng = ChaCha8Rng::seed_from_u64(scene.seed);

    for row in 0..k.height {
        for col in 0..k.width {
            let idx = (row * k.width + col) as usize;
            // Unnormalized camera ray with unit z, so the ray parameter is
            // the camera-frame depth.
            let dir_cam = Vector3::new((col as f64 - k.cx) / k.fx, (row as f64 - k.cy) / k.fy, 1.0);
            let dir = pose.rotation() * dir_cam;
            let a = dir.y * dir.y + dir.z * dir.z;
            if a < 1e-18 {
                continue; // ray parallel to the axis: never meets the wall
            }
            let b = 2.0 * (origin.y * dir.y + origin.z * dir.z);
            let c = origin.y * origin.y + origin.z * origin.z - r * r;
            let disc = b * b - 4.0 * a * c;
            if disc <= 0.0 {
                continue;
            }
            let t = (-b + disc.sqrt()) / (2.0 * a);
            if t <= Z_MIN {
                continue;
            }
            let hit_x = origin.x + t * dir.x;
            if hit_x < 0.0 || hit_x > scene.length {
                continue;
            }
            hits[idx] = true;

            let mut rng = base_rng.clone();
            rng.set_stream(idx as u64);
            if scene.invalid_fraction > 0.0 && rng.gen::<f64>() < scene.invalid_fraction {
                continue;
            }
            let noise: f64 = if scene.depth_noise_sigma > 0.0 {
                scene.depth_noise_sigma * rng.sample::<f64, _>(StandardNormal)
            } else {
                0.0
            };
            values[idx] = (t + noise) as f32;
        }
    }

    Ok(RenderedFrame {
        depth: DepthImage::new(k.width, k.height, values),
        camera_pose_ccf: pose.clone(),
        ground_truth_hits: hits,
    })
}

/// Ground-truth proposal box for a planted defect as seen from a pose.
///
/// The defect patch center and four corners are projected into the image;
/// the normalized bounding box of those projections is the proposal. Used
/// to author replay fixtures for end-to-end runs.
pub fn defect_to_roi(
    scene: &SceneConfig,
    defect_index: usize,
    pose: &RigidTransform,
    k: &CameraIntrinsics,
) -> Result<RoiProposal, SimError> {
    let defect = scene
        .defects
        .get(defect_index)
        .ok_or(SimError::UnknownDefect {
            index: defect_index,
        })?;
    let r = scene.radius();
    let dtheta = defect.extent / (2.0 * r);
    let dx = defect.extent / 2.0;
    let samples = [
        (defect.angular_position, defect.axial_position),
        (defect.angular_position - dtheta, defect.axial_position - dx),
        (defect.angular_position - dtheta, defect.axial_position + dx),
        (defect.angular_position + dtheta, defect.axial_position - dx),
        (defect.angular_position + dtheta, defect.axial_position + dx),
    ];

    let not_visible = SimError::NotVisible {
        index: defect_index,
    };
    let cam_from_ccf = pose.inverse();
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for (theta, x) in samples {
        let p_cam = cam_from_ccf.transform_point(&scene.surface_point(theta, x));
        let (u, v) = project(k, &p_cam).map_err(|_| SimError::NotVisible {
            index: defect_index,
        })?;
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let clamp01 = |v: f64| v.clamp(0.0, 1.0);
    let box_norm = [
        clamp01(umin / k.width as f64),
        clamp01(vmin / k.height as f64),
        clamp01(umax / k.width as f64),
        clamp01(vmax / k.height as f64),
    ];
    if box_norm[0] >= box_norm[2] || box_norm[1] >= box_norm[3] {
        return Err(not_visible);
    }
    Ok(RoiProposal {
        box_norm,
        reason: format!(
            "possible {} on the culvert wall near x = {:.1} m",
            defect.label, defect.axial_position
        ),
        confidence: 0.5,
    })
}

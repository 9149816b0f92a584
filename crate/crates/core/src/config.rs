//! TOML application config.
//!
//! Human-edited calibration and tuning lives here in field units (degrees,
//! meters); everything is converted to the internal radian/SI structs at
//! parse time. Every table and every key is optional — a missing key means
//! the built-in default, so an empty file is a valid config.

use crate::cylinder::RansacConfig;
use crate::geometry::{
    camera_axis_remap, CameraIntrinsics, GeometryError, RigConfig, RigidTransform,
};
use crate::mission::{MissionConfig, TimingModel};
use crate::sim::SceneConfig;
use crate::viewplan::{CostWeights, GridSpec};
use nalgebra::{Matrix3, Vector3};
use serde::Deserialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("config parse error: {0}")]
    Parse(#[from] toml::de::Error),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error("config read error: {0}")]
    Io(#[from] std::io::Error),
}

/// A camera mount: translation in meters plus roll/pitch/yaw in degrees,
/// applied on top of the optical-axis remap so that zero angles mean "camera
/// looks along +x with +z up in the image".
#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MountToml {
    #[serde(default)]
    translation: Option<[f64; 3]>,
    #[serde(default)]
    rpy_deg: Option<[f64; 3]>,
}

impl MountToml {
    fn to_transform(&self, fallback: &RigidTransform) -> Result<RigidTransform, GeometryError> {
        let translation = self
            .translation
            .map(Vector3::from)
            .unwrap_or(*fallback.translation());
        let rotation = match self.rpy_deg {
            None => *fallback.rotation(),
            Some([r, p, y]) => {
                let (r, p, y) = (r.to_radians(), p.to_radians(), y.to_radians());
                let rot: Matrix3<f64> =
                    (nalgebra::Rotation3::from_euler_angles(r, p, y)).into_inner();
                rot * camera_axis_remap()
            }
        };
        RigidTransform::new(rotation, translation)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct RigToml {
    #[serde(default)]
    pan_limit_deg: Option<f64>,
    #[serde(default)]
    tilt_limit_deg: Option<f64>,
    #[serde(default)]
    x_bounds: Option<[f64; 2]>,
    #[serde(default)]
    gimbal_origin: Option<[f64; 3]>,
    #[serde(default)]
    camera1_mount: Option<MountToml>,
    #[serde(default)]
    camera2_mount: Option<MountToml>,
}

#[derive(Debug, Clone, Deserialize)]
#[serde(deny_unknown_fields)]
struct IntrinsicsToml {
    fx: f64,
    fy: f64,
    cx: f64,
    cy: f64,
    width: u32,
    height: u32,
}

impl IntrinsicsToml {
    fn build(&self) -> Result<CameraIntrinsics, GeometryError> {
        CameraIntrinsics::new(self.fx, self.fy, self.cx, self.cy, self.width, self.height)
    }
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct MissionToml {
    #[serde(default)]
    waypoint_spacing: Option<f64>,
    #[serde(default)]
    max_rois: Option<u32>,
    #[serde(default)]
    prompt_profile: Option<String>,
    #[serde(default)]
    propose_s: Option<f64>,
    #[serde(default)]
    plan_s: Option<f64>,
    #[serde(default)]
    visit_s: Option<f64>,
    #[serde(default)]
    settle_s: Option<f64>,
}

#[derive(Debug, Clone, Deserialize, Default)]
#[serde(deny_unknown_fields)]
struct AppConfigToml {
    #[serde(default)]
    rig: RigToml,
    #[serde(default)]
    camera1: Option<IntrinsicsToml>,
    #[serde(default)]
    camera2: Option<IntrinsicsToml>,
    #[serde(default)]
    weights: Option<CostWeights>,
    #[serde(default)]
    grid: Option<GridSpec>,
    #[serde(default)]
    ransac: Option<RansacConfig>,
    #[serde(default)]
    mission: MissionToml,
    #[serde(default)]
    scene: Option<SceneConfig>,
}

/// Parsed, unit-converted application config.
#[derive(Debug, Clone, Default)]
pub struct AppConfig {
    pub mission: MissionConfig,
    /// Present only when the file carries a `[scene]` table.
    pub scene: Option<SceneConfig>,
}

pub fn parse_config(text: &str) -> Result<AppConfig, ConfigError> {
    let raw: AppConfigToml = toml::from_str(text)?;
    let defaults = MissionConfig::default();
    let default_rig = RigConfig::default();

    let rig = RigConfig {
        t_sc1: raw
            .rig
            .camera1_mount
            .unwrap_or_default()
            .to_transform(&default_rig.t_sc1)?,
        t_gc2: raw
            .rig
            .camera2_mount
            .unwrap_or_default()
            .to_transform(&default_rig.t_gc2)?,
        gimbal_origin_in_ccf: raw
            .rig
            .gimbal_origin
            .map(Vector3::from)
            .unwrap_or(default_rig.gimbal_origin_in_ccf),
        pan_limit: raw
            .rig
            .pan_limit_deg
            .map(f64::to_radians)
            .unwrap_or(default_rig.pan_limit),
        tilt_limit: raw
            .rig
            .tilt_limit_deg
            .map(f64::to_radians)
            .unwrap_or(default_rig.tilt_limit),
        x_bounds: raw
            .rig
            .x_bounds
            .map(|b| (b[0], b[1]))
            .unwrap_or(default_rig.x_bounds),
    };
    rig.validate()?;

    let mission = MissionConfig {
        rig,
        camera1: raw
            .camera1
            .map(|k| k.build())
            .transpose()?
            .unwrap_or(defaults.camera1),
        camera2: raw
            .camera2
            .map(|k| k.build())
            .transpose()?
            .unwrap_or(defaults.camera2),
        weights: raw.weights.unwrap_or_default(),
        grid: raw.grid.unwrap_or_default(),
        ransac: raw.ransac.unwrap_or_default(),
        waypoint_spacing: raw
            .mission
            .waypoint_spacing
            .unwrap_or(defaults.waypoint_spacing),
        max_rois: raw.mission.max_rois.unwrap_or(defaults.max_rois),
        prompt_profile: raw
            .mission
            .prompt_profile
            .unwrap_or(defaults.prompt_profile),
        timing: TimingModel {
            propose_s: raw.mission.propose_s.unwrap_or(defaults.timing.propose_s),
            plan_s: raw.mission.plan_s.unwrap_or(defaults.timing.plan_s),
            visit_s: raw.mission.visit_s.unwrap_or(defaults.timing.visit_s),
            settle_s: raw.mission.settle_s.unwrap_or(defaults.timing.settle_s),
        },
    };

    Ok(AppConfig {
        mission,
        scene: raw.scene,
    })
}

pub fn load_config(path: impl AsRef<std::path::Path>) -> Result<AppConfig, ConfigError> {
    parse_config(&std::fs::read_to_string(path)?)
}

/// Parse a standalone scene description: a TOML file with the same shape as
/// the `[scene]` table of the main config.
pub fn parse_scene(text: &str) -> Result<SceneConfig, ConfigError> {
    Ok(toml::from_str(text)?)
}

pub fn load_scene(path: impl AsRef<std::path::Path>) -> Result<SceneConfig, ConfigError> {
    parse_scene(&std::fs::read_to_string(path)?)
}

//! Viewpoint planning and mission control for robotic culvert inspection.
//!
//! The pipeline, in data-flow order:
//!
//! 1. [`geometry`] — the culvert coordinate frame (CCF, +x along the bore,
//!    +z up), the rig's camera/gimbal kinematic chain, and the pinhole maps.
//! 2. [`cylinder`] — robust circle fitting in the bore cross-section from
//!    backprojected depth, plus clipping and surface normals.
//! 3. [`vlm`] — the vision-language-model client: prompts, parsing, a live
//!    HTTP backend and an offline replay backend for deterministic tests.
//! 4. [`roi`] — lifting normalized image-box proposals onto the fitted
//!    cylinder surface using the depth image.
//! 5. [`viewplan`] — the two-stage viewpoint optimizer: coarse grid seeding
//!    followed by bounded quasi-Newton refinement of (yaw, pitch, carriage).
//! 6. [`mission`] — the waypoint-by-waypoint finite-state controller with a
//!    simulated clock and an auditable event log.
//! 7. [`sim`] — a deterministic ray-cast depth simulator used by the tests
//!    and the CLI's synthetic missions.
//! 8. [`config`] — TOML configuration in field units.

pub mod config;
pub mod cylinder;
pub mod geometry;
pub mod mission;
pub mod roi;
pub mod sim;
pub mod viewplan;
pub mod vlm;

pub use config::{load_config, parse_config, AppConfig};
pub use cylinder::{fit_circle_ransac, CulvertModel, RansacConfig};
pub use geometry::{CameraIntrinsics, GimbalState, RigConfig, RigidTransform};
pub use mission::{run_mission, synthesize_fixtures, MissionConfig, MissionReport};
pub use roi::{enrich, DepthImage, EnrichedRoi, RoiProposal};
pub use sim::{render_depth, SceneConfig};
pub use viewplan::{plan_viewpoints, CostWeights, GridSpec, ViewpointSolution};
pub use vlm::{LiveBackend, ReplayBackend, VlmBackend};

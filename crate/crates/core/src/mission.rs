//! Mission controller: a finite-state machine that sequences the inspection
//! along the culvert and the runner that drives it against a synthetic scene
//! and a VLM backend.
//!
//! All time is simulated and advances by fixed per-activity budgets, so a
//! mission is a pure function of (scene, config, fixtures) and replayable
//! bit-for-bit. Faults are isolated at the smallest sensible scope: a bad
//! ROI never aborts its waypoint, a bad waypoint never aborts the mission.

use crate::cylinder::{self, CulvertModel, RansacConfig};
use crate::geometry::{backproject, CameraIntrinsics, GeometryError, RigConfig, RigidTransform};
use crate::roi::{enrich, EnrichedRoi, RoiProposal};
use crate::sim::{self, SceneConfig, SimError};
use crate::viewplan::{plan_viewpoints, CostWeights, GridSpec, ViewpointSolution};
use crate::vlm::{self, AssessmentRecord, ProposalRequest, VlmBackend, VlmError, VlmRequest};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// How far behind the current waypoint the planner may still place the
/// camera carriage, meters.
pub const PLAN_LOOKBACK: f64 = 1.0;

#[derive(Debug, Error)]
pub enum MissionError {
    #[error("illegal event {event:?} in phase {phase:?}")]
    IllegalEvent { phase: Phase, event: Event },
    #[error(transparent)]
    Sim(#[from] SimError),
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Vlm(#[from] VlmError),
    #[error("invalid mission config: {0}")]
    InvalidConfig(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Phase {
    AtWaypoint,
    Proposing,
    Planning,
    Visiting,
    Assessing,
    Advancing,
    Done,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Event {
    StartProposal,
    ProposalsReady,
    PlanReady,
    VisitComplete,
    VisitsExhausted,
    AssessmentsComplete,
    AdvanceComplete,
    MissionComplete,
}

/// Simulated-time budgets, seconds. Assessment runs offline after capture
/// and therefore consumes no mission time.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TimingModel {
    pub propose_s: f64,
    pub plan_s: f64,
    /// Full budget for one close-up visit: travel plus `settle_s` of
    /// stabilization before capture.
    pub visit_s: f64,
    pub settle_s: f64,
}

impl Default for TimingModel {
    fn default() -> Self {
        Self {
            propose_s: 60.0,
            plan_s: 20.0,
            visit_s: 15.0,
            settle_s: 5.0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionConfig {
    pub rig: RigConfig,
    pub camera1: CameraIntrinsics,
    pub camera2: CameraIntrinsics,
    pub weights: CostWeights,
    pub grid: GridSpec,
    pub ransac: RansacConfig,
    /// Distance between successive waypoints along +x, meters.
    pub waypoint_spacing: f64,
    pub max_rois: u32,
    pub prompt_profile: String,
    pub timing: TimingModel,
}

impl Default for MissionConfig {
    fn default() -> Self {
        Self {
            rig: RigConfig::default(),
            camera1: CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap(),
            camera2: CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap(),
            weights: CostWeights::default(),
            grid: GridSpec::default(),
            ransac: RansacConfig::default(),
            waypoint_spacing: 5.0,
            max_rois: 4,
            prompt_profile: "default".into(),
            timing: TimingModel::default(),
        }
    }
}

impl MissionConfig {
    pub fn validate(&self) -> Result<(), MissionError> {
        // NaN spacing must fail too, hence the negated comparison.
        #[allow(clippy::neg_cmp_op_on_partial_ord)]
        if !(self.waypoint_spacing > 0.0) {
            return Err(MissionError::InvalidConfig(
                "waypoint_spacing must be positive".into(),
            ));
        }
        if self.timing.settle_s > self.timing.visit_s {
            return Err(MissionError::InvalidConfig(
                "settle_s cannot exceed visit_s".into(),
            ));
        }
        if self.max_rois == 0 {
            return Err(MissionError::InvalidConfig("max_rois must be >= 1".into()));
        }
        self.rig.validate()?;
        self.camera1.validate()?;
        self.camera2.validate()?;
        Ok(())
    }
}

/// Waypoint x positions: 0, N, 2N, ... up to and including the culvert
/// length (within a small tolerance for spacings that divide the length).
pub fn schedule_waypoints(length: f64, spacing: f64) -> Vec<f64> {
    let mut xs = Vec::new();
    let mut x = 0.0;
    let mut i = 0u32;
    while x <= length + 1e-9 {
        xs.push(x.min(length));
        i += 1;
        x = spacing * i as f64;
    }
    xs
}

/// The FSM proper: current phase plus the running clock. `step` is the only
/// mutator and rejects transitions outside the mission graph.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionState {
    pub phase: Phase,
    pub sim_time: f64,
    pub waypoint_index: usize,
}

impl Default for MissionState {
    fn default() -> Self {
        Self {
            phase: Phase::AtWaypoint,
            sim_time: 0.0,
            waypoint_index: 0,
        }
    }
}

impl MissionState {
    pub fn step(&mut self, event: Event, dt: f64) -> Result<Phase, MissionError> {
        use Event as E;
        use Phase as P;
        let next = match (self.phase, event) {
            (P::AtWaypoint, E::StartProposal) => P::Proposing,
            (P::Proposing, E::ProposalsReady) => P::Planning,
            (P::Planning, E::PlanReady) => P::Visiting,
            (P::Visiting, E::VisitComplete) => P::Visiting,
            (P::Visiting, E::VisitsExhausted) => P::Assessing,
            (P::Assessing, E::AssessmentsComplete) => P::Advancing,
            (P::Advancing, E::AdvanceComplete) => P::AtWaypoint,
            (P::Advancing, E::MissionComplete) => P::Done,
            (phase, event) => return Err(MissionError::IllegalEvent { phase, event }),
        };
        self.sim_time += dt;
        if self.phase == Phase::Advancing && next == Phase::AtWaypoint {
            self.waypoint_index += 1;
        }
        self.phase = next;
        Ok(next)
    }
}

/// One audit-log line: what happened, when, and a digest of the payload so
/// the log commits to the data without embedding it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AuditEntry {
    pub sim_time: f64,
    pub phase: Phase,
    pub event: Event,
    pub payload_sha256: String,
}

pub fn audit_to_jsonl(entries: &[AuditEntry]) -> String {
    entries
        .iter()
        .map(|e| serde_json::to_string(e).expect("audit entries serialize"))
        .collect::<Vec<_>>()
        .join("\n")
}

fn payload_digest(payload: &impl Serialize) -> String {
    let bytes = serde_json::to_vec(payload).expect("payload serializes");
    hex::encode(Sha256::digest(bytes))
}

/// Outcome of the offline assessment for one inspected ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "state")]
pub enum AssessmentState {
    Pending,
    Done { record: AssessmentRecord },
    Failed { reason: String },
}

/// Everything the mission learned about one proposed ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct InspectionRecord {
    pub waypoint_index: usize,
    pub roi_index: usize,
    pub proposal: RoiProposal,
    /// None when depth fusion failed; the failure reason is in `assessment`.
    pub roi_center_ccf: Option<[f64; 3]>,
    pub plan: Option<ViewpointSolution>,
    pub closeup_ref: Option<String>,
    /// Global execution order of the close-up visit, when one happened.
    pub visit_index: Option<usize>,
    pub assessment: AssessmentState,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct WaypointSummary {
    pub index: usize,
    pub x: f64,
    pub fitted_model: Option<CulvertModel>,
    pub n_proposals: usize,
    pub n_visited: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MissionReport {
    pub schema_version: u32,
    pub waypoints: Vec<WaypointSummary>,
    pub records: Vec<InspectionRecord>,
    pub total_sim_time: f64,
    pub audit: Vec<AuditEntry>,
    pub warnings: Vec<String>,
}

fn waypoint_image_ref(w: usize) -> String {
    format!("waypoint-{w:03}")
}

fn closeup_image_ref(w: usize, r: usize) -> String {
    format!("closeup-w{w}-r{r}")
}

/// Camera-1 pose in the CCF with the rig carriage at axial position `x`.
fn camera1_pose_at(rig: &RigConfig, x: f64) -> RigidTransform {
    RigidTransform::from_translation(Vector3::new(x, 0.0, 0.0)).compose(&rig.t_sc1)
}

/// Point cloud for the cylinder fit: every valid pixel of the frame
/// backprojected into the CCF, deterministically subsampled.
fn frame_to_ccf_points(frame: &sim::RenderedFrame, k: &CameraIntrinsics) -> Vec<Vector3<f64>> {
    let mut points = Vec::new();
    for v in 0..k.height {
        for u in 0..k.width {
            if !frame.depth.is_valid(u, v) {
                continue;
            }
            let d = frame.depth.get(u, v) as f64;
            if let Ok(p_cam) = backproject(k, u as f64, v as f64, d) {
                points.push(frame.camera_pose_ccf.transform_point(&p_cam));
            }
        }
    }
    cylinder::subsample_uniform(&points, cylinder::MAX_FIT_POINTS)
}

/// Run a full inspection mission over the scene.
///
/// Deterministic given (config, scene, backend fixtures). Returns the
/// report; errors are reserved for misconfiguration and FSM violations —
/// perception and planning faults become per-ROI or per-waypoint warnings.
pub fn run_mission(
    cfg: &MissionConfig,
    scene: &SceneConfig,
    backend: &dyn VlmBackend,
) -> Result<MissionReport, MissionError> {
    cfg.validate()?;
    scene.validate()?;

    let waypoint_xs = schedule_waypoints(scene.length, cfg.waypoint_spacing);
    let mut state = MissionState::default();
    let mut audit: Vec<AuditEntry> = Vec::new();
    let mut warnings: Vec<String> = Vec::new();
    let mut waypoints: Vec<WaypointSummary> = Vec::new();
    let mut records: Vec<InspectionRecord> = Vec::new();
    let mut total_visits = 0usize;

    macro_rules! step_log {
        ($event:expr, $dt:expr, $payload:expr) => {{
            state.step($event, $dt)?;
            audit.push(AuditEntry {
                sim_time: state.sim_time,
                phase: state.phase,
                event: $event,
                payload_sha256: payload_digest(&$payload),
            });
        }};
    }

    for (w, &wx) in waypoint_xs.iter().enumerate() {
        debug_assert_eq!(state.waypoint_index, w);
        step_log!(Event::StartProposal, 0.0, wx);

        // Perceive: render the wide camera-1 frame and refit the cylinder.
        let pose1 = camera1_pose_at(&cfg.rig, wx);
        let frame = sim::render_depth(scene, &pose1, &cfg.camera1)?;
        let points = frame_to_ccf_points(&frame, &cfg.camera1);
        let fit = cylinder::fit_circle_ransac(&points, &cfg.ransac);
        let model = match fit {
            Ok((model, _)) => Some(model),
            Err(e) => {
                warnings.push(format!("waypoint {w}: cylinder fit failed: {e}"));
                None
            }
        };

        // Propose: one VLM call on the wide frame.
        let image_ref = waypoint_image_ref(w);
        let proposal_result = vlm::propose(
            backend,
            &ProposalRequest {
                image_ref: image_ref.clone(),
                prompt_profile: cfg.prompt_profile.clone(),
                max_rois: cfg.max_rois,
            },
        );
        let proposals = match proposal_result {
            Ok(resp) => {
                for warning in &resp.warnings {
                    warnings.push(format!("waypoint {w}: {warning}"));
                }
                if let Some(warning) = vlm::calibration_warning(&resp) {
                    warnings.push(format!("waypoint {w}: {warning}"));
                }
                resp.proposals
            }
            Err(e) => {
                warnings.push(format!("waypoint {w}: proposal query failed: {e}"));
                Vec::new()
            }
        };
        step_log!(Event::ProposalsReady, cfg.timing.propose_s, proposals);

        // Fuse and plan. A per-waypoint rig: camera-1 mounted at the
        // waypoint, carriage window reaching one meter back and one
        // spacing forward, clamped to the culvert and the rig's own rail.
        let rig_here = {
            let mut r = cfg.rig.clone();
            r.t_sc1 = camera1_pose_at(&cfg.rig, wx);
            let lo = (wx - PLAN_LOOKBACK).max(cfg.rig.x_bounds.0).max(0.0);
            let hi = (wx + cfg.waypoint_spacing)
                .min(cfg.rig.x_bounds.1)
                .min(scene.length);
            r.with_x_bounds((lo, hi))
        };

        let mut enriched: Vec<(usize, EnrichedRoi)> = Vec::new();
        let first_record = records.len();
        for (r, proposal) in proposals.iter().enumerate() {
            let mut record = InspectionRecord {
                waypoint_index: w,
                roi_index: r,
                proposal: proposal.clone(),
                roi_center_ccf: None,
                plan: None,
                closeup_ref: None,
                visit_index: None,
                assessment: AssessmentState::Pending,
            };
            match model
                .as_ref()
                .map(|m| enrich(proposal, &frame.depth, &cfg.camera1, &rig_here, m))
            {
                Some(Ok(roi)) => {
                    record.roi_center_ccf =
                        Some([roi.center_ccf.x, roi.center_ccf.y, roi.center_ccf.z]);
                    enriched.push((r, roi));
                }
                Some(Err(e)) => {
                    record.assessment = AssessmentState::Failed {
                        reason: format!("depth fusion failed: {e}"),
                    };
                }
                None => {
                    record.assessment = AssessmentState::Failed {
                        reason: "no cylinder model at this waypoint".into(),
                    };
                }
            }
            records.push(record);
        }

        let rois: Vec<EnrichedRoi> = enriched.iter().map(|(_, roi)| roi.clone()).collect();
        let batch = plan_viewpoints(&rois, &rig_here, &cfg.camera2, &cfg.weights, &cfg.grid);
        for failure in &batch.failures {
            let r = enriched[failure.roi_index].0;
            records[first_record + r].assessment = AssessmentState::Failed {
                reason: format!("planning failed: {}", failure.reason),
            };
        }
        step_log!(Event::PlanReady, cfg.timing.plan_s, batch.planned);

        // Visit in ascending carriage order (the batch is already sorted).
        let mut n_visited = 0usize;
        for planned in &batch.planned {
            let r = enriched[planned.roi_index].0;
            let closeup = closeup_image_ref(w, r);
            let record = &mut records[first_record + r];
            record.plan = Some(planned.solution.clone());
            record.closeup_ref = Some(closeup.clone());
            record.visit_index = Some(total_visits);
            total_visits += 1;
            n_visited += 1;
            step_log!(Event::VisitComplete, cfg.timing.visit_s, closeup);
        }
        step_log!(Event::VisitsExhausted, 0.0, n_visited);

        // Assess offline: zero simulated time, one call per captured ROI.
        for planned in &batch.planned {
            let (r, roi) = &enriched[planned.roi_index];
            let closeup = closeup_image_ref(w, *r);
            let record = &mut records[first_record + r];
            record.assessment = match vlm::assess(roi, &[closeup], backend) {
                Ok(rec) => AssessmentState::Done { record: rec },
                Err(e) => AssessmentState::Failed {
                    reason: format!("assessment failed: {e}"),
                },
            };
        }
        step_log!(Event::AssessmentsComplete, 0.0, w);

        waypoints.push(WaypointSummary {
            index: w,
            x: wx,
            fitted_model: model,
            n_proposals: proposals.len(),
            n_visited,
        });

        if w + 1 == waypoint_xs.len() {
            step_log!(Event::MissionComplete, 0.0, "done");
        } else {
            step_log!(Event::AdvanceComplete, 0.0, w + 1);
        }
    }

    Ok(MissionReport {
        schema_version: 1,
        waypoints,
        records,
        total_sim_time: state.sim_time,
        audit,
        warnings,
    })
}

/// Author a complete replay-fixture set for a scene so `run_mission` can be
/// driven end to end without a live model.
///
/// Proposal fixtures contain the ground-truth bounding boxes of the planted
/// defects visible from each waypoint, with uniform calibrated confidences;
/// assessment fixtures confirm each defect with its label. Returns the
/// number of fixture files written.
pub fn synthesize_fixtures(
    cfg: &MissionConfig,
    scene: &SceneConfig,
    replay: &vlm::ReplayBackend,
) -> Result<usize, MissionError> {
    cfg.validate()?;
    scene.validate()?;
    let mut written = 0usize;
    for (w, &wx) in schedule_waypoints(scene.length, cfg.waypoint_spacing)
        .iter()
        .enumerate()
    {
        let pose1 = camera1_pose_at(&cfg.rig, wx);
        let mut boxes: Vec<(usize, RoiProposal)> = Vec::new();
        for d in 0..scene.defects.len() {
            match sim::defect_to_roi(scene, d, &pose1, &cfg.camera1) {
                Ok(p) => boxes.push((d, p)),
                Err(SimError::NotVisible { .. }) => {}
                Err(e) => return Err(e.into()),
            }
        }
        boxes.truncate(cfg.max_rois as usize);
        let conf = if boxes.is_empty() {
            0.0
        } else {
            1.0 / boxes.len() as f64
        };
        let proposals: Vec<RoiProposal> = boxes
            .iter()
            .map(|(d, p)| RoiProposal {
                confidence: conf,
                reason: format!("surface anomaly resembling {}", scene.defects[*d].label),
                ..p.clone()
            })
            .collect();

        let image_ref = waypoint_image_ref(w);
        let proposal_req = VlmRequest {
            profile: cfg.prompt_profile.clone(),
            image_refs: vec![image_ref],
            max_rois: cfg.max_rois,
            messages: vlm::build_proposal_prompt(&cfg.prompt_profile, cfg.max_rois)?,
        };
        let body = serde_json::to_string_pretty(&proposals).expect("proposals serialize");
        replay.write_fixture(&proposal_req, &body)?;
        written += 1;

        for (r, proposal) in proposals.iter().enumerate() {
            let closeup = closeup_image_ref(w, r);
            let assess_req = VlmRequest {
                profile: "assessment".into(),
                image_refs: vec![closeup],
                max_rois: 1,
                messages: vlm::build_assessment_prompt(&proposal.reason, 1),
            };
            let body = serde_json::json!({
                "original_reason": proposal.reason,
                "result": "Confirmed",
                "description": format!("close-up consistent with: {}", proposal.reason),
            });
            replay.write_fixture(&assess_req, &body.to_string())?;
            written += 1;
        }
    }
    Ok(written)
}

//! Two-stage constrained viewpoint optimization.
//!
//! Stage 1 sweeps a coarse grid over (yaw, pitch, translation) and keeps the
//! exact argmin of the stage-1 objective: coverage, centering, size,
//! obliquity and standoff-range terms evaluated on the ROI's projected
//! vertices. Stage 2 refines that seed with a bounded quasi-Newton descent
//! of the stage-2 objective, which adds motion and translation regularizers
//! pulling the pose toward the seed. The landscape is non-convex; the grid
//! is what keeps the local refinement out of poor basins.

use crate::geometry::{camera2_to_ccf_unchecked, CameraIntrinsics, GimbalState, RigConfig, Z_MIN};
use crate::roi::EnrichedRoi;
use nalgebra::{Matrix3, Vector3};
use serde::{Deserialize, Serialize};

/// Finite penalty returned when any ROI vertex falls behind the camera.
/// Ordered by the number of offending vertices so the grid search still
/// ranks infeasible cells.
pub const BEHIND_PENALTY: f64 = 1e9;

const GRAD_STEP: f64 = 1e-5;
const GRAD_TOL: f64 = 1e-6;
const STEP_TOL: f64 = 1e-9;
const MAX_ITERATIONS: usize = 200;

/// Weights and shape parameters of both objectives.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct CostWeights {
    pub w_cov: f64,
    pub w_ctr: f64,
    pub w_size: f64,
    pub w_obl: f64,
    pub w_range: f64,
    pub w_move: f64,
    pub w_trans: f64,
    /// Margin fraction: the coverage inset is `alpha * min(W, H)` pixels.
    pub alpha: f64,
    /// Target projected-area fraction of the image.
    pub f_target: f64,
    /// Desired standoff distance, meters.
    pub d_star: f64,
    /// Yaw deviation tolerance in the motion regularizer, radians.
    pub delta_psi: f64,
    /// Pitch deviation tolerance, radians.
    pub delta_phi: f64,
    /// Translation deviation tolerance, meters.
    pub delta_x: f64,
    /// Softplus sharpness, 1/pixels.
    pub softplus_beta: f64,
}

impl Default for CostWeights {
    /// Weights equalize term magnitudes (pixels^2, meters^2, dimensionless)
    /// at the 640x480 / 1.2 m-bore scale; the margin is 24 px on 480 rows.
    fn default() -> Self {
        Self {
            w_cov: 1.0,
            w_ctr: 1e-4,
            w_size: 1e-9,
            w_obl: 10.0,
            w_range: 5.0,
            w_move: 1.0,
            w_trans: 1.0,
            alpha: 0.05,
            f_target: 0.3,
            d_star: 1.0,
            delta_psi: 10f64.to_radians(),
            delta_phi: 10f64.to_radians(),
            delta_x: 0.5,
            softplus_beta: 0.05,
        }
    }
}

/// Grid resolution for stage 1; bounds come from the rig.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct GridSpec {
    pub psi_steps: usize,
    pub phi_steps: usize,
    pub x_steps: usize,
}

impl Default for GridSpec {
    fn default() -> Self {
        // 5250 cells: coarse enough for interactive use, fine enough that
        // every 5-degree basin gets a seed.
        Self {
            psi_steps: 25,
            phi_steps: 10,
            x_steps: 21,
        }
    }
}

/// Per-term cost breakdown of a solution.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TermBreakdown {
    pub cov: f64,
    pub ctr: f64,
    pub size: f64,
    pub obl: f64,
    pub range: f64,
    #[serde(rename = "move")]
    pub movement: f64,
    pub trans: f64,
    /// Vertices behind the camera at this pose; nonzero means the pose was
    /// scored with the behind-camera penalty instead of the terms above.
    pub behind: usize,
}

/// Result of the two-stage optimization for one ROI.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewpointSolution {
    pub seed: GimbalState,
    pub refined: GimbalState,
    pub cost_seed: f64,
    pub cost_refined: f64,
    pub terms: TermBreakdown,
    pub iterations: usize,
    /// ROI vertices projected at the refined pose, pixels.
    pub projected_vertices: Vec<(f64, f64)>,
}

/// Overflow-safe softplus with sharpness `beta`:
/// `(1/beta) * ln(1 + exp(beta * t))`.
pub fn softplus(t: f64, beta: f64) -> f64 {
    let x = beta * t;
    if x > 0.0 {
        t + (-x).exp().ln_1p() / beta
    } else {
        x.exp().ln_1p() / beta
    }
}

/// Coverage cost: soft hinge on every projected vertex against an inset
/// frame with margin `alpha * min(W, H)`.
pub fn cost_coverage(uv: &[(f64, f64)], k: &CameraIntrinsics, alpha: f64, beta: f64) -> f64 {
    let (w, h) = (k.width as f64, k.height as f64);
    let m = alpha * w.min(h);
    uv.iter()
        .map(|&(u, v)| {
            softplus(m - u, beta)
                + softplus(m - v, beta)
                + softplus(u - (w - m), beta)
                + softplus(v - (h - m), beta)
        })
        .sum()
}

/// Centering cost: squared distance of the projected centroid from the
/// principal point.
pub fn cost_centering(uv: &[(f64, f64)], k: &CameraIntrinsics) -> f64 {
    let n = uv.len() as f64;
    let (su, sv) = uv
        .iter()
        .fold((0.0, 0.0), |(su, sv), &(u, v)| (su + u, sv + v));
    let (ubar, vbar) = (su / n, sv / n);
    (ubar - k.cx).powi(2) + (vbar - k.cy).powi(2)
}

/// Size cost: squared gap between the projected bounding-box area and the
/// target fraction of the image area.
pub fn cost_size(uv: &[(f64, f64)], k: &CameraIntrinsics, f_target: f64) -> f64 {
    let (mut umin, mut umax, mut vmin, mut vmax) = (f64::MAX, f64::MIN, f64::MAX, f64::MIN);
    for &(u, v) in uv {
        umin = umin.min(u);
        umax = umax.max(u);
        vmin = vmin.min(v);
        vmax = vmax.max(v);
    }
    let area = (umax - umin) * (vmax - vmin);
    let target = f_target * k.width as f64 * k.height as f64;
    (area - target).powi(2)
}

/// Obliquity cost: penalizes grazing views through the misalignment of the
/// optical axis and the ROI surface normal, both expressed in the CCF.
pub fn cost_obliquity(g: &GimbalState, rig: &RigConfig, normal_ccf: &Vector3<f64>) -> f64 {
    let z_cam = optical_axis_in_ccf(rig, g);
    (1.0 - z_cam.dot(normal_ccf).abs()).powi(2)
}

/// Range cost: squared deviation of the camera-to-ROI distance from the
/// desired standoff.
pub fn cost_range(
    g: &GimbalState,
    rig: &RigConfig,
    roi_center_ccf: &Vector3<f64>,
    d_star: f64,
) -> f64 {
    let pose = camera2_to_ccf_unchecked(rig, g);
    ((roi_center_ccf - pose.translation()).norm() - d_star).powi(2)
}

fn optical_axis_in_ccf(rig: &RigConfig, g: &GimbalState) -> Vector3<f64> {
    camera2_to_ccf_unchecked(rig, g).rotation() * Vector3::new(0.0, 0.0, 1.0)
}

/// Stage-1 objective evaluation with per-term diagnostics.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Eval {
    pub total: f64,
    pub cov: f64,
    pub ctr: f64,
    pub size: f64,
    pub obl: f64,
    pub range: f64,
    pub behind: usize,
    pub uv: Vec<(f64, f64)>,
}

/// Weighted sum of the five stage-1 terms at a pose. Total on all in-bound
/// poses: vertices behind the camera produce a large finite penalty ordered
/// by the number of offenders rather than an error.
pub fn eval_j1(
    g: &GimbalState,
    roi: &EnrichedRoi,
    rig: &RigConfig,
    k: &CameraIntrinsics,
    w: &CostWeights,
) -> Stage1Eval {
    let pose_inv = camera2_to_ccf_unchecked(rig, g).inverse();
    let mut uv = Vec::with_capacity(roi.vertices_ccf.len());
    let mut behind = 0usize;
    for p_s in &roi.vertices_ccf {
        let p_c2 = pose_inv.transform_point(p_s);
        if p_c2.z <= Z_MIN {
            behind += 1;
        } else {
            uv.push((k.fx * p_c2.x / p_c2.z + k.cx, k.fy * p_c2.y / p_c2.z + k.cy));
        }
    }
    if behind > 0 {
        return Stage1Eval {
            total: BEHIND_PENALTY + behind as f64,
            cov: 0.0,
            ctr: 0.0,
            size: 0.0,
            obl: 0.0,
            range: 0.0,
            behind,
            uv: Vec::new(),
        };
    }
    let cov = cost_coverage(&uv, k, w.alpha, w.softplus_beta);
    let ctr = cost_centering(&uv, k);
    let size = cost_size(&uv, k, w.f_target);
    let obl = cost_obliquity(g, rig, &roi.normal_ccf);
    let range = cost_range(g, rig, &roi.center_ccf, w.d_star);
    Stage1Eval {
        total: w.w_cov * cov + w.w_ctr * ctr + w.w_size * size + w.w_obl * obl + w.w_range * range,
        cov,
        ctr,
        size,
        obl,
        range,
        behind: 0,
        uv,
    }
}

/// Inclusive uniform sampling of `[lo, hi]` with `n` values; a single-step
/// axis collapses to the interval midpoint.
pub fn grid_axis(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    assert!(n >= 1);
    if n == 1 {
        return vec![0.5 * (lo + hi)];
    }
    (0..n)
        .map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64)
        .collect()
}

/// Stage 1: exhaustive scan of the grid; exact argmin with ties broken by
/// the lowest (x index, then yaw index, then pitch index).
pub fn grid_search(
    roi: &EnrichedRoi,
    rig: &RigConfig,
    k: &CameraIntrinsics,
    w: &CostWeights,
    grid: &GridSpec,
) -> (GimbalState, f64) {
    let psis = grid_axis(-rig.pan_limit / 2.0, rig.pan_limit / 2.0, grid.psi_steps);
    let phis = grid_axis(-rig.tilt_limit / 2.0, rig.tilt_limit / 2.0, grid.phi_steps);
    let xs = grid_axis(rig.x_bounds.0, rig.x_bounds.1, grid.x_steps);

    let mut best_cost = f64::INFINITY;
    let mut best = GimbalState::new(psis[0], phis[0], xs[0]);
    for &x in &xs {
        for &psi in &psis {
            for &phi in &phis {
                let g = GimbalState::new(psi, phi, x);
                let cost = eval_j1(&g, roi, rig, k, w).total;
                if cost < best_cost {
                    best_cost = cost;
                    best = g;
                }
            }
        }
    }
    (best, best_cost)
}

/// Stage-2 objective: stage 1 plus quadratic motion and translation
/// regularizers around the seed.
pub fn eval_j2(
    g: &GimbalState,
    seed: &GimbalState,
    roi: &EnrichedRoi,
    rig: &RigConfig,
    k: &CameraIntrinsics,
    w: &CostWeights,
) -> f64 {
    let j1 = eval_j1(g, roi, rig, k, w).total;
    let movement =
        ((g.yaw - seed.yaw) / w.delta_psi).powi(2) + ((g.pitch - seed.pitch) / w.delta_phi).powi(2);
    let trans = ((g.axial - seed.axial) / w.delta_x).powi(2);
    j1 + w.w_move * movement + w.w_trans * trans
}

fn clamp3(v: [f64; 3], lo: [f64; 3], hi: [f64; 3]) -> [f64; 3] {
    [
        v[0].clamp(lo[0], hi[0]),
        v[1].clamp(lo[1], hi[1]),
        v[2].clamp(lo[2], hi[2]),
    ]
}

/// Stage 2: bounded quasi-Newton refinement of the grid seed.
///
/// BFGS with central-difference gradients, an Armijo backtracking line
/// search and iterates projected onto the box (pan/tilt limits and the
/// translation interval). Converges when the projected gradient infinity
/// norm drops below 1e-6, the step shrinks below 1e-9, or after 200
/// iterations. The returned cost never exceeds the seed's own evaluation.
pub fn refine(
    seed: &GimbalState,
    roi: &EnrichedRoi,
    rig: &RigConfig,
    k: &CameraIntrinsics,
    w: &CostWeights,
) -> ViewpointSolution {
    let lo = [-rig.pan_limit / 2.0, -rig.tilt_limit / 2.0, rig.x_bounds.0];
    let hi = [rig.pan_limit / 2.0, rig.tilt_limit / 2.0, rig.x_bounds.1];
    let f = |v: &[f64; 3]| eval_j2(&GimbalState::new(v[0], v[1], v[2]), seed, roi, rig, k, w);
    let grad = |v: &[f64; 3]| -> [f64; 3] {
        let mut g = [0.0; 3];
        for i in 0..3 {
            let mut plus = *v;
            let mut minus = *v;
            plus[i] += GRAD_STEP;
            minus[i] -= GRAD_STEP;
            g[i] = (f(&plus) - f(&minus)) / (2.0 * GRAD_STEP);
        }
        g
    };

    let mut x = clamp3([seed.yaw, seed.pitch, seed.axial], lo, hi);
    let mut fx = f(&x);
    let cost_seed = fx;
    let mut best_x = x;
    let mut best_f = fx;
    let mut h = Matrix3::<f64>::identity();
    let mut g = Vector3::from(grad(&x));
    let mut iterations = 0usize;

    for _ in 0..MAX_ITERATIONS {
        // Projected-gradient optimality measure handles active bounds.
        let pg_vec = {
            let step = clamp3([x[0] - g[0], x[1] - g[1], x[2] - g[2]], lo, hi);
            [x[0] - step[0], x[1] - step[1], x[2] - step[2]]
        };
        let pg_norm = pg_vec.iter().fold(0.0f64, |m, v| m.max(v.abs()));
        if pg_norm < GRAD_TOL {
            break;
        }
        iterations += 1;

        let line_search = |d: &Vector3<f64>, x: &[f64; 3], fx: f64| -> Option<([f64; 3], f64)> {
            let mut t = 1.0;
            loop {
                let cand = clamp3([x[0] + t * d[0], x[1] + t * d[1], x[2] + t * d[2]], lo, hi);
                let step = [cand[0] - x[0], cand[1] - x[1], cand[2] - x[2]];
                let step_norm = step.iter().fold(0.0f64, |m, v| m.max(v.abs()));
                if step_norm < STEP_TOL {
                    return None;
                }
                let fc = f(&cand);
                let slope = g[0] * step[0] + g[1] * step[1] + g[2] * step[2];
                if fc <= fx + 1e-4 * slope {
                    return Some((cand, fc));
                }
                t *= 0.5;
            }
        };

        let mut d = -(h * g);
        if d.dot(&g) >= 0.0 {
            // Lost positive definiteness; fall back to steepest descent.
            h = Matrix3::identity();
            d = -g;
        }
        let mut accepted = line_search(&d, &x, fx);
        if accepted.is_none() && h != Matrix3::identity() {
            // The quasi-Newton direction stalled; restart from steepest
            // descent before giving up.
            h = Matrix3::identity();
            d = -g;
            accepted = line_search(&d, &x, fx);
        }
        let Some((x_new, f_new)) = accepted else {
            break;
        };

        let g_new = Vector3::from(grad(&x_new));
        let s = Vector3::new(x_new[0] - x[0], x_new[1] - x[1], x_new[2] - x[2]);
        let y = g_new - g;
        let sy = s.dot(&y);
        if sy > 1e-12 {
            // Standard BFGS inverse-Hessian update.
            let rho = 1.0 / sy;
            let i = Matrix3::identity();
            let left = i - rho * s * y.transpose();
            let right = i - rho * y * s.transpose();
            h = left * h * right + rho * s * s.transpose();
        } else {
            h = Matrix3::identity();
        }

        x = x_new;
        fx = f_new;
        g = g_new;
        if fx < best_f {
            best_f = fx;
            best_x = x;
        }
    }

    let refined = GimbalState::new(best_x[0], best_x[1], best_x[2]);
    let j1 = eval_j1(&refined, roi, rig, k, w);
    let terms = TermBreakdown {
        cov: j1.cov,
        ctr: j1.ctr,
        size: j1.size,
        obl: j1.obl,
        range: j1.range,
        movement: ((refined.yaw - seed.yaw) / w.delta_psi).powi(2)
            + ((refined.pitch - seed.pitch) / w.delta_phi).powi(2),
        trans: ((refined.axial - seed.axial) / w.delta_x).powi(2),
        behind: j1.behind,
    };
    ViewpointSolution {
        seed: *seed,
        refined,
        cost_seed,
        cost_refined: best_f,
        terms,
        iterations,
        projected_vertices: j1.uv,
    }
}

/// A planned ROI paired with the index it had in the input batch.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlannedViewpoint {
    pub roi_index: usize,
    pub solution: ViewpointSolution,
}

/// An ROI the planner could not produce a usable pose for.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanFailure {
    pub roi_index: usize,
    pub reason: String,
}

/// Batch planning result: executable visits sorted by ascending refined
/// translation, plus the ROIs that turned out unplannable.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PlanBatch {
    pub planned: Vec<PlannedViewpoint>,
    pub failures: Vec<PlanFailure>,
}

/// Run both stages for every ROI independently. Per-ROI failures (poses
/// that leave the ROI behind the camera everywhere) become failure entries
/// instead of aborting the batch. Output is ordered by ascending refined
/// translation, ties broken by input index.
pub fn plan_viewpoints(
    rois: &[EnrichedRoi],
    rig: &RigConfig,
    k: &CameraIntrinsics,
    w: &CostWeights,
    grid: &GridSpec,
) -> PlanBatch {
    let mut planned = Vec::new();
    let mut failures = Vec::new();
    for (roi_index, roi) in rois.iter().enumerate() {
        let (seed, _) = grid_search(roi, rig, k, w, grid);
        let solution = refine(&seed, roi, rig, k, w);
        if solution.cost_refined >= BEHIND_PENALTY {
            failures.push(PlanFailure {
                roi_index,
                reason: format!(
                    "no in-bounds pose keeps the ROI in front of the camera \
                     ({} vertices behind at the best pose)",
                    solution.terms.behind
                ),
            });
        } else {
            planned.push(PlannedViewpoint {
                roi_index,
                solution,
            });
        }
    }
    planned.sort_by(|a, b| {
        a.solution
            .refined
            .axial
            .partial_cmp(&b.solution.refined.axial)
            .unwrap()
            .then(a.roi_index.cmp(&b.roi_index))
    });
    PlanBatch { planned, failures }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cylinder::CulvertModel;
    use crate::roi::{enrich, DepthImage, RoiProposal};
    use nalgebra::Vector2;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    /// An ROI on the culvert invert straight ahead, built from constant
    /// synthetic depth.
    fn test_roi(box_norm: [f64; 4], depth: f32) -> EnrichedRoi {
        let model = CulvertModel::new(0.6, Vector2::zeros()).unwrap();
        let proposal = RoiProposal {
            box_norm,
            reason: "test".into(),
            confidence: 0.5,
        };
        let image = DepthImage::constant(640, 480, depth);
        enrich(&proposal, &image, &k640(), &RigConfig::default(), &model).unwrap()
    }

    fn segment_rig() -> RigConfig {
        RigConfig::default().with_x_bounds((0.0, 5.0))
    }

    #[test]
    fn coverage_near_zero_inside_far_from_edges() {
        let k = k640();
        let uv = vec![(320.0, 240.0); 8];
        let c = cost_coverage(&uv, &k, 0.05, 0.05);
        assert!(c > 0.0 && c < 1.0, "got {c}");
    }

    #[test]
    fn coverage_linear_outside_for_sharp_beta() {
        let k = k640();
        // One point 50 px outside the left edge: the u-low term dominates
        // and approaches m + 50 for sharp softplus.
        let m = 0.05 * 480.0;
        let uv = vec![(-50.0, 240.0)];
        let c = cost_coverage(&uv, &k, 0.05, 2.0);
        let scalar_oracle = softplus(m + 50.0, 2.0)
            + softplus(m - 240.0, 2.0)
            + softplus(-50.0 - (640.0 - m), 2.0)
            + softplus(240.0 - (480.0 - m), 2.0);
        assert!((c - scalar_oracle).abs() < 1e-12);
        assert!((c - (m + 50.0)).abs() < 1e-6);
    }

    #[test]
    fn coverage_mirror_symmetric() {
        let k = k640();
        let uv = vec![(100.0, 50.0), (420.0, 300.0), (33.0, 470.0)];
        let mirrored: Vec<(f64, f64)> = uv.iter().map(|&(u, v)| (640.0 - u, v)).collect();
        let a = cost_coverage(&uv, &k, 0.05, 0.05);
        let b = cost_coverage(&mirrored, &k, 0.05, 0.05);
        assert!((a - b).abs() < 1e-9);
    }

    #[test]
    fn centering_cases() {
        let k = k640();
        assert_eq!(cost_centering(&[(320.0, 240.0)], &k), 0.0);
        assert_eq!(cost_centering(&[(323.0, 244.0)], &k), 25.0);
        // Linearity of the mean under a common shift.
        let uv = [(300.0, 200.0), (340.0, 280.0)];
        let shifted: Vec<(f64, f64)> = uv.iter().map(|&(u, v)| (u + 7.0, v - 3.0)).collect();
        let c = cost_centering(&shifted, &k);
        assert!((c - (7.0f64.powi(2) + 3.0f64.powi(2))).abs() < 1e-9);
    }

    #[test]
    fn size_cases() {
        let k = k640();
        // bbox exactly f_target of the frame.
        let target_area: f64 = 0.3 * 640.0 * 480.0;
        let side = target_area.sqrt();
        let uv = vec![(0.0, 0.0), (side, side)];
        assert!(cost_size(&uv, &k, 0.3).abs() < 1e-6);
        // Single point: zero area.
        let single = vec![(10.0, 10.0)];
        assert_eq!(cost_size(&single, &k, 0.3), (0.3 * 307200.0f64).powi(2));
        // Permutation invariance.
        let a = vec![(1.0, 2.0), (5.0, 9.0), (3.0, 4.0)];
        let b = vec![(3.0, 4.0), (1.0, 2.0), (5.0, 9.0)];
        assert_eq!(cost_size(&a, &k, 0.3), cost_size(&b, &k, 0.3));
    }

    #[test]
    fn obliquity_cases() {
        let rig = RigConfig::default();
        // Neutral gimbal: optical axis along +x. Normal along -x: parallel
        // up to sign, cost 0 by the absolute value.
        let g = GimbalState::new(0.0, 0.0, 0.0);
        let c = cost_obliquity(&g, &rig, &Vector3::new(-1.0, 0.0, 0.0));
        assert!(c.abs() < 1e-12);
        // Perpendicular normal.
        let c = cost_obliquity(&g, &rig, &Vector3::new(0.0, 0.0, 1.0));
        assert!((c - 1.0).abs() < 1e-12);
        // 60 degrees: (1 - cos 60)^2 = 0.25.
        let n = Vector3::new(60f64.to_radians().cos(), 60f64.to_radians().sin(), 0.0);
        let c = cost_obliquity(&g, &rig, &n);
        assert!((c - 0.25).abs() < 1e-12);
    }

    #[test]
    fn range_cases() {
        let rig = RigConfig::default();
        let g = GimbalState::new(0.0, 0.0, 0.0);
        let cam = rig.gimbal_origin_in_ccf;
        let target = cam + Vector3::new(1.0, 0.0, 0.0);
        assert!(cost_range(&g, &rig, &target, 1.0).abs() < 1e-12);
        let farther = cam + Vector3::new(1.5, 0.0, 0.0);
        assert!((cost_range(&g, &rig, &farther, 1.0) - 0.25).abs() < 1e-12);
    }

    #[test]
    fn range_unimodal_along_translation() {
        // Moving toward the ROI decreases the range term monotonically
        // until closest approach, then increases.
        let rig = RigConfig::default();
        let roi_center = Vector3::new(10.0, 0.0, -0.6);
        let costs: Vec<f64> = (0..40)
            .map(|i| {
                let x = i as f64 * 0.25;
                cost_range(&GimbalState::new(0.0, 0.0, x), &rig, &roi_center, 1.0)
            })
            .collect();
        let min_idx = costs
            .iter()
            .enumerate()
            .min_by(|a, b| a.1.partial_cmp(b.1).unwrap())
            .unwrap()
            .0;
        for i in 1..=min_idx {
            assert!(costs[i] <= costs[i - 1] + 1e-12);
        }
        for i in min_idx + 1..costs.len() {
            assert!(costs[i] >= costs[i - 1] - 1e-12);
        }
    }

    #[test]
    fn j1_zero_weights_and_one_hot() {
        let roi = test_roi([0.4, 0.6, 0.6, 0.8], 1.5);
        let rig = segment_rig();
        let k = k640();
        let g = GimbalState::new(0.1, 0.05, 1.0);
        let zero = CostWeights {
            w_cov: 0.0,
            w_ctr: 0.0,
            w_size: 0.0,
            w_obl: 0.0,
            w_range: 0.0,
            ..Default::default()
        };
        assert_eq!(eval_j1(&g, &roi, &rig, &k, &zero).total, 0.0);
        let one_hot = CostWeights { w_ctr: 1.0, ..zero };
        let eval = eval_j1(&g, &roi, &rig, &k, &one_hot);
        assert!((eval.total - cost_centering(&eval.uv, &k)).abs() < 1e-12);
    }

    #[test]
    fn j1_matches_straight_line_oracle() {
        // Second, independent implementation of the five terms using raw
        // 4x4 homogeneous arithmetic.
        let roi = test_roi([0.35, 0.55, 0.65, 0.85], 2.0);
        let rig = segment_rig();
        let k = k640();
        let w = CostWeights::default();
        let g = GimbalState::new(0.2, -0.1, 1.3);
        let eval = eval_j1(&g, &roi, &rig, &k, &w);

        // Build T_SC2 explicitly.
        let t_sc2: nalgebra::Matrix4<f64> = {
            let (spsi, cpsi) = g.yaw.sin_cos();
            let (sphi, cphi) = g.pitch.sin_cos();
            let rz = nalgebra::Matrix4::new(
                cpsi, -spsi, 0.0, 0.0, spsi, cpsi, 0.0, 0.0, 0.0, 0.0, 1.0, 0.0, 0.0, 0.0, 0.0, 1.0,
            );
            let ry = nalgebra::Matrix4::new(
                cphi, 0.0, sphi, 0.0, 0.0, 1.0, 0.0, 0.0, -sphi, 0.0, cphi, 0.0, 0.0, 0.0, 0.0, 1.0,
            );
            let mut t_sg = nalgebra::Matrix4::identity();
            t_sg[(0, 3)] = rig.gimbal_origin_in_ccf.x + g.axial;
            t_sg[(1, 3)] = rig.gimbal_origin_in_ccf.y;
            t_sg[(2, 3)] = rig.gimbal_origin_in_ccf.z;
            let mut t_gc2 = nalgebra::Matrix4::identity();
            t_gc2
                .fixed_view_mut::<3, 3>(0, 0)
                .copy_from(rig.t_gc2.rotation());
            t_sg * rz * ry * t_gc2
        };
        let t_c2s = t_sc2.try_inverse().unwrap();
        let mut uv = Vec::new();
        for p in &roi.vertices_ccf {
            let hp = t_c2s * nalgebra::Vector4::new(p.x, p.y, p.z, 1.0);
            uv.push((k.fx * hp.x / hp.z + k.cx, k.fy * hp.y / hp.z + k.cy));
        }
        let m = w.alpha * 480.0;
        let sp = |t: f64| softplus(t, w.softplus_beta);
        let cov: f64 = uv
            .iter()
            .map(|&(u, v)| sp(m - u) + sp(m - v) + sp(u - (640.0 - m)) + sp(v - (480.0 - m)))
            .sum();
        let n = uv.len() as f64;
        let ubar = uv.iter().map(|p| p.0).sum::<f64>() / n;
        let vbar = uv.iter().map(|p| p.1).sum::<f64>() / n;
        let ctr = (ubar - k.cx).powi(2) + (vbar - k.cy).powi(2);
        let umin = uv.iter().map(|p| p.0).fold(f64::MAX, f64::min);
        let umax = uv.iter().map(|p| p.0).fold(f64::MIN, f64::max);
        let vmin = uv.iter().map(|p| p.1).fold(f64::MAX, f64::min);
        let vmax = uv.iter().map(|p| p.1).fold(f64::MIN, f64::max);
        let size = ((umax - umin) * (vmax - vmin) - w.f_target * 640.0 * 480.0).powi(2);
        let zc = t_sc2.fixed_view::<3, 3>(0, 0) * Vector3::new(0.0, 0.0, 1.0);
        let obl = (1.0 - zc.dot(&roi.normal_ccf).abs()).powi(2);
        let cam = Vector3::new(t_sc2[(0, 3)], t_sc2[(1, 3)], t_sc2[(2, 3)]);
        let range = ((roi.center_ccf - cam).norm() - w.d_star).powi(2);
        let oracle =
            w.w_cov * cov + w.w_ctr * ctr + w.w_size * size + w.w_obl * obl + w.w_range * range;
        assert!(
            (eval.total - oracle).abs() <= 1e-12 * oracle.abs().max(1.0),
            "impl {} vs oracle {}",
            eval.total,
            oracle
        );
    }

    #[test]
    fn grid_single_cell() {
        let roi = test_roi([0.4, 0.6, 0.6, 0.8], 1.5);
        let rig = segment_rig();
        let grid = GridSpec {
            psi_steps: 1,
            phi_steps: 1,
            x_steps: 1,
        };
        let (g, _) = grid_search(&roi, &rig, &k640(), &CostWeights::default(), &grid);
        assert_eq!(g.yaw, 0.0);
        assert_eq!(g.pitch, 0.0);
        assert_eq!(g.axial, 2.5); // midpoint of [0, 5]
    }

    #[test]
    fn grid_matches_independent_exhaustive_scan() {
        let roi = test_roi([0.3, 0.55, 0.55, 0.8], 2.5);
        let rig = segment_rig();
        let k = k640();
        let w = CostWeights::default();
        let grid = GridSpec {
            psi_steps: 13,
            phi_steps: 7,
            x_steps: 9,
        };
        let (got, got_cost) = grid_search(&roi, &rig, &k, &w, &grid);

        // Independent scan: same axes, separate argmin bookkeeping.
        let psis = grid_axis(-rig.pan_limit / 2.0, rig.pan_limit / 2.0, 13);
        let phis = grid_axis(-rig.tilt_limit / 2.0, rig.tilt_limit / 2.0, 7);
        let xs = grid_axis(rig.x_bounds.0, rig.x_bounds.1, 9);
        let mut cells = Vec::new();
        for (xi, &x) in xs.iter().enumerate() {
            for (pi, &psi) in psis.iter().enumerate() {
                for (fi, &phi) in phis.iter().enumerate() {
                    let g = GimbalState::new(psi, phi, x);
                    cells.push(((xi, pi, fi), g, eval_j1(&g, &roi, &rig, &k, &w).total));
                }
            }
        }
        let (_, oracle_g, oracle_cost) = cells
            .iter()
            .min_by(|a, b| a.2.partial_cmp(&b.2).unwrap().then(a.0.cmp(&b.0)))
            .unwrap();
        assert_eq!(got_cost.to_bits(), oracle_cost.to_bits());
        assert_eq!(got.yaw.to_bits(), oracle_g.yaw.to_bits());
        assert_eq!(got.pitch.to_bits(), oracle_g.pitch.to_bits());
        assert_eq!(got.axial.to_bits(), oracle_g.axial.to_bits());
    }

    #[test]
    fn grid_symmetric_roi_yields_zero_yaw() {
        // ROI dead ahead on the invert with symmetric bounds: the grid
        // includes yaw 0 (odd step count) and symmetry plus the tie-break
        // keep it there.
        let roi = test_roi([0.45, 0.7, 0.55, 0.8], 1.2);
        assert!(roi.center_ccf.y.abs() < 1e-9);
        let rig = segment_rig();
        let (g, _) = grid_search(
            &roi,
            &rig,
            &k640(),
            &CostWeights::default(),
            &GridSpec::default(),
        );
        assert_eq!(g.yaw, 0.0);
    }

    #[test]
    fn refine_never_worsens_and_respects_bounds() {
        let roi = test_roi([0.3, 0.55, 0.5, 0.75], 2.0);
        let rig = segment_rig();
        let k = k640();
        let w = CostWeights::default();
        let (seed, _) = grid_search(&roi, &rig, &k, &w, &GridSpec::default());
        let sol = refine(&seed, &roi, &rig, &k, &w);
        assert!(sol.cost_refined <= sol.cost_seed + 1e-12);
        assert!(sol.refined.yaw.abs() <= rig.pan_limit / 2.0);
        assert!(sol.refined.pitch.abs() <= rig.tilt_limit / 2.0);
        assert!(sol.refined.axial >= rig.x_bounds.0 && sol.refined.axial <= rig.x_bounds.1);
    }

    #[test]
    fn refine_from_stationary_point_is_a_fixed_point() {
        let roi = test_roi([0.35, 0.6, 0.55, 0.8], 1.8);
        let rig = segment_rig();
        let k = k640();
        // Zero movement weights so the objective does not re-anchor at the
        // new seed: only then is the refined pose a true fixed point.
        let w = CostWeights {
            w_move: 0.0,
            w_trans: 0.0,
            ..Default::default()
        };
        let (seed, _) = grid_search(&roi, &rig, &k, &w, &GridSpec::default());
        let first = refine(&seed, &roi, &rig, &k, &w);
        // Re-seeding at the refined pose must essentially not move.
        let second = refine(&first.refined, &roi, &rig, &k, &w);
        let improvement = second.cost_seed - second.cost_refined;
        assert!(
            (0.0..1e-9).contains(&improvement),
            "improved by {improvement}"
        );
        assert!((second.refined.yaw - first.refined.yaw).abs() < 1e-4);
    }

    #[test]
    fn huge_regularizers_pin_the_seed() {
        let roi = test_roi([0.3, 0.55, 0.5, 0.75], 2.0);
        let rig = segment_rig();
        let k = k640();
        let w = CostWeights {
            w_move: 1e12,
            w_trans: 1e12,
            ..Default::default()
        };
        let (seed, _) = grid_search(&roi, &rig, &k, &w, &GridSpec::default());
        let sol = refine(&seed, &roi, &rig, &k, &w);
        assert!((sol.refined.yaw - seed.yaw).abs() < 1e-6);
        assert!((sol.refined.pitch - seed.pitch).abs() < 1e-6);
        assert!((sol.refined.axial - seed.axial).abs() < 1e-6);
    }

    #[test]
    fn gradient_self_consistency() {
        // Central differences at 1e-5 agree with 1e-7 steps to relative 1e-3
        // at random interior poses.
        let roi = test_roi([0.3, 0.55, 0.55, 0.8], 2.0);
        let rig = segment_rig();
        let k = k640();
        let w = CostWeights::default();
        let seed = GimbalState::new(0.0, 0.0, 1.0);
        let f = |v: [f64; 3]| {
            eval_j2(
                &GimbalState::new(v[0], v[1], v[2]),
                &seed,
                &roi,
                &rig,
                &k,
                &w,
            )
        };
        let mut rng_state = 0x12345u64;
        let mut next = || {
            rng_state = rng_state.wrapping_mul(6364136223846793005).wrapping_add(1);
            (rng_state >> 33) as f64 / (1u64 << 31) as f64 - 1.0
        };
        let mut tested = 0usize;
        for _ in 0..100 {
            let v = [next() * 0.9, next() * 0.3, 2.5 + next() * 2.0];
            // Skip poses on the behind-camera penalty plateau, where the
            // cost is piecewise constant and differences are ULP noise.
            if f(v) >= BEHIND_PENALTY {
                continue;
            }
            for i in 0..3 {
                let coarse = {
                    let (mut p, mut m) = (v, v);
                    p[i] += 1e-5;
                    m[i] -= 1e-5;
                    (f(p) - f(m)) / 2e-5
                };
                let fine = {
                    let (mut p, mut m) = (v, v);
                    p[i] += 1e-7;
                    m[i] -= 1e-7;
                    (f(p) - f(m)) / 2e-7
                };
                let scale = fine.abs().max(1e-3);
                assert!(
                    (coarse - fine).abs() / scale < 1e-3,
                    "coord {i}: {coarse} vs {fine} at {v:?}"
                );
            }
            tested += 1;
        }
        assert!(tested >= 50, "only {tested} interior poses sampled");
    }

    #[test]
    fn plan_orders_by_translation() {
        let near = test_roi([0.42, 0.65, 0.58, 0.85], 1.0);
        let far = test_roi([0.42, 0.55, 0.58, 0.65], 4.0);
        let rig = segment_rig();
        let k = k640();
        let w = CostWeights::default();
        // Deliberately pass the far ROI first.
        let batch = plan_viewpoints(&[far, near], &rig, &k, &w, &GridSpec::default());
        assert_eq!(batch.failures.len(), 0);
        assert_eq!(batch.planned.len(), 2);
        assert!(batch.planned[0].solution.refined.axial <= batch.planned[1].solution.refined.axial);
        assert_eq!(batch.planned[0].roi_index, 1); // the near ROI
    }

    #[test]
    fn softplus_is_overflow_safe() {
        assert!(softplus(1e6, 0.05).is_finite());
        assert!((softplus(1e6, 0.05) - 1e6).abs() < 1e-6);
        assert!(softplus(-1e6, 0.05).abs() < 1e-12);
    }
}

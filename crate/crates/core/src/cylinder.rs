//! Culvert cylinder estimation from a local point cloud.
//!
//! The bore axis is CCF `+x` by the frame convention, so the problem reduces
//! to a robust circle fit in the y-z plane: RANSAC over analytic
//! three-point circles, followed by a Kasa least-squares refit on the best
//! consensus set. Points are clipped radially onto the estimated surface and
//! normals come straight from the cylindrical geometry.

use nalgebra::{Matrix3, Vector2, Vector3};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Plausible culvert radius interval, meters. Hypotheses outside it are
/// discarded during RANSAC.
pub const RADIUS_BOUNDS: (f64, f64) = (0.3, 5.0);

/// Cap on the number of points the per-waypoint fit operates on.
pub const MAX_FIT_POINTS: usize = 5000;

const CENTER_EPS: f64 = 1e-12;
const ON_SURFACE_TOL: f64 = 1e-6;

#[derive(Debug, Error)]
pub enum CylinderError {
    #[error("need at least 3 non-collinear finite points, got a degenerate set")]
    DegenerateInput,
    #[error("best inlier fraction {best:.3} below required {required:.3}")]
    NoConsensus { best: f64, required: f64 },
    #[error("fitted radius {radius:.3} m outside plausible bounds")]
    ImplausibleRadius { radius: f64 },
    #[error("point coincides with the cylinder center in the y-z plane")]
    CenterCoincident,
    #[error("point is {distance:.3e} m off the cylinder surface")]
    OffSurface { distance: f64 },
}

/// Estimated culvert cylinder: axis along CCF +x, circular section in y-z.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct CulvertModel {
    pub radius: f64,
    /// Circle center in the CCF y-z plane.
    pub center_yz: Vector2<f64>,
}

impl CulvertModel {
    pub fn new(radius: f64, center_yz: Vector2<f64>) -> Result<Self, CylinderError> {
        if !(radius >= RADIUS_BOUNDS.0 && radius <= RADIUS_BOUNDS.1) {
            return Err(CylinderError::ImplausibleRadius { radius });
        }
        Ok(Self { radius, center_yz })
    }

    /// Signed radial error of a point: distance to the axis minus the radius.
    pub fn radial_error(&self, p: &Vector3<f64>) -> f64 {
        (Vector2::new(p.y, p.z) - self.center_yz).norm() - self.radius
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RansacConfig {
    pub iterations: usize,
    /// Absolute radial residual below which a point counts as an inlier, meters.
    pub inlier_threshold: f64,
    pub min_inlier_fraction: f64,
    pub seed: u64,
}

impl Default for RansacConfig {
    fn default() -> Self {
        // Chosen for the 1.2 m culvert scale with stereo-depth noise.
        Self {
            iterations: 500,
            inlier_threshold: 0.02,
            min_inlier_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Circle through three points, solved from the perpendicular-bisector
/// linear system. `None` when the points are (nearly) collinear.
fn circumscribed_circle(
    a: Vector2<f64>,
    b: Vector2<f64>,
    c: Vector2<f64>,
) -> Option<(Vector2<f64>, f64)> {
    let d = 2.0 * (a.x * (b.y - c.y) + b.x * (c.y - a.y) + c.x * (a.y - b.y));
    if d.abs() < 1e-12 {
        return None;
    }
    let a2 = a.norm_squared();
    let b2 = b.norm_squared();
    let c2 = c.norm_squared();
    let ux = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
    let uy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
    let center = Vector2::new(ux, uy);
    Some((center, (a - center).norm()))
}

/// Algebraic Kasa least-squares circle fit on a set of points.
fn kasa_fit(points: &[Vector2<f64>]) -> Option<(Vector2<f64>, f64)> {
    // Solve x^2 + y^2 + a x + b y + c = 0 in least squares via the 3x3
    // normal equations.
    let n = points.len() as f64;
    if points.len() < 3 {
        return None;
    }
    let (mut sx, mut sy, mut sxx, mut syy, mut sxy) = (0.0, 0.0, 0.0, 0.0, 0.0);
    let (mut sxz, mut syz, mut sz) = (0.0, 0.0, 0.0);
    for p in points {
        let z = p.norm_squared();
        sx += p.x;
        sy += p.y;
        sxx += p.x * p.x;
        syy += p.y * p.y;
        sxy += p.x * p.y;
        sxz += p.x * z;
        syz += p.y * z;
        sz += z;
    }
    let m = Matrix3::new(sxx, sxy, sx, sxy, syy, sy, sx, sy, n);
    let rhs = Vector3::new(-sxz, -syz, -sz);
    let sol = m.lu().solve(&rhs)?;
    let center = Vector2::new(-sol.x / 2.0, -sol.y / 2.0);
    let r2 = center.norm_squared() - sol.z;
    if r2 <= 0.0 {
        return None;
    }
    Some((center, r2.sqrt()))
}

/// Robust circle fit in the CCF y-z plane.
///
/// Deterministic given the seed: the winning hypothesis is selected by
/// (inlier count, then earliest iteration), and the returned model is the
/// Kasa refit on that consensus set. The inlier mask refers to the consensus
/// set of the winning hypothesis.
pub fn fit_circle_ransac(
    points_ccf: &[Vector3<f64>],
    cfg: &RansacConfig,
) -> Result<(CulvertModel, Vec<bool>), CylinderError> {
    if points_ccf.len() < 3 {
        return Err(CylinderError::DegenerateInput);
    }
    let yz: Vec<Vector2<f64>> = points_ccf.iter().map(|p| Vector2::new(p.y, p.z)).collect();
    if yz.iter().any(|p| !(p.x.is_finite() && p.y.is_finite())) {
        return Err(CylinderError::DegenerateInput);
    }

    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let n = yz.len();
    let mut best: Option<(usize, Vector2<f64>, f64)> = None; // (count, center, radius)
    let mut any_hypothesis = false;

    for _ in 0..cfg.iterations.max(1) {
        let i = rng.gen_range(0..n);
        let mut j = rng.gen_range(0..n);
        while j == i {
            j = rng.gen_range(0..n);
        }
        let mut k = rng.gen_range(0..n);
        while k == i || k == j {
            k = rng.gen_range(0..n);
        }
        let Some((center, radius)) = circumscribed_circle(yz[i], yz[j], yz[k]) else {
            continue;
        };
        if !(RADIUS_BOUNDS.0..=RADIUS_BOUNDS.1).contains(&radius) {
            continue;
        }
        any_hypothesis = true;
        let count = yz
            .iter()
            .filter(|p| ((*p - center).norm() - radius).abs() <= cfg.inlier_threshold)
            .count();
        // Strict > keeps the earliest iteration on ties.
        if best.is_none_or(|(c, _, _)| count > c) {
            best = Some((count, center, radius));
        }
    }

    let Some((count, center, radius)) = best else {
        if any_hypothesis {
            return Err(CylinderError::NoConsensus {
                best: 0.0,
                required: cfg.min_inlier_fraction,
            });
        }
        return Err(CylinderError::DegenerateInput);
    };
    let fraction = count as f64 / n as f64;
    if fraction < cfg.min_inlier_fraction {
        return Err(CylinderError::NoConsensus {
            best: fraction,
            required: cfg.min_inlier_fraction,
        });
    }

    let mask: Vec<bool> = yz
        .iter()
        .map(|p| ((p - center).norm() - radius).abs() <= cfg.inlier_threshold)
        .collect();
    let consensus: Vec<Vector2<f64>> = yz
        .iter()
        .zip(&mask)
        .filter(|(_, m)| **m)
        .map(|(p, _)| *p)
        .collect();
    let (center, radius) = kasa_fit(&consensus).ok_or(CylinderError::DegenerateInput)?;
    let model = CulvertModel::new(radius, center)?;
    Ok((model, mask))
}

/// Rescale each point's y-z component along the ray from the circle center so
/// it lies exactly on the surface. The x component is untouched; the angular
/// coordinate is preserved. Idempotent.
pub fn clip_to_cylinder(
    points_ccf: &[Vector3<f64>],
    model: &CulvertModel,
) -> Result<Vec<Vector3<f64>>, CylinderError> {
    points_ccf.iter().map(|p| clip_point(p, model)).collect()
}

pub fn clip_point(p: &Vector3<f64>, model: &CulvertModel) -> Result<Vector3<f64>, CylinderError> {
    let d = Vector2::new(p.y, p.z) - model.center_yz;
    let norm = d.norm();
    if norm <= CENTER_EPS {
        return Err(CylinderError::CenterCoincident);
    }
    let on_surface = model.center_yz + d * (model.radius / norm);
    Ok(Vector3::new(p.x, on_surface.x, on_surface.y))
}

/// Inward-pointing unit normal of the cylinder at an on-surface point.
///
/// Inward (toward the axis) is the canonical orientation since the camera
/// observes the wall from inside. The x component is exactly zero.
pub fn surface_normal(
    point_on_cylinder: &Vector3<f64>,
    model: &CulvertModel,
) -> Result<Vector3<f64>, CylinderError> {
    let radial = model.radial_error(point_on_cylinder);
    if radial.abs() > ON_SURFACE_TOL {
        return Err(CylinderError::OffSurface { distance: radial });
    }
    let d = model.center_yz - Vector2::new(point_on_cylinder.y, point_on_cylinder.z);
    let d = d.normalize();
    Ok(Vector3::new(0.0, d.x, d.y))
}

/// Deterministic uniform subsample: keeps at most `max` points with an even
/// stride over the input order.
pub fn subsample_uniform(points: &[Vector3<f64>], max: usize) -> Vec<Vector3<f64>> {
    if points.len() <= max || max == 0 {
        return points.to_vec();
    }
    let stride = points.len() as f64 / max as f64;
    (0..max)
        .map(|i| points[(i as f64 * stride) as usize])
        .collect()
}

pub mod io {
    //! Point cloud file formats: whitespace-delimited text, or packed
    //! little-endian `f32` x,y,z triples.

    use nalgebra::Vector3;
    use std::io::{self, Read, Write};

    pub fn read_text<R: Read>(mut reader: R) -> io::Result<Vec<Vector3<f64>>> {
        let mut text = String::new();
        reader.read_to_string(&mut text)?;
        let values: Result<Vec<f64>, _> = text.split_whitespace().map(str::parse).collect();
        let values = values
            .map_err(|e| io::Error::new(io::ErrorKind::InvalidData, format!("bad float: {e}")))?;
        if values.len() % 3 != 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "point cloud text must contain x y z triples",
            ));
        }
        Ok(values
            .chunks_exact(3)
            .map(|c| Vector3::new(c[0], c[1], c[2]))
            .collect())
    }

    pub fn read_binary<R: Read>(mut reader: R) -> io::Result<Vec<Vector3<f64>>> {
        let mut bytes = Vec::new();
        reader.read_to_end(&mut bytes)?;
        if bytes.len() % 12 != 0 {
            return Err(io::Error::new(
                io::ErrorKind::InvalidData,
                "binary point cloud must be packed f32 x,y,z triples",
            ));
        }
        Ok(bytes
            .chunks_exact(12)
            .map(|c| {
                let f = |o: usize| f32::from_le_bytes([c[o], c[o + 1], c[o + 2], c[o + 3]]) as f64;
                Vector3::new(f(0), f(4), f(8))
            })
            .collect())
    }

    pub fn write_binary<W: Write>(mut writer: W, points: &[Vector3<f64>]) -> io::Result<()> {
        for p in points {
            for v in [p.x, p.y, p.z] {
                writer.write_all(&(v as f32).to_le_bytes())?;
            }
        }
        Ok(())
    }
}

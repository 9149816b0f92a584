//! Fusing VLM box proposals with stereo depth into metric 3D ROIs.
//!
//! A proposal arrives as a normalized box with a textual reason and a
//! confidence. This module rescales it to pixels, samples depth statistics
//! inside the box, lifts the four corners at the near and far depth into
//! camera-1, transforms them into the CCF and pins everything onto the
//! fitted culvert surface. The result carries the eight surface vertices,
//! a clipped centroid and the local surface normal the planner needs.

use crate::cylinder::{self, CulvertModel, CylinderError};
use crate::geometry::{backproject, CameraIntrinsics, GeometryError, RigConfig};
use nalgebra::Vector3;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Minimum fraction of valid depth pixels inside a box for enrichment.
pub const MIN_VALID_FRACTION: f64 = 0.1;

#[derive(Debug, Error)]
pub enum RoiError {
    #[error("invalid proposal box {0:?}: expected 0 <= min < max <= 1 on both axes")]
    InvalidBox([f64; 4]),
    #[error("proposal confidence {0} outside [0, 1]")]
    InvalidConfidence(f64),
    #[error("box degenerates to zero pixel area after rounding and clamping")]
    EmptyBox,
    #[error("rectangle exceeds the image bounds")]
    RectOutOfBounds,
    #[error("no valid depth inside the box")]
    NoValidDepth,
    #[error("only {fraction:.3} of the box has valid depth, need {required}")]
    InsufficientDepth { fraction: f64, required: f64 },
    #[error(transparent)]
    Geometry(#[from] GeometryError),
    #[error(transparent)]
    Cylinder(#[from] CylinderError),
}

/// A raw VLM proposal: normalized box, free-text rationale, confidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RoiProposal {
    /// `[x_min, y_min, x_max, y_max]`, each in `[0, 1]`.
    #[serde(rename = "box")]
    pub box_norm: [f64; 4],
    pub reason: String,
    pub confidence: f64,
}

impl RoiProposal {
    pub fn validate(&self) -> Result<(), RoiError> {
        let [x0, y0, x1, y1] = self.box_norm;
        let in_unit = |v: f64| (0.0..=1.0).contains(&v);
        if !(in_unit(x0) && in_unit(y0) && in_unit(x1) && in_unit(y1) && x0 < x1 && y0 < y1) {
            return Err(RoiError::InvalidBox(self.box_norm));
        }
        if !(0.0..=1.0).contains(&self.confidence) {
            return Err(RoiError::InvalidConfidence(self.confidence));
        }
        Ok(())
    }
}

/// Single-channel depth image; NaN marks pixels without stereo support.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthImage {
    pub width: u32,
    pub height: u32,
    /// Row-major depth values in meters.
    pub values: Vec<f32>,
}

impl DepthImage {
    pub fn new(width: u32, height: u32, values: Vec<f32>) -> Self {
        assert_eq!(values.len(), (width * height) as usize);
        Self {
            width,
            height,
            values,
        }
    }

    pub fn constant(width: u32, height: u32, depth: f32) -> Self {
        Self::new(width, height, vec![depth; (width * height) as usize])
    }

    pub fn get(&self, u: u32, v: u32) -> f32 {
        self.values[(v * self.width + u) as usize]
    }

    pub fn is_valid(&self, u: u32, v: u32) -> bool {
        let d = self.get(u, v);
        d.is_finite() && d > 0.0
    }
}

/// Inclusive pixel rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PixelRect {
    pub x_min: u32,
    pub y_min: u32,
    pub x_max: u32,
    pub y_max: u32,
}

/// Depth summary over the valid pixels of a rectangle.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DepthStats {
    pub median: f64,
    pub min: f64,
    pub max: f64,
    pub valid_fraction: f64,
}

/// A proposal grounded in 3D: pixel box, depth summary, eight vertices on
/// the culvert surface, clipped centroid and inward surface normal.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EnrichedRoi {
    pub proposal: RoiProposal,
    pub box_px: PixelRect,
    pub depth_median: f64,
    pub depth_min: f64,
    pub depth_max: f64,
    pub valid_fraction: f64,
    pub vertices_ccf: Vec<Vector3<f64>>,
    pub center_ccf: Vector3<f64>,
    pub normal_ccf: Vector3<f64>,
}

/// Rescale a normalized box to integer pixels: multiply by the image size,
/// round half-up, clamp into the frame.
pub fn box_to_pixels(box_norm: &[f64; 4], k: &CameraIntrinsics) -> Result<PixelRect, RoiError> {
    let scale = |v: f64, extent: u32| -> u32 {
        let px = (v * extent as f64).round();
        px.clamp(0.0, (extent - 1) as f64) as u32
    };
    let rect = PixelRect {
        x_min: scale(box_norm[0], k.width),
        y_min: scale(box_norm[1], k.height),
        x_max: scale(box_norm[2], k.width),
        y_max: scale(box_norm[3], k.height),
    };
    if rect.x_min >= rect.x_max || rect.y_min >= rect.y_max {
        return Err(RoiError::EmptyBox);
    }
    Ok(rect)
}

/// Depth statistics over the valid pixels of a rectangle. For even counts
/// the median is the lower-middle element, which keeps the statistic
/// deterministic and free of interpolation.
pub fn sample_depth_stats(depth: &DepthImage, rect: &PixelRect) -> Result<DepthStats, RoiError> {
    if rect.x_max >= depth.width || rect.y_max >= depth.height {
        return Err(RoiError::RectOutOfBounds);
    }
    let mut valid: Vec<f32> = Vec::new();
    let mut total = 0usize;
    for v in rect.y_min..=rect.y_max {
        for u in rect.x_min..=rect.x_max {
            total += 1;
            if depth.is_valid(u, v) {
                valid.push(depth.get(u, v));
            }
        }
    }
    if valid.is_empty() {
        return Err(RoiError::NoValidDepth);
    }
    valid.sort_by(|a, b| a.partial_cmp(b).unwrap());
    Ok(DepthStats {
        median: valid[(valid.len() - 1) / 2] as f64,
        min: valid[0] as f64,
        max: valid[valid.len() - 1] as f64,
        valid_fraction: valid.len() as f64 / total as f64,
    })
}

/// Lift a proposal into a 3D ROI on the fitted culvert surface.
///
/// The eight vertices are the four pixel corners backprojected at the
/// minimum and maximum observed depth, transformed camera-1 -> CCF and
/// radially clipped onto the cylinder. The center is the clipped centroid
/// of the clipped vertices, which stays robust when depth inside the box is
/// bimodal.
pub fn enrich(
    proposal: &RoiProposal,
    depth: &DepthImage,
    k1: &CameraIntrinsics,
    rig: &RigConfig,
    model: &CulvertModel,
) -> Result<EnrichedRoi, RoiError> {
    proposal.validate()?;
    let rect = box_to_pixels(&proposal.box_norm, k1)?;
    let stats = sample_depth_stats(depth, &rect)?;
    if stats.valid_fraction < MIN_VALID_FRACTION {
        return Err(RoiError::InsufficientDepth {
            fraction: stats.valid_fraction,
            required: MIN_VALID_FRACTION,
        });
    }

    let corners = [
        (rect.x_min as f64, rect.y_min as f64),
        (rect.x_max as f64, rect.y_min as f64),
        (rect.x_max as f64, rect.y_max as f64),
        (rect.x_min as f64, rect.y_max as f64),
    ];
    let mut vertices = Vec::with_capacity(8);
    for d in [stats.min, stats.max] {
        for (u, v) in corners {
            let p_c1 = backproject(k1, u, v, d)?;
            vertices.push(rig.t_sc1.transform_point(&p_c1));
        }
    }
    let vertices = cylinder::clip_to_cylinder(&vertices, model)?;
    let centroid = vertices.iter().sum::<Vector3<f64>>() / vertices.len() as f64;
    let center_ccf = cylinder::clip_point(&centroid, model)?;
    let normal_ccf = cylinder::surface_normal(&center_ccf, model)?;

    Ok(EnrichedRoi {
        proposal: proposal.clone(),
        box_px: rect,
        depth_median: stats.median,
        depth_min: stats.min,
        depth_max: stats.max,
        valid_fraction: stats.valid_fraction,
        vertices_ccf: vertices,
        center_ccf,
        normal_ccf,
    })
}

pub mod io {
    //! Depth image file formats.
    //!
    //! Two interchangeable containers:
    //! - **Raw**: header of two little-endian `u32` (width, height) followed
    //!   by row-major little-endian `f32` depth values; NaN marks invalid.
    //! - **PFM** (`Pf` grayscale): standard portable float map, little-endian
    //!   (negative scale), rows stored bottom-up per the format; NaN marks
    //!   invalid.

    use super::DepthImage;
    use std::io::{self, BufRead, Read, Write};

    pub fn write_raw<W: Write>(mut w: W, depth: &DepthImage) -> io::Result<()> {
        w.write_all(&depth.width.to_le_bytes())?;
        w.write_all(&depth.height.to_le_bytes())?;
        for v in &depth.values {
            w.write_all(&v.to_le_bytes())?;
        }
        Ok(())
    }

    pub fn read_raw<R: Read>(mut r: R) -> io::Result<DepthImage> {
        let mut header = [0u8; 8];
        r.read_exact(&mut header)?;
        let width = u32::from_le_bytes(header[0..4].try_into().unwrap());
        let height = u32::from_le_bytes(header[4..8].try_into().unwrap());
        let count = (width as usize)
            .checked_mul(height as usize)
            .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidData, "image too large"))?;
        let mut bytes = vec![0u8; count * 4];
        r.read_exact(&mut bytes)?;
        let values = bytes
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes(c.try_into().unwrap()))
            .collect();
        Ok(DepthImage::new(width, height, values))
    }

    pub fn write_pfm<W: Write>(mut w: W, depth: &DepthImage) -> io::Result<()> {
        write!(w, "Pf\n{} {}\n-1.0\n", depth.width, depth.height)?;
        // PFM rows run bottom-up.
        for row in (0..depth.height).rev() {
            for col in 0..depth.width {
                w.write_all(&depth.get(col, row).to_le_bytes())?;
            }
        }
        Ok(())
    }

    pub fn read_pfm<R: BufRead>(mut r: R) -> io::Result<DepthImage> {
        let bad = |msg: &str| io::Error::new(io::ErrorKind::InvalidData, msg.to_string());
        let mut line = String::new();
        r.read_line(&mut line)?;
        if line.trim() != "Pf" {
            return Err(bad("expected grayscale PFM magic 'Pf'"));
        }
        line.clear();
        r.read_line(&mut line)?;
        let mut dims = line.split_whitespace();
        let width: u32 = dims
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad PFM dimensions"))?;
        let height: u32 = dims
            .next()
            .and_then(|s| s.parse().ok())
            .ok_or_else(|| bad("bad PFM dimensions"))?;
        line.clear();
        r.read_line(&mut line)?;
        let scale: f32 = line.trim().parse().map_err(|_| bad("bad PFM scale"))?;
        let little_endian = scale < 0.0;
        let mut bytes = vec![0u8; (width as usize) * (height as usize) * 4];
        r.read_exact(&mut bytes)?;
        let mut values = vec![0f32; (width * height) as usize];
        for row in 0..height {
            let src_row = height - 1 - row; // stored bottom-up
            for col in 0..width {
                let o = ((src_row * width + col) * 4) as usize;
                let b: [u8; 4] = bytes[o..o + 4].try_into().unwrap();
                let v = if little_endian {
                    f32::from_le_bytes(b)
                } else {
                    f32::from_be_bytes(b)
                };
                values[(row * width + col) as usize] = v;
            }
        }
        Ok(DepthImage::new(width, height, values))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::cylinder::CulvertModel;
    use nalgebra::Vector2;

    fn k640() -> CameraIntrinsics {
        CameraIntrinsics::new(500.0, 500.0, 320.0, 240.0, 640, 480).unwrap()
    }

    #[test]
    fn full_frame_box() {
        let rect = box_to_pixels(&[0.0, 0.0, 1.0, 1.0], &k640()).unwrap();
        assert_eq!(
            rect,
            PixelRect {
                x_min: 0,
                y_min: 0,
                x_max: 639,
                y_max: 479
            }
        );
    }

    #[test]
    fn quarter_box_arithmetic() {
        let rect = box_to_pixels(&[0.25, 0.5, 0.75, 1.0], &k640()).unwrap();
        assert_eq!(
            rect,
            PixelRect {
                x_min: 160,
                y_min: 240,
                x_max: 480,
                y_max: 479
            }
        );
    }

    #[test]
    fn degenerate_box_is_empty() {
        // Zero-width after rounding.
        assert!(matches!(
            box_to_pixels(&[0.5, 0.5, 0.5004, 0.6], &k640()),
            Err(RoiError::EmptyBox)
        ));
    }

    #[test]
    fn stats_uniform_depth() {
        let depth = DepthImage::constant(64, 48, 2.0);
        let rect = PixelRect {
            x_min: 0,
            y_min: 0,
            x_max: 63,
            y_max: 47,
        };
        let s = sample_depth_stats(&depth, &rect).unwrap();
        assert_eq!(
            (s.median, s.min, s.max, s.valid_fraction),
            (2.0, 2.0, 2.0, 1.0)
        );
    }

    #[test]
    fn stats_half_invalid() {
        let mut depth = DepthImage::constant(10, 10, 3.0);
        for v in 0..5 {
            for u in 0..10 {
                depth.values[(v * 10 + u) as usize] = f32::NAN;
            }
        }
        let rect = PixelRect {
            x_min: 0,
            y_min: 0,
            x_max: 9,
            y_max: 9,
        };
        let s = sample_depth_stats(&depth, &rect).unwrap();
        assert_eq!(
            (s.median, s.min, s.max, s.valid_fraction),
            (3.0, 3.0, 3.0, 0.5)
        );
    }

    #[test]
    fn median_is_lower_middle() {
        let depth = DepthImage::new(4, 1, vec![4.0, 2.0, 1.0, 3.0]);
        let rect = PixelRect {
            x_min: 0,
            y_min: 0,
            x_max: 3,
            y_max: 0,
        };
        let s = sample_depth_stats(&depth, &rect).unwrap();
        assert_eq!(s.median, 2.0); // sorted {1,2,3,4}, lower-middle rule
    }

    #[test]
    fn all_invalid_is_no_valid_depth() {
        let depth = DepthImage::constant(8, 8, f32::NAN);
        let rect = PixelRect {
            x_min: 0,
            y_min: 0,
            x_max: 7,
            y_max: 7,
        };
        assert!(matches!(
            sample_depth_stats(&depth, &rect),
            Err(RoiError::NoValidDepth)
        ));
    }

    #[test]
    fn enrich_pins_vertices_to_the_surface() {
        // Constant synthetic depth; geometry checked against the cylinder.
        let k = k640();
        let rig = RigConfig::default();
        let model = CulvertModel::new(0.6, Vector2::zeros()).unwrap();
        let proposal = RoiProposal {
            box_norm: [0.3, 0.6, 0.7, 0.9],
            reason: "test".into(),
            confidence: 0.9,
        };
        let depth = DepthImage::constant(640, 480, 1.5);
        let roi = enrich(&proposal, &depth, &k, &rig, &model).unwrap();
        assert_eq!(roi.vertices_ccf.len(), 8);
        for v in &roi.vertices_ccf {
            assert!(model.radial_error(v).abs() < 1e-6);
        }
        assert!(model.radial_error(&roi.center_ccf).abs() < 1e-6);
        assert!((roi.normal_ccf.norm() - 1.0).abs() < 1e-9);
        assert_eq!(roi.valid_fraction, 1.0);
        // Centroid x stays inside the vertex x-range.
        let xs: Vec<f64> = roi.vertices_ccf.iter().map(|v| v.x).collect();
        let (lo, hi) = xs
            .iter()
            .fold((f64::MAX, f64::MIN), |(l, h), &x| (l.min(x), h.max(x)));
        assert!(roi.center_ccf.x >= lo && roi.center_ccf.x <= hi);
    }

    #[test]
    fn enrich_is_deterministic() {
        let k = k640();
        let rig = RigConfig::default();
        let model = CulvertModel::new(0.6, Vector2::zeros()).unwrap();
        let proposal = RoiProposal {
            box_norm: [0.4, 0.55, 0.6, 0.8],
            reason: "det".into(),
            confidence: 0.5,
        };
        let depth = DepthImage::constant(640, 480, 2.0);
        let a = enrich(&proposal, &depth, &k, &rig, &model).unwrap();
        let b = enrich(&proposal, &depth, &k, &rig, &model).unwrap();
        assert_eq!(
            serde_json::to_string(&a).unwrap(),
            serde_json::to_string(&b).unwrap()
        );
    }

    #[test]
    fn enrich_rejects_invalid_depth_region() {
        let k = k640();
        let rig = RigConfig::default();
        let model = CulvertModel::new(0.6, Vector2::zeros()).unwrap();
        let proposal = RoiProposal {
            box_norm: [0.1, 0.1, 0.4, 0.4],
            reason: "hole".into(),
            confidence: 0.5,
        };
        let depth = DepthImage::constant(640, 480, f32::NAN);
        assert!(matches!(
            enrich(&proposal, &depth, &k, &rig, &model),
            Err(RoiError::NoValidDepth)
        ));
    }

    #[test]
    fn depth_io_roundtrips() {
        let mut depth = DepthImage::constant(5, 4, 1.25);
        depth.values[7] = f32::NAN;
        depth.values[13] = 3.5;

        let mut raw = Vec::new();
        io::write_raw(&mut raw, &depth).unwrap();
        let back = io::read_raw(raw.as_slice()).unwrap();
        assert_eq!(back.width, 5);
        assert_eq!(back.values[13], 3.5);
        assert!(back.values[7].is_nan());

        let mut pfm = Vec::new();
        io::write_pfm(&mut pfm, &depth).unwrap();
        let back = io::read_pfm(pfm.as_slice()).unwrap();
        assert_eq!((back.width, back.height), (5, 4));
        assert_eq!(back.values[13], 3.5);
        assert!(back.values[7].is_nan());
    }
}

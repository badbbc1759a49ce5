//! RGB-D frame containers and the per-frame observation cache.
//!
//! An [`RgbdFrame`] is raw sensor data (color, metric depth, instrument
//! mask). A [`FrameObservation`] is everything the tracker derives from it
//! once: the subsampled masked cloud with normals, dilated mask, per-pixel
//! incidence cosines for fusion, a footprint for overlap tests, and lazily
//! computed matching descriptors.

use std::sync::OnceLock;

use nalgebra::Vector3;
use thiserror::Error;

use crate::coarse::DescriptorSet;
use crate::geometry::{backproject, estimate_normals, CameraIntrinsics, PointCloud};

#[derive(Error, Debug)]
pub enum FrameError {
    #[error("buffer size {got} does not match {width}x{height}")]
    DimensionMismatch {
        got: usize,
        width: usize,
        height: usize,
    },
    #[error("negative depth at pixel {0}")]
    NegativeDepth(usize),
}

/// One RGB-D input frame. Depth is metric (meters) with 0 marking invalid
/// pixels; the mask flags instrument pixels.
#[derive(Debug, Clone)]
pub struct RgbdFrame {
    pub index: usize,
    pub timestamp: f64,
    pub color: Vec<[u8; 3]>,
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub intrinsics: CameraIntrinsics,
}

impl RgbdFrame {
    pub fn new(
        index: usize,
        timestamp: f64,
        color: Vec<[u8; 3]>,
        depth: Vec<f64>,
        mask: Vec<bool>,
        intrinsics: CameraIntrinsics,
    ) -> Result<Self, FrameError> {
        let n = intrinsics.width * intrinsics.height;
        for (len, _name) in [(color.len(), "color"), (depth.len(), "depth"), (mask.len(), "mask")] {
            if len != n {
                return Err(FrameError::DimensionMismatch {
                    got: len,
                    width: intrinsics.width,
                    height: intrinsics.height,
                });
            }
        }
        if let Some(i) = depth.iter().position(|d| *d < 0.0 || !d.is_finite()) {
            return Err(FrameError::NegativeDepth(i));
        }
        Ok(RgbdFrame {
            index,
            timestamp,
            color,
            depth,
            mask,
            intrinsics,
        })
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    /// Number of instrument pixels carrying valid depth.
    pub fn valid_masked_count(&self) -> usize {
        self.mask
            .iter()
            .zip(&self.depth)
            .filter(|(m, d)| **m && **d > 0.0)
            .count()
    }
}

/// Downscaled binary mask used for cheap "does this point land on the
/// instrument" tests during reference selection.
#[derive(Debug, Clone)]
pub struct MaskFootprint {
    width: usize,
    height: usize,
    scale: usize,
    cells_x: usize,
    bits: Vec<bool>,
}

impl MaskFootprint {
    pub fn from_mask(mask: &[bool], width: usize, height: usize, scale: usize) -> Self {
        let scale = scale.max(1);
        let cells_x = width.div_ceil(scale);
        let cells_y = height.div_ceil(scale);
        let mut bits = vec![false; cells_x * cells_y];
        for v in 0..height {
            for u in 0..width {
                if mask[v * width + u] {
                    bits[(v / scale) * cells_x + u / scale] = true;
                }
            }
        }
        MaskFootprint {
            width,
            height,
            scale,
            cells_x,
            bits,
        }
    }

    /// Test a full-resolution pixel coordinate.
    pub fn contains(&self, u: f64, v: f64) -> bool {
        if u < 0.0 || v < 0.0 || u >= self.width as f64 || v >= self.height as f64 {
            return false;
        }
        let cu = u as usize / self.scale;
        let cv = v as usize / self.scale;
        self.bits[cv * self.cells_x + cu]
    }

    pub fn occupancy(&self) -> f64 {
        self.bits.iter().filter(|b| **b).count() as f64 / self.bits.len() as f64
    }
}

/// Square binary dilation, separable in two passes.
pub fn dilate_mask(mask: &[bool], width: usize, height: usize, radius: usize) -> Vec<bool> {
    if radius == 0 {
        return mask.to_vec();
    }
    let r = radius as isize;
    let mut horiz = vec![false; mask.len()];
    for v in 0..height {
        for u in 0..width {
            if mask[v * width + u] {
                let lo = (u as isize - r).max(0) as usize;
                let hi = (u as isize + r).min(width as isize - 1) as usize;
                for x in lo..=hi {
                    horiz[v * width + x] = true;
                }
            }
        }
    }
    let mut out = vec![false; mask.len()];
    for v in 0..height {
        for u in 0..width {
            if horiz[v * width + u] {
                let lo = (v as isize - r).max(0) as usize;
                let hi = (v as isize + r).min(height as isize - 1) as usize;
                for y in lo..=hi {
                    out[y * width + u] = true;
                }
            }
        }
    }
    out
}

/// Tunables for turning a frame into an observation.
#[derive(Debug, Clone, Copy)]
pub struct ObservationParams {
    /// Upper bound on subsampled cloud size.
    pub max_cloud_points: usize,
    pub normal_neighbors: usize,
    pub mask_dilation_px: usize,
    pub footprint_scale: usize,
}

impl Default for ObservationParams {
    fn default() -> Self {
        ObservationParams {
            max_cloud_points: 8192,
            normal_neighbors: 16,
            mask_dilation_px: 3,
            footprint_scale: 4,
        }
    }
}

/// Everything derived from one frame that the tracker reuses: kept behind an
/// `Arc` and shared by the posture pool and graph nodes.
#[derive(Debug)]
pub struct FrameObservation {
    pub index: usize,
    pub timestamp: f64,
    pub intrinsics: CameraIntrinsics,
    /// Subsampled masked cloud in the camera frame, with normals and colors.
    pub cloud: PointCloud,
    /// Raw depth (meters, 0 invalid), full resolution.
    pub depth: Vec<f64>,
    pub mask: Vec<bool>,
    pub mask_dilated: Vec<bool>,
    /// |cos| between the viewing ray and the local depth-image normal,
    /// per pixel; 0 where unavailable. Used to de-bias projective fusion.
    pub pixel_cos: Vec<f32>,
    pub footprint: MaskFootprint,
    /// Centroid of the full-resolution masked cloud.
    pub centroid: Vector3<f64>,
    pub valid_masked: usize,
    descriptors: OnceLock<DescriptorSet>,
}

impl FrameObservation {
    pub fn from_frame(frame: &RgbdFrame, params: &ObservationParams) -> Self {
        let (w, h) = (frame.width(), frame.height());
        let k = &frame.intrinsics;

        let mut sum = Vector3::zeros();
        let mut masked_pixels: Vec<usize> = Vec::new();
        for pix in 0..w * h {
            if frame.mask[pix] && frame.depth[pix] > 0.0 {
                let (u, v) = (pix % w, pix / w);
                let p = backproject(k, [u as f64 + 0.5, v as f64 + 0.5], frame.depth[pix])
                    .expect("positive depth");
                sum += p;
                masked_pixels.push(pix);
            }
        }
        let valid_masked = masked_pixels.len();
        let centroid = if valid_masked > 0 {
            sum / valid_masked as f64
        } else {
            Vector3::zeros()
        };

        let stride = valid_masked.div_ceil(params.max_cloud_points).max(1);
        let mut points = Vec::new();
        let mut colors = Vec::new();
        for (rank, &pix) in masked_pixels.iter().enumerate() {
            if rank % stride != 0 {
                continue;
            }
            let (u, v) = (pix % w, pix / w);
            let p = backproject(k, [u as f64 + 0.5, v as f64 + 0.5], frame.depth[pix]).unwrap();
            points.push(p);
            let c = frame.color[pix];
            colors.push([
                c[0] as f64 / 255.0,
                c[1] as f64 / 255.0,
                c[2] as f64 / 255.0,
            ]);
        }
        let mut cloud = PointCloud::from_points(points);
        cloud.colors = Some(colors);
        if cloud.len() >= params.normal_neighbors {
            cloud = estimate_normals(&cloud, params.normal_neighbors).expect("size checked");
        }

        let mask_dilated = dilate_mask(&frame.mask, w, h, params.mask_dilation_px);
        let pixel_cos = incidence_cosines(frame);
        let footprint = MaskFootprint::from_mask(&frame.mask, w, h, params.footprint_scale);

        FrameObservation {
            index: frame.index,
            timestamp: frame.timestamp,
            intrinsics: *k,
            cloud,
            depth: frame.depth.clone(),
            mask: frame.mask.clone(),
            mask_dilated: mask_dilated.clone(),
            pixel_cos,
            footprint,
            centroid,
            valid_masked,
            descriptors: OnceLock::new(),
        }
    }

    pub fn width(&self) -> usize {
        self.intrinsics.width
    }

    pub fn height(&self) -> usize {
        self.intrinsics.height
    }

    pub fn depth_at(&self, u: usize, v: usize) -> f64 {
        self.depth[v * self.width() + u]
    }

    /// Depth restricted to instrument pixels (0 elsewhere).
    pub fn masked_depth_at(&self, u: usize, v: usize) -> f64 {
        let pix = v * self.width() + u;
        if self.mask[pix] {
            self.depth[pix]
        } else {
            0.0
        }
    }

    pub fn has_geometry(&self) -> bool {
        self.valid_masked > 0 && !self.cloud.is_empty()
    }

    /// Instrument depth at a subpixel position: bilinear when all four
    /// neighbors are valid masked pixels, otherwise the nearest pixel if it
    /// is valid, otherwise `None`.
    pub fn masked_depth_lookup(&self, u: f64, v: f64) -> Option<f64> {
        let (w, h) = (self.width(), self.height());
        if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
            return None;
        }
        let gu = u - 0.5;
        let gv = v - 0.5;
        let u0 = gu.floor();
        let v0 = gv.floor();
        let (ui, vi) = (u0 as isize, v0 as isize);
        if ui >= 0 && vi >= 0 && (ui as usize) + 1 < w && (vi as usize) + 1 < h {
            let (ui, vi) = (ui as usize, vi as usize);
            let mut vals = [0.0f64; 4];
            let mut all_valid = true;
            for (slot, (du, dv)) in [(0, 0), (1, 0), (0, 1), (1, 1)].iter().enumerate() {
                let pix = (vi + dv) * w + ui + du;
                if self.mask[pix] && self.depth[pix] > 0.0 {
                    vals[slot] = self.depth[pix];
                } else {
                    all_valid = false;
                    break;
                }
            }
            if all_valid {
                let fu = gu - u0;
                let fv = gv - v0;
                return Some(
                    vals[0] * (1.0 - fu) * (1.0 - fv)
                        + vals[1] * fu * (1.0 - fv)
                        + vals[2] * (1.0 - fu) * fv
                        + vals[3] * fu * fv,
                );
            }
        }
        let pix = (v as usize).min(h - 1) * w + (u as usize).min(w - 1);
        (self.mask[pix] && self.depth[pix] > 0.0).then(|| self.depth[pix])
    }

    /// Matching descriptors, computed on first use.
    pub fn descriptors(&self) -> &DescriptorSet {
        self.descriptors
            .get_or_init(|| DescriptorSet::compute(&self.cloud))
    }
}

/// Per-pixel |cos| between the viewing ray and the depth-derived surface
/// normal. Falls back to one-sided differences at mask boundaries and to 1.0
/// where no neighbor is valid.
fn incidence_cosines(frame: &RgbdFrame) -> Vec<f32> {
    let (w, h) = (frame.width(), frame.height());
    let k = &frame.intrinsics;
    let point = |u: usize, v: usize| -> Option<Vector3<f64>> {
        let d = frame.depth[v * w + u];
        (d > 0.0).then(|| backproject(k, [u as f64 + 0.5, v as f64 + 0.5], d).unwrap())
    };
    let mut out = vec![0.0f32; w * h];
    for v in 0..h {
        for u in 0..w {
            let pix = v * w + u;
            if !(frame.mask[pix] && frame.depth[pix] > 0.0) {
                continue;
            }
            let p = point(u, v).unwrap();
            let fwd_u = if u + 1 < w { point(u + 1, v) } else { None };
            let bwd_u = if u > 0 { point(u - 1, v) } else { None };
            let fwd_v = if v + 1 < h { point(u, v + 1) } else { None };
            let bwd_v = if v > 0 { point(u, v - 1) } else { None };
            let du = difference(fwd_u, bwd_u, &p);
            let dv = difference(fwd_v, bwd_v, &p);
            out[pix] = match (du, dv) {
                (Some(du), Some(dv)) => {
                    let n = du.cross(&dv);
                    let norm = n.norm();
                    if norm < 1e-12 {
                        1.0
                    } else {
                        (n.dot(&p.normalize()).abs() / norm).clamp(0.0, 1.0) as f32
                    }
                }
                _ => 1.0,
            };
        }
    }
    out
}

/// Central difference when both neighbors are valid, one-sided otherwise.
fn difference(
    fwd: Option<Vector3<f64>>,
    bwd: Option<Vector3<f64>>,
    p: &Vector3<f64>,
) -> Option<Vector3<f64>> {
    match (fwd, bwd) {
        (Some(a), Some(b)) => Some(a - b),
        (Some(a), None) => Some(a - p),
        (None, Some(b)) => Some(p - b),
        (None, None) => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn plane_frame(w: usize, h: usize, depth: f64) -> RgbdFrame {
        let k = CameraIntrinsics::new(100.0, 100.0, w as f64 / 2.0, h as f64 / 2.0, w, h).unwrap();
        let mut mask = vec![false; w * h];
        let mut d = vec![0.0; w * h];
        for v in h / 4..3 * h / 4 {
            for u in w / 4..3 * w / 4 {
                mask[v * w + u] = true;
                d[v * w + u] = depth;
            }
        }
        RgbdFrame::new(0, 0.0, vec![[128; 3]; w * h], d, mask, k).unwrap()
    }

    #[test]
    fn observation_centroid_is_masked_mean() {
        let frame = plane_frame(64, 48, 1.0);
        let obs = FrameObservation::from_frame(&frame, &ObservationParams::default());
        assert!(obs.valid_masked > 0);
        assert!((obs.centroid.z - 1.0).abs() < 1e-12);
    }

    #[test]
    fn frontal_plane_has_unit_incidence() {
        let frame = plane_frame(64, 48, 1.0);
        let obs = FrameObservation::from_frame(&frame, &ObservationParams::default());
        // Interior mask pixels look at the plane head-on through the center;
        // obliquity stays mild across a 64x48 image at f=100.
        let w = obs.width();
        let pix = (24 * w) + 32;
        assert!(obs.mask[pix]);
        assert!(obs.pixel_cos[pix] > 0.9);
    }

    #[test]
    fn dilation_grows_by_radius() {
        let mut mask = vec![false; 25];
        mask[12] = true; // center of 5x5
        let d = dilate_mask(&mask, 5, 5, 1);
        let count = d.iter().filter(|b| **b).count();
        assert_eq!(count, 9);
        assert!(!d[0]);
    }

    #[test]
    fn footprint_round_trips_mask_blocks() {
        let mut mask = vec![false; 8 * 8];
        mask[3 * 8 + 5] = true;
        let fp = MaskFootprint::from_mask(&mask, 8, 8, 4);
        assert!(fp.contains(5.0, 3.0));
        assert!(fp.contains(4.0, 0.0)); // same 4x4 cell
        assert!(!fp.contains(0.0, 0.0));
        assert!(!fp.contains(-1.0, 3.0));
    }

    #[test]
    fn dimension_mismatch_is_rejected() {
        let k = CameraIntrinsics::new(10.0, 10.0, 2.0, 2.0, 4, 4).unwrap();
        let r = RgbdFrame::new(0, 0.0, vec![[0; 3]; 16], vec![0.0; 15], vec![false; 16], k);
        assert!(r.is_err());
    }
}

//! Truncated signed-distance-field object model.
//!
//! The volume is a dense voxel grid of signed distances (meters, clamped to
//! `±truncation`) with per-voxel accumulation weights. It is built by
//! projective fusion of masked depth frames, refined by gradient descent on
//! the occlusion/surface losses, queried with trilinear interpolation, and
//! meshed for reconstruction metrics.

pub mod mesh;

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use thiserror::Error;

use crate::exec;
use crate::frame::FrameObservation;
use crate::geometry::{project, RigidTransform};

/// Weight cap bounding stale-frame inertia during long sequences.
pub const WEIGHT_CAP: f64 = 64.0;
/// Weight of behind-band updates that fill the object interior. Kept far
/// below the in-band weight so free-space evidence always dominates where a
/// voxel was ever seen empty.
pub const CARVE_WEIGHT: f64 = 0.05;

#[derive(Error, Debug)]
pub enum SdfError {
    #[error("invalid volume parameters: {0}")]
    InvalidParams(String),
    #[error("io error: {0}")]
    Io(#[from] std::io::Error),
    #[error("bad checkpoint: {0}")]
    BadCheckpoint(String),
}

/// Outcome of integrating one frame.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IntegrationOutcome {
    Integrated,
    /// The frame carried no usable masked depth and was skipped.
    SkippedEmptyMask,
}

#[derive(Debug, Clone)]
pub struct SdfVolume {
    origin: Vector3<f64>,
    voxel_size: f64,
    dims: [usize; 3],
    truncation: f64,
    values: Vec<f64>,
    weights: Vec<f64>,
}

impl SdfVolume {
    pub fn new(
        origin: Vector3<f64>,
        voxel_size: f64,
        dims: [usize; 3],
        truncation: f64,
    ) -> Result<Self, SdfError> {
        if voxel_size <= 0.0 || truncation <= 0.0 {
            return Err(SdfError::InvalidParams(
                "voxel size and truncation must be positive".into(),
            ));
        }
        if dims.iter().any(|d| *d < 8) {
            return Err(SdfError::InvalidParams(format!(
                "dims {dims:?} below the 8-voxel minimum"
            )));
        }
        let n = dims[0] * dims[1] * dims[2];
        Ok(SdfVolume {
            origin,
            voxel_size,
            dims,
            truncation,
            values: vec![truncation; n],
            weights: vec![0.0; n],
        })
    }

    /// Cube volume centered on `center` sized to cover a cloud: half-side =
    /// `halfside_scale` x the cloud's maximum distance from `center`.
    pub fn fit_to_cloud(
        points: &[Vector3<f64>],
        center: Vector3<f64>,
        voxel_size: f64,
        max_dim: usize,
        halfside_scale: f64,
        truncation: f64,
    ) -> Result<Self, SdfError> {
        if points.is_empty() {
            return Err(SdfError::InvalidParams("empty cloud".into()));
        }
        let r_max = points
            .iter()
            .map(|p| (p - center).norm())
            .fold(0.0, f64::max)
            .max(voxel_size * 8.0);
        let half = halfside_scale * r_max;
        let dim = ((2.0 * half / voxel_size).ceil() as usize).clamp(16, max_dim.max(16));
        let half_actual = 0.5 * dim as f64 * voxel_size;
        Ok(SdfVolume::new(
            center - Vector3::repeat(half_actual),
            voxel_size,
            [dim, dim, dim],
            truncation,
        )?)
    }

    pub fn dims(&self) -> [usize; 3] {
        self.dims
    }

    pub fn voxel_size(&self) -> f64 {
        self.voxel_size
    }

    pub fn truncation(&self) -> f64 {
        self.truncation
    }

    pub fn origin(&self) -> Vector3<f64> {
        self.origin
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    #[inline]
    pub fn linear_index(&self, x: usize, y: usize, z: usize) -> usize {
        x + self.dims[0] * (y + self.dims[1] * z)
    }

    /// Center of voxel (x, y, z) in object coordinates.
    pub fn voxel_center(&self, x: usize, y: usize, z: usize) -> Vector3<f64> {
        self.origin
            + Vector3::new(
                (x as f64 + 0.5) * self.voxel_size,
                (y as f64 + 0.5) * self.voxel_size,
                (z as f64 + 0.5) * self.voxel_size,
            )
    }

    pub fn value(&self, x: usize, y: usize, z: usize) -> f64 {
        self.values[self.linear_index(x, y, z)]
    }

    pub fn weight(&self, x: usize, y: usize, z: usize) -> f64 {
        self.weights[self.linear_index(x, y, z)]
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    /// Overwrite one voxel; values clamp to the truncation band. Mainly for
    /// constructing volumes from analytic fields.
    pub fn set_voxel(&mut self, x: usize, y: usize, z: usize, value: f64, weight: f64) {
        let i = self.linear_index(x, y, z);
        self.values[i] = value.clamp(-self.truncation, self.truncation);
        self.weights[i] = weight;
    }

    /// Fill every voxel from a field evaluated at voxel centers, marking all
    /// of them observed.
    pub fn fill_from_field(&mut self, f: impl Fn(&Vector3<f64>) -> f64) {
        for z in 0..self.dims[2] {
            for y in 0..self.dims[1] {
                for x in 0..self.dims[0] {
                    let p = self.voxel_center(x, y, z);
                    self.set_voxel(x, y, z, f(&p), 1.0);
                }
            }
        }
    }

    /// Weighted-average projective TSDF update from one masked frame.
    /// `pose` maps camera coordinates into the object frame.
    ///
    /// Per voxel in the frustum whose projection lands in the dilated mask:
    /// in-band distances are de-biased by the pixel incidence cosine and
    /// averaged with weight 1, free space ahead of the band carves at
    /// `+truncation` with weight 1, and space behind the band fills at
    /// `-truncation` with a small weight so the interior reads as solid
    /// without overriding free-space evidence.
    pub fn integrate_frame(
        &mut self,
        obs: &FrameObservation,
        pose: &RigidTransform,
    ) -> IntegrationOutcome {
        if obs.valid_masked == 0 {
            return IntegrationOutcome::SkippedEmptyMask;
        }
        let world_to_cam = pose.inverse();
        let (nx, ny) = (self.dims[0], self.dims[1]);
        let slab = nx * ny;
        let trunc = self.truncation;
        let origin = self.origin;
        let voxel = self.voxel_size;
        let k = obs.intrinsics;
        let (w, h) = (obs.width(), obs.height());

        exec::for_each_slab_pair_mut(&mut self.values, &mut self.weights, slab, |z, vals, wts| {
            for y in 0..ny {
                for x in 0..nx {
                    let p_obj = origin
                        + Vector3::new(
                            (x as f64 + 0.5) * voxel,
                            (y as f64 + 0.5) * voxel,
                            (z as f64 + 0.5) * voxel,
                        );
                    let p_cam = world_to_cam.transform_point(&p_obj);
                    if p_cam.z <= 1e-6 {
                        continue;
                    }
                    let Ok(px) = project(&k, &p_cam) else { continue };
                    let (u, v) = (px[0].floor(), px[1].floor());
                    if u < 0.0 || v < 0.0 || u >= w as f64 || v >= h as f64 {
                        continue;
                    }
                    let pix = v as usize * w + u as usize;
                    if !obs.mask_dilated[pix] {
                        continue;
                    }
                    let d = obs.depth[pix];
                    if d <= 0.0 {
                        continue;
                    }
                    let proj = d - p_cam.z;
                    let (update, w_inc) = if proj.abs() <= trunc {
                        let cos = obs.pixel_cos[pix] as f64;
                        let cos = if cos > 0.0 { cos } else { 1.0 };
                        ((proj * cos).clamp(-trunc, trunc), 1.0)
                    } else if proj > trunc {
                        (trunc, 1.0)
                    } else {
                        (-trunc, CARVE_WEIGHT)
                    };
                    let i = y * nx + x;
                    let w_old = wts[i];
                    vals[i] = ((vals[i] * w_old + update * w_inc) / (w_old + w_inc))
                        .clamp(-trunc, trunc);
                    wts[i] = (w_old + w_inc).min(WEIGHT_CAP);
                }
            }
        });
        IntegrationOutcome::Integrated
    }

    /// Trilinear signed distance and its gradient at an object-frame point.
    /// Returns `None` outside the grid or where any of the 8 surrounding
    /// voxels is unobserved.
    pub fn query(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let g = (p - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        let x0 = g.x.floor();
        let y0 = g.y.floor();
        let z0 = g.z.floor();
        if x0 < 0.0 || y0 < 0.0 || z0 < 0.0 {
            return None;
        }
        let (xi, yi, zi) = (x0 as usize, y0 as usize, z0 as usize);
        if xi + 1 >= self.dims[0] || yi + 1 >= self.dims[1] || zi + 1 >= self.dims[2] {
            return None;
        }
        let f = Vector3::new(g.x - x0, g.y - y0, g.z - z0);

        let mut corner = [0.0f64; 8];
        for (c, val) in corner.iter_mut().enumerate() {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let idx = self.linear_index(xi + dx, yi + dy, zi + dz);
            if self.weights[idx] <= 0.0 {
                return None;
            }
            *val = self.values[idx];
        }

        let mut value = 0.0;
        let mut grad = Vector3::zeros();
        for (c, val) in corner.iter().enumerate() {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let wx = if dx == 1 { f.x } else { 1.0 - f.x };
            let wy = if dy == 1 { f.y } else { 1.0 - f.y };
            let wz = if dz == 1 { f.z } else { 1.0 - f.z };
            let sx = if dx == 1 { 1.0 } else { -1.0 };
            let sy = if dy == 1 { 1.0 } else { -1.0 };
            let sz = if dz == 1 { 1.0 } else { -1.0 };
            value += wx * wy * wz * val;
            grad.x += sx * wy * wz * val;
            grad.y += wx * sy * wz * val;
            grad.z += wx * wy * sz * val;
        }
        Some((value, grad / self.voxel_size))
    }

    /// Trilinear corner indices and weights for a point, or `None` under the
    /// same observability rules as [`SdfVolume::query`].
    fn trilinear_support(&self, p: &Vector3<f64>) -> Option<([usize; 8], [f64; 8])> {
        let g = (p - self.origin) / self.voxel_size - Vector3::repeat(0.5);
        let x0 = g.x.floor();
        let y0 = g.y.floor();
        let z0 = g.z.floor();
        if x0 < 0.0 || y0 < 0.0 || z0 < 0.0 {
            return None;
        }
        let (xi, yi, zi) = (x0 as usize, y0 as usize, z0 as usize);
        if xi + 1 >= self.dims[0] || yi + 1 >= self.dims[1] || zi + 1 >= self.dims[2] {
            return None;
        }
        let f = Vector3::new(g.x - x0, g.y - y0, g.z - z0);
        let mut idx = [0usize; 8];
        let mut wgt = [0.0f64; 8];
        for c in 0..8 {
            let (dx, dy, dz) = (c & 1, (c >> 1) & 1, (c >> 2) & 1);
            let i = self.linear_index(xi + dx, yi + dy, zi + dz);
            if self.weights[i] <= 0.0 {
                return None;
            }
            let wx = if dx == 1 { f.x } else { 1.0 - f.x };
            let wy = if dy == 1 { f.y } else { 1.0 - f.y };
            let wz = if dz == 1 { f.z } else { 1.0 - f.z };
            idx[c] = i;
            wgt[c] = wx * wy * wz;
        }
        Some((idx, wgt))
    }
}

/// Refinement sample sets: free-space points where mask evidence is
/// occluder-ambiguous, and near-surface points with their band offsets.
///
/// A surface sample stores `d_v` such that the surface residual is
/// `Ψ(v) + d_v - truncation`, which vanishes when `Ψ` equals the projective
/// signed distance observed along the ray.
#[derive(Debug, Clone, Default)]
pub struct SampleSets {
    pub v_occ: Vec<Vector3<f64>>,
    pub v_surf: Vec<(Vector3<f64>, f64)>,
}

impl SampleSets {
    pub fn is_empty(&self) -> bool {
        self.v_occ.is_empty() && self.v_surf.is_empty()
    }

    pub fn extend(&mut self, other: &SampleSets) {
        self.v_occ.extend_from_slice(&other.v_occ);
        self.v_surf.extend_from_slice(&other.v_surf);
    }

    pub fn len(&self) -> usize {
        self.v_occ.len() + self.v_surf.len()
    }

    /// Deterministic stride subsample keeping at most `max` total samples.
    pub fn subsampled(&self, max: usize) -> SampleSets {
        let total = self.len();
        if total <= max || max == 0 {
            return self.clone();
        }
        let stride = total.div_ceil(max);
        SampleSets {
            v_occ: self.v_occ.iter().step_by(stride).copied().collect(),
            v_surf: self.v_surf.iter().step_by(stride).copied().collect(),
        }
    }
}

/// Parameters for ray sampling during refinement.
#[derive(Debug, Clone, Copy)]
pub struct SampleParams {
    pub n_per_ray: usize,
    /// Upper bound on sampled rays per frame.
    pub max_rays: usize,
    pub seed: u64,
}

impl Default for SampleParams {
    fn default() -> Self {
        SampleParams {
            n_per_ray: 6,
            max_rays: 4096,
            seed: 0,
        }
    }
}

/// Stratified classification of ray samples into occlusion-ambiguous free
/// space (`V_occ`) and the near-surface band (`V_surf`).
///
/// For a masked pixel with depth `d`, samples at ray depth `z` with
/// `d - z > truncation` land in `V_occ`, samples with `|d - z| <= truncation`
/// land in `V_surf`, and samples beyond `d + truncation` are discarded
/// (never generated). Pixels in the dilated boundary ring that carry valid
/// depth contribute free-space samples only: there the mask and depth
/// disagree about what the ray hit.
pub fn classify_samples(
    obs: &FrameObservation,
    pose: &RigidTransform,
    vol: &SdfVolume,
    params: &SampleParams,
) -> SampleSets {
    let mut out = SampleSets::default();
    if obs.valid_masked == 0 {
        return out;
    }
    let trunc = vol.truncation();
    let (w, h) = (obs.width(), obs.height());
    let mut rng = ChaCha8Rng::seed_from_u64(params.seed ^ (obs.index as u64).wrapping_mul(0x9e37));

    let mut rays: Vec<(usize, bool)> = Vec::new(); // (pixel, is_ring)
    for pix in 0..w * h {
        if obs.depth[pix] <= 0.0 {
            continue;
        }
        if obs.mask[pix] {
            rays.push((pix, false));
        } else if obs.mask_dilated[pix] {
            rays.push((pix, true));
        }
    }
    let stride = rays.len().div_ceil(params.max_rays).max(1);

    let n_surf = params.n_per_ray.div_ceil(2);
    let n_occ = params.n_per_ray - n_surf;
    for (rank, &(pix, is_ring)) in rays.iter().enumerate() {
        if rank % stride != 0 {
            continue;
        }
        let d = obs.depth[pix];
        let (u, v) = (pix % w, pix / w);
        let pixel = [u as f64 + 0.5, v as f64 + 0.5];
        let sample_at = |z: f64| -> Vector3<f64> {
            let p_cam = crate::geometry::backproject(&obs.intrinsics, pixel, z).unwrap();
            pose.transform_point(&p_cam)
        };

        // Free-space zone strictly ahead of the band.
        let occ_budget = if is_ring { params.n_per_ray } else { n_occ };
        let lo = (d - 6.0 * trunc).max(0.05);
        let hi = d - trunc;
        if hi > lo && occ_budget > 0 {
            for i in 0..occ_budget {
                let t = (i as f64 + rng.gen::<f64>()) / occ_budget as f64;
                let z = lo + t * (hi - lo);
                let p = sample_at(z);
                if vol.trilinear_support(&p).is_some() || in_bounds(vol, &p) {
                    out.v_occ.push(p);
                }
            }
        }
        if is_ring {
            continue;
        }
        // Truncation band around the observed surface.
        for i in 0..n_surf {
            let t = (i as f64 + rng.gen::<f64>()) / n_surf as f64;
            let z = (d - trunc) + t * (2.0 * trunc);
            if z <= 0.0 {
                continue;
            }
            let p = sample_at(z);
            if in_bounds(vol, &p) {
                let d_v = trunc - (d - z);
                out.v_surf.push((p, d_v));
            }
        }
    }
    out
}

fn in_bounds(vol: &SdfVolume, p: &Vector3<f64>) -> bool {
    let g = (p - vol.origin()) / vol.voxel_size() - Vector3::repeat(0.5);
    g.x >= 0.0
        && g.y >= 0.0
        && g.z >= 0.0
        && (g.x as usize) + 1 < vol.dims()[0]
        && (g.y as usize) + 1 < vol.dims()[1]
        && (g.z as usize) + 1 < vol.dims()[2]
}

/// Mean squared deviation of free-space samples from the margin `delta`.
/// Unobserved queries are excluded; an empty (or fully excluded) set scores 0.
pub fn occlusion_loss(vol: &SdfVolume, v_occ: &[Vector3<f64>], delta: f64) -> f64 {
    assert!(delta > 0.0, "delta must be positive");
    let (sum, count) = occ_terms(vol, v_occ, delta);
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn occ_terms(vol: &SdfVolume, v_occ: &[Vector3<f64>], delta: f64) -> (f64, usize) {
    let parts = exec::map_chunks(v_occ.len(), exec::DEFAULT_CHUNK, |range| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in range {
            if let Some((psi, _)) = vol.query(&v_occ[i]) {
                let r = psi - delta;
                sum += r * r;
                count += 1;
            }
        }
        (sum, count)
    });
    parts
        .into_iter()
        .fold((0.0, 0), |(s, c), (ps, pc)| (s + ps, c + pc))
}

/// Mean squared surface-band residual `(Ψ(v) + d_v - truncation)²`.
pub fn surface_loss(vol: &SdfVolume, v_surf: &[(Vector3<f64>, f64)]) -> f64 {
    let (sum, count) = surf_terms(vol, v_surf);
    if count == 0 {
        0.0
    } else {
        sum / count as f64
    }
}

fn surf_terms(vol: &SdfVolume, v_surf: &[(Vector3<f64>, f64)]) -> (f64, usize) {
    let trunc = vol.truncation();
    let parts = exec::map_chunks(v_surf.len(), exec::DEFAULT_CHUNK, |range| {
        let mut sum = 0.0;
        let mut count = 0usize;
        for i in range {
            let (p, d_v) = v_surf[i];
            if let Some((psi, _)) = vol.query(&p) {
                let r = psi + d_v - trunc;
                sum += r * r;
                count += 1;
            }
        }
        (sum, count)
    });
    parts
        .into_iter()
        .fold((0.0, 0), |(s, c), (ps, pc)| (s + ps, c + pc))
}

/// Combined refinement objective `alpha * L_occ + beta * L_surf`.
pub fn refine_loss(vol: &SdfVolume, samples: &SampleSets, alpha: f64, beta: f64, delta: f64) -> f64 {
    alpha * occlusion_loss(vol, &samples.v_occ, delta) + beta * surface_loss(vol, &samples.v_surf)
}

/// Analytic gradient of [`refine_loss`] with respect to every voxel value.
/// Trilinear weights distribute each sample's residual to its 8 corners.
pub fn refine_gradient(
    vol: &SdfVolume,
    samples: &SampleSets,
    alpha: f64,
    beta: f64,
    delta: f64,
) -> Vec<f64> {
    let mut grad = vec![0.0f64; vol.len()];
    let trunc = vol.truncation();
    let (_, n_occ) = occ_terms(vol, &samples.v_occ, delta);
    let (_, n_surf) = surf_terms(vol, &samples.v_surf);
    if alpha != 0.0 && n_occ > 0 {
        let scale = 2.0 * alpha / n_occ as f64;
        for p in &samples.v_occ {
            if let Some((idx, wgt)) = vol.trilinear_support(p) {
                let psi: f64 = (0..8).map(|c| wgt[c] * vol.values[idx[c]]).sum();
                let r = psi - delta;
                for c in 0..8 {
                    grad[idx[c]] += scale * r * wgt[c];
                }
            }
        }
    }
    if beta != 0.0 && n_surf > 0 {
        let scale = 2.0 * beta / n_surf as f64;
        for (p, d_v) in &samples.v_surf {
            if let Some((idx, wgt)) = vol.trilinear_support(p) {
                let psi: f64 = (0..8).map(|c| wgt[c] * vol.values[idx[c]]).sum();
                let r = psi + d_v - trunc;
                for c in 0..8 {
                    grad[idx[c]] += scale * r * wgt[c];
                }
            }
        }
    }
    grad
}

#[derive(Debug, Clone, Copy)]
pub struct RefineReport {
    pub initial_loss: f64,
    pub final_loss: f64,
    pub accepted_steps: usize,
}

/// Gradient descent on the voxel values with step halving: the loss over
/// accepted steps is non-increasing and values stay clamped to the
/// truncation band. Samples are pooled over keyframes by the caller and
/// subsampled to at most 2^20 per call.
pub fn refine_volume(
    vol: &SdfVolume,
    pooled: &SampleSets,
    alpha: f64,
    beta: f64,
    delta: f64,
    steps: usize,
) -> (SdfVolume, RefineReport) {
    let samples = pooled.subsampled(1 << 20);
    let mut current = vol.clone();
    let initial_loss = refine_loss(&current, &samples, alpha, beta, delta);
    let mut loss = initial_loss;
    let mut report = RefineReport {
        initial_loss,
        final_loss: initial_loss,
        accepted_steps: 0,
    };
    if steps == 0 || samples.is_empty() || (alpha == 0.0 && beta == 0.0) || loss == 0.0 {
        return (current, report);
    }

    let trunc = current.truncation;
    let grad0 = refine_gradient(&current, &samples, alpha, beta, delta);
    let gmax = grad0.iter().fold(0.0f64, |m, g| m.max(g.abs()));
    if gmax <= 0.0 {
        return (current, report);
    }
    let mut lr = 0.25 * trunc / gmax;

    for _ in 0..steps {
        let grad = refine_gradient(&current, &samples, alpha, beta, delta);
        let mut accepted = false;
        for _ in 0..30 {
            let mut candidate = current.clone();
            exec::for_each_slab_mut(&mut candidate.values, exec::DEFAULT_CHUNK, |slab, vals| {
                let base = slab * exec::DEFAULT_CHUNK;
                for (i, v) in vals.iter_mut().enumerate() {
                    *v = (*v - lr * grad[base + i]).clamp(-trunc, trunc);
                }
            });
            let new_loss = refine_loss(&candidate, &samples, alpha, beta, delta);
            if new_loss <= loss {
                current = candidate;
                loss = new_loss;
                lr *= 1.25;
                accepted = true;
                report.accepted_steps += 1;
                break;
            }
            lr *= 0.5;
        }
        if !accepted || loss == 0.0 {
            break;
        }
    }
    report.final_loss = loss;
    (current, report)
}

// ---------------------------------------------------------------------------
// Volume checkpoint: magic "SDFV", u32 dims[3], f32 voxel_size, f32 origin[3],
// f32 truncation, then f32 values and f32 weights row-major x-fastest,
// little-endian throughout.
// ---------------------------------------------------------------------------

const SDFV_MAGIC: &[u8; 4] = b"SDFV";

pub fn write_checkpoint(vol: &SdfVolume, mut w: impl std::io::Write) -> Result<(), SdfError> {
    w.write_all(SDFV_MAGIC)?;
    for d in vol.dims {
        w.write_all(&(d as u32).to_le_bytes())?;
    }
    w.write_all(&(vol.voxel_size as f32).to_le_bytes())?;
    for c in 0..3 {
        w.write_all(&(vol.origin[c] as f32).to_le_bytes())?;
    }
    w.write_all(&(vol.truncation as f32).to_le_bytes())?;
    let mut buf = Vec::with_capacity(vol.len() * 4);
    for v in &vol.values {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    for v in &vol.weights {
        buf.extend_from_slice(&(*v as f32).to_le_bytes());
    }
    w.write_all(&buf)?;
    Ok(())
}

pub fn read_checkpoint(mut r: impl std::io::Read) -> Result<SdfVolume, SdfError> {
    let mut magic = [0u8; 4];
    r.read_exact(&mut magic)
        .map_err(|_| SdfError::BadCheckpoint("truncated header".into()))?;
    if &magic != SDFV_MAGIC {
        return Err(SdfError::BadCheckpoint(format!(
            "bad magic {:?}, expected \"SDFV\"",
            magic
        )));
    }
    let mut u32buf = [0u8; 4];
    let mut read_u32 = |r: &mut dyn std::io::Read| -> Result<u32, SdfError> {
        r.read_exact(&mut u32buf)
            .map_err(|_| SdfError::BadCheckpoint("truncated header".into()))?;
        Ok(u32::from_le_bytes(u32buf))
    };
    let dims = [
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
        read_u32(&mut r)? as usize,
    ];
    let mut f32buf = [0u8; 4];
    let mut read_f32 = |r: &mut dyn std::io::Read| -> Result<f32, SdfError> {
        r.read_exact(&mut f32buf)
            .map_err(|_| SdfError::BadCheckpoint("truncated header".into()))?;
        Ok(f32::from_le_bytes(f32buf))
    };
    let voxel_size = read_f32(&mut r)? as f64;
    let origin = Vector3::new(
        read_f32(&mut r)? as f64,
        read_f32(&mut r)? as f64,
        read_f32(&mut r)? as f64,
    );
    let truncation = read_f32(&mut r)? as f64;
    let n = dims[0]
        .checked_mul(dims[1])
        .and_then(|v| v.checked_mul(dims[2]))
        .ok_or_else(|| SdfError::BadCheckpoint("dims overflow".into()))?;
    if n == 0 || n > (1 << 28) {
        return Err(SdfError::BadCheckpoint(format!("implausible dims {dims:?}")));
    }
    let mut vol = SdfVolume::new(origin, voxel_size, dims, truncation)
        .map_err(|e| SdfError::BadCheckpoint(e.to_string()))?;
    let mut body = vec![0u8; n * 8];
    r.read_exact(&mut body)
        .map_err(|_| SdfError::BadCheckpoint("truncated voxel data".into()))?;
    for i in 0..n {
        let v = f32::from_le_bytes(body[i * 4..i * 4 + 4].try_into().unwrap());
        vol.values[i] = (v as f64).clamp(-truncation, truncation);
    }
    for i in 0..n {
        let off = (n + i) * 4;
        let w = f32::from_le_bytes(body[off..off + 4].try_into().unwrap());
        vol.weights[i] = (w as f64).max(0.0);
    }
    Ok(vol)
}

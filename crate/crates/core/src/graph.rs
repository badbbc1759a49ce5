//! Posture graph construction and pose optimization.
//!
//! The graph joins the current frame with its selected reference keyframes.
//! Every ordered node pair carries feature correspondences; the robust
//! objective combines feature distances in the common frame, projective
//! point-to-plane consistency, and distance to the fused implicit surface.
//! A Levenberg-Marquardt loop over left-multiplicative twist updates
//! minimizes it for the current frame (or, optionally, the whole graph).

use std::collections::HashMap;
use std::sync::Arc;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3, Vector6};

use crate::coarse::{match_descriptors, CorrespondenceSet};
use crate::exec;
use crate::frame::FrameObservation;
use crate::geometry::{backproject, project, se3_exp, RigidTransform, Twist};
use crate::sdf::SdfVolume;

/// Huber penalty: quadratic inside `delta`, linear outside, C¹ everywhere.
pub fn huber(r: f64, delta: f64) -> f64 {
    debug_assert!(delta > 0.0);
    let a = r.abs();
    if a <= delta {
        0.5 * r * r
    } else {
        delta * (a - 0.5 * delta)
    }
}

/// IRLS weight `ρ'(|r|)/|r|`, continuous and equal to 1 inside the knee.
pub fn huber_weight(r: f64, delta: f64) -> f64 {
    let a = r.abs();
    if a <= delta {
        1.0
    } else {
        delta / a
    }
}

/// Term weights and robust scales.
#[derive(Debug, Clone, Copy)]
pub struct ObjectiveWeights {
    pub w_f: f64,
    pub w_p: f64,
    pub w_s: f64,
    /// Huber scale for the 3D feature and SDF terms (meters).
    pub huber_3d: f64,
    /// Huber scale for the projective point-to-plane term (meters).
    pub huber_2d: f64,
}

impl Default for ObjectiveWeights {
    fn default() -> Self {
        ObjectiveWeights {
            w_f: 1.0,
            w_p: 1.0,
            w_s: 1.0,
            huber_3d: 0.005,
            huber_2d: 0.01,
        }
    }
}

/// Access to a signed distance field during optimization. The test suite
/// substitutes transformed adapters to check gauge invariance.
pub trait SdfQuery: Sync {
    fn query_sdf(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)>;
}

impl SdfQuery for SdfVolume {
    fn query_sdf(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        self.query(p)
    }
}

/// An SDF viewed through a rigid change of the object frame.
pub struct TransformedSdf<'a, S: SdfQuery> {
    pub inner: &'a S,
    /// Maps query points into the inner SDF's frame.
    pub world_to_inner: RigidTransform,
}

impl<S: SdfQuery> SdfQuery for TransformedSdf<'_, S> {
    fn query_sdf(&self, p: &Vector3<f64>) -> Option<(f64, Vector3<f64>)> {
        let (value, grad) = self.inner.query_sdf(&self.world_to_inner.transform_point(p))?;
        Some((value, self.world_to_inner.inverse().transform_vector(&grad)))
    }
}

#[derive(Debug, Clone)]
pub struct GraphNode {
    pub obs: Arc<FrameObservation>,
    /// Initial pose, camera frame -> object frame.
    pub pose: RigidTransform,
}

/// Directed edge `(i, j)` carrying correspondences from node i's cloud to
/// node j's cloud (both in their own camera frames). An empty set
/// contributes zero loss.
#[derive(Debug, Clone)]
pub struct GraphEdge {
    pub i: usize,
    pub j: usize,
    pub corr: CorrespondenceSet,
}

#[derive(Debug, Clone)]
pub struct PostureGraph {
    /// Node 0 is the current frame; the rest are references.
    pub nodes: Vec<GraphNode>,
    pub edges: Vec<GraphEdge>,
    /// Whether the SDF term participates (the object field has converged).
    pub sdf_gate: bool,
}

/// Memo for pairwise keyframe correspondences across graph rebuilds, keyed
/// by frame indices.
#[derive(Debug, Default)]
pub struct CorrespondenceCache {
    map: HashMap<(usize, usize), CorrespondenceSet>,
}

impl CorrespondenceCache {
    pub fn clear(&mut self) {
        self.map.clear();
    }
}

/// Complete digraph over the current frame and references: K+1 nodes and
/// (K+1)K ordered edges. Mutual matching is symmetric, so each unordered
/// pair is matched once and mirrored.
pub fn build_graph(
    current: &Arc<FrameObservation>,
    current_pose: &RigidTransform,
    refs: &[crate::memory::Keyframe],
    sdf_gate: bool,
    cache: &mut CorrespondenceCache,
) -> PostureGraph {
    let mut nodes = vec![GraphNode {
        obs: Arc::clone(current),
        pose: *current_pose,
    }];
    for kf in refs {
        nodes.push(GraphNode {
            obs: Arc::clone(&kf.obs),
            pose: kf.pose,
        });
    }
    if cache.map.len() > 4096 {
        cache.map.clear();
    }
    let mut edges = Vec::with_capacity(nodes.len() * nodes.len());
    for a in 0..nodes.len() {
        for b in a + 1..nodes.len() {
            let key = (nodes[a].obs.index, nodes[b].obs.index);
            let corr = if let Some(hit) = cache.map.get(&key) {
                hit.clone()
            } else {
                let corr = match_descriptors(
                    nodes[a].obs.descriptors(),
                    nodes[b].obs.descriptors(),
                )
                .unwrap_or_default();
                cache.map.insert(key, corr.clone());
                corr
            };
            let mirrored = CorrespondenceSet {
                pairs: corr.pairs.iter().map(|(p, q)| (*q, *p)).collect(),
                scores: corr.scores.clone(),
            };
            edges.push(GraphEdge { i: a, j: b, corr });
            edges.push(GraphEdge {
                i: b,
                j: a,
                corr: mirrored,
            });
        }
    }
    PostureGraph {
        nodes,
        edges,
        sdf_gate,
    }
}

// ---------------------------------------------------------------------------
// Loss terms. Gradients are with respect to left-multiplicative twists
// ordered [ω; v] per node.
// ---------------------------------------------------------------------------

fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Point Jacobian of `exp(δ)·y` at δ = 0: `[-[y]x | I]` over `[ω; v]`.
fn point_jacobian(y: &Vector3<f64>) -> nalgebra::Matrix3x6<f64> {
    let mut j = nalgebra::Matrix3x6::zeros();
    j.fixed_view_mut::<3, 3>(0, 0).copy_from(&(-skew(y)));
    j.fixed_view_mut::<3, 3>(0, 3)
        .copy_from(&Matrix3::identity());
    j
}

/// Robust feature-distance loss over all edges, with its gradient per node.
pub fn loss_3d(
    graph: &PostureGraph,
    poses: &[RigidTransform],
    weights: &ObjectiveWeights,
) -> (f64, Vec<Vector6<f64>>) {
    let per_edge: Vec<(f64, Vec<(usize, Vector6<f64>)>)> =
        exec::map_chunks(graph.edges.len(), 1, |range| {
            let mut loss = 0.0;
            let mut grads: Vec<(usize, Vector6<f64>)> = Vec::new();
            for e in range {
                let edge = &graph.edges[e];
                let (ti, tj) = (&poses[edge.i], &poses[edge.j]);
                let mut gi = Vector6::zeros();
                let mut gj = Vector6::zeros();
                for (p_m, p_n) in &edge.corr.pairs {
                    let a = ti.transform_point(p_m);
                    let b = tj.transform_point(p_n);
                    let e_vec = a - b;
                    let r = e_vec.norm();
                    loss += huber(r, weights.huber_3d);
                    if r > 1e-12 {
                        let scale = huber_weight(r, weights.huber_3d);
                        let dir = e_vec * scale;
                        gi += point_jacobian(&a).transpose() * dir;
                        gj -= point_jacobian(&b).transpose() * dir;
                    }
                }
                grads.push((edge.i, gi));
                grads.push((edge.j, gj));
            }
            (loss, grads)
        });
    let mut total = 0.0;
    let mut grads = vec![Vector6::zeros(); graph.nodes.len()];
    for (loss, parts) in per_edge {
        total += loss;
        for (node, g) in parts {
            grads[node] += g;
        }
    }
    (total, grads)
}

/// One projective point-to-plane association: a point and normal from node
/// i's camera frame, the depth surface sample from node j mapped into the
/// object frame, frozen for differentiation.
#[derive(Debug, Clone)]
pub struct Assoc2d {
    pub node_i: usize,
    pub node_j: usize,
    pub point: Vector3<f64>,
    pub normal: Vector3<f64>,
    /// `T_j · q_j` at association time (object frame).
    pub surface_obj: Vector3<f64>,
}

/// Association gate: reject pairs farther apart than this (meters) to keep
/// projective lookups from binding distant surfaces.
const ASSOC_GATE: f64 = 0.03;
/// Point budget per directed edge.
const POINTS_PER_EDGE: usize = 512;

/// Projective data association for every directed edge at the given poses.
pub fn associate_2d(graph: &PostureGraph, poses: &[RigidTransform]) -> Vec<Assoc2d> {
    let per_edge: Vec<Vec<Assoc2d>> = exec::map_chunks(graph.edges.len(), 1, |range| {
        let mut out = Vec::new();
        for e in range {
            let edge = &graph.edges[e];
            let (i, j) = (edge.i, edge.j);
            let obs_i = &graph.nodes[i].obs;
            let obs_j = &graph.nodes[j].obs;
            let t_ij = poses[j].inverse().compose(&poses[i]);
            let cloud = &obs_i.cloud;
            let stride = cloud.len().div_ceil(POINTS_PER_EDGE).max(1);
            for pi in (0..cloud.len()).step_by(stride) {
                let Some(n) = cloud.normal(pi) else { continue };
                let p = cloud.points[pi];
                let x_j = t_ij.transform_point(&p);
                if x_j.z <= 1e-6 {
                    continue;
                }
                let Ok(px) = project(&obs_j.intrinsics, &x_j) else {
                    continue;
                };
                let Some(d) = obs_j.masked_depth_lookup(px[0], px[1]) else {
                    continue;
                };
                let Ok(q_j) = backproject(&obs_j.intrinsics, px, d) else {
                    continue;
                };
                let q_i = t_ij.inverse().transform_point(&q_j);
                if (q_i - p).norm() > ASSOC_GATE {
                    continue;
                }
                out.push(Assoc2d {
                    node_i: i,
                    node_j: j,
                    point: p,
                    normal: n,
                    surface_obj: poses[j].transform_point(&q_j),
                });
            }
        }
        out
    });
    per_edge.into_iter().flatten().collect()
}

/// Point-to-plane loss over fixed associations, with gradients. The pixel
/// lookup is frozen inside each association (projective linearization).
pub fn loss_2d_fixed(
    graph: &PostureGraph,
    assocs: &[Assoc2d],
    poses: &[RigidTransform],
    weights: &ObjectiveWeights,
) -> (f64, Vec<Vector6<f64>>) {
    let parts: Vec<(f64, Vec<(usize, Vector6<f64>)>)> =
        exec::map_chunks(assocs.len(), 512, |range| {
            let mut loss = 0.0;
            let mut grads: Vec<(usize, Vector6<f64>)> = Vec::new();
            for ai in range {
                let a = &assocs[ai];
                let ti = &poses[a.node_i];
                let ri = ti.rotation();
                // Surface sample back in node i's camera frame.
                let q_i = ti.inverse().transform_point(&a.surface_obj);
                let r = a.normal.dot(&(q_i - a.point));
                loss += huber(r, weights.huber_2d);
                let w = huber_weight(r, weights.huber_2d) * r;
                if w.abs() > 0.0 {
                    // d q_i / dδ_j = Rᵢᵀ [-[y]x | I], and dδ_i is its negative.
                    let j_row = (ri.transpose() * point_jacobian(&a.surface_obj))
                        .transpose()
                        * a.normal;
                    grads.push((a.node_j, j_row * w));
                    grads.push((a.node_i, -j_row * w));
                }
            }
            (loss, grads)
        });
    let mut total = 0.0;
    let mut grads = vec![Vector6::zeros(); graph.nodes.len()];
    for (loss, part) in parts {
        total += loss;
        for (node, g) in part {
            grads[node] += g;
        }
    }
    (total, grads)
}

/// Projective point-to-plane loss with fresh associations at these poses.
pub fn loss_2d(
    graph: &PostureGraph,
    poses: &[RigidTransform],
    weights: &ObjectiveWeights,
) -> (f64, Vec<Vector6<f64>>) {
    let assocs = associate_2d(graph, poses);
    loss_2d_fixed(graph, &assocs, poses, weights)
}

/// Pixel budget for the SDF term.
const SDF_PIXELS: usize = 2048;

/// Distance of the current frame's depth to the implicit surface, with the
/// gradient for the current pose. Unobserved queries are skipped.
pub fn loss_sdf<S: SdfQuery>(
    node: &GraphNode,
    pose: &RigidTransform,
    sdf: &S,
    weights: &ObjectiveWeights,
) -> (f64, Vector6<f64>) {
    let obs = &node.obs;
    let (w, h) = (obs.width(), obs.height());
    let mut pixels: Vec<usize> = Vec::new();
    for pix in 0..w * h {
        if obs.mask[pix] && obs.depth[pix] > 0.0 {
            pixels.push(pix);
        }
    }
    let stride = pixels.len().div_ceil(SDF_PIXELS).max(1);
    let chosen: Vec<usize> = pixels.into_iter().step_by(stride).collect();

    let parts: Vec<(f64, Vector6<f64>)> = exec::map_chunks(chosen.len(), 512, |range| {
        let mut loss = 0.0;
        let mut grad = Vector6::zeros();
        for ci in range {
            let pix = chosen[ci];
            let (u, v) = (pix % w, pix / w);
            let p_cam = backproject(
                &obs.intrinsics,
                [u as f64 + 0.5, v as f64 + 0.5],
                obs.depth[pix],
            )
            .unwrap();
            let p_obj = pose.transform_point(&p_cam);
            let Some((value, sdf_grad)) = sdf.query_sdf(&p_obj) else {
                continue;
            };
            loss += huber(value, weights.huber_3d);
            let w_r = huber_weight(value, weights.huber_3d) * value;
            if w_r.abs() > 0.0 {
                grad += point_jacobian(&p_obj).transpose() * (sdf_grad * w_r);
            }
        }
        (loss, grad)
    });
    let mut total = 0.0;
    let mut grad = Vector6::zeros();
    for (l, g) in parts {
        total += l;
        grad += g;
    }
    (total, grad)
}

// ---------------------------------------------------------------------------
// Optimization
// ---------------------------------------------------------------------------

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeMode {
    /// Only the current frame's pose moves; references anchor the gauge.
    CurrentOnly,
    /// All poses move except the oldest reference (gauge).
    Full,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct LossBreakdown {
    pub l3d: f64,
    pub l2d: f64,
    pub lsdf: f64,
}

impl LossBreakdown {
    pub fn total(&self, w: &ObjectiveWeights) -> f64 {
        w.w_f * self.l3d + w.w_p * self.l2d + w.w_s * self.lsdf
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptimizeStatus {
    Converged,
    MaxIterations,
    /// Non-finite loss at initialization; the initial poses are returned.
    Failed,
}

#[derive(Debug, Clone)]
pub struct OptimizeOutcome {
    pub poses: Vec<RigidTransform>,
    pub initial: LossBreakdown,
    pub final_: LossBreakdown,
    pub iterations: usize,
    pub status: OptimizeStatus,
}

struct Residual {
    /// Row indices into the stacked state for (node, 6) blocks; usize::MAX
    /// marks a fixed node.
    slot_a: usize,
    slot_b: usize,
    jac_a: Vector6<f64>,
    jac_b: Vector6<f64>,
    value: f64,
    weight: f64,
}

fn breakdown<S: SdfQuery>(
    graph: &PostureGraph,
    poses: &[RigidTransform],
    assocs: &[Assoc2d],
    sdf: Option<&S>,
    weights: &ObjectiveWeights,
) -> LossBreakdown {
    let l3d = if weights.w_f > 0.0 {
        loss_3d(graph, poses, weights).0
    } else {
        0.0
    };
    let l2d = if weights.w_p > 0.0 {
        loss_2d_fixed(graph, assocs, poses, weights).0
    } else {
        0.0
    };
    let lsdf = match sdf {
        Some(s) if graph.sdf_gate && weights.w_s > 0.0 => {
            loss_sdf(&graph.nodes[0], &poses[0], s, weights).0
        }
        _ => 0.0,
    };
    LossBreakdown { l3d, l2d, lsdf }
}

/// Levenberg-Marquardt over twist increments with `ξ <- exp(δ)·ξ` updates.
/// Projective associations refresh after every accepted step; acceptance is
/// always judged under one association snapshot, so the objective never
/// increases across accepted steps. If re-association leaves the final
/// objective above the initial one, the initial poses win.
pub fn optimize<S: SdfQuery>(
    graph: &PostureGraph,
    sdf: Option<&S>,
    weights: &ObjectiveWeights,
    mode: OptimizeMode,
) -> OptimizeOutcome {
    let n = graph.nodes.len();
    let mut poses: Vec<RigidTransform> = graph.nodes.iter().map(|nd| nd.pose).collect();

    // Free-node slots.
    let gauge = match mode {
        OptimizeMode::CurrentOnly => None,
        OptimizeMode::Full => {
            // Oldest reference is the gauge; a reference-free graph anchors
            // nothing beyond the current frame itself.
            graph
                .nodes
                .iter()
                .enumerate()
                .skip(1)
                .min_by_key(|(_, nd)| nd.obs.index)
                .map(|(i, _)| i)
        }
    };
    let free: Vec<usize> = match mode {
        OptimizeMode::CurrentOnly => vec![0],
        OptimizeMode::Full => (0..n).filter(|i| Some(*i) != gauge).collect(),
    };
    let slot_of = |node: usize| -> usize {
        free.iter().position(|f| *f == node).unwrap_or(usize::MAX)
    };

    let use_sdf = graph.sdf_gate && weights.w_s > 0.0 && sdf.is_some();
    let mut assocs = if weights.w_p > 0.0 {
        associate_2d(graph, &poses)
    } else {
        Vec::new()
    };
    let initial = breakdown(graph, &poses, &assocs, sdf, weights);
    let initial_total = initial.total(weights);
    if !initial_total.is_finite() {
        return OptimizeOutcome {
            poses: graph.nodes.iter().map(|nd| nd.pose).collect(),
            initial,
            final_: initial,
            iterations: 0,
            status: OptimizeStatus::Failed,
        };
    }
    let dim = free.len() * 6;
    if dim == 0 || initial_total == 0.0 {
        return OptimizeOutcome {
            poses,
            initial,
            final_: initial,
            iterations: 0,
            status: OptimizeStatus::Converged,
        };
    }

    let mut loss = initial_total;
    let mut lambda = 1e-4;
    let mut status = OptimizeStatus::MaxIterations;
    let mut iterations = 0;

    for _iter in 0..50 {
        iterations += 1;
        // Gather weighted residual rows.
        let mut rows: Vec<Residual> = Vec::new();
        if weights.w_f > 0.0 {
            for edge in &graph.edges {
                let (ti, tj) = (&poses[edge.i], &poses[edge.j]);
                let (sa, sb) = (slot_of(edge.i), slot_of(edge.j));
                for (p_m, p_n) in &edge.corr.pairs {
                    let a = ti.transform_point(p_m);
                    let b = tj.transform_point(p_n);
                    let e_vec = a - b;
                    let r = e_vec.norm();
                    if r <= 1e-12 {
                        continue;
                    }
                    let dir = e_vec / r;
                    let ja = point_jacobian(&a).transpose() * dir;
                    let jb = -(point_jacobian(&b).transpose() * dir);
                    rows.push(Residual {
                        slot_a: sa,
                        slot_b: sb,
                        jac_a: ja,
                        jac_b: jb,
                        value: r,
                        weight: weights.w_f * huber_weight(r, weights.huber_3d),
                    });
                }
            }
        }
        if weights.w_p > 0.0 {
            for a in &assocs {
                let ti = &poses[a.node_i];
                let q_i = ti.inverse().transform_point(&a.surface_obj);
                let r = a.normal.dot(&(q_i - a.point));
                let j_row = (ti.rotation().transpose() * point_jacobian(&a.surface_obj))
                    .transpose()
                    * a.normal;
                rows.push(Residual {
                    slot_a: slot_of(a.node_j),
                    slot_b: slot_of(a.node_i),
                    jac_a: j_row,
                    jac_b: -j_row,
                    value: r,
                    weight: weights.w_p * huber_weight(r, weights.huber_2d),
                });
            }
        }
        if use_sdf {
            let obs = &graph.nodes[0].obs;
            let (w, h) = (obs.width(), obs.height());
            let sdf = sdf.unwrap();
            let mut count = 0usize;
            for pix in 0..w * h {
                if !(obs.mask[pix] && obs.depth[pix] > 0.0) {
                    continue;
                }
                count += 1;
                if count % ((obs.valid_masked / SDF_PIXELS).max(1)) != 0 {
                    continue;
                }
                let (u, v) = (pix % w, pix / w);
                let p_cam = backproject(
                    &obs.intrinsics,
                    [u as f64 + 0.5, v as f64 + 0.5],
                    obs.depth[pix],
                )
                .unwrap();
                let p_obj = poses[0].transform_point(&p_cam);
                let Some((value, sdf_grad)) = sdf.query_sdf(&p_obj) else {
                    continue;
                };
                rows.push(Residual {
                    slot_a: slot_of(0),
                    slot_b: usize::MAX,
                    jac_a: point_jacobian(&p_obj).transpose() * sdf_grad,
                    jac_b: Vector6::zeros(),
                    value,
                    weight: weights.w_s * huber_weight(value, weights.huber_3d),
                });
            }
        }

        // Normal equations.
        let mut h_mat = DMatrix::<f64>::zeros(dim, dim);
        let mut g_vec = DVector::<f64>::zeros(dim);
        for row in &rows {
            let blocks = [(row.slot_a, &row.jac_a), (row.slot_b, &row.jac_b)];
            for (sa, ja) in blocks {
                if sa == usize::MAX {
                    continue;
                }
                for (sb, jb) in blocks {
                    if sb == usize::MAX {
                        continue;
                    }
                    for r in 0..6 {
                        for c in 0..6 {
                            h_mat[(sa * 6 + r, sb * 6 + c)] += row.weight * ja[r] * jb[c];
                        }
                    }
                }
                for r in 0..6 {
                    g_vec[sa * 6 + r] += row.weight * ja[r] * row.value;
                }
            }
        }
        if g_vec.amax() < 1e-14 {
            status = OptimizeStatus::Converged;
            break;
        }

        // Damped solve with step-acceptance on the same association snapshot.
        let mut accepted = false;
        for _attempt in 0..12 {
            let mut damped = h_mat.clone();
            for d in 0..dim {
                damped[(d, d)] += lambda * h_mat[(d, d)].max(1e-12);
            }
            let Some(chol) = damped.cholesky() else {
                lambda = (lambda * 10.0).min(1e12);
                continue;
            };
            let delta = chol.solve(&(-&g_vec));
            let mut candidate = poses.clone();
            for (slot, &node) in free.iter().enumerate() {
                let xi = Twist::new(
                    Vector3::new(delta[slot * 6], delta[slot * 6 + 1], delta[slot * 6 + 2]),
                    Vector3::new(
                        delta[slot * 6 + 3],
                        delta[slot * 6 + 4],
                        delta[slot * 6 + 5],
                    ),
                );
                candidate[node] = se3_exp(&xi).compose(&poses[node]);
            }
            let cand_loss = breakdown(graph, &candidate, &assocs, sdf, weights).total(weights);
            if cand_loss.is_finite() && cand_loss <= loss {
                poses = candidate;
                let rel = (loss - cand_loss) / loss.max(1e-300);
                loss = cand_loss;
                lambda = (lambda / 3.0).max(1e-9);
                accepted = true;
                if delta.norm() < 1e-8 || rel < 1e-9 {
                    status = OptimizeStatus::Converged;
                }
                break;
            }
            lambda = (lambda * 10.0).min(1e12);
        }
        if !accepted {
            status = OptimizeStatus::Converged;
            break;
        }
        if status == OptimizeStatus::Converged {
            break;
        }
        // Refresh projective associations for the next linearization.
        if weights.w_p > 0.0 {
            assocs = associate_2d(graph, &poses);
            loss = breakdown(graph, &poses, &assocs, sdf, weights).total(weights);
        }
    }

    // Fresh-association totals decide whether optimization actually helped.
    let final_assocs = if weights.w_p > 0.0 {
        associate_2d(graph, &poses)
    } else {
        Vec::new()
    };
    let final_bd = breakdown(graph, &poses, &final_assocs, sdf, weights);
    if final_bd.total(weights) > initial_total {
        return OptimizeOutcome {
            poses: graph.nodes.iter().map(|nd| nd.pose).collect(),
            initial,
            final_: initial,
            iterations,
            status,
        };
    }
    OptimizeOutcome {
        poses,
        initial,
        final_: final_bd,
        iterations,
        status,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{ObservationParams, RgbdFrame};
    use crate::geometry::{CameraIntrinsics, PointCloud};
    use crate::memory::Keyframe;
    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn huber_closed_form_values() {
        assert_relative_eq!(huber(0.0, 0.01), 0.0);
        assert_relative_eq!(huber(0.01, 0.01), 5e-5, epsilon = 1e-18);
        assert_relative_eq!(huber(0.03, 0.01), 2.5e-4, epsilon = 1e-18);
        assert_relative_eq!(huber(-0.03, 0.01), 2.5e-4, epsilon = 1e-18);
    }

    #[test]
    fn huber_is_c1_at_the_knee() {
        let delta = 0.01;
        let h = 1e-9;
        let left = (huber(delta, delta) - huber(delta - h, delta)) / h;
        let right = (huber(delta + h, delta) - huber(delta, delta)) / h;
        assert!((left - right).abs() < 1e-6);
        // Monotone in |r| and even.
        let mut prev = 0.0;
        for i in 0..100 {
            let r = i as f64 * 0.001;
            let v = huber(r, delta);
            assert!(v >= prev);
            assert_relative_eq!(huber(-r, delta), v);
            prev = v;
        }
    }

    /// Rendered observation of a checkered sphere-ish scene from a given pose.
    fn rendered_node(pose_cam_to_world: &RigidTransform, index: usize) -> Arc<FrameObservation> {
        use crate::synth::{render_sequence, DepthNoise, SceneSpec, Shape, Texture};
        let q = pose_cam_to_world.to_quaternion();
        let t = pose_cam_to_world.translation();
        let spec = SceneSpec {
            name: "graph_test".into(),
            shape: Shape::Union(vec![
                Shape::Box {
                    center: [0.0; 3],
                    half_extents: [0.04, 0.03, 0.05],
                },
                Shape::Sphere {
                    center: [0.03, 0.02, 0.04],
                    radius: 0.025,
                },
            ]),
            trajectory: vec![(q, [t.x, t.y, t.z])],
            noise: DepthNoise::default(),
            occluders: vec![],
            texture: Texture::Checker,
            seed: 7,
        };
        let k = CameraIntrinsics::new(200.0, 200.0, 120.0, 90.0, 240, 180).unwrap();
        let seq = render_sequence(&spec, &k).unwrap();
        let mut frame = seq.frames.into_iter().next().unwrap();
        frame.index = index;
        Arc::new(FrameObservation::from_frame(
            &frame,
            &ObservationParams::default(),
        ))
    }

    fn orbit_pose(deg: f64) -> RigidTransform {
        let eye = nalgebra::Vector3::new(
            0.35 * deg.to_radians().sin(),
            0.05,
            0.35 * deg.to_radians().cos(),
        );
        crate::synth::look_at(eye, nalgebra::Vector3::zeros())
    }

    fn test_graph(n_refs: usize) -> PostureGraph {
        let mut cache = CorrespondenceCache::default();
        let current_pose = orbit_pose(0.0);
        let current = rendered_node(&current_pose, 100);
        let refs: Vec<Keyframe> = (0..n_refs)
            .map(|r| {
                let pose = orbit_pose(12.0 * (r + 1) as f64);
                Keyframe {
                    id: r,
                    pose,
                    obs: rendered_node(&pose, r),
                    inlier_ratio: 1.0,
                }
            })
            .collect();
        build_graph(&current, &current_pose, &refs, false, &mut cache)
    }

    #[test]
    fn graph_shape_is_complete_digraph() {
        let g = test_graph(0);
        assert_eq!(g.nodes.len(), 1);
        assert_eq!(g.edges.len(), 0);
        let g = test_graph(5);
        assert_eq!(g.nodes.len(), 6);
        assert_eq!(g.edges.len(), 30);
    }

    #[test]
    fn losses_vanish_on_consistent_geometry() {
        let g = test_graph(2);
        let poses: Vec<RigidTransform> = g.nodes.iter().map(|n| n.pose).collect();
        let w = ObjectiveWeights::default();

        // Feature term at ground truth: residuals are bounded by render
        // quantization, far below the Huber knee.
        let (l3d, _) = loss_3d(&g, &poses, &w);
        let pair_count: usize = g.edges.iter().map(|e| e.corr.len()).sum();
        assert!(pair_count > 100, "graph edges found {pair_count} pairs");
        assert!(
            l3d / pair_count as f64 < huber(0.004, w.huber_3d),
            "mean 3d residual too large"
        );

        let (l2d, _) = loss_2d(&g, &poses, &w);
        assert!(l2d.is_finite());
    }

    #[test]
    fn loss_3d_matches_naive_sum_and_zero_case() {
        let g = test_graph(1);
        let poses: Vec<RigidTransform> = g.nodes.iter().map(|n| n.pose).collect();
        let w = ObjectiveWeights::default();
        let (l, _) = loss_3d(&g, &poses, &w);
        let mut naive = 0.0;
        for e in &g.edges {
            for (p, q) in &e.corr.pairs {
                let r = (poses[e.i].transform_point(p) - poses[e.j].transform_point(q)).norm();
                naive += huber(r, w.huber_3d);
            }
        }
        assert!((l - naive).abs() <= 1e-12 * naive.max(1.0));

        // Identity poses with equal points: exactly zero.
        let mut g2 = g.clone();
        for e in g2.edges.iter_mut() {
            e.corr.pairs = e.corr.pairs.iter().map(|(p, _)| (*p, *p)).collect();
        }
        let ident: Vec<RigidTransform> =
            g2.nodes.iter().map(|_| RigidTransform::identity()).collect();
        let (z, _) = loss_3d(&g2, &ident, &w);
        assert_eq!(z, 0.0);
    }

    #[test]
    fn quadratic_branch_equals_half_sse() {
        let g = test_graph(1);
        let poses: Vec<RigidTransform> = g.nodes.iter().map(|n| n.pose).collect();
        // Large delta puts every residual in the quadratic branch.
        let w = ObjectiveWeights {
            huber_3d: 10.0,
            ..Default::default()
        };
        let (l, _) = loss_3d(&g, &poses, &w);
        let mut sse = 0.0;
        for e in &g.edges {
            for (p, q) in &e.corr.pairs {
                sse += (poses[e.i].transform_point(p) - poses[e.j].transform_point(q))
                    .norm_squared();
            }
        }
        assert!((l - 0.5 * sse).abs() <= 1e-12 * sse.max(1.0));
    }

    fn fd_check_gradient<F>(
        poses: &[RigidTransform],
        free_node: usize,
        eval: F,
        analytic: &Vector6<f64>,
        tol_rel: f64,
    ) where
        F: Fn(&[RigidTransform]) -> f64,
    {
        let h = 1e-7;
        for dim in 0..6 {
            let mut xi = [0.0f64; 6];
            xi[dim] = h;
            let twist = Twist::new(
                Vector3::new(xi[0], xi[1], xi[2]),
                Vector3::new(xi[3], xi[4], xi[5]),
            );
            let mut plus = poses.to_vec();
            plus[free_node] = se3_exp(&twist).compose(&poses[free_node]);
            let twist_m = Twist::new(
                -Vector3::new(xi[0], xi[1], xi[2]),
                -Vector3::new(xi[3], xi[4], xi[5]),
            );
            let mut minus = poses.to_vec();
            minus[free_node] = se3_exp(&twist_m).compose(&poses[free_node]);
            let fd = (eval(&plus) - eval(&minus)) / (2.0 * h);
            let denom = analytic[dim].abs().max(1e-6);
            assert!(
                ((analytic[dim] - fd) / denom).abs() < tol_rel,
                "node {free_node} dim {dim}: analytic {} vs fd {fd}",
                analytic[dim]
            );
        }
    }

    #[test]
    fn loss_3d_gradient_matches_finite_differences() {
        let g = test_graph(2);
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let mut poses: Vec<RigidTransform> = g.nodes.iter().map(|n| n.pose).collect();
        // Perturb so residuals are nonzero across both Huber branches.
        for p in poses.iter_mut() {
            let xi = Twist::new(
                Vector3::new(
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                ),
                Vector3::new(
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                ),
            );
            *p = se3_exp(&xi).compose(p);
        }
        let w = ObjectiveWeights::default();
        let (_, grads) = loss_3d(&g, &poses, &w);
        for node in 0..g.nodes.len() {
            fd_check_gradient(
                &poses,
                node,
                |ps| loss_3d(&g, ps, &w).0,
                &grads[node],
                1e-5,
            );
        }
    }

    #[test]
    fn loss_2d_gradient_matches_finite_differences_with_fixed_lookups() {
        let g = test_graph(2);
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut poses: Vec<RigidTransform> = g.nodes.iter().map(|n| n.pose).collect();
        for p in poses.iter_mut() {
            let xi = Twist::new(
                Vector3::new(
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                ),
                Vector3::new(
                    rng.gen_range(-0.005..0.005),
                    rng.gen_range(-0.005..0.005),
                    rng.gen_range(-0.005..0.005),
                ),
            );
            *p = se3_exp(&xi).compose(p);
        }
        let w = ObjectiveWeights::default();
        let assocs = associate_2d(&g, &poses);
        assert!(assocs.len() > 200, "need associations, got {}", assocs.len());
        let (_, grads) = loss_2d_fixed(&g, &assocs, &poses, &w);
        for node in 0..g.nodes.len() {
            fd_check_gradient(
                &poses,
                node,
                |ps| loss_2d_fixed(&g, &assocs, ps, &w).0,
                &grads[node],
                1e-4,
            );
        }
    }

    #[test]
    fn plane_offset_gives_plane_distance_residual() {
        // Two identical nodes; shifting node j's pose 1 mm along the plane
        // normal gives 1 mm point-to-plane residuals before robustification.
        let (w_img, h_img) = (64, 48);
        let k = CameraIntrinsics::new(80.0, 80.0, 32.0, 24.0, w_img, h_img).unwrap();
        let mut mask = vec![false; w_img * h_img];
        let mut depth = vec![0.0; w_img * h_img];
        for v in 4..h_img - 4 {
            for u in 4..w_img - 4 {
                mask[v * w_img + u] = true;
                depth[v * w_img + u] = 0.5;
            }
        }
        let frame =
            RgbdFrame::new(0, 0.0, vec![[80; 3]; w_img * h_img], depth, mask, k).unwrap();
        let obs = Arc::new(FrameObservation::from_frame(
            &frame,
            &ObservationParams::default(),
        ));
        let nodes = vec![
            GraphNode {
                obs: Arc::clone(&obs),
                pose: RigidTransform::identity(),
            },
            GraphNode {
                obs: Arc::clone(&obs),
                // Shift the *node* 1 mm along the camera z (plane normal).
                pose: RigidTransform::new(
                    nalgebra::Matrix3::identity(),
                    Vector3::new(0.0, 0.0, 0.001),
                ),
            },
        ];
        let graph = PostureGraph {
            nodes,
            edges: vec![GraphEdge {
                i: 0,
                j: 1,
                corr: CorrespondenceSet::default(),
            }],
            sdf_gate: false,
        };
        let poses: Vec<RigidTransform> = graph.nodes.iter().map(|n| n.pose).collect();
        let assocs = associate_2d(&graph, &poses);
        assert!(!assocs.is_empty());
        for a in &assocs {
            let ti = &poses[a.node_i];
            let q_i = ti.inverse().transform_point(&a.surface_obj);
            let r = a.normal.dot(&(q_i - a.point)).abs();
            assert!(
                (r - 0.001).abs() < 2e-4,
                "expected ~1 mm residual, got {r}"
            );
        }
    }

    #[test]
    fn zero_weights_return_pose_unchanged() {
        let g = test_graph(2);
        let w = ObjectiveWeights {
            w_f: 0.0,
            w_p: 0.0,
            w_s: 0.0,
            ..Default::default()
        };
        let out = optimize::<SdfVolume>(&g, None, &w, OptimizeMode::CurrentOnly);
        assert_eq!(out.status, OptimizeStatus::Converged);
        assert_eq!(out.poses[0].rotation(), g.nodes[0].pose.rotation());
        assert_eq!(out.poses[0].translation(), g.nodes[0].pose.translation());
    }

    #[test]
    fn stationary_at_ground_truth() {
        let g = test_graph(3);
        let w = ObjectiveWeights::default();
        let out = optimize::<SdfVolume>(&g, None, &w, OptimizeMode::CurrentOnly);
        assert!(out.iterations <= 2, "took {} iterations", out.iterations);
        let gt = g.nodes[0].pose;
        assert!(out.poses[0].rotation_angle_to(&gt) < 1e-6);
        assert!((out.poses[0].translation() - gt.translation()).norm() < 1e-6);
        assert!(out.final_.total(&w) <= out.initial.total(&w));
    }

    #[test]
    fn recovers_from_perturbation() {
        let g = test_graph(3);
        let w = ObjectiveWeights::default();
        let gt = g.nodes[0].pose;
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let mut ok = 0;
        let trials = 10;
        for _ in 0..trials {
            let axis: Vector3<f64> = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize();
            let dt: Vector3<f64> = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            )
            .normalize()
                * 0.01;
            let xi = Twist::new(axis * 5.0_f64.to_radians(), dt);
            let mut g2 = g.clone();
            g2.nodes[0].pose = se3_exp(&xi).compose(&gt);
            let out = optimize::<SdfVolume>(&g2, None, &w, OptimizeMode::CurrentOnly);
            let rot_err = out.poses[0].rotation_angle_to(&gt).to_degrees();
            let trans_err = (out.poses[0].translation() - gt.translation()).norm();
            if rot_err < 0.1 && trans_err < 5e-4 {
                ok += 1;
            }
            assert!(out.final_.total(&w) <= out.initial.total(&w) + 1e-12);
        }
        assert!(ok >= trials - 1, "only {ok}/{trials} recoveries");
    }

    #[test]
    fn gauge_invariance_of_residuals() {
        let g = test_graph(2);
        let poses: Vec<RigidTransform> = g.nodes.iter().map(|n| n.pose).collect();
        let w = ObjectiveWeights::default();
        let gmove = RigidTransform::from_axis_angle(
            &Vector3::new(0.2, 1.0, -0.5),
            0.7,
            Vector3::new(0.3, -0.2, 0.5),
        );
        let moved: Vec<RigidTransform> = poses.iter().map(|p| gmove.compose(p)).collect();
        let (l3d_a, _) = loss_3d(&g, &poses, &w);
        let (l3d_b, _) = loss_3d(&g, &moved, &w);
        assert!((l3d_a - l3d_b).abs() < 1e-9 * l3d_a.max(1.0));

        let assocs_a = associate_2d(&g, &poses);
        let assocs_b = associate_2d(&g, &moved);
        assert_eq!(assocs_a.len(), assocs_b.len());
        let (l2d_a, _) = loss_2d_fixed(&g, &assocs_a, &poses, &w);
        let (l2d_b, _) = loss_2d_fixed(&g, &assocs_b, &moved, &w);
        assert!((l2d_a - l2d_b).abs() < 1e-9 * l2d_a.max(1.0));
    }

    #[test]
    fn sdf_term_gauge_invariance_via_adapter() {
        // Fill a volume with the exact SDF of a sphere and compare the loss
        // under a common motion of pose and volume frame.
        let mut vol =
            SdfVolume::new(Vector3::repeat(-0.1), 0.004, [50, 50, 50], 0.05).unwrap();
        for z in 0..50 {
            for y in 0..50 {
                for x in 0..50 {
                    let p = vol.voxel_center(x, y, z);
                    let d: f64 = p.norm() - 0.05;
                    vol.set_voxel(x, y, z, d.clamp(-0.05, 0.05), 1.0);
                }
            }
        }
        let pose = orbit_pose(30.0);
        let node = GraphNode {
            obs: rendered_sphere_node(&pose),
            pose,
        };
        let w = ObjectiveWeights::default();
        let (l_a, _) = loss_sdf(&node, &pose, &vol, &w);
        let gmove = RigidTransform::from_axis_angle(
            &Vector3::new(1.0, 0.3, 0.2),
            0.9,
            Vector3::new(0.2, 0.1, -0.3),
        );
        let adapter = TransformedSdf {
            inner: &vol,
            world_to_inner: gmove.inverse(),
        };
        let (l_b, _) = loss_sdf(&node, &gmove.compose(&pose), &adapter, &w);
        assert!(l_a > 0.0);
        assert!((l_a - l_b).abs() < 1e-9 * l_a.max(1.0), "{l_a} vs {l_b}");
    }

    fn rendered_sphere_node(pose: &RigidTransform) -> Arc<FrameObservation> {
        use crate::synth::{render_sequence, DepthNoise, SceneSpec, Shape, Texture};
        let q = pose.to_quaternion();
        let t = pose.translation();
        let spec = SceneSpec {
            name: "sphere".into(),
            shape: Shape::Sphere {
                center: [0.0; 3],
                radius: 0.05,
            },
            trajectory: vec![(q, [t.x, t.y, t.z])],
            noise: DepthNoise::default(),
            occluders: vec![],
            texture: Texture::Uniform,
            seed: 3,
        };
        let k = CameraIntrinsics::new(200.0, 200.0, 120.0, 90.0, 240, 180).unwrap();
        let seq = render_sequence(&spec, &k).unwrap();
        Arc::new(FrameObservation::from_frame(
            &seq.frames[0],
            &ObservationParams::default(),
        ))
    }

    #[test]
    fn sdf_loss_small_at_truth_and_grows_with_offset() {
        let mut vol =
            SdfVolume::new(Vector3::repeat(-0.1), 0.004, [50, 50, 50], 0.05).unwrap();
        for z in 0..50 {
            for y in 0..50 {
                for x in 0..50 {
                    let p = vol.voxel_center(x, y, z);
                    let d: f64 = p.norm() - 0.05;
                    vol.set_voxel(x, y, z, d.clamp(-0.05, 0.05), 1.0);
                }
            }
        }
        let pose = orbit_pose(45.0);
        let node = GraphNode {
            obs: rendered_sphere_node(&pose),
            pose,
        };
        let w = ObjectiveWeights::default();
        let (l_truth, _) = loss_sdf(&node, &pose, &vol, &w);
        let shifted = pose.compose(&RigidTransform::new(
            nalgebra::Matrix3::identity(),
            Vector3::new(0.0, 0.0, 0.005),
        ));
        let (l_shift, _) = loss_sdf(&node, &shifted, &vol, &w);
        assert!(
            l_shift > l_truth * 3.0,
            "truth {l_truth} vs shifted {l_shift}"
        );
        // Quantization floor: per-pixel residual below one voxel.
        let n_pix = SDF_PIXELS.min(node.obs.valid_masked) as f64;
        assert!(l_truth < n_pix * huber(0.004, w.huber_3d));
    }

    #[test]
    fn empty_mask_sdf_loss_is_zero() {
        let (w_img, h_img) = (32, 32);
        let k = CameraIntrinsics::new(40.0, 40.0, 16.0, 16.0, w_img, h_img).unwrap();
        let frame = RgbdFrame::new(
            0,
            0.0,
            vec![[0; 3]; w_img * h_img],
            vec![0.0; w_img * h_img],
            vec![false; w_img * h_img],
            k,
        )
        .unwrap();
        let node = GraphNode {
            obs: Arc::new(FrameObservation::from_frame(
                &frame,
                &ObservationParams::default(),
            )),
            pose: RigidTransform::identity(),
        };
        let vol = SdfVolume::new(Vector3::repeat(-0.1), 0.01, [20, 20, 20], 0.05).unwrap();
        let (l, g) = loss_sdf(&node, &RigidTransform::identity(), &vol, &ObjectiveWeights::default());
        assert_eq!(l, 0.0);
        assert_eq!(g, Vector6::zeros());
    }

    #[test]
    fn sdf_gradient_matches_finite_differences() {
        let mut vol =
            SdfVolume::new(Vector3::repeat(-0.1), 0.004, [50, 50, 50], 0.05).unwrap();
        for z in 0..50 {
            for y in 0..50 {
                for x in 0..50 {
                    let p = vol.voxel_center(x, y, z);
                    let d: f64 = p.norm() - 0.05;
                    vol.set_voxel(x, y, z, d.clamp(-0.05, 0.05), 1.0);
                }
            }
        }
        let pose = orbit_pose(10.0);
        let node = GraphNode {
            obs: rendered_sphere_node(&pose),
            pose,
        };
        let w = ObjectiveWeights::default();
        // Slightly perturbed pose so the loss is not at its minimum.
        let xi = Twist::new(
            Vector3::new(0.01, -0.02, 0.015),
            Vector3::new(0.002, 0.001, -0.003),
        );
        let eval_pose = se3_exp(&xi).compose(&pose);
        let (_, grad) = loss_sdf(&node, &eval_pose, &vol, &w);
        let poses = vec![eval_pose];
        fd_check_gradient(
            &poses,
            0,
            |ps| loss_sdf(&node, &ps[0], &vol, &w).0,
            &grad,
            1e-4,
        );
    }
}

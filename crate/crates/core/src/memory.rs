//! Posture memory pool: keyframes retained for viewpoint novelty and
//! registration reliability, and reference selection for the posture graph.

use std::sync::Arc;

use crate::frame::{FrameObservation, MaskFootprint};
use crate::geometry::{project, RigidTransform};

/// Viewpoint novelty thresholds for keyframe insertion.
pub const KEYFRAME_ROTATION_DEG: f64 = 10.0;
pub const KEYFRAME_TRANSLATION_M: f64 = 0.02;
/// Minimum coarse-registration inlier ratio for a frame to be memorized.
pub const KEYFRAME_MIN_INLIER_RATIO: f64 = 0.3;
/// Reference-selection overlap threshold.
pub const OVERLAP_THRESHOLD: f64 = 0.2;

/// One retained frame: its optimized pose (camera frame -> object frame),
/// the masked cloud, and the shared observation it came from.
#[derive(Debug, Clone)]
pub struct Keyframe {
    pub id: usize,
    pub pose: RigidTransform,
    pub obs: Arc<FrameObservation>,
    /// Coarse inlier ratio at insertion time.
    pub inlier_ratio: f64,
}

impl Keyframe {
    pub fn footprint(&self) -> &MaskFootprint {
        &self.obs.footprint
    }
}

#[derive(Debug, Clone, Default)]
pub struct PosturePool {
    keyframes: Vec<Keyframe>,
    /// 0 = unbounded.
    capacity: usize,
}

/// Combined pose distance in "novelty units": 1.0 means exactly at either
/// insertion threshold.
fn novelty_distance(a: &RigidTransform, b: &RigidTransform) -> f64 {
    let rot = a.rotation_angle_to(b) / KEYFRAME_ROTATION_DEG.to_radians();
    let trans = a.translation_distance_to(b) / KEYFRAME_TRANSLATION_M;
    rot.max(trans)
}

impl PosturePool {
    pub fn new(capacity: usize) -> Self {
        PosturePool {
            keyframes: Vec::new(),
            capacity,
        }
    }

    pub fn len(&self) -> usize {
        self.keyframes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.keyframes.is_empty()
    }

    pub fn keyframes(&self) -> &[Keyframe] {
        &self.keyframes
    }

    pub fn latest(&self) -> Option<&Keyframe> {
        self.keyframes.last()
    }

    /// Insert iff the pool is empty, or the pose is novel against every
    /// stored keyframe (rotation >= 10° or translation >= 2 cm) and the
    /// frame's coarse registration was reliable. Ids must increase; a
    /// repeated id is ignored. At capacity the most redundant keyframe (the
    /// one closest to its nearest neighbor) is evicted, keeping extremes.
    pub fn maybe_insert_keyframe(
        &mut self,
        obs: &Arc<FrameObservation>,
        pose: &RigidTransform,
        inlier_ratio: f64,
    ) -> bool {
        if !obs.has_geometry() {
            return false;
        }
        if let Some(last) = self.keyframes.last() {
            if obs.index <= last.id {
                return false;
            }
        }
        if !self.keyframes.is_empty() {
            if inlier_ratio < KEYFRAME_MIN_INLIER_RATIO {
                return false;
            }
            let novel = self
                .keyframes
                .iter()
                .all(|kf| novelty_distance(&kf.pose, pose) >= 1.0);
            if !novel {
                return false;
            }
        }
        self.keyframes.push(Keyframe {
            id: obs.index,
            pose: *pose,
            obs: Arc::clone(obs),
            inlier_ratio,
        });
        if self.capacity > 0 && self.keyframes.len() > self.capacity {
            self.evict_most_redundant();
        }
        true
    }

    fn evict_most_redundant(&mut self) {
        if self.keyframes.len() < 2 {
            return;
        }
        let mut worst = (0usize, f64::INFINITY);
        for i in 0..self.keyframes.len() {
            let nearest = self
                .keyframes
                .iter()
                .enumerate()
                .filter(|(j, _)| *j != i)
                .map(|(_, kf)| novelty_distance(&kf.pose, &self.keyframes[i].pose))
                .fold(f64::INFINITY, f64::min);
            // Prefer evicting newer frames on ties so long-baseline anchors
            // survive.
            if nearest < worst.1 || (nearest == worst.1 && i > worst.0) {
                worst = (i, nearest);
            }
        }
        self.keyframes.remove(worst.0);
    }

    /// Estimated view overlap: the fraction of the keyframe's cloud that
    /// lands inside the current frame's mask when warped through the
    /// keyframe pose and the current coarse pose.
    pub fn overlap_score(
        &self,
        kf: &Keyframe,
        coarse_pose: &RigidTransform,
        current: &FrameObservation,
    ) -> f64 {
        let to_current_cam = coarse_pose.inverse().compose(&kf.pose);
        let pts = &kf.obs.cloud.points;
        if pts.is_empty() {
            return 0.0;
        }
        let stride = pts.len().div_ceil(512).max(1);
        let mut inside = 0usize;
        let mut total = 0usize;
        for p in pts.iter().step_by(stride) {
            total += 1;
            let q = to_current_cam.transform_point(p);
            if q.z <= 1e-6 {
                continue;
            }
            if let Ok(px) = project(&current.intrinsics, &q) {
                if current.footprint.contains(px[0], px[1]) {
                    inside += 1;
                }
            }
        }
        inside as f64 / total as f64
    }

    /// Top-K references by overlap with the current view. Keyframes above
    /// the overlap threshold are ranked by score with ties broken toward a
    /// larger id gap from the current frame; if none qualify, the single
    /// best-overlapping keyframe is returned. An empty pool yields an empty
    /// list.
    pub fn select_references(
        &self,
        coarse_pose: &RigidTransform,
        current: &FrameObservation,
        k: usize,
    ) -> Vec<Keyframe> {
        assert!(k >= 1, "reference count must be at least 1");
        if self.keyframes.is_empty() {
            return Vec::new();
        }
        let mut scored: Vec<(f64, usize, &Keyframe)> = self
            .keyframes
            .iter()
            .map(|kf| {
                (
                    self.overlap_score(kf, coarse_pose, current),
                    current.index.abs_diff(kf.id),
                    kf,
                )
            })
            .collect();
        // Descending score, larger id gap first on ties, then older id.
        scored.sort_by(|a, b| {
            b.0.partial_cmp(&a.0)
                .unwrap()
                .then(b.1.cmp(&a.1))
                .then(a.2.id.cmp(&b.2.id))
        });
        let qualified: Vec<&(f64, usize, &Keyframe)> = scored
            .iter()
            .filter(|(s, _, _)| *s >= OVERLAP_THRESHOLD)
            .collect();
        if qualified.is_empty() {
            return vec![scored[0].2.clone()];
        }
        qualified.iter().take(k).map(|(_, _, kf)| (*kf).clone()).collect()
    }

    /// Diverse recovery set used when tracking was lost: up to `max`
    /// keyframes picked greedily farthest-first in pose space.
    pub fn recovery_references(&self, max: usize) -> Vec<Keyframe> {
        if self.keyframes.is_empty() || max == 0 {
            return Vec::new();
        }
        let mut picked: Vec<usize> = vec![0];
        while picked.len() < max.min(self.keyframes.len()) {
            let mut best = (0usize, -1.0f64);
            for i in 0..self.keyframes.len() {
                if picked.contains(&i) {
                    continue;
                }
                let d = picked
                    .iter()
                    .map(|&j| {
                        novelty_distance(&self.keyframes[i].pose, &self.keyframes[j].pose)
                    })
                    .fold(f64::INFINITY, f64::min);
                if d > best.1 {
                    best = (i, d);
                }
            }
            picked.push(best.0);
        }
        picked.sort_unstable();
        picked.into_iter().map(|i| self.keyframes[i].clone()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::frame::{ObservationParams, RgbdFrame};
    use crate::geometry::CameraIntrinsics;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn obs_with_index(index: usize) -> Arc<FrameObservation> {
        let (w, h) = (64, 48);
        let k = CameraIntrinsics::new(60.0, 60.0, 32.0, 24.0, w, h).unwrap();
        let mut mask = vec![false; w * h];
        let mut depth = vec![0.0; w * h];
        for v in 12..36 {
            for u in 16..48 {
                mask[v * w + u] = true;
                depth[v * w + u] = 0.5;
            }
        }
        Arc::new(FrameObservation::from_frame(
            &RgbdFrame::new(index, index as f64, vec![[90; 3]; w * h], depth, mask, k).unwrap(),
            &ObservationParams::default(),
        ))
    }

    fn pose_at_angle(deg: f64) -> RigidTransform {
        RigidTransform::from_axis_angle(
            &Vector3::y(),
            deg.to_radians(),
            Vector3::new(0.0, 0.0, 0.0),
        )
    }

    #[test]
    fn empty_pool_always_inserts() {
        let mut pool = PosturePool::new(0);
        assert!(pool.maybe_insert_keyframe(&obs_with_index(0), &RigidTransform::identity(), 0.0));
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn identical_pose_is_rejected() {
        let mut pool = PosturePool::new(0);
        pool.maybe_insert_keyframe(&obs_with_index(0), &RigidTransform::identity(), 1.0);
        assert!(!pool.maybe_insert_keyframe(&obs_with_index(1), &RigidTransform::identity(), 1.0));
        assert_eq!(pool.len(), 1);
    }

    #[test]
    fn five_degree_orbit_inserts_every_other_frame() {
        let mut pool = PosturePool::new(0);
        let mut inserted = Vec::new();
        for i in 0..12 {
            let pose = pose_at_angle(5.0 * i as f64);
            if pool.maybe_insert_keyframe(&obs_with_index(i), &pose, 1.0) {
                inserted.push(i);
            }
        }
        assert_eq!(inserted, vec![0, 2, 4, 6, 8, 10]);
    }

    #[test]
    fn low_inlier_ratio_blocks_insertion() {
        let mut pool = PosturePool::new(0);
        pool.maybe_insert_keyframe(&obs_with_index(0), &RigidTransform::identity(), 1.0);
        assert!(!pool.maybe_insert_keyframe(&obs_with_index(1), &pose_at_angle(45.0), 0.1));
    }

    #[test]
    fn ids_strictly_increase_under_fuzzing() {
        let mut pool = PosturePool::new(6);
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for step in 0..200 {
            let idx = if rng.gen_bool(0.2) {
                step.saturating_sub(rng.gen_range(0..5))
            } else {
                step
            };
            let pose = pose_at_angle(rng.gen_range(0.0..360.0));
            pool.maybe_insert_keyframe(&obs_with_index(idx), &pose, rng.gen_range(0.0..1.0));
            let ids: Vec<usize> = pool.keyframes().iter().map(|k| k.id).collect();
            let mut sorted = ids.clone();
            sorted.sort_unstable();
            sorted.dedup();
            assert_eq!(ids, sorted, "ids must stay strictly increasing");
            assert!(pool.len() <= 6);
        }
    }

    #[test]
    fn capacity_eviction_keeps_extremes() {
        let mut pool = PosturePool::new(3);
        for (i, deg) in [0.0, 60.0, 61.0, 120.0].iter().enumerate() {
            pool.maybe_insert_keyframe(&obs_with_index(i), &pose_at_angle(*deg), 1.0);
        }
        let angles: Vec<usize> = pool.keyframes().iter().map(|k| k.id).collect();
        // 60 and 61 are mutually redundant; one of them must have gone.
        assert_eq!(pool.len(), 3);
        assert!(angles.contains(&0) && angles.contains(&3));
    }

    #[test]
    fn select_from_pool_of_one_returns_it() {
        let mut pool = PosturePool::new(0);
        pool.maybe_insert_keyframe(&obs_with_index(0), &RigidTransform::identity(), 1.0);
        let current = obs_with_index(5);
        let refs = pool.select_references(&RigidTransform::identity(), &current, 5);
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].id, 0);
    }

    #[test]
    fn same_pose_keyframe_ranks_first() {
        let mut pool = PosturePool::new(0);
        pool.maybe_insert_keyframe(&obs_with_index(0), &pose_at_angle(90.0), 1.0);
        pool.maybe_insert_keyframe(&obs_with_index(1), &pose_at_angle(170.0), 1.0);
        pool.maybe_insert_keyframe(&obs_with_index(2), &RigidTransform::identity(), 1.0);
        let current = obs_with_index(10);
        let refs = pool.select_references(&RigidTransform::identity(), &current, 1);
        assert_eq!(refs.len(), 1);
        assert_eq!(refs[0].id, 2, "co-located keyframe must win");
    }

    #[test]
    fn selected_scores_dominate_excluded_scores() {
        let mut pool = PosturePool::new(0);
        for i in 0..8 {
            pool.maybe_insert_keyframe(&obs_with_index(i), &pose_at_angle(12.0 * i as f64), 1.0);
        }
        let current = obs_with_index(20);
        let coarse = pose_at_angle(30.0);
        let k = 3;
        let refs = pool.select_references(&coarse, &current, k);
        assert!(refs.len() <= k);
        let chosen: Vec<usize> = refs.iter().map(|r| r.id).collect();
        // Exhaustive oracle over the same scoring function.
        let min_chosen = refs
            .iter()
            .map(|r| pool.overlap_score(r, &coarse, &current))
            .fold(f64::INFINITY, f64::min);
        for kf in pool.keyframes() {
            if chosen.contains(&kf.id) {
                continue;
            }
            let s = pool.overlap_score(kf, &coarse, &current);
            if s >= OVERLAP_THRESHOLD {
                assert!(
                    s <= min_chosen + 1e-12,
                    "excluded keyframe {} outscores a selected one",
                    kf.id
                );
            }
        }
    }

    #[test]
    fn empty_pool_selects_nothing() {
        let pool = PosturePool::new(0);
        let current = obs_with_index(0);
        assert!(pool
            .select_references(&RigidTransform::identity(), &current, 3)
            .is_empty());
    }

    #[test]
    fn recovery_references_are_diverse() {
        let mut pool = PosturePool::new(0);
        for i in 0..10 {
            pool.maybe_insert_keyframe(&obs_with_index(i), &pose_at_angle(20.0 * i as f64), 1.0);
        }
        let refs = pool.recovery_references(4);
        assert_eq!(refs.len(), 4);
        // Greedy farthest-first from the oldest keyframe must include the
        // angular extremes.
        let ids: Vec<usize> = refs.iter().map(|r| r.id).collect();
        assert!(ids.contains(&0));
        assert!(ids.contains(&9));
    }
}

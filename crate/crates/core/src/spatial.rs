//! Exact 3D kd-tree for nearest-neighbor, k-NN and radius queries.
//!
//! Ties are broken by point index so queries are deterministic regardless
//! of build order or thread count.

use nalgebra::Vector3;

#[derive(Debug, Clone, Copy)]
struct Node {
    /// Index into the original point slice.
    point: u32,
    axis: u8,
    left: i32,
    right: i32,
}

#[derive(Debug, Clone)]
pub struct KdTree3 {
    nodes: Vec<Node>,
    points: Vec<Vector3<f64>>,
    root: i32,
}

impl KdTree3 {
    pub fn build(points: &[Vector3<f64>]) -> Self {
        let mut idx: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = build_rec(points, &mut idx[..], &mut nodes);
        KdTree3 {
            nodes,
            points: points.to_vec(),
            root,
        }
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    /// Nearest neighbor as `(index, squared distance)`.
    pub fn nearest(&self, query: &Vector3<f64>) -> Option<(u32, f64)> {
        if self.root < 0 {
            return None;
        }
        let mut best = (u32::MAX, f64::INFINITY);
        self.nearest_rec(self.root, query, &mut best);
        (best.0 != u32::MAX).then_some(best)
    }

    fn nearest_rec(&self, node: i32, query: &Vector3<f64>, best: &mut (u32, f64)) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        if d2 < best.1 || (d2 == best.1 && n.point < best.0) {
            *best = (n.point, d2);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near >= 0 {
            self.nearest_rec(near, query, best);
        }
        if far >= 0 && delta * delta <= best.1 {
            self.nearest_rec(far, query, best);
        }
    }

    /// The k nearest neighbors sorted by (distance, index).
    pub fn k_nearest(&self, query: &Vector3<f64>, k: usize) -> Vec<(u32, f64)> {
        if self.root < 0 || k == 0 {
            return Vec::new();
        }
        let mut heap: Vec<(f64, u32)> = Vec::with_capacity(k + 1);
        self.knn_rec(self.root, query, k, &mut heap);
        heap.sort_by(|a, b| a.partial_cmp(b).unwrap());
        heap.into_iter().map(|(d2, i)| (i, d2)).collect()
    }

    fn knn_rec(&self, node: i32, query: &Vector3<f64>, k: usize, heap: &mut Vec<(f64, u32)>) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        let d2 = (p - query).norm_squared();
        let cand = (d2, n.point);
        if heap.len() < k {
            heap.push(cand);
            heap.sort_by(|a, b| a.partial_cmp(b).unwrap());
        } else if cand < *heap.last().unwrap() {
            heap.pop();
            let pos = heap.partition_point(|x| *x < cand);
            heap.insert(pos, cand);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near >= 0 {
            self.knn_rec(near, query, k, heap);
        }
        let worst = if heap.len() < k {
            f64::INFINITY
        } else {
            heap.last().unwrap().0
        };
        if far >= 0 && delta * delta <= worst {
            self.knn_rec(far, query, k, heap);
        }
    }

    /// All indices within `radius` of the query, sorted by index.
    pub fn within_radius(&self, query: &Vector3<f64>, radius: f64) -> Vec<u32> {
        let mut out = Vec::new();
        if self.root >= 0 {
            self.radius_rec(self.root, query, radius * radius, &mut out);
        }
        out.sort_unstable();
        out
    }

    fn radius_rec(&self, node: i32, query: &Vector3<f64>, r2: f64, out: &mut Vec<u32>) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.point as usize];
        if (p - query).norm_squared() <= r2 {
            out.push(n.point);
        }
        let delta = query[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta <= 0.0 {
            (n.left, n.right)
        } else {
            (n.right, n.left)
        };
        if near >= 0 {
            self.radius_rec(near, query, r2, out);
        }
        if far >= 0 && delta * delta <= r2 {
            self.radius_rec(far, query, r2, out);
        }
    }
}

fn build_rec(points: &[Vector3<f64>], idx: &mut [u32], nodes: &mut Vec<Node>) -> i32 {
    if idx.is_empty() {
        return -1;
    }
    // Split on the widest extent for balanced cells.
    let mut lo = Vector3::repeat(f64::INFINITY);
    let mut hi = Vector3::repeat(f64::NEG_INFINITY);
    for &i in idx.iter() {
        let p = &points[i as usize];
        lo = lo.inf(p);
        hi = hi.sup(p);
    }
    let ext = hi - lo;
    let axis = if ext.x >= ext.y && ext.x >= ext.z {
        0
    } else if ext.y >= ext.z {
        1
    } else {
        2
    };
    let mid = idx.len() / 2;
    idx.select_nth_unstable_by(mid, |&a, &b| {
        (points[a as usize][axis], a)
            .partial_cmp(&(points[b as usize][axis], b))
            .unwrap()
    });
    let point = idx[mid];
    let slot = nodes.len();
    nodes.push(Node {
        point,
        axis: axis as u8,
        left: -1,
        right: -1,
    });
    let (left_ids, rest) = idx.split_at_mut(mid);
    let left = build_rec(points, left_ids, nodes);
    let right = build_rec(points, &mut rest[1..], nodes);
    nodes[slot].left = left;
    nodes[slot].right = right;
    slot as i32
}

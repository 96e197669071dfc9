//! Balanced kd-tree over a point cloud.
//!
//! Queries are exact: radius and k-nearest results equal a brute-force scan
//! (set equality, deterministic tie-breaking by point id). The tree is
//! immutable after construction and safe to query concurrently.

use nalgebra::Vector3;

use super::PointCloud;

#[derive(Debug, Clone, Copy)]
struct Node {
    id: u32,
    axis: u8,
    left: i32,
    right: i32,
}

/// Immutable spatial index over the points of a [`PointCloud`].
#[derive(Debug, Clone)]
pub struct SpatialIndex {
    points: Vec<Vector3<f64>>,
    nodes: Vec<Node>,
    root: i32,
}

/// Candidate ordering: squared distance first, then point id. Gives every
/// query a single well-defined answer even with duplicate points.
#[derive(Debug, Clone, Copy, PartialEq)]
struct Candidate {
    d2: f64,
    id: u32,
}

impl Eq for Candidate {}

impl Ord for Candidate {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        self.d2
            .total_cmp(&other.d2)
            .then_with(|| self.id.cmp(&other.id))
    }
}

impl PartialOrd for Candidate {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl SpatialIndex {
    pub fn build(cloud: &PointCloud) -> Self {
        let points = cloud.points().to_vec();
        let mut ids: Vec<u32> = (0..points.len() as u32).collect();
        let mut nodes = Vec::with_capacity(points.len());
        let root = Self::build_rec(&points, &mut ids, 0, &mut nodes);
        Self { points, nodes, root }
    }

    fn build_rec(points: &[Vector3<f64>], ids: &mut [u32], depth: usize, nodes: &mut Vec<Node>) -> i32 {
        if ids.is_empty() {
            return -1;
        }
        let axis = (depth % 3) as u8;
        let mid = ids.len() / 2;
        ids.select_nth_unstable_by(mid, |&a, &b| {
            points[a as usize][axis as usize]
                .total_cmp(&points[b as usize][axis as usize])
                .then_with(|| a.cmp(&b))
        });
        let id = ids[mid];
        let slot = nodes.len();
        nodes.push(Node { id, axis, left: -1, right: -1 });
        let (lo, hi) = ids.split_at_mut(mid);
        let left = Self::build_rec(points, lo, depth + 1, nodes);
        let right = Self::build_rec(points, &mut hi[1..], depth + 1, nodes);
        nodes[slot].left = left;
        nodes[slot].right = right;
        slot as i32
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn point(&self, id: usize) -> &Vector3<f64> {
        &self.points[id]
    }

    /// Ids of points with `||x - center|| < r` (strict), ascending by id.
    pub fn radius_neighbors(&self, center: &Vector3<f64>, r: f64) -> Vec<usize> {
        let mut out = Vec::new();
        if self.root >= 0 && r > 0.0 {
            self.radius_rec(self.root, center, r * r, &mut out);
        }
        out.sort_unstable();
        out
    }

    /// Radius query centered on an indexed point, excluding the point itself.
    pub fn radius_neighbors_of(&self, id: usize, r: f64) -> Vec<usize> {
        let center = self.points[id];
        let mut out = self.radius_neighbors(&center, r);
        out.retain(|&other| other != id);
        out
    }

    fn radius_rec(&self, node: i32, center: &Vector3<f64>, r2: f64, out: &mut Vec<usize>) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.id as usize];
        if (p - center).norm_squared() < r2 {
            out.push(n.id as usize);
        }
        let delta = center[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if near >= 0 {
            self.radius_rec(near, center, r2, out);
        }
        if far >= 0 && delta * delta < r2 {
            self.radius_rec(far, center, r2, out);
        }
    }

    /// The k nearest points to `center`, ordered by (distance, id).
    pub fn knn(&self, center: &Vector3<f64>, k: usize) -> Vec<usize> {
        if k == 0 || self.root < 0 {
            return Vec::new();
        }
        let mut heap: std::collections::BinaryHeap<Candidate> =
            std::collections::BinaryHeap::with_capacity(k + 1);
        self.knn_rec(self.root, center, k, &mut heap);
        let mut out: Vec<Candidate> = heap.into_vec();
        out.sort_unstable();
        out.into_iter().map(|c| c.id as usize).collect()
    }

    fn knn_rec(
        &self,
        node: i32,
        center: &Vector3<f64>,
        k: usize,
        heap: &mut std::collections::BinaryHeap<Candidate>,
    ) {
        let n = self.nodes[node as usize];
        let p = &self.points[n.id as usize];
        let cand = Candidate {
            d2: (p - center).norm_squared(),
            id: n.id,
        };
        if heap.len() < k {
            heap.push(cand);
        } else if cand < *heap.peek().expect("non-empty heap") {
            heap.pop();
            heap.push(cand);
        }
        let delta = center[n.axis as usize] - p[n.axis as usize];
        let (near, far) = if delta < 0.0 { (n.left, n.right) } else { (n.right, n.left) };
        if near >= 0 {
            self.knn_rec(near, center, k, heap);
        }
        if far >= 0 {
            // Visit the far side unless every point there must rank strictly
            // worse than the current heap worst (equal distance can still win
            // on id).
            let must_visit = heap.len() < k || delta * delta <= heap.peek().unwrap().d2;
            if must_visit {
                self.knn_rec(far, center, k, heap);
            }
        }
    }

    /// Nearest point to `center` as (id, distance).
    pub fn nearest(&self, center: &Vector3<f64>) -> Option<(usize, f64)> {
        let ids = self.knn(center, 1);
        ids.first()
            .map(|&id| (id, (self.points[id] - center).norm()))
    }
}

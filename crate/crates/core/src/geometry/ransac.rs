//! RANSAC plane removal for tabletop scans.

use nalgebra::Vector3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::PointCloud;
use crate::{Error, Result};

const DEGENERATE_NORMAL: f64 = 1e-12;

/// Find the plane with the most inliers over `iters` seeded 3-point samples
/// and remove its inliers.
///
/// A point is an inlier when its absolute signed distance to the sampled
/// plane is at most `dist_thresh`. Returns the inlier ids (ascending) and
/// the cloud with those points removed, in original order. Collinear samples
/// are rejected and resampled; they do not consume an iteration.
pub fn ransac_remove_plane(
    cloud: &PointCloud,
    dist_thresh: f64,
    iters: usize,
    seed: u64,
) -> Result<(Vec<usize>, PointCloud)> {
    let points = cloud.points();
    if points.len() < 3 {
        return Err(Error::InvalidValue(format!(
            "RANSAC needs at least 3 points, got {}",
            points.len()
        )));
    }
    if !(dist_thresh > 0.0) {
        return Err(Error::InvalidValue(format!(
            "distance threshold must be positive, got {dist_thresh}"
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let n = points.len();
    let mut best_count = 0usize;
    let mut best_plane: Option<(Vector3<f64>, Vector3<f64>)> = None; // (unit normal, anchor)

    let mut done = 0usize;
    let mut attempts = 0usize;
    // Degenerate samples get retried, with a cap so pathological inputs
    // (all points collinear) still terminate.
    let max_attempts = iters.saturating_mul(16).max(64);
    while done < iters && attempts < max_attempts {
        attempts += 1;
        let i = rng.gen_range(0..n);
        let j = rng.gen_range(0..n);
        let k = rng.gen_range(0..n);
        if i == j || j == k || i == k {
            continue;
        }
        let a = points[i];
        let normal = (points[j] - a).cross(&(points[k] - a));
        let norm = normal.norm();
        if norm < DEGENERATE_NORMAL {
            continue;
        }
        done += 1;
        let unit = normal / norm;
        let count = points
            .iter()
            .filter(|p| ((*p - a).dot(&unit)).abs() <= dist_thresh)
            .count();
        if count > best_count {
            best_count = count;
            best_plane = Some((unit, a));
        }
    }

    let (unit, anchor) = best_plane.ok_or_else(|| {
        Error::InvalidValue("RANSAC found no non-degenerate 3-point sample".into())
    })?;

    let mut inliers = Vec::with_capacity(best_count);
    let mut outliers = Vec::with_capacity(n - best_count);
    for (idx, p) in points.iter().enumerate() {
        if ((p - anchor).dot(&unit)).abs() <= dist_thresh {
            inliers.push(idx);
        } else {
            outliers.push(*p);
        }
    }
    Ok((inliers, PointCloud::new(outliers)?))
}

//! Feature-consistency voting and pruning.
//!
//! Each point receives one vote from every in-radius neighbor whose feature
//! lies within δ of its own:
//!
//! ```text
//! V(x_i) = #{ x_j ∈ B(x_i, r), j ≠ i : ||f'_i - f'_j|| < δ }
//! ```
//!
//! The configured fraction of points with the fewest votes is removed in a
//! single pass. Votes are meaningful on refined features; the caller is
//! responsible for refining first.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::geometry::SpatialIndex;
use crate::scan::FeaturedCloud;
use crate::{Error, Result};

/// Feature-distance threshold mode.
#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case", tag = "mode", content = "value")]
pub enum VoteThreshold {
    /// Fixed feature-distance threshold.
    Absolute(f64),
    /// `factor` times the median feature distance over seeded random
    /// in-radius pairs. Scale-free across feature backbones.
    RelativeMedian { factor: f64, samples: usize, seed: u64 },
}

#[derive(Debug, Clone, Copy, PartialEq, serde::Serialize, serde::Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PruneConfig {
    /// Neighborhood radius in meters.
    pub radius: f64,
    pub threshold: VoteThreshold,
    /// Fraction of points to discard.
    pub discard_fraction: f64,
}

impl Default for PruneConfig {
    fn default() -> Self {
        Self {
            radius: 0.02,
            threshold: VoteThreshold::RelativeMedian {
                factor: 0.5,
                samples: 10_000,
                seed: 0,
            },
            discard_fraction: 0.2,
        }
    }
}

impl PruneConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.radius > 0.0) {
            return Err(Error::InvalidValue(format!(
                "prune radius must be positive, got {}",
                self.radius
            )));
        }
        if !(0.0..1.0).contains(&self.discard_fraction) {
            return Err(Error::InvalidValue(format!(
                "discard fraction must be in [0, 1), got {}",
                self.discard_fraction
            )));
        }
        match self.threshold {
            VoteThreshold::Absolute(d) if !(d > 0.0) => Err(Error::InvalidValue(
                format!("absolute vote threshold must be positive, got {d}"),
            )),
            VoteThreshold::RelativeMedian { factor, samples, .. }
                if !(factor > 0.0) || samples == 0 =>
            {
                Err(Error::InvalidValue("relative vote threshold needs factor > 0 and samples > 0".into()))
            }
            _ => Ok(()),
        }
    }
}

fn feature_distance(cloud: &FeaturedCloud, i: usize, j: usize) -> f64 {
    cloud
        .feature(i)
        .iter()
        .zip(cloud.feature(j))
        .map(|(a, b)| (a - b) * (a - b))
        .sum::<f64>()
        .sqrt()
}

/// Resolve the configured threshold to an absolute feature distance.
pub fn resolve_threshold(
    cloud: &FeaturedCloud,
    index: &SpatialIndex,
    cfg: &PruneConfig,
) -> Result<f64> {
    cfg.validate()?;
    match cfg.threshold {
        VoteThreshold::Absolute(d) => Ok(d),
        VoteThreshold::RelativeMedian { factor, samples, seed } => {
            if cloud.is_empty() {
                return Err(Error::EmptyCloud);
            }
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let mut dists = Vec::with_capacity(samples);
            let mut attempts = 0usize;
            let max_attempts = samples.saturating_mul(8);
            while dists.len() < samples && attempts < max_attempts {
                attempts += 1;
                let i = rng.gen_range(0..cloud.len());
                let neighbors = index.radius_neighbors_of(i, cfg.radius);
                if neighbors.is_empty() {
                    continue;
                }
                let j = neighbors[rng.gen_range(0..neighbors.len())];
                dists.push(feature_distance(cloud, i, j));
            }
            if dists.is_empty() {
                return Err(Error::InvalidValue(
                    "no in-radius pairs found while estimating the vote threshold".into(),
                ));
            }
            dists.sort_by(f64::total_cmp);
            let mid = dists.len() / 2;
            let median = if dists.len() % 2 == 1 {
                dists[mid]
            } else {
                0.5 * (dists[mid - 1] + dists[mid])
            };
            Ok(factor * median)
        }
    }
}

/// Count feature-consistency votes for every point.
pub fn count_votes(cloud: &FeaturedCloud, index: &SpatialIndex, cfg: &PruneConfig) -> Result<Vec<usize>> {
    let delta = resolve_threshold(cloud, index, cfg)?;
    Ok(count_votes_with_threshold(cloud, index, cfg.radius, delta))
}

pub fn count_votes_with_threshold(
    cloud: &FeaturedCloud,
    index: &SpatialIndex,
    radius: f64,
    delta: f64,
) -> Vec<usize> {
    (0..cloud.len())
        .map(|i| {
            index
                .radius_neighbors_of(i, radius)
                .into_iter()
                .filter(|&j| feature_distance(cloud, i, j) < delta)
                .count()
        })
        .collect()
}

/// Remove exactly `⌊fraction·N⌋` points with the fewest votes.
///
/// Ties are broken deterministically: larger mean in-radius feature
/// distance goes first (isolated points count as infinitely far), then
/// larger point id. Survivors keep their original order.
pub fn prune_cloud(
    cloud: &FeaturedCloud,
    index: &SpatialIndex,
    votes: &[usize],
    cfg: &PruneConfig,
) -> Result<FeaturedCloud> {
    cfg.validate()?;
    if votes.len() != cloud.len() {
        return Err(Error::Dimension {
            context: "votes vs cloud",
            expected: cloud.len(),
            actual: votes.len(),
        });
    }
    let n = cloud.len();
    let remove = (cfg.discard_fraction * n as f64).floor() as usize;
    if remove == 0 {
        return Ok(cloud.clone());
    }
    let mean_dist: Vec<f64> = (0..n)
        .map(|i| {
            let neighbors = index.radius_neighbors_of(i, cfg.radius);
            if neighbors.is_empty() {
                f64::INFINITY
            } else {
                neighbors
                    .iter()
                    .map(|&j| feature_distance(cloud, i, j))
                    .sum::<f64>()
                    / neighbors.len() as f64
            }
        })
        .collect();
    let mut order: Vec<usize> = (0..n).collect();
    order.sort_by(|&a, &b| {
        votes[a]
            .cmp(&votes[b])
            .then_with(|| mean_dist[b].total_cmp(&mean_dist[a]))
            .then_with(|| b.cmp(&a))
    });
    let mut keep = vec![true; n];
    for &i in order.iter().take(remove) {
        keep[i] = false;
    }
    cloud.retain_rows(&keep)
}

/// Votes plus prune in one call.
pub fn prune(cloud: &FeaturedCloud, cfg: &PruneConfig) -> Result<(FeaturedCloud, Vec<usize>)> {
    let index = SpatialIndex::build(&cloud.cloud());
    let votes = count_votes(cloud, &index, cfg)?;
    let pruned = prune_cloud(cloud, &index, &votes, cfg)?;
    Ok((pruned, votes))
}

#[cfg(test)]
mod tests {
    use super::*;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn abs_cfg(radius: f64, delta: f64, fraction: f64) -> PruneConfig {
        PruneConfig {
            radius,
            threshold: VoteThreshold::Absolute(delta),
            discard_fraction: fraction,
        }
    }

    fn grid_cloud(n: usize, spacing: f64, feats: Vec<f64>, c: usize) -> FeaturedCloud {
        let points = (0..n)
            .map(|i| Vector3::new(i as f64 * spacing, 0.0, 0.0))
            .collect();
        FeaturedCloud::new(points, feats, c, vec![0; n], 1, None).unwrap()
    }

    #[test]
    fn isolated_point_gets_zero_votes() {
        let mut points: Vec<Vector3<f64>> = (0..5)
            .map(|i| Vector3::new(i as f64 * 0.001, 0.0, 0.0))
            .collect();
        points.push(Vector3::new(10.0, 0.0, 0.0));
        let cloud = FeaturedCloud::new(points, vec![0.0; 6], 1, vec![0; 6], 1, None).unwrap();
        let index = SpatialIndex::build(&cloud.cloud());
        let votes =
            count_votes_with_threshold(&cloud, &index, 0.01, 1.0);
        assert_eq!(votes[5], 0);
        assert!(votes[..5].iter().all(|&v| v > 0));
    }

    #[test]
    fn identical_features_all_within_radius() {
        let cloud = grid_cloud(8, 0.001, vec![3.0; 8], 1);
        let index = SpatialIndex::build(&cloud.cloud());
        let votes = count_votes_with_threshold(&cloud, &index, 1.0, 0.5);
        assert!(votes.iter().all(|&v| v == 7));
    }

    #[test]
    fn votes_match_brute_force_on_seeded_fixture() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        let n = 64;
        let c = 4;
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                    rng.gen_range(-0.05..0.05),
                )
            })
            .collect();
        let feats: Vec<f64> = (0..n * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cloud = FeaturedCloud::new(points, feats, c, vec![0; n], 1, None).unwrap();
        let index = SpatialIndex::build(&cloud.cloud());
        let r = 0.03;
        let delta = 0.8;
        let votes = count_votes_with_threshold(&cloud, &index, r, delta);
        for i in 0..n {
            let mut expected = 0;
            for j in 0..n {
                if i == j {
                    continue;
                }
                let close = (cloud.points()[i] - cloud.points()[j]).norm() < r;
                if close && feature_distance(&cloud, i, j) < delta {
                    expected += 1;
                }
            }
            assert_eq!(votes[i], expected, "point {i}");
        }
    }

    #[test]
    fn prune_removes_exact_count() {
        let cloud = grid_cloud(10, 0.001, (0..10).map(|i| i as f64).collect(), 1);
        let cfg = abs_cfg(0.01, 0.5, 0.2);
        let (pruned, _) = prune(&cloud, &cfg).unwrap();
        assert_eq!(pruned.len(), 8);
    }

    #[test]
    fn equal_votes_fall_back_to_documented_tie_break() {
        // All features identical: every point has the same votes and the
        // same mean distance (0), so the removed pair is the two largest
        // ids.
        let cloud = grid_cloud(10, 0.001, vec![1.0; 10], 1);
        let cfg = abs_cfg(1.0, 0.5, 0.2);
        let index = SpatialIndex::build(&cloud.cloud());
        let votes = count_votes(&cloud, &index, &cfg).unwrap();
        let pruned = prune_cloud(&cloud, &index, &votes, &cfg).unwrap();
        assert_eq!(pruned.len(), 8);
        let survivors: Vec<f64> = pruned.points().iter().map(|p| p.x).collect();
        let expected: Vec<f64> = (0..8).map(|i| i as f64 * 0.001).collect();
        assert_eq!(survivors, expected);
    }

    #[test]
    fn injected_outliers_are_removed() {
        // 17 coherent points + 3 feature outliers; removing 20% of 20 = 4
        // must take all 3 outliers.
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let mut points = Vec::new();
        let mut feats = Vec::new();
        for _ in 0..17 {
            points.push(Vector3::new(
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
                0.0,
            ));
            feats.push(1.0 + rng.gen_range(-0.01..0.01));
        }
        for _ in 0..3 {
            points.push(Vector3::new(
                rng.gen_range(-0.005..0.005),
                rng.gen_range(-0.005..0.005),
                0.0,
            ));
            feats.push(50.0 + rng.gen_range(-1.0..1.0));
        }
        let cloud = FeaturedCloud::new(points, feats, 1, vec![0; 20], 1, None).unwrap();
        let cfg = abs_cfg(0.05, 0.5, 0.2);
        let (pruned, votes) = prune(&cloud, &cfg).unwrap();
        assert_eq!(pruned.len(), 16);
        let max_outlier = *votes[17..].iter().max().unwrap();
        let min_coherent = *votes[..17].iter().min().unwrap();
        assert!(max_outlier < min_coherent, "votes: {votes:?}");
        // All survivors carry coherent features.
        assert!(pruned.features().iter().all(|&f| f < 2.0));
    }

    #[test]
    fn duplicating_a_point_adds_exactly_one_vote() {
        let mut rng = ChaCha8Rng::seed_from_u64(41);
        let n = 30;
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                    rng.gen_range(-0.01..0.01),
                )
            })
            .collect();
        let feats: Vec<f64> = (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cloud = FeaturedCloud::new(points.clone(), feats.clone(), 1, vec![0; n], 1, None).unwrap();
        let index = SpatialIndex::build(&cloud.cloud());
        let votes = count_votes_with_threshold(&cloud, &index, 0.02, 0.3);

        let target = 4usize;
        let mut points2 = points;
        let mut feats2 = feats;
        points2.push(points2[target]);
        feats2.push(feats2[target]);
        let cloud2 =
            FeaturedCloud::new(points2, feats2, 1, vec![0; n + 1], 1, None).unwrap();
        let index2 = SpatialIndex::build(&cloud2.cloud());
        let votes2 = count_votes_with_threshold(&cloud2, &index2, 0.02, 0.3);
        assert_eq!(votes2[target], votes[target] + 1);
    }

    #[test]
    fn relative_median_threshold_is_deterministic() {
        let mut rng = ChaCha8Rng::seed_from_u64(55);
        let n = 100;
        let points: Vec<Vector3<f64>> = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                    rng.gen_range(-0.02..0.02),
                )
            })
            .collect();
        let feats: Vec<f64> = (0..n * 2).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let cloud = FeaturedCloud::new(points, feats, 2, vec![0; n], 1, None).unwrap();
        let index = SpatialIndex::build(&cloud.cloud());
        let cfg = PruneConfig::default();
        let a = resolve_threshold(&cloud, &index, &cfg).unwrap();
        let b = resolve_threshold(&cloud, &index, &cfg).unwrap();
        assert_eq!(a, b);
        assert!(a > 0.0);
    }
}

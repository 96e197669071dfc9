//! Per-point feature refinement: cross-view correspondence mining,
//! contrastive training of the refinement network φ with projection head g,
//! and frozen inference on novel scenes.
//!
//! Image features back-projected from different views disagree on the same
//! physical surface. Training pulls the projections of point pairs that lie
//! within 1 cm of each other across two views together, and pushes the rest
//! of the batch apart. After training, g is set aside and φ alone maps
//! features of any scene — no fitting on targets.

mod loss;
mod mlp;

pub use loss::{ntxent_loss, ntxent_loss_grad};
pub use mlp::RefinerWeights;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::geometry::{PointCloud, SpatialIndex};
use crate::scan::FeaturedCloud;
use crate::{derive_seed, Error, Result};

/// Cross-view point pairs closer than the overlap threshold.
pub const CORRESPONDENCE_MAX_DIST: f64 = 0.01;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    /// Point id in the first view.
    pub a: usize,
    /// Point id in the second view.
    pub b: usize,
    pub dist: f64,
}

/// Correspondences mined between one ordered pair of views.
#[derive(Debug, Clone)]
pub struct CorrespondenceSet {
    pub views: (u16, u16),
    pub pairs: Vec<Correspondence>,
}

/// For each point of `cloud_a`, its nearest neighbor in the indexed view if
/// that neighbor lies strictly within `max_dist`. One-directional.
pub fn mine_correspondences(
    cloud_a: &PointCloud,
    index_b: &SpatialIndex,
    max_dist: f64,
) -> Vec<Correspondence> {
    let mut out = Vec::new();
    for (a, p) in cloud_a.points().iter().enumerate() {
        if let Some((b, dist)) = index_b.nearest(p) {
            if dist < max_dist {
                out.push(Correspondence { a, b, dist });
            }
        }
    }
    out
}

/// Mutual variant: a pair survives only if each point is the other's
/// nearest neighbor.
pub fn mine_correspondences_mutual(
    cloud_a: &PointCloud,
    index_a: &SpatialIndex,
    index_b: &SpatialIndex,
    max_dist: f64,
) -> Vec<Correspondence> {
    mine_correspondences(cloud_a, index_b, max_dist)
        .into_iter()
        .filter(|c| {
            index_a
                .nearest(index_b.point(c.b))
                .is_some_and(|(back, _)| back == c.a)
        })
        .collect()
}

/// Contrastive training configuration.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    /// Positive pairs per batch (N). Falls back to the largest available
    /// correspondence count when no view pair has this many.
    pub batch_pairs: usize,
    pub temperature: f64,
    pub step_size: f64,
    pub iterations: usize,
    pub seed: u64,
    /// Hidden width of φ; `None` means same as the channel count.
    pub hidden: Option<usize>,
    /// Projection dimension of g.
    pub projection: usize,
    /// Overlap threshold for mining, meters.
    pub max_pair_distance: f64,
    /// Require mutual nearest neighbors when mining.
    pub mutual: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            batch_pairs: 256,
            temperature: 0.07,
            step_size: 1e-3,
            iterations: 1000,
            seed: 0,
            hidden: None,
            projection: 128,
            max_pair_distance: CORRESPONDENCE_MAX_DIST,
            mutual: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.batch_pairs == 0 {
            return Err(Error::InvalidValue("batch_pairs must be >= 1".into()));
        }
        if !(self.temperature > 0.0) {
            return Err(Error::InvalidValue(format!(
                "temperature must be positive, got {}",
                self.temperature
            )));
        }
        if self.projection == 0 {
            return Err(Error::InvalidValue("projection dim must be >= 1".into()));
        }
        if !(self.max_pair_distance > 0.0) {
            return Err(Error::InvalidValue("max_pair_distance must be positive".into()));
        }
        Ok(())
    }
}

/// Mine correspondences for every unordered view pair (k < l).
pub fn mine_view_pairs(views: &[FeaturedCloud], cfg: &TrainConfig) -> Vec<CorrespondenceSet> {
    let indexes: Vec<SpatialIndex> = views.iter().map(|v| SpatialIndex::build(&v.cloud())).collect();
    let clouds: Vec<PointCloud> = views.iter().map(|v| v.cloud()).collect();
    let mut sets = Vec::new();
    for k in 0..views.len() {
        for l in (k + 1)..views.len() {
            let pairs = if cfg.mutual {
                mine_correspondences_mutual(&clouds[k], &indexes[k], &indexes[l], cfg.max_pair_distance)
            } else {
                mine_correspondences(&clouds[k], &indexes[l], cfg.max_pair_distance)
            };
            if !pairs.is_empty() {
                sets.push(CorrespondenceSet {
                    views: (k as u16, l as u16),
                    pairs,
                });
            }
        }
    }
    sets
}

/// Train φ and g on the per-view clouds of a single scene.
///
/// Each iteration samples one view pair (uniformly among pairs holding a
/// full batch of correspondences), draws N positive pairs without
/// replacement, and takes one adaptive-moment step. Deterministic for a
/// fixed seed; returns the weights and the per-iteration loss trace.
pub fn train_refiner(
    views: &[FeaturedCloud],
    cfg: &TrainConfig,
) -> Result<(RefinerWeights, Vec<f64>)> {
    cfg.validate()?;
    if views.len() < 2 {
        return Err(Error::InsufficientOverlap {
            max_dist: cfg.max_pair_distance,
        });
    }
    let c = views[0].channels();
    for v in views {
        if v.channels() != c {
            return Err(Error::Dimension {
                context: "train view channels",
                expected: c,
                actual: v.channels(),
            });
        }
    }
    let sets = mine_view_pairs(views, cfg);
    if sets.is_empty() {
        return Err(Error::InsufficientOverlap {
            max_dist: cfg.max_pair_distance,
        });
    }

    let largest = sets.iter().map(|s| s.pairs.len()).max().unwrap();
    let batch = cfg.batch_pairs.min(largest);
    let eligible: Vec<&CorrespondenceSet> =
        sets.iter().filter(|s| s.pairs.len() >= batch).collect();

    let hidden = cfg.hidden.unwrap_or(c);
    let mut weights = RefinerWeights::init(c, hidden, cfg.projection, derive_seed(cfg.seed, "refiner-init"))?;
    weights.seed = cfg.seed;
    let mut trace = Vec::with_capacity(cfg.iterations);
    if cfg.iterations == 0 {
        return Ok((weights, trace));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, "refiner-sampler"));
    let mut adam = mlp::Adam::new(weights.params().len(), cfg.step_size);
    // Per-eligible-pair shuffle buffers; partial Fisher-Yates each draw.
    let mut buffers: Vec<Vec<u32>> = eligible
        .iter()
        .map(|s| (0..s.pairs.len() as u32).collect())
        .collect();
    let mut x = vec![0.0; 2 * batch * c];

    for _ in 0..cfg.iterations {
        let which = rng.gen_range(0..eligible.len());
        let set = eligible[which];
        let buf = &mut buffers[which];
        for i in 0..batch {
            let j = rng.gen_range(i..buf.len());
            buf.swap(i, j);
        }
        let (vk, vl) = set.views;
        let (vk, vl) = (&views[vk as usize], &views[vl as usize]);
        for m in 0..batch {
            let pair = set.pairs[buf[m] as usize];
            x[2 * m * c..(2 * m + 1) * c].copy_from_slice(vk.feature(pair.a));
            x[(2 * m + 1) * c..(2 * m + 2) * c].copy_from_slice(vl.feature(pair.b));
        }
        let fwd = mlp::forward_batch(&weights, &x, 2 * batch);
        let (loss, d_proj) = ntxent_loss_grad(&fwd.projected, batch, cfg.projection, cfg.temperature)?;
        let grad = mlp::backward_batch(&weights, &x, &fwd, &d_proj);
        adam.update(weights.params_mut(), &grad);
        trace.push(loss);
    }
    weights.iterations = cfg.iterations;
    Ok((weights, trace))
}

/// Maximum relative error between analytic parameter gradients and central
/// finite differences over every parameter, on one batch.
///
/// Per-parameter deviations are normalized by the gradient's overall scale
/// (the larger ∞-norm of the two gradient vectors), so parameters whose
/// true gradient happens to be near zero do not drown the check in
/// finite-difference roundoff.
pub fn grad_check(
    weights: &RefinerWeights,
    batch: &[f64],
    n_pairs: usize,
    tau: f64,
    h: f64,
) -> Result<f64> {
    let rows = 2 * n_pairs;
    let p = weights.projection();
    let fwd = mlp::forward_batch(weights, batch, rows);
    let (_, d_proj) = ntxent_loss_grad(&fwd.projected, n_pairs, p, tau)?;
    let analytic = mlp::backward_batch(weights, batch, &fwd, &d_proj);

    let mut probe = weights.clone();
    let mut fd = vec![0.0; analytic.len()];
    for i in 0..analytic.len() {
        let orig = probe.params()[i];
        probe.params_mut()[i] = orig + h;
        let fp = ntxent_loss(
            &mlp::forward_batch(&probe, batch, rows).projected,
            n_pairs,
            p,
            tau,
        )?;
        probe.params_mut()[i] = orig - h;
        let fm = ntxent_loss(
            &mlp::forward_batch(&probe, batch, rows).projected,
            n_pairs,
            p,
            tau,
        )?;
        probe.params_mut()[i] = orig;
        fd[i] = (fp - fm) / (2.0 * h);
    }
    let scale = analytic
        .iter()
        .chain(&fd)
        .fold(0.0f64, |m, v| m.max(v.abs()))
        .max(1e-12);
    let max_rel = analytic
        .iter()
        .zip(&fd)
        .fold(0.0f64, |m, (a, n)| m.max((a - n).abs() / scale));
    Ok(max_rel)
}

/// Mean distance between unit-normalized feature vectors over point pairs.
///
/// Normalizing per vector makes the measure invariant to global feature
/// scale, so values before and after refinement are comparable.
pub fn normalized_pair_discrepancy(features: &[f64], channels: usize, pairs: &[(usize, usize)]) -> f64 {
    if pairs.is_empty() {
        return 0.0;
    }
    let unit = |i: usize| {
        let row = &features[i * channels..(i + 1) * channels];
        let n = row.iter().map(|v| v * v).sum::<f64>().sqrt();
        (row, if n > 0.0 { n } else { 1.0 })
    };
    let mut total = 0.0;
    for &(a, b) in pairs {
        let (ra, na) = unit(a);
        let (rb, nb) = unit(b);
        let mut d2 = 0.0;
        for (x, y) in ra.iter().zip(rb) {
            let d = x / na - y / nb;
            d2 += d * d;
        }
        total += d2.sqrt();
    }
    total / pairs.len() as f64
}

//! Continuous feature field over 3D space.
//!
//! A query point takes the inverse-squared-distance weighted blend of all
//! point features:
//!
//! ```text
//! f(q) = Σ_i w_i f_i,   w_i = (1/||q - x_i||²) / Σ_j (1/||q - x_j||²)
//! ```
//!
//! Queries landing within `eps_hit` of a data point return that point's
//! feature directly (the blend's singular limit). The field is immutable
//! and safe to query concurrently.

use nalgebra::Vector3;

use crate::geometry::SpatialIndex;
use crate::scan::FeaturedCloud;
use crate::{Error, Result};

/// Distance at which a query counts as hitting a data point exactly.
pub const DEFAULT_EPS_HIT: f64 = 1e-6;

/// Which points participate in the weighted blend.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum FieldMode {
    /// Sum over all N points. The reference mode.
    Exact,
    /// Sum over the k nearest points only. An approximation for large
    /// clouds; with k >= N it reproduces `Exact` bit for bit.
    Knn(usize),
}

/// Immutable queryable feature field: points + features + spatial index.
#[derive(Debug, Clone)]
pub struct FeatureField {
    cloud: FeaturedCloud,
    index: SpatialIndex,
    mode: FieldMode,
    eps_hit: f64,
}

impl FeatureField {
    pub fn build(cloud: FeaturedCloud, mode: FieldMode, eps_hit: f64) -> Result<Self> {
        if cloud.is_empty() {
            return Err(Error::EmptyCloud);
        }
        if let FieldMode::Knn(k) = mode {
            if k == 0 {
                return Err(Error::InvalidValue("knn mode needs k >= 1".into()));
            }
        }
        let index = SpatialIndex::build(&cloud.cloud());
        Ok(Self { cloud, index, mode, eps_hit })
    }

    pub fn from_cloud(cloud: FeaturedCloud) -> Result<Self> {
        Self::build(cloud, FieldMode::Exact, DEFAULT_EPS_HIT)
    }

    pub fn cloud(&self) -> &FeaturedCloud {
        &self.cloud
    }

    pub fn index(&self) -> &SpatialIndex {
        &self.index
    }

    pub fn channels(&self) -> usize {
        self.cloud.channels()
    }

    pub fn mode(&self) -> FieldMode {
        self.mode
    }

    pub fn eps_hit(&self) -> f64 {
        self.eps_hit
    }

    /// Feature of a query point.
    pub fn query(&self, q: &Vector3<f64>) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.channels()];
        self.query_into(q, &mut out)?;
        Ok(out)
    }

    /// Like [`FeatureField::query`] but writing into a caller buffer.
    pub fn query_into(&self, q: &Vector3<f64>, out: &mut [f64]) -> Result<()> {
        if !q.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidValue("non-finite query point".into()));
        }
        let (nearest, dist) = self.index.nearest(q).expect("field cloud is non-empty");
        if dist <= self.eps_hit {
            out.copy_from_slice(self.cloud.feature(nearest));
            return Ok(());
        }
        match self.mode {
            FieldMode::Exact => self.accumulate(q, None, out),
            FieldMode::Knn(k) if k >= self.cloud.len() => self.accumulate(q, None, out),
            FieldMode::Knn(k) => {
                let mut ids = self.index.knn(q, k);
                ids.sort_unstable();
                self.accumulate(q, Some(&ids), out)
            }
        }
        Ok(())
    }

    /// Inverse-squared-distance blend over `ids` (ascending) or all points.
    /// Summation order is ascending point id for reproducibility.
    fn accumulate(&self, q: &Vector3<f64>, ids: Option<&[usize]>, out: &mut [f64]) {
        let c = self.channels();
        out.fill(0.0);
        let points = self.cloud.points();
        let feats = self.cloud.features();
        let mut total = 0.0;
        let mut add = |i: usize, out: &mut [f64]| {
            let d2 = (points[i] - q).norm_squared();
            let w = 1.0 / d2;
            total += w;
            let row = &feats[i * c..(i + 1) * c];
            for (o, &f) in out.iter_mut().zip(row) {
                *o += w * f;
            }
        };
        match ids {
            Some(ids) => {
                for &i in ids {
                    add(i, out);
                }
            }
            None => {
                for i in 0..points.len() {
                    add(i, out);
                }
            }
        }
        for o in out.iter_mut() {
            *o /= total;
        }
    }

    /// Row-wise batch query; row m equals `query(Q[m])` exactly.
    pub fn query_batch(&self, queries: &[Vector3<f64>]) -> Result<Vec<f64>> {
        let c = self.channels();
        let mut out = vec![0.0; queries.len() * c];
        for (m, q) in queries.iter().enumerate() {
            self.query_into(q, &mut out[m * c..(m + 1) * c])?;
        }
        Ok(out)
    }

    /// Analytic spatial gradient ∂f/∂q, returned as a C x 3 row-major
    /// matrix. Errors within `eps_hit` of a data point, where the blend is
    /// singular.
    pub fn query_gradient(&self, q: &Vector3<f64>) -> Result<Vec<f64>> {
        let c = self.channels();
        let mut value = vec![0.0; c];
        let mut grad = vec![0.0; c * 3];
        self.query_gradient_into(q, &mut value, &mut grad)?;
        Ok(grad)
    }

    /// Gradient plus the field value in one pass (the gradient needs the
    /// value anyway).
    ///
    /// With g_i = 1/d_i² and G = Σ g_j:
    ///   ∂f/∂q = (1/G) Σ_i (f_i - f(q)) ⊗ ∂g_i/∂q,
    ///   ∂g_i/∂q = -2 (q - x_i) / d_i⁴.
    pub fn query_gradient_into(
        &self,
        q: &Vector3<f64>,
        value: &mut [f64],
        grad: &mut [f64],
    ) -> Result<()> {
        if !q.iter().all(|c| c.is_finite()) {
            return Err(Error::InvalidValue("non-finite query point".into()));
        }
        let (nearest, dist) = self.index.nearest(q).expect("field cloud is non-empty");
        if dist <= self.eps_hit {
            return Err(Error::Singular {
                index: nearest,
                eps: self.eps_hit,
            });
        }
        let c = self.channels();
        let knn_ids;
        let ids: Option<&[usize]> = match self.mode {
            FieldMode::Exact => None,
            FieldMode::Knn(k) if k >= self.cloud.len() => None,
            FieldMode::Knn(k) => {
                let mut ids = self.index.knn(q, k);
                ids.sort_unstable();
                knn_ids = ids;
                Some(&knn_ids)
            }
        };
        self.accumulate(q, ids, value);

        let points = self.cloud.points();
        let feats = self.cloud.features();
        grad.fill(0.0);
        let mut total = 0.0;
        let mut add = |i: usize, grad: &mut [f64]| {
            let delta = q - points[i];
            let d2 = delta.norm_squared();
            let g = 1.0 / d2;
            total += g;
            // ∂g_i/∂q = -2 δ / d⁴ = -2 g² δ
            let scale = -2.0 * g * g;
            let row = &feats[i * c..(i + 1) * c];
            for ch in 0..c {
                let coef = (row[ch] - value[ch]) * scale;
                grad[ch * 3] += coef * delta.x;
                grad[ch * 3 + 1] += coef * delta.y;
                grad[ch * 3 + 2] += coef * delta.z;
            }
        };
        match ids {
            Some(ids) => {
                for &i in ids {
                    add(i, grad);
                }
            }
            None => {
                for i in 0..points.len() {
                    add(i, grad);
                }
            }
        }
        for g in grad.iter_mut() {
            *g /= total;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::scan::transform_featured_cloud;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn cloud_from(points: Vec<Vector3<f64>>, feats: Vec<f64>, c: usize) -> FeaturedCloud {
        let n = points.len();
        FeaturedCloud::new(points, feats, c, vec![0; n], 1, None).unwrap()
    }

    fn random_cloud(seed: u64, n: usize, c: usize) -> FeaturedCloud {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let points = (0..n)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                    rng.gen_range(-0.5..0.5),
                )
            })
            .collect();
        let feats = (0..n * c).map(|_| rng.gen_range(-2.0..2.0)).collect();
        cloud_from(points, feats, c)
    }

    #[test]
    fn empty_cloud_is_rejected() {
        let cloud = FeaturedCloud::new(vec![], vec![], 1, vec![], 1, None).unwrap();
        assert!(matches!(
            FeatureField::from_cloud(cloud),
            Err(Error::EmptyCloud)
        ));
    }

    #[test]
    fn exact_hit_returns_point_feature() {
        let cloud = cloud_from(
            vec![Vector3::zeros(), Vector3::x()],
            vec![1.0, 2.0, 3.0, 4.0],
            2,
        );
        let field = FeatureField::from_cloud(cloud).unwrap();
        assert_eq!(field.query(&Vector3::x()).unwrap(), vec![3.0, 4.0]);
        // Within eps_hit of a point also snaps.
        let near = Vector3::new(1e-8, 0.0, 0.0);
        assert_eq!(field.query(&near).unwrap(), vec![1.0, 2.0]);
    }

    #[test]
    fn equidistant_two_point_blend() {
        let cloud = cloud_from(
            vec![Vector3::new(-1.0, 0.0, 0.0), Vector3::new(1.0, 0.0, 0.0)],
            vec![1.0, 0.0, 0.0, 1.0],
            2,
        );
        let field = FeatureField::from_cloud(cloud).unwrap();
        let f = field.query(&Vector3::new(0.0, 0.3, 0.0)).unwrap();
        assert!((f[0] - 0.5).abs() < 1e-15);
        assert!((f[1] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn hand_evaluated_weights() {
        // Distances 1 and 2, f = (1, 0): weights (0.8, 0.2), blend 0.8.
        let cloud = cloud_from(
            vec![Vector3::new(1.0, 0.0, 0.0), Vector3::new(-2.0, 0.0, 0.0)],
            vec![1.0, 0.0],
            1,
        );
        let field = FeatureField::from_cloud(cloud).unwrap();
        let f = field.query(&Vector3::zeros()).unwrap();
        assert!((f[0] - 0.8).abs() < 1e-15, "got {}", f[0]);
    }

    #[test]
    fn batch_matches_scalar_queries_exactly() {
        let cloud = random_cloud(3, 60, 4);
        let field = FeatureField::from_cloud(cloud).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let queries: Vec<Vector3<f64>> = (0..100)
            .map(|_| {
                Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                )
            })
            .collect();
        let batch = field.query_batch(&queries).unwrap();
        for (m, q) in queries.iter().enumerate() {
            let single = field.query(q).unwrap();
            assert_eq!(&batch[m * 4..(m + 1) * 4], single.as_slice());
        }
        // Duplicated rows give duplicated outputs.
        let twice = field.query_batch(&[queries[0], queries[0]]).unwrap();
        assert_eq!(&twice[..4], &twice[4..]);
    }

    #[test]
    fn knn_with_full_k_matches_exact_bitwise() {
        let cloud = random_cloud(5, 40, 3);
        let exact = FeatureField::from_cloud(cloud.clone()).unwrap();
        let knn =
            FeatureField::build(cloud, FieldMode::Knn(40), DEFAULT_EPS_HIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        for _ in 0..50 {
            let q = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            assert_eq!(exact.query(&q).unwrap(), knn.query(&q).unwrap());
        }
    }

    #[test]
    fn knn_truncation_deviation_is_reported_not_asserted() {
        let cloud = random_cloud(8, 200, 2);
        let exact = FeatureField::from_cloud(cloud.clone()).unwrap();
        let knn = FeatureField::build(cloud, FieldMode::Knn(16), DEFAULT_EPS_HIT).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut max_dev = 0.0f64;
        for _ in 0..50 {
            let q = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            let a = exact.query(&q).unwrap();
            let b = knn.query(&q).unwrap();
            for (x, y) in a.iter().zip(&b) {
                max_dev = max_dev.max((x - y).abs());
            }
        }
        println!("knn k=16 vs exact max abs deviation: {max_dev:.3e}");
    }

    #[test]
    fn weights_sum_to_one_and_output_is_convex() {
        for seed in 0..20 {
            let c = 3;
            let cloud = random_cloud(100 + seed, 80, c);
            let field = FeatureField::from_cloud(cloud.clone()).unwrap();
            let mut rng = ChaCha8Rng::seed_from_u64(200 + seed);
            for _ in 0..10 {
                let q = Vector3::new(
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                    rng.gen_range(-1.0..1.0),
                );
                let f = field.query(&q).unwrap();
                for ch in 0..c {
                    let lo = (0..cloud.len())
                        .map(|i| cloud.feature(i)[ch])
                        .fold(f64::INFINITY, f64::min);
                    let hi = (0..cloud.len())
                        .map(|i| cloud.feature(i)[ch])
                        .fold(f64::NEG_INFINITY, f64::max);
                    let slack = 1e-12 * (1.0 + lo.abs().max(hi.abs()));
                    assert!(f[ch] >= lo - slack && f[ch] <= hi + slack);
                }
            }
        }
    }

    #[test]
    fn rigid_equivariance() {
        let cloud = random_cloud(12, 50, 3);
        let field = FeatureField::from_cloud(cloud.clone()).unwrap();
        let t = crate::geometry::RigidTransform::from_axis_angle(
            &Vector3::new(0.2, 1.0, -0.4),
            0.9,
            Vector3::new(0.3, -0.1, 0.7),
        );
        let moved = transform_featured_cloud(&cloud, &t);
        let moved_field = FeatureField::from_cloud(moved).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(13);
        for _ in 0..30 {
            let q = Vector3::new(
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
                rng.gen_range(-1.0..1.0),
            );
            let a = field.query(&q).unwrap();
            let b = moved_field.query(&t.apply(&q)).unwrap();
            for (x, y) in a.iter().zip(&b) {
                assert!((x - y).abs() <= 1e-9, "{x} vs {y}");
            }
        }
    }

    #[test]
    fn gradient_of_single_point_field_is_zero() {
        let cloud = cloud_from(vec![Vector3::zeros()], vec![5.0], 1);
        let field = FeatureField::from_cloud(cloud).unwrap();
        let g = field.query_gradient(&Vector3::new(0.5, 0.2, -0.1)).unwrap();
        assert!(g.iter().all(|&v| v.abs() < 1e-15));
    }

    #[test]
    fn gradient_errors_at_data_points() {
        let cloud = cloud_from(vec![Vector3::zeros(), Vector3::x()], vec![1.0, 2.0], 1);
        let field = FeatureField::from_cloud(cloud).unwrap();
        assert!(matches!(
            field.query_gradient(&Vector3::zeros()),
            Err(Error::Singular { .. })
        ));
    }

    fn fd_gradient(field: &FeatureField, q: &Vector3<f64>, h: f64) -> Vec<f64> {
        let c = field.channels();
        let mut grad = vec![0.0; c * 3];
        for axis in 0..3 {
            let mut qp = *q;
            let mut qm = *q;
            qp[axis] += h;
            qm[axis] -= h;
            let fp = field.query(&qp).unwrap();
            let fm = field.query(&qm).unwrap();
            for ch in 0..c {
                grad[ch * 3 + axis] = (fp[ch] - fm[ch]) / (2.0 * h);
            }
        }
        grad
    }

    #[test]
    fn gradient_matches_finite_differences() {
        let cloud = random_cloud(21, 50, 3);
        let field = FeatureField::from_cloud(cloud).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(22);
        let mut checked = 0;
        while checked < 25 {
            let q = Vector3::new(
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
                rng.gen_range(-0.8..0.8),
            );
            if field.index().nearest(&q).unwrap().1 < 1e-3 {
                continue;
            }
            checked += 1;
            let analytic = field.query_gradient(&q).unwrap();
            let numeric = fd_gradient(&field, &q, 1e-6);
            for (a, n) in analytic.iter().zip(&numeric) {
                let denom = a.abs().max(n.abs()).max(1e-9);
                assert!(
                    (a - n).abs() / denom <= 1e-6,
                    "analytic {a} vs fd {n}"
                );
            }
        }
    }

    #[test]
    fn symmetric_two_point_gradient_closed_form() {
        // Points at ±d/2 on x, C = 1. At the midpoint offset along x by s,
        // the closed form of the blend is differentiable; compare to FD.
        let d = 1.0;
        let cloud = cloud_from(
            vec![Vector3::new(-d / 2.0, 0.0, 0.0), Vector3::new(d / 2.0, 0.0, 0.0)],
            vec![1.0, -1.0],
            1,
        );
        let field = FeatureField::from_cloud(cloud).unwrap();
        let q = Vector3::new(0.1, 0.0, 0.0);
        let analytic = field.query_gradient(&q).unwrap();
        let numeric = fd_gradient(&field, &q, 1e-6);
        for (a, n) in analytic.iter().zip(&numeric) {
            let denom = a.abs().max(n.abs()).max(1e-9);
            assert!((a - n).abs() / denom <= 1e-6);
        }
        // Midpoint gradient along the axis for f = (f1, f2) = (1, -1):
        // f(x) near 0 is (f1 (x-d/2)² + f2 (x+d/2)²)/((x-d/2)²+(x+d/2)²);
        // derivative at x=0 is -2(f1-f2)/d... sign checked numerically.
        let mid = field.query_gradient(&Vector3::zeros()).unwrap();
        let fd_mid = fd_gradient(&field, &Vector3::zeros(), 1e-6);
        assert!((mid[0] - fd_mid[0]).abs() / fd_mid[0].abs().max(1e-9) <= 1e-6);
        assert!(mid[1].abs() < 1e-12 && mid[2].abs() < 1e-12);
    }
}

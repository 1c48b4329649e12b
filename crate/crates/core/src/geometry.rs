//! Point-cloud primitives, rotation algebra, furthest point sampling and
//! exhaustive k-nearest-neighbour queries.

use nalgebra::{Matrix3, Rotation3, Vector3};

use crate::error::{Error, Result};

pub type Point3 = Vector3<f64>;

/// Below this angle the Rodrigues coefficients switch to their Taylor series.
const SMALL_ANGLE: f64 = 1e-8;

/// Ordered set of 3D points, in meters.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct PointCloud {
    points: Vec<Point3>,
}

impl PointCloud {
    /// Builds a cloud, rejecting non-finite coordinates.
    pub fn new(points: Vec<Point3>) -> Result<Self> {
        if let Some(i) = points.iter().position(|p| !p.iter().all(|c| c.is_finite())) {
            return Err(Error::NonFinite(format!("point {i}")));
        }
        Ok(Self { points })
    }

    pub fn points(&self) -> &[Point3] {
        &self.points
    }

    pub fn into_points(self) -> Vec<Point3> {
        self.points
    }

    pub fn len(&self) -> usize {
        self.points.len()
    }

    pub fn is_empty(&self) -> bool {
        self.points.is_empty()
    }

    pub fn centroid(&self) -> Option<Point3> {
        if self.points.is_empty() {
            return None;
        }
        let sum = self.points.iter().fold(Point3::zeros(), |acc, p| acc + p);
        Some(sum / self.points.len() as f64)
    }

    /// Axis-aligned bounds as `(min, max)`.
    pub fn bounds(&self) -> Option<(Point3, Point3)> {
        let first = *self.points.first()?;
        Some(self.points.iter().fold((first, first), |(lo, hi), p| {
            (lo.inf(p), hi.sup(p))
        }))
    }
}

impl From<PointCloud> for Vec<Point3> {
    fn from(c: PointCloud) -> Self {
        c.points
    }
}

/// Rotation plus translation, `x -> R x + t`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RigidTransform {
    pub rotation: Matrix3<f64>,
    pub translation: Vector3<f64>,
}

impl Default for RigidTransform {
    fn default() -> Self {
        Self::identity()
    }
}

impl RigidTransform {
    pub fn identity() -> Self {
        Self {
            rotation: Matrix3::identity(),
            translation: Vector3::zeros(),
        }
    }

    pub fn new(rotation: Matrix3<f64>, translation: Vector3<f64>) -> Self {
        Self {
            rotation,
            translation,
        }
    }

    pub fn from_axis_angle(omega: &Vector3<f64>, translation: Vector3<f64>) -> Self {
        Self::new(exp_so3(omega), translation)
    }

    pub fn apply(&self, p: &Point3) -> Point3 {
        self.rotation * p + self.translation
    }

    /// `self ∘ other`: applies `other` first.
    pub fn compose(&self, other: &RigidTransform) -> RigidTransform {
        RigidTransform {
            rotation: self.rotation * other.rotation,
            translation: self.rotation * other.translation + self.translation,
        }
    }

    pub fn inverse(&self) -> RigidTransform {
        let rt = self.rotation.transpose();
        RigidTransform {
            rotation: rt,
            translation: -(rt * self.translation),
        }
    }

    /// Largest deviation of the rotation block from orthonormality, plus
    /// the determinant error.
    pub fn orthonormality_error(&self) -> f64 {
        let r = &self.rotation;
        (r.transpose() * r - Matrix3::identity()).abs().max() + (r.determinant() - 1.0).abs()
    }
}

/// Skew-symmetric cross-product matrix: `skew(v) * w == v.cross(w)`.
pub fn skew(v: &Vector3<f64>) -> Matrix3<f64> {
    Matrix3::new(0.0, -v.z, v.y, v.z, 0.0, -v.x, -v.y, v.x, 0.0)
}

/// Rodrigues exponential map from an axis-angle vector (radians) to SO(3).
pub fn exp_so3(omega: &Vector3<f64>) -> Matrix3<f64> {
    let theta_sq = omega.norm_squared();
    let theta = theta_sq.sqrt();
    let (a, b) = if theta < SMALL_ANGLE {
        (1.0 - theta_sq / 6.0, 0.5 - theta_sq / 24.0)
    } else {
        (theta.sin() / theta, (1.0 - theta.cos()) / theta_sq)
    };
    let k = skew(omega);
    Matrix3::identity() + k * a + k * k * b
}

/// Axis-angle vector of a rotation matrix (inverse of [`exp_so3`] for
/// angles below π).
pub fn log_so3(rotation: &Matrix3<f64>) -> Vector3<f64> {
    Rotation3::from_matrix_unchecked(*rotation).scaled_axis()
}

/// Nearest rotation in the Frobenius sense (polar decomposition).
pub fn project_to_rotation(m: &Matrix3<f64>) -> Matrix3<f64> {
    let svd = m.svd(true, true);
    let (u, v_t) = match (svd.u, svd.v_t) {
        (Some(u), Some(v_t)) => (u, v_t),
        _ => return Matrix3::identity(),
    };
    let mut d = Matrix3::identity();
    if (u * v_t).determinant() < 0.0 {
        d[(2, 2)] = -1.0;
    }
    u * d * v_t
}

/// Uniform furthest point sampling.
///
/// Starts at `start_index` and repeatedly adds the point farthest from the
/// selected set until every point lies within `coverage` of a node. Ties go
/// to the lowest index.
pub fn furthest_point_sample(
    cloud: &PointCloud,
    coverage: f64,
    start_index: usize,
) -> Result<Vec<usize>> {
    if cloud.is_empty() {
        return Err(Error::Empty("point cloud"));
    }
    if !(coverage > 0.0 && coverage.is_finite()) {
        return Err(Error::invalid("coverage", "must be positive and finite"));
    }
    if start_index >= cloud.len() {
        return Err(Error::invalid(
            "start_index",
            format!("{start_index} out of range for {} points", cloud.len()),
        ));
    }
    let pts = cloud.points();
    let cov_sq = coverage * coverage;
    let mut nearest_sq: Vec<f64> = pts
        .iter()
        .map(|p| (p - pts[start_index]).norm_squared())
        .collect();
    let mut nodes = vec![start_index];
    loop {
        let (far, far_sq) = nearest_sq
            .iter()
            .enumerate()
            .fold((0usize, f64::NEG_INFINITY), |best, (i, &d)| {
                if d > best.1 {
                    (i, d)
                } else {
                    best
                }
            });
        if far_sq <= cov_sq {
            break;
        }
        nodes.push(far);
        let v = pts[far];
        for (d, p) in nearest_sq.iter_mut().zip(pts) {
            let dn = (p - v).norm_squared();
            if dn < *d {
                *d = dn;
            }
        }
    }
    Ok(nodes)
}

/// A neighbour returned by [`knn`]: index into the searched set plus
/// Euclidean distance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Neighbor {
    pub index: usize,
    pub distance: f64,
}

/// Exhaustive k-nearest-neighbour query, ascending by distance, ties by
/// lower index.
pub fn knn(query: &Point3, points: &[Point3], k: usize) -> Result<Vec<Neighbor>> {
    if k == 0 {
        return Err(Error::invalid("k", "must be at least 1"));
    }
    if k > points.len() {
        return Err(Error::InsufficientPoints {
            requested: k,
            available: points.len(),
        });
    }
    let mut scored: Vec<(f64, usize)> = points
        .iter()
        .enumerate()
        .map(|(i, p)| ((p - query).norm_squared(), i))
        .collect();
    let cmp = |a: &(f64, usize), b: &(f64, usize)| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1));
    if k < scored.len() {
        scored.select_nth_unstable_by(k - 1, cmp);
        scored.truncate(k);
    }
    scored.sort_unstable_by(cmp);
    Ok(scored
        .into_iter()
        .map(|(d, index)| Neighbor {
            index,
            distance: d.sqrt(),
        })
        .collect())
}

/// [`knn`] against a [`PointCloud`].
pub fn knn_cloud(query: &Point3, cloud: &PointCloud, k: usize) -> Result<Vec<Neighbor>> {
    knn(query, cloud.points(), k)
}

#[cfg(test)]
mod tests {
    use std::f64::consts::{FRAC_PI_2, PI};

    use approx::assert_relative_eq;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;

    fn v(x: f64, y: f64, z: f64) -> Vector3<f64> {
        Vector3::new(x, y, z)
    }

    #[test]
    fn exp_of_zero_is_identity() {
        assert_eq!(exp_so3(&Vector3::zeros()), Matrix3::identity());
    }

    #[test]
    fn exp_quarter_turn_about_z() {
        let r = exp_so3(&v(0.0, 0.0, FRAC_PI_2));
        assert_relative_eq!(r * v(1.0, 0.0, 0.0), v(0.0, 1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_half_turn_about_x() {
        let r = exp_so3(&v(PI, 0.0, 0.0));
        assert_relative_eq!(r * v(0.0, 1.0, 0.0), v(0.0, -1.0, 0.0), epsilon = 1e-12);
    }

    #[test]
    fn exp_small_angle_branch_is_continuous() {
        let w = v(3e-9, -2e-9, 1e-9);
        let big = v(3e-7, -2e-7, 1e-7);
        // first-order behaviour: R ≈ I + skew(w)
        assert_relative_eq!(exp_so3(&w), Matrix3::identity() + skew(&w), epsilon = 1e-16);
        assert_relative_eq!(exp_so3(&big), Matrix3::identity() + skew(&big), epsilon = 1e-12);
    }

    #[test]
    fn skew_basics() {
        assert_eq!(skew(&Vector3::zeros()), Matrix3::zeros());
        assert_eq!(skew(&v(1.0, 0.0, 0.0)) * v(0.0, 1.0, 0.0), v(0.0, 0.0, 1.0));
    }

    #[test]
    fn skew_matches_cross_product() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        for _ in 0..100 {
            let a = v(rng.random(), rng.random(), rng.random()) * 4.0 - v(2.0, 2.0, 2.0);
            let b = v(rng.random(), rng.random(), rng.random()) * 4.0 - v(2.0, 2.0, 2.0);
            // cross product written out by hand as the oracle
            let cross = v(
                a.y * b.z - a.z * b.y,
                a.z * b.x - a.x * b.z,
                a.x * b.y - a.y * b.x,
            );
            assert_relative_eq!(skew(&a) * b, cross, epsilon = 1e-14);
            assert_eq!(skew(&a).transpose(), -skew(&a));
        }
    }

    #[test]
    fn log_inverts_exp() {
        let w = v(0.3, -0.2, 1.1);
        assert_relative_eq!(log_so3(&exp_so3(&w)), w, epsilon = 1e-12);
    }

    #[test]
    fn projection_restores_orthonormality() {
        let r = exp_so3(&v(0.2, 0.4, -0.1)) + Matrix3::from_element(1e-4);
        let p = project_to_rotation(&r);
        let t = RigidTransform::new(p, Vector3::zeros());
        assert!(t.orthonormality_error() < 1e-12);
    }

    #[test]
    fn transform_compose_and_inverse() {
        let a = RigidTransform::from_axis_angle(&v(0.1, 0.2, 0.3), v(1.0, 2.0, 3.0));
        let id = a.compose(&a.inverse());
        assert_relative_eq!(id.rotation, Matrix3::identity(), epsilon = 1e-12);
        assert_relative_eq!(id.translation, Vector3::zeros(), epsilon = 1e-12);
    }

    fn line(xs: &[f64]) -> PointCloud {
        PointCloud::new(xs.iter().map(|&x| v(x, 0.0, 0.0)).collect()).unwrap()
    }

    #[test]
    fn fps_single_point() {
        assert_eq!(furthest_point_sample(&line(&[0.0]), 0.1, 0).unwrap(), vec![0]);
    }

    #[test]
    fn fps_hand_traced_order() {
        let nodes = furthest_point_sample(&line(&[0.0, 1.0, 2.0]), 0.6, 0).unwrap();
        assert_eq!(nodes, vec![0, 2, 1]);
    }

    #[test]
    fn fps_all_covered_by_start() {
        let nodes = furthest_point_sample(&line(&[0.0, 0.1, 0.2]), 0.5, 1).unwrap();
        assert_eq!(nodes, vec![1]);
    }

    #[test]
    fn fps_rejects_bad_arguments() {
        assert!(furthest_point_sample(&line(&[0.0]), 0.0, 0).is_err());
        assert!(furthest_point_sample(&line(&[0.0]), 0.1, 3).is_err());
        assert!(furthest_point_sample(&PointCloud::default(), 0.1, 0).is_err());
    }

    #[test]
    fn fps_tie_goes_to_lowest_index() {
        // 2 and 3 are both at distance 1 from the start
        let nodes = furthest_point_sample(&line(&[0.0, 0.1, 1.0, -1.0]), 0.5, 0).unwrap();
        assert_eq!(nodes, vec![0, 2, 3]);
    }

    #[test]
    fn cloud_rejects_nan() {
        assert!(PointCloud::new(vec![v(f64::NAN, 0.0, 0.0)]).is_err());
        assert!(PointCloud::new(vec![v(0.0, f64::INFINITY, 0.0)]).is_err());
    }

    #[test]
    fn knn_full_and_ties() {
        let c = line(&[0.0, 1.0, -1.0, 3.0]);
        let all = knn_cloud(&Vector3::zeros(), &c, 4).unwrap();
        let idx: Vec<_> = all.iter().map(|n| n.index).collect();
        assert_eq!(idx, vec![0, 1, 2, 3]);
        let two = knn_cloud(&v(0.0, 0.0, 0.0), &line(&[1.0, -1.0]), 1).unwrap();
        assert_eq!(two[0].index, 0);
        assert!(matches!(
            knn_cloud(&Vector3::zeros(), &c, 5),
            Err(Error::InsufficientPoints { .. })
        ));
    }

    fn random_cloud(rng: &mut ChaCha8Rng, n: usize) -> PointCloud {
        PointCloud::new(
            (0..n)
                .map(|_| v(rng.random(), rng.random(), rng.random()))
                .collect(),
        )
        .unwrap()
    }

    fn brute_knn(q: &Point3, pts: &[Point3], k: usize) -> Vec<usize> {
        // full sort of all distances; stable sort keeps index order on ties
        let mut all: Vec<(usize, f64)> = pts
            .iter()
            .enumerate()
            .map(|(i, p)| (i, ((p.x - q.x).powi(2) + (p.y - q.y).powi(2) + (p.z - q.z).powi(2))))
            .collect();
        all.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap());
        all.into_iter().take(k).map(|(i, _)| i).collect()
    }

    #[test]
    fn knn_matches_exhaustive_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let cloud = random_cloud(&mut rng, 50);
        for _ in 0..20 {
            let q = v(rng.random(), rng.random(), rng.random());
            let got: Vec<_> = knn_cloud(&q, &cloud, 6).unwrap().iter().map(|n| n.index).collect();
            assert_eq!(got, brute_knn(&q, cloud.points(), 6));
        }
    }

    #[test]
    fn knn_matches_oracle_on_large_cloud() {
        let mut rng = ChaCha8Rng::seed_from_u64(12);
        let cloud = random_cloud(&mut rng, 10_000);
        for _ in 0..5 {
            let q = v(rng.random(), rng.random(), rng.random());
            let got: Vec<_> = knn_cloud(&q, &cloud, 16).unwrap().iter().map(|n| n.index).collect();
            assert_eq!(got, brute_knn(&q, cloud.points(), 16));
        }
    }

    proptest! {
        #[test]
        fn exp_is_isometry(wx in -4.0..4.0f64, wy in -4.0..4.0f64, wz in -4.0..4.0f64,
                           x in -10.0..10.0f64, y in -10.0..10.0f64, z in -10.0..10.0f64) {
            let w = v(wx, wy, wz);
            let r = exp_so3(&w);
            let p = v(x, y, z);
            prop_assert!(((r * p).norm() - p.norm()).abs() < 1e-9);
            prop_assert!((r * exp_so3(&-w) - Matrix3::identity()).abs().max() < 1e-9);
            prop_assert!((r.determinant() - 1.0).abs() < 1e-9);
        }

        #[test]
        fn fps_covers_and_is_idempotent(seed in 0u64..500, cov in 0.05..0.6f64) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let cloud = random_cloud(&mut rng, 60);
            let nodes = furthest_point_sample(&cloud, cov, 0).unwrap();
            prop_assert_eq!(nodes[0], 0);
            for p in cloud.points() {
                let d = nodes.iter().map(|&j| (p - cloud.points()[j]).norm()).fold(f64::INFINITY, f64::min);
                prop_assert!(d <= cov);
            }
            let again = furthest_point_sample(&cloud, cov, 0).unwrap();
            prop_assert_eq!(&again, &nodes);
            let sub = PointCloud::new(nodes.iter().map(|&j| cloud.points()[j]).collect()).unwrap();
            let mut rerun = furthest_point_sample(&sub, cov, 0).unwrap();
            rerun.sort_unstable();
            prop_assert_eq!(rerun, (0..nodes.len()).collect::<Vec<_>>());
        }
    }
}

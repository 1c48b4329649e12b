//! Focal classification loss and local feature-consistency loss, each with
//! its analytic gradient.

use ndarray::{Array2, ArrayView2, Zip};

use crate::defgraph::DeformationGraph;
use crate::error::{Error, Result};

/// Scores are clamped to `[ε, 1−ε]` before any logarithm.
pub const SCORE_EPS: f64 = 1e-7;

fn clamp_score(score: f64) -> f64 {
    score.clamp(SCORE_EPS, 1.0 - SCORE_EPS)
}

/// `−s*(1−s)^γ log s − (1−s*) s^γ log(1−s)`.
pub fn focal_loss(score: f64, label: bool, gamma: f64) -> f64 {
    let s = clamp_score(score);
    if label {
        -(1.0 - s).powf(gamma) * s.ln()
    } else {
        -s.powf(gamma) * (1.0 - s).ln()
    }
}

/// Derivative of [`focal_loss`] with respect to the logit behind `score`
/// (zero where the clamp is active).
pub fn focal_loss_logit_grad(score: f64, label: bool, gamma: f64) -> f64 {
    if score != clamp_score(score) {
        return 0.0;
    }
    let s = score;
    let q = 1.0 - s;
    if label {
        gamma * s * q.powf(gamma) * s.ln() - q.powf(gamma + 1.0)
    } else {
        -gamma * s.powf(gamma) * q * q.ln() + s.powf(gamma + 1.0)
    }
}

/// Mean focal loss and its per-logit gradient.
pub fn classification_loss(scores: &[f64], labels: &[bool], gamma: f64) -> (f64, Vec<f64>) {
    let n = scores.len() as f64;
    let loss = scores.iter().zip(labels).map(|(&s, &l)| focal_loss(s, l, gamma)).sum::<f64>() / n;
    let grad = scores
        .iter()
        .zip(labels)
        .map(|(&s, &l)| focal_loss_logit_grad(s, l, gamma) / n)
        .collect();
    (loss, grad)
}

#[derive(Debug, Clone)]
pub struct ConsistencyLoss {
    pub value: f64,
    pub d_features: Array2<f64>,
    pub d_sigma_f: f64,
}

/// Unit-normalized rows; fails on a zero row.
pub fn normalize_rows(features: &ArrayView2<f64>) -> Result<(Array2<f64>, Vec<f64>)> {
    let norms: Vec<f64> = features.outer_iter().map(|r| r.dot(&r).sqrt()).collect();
    if let Some(row) = norms.iter().position(|&n| !(n > 0.0 && n.is_finite())) {
        return Err(Error::DegenerateFeature { row });
    }
    let mut unit = features.to_owned();
    for (mut r, &n) in unit.outer_iter_mut().zip(&norms) {
        r /= n;
    }
    Ok((unit, norms))
}

/// `1/|V|² Σ_j 1/|C_j|² Σ_{x,y ∈ C_j} |δ_xy − δ*_xy|` with
/// `δ = [1 − ‖ĥ_x − ĥ_y‖² / σ_f²]₊` and `δ* = 1` iff both are inliers.
pub fn consistency_loss(
    features: &ArrayView2<f64>,
    graph: &DeformationGraph,
    labels: &[bool],
    sigma_f: f64,
) -> Result<ConsistencyLoss> {
    if graph.node_count() == 0 {
        return Err(Error::Empty("deformation graph"));
    }
    let (unit, norms) = normalize_rows(features)?;
    let s2 = sigma_f * sigma_f;
    let v2 = (graph.node_count() * graph.node_count()) as f64;

    let per_node = crate::par::map_slice(&graph.node_to_members, |members| {
        let mut value = 0.0;
        let mut d_sigma = 0.0;
        let mut d_unit: Vec<(usize, usize, f64)> = Vec::new();
        if members.is_empty() {
            return (value, d_sigma, d_unit);
        }
        let w = 1.0 / (v2 * (members.len() * members.len()) as f64);
        for &x in members {
            for &y in members {
                let diff = &unit.row(x) - &unit.row(y);
                let d2 = diff.dot(&diff);
                let raw = 1.0 - d2 / s2;
                let delta = raw.max(0.0);
                let target = if labels[x] && labels[y] { 1.0 } else { 0.0 };
                value += w * (delta - target).abs();
                if raw > 0.0 && x != y {
                    // d|δ−δ*|/dδ is +1 against a 0 target and −1 against 1
                    let sign = if target == 0.0 { 1.0 } else { -1.0 };
                    // dδ/d(d²) = −1/σ², dδ/dσ = 2 d²/σ³
                    d_unit.push((x, y, -sign * w / s2));
                    d_sigma += sign * w * 2.0 * d2 / (s2 * sigma_f);
                }
            }
        }
        (value, d_sigma, d_unit)
    });

    let mut value = 0.0;
    let mut d_sigma_f = 0.0;
    let mut d_hat = Array2::<f64>::zeros(unit.raw_dim());
    for (v, ds, pairs) in per_node {
        value += v;
        d_sigma_f += ds;
        for (x, y, c) in pairs {
            // ∂(d²)/∂ĥ_x = 2(ĥ_x − ĥ_y), ∂(d²)/∂ĥ_y = −2(ĥ_x − ĥ_y)
            let diff = &unit.row(x) - &unit.row(y);
            d_hat.row_mut(x).scaled_add(2.0 * c, &diff);
            d_hat.row_mut(y).scaled_add(-2.0 * c, &diff);
        }
    }
    // back through ĥ = h/‖h‖
    let mut d_features = d_hat;
    Zip::from(d_features.rows_mut())
        .and(unit.rows())
        .and(&ndarray::ArrayView1::from(&norms))
        .for_each(|mut g, u, &n| {
            let proj = g.dot(&u);
            g.scaled_add(-proj, &u);
            g /= n;
        });
    Ok(ConsistencyLoss {
        value,
        d_features,
        d_sigma_f,
    })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use ndarray::array;
    use proptest::prelude::*;

    use super::*;
    use crate::geometry::{Point3, PointCloud};

    fn bce(s: f64, label: bool) -> f64 {
        if label {
            -s.ln()
        } else {
            -(1.0 - s).ln()
        }
    }

    #[test]
    fn focal_examples() {
        assert!(focal_loss(1.0 - 1e-12, true, 2.0) < 1e-20);
        assert_relative_eq!(focal_loss(0.5, true, 0.0), -(0.5f64).ln());
        assert_relative_eq!(focal_loss(0.9, true, 2.0), 0.01 * -(0.9f64).ln(), epsilon = 1e-15);
        assert_relative_eq!(focal_loss(0.9, true, 2.0), 1.0536e-3, epsilon = 1e-7);
        assert!(focal_loss(0.0, true, 2.0).is_finite());
        assert!(focal_loss(1.0, false, 2.0).is_finite());
    }

    proptest! {
        #[test]
        fn focal_gamma_zero_is_cross_entropy(s in SCORE_EPS..1.0 - SCORE_EPS, label: bool) {
            prop_assert!((focal_loss(s, label, 0.0) - bce(s, label)).abs() <= 1e-12);
        }

        #[test]
        fn focal_logit_grad_matches_differences(z in -6.0f64..6.0, label: bool, gamma in 0.0f64..3.0) {
            let sig = |z: f64| 1.0 / (1.0 + (-z).exp());
            let h = 1e-5;
            let num = (focal_loss(sig(z + h), label, gamma) - focal_loss(sig(z - h), label, gamma)) / (2.0 * h);
            let ana = focal_loss_logit_grad(sig(z), label, gamma);
            prop_assert!((num - ana).abs() <= 1e-6 * num.abs().max(1.0), "{} vs {}", num, ana);
        }
    }

    #[test]
    fn cross_entropy_logit_grad_is_residual() {
        for s in [0.1, 0.5, 0.8] {
            for l in [false, true] {
                let y = if l { 1.0 } else { 0.0 };
                assert_relative_eq!(focal_loss_logit_grad(s, l, 0.0), s - y, epsilon = 1e-15);
            }
        }
    }

    fn graph(points: Vec<Point3>, coverage: f64, k: usize) -> DeformationGraph {
        DeformationGraph::build(&PointCloud::new(points).unwrap(), coverage, k, 0).unwrap()
    }

    fn line(n: usize) -> Vec<Point3> {
        (0..n).map(|i| Point3::new(0.01 * i as f64, 0.0, 0.0)).collect()
    }

    #[test]
    fn identical_inlier_features_cost_nothing() {
        let g = graph(line(6), 0.02, 2);
        let f = Array2::from_elem((6, 4), 0.5);
        let l = consistency_loss(&f.view(), &g, &[true; 6], 1.0).unwrap();
        assert_eq!(l.value, 0.0);
        assert!(l.d_features.iter().all(|&v| v == 0.0));
    }

    #[test]
    fn orthogonal_inlier_pair() {
        // one node holding both points: the two cross pairs contribute 1 each
        let g = graph(vec![Point3::zeros(), Point3::new(0.01, 0.0, 0.0)], 1.0, 1);
        assert_eq!(g.node_count(), 1);
        let f = array![[1.0, 0.0], [0.0, 1.0]];
        let l = consistency_loss(&f.view(), &g, &[true, true], 1.0).unwrap();
        assert_relative_eq!(l.value, 2.0 / 4.0);
    }

    #[test]
    fn singleton_nodes() {
        let pts = vec![Point3::zeros(), Point3::new(1.0, 0.0, 0.0), Point3::new(2.0, 0.0, 0.0)];
        let g = graph(pts, 0.1, 1);
        assert_eq!(g.node_count(), 3);
        let f = array![[1.0, 0.0], [0.0, 1.0], [1.0, 1.0]];
        assert_eq!(consistency_loss(&f.view(), &g, &[true; 3], 1.0).unwrap().value, 0.0);
        let l = consistency_loss(&f.view(), &g, &[true, false, true], 1.0).unwrap();
        assert_relative_eq!(l.value, 1.0 / 9.0);
    }

    #[test]
    fn zero_feature_row_rejected() {
        let g = graph(line(3), 0.02, 2);
        let f = array![[1.0, 0.0], [0.0, 0.0], [1.0, 1.0]];
        assert!(matches!(
            consistency_loss(&f.view(), &g, &[true; 3], 1.0),
            Err(Error::DegenerateFeature { row: 1 })
        ));
    }

    fn random_features(seed: u64, n: usize, d: usize) -> Array2<f64> {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        Array2::from_shape_fn((n, d), |_| rng.random_range(-1.0..1.0))
    }

    #[test]
    fn gradients_match_differences() {
        let g = graph(line(10), 0.03, 3);
        let labels: Vec<bool> = (0..10).map(|i| i % 3 != 0).collect();
        let f = random_features(4, 10, 5);
        let sigma = 1.3;
        let l = consistency_loss(&f.view(), &g, &labels, sigma).unwrap();
        let h = 1e-6;
        let eval = |f: &Array2<f64>, s: f64| consistency_loss(&f.view(), &g, &labels, s).unwrap().value;
        for idx in [(0, 0), (3, 2), (7, 4), (9, 1)] {
            let (mut fp, mut fm) = (f.clone(), f.clone());
            fp[idx] += h;
            fm[idx] -= h;
            let num = (eval(&fp, sigma) - eval(&fm, sigma)) / (2.0 * h);
            assert_relative_eq!(num, l.d_features[idx], epsilon = 1e-7, max_relative = 1e-5);
        }
        let num = (eval(&f, sigma + h) - eval(&f, sigma - h)) / (2.0 * h);
        assert_relative_eq!(num, l.d_sigma_f, epsilon = 1e-7, max_relative = 1e-5);
    }

    #[test]
    fn invariant_under_feature_rotation() {
        let g = graph(line(8), 0.03, 3);
        let labels: Vec<bool> = (0..8).map(|i| i % 2 == 0).collect();
        let f = random_features(5, 8, 3);
        let r = crate::geometry::exp_so3(&nalgebra::Vector3::new(0.3, -1.2, 0.7));
        let rn = Array2::from_shape_fn((3, 3), |(i, j)| r[(i, j)]);
        let a = consistency_loss(&f.view(), &g, &labels, 1.1).unwrap().value;
        let b = consistency_loss(&f.dot(&rn).view(), &g, &labels, 1.1).unwrap().value;
        let c = consistency_loss(&(-&f).view(), &g, &labels, 1.1).unwrap().value;
        assert_relative_eq!(a, b, epsilon = 1e-12);
        assert_relative_eq!(a, c, epsilon = 1e-12);
    }
}

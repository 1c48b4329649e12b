//! Correspondence sets and graph-based local spatial consistency.

use std::fmt::Write as _;

use ndarray::Array2;

use crate::defgraph::DeformationGraph;
use crate::error::{Error, Result};
use crate::geometry::{Point3, PointCloud};

/// Default distance tolerance for spatial consistency, meters.
pub const DEFAULT_SIGMA_D: f64 = 0.08;

/// A putative match between a source point and a target point.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Correspondence {
    pub source: Point3,
    pub target: Point3,
}

impl Correspondence {
    pub fn new(source: Point3, target: Point3) -> Self {
        Self { source, target }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct CorrespondenceSet {
    pairs: Vec<Correspondence>,
    labels: Option<Vec<bool>>,
    scores: Option<Vec<f64>>,
}

impl CorrespondenceSet {
    pub fn new(pairs: Vec<Correspondence>) -> Result<Self> {
        for (i, c) in pairs.iter().enumerate() {
            if !c.source.iter().chain(c.target.iter()).all(|v| v.is_finite()) {
                return Err(Error::NonFinite(format!("correspondence {i}")));
            }
        }
        Ok(Self {
            pairs,
            labels: None,
            scores: None,
        })
    }

    pub fn with_labels(mut self, labels: Vec<bool>) -> Result<Self> {
        if labels.len() != self.pairs.len() {
            return Err(Error::invalid(
                "labels",
                format!("{} labels for {} correspondences", labels.len(), self.pairs.len()),
            ));
        }
        self.labels = Some(labels);
        Ok(self)
    }

    pub fn with_scores(mut self, scores: Vec<f64>) -> Result<Self> {
        if scores.len() != self.pairs.len() {
            return Err(Error::invalid(
                "scores",
                format!("{} scores for {} correspondences", scores.len(), self.pairs.len()),
            ));
        }
        if let Some(i) = scores.iter().position(|s| !(0.0..=1.0).contains(s)) {
            return Err(Error::invalid("scores", format!("score {i} outside [0, 1]")));
        }
        self.scores = Some(scores);
        Ok(self)
    }

    pub fn pairs(&self) -> &[Correspondence] {
        &self.pairs
    }

    pub fn labels(&self) -> Option<&[bool]> {
        self.labels.as_deref()
    }

    pub fn scores(&self) -> Option<&[f64]> {
        self.scores.as_deref()
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }

    /// Source endpoints as a cloud.
    pub fn source_cloud(&self) -> PointCloud {
        PointCloud::new(self.pairs.iter().map(|c| c.source).collect())
            .expect("coordinates validated on construction")
    }

    /// Keeps the listed rows, in the given order, with their labels/scores.
    pub fn subset(&self, indices: &[usize]) -> Self {
        Self {
            pairs: indices.iter().map(|&i| self.pairs[i]).collect(),
            labels: self
                .labels
                .as_ref()
                .map(|l| indices.iter().map(|&i| l[i]).collect()),
            scores: self
                .scores
                .as_ref()
                .map(|s| indices.iter().map(|&i| s[i]).collect()),
        }
    }

    pub fn inlier_ratio(&self) -> Option<f64> {
        let labels = self.labels.as_ref()?;
        if labels.is_empty() {
            return None;
        }
        Some(labels.iter().filter(|&&l| l).count() as f64 / labels.len() as f64)
    }

    /// Applies `f` to every target endpoint.
    pub fn map_targets(&self, f: impl Fn(&Point3) -> Point3) -> Self {
        Self {
            pairs: self
                .pairs
                .iter()
                .map(|c| Correspondence::new(c.source, f(&c.target)))
                .collect(),
            labels: self.labels.clone(),
            scores: self.scores.clone(),
        }
    }
}

/// Length-consistency score of two correspondences: `[1 - δ²/σ_d²]₊` with δ
/// the difference between the source-side and target-side distances.
pub fn pairwise_consistency(a: &Correspondence, b: &Correspondence, sigma_d: f64) -> f64 {
    let delta = ((a.source - b.source).norm() - (a.target - b.target).norm()).abs();
    (1.0 - delta * delta / (sigma_d * sigma_d)).max(0.0)
}

/// Θ for one non-empty node.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeBlock {
    pub node: usize,
    /// Correspondence indices, ascending; rows/columns of `theta` follow
    /// this order.
    pub members: Vec<usize>,
    pub theta: Array2<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LocalConsistency {
    pub sigma_d: f64,
    /// Blocks for non-empty nodes, in ascending node order.
    pub blocks: Vec<NodeBlock>,
}

impl LocalConsistency {
    /// Consistency of two correspondences under the local definition: the
    /// pairwise score when some node holds both, else 0.
    pub fn value(&self, i: usize, j: usize) -> f64 {
        for b in &self.blocks {
            if let (Ok(a), Ok(c)) = (b.members.binary_search(&i), b.members.binary_search(&j)) {
                return b.theta[(a, c)];
            }
        }
        0.0
    }

    /// Total number of stacked rows across blocks.
    pub fn row_count(&self) -> usize {
        self.blocks.iter().map(|b| b.members.len()).sum()
    }

    /// `node,members,min,mean,max` CSV, one row per block.
    pub fn stats_csv(&self) -> String {
        let mut out = String::from("node,members,min,mean,max\n");
        for b in &self.blocks {
            let n = b.theta.len() as f64;
            let min = b.theta.iter().copied().fold(f64::INFINITY, f64::min);
            let max = b.theta.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mean = b.theta.sum() / n;
            let _ = writeln!(out, "{},{},{min},{mean},{max}", b.node, b.members.len());
        }
        out
    }
}

/// Per-node Θ blocks of correspondences sharing a graph node. `graph` must
/// have been built over the correspondences' source endpoints.
pub fn local_consistency(
    corr: &CorrespondenceSet,
    graph: &DeformationGraph,
    sigma_d: f64,
) -> Result<LocalConsistency> {
    if !(sigma_d > 0.0) {
        return Err(Error::invalid("sigma_d", "must be positive"));
    }
    if graph.point_count() != corr.len() {
        return Err(Error::invalid(
            "graph",
            format!(
                "built over {} points but there are {} correspondences",
                graph.point_count(),
                corr.len()
            ),
        ));
    }
    let occupied: Vec<usize> = (0..graph.node_count())
        .filter(|&j| !graph.node_to_members[j].is_empty())
        .collect();
    let pairs = corr.pairs();
    let blocks = crate::par::map_slice(&occupied, |&j| {
        let members = graph.node_to_members[j].clone();
        let n = members.len();
        let mut theta = Array2::<f64>::zeros((n, n));
        for a in 0..n {
            theta[(a, a)] = 1.0;
            for b in a + 1..n {
                let v = pairwise_consistency(&pairs[members[a]], &pairs[members[b]], sigma_d);
                theta[(a, b)] = v;
                theta[(b, a)] = v;
            }
        }
        NodeBlock {
            node: j,
            members,
            theta,
        }
    });
    Ok(LocalConsistency { sigma_d, blocks })
}

#[cfg(test)]
mod tests {
    use approx::assert_relative_eq;
    use nalgebra::Vector3;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::geometry::exp_so3;

    fn c(x: [f64; 3], y: [f64; 3]) -> Correspondence {
        Correspondence::new(Point3::from(x), Point3::from(y))
    }

    #[test]
    fn identical_pair_is_fully_consistent() {
        let a = c([0.0, 0.0, 0.0], [1.0, 1.0, 1.0]);
        assert_eq!(pairwise_consistency(&a, &a, 0.08), 1.0);
    }

    #[test]
    fn clamp_boundary() {
        let a = c([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]);
        let b = c([1.0, 0.0, 0.0], [1.5, 0.0, 0.0]);
        assert_eq!(pairwise_consistency(&a, &b, 0.5), 0.0);
    }

    #[test]
    fn worked_example() {
        let a = c([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]);
        let b = c([1.0, 0.0, 0.0], [0.0, 1.04, 0.0]);
        assert_relative_eq!(pairwise_consistency(&a, &b, 0.08), 0.75, epsilon = 1e-12);
    }

    fn set(pairs: Vec<Correspondence>) -> CorrespondenceSet {
        CorrespondenceSet::new(pairs).unwrap()
    }

    #[test]
    fn single_correspondence_block() {
        let s = set(vec![c([0.0; 3], [1.0; 3])]);
        let g = DeformationGraph::build(&s.source_cloud(), 0.08, 6, 0).unwrap();
        let lc = local_consistency(&s, &g, 0.08).unwrap();
        assert_eq!(lc.blocks.len(), 1);
        assert_eq!(lc.blocks[0].theta, Array2::from_elem((1, 1), 1.0));
    }

    #[test]
    fn three_under_one_node_match_dense() {
        let s = set(vec![
            c([0.0, 0.0, 0.0], [0.0, 0.0, 0.0]),
            c([0.02, 0.0, 0.0], [0.0, 0.03, 0.0]),
            c([0.0, 0.03, 0.0], [0.05, 0.0, 0.01]),
        ]);
        let g = DeformationGraph::build(&s.source_cloud(), 0.08, 6, 0).unwrap();
        assert_eq!(g.node_count(), 1);
        let lc = local_consistency(&s, &g, 0.08).unwrap();
        for i in 0..3 {
            for j in 0..3 {
                assert_eq!(lc.blocks[0].theta[(i, j)], pairwise_consistency(&s.pairs()[i], &s.pairs()[j], 0.08));
            }
        }
    }

    #[test]
    fn disjoint_nodes_give_zero() {
        let s = set(vec![c([0.0; 3], [0.0; 3]), c([5.0, 0.0, 0.0], [5.0, 0.0, 0.0])]);
        let g = DeformationGraph::build(&s.source_cloud(), 0.08, 1, 0).unwrap();
        let lc = local_consistency(&s, &g, 0.08).unwrap();
        assert_eq!(lc.blocks.len(), 2);
        assert_eq!(lc.value(0, 1), 0.0);
        assert_eq!(lc.value(0, 0), 1.0);
    }

    #[test]
    fn empty_nodes_are_skipped() {
        let s = set(vec![c([0.0; 3], [0.0; 3]), c([1.0, 0.0, 0.0], [1.0, 0.0, 0.0])]);
        let mut g = DeformationGraph::build(&s.source_cloud(), 0.08, 1, 0).unwrap();
        // splice in an unused node
        g.nodes.push(Point3::new(9.0, 9.0, 9.0));
        g.node_sources.push(0);
        g.node_to_members.push(Vec::new());
        let lc = local_consistency(&s, &g, 0.08).unwrap();
        assert_eq!(lc.blocks.len(), 2);
        assert!(lc.blocks.iter().all(|b| b.node != 2));
    }

    #[test]
    fn invariant_under_rigid_motion_of_target() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let pairs: Vec<_> = (0..60)
            .map(|_| {
                let x = Point3::new(rng.random(), rng.random(), rng.random()) * 0.3;
                let y = Point3::new(rng.random(), rng.random(), rng.random()) * 0.3;
                Correspondence::new(x, y)
            })
            .collect();
        let s = set(pairs);
        let g = DeformationGraph::build(&s.source_cloud(), 0.1, 6, 0).unwrap();
        let base = local_consistency(&s, &g, 0.08).unwrap();
        let r = exp_so3(&Vector3::new(0.3, -0.7, 0.2));
        let t = Vector3::new(1.0, -2.0, 0.5);
        let moved = local_consistency(&s.map_targets(|y| r * y + t), &g, 0.08).unwrap();
        for (a, b) in base.blocks.iter().zip(&moved.blocks) {
            for (x, y) in a.theta.iter().zip(b.theta.iter()) {
                assert!((x - y).abs() < 1e-9);
            }
        }
    }

    #[test]
    fn stats_csv_shape() {
        let s = set(vec![c([0.0; 3], [0.0; 3]), c([0.01, 0.0, 0.0], [0.5, 0.0, 0.0])]);
        let g = DeformationGraph::build(&s.source_cloud(), 0.08, 6, 0).unwrap();
        let csv = local_consistency(&s, &g, 0.08).unwrap().stats_csv();
        assert_eq!(csv.lines().count(), 2);
        assert!(csv.lines().nth(1).unwrap().starts_with("0,2,0,0.5,1"));
    }

    #[test]
    fn subset_keeps_labels() {
        let s = set(vec![c([0.0; 3], [0.0; 3]), c([1.0; 3], [1.0; 3])])
            .with_labels(vec![true, false])
            .unwrap();
        let sub = s.subset(&[1]);
        assert_eq!(sub.labels(), Some(&[false][..]));
        assert!(s.clone().with_scores(vec![0.5, 1.5]).is_err());
    }
}

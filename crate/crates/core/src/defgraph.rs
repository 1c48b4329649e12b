//! Deformation graphs over a point set: furthest-point node sampling,
//! k-nearest-node assignment with Gaussian skinning weights, and edges
//! between co-assigned nodes.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::geometry::{furthest_point_sample, knn, Point3, PointCloud};

/// Default node coverage for the correspondence graph, meters.
pub const DEFAULT_NODE_COVERAGE: f64 = 0.08;
/// Default number of nodes per correspondence.
pub const DEFAULT_NODE_K: usize = 6;
/// Default node coverage for the solver graph, meters.
pub const DEFAULT_SOLVER_COVERAGE: f64 = 0.08;
/// Default number of nodes per point in the solver graph.
pub const DEFAULT_SOLVER_K: usize = 6;

/// One (node, weight) pair of a point's skinning.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Anchor {
    pub node: usize,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct DeformationGraph {
    /// Node positions, a subset of the input cloud.
    pub nodes: Vec<Point3>,
    /// Index of each node in the input cloud.
    pub node_sources: Vec<usize>,
    /// Sampling radius; also the Gaussian skinning bandwidth.
    pub coverage: f64,
    pub assign_k: usize,
    /// Per input point: assigned nodes ascending by distance, with weights.
    pub point_to_nodes: Vec<Vec<Anchor>>,
    /// Per node: ascending indices of the points assigned to it.
    pub node_to_members: Vec<Vec<usize>>,
    /// Unordered node pairs `(u, v)` with `u < v`, sorted.
    pub edges: Vec<(usize, usize)>,
}

/// Normalized Gaussian skinning weights of `point` against `nodes`.
pub fn skinning_weights(point: &Point3, nodes: &[Point3], bandwidth: f64) -> Vec<f64> {
    let sq: Vec<f64> = nodes.iter().map(|v| (point - v).norm_squared()).collect();
    normalized_gaussian(&sq, bandwidth)
}

/// Weights from squared distances. Shifting by the minimum leaves the
/// normalized result unchanged and keeps far points from underflowing.
fn normalized_gaussian(sq_dists: &[f64], bandwidth: f64) -> Vec<f64> {
    let denom = 2.0 * bandwidth * bandwidth;
    let min = sq_dists.iter().copied().fold(f64::INFINITY, f64::min);
    let raw: Vec<f64> = sq_dists.iter().map(|d| (-(d - min) / denom).exp()).collect();
    let total: f64 = raw.iter().sum();
    raw.into_iter().map(|w| w / total).collect()
}

/// The `k` nearest of `nodes` to `point` (or all of them when there are
/// fewer) with skinning weights at the given bandwidth.
pub fn anchors_for(point: &Point3, nodes: &[Point3], k: usize, bandwidth: f64) -> Vec<Anchor> {
    let k = k.min(nodes.len());
    if k == 0 {
        return Vec::new();
    }
    let near = knn(point, nodes, k).expect("k clamped to node count");
    let sq: Vec<f64> = near.iter().map(|n| n.distance * n.distance).collect();
    let w = normalized_gaussian(&sq, bandwidth);
    near.iter()
        .zip(w)
        .map(|(n, weight)| Anchor {
            node: n.index,
            weight,
        })
        .collect()
}

impl DeformationGraph {
    /// Samples nodes with furthest point sampling and assigns every point to
    /// its `assign_k` nearest nodes.
    pub fn build(
        cloud: &PointCloud,
        coverage: f64,
        assign_k: usize,
        start_index: usize,
    ) -> Result<Self> {
        if assign_k == 0 {
            return Err(Error::invalid("assign_k", "must be at least 1"));
        }
        let node_sources = furthest_point_sample(cloud, coverage, start_index)?;
        let nodes: Vec<Point3> = node_sources.iter().map(|&i| cloud.points()[i]).collect();

        let point_to_nodes: Vec<Vec<Anchor>> = crate::par::map_slice(cloud.points(), |p| {
            anchors_for(p, &nodes, assign_k, coverage)
        });

        let mut node_to_members = vec![Vec::new(); nodes.len()];
        let mut edges = BTreeSet::new();
        for (i, anchors) in point_to_nodes.iter().enumerate() {
            for (a, anc) in anchors.iter().enumerate() {
                node_to_members[anc.node].push(i);
                for other in &anchors[a + 1..] {
                    let (u, v) = if anc.node < other.node {
                        (anc.node, other.node)
                    } else {
                        (other.node, anc.node)
                    };
                    edges.insert((u, v));
                }
            }
        }

        Ok(Self {
            nodes,
            node_sources,
            coverage,
            assign_k,
            point_to_nodes,
            node_to_members,
            edges: edges.into_iter().collect(),
        })
    }

    pub fn node_count(&self) -> usize {
        self.nodes.len()
    }

    pub fn point_count(&self) -> usize {
        self.point_to_nodes.len()
    }

    /// Skinning of an arbitrary point against this graph's nodes.
    pub fn anchors(&self, point: &Point3) -> Vec<Anchor> {
        anchors_for(point, &self.nodes, self.assign_k, self.coverage)
    }

    /// Line-oriented text dump: a header, one `node` record per node, one
    /// `point` record per point, one `edge` record per edge.
    pub fn dump(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "graph nodes={} points={} edges={} coverage={} k={}",
            self.nodes.len(),
            self.point_to_nodes.len(),
            self.edges.len(),
            self.coverage,
            self.assign_k
        );
        for (j, (v, src)) in self.nodes.iter().zip(&self.node_sources).enumerate() {
            let _ = writeln!(
                out,
                "node {j} {} {} {} src={src} members={}",
                v.x,
                v.y,
                v.z,
                self.node_to_members[j].len()
            );
        }
        for (i, anchors) in self.point_to_nodes.iter().enumerate() {
            let _ = write!(out, "point {i}");
            for a in anchors {
                let _ = write!(out, " {}:{:.6}", a.node, a.weight);
            }
            out.push('\n');
        }
        for (u, v) in &self.edges {
            let _ = writeln!(out, "edge {u} {v}");
        }
        out
    }
}

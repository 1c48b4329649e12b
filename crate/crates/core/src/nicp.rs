//! Embedded-deformation warps and the damped Gauss–Newton solver that fits
//! them to fixed correspondences.
//!
//! Unknowns are per-node increments `[ω_1..ω_V, Δt_1..Δt_V]`; rotations are
//! updated as `R ← exp(ω^) R` and translations as `t ← t + Δt`.

use std::fmt::Write as _;

use nalgebra::{DMatrix, DVector, Matrix3, Vector3};

use crate::consistency::CorrespondenceSet;
use crate::defgraph::{Anchor, DeformationGraph, DEFAULT_SOLVER_COVERAGE, DEFAULT_SOLVER_K};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, log_so3, project_to_rotation, skew, Point3, PointCloud, RigidTransform};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub lambda_corr: f64,
    pub lambda_reg: f64,
    /// Constant Marquardt damping added to the normal matrix diagonal.
    pub marquardt: f64,
    pub max_iterations: usize,
    /// Stop once the relative cost decrease falls below this.
    pub cost_tolerance: f64,
    /// Stop once `‖ΔT‖∞` falls below this.
    pub step_tolerance: f64,
    /// Solver-graph node coverage (meters).
    pub coverage: f64,
    /// Nodes per point in the solver graph.
    pub assign_k: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            lambda_corr: 25.0,
            lambda_reg: 1.0,
            marquardt: 0.01,
            max_iterations: 50,
            cost_tolerance: 1e-6,
            step_tolerance: 1e-6,
            coverage: DEFAULT_SOLVER_COVERAGE,
            assign_k: DEFAULT_SOLVER_K,
        }
    }
}

impl SolverConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("lambda_c", self.lambda_corr),
            ("lambda_r", self.lambda_reg),
            ("lambda_m", self.marquardt),
            ("cost_tolerance", self.cost_tolerance),
            ("step_tolerance", self.step_tolerance),
            ("sigma_g", self.coverage),
        ];
        for (name, v) in positive {
            if !(v > 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be positive and finite"));
            }
        }
        if self.max_iterations == 0 {
            return Err(Error::invalid("max_iterations", "must be at least 1"));
        }
        if self.assign_k == 0 {
            return Err(Error::invalid("k_g", "must be at least 1"));
        }
        Ok(())
    }
}

/// A deformation graph plus one rigid transform per node.
#[derive(Debug, Clone, PartialEq)]
pub struct WarpField {
    pub graph: DeformationGraph,
    pub transforms: Vec<RigidTransform>,
}

impl WarpField {
    pub fn identity(graph: DeformationGraph) -> Self {
        let transforms = vec![RigidTransform::identity(); graph.node_count()];
        Self { graph, transforms }
    }

    pub fn new(graph: DeformationGraph, transforms: Vec<RigidTransform>) -> Result<Self> {
        if graph.node_count() != transforms.len() {
            return Err(Error::invalid(
                "transforms",
                format!("{} transforms for {} nodes", transforms.len(), graph.node_count()),
            ));
        }
        Ok(Self { graph, transforms })
    }

    pub fn node_count(&self) -> usize {
        self.transforms.len()
    }

    /// Warp of a point whose skinning is already known.
    ///
    /// Evaluated as `p + Σ α (R(p−v) − (p−v) + t)`, which equals the
    /// blended node transforms because the weights sum to one, and is exactly
    /// `p` under identity transforms.
    pub fn warp_anchored(&self, p: &Point3, anchors: &[Anchor]) -> Point3 {
        p + anchors.iter().fold(Point3::zeros(), |acc, a| {
            let lever = p - self.graph.nodes[a.node];
            let t = &self.transforms[a.node];
            acc + (t.rotation * lever - lever + t.translation) * a.weight
        })
    }

    /// Warp of an arbitrary point; skinning is computed against the nodes.
    pub fn warp_point(&self, p: &Point3) -> Point3 {
        self.warp_anchored(p, &self.graph.anchors(p))
    }

    pub fn warp_points(&self, pts: &[Point3]) -> Vec<Point3> {
        crate::par::map_slice(pts, |p| self.warp_point(p))
    }

    pub fn warp_cloud(&self, cloud: &PointCloud) -> PointCloud {
        PointCloud::new(self.warp_points(cloud.points())).expect("warp of finite points is finite")
    }

    /// Applies an increment `[ω; Δt]` without re-projecting rotations.
    pub fn retract(&self, delta: &DVector<f64>) -> WarpField {
        let n = self.node_count();
        assert_eq!(delta.len(), 6 * n);
        let transforms = self
            .transforms
            .iter()
            .enumerate()
            .map(|(j, t)| {
                let w = Vector3::new(delta[3 * j], delta[3 * j + 1], delta[3 * j + 2]);
                let dt = Vector3::new(delta[3 * (n + j)], delta[3 * (n + j) + 1], delta[3 * (n + j) + 2]);
                RigidTransform::new(exp_so3(&w) * t.rotation, t.translation + dt)
            })
            .collect();
        WarpField {
            graph: self.graph.clone(),
            transforms,
        }
    }

    pub fn max_orthonormality_error(&self) -> f64 {
        self.transforms
            .iter()
            .map(RigidTransform::orthonormality_error)
            .fold(0.0, f64::max)
    }

    /// Text form: a header line then one line per node with position,
    /// axis-angle rotation and translation.
    pub fn to_text(&self) -> String {
        let mut out = String::new();
        let _ = writeln!(
            out,
            "warpfield nodes={} coverage={} k={}",
            self.node_count(),
            self.graph.coverage,
            self.graph.assign_k
        );
        for (v, t) in self.graph.nodes.iter().zip(&self.transforms) {
            let w = log_so3(&t.rotation);
            let tr = t.translation;
            let _ = writeln!(
                out,
                "{} {} {} {} {} {} {} {} {}",
                v.x, v.y, v.z, w.x, w.y, w.z, tr.x, tr.y, tr.z
            );
        }
        out
    }

    pub fn from_text(text: &str) -> Result<Self> {
        const WHAT: &str = "warp field";
        let mut lines = text.lines().enumerate().filter(|(_, l)| !l.trim().is_empty());
        let (_, header) = lines.next().ok_or_else(|| Error::format(WHAT, 1, "empty file"))?;
        let mut tok = header.split_whitespace();
        if tok.next() != Some("warpfield") {
            return Err(Error::format(WHAT, 1, "missing `warpfield` header"));
        }
        let (mut count, mut coverage, mut k) = (None, None, None);
        for kv in tok {
            let (key, val) = kv
                .split_once('=')
                .ok_or_else(|| Error::format(WHAT, 1, format!("bad header field `{kv}`")))?;
            let bad = || Error::format(WHAT, 1, format!("bad value for `{key}`"));
            match key {
                "nodes" => count = Some(val.parse::<usize>().map_err(|_| bad())?),
                "coverage" => coverage = Some(val.parse::<f64>().map_err(|_| bad())?),
                "k" => k = Some(val.parse::<usize>().map_err(|_| bad())?),
                _ => return Err(Error::format(WHAT, 1, format!("unknown header field `{key}`"))),
            }
        }
        let (count, coverage, k) = match (count, coverage, k) {
            (Some(c), Some(s), Some(k)) if s > 0.0 && k > 0 => (c, s, k),
            _ => return Err(Error::format(WHAT, 1, "header needs nodes, coverage > 0, k > 0")),
        };
        let mut nodes = Vec::with_capacity(count);
        let mut transforms = Vec::with_capacity(count);
        for (no, line) in lines {
            let vals: Vec<f64> = line
                .split_whitespace()
                .map(str::parse)
                .collect::<std::result::Result<_, _>>()
                .map_err(|_| Error::format(WHAT, no + 1, "bad number"))?;
            if vals.len() != 9 || !vals.iter().all(|v| v.is_finite()) {
                return Err(Error::format(WHAT, no + 1, "expected nine finite values"));
            }
            nodes.push(Point3::new(vals[0], vals[1], vals[2]));
            transforms.push(RigidTransform::from_axis_angle(
                &Vector3::new(vals[3], vals[4], vals[5]),
                Vector3::new(vals[6], vals[7], vals[8]),
            ));
        }
        if nodes.len() != count {
            return Err(Error::format(WHAT, 0, format!("header says {count} nodes, found {}", nodes.len())));
        }
        let graph = DeformationGraph {
            node_sources: (0..nodes.len()).collect(),
            nodes,
            coverage,
            assign_k: k,
            point_to_nodes: Vec::new(),
            node_to_members: vec![Vec::new(); count],
            edges: Vec::new(),
        };
        WarpField::new(graph, transforms)
    }
}

/// Per-residual-block Jacobian entries: `(variable block, 3×3 block)`.
/// Variable blocks `0..V` are rotations, `V..2V` translations.
#[derive(Debug, Clone)]
pub struct BlockJacobian {
    pub node_count: usize,
    pub rows: Vec<Vec<(usize, Matrix3<f64>)>>,
}

impl BlockJacobian {
    pub fn to_dense(&self) -> DMatrix<f64> {
        let mut j = DMatrix::zeros(3 * self.rows.len(), 6 * self.node_count);
        for (r, blocks) in self.rows.iter().enumerate() {
            for (c, m) in blocks {
                let mut view = j.fixed_view_mut::<3, 3>(3 * r, 3 * c);
                view += m;
            }
        }
        j
    }
}

/// Correspondences bound to a solver graph, with the skinning of every
/// source endpoint precomputed.
#[derive(Debug, Clone)]
pub struct Problem<'a> {
    pub corr: &'a CorrespondenceSet,
    pub anchors: Vec<Vec<Anchor>>,
    pub edges: Vec<(usize, usize)>,
    pub config: SolverConfig,
}

impl<'a> Problem<'a> {
    pub fn new(field: &WarpField, corr: &'a CorrespondenceSet, config: SolverConfig) -> Self {
        let anchors = crate::par::map_slice(corr.pairs(), |c| field.graph.anchors(&c.source));
        Self {
            corr,
            anchors,
            edges: field.graph.edges.clone(),
            config,
        }
    }

    pub fn residual_blocks(&self) -> usize {
        self.corr.len() + self.edges.len()
    }

    /// Stacked residuals: all correspondence terms, then all edge terms.
    pub fn residuals(&self, field: &WarpField) -> DVector<f64> {
        let sc = self.config.lambda_corr.sqrt();
        let sr = self.config.lambda_reg.sqrt();
        let n_corr = self.corr.len();
        let blocks = crate::par::map_indexed(self.residual_blocks(), |b| {
            if b < n_corr {
                let c = &self.corr.pairs()[b];
                (field.warp_anchored(&c.source, &self.anchors[b]) - c.target) * sc
            } else {
                let (u, v) = self.edges[b - n_corr];
                let (vu, vv) = (field.graph.nodes[u], field.graph.nodes[v]);
                let (tu, tv) = (&field.transforms[u], &field.transforms[v]);
                (tu.rotation * (vv - vu) + vu + tu.translation - (vv + tv.translation)) * sr
            }
        });
        DVector::from_iterator(3 * blocks.len(), blocks.iter().flat_map(|r| r.iter().copied()))
    }

    pub fn cost(&self, field: &WarpField) -> f64 {
        self.residuals(field).norm_squared()
    }

    /// Jacobian with respect to the increments, linearized at zero.
    pub fn jacobian(&self, field: &WarpField) -> BlockJacobian {
        let n = field.node_count();
        let sc = self.config.lambda_corr.sqrt();
        let sr = self.config.lambda_reg.sqrt();
        let n_corr = self.corr.len();
        let rows = crate::par::map_indexed(self.residual_blocks(), |b| {
            if b < n_corr {
                let x = self.corr.pairs()[b].source;
                let mut row = Vec::with_capacity(2 * self.anchors[b].len());
                for a in &self.anchors[b] {
                    let lever = field.transforms[a.node].rotation * (x - field.graph.nodes[a.node]);
                    row.push((a.node, -skew(&lever) * (sc * a.weight)));
                }
                for a in &self.anchors[b] {
                    row.push((n + a.node, Matrix3::identity() * (sc * a.weight)));
                }
                row
            } else {
                let (u, v) = self.edges[b - n_corr];
                let lever = field.transforms[u].rotation * (field.graph.nodes[v] - field.graph.nodes[u]);
                vec![
                    (u, -skew(&lever) * sr),
                    (n + u, Matrix3::identity() * sr),
                    (n + v, -Matrix3::identity() * sr),
                ]
            }
        });
        BlockJacobian { node_count: n, rows }
    }

    /// `(JᵀJ, Jᵀr)` accumulated over fixed chunks of residual blocks and
    /// summed in chunk order.
    pub fn normal_equations(&self, field: &WarpField) -> (DMatrix<f64>, DVector<f64>) {
        let dim = 6 * field.node_count();
        let jac = self.jacobian(field);
        let r = self.residuals(field);
        let total = jac.rows.len();
        let chunk = total.div_ceil(8).max(256);
        let chunks = total.div_ceil(chunk);
        let partials = crate::par::map_indexed(chunks, |ci| {
            let mut h = DMatrix::<f64>::zeros(dim, dim);
            let mut g = DVector::<f64>::zeros(dim);
            for b in ci * chunk..((ci + 1) * chunk).min(total) {
                let rb = r.fixed_rows::<3>(3 * b);
                let blocks = &jac.rows[b];
                for (ca, ma) in blocks {
                    let mut gv = g.fixed_rows_mut::<3>(3 * ca);
                    gv += ma.transpose() * rb;
                    for (cb, mb) in blocks {
                        let mut hv = h.fixed_view_mut::<3, 3>(3 * ca, 3 * cb);
                        hv += ma.transpose() * mb;
                    }
                }
            }
            (h, g)
        });
        let mut h = DMatrix::zeros(dim, dim);
        let mut g = DVector::zeros(dim);
        for (ph, pg) in partials {
            h += ph;
            g += pg;
        }
        (h, g)
    }

    /// Solves `(JᵀJ + λ_m I) ΔT = −Jᵀr` at `field`.
    pub fn increment(&self, field: &WarpField, iteration: usize) -> Result<DVector<f64>> {
        let (mut h, g) = self.normal_equations(field);
        for i in 0..h.nrows() {
            h[(i, i)] += self.config.marquardt;
        }
        let chol = h.cholesky().ok_or(Error::SolverBreakdown { iteration })?;
        let delta = chol.solve(&(-g));
        if !delta.iter().all(|v| v.is_finite()) {
            return Err(Error::SolverBreakdown { iteration });
        }
        Ok(delta)
    }
}

/// Result of one Gauss–Newton step.
#[derive(Debug, Clone)]
pub struct Step {
    pub field: WarpField,
    pub cost: f64,
    /// `‖ΔT‖∞` of the applied increment.
    pub step_norm: f64,
}

/// One damped Gauss–Newton update with re-orthonormalized rotations.
pub fn gauss_newton_step(problem: &Problem<'_>, field: &WarpField, iteration: usize) -> Result<Step> {
    let delta = problem.increment(field, iteration)?;
    let step_norm = delta.amax();
    let mut next = field.retract(&delta);
    for t in &mut next.transforms {
        t.rotation = project_to_rotation(&t.rotation);
    }
    let cost = problem.cost(&next);
    Ok(Step {
        field: next,
        cost,
        step_norm,
    })
}

#[derive(Debug, Clone)]
pub struct Solution {
    pub field: WarpField,
    /// Cost at the start and after every accepted step.
    pub cost_trace: Vec<f64>,
}

impl Solution {
    pub fn iterations(&self) -> usize {
        self.cost_trace.len() - 1
    }
}

/// Fits a warp over `source` to the correspondences, starting from the
/// identity.
pub fn solve(corr: &CorrespondenceSet, source: &PointCloud, config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    if corr.is_empty() {
        return Err(Error::Empty("correspondence set"));
    }
    let graph = DeformationGraph::build(source, config.coverage, config.assign_k, 0)?;
    solve_from(WarpField::identity(graph), corr, config)
}

/// [`solve`] from a given initial field.
pub fn solve_from(initial: WarpField, corr: &CorrespondenceSet, config: &SolverConfig) -> Result<Solution> {
    config.validate()?;
    if corr.is_empty() {
        return Err(Error::Empty("correspondence set"));
    }
    let mut field = initial;
    let problem = Problem::new(&field, corr, *config);
    let mut cost = problem.cost(&field);
    if !cost.is_finite() {
        return Err(Error::NonFinite("initial registration cost".into()));
    }
    let mut trace = vec![cost];
    for iteration in 1..=config.max_iterations {
        if cost == 0.0 {
            break;
        }
        let step = gauss_newton_step(&problem, &field, iteration)?;
        if !(step.cost <= cost) {
            break;
        }
        let rel = (cost - step.cost) / cost;
        field = step.field;
        cost = step.cost;
        trace.push(cost);
        if rel < config.cost_tolerance || step.step_norm < config.step_tolerance {
            break;
        }
    }
    Ok(Solution {
        field,
        cost_trace: trace,
    })
}

//! Correspondence classification network: Fourier embedding, stacked
//! node-wise attention modules reweighted by local spatial consistency,
//! skinning-weighted aggregation, and a sigmoid head.

pub mod arch;
pub mod ops;

use ndarray::{s, Array2, ArrayView2, ArrayViewMut1, ArrayViewMut2, Axis};
use rand::distr::{Distribution, Uniform};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

pub use arch::{Architecture, Layout, ModelFile, OptimizerState, Slot, INPUT_DIM};
use arch::{decode_model, encode_model, LinearSlots, MlpLayerSlots, NormSlots, UnitSlots};
use ops::NormCache;

use crate::consistency::{local_consistency, CorrespondenceSet, LocalConsistency};
use crate::defgraph::{DeformationGraph, DEFAULT_NODE_COVERAGE, DEFAULT_NODE_K};
use crate::error::{Error, Result};

pub const DEFAULT_LEAKY_SLOPE: f64 = 0.01;
pub const DEFAULT_TAU_S: f64 = 0.4;
pub const DEFAULT_SIGMA_F: f64 = 1.0;
/// Minimum number of correspondences kept when nothing clears `tau_s`.
pub const FALLBACK_MIN_KEEP: usize = 8;
pub const FALLBACK_FRACTION: f64 = 0.05;

/// Fourier encoding `[ĉ; sin(ĉ/2); cos(ĉ/2)]` of the mean-centred 6-vectors
/// `[x; y]`.
pub fn encode_input(corr: &CorrespondenceSet) -> Result<Array2<f64>> {
    if corr.is_empty() {
        return Err(Error::Empty("correspondence set"));
    }
    let n = corr.len();
    let mut raw = Array2::<f64>::zeros((n, 6));
    for (mut row, c) in raw.outer_iter_mut().zip(corr.pairs()) {
        for k in 0..3 {
            row[k] = c.source[k];
            row[k + 3] = c.target[k];
        }
    }
    let mean = raw.mean_axis(Axis(0)).expect("non-empty");
    let centred = raw - &mean;
    let mut out = Array2::zeros((n, INPUT_DIM));
    out.slice_mut(s![.., 0..6]).assign(&centred);
    out.slice_mut(s![.., 6..12])
        .assign(&centred.mapv(|v| (0.5 * v).sin()));
    out.slice_mut(s![.., 12..18])
        .assign(&centred.mapv(|v| (0.5 * v).cos()));
    Ok(out)
}

/// Parameters of the correspondence graph and consistency tolerance.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GraphParams {
    pub coverage: f64,
    pub k: usize,
    pub sigma_d: f64,
    pub start_index: usize,
}

impl Default for GraphParams {
    fn default() -> Self {
        Self {
            coverage: DEFAULT_NODE_COVERAGE,
            k: DEFAULT_NODE_K,
            sigma_d: crate::consistency::DEFAULT_SIGMA_D,
            start_index: 0,
        }
    }
}

/// One node's rows inside the stacked per-node feature matrix.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Segment {
    pub start: usize,
    pub len: usize,
}

/// Everything the network consumes for one correspondence set.
#[derive(Debug, Clone)]
pub struct ScNetInput {
    pub encoding: Array2<f64>,
    pub graph: DeformationGraph,
    pub consistency: LocalConsistency,
    /// Row ranges of the stacked matrix, one per consistency block.
    pub segments: Vec<Segment>,
    /// Correspondence index of each stacked row.
    pub gather: Vec<usize>,
    /// Skinning weight of each stacked row's (correspondence, node) pair.
    pub row_weights: Vec<f64>,
}

impl ScNetInput {
    pub fn prepare(corr: &CorrespondenceSet, params: &GraphParams) -> Result<Self> {
        if corr.is_empty() {
            return Err(Error::Empty("correspondence set"));
        }
        let graph = DeformationGraph::build(&corr.source_cloud(), params.coverage, params.k, params.start_index)?;
        let consistency = local_consistency(corr, &graph, params.sigma_d)?;
        Self::from_parts(corr, graph, consistency)
    }

    pub fn from_parts(
        corr: &CorrespondenceSet,
        graph: DeformationGraph,
        consistency: LocalConsistency,
    ) -> Result<Self> {
        let encoding = encode_input(corr)?;
        let mut segments = Vec::with_capacity(consistency.blocks.len());
        let mut gather = Vec::new();
        let mut row_weights = Vec::new();
        for b in &consistency.blocks {
            segments.push(Segment {
                start: gather.len(),
                len: b.members.len(),
            });
            for &i in &b.members {
                let w = graph.point_to_nodes[i]
                    .iter()
                    .find(|a| a.node == b.node)
                    .map(|a| a.weight)
                    .ok_or_else(|| Error::invalid("graph", "member without matching assignment"))?;
                gather.push(i);
                row_weights.push(w);
            }
        }
        Ok(Self {
            encoding,
            graph,
            consistency,
            segments,
            gather,
            row_weights,
        })
    }

    pub fn len(&self) -> usize {
        self.encoding.nrows()
    }

    pub fn is_empty(&self) -> bool {
        self.encoding.nrows() == 0
    }
}

/// Skinning-weighted sum of per-node rows back onto correspondences.
/// Contributions to a correspondence are added in ascending node order.
pub fn aggregate(node_features: &ArrayView2<f64>, input: &ScNetInput) -> Array2<f64> {
    let mut out = Array2::zeros((input.len(), node_features.ncols()));
    for (r, (&i, &w)) in input.gather.iter().zip(&input.row_weights).enumerate() {
        out.row_mut(i).scaled_add(w, &node_features.row(r));
    }
    out
}

/// Indices with score strictly above `tau_s`. When none qualify, the
/// top `max(8, ⌈5% N⌉)` scores are kept instead. Output is ascending.
pub fn classify(scores: &[f64], tau_s: f64) -> Vec<usize> {
    let picked: Vec<usize> = (0..scores.len()).filter(|&i| scores[i] > tau_s).collect();
    if !picked.is_empty() || scores.is_empty() {
        return picked;
    }
    let keep = FALLBACK_MIN_KEEP
        .max((FALLBACK_FRACTION * scores.len() as f64).ceil() as usize)
        .min(scores.len());
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order.truncate(keep);
    order.sort_unstable();
    order
}

#[derive(Debug, Clone)]
pub struct ScNetModel {
    pub arch: Architecture,
    pub layout: Layout,
    pub params: Vec<f64>,
    pub leaky_slope: f64,
}

#[derive(Debug, Clone)]
pub struct ForwardOutput {
    pub logits: Vec<f64>,
    pub scores: Vec<f64>,
    /// Final correspondence features (input of the head).
    pub features: Array2<f64>,
}

#[derive(Debug, Clone)]
struct MlpCache {
    input: Array2<f64>,
    norm: Option<(NormCache, Array2<f64>)>,
}

#[derive(Debug, Clone)]
struct UnitCache {
    x: Array2<f64>,
    q: Array2<f64>,
    k: Array2<f64>,
    v: Array2<f64>,
    probs: Vec<Array2<f64>>,
    attn: Array2<f64>,
    norm1: NormCache,
    z1: Array2<f64>,
    ffn_pre: Array2<f64>,
    ffn_hidden: Array2<f64>,
    norm2: NormCache,
}

/// Intermediate values recorded by a training forward pass.
#[derive(Debug, Clone, Default)]
pub struct Tape {
    init: Vec<MlpCache>,
    blocks: Vec<Vec<UnitCache>>,
    head: Vec<MlpCache>,
}

fn linear_grads<'a>(
    grad: &'a mut [f64],
    l: &LinearSlots,
) -> (ArrayViewMut2<'a, f64>, Option<ArrayViewMut1<'a, f64>>) {
    let w = l.weight;
    match l.bias {
        None => (w.mat_mut(grad), None),
        Some(b) => {
            debug_assert_eq!(b.offset, w.offset + w.len());
            let (ws, bs) = grad[w.offset..b.offset + b.len()].split_at_mut(w.len());
            (
                ArrayViewMut2::from_shape((w.rows, w.cols), ws).expect("slot shape"),
                Some(ArrayViewMut1::from(bs)),
            )
        }
    }
}

fn norm_grads<'a>(grad: &'a mut [f64], n: &NormSlots) -> (ArrayViewMut1<'a, f64>, ArrayViewMut1<'a, f64>) {
    debug_assert_eq!(n.beta.offset, n.gamma.offset + n.gamma.len());
    let (g, b) = grad[n.gamma.offset..n.beta.offset + n.beta.len()].split_at_mut(n.gamma.len());
    (ArrayViewMut1::from(g), ArrayViewMut1::from(b))
}

impl ScNetModel {
    /// Fresh model: linear weights and biases uniform in ±1/√fan_in from a
    /// seeded generator, norms at identity, σ_f at its default.
    pub fn new(arch: Architecture, seed: u64) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        let mut params = vec![0.0; layout.total];
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for (slot, fan_in) in layout.linear_weights() {
            let bound = (1.0 / fan_in as f64).sqrt();
            let dist = Uniform::new_inclusive(-bound, bound).expect("finite bound");
            for p in &mut params[slot.range()] {
                *p = dist.sample(&mut rng);
            }
        }
        for n in layout.norm_slots() {
            params[n.gamma.range()].fill(1.0);
        }
        params[layout.sigma_f.offset] = DEFAULT_SIGMA_F;
        Ok(Self {
            arch,
            layout,
            params,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    pub fn from_params(arch: Architecture, params: Vec<f64>) -> Result<Self> {
        arch.validate()?;
        let layout = Layout::new(&arch);
        if params.len() != layout.total {
            return Err(Error::ArchitectureMismatch(format!(
                "{} parameters supplied, architecture needs {}",
                params.len(),
                layout.total
            )));
        }
        Ok(Self {
            arch,
            layout,
            params,
            leaky_slope: DEFAULT_LEAKY_SLOPE,
        })
    }

    /// Loads a model file, rejecting any architecture other than `expected`.
    pub fn load(bytes: &[u8], expected: &Architecture) -> Result<(Self, Option<OptimizerState>)> {
        let file = decode_model(bytes)?;
        if &file.architecture != expected {
            return Err(Error::ArchitectureMismatch(format!(
                "file has {:?}, expected {:?}",
                file.architecture, expected
            )));
        }
        Ok((Self::from_params(file.architecture, file.params)?, file.optimizer))
    }

    pub fn to_bytes(&self, optimizer: Option<&OptimizerState>) -> Vec<u8> {
        encode_model(&self.arch, &self.params, optimizer)
    }

    pub fn param_count(&self) -> usize {
        self.params.len()
    }

    pub fn sigma_f(&self) -> f64 {
        self.params[self.layout.sigma_f.offset]
    }

    fn scale(&self) -> f64 {
        1.0 / (self.arch.feature_dim() as f64).sqrt()
    }

    /// Inference pass.
    pub fn forward(&self, input: &ScNetInput) -> ForwardOutput {
        self.run(input, None)
    }

    /// Training pass; records what [`ScNetModel::backward`] needs.
    pub fn forward_recorded(&self, input: &ScNetInput) -> (ForwardOutput, Tape) {
        let mut tape = Tape::default();
        let out = self.run(input, Some(&mut tape));
        (out, tape)
    }

    fn mlp_layer(&self, l: &MlpLayerSlots, x: Array2<f64>, tape: Option<&mut Vec<MlpCache>>) -> Array2<f64> {
        let p = &self.params;
        let bias = l.linear.bias.map(|b| b.vec(p));
        let y = ops::linear_forward(&x.view(), &l.linear.weight.mat(p), bias.as_ref());
        let (out, norm) = match &l.norm {
            Some(n) => {
                let (g, cache) = ops::group_norm_forward(&y.view(), self.arch.groups, &n.gamma.vec(p), &n.beta.vec(p));
                (ops::leaky_relu(&g.view(), self.leaky_slope), Some((cache, g)))
            }
            None => (y, None),
        };
        if let Some(t) = tape {
            t.push(MlpCache { input: x, norm });
        }
        out
    }

    fn unit(&self, u: &UnitSlots, x: Array2<f64>, input: &ScNetInput, tape: Option<&mut Vec<UnitCache>>) -> Array2<f64> {
        let p = &self.params;
        let xv = x.view();
        let q = ops::matmul(&xv, &u.query.mat(p));
        let k = ops::matmul(&xv, &u.key.mat(p));
        let v = ops::matmul(&xv, &u.value.mat(p));
        let scale = self.scale();
        let per_node = crate::par::map_indexed(input.segments.len(), |si| {
            let seg = input.segments[si];
            let rows = s![seg.start..seg.start + seg.len, ..];
            ops::attention_forward(
                &q.slice(rows),
                &k.slice(rows),
                &v.slice(rows),
                &input.consistency.blocks[si].theta.view(),
                scale,
            )
        });
        let mut attn = Array2::zeros(x.dim());
        for (seg, (o, _)) in input.segments.iter().zip(&per_node) {
            attn.slice_mut(s![seg.start..seg.start + seg.len, ..]).assign(o);
        }
        let m = ops::linear_forward(
            &attn.view(),
            &u.attn_out.weight.mat(p),
            u.attn_out.bias.map(|b| b.vec(p)).as_ref(),
        );
        let (z1, norm1) = ops::layer_norm_forward(&(&x + &m).view(), &u.norm1.gamma.vec(p), &u.norm1.beta.vec(p));
        let ffn_pre = ops::linear_forward(
            &z1.view(),
            &u.ffn_in.weight.mat(p),
            u.ffn_in.bias.map(|b| b.vec(p)).as_ref(),
        );
        let ffn_hidden = ops::relu(&ffn_pre.view());
        let g = ops::linear_forward(
            &ffn_hidden.view(),
            &u.ffn_out.weight.mat(p),
            u.ffn_out.bias.map(|b| b.vec(p)).as_ref(),
        );
        let (z, norm2) = ops::layer_norm_forward(&(&z1 + &g).view(), &u.norm2.gamma.vec(p), &u.norm2.beta.vec(p));
        if let Some(t) = tape {
            t.push(UnitCache {
                x,
                q,
                k,
                v,
                probs: per_node.into_iter().map(|(_, pr)| pr).collect(),
                attn,
                norm1,
                z1,
                ffn_pre,
                ffn_hidden,
                norm2,
            });
        }
        z
    }

    fn run(&self, input: &ScNetInput, mut tape: Option<&mut Tape>) -> ForwardOutput {
        let mut h = input.encoding.clone();
        for l in &self.layout.init {
            h = self.mlp_layer(l, h, tape.as_deref_mut().map(|t| &mut t.init));
        }
        for units in &self.layout.blocks {
            let mut caches = Vec::new();
            let mut z = h.select(Axis(0), &input.gather);
            for u in units {
                z = self.unit(u, z, input, tape.is_some().then_some(&mut caches));
            }
            h = aggregate(&z.view(), input);
            if let Some(t) = tape.as_deref_mut() {
                t.blocks.push(caches);
            }
        }
        let features = h.clone();
        for l in &self.layout.head {
            h = self.mlp_layer(l, h, tape.as_deref_mut().map(|t| &mut t.head));
        }
        let logits: Vec<f64> = h.column(0).to_vec();
        let scores = logits.iter().map(|&l| ops::sigmoid(l)).collect();
        ForwardOutput {
            logits,
            scores,
            features,
        }
    }

    fn mlp_layer_backward(&self, l: &MlpLayerSlots, cache: &MlpCache, dy: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let p = &self.params;
        let mut dy = dy;
        if let (Some(n), Some((nc, pre))) = (&l.norm, &cache.norm) {
            dy = ops::leaky_relu_backward(&pre.view(), &dy.view(), self.leaky_slope);
            let (mut gg, mut gb) = norm_grads(grad, n);
            dy = ops::group_norm_backward(nc, &n.gamma.vec(p), &dy.view(), &mut gg, &mut gb);
        }
        let (mut gw, mut gb) = linear_grads(grad, &l.linear);
        ops::linear_backward(&cache.input.view(), &l.linear.weight.mat(p), &dy.view(), &mut gw, gb.as_mut())
    }

    fn unit_backward(&self, u: &UnitSlots, c: &UnitCache, input: &ScNetInput, dz: Array2<f64>, grad: &mut [f64]) -> Array2<f64> {
        let p = &self.params;
        let dy2 = {
            let (mut gg, mut gb) = norm_grads(grad, &u.norm2);
            ops::layer_norm_backward(&c.norm2, &u.norm2.gamma.vec(p), &dz.view(), &mut gg, &mut gb)
        };
        let d_hidden = {
            let (mut gw, mut gb) = linear_grads(grad, &u.ffn_out);
            ops::linear_backward(&c.ffn_hidden.view(), &u.ffn_out.weight.mat(p), &dy2.view(), &mut gw, gb.as_mut())
        };
        let d_pre = ops::relu_backward(&c.ffn_pre.view(), &d_hidden.view());
        let mut dz1 = {
            let (mut gw, mut gb) = linear_grads(grad, &u.ffn_in);
            ops::linear_backward(&c.z1.view(), &u.ffn_in.weight.mat(p), &d_pre.view(), &mut gw, gb.as_mut())
        };
        dz1 += &dy2;
        let dy1 = {
            let (mut gg, mut gb) = norm_grads(grad, &u.norm1);
            ops::layer_norm_backward(&c.norm1, &u.norm1.gamma.vec(p), &dz1.view(), &mut gg, &mut gb)
        };
        let d_attn = {
            let (mut gw, mut gb) = linear_grads(grad, &u.attn_out);
            ops::linear_backward(&c.attn.view(), &u.attn_out.weight.mat(p), &dy1.view(), &mut gw, gb.as_mut())
        };
        let scale = self.scale();
        let per_node = crate::par::map_indexed(input.segments.len(), |si| {
            let seg = input.segments[si];
            let rows = s![seg.start..seg.start + seg.len, ..];
            ops::attention_backward(
                &c.q.slice(rows),
                &c.k.slice(rows),
                &c.v.slice(rows),
                &input.consistency.blocks[si].theta.view(),
                scale,
                &c.probs[si].view(),
                &d_attn.slice(rows),
            )
        });
        let mut dq = Array2::zeros(c.q.dim());
        let mut dk = Array2::zeros(c.k.dim());
        let mut dv = Array2::zeros(c.v.dim());
        for (seg, (a, b, v)) in input.segments.iter().zip(&per_node) {
            let rows = s![seg.start..seg.start + seg.len, ..];
            dq.slice_mut(rows).assign(a);
            dk.slice_mut(rows).assign(b);
            dv.slice_mut(rows).assign(v);
        }
        let mut dx = dy1;
        for (slot, d) in [(u.query, &dq), (u.key, &dk), (u.value, &dv)] {
            let mut gw = slot.mat_mut(grad);
            dx += &ops::linear_backward(&c.x.view(), &slot.mat(p), &d.view(), &mut gw, None);
        }
        dx
    }

    /// Accumulates gradients of a scalar loss into `grad` (same layout as
    /// `params`), given the loss gradient with respect to the logits and,
    /// optionally, to the final features.
    pub fn backward(
        &self,
        input: &ScNetInput,
        tape: &Tape,
        d_logits: &[f64],
        d_features: Option<&Array2<f64>>,
        grad: &mut [f64],
    ) {
        assert_eq!(grad.len(), self.params.len());
        let n = input.len();
        let mut dy = Array2::from_shape_vec((n, 1), d_logits.to_vec()).expect("one logit per row");
        for (l, cache) in self.layout.head.iter().zip(&tape.head).rev() {
            dy = self.mlp_layer_backward(l, cache, dy, grad);
        }
        if let Some(df) = d_features {
            dy += df;
        }
        for (units, caches) in self.layout.blocks.iter().zip(&tape.blocks).rev() {
            let mut dz = dy.select(Axis(0), &input.gather);
            for (mut row, &w) in dz.outer_iter_mut().zip(&input.row_weights) {
                row *= w;
            }
            for (u, c) in units.iter().zip(caches).rev() {
                dz = self.unit_backward(u, c, input, dz, grad);
            }
            let mut dh = Array2::zeros((n, dz.ncols()));
            for (r, &i) in input.gather.iter().enumerate() {
                let mut row = dh.row_mut(i);
                row += &dz.row(r);
            }
            dy = dh;
        }
        for (l, cache) in self.layout.init.iter().zip(&tape.init).rev() {
            dy = self.mlp_layer_backward(l, cache, dy, grad);
        }
    }
}

#[cfg(test)]
mod tests {
    use std::f64::consts::PI;

    use approx::assert_relative_eq;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::consistency::Correspondence;
    use crate::geometry::Point3;

    fn random_corr(seed: u64, n: usize) -> CorrespondenceSet {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        CorrespondenceSet::new(
            (0..n)
                .map(|_| {
                    let x = Point3::new(rng.random(), rng.random(), rng.random()) * 0.3;
                    let y = x + Point3::new(rng.random(), rng.random(), rng.random()) * 0.05;
                    Correspondence::new(x, y)
                })
                .collect(),
        )
        .unwrap()
    }

    fn micro_params() -> GraphParams {
        GraphParams {
            coverage: 0.12,
            k: 3,
            ..GraphParams::default()
        }
    }

    #[test]
    fn encoding_single_correspondence() {
        let c = CorrespondenceSet::new(vec![Correspondence::new(Point3::new(1.0, 2.0, 3.0), Point3::new(4.0, 5.0, 6.0))]).unwrap();
        let e = encode_input(&c).unwrap();
        assert_eq!(e.dim(), (1, 18));
        let expect: Vec<f64> = [0.0; 12].into_iter().chain([1.0; 6]).collect();
        assert_eq!(e.row(0).to_vec(), expect);
    }

    #[test]
    fn encoding_is_centred_and_uses_half_frequency() {
        let c = random_corr(1, 40);
        let e = encode_input(&c).unwrap();
        for k in 0..6 {
            assert!(e.column(k).sum().abs() < 1e-9);
        }
        let two = CorrespondenceSet::new(vec![
            Correspondence::new(Point3::new(-PI, 0.0, 0.0), Point3::zeros()),
            Correspondence::new(Point3::new(PI, 0.0, 0.0), Point3::zeros()),
        ])
        .unwrap();
        let e = encode_input(&two).unwrap();
        assert_relative_eq!(e[(1, 0)], PI);
        assert_relative_eq!(e[(1, 6)], 1.0, epsilon = 1e-15);
        assert_relative_eq!(e[(1, 12)], 0.0, epsilon = 1e-15);
        assert!(encode_input(&CorrespondenceSet::default()).is_err());
    }

    #[test]
    fn aggregate_single_and_identical() {
        let c = random_corr(2, 30);
        let input = ScNetInput::prepare(&c, &micro_params()).unwrap();
        // identical per-node rows -> aggregated row equals them (weights sum to 1)
        let rows = input.gather.len();
        let z = Array2::from_shape_fn((rows, 4), |(r, k)| (input.gather[r] * 10 + k) as f64);
        let h = aggregate(&z.view(), &input);
        for i in 0..c.len() {
            for k in 0..4 {
                assert_relative_eq!(h[(i, k)], (i * 10 + k) as f64, epsilon = 1e-9);
            }
        }
    }

    #[test]
    fn aggregate_two_node_weights() {
        // two points 0.08 apart, one node each, k = 2, bandwidth 0.05: weights ∝ (1, e^-1.28)
        let c = CorrespondenceSet::new(vec![
            Correspondence::new(Point3::zeros(), Point3::zeros()),
            Correspondence::new(Point3::new(0.08, 0.0, 0.0), Point3::zeros()),
        ])
        .unwrap();
        let input = ScNetInput::prepare(&c, &GraphParams { coverage: 0.05, k: 2, ..GraphParams::default() }).unwrap();
        assert_eq!(input.graph.node_count(), 2);
        let rows = input.gather.len();
        // node 0 rows carry 1.0, node 1 rows carry 3.0
        let mut z = Array2::zeros((rows, 1));
        for (si, seg) in input.segments.iter().enumerate() {
            for r in seg.start..seg.start + seg.len {
                z[(r, 0)] = if input.consistency.blocks[si].node == 0 { 1.0 } else { 3.0 };
            }
        }
        let h = aggregate(&z.view(), &input);
        let e = (-1.28f64).exp();
        let (w0, w1) = (1.0 / (1.0 + e), e / (1.0 + e));
        assert_relative_eq!(h[(0, 0)], w0 * 1.0 + w1 * 3.0, epsilon = 1e-12);
        assert_relative_eq!(h[(1, 0)], w1 * 1.0 + w0 * 3.0, epsilon = 1e-12);
    }

    #[test]
    fn classify_threshold_and_fallback() {
        assert_eq!(classify(&[0.9, 0.1], DEFAULT_TAU_S), vec![0]);
        let flat = vec![0.39; 100];
        assert_eq!(classify(&flat, 0.4), (0..8).collect::<Vec<_>>());
        let mut graded: Vec<f64> = (0..400).map(|i| i as f64 / 1000.0).collect();
        graded[3] = 0.399;
        let kept = classify(&graded, 1.0);
        assert_eq!(kept.len(), 20);
        assert!(kept.contains(&3));
        assert!(kept.contains(&399));
    }

    #[test]
    fn zero_model_gives_identical_scores() {
        let arch = Architecture::micro(8, 1, 2);
        let n = Layout::new(&arch).total;
        let model = ScNetModel::from_params(arch, vec![0.0; n]).unwrap();
        let input = ScNetInput::prepare(&random_corr(3, 25), &micro_params()).unwrap();
        let out = model.forward(&input);
        assert!(out.scores.iter().all(|&s| s == out.scores[0]));
    }

    #[test]
    fn scores_in_open_interval_and_deterministic() {
        let model = ScNetModel::new(Architecture::micro(16, 2, 2), 5).unwrap();
        let input = ScNetInput::prepare(&random_corr(4, 50), &micro_params()).unwrap();
        let a = model.forward(&input);
        let b = model.forward(&input);
        assert!(a.scores.iter().all(|&s| s > 0.0 && s < 1.0));
        let bits = |v: &[f64]| v.iter().map(|x| x.to_bits()).collect::<Vec<_>>();
        assert_eq!(bits(&a.scores), bits(&b.scores));
        let (c, _) = model.forward_recorded(&input);
        assert_eq!(bits(&a.scores), bits(&c.scores));
    }

    #[test]
    fn permutation_equivariance() {
        let model = ScNetModel::new(Architecture::micro(16, 2, 2), 6).unwrap();
        let c = random_corr(5, 40);
        let out = model.forward(&ScNetInput::prepare(&c, &micro_params()).unwrap());
        let perm: Vec<usize> = (0..40).rev().collect();
        let pc = c.subset(&perm);
        // keep the same first node so both graphs match up to relabeling
        let params = GraphParams { start_index: 39, ..micro_params() };
        let pout = model.forward(&ScNetInput::prepare(&pc, &params).unwrap());
        for (new, &old) in perm.iter().enumerate() {
            assert_relative_eq!(pout.scores[new], out.scores[old], epsilon = 1e-9);
        }
    }

    #[test]
    fn model_file_round_trip() {
        let model = ScNetModel::new(Architecture::micro(8, 1, 1), 1).unwrap();
        let bytes = model.to_bytes(None);
        let (loaded, opt) = ScNetModel::load(&bytes, &model.arch).unwrap();
        assert!(opt.is_none());
        for (a, b) in model.params.iter().zip(&loaded.params) {
            assert_eq!(*a as f32, *b as f32);
        }
        assert!(matches!(
            ScNetModel::load(&bytes, &Architecture::micro(16, 1, 1)),
            Err(Error::ArchitectureMismatch(_))
        ));
    }
}

//! Seeded synthetic scenes: a source surface, a ground-truth warp from the
//! embedded-deformation family, the warped target, and a corrupted
//! correspondence set with recorded inlier labels.

use std::f64::consts::{PI, TAU};
use std::fs;
use std::path::Path;

use nalgebra::{Unit, Vector3};
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};
use serde::{Deserialize, Serialize};

use crate::consistency::{Correspondence, CorrespondenceSet};
use crate::defgraph::{DeformationGraph, DEFAULT_SOLVER_COVERAGE, DEFAULT_SOLVER_K};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Point3, PointCloud, RigidTransform};
use crate::io;
use crate::nicp::WarpField;

/// Rough extent of every generated surface (meters).
const EXTENT: f64 = 0.5;
/// Outlier draws give up on shuffled targets after this many tries and
/// fall back to a uniform draw.
const SHUFFLE_TRIES: usize = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Surface {
    PlaneGrid,
    Cylinder,
    TwoLobeBlob,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum WarpKind {
    GlobalRigid,
    SmoothGraph,
    ArticulatedTwoPart,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum OutlierMode {
    UniformInBbox,
    ShuffledTarget,
}

/// Scales of the ground-truth motion.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WarpMagnitude {
    /// Global rotation angle (radians); also bounds the bend angle of
    /// smooth warps and the hinge angle of articulated ones.
    pub rotation: f64,
    /// Global translation length (meters).
    pub translation: f64,
    /// Sagitta of the smooth bend over the half-length (meters).
    pub deformation: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SceneSpec {
    pub point_count: usize,
    pub surface: Surface,
    pub warp_kind: WarpKind,
    pub warp_magnitude: WarpMagnitude,
    pub inlier_ratio: f64,
    pub inlier_noise_std: f64,
    pub outlier_mode: OutlierMode,
    /// Outliers are redrawn until their residual is at least `3·tau_d`.
    #[serde(default = "default_tau_d")]
    pub tau_d: f64,
    pub seed: u64,
}

fn default_tau_d() -> f64 {
    0.04
}

impl SceneSpec {
    pub fn new(point_count: usize, warp_kind: WarpKind, seed: u64) -> Self {
        Self {
            point_count,
            surface: Surface::TwoLobeBlob,
            warp_kind,
            warp_magnitude: WarpMagnitude {
                rotation: 15f64.to_radians(),
                translation: 0.1,
                deformation: 0.05,
            },
            inlier_ratio: 0.5,
            inlier_noise_std: 0.005,
            outlier_mode: OutlierMode::UniformInBbox,
            tau_d: default_tau_d(),
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.point_count == 0 {
            return Err(Error::invalid("point_count", "must be at least 1"));
        }
        if !(0.0..=1.0).contains(&self.inlier_ratio) {
            return Err(Error::invalid("inlier_ratio", format!("{} is outside [0, 1]", self.inlier_ratio)));
        }
        let nonneg = [
            ("inlier_noise_std", self.inlier_noise_std),
            ("warp_magnitude.rotation", self.warp_magnitude.rotation),
            ("warp_magnitude.translation", self.warp_magnitude.translation),
            ("warp_magnitude.deformation", self.warp_magnitude.deformation),
        ];
        for (name, v) in nonneg {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(Error::invalid(name, "must be finite and non-negative"));
            }
        }
        if self.warp_magnitude.rotation >= PI {
            return Err(Error::invalid("warp_magnitude.rotation", "must be below π"));
        }
        if !(self.tau_d > 0.0 && self.tau_d.is_finite()) {
            return Err(Error::invalid("tau_d", "must be positive"));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct Scene {
    pub spec: SceneSpec,
    pub source: PointCloud,
    pub target: PointCloud,
    pub gt_warp: WarpField,
    pub corr: CorrespondenceSet,
}

fn sample_surface(surface: Surface, n: usize, rng: &mut ChaCha8Rng) -> Vec<Point3> {
    match surface {
        Surface::PlaneGrid => {
            let side = (n as f64).sqrt().ceil().max(2.0) as usize;
            let step = EXTENT / (side - 1) as f64;
            (0..n)
                .map(|i| {
                    let (x, y) = ((i % side) as f64 * step, (i / side) as f64 * step);
                    Point3::new(x, y, 0.02 * (TAU * x / EXTENT).sin() * (PI * y / EXTENT).cos())
                })
                .collect()
        }
        Surface::Cylinder => (0..n)
            .map(|_| {
                let a = rng.random_range(0.0..TAU);
                let h = rng.random_range(0.0..EXTENT);
                Point3::new(0.15 * a.cos(), 0.15 * a.sin(), h)
            })
            .collect(),
        Surface::TwoLobeBlob => (0..n)
            .map(|i| {
                let d: [f64; 3] = UnitSphere.sample(rng);
                let d = Vector3::from(d);
                let centre = if i % 2 == 0 { -0.12 } else { 0.12 };
                let r = 0.13 * (1.0 + 0.15 * (3.0 * d.z.atan2(d.x)).sin());
                Point3::new(centre, 0.0, 0.0) + d * r
            })
            .collect(),
    }
}

fn random_axis(rng: &mut ChaCha8Rng) -> Unit<Vector3<f64>> {
    let d: [f64; 3] = UnitSphere.sample(rng);
    Unit::new_normalize(Vector3::from(d))
}

/// Node transforms realizing `p ↦ R(p−c)+c+t` exactly.
fn rigid_transforms(nodes: &[Point3], rotation: &nalgebra::Matrix3<f64>, c: &Point3, t: &Vector3<f64>) -> Vec<RigidTransform> {
    nodes
        .iter()
        .map(|v| RigidTransform::new(*rotation, rotation * (v - c) + c + t - v))
        .collect()
}

fn build_warp(spec: &SceneSpec, source: &PointCloud, rng: &mut ChaCha8Rng) -> Result<WarpField> {
    let graph = DeformationGraph::build(source, DEFAULT_SOLVER_COVERAGE, DEFAULT_SOLVER_K, 0)?;
    let m = spec.warp_magnitude;
    let c = source.centroid().expect("non-empty source");
    let rot = exp_so3(&(random_axis(rng).into_inner() * m.rotation));
    let trans = random_axis(rng).into_inner() * m.translation;
    let transforms = match spec.warp_kind {
        WarpKind::GlobalRigid => rigid_transforms(&graph.nodes, &rot, &c, &trans),
        WarpKind::SmoothGraph => {
            // bend along a random axis `a` towards `b`: (u, w) ↦ ((ρ−w) sin(u/ρ), ρ − (ρ−w) cos(u/ρ))
            // with ρ = 1/κ, so the local rotation at u is u/ρ about a×b
            let a = random_axis(rng).into_inner();
            let b = random_axis(rng).into_inner();
            let b = (b - a * a.dot(&b)).normalize();
            let axis = a.cross(&b);
            let half = source.points().iter().map(|p| (p - c).dot(&a).abs()).fold(0.0, f64::max).max(1e-9);
            // sagitta `deformation` over the half-length, capped so any two nodes differ by ≤ rotation
            let kappa = (2.0 * m.deformation / (half * half)).min(0.5 * m.rotation / half);
            let bend = |v: &Point3| -> (Point3, f64) {
                let d = v - c;
                let (u, w) = (d.dot(&a), d.dot(&b));
                let rest = d - a * u - b * w;
                if kappa < 1e-12 {
                    return (*v, 0.0);
                }
                let rho = 1.0 / kappa;
                let theta = u / rho;
                let bent = a * ((rho - w) * theta.sin()) + b * (rho - (rho - w) * theta.cos()) + rest;
                (c + bent, theta)
            };
            graph
                .nodes
                .iter()
                .map(|v| {
                    let (bent, theta) = bend(v);
                    let local = exp_so3(&(axis * theta));
                    RigidTransform::new(rot * local, rot * (bent - c) + c + trans - v)
                })
                .collect()
        }
        WarpKind::ArticulatedTwoPart => {
            // the x > c.x half additionally swings about a hinge through the centroid
            let hinge = exp_so3(&(random_axis(rng).into_inner() * m.rotation));
            let swung = rot * hinge;
            graph
                .nodes
                .iter()
                .map(|v| {
                    if v.x > c.x {
                        RigidTransform::new(swung, swung * (v - c) + c + trans - v)
                    } else {
                        RigidTransform::new(rot, rot * (v - c) + c + trans - v)
                    }
                })
                .collect()
        }
    };
    WarpField::new(graph, transforms)
}

pub fn generate_scene(spec: &SceneSpec) -> Result<Scene> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let source = PointCloud::new(sample_surface(spec.surface, spec.point_count, &mut rng))?;
    let gt_warp = build_warp(spec, &source, &mut rng)?;
    let anchors = &gt_warp.graph.point_to_nodes;
    let warped: Vec<Point3> = source
        .points()
        .iter()
        .zip(anchors)
        .map(|(p, a)| gt_warp.warp_anchored(p, a))
        .collect();
    let target = PointCloud::new(warped.clone())?;

    let n = spec.point_count;
    let inlier_count = ((spec.inlier_ratio * n as f64).round() as usize).min(n);
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut rng);
    let mut labels = vec![false; n];
    for &i in &order[..inlier_count] {
        labels[i] = true;
    }

    let noise = Normal::new(0.0, spec.inlier_noise_std).map_err(|e| Error::invalid("inlier_noise_std", e.to_string()))?;
    let (lo, hi) = target.bounds().expect("non-empty target");
    let margin = Vector3::repeat(3.0 * spec.tau_d);
    let (lo, hi) = (lo - margin, hi + margin);
    let floor = 3.0 * spec.tau_d;
    let uniform = |rng: &mut ChaCha8Rng| Point3::from_fn(|k, _| rng.random_range(lo[k]..=hi[k]));

    let pairs = (0..n)
        .map(|i| {
            let x = source.points()[i];
            let wx = warped[i];
            let y = if labels[i] {
                wx + Vector3::from_fn(|_, _| noise.sample(&mut rng))
            } else {
                let mut tries = 0;
                loop {
                    let y = match spec.outlier_mode {
                        OutlierMode::ShuffledTarget if tries < SHUFFLE_TRIES => warped[rng.random_range(0..n)],
                        _ => uniform(&mut rng),
                    };
                    tries += 1;
                    if (y - wx).norm() >= floor {
                        break y;
                    }
                }
            };
            Correspondence::new(x, y)
        })
        .collect();
    let corr = CorrespondenceSet::new(pairs)?.with_labels(labels)?;
    Ok(Scene {
        spec: *spec,
        source,
        target,
        gt_warp,
        corr,
    })
}

pub const BUNDLE_FILES: [&str; 5] = ["source.ply", "target.ply", "corr.csv", "warp.txt", "spec.json"];

impl Scene {
    pub fn write_bundle(&self, dir: &Path) -> Result<()> {
        fs::create_dir_all(dir)?;
        fs::write(dir.join("source.ply"), io::write_ply(&self.source))?;
        fs::write(dir.join("target.ply"), io::write_ply(&self.target))?;
        fs::write(dir.join("corr.csv"), io::write_corr_csv(&self.corr))?;
        fs::write(dir.join("warp.txt"), self.gt_warp.to_text())?;
        let json = serde_json::to_string_pretty(&self.spec).expect("scene spec serializes");
        fs::write(dir.join("spec.json"), json + "\n")?;
        Ok(())
    }

    pub fn read_bundle(dir: &Path) -> Result<Scene> {
        let spec_text = fs::read_to_string(dir.join("spec.json"))?;
        let spec: SceneSpec =
            serde_json::from_str(&spec_text).map_err(|e| Error::format("spec.json", e.line(), e.to_string()))?;
        let gt_text = fs::read_to_string(dir.join("warp.txt"))?;
        let mut gt_warp = WarpField::from_text(&gt_text)?;
        let source = io::read_cloud(&dir.join("source.ply"))?;
        // restore per-point skinning so the warp evaluates exactly as generated
        gt_warp.graph.point_to_nodes = source.points().iter().map(|p| gt_warp.graph.anchors(p)).collect();
        Ok(Scene {
            spec,
            target: io::read_cloud(&dir.join("target.ply"))?,
            corr: io::read_corr_csv(&dir.join("corr.csv"))?,
            source,
            gt_warp,
        })
    }
}

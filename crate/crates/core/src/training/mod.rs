//! Ground-truth labeling, the combined loss and its gradient, the seeded
//! training loop, and a finite-difference gradient check.

pub mod adam;
pub mod loss;

use std::fmt::Write as _;

use nalgebra::Vector3;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, UnitSphere};

use crate::consistency::{Correspondence, CorrespondenceSet};
use crate::error::{Error, Result};
use crate::geometry::{exp_so3, Point3};
use crate::nicp::WarpField;
use crate::scnet::arch::{Architecture, OptimizerState};
use crate::scnet::{GraphParams, ScNetInput, ScNetModel};

use self::adam::{Adam, AdamConfig};
use self::loss::{classification_loss, consistency_loss};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TrainConfig {
    pub epochs: usize,
    pub learning_rate: f64,
    /// The rate is multiplied by `1 − lr_decay_per_epoch` after each epoch.
    pub lr_decay_per_epoch: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub label_tau_d: f64,
    /// Weight of the consistency term.
    pub loss_lambda: f64,
    pub seed: u64,
    /// Random rigid motion of the targets per step (≤10° rotation,
    /// N(0, 0.05) translation).
    pub augment: bool,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            epochs: 40,
            learning_rate: 1e-4,
            lr_decay_per_epoch: 0.05,
            weight_decay: 1e-6,
            focal_gamma: 2.0,
            label_tau_d: 0.04,
            loss_lambda: 1.0,
            seed: 0,
            augment: false,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.epochs == 0 {
            return Err(Error::invalid("epochs", "must be at least 1"));
        }
        let checks = [
            ("learning_rate", self.learning_rate >= 0.0),
            ("lr_decay_per_epoch", (0.0..1.0).contains(&self.lr_decay_per_epoch)),
            ("weight_decay", self.weight_decay >= 0.0),
            ("focal_gamma", self.focal_gamma >= 0.0),
            ("label_tau_d", self.label_tau_d > 0.0),
            ("loss_lambda", self.loss_lambda >= 0.0),
        ];
        for (name, ok) in checks {
            if !ok {
                return Err(Error::invalid(name, "out of range"));
            }
        }
        Ok(())
    }

    pub fn learning_rate_at(&self, epoch: usize) -> f64 {
        self.learning_rate * (1.0 - self.lr_decay_per_epoch).powi(epoch as i32)
    }
}

/// Inlier iff the residual under the ground-truth warp is strictly below
/// `tau_d`.
pub fn label_correspondences(corr: &CorrespondenceSet, gt_warp: &WarpField, tau_d: f64) -> Vec<bool> {
    crate::par::map_slice(corr.pairs(), |c| (gt_warp.warp_point(&c.source) - c.target).norm() < tau_d)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossBreakdown {
    pub total: f64,
    pub cls: f64,
    pub con: f64,
}

/// `L_cls + λ L_con` from a forward pass; the consistency term is skipped
/// when `λ = 0`.
pub fn total_loss(model: &ScNetModel, input: &ScNetInput, labels: &[bool], gamma: f64, lambda: f64) -> Result<LossBreakdown> {
    let out = model.forward(input);
    let (cls, _) = classification_loss(&out.scores, labels, gamma);
    let con = if lambda == 0.0 {
        0.0
    } else {
        consistency_loss(&out.features.view(), &input.graph, labels, model.sigma_f())?.value
    };
    Ok(LossBreakdown {
        total: cls + lambda * con,
        cls,
        con,
    })
}

/// Loss and its gradient with respect to every parameter, σ_f included.
pub fn loss_and_grad(
    model: &ScNetModel,
    input: &ScNetInput,
    labels: &[bool],
    gamma: f64,
    lambda: f64,
) -> Result<(LossBreakdown, Vec<f64>)> {
    if labels.len() != input.len() {
        return Err(Error::invalid("labels", format!("{} labels for {} correspondences", labels.len(), input.len())));
    }
    let (out, tape) = model.forward_recorded(input);
    let (cls, d_logits) = classification_loss(&out.scores, labels, gamma);
    let mut grad = vec![0.0; model.param_count()];
    let con = if lambda == 0.0 {
        model.backward(input, &tape, &d_logits, None, &mut grad);
        0.0
    } else {
        let c = consistency_loss(&out.features.view(), &input.graph, labels, model.sigma_f())?;
        let d_features = c.d_features * lambda;
        model.backward(input, &tape, &d_logits, Some(&d_features), &mut grad);
        grad[model.layout.sigma_f.offset] += lambda * c.d_sigma_f;
        c.value
    };
    if let Some(i) = grad.iter().position(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient {
            layer: model.layout.name_of(i).to_string(),
        });
    }
    Ok((
        LossBreakdown {
            total: cls + lambda * con,
            cls,
            con,
        },
        grad,
    ))
}

/// Labeled correspondence sets with their prepared network inputs.
#[derive(Debug, Clone)]
pub struct TrainingSet {
    pub graph_params: GraphParams,
    pub scenes: Vec<CorrespondenceSet>,
    pub inputs: Vec<ScNetInput>,
}

impl TrainingSet {
    pub fn new(scenes: Vec<CorrespondenceSet>, graph_params: GraphParams) -> Result<Self> {
        if scenes.is_empty() {
            return Err(Error::Empty("training set"));
        }
        if let Some(i) = scenes.iter().position(|s| s.labels().is_none()) {
            return Err(Error::invalid("training set", format!("scene {i} has no labels")));
        }
        let inputs = crate::par::map_slice(&scenes, |s| ScNetInput::prepare(s, &graph_params))
            .into_iter()
            .collect::<Result<Vec<_>>>()?;
        Ok(Self {
            graph_params,
            scenes,
            inputs,
        })
    }

    pub fn len(&self) -> usize {
        self.scenes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scenes.is_empty()
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub mean_loss: f64,
    pub mean_cls: f64,
    pub mean_con: f64,
    pub lr: f64,
}

pub fn loss_log_csv(log: &[EpochLog]) -> String {
    let mut out = String::from("epoch,mean_loss,mean_cls,mean_con,lr\n");
    for e in log {
        let _ = writeln!(out, "{},{},{},{},{}", e.epoch, e.mean_loss, e.mean_cls, e.mean_con, e.lr);
    }
    out
}

/// Rigidly moves every target by a small random motion.
fn augment_targets(corr: &CorrespondenceSet, rng: &mut ChaCha8Rng) -> CorrespondenceSet {
    let axis: [f64; 3] = UnitSphere.sample(rng);
    let angle = rng.random_range(0.0..=10f64.to_radians());
    let rot = exp_so3(&(Vector3::from(axis) * angle));
    let normal = Normal::new(0.0, 0.05).expect("valid std");
    let t = Vector3::from_fn(|_, _| normal.sample(rng));
    corr.map_targets(|y| rot * y + t)
}

/// Trains in place with a fresh optimizer; see [`train_with`].
pub fn train(
    model: &mut ScNetModel,
    data: &TrainingSet,
    config: &TrainConfig,
    on_epoch: impl FnMut(&EpochLog),
) -> Result<(Vec<EpochLog>, OptimizerState)> {
    let adam = Adam::new(
        AdamConfig {
            weight_decay: config.weight_decay,
            ..AdamConfig::default()
        },
        model.param_count(),
    );
    train_with(model, adam, data, config, on_epoch)
}

/// One scene per step, scenes visited in a seeded random order each epoch.
pub fn train_with(
    model: &mut ScNetModel,
    mut adam: Adam,
    data: &TrainingSet,
    config: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochLog),
) -> Result<(Vec<EpochLog>, OptimizerState)> {
    config.validate()?;
    if data.is_empty() {
        return Err(Error::Empty("training set"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    let mut order: Vec<usize> = (0..data.len()).collect();
    let mut log = Vec::with_capacity(config.epochs);
    for epoch in 0..config.epochs {
        let lr = config.learning_rate_at(epoch);
        order.shuffle(&mut rng);
        let mut losses = vec![LossBreakdown { total: 0.0, cls: 0.0, con: 0.0 }; data.len()];
        for (step, &i) in order.iter().enumerate() {
            let labels = data.scenes[i].labels().expect("checked at construction");
            let augmented;
            let input = if config.augment {
                augmented = ScNetInput::prepare(&augment_targets(&data.scenes[i], &mut rng), &data.graph_params)?;
                &augmented
            } else {
                &data.inputs[i]
            };
            let (loss, grad) = loss_and_grad(model, input, labels, config.focal_gamma, config.loss_lambda)?;
            if !loss.total.is_finite() {
                return Err(Error::Divergence {
                    epoch: epoch + 1,
                    step,
                    loss: loss.total,
                });
            }
            adam.step(&mut model.params, &grad, lr);
            losses[i] = loss;
        }
        // summed in scene order so the means do not depend on the visit order
        let n = data.len() as f64;
        let mean = |f: fn(&LossBreakdown) -> f64| losses.iter().map(f).sum::<f64>() / n;
        let entry = EpochLog {
            epoch: epoch + 1,
            mean_loss: mean(|l| l.total),
            mean_cls: mean(|l| l.cls),
            mean_con: mean(|l| l.con),
            lr,
        };
        on_epoch(&entry);
        log.push(entry);
    }
    Ok((log, adam.state))
}

#[derive(Debug, Clone, PartialEq)]
pub struct GradCheckReport {
    pub parameters: usize,
    pub max_relative_error: f64,
    /// Tensor holding the worst-matching parameter.
    pub worst_tensor: String,
    pub loss: f64,
}

/// Central-difference step used by [`gradient_check`].
pub const GRADCHECK_STEP: f64 = 1e-4;
/// Magnitude below which gradient entries are compared absolutely.
pub const GRADCHECK_FLOOR: f64 = 1e-6;

/// Six correspondences in two well-separated clusters (one graph node each),
/// half of them outliers.
pub fn gradcheck_instance(seed: u64) -> Result<(CorrespondenceSet, GraphParams)> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let labels = vec![true, true, false, true, false, true];
    let motion = Vector3::new(0.05, 0.02, -0.01);
    let pairs = labels
        .iter()
        .enumerate()
        .map(|(i, &inlier)| {
            let centre = if i < 3 { Point3::zeros() } else { Point3::new(0.2, 0.0, 0.0) };
            let x = centre + Vector3::from_fn(|_, _| rng.random_range(-0.01..0.01));
            let y = if inlier {
                x + motion + Vector3::from_fn(|_, _| rng.random_range(-0.002..0.002))
            } else {
                Point3::from_fn(|_, _| rng.random_range(-0.3..0.3))
            };
            Correspondence::new(x, y)
        })
        .collect();
    let corr = CorrespondenceSet::new(pairs)?.with_labels(labels)?;
    let params = GraphParams {
        coverage: 0.1,
        k: 2,
        ..GraphParams::default()
    };
    Ok((corr, params))
}

/// Compares analytic gradients of the full loss with central differences
/// (step [`GRADCHECK_STEP`], Richardson-extrapolated) on every parameter of
/// a micro model (d = 16, one block, one unit).
pub fn gradient_check(seed: u64) -> Result<GradCheckReport> {
    let (corr, params) = gradcheck_instance(seed)?;
    let input = ScNetInput::prepare(&corr, &params)?;
    debug_assert_eq!(input.graph.node_count(), 2);
    let labels = corr.labels().expect("labeled");
    let mut model = ScNetModel::new(Architecture::micro(16, 1, 1), seed)?;
    let (gamma, lambda) = (2.0, 1.0);
    let (loss, grad) = loss_and_grad(&model, &input, labels, gamma, lambda)?;
    let mut worst = (0.0, 0);
    for i in 0..model.param_count() {
        let mut central = |h: f64| -> Result<f64> {
            let p = model.params[i];
            model.params[i] = p + h;
            let up = total_loss(&model, &input, labels, gamma, lambda)?.total;
            model.params[i] = p - h;
            let down = total_loss(&model, &input, labels, gamma, lambda)?.total;
            model.params[i] = p;
            Ok((up - down) / (2.0 * h))
        };
        // Richardson extrapolation cancels the O(h²) truncation term, which
        // otherwise dominates on entries with very small gradients
        let (coarse, fine) = (central(GRADCHECK_STEP)?, central(0.5 * GRADCHECK_STEP)?);
        let numeric = (4.0 * fine - coarse) / 3.0;
        let err = (grad[i] - numeric).abs() / grad[i].abs().max(numeric.abs()).max(GRADCHECK_FLOOR);
        if err > worst.0 || i == 0 {
            worst = (err, i);
        }
    }
    Ok(GradCheckReport {
        parameters: model.param_count(),
        max_relative_error: worst.0,
        worst_tensor: model.layout.name_of(worst.1).to_string(),
        loss: loss.total,
    })
}

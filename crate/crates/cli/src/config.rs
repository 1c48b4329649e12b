//! Flat key-value pipeline configuration (TOML).

use std::path::Path;

use nrreg_core::nicp::SolverConfig;
use nrreg_core::scnet::arch::Architecture;
use nrreg_core::scnet::GraphParams;
use nrreg_core::training::TrainConfig;
use serde::{Deserialize, Serialize};

use crate::failure::{invalid, Failure};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct PipelineConfig {
    // correspondence graph
    pub node_coverage: f64,
    pub node_k: usize,
    pub sigma_d: f64,
    pub fps_start: usize,
    // classification
    pub tau_s: f64,
    pub tau_d: f64,
    // registration
    pub sigma_g: f64,
    pub k_g: usize,
    pub lambda_c: f64,
    pub lambda_r: f64,
    pub lambda_m: f64,
    pub max_iterations: usize,
    pub cost_tolerance: f64,
    pub step_tolerance: f64,
    // network
    pub model_width: usize,
    pub model_init_layers: usize,
    pub model_blocks: usize,
    pub model_units: usize,
    pub model_groups: usize,
    pub model_seed: u64,
    // training
    pub epochs: usize,
    pub learning_rate: f64,
    pub lr_decay: f64,
    pub weight_decay: f64,
    pub focal_gamma: f64,
    pub loss_lambda: f64,
    pub train_seed: u64,
    pub augment: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        let graph = GraphParams::default();
        let solver = SolverConfig::default();
        let train = TrainConfig::default();
        Self {
            node_coverage: graph.coverage,
            node_k: graph.k,
            sigma_d: graph.sigma_d,
            fps_start: graph.start_index,
            tau_s: nrreg_core::scnet::DEFAULT_TAU_S,
            tau_d: train.label_tau_d,
            sigma_g: solver.coverage,
            k_g: solver.assign_k,
            lambda_c: solver.lambda_corr,
            lambda_r: solver.lambda_reg,
            lambda_m: solver.marquardt,
            max_iterations: solver.max_iterations,
            cost_tolerance: solver.cost_tolerance,
            step_tolerance: solver.step_tolerance,
            model_width: 256,
            model_init_layers: 3,
            model_blocks: 3,
            model_units: 2,
            model_groups: 8,
            model_seed: 0,
            epochs: train.epochs,
            learning_rate: train.learning_rate,
            lr_decay: train.lr_decay_per_epoch,
            weight_decay: train.weight_decay,
            focal_gamma: train.focal_gamma,
            loss_lambda: train.loss_lambda,
            train_seed: train.seed,
            augment: train.augment,
        }
    }
}

fn check(ok: bool, key: &str, what: &str) -> Result<(), Failure> {
    if ok {
        Ok(())
    } else {
        Err(invalid(format!("config key `{key}` {what}")))
    }
}

impl PipelineConfig {
    pub fn load(path: &Path) -> anyhow::Result<Self> {
        let text = std::fs::read_to_string(path)?;
        Ok(Self::parse(&text)?)
    }

    pub fn parse(text: &str) -> Result<Self, Failure> {
        let cfg: Self = toml::from_str(text).map_err(|e| invalid(format!("config: {}", e.message())))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), Failure> {
        let positive = [
            ("node_coverage", self.node_coverage),
            ("sigma_d", self.sigma_d),
            ("tau_d", self.tau_d),
            ("sigma_g", self.sigma_g),
            ("lambda_c", self.lambda_c),
            ("lambda_r", self.lambda_r),
            ("lambda_m", self.lambda_m),
            ("cost_tolerance", self.cost_tolerance),
            ("step_tolerance", self.step_tolerance),
        ];
        for (key, v) in positive {
            check(v > 0.0 && v.is_finite(), key, "must be positive and finite")?;
        }
        let non_negative = [
            ("learning_rate", self.learning_rate),
            ("weight_decay", self.weight_decay),
            ("focal_gamma", self.focal_gamma),
            ("loss_lambda", self.loss_lambda),
        ];
        for (key, v) in non_negative {
            check(v >= 0.0 && v.is_finite(), key, "must be non-negative and finite")?;
        }
        let counts = [
            ("node_k", self.node_k),
            ("k_g", self.k_g),
            ("max_iterations", self.max_iterations),
            ("model_width", self.model_width),
            ("model_init_layers", self.model_init_layers),
            ("model_groups", self.model_groups),
            ("epochs", self.epochs),
        ];
        for (key, v) in counts {
            check(v >= 1, key, "must be at least 1")?;
        }
        check((0.0..=1.0).contains(&self.tau_s), "tau_s", "must lie in [0, 1]")?;
        check((0.0..1.0).contains(&self.lr_decay), "lr_decay", "must lie in [0, 1)")?;
        check(self.model_width.is_multiple_of(4), "model_width", "must be a multiple of 4")?;
        check(self.blocks_valid(), "model_units", "must be at least 1 when model_blocks > 0")?;
        self.architecture()
            .validate()
            .map_err(|e| invalid(format!("config key `model_groups`: {e}")))?;
        Ok(())
    }

    fn blocks_valid(&self) -> bool {
        self.model_blocks == 0 || self.model_units >= 1
    }

    /// Applies a global `--seed` to every seeded stage.
    pub fn with_seed(mut self, seed: Option<u64>) -> Self {
        if let Some(s) = seed {
            self.model_seed = s;
            self.train_seed = s;
        }
        self
    }

    pub fn graph_params(&self) -> GraphParams {
        GraphParams {
            coverage: self.node_coverage,
            k: self.node_k,
            sigma_d: self.sigma_d,
            start_index: self.fps_start,
        }
    }

    pub fn solver(&self) -> SolverConfig {
        SolverConfig {
            lambda_corr: self.lambda_c,
            lambda_reg: self.lambda_r,
            marquardt: self.lambda_m,
            max_iterations: self.max_iterations,
            cost_tolerance: self.cost_tolerance,
            step_tolerance: self.step_tolerance,
            coverage: self.sigma_g,
            assign_k: self.k_g,
        }
    }

    pub fn architecture(&self) -> Architecture {
        Architecture::scaled(
            self.model_width,
            self.model_init_layers,
            self.model_blocks,
            self.model_units,
            self.model_groups,
        )
    }

    pub fn train(&self) -> TrainConfig {
        TrainConfig {
            epochs: self.epochs,
            learning_rate: self.learning_rate,
            lr_decay_per_epoch: self.lr_decay,
            weight_decay: self.weight_decay,
            focal_gamma: self.focal_gamma,
            label_tau_d: self.tau_d,
            loss_lambda: self.loss_lambda,
            seed: self.train_seed,
            augment: self.augment,
        }
    }
}

//! Variant-erased handle over every model in the comparison, so the
//! trainer, evaluator, and CLI run one code path regardless of which
//! architecture is behind it.

use crate::baselines::{BaselineConfig, MmoeModel, SharedBottomModel, SingleTaskModel};
use crate::config::{ModelConfig, Variant};
use crate::features::Batch;
use crate::meta::M2MModel;
use crate::tensor::{Graph, NodeId, ParamStore, TensorError};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// What the training and evaluation loops need from any model variant.
pub trait Model {
    /// One rate node per task, each [n, 1] and strictly positive.
    fn forward_rates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<NodeId>, TensorError>;

    fn config(&self) -> &ModelConfig;

    fn variant(&self) -> Variant;

    /// Per-task output scale of the rate heads.
    fn output_scales(&self) -> Vec<f64>;

    /// Calibrates the rate heads, typically to the train label means.
    fn set_output_scales(&mut self, scales: &[f64]);

    /// The widths the budget solver chose; None for the scenario-aware
    /// model, whose dimensions all come from [`ModelConfig`].
    fn baseline_config(&self) -> Option<&BaselineConfig> {
        None
    }
}

impl Model for M2MModel {
    fn forward_rates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<NodeId>, TensorError> {
        Ok(self.forward(g, store, batch)?.rates)
    }

    fn config(&self) -> &ModelConfig {
        M2MModel::config(self)
    }

    fn variant(&self) -> Variant {
        Variant::M2m
    }

    fn output_scales(&self) -> Vec<f64> {
        M2MModel::output_scales(self)
    }

    fn set_output_scales(&mut self, scales: &[f64]) {
        M2MModel::set_output_scales(self, scales)
    }
}

impl Model for SingleTaskModel {
    fn forward_rates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<NodeId>, TensorError> {
        (0..self.config().shape.n_tasks)
            .map(|t| self.forward_task(g, store, batch, t))
            .collect()
    }

    fn config(&self) -> &ModelConfig {
        SingleTaskModel::config(self)
    }

    fn variant(&self) -> Variant {
        Variant::SingleTask
    }

    fn output_scales(&self) -> Vec<f64> {
        SingleTaskModel::output_scales(self)
    }

    fn set_output_scales(&mut self, scales: &[f64]) {
        SingleTaskModel::set_output_scales(self, scales)
    }

    fn baseline_config(&self) -> Option<&BaselineConfig> {
        Some(SingleTaskModel::baseline_config(self))
    }
}

impl Model for SharedBottomModel {
    fn forward_rates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<NodeId>, TensorError> {
        self.forward_all(g, store, batch)
    }

    fn config(&self) -> &ModelConfig {
        SharedBottomModel::config(self)
    }

    fn variant(&self) -> Variant {
        Variant::SharedBottom
    }

    fn output_scales(&self) -> Vec<f64> {
        SharedBottomModel::output_scales(self)
    }

    fn set_output_scales(&mut self, scales: &[f64]) {
        SharedBottomModel::set_output_scales(self, scales)
    }

    fn baseline_config(&self) -> Option<&BaselineConfig> {
        Some(SharedBottomModel::baseline_config(self))
    }
}

impl Model for MmoeModel {
    fn forward_rates(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<NodeId>, TensorError> {
        Ok(self.forward_all(g, store, batch)?.0)
    }

    fn config(&self) -> &ModelConfig {
        MmoeModel::config(self)
    }

    fn variant(&self) -> Variant {
        Variant::Mmoe
    }

    fn output_scales(&self) -> Vec<f64> {
        MmoeModel::output_scales(self)
    }

    fn set_output_scales(&mut self, scales: &[f64]) {
        MmoeModel::set_output_scales(self, scales)
    }

    fn baseline_config(&self) -> Option<&BaselineConfig> {
        Some(MmoeModel::baseline_config(self))
    }
}

/// Initializes the requested variant into `store`, budget-solving baseline
/// widths first. The seed fixes every weight; equal seeds give equal bytes.
pub fn build_model(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    variant: Variant,
    seed: u64,
) -> Result<Box<dyn Model>, TensorError> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    match variant {
        Variant::M2m => Ok(Box::new(M2MModel::init(store, cfg, &mut rng)?)),
        Variant::SingleTask => {
            let bcfg = BaselineConfig::derive(cfg, variant)?;
            Ok(Box::new(SingleTaskModel::init(store, cfg, &bcfg, &mut rng)?))
        }
        Variant::SharedBottom => {
            let bcfg = BaselineConfig::derive(cfg, variant)?;
            Ok(Box::new(SharedBottomModel::init(store, cfg, &bcfg, &mut rng)?))
        }
        Variant::Mmoe => {
            let bcfg = BaselineConfig::derive(cfg, variant)?;
            Ok(Box::new(MmoeModel::init(store, cfg, &bcfg, &mut rng)?))
        }
    }
}

/// Rebuild a variant around an already-populated store (checkpoint load):
/// the architecture comes from the configs, the weights stay untouched.
/// The store must have been produced by the same variant and configs.
pub fn rebuild_model(
    store: &ParamStore,
    cfg: &ModelConfig,
    variant: Variant,
    bcfg: Option<&BaselineConfig>,
) -> Result<Box<dyn Model>, TensorError> {
    // Initializing into a scratch store recreates the same ParamIds in the
    // same order; the ids index into whichever store the caller passes.
    let mut scratch = ParamStore::new();
    let model = match bcfg {
        None => build_model(&mut scratch, cfg, variant, 0)?,
        Some(b) => {
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            match variant {
                Variant::SingleTask => Box::new(SingleTaskModel::init(&mut scratch, cfg, b, &mut rng)?) as Box<dyn Model>,
                Variant::SharedBottom => {
                    Box::new(SharedBottomModel::init(&mut scratch, cfg, b, &mut rng)?) as Box<dyn Model>
                }
                Variant::Mmoe => Box::new(MmoeModel::init(&mut scratch, cfg, b, &mut rng)?) as Box<dyn Model>,
                Variant::M2m => build_model(&mut scratch, cfg, variant, 0)?,
            }
        }
    };
    for (got, want) in scratch.ids().zip(store.ids()) {
        if scratch.name(got) != store.name(want)
            || scratch.value(got).shape() != store.value(want).shape()
        {
            return Err(TensorError::InvalidShape {
                op: "rebuild_model",
                shape: store.value(want).shape().to_vec(),
                reason: format!(
                    "store layout mismatch at {} (expected {} {:?})",
                    store.name(want),
                    scratch.name(got),
                    scratch.value(got).shape()
                ),
            });
        }
    }
    if scratch.len() != store.len() {
        return Err(TensorError::InvalidShape {
            op: "rebuild_model",
            shape: vec![store.len()],
            reason: format!("expected {} parameters", scratch.len()),
        });
    }
    Ok(model)
}

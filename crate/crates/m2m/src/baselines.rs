//! Reference models for the comparison table: Single-Task, Shared-Bottom,
//! and MMoE. All three consume the identical featurization the
//! scenario-aware model sees, with the raw scenario-attribute and profile
//! embeddings concatenated into F as plain inputs; differences in the
//! results therefore isolate the prediction-stage architecture.
//!
//! Hidden widths are not fixed by hand. [`BaselineConfig::derive`] solves
//! them from a parameter budget matched to the scenario-aware model's
//! non-generator count, so no baseline is starved or oversized relative to
//! the model it is compared against.

use crate::backbone::{Linear, Trunk};
use crate::config::{ModelConfig, Variant};
use crate::features::Batch;
use crate::meta::{combine_views, M2MModel, RateHead};
use crate::tensor::{Graph, NodeId, ParamGroup, ParamStore, TensorError};
use rand::Rng;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// Baselines must land within this relative distance of the budget.
pub const BUDGET_TOLERANCE: f64 = 0.10;

/// How a gate turns logits into mixture weights. Softmax is the only gate
/// the comparison needs; the enum keeps checkpoints explicit about it.
#[derive(Debug, Clone, Copy, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum GateKind {
    Softmax,
}

/// Resolved baseline architecture: the variant plus every width the budget
/// solver chose. Widths are data, not policy, so runs can log them.
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BaselineConfig {
    pub variant: Variant,
    /// Hidden width of each bottom/expert two-layer MLP.
    pub bottom_hidden: usize,
    /// Expert count; meaningful for MMoE, 1 elsewhere.
    pub n_experts: usize,
    pub tower_layers: usize,
    pub gate: GateKind,
}

/// Non-generator parameter count of the scenario-aware model at this
/// config: the budget every baseline is sized against. Meta-ablation flags
/// are cleared first so ablation runs compare against the same budget.
pub fn parameter_budget(cfg: &ModelConfig) -> Result<usize, TensorError> {
    let full = ModelConfig {
        disable_meta_attention: false,
        disable_meta_tower: false,
        ..cfg.clone()
    };
    let mut store = ParamStore::new();
    let mut rng = ChaCha8Rng::seed_from_u64(0);
    M2MModel::init(&mut store, &full, &mut rng)?;
    Ok(store.total_len() - store.total_len_in_group(ParamGroup::MetaGenerator))
}

impl BaselineConfig {
    fn with_hidden(cfg: &ModelConfig, variant: Variant, bottom_hidden: usize) -> BaselineConfig {
        BaselineConfig {
            variant,
            bottom_hidden,
            n_experts: if variant == Variant::Mmoe { cfg.n_experts } else { 1 },
            tower_layers: cfg.tower_layers,
            gate: GateKind::Softmax,
        }
    }

    /// Solve the hidden width that brings this baseline's parameter count
    /// closest to [`parameter_budget`]. Counts are affine in the width, so
    /// two probe builds pin the line exactly; the result is clamped to 1.
    pub fn derive(cfg: &ModelConfig, variant: Variant) -> Result<BaselineConfig, TensorError> {
        let target = parameter_budget(cfg)? as f64;
        let count_at = |h: usize| -> Result<usize, TensorError> {
            let mut store = ParamStore::new();
            let mut rng = ChaCha8Rng::seed_from_u64(0);
            build_with(&mut store, cfg, &Self::with_hidden(cfg, variant, h), &mut rng)?;
            Ok(store.total_len())
        };
        let c1 = count_at(1)? as f64;
        let c2 = count_at(2)? as f64;
        let slope = c2 - c1;
        let base = c1 - slope;
        let h = ((target - base) / slope).round().max(1.0) as usize;
        Ok(Self::with_hidden(cfg, variant, h))
    }
}

/// Two-layer LeakyReLU MLP with a free hidden width.
#[derive(Debug, Clone)]
struct Mlp2 {
    l1: Linear,
    l2: Linear,
    slope: f64,
}

impl Mlp2 {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        hidden: usize,
        d_out: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<Mlp2, TensorError> {
        Ok(Mlp2 {
            l1: Linear::init(store, &format!("{prefix}.l1"), ParamGroup::Backbone, d_in, hidden, rng)?,
            l2: Linear::init(store, &format!("{prefix}.l2"), ParamGroup::Backbone, hidden, d_out, rng)?,
            slope,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let h = self.l1.forward(g, store, x)?;
        let h = g.leaky_relu(h, self.slope);
        let o = self.l2.forward(g, store, h)?;
        Ok(g.leaky_relu(o, self.slope))
    }
}

/// Per-task prediction tower shared by every baseline: project the
/// d_view-wide representation down, run the static layers, emit a rate.
#[derive(Debug, Clone)]
struct TowerStack {
    proj: Linear,
    layers: Vec<Linear>,
    head: RateHead,
    slope: f64,
}

impl TowerStack {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        layers: usize,
        rng: &mut R,
    ) -> Result<TowerStack, TensorError> {
        Ok(TowerStack {
            proj: Linear::init(
                store,
                &format!("{prefix}.proj"),
                ParamGroup::Backbone,
                cfg.d_view,
                cfg.d_meta,
                rng,
            )?,
            layers: (0..layers)
                .map(|j| {
                    Linear::init(
                        store,
                        &format!("{prefix}.l{j}"),
                        ParamGroup::Backbone,
                        cfg.d_meta,
                        cfg.d_meta,
                        rng,
                    )
                })
                .collect::<Result<_, _>>()?,
            head: RateHead::init(store, &format!("{prefix}.head"), cfg.d_meta, cfg.rate_link, rng)?,
            slope: cfg.leaky_slope,
        })
    }

    fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let a = self.proj.forward(g, store, x)?;
        let mut h = g.leaky_relu(a, self.slope);
        for layer in &self.layers {
            let a = layer.forward(g, store, h)?;
            h = g.leaky_relu(a, self.slope);
        }
        self.head.forward(g, store, h)
    }
}

/// F with the raw categorical embeddings appended; the baseline analogue of
/// "scenario information as plain input features".
fn fuse_with_cats(
    trunk: &Trunk,
    g: &mut Graph,
    store: &ParamStore,
    batch: &Batch,
) -> Result<NodeId, TensorError> {
    let cat = trunk.tables.categorical_embeds(g, store, batch)?;
    trunk.fuse(g, store, batch, Some(cat))
}

/// One fully private model per task: nothing is shared, so the joint loss
/// decomposes and training matches m separate single-task runs.
pub struct SingleTaskModel {
    nets: Vec<TaskNet>,
    cfg: ModelConfig,
    bcfg: BaselineConfig,
}

struct TaskNet {
    trunk: Trunk,
    bottom: Mlp2,
    tower: TowerStack,
}

impl SingleTaskModel {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        bcfg: &BaselineConfig,
        rng: &mut R,
    ) -> Result<SingleTaskModel, TensorError> {
        let nets = (0..cfg.shape.n_tasks)
            .map(|t| {
                let p = format!("st.task{t}");
                let trunk = Trunk::init(store, &p, cfg, rng)?;
                let bottom = Mlp2::init(
                    store,
                    &format!("{p}.bottom"),
                    cfg.fused_dim() + cfg.cat_dim(),
                    bcfg.bottom_hidden,
                    cfg.d_view,
                    cfg.leaky_slope,
                    rng,
                )?;
                let tower = TowerStack::init(store, &format!("{p}.tower"), cfg, bcfg.tower_layers, rng)?;
                Ok(TaskNet { trunk, bottom, tower })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(SingleTaskModel {
            nets,
            cfg: cfg.clone(),
            bcfg: bcfg.clone(),
        })
    }

    /// Rate of one task through that task's private network.
    pub fn forward_task(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        task: usize,
    ) -> Result<NodeId, TensorError> {
        let net = &self.nets[task];
        let f = fuse_with_cats(&net.trunk, g, store, batch)?;
        let shared = net.bottom.forward(g, store, f)?;
        net.tower.forward(g, store, shared)
    }

    pub fn baseline_config(&self) -> &BaselineConfig {
        &self.bcfg
    }
}

/// One shared trunk and bottom; only the towers are task-specific.
pub struct SharedBottomModel {
    trunk: Trunk,
    bottom: Mlp2,
    towers: Vec<TowerStack>,
    cfg: ModelConfig,
    bcfg: BaselineConfig,
}

impl SharedBottomModel {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        bcfg: &BaselineConfig,
        rng: &mut R,
    ) -> Result<SharedBottomModel, TensorError> {
        let trunk = Trunk::init(store, "sb", cfg, rng)?;
        let bottom = Mlp2::init(
            store,
            "sb.bottom",
            cfg.fused_dim() + cfg.cat_dim(),
            bcfg.bottom_hidden,
            cfg.d_view,
            cfg.leaky_slope,
            rng,
        )?;
        let towers = (0..cfg.shape.n_tasks)
            .map(|t| TowerStack::init(store, &format!("sb.task{t}.tower"), cfg, bcfg.tower_layers, rng))
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(SharedBottomModel {
            trunk,
            bottom,
            towers,
            cfg: cfg.clone(),
            bcfg: bcfg.clone(),
        })
    }

    pub fn forward_all(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<Vec<NodeId>, TensorError> {
        let f = fuse_with_cats(&self.trunk, g, store, batch)?;
        let shared = self.bottom.forward(g, store, f)?;
        self.towers
            .iter()
            .map(|tw| tw.forward(g, store, shared))
            .collect()
    }

    pub fn baseline_config(&self) -> &BaselineConfig {
        &self.bcfg
    }
}

/// Shared experts with per-task softmax gates over them.
pub struct MmoeModel {
    trunk: Trunk,
    experts: Vec<Mlp2>,
    gates: Vec<Linear>,
    towers: Vec<TowerStack>,
    cfg: ModelConfig,
    bcfg: BaselineConfig,
}

impl MmoeModel {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        bcfg: &BaselineConfig,
        rng: &mut R,
    ) -> Result<MmoeModel, TensorError> {
        let trunk = Trunk::init(store, "mmoe", cfg, rng)?;
        let d_f = cfg.fused_dim() + cfg.cat_dim();
        let experts = (0..bcfg.n_experts)
            .map(|i| {
                Mlp2::init(
                    store,
                    &format!("mmoe.expert{i}"),
                    d_f,
                    bcfg.bottom_hidden,
                    cfg.d_view,
                    cfg.leaky_slope,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        let mut gates = Vec::with_capacity(cfg.shape.n_tasks);
        let mut towers = Vec::with_capacity(cfg.shape.n_tasks);
        for t in 0..cfg.shape.n_tasks {
            gates.push(Linear::init(
                store,
                &format!("mmoe.task{t}.gate"),
                ParamGroup::Backbone,
                d_f,
                bcfg.n_experts,
                rng,
            )?);
            towers.push(TowerStack::init(
                store,
                &format!("mmoe.task{t}.tower"),
                cfg,
                bcfg.tower_layers,
                rng,
            )?);
        }
        Ok(MmoeModel {
            trunk,
            experts,
            gates,
            towers,
            cfg: cfg.clone(),
            bcfg: bcfg.clone(),
        })
    }

    /// Rates for every task plus the per-task gate weight matrices [n, k].
    pub fn forward_all(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<(Vec<NodeId>, Vec<NodeId>), TensorError> {
        let f = fuse_with_cats(&self.trunk, g, store, batch)?;
        let views = self
            .experts
            .iter()
            .map(|e| e.forward(g, store, f))
            .collect::<Result<Vec<_>, TensorError>>()?;
        let mut rates = Vec::with_capacity(self.towers.len());
        let mut weights = Vec::with_capacity(self.towers.len());
        for (gate, tower) in self.gates.iter().zip(&self.towers) {
            let logits = gate.forward(g, store, f)?;
            let scores = (0..self.experts.len())
                .map(|i| g.col(logits, i))
                .collect::<Result<Vec<_>, TensorError>>()?;
            let (blend, alpha) = combine_views(g, &scores, &views)?;
            rates.push(tower.forward(g, store, blend)?);
            weights.push(alpha);
        }
        Ok((rates, weights))
    }

    pub fn baseline_config(&self) -> &BaselineConfig {
        &self.bcfg
    }
}

/// Dispatch used by the budget solver's probe builds.
fn build_with<R: Rng>(
    store: &mut ParamStore,
    cfg: &ModelConfig,
    bcfg: &BaselineConfig,
    rng: &mut R,
) -> Result<(), TensorError> {
    match bcfg.variant {
        Variant::SingleTask => SingleTaskModel::init(store, cfg, bcfg, rng).map(|_| ()),
        Variant::SharedBottom => SharedBottomModel::init(store, cfg, bcfg, rng).map(|_| ()),
        Variant::Mmoe => MmoeModel::init(store, cfg, bcfg, rng).map(|_| ()),
        Variant::M2m => Err(TensorError::InvalidShape {
            op: "baseline_build",
            shape: vec![],
            reason: "not a baseline variant".to_string(),
        }),
    }
}

impl SingleTaskModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn output_scales(&self) -> Vec<f64> {
        self.nets.iter().map(|n| n.tower.head.scale()).collect()
    }

    pub fn set_output_scales(&mut self, scales: &[f64]) {
        for (n, &s) in self.nets.iter_mut().zip(scales) {
            n.tower.head.set_scale(s);
        }
    }
}

impl SharedBottomModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn output_scales(&self) -> Vec<f64> {
        self.towers.iter().map(|t| t.head.scale()).collect()
    }

    pub fn set_output_scales(&mut self, scales: &[f64]) {
        for (t, &s) in self.towers.iter_mut().zip(scales) {
            t.head.set_scale(s);
        }
    }
}

impl MmoeModel {
    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn output_scales(&self) -> Vec<f64> {
        self.towers.iter().map(|t| t.head.scale()).collect()
    }

    pub fn set_output_scales(&mut self, scales: &[f64]) {
        for (t, &s) in self.towers.iter_mut().zip(scales) {
            t.head.set_scale(s);
        }
    }
}

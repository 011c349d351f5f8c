//! Scenario-conditioned prediction stage: meta units generate per-sample
//! network weights from the scenario knowledge vector, meta attention blends
//! expert views under those generated scores, and meta residual towers refine
//! the blend before the positive rate head.
//!
//! Generator parameters (the matrices that map S̃ to weights) live in their
//! own parameter group so the loss can regularize them separately from
//! everything else.

use crate::backbone::{Backbone, Linear};
use crate::config::{ModelConfig, RateLink};
use crate::features::Batch;
use crate::tensor::{
    xavier_uniform, Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor, TensorError,
};
use rand::Rng;

/// One generated layer: V_w/v_w produce the d×d weight, V_b/v_b the bias.
#[derive(Debug, Clone)]
struct MetaLayer {
    v_w: ParamId,
    v_w_bias: ParamId,
    v_b: ParamId,
    v_b_bias: ParamId,
}

/// A K-layer network whose weights are not stored but generated from S̃ on
/// every forward pass. Distinct samples in a batch get distinct weights.
#[derive(Debug, Clone)]
pub struct MetaUnit {
    layers: Vec<MetaLayer>,
    d: usize,
    slope: f64,
}

impl MetaUnit {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_s: usize,
        d: usize,
        depth: usize,
        slope: f64,
        rng: &mut R,
    ) -> Result<MetaUnit, TensorError> {
        let layers = (0..depth)
            .map(|i| {
                let p = format!("{prefix}.gen{i}");
                Ok(MetaLayer {
                    v_w: store.add(
                        &format!("{p}.V_w"),
                        ParamGroup::MetaGenerator,
                        xavier_uniform(&[d_s, d * d], rng),
                    )?,
                    v_w_bias: store.add(
                        &format!("{p}.v_w"),
                        ParamGroup::MetaGenerator,
                        Tensor::zeros(&[d * d]),
                    )?,
                    v_b: store.add(
                        &format!("{p}.V_b"),
                        ParamGroup::MetaGenerator,
                        xavier_uniform(&[d_s, d], rng),
                    )?,
                    v_b_bias: store.add(
                        &format!("{p}.v_b"),
                        ParamGroup::MetaGenerator,
                        Tensor::zeros(&[d]),
                    )?,
                })
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(MetaUnit { layers, d, slope })
    }

    /// h ← σ(W^(i)·h + b^(i)) for i = 1..K, with W^(i) = reshape(S̃·V_w + v_w)
    /// row-major to d×d and b^(i) = S̃·V_b + v_b. s_tilde: [n, d_s], h: [n, d].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        s_tilde: NodeId,
        h: NodeId,
    ) -> Result<NodeId, TensorError> {
        let shape = g.shape(h).to_vec();
        if shape.len() != 2 || shape[1] != self.d {
            return Err(TensorError::ShapeMismatch {
                op: "meta_forward",
                lhs: shape,
                rhs: vec![0, self.d],
            });
        }
        let n = shape[0];
        let mut h = h;
        for layer in &self.layers {
            let v_w = g.param(store, layer.v_w);
            let v_w_bias = g.param(store, layer.v_w_bias);
            let v_b = g.param(store, layer.v_b);
            let v_b_bias = g.param(store, layer.v_b_bias);

            let w_flat = g.matmul(s_tilde, v_w)?;
            let w_flat = g.add_bias(w_flat, v_w_bias)?;
            let w = g.reshape(w_flat, &[n, self.d, self.d])?;
            let b = g.matmul(s_tilde, v_b)?;
            let b = g.add_bias(b, v_b_bias)?;

            let h3 = g.reshape(h, &[n, self.d, 1])?;
            let wh = g.bmm(w, h3, false)?;
            let wh = g.reshape(wh, &[n, self.d])?;
            let pre = g.add(wh, b)?;
            h = g.leaky_relu(pre, self.slope);
        }
        Ok(h)
    }

    pub fn depth(&self) -> usize {
        self.layers.len()
    }
}

/// Softmax-normalizes per-expert scores and sums the views under them.
/// scores: k nodes of [n, 1]; experts: k nodes of [n, d_view].
/// Returns the blended view and the [n, k] weight matrix.
pub fn combine_views(
    g: &mut Graph,
    scores: &[NodeId],
    experts: &[NodeId],
) -> Result<(NodeId, NodeId), TensorError> {
    debug_assert_eq!(scores.len(), experts.len());
    let stacked = g.concat(scores, 1)?;
    let alpha = g.softmax(stacked, 1)?;
    let mut blend: Option<NodeId> = None;
    for (i, &e) in experts.iter().enumerate() {
        let a_i = g.col(alpha, i)?;
        let term = g.scale_rows(e, a_i)?;
        blend = Some(match blend {
            None => term,
            Some(acc) => g.add(acc, term)?,
        });
    }
    Ok((blend.expect("at least one expert"), alpha))
}

/// Per-task attention over expert views. The concatenated [E_i ∥ T_t] is
/// projected down to the generated-network width first; the score vector v
/// lives in that space and is static per task.
#[derive(Debug, Clone)]
pub struct MetaAttentionHead {
    proj: Linear,
    unit: Option<MetaUnit>,
    v: ParamId,
    slope: f64,
}

impl MetaAttentionHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<MetaAttentionHead, TensorError> {
        let proj = Linear::init(
            store,
            &format!("{prefix}.proj"),
            ParamGroup::Backbone,
            2 * cfg.d_view,
            cfg.d_meta,
            rng,
        )?;
        let unit = if cfg.disable_meta_attention {
            None
        } else {
            Some(MetaUnit::init(
                store,
                prefix,
                cfg.d_scenario,
                cfg.d_meta,
                cfg.meta_depth,
                cfg.leaky_slope,
                rng,
            )?)
        };
        let v = store.add(
            &format!("{prefix}.score_v"),
            ParamGroup::Backbone,
            xavier_uniform(&[cfg.d_meta, 1], rng),
        )?;
        Ok(MetaAttentionHead {
            proj,
            unit,
            v,
            slope: cfg.leaky_slope,
        })
    }

    /// Blend the expert views for this task. With the meta unit disabled the
    /// score is a static one-hidden-layer MLP of the same projected input,
    /// blind to S̃.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        experts: &[NodeId],
        anchor: NodeId,
        s_tilde: NodeId,
    ) -> Result<(NodeId, NodeId), TensorError> {
        let mut scores = Vec::with_capacity(experts.len());
        for &e in experts {
            let x = g.concat(&[e, anchor], 1)?;
            let p = self.proj.forward(g, store, x)?;
            let h = match &self.unit {
                Some(unit) => unit.forward(g, store, s_tilde, p)?,
                None => g.leaky_relu(p, self.slope),
            };
            let v = g.param(store, self.v);
            scores.push(g.matmul(h, v)?);
        }
        combine_views(g, &scores, experts)
    }
}

/// L residual layers around meta units: x ← σ(Meta(x) + x). With the meta
/// path ablated each layer is a static affine + LeakyReLU, no skip.
#[derive(Debug, Clone)]
pub struct MetaTower {
    units: Vec<MetaUnit>,
    static_layers: Vec<Linear>,
    slope: f64,
}

impl MetaTower {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<MetaTower, TensorError> {
        let mut units = Vec::new();
        let mut static_layers = Vec::new();
        for j in 0..cfg.tower_layers {
            if cfg.disable_meta_tower {
                static_layers.push(Linear::init(
                    store,
                    &format!("{prefix}.l{j}"),
                    ParamGroup::Backbone,
                    cfg.d_meta,
                    cfg.d_meta,
                    rng,
                )?);
            } else {
                units.push(MetaUnit::init(
                    store,
                    &format!("{prefix}.l{j}"),
                    cfg.d_scenario,
                    cfg.d_meta,
                    cfg.meta_depth,
                    cfg.leaky_slope,
                    rng,
                )?);
            }
        }
        Ok(MetaTower {
            units,
            static_layers,
            slope: cfg.leaky_slope,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        s_tilde: NodeId,
    ) -> Result<NodeId, TensorError> {
        let mut h = x;
        for unit in &self.units {
            let m = unit.forward(g, store, s_tilde, h)?;
            let sum = g.add(m, h)?;
            h = g.leaky_relu(sum, self.slope);
        }
        for layer in &self.static_layers {
            let a = layer.forward(g, store, h)?;
            h = g.leaky_relu(a, self.slope);
        }
        Ok(h)
    }
}

/// Affine map to a strictly positive rate. `scale` is calibrated once from
/// training label means (not trained); at 1.0 the head is the bare link.
#[derive(Debug, Clone)]
pub struct RateHead {
    w: ParamId,
    b: ParamId,
    scale: f64,
    link: RateLink,
}

/// Positivity floor under the link output; keeps ln ŷ finite everywhere.
pub const RATE_EPS: f64 = 1e-6;

impl RateHead {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        link: RateLink,
        rng: &mut R,
    ) -> Result<RateHead, TensorError> {
        Ok(RateHead {
            w: store.add(
                &format!("{prefix}.w"),
                ParamGroup::Backbone,
                xavier_uniform(&[d_in, 1], rng),
            )?,
            b: store.add(&format!("{prefix}.b"), ParamGroup::Backbone, Tensor::zeros(&[1]))?,
            scale: 1.0,
            link,
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let pre = g.matmul(x, w)?;
        let pre = g.add_bias(pre, b)?;
        let pos = match self.link {
            RateLink::Softplus => g.softplus(pre),
            RateLink::Exp => g.exp(pre),
        };
        let scaled = g.scale(pos, self.scale);
        Ok(g.add_scalar(scaled, RATE_EPS))
    }

    pub fn scale(&self) -> f64 {
        self.scale
    }

    pub fn set_scale(&mut self, scale: f64) {
        debug_assert!(scale > 0.0);
        self.scale = scale;
    }
}

/// Everything a forward pass hands to the loss and the metrics.
pub struct ForwardOut {
    /// Per-task predicted rates, each [n, 1], all entries > 0.
    pub rates: Vec<NodeId>,
    /// Per-task attention weights over experts, each [n, k].
    pub alphas: Vec<NodeId>,
}

/// The full scenario-aware multi-task model.
pub struct M2MModel {
    pub backbone: Backbone,
    attn: Vec<MetaAttentionHead>,
    tower_proj: Vec<Linear>,
    towers: Vec<MetaTower>,
    heads: Vec<RateHead>,
    cfg: ModelConfig,
}

impl M2MModel {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<M2MModel, TensorError> {
        let backbone = Backbone::init(store, "backbone", cfg, rng)?;
        let m = cfg.shape.n_tasks;
        let mut attn = Vec::with_capacity(m);
        let mut tower_proj = Vec::with_capacity(m);
        let mut towers = Vec::with_capacity(m);
        let mut heads = Vec::with_capacity(m);
        for t in 0..m {
            attn.push(MetaAttentionHead::init(
                store,
                &format!("task{t}.attn"),
                cfg,
                rng,
            )?);
            tower_proj.push(Linear::init(
                store,
                &format!("task{t}.tower.proj"),
                ParamGroup::Backbone,
                cfg.d_view,
                cfg.d_meta,
                rng,
            )?);
            towers.push(MetaTower::init(store, &format!("task{t}.tower"), cfg, rng)?);
            heads.push(RateHead::init(
                store,
                &format!("task{t}.head"),
                cfg.d_meta,
                cfg.rate_link,
                rng,
            )?);
        }
        Ok(M2MModel {
            backbone,
            attn,
            tower_proj,
            towers,
            heads,
            cfg: cfg.clone(),
        })
    }

    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<ForwardOut, TensorError> {
        self.forward_inner(g, store, batch, None)
    }

    /// Forward pass with S̃ frozen to one externally supplied row, broadcast
    /// over the batch. Ablation probe: with this in place, two scenarios with
    /// identical other inputs must predict identically.
    pub fn forward_with_scenario_override(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        s_tilde_row: &Tensor,
    ) -> Result<ForwardOut, TensorError> {
        self.forward_inner(g, store, batch, Some(s_tilde_row))
    }

    fn forward_inner(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        s_override: Option<&Tensor>,
    ) -> Result<ForwardOut, TensorError> {
        let f = self.backbone.fuse(g, store, batch, None)?;
        let experts = self.backbone.experts.forward(g, store, f)?;
        let s_tilde = match s_override {
            Some(row) => {
                let node = g.input(row.clone());
                g.broadcast_row(node, batch.n)?
            }
            None => {
                let cat = self.backbone.trunk.tables.categorical_embeds(g, store, batch)?;
                self.backbone.scenario.forward(g, store, cat)?
            }
        };
        let mut rates = Vec::with_capacity(self.heads.len());
        let mut alphas = Vec::with_capacity(self.heads.len());
        for t in 0..self.heads.len() {
            let anchor = self.backbone.anchors.forward(g, store, t, batch.n)?;
            let (r_t, alpha) = self.attn[t].forward(g, store, &experts, anchor, s_tilde)?;
            let x = self.tower_proj[t].forward(g, store, r_t)?;
            let top = self.towers[t].forward(g, store, x, s_tilde)?;
            rates.push(self.heads[t].forward(g, store, top)?);
            alphas.push(alpha);
        }
        Ok(ForwardOut { rates, alphas })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }

    pub fn output_scales(&self) -> Vec<f64> {
        self.heads.iter().map(RateHead::scale).collect()
    }

    pub fn set_output_scales(&mut self, scales: &[f64]) {
        debug_assert_eq!(scales.len(), self.heads.len());
        for (h, &s) in self.heads.iter_mut().zip(scales) {
            h.set_scale(s);
        }
    }
}

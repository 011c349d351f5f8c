//! Shared representation stage: embedding tables for every categorical field,
//! a minimal self-attention layer over each activity sequence, mean-pool
//! fusion into one vector, a bank of expert views, global task anchors, and
//! the scenario knowledge encoder.
//!
//! The attention block is deliberately bare: no feed-forward sublayer, no
//! residual, no layer norm. Expert MLPs directly downstream supply all the
//! nonlinearity, and the small block keeps gradient checks exact.

use crate::config::ModelConfig;
use crate::features::Batch;
use crate::tensor::{
    uniform_init, xavier_uniform, Graph, NodeId, ParamGroup, ParamId, ParamStore, Tensor,
    TensorError,
};
use rand::Rng;

/// Affine layer; the owning component decides on the activation.
#[derive(Debug, Clone)]
pub(crate) struct Linear {
    pub(crate) w: ParamId,
    pub(crate) b: ParamId,
}

impl Linear {
    pub(crate) fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        group: ParamGroup,
        d_in: usize,
        d_out: usize,
        rng: &mut R,
    ) -> Result<Linear, TensorError> {
        let w = store.add(&format!("{prefix}.w"), group, xavier_uniform(&[d_in, d_out], rng))?;
        let b = store.add(&format!("{prefix}.b"), group, Tensor::zeros(&[d_out]))?;
        Ok(Linear { w, b })
    }

    /// x·W + b for x: [n, d_in].
    pub(crate) fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
    ) -> Result<NodeId, TensorError> {
        let w = g.param(store, self.w);
        let b = g.param(store, self.b);
        let xw = g.matmul(x, w)?;
        g.add_bias(xw, b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Seq {
    Behavior,
    Performance,
}

#[derive(Debug, Clone)]
pub struct EmbeddingTables {
    behavior: Vec<ParamId>,
    performance: Vec<ParamId>,
    pos_behavior: ParamId,
    pos_performance: ParamId,
    scenario_attr: Vec<ParamId>,
    profile: Vec<ParamId>,
}

impl EmbeddingTables {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<EmbeddingTables, TensorError> {
        let sh = &cfg.shape;
        let table = |store: &mut ParamStore, name: String, rows: usize, cols: usize, rng: &mut R| {
            store.add(&name, ParamGroup::Backbone, uniform_init(&[rows, cols], 0.1, rng))
        };
        let field_tables = |store: &mut ParamStore,
                                kind: &str,
                                vocabs: &[usize],
                                rng: &mut R|
         -> Result<Vec<ParamId>, TensorError> {
            vocabs
                .iter()
                .enumerate()
                .map(|(i, &v)| table(store, format!("{prefix}.emb.{kind}{i}"), v, cfg.d_input, rng))
                .collect()
        };
        let behavior = field_tables(
            store,
            "behavior",
            &vec![sh.seq_buckets; sh.n_behavior],
            rng,
        )?;
        let performance = field_tables(
            store,
            "performance",
            &vec![sh.seq_buckets; sh.n_performance],
            rng,
        )?;
        let scenario_attr = field_tables(store, "scenario_attr", &sh.scenario_attr_vocab, rng)?;
        let profile = field_tables(store, "profile", &sh.profile_vocab, rng)?;
        let pos_behavior = table(store, format!("{prefix}.emb.pos_behavior"), cfg.window, cfg.d_pos, rng)?;
        let pos_performance =
            table(store, format!("{prefix}.emb.pos_performance"), cfg.window, cfg.d_pos, rng)?;
        Ok(EmbeddingTables {
            behavior,
            performance,
            pos_behavior,
            pos_performance,
            scenario_attr,
            profile,
        })
    }

    /// Embeds one sequence: per timestep, field embeddings concatenated, then
    /// the positional row for that step. Returns [n·window, d_model].
    pub fn embed_sequence(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        ids: &[usize],
        n: usize,
        window: usize,
        seq: Seq,
    ) -> Result<NodeId, TensorError> {
        let (tables, pos) = match seq {
            Seq::Behavior => (&self.behavior, self.pos_behavior),
            Seq::Performance => (&self.performance, self.pos_performance),
        };
        let n_fields = tables.len();
        debug_assert_eq!(ids.len(), n * window * n_fields);
        let mut parts = Vec::with_capacity(n_fields + 1);
        for (c, &tid) in tables.iter().enumerate() {
            let field_ids: Vec<usize> = (0..n * window)
                .map(|row| ids[row * n_fields + c])
                .collect();
            let t = g.param(store, tid);
            parts.push(g.gather_rows(t, &field_ids)?);
        }
        let pos_ids: Vec<usize> = (0..n * window).map(|row| row % window).collect();
        let p = g.param(store, pos);
        parts.push(g.gather_rows(p, &pos_ids)?);
        g.concat(&parts, 1)
    }

    /// Scenario-attribute and profile embeddings concatenated per sample:
    /// [n, (attr fields + profile fields) · d_input].
    pub fn categorical_embeds(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
    ) -> Result<NodeId, TensorError> {
        let mut parts = Vec::new();
        let gather = |g: &mut Graph,
                          tables: &[ParamId],
                          ids: &[usize],
                          parts: &mut Vec<NodeId>|
         -> Result<(), TensorError> {
            let n_fields = tables.len();
            for (c, &tid) in tables.iter().enumerate() {
                let field_ids: Vec<usize> =
                    (0..batch.n).map(|i| ids[i * n_fields + c]).collect();
                let t = g.param(store, tid);
                parts.push(g.gather_rows(t, &field_ids)?);
            }
            Ok(())
        };
        gather(g, &self.scenario_attr, &batch.scenario_attr_ids, &mut parts)?;
        gather(g, &self.profile, &batch.profile_ids, &mut parts)?;
        g.concat(&parts, 1)
    }
}

/// Scaled dot-product attention for a single head over one sequence:
/// softmax(Q·Kᵀ/√d)·V with Q: [tq, d], K: [tk, d], V: [tk, dv].
pub fn attention(
    g: &mut Graph,
    q: NodeId,
    k: NodeId,
    v: NodeId,
) -> Result<NodeId, TensorError> {
    let d = *g
        .shape(q)
        .last()
        .ok_or_else(|| TensorError::InvalidShape {
            op: "attention",
            shape: vec![],
            reason: "rank-2 Q required".to_string(),
        })?;
    let kt = g.transpose(k)?;
    let scores = g.matmul(q, kt)?;
    let scaled = g.scale(scores, 1.0 / (d as f64).sqrt());
    let weights = g.softmax(scaled, 1)?;
    g.matmul(weights, v)
}

pub struct MhaOut {
    pub out: NodeId,
    /// Per-head attention weights, each [n, window, window].
    pub weights: Vec<NodeId>,
}

#[derive(Debug, Clone)]
pub struct MultiHeadAttention {
    q: Vec<ParamId>,
    k: Vec<ParamId>,
    v: Vec<ParamId>,
    out: ParamId,
    d_model: usize,
    d_head: usize,
}

impl MultiHeadAttention {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_model: usize,
        heads: usize,
        rng: &mut R,
    ) -> Result<MultiHeadAttention, TensorError> {
        debug_assert_eq!(d_model % heads, 0);
        let d_head = d_model / heads;
        let proj = |store: &mut ParamStore, kind: &str, rng: &mut R| {
            (0..heads)
                .map(|h| {
                    store.add(
                        &format!("{prefix}.h{h}.{kind}"),
                        ParamGroup::Backbone,
                        xavier_uniform(&[d_model, d_head], rng),
                    )
                })
                .collect::<Result<Vec<ParamId>, TensorError>>()
        };
        let q = proj(store, "q", rng)?;
        let k = proj(store, "k", rng)?;
        let v = proj(store, "v", rng)?;
        let out = store.add(
            &format!("{prefix}.out"),
            ParamGroup::Backbone,
            xavier_uniform(&[d_model, d_model], rng),
        )?;
        Ok(MultiHeadAttention {
            q,
            k,
            v,
            out,
            d_model,
            d_head,
        })
    }

    /// x: [n·window, d_model] → same shape; attention runs within each
    /// sample's window, never across samples.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        x: NodeId,
        n: usize,
        window: usize,
    ) -> Result<MhaOut, TensorError> {
        let mut heads = Vec::with_capacity(self.q.len());
        let mut weights = Vec::with_capacity(self.q.len());
        for h in 0..self.q.len() {
            let project = |g: &mut Graph, pid: ParamId| -> Result<NodeId, TensorError> {
                let w = g.param(store, pid);
                let flat = g.matmul(x, w)?;
                g.reshape(flat, &[n, window, self.d_head])
            };
            let q = project(g, self.q[h])?;
            let k = project(g, self.k[h])?;
            let v = project(g, self.v[h])?;
            let scores = g.bmm(q, k, true)?;
            let scaled = g.scale(scores, 1.0 / (self.d_head as f64).sqrt());
            let alpha = g.softmax(scaled, 2)?;
            weights.push(alpha);
            heads.push(g.bmm(alpha, v, false)?);
        }
        let cat = g.concat(&heads, 2)?;
        let flat = g.reshape(cat, &[n * window, self.d_model])?;
        let w_out = g.param(store, self.out);
        let out = g.matmul(flat, w_out)?;
        Ok(MhaOut { out, weights })
    }
}

#[derive(Debug, Clone)]
pub struct ExpertBank {
    experts: Vec<(Linear, Linear)>,
    slope: f64,
}

impl ExpertBank {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<ExpertBank, TensorError> {
        let experts = (0..cfg.n_experts)
            .map(|i| {
                let l1 = Linear::init(
                    store,
                    &format!("{prefix}.expert{i}.l1"),
                    ParamGroup::Backbone,
                    d_in,
                    cfg.d_view,
                    rng,
                )?;
                let l2 = Linear::init(
                    store,
                    &format!("{prefix}.expert{i}.l2"),
                    ParamGroup::Backbone,
                    cfg.d_view,
                    cfg.d_view,
                    rng,
                )?;
                Ok((l1, l2))
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(ExpertBank {
            experts,
            slope: cfg.leaky_slope,
        })
    }

    /// k expert views of the fused vector, each [n, d_view].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        f: NodeId,
    ) -> Result<Vec<NodeId>, TensorError> {
        self.experts
            .iter()
            .map(|(l1, l2)| {
                let h = l1.forward(g, store, f)?;
                let h = g.leaky_relu(h, self.slope);
                let e = l2.forward(g, store, h)?;
                Ok(g.leaky_relu(e, self.slope))
            })
            .collect()
    }

    pub fn n_experts(&self) -> usize {
        self.experts.len()
    }
}

#[derive(Debug, Clone)]
pub struct TaskAnchorTable {
    emb: ParamId,
    ff: Vec<Linear>,
    slope: f64,
}

impl TaskAnchorTable {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<TaskAnchorTable, TensorError> {
        let m = cfg.shape.n_tasks;
        let emb = store.add(
            &format!("{prefix}.anchor.emb"),
            ParamGroup::Backbone,
            uniform_init(&[m, cfg.d_view], 0.1, rng),
        )?;
        let ff = (0..m)
            .map(|t| {
                Linear::init(
                    store,
                    &format!("{prefix}.anchor.ff{t}"),
                    ParamGroup::Backbone,
                    cfg.d_view,
                    cfg.d_view,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(TaskAnchorTable {
            emb,
            ff,
            slope: cfg.leaky_slope,
        })
    }

    /// Global anchor of task `t`, broadcast to `n` rows: [n, d_view].
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        t: usize,
        n: usize,
    ) -> Result<NodeId, TensorError> {
        if t >= self.ff.len() {
            return Err(TensorError::IndexOutOfRange {
                op: "task_anchor",
                index: t,
                limit: self.ff.len(),
            });
        }
        let table = g.param(store, self.emb);
        let row = g.gather_rows(table, &[t])?;
        let h = self.ff[t].forward(g, store, row)?;
        let h = g.leaky_relu(h, self.slope);
        g.broadcast_row(h, n)
    }

    pub fn n_tasks(&self) -> usize {
        self.ff.len()
    }
}

#[derive(Debug, Clone)]
pub struct ScenarioEncoder {
    layers: Vec<Linear>,
    slope: f64,
}

impl ScenarioEncoder {
    fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        d_in: usize,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<ScenarioEncoder, TensorError> {
        let layers = (0..cfg.scenario_depth)
            .map(|i| {
                let din = if i == 0 { d_in } else { cfg.d_scenario };
                Linear::init(
                    store,
                    &format!("{prefix}.scenario.l{i}"),
                    ParamGroup::Backbone,
                    din,
                    cfg.d_scenario,
                    rng,
                )
            })
            .collect::<Result<Vec<_>, TensorError>>()?;
        Ok(ScenarioEncoder {
            layers,
            slope: cfg.leaky_slope,
        })
    }

    /// Scenario knowledge S̃: [n, d_s] from concatenated categorical embeds.
    pub fn forward(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        cat: NodeId,
    ) -> Result<NodeId, TensorError> {
        let mut h = cat;
        for layer in &self.layers {
            h = layer.forward(g, store, h)?;
            h = g.leaky_relu(h, self.slope);
        }
        Ok(h)
    }
}

/// The part of the shared stage every variant owns a private copy of:
/// embeddings, sequence attention, and the fuse into F. Baselines stop
/// here; the full [`Backbone`] adds experts, anchors, and scenario
/// knowledge on top.
pub struct Trunk {
    pub tables: EmbeddingTables,
    pub mha_behavior: MultiHeadAttention,
    pub mha_performance: MultiHeadAttention,
    cfg: ModelConfig,
}

impl Trunk {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Trunk, TensorError> {
        let tables = EmbeddingTables::init(store, prefix, cfg, rng)?;
        let mha_behavior = MultiHeadAttention::init(
            store,
            &format!("{prefix}.mha_behavior"),
            cfg.d_model_behavior(),
            cfg.heads,
            rng,
        )?;
        let mha_performance = MultiHeadAttention::init(
            store,
            &format!("{prefix}.mha_performance"),
            cfg.d_model_performance(),
            cfg.heads,
            rng,
        )?;
        Ok(Trunk {
            tables,
            mha_behavior,
            mha_performance,
            cfg: cfg.clone(),
        })
    }

    /// One sequence end to end: embed, attend (unless ablated), mean-pool
    /// over the window. Returns [n, d_model].
    pub fn sequence_repr(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        seq: Seq,
    ) -> Result<NodeId, TensorError> {
        let (ids, d_model) = match seq {
            Seq::Behavior => (&batch.behavior_ids, self.cfg.d_model_behavior()),
            Seq::Performance => (&batch.performance_ids, self.cfg.d_model_performance()),
        };
        let w = self.cfg.window;
        let x = self
            .tables
            .embed_sequence(g, store, ids, batch.n, w, seq)?;
        let h = if self.cfg.disable_transformer {
            x
        } else {
            let mha = match seq {
                Seq::Behavior => &self.mha_behavior,
                Seq::Performance => &self.mha_performance,
            };
            mha.forward(g, store, x, batch.n, w)?.out
        };
        let h3 = g.reshape(h, &[batch.n, w, d_model])?;
        g.mean_axis(h3, 1)
    }

    /// Fused vector F; `extra` (e.g. categorical embeddings for baselines)
    /// concatenates after the dense block.
    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        extra: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        let hb = self.sequence_repr(g, store, batch, Seq::Behavior)?;
        let hp = self.sequence_repr(g, store, batch, Seq::Performance)?;
        let dense = g.input(batch.dense.clone());
        let mut parts = vec![hb, hp, dense];
        if let Some(e) = extra {
            parts.push(e);
        }
        g.concat(&parts, 1)
    }

    pub fn config(&self) -> &ModelConfig {
        &self.cfg
    }
}

/// The full shared stage of the scenario-aware model: trunk plus expert
/// bank, task anchors, and the scenario knowledge encoder.
pub struct Backbone {
    pub trunk: Trunk,
    pub experts: ExpertBank,
    pub anchors: TaskAnchorTable,
    pub scenario: ScenarioEncoder,
}

impl Backbone {
    pub fn init<R: Rng>(
        store: &mut ParamStore,
        prefix: &str,
        cfg: &ModelConfig,
        rng: &mut R,
    ) -> Result<Backbone, TensorError> {
        let trunk = Trunk::init(store, prefix, cfg, rng)?;
        let experts = ExpertBank::init(store, prefix, cfg.fused_dim(), cfg, rng)?;
        let anchors = TaskAnchorTable::init(store, prefix, cfg, rng)?;
        let scenario = ScenarioEncoder::init(store, prefix, cfg.cat_dim(), cfg, rng)?;
        Ok(Backbone {
            trunk,
            experts,
            anchors,
            scenario,
        })
    }

    pub fn fuse(
        &self,
        g: &mut Graph,
        store: &ParamStore,
        batch: &Batch,
        extra: Option<NodeId>,
    ) -> Result<NodeId, TensorError> {
        self.trunk.fuse(g, store, batch, extra)
    }

    pub fn config(&self) -> &ModelConfig {
        self.trunk.config()
    }
}

impl ModelConfig {
    /// Width of F without baseline extras: pooled behavior + pooled
    /// performance + dense channel stats.
    pub fn fused_dim(&self) -> usize {
        self.d_model_behavior()
            + self.d_model_performance()
            + self.shape.n_behavior
            + self.shape.n_performance
    }

    /// Width of the concatenated scenario-attribute and profile embeddings.
    pub fn cat_dim(&self) -> usize {
        (self.shape.scenario_attr_vocab.len() + self.shape.profile_vocab.len()) * self.d_input
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use crate::config::DataShape;
    use crate::tensor::GradStore;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    pub(crate) fn toy_config() -> ModelConfig {
        ModelConfig {
            d_input: 3,
            d_pos: 2,
            heads: 2,
            d_view: 6,
            n_experts: 3,
            d_scenario: 5,
            scenario_depth: 2,
            d_meta: 4,
            meta_depth: 2,
            tower_layers: 1,
            window: 4,
            shape: DataShape {
                n_behavior: 2,
                n_performance: 2,
                n_tasks: 2,
                n_scenarios: 3,
                scenario_attr_vocab: vec![3, 4, 5],
                profile_vocab: vec![4, 3, 6],
                seq_buckets: 10,
            },
            ..ModelConfig::default()
        }
    }

    /// Random but schema-valid batch; ids seeded so tests are reproducible.
    pub(crate) fn toy_batch(cfg: &ModelConfig, n: usize, seed: u64) -> Batch {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let sh = &cfg.shape;
        let w = cfg.window;
        let ids = |count: usize, vocab: usize, rng: &mut ChaCha8Rng| -> Vec<usize> {
            (0..count).map(|_| rng.gen_range(0..vocab)).collect()
        };
        let behavior_ids = ids(n * w * sh.n_behavior, sh.seq_buckets, &mut rng);
        let performance_ids = ids(n * w * sh.n_performance, sh.seq_buckets, &mut rng);
        let mut scenario_attr_ids = Vec::with_capacity(n * sh.scenario_attr_vocab.len());
        let mut profile_ids = Vec::with_capacity(n * sh.profile_vocab.len());
        let mut scenario_of = Vec::with_capacity(n);
        for _ in 0..n {
            let s = rng.gen_range(0..sh.n_scenarios);
            scenario_of.push(s as u32);
            scenario_attr_ids.push(s);
            for &v in &sh.scenario_attr_vocab[1..] {
                scenario_attr_ids.push(rng.gen_range(0..v));
            }
            for &v in &sh.profile_vocab {
                profile_ids.push(rng.gen_range(0..v));
            }
        }
        let n_dense = sh.n_behavior + sh.n_performance;
        let dense = Tensor::from_vec(
            &[n, n_dense],
            (0..n * n_dense).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap();
        let labels = Tensor::from_vec(
            &[n, sh.n_tasks],
            (0..n * sh.n_tasks)
                .map(|_| rng.gen_range(0..50) as f64)
                .collect(),
        )
        .unwrap();
        let true_rates = Tensor::from_vec(
            &[n, sh.n_tasks],
            (0..n * sh.n_tasks).map(|_| rng.gen_range(0.5..50.0)).collect(),
        )
        .unwrap();
        Batch {
            n,
            behavior_ids,
            performance_ids,
            scenario_attr_ids,
            profile_ids,
            dense,
            labels,
            true_rates,
            scenario_of,
        }
    }

    fn build() -> (ModelConfig, ParamStore, Backbone) {
        let cfg = toy_config();
        cfg.validate().unwrap();
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let bb = Backbone::init(&mut store, "bb", &cfg, &mut rng).unwrap();
        (cfg, store, bb)
    }

    #[test]
    fn embed_sequence_shape_and_positional_isolation() {
        let (cfg, store, bb) = build();
        let mut g = Graph::new();
        // One sample whose two timesteps carry identical ids.
        let ids = vec![4usize, 7, 4, 7, 4, 7, 4, 7];
        let x = bb
            .trunk.tables
            .embed_sequence(&mut g, &store, &ids, 1, 4, Seq::Behavior)
            .unwrap();
        assert_eq!(g.shape(x), &[4, cfg.d_model_behavior()]);
        let dm = cfg.d_model_behavior();
        let row = |r: usize| &g.value(x).data()[r * dm..(r + 1) * dm];
        let field_part = dm - cfg.d_pos;
        assert_eq!(row(0)[..field_part], row(1)[..field_part]);
        assert_ne!(row(0)[field_part..], row(1)[field_part..]);
    }

    #[test]
    fn embedding_lookup_returns_stored_row() {
        let (cfg, mut store, bb) = build();
        let tid = bb.trunk.tables.behavior[0];
        for (i, v) in store.value_mut(tid).data_mut().iter_mut().enumerate() {
            *v = i as f64;
        }
        let mut g = Graph::new();
        let t = g.param(&store, tid);
        let got = g.gather_rows(t, &[3]).unwrap();
        let want: Vec<f64> = (3 * cfg.d_input..4 * cfg.d_input).map(|i| i as f64).collect();
        assert_eq!(g.value(got).data(), &want[..]);
    }

    #[test]
    fn attention_hand_case_and_degenerate_rows() {
        let mut g = Graph::new();
        let q = g.input(Tensor::from_vec(&[1, 2], vec![1.0, 0.0]).unwrap());
        let k = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let out = attention(&mut g, q, k, v).unwrap();
        let got = g.value(out).data();
        assert!((got[0] - 0.6698).abs() < 1e-4, "{got:?}");
        assert!((got[1] - 0.3302).abs() < 1e-4, "{got:?}");

        // Single timestep: softmax of a scalar is 1, output is the V row.
        let mut g = Graph::new();
        let q = g.input(Tensor::from_vec(&[1, 2], vec![3.0, -1.0]).unwrap());
        let k = g.input(Tensor::from_vec(&[1, 2], vec![0.2, 0.9]).unwrap());
        let v = g.input(Tensor::from_vec(&[1, 3], vec![5.0, 6.0, 7.0]).unwrap());
        let out = attention(&mut g, q, k, v).unwrap();
        assert_eq!(g.value(out).data(), &[5.0, 6.0, 7.0]);

        // Q orthogonal to every key: uniform weights, output is the V mean.
        let mut g = Graph::new();
        let q = g.input(Tensor::from_vec(&[1, 2], vec![0.0, 0.0]).unwrap());
        let k = g.input(Tensor::from_vec(&[2, 2], vec![1.0, 0.0, 0.0, 1.0]).unwrap());
        let v = g.input(Tensor::from_vec(&[2, 1], vec![2.0, 6.0]).unwrap());
        let out = attention(&mut g, q, k, v).unwrap();
        assert!((g.value(out).data()[0] - 4.0).abs() < 1e-12);
    }

    #[test]
    fn multi_head_preserves_shape_and_rows_sum_to_one() {
        let (cfg, store, bb) = build();
        let batch = toy_batch(&cfg, 3, 9);
        let mut g = Graph::new();
        let x = bb
            .trunk.tables
            .embed_sequence(&mut g, &store, &batch.behavior_ids, 3, 4, Seq::Behavior)
            .unwrap();
        let mha = bb.trunk.mha_behavior.forward(&mut g, &store, x, 3, 4).unwrap();
        assert_eq!(g.shape(mha.out), &[12, cfg.d_model_behavior()]);
        assert_eq!(mha.weights.len(), 2);
        for &wnode in &mha.weights {
            assert_eq!(g.shape(wnode), &[3, 4, 4]);
            for row in g.value(wnode).data().chunks(4) {
                let s: f64 = row.iter().sum();
                assert!((s - 1.0).abs() < 1e-12, "attention row sums to {s}");
            }
        }
    }

    #[test]
    fn single_head_reduces_to_attention_of_projections() {
        let cfg = ModelConfig {
            heads: 1,
            ..toy_config()
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let bb = Backbone::init(&mut store, "bb", &cfg, &mut rng).unwrap();
        let batch = toy_batch(&cfg, 1, 13);
        let mut g = Graph::new();
        let x = bb
            .trunk.tables
            .embed_sequence(&mut g, &store, &batch.behavior_ids, 1, 4, Seq::Behavior)
            .unwrap();
        let via_mha = bb.trunk.mha_behavior.forward(&mut g, &store, x, 1, 4).unwrap().out;

        let wq = g.param(&store, bb.trunk.mha_behavior.q[0]);
        let wk = g.param(&store, bb.trunk.mha_behavior.k[0]);
        let wv = g.param(&store, bb.trunk.mha_behavior.v[0]);
        let wo = g.param(&store, bb.trunk.mha_behavior.out);
        let q = g.matmul(x, wq).unwrap();
        let k = g.matmul(x, wk).unwrap();
        let v = g.matmul(x, wv).unwrap();
        let att = attention(&mut g, q, k, v).unwrap();
        let manual = g.matmul(att, wo).unwrap();

        let a = g.value(via_mha).data();
        let b = g.value(manual).data();
        for (x, y) in a.iter().zip(b) {
            assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn attention_without_positions_is_permutation_equivariant() {
        let (cfg, store, bb) = build();
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let dm = cfg.d_model_behavior();
        let data: Vec<f64> = (0..4 * dm).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let perm = [2usize, 0, 3, 1];
        let permuted: Vec<f64> = perm
            .iter()
            .flat_map(|&p| data[p * dm..(p + 1) * dm].to_vec())
            .collect();

        let mut g = Graph::new();
        let x = g.input(Tensor::from_vec(&[4, dm], data).unwrap());
        let out = bb.trunk.mha_behavior.forward(&mut g, &store, x, 1, 4).unwrap().out;
        let base = g.value(out).data().to_vec();

        let mut g = Graph::new();
        let xp = g.input(Tensor::from_vec(&[4, dm], permuted).unwrap());
        let outp = bb.trunk.mha_behavior.forward(&mut g, &store, xp, 1, 4).unwrap().out;
        let shuffled = g.value(outp).data();

        for (i, &p) in perm.iter().enumerate() {
            for c in 0..dm {
                assert!(
                    (shuffled[i * dm + c] - base[p * dm + c]).abs() < 1e-12,
                    "row {i} (source {p}) col {c}"
                );
            }
        }
    }

    #[test]
    fn fused_width_is_sum_of_parts() {
        let (cfg, store, bb) = build();
        let batch = toy_batch(&cfg, 5, 21);
        let mut g = Graph::new();
        let f = bb.fuse(&mut g, &store, &batch, None).unwrap();
        assert_eq!(g.shape(f), &[5, cfg.fused_dim()]);
        assert_eq!(cfg.fused_dim(), 8 + 8 + 4);

        let mut g = Graph::new();
        let cat = bb.trunk.tables.categorical_embeds(&mut g, &store, &batch).unwrap();
        assert_eq!(g.shape(cat), &[5, 6 * cfg.d_input]);
        let f2 = bb.fuse(&mut g, &store, &batch, Some(cat)).unwrap();
        assert_eq!(g.shape(f2), &[5, cfg.fused_dim() + 6 * cfg.d_input]);
    }

    #[test]
    fn expert_views_distinct_and_zero_preserving() {
        let (cfg, store, bb) = build();
        let mut g = Graph::new();
        let f = g.input(Tensor::zeros(&[2, cfg.fused_dim()]));
        let views = bb.experts.forward(&mut g, &store, f).unwrap();
        assert_eq!(views.len(), 3);
        for &v in &views {
            assert_eq!(g.shape(v), &[2, cfg.d_view]);
            // Zero input, zero biases: every view is exactly zero.
            assert!(g.value(v).data().iter().all(|x| *x == 0.0));
        }

        let mut g = Graph::new();
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let f = g.input(Tensor::from_vec(
            &[1, cfg.fused_dim()],
            (0..cfg.fused_dim()).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap());
        let views = bb.experts.forward(&mut g, &store, f).unwrap();
        for i in 0..views.len() {
            for j in i + 1..views.len() {
                let a = g.value(views[i]).data();
                let b = g.value(views[j]).data();
                let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
                assert!(diff > 1e-6, "experts {i} and {j} coincide");
            }
        }
    }

    #[test]
    fn anchors_are_stable_per_task_and_distinct_across_tasks() {
        let (cfg, store, bb) = build();
        let mut g = Graph::new();
        let a0 = bb.anchors.forward(&mut g, &store, 0, 3).unwrap();
        let a0b = bb.anchors.forward(&mut g, &store, 0, 3).unwrap();
        let a1 = bb.anchors.forward(&mut g, &store, 1, 3).unwrap();
        assert_eq!(g.shape(a0), &[3, cfg.d_view]);
        assert_eq!(g.value(a0).data(), g.value(a0b).data());
        let d: f64 = g
            .value(a0)
            .data()
            .iter()
            .zip(g.value(a1).data())
            .map(|(x, y)| (x - y).abs())
            .sum();
        assert!(d > 1e-6, "anchors for different tasks coincide");
        // Rows identical: the anchor is global, not sample-dependent.
        let row0 = &g.value(a0).data()[..cfg.d_view];
        for r in 1..3 {
            assert_eq!(&g.value(a0).data()[r * cfg.d_view..(r + 1) * cfg.d_view], row0);
        }
        assert!(bb.anchors.forward(&mut g, &store, 2, 1).is_err());
    }

    #[test]
    fn scenario_knowledge_depends_on_scenario_attrs() {
        let (cfg, store, bb) = build();
        let mut batch = toy_batch(&cfg, 2, 31);
        // Same profile, different scenario id.
        let pf = batch.profile_ids[..3].to_vec();
        batch.profile_ids[3..].copy_from_slice(&pf);
        batch.scenario_attr_ids = vec![0, 1, 2, 1, 1, 2];
        let mut g = Graph::new();
        let cat = bb.trunk.tables.categorical_embeds(&mut g, &store, &batch).unwrap();
        let s = bb.scenario.forward(&mut g, &store, cat).unwrap();
        assert_eq!(g.shape(s), &[2, cfg.d_scenario]);
        let a = &g.value(s).data()[..cfg.d_scenario];
        let b = &g.value(s).data()[cfg.d_scenario..];
        let diff: f64 = a.iter().zip(b).map(|(x, y)| (x - y).abs()).sum();
        assert!(diff > 1e-9, "scenario id change did not move the knowledge vector");
    }

    #[test]
    fn gradients_hit_only_touched_embedding_rows() {
        let (cfg, store, bb) = build();
        let mut batch = toy_batch(&cfg, 2, 41);
        // Force profile field 0 to use only row 1.
        batch.profile_ids[0] = 1;
        batch.profile_ids[3] = 1;
        let mut g = Graph::new();
        let cat = bb.trunk.tables.categorical_embeds(&mut g, &store, &batch).unwrap();
        let s = bb.scenario.forward(&mut g, &store, cat).unwrap();
        let loss = g.sum_squares(s);
        let mut grads = GradStore::new(&store);
        g.backward(loss, &mut grads).unwrap();
        let table_grad = grads.get(bb.trunk.tables.profile[0]);
        for row in 0..cfg.shape.profile_vocab[0] {
            let rs: f64 = table_grad.data()[row * cfg.d_input..(row + 1) * cfg.d_input]
                .iter()
                .map(|v| v.abs())
                .sum();
            if row == 1 {
                assert!(rs > 0.0, "touched row has zero grad");
            } else {
                assert_eq!(rs, 0.0, "untouched row {row} has grad");
            }
        }
    }

    #[test]
    fn disable_transformer_pools_raw_embeddings() {
        let (cfg, _, _) = build();
        let cfg_off = ModelConfig {
            disable_transformer: true,
            ..cfg
        };
        let mut store = ParamStore::new();
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let bb = Backbone::init(&mut store, "bb", &cfg_off, &mut rng).unwrap();
        let batch = toy_batch(&cfg_off, 2, 43);
        let mut g = Graph::new();
        let hb = bb.trunk.sequence_repr(&mut g, &store, &batch, Seq::Behavior).unwrap();
        let x = bb
            .trunk.tables
            .embed_sequence(&mut g, &store, &batch.behavior_ids, 2, 4, Seq::Behavior)
            .unwrap();
        let dm = cfg_off.d_model_behavior();
        // Row r of the pooled output is the mean of sample r's four embedded rows.
        for r in 0..2 {
            for c in 0..dm {
                let want: f64 = (0..4)
                    .map(|t| g.value(x).data()[(r * 4 + t) * dm + c])
                    .sum::<f64>()
                    / 4.0;
                let got = g.value(hb).data()[r * dm + c];
                assert!((want - got).abs() < 1e-12);
            }
        }
    }
}

//! Per-(scenario, task) evaluation cells plus pooled and macro summaries.
//!
//! The pooled summary treats every (sample, task) residual as one draw from
//! a single population, so large scenarios dominate it; the macro summary
//! averages cell values instead, weighting a rare scenario the same as a
//! dominant one. Both are reported because they disagree exactly when
//! scenario skew matters.

use super::metrics::{nmae, smape, Kahan};
use super::TrainError;
use crate::features::Batch;
use crate::model::Model;
use crate::tensor::{Graph, ParamStore, Tensor};
use std::collections::BTreeMap;

#[derive(Debug, Clone, PartialEq)]
pub struct CellMetrics {
    pub scenario: u32,
    pub task: usize,
    pub nmae: f64,
    pub smape: f64,
    /// Samples behind this cell.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OverallMetrics {
    pub nmae: f64,
    pub smape: f64,
    /// Pooled: residuals aggregated. Macro: cells averaged.
    pub n: usize,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    /// One row per populated (scenario, task) cell, sorted. A scenario with
    /// no samples contributes no rows rather than zero-valued ones.
    pub cells: Vec<CellMetrics>,
    pub pooled: OverallMetrics,
    pub macro_avg: OverallMetrics,
    pub config_hash: String,
    pub seed: u64,
    pub revision: String,
}

impl MetricsReport {
    /// Stamps run identity onto the report; evaluation itself has no view of
    /// the config file or seed that produced the model.
    pub fn with_run_info(mut self, config_hash: &str, seed: u64, revision: &str) -> MetricsReport {
        self.config_hash = config_hash.to_string();
        self.seed = seed;
        self.revision = revision.to_string();
        self
    }

    pub fn cell(&self, scenario: u32, task: usize) -> Option<&CellMetrics> {
        self.cells
            .iter()
            .find(|c| c.scenario == scenario && c.task == task)
    }

    /// `scenario,task,nmae,smape,n`, one row per populated cell.
    pub fn cells_csv(&self) -> String {
        let mut out = String::from("scenario,task,nmae,smape,n\n");
        for c in &self.cells {
            out.push_str(&format!(
                "{},{},{},{},{}\n",
                c.scenario, c.task, c.nmae, c.smape, c.n
            ));
        }
        out
    }

    /// One-row summary with the run identity attached.
    pub fn summary_csv(&self) -> String {
        format!(
            "pooled_nmae,pooled_smape,macro_nmae,macro_smape,n,config_hash,seed,revision\n{},{},{},{},{},{},{},{}\n",
            self.pooled.nmae,
            self.pooled.smape,
            self.macro_avg.nmae,
            self.macro_avg.smape,
            self.pooled.n,
            self.config_hash,
            self.seed,
            self.revision
        )
    }
}

/// Runs the model over `batch` in chunks of at most `chunk` samples and
/// returns predicted rates as an [n, tasks] tensor. Chunking only bounds the
/// transient graph size; rows are computed independently either way.
pub fn predict(
    model: &dyn Model,
    store: &ParamStore,
    batch: &Batch,
    chunk: usize,
) -> Result<Tensor, TrainError> {
    if batch.n == 0 {
        return Err(TrainError::EmptyBatch { context: "predict" });
    }
    let chunk = chunk.max(1);
    let m = model.config().shape.n_tasks;
    let mut out = vec![0.0; batch.n * m];
    let mut start = 0;
    while start < batch.n {
        let end = (start + chunk).min(batch.n);
        let idx: Vec<usize> = (start..end).collect();
        let part;
        let sub = if batch.n <= chunk {
            batch
        } else {
            part = batch.select(&idx);
            &part
        };
        let mut g = Graph::new();
        let rates = model.forward_rates(&mut g, store, sub)?;
        for (t, &node) in rates.iter().enumerate() {
            for (i, &v) in g.value(node).data().iter().enumerate() {
                out[(start + i) * m + t] = v;
            }
        }
        start = end;
    }
    Ok(Tensor::from_vec(&[batch.n, m], out)?)
}

/// Scores predictions against labels cell by cell. Errors if any populated
/// cell has zero label mass, since NMAE is undefined there.
pub fn evaluate(
    model: &dyn Model,
    store: &ParamStore,
    batch: &Batch,
    chunk: usize,
) -> Result<MetricsReport, TrainError> {
    let pred = predict(model, store, batch, chunk)?;
    let m = pred.shape()[1];
    let mut by_cell: BTreeMap<(u32, usize), (Vec<f64>, Vec<f64>)> = BTreeMap::new();
    for i in 0..batch.n {
        let s = batch.scenario_of[i];
        for t in 0..m {
            let (p, y) = by_cell.entry((s, t)).or_default();
            p.push(pred.data()[i * m + t]);
            y.push(batch.labels.data()[i * m + t]);
        }
    }

    let mut cells = Vec::with_capacity(by_cell.len());
    let mut macro_nmae = Kahan::default();
    let mut macro_smape = Kahan::default();
    let mut all_p = Vec::with_capacity(batch.n * m);
    let mut all_y = Vec::with_capacity(batch.n * m);
    for (&(scenario, task), (p, y)) in &by_cell {
        let cell_nmae = nmae(p, y)?;
        let cell_smape = smape(p, y)?;
        macro_nmae.add(cell_nmae);
        macro_smape.add(cell_smape);
        all_p.extend_from_slice(p);
        all_y.extend_from_slice(y);
        cells.push(CellMetrics {
            scenario,
            task,
            nmae: cell_nmae,
            smape: cell_smape,
            n: p.len(),
        });
    }
    let n_cells = cells.len();
    Ok(MetricsReport {
        cells,
        pooled: OverallMetrics {
            nmae: nmae(&all_p, &all_y)?,
            smape: smape(&all_p, &all_y)?,
            n: all_p.len(),
        },
        macro_avg: OverallMetrics {
            nmae: macro_nmae.value() / n_cells as f64,
            smape: macro_smape.value() / n_cells as f64,
            n: n_cells,
        },
        config_hash: String::new(),
        seed: 0,
        revision: String::from("dev"),
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::backbone::tests::{toy_batch, toy_config};
    use crate::config::{ModelConfig, Variant};
    use crate::tensor::{Graph, NodeId, TensorError};

    /// Emits a fixed [n, m] table as its per-task rates; the table is read
    /// off the batch labels or supplied directly.
    struct TablePredictor {
        cfg: ModelConfig,
        rows: Option<Tensor>,
    }

    impl Model for TablePredictor {
        fn forward_rates(
            &self,
            g: &mut Graph,
            _store: &ParamStore,
            batch: &Batch,
        ) -> Result<Vec<NodeId>, TensorError> {
            let src = self.rows.as_ref().unwrap_or(&batch.labels);
            let m = src.shape()[1];
            let mut out = Vec::with_capacity(m);
            for t in 0..m {
                let col: Vec<f64> = (0..batch.n)
                    .map(|i| {
                        if self.rows.is_some() {
                            src.data()[t]
                        } else {
                            src.data()[i * m + t]
                        }
                    })
                    .collect();
                out.push(g.input(Tensor::from_vec(&[batch.n, 1], col)?));
            }
            Ok(out)
        }

        fn config(&self) -> &ModelConfig {
            &self.cfg
        }

        fn variant(&self) -> Variant {
            Variant::M2m
        }

        fn output_scales(&self) -> Vec<f64> {
            vec![1.0; self.cfg.shape.n_tasks]
        }

        fn set_output_scales(&mut self, _scales: &[f64]) {}
    }

    fn oracle() -> TablePredictor {
        TablePredictor {
            cfg: toy_config(),
            rows: None,
        }
    }

    #[test]
    fn oracle_predictor_scores_zero_in_every_cell() {
        let cfg = toy_config();
        let batch = toy_batch(&cfg, 60, 4);
        let store = ParamStore::new();
        let rep = evaluate(&oracle(), &store, &batch, 17).unwrap();
        for c in &rep.cells {
            assert_eq!(c.nmae, 0.0);
            assert_eq!(c.smape, 0.0);
        }
        assert_eq!(rep.pooled.nmae, 0.0);
        assert_eq!(rep.macro_avg.smape, 0.0);
    }

    #[test]
    fn report_covers_every_populated_cell_once() {
        let cfg = toy_config();
        let batch = toy_batch(&cfg, 60, 4);
        let store = ParamStore::new();
        let rep = evaluate(&oracle(), &store, &batch, 64).unwrap();
        let s = cfg.shape.n_scenarios as usize;
        let m = cfg.shape.n_tasks;
        assert_eq!(rep.cells.len(), s * m);
        let total: usize = rep.cells.iter().map(|c| c.n).sum();
        assert_eq!(total, batch.n * m);
        assert_eq!(rep.pooled.n, batch.n * m);
        assert_eq!(rep.macro_avg.n, s * m);
        // Sorted by (scenario, task).
        let keys: Vec<(u32, usize)> = rep.cells.iter().map(|c| (c.scenario, c.task)).collect();
        let mut sorted = keys.clone();
        sorted.sort();
        assert_eq!(keys, sorted);
    }

    #[test]
    fn a_scenario_with_no_samples_is_absent_not_zero() {
        let cfg = toy_config();
        let mut batch = toy_batch(&cfg, 40, 4);
        for (i, s) in batch.scenario_of.iter_mut().enumerate() {
            *s = if i % 2 == 0 { 0 } else { 2 };
        }
        let store = ParamStore::new();
        let rep = evaluate(&oracle(), &store, &batch, 64).unwrap();
        assert_eq!(rep.cells.len(), 2 * cfg.shape.n_tasks);
        assert!(rep.cells.iter().all(|c| c.scenario != 1));
    }

    #[test]
    fn constant_mean_predictor_matches_the_closed_form() {
        let cfg = toy_config();
        let batch = toy_batch(&cfg, 50, 9);
        let m = cfg.shape.n_tasks;
        let mut means = vec![0.0; m];
        for i in 0..batch.n {
            for t in 0..m {
                means[t] += batch.labels.data()[i * m + t] / batch.n as f64;
            }
        }
        let model = TablePredictor {
            cfg: toy_config(),
            rows: Some(Tensor::from_vec(&[1, m], means.clone()).unwrap()),
        };
        let store = ParamStore::new();
        let rep = evaluate(&model, &store, &batch, 64).unwrap();

        let mut abs_dev = 0.0;
        let mut mass = 0.0;
        for i in 0..batch.n {
            for t in 0..m {
                let y = batch.labels.data()[i * m + t];
                abs_dev += (means[t] - y).abs();
                mass += y;
            }
        }
        assert!((rep.pooled.nmae - abs_dev / mass).abs() < 1e-12);
    }

    #[test]
    fn chunked_and_whole_batch_prediction_agree_exactly() {
        let cfg = toy_config();
        let batch = toy_batch(&cfg, 23, 2);
        let store = ParamStore::new();
        let a = predict(&oracle(), &store, &batch, 7).unwrap();
        let b = predict(&oracle(), &store, &batch, 23).unwrap();
        assert_eq!(a.data(), b.data());
    }

    #[test]
    fn csv_outputs_carry_the_contracted_columns() {
        let cfg = toy_config();
        let batch = toy_batch(&cfg, 30, 4);
        let store = ParamStore::new();
        let rep = evaluate(&oracle(), &store, &batch, 64)
            .unwrap()
            .with_run_info("abc123", 7, "r1");
        let cells = rep.cells_csv();
        assert!(cells.starts_with("scenario,task,nmae,smape,n\n"));
        assert_eq!(cells.lines().count(), 1 + rep.cells.len());
        let summary = rep.summary_csv();
        assert!(summary.starts_with(
            "pooled_nmae,pooled_smape,macro_nmae,macro_smape,n,config_hash,seed,revision\n"
        ));
        assert!(summary.contains("abc123"));
        assert!(summary.trim_end().ends_with("r1"));
    }
}

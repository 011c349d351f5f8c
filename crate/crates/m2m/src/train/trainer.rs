//! Minibatch training loop: shuffle, clip, Adam, and checkpoint selection by
//! pooled validation NMAE.

use super::eval::evaluate;
use super::loss::joint_loss;
use super::metrics::Kahan;
use super::TrainError;
use crate::config::TrainConfig;
use crate::features::Batch;
use crate::model::Model;
use crate::tensor::{clip_gradients, AdamState, GradStore, Graph, ParamStore};
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

/// One history row per epoch; serialized by [`history_csv`].
#[derive(Debug, Clone, PartialEq)]
pub struct EpochStats {
    pub epoch: usize,
    /// Mean joint loss over the epoch's minibatches, each measured before
    /// its update step.
    pub train_loss: f64,
    pub valid_loss: f64,
    /// Pooled NMAE over the validation split; the selection metric.
    pub valid_overall_nmae: f64,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub history: Vec<EpochStats>,
    /// Epoch number (not history index) whose parameters were kept; the two
    /// differ on resumed runs, where numbering continues from the earlier run.
    pub best_epoch: usize,
    pub best_valid_nmae: f64,
}

/// `epoch,train_loss,valid_loss,valid_overall_nmae`, one row per epoch.
pub fn history_csv(history: &[EpochStats]) -> String {
    let mut out = String::from("epoch,train_loss,valid_loss,valid_overall_nmae\n");
    for h in history {
        out.push_str(&format!(
            "{},{},{},{}\n",
            h.epoch, h.train_loss, h.valid_loss, h.valid_overall_nmae
        ));
    }
    out
}

/// Names the parameter group holding non-finite values, gradients as a
/// fallback, or "activations" when both are clean (the blowup happened in
/// the forward pass alone).
fn non_finite_group(store: &ParamStore, grads: Option<&GradStore>) -> String {
    for id in store.ids() {
        if store.value(id).data().iter().any(|v| !v.is_finite()) {
            return store.group(id).label().to_string();
        }
    }
    if let Some(gr) = grads {
        for id in store.ids() {
            if gr.get(id).data().iter().any(|v| !v.is_finite()) {
                return format!("{} gradients", store.group(id).label());
            }
        }
    }
    "activations".to_string()
}

/// Trains `model` in place and leaves `store` holding the parameters of the
/// epoch with the lowest pooled validation NMAE, not the last one.
///
/// Before the first epoch the rate heads are calibrated to the train-split
/// label means, so the network starts near the right output magnitude and
/// learns multiplicative corrections. Any non-finite loss, gradient, or rate
/// aborts with the epoch, batch, and offending parameter group.
pub fn train(
    model: &mut dyn Model,
    store: &mut ParamStore,
    train: &Batch,
    valid: &Batch,
    cfg: &TrainConfig,
) -> Result<TrainOutcome, TrainError> {
    train_resumable(model, store, train, valid, cfg, 0, None).map(|(out, _)| out)
}

/// [`train`] with explicit provenance: `start_epoch` continues the epoch
/// numbering of an earlier run and `adam_init` carries its optimizer
/// moments, so a resumed run picks up the trajectory instead of restarting
/// Adam cold. Shuffle order is a pure function of (seed, epoch number),
/// which keeps any epoch's batches independent of where the run started.
/// Returns the final optimizer state alongside the outcome; note the store
/// holds the best epoch's parameters while the moments are the last one's.
pub fn train_resumable(
    model: &mut dyn Model,
    store: &mut ParamStore,
    train: &Batch,
    valid: &Batch,
    cfg: &TrainConfig,
    start_epoch: usize,
    adam_init: Option<AdamState>,
) -> Result<(TrainOutcome, AdamState), TrainError> {
    cfg.validate()?;
    let m = train.labels.shape()[1];
    cfg.loss.validate(m)?;
    if train.n == 0 || valid.n == 0 {
        return Err(TrainError::EmptyBatch { context: "train" });
    }

    let mut scales = vec![1.0; m];
    for t in 0..m {
        let mut sum = Kahan::default();
        for i in 0..train.n {
            sum.add(train.labels.data()[i * m + t]);
        }
        let mean = sum.value() / train.n as f64;
        if mean > 0.0 {
            scales[t] = mean;
        }
    }
    model.set_output_scales(&scales);

    let mut adam = adam_init.unwrap_or_else(|| AdamState::new(store));
    let mut history = Vec::with_capacity(cfg.epochs);
    let mut best: Option<(usize, f64, ParamStore)> = None;
    let mut idx: Vec<usize> = (0..train.n).collect();

    for epoch in start_epoch..start_epoch + cfg.epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(
            cfg.seed ^ (epoch as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15),
        );
        idx.shuffle(&mut rng);
        let mut loss_sum = Kahan::default();
        for (batch_i, chunk) in idx.chunks(cfg.batch_size).enumerate() {
            let mb = train.select(chunk);
            let mut g = Graph::new();
            let rates = model.forward_rates(&mut g, store, &mb)?;
            for &r in &rates {
                if g.value(r).data().iter().any(|v| !v.is_finite()) {
                    return Err(TrainError::NonFinite {
                        epoch,
                        batch: batch_i,
                        group: non_finite_group(store, None),
                    });
                }
            }
            let loss = joint_loss(&mut g, store, &rates, &mb.labels, &cfg.loss)?;
            let loss_value = g.value(loss).data()[0];
            if !loss_value.is_finite() {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_i,
                    group: non_finite_group(store, None),
                });
            }
            loss_sum.add(loss_value * mb.n as f64);

            let mut grads = GradStore::new(store);
            g.backward(loss, &mut grads)?;
            let clean = store
                .ids()
                .all(|id| grads.get(id).data().iter().all(|v| v.is_finite()));
            if !clean {
                return Err(TrainError::NonFinite {
                    epoch,
                    batch: batch_i,
                    group: non_finite_group(store, Some(&grads)),
                });
            }
            clip_gradients(&mut grads, cfg.clip);
            adam.step(&cfg.adam, store, &grads);
        }
        let train_loss = loss_sum.value() / train.n as f64;

        let mut vsum = Kahan::default();
        let mut start = 0;
        while start < valid.n {
            let end = (start + cfg.batch_size).min(valid.n);
            let part: Vec<usize> = (start..end).collect();
            let vb = if valid.n <= cfg.batch_size {
                valid.clone()
            } else {
                valid.select(&part)
            };
            let mut g = Graph::new();
            let rates = model.forward_rates(&mut g, store, &vb)?;
            let loss = joint_loss(&mut g, store, &rates, &vb.labels, &cfg.loss)?;
            vsum.add(g.value(loss).data()[0] * vb.n as f64);
            start = end;
        }
        let valid_loss = vsum.value() / valid.n as f64;
        let report = evaluate(model, store, valid, cfg.batch_size)?;
        let valid_nmae = report.pooled.nmae;

        history.push(EpochStats {
            epoch,
            train_loss,
            valid_loss,
            valid_overall_nmae: valid_nmae,
        });
        let improved = match &best {
            Some((_, b, _)) => valid_nmae < *b,
            None => true,
        };
        if improved {
            best = Some((epoch, valid_nmae, store.clone()));
        }
    }

    let (best_epoch, best_valid_nmae, best_store) =
        best.expect("at least one epoch ran, so a best checkpoint exists");
    *store = best_store;
    Ok((
        TrainOutcome {
            history,
            best_epoch,
            best_valid_nmae,
        },
        adam,
    ))
}

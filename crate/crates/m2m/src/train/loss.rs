//! Poisson deviance and the weighted multi-task objective.

use super::metrics::Kahan;
use super::TrainError;
use crate::config::LossConfig;
use crate::tensor::{Graph, NodeId, ParamGroup, ParamStore, Tensor, TensorError};

/// Mean Poisson negative log-likelihood with the constant `ln(y!)` dropped:
/// `(1/N) * sum(rate - y * ln(rate))`. Minimized, for fixed labels, at
/// `rate = y`. Rates must be strictly positive.
pub fn poisson_loss(rates: &[f64], labels: &[f64]) -> Result<f64, TrainError> {
    if rates.len() != labels.len() {
        return Err(TrainError::LengthMismatch {
            context: "poisson_loss",
            lhs: rates.len(),
            rhs: labels.len(),
        });
    }
    if rates.is_empty() {
        return Err(TrainError::EmptyBatch {
            context: "poisson_loss",
        });
    }
    let mut sum = Kahan::default();
    for (i, (&r, &y)) in rates.iter().zip(labels).enumerate() {
        if !(r > 0.0) {
            return Err(TrainError::NonPositiveRate { index: i, value: r });
        }
        sum.add(r - y * r.ln());
    }
    Ok(sum.value() / rates.len() as f64)
}

/// Graph form of [`poisson_loss`] over matching rate and label nodes.
/// Positivity is checked against the already-computed forward values, so the
/// domain error surfaces here rather than as a NaN during backprop.
pub fn poisson_loss_node(
    g: &mut Graph,
    rates: NodeId,
    labels: NodeId,
) -> Result<NodeId, TrainError> {
    if g.shape(rates) != g.shape(labels) {
        return Err(TensorError::ShapeMismatch {
            op: "poisson_loss",
            lhs: g.shape(rates).to_vec(),
            rhs: g.shape(labels).to_vec(),
        }
        .into());
    }
    let n = g.value(rates).data().len();
    if n == 0 {
        return Err(TrainError::EmptyBatch {
            context: "poisson_loss",
        });
    }
    for (i, &r) in g.value(rates).data().iter().enumerate() {
        if !(r > 0.0) {
            return Err(TrainError::NonPositiveRate { index: i, value: r });
        }
    }
    let ln_r = g.ln(rates);
    let y_ln_r = g.mul(labels, ln_r)?;
    let per_sample = g.sub(rates, y_ln_r)?;
    let total = g.sum_all(per_sample);
    Ok(g.scale(total, 1.0 / n as f64))
}

/// Weighted sum of per-task Poisson losses plus `reg_alpha` times the
/// squared Frobenius norms of both parameter groups (meta generators and
/// everything else). Tasks with zero weight are skipped entirely; with every
/// weight zero the result is the bare regularizer.
pub fn joint_loss(
    g: &mut Graph,
    store: &ParamStore,
    rates: &[NodeId],
    labels: &Tensor,
    cfg: &LossConfig,
) -> Result<NodeId, TrainError> {
    let m = labels.shape()[1];
    if rates.len() != m {
        return Err(TrainError::LengthMismatch {
            context: "joint_loss",
            lhs: rates.len(),
            rhs: m,
        });
    }
    cfg.validate(m)?;
    let n = labels.shape()[0];
    let mut acc: Option<NodeId> = None;
    let mut push = |g: &mut Graph, node: NodeId| -> Result<(), TensorError> {
        acc = Some(match acc {
            Some(a) => g.add(a, node)?,
            None => node,
        });
        Ok(())
    };
    for (t, &rate) in rates.iter().enumerate() {
        let w = cfg.weight(t);
        if w == 0.0 {
            continue;
        }
        let col: Vec<f64> = (0..n).map(|i| labels.data()[i * m + t]).collect();
        let y = g.input(Tensor::from_vec(&[n, 1], col)?);
        let task_loss = poisson_loss_node(g, rate, y)?;
        let weighted = if w == 1.0 {
            task_loss
        } else {
            g.scale(task_loss, w)
        };
        push(g, weighted)?;
    }
    if cfg.reg_alpha > 0.0 {
        let mut reg: Option<NodeId> = None;
        for group in [ParamGroup::MetaGenerator, ParamGroup::Backbone] {
            for id in store.ids() {
                if store.group(id) != group {
                    continue;
                }
                let leaf = g.param(store, id);
                let sq = g.sum_squares(leaf);
                reg = Some(match reg {
                    Some(r) => g.add(r, sq)?,
                    None => sq,
                });
            }
        }
        if let Some(r) = reg {
            let scaled = g.scale(r, cfg.reg_alpha);
            push(g, scaled)?;
        }
    }
    Ok(match acc {
        Some(node) => node,
        None => g.input(Tensor::from_vec(&[1], vec![0.0])?),
    })
}

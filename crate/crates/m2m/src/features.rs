//! Turns raw panel samples into model inputs: bucketized activity ids for the
//! sequence towers, categorical ids for the embedding tables, and a small
//! dense vector of standardized log-activity levels.
//!
//! The featurizer is fit once on the training split and then applied to every
//! split and every model variant. Its fingerprint ([`Featurizer::pipeline_hash`])
//! is stamped on run outputs; experiments that compare models assert the
//! fingerprints match, so no variant can win through a different view of the
//! data.

use crate::config::DataShape;
use crate::datagen::buckets::BucketSpec;
use crate::datagen::{DatasetMeta, Sample};
use crate::hash::fnv1a64;
use crate::tensor::Tensor;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Bucket ids per sequence channel: id 0 catches zero-activity days, the rest
/// split [1, 1e6] geometrically.
const SEQ_BUCKETS: usize = 32;

#[derive(Debug, Error)]
pub enum FeatureError {
    #[error("cannot fit featurizer on an empty sample set")]
    Empty,
    #[error("inconsistent panel: {0}")]
    Inconsistent(String),
    #[error("window {window} exceeds the {seq_len}-day sequences in the data")]
    WindowTooLong { window: usize, seq_len: usize },
}

/// One model-ready slice of the panel. Id buffers are flat and row-major;
/// float buffers are tensors sized for direct graph entry.
#[derive(Debug, Clone)]
pub struct Batch {
    pub n: usize,
    /// Bucket ids, laid out (sample, day, channel); length n * window * B.
    pub behavior_ids: Vec<usize>,
    /// Same layout for performance channels; length n * window * P.
    pub performance_ids: Vec<usize>,
    /// Scenario-attribute ids, (sample, field); length n * |attr fields|.
    pub scenario_attr_ids: Vec<usize>,
    /// Profile ids, (sample, field); length n * |profile fields|.
    pub profile_ids: Vec<usize>,
    /// [n, B + P] standardized log mean activity per channel.
    pub dense: Tensor,
    /// [n, m] horizon totals as floats.
    pub labels: Tensor,
    /// [n, m] latent rates behind the labels (evaluation oracle only).
    pub true_rates: Tensor,
    /// Scenario of each sample, for per-scenario metric cells.
    pub scenario_of: Vec<u32>,
}

impl Batch {
    /// Row-gathers every per-sample field into a new batch, in `idx` order.
    /// Per-sample strides are recovered from the field lengths, so this works
    /// for any window and channel configuration. Panics if an index is out of
    /// range, as that is always a caller bug.
    pub fn select(&self, idx: &[usize]) -> Batch {
        assert!(idx.iter().all(|&i| i < self.n), "select index out of range");
        let gather_ids = |v: &[usize]| -> Vec<usize> {
            let stride = v.len() / self.n;
            let mut out = Vec::with_capacity(idx.len() * stride);
            for &i in idx {
                out.extend_from_slice(&v[i * stride..(i + 1) * stride]);
            }
            out
        };
        let gather_rows = |t: &Tensor| -> Tensor {
            let stride = t.shape()[1];
            let mut out = Vec::with_capacity(idx.len() * stride);
            for &i in idx {
                out.extend_from_slice(&t.data()[i * stride..(i + 1) * stride]);
            }
            Tensor::from_vec(&[idx.len(), stride], out).expect("gather preserves row shape")
        };
        Batch {
            n: idx.len(),
            behavior_ids: gather_ids(&self.behavior_ids),
            performance_ids: gather_ids(&self.performance_ids),
            scenario_attr_ids: gather_ids(&self.scenario_attr_ids),
            profile_ids: gather_ids(&self.profile_ids),
            dense: gather_rows(&self.dense),
            labels: gather_rows(&self.labels),
            true_rates: gather_rows(&self.true_rates),
            scenario_of: idx.iter().map(|&i| self.scenario_of[i]).collect(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Featurizer {
    buckets: BucketSpec,
    window: usize,
    shape: DataShape,
    /// Train-split mean of log1p channel activity, per channel.
    dense_mean: Vec<f64>,
    /// Train-split standard deviation of the same, floored away from zero.
    dense_std: Vec<f64>,
}

impl Featurizer {
    /// Fit on the training split. `meta` supplies the scenario and task
    /// counts so a split that happens to miss a scenario still produces
    /// correctly sized vocabularies.
    pub fn fit(
        train: &[Sample],
        meta: &DatasetMeta,
        window: usize,
    ) -> Result<Featurizer, FeatureError> {
        let first = train.first().ok_or(FeatureError::Empty)?;
        let seq_len = first.behavior_seq.len();
        if window == 0 || window > seq_len {
            return Err(FeatureError::WindowTooLong { window, seq_len });
        }
        let n_behavior = first.behavior_seq[0].len();
        let n_performance = first.performance_seq.first().map_or(0, Vec::len);
        let n_tasks = meta.config.n_tasks();
        let n_scenarios = meta.config.n_scenarios();

        let mut attr_max = vec![0u32; first.scenario_attrs.len()];
        let mut prof_max = vec![0u32; first.profile.len()];
        for s in train {
            check_sample(s, seq_len, n_behavior, n_performance, n_tasks)?;
            if s.scenario_attrs.len() != attr_max.len() || s.profile.len() != prof_max.len() {
                return Err(FeatureError::Inconsistent(format!(
                    "advertiser {}: categorical field counts differ across samples",
                    s.advertiser_id
                )));
            }
            for (m, &v) in attr_max.iter_mut().zip(&s.scenario_attrs) {
                *m = (*m).max(v);
            }
            for (m, &v) in prof_max.iter_mut().zip(&s.profile) {
                *m = (*m).max(v);
            }
        }
        // Vocabularies cover everything seen in training plus the generator's
        // documented ranges, so validation and test ids stay in range.
        let floors_attr = [n_scenarios as u32, 10, 6];
        let floors_prof = [8u32, 5, 16];
        let vocab = |maxes: &[u32], floors: &[u32]| {
            maxes
                .iter()
                .enumerate()
                .map(|(i, &m)| (m + 1).max(floors.get(i).copied().unwrap_or(1)) as usize)
                .collect::<Vec<usize>>()
        };

        let buckets =
            BucketSpec::log_spaced(1.0, 1e6, SEQ_BUCKETS).expect("static bucket spec is valid");
        let shape = DataShape {
            n_behavior,
            n_performance,
            n_tasks,
            n_scenarios,
            scenario_attr_vocab: vocab(&attr_max, &floors_attr),
            profile_vocab: vocab(&prof_max, &floors_prof),
            seq_buckets: buckets.n_buckets(),
        };

        let n_dense = n_behavior + n_performance;
        let mut sum = vec![0.0f64; n_dense];
        let mut sumsq = vec![0.0f64; n_dense];
        for s in train {
            for (c, v) in log_means(s, window).enumerate() {
                sum[c] += v;
                sumsq[c] += v * v;
            }
        }
        let n = train.len() as f64;
        let dense_mean: Vec<f64> = sum.iter().map(|s| s / n).collect();
        let dense_std: Vec<f64> = sumsq
            .iter()
            .zip(&dense_mean)
            .map(|(sq, m)| (sq / n - m * m).max(0.0).sqrt().max(1e-6))
            .collect();

        Ok(Featurizer {
            buckets,
            window,
            shape,
            dense_mean,
            dense_std,
        })
    }

    pub fn shape(&self) -> &DataShape {
        &self.shape
    }

    pub fn window(&self) -> usize {
        self.window
    }

    /// Fingerprint of the whole pipeline: bucket edges, window, vocabularies,
    /// and standardization constants.
    pub fn pipeline_hash(&self) -> u64 {
        let canon = serde_json::to_vec(self).expect("featurizer serializes");
        fnv1a64(&canon)
    }

    pub fn transform(&self, samples: &[Sample]) -> Result<Batch, FeatureError> {
        let n = samples.len();
        let w = self.window;
        let sh = &self.shape;
        let mut behavior_ids = Vec::with_capacity(n * w * sh.n_behavior);
        let mut performance_ids = Vec::with_capacity(n * w * sh.n_performance);
        let mut scenario_attr_ids = Vec::with_capacity(n * sh.scenario_attr_vocab.len());
        let mut profile_ids = Vec::with_capacity(n * sh.profile_vocab.len());
        let mut dense = Vec::with_capacity(n * (sh.n_behavior + sh.n_performance));
        let mut labels = Vec::with_capacity(n * sh.n_tasks);
        let mut rates = Vec::with_capacity(n * sh.n_tasks);
        let mut scenario_of = Vec::with_capacity(n);

        for s in samples {
            let seq_len = s.behavior_seq.len();
            if w > seq_len {
                return Err(FeatureError::WindowTooLong {
                    window: w,
                    seq_len,
                });
            }
            check_sample(s, seq_len, sh.n_behavior, sh.n_performance, sh.n_tasks)?;
            let start = seq_len - w;
            for day in start..seq_len {
                for &count in &s.behavior_seq[day] {
                    behavior_ids.push(self.bucket_of(count)?);
                }
            }
            for day in start..seq_len {
                for &count in &s.performance_seq[day] {
                    performance_ids.push(self.bucket_of(count)?);
                }
            }
            for (field, &id) in s.scenario_attrs.iter().enumerate() {
                scenario_attr_ids.push(in_vocab(id, &sh.scenario_attr_vocab, field, "scenario")?);
            }
            for (field, &id) in s.profile.iter().enumerate() {
                profile_ids.push(in_vocab(id, &sh.profile_vocab, field, "profile")?);
            }
            for (c, v) in log_means(s, w).enumerate() {
                dense.push((v - self.dense_mean[c]) / self.dense_std[c]);
            }
            labels.extend(s.labels.iter().map(|&l| l as f64));
            rates.extend_from_slice(&s.true_rates);
            scenario_of.push(s.scenario_id);
        }

        let n_dense = sh.n_behavior + sh.n_performance;
        Ok(Batch {
            n,
            behavior_ids,
            performance_ids,
            scenario_attr_ids,
            profile_ids,
            dense: Tensor::from_vec(&[n, n_dense], dense).expect("dense sized"),
            labels: Tensor::from_vec(&[n, sh.n_tasks], labels).expect("labels sized"),
            true_rates: Tensor::from_vec(&[n, sh.n_tasks], rates).expect("rates sized"),
            scenario_of,
        })
    }

    fn bucket_of(&self, count: u64) -> Result<usize, FeatureError> {
        self.buckets
            .discretize(count as f64)
            .map_err(|e| FeatureError::Inconsistent(e.to_string()))
    }
}

fn in_vocab(
    id: u32,
    vocab: &[usize],
    field: usize,
    kind: &str,
) -> Result<usize, FeatureError> {
    let cap = vocab.get(field).copied().unwrap_or(0);
    if (id as usize) < cap {
        Ok(id as usize)
    } else {
        Err(FeatureError::Inconsistent(format!(
            "{kind} field {field} id {id} outside vocabulary of {cap}"
        )))
    }
}

/// log1p of each channel's mean count over the trailing `window` days,
/// behavior channels first.
fn log_means(s: &Sample, window: usize) -> impl Iterator<Item = f64> + '_ {
    let start = s.behavior_seq.len() - window;
    let mean = move |seq: &[Vec<u64>], c: usize| {
        let total: u64 = seq[start..].iter().map(|row| row[c]).sum();
        (total as f64 / window as f64).ln_1p()
    };
    let b = s.behavior_seq[0].len();
    let p = s.performance_seq.first().map_or(0, Vec::len);
    (0..b)
        .map(move |c| mean(&s.behavior_seq, c))
        .chain((0..p).map(move |c| mean(&s.performance_seq, c)))
}

fn check_sample(
    s: &Sample,
    seq_len: usize,
    n_behavior: usize,
    n_performance: usize,
    n_tasks: usize,
) -> Result<(), FeatureError> {
    let bad = |msg: String| {
        Err(FeatureError::Inconsistent(format!(
            "advertiser {} (scenario {}): {msg}",
            s.advertiser_id, s.scenario_id
        )))
    };
    if s.behavior_seq.len() != seq_len || s.performance_seq.len() != seq_len {
        return bad(format!(
            "sequence length {} vs {seq_len} elsewhere",
            s.behavior_seq.len()
        ));
    }
    if s.behavior_seq.iter().any(|r| r.len() != n_behavior)
        || s.performance_seq.iter().any(|r| r.len() != n_performance)
    {
        return bad("channel count differs across days or samples".into());
    }
    if s.labels.len() != n_tasks || s.true_rates.len() != n_tasks {
        return bad(format!("{} labels for {n_tasks} tasks", s.labels.len()));
    }
    Ok(())
}

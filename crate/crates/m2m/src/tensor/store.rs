//! Persistent parameter storage.
//!
//! Models own a [`ParamStore`]; a [`Graph`](super::Graph) copies parameter
//! values into leaf nodes at forward time and `backward` accumulates into a
//! [`GradStore`] that mirrors the store index-for-index. Creation order is
//! fixed by the model constructors, which makes initialization, checkpoint
//! layout, and optimizer state all deterministic.

use super::{Tensor, TensorError};
use rand::Rng;

/// Loss-relevant parameter grouping: meta-unit generator parameters form one
/// Frobenius-norm term of the regularizer, everything else forms the other.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ParamGroup {
    MetaGenerator,
    Backbone,
}

impl ParamGroup {
    pub fn label(self) -> &'static str {
        match self {
            ParamGroup::MetaGenerator => "meta_generator",
            ParamGroup::Backbone => "backbone",
        }
    }
}

/// Handle into a [`ParamStore`]. Only valid for the store that produced it.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
struct Entry {
    name: String,
    group: ParamGroup,
    value: Tensor,
}

/// Named, grouped, ordered collection of trainable tensors.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<Entry>,
}

impl ParamStore {
    pub fn new() -> ParamStore {
        ParamStore::default()
    }

    pub fn add(
        &mut self,
        name: &str,
        group: ParamGroup,
        value: Tensor,
    ) -> Result<ParamId, TensorError> {
        if self.entries.iter().any(|e| e.name == name) {
            return Err(TensorError::DuplicateParam(name.to_string()));
        }
        self.entries.push(Entry {
            name: name.to_string(),
            group,
            value,
        });
        Ok(ParamId(self.entries.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn value(&self, id: ParamId) -> &Tensor {
        &self.entries[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.entries[id.0].value
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.entries[id.0].group
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Total number of scalars outside the meta-generator group.
    pub fn total_len_in_group(&self, group: ParamGroup) -> usize {
        self.entries
            .iter()
            .filter(|e| e.group == group)
            .map(|e| e.value.len())
            .sum()
    }
}

/// Gradient buffers mirroring a [`ParamStore`]. Gradients accumulate across
/// `backward` calls until [`GradStore::zero`] is invoked.
#[derive(Debug, Clone)]
pub struct GradStore {
    grads: Vec<Tensor>,
}

impl GradStore {
    pub fn new(store: &ParamStore) -> GradStore {
        GradStore {
            grads: store
                .entries
                .iter()
                .map(|e| Tensor::zeros(e.value.shape()))
                .collect(),
        }
    }

    pub fn zero(&mut self) {
        for g in &mut self.grads {
            g.fill(0.0);
        }
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.grads[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.grads[id.0]
    }

    pub fn len(&self) -> usize {
        self.grads.len()
    }

    pub fn is_empty(&self) -> bool {
        self.grads.is_empty()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.grads.iter_mut()
    }

    /// Largest |component| across all buffers; 0 when empty.
    pub fn max_abs(&self) -> f64 {
        self.grads
            .iter()
            .flat_map(|g| g.data().iter())
            .fold(0.0f64, |acc, v| acc.max(v.abs()))
    }

    pub fn is_finite_all(&self) -> bool {
        self.grads.iter().all(|g| g.is_finite_all())
    }
}

/// Uniform(-bound, bound) init with the Glorot fan-based bound.
pub fn xavier_uniform<R: Rng>(shape: &[usize], rng: &mut R) -> Tensor {
    let (fan_in, fan_out) = match shape.len() {
        0 => (1, 1),
        1 => (shape[0], shape[0]),
        _ => (shape[0], shape[1..].iter().product()),
    };
    let bound = (6.0 / (fan_in + fan_out) as f64).sqrt();
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).expect("xavier shape/data length")
}

/// Uniform(-bound, bound) with an explicit bound; used for embedding tables
/// and for the deliberately small hypernetwork mixing matrices.
pub fn uniform_init<R: Rng>(shape: &[usize], bound: f64, rng: &mut R) -> Tensor {
    let data = (0..shape.iter().product())
        .map(|_| rng.gen_range(-bound..bound))
        .collect();
    Tensor::from_vec(shape, data).expect("uniform shape/data length")
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::new();
        s.add("w", ParamGroup::Backbone, Tensor::zeros(&[2])).unwrap();
        assert!(s.add("w", ParamGroup::Backbone, Tensor::zeros(&[2])).is_err());
    }

    #[test]
    fn totals_and_groups() {
        let mut s = ParamStore::new();
        s.add("a", ParamGroup::Backbone, Tensor::zeros(&[2, 3])).unwrap();
        s.add("b", ParamGroup::MetaGenerator, Tensor::zeros(&[4])).unwrap();
        assert_eq!(s.total_len(), 10);
        assert_eq!(s.total_len_in_group(ParamGroup::MetaGenerator), 4);
        assert_eq!(s.find("b"), Some(ParamId(1)));
        assert_eq!(s.find("missing"), None);
    }

    #[test]
    fn xavier_bound_respected() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let t = xavier_uniform(&[10, 10], &mut rng);
        let bound = (6.0 / 20.0f64).sqrt();
        assert!(t.data().iter().all(|v| v.abs() < bound));
        // Not all identical.
        assert!(t.data().iter().any(|v| (v - t.data()[0]).abs() > 1e-12));
    }
}

use std::sync::Arc;

use sha2::{Digest, Sha256};

use super::{AutodiffError, Tensor};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
struct Param {
    name: String,
    value: Arc<Tensor>,
    trainable: bool,
}

/// Named model parameters. Values are shared copy-on-write with tapes, so
/// binding a parameter for a forward pass does not copy it.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
}

/// Gradients produced by one backward pass, keyed by parameter.
#[derive(Clone, Debug, Default)]
pub struct ParamGrads {
    entries: Vec<(ParamId, Vec<f64>)>,
}

impl ParamGrads {
    pub(crate) fn push(&mut self, id: ParamId, g: Vec<f64>) {
        self.entries.push((id, g));
    }

    pub fn get(&self, id: ParamId) -> Option<&[f64]> {
        self.entries
            .iter()
            .find(|(p, _)| *p == id)
            .map(|(_, g)| g.as_slice())
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &[f64])> {
        self.entries.iter().map(|(p, g)| (*p, g.as_slice()))
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        let mut value = value;
        value.set_requires_grad(trainable);
        self.params.push(Param {
            name: name.into(),
            value: Arc::new(value),
            trainable,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor> {
        Arc::clone(&self.params[id.0].value)
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.params[id.0].name
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.params[id.0].trainable
    }

    /// Marks every parameter untrainable.
    pub fn freeze(&mut self) {
        for p in &mut self.params {
            p.trainable = false;
            Arc::make_mut(&mut p.value).set_requires_grad(false);
        }
    }

    pub fn num_values(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn accumulate(&mut self, grads: &ParamGrads) -> Result<(), AutodiffError> {
        for (id, g) in grads.iter() {
            Arc::make_mut(&mut self.params[id.0].value).accumulate_grad(g)?;
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            if p.value.grad().is_some() {
                Arc::make_mut(&mut p.value).zero_grad();
            }
        }
    }

    /// Cheap snapshot of all values (shared until the next update).
    pub fn snapshot(&self) -> ParamStore {
        let mut s = self.clone();
        s.zero_grad();
        s
    }

    /// Copies parameter values from `other`, which must have the same layout.
    pub fn load_values(&mut self, other: &ParamStore) -> Result<(), AutodiffError> {
        if other.params.len() != self.params.len() {
            return Err(AutodiffError::CheckpointMismatch(format!(
                "expected {} parameters, found {}",
                self.params.len(),
                other.params.len()
            )));
        }
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if dst.name != src.name || dst.value.shape() != src.value.shape() {
                return Err(AutodiffError::CheckpointMismatch(format!(
                    "parameter {} {:?} does not match {} {:?}",
                    dst.name,
                    dst.value.shape(),
                    src.name,
                    src.value.shape()
                )));
            }
            let mut v = (*src.value).clone();
            v.zero_grad();
            v.set_requires_grad(dst.trainable);
            dst.value = Arc::new(v);
        }
        Ok(())
    }

    /// SHA-256 over names, shapes and little-endian values, hex encoded.
    pub fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for p in &self.params {
            h.update(p.name.as_bytes());
            for d in p.value.shape() {
                h.update((*d as u64).to_le_bytes());
            }
            for v in p.value.data() {
                h.update(v.to_le_bytes());
            }
        }
        hex::encode(h.finalize())
    }

    /// True when every value is bit-identical to `other`'s.
    pub fn bit_equal(&self, other: &ParamStore) -> bool {
        self.params.len() == other.params.len()
            && self.params.iter().zip(&other.params).all(|(a, b)| {
                a.name == b.name
                    && a.value.shape() == b.value.shape()
                    && a.value
                        .data()
                        .iter()
                        .zip(b.value.data())
                        .all(|(x, y)| x.to_bits() == y.to_bits())
            })
    }
}

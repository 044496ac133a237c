use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug)]
pub struct Param<T> {
    pub name: String,
    pub value: Arc<Tensor<T>>,
    pub trainable: bool,
}

/// Named parameters plus non-trainable state buffers (running statistics,
/// fixed projection matrices).
///
/// Values are reference counted so a graph can hold them without copying;
/// writes go through [`ParamStore::value_mut`] which copies on write if a
/// graph or snapshot still shares the tensor.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: BTreeMap<String, ParamId>,
    buffers: BTreeMap<String, Arc<Tensor<T>>>,
}

impl<T: Scalar> ParamStore<T> {
    pub fn new() -> Self {
        Self { params: Vec::new(), by_name: BTreeMap::new(), buffers: BTreeMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value: Arc::new(value), trainable: true });
        Ok(id)
    }

    pub fn add_buffer(&mut self, name: impl Into<String>, value: Tensor<T>) -> Result<()> {
        let name = name.into();
        if self.buffers.contains_key(&name) || self.by_name.contains_key(&name) {
            return Err(Error::DuplicateParam(name));
        }
        self.buffers.insert(name, Arc::new(value));
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name.get(name).copied().ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub(crate) fn value_arc(&self, id: ParamId) -> Arc<Tensor<T>> {
        self.params[id.0].value.clone()
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        Arc::make_mut(&mut self.params[id.0].value)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn buffer(&self, name: &str) -> Result<&Tensor<T>> {
        self.buffers.get(name).map(|b| b.as_ref()).ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffer_mut(&mut self, name: &str) -> Result<&mut Tensor<T>> {
        self.buffers
            .get_mut(name)
            .map(Arc::make_mut)
            .ok_or_else(|| Error::UnknownParam(name.to_string()))
    }

    pub fn buffers(&self) -> impl Iterator<Item = (&str, &Tensor<T>)> {
        self.buffers.iter().map(|(k, v)| (k.as_str(), v.as_ref()))
    }

    pub fn set_trainable(&mut self, id: ParamId, trainable: bool) {
        self.params[id.0].trainable = trainable;
    }

    pub fn set_all_trainable(&mut self, trainable: bool) {
        for p in &mut self.params {
            p.trainable = trainable;
        }
    }

    /// Sets the trainable flag of every parameter whose name starts with
    /// `prefix`; returns how many were touched.
    pub fn set_trainable_prefix(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut touched = 0;
        for p in self.params.iter_mut().filter(|p| p.name.starts_with(prefix)) {
            p.trainable = trainable;
            touched += 1;
        }
        touched
    }

    /// Total scalar count, optionally restricted to trainable parameters.
    pub fn num_scalars(&self, trainable_only: bool) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .map(|p| p.value.numel())
            .sum()
    }

    pub fn num_scalars_with_prefix(&self, prefix: &str) -> usize {
        self.params
            .iter()
            .filter(|p| p.name.starts_with(prefix))
            .map(|p| p.value.numel())
            .sum()
    }

    /// Replaces a parameter or buffer value by name, checking the shape.
    pub fn assign(&mut self, name: &str, value: Tensor<T>) -> Result<()> {
        let slot = if let Some(&id) = self.by_name.get(name) {
            &mut self.params[id.0].value
        } else if let Some(b) = self.buffers.get_mut(name) {
            b
        } else {
            return Err(Error::UnknownParam(name.to_string()));
        };
        if slot.shape() != value.shape() {
            return Err(Error::Shape(format!(
                "`{name}` expects shape {:?}, got {:?}",
                slot.shape(),
                value.shape()
            )));
        }
        *slot = Arc::new(value);
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn counts_respect_trainable_flags() {
        let mut store = ParamStore::<f32>::new();
        store.add("enc.w", Tensor::zeros(&[3, 4])).unwrap();
        store.add("enc.b", Tensor::zeros(&[4])).unwrap();
        store.add("dec.w", Tensor::zeros(&[2, 2])).unwrap();
        store.add_buffer("dec.running_mean", Tensor::zeros(&[2])).unwrap();
        assert_eq!(store.num_scalars(false), 20);
        assert_eq!(store.set_trainable_prefix("enc.", false), 2);
        assert_eq!(store.num_scalars(true), 4);
        store.set_all_trainable(false);
        assert_eq!(store.num_scalars(true), 0);
        assert!(store.add("enc.w", Tensor::zeros(&[1])).is_err());
    }

    #[test]
    fn snapshot_is_not_affected_by_later_writes() {
        let mut store = ParamStore::<f32>::new();
        let id = store.add("w", Tensor::full(&[2], 1.0)).unwrap();
        let snapshot = store.clone();
        store.value_mut(id).data_mut()[0] = 5.0;
        assert_eq!(snapshot.value(id).data(), &[1.0, 1.0]);
        assert_eq!(store.value(id).data(), &[5.0, 1.0]);
    }
}

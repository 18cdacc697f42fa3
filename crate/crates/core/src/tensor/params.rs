use std::sync::Arc;

use rand::Rng;
use rand_distr::{Distribution, Normal};

use super::Tensor;
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub usize);

#[derive(Debug, Clone)]
pub(crate) struct ParamEntry {
    pub name: String,
    pub shape: Vec<usize>,
    pub data: Arc<Vec<f64>>,
}

/// Named trainable tensors. Values are reference counted so graphs can
/// read them without copying.
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    entries: Vec<ParamEntry>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, tensor: Tensor) -> ParamId {
        let shape = tensor.shape().to_vec();
        self.entries.push(ParamEntry {
            name: name.into(),
            shape,
            data: Arc::new(tensor.into_data()),
        });
        ParamId(self.entries.len() - 1)
    }

    /// Gaussian init with standard deviation `std`.
    pub fn add_normal<R: Rng>(
        &mut self,
        name: impl Into<String>,
        shape: Vec<usize>,
        std: f64,
        rng: &mut R,
    ) -> ParamId {
        let n = shape.iter().product();
        let normal = Normal::new(0.0, std).expect("std must be finite and non-negative");
        let data = (0..n).map(|_| normal.sample(rng)).collect();
        self.add(name, Tensor::new(shape, data).expect("sized above"))
    }

    pub fn add_const(&mut self, name: impl Into<String>, shape: Vec<usize>, value: f64) -> ParamId {
        let n = shape.iter().product();
        self.add(name, Tensor::new(shape, vec![value; n]).expect("sized above"))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.entries.len()).map(ParamId)
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.entries[id.0].name
    }

    pub fn shape(&self, id: ParamId) -> &[usize] {
        &self.entries[id.0].shape
    }

    pub fn data(&self, id: ParamId) -> &[f64] {
        &self.entries[id.0].data
    }

    pub(crate) fn shared(&self, id: ParamId) -> Arc<Vec<f64>> {
        Arc::clone(&self.entries[id.0].data)
    }

    pub fn data_mut(&mut self, id: ParamId) -> &mut [f64] {
        Arc::make_mut(&mut self.entries[id.0].data).as_mut_slice()
    }

    pub fn tensor(&self, id: ParamId) -> Tensor {
        let e = &self.entries[id.0];
        Tensor::new(e.shape.clone(), e.data.as_ref().clone()).expect("entry is consistent")
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.entries.iter().position(|e| e.name == name).map(ParamId)
    }

    pub fn num_values(&self) -> usize {
        self.entries.iter().map(|e| e.data.len()).sum()
    }

    /// Named tensors in insertion order, for checkpointing.
    pub fn named_tensors(&self) -> Vec<(String, Tensor)> {
        self.ids()
            .map(|id| (self.name(id).to_string(), self.tensor(id)))
            .collect()
    }

    /// Overwrite values from named tensors. Every parameter must be present
    /// with a matching shape.
    pub fn load_named(&mut self, named: &[(String, Tensor)]) -> Result<()> {
        for id in self.ids().collect::<Vec<_>>() {
            let name = self.name(id).to_string();
            let (_, t) = named
                .iter()
                .find(|(n, _)| *n == name)
                .ok_or_else(|| Error::Contract(format!("checkpoint is missing tensor {name}")))?;
            if t.shape() != self.shape(id) {
                return Err(Error::shape("load_named", self.shape(id), t.shape()));
            }
            self.data_mut(id).copy_from_slice(t.data());
        }
        Ok(())
    }
}

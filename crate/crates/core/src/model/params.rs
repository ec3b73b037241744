use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::tensor::{DenseArray, Tape, Var};

/// Named parameter arrays in a fixed insertion order. Frozen entries take
/// part in the forward pass but are skipped by the optimizer.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    values: Vec<DenseArray>,
    trainable: Vec<bool>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    /// Adds a parameter and returns its slot.
    pub fn insert(&mut self, name: impl Into<String>, value: DenseArray, trainable: bool) -> usize {
        let name = name.into();
        assert!(
            !self.index.contains_key(&name),
            "duplicate parameter `{name}`"
        );
        let id = self.values.len();
        self.index.insert(name.clone(), id);
        self.names.push(name);
        self.values.push(value);
        self.trainable.push(trainable);
        id
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn id(&self, name: &str) -> Result<usize> {
        self.index
            .get(name)
            .copied()
            .ok_or_else(|| Error::config(format!("no parameter named `{name}`")))
    }

    pub fn name(&self, id: usize) -> &str {
        &self.names[id]
    }

    pub fn names(&self) -> &[String] {
        &self.names
    }

    pub fn get(&self, id: usize) -> &DenseArray {
        &self.values[id]
    }

    pub fn get_mut(&mut self, id: usize) -> &mut DenseArray {
        &mut self.values[id]
    }

    pub fn by_name(&self, name: &str) -> Result<&DenseArray> {
        Ok(&self.values[self.id(name)?])
    }

    pub fn by_name_mut(&mut self, name: &str) -> Result<&mut DenseArray> {
        let id = self.id(name)?;
        Ok(&mut self.values[id])
    }

    pub fn is_trainable(&self, id: usize) -> bool {
        self.trainable[id]
    }

    /// Total number of trainable scalars.
    pub fn trainable_count(&self) -> usize {
        self.values
            .iter()
            .zip(&self.trainable)
            .filter(|(_, &t)| t)
            .map(|(v, _)| v.len())
            .sum()
    }

    /// Records every parameter as a leaf on `tape`, in slot order.
    pub fn leaves<'t>(&self, tape: &'t Tape) -> Vec<Var<'t>> {
        self.values.iter().map(|v| tape.leaf(v.clone())).collect()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &DenseArray)> {
        self.names.iter().map(String::as_str).zip(&self.values)
    }
}

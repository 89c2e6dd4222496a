use std::collections::HashMap;

use crate::autograd::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// A named, optionally trainable tensor.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    name: String,
    tensor: Tensor,
    trainable: bool,
    frozen_rows: Vec<usize>,
}

impl Parameter {
    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn tensor(&self) -> &Tensor {
        &self.tensor
    }

    pub fn tensor_mut(&mut self) -> &mut Tensor {
        &mut self.tensor
    }

    pub fn trainable(&self) -> bool {
        self.trainable
    }

    /// Leading-axis rows the optimizer never touches.
    pub fn frozen_rows(&self) -> &[usize] {
        &self.frozen_rows
    }
}

/// Ordered parameter collection with unique, non-empty names.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamStore {
    params: Vec<Parameter>,
    index: HashMap<String, usize>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<()> {
        self.insert_with(name, tensor, true, Vec::new())
    }

    pub fn insert_with(
        &mut self,
        name: impl Into<String>,
        tensor: Tensor,
        trainable: bool,
        frozen_rows: Vec<usize>,
    ) -> Result<()> {
        let name = name.into();
        if name.is_empty() {
            return Err(Error::Config("parameter name must be non-empty".into()));
        }
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        self.index.insert(name.clone(), self.params.len());
        self.params.push(Parameter {
            name,
            tensor,
            trainable,
            frozen_rows,
        });
        Ok(())
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn position(&self, name: &str) -> Option<usize> {
        self.index.get(name).copied()
    }

    pub fn get(&self, name: &str) -> Option<&Parameter> {
        self.position(name).map(|i| &self.params[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Parameter> {
        self.position(name).map(move |i| &mut self.params[i])
    }

    pub fn by_index(&self, i: usize) -> &Parameter {
        &self.params[i]
    }

    pub fn set_trainable(&mut self, name: &str, trainable: bool) -> Result<()> {
        let p = self
            .get_mut(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter `{name}`")))?;
        p.trainable = trainable;
        Ok(())
    }

    /// Total number of scalar values.
    pub fn numel(&self) -> usize {
        self.params.iter().map(|p| p.tensor.numel()).sum()
    }

    /// Records every parameter on `tape`. Trainable parameters require grad
    /// when `with_grad` is set.
    pub fn bind(&self, tape: &mut Tape, with_grad: bool) -> BoundParams {
        let vars = self
            .params
            .iter()
            .map(|p| tape.leaf(p.tensor.clone(), with_grad && p.trainable))
            .collect();
        BoundParams {
            vars,
            index: self.index.clone(),
        }
    }
}

impl ParamStore {
    /// Addresses already-recorded vars by this store's names; `vars` must
    /// follow the store order.
    pub fn bind_vars(&self, vars: Vec<Var>) -> Result<BoundParams> {
        if vars.len() != self.params.len() {
            return Err(Error::Config(format!("{} vars for {} parameters", vars.len(), self.params.len())));
        }
        Ok(BoundParams {
            vars,
            index: self.index.clone(),
        })
    }
}

/// Parameters recorded on a tape, addressable by name.
#[derive(Debug, Clone)]
pub struct BoundParams {
    vars: Vec<Var>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    /// Panics on an unknown name; names come from the model's own layout.
    pub fn var(&self, name: &str) -> Var {
        match self.index.get(name) {
            Some(&i) => self.vars[i],
            None => panic!("unbound parameter `{name}`"),
        }
    }

    pub fn vars(&self) -> &[Var] {
        &self.vars
    }

    /// Gradients aligned with the store order, after `tape.backward`.
    pub fn grads(&self, tape: &Tape) -> Vec<Option<Tensor>> {
        self.vars.iter().map(|&v| tape.grad(v).cloned()).collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn names_unique_and_non_empty() {
        let mut s = ParamStore::new();
        s.insert("a", Tensor::zeros(vec![2])).unwrap();
        assert!(matches!(s.insert("a", Tensor::zeros(vec![1])), Err(Error::Config(_))));
        assert!(s.insert("", Tensor::zeros(vec![1])).is_err());
        assert_eq!(s.len(), 1);
        assert_eq!(s.numel(), 2);
    }
}

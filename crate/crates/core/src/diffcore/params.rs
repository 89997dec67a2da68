//! Named flat parameter arrays with shape metadata.

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::diffcore::tape::{NodeId, Tape};
use crate::diffcore::tensor::Tensor;
use crate::error::{Error, Result};

/// Ordered collection of named parameter tensors. Shapes are fixed at
/// insertion; values must stay finite.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamSet {
    entries: Vec<(String, Tensor)>,
    index: HashMap<String, usize>,
}

/// Shape snapshot, used by checkpoints and for structural equality.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamShape {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) -> Result<()> {
        let name = name.into();
        if self.index.contains_key(&name) {
            return Err(Error::Config(format!("duplicate parameter `{name}`")));
        }
        if !t.is_finite() {
            return Err(Error::numeric(name.clone(), "non-finite parameter value"));
        }
        self.index.insert(name.clone(), self.entries.len());
        self.entries.push((name, t));
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.index.get(name).map(|&i| &self.entries[i].1)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        let i = *self.index.get(name)?;
        Some(&mut self.entries[i].1)
    }

    pub fn expect(&self, name: &str) -> Result<&Tensor> {
        self.get(name)
            .ok_or_else(|| Error::Config(format!("missing parameter `{name}`")))
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.entries.iter().map(|(n, t)| (n.as_str(), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Tensor)> {
        self.entries.iter_mut().map(|(n, t)| (n.as_str(), t))
    }

    /// Total number of scalar parameters.
    pub fn total_params(&self) -> usize {
        self.entries.iter().map(|(_, t)| t.len()).sum()
    }

    pub fn shapes(&self) -> Vec<ParamShape> {
        self.entries
            .iter()
            .map(|(n, t)| ParamShape {
                name: n.clone(),
                rows: t.rows(),
                cols: t.cols(),
            })
            .collect()
    }

    pub fn same_shapes(&self, other: &ParamSet) -> bool {
        self.shapes() == other.shapes()
    }

    pub fn is_finite(&self) -> bool {
        self.entries.iter().all(|(_, t)| t.is_finite())
    }

    /// Zero-filled copy with the same names and shapes.
    pub fn zeros_like(&self) -> ParamSet {
        let mut out = ParamSet::new();
        for (n, t) in &self.entries {
            out.insert(n.clone(), Tensor::zeros(t.rows(), t.cols()))
                .unwrap();
        }
        out
    }

    /// Registers every parameter as a tape leaf, preserving order.
    pub fn bind(&self, tape: &mut Tape) -> BoundParams {
        let mut ids = Vec::with_capacity(self.entries.len());
        let mut index = HashMap::new();
        for (n, t) in &self.entries {
            index.insert(n.clone(), ids.len());
            ids.push(tape.leaf(t.clone()));
        }
        BoundParams { ids, index }
    }
}

/// Tape leaf ids for one `ParamSet::bind` call.
pub struct BoundParams {
    ids: Vec<NodeId>,
    index: HashMap<String, usize>,
}

impl BoundParams {
    pub fn id(&self, name: &str) -> NodeId {
        self.ids[*self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unbound parameter `{name}`"))]
    }

    /// Densified gradients in the source ParamSet's order and names.
    /// Parameters off the compute path come back as exact zeros.
    pub fn grads_to_params(
        &self,
        tape: &Tape,
        grads: &crate::diffcore::tape::Grads,
        like: &ParamSet,
    ) -> ParamSet {
        let mut out = ParamSet::new();
        for (name, _) in like.iter() {
            let id = self.id(name);
            out.insert(name.to_string(), grads.dense(tape, id)).unwrap();
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn insert_rejects_duplicates_and_non_finite() {
        let mut p = ParamSet::new();
        p.insert("w", Tensor::zeros(2, 2)).unwrap();
        assert!(p.insert("w", Tensor::zeros(1, 1)).is_err());
        assert!(p
            .insert("bad", Tensor::from_vec(1, 1, vec![f64::NAN]))
            .is_err());
        assert_eq!(p.total_params(), 4);
    }

    #[test]
    fn off_path_gradients_densify_to_zero() {
        let mut p = ParamSet::new();
        p.insert("used", Tensor::scalar(2.0)).unwrap();
        p.insert("unused", Tensor::zeros(2, 3)).unwrap();
        let mut tape = Tape::new();
        let bound = p.bind(&mut tape);
        let loss = tape.square(bound.id("used"));
        let g = tape.backward(loss).unwrap();
        let gp = bound.grads_to_params(&tape, &g, &p);
        assert_eq!(gp.get("used").unwrap().item(), 4.0);
        assert!(gp.get("unused").unwrap().data().iter().all(|&v| v == 0.0));
    }
}

use serde::{Deserialize, Serialize};

use super::tape::{GradTape, Gradients, NodeId};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// One named parameter array. Vectors are stored as `rows x 1`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Param {
    pub name: String,
    pub rows: usize,
    pub cols: usize,
    pub data: Vec<f64>,
}

impl Param {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Flat, ordered collection of every learnable array in a model.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamStore {
    params: Vec<Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, rows: usize, cols: usize, data: Vec<f64>) -> ParamId {
        assert_eq!(data.len(), rows * cols, "parameter data does not match its shape");
        self.params.push(Param {
            name: name.into(),
            rows,
            cols,
            data,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Param> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    /// Total number of scalar parameters.
    pub fn element_count(&self) -> usize {
        self.params.iter().map(Param::len).sum()
    }

    pub fn zeros_like(&self) -> GradMap {
        GradMap {
            names: self.params.iter().map(|p| p.name.clone()).collect(),
            values: self.params.iter().map(|p| vec![0.0; p.len()]).collect(),
        }
    }
}

/// Gradient arrays aligned index-for-index with a [`ParamStore`].
#[derive(Clone, Debug, PartialEq)]
pub struct GradMap {
    pub names: Vec<String>,
    pub values: Vec<Vec<f64>>,
}

impl GradMap {
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.values[id.0]
    }

    pub fn global_norm(&self) -> f64 {
        self.values
            .iter()
            .flat_map(|g| g.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }
}

/// Maps parameters onto tape leaves, creating each leaf at most once per tape
/// so that repeated use accumulates through the graph.
#[derive(Clone, Debug)]
pub struct ParamBinding {
    nodes: Vec<Option<NodeId>>,
}

impl ParamBinding {
    pub fn new(store: &ParamStore) -> Self {
        ParamBinding {
            nodes: vec![None; store.len()],
        }
    }

    pub fn node(&mut self, tape: &mut GradTape, store: &ParamStore, id: ParamId) -> NodeId {
        *self.nodes[id.0].get_or_insert_with(|| tape.leaf(store.get(id).data.clone()))
    }

    /// Collects parameter gradients; parameters never bound get zeros.
    pub fn collect(&self, grads: &Gradients, store: &ParamStore) -> GradMap {
        let mut out = store.zeros_like();
        for (slot, node) in out.values.iter_mut().zip(&self.nodes) {
            if let Some(node) = node {
                slot.copy_from_slice(grads.get(*node));
            }
        }
        out
    }
}

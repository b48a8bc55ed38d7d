//! Minimal dense-tensor engine with reverse-mode automatic differentiation.
//!
//! Tensors are immutable nodes in a DAG. `backward` walks the tape in reverse
//! topological order and returns gradients in a [`GradStore`] keyed by node id,
//! so graphs can be evaluated concurrently on independent shapes while sharing
//! the same (immutable) parameter leaves.

mod checkpoint;
mod gradcheck;
mod ops;
mod optim;

pub use checkpoint::{load_checkpoint, save_checkpoint, CHECKPOINT_MAGIC, CHECKPOINT_VERSION};
pub use gradcheck::{finite_difference_check, GradCheckReport};
pub use optim::{AdamW, AdamWConfig};

use crate::error::{Error, Result};
use std::collections::{BTreeMap, HashMap};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;

static NEXT_ID: AtomicU64 = AtomicU64::new(1);

pub(crate) type BackFn = Box<dyn Fn(&[f64], &mut GradStore) + Send + Sync>;

pub(crate) struct Node {
    pub id: u64,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
    pub requires_grad: bool,
    pub parents: Vec<Tensor>,
    pub backward: Option<BackFn>,
}

/// A dense n-dimensional tensor participating in a reverse-mode tape.
#[derive(Clone)]
pub struct Tensor(pub(crate) Arc<Node>);

impl std::fmt::Debug for Tensor {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Tensor")
            .field("id", &self.0.id)
            .field("shape", &self.0.shape)
            .field("requires_grad", &self.0.requires_grad)
            .finish()
    }
}

pub(crate) fn numel(shape: &[usize]) -> usize {
    shape.iter().product()
}

impl Tensor {
    pub(crate) fn new_node(
        shape: Vec<usize>,
        data: Vec<f64>,
        requires_grad: bool,
        parents: Vec<Tensor>,
        backward: Option<BackFn>,
    ) -> Tensor {
        debug_assert_eq!(numel(&shape), data.len());
        Tensor(Arc::new(Node {
            id: NEXT_ID.fetch_add(1, Ordering::Relaxed),
            shape,
            data,
            requires_grad,
            parents,
            backward,
        }))
    }

    /// Constant leaf (no gradient).
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "from_vec",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, false, vec![], None))
    }

    /// Differentiable leaf.
    pub fn leaf(shape: &[usize], data: Vec<f64>) -> Result<Tensor> {
        if numel(shape) != data.len() {
            return Err(Error::ShapeMismatch {
                op: "leaf",
                lhs: shape.to_vec(),
                rhs: vec![data.len()],
            });
        }
        Ok(Tensor::new_node(shape.to_vec(), data, true, vec![], None))
    }

    pub fn scalar(v: f64) -> Tensor {
        Tensor::new_node(vec![], vec![v], false, vec![], None)
    }

    pub fn zeros(shape: &[usize]) -> Tensor {
        Tensor::new_node(shape.to_vec(), vec![0.0; numel(shape)], false, vec![], None)
    }

    pub fn id(&self) -> u64 {
        self.0.id
    }

    pub fn shape(&self) -> &[usize] {
        &self.0.shape
    }

    pub fn numel(&self) -> usize {
        self.0.data.len()
    }

    pub fn requires_grad(&self) -> bool {
        self.0.requires_grad
    }

    pub fn data(&self) -> &[f64] {
        &self.0.data
    }

    pub fn to_vec(&self) -> Vec<f64> {
        self.0.data.clone()
    }

    /// Value of a scalar (single-element) tensor.
    pub fn item(&self) -> f64 {
        debug_assert_eq!(self.numel(), 1);
        self.0.data[0]
    }

    /// Reverse-mode differentiation from a scalar loss. Gradients are
    /// accumulated into `store`; repeated calls without reset accumulate.
    pub fn backward_into(&self, store: &mut GradStore) -> Result<()> {
        if self.numel() != 1 {
            return Err(Error::invalid(format!(
                "backward: loss must be scalar, got shape {:?}",
                self.shape()
            )));
        }
        if !self.0.requires_grad {
            return Ok(());
        }
        // iterative post-order DFS over parents
        let mut order: Vec<Tensor> = Vec::new();
        let mut visited: HashMap<u64, ()> = HashMap::new();
        let mut stack: Vec<(Tensor, usize)> = vec![(self.clone(), 0)];
        visited.insert(self.0.id, ());
        while let Some((node, child)) = stack.pop() {
            if child < node.0.parents.len() {
                let next = node.0.parents[child].clone();
                stack.push((node, child + 1));
                if next.0.requires_grad && !visited.contains_key(&next.0.id) {
                    visited.insert(next.0.id, ());
                    stack.push((next, 0));
                }
            } else {
                order.push(node);
            }
        }
        // seed
        store.accumulate(self.0.id, &[1.0]);
        for node in order.iter().rev() {
            if let Some(back) = &node.0.backward {
                if let Some(g) = store.take_nonleaf(node.0.id) {
                    back(&g, store);
                }
            }
        }
        Ok(())
    }

    /// Convenience wrapper returning a fresh gradient store.
    pub fn backward(&self) -> Result<GradStore> {
        let mut store = GradStore::new();
        self.backward_into(&mut store)?;
        Ok(store)
    }
}

/// Gradients keyed by tensor id.
#[derive(Debug, Default)]
pub struct GradStore {
    grads: HashMap<u64, Vec<f64>>,
}

impl GradStore {
    pub fn new() -> Self {
        GradStore::default()
    }

    pub fn accumulate(&mut self, id: u64, contribution: &[f64]) {
        match self.grads.get_mut(&id) {
            Some(g) => {
                for (a, b) in g.iter_mut().zip(contribution) {
                    *a += b;
                }
            }
            None => {
                self.grads.insert(id, contribution.to_vec());
            }
        }
    }

    pub fn get(&self, t: &Tensor) -> Option<&[f64]> {
        self.grads.get(&t.0.id).map(|v| v.as_slice())
    }

    /// Remove an intermediate node's gradient once consumed (leaf gradients
    /// stay so callers can read them after backward).
    fn take_nonleaf(&mut self, id: u64) -> Option<Vec<f64>> {
        self.grads.remove(&id)
    }

    /// Merge another store into this one (ordered, deterministic summation
    /// left to the caller's call order).
    pub fn merge(&mut self, other: &GradStore) {
        let mut ids: Vec<&u64> = other.grads.keys().collect();
        ids.sort_unstable();
        for id in ids {
            self.accumulate(*id, &other.grads[id]);
        }
    }
}

/// A named differentiable leaf.
#[derive(Clone, Debug)]
pub struct Parameter {
    pub name: String,
    pub tensor: Tensor,
}

/// Flat, ordered store of parameter values; the master copy a model is
/// instantiated from and the unit the optimizer updates.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct ParamValues {
    pub entries: BTreeMap<String, (Vec<usize>, Vec<f64>)>,
}

impl ParamValues {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, shape: Vec<usize>, data: Vec<f64>) {
        assert_eq!(numel(&shape), data.len(), "param {name}");
        assert!(
            self.entries.insert(name.to_string(), (shape, data)).is_none(),
            "duplicate parameter name {name}"
        );
    }

    pub fn get(&self, name: &str) -> Option<&(Vec<usize>, Vec<f64>)> {
        self.entries.get(name)
    }

    pub fn num_params(&self) -> usize {
        self.entries.values().map(|(_, d)| d.len()).sum()
    }

    /// Instantiate differentiable leaves for every entry.
    pub fn to_leaves(&self) -> Vec<Parameter> {
        self.entries
            .iter()
            .map(|(name, (shape, data))| Parameter {
                name: name.clone(),
                tensor: Tensor::leaf(shape, data.clone()).expect("consistent shapes"),
            })
            .collect()
    }
}

//! Named parameter collections and their binding into a graph.

use std::collections::BTreeMap;

use crate::checkpoint::Checkpoint;
use crate::error::{Error, Result};
use crate::graph::{Gradients, GraphOf, Var};
use crate::real::Real;
use crate::tensor::{Array, Tensor};

/// Ordered name → tensor map. Iteration order is lexicographic, which keeps
/// optimizer updates and checkpoints deterministic.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    entries: BTreeMap<String, Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, t: Tensor) {
        self.entries.insert(name.into(), t);
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.entries.get(name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Tensor> {
        self.entries.get_mut(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.entries.iter()
    }

    pub fn names(&self) -> impl Iterator<Item = &String> {
        self.entries.keys()
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn numel(&self) -> usize {
        self.entries.values().map(Tensor::numel).sum()
    }

    pub fn checksum(&self) -> u64 {
        self.to_checkpoint("").checksum()
    }

    /// Copies every parameter into `g`. Trainable bindings report gradients.
    pub fn bind<R: Real>(&self, g: &mut GraphOf<R>, trainable: bool) -> Bound {
        let vars = self
            .entries
            .iter()
            .map(|(name, t)| {
                let v = if trainable {
                    g.leaf(t.clone())
                } else {
                    g.constant(t.clone())
                };
                (name.clone(), v)
            })
            .collect();
        Bound { vars }
    }

    /// Entries under `prefix` (a trailing `.` is added when absent).
    pub fn to_checkpoint(&self, prefix: &str) -> Checkpoint {
        let mut c = Checkpoint::new();
        for (k, v) in &self.entries {
            c.insert(join(prefix, k), v.clone());
        }
        c
    }

    /// Replaces every entry of `self` with the matching checkpoint entry,
    /// requiring identical names and shapes.
    pub fn load_from(&mut self, ckpt: &Checkpoint, prefix: &str) -> Result<()> {
        for (k, v) in self.entries.iter_mut() {
            let full = join(prefix, k);
            let src = ckpt.get(&full)?;
            if src.shape() != v.shape() {
                return Err(Error::Integrity(format!(
                    "{full}: checkpoint shape {:?} but model expects {:?}",
                    src.shape(),
                    v.shape()
                )));
            }
            *v = src.clone();
        }
        Ok(())
    }
}

fn join(prefix: &str, name: &str) -> String {
    if prefix.is_empty() {
        name.to_string()
    } else if prefix.ends_with('.') {
        format!("{prefix}{name}")
    } else {
        format!("{prefix}.{name}")
    }
}

/// Graph handles for a bound [`ParamStore`].
#[derive(Clone, Debug)]
pub struct Bound {
    vars: BTreeMap<String, Var>,
}

impl Bound {
    /// Handle for `name`. Models only ask for names they registered, so a
    /// miss is a bug.
    pub fn var(&self, name: &str) -> Var {
        *self
            .vars
            .get(name)
            .unwrap_or_else(|| panic!("parameter {name:?} is not bound"))
    }

    /// Gradients keyed by parameter name; parameters with no gradient path get zeros.
    pub fn collect<R: Real>(&self, g: &GraphOf<R>, grads: &mut Gradients<R>) -> BTreeMap<String, Array<R>> {
        self.vars
            .iter()
            .map(|(name, &v)| {
                let t = grads.take(v).unwrap_or_else(|| Array::zeros(g.shape(v)));
                (name.clone(), t)
            })
            .collect()
    }
}

//! Named parameter storage shared by the encoder, heads and exit modules.
//!
//! Names follow a fixed scheme so checkpoints stay readable:
//!
//! ```text
//! embeddings.{token|position|segment}.weight
//! embeddings.norm.{weight|bias}
//! layer.{i}.attention.{query|key|value|output}.{weight|bias}
//! layer.{i}.attention_norm.{weight|bias}
//! layer.{i}.ffn.{up|down}.{weight|bias}
//! layer.{i}.output_norm.{weight|bias}
//! head.{task}.{i}.{weight|bias}
//! lte.{task}.{weight|bias}
//! ```
//!
//! Layer indices are zero-based. Linear weights are stored `[in, out]`.

use std::collections::BTreeMap;
use std::sync::Arc;

use crate::error::{Error, Result};
use crate::task::TaskKind;
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Which part of the model a parameter belongs to.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum ParamGroup {
    Embeddings,
    /// Transformer layer, zero-based.
    Layer(usize),
    /// Classifier for `task` attached to layer `layer` (zero-based).
    Head {
        task: TaskKind,
        layer: usize,
    },
    Lte(TaskKind),
}

impl ParamGroup {
    pub fn is_backbone(self) -> bool {
        matches!(self, ParamGroup::Embeddings | ParamGroup::Layer(_))
    }
}

#[derive(Clone, Debug)]
pub struct Param {
    pub name: String,
    pub group: ParamGroup,
    pub(crate) value: Arc<Tensor>,
    pub grad: Vec<f64>,
}

impl Param {
    pub fn value(&self) -> &Tensor {
        &self.value
    }

    pub fn value_mut(&mut self) -> &mut Tensor {
        Arc::make_mut(&mut self.value)
    }

    pub fn shared_value(&self) -> Arc<Tensor> {
        Arc::clone(&self.value)
    }
}

#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: Vec<Param>,
    by_name: BTreeMap<String, ParamId>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor) -> ParamId {
        let name = name.into();
        assert!(!self.by_name.contains_key(&name), "duplicate parameter name {name}");
        let id = ParamId(self.params.len());
        let grad = vec![0.0; value.numel()];
        self.by_name.insert(name.clone(), id);
        self.params.push(Param {
            name,
            group,
            value: Arc::new(value),
            grad,
        });
        id
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Param {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Param {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).copied()
    }

    pub fn by_name(&self, name: &str) -> Option<&Param> {
        self.id(name).map(|id| self.get(id))
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn grad_norm(&self) -> f64 {
        self.params
            .iter()
            .flat_map(|p| p.grad.iter())
            .map(|g| g * g)
            .sum::<f64>()
            .sqrt()
    }

    /// Rescale all gradients so the global L2 norm is at most `max_norm`.
    pub fn clip_grad_norm(&mut self, max_norm: f64) -> f64 {
        let norm = self.grad_norm();
        if norm > max_norm && norm > 0.0 {
            let s = max_norm / norm;
            for p in &mut self.params {
                p.grad.iter_mut().for_each(|g| *g *= s);
            }
        }
        norm
    }

    /// Replace the value of a named parameter, checking its shape.
    pub fn assign(&mut self, name: &str, value: Tensor) -> Result<()> {
        let id = self
            .id(name)
            .ok_or_else(|| Error::Data(format!("unknown parameter {name}")))?;
        let p = &mut self.params[id.0];
        if p.value.shape() != value.shape() {
            return Err(Error::shape("assign", p.value.shape(), value.shape()));
        }
        p.value = Arc::new(value);
        Ok(())
    }

    /// Flat snapshot of every parameter value, in store order.
    pub fn snapshot(&self) -> Vec<Arc<Tensor>> {
        self.params.iter().map(|p| Arc::clone(&p.value)).collect()
    }

    pub fn restore(&mut self, snapshot: &[Arc<Tensor>]) {
        assert_eq!(snapshot.len(), self.params.len());
        for (p, v) in self.params.iter_mut().zip(snapshot) {
            p.value = Arc::clone(v);
        }
    }
}

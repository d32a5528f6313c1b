use super::graph::{Gradients, Graph, NodeId};
use super::matrix::Matrix2D;
use crate::error::{LemofError, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ParamId(usize);

#[derive(Clone, Debug, PartialEq)]
pub struct ParamSlot {
    pub name: String,
    pub value: Matrix2D,
    pub grad: Matrix2D,
}

/// Named parameters, each paired with a gradient slot of the same shape.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamTape {
    slots: Vec<ParamSlot>,
}

/// Graph leaves holding a tape's parameters, in slot order.
#[derive(Clone, Debug)]
pub struct BoundParams(Vec<NodeId>);

impl BoundParams {
    #[inline]
    pub fn node(&self, id: ParamId) -> NodeId {
        self.0[id.0]
    }
}

impl ParamTape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, value: Matrix2D) -> Result<ParamId> {
        let name = name.into();
        if self.slots.iter().any(|s| s.name == name) {
            return Err(LemofError::Config(format!(
                "duplicate parameter name {name:?}"
            )));
        }
        let grad = Matrix2D::zeros(value.rows(), value.cols());
        self.slots.push(ParamSlot { name, value, grad });
        Ok(ParamId(self.slots.len() - 1))
    }

    pub fn len(&self) -> usize {
        self.slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.slots.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn scalar_count(&self) -> usize {
        self.slots.iter().map(|s| s.value.len()).sum()
    }

    pub fn slots(&self) -> &[ParamSlot] {
        &self.slots
    }

    pub fn slots_mut(&mut self) -> &mut [ParamSlot] {
        &mut self.slots
    }

    #[inline]
    pub fn value(&self, id: ParamId) -> &Matrix2D {
        &self.slots[id.0].value
    }

    #[inline]
    pub fn value_mut(&mut self, id: ParamId) -> &mut Matrix2D {
        &mut self.slots[id.0].value
    }

    #[inline]
    pub fn grad(&self, id: ParamId) -> &Matrix2D {
        &self.slots[id.0].grad
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.slots.iter().position(|s| s.name == name).map(ParamId)
    }

    pub fn get(&self, name: &str) -> Option<&Matrix2D> {
        self.id_of(name).map(|id| self.value(id))
    }

    pub fn zero_grads(&mut self) {
        for s in &mut self.slots {
            s.grad.data_mut().iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub fn bind(&self, graph: &mut Graph) -> BoundParams {
        BoundParams(
            self.slots
                .iter()
                .map(|s| graph.leaf(s.value.clone()))
                .collect(),
        )
    }

    /// Adds the gradients of `bound` leaves into the gradient slots.
    pub fn accumulate(&mut self, bound: &BoundParams, grads: &Gradients) {
        for (slot, &node) in self.slots.iter_mut().zip(&bound.0) {
            if let Some(g) = grads.get(node) {
                slot.grad
                    .add_assign(g)
                    .expect("leaf gradient has parameter shape");
            }
        }
    }

    /// Plain gradient descent step `θ ← θ − lr·∇θ`.
    pub fn sgd_step(&mut self, lr: f64) {
        for s in &mut self.slots {
            for (v, g) in s.value.data_mut().iter_mut().zip(s.grad.data()) {
                *v -= lr * g;
            }
        }
    }

    /// Adds `l2·θ` to every gradient slot.
    pub fn add_weight_decay(&mut self, l2: f64) {
        if l2 == 0.0 {
            return;
        }
        for s in &mut self.slots {
            for (g, v) in s.grad.data_mut().iter_mut().zip(s.value.data()) {
                *g += l2 * v;
            }
        }
    }

    pub fn all_finite(&self) -> bool {
        self.slots.iter().all(|s| s.value.is_finite())
    }

    /// Copies all slots of `other` into `self` with `prefix` prepended to their names.
    pub fn extend_prefixed(&mut self, prefix: &str, other: &ParamTape) -> Result<()> {
        for s in &other.slots {
            self.push(format!("{prefix}{}", s.name), s.value.clone())?;
            let last = self.slots.len() - 1;
            self.slots[last].grad = s.grad.clone();
        }
        Ok(())
    }

    /// Overwrites values (and gradients) of `self` from the slots of `source`
    /// named `prefix + name`. Every slot of `self` must be present.
    pub fn load_prefixed(&mut self, prefix: &str, source: &ParamTape) -> Result<()> {
        for s in &mut self.slots {
            let full = format!("{prefix}{}", s.name);
            let src = source
                .id_of(&full)
                .map(|id| &source.slots[id.0])
                .ok_or_else(|| LemofError::Format(format!("missing parameter {full:?}")))?;
            if src.value.shape() != s.value.shape() {
                return Err(LemofError::dim(
                    "load_prefixed",
                    s.value.shape(),
                    src.value.shape(),
                ));
            }
            s.value = src.value.clone();
            s.grad = src.grad.clone();
        }
        Ok(())
    }

    /// Adds the gradients of `source` into the slots of `self` named
    /// `prefix + name`. The inverse direction of [`Self::load_prefixed`].
    pub fn accumulate_prefixed(&mut self, prefix: &str, source: &ParamTape) -> Result<()> {
        for s in &source.slots {
            let full = format!("{prefix}{}", s.name);
            let id = self
                .id_of(&full)
                .ok_or_else(|| LemofError::Format(format!("missing parameter {full:?}")))?;
            self.slots[id.0].grad.add_assign(&s.grad)?;
        }
        Ok(())
    }
}

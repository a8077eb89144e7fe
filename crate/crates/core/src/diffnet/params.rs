use indexmap::IndexMap;

use super::{NetError, Tensor};

/// The agent a parameter set belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Owner {
    Encoder,
    Feedbacker,
    Processor,
}

impl Owner {
    pub const ALL: [Owner; 3] = [Owner::Encoder, Owner::Feedbacker, Owner::Processor];

    pub(crate) fn bit(self) -> u8 {
        match self {
            Owner::Encoder => 0b001,
            Owner::Feedbacker => 0b010,
            Owner::Processor => 0b100,
        }
    }

    pub fn name(self) -> &'static str {
        match self {
            Owner::Encoder => "encoder",
            Owner::Feedbacker => "feedbacker",
            Owner::Processor => "processor",
        }
    }

    pub fn from_name(name: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|o| o.name() == name)
    }
}

/// Named tensors owned by one agent.
///
/// Iteration and the flattened view follow insertion order: tensor by
/// tensor, each tensor in its own row-major order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet {
    owner: Owner,
    tensors: IndexMap<String, Tensor>,
}

impl ParamSet {
    pub fn new(owner: Owner) -> Self {
        Self {
            owner,
            tensors: IndexMap::new(),
        }
    }

    pub fn owner(&self) -> Owner {
        self.owner
    }

    pub fn insert(&mut self, name: impl Into<String>, tensor: Tensor) -> Result<usize, NetError> {
        let name = name.into();
        if self.tensors.contains_key(&name) {
            return Err(NetError::DuplicateName(name));
        }
        let (index, _) = self.tensors.insert_full(name, tensor);
        Ok(index)
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.tensors.get(name)
    }

    pub fn index_of(&self, name: &str) -> Option<usize> {
        self.tensors.get_index_of(name)
    }

    pub fn tensor(&self, index: usize) -> &Tensor {
        &self.tensors[index]
    }

    pub fn tensor_mut(&mut self, index: usize) -> &mut Tensor {
        &mut self.tensors[index]
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.tensors.iter().map(|(k, v)| (k.as_str(), v))
    }

    /// Number of tensors.
    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total number of scalar parameters.
    pub fn num_scalars(&self) -> usize {
        self.tensors.values().map(Tensor::len).sum()
    }

    pub fn flatten(&self) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.num_scalars());
        for t in self.tensors.values() {
            out.extend_from_slice(t.data());
        }
        out
    }

    /// Overwrites every parameter from a flat vector in `flatten` order.
    pub fn unflatten(&mut self, flat: &[f64]) -> Result<(), NetError> {
        if flat.len() != self.num_scalars() {
            return Err(NetError::Shape {
                op: "unflatten",
                detail: format!("expected {} values, got {}", self.num_scalars(), flat.len()),
            });
        }
        let mut offset = 0;
        for t in self.tensors.values_mut() {
            let n = t.len();
            t.data_mut().copy_from_slice(&flat[offset..offset + n]);
            offset += n;
        }
        Ok(())
    }

    /// `θ ← θ − rate·g` for gradients aligned with this set.
    pub fn sgd_step(&mut self, grads: &[Tensor], rate: f64) -> Result<(), NetError> {
        if grads.len() != self.len() {
            return Err(NetError::Shape {
                op: "sgd_step",
                detail: format!("{} gradients for {} tensors", grads.len(), self.len()),
            });
        }
        for (t, g) in self.tensors.values_mut().zip(grads) {
            if t.shape() != g.shape() {
                return Err(NetError::Shape {
                    op: "sgd_step",
                    detail: format!("gradient {:?} vs parameter {:?}", g.shape(), t.shape()),
                });
            }
            for (p, d) in t.data_mut().iter_mut().zip(g.data()) {
                *p -= rate * d;
            }
        }
        Ok(())
    }
}

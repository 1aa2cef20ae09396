use serde::{Deserialize, Serialize};

use super::graph::Graph;
use super::Tensor;

/// Subsystem a parameter belongs to, used by the parameter census.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Backbone,
    PromptBank,
    MemoryHub,
    Classifier,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [
        ParamGroup::Backbone,
        ParamGroup::PromptBank,
        ParamGroup::MemoryHub,
        ParamGroup::Classifier,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Backbone => "backbone",
            ParamGroup::PromptBank => "prompt_bank",
            ParamGroup::MemoryHub => "memory_hub",
            ParamGroup::Classifier => "classifier",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Parameter {
    pub name: String,
    pub group: ParamGroup,
    pub tensor: Tensor,
    pub frozen: bool,
    pub grad: Option<Tensor>,
}

impl Parameter {
    pub fn numel(&self) -> usize {
        self.tensor.len()
    }
}

/// Owns every parameter of a model. Modules refer to entries by [`ParamId`].
#[derive(Debug, Clone, Default)]
pub struct ParamStore {
    params: Vec<Parameter>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(
        &mut self,
        name: impl Into<String>,
        group: ParamGroup,
        tensor: Tensor,
        frozen: bool,
    ) -> ParamId {
        self.params.push(Parameter {
            name: name.into(),
            group,
            tensor,
            frozen,
            grad: None,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Parameter {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter {
        &mut self.params[id.0]
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.params[id.0].tensor
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Parameter)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter> {
        self.params.iter_mut()
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.params.iter().position(|p| p.name == name).map(ParamId)
    }

    pub fn set_group_frozen(&mut self, group: ParamGroup, frozen: bool) {
        for p in self.params.iter_mut().filter(|p| p.group == group) {
            p.frozen = frozen;
        }
    }

    pub fn trainable_count(&self) -> usize {
        self.params.iter().filter(|p| !p.frozen).map(Parameter::numel).sum()
    }

    pub fn total_count(&self) -> usize {
        self.params.iter().map(Parameter::numel).sum()
    }

    /// Adds the gradients computed by `graph.backward` into the parameter
    /// buffers. Trainable parameters the graph never touched receive an
    /// explicit zero gradient; frozen parameters are never written.
    pub fn accumulate_grads(&mut self, graph: &Graph) {
        for p in self.params.iter_mut().filter(|p| !p.frozen) {
            if p.grad.is_none() {
                p.grad = Some(Tensor::zeros(p.tensor.shape()));
            }
        }
        for (id, grad) in graph.param_grads() {
            let p = &mut self.params[id.0];
            if p.frozen {
                continue;
            }
            if let Some(buf) = p.grad.as_mut() {
                buf.add_assign(grad);
            }
        }
    }

    pub fn clear_grads(&mut self) {
        for p in &mut self.params {
            p.grad = None;
        }
    }

    /// Copies of every trainable tensor, in store order.
    pub fn snapshot_trainable(&self) -> Vec<(ParamId, Tensor)> {
        self.iter()
            .filter(|(_, p)| !p.frozen)
            .map(|(id, p)| (id, p.tensor.clone()))
            .collect()
    }

    pub fn restore(&mut self, snapshot: &[(ParamId, Tensor)]) {
        for (id, t) in snapshot {
            self.params[id.0].tensor = t.clone();
        }
    }
}

use modtune_autodiff::{Float, Graph, Var};

use crate::params::{ParamId, ParamStore};

/// A computation graph plus lazily bound parameter leaves.
///
/// Each parameter is copied onto the graph the first time it is used. With gradients
/// enabled, trainable parameters become differentiable leaves and everything else is
/// a constant.
pub struct Ctx<'a, T: Float> {
    pub g: Graph<T>,
    store: &'a ParamStore<T>,
    bound: Vec<Option<Var>>,
    grad_enabled: bool,
}

impl<'a, T: Float> Ctx<'a, T> {
    pub fn new(store: &'a ParamStore<T>, grad_enabled: bool) -> Self {
        Ctx { g: Graph::new(), store, bound: vec![None; store.len()], grad_enabled }
    }

    pub fn grad_enabled(&self) -> bool {
        self.grad_enabled
    }

    pub fn p(&mut self, id: ParamId) -> Var {
        if let Some(v) = self.bound[id.index()] {
            return v;
        }
        let param = self.store.param(id);
        let v = self.g.leaf(param.value.clone(), self.grad_enabled && param.trainable);
        self.bound[id.index()] = Some(v);
        v
    }

    /// The graph handle of a parameter, if it was used.
    pub fn bound(&self, id: ParamId) -> Option<Var> {
        self.bound[id.index()]
    }

    /// Gradient of every parameter after `backward`, indexed by parameter id. `None`
    /// means the parameter was unused, frozen, or disconnected from the loss.
    pub fn param_grads(&self) -> Vec<Option<Vec<T>>> {
        self.bound.iter().map(|b| b.and_then(|v| self.g.grad(v).map(|s| s.to_vec()))).collect()
    }
}

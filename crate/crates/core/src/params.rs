use std::collections::HashMap;
use std::fmt;

use modtune_autodiff::{Float, Tensor};
use serde::{Deserialize, Serialize};

use crate::error::{CoreError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    Base,
    Lora,
    ModRouting,
    ModNorms,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 4] = [ParamGroup::Base, ParamGroup::Lora, ParamGroup::ModRouting, ParamGroup::ModNorms];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Base => "base",
            ParamGroup::Lora => "lora",
            ParamGroup::ModRouting => "mod_routing",
            ParamGroup::ModNorms => "mod_norms",
        }
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// Index of a parameter in its [`ParamStore`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug, Clone)]
pub struct Param<T> {
    pub name: String,
    pub value: Tensor<T>,
    pub group: ParamGroup,
    pub trainable: bool,
}

/// Named parameters in registration order.
#[derive(Debug, Clone)]
pub struct ParamStore<T> {
    params: Vec<Param<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> Default for ParamStore<T> {
    fn default() -> Self {
        Self::new()
    }
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore { params: Vec::new(), by_name: HashMap::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor<T>, group: ParamGroup) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(CoreError::State(format!("parameter {name} already exists")));
        }
        let id = self.params.len();
        self.by_name.insert(name.clone(), id);
        self.params.push(Param { name, value, group, trainable: true });
        Ok(ParamId(id))
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn id(&self, name: &str) -> Option<ParamId> {
        self.by_name.get(name).map(|&i| ParamId(i))
    }

    pub fn param(&self, id: ParamId) -> &Param<T> {
        &self.params[id.0]
    }

    pub fn value(&self, id: ParamId) -> &Tensor<T> {
        &self.params[id.0].value
    }

    pub fn value_mut(&mut self, id: ParamId) -> &mut Tensor<T> {
        &mut self.params[id.0].value
    }

    pub fn get(&self, name: &str) -> Option<&Param<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<T>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (ParamId, &mut Param<T>)> {
        self.params.iter_mut().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    /// Marks exactly the parameters whose group satisfies `pred` as trainable.
    pub fn set_trainable_groups(&mut self, pred: impl Fn(ParamGroup) -> bool) {
        for p in &mut self.params {
            p.trainable = pred(p.group);
        }
    }

    /// Number of scalar parameters, optionally restricted to trainable ones and a group.
    pub fn count(&self, trainable_only: bool, group: Option<ParamGroup>) -> usize {
        self.params
            .iter()
            .filter(|p| !trainable_only || p.trainable)
            .filter(|p| group.map_or(true, |g| p.group == g))
            .map(|p| p.value.numel())
            .sum()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn duplicate_names_rejected() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![2]), ParamGroup::Base).unwrap();
        assert!(matches!(s.add("a", Tensor::zeros(vec![2]), ParamGroup::Base), Err(CoreError::State(_))));
    }

    #[test]
    fn counting_by_group() {
        let mut s = ParamStore::<f32>::new();
        s.add("a", Tensor::zeros(vec![2, 3]), ParamGroup::Base).unwrap();
        s.add("b", Tensor::zeros(vec![4]), ParamGroup::Lora).unwrap();
        s.set_trainable_groups(|g| g == ParamGroup::Lora);
        assert_eq!(s.count(false, None), 10);
        assert_eq!(s.count(true, None), 4);
        assert_eq!(s.count(false, Some(ParamGroup::Base)), 6);
        assert_eq!(s.count(true, Some(ParamGroup::Base)), 0);
    }
}

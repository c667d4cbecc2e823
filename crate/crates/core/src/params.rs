//! Parameter groups. Every trainable tensor is registered in exactly one
//! group; gradient routing and optimizer ownership are expressed per group.

use std::collections::{BTreeMap, HashMap};
use std::fmt;
use std::str::FromStr;

use thiserror::Error;

use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum GroupName {
    Teacher,
    Student,
    Decoder,
    Aux,
}

impl GroupName {
    pub const ALL: [GroupName; 4] = [GroupName::Teacher, GroupName::Student, GroupName::Decoder, GroupName::Aux];

    pub fn as_str(self) -> &'static str {
        match self {
            GroupName::Teacher => "teacher",
            GroupName::Student => "student",
            GroupName::Decoder => "decoder",
            GroupName::Aux => "aux",
        }
    }
}

impl fmt::Display for GroupName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for GroupName {
    type Err = ParamError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        GroupName::ALL.into_iter().find(|g| g.as_str() == s).ok_or_else(|| ParamError::UnknownGroup(s.to_string()))
    }
}

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ParamError {
    #[error("unknown parameter group `{0}`")]
    UnknownGroup(String),
    #[error("parameter `{name}` registered twice in group {group}")]
    Duplicate { group: GroupName, name: String },
    #[error("tensor `{name}` is shared between groups {first} and {second}")]
    SharedAcrossGroups { name: String, first: GroupName, second: GroupName },
    #[error("trainable tensor `{0}` is not registered in any group")]
    Unregistered(String),
}

/// Named, ordered collection of trainable tensors.
#[derive(Clone, Debug)]
pub struct ParamGroup {
    name: GroupName,
    params: BTreeMap<String, Tensor>,
}

impl ParamGroup {
    pub fn new(name: GroupName) -> Self {
        Self { name, params: BTreeMap::new() }
    }

    pub fn name(&self) -> GroupName {
        self.name
    }

    /// Registers `t` under `name`. The tensor is shared, not copied.
    pub fn register(&mut self, name: impl Into<String>, t: &Tensor) -> Result<(), ParamError> {
        let name = name.into();
        if self.params.contains_key(&name) {
            return Err(ParamError::Duplicate { group: self.name, name });
        }
        t.set_requires_grad(true);
        self.params.insert(name, t.clone());
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Tensor> {
        self.params.get(name)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&String, &Tensor)> {
        self.params.iter()
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn named(&self) -> Vec<(String, Tensor)> {
        self.params.iter().map(|(k, v)| (format!("{}.{k}", self.name), v.clone())).collect()
    }

    pub fn numel(&self) -> usize {
        self.params.values().map(Tensor::numel).sum()
    }

    pub fn zero_grad(&self) {
        self.params.values().for_each(Tensor::zero_grad);
    }

    /// Freezes (or unfreezes) every tensor in the group.
    pub fn set_trainable(&self, on: bool) {
        self.params.values().for_each(|t| t.set_requires_grad(on));
    }

    pub fn is_frozen(&self) -> bool {
        self.params.values().all(|t| !t.requires_grad())
    }

    /// Largest absolute gradient entry in the group, with the parameter
    /// that holds it. Frozen tensors contribute nothing.
    pub fn max_abs_grad(&self) -> (f64, Option<String>) {
        let mut best = (0.0, None);
        for (name, t) in &self.params {
            if let Some(g) = t.grad_ref().as_ref() {
                let m = g.iter().fold(0.0f64, |a, v| a.max(v.abs()));
                if m > best.0 {
                    best = (m, Some(name.clone()));
                }
            }
        }
        best
    }

    pub fn grad_norm(&self) -> f64 {
        self.params.values().filter_map(|t| t.grad()).flat_map(|g| g.into_iter()).map(|v| v * v).sum::<f64>().sqrt()
    }
}

/// Checks that no tensor is shared between groups and that every tensor in
/// `trainable` (as enumerated by the owning modules) is registered.
pub fn audit_groups(groups: &[&ParamGroup], trainable: &[(String, Tensor)]) -> Result<(), ParamError> {
    let mut owner: HashMap<usize, (GroupName, String)> = HashMap::new();
    for g in groups {
        for (name, t) in g.iter() {
            if let Some((first, _)) = owner.insert(t.ptr_id(), (g.name(), name.clone())) {
                return Err(ParamError::SharedAcrossGroups { name: name.clone(), first, second: g.name() });
            }
        }
    }
    for (name, t) in trainable {
        if !owner.contains_key(&t.ptr_id()) {
            return Err(ParamError::Unregistered(name.clone()));
        }
    }
    Ok(())
}

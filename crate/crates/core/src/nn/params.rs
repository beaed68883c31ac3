use alloc::string::String;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

use crate::scalar::Real;
use crate::tensor::Tensor;

/// Handle to a parameter inside a [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct ParamId(pub usize);

/// Ownership tag used for gradient routing and optimizer groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ParamGroup {
    /// Generator mapping network (noise to latent code).
    Mapping,
    /// Generator synthesis layers, including to-image layers.
    Synthesis,
    /// Generator label-synthesis head.
    LabelBranch,
    Discriminator,
    /// Encoder backbone, heads and the skip-injection gates.
    Encoder,
    /// Never trained (e.g. the perceptual feature extractor).
    Fixed,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 6] = [
        ParamGroup::Mapping,
        ParamGroup::Synthesis,
        ParamGroup::LabelBranch,
        ParamGroup::Discriminator,
        ParamGroup::Encoder,
        ParamGroup::Fixed,
    ];

    fn bit(self) -> u8 {
        1 << (self as u8)
    }

    pub fn as_str(self) -> &'static str {
        match self {
            ParamGroup::Mapping => "mapping",
            ParamGroup::Synthesis => "synthesis",
            ParamGroup::LabelBranch => "label_branch",
            ParamGroup::Discriminator => "discriminator",
            ParamGroup::Encoder => "encoder",
            ParamGroup::Fixed => "fixed",
        }
    }
}

/// A set of parameter groups.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Default)]
pub struct GroupSet(u8);

impl GroupSet {
    pub const NONE: GroupSet = GroupSet(0);

    pub fn of(groups: &[ParamGroup]) -> Self {
        GroupSet(groups.iter().fold(0, |acc, g| acc | g.bit()))
    }

    pub fn contains(self, group: ParamGroup) -> bool {
        self.0 & group.bit() != 0
    }

    pub fn with(self, group: ParamGroup) -> Self {
        GroupSet(self.0 | group.bit())
    }

    pub fn generator() -> Self {
        Self::of(&[
            ParamGroup::Mapping,
            ParamGroup::Synthesis,
            ParamGroup::LabelBranch,
        ])
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param<S> {
    pub name: String,
    pub group: ParamGroup,
    pub value: Tensor<S>,
}

/// Flat, ordered collection of named parameters.
#[derive(Clone, Debug, PartialEq, Default)]
pub struct ParamStore<S> {
    params: Vec<Param<S>>,
}

impl<S: Real> ParamStore<S> {
    pub fn new() -> Self {
        Self { params: Vec::new() }
    }

    pub fn add(&mut self, name: impl Into<String>, group: ParamGroup, value: Tensor<S>) -> ParamId {
        self.params.push(Param {
            name: name.into(),
            group,
            value,
        });
        ParamId(self.params.len() - 1)
    }

    pub fn get(&self, id: ParamId) -> &Tensor<S> {
        &self.params[id.0].value
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor<S> {
        &mut self.params[id.0].value
    }

    pub fn param(&self, id: ParamId) -> &Param<S> {
        &self.params[id.0]
    }

    pub fn group(&self, id: ParamId) -> ParamGroup {
        self.params[id.0].group
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Param<S>)> {
        self.params.iter().enumerate().map(|(i, p)| (ParamId(i), p))
    }

    pub fn ids_in(&self, groups: GroupSet) -> Vec<ParamId> {
        self.iter()
            .filter(|(_, p)| groups.contains(p.group))
            .map(|(id, _)| id)
            .collect()
    }

    /// Number of scalar parameters in the given groups.
    pub fn count(&self, groups: GroupSet) -> usize {
        self.params
            .iter()
            .filter(|p| groups.contains(p.group))
            .map(|p| p.value.len())
            .sum()
    }

    /// Copies values of every parameter in `groups` from `other`.
    pub fn copy_groups_from(&mut self, other: &ParamStore<S>, groups: GroupSet) {
        for (dst, src) in self.params.iter_mut().zip(&other.params) {
            if groups.contains(dst.group) {
                dst.value.clone_from(&src.value);
            }
        }
    }

    pub fn cast<T: Real>(&self) -> ParamStore<T> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Param {
                    name: p.name.clone(),
                    group: p.group,
                    value: p.value.cast(),
                })
                .collect(),
        }
    }
}

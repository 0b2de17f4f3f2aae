use std::collections::BTreeMap;
use std::fmt;

use super::{Array, AutodiffError};

/// Optimizer grouping; each group gets its own learning rate and phase gate.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum ParamGroup {
    Means,
    Scales,
    Rotations,
    Opacity,
    Colors,
    Motion,
    WeightNet,
}

impl ParamGroup {
    pub const ALL: [ParamGroup; 7] = [
        ParamGroup::Means,
        ParamGroup::Scales,
        ParamGroup::Rotations,
        ParamGroup::Opacity,
        ParamGroup::Colors,
        ParamGroup::Motion,
        ParamGroup::WeightNet,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ParamGroup::Means => "means",
            ParamGroup::Scales => "scales",
            ParamGroup::Rotations => "rotations",
            ParamGroup::Opacity => "opacity",
            ParamGroup::Colors => "colors",
            ParamGroup::Motion => "motion",
            ParamGroup::WeightNet => "weightnet",
        }
    }

    pub fn from_name(s: &str) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| g.name() == s)
    }

    pub fn is_cloud(self) -> bool {
        !matches!(self, ParamGroup::Motion | ParamGroup::WeightNet)
    }
}

impl fmt::Display for ParamGroup {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

/// A learnable tensor with its gradient and Adam moments.
#[derive(Clone, Debug)]
pub struct Param {
    pub value: Array,
    pub grad: Array,
    pub group: ParamGroup,
    pub m: Array,
    pub v: Array,
    pub step: u64,
}

impl Param {
    pub fn new(value: Array, group: ParamGroup) -> Self {
        let z = Array::zeros(value.shape());
        Param { grad: z.clone(), m: z.clone(), v: z, value, group, step: 0 }
    }
}

/// Named parameters in deterministic (sorted) order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    params: BTreeMap<String, Param>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, name: &str, value: Array, group: ParamGroup) {
        self.params.insert(name.to_string(), Param::new(value, group));
    }

    pub fn insert_param(&mut self, name: &str, p: Param) {
        self.params.insert(name.to_string(), p);
    }

    pub fn contains(&self, name: &str) -> bool {
        self.params.contains_key(name)
    }

    pub fn get(&self, name: &str) -> Result<&Param, AutodiffError> {
        self.params.get(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn get_mut(&mut self, name: &str) -> Result<&mut Param, AutodiffError> {
        self.params.get_mut(name).ok_or_else(|| AutodiffError::UnknownParam(name.to_string()))
    }

    pub fn value(&self, name: &str) -> Result<&Array, AutodiffError> {
        Ok(&self.get(name)?.value)
    }

    pub fn value_mut(&mut self, name: &str) -> Result<&mut Array, AutodiffError> {
        Ok(&mut self.get_mut(name)?.value)
    }

    pub fn grad(&self, name: &str) -> Result<&Array, AutodiffError> {
        Ok(&self.get(name)?.grad)
    }

    pub fn accumulate_grad(&mut self, name: &str, g: &Array) -> Result<(), AutodiffError> {
        let p = self.get_mut(name)?;
        if p.grad.shape() != g.shape() {
            return Err(AutodiffError::ShapeMismatch {
                op: "accumulate_grad",
                lhs: p.grad.shape().to_vec(),
                rhs: g.shape().to_vec(),
            });
        }
        p.grad.add_assign(g);
        Ok(())
    }

    pub fn zero_grads(&mut self) {
        for p in self.params.values_mut() {
            p.grad.fill(0.0);
        }
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Param)> {
        self.params.iter().map(|(k, v)| (k.as_str(), v))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = (&str, &mut Param)> {
        self.params.iter_mut().map(|(k, v)| (k.as_str(), v))
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.params.keys().map(String::as_str)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    /// First group, in [`ParamGroup::ALL`] order, holding a non-finite value or
    /// gradient.
    pub fn first_non_finite_group(&self) -> Option<ParamGroup> {
        ParamGroup::ALL.into_iter().find(|g| {
            self.params
                .values()
                .filter(|p| p.group == *g)
                .any(|p| !p.value.all_finite() || !p.grad.all_finite())
        })
    }
}

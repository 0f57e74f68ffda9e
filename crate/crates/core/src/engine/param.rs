use std::collections::HashMap;

use super::{Float, Tensor};
use crate::error::{Error, Result};

/// Index of a parameter inside its [`ParamStore`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct ParamId(pub(crate) usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

/// What a tensor in the store is used for. Drives weight layout for filter
/// normalization and which entries the optimizer touches.
#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
pub enum ParamKind {
    /// `[out, in, k, k]`; one filter per output channel.
    ConvWeight,
    /// `[out, in]`; one filter per row.
    DenseWeight,
    Bias,
    BnScale,
    BnShift,
    /// Running statistics; not trainable.
    BnRunningMean,
    BnRunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::BnRunningMean | ParamKind::BnRunningVar)
    }

    pub fn tag(self) -> u8 {
        match self {
            ParamKind::ConvWeight => 0,
            ParamKind::DenseWeight => 1,
            ParamKind::Bias => 2,
            ParamKind::BnScale => 3,
            ParamKind::BnShift => 4,
            ParamKind::BnRunningMean => 5,
            ParamKind::BnRunningVar => 6,
        }
    }

    pub fn from_tag(tag: u8) -> Option<Self> {
        Some(match tag {
            0 => ParamKind::ConvWeight,
            1 => ParamKind::DenseWeight,
            2 => ParamKind::Bias,
            3 => ParamKind::BnScale,
            4 => ParamKind::BnShift,
            5 => ParamKind::BnRunningMean,
            6 => ParamKind::BnRunningVar,
            _ => return None,
        })
    }
}

#[derive(Clone, Debug)]
pub struct Parameter<T> {
    pub name: String,
    pub kind: ParamKind,
    pub value: Tensor<T>,
    /// Gradient accumulator, kept in 64-bit regardless of `T`.
    pub grad: Vec<f64>,
}

impl<T: Float> Parameter<T> {
    pub fn trainable(&self) -> bool {
        self.kind.trainable()
    }
}

/// Named, ordered collection of parameters and buffers.
#[derive(Clone, Debug, Default)]
pub struct ParamStore<T> {
    params: Vec<Parameter<T>>,
    by_name: HashMap<String, usize>,
}

impl<T: Float> ParamStore<T> {
    pub fn new() -> Self {
        ParamStore {
            params: Vec::new(),
            by_name: HashMap::new(),
        }
    }

    pub fn insert(&mut self, name: impl Into<String>, kind: ParamKind, value: Tensor<T>) -> Result<ParamId> {
        let name = name.into();
        if self.by_name.contains_key(&name) {
            return Err(Error::ParameterMismatch(format!("duplicate parameter `{name}`")));
        }
        let id = ParamId(self.params.len());
        self.by_name.insert(name.clone(), id.0);
        self.params.push(Parameter {
            grad: vec![0.0; value.numel()],
            name,
            kind,
            value,
        });
        Ok(id)
    }

    pub fn len(&self) -> usize {
        self.params.len()
    }

    pub fn is_empty(&self) -> bool {
        self.params.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Parameter<T> {
        &self.params[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Parameter<T> {
        &mut self.params[id.0]
    }

    pub fn id(&self, name: &str) -> Result<ParamId> {
        self.by_name
            .get(name)
            .map(|&i| ParamId(i))
            .ok_or_else(|| Error::UnknownParameter(name.to_string()))
    }

    pub fn by_name(&self, name: &str) -> Option<&Parameter<T>> {
        self.by_name.get(name).map(|&i| &self.params[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Parameter<T>> {
        self.params.iter()
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Parameter<T>> {
        self.params.iter_mut()
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.params.len()).map(ParamId)
    }

    pub fn zero_grad(&mut self) {
        for p in &mut self.params {
            p.grad.iter_mut().for_each(|g| *g = 0.0);
        }
    }

    pub(crate) fn accumulate(&mut self, id: ParamId, grad: &[T]) {
        let p = &mut self.params[id.0];
        debug_assert_eq!(p.grad.len(), grad.len());
        for (acc, &g) in p.grad.iter_mut().zip(grad) {
            *acc += g.as_f64();
        }
    }

    /// Checks that `other` has the same names, kinds and shapes in the same
    /// order.
    pub fn check_aligned<U: Float>(&self, other: &ParamStore<U>) -> Result<()> {
        if self.len() != other.len() {
            return Err(Error::ParameterMismatch(format!(
                "{} vs {} entries",
                self.len(),
                other.len()
            )));
        }
        for (a, b) in self.params.iter().zip(other.iter()) {
            if a.name != b.name || a.kind != b.kind || a.value.shape() != b.value.shape() {
                return Err(Error::ParameterMismatch(format!(
                    "`{}` {:?} vs `{}` {:?}",
                    a.name,
                    a.value.shape(),
                    b.name,
                    b.value.shape()
                )));
            }
        }
        Ok(())
    }

    pub fn cast<U: Float>(&self) -> ParamStore<U> {
        ParamStore {
            params: self
                .params
                .iter()
                .map(|p| Parameter {
                    name: p.name.clone(),
                    kind: p.kind,
                    value: p.value.cast(),
                    grad: p.grad.clone(),
                })
                .collect(),
            by_name: self.by_name.clone(),
        }
    }

    pub fn num_trainable(&self) -> usize {
        self.params.iter().filter(|p| p.trainable()).map(|p| p.value.numel()).sum()
    }
}

//! Named parameter tensors.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Weight,
    Bias,
    Scale,
    Shift,
    RunningMean,
    RunningVar,
}

impl ParamKind {
    pub fn trainable(self) -> bool {
        !matches!(self, ParamKind::RunningMean | ParamKind::RunningVar)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Param {
    pub name: String,
    pub kind: ParamKind,
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Param {
    pub fn new(name: impl Into<String>, kind: ParamKind, shape: Vec<usize>, data: Vec<f64>) -> Self {
        debug_assert_eq!(shape.iter().product::<usize>(), data.len());
        Param {
            name: name.into(),
            kind,
            shape,
            data,
        }
    }

    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

/// Ordered collection of tensors; gradients and optimiser state share the
/// layout of the parameters they belong to.
#[derive(Clone, Debug, PartialEq)]
pub struct ParameterSet {
    pub tensors: Vec<Param>,
}

impl ParameterSet {
    pub fn zeros_like(&self) -> ParameterSet {
        ParameterSet {
            tensors: self
                .tensors
                .iter()
                .map(|p| Param::new(p.name.clone(), p.kind, p.shape.clone(), vec![0.0; p.len()]))
                .collect(),
        }
    }

    pub fn get(&self, name: &str) -> Option<&Param> {
        self.tensors.iter().find(|p| p.name == name)
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut Param> {
        self.tensors.iter_mut().find(|p| p.name == name)
    }

    pub fn iter(&self) -> impl Iterator<Item = &Param> {
        self.tensors.iter()
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    /// Total scalar count.
    pub fn numel(&self) -> usize {
        self.tensors.iter().map(Param::len).sum()
    }

    fn check_layout(&self, other: &ParameterSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len()
            || self.tensors.iter().zip(&other.tensors).any(|(a, b)| a.shape != b.shape || a.name != b.name)
        {
            return Err(Error::Shape("parameter sets have different layouts".into()));
        }
        Ok(())
    }

    /// `self += scale * other`.
    pub fn add_scaled(&mut self, other: &ParameterSet, scale: f64) -> Result<()> {
        self.check_layout(other)?;
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, y) in a.data.iter_mut().zip(&b.data) {
                *x += scale * y;
            }
        }
        Ok(())
    }

    pub fn scale(&mut self, factor: f64) {
        for p in &mut self.tensors {
            p.data.iter_mut().for_each(|v| *v *= factor);
        }
    }

    pub fn fill(&mut self, value: f64) {
        for p in &mut self.tensors {
            p.data.fill(value);
        }
    }

    /// Largest elementwise relative difference, with `floor` guarding the denominator.
    pub fn max_rel_diff(&self, other: &ParameterSet, floor: f64) -> Result<f64> {
        self.check_layout(other)?;
        Ok(self
            .tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data))
            .map(|(x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
            .fold(0.0, f64::max))
    }

    /// Name of the first tensor holding a non-finite value.
    pub fn first_non_finite(&self) -> Option<&str> {
        self.tensors
            .iter()
            .find(|p| p.data.iter().any(|v| !v.is_finite()))
            .map(|p| p.name.as_str())
    }
}

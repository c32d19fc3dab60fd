//! Fixed flattening orders for parameter groups.
//!
//! Every trainable group (backbone, adapters, biaffine scorer) is kept as one
//! flat vector plus a [`ParamLayout`] naming the tensors inside it. The same
//! layout serves direct parameters and parameters emitted by the generator.

use serde::{Deserialize, Serialize};

use crate::numcore::{ShapeError, Tape, Tensor, Var};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl ParamSpec {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamLayout {
    entries: Vec<ParamSpec>,
    total: usize,
}

impl ParamLayout {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn push(&mut self, name: impl Into<String>, shape: &[usize]) {
        let spec = ParamSpec {
            name: name.into(),
            shape: shape.to_vec(),
            offset: self.total,
        };
        self.total += spec.len();
        self.entries.push(spec);
    }

    pub fn total(&self) -> usize {
        self.total
    }

    pub fn entries(&self) -> &[ParamSpec] {
        &self.entries
    }

    pub fn find(&self, name: &str) -> Option<&ParamSpec> {
        self.entries.iter().find(|e| e.name == name)
    }

    pub fn flatten(&self, tensors: &[Tensor]) -> Result<Tensor, ShapeError> {
        assert_eq!(tensors.len(), self.entries.len(), "tensor count");
        let mut data = Vec::with_capacity(self.total);
        for (spec, t) in self.entries.iter().zip(tensors) {
            if t.shape() != spec.shape.as_slice() {
                return Err(ShapeError::DataLength {
                    shape: spec.shape.clone(),
                    expected: spec.len(),
                    got: t.len(),
                });
            }
            data.extend_from_slice(t.data());
        }
        Tensor::new(vec![self.total], data)
    }

    pub fn unflatten(&self, flat: &Tensor) -> Result<Vec<Tensor>, ShapeError> {
        if flat.len() != self.total {
            return Err(ShapeError::DataLength {
                shape: vec![self.total],
                expected: self.total,
                got: flat.len(),
            });
        }
        self.entries
            .iter()
            .map(|e| Tensor::new(e.shape.clone(), flat.data()[e.offset..e.offset + e.len()].to_vec()))
            .collect()
    }

    /// Views of every entry of a flat vector already on the tape.
    pub fn bind(&self, tape: &mut Tape, flat: Var) -> Vec<Var> {
        assert_eq!(tape.value(flat).len(), self.total, "flat length");
        self.entries
            .iter()
            .map(|e| tape.view(flat, e.offset, &e.shape))
            .collect()
    }
}

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

pub const INIT_RANGE: f64 = 0.08;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum Shape {
    Vector(usize),
    Matrix(usize, usize),
}

impl Shape {
    pub fn len(&self) -> usize {
        match *self {
            Shape::Vector(n) => n,
            Shape::Matrix(r, c) => r * c,
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn scalar() -> Self {
        Shape::Vector(1)
    }
}

/// A named dense parameter, row-major for matrices.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Tensor {
    pub name: String,
    pub shape: Shape,
    pub data: Vec<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct ParamId(pub usize);

/// Ordered collection of all trainable tensors of a model.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct ParamSet {
    tensors: Vec<Tensor>,
}

impl ParamSet {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: Shape, data: Vec<f64>) -> ParamId {
        assert_eq!(shape.len(), data.len(), "parameter data does not fit its shape");
        self.tensors.push(Tensor {
            name: name.into(),
            shape,
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    /// Weight matrix with uniform(-0.08, 0.08) entries.
    pub fn weight(&mut self, name: &str, rows: usize, cols: usize, rng: &mut impl Rng) -> ParamId {
        let data = (0..rows * cols)
            .map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE))
            .collect();
        self.add(name, Shape::Matrix(rows, cols), data)
    }

    pub fn uniform_vector(&mut self, name: &str, n: usize, rng: &mut impl Rng) -> ParamId {
        let data = (0..n).map(|_| rng.random_range(-INIT_RANGE..INIT_RANGE)).collect();
        self.add(name, Shape::Vector(n), data)
    }

    pub fn bias(&mut self, name: &str, n: usize) -> ParamId {
        self.add(name, Shape::Vector(n), vec![0.0; n])
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn get_mut(&mut self, id: ParamId) -> &mut Tensor {
        &mut self.tensors[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.tensors.iter().position(|t| t.name == name).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (ParamId, &Tensor)> {
        self.tensors.iter().enumerate().map(|(i, t)| (ParamId(i), t))
    }

    pub fn iter_mut(&mut self) -> impl Iterator<Item = &mut Tensor> {
        self.tensors.iter_mut()
    }

    pub fn num_values(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }

    /// Copies values from `other`, which must have identical names and shapes.
    pub fn load_from(&mut self, other: &ParamSet) -> Result<()> {
        if self.tensors.len() != other.tensors.len() {
            return Err(Error::Shape(format!(
                "expected {} tensors, found {}",
                self.tensors.len(),
                other.tensors.len()
            )));
        }
        for (mine, theirs) in self.tensors.iter_mut().zip(&other.tensors) {
            if mine.name != theirs.name || mine.shape != theirs.shape {
                return Err(Error::Shape(format!(
                    "tensor `{}` {:?} does not match `{}` {:?}",
                    mine.name, mine.shape, theirs.name, theirs.shape
                )));
            }
            mine.data.clone_from(&theirs.data);
        }
        Ok(())
    }
}

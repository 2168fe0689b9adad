//! Named parameter tensors and matching gradient buffers.

use crate::error::{Error, Result};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct ParamId(usize);

impl ParamId {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Tensor {
    pub shape: Vec<usize>,
    pub data: Vec<f64>,
}

impl Tensor {
    pub fn zeros(shape: &[usize]) -> Self {
        Self {
            shape: shape.to_vec(),
            data: vec![0.0; shape.iter().product()],
        }
    }
}

/// Flat, ordered collection of named tensors.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ParamStore {
    names: Vec<String>,
    tensors: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, shape: &[usize], data: Vec<f64>) -> ParamId {
        let name = name.into();
        assert_eq!(
            shape.iter().product::<usize>(),
            data.len(),
            "parameter {name} has a shape/data mismatch"
        );
        assert!(self.find(&name).is_none(), "duplicate parameter {name}");
        self.names.push(name);
        self.tensors.push(Tensor {
            shape: shape.to_vec(),
            data,
        });
        ParamId(self.tensors.len() - 1)
    }

    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.tensors[id.0].data
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.tensors[id.0].data
    }

    pub fn tensor(&self, id: ParamId) -> &Tensor {
        &self.tensors[id.0]
    }

    pub fn name(&self, id: ParamId) -> &str {
        &self.names[id.0]
    }

    pub fn find(&self, name: &str) -> Option<ParamId> {
        self.names.iter().position(|n| n == name).map(ParamId)
    }

    pub fn ids(&self) -> impl Iterator<Item = ParamId> {
        (0..self.tensors.len()).map(ParamId)
    }

    pub fn iter(&self) -> impl Iterator<Item = (&str, &Tensor)> {
        self.names.iter().map(String::as_str).zip(&self.tensors)
    }

    pub fn len(&self) -> usize {
        self.tensors.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tensors.is_empty()
    }

    pub fn num_scalars(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn zero_grads(&self) -> Gradients {
        Gradients {
            data: self.tensors.iter().map(|t| vec![0.0; t.data.len()]).collect(),
        }
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.tensors.iter().flat_map(|t| t.data.iter().copied()).collect()
    }

    pub fn set_flat(&mut self, values: &[f64]) {
        assert_eq!(values.len(), self.num_scalars());
        let mut offset = 0;
        for t in &mut self.tensors {
            let n = t.data.len();
            t.data.copy_from_slice(&values[offset..offset + n]);
            offset += n;
        }
    }

    /// Replaces the tensor named `name`, which must keep its shape.
    pub fn load(&mut self, name: &str, tensor: Tensor) -> Result<()> {
        let id = self
            .find(name)
            .ok_or_else(|| Error::Config(format!("unknown parameter {name}")))?;
        if self.tensors[id.0].shape != tensor.shape {
            return Err(Error::Shape(format!(
                "parameter {name}: stored shape {:?}, loaded {:?}",
                self.tensors[id.0].shape, tensor.shape
            )));
        }
        self.tensors[id.0] = tensor;
        Ok(())
    }

    pub fn all_finite(&self) -> bool {
        self.tensors.iter().all(|t| t.data.iter().all(|v| v.is_finite()))
    }
}

/// Gradient buffers laid out like the [`ParamStore`] they came from.
#[derive(Clone, Debug, PartialEq)]
pub struct Gradients {
    data: Vec<Vec<f64>>,
}

impl Gradients {
    #[inline]
    pub fn get(&self, id: ParamId) -> &[f64] {
        &self.data[id.0]
    }

    #[inline]
    pub fn get_mut(&mut self, id: ParamId) -> &mut [f64] {
        &mut self.data[id.0]
    }

    pub fn tensors(&self) -> &[Vec<f64>] {
        &self.data
    }

    pub fn accumulate(&mut self, other: &Gradients) {
        for (a, b) in self.data.iter_mut().zip(&other.data) {
            for (x, y) in a.iter_mut().zip(b) {
                *x += y;
            }
        }
    }

    pub fn scale(&mut self, factor: f64) {
        self.data
            .iter_mut()
            .flat_map(|t| t.iter_mut())
            .for_each(|v| *v *= factor);
    }

    pub fn flatten(&self) -> Vec<f64> {
        self.data.iter().flat_map(|t| t.iter().copied()).collect()
    }

    pub fn l2_norm(&self) -> f64 {
        self.data
            .iter()
            .flat_map(|t| t.iter())
            .map(|v| v * v)
            .sum::<f64>()
            .sqrt()
    }

    pub fn all_finite(&self) -> bool {
        self.data.iter().all(|t| t.iter().all(|v| v.is_finite()))
    }
}

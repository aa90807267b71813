use std::sync::Arc;

use crate::{Error, Result, Scalar};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TensorInfo {
    pub name: String,
    pub shape: Vec<usize>,
    pub offset: usize,
}

impl TensorInfo {
    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Named tensors packed into one flat vector.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Layout {
    tensors: Vec<TensorInfo>,
    len: usize,
}

impl Layout {
    pub fn new(named_shapes: Vec<(String, Vec<usize>)>) -> Self {
        let mut offset = 0;
        let tensors = named_shapes
            .into_iter()
            .map(|(name, shape)| {
                let t = TensorInfo {
                    name,
                    shape,
                    offset,
                };
                offset += t.len();
                t
            })
            .collect();
        Layout {
            tensors,
            len: offset,
        }
    }

    pub fn tensors(&self) -> &[TensorInfo] {
        &self.tensors
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    pub fn find(&self, name: &str) -> Option<&TensorInfo> {
        self.tensors.iter().find(|t| t.name == name)
    }

    /// Name of the tensor holding flat index `i`, with the index inside it.
    pub fn locate(&self, i: usize) -> Option<(&str, usize)> {
        self.tensors
            .iter()
            .find(|t| i >= t.offset && i < t.offset + t.len())
            .map(|t| (t.name.as_str(), i - t.offset))
    }
}

/// Parameter values (or gradients: a gradient is a block with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamBlock<F> {
    layout: Arc<Layout>,
    values: Vec<F>,
}

impl<F: Scalar> ParamBlock<F> {
    pub fn zeros(layout: Arc<Layout>) -> Self {
        let values = vec![F::zero(); layout.len()];
        ParamBlock { layout, values }
    }

    pub fn from_values(layout: Arc<Layout>, values: Vec<F>) -> Result<Self> {
        if values.len() != layout.len() {
            return Err(Error::DimensionMismatch {
                context: "parameter block",
                expected: layout.len(),
                got: values.len(),
            });
        }
        Ok(ParamBlock { layout, values })
    }

    pub fn zeros_like(&self) -> Self {
        Self::zeros(self.layout.clone())
    }

    pub fn layout(&self) -> &Arc<Layout> {
        &self.layout
    }

    pub fn values(&self) -> &[F] {
        &self.values
    }

    pub fn values_mut(&mut self) -> &mut [F] {
        &mut self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn tensor(&self, name: &str) -> Option<&[F]> {
        let t = self.layout.find(name)?;
        Some(&self.values[t.offset..t.offset + t.len()])
    }

    pub fn tensor_mut(&mut self, name: &str) -> Option<&mut [F]> {
        let t = self.layout.find(name)?.clone();
        Some(&mut self.values[t.offset..t.offset + t.len()])
    }

    pub fn same_layout(&self, other: &Self) -> bool {
        Arc::ptr_eq(&self.layout, &other.layout) || self.layout == other.layout
    }

    pub fn is_finite(&self) -> bool {
        self.values.iter().all(|v| v.is_finite())
    }

    pub fn fill_zero(&mut self) {
        self.values.iter_mut().for_each(|v| *v = F::zero());
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, alpha: F, other: &Self) -> Result<()> {
        if !self.same_layout(other) {
            return Err(Error::invalid("parameter blocks have different layouts"));
        }
        super::axpy(alpha, &other.values, &mut self.values);
        Ok(())
    }

    pub fn scale(&mut self, alpha: F) {
        self.values.iter_mut().for_each(|v| *v *= alpha);
    }

    pub fn max_abs(&self) -> F {
        self.values.iter().fold(F::zero(), |m, v| m.max(v.abs()))
    }
}

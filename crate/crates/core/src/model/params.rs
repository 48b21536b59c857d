use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// A named, shaped slice of a flat parameter array.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ParamBlock {
    pub name: String,
    pub shape: Vec<usize>,
}

impl ParamBlock {
    pub fn new(name: &str, shape: &[usize]) -> Self {
        Self {
            name: name.to_string(),
            shape: shape.to_vec(),
        }
    }

    pub fn len(&self) -> usize {
        self.shape.iter().product()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Flat parameter array with a block layout. Blocks are laid out back to
/// back in declaration order.
#[derive(Debug, Clone, PartialEq)]
pub struct ParamVector {
    layout: Vec<ParamBlock>,
    values: Vec<f64>,
}

impl ParamVector {
    pub fn new(layout: Vec<ParamBlock>, values: Vec<f64>) -> Result<Self> {
        let expected: usize = layout.iter().map(ParamBlock::len).sum();
        if values.len() != expected {
            return Err(Error::LayoutMismatch(format!(
                "layout needs {expected} values, got {}",
                values.len()
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(Self { layout, values })
    }

    pub fn zeros(layout: Vec<ParamBlock>) -> Self {
        let n = layout.iter().map(ParamBlock::len).sum();
        Self {
            layout,
            values: vec![0.0; n],
        }
    }

    pub fn layout(&self) -> &[ParamBlock] {
        &self.layout
    }

    pub fn values(&self) -> &[f64] {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn with_values(&self, values: Vec<f64>) -> Result<Self> {
        Self::new(self.layout.clone(), values)
    }

    pub fn range(&self, name: &str) -> Result<std::ops::Range<usize>> {
        let mut start = 0;
        for b in &self.layout {
            if b.name == name {
                return Ok(start..start + b.len());
            }
            start += b.len();
        }
        Err(Error::LayoutMismatch(format!("no block named {name}")))
    }

    pub fn block(&self, name: &str) -> Result<&[f64]> {
        Ok(&self.values[self.range(name)?])
    }

    pub fn block_mut(&mut self, name: &str) -> Result<&mut [f64]> {
        let r = self.range(name)?;
        Ok(&mut self.values[r])
    }

    /// `self -= lr * grad`, elementwise.
    pub fn descend(&mut self, grad: &[f64], lr: f64) -> Result<()> {
        if grad.len() != self.values.len() {
            return Err(Error::VectorLengthMismatch(self.values.len(), grad.len()));
        }
        for (p, g) in self.values.iter_mut().zip(grad) {
            *p -= lr * g;
        }
        if let Some(i) = self.values.iter().position(|v| !v.is_finite()) {
            return Err(Error::NonFinite(i));
        }
        Ok(())
    }

    pub fn expect_layout(&self, layout: &[ParamBlock]) -> Result<()> {
        if self.layout != layout {
            return Err(Error::LayoutMismatch("parameters do not match the model layout".into()));
        }
        Ok(())
    }
}

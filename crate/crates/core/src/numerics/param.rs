use sha2::{Digest, Sha256};

use super::Tensor2D;
use crate::{Error, Result};

/// A named weight tensor with an optional gradient buffer.
///
/// Frozen parameters never get a gradient buffer and refuse updates, so the
/// freeze is enforced by construction rather than by the optimizer.
#[derive(Debug, Clone, PartialEq)]
pub struct Parameter {
    pub name: String,
    pub value: Tensor2D,
    grad: Option<Tensor2D>,
    frozen: bool,
}

impl Parameter {
    pub fn trainable(name: impl Into<String>, value: Tensor2D) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            frozen: false,
        }
    }

    pub fn frozen(name: impl Into<String>, value: Tensor2D) -> Self {
        Self {
            name: name.into(),
            value,
            grad: None,
            frozen: true,
        }
    }

    pub fn is_frozen(&self) -> bool {
        self.frozen
    }

    pub fn is_trainable(&self) -> bool {
        !self.frozen
    }

    pub fn shape(&self) -> (usize, usize) {
        self.value.shape()
    }

    /// Accumulated gradient; zeros when nothing has been accumulated.
    pub fn gradient(&self) -> Tensor2D {
        self.grad
            .clone()
            .unwrap_or_else(|| Tensor2D::zeros(self.value.rows(), self.value.cols()))
    }

    pub fn gradient_ref(&self) -> Option<&Tensor2D> {
        self.grad.as_ref()
    }

    /// Adds `g` into the gradient buffer. Frozen parameters ignore it.
    pub fn accumulate(&mut self, g: &Tensor2D) -> Result<()> {
        if g.shape() != self.value.shape() {
            return Err(Error::Dimension(format!(
                "gradient {:?} for parameter {} of shape {:?}",
                g.shape(),
                self.name,
                self.value.shape()
            )));
        }
        if self.frozen {
            return Ok(());
        }
        match &mut self.grad {
            Some(buf) => buf.add_assign(g)?,
            None => self.grad = Some(g.clone()),
        }
        Ok(())
    }

    pub fn zero_grad(&mut self) {
        self.grad = None;
    }
}

/// Anything that owns a fixed, ordered list of parameters.
pub trait Parameterized {
    fn parameters(&self) -> Vec<&Parameter>;
    fn parameters_mut(&mut self) -> Vec<&mut Parameter>;

    fn zero_grad(&mut self) {
        for p in self.parameters_mut() {
            p.zero_grad();
        }
    }

    fn parameter_count(&self) -> usize {
        self.parameters().iter().map(|p| p.value.len()).sum()
    }

    /// SHA-256 over parameter names, shapes and value bits, hex encoded.
    fn checksum(&self) -> String {
        let mut h = Sha256::new();
        for p in self.parameters() {
            h.update(p.name.as_bytes());
            h.update((p.value.rows() as u64).to_le_bytes());
            h.update((p.value.cols() as u64).to_le_bytes());
            h.update(p.value.to_le_bytes());
        }
        hex::encode(h.finalize())
    }
}

impl Parameterized for Vec<Parameter> {
    fn parameters(&self) -> Vec<&Parameter> {
        self.iter().collect()
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        self.iter_mut().collect()
    }
}

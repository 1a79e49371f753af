use crate::numerics::Tensor2D;
use crate::{Error, Result};

/// Additive attention bias with entries in `{0, -inf}`.
#[derive(Debug, Clone, PartialEq)]
pub struct MaskMatrix(Tensor2D);

impl MaskMatrix {
    pub fn tensor(&self) -> &Tensor2D {
        &self.0
    }

    pub fn len(&self) -> usize {
        self.0.rows()
    }

    pub fn is_empty(&self) -> bool {
        self.0.rows() == 0
    }

    pub fn is_all_zero(&self) -> bool {
        self.0.as_slice().iter().all(|&v| v == 0.0)
    }
}

/// Mask for transformer layer `layer_index` (1-based) of an adapter layer
/// holding `depth` transformer layers.
///
/// Layers before the last are unmasked. In the last layer, rows inside the
/// entity window `[p_s, p_e]` (markers included) cannot see columns outside it.
pub fn entity_mask(layer_index: usize, depth: usize, p_s: usize, p_e: usize, len: usize) -> Result<MaskMatrix> {
    if !(p_s < p_e && p_e < len) {
        return Err(Error::InvalidSpan(format!(
            "span ({p_s}, {p_e}) for sequence length {len}"
        )));
    }
    if layer_index == 0 || layer_index > depth {
        return Err(Error::Config(format!(
            "layer index {layer_index} outside 1..={depth}"
        )));
    }
    let mut m = Tensor2D::zeros(len, len);
    if layer_index == depth {
        for i in p_s..=p_e {
            for j in (0..p_s).chain(p_e + 1..len) {
                m.set(i, j, f64::NEG_INFINITY);
            }
        }
    }
    Ok(MaskMatrix(m))
}

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{make_param, xavier};
use super::ModelConfig;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{l2_normalize_rows, Parameter, Parameterized, Tensor2D};
use crate::{Error, Result};

/// Fully-connected layer over the marker-position features followed by l2
/// normalization.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub fc_w: Parameter,
    pub fc_b: Parameter,
}

impl Aggregator {
    pub fn new(config: &ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        Ok(Self {
            fc_w: make_param(false, "aggregator.fc_w".into(), xavier(&mut rng, 4 * config.d, config.agg_out)),
            fc_b: make_param(false, "aggregator.fc_b".into(), Tensor2D::zeros(1, config.agg_out)),
        })
    }

    pub fn out_width(&self) -> usize {
        self.fc_w.value.cols()
    }

    /// `v = normalize(FC(H_p[p_s] | H_a[p_s] | H_p[p_e] | H_a[p_e]))` as a 1×agg_out row.
    pub fn forward_on_tape<'a>(&'a self, tape: &mut Tape<'a>, hp: Var, ha: Var, p_s: usize, p_e: usize) -> Result<Var> {
        let h = tape.concat_cols(&[hp, ha])?;
        let rows = tape.value(h).rows();
        if !(p_s < p_e && p_e < rows) {
            return Err(Error::InvalidSpan(format!("span ({p_s}, {p_e}) for sequence length {rows}")));
        }
        let first = tape.select_rows(h, &[p_s])?;
        let second = tape.select_rows(h, &[p_e])?;
        let flat = tape.concat_cols(&[first, second])?;
        let (w, b) = (tape.param(&self.fc_w), tape.param(&self.fc_b));
        let z = tape.linear(flat, w, b)?;
        Ok(tape.l2_normalize(z))
    }
}

impl Parameterized for Aggregator {
    fn parameters(&self) -> Vec<&Parameter> {
        vec![&self.fc_w, &self.fc_b]
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![&mut self.fc_w, &mut self.fc_b]
    }
}

/// Pooled unit vector for pre-training. Exactly one adapter output is
/// expected.
pub fn aggregate_pretrain(hp: &Tensor2D, ha: &[Tensor2D], p_s: usize, p_e: usize, agg: &Aggregator) -> Result<Tensor2D> {
    let ha = match ha {
        [one] => one,
        [] => return Err(Error::MissingAdapter("pre-training pooling needs an adapter output".into())),
        more => {
            return Err(Error::Config(format!(
                "pre-training pooling takes one adapter output, got {}",
                more.len()
            )))
        }
    };
    if hp.shape() != ha.shape() {
        return Err(Error::Dimension(format!("H_p {:?} vs H_a {:?}", hp.shape(), ha.shape())));
    }
    let mut tape = Tape::new();
    let (p, a) = (tape.constant(hp), tape.constant(ha));
    let v = agg.forward_on_tape(&mut tape, p, a, p_s, p_e)?;
    Ok(tape.value(v).clone())
}

/// Backbone features followed by each adapter's output, in attachment order.
pub fn aggregate_finetune(hp: &Tensor2D, ha: &[Tensor2D]) -> Result<Tensor2D> {
    if ha.is_empty() {
        return Err(Error::MissingAdapter("fine-tune fusion needs at least one adapter output".into()));
    }
    let mut parts = vec![hp];
    parts.extend(ha);
    Tensor2D::concat_cols(&parts)
}

/// `H_p + l2_normalize_rows(H_a)`.
pub fn aggregate_feature_extractor(hp: &Tensor2D, ha: &Tensor2D) -> Result<Tensor2D> {
    hp.add(&l2_normalize_rows(ha))
}

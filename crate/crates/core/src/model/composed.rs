use std::collections::BTreeSet;

use super::{aggregate_finetune, Backbone, DomainModule};
use crate::numerics::{Parameter, Parameterized, Tensor2D};
use crate::{Error, Result};

/// Outputs of one forward pass.
#[derive(Debug, Clone, PartialEq)]
pub struct Features {
    pub h_p: Tensor2D,
    /// One entry per attached adapter, in attachment order.
    pub h_a: Vec<Tensor2D>,
    /// Pooled vector, present only when exactly one adapter is attached.
    pub v: Option<Tensor2D>,
}

impl Features {
    /// Backbone features followed by every adapter output.
    pub fn concatenated(&self) -> Result<Tensor2D> {
        aggregate_finetune(&self.h_p, &self.h_a)
    }
}

/// A frozen backbone with independently trained domain modules attached.
#[derive(Debug, Clone, PartialEq)]
pub struct PicsoModel {
    pub backbone: Backbone,
    pub modules: Vec<DomainModule>,
}

/// Attaches `modules` to `backbone` in the given order after checking every
/// adapter was built for the backbone's configuration.
pub fn compose_adapters(backbone: Backbone, modules: Vec<DomainModule>) -> Result<PicsoModel> {
    let expected = backbone.config.adapter_signature();
    let mut seen = BTreeSet::new();
    for m in &modules {
        if m.adapter.signature != expected {
            return Err(Error::Incompatible(format!(
                "adapter '{}' was built for {:?}, backbone expects {:?}",
                m.domain(),
                m.adapter.signature,
                expected
            )));
        }
        if m.aggregator.fc_w.shape() != (4 * expected.d, expected.agg_out) {
            return Err(Error::Incompatible(format!(
                "aggregator of '{}' has shape {:?}",
                m.domain(),
                m.aggregator.fc_w.shape()
            )));
        }
        if !seen.insert(m.domain().to_string()) {
            return Err(Error::Incompatible(format!("domain '{}' attached twice", m.domain())));
        }
    }
    Ok(PicsoModel { backbone, modules })
}

impl PicsoModel {
    pub fn module(&self, domain: &str) -> Option<&DomainModule> {
        self.modules.iter().find(|m| m.domain() == domain)
    }

    pub fn domains(&self) -> Vec<&str> {
        self.modules.iter().map(|m| m.domain()).collect()
    }

    /// Runs every adapter against shared backbone states.
    pub fn features_from_states(&self, states: &[Tensor2D], p_s: usize, p_e: usize) -> Result<Features> {
        let h_p = states
            .last()
            .ok_or_else(|| Error::Dimension("no backbone states".into()))?
            .clone();
        let h_a = self
            .modules
            .iter()
            .map(|m| m.adapter.forward(states, p_s, p_e))
            .collect::<Result<Vec<_>>>()?;
        let v = match self.modules.as_slice() {
            [only] => Some(only.pooled(states, p_s, p_e)?),
            _ => None,
        };
        Ok(Features { h_p, h_a, v })
    }

    pub fn features(&self, tokens: &[usize], p_s: usize, p_e: usize) -> Result<Features> {
        let states = self.backbone.forward(tokens)?;
        self.features_from_states(&states, p_s, p_e)
    }
}

impl Parameterized for PicsoModel {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.backbone.parameters();
        for m in &self.modules {
            v.extend(m.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.backbone.parameters_mut();
        for m in &mut self.modules {
            v.extend(m.parameters_mut());
        }
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;

    fn cfg() -> ModelConfig {
        ModelConfig {
            d: 8,
            n_layers: 3,
            heads: 2,
            ffn_dim: 16,
            max_len: 12,
            vocab_size: 20,
            adapter_positions: vec![0, 2],
            adapter_depth: 2,
            bottleneck: 4,
            agg_out: 6,
            backbone_seed: 2,
        }
    }

    #[test]
    fn single_module_matches_direct_calls() {
        let c = cfg();
        let a = DomainModule::new(&c, "a", 1).unwrap();
        let model = compose_adapters(Backbone::new(&c).unwrap(), vec![a.clone()]).unwrap();
        let tokens = [5, 2, 6, 7, 3, 9];
        let f = model.features(&tokens, 1, 4).unwrap();
        let states = model.backbone.forward(&tokens).unwrap();
        assert_eq!(f.h_a, vec![a.adapter.forward(&states, 1, 4).unwrap()]);
        assert_eq!(f.v, Some(a.pooled(&states, 1, 4).unwrap()));
        assert_eq!(f.concatenated().unwrap().shape(), (6, 16));
    }

    #[test]
    fn order_only_changes_concat_order() {
        let c = cfg();
        let (a, b) = (DomainModule::new(&c, "a", 1).unwrap(), DomainModule::new(&c, "b", 2).unwrap());
        let bb = Backbone::new(&c).unwrap();
        let ab = compose_adapters(bb.clone(), vec![a.clone(), b.clone()]).unwrap();
        let ba = compose_adapters(bb, vec![b, a]).unwrap();
        let f1 = ab.features(&[5, 2, 6, 3], 1, 3).unwrap();
        let f2 = ba.features(&[5, 2, 6, 3], 1, 3).unwrap();
        assert_eq!(f1.h_a[0], f2.h_a[1]);
        assert_eq!(f1.h_a[1], f2.h_a[0]);
        assert!(f1.v.is_none());
        assert_eq!(f1.concatenated().unwrap().shape(), (4, 24));
    }

    #[test]
    fn rejects_mismatched_config() {
        let c = cfg();
        let mut other = c.clone();
        other.bottleneck = 2;
        let m = DomainModule::new(&other, "x", 0).unwrap();
        let err = compose_adapters(Backbone::new(&c).unwrap(), vec![m]).unwrap_err();
        assert!(matches!(err, Error::Incompatible(_)));
        let a = DomainModule::new(&c, "a", 0).unwrap();
        assert!(compose_adapters(Backbone::new(&c).unwrap(), vec![a.clone(), a]).is_err());
    }
}

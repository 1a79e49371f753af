use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::layers::{make_param, xavier, TransformerLayer};
use super::{entity_mask, AdapterSignature, Aggregator, ModelConfig};
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Parameter, Parameterized, Tensor2D};
use crate::{Error, Result};

/// One adapter layer: down-projection to the bottleneck, `N` transformer
/// layers at bottleneck width, up-projection back to `d`, plus a residual
/// from the layer input.
#[derive(Debug, Clone, PartialEq)]
pub struct AdapterLayer {
    pub down_w: Parameter,
    pub down_b: Parameter,
    pub blocks: Vec<TransformerLayer>,
    pub up_w: Parameter,
    pub up_b: Parameter,
}

/// Entity-aware adapter attached to a frozen backbone at fixed layer
/// positions. Only the last transformer layer of each adapter layer applies
/// the entity mask.
#[derive(Debug, Clone, PartialEq)]
pub struct EntityAwareAdapter {
    pub domain: String,
    pub signature: AdapterSignature,
    pub layers: Vec<AdapterLayer>,
}

/// Tape handles produced by an adapter forward pass.
#[derive(Debug, Clone)]
pub struct AdapterTrace {
    /// Final adapter output `H_a`.
    pub output: Var,
    /// Output of each adapter layer.
    pub layer_outputs: Vec<Var>,
    /// Per adapter layer, per transformer layer, per head attention maps.
    pub attention: Vec<Vec<Vec<Var>>>,
}

impl EntityAwareAdapter {
    pub fn new(config: &ModelConfig, domain: &str, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let (d, b) = (config.d, config.bottleneck);
        let layers = (0..config.adapter_layers())
            .map(|k| {
                let p = |n: &str, v: Tensor2D| make_param(false, format!("adapter.{k}.{n}"), v);
                let down_w = p("down_w", xavier(&mut rng, d, b));
                let down_b = p("down_b", Tensor2D::zeros(1, b));
                let blocks = (0..config.adapter_depth)
                    .map(|n| {
                        TransformerLayer::new(
                            &format!("adapter.{k}.block{n}"),
                            b,
                            config.adapter_ffn_dim(),
                            config.heads,
                            false,
                            &mut rng,
                        )
                    })
                    .collect();
                let up_w = p("up_w", xavier(&mut rng, b, d));
                let up_b = p("up_b", Tensor2D::zeros(1, d));
                AdapterLayer {
                    down_w,
                    down_b,
                    blocks,
                    up_w,
                    up_b,
                }
            })
            .collect();
        Ok(Self {
            domain: domain.to_string(),
            signature: config.adapter_signature(),
            layers,
        })
    }

    /// Runs the adapter over cached backbone states `[H^0, ..., H^L]`.
    ///
    /// Adapter layer `k` reads `H^{pos_k}` plus the previous adapter layer's
    /// output (nothing for the first layer).
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        states: &'a [Tensor2D],
        p_s: usize,
        p_e: usize,
    ) -> Result<AdapterTrace> {
        let positions = &self.signature.adapter_positions;
        let Some(&deepest) = positions.last() else {
            return Err(Error::Config("adapter without positions".into()));
        };
        if deepest >= states.len() {
            return Err(Error::Config(format!(
                "adapter reads backbone layer {deepest} but only {} states exist",
                states.len()
            )));
        }
        let l = states[0].rows();
        let depth = self.signature.adapter_depth;
        let masks = (1..=depth)
            .map(|n| entity_mask(n, depth, p_s, p_e, l))
            .collect::<Result<Vec<_>>>()?;

        let mut prev: Option<Var> = None;
        let mut layer_outputs = Vec::with_capacity(self.layers.len());
        let mut attention = Vec::with_capacity(self.layers.len());
        for (layer, &pos) in self.layers.iter().zip(positions) {
            let backbone_state = tape.constant(&states[pos]);
            let input = match prev {
                Some(p) => tape.add(backbone_state, p)?,
                None => backbone_state,
            };
            let (dw, db) = (tape.param(&layer.down_w), tape.param(&layer.down_b));
            let mut h = tape.linear(input, dw, db)?;
            let mut maps = Vec::with_capacity(layer.blocks.len());
            for (block, mask) in layer.blocks.iter().zip(&masks) {
                let (out, probs) = block.forward_on_tape(tape, h, Some(mask.tensor()))?;
                h = out;
                maps.push(probs);
            }
            let (uw, ub) = (tape.param(&layer.up_w), tape.param(&layer.up_b));
            let up = tape.linear(h, uw, ub)?;
            let out = tape.add(input, up)?;
            layer_outputs.push(out);
            attention.push(maps);
            prev = Some(out);
        }
        Ok(AdapterTrace {
            output: prev.expect("at least one adapter layer"),
            layer_outputs,
            attention,
        })
    }

    /// `H_a` for one sequence, given its backbone states.
    pub fn forward(&self, states: &[Tensor2D], p_s: usize, p_e: usize) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let trace = self.forward_on_tape(&mut tape, states, p_s, p_e)?;
        Ok(tape.value(trace.output).clone())
    }
}

impl Parameterized for EntityAwareAdapter {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = Vec::new();
        for l in &self.layers {
            v.push(&l.down_w);
            v.push(&l.down_b);
            for b in &l.blocks {
                v.extend(b.parameters());
            }
            v.push(&l.up_w);
            v.push(&l.up_b);
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = Vec::new();
        for l in &mut self.layers {
            v.push(&mut l.down_w);
            v.push(&mut l.down_b);
            for b in &mut l.blocks {
                v.extend(b.parameters_mut());
            }
            v.push(&mut l.up_w);
            v.push(&mut l.up_b);
        }
        v
    }
}

/// An adapter and the aggregator it was pre-trained with; the unit of
/// training for one domain.
#[derive(Debug, Clone, PartialEq)]
pub struct DomainModule {
    pub adapter: EntityAwareAdapter,
    pub aggregator: Aggregator,
}

impl DomainModule {
    pub fn new(config: &ModelConfig, domain: &str, seed: u64) -> Result<Self> {
        Ok(Self {
            adapter: EntityAwareAdapter::new(config, domain, seed)?,
            aggregator: Aggregator::new(config, seed.wrapping_add(0x9e37_79b9_7f4a_7c15))?,
        })
    }

    pub fn domain(&self) -> &str {
        &self.adapter.domain
    }

    /// Pooled unit vector `v` on a tape, from cached backbone states.
    pub fn pooled_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        states: &'a [Tensor2D],
        p_s: usize,
        p_e: usize,
    ) -> Result<Var> {
        let trace = self.adapter.forward_on_tape(tape, states, p_s, p_e)?;
        let hp = tape.constant(states.last().expect("backbone states"));
        self.aggregator.forward_on_tape(tape, hp, trace.output, p_s, p_e)
    }

    pub fn pooled(&self, states: &[Tensor2D], p_s: usize, p_e: usize) -> Result<Tensor2D> {
        let mut tape = Tape::new();
        let v = self.pooled_on_tape(&mut tape, states, p_s, p_e)?;
        Ok(tape.value(v).clone())
    }
}

impl Parameterized for DomainModule {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = self.adapter.parameters();
        v.extend(self.aggregator.parameters());
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = self.adapter.parameters_mut();
        v.extend(self.aggregator.parameters_mut());
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{oracle, Backbone};

    fn tiny() -> ModelConfig {
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
            backbone_seed: 1,
        }
    }

    #[test]
    fn trainable_and_shape() {
        let cfg = tiny();
        let a = EntityAwareAdapter::new(&cfg, "general", 0).unwrap();
        assert!(a.parameters().iter().all(|p| p.is_trainable()));
        let b = Backbone::new(&cfg).unwrap();
        let states = b.forward(&[5, 2, 6, 7, 3, 9]).unwrap();
        let ha = a.forward(&states, 1, 4).unwrap();
        assert_eq!(ha.shape(), (6, 8));
        assert!(ha.all_finite());
    }

    #[test]
    fn matches_scalar_oracle() {
        let cfg = tiny();
        let a = EntityAwareAdapter::new(&cfg, "general", 4).unwrap();
        let b = Backbone::new(&cfg).unwrap();
        let states = b.forward(&[5, 6, 2, 7, 8, 3, 9]).unwrap();
        let got = a.forward(&states, 2, 5).unwrap();
        let want = oracle::adapter(&a, &states, &cfg.adapter_positions, 2, 5);
        assert!(got.max_abs_diff(&oracle::to_tensor(&want)) <= 1e-10);
    }

    #[test]
    fn zero_up_projection_passes_inputs_through() {
        let cfg = tiny();
        let mut a = EntityAwareAdapter::new(&cfg, "general", 2).unwrap();
        for l in &mut a.layers {
            l.up_w.value = Tensor2D::zeros(cfg.bottleneck, cfg.d);
            l.up_b.value = Tensor2D::zeros(1, cfg.d);
        }
        let b = Backbone::new(&cfg).unwrap();
        let states = b.forward(&[5, 2, 6, 3, 9]).unwrap();
        let ha = a.forward(&states, 1, 3).unwrap();
        let want = states[0].add(&states[2]).unwrap();
        assert_eq!(ha, want);
        // the backbone itself is untouched by the ablation
        assert_eq!(b.forward(&[5, 2, 6, 3, 9]).unwrap(), states);
    }

    #[test]
    fn last_block_entity_rows_see_only_the_span() {
        let cfg = tiny();
        let a = EntityAwareAdapter::new(&cfg, "general", 5).unwrap();
        let block = &a.layers[0].blocks[1];
        let (p_s, p_e, l) = (2, 4, 7);
        let mask = entity_mask(2, 2, p_s, p_e, l).unwrap();
        let h = Tensor2D::from_vec(l, 4, (0..28).map(|i| (i as f64 * 0.37).sin()).collect()).unwrap();
        let mut h2 = h.clone();
        for c in 0..4 {
            h2.set(0, c, 3.0);
            h2.set(6, c, -2.0);
        }
        let run = |x: &Tensor2D| {
            let mut t = Tape::new();
            let v = t.constant(x);
            let (o, _) = block.forward_on_tape(&mut t, v, Some(mask.tensor())).unwrap();
            t.value(o).clone()
        };
        let (o1, o2) = (run(&h), run(&h2));
        for i in p_s..=p_e {
            assert_eq!(o1.row(i), o2.row(i));
        }
        assert_ne!(o1.row(1), o2.row(1));

        // an unmasked first block lets entity rows react to the context
        let first = &a.layers[0].blocks[0];
        let m1 = entity_mask(1, 2, p_s, p_e, l).unwrap();
        let run1 = |x: &Tensor2D| {
            let mut t = Tape::new();
            let v = t.constant(x);
            let (o, _) = first.forward_on_tape(&mut t, v, Some(m1.tensor())).unwrap();
            t.value(o).clone()
        };
        assert_ne!(run1(&h).row(3), run1(&h2).row(3));
    }

    #[test]
    fn span_errors_propagate() {
        let cfg = tiny();
        let a = EntityAwareAdapter::new(&cfg, "general", 0).unwrap();
        let b = Backbone::new(&cfg).unwrap();
        let states = b.forward(&[5, 2, 6]).unwrap();
        assert!(a.forward(&states, 1, 3).is_err());
        assert!(a.forward(&states[..2], 0, 2).is_err());
    }
}

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::layers::{TransformerLayer, LN_EPS};
use super::ModelConfig;
use crate::numerics::tape::Tape;
use crate::numerics::{layer_norm_with_cache, Parameter, Parameterized, Tensor2D};
use crate::{Error, Result};

/// Position embeddings are drawn at this fraction of the token embedding
/// scale. At equal scale the `<e>`/`</e>` rows, which are identical tokens in
/// every instance, are dominated by where they sit rather than by what
/// surrounds them.
const POSITION_SCALE: f64 = 0.1;

/// Frozen encoder: token and learned position embeddings, embedding layer
/// norm, then `n_layers` post-LN transformer layers.
#[derive(Debug, Clone, PartialEq)]
pub struct Backbone {
    pub config: ModelConfig,
    pub token_embedding: Parameter,
    pub position_embedding: Parameter,
    pub emb_ln_g: Parameter,
    pub emb_ln_b: Parameter,
    pub layers: Vec<TransformerLayer>,
}

impl Backbone {
    /// Seeded random initialization; every parameter is frozen.
    pub fn new(config: &ModelConfig) -> Result<Self> {
        config.validate()?;
        let mut rng = ChaCha8Rng::seed_from_u64(config.backbone_seed);
        let mut uniform = |r: usize, c: usize| {
            let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
            Tensor2D::from_vec(r, c, data).expect("shape")
        };
        let token_embedding = Parameter::frozen("backbone.tok_emb", uniform(config.vocab_size, config.d));
        let position_embedding =
            Parameter::frozen("backbone.pos_emb", uniform(config.max_len, config.d).scale(POSITION_SCALE));
        let layers = (0..config.n_layers)
            .map(|i| {
                TransformerLayer::new(
                    &format!("backbone.layer{i}"),
                    config.d,
                    config.ffn_dim,
                    config.heads,
                    true,
                    &mut rng,
                )
            })
            .collect();
        Ok(Self {
            config: config.clone(),
            token_embedding,
            position_embedding,
            emb_ln_g: Parameter::frozen("backbone.emb_ln_g", Tensor2D::filled(1, config.d, 1.0)),
            emb_ln_b: Parameter::frozen("backbone.emb_ln_b", Tensor2D::zeros(1, config.d)),
            layers,
        })
    }

    /// Embedding output: `LN(tok[ids] + pos[0..l])`.
    pub fn embed(&self, tokens: &[usize]) -> Result<Tensor2D> {
        let l = tokens.len();
        if l == 0 {
            return Err(Error::Dimension("empty token sequence".into()));
        }
        if l > self.config.max_len {
            return Err(Error::TooLong {
                len: l,
                max_len: self.config.max_len,
            });
        }
        if let Some(&bad) = tokens.iter().find(|&&t| t >= self.config.vocab_size) {
            return Err(Error::TokenOutOfRange {
                id: bad,
                vocab_size: self.config.vocab_size,
            });
        }
        let tok = self.token_embedding.value.select_rows(tokens)?;
        let positions: Vec<usize> = (0..l).collect();
        let pos = self.position_embedding.value.select_rows(&positions)?;
        let (h, _) = layer_norm_with_cache(&tok.add(&pos)?, &self.emb_ln_g.value, &self.emb_ln_b.value, LN_EPS)?;
        Ok(h)
    }

    /// Hidden states `[H^0, ..., H^n_layers]`; `H^0` is the embedding output
    /// and the last entry is the backbone feature `H_p`.
    pub fn forward(&self, tokens: &[usize]) -> Result<Vec<Tensor2D>> {
        let h0 = self.embed(tokens)?;
        let mut states = Vec::with_capacity(self.layers.len() + 1);
        states.push(h0);
        for layer in &self.layers {
            let mut tape = Tape::new();
            let x = tape.constant(states.last().expect("nonempty"));
            let (out, _) = layer.forward_on_tape(&mut tape, x, None)?;
            let next = tape.value(out).clone();
            drop(tape);
            states.push(next);
        }
        Ok(states)
    }
}

impl Parameterized for Backbone {
    fn parameters(&self) -> Vec<&Parameter> {
        let mut v = vec![
            &self.token_embedding,
            &self.position_embedding,
            &self.emb_ln_g,
            &self.emb_ln_b,
        ];
        for l in &self.layers {
            v.extend(l.parameters());
        }
        v
    }

    fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        let mut v = vec![
            &mut self.token_embedding,
            &mut self.position_embedding,
            &mut self.emb_ln_g,
            &mut self.emb_ln_b,
        ];
        for l in &mut self.layers {
            v.extend(l.parameters_mut());
        }
        v
    }
}

//! Post-layer-norm transformer layer and multi-head masked self-attention.

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use super::MaskMatrix;
use crate::numerics::tape::{Tape, Var};
use crate::numerics::{Parameter, Tensor2D};
use crate::{Error, Result};

pub(crate) const LN_EPS: f64 = 1e-12;

/// Uniform Xavier/Glorot initialization.
pub(crate) fn xavier(rng: &mut ChaCha8Rng, rows: usize, cols: usize) -> Tensor2D {
    let a = (6.0 / (rows + cols) as f64).sqrt();
    let data = (0..rows * cols).map(|_| rng.gen_range(-a..a)).collect();
    Tensor2D::from_vec(rows, cols, data).expect("shape")
}

pub(crate) fn make_param(frozen: bool, name: String, value: Tensor2D) -> Parameter {
    if frozen {
        Parameter::frozen(name, value)
    } else {
        Parameter::trainable(name, value)
    }
}

/// Multi-head attention on a tape: per head `softmax(Q_h K_h^T / sqrt(d_k) + M) V_h`,
/// heads concatenated back to the input width. The same mask applies to
/// every head. Returns the output and each head's attention distribution.
pub fn attention_on_tape(
    tape: &mut Tape<'_>,
    x: Var,
    wq: Var,
    wk: Var,
    wv: Var,
    mask: Option<&Tensor2D>,
    heads: usize,
) -> Result<(Var, Vec<Var>)> {
    let width = tape.value(wq).cols();
    if heads == 0 || width % heads != 0 {
        return Err(Error::Dimension(format!("width {width} not divisible by {heads} heads")));
    }
    let dk = width / heads;
    let scale = 1.0 / (dk as f64).sqrt();
    let q = tape.matmul(x, wq)?;
    let k = tape.matmul(x, wk)?;
    let v = tape.matmul(x, wv)?;
    let mut outs = Vec::with_capacity(heads);
    let mut probs = Vec::with_capacity(heads);
    for h in 0..heads {
        let (a, b) = (h * dk, (h + 1) * dk);
        let (qh, kh, vh) = if heads == 1 {
            (q, k, v)
        } else {
            (tape.slice_cols(q, a, b)?, tape.slice_cols(k, a, b)?, tape.slice_cols(v, a, b)?)
        };
        let scores = tape.matmul_t(qh, kh)?;
        let scores = tape.scale(scores, scale);
        let p = tape.softmax(scores, mask)?;
        outs.push(tape.matmul(p, vh)?);
        probs.push(p);
    }
    let out = if heads == 1 { outs[0] } else { tape.concat_cols(&outs)? };
    Ok((out, probs))
}

/// Output of [`masked_attention`]: attended values plus per-head attention
/// distributions (`l x l`, rows sum to one).
#[derive(Debug, Clone)]
pub struct AttentionOutput {
    pub output: Tensor2D,
    pub probs: Vec<Tensor2D>,
}

/// Self-attention with an additive entity mask.
pub fn masked_attention(
    h: &Tensor2D,
    wq: &Parameter,
    wk: &Parameter,
    wv: &Parameter,
    mask: &MaskMatrix,
    heads: usize,
) -> Result<AttentionOutput> {
    let mut tape = Tape::new();
    let x = tape.constant(h);
    let (q, k, v) = (tape.param(wq), tape.param(wk), tape.param(wv));
    let (out, probs) = attention_on_tape(&mut tape, x, q, k, v, Some(mask.tensor()), heads)?;
    Ok(AttentionOutput {
        output: tape.value(out).clone(),
        probs: probs.iter().map(|&p| tape.value(p).clone()).collect(),
    })
}

/// BERT-style encoder layer: attention and feed-forward sublayers, each
/// followed by residual addition and layer norm.
#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub heads: usize,
    pub wq: Parameter,
    pub wk: Parameter,
    pub wv: Parameter,
    pub wo: Parameter,
    pub bo: Parameter,
    pub ln1_g: Parameter,
    pub ln1_b: Parameter,
    pub w1: Parameter,
    pub b1: Parameter,
    pub w2: Parameter,
    pub b2: Parameter,
    pub ln2_g: Parameter,
    pub ln2_b: Parameter,
}

impl TransformerLayer {
    pub fn new(
        prefix: &str,
        width: usize,
        ffn: usize,
        heads: usize,
        frozen: bool,
        rng: &mut ChaCha8Rng,
    ) -> Self {
        let p = |n: &str, v: Tensor2D| make_param(frozen, format!("{prefix}.{n}"), v);
        Self {
            heads,
            wq: p("wq", xavier(rng, width, width)),
            wk: p("wk", xavier(rng, width, width)),
            wv: p("wv", xavier(rng, width, width)),
            wo: p("wo", xavier(rng, width, width)),
            bo: p("bo", Tensor2D::zeros(1, width)),
            ln1_g: p("ln1_g", Tensor2D::filled(1, width, 1.0)),
            ln1_b: p("ln1_b", Tensor2D::zeros(1, width)),
            w1: p("w1", xavier(rng, width, ffn)),
            b1: p("b1", Tensor2D::zeros(1, ffn)),
            w2: p("w2", xavier(rng, ffn, width)),
            b2: p("b2", Tensor2D::zeros(1, width)),
            ln2_g: p("ln2_g", Tensor2D::filled(1, width, 1.0)),
            ln2_b: p("ln2_b", Tensor2D::zeros(1, width)),
        }
    }

    pub fn parameters(&self) -> Vec<&Parameter> {
        vec![
            &self.wq, &self.wk, &self.wv, &self.wo, &self.bo, &self.ln1_g, &self.ln1_b, &self.w1,
            &self.b1, &self.w2, &self.b2, &self.ln2_g, &self.ln2_b,
        ]
    }

    pub fn parameters_mut(&mut self) -> Vec<&mut Parameter> {
        vec![
            &mut self.wq,
            &mut self.wk,
            &mut self.wv,
            &mut self.wo,
            &mut self.bo,
            &mut self.ln1_g,
            &mut self.ln1_b,
            &mut self.w1,
            &mut self.b1,
            &mut self.w2,
            &mut self.b2,
            &mut self.ln2_g,
            &mut self.ln2_b,
        ]
    }

    /// Runs the layer on `x`, returning the output and the attention
    /// distributions of each head.
    pub fn forward_on_tape<'a>(
        &'a self,
        tape: &mut Tape<'a>,
        x: Var,
        mask: Option<&Tensor2D>,
    ) -> Result<(Var, Vec<Var>)> {
        let (wq, wk, wv) = (tape.param(&self.wq), tape.param(&self.wk), tape.param(&self.wv));
        let (att, probs) = attention_on_tape(tape, x, wq, wk, wv, mask, self.heads)?;
        let (wo, bo) = (tape.param(&self.wo), tape.param(&self.bo));
        let att = tape.linear(att, wo, bo)?;
        let res = tape.add(x, att)?;
        let (g1, b1) = (tape.param(&self.ln1_g), tape.param(&self.ln1_b));
        let h1 = tape.layer_norm(res, g1, b1, LN_EPS)?;

        let (w1, bb1) = (tape.param(&self.w1), tape.param(&self.b1));
        let f = tape.linear(h1, w1, bb1)?;
        let f = tape.gelu(f);
        let (w2, bb2) = (tape.param(&self.w2), tape.param(&self.b2));
        let f = tape.linear(f, w2, bb2)?;
        let res = tape.add(h1, f)?;
        let (g2, b2) = (tape.param(&self.ln2_g), tape.param(&self.ln2_b));
        let out = tape.layer_norm(res, g2, b2, LN_EPS)?;
        Ok((out, probs))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::entity_mask;
    use rand::SeedableRng;

    fn rand_t(rng: &mut ChaCha8Rng, r: usize, c: usize) -> Tensor2D {
        let data = (0..r * c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2D::from_vec(r, c, data).unwrap()
    }

    /// Straight scalar evaluation of single-head masked attention.
    fn scalar_attention(h: &Tensor2D, wq: &Tensor2D, wk: &Tensor2D, wv: &Tensor2D, m: &Tensor2D) -> Tensor2D {
        let l = h.rows();
        let w = wq.cols();
        let proj = |wm: &Tensor2D, i: usize, c: usize| -> f64 {
            (0..h.cols()).map(|k| h.get(i, k) * wm.get(k, c)).sum()
        };
        let mut out = Tensor2D::zeros(l, w);
        for i in 0..l {
            let mut weights = vec![0.0; l];
            for (j, wt) in weights.iter_mut().enumerate() {
                let dotp: f64 = (0..w).map(|c| proj(wq, i, c) * proj(wk, j, c)).sum();
                let s = dotp / (w as f64).sqrt() + m.get(i, j);
                *wt = s.exp();
            }
            let z: f64 = weights.iter().sum();
            for c in 0..w {
                let acc: f64 = (0..l).map(|j| weights[j] / z * proj(wv, j, c)).sum();
                out.set(i, c, acc);
            }
        }
        out
    }

    #[test]
    fn four_token_single_head_matches_scalar_oracle() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let h = rand_t(&mut rng, 4, 2);
        let (wq, wk, wv) = (rand_t(&mut rng, 2, 2), rand_t(&mut rng, 2, 2), rand_t(&mut rng, 2, 2));
        let pq = Parameter::trainable("q", wq.clone());
        let pk = Parameter::trainable("k", wk.clone());
        let pv = Parameter::trainable("v", wv.clone());
        for layer in [1, 2] {
            let m = entity_mask(layer, 2, 1, 2, 4).unwrap();
            let got = masked_attention(&h, &pq, &pk, &pv, &m, 1).unwrap();
            let want = scalar_attention(&h, &wq, &wk, &wv, m.tensor());
            assert!(got.output.max_abs_diff(&want) <= 1e-12);
        }
    }

    #[test]
    fn zero_mask_is_plain_attention() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let h = rand_t(&mut rng, 6, 8);
        let ps: Vec<Parameter> = (0..3)
            .map(|i| Parameter::trainable(format!("w{i}"), rand_t(&mut rng, 8, 8)))
            .collect();
        let m = entity_mask(1, 2, 1, 3, 6).unwrap();
        let masked = masked_attention(&h, &ps[0], &ps[1], &ps[2], &m, 2).unwrap();
        let mut tape = Tape::new();
        let x = tape.constant(&h);
        let (q, k, v) = (tape.param(&ps[0]), tape.param(&ps[1]), tape.param(&ps[2]));
        let (plain, _) = attention_on_tape(&mut tape, x, q, k, v, None, 2).unwrap();
        assert_eq!(&masked.output, tape.value(plain));
    }

    #[test]
    fn final_layer_puts_no_mass_outside_span() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let h = rand_t(&mut rng, 7, 8).scale(5.0);
        let ps: Vec<Parameter> = (0..3)
            .map(|i| Parameter::trainable(format!("w{i}"), rand_t(&mut rng, 8, 8)))
            .collect();
        let m = entity_mask(2, 2, 2, 4, 7).unwrap();
        let out = masked_attention(&h, &ps[0], &ps[1], &ps[2], &m, 4).unwrap();
        for p in &out.probs {
            for i in 0..7 {
                let row = p.row(i);
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
                if (2..=4).contains(&i) {
                    let outside: f64 = row[..2].iter().chain(&row[5..]).sum();
                    assert_eq!(outside, 0.0);
                } else {
                    assert!(row.iter().all(|&v| v > 0.0));
                }
            }
        }
    }

    #[test]
    fn heads_must_divide_width() {
        let h = Tensor2D::zeros(3, 6);
        let w = Parameter::trainable("w", Tensor2D::zeros(6, 6));
        let m = entity_mask(1, 1, 0, 2, 3).unwrap();
        assert!(masked_attention(&h, &w, &w, &w, &m, 4).is_err());
    }
}

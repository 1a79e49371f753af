//! Scalar loop re-implementation of the model forward pass, used only by
//! tests as an independent reference for the tensor/tape path.

use super::{Backbone, EntityAwareAdapter, TransformerLayer};
use crate::numerics::Tensor2D;

pub type Mat = Vec<Vec<f64>>;

pub fn rows(t: &Tensor2D) -> Mat {
    (0..t.rows()).map(|r| t.row(r).to_vec()).collect()
}

pub fn to_tensor(m: &Mat) -> Tensor2D {
    Tensor2D::from_rows(m).unwrap()
}

fn linear(x: &Mat, w: &Tensor2D, b: Option<&Tensor2D>) -> Mat {
    x.iter()
        .map(|row| {
            (0..w.cols())
                .map(|c| {
                    let mut acc = b.map_or(0.0, |b| b.get(0, c));
                    for (k, v) in row.iter().enumerate() {
                        acc += v * w.get(k, c);
                    }
                    acc
                })
                .collect()
        })
        .collect()
}

fn layer_norm(x: &Mat, g: &Tensor2D, b: &Tensor2D) -> Mat {
    x.iter()
        .map(|row| {
            let n = row.len() as f64;
            let mean = row.iter().sum::<f64>() / n;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
            row.iter()
                .enumerate()
                .map(|(c, v)| (v - mean) / (var + 1e-12).sqrt() * g.get(0, c) + b.get(0, c))
                .collect()
        })
        .collect()
}

fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + ((2.0 / std::f64::consts::PI).sqrt() * (x + 0.044715 * x.powi(3))).tanh())
}

fn add(a: &Mat, b: &Mat) -> Mat {
    a.iter()
        .zip(b)
        .map(|(x, y)| x.iter().zip(y).map(|(u, v)| u + v).collect())
        .collect()
}

pub fn attention(x: &Mat, layer: &TransformerLayer, mask: Option<&Mat>) -> Mat {
    let q = linear(x, &layer.wq.value, None);
    let k = linear(x, &layer.wk.value, None);
    let v = linear(x, &layer.wv.value, None);
    let l = x.len();
    let w = q[0].len();
    let dk = w / layer.heads;
    let mut out = vec![vec![0.0; w]; l];
    for h in 0..layer.heads {
        let cols = h * dk..(h + 1) * dk;
        for i in 0..l {
            let mut e = vec![0.0; l];
            for (j, ej) in e.iter_mut().enumerate() {
                let s: f64 = cols.clone().map(|c| q[i][c] * k[j][c]).sum();
                let m = mask.map_or(0.0, |m| m[i][j]);
                *ej = if m == f64::NEG_INFINITY { 0.0 } else { (s / (dk as f64).sqrt()).exp() };
            }
            let z: f64 = e.iter().sum();
            for c in cols.clone() {
                out[i][c] = (0..l).map(|j| e[j] / z * v[j][c]).sum();
            }
        }
    }
    out
}

pub fn transformer_layer(x: &Mat, layer: &TransformerLayer, mask: Option<&Mat>) -> Mat {
    let att = linear(&attention(x, layer, mask), &layer.wo.value, Some(&layer.bo.value));
    let h1 = layer_norm(&add(x, &att), &layer.ln1_g.value, &layer.ln1_b.value);
    let f: Mat = linear(&h1, &layer.w1.value, Some(&layer.b1.value))
        .into_iter()
        .map(|r| r.into_iter().map(gelu).collect())
        .collect();
    let f = linear(&f, &layer.w2.value, Some(&layer.b2.value));
    layer_norm(&add(&h1, &f), &layer.ln2_g.value, &layer.ln2_b.value)
}

pub fn backbone(b: &Backbone, tokens: &[usize]) -> Vec<Mat> {
    let emb: Mat = tokens
        .iter()
        .enumerate()
        .map(|(p, &t)| {
            (0..b.config.d)
                .map(|c| b.token_embedding.value.get(t, c) + b.position_embedding.value.get(p, c))
                .collect()
        })
        .collect();
    let mut states = vec![layer_norm(&emb, &b.emb_ln_g.value, &b.emb_ln_b.value)];
    for layer in &b.layers {
        let next = transformer_layer(states.last().unwrap(), layer, None);
        states.push(next);
    }
    states
}

/// Entity mask written directly from its piecewise definition.
pub fn mask(layer_index: usize, depth: usize, p_s: usize, p_e: usize, l: usize) -> Mat {
    let mut m = vec![vec![0.0; l]; l];
    for (i, row) in m.iter_mut().enumerate() {
        for (j, v) in row.iter_mut().enumerate() {
            let last = layer_index == depth;
            let entity_row = p_s <= i && i <= p_e;
            if last && entity_row && j < p_s {
                *v = f64::NEG_INFINITY;
            } else if last && entity_row && j > p_e {
                *v = f64::NEG_INFINITY;
            }
        }
    }
    m
}

pub fn adapter(a: &EntityAwareAdapter, states: &[Tensor2D], positions: &[usize], p_s: usize, p_e: usize) -> Mat {
    let l = states[0].rows();
    let d = states[0].cols();
    let mut prev = vec![vec![0.0; d]; l];
    for (layer, &pos) in a.layers.iter().zip(positions) {
        let input = add(&rows(&states[pos]), &prev);
        let mut h = linear(&input, &layer.down_w.value, Some(&layer.down_b.value));
        let depth = layer.blocks.len();
        for (n, block) in layer.blocks.iter().enumerate() {
            let m = mask(n + 1, depth, p_s, p_e, l);
            h = transformer_layer(&h, block, Some(&m));
        }
        let up = linear(&h, &layer.up_w.value, Some(&layer.up_b.value));
        prev = add(&input, &up);
    }
    prev
}

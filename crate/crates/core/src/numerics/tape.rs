//! Reverse-mode differentiation over [`Tensor2D`] values.
//!
//! A [`Tape`] records each kernel application in evaluation order. Values of
//! parameters and constant inputs are borrowed, not copied. Frozen
//! parameters enter the tape as constants, so no gradient is ever produced
//! for them.

use std::borrow::Cow;
use std::collections::BTreeMap;

use super::{
    gelu, gelu_grad, layer_norm_with_cache, matmul, matmul_transpose_b, row_norm, softmax_rows,
    LayerNormCache, Parameter, Parameterized, Tensor2D,
};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug)]
enum Op {
    Leaf,
    Param(String),
    MatMul(Var, Var),
    /// `a * b^T`
    MatMulT(Var, Var),
    Add(Var, Var),
    AddRowBias(Var, Var),
    Scale(Var, f64),
    /// Output value holds the softmax probabilities.
    Softmax(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        cache: LayerNormCache,
    },
    Gelu(Var),
    ConcatCols(Vec<Var>),
    SliceCols(Var, usize),
    SelectRows(Var, Vec<usize>),
    L2Normalize(Var),
}

#[derive(Debug)]
struct Node<'a> {
    value: Cow<'a, Tensor2D>,
    op: Op,
    requires_grad: bool,
}

#[derive(Debug, Default)]
pub struct Tape<'a> {
    nodes: Vec<Node<'a>>,
}

impl<'a> Tape<'a> {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor2D {
        &self.nodes[v.0].value
    }

    fn push(&mut self, value: Cow<'a, Tensor2D>, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    pub fn constant(&mut self, t: &'a Tensor2D) -> Var {
        self.push(Cow::Borrowed(t), Op::Leaf, false)
    }

    pub fn constant_owned(&mut self, t: Tensor2D) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, false)
    }

    /// A free input whose gradient is reported by [`Gradients::wrt`].
    pub fn variable(&mut self, t: Tensor2D) -> Var {
        self.push(Cow::Owned(t), Op::Leaf, true)
    }

    pub fn param(&mut self, p: &'a Parameter) -> Var {
        if p.is_frozen() {
            self.constant(&p.value)
        } else {
            self.push(Cow::Borrowed(&p.value), Op::Param(p.name.clone()), true)
        }
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(v), Op::MatMul(a, b), rg))
    }

    pub fn matmul_t(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = matmul_transpose_b(self.value(a), self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(v), Op::MatMulT(a, b), rg))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let v = self.value(a).add(self.value(b))?;
        let rg = self.rg(a) || self.rg(b);
        Ok(self.push(Cow::Owned(v), Op::Add(a, b), rg))
    }

    pub fn add_row_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let v = self.value(x).add_row_bias(self.value(bias))?;
        let rg = self.rg(x) || self.rg(bias);
        Ok(self.push(Cow::Owned(v), Op::AddRowBias(x, bias), rg))
    }

    /// `x * w + b` for a row-major batch `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let y = self.matmul(x, w)?;
        self.add_row_bias(y, b)
    }

    pub fn scale(&mut self, x: Var, s: f64) -> Var {
        let v = self.value(x).scale(s);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Scale(x, s), rg)
    }

    /// Row softmax of `x + mask`. The mask is an additive constant with
    /// entries in `{0, -inf}`.
    pub fn softmax(&mut self, x: Var, mask: Option<&Tensor2D>) -> Result<Var> {
        let probs = match mask {
            Some(m) => softmax_rows(&self.value(x).add(m)?)?,
            None => softmax_rows(self.value(x))?,
        };
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(probs), Op::Softmax(x), rg))
    }

    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Result<Var> {
        let (y, cache) = layer_norm_with_cache(self.value(x), self.value(gain), self.value(bias), eps)?;
        let rg = self.rg(x) || self.rg(gain) || self.rg(bias);
        Ok(self.push(
            Cow::Owned(y),
            Op::LayerNorm {
                x,
                gain,
                bias,
                cache,
            },
            rg,
        ))
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let v = self.value(x).map(gelu);
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::Gelu(x), rg)
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let vals: Vec<&Tensor2D> = parts.iter().map(|&p| self.value(p)).collect();
        let v = Tensor2D::concat_cols(&vals)?;
        let rg = parts.iter().any(|&p| self.rg(p));
        Ok(self.push(Cow::Owned(v), Op::ConcatCols(parts.to_vec()), rg))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, end: usize) -> Result<Var> {
        let v = self.value(x).cols_range(start, end)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(v), Op::SliceCols(x, start), rg))
    }

    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let v = self.value(x).select_rows(idx)?;
        let rg = self.rg(x);
        Ok(self.push(Cow::Owned(v), Op::SelectRows(x, idx.to_vec()), rg))
    }

    pub fn l2_normalize(&mut self, x: Var) -> Var {
        let v = super::l2_normalize_rows(self.value(x));
        let rg = self.rg(x);
        self.push(Cow::Owned(v), Op::L2Normalize(x), rg)
    }

    /// Propagates `seed` (the gradient of a scalar objective with respect to
    /// `output`) back through the tape.
    pub fn backward(&self, output: Var, seed: Tensor2D) -> Result<Gradients> {
        if seed.shape() != self.value(output).shape() {
            return Err(Error::Dimension(format!(
                "backward seed {:?} for output {:?}",
                seed.shape(),
                self.value(output).shape()
            )));
        }
        let mut grads: Vec<Option<Tensor2D>> = vec![None; output.0 + 1];
        grads[output.0] = Some(seed);

        for idx in (0..=output.0).rev() {
            let Some(g) = grads[idx].take() else { continue };
            let node = &self.nodes[idx];
            if !node.requires_grad {
                continue;
            }
            match &node.op {
                Op::Leaf | Op::Param(_) => {
                    grads[idx] = Some(g);
                }
                Op::MatMul(a, b) => {
                    if self.rg(*a) {
                        let ga = matmul_transpose_b(&g, self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.rg(*b) {
                        let gb = matmul(&self.value(*a).transpose(), &g)?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::MatMulT(a, b) => {
                    if self.rg(*a) {
                        let ga = matmul(&g, self.value(*b))?;
                        accumulate(&mut grads, *a, ga)?;
                    }
                    if self.rg(*b) {
                        let gb = matmul(&g.transpose(), self.value(*a))?;
                        accumulate(&mut grads, *b, gb)?;
                    }
                }
                Op::Add(a, b) => {
                    if self.rg(*a) {
                        accumulate(&mut grads, *a, g.clone())?;
                    }
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g)?;
                    }
                }
                Op::AddRowBias(x, b) => {
                    if self.rg(*b) {
                        accumulate(&mut grads, *b, g.sum_rows())?;
                    }
                    if self.rg(*x) {
                        accumulate(&mut grads, *x, g)?;
                    }
                }
                Op::Scale(x, s) => {
                    accumulate(&mut grads, *x, g.scale(*s))?;
                }
                Op::Softmax(x) => {
                    let p = &node.value;
                    let mut gx = Tensor2D::zeros(p.rows(), p.cols());
                    for r in 0..p.rows() {
                        let pr = p.row(r);
                        let gr = g.row(r);
                        let inner: f64 = pr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (o, (pv, gv)) in gx.row_mut(r).iter_mut().zip(pr.iter().zip(gr)) {
                            *o = pv * (gv - inner);
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::LayerNorm {
                    x,
                    gain,
                    bias,
                    cache,
                } => {
                    let z = &cache.normalized;
                    let gv = self.value(*gain);
                    if self.rg(*bias) {
                        accumulate(&mut grads, *bias, g.sum_rows())?;
                    }
                    if self.rg(*gain) {
                        accumulate(&mut grads, *gain, g.mul_elem(z)?.sum_rows())?;
                    }
                    if self.rg(*x) {
                        let n = z.cols() as f64;
                        let mut gx = Tensor2D::zeros(z.rows(), z.cols());
                        for r in 0..z.rows() {
                            let zr = z.row(r);
                            let dz: Vec<f64> = g
                                .row(r)
                                .iter()
                                .zip(gv.as_slice())
                                .map(|(a, b)| a * b)
                                .collect();
                            let mean_dz = dz.iter().sum::<f64>() / n;
                            let mean_dz_z =
                                dz.iter().zip(zr).map(|(a, b)| a * b).sum::<f64>() / n;
                            let is = cache.inv_std[r];
                            for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                                *o = is * (dz[c] - mean_dz - zr[c] * mean_dz_z);
                            }
                        }
                        accumulate(&mut grads, *x, gx)?;
                    }
                }
                Op::Gelu(x) => {
                    let xv = self.value(*x);
                    let gx = g.mul_elem(&xv.map(gelu_grad))?;
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::ConcatCols(parts) => {
                    let mut off = 0;
                    for &p in parts {
                        let w = self.value(p).cols();
                        if self.rg(p) {
                            accumulate(&mut grads, p, g.cols_range(off, off + w)?)?;
                        }
                        off += w;
                    }
                }
                Op::SliceCols(x, start) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for r in 0..g.rows() {
                        gx.row_mut(r)[*start..*start + g.cols()].copy_from_slice(g.row(r));
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::SelectRows(x, idx) => {
                    let xv = self.value(*x);
                    let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for (o, &i) in idx.iter().enumerate() {
                        for (a, b) in gx.row_mut(i).iter_mut().zip(g.row(o)) {
                            *a += b;
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
                Op::L2Normalize(x) => {
                    let xv = self.value(*x);
                    let y = &node.value;
                    let mut gx = Tensor2D::zeros(xv.rows(), xv.cols());
                    for r in 0..xv.rows() {
                        let norm = row_norm(xv.row(r));
                        if norm == 0.0 {
                            continue;
                        }
                        let yr = y.row(r);
                        let gr = g.row(r);
                        let proj: f64 = yr.iter().zip(gr).map(|(a, b)| a * b).sum();
                        for (c, o) in gx.row_mut(r).iter_mut().enumerate() {
                            *o = (gr[c] - yr[c] * proj) / norm;
                        }
                    }
                    accumulate(&mut grads, *x, gx)?;
                }
            }
        }

        let mut by_param = BTreeMap::new();
        let mut leaves = BTreeMap::new();
        for (idx, g) in grads.into_iter().enumerate() {
            let Some(g) = g else { continue };
            match &self.nodes[idx].op {
                Op::Param(name) => {
                    match by_param.get_mut(name) {
                        Some(acc) => Tensor2D::add_assign(acc, &g)?,
                        None => {
                            by_param.insert(name.clone(), g);
                        }
                    }
                }
                Op::Leaf => {
                    leaves.insert(idx, g);
                }
                _ => {}
            }
        }
        Ok(Gradients { by_param, leaves })
    }
}

fn accumulate(grads: &mut [Option<Tensor2D>], v: Var, g: Tensor2D) -> Result<()> {
    match &mut grads[v.0] {
        Some(acc) => acc.add_assign(&g),
        slot @ None => {
            *slot = Some(g);
            Ok(())
        }
    }
}

/// Result of a backward pass: gradients of trainable parameters by name and
/// of free variables by handle.
#[derive(Debug, Default)]
pub struct Gradients {
    by_param: BTreeMap<String, Tensor2D>,
    leaves: BTreeMap<usize, Tensor2D>,
}

impl Gradients {
    pub fn param(&self, name: &str) -> Option<&Tensor2D> {
        self.by_param.get(name)
    }

    pub fn wrt(&self, v: Var) -> Option<&Tensor2D> {
        self.leaves.get(&v.0)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.by_param.keys().map(String::as_str)
    }

    /// Adds every parameter gradient into the matching parameter of `model`.
    pub fn accumulate_into<M: Parameterized + ?Sized>(&self, model: &mut M) -> Result<()> {
        for p in model.parameters_mut() {
            if let Some(g) = self.by_param.get(&p.name) {
                p.accumulate(g)?;
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn random(rows: usize, cols: usize, rng: &mut ChaCha8Rng) -> Tensor2D {
        let data = (0..rows * cols).map(|_| rng.gen_range(-1.0..1.0)).collect();
        Tensor2D::from_vec(rows, cols, data).unwrap()
    }

    /// Scalar objective `sum(out ⊙ probe)` through every op on the tape.
    fn objective(params: &[Parameter], x: &Tensor2D, probe: &Tensor2D, mask: &Tensor2D) -> (f64, Gradients) {
        let mut t = Tape::new();
        let xv = t.constant(x);
        let w = t.param(&params[0]);
        let b = t.param(&params[1]);
        let g = t.param(&params[2]);
        let be = t.param(&params[3]);
        let h = t.linear(xv, w, b).unwrap();
        let h = t.gelu(h);
        let s = t.matmul_t(h, h).unwrap();
        let s = t.scale(s, 0.7);
        let p = t.softmax(s, Some(mask)).unwrap();
        let a = t.matmul(p, h).unwrap();
        let a = t.add(a, h).unwrap();
        let n = t.layer_norm(a, g, be, 1e-5).unwrap();
        let left = t.slice_cols(n, 0, 2).unwrap();
        let right = t.slice_cols(n, 2, 4).unwrap();
        let c = t.concat_cols(&[right, left, n]).unwrap();
        let rows = t.select_rows(c, &[0, 2, 0]).unwrap();
        let out = t.l2_normalize(rows);
        let val: f64 = t
            .value(out)
            .as_slice()
            .iter()
            .zip(probe.as_slice())
            .map(|(a, b)| a * b)
            .sum();
        let grads = t.backward(out, probe.clone()).unwrap();
        (val, grads)
    }

    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let x = random(3, 5, &mut rng);
        let mut params = vec![
            Parameter::trainable("w", random(5, 4, &mut rng)),
            Parameter::trainable("b", random(1, 4, &mut rng)),
            Parameter::trainable("g", random(1, 4, &mut rng)),
            Parameter::trainable("be", random(1, 4, &mut rng)),
        ];
        let probe = random(3, 8, &mut rng);
        let mut mask = Tensor2D::zeros(3, 3);
        mask.set(1, 0, f64::NEG_INFINITY);

        let (_, grads) = objective(&params, &x, &probe, &mask);
        grads.accumulate_into(&mut params).unwrap();
        let report = crate::numerics::check_gradient(
            &mut params,
            |p| Ok(objective(p, &x, &probe, &mask).0),
            1e-6,
        )
        .unwrap();
        assert!(report.max_rel_error < 1e-7, "{report:?}");
        assert_eq!(report.checked_elements, 5 * 4 + 4 * 3);
    }

    #[test]
    fn variable_gradient_and_frozen_param() {
        let frozen = Parameter::frozen("f", Tensor2D::filled(2, 2, 2.0));
        let mut t = Tape::new();
        let x = t.variable(Tensor2D::row_vector(&[1.0, -1.0]));
        let f = t.param(&frozen);
        let y = t.matmul(x, f).unwrap();
        let grads = t.backward(y, Tensor2D::row_vector(&[1.0, 1.0])).unwrap();
        assert_eq!(grads.wrt(x).unwrap().as_slice(), &[4.0, 4.0]);
        assert_eq!(grads.names().count(), 0);
    }

    #[test]
    fn shared_parameter_gradients_sum() {
        let p = Parameter::trainable("w", Tensor2D::row_vector(&[3.0]));
        let mut t = Tape::new();
        let a = t.param(&p);
        let b = t.param(&p);
        let y = t.add(a, b).unwrap();
        let g = t.backward(y, Tensor2D::row_vector(&[1.0])).unwrap();
        assert_eq!(g.param("w").unwrap().as_slice(), &[2.0]);
    }
}

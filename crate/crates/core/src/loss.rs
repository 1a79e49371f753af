//! Hard-negative reweighted contrastive objective over a batch of pooled
//! unit vectors, with its analytic gradient.

use serde::{Deserialize, Serialize};

use crate::numerics::{dot, row_norm, Tensor2D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    /// Temperature.
    pub t: f64,
    /// Class prior of a sampled negative actually being a positive.
    pub tau_plus: f64,
    /// Concentration on hard negatives.
    pub beta: f64,
}

impl Default for LossConfig {
    fn default() -> Self {
        Self {
            t: 0.5,
            tau_plus: 0.05,
            beta: 1.0,
        }
    }
}

impl LossConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.t > 0.0 && self.t.is_finite()) {
            return Err(Error::Config(format!("temperature must be positive, got {}", self.t)));
        }
        if !(0.0..1.0).contains(&self.tau_plus) {
            return Err(Error::Config(format!("tau_plus must lie in [0, 1), got {}", self.tau_plus)));
        }
        if !(self.beta >= 0.0 && self.beta.is_finite()) {
            return Err(Error::Config(format!("beta must be >= 0, got {}", self.beta)));
        }
        Ok(())
    }

    /// Lower bound of the negative term, `exp(-1/t)`.
    pub fn floor(&self) -> f64 {
        (-1.0 / self.t).exp()
    }
}

/// Pooled vectors of one batch with their synonym-set ids.
#[derive(Debug, Clone, PartialEq)]
pub struct BatchEmbeddings {
    v: Tensor2D,
    uids: Vec<String>,
}

impl BatchEmbeddings {
    /// Checks `B >= 2`, matching lengths, finiteness and unit-norm rows.
    pub fn new(v: Tensor2D, uids: Vec<String>) -> Result<Self> {
        let b = Self::unnormalized(v, uids)?;
        for r in 0..b.v.rows() {
            let n = row_norm(b.v.row(r));
            if (n - 1.0).abs() > 1e-12 {
                return Err(Error::Dimension(format!("row {r} has norm {n}, expected 1")));
            }
        }
        Ok(b)
    }

    /// Same as [`BatchEmbeddings::new`] without the unit-norm check, for
    /// probing the objective off the sphere.
    pub fn unnormalized(v: Tensor2D, uids: Vec<String>) -> Result<Self> {
        if v.rows() != uids.len() {
            return Err(Error::Dimension(format!("{} rows but {} uids", v.rows(), uids.len())));
        }
        if v.rows() < 2 {
            return Err(Error::EmptyBatch);
        }
        if !v.all_finite() {
            return Err(Error::NonFinite("batch embeddings".into()));
        }
        Ok(Self { v, uids })
    }

    pub fn vectors(&self) -> &Tensor2D {
        &self.v
    }

    pub fn uids(&self) -> &[String] {
        &self.uids
    }

    pub fn len(&self) -> usize {
        self.uids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uids.is_empty()
    }
}

/// Indices `j != i` sharing `uids[i]`.
pub fn positives_of<S: AsRef<str>>(uids: &[S], i: usize) -> Vec<usize> {
    let me = uids[i].as_ref();
    (0..uids.len()).filter(|&j| j != i && uids[j].as_ref() == me).collect()
}

/// Loss of a single anchor given its positive and negative similarities,
/// plus the partial derivatives with respect to each similarity.
#[derive(Debug, Clone, PartialEq)]
pub struct TermParts {
    pub loss: f64,
    pub s_plus: f64,
    pub s_minus: f64,
    pub floored: bool,
    pub d_pos: Vec<f64>,
    pub d_neg: Vec<f64>,
}

/// `log(1 + S⁻/S⁺)` for one anchor. `pos` must be non-empty.
pub fn loss_term(pos: &[f64], neg: &[f64], cfg: &LossConfig) -> TermParts {
    let t = cfg.t;
    let tau = cfg.tau_plus;
    let beta = cfg.beta;
    let n = neg.len() as f64;
    let e_pos: Vec<f64> = pos.iter().map(|s| (s / t).exp()).collect();
    let p: f64 = e_pos.iter().sum();
    let floor = cfg.floor();

    let (s_minus, floored, tilde) = if neg.is_empty() {
        (floor, true, None)
    } else {
        let hard: Vec<f64> = neg.iter().map(|s| ((1.0 + beta) * s / t).exp()).collect();
        let soft: Vec<f64> = neg.iter().map(|s| (beta * s / t).exp()).collect();
        let a: f64 = hard.iter().sum();
        let c: f64 = soft.iter().sum();
        let raw = (-n * tau * p + n * a / c) / (1.0 - tau);
        if raw >= floor {
            (raw, false, Some((hard, soft, a, c)))
        } else {
            (floor, true, None)
        }
    };
    let loss = (s_minus / p).ln_1p();

    let total = p + s_minus;
    let mut d_p = 1.0 / total - 1.0 / p;
    let mut d_neg = vec![0.0; neg.len()];
    if let Some((hard, soft, a, c)) = tilde {
        d_p += -n * tau / ((1.0 - tau) * total);
        let d_tilde = 1.0 / (total * (1.0 - tau));
        for (k, g) in d_neg.iter_mut().enumerate() {
            let num = (1.0 + beta) / t * hard[k] * c - a * beta / t * soft[k];
            *g = d_tilde * n * num / (c * c);
        }
    }
    let d_pos = e_pos.iter().map(|e| d_p * e / t).collect();
    TermParts {
        loss,
        s_plus: p,
        s_minus,
        floored,
        d_pos,
        d_neg,
    }
}

/// Relative weight each negative receives inside the reweighted negative
/// sum, normalized so that all weights are 1 when `beta = 0`.
pub fn hard_negative_weights(neg: &[f64], cfg: &LossConfig) -> Vec<f64> {
    let soft: Vec<f64> = neg.iter().map(|s| (cfg.beta * s / cfg.t).exp()).collect();
    let c: f64 = soft.iter().sum();
    soft.iter().map(|w| neg.len() as f64 * w / c).collect()
}

#[derive(Debug, Clone, PartialEq)]
pub struct LossOutput {
    /// Sum of per-anchor terms.
    pub loss: f64,
    /// Gradient of `loss` with respect to every row of the batch matrix.
    pub grad: Tensor2D,
    /// Per-anchor term, `None` for anchors without a positive.
    pub terms: Vec<Option<f64>>,
}

impl LossOutput {
    pub fn contributing(&self) -> usize {
        self.terms.iter().filter(|t| t.is_some()).count()
    }
}

/// Alternative objectives evaluated through the same batch interface.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub enum Objective {
    HardNegative(LossConfig),
    /// Multi-positive InfoNCE: `-log(S⁺ / (S⁺ + Σ_neg exp(s/t)))`.
    InfoNce { t: f64 },
}

impl Objective {
    pub fn compute(&self, batch: &BatchEmbeddings) -> Result<LossOutput> {
        match self {
            Objective::HardNegative(cfg) => contrastive_loss(batch, cfg),
            Objective::InfoNce { t } => info_nce_loss(batch, *t),
        }
    }
}

pub fn contrastive_loss(batch: &BatchEmbeddings, cfg: &LossConfig) -> Result<LossOutput> {
    cfg.validate()?;
    batch_loss(batch, |pos, neg| loss_term(pos, neg, cfg))
}

pub fn info_nce_loss(batch: &BatchEmbeddings, t: f64) -> Result<LossOutput> {
    if !(t > 0.0 && t.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive, got {t}")));
    }
    batch_loss(batch, |pos, neg| {
        let e_pos: Vec<f64> = pos.iter().map(|s| (s / t).exp()).collect();
        let e_neg: Vec<f64> = neg.iter().map(|s| (s / t).exp()).collect();
        let p: f64 = e_pos.iter().sum();
        let q: f64 = e_neg.iter().sum();
        let total = p + q;
        let d_p = 1.0 / total - 1.0 / p;
        TermParts {
            loss: (q / p).ln_1p(),
            s_plus: p,
            s_minus: q,
            floored: false,
            d_pos: e_pos.iter().map(|e| d_p * e / t).collect(),
            d_neg: e_neg.iter().map(|e| e / (t * total)).collect(),
        }
    })
}

fn batch_loss(batch: &BatchEmbeddings, term: impl Fn(&[f64], &[f64]) -> TermParts) -> Result<LossOutput> {
    let v = &batch.v;
    let b = batch.len();
    let mut grad = Tensor2D::zeros(b, v.cols());
    let mut terms = Vec::with_capacity(b);
    let mut loss = 0.0;
    for i in 0..b {
        let pos_idx = positives_of(&batch.uids, i);
        if pos_idx.is_empty() {
            log::warn!("batch row {i} (uid {}) has no positive and is skipped", batch.uids[i]);
            terms.push(None);
            continue;
        }
        let neg_idx: Vec<usize> = (0..b).filter(|&k| k != i && !pos_idx.contains(&k)).collect();
        let sims = |idx: &[usize]| idx.iter().map(|&j| dot(v.row(i), v.row(j))).collect::<Vec<f64>>();
        let parts = term(&sims(&pos_idx), &sims(&neg_idx));
        if !parts.loss.is_finite() {
            return Err(Error::NonFinite(format!("loss term of batch row {i}")));
        }
        loss += parts.loss;
        terms.push(Some(parts.loss));
        for (idx, d) in [(&pos_idx, &parts.d_pos), (&neg_idx, &parts.d_neg)] {
            for (&j, &g) in idx.iter().zip(d) {
                if g == 0.0 {
                    continue;
                }
                for c in 0..v.cols() {
                    let (vi, vj) = (v.get(i, c), v.get(j, c));
                    grad.row_mut(i)[c] += g * vj;
                    grad.row_mut(j)[c] += g * vi;
                }
            }
        }
    }
    if terms.iter().all(Option::is_none) {
        return Err(Error::EmptyBatch);
    }
    Ok(LossOutput { loss, grad, terms })
}

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{tokenize, Instance, SynsetStore, Vocabulary, UNK};
use crate::{Error, Result};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BalanceConfig {
    /// Surfaces whose count is at or below this quantile of all surface
    /// counts are "low frequency".
    pub quantile: f64,
    /// Probability that an eligible instance gets its surface replaced.
    pub replace_fraction: f64,
    pub seed: u64,
}

impl Default for BalanceConfig {
    fn default() -> Self {
        Self {
            quantile: 0.2,
            replace_fraction: 0.5,
            seed: 0,
        }
    }
}

/// Occurrence count of every marked surface in `instances`.
pub fn surface_counts(instances: &[Instance], vocab: &Vocabulary) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for inst in instances {
        *counts.entry(inst.surface(vocab)).or_insert(0) += 1;
    }
    counts
}

fn quantile_threshold(counts: &BTreeMap<String, usize>, synsets: &SynsetStore, q: f64) -> Option<usize> {
    let mut all: Vec<usize> = counts.values().copied().collect();
    for s in synsets.iter() {
        for surface in s.surfaces() {
            if !counts.contains_key(&surface.to_lowercase()) {
                all.push(0);
            }
        }
    }
    if all.is_empty() {
        return None;
    }
    all.sort_unstable();
    let idx = (q * (all.len() - 1) as f64).floor() as usize;
    Some(all[idx])
}

/// Replaces the marked span of a seeded subset of instances with a
/// low-frequency synonym from the same synset.
///
/// An instance is eligible when its own surface is above the frequency
/// threshold and its synset has another surface at or below it (surfaces
/// never seen count as zero). Corpus size, order and uids are preserved.
pub fn balance_low_frequency(
    instances: Vec<Instance>,
    synsets: &SynsetStore,
    vocab: &Vocabulary,
    surface_counts: &BTreeMap<String, usize>,
    cfg: &BalanceConfig,
) -> Result<Vec<Instance>> {
    if !(cfg.quantile > 0.0 && cfg.quantile < 1.0) {
        return Err(Error::Config(format!("quantile must be in (0, 1), got {}", cfg.quantile)));
    }
    let Some(threshold) = quantile_threshold(surface_counts, synsets, cfg.quantile) else {
        return Ok(instances);
    };
    let count = |s: &str| surface_counts.get(s).copied().unwrap_or(0);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut out = Vec::with_capacity(instances.len());
    for inst in instances {
        let Some(synset) = synsets.get(&inst.uid) else {
            out.push(inst);
            continue;
        };
        let own = inst.surface(vocab);
        if count(&own) <= threshold {
            out.push(inst);
            continue;
        }
        let candidates: Vec<Vec<usize>> = synset
            .surfaces()
            .iter()
            .map(|s| s.to_lowercase())
            .filter(|s| *s != own && count(s) <= threshold)
            .map(|s| tokenize(&s, vocab))
            .filter(|t| !t.is_empty() && !t.contains(&UNK))
            .collect();
        if candidates.is_empty() || rng.gen::<f64>() >= cfg.replace_fraction {
            out.push(inst);
            continue;
        }
        let chosen = &candidates[rng.gen_range(0..candidates.len())];
        let mut tokens = Vec::with_capacity(inst.tokens.len() + chosen.len());
        tokens.extend_from_slice(&inst.tokens[..=inst.p_s]);
        tokens.extend_from_slice(chosen);
        tokens.extend_from_slice(&inst.tokens[inst.p_e..]);
        let p_e = inst.p_s + chosen.len() + 1;
        out.push(Instance::new(inst.uid, tokens, inst.p_s, p_e)?);
    }
    Ok(out)
}

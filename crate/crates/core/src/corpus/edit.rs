use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::{Error, Result};

/// Unit-cost Levenshtein distance over Unicode scalar values.
pub fn levenshtein(a: &str, b: &str) -> usize {
    let a: Vec<char> = a.chars().collect();
    let b: Vec<char> = b.chars().collect();
    if a.is_empty() {
        return b.len();
    }
    let mut prev: Vec<usize> = (0..=b.len()).collect();
    let mut cur = vec![0; b.len() + 1];
    for (i, ca) in a.iter().enumerate() {
        cur[0] = i + 1;
        for (j, cb) in b.iter().enumerate() {
            let sub = prev[j] + usize::from(ca != cb);
            cur[j + 1] = sub.min(prev[j + 1] + 1).min(cur[j] + 1);
        }
        std::mem::swap(&mut prev, &mut cur);
    }
    prev[b.len()]
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct SynonymPair {
    pub a: String,
    pub b: String,
    pub uid: String,
}

/// Drops pairs closer than `min_edit` and keeps at most `cap_per_uid` pairs
/// per uid. The kept subset is the head of a seeded shuffle of each uid's
/// qualifying pairs; output preserves input order.
pub fn filter_pairs(
    pairs: &[SynonymPair],
    min_edit: usize,
    cap_per_uid: usize,
    seed: u64,
) -> Result<Vec<SynonymPair>> {
    if cap_per_uid == 0 {
        return Err(Error::Config("cap_per_uid must be >= 1".into()));
    }
    let mut by_uid: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in pairs.iter().enumerate() {
        if levenshtein(&p.a, &p.b) >= min_edit {
            by_uid.entry(&p.uid).or_default().push(i);
        }
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut keep = vec![false; pairs.len()];
    for idx in by_uid.values_mut() {
        if idx.len() > cap_per_uid {
            idx.shuffle(&mut rng);
            idx.truncate(cap_per_uid);
        }
        for &i in idx.iter() {
            keep[i] = true;
        }
    }
    Ok(pairs
        .iter()
        .zip(keep)
        .filter_map(|(p, k)| k.then(|| p.clone()))
        .collect())
}

use std::collections::BTreeMap;

use log::warn;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use super::Instance;
use crate::{Error, Result};

/// Batches of corpus indices plus the instances left out.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BatchPlan {
    pub batches: Vec<Vec<usize>>,
    /// Indices whose uid occurs once (or that could not be paired).
    pub excluded: Vec<usize>,
}

/// Groups uid-mates so every batched instance has a same-uid partner.
///
/// Equivalent to [`make_grouped_batches`] with groups of two.
pub fn make_batches(corpus: &[Instance], batch_size: usize, seed: u64) -> Result<BatchPlan> {
    make_grouped_batches(corpus, batch_size, 2, seed)
}

/// Each uid's instances are shuffled and cut into groups of `group_size`
/// (capped at `batch_size`). A leftover single instance joins the previous
/// group when that still fits in a batch and is excluded otherwise. Groups
/// are shuffled and packed greedily into batches of at most `batch_size`.
pub fn make_grouped_batches(corpus: &[Instance], batch_size: usize, group_size: usize, seed: u64) -> Result<BatchPlan> {
    if batch_size < 2 {
        return Err(Error::Config(format!("batch size must be >= 2, got {batch_size}")));
    }
    if group_size < 2 {
        return Err(Error::Config(format!("group size must be >= 2, got {group_size}")));
    }
    let group_size = group_size.min(batch_size);
    let mut by_uid: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, inst) in corpus.iter().enumerate() {
        by_uid.entry(&inst.uid).or_default().push(i);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut excluded = Vec::new();
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for members in by_uid.values() {
        if members.len() < 2 {
            excluded.extend_from_slice(members);
            continue;
        }
        let mut m = members.clone();
        m.shuffle(&mut rng);
        let mut chunks: Vec<Vec<usize>> = m.chunks(group_size).map(<[usize]>::to_vec).collect();
        if chunks.last().is_some_and(|c| c.len() == 1) {
            let lone = chunks.pop().unwrap()[0];
            match chunks.last_mut() {
                Some(prev) if prev.len() < batch_size => prev.push(lone),
                _ => excluded.push(lone),
            }
        }
        groups.extend(chunks);
    }
    if groups.is_empty() {
        return Err(Error::NoPositives);
    }
    excluded.sort_unstable();
    if !excluded.is_empty() {
        warn!("{} instance(s) excluded from batching (no uid partner)", excluded.len());
    }
    groups.shuffle(&mut rng);
    let mut batches = Vec::new();
    let mut current: Vec<usize> = Vec::with_capacity(batch_size);
    for g in groups {
        if current.len() + g.len() > batch_size {
            batches.push(std::mem::take(&mut current));
        }
        current.extend(g);
    }
    if !current.is_empty() {
        batches.push(current);
    }
    Ok(BatchPlan { batches, excluded })
}

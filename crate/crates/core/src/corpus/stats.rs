use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{levenshtein, Instance, Vocabulary};

/// Corpus summary in the shape of the usual pre-training corpus table.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct CorpusStats {
    pub uid_count: usize,
    /// Unordered pairs of instances sharing a uid.
    pub synonym_pair_count: usize,
    pub pairs_per_uid: f64,
    /// Mean tokens per instance, markers excluded.
    pub avg_sentence_len: f64,
    /// Mean character edit distance between the marked surfaces of each
    /// synonym pair.
    pub avg_edit_distance: f64,
}

pub fn compute_stats(corpus: &[Instance], vocab: &Vocabulary) -> CorpusStats {
    if corpus.is_empty() {
        return CorpusStats::default();
    }
    // uid -> surface -> count
    let mut groups: BTreeMap<&str, BTreeMap<String, usize>> = BTreeMap::new();
    let mut total_len = 0usize;
    for inst in corpus {
        total_len += inst.tokens.len() - 2;
        *groups
            .entry(&inst.uid)
            .or_default()
            .entry(inst.surface(vocab))
            .or_insert(0) += 1;
    }
    let mut pairs = 0usize;
    let mut dist_sum = 0.0;
    for surfaces in groups.values() {
        let n: usize = surfaces.values().sum();
        pairs += n * (n - 1) / 2;
        let entries: Vec<(&String, &usize)> = surfaces.iter().collect();
        for i in 0..entries.len() {
            for j in i + 1..entries.len() {
                let w = (entries[i].1 * entries[j].1) as f64;
                dist_sum += w * levenshtein(entries[i].0, entries[j].0) as f64;
            }
        }
    }
    let uid_count = groups.len();
    CorpusStats {
        uid_count,
        synonym_pair_count: pairs,
        pairs_per_uid: pairs as f64 / uid_count as f64,
        avg_sentence_len: total_len as f64 / corpus.len() as f64,
        avg_edit_distance: if pairs > 0 { dist_sum / pairs as f64 } else { 0.0 },
    }
}

//! Context-marked synonym corpus: vocabulary, synsets, instances and the
//! construction pipeline (edit-distance filtering, per-uid capping,
//! low-frequency balancing), plus seeded batching and a synthetic generator.

mod balance;
mod batch;
mod edit;
mod io;
mod stats;
mod synthetic;
mod vocab;

pub use balance::{balance_low_frequency, surface_counts, BalanceConfig};
pub use batch::{make_batches, make_grouped_batches, BatchPlan};
pub use edit::{filter_pairs, levenshtein, SynonymPair};
pub use io::{
    read_instance_shards, read_instances, read_marked_sentences, read_synsets, read_vocab, write_instances, write_synsets,
    write_vocab, InstanceRecord, SynsetRecord,
};
pub use stats::{compute_stats, CorpusStats};
pub use synthetic::{generate_synthetic_corpus, SyntheticCorpus, SyntheticSpec};
pub use vocab::{tokenize, Vocabulary, E_END, E_START, PAD, UNK};

use std::collections::{BTreeMap, BTreeSet};

use log::debug;

use crate::{Error, Result};

/// Defaults for the corpus construction filters.
pub const DEFAULT_MIN_EDIT: usize = 10;
pub const DEFAULT_CAP_PER_UID: usize = 50;

/// A uid plus its synonymous surface forms.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Synset {
    pub uid: String,
    surfaces: Vec<String>,
    pub domain: String,
}

impl Synset {
    pub fn new(
        uid: impl Into<String>,
        surfaces: Vec<String>,
        domain: impl Into<String>,
    ) -> Result<Self> {
        let uid = uid.into();
        if surfaces.is_empty() {
            return Err(Error::Config(format!("synset {uid} has no surfaces")));
        }
        let distinct: BTreeSet<&String> = surfaces.iter().collect();
        if distinct.len() != surfaces.len() {
            return Err(Error::Config(format!("synset {uid} repeats a surface")));
        }
        Ok(Self {
            uid,
            surfaces,
            domain: domain.into(),
        })
    }

    pub fn surfaces(&self) -> &[String] {
        &self.surfaces
    }
}

/// Synsets keyed by unique uid, kept in insertion order.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct SynsetStore {
    synsets: Vec<Synset>,
    index: BTreeMap<String, usize>,
}

impl SynsetStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn insert(&mut self, s: Synset) -> Result<()> {
        if self.index.contains_key(&s.uid) {
            return Err(Error::Config(format!("duplicate uid {}", s.uid)));
        }
        self.index.insert(s.uid.clone(), self.synsets.len());
        self.synsets.push(s);
        Ok(())
    }

    pub fn get(&self, uid: &str) -> Option<&Synset> {
        self.index.get(uid).map(|&i| &self.synsets[i])
    }

    pub fn iter(&self) -> impl Iterator<Item = &Synset> {
        self.synsets.iter()
    }

    pub fn len(&self) -> usize {
        self.synsets.len()
    }

    pub fn is_empty(&self) -> bool {
        self.synsets.is_empty()
    }
}

/// A token sequence with exactly one marked entity span.
///
/// `tokens[p_s]` is the `<e>` marker and `tokens[p_e]` the `</e>` marker;
/// the entity occupies `p_s + 1 .. p_e`.
#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct Instance {
    pub uid: String,
    pub tokens: Vec<usize>,
    pub p_s: usize,
    pub p_e: usize,
}

impl Instance {
    pub fn new(uid: impl Into<String>, tokens: Vec<usize>, p_s: usize, p_e: usize) -> Result<Self> {
        let inst = Self {
            uid: uid.into(),
            tokens,
            p_s,
            p_e,
        };
        inst.validate()?;
        Ok(inst)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::InvalidSpan(format!("instance {}: {m}", self.uid)));
        if self.p_e >= self.tokens.len() {
            return bad(format!("p_e {} beyond length {}", self.p_e, self.tokens.len()));
        }
        if self.p_e < self.p_s + 2 {
            return bad(format!("span ({}, {}) holds no entity token", self.p_s, self.p_e));
        }
        if self.tokens[self.p_s] != E_START || self.tokens[self.p_e] != E_END {
            return bad("markers not at p_s/p_e".into());
        }
        let starts = self.tokens.iter().filter(|&&t| t == E_START).count();
        let ends = self.tokens.iter().filter(|&&t| t == E_END).count();
        if starts != 1 || ends != 1 {
            return bad(format!("{starts} start and {ends} end markers"));
        }
        Ok(())
    }

    /// Token ids strictly between the markers.
    pub fn entity_tokens(&self) -> &[usize] {
        &self.tokens[self.p_s + 1..self.p_e]
    }

    /// The marked surface rendered against `vocab`, space separated.
    pub fn surface(&self, vocab: &Vocabulary) -> String {
        vocab.render(self.entity_tokens())
    }
}

/// Inserts `<e>` before and `</e>` after `tokens[start..end]`.
///
/// Returns the marked sequence with `p_s = start` and `p_e = end + 1`.
pub fn mark_entity(tokens: &[usize], start: usize, end: usize) -> Result<(Vec<usize>, usize, usize)> {
    if start >= end || end > tokens.len() {
        return Err(Error::InvalidSpan(format!(
            "span [{start}, {end}) over {} tokens",
            tokens.len()
        )));
    }
    if tokens.iter().any(|&t| t == E_START || t == E_END) {
        return Err(Error::InvalidSpan("sequence already contains a marker".into()));
    }
    let mut out = Vec::with_capacity(tokens.len() + 2);
    out.extend_from_slice(&tokens[..start]);
    out.push(E_START);
    out.extend_from_slice(&tokens[start..end]);
    out.push(E_END);
    out.extend_from_slice(&tokens[end..]);
    Ok((out, start, end + 1))
}

/// Knobs for [`build_corpus`].
#[derive(Debug, Clone, PartialEq, serde::Serialize, serde::Deserialize)]
pub struct BuildOptions {
    pub min_edit: usize,
    pub cap_per_uid: usize,
    pub balance: BalanceConfig,
    pub seed: u64,
}

impl Default for BuildOptions {
    fn default() -> Self {
        Self {
            min_edit: DEFAULT_MIN_EDIT,
            cap_per_uid: DEFAULT_CAP_PER_UID,
            balance: BalanceConfig::default(),
            seed: 0,
        }
    }
}

#[derive(Debug, Clone)]
pub struct BuiltCorpus {
    pub instances: Vec<Instance>,
    pub kept_pairs: Vec<SynonymPair>,
    pub dropped_instances: usize,
    pub stats: CorpusStats,
}

/// Runs the two construction steps over already entity-marked instances.
///
/// 1. Surface pairs are formed per uid from the distinct marked surfaces
///    (ordered by first occurrence), filtered by [`filter_pairs`]; an
///    instance survives if its surface takes part in a retained pair.
/// 2. Surviving instances are rebalanced toward low-frequency synonyms.
pub fn build_corpus(
    instances: Vec<Instance>,
    synsets: &SynsetStore,
    vocab: &Vocabulary,
    opts: &BuildOptions,
) -> Result<BuiltCorpus> {
    let mut surfaces_by_uid: BTreeMap<&str, Vec<String>> = BTreeMap::new();
    let mut uid_order: Vec<&str> = Vec::new();
    for inst in &instances {
        let s = inst.surface(vocab);
        let entry = surfaces_by_uid.entry(&inst.uid).or_insert_with(|| {
            uid_order.push(&inst.uid);
            Vec::new()
        });
        if !entry.contains(&s) {
            entry.push(s);
        }
    }
    let mut pairs = Vec::new();
    for uid in &uid_order {
        let surfaces = &surfaces_by_uid[uid];
        for i in 0..surfaces.len() {
            for j in i + 1..surfaces.len() {
                pairs.push(SynonymPair {
                    a: surfaces[i].clone(),
                    b: surfaces[j].clone(),
                    uid: uid.to_string(),
                });
            }
        }
    }
    let kept_pairs = filter_pairs(&pairs, opts.min_edit, opts.cap_per_uid, opts.seed)?;
    let mut keep: BTreeSet<(&str, &str)> = BTreeSet::new();
    for p in &kept_pairs {
        keep.insert((&p.uid, &p.a));
        keep.insert((&p.uid, &p.b));
    }
    let before = instances.len();
    let filtered: Vec<Instance> = instances
        .iter()
        .filter(|i| keep.contains(&(i.uid.as_str(), i.surface(vocab).as_str())))
        .cloned()
        .collect();
    let dropped_instances = before - filtered.len();
    debug!(
        "pairs {} -> {}, instances {} -> {}",
        pairs.len(),
        kept_pairs.len(),
        before,
        filtered.len()
    );

    let counts = surface_counts(&filtered, vocab);
    let mut balance = opts.balance.clone();
    balance.seed = opts.seed;
    let instances = balance_low_frequency(filtered, synsets, vocab, &counts, &balance)?;
    let stats = compute_stats(&instances, vocab);
    Ok(BuiltCorpus {
        instances,
        kept_pairs,
        dropped_instances,
        stats,
    })
}

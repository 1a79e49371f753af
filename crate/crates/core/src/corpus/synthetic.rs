//! Seeded template corpus with optional surface ambiguity.
//!
//! Every synset gets its own pool of context words. Surfaces are two
//! pseudo-words, pairwise at least [`DEFAULT_MIN_EDIT`] edits apart inside a
//! synset so the default pair filter keeps them. Ambiguity is introduced by
//! pairing synsets `(2p, 2p+1)` and copying some surfaces of `2p` verbatim
//! into `2p+1`; the copies are told apart only by their context words.

use std::collections::BTreeSet;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use super::{levenshtein, mark_entity, Instance, Synset, SynsetStore, Vocabulary, DEFAULT_MIN_EDIT};
use crate::{Error, Result};

const CONSONANTS: &[u8] = b"bdfgklmnprstvz";
const VOWELS: &[u8] = b"aeiou";
const FILLERS: &[&str] = &["the", "a", "of", "in", "near", "with", "about", "from"];
const CONTEXT_WORDS_PER_SYNSET: usize = 8;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SyntheticSpec {
    pub n_synsets: usize,
    pub surfaces_per_synset: usize,
    pub contexts_per_surface: usize,
    pub ambiguous_fraction: f64,
}

impl SyntheticSpec {
    /// Parses `NxSxC` or `NxSxCxF` (F = ambiguous fraction).
    pub fn parse(s: &str) -> Result<Self> {
        let parts: Vec<&str> = s.split('x').collect();
        let bad = || Error::Config(format!("synthetic spec {s:?}: expected NxSxC[xF]"));
        if parts.len() != 3 && parts.len() != 4 {
            return Err(bad());
        }
        let n = |i: usize| parts[i].parse::<usize>().map_err(|_| bad());
        let spec = Self {
            n_synsets: n(0)?,
            surfaces_per_synset: n(1)?,
            contexts_per_surface: n(2)?,
            ambiguous_fraction: match parts.get(3) {
                Some(f) => f.parse().map_err(|_| bad())?,
                None => 0.0,
            },
        };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_synsets == 0 || self.surfaces_per_synset == 0 || self.contexts_per_surface == 0 {
            return Err(Error::Config("synthetic counts must be >= 1".into()));
        }
        if !(0.0..=1.0).contains(&self.ambiguous_fraction) {
            return Err(Error::Config(format!(
                "ambiguous_fraction must be in [0, 1], got {}",
                self.ambiguous_fraction
            )));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
pub struct SyntheticCorpus {
    pub synsets: SynsetStore,
    pub vocab: Vocabulary,
    pub instances: Vec<Instance>,
    /// Context slot (0..contexts_per_surface) of each instance.
    pub context_index: Vec<usize>,
    /// Per-synset context word pools, parallel to `synsets`.
    pub context_words: Vec<Vec<String>>,
}

struct WordMaker {
    used: BTreeSet<String>,
}

impl WordMaker {
    fn word(&mut self, rng: &mut ChaCha8Rng, syllables: usize) -> String {
        loop {
            let mut w = String::with_capacity(syllables * 2);
            for _ in 0..syllables {
                w.push(CONSONANTS[rng.gen_range(0..CONSONANTS.len())] as char);
                w.push(VOWELS[rng.gen_range(0..VOWELS.len())] as char);
            }
            if !FILLERS.contains(&w.as_str()) && self.used.insert(w.clone()) {
                return w;
            }
        }
    }
}

pub fn generate_synthetic_corpus(spec: &SyntheticSpec, seed: u64) -> Result<SyntheticCorpus> {
    spec.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut words = WordMaker {
        used: BTreeSet::new(),
    };
    let (n, s, c) = (spec.n_synsets, spec.surfaces_per_synset, spec.contexts_per_surface);

    // which (pair, surface slot) entries are shared
    let pairs = n / 2;
    let slots: Vec<(usize, usize)> = (0..pairs).flat_map(|p| (0..s).map(move |j| (p, j))).collect();
    let n_shared = (spec.ambiguous_fraction * slots.len() as f64).round() as usize;
    let mut order = slots.clone();
    order.shuffle(&mut rng);
    let shared: BTreeSet<(usize, usize)> = order.into_iter().take(n_shared).collect();

    let mut surfaces: Vec<Vec<String>> = Vec::with_capacity(n);
    for i in 0..n {
        let mut mine: Vec<Option<String>> = vec![None; s];
        if i % 2 == 1 {
            for (j, slot) in mine.iter_mut().enumerate() {
                if shared.contains(&(i / 2, j)) {
                    *slot = Some(surfaces[i - 1][j].clone());
                }
            }
        }
        for j in 0..s {
            if mine[j].is_some() {
                continue;
            }
            let taken: Vec<String> = mine.iter().flatten().cloned().collect();
            let mut attempts = 0;
            let surface = loop {
                let a = words.word(&mut rng, 3);
                let b = words.word(&mut rng, 3);
                let cand = format!("{a} {b}");
                attempts += 1;
                if attempts > 10_000
                    || taken.iter().all(|t| levenshtein(t, &cand) >= DEFAULT_MIN_EDIT)
                {
                    break cand;
                }
            };
            mine[j] = Some(surface);
        }
        surfaces.push(mine.into_iter().map(Option::unwrap).collect());
    }

    let context_words: Vec<Vec<String>> = (0..n)
        .map(|_| (0..CONTEXT_WORDS_PER_SYNSET).map(|_| words.word(&mut rng, 2)).collect())
        .collect();

    let mut vocab = Vocabulary::new();
    for w in FILLERS {
        vocab.add(w);
    }
    let mut synsets = SynsetStore::new();
    let mut instances = Vec::with_capacity(n * s * c);
    let mut context_index = Vec::with_capacity(n * s * c);
    for i in 0..n {
        let uid = format!("S{i:04}");
        synsets.insert(Synset::new(uid.clone(), surfaces[i].clone(), "synthetic")?)?;
        for surface in &surfaces[i] {
            for ctx in 0..c {
                let side = |rng: &mut ChaCha8Rng| -> Vec<String> {
                    let len = rng.gen_range(2..=4);
                    let mut out: Vec<String> = (0..len)
                        .map(|_| {
                            if rng.gen_bool(0.6) {
                                context_words[i][rng.gen_range(0..CONTEXT_WORDS_PER_SYNSET)].clone()
                            } else {
                                FILLERS[rng.gen_range(0..FILLERS.len())].to_string()
                            }
                        })
                        .collect();
                    // at least one topical word per side
                    let k = rng.gen_range(0..len);
                    out[k] = context_words[i][rng.gen_range(0..CONTEXT_WORDS_PER_SYNSET)].clone();
                    out
                };
                let pre = side(&mut rng);
                let post = side(&mut rng);
                let mut toks: Vec<usize> = pre.iter().map(|w| vocab.add(w)).collect();
                let start = toks.len();
                toks.extend(surface.split(' ').map(|w| vocab.add(w)));
                let end = toks.len();
                toks.extend(post.iter().map(|w| vocab.add(w)));
                let (t, p_s, p_e) = mark_entity(&toks, start, end)?;
                instances.push(Instance::new(uid.clone(), t, p_s, p_e)?);
                context_index.push(ctx);
            }
        }
    }
    Ok(SyntheticCorpus {
        synsets,
        vocab,
        instances,
        context_index,
        context_words,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::collections::BTreeMap;

    fn surface_uids(sc: &SyntheticCorpus) -> BTreeMap<String, BTreeSet<String>> {
        let mut m: BTreeMap<String, BTreeSet<String>> = BTreeMap::new();
        for inst in &sc.instances {
            m.entry(inst.surface(&sc.vocab)).or_default().insert(inst.uid.clone());
        }
        m
    }

    #[test]
    fn size_is_the_product() {
        let spec = SyntheticSpec::parse("50x4x5").unwrap();
        let sc = generate_synthetic_corpus(&spec, 7).unwrap();
        assert_eq!(sc.instances.len(), 1000);
        assert_eq!(sc.synsets.len(), 50);
        for inst in &sc.instances {
            inst.validate().unwrap();
        }
    }

    #[test]
    fn no_ambiguity_means_one_uid_per_surface() {
        let spec = SyntheticSpec::parse("20x3x2x0").unwrap();
        let sc = generate_synthetic_corpus(&spec, 1).unwrap();
        assert!(surface_uids(&sc).values().all(|u| u.len() == 1));
    }

    #[test]
    fn full_ambiguity_shares_surfaces_with_disjoint_contexts() {
        let spec = SyntheticSpec {
            n_synsets: 2,
            surfaces_per_synset: 3,
            contexts_per_surface: 4,
            ambiguous_fraction: 1.0,
        };
        let sc = generate_synthetic_corpus(&spec, 3).unwrap();
        assert!(surface_uids(&sc).values().all(|u| u.len() == 2));
        let a: BTreeSet<&String> = sc.context_words[0].iter().collect();
        let b: BTreeSet<&String> = sc.context_words[1].iter().collect();
        assert!(a.is_disjoint(&b));
    }

    #[test]
    fn partial_ambiguity_count_and_edit_distance() {
        let spec = SyntheticSpec::parse("50x4x5x0.3").unwrap();
        let sc = generate_synthetic_corpus(&spec, 11).unwrap();
        let shared = surface_uids(&sc).values().filter(|u| u.len() == 2).count();
        assert_eq!(shared, 30);
        for s in sc.synsets.iter() {
            let f = s.surfaces();
            for i in 0..f.len() {
                for j in i + 1..f.len() {
                    assert!(levenshtein(&f[i], &f[j]) >= DEFAULT_MIN_EDIT);
                }
            }
        }
    }

    #[test]
    fn deterministic_given_seed() {
        let spec = SyntheticSpec::parse("6x2x3x0.5").unwrap();
        let a = generate_synthetic_corpus(&spec, 9).unwrap();
        let b = generate_synthetic_corpus(&spec, 9).unwrap();
        assert_eq!(a.instances, b.instances);
        assert_eq!(a.vocab, b.vocab);
        let c = generate_synthetic_corpus(&spec, 10).unwrap();
        assert_ne!(a.instances, c.instances);
    }

    #[test]
    fn parse_errors() {
        assert!(SyntheticSpec::parse("50x4").is_err());
        assert!(SyntheticSpec::parse("0x4x5").is_err());
        assert!(SyntheticSpec::parse("5x4x5x1.5").is_err());
    }
}

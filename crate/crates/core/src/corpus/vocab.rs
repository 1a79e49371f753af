use std::collections::{BTreeMap, HashMap};

use crate::{Error, Result};

pub const PAD: usize = 0;
pub const UNK: usize = 1;
pub const E_START: usize = 2;
pub const E_END: usize = 3;

const RESERVED: [&str; 4] = ["[PAD]", "[UNK]", "<e>", "</e>"];

/// Closed token vocabulary. Ids 0..4 are reserved for PAD, UNK and the two
/// entity markers.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Vocabulary {
    ids: HashMap<String, usize>,
    tokens: Vec<String>,
}

impl Default for Vocabulary {
    fn default() -> Self {
        Self::new()
    }
}

impl Vocabulary {
    pub fn new() -> Self {
        let tokens: Vec<String> = RESERVED.iter().map(|s| s.to_string()).collect();
        let ids = tokens.iter().cloned().enumerate().map(|(i, t)| (t, i)).collect();
        Self { ids, tokens }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        false
    }

    /// Registers a (lowercased) token and returns its id.
    pub fn add(&mut self, token: &str) -> usize {
        let t = token.to_lowercase();
        if let Some(&id) = self.ids.get(&t) {
            return id;
        }
        let id = self.tokens.len();
        self.ids.insert(t.clone(), id);
        self.tokens.push(t);
        id
    }

    /// Exact lookup, including the reserved marker strings.
    pub fn id(&self, token: &str) -> Option<usize> {
        self.ids.get(token).copied()
    }

    pub fn token(&self, id: usize) -> Option<&str> {
        self.tokens.get(id).map(String::as_str)
    }

    pub fn render(&self, ids: &[usize]) -> String {
        ids.iter()
            .map(|&i| self.token(i).unwrap_or(RESERVED[UNK]))
            .collect::<Vec<_>>()
            .join(" ")
    }

    pub fn to_map(&self) -> BTreeMap<String, usize> {
        self.ids.iter().map(|(k, v)| (k.clone(), *v)).collect()
    }

    pub fn from_map(map: BTreeMap<String, usize>) -> Result<Self> {
        let mut tokens = vec![None; map.len()];
        for (tok, &id) in &map {
            match tokens.get_mut(id) {
                Some(slot @ None) => *slot = Some(tok.clone()),
                Some(Some(_)) => return Err(Error::Config(format!("vocabulary id {id} repeated"))),
                None => {
                    return Err(Error::Config(format!(
                        "vocabulary ids must be contiguous; {id} >= {}",
                        map.len()
                    )))
                }
            }
        }
        let tokens: Vec<String> = tokens.into_iter().map(Option::unwrap).collect();
        for (i, r) in RESERVED.iter().enumerate() {
            if tokens.get(i).map(String::as_str) != Some(*r) {
                return Err(Error::Config(format!("reserved id {i} must be {r}")));
            }
        }
        Ok(Self {
            ids: map.into_iter().collect(),
            tokens,
        })
    }
}

/// Whitespace split and lowercase; unknown tokens map to UNK. Reserved ids
/// never come out of raw text.
pub fn tokenize(text: &str, vocab: &Vocabulary) -> Vec<usize> {
    text.split_whitespace()
        .map(|w| match vocab.id(&w.to_lowercase()) {
            Some(id) if id >= RESERVED.len() => id,
            _ => UNK,
        })
        .collect()
}

//! JSON-lines persistence for instances and synsets, JSON for the vocabulary.

use std::collections::BTreeMap;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::{Instance, Synset, SynsetStore, Vocabulary, UNK};
use crate::{Error, Result};

/// One line of an instance file. Tokens are stored as strings.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct InstanceRecord {
    pub uid: String,
    pub tokens: Vec<String>,
    pub p_s: usize,
    pub p_e: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SynsetRecord {
    pub uid: String,
    pub surfaces: Vec<String>,
    pub domain: String,
}

fn parse_err(path: &Path, line: usize, msg: impl ToString) -> Error {
    Error::Parse {
        path: path.to_path_buf(),
        line,
        msg: msg.to_string(),
    }
}

fn for_each_line(path: &Path, mut f: impl FnMut(usize, &str) -> Result<()>) -> Result<()> {
    let reader = BufReader::new(File::open(path)?);
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        f(i + 1, &line)?;
    }
    Ok(())
}

pub fn write_instances(path: &Path, instances: &[Instance], vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for inst in instances {
        let rec = InstanceRecord {
            uid: inst.uid.clone(),
            tokens: inst
                .tokens
                .iter()
                .map(|&t| vocab.token(t).unwrap_or("[UNK]").to_string())
                .collect(),
            p_s: inst.p_s,
            p_e: inst.p_e,
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Reads an instance file, resolving token strings against `vocab`
/// (unknown strings become UNK). Malformed lines report their line number.
pub fn read_instances(path: &Path, vocab: &Vocabulary) -> Result<Vec<Instance>> {
    let mut out = Vec::new();
    for_each_line(path, |n, line| {
        let rec: InstanceRecord = serde_json::from_str(line).map_err(|e| parse_err(path, n, e))?;
        let tokens = rec
            .tokens
            .iter()
            .map(|t| vocab.id(t).unwrap_or(UNK))
            .collect();
        let inst = Instance::new(rec.uid, tokens, rec.p_s, rec.p_e).map_err(|e| parse_err(path, n, e))?;
        out.push(inst);
        Ok(())
    })?;
    Ok(out)
}

/// Reads several instance shards, concatenated in lexicographic path order.
pub fn read_instance_shards(paths: &[PathBuf], vocab: &Vocabulary) -> Result<Vec<Instance>> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    let mut out = Vec::new();
    for p in &sorted {
        out.extend(read_instances(p, vocab)?);
    }
    Ok(out)
}

/// Builds the vocabulary for raw marked sentence shards and reads them.
///
/// Shards are taken in lexicographic path order. Tokens are registered in
/// order of first occurrence, followed by the words of every synset
/// surface so low-frequency synonyms can be substituted in later.
pub fn read_marked_sentences(paths: &[PathBuf], synsets: &SynsetStore) -> Result<(Vocabulary, Vec<Instance>)> {
    let mut sorted = paths.to_vec();
    sorted.sort();
    let mut vocab = Vocabulary::new();
    let mut records = Vec::new();
    for p in &sorted {
        for_each_line(p, |n, line| {
            let rec: InstanceRecord = serde_json::from_str(line).map_err(|e| parse_err(p, n, e))?;
            for t in &rec.tokens {
                if vocab.id(t).is_none() {
                    vocab.add(t);
                }
            }
            records.push((p.clone(), n, rec));
            Ok(())
        })?;
    }
    for s in synsets.iter() {
        for surface in s.surfaces() {
            for w in surface.split_whitespace() {
                vocab.add(w);
            }
        }
    }
    let mut out = Vec::with_capacity(records.len());
    for (p, n, rec) in records {
        let tokens = rec
            .tokens
            .iter()
            .map(|t| vocab.id(t).or_else(|| vocab.id(&t.to_lowercase())).unwrap_or(UNK))
            .collect();
        out.push(Instance::new(rec.uid, tokens, rec.p_s, rec.p_e).map_err(|e| parse_err(&p, n, e))?);
    }
    Ok((vocab, out))
}

pub fn write_synsets(path: &Path, synsets: &SynsetStore) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for s in synsets.iter() {
        let rec = SynsetRecord {
            uid: s.uid.clone(),
            surfaces: s.surfaces().to_vec(),
            domain: s.domain.clone(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

pub fn read_synsets(path: &Path) -> Result<SynsetStore> {
    let mut store = SynsetStore::new();
    for_each_line(path, |n, line| {
        let rec: SynsetRecord = serde_json::from_str(line).map_err(|e| parse_err(path, n, e))?;
        let s = Synset::new(rec.uid, rec.surfaces, rec.domain).map_err(|e| parse_err(path, n, e))?;
        store.insert(s).map_err(|e| parse_err(path, n, e))
    })?;
    Ok(store)
}

pub fn write_vocab(path: &Path, vocab: &Vocabulary) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    serde_json::to_writer(&mut w, &vocab.to_map())?;
    w.write_all(b"\n")?;
    w.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vocabulary> {
    let text = std::fs::read_to_string(path)?;
    let map: BTreeMap<String, usize> =
        serde_json::from_str(&text).map_err(|e| parse_err(path, e.line(), e))?;
    Vocabulary::from_map(map)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::corpus::{generate_synthetic_corpus, SyntheticSpec};

    #[test]
    fn malformed_line_reports_line_number() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("bad.jsonl");
        std::fs::write(
            &p,
            "{\"uid\":\"a\",\"tokens\":[\"<e>\",\"x\",\"</e>\"],\"p_s\":0,\"p_e\":2}\n{oops\n",
        )
        .unwrap();
        match read_instances(&p, &Vocabulary::new()) {
            Err(Error::Parse { line, .. }) => assert_eq!(line, 2),
            other => panic!("{other:?}"),
        }
        std::fs::write(&p, "{\"uid\":\"a\",\"tokens\":[\"x\",\"x\",\"</e>\"],\"p_s\":0,\"p_e\":2}\n")
            .unwrap();
        assert!(matches!(
            read_instances(&p, &Vocabulary::new()),
            Err(Error::Parse { line: 1, .. })
        ));
    }

    #[test]
    fn shards_merge_in_lexicographic_order() {
        let sc = generate_synthetic_corpus(&SyntheticSpec::parse("4x2x2").unwrap(), 1).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let (a, b) = sc.instances.split_at(5);
        let pa = dir.path().join("shard-000.jsonl");
        let pb = dir.path().join("shard-001.jsonl");
        write_instances(&pa, a, &sc.vocab).unwrap();
        write_instances(&pb, b, &sc.vocab).unwrap();
        let back = read_instance_shards(&[pb, pa], &sc.vocab).unwrap();
        assert_eq!(back, sc.instances);
    }

    #[test]
    fn raw_sentences_build_their_vocabulary() {
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s.jsonl");
        std::fs::write(
            &p,
            "{\"uid\":\"CA\",\"tokens\":[\"In\",\"<e>\",\"California\",\"</e>\",\"today\"],\"p_s\":1,\"p_e\":3}\n",
        )
        .unwrap();
        let mut synsets = SynsetStore::new();
        synsets
            .insert(Synset::new("CA", vec!["California".into(), "The Golden State".into()], "geo").unwrap())
            .unwrap();
        let (vocab, insts) = read_marked_sentences(&[p], &synsets).unwrap();
        assert_eq!(insts[0].surface(&vocab), "california");
        assert_eq!(vocab.id("golden").map(|_| ()), Some(()));
        assert_eq!(vocab.render(&insts[0].tokens), "in <e> california </e> today");
    }
}

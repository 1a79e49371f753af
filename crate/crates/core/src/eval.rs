//! Similarity-oriented evaluation: embedding extraction, retrieval Acc@k,
//! HAC canonicalization scored with macro/micro F1, and the context
//! ambiguity probe.

use std::collections::{BTreeMap, BTreeSet};
use std::thread;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::corpus::Instance;
use crate::model::{aggregate_feature_extractor, PicsoModel};
use crate::numerics::{dot, Tensor2D};
use crate::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum EmbedMode {
    /// The aggregator output `v`.
    PretrainPooled,
    /// Mean over entity rows of `H_p + l2norm(H_a)`.
    FeatureExtractor,
}

/// One embedding row per instance.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    pub matrix: Tensor2D,
    pub uids: Vec<String>,
    /// Index of the source instance of each row.
    pub sources: Vec<usize>,
}

impl EmbeddingSet {
    pub fn new(matrix: Tensor2D, uids: Vec<String>) -> Result<Self> {
        if matrix.rows() != uids.len() {
            return Err(Error::Dimension(format!("{} rows but {} uids", matrix.rows(), uids.len())));
        }
        if !matrix.all_finite() {
            return Err(Error::NonFinite("embedding matrix".into()));
        }
        let sources = (0..uids.len()).collect();
        Ok(Self { matrix, uids, sources })
    }

    pub fn len(&self) -> usize {
        self.uids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.uids.is_empty()
    }

    /// The rows listed in `idx`, keeping their metadata.
    pub fn subset(&self, idx: &[usize]) -> Result<Self> {
        Ok(Self {
            matrix: self.matrix.select_rows(idx)?,
            uids: idx.iter().map(|&i| self.uids[i].clone()).collect(),
            sources: idx.iter().map(|&i| self.sources[i]).collect(),
        })
    }
}

fn embed_one(model: &PicsoModel, inst: &Instance, mode: EmbedMode) -> Result<Vec<f64>> {
    inst.validate()?;
    let feats = model.features(&inst.tokens, inst.p_s, inst.p_e)?;
    match mode {
        EmbedMode::PretrainPooled => Ok(feats.v.expect("single module checked").row(0).to_vec()),
        EmbedMode::FeatureExtractor => {
            let fused = aggregate_feature_extractor(&feats.h_p, &feats.h_a[0])?;
            let rows: Vec<usize> = (inst.p_s + 1..inst.p_e).collect();
            let n = rows.len() as f64;
            Ok(fused.select_rows(&rows)?.sum_rows().scale(1.0 / n).row(0).to_vec())
        }
    }
}

/// Embeds every instance with the model's single attached module.
///
/// Work is split across threads by contiguous chunks; rows are written in
/// input order so the result does not depend on the thread count.
pub fn embed_instances(model: &PicsoModel, instances: &[Instance], mode: EmbedMode) -> Result<EmbeddingSet> {
    match model.modules.len() {
        0 => return Err(Error::MissingAdapter("embedding needs an attached adapter".into())),
        1 => {}
        n => {
            return Err(Error::Config(format!(
                "embedding uses exactly one adapter, the model has {n}"
            )))
        }
    }
    let threads = thread::available_parallelism().map_or(1, |n| n.get()).min(instances.len().max(1));
    let chunk = instances.len().div_ceil(threads).max(1);
    let parts: Vec<Result<Vec<Vec<f64>>>> = thread::scope(|s| {
        let handles: Vec<_> = instances
            .chunks(chunk)
            .map(|c| s.spawn(move || c.iter().map(|inst| embed_one(model, inst, mode)).collect()))
            .collect();
        handles.into_iter().map(|h| h.join().expect("embedding thread panicked")).collect()
    });
    let mut rows = Vec::with_capacity(instances.len());
    for p in parts {
        rows.extend(p?);
    }
    let matrix = if rows.is_empty() {
        Tensor2D::zeros(0, 0)
    } else {
        Tensor2D::from_rows(&rows)?
    };
    EmbeddingSet::new(matrix, instances.iter().map(|i| i.uid.clone()).collect())
}

/// Candidate indices ordered by descending dot product, ties to the lower
/// index.
pub fn rank_candidates(query: &[f64], candidates: &Tensor2D) -> Vec<usize> {
    let scores: Vec<f64> = (0..candidates.rows()).map(|j| dot(query, candidates.row(j))).collect();
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]).then(a.cmp(&b)));
    order
}

/// Fraction of queries with a same-uid candidate among their top `k`.
pub fn retrieval_acc_at_k(queries: &EmbeddingSet, candidates: &EmbeddingSet, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::Config("k must be >= 1".into()));
    }
    if queries.is_empty() {
        return Err(Error::Eval("no queries".into()));
    }
    let known: BTreeSet<&str> = candidates.uids.iter().map(String::as_str).collect();
    if let Some(u) = queries.uids.iter().find(|u| !known.contains(u.as_str())) {
        return Err(Error::Eval(format!("query uid '{u}' has no candidate")));
    }
    if queries.matrix.cols() != candidates.matrix.cols() {
        return Err(Error::Dimension(format!(
            "query width {} vs candidate width {}",
            queries.matrix.cols(),
            candidates.matrix.cols()
        )));
    }
    let hits = (0..queries.len())
        .filter(|&q| {
            rank_candidates(queries.matrix.row(q), &candidates.matrix)
                .iter()
                .take(k)
                .any(|&j| candidates.uids[j] == queries.uids[q])
        })
        .count();
    Ok(hits as f64 / queries.len() as f64)
}

/// Held-out retrieval split: for every (uid, surface) group with at least
/// two instances, the last one becomes a query and the rest stay
/// candidates. Returns `(queries, candidates)` as ascending indices.
pub fn split_queries(instances: &[Instance]) -> (Vec<usize>, Vec<usize>) {
    let mut groups: BTreeMap<(&str, &[usize]), Vec<usize>> = BTreeMap::new();
    for (i, inst) in instances.iter().enumerate() {
        groups.entry((&inst.uid, inst.entity_tokens())).or_default().push(i);
    }
    let mut is_query = vec![false; instances.len()];
    for members in groups.values() {
        if members.len() >= 2 {
            is_query[*members.last().expect("nonempty")] = true;
        }
    }
    (0..instances.len()).partition(|&i| is_query[i])
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Linkage {
    Single,
    Complete,
    Average,
}

impl std::str::FromStr for Linkage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "single" => Ok(Self::Single),
            "complete" => Ok(Self::Complete),
            "average" => Ok(Self::Average),
            _ => Err(Error::Config(format!("linkage must be single, complete or average, got '{s}'"))),
        }
    }
}

/// A partition of `0..n` in canonical form: members ascending, clusters
/// ordered by their smallest member.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Clustering {
    clusters: Vec<Vec<usize>>,
}

impl Clustering {
    pub fn new(mut clusters: Vec<Vec<usize>>) -> Result<Self> {
        clusters.retain(|c| !c.is_empty());
        for c in &mut clusters {
            c.sort_unstable();
        }
        clusters.sort_unstable_by_key(|c| c[0]);
        let mut seen: Vec<usize> = clusters.iter().flatten().copied().collect();
        seen.sort_unstable();
        if seen.iter().enumerate().any(|(i, &x)| i != x) {
            return Err(Error::Eval("clusters must cover 0..n exactly once".into()));
        }
        Ok(Self { clusters })
    }

    /// Groups items by equal label.
    pub fn from_labels<L: Ord>(labels: &[L]) -> Self {
        let mut groups: BTreeMap<&L, Vec<usize>> = BTreeMap::new();
        for (i, l) in labels.iter().enumerate() {
            groups.entry(l).or_default().push(i);
        }
        Self::new(groups.into_values().collect()).expect("labels form a partition")
    }

    pub fn clusters(&self) -> &[Vec<usize>] {
        &self.clusters
    }

    pub fn n_items(&self) -> usize {
        self.clusters.iter().map(Vec::len).sum()
    }

    /// Cluster number of every item.
    pub fn labels(&self) -> Vec<usize> {
        let mut out = vec![0; self.n_items()];
        for (c, members) in self.clusters.iter().enumerate() {
            for &i in members {
                out[i] = c;
            }
        }
        out
    }
}

/// `1 - cos(a, b)`; a zero vector is at distance 1 from everything.
pub fn cosine_distance(a: &[f64], b: &[f64]) -> f64 {
    let na = dot(a, a).sqrt();
    let nb = dot(b, b).sqrt();
    if na == 0.0 || nb == 0.0 {
        return 1.0;
    }
    1.0 - dot(a, b) / (na * nb)
}

/// Agglomerative clustering under cosine distance.
///
/// Clusters merge while the smallest linkage distance is at most
/// `threshold`. Each cluster is identified by its smallest member; among
/// equally close pairs the lexicographically smallest identifier pair
/// merges first. Linkage distances are updated with the Lance-Williams
/// recurrences.
pub fn hac_cluster(embeddings: &Tensor2D, linkage: Linkage, threshold: f64) -> Result<Clustering> {
    let n = embeddings.rows();
    if n == 0 {
        return Err(Error::Eval("clustering needs at least one item".into()));
    }
    if !(threshold > 0.0) {
        return Err(Error::Config(format!("distance threshold must be > 0, got {threshold}")));
    }
    let mut dist = vec![vec![0.0; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            let d = cosine_distance(embeddings.row(i), embeddings.row(j));
            dist[i][j] = d;
            dist[j][i] = d;
        }
    }
    let mut members: Vec<Option<Vec<usize>>> = (0..n).map(|i| Some(vec![i])).collect();
    loop {
        let mut best: Option<(f64, usize, usize)> = None;
        for i in 0..n {
            if members[i].is_none() {
                continue;
            }
            for j in i + 1..n {
                if members[j].is_none() {
                    continue;
                }
                if best.is_none_or(|(d, _, _)| dist[i][j] < d) {
                    best = Some((dist[i][j], i, j));
                }
            }
        }
        let Some((d, a, b)) = best else { break };
        if d > threshold {
            break;
        }
        let nb = members[b].take().expect("active");
        let (sa, sb) = (members[a].as_ref().expect("active").len() as f64, nb.len() as f64);
        for k in 0..n {
            if k == a || members[k].is_none() {
                continue;
            }
            let merged = match linkage {
                Linkage::Single => dist[a][k].min(dist[b][k]),
                Linkage::Complete => dist[a][k].max(dist[b][k]),
                Linkage::Average => (sa * dist[a][k] + sb * dist[b][k]) / (sa + sb),
            };
            dist[a][k] = merged;
            dist[k][a] = merged;
        }
        members[a].as_mut().expect("active").extend(nb);
    }
    Clustering::new(members.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct F1Scores {
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f1: f64,
    pub micro_precision: f64,
    pub micro_recall: f64,
    pub micro_f1: f64,
}

fn harmonic(p: f64, r: f64) -> f64 {
    if p + r == 0.0 {
        0.0
    } else {
        2.0 * p * r / (p + r)
    }
}

/// Fraction of `a`'s clusters lying inside a single cluster of `b`, and the
/// summed best overlap of each `a` cluster with `b` over the item count.
fn directed(a: &Clustering, b: &Clustering) -> (f64, f64) {
    let label = b.labels();
    let mut pure = 0usize;
    let mut overlap = 0usize;
    for c in a.clusters() {
        let mut counts: BTreeMap<usize, usize> = BTreeMap::new();
        for &i in c {
            *counts.entry(label[i]).or_default() += 1;
        }
        if counts.len() == 1 {
            pure += 1;
        }
        overlap += counts.values().max().copied().unwrap_or(0);
    }
    (pure as f64 / a.clusters().len() as f64, overlap as f64 / a.n_items() as f64)
}

/// Macro scores count whole clusters that are pure; micro scores count
/// items in each cluster's best-matching counterpart.
pub fn macro_micro_f1(pred: &Clustering, gold: &Clustering) -> Result<F1Scores> {
    if pred.n_items() != gold.n_items() {
        return Err(Error::Eval(format!(
            "predicted clustering covers {} items, gold covers {}",
            pred.n_items(),
            gold.n_items()
        )));
    }
    if pred.n_items() == 0 {
        return Err(Error::Eval("empty clusterings".into()));
    }
    let (macro_precision, micro_precision) = directed(pred, gold);
    let (macro_recall, micro_recall) = directed(gold, pred);
    Ok(F1Scores {
        macro_precision,
        macro_recall,
        macro_f1: harmonic(macro_precision, macro_recall),
        micro_precision,
        micro_recall,
        micro_f1: harmonic(micro_precision, micro_recall),
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    /// Mean cosine over pairs sharing surface and uid.
    pub same_uid_similarity: f64,
    /// Mean cosine over pairs sharing surface but not uid.
    pub same_surface_diff_uid_similarity: f64,
    pub margin: f64,
    pub ambiguous_surfaces: usize,
    pub same_uid_pairs: usize,
    pub diff_uid_pairs: usize,
}

/// Probe over precomputed embeddings. Only surfaces carried by two or more
/// uids take part, so both sides of the margin compare identical surface
/// strings and only context can separate them.
pub fn probe_embeddings<S: Ord>(emb: &EmbeddingSet, surfaces: &[S]) -> Result<ProbeReport> {
    if surfaces.len() != emb.len() {
        return Err(Error::Dimension(format!("{} surfaces for {} embeddings", surfaces.len(), emb.len())));
    }
    let mut by_surface: BTreeMap<&S, Vec<usize>> = BTreeMap::new();
    for (i, s) in surfaces.iter().enumerate() {
        by_surface.entry(s).or_default().push(i);
    }
    let (mut pos, mut n_pos, mut neg, mut n_neg, mut ambiguous) = (0.0, 0usize, 0.0, 0usize, 0usize);
    for rows in by_surface.values() {
        let uids: BTreeSet<&str> = rows.iter().map(|&i| emb.uids[i].as_str()).collect();
        if uids.len() < 2 {
            continue;
        }
        ambiguous += 1;
        for (x, &i) in rows.iter().enumerate() {
            for &j in &rows[x + 1..] {
                let c = 1.0 - cosine_distance(emb.matrix.row(i), emb.matrix.row(j));
                if emb.uids[i] == emb.uids[j] {
                    pos += c;
                    n_pos += 1;
                } else {
                    neg += c;
                    n_neg += 1;
                }
            }
        }
    }
    if ambiguous == 0 {
        return Err(Error::Eval("probe corpus has no surface shared by two uids".into()));
    }
    if n_pos == 0 {
        return Err(Error::Eval("ambiguous surfaces never repeat within a uid".into()));
    }
    let (same, diff) = (pos / n_pos as f64, neg / n_neg as f64);
    Ok(ProbeReport {
        same_uid_similarity: same,
        same_surface_diff_uid_similarity: diff,
        margin: same - diff,
        ambiguous_surfaces: ambiguous,
        same_uid_pairs: n_pos,
        diff_uid_pairs: n_neg,
    })
}

/// Embeds `probe_corpus` with the pooled vector `v` and compares contexts
/// of shared surfaces.
pub fn ambiguity_probe(model: &PicsoModel, probe_corpus: &[Instance]) -> Result<ProbeReport> {
    let emb = embed_instances(model, probe_corpus, EmbedMode::PretrainPooled)?;
    let surfaces: Vec<&[usize]> = probe_corpus.iter().map(Instance::entity_tokens).collect();
    probe_embeddings(&emb, &surfaces)
}

/// SHA-256 over every instance's uid, tokens and span, hex encoded.
pub fn corpus_fingerprint(instances: &[Instance]) -> String {
    let mut h = Sha256::new();
    for inst in instances {
        h.update((inst.uid.len() as u64).to_le_bytes());
        h.update(inst.uid.as_bytes());
        h.update((inst.tokens.len() as u64).to_le_bytes());
        for &t in &inst.tokens {
            h.update((t as u64).to_le_bytes());
        }
        h.update((inst.p_s as u64).to_le_bytes());
        h.update((inst.p_e as u64).to_le_bytes());
    }
    hex::encode(h.finalize())
}

/// Metrics plus everything needed to reproduce them.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub task: String,
    pub metrics: BTreeMap<String, f64>,
    pub config: serde_json::Value,
    pub corpus_fingerprint: String,
}

//! Directory checkpoints: `manifest.json` describing every tensor plus
//! `params.bin` holding the raw little-endian f64 values back to back.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::path::Path;

use serde::{Deserialize, Serialize};

use super::{Backbone, DomainModule, ModelConfig};
use crate::numerics::{Parameter, Parameterized, Tensor2D};
use crate::{Error, Result};

pub const FORMAT: &str = "picso-checkpoint";
pub const VERSION: u32 = 1;
pub const MANIFEST_FILE: &str = "manifest.json";
pub const PARAMS_FILE: &str = "params.bin";

/// Everything persisted by a checkpoint.
#[derive(Debug, Clone, PartialEq)]
pub struct Checkpoint {
    pub config: ModelConfig,
    pub backbone: Backbone,
    pub modules: Vec<DomainModule>,
    /// Auxiliary tensors such as optimizer moments.
    pub tensors: BTreeMap<String, Tensor2D>,
    /// Free-form JSON state (training progress, vocabulary, settings).
    pub extra: serde_json::Value,
}

impl Checkpoint {
    pub fn new(backbone: Backbone, modules: Vec<DomainModule>) -> Self {
        Self {
            config: backbone.config.clone(),
            backbone,
            modules,
            tensors: BTreeMap::new(),
            extra: serde_json::Value::Null,
        }
    }
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Manifest {
    format: String,
    version: u32,
    config: ModelConfig,
    domains: Vec<String>,
    backbone_checksum: String,
    entries: Vec<Entry>,
    extra: serde_json::Value,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Entry {
    group: String,
    name: String,
    rows: usize,
    cols: usize,
    /// Byte offset into the params file.
    offset: usize,
    frozen: bool,
}

fn push(entries: &mut Vec<Entry>, bin: &mut Vec<u8>, group: &str, name: &str, t: &Tensor2D, frozen: bool) {
    entries.push(Entry {
        group: group.to_string(),
        name: name.to_string(),
        rows: t.rows(),
        cols: t.cols(),
        offset: bin.len(),
        frozen,
    });
    bin.extend(t.to_le_bytes());
}

pub fn save_checkpoint(dir: &Path, ckpt: &Checkpoint) -> Result<()> {
    let mut entries = Vec::new();
    let mut bin = Vec::new();
    for p in ckpt.backbone.parameters() {
        push(&mut entries, &mut bin, "backbone", &p.name, &p.value, p.is_frozen());
    }
    for m in &ckpt.modules {
        let group = format!("module:{}", m.domain());
        for p in m.parameters() {
            push(&mut entries, &mut bin, &group, &p.name, &p.value, p.is_frozen());
        }
    }
    for (name, t) in &ckpt.tensors {
        push(&mut entries, &mut bin, "tensor", name, t, false);
    }
    let manifest = Manifest {
        format: FORMAT.to_string(),
        version: VERSION,
        config: ckpt.config.clone(),
        domains: ckpt.modules.iter().map(|m| m.domain().to_string()).collect(),
        backbone_checksum: ckpt.backbone.checksum(),
        entries,
        extra: ckpt.extra.clone(),
    };
    fs::create_dir_all(dir)?;
    let mut text = serde_json::to_string_pretty(&manifest)?;
    text.push('\n');
    fs::write(dir.join(MANIFEST_FILE), text)?;
    fs::write(dir.join(PARAMS_FILE), bin)?;
    Ok(())
}

fn corrupt(msg: impl Into<String>) -> Error {
    Error::Checkpoint(msg.into())
}

fn read_tensor(bin: &[u8], e: &Entry) -> Result<Tensor2D> {
    let n = e.rows.checked_mul(e.cols).ok_or_else(|| corrupt("tensor size overflow"))?;
    let end = e.offset.checked_add(n * 8).filter(|&end| end <= bin.len());
    let Some(end) = end else {
        return Err(corrupt(format!("tensor '{}' runs past the end of {PARAMS_FILE}", e.name)));
    };
    let data = bin[e.offset..end]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    Tensor2D::from_vec(e.rows, e.cols, data)
}

type Index<'a> = HashMap<(String, String), (&'a Entry, Tensor2D)>;

fn fill(params: Vec<&mut Parameter>, group: &str, index: &mut Index<'_>) -> Result<()> {
    for p in params {
        let Some((entry, t)) = index.remove(&(group.to_string(), p.name.clone())) else {
            return Err(corrupt(format!("missing tensor '{}' in group '{group}'", p.name)));
        };
        if t.shape() != p.shape() {
            return Err(corrupt(format!("tensor '{}' has shape {:?}, expected {:?}", p.name, t.shape(), p.shape())));
        }
        if entry.frozen != p.is_frozen() {
            return Err(corrupt(format!("tensor '{}' has the wrong frozen flag", p.name)));
        }
        p.value = t;
    }
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<Checkpoint> {
    let manifest_path = dir.join(MANIFEST_FILE);
    if !manifest_path.is_file() {
        return Err(corrupt(format!("no checkpoint at {}", dir.display())));
    }
    let text = fs::read_to_string(&manifest_path)?;
    let raw: serde_json::Value =
        serde_json::from_str(&text).map_err(|e| corrupt(format!("unreadable manifest: {e}")))?;
    if raw.get("format").and_then(|f| f.as_str()) != Some(FORMAT) {
        return Err(corrupt("manifest is not a checkpoint manifest"));
    }
    match raw.get("version").and_then(|v| v.as_u64()) {
        Some(v) if v == u64::from(VERSION) => {}
        other => {
            return Err(corrupt(format!(
                "unsupported checkpoint version {other:?}, this build reads version {VERSION}"
            )))
        }
    }
    let manifest: Manifest = serde_json::from_value(raw).map_err(|e| corrupt(format!("corrupt manifest: {e}")))?;
    manifest.config.validate()?;
    let bin = fs::read(dir.join(PARAMS_FILE))?;
    let expected_len: usize = manifest.entries.iter().map(|e| e.rows * e.cols * 8).sum();
    if expected_len != bin.len() {
        return Err(corrupt(format!(
            "{PARAMS_FILE} holds {} bytes, manifest describes {expected_len}",
            bin.len()
        )));
    }

    let mut index = Index::new();
    for e in &manifest.entries {
        let t = read_tensor(&bin, e)?;
        if index.insert((e.group.clone(), e.name.clone()), (e, t)).is_some() {
            return Err(corrupt(format!("duplicate tensor '{}'", e.name)));
        }
    }

    let mut backbone = Backbone::new(&manifest.config)?;
    fill(backbone.parameters_mut(), "backbone", &mut index)?;
    if backbone.checksum() != manifest.backbone_checksum {
        return Err(corrupt("backbone checksum mismatch"));
    }
    let mut modules = Vec::new();
    for domain in &manifest.domains {
        let mut m = DomainModule::new(&manifest.config, domain, 0)?;
        let group = format!("module:{domain}");
        fill(m.parameters_mut(), &group, &mut index)?;
        modules.push(m);
    }
    let mut tensors = BTreeMap::new();
    let mut leftovers = Vec::new();
    for ((group, name), (_, t)) in index {
        if group == "tensor" {
            tensors.insert(name, t);
        } else {
            leftovers.push(format!("{group}/{name}"));
        }
    }
    if !leftovers.is_empty() {
        leftovers.sort();
        return Err(corrupt(format!("unexpected tensors: {}", leftovers.join(", "))));
    }
    Ok(Checkpoint {
        config: manifest.config,
        backbone,
        modules,
        tensors,
        extra: manifest.extra,
    })
}

//! Batch-mode entry points: corpus construction, adapter pre-training and
//! evaluation. Every command writes a JSON report that echoes its resolved
//! configuration; no report contains paths or timings, so reruns with the
//! same inputs and seed are byte-identical.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use serde::Serialize;
use serde_json::json;

use crate::corpus::{
    build_corpus, generate_synthetic_corpus, read_instances, read_marked_sentences, read_synsets, read_vocab,
    write_instances, write_synsets, write_vocab, BalanceConfig, BuildOptions, Instance, SyntheticSpec, Vocabulary,
    DEFAULT_CAP_PER_UID, DEFAULT_MIN_EDIT,
};
use crate::eval::{
    ambiguity_probe, corpus_fingerprint, embed_instances, hac_cluster, macro_micro_f1, probe_embeddings,
    retrieval_acc_at_k, split_queries, Clustering, EmbedMode, EmbeddingSet, EvalReport, Linkage,
};
use crate::model::{compose_adapters, load_checkpoint, save_checkpoint, Backbone, Checkpoint, PicsoModel};
use crate::numerics::{Parameterized, Tensor2D};
use crate::trainer::{
    load_config, module_seed, restore_progress, store_progress, tiny_gradient_check, RunConfig, TrainConfig,
    TrainReport, TrainState, Trainer,
};
use crate::{Error, Result};

pub const INSTANCES_FILE: &str = "instances.jsonl";
pub const VOCAB_FILE: &str = "vocab.json";
pub const SYNSETS_FILE: &str = "synsets.jsonl";
pub const STATS_FILE: &str = "stats.json";
pub const REPORT_FILE: &str = "report.json";
pub const TRAIN_REPORT_FILE: &str = "train_report.json";

#[derive(Debug, Parser)]
#[command(name = "picso", version, about = "Entity-aware adapter pre-training and evaluation")]
pub struct Cli {
    /// Log progress to stderr (repeat for more detail).
    #[arg(short, long, global = true, action = clap::ArgAction::Count)]
    pub verbose: u8,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Build, filter and balance a marked-instance corpus.
    BuildCorpus(BuildCorpusArgs),
    /// Train one domain adapter against the frozen backbone.
    Pretrain(PretrainArgs),
    /// Evaluate a checkpoint.
    #[command(subcommand)]
    Eval(EvalCommand),
}

#[derive(Debug, Args)]
pub struct BuildCorpusArgs {
    /// Output directory.
    #[arg(long)]
    pub out: PathBuf,
    /// Generate `NxSxC[xF]` synthetic synsets instead of reading files.
    #[arg(long, conflicts_with_all = ["synsets", "sentences"])]
    pub synthetic: Option<String>,
    /// Synset JSONL file (uid, surfaces, domain).
    #[arg(long, requires = "sentences")]
    pub synsets: Option<PathBuf>,
    /// Entity-marked sentence JSONL shards.
    #[arg(long, num_args = 1.., requires = "synsets")]
    pub sentences: Vec<PathBuf>,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    #[arg(long, default_value_t = DEFAULT_MIN_EDIT)]
    pub min_edit: usize,
    #[arg(long, default_value_t = DEFAULT_CAP_PER_UID)]
    pub cap_per_uid: usize,
}

#[derive(Debug, Args)]
pub struct PretrainArgs {
    /// Corpus directory written by `build-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    /// Output checkpoint directory.
    #[arg(long)]
    pub out: PathBuf,
    /// `key = value` settings file.
    #[arg(long, conflicts_with = "resume")]
    pub config: Option<PathBuf>,
    /// Overrides the configured training seed.
    #[arg(long, conflicts_with = "resume")]
    pub seed: Option<u64>,
    #[arg(long, default_value = "general", conflicts_with = "resume")]
    pub domain: String,
    /// Existing checkpoint whose backbone and adapters are kept; the new
    /// adapter is added next to them.
    #[arg(long, conflicts_with = "resume")]
    pub checkpoint: Option<PathBuf>,
    /// Continue the interrupted run saved in this checkpoint.
    #[arg(long)]
    pub resume: Option<PathBuf>,
    /// Stop (and save) once this many epochs are complete.
    #[arg(long)]
    pub stop_after_epoch: Option<usize>,
    /// Leave the retrieval queries out of training.
    #[arg(long, conflicts_with = "resume")]
    pub holdout: bool,
}

#[derive(Debug, Subcommand)]
pub enum EvalCommand {
    /// Held-out same-uid retrieval Acc@k.
    Retrieval(RetrievalArgs),
    /// HAC clustering of instances scored against their uids.
    Canonicalize(CanonicalizeArgs),
    /// Context ambiguity probe over shared surfaces.
    Probe(ProbeArgs),
    /// Finite-difference check of the training gradient on a tiny model.
    Gradcheck(GradcheckArgs),
}

#[derive(Debug, Args)]
pub struct EmbedSource {
    /// Corpus directory written by `build-corpus`.
    #[arg(long)]
    pub corpus: PathBuf,
    #[arg(long, required_unless_present = "oracle")]
    pub checkpoint: Option<PathBuf>,
    /// Adapter to use when the checkpoint holds several.
    #[arg(long)]
    pub domain: Option<String>,
    #[arg(long, value_enum, default_value = "pretrain-pooled")]
    pub mode: ModeArg,
    /// Use one-hot-per-uid embeddings instead of a model.
    #[arg(long, conflicts_with = "checkpoint")]
    pub oracle: bool,
    /// Directory for the JSON report; printed to stdout when absent.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, clap::ValueEnum)]
pub enum ModeArg {
    PretrainPooled,
    FeatureExtractor,
}

impl From<ModeArg> for EmbedMode {
    fn from(m: ModeArg) -> Self {
        match m {
            ModeArg::PretrainPooled => EmbedMode::PretrainPooled,
            ModeArg::FeatureExtractor => EmbedMode::FeatureExtractor,
        }
    }
}

#[derive(Debug, Args)]
pub struct RetrievalArgs {
    #[command(flatten)]
    pub source: EmbedSource,
    #[arg(long, default_value_t = 1)]
    pub k: usize,
}

#[derive(Debug, Args)]
pub struct CanonicalizeArgs {
    #[command(flatten)]
    pub source: EmbedSource,
    #[arg(long, default_value = "average")]
    pub linkage: Linkage,
    /// Cosine distance above which clusters stop merging.
    #[arg(long, default_value_t = 0.5)]
    pub threshold: f64,
}

#[derive(Debug, Args)]
pub struct ProbeArgs {
    #[command(flatten)]
    pub source: EmbedSource,
}

#[derive(Debug, Args)]
pub struct GradcheckArgs {
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Largest accepted relative error.
    #[arg(long, default_value_t = 1e-5)]
    pub tolerance: f64,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

/// Outcome of one command.
#[derive(Debug, Clone, PartialEq)]
pub struct CommandResult {
    /// 0 success, 1 usage error, 2 data error, 3 numeric failure.
    pub code: i32,
    pub summary: String,
    pub report: Option<PathBuf>,
}

impl CommandResult {
    fn ok(summary: String, report: Option<PathBuf>) -> Self {
        Self {
            code: 0,
            summary,
            report,
        }
    }

    fn failed(e: &Error) -> Self {
        Self {
            code: exit_code(e),
            summary: format!("error: {e}"),
            report: None,
        }
    }
}

pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Config(_) => 1,
        Error::NonFinite(_) | Error::DegenerateRow { .. } => 3,
        _ => 2,
    }
}

/// Parses `args` (program name first) and runs the command.
pub fn run_from_args<I, T>(args: I) -> CommandResult
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    match Cli::try_parse_from(args) {
        Ok(cli) => run(&cli),
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            CommandResult {
                code,
                summary: e.to_string(),
                report: None,
            }
        }
    }
}

pub fn run(cli: &Cli) -> CommandResult {
    let out = match &cli.command {
        Command::BuildCorpus(a) => cmd_build_corpus(a),
        Command::Pretrain(a) => cmd_pretrain(a),
        Command::Eval(e) => cmd_eval(e),
    };
    out.unwrap_or_else(|e| CommandResult::failed(&e))
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    let mut text = serde_json::to_string_pretty(value)?;
    text.push('\n');
    fs::write(path, text)?;
    Ok(())
}

pub fn cmd_build_corpus(a: &BuildCorpusArgs) -> Result<CommandResult> {
    let (source, synsets, vocab, instances) = match (&a.synthetic, &a.synsets) {
        (Some(spec), _) => {
            let parsed = SyntheticSpec::parse(spec)?;
            let sc = generate_synthetic_corpus(&parsed, a.seed)?;
            (json!({ "synthetic": parsed }), sc.synsets, sc.vocab, sc.instances)
        }
        (None, Some(path)) => {
            let synsets = read_synsets(path)?;
            let (vocab, instances) = read_marked_sentences(&a.sentences, &synsets)?;
            let fingerprint = corpus_fingerprint(&instances);
            (json!({ "marked_sentences": fingerprint }), synsets, vocab, instances)
        }
        (None, None) => {
            return Err(Error::Config("give --synthetic or --synsets with --sentences".into()));
        }
    };
    let opts = BuildOptions {
        min_edit: a.min_edit,
        cap_per_uid: a.cap_per_uid,
        balance: BalanceConfig {
            seed: a.seed,
            ..BalanceConfig::default()
        },
        seed: a.seed,
    };
    let built = build_corpus(instances, &synsets, &vocab, &opts)?;

    fs::create_dir_all(&a.out)?;
    write_instances(&a.out.join(INSTANCES_FILE), &built.instances, &vocab)?;
    write_vocab(&a.out.join(VOCAB_FILE), &vocab)?;
    write_synsets(&a.out.join(SYNSETS_FILE), &synsets)?;
    write_json(&a.out.join(STATS_FILE), &built.stats)?;
    let report = json!({
        "command": "build-corpus",
        "config": { "source": source, "options": opts },
        "instances": built.instances.len(),
        "dropped_instances": built.dropped_instances,
        "kept_pairs": built.kept_pairs.len(),
        "vocab_size": vocab.len(),
        "stats": built.stats,
        "corpus_fingerprint": corpus_fingerprint(&built.instances),
    });
    let path = a.out.join(REPORT_FILE);
    write_json(&path, &report)?;
    Ok(CommandResult::ok(
        format!(
            "{} instances over {} uids ({} dropped by the pair filter)",
            built.instances.len(),
            built.stats.uid_count,
            built.dropped_instances
        ),
        Some(path),
    ))
}

/// Reads the instances and vocabulary of a corpus directory.
pub fn load_corpus(dir: &Path) -> Result<(Vocabulary, Vec<Instance>)> {
    let vocab = read_vocab(&dir.join(VOCAB_FILE))?;
    let instances = read_instances(&dir.join(INSTANCES_FILE), &vocab)?;
    Ok((vocab, instances))
}

fn training_subset(instances: Vec<Instance>, holdout: bool) -> Vec<Instance> {
    if !holdout {
        return instances;
    }
    let (_, candidates) = split_queries(&instances);
    candidates.into_iter().map(|i| instances[i].clone()).collect()
}

const RUN_KEY: &str = "run";

#[derive(Debug, Clone, Serialize, serde::Deserialize)]
struct RunInfo {
    config: RunConfig,
    domain: String,
    holdout: bool,
    corpus_fingerprint: String,
}

pub fn cmd_pretrain(a: &PretrainArgs) -> Result<CommandResult> {
    let (vocab, instances) = load_corpus(&a.corpus)?;

    let (mut ckpt, mut state, info) = if let Some(dir) = &a.resume {
        let ckpt = load_checkpoint(dir)?;
        let info: RunInfo = ckpt
            .extra
            .get(RUN_KEY)
            .cloned()
            .map(serde_json::from_value)
            .transpose()?
            .ok_or_else(|| Error::Checkpoint("checkpoint was not written by pretrain".into()))?;
        let (state, saved) = restore_progress(&ckpt)?;
        if saved != info.config.train {
            return Err(Error::Checkpoint("saved training settings disagree".into()));
        }
        (ckpt, state, info)
    } else {
        let mut run = match &a.config {
            Some(p) => load_config(p)?,
            None => RunConfig::default(),
        };
        if let Some(seed) = a.seed {
            run.train.seed = seed;
        }
        run.train.validate()?;
        let ckpt = match &a.checkpoint {
            Some(dir) => {
                let base = load_checkpoint(dir)?;
                if a.config.is_some() && run.model != base.config {
                    return Err(Error::Config(
                        "--config model settings differ from the base checkpoint".into(),
                    ));
                }
                run.model = base.config.clone();
                base
            }
            None => {
                run.model.vocab_size = vocab.len();
                run.model.validate()?;
                Checkpoint::new(Backbone::new(&run.model)?, Vec::new())
            }
        };
        if ckpt.modules.iter().any(|m| m.domain() == a.domain) {
            return Err(Error::Incompatible(format!("domain '{}' already has an adapter", a.domain)));
        }
        let module = crate::model::DomainModule::new(&run.model, &a.domain, module_seed(run.train.seed, &a.domain))?;
        let state = TrainState::new(module, &run.train);
        let info = RunInfo {
            config: run,
            domain: a.domain.clone(),
            holdout: a.holdout,
            corpus_fingerprint: String::new(),
        };
        (ckpt, state, info)
    };

    let train_set = training_subset(instances, info.holdout);
    let fingerprint = corpus_fingerprint(&train_set);
    if a.resume.is_some() && fingerprint != info.corpus_fingerprint {
        return Err(Error::Checkpoint("corpus differs from the one the run started on".into()));
    }
    let info = RunInfo {
        corpus_fingerprint: fingerprint,
        ..info
    };
    let cfg: TrainConfig = info.config.train.clone();

    let others: Vec<_> = ckpt.modules.iter().filter(|m| m.domain() != info.domain).cloned().collect();
    let backbone_before = ckpt.backbone.checksum();
    let adapters_before: std::collections::BTreeMap<String, String> = others
        .iter()
        .chain(std::iter::once(&state.module))
        .map(|m| (m.domain().to_string(), m.checksum()))
        .collect();

    let trainer = Trainer::new(&ckpt.backbone, &train_set, &cfg)?;
    let until = a.stop_after_epoch.unwrap_or(cfg.epochs);
    trainer.run(&mut state, until)?;

    let mut modules = others.clone();
    modules.push(state.module.clone());
    ckpt.modules = modules;
    if !ckpt.extra.is_object() {
        ckpt.extra = json!({});
    }
    ckpt.extra[RUN_KEY] = serde_json::to_value(&info)?;
    store_progress(&mut ckpt, &state, &cfg)?;
    save_checkpoint(&a.out, &ckpt)?;

    let report = TrainReport {
        domain: info.domain.clone(),
        epoch_losses: state.epoch_losses.clone(),
        steps: state.steps,
        excluded_instances: trainer.excluded_instances(),
        backbone_checksum_before: backbone_before,
        backbone_checksum_after: ckpt.backbone.checksum(),
        adapter_checksums_before: adapters_before,
        adapter_checksums_after: ckpt.modules.iter().map(|m| (m.domain().to_string(), m.checksum())).collect(),
        wall_time: Default::default(),
    };
    let path = a.out.join(TRAIN_REPORT_FILE);
    write_json(
        &path,
        &json!({
            "command": "pretrain",
            "config": info.config,
            "holdout": info.holdout,
            "completed_epochs": state.completed_epochs,
            "report": report,
            "corpus_fingerprint": info.corpus_fingerprint,
        }),
    )?;
    let losses: Vec<String> = state.epoch_losses.iter().map(|l| format!("{l:.4}")).collect();
    Ok(CommandResult::ok(
        format!(
            "trained '{}' for {} epochs ({} steps); epoch losses [{}]",
            info.domain,
            state.completed_epochs,
            state.steps,
            losses.join(", ")
        ),
        Some(path),
    ))
}

/// One-hot-per-uid rows, the ideal embedding for every metric here.
pub fn oracle_embeddings(instances: &[Instance]) -> Result<EmbeddingSet> {
    let uids: Vec<&str> = {
        let set: std::collections::BTreeSet<&str> = instances.iter().map(|i| i.uid.as_str()).collect();
        set.into_iter().collect()
    };
    let mut m = Tensor2D::zeros(instances.len(), uids.len().max(1));
    for (r, inst) in instances.iter().enumerate() {
        let c = uids.binary_search(&inst.uid.as_str()).expect("collected above");
        m.set(r, c, 1.0);
    }
    EmbeddingSet::new(m, instances.iter().map(|i| i.uid.clone()).collect())
}

fn load_model(path: &Path, domain: Option<&str>) -> Result<PicsoModel> {
    let ckpt = load_checkpoint(path)?;
    let modules = match domain {
        Some(d) => {
            let m = ckpt
                .modules
                .iter()
                .find(|m| m.domain() == d)
                .cloned()
                .ok_or_else(|| Error::MissingAdapter(format!("checkpoint has no adapter for '{d}'")))?;
            vec![m]
        }
        None => ckpt.modules,
    };
    compose_adapters(ckpt.backbone, modules)
}

struct Loaded {
    instances: Vec<Instance>,
    model: Option<PicsoModel>,
    echo: serde_json::Value,
}

fn load_source(s: &EmbedSource) -> Result<Loaded> {
    let (_, instances) = load_corpus(&s.corpus)?;
    let model = match &s.checkpoint {
        Some(p) if !s.oracle => Some(load_model(p, s.domain.as_deref())?),
        _ => None,
    };
    let echo = json!({
        "mode": EmbedMode::from(s.mode),
        "oracle": s.oracle,
        "domain": model.as_ref().map(|m| m.domains().join(",")),
        "backbone_checksum": model.as_ref().map(|m| m.backbone.checksum()),
        "adapter_checksums": model.as_ref().map(|m| m.modules.iter().map(|x| x.checksum()).collect::<Vec<_>>()),
    });
    Ok(Loaded { instances, model, echo })
}

fn embed(l: &Loaded, s: &EmbedSource, instances: &[Instance]) -> Result<EmbeddingSet> {
    match &l.model {
        Some(m) => embed_instances(m, instances, s.mode.into()),
        None => oracle_embeddings(instances),
    }
}

fn finish(report: EvalReport, out: Option<&Path>, summary: String) -> Result<CommandResult> {
    match out {
        Some(dir) => {
            fs::create_dir_all(dir)?;
            let path = dir.join(format!("{}_{REPORT_FILE}", report.task));
            write_json(&path, &report)?;
            Ok(CommandResult::ok(summary, Some(path)))
        }
        None => Ok(CommandResult::ok(serde_json::to_string_pretty(&report)?, None)),
    }
}

pub fn cmd_eval(e: &EvalCommand) -> Result<CommandResult> {
    match e {
        EvalCommand::Retrieval(a) => {
            let l = load_source(&a.source)?;
            let (q, c) = split_queries(&l.instances);
            let pick = |idx: &[usize]| idx.iter().map(|&i| l.instances[i].clone()).collect::<Vec<_>>();
            let queries = embed(&l, &a.source, &pick(&q))?;
            let candidates = embed(&l, &a.source, &pick(&c))?;
            let acc = retrieval_acc_at_k(&queries, &candidates, a.k)?;
            let mut echo = l.echo.clone();
            echo["k"] = json!(a.k);
            let report = EvalReport {
                task: "retrieval".into(),
                metrics: [
                    (format!("acc_at_{}", a.k), acc),
                    ("queries".into(), q.len() as f64),
                    ("candidates".into(), c.len() as f64),
                ]
                .into(),
                config: echo,
                corpus_fingerprint: corpus_fingerprint(&l.instances),
            };
            finish(report, a.source.out.as_deref(), format!("Acc@{} = {acc:.4} over {} queries", a.k, q.len()))
        }
        EvalCommand::Canonicalize(a) => {
            let l = load_source(&a.source)?;
            let emb = embed(&l, &a.source, &l.instances)?;
            let pred = hac_cluster(&emb.matrix, a.linkage, a.threshold)?;
            let gold = Clustering::from_labels(&emb.uids);
            let f = macro_micro_f1(&pred, &gold)?;
            let mut echo = l.echo.clone();
            echo["linkage"] = json!(a.linkage);
            echo["threshold"] = json!(a.threshold);
            let report = EvalReport {
                task: "canonicalize".into(),
                metrics: [
                    ("macro_precision".to_string(), f.macro_precision),
                    ("macro_recall".into(), f.macro_recall),
                    ("macro_f1".into(), f.macro_f1),
                    ("micro_precision".into(), f.micro_precision),
                    ("micro_recall".into(), f.micro_recall),
                    ("micro_f1".into(), f.micro_f1),
                    ("clusters".into(), pred.clusters().len() as f64),
                    ("gold_clusters".into(), gold.clusters().len() as f64),
                ]
                .into(),
                config: echo,
                corpus_fingerprint: corpus_fingerprint(&l.instances),
            };
            let summary = format!("macro F1 {:.4}, micro F1 {:.4}", f.macro_f1, f.micro_f1);
            finish(report, a.source.out.as_deref(), summary)
        }
        EvalCommand::Probe(a) => {
            let l = load_source(&a.source)?;
            let r = match &l.model {
                Some(m) if matches!(a.source.mode, ModeArg::PretrainPooled) => ambiguity_probe(m, &l.instances)?,
                _ => {
                    let emb = embed(&l, &a.source, &l.instances)?;
                    let surfaces: Vec<&[usize]> = l.instances.iter().map(Instance::entity_tokens).collect();
                    probe_embeddings(&emb, &surfaces)?
                }
            };
            let report = EvalReport {
                task: "probe".into(),
                metrics: [
                    ("same_uid_similarity".to_string(), r.same_uid_similarity),
                    ("same_surface_diff_uid_similarity".into(), r.same_surface_diff_uid_similarity),
                    ("margin".into(), r.margin),
                    ("ambiguous_surfaces".into(), r.ambiguous_surfaces as f64),
                ]
                .into(),
                config: l.echo.clone(),
                corpus_fingerprint: corpus_fingerprint(&l.instances),
            };
            finish(report, a.source.out.as_deref(), format!("ambiguity margin {:.4}", r.margin))
        }
        EvalCommand::Gradcheck(a) => {
            let objective = TrainConfig::default().objective();
            let r = tiny_gradient_check(a.seed, &objective)?;
            let report = EvalReport {
                task: "gradcheck".into(),
                metrics: [
                    ("max_rel_error".to_string(), r.max_rel_error),
                    ("checked_elements".into(), r.checked_elements as f64),
                ]
                .into(),
                config: json!({ "seed": a.seed, "tolerance": a.tolerance, "worst": r.worst }),
                corpus_fingerprint: String::new(),
            };
            let passed = r.max_rel_error <= a.tolerance;
            let summary = format!(
                "max relative error {:.3e} over {} elements ({})",
                r.max_rel_error,
                r.checked_elements,
                if passed { "ok" } else { "FAILED" }
            );
            let mut res = finish(report, a.out.as_deref(), summary)?;
            if !passed {
                res.code = 3;
            }
            Ok(res)
        }
    }
}

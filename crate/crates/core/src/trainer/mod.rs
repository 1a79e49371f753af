//! Deterministic pre-training of one domain module (adapter plus aggregator)
//! against a frozen backbone, continual multi-domain injection and
//! resumable checkpoints.

mod adam;
mod config;

use std::collections::BTreeMap;
use std::time::{Duration, Instant};

use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub use adam::{Adam, AdamConfig};
pub use config::{load_config, parse_config, LrSchedule, ObjectiveKind, RunConfig, TrainConfig, CONFIG_KEYS};

use crate::corpus::{generate_synthetic_corpus, make_grouped_batches, BatchPlan, Instance, SyntheticSpec};
use crate::loss::{BatchEmbeddings, Objective};
use crate::model::{Backbone, Checkpoint, DomainModule, ModelConfig};
use crate::numerics::tape::Tape;
use crate::numerics::{check_gradient, GradCheckReport, Parameterized, Tensor2D};
use crate::{Error, Result};

/// Mutable progress of one training job.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainState {
    pub module: DomainModule,
    pub optimizer: Adam,
    pub completed_epochs: usize,
    pub steps: usize,
    /// Mean per-anchor loss of every finished epoch.
    pub epoch_losses: Vec<f64>,
}

impl TrainState {
    pub fn new(module: DomainModule, cfg: &TrainConfig) -> Self {
        Self {
            module,
            optimizer: Adam::new(cfg.adam),
            completed_epochs: 0,
            steps: 0,
            epoch_losses: Vec::new(),
        }
    }

    fn finished(&self, cfg: &TrainConfig) -> bool {
        self.completed_epochs >= cfg.epochs || cfg.max_steps.is_some_and(|m| self.steps >= m)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct TrainReport {
    pub domain: String,
    pub epoch_losses: Vec<f64>,
    pub steps: usize,
    /// Instances left out of every batch for lack of a same-uid partner.
    pub excluded_instances: usize,
    pub backbone_checksum_before: String,
    pub backbone_checksum_after: String,
    pub adapter_checksums_before: BTreeMap<String, String>,
    pub adapter_checksums_after: BTreeMap<String, String>,
    /// Not serialized so reports stay byte-reproducible.
    #[serde(skip)]
    pub wall_time: Duration,
}

impl PartialEq for TrainReport {
    fn eq(&self, other: &Self) -> bool {
        self.domain == other.domain
            && self.epoch_losses == other.epoch_losses
            && self.steps == other.steps
            && self.excluded_instances == other.excluded_instances
            && self.backbone_checksum_before == other.backbone_checksum_before
            && self.backbone_checksum_after == other.backbone_checksum_after
            && self.adapter_checksums_before == other.adapter_checksums_before
            && self.adapter_checksums_after == other.adapter_checksums_after
    }
}

/// Seed of the batch order in `epoch`; independent of earlier epochs so a
/// run can resume at any epoch boundary.
pub fn epoch_seed(seed: u64, epoch: usize) -> u64 {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(epoch as u64 + 1);
    rng.next_u64()
}

/// Backbone states of every instance; the backbone is frozen so these are
/// computed once per job.
pub fn encode_corpus(backbone: &Backbone, corpus: &[Instance]) -> Result<Vec<Vec<Tensor2D>>> {
    corpus.iter().map(|inst| backbone.forward(&inst.tokens)).collect()
}

/// Forward, loss and backward for one batch of `corpus` (with cached
/// backbone `states`); gradients of the mean per-anchor loss are accumulated
/// into `module`. Returns the summed per-anchor loss and the number of
/// contributing anchors.
pub fn accumulate_batch(
    module: &mut DomainModule,
    corpus: &[Instance],
    states: &[Vec<Tensor2D>],
    batch: &[usize],
    objective: &Objective,
) -> Result<(f64, usize)> {
    let (grads, loss, n) = {
        let m: &DomainModule = module;
        let mut tapes = Vec::with_capacity(batch.len());
        let mut rows = Vec::with_capacity(batch.len());
        let mut uids = Vec::with_capacity(batch.len());
        for &i in batch {
            let inst = &corpus[i];
            let mut tape = Tape::new();
            let v = m.pooled_on_tape(&mut tape, &states[i], inst.p_s, inst.p_e)?;
            rows.push(tape.value(v).row(0).to_vec());
            uids.push(inst.uid.clone());
            tapes.push((tape, v));
        }
        let out = objective.compute(&BatchEmbeddings::new(Tensor2D::from_rows(&rows)?, uids)?)?;
        let n = out.contributing();
        let scale = 1.0 / n as f64;
        let mut grads = Vec::with_capacity(batch.len());
        for (r, (tape, v)) in tapes.iter().enumerate() {
            let g = out.grad.row(r);
            if g.iter().all(|&x| x == 0.0) {
                continue;
            }
            grads.push(tape.backward(*v, Tensor2D::row_vector(g).scale(scale))?);
        }
        (grads, out.loss, n)
    };
    for g in &grads {
        g.accumulate_into(module)?;
    }
    Ok((loss, n))
}

/// Mean per-anchor loss of one batch, forward only.
pub fn batch_loss(
    module: &DomainModule,
    corpus: &[Instance],
    states: &[Vec<Tensor2D>],
    batch: &[usize],
    objective: &Objective,
) -> Result<f64> {
    let rows = batch
        .iter()
        .map(|&i| {
            let inst = &corpus[i];
            Ok(module.pooled(&states[i], inst.p_s, inst.p_e)?.row(0).to_vec())
        })
        .collect::<Result<Vec<_>>>()?;
    let uids = batch.iter().map(|&i| corpus[i].uid.clone()).collect();
    let out = objective.compute(&BatchEmbeddings::new(Tensor2D::from_rows(&rows)?, uids)?)?;
    Ok(out.loss / out.contributing() as f64)
}

/// Central-difference check of the batch loss gradient with respect to
/// every trainable parameter of `module`.
pub fn gradient_check(
    backbone: &Backbone,
    module: &mut DomainModule,
    corpus: &[Instance],
    batch: &[usize],
    objective: &Objective,
    h: f64,
) -> Result<GradCheckReport> {
    let states = encode_corpus(backbone, corpus)?;
    module.zero_grad();
    accumulate_batch(module, corpus, &states, batch, objective)?;
    let report = check_gradient(module, |m| batch_loss(m, corpus, &states, batch, objective), h);
    module.zero_grad();
    report
}

/// [`gradient_check`] on the tiny model shape with a batch of four: two
/// uids with two instances each.
pub fn tiny_gradient_check(seed: u64, objective: &Objective) -> Result<GradCheckReport> {
    let sc = generate_synthetic_corpus(&SyntheticSpec::parse("2x2x1")?, seed)?;
    let mut cfg = ModelConfig::tiny(sc.vocab.len());
    cfg.backbone_seed = seed;
    let backbone = Backbone::new(&cfg)?;
    let mut module = DomainModule::new(&cfg, "check", seed)?;
    let batch: Vec<usize> = (0..sc.instances.len()).collect();
    gradient_check(&backbone, &mut module, &sc.instances, &batch, objective, 1e-5)
}

fn plan(corpus: &[Instance], cfg: &TrainConfig, epoch: usize) -> Result<BatchPlan> {
    make_grouped_batches(corpus, cfg.batch_size, cfg.group_size, epoch_seed(cfg.seed, epoch))
}

/// Runs training epochs over a fixed corpus.
pub struct Trainer<'a> {
    corpus: &'a [Instance],
    cfg: TrainConfig,
    states: Vec<Vec<Tensor2D>>,
    planned_steps: usize,
    excluded: usize,
}

impl<'a> Trainer<'a> {
    pub fn new(backbone: &Backbone, corpus: &'a [Instance], cfg: &TrainConfig) -> Result<Self> {
        cfg.validate()?;
        let first = plan(corpus, cfg, 0)?;
        let planned_steps = cfg.max_steps.unwrap_or(first.batches.len() * cfg.epochs);
        Ok(Self {
            corpus,
            cfg: cfg.clone(),
            states: encode_corpus(backbone, corpus)?,
            planned_steps,
            excluded: first.excluded.len(),
        })
    }

    pub fn config(&self) -> &TrainConfig {
        &self.cfg
    }

    /// Instances the epoch-0 plan leaves out for lack of a same-uid partner.
    pub fn excluded_instances(&self) -> usize {
        self.excluded
    }

    fn learning_rate(&self, step: usize) -> f64 {
        match self.cfg.lr_schedule {
            LrSchedule::Constant => self.cfg.learning_rate,
            LrSchedule::Linear => {
                let left = self.planned_steps.saturating_sub(step) as f64;
                self.cfg.learning_rate * left / self.planned_steps.max(1) as f64
            }
        }
    }

    /// Mean per-anchor loss of `module` over the batches of `epoch`,
    /// without updating anything.
    pub fn evaluate_epoch(&self, module: &DomainModule, epoch: usize) -> Result<f64> {
        let objective = self.cfg.objective();
        let (mut sum, mut count) = (0.0, 0usize);
        for batch in &plan(self.corpus, &self.cfg, epoch)?.batches {
            let rows = batch
                .iter()
                .map(|&i| {
                    let inst = &self.corpus[i];
                    Ok(module.pooled(&self.states[i], inst.p_s, inst.p_e)?.row(0).to_vec())
                })
                .collect::<Result<Vec<_>>>()?;
            let uids = batch.iter().map(|&i| self.corpus[i].uid.clone()).collect();
            let out = objective.compute(&BatchEmbeddings::new(Tensor2D::from_rows(&rows)?, uids)?)?;
            sum += out.loss;
            count += out.contributing();
        }
        Ok(sum / count.max(1) as f64)
    }

    /// Trains until `until_epoch` epochs are complete (capped by the
    /// configured epochs and step limit).
    pub fn run(&self, state: &mut TrainState, until_epoch: usize) -> Result<()> {
        let objective = self.cfg.objective();
        let until = until_epoch.min(self.cfg.epochs);
        while state.completed_epochs < until && !state.finished(&self.cfg) {
            let epoch = state.completed_epochs;
            let plan = plan(self.corpus, &self.cfg, epoch)?;
            let (mut sum, mut count) = (0.0, 0usize);
            for batch in &plan.batches {
                if state.finished(&self.cfg) {
                    break;
                }
                state.module.zero_grad();
                let (loss, n) = accumulate_batch(&mut state.module, self.corpus, &self.states, batch, &objective)?;
                if !loss.is_finite() {
                    return Err(Error::NonFinite(format!(
                        "loss diverged at epoch {epoch}, step {}",
                        state.steps
                    )));
                }
                let lr = self.learning_rate(state.steps);
                state.optimizer.step(&mut state.module, lr).map_err(|e| match e {
                    Error::NonFinite(what) => {
                        Error::NonFinite(format!("{what} at epoch {epoch}, step {}", state.steps))
                    }
                    other => other,
                })?;
                state.steps += 1;
                sum += loss;
                count += n;
            }
            let mean = sum / count.max(1) as f64;
            log::info!("epoch {epoch}: mean loss {mean:.6} after {} steps", state.steps);
            state.epoch_losses.push(mean);
            state.completed_epochs += 1;
        }
        Ok(())
    }
}

fn report(
    backbone: &Backbone,
    backbone_before: String,
    state: &TrainState,
    trained_before: String,
    others: &[DomainModule],
    others_before: BTreeMap<String, String>,
    excluded: usize,
    started: Instant,
) -> TrainReport {
    let domain = state.module.domain().to_string();
    let mut before = others_before;
    before.insert(domain.clone(), trained_before);
    let mut after: BTreeMap<String, String> =
        others.iter().map(|m| (m.domain().to_string(), m.checksum())).collect();
    after.insert(domain.clone(), state.module.checksum());
    TrainReport {
        domain,
        epoch_losses: state.epoch_losses.clone(),
        steps: state.steps,
        excluded_instances: excluded,
        backbone_checksum_before: backbone_before,
        backbone_checksum_after: backbone.checksum(),
        adapter_checksums_before: before,
        adapter_checksums_after: after,
        wall_time: started.elapsed(),
    }
}

/// Continues `state` to completion, reporting checksums of the backbone and
/// of `others`, which are only read.
pub fn resume_training(
    backbone: &Backbone,
    others: &[DomainModule],
    state: TrainState,
    corpus: &[Instance],
    cfg: &TrainConfig,
) -> Result<(TrainState, TrainReport)> {
    let started = Instant::now();
    let backbone_before = backbone.checksum();
    let others_before = others.iter().map(|m| (m.domain().to_string(), m.checksum())).collect();
    let trained_before = state.module.checksum();
    let trainer = Trainer::new(backbone, corpus, cfg)?;
    let mut state = state;
    trainer.run(&mut state, cfg.epochs)?;
    let rep = report(
        backbone,
        backbone_before,
        &state,
        trained_before,
        others,
        others_before,
        trainer.excluded,
        started,
    );
    Ok((state, rep))
}

/// Trains one adapter and its aggregator on `corpus`.
pub fn train_adapter(
    backbone: &Backbone,
    module: DomainModule,
    corpus: &[Instance],
    cfg: &TrainConfig,
) -> Result<(DomainModule, TrainReport)> {
    let (state, rep) = resume_training(backbone, &[], TrainState::new(module, cfg), corpus, cfg)?;
    Ok((state.module, rep))
}

/// Seed used to initialize a fresh domain module.
pub fn module_seed(seed: u64, domain: &str) -> u64 {
    domain
        .bytes()
        .fold(seed ^ 0xcbf2_9ce4_8422_2325, |h, b| (h ^ u64::from(b)).wrapping_mul(0x100_0000_01b3))
}

/// Trains a fresh module for `domain` next to `existing` ones, which stay
/// untouched.
pub fn continual_train(
    backbone: &Backbone,
    existing: &[DomainModule],
    domain: &str,
    corpus: &[Instance],
    cfg: &TrainConfig,
) -> Result<(DomainModule, TrainReport)> {
    let expected = backbone.config.adapter_signature();
    for m in existing {
        if m.adapter.signature != expected {
            return Err(Error::Incompatible(format!(
                "existing adapter '{}' does not match the backbone configuration",
                m.domain()
            )));
        }
        if m.domain() == domain {
            return Err(Error::Incompatible(format!("domain '{domain}' already has an adapter")));
        }
    }
    let module = DomainModule::new(&backbone.config, domain, module_seed(cfg.seed, domain))?;
    let (state, rep) = resume_training(backbone, existing, TrainState::new(module, cfg), corpus, cfg)?;
    Ok((state.module, rep))
}

#[derive(Debug, Serialize, Deserialize)]
struct SavedProgress {
    domain: String,
    config: TrainConfig,
    completed_epochs: usize,
    steps: usize,
    epoch_losses: Vec<f64>,
    optimizer_step: u64,
}

const TRAIN_KEY: &str = "train";

/// Stores training progress and optimizer moments in `ckpt`. The module
/// itself must already be among `ckpt.modules`.
pub fn store_progress(ckpt: &mut Checkpoint, state: &TrainState, cfg: &TrainConfig) -> Result<()> {
    let domain = state.module.domain();
    if !ckpt.modules.iter().any(|m| m.domain() == domain) {
        return Err(Error::Checkpoint(format!("checkpoint lacks module '{domain}'")));
    }
    let progress = SavedProgress {
        domain: domain.to_string(),
        config: cfg.clone(),
        completed_epochs: state.completed_epochs,
        steps: state.steps,
        epoch_losses: state.epoch_losses.clone(),
        optimizer_step: state.optimizer.step,
    };
    if !ckpt.extra.is_object() {
        ckpt.extra = serde_json::json!({});
    }
    ckpt.extra[TRAIN_KEY] = serde_json::to_value(progress)?;
    ckpt.tensors.retain(|k, _| !k.starts_with("adam."));
    for (name, t) in &state.optimizer.m {
        ckpt.tensors.insert(format!("adam.m.{name}"), t.clone());
    }
    for (name, t) in &state.optimizer.v {
        ckpt.tensors.insert(format!("adam.v.{name}"), t.clone());
    }
    Ok(())
}

/// Rebuilds the training state saved by [`store_progress`].
pub fn restore_progress(ckpt: &Checkpoint) -> Result<(TrainState, TrainConfig)> {
    let raw = ckpt
        .extra
        .get(TRAIN_KEY)
        .ok_or_else(|| Error::Checkpoint("checkpoint holds no training progress".into()))?;
    let p: SavedProgress =
        serde_json::from_value(raw.clone()).map_err(|e| Error::Checkpoint(format!("training progress: {e}")))?;
    let module = ckpt
        .modules
        .iter()
        .find(|m| m.domain() == p.domain)
        .cloned()
        .ok_or_else(|| Error::Checkpoint(format!("checkpoint lacks module '{}'", p.domain)))?;
    let mut optimizer = Adam::new(p.config.adam);
    optimizer.step = p.optimizer_step;
    for (key, t) in &ckpt.tensors {
        if let Some(name) = key.strip_prefix("adam.m.") {
            optimizer.m.insert(name.to_string(), t.clone());
        } else if let Some(name) = key.strip_prefix("adam.v.") {
            optimizer.v.insert(name.to_string(), t.clone());
        }
    }
    let state = TrainState {
        module,
        optimizer,
        completed_epochs: p.completed_epochs,
        steps: p.steps,
        epoch_losses: p.epoch_losses,
    };
    Ok((state, p.config))
}

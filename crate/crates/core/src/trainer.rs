//! Margin-ranking training: sampler → encoder → decoder → backward →
//! sparse Adam, with per-key constraints applied as updates land.
//!
//! The trainer body is runtime-agnostic: parameter reads and writes go
//! through [`ParameterAccess`]. The local runtime backs it with an
//! in-process map; the distributed runtime with parameter-server
//! clients. Both apply the identical per-key update rule, which is what
//! makes a single-worker distributed run reproduce the local run.

use std::collections::HashMap;
use std::path::{Path, PathBuf};
use std::time::Instant;

use log::info;

use crate::adam::{adam_apply, AdamHyper, AdamSlot, AdamState};
use crate::checkpoint;
use crate::decoder::{self, DecoderKind, Norm};
use crate::encoder::{Encoder, EncoderConfig, EncoderKind, Session};
use crate::error::{KgError, Result};
use crate::eval;
use crate::params::{ModelSpec, ParamKey, ParamKind, ParamSet};
use crate::rng::{self, Stream};
use crate::sampler::{corrupt, sample_subgraph, CorruptedTriple, SamplerConfig, SubGraph};
use crate::store::{EntityId, KnowledgeGraph, Triple};
use crate::tape::{GradMap, NodeId, Tape};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub learning_rate: f64,
    pub batch_size: usize,
    pub margin: f64,
    pub epochs: usize,
    pub decoder: DecoderKind,
    pub encoder: EncoderKind,
    pub norm: Norm,
    pub seed: u64,
    pub adam: AdamHyper,
    /// Early stopping on validation filtered HR@10; `None` disables it.
    pub early_stop_patience: Option<usize>,
    pub checkpoints_to_keep: usize,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            learning_rate: 0.001,
            batch_size: 256,
            margin: 1.0,
            epochs: 10,
            decoder: DecoderKind::TransH,
            encoder: EncoderKind::Gnn,
            norm: Norm::L2,
            seed: 0,
            adam: AdamHyper::default(),
            early_stop_patience: None,
            checkpoints_to_keep: 2,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.learning_rate <= 0.0 {
            return Err(KgError::config("train.lr", "learning rate must be positive"));
        }
        if self.batch_size == 0 {
            return Err(KgError::config("train.batch_size", "batch size must be ≥ 1"));
        }
        if self.margin <= 0.0 {
            return Err(KgError::config("train.margin", "margin must be positive"));
        }
        Ok(())
    }

    pub fn hyper(&self) -> AdamHyper {
        AdamHyper {
            lr: self.learning_rate,
            ..self.adam
        }
    }
}

/// One epoch's summary; serialized as a CSV row
/// `epoch,loss,seconds,active_pairs`.
#[derive(Debug, Clone, PartialEq)]
pub struct EpochReport {
    pub epoch: usize,
    pub mean_loss: f64,
    pub seconds: f64,
    pub active_pairs: usize,
}

pub fn reports_to_csv(reports: &[EpochReport]) -> String {
    let mut out = String::from("epoch,loss,seconds,active_pairs\n");
    for r in reports {
        out.push_str(&format!(
            "{},{},{},{}\n",
            r.epoch, r.mean_loss, r.seconds, r.active_pairs
        ));
    }
    out
}

/// Where parameters live during training.
pub trait ParameterAccess {
    /// Snapshot of the requested keys.
    fn pull(&mut self, keys: &[ParamKey]) -> Result<ParamSet>;
    /// Applies sparse gradients (Adam plus per-key constraints) where
    /// the parameters live.
    fn push(&mut self, grads: GradMap) -> Result<()>;
}

/// Adam step plus post-step constraint for one key. Shared verbatim by
/// the local runtime and the shard servers.
pub fn apply_push(
    key: ParamKey,
    value: &mut Tensor,
    slot: &mut AdamSlot,
    grad: &Tensor,
    hyper: &AdamHyper,
    spec: &ModelSpec,
) -> Result<()> {
    if grad.numel() != value.numel() {
        return Err(KgError::Dimension(format!(
            "push for {key}: gradient has {} values, parameter {}",
            grad.numel(),
            value.numel()
        )));
    }
    adam_apply(slot, value, grad, hyper);
    decoder::apply_key_constraint(key, value, spec)
}

/// Single-process parameter store.
pub struct LocalParams {
    pub params: ParamSet,
    pub adam: AdamState,
    pub hyper: AdamHyper,
    pub spec: ModelSpec,
}

impl LocalParams {
    /// Initializes every parameter and applies the constraint sweep so
    /// the starting point already satisfies the model constraints.
    pub fn init(spec: &ModelSpec, hyper: AdamHyper) -> Result<Self> {
        let mut params = spec.init_all()?;
        decoder::post_step_constraints(&mut params, spec)?;
        Ok(LocalParams {
            params,
            adam: AdamState::new(),
            hyper,
            spec: spec.clone(),
        })
    }
}

impl ParameterAccess for LocalParams {
    fn pull(&mut self, keys: &[ParamKey]) -> Result<ParamSet> {
        let mut out = ParamSet::new();
        for &k in keys {
            out.insert(k, self.params.get(k)?.clone());
        }
        Ok(out)
    }

    fn push(&mut self, grads: GradMap) -> Result<()> {
        for (key, grad) in grads {
            let value = self
                .params
                .get_mut(key)
                .ok_or_else(|| KgError::Lookup(format!("push to unknown key {key}")))?;
            let slot = self.adam.slot_mut(key, value.shape());
            apply_push(key, value, slot, &grad, &self.hyper.clone(), &self.spec)?;
        }
        Ok(())
    }
}

/// `hinge(pos + λ − neg)`.
pub fn margin_loss(tape: &mut Tape, pos: NodeId, neg: NodeId, margin: f64) -> Result<NodeId> {
    let m = tape.constant(Tensor::scalar(margin))?;
    let pm = tape.add(pos, m)?;
    let diff = tape.sub(pm, neg)?;
    tape.hinge(diff)
}

/// Everything decided about a batch before parameters are touched:
/// negatives, the shared subgraph, and the exact key set to pull.
pub struct BatchPlan {
    pub positives: Vec<Triple>,
    pub negatives: Vec<Vec<CorruptedTriple>>,
    pub subgraph: Option<SubGraph>,
    pub entities: Vec<EntityId>,
    pub keys: Vec<ParamKey>,
}

#[derive(Debug)]
pub struct BatchResult {
    pub loss_sum: f64,
    pub pairs: usize,
    pub active_pairs: usize,
    pub grads: GradMap,
}

pub struct Trainer<'a> {
    pub graph: &'a KnowledgeGraph,
    pub spec: &'a ModelSpec,
    pub cfg: &'a TrainConfig,
    pub enc_cfg: &'a EncoderConfig,
    pub samp_cfg: &'a SamplerConfig,
}

impl<'a> Trainer<'a> {
    /// Corrupts the batch, samples one shared subgraph seeded by every
    /// positive and corrupted entity, and lists the keys to pull.
    pub fn plan_batch<R: rand::Rng>(&self, batch: &[Triple], rng: &mut R) -> Result<BatchPlan> {
        if batch.is_empty() {
            return Err(KgError::Contract("train_batch: empty batch".into()));
        }
        let mut negatives = Vec::with_capacity(batch.len());
        for t in batch {
            negatives.push(corrupt(t, self.graph, self.samp_cfg, rng)?);
        }

        let mut entities = Vec::new();
        let mut seen = std::collections::HashSet::new();
        let mut push_entity = |e: EntityId, entities: &mut Vec<EntityId>| {
            if seen.insert(e) {
                entities.push(e);
            }
        };
        for (t, negs) in batch.iter().zip(&negatives) {
            push_entity(t.head, &mut entities);
            push_entity(t.tail, &mut entities);
            for n in negs {
                push_entity(n.triple.head, &mut entities);
                push_entity(n.triple.tail, &mut entities);
            }
        }

        let subgraph = match self.cfg.encoder {
            EncoderKind::Gnn => Some(sample_subgraph(&entities, self.graph, self.samp_cfg, rng)?),
            EncoderKind::Lookup => None,
        };

        let mut keys = Vec::new();
        match &subgraph {
            Some(sg) => {
                if self.spec.uses_free_entity_rows() {
                    for node in &sg.nodes {
                        if (node.0 as u64) < self.spec.n_entities as u64 {
                            keys.push(ParamKey::new(ParamKind::EntityEmb, node.0 as u64));
                        }
                    }
                }
                for entries in &sg.sampled {
                    for e in entries {
                        let key = match e.direction {
                            crate::store::Direction::Outgoing => {
                                self.spec.attn_rel_out(e.relation.0)
                            }
                            crate::store::Direction::Incoming => {
                                self.spec.attn_rel_in(e.relation.0)
                            }
                        };
                        keys.push(key);
                    }
                }
                keys.push(ParamKey::new(ParamKind::AttnWeight, crate::params::ATTN_U));
                keys.push(ParamKey::new(ParamKind::AttnWeight, crate::params::ATTN_W));
                for id in 0..8 {
                    keys.push(ParamKey::new(ParamKind::LstmWeight, id));
                }
                if self.spec.attribute_path() {
                    keys.push(ParamKey::new(ParamKind::AttrProj, crate::params::ATTR_PROJ));
                }
            }
            None => {
                for e in &entities {
                    keys.push(ParamKey::new(ParamKind::EntityEmb, e.0 as u64));
                }
            }
        }
        for t in batch {
            keys.push(self.spec.decoder_rel(t.relation.0));
            match self.cfg.decoder {
                DecoderKind::TransH => {
                    keys.push(ParamKey::new(ParamKind::Hyperplane, t.relation.0 as u64))
                }
                DecoderKind::TransR => {
                    keys.push(ParamKey::new(ParamKind::ProjMatrix, t.relation.0 as u64))
                }
                _ => {}
            }
        }
        keys.sort();
        keys.dedup();

        Ok(BatchPlan {
            positives: batch.to_vec(),
            negatives,
            subgraph,
            entities,
            keys,
        })
    }

    /// Forward + backward over a planned batch against a parameter
    /// snapshot. Gradients that are numerically all-zero are elided.
    pub fn run_batch(&self, plan: &BatchPlan, snapshot: &ParamSet) -> Result<BatchResult> {
        let encoder = Encoder {
            spec: self.spec,
            cfg: self.enc_cfg,
            graph: self.graph,
            snapshot,
        };
        let mut sess = Session::new();
        let encoded = match &plan.subgraph {
            Some(sg) => encoder.encode(&mut sess, sg)?,
            None => encoder.lookup_encode(&mut sess, &plan.entities)?,
        };

        let mut total: Option<NodeId> = None;
        let mut pairs = 0;
        let mut active_pairs = 0;
        for (t, negs) in plan.positives.iter().zip(&plan.negatives) {
            let pos = self.score_triple(&mut sess, snapshot, &encoded.embeddings, t)?;
            for neg in negs {
                let neg_e =
                    self.score_triple(&mut sess, snapshot, &encoded.embeddings, &neg.triple)?;
                let pair = margin_loss(&mut sess.tape, pos, neg_e, self.cfg.margin)?;
                if sess.tape.value(pair).item() > 0.0 {
                    active_pairs += 1;
                }
                pairs += 1;
                total = Some(match total {
                    None => pair,
                    Some(acc) => sess.tape.add(acc, pair)?,
                });
            }
        }
        let total = total.ok_or_else(|| KgError::Contract("batch produced no pairs".into()))?;
        let loss_sum = sess.tape.value(total).item();
        let mut grads = sess.tape.backward(total)?;
        grads.retain(|_, g| g.data().iter().any(|&v| v != 0.0));
        Ok(BatchResult {
            loss_sum,
            pairs,
            active_pairs,
            grads,
        })
    }

    fn score_triple(
        &self,
        sess: &mut Session,
        snapshot: &ParamSet,
        embeddings: &HashMap<EntityId, NodeId>,
        t: &Triple,
    ) -> Result<NodeId> {
        let h = *embeddings
            .get(&t.head)
            .ok_or_else(|| KgError::Contract(format!("missing encoding for {}", t.head.0)))?;
        let tl = *embeddings
            .get(&t.tail)
            .ok_or_else(|| KgError::Contract(format!("missing encoding for {}", t.tail.0)))?;
        let r = sess.param_node(snapshot, self.spec.decoder_rel(t.relation.0))?;
        let extra = match self.cfg.decoder {
            DecoderKind::TransH => Some(sess.param_node(
                snapshot,
                ParamKey::new(ParamKind::Hyperplane, t.relation.0 as u64),
            )?),
            DecoderKind::TransR => Some(sess.param_node(
                snapshot,
                ParamKey::new(ParamKind::ProjMatrix, t.relation.0 as u64),
            )?),
            _ => None,
        };
        decoder::score(
            &mut sess.tape,
            self.cfg.decoder,
            self.cfg.norm,
            h,
            r,
            extra,
            tl,
        )
    }

    /// Plan, pull, forward/backward, push: one full step. This is the
    /// worker-side unit of work in every runtime.
    pub fn train_batch<R: rand::Rng>(
        &self,
        batch: &[Triple],
        access: &mut dyn ParameterAccess,
        rng: &mut R,
    ) -> Result<BatchResult> {
        let plan = self.plan_batch(batch, rng)?;
        let snapshot = access.pull(&plan.keys)?;
        let result = self.run_batch(&plan, &snapshot)?;
        if !result.grads.is_empty() {
            access.push(result.grads.clone())?;
        }
        Ok(result)
    }
}

/// Shuffled batch list for one epoch; identical on every worker given
/// the same seed, so striping by worker id partitions it exactly.
pub fn epoch_batches(
    triples: &[Triple],
    batch_size: usize,
    seed: u64,
    epoch: usize,
) -> Vec<Vec<Triple>> {
    use rand::seq::SliceRandom;
    let mut order: Vec<usize> = (0..triples.len()).collect();
    let mut rng = rng::stream(seed, Stream::Shuffle, epoch as u64, 0);
    order.shuffle(&mut rng);
    order
        .chunks(batch_size.max(1))
        .map(|chunk| chunk.iter().map(|&i| triples[i]).collect())
        .collect()
}

/// Checkpoint directory for an epoch: `<out>/checkpoints/epoch-NNNN/`.
pub fn epoch_dir(out_dir: &Path, epoch: usize) -> PathBuf {
    out_dir.join("checkpoints").join(format!("epoch-{epoch:04}"))
}

pub fn write_latest_marker(out_dir: &Path, epoch: usize) -> Result<()> {
    let dir = out_dir.join("checkpoints");
    std::fs::create_dir_all(&dir)?;
    std::fs::write(dir.join("LATEST"), format!("{epoch}\n"))?;
    Ok(())
}

pub fn read_latest_marker(out_dir: &Path) -> Result<usize> {
    let text = std::fs::read_to_string(out_dir.join("checkpoints").join("LATEST"))?;
    text.trim()
        .parse()
        .map_err(|_| KgError::Checkpoint("unreadable LATEST marker".into()))
}

fn prune_checkpoints(out_dir: &Path, upto_epoch: usize, keep: usize) {
    // Keeps the newest `keep` epoch directories plus nothing else.
    if upto_epoch + 1 > keep {
        for old in 0..=(upto_epoch - keep) {
            let dir = epoch_dir(out_dir, old);
            if dir.exists() {
                let _ = std::fs::remove_dir_all(&dir);
            }
        }
    }
}

fn checkpoint_local(params: &ParamSet, out_dir: &Path, epoch: usize, keep: usize) -> Result<()> {
    let dir = epoch_dir(out_dir, epoch);
    let entries: Vec<(ParamKey, Tensor)> =
        params.iter().map(|(k, v)| (*k, v.clone())).collect();
    checkpoint::write(&dir.join("shard-0000.kgnn"), entries)?;
    write_latest_marker(out_dir, epoch)?;
    prune_checkpoints(out_dir, epoch, keep);
    Ok(())
}

pub struct TrainOutcome {
    pub params: ParamSet,
    pub reports: Vec<EpochReport>,
}

/// Local single-threaded training. Deterministic: the same config and
/// seed reproduce identical checkpoints bit for bit.
pub fn train_local(
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    valid: &[Triple],
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    enc_cfg.validate()?;
    samp_cfg.validate()?;
    let mut access = LocalParams::init(spec, cfg.hyper())?;
    let trainer = Trainer {
        graph,
        spec,
        cfg,
        enc_cfg,
        samp_cfg,
    };
    if let Some(dir) = out_dir {
        checkpoint_local(&access.params, dir, 0, cfg.checkpoints_to_keep)?;
    }

    let mut reports = Vec::with_capacity(cfg.epochs);
    let mut best_hr10 = f64::NEG_INFINITY;
    let mut epochs_since_best = 0usize;
    let mut last_grad_suspect: Option<ParamKey> = None;

    for epoch in 0..cfg.epochs {
        let start = Instant::now();
        let batches = epoch_batches(&graph.triples, cfg.batch_size, cfg.seed, epoch);
        let mut loss_sum = 0.0;
        let mut pair_count = 0usize;
        let mut active = 0usize;
        for (batch_idx, batch) in batches.iter().enumerate() {
            let mut rng = rng::stream(cfg.seed, Stream::Batch, epoch as u64, batch_idx as u64);
            let result = trainer
                .train_batch(batch, &mut access, &mut rng)
                .map_err(|e| wrap_non_finite(e, epoch, batch_idx, last_grad_suspect))?;
            if !result.loss_sum.is_finite() {
                return Err(KgError::NonFiniteLoss {
                    epoch,
                    batch: batch_idx,
                    suspect: last_grad_suspect.map(|k| k.to_string()),
                });
            }
            last_grad_suspect = max_grad_key(&result.grads);
            loss_sum += result.loss_sum;
            pair_count += result.pairs;
            active += result.active_pairs;
        }
        let report = EpochReport {
            epoch: epoch + 1,
            mean_loss: if pair_count > 0 {
                loss_sum / pair_count as f64
            } else {
                0.0
            },
            seconds: start.elapsed().as_secs_f64(),
            active_pairs: active,
        };
        info!(
            "epoch {} mean_loss={:.6} active_pairs={} ({:.2}s)",
            report.epoch, report.mean_loss, report.active_pairs, report.seconds
        );
        reports.push(report);
        if let Some(dir) = out_dir {
            checkpoint_local(&access.params, dir, epoch + 1, cfg.checkpoints_to_keep)?;
        }

        if let Some(patience) = cfg.early_stop_patience {
            if !valid.is_empty() {
                let hr10 = eval::validation_hr10(
                    graph,
                    spec,
                    cfg,
                    enc_cfg,
                    samp_cfg,
                    &access.params,
                    valid,
                )?;
                if hr10 > best_hr10 {
                    best_hr10 = hr10;
                    epochs_since_best = 0;
                } else {
                    epochs_since_best += 1;
                    if epochs_since_best >= patience {
                        info!("early stop after epoch {} (HR@10 {:.4})", epoch + 1, best_hr10);
                        break;
                    }
                }
            }
        }
    }

    Ok(TrainOutcome {
        params: access.params,
        reports,
    })
}

fn wrap_non_finite(
    e: KgError,
    epoch: usize,
    batch: usize,
    suspect: Option<ParamKey>,
) -> KgError {
    match e {
        KgError::NonFinite { .. } => KgError::NonFiniteLoss {
            epoch,
            batch,
            suspect: suspect.map(|k| k.to_string()),
        },
        other => other,
    }
}

fn max_grad_key(grads: &GradMap) -> Option<ParamKey> {
    grads
        .iter()
        .map(|(k, g)| {
            let m = g.data().iter().fold(0.0f64, |a, &v| a.max(v.abs()));
            (*k, m)
        })
        .max_by(|a, b| a.1.total_cmp(&b.1))
        .map(|(k, _)| k)
}

/// Which runtime executes the loop.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Runtime {
    Local,
    Distributed { workers: usize, shards: usize },
}

/// Trains under the chosen runtime. The loop body is identical either
/// way; only parameter access differs.
#[allow(clippy::too_many_arguments)]
pub fn train(
    graph: &KnowledgeGraph,
    spec: &ModelSpec,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    samp_cfg: &SamplerConfig,
    valid: &[Triple],
    runtime: Runtime,
    out_dir: Option<&Path>,
) -> Result<TrainOutcome> {
    match runtime {
        Runtime::Local => train_local(graph, spec, cfg, enc_cfg, samp_cfg, valid, out_dir),
        Runtime::Distributed { workers, shards } => crate::ps::run_distributed(
            graph, spec, cfg, enc_cfg, samp_cfg, workers, shards, out_dir,
        ),
    }
}

/// Builds the model layout implied by a graph plus configs.
pub fn model_spec(
    graph: &KnowledgeGraph,
    cfg: &TrainConfig,
    enc_cfg: &EncoderConfig,
    share_relation_tables: bool,
) -> ModelSpec {
    ModelSpec {
        dim: enc_cfg.dim,
        attention_hidden: enc_cfg.attention_hidden,
        n_entities: graph.n_train_entities,
        n_relations: graph.n_relations(),
        inverse_edges: graph.inverse_edges,
        share_relation_tables,
        decoder: cfg.decoder,
        encoder: cfg.encoder,
        use_attributes: enc_cfg.use_attributes,
        attr_dim: graph.attributes.as_ref().map(|a| a.dim()),
        init_seed: cfg.seed,
    }
}

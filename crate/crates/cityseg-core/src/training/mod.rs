//! Two-stage training, replay-based incremental fine-tuning, zero-shot
//! inference, and evaluation.
//!
//! Stage 1 merges every label to its base class and trains the point
//! network with cross-entropy against frozen hierarchical text anchors.
//! Stage 2 trains everything (graph encoder included) at each domain's
//! annotated granularity with the sibling hinge term added
//! (`L = L_CE + α·L_h`).
//! The optimizer is momentum SGD under a one-cycle schedule; optimizer
//! state is re-initialized at each stage boundary.
//!
//! Training log lines: `epoch<TAB>stage<TAB>loss_ce<TAB>loss_hinge<TAB>lr`.

mod loss;
mod optim;

pub use loss::{
    ce_loss, ce_loss_grads, class_prob, hinge_loss, hinge_loss_grads, total_loss, LossGrads,
    Prediction,
};
pub use optim::{derive_seed, one_cycle_lr, SgdMomentum};

use std::collections::BTreeMap;
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::eval::{ConfusionMatrix, MetricsReport};
use crate::hierarchy::{
    embed_labels, graph_encode, graph_encode_backward, graph_layer_count, EmbeddingProvider,
    LabelHierarchy, NodeId, TextEmbeddings,
};
use crate::network::{self, EncoderConfig};
use crate::numcore::ParamStore;
use crate::pcio::{DomainData, PointCloud};
use crate::sampling::{make_batch, SamplerConfig};

const EVAL_SEED_TAG: u64 = 0xE7A1;

/// Training hyperparameters. τ and the margin follow the contrastive
/// convention; α and the learning rate are the published settings.
#[derive(Debug, Clone, PartialEq)]
pub struct TrainConfig {
    pub tau: f64,
    pub margin: f64,
    pub alpha: f64,
    pub lr: f64,
    pub momentum: f64,
    pub epochs_stage1: usize,
    pub epochs_stage2: usize,
    pub epochs_finetune: usize,
    pub batches_per_scene: usize,
    pub eval_batches: usize,
    /// Points retained per old domain for replay.
    pub replay_budget: usize,
    pub warmup_frac: f64,
    /// Write a parameter snapshot every k epochs (0 = off).
    pub snapshot_every: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            tau: 0.07,
            margin: 1.0,
            alpha: 0.3,
            lr: 0.005,
            momentum: 0.9,
            epochs_stage1: 4,
            epochs_stage2: 6,
            epochs_finetune: 2,
            batches_per_scene: 1,
            eval_batches: 2,
            replay_budget: 4096,
            warmup_frac: 0.3,
            snapshot_every: 0,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0) {
            return Err(Error::Config(format!("tau {} must be > 0", self.tau)));
        }
        if !(self.margin > 0.0) {
            return Err(Error::Config(format!("margin {} must be > 0", self.margin)));
        }
        if self.alpha < 0.0 {
            return Err(Error::Config(format!("alpha {} must be ≥ 0", self.alpha)));
        }
        if !(self.lr > 0.0) {
            return Err(Error::Config(format!("lr {} must be > 0", self.lr)));
        }
        if !(0.0..1.0).contains(&self.momentum) {
            return Err(Error::Config(format!(
                "momentum {} must be in [0,1)",
                self.momentum
            )));
        }
        if self.batches_per_scene == 0 || self.eval_batches == 0 {
            return Err(Error::Config("batch counts must be ≥ 1".into()));
        }
        Ok(())
    }
}

/// Label handling of a training pass.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Stage {
    /// Labels merged to base classes; CE only.
    Base,
    /// Per-domain granularity; CE + α·hinge.
    Fine,
    /// Ablation: one flat label set (the union of every domain's labels),
    /// no merging, no hinge — the negative-transfer baseline.
    Flat,
}

impl Stage {
    fn index(self) -> u8 {
        match self {
            Stage::Base => 1,
            Stage::Fine => 2,
            Stage::Flat => 0,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct EpochLog {
    pub epoch: usize,
    pub stage: u8,
    pub loss_ce: f64,
    pub loss_hinge: f64,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub epochs: Vec<EpochLog>,
    /// Count of clamped `log(0)` events across the run.
    pub clamp_warnings: u64,
}

impl TrainLog {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut out = String::new();
        for e in &self.epochs {
            out.push_str(&format!(
                "{}\t{}\t{}\t{}\t{}\n",
                e.epoch, e.stage, e.loss_ce, e.loss_hinge, e.lr
            ));
        }
        std::fs::write(path, out).map_err(|e| Error::io(path, 0, e))
    }

    pub fn extend(&mut self, other: TrainLog) {
        self.epochs.extend(other.epochs);
        self.clamp_warnings += other.clamp_warnings;
    }

    pub fn final_ce(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.loss_ce)
    }
}

struct StepOutcome {
    ce: f64,
    hinge: f64,
    clamps: u64,
}

/// Truth labels and active set for one batch under a given stage.
fn batch_targets(
    stage: Stage,
    labels: &[u16],
    domain: u16,
    h: &LabelHierarchy,
    flat_union: &[NodeId],
) -> Result<(Vec<NodeId>, Vec<NodeId>)> {
    match stage {
        Stage::Base => {
            let truth = labels
                .iter()
                .map(|&l| h.merge_to_base(l))
                .collect::<Result<Vec<NodeId>>>()?;
            Ok((truth, h.base_ids()))
        }
        Stage::Fine => {
            let active = h.active_set(domain);
            for &l in labels {
                if active.binary_search(&l).is_err() {
                    return Err(Error::Data(format!(
                        "label {l} is not annotated by domain {domain}"
                    )));
                }
            }
            Ok((labels.to_vec(), active))
        }
        Stage::Flat => Ok((labels.to_vec(), flat_union.to_vec())),
    }
}

fn flat_union(datasets: &[DomainData], h: &LabelHierarchy) -> Vec<NodeId> {
    let mut union: Vec<NodeId> = datasets
        .iter()
        .flat_map(|d| h.active_set(d.domain_id))
        .collect();
    union.sort_unstable();
    union.dedup();
    union
}

#[allow(clippy::too_many_arguments)]
fn train_step(
    cloud: &PointCloud,
    domain: u16,
    stage: Stage,
    flat: &[NodeId],
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &mut ParamStore,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    graph_layers: usize,
    opt: &mut SgdMomentum,
    lr: f64,
) -> Result<StepOutcome> {
    let batch = make_batch(cloud, sampler)?;
    let labels = batch
        .local
        .labels()
        .ok_or_else(|| Error::Data("training scene has no labels".into()))?;
    let (truth, active) = batch_targets(stage, labels, domain, h, flat)?;

    let (hier_emb, graph_cache) = graph_encode(h, text, params, graph_layers)?;
    let (emb, net_cache) = network::forward(&batch, params, enc)?;

    let (ce, clamps, _, mut grads) = ce_loss_grads(&emb, &hier_emb, &active, cfg.tau, &truth)?;
    let hinge = if stage == Stage::Fine && cfg.alpha > 0.0 {
        let (hv, hgrads) = hinge_loss_grads(&emb, &truth, h, &hier_emb, cfg.margin)?;
        grads.merge_scaled(&hgrads, cfg.alpha)?;
        hv
    } else {
        0.0
    };

    params.zero_grads();
    network::backward(&net_cache, params, grads.d_emb.as_ref().expect("ce sets d_emb"))?;
    // Stage 1 keeps the hierarchical text anchors frozen (the graph encoder
    // does not train); a jointly free prototype side lets CE collapse every
    // row onto one vector that reproduces the class prior. Stage 2 trains
    // it, where the sibling hinge term pushes rows apart.
    if stage != Stage::Base {
        graph_encode_backward(h, &hier_emb, &graph_cache, params, &grads.d_rows)?;
    }
    opt.step(params, lr)?;
    Ok(StepOutcome { ce, hinge, clamps })
}

#[allow(clippy::too_many_arguments)]
fn run_stage(
    stage: Stage,
    datasets: &[DomainData],
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &mut ParamStore,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    epochs: usize,
    snapshot_dir: Option<&Path>,
) -> Result<TrainLog> {
    cfg.validate()?;
    enc.validate()?;
    let scenes: Vec<(&PointCloud, u16)> = datasets
        .iter()
        .flat_map(|d| d.train.iter().map(move |c| (c, d.domain_id)))
        .filter(|(c, _)| !c.is_empty())
        .collect();
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no non-empty training scenes".into()));
    }
    let flat = flat_union(datasets, h);
    let graph_layers = graph_layer_count(params);
    let steps_per_epoch = scenes.len() * cfg.batches_per_scene;
    let total_steps = epochs * steps_per_epoch;
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;
    for epoch in 0..epochs {
        let mut order: Vec<usize> = (0..scenes.len()).collect();
        let mut rng =
            ChaCha8Rng::seed_from_u64(derive_seed(cfg.seed, &[stage.index() as u64, epoch as u64]));
        for i in (1..order.len()).rev() {
            order.swap(i, rng.gen_range(0..=i));
        }
        let mut sum_ce = 0.0;
        let mut sum_hinge = 0.0;
        let mut last_lr = 0.0;
        for &scene_idx in &order {
            let (cloud, domain) = scenes[scene_idx];
            for b in 0..cfg.batches_per_scene {
                let step_sampler = SamplerConfig {
                    seed: derive_seed(
                        cfg.seed,
                        &[stage.index() as u64, epoch as u64, scene_idx as u64, b as u64],
                    ),
                    ..sampler.clone()
                };
                let lr = one_cycle_lr(global_step, total_steps, cfg.lr, cfg.warmup_frac);
                let out = train_step(
                    cloud,
                    domain,
                    stage,
                    &flat,
                    h,
                    text,
                    params,
                    enc,
                    &step_sampler,
                    cfg,
                    graph_layers,
                    &mut opt,
                    lr,
                )?;
                sum_ce += out.ce;
                sum_hinge += out.hinge;
                log.clamp_warnings += out.clamps;
                last_lr = lr;
                global_step += 1;
            }
        }
        let n = steps_per_epoch as f64;
        log.epochs.push(EpochLog {
            epoch,
            stage: stage.index(),
            loss_ce: sum_ce / n,
            loss_hinge: sum_hinge / n,
            lr: last_lr,
        });
        if let Some(dir) = snapshot_dir {
            if cfg.snapshot_every > 0 && (epoch + 1) % cfg.snapshot_every == 0 {
                params.save(
                    &dir.join(format!("params_stage{}_epoch{}.cspm", stage.index(), epoch + 1)),
                )?;
            }
        }
    }
    Ok(log)
}

/// Stage 1: base-class pretraining with cross-entropy only.
#[allow(clippy::too_many_arguments)]
pub fn train_stage1(
    datasets: &[DomainData],
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &mut ParamStore,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    snapshot_dir: Option<&Path>,
) -> Result<TrainLog> {
    run_stage(
        Stage::Base,
        datasets,
        h,
        text,
        params,
        enc,
        sampler,
        cfg,
        cfg.epochs_stage1,
        snapshot_dir,
    )
}

/// Stage 2: per-domain granularity with the sibling hinge term.
#[allow(clippy::too_many_arguments)]
pub fn train_stage2(
    datasets: &[DomainData],
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &mut ParamStore,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    snapshot_dir: Option<&Path>,
) -> Result<TrainLog> {
    run_stage(
        Stage::Fine,
        datasets,
        h,
        text,
        params,
        enc,
        sampler,
        cfg,
        cfg.epochs_stage2,
        snapshot_dir,
    )
}

/// Negative-transfer baseline: single-stage training on the flat union of
/// all labels with no merging and no hinge.
#[allow(clippy::too_many_arguments)]
pub fn train_flat(
    datasets: &[DomainData],
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &mut ParamStore,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    epochs: usize,
) -> Result<TrainLog> {
    run_stage(
        Stage::Flat, datasets, h, text, params, enc, sampler, cfg, epochs, None,
    )
}

/// How [`evaluate`] picks active sets and truth labels.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EvalMode {
    /// Truth merged to base classes; prediction over the base set.
    Base,
    /// Truth as annotated; prediction over the scene's domain label set.
    DomainGranularity,
    /// Truth as annotated; prediction over the flat union of all domains'
    /// labels (how a flat-trained model sees the world).
    FlatUnion,
}

/// Sampled evaluation over the eval split of each domain: every scene
/// contributes `eval_batches` deterministic local batches; metrics come
/// from the pooled confusion matrix.
#[allow(clippy::too_many_arguments)]
pub fn evaluate(
    datasets: &[DomainData],
    h: &LabelHierarchy,
    text: &TextEmbeddings,
    params: &ParamStore,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
    mode: EvalMode,
) -> Result<MetricsReport> {
    let graph_layers = graph_layer_count(params);
    let (hier_emb, _) = graph_encode(h, text, params, graph_layers)?;
    let flat = flat_union(datasets, h);
    let union: Vec<NodeId> = match mode {
        EvalMode::Base => h.base_ids(),
        EvalMode::DomainGranularity | EvalMode::FlatUnion => flat.clone(),
    };
    let index: BTreeMap<NodeId, usize> = union.iter().enumerate().map(|(i, &id)| (id, i)).collect();
    let mut cm = ConfusionMatrix::new(union.clone());
    for dataset in datasets {
        let active = match mode {
            EvalMode::Base => h.base_ids(),
            EvalMode::DomainGranularity => h.active_set(dataset.domain_id),
            EvalMode::FlatUnion => flat.clone(),
        };
        for (scene_idx, cloud) in dataset.eval.iter().enumerate() {
            if cloud.is_empty() {
                continue;
            }
            for b in 0..cfg.eval_batches {
                let step_sampler = SamplerConfig {
                    seed: derive_seed(
                        cfg.seed,
                        &[EVAL_SEED_TAG, dataset.domain_id as u64, scene_idx as u64, b as u64],
                    ),
                    ..sampler.clone()
                };
                let batch = make_batch(cloud, &step_sampler)?;
                let labels = batch
                    .local
                    .labels()
                    .ok_or_else(|| Error::Data("evaluation scene has no labels".into()))?;
                let truth: Vec<NodeId> = match mode {
                    EvalMode::Base => labels
                        .iter()
                        .map(|&l| h.merge_to_base(l))
                        .collect::<Result<_>>()?,
                    _ => labels.to_vec(),
                };
                let (emb, _) = network::forward(&batch, params, enc)?;
                let pred = class_prob(&emb, &hier_emb, &active, cfg.tau)?;
                let truth_idx: Vec<usize> = truth
                    .iter()
                    .map(|id| {
                        index.get(id).copied().ok_or_else(|| {
                            Error::Data(format!("truth label {id} outside the eval set"))
                        })
                    })
                    .collect::<Result<_>>()?;
                let pred_idx: Vec<usize> = pred.argmax.iter().map(|id| index[id]).collect();
                cm.add(&truth_idx, &pred_idx)?;
            }
        }
    }
    crate::eval::metrics(&cm)
}

/// Replay reservoir: up to `budget` points retained per old domain.
#[derive(Debug, Clone)]
pub struct ReplayBuffer {
    pub budget: usize,
    clouds: BTreeMap<u16, PointCloud>,
    /// Points seen per domain (reservoir counters).
    pub counters: BTreeMap<u16, u64>,
}

impl ReplayBuffer {
    /// Uniform reservoir sampling over every training point of each domain.
    pub fn fill(datasets: &[DomainData], budget: usize, seed: u64) -> Result<ReplayBuffer> {
        let mut clouds = BTreeMap::new();
        let mut counters = BTreeMap::new();
        if budget == 0 {
            return Ok(ReplayBuffer {
                budget,
                clouds,
                counters,
            });
        }
        for dataset in datasets {
            let mut rng =
                ChaCha8Rng::seed_from_u64(derive_seed(seed, &[0x5EED, dataset.domain_id as u64]));
            let mut reservoir: Vec<(usize, usize)> = Vec::with_capacity(budget); // (scene, point)
            let mut seen = 0u64;
            for (scene_idx, cloud) in dataset.train.iter().enumerate() {
                if cloud.labels().is_none() {
                    return Err(Error::Data("replay source scene has no labels".into()));
                }
                for point_idx in 0..cloud.len() {
                    if (seen as usize) < budget {
                        reservoir.push((scene_idx, point_idx));
                    } else {
                        let j = rng.gen_range(0..=seen);
                        if (j as usize) < budget {
                            reservoir[j as usize] = (scene_idx, point_idx);
                        }
                    }
                    seen += 1;
                }
            }
            if reservoir.is_empty() {
                continue;
            }
            // one replay cloud per domain, in deterministic (scene, point) order
            reservoir.sort_unstable();
            let template = &dataset.train[0];
            let mut positions = Vec::with_capacity(reservoir.len());
            let mut features = Vec::with_capacity(reservoir.len() * template.feature_count());
            let mut labels = Vec::with_capacity(reservoir.len());
            for &(scene_idx, point_idx) in &reservoir {
                let cloud = &dataset.train[scene_idx];
                positions.push(cloud.positions()[point_idx]);
                features.extend_from_slice(cloud.feature_row(point_idx));
                labels.push(cloud.labels().unwrap()[point_idx]);
            }
            let cloud = PointCloud::new(
                positions,
                features,
                template.channels().to_vec(),
                Some(labels),
                dataset.domain_id,
            )?;
            clouds.insert(dataset.domain_id, cloud);
            counters.insert(dataset.domain_id, seen);
        }
        Ok(ReplayBuffer {
            budget,
            clouds,
            counters,
        })
    }

    pub fn is_empty(&self) -> bool {
        self.clouds.is_empty()
    }

    pub fn domains(&self) -> Vec<u16> {
        self.clouds.keys().copied().collect()
    }

    pub fn cloud(&self, domain: u16) -> Option<&PointCloud> {
        self.clouds.get(&domain)
    }

    pub fn total_points(&self) -> usize {
        self.clouds.values().map(PointCloud::len).sum()
    }
}

/// Insert the new leaves, then fine-tune on the new domain with old-domain
/// replay batches mixed in 1:1 (stage-2 losses on both). Returns the
/// extended hierarchy, the new node ids, and the log.
#[allow(clippy::too_many_arguments)]
pub fn finetune_incremental(
    new_domain: &DomainData,
    new_leaves: &[(NodeId, String)],
    params: &mut ParamStore,
    h: &LabelHierarchy,
    provider: &EmbeddingProvider,
    replay: &ReplayBuffer,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    cfg: &TrainConfig,
) -> Result<(LabelHierarchy, Vec<NodeId>, TrainLog)> {
    cfg.validate()?;
    if cfg.replay_budget > 0 && replay.is_empty() {
        return Err(Error::Config(
            "replay_budget > 0 but the replay buffer is empty".into(),
        ));
    }
    let mut h2 = h.clone();
    let mut new_ids = Vec::new();
    for (parent, text) in new_leaves {
        let (next, id) = h2.insert_leaf(*parent, text)?;
        h2 = next;
        new_ids.push(id);
    }
    h2.apply_domain_levels(new_domain.domain_id, &new_domain.annotated_levels);
    let text = embed_labels(&h2, provider)?;
    let graph_layers = graph_layer_count(params);

    let scenes: Vec<&PointCloud> = new_domain.train.iter().filter(|c| !c.is_empty()).collect();
    if scenes.is_empty() {
        return Err(Error::EmptyInput("no non-empty fine-tuning scenes".into()));
    }
    let use_replay = cfg.replay_budget > 0;
    let replay_domains = replay.domains();
    let steps_per_epoch = scenes.len() * cfg.batches_per_scene * if use_replay { 2 } else { 1 };
    let total_steps = cfg.epochs_finetune * steps_per_epoch;
    let mut opt = SgdMomentum::new(cfg.momentum);
    let mut log = TrainLog::default();
    let mut global_step = 0usize;
    let mut replay_cursor = 0usize;
    let flat = Vec::new();
    for epoch in 0..cfg.epochs_finetune {
        let mut sum_ce = 0.0;
        let mut sum_hinge = 0.0;
        let mut last_lr = 0.0;
        for (scene_idx, cloud) in scenes.iter().enumerate() {
            for b in 0..cfg.batches_per_scene {
                let lr = one_cycle_lr(global_step, total_steps, cfg.lr, cfg.warmup_frac);
                let step_sampler = SamplerConfig {
                    seed: derive_seed(cfg.seed, &[3, epoch as u64, scene_idx as u64, b as u64]),
                    ..sampler.clone()
                };
                let out = train_step(
                    cloud,
                    new_domain.domain_id,
                    Stage::Fine,
                    &flat,
                    &h2,
                    &text,
                    params,
                    enc,
                    &step_sampler,
                    cfg,
                    graph_layers,
                    &mut opt,
                    lr,
                )?;
                sum_ce += out.ce;
                sum_hinge += out.hinge;
                log.clamp_warnings += out.clamps;
                last_lr = lr;
                global_step += 1;

                if use_replay {
                    let domain = replay_domains[replay_cursor % replay_domains.len()];
                    replay_cursor += 1;
                    let replay_cloud = replay.cloud(domain).expect("domain listed");
                    let lr = one_cycle_lr(global_step, total_steps, cfg.lr, cfg.warmup_frac);
                    let step_sampler = SamplerConfig {
                        seed: derive_seed(
                            cfg.seed,
                            &[4, epoch as u64, scene_idx as u64, b as u64, domain as u64],
                        ),
                        ..sampler.clone()
                    };
                    let out = train_step(
                        replay_cloud,
                        domain,
                        Stage::Fine,
                        &flat,
                        &h2,
                        &text,
                        params,
                        enc,
                        &step_sampler,
                        cfg,
                        graph_layers,
                        &mut opt,
                        lr,
                    )?;
                    sum_ce += out.ce;
                    sum_hinge += out.hinge;
                    log.clamp_warnings += out.clamps;
                    last_lr = lr;
                    global_step += 1;
                }
            }
        }
        let n = steps_per_epoch as f64;
        log.epochs.push(EpochLog {
            epoch,
            stage: 3,
            loss_ce: sum_ce / n,
            loss_hinge: sum_hinge / n,
            lr: last_lr,
        });
    }
    Ok((h2, new_ids, log))
}

/// Result of [`zero_shot_infer`].
#[derive(Debug, Clone)]
pub struct ZeroShotOutcome {
    pub pred: Prediction,
    pub batch: crate::sampling::LocalGlobalBatch,
    pub hierarchy: LabelHierarchy,
    pub new_ids: Vec<NodeId>,
}

/// Zero-shot inference: insert the new leaves into a copy of the hierarchy,
/// refresh the hierarchical embeddings with the frozen graph encoder, and
/// classify one sampled batch of the cloud over `active_base ∪ new leaves`.
/// Parameters are taken immutably — no update can occur.
#[allow(clippy::too_many_arguments)]
pub fn zero_shot_infer(
    cloud: &PointCloud,
    new_leaves: &[(NodeId, String)],
    params: &ParamStore,
    h: &LabelHierarchy,
    provider: &EmbeddingProvider,
    enc: &EncoderConfig,
    sampler: &SamplerConfig,
    tau: f64,
    active_base: &[NodeId],
) -> Result<ZeroShotOutcome> {
    let mut h2 = h.clone();
    let mut new_ids = Vec::new();
    for (parent, text) in new_leaves {
        let (next, id) = h2.insert_leaf(*parent, text)?;
        h2 = next;
        new_ids.push(id);
    }
    let text = embed_labels(&h2, provider)?;
    let graph_layers = graph_layer_count(params);
    let (hier_emb, _) = graph_encode(&h2, &text, params, graph_layers)?;
    let mut active = active_base.to_vec();
    active.extend_from_slice(&new_ids);
    active.sort_unstable();
    active.dedup();
    let batch = make_batch(cloud, sampler)?;
    let (emb, _) = network::forward(&batch, params, enc)?;
    let pred = class_prob(&emb, &hier_emb, &active, tau)?;
    Ok(ZeroShotOutcome {
        pred,
        batch,
        hierarchy: h2,
        new_ids,
    })
}

//! Subcommand implementations.

use std::path::Path;

use serde::Serialize;

use cityseg_core::eval::MetricsReport;
use cityseg_core::fixtures;
use cityseg_core::hierarchy::{embed_labels, LabelHierarchy, NodeId, TextEmbeddings};
use cityseg_core::network::init_params;
use cityseg_core::numcore::ParamStore;
use cityseg_core::pcio::{
    fill_missing_attributes, load_cloud, save_cloud, DatasetManifest, DomainData, FeatureSchema,
};
use cityseg_core::sampling::{grid_sample, serialize_order};
use cityseg_core::training::{
    self, evaluate, finetune_incremental, train_stage1, train_stage2, zero_shot_infer, EvalMode,
    ReplayBuffer,
};
use cityseg_core::{Error, Result};

use crate::config::RunConfig;

/// Everything a dataset directory provides.
struct Loaded {
    hierarchy: LabelHierarchy,
    datasets: Vec<DomainData>,
}

fn load_data(cfg: &RunConfig, dir: &Path) -> Result<Loaded> {
    let mut hierarchy = LabelHierarchy::load(&dir.join("hierarchy.tsv"))?;
    let manifest = DatasetManifest::load(&dir.join("manifest.tsv"))?;
    for entry in &manifest.entries {
        hierarchy.apply_domain_levels(entry.domain_id, &entry.annotated_levels);
    }
    let schema = FeatureSchema::default();
    let mut datasets = manifest.load_domains(dir)?;
    for dataset in &mut datasets {
        for cloud in dataset.train.iter_mut().chain(dataset.eval.iter_mut()) {
            *cloud = fill_missing_attributes(cloud, &schema)?;
        }
    }
    let _ = cfg;
    Ok(Loaded { hierarchy, datasets })
}

fn text_embeddings(cfg: &RunConfig, h: &LabelHierarchy) -> Result<TextEmbeddings> {
    embed_labels(h, &cfg.provider()?)
}

#[derive(Serialize)]
struct MetricsRecord<'a> {
    cmd: &'a str,
    granularity: &'a str,
    oa: f64,
    miou: f64,
    points: u64,
    per_class: Vec<(u16, f64)>,
}

fn print_report(cmd: &str, granularity: &str, report: &MetricsReport) -> Result<String> {
    println!("points evaluated: {}", report.points);
    for (label, iou) in &report.per_class {
        println!("class {label}: iou {iou:.4}");
    }
    println!("oa {:.4}  miou {:.4}", report.oa, report.miou);
    let record = MetricsRecord {
        cmd,
        granularity,
        oa: report.oa,
        miou: report.miou,
        points: report.points,
        per_class: report.per_class.clone(),
    };
    let line = serde_json::to_string(&record)
        .map_err(|e| Error::Config(format!("serialize metrics: {e}")))?;
    println!("{line}");
    Ok(line)
}

pub fn generate(cfg: &RunConfig, out: &Path, fixture: Option<&str>) -> Result<()> {
    let name = fixture.unwrap_or(&cfg.fixture);
    let fixture = fixtures::by_name(name, cfg.seed)?;
    fixtures::write_fixture(&fixture, out)?;
    let scenes: usize = fixture.datasets.iter().map(|d| d.train.len() + d.eval.len()).sum();
    let points: usize = fixture
        .datasets
        .iter()
        .flat_map(|d| d.train.iter().chain(&d.eval))
        .map(|c| c.len())
        .sum();
    println!(
        "generated fixture {name:?}: {} domains, {scenes} scenes, {points} points → {}",
        fixture.datasets.len(),
        out.display()
    );
    Ok(())
}

pub fn preprocess(cfg: &RunConfig, input: &Path, output: &Path) -> Result<()> {
    let cloud = load_cloud(input)?;
    let cloud = fill_missing_attributes(&cloud, &FeatureSchema::default())?;
    let sampled = grid_sample(&cloud, cfg.preprocess_cell)?;
    let result = match cfg.preprocess_serialize {
        Some(curve) => {
            let order = serialize_order(sampled.positions(), cfg.preprocess_cell, curve)?;
            let indices: Vec<usize> = order.iter().map(|&i| i as usize).collect();
            sampled.select(&indices)
        }
        None => sampled,
    };
    save_cloud(&result, output)?;
    println!(
        "preprocess: {} points → {} (cell {} m) → {}",
        cloud.len(),
        result.len(),
        cfg.preprocess_cell,
        output.display()
    );
    Ok(())
}

pub fn train(cfg: &RunConfig, data: &Path, out: &Path, stage: u8, init: Option<&Path>) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, 0, e))?;
    let loaded = load_data(cfg, data)?;
    let text = text_embeddings(cfg, &loaded.hierarchy)?;
    let mut params = match (stage, init) {
        (_, Some(path)) => ParamStore::load(path)?,
        (1, None) => init_params(&cfg.encoder, loaded.hierarchy.depth() as usize, cfg.seed)?,
        (2, None) => {
            let stage1 = out.join("params_stage1.cspm");
            if !stage1.exists() {
                return Err(Error::Config(format!(
                    "stage 2 needs --init or a stage-1 snapshot at {}",
                    stage1.display()
                )));
            }
            ParamStore::load(&stage1)?
        }
        _ => unreachable!("clap restricts stage to 1..=2"),
    };

    let log = match stage {
        1 => train_stage1(
            &loaded.datasets,
            &loaded.hierarchy,
            &text,
            &mut params,
            &cfg.encoder,
            &cfg.sampler,
            &cfg.train,
            Some(out),
        )?,
        _ => train_stage2(
            &loaded.datasets,
            &loaded.hierarchy,
            &text,
            &mut params,
            &cfg.encoder,
            &cfg.sampler,
            &cfg.train,
            Some(out),
        )?,
    };
    let snapshot = out.join(format!("params_stage{stage}.cspm"));
    params.save(&snapshot)?;
    log.write(&out.join(format!("train_stage{stage}.log")))?;
    for e in &log.epochs {
        println!(
            "epoch {} stage {} loss_ce {:.6} loss_hinge {:.6} lr {:.6}",
            e.epoch, e.stage, e.loss_ce, e.loss_hinge, e.lr
        );
    }
    if log.clamp_warnings > 0 {
        eprintln!("warning: {} clamped log(0) events", log.clamp_warnings);
    }
    let mode = if stage == 1 { EvalMode::Base } else { EvalMode::DomainGranularity };
    let report = evaluate(
        &loaded.datasets,
        &loaded.hierarchy,
        &text,
        &params,
        &cfg.encoder,
        &cfg.sampler,
        &cfg.train,
        mode,
    )?;
    print_report("train", if stage == 1 { "base" } else { "domain" }, &report)?;
    println!("snapshot → {}", snapshot.display());
    Ok(())
}

pub fn eval(
    cfg: &RunConfig,
    data: &Path,
    params: &Path,
    granularity: &str,
    json: Option<&Path>,
) -> Result<()> {
    let mode = match granularity {
        "base" => EvalMode::Base,
        "domain" => EvalMode::DomainGranularity,
        other => {
            return Err(Error::Config(format!(
                "unknown granularity {other:?} (expected base|domain)"
            )))
        }
    };
    let loaded = load_data(cfg, data)?;
    let text = text_embeddings(cfg, &loaded.hierarchy)?;
    let params = ParamStore::load(params)?;
    let report = evaluate(
        &loaded.datasets,
        &loaded.hierarchy,
        &text,
        &params,
        &cfg.encoder,
        &cfg.sampler,
        &cfg.train,
        mode,
    )?;
    let line = print_report("eval", granularity, &report)?;
    if let Some(path) = json {
        std::fs::write(path, line + "\n").map_err(|e| Error::io(path, 0, e))?;
    }
    Ok(())
}

fn parse_leaves(specs: &[String]) -> Result<Vec<(NodeId, String)>> {
    specs
        .iter()
        .map(|s| {
            let (parent, text) = s.split_once(':').ok_or_else(|| {
                Error::Config(format!("new leaf {s:?} must be `parent_id:text`"))
            })?;
            let parent: NodeId = parent
                .trim()
                .parse()
                .map_err(|_| Error::Config(format!("bad parent id in {s:?}")))?;
            Ok((parent, text.trim().to_string()))
        })
        .collect()
}

pub fn finetune(
    cfg: &RunConfig,
    data: &Path,
    new_data: &Path,
    params_path: &Path,
    out: &Path,
    new_leaves: &[String],
) -> Result<()> {
    std::fs::create_dir_all(out).map_err(|e| Error::io(out, 0, e))?;
    let old = load_data(cfg, data)?;
    let new = load_data(cfg, new_data)?;
    let new_domain = new
        .datasets
        .first()
        .ok_or_else(|| Error::EmptyInput("new-data manifest has no domains".into()))?;
    let mut params = ParamStore::load(params_path)?;
    let leaves = parse_leaves(new_leaves)?;
    let replay = ReplayBuffer::fill(&old.datasets, cfg.train.replay_budget, cfg.seed)?;
    // the old hierarchy carries both the old tags and (after finetune) the new
    let (h2, new_ids, log) = finetune_incremental(
        new_domain,
        &leaves,
        &mut params,
        &old.hierarchy,
        &cfg.provider()?,
        &replay,
        &cfg.encoder,
        &cfg.sampler,
        &cfg.train,
    )?;
    params.save(&out.join("params_finetuned.cspm"))?;
    h2.save(&out.join("hierarchy_extended.tsv"))?;
    log.write(&out.join("finetune.log"))?;
    println!("inserted leaves: {new_ids:?}");
    let text = embed_labels(&h2, &cfg.provider()?)?;
    let report = evaluate(
        &old.datasets,
        &h2,
        &text,
        &params,
        &cfg.encoder,
        &cfg.sampler,
        &cfg.train,
        EvalMode::DomainGranularity,
    )?;
    print_report("finetune_old_domains", "domain", &report)?;
    Ok(())
}

pub fn zeroshot(cfg: &RunConfig, data: &Path, params_path: &Path, new_leaves: &[String]) -> Result<()> {
    let loaded = load_data(cfg, data)?;
    let params = ParamStore::load(params_path)?;
    let leaves = parse_leaves(new_leaves)?;
    let checksum_before = params.checksum();
    let mut correct = 0u64;
    let mut total = 0u64;
    let mut active_size = 0usize;
    for dataset in &loaded.datasets {
        // classify against the deepest annotated level plus the new leaves
        let active: Vec<NodeId> = loaded.hierarchy.active_set(dataset.domain_id);
        for (i, cloud) in dataset.eval.iter().enumerate() {
            let sampler = cityseg_core::sampling::SamplerConfig {
                seed: training::derive_seed(cfg.seed, &[0x25, dataset.domain_id as u64, i as u64]),
                ..cfg.sampler.clone()
            };
            let out = zero_shot_infer(
                cloud,
                &leaves,
                &params,
                &loaded.hierarchy,
                &cfg.provider()?,
                &cfg.encoder,
                &sampler,
                cfg.train.tau,
                &active,
            )?;
            active_size = out.pred.active.len();
            let truth = out.batch.local.labels().ok_or_else(|| {
                Error::Data("zero-shot evaluation scene has no labels".into())
            })?;
            for (t, p) in truth.iter().zip(&out.pred.argmax) {
                total += 1;
                if t == p {
                    correct += 1;
                }
            }
        }
    }
    if total == 0 {
        return Err(Error::EmptyInput("no labeled eval scenes for zero-shot".into()));
    }
    let checksum_after = params.checksum();
    let accuracy = correct as f64 / total as f64;
    let chance = 1.0 / active_size.max(1) as f64;
    println!(
        "zero-shot accuracy {:.4} over {} points ({} labels, chance {:.4})",
        accuracy, total, active_size, chance
    );
    println!(
        "params checksum before {checksum_before:016x} after {checksum_after:016x} ({})",
        if checksum_before == checksum_after { "frozen" } else { "MUTATED" }
    );
    println!(
        "{}",
        serde_json::to_string(&serde_json::json!({
            "cmd": "zeroshot",
            "accuracy": accuracy,
            "points": total,
            "labels": active_size,
            "chance": chance,
            "params_frozen": checksum_before == checksum_after,
        }))
        .map_err(|e| Error::Config(format!("serialize record: {e}")))?
    );
    if checksum_before != checksum_after {
        return Err(Error::Numeric("zero-shot mutated the parameters".into()));
    }
    Ok(())
}

pub fn gradcheck(seeds: u64) -> Result<()> {
    let start = std::time::Instant::now();
    let checks = cityseg_core::gradsuite::run(seeds)?;
    let mut all_ok = true;
    for check in &checks {
        println!(
            "{:<18} max_rel_err {:.3e}  {}",
            check.name,
            check.max_err,
            if check.passed() { "ok" } else { "FAIL" }
        );
        all_ok &= check.passed();
    }
    println!(
        "gradcheck: {} components, {} seeds, {:.1}s",
        checks.len(),
        seeds,
        start.elapsed().as_secs_f64()
    );
    if !all_ok {
        return Err(Error::Numeric(format!(
            "gradient suite exceeded tolerance {}",
            cityseg_core::gradsuite::GRAD_TOLERANCE
        )));
    }
    Ok(())
}

//! End-to-end commands over dataset directories: train, evaluate, export.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::Instant;

use serde::{Deserialize, Serialize};

use crate::config::TrainConfig;
use crate::error::{Error, Result};
use crate::eval::{evaluate, MetricReport, MetricsAtK};
use crate::graph::split::{leave_one_out_split, InteractionSplit};
use crate::graph::{fingerprint_files, load_dir, DatasetFiles, HeteroGraph, NodeType};
use crate::model::RecipeRec;
use crate::params::{write_atomic, Checkpoint};
use crate::rng::{derive_seed, Stream};
use crate::train::{CheckpointMeta, Trainer};

pub const VERSION: &str = concat!(env!("CARGO_PKG_NAME"), " ", env!("CARGO_PKG_VERSION"));

pub const SPLIT_FILE: &str = "split.json";
pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const MANIFEST_FILE: &str = "manifest.json";

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Seeds {
    pub root: u64,
    pub split: u64,
    /// Per-epoch streams (augmentation, negatives, batch order) are derived
    /// from the root seed and the epoch index.
    pub derived_streams: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub mean_loss: f64,
    pub rec_loss: f64,
    pub con_loss: f64,
    pub batches: usize,
    pub seconds: f64,
    /// Metrics at K = 10 when evaluated after this epoch.
    pub metrics_at_10: Option<MetricsAtK>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Timings {
    pub load_seconds: f64,
    pub train_seconds: f64,
    pub eval_seconds: f64,
    pub total_seconds: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub version: String,
    pub config: TrainConfig,
    pub seeds: Seeds,
    pub dataset_fingerprint: BTreeMap<String, String>,
    pub resumed_from_epoch: Option<usize>,
    pub trace: Vec<EpochRecord>,
    pub final_report: MetricReport,
    pub timings: Timings,
    pub notes: Vec<String>,
}

#[derive(Clone, Debug, Default)]
pub struct TrainOptions {
    /// Continue from this checkpoint instead of a fresh initialisation.
    pub resume: Option<PathBuf>,
    /// Use this split file instead of deriving one from the seed.
    pub split: Option<PathBuf>,
}

/// Writes `report.json`, `report.txt` and `report.csv` into `dir`.
pub fn write_reports(report: &MetricReport, dir: &Path) -> Result<()> {
    fs::create_dir_all(dir)?;
    write_atomic(&dir.join("report.json"), report.to_json().as_bytes())?;
    write_atomic(&dir.join("report.txt"), report.to_table().as_bytes())?;
    write_atomic(&dir.join("report.csv"), report.to_csv()?.as_bytes())
}

fn load_split(graph: &HeteroGraph, config: &TrainConfig, path: Option<&Path>) -> Result<InteractionSplit> {
    match path {
        Some(p) => InteractionSplit::load(p, graph),
        None => leave_one_out_split(graph, derive_seed(config.seed, Stream::Split, 0)),
    }
}

/// Split, train for `config.epochs`, evaluate, and write checkpoint, split,
/// reports and manifest into `out_dir`.
pub fn train_run(config: &TrainConfig, data_dir: &Path, out_dir: &Path, opts: &TrainOptions) -> Result<RunManifest> {
    config.validate()?;
    let t0 = Instant::now();
    let graph = load_dir(data_dir)?;
    let fingerprint = fingerprint_files(&DatasetFiles::in_dir(data_dir).all_paths())?;
    let split = load_split(&graph, config, opts.split.as_deref())?;
    let train_graph = split.train_graph(&graph)?;
    fs::create_dir_all(out_dir)?;
    split.save(&out_dir.join(SPLIT_FILE))?;
    let load_seconds = t0.elapsed().as_secs_f64();

    let mut trainer = match &opts.resume {
        Some(p) => Trainer::resume(&train_graph, &split, config, &Checkpoint::load(p)?)?,
        None => Trainer::new(&train_graph, &split, config)?,
    };
    let resumed_from_epoch = opts.resume.as_ref().map(|_| trainer.epoch());
    let mut trace = Vec::new();
    let t1 = Instant::now();
    while trainer.epoch() < config.epochs {
        let stats = trainer.train_epoch()?;
        let n = stats.batches.len().max(1) as f64;
        let mut record = EpochRecord {
            epoch: stats.epoch,
            mean_loss: stats.mean_loss,
            rec_loss: stats.batches.iter().map(|b| b.rec).sum::<f64>() / n,
            con_loss: stats.batches.iter().map(|b| b.con).sum::<f64>() / n,
            batches: stats.batches.len(),
            seconds: stats.seconds,
            metrics_at_10: None,
        };
        if config.eval_every > 0 && stats.epoch % config.eval_every == 0 {
            let (report, _) = evaluate(trainer.model(), &train_graph, &split)?;
            record.metrics_at_10 = Some(*report.at(10));
        }
        log::info!("epoch {} loss {:.6}", record.epoch, record.mean_loss);
        trace.push(record);
        if config.checkpoint_every > 0 && stats.epoch % config.checkpoint_every == 0 {
            let path = out_dir.join(format!("checkpoint-epoch{}.bin", stats.epoch));
            trainer.checkpoint().save(&path)?;
        }
    }
    let train_seconds = t1.elapsed().as_secs_f64();
    trainer.checkpoint().save(&out_dir.join(CHECKPOINT_FILE))?;

    let t2 = Instant::now();
    let (report, _) = evaluate(trainer.model(), &train_graph, &split)?;
    write_reports(&report, out_dir)?;
    let eval_seconds = t2.elapsed().as_secs_f64();

    let manifest = RunManifest {
        version: VERSION.to_string(),
        config: config.clone(),
        seeds: Seeds {
            root: config.seed,
            split: split.seed,
            derived_streams: ["init", "split", "negatives", "augment", "batches"]
                .iter()
                .map(|s| s.to_string())
                .collect(),
        },
        dataset_fingerprint: fingerprint,
        resumed_from_epoch,
        trace,
        final_report: report,
        timings: Timings {
            load_seconds,
            train_seconds,
            eval_seconds,
            total_seconds: t0.elapsed().as_secs_f64(),
        },
        notes: vec![
            "score ties are broken by ascending recipe id".into(),
            "evaluation negatives are frozen in the split file".into(),
        ],
    };
    write_atomic(
        &out_dir.join(MANIFEST_FILE),
        serde_json::to_string_pretty(&manifest)?.as_bytes(),
    )?;
    Ok(manifest)
}

/// Model with parameters from `ckpt`, built for `graph`.
pub fn model_from_checkpoint(graph: &HeteroGraph, ckpt: &Checkpoint) -> Result<RecipeRec> {
    let meta = CheckpointMeta::of(ckpt)?;
    let mut model = RecipeRec::new(graph, &meta.config)?;
    model.load_params(&ckpt.with_prefix("param/"))?;
    Ok(model)
}

/// Evaluates a checkpoint on `data_dir` with the split at `split_path`.
pub fn eval_run(checkpoint: &Path, data_dir: &Path, split_path: &Path, out_dir: Option<&Path>) -> Result<MetricReport> {
    let graph = load_dir(data_dir)?;
    let split = InteractionSplit::load(split_path, &graph)?;
    let train_graph = split.train_graph(&graph)?;
    let model = model_from_checkpoint(&train_graph, &Checkpoint::load(checkpoint)?)?;
    let (report, _) = evaluate(&model, &train_graph, &split)?;
    if let Some(dir) = out_dir {
        write_reports(&report, dir)?;
    }
    Ok(report)
}

/// Writes `node_type,node_id,e_0,...` rows for every node. With a split the
/// graph is encoded without its test interactions.
pub fn export_embeddings(checkpoint: &Path, data_dir: &Path, split_path: Option<&Path>, out: &Path) -> Result<()> {
    let graph = load_dir(data_dir)?;
    let graph = match split_path {
        Some(p) => InteractionSplit::load(p, &graph)?.train_graph(&graph)?,
        None => graph,
    };
    let model = model_from_checkpoint(&graph, &Checkpoint::load(checkpoint)?)?;
    let emb = model.embeddings(&graph.full_view())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let d = emb.user.cols();
    let mut header = vec!["node_type".to_string(), "node_id".to_string()];
    header.extend((0..d).map(|j| format!("e_{j}")));
    w.write_record(&header)?;
    for t in NodeType::ALL {
        let m = emb.of(t);
        for i in 0..m.rows() {
            let mut rec = vec![t.name().to_string(), i.to_string()];
            rec.extend(m.row(i).iter().map(|v| format!("{v:?}")));
            w.write_record(&rec)?;
        }
    }
    let bytes = w.into_inner().map_err(|e| Error::Io(e.into_error()))?;
    write_atomic(out, &bytes)
}

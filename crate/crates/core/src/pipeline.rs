//! The runnable commands: data generation, splitting, training, evaluation,
//! order sensitivity, gradient checks, and correspondence dumps.

use std::fs;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use compground_tensor::gradcheck::FdOptions;

use crate::annotation::{read_records, QueryAnnotation, VideoAnnotation};
use crate::config::RunConfig;
use crate::datagen::{self, GeneratedData, ShuffleMode, SplitData, World};
use crate::diagnostics::{self, GradRow};
use crate::error::{Error, Result};
use crate::eval::{self, GroundTruth, MetricReport, PredictionRecord};
use crate::model::{detection_vocab, LabeledMatrix, Model, QueryInput, VideoInput};
use crate::splitter::{self, SplitManifest, SplitOutcome, StatsReport, TaggedQuery};
use crate::train::{loss_csv, loss_svg, Checkpoint, Prepared, Trainer};

/// Splits scored by `eval`, in report order.
pub const EVAL_SPLITS: [splitter::Split; 3] = [
    splitter::Split::TestTrivial,
    splitter::Split::NovelComposition,
    splitter::Split::NovelWord,
];

pub fn checkpoint_path(run: &RunConfig) -> PathBuf {
    run.paths.out_dir.join("checkpoint.json")
}

/// Generates the synthetic world and corpus into the data directory.
pub fn gen_data(run: &RunConfig) -> Result<GeneratedData> {
    let world = datagen::gen_world(&run.world)?;
    let data = datagen::gen_dataset(&run.world, &world)?;
    datagen::write_dataset(&run.paths.data_dir, &world, &data)?;
    for (split, d) in &data.splits {
        log::info!("{}: {} videos, {} queries", split.as_str(), d.videos.len(), d.queries.len());
    }
    Ok(data)
}

pub fn load_world(dir: &Path) -> Result<World> {
    let path = dir.join("world.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

pub fn load_manifest(dir: &Path) -> Result<SplitManifest> {
    let path = dir.join("manifest.json");
    let text = fs::read_to_string(&path).map_err(|e| Error::NotFound(format!("{}: {e}", path.display())))?;
    Ok(serde_json::from_str(&text)?)
}

/// Reads one split; a split without files is empty.
pub fn load_split(dir: &Path, split: splitter::Split) -> Result<SplitData> {
    let videos = dir.join(format!("{}.videos.jsonl", split.as_str()));
    let queries = dir.join(format!("{}.queries.jsonl", split.as_str()));
    if !videos.exists() && !queries.exists() {
        return Ok(SplitData::default());
    }
    Ok(SplitData {
        videos: read_records::<VideoAnnotation>(&videos)?,
        queries: read_records::<QueryAnnotation>(&queries)?,
    })
}

/// Runs the compositional splitter over a tagged corpus file and writes the
/// manifest and statistics next to `out`.
pub fn split_corpus(corpus: &Path, out: &Path, seed: u64, novel_comp: f64, novel_word: f64) -> Result<(SplitOutcome, StatsReport)> {
    let queries: Vec<TaggedQuery> = read_records(corpus)?;
    let outcome = splitter::make_splits(&queries, seed, novel_comp, novel_word)?;
    for w in &outcome.warnings {
        log::warn!("{w}");
    }
    let stats = splitter::report_stats(&outcome.manifest, &queries)?;
    fs::create_dir_all(out)?;
    fs::write(out.join("manifest.json"), serde_json::to_string_pretty(&outcome.manifest)?)?;
    fs::write(out.join("stats.json"), serde_json::to_string_pretty(&stats)?)?;
    fs::write(out.join("stats.txt"), stats.to_text())?;
    Ok((outcome, stats))
}

/// Trains from scratch, or resumes from `resume`, for the configured number
/// of epochs. Writes the checkpoint and loss curve into the output directory.
pub fn train(run: &RunConfig, resume: Option<&Path>) -> Result<Trainer> {
    let data = load_split(&run.paths.data_dir, splitter::Split::Training)?;
    if data.queries.is_empty() {
        return Err(Error::NotFound(format!("training queries in {}", run.paths.data_dir.display())));
    }
    let mut trainer = match resume {
        Some(p) => Trainer::from_checkpoint(Checkpoint::load(p)?)?,
        None => {
            let frame_dim = data
                .videos
                .iter()
                .find_map(VideoAnnotation::frame_dim)
                .ok_or_else(|| Error::NoSegments("training videos".into()))?;
            Trainer::new(run.clone(), frame_dim, detection_vocab(&data.videos))?
        }
    };
    let prepared = Prepared::new(&trainer.model, &data.videos, &data.queries)?;
    fs::create_dir_all(&run.paths.out_dir)?;
    let every = run.train.checkpoint_every;
    while trainer.epoch < run.train.epochs {
        trainer.train_epoch(&prepared)?;
        if every > 0 && trainer.epoch % every == 0 && trainer.epoch < run.train.epochs {
            let p = run.paths.out_dir.join(format!("checkpoint-epoch{}.json", trainer.epoch));
            trainer.checkpoint().save(&p)?;
        }
    }
    trainer.checkpoint().save(&checkpoint_path(run))?;
    fs::write(run.paths.out_dir.join("loss.csv"), loss_csv(&trainer.history))?;
    fs::write(run.paths.out_dir.join("loss.svg"), loss_svg(&trainer.history))?;
    Ok(trainer)
}

/// Top-1 predictions and normalized ground truth for every query of `data`.
pub fn predict_split(model: &Model, data: &SplitData) -> Result<(Vec<PredictionRecord>, GroundTruth)> {
    let prepared = Prepared::new(model, &data.videos, &data.queries)?;
    let preds: Vec<PredictionRecord> = (0..prepared.len())
        .into_par_iter()
        .map(|i| {
            let (v, q) = prepared.item(i);
            let iv = model.predict(v, q)?;
            Ok(PredictionRecord::new(q.query_id.clone(), vec![iv]))
        })
        .collect::<Result<_>>()?;
    let gts = prepared
        .queries
        .iter()
        .map(|q| (q.query_id.clone(), q.interval))
        .collect();
    Ok((preds, gts))
}

fn training_mean_interval(dir: &Path) -> Result<(f64, f64)> {
    let train = load_split(dir, splitter::Split::Training)?;
    let durations: std::collections::HashMap<&str, f64> =
        train.videos.iter().map(|v| (v.video_id.as_str(), v.duration)).collect();
    let intervals: Vec<(f64, f64)> = train
        .queries
        .iter()
        .filter_map(|q| durations.get(q.video_id.as_str()).map(|&d| q.normalized_interval(d)))
        .collect();
    Ok(eval::mean_interval(&intervals))
}

/// Scores every evaluation split and the constant-interval baseline; writes
/// `metrics.json`, `metrics.txt`, and `predictions.jsonl`.
pub fn evaluate(model: &Model, run: &RunConfig) -> Result<MetricReport> {
    let dir = &run.paths.data_dir;
    let manifest = load_manifest(dir).ok();
    let constant = training_mean_interval(dir)?;
    let mut report = MetricReport::default();
    let mut all_preds = Vec::new();
    for split in EVAL_SPLITS {
        let data = load_split(dir, split)?;
        if data.queries.is_empty() {
            continue;
        }
        let (preds, gts) = predict_split(model, &data)?;
        report.splits.push(eval::split_metrics(split.as_str(), &preds, &gts, &[1])?);
        let base: Vec<PredictionRecord> = gts
            .keys()
            .map(|id| PredictionRecord::new(id.clone(), vec![constant]))
            .collect();
        report.baseline.push(eval::split_metrics(split.as_str(), &base, &gts, &[1])?);
        if let (splitter::Split::NovelComposition, Some(m)) = (split, &manifest) {
            report.per_type = eval::per_type_breakdown(&preds, &gts, m)?;
        }
        all_preds.extend(preds);
    }
    let out = &run.paths.out_dir;
    fs::create_dir_all(out)?;
    fs::write(out.join("metrics.json"), serde_json::to_string_pretty(&report)?)?;
    fs::write(out.join("metrics.txt"), report.to_text())?;
    crate::annotation::write_records(&out.join("predictions.jsonl"), &all_preds)?;
    Ok(report)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SensitivityReport {
    pub split: String,
    pub mode: ShuffleMode,
    /// R@1, IoU=0.5 on the original queries.
    pub original: f64,
    pub shuffled: Vec<f64>,
    pub seeds: Vec<u64>,
    pub sensitivity: f64,
}

/// Re-scores `split` with queries shuffled under each seed and reports the
/// mean relative drop of R@1, IoU=0.5.
pub fn sensitivity(
    model: &Model,
    run: &RunConfig,
    split: splitter::Split,
    mode: ShuffleMode,
    seeds: &[u64],
) -> Result<SensitivityReport> {
    let dir = &run.paths.data_dir;
    let world = load_world(dir)?;
    let data = load_split(dir, split)?;
    let (preds, gts) = predict_split(model, &data)?;
    let original = eval::recall_at_n(&preds, &gts, 1, 0.5)?;
    let mut shuffled = Vec::with_capacity(seeds.len());
    for &seed in seeds {
        let queries = datagen::shuffle_queries(&data.queries, mode, seed, &world);
        let d = SplitData {
            videos: data.videos.clone(),
            queries,
        };
        let (p, g) = predict_split(model, &d)?;
        shuffled.push(eval::recall_at_n(&p, &g, 1, 0.5)?);
    }
    let sensitivity = eval::mean_order_sensitivity(original, &shuffled)?;
    Ok(SensitivityReport {
        split: split.as_str().to_string(),
        mode,
        original,
        shuffled,
        seeds: seeds.to_vec(),
        sensitivity,
    })
}

/// Gradient-check table over `seeds`.
pub fn grad_check(seeds: &[u64]) -> Result<Vec<GradRow>> {
    diagnostics::gradient_table(seeds, &FdOptions::default())
}

/// Prior correspondence of one query against its video, searched across all
/// splits.
pub fn dump_correspondence(model: &Model, run: &RunConfig, query_id: &str) -> Result<LabeledMatrix> {
    let table = model.embedding_table()?;
    for split in splitter::Split::ALL {
        let data = load_split(&run.paths.data_dir, split)?;
        let Some(q) = data.queries.iter().find(|q| q.query_id == query_id) else {
            continue;
        };
        let v = data
            .videos
            .iter()
            .find(|v| v.video_id == q.video_id)
            .ok_or_else(|| Error::NotFound(format!("video `{}`", q.video_id)))?;
        let video = VideoInput::new(v, model.quotas(), &table)?;
        let query = QueryInput::new(q, v, &table)?;
        return model.correspondence(&video, &query);
    }
    Err(Error::NotFound(format!("query `{query_id}`")))
}

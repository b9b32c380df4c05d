//! The stages of a run, each reading the previous stage's artifacts from the
//! paths in a [`RunConfig`].
//!
//! ```text
//! data_root/   manifest.json  frames/<video>/*.png  detections/<split>.jsonl  labels/<split>.jsonl
//! cache_root/  manifest.json  flow/<video>.flow  patches/<video>/<stream>/frame_*.{bin,json}
//! checkpoints/ <stream>[-no-memory].{ckpt,json,metrics.jsonl}
//! reports/     raw_errors.jsonl  scores.csv  report.json  plots/*.svg  ablation.csv  manifest.json
//! ```

use std::collections::BTreeMap;
use std::io::Write;
use std::path::{Path, PathBuf};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::checkpoint::Checkpoint;
use crate::config::{FlowBackend, RunConfig};
use crate::error::{Error, Result};
use crate::ingest::cache::{read_group, write_group};
use crate::ingest::{
    compute_flow, crop_flow, crop_frame, extract_frames, frame_seed, group_and_pad, load_detections, read_flow_file,
    write_flow_file, FlowField,
};
use crate::patch::{FrameGroup, Stream};
use crate::report::{emit_report, parse_scores_csv, scores_csv, write_plots, EvalSummary};
use crate::score::{
    assemble_scores, compute_auc, load_labels, normalized_by_frame, per_target_errors, ScoreSeries, ScoreSource,
    TargetError,
};
use crate::synth::{self, generate_corpus, CorpusManifest, Split, VideoEntry};
use crate::train::train_stream;

type FrameKey = (String, usize);

/// The split listing of a dataset manifest. Other manifest keys are ignored,
/// so real datasets only need `{"splits": {"train": [...], "test": [...]}}`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetIndex {
    pub splits: BTreeMap<Split, Vec<VideoEntry>>,
}

impl DatasetIndex {
    pub fn load(data_root: &Path) -> Result<Self> {
        let path = data_root.join("manifest.json");
        let text = std::fs::read(&path).map_err(|_| Error::MissingPrerequisite {
            stage: "synth",
            path: path.clone(),
        })?;
        serde_json::from_slice(&text).map_err(|e| Error::Ingest {
            path,
            reason: e.to_string(),
        })
    }

    pub fn videos(&self, split: Split) -> &[VideoEntry] {
        self.splits.get(&split).map_or(&[], |v| v.as_slice())
    }
}

/// What preprocessing produced.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CacheManifest {
    pub config: serde_json::Value,
    /// RMS of the `u` and `v` flow crops over the training split; temporal
    /// patches are divided by it.
    pub flow_scale: [f64; 2],
    /// Frames with at least one target, per split.
    pub groups: BTreeMap<Split, Vec<FrameKey>>,
    /// Every evaluated test frame (frame 0 of each video excluded).
    pub test_frames: Vec<FrameKey>,
}

impl CacheManifest {
    pub fn load(cache_root: &Path) -> Result<Self> {
        let path = cache_root.join("manifest.json");
        let text = std::fs::read(&path).map_err(|_| Error::MissingPrerequisite {
            stage: "preprocess",
            path: path.clone(),
        })?;
        serde_json::from_slice(&text).map_err(|e| Error::Ingest {
            path,
            reason: e.to_string(),
        })
    }

    pub fn groups(&self, split: Split) -> &[FrameKey] {
        self.groups.get(&split).map_or(&[], |v| v.as_slice())
    }
}

fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<()> {
    if let Some(dir) = path.parent() {
        std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    }
    let json = serde_json::to_string_pretty(value).expect("serializable value");
    std::fs::write(path, json + "\n").map_err(|e| Error::io(path, e))
}

pub fn flow_path(cache_root: &Path, video: &str) -> PathBuf {
    cache_root.join("flow").join(format!("{video}.flow"))
}

fn patch_root(cache_root: &Path) -> PathBuf {
    cache_root.join("patches")
}

fn model_name(stream: Stream, memory: bool) -> String {
    if memory {
        stream.as_str().to_string()
    } else {
        format!("{}-no-memory", stream.as_str())
    }
}

pub fn checkpoint_path(cfg: &RunConfig, stream: Stream, memory: bool) -> PathBuf {
    cfg.paths.checkpoints.join(format!("{}.ckpt", model_name(stream, memory)))
}

/// Generates the synthetic corpus into `data_root`.
pub fn cmd_synth(cfg: &RunConfig) -> Result<CorpusManifest> {
    let root = &cfg.paths.data_root;
    log::info!("generating synthetic corpus in {}", root.display());
    // stale frames from a previous spec would otherwise linger
    let frames = root.join("frames");
    if frames.exists() {
        std::fs::remove_dir_all(&frames).map_err(|e| Error::io(&frames, e))?;
    }
    generate_corpus(&cfg.corpus, root, cfg.to_json())
}

/// Computes or loads each video's flow and stores it in the flow cache.
fn ensure_flow(cfg: &RunConfig, video: &VideoEntry) -> Result<()> {
    let data_root = &cfg.paths.data_root;
    let frames = extract_frames(&synth::frames_dir(data_root, &video.video)).map_err(|e| match e {
        Error::Ingest { path, .. } if !path.exists() => Error::MissingPrerequisite { stage: "synth", path },
        other => other,
    })?;
    let out = flow_path(&cfg.paths.cache_root, &video.video);
    let (h, w) = frames.first().map_or((0, 0), |f| f.dim());
    let flows = match cfg.ingest.flow_backend {
        FlowBackend::HornSchunck => {
            let params = cfg.ingest.horn_schunck;
            let mut flows = vec![FlowField::zeros(h, w)];
            let rest = (1..frames.len())
                .into_par_iter()
                .map(|t| compute_flow(&frames[t - 1], &frames[t], &params))
                .collect::<Result<Vec<_>>>()?;
            flows.extend(rest);
            flows
        }
        FlowBackend::Precomputed => {
            let dir = cfg.ingest.precomputed_flow_dir.as_ref().expect("validated config");
            let src = dir.join(format!("{}.flow", video.video));
            let flows = read_flow_file(&src)?;
            if flows.len() != frames.len() || flows.iter().any(|f| f.dim() != (h, w)) {
                return Err(Error::Ingest {
                    path: src,
                    reason: format!("expected {} flow fields of {h}x{w}", frames.len()),
                });
            }
            flows
        }
    };
    write_flow_file(&out, &flows)
}

/// Crops of one video's frames, `(frame, spatial crops, temporal crops)` for
/// every frame after the first.
#[allow(clippy::type_complexity)]
fn video_crops(
    cfg: &RunConfig,
    video: &str,
    detections: &crate::ingest::DetectionMap,
) -> Result<Vec<(usize, Vec<crate::ingest::Crop>, Vec<crate::ingest::Crop>)>> {
    let frames = extract_frames(&synth::frames_dir(&cfg.paths.data_root, video))?;
    let flows = read_flow_file(&flow_path(&cfg.paths.cache_root, video))?;
    Ok((1..frames.len())
        .map(|t| {
            let dets = detections.get(&(video.to_string(), t)).map_or(&[][..], |d| d.as_slice());
            (t, crop_frame(&frames[t], dets), crop_flow(&flows[t], dets))
        })
        .collect())
}

/// Extracts frames, computes flow, crops, pads and writes the patch cache.
pub fn cmd_preprocess(cfg: &RunConfig) -> Result<CacheManifest> {
    let index = DatasetIndex::load(&cfg.paths.data_root)?;
    let cache = &cfg.paths.cache_root;
    for sub in ["flow", "patches"] {
        let dir = cache.join(sub);
        if dir.exists() {
            std::fs::remove_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
        }
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    for split in [Split::Train, Split::Test] {
        for video in index.videos(split) {
            log::info!("flow for {}", video.video);
            ensure_flow(cfg, video)?;
        }
    }

    let mut detections = BTreeMap::new();
    for split in [Split::Train, Split::Test] {
        let path = synth::detections_path(&cfg.paths.data_root, split);
        if !path.exists() {
            return Err(Error::MissingPrerequisite { stage: "synth", path });
        }
        detections.insert(split, load_detections(&path, cfg.ingest.threshold(split))?);
    }

    // first pass: flow scale over the training crops
    let mut sums = [0.0f64; 2];
    let mut count = 0usize;
    for video in index.videos(Split::Train) {
        for (_, _, temporal) in video_crops(cfg, &video.video, &detections[&Split::Train])? {
            for crop in temporal {
                for c in 0..2 {
                    sums[c] += crop.patch.0.index_axis(ndarray::Axis(0), c).iter().map(|v| v * v).sum::<f64>();
                }
                count += crop.patch.0.len() / 2;
            }
        }
    }
    let flow_scale = sums.map(|s| {
        let rms = (s / count.max(1) as f64).sqrt();
        if rms > 0.0 {
            rms
        } else {
            1.0
        }
    });
    log::info!("flow scale (u, v) = ({:.4}, {:.4})", flow_scale[0], flow_scale[1]);

    // second pass: group, pad and cache
    let patches = patch_root(cache);
    let mut groups = BTreeMap::new();
    let mut test_frames = Vec::new();
    for split in [Split::Train, Split::Test] {
        let n = cfg.ingest.n(split);
        let mut keys = Vec::new();
        for video in index.videos(split) {
            for (t, spatial, mut temporal) in video_crops(cfg, &video.video, &detections[&split])? {
                if split == Split::Test {
                    test_frames.push((video.video.clone(), t));
                }
                for crop in &mut temporal {
                    for c in 0..2 {
                        crop.patch.0.index_axis_mut(ndarray::Axis(0), c).mapv_inplace(|v| v / flow_scale[c]);
                    }
                }
                let seed = frame_seed(cfg.seed, &video.video, t);
                let s = group_and_pad(&video.video, t, Stream::Spatial, &spatial, n, seed);
                let m = group_and_pad(&video.video, t, Stream::Temporal, &temporal, n, seed);
                if let (Some(s), Some(m)) = (s, m) {
                    write_group(&patches, &s)?;
                    write_group(&patches, &m)?;
                    keys.push((video.video.clone(), t));
                }
            }
        }
        groups.insert(split, keys);
    }
    let manifest = CacheManifest {
        config: cfg.to_json(),
        flow_scale,
        groups,
        test_frames,
    };
    write_json(&cache.join("manifest.json"), &manifest)?;
    Ok(manifest)
}

fn load_groups(cfg: &RunConfig, keys: &[FrameKey], stream: Stream) -> Result<Vec<FrameGroup>> {
    let root = patch_root(&cfg.paths.cache_root);
    keys.par_iter()
        .map(|(video, frame)| {
            read_group(&root, video, stream, *frame)?.ok_or_else(|| Error::MissingPrerequisite {
                stage: "preprocess",
                path: crate::ingest::cache::group_dir(&root, video, stream),
            })
        })
        .collect()
}

#[derive(Serialize)]
struct TrainManifest<'a> {
    config: serde_json::Value,
    stream: Stream,
    memory_enabled: bool,
    frame_groups: usize,
    history: &'a [crate::train::EpochStats],
}

/// Trains one stream on the cached training groups and saves its checkpoint.
pub fn cmd_train(cfg: &RunConfig, stream: Stream, memory: bool) -> Result<Checkpoint> {
    let cache = CacheManifest::load(&cfg.paths.cache_root)?;
    let dataset = load_groups(cfg, cache.groups(Split::Train), stream)?;
    let dir = &cfg.paths.checkpoints;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let name = model_name(stream, memory);
    let metrics_path = dir.join(format!("{name}.metrics.jsonl"));
    let mut metrics = std::io::BufWriter::new(
        std::fs::File::create(&metrics_path).map_err(|e| Error::io(&metrics_path, e))?,
    );
    log::info!("training {name} on {} frame groups", dataset.len());
    let ckpt = train_stream(
        &cfg.train_config(stream),
        &cfg.architecture(stream, memory),
        &dataset,
        Some(&mut metrics),
    )?;
    metrics.flush().map_err(|e| Error::io(&metrics_path, e))?;
    ckpt.save(&checkpoint_path(cfg, stream, memory))?;
    write_json(
        &dir.join(format!("{name}.json")),
        &TrainManifest {
            config: cfg.to_json(),
            stream,
            memory_enabled: memory,
            frame_groups: dataset.len(),
            history: &ckpt.history,
        },
    )?;
    Ok(ckpt)
}

fn load_checkpoint(cfg: &RunConfig, stream: Stream, memory: bool) -> Result<Checkpoint> {
    let path = checkpoint_path(cfg, stream, memory);
    if !path.exists() {
        let stage = match (stream, memory) {
            (Stream::Spatial, true) => "train --stream spatial",
            (Stream::Temporal, true) => "train --stream temporal",
            (Stream::Spatial, false) => "train --stream spatial --no-memory",
            (Stream::Temporal, false) => "train --stream temporal --no-memory",
        };
        return Err(Error::MissingPrerequisite { stage, path });
    }
    let ckpt = Checkpoint::load(&path)?;
    ckpt.require_stream(stream)?;
    if ckpt.model.arch.memory_enabled != memory {
        return Err(Error::Incompatible(format!(
            "{} has memory_enabled = {}",
            path.display(),
            ckpt.model.arch.memory_enabled
        )));
    }
    Ok(ckpt)
}

/// Raw per-target errors of both streams on the test split.
fn test_errors(cfg: &RunConfig, cache: &CacheManifest, memory: bool) -> Result<(Vec<TargetError>, Vec<TargetError>)> {
    let keys = cache.groups(Split::Test);
    let mut out = Vec::with_capacity(2);
    for stream in [Stream::Spatial, Stream::Temporal] {
        let ckpt = load_checkpoint(cfg, stream, memory)?;
        let groups = load_groups(cfg, keys, stream)?;
        out.push(per_target_errors(&ckpt.model, &groups)?);
    }
    let motion = out.pop().unwrap();
    Ok((out.pop().unwrap(), motion))
}

fn series_from_errors(
    cfg: &RunConfig,
    cache: &CacheManifest,
    appearance: &[TargetError],
    motion: &[TargetError],
) -> Result<ScoreSeries> {
    let labels_file = synth::labels_path(&cfg.paths.data_root, Split::Test);
    if !labels_file.exists() {
        return Err(Error::MissingPrerequisite {
            stage: "synth",
            path: labels_file,
        });
    }
    let labels = load_labels(&labels_file)?;
    let mode = cfg.eval.normalization;
    let a = normalized_by_frame(appearance, mode, Stream::Spatial)?;
    let m = normalized_by_frame(motion, mode, Stream::Temporal)?;
    assemble_scores(&cache.test_frames, Some(&a), Some(&m), &labels, cfg.eval.window)
}

#[derive(Serialize)]
struct ReportManifest {
    config: serde_json::Value,
    auc: Option<f64>,
}

/// Two-pass scoring: raw errors for the whole test split first, then global
/// normalization, fusion and smoothing. Writes `raw_errors.jsonl` and `scores.csv`.
pub fn cmd_score(cfg: &RunConfig) -> Result<ScoreSeries> {
    let cache = CacheManifest::load(&cfg.paths.cache_root)?;
    let (appearance, motion) = test_errors(cfg, &cache, true)?;
    let dir = &cfg.paths.reports;
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let raw_path = dir.join("raw_errors.jsonl");
    let mut raw = String::new();
    for e in appearance.iter().chain(&motion) {
        raw.push_str(&serde_json::to_string(e).expect("serializable error"));
        raw.push('\n');
    }
    std::fs::write(&raw_path, raw).map_err(|e| Error::io(&raw_path, e))?;
    let series = series_from_errors(cfg, &cache, &appearance, &motion)?;
    let csv_path = dir.join("scores.csv");
    std::fs::write(&csv_path, scores_csv(&series)).map_err(|e| Error::io(&csv_path, e))?;
    write_json(
        &dir.join("manifest.json"),
        &ReportManifest {
            config: cfg.to_json(),
            auc: None,
        },
    )?;
    Ok(series)
}

fn load_scores(cfg: &RunConfig) -> Result<ScoreSeries> {
    let path = cfg.paths.reports.join("scores.csv");
    let text = std::fs::read_to_string(&path).map_err(|_| Error::MissingPrerequisite {
        stage: "score",
        path: path.clone(),
    })?;
    parse_scores_csv(&text)
}

/// One row of the network / memory comparison.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub network: ScoreSource,
    pub memory: bool,
    pub auc: f64,
}

pub fn ablation_csv(rows: &[AblationRow]) -> String {
    let mut out = String::from("network,memory,auc\n");
    for r in rows {
        let network = match r.network {
            ScoreSource::Appearance => "spatial",
            ScoreSource::Motion => "temporal",
            ScoreSource::Dual => "dual",
        };
        out.push_str(&format!("{network},{},{}\n", if r.memory { "on" } else { "off" }, r.auc));
    }
    out
}

#[derive(Debug, Clone)]
pub struct EvalOutcome {
    pub summary: EvalSummary,
    pub ablation: Option<Vec<AblationRow>>,
}

fn ablation(cfg: &RunConfig, with_memory: &ScoreSeries) -> Result<Vec<AblationRow>> {
    let cache = CacheManifest::load(&cfg.paths.cache_root)?;
    let (appearance, motion) = test_errors(cfg, &cache, false)?;
    let without = series_from_errors(cfg, &cache, &appearance, &motion)?;
    let labels = with_memory.labels();
    let mut rows = Vec::with_capacity(6);
    for (memory, series) in [(true, with_memory), (false, &without)] {
        for network in [ScoreSource::Appearance, ScoreSource::Motion, ScoreSource::Dual] {
            let auc = compute_auc(&series.smoothed_from(network, cfg.eval.window), &labels)?;
            rows.push(AblationRow { network, memory, auc });
        }
    }
    Ok(rows)
}

/// Frame-level AUC and report files; with `ablation`, also the six-row
/// comparison of spatial / temporal / dual networks with memory on and off.
pub fn cmd_eval(cfg: &RunConfig, with_ablation: bool) -> Result<EvalOutcome> {
    let series = load_scores(cfg)?;
    let auc = series.auc()?;
    let dir = &cfg.paths.reports;
    let summary = emit_report(&series, auc, dir)?;
    let ablation = if with_ablation {
        let rows = ablation(cfg, &series)?;
        let path = dir.join("ablation.csv");
        std::fs::write(&path, ablation_csv(&rows)).map_err(|e| Error::io(&path, e))?;
        Some(rows)
    } else {
        None
    };
    write_json(
        &dir.join("manifest.json"),
        &ReportManifest {
            config: cfg.to_json(),
            auc: Some(auc),
        },
    )?;
    Ok(EvalOutcome { summary, ablation })
}

/// Score-versus-label curves, one SVG per test video.
pub fn cmd_plot(cfg: &RunConfig) -> Result<Vec<PathBuf>> {
    let series = load_scores(cfg)?;
    write_plots(&series, &cfg.paths.reports.join("plots"))
}

/// Every stage in order: synth, preprocess, both trainings (and the
/// memory-free ones for the ablation), score, eval.
pub fn run_all(cfg: &RunConfig, with_ablation: bool) -> Result<EvalOutcome> {
    cmd_synth(cfg)?;
    cmd_preprocess(cfg)?;
    for stream in [Stream::Spatial, Stream::Temporal] {
        cmd_train(cfg, stream, true)?;
        if with_ablation {
            cmd_train(cfg, stream, false)?;
        }
    }
    cmd_score(cfg)?;
    cmd_eval(cfg, with_ablation)
}

//! Frame-level anomaly scores from per-target reconstruction errors.
//!
//! Raw errors are normalized per stream over the whole test set, fused per
//! target by taking the larger of the appearance and motion scores, reduced
//! to a frame score by a max over targets, smoothed within each video and
//! evaluated with the ROC AUC.

use std::collections::BTreeMap;
use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::StreamModel;
use crate::patch::{FrameGroup, Stream};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TargetError {
    pub video: String,
    pub frame: usize,
    pub target_index: usize,
    pub stream: Stream,
    pub raw_error: f64,
}

/// One reconstruction error per `(frame, slot)`, in input order. The model is
/// only read.
pub fn per_target_errors(model: &StreamModel, groups: &[FrameGroup]) -> Result<Vec<TargetError>> {
    if let Some(g) = groups.iter().find(|g| g.stream != model.stream()) {
        return Err(Error::InvalidInput(format!(
            "{} frame {}:{} given to a {} model",
            g.stream,
            g.video,
            g.frame,
            model.stream()
        )));
    }
    let per_frame = groups
        .par_iter()
        .map(|g| {
            let errors = model.detected_errors(g)?;
            Ok(g.slots
                .iter()
                .enumerate()
                .map(|(i, &s)| TargetError {
                    video: g.video.clone(),
                    frame: g.frame,
                    target_index: i,
                    stream: g.stream,
                    raw_error: errors[s],
                })
                .collect::<Vec<_>>())
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(per_frame.into_iter().flatten().collect())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Normalization {
    /// `(L - min) / max`
    #[default]
    Literal,
    /// `(L - min) / (max - min)`
    MinMax,
}

/// Normalizes all errors of one stream by its global extrema.
pub fn normalize_errors(errors: &[f64], mode: Normalization, stream: Stream) -> Result<Vec<f64>> {
    if errors.is_empty() {
        return Ok(Vec::new());
    }
    if errors.iter().any(|e| !e.is_finite() || *e < 0.0) {
        return Err(Error::InvalidInput(format!("{stream} errors must be finite and >= 0")));
    }
    let min = errors.iter().copied().fold(f64::INFINITY, f64::min);
    let max = errors.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    if max == 0.0 {
        return Err(Error::DegenerateStream(stream.to_string()));
    }
    let denom = match mode {
        Normalization::Literal => max,
        Normalization::MinMax if max > min => max - min,
        Normalization::MinMax => 1.0,
    };
    Ok(errors.iter().map(|e| (e - min) / denom).collect())
}

/// A target is as anomalous as the worse of its appearance and motion.
pub fn fuse_scores(appearance: f64, motion: f64) -> f64 {
    appearance.max(motion)
}

/// Max over a frame's target scores; a frame without targets scores 0.
pub fn frame_score(targets: &[f64]) -> f64 {
    targets.iter().copied().fold(0.0, f64::max)
}

/// Centered moving average over `window` frames (`t - window/2` to
/// `t + window - window/2 - 1`), truncated at the ends of the series.
pub fn smooth_scores(series: &[f64], window: usize) -> Vec<f64> {
    if window <= 1 {
        return series.to_vec();
    }
    let before = window / 2;
    let after = window - before - 1;
    (0..series.len())
        .map(|t| {
            let lo = t.saturating_sub(before);
            let hi = (t + after + 1).min(series.len());
            series[lo..hi].iter().sum::<f64>() / (hi - lo) as f64
        })
        .collect()
}

/// Area under the ROC curve via the rank-sum statistic; tied scores get
/// half credit.
pub fn compute_auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    if scores.len() != labels.len() {
        return Err(Error::shape("AUC inputs", scores.len(), labels.len()));
    }
    let positives = labels.iter().filter(|&&l| l).count();
    let negatives = labels.len() - positives;
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedAuc);
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::InvalidInput("NaN score".into()));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    let mut rank_sum = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        // average 1-based rank of the tie block
        let rank = (i + j) as f64 / 2.0 + 1.0;
        rank_sum += rank * order[i..=j].iter().filter(|&&k| labels[k]).count() as f64;
        i = j + 1;
    }
    let p = positives as f64;
    let u = rank_sum - p * (p + 1.0) / 2.0;
    Ok(u / (p * negatives as f64))
}

/// Frame labels keyed by `(video, frame)`.
pub type LabelMap = BTreeMap<(String, usize), bool>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct LabelRecord {
    video: String,
    frame: usize,
    label: u8,
}

/// Reads `{"video": str, "frame": int, "label": 0|1}` lines.
pub fn load_labels(path: &Path) -> Result<LabelMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    let mut out = LabelMap::new();
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let parse_err = |reason: String| Error::Parse {
            path: path.to_path_buf(),
            line: i + 1,
            reason,
        };
        let rec: LabelRecord = serde_json::from_str(line).map_err(|e| parse_err(e.to_string()))?;
        if rec.label > 1 {
            return Err(parse_err(format!("label must be 0 or 1, got {}", rec.label)));
        }
        out.insert((rec.video, rec.frame), rec.label == 1);
    }
    Ok(out)
}

pub fn write_labels(path: &Path, labels: &LabelMap) -> Result<()> {
    let mut out = String::new();
    for ((video, frame), &label) in labels {
        let rec = LabelRecord {
            video: video.clone(),
            frame: *frame,
            label: label as u8,
        };
        out.push_str(&serde_json::to_string(&rec).expect("serializable label"));
        out.push('\n');
    }
    std::fs::write(path, out).map_err(|e| Error::io(path, e))
}

/// One scored test frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScoreRow {
    pub video: String,
    pub frame: usize,
    /// Max normalized appearance error over the frame's targets.
    pub appearance: f64,
    /// Max normalized motion error over the frame's targets.
    pub motion: f64,
    pub fused: f64,
    pub smoothed: f64,
    pub label: bool,
}

/// Per-frame scores of every test video, frame 0 excluded, in
/// `(video, frame)` order.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct ScoreSeries {
    pub rows: Vec<ScoreRow>,
}

/// Which frame-score column an evaluation uses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoreSource {
    Appearance,
    Motion,
    Dual,
}

impl ScoreSeries {
    pub fn labels(&self) -> Vec<bool> {
        self.rows.iter().map(|r| r.label).collect()
    }

    pub fn smoothed(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.smoothed).collect()
    }

    /// Contiguous row ranges of each video.
    pub fn video_ranges(&self) -> Vec<(String, std::ops::Range<usize>)> {
        let mut out: Vec<(String, std::ops::Range<usize>)> = Vec::new();
        for (i, r) in self.rows.iter().enumerate() {
            match out.last_mut() {
                Some((v, range)) if *v == r.video => range.end = i + 1,
                _ => out.push((r.video.clone(), i..i + 1)),
            }
        }
        out
    }

    /// Smoothed scores from one column, smoothing restarted per video.
    pub fn smoothed_from(&self, source: ScoreSource, window: usize) -> Vec<f64> {
        let mut out = Vec::with_capacity(self.rows.len());
        for (_, range) in self.video_ranges() {
            let raw: Vec<f64> = self.rows[range]
                .iter()
                .map(|r| match source {
                    ScoreSource::Appearance => r.appearance,
                    ScoreSource::Motion => r.motion,
                    ScoreSource::Dual => r.fused,
                })
                .collect();
            out.extend(smooth_scores(&raw, window));
        }
        out
    }

    pub fn auc(&self) -> Result<f64> {
        compute_auc(&self.smoothed(), &self.labels())
    }

    /// AUC of each video that has both classes.
    pub fn per_video_auc(&self) -> Vec<(String, Option<f64>)> {
        self.video_ranges()
            .into_iter()
            .map(|(video, range)| {
                let rows = &self.rows[range];
                let scores: Vec<f64> = rows.iter().map(|r| r.smoothed).collect();
                let labels: Vec<bool> = rows.iter().map(|r| r.label).collect();
                (video, compute_auc(&scores, &labels).ok())
            })
            .collect()
    }
}

/// Per-slot normalized errors of one stream keyed by `(video, frame)`.
pub type FrameErrors = BTreeMap<(String, usize), Vec<f64>>;

/// Normalizes a stream's raw errors and regroups them by frame.
pub fn normalized_by_frame(errors: &[TargetError], mode: Normalization, stream: Stream) -> Result<FrameErrors> {
    let raw: Vec<f64> = errors.iter().map(|e| e.raw_error).collect();
    let normalized = normalize_errors(&raw, mode, stream)?;
    let mut out = FrameErrors::new();
    for (e, v) in errors.iter().zip(normalized) {
        out.entry((e.video.clone(), e.frame)).or_default().push(v);
    }
    Ok(out)
}

/// Builds the score series for the given test frames.
///
/// `frames` lists every evaluated `(video, frame)`; frames missing from a
/// stream's errors had no targets and score 0 in that stream.
pub fn assemble_scores(
    frames: &[(String, usize)],
    appearance: Option<&FrameErrors>,
    motion: Option<&FrameErrors>,
    labels: &LabelMap,
    window: usize,
) -> Result<ScoreSeries> {
    let stream_score = |errs: Option<&FrameErrors>, key: &(String, usize)| {
        errs.and_then(|m| m.get(key)).map_or(0.0, |v| frame_score(v))
    };
    let mut rows = Vec::with_capacity(frames.len());
    for key in frames {
        let label = *labels.get(key).ok_or_else(|| {
            Error::InvalidInput(format!("no label for video {} frame {}", key.0, key.1))
        })?;
        let a = stream_score(appearance, key);
        let m = stream_score(motion, key);
        rows.push(ScoreRow {
            video: key.0.clone(),
            frame: key.1,
            appearance: a,
            motion: m,
            fused: fuse_scores(a, m),
            smoothed: 0.0,
            label,
        });
    }
    rows.sort_by(|a, b| (&a.video, a.frame).cmp(&(&b.video, b.frame)));
    let mut series = ScoreSeries { rows };
    let smoothed = series.smoothed_from(ScoreSource::Dual, window);
    for (r, s) in series.rows.iter_mut().zip(smoothed) {
        r.smoothed = s;
    }
    Ok(series)
}

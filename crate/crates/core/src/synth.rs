//! Deterministic moving-sprite videos with ground-truth boxes and labels.
//!
//! Normal videos contain a few small, slow squares bouncing around a flat
//! background. Test videos additionally contain contiguous anomalous spans
//! during which one extra sprite is visible: either a square moving much
//! faster than any normal sprite, or a large triangle moving at normal speed.

use std::collections::BTreeMap;
use std::path::Path;

use ndarray::Array2;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::ingest::detections::{write_detections, DetectionMap};
use crate::ingest::frames::{save_frame, Frame};
use crate::ingest::group::frame_seed;
use crate::patch::{BBox, Detection};
use crate::score::{write_labels, LabelMap};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CorpusSpec {
    pub height: usize,
    pub width: usize,
    pub train_videos: usize,
    pub test_videos: usize,
    pub frames_per_video: usize,
    pub background: f64,
    /// Inclusive range of normal sprites per video.
    pub normal_count: [usize; 2],
    pub normal_size: [f64; 2],
    /// Pixels per frame.
    pub normal_speed: [f64; 2],
    pub intensity: [f64; 2],
    /// Fast sprites move at `normal_speed[1] * fast_speed_factor` or faster.
    pub fast_speed_factor: [f64; 2],
    pub triangle_size: [f64; 2],
    /// Fraction of each test video's frames that are anomalous.
    pub anomaly_fraction: f64,
    /// Inclusive bounds on the length of one anomalous span.
    pub span_length: [usize; 2],
    /// Padding added around each sprite's pixel extent in its box.
    pub box_margin: f64,
    pub seed: u64,
}

impl Default for CorpusSpec {
    fn default() -> Self {
        Self {
            height: 96,
            width: 128,
            train_videos: 8,
            test_videos: 4,
            frames_per_video: 60,
            background: 0.15,
            normal_count: [2, 4],
            normal_size: [8.0, 14.0],
            normal_speed: [0.5, 1.5],
            intensity: [0.7, 1.0],
            fast_speed_factor: [3.0, 4.0],
            triangle_size: [24.0, 32.0],
            anomaly_fraction: 0.25,
            span_length: [10, 20],
            box_margin: 2.0,
            seed: 7,
        }
    }
}

impl CorpusSpec {
    pub fn validate(&self) -> Result<()> {
        let err = |m: String| Err(Error::Spec(m));
        let range_ok = |r: [f64; 2]| r[0] <= r[1] && r[0] >= 0.0;
        if self.height == 0 || self.width == 0 || self.frames_per_video < 2 {
            return err("frames must be non-empty and videos at least 2 frames long".into());
        }
        if self.normal_count[0] == 0 || self.normal_count[0] > self.normal_count[1] {
            return err(format!("invalid normal sprite count {:?}", self.normal_count));
        }
        for (name, r) in [
            ("normal_size", self.normal_size),
            ("normal_speed", self.normal_speed),
            ("intensity", self.intensity),
            ("fast_speed_factor", self.fast_speed_factor),
            ("triangle_size", self.triangle_size),
        ] {
            if !range_ok(r) {
                return err(format!("invalid range {name} = {r:?}"));
            }
        }
        let limit = self.height.min(self.width) as f64;
        if self.normal_size[0] < 1.0 || self.normal_size[1] >= limit || self.triangle_size[1] >= limit {
            return err(format!("sprites must be at least 1 px and smaller than the {}x{} frame", self.width, self.height));
        }
        if self.fast_speed_factor[0] <= 1.0 {
            return err("fast sprites must be faster than normal ones (factor > 1)".into());
        }
        if !(0.0..=1.0).contains(&self.anomaly_fraction) {
            return err(format!("anomaly fraction {} outside [0, 1]", self.anomaly_fraction));
        }
        if self.span_length[0] == 0 || self.span_length[0] > self.span_length[1] {
            return err(format!("invalid span length {:?}", self.span_length));
        }
        let layout = span_lengths(self.anomalous_frames_per_video(), self.span_length);
        let needed: usize = layout.iter().sum::<usize>() + layout.len().saturating_sub(1);
        if needed > self.frames_per_video - 1 {
            return err("anomalous spans do not fit in a test video".into());
        }
        Ok(())
    }

    pub fn anomalous_frames_per_video(&self) -> usize {
        (self.anomaly_fraction * self.frames_per_video as f64).round() as usize
    }

    pub fn video_id(split: Split, index: usize) -> String {
        format!("{}_{index:02}", split.as_str())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Test,
}

impl Split {
    pub fn as_str(self) -> &'static str {
        match self {
            Split::Train => "train",
            Split::Test => "test",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SpriteKind {
    Square,
    FastSquare,
    Triangle,
}

impl SpriteKind {
    pub fn is_anomalous(self) -> bool {
        !matches!(self, SpriteKind::Square)
    }
}

/// A sprite's state in one frame.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpriteState {
    pub kind: SpriteKind,
    pub x: f64,
    pub y: f64,
    pub size: f64,
    pub bbox: BBox,
}

#[derive(Debug, Clone)]
pub struct SyntheticVideo {
    pub id: String,
    pub split: Split,
    pub frames: Vec<Frame>,
    /// Visible sprites per frame.
    pub sprites: Vec<Vec<SpriteState>>,
    pub labels: Vec<bool>,
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone)]
struct Sprite {
    kind: SpriteKind,
    x: f64,
    y: f64,
    vx: f64,
    vy: f64,
    size: f64,
    intensity: f64,
}

impl Sprite {
    fn random(kind: SpriteKind, size: f64, speed: f64, spec: &CorpusSpec, rng: &mut ChaCha8Rng) -> Self {
        let angle = rng.gen_range(0.0..std::f64::consts::TAU);
        Self {
            kind,
            x: rng.gen_range(0.0..=(spec.width as f64 - size)),
            y: rng.gen_range(0.0..=(spec.height as f64 - size)),
            vx: speed * angle.cos(),
            vy: speed * angle.sin(),
            size,
            intensity: rng.gen_range(spec.intensity[0]..=spec.intensity[1]),
        }
    }

    fn step(&mut self, spec: &CorpusSpec) {
        fn bounce(p: &mut f64, v: &mut f64, limit: f64) {
            *p += *v;
            if *p < 0.0 {
                *p = -*p;
                *v = -*v;
            } else if *p > limit {
                *p = 2.0 * limit - *p;
                *v = -*v;
            }
            *p = p.clamp(0.0, limit);
        }
        bounce(&mut self.x, &mut self.vx, spec.width as f64 - self.size);
        bounce(&mut self.y, &mut self.vy, spec.height as f64 - self.size);
    }

    fn state(&self, spec: &CorpusSpec) -> SpriteState {
        let m = spec.box_margin;
        let bbox = BBox {
            x1: (self.x.floor() - m).max(0.0),
            y1: (self.y.floor() - m).max(0.0),
            x2: ((self.x + self.size).ceil() + m).min(spec.width as f64),
            y2: ((self.y + self.size).ceil() + m).min(spec.height as f64),
        };
        SpriteState {
            kind: self.kind,
            x: self.x,
            y: self.y,
            size: self.size,
            bbox,
        }
    }

    fn render(&self, frame: &mut Frame) {
        let (h, w) = frame.dim();
        let x0 = self.x.floor().max(0.0) as usize;
        let y0 = self.y.floor().max(0.0) as usize;
        let x1 = ((self.x + self.size).ceil() as usize).min(w);
        let y1 = ((self.y + self.size).ceil() as usize).min(h);
        for py in y0..y1 {
            for px in x0..x1 {
                let cover = match self.kind {
                    SpriteKind::Square | SpriteKind::FastSquare => {
                        overlap(px as f64, self.x, self.size) * overlap(py as f64, self.y, self.size)
                    }
                    SpriteKind::Triangle => self.triangle_cover(px as f64, py as f64),
                };
                if cover > 0.0 {
                    let p = &mut frame[[py, px]];
                    *p = *p * (1.0 - cover) + self.intensity * cover;
                }
            }
        }
    }

    /// Upward-pointing triangle inscribed in the sprite square, 4x4 supersampled.
    fn triangle_cover(&self, px: f64, py: f64) -> f64 {
        let mut hits = 0;
        for sy in 0..4 {
            for sx in 0..4 {
                let x = px + (sx as f64 + 0.5) / 4.0 - self.x;
                let y = py + (sy as f64 + 0.5) / 4.0 - self.y;
                let half = self.size / 2.0;
                if y >= 0.0 && y <= self.size && (x - half).abs() <= half * y / self.size {
                    hits += 1;
                }
            }
        }
        hits as f64 / 16.0
    }
}

/// Length of `[p, p + 1)` covered by `[start, start + len)`.
fn overlap(p: f64, start: f64, len: f64) -> f64 {
    ((p + 1.0).min(start + len) - p.max(start)).max(0.0)
}

/// Splits `total` anomalous frames into spans no longer than `bounds[1]`.
fn span_lengths(total: usize, bounds: [usize; 2]) -> Vec<usize> {
    if total == 0 {
        return Vec::new();
    }
    let count = total.div_ceil(bounds[1]);
    (0..count)
        .map(|i| total / count + usize::from(i < total % count))
        .collect()
}

/// Places spans at random non-overlapping, non-adjacent positions in frames `1..frames`.
fn place_spans(lengths: &[usize], frames: usize, rng: &mut ChaCha8Rng) -> Vec<(usize, usize)> {
    if lengths.is_empty() {
        return Vec::new();
    }
    let used: usize = lengths.iter().sum::<usize>() + lengths.len() - 1;
    let free = frames - 1 - used;
    let mut cuts: Vec<usize> = (0..lengths.len()).map(|_| rng.gen_range(0..=free)).collect();
    cuts.sort_unstable();
    let mut spans = Vec::with_capacity(lengths.len());
    let mut cursor = 1;
    let mut prev_cut = 0;
    for (i, (&len, &cut)) in lengths.iter().zip(&cuts).enumerate() {
        cursor += cut - prev_cut + usize::from(i > 0);
        prev_cut = cut;
        spans.push((cursor, cursor + len));
        cursor += len;
    }
    spans
}

/// Renders one video of the corpus.
pub fn render_video(spec: &CorpusSpec, split: Split, index: usize) -> Result<SyntheticVideo> {
    spec.validate()?;
    let id = CorpusSpec::video_id(split, index);
    let mut rng = ChaCha8Rng::seed_from_u64(frame_seed(spec.seed, &id, 0));
    let count = rng.gen_range(spec.normal_count[0]..=spec.normal_count[1]);
    let mut normal: Vec<Sprite> = (0..count)
        .map(|_| {
            let size = rng.gen_range(spec.normal_size[0]..=spec.normal_size[1]);
            let speed = rng.gen_range(spec.normal_speed[0]..=spec.normal_speed[1]);
            Sprite::random(SpriteKind::Square, size, speed, spec, &mut rng)
        })
        .collect();

    let spans = match split {
        Split::Train => Vec::new(),
        Split::Test => {
            let lengths = span_lengths(spec.anomalous_frames_per_video(), spec.span_length);
            place_spans(&lengths, spec.frames_per_video, &mut rng)
        }
    };
    let mut anomalies: Vec<(usize, usize, Sprite)> = spans
        .iter()
        .map(|&(start, end)| {
            let sprite = if rng.gen_bool(0.5) {
                let size = rng.gen_range(spec.normal_size[0]..=spec.normal_size[1]);
                let factor = rng.gen_range(spec.fast_speed_factor[0]..=spec.fast_speed_factor[1]);
                Sprite::random(SpriteKind::FastSquare, size, spec.normal_speed[1] * factor, spec, &mut rng)
            } else {
                let size = rng.gen_range(spec.triangle_size[0]..=spec.triangle_size[1]);
                let speed = rng.gen_range(spec.normal_speed[0]..=spec.normal_speed[1]);
                Sprite::random(SpriteKind::Triangle, size, speed, spec, &mut rng)
            };
            (start, end, sprite)
        })
        .collect();

    let mut frames = Vec::with_capacity(spec.frames_per_video);
    let mut sprites = Vec::with_capacity(spec.frames_per_video);
    let mut labels = Vec::with_capacity(spec.frames_per_video);
    for t in 0..spec.frames_per_video {
        let mut frame = Array2::from_elem((spec.height, spec.width), spec.background);
        let mut visible = Vec::new();
        for s in &normal {
            s.render(&mut frame);
            visible.push(s.state(spec));
        }
        let mut anomalous = false;
        for (start, end, s) in &anomalies {
            if (*start..*end).contains(&t) {
                s.render(&mut frame);
                visible.push(s.state(spec));
                anomalous = true;
            }
        }
        frames.push(frame);
        sprites.push(visible);
        labels.push(anomalous);
        for s in &mut normal {
            s.step(spec);
        }
        for (start, _, s) in &mut anomalies {
            if t >= *start {
                s.step(spec);
            }
        }
    }
    Ok(SyntheticVideo {
        id,
        split,
        frames,
        sprites,
        labels,
        spans,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct VideoEntry {
    pub video: String,
    pub frames: usize,
    #[serde(default)]
    pub anomalous_frames: usize,
    #[serde(default)]
    pub spans: Vec<(usize, usize)>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CorpusManifest {
    pub spec: CorpusSpec,
    pub seed: u64,
    pub splits: BTreeMap<Split, Vec<VideoEntry>>,
    /// Caller-supplied provenance (the run configuration).
    #[serde(default)]
    pub config: serde_json::Value,
}

impl CorpusManifest {
    pub fn videos(&self, split: Split) -> &[VideoEntry] {
        self.splits.get(&split).map_or(&[], |v| v.as_slice())
    }

    pub fn load(root: &Path) -> Result<Self> {
        let path = root.join("manifest.json");
        let text = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        serde_json::from_slice(&text).map_err(|e| Error::Ingest {
            path,
            reason: e.to_string(),
        })
    }
}

pub fn frames_dir(root: &Path, video: &str) -> std::path::PathBuf {
    root.join("frames").join(video)
}

pub fn detections_path(root: &Path, split: Split) -> std::path::PathBuf {
    root.join("detections").join(format!("{}.jsonl", split.as_str()))
}

pub fn labels_path(root: &Path, split: Split) -> std::path::PathBuf {
    root.join("labels").join(format!("{}.jsonl", split.as_str()))
}

/// Writes PNG frames, ground-truth detections (confidence 1.0), frame labels
/// and `manifest.json` under `root`.
pub fn generate_corpus(spec: &CorpusSpec, root: &Path, config: serde_json::Value) -> Result<CorpusManifest> {
    spec.validate()?;
    for sub in ["frames", "detections", "labels"] {
        let dir = root.join(sub);
        std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    }
    let mut splits = BTreeMap::new();
    for (split, count) in [(Split::Train, spec.train_videos), (Split::Test, spec.test_videos)] {
        let mut detections = DetectionMap::new();
        let mut labels = LabelMap::new();
        let mut entries = Vec::with_capacity(count);
        for index in 0..count {
            let video = render_video(spec, split, index)?;
            let dir = frames_dir(root, &video.id);
            std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            for (t, frame) in video.frames.iter().enumerate() {
                save_frame(frame, &dir.join(format!("{t:04}.png")))?;
                detections.insert(
                    (video.id.clone(), t),
                    video.sprites[t]
                        .iter()
                        .map(|s| Detection {
                            bbox: s.bbox,
                            confidence: 1.0,
                        })
                        .collect(),
                );
                labels.insert((video.id.clone(), t), video.labels[t]);
            }
            entries.push(VideoEntry {
                video: video.id.clone(),
                frames: video.frames.len(),
                anomalous_frames: video.labels.iter().filter(|&&l| l).count(),
                spans: video.spans.clone(),
            });
        }
        write_detections(&detections_path(root, split), &detections)?;
        write_labels(&labels_path(root, split), &labels)?;
        splits.insert(split, entries);
    }
    let manifest = CorpusManifest {
        spec: spec.clone(),
        seed: spec.seed,
        splits,
        config,
    };
    let path = root.join("manifest.json");
    let json = serde_json::to_string_pretty(&manifest).expect("serializable manifest");
    std::fs::write(&path, json + "\n").map_err(|e| Error::io(&path, e))?;
    Ok(manifest)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn train_videos_are_all_normal() {
        let spec = CorpusSpec::default();
        let v = render_video(&spec, Split::Train, 0).unwrap();
        assert!(v.labels.iter().all(|&l| !l));
        assert!(v.sprites.iter().flatten().all(|s| s.kind == SpriteKind::Square));
    }

    #[test]
    fn anomalous_frames_have_an_anomalous_sprite() {
        let spec = CorpusSpec::default();
        for i in 0..spec.test_videos {
            let v = render_video(&spec, Split::Test, i).unwrap();
            assert_eq!(v.labels.iter().filter(|&&l| l).count(), 15);
            assert!(!v.labels[0]);
            for (label, sprites) in v.labels.iter().zip(&v.sprites) {
                assert_eq!(*label, sprites.iter().any(|s| s.kind.is_anomalous()));
            }
        }
    }

    #[test]
    fn span_layout() {
        assert_eq!(span_lengths(15, [10, 20]), vec![15]);
        assert_eq!(span_lengths(45, [10, 20]), vec![15, 15, 15]);
        assert!(span_lengths(0, [10, 20]).is_empty());
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        for _ in 0..100 {
            let spans = place_spans(&[15, 15, 15], 60, &mut rng);
            assert!(spans[0].0 >= 1 && spans[2].1 <= 60);
            assert!(spans.windows(2).all(|w| w[0].1 < w[1].0));
        }
    }

    #[test]
    fn rejects_impossible_specs() {
        let too_big = CorpusSpec {
            triangle_size: [24.0, 200.0],
            ..CorpusSpec::default()
        };
        assert!(matches!(too_big.validate(), Err(Error::Spec(_))));
        let crowded = CorpusSpec {
            anomaly_fraction: 1.0,
            ..CorpusSpec::default()
        };
        assert!(crowded.validate().is_err());
    }

    #[test]
    fn boxes_contain_rendered_pixels() {
        let spec = CorpusSpec::default();
        let v = render_video(&spec, Split::Test, 1).unwrap();
        for (frame, sprites) in v.frames.iter().zip(&v.sprites) {
            let (h, w) = frame.dim();
            for y in 0..h {
                for x in 0..w {
                    if frame[[y, x]] != spec.background {
                        let (px, py) = (x as f64 + 0.5, y as f64 + 0.5);
                        assert!(sprites.iter().any(|s| {
                            let b = s.bbox;
                            px > b.x1 && px < b.x2 && py > b.y1 && py < b.y2
                        }));
                    }
                }
            }
        }
    }
}

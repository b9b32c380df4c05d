//! On-disk patch cache: one directory per `(video, stream)`, one `f32` blob
//! per frame holding the distinct crops, and a JSON sidecar with the boxes,
//! slot assignment and padding seed.

use std::path::{Path, PathBuf};

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{Detection, FrameGroup, Stream, TargetPatch};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Sidecar {
    pub video: String,
    pub frame: usize,
    pub stream: Stream,
    pub n: usize,
    pub seed: u64,
    pub channels: usize,
    pub size: usize,
    pub boxes: Vec<Detection>,
    pub slots: Vec<usize>,
}

pub fn group_dir(root: &Path, video: &str, stream: Stream) -> PathBuf {
    root.join(video).join(stream.as_str())
}

fn stem(frame: usize) -> String {
    format!("frame_{frame:05}")
}

pub fn write_group(root: &Path, group: &FrameGroup) -> Result<()> {
    let dir = group_dir(root, &group.video, group.stream);
    std::fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let first = group
        .detected
        .first()
        .ok_or_else(|| Error::InvalidInput("cannot cache an empty frame group".into()))?;
    let sidecar = Sidecar {
        video: group.video.clone(),
        frame: group.frame,
        stream: group.stream,
        n: group.n(),
        seed: group.seed,
        channels: first.channels(),
        size: first.size(),
        boxes: group.boxes.clone(),
        slots: group.slots.clone(),
    };
    let mut blob = Vec::with_capacity(group.detected.len() * first.0.len() * 4);
    for p in &group.detected {
        for &v in p.0.iter() {
            blob.extend_from_slice(&(v as f32).to_le_bytes());
        }
    }
    let blob_path = dir.join(format!("{}.bin", stem(group.frame)));
    std::fs::write(&blob_path, blob).map_err(|e| Error::io(&blob_path, e))?;
    let json_path = dir.join(format!("{}.json", stem(group.frame)));
    let json = serde_json::to_vec_pretty(&sidecar).expect("serializable sidecar");
    std::fs::write(&json_path, json).map_err(|e| Error::io(&json_path, e))
}

/// Loads a cached group, or `None` if the frame was not cached (no targets).
pub fn read_group(root: &Path, video: &str, stream: Stream, frame: usize) -> Result<Option<FrameGroup>> {
    let dir = group_dir(root, video, stream);
    let json_path = dir.join(format!("{}.json", stem(frame)));
    if !json_path.exists() {
        return Ok(None);
    }
    let text = std::fs::read(&json_path).map_err(|e| Error::io(&json_path, e))?;
    let sc: Sidecar = serde_json::from_slice(&text).map_err(|e| Error::Ingest {
        path: json_path.clone(),
        reason: e.to_string(),
    })?;
    let blob_path = dir.join(format!("{}.bin", stem(frame)));
    let blob = std::fs::read(&blob_path).map_err(|e| Error::io(&blob_path, e))?;
    let per_patch = sc.channels * sc.size * sc.size;
    if blob.len() != sc.boxes.len() * per_patch * 4 {
        return Err(Error::Ingest {
            path: blob_path,
            reason: "patch blob size does not match its sidecar".into(),
        });
    }
    let mut values = blob
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let detected = (0..sc.boxes.len())
        .map(|_| TargetPatch(Array3::from_shape_fn((sc.channels, sc.size, sc.size), |_| values.next().unwrap())))
        .collect();
    let group = FrameGroup {
        video: sc.video,
        frame: sc.frame,
        stream: sc.stream,
        detected,
        boxes: sc.boxes,
        slots: sc.slots,
        seed: sc.seed,
    };
    group.validate()?;
    Ok(Some(group))
}

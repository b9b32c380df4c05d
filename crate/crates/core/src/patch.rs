//! Target patches, detections and the per-frame groups fed to a stream model.

use ndarray::Array3;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Side length of every cropped target.
pub const PATCH_SIZE: usize = 64;

/// Which of the two networks a patch, group or model belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Stream {
    /// Appearance: grayscale crops, one channel.
    Spatial,
    /// Motion: optical-flow crops, two channels `(u, v)`.
    Temporal,
}

impl Stream {
    pub fn channels(self) -> usize {
        match self {
            Stream::Spatial => 1,
            Stream::Temporal => 2,
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Stream::Spatial => "spatial",
            Stream::Temporal => "temporal",
        }
    }
}

impl std::fmt::Display for Stream {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Stream {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "spatial" => Ok(Stream::Spatial),
            "temporal" => Ok(Stream::Temporal),
            other => Err(Error::InvalidInput(format!("unknown stream `{other}`"))),
        }
    }
}

/// A square multi-channel image, stored `(channels, size, size)`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetPatch(pub Array3<f64>);

impl TargetPatch {
    pub fn new(data: Array3<f64>) -> Result<Self> {
        let (c, h, w) = data.dim();
        if c == 0 || h == 0 || h != w {
            return Err(Error::shape("patch", "(c, s, s) with c, s > 0", format!("{:?}", data.dim())));
        }
        if data.iter().any(|v| !v.is_finite()) {
            return Err(Error::InvalidInput("patch contains non-finite values".into()));
        }
        Ok(Self(data.as_standard_layout().into_owned()))
    }

    pub fn zeros(channels: usize, size: usize) -> Self {
        Self(Array3::zeros((channels, size, size)))
    }

    pub fn channels(&self) -> usize {
        self.0.dim().0
    }

    pub fn size(&self) -> usize {
        self.0.dim().1
    }

    pub fn data(&self) -> &Array3<f64> {
        &self.0
    }
}

/// Axis-aligned box in pixel coordinates, `x1 < x2`, `y1 < y2`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct BBox {
    pub x1: f64,
    pub y1: f64,
    pub x2: f64,
    pub y2: f64,
}

impl BBox {
    pub fn width(&self) -> f64 {
        self.x2 - self.x1
    }

    pub fn height(&self) -> f64 {
        self.y2 - self.y1
    }

    pub fn area(&self) -> f64 {
        self.width().max(0.0) * self.height().max(0.0)
    }

    pub fn center(&self) -> (f64, f64) {
        ((self.x1 + self.x2) / 2.0, (self.y1 + self.y2) / 2.0)
    }

    /// Clips to `[0, width] x [0, height]`. Returns `None` if nothing is left.
    pub fn clip(&self, width: usize, height: usize) -> Option<BBox> {
        let b = BBox {
            x1: self.x1.clamp(0.0, width as f64),
            y1: self.y1.clamp(0.0, height as f64),
            x2: self.x2.clamp(0.0, width as f64),
            y2: self.y2.clamp(0.0, height as f64),
        };
        (b.x2 > b.x1 && b.y2 > b.y1).then_some(b)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    #[serde(rename = "box")]
    pub bbox: BBox,
    pub confidence: f64,
}

/// The fixed-size set of `n` targets of one frame.
///
/// Only the distinct detected crops are stored; `slots` maps each of the `n`
/// positions to one of them, so padded positions are exact copies by
/// construction.
#[derive(Debug, Clone, PartialEq)]
pub struct FrameGroup {
    pub video: String,
    pub frame: usize,
    pub stream: Stream,
    pub detected: Vec<TargetPatch>,
    pub boxes: Vec<Detection>,
    pub slots: Vec<usize>,
    pub seed: u64,
}

impl FrameGroup {
    /// Groups `detected` without padding: one slot per patch.
    pub fn from_patches(video: impl Into<String>, frame: usize, stream: Stream, detected: Vec<TargetPatch>) -> Self {
        let boxes = vec![
            Detection {
                bbox: BBox { x1: 0.0, y1: 0.0, x2: 1.0, y2: 1.0 },
                confidence: 1.0,
            };
            detected.len()
        ];
        let slots = (0..detected.len()).collect();
        Self {
            video: video.into(),
            frame,
            stream,
            detected,
            boxes,
            slots,
            seed: 0,
        }
    }

    pub fn n(&self) -> usize {
        self.slots.len()
    }

    /// The `n` patches in slot order.
    pub fn patches(&self) -> impl Iterator<Item = &TargetPatch> + '_ {
        self.slots.iter().map(move |&i| &self.detected[i])
    }

    /// Boxes in slot order; aligned with [`FrameGroup::patches`].
    pub fn slot_boxes(&self) -> impl Iterator<Item = &Detection> + '_ {
        self.slots.iter().map(move |&i| &self.boxes[i])
    }

    /// How many slots each detected patch occupies.
    pub fn multiplicities(&self) -> Vec<usize> {
        let mut counts = vec![0; self.detected.len()];
        for &s in &self.slots {
            counts[s] += 1;
        }
        counts
    }

    pub fn validate(&self) -> Result<()> {
        if self.slots.is_empty() {
            return Err(Error::InvalidInput(format!(
                "frame {}:{} has no targets",
                self.video, self.frame
            )));
        }
        if self.boxes.len() != self.detected.len() {
            return Err(Error::shape("frame group boxes", self.detected.len(), self.boxes.len()));
        }
        if let Some(&bad) = self.slots.iter().find(|&&s| s >= self.detected.len()) {
            return Err(Error::InvalidInput(format!("slot index {bad} out of range")));
        }
        let channels = self.stream.channels();
        for p in &self.detected {
            if p.channels() != channels {
                return Err(Error::shape("frame group patch channels", channels, p.channels()));
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn clip_and_degenerate_boxes() {
        let b = BBox { x1: -5.0, y1: 2.0, x2: 10.0, y2: 200.0 };
        assert_eq!(b.clip(8, 100), Some(BBox { x1: 0.0, y1: 2.0, x2: 8.0, y2: 100.0 }));
        let outside = BBox { x1: 20.0, y1: 2.0, x2: 30.0, y2: 5.0 };
        assert_eq!(outside.clip(8, 100), None);
    }

    #[test]
    fn patches_follow_slots() {
        let a = TargetPatch::zeros(1, 4);
        let mut b = TargetPatch::zeros(1, 4);
        b.0.fill(1.0);
        let mut g = FrameGroup::from_patches("v", 3, Stream::Spatial, vec![a.clone(), b.clone()]);
        g.slots = vec![1, 0, 1];
        let got: Vec<_> = g.patches().cloned().collect();
        assert_eq!(got, vec![b.clone(), a, b]);
        assert_eq!(g.multiplicities(), vec![1, 2]);
        g.validate().unwrap();
    }

    #[test]
    fn rejects_non_square_patch() {
        assert!(TargetPatch::new(Array3::zeros((1, 4, 5))).is_err());
        assert!(TargetPatch::new(Array3::from_elem((1, 2, 2), f64::NAN)).is_err());
    }
}

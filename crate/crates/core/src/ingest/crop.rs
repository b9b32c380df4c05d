//! Cropping detected targets out of frames and flow fields.

use ndarray::{Array3, Axis};

use super::flow::FlowField;
use super::frames::Frame;
use super::resample::resample_region;
use crate::patch::{Detection, TargetPatch, PATCH_SIZE};

/// One cropped target with the detection it came from.
#[derive(Debug, Clone, PartialEq)]
pub struct Crop {
    pub detection: Detection,
    pub patch: TargetPatch,
}

/// Clips every box to the frame; boxes with nothing left are skipped.
pub fn clip_detections(detections: &[Detection], height: usize, width: usize) -> Vec<Detection> {
    detections
        .iter()
        .filter_map(|d| match d.bbox.clip(width, height) {
            Some(bbox) => {
                if bbox != d.bbox {
                    log::warn!("box {:?} clipped to frame {}x{}", d.bbox, width, height);
                }
                Some(Detection { bbox, ..*d })
            }
            None => {
                log::warn!("skipping degenerate box {:?}", d.bbox);
                None
            }
        })
        .collect()
}

/// Bilinear crops of each box, resized to 64x64 without preserving aspect ratio.
pub fn crop_frame(frame: &Frame, detections: &[Detection]) -> Vec<Crop> {
    let (h, w) = frame.dim();
    clip_detections(detections, h, w)
        .into_iter()
        .map(|d| {
            let b = d.bbox;
            let plane = resample_region(frame, b.x1, b.y1, b.x2, b.y2, PATCH_SIZE, PATCH_SIZE);
            Crop {
                detection: d,
                patch: TargetPatch(plane.insert_axis(Axis(0))),
            }
        })
        .collect()
}

/// Two-channel `(u, v)` crops; each component is resampled independently.
pub fn crop_flow(flow: &FlowField, detections: &[Detection]) -> Vec<Crop> {
    let (h, w) = flow.dim();
    clip_detections(detections, h, w)
        .into_iter()
        .map(|d| {
            let b = d.bbox;
            let mut data = Array3::zeros((2, PATCH_SIZE, PATCH_SIZE));
            for (c, plane) in [&flow.u, &flow.v].into_iter().enumerate() {
                data.index_axis_mut(Axis(0), c)
                    .assign(&resample_region(plane, b.x1, b.y1, b.x2, b.y2, PATCH_SIZE, PATCH_SIZE));
            }
            Crop {
                detection: d,
                patch: TargetPatch(data),
            }
        })
        .collect()
}

//! Fixing the number of targets per frame.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::crop::Crop;
use crate::patch::{FrameGroup, Stream};

/// Deterministic per-frame seed derived from the run seed, video and frame.
pub fn frame_seed(seed: u64, video: &str, frame: usize) -> u64 {
    // FNV-1a over the video id, mixed with the frame index and run seed
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in video.bytes() {
        h ^= b as u64;
        h = h.wrapping_mul(0x0100_0000_01b3);
    }
    splitmix(h ^ splitmix(seed ^ (frame as u64).rotate_left(32)))
}

fn splitmix(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

/// Chooses which crops fill the `n` slots of a frame.
///
/// More than `n` crops keeps the `n` most confident; fewer pads by sampling
/// existing crops uniformly with replacement. Returns `(kept, slots)` where
/// `slots` indexes into `kept`, or `None` for a frame without targets.
pub fn select_slots(crops: &[Crop], n: usize, seed: u64) -> Option<(Vec<usize>, Vec<usize>)> {
    assert!(n >= 1, "target count must be at least 1");
    if crops.is_empty() {
        return None;
    }
    let mut kept: Vec<usize> = (0..crops.len()).collect();
    if kept.len() > n {
        kept.sort_by(|&a, &b| crops[b].detection.confidence.total_cmp(&crops[a].detection.confidence));
        kept.truncate(n);
    }
    let mut slots: Vec<usize> = (0..kept.len()).collect();
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    while slots.len() < n {
        slots.push(rng.gen_range(0..kept.len()));
    }
    Some((kept, slots))
}

/// Builds the frame group, or `None` when the frame has no targets.
pub fn group_and_pad(video: &str, frame: usize, stream: Stream, crops: &[Crop], n: usize, seed: u64) -> Option<FrameGroup> {
    let (kept, slots) = select_slots(crops, n, seed)?;
    Some(FrameGroup {
        video: video.to_string(),
        frame,
        stream,
        detected: kept.iter().map(|&i| crops[i].patch.clone()).collect(),
        boxes: kept.iter().map(|&i| crops[i].detection).collect(),
        slots,
        seed,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::patch::{BBox, Detection, TargetPatch};
    use ndarray::Array3;

    fn crops(confs: &[f64]) -> Vec<Crop> {
        confs
            .iter()
            .enumerate()
            .map(|(i, &c)| Crop {
                detection: Detection {
                    bbox: BBox { x1: i as f64, y1: 0.0, x2: i as f64 + 1.0, y2: 1.0 },
                    confidence: c,
                },
                patch: TargetPatch(Array3::from_elem((1, 2, 2), i as f64)),
            })
            .collect()
    }

    #[test]
    fn pads_with_existing_patches() {
        let c = crops(&[0.9, 0.8, 0.7]);
        let g = group_and_pad("v", 1, Stream::Spatial, &c, 5, 42).unwrap();
        assert_eq!(g.n(), 5);
        assert_eq!(&g.slots[..3], &[0, 1, 2]);
        let patches: Vec<_> = g.patches().collect();
        for orig in &c {
            assert!(patches.contains(&&orig.patch));
        }
        assert_eq!(g, group_and_pad("v", 1, Stream::Spatial, &c, 5, 42).unwrap());
    }

    #[test]
    fn exact_count_preserves_order() {
        let c = crops(&[0.5, 0.9, 0.7]);
        let g = group_and_pad("v", 1, Stream::Spatial, &c, 3, 0).unwrap();
        assert_eq!(g.slots, vec![0, 1, 2]);
        assert_eq!(g.boxes[0].confidence, 0.5);
    }

    #[test]
    fn truncates_to_most_confident() {
        let confs: Vec<f64> = (0..30).map(|i| ((i * 17) % 30) as f64 / 30.0).collect();
        let c = crops(&confs);
        let g = group_and_pad("v", 1, Stream::Spatial, &c, 24, 0).unwrap();
        assert_eq!(g.n(), 24);
        let min_kept = g.boxes.iter().map(|d| d.confidence).fold(f64::INFINITY, f64::min);
        assert_eq!(min_kept, 6.0 / 30.0);
    }

    #[test]
    fn empty_frame_has_no_group() {
        assert!(group_and_pad("v", 1, Stream::Spatial, &[], 4, 0).is_none());
    }

    #[test]
    fn seeds_differ_per_frame() {
        assert_ne!(frame_seed(1, "a", 1), frame_seed(1, "a", 2));
        assert_ne!(frame_seed(1, "a", 1), frame_seed(1, "b", 1));
        assert_eq!(frame_seed(1, "a", 1), frame_seed(1, "a", 1));
    }
}

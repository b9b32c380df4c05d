use ndarray::Array3;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use stfuse::checkpoint::Checkpoint;
use stfuse::loss::LossWeights;
use stfuse::model::Architecture;
use stfuse::patch::{FrameGroup, Stream, TargetPatch};
use stfuse::train::{train_stream, BatchMetrics, TrainConfig};
use stfuse::Error;

fn toy_arch(stream: Stream) -> Architecture {
    Architecture {
        patch_size: 16,
        channels: [4, 4, 6, 6],
        latent_dim: 8,
        memory_slots: 5,
        shrink_threshold: 0.1,
        seed: 3,
        ..Architecture::new(stream)
    }
}

/// Ten frames of blurred blobs on a dark background, two or three targets each.
fn toy_set(stream: Stream) -> Vec<FrameGroup> {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    (0..10)
        .map(|f| {
            let count = rng.gen_range(2..=3);
            let patches = (0..count)
                .map(|_| {
                    let (cy, cx) = (rng.gen_range(4.0..12.0), rng.gen_range(4.0..12.0));
                    TargetPatch(Array3::from_shape_fn((stream.channels(), 16, 16), |(_, y, x)| {
                        let d2 = (y as f64 - cy).powi(2) + (x as f64 - cx).powi(2);
                        (-d2 / 8.0).exp()
                    }))
                })
                .collect();
            FrameGroup::from_patches("toy", f + 1, stream, patches)
        })
        .collect()
}

fn toy_config(stream: Stream, epochs: usize) -> TrainConfig {
    TrainConfig {
        batch_size: 4,
        epochs,
        n: 3,
        seed: 9,
        learning_rate: 0.003,
        ..TrainConfig::new(stream)
    }
}

#[test]
fn loss_does_not_increase_over_two_epochs() {
    for stream in [Stream::Spatial, Stream::Temporal] {
        let ckpt = train_stream(&toy_config(stream, 2), &toy_arch(stream), &toy_set(stream), None).unwrap();
        let h = &ckpt.history;
        assert_eq!(h.len(), 2);
        assert!(h[1].total <= h[0].total * 1.05, "{stream}: {} then {}", h[0].total, h[1].total);
    }
}

#[test]
fn same_seed_same_history_and_bytes() {
    let data = toy_set(Stream::Spatial);
    let cfg = toy_config(Stream::Spatial, 2);
    let a = train_stream(&cfg, &toy_arch(Stream::Spatial), &data, None).unwrap();
    let b = train_stream(&cfg, &toy_arch(Stream::Spatial), &data, None).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(a.to_bytes(), b.to_bytes());
}

#[test]
fn zero_entropy_weight_contributes_nothing() {
    let cfg = TrainConfig {
        loss_weights: LossWeights {
            recon: 1.0,
            entropy: 0.0,
        },
        ..toy_config(Stream::Spatial, 2)
    };
    let mut log = Vec::new();
    let ckpt = train_stream(&cfg, &toy_arch(Stream::Spatial), &toy_set(Stream::Spatial), Some(&mut log)).unwrap();
    for e in &ckpt.history {
        assert_eq!(e.total, e.recon);
    }
    for line in String::from_utf8(log).unwrap().lines() {
        let m: BatchMetrics = serde_json::from_str(line).unwrap();
        assert_eq!(m.total, m.recon);
    }
}

#[test]
fn metrics_log_has_one_line_per_batch() {
    let mut log = Vec::new();
    train_stream(
        &toy_config(Stream::Temporal, 2),
        &toy_arch(Stream::Temporal),
        &toy_set(Stream::Temporal),
        Some(&mut log),
    )
    .unwrap();
    let lines: Vec<BatchMetrics> = String::from_utf8(log)
        .unwrap()
        .lines()
        .map(|l| serde_json::from_str(l).unwrap())
        .collect();
    // 10 frames in batches of 4 -> 3 batches per epoch
    assert_eq!(lines.len(), 6);
    assert!(lines.iter().all(|m| m.entropy >= 0.0 && m.total.is_finite()));
    assert_eq!((lines[5].epoch, lines[5].batch), (2, 2));
}

#[test]
fn one_step_moves_the_memory() {
    let cfg = TrainConfig {
        batch_size: 10,
        ..toy_config(Stream::Spatial, 1)
    };
    let arch = toy_arch(Stream::Spatial);
    let before = stfuse::model::StreamModel::new(arch.clone()).unwrap().memory.items;
    let ckpt = train_stream(&cfg, &arch, &toy_set(Stream::Spatial), None).unwrap();
    let after = &ckpt.model.memory.items;
    let changed = before
        .rows()
        .into_iter()
        .zip(after.rows())
        .filter(|(a, b)| a != b)
        .count();
    assert!(changed >= 1);
}

#[test]
fn non_finite_input_aborts_with_location() {
    let mut data = toy_set(Stream::Spatial);
    data[0].detected[0].0[[0, 0, 0]] = f64::NAN;
    let cfg = TrainConfig {
        batch_size: 20,
        ..toy_config(Stream::Spatial, 1)
    };
    match train_stream(&cfg, &toy_arch(Stream::Spatial), &data, None) {
        Err(Error::NonFinite { epoch, batch, term }) => {
            assert_eq!((epoch, batch), (1, 0));
            assert_eq!(term, "reconstruction");
        }
        other => panic!("expected a non-finite error, got {other:?}"),
    }
}

#[test]
fn rejects_mixed_streams() {
    let mut data = toy_set(Stream::Spatial);
    data.extend(toy_set(Stream::Temporal));
    assert!(train_stream(&toy_config(Stream::Spatial, 1), &toy_arch(Stream::Spatial), &data, None).is_err());
    assert!(train_stream(&toy_config(Stream::Spatial, 1), &toy_arch(Stream::Spatial), &[], None).is_err());
}

#[test]
fn checkpoint_roundtrip_after_training() {
    let ckpt = train_stream(
        &toy_config(Stream::Temporal, 1),
        &toy_arch(Stream::Temporal),
        &toy_set(Stream::Temporal),
        None,
    )
    .unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("t.ckpt");
    ckpt.save(&path).unwrap();
    let loaded = Checkpoint::load(&path).unwrap();
    assert_eq!(loaded, ckpt);
    assert_eq!(loaded.to_bytes(), ckpt.to_bytes());
    assert!(matches!(loaded.require_stream(Stream::Spatial), Err(Error::Incompatible(_))));
}

use std::collections::BTreeMap;
use std::path::Path;

use stfuse::score::load_labels;
use stfuse::synth::{generate_corpus, labels_path, render_video, CorpusSpec, Split, SpriteKind};

fn read_tree(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().display().to_string();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

#[test]
fn same_spec_same_bytes() {
    let spec = CorpusSpec::default();
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    generate_corpus(&spec, a.path(), serde_json::Value::Null).unwrap();
    generate_corpus(&spec, b.path(), serde_json::Value::Null).unwrap();
    let (ta, tb) = (read_tree(a.path()), read_tree(b.path()));
    // 12 videos x 60 frames, 2 detection files, 2 label files, the manifest
    assert_eq!(ta.len(), 12 * 60 + 5);
    assert!(ta == tb);

    let other = CorpusSpec { seed: 8, ..spec };
    let c = tempfile::tempdir().unwrap();
    generate_corpus(&other, c.path(), serde_json::Value::Null).unwrap();
    assert!(read_tree(c.path()) != ta);
}

#[test]
fn anomalous_count_matches_manifest() {
    let spec = CorpusSpec {
        train_videos: 1,
        test_videos: 1,
        frames_per_video: 101,
        anomaly_fraction: 0.2,
        ..CorpusSpec::default()
    };
    let dir = tempfile::tempdir().unwrap();
    let manifest = generate_corpus(&spec, dir.path(), serde_json::Value::Null).unwrap();
    let labels = load_labels(&labels_path(dir.path(), Split::Test)).unwrap();
    // frame 0 is never anomalous, so the 100 frames after it hold every anomaly
    let anomalous = labels.iter().filter(|((_, f), &l)| *f >= 1 && l).count();
    assert_eq!(anomalous, manifest.videos(Split::Test)[0].anomalous_frames);
    assert_eq!(anomalous, 20);

    let train = load_labels(&labels_path(dir.path(), Split::Train)).unwrap();
    assert_eq!(train.len(), 101);
    assert!(train.values().all(|&l| !l));
}

#[test]
fn normal_sprites_keep_their_speed() {
    let spec = CorpusSpec::default();
    for split in [Split::Train, Split::Test] {
        for i in 0..4 {
            let v = render_video(&spec, split, i).unwrap();
            let normal = v.sprites[0].iter().filter(|s| s.kind == SpriteKind::Square).count();
            for t in 1..v.sprites.len() {
                for k in 0..normal {
                    let (a, b) = (&v.sprites[t - 1][k], &v.sprites[t][k]);
                    assert_eq!(b.kind, SpriteKind::Square);
                    let step = (b.x - a.x).hypot(b.y - a.y);
                    assert!(step <= spec.normal_speed[1] + 1e-9, "step {step}");
                    // box centers move by the true step up to one pixel of rounding
                    let (ca, cb) = (a.bbox.center(), b.bbox.center());
                    let clipped = |s: &stfuse::synth::SpriteState| {
                        s.bbox.x1 == 0.0 || s.bbox.y1 == 0.0 || s.bbox.x2 == 128.0 || s.bbox.y2 == 96.0
                    };
                    if !clipped(a) && !clipped(b) {
                        let box_step = (cb.0 - ca.0).hypot(cb.1 - ca.1);
                        assert!(box_step <= spec.normal_speed[1] + 1.5, "box step {box_step}");
                    }
                }
            }
        }
    }
}

#[test]
fn fast_sprites_exceed_normal_speed_by_the_margin() {
    let spec = CorpusSpec {
        test_videos: 12,
        ..CorpusSpec::default()
    };
    let floor = spec.normal_speed[1] * spec.fast_speed_factor[0];
    let mut kinds = Vec::new();
    for i in 0..spec.test_videos {
        let v = render_video(&spec, Split::Test, i).unwrap();
        let track = |t: usize| v.sprites[t].iter().find(|s| s.kind.is_anomalous()).copied();
        for t in 1..v.sprites.len() {
            let (Some(a), Some(b)) = (track(t - 1), track(t)) else {
                continue;
            };
            kinds.push(a.kind);
            let away_from_walls = |s: &stfuse::synth::SpriteState| {
                s.x > 8.0 && s.y > 8.0 && s.x + s.size < 120.0 && s.y + s.size < 88.0
            };
            if a.kind == SpriteKind::FastSquare && away_from_walls(&a) && away_from_walls(&b) {
                let step = (b.x - a.x).hypot(b.y - a.y);
                assert!(step >= floor - 1e-9, "fast step {step} below {floor}");
            }
            if a.kind == SpriteKind::Triangle {
                assert!(a.size >= spec.triangle_size[0]);
            }
        }
    }
    assert!(kinds.contains(&SpriteKind::FastSquare) && kinds.contains(&SpriteKind::Triangle));
}

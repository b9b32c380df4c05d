//! JSON-lines detection files: `{"video": str, "frame": int, "boxes": [[x1, y1, x2, y2, conf], ...]}`.

use std::collections::BTreeMap;
use std::io::Write;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::patch::{BBox, Detection};

/// Detections keyed by `(video, frame)`, each list sorted by descending confidence.
pub type DetectionMap = BTreeMap<(String, usize), Vec<Detection>>;

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    video: String,
    frame: usize,
    boxes: Vec<[f64; 5]>,
}

pub fn load_detections(path: &Path, threshold: f64) -> Result<DetectionMap> {
    let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
    parse_detections(&text, threshold).map_err(|(line, reason)| Error::Parse {
        path: path.to_path_buf(),
        line,
        reason,
    })
}

/// Parses detection lines; errors carry the 1-based line number.
pub fn parse_detections(text: &str, threshold: f64) -> std::result::Result<DetectionMap, (usize, String)> {
    let mut out = DetectionMap::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record = serde_json::from_str(line).map_err(|e| (line_no, e.to_string()))?;
        let entry = out.entry((rec.video, rec.frame)).or_default();
        for [x1, y1, x2, y2, conf] in rec.boxes {
            if !(x1 < x2 && y1 < y2) || ![x1, y1, x2, y2].iter().all(|v| v.is_finite()) {
                return Err((line_no, format!("invalid box [{x1}, {y1}, {x2}, {y2}]")));
            }
            if !(0.0..=1.0).contains(&conf) {
                return Err((line_no, format!("confidence {conf} outside [0, 1]")));
            }
            if conf >= threshold {
                entry.push(Detection {
                    bbox: BBox { x1, y1, x2, y2 },
                    confidence: conf,
                });
            }
        }
    }
    for dets in out.values_mut() {
        dets.sort_by(|a, b| b.confidence.total_cmp(&a.confidence));
    }
    Ok(out)
}

/// Writes one record per `(video, frame)` key, in key order.
pub fn write_detections(path: &Path, detections: &DetectionMap) -> Result<()> {
    let mut out = Vec::new();
    for ((video, frame), dets) in detections {
        let rec = Record {
            video: video.clone(),
            frame: *frame,
            boxes: dets
                .iter()
                .map(|d| [d.bbox.x1, d.bbox.y1, d.bbox.x2, d.bbox.y2, d.confidence])
                .collect(),
        };
        serde_json::to_writer(&mut out, &rec).expect("serializable record");
        out.push(b'\n');
    }
    std::fs::File::create(path)
        .and_then(|mut f| f.write_all(&out))
        .map_err(|e| Error::io(path, e))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn threshold_filters_and_sorts() {
        let text = r#"{"video": "a", "frame": 1, "boxes": [[0,0,4,4,0.3],[1,1,5,5,0.6],[2,2,6,6,0.45]]}"#;
        let map = parse_detections(text, 0.4).unwrap();
        let dets = &map[&("a".to_string(), 1)];
        assert_eq!(dets.len(), 2);
        assert_eq!(dets[0].confidence, 0.6);
        assert_eq!(dets[1].confidence, 0.45);
    }

    #[test]
    fn empty_input_has_no_detections() {
        assert!(parse_detections("", 0.5).unwrap().is_empty());
    }

    #[test]
    fn malformed_line_reports_line_number() {
        let text = "{\"video\": \"a\", \"frame\": 0, \"boxes\": []}\n{oops}\n";
        assert_eq!(parse_detections(text, 0.5).unwrap_err().0, 2);
        let bad_box = "{\"video\": \"a\", \"frame\": 0, \"boxes\": [[5,0,1,1,0.9]]}";
        assert_eq!(parse_detections(bad_box, 0.5).unwrap_err().0, 1);
        let bad_key = "{\"video\": \"a\", \"frame\": 0, \"boxes\": [], \"extra\": 1}";
        assert!(parse_detections(bad_key, 0.5).is_err());
    }

    #[test]
    fn write_then_load() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("d.jsonl");
        let text = r#"{"video":"v","frame":3,"boxes":[[0.5,1,4,4.25,0.9]]}"#;
        let map = parse_detections(text, 0.0).unwrap();
        write_detections(&path, &map).unwrap();
        assert_eq!(load_detections(&path, 0.0).unwrap(), map);
    }
}

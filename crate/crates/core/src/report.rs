//! Score CSV, per-video score-vs-label plots and the evaluation summary.

use std::fmt::Write as _;
use std::path::{Path, PathBuf};

use serde::Serialize;

use crate::error::{Error, Result};
use crate::score::ScoreSeries;

pub const CSV_HEADER: &str = "video,frame,appearance,motion,fused,smoothed,label";

pub fn scores_csv(series: &ScoreSeries) -> String {
    let mut out = String::with_capacity(64 * (series.rows.len() + 1));
    out.push_str(CSV_HEADER);
    out.push('\n');
    for r in &series.rows {
        writeln!(
            out,
            "{},{},{},{},{},{},{}",
            r.video, r.frame, r.appearance, r.motion, r.fused, r.smoothed, r.label as u8
        )
        .unwrap();
    }
    out
}

/// Parses a CSV written by [`scores_csv`].
pub fn parse_scores_csv(text: &str) -> Result<ScoreSeries> {
    let mut lines = text.lines().enumerate();
    match lines.next() {
        Some((_, h)) if h == CSV_HEADER => {}
        _ => return Err(Error::InvalidInput("score CSV has an unexpected header".into())),
    }
    let mut rows = Vec::new();
    for (i, line) in lines {
        let bad = || Error::Parse {
            path: PathBuf::from("<scores.csv>"),
            line: i + 1,
            reason: format!("malformed row `{line}`"),
        };
        let f: Vec<&str> = line.split(',').collect();
        if f.len() != 7 {
            return Err(bad());
        }
        let num = |s: &str| s.parse::<f64>().map_err(|_| bad());
        rows.push(crate::score::ScoreRow {
            video: f[0].to_string(),
            frame: f[1].parse().map_err(|_| bad())?,
            appearance: num(f[2])?,
            motion: num(f[3])?,
            fused: num(f[4])?,
            smoothed: num(f[5])?,
            label: match f[6] {
                "0" => false,
                "1" => true,
                _ => return Err(bad()),
            },
        });
    }
    Ok(ScoreSeries { rows })
}

/// SVG line plot of the smoothed score with the ground-truth label shaded.
pub fn score_plot_svg(series: &ScoreSeries, video: &str) -> Option<String> {
    let rows: Vec<_> = series.rows.iter().filter(|r| r.video == video).collect();
    if rows.is_empty() {
        return None;
    }
    let (w, h, pad) = (640.0, 240.0, 30.0);
    let first = rows[0].frame as f64;
    let last = rows[rows.len() - 1].frame as f64;
    let span = (last - first).max(1.0);
    let x = |f: usize| pad + (f as f64 - first) / span * (w - 2.0 * pad);
    let y = |s: f64| h - pad - s.clamp(0.0, 1.0) * (h - 2.0 * pad);
    let step = (w - 2.0 * pad) / span;

    let mut svg = String::new();
    writeln!(
        svg,
        r#"<svg xmlns="http://www.w3.org/2000/svg" width="{w}" height="{h}" viewBox="0 0 {w} {h}">"#
    )
    .unwrap();
    writeln!(svg, r#"<rect width="{w}" height="{h}" fill="white"/>"#).unwrap();
    for r in rows.iter().filter(|r| r.label) {
        writeln!(
            svg,
            r##"<rect x="{:.2}" y="{pad}" width="{:.2}" height="{:.2}" fill="#f4b6b6"/>"##,
            x(r.frame) - step / 2.0,
            step,
            h - 2.0 * pad
        )
        .unwrap();
    }
    writeln!(
        svg,
        r#"<rect x="{pad}" y="{pad}" width="{:.2}" height="{:.2}" fill="none" stroke="black"/>"#,
        w - 2.0 * pad,
        h - 2.0 * pad
    )
    .unwrap();
    let points: Vec<String> = rows
        .iter()
        .map(|r| format!("{:.2},{:.2}", x(r.frame), y(r.smoothed)))
        .collect();
    writeln!(
        svg,
        r##"<polyline points="{}" fill="none" stroke="#1f4e9c" stroke-width="1.5"/>"##,
        points.join(" ")
    )
    .unwrap();
    writeln!(
        svg,
        r#"<text x="{pad}" y="18" font-family="sans-serif" font-size="13">{video}: anomaly score (line) and label (shaded)</text>"#
    )
    .unwrap();
    svg.push_str("</svg>\n");
    Some(svg)
}

#[derive(Debug, Clone, Serialize)]
pub struct EvalSummary {
    pub auc: f64,
    pub per_video_auc: Vec<(String, Option<f64>)>,
    pub frames: usize,
    pub anomalous_frames: usize,
}

/// Writes `scores.csv`, one SVG per video under `plots/`, and `report.json`.
pub fn emit_report(series: &ScoreSeries, auc: f64, dir: &Path) -> Result<EvalSummary> {
    let plots = dir.join("plots");
    std::fs::create_dir_all(&plots).map_err(|e| Error::io(&plots, e))?;
    let csv_path = dir.join("scores.csv");
    std::fs::write(&csv_path, scores_csv(series)).map_err(|e| Error::io(&csv_path, e))?;
    write_plots(series, &plots)?;
    let summary = EvalSummary {
        auc,
        per_video_auc: series.per_video_auc(),
        frames: series.rows.len(),
        anomalous_frames: series.rows.iter().filter(|r| r.label).count(),
    };
    let json_path = dir.join("report.json");
    let json = serde_json::to_string_pretty(&summary).expect("serializable summary");
    std::fs::write(&json_path, json + "\n").map_err(|e| Error::io(&json_path, e))?;
    Ok(summary)
}

pub fn write_plots(series: &ScoreSeries, dir: &Path) -> Result<Vec<PathBuf>> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let mut written = Vec::new();
    for (video, _) in series.video_ranges() {
        if let Some(svg) = score_plot_svg(series, &video) {
            let path = dir.join(format!("{video}.svg"));
            std::fs::write(&path, svg).map_err(|e| Error::io(&path, e))?;
            written.push(path);
        }
    }
    Ok(written)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::score::ScoreRow;

    fn series() -> ScoreSeries {
        ScoreSeries {
            rows: (1..6)
                .map(|f| ScoreRow {
                    video: "v".into(),
                    frame: f,
                    appearance: 0.1 * f as f64,
                    motion: 0.3,
                    fused: 0.3f64.max(0.1 * f as f64),
                    smoothed: 1.0 / 3.0,
                    label: f > 3,
                })
                .collect(),
        }
    }

    #[test]
    fn csv_rows_and_roundtrip() {
        let s = series();
        let csv = scores_csv(&s);
        assert_eq!(csv.lines().count(), s.rows.len() + 1);
        assert_eq!(parse_scores_csv(&csv).unwrap(), s);
    }

    #[test]
    fn report_is_deterministic() {
        let dir = tempfile::tempdir().unwrap();
        let s = series();
        let auc = s.auc().unwrap();
        let summary = emit_report(&s, auc, dir.path()).unwrap();
        assert_eq!(summary.auc, auc);
        let first = std::fs::read(dir.path().join("scores.csv")).unwrap();
        emit_report(&s, auc, dir.path()).unwrap();
        assert_eq!(first, std::fs::read(dir.path().join("scores.csv")).unwrap());
        assert!(dir.path().join("plots/v.svg").exists());
    }

    #[test]
    fn unwritable_path_is_io_error() {
        let dir = tempfile::tempdir().unwrap();
        let file = dir.path().join("file");
        std::fs::write(&file, b"x").unwrap();
        assert!(matches!(emit_report(&series(), 0.5, &file.join("sub")), Err(Error::Io { .. })));
    }
}

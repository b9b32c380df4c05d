//! Frame extraction from a directory of still images.

use std::path::{Path, PathBuf};

use image::DynamicImage;
use ndarray::Array2;

use crate::error::{Error, Result};

/// A grayscale frame with values in `[0, 1]`, shape `(height, width)`.
pub type Frame = Array2<f64>;

const IMAGE_EXTENSIONS: &[&str] = &["png", "jpg", "jpeg"];

/// Reads every image in `source` in file-name order.
///
/// Colour images are converted with luminance weights (0.299, 0.587, 0.114).
/// Video containers are not decoded; extract them to images first.
pub fn extract_frames(source: &Path) -> Result<Vec<Frame>> {
    let ingest_err = |reason: String| Error::Ingest {
        path: source.to_path_buf(),
        reason,
    };
    if !source.is_dir() {
        return Err(ingest_err(
            "expected a directory of frame images (video containers must be extracted first)".into(),
        ));
    }
    let mut files: Vec<PathBuf> = std::fs::read_dir(source)
        .map_err(|e| Error::io(source, e))?
        .filter_map(|entry| entry.ok().map(|e| e.path()))
        .filter(|p| {
            p.extension()
                .and_then(|e| e.to_str())
                .is_some_and(|e| IMAGE_EXTENSIONS.contains(&e.to_ascii_lowercase().as_str()))
        })
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(ingest_err("no frame images found".into()));
    }
    let mut frames = Vec::with_capacity(files.len());
    let mut shape = None;
    for file in &files {
        let frame = load_frame(file)?;
        match shape {
            None => shape = Some(frame.dim()),
            Some(s) if s != frame.dim() => {
                return Err(Error::Ingest {
                    path: file.clone(),
                    reason: format!("frame size {:?} differs from {:?}", frame.dim(), s),
                })
            }
            _ => {}
        }
        frames.push(frame);
    }
    Ok(frames)
}

pub fn load_frame(path: &Path) -> Result<Frame> {
    let img = image::open(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })?;
    Ok(to_gray(&img))
}

pub fn to_gray(img: &DynamicImage) -> Frame {
    let (w, h) = (img.width() as usize, img.height() as usize);
    if img.color().has_color() {
        let rgb = img.to_rgb16();
        Array2::from_shape_fn((h, w), |(y, x)| {
            let p = rgb.get_pixel(x as u32, y as u32).0;
            (0.299 * p[0] as f64 + 0.587 * p[1] as f64 + 0.114 * p[2] as f64) / 65535.0
        })
    } else {
        let gray = img.to_luma16();
        Array2::from_shape_fn((h, w), |(y, x)| gray.get_pixel(x as u32, y as u32).0[0] as f64 / 65535.0)
    }
}

/// Writes a frame as an 8-bit grayscale PNG.
pub fn save_frame(frame: &Frame, path: &Path) -> Result<()> {
    let (h, w) = frame.dim();
    let buf = image::GrayImage::from_fn(w as u32, h as u32, |x, y| {
        image::Luma([(frame[[y as usize, x as usize]].clamp(0.0, 1.0) * 255.0).round() as u8])
    });
    buf.save(path).map_err(|e| Error::Ingest {
        path: path.to_path_buf(),
        reason: e.to_string(),
    })
}

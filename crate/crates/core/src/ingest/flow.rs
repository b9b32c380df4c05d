//! Dense optical flow and the binary flow cache.
//!
//! The built-in estimator is Horn-Schunck on a Gaussian-smoothed image
//! pyramid with backward warping between levels. Flow at pixel `(x, y)` of
//! the earlier frame is the displacement `(u, v)` to its position in the
//! later frame.

use std::io::{Read, Write};
use std::path::Path;

use ndarray::{Array2, Zip};
use serde::{Deserialize, Serialize};

use super::frames::Frame;
use super::resample::{gaussian_blur, resize, sample_bilinear};
use crate::error::{Error, Result};

pub const FLOW_MAGIC: &[u8; 8] = b"STCFLOW1";

/// Per-pixel displacement in pixels per frame.
#[derive(Debug, Clone, PartialEq)]
pub struct FlowField {
    pub u: Array2<f64>,
    pub v: Array2<f64>,
}

impl FlowField {
    pub fn zeros(height: usize, width: usize) -> Self {
        Self {
            u: Array2::zeros((height, width)),
            v: Array2::zeros((height, width)),
        }
    }

    pub fn dim(&self) -> (usize, usize) {
        self.u.dim()
    }

    pub fn max_magnitude(&self) -> f64 {
        self.u
            .iter()
            .zip(self.v.iter())
            .map(|(u, v)| u.hypot(*v))
            .fold(0.0, f64::max)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct HornSchunck {
    /// Smoothness weight.
    pub alpha: f64,
    /// Jacobi iterations per pyramid level.
    pub iterations: usize,
    pub levels: usize,
    /// Gaussian pre-smoothing.
    pub sigma: f64,
}

impl Default for HornSchunck {
    fn default() -> Self {
        Self {
            alpha: 0.05,
            iterations: 150,
            levels: 3,
            sigma: 1.0,
        }
    }
}

pub fn compute_flow(prev: &Frame, cur: &Frame, params: &HornSchunck) -> Result<FlowField> {
    if prev.dim() != cur.dim() {
        return Err(Error::shape(
            "optical flow frames",
            format!("{:?}", prev.dim()),
            format!("{:?}", cur.dim()),
        ));
    }
    let (h, w) = prev.dim();
    if h < 2 || w < 2 {
        return Err(Error::InvalidInput("frames must be at least 2x2".into()));
    }
    let mut first = vec![gaussian_blur(prev, params.sigma)];
    let mut second = vec![gaussian_blur(cur, params.sigma)];
    while first.len() < params.levels.max(1) {
        let (lh, lw) = first.last().unwrap().dim();
        if lh < 16 || lw < 16 {
            break;
        }
        let (nh, nw) = (lh.div_ceil(2), lw.div_ceil(2));
        first.push(resize(&gaussian_blur(first.last().unwrap(), 1.0), nh, nw));
        second.push(resize(&gaussian_blur(second.last().unwrap(), 1.0), nh, nw));
    }

    let mut flow: Option<FlowField> = None;
    for (i1, i2) in first.iter().zip(&second).rev() {
        let (lh, lw) = i1.dim();
        let init = match flow {
            None => FlowField::zeros(lh, lw),
            Some(coarse) => {
                let (ch, cw) = coarse.dim();
                FlowField {
                    u: resize(&coarse.u, lh, lw) * (lw as f64 / cw as f64),
                    v: resize(&coarse.v, lh, lw) * (lh as f64 / ch as f64),
                }
            }
        };
        flow = Some(refine(i1, i2, init, params));
    }
    Ok(flow.expect("at least one level"))
}

fn refine(i1: &Array2<f64>, i2: &Array2<f64>, init: FlowField, params: &HornSchunck) -> FlowField {
    let (h, w) = i1.dim();
    let warped = Array2::from_shape_fn((h, w), |(y, x)| {
        let (u, v) = (init.u[[y, x]], init.v[[y, x]]);
        if u == 0.0 && v == 0.0 {
            i2[[y, x]]
        } else {
            sample_bilinear(i2, x as f64 + u, y as f64 + v)
        }
    });
    let mean = (i1 + &warped) * 0.5;
    let at = |y: isize, x: isize| mean[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    let ix = Array2::from_shape_fn((h, w), |(y, x)| {
        (at(y as isize, x as isize + 1) - at(y as isize, x as isize - 1)) * 0.5
    });
    let iy = Array2::from_shape_fn((h, w), |(y, x)| {
        (at(y as isize + 1, x as isize) - at(y as isize - 1, x as isize)) * 0.5
    });
    // linearized constraint around the initial flow
    let mut it = &warped - i1;
    Zip::from(&mut it)
        .and(&ix)
        .and(&iy)
        .and(&init.u)
        .and(&init.v)
        .for_each(|t, &gx, &gy, &u0, &v0| *t -= gx * u0 + gy * v0);
    let denom = Zip::from(&ix)
        .and(&iy)
        .map_collect(|gx, gy| params.alpha * params.alpha + gx * gx + gy * gy);

    let mut u = init.u;
    let mut v = init.v;
    for _ in 0..params.iterations {
        let ub = neighbour_mean(&u);
        let vb = neighbour_mean(&v);
        let (gx, gy, gt, d) = (
            ix.as_slice().unwrap(),
            iy.as_slice().unwrap(),
            it.as_slice().unwrap(),
            denom.as_slice().unwrap(),
        );
        let (us, vs) = (u.as_slice_mut().unwrap(), v.as_slice_mut().unwrap());
        for (k, (&ub, &vb)) in ub.iter().zip(vb.iter()).enumerate() {
            let t = (gx[k] * ub + gy[k] * vb + gt[k]) / d[k];
            us[k] = ub - gx[k] * t;
            vs[k] = vb - gy[k] * t;
        }
    }
    FlowField { u, v }
}

/// Horn-Schunck neighbourhood average: 1/6 for edge neighbours, 1/12 for corners.
fn neighbour_mean(f: &Array2<f64>) -> Array2<f64> {
    let (h, w) = f.dim();
    let at = |y: isize, x: isize| f[[y.clamp(0, h as isize - 1) as usize, x.clamp(0, w as isize - 1) as usize]];
    Array2::from_shape_fn((h, w), |(y, x)| {
        let (y, x) = (y as isize, x as isize);
        (at(y - 1, x) + at(y + 1, x) + at(y, x - 1) + at(y, x + 1)) / 6.0
            + (at(y - 1, x - 1) + at(y - 1, x + 1) + at(y + 1, x - 1) + at(y + 1, x + 1)) / 12.0
    })
}

/// Writes a flow cache: magic, little-endian `u32` frame count, height and
/// width, then per frame the `f32` u-plane followed by the v-plane.
///
/// Entry `t` holds the flow from frame `t - 1` to frame `t`; entry 0 is zero.
pub fn write_flow_file(path: &Path, flows: &[FlowField]) -> Result<()> {
    let (h, w) = flows.first().map_or((0, 0), |f| f.dim());
    let mut buf = Vec::with_capacity(20 + flows.len() * h * w * 8);
    buf.extend_from_slice(FLOW_MAGIC);
    for v in [flows.len(), h, w] {
        buf.extend_from_slice(&(v as u32).to_le_bytes());
    }
    for f in flows {
        if f.dim() != (h, w) {
            return Err(Error::shape("flow cache frame", format!("{:?}", (h, w)), format!("{:?}", f.dim())));
        }
        for plane in [&f.u, &f.v] {
            for &x in plane.iter() {
                buf.extend_from_slice(&(x as f32).to_le_bytes());
            }
        }
    }
    std::fs::File::create(path)
        .and_then(|mut file| file.write_all(&buf))
        .map_err(|e| Error::io(path, e))
}

/// Loads a flow cache written by [`write_flow_file`] or an external tool.
pub fn read_flow_file(path: &Path) -> Result<Vec<FlowField>> {
    let mut bytes = Vec::new();
    std::fs::File::open(path)
        .and_then(|mut f| f.read_to_end(&mut bytes))
        .map_err(|e| Error::io(path, e))?;
    let bad = |reason: &str| Error::Ingest {
        path: path.to_path_buf(),
        reason: reason.to_string(),
    };
    if bytes.len() < 20 || &bytes[..8] != FLOW_MAGIC {
        return Err(bad("not a STCFLOW1 file"));
    }
    let header = |i: usize| u32::from_le_bytes(bytes[8 + 4 * i..12 + 4 * i].try_into().unwrap()) as usize;
    let (frames, h, w) = (header(0), header(1), header(2));
    let expected = frames
        .checked_mul(h * w * 8)
        .and_then(|n| n.checked_add(20))
        .ok_or_else(|| bad("header overflow"))?;
    if bytes.len() != expected {
        return Err(bad(&format!("expected {expected} bytes, found {}", bytes.len())));
    }
    let mut values = bytes[20..]
        .chunks_exact(4)
        .map(|c| f32::from_le_bytes(c.try_into().unwrap()) as f64);
    let mut plane = || Array2::from_shape_fn((h, w), |_| values.next().unwrap());
    let mut out = Vec::with_capacity(frames);
    for _ in 0..frames {
        let u = plane();
        let v = plane();
        if u.iter().chain(v.iter()).any(|x| !x.is_finite()) {
            return Err(bad("non-finite flow value"));
        }
        out.push(FlowField { u, v });
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn square_frame(h: usize, w: usize, x0: usize, y0: usize, side: usize) -> Frame {
        Array2::from_shape_fn((h, w), |(y, x)| {
            if (x0..x0 + side).contains(&x) && (y0..y0 + side).contains(&y) {
                1.0
            } else {
                0.0
            }
        })
    }

    #[test]
    fn identical_frames_give_zero_flow() {
        let f = square_frame(32, 40, 10, 12, 8);
        let flow = compute_flow(&f, &f, &HornSchunck::default()).unwrap();
        assert!(flow.max_magnitude() <= 1e-6);
    }

    #[test]
    fn shape_mismatch_is_rejected() {
        let a = Array2::zeros((8, 8));
        let b = Array2::zeros((8, 9));
        assert!(compute_flow(&a, &b, &HornSchunck::default()).is_err());
    }

    #[test]
    fn flow_file_roundtrip_and_truncation() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("v.stcflow");
        let mut f = FlowField::zeros(3, 4);
        f.u[[1, 2]] = 0.5;
        f.v[[2, 3]] = -1.25;
        write_flow_file(&path, &[FlowField::zeros(3, 4), f.clone()]).unwrap();
        let back = read_flow_file(&path).unwrap();
        assert_eq!(back[1], f);
        let bytes = std::fs::read(&path).unwrap();
        assert_eq!(&bytes[..8], b"STCFLOW1");
        assert_eq!(u32::from_le_bytes(bytes[8..12].try_into().unwrap()), 2);
        std::fs::write(&path, &bytes[..bytes.len() - 3]).unwrap();
        assert!(read_flow_file(&path).is_err());
    }
}

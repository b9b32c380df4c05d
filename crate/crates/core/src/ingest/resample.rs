//! Bilinear sampling helpers shared by cropping and optical flow.

use ndarray::Array2;

/// Bilinear sample at continuous pixel coordinates, clamped to the border.
pub fn sample_bilinear(img: &Array2<f64>, x: f64, y: f64) -> f64 {
    let (h, w) = img.dim();
    let x = x.clamp(0.0, (w - 1) as f64);
    let y = y.clamp(0.0, (h - 1) as f64);
    let x0 = x.floor() as usize;
    let y0 = y.floor() as usize;
    let x1 = (x0 + 1).min(w - 1);
    let y1 = (y0 + 1).min(h - 1);
    let fx = x - x0 as f64;
    let fy = y - y0 as f64;
    let top = img[[y0, x0]] * (1.0 - fx) + img[[y0, x1]] * fx;
    let bottom = img[[y1, x0]] * (1.0 - fx) + img[[y1, x1]] * fx;
    top * (1.0 - fy) + bottom * fy
}

/// Resamples the region `[x1, x2) x [y1, y2)` onto an `out_h x out_w` grid
/// using pixel-centre alignment.
pub fn resample_region(img: &Array2<f64>, x1: f64, y1: f64, x2: f64, y2: f64, out_h: usize, out_w: usize) -> Array2<f64> {
    let sx = (x2 - x1) / out_w as f64;
    let sy = (y2 - y1) / out_h as f64;
    Array2::from_shape_fn((out_h, out_w), |(i, j)| {
        let x = x1 + (j as f64 + 0.5) * sx - 0.5;
        let y = y1 + (i as f64 + 0.5) * sy - 0.5;
        sample_bilinear(img, x, y)
    })
}

pub fn resize(img: &Array2<f64>, out_h: usize, out_w: usize) -> Array2<f64> {
    let (h, w) = img.dim();
    resample_region(img, 0.0, 0.0, w as f64, h as f64, out_h, out_w)
}

/// Separable Gaussian blur with replicated borders.
pub fn gaussian_blur(img: &Array2<f64>, sigma: f64) -> Array2<f64> {
    if sigma <= 0.0 {
        return img.clone();
    }
    let radius = (3.0 * sigma).ceil() as isize;
    let mut kernel: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = kernel.iter().sum();
    kernel.iter_mut().for_each(|k| *k /= sum);
    let (h, w) = img.dim();
    let clampi = |v: isize, n: usize| v.clamp(0, n as isize - 1) as usize;
    let horizontal: Array2<f64> = Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * img[[y, clampi(x as isize + k as isize - radius, w)]])
            .sum::<f64>()
    });
    Array2::from_shape_fn((h, w), |(y, x)| {
        kernel
            .iter()
            .enumerate()
            .map(|(k, &wt)| wt * horizontal[[clampi(y as isize + k as isize - radius, h), x]])
            .sum::<f64>()
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn integer_aligned_region_is_exact() {
        let img = Array2::from_shape_fn((10, 12), |(y, x)| (y * 12 + x) as f64);
        let crop = resample_region(&img, 2.0, 3.0, 6.0, 7.0, 4, 4);
        assert_eq!(crop, img.slice(ndarray::s![3..7, 2..6]));
    }

    #[test]
    fn blur_preserves_constants() {
        let img = Array2::from_elem((5, 7), 0.25);
        for v in gaussian_blur(&img, 1.5) {
            assert!((v - 0.25).abs() < 1e-12);
        }
    }
}

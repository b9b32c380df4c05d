//! Minimal convolutional layers with explicit forward and backward passes.
//!
//! Activations are `(channels, height, width)` arrays in `f64`. Every layer
//! that owns parameters accumulates gradients into a layer of the same shape,
//! so a zeroed copy of a model doubles as its gradient buffer.

use ndarray::{Array1, Array2, Array3, Axis};
use rand::Rng;
use rand_chacha::ChaCha8Rng;

/// 3x3 convolution, stride 1, zero padding 1.
#[derive(Debug, Clone, PartialEq)]
pub struct Conv2d {
    /// `(out_channels, in_channels * 9)`, row-major over `(in, ky, kx)`.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Conv2d {
    pub fn zeros(in_channels: usize, out_channels: usize) -> Self {
        Self {
            weight: Array2::zeros((out_channels, in_channels * 9)),
            bias: Array1::zeros(out_channels),
        }
    }

    /// He-uniform weights, zero bias.
    pub fn init(in_channels: usize, out_channels: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(in_channels, out_channels);
        let bound = (6.0 / (in_channels * 9) as f64).sqrt();
        layer
            .weight
            .mapv_inplace(|_| rng.gen_range(-bound..bound));
        layer
    }

    pub fn in_channels(&self) -> usize {
        self.weight.ncols() / 9
    }

    pub fn out_channels(&self) -> usize {
        self.weight.nrows()
    }

    /// Returns the output and the unfolded input needed by [`Conv2d::backward`].
    pub fn forward(&self, x: &Array3<f64>) -> (Array3<f64>, Array2<f64>) {
        let (_, h, w) = x.dim();
        let cols = im2col(x);
        let mut out = self.weight.dot(&cols);
        for (mut row, &b) in out.axis_iter_mut(Axis(0)).zip(self.bias.iter()) {
            row += b;
        }
        let out = out
            .into_shape_with_order((self.out_channels(), h, w))
            .expect("conv output shape");
        (out, cols)
    }

    /// Accumulates parameter gradients into `grads` and returns the input gradient.
    pub fn backward(
        &self,
        cols: &Array2<f64>,
        grad_out: &Array3<f64>,
        grads: &mut Conv2d,
    ) -> Array3<f64> {
        let (oc, h, w) = grad_out.dim();
        let g = grad_out
            .view()
            .into_shape_with_order((oc, h * w))
            .expect("contiguous gradient");
        grads.weight += &g.dot(&cols.t());
        grads.bias += &g.sum_axis(Axis(1));
        let dcols = self.weight.t().dot(&g);
        col2im(&dcols, self.in_channels(), h, w)
    }
}

/// Fully connected layer `y = W x + b`.
#[derive(Debug, Clone, PartialEq)]
pub struct Dense {
    /// `(out, in)`
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
}

impl Dense {
    pub fn zeros(inputs: usize, outputs: usize) -> Self {
        Self {
            weight: Array2::zeros((outputs, inputs)),
            bias: Array1::zeros(outputs),
        }
    }

    /// Glorot-uniform weights, zero bias.
    pub fn init(inputs: usize, outputs: usize, rng: &mut ChaCha8Rng) -> Self {
        let mut layer = Self::zeros(inputs, outputs);
        let bound = (6.0 / (inputs + outputs) as f64).sqrt();
        layer
            .weight
            .mapv_inplace(|_| rng.gen_range(-bound..bound));
        layer
    }

    pub fn inputs(&self) -> usize {
        self.weight.ncols()
    }

    pub fn outputs(&self) -> usize {
        self.weight.nrows()
    }

    pub fn forward(&self, x: &Array1<f64>) -> Array1<f64> {
        self.weight.dot(x) + &self.bias
    }

    pub fn backward(&self, x: &Array1<f64>, grad_out: &Array1<f64>, grads: &mut Dense) -> Array1<f64> {
        for (mut row, &g) in grads.weight.axis_iter_mut(Axis(0)).zip(grad_out.iter()) {
            if g != 0.0 {
                row.scaled_add(g, x);
            }
        }
        grads.bias += grad_out;
        self.weight.t().dot(grad_out)
    }
}

pub fn relu_inplace(x: &mut Array3<f64>) {
    x.mapv_inplace(|v| v.max(0.0));
}

/// Masks `grad` by the positive entries of a ReLU output.
pub fn relu_backward(out: &Array3<f64>, grad: &mut Array3<f64>) {
    ndarray::Zip::from(grad).and(out).for_each(|g, &o| {
        if o <= 0.0 {
            *g = 0.0;
        }
    });
}

/// 2x2 max pooling with stride 2. Returns the pooled map and the flat argmax
/// index of each output cell into the input.
pub fn max_pool(x: &Array3<f64>) -> (Array3<f64>, Vec<usize>) {
    let (c, h, w) = x.dim();
    let (oh, ow) = (h / 2, w / 2);
    let src = x.as_slice().expect("contiguous activation");
    let mut out = Array3::zeros((c, oh, ow));
    let mut arg = Vec::with_capacity(c * oh * ow);
    let dst = out.as_slice_mut().expect("contiguous");
    let mut k = 0;
    for ch in 0..c {
        let base = ch * h * w;
        for oy in 0..oh {
            for ox in 0..ow {
                let mut best = base + 2 * oy * w + 2 * ox;
                for (dy, dx) in [(0, 1), (1, 0), (1, 1)] {
                    let idx = base + (2 * oy + dy) * w + 2 * ox + dx;
                    if src[idx] > src[best] {
                        best = idx;
                    }
                }
                dst[k] = src[best];
                arg.push(best);
                k += 1;
            }
        }
    }
    (out, arg)
}

pub fn max_pool_backward(grad_out: &Array3<f64>, argmax: &[usize], in_shape: (usize, usize, usize)) -> Array3<f64> {
    let mut grad = Array3::zeros(in_shape);
    let dst = grad.as_slice_mut().expect("contiguous");
    for (&g, &idx) in grad_out.iter().zip(argmax) {
        dst[idx] += g;
    }
    grad
}

/// Nearest-neighbour 2x upsampling.
pub fn upsample(x: &Array3<f64>) -> Array3<f64> {
    let (c, h, w) = x.dim();
    Array3::from_shape_fn((c, 2 * h, 2 * w), |(ch, y, xx)| x[[ch, y / 2, xx / 2]])
}

pub fn upsample_backward(grad_out: &Array3<f64>) -> Array3<f64> {
    let (c, h2, w2) = grad_out.dim();
    let mut grad = Array3::zeros((c, h2 / 2, w2 / 2));
    for ((ch, y, x), &g) in grad_out.indexed_iter() {
        grad[[ch, y / 2, x / 2]] += g;
    }
    grad
}

fn im2col(x: &Array3<f64>) -> Array2<f64> {
    let (c, h, w) = x.dim();
    let src = x.as_slice().expect("contiguous activation");
    let hw = h * w;
    let mut cols = Array2::zeros((c * 9, hw));
    let dst = cols.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        let plane = &src[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &mut dst[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let src_row = &plane[sy as usize * w..][..w];
                    let dst_row = &mut row[y * w..][..w];
                    match kx {
                        0 => dst_row[1..].copy_from_slice(&src_row[..w - 1]),
                        1 => dst_row.copy_from_slice(src_row),
                        _ => dst_row[..w - 1].copy_from_slice(&src_row[1..]),
                    }
                }
            }
        }
    }
    cols
}

fn col2im(cols: &Array2<f64>, c: usize, h: usize, w: usize) -> Array3<f64> {
    let hw = h * w;
    let src = cols.as_slice().expect("contiguous");
    let mut out = Array3::zeros((c, h, w));
    let dst = out.as_slice_mut().expect("contiguous");
    for ch in 0..c {
        let plane = &mut dst[ch * hw..(ch + 1) * hw];
        for ky in 0..3 {
            for kx in 0..3 {
                let row = &src[((ch * 3 + ky) * 3 + kx) * hw..][..hw];
                for y in 0..h {
                    let sy = y as isize + ky as isize - 1;
                    if sy < 0 || sy >= h as isize {
                        continue;
                    }
                    let dst_row = &mut plane[sy as usize * w..][..w];
                    let src_row = &row[y * w..][..w];
                    match kx {
                        0 => dst_row[..w - 1]
                            .iter_mut()
                            .zip(&src_row[1..])
                            .for_each(|(d, s)| *d += s),
                        1 => dst_row.iter_mut().zip(src_row).for_each(|(d, s)| *d += s),
                        _ => dst_row[1..]
                            .iter_mut()
                            .zip(&src_row[..w - 1])
                            .for_each(|(d, s)| *d += s),
                    }
                }
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn direct_conv(layer: &Conv2d, x: &Array3<f64>) -> Array3<f64> {
        let (c, h, w) = x.dim();
        let oc = layer.out_channels();
        Array3::from_shape_fn((oc, h, w), |(o, y, xx)| {
            let mut acc = layer.bias[o];
            for ch in 0..c {
                for ky in 0..3 {
                    for kx in 0..3 {
                        let sy = y as isize + ky as isize - 1;
                        let sx = xx as isize + kx as isize - 1;
                        if sy < 0 || sx < 0 || sy >= h as isize || sx >= w as isize {
                            continue;
                        }
                        acc += layer.weight[[o, (ch * 3 + ky) * 3 + kx]]
                            * x[[ch, sy as usize, sx as usize]];
                    }
                }
            }
            acc
        })
    }

    #[test]
    fn conv_matches_direct_sum() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut layer = Conv2d::init(3, 4, &mut rng);
        layer.bias.mapv_inplace(|_| rng.gen_range(-1.0..1.0));
        let x = Array3::from_shape_fn((3, 5, 6), |_| rng.gen_range(-1.0..1.0));
        let (fast, _) = layer.forward(&x);
        let slow = direct_conv(&layer, &x);
        for (a, b) in fast.iter().zip(slow.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn col2im_is_adjoint_of_im2col() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = Array3::from_shape_fn((2, 4, 7), |_| rng.gen_range(-1.0..1.0));
        let y = Array2::from_shape_fn((18, 28), |_| rng.gen_range(-1.0..1.0));
        let lhs: f64 = (&im2col(&x) * &y).sum();
        let rhs: f64 = (&x * &col2im(&y, 2, 4, 7)).sum();
        assert!((lhs - rhs).abs() < 1e-10);
    }

    #[test]
    fn pool_and_upsample_shapes() {
        let x = Array3::from_shape_fn((2, 8, 8), |(c, y, x)| (c * 64 + y * 8 + x) as f64);
        let (p, arg) = max_pool(&x);
        assert_eq!(p.dim(), (2, 4, 4));
        assert_eq!(p[[0, 0, 0]], 9.0);
        let g = max_pool_backward(&Array3::ones((2, 4, 4)), &arg, (2, 8, 8));
        assert_eq!(g.sum(), 32.0);
        let u = upsample(&p);
        assert_eq!(u.dim(), (2, 8, 8));
        assert_eq!(upsample_backward(&Array3::ones((2, 8, 8))), Array3::from_elem((2, 4, 4), 4.0));
    }
}

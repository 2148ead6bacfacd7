//! 2-D convolution via im2col and a single GEMM each direction.

use ndarray::{Array1, Array2, Array4, ArrayView2};
use rand::Rng;

use super::FeatureMap;

/// Convolution over NHWC maps. Weights are stored as a
/// `[k*k*c_in, c_out]` matrix whose row order matches the im2col patch
/// order `(dy, dx, c_in)`.
#[derive(Debug, Clone)]
pub struct Conv2d {
    pub w: Array2<f64>,
    pub b: Array1<f64>,
    pub c_in: usize,
    pub c_out: usize,
    pub kernel: usize,
    pub stride: usize,
    pub pad: usize,
}

pub struct ConvCache {
    cols: Array2<f64>,
    in_dim: (usize, usize, usize, usize),
}

impl Conv2d {
    /// Kaiming-uniform initialization from the given stream.
    pub fn new<R: Rng>(
        c_in: usize,
        c_out: usize,
        kernel: usize,
        stride: usize,
        pad: usize,
        rng: &mut R,
    ) -> Self {
        let fan_in = (kernel * kernel * c_in) as f64;
        let limit = (6.0 / fan_in).sqrt();
        let mut w = Array2::zeros((kernel * kernel * c_in, c_out));
        for v in w.iter_mut() {
            *v = rng.random_range(-limit..limit);
        }
        let b_limit = (1.0 / fan_in).sqrt();
        let mut b = Array1::zeros(c_out);
        for v in b.iter_mut() {
            *v = rng.random_range(-b_limit..b_limit);
        }
        Self {
            w,
            b,
            c_in,
            c_out,
            kernel,
            stride,
            pad,
        }
    }

    pub fn out_hw(&self, h: usize, w: usize) -> (usize, usize) {
        (
            (h + 2 * self.pad - self.kernel) / self.stride + 1,
            (w + 2 * self.pad - self.kernel) / self.stride + 1,
        )
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let (y, _) = self.run(x, false);
        y
    }

    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, ConvCache) {
        let (y, cache) = self.run(x, true);
        (y, cache.expect("cache requested"))
    }

    fn run(&self, x: &FeatureMap, keep_cache: bool) -> (FeatureMap, Option<ConvCache>) {
        let (batch, h, w, c) = x.dim();
        assert_eq!(c, self.c_in, "channel mismatch");
        let (oh, ow) = self.out_hw(h, w);
        let cols = im2col(x, self.kernel, self.stride, self.pad);
        let mut y = cols.dot(&self.w);
        for mut row in y.rows_mut() {
            row += &self.b;
        }
        let y = y
            .into_shape_with_order((batch, oh, ow, self.c_out))
            .expect("gemm output reshape");
        let cache = keep_cache.then(|| ConvCache {
            cols,
            in_dim: (batch, h, w, c),
        });
        (y, cache)
    }

    /// Returns `(grad_input, grad_w, grad_b)`.
    pub fn backward(&self, cache: &ConvCache, gy: &FeatureMap) -> (FeatureMap, Array2<f64>, Array1<f64>) {
        let (batch, oh, ow, c_out) = gy.dim();
        let rows = batch * oh * ow;
        let gy_mat: ArrayView2<f64> = gy
            .view()
            .into_shape_with_order((rows, c_out))
            .expect("grad reshape");
        let gw = cache.cols.t().dot(&gy_mat);
        let gb = gy_mat.sum_axis(ndarray::Axis(0));
        let gcols = gy_mat.dot(&self.w.t());
        let gx = col2im(&gcols, cache.in_dim, self.kernel, self.stride, self.pad);
        (gx, gw, gb)
    }
}

/// Patch extraction: row per output position, column order `(dy, dx, c)`.
fn im2col(x: &FeatureMap, k: usize, stride: usize, pad: usize) -> Array2<f64> {
    let (batch, h, w, c) = x.dim();
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut cols = Array2::zeros((batch * oh * ow, k * k * c));
    let xs = x.as_slice().expect("contiguous input");
    let cs = cols.as_slice_mut().expect("contiguous cols");
    let row_w = k * k * c;
    for b in 0..batch {
        let x_base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_w;
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let src = x_base + ((iy as usize) * w + ix as usize) * c;
                        let dst = row + (dy * k + dx) * c;
                        cs[dst..dst + c].copy_from_slice(&xs[src..src + c]);
                    }
                }
            }
        }
    }
    cols
}

/// Scatter-add transpose of [`im2col`].
fn col2im(
    gcols: &Array2<f64>,
    in_dim: (usize, usize, usize, usize),
    k: usize,
    stride: usize,
    pad: usize,
) -> FeatureMap {
    let (batch, h, w, c) = in_dim;
    let oh = (h + 2 * pad - k) / stride + 1;
    let ow = (w + 2 * pad - k) / stride + 1;
    let mut gx = Array4::zeros(in_dim);
    let gs = gcols.as_slice().expect("contiguous grad cols");
    let xs = gx.as_slice_mut().expect("contiguous grad input");
    let row_w = k * k * c;
    for b in 0..batch {
        let x_base = b * h * w * c;
        for oy in 0..oh {
            for ox in 0..ow {
                let row = ((b * oh + oy) * ow + ox) * row_w;
                for dy in 0..k {
                    let iy = (oy * stride + dy) as isize - pad as isize;
                    if iy < 0 || iy >= h as isize {
                        continue;
                    }
                    for dx in 0..k {
                        let ix = (ox * stride + dx) as isize - pad as isize;
                        if ix < 0 || ix >= w as isize {
                            continue;
                        }
                        let dst = x_base + ((iy as usize) * w + ix as usize) * c;
                        let src = row + (dy * k + dx) * c;
                        for ci in 0..c {
                            xs[dst + ci] += gs[src + ci];
                        }
                    }
                }
            }
        }
    }
    gx
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    /// Direct nested-loop convolution used as the oracle.
    fn conv_naive(x: &FeatureMap, conv: &Conv2d) -> FeatureMap {
        let (batch, h, w, _) = x.dim();
        let (oh, ow) = conv.out_hw(h, w);
        let mut y = Array4::zeros((batch, oh, ow, conv.c_out));
        for b in 0..batch {
            for oy in 0..oh {
                for ox in 0..ow {
                    for co in 0..conv.c_out {
                        let mut acc = conv.b[co];
                        for dy in 0..conv.kernel {
                            for dx in 0..conv.kernel {
                                let iy = (oy * conv.stride + dy) as isize - conv.pad as isize;
                                let ix = (ox * conv.stride + dx) as isize - conv.pad as isize;
                                if iy < 0 || ix < 0 || iy >= h as isize || ix >= w as isize {
                                    continue;
                                }
                                for ci in 0..conv.c_in {
                                    let wrow = (dy * conv.kernel + dx) * conv.c_in + ci;
                                    acc += x[[b, iy as usize, ix as usize, ci]]
                                        * conv.w[[wrow, co]];
                                }
                            }
                        }
                        y[[b, oy, ox, co]] = acc;
                    }
                }
            }
        }
        y
    }

    #[test]
    fn im2col_forward_matches_naive_convolution() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        for &(k, s, p) in &[(3usize, 1usize, 1usize), (5, 2, 2), (3, 2, 1), (1, 1, 0)] {
            let conv = Conv2d::new(3, 4, k, s, p, &mut rng);
            let mut x = Array4::zeros((2, 8, 8, 3));
            for v in x.iter_mut() {
                *v = rng.random_range(-1.0..1.0);
            }
            let fast = conv.forward(&x);
            let slow = conv_naive(&x, &conv);
            let max_err = fast
                .iter()
                .zip(slow.iter())
                .map(|(a, b)| (a - b).abs())
                .fold(0.0f64, f64::max);
            assert!(max_err < 1e-12, "k={k} s={s} p={p}: {max_err}");
        }
    }
}

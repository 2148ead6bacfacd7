//! Minimal dense/convolutional layers with hand-written backward passes.
//!
//! Feature maps are `[batch, height, width, channel]` (NHWC) so the im2col
//! matrix lines up with the row-major memory layout and convolutions reduce
//! to one GEMM each way. Everything is `f64`; all reductions run in a fixed
//! order so repeated runs are bit-identical.

mod adam;
mod conv;
mod linear;

pub use adam::Adam;
pub use conv::Conv2d;
pub use linear::Linear;

use ndarray::{Array4, ArrayViewD, ArrayViewMutD};

/// A feature map `[B, H, W, C]`.
pub type FeatureMap = Array4<f64>;

/// One step of a sequential network.
#[derive(Debug, Clone)]
pub enum Layer {
    Conv(Conv2d),
    /// Leaky ReLU with the given negative slope.
    LeakyRelu(f64),
    Sigmoid,
    /// Nearest-neighbour 2x upsampling.
    Upsample2,
}

/// Per-layer state captured during a training forward pass.
pub enum LayerCache {
    Conv(conv::ConvCache),
    /// Pre-activation input.
    LeakyRelu(FeatureMap),
    /// Activation output.
    Sigmoid(FeatureMap),
    Upsample2,
}

impl Layer {
    fn forward(&self, x: &FeatureMap) -> FeatureMap {
        match self {
            Layer::Conv(c) => c.forward(x),
            Layer::LeakyRelu(slope) => x.mapv(|v| if v >= 0.0 { v } else { slope * v }),
            Layer::Sigmoid => x.mapv(sigmoid),
            Layer::Upsample2 => upsample2(x),
        }
    }

    fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, LayerCache) {
        match self {
            Layer::Conv(c) => {
                let (y, cache) = c.forward_train(x);
                (y, LayerCache::Conv(cache))
            }
            Layer::LeakyRelu(slope) => {
                let y = x.mapv(|v| if v >= 0.0 { v } else { slope * v });
                (y, LayerCache::LeakyRelu(x.clone()))
            }
            Layer::Sigmoid => {
                let y = x.mapv(sigmoid);
                (y.clone(), LayerCache::Sigmoid(y))
            }
            Layer::Upsample2 => (upsample2(x), LayerCache::Upsample2),
        }
    }

    /// Gradients for the layer's own parameters are appended to `sink`
    /// (weight then bias for parametric layers); returns the input gradient.
    fn backward(&self, cache: &LayerCache, gy: FeatureMap, sink: &mut Vec<ndarray::ArrayD<f64>>) -> FeatureMap {
        match (self, cache) {
            (Layer::Conv(c), LayerCache::Conv(cache)) => {
                let (gx, gw, gb) = c.backward(cache, &gy);
                sink.push(gw.into_dyn());
                sink.push(gb.into_dyn());
                gx
            }
            (Layer::LeakyRelu(slope), LayerCache::LeakyRelu(x)) => {
                let mut gx = gy;
                gx.zip_mut_with(x, |g, &v| {
                    if v < 0.0 {
                        *g *= slope;
                    }
                });
                gx
            }
            (Layer::Sigmoid, LayerCache::Sigmoid(y)) => {
                let mut gx = gy;
                gx.zip_mut_with(y, |g, &v| *g *= v * (1.0 - v));
                gx
            }
            (Layer::Upsample2, LayerCache::Upsample2) => downsample_sum2(&gy),
            _ => unreachable!("cache does not match layer"),
        }
    }
}

fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

fn upsample2(x: &FeatureMap) -> FeatureMap {
    let (b, h, w, c) = x.dim();
    let mut y = Array4::zeros((b, 2 * h, 2 * w, c));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    let v = x[[bi, hi, wi, ci]];
                    y[[bi, 2 * hi, 2 * wi, ci]] = v;
                    y[[bi, 2 * hi + 1, 2 * wi, ci]] = v;
                    y[[bi, 2 * hi, 2 * wi + 1, ci]] = v;
                    y[[bi, 2 * hi + 1, 2 * wi + 1, ci]] = v;
                }
            }
        }
    }
    y
}

fn downsample_sum2(gy: &FeatureMap) -> FeatureMap {
    let (b, h2, w2, c) = gy.dim();
    let (h, w) = (h2 / 2, w2 / 2);
    let mut gx = Array4::zeros((b, h, w, c));
    for bi in 0..b {
        for hi in 0..h {
            for wi in 0..w {
                for ci in 0..c {
                    gx[[bi, hi, wi, ci]] = gy[[bi, 2 * hi, 2 * wi, ci]]
                        + gy[[bi, 2 * hi + 1, 2 * wi, ci]]
                        + gy[[bi, 2 * hi, 2 * wi + 1, ci]]
                        + gy[[bi, 2 * hi + 1, 2 * wi + 1, ci]];
                }
            }
        }
    }
    gx
}

/// A stack of layers applied in order.
#[derive(Debug, Clone, Default)]
pub struct Sequential {
    pub layers: Vec<Layer>,
}

impl Sequential {
    pub fn new(layers: Vec<Layer>) -> Self {
        Self { layers }
    }

    pub fn forward(&self, x: &FeatureMap) -> FeatureMap {
        let mut cur = x.clone();
        for layer in &self.layers {
            cur = layer.forward(&cur);
        }
        cur
    }

    pub fn forward_train(&self, x: &FeatureMap) -> (FeatureMap, Vec<LayerCache>) {
        let mut caches = Vec::with_capacity(self.layers.len());
        let mut cur = x.clone();
        for layer in &self.layers {
            let (y, cache) = layer.forward_train(&cur);
            caches.push(cache);
            cur = y;
        }
        (cur, caches)
    }

    /// Backpropagate through the stack. Parameter gradients are appended to
    /// `sink` in the same order [`Sequential::params`] yields the parameters.
    pub fn backward(
        &self,
        caches: &[LayerCache],
        gy: FeatureMap,
        sink: &mut Vec<ndarray::ArrayD<f64>>,
    ) -> FeatureMap {
        let mut rev: Vec<ndarray::ArrayD<f64>> = Vec::new();
        let mut g = gy;
        for (layer, cache) in self.layers.iter().zip(caches).rev() {
            let mut local = Vec::new();
            g = layer.backward(cache, g, &mut local);
            // collected walking backwards; re-reverse below
            for item in local.into_iter().rev() {
                rev.push(item);
            }
        }
        for item in rev.into_iter().rev() {
            sink.push(item);
        }
        g
    }

    pub fn params(&self) -> Vec<ArrayViewD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &self.layers {
            if let Layer::Conv(c) = layer {
                out.push(c.w.view().into_dyn());
                out.push(c.b.view().into_dyn());
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<ArrayViewMutD<'_, f64>> {
        let mut out = Vec::new();
        for layer in &mut self.layers {
            if let Layer::Conv(c) = layer {
                out.push(c.w.view_mut().into_dyn());
                out.push(c.b.view_mut().into_dyn());
            }
        }
        out
    }
}

/// Element-wise accumulate `src` into `dst`.
pub fn accumulate(dst: &mut [ndarray::ArrayD<f64>], src: &[ndarray::ArrayD<f64>]) {
    assert_eq!(dst.len(), src.len());
    for (d, s) in dst.iter_mut().zip(src) {
        d.zip_mut_with(s, |a, &b| *a += b);
    }
}

/// Zero gradients shaped like the given parameter views.
pub fn zeros_like_params(params: &[ArrayViewD<'_, f64>]) -> Vec<ndarray::ArrayD<f64>> {
    params
        .iter()
        .map(|p| ndarray::ArrayD::zeros(p.raw_dim()))
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::Array4;
    use rand::Rng;
    use rand_chacha::rand_core::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn random_map(rng: &mut ChaCha8Rng, dim: (usize, usize, usize, usize)) -> FeatureMap {
        let mut x = Array4::zeros(dim);
        for v in x.iter_mut() {
            *v = rng.random_range(-1.0..1.0);
        }
        x
    }

    /// Finite-difference check of a whole sequential stack: scalar loss is
    /// sum(y * t) for a fixed random t, so dL/dy = t.
    fn check_stack(stack: Sequential, dim: (usize, usize, usize, usize), tol: f64) {
        let mut rng = ChaCha8Rng::seed_from_u64(99);
        let x = random_map(&mut rng, dim);
        let (y0, caches) = stack.forward_train(&x);
        let t = random_map(&mut rng, y0.dim());

        let mut sink = Vec::new();
        let gx = stack.backward(&caches, t.clone(), &mut sink);

        // input gradient
        let eps = 1e-5;
        let mut worst = 0.0f64;
        for idx in 0..x.len().min(40) {
            let flat = idx * (x.len() / x.len().min(40)).max(1);
            let mut xp = x.clone();
            let mut xm = x.clone();
            {
                let p = xp.as_slice_mut().unwrap();
                p[flat] += eps;
            }
            {
                let m = xm.as_slice_mut().unwrap();
                m[flat] -= eps;
            }
            let lp = (&stack.forward(&xp) * &t).sum();
            let lm = (&stack.forward(&xm) * &t).sum();
            let fd = (lp - lm) / (2.0 * eps);
            let an = gx.as_slice().unwrap()[flat];
            let denom = fd.abs().max(an.abs()).max(1e-8);
            worst = worst.max((fd - an).abs() / denom);
        }
        assert!(worst < tol, "input grad mismatch {worst}");

        // parameter gradients: perturb a few entries of each parameter
        let n_params = stack.params().len();
        for pi in 0..n_params {
            let len = stack.params()[pi].len();
            for k in [0usize, len / 2, len - 1] {
                let orig = {
                    let p = stack.params()[pi].to_owned();
                    p.as_slice().unwrap()[k]
                };
                let mut s = stack.clone();
                s.params_mut()[pi].as_slice_mut().unwrap()[k] = orig + eps;
                let lp = (&s.forward(&x) * &t).sum();
                s.params_mut()[pi].as_slice_mut().unwrap()[k] = orig - eps;
                let lm = (&s.forward(&x) * &t).sum();
                let fd = (lp - lm) / (2.0 * eps);
                let an = sink[pi].as_slice().unwrap()[k];
                let denom = fd.abs().max(an.abs()).max(1e-8);
                assert!(
                    (fd - an).abs() / denom < tol,
                    "param {pi}[{k}] grad mismatch fd={fd} an={an}"
                );
            }
        }
    }

    #[test]
    fn conv_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let stack = Sequential::new(vec![
            Layer::Conv(Conv2d::new(3, 4, 3, 2, 1, &mut rng)),
            Layer::LeakyRelu(0.2),
            Layer::Conv(Conv2d::new(4, 5, 3, 1, 1, &mut rng)),
            Layer::Sigmoid,
        ]);
        check_stack(stack, (2, 8, 8, 3), 1e-5);
    }

    #[test]
    fn upsample_stack_gradients_match_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let stack = Sequential::new(vec![
            Layer::Conv(Conv2d::new(2, 3, 3, 1, 1, &mut rng)),
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(3, 2, 3, 1, 1, &mut rng)),
            Layer::LeakyRelu(0.2),
        ]);
        check_stack(stack, (2, 4, 4, 2), 1e-5);
    }

    #[test]
    fn upsample_then_downsample_is_scaling() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x = random_map(&mut rng, (1, 3, 3, 2));
        let up = upsample2(&x);
        assert_eq!(up.dim(), (1, 6, 6, 2));
        let back = downsample_sum2(&up);
        for (a, b) in back.iter().zip(x.iter()) {
            assert!((a - 4.0 * b).abs() < 1e-12);
        }
    }
}

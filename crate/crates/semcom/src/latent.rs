//! Joint source-channel encoder/decoder pair.
//!
//! The encoder maps an image to a power-normalized semantic vector whose
//! length is the channel bandwidth budget; the decoder maps a (noisy,
//! possibly quantized) vector back to pixel space. Both are small strided
//! convolution stacks so the whole laboratory runs at desk scale on a CPU.

use ndarray::{Array1, Array2, Array3, Array4, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{Conv2d, Layer, LayerCache, Sequential};
use crate::rng;

/// An image with values in `[0, 1]`, stored `[H, W, C]`.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageSample {
    pub pixels: Array3<f64>,
}

impl ImageSample {
    pub fn new(pixels: Array3<f64>) -> Result<Self> {
        if pixels.iter().any(|v| !v.is_finite() || *v < 0.0 || *v > 1.0) {
            return Err(Error::Config(
                "image values must be finite and in [0,1]".into(),
            ));
        }
        Ok(Self { pixels })
    }

    pub fn shape(&self) -> (usize, usize, usize) {
        let d = self.pixels.dim();
        (d.0, d.1, d.2)
    }
}

/// Power-normalized latent representation of even length.
#[derive(Debug, Clone, PartialEq)]
pub struct SemanticVector {
    values: Array1<f64>,
}

impl SemanticVector {
    /// Wrap values that are already normalized (checked).
    pub fn from_normalized(values: Array1<f64>) -> Result<Self> {
        if values.len() % 2 != 0 {
            return Err(Error::Framing("semantic vector length must be even".into()));
        }
        let mp = mean_square(values.as_slice().expect("contiguous"));
        if (mp - 1.0).abs() > 1e-6 {
            return Err(Error::Contract(format!(
                "semantic vector mean power {mp} deviates from 1"
            )));
        }
        Ok(Self { values })
    }

    pub fn values(&self) -> &Array1<f64> {
        &self.values
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }
}

fn mean_square(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64
}

/// Scale a raw vector onto the unit average-power shell:
/// `out = raw * sqrt(d / sum(raw^2))`.
pub fn power_normalize(raw: &Array1<f64>) -> Result<SemanticVector> {
    if raw.len() % 2 != 0 {
        return Err(Error::Framing("semantic vector length must be even".into()));
    }
    let sum_sq: f64 = raw.iter().map(|x| x * x).sum();
    if sum_sq == 0.0 {
        return Err(Error::Degenerate("cannot normalize the zero vector".into()));
    }
    let scale = (raw.len() as f64 / sum_sq).sqrt();
    Ok(SemanticVector {
        values: raw.mapv(|x| x * scale),
    })
}

/// Row-wise power normalization of a `[batch, d]` matrix.
/// Returns the normalized matrix and the per-row `(scale, sum_sq)` needed by
/// [`power_normalize_backward`].
pub fn power_normalize_batch(raw: &Array2<f64>) -> Result<(Array2<f64>, Vec<(f64, f64)>)> {
    let d = raw.ncols() as f64;
    let mut out = raw.clone();
    let mut stats = Vec::with_capacity(raw.nrows());
    for mut row in out.rows_mut() {
        let sum_sq: f64 = row.iter().map(|x| x * x).sum();
        if sum_sq == 0.0 {
            return Err(Error::Degenerate("cannot normalize the zero vector".into()));
        }
        let scale = (d / sum_sq).sqrt();
        row.mapv_inplace(|x| x * scale);
        stats.push((scale, sum_sq));
    }
    Ok((out, stats))
}

/// Backward pass of row-wise power normalization.
///
/// With `y = s x`, `s = sqrt(d / sum(x^2))`:
/// `dL/dx = s (g - x (g . x) / sum(x^2))`.
pub fn power_normalize_backward(
    raw: &Array2<f64>,
    grad_out: &Array2<f64>,
    stats: &[(f64, f64)],
) -> Array2<f64> {
    let mut gx = grad_out.clone();
    for ((mut grow, xrow), &(scale, sum_sq)) in
        gx.rows_mut().into_iter().zip(raw.rows()).zip(stats)
    {
        let dot: f64 = grow.iter().zip(xrow.iter()).map(|(g, x)| g * x).sum();
        let coef = dot / sum_sq;
        for (g, x) in grow.iter_mut().zip(xrow.iter()) {
            *g = scale * (*g - x * coef);
        }
    }
    gx
}

/// Architecture descriptor; fully determines every parameter shape.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ArchDescriptor {
    pub height: usize,
    pub width: usize,
    pub channels_in: usize,
    /// Output channels of the three strided encoder convolutions.
    pub enc_channels: [usize; 3],
    /// Latent length `d`; must be even and divisible by the bottleneck area.
    pub latent_dim: usize,
}

impl Default for ArchDescriptor {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels_in: 3,
            enc_channels: [32, 64, 64],
            latent_dim: 512,
        }
    }
}

impl ArchDescriptor {
    pub fn validate(&self) -> Result<()> {
        if self.height % 8 != 0 || self.width % 8 != 0 {
            return Err(Error::Config(
                "image sides must be divisible by 8 (three stride-2 convs)".into(),
            ));
        }
        let area = (self.height / 8) * (self.width / 8);
        if self.latent_dim % area != 0 {
            return Err(Error::Config(format!(
                "latent_dim {} must be divisible by the bottleneck area {}",
                self.latent_dim, area
            )));
        }
        if self.latent_dim % 2 != 0 {
            return Err(Error::Config("latent_dim must be even".into()));
        }
        Ok(())
    }

    pub fn bottleneck_hw(&self) -> (usize, usize) {
        (self.height / 8, self.width / 8)
    }

    pub fn latent_channels(&self) -> usize {
        let (bh, bw) = self.bottleneck_hw();
        self.latent_dim / (bh * bw)
    }
}

/// Encoder/decoder stacks plus the descriptor that shaped them.
#[derive(Debug, Clone)]
pub struct Autoencoder {
    pub arch: ArchDescriptor,
    pub encoder: Sequential,
    pub decoder: Sequential,
}

const LEAKY_SLOPE: f64 = 0.2;

impl Autoencoder {
    /// Freshly initialized model, deterministic in `seed`.
    pub fn init(arch: ArchDescriptor, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut r: ChaCha8Rng = rng::stream(seed, "model-init");
        let [c1, c2, c3] = arch.enc_channels;
        let cl = arch.latent_channels();
        let encoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(arch.channels_in, c1, 5, 2, 2, &mut r)),
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Conv(Conv2d::new(c1, c2, 5, 2, 2, &mut r)),
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Conv(Conv2d::new(c2, c3, 5, 2, 2, &mut r)),
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Conv(Conv2d::new(c3, cl, 3, 1, 1, &mut r)),
        ]);
        let decoder = Sequential::new(vec![
            Layer::Conv(Conv2d::new(cl, c3, 3, 1, 1, &mut r)),
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(c3, c2, 3, 1, 1, &mut r)),
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(c2, c1, 3, 1, 1, &mut r)),
            Layer::LeakyRelu(LEAKY_SLOPE),
            Layer::Upsample2,
            Layer::Conv(Conv2d::new(c1, arch.channels_in, 3, 1, 1, &mut r)),
            Layer::Sigmoid,
        ]);
        Ok(Self {
            arch,
            encoder,
            decoder,
        })
    }

    pub fn check_image(&self, image: &ImageSample) -> Result<()> {
        let (h, w, c) = image.shape();
        if (h, w, c) != (self.arch.height, self.arch.width, self.arch.channels_in) {
            return Err(Error::Config(format!(
                "image shape {h}x{w}x{c} does not match architecture {}x{}x{}",
                self.arch.height, self.arch.width, self.arch.channels_in
            )));
        }
        Ok(())
    }

    /// Encode one image into a power-normalized semantic vector.
    pub fn encode(&self, image: &ImageSample) -> Result<SemanticVector> {
        self.check_image(image)?;
        let batch = stack_images(std::slice::from_ref(image));
        let latent = self.encode_batch(&batch)?;
        Ok(SemanticVector {
            values: latent.row(0).to_owned(),
        })
    }

    /// Encode a `[B, H, W, C]` batch into `[B, d]` normalized latents.
    pub fn encode_batch(&self, images: &Array4<f64>) -> Result<Array2<f64>> {
        let raw = self.encode_batch_raw(images);
        let (norm, _) = power_normalize_batch(&raw)?;
        Ok(norm)
    }

    /// Encoder output before power normalization, flattened `[B, d]`.
    pub fn encode_batch_raw(&self, images: &Array4<f64>) -> Array2<f64> {
        let y = self.encoder.forward(images);
        flatten_latent(&y)
    }

    /// Training-mode encoder forward; returns raw latents and layer caches.
    pub fn encode_batch_train(&self, images: &Array4<f64>) -> (Array2<f64>, Vec<LayerCache>) {
        let (y, caches) = self.encoder.forward_train(images);
        (flatten_latent(&y), caches)
    }

    /// Decode one semantic vector to an image.
    pub fn decode(&self, latent: &SemanticVector) -> Result<ImageSample> {
        if latent.len() != self.arch.latent_dim {
            return Err(Error::Config(format!(
                "latent length {} does not match architecture d={}",
                latent.len(),
                self.arch.latent_dim
            )));
        }
        let mat = latent
            .values()
            .view()
            .into_shape_with_order((1, self.arch.latent_dim))
            .expect("row reshape")
            .to_owned();
        let out = self.decode_batch(&mat);
        Ok(ImageSample {
            pixels: out.index_axis(Axis(0), 0).to_owned(),
        })
    }

    /// Decode `[B, d]` latents to a `[B, H, W, C]` batch in `[0, 1]`.
    pub fn decode_batch(&self, latents: &Array2<f64>) -> Array4<f64> {
        let maps = self.unflatten_latent(latents);
        self.decoder.forward(&maps)
    }

    pub fn decode_batch_train(&self, latents: &Array2<f64>) -> (Array4<f64>, Vec<LayerCache>) {
        let maps = self.unflatten_latent(latents);
        self.decoder.forward_train(&maps)
    }

    /// Reshape `[B, d]` to the bottleneck `[B, bh, bw, cl]` feature map.
    pub fn unflatten_latent(&self, latents: &Array2<f64>) -> Array4<f64> {
        let (bh, bw) = self.arch.bottleneck_hw();
        let cl = self.arch.latent_channels();
        let b = latents.nrows();
        latents
            .view()
            .into_shape_with_order((b, bh, bw, cl))
            .expect("latent reshape")
            .to_owned()
    }

    pub fn params(&self) -> Vec<ndarray::ArrayViewD<'_, f64>> {
        let mut p = self.encoder.params();
        p.extend(self.decoder.params());
        p
    }

    pub fn params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f64>> {
        let mut p = self.encoder.params_mut();
        p.extend(self.decoder.params_mut());
        p
    }

    /// Canonical tensor names aligned with [`Autoencoder::params`].
    pub fn param_names(&self) -> Vec<String> {
        let mut names = Vec::new();
        for (i, layer) in self.encoder.layers.iter().enumerate() {
            if matches!(layer, Layer::Conv(_)) {
                names.push(format!("encoder.{i}.w"));
                names.push(format!("encoder.{i}.b"));
            }
        }
        for (i, layer) in self.decoder.layers.iter().enumerate() {
            if matches!(layer, Layer::Conv(_)) {
                names.push(format!("decoder.{i}.w"));
                names.push(format!("decoder.{i}.b"));
            }
        }
        names
    }
}

/// `[B, bh, bw, cl]` bottleneck map to `[B, d]` rows.
pub fn flatten_latent(y: &Array4<f64>) -> Array2<f64> {
    let (b, bh, bw, cl) = y.dim();
    y.view()
        .into_shape_with_order((b, bh * bw * cl))
        .expect("flatten")
        .to_owned()
}

/// Stack images into a `[B, H, W, C]` batch.
pub fn stack_images(images: &[ImageSample]) -> Array4<f64> {
    assert!(!images.is_empty());
    let (h, w, c) = images[0].shape();
    let mut out = Array4::zeros((images.len(), h, w, c));
    for (i, img) in images.iter().enumerate() {
        out.index_axis_mut(Axis(0), i).assign(&img.pixels);
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;
    use ndarray::arr1;

    #[test]
    fn normalize_two_zero() {
        let v = power_normalize(&arr1(&[2.0, 0.0])).unwrap();
        let s = 2.0f64.sqrt();
        assert!((v.values()[0] - s).abs() < 1e-12);
        assert!(v.values()[1].abs() < 1e-12);
    }

    #[test]
    fn normalize_already_unit() {
        let v = power_normalize(&arr1(&[1.0, 1.0, 1.0, 1.0])).unwrap();
        for x in v.values() {
            assert!((x - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn normalize_three_four() {
        // [3,4] * sqrt(2/25): frozen from an independent evaluation.
        let v = power_normalize(&arr1(&[3.0, 4.0])).unwrap();
        assert!((v.values()[0] - 0.848_528_137_423_857_0).abs() < 1e-12);
        assert!((v.values()[1] - 1.131_370_849_898_476_0).abs() < 1e-12);
        let mp = v.values().iter().map(|x| x * x).sum::<f64>() / 2.0;
        assert!((mp - 1.0).abs() < 1e-12);
    }

    #[test]
    fn normalize_rejects_zero_vector() {
        let err = power_normalize(&arr1(&[0.0, 0.0])).unwrap_err();
        assert_eq!(err.class(), "degenerate-input");
    }

    #[test]
    fn normalize_rejects_odd_length() {
        let err = power_normalize(&arr1(&[1.0, 2.0, 3.0])).unwrap_err();
        assert_eq!(err.class(), "framing");
    }

    #[test]
    fn encode_zero_image_is_unit_power() {
        let model = Autoencoder::init(ArchDescriptor::default(), 1).unwrap();
        let img = ImageSample::new(Array3::zeros((32, 32, 3))).unwrap();
        let v = model.encode(&img).unwrap();
        assert_eq!(v.len(), 512);
        let mp = v.values().iter().map(|x| x * x).sum::<f64>() / v.len() as f64;
        assert!((mp - 1.0).abs() < 1e-6);
    }

    #[test]
    fn encode_is_deterministic_for_fixed_seed() {
        let a = Autoencoder::init(ArchDescriptor::default(), 7).unwrap();
        let b = Autoencoder::init(ArchDescriptor::default(), 7).unwrap();
        let mut pix = Array3::zeros((32, 32, 3));
        for (i, v) in pix.iter_mut().enumerate() {
            *v = (i % 255) as f64 / 255.0;
        }
        let img = ImageSample::new(pix).unwrap();
        let va = a.encode(&img).unwrap();
        let vb = b.encode(&img).unwrap();
        // byte-identical, not approximately equal
        for (x, y) in va.values().iter().zip(vb.values().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
        let vc = a.encode(&img).unwrap();
        for (x, y) in va.values().iter().zip(vc.values().iter()) {
            assert_eq!(x.to_bits(), y.to_bits());
        }
    }

    #[test]
    fn decode_output_in_unit_range() {
        let model = Autoencoder::init(ArchDescriptor::default(), 2).unwrap();
        let v = power_normalize(&Array1::from_elem(512, 1.0)).unwrap();
        let img = model.decode(&v).unwrap();
        for p in img.pixels.iter() {
            assert!((0.0..=1.0).contains(p));
        }
        let img2 = model.decode(&v).unwrap();
        assert_eq!(img.pixels, img2.pixels);
    }

    #[test]
    fn decode_rejects_wrong_length() {
        let model = Autoencoder::init(ArchDescriptor::default(), 2).unwrap();
        let v = power_normalize(&Array1::from_elem(256, 1.0)).unwrap();
        assert_eq!(model.decode(&v).unwrap_err().class(), "config");
    }

    #[test]
    fn encode_rejects_wrong_shape() {
        let model = Autoencoder::init(ArchDescriptor::default(), 2).unwrap();
        let img = ImageSample::new(Array3::zeros((16, 16, 3))).unwrap();
        assert_eq!(model.encode(&img).unwrap_err().class(), "config");
    }

    #[test]
    fn normalize_backward_matches_finite_differences() {
        let mut raw = Array2::zeros((2, 6));
        for (i, v) in raw.iter_mut().enumerate() {
            *v = 0.3 * (i as f64 + 1.0) * if i % 2 == 0 { 1.0 } else { -1.0 };
        }
        let mut t = Array2::zeros((2, 6));
        for (i, v) in t.iter_mut().enumerate() {
            *v = ((i * 7 % 5) as f64 - 2.0) / 3.0;
        }
        let (_, stats) = power_normalize_batch(&raw).unwrap();
        let gx = power_normalize_backward(&raw, &t, &stats);
        let eps = 1e-6;
        for r in 0..2 {
            for c in 0..6 {
                let mut p = raw.clone();
                p[[r, c]] += eps;
                let mut m = raw.clone();
                m[[r, c]] -= eps;
                let lp = (&power_normalize_batch(&p).unwrap().0 * &t).sum();
                let lm = (&power_normalize_batch(&m).unwrap().0 * &t).sum();
                let fd = (lp - lm) / (2.0 * eps);
                assert!((fd - gx[[r, c]]).abs() < 1e-6, "({r},{c}) fd={fd} an={}", gx[[r, c]]);
            }
        }
    }
}

//! Discretize semantic vectors into constellation symbols or bits.
//!
//! Deterministic families (scalar / symbol / vector quantization) share the
//! nearest-target rule and differ in what the target set is; each can be
//! trained through a pluggable gradient bridge (straight-through,
//! soft-to-hard annealing, or additive uniform noise). The probabilistic
//! family samples symbols from a learned categorical per I/Q slot and
//! trains through a straight-through Gumbel-softmax relaxation.

use ndarray::{Array1, Array2, ArrayView2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::constellation::{nearest_point, Constellation};
use crate::error::{Error, Result};

/// Discretization family.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Family {
    Scalar,
    Symbol,
    Vector,
    Probabilistic,
}

/// Gradient bridge used during fine-tuning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum BridgeKind {
    Ste,
    SoftToHard,
    UniformNoise,
}

/// Declarative modulator description; validated before use.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModulatorConfig {
    pub family: Family,
    pub bridge: BridgeKind,
    /// Scalar family: explicit quantization levels (sorted ascending).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub levels: Option<Vec<f64>>,
    /// Scalar family: number of auto-spaced levels when `levels` is absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub num_levels: Option<usize>,
    /// Scalar family: learned affine-threshold variant (1 bit/element).
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub nn_approx: bool,
    /// Symbol / probabilistic family: constellation order when the
    /// constellation is not supplied as a file.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub order: Option<usize>,
    /// Vector family: codebook size (power of two).
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub codebook_size: Option<usize>,
    /// Vector family: block dimension.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub block_dim: Option<usize>,
    /// Relaxation temperature for out-of-training use; training follows the
    /// annealing schedule instead.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub temperature: Option<f64>,
    /// Commitment weight for the vector family.
    #[serde(default = "default_beta")]
    pub beta: f64,
    /// Uniform-noise bridge step; defaults to the smallest level gap.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub noise_delta: Option<f64>,
    /// Keep constellation points trainable during fine-tuning.
    #[serde(default, skip_serializing_if = "std::ops::Not::not")]
    pub learnable_constellation: bool,
}

fn default_beta() -> f64 {
    0.25
}

impl ModulatorConfig {
    pub fn symbol(order: usize) -> Self {
        Self {
            family: Family::Symbol,
            bridge: BridgeKind::Ste,
            levels: None,
            num_levels: None,
            nn_approx: false,
            order: Some(order),
            codebook_size: None,
            block_dim: None,
            temperature: None,
            beta: default_beta(),
            noise_delta: None,
            learnable_constellation: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if let Some(t) = self.temperature {
            if t <= 0.0 || !t.is_finite() {
                return Err(Error::Config(format!("temperature must be positive (got {t})")));
            }
        }
        if self.beta < 0.0 {
            return Err(Error::Config("commitment weight must be non-negative".into()));
        }
        match self.family {
            Family::Scalar => {
                if let Some(levels) = &self.levels {
                    validate_levels(levels)?;
                } else if !self.nn_approx {
                    let l = self.num_levels.ok_or_else(|| {
                        Error::Config("scalar family needs levels or num_levels".into())
                    })?;
                    if !l.is_power_of_two() || l < 2 {
                        return Err(Error::Config(format!(
                            "num_levels {l} must be a power of two >= 2"
                        )));
                    }
                }
            }
            Family::Symbol | Family::Probabilistic => {
                if self.bridge == BridgeKind::UniformNoise {
                    return Err(Error::Config(
                        "uniform-noise bridge applies to the scalar family only".into(),
                    ));
                }
                if self.family == Family::Probabilistic && self.bridge != BridgeKind::SoftToHard {
                    return Err(Error::Config(
                        "probabilistic family trains through the relaxation bridge (soft-to-hard)"
                            .into(),
                    ));
                }
            }
            Family::Vector => {
                if self.bridge == BridgeKind::UniformNoise {
                    return Err(Error::Config(
                        "uniform-noise bridge applies to the scalar family only".into(),
                    ));
                }
                let k = self
                    .codebook_size
                    .ok_or_else(|| Error::Config("vector family needs codebook_size".into()))?;
                if !k.is_power_of_two() || k < 2 {
                    return Err(Error::Config(format!(
                        "codebook_size {k} must be a power of two >= 2"
                    )));
                }
                if self.block_dim.unwrap_or(0) == 0 {
                    return Err(Error::Config("vector family needs a positive block_dim".into()));
                }
            }
        }
        if self.learnable_constellation && self.bridge != BridgeKind::Ste {
            return Err(Error::Config(
                "learnable constellations are supported with the ste bridge".into(),
            ));
        }
        Ok(())
    }

    /// Resolve scalar levels: explicit list, or `num_levels` uniformly
    /// spaced over `[-2, 2]` (two standard deviations of a unit-power
    /// latent element).
    pub fn resolve_levels(&self) -> Result<Vec<f64>> {
        if let Some(levels) = &self.levels {
            validate_levels(levels)?;
            return Ok(levels.clone());
        }
        let l = self
            .num_levels
            .ok_or_else(|| Error::Config("scalar family needs levels or num_levels".into()))?;
        Ok(uniform_levels(l, 2.0))
    }
}

fn validate_levels(levels: &[f64]) -> Result<()> {
    if !levels.len().is_power_of_two() || levels.len() < 2 {
        return Err(Error::Config(format!(
            "level count {} must be a power of two >= 2",
            levels.len()
        )));
    }
    if levels.windows(2).any(|w| w[0] >= w[1]) {
        return Err(Error::Config("levels must be strictly increasing".into()));
    }
    Ok(())
}

/// `count` levels uniformly spaced over `[-amp, amp]`.
pub fn uniform_levels(count: usize, amp: f64) -> Vec<f64> {
    (0..count)
        .map(|i| -amp + 2.0 * amp * i as f64 / (count as f64 - 1.0))
        .collect()
}

// ---------------------------------------------------------------------------
// I/Q framing
// ---------------------------------------------------------------------------

/// Pair element `i` of the first half with element `i` of the second half.
pub fn pair_iq(v: &Array1<f64>) -> Result<Vec<(f64, f64)>> {
    if v.len() % 2 != 0 {
        return Err(Error::Framing(format!("cannot pair odd-length vector ({})", v.len())));
    }
    let half = v.len() / 2;
    Ok((0..half).map(|i| (v[i], v[half + i])).collect())
}

/// Inverse of [`pair_iq`].
pub fn unpair_iq(pairs: &[(f64, f64)]) -> Array1<f64> {
    let half = pairs.len();
    let mut v = Array1::zeros(2 * half);
    for (i, &(re, im)) in pairs.iter().enumerate() {
        v[i] = re;
        v[half + i] = im;
    }
    v
}

/// Unit-power latent elements pair into symbols of mean power 2, so the
/// transmit chain scales pairs by `1/sqrt(2)` to hit the unit symbol-power
/// channel contract and undoes it at the receiver.
pub const TX_PAIR_SCALE: f64 = std::f64::consts::FRAC_1_SQRT_2;

/// Latent vector to unit-mean-power transmit symbols.
pub fn latent_to_tx_symbols(v: &Array1<f64>) -> Result<Vec<(f64, f64)>> {
    Ok(pair_iq(v)?
        .into_iter()
        .map(|(i, q)| (i * TX_PAIR_SCALE, q * TX_PAIR_SCALE))
        .collect())
}

/// Received symbols back to the latent domain.
pub fn tx_symbols_to_latent(pairs: &[(f64, f64)]) -> Array1<f64> {
    let scaled: Vec<(f64, f64)> = pairs
        .iter()
        .map(|&(i, q)| (i / TX_PAIR_SCALE, q / TX_PAIR_SCALE))
        .collect();
    unpair_iq(&scaled)
}

// ---------------------------------------------------------------------------
// Deterministic quantizers
// ---------------------------------------------------------------------------

/// Nearest level for one element; ties break toward the lower level.
pub fn nearest_level(x: f64, levels: &[f64]) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &l) in levels.iter().enumerate() {
        let d = (x - l).abs();
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Element-wise quantization onto a fixed level set.
///
/// Returns the quantized vector and the Gray-coded index bit stream
/// (`log2(L)` bits per element, MSB first).
pub fn scalar_quantize(v: &Array1<f64>, levels: &[f64]) -> Result<(Array1<f64>, Vec<u8>)> {
    validate_levels(levels)?;
    let w = levels.len().trailing_zeros() as usize;
    let mut q = Array1::zeros(v.len());
    let mut bits = Vec::with_capacity(v.len() * w);
    for (i, &x) in v.iter().enumerate() {
        let idx = nearest_level(x, levels);
        q[i] = levels[idx];
        let g = (idx ^ (idx >> 1)) as u32;
        for b in (0..w).rev() {
            bits.push(((g >> b) & 1) as u8);
        }
    }
    Ok((q, bits))
}

/// Invert the Gray-coded bit stream of [`scalar_quantize`].
pub fn scalar_dequantize_bits(bits: &[u8], levels: &[f64]) -> Result<Array1<f64>> {
    validate_levels(levels)?;
    let w = levels.len().trailing_zeros() as usize;
    if bits.len() % w != 0 {
        return Err(Error::Framing(format!(
            "bit stream length {} not divisible by {w} bits/element",
            bits.len()
        )));
    }
    let vals = bits
        .chunks(w)
        .map(|chunk| {
            let mut g = 0usize;
            for &b in chunk {
                g = (g << 1) | b as usize;
            }
            // inverse Gray
            let mut idx = g;
            let mut shift = 1;
            while (g >> shift) > 0 {
                idx ^= g >> shift;
                shift += 1;
            }
            levels[idx]
        })
        .collect::<Vec<f64>>();
    Ok(Array1::from_vec(vals))
}

/// Quantize I/Q pairs of a latent vector onto a constellation.
///
/// Pairs element `i` of the first half with element `i` of the second half,
/// maps each pair to its nearest point, and rebuilds the vector from the
/// selected points.
pub fn symbol_quantize(v: &Array1<f64>, c: &Constellation) -> Result<(Vec<usize>, Array1<f64>)> {
    let pairs = pair_iq(v)?;
    let symbols: Vec<usize> = pairs.iter().map(|&p| nearest_point(c, p)).collect();
    let points: Vec<(f64, f64)> = symbols.iter().map(|&s| c.point(s)).collect();
    Ok((symbols, unpair_iq(&points)))
}

/// Trainable codebook for block (vector) quantization.
#[derive(Debug, Clone, PartialEq)]
pub struct VQCodebook {
    /// `[K, block_dim]`.
    pub vectors: Array2<f64>,
}

impl VQCodebook {
    pub fn new(vectors: Array2<f64>) -> Result<Self> {
        let k = vectors.nrows();
        if !k.is_power_of_two() || k < 2 {
            return Err(Error::Config(format!(
                "codebook size {k} must be a power of two >= 2"
            )));
        }
        if vectors.iter().any(|v| !v.is_finite()) {
            return Err(Error::Config("codebook entries must be finite".into()));
        }
        Ok(Self { vectors })
    }

    /// Seed the codebook with `k` evenly strided blocks of the samples.
    pub fn from_samples(samples: &Array2<f64>, k: usize) -> Result<Self> {
        if samples.nrows() < k {
            return Err(Error::Config(format!(
                "need at least {k} sample blocks, got {}",
                samples.nrows()
            )));
        }
        let stride = samples.nrows() / k;
        let mut vectors = Array2::zeros((k, samples.ncols()));
        for i in 0..k {
            vectors.row_mut(i).assign(&samples.row(i * stride));
        }
        Self::new(vectors)
    }

    pub fn size(&self) -> usize {
        self.vectors.nrows()
    }

    pub fn block_dim(&self) -> usize {
        self.vectors.ncols()
    }

    pub fn bits_per_block(&self) -> usize {
        self.size().trailing_zeros() as usize
    }

    /// Nearest codeword index for a block; ties toward the lowest index.
    pub fn nearest(&self, block: &[f64]) -> usize {
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, row) in self.vectors.rows().into_iter().enumerate() {
            let d: f64 = row
                .iter()
                .zip(block)
                .map(|(c, x)| (x - c) * (x - c))
                .sum();
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        best
    }
}

/// The two VQ training terms. Numerically both equal the block-to-codeword
/// distance; they differ in which side the gradient treats as constant.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct VqLosses {
    /// Pulls codewords toward (frozen) encoder blocks.
    pub codebook: f64,
    /// Pulls encoder blocks toward (frozen) codewords.
    pub commitment: f64,
}

/// Block-wise quantization onto the codebook.
pub fn vector_quantize(
    v: &Array1<f64>,
    cb: &VQCodebook,
) -> Result<(Vec<usize>, Array1<f64>, VqLosses)> {
    let b = cb.block_dim();
    if v.len() % b != 0 {
        return Err(Error::Config(format!(
            "latent length {} not divisible by block_dim {b}",
            v.len()
        )));
    }
    let mut q = Array1::zeros(v.len());
    let mut indices = Vec::with_capacity(v.len() / b);
    let mut dist_sum = 0.0;
    let vs = v.as_slice().expect("contiguous latent");
    for (bi, block) in vs.chunks(b).enumerate() {
        let idx = cb.nearest(block);
        indices.push(idx);
        let code = cb.vectors.row(idx);
        for (k, &c) in code.iter().enumerate() {
            q[bi * b + k] = c;
            let d = block[k] - c;
            dist_sum += d * d;
        }
    }
    let mean = dist_sum / v.len() as f64;
    Ok((
        indices,
        q,
        VqLosses {
            codebook: mean,
            commitment: mean,
        },
    ))
}

// ---------------------------------------------------------------------------
// Gradient bridges
// ---------------------------------------------------------------------------

/// Straight-through forward: the value is `q`, the Jacobian w.r.t. `x` is
/// the identity (the backward pass simply forwards the incoming gradient).
pub fn bridge_ste(x: &Array1<f64>, q: &Array1<f64>) -> Result<Array1<f64>> {
    if x.len() != q.len() {
        return Err(Error::Config(format!(
            "ste bridge shape mismatch: {} vs {}",
            x.len(),
            q.len()
        )));
    }
    Ok(q.clone())
}

/// Softmax assignment weights over candidate targets:
/// `w_j ∝ exp(-|x - t_j|^2 / tau)`. Returns `(weights, soft_output)` where
/// the soft output is the weight-blended target.
pub fn soft_assign(x: &[f64], targets: ArrayView2<'_, f64>, tau: f64) -> Result<(Vec<f64>, Vec<f64>)> {
    if tau <= 0.0 || !tau.is_finite() {
        return Err(Error::Config(format!("temperature must be positive (got {tau})")));
    }
    let m = targets.nrows();
    let dim = targets.ncols();
    assert_eq!(x.len(), dim, "query dimension mismatch");
    let mut scores = Vec::with_capacity(m);
    let mut max_score = f64::NEG_INFINITY;
    for row in targets.rows() {
        let d2: f64 = row.iter().zip(x).map(|(t, v)| (v - t) * (v - t)).sum();
        let s = -d2 / tau;
        max_score = max_score.max(s);
        scores.push(s);
    }
    let mut weights: Vec<f64> = scores.iter().map(|s| (s - max_score).exp()).collect();
    let z: f64 = weights.iter().sum();
    for w in &mut weights {
        *w /= z;
    }
    let mut soft = vec![0.0; dim];
    for (w, row) in weights.iter().zip(targets.rows()) {
        for (s, t) in soft.iter_mut().zip(row) {
            *s += w * t;
        }
    }
    Ok((weights, soft))
}

/// Backward pass of [`soft_assign`] with respect to the query point.
///
/// With `a_j = -|x - t_j|^2 / tau`, `w = softmax(a)`, `y = sum w_j t_j`:
/// `dL/dx = sum_j w_j (g.t_j - s) * 2 (t_j - x) / tau`, `s = sum_k w_k g.t_k`.
pub fn soft_assign_backward(
    x: &[f64],
    targets: ArrayView2<'_, f64>,
    tau: f64,
    weights: &[f64],
    grad_soft: &[f64],
) -> Vec<f64> {
    let dim = targets.ncols();
    let mut gdott: Vec<f64> = Vec::with_capacity(weights.len());
    for row in targets.rows() {
        gdott.push(row.iter().zip(grad_soft).map(|(t, g)| t * g).sum());
    }
    let s: f64 = weights.iter().zip(&gdott).map(|(w, g)| w * g).sum();
    let mut gx = vec![0.0; dim];
    for ((w, g), row) in weights.iter().zip(&gdott).zip(targets.rows()) {
        let coef = w * (g - s) * 2.0 / tau;
        for (gxi, (t, xi)) in gx.iter_mut().zip(row.iter().zip(x)) {
            *gxi += coef * (t - xi);
        }
    }
    gx
}

/// Training-time additive uniform noise: `x + u`, `u ~ U(-delta/2, delta/2)`
/// element-wise. Differentiates as the identity; evaluation uses the hard
/// quantizer instead.
pub fn bridge_noise<R: Rng>(x: &Array1<f64>, delta: f64, rng: &mut R) -> Result<Array1<f64>> {
    if delta <= 0.0 || !delta.is_finite() {
        return Err(Error::Config(format!("noise step must be positive (got {delta})")));
    }
    Ok(x.mapv(|v| v + rng.random_range(-delta / 2.0..delta / 2.0)))
}

// ---------------------------------------------------------------------------
// Probabilistic modulation
// ---------------------------------------------------------------------------

/// How a probabilistic modulator produces symbols.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ProbMode {
    /// Straight-through Gumbel-softmax relaxation at a temperature.
    Train,
    /// Sample a hard index from `categorical(softmax(logits))`.
    EvalSample,
    /// Deterministic submode: argmax of the logits.
    EvalArgmax,
}

/// Output of [`prob_modulate`].
#[derive(Debug, Clone)]
pub struct ProbModOutcome {
    /// Hard symbol index per slot.
    pub symbols: Vec<usize>,
    /// Relaxation weights `[slots, M]` (train mode only).
    pub soft_weights: Option<Array2<f64>>,
    /// The logits the decision was made from (diagnostics).
    pub logits: Array2<f64>,
}

/// Row-wise softmax.
pub fn softmax_rows(logits: &Array2<f64>) -> Array2<f64> {
    let mut out = logits.clone();
    for mut row in out.rows_mut() {
        let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = (*v - max).exp();
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

/// Inverse-CDF categorical draw from one probability row.
pub fn categorical_sample<R: Rng>(probs: &[f64], rng: &mut R) -> usize {
    let u: f64 = rng.random::<f64>();
    let mut acc = 0.0;
    for (i, &p) in probs.iter().enumerate() {
        acc += p;
        if u < acc {
            return i;
        }
    }
    probs.len() - 1
}

fn gumbel<R: Rng>(rng: &mut R) -> f64 {
    let u: f64 = rng.random::<f64>().max(1e-300);
    -(-u.ln()).ln()
}

/// Map per-slot logits to constellation symbols.
///
/// Train mode draws Gumbel noise, softens at temperature `tau` and commits
/// to the argmax (straight-through: the hard symbol is transmitted, the
/// relaxation weights carry the gradient). Eval modes draw a hard
/// categorical sample or take the argmax.
pub fn prob_modulate<R: Rng>(
    logits: &Array2<f64>,
    c: &Constellation,
    mode: ProbMode,
    tau: f64,
    rng: &mut R,
) -> Result<ProbModOutcome> {
    if logits.ncols() != c.order() {
        return Err(Error::Config(format!(
            "head emits {} logits/slot but constellation order is {}",
            logits.ncols(),
            c.order()
        )));
    }
    match mode {
        ProbMode::Train => {
            if tau <= 0.0 || !tau.is_finite() {
                return Err(Error::Config(format!("temperature must be positive (got {tau})")));
            }
            let mut noisy = logits.clone();
            for v in noisy.iter_mut() {
                *v = (*v + gumbel(rng)) / tau;
            }
            let weights = softmax_rows(&noisy);
            let symbols = weights
                .rows()
                .into_iter()
                .map(|row| argmax(row.as_slice().expect("contiguous row")))
                .collect();
            Ok(ProbModOutcome {
                symbols,
                soft_weights: Some(weights),
                logits: logits.clone(),
            })
        }
        ProbMode::EvalSample => {
            let probs = softmax_rows(logits);
            let symbols = probs
                .rows()
                .into_iter()
                .map(|row| categorical_sample(row.as_slice().expect("contiguous row"), rng))
                .collect();
            Ok(ProbModOutcome {
                symbols,
                soft_weights: None,
                logits: logits.clone(),
            })
        }
        ProbMode::EvalArgmax => {
            let symbols = logits
                .rows()
                .into_iter()
                .map(|row| argmax(row.as_slice().expect("contiguous row")))
                .collect();
            Ok(ProbModOutcome {
                symbols,
                soft_weights: None,
                logits: logits.clone(),
            })
        }
    }
}

fn argmax(xs: &[f64]) -> usize {
    let mut best = 0;
    let mut best_v = f64::NEG_INFINITY;
    for (i, &v) in xs.iter().enumerate() {
        if v > best_v {
            best_v = v;
            best = i;
        }
    }
    best
}

/// Sample (eval) or relax (train) a Bernoulli bit stream from per-bit
/// probabilities. Probabilities are clamped to `[1e-6, 1 - 1e-6]`.
pub fn bernoulli_bit_encode<R: Rng>(
    probs: &Array1<f64>,
    train: bool,
    tau: f64,
    rng: &mut R,
) -> Result<Array1<f64>> {
    if train && (tau <= 0.0 || !tau.is_finite()) {
        return Err(Error::Config(format!("temperature must be positive (got {tau})")));
    }
    const EPS: f64 = 1e-6;
    let clamped = probs.mapv(|p| p.clamp(EPS, 1.0 - EPS));
    if train {
        // binary concrete: sigmoid((logit + g1 - g0) / tau), strictly in (0,1)
        Ok(clamped.mapv(|p| {
            let logit = (p / (1.0 - p)).ln();
            let g = gumbel(rng) - gumbel(rng);
            1.0 / (1.0 + (-(logit + g) / tau).exp())
        }))
    } else {
        Ok(clamped.mapv(|p| if rng.random::<f64>() < p { 1.0 } else { 0.0 }))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::constellation::make_square_qam;
    use crate::rng;
    use ndarray::arr1;

    #[test]
    fn scalar_nearest_and_tie_rule() {
        let levels = [-1.0, -1.0 / 3.0, 1.0 / 3.0, 1.0];
        let (q, _) = scalar_quantize(&arr1(&[0.2]), &levels).unwrap();
        assert!((q[0] - 1.0 / 3.0).abs() < 1e-12);
        // midpoint ties go to the lower level
        let (q, _) = scalar_quantize(&arr1(&[0.0]), &levels).unwrap();
        assert!((q[0] + 1.0 / 3.0).abs() < 1e-12);
    }

    #[test]
    fn scalar_matches_brute_force_and_is_idempotent() {
        let levels = uniform_levels(8, 2.0);
        let mut r = rng::stream(1, "scalar-oracle");
        let v = Array1::from_iter((0..512).map(|_| r.random_range(-3.0..3.0)));
        let (q, _) = scalar_quantize(&v, &levels).unwrap();
        for (x, qx) in v.iter().zip(q.iter()) {
            let mut best = levels[0];
            let mut best_d = f64::INFINITY;
            for &l in &levels {
                let d = (x - l).abs();
                if d < best_d {
                    best_d = d;
                    best = l;
                }
            }
            assert_eq!(*qx, best);
        }
        let (qq, _) = scalar_quantize(&q, &levels).unwrap();
        assert_eq!(q, qq);
    }

    #[test]
    fn scalar_bits_round_trip() {
        let levels = uniform_levels(4, 1.0);
        let v = arr1(&[-1.0, -0.2, 0.4, 0.9, 0.0, -0.6]);
        let (q, bits) = scalar_quantize(&v, &levels).unwrap();
        assert_eq!(bits.len(), v.len() * 2);
        let back = scalar_dequantize_bits(&bits, &levels).unwrap();
        assert_eq!(q, back);
        assert!(scalar_dequantize_bits(&[0, 1, 0], &levels).is_err());
    }

    #[test]
    fn scalar_rejects_unsorted_levels() {
        let err = scalar_quantize(&arr1(&[0.0]), &[1.0, 0.5]).unwrap_err();
        assert_eq!(err.class(), "config");
    }

    #[test]
    fn symbol_quantize_fixpoint_and_oracle() {
        let c = make_square_qam(4).unwrap();
        // latent whose pairs already sit on constellation points
        let pts = [c.point(0), c.point(3), c.point(1)];
        let v = unpair_iq(&pts);
        let (symbols, q) = symbol_quantize(&v, &c).unwrap();
        assert_eq!(symbols, vec![0, 3, 1]);
        assert_eq!(q, v);

        let s = std::f64::consts::FRAC_1_SQRT_2;
        let (symbols, _) = symbol_quantize(&arr1(&[1.0, 1.0, 1.0, 1.0]), &c).unwrap();
        let expect = c
            .points()
            .iter()
            .position(|&(i, q)| (i - s).abs() < 1e-12 && (q - s).abs() < 1e-12)
            .unwrap();
        assert_eq!(symbols, vec![expect, expect]);

        let mut r = rng::stream(2, "symbol-oracle");
        let v = Array1::from_iter((0..512).map(|_| r.random_range(-2.0..2.0)));
        let (symbols, q) = symbol_quantize(&v, &c).unwrap();
        let pairs = pair_iq(&v).unwrap();
        for (k, &p) in pairs.iter().enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for (j, &cp) in c.points().iter().enumerate() {
                let d = (p.0 - cp.0).powi(2) + (p.1 - cp.1).powi(2);
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(symbols[k], best);
        }
        let (symbols2, q2) = symbol_quantize(&q, &c).unwrap();
        assert_eq!(symbols, symbols2);
        assert_eq!(q, q2);
    }

    #[test]
    fn symbol_quantize_rejects_odd_length() {
        let c = make_square_qam(4).unwrap();
        let err = symbol_quantize(&arr1(&[1.0, 2.0, 3.0]), &c).unwrap_err();
        assert_eq!(err.class(), "framing");
    }

    #[test]
    fn vq_exact_block_and_oracle() {
        let cb = VQCodebook::new(
            Array2::from_shape_vec((2, 2), vec![0.0, 0.0, 1.0, 1.0]).unwrap(),
        )
        .unwrap();
        let (idx, q, losses) = vector_quantize(&arr1(&[1.0, 1.0]), &cb).unwrap();
        assert_eq!(idx, vec![1]);
        assert_eq!(q, arr1(&[1.0, 1.0]));
        assert_eq!(losses.codebook, 0.0);
        assert_eq!(losses.commitment, 0.0);

        let (idx, _, _) = vector_quantize(&arr1(&[0.9, 0.8]), &cb).unwrap();
        assert_eq!(idx, vec![1]);

        let mut r = rng::stream(3, "vq-oracle");
        let cb = VQCodebook::new(Array2::from_shape_fn((8, 4), |_| r.random_range(-1.0..1.0)))
            .unwrap();
        let v = Array1::from_iter((0..512).map(|_| r.random_range(-1.5..1.5)));
        let (idx, q, _) = vector_quantize(&v, &cb).unwrap();
        for (bi, block) in v.as_slice().unwrap().chunks(4).enumerate() {
            let mut best = 0;
            let mut best_d = f64::INFINITY;
            for j in 0..8 {
                let d: f64 = cb
                    .vectors
                    .row(j)
                    .iter()
                    .zip(block)
                    .map(|(c, x)| (x - c) * (x - c))
                    .sum();
                if d < best_d {
                    best_d = d;
                    best = j;
                }
            }
            assert_eq!(idx[bi], best);
        }
        let (idx2, q2, l2) = vector_quantize(&q, &cb).unwrap();
        assert_eq!(idx, idx2);
        assert_eq!(q, q2);
        assert_eq!(l2.codebook, 0.0);

        assert!(vector_quantize(&arr1(&[1.0, 2.0, 3.0]), &cb).is_err());
    }

    #[test]
    fn ste_forwards_q_exactly() {
        let x = arr1(&[0.2, -0.4]);
        let q = arr1(&[1.0 / 3.0, -1.0 / 3.0]);
        assert_eq!(bridge_ste(&x, &q).unwrap(), q);
        assert!(bridge_ste(&x, &arr1(&[1.0])).is_err());
    }

    #[test]
    fn soft_assign_limits_and_normalization() {
        let c = make_square_qam(4).unwrap();
        let targets = Array2::from_shape_fn((4, 2), |(j, k)| if k == 0 { c.point(j).0 } else { c.point(j).1 });
        // tau -> infinity: uniform weights
        let (w, _) = soft_assign(&[0.3, -0.2], targets.view(), 1e12).unwrap();
        for wi in &w {
            assert!((wi - 0.25).abs() < 1e-6);
        }
        // tiny tau with clear winner: near one-hot and near the hard point
        let p = c.point(2);
        let (w, soft) = soft_assign(&[p.0 + 0.02, p.1 - 0.01], targets.view(), 1e-4).unwrap();
        assert!(w[2] > 0.999);
        assert!((soft[0] - p.0).abs() < 1e-3 && (soft[1] - p.1).abs() < 1e-3);
        // weights always sum to one
        let mut r = rng::stream(5, "soft-sum");
        for _ in 0..100 {
            let x = [r.random_range(-2.0..2.0), r.random_range(-2.0..2.0)];
            let (w, _) = soft_assign(&x, targets.view(), 0.5).unwrap();
            let s: f64 = w.iter().sum();
            assert!((s - 1.0).abs() < 1e-9);
        }
        assert!(soft_assign(&[0.0, 0.0], targets.view(), 0.0).is_err());
    }

    #[test]
    fn soft_assign_argmax_agrees_with_nearest_point() {
        let c = make_square_qam(16).unwrap();
        let targets = Array2::from_shape_fn((16, 2), |(j, k)| if k == 0 { c.point(j).0 } else { c.point(j).1 });
        let mut r = rng::stream(6, "soft-argmax");
        for &tau in &[10.0, 1.0, 0.1, 1e-3] {
            for _ in 0..200 {
                let x = [r.random_range(-1.5..1.5), r.random_range(-1.5..1.5)];
                let (w, _) = soft_assign(&x, targets.view(), tau).unwrap();
                let am = argmax(&w);
                assert_eq!(am, nearest_point(&c, (x[0], x[1])));
            }
        }
    }

    #[test]
    fn soft_assign_backward_matches_finite_differences() {
        let c = make_square_qam(4).unwrap();
        let targets = Array2::from_shape_fn((4, 2), |(j, k)| if k == 0 { c.point(j).0 } else { c.point(j).1 });
        let grad = [0.7, -0.3];
        for &tau in &[10.0, 1.0, 0.3] {
            let x = [0.4, -0.1];
            let (w, _) = soft_assign(&x, targets.view(), tau).unwrap();
            let gx = soft_assign_backward(&x, targets.view(), tau, &w, &grad);
            let eps = 1e-6;
            for k in 0..2 {
                let mut xp = x;
                xp[k] += eps;
                let mut xm = x;
                xm[k] -= eps;
                let (_, sp) = soft_assign(&xp, targets.view(), tau).unwrap();
                let (_, sm) = soft_assign(&xm, targets.view(), tau).unwrap();
                let lp: f64 = sp.iter().zip(&grad).map(|(s, g)| s * g).sum();
                let lm: f64 = sm.iter().zip(&grad).map(|(s, g)| s * g).sum();
                let fd = (lp - lm) / (2.0 * eps);
                let rel = (fd - gx[k]).abs() / fd.abs().max(gx[k].abs()).max(1e-9);
                assert!(rel < 1e-6, "tau={tau} k={k} fd={fd} an={}", gx[k]);
            }
        }
    }

    #[test]
    fn noise_bridge_moments_and_bounds() {
        let x = Array1::zeros(1_000_000);
        let delta = 0.5;
        let mut r = rng::stream(7, "noise-bridge");
        let y = bridge_noise(&x, delta, &mut r).unwrap();
        let n = y.len() as f64;
        let mean = y.sum() / n;
        let var = y.mapv(|v| v * v).sum() / n - mean * mean;
        let expect_var = delta * delta / 12.0;
        // mean within 3 sigma of 0
        assert!(mean.abs() <= 3.0 * (expect_var / n).sqrt());
        assert!((var - expect_var).abs() / expect_var < 0.02);
        for v in y.iter() {
            assert!(v.abs() <= delta / 2.0);
        }
        assert!(bridge_noise(&x, 0.0, &mut r).is_err());
    }

    #[test]
    fn prob_modulate_dominant_logit_wins() {
        let c = make_square_qam(4).unwrap();
        let mut logits = Array2::zeros((1, 4));
        logits[[0, 1]] = 20.0;
        let mut r = rng::stream(8, "prob-dom");
        let mut hits = 0;
        for _ in 0..10_000 {
            let out = prob_modulate(&logits, &c, ProbMode::EvalSample, 1.0, &mut r).unwrap();
            if out.symbols[0] == 1 {
                hits += 1;
            }
        }
        assert!(hits as f64 / 10_000.0 > 0.999);
        let out = prob_modulate(&logits, &c, ProbMode::EvalArgmax, 1.0, &mut r).unwrap();
        assert_eq!(out.symbols, vec![1]);
    }

    #[test]
    fn prob_modulate_uniform_logits_tv_bound() {
        let c = make_square_qam(4).unwrap();
        let logits = Array2::zeros((1, 4));
        let mut r = rng::stream(9, "prob-uniform");
        let mut counts = [0usize; 4];
        let n = 100_000;
        for _ in 0..n {
            let out = prob_modulate(&logits, &c, ProbMode::EvalSample, 1.0, &mut r).unwrap();
            counts[out.symbols[0]] += 1;
        }
        let tv: f64 = counts
            .iter()
            .map(|&cnt| (cnt as f64 / n as f64 - 0.25).abs())
            .sum::<f64>()
            / 2.0;
        assert!(tv < 0.02, "TV distance {tv}");
    }

    #[test]
    fn gumbel_softmax_sharpens_as_tau_drops() {
        // confident-head regime: wide logit margins, tiny temperature
        let c = make_square_qam(16).unwrap();
        let mut r = rng::stream(10, "gumbel-sharp");
        let normal = rand_distr::Normal::new(0.0, 12.0).unwrap();
        let logits = Array2::from_shape_fn((5000, 16), |_| {
            rand_distr::Distribution::sample(&normal, &mut r)
        });
        let out = prob_modulate(&logits, &c, ProbMode::Train, 0.01, &mut r).unwrap();
        let w = out.soft_weights.unwrap();
        let mut sharp = 0usize;
        for (row, &sym) in w.rows().into_iter().zip(&out.symbols) {
            let max = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            if max > 0.99 {
                sharp += 1;
            }
            // straight-through commits to the relaxation argmax
            assert_eq!(argmax(row.as_slice().unwrap()), sym);
        }
        let frac = sharp as f64 / w.nrows() as f64;
        assert!(frac >= 0.99, "only {frac} of draws sharpened");
    }

    #[test]
    fn prob_modulate_order_mismatch_is_config_error() {
        let c = make_square_qam(4).unwrap();
        let logits = Array2::zeros((1, 8));
        let mut r = rng::stream(11, "prob-mismatch");
        let err = prob_modulate(&logits, &c, ProbMode::EvalArgmax, 1.0, &mut r).unwrap_err();
        assert_eq!(err.class(), "config");
    }

    #[test]
    fn bernoulli_eval_and_train_ranges() {
        let mut r = rng::stream(12, "bern");
        let p = Array1::from_elem(100_000, 0.5);
        let bits = bernoulli_bit_encode(&p, false, 1.0, &mut r).unwrap();
        let mean = bits.sum() / bits.len() as f64;
        let sigma = (0.25f64 / bits.len() as f64).sqrt();
        assert!((mean - 0.5).abs() <= 3.0 * sigma);

        let relaxed = bernoulli_bit_encode(&p, true, 0.5, &mut r).unwrap();
        for v in relaxed.iter() {
            assert!(*v > 0.0 && *v < 1.0);
        }

        // extreme probabilities survive the clamp
        let p1 = Array1::from_elem(64, 1.0);
        let ones = bernoulli_bit_encode(&p1, false, 1.0, &mut r).unwrap();
        assert!(ones.iter().all(|&b| b == 1.0));
    }

    #[test]
    fn pair_unpair_round_trip() {
        let v = arr1(&[1.0, 2.0, 3.0, 4.0, 5.0, 6.0]);
        let pairs = pair_iq(&v).unwrap();
        assert_eq!(pairs, vec![(1.0, 4.0), (2.0, 5.0), (3.0, 6.0)]);
        assert_eq!(unpair_iq(&pairs), v);
        assert!(pair_iq(&arr1(&[1.0])).is_err());
        // tx scaling makes unit-element-power vectors unit-symbol-power
        let v = arr1(&[1.0, -1.0, 1.0, -1.0]);
        let tx = latent_to_tx_symbols(&v).unwrap();
        let p: f64 = tx.iter().map(|(i, q)| i * i + q * q).sum::<f64>() / tx.len() as f64;
        assert!((p - 1.0).abs() < 1e-12);
        let back = tx_symbols_to_latent(&tx);
        for (a, b) in back.iter().zip(v.iter()) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn config_validation_rules() {
        let mut cfg = ModulatorConfig::symbol(16);
        cfg.validate().unwrap();
        cfg.bridge = BridgeKind::UniformNoise;
        assert!(cfg.validate().is_err());

        let scalar = ModulatorConfig {
            family: Family::Scalar,
            bridge: BridgeKind::UniformNoise,
            num_levels: Some(4),
            ..ModulatorConfig::symbol(4)
        };
        let scalar = ModulatorConfig { order: None, ..scalar };
        scalar.validate().unwrap();
        assert_eq!(scalar.resolve_levels().unwrap().len(), 4);

        let vector_bad = ModulatorConfig {
            family: Family::Vector,
            bridge: BridgeKind::Ste,
            codebook_size: Some(6),
            block_dim: Some(2),
            ..ModulatorConfig::symbol(4)
        };
        assert!(vector_bad.validate().is_err());

        let prob_bad = ModulatorConfig {
            family: Family::Probabilistic,
            bridge: BridgeKind::Ste,
            ..ModulatorConfig::symbol(4)
        };
        assert!(prob_bad.validate().is_err());
    }
}

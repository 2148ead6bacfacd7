//! Finite constellations: square QAM, learnable-spacing grids, and
//! K-means irregular constellations fitted to latent statistics.
//!
//! All constructors normalize to unit mean symbol power
//! (`mean(I^2 + Q^2) = 1`). Ties in nearest-point queries always break
//! toward the lowest index so results are reproducible bit for bit.

use serde::{Deserialize, Serialize};
use std::path::Path;

use crate::error::{Error, Result};
use crate::rng;
use rand::Rng;

/// How a constellation was constructed.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum ConstellationKind {
    SquareQam,
    LearnableSpacing,
    Irregular,
}

/// `M` labeled I/Q points with unit mean power.
///
/// Serializes as the same versioned record the constellation file uses.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(try_from = "ConstellationFile", into = "ConstellationFile")]
pub struct Constellation {
    points: Vec<(f64, f64)>,
    /// Bit label per point, low `bits_per_symbol()` bits significant.
    labels: Vec<u32>,
    kind: ConstellationKind,
}

impl Constellation {
    /// Build from raw points; normalizes power and checks label validity.
    pub fn new(points: Vec<(f64, f64)>, labels: Vec<u32>, kind: ConstellationKind) -> Result<Self> {
        let m = points.len();
        if !m.is_power_of_two() || m < 2 {
            return Err(Error::Config(format!(
                "constellation order {m} must be a power of two >= 2"
            )));
        }
        if labels.len() != m {
            return Err(Error::Config("one label per point required".into()));
        }
        let bits = m.trailing_zeros();
        let mut seen = vec![false; m];
        for &l in &labels {
            if l >= m as u32 {
                return Err(Error::Config(format!(
                    "label {l:0w$b} out of range for order {m}",
                    w = bits as usize
                )));
            }
            if seen[l as usize] {
                return Err(Error::Config("duplicate labels".into()));
            }
            seen[l as usize] = true;
        }
        let power: f64 = points.iter().map(|(i, q)| i * i + q * q).sum::<f64>() / m as f64;
        if power == 0.0 || !power.is_finite() {
            return Err(Error::Degenerate("constellation has zero/non-finite power".into()));
        }
        // skip the no-op rescale so already-normalized point sets (e.g. a
        // reloaded file) survive bit for bit
        let points = if (power - 1.0).abs() <= 1e-9 {
            points
        } else {
            let s = (1.0 / power).sqrt();
            points.into_iter().map(|(i, q)| (i * s, q * s)).collect()
        };
        Ok(Self {
            points,
            labels,
            kind,
        })
    }

    pub fn order(&self) -> usize {
        self.points.len()
    }

    pub fn bits_per_symbol(&self) -> usize {
        self.points.len().trailing_zeros() as usize
    }

    pub fn kind(&self) -> ConstellationKind {
        self.kind
    }

    pub fn points(&self) -> &[(f64, f64)] {
        &self.points
    }

    pub fn labels(&self) -> &[u32] {
        &self.labels
    }

    pub fn point(&self, idx: usize) -> (f64, f64) {
        self.points[idx]
    }

    /// Mean of `I^2 + Q^2` over the points.
    pub fn mean_power(&self) -> f64 {
        self.points.iter().map(|(i, q)| i * i + q * q).sum::<f64>() / self.order() as f64
    }

    /// Ratio of the largest to the smallest nearest-neighbour distance;
    /// 1.0 for perfectly regular layouts, > 1 for irregular ones.
    pub fn nn_spacing_ratio(&self) -> f64 {
        let m = self.order();
        let mut lo = f64::INFINITY;
        let mut hi: f64 = 0.0;
        for a in 0..m {
            let mut best = f64::INFINITY;
            for b in 0..m {
                if a == b {
                    continue;
                }
                let d = dist2(self.points[a], self.points[b]);
                if d < best {
                    best = d;
                }
            }
            let d = best.sqrt();
            lo = lo.min(d);
            hi = hi.max(d);
        }
        hi / lo
    }

    /// Replace the point set (used when constellation parameters are
    /// trainable); re-normalizes to unit power, keeps labels.
    pub fn with_points(&self, points: Vec<(f64, f64)>) -> Result<Self> {
        Self::new(points, self.labels.clone(), self.kind)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let file = ConstellationFile::from(self);
        let text = serde_json::to_string_pretty(&file)?;
        std::fs::write(path, text)?;
        Ok(())
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path)?;
        let file: ConstellationFile =
            serde_json::from_str(&text).map_err(|e| Error::Malformed {
                path: path.display().to_string(),
                reason: e.to_string(),
            })?;
        file.try_into_constellation(path)
    }
}

fn dist2(a: (f64, f64), b: (f64, f64)) -> f64 {
    let di = a.0 - b.0;
    let dq = a.1 - b.1;
    di * di + dq * dq
}

/// Versioned on-disk record passing a constellation between pipeline steps.
#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ConstellationFile {
    format: String,
    version: u32,
    kind: ConstellationKind,
    order: usize,
    points: Vec<(f64, f64)>,
    labels: Vec<String>,
}

impl From<&Constellation> for ConstellationFile {
    fn from(c: &Constellation) -> Self {
        let w = c.bits_per_symbol();
        Self {
            format: "semcom-constellation".into(),
            version: 1,
            kind: c.kind,
            order: c.order(),
            points: c.points.clone(),
            labels: c.labels.iter().map(|l| format!("{l:0w$b}")).collect(),
        }
    }
}

impl From<Constellation> for ConstellationFile {
    fn from(c: Constellation) -> Self {
        (&c).into()
    }
}

impl TryFrom<ConstellationFile> for Constellation {
    type Error = String;

    fn try_from(file: ConstellationFile) -> std::result::Result<Self, String> {
        if file.format != "semcom-constellation" {
            return Err("wrong format tag".into());
        }
        if file.version != 1 {
            return Err(format!("unsupported version {}", file.version));
        }
        if file.points.len() != file.order {
            return Err("order does not match point count".into());
        }
        let labels = file
            .labels
            .iter()
            .map(|s| u32::from_str_radix(s, 2).map_err(|_| format!("non-binary label {s:?}")))
            .collect::<std::result::Result<Vec<u32>, String>>()?;
        Constellation::new(file.points, labels, file.kind).map_err(|e| e.to_string())
    }
}

impl ConstellationFile {
    fn try_into_constellation(self, path: &Path) -> Result<Constellation> {
        Constellation::try_from(self).map_err(|reason| Error::Malformed {
            path: path.display().to_string(),
            reason,
        })
    }
}

/// Per-axis amplitude levels for a square grid of the given order:
/// `{..., -3, -1, 1, 3, ...}` before normalization.
fn square_axis_levels(side: usize) -> Vec<f64> {
    (0..side)
        .map(|i| 2.0 * i as f64 - (side as f64 - 1.0))
        .collect()
}

fn gray(i: usize) -> u32 {
    (i ^ (i >> 1)) as u32
}

fn grid_constellation(
    levels_i: &[f64],
    levels_q: &[f64],
    kind: ConstellationKind,
) -> Result<Constellation> {
    let side = levels_i.len();
    let half_bits = side.trailing_zeros();
    let mut points = Vec::with_capacity(side * side);
    let mut labels = Vec::with_capacity(side * side);
    for (ii, &li) in levels_i.iter().enumerate() {
        for (qi, &lq) in levels_q.iter().enumerate() {
            points.push((li, lq));
            labels.push((gray(ii) << half_bits) | gray(qi));
        }
    }
    Constellation::new(points, labels, kind)
}

fn check_square_order(order: usize) -> Result<usize> {
    let side = (order as f64).sqrt().round() as usize;
    if !order.is_power_of_two() || side * side != order || !matches!(order, 4 | 16 | 64 | 256) {
        return Err(Error::Config(format!(
            "square QAM order must be one of 4, 16, 64, 256 (got {order})"
        )));
    }
    Ok(side)
}

/// Standard Gray-labeled square QAM, unit mean power.
pub fn make_square_qam(order: usize) -> Result<Constellation> {
    let side = check_square_order(order)?;
    let levels = square_axis_levels(side);
    grid_constellation(&levels, &levels, ConstellationKind::SquareQam)
}

/// Grid constellation whose per-axis level gaps start uniform at `spacing`
/// (the free parameters during fine-tuning are the gaps themselves; a
/// uniform global spacing is cancelled by power normalization, so this
/// constructor coincides with [`make_square_qam`]).
pub fn make_learnable_spacing(order: usize, spacing: f64) -> Result<Constellation> {
    if spacing <= 0.0 || !spacing.is_finite() {
        return Err(Error::Config(format!("spacing must be positive (got {spacing})")));
    }
    let side = check_square_order(order)?;
    let gaps = vec![spacing; side - 1];
    grid_from_gaps(&gaps, &gaps)
}

/// Build a grid constellation from per-axis gap lists (`side - 1` gaps per
/// axis). Levels are the centered cumulative sums of the gaps.
pub fn grid_from_gaps(gaps_i: &[f64], gaps_q: &[f64]) -> Result<Constellation> {
    if gaps_i.len() != gaps_q.len() || gaps_i.is_empty() {
        return Err(Error::Config("gap lists must be equal length and non-empty".into()));
    }
    if gaps_i.iter().chain(gaps_q).any(|g| *g <= 0.0 || !g.is_finite()) {
        return Err(Error::Config("gaps must be positive".into()));
    }
    let side = gaps_i.len() + 1;
    check_square_order(side * side)?;
    grid_constellation(
        &levels_from_gaps(gaps_i),
        &levels_from_gaps(gaps_q),
        ConstellationKind::LearnableSpacing,
    )
}

/// Centered cumulative sums: `side` levels from `side - 1` gaps.
pub fn levels_from_gaps(gaps: &[f64]) -> Vec<f64> {
    let mut levels = Vec::with_capacity(gaps.len() + 1);
    let mut acc = 0.0;
    levels.push(0.0);
    for g in gaps {
        acc += g;
        levels.push(acc);
    }
    let mean = levels.iter().sum::<f64>() / levels.len() as f64;
    for l in &mut levels {
        *l -= mean;
    }
    levels
}

/// Complex-paired latent samples used to fit irregular constellations.
#[derive(Debug, Clone)]
pub struct LatentSampleBank {
    pub pairs: Vec<(f64, f64)>,
}

impl LatentSampleBank {
    pub fn new(pairs: Vec<(f64, f64)>) -> Result<Self> {
        if pairs.is_empty() {
            return Err(Error::Degenerate("empty latent sample bank".into()));
        }
        if pairs.iter().any(|(i, q)| !i.is_finite() || !q.is_finite()) {
            return Err(Error::Degenerate("non-finite sample in bank".into()));
        }
        Ok(Self { pairs })
    }

    pub fn len(&self) -> usize {
        self.pairs.len()
    }

    pub fn is_empty(&self) -> bool {
        self.pairs.is_empty()
    }
}

/// Outcome of Lloyd iteration, including the per-iteration objective so
/// callers can verify monotonicity.
#[derive(Debug, Clone)]
pub struct KmeansOutcome {
    pub centroids: Vec<(f64, f64)>,
    pub assignments: Vec<usize>,
    /// Sum of squared distances after each assignment step.
    pub objective_history: Vec<f64>,
    pub iterations: usize,
    pub converged: bool,
}

fn nearest_of(p: (f64, f64), centroids: &[(f64, f64)]) -> (usize, f64) {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &c) in centroids.iter().enumerate() {
        let d = dist2(p, c);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    (best, best_d)
}

/// Lloyd iteration with farthest-point seeding.
///
/// The first centroid is a uniformly drawn sample (seeded); each further
/// centroid is the sample farthest from every centroid chosen so far
/// (ties toward the lowest index). Empty clusters are re-seeded at the
/// sample farthest from its nearest centroid. Terminates when assignments
/// reach a fixpoint or after `max_iters`.
pub fn lloyd_2d(samples: &[(f64, f64)], k: usize, seed: u64, max_iters: usize) -> KmeansOutcome {
    assert!(k >= 1 && samples.len() >= k);
    let mut r = rng::stream(seed, "kmeans-init");
    let first = r.random_range(0..samples.len());
    let mut centroids = vec![samples[first]];
    let mut min_d: Vec<f64> = samples.iter().map(|&p| dist2(p, centroids[0])).collect();
    while centroids.len() < k {
        let mut far = 0;
        let mut far_d = -1.0;
        for (i, &d) in min_d.iter().enumerate() {
            if d > far_d {
                far_d = d;
                far = i;
            }
        }
        let c = samples[far];
        centroids.push(c);
        for (i, &p) in samples.iter().enumerate() {
            let d = dist2(p, c);
            if d < min_d[i] {
                min_d[i] = d;
            }
        }
    }

    let mut assignments = vec![0usize; samples.len()];
    let mut history = Vec::new();
    let mut iterations = 0;
    let mut converged = false;
    for _ in 0..max_iters {
        iterations += 1;
        // assignment step
        let mut objective = 0.0;
        let mut changed = false;
        for (i, &p) in samples.iter().enumerate() {
            let (j, d) = nearest_of(p, &centroids);
            if assignments[i] != j {
                assignments[i] = j;
                changed = true;
            }
            objective += d;
        }
        history.push(objective);
        if !changed && history.len() > 1 {
            converged = true;
            break;
        }
        // update step
        let mut sums = vec![(0.0f64, 0.0f64, 0usize); k];
        for (i, &p) in samples.iter().enumerate() {
            let s = &mut sums[assignments[i]];
            s.0 += p.0;
            s.1 += p.1;
            s.2 += 1;
        }
        for (j, s) in sums.iter().enumerate() {
            if s.2 > 0 {
                centroids[j] = (s.0 / s.2 as f64, s.1 / s.2 as f64);
            } else {
                // re-seed the dead centroid at the sample farthest from its
                // nearest centroid
                let mut far = 0;
                let mut far_d = -1.0;
                for (i, &p) in samples.iter().enumerate() {
                    let (_, d) = nearest_of(p, &centroids);
                    if d > far_d {
                        far_d = d;
                        far = i;
                    }
                }
                centroids[j] = samples[far];
            }
        }
    }
    KmeansOutcome {
        centroids,
        assignments,
        objective_history: history,
        iterations,
        converged,
    }
}

/// Fit an irregular constellation to latent statistics with K-means.
///
/// Centroids are power-normalized, sorted by `(angle, radius)` and labeled
/// in binary counting order.
pub fn kmeans_constellation(
    bank: &LatentSampleBank,
    order: usize,
    seed: u64,
    max_iters: usize,
) -> Result<Constellation> {
    if !order.is_power_of_two() || order < 2 {
        return Err(Error::Config(format!(
            "constellation order {order} must be a power of two >= 2"
        )));
    }
    if bank.len() < 10 * order {
        return Err(Error::Config(format!(
            "sample bank of {} is too small for order {order} (need >= {})",
            bank.len(),
            10 * order
        )));
    }
    let outcome = lloyd_2d(&bank.pairs, order, seed, max_iters);
    let mut pts = outcome.centroids;
    pts.sort_by(|a, b| {
        let aa = (a.1.atan2(a.0), a.0 * a.0 + a.1 * a.1);
        let bb = (b.1.atan2(b.0), b.0 * b.0 + b.1 * b.1);
        aa.partial_cmp(&bb).expect("finite centroids")
    });
    let labels = (0..order as u32).collect();
    Constellation::new(pts, labels, ConstellationKind::Irregular)
}

/// Index of the constellation point nearest to `p` in squared Euclidean
/// distance; ties break toward the lowest index.
pub fn nearest_point(c: &Constellation, p: (f64, f64)) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, &q) in c.points().iter().enumerate() {
        let d = dist2(p, q);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Hard-decision rule used by [`demodulate`].
#[derive(Debug, Clone)]
pub enum DemodRule {
    /// Maximum likelihood: nearest point.
    Ml,
    /// Maximum a-posteriori under AWGN with the given per-symbol noise
    /// variance and symbol priors (length `M`, non-negative, summing to 1).
    Map { priors: Vec<f64>, noise_var: f64 },
}

/// Hard-decide received symbols back to constellation indices.
pub fn demodulate(c: &Constellation, received: &[(f64, f64)], rule: &DemodRule) -> Result<Vec<usize>> {
    match rule {
        DemodRule::Ml => Ok(received.iter().map(|&p| nearest_point(c, p)).collect()),
        DemodRule::Map { priors, noise_var } => {
            if priors.len() != c.order() {
                return Err(Error::Config(format!(
                    "need {} priors, got {}",
                    c.order(),
                    priors.len()
                )));
            }
            if priors.iter().any(|p| *p < 0.0 || !p.is_finite()) {
                return Err(Error::Config("priors must be non-negative".into()));
            }
            let sum: f64 = priors.iter().sum();
            if (sum - 1.0).abs() > 1e-9 {
                return Err(Error::Config(format!("priors must sum to 1 (got {sum})")));
            }
            if *noise_var <= 0.0 {
                return Err(Error::Config("MAP demodulation needs a positive noise variance".into()));
            }
            // log posterior up to a constant: ln(prior) - |r - c|^2 / sigma^2
            // (variance sigma^2/2 per real dimension)
            let log_priors: Vec<f64> = priors.iter().map(|p| p.ln()).collect();
            Ok(received
                .iter()
                .map(|&p| {
                    let mut best = 0;
                    let mut best_score = f64::NEG_INFINITY;
                    for (j, &q) in c.points().iter().enumerate() {
                        let score = log_priors[j] - dist2(p, q) / noise_var;
                        if score > best_score {
                            best_score = score;
                            best = j;
                        }
                    }
                    best
                })
                .collect())
        }
    }
}

/// Serialize symbol indices to a label bit stream (MSB first per symbol).
pub fn symbols_to_bits(c: &Constellation, indices: &[usize]) -> Vec<u8> {
    let w = c.bits_per_symbol();
    let mut bits = Vec::with_capacity(indices.len() * w);
    for &idx in indices {
        let label = c.labels()[idx];
        for b in (0..w).rev() {
            bits.push(((label >> b) & 1) as u8);
        }
    }
    bits
}

/// Parse a label bit stream back to symbol indices.
pub fn bits_to_symbols(c: &Constellation, bits: &[u8]) -> Result<Vec<usize>> {
    let w = c.bits_per_symbol();
    if bits.len() % w != 0 {
        return Err(Error::Framing(format!(
            "bit stream length {} not divisible by {} bits/symbol",
            bits.len(),
            w
        )));
    }
    // label -> index
    let mut index_of = vec![usize::MAX; c.order()];
    for (i, &l) in c.labels().iter().enumerate() {
        index_of[l as usize] = i;
    }
    bits.chunks(w)
        .map(|chunk| {
            let mut label = 0u32;
            for &b in chunk {
                if b > 1 {
                    return Err(Error::Framing(format!("non-bit value {b}")));
                }
                label = (label << 1) | b as u32;
            }
            Ok(index_of[label as usize])
        })
        .collect()
}

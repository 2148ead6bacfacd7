//! AWGN, binary symmetric, and binary erasure channels with exact
//! statistical contracts and explicit seeding.
//!
//! SNR convention: transmitted symbols are nominally unit mean power, so
//! per-symbol SNR is `1 / sigma^2` and `sigma^2 = 10^(-snr_db / 10)` per
//! complex symbol (half per real dimension).

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Channel family plus its noise parameter.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum ChannelKind {
    Awgn { snr_db: f64 },
    Bsc { p: f64 },
    Bec { p: f64 },
}

/// A channel application: the kind plus the stream seed.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ChannelConfig {
    #[serde(flatten)]
    pub kind: ChannelKind,
    pub seed: u64,
}

impl ChannelKind {
    pub fn validate(&self) -> Result<()> {
        match self {
            ChannelKind::Awgn { snr_db } => {
                if snr_db.is_nan() {
                    return Err(Error::Config("snr_db must not be NaN".into()));
                }
            }
            ChannelKind::Bsc { p } | ChannelKind::Bec { p } => {
                if !(0.0..=1.0).contains(p) {
                    return Err(Error::Config(format!("probability {p} outside [0,1]")));
                }
            }
        }
        Ok(())
    }
}

/// Per-complex-symbol noise variance for the given SNR in dB.
pub fn noise_variance(snr_db: f64) -> f64 {
    if snr_db.is_infinite() && snr_db > 0.0 {
        0.0
    } else {
        10f64.powf(-snr_db / 10.0)
    }
}

/// Add white Gaussian noise to unit-power symbols.
///
/// The unit-power precondition is asserted within 1%; streams that are not
/// nominally normalized are rejected with a contract violation.
/// `snr_db = +inf` is the noiseless sentinel.
pub fn awgn<R: Rng>(symbols: &[(f64, f64)], snr_db: f64, rng: &mut R) -> Result<Vec<(f64, f64)>> {
    if symbols.is_empty() {
        return Ok(Vec::new());
    }
    let power: f64 =
        symbols.iter().map(|(i, q)| i * i + q * q).sum::<f64>() / symbols.len() as f64;
    if (power - 1.0).abs() > 0.01 {
        return Err(Error::Contract(format!(
            "awgn input mean power {power:.4} deviates from 1 by more than 1%"
        )));
    }
    Ok(awgn_unchecked(symbols, snr_db, rng))
}

/// Noise injection without the power assertion.
///
/// Pipelines use this on quantized streams whose nominal (constellation)
/// power is 1 while the usage-weighted power may drift a few percent; the
/// SNR is always defined against nominal unit power.
pub fn awgn_unchecked<R: Rng>(symbols: &[(f64, f64)], snr_db: f64, rng: &mut R) -> Vec<(f64, f64)> {
    let var = noise_variance(snr_db);
    if var == 0.0 {
        return symbols.to_vec();
    }
    let normal = Normal::new(0.0, (var / 2.0).sqrt()).expect("positive std");
    symbols
        .iter()
        .map(|&(i, q)| (i + normal.sample(rng), q + normal.sample(rng)))
        .collect()
}

/// Flip each bit independently with probability `p`.
pub fn bsc<R: Rng>(bits: &[u8], p: f64, rng: &mut R) -> Result<Vec<u8>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("flip probability {p} outside [0,1]")));
    }
    Ok(bits
        .iter()
        .map(|&b| if rng.random::<f64>() < p { b ^ 1 } else { b })
        .collect())
}

/// Output alphabet of the binary erasure channel.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Trit {
    Zero,
    One,
    Erased,
}

impl Trit {
    pub fn from_bit(b: u8) -> Self {
        if b == 0 {
            Trit::Zero
        } else {
            Trit::One
        }
    }

    /// Soft value with the prior-mean substitution for erasures.
    pub fn soft(self) -> f64 {
        match self {
            Trit::Zero => 0.0,
            Trit::One => 1.0,
            Trit::Erased => 0.5,
        }
    }
}

/// Erase each bit independently with probability `p`.
pub fn bec<R: Rng>(bits: &[u8], p: f64, rng: &mut R) -> Result<Vec<Trit>> {
    if !(0.0..=1.0).contains(&p) {
        return Err(Error::Config(format!("erasure probability {p} outside [0,1]")));
    }
    Ok(bits
        .iter()
        .map(|&b| {
            if rng.random::<f64>() < p {
                Trit::Erased
            } else {
                Trit::from_bit(b)
            }
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng;

    fn unit_symbols(n: usize) -> Vec<(f64, f64)> {
        let s = std::f64::consts::FRAC_1_SQRT_2;
        (0..n)
            .map(|i| match i % 4 {
                0 => (s, s),
                1 => (s, -s),
                2 => (-s, s),
                _ => (-s, -s),
            })
            .collect()
    }

    #[test]
    fn infinite_snr_is_identity() {
        let syms = unit_symbols(64);
        let mut r = rng::stream(1, "awgn");
        let out = awgn(&syms, f64::INFINITY, &mut r).unwrap();
        assert_eq!(out, syms);
    }

    #[test]
    fn awgn_rejects_unnormalized_input() {
        let syms = vec![(2.0, 0.0); 32];
        let mut r = rng::stream(1, "awgn");
        let err = awgn(&syms, 10.0, &mut r).unwrap_err();
        assert_eq!(err.class(), "contract-violation");
    }

    #[test]
    fn noise_power_matches_snr() {
        let n = 1_000_000;
        let syms = unit_symbols(n);
        for snr_db in [0.0, 10.0] {
            let mut r = rng::stream(7, &format!("awgn-{snr_db}"));
            let out = awgn(&syms, snr_db, &mut r).unwrap();
            let mut acc = 0.0;
            let mut mean_i = 0.0;
            let mut mean_q = 0.0;
            let mut cross = 0.0;
            for (o, s) in out.iter().zip(&syms) {
                let ni = o.0 - s.0;
                let nq = o.1 - s.1;
                acc += ni * ni + nq * nq;
                mean_i += ni;
                mean_q += nq;
                cross += ni * nq;
            }
            let var = noise_variance(snr_db);
            let emp = acc / n as f64;
            assert!(
                (emp - var).abs() / var < 0.02,
                "snr {snr_db}: measured {emp} expected {var}"
            );
            // zero mean within 3 sigma of the sample mean
            let dim_sigma = (var / 2.0).sqrt();
            let bound = 3.0 * dim_sigma / (n as f64).sqrt();
            assert!(mean_i.abs() / n as f64 <= bound);
            assert!(mean_q.abs() / n as f64 <= bound);
            // I/Q uncorrelated
            let corr = (cross / n as f64) / (var / 2.0);
            assert!(corr.abs() < 0.01, "I/Q correlation {corr}");
        }
    }

    #[test]
    fn fixed_seed_reproduces_noise() {
        let syms = unit_symbols(512);
        let a = awgn(&syms, 5.0, &mut rng::stream(9, "rep")).unwrap();
        let b = awgn(&syms, 5.0, &mut rng::stream(9, "rep")).unwrap();
        for (x, y) in a.iter().zip(&b) {
            assert_eq!(x.0.to_bits(), y.0.to_bits());
            assert_eq!(x.1.to_bits(), y.1.to_bits());
        }
    }

    #[test]
    fn bsc_edge_probabilities() {
        let bits: Vec<u8> = (0..256).map(|i| (i % 2) as u8).collect();
        let mut r = rng::stream(2, "bsc");
        assert_eq!(bsc(&bits, 0.0, &mut r).unwrap(), bits);
        let flipped = bsc(&bits, 1.0, &mut r).unwrap();
        for (a, b) in bits.iter().zip(&flipped) {
            assert_eq!(*a ^ 1, *b);
        }
        assert!(bsc(&bits, 1.5, &mut r).is_err());
    }

    #[test]
    fn bsc_flip_count_within_binomial_bound() {
        let n = 1_000_000usize;
        let bits = vec![0u8; n];
        let p = 0.1;
        let mut r = rng::stream(3, "bsc-stat");
        let out = bsc(&bits, p, &mut r).unwrap();
        let flips = out.iter().filter(|&&b| b == 1).count() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((flips - mean).abs() <= 3.0 * sigma, "flips {flips} vs {mean}±{sigma}");
    }

    #[test]
    fn bec_erases_at_the_right_rate() {
        let n = 1_000_000usize;
        let bits: Vec<u8> = (0..n).map(|i| (i % 2) as u8).collect();
        let p = 0.1;
        let mut r = rng::stream(4, "bec-stat");
        let out = bec(&bits, p, &mut r).unwrap();
        let erased = out.iter().filter(|&&t| t == Trit::Erased).count() as f64;
        let mean = n as f64 * p;
        let sigma = (n as f64 * p * (1.0 - p)).sqrt();
        assert!((erased - mean).abs() <= 3.0 * sigma);
        // non-erased values are passed through unchanged
        for (i, t) in out.iter().enumerate() {
            if *t != Trit::Erased {
                assert_eq!(*t, Trit::from_bit(bits[i]));
            }
        }
        assert_eq!(Trit::Erased.soft(), 0.5);
    }
}

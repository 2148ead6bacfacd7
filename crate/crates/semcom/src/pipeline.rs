//! End-to-end transceiver chain: encoder, power normalization, modulator,
//! channel, demodulator, decoder — with a hand-written backward pass for
//! every modulator family and gradient bridge.
//!
//! Transmit convention: latent elements have unit mean square, so I/Q pairs
//! are scaled by `1/sqrt(2)` on the way into the channel (unit symbol
//! power) and scaled back at the receiver. Digital receivers hard-decide
//! (ML demodulation) before dequantizing, in training and evaluation alike;
//! gradient bridges make the training path differentiable.

use ndarray::{Array1, Array2, Array4, ArrayD, Axis};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::channel::{awgn_unchecked, bec, bsc, noise_variance, ChannelKind, Trit};
use crate::checkpoint::{Checkpoint, Stage};
use crate::constellation::{
    bits_to_symbols, grid_from_gaps, make_square_qam, nearest_point, symbols_to_bits,
    Constellation, ConstellationKind,
};
use crate::error::{Error, Result};
use crate::latent::{
    flatten_latent, power_normalize_backward, power_normalize_batch, Autoencoder,
};
use crate::modulators::{
    nearest_level, soft_assign, soft_assign_backward, BridgeKind, Family, ModulatorConfig,
    VQCodebook, TX_PAIR_SCALE,
};
use crate::nn::Linear;
use crate::rng;

const RX_PAIR_SCALE: f64 = std::f64::consts::SQRT_2;

/// Learnable constellation parameterization.
#[derive(Debug, Clone)]
pub enum SpacingParams {
    /// Fixed constellation.
    None,
    /// Per-axis level gaps of a grid constellation.
    Gaps { i: Array1<f64>, q: Array1<f64> },
    /// Free `[M, 2]` points, projected back onto the unit-power shell
    /// after every optimizer step.
    Points(Array2<f64>),
}

#[derive(Debug, Clone)]
pub struct SymbolState {
    pub constellation: Constellation,
    pub params: SpacingParams,
}

/// Learned affine-threshold quantizer (1 bit per element): the bit is
/// `step(scale * x + bias)`, dequantized to `lo` or `hi` per element.
#[derive(Debug, Clone)]
pub struct NnQuantState {
    pub scale: Array1<f64>,
    pub bias: Array1<f64>,
    pub lo: Array1<f64>,
    pub hi: Array1<f64>,
}

#[derive(Debug, Clone)]
pub struct ScalarState {
    pub levels: Vec<f64>,
    pub nn: Option<NnQuantState>,
}

#[derive(Debug, Clone)]
pub struct VectorState {
    pub codebook: VQCodebook,
    /// Reference constellation carrying the index bits.
    pub transport: Constellation,
}

#[derive(Debug, Clone)]
pub struct ProbState {
    /// Linear head: normalized latent -> `d/2 * M` logits.
    pub head: Linear,
    pub constellation: Constellation,
}

/// Runtime modulator state; built from a [`ModulatorConfig`].
#[derive(Debug, Clone)]
pub enum ModulatorState {
    Scalar(ScalarState),
    Symbol(SymbolState),
    Vector(VectorState),
    Probabilistic(ProbState),
}

/// The whole system under training or evaluation: autoencoder plus an
/// optional modulator (analog systems have none).
#[derive(Debug, Clone)]
pub struct Transceiver {
    pub auto: Autoencoder,
    pub config: Option<ModulatorConfig>,
    pub state: Option<ModulatorState>,
}

/// Snapshot of the modulator stored inside digital checkpoints.
#[derive(Debug, Clone, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
struct ModulatorSnapshot {
    config: ModulatorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    constellation: Option<Constellation>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    transport: Option<Constellation>,
}

impl Transceiver {
    pub fn analog(auto: Autoencoder) -> Self {
        Self {
            auto,
            config: None,
            state: None,
        }
    }

    /// Attach a modulator to an autoencoder. `constellation` feeds the
    /// symbol/probabilistic families (defaults to square QAM of the
    /// configured order); `latent_sample` seeds the VQ codebook.
    pub fn digital(
        auto: Autoencoder,
        cfg: ModulatorConfig,
        constellation: Option<Constellation>,
        latent_sample: Option<&Array2<f64>>,
        seed: u64,
    ) -> Result<Self> {
        cfg.validate()?;
        let d = auto.arch.latent_dim;
        let state = match cfg.family {
            Family::Scalar => {
                let nn = if cfg.nn_approx {
                    Some(NnQuantState {
                        scale: Array1::ones(d),
                        bias: Array1::zeros(d),
                        lo: Array1::from_elem(d, -1.0),
                        hi: Array1::from_elem(d, 1.0),
                    })
                } else {
                    None
                };
                let levels = if cfg.nn_approx {
                    vec![-1.0, 1.0]
                } else {
                    cfg.resolve_levels()?
                };
                ModulatorState::Scalar(ScalarState { levels, nn })
            }
            Family::Symbol => {
                let constellation = match constellation {
                    Some(c) => c,
                    None => make_square_qam(cfg.order.ok_or_else(|| {
                        Error::Config("symbol family needs a constellation or an order".into())
                    })?)?,
                };
                let params = if cfg.learnable_constellation {
                    match constellation.kind() {
                        ConstellationKind::LearnableSpacing => {
                            let side = (constellation.order() as f64).sqrt() as usize;
                            SpacingParams::Gaps {
                                i: Array1::ones(side - 1),
                                q: Array1::ones(side - 1),
                            }
                        }
                        ConstellationKind::Irregular => {
                            let mut pts = Array2::zeros((constellation.order(), 2));
                            for (k, &(pi, pq)) in constellation.points().iter().enumerate() {
                                pts[[k, 0]] = pi;
                                pts[[k, 1]] = pq;
                            }
                            SpacingParams::Points(pts)
                        }
                        ConstellationKind::SquareQam => {
                            return Err(Error::Config(
                                "a learnable constellation must be learnable-spacing or irregular"
                                    .into(),
                            ))
                        }
                    }
                } else {
                    SpacingParams::None
                };
                let mut state = SymbolState {
                    constellation,
                    params,
                };
                refresh_symbol_state(&mut state)?;
                ModulatorState::Symbol(state)
            }
            Family::Vector => {
                let k = cfg.codebook_size.expect("validated");
                let b = cfg.block_dim.expect("validated");
                if d % b != 0 {
                    return Err(Error::Config(format!(
                        "latent_dim {d} not divisible by block_dim {b}"
                    )));
                }
                let sample = latent_sample.ok_or_else(|| {
                    Error::Config("vector family needs latent samples to seed the codebook".into())
                })?;
                let blocks = latent_blocks(sample, b);
                let codebook = VQCodebook::from_samples(&blocks, k)?;
                let transport = make_square_qam(cfg.order.unwrap_or(4))?;
                ModulatorState::Vector(VectorState {
                    codebook,
                    transport,
                })
            }
            Family::Probabilistic => {
                let constellation = match constellation {
                    Some(c) => c,
                    None => make_square_qam(cfg.order.ok_or_else(|| {
                        Error::Config(
                            "probabilistic family needs a constellation or an order".into(),
                        )
                    })?)?,
                };
                let mut r = rng::stream(seed, "prob-head-init");
                let head = Linear::new(d, d / 2 * constellation.order(), &mut r);
                ModulatorState::Probabilistic(ProbState {
                    head,
                    constellation,
                })
            }
        };
        Ok(Self {
            auto,
            config: Some(cfg),
            state: Some(state),
        })
    }

    pub fn is_digital(&self) -> bool {
        self.state.is_some()
    }

    pub fn latent_dim(&self) -> usize {
        self.auto.arch.latent_dim
    }

    // -- parameter walk ----------------------------------------------------

    pub fn params(&self) -> Vec<ndarray::ArrayViewD<'_, f64>> {
        let mut p = self.auto.params();
        match &self.state {
            Some(ModulatorState::Scalar(s)) => {
                if let Some(nn) = &s.nn {
                    p.push(nn.scale.view().into_dyn());
                    p.push(nn.bias.view().into_dyn());
                    p.push(nn.lo.view().into_dyn());
                    p.push(nn.hi.view().into_dyn());
                }
            }
            Some(ModulatorState::Symbol(s)) => match &s.params {
                SpacingParams::None => {}
                SpacingParams::Gaps { i, q } => {
                    p.push(i.view().into_dyn());
                    p.push(q.view().into_dyn());
                }
                SpacingParams::Points(pts) => p.push(pts.view().into_dyn()),
            },
            Some(ModulatorState::Vector(s)) => p.push(s.codebook.vectors.view().into_dyn()),
            Some(ModulatorState::Probabilistic(s)) => {
                p.push(s.head.w.view().into_dyn());
                p.push(s.head.b.view().into_dyn());
            }
            None => {}
        }
        p
    }

    pub fn params_mut(&mut self) -> Vec<ndarray::ArrayViewMutD<'_, f64>> {
        let mut p = self.auto.params_mut();
        match &mut self.state {
            Some(ModulatorState::Scalar(s)) => {
                if let Some(nn) = &mut s.nn {
                    p.push(nn.scale.view_mut().into_dyn());
                    p.push(nn.bias.view_mut().into_dyn());
                    p.push(nn.lo.view_mut().into_dyn());
                    p.push(nn.hi.view_mut().into_dyn());
                }
            }
            Some(ModulatorState::Symbol(s)) => match &mut s.params {
                SpacingParams::None => {}
                SpacingParams::Gaps { i, q } => {
                    p.push(i.view_mut().into_dyn());
                    p.push(q.view_mut().into_dyn());
                }
                SpacingParams::Points(pts) => p.push(pts.view_mut().into_dyn()),
            },
            Some(ModulatorState::Vector(s)) => p.push(s.codebook.vectors.view_mut().into_dyn()),
            Some(ModulatorState::Probabilistic(s)) => {
                p.push(s.head.w.view_mut().into_dyn());
                p.push(s.head.b.view_mut().into_dyn());
            }
            None => {}
        }
        p
    }

    pub fn param_names(&self) -> Vec<String> {
        let mut names = self.auto.param_names();
        match &self.state {
            Some(ModulatorState::Scalar(s)) => {
                if s.nn.is_some() {
                    for n in ["scale", "bias", "lo", "hi"] {
                        names.push(format!("mod.nn.{n}"));
                    }
                }
            }
            Some(ModulatorState::Symbol(s)) => match &s.params {
                SpacingParams::None => {}
                SpacingParams::Gaps { .. } => {
                    names.push("mod.gaps_i".into());
                    names.push("mod.gaps_q".into());
                }
                SpacingParams::Points(_) => names.push("mod.points".into()),
            },
            Some(ModulatorState::Vector(_)) => names.push("mod.codebook".into()),
            Some(ModulatorState::Probabilistic(_)) => {
                names.push("mod.head.w".into());
                names.push("mod.head.b".into());
            }
            None => {}
        }
        names
    }

    /// Re-derive dependent state after an optimizer step: clamp gaps,
    /// rebuild the grid, or project free points back to unit power.
    pub fn refresh_after_step(&mut self) -> Result<()> {
        if let Some(ModulatorState::Symbol(s)) = &mut self.state {
            refresh_symbol_state(s)?;
            debug_assert!((s.constellation.mean_power() - 1.0).abs() < 1e-6);
        }
        Ok(())
    }

    // -- checkpointing -----------------------------------------------------

    pub fn to_checkpoint(
        &self,
        scheme: &str,
        seed: u64,
        train_config: serde_json::Value,
    ) -> Result<Checkpoint> {
        let stage = if self.is_digital() {
            Stage::Digital
        } else {
            Stage::Analog
        };
        let modulator = match (&self.config, &self.state) {
            (Some(cfg), Some(state)) => {
                let snap = ModulatorSnapshot {
                    config: cfg.clone(),
                    constellation: match state {
                        ModulatorState::Symbol(s) => Some(s.constellation.clone()),
                        ModulatorState::Probabilistic(s) => Some(s.constellation.clone()),
                        _ => None,
                    },
                    transport: match state {
                        ModulatorState::Vector(s) => Some(s.transport.clone()),
                        _ => None,
                    },
                };
                Some(serde_json::to_value(&snap)?)
            }
            _ => None,
        };
        let names = self.param_names();
        let tensors: Vec<(String, ArrayD<f64>)> = names
            .into_iter()
            .zip(self.params())
            .map(|(n, view)| (n, view.to_owned()))
            .collect();
        Ok(Checkpoint {
            stage,
            scheme: scheme.to_string(),
            seed,
            arch: self.auto.arch.clone(),
            train_config,
            modulator,
            tensors,
        })
    }

    pub fn from_checkpoint(ck: &Checkpoint) -> Result<Self> {
        let auto = Autoencoder::init(ck.arch.clone(), ck.seed)?;
        let mut system = match (&ck.modulator, ck.stage) {
            (None, Stage::Analog) => Transceiver::analog(auto),
            (None, Stage::Digital) => {
                return Err(Error::Malformed {
                    path: "<checkpoint>".into(),
                    reason: "digital checkpoint without modulator snapshot".into(),
                })
            }
            (Some(snap), _) => {
                let snap: ModulatorSnapshot = serde_json::from_value(snap.clone())?;
                // VQ codebooks and learnable constellations are restored from
                // tensors below; seed a placeholder sample for construction.
                let placeholder;
                let sample = if snap.config.family == Family::Vector {
                    let b = snap.config.block_dim.expect("validated");
                    let k = snap.config.codebook_size.expect("validated");
                    placeholder = Array2::ones((k * b.max(1), ck.arch.latent_dim));
                    Some(&placeholder)
                } else {
                    None
                };
                Transceiver::digital(auto, snap.config, snap.constellation, sample, ck.seed)?
            }
        };
        let names = system.param_names();
        {
            let mut views = system.params_mut();
            for (name, view) in names.iter().zip(views.iter_mut()) {
                let stored = ck.tensor(name).ok_or_else(|| Error::Malformed {
                    path: "<checkpoint>".into(),
                    reason: format!("missing tensor {name}"),
                })?;
                if stored.shape() != view.shape() {
                    return Err(Error::Malformed {
                        path: "<checkpoint>".into(),
                        reason: format!("tensor {name} shape mismatch"),
                    });
                }
                view.assign(stored);
            }
        }
        system.refresh_after_step()?;
        if let (Some(ModulatorState::Symbol(s)), Some(snap)) = (&mut system.state, &ck.modulator) {
            // fixed constellations come straight from the snapshot
            if matches!(s.params, SpacingParams::None) {
                let snap: ModulatorSnapshot = serde_json::from_value(snap.clone())?;
                if let Some(c) = snap.constellation {
                    s.constellation = c;
                }
            }
        }
        Ok(system)
    }
}

fn refresh_symbol_state(s: &mut SymbolState) -> Result<()> {
    match &mut s.params {
        SpacingParams::None => {}
        SpacingParams::Gaps { i, q } => {
            for g in i.iter_mut().chain(q.iter_mut()) {
                *g = g.max(1e-4);
            }
            let gi: Vec<f64> = i.to_vec();
            let gq: Vec<f64> = q.to_vec();
            s.constellation = grid_from_gaps(&gi, &gq)?;
        }
        SpacingParams::Points(pts) => {
            let raw: Vec<(f64, f64)> = (0..pts.nrows()).map(|k| (pts[[k, 0]], pts[[k, 1]])).collect();
            s.constellation = s.constellation.with_points(raw)?;
            for (k, &(pi, pq)) in s.constellation.points().iter().enumerate() {
                pts[[k, 0]] = pi;
                pts[[k, 1]] = pq;
            }
        }
    }
    Ok(())
}

/// Reshape `[B, d]` latents into `[B * d/b, b]` blocks.
fn latent_blocks(latents: &Array2<f64>, b: usize) -> Array2<f64> {
    let (n, d) = latents.dim();
    latents
        .view()
        .into_shape_with_order((n * d / b, b))
        .expect("block reshape")
        .to_owned()
}

fn constellation_targets(c: &Constellation) -> Array2<f64> {
    let mut t = Array2::zeros((c.order(), 2));
    for (j, &(pi, pq)) in c.points().iter().enumerate() {
        t[[j, 0]] = pi;
        t[[j, 1]] = pq;
    }
    t
}

fn levels_targets(levels: &[f64]) -> Array2<f64> {
    let mut t = Array2::zeros((levels.len(), 1));
    for (j, &l) in levels.iter().enumerate() {
        t[[j, 0]] = l;
    }
    t
}

// ---------------------------------------------------------------------------
// Training step
// ---------------------------------------------------------------------------

/// Output of one forward/backward chunk: the loss sum over images and
/// gradients (both unscaled; the caller divides by the batch size).
pub struct StepOutcome {
    pub loss_sum: f64,
    pub grads: Vec<ArrayD<f64>>,
}

impl Transceiver {
    /// Forward/backward over a chunk of images. Per-image loss is the pixel
    /// MSE plus (for the vector family) the codebook and `beta`-weighted
    /// commitment terms. The rng drives channel noise, Gumbel draws, and
    /// the uniform-noise bridge.
    pub fn forward_backward(
        &self,
        images: &Array4<f64>,
        snr_db: f64,
        tau: f64,
        beta: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<StepOutcome> {
        let hwc = images.dim().1 * images.dim().2 * images.dim().3;

        // encoder
        let (raw, enc_caches) = self.auto.encode_batch_train(images);
        let (v, norm_stats) = power_normalize_batch(&raw)?;

        // modulator + channel (training path)
        let mut aux_loss_sum = 0.0;
        let (v_hat, mod_trace) = self.modulate_train(&v, snr_db, tau, beta, rng, &mut aux_loss_sum)?;

        // decoder
        let (x_hat, dec_caches) = self.auto.decode_batch_train(&v_hat);

        // pixel loss and gradient (per-image mean over pixels)
        let mut loss_sum = aux_loss_sum;
        let mut gy = Array4::zeros(x_hat.raw_dim());
        for (bi, (xh, x)) in x_hat
            .outer_iter()
            .zip(images.outer_iter())
            .enumerate()
        {
            let mut acc = 0.0;
            for (g, (a, t)) in gy
                .index_axis_mut(Axis(0), bi)
                .iter_mut()
                .zip(xh.iter().zip(x.iter()))
            {
                let diff = a - t;
                acc += diff * diff;
                *g = 2.0 * diff / hwc as f64;
            }
            loss_sum += acc / hwc as f64;
        }
        if !loss_sum.is_finite() {
            return Err(Error::Diverged(format!("non-finite loss {loss_sum}")));
        }

        // backward: decoder -> modulator -> normalization -> encoder
        let n_auto = self.auto.params().len();
        let mut dec_grads = Vec::new();
        let g_maps = self.auto.decoder.backward(&dec_caches, gy, &mut dec_grads);
        let g_vhat = flatten_latent(&g_maps);

        let mut mod_grads: Vec<ArrayD<f64>> = self
            .params()
            .iter()
            .skip(n_auto)
            .map(|p| ArrayD::zeros(p.raw_dim()))
            .collect();
        let g_v = self.modulate_backward(&v, &g_vhat, &mod_trace, tau, beta, &mut mod_grads)?;

        let g_raw = power_normalize_backward(&raw, &g_v, &norm_stats);
        let g_bottleneck = self.auto.unflatten_latent(&g_raw);
        let mut enc_grads = Vec::new();
        let _ = self
            .auto
            .encoder
            .backward(&enc_caches, g_bottleneck, &mut enc_grads);

        let mut grads = enc_grads;
        grads.extend(dec_grads);
        grads.extend(mod_grads);
        debug_assert_eq!(grads.len(), self.params().len());
        Ok(StepOutcome { loss_sum, grads })
    }
}

/// Everything the training backward pass needs to retrace the modulator.
enum ModTrace {
    Analog,
    /// Straight-through paths: loss gradient passes unchanged; hard
    /// selections recorded for learnable-constellation updates.
    SteSymbol { tx_indices: Vec<Vec<usize>> },
    SteScalarPlain,
    NnScalar {
        bits: Array2<f64>,
    },
    SoftSymbol {
        tx: Vec<Array2<f64>>,
        tx_w: Vec<Vec<Vec<f64>>>,
        rx: Vec<Array2<f64>>,
        rx_w: Vec<Vec<Vec<f64>>>,
    },
    SoftScalar {
        tx: Array2<f64>,
        tx_w: Vec<Vec<Vec<f64>>>,
        rx: Array2<f64>,
        rx_w: Vec<Vec<Vec<f64>>>,
    },
    NoiseScalar,
    Vector {
        tx_blocks: Array2<f64>,
        tx_indices: Vec<usize>,
    },
    Prob {
        weights: Vec<Array2<f64>>,
        v_rows: Array2<f64>,
    },
}

impl Transceiver {
    /// Training-mode modulation + channel. Returns the decoder input and a
    /// trace for the backward pass; accumulates auxiliary (VQ) losses.
    fn modulate_train(
        &self,
        v: &Array2<f64>,
        snr_db: f64,
        tau: f64,
        beta: f64,
        rng: &mut ChaCha8Rng,
        aux_loss_sum: &mut f64,
    ) -> Result<(Array2<f64>, ModTrace)> {
        let b = v.nrows();
        let d = v.ncols();
        let h = d / 2;
        let var = noise_variance(snr_db);
        match &self.state {
            None => {
                // analog: pairs/sqrt(2) + AWGN + sqrt(2) collapses to
                // element-wise noise of variance sigma^2
                let mut out = v.clone();
                if var > 0.0 {
                    let nd = rand_distr::Normal::new(0.0, var.sqrt()).expect("positive std");
                    for x in out.iter_mut() {
                        *x += rand_distr::Distribution::sample(&nd, rng);
                    }
                }
                Ok((out, ModTrace::Analog))
            }
            Some(ModulatorState::Symbol(s)) => {
                let cfg = self.config.as_ref().expect("digital config");
                let c = &s.constellation;
                match cfg.bridge {
                    BridgeKind::Ste => {
                        let mut out = Array2::zeros((b, d));
                        let mut tx_indices = Vec::with_capacity(b);
                        for (bi, row) in v.rows().into_iter().enumerate() {
                            let mut indices = Vec::with_capacity(h);
                            for k in 0..h {
                                let s_k = (row[k] * TX_PAIR_SCALE, row[h + k] * TX_PAIR_SCALE);
                                let idx = nearest_point(c, s_k);
                                indices.push(idx);
                                let q = c.point(idx);
                                let y = add_pair_noise(q, var, rng);
                                let rxp = c.point(nearest_point(c, y));
                                out[[bi, k]] = rxp.0 * RX_PAIR_SCALE;
                                out[[bi, h + k]] = rxp.1 * RX_PAIR_SCALE;
                            }
                            tx_indices.push(indices);
                        }
                        Ok((out, ModTrace::SteSymbol { tx_indices }))
                    }
                    BridgeKind::SoftToHard => {
                        let targets = constellation_targets(c);
                        let mut out = Array2::zeros((b, d));
                        let mut tx = Vec::with_capacity(b);
                        let mut tx_w = Vec::with_capacity(b);
                        let mut rx = Vec::with_capacity(b);
                        let mut rx_w = Vec::with_capacity(b);
                        for (bi, row) in v.rows().into_iter().enumerate() {
                            let mut tx_pts = Array2::zeros((h, 2));
                            let mut rx_pts = Array2::zeros((h, 2));
                            let mut tw = Vec::with_capacity(h);
                            let mut rw = Vec::with_capacity(h);
                            for k in 0..h {
                                let s_k = [row[k] * TX_PAIR_SCALE, row[h + k] * TX_PAIR_SCALE];
                                let (w1, q) = soft_assign(&s_k, targets.view(), tau)?;
                                let y = add_pair_noise((q[0], q[1]), var, rng);
                                let (w2, p) = soft_assign(&[y.0, y.1], targets.view(), tau)?;
                                tx_pts[[k, 0]] = s_k[0];
                                tx_pts[[k, 1]] = s_k[1];
                                rx_pts[[k, 0]] = y.0;
                                rx_pts[[k, 1]] = y.1;
                                tw.push(w1);
                                rw.push(w2);
                                out[[bi, k]] = p[0] * RX_PAIR_SCALE;
                                out[[bi, h + k]] = p[1] * RX_PAIR_SCALE;
                            }
                            tx.push(tx_pts);
                            rx.push(rx_pts);
                            tx_w.push(tw);
                            rx_w.push(rw);
                        }
                        Ok((out, ModTrace::SoftSymbol { tx, tx_w, rx, rx_w }))
                    }
                    BridgeKind::UniformNoise => unreachable!("validated"),
                }
            }
            Some(ModulatorState::Scalar(s)) => {
                let cfg = self.config.as_ref().expect("digital config");
                if let Some(nn) = &s.nn {
                    // affine threshold with straight-through training
                    let mut bits = Array2::zeros((b, d));
                    let mut q = Array2::zeros((b, d));
                    for bi in 0..b {
                        for i in 0..d {
                            let a = nn.scale[i] * v[[bi, i]] + nn.bias[i];
                            let bit = if a > 0.0 { 1.0 } else { 0.0 };
                            bits[[bi, i]] = bit;
                            q[[bi, i]] = if bit > 0.5 { nn.hi[i] } else { nn.lo[i] };
                        }
                    }
                    // receiver re-decides per element against (lo+hi)/2
                    let noisy = transmit_elements_train(&q, var, rng, |x| x);
                    let mut vhat = Array2::zeros((b, d));
                    for bi in 0..b {
                        for i in 0..d {
                            let mid = 0.5 * (nn.lo[i] + nn.hi[i]);
                            vhat[[bi, i]] = if noisy[[bi, i]] > mid { nn.hi[i] } else { nn.lo[i] };
                        }
                    }
                    return Ok((vhat, ModTrace::NnScalar { bits }));
                }
                let levels = &s.levels;
                match cfg.bridge {
                    BridgeKind::Ste => {
                        let mut vhat = Array2::zeros((b, d));
                        for bi in 0..b {
                            for i in 0..d {
                                let q = levels[nearest_level(v[[bi, i]], levels)];
                                vhat[[bi, i]] = q;
                            }
                        }
                        let noisy = transmit_elements_train(&vhat, var, rng, |x| x);
                        for bi in 0..b {
                            for i in 0..d {
                                vhat[[bi, i]] = levels[nearest_level(noisy[[bi, i]], levels)];
                            }
                        }
                        Ok((vhat, ModTrace::SteScalarPlain))
                    }
                    BridgeKind::SoftToHard => {
                        let targets = levels_targets(levels);
                        let mut tx = Array2::zeros((b, d));
                        let mut tx_w = Vec::with_capacity(b * d);
                        let mut q = Array2::zeros((b, d));
                        for bi in 0..b {
                            for i in 0..d {
                                let x = [v[[bi, i]]];
                                let (w, soft) = soft_assign(&x, targets.view(), tau)?;
                                tx[[bi, i]] = v[[bi, i]];
                                tx_w.push(w);
                                q[[bi, i]] = soft[0];
                            }
                        }
                        let noisy = transmit_elements_train(&q, var, rng, |x| x);
                        let mut rx_w = Vec::with_capacity(b * d);
                        let mut vhat = Array2::zeros((b, d));
                        for bi in 0..b {
                            for i in 0..d {
                                let y = [noisy[[bi, i]]];
                                let (w, soft) = soft_assign(&y, targets.view(), tau)?;
                                rx_w.push(w);
                                vhat[[bi, i]] = soft[0];
                            }
                        }
                        Ok((
                            vhat,
                            ModTrace::SoftScalar {
                                tx,
                                tx_w: tx_w.chunks(d).map(|c| c.to_vec()).collect(),
                                rx: noisy,
                                rx_w: rx_w.chunks(d).map(|c| c.to_vec()).collect(),
                            },
                        ))
                    }
                    BridgeKind::UniformNoise => {
                        let delta = cfg.noise_delta.unwrap_or_else(|| min_gap(levels));
                        let mut q = v.clone();
                        for x in q.iter_mut() {
                            *x += rng_uniform(rng, delta);
                        }
                        let vhat = transmit_elements_train(&q, var, rng, |x| x);
                        Ok((vhat, ModTrace::NoiseScalar))
                    }
                }
            }
            Some(ModulatorState::Vector(s)) => {
                let cfg = self.config.as_ref().expect("digital config");
                let block = cfg.block_dim.expect("validated");
                let blocks = latent_blocks(v, block);
                let n_blocks = blocks.nrows();
                let mut tx_indices = Vec::with_capacity(n_blocks);
                let mut dist_sum = 0.0;
                for row in blocks.rows() {
                    let idx = s.codebook.nearest(row.as_slice().expect("contiguous block"));
                    tx_indices.push(idx);
                    for (x, e) in row.iter().zip(s.codebook.vectors.row(idx)) {
                        let diff = x - e;
                        dist_sum += diff * diff;
                    }
                }
                // per-image mean over latent elements, codebook + beta*commit
                *aux_loss_sum += (1.0 + beta) * dist_sum / d as f64;

                // transport: index bits over the reference constellation
                let rx_indices =
                    transport_indices(&tx_indices, s.codebook.bits_per_block(), &s.transport, var, rng)?;
                let mut vhat = Array2::zeros((b, d));
                let per_image = d / block;
                for (bi, chunk) in rx_indices.chunks(per_image).enumerate() {
                    for (blk, &idx) in chunk.iter().enumerate() {
                        for (k, &e) in s.codebook.vectors.row(idx).iter().enumerate() {
                            vhat[[bi, blk * block + k]] = e;
                        }
                    }
                }
                Ok((
                    vhat,
                    ModTrace::Vector {
                        tx_blocks: blocks,
                        tx_indices,
                    },
                ))
            }
            Some(ModulatorState::Probabilistic(s)) => {
                let m = s.constellation.order();
                let logits_flat = s.head.forward(v);
                let mut out = Array2::zeros((b, d));
                let mut weights = Vec::with_capacity(b);
                for bi in 0..b {
                    let logits = logits_flat
                        .row(bi)
                        .into_shape_with_order((h, m))
                        .expect("slot reshape")
                        .to_owned();
                    let draw = crate::modulators::prob_modulate(
                        &logits,
                        &s.constellation,
                        crate::modulators::ProbMode::Train,
                        tau,
                        rng,
                    )?;
                    for (k, &sym) in draw.symbols.iter().enumerate() {
                        let q = s.constellation.point(sym);
                        let y = add_pair_noise(q, var, rng);
                        let rxp = s.constellation.point(nearest_point(&s.constellation, y));
                        out[[bi, k]] = rxp.0 * RX_PAIR_SCALE;
                        out[[bi, h + k]] = rxp.1 * RX_PAIR_SCALE;
                    }
                    weights.push(draw.soft_weights.expect("train mode"));
                }
                Ok((
                    out,
                    ModTrace::Prob {
                        weights,
                        v_rows: v.clone(),
                    },
                ))
            }
        }
    }

    /// Backward pass matching [`Transceiver::modulate_train`]; returns the
    /// gradient w.r.t. the normalized latent and fills modulator gradients.
    fn modulate_backward(
        &self,
        v: &Array2<f64>,
        g_vhat: &Array2<f64>,
        trace: &ModTrace,
        tau: f64,
        beta: f64,
        mod_grads: &mut [ArrayD<f64>],
    ) -> Result<Array2<f64>> {
        let b = v.nrows();
        let d = v.ncols();
        let h = d / 2;
        match (trace, &self.state) {
            (ModTrace::Analog, None) => Ok(g_vhat.clone()),
            (ModTrace::SteSymbol { tx_indices }, Some(ModulatorState::Symbol(s))) => {
                // straight-through end to end; constellation points pick up
                // the gradient at their transmit selections
                if !matches!(s.params, SpacingParams::None) {
                    let mut g_points = Array2::zeros((s.constellation.order(), 2));
                    for (bi, indices) in tx_indices.iter().enumerate() {
                        for (k, &idx) in indices.iter().enumerate() {
                            g_points[[idx, 0]] += g_vhat[[bi, k]] * RX_PAIR_SCALE;
                            g_points[[idx, 1]] += g_vhat[[bi, h + k]] * RX_PAIR_SCALE;
                        }
                    }
                    scatter_constellation_grads(s, &g_points, mod_grads)?;
                }
                Ok(g_vhat.clone())
            }
            (ModTrace::SteScalarPlain, Some(ModulatorState::Scalar(_))) => Ok(g_vhat.clone()),
            (ModTrace::NnScalar { bits }, Some(ModulatorState::Scalar(s))) => {
                let nn = s.nn.as_ref().expect("nn trace");
                let mut g_v = Array2::zeros((b, d));
                let (g_scale, rest) = mod_grads.split_at_mut(1);
                let (g_bias, rest) = rest.split_at_mut(1);
                let (g_lo, g_hi) = rest.split_at_mut(1);
                for bi in 0..b {
                    for i in 0..d {
                        let g = g_vhat[[bi, i]];
                        let bit = bits[[bi, i]];
                        // straight-through over the threshold: d(bit)/d(a) := 1
                        let ga = g * (nn.hi[i] - nn.lo[i]);
                        g_scale[0][[i]] += ga * v[[bi, i]];
                        g_bias[0][[i]] += ga;
                        g_hi[0][[i]] += g * bit;
                        g_lo[0][[i]] += g * (1.0 - bit);
                        g_v[[bi, i]] = ga * nn.scale[i];
                    }
                }
                Ok(g_v)
            }
            (ModTrace::SoftSymbol { tx, tx_w, rx, rx_w }, Some(ModulatorState::Symbol(s))) => {
                let targets = constellation_targets(&s.constellation);
                let mut g_v = Array2::zeros((b, d));
                for bi in 0..b {
                    for k in 0..h {
                        let g_p = [
                            g_vhat[[bi, k]] * RX_PAIR_SCALE,
                            g_vhat[[bi, h + k]] * RX_PAIR_SCALE,
                        ];
                        let y = [rx[bi][[k, 0]], rx[bi][[k, 1]]];
                        let g_y = soft_assign_backward(&y, targets.view(), tau, &rx_w[bi][k], &g_p);
                        let sx = [tx[bi][[k, 0]], tx[bi][[k, 1]]];
                        let g_s = soft_assign_backward(&sx, targets.view(), tau, &tx_w[bi][k], &g_y);
                        g_v[[bi, k]] = g_s[0] * TX_PAIR_SCALE;
                        g_v[[bi, h + k]] = g_s[1] * TX_PAIR_SCALE;
                    }
                }
                Ok(g_v)
            }
            (ModTrace::SoftScalar { tx, tx_w, rx, rx_w }, Some(ModulatorState::Scalar(s))) => {
                let targets = levels_targets(&s.levels);
                let mut g_v = Array2::zeros((b, d));
                for bi in 0..b {
                    for i in 0..d {
                        let g = [g_vhat[[bi, i]]];
                        let y = [rx[[bi, i]]];
                        let g_y = soft_assign_backward(&y, targets.view(), tau, &rx_w[bi][i], &g);
                        let x = [tx[[bi, i]]];
                        let g_x = soft_assign_backward(&x, targets.view(), tau, &tx_w[bi][i], &g_y);
                        g_v[[bi, i]] = g_x[0];
                    }
                }
                Ok(g_v)
            }
            (ModTrace::NoiseScalar, Some(ModulatorState::Scalar(_))) => Ok(g_vhat.clone()),
            (
                ModTrace::Vector {
                    tx_blocks,
                    tx_indices,
                },
                Some(ModulatorState::Vector(s)),
            ) => {
                // reconstruction gradient passes straight through to the
                // encoder blocks; codebook learns from the codebook loss,
                // encoder additionally from the commitment loss
                let block = s.codebook.block_dim();
                let mut g_v = g_vhat.clone();
                let g_cb = &mut mod_grads[0];
                for (bn, (&idx, row)) in tx_indices
                    .iter()
                    .zip(tx_blocks.rows())
                    .enumerate()
                {
                    let bi = bn / (d / block);
                    let blk = bn % (d / block);
                    for (k, (&z, &e)) in row.iter().zip(s.codebook.vectors.row(idx)).enumerate() {
                        let diff = e - z;
                        g_cb[[idx, k]] += 2.0 * diff / d as f64;
                        g_v[[bi, blk * block + k]] += beta * 2.0 * (z - e) / d as f64;
                    }
                }
                Ok(g_v)
            }
            (ModTrace::Prob { weights, v_rows }, Some(ModulatorState::Probabilistic(s))) => {
                let m = s.constellation.order();
                let mut g_logits_flat = Array2::zeros((b, h * m));
                for bi in 0..b {
                    let w = &weights[bi];
                    for k in 0..h {
                        let g_t = [
                            g_vhat[[bi, k]] * RX_PAIR_SCALE,
                            g_vhat[[bi, h + k]] * RX_PAIR_SCALE,
                        ];
                        // straight-through categorical: backward through the
                        // relaxation y = sum_j w_j c_j
                        let mut gdotc = vec![0.0; m];
                        let mut sum = 0.0;
                        for j in 0..m {
                            let p = s.constellation.point(j);
                            gdotc[j] = g_t[0] * p.0 + g_t[1] * p.1;
                            sum += w[[k, j]] * gdotc[j];
                        }
                        for j in 0..m {
                            g_logits_flat[[bi, k * m + j]] = w[[k, j]] * (gdotc[j] - sum) / tau;
                        }
                    }
                }
                let (g_v, g_w, g_b) = s.head.backward(v_rows, &g_logits_flat);
                mod_grads[0].assign(&g_w.into_dyn());
                mod_grads[1].assign(&g_b.into_dyn());
                Ok(g_v)
            }
            _ => unreachable!("trace/state mismatch"),
        }
    }
}

fn scatter_constellation_grads(
    s: &SymbolState,
    g_points: &Array2<f64>,
    mod_grads: &mut [ArrayD<f64>],
) -> Result<()> {
    match &s.params {
        SpacingParams::None => {}
        SpacingParams::Points(_) => {
            mod_grads[0].zip_mut_with(&g_points.view().into_dyn(), |a, &b| *a += b);
        }
        SpacingParams::Gaps { i, q } => {
            // chain: normalized points <- raw grid <- per-axis levels <- gaps
            let side = i.len() + 1;
            let gi: Vec<f64> = i.to_vec();
            let gq: Vec<f64> = q.to_vec();
            let li = crate::constellation::levels_from_gaps(&gi);
            let lq = crate::constellation::levels_from_gaps(&gq);
            // raw (pre-normalization) points and power
            let m = side * side;
            let mut raw = Vec::with_capacity(m);
            for a in 0..side {
                for bq in 0..side {
                    raw.push((li[a], lq[bq]));
                }
            }
            let sum_sq: f64 = raw.iter().map(|(x, y)| x * x + y * y).sum();
            let scale = (m as f64 / sum_sq).sqrt();
            // g wrt raw coordinates through y = scale(raw) * raw
            let mut dot = 0.0;
            for (k, &(x, y)) in raw.iter().enumerate() {
                dot += g_points[[k, 0]] * x + g_points[[k, 1]] * y;
            }
            let mut g_li = vec![0.0; side];
            let mut g_lq = vec![0.0; side];
            for (k, &(x, y)) in raw.iter().enumerate() {
                let gx = scale * (g_points[[k, 0]] - x * dot / sum_sq);
                let gy = scale * (g_points[[k, 1]] - y * dot / sum_sq);
                g_li[k / side] += gx;
                g_lq[k % side] += gy;
            }
            // levels = centered cumulative sums of gaps
            let g_gap = |g_l: &[f64]| -> Vec<f64> {
                let l = g_l.len();
                let total: f64 = g_l.iter().sum();
                (0..l - 1)
                    .map(|j| {
                        let suffix: f64 = g_l[j + 1..].iter().sum();
                        suffix - (l - 1 - j) as f64 / l as f64 * total
                    })
                    .collect()
            };
            let ggi = g_gap(&g_li);
            let ggq = g_gap(&g_lq);
            for (dst, src) in mod_grads[0].iter_mut().zip(&ggi) {
                *dst += src;
            }
            for (dst, src) in mod_grads[1].iter_mut().zip(&ggq) {
                *dst += src;
            }
        }
    }
    Ok(())
}

fn add_pair_noise(p: (f64, f64), var: f64, rng: &mut ChaCha8Rng) -> (f64, f64) {
    if var == 0.0 {
        return p;
    }
    let nd = rand_distr::Normal::new(0.0, (var / 2.0).sqrt()).expect("positive std");
    (
        p.0 + rand_distr::Distribution::sample(&nd, rng),
        p.1 + rand_distr::Distribution::sample(&nd, rng),
    )
}

/// Pair the element matrix with the transmit scale, add channel noise, and
/// return to the element domain (training path for element streams).
fn transmit_elements_train(
    q: &Array2<f64>,
    var: f64,
    rng: &mut ChaCha8Rng,
    post: impl Fn(f64) -> f64,
) -> Array2<f64> {
    if var == 0.0 {
        return q.mapv(&post);
    }
    // pairs/sqrt(2), per-dimension sigma^2/2, back: element noise sigma^2
    let nd = rand_distr::Normal::new(0.0, var.sqrt()).expect("positive std");
    q.mapv(|x| post(x + rand_distr::Distribution::sample(&nd, rng)))
}

fn rng_uniform(rng: &mut ChaCha8Rng, delta: f64) -> f64 {
    use rand::Rng;
    rng.random_range(-delta / 2.0..delta / 2.0)
}

fn min_gap(levels: &[f64]) -> f64 {
    levels
        .windows(2)
        .map(|w| w[1] - w[0])
        .fold(f64::INFINITY, f64::min)
}

/// Send index bit streams over the transport constellation with AWGN and
/// hard ML demodulation; returns the received indices.
fn transport_indices(
    indices: &[usize],
    bits_per_index: usize,
    transport: &Constellation,
    var: f64,
    rng: &mut ChaCha8Rng,
) -> Result<Vec<usize>> {
    let mut bits = Vec::with_capacity(indices.len() * bits_per_index);
    for &idx in indices {
        for b in (0..bits_per_index).rev() {
            bits.push(((idx >> b) & 1) as u8);
        }
    }
    // pad to a whole number of symbols
    let w = transport.bits_per_symbol();
    let pad = (w - bits.len() % w) % w;
    bits.extend(std::iter::repeat_n(0u8, pad));
    let symbols = bits_to_symbols(transport, &bits)?;
    let mut rx: Vec<(f64, f64)> = symbols.iter().map(|&s| transport.point(s)).collect();
    if var > 0.0 {
        let nd = rand_distr::Normal::new(0.0, (var / 2.0).sqrt()).expect("positive std");
        for p in rx.iter_mut() {
            p.0 += rand_distr::Distribution::sample(&nd, rng);
            p.1 += rand_distr::Distribution::sample(&nd, rng);
        }
    }
    let rx_syms: Vec<usize> = rx.iter().map(|&p| nearest_point(transport, p)).collect();
    let rx_bits = symbols_to_bits(transport, &rx_syms);
    let mut out = Vec::with_capacity(indices.len());
    for chunk in rx_bits[..bits.len() - pad].chunks(bits_per_index) {
        let mut idx = 0usize;
        for &b in chunk {
            idx = (idx << 1) | b as usize;
        }
        out.push(idx);
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// Evaluation path
// ---------------------------------------------------------------------------

/// Channel-usage counters collected during evaluation.
#[derive(Debug, Clone, Copy, Default)]
pub struct EvalAux {
    pub n_symbols: usize,
    pub symbol_errors: usize,
    pub n_bits: usize,
    pub bit_errors: usize,
}

impl Transceiver {
    /// Deployment-mode transmission: hard quantization, hard demodulation,
    /// sampled symbols for the probabilistic family. Returns decoded images
    /// and symbol/bit error counters (empty for analog).
    pub fn run_eval(
        &self,
        images: &Array4<f64>,
        channel: ChannelKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array4<f64>, EvalAux)> {
        channel.validate()?;
        let v = self.auto.encode_batch(images)?;
        let (v_hat, aux) = self.channel_eval(&v, channel, rng)?;
        Ok((self.auto.decode_batch(&v_hat), aux))
    }

    /// Evaluation-mode modulation + channel + demodulation on latents.
    pub fn channel_eval(
        &self,
        v: &Array2<f64>,
        channel: ChannelKind,
        rng: &mut ChaCha8Rng,
    ) -> Result<(Array2<f64>, EvalAux)> {
        let b = v.nrows();
        let d = v.ncols();
        let h = d / 2;
        let mut aux = EvalAux::default();
        match &self.state {
            None => {
                let ChannelKind::Awgn { snr_db } = channel else {
                    return Err(Error::Config(
                        "analog transmission needs an AWGN channel".into(),
                    ));
                };
                let var = noise_variance(snr_db);
                let mut out = v.clone();
                if var > 0.0 {
                    let nd = rand_distr::Normal::new(0.0, var.sqrt()).expect("positive std");
                    for x in out.iter_mut() {
                        *x += rand_distr::Distribution::sample(&nd, rng);
                    }
                }
                Ok((out, aux))
            }
            Some(ModulatorState::Symbol(s)) => {
                let mut tx_indices = Vec::with_capacity(b * h);
                for row in v.rows() {
                    for k in 0..h {
                        let s_k = (row[k] * TX_PAIR_SCALE, row[h + k] * TX_PAIR_SCALE);
                        tx_indices.push(nearest_point(&s.constellation, s_k));
                    }
                }
                let received =
                    send_symbols(&s.constellation, &tx_indices, channel, rng, &mut aux)?;
                let mut out = Array2::zeros((b, d));
                for bi in 0..b {
                    for k in 0..h {
                        let p = received[bi * h + k];
                        out[[bi, k]] = p.0 * RX_PAIR_SCALE;
                        out[[bi, h + k]] = p.1 * RX_PAIR_SCALE;
                    }
                }
                Ok((out, aux))
            }
            Some(ModulatorState::Scalar(s)) => {
                if let Some(nn) = &s.nn {
                    let ChannelKind::Awgn { snr_db } = channel else {
                        return Err(Error::Config(
                            "the affine-threshold quantizer transmits over AWGN".into(),
                        ));
                    };
                    let var = noise_variance(snr_db);
                    let mut q = Array2::zeros((b, d));
                    for bi in 0..b {
                        for i in 0..d {
                            let bit = nn.scale[i] * v[[bi, i]] + nn.bias[i] > 0.0;
                            q[[bi, i]] = if bit { nn.hi[i] } else { nn.lo[i] };
                        }
                    }
                    let noisy = transmit_elements_train(&q, var, rng, |x| x);
                    let mut out = Array2::zeros((b, d));
                    for bi in 0..b {
                        for i in 0..d {
                            aux.n_bits += 1;
                            let mid = 0.5 * (nn.lo[i] + nn.hi[i]);
                            let bit = noisy[[bi, i]] > mid;
                            if bit != (q[[bi, i]] > mid) {
                                aux.bit_errors += 1;
                            }
                            out[[bi, i]] = if bit { nn.hi[i] } else { nn.lo[i] };
                        }
                    }
                    return Ok((out, aux));
                }
                let levels = &s.levels;
                match channel {
                    ChannelKind::Awgn { snr_db } => {
                        let var = noise_variance(snr_db);
                        let mut q = Array2::zeros((b, d));
                        for bi in 0..b {
                            for i in 0..d {
                                q[[bi, i]] = levels[nearest_level(v[[bi, i]], levels)];
                            }
                        }
                        let noisy = transmit_elements_train(&q, var, rng, |x| x);
                        let mut out = Array2::zeros((b, d));
                        for bi in 0..b {
                            for i in 0..d {
                                aux.n_symbols += 1;
                                let rx = nearest_level(noisy[[bi, i]], levels);
                                if levels[rx] != q[[bi, i]] {
                                    aux.symbol_errors += 1;
                                }
                                out[[bi, i]] = levels[rx];
                            }
                        }
                        Ok((out, aux))
                    }
                    ChannelKind::Bsc { p } | ChannelKind::Bec { p } => {
                        let mut out = Array2::zeros((b, d));
                        for bi in 0..b {
                            let row = v.row(bi).to_owned();
                            let (_, bits) = crate::modulators::scalar_quantize(&row, levels)?;
                            let rx_vals = match channel {
                                ChannelKind::Bsc { .. } => {
                                    let rx_bits = bsc(&bits, p, rng)?;
                                    aux.n_bits += bits.len();
                                    aux.bit_errors += bits
                                        .iter()
                                        .zip(&rx_bits)
                                        .filter(|(a, b)| a != b)
                                        .count();
                                    crate::modulators::scalar_dequantize_bits(&rx_bits, levels)?
                                }
                                ChannelKind::Bec { .. } => {
                                    let trits = bec(&bits, p, rng)?;
                                    aux.n_bits += bits.len();
                                    aux.bit_errors +=
                                        trits.iter().filter(|t| **t == Trit::Erased).count();
                                    erased_levels(&trits, levels)
                                }
                                _ => unreachable!(),
                            };
                            for (i, x) in rx_vals.iter().enumerate() {
                                out[[bi, i]] = *x;
                            }
                        }
                        Ok((out, aux))
                    }
                }
            }
            Some(ModulatorState::Vector(s)) => {
                let block = s.codebook.block_dim();
                let blocks = latent_blocks(v, block);
                let tx: Vec<usize> = blocks
                    .rows()
                    .into_iter()
                    .map(|r| s.codebook.nearest(r.as_slice().expect("contiguous")))
                    .collect();
                let wpb = s.codebook.bits_per_block();
                let rx: Vec<usize> = match channel {
                    ChannelKind::Awgn { snr_db } => {
                        let var = noise_variance(snr_db);
                        let out = transport_indices(&tx, wpb, &s.transport, var, rng)?;
                        aux.n_symbols += tx.len();
                        aux.symbol_errors +=
                            tx.iter().zip(&out).filter(|(a, b)| a != b).count();
                        out
                    }
                    ChannelKind::Bsc { p } => {
                        let mut bits = Vec::with_capacity(tx.len() * wpb);
                        for &idx in &tx {
                            for k in (0..wpb).rev() {
                                bits.push(((idx >> k) & 1) as u8);
                            }
                        }
                        let rx_bits = bsc(&bits, p, rng)?;
                        aux.n_bits += bits.len();
                        aux.bit_errors +=
                            bits.iter().zip(&rx_bits).filter(|(a, b)| a != b).count();
                        rx_bits
                            .chunks(wpb)
                            .map(|c| c.iter().fold(0usize, |a, &b| (a << 1) | b as usize))
                            .collect()
                    }
                    ChannelKind::Bec { .. } => {
                        return Err(Error::Config(
                            "vector transport over BEC is not supported; use bsc or awgn".into(),
                        ))
                    }
                };
                let mut out = Array2::zeros((b, d));
                let per_image = d / block;
                for (bn, &idx) in rx.iter().enumerate() {
                    let bi = bn / per_image;
                    let blk = bn % per_image;
                    for (k, &e) in s.codebook.vectors.row(idx).iter().enumerate() {
                        out[[bi, blk * block + k]] = e;
                    }
                }
                Ok((out, aux))
            }
            Some(ModulatorState::Probabilistic(s)) => {
                let ChannelKind::Awgn { snr_db } = channel else {
                    return Err(Error::Config(
                        "the probabilistic symbol modulator transmits over AWGN".into(),
                    ));
                };
                let var = noise_variance(snr_db);
                let m = s.constellation.order();
                let logits_flat = s.head.forward(v);
                let mut out = Array2::zeros((b, d));
                for bi in 0..b {
                    let logits = logits_flat
                        .row(bi)
                        .into_shape_with_order((h, m))
                        .expect("slot reshape")
                        .to_owned();
                    let draw = crate::modulators::prob_modulate(
                        &logits,
                        &s.constellation,
                        crate::modulators::ProbMode::EvalSample,
                        1.0,
                        rng,
                    )?;
                    for (k, &sym) in draw.symbols.iter().enumerate() {
                        aux.n_symbols += 1;
                        let y = add_pair_noise(s.constellation.point(sym), var, rng);
                        let rx = nearest_point(&s.constellation, y);
                        if rx != sym {
                            aux.symbol_errors += 1;
                        }
                        let p = s.constellation.point(rx);
                        out[[bi, k]] = p.0 * RX_PAIR_SCALE;
                        out[[bi, h + k]] = p.1 * RX_PAIR_SCALE;
                    }
                }
                Ok((out, aux))
            }
        }
    }
}

/// Symbol transport over any channel kind, returning the reconstructed
/// point per symbol. AWGN adds noise to the points and hard-decides;
/// BSC/BEC move the label bits. Symbols with erased bits reconstruct as
/// the mean of the label-compatible points (the uniform-prior mean) and
/// count as symbol errors.
fn send_symbols(
    c: &Constellation,
    tx_indices: &[usize],
    channel: ChannelKind,
    rng: &mut ChaCha8Rng,
    aux: &mut EvalAux,
) -> Result<Vec<(f64, f64)>> {
    match channel {
        ChannelKind::Awgn { snr_db } => {
            let tx: Vec<(f64, f64)> = tx_indices.iter().map(|&i| c.point(i)).collect();
            let rx = awgn_unchecked(&tx, snr_db, rng);
            aux.n_symbols += tx_indices.len();
            let mut out = Vec::with_capacity(tx_indices.len());
            for (&sent, &recv) in tx_indices.iter().zip(rx.iter()) {
                let idx = nearest_point(c, recv);
                if idx != sent {
                    aux.symbol_errors += 1;
                }
                out.push(c.point(idx));
            }
            Ok(out)
        }
        ChannelKind::Bsc { p } => {
            let bits = symbols_to_bits(c, tx_indices);
            let rx_bits = bsc(&bits, p, rng)?;
            aux.n_bits += bits.len();
            aux.bit_errors += bits.iter().zip(&rx_bits).filter(|(a, b)| a != b).count();
            let rx = bits_to_symbols(c, &rx_bits)?;
            aux.n_symbols += tx_indices.len();
            aux.symbol_errors += tx_indices.iter().zip(&rx).filter(|(a, b)| a != b).count();
            Ok(rx.into_iter().map(|i| c.point(i)).collect())
        }
        ChannelKind::Bec { p } => {
            let bits = symbols_to_bits(c, tx_indices);
            let trits = bec(&bits, p, rng)?;
            aux.n_bits += bits.len();
            aux.bit_errors += trits.iter().filter(|t| **t == Trit::Erased).count();
            aux.n_symbols += tx_indices.len();
            let w = c.bits_per_symbol();
            let mut out = Vec::with_capacity(tx_indices.len());
            for (si, &sent) in tx_indices.iter().enumerate() {
                let chunk = &trits[si * w..(si + 1) * w];
                if chunk.iter().all(|t| *t != Trit::Erased) {
                    let mut label = 0u32;
                    for t in chunk {
                        label = (label << 1) | if *t == Trit::One { 1 } else { 0 };
                    }
                    let idx = c
                        .labels()
                        .iter()
                        .position(|&l| l == label)
                        .expect("labels are a permutation");
                    if idx != sent {
                        aux.symbol_errors += 1;
                    }
                    out.push(c.point(idx));
                } else {
                    aux.symbol_errors += 1;
                    let mut acc = (0.0, 0.0);
                    let mut n = 0.0;
                    for (idx, &label) in c.labels().iter().enumerate() {
                        let matches = chunk.iter().enumerate().all(|(bi, t)| match t {
                            Trit::Erased => true,
                            Trit::One => (label >> (w - 1 - bi)) & 1 == 1,
                            Trit::Zero => (label >> (w - 1 - bi)) & 1 == 0,
                        });
                        if matches {
                            let pt = c.point(idx);
                            acc.0 += pt.0;
                            acc.1 += pt.1;
                            n += 1.0;
                        }
                    }
                    out.push((acc.0 / n, acc.1 / n));
                }
            }
            Ok(out)
        }
    }
}

/// Mean level over the candidates compatible with the surviving Gray-coded
/// bits of each element (uniform-prior erasure reconstruction).
fn erased_levels(trits: &[Trit], levels: &[f64]) -> Array1<f64> {
    let w = levels.len().trailing_zeros() as usize;
    let vals: Vec<f64> = trits
        .chunks(w)
        .map(|chunk| {
            let mut acc = 0.0;
            let mut n = 0.0;
            for (idx, &level) in levels.iter().enumerate() {
                let g = (idx ^ (idx >> 1)) as u32;
                let matches = chunk.iter().enumerate().all(|(bi, t)| match t {
                    Trit::Erased => true,
                    Trit::One => (g >> (w - 1 - bi)) & 1 == 1,
                    Trit::Zero => (g >> (w - 1 - bi)) & 1 == 0,
                });
                if matches {
                    acc += level;
                    n += 1.0;
                }
            }
            acc / n
        })
        .collect();
    Array1::from_vec(vals)
}

//! The optimization loop.
//!
//! Each iteration samples a batch of contiguous snapshot windows and builds
//! one graph for the whole batch: encode every window start, roll the
//! latent states forward, decode every step, and assemble one objective
//! whose per-window terms are averaged and whose distribution term pools
//! all windows' latent samples. Batch normalization sees every snapshot in
//! the batch at once. One Adam update then applies to the generator
//! parameters; with adversarial training enabled, a critic update on the
//! same windows follows. The rollout horizon n_S grows on a fixed-interval
//! curriculum.
//!
//! Determinism: every random choice is drawn from a stream derived from
//! (master seed, iteration, slot), so a run is a pure function of its
//! configuration and checkpoint resume replays the exact tail of an
//! uninterrupted run.

use crate::corpus::{SequenceWindow, SnapshotCorpus};
use crate::error::{KoopmanError, Result};
use crate::latent::{self, KoopmanForm};
use crate::losses::{self, GanSign, GeneratorParts, LossWeights};
use crate::networks::{
    to_net_layout, ArchConfig, BnObservation, FwdCtx, ModelParams, Net, ParamGroup,
};
use autodiff::{nn, Graph, Var};
use ndarray::{Array1, ArrayD};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::io::Write;
use std::path::Path;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub iterations: usize,
    pub lr: f64,
    pub n_s_initial: usize,
    pub n_s_max: usize,
    pub curriculum_every: usize,
    pub curriculum_rate: f64,
    pub batch_size: usize,
    pub seed: u64,
    /// Checkpoint interval in iterations; 0 keeps only the final one.
    pub ckpt_every: usize,
    /// Finite-difference orders entering the smoothness term.
    pub grad_orders: Vec<usize>,
    pub weights: LossWeights,
    pub arch: ArchConfig,
}

impl TrainConfig {
    pub fn new(arch: ArchConfig) -> Self {
        let weights = LossWeights::defaults(arch.latent_dim);
        TrainConfig {
            iterations: 100_000,
            lr: 1e-5,
            n_s_initial: 1,
            n_s_max: 32,
            curriculum_every: 20_000,
            curriculum_rate: 1.05,
            batch_size: 1,
            seed: 0,
            ckpt_every: 10_000,
            grad_orders: vec![1],
            weights,
            arch,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        self.weights.validate()?;
        if self.iterations == 0 {
            return Err(KoopmanError::Config("iterations must be at least 1".into()));
        }
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(KoopmanError::Config(format!(
                "learning rate must be positive, got {}",
                self.lr
            )));
        }
        if self.n_s_initial == 0 || self.n_s_initial > self.n_s_max {
            return Err(KoopmanError::Config(format!(
                "need 1 <= n_s_initial ({}) <= n_s_max ({})",
                self.n_s_initial, self.n_s_max
            )));
        }
        if self.curriculum_every == 0 {
            return Err(KoopmanError::Config("curriculum interval must be positive".into()));
        }
        if !(self.curriculum_rate >= 1.0) {
            return Err(KoopmanError::Config(format!(
                "curriculum rate must be at least 1, got {}",
                self.curriculum_rate
            )));
        }
        if self.batch_size == 0 || self.batch_size > 64 {
            return Err(KoopmanError::Config(format!(
                "batch size must lie in 1..=64, got {}",
                self.batch_size
            )));
        }
        if self.grad_orders.is_empty()
            || self.grad_orders.iter().any(|o| !matches!(o, 1 | 2 | 4))
        {
            return Err(KoopmanError::Config(format!(
                "smoothness orders must be a non-empty subset of {{1, 2, 4}}, got {:?}",
                self.grad_orders
            )));
        }
        if self.weights.lambda_gan > 0.0 && self.arch.disc_seq_len < self.n_s_max {
            return Err(KoopmanError::Config(format!(
                "critic is sized for sequences of {} but the curriculum reaches {}",
                self.arch.disc_seq_len, self.n_s_max
            )));
        }
        Ok(())
    }

    /// Apply one `key = value` override; both config files and CLI flags
    /// funnel through here so precedence is purely call order.
    pub fn apply_kv(&mut self, key: &str, value: &str) -> Result<()> {
        let bad = |what: &str| {
            KoopmanError::Config(format!("config key {key}: cannot parse {value:?} as {what}"))
        };
        let as_usize = |v: &str| v.trim().parse::<usize>().map_err(|_| bad("an integer"));
        let as_f64 = |v: &str| v.trim().parse::<f64>().map_err(|_| bad("a number"));
        let as_u64 = |v: &str| v.trim().parse::<u64>().map_err(|_| bad("an integer"));
        let as_list = |v: &str| -> Result<Vec<usize>> {
            v.split(',')
                .map(|p| p.trim().parse::<usize>().map_err(|_| bad("an integer list")))
                .collect()
        };
        match key {
            "iterations" => self.iterations = as_usize(value)?,
            "lr" => self.lr = as_f64(value)?,
            "n_s_initial" => self.n_s_initial = as_usize(value)?,
            "n_s_max" => self.n_s_max = as_usize(value)?,
            "curriculum_every" => self.curriculum_every = as_usize(value)?,
            "curriculum_rate" => self.curriculum_rate = as_f64(value)?,
            "batch_size" => self.batch_size = as_usize(value)?,
            "seed" => self.seed = as_u64(value)?,
            "ckpt_every" => self.ckpt_every = as_usize(value)?,
            "grad_orders" => self.grad_orders = as_list(value)?,
            "lambda_code" => self.weights.lambda_code = as_f64(value)?,
            "lambda_grad" => self.weights.lambda_grad = as_f64(value)?,
            "lambda_reg" => self.weights.lambda_reg = as_f64(value)?,
            "lambda_gan" => self.weights.lambda_gan = as_f64(value)?,
            "lambda_1" => self.weights.lambda_orders[0] = as_f64(value)?,
            "lambda_2" => self.weights.lambda_orders[1] = as_f64(value)?,
            "lambda_4" => self.weights.lambda_orders[2] = as_f64(value)?,
            "mmd_c" => self.weights.mmd_c = as_f64(value)?,
            "gp_weight" => self.weights.gp_weight = as_f64(value)?,
            "gan_sign" => {
                self.weights.gan_sign = match value.trim() {
                    "paper" => GanSign::Paper,
                    "standard" => GanSign::Standard,
                    other => {
                        return Err(KoopmanError::Config(format!(
                            "gan_sign must be `paper` or `standard`, got {other:?}"
                        )))
                    }
                }
            }
            "latent_dim" => self.arch.latent_dim = as_usize(value)?,
            "koopman_form" => {
                self.arch.koopman_form = match value.trim() {
                    "dense" => KoopmanForm::Dense,
                    "tridiagonal" => KoopmanForm::Tridiagonal,
                    other => {
                        return Err(KoopmanError::Config(format!(
                            "koopman_form must be `dense` or `tridiagonal`, got {other:?}"
                        )))
                    }
                }
            }
            "conditioned" => {
                self.arch.conditioned = match value.trim() {
                    "true" => true,
                    "false" => false,
                    other => {
                        return Err(KoopmanError::Config(format!(
                            "conditioned must be `true` or `false`, got {other:?}"
                        )))
                    }
                }
            }
            "enc_widths" => self.arch.enc_widths = as_list(value)?,
            "aux_widths" => self.arch.aux_widths = as_list(value)?,
            "disc_widths" => self.arch.disc_widths = as_list(value)?,
            "disc_seq_len" => self.arch.disc_seq_len = as_usize(value)?,
            "dropout_keep" => self.arch.dropout_keep = as_f64(value)?,
            "leaky_slope" => self.arch.leaky_slope = as_f64(value)?,
            other => {
                return Err(KoopmanError::Config(format!("unknown config key {other:?}")))
            }
        }
        Ok(())
    }

    /// The full configuration as `apply_kv` pairs; applying them onto a
    /// fresh config with the same architecture geometry reproduces `self`.
    pub fn to_kv(&self) -> Vec<(&'static str, String)> {
        let list = |v: &[usize]| {
            v.iter().map(|x| x.to_string()).collect::<Vec<_>>().join(",")
        };
        vec![
            ("iterations", self.iterations.to_string()),
            ("lr", self.lr.to_string()),
            ("n_s_initial", self.n_s_initial.to_string()),
            ("n_s_max", self.n_s_max.to_string()),
            ("curriculum_every", self.curriculum_every.to_string()),
            ("curriculum_rate", self.curriculum_rate.to_string()),
            ("batch_size", self.batch_size.to_string()),
            ("seed", self.seed.to_string()),
            ("ckpt_every", self.ckpt_every.to_string()),
            ("grad_orders", list(&self.grad_orders)),
            ("lambda_code", self.weights.lambda_code.to_string()),
            ("lambda_grad", self.weights.lambda_grad.to_string()),
            ("lambda_reg", self.weights.lambda_reg.to_string()),
            ("lambda_gan", self.weights.lambda_gan.to_string()),
            ("lambda_1", self.weights.lambda_orders[0].to_string()),
            ("lambda_2", self.weights.lambda_orders[1].to_string()),
            ("lambda_4", self.weights.lambda_orders[2].to_string()),
            ("mmd_c", self.weights.mmd_c.to_string()),
            ("gp_weight", self.weights.gp_weight.to_string()),
            (
                "gan_sign",
                match self.weights.gan_sign {
                    GanSign::Paper => "paper".to_string(),
                    GanSign::Standard => "standard".to_string(),
                },
            ),
            ("latent_dim", self.arch.latent_dim.to_string()),
            (
                "koopman_form",
                match self.arch.koopman_form {
                    KoopmanForm::Dense => "dense".to_string(),
                    KoopmanForm::Tridiagonal => "tridiagonal".to_string(),
                },
            ),
            ("conditioned", self.arch.conditioned.to_string()),
            ("enc_widths", list(&self.arch.enc_widths)),
            ("aux_widths", list(&self.arch.aux_widths)),
            ("disc_widths", list(&self.arch.disc_widths)),
            ("disc_seq_len", self.arch.disc_seq_len.to_string()),
            ("dropout_keep", self.arch.dropout_keep.to_string()),
            ("leaky_slope", self.arch.leaky_slope.to_string()),
        ]
    }

    /// Parse a flat `key = value` config file body (`#` comments, blank
    /// lines allowed) on top of the current values.
    pub fn apply_file(&mut self, body: &str) -> Result<()> {
        for (lineno, raw) in body.lines().enumerate() {
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (key, value) = line.split_once('=').ok_or_else(|| {
                KoopmanError::Config(format!(
                    "config line {} is not `key = value`: {raw:?}",
                    lineno + 1
                ))
            })?;
            self.apply_kv(key.trim(), value.trim())?;
        }
        Ok(())
    }
}

/// Curriculum rule: at every interval boundary the horizon becomes
/// min(round(rate · n_S) + 1, n_S_max); rounding is half away from zero.
pub fn curriculum_update(n_s: usize, iteration: usize, cfg: &TrainConfig) -> usize {
    if iteration == 0 || iteration % cfg.curriculum_every != 0 {
        return n_s;
    }
    let grown = (cfg.curriculum_rate * n_s as f64).round() as usize + 1;
    grown.min(cfg.n_s_max)
}

/// The horizon in effect at a given iteration, replayed from the start;
/// the schedule depends on nothing but (iteration, config).
pub fn n_s_at(iteration: usize, cfg: &TrainConfig) -> usize {
    let mut n = cfg.n_s_initial;
    for k in 1..=iteration / cfg.curriculum_every {
        n = curriculum_update(n, k * cfg.curriculum_every, cfg);
    }
    n
}

/// Adam accumulators, one slot per parameter entry, plus per-group step
/// counters for bias correction.
#[derive(Debug, Clone)]
pub struct AdamState {
    pub m: Vec<ArrayD<f64>>,
    pub v: Vec<ArrayD<f64>>,
    pub t_gen: u64,
    pub t_disc: u64,
}

const ADAM_BETA1: f64 = 0.9;
const ADAM_BETA2: f64 = 0.999;
const ADAM_EPS: f64 = 1e-8;

impl AdamState {
    pub fn new(params: &ModelParams) -> Self {
        let m = params.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        let v = params.entries().iter().map(|e| ArrayD::zeros(e.value.raw_dim())).collect();
        AdamState { m, v, t_gen: 0, t_disc: 0 }
    }
}

fn adam_step(
    params: &mut ModelParams,
    opt: &mut AdamState,
    grads: &[Option<ArrayD<f64>>],
    group: ParamGroup,
    lr: f64,
) -> Result<()> {
    let t = match group {
        ParamGroup::Generator => {
            opt.t_gen += 1;
            opt.t_gen
        }
        ParamGroup::Discriminator => {
            opt.t_disc += 1;
            opt.t_disc
        }
    };
    let bc1 = 1.0 - ADAM_BETA1.powi(t as i32);
    let bc2 = 1.0 - ADAM_BETA2.powi(t as i32);
    for (i, entry) in params.entries_mut().iter_mut().enumerate() {
        if entry.group != group {
            continue;
        }
        // A parameter the graph never touched has zero gradient; its
        // moments still decay, matching the usual optimizer semantics.
        let zero = ArrayD::zeros(entry.value.raw_dim());
        let grad = grads[i].as_ref().unwrap_or(&zero);
        if grad.iter().any(|v| !v.is_finite()) {
            return Err(KoopmanError::Numerical(format!(
                "gradient for {} became non-finite",
                entry.name
            )));
        }
        let m = &mut opt.m[i];
        let v = &mut opt.v[i];
        azip_update(m, v, &mut entry.value, grad, lr, bc1, bc2);
    }
    Ok(())
}

fn azip_update(
    m: &mut ArrayD<f64>,
    v: &mut ArrayD<f64>,
    theta: &mut ArrayD<f64>,
    grad: &ArrayD<f64>,
    lr: f64,
    bc1: f64,
    bc2: f64,
) {
    ndarray::Zip::from(theta)
        .and(m)
        .and(v)
        .and(grad)
        .for_each(|t, m, v, &g| {
            *m = ADAM_BETA1 * *m + (1.0 - ADAM_BETA1) * g;
            *v = ADAM_BETA2 * *v + (1.0 - ADAM_BETA2) * g * g;
            let m_hat = *m / bc1;
            let v_hat = *v / bc2;
            *t -= lr * m_hat / (v_hat.sqrt() + ADAM_EPS);
        });
}

/// Everything that must survive a checkpoint to continue bit-identically.
#[derive(Debug, Clone)]
pub struct RunState {
    pub params: ModelParams,
    pub opt: AdamState,
    pub n_s: usize,
    pub iteration: usize,
    pub seed: u64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossReport {
    pub recon: f64,
    pub pred: f64,
    pub code: f64,
    pub grad: f64,
    pub reg: f64,
    pub gan: f64,
    pub total: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct DiscReport {
    pub total: f64,
    pub wasserstein: f64,
    pub gp: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StepReport {
    pub iteration: usize,
    pub n_s: usize,
    pub gen: LossReport,
    pub disc: Option<DiscReport>,
}

impl StepReport {
    /// One stable log line per iteration; absent terms print as zero.
    pub fn log_line(&self) -> String {
        let d = self.disc.unwrap_or(DiscReport { total: 0.0, wasserstein: 0.0, gp: 0.0 });
        format!(
            "{} n_s={} recon={:.12e} pred={:.12e} code={:.12e} grad={:.12e} reg={:.12e} \
             gan={:.12e} total={:.12e} disc={:.12e} wass={:.12e} gp={:.12e}",
            self.iteration,
            self.n_s,
            self.gen.recon,
            self.gen.pred,
            self.gen.code,
            self.gen.grad,
            self.gen.reg,
            self.gen.gan,
            self.gen.total,
            d.total,
            d.wasserstein,
            d.gp
        )
    }
}

/// Stream slots for derived RNGs; each (iteration, slot) pair is its own
/// ChaCha stream so draws never alias across uses.
const SLOT_SAMPLING: u64 = 0;
const SLOT_GEN_NOISE: u64 = 100;
const SLOT_DISC_NOISE: u64 = 200;
const SLOT_ALPHA: u64 = 300;

fn derived_rng(seed: u64, iteration: u64, slot: u64) -> ChaCha8Rng {
    // SplitMix64 finalizer spreads (seed, iteration) into the key; the
    // slot picks the ChaCha stream.
    let mut z = seed ^ iteration.wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^= z >> 31;
    let mut rng = ChaCha8Rng::seed_from_u64(z);
    rng.set_stream(slot);
    rng
}

/// Latent noise for one window forward: one draw for the reconstruction
/// sample, then one per rollout step for the predicted and encoded sides.
#[derive(Clone)]
pub struct NoiseSet {
    pub recon: Array1<f64>,
    pub pred: Vec<Array1<f64>>,
    pub truth: Vec<Array1<f64>>,
}

pub fn draw_noise(m: usize, n_s: usize, rng: &mut ChaCha8Rng) -> NoiseSet {
    NoiseSet {
        recon: latent::standard_normal(m, rng),
        pred: (0..n_s).map(|_| latent::standard_normal(m, rng)).collect(),
        truth: (0..n_s).map(|_| latent::standard_normal(m, rng)).collect(),
    }
}

/// Graph nodes produced by one window forward pass.
pub struct WindowForward {
    /// Window start, original extent.
    pub x0: Var,
    /// Window start, padded.
    pub x0_pad: Var,
    /// The n_S target snapshots, original extent.
    pub targets: Vec<Var>,
    /// The n_S target snapshots, padded.
    pub targets_pad: Vec<Var>,
    /// Decoded reconstruction of x0, original extent.
    pub recon: Var,
    /// Decoded rollout, padded (critic side).
    pub preds_pad: Vec<Var>,
    /// Decoded rollout, original extent (loss side).
    pub preds: Vec<Var>,
    /// Latent samples from encoding each target.
    pub z_true: Vec<Var>,
    /// Latent samples from the rollout states.
    pub z_pred: Vec<Var>,
}

/// Encode, roll out, and decode a batch of windows on one graph. All
/// snapshots across the batch form the batch-normalization batch (one
/// encoder-side and one decoder-side statistics observation per layer into
/// `bn_obs`); dropout for window `w` is driven by `rngs[w]`, so the draw
/// sequence per window does not depend on the batch around it.
pub fn forward_batch(
    g: &mut Graph,
    net: &Net,
    windows: &[&SequenceWindow],
    noises: &[NoiseSet],
    rngs: &mut [ChaCha8Rng],
    bn_obs: &mut Vec<BnObservation>,
) -> Result<Vec<WindowForward>> {
    assert_eq!(windows.len(), noises.len());
    assert_eq!(windows.len(), rngs.len());
    let arch = net.arch;
    let mut conds = Vec::with_capacity(windows.len());
    for w in windows {
        conds.push(if arch.conditioned {
            Some(w.conditioning.ok_or_else(|| {
                KoopmanError::Config("conditioned model trained on an unconditioned corpus".into())
            })?)
        } else {
            None
        });
    }

    // Encoder and decoder share statistics across the whole batch; the
    // operator network is the only dropout site, so it gets the per-window
    // random source instead.
    let mut bn_ctx = FwdCtx { train: true, rng: None, bn_obs: Some(bn_obs) };

    // One encoder batch: every window's start plus all its targets.
    let mut x0s = Vec::with_capacity(windows.len());
    let mut all_targets: Vec<Vec<Var>> = Vec::with_capacity(windows.len());
    let mut all_targets_pad: Vec<Vec<Var>> = Vec::with_capacity(windows.len());
    let mut enc_inputs = Vec::new();
    for w in windows {
        let x0 = g.constant(to_net_layout(&w.x0.view()));
        let x0_pad = net.pad_input(g, x0);
        x0s.push((x0, x0_pad));
        enc_inputs.push(x0_pad);
        let mut targets = Vec::with_capacity(w.targets.len());
        let mut targets_pad = Vec::with_capacity(w.targets.len());
        for t in &w.targets {
            let tv = g.constant(to_net_layout(&t.view()));
            let tp = net.pad_input(g, tv);
            targets.push(tv);
            targets_pad.push(tp);
            enc_inputs.push(tp);
        }
        all_targets.push(targets);
        all_targets_pad.push(targets_pad);
    }
    let mut encoded = net.encode_many(g, enc_inputs, &mut bn_ctx).into_iter();

    // Latent work per window: target samples and the operator rollout.
    let mut per_window: Vec<(Vec<Var>, Vec<Var>)> = Vec::with_capacity(windows.len());
    let mut dec_inputs = Vec::new();
    for (wi, w) in windows.iter().enumerate() {
        let n_s = w.targets.len();
        let (mu0, ls0) = encoded.next().unwrap();
        let state0 = latent::graph::LatentVars { mu: mu0, log_sigma: ls0 };
        let noise = &noises[wi];
        let mut z_true = Vec::with_capacity(n_s);
        for eps in noise.truth.iter().take(n_s) {
            let (mu, ls) = encoded.next().unwrap();
            let st = latent::graph::LatentVars { mu, log_sigma: ls };
            z_true.push(latent::graph::sample(g, st, eps));
        }

        let mut aux_ctx = FwdCtx { train: true, rng: Some(&mut rngs[wi]), bn_obs: None };
        let z0 = latent::graph::sample(g, state0, &noise.recon);
        dec_inputs.push(z0);
        let mut z_pred = Vec::with_capacity(n_s);
        let mut state = state0;
        for l in 0..n_s {
            let packed = net.aux(g, state.mu, state.log_sigma, conds[wi], &mut aux_ctx);
            let pair = latent::graph::unpack_pair(g, packed, arch.koopman_form, arch.latent_dim);
            state = latent::graph::koopman_step(g, state, pair);
            let z = latent::graph::sample(g, state, &noise.pred[l]);
            z_pred.push(z);
            dec_inputs.push(z);
        }
        per_window.push((z_true, z_pred));
    }

    // One decoder batch: every window's reconstruction and predictions.
    let mut decoded = net.decode_many(g, dec_inputs, &mut bn_ctx).into_iter();
    let mut out = Vec::with_capacity(windows.len());
    for (wi, w) in windows.iter().enumerate() {
        let n_s = w.targets.len();
        let (z_true, z_pred) = std::mem::take(&mut per_window[wi]);
        let recon_pad = decoded.next().unwrap();
        let recon = net.crop_output(g, recon_pad);
        let mut preds_pad = Vec::with_capacity(n_s);
        let mut preds = Vec::with_capacity(n_s);
        for _ in 0..n_s {
            let p = decoded.next().unwrap();
            preds_pad.push(p);
            preds.push(net.crop_output(g, p));
        }
        let (x0, x0_pad) = x0s[wi];
        out.push(WindowForward {
            x0,
            x0_pad,
            targets: std::mem::take(&mut all_targets[wi]),
            targets_pad: std::mem::take(&mut all_targets_pad[wi]),
            recon,
            preds_pad,
            preds,
            z_true,
            z_pred,
        });
    }
    Ok(out)
}

/// Single-window forward: the window's own snapshots form the statistics
/// batch. The training path batches across windows via [`forward_batch`].
pub fn forward_window(
    g: &mut Graph,
    net: &Net,
    window: &SequenceWindow,
    noise: &NoiseSet,
    rng: &mut ChaCha8Rng,
    bn_obs: &mut Vec<BnObservation>,
) -> Result<WindowForward> {
    let mut rngs = [rng.clone()];
    let fwd = forward_batch(g, net, &[window], &[noise.clone()], &mut rngs, bn_obs)?;
    *rng = rngs.into_iter().next().unwrap();
    Ok(fwd.into_iter().next().unwrap())
}

/// Named graph nodes of the generator objective for one update.
pub struct GenLossNodes {
    pub parts: GeneratorParts,
    pub total: Var,
    pub report: LossReport,
}

/// Assemble the full generator objective over a batch of forwarded windows.
/// Reconstruction, prediction, gradient, and adversarial terms are averaged
/// across windows; the distribution term pools every window's encoded and
/// rollout samples into one pair of clouds, so it estimates the discrepancy
/// between the encoder pushforward and the rollout pushforward with all
/// samples the iteration has. On a single window this reduces to the
/// per-window objective. The critic, when consulted, is whatever binding
/// `net` carries; in a generator update it enters as constants so only
/// generator parameters receive gradients.
pub fn generator_batch_loss(
    g: &mut Graph,
    net: &Net,
    fwds: &[WindowForward],
    weights: &LossWeights,
    grad_orders: &[usize],
) -> Result<GenLossNodes> {
    assert!(!fwds.is_empty());
    let mut recon_terms = Vec::with_capacity(fwds.len());
    let mut pred_terms = Vec::with_capacity(fwds.len());
    let mut grad_terms = Vec::with_capacity(fwds.len());
    let mut gan_terms = Vec::with_capacity(fwds.len());
    let mut z_true = Vec::new();
    let mut z_pred = Vec::new();
    for fwd in fwds {
        let n_s = fwd.targets.len();
        recon_terms.push(losses::recon_loss(g, fwd.x0, fwd.recon)?);
        pred_terms.push(losses::pred_loss(g, &fwd.targets, &fwd.preds)?);
        grad_terms.push(losses::grad_loss(g, &fwd.targets, &fwd.preds, grad_orders, weights)?);
        if weights.lambda_gan > 0.0 {
            let mut inputs = vec![fwd.x0_pad];
            inputs.extend_from_slice(&fwd.targets_pad[..n_s - 1]);
            let fake = net.critic_input(g, &inputs, &fwd.preds_pad);
            let mut ctx = FwdCtx::eval();
            let score = net.discriminate(g, fake, &mut ctx);
            gan_terms.push(score);
        }
        z_true.extend_from_slice(&fwd.z_true);
        z_pred.extend_from_slice(&fwd.z_pred);
    }
    let recon = nn::mean_of(g, &recon_terms);
    let pred = nn::mean_of(g, &pred_terms);
    let grad = nn::mean_of(g, &grad_terms);
    let code = if z_true.len() >= 2 {
        Some(losses::mmd_code_loss(g, &z_true, &z_pred, weights.mmd_c)?)
    } else {
        None
    };
    let reg = losses::weight_penalty(g, net);
    let gan = if gan_terms.is_empty() {
        None
    } else {
        Some(losses::gan_generator_term(g, &gan_terms, weights.gan_sign)?)
    };
    let parts = GeneratorParts { recon, pred, code, grad, reg, gan };
    let total = losses::total_generator_loss(g, &parts, weights)?;
    let report = LossReport {
        recon: g.scalar(recon),
        pred: g.scalar(pred),
        code: code.map_or(0.0, |c| g.scalar(c)),
        grad: g.scalar(grad),
        reg: g.scalar(reg),
        gan: gan.map_or(0.0, |v| g.scalar(v)),
        total: g.scalar(total),
    };
    Ok(GenLossNodes { parts, total, report })
}

/// Single-window generator objective; see [`generator_batch_loss`].
pub fn generator_window_loss(
    g: &mut Graph,
    net: &Net,
    fwd: &WindowForward,
    weights: &LossWeights,
    grad_orders: &[usize],
) -> Result<GenLossNodes> {
    generator_batch_loss(g, net, std::slice::from_ref(fwd), weights, grad_orders)
}

/// Assemble the critic objective on one window: real pair vs decoded
/// rollout pair plus one gradient penalty at a random interpolate.
pub fn critic_window_loss(
    g: &mut Graph,
    net: &Net,
    fwd: &WindowForward,
    weights: &LossWeights,
    alpha: f64,
    bn_obs: &mut Vec<BnObservation>,
) -> Result<(Var, DiscReport)> {
    let n_s = fwd.targets.len();
    let mut inputs = vec![fwd.x0_pad];
    inputs.extend_from_slice(&fwd.targets_pad[..n_s - 1]);
    let real = net.critic_input(g, &inputs, &fwd.targets_pad);
    let fake = net.critic_input(g, &inputs, &fwd.preds_pad);

    let real_score = {
        let mut ctx = FwdCtx { train: true, rng: None, bn_obs: Some(bn_obs) };
        net.discriminate(g, real, &mut ctx)
    };
    let fake_score = {
        let mut ctx = FwdCtx { train: true, rng: None, bn_obs: Some(bn_obs) };
        net.discriminate(g, fake, &mut ctx)
    };

    let interpolate = g.value(real).mapv(|v| alpha * v)
        + g.value(fake).mapv(|v| (1.0 - alpha) * v);
    let gp = losses::gradient_penalty(g, interpolate, |g, x| {
        let mut ctx = FwdCtx { train: true, rng: None, bn_obs: None };
        net.discriminate(g, x, &mut ctx)
    })?;
    let loss = losses::critic_loss(g, &[real_score], &[fake_score], &[gp], weights.gp_weight)?;
    let total = g.scalar(loss);
    if !total.is_finite() {
        return Err(KoopmanError::Numerical(format!(
            "critic loss became non-finite ({total})"
        )));
    }
    let report = DiscReport {
        total,
        wasserstein: g.scalar(fake_score) - g.scalar(real_score),
        gp: g.scalar(gp),
    };
    Ok((loss, report))
}

pub struct Trainer {
    pub cfg: TrainConfig,
    corpora: Vec<SnapshotCorpus>,
    pub state: RunState,
}

impl Trainer {
    pub fn new(cfg: TrainConfig, corpora: Vec<SnapshotCorpus>) -> Result<Self> {
        cfg.validate()?;
        Self::check_corpora(&cfg, &corpora)?;
        let params = ModelParams::init(&cfg.arch, cfg.seed)?;
        let opt = AdamState::new(&params);
        let state = RunState {
            opt,
            n_s: cfg.n_s_initial,
            iteration: 0,
            seed: cfg.seed,
            params,
        };
        Ok(Trainer { cfg, corpora, state })
    }

    /// Continue from a checkpointed state (resume path).
    pub fn from_state(
        cfg: TrainConfig,
        corpora: Vec<SnapshotCorpus>,
        state: RunState,
    ) -> Result<Self> {
        cfg.validate()?;
        Self::check_corpora(&cfg, &corpora)?;
        if state.params.entries().len() != state.opt.m.len() {
            return Err(KoopmanError::Config(
                "optimizer state does not match the parameter table".into(),
            ));
        }
        Ok(Trainer { cfg, corpora, state })
    }

    fn check_corpora(cfg: &TrainConfig, corpora: &[SnapshotCorpus]) -> Result<()> {
        if corpora.is_empty() {
            return Err(KoopmanError::Config("training needs at least one corpus".into()));
        }
        if corpora.len() > 1 && !cfg.arch.conditioned {
            return Err(KoopmanError::Config(
                "multiple corpora require a conditioned architecture".into(),
            ));
        }
        for c in corpora {
            if c.normalization.is_none() {
                return Err(KoopmanError::Config(
                    "training expects normalized corpora; convert them first".into(),
                ));
            }
            if c.spatial_dims() != cfg.arch.input_shape.as_slice()
                || c.channels() != cfg.arch.input_channels
            {
                return Err(KoopmanError::Config(format!(
                    "corpus geometry {:?} x {} channels does not match the architecture {:?} x {}",
                    c.spatial_dims(),
                    c.channels(),
                    cfg.arch.input_shape,
                    cfg.arch.input_channels
                )));
            }
            if c.t_len() < cfg.n_s_max + 1 {
                return Err(KoopmanError::Config(format!(
                    "corpus of {} snapshots cannot host windows of n_s_max + 1 = {}",
                    c.t_len(),
                    cfg.n_s_max + 1
                )));
            }
            if cfg.arch.conditioned && c.conditioning.is_none() {
                return Err(KoopmanError::Config(
                    "conditioned training needs a conditioning value on every corpus".into(),
                ));
            }
        }
        Ok(())
    }

    /// Sample the iteration's batch; the corpus choice (uniform over
    /// conditioning values) and window starts all come from one stream.
    pub fn sample_batch(&self, iteration: usize) -> Result<Vec<(usize, SequenceWindow)>> {
        let mut rng = derived_rng(self.state.seed, iteration as u64, SLOT_SAMPLING);
        let mut batch = Vec::with_capacity(self.cfg.batch_size);
        for _ in 0..self.cfg.batch_size {
            let idx = if self.corpora.len() > 1 {
                rng.gen_range(0..self.corpora.len())
            } else {
                0
            };
            let window = self.corpora[idx].sample_window(self.state.n_s, &mut rng)?;
            batch.push((idx, window));
        }
        Ok(batch)
    }

    /// One full iteration: curriculum tick, generator update, and (with
    /// adversarial training on) one critic update on the same windows.
    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        self.state.n_s = curriculum_update(self.state.n_s, it, &self.cfg);
        let batch = self.sample_batch(it)?;

        let gen = self.generator_step(it, &batch)?;
        let disc = if self.cfg.weights.lambda_gan > 0.0 {
            Some(self.discriminator_step(it, &batch)?)
        } else {
            None
        };

        self.state.iteration += 1;
        Ok(StepReport { iteration: it, n_s: self.state.n_s, gen, disc })
    }

    /// One generator update on the given batch: forward all windows on one
    /// graph (so batch normalization sees the whole minibatch), assemble the
    /// batch objective, and apply Adam to the generator group only. Exposed
    /// so a harness can interleave and instrument the two updates;
    /// [`step`](Self::step) is the normal driver.
    pub fn generator_step(
        &mut self,
        iteration: usize,
        batch: &[(usize, SequenceWindow)],
    ) -> Result<LossReport> {
        let n_entries = self.state.params.entries().len();
        let mut grad_sum: Vec<Option<ArrayD<f64>>> = vec![None; n_entries];

        let mut rngs = Vec::with_capacity(batch.len());
        let mut noises = Vec::with_capacity(batch.len());
        for (slot, (_, window)) in batch.iter().enumerate() {
            let mut rng =
                derived_rng(self.state.seed, iteration as u64, SLOT_GEN_NOISE + slot as u64);
            noises.push(draw_noise(self.cfg.arch.latent_dim, window.targets.len(), &mut rng));
            rngs.push(rng);
        }

        let mut g = Graph::new();
        let vars = self.state.params.bind(&mut g, Some(ParamGroup::Generator));
        let net = Net::new(&self.cfg.arch, &self.state.params, &vars);
        let mut bn_obs = Vec::new();
        let windows: Vec<&SequenceWindow> = batch.iter().map(|(_, w)| w).collect();
        let fwds = forward_batch(&mut g, &net, &windows, &noises, &mut rngs, &mut bn_obs)?;

        let nodes =
            generator_batch_loss(&mut g, &net, &fwds, &self.cfg.weights, &self.cfg.grad_orders)?;
        let objective = nodes.total;

        let gen_vars: Vec<Var> = vars
            .iter()
            .zip(self.state.params.entries())
            .filter(|(_, e)| e.group == ParamGroup::Generator)
            .map(|(&v, _)| v)
            .collect();
        let grads = g.backward(objective, &gen_vars);
        let mut gi = 0;
        for (i, e) in self.state.params.entries().iter().enumerate() {
            if e.group != ParamGroup::Generator {
                continue;
            }
            if let Some(gv) = grads[gi] {
                grad_sum[i] = Some(g.value(gv).to_owned());
            }
            gi += 1;
        }

        adam_step(
            &mut self.state.params,
            &mut self.state.opt,
            &grad_sum,
            ParamGroup::Generator,
            self.cfg.lr,
        )?;
        let gen_obs: Vec<BnObservation> = bn_obs
            .into_iter()
            .filter(|o| !o.name.starts_with("disc."))
            .collect();
        self.state.params.update_bn(&gen_obs);
        Ok(nodes.report)
    }

    /// One critic update on the same batch: rollout on one graph with
    /// generator parameters held constant, Wasserstein estimate plus
    /// gradient penalty per window, Adam on the discriminator group only.
    pub fn discriminator_step(
        &mut self,
        iteration: usize,
        batch: &[(usize, SequenceWindow)],
    ) -> Result<DiscReport> {
        let n_entries = self.state.params.entries().len();
        let mut grad_sum: Vec<Option<ArrayD<f64>>> = vec![None; n_entries];
        let mut totals = DiscReport { total: 0.0, wasserstein: 0.0, gp: 0.0 };
        let scale = 1.0 / batch.len() as f64;

        let mut rngs = Vec::with_capacity(batch.len());
        let mut noises = Vec::with_capacity(batch.len());
        let mut alphas = Vec::with_capacity(batch.len());
        for (slot, (_, window)) in batch.iter().enumerate() {
            let mut rng =
                derived_rng(self.state.seed, iteration as u64, SLOT_DISC_NOISE + slot as u64);
            noises.push(draw_noise(self.cfg.arch.latent_dim, window.targets.len(), &mut rng));
            rngs.push(rng);
            alphas.push(
                derived_rng(self.state.seed, iteration as u64, SLOT_ALPHA + slot as u64)
                    .gen_range(0.0..1.0),
            );
        }

        let mut g = Graph::new();
        let vars = self.state.params.bind(&mut g, Some(ParamGroup::Discriminator));
        let net = Net::new(&self.cfg.arch, &self.state.params, &vars);
        let mut bn_obs = Vec::new();
        let windows: Vec<&SequenceWindow> = batch.iter().map(|(_, w)| w).collect();
        let fwds = forward_batch(&mut g, &net, &windows, &noises, &mut rngs, &mut bn_obs)?;
        // The rollout ran with generator parameters as constants; only the
        // critic's observations may touch its running statistics.
        bn_obs.clear();

        let mut losses = Vec::with_capacity(batch.len());
        for (slot, fwd) in fwds.iter().enumerate() {
            let (loss, report) =
                critic_window_loss(&mut g, &net, fwd, &self.cfg.weights, alphas[slot], &mut bn_obs)?;
            totals.total += report.total * scale;
            totals.wasserstein += report.wasserstein * scale;
            totals.gp += report.gp * scale;
            losses.push(loss);
        }
        let mut sum = losses[0];
        for &l in &losses[1..] {
            sum = g.add(sum, l);
        }
        let objective = g.scale(sum, scale);

        let disc_vars: Vec<Var> = vars
            .iter()
            .zip(self.state.params.entries())
            .filter(|(_, e)| e.group == ParamGroup::Discriminator)
            .map(|(&v, _)| v)
            .collect();
        let grads = g.backward(objective, &disc_vars);
        let mut gi = 0;
        for (i, e) in self.state.params.entries().iter().enumerate() {
            if e.group != ParamGroup::Discriminator {
                continue;
            }
            if let Some(gv) = grads[gi] {
                grad_sum[i] = Some(g.value(gv).to_owned());
            }
            gi += 1;
        }

        adam_step(
            &mut self.state.params,
            &mut self.state.opt,
            &grad_sum,
            ParamGroup::Discriminator,
            self.cfg.lr,
        )?;
        let disc_obs: Vec<BnObservation> = bn_obs
            .into_iter()
            .filter(|o| o.name.starts_with("disc."))
            .collect();
        self.state.params.update_bn(&disc_obs);
        Ok(totals)
    }
}

/// Drive a trainer to `cfg.iterations`, writing one log line per step and
/// checkpointing into `ckpt_dir` when given.
pub fn run_loop(
    trainer: &mut Trainer,
    log: &mut dyn Write,
    ckpt_dir: Option<&Path>,
) -> Result<()> {
    while trainer.state.iteration < trainer.cfg.iterations {
        let report = trainer.step()?;
        writeln!(log, "{}", report.log_line())?;
        let done = trainer.state.iteration;
        if let Some(dir) = ckpt_dir {
            let every = trainer.cfg.ckpt_every;
            if every > 0 && done % every == 0 && done < trainer.cfg.iterations {
                save_checkpoint(&dir.join(format!("ckpt_{done}")), &trainer.cfg, &trainer.state)?;
            }
        }
    }
    if let Some(dir) = ckpt_dir {
        save_checkpoint(&dir.join("ckpt_final"), &trainer.cfg, &trainer.state)?;
    }
    Ok(())
}

// ---- checkpoint container ----

const CKPT_MAGIC: &[u8] = b"koopman-checkpoint v1\n";

#[derive(Serialize, Deserialize)]
struct EntryMeta {
    name: String,
    shape: Vec<usize>,
    kind: crate::networks::ParamKind,
    group: ParamGroup,
}

#[derive(Serialize, Deserialize)]
struct BnMeta {
    name: String,
    len: usize,
}

#[derive(Serialize, Deserialize)]
struct CkptHeader {
    arch: ArchConfig,
    weights: LossWeights,
    iteration: usize,
    n_s: usize,
    seed: u64,
    t_gen: u64,
    t_disc: u64,
    entries: Vec<EntryMeta>,
    bn: Vec<BnMeta>,
}

/// Checkpoint when loaded: enough to evaluate or to resume training.
pub struct LoadedCheckpoint {
    pub arch: ArchConfig,
    pub weights: LossWeights,
    pub state: RunState,
}

fn write_blob(out: &mut Vec<u8>, data: &ArrayD<f64>) {
    for &v in data.iter() {
        out.extend_from_slice(&v.to_le_bytes());
    }
}

fn read_blob(bytes: &[u8], pos: &mut usize, n: usize) -> Result<Vec<f64>> {
    let need = n * 8;
    if *pos + need > bytes.len() {
        return Err(KoopmanError::Data("checkpoint truncated mid-blob".into()));
    }
    let out = bytes[*pos..*pos + need]
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().unwrap()))
        .collect();
    *pos += need;
    Ok(out)
}

pub fn save_checkpoint(path: &Path, cfg: &TrainConfig, state: &RunState) -> Result<()> {
    let header = CkptHeader {
        arch: cfg.arch.clone(),
        weights: cfg.weights,
        iteration: state.iteration,
        n_s: state.n_s,
        seed: state.seed,
        t_gen: state.opt.t_gen,
        t_disc: state.opt.t_disc,
        entries: state
            .params
            .entries()
            .iter()
            .map(|e| EntryMeta {
                name: e.name.clone(),
                shape: e.value.shape().to_vec(),
                kind: e.kind,
                group: e.group,
            })
            .collect(),
        bn: state
            .params
            .bn_layers()
            .iter()
            .map(|b| BnMeta { name: b.name.clone(), len: b.mean.len() })
            .collect(),
    };
    let header_json = serde_json::to_vec(&header)
        .map_err(|e| KoopmanError::Data(format!("cannot encode checkpoint header: {e}")))?;
    let mut out = Vec::with_capacity(header_json.len() + 1024);
    out.extend_from_slice(CKPT_MAGIC);
    out.extend_from_slice(&(header_json.len() as u64).to_le_bytes());
    out.extend_from_slice(&header_json);
    for (i, e) in state.params.entries().iter().enumerate() {
        write_blob(&mut out, &e.value);
        write_blob(&mut out, &state.opt.m[i]);
        write_blob(&mut out, &state.opt.v[i]);
    }
    for b in state.params.bn_layers() {
        write_blob(&mut out, &b.mean.clone().into_dyn());
        write_blob(&mut out, &b.var.clone().into_dyn());
    }
    std::fs::write(path, out)?;
    Ok(())
}

pub fn load_checkpoint(path: &Path) -> Result<LoadedCheckpoint> {
    let bytes = std::fs::read(path)?;
    if !bytes.starts_with(CKPT_MAGIC) {
        return Err(KoopmanError::Data(format!(
            "{} is not a checkpoint file",
            path.display()
        )));
    }
    let mut pos = CKPT_MAGIC.len();
    if pos + 8 > bytes.len() {
        return Err(KoopmanError::Data("checkpoint truncated in header length".into()));
    }
    let hlen = u64::from_le_bytes(bytes[pos..pos + 8].try_into().unwrap()) as usize;
    pos += 8;
    if pos + hlen > bytes.len() {
        return Err(KoopmanError::Data("checkpoint truncated in header".into()));
    }
    let header: CkptHeader = serde_json::from_slice(&bytes[pos..pos + hlen])
        .map_err(|e| KoopmanError::Data(format!("corrupt checkpoint header: {e}")))?;
    pos += hlen;

    let mut entries = Vec::with_capacity(header.entries.len());
    let mut m = Vec::with_capacity(header.entries.len());
    let mut v = Vec::with_capacity(header.entries.len());
    for meta in &header.entries {
        let n: usize = meta.shape.iter().product();
        let dim = ndarray::IxDyn(&meta.shape);
        let value = ArrayD::from_shape_vec(dim.clone(), read_blob(&bytes, &mut pos, n)?)
            .map_err(|e| KoopmanError::Data(format!("bad blob shape: {e}")))?;
        let mm = ArrayD::from_shape_vec(dim.clone(), read_blob(&bytes, &mut pos, n)?).unwrap();
        let vv = ArrayD::from_shape_vec(dim, read_blob(&bytes, &mut pos, n)?).unwrap();
        entries.push(crate::networks::ParamEntry {
            name: meta.name.clone(),
            value,
            kind: meta.kind,
            group: meta.group,
        });
        m.push(mm);
        v.push(vv);
    }
    let mut bn = Vec::with_capacity(header.bn.len());
    for meta in &header.bn {
        let mean = Array1::from_vec(read_blob(&bytes, &mut pos, meta.len)?);
        let var = Array1::from_vec(read_blob(&bytes, &mut pos, meta.len)?);
        bn.push(crate::networks::BnRunning { name: meta.name.clone(), mean, var });
    }
    if pos != bytes.len() {
        return Err(KoopmanError::Data(format!(
            "checkpoint has {} trailing bytes",
            bytes.len() - pos
        )));
    }
    let params = ModelParams::from_parts(entries, bn)?;
    // Cross-check the stored layout against a fresh initialization of the
    // same architecture; a mismatch means the file does not belong to
    // this build's parameter layout.
    let reference = ModelParams::init(&header.arch, 0)?;
    if reference.entries().len() != params.entries().len()
        || reference
            .entries()
            .iter()
            .zip(params.entries())
            .any(|(a, b)| a.name != b.name || a.value.shape() != b.value.shape())
    {
        return Err(KoopmanError::Data(
            "checkpoint parameter table does not match its architecture".into(),
        ));
    }
    Ok(LoadedCheckpoint {
        arch: header.arch,
        weights: header.weights,
        state: RunState {
            opt: AdamState { m, v, t_gen: header.t_gen, t_disc: header.t_disc },
            n_s: header.n_s,
            iteration: header.iteration,
            seed: header.seed,
            params,
        },
    })
}

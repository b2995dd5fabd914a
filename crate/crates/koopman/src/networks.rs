//! Network architectures and their parameter store.
//!
//! Four networks share one parameter table:
//!
//! * **Encoder**: a stack of strided residual convolution stages. Each
//!   stage halves every spatial dimension with a stride-2 conv(3) to width
//!   N_f, then adds a bottleneck branch (BN, Relu, conv(1) to N_f/2, BN,
//!   Relu, conv(3) at N_f/2, BN, Relu, conv(1) back to N_f). A final Relu,
//!   flatten, and two dense heads produce the latent mean and
//!   log-standard-deviation, each of dimension M.
//! * **Decoder**: dense from the latent sample to the flattened core, then
//!   the mirror image of the encoder built from transposed convolutions:
//!   per stage a stride-1 bottleneck at the incoming channel count
//!   followed by a stride-2 deconv(3) that doubles every spatial dimension.
//!   The last deconv maps straight to the physical channels with no
//!   activation; outputs live in the normalized data range.
//! * **Auxiliary operator network**: dense Relu stack with inverted
//!   dropout that maps the latent statistics (and an optional conditioning
//!   scalar) to the packed entries of the two Koopman matrices. Its final
//!   layer is zero-initialized so training starts from identity dynamics.
//! * **Critic**: strided conv(5) stack with LeakyRelu (BN from the second
//!   stage on) over channel-stacked snapshot pairs, flattened into a
//!   single score.
//!
//! All convolutions use stride-respecting same padding, so spatial sizes
//! follow ceil(n/2) per stage; inputs are zero-padded up front to a
//! multiple of 2^(stage count) and decoder outputs cropped back, which
//! keeps the encoder/decoder spatial bookkeeping exact.

use crate::error::{KoopmanError, Result};
use crate::latent::KoopmanForm;
use autodiff::{nn, Graph, Var};
use ndarray::{Array1, ArrayD, IxDyn};
use rand::Rng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;

/// Batch-normalization variance floor.
pub const BN_EPS: f64 = 1e-3;
/// Exponential factor for batch-normalization running statistics.
pub const BN_MOMENTUM: f64 = 0.99;

fn default_enc_widths() -> Vec<usize> {
    vec![64, 128, 256, 512, 512]
}
fn default_aux_widths() -> Vec<usize> {
    vec![128, 256, 512]
}
fn default_disc_widths() -> Vec<usize> {
    vec![64, 128, 256, 512]
}
fn default_latent_dim() -> usize {
    64
}
fn default_koopman_form() -> KoopmanForm {
    KoopmanForm::Tridiagonal
}
fn default_dropout_keep() -> f64 {
    0.8
}
fn default_leaky_slope() -> f64 {
    0.2
}
fn default_disc_seq_len() -> usize {
    1
}
fn default_false() -> bool {
    false
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    /// Latent dimension M.
    #[serde(default = "default_latent_dim")]
    pub latent_dim: usize,
    /// Spatial extent of one snapshot, rank 1 or 2.
    pub input_shape: Vec<usize>,
    /// Physical channels per snapshot.
    pub input_channels: usize,
    #[serde(default = "default_koopman_form")]
    pub koopman_form: KoopmanForm,
    /// Whether the operator network receives a conditioning scalar.
    #[serde(default = "default_false")]
    pub conditioned: bool,
    #[serde(default = "default_enc_widths")]
    pub enc_widths: Vec<usize>,
    #[serde(default = "default_aux_widths")]
    pub aux_widths: Vec<usize>,
    #[serde(default = "default_disc_widths")]
    pub disc_widths: Vec<usize>,
    /// Longest snapshot sequence the critic is sized for; shorter
    /// sequences are zero-padded along the channel axis.
    #[serde(default = "default_disc_seq_len")]
    pub disc_seq_len: usize,
    #[serde(default = "default_dropout_keep")]
    pub dropout_keep: f64,
    #[serde(default = "default_leaky_slope")]
    pub leaky_slope: f64,
}

impl ArchConfig {
    /// Contract-default architecture for a given snapshot geometry.
    pub fn new(input_shape: Vec<usize>, input_channels: usize) -> Self {
        ArchConfig {
            latent_dim: default_latent_dim(),
            input_shape,
            input_channels,
            koopman_form: default_koopman_form(),
            conditioned: false,
            enc_widths: default_enc_widths(),
            aux_widths: default_aux_widths(),
            disc_widths: default_disc_widths(),
            disc_seq_len: default_disc_seq_len(),
            dropout_keep: default_dropout_keep(),
            leaky_slope: default_leaky_slope(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let rank = self.input_shape.len();
        if rank != 1 && rank != 2 {
            return Err(KoopmanError::Config(format!(
                "snapshots must have 1 or 2 spatial dimensions, got {rank}"
            )));
        }
        if self.input_shape.iter().any(|&d| d == 0) || self.input_channels == 0 {
            return Err(KoopmanError::Config("snapshot extents must be positive".into()));
        }
        if self.latent_dim < 2 {
            return Err(KoopmanError::Config("latent dimension must be at least 2".into()));
        }
        if self.enc_widths.is_empty() || self.aux_widths.is_empty() || self.disc_widths.is_empty()
        {
            return Err(KoopmanError::Config("network width lists must be non-empty".into()));
        }
        // Bottleneck branches run at half width, so stage widths are even.
        if self.enc_widths.iter().any(|&w| w < 2 || w % 2 != 0) {
            return Err(KoopmanError::Config(format!(
                "encoder stage widths must be even and at least 2, got {:?}",
                self.enc_widths
            )));
        }
        if self.disc_seq_len == 0 {
            return Err(KoopmanError::Config("critic sequence length must be at least 1".into()));
        }
        if !(0.0 < self.dropout_keep && self.dropout_keep <= 1.0) {
            return Err(KoopmanError::Config(format!(
                "dropout keep probability must lie in (0, 1], got {}",
                self.dropout_keep
            )));
        }
        Ok(())
    }

    pub fn spatial_rank(&self) -> usize {
        self.input_shape.len()
    }

    pub fn n_stages(&self) -> usize {
        self.enc_widths.len()
    }

    /// Every spatial dimension is padded to a multiple of this before
    /// encoding, so each stride-2 stage halves it exactly.
    pub fn pad_multiple(&self) -> usize {
        1 << self.n_stages()
    }

    pub fn padded_shape(&self) -> Vec<usize> {
        let m = self.pad_multiple();
        self.input_shape.iter().map(|&d| d.div_ceil(m) * m).collect()
    }

    /// Spatial extent of the encoder output / decoder input.
    pub fn core_shape(&self) -> Vec<usize> {
        self.padded_shape().iter().map(|&d| d >> self.n_stages()).collect()
    }

    /// Flattened width between the convolutional stack and the dense heads.
    pub fn flat_len(&self) -> usize {
        let w = *self.enc_widths.last().unwrap();
        w * self.core_shape().iter().product::<usize>()
    }

    /// Free entries in one packed Koopman matrix.
    pub fn n_dec(&self) -> usize {
        self.koopman_form.param_count(self.latent_dim)
    }

    pub fn aux_in_width(&self) -> usize {
        2 * self.latent_dim + usize::from(self.conditioned)
    }

    /// Channel count the critic expects: a sequence of up to
    /// `disc_seq_len` snapshots stacked with its one-step-shifted copy.
    pub fn disc_in_channels(&self) -> usize {
        2 * self.disc_seq_len * self.input_channels
    }

    /// Decoder stage output channels: the reversed encoder widths shifted
    /// by one, ending on the physical channel count.
    pub fn dec_out_channels(&self) -> Vec<usize> {
        let mut rev: Vec<usize> = self.enc_widths.iter().rev().copied().collect();
        rev.remove(0);
        rev.push(self.input_channels);
        rev
    }

    fn disc_flat_len(&self) -> usize {
        let mut dims = self.padded_shape();
        for _ in &self.disc_widths {
            for d in dims.iter_mut() {
                *d = d.div_ceil(2);
            }
        }
        self.disc_widths.last().unwrap() * dims.iter().product::<usize>()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamKind {
    Kernel,
    Bias,
    BnScale,
    BnShift,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ParamGroup {
    Generator,
    Discriminator,
}

#[derive(Debug, Clone)]
pub struct ParamEntry {
    pub name: String,
    pub value: ArrayD<f64>,
    pub kind: ParamKind,
    pub group: ParamGroup,
}

/// Frozen batch-normalization statistics, one record per BN layer.
#[derive(Debug, Clone)]
pub struct BnRunning {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// Batch statistics observed during one training forward pass.
#[derive(Debug, Clone)]
pub struct BnObservation {
    pub name: String,
    pub mean: Array1<f64>,
    pub var: Array1<f64>,
}

/// All learnable parameters plus BN running statistics, in a fixed order
/// that the optimizer state and checkpoints rely on.
#[derive(Debug, Clone)]
pub struct ModelParams {
    entries: Vec<ParamEntry>,
    index: BTreeMap<String, usize>,
    bn: Vec<BnRunning>,
    bn_index: BTreeMap<String, usize>,
}

/// Draw from N(0, std²) rejected outside two standard deviations.
fn trunc_normal(rng: &mut ChaCha8Rng, std: f64) -> f64 {
    loop {
        let u1: f64 = rng.gen_range(f64::MIN_POSITIVE..1.0);
        let u2: f64 = rng.gen_range(0.0..1.0);
        let z = (-2.0 * u1.ln()).sqrt() * (2.0 * std::f64::consts::PI * u2).cos();
        if z.abs() <= 2.0 {
            return z * std;
        }
    }
}

struct ParamBuilder {
    entries: Vec<ParamEntry>,
    bn: Vec<BnRunning>,
    rng: ChaCha8Rng,
}

impl ParamBuilder {
    fn kernel(&mut self, name: &str, group: ParamGroup, shape: &[usize], fan_in: usize) {
        let std = 1.0 / (fan_in.max(1) as f64).sqrt();
        let n: usize = shape.iter().product();
        let data: Vec<f64> = (0..n).map(|_| trunc_normal(&mut self.rng, std)).collect();
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: ArrayD::from_shape_vec(IxDyn(shape), data).unwrap(),
            kind: ParamKind::Kernel,
            group,
        });
    }

    fn zero_kernel(&mut self, name: &str, group: ParamGroup, shape: &[usize]) {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: ArrayD::zeros(IxDyn(shape)),
            kind: ParamKind::Kernel,
            group,
        });
    }

    fn bias(&mut self, name: &str, group: ParamGroup, n: usize) {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: ArrayD::zeros(IxDyn(&[n])),
            kind: ParamKind::Bias,
            group,
        });
    }

    fn const_bias(&mut self, name: &str, group: ParamGroup, n: usize, v: f64) {
        self.entries.push(ParamEntry {
            name: name.to_string(),
            value: ArrayD::from_elem(IxDyn(&[n]), v),
            kind: ParamKind::Bias,
            group,
        });
    }

    fn bn(&mut self, name: &str, group: ParamGroup, c: usize) {
        self.entries.push(ParamEntry {
            name: format!("{name}.scale"),
            value: ArrayD::from_elem(IxDyn(&[c]), 1.0),
            kind: ParamKind::BnScale,
            group,
        });
        self.entries.push(ParamEntry {
            name: format!("{name}.shift"),
            value: ArrayD::zeros(IxDyn(&[c])),
            kind: ParamKind::BnShift,
            group,
        });
        self.bn.push(BnRunning {
            name: name.to_string(),
            mean: Array1::zeros(c),
            var: Array1::ones(c),
        });
    }
}

impl ModelParams {
    /// Rebuild a parameter table from stored entries (checkpoint load);
    /// names must be unique.
    pub fn from_parts(entries: Vec<ParamEntry>, bn: Vec<BnRunning>) -> Result<ModelParams> {
        let mut index = BTreeMap::new();
        for (i, e) in entries.iter().enumerate() {
            if index.insert(e.name.clone(), i).is_some() {
                return Err(KoopmanError::Data(format!("duplicate parameter name {}", e.name)));
            }
        }
        let mut bn_index = BTreeMap::new();
        for (i, b) in bn.iter().enumerate() {
            if bn_index.insert(b.name.clone(), i).is_some() {
                return Err(KoopmanError::Data(format!("duplicate BN layer name {}", b.name)));
            }
        }
        Ok(ModelParams { entries, index, bn, bn_index })
    }

    pub fn init(arch: &ArchConfig, seed: u64) -> Result<ModelParams> {
        arch.validate()?;
        use rand::SeedableRng;
        let rank = arch.spatial_rank() as u32;
        let kpow = |k: usize| k.pow(rank);
        let mut b = ParamBuilder {
            entries: Vec::new(),
            bn: Vec::new(),
            rng: ChaCha8Rng::seed_from_u64(seed),
        };
        let gen = ParamGroup::Generator;
        let disc = ParamGroup::Discriminator;

        // Encoder stages.
        let mut c_in = arch.input_channels;
        for (i, &nf) in arch.enc_widths.iter().enumerate() {
            let half = nf / 2;
            b.kernel(&format!("enc.s{i}.conv.w"), gen, &[nf, c_in * kpow(3)], c_in * kpow(3));
            b.bias(&format!("enc.s{i}.conv.b"), gen, nf);
            b.bn(&format!("enc.s{i}.bn0"), gen, nf);
            b.kernel(&format!("enc.s{i}.c1.w"), gen, &[half, nf * kpow(1)], nf * kpow(1));
            b.bias(&format!("enc.s{i}.c1.b"), gen, half);
            b.bn(&format!("enc.s{i}.bn1"), gen, half);
            b.kernel(&format!("enc.s{i}.c2.w"), gen, &[half, half * kpow(3)], half * kpow(3));
            b.bias(&format!("enc.s{i}.c2.b"), gen, half);
            b.bn(&format!("enc.s{i}.bn2"), gen, half);
            b.kernel(&format!("enc.s{i}.c3.w"), gen, &[nf, half * kpow(1)], half * kpow(1));
            b.bias(&format!("enc.s{i}.c3.b"), gen, nf);
            c_in = nf;
        }
        let flat = arch.flat_len();
        let m = arch.latent_dim;
        b.kernel("enc.mu.w", gen, &[m, flat], flat);
        b.bias("enc.mu.b", gen, m);
        b.kernel("enc.ls.w", gen, &[m, flat], flat);
        // Sampling starts near-deterministic (sigma ~ 0.05). A unit-sigma
        // start buries the code under noise, the decoder learns to discard
        // it, and the encoder never receives a useful gradient.
        b.const_bias("enc.ls.b", gen, m, -3.0);

        // Decoder.
        b.kernel("dec.in.w", gen, &[flat, m], m);
        b.bias("dec.in.b", gen, flat);
        let outs = arch.dec_out_channels();
        let mut c = *arch.enc_widths.last().unwrap();
        for (i, &c_out) in outs.iter().enumerate() {
            let half = c / 2;
            b.bn(&format!("dec.s{i}.bn0"), gen, c);
            b.kernel(&format!("dec.s{i}.c1.w"), gen, &[c, half * kpow(1)], c * kpow(1));
            b.bias(&format!("dec.s{i}.c1.b"), gen, half);
            b.bn(&format!("dec.s{i}.bn1"), gen, half);
            b.kernel(&format!("dec.s{i}.c2.w"), gen, &[half, half * kpow(3)], half * kpow(3));
            b.bias(&format!("dec.s{i}.c2.b"), gen, half);
            b.bn(&format!("dec.s{i}.bn2"), gen, half);
            b.kernel(&format!("dec.s{i}.c3.w"), gen, &[half, c * kpow(1)], half * kpow(1));
            b.bias(&format!("dec.s{i}.c3.b"), gen, c);
            b.kernel(
                &format!("dec.s{i}.deconv.w"),
                gen,
                &[c, c_out * kpow(3)],
                (c * kpow(3) / (1 << rank)).max(1),
            );
            b.bias(&format!("dec.s{i}.deconv.b"), gen, c_out);
            c = c_out;
        }

        // Auxiliary operator network; the output layer starts at exactly
        // zero so the initial dynamics are the identity.
        let mut w_in = arch.aux_in_width();
        for (i, &w) in arch.aux_widths.iter().enumerate() {
            b.kernel(&format!("aux.fc{i}.w"), gen, &[w, w_in], w_in);
            b.bias(&format!("aux.fc{i}.b"), gen, w);
            w_in = w;
        }
        b.zero_kernel("aux.out.w", gen, &[2 * arch.n_dec(), w_in]);
        b.bias("aux.out.b", gen, 2 * arch.n_dec());

        // Critic.
        let mut c_in = arch.disc_in_channels();
        for (i, &nf) in arch.disc_widths.iter().enumerate() {
            b.kernel(&format!("disc.s{i}.conv.w"), disc, &[nf, c_in * kpow(5)], c_in * kpow(5));
            b.bias(&format!("disc.s{i}.conv.b"), disc, nf);
            if i > 0 {
                b.bn(&format!("disc.s{i}.bn"), disc, nf);
            }
            c_in = nf;
        }
        b.kernel("disc.out.w", disc, &[1, arch.disc_flat_len()], arch.disc_flat_len());
        b.bias("disc.out.b", disc, 1);

        let index = b
            .entries
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect::<BTreeMap<_, _>>();
        let bn_index = b
            .bn
            .iter()
            .enumerate()
            .map(|(i, e)| (e.name.clone(), i))
            .collect::<BTreeMap<_, _>>();
        if index.len() != b.entries.len() || bn_index.len() != b.bn.len() {
            return Err(KoopmanError::Config("duplicate parameter name in layout".into()));
        }
        Ok(ModelParams { entries: b.entries, index, bn: b.bn, bn_index })
    }

    pub fn entries(&self) -> &[ParamEntry] {
        &self.entries
    }

    pub fn entries_mut(&mut self) -> &mut [ParamEntry] {
        &mut self.entries
    }

    pub fn bn_layers(&self) -> &[BnRunning] {
        &self.bn
    }

    pub fn bn_layers_mut(&mut self) -> &mut [BnRunning] {
        &mut self.bn
    }

    pub fn entry_index(&self, name: &str) -> usize {
        *self
            .index
            .get(name)
            .unwrap_or_else(|| panic!("unknown parameter name {name}"))
    }

    pub fn bn_running(&self, name: &str) -> &BnRunning {
        &self.bn[*self
            .bn_index
            .get(name)
            .unwrap_or_else(|| panic!("unknown batchnorm layer {name}"))]
    }

    /// Total scalar parameter count.
    pub fn total_len(&self) -> usize {
        self.entries.iter().map(|e| e.value.len()).sum()
    }

    /// Sum of squared kernel entries over one group; biases and BN terms
    /// carry no weight penalty.
    pub fn kernel_sq_norm(&self, group: ParamGroup) -> f64 {
        self.entries
            .iter()
            .filter(|e| e.group == group && e.kind == ParamKind::Kernel)
            .map(|e| e.value.iter().map(|v| v * v).sum::<f64>())
            .sum()
    }

    /// Fold a batch of per-sample BN observations into the running
    /// statistics: new = momentum * old + (1 - momentum) * batch mean.
    pub fn update_bn(&mut self, observations: &[BnObservation]) {
        let mut grouped: BTreeMap<&str, (Array1<f64>, Array1<f64>, usize)> = BTreeMap::new();
        for obs in observations {
            let slot = grouped.entry(obs.name.as_str()).or_insert_with(|| {
                (Array1::zeros(obs.mean.len()), Array1::zeros(obs.var.len()), 0)
            });
            slot.0 += &obs.mean;
            slot.1 += &obs.var;
            slot.2 += 1;
        }
        for (name, (mean_sum, var_sum, n)) in grouped {
            let idx = *self.bn_index.get(name).expect("observation for unknown BN layer");
            let rec = &mut self.bn[idx];
            let nf = n as f64;
            rec.mean = &rec.mean * BN_MOMENTUM + &(mean_sum / nf) * (1.0 - BN_MOMENTUM);
            rec.var = &rec.var * BN_MOMENTUM + &(var_sum / nf) * (1.0 - BN_MOMENTUM);
        }
    }

    /// Push every parameter into a graph. Entries in `trainable` become
    /// tracked leaves (gradient targets); everything else enters as a
    /// constant, which keeps the generator and critic updates isolated.
    pub fn bind(&self, g: &mut Graph, trainable: Option<ParamGroup>) -> Vec<Var> {
        self.entries
            .iter()
            .map(|e| {
                if Some(e.group) == trainable {
                    g.leaf(e.value.clone())
                } else {
                    g.constant(e.value.clone())
                }
            })
            .collect()
    }
}

/// Rearrange a snapshot from the corpus layout `[spatial.., c]` into the
/// network layout `[c, spatial..]`, promoting to f64.
pub fn to_net_layout(snapshot: &ndarray::ArrayViewD<f32>) -> ArrayD<f64> {
    let promoted = snapshot.mapv(|v| v as f64);
    let rank = promoted.ndim();
    let mut axes: Vec<usize> = vec![rank - 1];
    axes.extend(0..rank - 1);
    promoted
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .to_owned()
}

/// Inverse of [`to_net_layout`]: `[c, spatial..]` back to `[spatial.., c]`.
pub fn to_corpus_layout(field: &ArrayD<f64>) -> ArrayD<f32> {
    let rank = field.ndim();
    let mut axes: Vec<usize> = (1..rank).collect();
    axes.push(0);
    field
        .view()
        .permuted_axes(IxDyn(&axes))
        .as_standard_layout()
        .mapv(|v| v as f32)
}

/// Mutable forward-pass context: training flag, dropout randomness, and a
/// sink for BN batch statistics.
pub struct FwdCtx<'a> {
    pub train: bool,
    pub rng: Option<&'a mut ChaCha8Rng>,
    pub bn_obs: Option<&'a mut Vec<BnObservation>>,
}

impl FwdCtx<'static> {
    pub fn eval() -> Self {
        FwdCtx { train: false, rng: None, bn_obs: None }
    }
}

/// One model bound to one graph: architecture, parameter table, and the
/// graph nodes produced by [`ModelParams::bind`].
pub struct Net<'a> {
    pub arch: &'a ArchConfig,
    pub params: &'a ModelParams,
    pub vars: &'a [Var],
}

impl<'a> Net<'a> {
    pub fn new(arch: &'a ArchConfig, params: &'a ModelParams, vars: &'a [Var]) -> Self {
        debug_assert_eq!(params.entries.len(), vars.len());
        Net { arch, params, vars }
    }

    fn p(&self, name: &str) -> Var {
        self.vars[self.params.entry_index(name)]
    }

    fn conv(&self, g: &mut Graph, x: Var, name: &str, k: usize, stride: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let bias = self.p(&format!("{name}.b"));
        match self.arch.spatial_rank() {
            1 => nn::conv1d(g, x, w, bias, k, stride),
            _ => nn::conv2d(g, x, w, bias, k, stride),
        }
    }

    fn deconv(&self, g: &mut Graph, x: Var, name: &str, k: usize, stride: usize) -> Var {
        let w = self.p(&format!("{name}.w"));
        let bias = self.p(&format!("{name}.b"));
        match self.arch.spatial_rank() {
            1 => nn::deconv1d(g, x, w, bias, k, stride),
            _ => nn::deconv2d(g, x, w, bias, k, stride),
        }
    }

    fn bn(&self, g: &mut Graph, x: Var, name: &str, ctx: &mut FwdCtx) -> Var {
        self.bn_many(g, vec![x], name, ctx).pop().unwrap()
    }

    /// Batch normalization over a group of same-layer activations. In
    /// training mode the group is the batch: every member is normalized by
    /// the group's shared statistics, which also become the recorded
    /// observation. Evaluation applies the running statistics to each
    /// member independently.
    fn bn_many(&self, g: &mut Graph, xs: Vec<Var>, name: &str, ctx: &mut FwdCtx) -> Vec<Var> {
        let scale = self.p(&format!("{name}.scale"));
        let shift = self.p(&format!("{name}.shift"));
        if ctx.train {
            let (ys, mean, var) = nn::batchnorm_train_joint(g, &xs, scale, shift, BN_EPS);
            if let Some(obs) = ctx.bn_obs.as_deref_mut() {
                obs.push(BnObservation { name: name.to_string(), mean, var });
            }
            ys
        } else {
            let rec = self.params.bn_running(name);
            xs.into_iter()
                .map(|x| nn::batchnorm_eval(g, x, scale, shift, &rec.mean, &rec.var, BN_EPS))
                .collect()
        }
    }

    fn dropout(&self, g: &mut Graph, x: Var, ctx: &mut FwdCtx) -> Var {
        let keep = self.arch.dropout_keep;
        if !ctx.train || keep >= 1.0 {
            return x;
        }
        let rng = ctx
            .rng
            .as_deref_mut()
            .expect("training forward pass needs a dropout RNG");
        let shape = g.value(x).shape().to_vec();
        let n: usize = shape.iter().product();
        let mask: Vec<f64> = (0..n)
            .map(|_| if rng.gen_range(0.0..1.0) < keep { 1.0 / keep } else { 0.0 })
            .collect();
        nn::apply_mask(g, x, ArrayD::from_shape_vec(IxDyn(&shape), mask).unwrap())
    }

    /// Zero-pad the spatial axes of a snapshot `[c, spatial..]` up to the
    /// architecture's padded shape.
    pub fn pad_input(&self, g: &mut Graph, x: Var) -> Var {
        let padded = self.arch.padded_shape();
        let shape = g.value(x).shape().to_vec();
        let mut pads = vec![(0usize, 0usize)];
        let mut any = false;
        for (d, (&have, &want)) in shape[1..].iter().zip(&padded).enumerate() {
            assert!(
                have == self.arch.input_shape[d],
                "snapshot spatial extent {have} does not match configured {}",
                self.arch.input_shape[d]
            );
            pads.push((0, want - have));
            any = any || want != have;
        }
        if any {
            g.zero_pad(x, &pads)
        } else {
            x
        }
    }

    /// Crop a decoded snapshot `[c, padded..]` back to the configured
    /// physical extent.
    pub fn crop_output(&self, g: &mut Graph, x: Var) -> Var {
        let shape = g.value(x).shape().to_vec();
        if shape[1..] == *self.arch.input_shape {
            return x;
        }
        let mut starts = vec![0usize; shape.len()];
        let mut ends = vec![shape[0]];
        ends.extend_from_slice(&self.arch.input_shape);
        starts.truncate(ends.len());
        g.slice(x, &starts, &ends)
    }

    fn bottleneck_many(
        &self,
        g: &mut Graph,
        xs: Vec<Var>,
        prefix: &str,
        transposed: bool,
        ctx: &mut FwdCtx,
    ) -> Vec<Var> {
        let step = |net: &Self, g: &mut Graph, hs: Vec<Var>, layer: &str, k: usize| -> Vec<Var> {
            hs.into_iter()
                .map(|h| {
                    if transposed {
                        net.deconv(g, h, layer, k, 1)
                    } else {
                        net.conv(g, h, layer, k, 1)
                    }
                })
                .collect()
        };
        let hs = self.bn_many(g, xs, &format!("{prefix}.bn0"), ctx);
        let hs = hs.into_iter().map(|h| g.relu(h)).collect();
        let hs = step(self, g, hs, &format!("{prefix}.c1"), 1);
        let hs = self.bn_many(g, hs, &format!("{prefix}.bn1"), ctx);
        let hs = hs.into_iter().map(|h| g.relu(h)).collect();
        let hs = step(self, g, hs, &format!("{prefix}.c2"), 3);
        let hs = self.bn_many(g, hs, &format!("{prefix}.bn2"), ctx);
        let hs = hs.into_iter().map(|h| g.relu(h)).collect();
        step(self, g, hs, &format!("{prefix}.c3"), 1)
    }

    /// Map a padded snapshot `[c, padded..]` to the latent statistics
    /// `(mu, log_sigma)`, each of length M.
    pub fn encode(&self, g: &mut Graph, x: Var, ctx: &mut FwdCtx) -> (Var, Var) {
        self.encode_many(g, vec![x], ctx).pop().unwrap()
    }

    /// Encode a group of padded snapshots that together form one batch:
    /// the group shares batch-normalization statistics at every layer in
    /// training mode. Order is preserved.
    pub fn encode_many(&self, g: &mut Graph, xs: Vec<Var>, ctx: &mut FwdCtx) -> Vec<(Var, Var)> {
        for &x in &xs {
            debug_assert_eq!(g.value(x).shape()[1..], *self.arch.padded_shape());
        }
        let mut hs = xs;
        for i in 0..self.arch.n_stages() {
            let ys: Vec<Var> =
                hs.iter().map(|&h| self.conv(g, h, &format!("enc.s{i}.conv"), 3, 2)).collect();
            let bs = self.bottleneck_many(g, ys.clone(), &format!("enc.s{i}"), false, ctx);
            hs = ys.into_iter().zip(bs).map(|(y, b)| g.add(y, b)).collect();
        }
        hs.into_iter()
            .map(|h| {
                let h = g.relu(h);
                let flat = g.reshape(h, &[self.arch.flat_len()]);
                let mu = nn::dense(g, self.p("enc.mu.w"), self.p("enc.mu.b"), flat);
                let ls = nn::dense(g, self.p("enc.ls.w"), self.p("enc.ls.b"), flat);
                (mu, ls)
            })
            .collect()
    }

    /// Map a latent vector of length M to a padded snapshot `[c, padded..]`.
    pub fn decode(&self, g: &mut Graph, z: Var, ctx: &mut FwdCtx) -> Var {
        self.decode_many(g, vec![z], ctx).pop().unwrap()
    }

    /// Decode a group of latent vectors as one batch, sharing
    /// batch-normalization statistics in training mode. Order is preserved.
    pub fn decode_many(&self, g: &mut Graph, zs: Vec<Var>, ctx: &mut FwdCtx) -> Vec<Var> {
        let mut hs: Vec<Var> = zs
            .into_iter()
            .map(|z| {
                let h = nn::dense(g, self.p("dec.in.w"), self.p("dec.in.b"), z);
                let mut shape = vec![*self.arch.enc_widths.last().unwrap()];
                shape.extend(self.arch.core_shape());
                g.reshape(h, &shape)
            })
            .collect();
        for i in 0..self.arch.n_stages() {
            let bs = self.bottleneck_many(g, hs.clone(), &format!("dec.s{i}"), true, ctx);
            hs = hs
                .into_iter()
                .zip(bs)
                .map(|(h, b)| {
                    let r = g.add(h, b);
                    self.deconv(g, r, &format!("dec.s{i}.deconv"), 3, 2)
                })
                .collect();
        }
        hs
    }

    /// Map latent statistics (and the optional conditioning scalar) to the
    /// packed entries of the two Koopman matrices, length 2 * n_dec.
    pub fn aux(
        &self,
        g: &mut Graph,
        mu: Var,
        log_sigma: Var,
        cond: Option<f64>,
        ctx: &mut FwdCtx,
    ) -> Var {
        assert_eq!(
            self.arch.conditioned,
            cond.is_some(),
            "conditioning input must match the architecture flag"
        );
        let mut parts = vec![mu, log_sigma];
        if let Some(c) = cond {
            parts.push(g.constant(ArrayD::from_elem(IxDyn(&[1]), c)));
        }
        let mut h = g.concat(&parts, 0);
        for i in 0..self.arch.aux_widths.len() {
            h = nn::dense(g, self.p(&format!("aux.fc{i}.w")), self.p(&format!("aux.fc{i}.b")), h);
            h = g.relu(h);
            h = self.dropout(g, h, ctx);
        }
        nn::dense(g, self.p("aux.out.w"), self.p("aux.out.b"), h)
    }

    /// Stack a snapshot sequence with its successor sequence along the
    /// channel axis and zero-pad to the critic's fixed channel count. For
    /// real pairs the successors are the data's next snapshots; for fake
    /// pairs they are the decoded rollout. Both lists hold n_S padded
    /// snapshots `[c, padded..]`.
    pub fn critic_input(&self, g: &mut Graph, inputs: &[Var], successors: &[Var]) -> Var {
        let n_s = inputs.len();
        assert_eq!(n_s, successors.len(), "critic pair lists must have equal length");
        assert!(n_s >= 1, "critic needs at least one snapshot pair");
        assert!(
            n_s <= self.arch.disc_seq_len,
            "sequence of {n_s} exceeds critic capacity {}",
            self.arch.disc_seq_len
        );
        let mut parts: Vec<Var> = Vec::with_capacity(2 * n_s);
        parts.extend_from_slice(inputs);
        parts.extend_from_slice(successors);
        let stacked = g.concat(&parts, 0);
        let have = g.value(stacked).shape()[0];
        let want = self.arch.disc_in_channels();
        if have == want {
            return stacked;
        }
        let rank = self.arch.spatial_rank();
        let mut pads = vec![(0, want - have)];
        pads.extend(std::iter::repeat((0, 0)).take(rank));
        g.zero_pad(stacked, &pads)
    }

    /// Critic score for one channel-stacked input, a scalar node.
    pub fn discriminate(&self, g: &mut Graph, x: Var, ctx: &mut FwdCtx) -> Var {
        debug_assert_eq!(g.value(x).shape()[0], self.arch.disc_in_channels());
        let slope = self.arch.leaky_slope;
        let mut h = x;
        for i in 0..self.arch.disc_widths.len() {
            h = self.conv(g, h, &format!("disc.s{i}.conv"), 5, 2);
            if i > 0 {
                h = self.bn(g, h, &format!("disc.s{i}.bn"), ctx);
            }
            h = g.leaky_relu(h, slope);
        }
        let flat_len = g.value(h).len();
        let flat = g.reshape(h, &[flat_len]);
        let out = nn::dense(g, self.p("disc.out.w"), self.p("disc.out.b"), flat);
        g.sum_all(out)
    }
}

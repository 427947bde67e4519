//! Five-convolution segmentation network with a hand-derived backward pass.
//!
//! Encoder: conv3×3(3→16) → ReLU → conv3×3/2(16→32) → ReLU → conv3×3(32→C_e).
//! Decoder: conv3×3(C_e→16) → ReLU → nearest ×2 upsample → conv1×1(16→C).

pub mod checkpoint;
pub mod conv;

use rand::Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::losses::{ce_from_logits, LdNormalize, PseudoPack};
use crate::tensor::{FeatureMap, LabelMask, Logits, Real, Tensor3, IGNORE_LABEL};
use conv::{conv_backward, conv_forward, relu_backward_inplace, relu_inplace, upsample2, upsample2_backward, ConvSpec};

pub use checkpoint::Checkpoint;

/// Encoder output channels.
pub const FEAT_CHANNELS: usize = 32;

pub const PARAM_NAMES: [&str; 10] = [
    "enc.conv1.weight",
    "enc.conv1.bias",
    "enc.conv2.weight",
    "enc.conv2.bias",
    "enc.conv3.weight",
    "enc.conv3.bias",
    "dec.conv1.weight",
    "dec.conv1.bias",
    "dec.conv2.weight",
    "dec.conv2.bias",
];

const ENC1: usize = 0;
const ENC2: usize = 2;
const ENC3: usize = 4;
const DEC1: usize = 6;
const DEC2: usize = 8;

fn layer_specs(num_classes: usize) -> [ConvSpec; 5] {
    [
        ConvSpec::new(3, 16, 3, 1, 1),
        ConvSpec::new(16, 32, 3, 2, 1),
        ConvSpec::new(32, FEAT_CHANNELS, 3, 1, 1),
        ConvSpec::new(FEAT_CHANNELS, 16, 3, 1, 1),
        ConvSpec::new(16, num_classes, 1, 1, 0),
    ]
}

pub fn is_encoder_param(name: &str) -> bool {
    name.starts_with("enc.")
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Role {
    Student,
    Teacher,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ParamTensor<T> {
    pub shape: Vec<usize>,
    pub data: Vec<T>,
}

/// Named parameter tensors of one network (or a gradient / momentum buffer with the same layout).
#[derive(Debug, Clone, PartialEq)]
pub struct ParamSet<T> {
    pub role: Role,
    pub num_classes: usize,
    pub tensors: Vec<ParamTensor<T>>,
}

impl<T: Real> ParamSet<T> {
    pub fn zeros(num_classes: usize, role: Role) -> Self {
        let tensors = layer_specs(num_classes)
            .iter()
            .flat_map(|s| {
                [
                    ParamTensor {
                        shape: vec![s.out_channels, s.in_channels, s.kernel, s.kernel],
                        data: vec![T::zero(); s.weight_len()],
                    },
                    ParamTensor {
                        shape: vec![s.out_channels],
                        data: vec![T::zero(); s.out_channels],
                    },
                ]
            })
            .collect();
        Self {
            role,
            num_classes,
            tensors,
        }
    }

    /// Kaiming-uniform weights, zero biases.
    pub fn init<R: Rng + ?Sized>(num_classes: usize, rng: &mut R) -> Self {
        let mut p = Self::zeros(num_classes, Role::Student);
        for (spec, idx) in layer_specs(num_classes).iter().zip([ENC1, ENC2, ENC3, DEC1, DEC2]) {
            let fan_in = (spec.in_channels * spec.kernel * spec.kernel) as f64;
            let bound = (6.0 / fan_in).sqrt();
            for v in p.tensors[idx].data.iter_mut() {
                *v = T::of(rng.random_range(-bound..bound));
            }
        }
        p
    }

    pub fn zeros_like(&self) -> Self {
        let mut z = self.clone();
        z.tensors.iter_mut().for_each(|t| t.data.iter_mut().for_each(|v| *v = T::zero()));
        z
    }

    pub fn with_role(mut self, role: Role) -> Self {
        self.role = role;
        self
    }

    pub fn named(&self) -> impl Iterator<Item = (&'static str, &ParamTensor<T>)> {
        PARAM_NAMES.iter().copied().zip(self.tensors.iter())
    }

    pub fn get(&self, name: &str) -> Option<&ParamTensor<T>> {
        PARAM_NAMES.iter().position(|&n| n == name).map(|i| &self.tensors[i])
    }

    pub fn get_mut(&mut self, name: &str) -> Option<&mut ParamTensor<T>> {
        PARAM_NAMES.iter().position(|&n| n == name).map(move |i| &mut self.tensors[i])
    }

    pub fn num_params(&self) -> usize {
        self.tensors.iter().map(|t| t.data.len()).sum()
    }

    pub fn same_layout<U>(&self, other: &ParamSet<U>) -> bool {
        self.tensors.len() == other.tensors.len()
            && self.tensors.iter().zip(&other.tensors).all(|(a, b)| a.shape == b.shape)
    }

    pub fn cast<U: Real>(&self) -> ParamSet<U> {
        ParamSet {
            role: self.role,
            num_classes: self.num_classes,
            tensors: self
                .tensors
                .iter()
                .map(|t| ParamTensor {
                    shape: t.shape.clone(),
                    data: t.data.iter().map(|&v| U::of(v.as_f64())).collect(),
                })
                .collect(),
        }
    }

    /// First non-finite entry, as `(tensor name, element index)`.
    pub fn first_non_finite(&self) -> Option<(&'static str, usize)> {
        self.named()
            .find_map(|(n, t)| t.data.iter().position(|v| !v.is_finite()).map(|i| (n, i)))
    }

    pub fn max_abs_diff(&self, other: &Self) -> f64 {
        self.tensors
            .iter()
            .zip(&other.tensors)
            .flat_map(|(a, b)| a.data.iter().zip(&b.data).map(|(&x, &y)| (x - y).abs().as_f64()))
            .fold(0.0, f64::max)
    }

    /// Order-sensitive 64-bit fingerprint of the raw parameter bits.
    pub fn checksum(&self) -> u64 {
        let mut h: u64 = 0xcbf2_9ce4_8422_2325;
        for t in &self.tensors {
            for v in &t.data {
                let bits = v.as_f64().to_bits();
                h ^= bits;
                h = h.wrapping_mul(0x0000_0100_0000_01b3);
            }
        }
        h
    }

    fn add_assign(&mut self, other: &Self) {
        for (a, b) in self.tensors.iter_mut().zip(&other.tensors) {
            for (x, &y) in a.data.iter_mut().zip(&b.data) {
                *x += y;
            }
        }
    }

    fn w(&self, layer: usize) -> (&[T], &[T]) {
        (&self.tensors[layer].data, &self.tensors[layer + 1].data)
    }
}

/// Binary channel-wise dropout mask.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ChannelMask {
    pub bits: Vec<bool>,
}

impl ChannelMask {
    pub fn ones(len: usize) -> Self {
        Self { bits: vec![true; len] }
    }

    pub fn complement(&self) -> Self {
        Self {
            bits: self.bits.iter().map(|b| !b).collect(),
        }
    }

    pub fn popcount(&self) -> usize {
        self.bits.iter().filter(|&&b| b).count()
    }
}

/// `M` with i.i.d. Bernoulli(`keep_prob`) bits, and its exact complement `1 − M`.
pub fn sample_complementary_masks<R: Rng + ?Sized>(
    rng: &mut R,
    keep_prob: f64,
    channels: usize,
) -> (ChannelMask, ChannelMask) {
    let m = ChannelMask {
        bits: (0..channels).map(|_| rng.random_bool(keep_prob)).collect(),
    };
    let c = m.complement();
    (m, c)
}

/// `2·M ⊙ feat`, channel-wise.
pub fn apply_channel_dropout<T: Real>(feat: &FeatureMap<T>, mask: &ChannelMask) -> Result<FeatureMap<T>> {
    if mask.bits.len() != feat.channels {
        return Err(Error::ShapeMismatch(format!(
            "mask of length {} for {} channels",
            mask.bits.len(),
            feat.channels
        )));
    }
    let two = T::of(2.0);
    let mut out = feat.clone();
    for (k, &keep) in mask.bits.iter().enumerate() {
        let plane = out.plane_mut(k);
        if keep {
            plane.iter_mut().for_each(|v| *v *= two);
        } else {
            plane.iter_mut().for_each(|v| *v = T::zero());
        }
    }
    Ok(out)
}

/// `teacher ← γ·teacher + (1−γ)·student`, elementwise.
pub fn ema_update<T: Real>(teacher: &mut ParamSet<T>, student: &ParamSet<T>, gamma: f64) -> Result<()> {
    if !(0.0..1.0).contains(&gamma) {
        return Err(Error::InvalidArgument(format!("gamma must lie in [0,1), got {gamma}")));
    }
    if !teacher.same_layout(student) {
        return Err(Error::ShapeMismatch("teacher and student layouts differ".into()));
    }
    let g = T::of(gamma);
    let one_minus = T::of(1.0 - gamma);
    for (t, s) in teacher.tensors.iter_mut().zip(&student.tensors) {
        for (tv, &sv) in t.data.iter_mut().zip(&s.data) {
            *tv = g * *tv + one_minus * sv;
        }
    }
    Ok(())
}

/// Activations kept for the encoder backward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace<T> {
    input: Tensor3<T>,
    a1: Tensor3<T>,
    a2: Tensor3<T>,
}

/// Activations kept for the decoder backward pass.
#[derive(Debug, Clone)]
pub struct DecoderTrace<T> {
    feat: FeatureMap<T>,
    d1: Tensor3<T>,
    up: Tensor3<T>,
}

fn check_input<T>(params: &ParamSet<T>, img: &Tensor3<T>) -> Result<()> {
    let _ = params;
    if img.channels != 3 || img.height % 2 != 0 || img.width % 2 != 0 || img.height == 0 || img.width == 0 {
        return Err(Error::ShapeMismatch(format!(
            "encoder expects 3×H×W with even H, W; got {}×{}×{}",
            img.channels, img.height, img.width
        )));
    }
    Ok(())
}

pub fn encode_traced<T: Real>(params: &ParamSet<T>, img: &Tensor3<T>) -> Result<(FeatureMap<T>, EncoderTrace<T>)> {
    check_input(params, img)?;
    let specs = layer_specs(params.num_classes);
    let (w, b) = params.w(ENC1);
    let mut a1 = conv_forward(img, w, b, &specs[0]);
    relu_inplace(&mut a1);
    let (w, b) = params.w(ENC2);
    let mut a2 = conv_forward(&a1, w, b, &specs[1]);
    relu_inplace(&mut a2);
    let (w, b) = params.w(ENC3);
    let feat = conv_forward(&a2, w, b, &specs[2]);
    Ok((
        feat,
        EncoderTrace {
            input: img.clone(),
            a1,
            a2,
        },
    ))
}

pub fn encode<T: Real>(params: &ParamSet<T>, img: &Tensor3<T>) -> Result<FeatureMap<T>> {
    encode_traced(params, img).map(|(f, _)| f)
}

pub fn decode_traced<T: Real>(params: &ParamSet<T>, feat: &FeatureMap<T>) -> Result<(Logits<T>, DecoderTrace<T>)> {
    if feat.channels != FEAT_CHANNELS {
        return Err(Error::ShapeMismatch(format!(
            "decoder expects {} feature channels, got {}",
            FEAT_CHANNELS, feat.channels
        )));
    }
    let specs = layer_specs(params.num_classes);
    let (w, b) = params.w(DEC1);
    let mut d1 = conv_forward(feat, w, b, &specs[3]);
    relu_inplace(&mut d1);
    let up = upsample2(&d1);
    let (w, b) = params.w(DEC2);
    let logits = conv_forward(&up, w, b, &specs[4]);
    Ok((
        logits,
        DecoderTrace {
            feat: feat.clone(),
            d1,
            up,
        },
    ))
}

pub fn decode<T: Real>(params: &ParamSet<T>, feat: &FeatureMap<T>) -> Result<Logits<T>> {
    decode_traced(params, feat).map(|(l, _)| l)
}

/// Backpropagates `grad_logits` through the decoder, accumulating into
/// `grads`; returns the gradient with respect to the decoder input.
pub fn decode_backward<T: Real>(
    params: &ParamSet<T>,
    trace: &DecoderTrace<T>,
    grad_logits: &Logits<T>,
    grads: &mut ParamSet<T>,
) -> FeatureMap<T> {
    let specs = layer_specs(params.num_classes);
    let mut g_up = Tensor3::zeros(trace.up.channels, trace.up.height, trace.up.width);
    {
        let (gw, gb) = split_pair(grads, DEC2);
        conv_backward(&trace.up, &params.tensors[DEC2].data, grad_logits, &specs[4], gw, gb, Some(&mut g_up));
    }
    let mut g_d1 = upsample2_backward(&g_up);
    relu_backward_inplace(&mut g_d1, &trace.d1);
    let mut g_feat = Tensor3::zeros(trace.feat.channels, trace.feat.height, trace.feat.width);
    let (gw, gb) = split_pair(grads, DEC1);
    conv_backward(&trace.feat, &params.tensors[DEC1].data, &g_d1, &specs[3], gw, gb, Some(&mut g_feat));
    g_feat
}

pub fn encode_backward<T: Real>(
    params: &ParamSet<T>,
    trace: &EncoderTrace<T>,
    grad_feat: &FeatureMap<T>,
    grads: &mut ParamSet<T>,
) {
    let specs = layer_specs(params.num_classes);
    let mut g_a2 = Tensor3::zeros(trace.a2.channels, trace.a2.height, trace.a2.width);
    {
        let (gw, gb) = split_pair(grads, ENC3);
        conv_backward(&trace.a2, &params.tensors[ENC3].data, grad_feat, &specs[2], gw, gb, Some(&mut g_a2));
    }
    relu_backward_inplace(&mut g_a2, &trace.a2);
    let mut g_a1 = Tensor3::zeros(trace.a1.channels, trace.a1.height, trace.a1.width);
    {
        let (gw, gb) = split_pair(grads, ENC2);
        conv_backward(&trace.a1, &params.tensors[ENC2].data, &g_a2, &specs[1], gw, gb, Some(&mut g_a1));
    }
    relu_backward_inplace(&mut g_a1, &trace.a1);
    let (gw, gb) = split_pair(grads, ENC1);
    conv_backward(&trace.input, &params.tensors[ENC1].data, &g_a1, &specs[0], gw, gb, None);
}

fn split_pair<T>(grads: &mut ParamSet<T>, idx: usize) -> (&mut [T], &mut [T]) {
    let (a, b) = grads.tensors.split_at_mut(idx + 1);
    (&mut a[idx].data, &mut b[0].data)
}

/// Logits of the full network, optionally with channel dropout at the encoder output.
pub fn forward_logits<T: Real>(params: &ParamSet<T>, img: &Tensor3<T>, mask: Option<&ChannelMask>) -> Result<Logits<T>> {
    let feat = encode(params, img)?;
    let feat = match mask {
        Some(m) => apply_channel_dropout(&feat, m)?,
        None => feat,
    };
    decode(params, &feat)
}

/// Two strong views of one degraded image with their complementary masks
/// and aligned pseudo-label targets.
#[derive(Debug, Clone)]
pub struct StrongPair<T> {
    pub views: [Tensor3<T>; 2],
    pub masks: [ChannelMask; 2],
    pub targets: [PseudoPack; 2],
}

#[derive(Debug, Clone, Default)]
pub struct TrainBatch<T> {
    pub clean: Vec<(Tensor3<T>, LabelMask)>,
    pub strong: Vec<StrongPair<T>>,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct LossSpec {
    pub lambda: f64,
    pub ld_normalize: LdNormalize,
    pub freeze_encoder: bool,
}

#[derive(Debug, Clone)]
pub struct ForwardBackward<T> {
    pub l_c: f64,
    pub l_d: f64,
    /// `l_c + lambda·l_d`.
    pub total: f64,
    pub confident_fraction: f64,
    pub grads: ParamSet<T>,
}

struct Denoms {
    clean: usize,
    strong: usize,
    confident: usize,
    strong_pixels: usize,
}

fn denominators<T>(batch: &TrainBatch<T>, spec: &LossSpec) -> Denoms {
    let clean = batch
        .clean
        .iter()
        .map(|(_, y)| y.data.iter().filter(|&&l| l != IGNORE_LABEL).count())
        .sum();
    let strong_pixels: usize = batch
        .strong
        .iter()
        .flat_map(|p| p.targets.iter())
        .map(|t| t.conf.data.len())
        .sum();
    let confident = batch
        .strong
        .iter()
        .flat_map(|p| p.targets.iter())
        .map(PseudoPack::confident_pixels)
        .sum();
    let strong = match spec.ld_normalize {
        LdNormalize::AllPixels => strong_pixels,
        LdNormalize::ConfidentPixels => confident,
    };
    Denoms {
        clean,
        strong,
        confident,
        strong_pixels,
    }
}

fn scale_of<T: Real>(denom: usize, factor: f64) -> T {
    if denom == 0 {
        T::zero()
    } else {
        T::of(factor / denom as f64)
    }
}

enum Item<'a, T> {
    Clean(&'a Tensor3<T>, &'a LabelMask),
    Strong(&'a Tensor3<T>, &'a ChannelMask, &'a PseudoPack),
}

fn items<T>(batch: &TrainBatch<T>) -> Vec<Item<'_, T>> {
    let mut v: Vec<Item<'_, T>> = batch.clean.iter().map(|(x, y)| Item::Clean(x, y)).collect();
    for pair in &batch.strong {
        for k in 0..2 {
            v.push(Item::Strong(&pair.views[k], &pair.masks[k], &pair.targets[k]));
        }
    }
    v
}

/// Total objective and its exact gradient with respect to `params`.
///
/// Per-sample gradients are reduced in batch order, so the result does not
/// depend on the worker count.
pub fn forward_backward<T: Real>(
    params: &ParamSet<T>,
    batch: &TrainBatch<T>,
    spec: &LossSpec,
) -> Result<ForwardBackward<T>> {
    let d = denominators(batch, spec);
    let clean_scale: T = scale_of(d.clean, 1.0);
    let strong_scale: T = scale_of(d.strong, spec.lambda);

    let per_item: Vec<Result<(bool, T, ParamSet<T>)>> = items(batch)
        .par_iter()
        .map(|item| {
            let mut grads = params.zeros_like();
            let (img, mask, is_clean) = match item {
                Item::Clean(x, _) => (*x, None, true),
                Item::Strong(x, m, _) => (*x, Some(*m), false),
            };
            let (feat, etrace) = encode_traced(params, img)?;
            let dropped = match mask {
                Some(m) => apply_channel_dropout(&feat, m)?,
                None => feat,
            };
            let (logits, dtrace) = decode_traced(params, &dropped)?;
            let (sum, glogits) = match item {
                Item::Clean(_, y) => ce_from_logits(&logits, y, None, clean_scale)?,
                Item::Strong(_, _, t) => ce_from_logits(&logits, &t.label, Some(&t.conf), strong_scale)?,
            };
            let mut gfeat = decode_backward(params, &dtrace, &glogits, &mut grads);
            if !spec.freeze_encoder {
                if let Some(m) = mask {
                    let two = T::of(2.0);
                    for (k, &keep) in m.bits.iter().enumerate() {
                        let plane = gfeat.plane_mut(k);
                        if keep {
                            plane.iter_mut().for_each(|v| *v *= two);
                        } else {
                            plane.iter_mut().for_each(|v| *v = T::zero());
                        }
                    }
                }
                encode_backward(params, &etrace, &gfeat, &mut grads);
            }
            Ok((is_clean, sum, grads))
        })
        .collect();

    let mut grads = params.zeros_like();
    let mut clean_sum = 0.0f64;
    let mut strong_sum = 0.0f64;
    for r in per_item {
        let (is_clean, sum, g) = r?;
        if is_clean {
            clean_sum += sum.as_f64();
        } else {
            strong_sum += sum.as_f64();
        }
        grads.add_assign(&g);
    }
    if spec.freeze_encoder {
        for (name, t) in PARAM_NAMES.iter().zip(grads.tensors.iter_mut()) {
            if is_encoder_param(name) {
                t.data.iter_mut().for_each(|v| *v = T::zero());
            }
        }
    }

    let l_c = if d.clean == 0 { 0.0 } else { clean_sum / d.clean as f64 };
    let l_d = if d.strong == 0 { 0.0 } else { strong_sum / d.strong as f64 };
    let total = l_c + spec.lambda * l_d;
    if !total.is_finite() {
        let (tensor, index) = params
            .first_non_finite()
            .or_else(|| grads.first_non_finite())
            .map(|(n, i)| (n.to_string(), i))
            .unwrap_or_else(|| ("loss".to_string(), 0));
        return Err(Error::NonFinite { tensor, index });
    }
    let confident_fraction = if d.strong_pixels == 0 {
        0.0
    } else {
        d.confident as f64 / d.strong_pixels as f64
    };
    Ok(ForwardBackward {
        l_c,
        l_d,
        total,
        confident_fraction,
        grads,
    })
}

/// Forward-only evaluation of the same objective; used by the
/// finite-difference checker.
pub fn forward_loss<T: Real>(params: &ParamSet<T>, batch: &TrainBatch<T>, spec: &LossSpec) -> Result<f64> {
    objective(params, batch, spec, None).map(|(l, _)| l)
}

/// ReLU on/off decisions of every hidden layer for every item of a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ReluGates {
    per_item: Vec<[Vec<bool>; 3]>,
}

impl ReluGates {
    pub fn fingerprint(&self) -> u64 {
        let mut sig: u64 = 0xcbf2_9ce4_8422_2325;
        for layers in &self.per_item {
            for g in layers {
                for chunk in g.chunks(64) {
                    let word = chunk.iter().enumerate().fold(0u64, |w, (i, &b)| w | (u64::from(b) << i));
                    sig = (sig ^ word).wrapping_mul(0x0000_0100_0000_01b3);
                }
            }
        }
        sig
    }
}

fn gate_inplace<T: Real>(t: &mut Tensor3<T>, gate: Option<&[bool]>) -> Vec<bool> {
    match gate {
        Some(g) => {
            for (v, &on) in t.data.iter_mut().zip(g) {
                if !on {
                    *v = T::zero();
                }
            }
            g.to_vec()
        }
        None => {
            relu_inplace(t);
            t.data.iter().map(|&v| v > T::zero()).collect()
        }
    }
}

/// Full objective. With `gates` given, each ReLU is replaced by the fixed
/// 0/1 gate recorded earlier, which evaluates the network's linear piece
/// around that point.
fn objective<T: Real>(
    params: &ParamSet<T>,
    batch: &TrainBatch<T>,
    spec: &LossSpec,
    gates: Option<&ReluGates>,
) -> Result<(f64, ReluGates)> {
    let d = denominators(batch, spec);
    let specs = layer_specs(params.num_classes);
    let mut clean_sum = 0.0;
    let mut strong_sum = 0.0;
    let mut recorded = Vec::new();
    for (i, item) in items(batch).into_iter().enumerate() {
        let (img, mask) = match item {
            Item::Clean(x, _) => (x, None),
            Item::Strong(x, m, _) => (x, Some(m)),
        };
        check_input(params, img)?;
        let g = gates.map(|g| &g.per_item[i]);
        let (w, b) = params.w(ENC1);
        let mut a1 = conv_forward(img, w, b, &specs[0]);
        let g1 = gate_inplace(&mut a1, g.map(|g| g[0].as_slice()));
        let (w, b) = params.w(ENC2);
        let mut a2 = conv_forward(&a1, w, b, &specs[1]);
        let g2 = gate_inplace(&mut a2, g.map(|g| g[1].as_slice()));
        let (w, b) = params.w(ENC3);
        let mut feat = conv_forward(&a2, w, b, &specs[2]);
        if let Some(m) = mask {
            feat = apply_channel_dropout(&feat, m)?;
        }
        let (w, b) = params.w(DEC1);
        let mut d1 = conv_forward(&feat, w, b, &specs[3]);
        let g3 = gate_inplace(&mut d1, g.map(|g| g[2].as_slice()));
        let (w, b) = params.w(DEC2);
        let logits = conv_forward(&upsample2(&d1), w, b, &specs[4]);
        recorded.push([g1, g2, g3]);
        match item {
            Item::Clean(_, y) => clean_sum += ce_from_logits(&logits, y, None, T::zero())?.0.as_f64(),
            Item::Strong(_, _, t) => {
                strong_sum += ce_from_logits(&logits, &t.label, Some(&t.conf), T::zero())?.0.as_f64()
            }
        }
    }
    let l_c = if d.clean == 0 { 0.0 } else { clean_sum / d.clean as f64 };
    let l_d = if d.strong == 0 { 0.0 } else { strong_sum / d.strong as f64 };
    Ok((l_c + spec.lambda * l_d, ReluGates { per_item: recorded }))
}

/// Forward-only objective plus the ReLU gates it passed through.
pub fn forward_loss_gates<T: Real>(
    params: &ParamSet<T>,
    batch: &TrainBatch<T>,
    spec: &LossSpec,
) -> Result<(f64, ReluGates)> {
    objective(params, batch, spec, None)
}

/// Objective with every ReLU pinned to `gates`.
pub fn forward_loss_gated<T: Real>(
    params: &ParamSet<T>,
    batch: &TrainBatch<T>,
    spec: &LossSpec,
    gates: &ReluGates,
) -> Result<f64> {
    objective(params, batch, spec, Some(gates)).map(|(l, _)| l)
}

//! MonoUNet topology: a seven-stage encoder/decoder with a constant channel
//! width, an asymmetric half decoder (one conv block per stage instead of
//! two), and gated injection of the mono-block phase features into the
//! high-resolution encoder stages.
//!
//! Backbone block = 3x3 conv -> instance norm (affine) -> leaky ReLU (0.01).
//! Downsampling is the stride-2 first conv of each encoder stage; upsampling
//! is a 2x2 stride-2 transposed conv; skips are fused by concatenation.
//! Ablation variants ([`Variant`]) ladder from the plain backbone up to the
//! full multi-scale gated model.

use std::io::{Read, Write};
use std::path::Path;

use crate::autodiff::{Graph, NodeId, Parameter};
use crate::error::{Error, Result};
use crate::monogenic::{self, FrequencyGrid, MonoBlockState};
use crate::tensor::{Scalar, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha12Rng;

pub const LEAKY_SLOPE: f64 = 0.01;

/// Build variants, ordered as an ablation ladder.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Variant {
    /// Plain reduced backbone, no phase features.
    Base,
    /// One filter, one scale, additive injection at stage 1 only.
    E1,
    /// Three filters, single scale, additive injection at stages 1-3.
    E123,
    /// Three filters, three scales, additive injection at stages 1-3.
    E123V2,
    /// Full model: multi-scale features with learnable channel-wise gates.
    E123V2Gated,
}

impl Variant {
    /// Number of log-Gabor filters (k).
    pub fn filters(self) -> usize {
        match self {
            Variant::Base => 0,
            Variant::E1 => 1,
            _ => 3,
        }
    }

    /// Scales per filter (m).
    pub fn scales(self) -> usize {
        match self {
            Variant::Base => 0,
            Variant::E1 | Variant::E123 => 1,
            _ => 3,
        }
    }

    /// 1-based encoder stages receiving phase features.
    pub fn gate_stages(self) -> &'static [usize] {
        match self {
            Variant::Base => &[],
            Variant::E1 => &[1],
            _ => &[1, 2, 3],
        }
    }

    /// Whether injection is weighted by learnable alpha (vs plain addition).
    pub fn gated(self) -> bool {
        matches!(self, Variant::E123V2Gated)
    }

    pub fn name(self) -> &'static str {
        match self {
            Variant::Base => "base",
            Variant::E1 => "e1",
            Variant::E123 => "e123",
            Variant::E123V2 => "e123v2",
            Variant::E123V2Gated => "full",
        }
    }

    pub fn parse(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "base" => Ok(Variant::Base),
            "e1" => Ok(Variant::E1),
            "e123" => Ok(Variant::E123),
            "e123v2" => Ok(Variant::E123V2),
            "full" | "e123v2gated" => Ok(Variant::E123V2Gated),
            other => Err(Error::InvalidArgument(format!(
                "unknown variant '{other}' (expected base|e1|e123|e123v2|full)"
            ))),
        }
    }

    fn tag(self) -> u8 {
        match self {
            Variant::Base => 0,
            Variant::E1 => 1,
            Variant::E123 => 2,
            Variant::E123V2 => 3,
            Variant::E123V2Gated => 4,
        }
    }

    fn from_tag(t: u8) -> Result<Self> {
        Ok(match t {
            0 => Variant::Base,
            1 => Variant::E1,
            2 => Variant::E123,
            3 => Variant::E123V2,
            4 => Variant::E123V2Gated,
            other => {
                return Err(Error::Data(format!("unknown variant tag {other}")));
            }
        })
    }
}

/// Architecture description: input size, channel width, and variant. The
/// stage count follows from the input size (downsampling to a 4x4 bottom).
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ModelSpec {
    pub image_size: usize,
    pub channels: usize,
    pub variant: Variant,
}

impl ModelSpec {
    pub fn new(variant: Variant, image_size: usize, channels: usize) -> Result<Self> {
        if !image_size.is_power_of_two() || image_size < 8 {
            return Err(Error::InvalidArgument(format!(
                "image size must be a power of two >= 8, got {image_size}"
            )));
        }
        if channels == 0 {
            return Err(Error::InvalidArgument("channel width must be positive".into()));
        }
        Ok(ModelSpec {
            image_size,
            channels,
            variant,
        })
    }

    /// The standard configuration: 256x256 input, C = 2.
    pub fn standard(variant: Variant) -> Self {
        ModelSpec {
            image_size: 256,
            channels: 2,
            variant,
        }
    }

    /// Number of resolution stages (256 -> 7 stages down to 4x4).
    pub fn stages(&self) -> usize {
        (self.image_size / 4).trailing_zeros() as usize + 1
    }

    pub fn gate_stages(&self) -> Vec<usize> {
        self.variant
            .gate_stages()
            .iter()
            .copied()
            .filter(|&s| s <= self.stages())
            .collect()
    }
}

#[derive(Debug, Clone)]
pub struct ConvParams<T> {
    pub weight: Parameter<T>,
    pub bias: Parameter<T>,
}

#[derive(Debug, Clone)]
pub struct NormParams<T> {
    pub gamma: Parameter<T>,
    pub beta: Parameter<T>,
}

#[derive(Debug, Clone)]
pub struct EncoderStage<T> {
    pub conv1: ConvParams<T>,
    pub norm1: NormParams<T>,
    pub conv2: ConvParams<T>,
    pub norm2: NormParams<T>,
}

#[derive(Debug, Clone)]
pub struct DecoderStage<T> {
    pub up: ConvParams<T>,
    pub conv: ConvParams<T>,
    pub norm: NormParams<T>,
}

/// Gate for one injected stage: pointwise projection of the combined phase
/// channels to the encoder width, plus optional channel weights alpha.
/// Alpha starts at zero so training begins from the ungated baseline.
#[derive(Debug, Clone)]
pub struct GateParams<T> {
    pub proj: ConvParams<T>,
    pub alpha: Option<Parameter<T>>,
}

/// All parameters of one model instance.
#[derive(Debug, Clone)]
pub struct ModelState<T> {
    pub spec: ModelSpec,
    pub encoder: Vec<EncoderStage<T>>,
    pub decoder: Vec<DecoderStage<T>>,
    pub head: ConvParams<T>,
    pub mono: Option<MonoBlockState<T>>,
    pub gates: Vec<GateParams<T>>,
}

fn he_conv<T: Scalar>(
    name: String,
    shape: &[usize],
    fan_in: usize,
    rng: &mut ChaCha12Rng,
) -> Parameter<T> {
    let std = (2.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| T::of_f64(monogenic::normal_sample(rng) * std))
        .collect();
    Parameter::new(name, Tensor::new(shape, data).expect("sized"))
}

fn conv_params<T: Scalar>(
    name: &str,
    co: usize,
    ci: usize,
    k: usize,
    rng: &mut ChaCha12Rng,
) -> ConvParams<T> {
    ConvParams {
        weight: he_conv(format!("{name}.weight"), &[co, ci, k, k], ci * k * k, rng),
        bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[co])),
    }
}

fn tconv_params<T: Scalar>(name: &str, ci: usize, co: usize, rng: &mut ChaCha12Rng) -> ConvParams<T> {
    ConvParams {
        weight: he_conv(format!("{name}.weight"), &[ci, co, 2, 2], ci * 4, rng),
        bias: Parameter::new(format!("{name}.bias"), Tensor::zeros(&[co])),
    }
}

fn norm_params<T: Scalar>(name: &str, c: usize) -> NormParams<T> {
    NormParams {
        gamma: Parameter::new(format!("{name}.gamma"), Tensor::full(&[c], T::one())),
        beta: Parameter::new(format!("{name}.beta"), Tensor::zeros(&[c])),
    }
}

/// Deterministic model construction: He-style fan-in scaling for conv
/// weights, zero biases, unit norm scales, zero alpha. The same seed yields
/// bit-identical parameter buffers.
pub fn build<T: Scalar>(spec: &ModelSpec, seed: u64) -> ModelState<T> {
    let mut rng = ChaCha12Rng::seed_from_u64(seed);
    let c = spec.channels;
    let stages = spec.stages();

    let mut encoder = Vec::with_capacity(stages);
    for s in 0..stages {
        let cin = if s == 0 { 1 } else { c };
        encoder.push(EncoderStage {
            conv1: conv_params(&format!("enc{}.conv1", s + 1), c, cin, 3, &mut rng),
            norm1: norm_params(&format!("enc{}.norm1", s + 1), c),
            conv2: conv_params(&format!("enc{}.conv2", s + 1), c, c, 3, &mut rng),
            norm2: norm_params(&format!("enc{}.norm2", s + 1), c),
        });
    }
    let mut decoder = Vec::with_capacity(stages - 1);
    for s in (0..stages - 1).rev() {
        // decoder stage producing the resolution of encoder stage s+1
        decoder.push(DecoderStage {
            up: tconv_params(&format!("dec{}.up", s + 1), c, c, &mut rng),
            conv: conv_params(&format!("dec{}.conv", s + 1), c, 2 * c, 3, &mut rng),
            norm: norm_params(&format!("dec{}.norm", s + 1), c),
        });
    }
    let head = conv_params("head", 1, c, 1, &mut rng);

    let (mono, gates) = if spec.variant == Variant::Base {
        (None, Vec::new())
    } else {
        let k = spec.variant.filters();
        let m = spec.variant.scales();
        let mono = MonoBlockState::init(k, m, &mut rng);
        let gates = spec
            .gate_stages()
            .iter()
            .map(|&s| GateParams {
                proj: conv_params(&format!("gate{s}.proj"), c, k, 1, &mut rng),
                alpha: spec.variant.gated().then(|| {
                    Parameter::new(format!("gate{s}.alpha"), Tensor::zeros(&[c]))
                }),
            })
            .collect();
        (Some(mono), gates)
    };

    ModelState {
        spec: *spec,
        encoder,
        decoder,
        head,
        mono,
        gates,
    }
}

impl<T: Scalar> ModelState<T> {
    /// All parameters in a stable order (the registration and checkpoint order).
    pub fn params(&self) -> Vec<&Parameter<T>> {
        let mut out = Vec::new();
        for s in &self.encoder {
            out.extend([
                &s.conv1.weight,
                &s.conv1.bias,
                &s.norm1.gamma,
                &s.norm1.beta,
                &s.conv2.weight,
                &s.conv2.bias,
                &s.norm2.gamma,
                &s.norm2.beta,
            ]);
        }
        for s in &self.decoder {
            out.extend([
                &s.up.weight,
                &s.up.bias,
                &s.conv.weight,
                &s.conv.bias,
                &s.norm.gamma,
                &s.norm.beta,
            ]);
        }
        out.push(&self.head.weight);
        out.push(&self.head.bias);
        if let Some(mono) = &self.mono {
            out.extend(mono.params());
        }
        for gate in &self.gates {
            out.push(&gate.proj.weight);
            out.push(&gate.proj.bias);
            if let Some(alpha) = &gate.alpha {
                out.push(alpha);
            }
        }
        out
    }

    pub fn params_mut(&mut self) -> Vec<&mut Parameter<T>> {
        let mut out: Vec<&mut Parameter<T>> = Vec::new();
        for s in &mut self.encoder {
            out.extend([
                &mut s.conv1.weight,
                &mut s.conv1.bias,
                &mut s.norm1.gamma,
                &mut s.norm1.beta,
                &mut s.conv2.weight,
                &mut s.conv2.bias,
                &mut s.norm2.gamma,
                &mut s.norm2.beta,
            ]);
        }
        for s in &mut self.decoder {
            out.extend([
                &mut s.up.weight,
                &mut s.up.bias,
                &mut s.conv.weight,
                &mut s.conv.bias,
                &mut s.norm.gamma,
                &mut s.norm.beta,
            ]);
        }
        out.push(&mut self.head.weight);
        out.push(&mut self.head.bias);
        if let Some(mono) = &mut self.mono {
            out.extend(mono.params_mut());
        }
        for gate in &mut self.gates {
            out.push(&mut gate.proj.weight);
            out.push(&mut gate.proj.bias);
            if let Some(alpha) = &mut gate.alpha {
                out.push(alpha);
            }
        }
        out
    }

    pub fn param_count(&self) -> usize {
        self.params().iter().map(|p| p.numel()).sum()
    }

    pub fn cast<U: Scalar>(&self) -> ModelState<U> {
        let mut out = build::<U>(&self.spec, 0);
        for (dst, src) in out.params_mut().into_iter().zip(self.params()) {
            dst.tensor = src.tensor.cast::<U>();
        }
        out
    }
}

/// Closed-form parameter count of the plain backbone.
pub fn backbone_param_formula(spec: &ModelSpec) -> usize {
    let c = spec.channels;
    let stages = spec.stages();
    let conv = |ci: usize, co: usize, k: usize| co * ci * k * k + co;
    let norm = 2 * c;
    let enc_stage1 = conv(1, c, 3) + norm + conv(c, c, 3) + norm;
    let enc_rest = (stages - 1) * (2 * (conv(c, c, 3) + norm));
    let dec = (stages - 1) * (c * c * 4 + c + conv(2 * c, c, 3) + norm);
    enc_stage1 + enc_rest + dec + conv(c, 1, 1)
}

/// Closed-form parameter count added by the mono block and gates on top of
/// the backbone: 3 per filter, the pointwise combiner, one projection per
/// gated stage, and alpha when gating is learnable.
pub fn mono_gate_param_formula(spec: &ModelSpec) -> usize {
    let k = spec.variant.filters();
    let m = spec.variant.scales();
    if k == 0 {
        return 0;
    }
    let c = spec.channels;
    let g = spec.gate_stages().len();
    let filters = 3 * k;
    let combiner = k * (k * m) + k;
    let proj = g * (c * k + c);
    let alpha = if spec.variant.gated() { g * c } else { 0 };
    filters + combiner + proj + alpha
}

/// The forward graph of one batch: raw parameter leaves in
/// [`ModelState::params`] order and the probability output node.
pub struct GraphModel {
    pub leaves: Vec<NodeId>,
    pub output: NodeId,
}

struct ConvRefs {
    w: NodeId,
    b: NodeId,
}

fn register_conv<T: Scalar>(
    g: &mut Graph<T>,
    p: &ConvParams<T>,
    leaves: &mut Vec<NodeId>,
) -> Result<ConvRefs> {
    let (lw, w) = g.param(&p.weight)?;
    let (lb, b) = g.param(&p.bias)?;
    leaves.push(lw);
    leaves.push(lb);
    Ok(ConvRefs { w, b })
}

fn register_norm<T: Scalar>(
    g: &mut Graph<T>,
    p: &NormParams<T>,
    leaves: &mut Vec<NodeId>,
) -> Result<(NodeId, NodeId)> {
    let (lg, gamma) = g.param(&p.gamma)?;
    let (lb, beta) = g.param(&p.beta)?;
    leaves.push(lg);
    leaves.push(lb);
    Ok((gamma, beta))
}

fn conv_block<T: Scalar>(
    g: &mut Graph<T>,
    x: NodeId,
    conv: &ConvRefs,
    norm: (NodeId, NodeId),
    stride: usize,
) -> Result<NodeId> {
    let y = g.conv2d(x, conv.w, Some(conv.b), stride, 1)?;
    let y = g.instance_norm(y, norm.0, norm.1)?;
    Ok(g.leaky_relu(y, LEAKY_SLOPE))
}

/// Run the model forward on a [N, 1, S, S] batch, returning probabilities in
/// (0, 1). The input is expected to be z-score normalized per image.
pub fn forward<T: Scalar>(
    g: &mut Graph<T>,
    state: &ModelState<T>,
    image: Tensor<T>,
) -> Result<GraphModel> {
    let s = state.spec.image_size;
    if image.shape().len() != 4 || image.shape()[1] != 1 || image.shape()[2] != s || image.shape()[3] != s
    {
        return Err(Error::ShapeMismatch(format!(
            "forward expects [N,1,{s},{s}], got {:?}",
            image.shape()
        )));
    }
    let input = g.constant(image);
    let mut leaves = Vec::new();

    // register in params() order
    let mut enc_refs = Vec::new();
    for stage in &state.encoder {
        let c1 = register_conv(g, &stage.conv1, &mut leaves)?;
        let n1 = register_norm(g, &stage.norm1, &mut leaves)?;
        let c2 = register_conv(g, &stage.conv2, &mut leaves)?;
        let n2 = register_norm(g, &stage.norm2, &mut leaves)?;
        enc_refs.push((c1, n1, c2, n2));
    }
    let mut dec_refs = Vec::new();
    for stage in &state.decoder {
        let up = register_conv(g, &stage.up, &mut leaves)?;
        let conv = register_conv(g, &stage.conv, &mut leaves)?;
        let norm = register_norm(g, &stage.norm, &mut leaves)?;
        dec_refs.push((up, conv, norm));
    }
    let head = register_conv(g, &state.head, &mut leaves)?;
    let mono_refs = match &state.mono {
        Some(mono) => {
            let refs = monogenic::register_mono(g, mono)?;
            leaves.extend_from_slice(&refs.leaves);
            Some(refs)
        }
        None => None,
    };
    let mut gate_refs = Vec::new();
    for gate in &state.gates {
        let proj = register_conv(g, &gate.proj, &mut leaves)?;
        let alpha = match &gate.alpha {
            Some(a) => {
                let (la, alpha) = g.param(a)?;
                leaves.push(la);
                Some(alpha)
            }
            None => None,
        };
        gate_refs.push((proj, alpha));
    }

    // mono features at full resolution
    let mono_out = match (&state.mono, &mono_refs) {
        (Some(mono), Some(refs)) => {
            let grid = FrequencyGrid::new(s, s);
            Some(monogenic::mono_block(g, &grid, input, refs, mono.m_scales())?)
        }
        _ => None,
    };

    let gate_stages = state.spec.gate_stages();

    // encoder
    let mut skips = Vec::with_capacity(state.encoder.len());
    let mut x = input;
    for (i, (c1, n1, c2, n2)) in enc_refs.iter().enumerate() {
        let stride = if i == 0 { 1 } else { 2 };
        let y = conv_block(g, x, c1, *n1, stride)?;
        let mut y = conv_block(g, y, c2, *n2, 1)?;
        if let Some(pos) = gate_stages.iter().position(|&gs| gs == i + 1) {
            let mono_out = mono_out.expect("gate stages imply a mono block");
            let pool = 1usize << i;
            let phase_s = if pool == 1 {
                mono_out
            } else {
                g.avg_pool2d(mono_out, pool, pool)?
            };
            let (proj, alpha) = &gate_refs[pos];
            let injected = g.conv2d(phase_s, proj.w, Some(proj.b), 1, 0)?;
            let injected = match alpha {
                Some(a) => g.scale_channels(injected, *a)?,
                None => injected,
            };
            y = g.add(y, injected)?;
        }
        skips.push(y);
        x = y;
    }

    // decoder: from the bottom stage back up to full resolution
    let mut y = *skips.last().expect("at least one stage");
    for (d, (up, conv, norm)) in dec_refs.iter().enumerate() {
        let skip = skips[skips.len() - 2 - d];
        let up_out = g.conv_transpose2d(y, up.w, Some(up.b))?;
        let cat = g.concat(&[up_out, skip])?;
        y = conv_block(g, cat, conv, *norm, 1)?;
    }

    let logits = g.conv2d(y, head.w, Some(head.b), 1, 0)?;
    let output = g.sigmoid(logits);
    Ok(GraphModel { leaves, output })
}

/// Convenience inference entry point: forward pass, values copied out.
pub fn predict<T: Scalar>(state: &ModelState<T>, image: Tensor<T>) -> Result<Tensor<T>> {
    let mut g = Graph::new();
    let model = forward(&mut g, state, image)?;
    Ok(g.tensor(model.output))
}

// ── FLOP accounting ─────────────────────────────────────────────────
//
// Multiply-accumulate counts as 2 FLOPs. Per-element costs: instance norm 8,
// leaky ReLU 1, sigmoid 4, average pooling k^2+1 per output, gate addition 1
// (plus 1 for the alpha scale). One FFT costs 5*H*W*log2(H*W) real FLOPs; the
// mono block runs one forward transform plus three inverse transforms per
// (filter, scale), and per spectral map: 4 FLOPs/bin to build the filter
// response, 2/bin per complex-by-real product, and 7/pixel for the phase.

/// FLOP count of one forward pass at batch 1, split by source.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct FlopBreakdown {
    pub conv: u64,
    pub fft: u64,
    pub norm_act: u64,
    pub other: u64,
}

impl FlopBreakdown {
    pub fn total(&self) -> u64 {
        self.conv + self.fft + self.norm_act + self.other
    }
}

fn conv_flops(ci: usize, co: usize, k: usize, out_hw: usize) -> u64 {
    (out_hw * co * (2 * ci * k * k) + out_hw * co) as u64
}

/// Analytic FLOP count of one forward pass of `spec` at its configured input
/// size (batch 1). Deterministic by construction.
pub fn count_flops(spec: &ModelSpec) -> FlopBreakdown {
    let c = spec.channels;
    let s = spec.image_size;
    let stages = spec.stages();
    let mut f = FlopBreakdown::default();

    let norm_block = |hw: usize| (8 * hw * c + hw * c) as u64; // norm + leaky relu

    // encoder
    for i in 0..stages {
        let hw = (s >> i) * (s >> i);
        let cin = if i == 0 { 1 } else { c };
        f.conv += conv_flops(cin, c, 3, hw);
        f.conv += conv_flops(c, c, 3, hw);
        f.norm_act += 2 * norm_block(hw);
    }
    // decoder
    for i in (0..stages - 1).rev() {
        let hw_out = (s >> i) * (s >> i);
        let hw_in = hw_out / 4;
        // 2x2 transposed conv: every input pixel feeds 4 output taps
        f.conv += (hw_in * c * c * 4 * 2 + hw_out * c) as u64;
        f.conv += conv_flops(2 * c, c, 3, hw_out);
        f.norm_act += norm_block(hw_out);
    }
    // head + sigmoid
    f.conv += conv_flops(c, 1, 1, s * s);
    f.norm_act += (4 * s * s) as u64;

    // mono block and gates
    let k = spec.variant.filters();
    let m = spec.variant.scales();
    if k > 0 {
        let hw = s * s;
        let fft_one = (5.0 * hw as f64 * (hw as f64).log2()) as u64;
        let transforms = 1 + 3 * k * m;
        f.fft += transforms as u64 * fft_one;
        // per (filter, scale): filter build, spectral product, two Riesz
        // products, phase extraction
        f.other += (k * m) as u64 * (4 * hw + 2 * hw + 2 * 2 * hw + 7 * hw) as u64;
        // combiner 1x1
        f.conv += conv_flops(k * m, k, 1, hw);
        for &gs in &spec.gate_stages() {
            let hw_s = (s >> (gs - 1)) * (s >> (gs - 1));
            let pool = 1usize << (gs - 1);
            if pool > 1 {
                f.other += (hw_s * k * (pool * pool + 1)) as u64;
            }
            f.conv += conv_flops(k, c, 1, hw_s);
            f.other += (hw_s * c) as u64; // addition
            if spec.variant.gated() {
                f.other += (hw_s * c) as u64; // alpha scale
            }
        }
    }
    f
}

// ── Checkpoint format ───────────────────────────────────────────────
//
// Little-endian binary: magic "MUNC", version u32, variant tag u8, channels
// u32, image_size u32, param count u32, then per parameter: name length u32,
// name bytes, ndim u32, dims (u32 each), raw f32 values. Round-trips are
// bit-exact.

const CKPT_MAGIC: &[u8; 4] = b"MUNC";
const CKPT_VERSION: u32 = 1;

pub fn save_checkpoint(state: &ModelState<f32>, path: &Path) -> Result<()> {
    let mut buf: Vec<u8> = Vec::new();
    buf.extend_from_slice(CKPT_MAGIC);
    buf.extend_from_slice(&CKPT_VERSION.to_le_bytes());
    buf.push(state.spec.variant.tag());
    buf.extend_from_slice(&(state.spec.channels as u32).to_le_bytes());
    buf.extend_from_slice(&(state.spec.image_size as u32).to_le_bytes());
    let params = state.params();
    buf.extend_from_slice(&(params.len() as u32).to_le_bytes());
    for p in params {
        let name = p.name.as_bytes();
        buf.extend_from_slice(&(name.len() as u32).to_le_bytes());
        buf.extend_from_slice(name);
        buf.extend_from_slice(&(p.tensor.shape().len() as u32).to_le_bytes());
        for &d in p.tensor.shape() {
            buf.extend_from_slice(&(d as u32).to_le_bytes());
        }
        for &v in p.tensor.data() {
            buf.extend_from_slice(&v.to_le_bytes());
        }
    }
    std::fs::write(path, &buf).map_err(|e| Error::io(path.display().to_string(), e))
}

pub fn load_checkpoint(path: &Path) -> Result<ModelState<f32>> {
    let data = std::fs::read(path).map_err(|e| Error::io(path.display().to_string(), e))?;
    let mut r = ByteReader::new(&data, path);
    let magic = r.bytes(4)?;
    if magic != CKPT_MAGIC {
        return Err(Error::Data(format!(
            "{}: not a checkpoint file (bad magic)",
            path.display()
        )));
    }
    let version = r.u32()?;
    if version != CKPT_VERSION {
        return Err(Error::Data(format!(
            "{}: unsupported checkpoint version {version}",
            path.display()
        )));
    }
    let variant = Variant::from_tag(r.u8()?)?;
    let channels = r.u32()? as usize;
    let image_size = r.u32()? as usize;
    let spec = ModelSpec::new(variant, image_size, channels)?;
    let mut state = build::<f32>(&spec, 0);
    let n_params = r.u32()? as usize;
    {
        let mut params = state.params_mut();
        if n_params != params.len() {
            return Err(Error::Data(format!(
                "{}: checkpoint holds {n_params} parameters, model expects {}",
                path.display(),
                params.len()
            )));
        }
        for p in params.iter_mut() {
            let name_len = r.u32()? as usize;
            let name = String::from_utf8(r.bytes(name_len)?.to_vec())
                .map_err(|_| Error::Data(format!("{}: bad parameter name", path.display())))?;
            if name != p.name {
                return Err(Error::Data(format!(
                    "{}: parameter order mismatch: found '{name}', expected '{}'",
                    path.display(),
                    p.name
                )));
            }
            let ndim = r.u32()? as usize;
            let mut shape = Vec::with_capacity(ndim);
            for _ in 0..ndim {
                shape.push(r.u32()? as usize);
            }
            if shape != p.tensor.shape() {
                return Err(Error::Data(format!(
                    "{}: shape mismatch for '{name}': {shape:?} vs {:?}",
                    path.display(),
                    p.tensor.shape()
                )));
            }
            let numel: usize = shape.iter().product();
            let mut values = Vec::with_capacity(numel);
            for _ in 0..numel {
                values.push(f32::from_le_bytes(r.bytes(4)?.try_into().unwrap()));
            }
            p.tensor = Tensor::new(&shape, values)?;
        }
    }
    Ok(state)
}

struct ByteReader<'a> {
    data: &'a [u8],
    pos: usize,
    path: String,
}

impl<'a> ByteReader<'a> {
    fn new(data: &'a [u8], path: &Path) -> Self {
        ByteReader {
            data,
            pos: 0,
            path: path.display().to_string(),
        }
    }

    fn bytes(&mut self, n: usize) -> Result<&'a [u8]> {
        if self.pos + n > self.data.len() {
            return Err(Error::Data(format!("{}: truncated checkpoint", self.path)));
        }
        let s = &self.data[self.pos..self.pos + n];
        self.pos += n;
        Ok(s)
    }

    fn u8(&mut self) -> Result<u8> {
        Ok(self.bytes(1)?[0])
    }

    fn u32(&mut self) -> Result<u32> {
        Ok(u32::from_le_bytes(self.bytes(4)?.try_into().unwrap()))
    }
}

// keep Read/Write imports minimal for potential stream use
#[allow(unused)]
fn _assert_io_traits<R: Read, W: Write>() {}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradcheck::test_tensor;

    #[test]
    fn base_param_count_near_target() {
        let spec = ModelSpec::standard(Variant::Base);
        let state = build::<f32>(&spec, 0);
        let n = state.param_count();
        assert!((1100..=1180).contains(&n), "base param count {n}");
        assert_eq!(n, backbone_param_formula(&spec));
    }

    #[test]
    fn c4_param_count_near_4300() {
        let spec = ModelSpec::new(Variant::Base, 256, 4).unwrap();
        let n = build::<f32>(&spec, 0).param_count();
        let lo = (4300.0 * 0.9) as usize;
        let hi = (4300.0 * 1.1) as usize;
        assert!((lo..=hi).contains(&n), "C=4 param count {n}");
    }

    #[test]
    fn full_variant_count_is_base_plus_formula() {
        for variant in [Variant::E1, Variant::E123, Variant::E123V2, Variant::E123V2Gated] {
            let spec = ModelSpec::standard(variant);
            let base = ModelSpec::standard(Variant::Base);
            let n = build::<f32>(&spec, 0).param_count();
            let nb = build::<f32>(&base, 0).param_count();
            assert_eq!(n, nb + mono_gate_param_formula(&spec), "variant {variant:?}");
        }
        let full = build::<f32>(&ModelSpec::standard(Variant::E123V2Gated), 0).param_count();
        assert!(full <= 1500, "full model {full} params");
    }

    #[test]
    fn same_seed_builds_identical_parameters() {
        let spec = ModelSpec::standard(Variant::E123V2Gated);
        let a = build::<f32>(&spec, 42);
        let b = build::<f32>(&spec, 42);
        for (pa, pb) in a.params().iter().zip(b.params().iter()) {
            assert_eq!(pa.name, pb.name);
            assert!(pa
                .tensor
                .data()
                .iter()
                .zip(pb.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let c = build::<f32>(&spec, 43);
        assert!(a
            .params()
            .iter()
            .zip(c.params().iter())
            .any(|(x, y)| x.tensor.data() != y.tensor.data()));
    }

    #[test]
    fn stage_count_follows_image_size() {
        assert_eq!(ModelSpec::standard(Variant::Base).stages(), 7);
        assert_eq!(
            ModelSpec::new(Variant::Base, 32, 2).unwrap().stages(),
            4
        );
        assert_eq!(ModelSpec::new(Variant::Base, 8, 2).unwrap().stages(), 2);
    }

    #[test]
    fn forward_shapes_and_output_range() {
        let spec = ModelSpec::new(Variant::E123V2Gated, 32, 2).unwrap();
        let state = build::<f32>(&spec, 7);
        let img = test_tensor(&[2, 1, 32, 32], 3).cast::<f32>();
        let out = predict(&state, img).unwrap();
        assert_eq!(out.shape(), &[2, 1, 32, 32]);
        for &v in out.data() {
            assert!(v > 0.0 && v < 1.0, "output {v} outside (0,1)");
        }
    }

    #[test]
    fn constant_zero_input_gives_finite_output() {
        let spec = ModelSpec::new(Variant::E123V2Gated, 32, 2).unwrap();
        let state = build::<f32>(&spec, 7);
        let out = predict(&state, Tensor::zeros(&[1, 1, 32, 32])).unwrap();
        for &v in out.data() {
            assert!(v.is_finite() && v > 0.0 && v < 1.0);
        }
    }

    #[test]
    fn wrong_input_size_rejected() {
        let spec = ModelSpec::new(Variant::Base, 32, 2).unwrap();
        let state = build::<f32>(&spec, 7);
        assert!(predict(&state, Tensor::<f32>::zeros(&[1, 1, 16, 16])).is_err());
        assert!(predict(&state, Tensor::<f32>::zeros(&[1, 2, 32, 32])).is_err());
    }

    #[test]
    fn zero_alpha_gated_model_equals_base_exactly() {
        // same seed: backbone draws happen first and are identical
        let full_spec = ModelSpec::new(Variant::E123V2Gated, 64, 2).unwrap();
        let base_spec = ModelSpec::new(Variant::Base, 64, 2).unwrap();
        let full = build::<f32>(&full_spec, 11);
        let base = build::<f32>(&base_spec, 11);
        let img = test_tensor(&[1, 1, 64, 64], 12).cast::<f32>();
        let a = predict(&full, img.clone()).unwrap();
        let b = predict(&base, img).unwrap();
        assert!(a
            .data()
            .iter()
            .zip(b.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
    }

    #[test]
    fn ungated_variant_differs_from_base() {
        let spec = ModelSpec::new(Variant::E123V2, 32, 2).unwrap();
        let base = ModelSpec::new(Variant::Base, 32, 2).unwrap();
        let img = test_tensor(&[1, 1, 32, 32], 13).cast::<f32>();
        let a = predict(&build::<f32>(&spec, 5), img.clone()).unwrap();
        let b = predict(&build::<f32>(&base, 5), img).unwrap();
        assert!(a.data().iter().zip(b.data()).any(|(x, y)| x != y));
    }

    #[test]
    fn flop_count_is_deterministic_and_in_range() {
        let spec = ModelSpec::standard(Variant::E123V2Gated);
        let a = count_flops(&spec);
        let b = count_flops(&spec);
        assert_eq!(a, b);
        let total = a.total() as f64 / 1e9;
        assert!(
            (0.04..=0.20).contains(&total),
            "full model {total} GFLOPs outside expected window"
        );
        let base = count_flops(&ModelSpec::standard(Variant::Base));
        assert!(base.total() < a.total());
        assert_eq!(base.fft, 0);
    }

    #[test]
    fn conv_flops_scale_linearly_with_input_area() {
        // quadrupling the input area quadruples the conv FLOPs (the counter
        // is linear in pixel count; the extra bottom stage contributes a
        // vanishing fraction)
        let small = count_flops(&ModelSpec::new(Variant::Base, 128, 2).unwrap());
        let large = count_flops(&ModelSpec::new(Variant::Base, 256, 2).unwrap());
        let ratio = large.conv as f64 / small.conv as f64;
        assert!((3.96..=4.04).contains(&ratio), "conv ratio {ratio}");
    }

    #[test]
    fn checkpoint_round_trip_is_bit_exact() {
        let dir = std::env::temp_dir().join(format!("munc_ckpt_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("model.ckpt");
        let spec = ModelSpec::new(Variant::E123V2Gated, 32, 2).unwrap();
        let state = build::<f32>(&spec, 21);
        save_checkpoint(&state, &path).unwrap();
        let loaded = load_checkpoint(&path).unwrap();
        assert_eq!(loaded.spec, spec);
        for (a, b) in state.params().iter().zip(loaded.params().iter()) {
            assert_eq!(a.name, b.name);
            assert!(a
                .tensor
                .data()
                .iter()
                .zip(b.tensor.data())
                .all(|(x, y)| x.to_bits() == y.to_bits()));
        }
        let img = test_tensor(&[1, 1, 32, 32], 22).cast::<f32>();
        let before = predict(&state, img.clone()).unwrap();
        let after = predict(&loaded, img).unwrap();
        assert!(before
            .data()
            .iter()
            .zip(after.data())
            .all(|(x, y)| x.to_bits() == y.to_bits()));
        std::fs::remove_dir_all(&dir).ok();
    }

    #[test]
    fn corrupt_checkpoint_rejected() {
        let dir = std::env::temp_dir().join(format!("munc_ckpt_bad_{}", std::process::id()));
        std::fs::create_dir_all(&dir).unwrap();
        let path = dir.join("bad.ckpt");
        std::fs::write(&path, b"not a checkpoint").unwrap();
        assert!(load_checkpoint(&path).is_err());
        std::fs::remove_dir_all(&dir).ok();
    }
}

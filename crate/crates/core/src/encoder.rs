//! Wav2vec-style speech encoder: a strided convolutional feature extractor
//! over raw audio followed by a pre-norm transformer stack. The output is
//! the hidden state after a configurable transformer block.

use ndarray::{s, Array1, Array2};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::audio::Waveform;
use crate::error::{Error, Result};
use crate::frontend::{FeatureKind, FeatureSequence};
use crate::tensor::{scaled_normal, Linear, NamedTensors};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct EncoderConfig {
    pub sample_rate: u32,
    /// `(out_channels, kernel, stride)` per convolution.
    pub conv_layers: Vec<(usize, usize, usize)>,
    pub d_model: usize,
    pub n_layers: usize,
    pub n_heads: usize,
    pub ffn_dim: usize,
    /// 1-based index of the transformer block whose output is returned.
    pub truncate_layer: usize,
    pub positional_conv_kernel: usize,
    /// Channel groups of the positional convolution.
    pub positional_conv_groups: usize,
    pub layernorm_eps: f64,
}

impl Default for EncoderConfig {
    fn default() -> Self {
        Self {
            sample_rate: 16000,
            conv_layers: vec![(64, 10, 5), (64, 3, 2), (64, 3, 2), (64, 3, 2)],
            d_model: 64,
            n_layers: 6,
            n_heads: 4,
            ffn_dim: 256,
            truncate_layer: 3,
            positional_conv_kernel: 15,
            positional_conv_groups: 1,
            layernorm_eps: 1e-5,
        }
    }
}

impl EncoderConfig {
    /// XLSR-53 sized encoder (shape validation only).
    pub fn xlsr_53() -> Self {
        let mut conv = vec![(512, 10, 5)];
        conv.extend(std::iter::repeat((512, 3, 2)).take(4));
        conv.extend(std::iter::repeat((512, 2, 2)).take(2));
        Self {
            sample_rate: 16000,
            conv_layers: conv,
            d_model: 1024,
            n_layers: 24,
            n_heads: 16,
            ffn_dim: 4096,
            truncate_layer: 12,
            positional_conv_kernel: 128,
            positional_conv_groups: 16,
            layernorm_eps: 1e-5,
        }
    }

    /// XLS-R 1B sized encoder (shape validation only).
    pub fn xls_r_1b() -> Self {
        Self {
            d_model: 1280,
            n_layers: 48,
            ffn_dim: 5120,
            ..Self::xlsr_53()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.conv_layers.is_empty() {
            return Err(Error::Config("encoder needs at least one convolution".into()));
        }
        if self
            .conv_layers
            .iter()
            .any(|&(c, k, s)| c == 0 || k == 0 || s == 0)
        {
            return Err(Error::Config("convolution dims must be >= 1".into()));
        }
        if [self.d_model, self.n_layers, self.n_heads, self.ffn_dim, self.positional_conv_kernel]
            .contains(&0)
        {
            return Err(Error::Config("encoder dims must be >= 1".into()));
        }
        if self.d_model % self.n_heads != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by n_heads {}",
                self.d_model, self.n_heads
            )));
        }
        if !(1..=self.n_layers).contains(&self.truncate_layer) {
            return Err(Error::Config(format!(
                "truncate_layer {} outside 1..={}",
                self.truncate_layer, self.n_layers
            )));
        }
        if self.positional_conv_groups == 0 || self.d_model % self.positional_conv_groups != 0 {
            return Err(Error::Config(format!(
                "d_model {} is not divisible by positional_conv_groups {}",
                self.d_model, self.positional_conv_groups
            )));
        }
        if !(self.layernorm_eps > 0.0) {
            return Err(Error::Config("layernorm_eps must be positive".into()));
        }
        Ok(())
    }

    pub fn conv_dim(&self) -> usize {
        self.conv_layers.last().map(|l| l.0).unwrap_or(0)
    }

    /// Number of latent frames for `n` input samples.
    pub fn output_frames(&self, n: usize) -> usize {
        self.conv_layers.iter().fold(n, |len, &(_, k, s)| if len >= k { (len - k) / s + 1 } else { 0 })
    }

    /// Smallest input length yielding one latent frame.
    pub fn min_samples(&self) -> usize {
        self.conv_layers.iter().rev().fold(1, |n, &(_, k, s)| (n - 1) * s + k)
    }

    pub fn frame_shift(&self) -> f64 {
        self.conv_layers.iter().map(|l| l.2).product::<usize>() as f64 / f64::from(self.sample_rate)
    }

    pub fn receptive_field(&self) -> usize {
        self.min_samples()
    }

    /// Total number of scalar parameters.
    pub fn num_parameters(&self) -> usize {
        let mut n = 0;
        let mut c_in = 1;
        for &(c, k, _) in &self.conv_layers {
            n += c * c_in * k + c + 2 * c;
            c_in = c;
        }
        let d = self.d_model;
        n += 2 * c_in + d * c_in + d;
        n += d * (d / self.positional_conv_groups) * self.positional_conv_kernel + d;
        n += self.n_layers * (4 * d + 4 * (d * d + d) + 2 * self.ffn_dim * d + self.ffn_dim + d);
        n
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ConvLayer {
    /// `out x (kernel * in)`, tap-major.
    pub weight: Array2<f64>,
    pub bias: Array1<f64>,
    pub ln_gain: Array1<f64>,
    pub ln_bias: Array1<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LayerNorm {
    pub gain: Array1<f64>,
    pub bias: Array1<f64>,
}

impl LayerNorm {
    fn ones(dim: usize) -> Self {
        Self {
            gain: Array1::ones(dim),
            bias: Array1::zeros(dim),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TransformerLayer {
    pub ln_attn: LayerNorm,
    pub q: Linear,
    pub k: Linear,
    pub v: Linear,
    pub o: Linear,
    pub ln_ffn: LayerNorm,
    pub ffn_in: Linear,
    pub ffn_out: Linear,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EncoderWeights {
    pub conv: Vec<ConvLayer>,
    pub proj_ln: LayerNorm,
    pub proj: Linear,
    /// Positional convolution, `d x (kernel * d / groups)`.
    pub pos_conv: Linear,
    pub layers: Vec<TransformerLayer>,
}

/// Random initialization: weights ~ N(0, 1/fan_in), biases 0, layer-norm gains 1.
pub fn init_encoder<R: Rng + ?Sized>(cfg: &EncoderConfig, rng: &mut R) -> Result<EncoderWeights> {
    cfg.validate()?;
    let mut c_in = 1;
    let mut conv = Vec::with_capacity(cfg.conv_layers.len());
    for &(c, k, _) in &cfg.conv_layers {
        conv.push(ConvLayer {
            weight: scaled_normal((c, k * c_in), k * c_in, rng),
            bias: Array1::zeros(c),
            ln_gain: Array1::ones(c),
            ln_bias: Array1::zeros(c),
        });
        c_in = c;
    }
    let d = cfg.d_model;
    let proj_ln = LayerNorm::ones(c_in);
    let proj = Linear::init(d, c_in, rng);
    let pos_fan_in = cfg.positional_conv_kernel * d / cfg.positional_conv_groups;
    let pos_conv = Linear {
        weight: scaled_normal((d, pos_fan_in), pos_fan_in, rng),
        bias: Array1::zeros(d),
    };
    let layers = (0..cfg.n_layers)
        .map(|_| TransformerLayer {
            ln_attn: LayerNorm::ones(d),
            q: Linear::init(d, d, rng),
            k: Linear::init(d, d, rng),
            v: Linear::init(d, d, rng),
            o: Linear::init(d, d, rng),
            ln_ffn: LayerNorm::ones(d),
            ffn_in: Linear::init(cfg.ffn_dim, d, rng),
            ffn_out: Linear::init(d, cfg.ffn_dim, rng),
        })
        .collect();
    Ok(EncoderWeights {
        conv,
        proj_ln,
        proj,
        pos_conv,
        layers,
    })
}

pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + libm::erf(x / std::f64::consts::SQRT_2))
}

fn layer_norm(x: &Array2<f64>, ln: &LayerNorm, eps: f64) -> Array2<f64> {
    let mut out = x.clone();
    for mut row in out.outer_iter_mut() {
        let n = row.len() as f64;
        let mean = row.sum() / n;
        let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
        let inv = 1.0 / (var + eps).sqrt();
        for ((v, g), b) in row.iter_mut().zip(&ln.gain).zip(&ln.bias) {
            *v = (*v - mean) * inv * g + b;
        }
    }
    out
}

/// Unfold `x` (`T x C`) into `T_out x (kernel * C)` rows, tap-major.
fn im2col(x: &Array2<f64>, kernel: usize, stride: usize) -> Array2<f64> {
    let (t, c) = x.dim();
    let t_out = if t >= kernel { (t - kernel) / stride + 1 } else { 0 };
    let mut cols = Array2::zeros((t_out, kernel * c));
    for (i, mut row) in cols.outer_iter_mut().enumerate() {
        for j in 0..kernel {
            row.slice_mut(s![j * c..(j + 1) * c]).assign(&x.row(i * stride + j));
        }
    }
    cols
}

fn softmax_rows(m: &mut Array2<f64>) {
    for mut row in m.outer_iter_mut() {
        let max = row.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        row.mapv_inplace(|v| (v - max).exp());
        let sum = row.sum();
        row /= sum;
    }
}

/// Intermediate activations of a forward pass.
#[derive(Debug, Clone)]
pub struct EncoderTrace {
    /// Projected convolutional latents, `T' x d_model`.
    pub latents: Array2<f64>,
    /// Output of each executed transformer block.
    pub hidden: Vec<Array2<f64>>,
    /// Attention weights per executed block and head, `T' x T'` each.
    pub attention: Vec<Vec<Array2<f64>>>,
}

/// Run the convolutional stack and `depth` transformer blocks.
pub fn forward_trace(
    w: &Waveform,
    cfg: &EncoderConfig,
    weights: &EncoderWeights,
    depth: usize,
    keep_attention: bool,
) -> Result<EncoderTrace> {
    cfg.validate()?;
    w.require_rate(cfg.sample_rate)?;
    if depth > cfg.n_layers {
        return Err(Error::Config(format!("depth {depth} exceeds {} layers", cfg.n_layers)));
    }
    let min = cfg.min_samples();
    if w.len() < min {
        return Err(Error::InputTooShort { got: w.len(), min });
    }
    let eps = cfg.layernorm_eps;
    let mut x = Array2::from_shape_fn((w.len(), 1), |(i, _)| f64::from(w.samples[i]));
    for (layer, &(_, k, s)) in weights.conv.iter().zip(&cfg.conv_layers) {
        let y = im2col(&x, k, s).dot(&layer.weight.t()) + &layer.bias;
        let ln = LayerNorm {
            gain: layer.ln_gain.clone(),
            bias: layer.ln_bias.clone(),
        };
        x = layer_norm(&y, &ln, eps).mapv(gelu);
    }
    let x = layer_norm(&x, &weights.proj_ln, eps);
    let latents = weights.proj.forward(&x.view());

    // positional convolution, same padding
    let (t, d) = latents.dim();
    let kernel = cfg.positional_conv_kernel;
    let left = kernel / 2;
    let mut padded = Array2::zeros((t + kernel - 1, d));
    padded.slice_mut(s![left..left + t, ..]).assign(&latents);
    let group = d / cfg.positional_conv_groups;
    let mut pos = Array2::zeros((t, d));
    for g in 0..cfg.positional_conv_groups {
        let chans = s![.., g * group..(g + 1) * group];
        let cols = im2col(&padded.slice(chans).to_owned(), kernel, 1);
        let w = weights.pos_conv.weight.slice(s![g * group..(g + 1) * group, ..]);
        pos.slice_mut(chans).assign(&cols.dot(&w.t()));
    }
    pos += &weights.pos_conv.bias;
    let mut h = &latents + &pos.mapv(gelu);

    let heads = cfg.n_heads;
    let dh = d / heads;
    let scale = 1.0 / (dh as f64).sqrt();
    let mut hidden = Vec::with_capacity(depth);
    let mut attention = Vec::new();
    for layer in weights.layers.iter().take(depth) {
        let a = layer_norm(&h, &layer.ln_attn, eps);
        let q = layer.q.forward(&a.view());
        let k = layer.k.forward(&a.view());
        let v = layer.v.forward(&a.view());
        let mut ctx = Array2::zeros((t, d));
        let mut maps = Vec::new();
        for head in 0..heads {
            let cols = s![.., head * dh..(head + 1) * dh];
            let mut scores = q.slice(cols).dot(&k.slice(cols).t()) * scale;
            softmax_rows(&mut scores);
            ctx.slice_mut(cols).assign(&scores.dot(&v.slice(cols)));
            if keep_attention {
                maps.push(scores);
            }
        }
        if keep_attention {
            attention.push(maps);
        }
        h = h + layer.o.forward(&ctx.view());
        let f = layer_norm(&h, &layer.ln_ffn, eps);
        let inner = layer.ffn_in.forward(&f.view()).mapv(gelu);
        h = h + layer.ffn_out.forward(&inner.view());
        hidden.push(h.clone());
    }
    Ok(EncoderTrace {
        latents,
        hidden,
        attention,
    })
}

/// Hidden states after transformer block `cfg.truncate_layer`.
pub fn encode(w: &Waveform, cfg: &EncoderConfig, weights: &EncoderWeights) -> Result<FeatureSequence> {
    let mut trace = forward_trace(w, cfg, weights, cfg.truncate_layer, false)?;
    let frames = trace.hidden.pop().expect("truncate_layer >= 1");
    Ok(FeatureSequence::new(
        frames,
        cfg.frame_shift(),
        cfg.receptive_field() as f64 / f64::from(cfg.sample_rate),
        FeatureKind::HiddenState,
    ))
}

fn put_ln(t: &mut NamedTensors, name: &str, ln: &LayerNorm) {
    t.insert_1d(&format!("{name}.gain"), &ln.gain);
    t.insert_1d(&format!("{name}.bias"), &ln.bias);
}

fn put_linear(t: &mut NamedTensors, name: &str, l: &Linear) {
    t.insert_2d(&format!("{name}.weight"), &l.weight);
    t.insert_1d(&format!("{name}.bias"), &l.bias);
}

fn get_ln(t: &NamedTensors, name: &str, dim: usize) -> Result<LayerNorm> {
    Ok(LayerNorm {
        gain: t.get_1d(&format!("{name}.gain"), dim)?,
        bias: t.get_1d(&format!("{name}.bias"), dim)?,
    })
}

fn get_linear(t: &NamedTensors, name: &str, out: usize, inp: usize) -> Result<Linear> {
    Ok(Linear {
        weight: t.get_2d(&format!("{name}.weight"), (out, inp))?,
        bias: t.get_1d(&format!("{name}.bias"), out)?,
    })
}

impl EncoderWeights {
    pub fn to_named(&self, prefix: &str, out: &mut NamedTensors) {
        for (i, c) in self.conv.iter().enumerate() {
            let p = format!("{prefix}.conv.{i}");
            out.insert_2d(&format!("{p}.weight"), &c.weight);
            out.insert_1d(&format!("{p}.bias"), &c.bias);
            out.insert_1d(&format!("{p}.ln.gain"), &c.ln_gain);
            out.insert_1d(&format!("{p}.ln.bias"), &c.ln_bias);
        }
        put_ln(out, &format!("{prefix}.proj_ln"), &self.proj_ln);
        put_linear(out, &format!("{prefix}.proj"), &self.proj);
        put_linear(out, &format!("{prefix}.pos_conv"), &self.pos_conv);
        for (i, l) in self.layers.iter().enumerate() {
            let p = format!("{prefix}.layers.{i}");
            put_ln(out, &format!("{p}.ln_attn"), &l.ln_attn);
            put_linear(out, &format!("{p}.q"), &l.q);
            put_linear(out, &format!("{p}.k"), &l.k);
            put_linear(out, &format!("{p}.v"), &l.v);
            put_linear(out, &format!("{p}.o"), &l.o);
            put_ln(out, &format!("{p}.ln_ffn"), &l.ln_ffn);
            put_linear(out, &format!("{p}.ffn_in"), &l.ffn_in);
            put_linear(out, &format!("{p}.ffn_out"), &l.ffn_out);
        }
    }

    pub fn from_named(cfg: &EncoderConfig, prefix: &str, t: &NamedTensors) -> Result<Self> {
        cfg.validate()?;
        let mut c_in = 1;
        let mut conv = Vec::new();
        for (i, &(c, k, _)) in cfg.conv_layers.iter().enumerate() {
            let p = format!("{prefix}.conv.{i}");
            conv.push(ConvLayer {
                weight: t.get_2d(&format!("{p}.weight"), (c, k * c_in))?,
                bias: t.get_1d(&format!("{p}.bias"), c)?,
                ln_gain: t.get_1d(&format!("{p}.ln.gain"), c)?,
                ln_bias: t.get_1d(&format!("{p}.ln.bias"), c)?,
            });
            c_in = c;
        }
        let d = cfg.d_model;
        let f = cfg.ffn_dim;
        let layers = (0..cfg.n_layers)
            .map(|i| {
                let p = format!("{prefix}.layers.{i}");
                Ok(TransformerLayer {
                    ln_attn: get_ln(t, &format!("{p}.ln_attn"), d)?,
                    q: get_linear(t, &format!("{p}.q"), d, d)?,
                    k: get_linear(t, &format!("{p}.k"), d, d)?,
                    v: get_linear(t, &format!("{p}.v"), d, d)?,
                    o: get_linear(t, &format!("{p}.o"), d, d)?,
                    ln_ffn: get_ln(t, &format!("{p}.ln_ffn"), d)?,
                    ffn_in: get_linear(t, &format!("{p}.ffn_in"), f, d)?,
                    ffn_out: get_linear(t, &format!("{p}.ffn_out"), d, f)?,
                })
            })
            .collect::<Result<_>>()?;
        Ok(Self {
            conv,
            proj_ln: get_ln(t, &format!("{prefix}.proj_ln"), c_in)?,
            proj: get_linear(t, &format!("{prefix}.proj"), d, c_in)?,
            pos_conv: get_linear(
                t,
                &format!("{prefix}.pos_conv"),
                d,
                cfg.positional_conv_kernel * d / cfg.positional_conv_groups,
            )?,
            layers,
        })
    }

    pub fn num_parameters(&self) -> usize {
        let mut t = NamedTensors::default();
        self.to_named("e", &mut t);
        t.num_scalars()
    }
}

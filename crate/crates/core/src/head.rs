//! Speaker-embedding head: two frame-local TDNN layers (ReLU after the
//! first), statistics pooling, a maxout embedding layer and an
//! additive-angular-margin softmax classifier, with analytic gradients.

use ndarray::{s, Array1, Array2, ArrayView1, ArrayView2, Axis, Zip};
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::frontend::FeatureSequence;
use crate::tensor::{scaled_normal, Linear, NamedTensors};

/// Which vector is emitted as the speaker embedding.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum EmbeddingMode {
    /// Maxout layer output.
    Cl,
    /// Scaled cosine logits against every class.
    Logit,
}

/// Features the head consumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(rename_all = "kebab-case")]
pub enum HeadInput {
    /// Mean-normalized log Mel filterbanks.
    Mfb,
    /// Hidden states of the encoder at its truncation layer.
    Encoder,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, schemars::JsonSchema)]
#[serde(deny_unknown_fields, default)]
pub struct HeadConfig {
    pub input: HeadInput,
    /// Input feature dimension; 0 takes it from the frontend.
    pub input_dim: usize,
    pub tdnn_dim: usize,
    pub embed_dim: usize,
    pub maxout_k: usize,
    /// Number of training classes; 0 takes it from the manifest.
    pub n_classes: usize,
    pub margin: f64,
    pub scale: f64,
    pub pool_eps: f64,
    pub embedding: EmbeddingMode,
}

impl Default for HeadConfig {
    fn default() -> Self {
        Self {
            input: HeadInput::Mfb,
            input_dim: 0,
            tdnn_dim: 128,
            embed_dim: 64,
            maxout_k: 2,
            n_classes: 0,
            margin: 0.35,
            scale: 32.0,
            pool_eps: 1e-5,
            embedding: EmbeddingMode::Cl,
        }
    }
}

impl HeadConfig {
    pub fn validate(&self) -> Result<()> {
        if [self.input_dim, self.tdnn_dim, self.embed_dim, self.n_classes].contains(&0) {
            return Err(Error::Config(format!(
                "head dims must be >= 1 (input {}, tdnn {}, embed {}, classes {})",
                self.input_dim, self.tdnn_dim, self.embed_dim, self.n_classes
            )));
        }
        if self.maxout_k < 2 {
            return Err(Error::Config(format!("maxout_k must be >= 2, got {}", self.maxout_k)));
        }
        if !(0.0..std::f64::consts::FRAC_PI_2).contains(&self.margin) {
            return Err(Error::Config(format!("margin must be in [0, pi/2), got {}", self.margin)));
        }
        if !(self.scale > 0.0) {
            return Err(Error::Config("scale must be positive".into()));
        }
        if !(self.pool_eps > 0.0) {
            return Err(Error::Config("pool_eps must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct HeadWeights {
    pub tdnn1: Linear,
    pub tdnn2: Linear,
    /// `maxout_k` maps from the pooled vector to the embedding.
    pub maxout: Vec<Linear>,
    /// `n_classes x embed_dim`; rows are normalized when used.
    pub classifier: Array2<f64>,
}

pub fn init_head<R: Rng + ?Sized>(cfg: &HeadConfig, rng: &mut R) -> Result<HeadWeights> {
    cfg.validate()?;
    let pooled = 2 * cfg.tdnn_dim;
    Ok(HeadWeights {
        tdnn1: Linear::init(cfg.tdnn_dim, cfg.input_dim, rng),
        tdnn2: Linear::init(cfg.tdnn_dim, cfg.tdnn_dim, rng),
        maxout: (0..cfg.maxout_k).map(|_| Linear::init(cfg.embed_dim, pooled, rng)).collect(),
        classifier: scaled_normal((cfg.n_classes, cfg.embed_dim), cfg.embed_dim, rng),
    })
}

impl HeadWeights {
    /// Same shapes, all zeros. Used as a gradient or momentum buffer.
    pub fn zeros_like(&self) -> Self {
        Self {
            tdnn1: Linear::zeros(self.tdnn1.out_dim(), self.tdnn1.in_dim()),
            tdnn2: Linear::zeros(self.tdnn2.out_dim(), self.tdnn2.in_dim()),
            maxout: self.maxout.iter().map(|m| Linear::zeros(m.out_dim(), m.in_dim())).collect(),
            classifier: Array2::zeros(self.classifier.dim()),
        }
    }

    /// Every parameter tensor as a flat slice, in a fixed order.
    pub fn slices(&self) -> Vec<&[f64]> {
        let mut v: Vec<&[f64]> = vec![
            self.tdnn1.weight.as_slice().expect("standard layout"),
            self.tdnn1.bias.as_slice().expect("standard layout"),
            self.tdnn2.weight.as_slice().expect("standard layout"),
            self.tdnn2.bias.as_slice().expect("standard layout"),
        ];
        for m in &self.maxout {
            v.push(m.weight.as_slice().expect("standard layout"));
            v.push(m.bias.as_slice().expect("standard layout"));
        }
        v.push(self.classifier.as_slice().expect("standard layout"));
        v
    }

    pub fn slices_mut(&mut self) -> Vec<&mut [f64]> {
        let mut v: Vec<&mut [f64]> = vec![
            self.tdnn1.weight.as_slice_mut().expect("standard layout"),
            self.tdnn1.bias.as_slice_mut().expect("standard layout"),
            self.tdnn2.weight.as_slice_mut().expect("standard layout"),
            self.tdnn2.bias.as_slice_mut().expect("standard layout"),
        ];
        for m in &mut self.maxout {
            v.push(m.weight.as_slice_mut().expect("standard layout"));
            v.push(m.bias.as_slice_mut().expect("standard layout"));
        }
        v.push(self.classifier.as_slice_mut().expect("standard layout"));
        v
    }

    pub fn tensor_names(&self) -> Vec<String> {
        let mut v: Vec<String> = ["tdnn1.weight", "tdnn1.bias", "tdnn2.weight", "tdnn2.bias"]
            .iter()
            .map(|s| s.to_string())
            .collect();
        for i in 0..self.maxout.len() {
            v.push(format!("maxout.{i}.weight"));
            v.push(format!("maxout.{i}.bias"));
        }
        v.push("classifier".into());
        v
    }

    /// `self += alpha * other`
    pub fn add_scaled(&mut self, other: &HeadWeights, alpha: f64) {
        for (dst, src) in self.slices_mut().into_iter().zip(other.slices()) {
            for (d, s) in dst.iter_mut().zip(src) {
                *d += alpha * s;
            }
        }
    }

    pub fn scale(&mut self, alpha: f64) {
        for dst in self.slices_mut() {
            dst.iter_mut().for_each(|d| *d *= alpha);
        }
    }

    pub fn sq_norm(&self) -> f64 {
        self.slices().iter().flat_map(|s| s.iter()).map(|v| v * v).sum()
    }

    pub fn num_parameters(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    pub fn is_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }

    pub fn to_named(&self, prefix: &str, out: &mut NamedTensors) {
        out.insert_2d(&format!("{prefix}.tdnn1.weight"), &self.tdnn1.weight);
        out.insert_1d(&format!("{prefix}.tdnn1.bias"), &self.tdnn1.bias);
        out.insert_2d(&format!("{prefix}.tdnn2.weight"), &self.tdnn2.weight);
        out.insert_1d(&format!("{prefix}.tdnn2.bias"), &self.tdnn2.bias);
        for (i, m) in self.maxout.iter().enumerate() {
            out.insert_2d(&format!("{prefix}.maxout.{i}.weight"), &m.weight);
            out.insert_1d(&format!("{prefix}.maxout.{i}.bias"), &m.bias);
        }
        out.insert_2d(&format!("{prefix}.classifier"), &self.classifier);
    }

    pub fn from_named(cfg: &HeadConfig, prefix: &str, t: &NamedTensors) -> Result<Self> {
        cfg.validate()?;
        let lin = |name: &str, out: usize, inp: usize| -> Result<Linear> {
            Ok(Linear {
                weight: t.get_2d(&format!("{prefix}.{name}.weight"), (out, inp))?,
                bias: t.get_1d(&format!("{prefix}.{name}.bias"), out)?,
            })
        };
        Ok(Self {
            tdnn1: lin("tdnn1", cfg.tdnn_dim, cfg.input_dim)?,
            tdnn2: lin("tdnn2", cfg.tdnn_dim, cfg.tdnn_dim)?,
            maxout: (0..cfg.maxout_k)
                .map(|i| lin(&format!("maxout.{i}"), cfg.embed_dim, 2 * cfg.tdnn_dim))
                .collect::<Result<_>>()?,
            classifier: t.get_2d(&format!("{prefix}.classifier"), (cfg.n_classes, cfg.embed_dim))?,
        })
    }
}

/// Utterance identifier with its fixed-dimension embedding.
#[derive(Debug, Clone, PartialEq)]
pub struct SpeakerEmbedding {
    pub id: String,
    pub vector: Vec<f64>,
}

/// Per-dimension mean and `sqrt(population variance + eps)`, concatenated.
///
/// Each column is reduced in sorted order, so any permutation of the frames
/// gives bit-identical statistics.
pub fn stats_pool(frames: &ArrayView2<f64>, eps: f64) -> Result<Array1<f64>> {
    let (t, d) = frames.dim();
    if t == 0 {
        return Err(Error::Shape("statistics pooling over an empty sequence".into()));
    }
    let mut out = Array1::zeros(2 * d);
    let mut col = Vec::with_capacity(t);
    for j in 0..d {
        col.clear();
        col.extend(frames.column(j).iter().copied());
        col.sort_unstable_by(f64::total_cmp);
        let mean = col.iter().sum::<f64>() / t as f64;
        let var = col.iter().map(|&x| (x - mean) * (x - mean)).sum::<f64>() / t as f64;
        out[j] = mean;
        out[d + j] = (var + eps).sqrt();
    }
    Ok(out)
}

/// Activations kept for the backward pass.
#[derive(Debug, Clone)]
pub struct HeadCache {
    pub input: Array2<f64>,
    pub pre1: Array2<f64>,
    pub act1: Array2<f64>,
    pub out2: Array2<f64>,
    pub pooled: Array1<f64>,
    /// Index of the winning maxout map per embedding dimension.
    pub winner: Vec<usize>,
    pub embedding: Array1<f64>,
}

fn check_input(frames: &ArrayView2<f64>, w: &HeadWeights) -> Result<()> {
    if frames.ncols() != w.tdnn1.in_dim() {
        return Err(Error::Shape(format!(
            "feature dim {} does not match head input dim {}",
            frames.ncols(),
            w.tdnn1.in_dim()
        )));
    }
    if frames.nrows() == 0 {
        return Err(Error::Shape("head input has no frames".into()));
    }
    Ok(())
}

pub fn head_forward_cached(frames: &ArrayView2<f64>, w: &HeadWeights, pool_eps: f64) -> Result<HeadCache> {
    check_input(frames, w)?;
    let pre1 = w.tdnn1.forward(frames);
    let act1 = pre1.mapv(|v| v.max(0.0));
    let out2 = w.tdnn2.forward(&act1.view());
    let pooled = stats_pool(&out2.view(), pool_eps)?;
    let dim = w.maxout[0].out_dim();
    let mut embedding = Array1::from_elem(dim, f64::NEG_INFINITY);
    let mut winner = vec![0; dim];
    for (k, m) in w.maxout.iter().enumerate() {
        let z = m.weight.dot(&pooled) + &m.bias;
        for i in 0..dim {
            if z[i] > embedding[i] {
                embedding[i] = z[i];
                winner[i] = k;
            }
        }
    }
    Ok(HeadCache {
        input: frames.to_owned(),
        pre1,
        act1,
        out2,
        pooled,
        winner,
        embedding,
    })
}

/// The maxout embedding for a feature sequence.
pub fn head_forward(seq: &FeatureSequence, w: &HeadWeights, cfg: &HeadConfig) -> Result<Array1<f64>> {
    Ok(head_forward_cached(&seq.frames.view(), w, cfg.pool_eps)?.embedding)
}

/// The vector used for scoring under the configured embedding mode.
pub fn embed(seq: &FeatureSequence, w: &HeadWeights, cfg: &HeadConfig) -> Result<Array1<f64>> {
    let e = head_forward(seq, w, cfg)?;
    match cfg.embedding {
        EmbeddingMode::Cl => Ok(e),
        EmbeddingMode::Logit => Ok(cosines(&e.view(), &w.classifier)?.0 * cfg.scale),
    }
}

/// Cosine of `e` against every classifier row, plus the norms involved.
fn cosines(e: &ArrayView1<f64>, classifier: &Array2<f64>) -> Result<(Array1<f64>, f64, Array1<f64>)> {
    let ne = e.dot(e).sqrt();
    if ne == 0.0 {
        return Err(Error::InvalidArgument("embedding has zero norm".into()));
    }
    let nw = classifier.map_axis(Axis(1), |r| r.dot(&r).sqrt());
    if let Some(j) = nw.iter().position(|&n| n == 0.0) {
        return Err(Error::InvalidArgument(format!("classifier row {j} has zero norm")));
    }
    let cos = (classifier.dot(e) / &nw) / ne;
    Ok((cos, ne, nw))
}

#[derive(Debug, Clone)]
pub struct AamOutput {
    pub loss: f64,
    pub logits: Array1<f64>,
    pub grad_embedding: Array1<f64>,
    pub grad_classifier: Array2<f64>,
}

const COS_CLAMP: f64 = 1e-7;

/// Additive angular margin softmax cross-entropy.
///
/// Target logit `s cos(theta_y + m)` while `cos theta_y > cos(pi - m)`,
/// otherwise `s (cos theta_y - m sin m)`; other logits `s cos theta_j`.
pub fn aam_softmax_loss(
    embedding: &ArrayView1<f64>,
    label: usize,
    classifier: &Array2<f64>,
    margin: f64,
    scale: f64,
) -> Result<AamOutput> {
    let n_classes = classifier.nrows();
    if label >= n_classes {
        return Err(Error::InvalidArgument(format!("label {label} outside 0..{n_classes}")));
    }
    if embedding.len() != classifier.ncols() {
        return Err(Error::Shape(format!(
            "embedding dim {} vs classifier dim {}",
            embedding.len(),
            classifier.ncols()
        )));
    }
    let (cos, ne, nw) = cosines(embedding, classifier)?;
    let (sin_m, cos_m) = margin.sin_cos();
    let threshold = (std::f64::consts::PI - margin).cos();

    let clamped = cos.mapv(|c| c.clamp(-1.0 + COS_CLAMP, 1.0 - COS_CLAMP));
    let mut logits = &clamped * scale;
    // d logit_j / d cos_j
    let mut dlogit = Array1::from_elem(n_classes, scale);
    let c = clamped[label];
    if c > threshold {
        let sin = (1.0 - c * c).sqrt();
        logits[label] = scale * (c * cos_m - sin * sin_m);
        dlogit[label] = scale * (cos_m + c * sin_m / sin);
    } else {
        logits[label] = scale * (c - margin * sin_m);
    }
    for j in 0..n_classes {
        if clamped[j] != cos[j] {
            dlogit[j] = 0.0;
        }
    }

    let max = logits.fold(f64::NEG_INFINITY, |a, &b| a.max(b));
    let exp = logits.mapv(|z| (z - max).exp());
    let sum = exp.sum();
    let loss = if logits[label] >= max {
        // ln(1 + sum_{j != y} e^(z_j - z_y)) keeps precision near zero loss
        let rest: f64 = logits
            .iter()
            .enumerate()
            .filter(|&(j, _)| j != label)
            .map(|(_, z)| (z - logits[label]).exp())
            .sum();
        rest.ln_1p()
    } else {
        max + sum.ln() - logits[label]
    };
    let mut dz = exp / sum;
    dz[label] -= 1.0;

    let dcos = dz * dlogit;
    let u = embedding.mapv(|v| v / ne);
    let mut grad_embedding = Array1::zeros(embedding.len());
    let mut grad_classifier = Array2::zeros(classifier.dim());
    for j in 0..n_classes {
        if dcos[j] == 0.0 {
            continue;
        }
        let v = classifier.row(j).mapv(|x| x / nw[j]);
        // d cos / d e = (v - cos u) / |e| ; d cos / d w = (u - cos v) / |w|
        grad_embedding.scaled_add(dcos[j] / ne, &(&v - &(&u * cos[j])));
        grad_classifier
            .row_mut(j)
            .scaled_add(dcos[j] / nw[j], &(&u - &(&v * cos[j])));
    }
    Ok(AamOutput {
        loss,
        logits,
        grad_embedding,
        grad_classifier,
    })
}

/// Backpropagate `grad_embedding` through maxout, pooling and the TDNNs.
/// Accumulates parameter gradients into `grads` and returns the input gradient.
pub fn head_backward(
    cache: &HeadCache,
    w: &HeadWeights,
    grad_embedding: &ArrayView1<f64>,
    pool_eps: f64,
    grads: &mut HeadWeights,
) -> Array2<f64> {
    let pooled_dim = cache.pooled.len();
    let mut grad_pooled = Array1::<f64>::zeros(pooled_dim);
    for (i, (&k, &g)) in cache.winner.iter().zip(grad_embedding).enumerate() {
        if g == 0.0 {
            continue;
        }
        grads.maxout[k].weight.row_mut(i).scaled_add(g, &cache.pooled);
        grads.maxout[k].bias[i] += g;
        grad_pooled.scaled_add(g, &w.maxout[k].weight.row(i));
    }

    let (t, d) = cache.out2.dim();
    let mean = cache.pooled.slice(s![..d]);
    let std = cache.pooled.slice(s![d..]);
    let g_mean = grad_pooled.slice(s![..d]);
    let g_std = grad_pooled.slice(s![d..]);
    debug_assert!(std.iter().all(|&s| s >= pool_eps.sqrt()));
    let tf = t as f64;
    let mut d_out2 = Array2::<f64>::zeros((t, d));
    for (mut row, h) in d_out2.outer_iter_mut().zip(cache.out2.outer_iter()) {
        Zip::from(&mut row)
            .and(&h)
            .and(&mean)
            .and(&std)
            .and(&g_mean)
            .and(&g_std)
            .for_each(|o, &h, &m, &s, &gm, &gs| *o = gm / tf + gs * (h - m) / (tf * s));
    }

    grads.tdnn2.weight += &d_out2.t().dot(&cache.act1);
    grads.tdnn2.bias += &d_out2.sum_axis(Axis(0));
    let mut d_pre1 = d_out2.dot(&w.tdnn2.weight);
    Zip::from(&mut d_pre1).and(&cache.pre1).for_each(|g, &p| {
        if p <= 0.0 {
            *g = 0.0;
        }
    });
    grads.tdnn1.weight += &d_pre1.t().dot(&cache.input);
    grads.tdnn1.bias += &d_pre1.sum_axis(Axis(0));
    d_pre1.dot(&w.tdnn1.weight)
}

/// Loss and gradients of one labelled sequence.
#[derive(Debug, Clone)]
pub struct SampleGrad {
    pub loss: f64,
    pub grads: HeadWeights,
    pub input_grad: Array2<f64>,
}

pub fn sample_loss_and_grad(
    frames: &ArrayView2<f64>,
    label: usize,
    w: &HeadWeights,
    cfg: &HeadConfig,
) -> Result<SampleGrad> {
    let cache = head_forward_cached(frames, w, cfg.pool_eps)?;
    let aam = aam_softmax_loss(&cache.embedding.view(), label, &w.classifier, cfg.margin, cfg.scale)?;
    if !aam.loss.is_finite() {
        return Err(Error::NonFinite(format!("loss {}", aam.loss)));
    }
    let mut grads = w.zeros_like();
    grads.classifier += &aam.grad_classifier;
    let input_grad = head_backward(&cache, w, &aam.grad_embedding.view(), cfg.pool_eps, &mut grads);
    Ok(SampleGrad {
        loss: aam.loss,
        grads,
        input_grad,
    })
}

/// Loss only, for finite-difference checks and evaluation.
pub fn sample_loss(frames: &ArrayView2<f64>, label: usize, w: &HeadWeights, cfg: &HeadConfig) -> Result<f64> {
    let cache = head_forward_cached(frames, w, cfg.pool_eps)?;
    Ok(aam_softmax_loss(&cache.embedding.view(), label, &w.classifier, cfg.margin, cfg.scale)?.loss)
}

//! Dual image/text encoder with projection heads and the contrastive losses.

use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{Vocabulary, DEFAULT_MAX_LEN};
use crate::nn::{NnError, Parameter, Scalar, Tape, Tensor, Var};
use crate::rng::{stream_rng, Stream};

pub const EMBED_DIM: usize = 64;
pub const PROJ_DIM: usize = 32;
pub const IMAGE_CHANNELS: [usize; 3] = [16, 32, 64];
pub const TEXT_TAPS: usize = 3;
pub const NORM_EPS: f64 = 1e-8;
pub const MIN_TEMPERATURE: f64 = 1e-3;
pub const MAX_TEMPERATURE: f64 = 10.0;

#[derive(Debug, Error)]
pub enum ModelError {
    #[error(transparent)]
    Nn(#[from] NnError),
    #[error("invalid batch: {0}")]
    Batch(String),
    #[error("lambda must be >= 0, got {0}")]
    NegativeLambda(f64),
    #[error("invalid model config: {0}")]
    Config(String),
}

pub type Result<T> = std::result::Result<T, ModelError>;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct ModelConfig {
    pub height: usize,
    pub width: usize,
    pub vocab_size: usize,
    pub max_len: usize,
    pub init_temperature: f64,
}

impl Default for ModelConfig {
    fn default() -> Self {
        ModelConfig {
            height: 64,
            width: 64,
            vocab_size: Vocabulary::grammar().len(),
            max_len: DEFAULT_MAX_LEN,
            init_temperature: 0.07,
        }
    }
}

impl ModelConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 8 || self.width < 8 {
            return Err(ModelError::Config(format!("image size {}x{} below 8x8", self.height, self.width)));
        }
        if self.vocab_size < 2 || self.max_len == 0 {
            return Err(ModelError::Config("vocabulary and max_len must be positive".into()));
        }
        if !(MIN_TEMPERATURE..=MAX_TEMPERATURE).contains(&self.init_temperature) {
            return Err(ModelError::Config(format!("init_temperature {} outside [1e-3, 10]", self.init_temperature)));
        }
        Ok(())
    }
}

/// Learning-rate group a parameter belongs to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ParamGroup {
    Image,
    Text,
    Projection,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Modality {
    Image,
    Text,
}

/// Parameter slots, in enumeration order.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum P {
    Conv1W,
    Conv1B,
    Conv2W,
    Conv2B,
    Conv3W,
    Conv3B,
    TokenEmbedding,
    PositionEmbedding,
    Text1W,
    Text1B,
    Text2W,
    Text2B,
    ProjImageW,
    ProjImageB,
    ProjTextW,
    ProjTextB,
    LogitScale,
}

const SLOTS: [(P, &str, ParamGroup); 17] = [
    (P::Conv1W, "image.conv1.weight", ParamGroup::Image),
    (P::Conv1B, "image.conv1.bias", ParamGroup::Image),
    (P::Conv2W, "image.conv2.weight", ParamGroup::Image),
    (P::Conv2B, "image.conv2.bias", ParamGroup::Image),
    (P::Conv3W, "image.conv3.weight", ParamGroup::Image),
    (P::Conv3B, "image.conv3.bias", ParamGroup::Image),
    (P::TokenEmbedding, "text.token_embedding", ParamGroup::Text),
    (P::PositionEmbedding, "text.position_embedding", ParamGroup::Text),
    (P::Text1W, "text.conv1.weight", ParamGroup::Text),
    (P::Text1B, "text.conv1.bias", ParamGroup::Text),
    (P::Text2W, "text.conv2.weight", ParamGroup::Text),
    (P::Text2B, "text.conv2.bias", ParamGroup::Text),
    (P::ProjImageW, "projection.image.weight", ParamGroup::Projection),
    (P::ProjImageB, "projection.image.bias", ParamGroup::Projection),
    (P::ProjTextW, "projection.text.weight", ParamGroup::Projection),
    (P::ProjTextB, "projection.text.bias", ParamGroup::Projection),
    (P::LogitScale, "logit_scale", ParamGroup::Projection),
];

/// Group of a parameter name, if it is one of the model's parameters.
pub fn param_group(name: &str) -> Option<ParamGroup> {
    SLOTS.iter().find(|s| s.1 == name).map(|s| s.2)
}

/// Names and shapes of every parameter, in enumeration order.
pub fn param_shapes(cfg: &ModelConfig) -> Vec<(&'static str, Vec<usize>)> {
    let [c1, c2, c3] = IMAGE_CHANNELS;
    let d = EMBED_DIM;
    let shape = |p: P| -> Vec<usize> {
        match p {
            P::Conv1W => vec![c1, 1, 3, 3],
            P::Conv1B => vec![c1],
            P::Conv2W => vec![c2, c1, 3, 3],
            P::Conv2B => vec![c2],
            P::Conv3W => vec![c3, c2, 3, 3],
            P::Conv3B => vec![c3],
            P::TokenEmbedding => vec![cfg.vocab_size, d],
            P::PositionEmbedding => vec![cfg.max_len, d],
            P::Text1W | P::Text2W => vec![TEXT_TAPS, d, d],
            P::Text1B | P::Text2B => vec![d],
            P::ProjImageW | P::ProjTextW => vec![d, PROJ_DIM],
            P::ProjImageB | P::ProjTextB => vec![PROJ_DIM],
            P::LogitScale => vec![1],
        }
    };
    SLOTS.iter().map(|(p, name, _)| (*name, shape(*p))).collect()
}

/// The model's parameters bound to one tape.
#[derive(Debug, Clone)]
pub struct Bound {
    vars: Vec<Var>,
}

impl Bound {
    fn get(&self, p: P) -> Var {
        self.vars[p as usize]
    }

    /// Tape variable of the `i`-th parameter.
    pub fn var(&self, i: usize) -> Var {
        self.vars[i]
    }

    pub fn logit_scale(&self) -> Var {
        self.get(P::LogitScale)
    }
}

/// Nodes of one image forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ImageGraph {
    /// Final conv-stage activations `[N, 64, h, w]`.
    pub activations: Var,
    /// Unprojected embedding `[N, 64]`.
    pub embedding: Var,
}

/// Loss nodes of one training forward pass.
#[derive(Debug, Clone, Copy)]
pub struct LossGraph {
    pub total: Var,
    pub info_nce: Var,
    pub negative: Var,
}

/// A training batch: images `[N, 1, H, W]` and `N x len` token rows for
/// the positive and negative captions.
#[derive(Debug, Clone)]
pub struct Batch<T> {
    pub images: Tensor<T>,
    pub pos_tokens: Vec<u32>,
    pub neg_tokens: Vec<u32>,
}

impl<T: Scalar> Batch<T> {
    pub fn len(&self) -> usize {
        self.images.shape().first().copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn cast<U: Scalar>(&self) -> Batch<U> {
        Batch { images: self.images.cast(), pos_tokens: self.pos_tokens.clone(), neg_tokens: self.neg_tokens.clone() }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct DualEncoder<T> {
    pub config: ModelConfig,
    pub params: Vec<Parameter<T>>,
}

impl<T: Scalar> DualEncoder<T> {
    /// Fresh model with He-scaled convolutions, small embeddings, zero
    /// biases and logit scale `ln(1 / init_temperature)`.
    pub fn new(config: ModelConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut rng = stream_rng(seed, Stream::Init, 0);
        let params = param_shapes(&config)
            .into_iter()
            .zip(SLOTS)
            .map(|((name, shape), (p, _, _))| {
                let n: usize = shape.iter().product();
                let std = match p {
                    P::Conv1W | P::Conv2W | P::Conv3W => (2.0 / (shape[1] * 9) as f64).sqrt(),
                    P::Text1W | P::Text2W => (2.0 / (TEXT_TAPS * EMBED_DIM) as f64).sqrt(),
                    P::TokenEmbedding | P::PositionEmbedding => 0.5,
                    P::ProjImageW | P::ProjTextW => (1.0 / EMBED_DIM as f64).sqrt(),
                    _ => 0.0,
                };
                let data: Vec<T> = if p == P::LogitScale {
                    vec![T::of((1.0 / config.init_temperature).ln())]
                } else if std == 0.0 {
                    vec![T::zero(); n]
                } else {
                    let normal = Normal::new(0.0, std).expect("positive std");
                    (0..n).map(|_| T::of(normal.sample(&mut rng))).collect()
                };
                Parameter::new(name, Tensor::new(shape, data).expect("shape from table"))
            })
            .collect();
        Ok(DualEncoder { config, params })
    }

    pub fn cast<U: Scalar>(&self) -> DualEncoder<U> {
        DualEncoder { config: self.config, params: self.params.iter().map(Parameter::cast).collect() }
    }

    pub fn param_count(&self) -> usize {
        self.params.iter().map(|p| p.value.len()).sum()
    }

    pub fn param(&self, name: &str) -> Option<&Parameter<T>> {
        self.params.iter().find(|p| p.name == name)
    }

    pub fn group(&self, i: usize) -> ParamGroup {
        SLOTS[i].2
    }

    /// Current temperature `exp(-logit_scale)`.
    pub fn temperature(&self) -> f64 {
        (-self.params[P::LogitScale as usize].value.data()[0].as_f64()).exp()
    }

    /// Keeps the temperature inside `[1e-3, 10]`.
    pub fn clamp_temperature(&mut self) {
        let v = &mut self.params[P::LogitScale as usize].value.data_mut()[0];
        let (lo, hi) = ((1.0 / MAX_TEMPERATURE).ln(), (1.0 / MIN_TEMPERATURE).ln());
        *v = T::of(v.as_f64().clamp(lo, hi));
    }

    /// Records every parameter as a differentiable leaf.
    pub fn bind(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.param(p.value.clone())).collect() }
    }

    /// Records every parameter as a constant (inference).
    pub fn bind_frozen(&self, tape: &mut Tape<T>) -> Bound {
        Bound { vars: self.params.iter().map(|p| tape.constant(p.value.clone())).collect() }
    }

    fn check_images(&self, shape: &[usize]) -> Result<usize> {
        match shape {
            [n, 1, h, w] if *h == self.config.height && *w == self.config.width => Ok(*n),
            _ => Err(ModelError::Batch(format!(
                "images must be [N, 1, {}, {}], got {shape:?}",
                self.config.height, self.config.width
            ))),
        }
    }

    pub fn image_graph(&self, tape: &mut Tape<T>, b: &Bound, images: Var) -> Result<ImageGraph> {
        self.check_images(tape.shape(images))?;
        let mut x = images;
        for (w, bias) in [(P::Conv1W, P::Conv1B), (P::Conv2W, P::Conv2B), (P::Conv3W, P::Conv3B)] {
            let y = tape.conv2d(x, b.get(w), Some(b.get(bias)), 2, 1)?;
            x = tape.relu(y);
        }
        let embedding = tape.mean_pool(x)?;
        Ok(ImageGraph { activations: x, embedding })
    }

    fn check_tokens(&self, tokens: &[u32], n: usize) -> Result<usize> {
        if n == 0 || tokens.len() % n != 0 {
            return Err(ModelError::Batch(format!("{} tokens do not split into {n} rows", tokens.len())));
        }
        let len = tokens.len() / n;
        if len == 0 || len > self.config.max_len {
            return Err(ModelError::Batch(format!("sequence length {len} outside 1..={}", self.config.max_len)));
        }
        Ok(len)
    }

    /// Text encoder over `n` rows of tokens. Pad positions are zeroed after
    /// every layer and excluded from the pool.
    pub fn text_graph(&self, tape: &mut Tape<T>, b: &Bound, tokens: &[u32], n: usize) -> Result<Var> {
        let len = self.check_tokens(tokens, n)?;
        let mask: Vec<T> =
            tokens.iter().map(|&t| if t == crate::caption::PAD { T::zero() } else { T::one() }).collect();
        let tok = tape.embedding(b.get(P::TokenEmbedding), tokens, n, len)?;
        let positions: Vec<u32> = (0..n).flat_map(|_| 0..len as u32).collect();
        let pos = tape.embedding(b.get(P::PositionEmbedding), &positions, n, len)?;
        let sum = tape.add(tok, pos)?;
        let mut x = tape.mul_mask(sum, &mask)?;
        for (w, bias) in [(P::Text1W, P::Text1B), (P::Text2W, P::Text2B)] {
            let y = tape.conv1d(x, b.get(w), Some(b.get(bias)))?;
            let y = tape.mul_mask(y, &mask)?;
            x = tape.relu(y);
        }
        Ok(tape.masked_mean_pool(x, &mask)?)
    }

    /// Linear head then unit normalization.
    pub fn project_graph(&self, tape: &mut Tape<T>, b: &Bound, u: Var, modality: Modality) -> Result<Var> {
        let (w, bias) = match modality {
            Modality::Image => (P::ProjImageW, P::ProjImageB),
            Modality::Text => (P::ProjTextW, P::ProjTextB),
        };
        let y = tape.matmul(u, b.get(w))?;
        let y = tape.add_bias(y, b.get(bias))?;
        Ok(tape.l2_normalize(y, T::of(NORM_EPS)))
    }

    /// Full training objective for one batch.
    pub fn loss_graph(&self, tape: &mut Tape<T>, b: &Bound, batch: &Batch<T>, lambda: f64) -> Result<LossGraph> {
        let n = self.check_images(batch.images.shape())?;
        if batch.pos_tokens.len() != batch.neg_tokens.len() {
            return Err(ModelError::Batch("positive and negative token counts differ".into()));
        }
        let images = tape.constant(batch.images.clone());
        let img = self.image_graph(tape, b, images)?;
        let pos = self.text_graph(tape, b, &batch.pos_tokens, n)?;
        let neg = self.text_graph(tape, b, &batch.neg_tokens, n)?;
        let ip = self.project_graph(tape, b, img.embedding, Modality::Image)?;
        let tp = self.project_graph(tape, b, pos, Modality::Text)?;
        let s = similarity_graph(tape, ip, tp)?;
        total_loss_graph(tape, s, b.logit_scale(), pos, neg, lambda)
    }

    fn chunked(&self, n: usize, f: impl Fn(usize, usize) -> Result<Vec<T>> + Sync, width: usize) -> Result<Tensor<T>> {
        use rayon::prelude::*;
        const CHUNK: usize = 64;
        let parts: Vec<Vec<T>> = (0..n.div_ceil(CHUNK))
            .into_par_iter()
            .map(|c| f(c * CHUNK, ((c + 1) * CHUNK).min(n)))
            .collect::<Result<_>>()?;
        Ok(Tensor::new(vec![n, width], parts.concat())?)
    }

    /// Unprojected image embeddings `[N, 64]`.
    pub fn encode_image(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        let n = self.check_images(images.shape())?;
        let per = self.config.height * self.config.width;
        self.chunked(
            n,
            |lo, hi| {
                let mut tape = Tape::new();
                let b = self.bind_frozen(&mut tape);
                let x = Tensor::new(vec![hi - lo, 1, self.config.height, self.config.width], images.data()[lo * per..hi * per].to_vec())?;
                let x = tape.constant(x);
                let g = self.image_graph(&mut tape, &b, x)?;
                Ok(tape.value(g.embedding).data().to_vec())
            },
            EMBED_DIM,
        )
    }

    /// Unprojected text embeddings `[N, 64]` for `n` token rows.
    pub fn encode_text(&self, tokens: &[u32], n: usize) -> Result<Tensor<T>> {
        let len = self.check_tokens(tokens, n)?;
        self.chunked(
            n,
            |lo, hi| {
                let mut tape = Tape::new();
                let b = self.bind_frozen(&mut tape);
                let u = self.text_graph(&mut tape, &b, &tokens[lo * len..hi * len], hi - lo)?;
                Ok(tape.value(u).data().to_vec())
            },
            EMBED_DIM,
        )
    }

    /// Projected, unit-norm embeddings `[N, 32]` of unprojected rows.
    pub fn project(&self, u: &Tensor<T>, modality: Modality) -> Result<Tensor<T>> {
        match u.shape() {
            [_, d] if *d == EMBED_DIM => {}
            s => return Err(ModelError::Nn(crate::nn::NnError::ShapeMismatch { op: "project", detail: format!("{s:?}") })),
        }
        let mut tape = Tape::new();
        let b = self.bind_frozen(&mut tape);
        let x = tape.constant(u.clone());
        let p = self.project_graph(&mut tape, &b, x, modality)?;
        Ok(tape.value(p).clone())
    }

    pub fn embed_images(&self, images: &Tensor<T>) -> Result<Tensor<T>> {
        self.project(&self.encode_image(images)?, Modality::Image)
    }

    pub fn embed_texts(&self, tokens: &[u32], n: usize) -> Result<Tensor<T>> {
        self.project(&self.encode_text(tokens, n)?, Modality::Text)
    }
}

/// Stacks equally sized images into `[N, 1, H, W]`.
pub fn stack_images<T: Scalar>(images: &[&crate::synth::SynthImage]) -> Result<Tensor<T>> {
    let (h, w) = images.first().map(|i| (i.height, i.width)).unwrap_or((0, 0));
    let mut data = Vec::with_capacity(images.len() * h * w);
    for img in images {
        if (img.height, img.width) != (h, w) {
            return Err(ModelError::Batch(format!("image {}x{} in a batch of {h}x{w}", img.height, img.width)));
        }
        data.extend(img.pixels.iter().map(|v| T::of(*v as f64)));
    }
    Ok(Tensor::new(vec![images.len(), 1, h, w], data)?)
}

/// `S = I_p T_p^T`.
pub fn similarity_graph<T: Scalar>(tape: &mut Tape<T>, ip: Var, tp: Var) -> Result<Var> {
    let t = tape.transpose(tp)?;
    Ok(tape.matmul(ip, t)?)
}

/// Symmetric cross-entropy over `S * exp(logit_scale)` with diagonal targets.
pub fn info_nce_graph<T: Scalar>(tape: &mut Tape<T>, s: Var, logit_scale: Var) -> Result<Var> {
    let n = match tape.shape(s) {
        [r, c] if r == c => *r,
        shape => return Err(ModelError::Batch(format!("similarity must be square, got {shape:?}"))),
    };
    if n < 2 {
        return Err(ModelError::Batch(format!("contrastive loss needs N >= 2, got {n}")));
    }
    let inv_tau = tape.exp(logit_scale);
    let logits = tape.scale_by(s, inv_tau)?;
    let targets: Vec<usize> = (0..n).collect();
    let rows = tape.softmax_cross_entropy(logits, &targets)?;
    let lt = tape.transpose(logits)?;
    let cols = tape.softmax_cross_entropy(lt, &targets)?;
    let sum = tape.add(rows, cols)?;
    Ok(tape.scale(sum, T::of(0.5)))
}

/// Mean cosine between matched rows of `pos` and `neg`.
pub fn negative_caption_graph<T: Scalar>(tape: &mut Tape<T>, pos: Var, neg: Var) -> Result<Var> {
    if tape.shape(pos) != tape.shape(neg) || tape.shape(pos).len() != 2 {
        return Err(ModelError::Batch(format!("pos {:?} vs neg {:?}", tape.shape(pos), tape.shape(neg))));
    }
    let n = tape.shape(pos)[0].max(1);
    let a = tape.l2_normalize(pos, T::of(NORM_EPS));
    let b = tape.l2_normalize(neg, T::of(NORM_EPS));
    let prod = tape.mul(a, b)?;
    let sum = tape.sum_all(prod);
    Ok(tape.scale(sum, T::one() / T::of(n as f64)))
}

pub fn total_loss_graph<T: Scalar>(
    tape: &mut Tape<T>,
    s: Var,
    logit_scale: Var,
    pos: Var,
    neg: Var,
    lambda: f64,
) -> Result<LossGraph> {
    if !(lambda >= 0.0) {
        return Err(ModelError::NegativeLambda(lambda));
    }
    let info_nce = info_nce_graph(tape, s, logit_scale)?;
    let negative = negative_caption_graph(tape, pos, neg)?;
    let weighted = tape.scale(negative, T::of(lambda));
    let total = tape.add(info_nce, weighted)?;
    Ok(LossGraph { total, info_nce, negative })
}

pub fn similarity_matrix<T: Scalar>(ip: &Tensor<T>, tp: &Tensor<T>) -> Result<Tensor<T>> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(ip.clone()), tape.constant(tp.clone()));
    let s = similarity_graph(&mut tape, a, b)?;
    Ok(tape.value(s).clone())
}

pub fn info_nce_loss<T: Scalar>(s: &Tensor<T>, tau: T) -> Result<T> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let scale = tape.constant(Tensor::scalar((T::one() / tau).ln()));
    let l = info_nce_graph(&mut tape, sv, scale)?;
    Ok(tape.item(l))
}

pub fn negative_caption_loss<T: Scalar>(pos: &Tensor<T>, neg: &Tensor<T>) -> Result<T> {
    let mut tape = Tape::new();
    let (a, b) = (tape.constant(pos.clone()), tape.constant(neg.clone()));
    let l = negative_caption_graph(&mut tape, a, b)?;
    Ok(tape.item(l))
}

pub fn total_loss<T: Scalar>(s: &Tensor<T>, tau: T, pos: &Tensor<T>, neg: &Tensor<T>, lambda: f64) -> Result<T> {
    let mut tape = Tape::new();
    let sv = tape.constant(s.clone());
    let scale = tape.constant(Tensor::scalar((T::one() / tau).ln()));
    let (a, b) = (tape.constant(pos.clone()), tape.constant(neg.clone()));
    let l = total_loss_graph(&mut tape, sv, scale, a, b, lambda)?;
    Ok(tape.item(l.total))
}

/// Largest relative error between the tape gradient of the batch loss and
/// central differences, over `per_param` random coordinates of every
/// parameter tensor. Steps that would cross a relu boundary are shrunk.
pub fn check_gradients<R: rand::Rng + ?Sized>(
    model: &DualEncoder<f64>,
    batch: &Batch<f64>,
    lambda: f64,
    per_param: usize,
    h: f64,
    rng: &mut R,
) -> Result<f64> {
    let mut tape = Tape::new();
    let b = model.bind(&mut tape);
    let loss = model.loss_graph(&mut tape, &b, batch, lambda)?;
    let grads = tape.backward(loss.total);
    let mut worst = 0.0f64;
    for (i, p) in model.params.iter().enumerate() {
        let n = p.value.len();
        let analytic = grads.get(b.var(i)).map(<[f64]>::to_vec).unwrap_or_else(|| vec![0.0; n]);
        let coords: Vec<usize> = if n <= per_param { (0..n).collect() } else { (0..per_param).map(|_| rng.random_range(0..n)).collect() };
        let mut probe = model.clone();
        let err = crate::nn::finite_difference_check_piecewise(p.value.data(), &analytic, &coords, h, |theta| {
            probe.params[i].value.data_mut().copy_from_slice(theta);
            let mut tape = Tape::new();
            let b = probe.bind_frozen(&mut tape);
            let l = probe.loss_graph(&mut tape, &b, batch, lambda).expect("validated batch");
            (tape.item(l.total), tape.relu_pattern())
        })?;
        worst = worst.max(err);
    }
    Ok(worst)
}

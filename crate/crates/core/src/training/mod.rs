//! Contrastive training: per-epoch duplicate exclusion, caption sampling,
//! negative pairing, grouped learning rates and checkpoints.

mod checkpoint;

use std::collections::BTreeMap;
use std::path::Path;

use rand::seq::{IndexedRandom, SliceRandom};
use rand::Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::caption::{render_caption, shuffle_sentences, tokenize, TemplateKind, Vocabulary};
use crate::evaluation::{zero_shot_eval, EvalError};
use crate::model::{stack_images, Batch, DualEncoder, ModelConfig, ModelError, ParamGroup};
use crate::nn::{adam_step, AdamConfig, NnError, Tape};
use crate::rng::{stream_rng, Stream};
use crate::score::{perturb_negative, OaScoreRecord, SeveritySignature};
use crate::synth::{Dataset, Split};

pub use checkpoint::{inspect_checkpoint, Checkpoint, TensorInfo, DTYPE_BYTES, DTYPE_F32, DTYPE_U32, MAGIC, VERSION};

#[derive(Debug, Error)]
pub enum TrainError {
    #[error(transparent)]
    Model(#[from] ModelError),
    #[error(transparent)]
    Eval(#[from] EvalError),
    #[error("invalid training config: {0}")]
    Config(String),
    #[error("empty split: {0}")]
    EmptySplit(&'static str),
    #[error("non-finite loss: {0}")]
    NonFinite(String),
    #[error("checkpoint version error: {0}")]
    Version(String),
    #[error("checkpoint checksum mismatch (stored {stored:#010x}, computed {computed:#010x})")]
    Checksum { stored: u32, computed: u32 },
    #[error("checkpoint truncated: {0}")]
    Truncated(String),
    #[error("malformed checkpoint: {0}")]
    Checkpoint(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

impl TrainError {
    pub(crate) fn io(path: &Path, source: std::io::Error) -> Self {
        TrainError::Io { path: path.display().to_string(), source }
    }

    pub fn is_io(&self) -> bool {
        matches!(self, TrainError::Io { .. })
    }
}

impl From<NnError> for TrainError {
    fn from(e: NnError) -> Self {
        TrainError::Model(e.into())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct TrainConfig {
    pub epochs: usize,
    pub batch_size: usize,
    pub lr_image: f64,
    pub lr_text: f64,
    pub lr_projection: f64,
    pub weight_decay: f64,
    pub lambda: f64,
    pub shuffle_prob: f64,
    pub include_zero_grades: bool,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        TrainConfig {
            epochs: 20,
            batch_size: 32,
            lr_image: 1e-4,
            lr_text: 1e-3,
            lr_projection: 1e-3,
            weight_decay: 1e-3,
            lambda: 0.5,
            shuffle_prob: 0.5,
            include_zero_grades: true,
            seed: 0,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<(), TrainError> {
        let rates = [self.lr_image, self.lr_text, self.lr_projection];
        if rates.iter().any(|r| !(r.is_finite() && *r >= 0.0)) {
            return Err(TrainError::Config(format!("learning rates {rates:?} must be >= 0")));
        }
        if self.batch_size < 2 {
            return Err(TrainError::Config(format!("batch_size {} below 2", self.batch_size)));
        }
        if !(self.lambda >= 0.0) {
            return Err(TrainError::Config(format!("lambda {} must be >= 0", self.lambda)));
        }
        if !(0.0..=1.0).contains(&self.shuffle_prob) {
            return Err(TrainError::Config(format!("shuffle_prob {} outside [0, 1]", self.shuffle_prob)));
        }
        if !(self.weight_decay >= 0.0) {
            return Err(TrainError::Config(format!("weight_decay {} must be >= 0", self.weight_decay)));
        }
        Ok(())
    }

    pub fn learning_rate(&self, group: ParamGroup) -> f64 {
        match group {
            ParamGroup::Image => self.lr_image,
            ParamGroup::Text => self.lr_text,
            ParamGroup::Projection => self.lr_projection,
        }
    }
}

/// One scheduled training item.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PlanItem {
    /// Dataset index.
    pub index: usize,
    pub id: String,
    pub signature: SeveritySignature,
    pub kind: TemplateKind,
    pub shuffle: bool,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EpochPlan {
    pub epoch: usize,
    pub survivors: usize,
    pub batches: Vec<Vec<PlanItem>>,
}

/// Keeps one random record per severity signature, shuffles the survivors,
/// cuts full batches and picks a template and shuffle flag per item.
pub fn epoch_plan<R: Rng + ?Sized>(
    train: &[(usize, &OaScoreRecord)],
    epoch: usize,
    batch_size: usize,
    shuffle_prob: f64,
    rng: &mut R,
) -> Result<EpochPlan, TrainError> {
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    if batch_size == 0 {
        return Err(TrainError::Config("batch_size must be positive".into()));
    }
    let mut groups: BTreeMap<SeveritySignature, Vec<(usize, &OaScoreRecord)>> = BTreeMap::new();
    for &(i, rec) in train {
        groups.entry(rec.signature()).or_default().push((i, rec));
    }
    let mut survivors: Vec<(usize, &OaScoreRecord)> =
        groups.values().map(|members| *members.choose(rng).expect("groups are non-empty")).collect();
    survivors.shuffle(rng);
    let count = survivors.len();
    let batches = survivors
        .chunks_exact(batch_size)
        .map(|chunk| {
            chunk
                .iter()
                .map(|&(index, rec)| PlanItem {
                    index,
                    id: rec.id.clone(),
                    signature: rec.signature(),
                    kind: *TemplateKind::ALL.choose(rng).expect("three kinds"),
                    shuffle: rng.random_bool(shuffle_prob),
                })
                .collect()
        })
        .collect();
    Ok(EpochPlan { epoch, survivors: count, batches })
}

/// Renders captions and negatives for planned items and stacks the images.
pub fn assemble_batch<R: Rng + ?Sized>(
    data: &Dataset,
    items: &[PlanItem],
    include_zero_grades: bool,
    vocab: &Vocabulary,
    max_len: usize,
    caption_rng: &mut R,
    negative_rng: &mut R,
) -> Result<Batch<f32>, TrainError> {
    let mut pos = Vec::with_capacity(items.len() * max_len);
    let mut neg = Vec::with_capacity(items.len() * max_len);
    for item in items {
        let rec = data.record(item.index);
        let negative = perturb_negative(rec, negative_rng);
        let mut p = render_caption(rec, item.kind, include_zero_grades);
        let mut n = render_caption(&negative, item.kind, include_zero_grades);
        if item.shuffle {
            p = shuffle_sentences(&p, caption_rng);
            n = shuffle_sentences(&n, caption_rng);
        }
        pos.extend(tokenize(&p.text, vocab, max_len));
        neg.extend(tokenize(&n.text, vocab, max_len));
    }
    let images: Vec<_> = items.iter().map(|it| &data.images[it.index]).collect();
    Ok(Batch { images: stack_images(&images)?, pos_tokens: pos, neg_tokens: neg })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct StepLosses {
    pub total: f64,
    pub info_nce: f64,
    pub negative: f64,
}

/// One forward, one backward and one Adam update per parameter using its
/// group's learning rate.
pub fn train_step(model: &mut DualEncoder<f32>, batch: &Batch<f32>, cfg: &TrainConfig) -> Result<StepLosses, TrainError> {
    if batch.len() < 2 {
        return Err(TrainError::Config(format!("batch of {} items; need at least 2", batch.len())));
    }
    let mut tape = Tape::new();
    let bound = model.bind(&mut tape);
    let graph = model.loss_graph(&mut tape, &bound, batch, cfg.lambda)?;
    let losses = StepLosses {
        total: tape.item(graph.total) as f64,
        info_nce: tape.item(graph.info_nce) as f64,
        negative: tape.item(graph.negative) as f64,
    };
    if !(losses.total.is_finite() && losses.info_nce.is_finite() && losses.negative.is_finite()) {
        return Err(TrainError::NonFinite(format!(
            "total {} infonce {} negative {} temperature {}",
            losses.total,
            losses.info_nce,
            losses.negative,
            model.temperature()
        )));
    }
    let mut grads = tape.backward(graph.total);
    let adam = AdamConfig { weight_decay: cfg.weight_decay, ..AdamConfig::default() };
    for i in 0..model.params.len() {
        let lr = cfg.learning_rate(model.group(i));
        let p = &mut model.params[i];
        p.grad = Some(grads.take(bound.var(i)).unwrap_or_else(|| vec![0.0; p.value.len()]));
        adam_step(p, lr, &adam)?;
        p.zero_grad();
    }
    model.clamp_temperature();
    Ok(losses)
}

/// Mean cosine between unprojected embeddings of each item's caption and a
/// negative twin; captions and negatives are fixed by `seed`.
pub fn mean_negative_cosine(
    model: &DualEncoder<f32>,
    data: &Dataset,
    indices: &[usize],
    include_zero_grades: bool,
    seed: u64,
) -> Result<f64, TrainError> {
    if indices.is_empty() {
        return Ok(0.0);
    }
    let vocab = Vocabulary::grammar();
    let mut rng = stream_rng(seed, Stream::Evaluation, 1);
    let (mut pos, mut neg) = (Vec::new(), Vec::new());
    for (k, &i) in indices.iter().enumerate() {
        let rec = data.record(i);
        let kind = TemplateKind::ALL[k % 3];
        let negative = perturb_negative(rec, &mut rng);
        pos.extend(tokenize(&render_caption(rec, kind, include_zero_grades).text, &vocab, model.config.max_len));
        neg.extend(tokenize(&render_caption(&negative, kind, include_zero_grades).text, &vocab, model.config.max_len));
    }
    let a = model.encode_text(&pos, indices.len())?;
    let b = model.encode_text(&neg, indices.len())?;
    Ok(crate::model::negative_caption_loss(&a.cast::<f64>(), &b.cast::<f64>())?)
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct EpochReport {
    pub epoch: usize,
    pub steps: usize,
    pub survivors: usize,
    pub mean_total: f64,
    pub mean_info_nce: f64,
    pub mean_negative: f64,
    pub val_accuracy: f64,
    pub negative_cosine: f64,
    pub temperature: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct TrainReport {
    /// Probe negative cosine before the first update.
    pub initial_negative_cosine: f64,
    pub epochs: Vec<EpochReport>,
}

impl TrainReport {
    pub fn final_info_nce(&self) -> Option<f64> {
        self.epochs.last().map(|e| e.mean_info_nce)
    }

    pub fn final_negative_cosine(&self) -> f64 {
        self.epochs.last().map(|e| e.negative_cosine).unwrap_or(self.initial_negative_cosine)
    }
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub report: TrainReport,
    pub checkpoint: Checkpoint,
}

/// Probe items for the negative-cosine statistic: the validation split, or
/// the training split when there is no validation data.
fn probe_indices(data: &Dataset) -> Vec<usize> {
    let val = data.indices(Split::Val);
    if val.is_empty() {
        data.indices(Split::Train)
    } else {
        val
    }
}

/// Trains a fresh model on the dataset's train split.
pub fn fit(data: &Dataset, cfg: &TrainConfig) -> Result<TrainOutcome, TrainError> {
    fit_with_progress(data, cfg, |_| {})
}

/// As [`fit`], calling `on_epoch` after each epoch.
pub fn fit_with_progress(
    data: &Dataset,
    cfg: &TrainConfig,
    mut on_epoch: impl FnMut(&EpochReport),
) -> Result<TrainOutcome, TrainError> {
    cfg.validate()?;
    let first = data.images.first().ok_or(TrainError::EmptySplit("train"))?;
    let model_cfg = ModelConfig { height: first.height, width: first.width, ..ModelConfig::default() };
    let mut model = DualEncoder::<f32>::new(model_cfg, cfg.seed)?;
    let train_idx = data.indices(Split::Train);
    let train: Vec<(usize, &OaScoreRecord)> = train_idx.iter().map(|&i| (i, data.record(i))).collect();
    if train.is_empty() {
        return Err(TrainError::EmptySplit("train"));
    }
    let val = data.indices(Split::Val);
    let probe = probe_indices(data);
    let vocab = Vocabulary::grammar();
    let mut report = TrainReport {
        initial_negative_cosine: mean_negative_cosine(&model, data, &probe, cfg.include_zero_grades, cfg.seed)?,
        epochs: Vec::new(),
    };
    for epoch in 0..cfg.epochs {
        let plan = epoch_plan(
            &train,
            epoch,
            cfg.batch_size,
            cfg.shuffle_prob,
            &mut stream_rng(cfg.seed, Stream::EpochPlan, epoch as u64),
        )?;
        let mut caption_rng = stream_rng(cfg.seed, Stream::Captions, epoch as u64);
        let mut negative_rng = stream_rng(cfg.seed, Stream::Negatives, epoch as u64);
        let mut sums = [0.0f64; 3];
        for items in &plan.batches {
            let batch = assemble_batch(
                data,
                items,
                cfg.include_zero_grades,
                &vocab,
                model.config.max_len,
                &mut caption_rng,
                &mut negative_rng,
            )?;
            let l = train_step(&mut model, &batch, cfg)?;
            sums[0] += l.total;
            sums[1] += l.info_nce;
            sums[2] += l.negative;
        }
        let steps = plan.batches.len();
        let mean = |s: f64| if steps == 0 { 0.0 } else { s / steps as f64 };
        let entry = EpochReport {
            epoch,
            steps,
            survivors: plan.survivors,
            mean_total: mean(sums[0]),
            mean_info_nce: mean(sums[1]),
            mean_negative: mean(sums[2]),
            val_accuracy: zero_shot_eval(&model, data, &val)?.accuracy,
            negative_cosine: mean_negative_cosine(&model, data, &probe, cfg.include_zero_grades, cfg.seed)?,
            temperature: model.temperature(),
        };
        on_epoch(&entry);
        report.epochs.push(entry);
    }
    let checkpoint = Checkpoint { model, config: cfg.clone(), epoch: cfg.epochs as u32 };
    Ok(TrainOutcome { report, checkpoint })
}

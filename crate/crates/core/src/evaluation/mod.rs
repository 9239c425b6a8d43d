//! Zero-shot grading, caption retrieval, BLEU and Grad-CAM saliency.

mod bleu;
mod report;
mod retrieval;
mod saliency;
mod zero_shot;

use thiserror::Error;

pub use bleu::{bleu4, corpus_bleu4};
pub use report::{export_report, localization_eval, osteophyte_prompt, overlay, EvalReport, LocalizationItem, LocalizationReport};
pub use retrieval::{retrieval_eval, retrieve_topk, RetrievalReport, RetrievedItem, RANDOM_DRAWS};
pub use saliency::{bilinear_upsample, grad_cam, grad_cam_map, localization_score, SaliencyMap};
pub use zero_shot::{
    class_prompts, predict_class, zero_shot_classify, zero_shot_eval, Prediction, ZeroShotClassifier, ZeroShotReport,
    NUM_CLASSES,
};

#[derive(Debug, Error)]
pub enum EvalError {
    #[error(transparent)]
    Model(#[from] crate::model::ModelError),
    #[error(transparent)]
    Synth(#[from] crate::synth::SynthError),
    #[error("empty input: {0}")]
    EmptyInput(&'static str),
    #[error("{0}")]
    Invalid(String),
    #[error("prompt tokenization failed: {0}")]
    Prompt(String),
    #[error("{path}: {source}")]
    Io {
        path: String,
        #[source]
        source: std::io::Error,
    },
}

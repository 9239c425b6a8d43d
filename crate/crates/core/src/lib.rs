//! Knee osteoarthritis vision-language toolkit: OARSI score records and
//! their caption grammar, synthetic radiographs with known lesion regions,
//! a reverse-mode autodiff substrate, a small contrastive dual encoder,
//! training with negative captions, and zero-shot, retrieval and Grad-CAM
//! evaluation.

pub mod caption;
pub mod cli;
pub mod evaluation;
pub mod model;
pub mod nn;
pub mod rng;
pub mod score;
pub mod synth;
pub mod training;

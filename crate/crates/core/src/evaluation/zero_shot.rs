//! Zero-shot KL grading by nearest prompt embedding.

use serde::Serialize;

use super::EvalError;
use crate::caption::{tokenize, Vocabulary};
use crate::model::{stack_images, DualEncoder, PROJ_DIM};
use crate::nn::Scalar;
use crate::score::{Grade, Side};
use crate::synth::Dataset;

pub const NUM_CLASSES: usize = 5;

/// The prompt ensemble for one KL class.
pub fn class_prompts(grade: Grade, side: Side) -> [String; 2] {
    [
        format!("{} osteoarthritis.", grade.word()),
        format!("Image shows {} osteoarthritis in the {} knee.", grade.word(), side.word()),
    ]
}

fn cosine<T: Scalar>(a: &[T], b: &[T]) -> f64 {
    let dot: f64 = a.iter().zip(b).map(|(x, y)| x.as_f64() * y.as_f64()).sum();
    let na = a.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    let nb = b.iter().map(|x| x.as_f64().powi(2)).sum::<f64>().sqrt();
    dot / (na * nb).max(1e-12)
}

/// Index of the class vector most cosine-similar to `image`; ties go to
/// the lower index.
pub fn predict_class<T: Scalar>(image: &[T], class_vectors: &[Vec<T>]) -> usize {
    let mut best = (0, f64::NEG_INFINITY);
    for (k, v) in class_vectors.iter().enumerate() {
        let c = cosine(image, v);
        if c > best.1 {
            best = (k, c);
        }
    }
    best.0
}

/// Per-side class vectors: the mean of each class's unit prompt
/// embeddings, renormalized.
#[derive(Debug, Clone)]
pub struct ZeroShotClassifier {
    left: Vec<Vec<f32>>,
    right: Vec<Vec<f32>>,
}

impl ZeroShotClassifier {
    pub fn new(model: &DualEncoder<f32>, vocab: &Vocabulary) -> Result<Self, EvalError> {
        let build = |side: Side| -> Result<Vec<Vec<f32>>, EvalError> {
            let mut tokens = Vec::new();
            for g in Grade::all() {
                for p in class_prompts(g, side) {
                    tokens.extend(tokenize(&p, vocab, model.config.max_len));
                }
            }
            let emb = model.embed_texts(&tokens, 2 * NUM_CLASSES)?;
            Ok((0..NUM_CLASSES)
                .map(|k| {
                    let mut v: Vec<f32> = (0..PROJ_DIM).map(|j| emb.row(2 * k)[j] + emb.row(2 * k + 1)[j]).collect();
                    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-12);
                    v.iter_mut().for_each(|x| *x /= norm);
                    v
                })
                .collect())
        };
        Ok(ZeroShotClassifier { left: build(Side::Left)?, right: build(Side::Right)? })
    }

    pub fn class_vectors(&self, side: Side) -> &[Vec<f32>] {
        match side {
            Side::Left => &self.left,
            Side::Right => &self.right,
        }
    }

    /// Predicted class for a projected image embedding.
    pub fn classify(&self, image_embedding: &[f32], side: Side) -> usize {
        predict_class(image_embedding, self.class_vectors(side))
    }
}

/// Accuracy, confusion matrix (rows true, columns predicted) and
/// per-image predictions.
#[derive(Debug, Clone, Default, PartialEq, Serialize)]
pub struct ZeroShotReport {
    pub accuracy: f64,
    pub total: usize,
    pub confusion: [[usize; NUM_CLASSES]; NUM_CLASSES],
    pub predictions: Vec<Prediction>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Prediction {
    pub id: String,
    pub truth: usize,
    pub predicted: usize,
}

impl ZeroShotReport {
    pub fn from_predictions(predictions: Vec<Prediction>) -> Self {
        let mut confusion = [[0; NUM_CLASSES]; NUM_CLASSES];
        for p in &predictions {
            confusion[p.truth][p.predicted] += 1;
        }
        let total = predictions.len();
        let correct: usize = (0..NUM_CLASSES).map(|k| confusion[k][k]).sum();
        let accuracy = if total == 0 { 0.0 } else { correct as f64 / total as f64 };
        ZeroShotReport { accuracy, total, confusion, predictions }
    }

    pub fn class_totals(&self) -> [usize; NUM_CLASSES] {
        self.confusion.map(|row| row.iter().sum())
    }
}

/// Zero-shot KL prediction for one image of the given side.
pub fn zero_shot_classify(
    model: &DualEncoder<f32>,
    image: &crate::synth::SynthImage,
    side: Side,
) -> Result<usize, EvalError> {
    let clf = ZeroShotClassifier::new(model, &Vocabulary::grammar())?;
    let emb = model.embed_images(&stack_images(&[image])?)?;
    Ok(clf.classify(emb.row(0), side))
}

/// Zero-shot evaluation over dataset items `indices`.
pub fn zero_shot_eval(model: &DualEncoder<f32>, data: &Dataset, indices: &[usize]) -> Result<ZeroShotReport, EvalError> {
    if indices.is_empty() {
        return Ok(ZeroShotReport::from_predictions(Vec::new()));
    }
    let clf = ZeroShotClassifier::new(model, &Vocabulary::grammar())?;
    let images: Vec<_> = indices.iter().map(|&i| &data.images[i]).collect();
    let emb = model.embed_images(&stack_images(&images)?)?;
    let predictions = indices
        .iter()
        .enumerate()
        .map(|(row, &i)| {
            let rec = data.record(i);
            Prediction { id: rec.id.clone(), truth: rec.kl.value() as usize, predicted: clf.classify(emb.row(row), rec.side) }
        })
        .collect();
    Ok(ZeroShotReport::from_predictions(predictions))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::{Modality, ModelConfig};
    use crate::nn::Tensor;

    #[test]
    fn exact_match_and_ties() {
        let classes: Vec<Vec<f64>> =
            (0..5).map(|k| (0..5).map(|j| if j == k { 1.0 } else { 0.0 }).collect()).collect();
        assert_eq!(predict_class(&classes[3], &classes), 3);
        let equal = vec![vec![1.0, 0.0]; 5];
        assert_eq!(predict_class(&[0.3, 0.7], &equal), 0);
    }

    #[test]
    fn classification_is_scale_invariant_at_init() {
        let m = DualEncoder::<f32>::new(ModelConfig::default(), 3).unwrap();
        let clf = ZeroShotClassifier::new(&m, &Vocabulary::grammar()).unwrap();
        let u = Tensor::from_fn(&[8, 64], |i| ((i * 37 % 101) as f32 / 50.0) - 1.0);
        let scaled = Tensor::new(vec![8, 64], u.data().iter().map(|v| v * 7.5).collect()).unwrap();
        let (a, b) = (m.project(&u, Modality::Image).unwrap(), m.project(&scaled, Modality::Image).unwrap());
        for r in 0..8 {
            assert_eq!(clf.classify(a.row(r), Side::Left), clf.classify(b.row(r), Side::Left));
        }
    }

    #[test]
    fn class_vectors_are_unit_norm() {
        let m = DualEncoder::<f32>::new(ModelConfig::default(), 1).unwrap();
        let clf = ZeroShotClassifier::new(&m, &Vocabulary::grammar()).unwrap();
        for side in [Side::Left, Side::Right] {
            for v in clf.class_vectors(side) {
                assert!((v.iter().map(|x| x * x).sum::<f32>().sqrt() - 1.0).abs() < 1e-5);
            }
        }
        assert!(class_prompts(Grade::new(2).unwrap(), Side::Right)[1].contains("mild osteoarthritis in the right knee"));
    }

    #[test]
    fn report_counts_are_consistent() {
        let preds = vec![
            Prediction { id: "a".into(), truth: 1, predicted: 1 },
            Prediction { id: "b".into(), truth: 1, predicted: 2 },
            Prediction { id: "c".into(), truth: 4, predicted: 4 },
        ];
        let r = ZeroShotReport::from_predictions(preds);
        assert_eq!(r.class_totals(), [0, 2, 0, 0, 1]);
        assert!((r.accuracy - 2.0 / 3.0).abs() < 1e-12);
        assert_eq!(ZeroShotReport::from_predictions(vec![]).accuracy, 0.0);
    }
}

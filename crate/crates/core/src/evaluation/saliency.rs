//! Grad-CAM saliency and its localization score.

use serde::Serialize;

use super::EvalError;
use crate::caption::{tokenize, tokenize_words, Vocabulary, UNK};
use crate::model::{stack_images, DualEncoder, Modality};
use crate::nn::{Scalar, Tape};
use crate::synth::{Mask, SynthImage};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct SaliencyMap {
    pub height: usize,
    pub width: usize,
    pub values: Vec<f32>,
    pub prompt: String,
    pub image_id: String,
}

impl SaliencyMap {
    pub fn get(&self, r: usize, c: usize) -> f32 {
        self.values[r * self.width + c]
    }
}

/// Bilinear resize of a `h x w` grid (pixel centers aligned).
pub fn bilinear_upsample(src: &[f64], h: usize, w: usize, out_h: usize, out_w: usize) -> Vec<f64> {
    let coord = |o: usize, n_in: usize, n_out: usize| -> (usize, usize, f64) {
        let x = ((o as f64 + 0.5) * n_in as f64 / n_out as f64 - 0.5).clamp(0.0, (n_in - 1) as f64);
        let lo = x.floor() as usize;
        let hi = (lo + 1).min(n_in - 1);
        (lo, hi, x - lo as f64)
    };
    let mut out = Vec::with_capacity(out_h * out_w);
    for r in 0..out_h {
        let (r0, r1, fr) = coord(r, h, out_h);
        for c in 0..out_w {
            let (c0, c1, fc) = coord(c, w, out_w);
            let top = src[r0 * w + c0] * (1.0 - fc) + src[r0 * w + c1] * fc;
            let bottom = src[r1 * w + c0] * (1.0 - fc) + src[r1 * w + c1] * fc;
            out.push(top * (1.0 - fr) + bottom * fr);
        }
    }
    out
}

/// Grad-CAM from one image's activations and gradients `[c, h, w]`:
/// channel weights are spatial gradient means, the map is
/// `relu(sum_c w_c A_c)` upsampled to `out_h x out_w` and divided by its max.
pub fn grad_cam_map<T: Scalar>(
    activations: &[T],
    gradients: &[T],
    (c, h, w): (usize, usize, usize),
    (out_h, out_w): (usize, usize),
) -> Result<Vec<f32>, EvalError> {
    if activations.len() != c * h * w || gradients.len() != c * h * w || h == 0 || w == 0 {
        return Err(EvalError::Invalid(format!("activations/gradients do not match [{c}, {h}, {w}]")));
    }
    let hw = h * w;
    let mut raw = vec![0.0f64; hw];
    for ch in 0..c {
        let g = &gradients[ch * hw..(ch + 1) * hw];
        let weight = g.iter().map(|v| v.as_f64()).sum::<f64>() / hw as f64;
        for (r, a) in raw.iter_mut().zip(&activations[ch * hw..(ch + 1) * hw]) {
            *r += weight * a.as_f64();
        }
    }
    raw.iter_mut().for_each(|v| *v = v.max(0.0));
    let up = bilinear_upsample(&raw, h, w, out_h, out_w);
    let max = up.iter().copied().fold(0.0, f64::max);
    Ok(up.iter().map(|v| if max > 0.0 { (v / max) as f32 } else { 0.0 }).collect())
}

fn prompt_tokens(prompt: &str, vocab: &Vocabulary, max_len: usize) -> Result<Vec<u32>, EvalError> {
    let words = tokenize_words(prompt);
    if words.is_empty() {
        return Err(EvalError::Prompt(format!("{prompt:?} has no tokens")));
    }
    if let Some(w) = words.iter().find(|w| vocab.id(w) == UNK) {
        return Err(EvalError::Prompt(format!("{prompt:?}: unknown word {w:?}")));
    }
    Ok(tokenize(prompt, vocab, max_len))
}

/// Grad-CAM of the image-prompt cosine over the final conv stage.
pub fn grad_cam(
    model: &DualEncoder<f32>,
    image: &SynthImage,
    image_id: &str,
    prompt: &str,
    vocab: &Vocabulary,
) -> Result<SaliencyMap, EvalError> {
    let tokens = prompt_tokens(prompt, vocab, model.config.max_len)?;
    let mut tape = Tape::new();
    let b = model.bind_frozen(&mut tape);
    let x = tape.param(stack_images::<f32>(&[image])?);
    let img = model.image_graph(&mut tape, &b, x)?;
    let ip = model.project_graph(&mut tape, &b, img.embedding, Modality::Image)?;
    let u = model.text_graph(&mut tape, &b, &tokens, 1)?;
    let tp = model.project_graph(&mut tape, &b, u, Modality::Text)?;
    let prod = tape.mul(ip, tp).map_err(crate::model::ModelError::from)?;
    let target = tape.sum_all(prod);
    let grads = tape.backward(target);
    let shape = tape.shape(img.activations).to_vec();
    let dims = (shape[1], shape[2], shape[3]);
    let acts = tape.value(img.activations).data();
    let zeros = vec![0.0f32; acts.len()];
    let g = grads.get(img.activations).unwrap_or(&zeros);
    let values = grad_cam_map(acts, g, dims, (image.height, image.width))?;
    Ok(SaliencyMap {
        height: image.height,
        width: image.width,
        values,
        prompt: prompt.to_string(),
        image_id: image_id.to_string(),
    })
}

/// Share of saliency mass inside `mask` divided by the mask's share of the
/// image; 1 is uniform. An all-zero map scores 0.
pub fn localization_score(saliency: &SaliencyMap, mask: &Mask) -> Result<f64, EvalError> {
    if (mask.height, mask.width) != (saliency.height, saliency.width) {
        return Err(EvalError::Invalid("mask and saliency sizes differ".into()));
    }
    let area = mask.count();
    if area == 0 {
        return Err(EvalError::EmptyInput("ground-truth mask is empty"));
    }
    let total: f64 = saliency.values.iter().map(|v| *v as f64).sum();
    if total <= 0.0 {
        return Ok(0.0);
    }
    let inside: f64 = saliency.values.iter().zip(&mask.cells).filter(|(_, m)| **m).map(|(v, _)| *v as f64).sum();
    Ok((inside / total) / (area as f64 / mask.cells.len() as f64))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::model::ModelConfig;
    use crate::score::{Alignment, OaScoreRecord, Sex, Side};
    use crate::synth::{render_image, SynthConfig};

    fn map(values: Vec<f32>, h: usize, w: usize) -> SaliencyMap {
        SaliencyMap { height: h, width: w, values, prompt: String::new(), image_id: String::new() }
    }

    #[test]
    fn constant_inputs_give_uniform_map() {
        let acts = vec![0.7f64; 4 * 8 * 8];
        let grads = vec![0.2f64; 4 * 8 * 8];
        let m = grad_cam_map(&acts, &grads, (4, 8, 8), (64, 64)).unwrap();
        assert_eq!(m.len(), 64 * 64);
        assert!(m.iter().all(|v| *v == 1.0));
        let neg = vec![-0.2f64; 4 * 8 * 8];
        assert!(grad_cam_map(&acts, &neg, (4, 8, 8), (64, 64)).unwrap().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn upsample_preserves_constants_and_corners() {
        let src: Vec<f64> = (0..4).map(|i| i as f64).collect();
        let up = bilinear_upsample(&src, 2, 2, 4, 4);
        assert_eq!(up[0], 0.0);
        assert_eq!(up[15], 3.0);
        assert!(bilinear_upsample(&[2.5; 9], 3, 3, 7, 5).iter().all(|v| *v == 2.5));
    }

    #[test]
    fn localization_cases() {
        let mut mask = Mask { height: 10, width: 10, cells: vec![false; 100] };
        mask.cells[..10].iter_mut().for_each(|c| *c = true);
        let uniform = map(vec![0.5; 100], 10, 10);
        assert!((localization_score(&uniform, &mask).unwrap() - 1.0).abs() < 1e-12);
        let mut inside = vec![0.0; 100];
        inside[..10].iter_mut().for_each(|v| *v = 1.0);
        assert!((localization_score(&map(inside, 10, 10), &mask).unwrap() - 10.0).abs() < 1e-12);
        let empty = Mask { height: 10, width: 10, cells: vec![false; 100] };
        assert!(localization_score(&uniform, &empty).is_err());
    }

    #[test]
    fn model_map_has_image_shape_and_range() {
        let model = DualEncoder::<f32>::new(ModelConfig::default(), 4).unwrap();
        let rec = OaScoreRecord::healthy("k", Side::Left, 60, Sex::Male, Alignment::Neutral);
        let img = render_image(&rec, &SynthConfig::default(), 1).unwrap();
        let vocab = Vocabulary::grammar();
        let m = grad_cam(&model, &img, "k", "In femur medial compartment: mild osteophytes.", &vocab).unwrap();
        assert_eq!((m.height, m.width, m.values.len()), (64, 64, 4096));
        assert!(m.values.iter().all(|v| (0.0..=1.0).contains(v)));
        let max = m.values.iter().copied().fold(0.0, f32::max);
        assert!(max == 1.0 || max == 0.0);
        assert!(grad_cam(&model, &img, "k", "zebra knee", &vocab).is_err());
        assert!(grad_cam(&model, &img, "k", "", &vocab).is_err());
    }
}

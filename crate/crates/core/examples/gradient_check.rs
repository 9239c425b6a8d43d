//! Compares the tape gradient of the full training loss with central finite
//! differences in 64-bit mode.

use anyhow::Result;
use oa_vlm::caption::{render_caption, tokenize, TemplateKind, Vocabulary};
use oa_vlm::model::{check_gradients, Batch, DualEncoder, ModelConfig};
use oa_vlm::nn::Tensor;
use oa_vlm::rng::seeded;
use oa_vlm::score::{perturb_negative, sample_record};
use rand::Rng;

fn main() -> Result<()> {
    let vocab = Vocabulary::grammar();
    let cfg = ModelConfig::default();
    for seed in 0..3 {
        let model = DualEncoder::<f64>::new(cfg, seed)?;
        let mut rng = seeded(seed + 100);
        let (mut pos, mut neg) = (Vec::new(), Vec::new());
        for i in 0..4 {
            let rec = sample_record(&mut rng, format!("{i}"));
            let negative = perturb_negative(&rec, &mut rng);
            pos.extend(tokenize(&render_caption(&rec, TemplateKind::Overall, true).text, &vocab, cfg.max_len));
            neg.extend(tokenize(&render_caption(&negative, TemplateKind::Overall, true).text, &vocab, cfg.max_len));
        }
        let images = Tensor::from_fn(&[4, 1, cfg.height, cfg.width], |_| rng.random_range(0.0..1.0));
        let batch = Batch { images, pos_tokens: pos, neg_tokens: neg };
        let err = check_gradients(&model, &batch, 0.5, 4, 1e-4, &mut rng)?;
        println!("seed {seed}: max relative error {err:.2e}");
    }
    Ok(())
}

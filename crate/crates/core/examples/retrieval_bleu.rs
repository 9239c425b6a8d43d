//! Image-to-caption retrieval on a held-out split, scored by BLEU-4 against
//! each image's own caption and compared with random retrieval.

use anyhow::Result;
use oa_vlm::caption::{render_caption, tokenize_words, TemplateKind};
use oa_vlm::evaluation::{bleu4, retrieval_eval};
use oa_vlm::synth::{Dataset, Split, SplitRatios, SynthConfig};
use oa_vlm::training::{fit, TrainConfig};

fn main() -> Result<()> {
    let hand = bleu4(&tokenize_words("a b c d e"), &tokenize_words("a b c d f"))?;
    println!("BLEU-4 of \"a b c d e\" against \"a b c d f\": {hand:.4}");

    let data = Dataset::in_memory(800, &SynthConfig::default(), &SplitRatios::default())?;
    let model = fit(&data, &TrainConfig { epochs: 4, ..TrainConfig::default() })?.checkpoint.model;
    let test = data.indices(Split::Test);
    let report = retrieval_eval(&model, &data, &test, 5, 0)?;
    println!("mean top-1 BLEU-4 {:.3}, random retrieval {:.3}", report.mean_top1_bleu, report.random_bleu);
    println!("own caption within top-k: {:?}", report.hits_at);

    let item = &report.items[0];
    let own = render_caption(data.record(test[0]), TemplateKind::Location, true).text;
    let top = render_caption(data.record(test[item.ranked[0]]), TemplateKind::Location, true).text;
    println!("\nquery {}\n  own: {own}\n  top: {top}\n  BLEU-4 {:.3}", item.id, item.top1_bleu);
    Ok(())
}

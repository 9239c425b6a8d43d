//! Desk-scale run: 2472 synthetic 64x64 images, 20 epochs, then zero-shot,
//! retrieval and saliency localization on the test split.
//!
//! Usage: cargo run --release --example train_desk_scale [epochs] [lambda]

use std::time::Instant;

use anyhow::Result;
use oa_vlm::evaluation::{localization_eval, retrieval_eval, zero_shot_eval};
use oa_vlm::synth::{Dataset, Split, SplitRatios, SynthConfig};
use oa_vlm::training::{fit_with_progress, TrainConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let epochs = args.next().map(|s| s.parse()).transpose()?.unwrap_or(20);
    let lambda = args.next().map(|s| s.parse()).transpose()?.unwrap_or(0.5);

    let synth = SynthConfig::default();
    let start = Instant::now();
    let data = Dataset::in_memory(2472, &synth, &SplitRatios::default())?;
    println!("synthesized {} images in {:.1?}", data.len(), start.elapsed());

    let cfg = TrainConfig { epochs, lambda, ..TrainConfig::default() };
    let outcome = fit_with_progress(&data, &cfg, |e| {
        println!(
            "epoch {:>2}  steps {:>3}  infonce {:.3}  negative {:.3}  val acc {:.3}  neg cos {:.3}  tau {:.4}  [{:.0?}]",
            e.epoch,
            e.steps,
            e.mean_info_nce,
            e.mean_negative,
            e.val_accuracy,
            e.negative_cosine,
            e.temperature,
            start.elapsed()
        )
    })?;
    let model = &outcome.checkpoint.model;
    println!("initial negative cosine {:.3}", outcome.report.initial_negative_cosine);

    let test = data.indices(Split::Test);
    let zs = zero_shot_eval(model, &data, &test)?;
    println!("zero-shot accuracy {:.3} on {} test images", zs.accuracy, zs.total);
    for (k, row) in zs.confusion.iter().enumerate() {
        println!("  KL{k} {row:?}");
    }
    let ret = retrieval_eval(model, &data, &test, 5, cfg.seed)?;
    println!("retrieval top-1 BLEU-4 {:.3}, random {:.3}", ret.mean_top1_bleu, ret.random_bleu);
    let (loc, _) = localization_eval(model, &data, &test, &synth, 2)?;
    println!("localization mean score {:.3} over {} prompts", loc.mean_score, loc.items.len());
    println!("total {:.1?}", start.elapsed());
    Ok(())
}

//! Trains briefly on a small synthetic set, then grades held-out knees by
//! nearest KL prompt embedding.

use anyhow::Result;
use oa_vlm::evaluation::{class_prompts, zero_shot_eval};
use oa_vlm::score::{Grade, Side};
use oa_vlm::synth::{Dataset, Split, SplitRatios, SynthConfig};
use oa_vlm::training::{fit, TrainConfig};

fn main() -> Result<()> {
    let data = Dataset::in_memory(800, &SynthConfig::default(), &SplitRatios::default())?;
    let cfg = TrainConfig { epochs: 4, ..TrainConfig::default() };
    let model = fit(&data, &cfg)?.checkpoint.model;

    for g in 0..5 {
        let [a, b] = class_prompts(Grade::new(g).expect("grade in range"), Side::Left);
        println!("KL{g}: {a:?} | {b:?}");
    }
    let test = data.indices(Split::Test);
    let report = zero_shot_eval(&model, &data, &test)?;
    println!("\naccuracy {:.3} over {} images (chance 0.2)", report.accuracy, report.total);
    println!("confusion (rows: truth, columns: prediction)");
    for (k, row) in report.confusion.iter().enumerate() {
        println!("  KL{k} {row:?}");
    }
    Ok(())
}

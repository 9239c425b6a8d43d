//! Grad-CAM maps for osteophyte prompts, scored against the rendered spur
//! regions and written as PGM overlays.
//!
//! Usage: cargo run --example saliency [out_dir]

use std::path::PathBuf;

use anyhow::Result;
use oa_vlm::evaluation::{export_report, localization_eval, EvalReport};
use oa_vlm::synth::{Dataset, Split, SplitRatios, SynthConfig};
use oa_vlm::training::{fit, TrainConfig};

fn main() -> Result<()> {
    let out: PathBuf =
        std::env::args().nth(1).map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("oavl-saliency"));
    let synth = SynthConfig::default();
    let data = Dataset::in_memory(800, &synth, &SplitRatios::default())?;
    let model = fit(&data, &TrainConfig { epochs: 4, ..TrainConfig::default() })?.checkpoint.model;

    let test = data.indices(Split::Test);
    let (loc, maps) = localization_eval(&model, &data, &test, &synth, 2)?;
    println!("mean localization score {:.3} over {} prompts (1 is uniform)", loc.mean_score, loc.items.len());
    for (item, map) in loc.items.iter().zip(&maps).take(5) {
        println!("  {} {} grade {}: {:.2}  {:?}", item.id, item.site, item.grade, item.score, map.prompt);
    }
    let saliency = maps
        .into_iter()
        .take(8)
        .map(|m| {
            let i = test.iter().copied().find(|&i| data.record(i).id == m.image_id).expect("map of a test image");
            (m, data.images[i].clone())
        })
        .collect();
    let report = EvalReport { localization: Some(loc), saliency, ..Default::default() };
    export_report(&report, &out)?;
    println!("wrote {}", out.display());
    Ok(())
}

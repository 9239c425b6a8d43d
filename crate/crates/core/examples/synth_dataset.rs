//! Writes a small synthetic dataset (manifest.jsonl and 16-bit PGM images)
//! and reloads it.
//!
//! Usage: cargo run --example synth_dataset [out_dir] [n]

use std::path::PathBuf;

use anyhow::Result;
use oa_vlm::synth::{generate_dataset, Dataset, Split, SplitRatios, SynthConfig};

fn main() -> Result<()> {
    let mut args = std::env::args().skip(1);
    let out: PathBuf = args.next().map(PathBuf::from).unwrap_or_else(|| std::env::temp_dir().join("oavl-synth"));
    let n: usize = args.next().map(|s| s.parse()).transpose()?.unwrap_or(100);

    let cfg = SynthConfig { seed: 7, ..SynthConfig::default() };
    generate_dataset(n, &cfg, &SplitRatios::default(), &out)?;
    let data = Dataset::open(&out)?;
    for split in [Split::Train, Split::Val, Split::Test] {
        println!("{:>5}: {} images", split.name(), data.indices(split).len());
    }
    let first = data.record(0);
    let image = &data.images[0];
    let mean = image.pixels.iter().sum::<f32>() / image.pixels.len() as f32;
    println!("{} ({} knee, KL {}): {}x{}, mean intensity {mean:.3}", first.id, first.side.word(), first.kl.value(), image.height, image.width);
    println!("wrote {}", out.display());
    Ok(())
}

//! Saves a checkpoint, lists its tensors, reloads it bit-exactly and shows
//! that a flipped payload byte is rejected.

use anyhow::Result;
use oa_vlm::model::{DualEncoder, ModelConfig};
use oa_vlm::training::{inspect_checkpoint, Checkpoint, TrainConfig};

fn main() -> Result<()> {
    let ckpt = Checkpoint {
        model: DualEncoder::<f32>::new(ModelConfig::default(), 3)?,
        config: TrainConfig::default(),
        epoch: 0,
    };
    let dir = std::env::temp_dir().join("oavl-checkpoint");
    std::fs::create_dir_all(&dir)?;
    let path = dir.join("model.bin");
    ckpt.save(&path)?;

    let bytes = std::fs::read(&path)?;
    println!("{} bytes, {} parameters", bytes.len(), ckpt.model.param_count());
    for t in inspect_checkpoint(&bytes)?.iter().filter(|t| !t.name.contains(".adam_")) {
        println!("  {:<32} {:?} dtype {} crc32 {:08x}", t.name, t.dims, t.dtype, t.crc32);
    }

    let loaded = Checkpoint::load(&path)?;
    println!("reload identical: {}", loaded.to_bytes() == bytes);

    let mut corrupt = bytes.clone();
    corrupt[40] ^= 0x01;
    match Checkpoint::from_bytes(&corrupt) {
        Ok(_) => println!("corruption went unnoticed"),
        Err(e) => println!("corrupted copy rejected: {e}"),
    }
    Ok(())
}

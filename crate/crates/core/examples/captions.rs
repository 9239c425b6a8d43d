//! Renders the caption bag of a sampled knee record, a sentence-shuffled
//! view, a negative twin, and parses a caption back into grades.

use anyhow::Result;
use oa_vlm::caption::{build_caption_bag, parse_caption, render_caption, shuffle_sentences, TemplateKind};
use oa_vlm::rng::seeded;
use oa_vlm::score::{perturb_negative, sample_record};

fn main() -> Result<()> {
    let mut rng = seeded(7);
    let record = sample_record(&mut rng, "knee-001");
    println!("record: {}", serde_json::to_string(&record)?);

    let bag = build_caption_bag(&record, false);
    for kind in TemplateKind::ALL {
        println!("\n[{}]\n{}", kind.name(), bag.get(kind).text);
    }

    let location = render_caption(&record, TemplateKind::Location, true);
    println!("\n[location, zero grades stated, shuffled]\n{}", shuffle_sentences(&location, &mut rng).text);

    let parsed = parse_caption(&location.text)?;
    println!("\nparse mismatches against the record: {:?}", parsed.mismatches(&record));

    let negative = perturb_negative(&record, &mut rng);
    println!("\n[negative overall]\n{}", render_caption(&negative, TemplateKind::Overall, false).text);
    Ok(())
}

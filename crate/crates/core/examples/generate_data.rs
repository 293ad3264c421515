//! Renders a small synthetic corpus and writes it as sample folders.
//!
//! ```text
//! cargo run --example generate_data -- [out_dir] [count]
//! ```

use mive::datagen::{generate_corpus, split_dir, write_dataset, EditType, GenConfig};

fn main() -> mive::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let root = args.get(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("mive_data"));
    let count = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(8);
    let samples = generate_corpus(&EditType::ALL, count, 42, GenConfig::default())?;
    for s in &samples {
        let changed = s.gt_mask.iter().filter(|&&m| m).count();
        println!("{:24} {:16} {:5} masked px  \"{}\"", s.meta.id, s.edit_type().name(), changed, s.instruction());
    }
    write_dataset(&root, "train", &samples)?;
    println!("wrote {}", split_dir(&root, "train").display());
    Ok(())
}

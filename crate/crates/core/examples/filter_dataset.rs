//! Scores every generated target with the oracle, applies the retention
//! thresholds and caps each edit type.

use mive::datagen::{cap_per_category, filter_decision, generate_corpus, EditType, GenConfig, Verdict};
use mive::evaluator::{apply_negligible_cap, oracle_scores};
use mive::Video;

fn main() -> mive::Result<()> {
    let mut data = generate_corpus(&EditType::ALL, 12, 3, GenConfig::default())?;
    // Spoil a few targets so that the thresholds have something to reject.
    for (i, s) in data.iter_mut().enumerate() {
        match i % 4 {
            1 => s.tgt_video = s.src_video.clone(),
            2 => {
                let noisy = s.tgt_video.data().mapv(|v| (v * 0.6 + 0.2).clamp(0.0, 1.0));
                s.tgt_video = Video::new(noisy)?;
            }
            _ => {}
        }
    }
    let mut kept = Vec::new();
    for s in data {
        let scores = apply_negligible_cap(&oracle_scores(&s, &s.tgt_video)?, &s.src_video, &s.tgt_video)?;
        let d = filter_decision(scores.mean())?;
        println!("{:24} {:5.2} {:?}", s.meta.id, d.score, d.verdict);
        if d.verdict == Verdict::Retain {
            kept.push(s);
        }
    }
    let capped = cap_per_category(kept, 2);
    println!("retained after cap of 2 per type: {}", capped.len());
    Ok(())
}

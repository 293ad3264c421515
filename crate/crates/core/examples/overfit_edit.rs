//! Memorizes eight pairs, then edits each training source and reports the
//! per-pixel error against its target.
//!
//! ```text
//! cargo run --release --example overfit_edit -- [steps] [lr] [batch] [constant|cosine]
//! ```

use std::time::Instant;

use mive::datagen::{generate_corpus, EditType, GenConfig};
use mive::editor::{Editor, DEFAULT_STEPS};
use mive::evaluator::{oracle_scores, Dimension};
use mive::trainer::{LrDecay, TrainConfig, Trainer};

fn main() -> mive::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let steps = args.get(1).and_then(|s| s.parse().ok()).unwrap_or(2000);
    let lr = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(1e-3);
    let batch = args.get(3).and_then(|s| s.parse().ok()).unwrap_or(1);
    let decay = match args.get(4).map(String::as_str) {
        Some("cosine") => LrDecay::Cosine,
        _ => LrDecay::Constant,
    };
    let data = generate_corpus(&EditType::ALL, 8, 0, GenConfig::default())?;
    let cfg = TrainConfig {
        lr,
        warmup_steps: 100.min(steps),
        total_steps: steps,
        batch_size: batch,
        decay,
        ..Default::default()
    };
    let mut trainer = Trainer::new(cfg.clone(), &data)?;
    let start = Instant::now();
    let mut window = Vec::new();
    trainer.run(None, |m| {
        window.push(m.loss);
        if m.step % 100 == 0 {
            let avg = window.iter().sum::<f64>() / window.len() as f64;
            println!("step {:5}  loss {avg:.5}  {:.0}s", m.step, start.elapsed().as_secs_f64());
            window.clear();
        }
    })?;
    let editor = Editor::new(&cfg, trainer.params.clone())?;
    for s in &data {
        let out = editor.edit(&s.src_video, &s.ref_image, s.instruction(), DEFAULT_STEPS, 0)?;
        let sc = oracle_scores(s, &out)?;
        println!(
            "{:24} mae {:.4}  IA {:.2}  CC {:.2}",
            s.meta.id,
            out.mean_abs_diff(&s.tgt_video)?,
            sc.get(Dimension::IA),
            sc.get(Dimension::CC)
        );
    }
    Ok(())
}

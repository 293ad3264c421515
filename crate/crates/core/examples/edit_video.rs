//! Trains briefly on a handful of pairs, saves a checkpoint, reloads it and
//! edits one source video.
//!
//! ```text
//! cargo run --release --example edit_video -- [out_dir] [steps]
//! ```

use mive::datagen::{generate_corpus, EditType, GenConfig};
use mive::editor::{Editor, DEFAULT_STEPS};
use mive::io::{write_video, video::DEFAULT_FPS};
use mive::trainer::{checkpoint_dir, TrainConfig, Trainer};

fn main() -> mive::Result<()> {
    let args: Vec<String> = std::env::args().collect();
    let out = args.get(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("mive_edit"));
    let steps = args.get(2).and_then(|s| s.parse().ok()).unwrap_or(50);
    let data = generate_corpus(&EditType::ALL, 4, 0, GenConfig::default())?;
    let cfg = TrainConfig { lr: 1e-3, warmup_steps: steps / 10, total_steps: steps, ..Default::default() };
    let mut trainer = Trainer::new(cfg, &data)?;
    let history = trainer.run(Some(&out), |_| {})?;
    println!("trained {steps} steps, last loss {:.5}", history.last().map_or(f64::NAN, |m| m.loss));

    let editor = Editor::from_checkpoint(checkpoint_dir(&out))?;
    let s = &data[0];
    let edited = editor.edit(&s.src_video, &s.ref_image, s.instruction(), DEFAULT_STEPS, 0)?;
    println!("\"{}\": MAE to target {:.4}", s.instruction(), edited.mean_abs_diff(&s.tgt_video)?);
    write_video(out.join("edited"), &edited, DEFAULT_FPS)?;
    println!("frames in {}", out.join("edited").display());
    Ok(())
}

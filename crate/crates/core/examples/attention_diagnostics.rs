//! Text-to-visual attention of the toy encoder: mask ratio per depth and
//! heatmaps for every layer.
//!
//! ```text
//! cargo run --example attention_diagnostics -- [out_dir]
//! ```

use mive::datagen::{generate_sample, EditType, GenConfig};
use mive::diagnostics::{cross_modal_attention, depth_report, downsample_mask, mean_text_heatmap, write_heatmap};
use mive::encoder::{EncoderConfig, ToyEncoder, Vocab};
use ndarray::{concatenate, Axis};

fn main() -> mive::Result<()> {
    let out = std::env::args().nth(1).map(Into::into).unwrap_or_else(|| std::env::temp_dir().join("mive_heatmaps"));
    let s = generate_sample(EditType::Add, 3, GenConfig::default())?;
    let vocab = Vocab::builtin();
    let enc = ToyEncoder::new(EncoderConfig { layers: 6, ..Default::default() }, vocab.len())?;
    let (ctx, trace) = enc.encode_unified(&vocab.tokenize(s.instruction()), &s.ref_image, &s.src_video)?;
    println!("\"{}\": {} text + {} visual tokens", s.instruction(), ctx.num_text, ctx.num_visual);

    // The reference frame shares the first frame's region.
    let first = s.gt_mask.index_axis(Axis(0), 0).insert_axis(Axis(0));
    let pixel_mask = concatenate(Axis(0), &[first, s.gt_mask.view()]).expect("same frame size");
    let mask = downsample_mask(&pixel_mask, enc.config().patch)?;
    let report = depth_report(&trace, &ctx, &mask)?;
    println!("mask covers {:.3} of visual tokens", report.mask_fraction);
    for d in &report.depths {
        println!("depth {:>4} -> layer {}  R_mask {:.4}", d.depth, d.layer, d.r_mask);
    }
    for l in 1..=trace.num_layers() {
        let heat = mean_text_heatmap(&cross_modal_attention(&trace, &ctx, l)?, ctx.visual_grid)?;
        write_heatmap(&out, &format!("layer{l:02}"), &heat)?;
    }
    println!("heatmaps in {}", out.display());
    Ok(())
}

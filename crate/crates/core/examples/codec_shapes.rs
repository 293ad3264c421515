//! Latent geometry of a toy clip: codec layout, joint latent and patch tokens.

use mive::codec::{build_joint, decode, encode, patch_split};
use mive::datagen::{generate_sample, EditType, GenConfig};

fn main() -> mive::Result<()> {
    let s = generate_sample(EditType::Recolor, 1, GenConfig::default())?;
    let (t, h, w) = s.src_video.dims();
    let z_src = encode(&s.src_video)?;
    let z_ref = encode(&s.ref_image)?;
    println!("video      {t} x 3 x {h} x {w}");
    println!("latent     {:?}", z_src.shape());
    println!("reference  {:?}", z_ref.shape());
    let joint = build_joint(&z_ref, &encode(&s.tgt_video)?, &z_src)?;
    println!("joint      {:?}", joint.shape());
    let (tokens, grid) = patch_split(&joint.data, 2)?;
    println!(
        "tokens     {} x {} ({} per frame, first {} are the reference)",
        tokens.rows(),
        tokens.cols(),
        grid.tokens_per_frame(),
        grid.tokens_per_frame()
    );
    println!("roundtrip  exact: {}", decode(&z_src)? == s.src_video);
    Ok(())
}

//! Condition tokens from encoder features under each layer-selection mode.

use mive::adapter::{condition_tokens, init_adapter, LayerFeatures, LayerMode};
use mive::datagen::{generate_sample, EditType, GenConfig};
use mive::encoder::{EncoderConfig, ToyEncoder, Vocab};
use mive_autograd::ParamStore;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

fn main() -> mive::Result<()> {
    let s = generate_sample(EditType::BackgroundSwap, 0, GenConfig::default())?;
    let vocab = Vocab::builtin();
    let enc = ToyEncoder::new(EncoderConfig::default(), vocab.len())?;
    let (_, trace) = enc.encode_unified(&vocab.tokenize(s.instruction()), &s.ref_image, &s.src_video)?;
    let feats = LayerFeatures::from_trace(&enc, &trace);

    let mut params = ParamStore::new();
    init_adapter(&mut params, "adapter", enc.config().dim, 64, &mut ChaCha8Rng::seed_from_u64(0))?;
    for mode in LayerMode::ALL {
        let c = condition_tokens(&params, "adapter", &feats, mode)?;
        let norm = c.c.data().iter().map(|v| v * v).sum::<f64>().sqrt();
        println!("{:10} layers {:?}  tokens {:?}  norm {norm:.3}", mode.name(), c.source_layers, c.c.shape());
    }
    Ok(())
}

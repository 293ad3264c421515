//! Frozen encoders and codec applied to edit samples ahead of training or
//! inference.

use crate::adapter::LayerFeatures;
use crate::backbone::{Arch, Conditioning};
use crate::codec::encode;
use crate::datagen::EditSample;
use crate::encoder::{DecoupledEncoders, EncoderConfig, ToyEncoder, Vocab};
use crate::error::Result;
use crate::tensor::{Latent, Video};

/// The unified encoder plus the separate text and image encoders, all with
/// seeded weights that never train.
#[derive(Debug, Clone)]
pub struct FrozenEncoders {
    pub vocab: Vocab,
    pub unified: ToyEncoder,
    pub decoupled: DecoupledEncoders,
}

impl FrozenEncoders {
    pub fn new(config: &EncoderConfig) -> Result<Self> {
        Self::with_vocab(config, Vocab::builtin())
    }

    pub fn with_vocab(config: &EncoderConfig, vocab: Vocab) -> Result<Self> {
        let unified = ToyEncoder::new(config.clone(), vocab.len())?;
        let decoupled = DecoupledEncoders::new(config, vocab.len())?;
        Ok(Self {
            vocab,
            unified,
            decoupled,
        })
    }

    /// Width of the encoder features.
    pub fn dim(&self) -> usize {
        self.unified.config().dim
    }

    /// Features consumed by `arch`. The decoupled model reads the instruction
    /// through the text encoder and the reference through the image encoder.
    pub fn conditioning(&self, arch: Arch, instruction: &str, ref_image: &Video, src: &Video) -> Result<Conditioning> {
        let tokens = self.vocab.tokenize(instruction);
        if arch == Arch::DecoupledDualXattn {
            let text = &self.decoupled.text;
            let image = &self.decoupled.image;
            return Ok(Conditioning {
                unified: None,
                text: Some(LayerFeatures::from_trace(text, &text.trace_text(&tokens)?)),
                image: Some(LayerFeatures::from_trace(image, &image.trace_image(ref_image)?)),
            });
        }
        let (_, trace) = self.unified.encode_unified(&tokens, ref_image, src)?;
        Ok(Conditioning {
            unified: Some(LayerFeatures::from_trace(&self.unified, &trace)),
            ..Default::default()
        })
    }
}

/// Latents and encoder features of one sample, computed once.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub z_ref: Latent,
    pub z_src: Latent,
    pub z_tgt: Latent,
    pub cond: Conditioning,
}

pub fn prepare(encoders: &FrozenEncoders, arch: Arch, sample: &EditSample) -> Result<Prepared> {
    Ok(Prepared {
        z_ref: encode(&sample.ref_image)?,
        z_src: encode(&sample.src_video)?,
        z_tgt: encode(&sample.tgt_video)?,
        cond: encoders.conditioning(arch, sample.instruction(), &sample.ref_image, &sample.src_video)?,
    })
}

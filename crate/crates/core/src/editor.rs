//! Noise-initialized Euler integration of the learned flow, conditioned on a
//! source video, an edited reference frame and an instruction.

use std::path::Path;

use mive_autograd::{Graph, Matrix, ParamStore};
use ndarray::{s, Array4, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

use crate::backbone::{condition_streams, predict, BackboneConfig, Conditioning, PredictionTarget};
use crate::codec::{build_joint, decode, encode, sample_noise, unpatchify, JointLatent};
use crate::error::{MiveError, Result};
use crate::io::blob::load_params;
use crate::pipeline::FrozenEncoders;
use crate::tensor::{Latent, Video};
use crate::trainer::{TrainConfig, CONFIG_FILE, WEIGHTS_FILE};

pub const DEFAULT_STEPS: usize = 20;

/// `z - dt v`, moving from `t` toward `t - dt`.
pub fn euler_step(z: &Array4<f64>, v: &Array4<f64>, dt: f64) -> Result<Array4<f64>> {
    if !(dt > 0.0) {
        return Err(MiveError::invalid(format!("step size must be positive, got {dt}")));
    }
    if z.shape() != v.shape() {
        return Err(MiveError::shape(format!("state {:?} and velocity {:?} differ", z.shape(), v.shape())));
    }
    Ok(Zip::from(z).and(v).map_collect(|&a, &b| a - dt * b))
}

/// Uniform grid `1 - k / steps` for `k = 0..steps`.
pub fn timesteps(steps: usize) -> Vec<f64> {
    (0..steps).map(|k| 1.0 - k as f64 / steps as f64).collect()
}

/// What the sampler saw at one integration step.
pub struct StepView<'a> {
    pub index: usize,
    pub t: f64,
    pub joint: &'a JointLatent,
    /// Conditioning streams as fed to the blocks.
    pub condition: &'a [Matrix],
}

/// Trained weights plus the frozen encoders they were trained against.
pub struct Editor {
    pub model: BackboneConfig,
    pub params: ParamStore,
    pub encoders: FrozenEncoders,
}

impl Editor {
    pub fn new(config: &TrainConfig, params: ParamStore) -> Result<Self> {
        config.model.validate()?;
        Ok(Self {
            model: config.model.clone(),
            params,
            encoders: FrozenEncoders::new(&config.encoder)?,
        })
    }

    /// Loads `weights.bin` and `config.json` from a checkpoint directory.
    pub fn from_checkpoint(dir: impl AsRef<Path>) -> Result<Self> {
        let dir = dir.as_ref();
        let cfg = TrainConfig::from_json_file(dir.join(CONFIG_FILE))?;
        Self::new(&cfg, load_params(dir.join(WEIGHTS_FILE))?)
    }

    pub fn edit(&self, src: &Video, ref_image: &Video, instruction: &str, steps: usize, seed: u64) -> Result<Video> {
        self.edit_observed(src, ref_image, instruction, steps, seed, |_| {})
    }

    /// [`Editor::edit`] with a callback at every integration step.
    pub fn edit_observed(
        &self,
        src: &Video,
        ref_image: &Video,
        instruction: &str,
        steps: usize,
        seed: u64,
        mut observe: impl FnMut(&StepView<'_>),
    ) -> Result<Video> {
        if steps == 0 {
            return Err(MiveError::invalid("edit needs at least one step"));
        }
        let z_src = encode(src)?;
        let z_ref = encode(ref_image)?;
        let cond = self.encoders.conditioning(self.model.arch, instruction, ref_image, src)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut z = sample_noise(&z_src, &mut rng).data;
        let dt = 1.0 / steps as f64;
        for (index, t) in timesteps(steps).into_iter().enumerate() {
            let joint = build_joint(&z_ref, &Latent::new(z.clone()), &z_src)?;
            let (pred, condition) = self.predict(&joint, t, &cond)?;
            observe(&StepView { index, t, joint: &joint, condition: &condition });
            let v = match self.model.prediction_target {
                PredictionTarget::Velocity => pred,
                PredictionTarget::X0 => Zip::from(&z).and(&pred).map_collect(|&a, &x0| (a - x0) / t),
            };
            z = euler_step(&z, &v, dt)?;
            if z.iter().any(|v| !v.is_finite()) {
                return Err(MiveError::Numeric(format!("latent became non-finite at step {index} (t = {t})")));
            }
        }
        let mut out = decode(&Latent::new(z))?;
        out.data_mut().mapv_inplace(|v| v.clamp(0.0, 1.0));
        Ok(out)
    }

    /// Head output for the noisy frames, reference slot dropped.
    fn predict(&self, joint: &JointLatent, t: f64, cond: &Conditioning) -> Result<(Array4<f64>, Vec<Matrix>)> {
        let g = Graph::new();
        let streams = condition_streams(&g, &self.params, &self.model, cond)?;
        let condition = streams.iter().map(|s| s.value().as_ref().clone()).collect();
        let pred = predict(&g, &self.params, &self.model, joint, t, &streams, None)?;
        let full = unpatchify(&pred.tokens.value(), pred.grid)?;
        Ok((full.slice(s![1.., .., .., ..]).to_owned(), condition))
    }
}

//! Flow-matching training of the adapter, blocks and head against frozen
//! encoders and codec.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use mive_autograd::{Gradients, Graph, Matrix, ParamStore, Var};
use ndarray::{s, Array4, Zip};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{condition_streams, init_params, predict, BackboneConfig, PredictionTarget};
use crate::codec::{build_joint, noise_latent, patch_split, prepend_reference, sample_noise};
use crate::datagen::EditSample;
use crate::encoder::EncoderConfig;
use crate::error::{MiveError, Result};
use crate::io::blob::{load_params, save_params, DType};
use crate::pipeline::{prepare, FrozenEncoders, Prepared};

pub const WEIGHTS_FILE: &str = "weights.bin";
pub const OPTIMIZER_FILE: &str = "optimizer.bin";
pub const CONFIG_FILE: &str = "config.json";
pub const METRICS_FILE: &str = "metrics.jsonl";

/// Learning rate after warmup.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum LrDecay {
    #[default]
    Constant,
    /// Half-cosine from the base rate to zero at `total_steps`.
    Cosine,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct TrainConfig {
    pub lr: f64,
    pub betas: (f64, f64),
    pub eps: f64,
    pub weight_decay: f64,
    pub warmup_steps: usize,
    pub decay: LrDecay,
    pub grad_clip: f64,
    pub total_steps: usize,
    pub batch_size: usize,
    pub seed: u64,
    /// Zero disables periodic checkpoints; the final one is always written.
    pub checkpoint_every: usize,
    pub model: BackboneConfig,
    pub encoder: EncoderConfig,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            lr: 3e-5,
            betas: (0.9, 0.999),
            eps: 1e-8,
            weight_decay: 0.0,
            warmup_steps: 200,
            decay: LrDecay::Constant,
            grad_clip: 1.0,
            total_steps: 2000,
            batch_size: 1,
            seed: 0,
            checkpoint_every: 500,
            model: BackboneConfig::default(),
            encoder: EncoderConfig::default(),
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        let finite = [self.lr, self.betas.0, self.betas.1, self.eps, self.weight_decay, self.grad_clip];
        if finite.iter().any(|v| !v.is_finite()) {
            return Err(MiveError::invalid("training hyperparameters must be finite"));
        }
        if self.lr <= 0.0 {
            return Err(MiveError::invalid(format!("learning rate must be positive, got {}", self.lr)));
        }
        if self.warmup_steps > self.total_steps {
            return Err(MiveError::invalid(format!(
                "warmup ({}) exceeds total steps ({})",
                self.warmup_steps, self.total_steps
            )));
        }
        if self.grad_clip <= 0.0 {
            return Err(MiveError::invalid("gradient clip must be positive"));
        }
        if self.batch_size == 0 {
            return Err(MiveError::invalid("batch size must be positive"));
        }
        if !(0.0..1.0).contains(&self.betas.0) || !(0.0..1.0).contains(&self.betas.1) {
            return Err(MiveError::invalid("betas must lie in [0, 1)"));
        }
        self.model.validate()?;
        self.encoder.validate()
    }

    /// Learning rate applied at 1-based step `step`.
    pub fn lr_at(&self, step: usize) -> f64 {
        if self.warmup_steps > 0 && step <= self.warmup_steps {
            return self.lr * step as f64 / self.warmup_steps as f64;
        }
        match self.decay {
            LrDecay::Constant => self.lr,
            LrDecay::Cosine => {
                let span = self.total_steps.saturating_sub(self.warmup_steps).max(1) as f64;
                let frac = (step.saturating_sub(self.warmup_steps) as f64 / span).min(1.0);
                0.5 * self.lr * (1.0 + (std::f64::consts::PI * frac).cos())
            }
        }
    }

    pub fn from_json_file(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| MiveError::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Masked mean squared error between `pred_v` and `eps - z_tgt`.
pub fn fm_loss(pred_v: &Array4<f64>, z_tgt: &Array4<f64>, eps: &Array4<f64>, mask: &Array4<bool>) -> Result<f64> {
    let shape = pred_v.shape();
    if z_tgt.shape() != shape || eps.shape() != shape || mask.shape() != shape {
        return Err(MiveError::shape(format!(
            "loss operands differ: pred {:?}, target {:?}, noise {:?}, mask {:?}",
            shape,
            z_tgt.shape(),
            eps.shape(),
            mask.shape()
        )));
    }
    let mut sum = 0.0;
    let mut count = 0usize;
    Zip::from(pred_v).and(z_tgt).and(eps).and(mask).for_each(|&p, &z, &e, &m| {
        if m {
            let d = p - (e - z);
            sum += d * d;
            count += 1;
        }
    });
    if count == 0 {
        return Err(MiveError::invalid("loss mask selects no elements"));
    }
    Ok(sum / count as f64)
}

/// Every element except temporal index 0.
pub fn reference_loss_mask(shape: [usize; 4]) -> Array4<bool> {
    let mut m = Array4::from_elem(shape, true);
    if shape[0] > 0 {
        m.slice_mut(s![0, .., .., ..]).fill(false);
    }
    m
}

/// Token-space loss on the tape: the first `skip` rows (reference-frame
/// tokens) are excluded.
pub fn token_loss<'g>(g: &'g Graph, pred: Var<'g>, target: &Matrix, skip: usize) -> Result<Var<'g>> {
    if pred.shape() != target.shape() {
        return Err(MiveError::shape(format!(
            "prediction {:?} and target {:?} tokens differ",
            pred.shape(),
            target.shape()
        )));
    }
    let n = pred.rows().saturating_sub(skip);
    if n == 0 || pred.cols() == 0 {
        return Err(MiveError::invalid("loss mask selects no elements"));
    }
    let p = pred.slice_rows(skip, n)?;
    let t = g.constant(target.slice_rows(skip, n));
    Ok(p.sub(t)?.square().mean())
}

/// Rescales `grads` so the global norm is at most `max_norm`; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut Gradients, max_norm: f64) -> f64 {
    let norm = grads.global_norm();
    if norm > max_norm && norm > 0.0 {
        grads.scale(max_norm / norm);
    }
    norm
}

/// AdamW moments and step counter.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamW {
    pub m: ParamStore,
    pub v: ParamStore,
    pub step: usize,
}

impl AdamW {
    pub fn new(params: &ParamStore) -> Self {
        let mut m = ParamStore::new();
        for (name, p) in params.iter() {
            m.insert(name.clone(), Matrix::zeros(p.rows(), p.cols()));
        }
        Self { v: m.clone(), m, step: 0 }
    }

    /// One bias-corrected update. Parameters without a gradient are left
    /// untouched.
    pub fn update(&mut self, params: &mut ParamStore, grads: &Gradients, cfg: &TrainConfig, lr: f64) -> Result<()> {
        self.step += 1;
        let (b1, b2) = cfg.betas;
        let c1 = 1.0 - b1.powi(self.step as i32);
        let c2 = 1.0 - b2.powi(self.step as i32);
        for (name, g) in grads.iter() {
            let (Some(p), Some(m), Some(v)) = (params.get_mut(name), self.m.get_mut(name), self.v.get_mut(name)) else {
                return Err(MiveError::invalid(format!("optimizer has no state for `{name}`")));
            };
            for (((w, mi), vi), &gi) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut().iter_mut())
                .zip(v.data_mut().iter_mut())
                .zip(g.data())
            {
                *mi = b1 * *mi + (1.0 - b1) * gi;
                *vi = b2 * *vi + (1.0 - b2) * gi * gi;
                let mhat = *mi / c1;
                let vhat = *vi / c2;
                *w -= lr * (mhat / (vhat.sqrt() + cfg.eps) + cfg.weight_decay * *w);
            }
        }
        Ok(())
    }

    fn to_store(&self) -> ParamStore {
        let mut out = ParamStore::new();
        for (n, m) in self.m.iter() {
            out.insert(format!("m.{n}"), m.clone());
        }
        for (n, v) in self.v.iter() {
            out.insert(format!("v.{n}"), v.clone());
        }
        out.insert("step", Matrix::filled(1, 1, self.step as f64));
        out
    }

    fn from_store(store: &ParamStore) -> Result<Self> {
        let mut m = ParamStore::new();
        let mut v = ParamStore::new();
        let mut step = None;
        for (name, x) in store.iter() {
            if let Some(n) = name.strip_prefix("m.") {
                m.insert(n, x.clone());
            } else if let Some(n) = name.strip_prefix("v.") {
                v.insert(n, x.clone());
            } else if name == "step" {
                step = Some(x.get(0, 0) as usize);
            }
        }
        let step = step.ok_or_else(|| MiveError::format("optimizer state lacks a step counter"))?;
        Ok(Self { m, v, step })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepMetrics {
    pub step: usize,
    pub loss: f64,
    pub grad_norm: f64,
    pub lr: f64,
}

/// Forward and loss for one prepared sample at time `t` with noise drawn
/// from `rng`.
pub fn sample_loss<'g, R: Rng + ?Sized>(
    g: &'g Graph,
    params: &ParamStore,
    cfg: &BackboneConfig,
    sample: &Prepared,
    t: f64,
    rng: &mut R,
) -> Result<Var<'g>> {
    let eps = sample_noise(&sample.z_tgt, rng);
    let z_t = noise_latent(&sample.z_tgt, t, &eps)?;
    let joint = build_joint(&sample.z_ref, &z_t, &sample.z_src)?;
    let streams = condition_streams(g, params, cfg, &sample.cond)?;
    let pred = predict(g, params, cfg, &joint, t, &streams, None)?;
    let target = match cfg.prediction_target {
        PredictionTarget::X0 => sample.z_tgt.clone(),
        PredictionTarget::Velocity => {
            let mut v = eps;
            v.data -= &sample.z_tgt.data;
            v
        }
    };
    // The reference slot of the target is never scored; any filler works.
    let padded = prepend_reference(&sample.z_ref, &target)?;
    let (tokens, grid) = patch_split(&padded.data, cfg.patch)?;
    token_loss(g, pred.tokens, &tokens, grid.tokens_per_frame())
}

/// One optimizer step over `batch`, drawing `t` and noise from `rng`.
pub fn train_step<R: Rng + ?Sized>(
    params: &mut ParamStore,
    opt: &mut AdamW,
    cfg: &TrainConfig,
    batch: &[&Prepared],
    rng: &mut R,
) -> Result<StepMetrics> {
    if batch.is_empty() {
        return Err(MiveError::invalid("empty batch"));
    }
    let step = opt.step + 1;
    let mut total: Option<Gradients> = None;
    let mut loss = 0.0;
    let w = 1.0 / batch.len() as f64;
    for (i, sample) in batch.iter().enumerate() {
        let t: f64 = rng.random();
        let g = Graph::new();
        let l = sample_loss(&g, params, &cfg.model, sample, t, rng)?;
        let lv = l.value().get(0, 0);
        if !lv.is_finite() {
            return Err(MiveError::Numeric(format!(
                "non-finite loss {lv} at step {step}, batch item {i}, t = {t}"
            )));
        }
        loss += w * lv;
        let mut grads = g.backward(l)?;
        grads.scale(w);
        match total.as_mut() {
            Some(acc) => acc.accumulate(grads),
            None => total = Some(grads),
        }
    }
    let mut grads = total.expect("nonempty batch");
    let grad_norm = clip_gradients(&mut grads, cfg.grad_clip);
    if !grad_norm.is_finite() {
        return Err(MiveError::Numeric(format!("non-finite gradient norm at step {step}")));
    }
    let lr = cfg.lr_at(step);
    opt.update(params, &grads, cfg, lr)?;
    Ok(StepMetrics { step, loss, grad_norm, lr })
}

/// Run state: trainable weights, optimizer and the frozen inputs.
pub struct Trainer {
    pub config: TrainConfig,
    pub params: ParamStore,
    pub opt: AdamW,
    data: Vec<Prepared>,
}

impl Trainer {
    pub fn new(config: TrainConfig, samples: &[EditSample]) -> Result<Self> {
        config.validate()?;
        let data = prepare_all(&config, samples)?;
        let encoders_dim = config.encoder.dim;
        let params = init_params(&config.model, encoders_dim)?;
        let opt = AdamW::new(&params);
        Ok(Self { config, params, opt, data })
    }

    /// Restores weights and optimizer state from a checkpoint directory; the
    /// stored config wins over `total_steps` and `checkpoint_every` only if
    /// `config` is `None`.
    pub fn resume(dir: impl AsRef<Path>, config: Option<TrainConfig>, samples: &[EditSample]) -> Result<Self> {
        let dir = dir.as_ref();
        let stored = TrainConfig::from_json_file(dir.join(CONFIG_FILE))?;
        let config = config.unwrap_or(stored);
        config.validate()?;
        let params = load_params(dir.join(WEIGHTS_FILE))?;
        let opt = AdamW::from_store(&load_params(dir.join(OPTIMIZER_FILE))?)?;
        let data = prepare_all(&config, samples)?;
        Ok(Self { config, params, opt, data })
    }

    pub fn step_count(&self) -> usize {
        self.opt.step
    }

    pub fn dataset_len(&self) -> usize {
        self.data.len()
    }

    /// Next step; the batch, timesteps and noise come from a stream keyed by
    /// the step number so resumed runs continue identically.
    pub fn step(&mut self) -> Result<StepMetrics> {
        let mut rng = ChaCha8Rng::seed_from_u64(self.config.seed);
        rng.set_stream(self.opt.step as u64 + 1);
        let n = self.data.len();
        let picks: Vec<usize> = (0..self.config.batch_size).map(|_| rng.random_range(0..n)).collect();
        let batch: Vec<&Prepared> = picks.iter().map(|&i| &self.data[i]).collect();
        train_step(&mut self.params, &mut self.opt, &self.config, &batch, &mut rng)
    }

    pub fn save_checkpoint(&self, dir: impl AsRef<Path>) -> Result<()> {
        let dir = dir.as_ref();
        fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
        save_params(dir.join(WEIGHTS_FILE), &self.params, DType::F64)?;
        save_params(dir.join(OPTIMIZER_FILE), &self.opt.to_store(), DType::F64)?;
        let path = dir.join(CONFIG_FILE);
        fs::write(&path, serde_json::to_string_pretty(&self.config)?).map_err(|e| MiveError::io(&path, e))
    }

    /// Steps until `total_steps`, appending metrics to `out/metrics.jsonl`
    /// and checkpointing into `out/ckpt` when `out` is given.
    pub fn run(&mut self, out: Option<&Path>, mut on_step: impl FnMut(&StepMetrics)) -> Result<Vec<StepMetrics>> {
        let mut log = match out {
            Some(dir) => Some(open_metrics(dir)?),
            None => None,
        };
        let mut history = Vec::new();
        while self.opt.step < self.config.total_steps {
            let m = self.step()?;
            if let Some((path, w)) = log.as_mut() {
                writeln!(w, "{}", serde_json::to_string(&m)?).map_err(|e| MiveError::io(&*path, e))?;
            }
            on_step(&m);
            history.push(m);
            if let Some(dir) = out {
                let every = self.config.checkpoint_every;
                if every > 0 && m.step % every == 0 {
                    self.save_checkpoint(checkpoint_dir(dir))?;
                }
            }
        }
        if let Some(dir) = out {
            if let Some((path, w)) = log.as_mut() {
                w.flush().map_err(|e| MiveError::io(&*path, e))?;
            }
            self.save_checkpoint(checkpoint_dir(dir))?;
        }
        Ok(history)
    }
}

pub fn checkpoint_dir(out: &Path) -> PathBuf {
    out.join("ckpt")
}

fn open_metrics(dir: &Path) -> Result<(PathBuf, BufWriter<File>)> {
    fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    let path = dir.join(METRICS_FILE);
    let f = OpenOptions::new()
        .create(true)
        .append(true)
        .open(&path)
        .map_err(|e| MiveError::io(&path, e))?;
    Ok((path, BufWriter::new(f)))
}

fn prepare_all(config: &TrainConfig, samples: &[EditSample]) -> Result<Vec<Prepared>> {
    if samples.is_empty() {
        return Err(MiveError::invalid("training set is empty"));
    }
    let encoders = FrozenEncoders::new(&config.encoder)?;
    samples.iter().map(|s| prepare(&encoders, config.model.arch, s)).collect()
}

/// Trains on `samples` for `config.total_steps`, writing metrics and the
/// checkpoint under `out`.
pub fn train_loop(samples: &[EditSample], config: TrainConfig, out: Option<&Path>) -> Result<Trainer> {
    let mut trainer = Trainer::new(config, samples)?;
    trainer.run(out, |_| {})?;
    Ok(trainer)
}

/// Reads a metrics log back.
pub fn read_metrics(path: impl AsRef<Path>) -> Result<Vec<StepMetrics>> {
    let path = path.as_ref();
    let text = fs::read_to_string(path).map_err(|e| MiveError::io(path, e))?;
    text.lines()
        .filter(|l| !l.trim().is_empty())
        .map(|l| Ok(serde_json::from_str(l)?))
        .collect()
}

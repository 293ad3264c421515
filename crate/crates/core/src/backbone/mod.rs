//! Diffusion transformer over a unified condition + visual token sequence,
//! with per-token adaptive layer norm, plus cross-attention variants.

mod model;

pub use model::{
    condition_streams, init_params, predict, variant_forward, Conditioning, Prediction,
};

use mive_autograd::{Graph, Matrix, ParamStore, Var};
use ndarray::Array4;
use serde::{Deserialize, Serialize};

use crate::adapter::LayerMode;
use crate::codec::{unpatchify, PatchGrid, LATENT_CHANNELS};
use crate::error::{MiveError, Result};
use crate::nn::{linear, sinusoid};

const LN_EPS: f64 = 1e-6;
/// Modulation vectors per block: shift, scale and gate for attention and MLP.
const MOD_CHUNKS: usize = 6;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    DecoupledDualXattn,
    UnifiedDualXattn,
    UnifiedFusedXattn,
    #[default]
    UnifiedSelfAttn,
}

impl Arch {
    pub const ALL: [Arch; 4] = [
        Arch::DecoupledDualXattn,
        Arch::UnifiedDualXattn,
        Arch::UnifiedFusedXattn,
        Arch::UnifiedSelfAttn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            Arch::DecoupledDualXattn => "decoupled_dual_xattn",
            Arch::UnifiedDualXattn => "unified_dual_xattn",
            Arch::UnifiedFusedXattn => "unified_fused_xattn",
            Arch::UnifiedSelfAttn => "unified_self_attn",
        }
    }
}

impl std::str::FromStr for Arch {
    type Err = MiveError;

    fn from_str(s: &str) -> Result<Self> {
        Arch::ALL
            .into_iter()
            .find(|a| a.name() == s)
            .ok_or_else(|| MiveError::invalid(format!("unknown architecture `{s}`")))
    }
}

/// What the output head regresses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PredictionTarget {
    /// `eps - z_0`.
    Velocity,
    /// The clean latent `z_0`.
    #[default]
    X0,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct BackboneConfig {
    pub arch: Arch,
    pub layer_mode: LayerMode,
    pub prediction_target: PredictionTarget,
    pub dim: usize,
    pub depth: usize,
    pub heads: usize,
    pub mlp_ratio: usize,
    pub patch: usize,
    pub latent_channels: usize,
    pub freq_dim: usize,
    pub pos_scale: f64,
    pub init_std: f64,
    pub seed: u64,
}

impl Default for BackboneConfig {
    fn default() -> Self {
        Self {
            arch: Arch::UnifiedSelfAttn,
            layer_mode: LayerMode::FirstLast,
            prediction_target: PredictionTarget::X0,
            dim: 256,
            depth: 4,
            heads: 4,
            mlp_ratio: 4,
            patch: 2,
            latent_channels: LATENT_CHANNELS,
            freq_dim: 64,
            pos_scale: 1.0,
            init_std: 0.02,
            seed: 0,
        }
    }
}

impl BackboneConfig {
    pub fn validate(&self) -> Result<()> {
        if self.dim == 0 || self.heads == 0 || self.dim % self.heads != 0 || self.dim % 2 != 0 {
            return Err(MiveError::invalid(format!(
                "model width {} must be even and divisible by {} heads",
                self.dim, self.heads
            )));
        }
        if self.depth == 0 || self.patch == 0 || self.freq_dim < 2 {
            return Err(MiveError::invalid("depth, patch and freq_dim must be positive"));
        }
        Ok(())
    }

    /// Per-token width of the patched joint latent.
    pub fn token_in(&self) -> usize {
        2 * self.latent_channels * self.patch * self.patch
    }

    /// Per-token width of the head output.
    pub fn token_out(&self) -> usize {
        self.latent_channels * self.patch * self.patch
    }
}

/// Token sequence entering the blocks, with the clean-token flags.
#[derive(Debug, Clone, PartialEq)]
pub struct UnifiedSequence {
    pub u: Matrix,
    pub clean_mask: Vec<bool>,
}

/// Optional capture of internal activations during a forward pass.
#[derive(Debug, Clone, Default)]
pub struct Probe {
    /// Head-averaged self-attention per block.
    pub attention: Vec<Matrix>,
    /// Per-token modulation `N x 6D` per block.
    pub modulation: Vec<Matrix>,
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&t) {
        return Err(MiveError::invalid(format!("timestep {t} outside [0, 1]")));
    }
    Ok(())
}

/// Sinusoidal features of `1000 t` through a two-layer SiLU MLP, `1 x D`.
pub fn time_embed<'g>(g: &'g Graph, params: &ParamStore, cfg: &BackboneConfig, t: f64) -> Result<Var<'g>> {
    check_t(t)?;
    let freq = g.constant(Matrix::row_vector(sinusoid(1000.0 * t, cfg.freq_dim)));
    let h = linear(g, params, "dit.t_embed.fc1", freq)?.silu();
    linear(g, params, "dit.t_embed.fc2", h)
}

/// [`time_embed`] evaluated off the tape.
pub fn time_embed_value(params: &ParamStore, cfg: &BackboneConfig, t: f64) -> Result<Matrix> {
    let g = Graph::new();
    Ok(time_embed(&g, params, cfg, t)?.value().as_ref().clone())
}

/// Per-token modulation: row `i` is computed from the `t = 0` embedding when
/// `clean[i]`, from the current embedding otherwise.
fn token_modulation<'g>(
    g: &'g Graph,
    params: &ParamStore,
    key: &str,
    temb: (Var<'g>, Var<'g>),
    clean: &[bool],
) -> Result<Var<'g>> {
    let clean_row = linear(g, params, key, temb.0.silu())?;
    let noisy_row = linear(g, params, key, temb.1.silu())?;
    let both = Var::concat_rows(&[clean_row, noisy_row])?;
    let index: Vec<usize> = clean.iter().map(|&c| if c { 0 } else { 1 }).collect();
    Ok(both.gather_rows(&index)?)
}

/// Modulation rows applied to each token of block `block` at timestep `t`.
pub fn block_modulation(
    params: &ParamStore,
    cfg: &BackboneConfig,
    block: usize,
    clean: &[bool],
    t: f64,
) -> Result<Matrix> {
    let g = Graph::new();
    let temb = (time_embed(&g, params, cfg, 0.0)?, time_embed(&g, params, cfg, t)?);
    let m = token_modulation(&g, params, &format!("dit.blocks.{block}.mod"), temb, clean)?;
    Ok(m.value().as_ref().clone())
}

fn modulate<'g>(x: Var<'g>, shift: Var<'g>, scale: Var<'g>) -> Result<Var<'g>> {
    Ok(x.layer_norm(LN_EPS).mul(scale.add_scalar(1.0))?.add(shift)?)
}

fn attend<'g>(
    g: &'g Graph,
    params: &ParamStore,
    key: &str,
    x: Var<'g>,
    ctx: Var<'g>,
    heads: usize,
    capture: Option<&mut Vec<Matrix>>,
) -> Result<Var<'g>> {
    let q = linear(g, params, &format!("{key}.q"), x)?;
    let k = linear(g, params, &format!("{key}.k"), ctx)?;
    let v = linear(g, params, &format!("{key}.v"), ctx)?;
    let dim = q.cols();
    let hd = dim / heads;
    let scale = 1.0 / (hd as f64).sqrt();
    let mut outs = Vec::with_capacity(heads);
    let mut avg: Option<Matrix> = None;
    for h in 0..heads {
        let qh = q.slice_cols(h * hd, hd)?;
        let kh = k.slice_cols(h * hd, hd)?;
        let vh = v.slice_cols(h * hd, hd)?;
        let probs = qh.matmul_t(kh)?.scale(scale).softmax_rows();
        if capture.is_some() {
            let p = probs.value();
            match avg.as_mut() {
                Some(a) => a.add_assign(&p),
                None => avg = Some(p.as_ref().clone()),
            }
        }
        outs.push(probs.matmul(vh)?);
    }
    if let (Some(store), Some(mut a)) = (capture, avg) {
        a.scale_in_place(1.0 / heads as f64);
        store.push(a);
    }
    linear(g, params, &format!("{key}.o"), Var::concat_cols(&outs)?)
}

fn chunk<'g>(m: Var<'g>, i: usize, d: usize) -> Result<Var<'g>> {
    Ok(m.slice_cols(i * d, d)?)
}

/// Runs the transformer blocks over `u0`.
///
/// Each block applies modulated self-attention and a modulated MLP with gated
/// residuals; with non-empty `contexts`, each block also adds one ungated
/// cross-attention sublayer per context stream.
#[allow(clippy::too_many_arguments)]
pub fn dit_forward<'g>(
    g: &'g Graph,
    params: &ParamStore,
    cfg: &BackboneConfig,
    u0: Var<'g>,
    clean: &[bool],
    t: f64,
    contexts: &[Var<'g>],
    mut probe: Option<&mut Probe>,
) -> Result<Var<'g>> {
    check_t(t)?;
    if clean.len() != u0.rows() {
        return Err(MiveError::shape(format!(
            "clean mask has {} entries for {} tokens",
            clean.len(),
            u0.rows()
        )));
    }
    let d = cfg.dim;
    let temb = (time_embed(g, params, cfg, 0.0)?, time_embed(g, params, cfg, t)?);
    let mut x = u0;
    for b in 0..cfg.depth {
        let key = format!("dit.blocks.{b}");
        let m = token_modulation(g, params, &format!("{key}.mod"), temb, clean)?;
        if let Some(p) = probe.as_deref_mut() {
            p.modulation.push(m.value().as_ref().clone());
        }
        let h = modulate(x, chunk(m, 0, d)?, chunk(m, 1, d)?)?;
        let capture = probe.as_deref_mut().map(|p| &mut p.attention);
        let a = attend(g, params, &format!("{key}.attn"), h, h, cfg.heads, capture)?;
        x = x.add(a.mul(chunk(m, 2, d)?)?)?;
        for (j, ctx) in contexts.iter().enumerate() {
            if ctx.rows() == 0 {
                continue;
            }
            let h = x.layer_norm(LN_EPS);
            x = x.add(attend(g, params, &format!("{key}.xattn{j}"), h, *ctx, cfg.heads, None)?)?;
        }
        let h = modulate(x, chunk(m, 3, d)?, chunk(m, 4, d)?)?;
        let h = linear(g, params, &format!("{key}.mlp.fc1"), h)?.gelu();
        let h = linear(g, params, &format!("{key}.mlp.fc2"), h)?;
        x = x.add(h.mul(chunk(m, 5, d)?)?)?;
        if !x.value().is_finite() {
            return Err(MiveError::Numeric(format!("non-finite activation after block {}", b + 1)));
        }
    }
    Ok(x)
}

/// Drops the first `n_c` rows of `u_p`, applies the modulated final norm and
/// the output linear: `N_v x (C p^2)` tokens.
pub fn output_head<'g>(
    g: &'g Graph,
    params: &ParamStore,
    cfg: &BackboneConfig,
    u_p: Var<'g>,
    n_c: usize,
    visual_clean: &[bool],
    t: f64,
) -> Result<Var<'g>> {
    let n_v = u_p.rows().checked_sub(n_c).ok_or_else(|| {
        MiveError::shape(format!("{} rows cannot hold {n_c} condition tokens", u_p.rows()))
    })?;
    if visual_clean.len() != n_v {
        return Err(MiveError::shape("visual clean mask does not match token count"));
    }
    let v = u_p.slice_rows(n_c, n_v)?;
    let temb = (time_embed(g, params, cfg, 0.0)?, time_embed(g, params, cfg, t)?);
    let m = token_modulation(g, params, "dit.final.mod", temb, visual_clean)?;
    let h = modulate(v, chunk(m, 0, cfg.dim)?, chunk(m, 1, cfg.dim)?)?;
    linear(g, params, "dit.final.linear", h)
}

/// [`output_head`] off the tape, unpatchified to a latent.
pub fn output_head_latent(
    params: &ParamStore,
    cfg: &BackboneConfig,
    u_p: &Matrix,
    n_c: usize,
    grid: PatchGrid,
    t: f64,
) -> Result<Array4<f64>> {
    let g = Graph::new();
    let clean = visual_clean_mask(grid);
    let tokens = output_head(&g, params, cfg, g.constant(u_p.clone()), n_c, &clean, t)?;
    unpatchify(&tokens.value(), grid)
}

/// Reference-frame tokens are clean, all later latent frames are noisy.
pub fn visual_clean_mask(grid: PatchGrid) -> Vec<bool> {
    (0..grid.num_tokens())
        .map(|i| i < grid.tokens_per_frame())
        .collect()
}

/// Width of the per-block modulation vector.
pub fn modulation_width(cfg: &BackboneConfig) -> usize {
    MOD_CHUNKS * cfg.dim
}

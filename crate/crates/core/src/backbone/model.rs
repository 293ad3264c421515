//! Parameter layout and the full prediction path for every architecture.

use mive_autograd::{Graph, Matrix, ParamStore, Var};
use ndarray::Array4;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::{dit_forward, modulation_width, output_head, visual_clean_mask, Arch, BackboneConfig, Probe};
use crate::adapter::{init_adapter, project_layer, select_layers, Branch, LayerFeatures, LayerMode};
use crate::codec::{patch_split, unpatchify, JointLatent, PatchGrid};
use crate::error::{MiveError, Result};
use crate::nn::{init_linear, linear, sinusoid, sinusoid_3d};

const UNIFIED: &str = "adapter";
const TEXT: &str = "adapter_text";
const IMAGE: &str = "adapter_image";

/// Frozen encoder features a sample is conditioned on.
#[derive(Debug, Clone, PartialEq, Default)]
pub struct Conditioning {
    pub unified: Option<LayerFeatures>,
    pub text: Option<LayerFeatures>,
    pub image: Option<LayerFeatures>,
}

fn xavier(fan_in: usize, fan_out: usize) -> f64 {
    (2.0 / (fan_in + fan_out) as f64).sqrt()
}

fn init_xavier<R: Rng + ?Sized>(p: &mut ParamStore, name: &str, i: usize, o: usize, rng: &mut R) {
    init_linear(p, name, i, o, xavier(i, o), true, rng);
}

/// Context widths of the cross-attention streams of `cfg.arch`.
fn stream_dims(cfg: &BackboneConfig) -> Vec<usize> {
    match (cfg.arch, cfg.layer_mode) {
        (Arch::UnifiedSelfAttn, _) => vec![],
        (Arch::UnifiedFusedXattn, _) => vec![cfg.dim],
        (Arch::UnifiedDualXattn, LayerMode::FirstLast) => vec![cfg.dim / 2, cfg.dim / 2],
        (Arch::UnifiedDualXattn, _) => vec![cfg.dim],
        (Arch::DecoupledDualXattn, _) => vec![cfg.dim, cfg.dim],
    }
}

/// Seeded weights for the adapter(s), blocks and head of `cfg`.
pub fn init_params(cfg: &BackboneConfig, d_vlm: usize) -> Result<ParamStore> {
    cfg.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut p = ParamStore::new();
    let d = cfg.dim;
    match cfg.arch {
        Arch::DecoupledDualXattn => {
            init_adapter(&mut p, TEXT, d_vlm, d, &mut rng)?;
            init_adapter(&mut p, IMAGE, d_vlm, d, &mut rng)?;
        }
        _ => init_adapter(&mut p, UNIFIED, d_vlm, d, &mut rng)?,
    }
    init_xavier(&mut p, "dit.patch_embed", cfg.token_in(), d, &mut rng);
    init_linear(&mut p, "dit.t_embed.fc1", cfg.freq_dim, d, cfg.init_std, true, &mut rng);
    init_linear(&mut p, "dit.t_embed.fc2", d, d, cfg.init_std, true, &mut rng);
    let dims = stream_dims(cfg);
    for b in 0..cfg.depth {
        let key = format!("dit.blocks.{b}");
        let mut m = Matrix::randn(d, modulation_width(cfg), cfg.init_std, &mut rng);
        // Gates for the attention and MLP residuals start closed.
        for r in 0..d {
            for gate in [2, 5] {
                m.row_mut(r)[gate * d..(gate + 1) * d].fill(0.0);
            }
        }
        p.insert(format!("{key}.mod.w"), m);
        p.insert(format!("{key}.mod.b"), Matrix::zeros(1, modulation_width(cfg)));
        for name in ["q", "k", "v", "o"] {
            init_xavier(&mut p, &format!("{key}.attn.{name}"), d, d, &mut rng);
        }
        for (j, &cd) in dims.iter().enumerate() {
            init_xavier(&mut p, &format!("{key}.xattn{j}.q"), d, d, &mut rng);
            init_xavier(&mut p, &format!("{key}.xattn{j}.k"), cd, d, &mut rng);
            init_xavier(&mut p, &format!("{key}.xattn{j}.v"), cd, d, &mut rng);
            init_xavier(&mut p, &format!("{key}.xattn{j}.o"), d, d, &mut rng);
        }
        let hidden = d * cfg.mlp_ratio;
        init_xavier(&mut p, &format!("{key}.mlp.fc1"), d, hidden, &mut rng);
        init_xavier(&mut p, &format!("{key}.mlp.fc2"), hidden, d, &mut rng);
    }
    init_linear(&mut p, "dit.final.mod", d, 2 * d, cfg.init_std, true, &mut rng);
    p.insert("dit.final.linear.w", Matrix::zeros(d, cfg.token_out()));
    p.insert("dit.final.linear.b", Matrix::zeros(1, cfg.token_out()));
    Ok(p)
}

fn need<'a>(f: &'a Option<LayerFeatures>, what: &str) -> Result<&'a LayerFeatures> {
    f.as_ref()
        .ok_or_else(|| MiveError::invalid(format!("architecture needs {what} features")))
}

/// Adds the 1D sinusoid of each row index.
fn with_sequence_positions<'g>(g: &'g Graph, x: Var<'g>, scale: f64) -> Result<Var<'g>> {
    let (n, d) = x.shape();
    let mut pos = Matrix::zeros(n, d);
    for i in 0..n {
        for (o, s) in pos.row_mut(i).iter_mut().zip(sinusoid(i as f64, d)) {
            *o = scale * s;
        }
    }
    Ok(x.add(g.constant(pos))?)
}

/// Conditioning streams on the tape: the condition sequence for the
/// self-attention model, one entry per cross-attention sublayer otherwise.
pub fn condition_streams<'g>(
    g: &'g Graph,
    params: &ParamStore,
    cfg: &BackboneConfig,
    cond: &Conditioning,
) -> Result<Vec<Var<'g>>> {
    let raw = match (cfg.arch, cfg.layer_mode) {
        (Arch::UnifiedSelfAttn | Arch::UnifiedFusedXattn, mode) => {
            vec![select_layers(g, params, UNIFIED, need(&cond.unified, "unified")?, mode)?]
        }
        (Arch::UnifiedDualXattn, LayerMode::FirstLast) => {
            let f = need(&cond.unified, "unified")?;
            vec![
                project_layer(g, params, UNIFIED, g.constant(f.first.clone()), Branch::First)?,
                project_layer(g, params, UNIFIED, g.constant(f.last.clone()), Branch::Last)?,
            ]
        }
        (Arch::UnifiedDualXattn, mode) => {
            vec![select_layers(g, params, UNIFIED, need(&cond.unified, "unified")?, mode)?]
        }
        (Arch::DecoupledDualXattn, mode) => vec![
            select_layers(g, params, TEXT, need(&cond.text, "text")?, mode)?,
            select_layers(g, params, IMAGE, need(&cond.image, "image")?, mode)?,
        ],
    };
    raw.into_iter()
        .map(|s| with_sequence_positions(g, s, cfg.pos_scale))
        .collect()
}

/// Head output tokens and the grid they unpatchify onto.
pub struct Prediction<'g> {
    pub tokens: Var<'g>,
    pub grid: PatchGrid,
}

/// Patch-embeds the joint latent, runs the blocks with the given conditioning
/// streams and applies the head.
pub fn predict<'g>(
    g: &'g Graph,
    params: &ParamStore,
    cfg: &BackboneConfig,
    joint: &JointLatent,
    t: f64,
    streams: &[Var<'g>],
    probe: Option<&mut Probe>,
) -> Result<Prediction<'g>> {
    let (patches, grid) = patch_split(&joint.data, cfg.patch)?;
    if patches.cols() != cfg.token_in() {
        return Err(MiveError::shape(format!(
            "joint latent tokens are {} wide, model expects {}",
            patches.cols(),
            cfg.token_in()
        )));
    }
    let mut pos = Matrix::zeros(grid.num_tokens(), cfg.dim);
    for i in 0..grid.num_tokens() {
        let (f, r, c) = grid.position(i);
        for (o, s) in pos.row_mut(i).iter_mut().zip(sinusoid_3d(f, r, c, cfg.dim)) {
            *o = cfg.pos_scale * s;
        }
    }
    let v = linear(g, params, "dit.patch_embed", g.constant(patches))?.add(g.constant(pos))?;
    let visual_clean = visual_clean_mask(grid);
    let (u0, clean, contexts, n_c) = if cfg.arch == Arch::UnifiedSelfAttn {
        let c = *streams
            .first()
            .ok_or_else(|| MiveError::invalid("self-attention model needs condition tokens"))?;
        let n_c = c.rows();
        let mut clean = vec![true; n_c];
        clean.extend_from_slice(&visual_clean);
        (Var::concat_rows(&[c, v])?, clean, &[][..], n_c)
    } else {
        if streams.len() != stream_dims(cfg).len() {
            return Err(MiveError::invalid(format!(
                "{} expects {} conditioning streams, got {}",
                cfg.arch.name(),
                stream_dims(cfg).len(),
                streams.len()
            )));
        }
        (v, visual_clean.clone(), streams, 0)
    };
    let u_p = dit_forward(g, params, cfg, u0, &clean, t, contexts, probe)?;
    let tokens = output_head(g, params, cfg, u_p, n_c, &visual_clean, t)?;
    Ok(Prediction { tokens, grid })
}

/// Full value-level forward: conditioning, blocks and head, unpatchified to
/// `(T'+1) x C x H' x W'`.
pub fn variant_forward(
    params: &ParamStore,
    cfg: &BackboneConfig,
    joint: &JointLatent,
    t: f64,
    cond: &Conditioning,
) -> Result<Array4<f64>> {
    let g = Graph::new();
    let streams = condition_streams(&g, params, cfg, cond)?;
    let pred = predict(&g, params, cfg, joint, t, &streams, None)?;
    unpatchify(&pred.tokens.value(), pred.grid)
}

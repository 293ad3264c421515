//! Cross-modal attention diagnostics: text-to-visual attention blocks, the
//! attention mask ratio, heatmaps and pixel-to-token mask downsampling.

use std::path::Path;

use mive_autograd::{softmax_rows, Matrix};
use ndarray::{Array2, Array3};
use serde::{Deserialize, Serialize};

use crate::encoder::{EncoderTrace, UnifiedContext};
use crate::error::{MiveError, Result};
use crate::io::video::write_gray_png;

/// Relative depths reported by [`depth_report`].
pub const REPORT_DEPTHS: [(&str, f64); 7] = [
    ("0", 0.0),
    ("1/6", 1.0 / 6.0),
    ("1/3", 1.0 / 3.0),
    ("1/2", 0.5),
    ("2/3", 2.0 / 3.0),
    ("5/6", 5.0 / 6.0),
    ("1.0", 1.0),
];

/// Text-rows by visual-columns block of one layer's head-averaged attention.
#[derive(Debug, Clone, PartialEq)]
pub struct CrossModalAttention {
    pub layer: usize,
    pub matrix: Matrix,
}

/// Visual token indices inside a target region, with the grid they live on.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenMask {
    members: Vec<usize>,
    grid: (usize, usize, usize),
}

impl TokenMask {
    pub fn new(mut members: Vec<usize>, grid: (usize, usize, usize)) -> Result<Self> {
        let m = grid.0 * grid.1 * grid.2;
        members.sort_unstable();
        members.dedup();
        if let Some(&bad) = members.iter().find(|&&i| i >= m) {
            return Err(MiveError::invalid(format!("mask index {bad} outside {m} visual tokens")));
        }
        Ok(Self { members, grid })
    }

    pub fn members(&self) -> &[usize] {
        &self.members
    }

    pub fn grid(&self) -> (usize, usize, usize) {
        self.grid
    }

    pub fn num_tokens(&self) -> usize {
        self.grid.0 * self.grid.1 * self.grid.2
    }

    /// `|Omega| / M`.
    pub fn fraction(&self) -> f64 {
        self.members.len() as f64 / self.num_tokens() as f64
    }
}

fn check_layer(trace: &EncoderTrace, layer: usize) -> Result<()> {
    let l = trace.num_layers();
    if layer == 0 || layer > l {
        return Err(MiveError::invalid(format!("layer {layer} outside 1..={l}")));
    }
    Ok(())
}

/// Full `S x S` softmax attention of block `layer`, averaged over heads.
pub fn full_attention(trace: &EncoderTrace, layer: usize) -> Result<Matrix> {
    check_layer(trace, layer)?;
    let qs = &trace.queries[layer - 1];
    let ks = &trace.keys[layer - 1];
    let heads = qs.len();
    let scale = 1.0 / (qs[0].cols() as f64).sqrt();
    let s = qs[0].rows();
    let mut avg = Matrix::zeros(s, s);
    for (q, k) in qs.iter().zip(ks) {
        let mut logits = q.matmul_t(k)?;
        logits.scale_in_place(scale);
        avg.add_assign(&softmax_rows(&logits));
    }
    avg.scale_in_place(1.0 / heads as f64);
    Ok(avg)
}

/// Rows of text tokens, columns of visual tokens, of the head-averaged attention.
pub fn cross_modal_attention(
    trace: &EncoderTrace,
    ctx: &UnifiedContext,
    layer: usize,
) -> Result<CrossModalAttention> {
    check_layer(trace, layer)?;
    let qs = &trace.queries[layer - 1];
    let ks = &trace.keys[layer - 1];
    if qs[0].rows() != ctx.len() {
        return Err(MiveError::shape(format!(
            "trace has {} tokens, context has {}",
            qs[0].rows(),
            ctx.len()
        )));
    }
    let (n, m) = (ctx.num_text, ctx.num_visual);
    let scale = 1.0 / (qs[0].cols() as f64).sqrt();
    let mut out = Matrix::zeros(n, m);
    for (q, k) in qs.iter().zip(ks) {
        // Softmax runs over the full row; only text rows are needed.
        let mut logits = q.slice_rows(0, n).matmul_t(k)?;
        logits.scale_in_place(scale);
        out.add_assign(&softmax_rows(&logits).slice_cols(n, m));
    }
    out.scale_in_place(1.0 / qs.len() as f64);
    Ok(CrossModalAttention { layer, matrix: out })
}

/// Share of text-to-visual attention mass that lands inside the mask.
pub fn attention_mask_ratio(a: &CrossModalAttention, mask: &TokenMask) -> Result<f64> {
    let m = a.matrix.cols();
    if mask.num_tokens() != m {
        return Err(MiveError::shape(format!(
            "mask covers {} tokens, attention has {m} visual columns",
            mask.num_tokens()
        )));
    }
    let cols = a.matrix.column_sums();
    let total: f64 = cols.data().iter().sum();
    if total <= 0.0 {
        return Err(MiveError::Degenerate(
            "attention block carries no mass; mask ratio undefined".into(),
        ));
    }
    let inside: f64 = mask.members().iter().map(|&j| cols.data()[j]).sum();
    Ok((inside / total).clamp(0.0, 1.0))
}

/// Column means of the attention block reshaped to `(t, h, w)`.
pub fn mean_text_heatmap(a: &CrossModalAttention, grid: (usize, usize, usize)) -> Result<Array3<f64>> {
    let (n, m) = a.matrix.shape();
    if grid.0 * grid.1 * grid.2 != m {
        return Err(MiveError::shape(format!("grid {grid:?} does not hold {m} visual tokens")));
    }
    if n == 0 {
        return Err(MiveError::Degenerate("no text tokens to average over".into()));
    }
    let mut sums = vec![0.0; m];
    for i in 0..n {
        for (s, v) in sums.iter_mut().zip(a.matrix.row(i)) {
            *s += v;
        }
    }
    Array3::from_shape_vec(grid, sums.into_iter().map(|s| s / n as f64).collect())
        .map_err(|e| MiveError::shape(e.to_string()))
}

/// A token joins the mask when strictly more than half its pixels are set.
pub fn downsample_mask(pixel_mask: &Array3<bool>, patch: usize) -> Result<TokenMask> {
    let (t, h, w) = pixel_mask.dim();
    if patch == 0 || h % patch != 0 || w % patch != 0 {
        return Err(MiveError::shape(format!(
            "mask {h}x{w} not divisible by patch {patch}"
        )));
    }
    let (rows, cols) = (h / patch, w / patch);
    let area = patch * patch;
    let mut members = Vec::new();
    for f in 0..t {
        for r in 0..rows {
            for c in 0..cols {
                let mut count = 0;
                for dy in 0..patch {
                    for dx in 0..patch {
                        if pixel_mask[[f, r * patch + dy, c * patch + dx]] {
                            count += 1;
                        }
                    }
                }
                if 2 * count > area {
                    members.push((f * rows + r) * cols + c);
                }
            }
        }
    }
    TokenMask::new(members, (t, rows, cols))
}

/// Encoder layer for relative depth `d`, where 0 is the first block and 1 the
/// last; fractional positions round to the nearest layer.
pub fn depth_to_layer(depth: f64, layers: usize) -> usize {
    let d = depth.clamp(0.0, 1.0);
    (d * (layers - 1) as f64).round() as usize + 1
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DepthEntry {
    pub depth: String,
    pub layer: usize,
    pub r_mask: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiagnosticReport {
    pub num_layers: usize,
    pub mask_fraction: f64,
    /// `R_mask` for every layer `1..=L`.
    pub per_layer: Vec<f64>,
    /// Relative-depth columns with the layer each one resolved to.
    pub depths: Vec<DepthEntry>,
}

/// `R_mask` per layer plus the relative-depth table.
pub fn depth_report(trace: &EncoderTrace, ctx: &UnifiedContext, mask: &TokenMask) -> Result<DiagnosticReport> {
    let l = trace.num_layers();
    let per_layer = (1..=l)
        .map(|layer| attention_mask_ratio(&cross_modal_attention(trace, ctx, layer)?, mask))
        .collect::<Result<Vec<_>>>()?;
    let depths = REPORT_DEPTHS
        .iter()
        .map(|&(label, d)| {
            let layer = depth_to_layer(d, l);
            DepthEntry {
                depth: label.to_string(),
                layer,
                r_mask: per_layer[layer - 1],
            }
        })
        .collect();
    Ok(DiagnosticReport {
        num_layers: l,
        mask_fraction: mask.fraction(),
        per_layer,
        depths,
    })
}

/// Writes one min-max normalized PNG per heatmap frame plus the raw values as
/// `{stem}.json`.
pub fn write_heatmap(dir: impl AsRef<Path>, stem: &str, heat: &Array3<f64>) -> Result<()> {
    let dir = dir.as_ref();
    std::fs::create_dir_all(dir).map_err(|e| MiveError::io(dir, e))?;
    let lo = heat.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = heat.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let span = if hi > lo { hi - lo } else { 1.0 };
    let (t, h, w) = heat.dim();
    for f in 0..t {
        let img = Array2::from_shape_fn((h, w), |(y, x)| (heat[[f, y, x]] - lo) / span);
        write_gray_png(dir.join(format!("{stem}_f{f:03}.png")), &img)?;
    }
    let raw = serde_json::json!({
        "shape": [t, h, w],
        "min": lo,
        "max": hi,
        "values": heat.iter().copied().collect::<Vec<_>>(),
    });
    let path = dir.join(format!("{stem}.json"));
    std::fs::write(&path, serde_json::to_vec(&raw)?).map_err(|e| MiveError::io(&path, e))
}
